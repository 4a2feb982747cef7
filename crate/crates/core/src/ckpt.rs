//! Versioned binary checkpoint container shared by the backbone and the
//! policy network.
//!
//! Layout: magic, version, arch tag, u32 meta words, shape table, then the
//! little-endian f64 payload in table order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"CAAPCKPT";
const VERSION: u32 = 1;

pub const TAG_MINI_RESNET1D: u8 = 0;
pub const TAG_MINI_FCN: u8 = 1;
pub const TAG_POLICY_NET: u8 = 100;

pub fn write_checkpoint(
    path: &Path,
    tag: u8,
    meta: &[u32],
    tensors: &[(&str, &Tensor)],
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[tag])?;
    w.write_all(&(meta.len() as u32).to_le_bytes())?;
    for m in meta {
        w.write_all(&m.to_le_bytes())?;
    }
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u16).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&[t.rank() as u8])?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
    }
    for (_, t) in tensors {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<(u8, Vec<u32>, Vec<(String, Tensor)>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag)?;
    let meta_len = read_u32(&mut r)? as usize;
    let mut meta = Vec::with_capacity(meta_len);
    for _ in 0..meta_len {
        meta.push(read_u32(&mut r)?);
    }
    let num = read_u32(&mut r)? as usize;
    let mut entries: Vec<(String, Vec<usize>)> = Vec::with_capacity(num);
    for _ in 0..num {
        let mut lb = [0u8; 2];
        r.read_exact(&mut lb)?;
        let mut name = vec![0u8; u16::from_le_bytes(lb) as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Format("non-utf8 tensor name".into()))?;
        let mut rb = [0u8; 1];
        r.read_exact(&mut rb)?;
        let mut shape = Vec::with_capacity(rb[0] as usize);
        for _ in 0..rb[0] {
            shape.push(read_u32(&mut r)? as usize);
        }
        entries.push((name, shape));
    }
    let mut tensors = Vec::with_capacity(num);
    for (name, shape) in entries {
        let numel: usize = shape.iter().product();
        let mut data = vec![0.0; numel];
        let mut buf = [0u8; 8];
        for v in data.iter_mut() {
            r.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        tensors.push((name, Tensor::new(shape, data)?));
    }
    Ok((tag[0], meta, tensors))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}
