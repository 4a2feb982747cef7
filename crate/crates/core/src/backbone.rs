//! Desk-scale 1-D CNN classifiers exposing a feature extractor F and a
//! linear head g. Two bodies: a residual net and a plain fully-convolutional
//! net, both ending in global average pooling with feature_dim 32.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::ckpt;
use crate::error::{Error, Result};
use crate::tensor::{AdamW, Gradients, Tape, Tensor, Var};
use crate::transforms::{slots, RngStream};

pub const FEATURE_DIM: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    MiniResnet1d,
    MiniFcn,
}

impl Arch {
    pub fn name(&self) -> &'static str {
        match self {
            Arch::MiniResnet1d => "mini_resnet1d",
            Arch::MiniFcn => "mini_fcn",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "mini_resnet1d" => Ok(Arch::MiniResnet1d),
            "mini_fcn" => Ok(Arch::MiniFcn),
            other => Err(Error::Config(format!("unknown backbone arch '{other}'"))),
        }
    }
}

#[derive(Clone)]
struct Conv {
    w: Tensor, // [C_out, C_in, K]
    b: Tensor, // [C_out]
    stride: usize,
    padding: usize,
}

impl Conv {
    fn init(rng: &mut ChaCha8Rng, c_out: usize, c_in: usize, k: usize, stride: usize) -> Self {
        let fan_in = c_in * k;
        let a = (1.0 / fan_in as f64).sqrt();
        let w = uniform(rng, &[c_out, c_in, k], a);
        let b = uniform(rng, &[c_out], a);
        Conv {
            w,
            b,
            stride,
            padding: k / 2,
        }
    }
}

#[derive(Clone)]
struct Linear {
    w: Tensor, // [In, Out]
    b: Tensor, // [Out]
}

impl Linear {
    fn init(rng: &mut ChaCha8Rng, n_in: usize, n_out: usize) -> Self {
        let a = (1.0 / n_in as f64).sqrt();
        Linear {
            w: uniform(rng, &[n_in, n_out], a),
            b: uniform(rng, &[n_out], a),
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], a: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-a..a)).collect();
    Tensor::new(shape.to_vec(), data)
        .expect("valid shape")
        .requires_grad(true)
}

#[derive(Clone)]
enum Body {
    Fcn {
        c1: Conv,
        c2: Conv,
        c3: Conv,
    },
    Resnet {
        stem: Conv,
        b1a: Conv,
        b1b: Conv,
        b2a: Conv,
        b2b: Conv,
        down: Conv,
    },
}

/// Feature extractor + classifier with a stable parameter ordering.
#[derive(Clone)]
pub struct Backbone {
    arch: Arch,
    in_channels: usize,
    input_len: usize,
    num_classes: usize,
    body: Body,
    head: Linear,
}

/// Tape handles for one bound forward pass.
pub struct Bound {
    pub param_vars: Vec<Var>,
}

impl Backbone {
    /// Deterministic init from the run seed (init draws live on their own
    /// stream so augmentation choices can never shift them).
    pub fn new(arch: Arch, in_channels: usize, input_len: usize, num_classes: usize, seed: u64) -> Self {
        let mut rng = RngStream::run(seed, 0, slots::BACKBONE_INIT).rng();
        let body = match arch {
            Arch::MiniFcn => Body::Fcn {
                c1: Conv::init(&mut rng, 16, in_channels, 7, 1),
                c2: Conv::init(&mut rng, 32, 16, 5, 1),
                c3: Conv::init(&mut rng, FEATURE_DIM, 32, 3, 1),
            },
            Arch::MiniResnet1d => Body::Resnet {
                stem: Conv::init(&mut rng, 16, in_channels, 7, 1),
                b1a: Conv::init(&mut rng, 16, 16, 7, 1),
                b1b: Conv::init(&mut rng, 16, 16, 7, 1),
                b2a: Conv::init(&mut rng, FEATURE_DIM, 16, 7, 2),
                b2b: Conv::init(&mut rng, FEATURE_DIM, FEATURE_DIM, 7, 1),
                down: Conv::init(&mut rng, FEATURE_DIM, 16, 1, 2),
            },
        };
        let head = Linear::init(&mut rng, FEATURE_DIM, num_classes);
        let bb = Backbone {
            arch,
            in_channels,
            input_len,
            num_classes,
            body,
            head,
        };
        log::debug!(
            "backbone {} ({} params) for {}x{} input, {} classes",
            arch.name(),
            bb.param_count(),
            in_channels,
            input_len,
            num_classes
        );
        bb
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn feature_dim(&self) -> usize {
        FEATURE_DIM
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn input_len(&self) -> usize {
        self.input_len
    }

    fn param_list(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out = Vec::new();
        match &self.body {
            Body::Fcn { c1, c2, c3 } => {
                out.push(("c1.w", &c1.w));
                out.push(("c1.b", &c1.b));
                out.push(("c2.w", &c2.w));
                out.push(("c2.b", &c2.b));
                out.push(("c3.w", &c3.w));
                out.push(("c3.b", &c3.b));
            }
            Body::Resnet {
                stem,
                b1a,
                b1b,
                b2a,
                b2b,
                down,
            } => {
                out.push(("stem.w", &stem.w));
                out.push(("stem.b", &stem.b));
                out.push(("b1a.w", &b1a.w));
                out.push(("b1a.b", &b1a.b));
                out.push(("b1b.w", &b1b.w));
                out.push(("b1b.b", &b1b.b));
                out.push(("b2a.w", &b2a.w));
                out.push(("b2a.b", &b2a.b));
                out.push(("b2b.w", &b2b.w));
                out.push(("b2b.b", &b2b.b));
                out.push(("down.w", &down.w));
                out.push(("down.b", &down.b));
            }
        }
        out.push(("head.w", &self.head.w));
        out.push(("head.b", &self.head.b));
        out
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.param_list().into_iter().map(|(_, t)| t).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        match &mut self.body {
            Body::Fcn { c1, c2, c3 } => {
                out.extend([&mut c1.w, &mut c1.b, &mut c2.w, &mut c2.b, &mut c3.w, &mut c3.b]);
            }
            Body::Resnet {
                stem,
                b1a,
                b1b,
                b2a,
                b2b,
                down,
            } => {
                out.extend([
                    &mut stem.w, &mut stem.b, &mut b1a.w, &mut b1a.b, &mut b1b.w, &mut b1b.b,
                    &mut b2a.w, &mut b2a.b, &mut b2b.w, &mut b2b.b, &mut down.w, &mut down.b,
                ]);
            }
        }
        out.extend([&mut self.head.w, &mut self.head.b]);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    pub fn param_sizes(&self) -> Vec<usize> {
        self.params().iter().map(|t| t.numel()).collect()
    }

    /// Registers all parameters on the tape. With `trainable` false they are
    /// constants (used by the policy pass and saliency).
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let param_vars = self
            .params()
            .into_iter()
            .map(|t| {
                if trainable {
                    tape.input(t)
                } else {
                    tape.constant(t)
                }
            })
            .collect();
        Bound { param_vars }
    }

    fn conv_block(
        tape: &mut Tape,
        x: Var,
        wv: Var,
        bv: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let y = tape.conv1d(x, wv, stride, padding)?;
        tape.add_bias(y, bv)
    }

    /// Embedding after global average pooling: [N,C,L] -> [N,feature_dim].
    pub fn features_on(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let shape = tape.value(x).shape().to_vec();
        let (c_axis, l_axis) = match shape.len() {
            3 => (1, 2),
            2 => (0, 1),
            _ => return Err(Error::dim("features: input must be [N,C,L] or [C,L]")),
        };
        if shape[c_axis] != self.in_channels || shape[l_axis] != self.input_len {
            return Err(Error::dim(format!(
                "features: input {:?} does not match backbone {}x{}",
                shape, self.in_channels, self.input_len
            )));
        }
        let p = &bound.param_vars;
        let z = match &self.body {
            Body::Fcn { c1, c2, c3 } => {
                let h = Self::conv_block(tape, x, p[0], p[1], c1.stride, c1.padding)?;
                let h = tape.relu(h);
                let h = Self::conv_block(tape, h, p[2], p[3], c2.stride, c2.padding)?;
                let h = tape.relu(h);
                let h = Self::conv_block(tape, h, p[4], p[5], c3.stride, c3.padding)?;
                tape.relu(h)
            }
            Body::Resnet {
                stem,
                b1a,
                b1b,
                b2a,
                b2b,
                down,
            } => {
                let h = Self::conv_block(tape, x, p[0], p[1], stem.stride, stem.padding)?;
                let h = tape.relu(h);
                // block 1: identity skip
                let a = Self::conv_block(tape, h, p[2], p[3], b1a.stride, b1a.padding)?;
                let a = tape.relu(a);
                let a = Self::conv_block(tape, a, p[4], p[5], b1b.stride, b1b.padding)?;
                let s1 = tape.add(a, h)?;
                let h = tape.relu(s1);
                // block 2: stride-2 downsample with 1x1 projection skip
                let a = Self::conv_block(tape, h, p[6], p[7], b2a.stride, b2a.padding)?;
                let a = tape.relu(a);
                let a = Self::conv_block(tape, a, p[8], p[9], b2b.stride, b2b.padding)?;
                let skip = Self::conv_block(tape, h, p[10], p[11], down.stride, down.padding)?;
                let s2 = tape.add(a, skip)?;
                tape.relu(s2)
            }
        };
        tape.global_avg_pool(z)
    }

    /// Classifier head: affine map [N,feature_dim] -> [N,num_classes].
    pub fn logits_on(&self, tape: &mut Tape, bound: &Bound, f: Var) -> Result<Var> {
        let fs = tape.value(f).shape().to_vec();
        let f2 = match fs.len() {
            2 => f,
            1 => tape.reshape(f, vec![1, fs[0]])?,
            _ => return Err(Error::dim("logits: features must be [N,F] or [F]")),
        };
        if tape.value(f2).shape()[1] != FEATURE_DIM {
            return Err(Error::dim(format!(
                "logits: feature width {} != {}",
                tape.value(f2).shape()[1],
                FEATURE_DIM
            )));
        }
        let n = bound.param_vars.len();
        let y = tape.matmul(f2, bound.param_vars[n - 2])?;
        tape.add_bias(y, bound.param_vars[n - 1])
    }

    /// Value-level features for a batch (no gradients recorded).
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.constant(x);
        let f = self.features_on(&mut tape, &bound, xv)?;
        Ok(tape.value(f).clone())
    }

    /// Value-level logits from features (no gradients recorded).
    pub fn logits(&self, f: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let fv = tape.constant(f);
        let y = self.logits_on(&mut tape, &bound, fv)?;
        Ok(tape.value(y).clone())
    }

    /// Value-level class predictions (argmax of logits).
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let f = self.features(x)?;
        let logits = self.logits(&f)?;
        let c = self.num_classes;
        Ok((0..logits.shape()[0])
            .map(|i| {
                let row = &logits.data()[i * c..(i + 1) * c];
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(j, _)| j)
                    .unwrap()
            })
            .collect())
    }

    /// One AdamW step on batch cross-entropy; returns the pre-step loss.
    pub fn train_step(
        &mut self,
        x: &Tensor,
        labels: &[usize],
        opt: &mut AdamW,
        lr: f64,
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, true);
        let xv = tape.constant(x);
        let f = self.features_on(&mut tape, &bound, xv)?;
        let logits = self.logits_on(&mut tape, &bound, f)?;
        let loss = tape.cross_entropy(logits, labels)?;
        let loss_value = tape.value(loss).item();
        if !loss_value.is_finite() {
            return Err(Error::Divergence(format!("train loss = {loss_value}")));
        }
        let grads = tape.backward(loss)?;
        self.apply_grads(&grads, &bound, opt, lr)?;
        Ok(loss_value)
    }

    pub fn apply_grads(
        &mut self,
        grads: &Gradients,
        bound: &Bound,
        opt: &mut AdamW,
        lr: f64,
    ) -> Result<()> {
        let grad_list: Vec<Tensor> = bound.param_vars.iter().map(|&v| grads.wrt(v)).collect();
        let mut params: Vec<Tensor> = self.params().into_iter().cloned().collect();
        opt.step(&mut params, &grad_list, lr)?;
        for (dst, src) in self.params_mut().into_iter().zip(params) {
            *dst = src.requires_grad(true);
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tag = match self.arch {
            Arch::MiniResnet1d => ckpt::TAG_MINI_RESNET1D,
            Arch::MiniFcn => ckpt::TAG_MINI_FCN,
        };
        let meta = [
            self.in_channels as u32,
            self.input_len as u32,
            self.num_classes as u32,
            FEATURE_DIM as u32,
        ];
        let named = self.param_list();
        ckpt::write_checkpoint(path, tag, &meta, &named)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (tag, meta, tensors) = ckpt::read_checkpoint(path)?;
        let arch = match tag {
            ckpt::TAG_MINI_RESNET1D => Arch::MiniResnet1d,
            ckpt::TAG_MINI_FCN => Arch::MiniFcn,
            other => return Err(Error::Format(format!("checkpoint tag {other} is not a backbone"))),
        };
        if meta.len() != 4 {
            return Err(Error::Format("backbone checkpoint meta must have 4 words".into()));
        }
        let mut bb = Backbone::new(arch, meta[0] as usize, meta[1] as usize, meta[2] as usize, 0);
        let expected: Vec<&'static str> = bb.param_list().iter().map(|(n, _)| *n).collect();
        if tensors.len() != expected.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, arch wants {}",
                tensors.len(),
                expected.len()
            )));
        }
        for (slot, (name, tensor)) in bb.params_mut().into_iter().zip(tensors.iter()) {
            if slot.shape() != tensor.shape() {
                return Err(Error::Format(format!(
                    "checkpoint tensor '{name}' shape {:?} != expected {:?}",
                    tensor.shape(),
                    slot.shape()
                )));
            }
            *slot = tensor.clone().requires_grad(true);
        }
        Ok(bb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(seed: u64, n: usize) -> Tensor {
        let mut rng = RngStream::new(seed, 0, 0, 50).rng();
        let data: Vec<f64> = (0..n * 2 * 32).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(vec![n, 2, 32], data).unwrap()
    }

    #[test]
    fn features_deterministic_and_shaped() {
        for arch in [Arch::MiniFcn, Arch::MiniResnet1d] {
            let bb = Backbone::new(arch, 2, 32, 3, 11);
            let x = batch(1, 4);
            let f1 = bb.features(&x).unwrap();
            let f2 = bb.features(&x).unwrap();
            assert_eq!(f1.shape(), &[4, FEATURE_DIM]);
            assert!(f1.bit_eq(&f2));
            // identical rows in, identical embeddings out
            let mut two = x.data()[..2 * 32].to_vec();
            two.extend_from_slice(&x.data()[..2 * 32]);
            let xx = Tensor::new(vec![2, 2, 32], two).unwrap();
            let ff = bb.features(&xx).unwrap();
            let (r0, r1) = (
                &ff.data()[..FEATURE_DIM],
                &ff.data()[FEATURE_DIM..2 * FEATURE_DIM],
            );
            assert!(r0.iter().zip(r1).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn logits_is_affine() {
        let bb = Backbone::new(Arch::MiniFcn, 2, 32, 4, 3);
        let mut rng = RngStream::new(5, 0, 0, 51).rng();
        let f1d: Vec<f64> = (0..FEATURE_DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f2d: Vec<f64> = (0..FEATURE_DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f1 = Tensor::new(vec![1, FEATURE_DIM], f1d.clone()).unwrap();
        let f2 = Tensor::new(vec![1, FEATURE_DIM], f2d.clone()).unwrap();
        let sum = Tensor::new(
            vec![1, FEATURE_DIM],
            f1d.iter().zip(&f2d).map(|(a, b)| a + b).collect(),
        )
        .unwrap();
        let (y1, y2, ys) = (
            bb.logits(&f1).unwrap(),
            bb.logits(&f2).unwrap(),
            bb.logits(&sum).unwrap(),
        );
        let bias = bb.head.b.data();
        for j in 0..4 {
            let want = y1.data()[j] + y2.data()[j] - bias[j];
            assert!((ys.data()[j] - want).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_head_gives_zero_logits() {
        let mut bb = Backbone::new(Arch::MiniFcn, 2, 32, 3, 7);
        {
            let n = bb.params().len();
            let mut params = bb.params_mut();
            *params[n - 2] = Tensor::zeros(&[FEATURE_DIM, 3]).requires_grad(true);
            *params[n - 1] = Tensor::zeros(&[3]).requires_grad(true);
        }
        let f = Tensor::new(vec![2, FEATURE_DIM], vec![0.3; 2 * FEATURE_DIM]).unwrap();
        let y = bb.logits(&f).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn initial_loss_near_log_num_classes() {
        for arch in [Arch::MiniFcn, Arch::MiniResnet1d] {
            let mut bb = Backbone::new(arch, 2, 32, 5, 23);
            let x = batch(9, 8);
            let labels = [0, 1, 2, 3, 4, 0, 1, 2];
            let mut opt = AdamW::new(&bb.param_sizes(), 0.0);
            let loss = bb.train_step(&x, &labels, &mut opt, 0.0).unwrap();
            assert!(
                (loss - 5.0f64.ln()).abs() < 0.2,
                "{arch:?}: first loss {loss} vs ln(5) = {}",
                5.0f64.ln()
            );
        }
    }

    #[test]
    fn training_is_seed_deterministic() {
        let run = || {
            let mut bb = Backbone::new(Arch::MiniFcn, 2, 32, 3, 77);
            let mut opt = AdamW::new(&bb.param_sizes(), 1e-2);
            let x = batch(3, 6);
            let labels = [0, 1, 2, 0, 1, 2];
            for _ in 0..5 {
                bb.train_step(&x, &labels, &mut opt, 1e-2).unwrap();
            }
            bb.params()
                .iter()
                .flat_map(|t| t.data().iter().map(|v| v.to_bits()))
                .collect::<Vec<u64>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn separable_toy_set_reaches_full_accuracy() {
        // class 0: low-frequency sine on channel 0; class 1: high-frequency
        let n = 60;
        let mut data = Vec::with_capacity(n * 2 * 32);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % 2;
            let f = if class == 0 { 2.0 } else { 7.0 };
            let phase = (i / 2) as f64 * 0.1;
            for c in 0..2 {
                for t in 0..32 {
                    let v = ((t as f64 / 32.0) * std::f64::consts::TAU * f + phase).sin()
                        * if c == 0 { 1.0 } else { 0.5 };
                    data.push(v);
                }
            }
            labels.push(class);
        }
        let x = Tensor::new(vec![n, 2, 32], data).unwrap();
        let mut bb = Backbone::new(Arch::MiniFcn, 2, 32, 2, 5);
        let mut opt = AdamW::new(&bb.param_sizes(), 1e-2);
        let mut acc = 0.0;
        for _ in 0..200 {
            bb.train_step(&x, &labels, &mut opt, 1e-2).unwrap();
            let preds = bb.predict(&x).unwrap();
            acc = preds
                .iter()
                .zip(&labels)
                .filter(|(a, b)| a == b)
                .count() as f64
                / n as f64;
            if acc == 1.0 {
                break;
            }
        }
        assert_eq!(acc, 1.0, "did not reach 100% train accuracy");
    }

    #[test]
    fn checkpoint_roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bb.ckpt");
        let bb = Backbone::new(Arch::MiniResnet1d, 2, 32, 3, 13);
        bb.save(&path).unwrap();
        let loaded = Backbone::load(&path).unwrap();
        assert_eq!(loaded.arch(), Arch::MiniResnet1d);
        for (a, b) in bb.params().iter().zip(loaded.params().iter()) {
            assert!(a.bit_eq(b));
        }
        let x = batch(2, 3);
        assert!(bb.features(&x).unwrap().bit_eq(&loaded.features(&x).unwrap()));
    }
}
