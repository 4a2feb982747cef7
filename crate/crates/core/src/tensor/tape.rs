//! Wengert-list reverse-mode autodiff.
//!
//! Ops are recorded in execution order; [`Tape::backward`] walks the list in
//! exact reverse order and accumulates gradients for every `requires_grad`
//! leaf reachable from the loss. A tape is single-shot: re-record to
//! differentiate again.

use crate::error::{Error, Result};
use crate::tensor::{same_shape, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// grad_fn(grad_out, needs) -> per-parent gradients (None where not needed).
type GradFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<Var>,
    grad_fn: Option<GradFn>,
    requires: bool,
}

/// Recorded computation graph for one forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    validate: bool,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            validate: cfg!(debug_assertions),
            consumed: false,
        }
    }

    /// Enables (or disables) the finite-value check after every op.
    pub fn with_validation(mut self, yes: bool) -> Self {
        self.validate = yes;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Registers a leaf; it accumulates a gradient iff `t.grad_required()`.
    pub fn input(&mut self, t: &Tensor) -> Var {
        let requires = t.grad_required();
        self.push(t.clone(), vec![], None, requires)
    }

    /// Registers a leaf that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.clone(), vec![], None, false)
    }

    fn push(
        &mut self,
        value: Tensor,
        parents: Vec<Var>,
        grad_fn: Option<GradFn>,
        requires: bool,
    ) -> Var {
        if self.validate && !value.is_finite() {
            panic!(
                "non-finite value produced on tape (node {}, shape {:?})",
                self.nodes.len(),
                value.shape()
            );
        }
        self.nodes.push(Node {
            value,
            parents,
            grad_fn,
            requires,
        });
        Var(self.nodes.len() - 1)
    }

    fn requires_any(&self, parents: &[Var]) -> bool {
        parents.iter().any(|p| self.nodes[p.0].requires)
    }

    /// Records an op with a custom backward. Gradient closures receive the
    /// output gradient plus a per-parent "needed" mask and must return one
    /// entry per parent.
    pub(crate) fn record(
        &mut self,
        value: Tensor,
        parents: Vec<Var>,
        grad_fn: GradFn,
    ) -> Var {
        let requires = self.requires_any(&parents);
        let f = if requires { Some(grad_fn) } else { None };
        self.push(value, parents, f, requires)
    }

    // ---- elementwise -----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "add")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.record(out, vec![a, b], Box::new(|g, needs| {
            vec![
                needs[0].then(|| g.clone()),
                needs[1].then(|| g.clone()),
            ]
        })))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "sub")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.record(out, vec![a, b], Box::new(|g, needs| {
            vec![
                needs[0].then(|| g.clone()),
                needs[1].then(|| g.map(|x| -x)),
            ]
        })))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "mul")?;
        let (av, bv) = (self.value(a).clone(), self.value(b).clone());
        let out = zip_map(&av, &bv, |x, y| x * y);
        Ok(self.record(out, vec![a, b], Box::new(move |g, needs| {
            vec![
                needs[0].then(|| zip_map(g, &bv, |gi, y| gi * y)),
                needs[1].then(|| zip_map(g, &av, |gi, x| gi * x)),
            ]
        })))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "div")?;
        if self.value(b).data().iter().any(|&y| y == 0.0) {
            return Err(Error::Numeric("div: zero denominator element".into()));
        }
        let (av, bv) = (self.value(a).clone(), self.value(b).clone());
        let out = zip_map(&av, &bv, |x, y| x / y);
        Ok(self.record(out, vec![a, b], Box::new(move |g, needs| {
            vec![
                needs[0].then(|| zip_map(g, &bv, |gi, y| gi / y)),
                needs[1].then(|| {
                    let mut d = vec![0.0; g.numel()];
                    for i in 0..d.len() {
                        let y = bv.data()[i];
                        d[i] = -g.data()[i] * av.data()[i] / (y * y);
                    }
                    Tensor::new(bv.shape().to_vec(), d).unwrap()
                }),
            ]
        })))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| -x);
        self.record(out, vec![a], Box::new(|g, _| vec![Some(g.map(|x| -x))]))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.record(out, vec![a], Box::new(|g, _| vec![Some(g.clone())]))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.record(out, vec![a], Box::new(move |g, _| {
            vec![Some(g.map(|x| x * c))]
        }))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let av = self.value(a).clone();
        let out = av.map(|x| x.max(0.0));
        self.record(out, vec![a], Box::new(move |g, _| {
            vec![Some(zip_map(g, &av, |gi, x| if x > 0.0 { gi } else { 0.0 }))]
        }))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(stable_sigmoid);
        let yv = out.clone();
        self.record(out, vec![a], Box::new(move |g, _| {
            vec![Some(zip_map(g, &yv, |gi, y| gi * y * (1.0 - y)))]
        }))
    }

    /// Square root; the gradient at exactly 0 is defined as 0.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::sqrt);
        let yv = out.clone();
        self.record(out, vec![a], Box::new(move |g, _| {
            vec![Some(zip_map(g, &yv, |gi, y| {
                if y == 0.0 {
                    0.0
                } else {
                    gi / (2.0 * y)
                }
            }))]
        }))
    }

    /// max(x, c); gradient is 0 wherever the clamp is active (x <= c).
    pub fn clamp_min(&mut self, a: Var, c: f64) -> Var {
        let av = self.value(a).clone();
        let out = av.map(|x| x.max(c));
        self.record(out, vec![a], Box::new(move |g, _| {
            vec![Some(zip_map(g, &av, |gi, x| if x > c { gi } else { 0.0 }))]
        }))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let av = self.value(a).clone();
        let out = av.map(f64::abs);
        self.record(out, vec![a], Box::new(move |g, _| {
            vec![Some(zip_map(g, &av, |gi, x| gi * sign0(x)))]
        }))
    }

    // ---- reductions and shape ops ----------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let total: f64 = self.value(a).data().iter().sum();
        let shape = self.value(a).shape().to_vec();
        self.record(Tensor::scalar(total), vec![a], Box::new(move |g, _| {
            vec![Some(Tensor::full(&shape, g.item()))]
        }))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let total: f64 = self.value(a).data().iter().sum();
        let shape = self.value(a).shape().to_vec();
        self.record(Tensor::scalar(total / n), vec![a], Box::new(move |g, _| {
            vec![Some(Tensor::full(&shape, g.item() / n))]
        }))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(a).reshaped(shape)?;
        let back = self.value(a).shape().to_vec();
        Ok(self.record(out, vec![a], Box::new(move |g, _| {
            vec![Some(g.reshaped(back.clone()).unwrap())]
        })))
    }

    /// Stacks equal-shaped tensors along a new leading axis.
    pub fn stack(&mut self, vars: &[Var]) -> Result<Var> {
        if vars.is_empty() {
            return Err(Error::contract("stack: empty input"));
        }
        let inner = self.value(vars[0]).shape().to_vec();
        let step = self.value(vars[0]).numel();
        let mut data = Vec::with_capacity(step * vars.len());
        for &v in vars {
            if self.value(v).shape() != inner.as_slice() {
                return Err(Error::dim("stack: member shapes differ"));
            }
            data.extend_from_slice(self.value(v).data());
        }
        let mut shape = vec![vars.len()];
        shape.extend_from_slice(&inner);
        let out = Tensor::new(shape, data)?;
        Ok(self.record(out, vars.to_vec(), Box::new(move |g, needs| {
            needs
                .iter()
                .enumerate()
                .map(|(i, &need)| {
                    need.then(|| {
                        let chunk = g.data()[i * step..(i + 1) * step].to_vec();
                        Tensor::new(inner.clone(), chunk).unwrap()
                    })
                })
                .collect()
        })))
    }

    /// Concatenates two matrices column-wise: [N,A] ++ [N,B] -> [N,A+B].
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::dim(format!(
                "concat_cols: incompatible shapes {sa:?}, {sb:?}"
            )));
        }
        let (n, wa, wb) = (sa[0], sa[1], sb[1]);
        let mut data = Vec::with_capacity(n * (wa + wb));
        for i in 0..n {
            data.extend_from_slice(&self.value(a).data()[i * wa..(i + 1) * wa]);
            data.extend_from_slice(&self.value(b).data()[i * wb..(i + 1) * wb]);
        }
        let out = Tensor::new(vec![n, wa + wb], data)?;
        Ok(self.record(out, vec![a, b], Box::new(move |g, needs| {
            let part = |off: usize, w: usize| {
                let mut d = Vec::with_capacity(n * w);
                for i in 0..n {
                    let row = &g.data()[i * (wa + wb)..(i + 1) * (wa + wb)];
                    d.extend_from_slice(&row[off..off + w]);
                }
                Tensor::new(vec![n, w], d).unwrap()
            };
            vec![
                needs[0].then(|| part(0, wa)),
                needs[1].then(|| part(wa, wb)),
            ]
        })))
    }

    /// Column slice of a matrix: [N,K] -> [N, end-start].
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.value(a).shape();
        if s.len() != 2 || end > s[1] || start >= end {
            return Err(Error::dim(format!(
                "slice_cols: range {start}..{end} on shape {s:?}"
            )));
        }
        let (n, k, w) = (s[0], s[1], end - start);
        let mut data = Vec::with_capacity(n * w);
        for i in 0..n {
            data.extend_from_slice(&self.value(a).data()[i * k + start..i * k + end]);
        }
        let out = Tensor::new(vec![n, w], data)?;
        Ok(self.record(out, vec![a], Box::new(move |g, _| {
            let mut d = vec![0.0; n * k];
            for i in 0..n {
                d[i * k + start..i * k + end].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
            }
            vec![Some(Tensor::new(vec![n, k], d).unwrap())]
        })))
    }

    /// Row lookup (embedding): table [R,D] indexed by `ids` -> [N,D].
    pub fn embed_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.value(table).shape();
        if s.len() != 2 {
            return Err(Error::dim("embed_rows: table must be 2-D"));
        }
        let (r, d) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= r) {
            return Err(Error::Index(format!("embed_rows: id {bad} >= {r}")));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&self.value(table).data()[i * d..(i + 1) * d]);
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        let ids = ids.to_vec();
        Ok(self.record(out, vec![table], Box::new(move |g, _| {
            let mut acc = vec![0.0; r * d];
            for (row, &i) in ids.iter().enumerate() {
                for j in 0..d {
                    acc[i * d + j] += g.data()[row * d + j];
                }
            }
            vec![Some(Tensor::new(vec![r, d], acc).unwrap())]
        })))
    }

    /// Extracts one element (by flat index) as a scalar-shaped variable.
    pub fn elem(&mut self, a: Var, flat: usize) -> Result<Var> {
        let t = self.value(a);
        if flat >= t.numel() {
            return Err(Error::Index(format!(
                "elem: flat index {flat} >= {}",
                t.numel()
            )));
        }
        let shape = t.shape().to_vec();
        let out = Tensor::scalar(t.data()[flat]);
        Ok(self.record(out, vec![a], Box::new(move |g, _| {
            let mut d = vec![0.0; shape.iter().product()];
            d[flat] = g.item();
            vec![Some(Tensor::new(shape.clone(), d).unwrap())]
        })))
    }

    /// Scales row i of a matrix [N,F] by s[i] (s is a length-N vector).
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let (sa, ss) = (self.value(a).shape(), self.value(s).shape());
        if sa.len() != 2 || ss.len() != 1 || ss[0] != sa[0] {
            return Err(Error::dim(format!(
                "scale_rows: shapes {sa:?}, {ss:?} incompatible"
            )));
        }
        let (n, f) = (sa[0], sa[1]);
        let (av, sv) = (self.value(a).clone(), self.value(s).clone());
        let mut data = Vec::with_capacity(n * f);
        for i in 0..n {
            let c = sv.data()[i];
            data.extend(av.data()[i * f..(i + 1) * f].iter().map(|x| x * c));
        }
        let out = Tensor::new(vec![n, f], data)?;
        Ok(self.record(out, vec![a, s], Box::new(move |g, needs| {
            let da = needs[0].then(|| {
                let mut d = vec![0.0; n * f];
                for i in 0..n {
                    let c = sv.data()[i];
                    for j in 0..f {
                        d[i * f + j] = g.data()[i * f + j] * c;
                    }
                }
                Tensor::new(vec![n, f], d).unwrap()
            });
            let ds = needs[1].then(|| {
                let mut d = vec![0.0; n];
                for i in 0..n {
                    let mut acc = 0.0;
                    for j in 0..f {
                        acc += g.data()[i * f + j] * av.data()[i * f + j];
                    }
                    d[i] = acc;
                }
                Tensor::from_vec(d)
            });
            vec![da, ds]
        })))
    }

    /// Multiplies a whole tensor by a scalar (shape [1]) variable.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::dim("scale_by: s must be a scalar"));
        }
        let (av, sv) = (self.value(a).clone(), self.value(s).item());
        let out = av.map(|x| x * sv);
        Ok(self.record(out, vec![a, s], Box::new(move |g, needs| {
            let da = needs[0].then(|| g.map(|x| x * sv));
            let ds = needs[1].then(|| {
                let acc: f64 = g
                    .data()
                    .iter()
                    .zip(av.data().iter())
                    .map(|(gi, x)| gi * x)
                    .sum();
                Tensor::scalar(acc)
            });
            vec![da, ds]
        })))
    }

    // ---- linear algebra ---------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(format!(
                "matmul: {sa:?} x {sb:?} inner dims differ"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (self.value(a).clone(), self.value(b).clone());
        let mut y = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = av.data()[i * k + p];
                let brow = &bv.data()[p * n..(p + 1) * n];
                let yrow = &mut y[i * n..(i + 1) * n];
                for j in 0..n {
                    yrow[j] += aip * brow[j];
                }
            }
        }
        let out = Tensor::new(vec![m, n], y)?;
        Ok(self.record(out, vec![a, b], Box::new(move |g, needs| {
            let da = needs[0].then(|| {
                let mut d = vec![0.0; m * k];
                for i in 0..m {
                    let grow = &g.data()[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &bv.data()[p * n..(p + 1) * n];
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += grow[j] * brow[j];
                        }
                        d[i * k + p] = acc;
                    }
                }
                Tensor::new(vec![m, k], d).unwrap()
            });
            let db = needs[1].then(|| {
                let mut d = vec![0.0; k * n];
                for i in 0..m {
                    let grow = &g.data()[i * n..(i + 1) * n];
                    for p in 0..k {
                        let aip = av.data()[i * k + p];
                        let drow = &mut d[p * n..(p + 1) * n];
                        for j in 0..n {
                            drow[j] += aip * grow[j];
                        }
                    }
                }
                Tensor::new(vec![k, n], d).unwrap()
            });
            vec![da, db]
        })))
    }

    /// Broadcast bias add: [N,F]+[F], [N,C,L]+[C] or [C,L]+[C].
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(bias).shape().to_vec();
        if sb.len() != 1 {
            return Err(Error::dim("add_bias: bias must be 1-D"));
        }
        let b = sb[0];
        // (rows, channels, inner) view of the broadcast
        let (rows, inner) = match sa.len() {
            2 if sa[1] == b => (sa[0], 1),         // [N,F]+[F]
            2 if sa[0] == b => (1, sa[1]),         // [C,L]+[C]
            3 if sa[1] == b => (sa[0], sa[2]),     // [N,C,L]+[C]
            _ => {
                return Err(Error::dim(format!(
                    "add_bias: cannot broadcast {sb:?} onto {sa:?}"
                )))
            }
        };
        let bv = self.value(bias).clone();
        let av = self.value(a).clone();
        let mut data = av.data().to_vec();
        for r in 0..rows {
            for c in 0..b {
                let base = (r * b + c) * inner;
                let bc = bv.data()[c];
                for t in 0..inner {
                    data[base + t] += bc;
                }
            }
        }
        let out = Tensor::new(sa, data)?;
        Ok(self.record(out, vec![a, bias], Box::new(move |g, needs| {
            let da = needs[0].then(|| g.clone());
            let db = needs[1].then(|| {
                let mut d = vec![0.0; b];
                for r in 0..rows {
                    for c in 0..b {
                        let base = (r * b + c) * inner;
                        let mut acc = 0.0;
                        for t in 0..inner {
                            acc += g.data()[base + t];
                        }
                        d[c] += acc;
                    }
                }
                Tensor::from_vec(d)
            });
            vec![da, db]
        })))
    }

    /// 1-D cross-correlation. `x` is [N,C_in,L] (or [C_in,L] for a single
    /// sample), `w` is [C_out,C_in,K]; output length is
    /// floor((L + 2*padding - K)/stride) + 1.
    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let sx = self.value(x).shape().to_vec();
        let sw = self.value(w).shape().to_vec();
        if sw.len() != 3 {
            return Err(Error::dim("conv1d: weight must be [C_out,C_in,K]"));
        }
        let batched = match sx.len() {
            2 => false,
            3 => true,
            _ => return Err(Error::dim("conv1d: input must be 2-D or 3-D")),
        };
        let (n, c_in, l) = if batched {
            (sx[0], sx[1], sx[2])
        } else {
            (1, sx[0], sx[1])
        };
        let (c_out, wc_in, k) = (sw[0], sw[1], sw[2]);
        if wc_in != c_in {
            return Err(Error::dim(format!(
                "conv1d: input channels {c_in} != weight channels {wc_in}"
            )));
        }
        if stride == 0 {
            return Err(Error::contract("conv1d: stride must be >= 1"));
        }
        let lp = l + 2 * padding;
        if k > lp {
            return Err(Error::dim(format!(
                "conv1d: kernel {k} larger than padded input {lp}"
            )));
        }
        let l_out = (lp - k) / stride + 1;
        let xv = self.value(x).clone();
        let wv = self.value(w).clone();
        let mut y = vec![0.0; n * c_out * l_out];
        let mut xp = vec![0.0; c_in * lp];
        for s in 0..n {
            pad_sample(xv.data(), &mut xp, s, c_in, l, padding);
            for co in 0..c_out {
                let yrow = &mut y[(s * c_out + co) * l_out..(s * c_out + co + 1) * l_out];
                for ci in 0..c_in {
                    let xrow = &xp[ci * lp..(ci + 1) * lp];
                    for kk in 0..k {
                        let wk = wv.data()[(co * c_in + ci) * k + kk];
                        if stride == 1 {
                            let xs = &xrow[kk..kk + l_out];
                            for t in 0..l_out {
                                yrow[t] += wk * xs[t];
                            }
                        } else {
                            for t in 0..l_out {
                                yrow[t] += wk * xrow[t * stride + kk];
                            }
                        }
                    }
                }
            }
        }
        let out_shape = if batched {
            vec![n, c_out, l_out]
        } else {
            vec![c_out, l_out]
        };
        let out = Tensor::new(out_shape, y)?;
        let x_shape = sx.clone();
        Ok(self.record(out, vec![x, w], Box::new(move |g, needs| {
            let mut dx = needs[0].then(|| vec![0.0; n * c_in * l]);
            let mut dw = needs[1].then(|| vec![0.0; c_out * c_in * k]);
            let mut xp = vec![0.0; c_in * lp];
            let mut dxp = vec![0.0; c_in * lp];
            for s in 0..n {
                if dw.is_some() {
                    pad_sample(xv.data(), &mut xp, s, c_in, l, padding);
                }
                if dx.is_some() {
                    dxp.iter_mut().for_each(|v| *v = 0.0);
                }
                for co in 0..c_out {
                    let grow = &g.data()[(s * c_out + co) * l_out..(s * c_out + co + 1) * l_out];
                    for ci in 0..c_in {
                        for kk in 0..k {
                            let widx = (co * c_in + ci) * k + kk;
                            if let Some(dw) = dw.as_mut() {
                                let xrow = &xp[ci * lp..(ci + 1) * lp];
                                let mut acc = 0.0;
                                if stride == 1 {
                                    let xs = &xrow[kk..kk + l_out];
                                    for t in 0..l_out {
                                        acc += grow[t] * xs[t];
                                    }
                                } else {
                                    for t in 0..l_out {
                                        acc += grow[t] * xrow[t * stride + kk];
                                    }
                                }
                                dw[widx] += acc;
                            }
                            if dx.is_some() {
                                let wk = wv.data()[widx];
                                let drow = &mut dxp[ci * lp..(ci + 1) * lp];
                                if stride == 1 {
                                    for t in 0..l_out {
                                        drow[t + kk] += wk * grow[t];
                                    }
                                } else {
                                    for t in 0..l_out {
                                        drow[t * stride + kk] += wk * grow[t];
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(dx) = dx.as_mut() {
                    for ci in 0..c_in {
                        for t in 0..l {
                            dx[(s * c_in + ci) * l + t] += dxp[ci * lp + padding + t];
                        }
                    }
                }
            }
            vec![
                dx.map(|d| Tensor::new(x_shape.clone(), d).unwrap()),
                dw.map(|d| Tensor::new(vec![c_out, c_in, k], d).unwrap()),
            ]
        })))
    }

    // ---- activations over rows, losses ------------------------------------

    /// Numerically stable softmax along `axis` of a 1-D or 2-D tensor.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        let (rows, cols, row_major) = softmax_geometry(&shape, axis)?;
        let mut y = vec![0.0; self.value(a).numel()];
        let src = self.value(a).data();
        for r in 0..rows {
            let idx = |c: usize| if row_major { r * cols + c } else { c * rows + r };
            let mut m = f64::NEG_INFINITY;
            for c in 0..cols {
                m = m.max(src[idx(c)]);
            }
            let mut denom = 0.0;
            for c in 0..cols {
                let e = (src[idx(c)] - m).exp();
                y[idx(c)] = e;
                denom += e;
            }
            for c in 0..cols {
                y[idx(c)] /= denom;
            }
        }
        let out = Tensor::new(shape.clone(), y)?;
        let yv = out.clone();
        Ok(self.record(out, vec![a], Box::new(move |g, _| {
            let mut d = vec![0.0; g.numel()];
            for r in 0..rows {
                let idx = |c: usize| if row_major { r * cols + c } else { c * rows + r };
                let mut dot = 0.0;
                for c in 0..cols {
                    dot += g.data()[idx(c)] * yv.data()[idx(c)];
                }
                for c in 0..cols {
                    let i = idx(c);
                    d[i] = yv.data()[i] * (g.data()[i] - dot);
                }
            }
            vec![Some(Tensor::new(yv.shape().to_vec(), d).unwrap())]
        })))
    }

    /// Mean negative log-softmax probability of the true class.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let each = self.cross_entropy_each(logits, labels)?;
        Ok(self.mean(each))
    }

    /// Per-sample cross-entropy: [N,C] x labels -> [N].
    pub fn cross_entropy_each(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.value(logits).shape();
        if s.len() != 2 {
            return Err(Error::dim("cross_entropy: logits must be [N,C]"));
        }
        let (n, c) = (s[0], s[1]);
        if labels.len() != n {
            return Err(Error::dim(format!(
                "cross_entropy: {n} rows vs {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Index(format!("label {bad} >= num_classes {c}")));
        }
        let src = self.value(logits).data();
        let mut probs = vec![0.0; n * c];
        let mut losses = vec![0.0; n];
        for i in 0..n {
            let row = &src[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for j in 0..c {
                let e = (row[j] - m).exp();
                probs[i * c + j] = e;
                denom += e;
            }
            for j in 0..c {
                probs[i * c + j] /= denom;
            }
            losses[i] = denom.ln() + m - row[labels[i]];
        }
        let out = Tensor::from_vec(losses);
        let labels = labels.to_vec();
        Ok(self.record(out, vec![logits], Box::new(move |g, _| {
            let mut d = vec![0.0; n * c];
            for i in 0..n {
                let gi = g.data()[i];
                for j in 0..c {
                    let onehot = if j == labels[i] { 1.0 } else { 0.0 };
                    d[i * c + j] = gi * (probs[i * c + j] - onehot);
                }
            }
            vec![Some(Tensor::new(vec![n, c], d).unwrap())]
        })))
    }

    /// Picks element (i, idx[i]) from each row of a [N,C] tensor -> [N].
    pub fn take_per_row(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let s = self.value(a).shape();
        if s.len() != 2 {
            return Err(Error::dim("take_per_row: input must be 2-D"));
        }
        let (n, c) = (s[0], s[1]);
        if idx.len() != n {
            return Err(Error::dim("take_per_row: index length mismatch"));
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= c) {
            return Err(Error::Index(format!("take_per_row: column {bad} >= {c}")));
        }
        let data: Vec<f64> = idx
            .iter()
            .enumerate()
            .map(|(i, &j)| self.value(a).data()[i * c + j])
            .collect();
        let idx = idx.to_vec();
        let out = Tensor::from_vec(data);
        Ok(self.record(out, vec![a], Box::new(move |g, _| {
            let mut d = vec![0.0; n * c];
            for (i, &j) in idx.iter().enumerate() {
                d[i * c + j] = g.data()[i];
            }
            vec![Some(Tensor::new(vec![n, c], d).unwrap())]
        })))
    }

    // ---- pooling -----------------------------------------------------------

    /// Mean over the last axis: [N,C,L] -> [N,C], [C,L] -> [C].
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::dim("global_avg_pool: rank must be >= 2"));
        }
        let l = *shape.last().unwrap();
        let lead: usize = shape[..shape.len() - 1].iter().product();
        let src = self.value(a).data();
        let mut y = vec![0.0; lead];
        for r in 0..lead {
            let mut acc = 0.0;
            for t in 0..l {
                acc += src[r * l + t];
            }
            y[r] = acc / l as f64;
        }
        let out_shape = shape[..shape.len() - 1].to_vec();
        let out = Tensor::new(out_shape, y)?;
        Ok(self.record(out, vec![a], Box::new(move |g, _| {
            let mut d = vec![0.0; lead * l];
            for r in 0..lead {
                let gv = g.data()[r] / l as f64;
                for t in 0..l {
                    d[r * l + t] = gv;
                }
            }
            vec![Some(Tensor::new(shape.clone(), d).unwrap())]
        })))
    }

    /// Sliding-window mean over the last axis.
    pub fn avg_pool1d(&mut self, a: Var, window: usize, stride: usize) -> Result<Var> {
        let (shape, lead, l, l_out) = pool_geometry(self.value(a), window, stride)?;
        let src = self.value(a).data();
        let mut y = vec![0.0; lead * l_out];
        for r in 0..lead {
            for t in 0..l_out {
                let mut acc = 0.0;
                for u in 0..window {
                    acc += src[r * l + t * stride + u];
                }
                y[r * l_out + t] = acc / window as f64;
            }
        }
        let mut out_shape = shape[..shape.len() - 1].to_vec();
        out_shape.push(l_out);
        let out = Tensor::new(out_shape, y)?;
        Ok(self.record(out, vec![a], Box::new(move |g, _| {
            let mut d = vec![0.0; lead * l];
            for r in 0..lead {
                for t in 0..l_out {
                    let gv = g.data()[r * l_out + t] / window as f64;
                    for u in 0..window {
                        d[r * l + t * stride + u] += gv;
                    }
                }
            }
            vec![Some(Tensor::new(shape.clone(), d).unwrap())]
        })))
    }

    /// Sliding-window max over the last axis; ties go to the first index.
    pub fn max_pool1d(&mut self, a: Var, window: usize, stride: usize) -> Result<Var> {
        let (shape, lead, l, l_out) = pool_geometry(self.value(a), window, stride)?;
        let src = self.value(a).data();
        let mut y = vec![0.0; lead * l_out];
        let mut arg = vec![0usize; lead * l_out];
        for r in 0..lead {
            for t in 0..l_out {
                let mut best = f64::NEG_INFINITY;
                let mut besti = 0;
                for u in 0..window {
                    let v = src[r * l + t * stride + u];
                    if v > best {
                        best = v;
                        besti = t * stride + u;
                    }
                }
                y[r * l_out + t] = best;
                arg[r * l_out + t] = besti;
            }
        }
        let mut out_shape = shape[..shape.len() - 1].to_vec();
        out_shape.push(l_out);
        let out = Tensor::new(out_shape, y)?;
        Ok(self.record(out, vec![a], Box::new(move |g, _| {
            let mut d = vec![0.0; lead * l];
            for r in 0..lead {
                for t in 0..l_out {
                    d[r * l + arg[r * l_out + t]] += g.data()[r * l_out + t];
                }
            }
            vec![Some(Tensor::new(shape.clone(), d).unwrap())]
        })))
    }

    // ---- backward -----------------------------------------------------------

    /// Reverse pass from a scalar loss. Consumes the recording: calling it a
    /// second time on the same tape is a contract error.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::contract(
                "backward called twice on one tape; re-record the graph",
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            if grads[i].is_none() || !self.nodes[i].requires {
                continue;
            }
            let Some(grad_fn) = self.nodes[i].grad_fn.as_ref() else {
                continue; // leaf: keep its gradient
            };
            let g = grads[i].take().unwrap();
            let needs: Vec<bool> = self.nodes[i]
                .parents
                .iter()
                .map(|p| self.nodes[p.0].requires)
                .collect();
            let pgrads = grad_fn(&g, &needs);
            debug_assert_eq!(pgrads.len(), self.nodes[i].parents.len());
            for (p, pg) in self.nodes[i].parents.iter().zip(pgrads) {
                let Some(pg) = pg else { continue };
                match grads[p.0].as_mut() {
                    Some(acc) => {
                        let dst = acc.data_mut();
                        for (d, s) in dst.iter_mut().zip(pg.data()) {
                            *d += s;
                        }
                    }
                    None => grads[p.0] = Some(pg),
                }
            }
        }
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Gradients produced by one backward pass, addressable by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient w.r.t. `v`; zeros when `v` was unreachable from the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn wrt_opt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data).unwrap()
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn pad_sample(x: &[f64], xp: &mut [f64], sample: usize, c: usize, l: usize, padding: usize) {
    let lp = l + 2 * padding;
    xp.iter_mut().for_each(|v| *v = 0.0);
    for ci in 0..c {
        let src = &x[(sample * c + ci) * l..(sample * c + ci + 1) * l];
        xp[ci * lp + padding..ci * lp + padding + l].copy_from_slice(src);
    }
}

fn softmax_geometry(shape: &[usize], axis: usize) -> Result<(usize, usize, bool)> {
    match (shape.len(), axis) {
        (1, 0) => Ok((1, shape[0], true)),
        (2, 1) => Ok((shape[0], shape[1], true)),
        (2, 0) => Ok((shape[1], shape[0], false)),
        _ => Err(Error::dim(format!(
            "softmax: axis {axis} invalid for shape {shape:?}"
        ))),
    }
}

fn pool_geometry(t: &Tensor, window: usize, stride: usize) -> Result<(Vec<usize>, usize, usize, usize)> {
    let shape = t.shape().to_vec();
    if shape.is_empty() {
        return Err(Error::dim("pool: scalar input"));
    }
    if window == 0 || stride == 0 {
        return Err(Error::contract("pool: window and stride must be >= 1"));
    }
    let l = *shape.last().unwrap();
    if window > l {
        return Err(Error::dim(format!("pool: window {window} > length {l}")));
    }
    let lead: usize = shape[..shape.len() - 1].iter().product();
    let l_out = (l - window) / stride + 1;
    Ok((shape, lead, l, l_out))
}
