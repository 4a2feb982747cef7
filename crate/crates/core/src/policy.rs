//! Per-sample augmentation policy network and the search-phase objective:
//! relaxed mixed embeddings over the whole transform set, the
//! difficult/similar loss pair, and train-time policy sampling.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, Bound};
use crate::ckpt;
use crate::error::{Error, Result};
use crate::tensor::{AdamW, Gradients, Tape, Tensor, Var};
use crate::transforms::{
    apply_differentiable, perturb_magnitude, slots, RngStream, Signal, TransformId,
    TransformSettings,
};

pub const LABEL_DIM: usize = 16;
pub const HIDDEN_DIM: usize = 64;
/// Guard for the loss-ratio denominators in the policy objective.
pub const RATIO_EPS: f64 = 1e-8;

/// Per-sample augmentation policy: selection probabilities and magnitudes
/// over the transform set.
#[derive(Clone, Debug)]
pub struct Policy {
    pub p: Vec<f64>,
    pub m: Vec<f64>,
}

impl Policy {
    pub fn validate(&self) -> Result<()> {
        if self.p.len() != self.m.len() {
            return Err(Error::dim("policy: p and m lengths differ"));
        }
        let sum: f64 = self.p.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || self.p.iter().any(|&v| v < 0.0) {
            return Err(Error::contract(format!("policy: p is not a distribution (sum {sum})")));
        }
        if self.m.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::contract("policy: magnitude outside [0,1]"));
        }
        Ok(())
    }

    /// One-hot policy on a single transform with neutral magnitudes.
    pub fn one_hot(ts_size: usize, index: usize) -> Self {
        let mut p = vec![0.0; ts_size];
        p[index] = 1.0;
        Policy {
            p,
            m: vec![0.0; ts_size],
        }
    }
}

/// Search-phase hyperparameters.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct SearchConfig {
    /// Gumbel-softmax temperature.
    pub temperature: f64,
    /// Operators applied per sample in the training phase.
    pub n_ops: usize,
    /// Train-time magnitude perturbation half-width.
    pub delta: f64,
    /// Policy-network learning rate.
    pub policy_lr: f64,
    /// Model epochs between policy-update passes.
    pub freq_sea: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            temperature: 3.0,
            n_ops: 2,
            delta: 0.3,
            policy_lr: 1e-3,
            freq_sea: 10,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 {
            return Err(Error::Config("temperature must be > 0".into()));
        }
        if !(1..=4).contains(&self.n_ops) {
            return Err(Error::Config("n_ops must be in {1,2,3,4}".into()));
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(Error::Config("delta must be in [0,1]".into()));
        }
        if self.policy_lr < 0.0 || self.freq_sea == 0 {
            return Err(Error::Config("policy_lr >= 0 and freq_sea >= 1 required".into()));
        }
        Ok(())
    }
}

/// The class-adaptive policy network h: label embedding + 2-layer MLP over
/// the concatenated (feature, label) embedding, emitting weight and magnitude
/// logits for every transform.
#[derive(Clone)]
pub struct PolicyNetwork {
    label_embed: Tensor, // [num_classes, LABEL_DIM]
    w1: Tensor,          // [feature_dim + LABEL_DIM, HIDDEN_DIM]
    b1: Tensor,
    w2: Tensor, // [HIDDEN_DIM, 2 * ts_size]
    b2: Tensor,
    feature_dim: usize,
    num_classes: usize,
    ts_size: usize,
}

pub struct BoundPolicy {
    vars: [Var; 5],
}

impl BoundPolicy {
    /// Tape handle of the i-th parameter (bind order).
    pub fn var(&self, i: usize) -> Var {
        self.vars[i]
    }
}

impl PolicyNetwork {
    pub fn new(feature_dim: usize, num_classes: usize, ts_size: usize, seed: u64) -> Self {
        let mut rng = RngStream::run(seed, 0, slots::POLICY_INIT).rng();
        let init = |rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize| {
            let a = (1.0 / fan_in as f64).sqrt();
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|_| rng.random_range(-a..a)).collect();
            Tensor::new(shape.to_vec(), data).unwrap().requires_grad(true)
        };
        let in_dim = feature_dim + LABEL_DIM;
        PolicyNetwork {
            label_embed: init(&mut rng, &[num_classes, LABEL_DIM], LABEL_DIM),
            w1: init(&mut rng, &[in_dim, HIDDEN_DIM], in_dim),
            b1: init(&mut rng, &[HIDDEN_DIM], in_dim),
            w2: init(&mut rng, &[HIDDEN_DIM, 2 * ts_size], HIDDEN_DIM),
            b2: init(&mut rng, &[2 * ts_size], HIDDEN_DIM),
            feature_dim,
            num_classes,
            ts_size,
        }
    }

    pub fn ts_size(&self) -> usize {
        self.ts_size
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![&self.label_embed, &self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.label_embed,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }

    pub fn param_sizes(&self) -> Vec<usize> {
        self.params().iter().map(|t| t.numel()).collect()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundPolicy {
        let mut it = self.params().into_iter().map(|t| {
            if trainable {
                tape.input(t)
            } else {
                tape.constant(t)
            }
        });
        BoundPolicy {
            vars: [
                it.next().unwrap(),
                it.next().unwrap(),
                it.next().unwrap(),
                it.next().unwrap(),
                it.next().unwrap(),
            ],
        }
    }

    /// Policy head on the tape: features [N,F] + labels -> (p [N,T], m [N,T]).
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        bound: &BoundPolicy,
        features: Var,
        labels: &[usize],
    ) -> Result<(Var, Var)> {
        let fs = tape.value(features).shape().to_vec();
        if fs.len() != 2 || fs[1] != self.feature_dim {
            return Err(Error::dim(format!(
                "policy forward: features {fs:?}, want [N,{}]",
                self.feature_dim
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= self.num_classes) {
            return Err(Error::Index(format!(
                "label {bad} >= num_classes {}",
                self.num_classes
            )));
        }
        let [le, w1, b1, w2, b2] = bound.vars;
        let emb = tape.embed_rows(le, labels)?;
        let cat = tape.concat_cols(features, emb)?;
        let h = tape.matmul(cat, w1)?;
        let h = tape.add_bias(h, b1)?;
        let h = tape.relu(h);
        let out = tape.matmul(h, w2)?;
        let out = tape.add_bias(out, b2)?;
        let p_logits = tape.slice_cols(out, 0, self.ts_size)?;
        let m_logits = tape.slice_cols(out, self.ts_size, 2 * self.ts_size)?;
        let p = tape.softmax(p_logits, 1)?;
        let m = tape.sigmoid(m_logits);
        Ok((p, m))
    }

    /// Value-level policies for a feature batch.
    pub fn infer_batch(&self, features: &Tensor, labels: &[usize]) -> Result<Vec<Policy>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let f = tape.constant(features);
        let (p, m) = self.forward_on(&mut tape, &bound, f, labels)?;
        let (pv, mv) = (tape.value(p), tape.value(m));
        let t = self.ts_size;
        Ok((0..labels.len())
            .map(|i| Policy {
                p: pv.data()[i * t..(i + 1) * t].to_vec(),
                m: mv.data()[i * t..(i + 1) * t].to_vec(),
            })
            .collect())
    }

    /// Single-sample policy from a feature embedding and class label.
    pub fn infer(&self, feature: &[f64], label: usize) -> Result<Policy> {
        let f = Tensor::new(vec![1, feature.len()], feature.to_vec())?;
        Ok(self.infer_batch(&f, &[label])?.remove(0))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = [
            self.feature_dim as u32,
            self.num_classes as u32,
            self.ts_size as u32,
            LABEL_DIM as u32,
            HIDDEN_DIM as u32,
        ];
        let named: Vec<(&str, &Tensor)> = vec![
            ("label_embed", &self.label_embed),
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
        ];
        ckpt::write_checkpoint(path, ckpt::TAG_POLICY_NET, &meta, &named)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (tag, meta, tensors) = ckpt::read_checkpoint(path)?;
        if tag != ckpt::TAG_POLICY_NET {
            return Err(Error::Format(format!("checkpoint tag {tag} is not a policy network")));
        }
        if meta.len() != 5 || tensors.len() != 5 {
            return Err(Error::Format("policy checkpoint layout mismatch".into()));
        }
        let mut net = PolicyNetwork::new(meta[0] as usize, meta[1] as usize, meta[2] as usize, 0);
        for (slot, (name, tensor)) in net.params_mut().into_iter().zip(tensors.iter()) {
            if slot.shape() != tensor.shape() {
                return Err(Error::Format(format!(
                    "policy tensor '{name}' shape {:?} != expected {:?}",
                    tensor.shape(),
                    slot.shape()
                )));
            }
            *slot = tensor.clone().requires_grad(true);
        }
        Ok(net)
    }

    pub fn apply_grads(
        &mut self,
        grads: &Gradients,
        bound: &BoundPolicy,
        opt: &mut AdamW,
        lr: f64,
    ) -> Result<()> {
        let grad_list: Vec<Tensor> = bound.vars.iter().map(|&v| grads.wrt(v)).collect();
        let mut params: Vec<Tensor> = self.params().into_iter().cloned().collect();
        opt.step(&mut params, &grad_list, lr)?;
        for (dst, src) in self.params_mut().into_iter().zip(params) {
            *dst = src.requires_grad(true);
        }
        Ok(())
    }
}

/// Eq.-style confidence weight: sqrt(p_y(x) * max(p_y(x) - p_y(x_aug), 0)).
pub fn confidence_weight(conf_orig: f64, conf_aug: f64) -> f64 {
    (conf_orig * (conf_orig - conf_aug).max(0.0)).sqrt()
}

/// Relaxed Gumbel-softmax draw over a probability vector.
pub struct GumbelDraw {
    /// softmax((log p + gumbel) / temperature)
    pub soft: Vec<f64>,
    /// argmax of the relaxed weights (straight-through index)
    pub hard: usize,
}

pub fn gumbel_select(p: &[f64], temperature: f64, rng: &mut impl Rng) -> GumbelDraw {
    debug_assert!(temperature > 0.0);
    let z: Vec<f64> = p
        .iter()
        .map(|&pi| {
            let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            let g = -(-u.ln()).ln();
            (pi.max(f64::MIN_POSITIVE).ln() + g) / temperature
        })
        .collect();
    let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
    let denom: f64 = exps.iter().sum();
    let soft: Vec<f64> = exps.iter().map(|e| e / denom).collect();
    let hard = soft
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap();
    GumbelDraw { soft, hard }
}

/// Train-phase sampling: `n_ops` i.i.d. categorical draws from p (with
/// replacement), each magnitude perturbed by U(-delta, delta) and clamped.
pub fn sample_train_policy(
    policy: &Policy,
    ts: &[TransformId],
    cfg: &SearchConfig,
    rng: &mut impl Rng,
) -> Vec<(TransformId, f64)> {
    debug_assert_eq!(policy.p.len(), ts.len());
    (0..cfg.n_ops)
        .map(|_| {
            let j = categorical(&policy.p, rng);
            let m = perturb_magnitude(policy.m[j], cfg.delta, rng);
            (ts[j], m)
        })
        .collect()
}

fn categorical(p: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random_range(0.0..1.0);
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

/// Inputs for the relaxed augmented branch of one batch.
pub struct MixedBatch<'a> {
    pub signals: Vec<&'a Signal>,
    pub labels: Vec<usize>,
    pub sample_ids: Vec<u64>,
}

/// Weighted sum of feature embeddings over the whole transform set (the
/// relaxed augmented branch). Returns [N, feature_dim]; the literal 1/|TS|
/// prefactor is applied unless `drop_prefactor` is set.
#[allow(clippy::too_many_arguments)]
pub fn mixed_embeddings(
    tape: &mut Tape,
    backbone: &Backbone,
    bb_bound: &Bound,
    policy_p: Var,
    policy_m: Var,
    batch: &MixedBatch,
    ts: &[TransformId],
    seed: u64,
    epoch: u64,
    tcfg: &TransformSettings,
    drop_prefactor: bool,
) -> Result<Var> {
    let n = batch.signals.len();
    let t_count = ts.len();
    let ps = tape.value(policy_p).shape().to_vec();
    if ps != vec![n, t_count] {
        return Err(Error::dim(format!(
            "mixed_embeddings: p shape {ps:?}, want [{n},{t_count}]"
        )));
    }
    let sample_rate = batch.signals[0].sample_rate_hz();
    let x_vars: Vec<Var> = batch
        .signals
        .iter()
        .map(|s| tape.constant(&s.to_tensor()))
        .collect();
    let mut acc: Option<Var> = None;
    for (j, &transform) in ts.iter().enumerate() {
        let mut branch = Vec::with_capacity(n);
        for i in 0..n {
            let m_ij = tape.elem(policy_m, i * t_count + j)?;
            let stream = RngStream::new(
                seed,
                batch.sample_ids[i],
                epoch,
                slots::POLICY_TRANSFORM_BASE + j as u64,
            );
            let y = apply_differentiable(tape, transform, x_vars[i], m_ij, stream, tcfg, sample_rate)?;
            branch.push(y);
        }
        let stacked = tape.stack(&branch)?;
        let feats = backbone.features_on(tape, bb_bound, stacked)?;
        let p_col = tape.slice_cols(policy_p, j, j + 1)?;
        let p_col = tape.reshape(p_col, vec![n])?;
        let weighted = tape.scale_rows(feats, p_col)?;
        acc = Some(match acc {
            Some(prev) => tape.add(prev, weighted)?,
            None => weighted,
        });
    }
    let total = acc.expect("ts nonempty");
    if drop_prefactor {
        Ok(total)
    } else {
        Ok(tape.mul_scalar(total, 1.0 / t_count as f64))
    }
}

/// Per-sample original-branch statistics (no gradients needed anywhere).
pub struct OriginalBranch {
    pub features: Tensor,  // [N, F]
    pub ce_each: Vec<f64>, // per-sample cross entropy
    pub conf: Vec<f64>,    // softmax probability of the true class
}

pub fn original_branch(backbone: &Backbone, x: &Tensor, labels: &[usize]) -> Result<OriginalBranch> {
    let features = backbone.features(x)?;
    let logits = backbone.logits(&features)?;
    let c = backbone.num_classes();
    let n = labels.len();
    let mut ce_each = vec![0.0; n];
    let mut conf = vec![0.0; n];
    for i in 0..n {
        let row = &logits.data()[i * c..(i + 1) * c];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        ce_each[i] = lse - row[labels[i]];
        conf[i] = (row[labels[i]] - lse).exp();
    }
    Ok(OriginalBranch {
        features,
        ce_each,
        conf,
    })
}

/// Difficult loss over a training batch (Var is a scalar on the tape):
/// mean_i [ w_i * CE(x_i) / (CE(mixed_i) + eps) ].
#[allow(clippy::too_many_arguments)]
pub fn difficult_loss_on(
    tape: &mut Tape,
    backbone: &Backbone,
    bb_bound: &Bound,
    net: &PolicyNetwork,
    pol_bound: &BoundPolicy,
    batch: &MixedBatch,
    orig: &OriginalBranch,
    ts: &[TransformId],
    seed: u64,
    epoch: u64,
    tcfg: &TransformSettings,
    drop_prefactor: bool,
) -> Result<Var> {
    let f_const = tape.constant(&orig.features);
    let (p, m) = net.forward_on(tape, pol_bound, f_const, &batch.labels)?;
    let mixed = mixed_embeddings(
        tape, backbone, bb_bound, p, m, batch, ts, seed, epoch, tcfg, drop_prefactor,
    )?;
    let logits_aug = backbone.logits_on(tape, bb_bound, mixed)?;
    let ce_aug = tape.cross_entropy_each(logits_aug, &batch.labels)?;
    let sm = tape.softmax(logits_aug, 1)?;
    let conf_aug = tape.take_per_row(sm, &batch.labels)?;
    let conf_orig = tape.constant(&Tensor::from_vec(orig.conf.clone()));
    let gap = tape.sub(conf_orig, conf_aug)?;
    let gap = tape.clamp_min(gap, 0.0);
    let prod = tape.mul(conf_orig, gap)?;
    let w = tape.sqrt(prod);
    let ce_orig = tape.constant(&Tensor::from_vec(orig.ce_each.clone()));
    let denom = tape.add_scalar(ce_aug, RATIO_EPS);
    let ratio = tape.div(ce_orig, denom)?;
    let each = tape.mul(w, ratio)?;
    Ok(tape.mean(each))
}

/// Similar loss over a search batch: mean_i [ CE(mixed_i) / (CE(x_i) + eps) ].
#[allow(clippy::too_many_arguments)]
pub fn similar_loss_on(
    tape: &mut Tape,
    backbone: &Backbone,
    bb_bound: &Bound,
    net: &PolicyNetwork,
    pol_bound: &BoundPolicy,
    batch: &MixedBatch,
    orig: &OriginalBranch,
    ts: &[TransformId],
    seed: u64,
    epoch: u64,
    tcfg: &TransformSettings,
    drop_prefactor: bool,
) -> Result<Var> {
    let f_const = tape.constant(&orig.features);
    let (p, m) = net.forward_on(tape, pol_bound, f_const, &batch.labels)?;
    let mixed = mixed_embeddings(
        tape, backbone, bb_bound, p, m, batch, ts, seed, epoch, tcfg, drop_prefactor,
    )?;
    let logits_aug = backbone.logits_on(tape, bb_bound, mixed)?;
    let ce_aug = tape.cross_entropy_each(logits_aug, &batch.labels)?;
    let denom: Vec<f64> = orig.ce_each.iter().map(|&v| v + RATIO_EPS).collect();
    let denom = tape.constant(&Tensor::from_vec(denom));
    let ratio = tape.div(ce_aug, denom)?;
    Ok(tape.mean(ratio))
}

/// The two-term policy objective: (difficult + similar) / 2, or the similar
/// term alone under the -diff ablation.
pub fn policy_loss(difficult: f64, similar: f64, use_diff_loss: bool) -> f64 {
    if use_diff_loss {
        (difficult + similar) / 2.0
    } else {
        similar
    }
}

pub fn policy_loss_on(tape: &mut Tape, difficult: Var, similar: Var, use_diff_loss: bool) -> Result<Var> {
    if use_diff_loss {
        let sum = tape.add(difficult, similar)?;
        Ok(tape.mul_scalar(sum, 0.5))
    } else {
        Ok(similar)
    }
}
