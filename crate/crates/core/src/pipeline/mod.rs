//! The two-phase experiment orchestrator: policy search, regulated task
//! training, the NOAUG/uniform baselines, the fixed-percentage NoAug sweep,
//! fold handling and run reports.

pub mod report;
pub mod svg;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Arch, Backbone};
use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::info_region::{self, AugContext, RegionConfig};
use crate::metrics::{self, PredictionRecord};
use crate::policy::{
    self, MixedBatch, Policy, PolicyNetwork, SearchConfig,
};
use crate::regulation::{self, RegulationState};
use crate::tensor::{AdamW, LrSchedule, Tape, Tensor};
use crate::transforms::{registry, slots, RngStream, TransformId, TransformSettings};

/// Everything one run needs; defaults follow the desk scale, the paper-scale
/// values stay reachable through [`RunConfig::paper`] or the config file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub arch: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub search: SearchConfig,
    /// Regulation strength alpha_noaug.
    pub alpha: f64,
    pub region: RegionConfig,
    pub use_diff_loss: bool,
    pub use_info_region: bool,
    pub use_balance_sampler: bool,
    pub use_regulation: bool,
    pub enable_scaling_transform: bool,
    /// Drops the literal 1/|TS| prefactor of the mixed embedding
    /// (sensitivity check only).
    pub drop_mixed_prefactor: bool,
    pub folds: usize,
    pub fold_index: usize,
}

impl RunConfig {
    /// Desk-scale defaults: batch 32, 30 epochs, 3 folds.
    pub fn desk(seed: u64) -> Self {
        RunConfig {
            seed,
            arch: "mini_resnet1d".into(),
            epochs: 30,
            batch_size: 32,
            lr: 1e-2,
            weight_decay: 1e-2,
            search: SearchConfig::default(),
            alpha: 0.5,
            region: RegionConfig::default(),
            use_diff_loss: true,
            use_info_region: true,
            use_balance_sampler: true,
            use_regulation: true,
            enable_scaling_transform: false,
            drop_mixed_prefactor: false,
            folds: 3,
            fold_index: 0,
        }
    }

    /// Paper-scale values: batch 128, 50 epochs, 10 folds.
    pub fn paper(seed: u64) -> Self {
        RunConfig {
            epochs: 50,
            batch_size: 128,
            folds: 10,
            ..RunConfig::desk(seed)
        }
    }

    pub fn arch(&self) -> Result<Arch> {
        Arch::from_name(&self.arch)
    }

    pub fn validate(&self) -> Result<()> {
        self.arch()?;
        self.search.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if self.alpha < 0.0 {
            return Err(Error::Config("alpha must be >= 0".into()));
        }
        if self.folds < 2 || self.fold_index >= self.folds {
            return Err(Error::Config(format!(
                "fold_index {} must be < folds {} (>= 2)",
                self.fold_index, self.folds
            )));
        }
        Ok(())
    }

    pub fn transform_set(&self) -> Vec<TransformId> {
        registry(self.enable_scaling_transform)
    }
}

/// Where training-phase policies come from.
pub enum PolicySource<'a> {
    /// No transforms at all (the NOAUG baseline).
    NoAug,
    /// Transform uniform over TS, magnitude uniform in [0,1] per op.
    UniformRandom,
    /// The full policy path frozen at the one-hot identity policy.
    FrozenIdentity,
    /// Policies inferred by a trained policy network.
    Network(&'a PolicyNetwork),
}

/// Options for one training-phase run.
pub struct TrainOptions<'a> {
    pub source: PolicySource<'a>,
    pub regulation: Option<&'a RegulationState>,
    /// Fixed global NoAug percentage q in [0,1]; mutually exclusive with
    /// per-class regulation.
    pub global_noaug_q: Option<f64>,
    pub collect_policies: bool,
}

impl<'a> TrainOptions<'a> {
    pub fn noaug() -> Self {
        TrainOptions {
            source: PolicySource::NoAug,
            regulation: None,
            global_noaug_q: None,
            collect_policies: false,
        }
    }
}

/// One learned per-sample policy row for the report.
#[derive(Clone, Debug)]
pub struct PolicyRow {
    pub id: u64,
    pub class: usize,
    pub policy: Policy,
}

pub struct TrainOutcome {
    pub model: Backbone,
    pub epoch_losses: Vec<f64>,
    pub policies: Vec<PolicyRow>,
}

pub struct SearchOutcome {
    pub model: Backbone,
    pub policy_net: PolicyNetwork,
    pub regulation: RegulationState,
    pub epoch_losses: Vec<f64>,
    /// Mean policy loss per update pass, with the (difficult, similar) parts.
    pub policy_pass_losses: Vec<(f64, f64, f64)>,
}

fn epoch_order(cfg: &RunConfig, n: usize, labels: &[usize], num_classes: usize, epoch: usize) -> Vec<usize> {
    if cfg.use_balance_sampler {
        let mut rng = RngStream::run(cfg.seed, epoch as u64, slots::BALANCE_SAMPLER).rng();
        data::balanced_epoch(labels, num_classes, &mut rng)
    } else {
        let mut rng = RngStream::run(cfg.seed, epoch as u64, slots::SHUFFLE).rng();
        data::shuffled_epoch(n, &mut rng)
    }
}

/// Produces the augmented input batch for one training step.
#[allow(clippy::too_many_arguments)]
fn augment_batch(
    cfg: &RunConfig,
    model: &Backbone,
    train: &Dataset,
    indices: &[usize],
    opts: &TrainOptions,
    ts: &[TransformId],
    tcfg: &TransformSettings,
    epoch: usize,
) -> Result<(Tensor, Vec<usize>)> {
    let (x, labels, ids) = train.batch(indices);
    if matches!(opts.source, PolicySource::NoAug) {
        return Ok((x, labels));
    }

    // per-sample op lists
    let per_sample_ops: Vec<Vec<(TransformId, f64)>> = match &opts.source {
        PolicySource::NoAug => unreachable!(),
        PolicySource::UniformRandom => ids
            .iter()
            .map(|&id| {
                let mut rng = RngStream::new(cfg.seed, id, epoch as u64, slots::OP_DRAW).rng();
                (0..cfg.search.n_ops)
                    .map(|_| {
                        let j = rng.random_range(0..ts.len());
                        let m: f64 = rng.random_range(0.0..1.0);
                        (ts[j], m)
                    })
                    .collect()
            })
            .collect(),
        PolicySource::FrozenIdentity => {
            let identity = Policy::one_hot(ts.len(), 0);
            ids.iter()
                .map(|&id| {
                    let mut rng = RngStream::new(cfg.seed, id, epoch as u64, slots::OP_DRAW).rng();
                    policy::sample_train_policy(&identity, ts, &cfg.search, &mut rng)
                })
                .collect()
        }
        PolicySource::Network(net) => {
            let feats = model.features(&x)?;
            let inferred = net.infer_batch(&feats, &labels)?;
            inferred
                .into_iter()
                .zip(ids.iter().zip(labels.iter()))
                .map(|(pol, (&id, &class))| {
                    let blended = blend_for_training(cfg, opts, &pol, class, ts)?;
                    let mut rng =
                        RngStream::new(cfg.seed, id, epoch as u64, slots::OP_DRAW).rng();
                    Ok(policy::sample_train_policy(&blended, ts, &cfg.search, &mut rng))
                })
                .collect::<Result<Vec<_>>>()?
        }
    };

    // saliency once per batch when region protection is on
    let protect = cfg.use_info_region;
    let saliencies = if protect {
        Some(info_region::saliency_batch(model, &x, &labels)?)
    } else {
        None
    };

    let (c, l) = (train.spec.channels, train.spec.length);
    let mut out = Vec::with_capacity(indices.len() * c * l);
    for (i, ops) in per_sample_ops.iter().enumerate() {
        let orig = &train.signals[indices[i]];
        let ctx = AugContext {
            seed: cfg.seed,
            sample: ids[i],
            epoch: epoch as u64,
        };
        let augmented = info_region::apply_ops(orig, ops, ctx, tcfg)?;
        let protected = match &saliencies {
            Some(slc) => info_region::protect(orig, &augmented, &slc[i], &cfg.region, ctx)?.0,
            None => augmented,
        };
        out.extend_from_slice(protected.values());
    }
    Ok((Tensor::new(vec![indices.len(), c, l], out)?, labels))
}

fn blend_for_training(
    cfg: &RunConfig,
    opts: &TrainOptions,
    pol: &Policy,
    class: usize,
    ts: &[TransformId],
) -> Result<Policy> {
    match (opts.global_noaug_q, opts.regulation) {
        (Some(_), Some(_)) => Err(Error::contract(
            "global NoAug percentage and per-class regulation are mutually exclusive",
        )),
        (Some(q), None) => {
            let p_no = regulation::noaug_distribution(ts)?;
            let p = regulation::blend_policy(&pol.p, q, &p_no)?;
            Ok(Policy {
                p,
                m: pol.m.clone(),
            })
        }
        (None, Some(reg)) if cfg.use_regulation => regulation::regulate_class(pol, class, reg, ts),
        _ => Ok(pol.clone()),
    }
}

/// Trains a task model on the full training dataset under the given policy
/// source (Fig.-2 stage 2 when the source is a trained network).
pub fn train_phase(cfg: &RunConfig, train: &Dataset, opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    let ts = cfg.transform_set();
    let tcfg = TransformSettings::default();
    let mut model = Backbone::new(
        cfg.arch()?,
        train.spec.channels,
        train.spec.length,
        train.spec.num_classes,
        cfg.seed,
    );
    let mut opt = AdamW::new(&model.param_sizes(), cfg.weight_decay);
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size) as u64;
    let schedule = LrSchedule::warmup_cosine(cfg.lr, cfg.epochs as u64 * steps_per_epoch);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let order = epoch_order(cfg, train.len(), &train.labels, train.spec.num_classes, epoch);
        let mut sum = 0.0;
        let mut count = 0usize;
        for batch_idx in data::batches(&order, cfg.batch_size) {
            let (x, labels) = augment_batch(cfg, &model, train, &batch_idx, opts, &ts, &tcfg, epoch)?;
            let loss = model.train_step(&x, &labels, &mut opt, schedule.lr_at(step))?;
            step += 1;
            sum += loss;
            count += 1;
        }
        epoch_losses.push(sum / count.max(1) as f64);
    }
    let policies = if opts.collect_policies {
        collect_policies(cfg, &model, train, opts)?
    } else {
        Vec::new()
    };
    Ok(TrainOutcome {
        model,
        epoch_losses,
        policies,
    })
}

fn collect_policies(
    _cfg: &RunConfig,
    model: &Backbone,
    train: &Dataset,
    opts: &TrainOptions,
) -> Result<Vec<PolicyRow>> {
    let PolicySource::Network(net) = &opts.source else {
        return Ok(Vec::new());
    };
    let indices: Vec<usize> = (0..train.len()).collect();
    let mut rows = Vec::with_capacity(train.len());
    for chunk in indices.chunks(256) {
        let (x, labels, ids) = train.batch(chunk);
        let feats = model.features(&x)?;
        let pols = net.infer_batch(&feats, &labels)?;
        for ((pol, &id), &class) in pols.into_iter().zip(ids.iter()).zip(labels.iter()) {
            rows.push(PolicyRow {
                id,
                class,
                policy: pol,
            });
        }
    }
    Ok(rows)
}

/// The policy-search phase (Fig.-2 stage 1): alternate task-model training on
/// augmented D_tr with policy-network updates on paired D_tr/D_sea batches,
/// then convert end-of-search class recall into regulation weights.
pub fn search_phase(cfg: &RunConfig, dataset: &Dataset) -> Result<SearchOutcome> {
    cfg.validate()?;
    let ts = cfg.transform_set();
    let tcfg = TransformSettings::default();
    let (d_tr, d_sea) = data::split_equal(dataset, cfg.seed)?;
    let mut model = Backbone::new(
        cfg.arch()?,
        dataset.spec.channels,
        dataset.spec.length,
        dataset.spec.num_classes,
        cfg.seed,
    );
    let mut policy_net = PolicyNetwork::new(
        model.feature_dim(),
        dataset.spec.num_classes,
        ts.len(),
        cfg.seed,
    );
    let mut model_opt = AdamW::new(&model.param_sizes(), cfg.weight_decay);
    let mut policy_opt = AdamW::new(&policy_net.param_sizes(), 0.0);
    let steps_per_epoch = d_tr.len().div_ceil(cfg.batch_size) as u64;
    let schedule = LrSchedule::warmup_cosine(cfg.lr, cfg.epochs as u64 * steps_per_epoch);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut policy_pass_losses = Vec::new();
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let opts = TrainOptions {
            source: PolicySource::Network(&policy_net),
            regulation: None,
            global_noaug_q: None,
            collect_policies: false,
        };
        let order = epoch_order(cfg, d_tr.len(), &d_tr.labels, d_tr.spec.num_classes, epoch);
        let mut sum = 0.0;
        let mut count = 0usize;
        for batch_idx in data::batches(&order, cfg.batch_size) {
            let (x, labels) =
                augment_batch(cfg, &model, &d_tr, &batch_idx, &opts, &ts, &tcfg, epoch)?;
            let loss = model.train_step(&x, &labels, &mut model_opt, schedule.lr_at(step))?;
            step += 1;
            sum += loss;
            count += 1;
        }
        epoch_losses.push(sum / count.max(1) as f64);

        if (epoch + 1) % cfg.search.freq_sea == 0 {
            let pass = policy_update_pass(cfg, &model, &mut policy_net, &mut policy_opt, &d_tr, &d_sea, &ts, &tcfg, epoch)?;
            policy_pass_losses.push(pass);
        }
    }

    // end-of-search class recall on the held-out half drives regulation
    let preds = evaluate(&model, &d_sea)?;
    let recall = metrics::class_recall(&preds, dataset.spec.num_classes);
    let recall: Vec<f64> = recall.into_iter().map(|r| r.unwrap_or(0.0)).collect();
    let regulation = RegulationState::new(recall, cfg.alpha)?;
    Ok(SearchOutcome {
        model,
        policy_net,
        regulation,
        epoch_losses,
        policy_pass_losses,
    })
}

/// One policy-update pass over paired training/search batches; returns the
/// mean (policy, difficult, similar) losses seen before the updates.
#[allow(clippy::too_many_arguments)]
fn policy_update_pass(
    cfg: &RunConfig,
    model: &Backbone,
    policy_net: &mut PolicyNetwork,
    policy_opt: &mut AdamW,
    d_tr: &Dataset,
    d_sea: &Dataset,
    ts: &[TransformId],
    tcfg: &TransformSettings,
    epoch: usize,
) -> Result<(f64, f64, f64)> {
    let mut tr_rng = RngStream::run(cfg.seed, epoch as u64, slots::POLICY_SHUFFLE_TR).rng();
    let mut sea_rng = RngStream::run(cfg.seed, epoch as u64, slots::POLICY_SHUFFLE_SEA).rng();
    let tr_order = data::shuffled_epoch(d_tr.len(), &mut tr_rng);
    let sea_order = data::shuffled_epoch(d_sea.len(), &mut sea_rng);
    let tr_batches = data::batches(&tr_order, cfg.batch_size);
    let sea_batches = data::batches(&sea_order, cfg.batch_size);
    let mut totals = (0.0, 0.0, 0.0);
    let mut count = 0usize;
    for (tr_idx, sea_idx) in tr_batches.iter().zip(sea_batches.iter()) {
        let (tr_x, tr_labels, tr_ids) = d_tr.batch(tr_idx);
        let (sea_x, sea_labels, sea_ids) = d_sea.batch(sea_idx);
        let tr_orig = policy::original_branch(model, &tr_x, &tr_labels)?;
        let sea_orig = policy::original_branch(model, &sea_x, &sea_labels)?;
        let tr_mixed = MixedBatch {
            signals: tr_idx.iter().map(|&i| &d_tr.signals[i]).collect(),
            labels: tr_labels.clone(),
            sample_ids: tr_ids,
        };
        let sea_mixed = MixedBatch {
            signals: sea_idx.iter().map(|&i| &d_sea.signals[i]).collect(),
            labels: sea_labels.clone(),
            sample_ids: sea_ids,
        };
        let mut tape = Tape::new();
        let bb_bound = model.bind(&mut tape, false);
        let pol_bound = policy_net.bind(&mut tape, true);
        let difficult = policy::difficult_loss_on(
            &mut tape, model, &bb_bound, policy_net, &pol_bound, &tr_mixed, &tr_orig, ts,
            cfg.seed, epoch as u64, tcfg, cfg.drop_mixed_prefactor,
        )?;
        let similar = policy::similar_loss_on(
            &mut tape, model, &bb_bound, policy_net, &pol_bound, &sea_mixed, &sea_orig, ts,
            cfg.seed, epoch as u64, tcfg, cfg.drop_mixed_prefactor,
        )?;
        let loss = policy::policy_loss_on(&mut tape, difficult, similar, cfg.use_diff_loss)?;
        let (dv, sv, lv) = (
            tape.value(difficult).item(),
            tape.value(similar).item(),
            tape.value(loss).item(),
        );
        if !lv.is_finite() {
            return Err(Error::Divergence(format!("policy loss = {lv}")));
        }
        if cfg.search.policy_lr > 0.0 {
            let grads = tape.backward(loss)?;
            policy_net.apply_grads(&grads, &pol_bound, policy_opt, cfg.search.policy_lr)?;
        }
        totals.0 += lv;
        totals.1 += dv;
        totals.2 += sv;
        count += 1;
    }
    let n = count.max(1) as f64;
    Ok((totals.0 / n, totals.1 / n, totals.2 / n))
}

/// Deterministic predictions over a dataset, chunked to bound memory.
pub fn evaluate(model: &Backbone, ds: &Dataset) -> Result<Vec<PredictionRecord>> {
    let indices: Vec<usize> = (0..ds.len()).collect();
    let mut out = Vec::with_capacity(ds.len());
    for chunk in indices.chunks(128) {
        let (x, labels, ids) = ds.batch(chunk);
        let preds = model.predict(&x)?;
        for ((&id, &y), pred) in ids.iter().zip(labels.iter()).zip(preds) {
            out.push(PredictionRecord {
                id,
                true_class: y,
                predicted: pred,
            });
        }
    }
    Ok(out)
}

/// Train/test split for this run: fold `fold_index` of a stratified k-fold is
/// the test set, the remainder trains.
pub fn fold_split(cfg: &RunConfig, ds: &Dataset) -> Result<(Dataset, Dataset)> {
    let folds = data::kfold(ds, cfg.folds, cfg.seed)?;
    let test_idx = &folds[cfg.fold_index];
    let train_idx: Vec<usize> = folds
        .iter()
        .enumerate()
        .filter(|(k, _)| *k != cfg.fold_index)
        .flat_map(|(_, f)| f.iter().copied())
        .collect();
    Ok((ds.subset(&train_idx), ds.subset(test_idx)))
}

pub struct PairedRun {
    pub outcome: TrainOutcome,
    pub preds: Vec<PredictionRecord>,
    pub noaug_losses: Vec<f64>,
    pub preds_noaug: Vec<PredictionRecord>,
}

/// Runs a training configuration plus its paired NOAUG twin (same seed, same
/// fold) and evaluates both on the test fold.
pub fn paired_run(cfg: &RunConfig, train: &Dataset, test: &Dataset, opts: &TrainOptions) -> Result<PairedRun> {
    let outcome = train_phase(cfg, train, opts)?;
    let preds = evaluate(&outcome.model, test)?;
    let noaug = train_phase(cfg, train, &TrainOptions::noaug())?;
    let preds_noaug = evaluate(&noaug.model, test)?;
    Ok(PairedRun {
        outcome,
        preds,
        noaug_losses: noaug.epoch_losses,
        preds_noaug,
    })
}

/// One point of the fixed-percentage NoAug sweep.
#[derive(Clone, Debug)]
pub struct SweepPoint {
    pub q_percent: f64,
    pub accuracy: f64,
    pub macro_recall: f64,
    pub swise: metrics::Swise,
    pub class_recall: Vec<Option<f64>>,
}

pub struct SweepOutcome {
    pub points: Vec<SweepPoint>,
    pub argmax_q_accuracy: f64,
    pub argmax_q_gain: f64,
}

/// Trains once per requested percentage with p_new = (1-q) p + q one_hot(id),
/// paired against a single shared NOAUG run.
pub fn sweep_noaug(
    cfg: &RunConfig,
    train: &Dataset,
    test: &Dataset,
    policy_net: &PolicyNetwork,
    percentages: &[f64],
) -> Result<SweepOutcome> {
    if percentages.is_empty() {
        return Err(Error::contract("sweep: empty percentage list"));
    }
    for &q in percentages {
        if !(0.0..=100.0).contains(&q) {
            return Err(Error::Config(format!("sweep percentage {q} outside [0,100]")));
        }
    }
    let noaug = train_phase(cfg, train, &TrainOptions::noaug())?;
    let preds_noaug = evaluate(&noaug.model, test)?;
    let mut points = Vec::with_capacity(percentages.len());
    for &q in percentages {
        let opts = TrainOptions {
            source: PolicySource::Network(policy_net),
            regulation: None,
            global_noaug_q: Some(q / 100.0),
            collect_policies: false,
        };
        let outcome = train_phase(cfg, train, &opts)?;
        let preds = evaluate(&outcome.model, test)?;
        let bc = metrics::bias_confusion(&preds_noaug, &preds, test.spec.num_classes)?;
        points.push(SweepPoint {
            q_percent: q,
            accuracy: metrics::accuracy(&preds)?,
            macro_recall: metrics::macro_recall(&preds, test.spec.num_classes),
            swise: metrics::swise_macro(&bc),
            class_recall: metrics::class_recall(&preds, test.spec.num_classes),
        });
    }
    let best_acc = points
        .iter()
        .max_by(|a, b| a.accuracy.partial_cmp(&b.accuracy).unwrap())
        .unwrap();
    let best_gain = points
        .iter()
        .max_by(|a, b| a.swise.gain.partial_cmp(&b.swise.gain).unwrap())
        .unwrap();
    Ok(SweepOutcome {
        argmax_q_accuracy: best_acc.q_percent,
        argmax_q_gain: best_gain.q_percent,
        points,
    })
}
