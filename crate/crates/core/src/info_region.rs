//! Information-region adaption: input-gradient saliency, window scoring via
//! average pooling, percentile thresholding, random protected-region
//! selection, and paste-back after augmentation.

use rand::Rng;

use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};
use crate::transforms::{self, slots, RngStream, Signal, TransformId, TransformSettings};

/// Window length / threshold percentile / candidate stride.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct RegionConfig {
    pub filter_len: usize,
    /// Percentile in [0,100] over all candidate-region scores.
    pub thres: f64,
    pub stride: usize,
}

impl Default for RegionConfig {
    fn default() -> Self {
        RegionConfig {
            filter_len: 100,
            thres: 60.0,
            stride: 1,
        }
    }
}

impl RegionConfig {
    pub fn validate(&self, signal_len: usize) -> Result<()> {
        if self.filter_len == 0 || self.filter_len > signal_len {
            return Err(Error::dim(format!(
                "filter_len {} invalid for signal length {signal_len}",
                self.filter_len
            )));
        }
        if !(0.0..=100.0).contains(&self.thres) {
            return Err(Error::Config(format!("thres {} outside [0,100]", self.thres)));
        }
        if self.stride == 0 {
            return Err(Error::Config("stride must be >= 1".into()));
        }
        Ok(())
    }
}

/// A candidate window with its mean saliency.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Region {
    pub start: usize,
    pub len: usize,
    pub score: f64,
}

/// Per-timestep saliency for a batch: sum over channels of |d CE(x,y) / dx|.
pub fn saliency_batch(backbone: &Backbone, x: &Tensor, labels: &[usize]) -> Result<Vec<Vec<f64>>> {
    let shape = x.shape();
    if shape.len() != 3 {
        return Err(Error::dim("saliency_batch: input must be [N,C,L]"));
    }
    let (n, c, l) = (shape[0], shape[1], shape[2]);
    let mut tape = Tape::new();
    let bound = backbone.bind(&mut tape, false);
    let xv = tape.input(&x.clone().requires_grad(true));
    let f = backbone.features_on(&mut tape, &bound, xv)?;
    let logits = backbone.logits_on(&mut tape, &bound, f)?;
    // Per-sample losses summed: each sample's input gradient is independent.
    let each = tape.cross_entropy_each(logits, labels)?;
    let loss = tape.sum(each);
    let grads = tape.backward(loss)?;
    let g = grads.wrt(xv);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut slc = vec![0.0; l];
        for ci in 0..c {
            let row = &g.data()[(i * c + ci) * l..(i * c + ci + 1) * l];
            for (t, v) in row.iter().enumerate() {
                slc[t] += v.abs();
            }
        }
        out.push(slc);
    }
    Ok(out)
}

/// Saliency of a single sample.
pub fn saliency(backbone: &Backbone, x: &Signal, y: usize) -> Result<Vec<f64>> {
    let t = x.to_tensor();
    let batched = t.reshaped(vec![1, x.channels(), x.length()])?;
    Ok(saliency_batch(backbone, &batched, &[y])?.remove(0))
}

/// Mean saliency of every candidate window (start steps by `stride`).
pub fn region_scores(slc: &[f64], cfg: &RegionConfig) -> Result<Vec<Region>> {
    cfg.validate(slc.len())?;
    let fl = cfg.filter_len;
    let count = (slc.len() - fl) / cfg.stride + 1;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let start = i * cfg.stride;
        let score = slc[start..start + fl].iter().sum::<f64>() / fl as f64;
        out.push(Region {
            start,
            len: fl,
            score,
        });
    }
    Ok(out)
}

/// Linear-interpolation percentile of a score list (q in [0,100]).
pub fn percentile(scores: &[f64], q: f64) -> f64 {
    debug_assert!(!scores.is_empty());
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (rank - lo as f64) * (sorted[hi] - sorted[lo])
    }
}

/// Uniform random choice among regions scoring at or above the thres-th
/// percentile; the max-scoring region always qualifies.
pub fn select_region(regions: &[Region], thres: f64, rng: &mut impl Rng) -> Result<Region> {
    if regions.is_empty() {
        return Err(Error::contract("select_region: no candidate regions"));
    }
    let scores: Vec<f64> = regions.iter().map(|r| r.score).collect();
    let cut = percentile(&scores, thres);
    let qualified: Vec<&Region> = regions.iter().filter(|r| r.score >= cut).collect();
    debug_assert!(!qualified.is_empty());
    Ok(*qualified[rng.random_range(0..qualified.len())])
}

/// Splices columns [start, start+len) of the original into the augmented
/// sample, all channels.
pub fn paste_back(x_orig: &Signal, x_aug: &Signal, r: &Region) -> Result<Signal> {
    if x_orig.channels() != x_aug.channels() || x_orig.length() != x_aug.length() {
        return Err(Error::dim("paste_back: shapes differ"));
    }
    if r.start + r.len > x_orig.length() || r.len == 0 {
        return Err(Error::contract(format!(
            "paste_back: region {}+{} out of bounds for length {}",
            r.start,
            r.len,
            x_orig.length()
        )));
    }
    let mut out = x_aug.clone();
    for c in 0..out.channels() {
        out.row_mut(c)[r.start..r.start + r.len]
            .copy_from_slice(&x_orig.row(c)[r.start..r.start + r.len]);
    }
    Ok(out)
}

/// Stream addressing for one augmentation event.
#[derive(Clone, Copy, Debug)]
pub struct AugContext {
    pub seed: u64,
    pub sample: u64,
    pub epoch: u64,
}

/// Applies an op list sequentially (hard transforms), no protection.
pub fn apply_ops(
    x: &Signal,
    ops: &[(TransformId, f64)],
    ctx: AugContext,
    tcfg: &TransformSettings,
) -> Result<Signal> {
    let mut out = x.clone();
    for (i, &(t, m)) in ops.iter().enumerate() {
        let stream = RngStream::new(
            ctx.seed,
            ctx.sample,
            ctx.epoch,
            slots::TRANSFORM_BASE + i as u64,
        );
        out = transforms::apply_with(t, &out, m, stream, tcfg)?;
    }
    Ok(out)
}

/// Selects the protected region on a precomputed saliency map and pastes it
/// back over the augmented sample. Returns the region for reporting.
pub fn protect(
    x_orig: &Signal,
    x_aug: &Signal,
    slc: &[f64],
    rcfg: &RegionConfig,
    ctx: AugContext,
) -> Result<(Signal, Region)> {
    let regions = region_scores(slc, rcfg)?;
    let mut rng = RngStream::new(ctx.seed, ctx.sample, ctx.epoch, slots::REGION_SELECT).rng();
    let region = select_region(&regions, rcfg.thres, &mut rng)?;
    let out = paste_back(x_orig, x_aug, &region)?;
    Ok((out, region))
}

/// The full protected augmentation event: saliency and region selection on
/// the ORIGINAL sample, ops applied sequentially, one paste-back at the
/// original indices.
pub fn augment_with_protection(
    backbone: &Backbone,
    x: &Signal,
    y: usize,
    ops: &[(TransformId, f64)],
    rcfg: &RegionConfig,
    tcfg: &TransformSettings,
    ctx: AugContext,
) -> Result<Signal> {
    let slc = saliency(backbone, x, y)?;
    let augmented = apply_ops(x, ops, ctx, tcfg)?;
    let (out, _) = protect(x, &augmented, &slc, rcfg, ctx)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Arch;
    use crate::tensor::Tensor;

    fn toy_signal(seed: u64, c: usize, l: usize) -> Signal {
        let mut rng = RngStream::new(seed, 0, 0, 98).rng();
        let v: Vec<f64> = (0..c * l).map(|_| rng.random_range(-1.0..1.0)).collect();
        Signal::new(c, l, 100.0, v).unwrap()
    }

    #[test]
    fn region_scores_hand_cases() {
        let cfg = RegionConfig {
            filter_len: 2,
            thres: 60.0,
            stride: 1,
        };
        let rs = region_scores(&[1.0, 2.0, 3.0, 4.0], &cfg).unwrap();
        let scores: Vec<f64> = rs.iter().map(|r| r.score).collect();
        assert_eq!(scores, vec![1.5, 2.5, 3.5]);

        let flat = region_scores(&[0.7; 6], &cfg).unwrap();
        assert!(flat.iter().all(|r| r.score == 0.7));

        let whole = region_scores(
            &[1.0, 2.0, 3.0],
            &RegionConfig {
                filter_len: 3,
                thres: 60.0,
                stride: 1,
            },
        )
        .unwrap();
        assert_eq!(whole.len(), 1);
        assert_eq!(whole[0].score, 2.0);

        assert!(region_scores(
            &[1.0],
            &RegionConfig {
                filter_len: 2,
                thres: 60.0,
                stride: 1
            }
        )
        .is_err());
    }

    #[test]
    fn percentile_matches_linear_interpolation() {
        let scores = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert!((percentile(&scores, 60.0) - 3.4).abs() < 1e-12);
        assert_eq!(percentile(&scores, 0.0), 1.0);
        assert_eq!(percentile(&scores, 100.0), 5.0);
    }

    #[test]
    fn select_region_respects_threshold() {
        let regions: Vec<Region> = (0..5)
            .map(|i| Region {
                start: i,
                len: 2,
                score: (i + 1) as f64,
            })
            .collect();
        let mut rng = RngStream::new(1, 0, 0, slots::REGION_SELECT).rng();
        for _ in 0..50 {
            let r = select_region(&regions, 60.0, &mut rng).unwrap();
            assert!(r.score >= 3.4, "picked region below threshold: {r:?}");
        }
        // thres = 0: everything may be selected
        let mut seen = std::collections::HashSet::new();
        for _ in 0..200 {
            seen.insert(select_region(&regions, 0.0, &mut rng).unwrap().start);
        }
        assert_eq!(seen.len(), 5);
        // ties: all qualify
        let equal: Vec<Region> = (0..4)
            .map(|i| Region {
                start: i,
                len: 2,
                score: 1.0,
            })
            .collect();
        let mut starts = std::collections::HashSet::new();
        for _ in 0..200 {
            starts.insert(select_region(&equal, 60.0, &mut rng).unwrap().start);
        }
        assert_eq!(starts.len(), 4);
        assert!(select_region(&[], 60.0, &mut rng).is_err());
    }

    #[test]
    fn paste_back_cases() {
        let x = toy_signal(11, 2, 8);
        let y = toy_signal(12, 2, 8);
        let whole = Region {
            start: 0,
            len: 8,
            score: 0.0,
        };
        assert!(paste_back(&x, &y, &whole).unwrap().bit_eq(&x));

        let mid = Region {
            start: 2,
            len: 2,
            score: 0.0,
        };
        let spliced = paste_back(&x, &y, &mid).unwrap();
        for c in 0..2 {
            for t in 0..8 {
                let want = if (2..4).contains(&t) { x.row(c)[t] } else { y.row(c)[t] };
                assert_eq!(spliced.row(c)[t].to_bits(), want.to_bits());
            }
        }
        assert!(paste_back(&x, &x, &mid).unwrap().bit_eq(&x));
        let oob = Region {
            start: 7,
            len: 3,
            score: 0.0,
        };
        assert!(paste_back(&x, &y, &oob).is_err());
    }

    #[test]
    fn zero_model_has_zero_saliency() {
        let mut bb = Backbone::new(Arch::MiniFcn, 2, 32, 3, 5);
        for p in bb.params_mut() {
            *p = Tensor::zeros(p.shape()).requires_grad(true);
        }
        let x = toy_signal(13, 2, 32);
        let slc = saliency(&bb, &x, 1).unwrap();
        assert!(slc.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saliency_invariant_to_uniform_logit_bias() {
        let bb = Backbone::new(Arch::MiniFcn, 2, 32, 3, 6);
        let x = toy_signal(14, 2, 32);
        let base = saliency(&bb, &x, 2).unwrap();
        let mut shifted = bb.clone();
        {
            let n = shifted.params().len();
            let mut params = shifted.params_mut();
            let mut b = params[n - 1].data().to_vec();
            for v in b.iter_mut() {
                *v += 7.5;
            }
            *params[n - 1] = Tensor::from_vec(b).requires_grad(true);
        }
        let moved = saliency(&shifted, &x, 2).unwrap();
        for (a, b) in base.iter().zip(&moved) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn saliency_nonnegative_and_batch_matches_single() {
        let bb = Backbone::new(Arch::MiniFcn, 2, 32, 3, 7);
        let a = toy_signal(15, 2, 32);
        let b = toy_signal(16, 2, 32);
        let mut data = a.values().to_vec();
        data.extend_from_slice(b.values());
        let batch = Tensor::new(vec![2, 2, 32], data).unwrap();
        let both = saliency_batch(&bb, &batch, &[0, 1]).unwrap();
        let single_a = saliency(&bb, &a, 0).unwrap();
        let single_b = saliency(&bb, &b, 1).unwrap();
        for (x, y) in both[0].iter().zip(&single_a) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in both[1].iter().zip(&single_b) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(both.iter().flatten().all(|&v| v >= 0.0));
    }

    #[test]
    fn identity_ops_with_protection_return_input() {
        let bb = Backbone::new(Arch::MiniFcn, 2, 32, 3, 8);
        let x = toy_signal(17, 2, 32);
        let ctx = AugContext {
            seed: 3,
            sample: 0,
            epoch: 0,
        };
        let rcfg = RegionConfig {
            filter_len: 8,
            thres: 60.0,
            stride: 1,
        };
        let out = augment_with_protection(
            &bb,
            &x,
            1,
            &[(TransformId::Identity, 0.3)],
            &rcfg,
            &TransformSettings::default(),
            ctx,
        )
        .unwrap();
        assert!(out.bit_eq(&x));
    }

    #[test]
    fn mask_inside_protected_region_is_restored() {
        let bb = Backbone::new(Arch::MiniFcn, 2, 32, 3, 9);
        let x = toy_signal(18, 2, 32);
        let ctx = AugContext {
            seed: 4,
            sample: 0,
            epoch: 0,
        };
        // region = whole signal, so any masking is pasted over
        let rcfg = RegionConfig {
            filter_len: 32,
            thres: 60.0,
            stride: 1,
        };
        let out = augment_with_protection(
            &bb,
            &x,
            0,
            &[(TransformId::TimeMask, 0.9)],
            &rcfg,
            &TransformSettings::default(),
            ctx,
        )
        .unwrap();
        assert!(out.bit_eq(&x));
    }

    #[test]
    fn forced_region_restores_mask_window() {
        // Hand saliency peaked on one window + thres=100 forces that region.
        let x = toy_signal(19, 2, 32);
        let ctx = AugContext {
            seed: 5,
            sample: 7,
            epoch: 2,
        };
        let tcfg = TransformSettings::default();
        let aug = apply_ops(&x, &[(TransformId::TimeMask, 0.5)], ctx, &tcfg).unwrap();
        // locate the masked window
        let masked: Vec<usize> = (0..32)
            .filter(|&t| aug.row(0)[t] == 0.0 && x.row(0)[t] != 0.0)
            .collect();
        assert!(!masked.is_empty());
        let (lo, hi) = (masked[0], *masked.last().unwrap());
        let mut slc = vec![0.0; 32];
        for v in slc.iter_mut().take(hi + 1).skip(lo) {
            *v = 1.0;
        }
        let rcfg = RegionConfig {
            filter_len: hi - lo + 1,
            thres: 100.0,
            stride: 1,
        };
        let (restored, region) = protect(&x, &aug, &slc, &rcfg, ctx).unwrap();
        assert_eq!(region.start, lo);
        assert!(restored.bit_eq(&x));
    }
}
