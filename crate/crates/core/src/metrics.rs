//! Evaluation metrics: accuracy, class-wise/macro recall, and the paired-run
//! confusion counts behind the sample-wise improve/bias/gain metrics.

use crate::error::{Error, Result};

/// One evaluated sample: stable id, ground truth, model output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PredictionRecord {
    pub id: u64,
    pub true_class: usize,
    pub predicted: usize,
}

/// Per-class paired-run counts. For samples of true class c:
/// stp = correct in both runs, sfp = wrong without DA / correct with DA
/// ("DA improve"), sfn = correct without / wrong with ("DA bias"),
/// stn = wrong in both.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ClassCounts {
    pub stp: usize,
    pub sfp: usize,
    pub sfn: usize,
    pub stn: usize,
}

impl ClassCounts {
    pub fn total(&self) -> usize {
        self.stp + self.sfp + self.sfn + self.stn
    }
}

/// Paired-run confusion over all classes present in the evaluation set.
#[derive(Clone, Debug, Default)]
pub struct BiasConfusion {
    pub per_class: Vec<ClassCounts>,
}

/// Sample-wise improve/bias/gain triple (fractions; reports show x100).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Swise {
    pub improve: f64,
    pub bias: f64,
    pub gain: f64,
}

pub fn accuracy(preds: &[PredictionRecord]) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::contract("accuracy of an empty prediction list"));
    }
    let correct = preds.iter().filter(|r| r.predicted == r.true_class).count();
    Ok(correct as f64 / preds.len() as f64)
}

/// Per-class recall over `num_classes`; classes absent from the set get None.
pub fn class_recall(preds: &[PredictionRecord], num_classes: usize) -> Vec<Option<f64>> {
    let mut total = vec![0usize; num_classes];
    let mut correct = vec![0usize; num_classes];
    for r in preds {
        total[r.true_class] += 1;
        if r.predicted == r.true_class {
            correct[r.true_class] += 1;
        }
    }
    (0..num_classes)
        .map(|c| {
            if total[c] == 0 {
                None
            } else {
                Some(correct[c] as f64 / total[c] as f64)
            }
        })
        .collect()
}

/// Unweighted mean recall over classes present in the evaluation set.
pub fn macro_recall(preds: &[PredictionRecord], num_classes: usize) -> f64 {
    mean_present(&class_recall(preds, num_classes))
}

fn mean_present(values: &[Option<f64>]) -> f64 {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

/// Pairs a no-augmentation run with an augmented run over the identical
/// evaluation set: both lists must cover the same sample ids with the same
/// ground truth.
pub fn bias_confusion(
    preds_noaug: &[PredictionRecord],
    preds_aug: &[PredictionRecord],
    num_classes: usize,
) -> Result<BiasConfusion> {
    if preds_noaug.len() != preds_aug.len() {
        return Err(Error::contract(format!(
            "paired runs differ in size: {} vs {}",
            preds_noaug.len(),
            preds_aug.len()
        )));
    }
    let mut by_id: std::collections::HashMap<u64, &PredictionRecord> =
        std::collections::HashMap::with_capacity(preds_aug.len());
    for r in preds_aug {
        if by_id.insert(r.id, r).is_some() {
            return Err(Error::contract(format!("duplicate sample id {}", r.id)));
        }
    }
    let mut per_class = vec![ClassCounts::default(); num_classes];
    for base in preds_noaug {
        let aug = by_id.remove(&base.id).ok_or_else(|| {
            Error::contract(format!("sample id {} missing from augmented run", base.id))
        })?;
        if aug.true_class != base.true_class {
            return Err(Error::contract(format!(
                "sample id {}: ground truth differs between runs",
                base.id
            )));
        }
        let c = base.true_class;
        if c >= num_classes {
            return Err(Error::Index(format!("class {c} >= {num_classes}")));
        }
        let base_ok = base.predicted == base.true_class;
        let aug_ok = aug.predicted == aug.true_class;
        let counts = &mut per_class[c];
        match (base_ok, aug_ok) {
            (true, true) => counts.stp += 1,
            (false, true) => counts.sfp += 1,
            (true, false) => counts.sfn += 1,
            (false, false) => counts.stn += 1,
        }
    }
    Ok(BiasConfusion { per_class })
}

/// Per-class Swise triple: improve = SFP/n_c, bias = SFN/n_c,
/// gain = improve - bias. Classes with no samples yield None.
pub fn swise_per_class(bc: &BiasConfusion) -> Vec<Option<Swise>> {
    bc.per_class
        .iter()
        .map(|c| {
            let n = c.total();
            if n == 0 {
                return None;
            }
            let improve = c.sfp as f64 / n as f64;
            let bias = c.sfn as f64 / n as f64;
            Some(Swise {
                improve,
                bias,
                gain: improve - bias,
            })
        })
        .collect()
}

/// Macro Swise triple over classes present in the evaluation set.
pub fn swise_macro(bc: &BiasConfusion) -> Swise {
    let per = swise_per_class(bc);
    let improve = mean_present(
        &per.iter()
            .map(|s| s.map(|v| v.improve))
            .collect::<Vec<_>>(),
    );
    let bias = mean_present(&per.iter().map(|s| s.map(|v| v.bias)).collect::<Vec<_>>());
    Swise {
        improve,
        bias,
        gain: improve - bias,
    }
}
