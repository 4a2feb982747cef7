//! Class-dependent regulation: search-phase class recall is converted into
//! per-class no-augmentation weights, which blend inferred policies toward
//! the identity-only policy at train time.

use crate::error::{Error, Result};
use crate::policy::Policy;
use crate::transforms::TransformId;

/// Per-class regulation state produced at the end of the search phase.
#[derive(Clone, Debug, PartialEq)]
pub struct RegulationState {
    pub alpha: f64,
    pub class_recall: Vec<f64>,
    pub w_noaug: Vec<f64>,
}

impl RegulationState {
    pub fn new(class_recall: Vec<f64>, alpha: f64) -> Result<Self> {
        let w_noaug = compute_noaug_weights(&class_recall, alpha)?;
        Ok(RegulationState {
            alpha,
            class_recall,
            w_noaug,
        })
    }

    /// State that never regulates (alpha 0, perfect recall everywhere).
    pub fn disabled(num_classes: usize) -> Self {
        RegulationState {
            alpha: 0.0,
            class_recall: vec![1.0; num_classes],
            w_noaug: vec![0.0; num_classes],
        }
    }
}

/// W_NoAug[c] = clamp(alpha * (1 - recall[c]), 0, 1).
pub fn compute_noaug_weights(class_recall: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if alpha < 0.0 {
        return Err(Error::Config(format!("alpha {alpha} must be >= 0")));
    }
    if class_recall.iter().any(|r| !(0.0..=1.0).contains(r)) {
        return Err(Error::contract("recall entries must lie in [0,1]"));
    }
    Ok(class_recall
        .iter()
        .map(|r| (alpha * (1.0 - r)).clamp(0.0, 1.0))
        .collect())
}

/// p_new = (1-w) * p_old + w * p_noaug; magnitudes are untouched by design.
pub fn blend_policy(p_old: &[f64], w: f64, p_noaug: &[f64]) -> Result<Vec<f64>> {
    if p_old.len() != p_noaug.len() {
        return Err(Error::dim("blend_policy: vector lengths differ"));
    }
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::contract(format!("blend weight {w} outside [0,1]")));
    }
    Ok(p_old
        .iter()
        .zip(p_noaug)
        .map(|(&a, &b)| (1.0 - w) * a + w * b)
        .collect())
}

/// The no-augmentation policy: all mass on the Identity transform.
pub fn noaug_distribution(ts: &[TransformId]) -> Result<Vec<f64>> {
    let idx = ts
        .iter()
        .position(|&t| t == TransformId::Identity)
        .ok_or_else(|| Error::Config("transform set does not contain identity".into()))?;
    let mut p = vec![0.0; ts.len()];
    p[idx] = 1.0;
    Ok(p)
}

/// Blends policy `p` toward identity with this class's NoAug weight.
pub fn regulate_class(
    policy: &Policy,
    class: usize,
    state: &RegulationState,
    ts: &[TransformId],
) -> Result<Policy> {
    if class >= state.w_noaug.len() {
        return Err(Error::Index(format!(
            "class {class} >= {}",
            state.w_noaug.len()
        )));
    }
    let p_noaug = noaug_distribution(ts)?;
    let p = blend_policy(&policy.p, state.w_noaug[class], &p_noaug)?;
    Ok(Policy {
        p,
        m: policy.m.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transforms::registry;

    #[test]
    fn noaug_weight_hand_values() {
        assert_eq!(compute_noaug_weights(&[1.0], 0.5).unwrap(), vec![0.0]);
        let w = compute_noaug_weights(&[0.6], 0.5).unwrap();
        assert!((w[0] - 0.2).abs() < 1e-12);
        assert_eq!(compute_noaug_weights(&[0.0], 1.0).unwrap(), vec![1.0]);
        // clamp engages for alpha > 1
        assert_eq!(compute_noaug_weights(&[0.0], 2.5).unwrap(), vec![1.0]);
        assert!(compute_noaug_weights(&[1.2], 0.5).is_err());
        assert!(compute_noaug_weights(&[0.5], -0.1).is_err());
    }

    #[test]
    fn blend_endpoints_and_hand_value() {
        let p_old = [0.5, 0.5, 0.0];
        let p_no = [0.0, 0.0, 1.0];
        assert_eq!(blend_policy(&p_old, 0.0, &p_no).unwrap(), p_old.to_vec());
        assert_eq!(blend_policy(&p_old, 1.0, &p_no).unwrap(), p_no.to_vec());
        let mixed = blend_policy(&p_old, 0.2, &p_no).unwrap();
        for (got, want) in mixed.iter().zip([0.4, 0.4, 0.2]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn blend_preserves_distribution() {
        let p_old = [0.3, 0.5, 0.2];
        let p_no = [0.0, 1.0, 0.0];
        for w in [0.0, 0.13, 0.5, 0.77, 1.0] {
            let p = blend_policy(&p_old, w, &p_no).unwrap();
            let sum: f64 = p.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(p.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn noaug_distribution_is_identity_onehot() {
        let ts = registry(false);
        let p = noaug_distribution(&ts).unwrap();
        assert_eq!(p.len(), 10);
        assert_eq!(p[0], 1.0);
        assert_eq!(p.iter().sum::<f64>(), 1.0);
        // composition: full blend selects identity with probability 1
        let uniform = vec![0.1; 10];
        let blended = blend_policy(&uniform, 1.0, &p).unwrap();
        assert_eq!(blended[0], 1.0);
        assert!(noaug_distribution(&[TransformId::TimeMask]).is_err());
    }

    #[test]
    fn monotone_in_recall_and_identity_at_alpha_zero() {
        let w = compute_noaug_weights(&[0.2, 0.5, 0.9], 0.5).unwrap();
        assert!(w[0] > w[1] && w[1] > w[2]);
        let z = compute_noaug_weights(&[0.2, 0.5, 0.9], 0.0).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn regulate_class_keeps_magnitudes() {
        let ts = registry(false);
        let state = RegulationState::new(vec![0.0, 1.0], 0.5).unwrap();
        let mut pol = Policy::one_hot(10, 5);
        pol.m = vec![0.42; 10];
        let reg = regulate_class(&pol, 0, &state, &ts).unwrap();
        assert_eq!(reg.m, pol.m);
        assert!((reg.p[0] - 0.5).abs() < 1e-12); // w = 0.5 toward identity
        assert!((reg.p[5] - 0.5).abs() < 1e-12);
        let untouched = regulate_class(&pol, 1, &state, &ts).unwrap();
        assert_eq!(untouched.p, pol.p);
    }
}
