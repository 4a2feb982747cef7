//! AdamW with decoupled weight decay, plus the warmup+cosine LR schedule.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// AdamW optimizer state over a fixed parameter list.
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(param_sizes: &[usize], weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One update with bias-corrected moments and decoupled decay:
    /// p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p).
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::dim(format!(
                "optimizer built for {} params, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            if params[i].numel() != self.m[i].len() || grads[i].numel() != self.m[i].len() {
                return Err(Error::dim(format!(
                    "param {i}: size {} vs state {}",
                    params[i].numel(),
                    self.m[i].len()
                )));
            }
            let g = grads[i].data().to_vec();
            let p = params[i].data_mut();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * p[j]);
            }
        }
        Ok(())
    }
}

/// Learning-rate schedule for a run of known length.
#[derive(Clone, Copy, Debug)]
pub enum LrSchedule {
    Constant {
        lr: f64,
    },
    /// Linear warmup over the first 10% of steps, then cosine decay to 0.
    WarmupCosine {
        base_lr: f64,
        total_steps: u64,
    },
}

impl LrSchedule {
    pub fn warmup_cosine(base_lr: f64, total_steps: u64) -> Self {
        LrSchedule::WarmupCosine {
            base_lr,
            total_steps: total_steps.max(1),
        }
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        match *self {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::WarmupCosine {
                base_lr,
                total_steps,
            } => {
                let warmup = (total_steps / 10).max(1);
                if step < warmup {
                    base_lr * (step + 1) as f64 / warmup as f64
                } else {
                    let span = (total_steps - warmup).max(1) as f64;
                    let progress = ((step - warmup) as f64 / span).min(1.0);
                    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
                }
            }
        }
    }
}
