use serde::{Deserialize, Serialize};

use super::store::ParamStore;
use crate::error::{Error, Result};

/// Optimization hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub warmup_lr: f64,
    pub base_lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// Batch 64, four warm-up epochs at `1e-3`, then `1e-5`.
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 64,
            warmup_epochs: 4,
            warmup_lr: 1e-3,
            base_lr: 1e-5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Train(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.warmup_epochs > self.epochs {
            return bad("warmup_epochs exceeds epochs");
        }
        if !(self.warmup_lr > 0.0 && self.base_lr > 0.0) || !self.warmup_lr.is_finite() || !self.base_lr.is_finite() {
            return bad("learning rates must be positive and finite");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return bad("adam_eps must be positive");
        }
        Ok(())
    }
}

/// Two-phase step schedule: `warmup_lr` for the first `warmup_epochs`
/// epochs, `base_lr` afterwards.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    if epoch < cfg.warmup_epochs {
        cfg.warmup_lr
    } else {
        cfg.base_lr
    }
}

/// `-log softmax(logits)[target]` and its gradient `softmax - onehot`.
pub fn cross_entropy(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    if target >= logits.len() {
        return Err(Error::TargetOutOfRange {
            target,
            classes: logits.len(),
        });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let loss = total.ln() - (logits[target] - max);
    let mut grad: Vec<f64> = exps.iter().map(|e| e / total).collect();
    grad[target] -= 1.0;
    Ok((loss, grad))
}

/// One Adam update (with bias correction) of every trainable entry at step
/// `t >= 1`. Gradient buffers are zeroed afterwards; frozen tensors and
/// their moments are left untouched.
pub fn adam_step(store: &mut ParamStore, lr: f64, t: u64, cfg: &TrainConfig) {
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    for name in store.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>() {
        let e = store.get_mut(&name).expect("name taken from store");
        if e.trainable {
            let g = e.grad.data();
            let m = e.adam_m.data_mut();
            for (mi, gi) in m.iter_mut().zip(g) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
            }
            let v = e.adam_v.data_mut();
            for (vi, gi) in v.iter_mut().zip(g) {
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            }
            let (m, v) = (e.adam_m.data(), e.adam_v.data());
            for ((p, mi), vi) in e.tensor.data_mut().iter_mut().zip(m).zip(v) {
                *p -= lr * (mi / c1) / ((vi / c2).sqrt() + cfg.adam_eps);
            }
        }
    }
    store.zero_grads();
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ModelWeights};

    #[test]
    fn uniform_logits_give_log_k() {
        let (l, g) = cross_entropy(&[0.3; 7], 2).unwrap();
        assert!((l - 7f64.ln()).abs() < 1e-14);
        assert!(g.iter().sum::<f64>().abs() < 1e-15);
    }

    #[test]
    fn confident_logits_give_small_loss() {
        let (l, _) = cross_entropy(&[0.0, 800.0, -5.0], 1).unwrap();
        assert!(l < 1e-300 + 1e-12);
        assert!(matches!(cross_entropy(&[0.0], 1), Err(Error::TargetOutOfRange { .. })));
    }

    #[test]
    fn schedule_steps_down() {
        let mut c = TrainConfig::default();
        assert_eq!(lr_at(0, &c), 1e-3);
        assert_eq!(lr_at(3, &c), 1e-3);
        assert_eq!(lr_at(4, &c), 1e-5);
        c.warmup_epochs = 0;
        assert_eq!(lr_at(0, &c), 1e-5);
    }

    #[test]
    fn validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let c = TrainConfig {
            warmup_epochs: 11,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        let c = TrainConfig {
            base_lr: 0.0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }

    fn scalar_store() -> ParamStore {
        let w = ModelWeights::init(&ModelConfig::toy(), 1).unwrap();
        let mut s = ParamStore::from_weights(&w);
        s.set_trainable(|n| n == "head.b3");
        s
    }

    #[test]
    fn adam_single_step_by_hand() {
        let cfg = TrainConfig::default();
        let mut s = scalar_store();
        let before = s.get("head.b3").unwrap().tensor.get(0, 0);
        s.get_mut("head.b3").unwrap().grad.set(0, 0, 1.0);
        adam_step(&mut s, 0.01, 1, &cfg);
        // m = 0.1, v = 0.001, both bias-corrected back to 1.
        let want = before - 0.01 * 1.0 / (1.0 + 1e-8);
        let got = s.get("head.b3").unwrap().tensor.get(0, 0);
        assert!((got - want).abs() < 1e-12);
        assert_eq!(s.get("head.b3").unwrap().grad.get(0, 0), 0.0);
    }

    #[test]
    fn zero_gradient_and_frozen_entries_stay() {
        let cfg = TrainConfig::default();
        let mut s = scalar_store();
        let frozen_before = s.get("head.w3").unwrap().tensor.clone();
        let b3 = s.get("head.b3").unwrap().tensor.clone();
        s.get_mut("head.w3").unwrap().grad.fill(3.0);
        adam_step(&mut s, 0.1, 1, &cfg);
        assert_eq!(s.get("head.w3").unwrap().tensor, frozen_before);
        assert_eq!(s.get("head.b3").unwrap().tensor, b3);
    }
}
