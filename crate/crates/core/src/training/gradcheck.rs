use serde::Serialize;

use super::optim::cross_entropy;
use super::store::ParamStore;
use crate::data::VQASample;
use crate::error::Result;
use crate::model::{backward, forward_train, model_forward, ModelWeights};
use crate::numerics::{Matrix, Rng};
use crate::rsadapter::{build_freeze_mask, FreezePolicy};

/// Denominator floor of the relative error. A central difference with
/// `eps = 1e-5` on an O(1) loss carries roughly `ulp(loss) / (2·eps)` ≈ 5e-11
/// of rounding noise, so gradients much smaller than 1e-4 cannot be
/// resolved to 1e-6 relative accuracy; they are judged on absolute error
/// (1e-10 for a tolerance of 1e-6) instead.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    /// Number of scalar parameters compared.
    pub checked: usize,
    pub max_rel_err: f64,
    /// Entry with the largest relative error, as `name[index]`.
    pub worst: Option<String>,
    /// Largest relative error per trainable tensor.
    pub per_tensor: Vec<(String, f64)>,
    pub tol: f64,
    pub passed: bool,
}

fn loss(w: &ModelWeights, sample: &VQASample) -> Result<f64> {
    let out = model_forward(w, &sample.tokens, &sample.image)?;
    Ok(cross_entropy(out.logits.data(), sample.answer)?.0)
}

fn set_entry(w: &mut ModelWeights, name: &str, index: usize, value: f64) {
    w.visit_mut(&mut |n, _, values| {
        if n == name {
            values[index] = value;
        }
    });
}

/// Compares the analytic gradient of the cross-entropy loss on `sample`
/// with central differences, for every parameter trainable under
/// `policy`. Relative error is `|a - n| / max(|a|, |n|, REL_FLOOR)`; the check
/// passes iff the maximum is strictly below `tol`.
pub fn gradcheck(
    w: &ModelWeights,
    sample: &VQASample,
    policy: FreezePolicy,
    eps: f64,
    tol: f64,
) -> Result<GradcheckReport> {
    let (out, cache) = forward_train(w, &sample.tokens, &sample.image)?;
    let (_, d_logits) = cross_entropy(out.logits.data(), sample.answer)?;
    let mut grads = w.zeros_like();
    backward(
        w,
        &cache,
        &Matrix::row_vector(d_logits),
        policy.grad_scope(),
        &mut grads,
    );

    let mut store = ParamStore::from_weights(w);
    build_freeze_mask(policy, &mut store);
    store.accumulate_grads(&grads, 1.0);

    let mut probe = w.clone();
    let mut checked = 0;
    let mut max_rel_err = 0.0f64;
    let mut worst = None;
    let mut per_tensor = Vec::new();
    for (name, e) in store.iter().filter(|(_, e)| e.trainable) {
        let mut tensor_max = 0.0f64;
        for (i, (&x, &analytic)) in e.tensor.data().iter().zip(e.grad.data()).enumerate() {
            set_entry(&mut probe, name, i, x + eps);
            let up = loss(&probe, sample)?;
            set_entry(&mut probe, name, i, x - eps);
            let down = loss(&probe, sample)?;
            set_entry(&mut probe, name, i, x);
            let numeric = (up - down) / (2.0 * eps);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
            checked += 1;
            tensor_max = tensor_max.max(rel);
            if rel > max_rel_err || worst.is_none() {
                max_rel_err = max_rel_err.max(rel);
                worst = Some(format!("{name}[{i}]"));
            }
        }
        per_tensor.push((name.clone(), tensor_max));
    }
    Ok(GradcheckReport {
        checked,
        max_rel_err,
        worst,
        per_tensor,
        tol,
        passed: max_rel_err < tol,
    })
}

/// Adds `N(0, std²)` noise to every parameter, so that checks do not run
/// at the special initial point (zero up-projections, identity transforms).
pub fn jitter(w: &mut ModelWeights, seed: u64, std: f64) {
    let mut rng = Rng::new(seed).fork("jitter");
    w.visit_mut(&mut |_, _, values| {
        for v in values {
            *v += std * rng.normal();
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, TaskConfig};
    use crate::model::ModelConfig;

    fn tiny() -> (ModelWeights, VQASample) {
        let mut c = ModelConfig::toy();
        c.d = 8;
        c.n_layers = 1;
        c.n_heads = 2;
        c.d_prime = 4;
        c.head_hidden = 8;
        c.adapter_layer_mask = vec![true];
        let mut w = ModelWeights::init(&c, 4).unwrap();
        jitter(&mut w, 4, 0.3);
        (w, generate(1, 4, &TaskConfig::default()).unwrap().remove(0))
    }

    #[test]
    fn frozen_parameters_are_excluded() {
        let (w, s) = tiny();
        let r = gradcheck(&w, &s, FreezePolicy::LinearProbe, 1e-5, 1e-6).unwrap();
        assert!(r.per_tensor.iter().all(|(n, _)| n.starts_with("head.")));
        assert_eq!(
            r.checked,
            w.head.w1.len() + w.head.b1.len() + w.head.w2.len() + w.head.b2.len() + w.head.w3.len() + w.head.b3.len()
        );
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn zero_tolerance_always_fails() {
        let (w, s) = tiny();
        let r = gradcheck(&w, &s, FreezePolicy::LinearProbe, 1e-5, 0.0).unwrap();
        assert!(!r.passed);
    }
}
