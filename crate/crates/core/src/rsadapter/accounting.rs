//! Closed-form parameter and arithmetic accounting.

use serde::Serialize;

use super::freeze::FreezePolicy;
use crate::model::{AdapterVariant, ModelConfig};

/// Training-time (transforms present) or inference-time (folded) model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    Inference,
}

/// Parameter totals for one configuration.
///
/// Two adapter accountings are reported side by side. `formula` is the
/// closed form `2·d·d' + 2·(d + d')` per adapter during training and
/// `2·d·d'` at inference. `exact` counts every tensor the model actually
/// holds: with full `d'×d'` and `d×d` transforms the training count is
/// larger, and the folded adapter keeps its `d + d'` merged biases.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamBreakdown {
    pub phase: Phase,
    pub embeddings: usize,
    pub backbone: usize,
    pub head: usize,
    pub adapter_count: usize,
    pub per_adapter_exact: usize,
    pub per_adapter_formula: usize,
    /// Transform weights and biases of one adapter (zero for plain adapters).
    pub per_adapter_transforms: usize,
    pub scaling: usize,
    /// Every parameter of the model in this phase.
    pub total: usize,
    pub tunable_exact: usize,
    pub tunable_formula: usize,
}

/// `2·d·d' + 2·(d + d')`: per-layer tunable count during training.
pub fn formula_train_per_adapter(d: usize, d_prime: usize) -> usize {
    2 * d * d_prime + 2 * (d + d_prime)
}

/// `2·d·d'`: extra parameters per adapter after folding, biases omitted.
pub fn formula_inference_per_adapter(d: usize, d_prime: usize) -> usize {
    2 * d * d_prime
}

/// Parameters held by one adapter.
pub fn adapter_params(d: usize, d_prime: usize, variant: AdapterVariant, phase: Phase) -> usize {
    let folded = 2 * d * d_prime + d + d_prime;
    match (variant, phase) {
        (AdapterVariant::Rs, Phase::Train) => folded + transform_params(d, d_prime),
        _ => folded,
    }
}

/// Weights and biases of both linear transforms: `d'² + d' + d² + d`.
pub fn transform_params(d: usize, d_prime: usize) -> usize {
    d_prime * d_prime + d_prime + d * d + d
}

pub fn param_count(cfg: &ModelConfig, policy: FreezePolicy, phase: Phase) -> ParamBreakdown {
    let d = cfg.d;
    let dp = cfg.d_prime;
    let hh = cfg.head_hidden;
    let embeddings =
        cfg.vocab_size * d + cfg.text_rows() * d + cfg.image_rows() * d + cfg.patch_dim() * d + 2 * d + 2 * d;
    let per_layer = 3 * d * d // per-head q, k, v
        + d * d // w_o
        + 4 * d // two layernorms
        + d * cfg.mlp_hidden()
        + cfg.mlp_hidden()
        + cfg.mlp_hidden() * d
        + d;
    let backbone = per_layer * cfg.n_layers;
    let head = d * hh + hh + hh * hh + hh + hh * cfg.n_answers + cfg.n_answers;
    let adapter_count = cfg.adapter_count();
    let per_adapter_exact = if adapter_count == 0 {
        0
    } else {
        adapter_params(d, dp, cfg.adapter_variant, phase)
    };
    let per_adapter_formula = match (adapter_count, phase) {
        (0, _) => 0,
        (_, Phase::Train) => formula_train_per_adapter(d, dp),
        (_, Phase::Inference) => formula_inference_per_adapter(d, dp),
    };
    let per_adapter_transforms = match (cfg.adapter_variant, phase) {
        (AdapterVariant::Rs, Phase::Train) if adapter_count > 0 => transform_params(d, dp),
        _ => 0,
    };
    let scaling = if cfg.scaling_enabled { adapter_count } else { 0 };
    let adapters_exact = adapter_count * per_adapter_exact;
    let total = embeddings + backbone + head + adapters_exact + scaling;
    let (tunable_exact, tunable_formula) = match policy {
        FreezePolicy::LinearProbe => (head, head),
        FreezePolicy::FullFinetune => (total, total),
        FreezePolicy::Adapters => (
            adapters_exact + scaling + head,
            adapter_count * per_adapter_formula + scaling + head,
        ),
    };
    ParamBreakdown {
        phase,
        embeddings,
        backbone,
        head,
        adapter_count,
        per_adapter_exact,
        per_adapter_formula,
        per_adapter_transforms,
        scaling,
        total,
        tunable_exact,
        tunable_formula,
    }
}

/// Multiplications plus additions for one adapter on one token, excluding
/// the activation. An `m x n` affine map costs `2·m·n` (one multiply and
/// one add per weight) plus `n` bias additions.
pub fn adapter_arith_ops(d: usize, d_prime: usize, variant: AdapterVariant, phase: Phase) -> u64 {
    let (d, dp) = (d as u64, d_prime as u64);
    let affine = |m: u64, n: u64| 2 * m * n + n;
    let folded = affine(d, dp) + affine(dp, d);
    match (variant, phase) {
        (AdapterVariant::Rs, Phase::Train) => folded + affine(dp, dp) + affine(d, d),
        _ => folded,
    }
}

/// Arithmetic operations of a whole forward pass for one sample, counted
/// as in [`adapter_arith_ops`]; normalization, softmax and activations are
/// excluded.
pub fn model_arith_ops(cfg: &ModelConfig, phase: Phase) -> u64 {
    let n = cfg.seq_len() as u64;
    let d = cfg.d as u64;
    let dk = cfg.d_head() as u64;
    let h = cfg.n_heads as u64;
    let hidden = cfg.mlp_hidden() as u64;
    let mm = |m: u64, k: u64, nn: u64| 2 * m * k * nn;
    let embed = mm(cfg.n_v() as u64, cfg.patch_dim() as u64, d);
    let attn = h * (3 * mm(n, d, dk) + mm(n, dk, n) + mm(n, n, dk)) + mm(n, d, d);
    let mlp = mm(n, d, hidden) + hidden * n + mm(n, hidden, d) + d * n;
    let per_layer = attn + mlp;
    let adapters = cfg.adapter_count() as u64 * n * adapter_arith_ops(cfg.d, cfg.d_prime, cfg.adapter_variant, phase);
    let hh = cfg.head_hidden as u64;
    let head = 2 * d * hh + hh + 2 * hh * hh + hh + 2 * hh * cfg.n_answers as u64 + cfg.n_answers as u64;
    embed + cfg.n_layers as u64 * per_layer + adapters + head
}
