//! The adapter family: bottleneck adapters with optional linear transforms
//! after each projection, their fold into plain affine maps, parameter
//! accounting, and freeze policies.

mod accounting;
mod adapter;
mod freeze;

pub use accounting::{
    adapter_arith_ops, adapter_params, formula_inference_per_adapter, formula_train_per_adapter, model_arith_ops,
    param_count, transform_params, ParamBreakdown, Phase,
};
pub use adapter::{adapter_forward, merge, merged_forward, pull_back, AdapterSlot, AdapterWeights, MergedAdapter};
pub use freeze::{build_freeze_mask, FreezePolicy};

pub(crate) use adapter::AdapterCache;
