use serde::{Deserialize, Serialize};

use crate::model::{param_group, GradScope, ParamGroup};
use crate::training::ParamStore;

/// Which parameters a run updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezePolicy {
    /// Only the classification head.
    LinearProbe,
    /// Everything.
    FullFinetune,
    /// Adapter tensors, their scaling factors, and the head.
    Adapters,
}

impl FreezePolicy {
    pub fn is_trainable(self, name: &str) -> bool {
        match self {
            FreezePolicy::FullFinetune => true,
            FreezePolicy::LinearProbe => param_group(name) == ParamGroup::Head,
            FreezePolicy::Adapters => matches!(param_group(name), ParamGroup::Head | ParamGroup::Adapter),
        }
    }

    /// Gradient groups the backward pass has to produce.
    pub fn grad_scope(self) -> GradScope {
        match self {
            FreezePolicy::FullFinetune => GradScope::ALL,
            FreezePolicy::LinearProbe => GradScope {
                embeddings: false,
                backbone: false,
                adapters: false,
                head: true,
            },
            FreezePolicy::Adapters => GradScope {
                embeddings: false,
                backbone: false,
                adapters: true,
                head: true,
            },
        }
    }
}

/// Sets every trainable flag in `store` according to `policy`.
pub fn build_freeze_mask(policy: FreezePolicy, store: &mut ParamStore) {
    store.set_trainable(|name| policy.is_trainable(name));
}
