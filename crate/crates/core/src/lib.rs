//! Re-parameterizable parallel adapters for a single-stream multimodal
//! transformer, trained and evaluated on a synthetic grid VQA task.

pub mod data;
mod error;
pub mod model;
pub mod numerics;
mod params;
pub mod rsadapter;
pub mod training;

pub use error::{Error, Result};
pub use model::{AdapterMode, AdapterVariant, ModelConfig, ModelWeights};
pub use numerics::{Matrix, Rng};
pub use params::{Visit, VisitMut};
pub use rsadapter::{FreezePolicy, Phase};
