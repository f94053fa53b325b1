//! Shared fixtures for the criterion benchmarks in `benches/`.

use rsak_core::data::{self, TaskConfig, VQASample};
use rsak_core::training::jitter;
use rsak_core::{ModelConfig, ModelWeights, Result};

/// A toy-sized RS-adapter model with non-trivial adapter weights, its
/// merged counterpart, and a batch of samples to run them on.
pub struct Fixture {
    pub unmerged: ModelWeights,
    pub merged: ModelWeights,
    pub batch: Vec<VQASample>,
}

impl Fixture {
    pub fn new(cfg: &ModelConfig, batch: usize, seed: u64) -> Result<Self> {
        let mut unmerged = ModelWeights::init(cfg, seed)?;
        jitter(&mut unmerged, seed ^ 0x5eed, 0.02);
        let merged = unmerged.merged()?;
        let task = TaskConfig {
            grid_side: cfg.image_side,
        };
        let batch = data::generate(batch, seed, &task)?;
        Ok(Fixture {
            unmerged,
            merged,
            batch,
        })
    }
}
