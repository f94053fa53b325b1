use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where adapters are inserted into each transformer block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterMode {
    None,
    /// Adapter applied to the MSA output: `x + B(MSA(LN x))`.
    SequentialMsa,
    /// Adapter applied to the MLP output.
    SequentialMlp,
    /// Adapter beside the MSA, reading the same normalized input.
    ParallelMsa,
    /// Adapter beside the MLP.
    ParallelMlp,
    /// Adapters beside both sub-blocks.
    ParallelBoth,
}

impl AdapterMode {
    pub const ALL: [AdapterMode; 6] = [
        AdapterMode::None,
        AdapterMode::SequentialMsa,
        AdapterMode::SequentialMlp,
        AdapterMode::ParallelMsa,
        AdapterMode::ParallelMlp,
        AdapterMode::ParallelBoth,
    ];

    pub fn has_msa(self) -> bool {
        matches!(
            self,
            AdapterMode::SequentialMsa | AdapterMode::ParallelMsa | AdapterMode::ParallelBoth
        )
    }

    pub fn has_mlp(self) -> bool {
        matches!(
            self,
            AdapterMode::SequentialMlp | AdapterMode::ParallelMlp | AdapterMode::ParallelBoth
        )
    }

    pub fn is_sequential(self) -> bool {
        matches!(self, AdapterMode::SequentialMsa | AdapterMode::SequentialMlp)
    }

    pub fn code(self) -> u8 {
        AdapterMode::ALL.iter().position(|&m| m == self).unwrap() as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        AdapterMode::ALL.get(code as usize).copied()
    }
}

/// Adapter flavour: a plain bottleneck, or one with foldable linear transforms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterVariant {
    Plain,
    Rs,
}

/// Architecture and adapter placement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden width.
    pub d: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Adapter bottleneck width.
    pub d_prime: usize,
    pub vocab_size: usize,
    /// Maximum question length in tokens (excluding the class token).
    pub max_text_len: usize,
    /// Image side length in pixels.
    pub image_side: usize,
    /// Patches per image side.
    pub patch_grid: usize,
    pub patch_channels: usize,
    pub n_answers: usize,
    pub head_hidden: usize,
    pub adapter_mode: AdapterMode,
    pub adapter_variant: AdapterVariant,
    pub skip_connection_in_adapter: bool,
    pub scaling_enabled: bool,
    /// One flag per layer; adapters are inserted only where set.
    pub adapter_layer_mask: Vec<bool>,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

fn default_init_std() -> f64 {
    0.02
}

/// Token id reserved for padding short questions.
pub const PAD_ID: usize = 0;

impl ModelConfig {
    /// Base-sized model (d=768, 12 layers, 32-pixel patches) with adapters
    /// beside MSA and MLP in every layer, per-adapter scaling, and a
    /// 9-answer head.
    pub fn base_scale() -> Self {
        Self {
            d: 768,
            n_layers: 12,
            n_heads: 12,
            d_prime: 192,
            vocab_size: 30522,
            max_text_len: 40,
            image_side: 384,
            patch_grid: 12,
            patch_channels: 3,
            n_answers: 9,
            head_hidden: 768,
            adapter_mode: AdapterMode::ParallelBoth,
            adapter_variant: AdapterVariant::Rs,
            skip_connection_in_adapter: false,
            scaling_enabled: true,
            adapter_layer_mask: vec![true; 12],
            init_std: 0.02,
        }
    }

    /// Desk-scale defaults for the synthetic grid task. The backbone is not
    /// pretrained, so it is initialized wider than the usual 0.02: at that
    /// scale a random backbone maps every sample to nearly the same class
    /// token and nothing downstream of it can learn.
    pub fn toy() -> Self {
        Self {
            d: 64,
            n_layers: 4,
            n_heads: 4,
            d_prime: 16,
            vocab_size: 32,
            max_text_len: 5,
            image_side: 8,
            patch_grid: 4,
            patch_channels: 3,
            n_answers: 12,
            head_hidden: 64,
            adapter_mode: AdapterMode::ParallelBoth,
            adapter_variant: AdapterVariant::Rs,
            skip_connection_in_adapter: false,
            scaling_enabled: true,
            adapter_layer_mask: vec![true; 4],
            init_std: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.n_layers == 0 || self.n_heads == 0 {
            return bad("d, n_layers and n_heads must be positive".into());
        }
        if self.d % self.n_heads != 0 {
            return bad(format!("d = {} is not divisible by n_heads = {}", self.d, self.n_heads));
        }
        if self.adapter_layer_mask.len() != self.n_layers {
            return bad(format!(
                "adapter_layer_mask has {} entries for {} layers",
                self.adapter_layer_mask.len(),
                self.n_layers
            ));
        }
        if self.adapter_mode != AdapterMode::None && self.d_prime == 0 {
            return bad("d_prime must be at least 1 when adapters are enabled".into());
        }
        if self.patch_grid == 0 || self.image_side % self.patch_grid != 0 {
            return bad(format!(
                "image_side = {} is not divisible by patch_grid = {}",
                self.image_side, self.patch_grid
            ));
        }
        if self.patch_channels == 0 || self.n_answers == 0 || self.head_hidden == 0 {
            return bad("patch_channels, n_answers and head_hidden must be positive".into());
        }
        if self.vocab_size < PAD_ID + 2 {
            return bad("vocabulary must hold the pad token and at least one word".into());
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return bad("init_std must be finite and nonnegative".into());
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d / self.n_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        4 * self.d
    }

    pub fn patch_size(&self) -> usize {
        self.image_side / self.patch_grid
    }

    /// Number of image tokens.
    pub fn n_v(&self) -> usize {
        self.patch_grid * self.patch_grid
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size() * self.patch_size() * self.patch_channels
    }

    /// Text rows (class token plus padded question).
    pub fn text_rows(&self) -> usize {
        self.max_text_len + 1
    }

    pub fn image_rows(&self) -> usize {
        self.n_v() + 1
    }

    pub fn seq_len(&self) -> usize {
        self.text_rows() + self.image_rows()
    }

    pub fn has_msa_adapter(&self, layer: usize) -> bool {
        self.adapter_mode.has_msa() && self.adapter_layer_mask[layer]
    }

    pub fn has_mlp_adapter(&self, layer: usize) -> bool {
        self.adapter_mode.has_mlp() && self.adapter_layer_mask[layer]
    }

    pub fn adapter_count(&self) -> usize {
        (0..self.n_layers)
            .map(|l| usize::from(self.has_msa_adapter(l)) + usize::from(self.has_mlp_adapter(l)))
            .sum()
    }

    /// Copy with the given placement applied to every layer.
    pub fn with_adapters(&self, mode: AdapterMode) -> Self {
        Self {
            adapter_mode: mode,
            adapter_layer_mask: vec![true; self.n_layers],
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::toy().validate().unwrap();
        ModelConfig::base_scale().validate().unwrap();
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = ModelConfig::toy();
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy();
        c.adapter_layer_mask.pop();
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy();
        c.d_prime = 0;
        assert!(c.validate().is_err());
        c.adapter_mode = AdapterMode::None;
        c.validate().unwrap();
    }

    #[test]
    fn shape_arithmetic() {
        let mut c = ModelConfig::toy();
        c.max_text_len = 8;
        c.image_side = 4;
        c.patch_grid = 2;
        assert_eq!(c.n_v(), 4);
        assert_eq!(c.patch_dim(), 12);
        assert_eq!(c.seq_len(), 14);
    }

    #[test]
    fn mode_codes_round_trip() {
        for m in AdapterMode::ALL {
            assert_eq!(AdapterMode::from_code(m.code()), Some(m));
        }
        assert_eq!(AdapterMode::from_code(6), None);
    }
}
