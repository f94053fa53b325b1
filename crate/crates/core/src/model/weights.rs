use serde::{Deserialize, Serialize};

use super::config::{AdapterMode, AdapterVariant, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{rng_normal, Matrix, Rng};
use crate::params::{join, visit_matrix, visit_matrix_mut, Visit, VisitMut};
use crate::rsadapter::{pull_back, AdapterSlot, AdapterWeights, MergedAdapter};

/// Token, position, patch-projection, class and modal-type embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingWeights {
    /// `vocab_size x d`
    pub token_table: Matrix,
    /// `(n_t + 1) x d`
    pub text_pos: Matrix,
    /// `(n_v + 1) x d`
    pub image_pos: Matrix,
    /// `patch_dim x d`, no bias.
    pub patch_proj: Matrix,
    pub t_class: Matrix,
    pub v_class: Matrix,
    /// Row 0 marks text tokens, row 1 image tokens.
    pub type_table: Matrix,
}

/// Query, key and value projections of one attention head, each `d x d/h`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadProjection {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockWeights {
    pub ln1_gamma: Matrix,
    pub ln1_beta: Matrix,
    pub heads: Vec<HeadProjection>,
    /// `d x d`
    pub w_o: Matrix,
    pub ln2_gamma: Matrix,
    pub ln2_beta: Matrix,
    /// `d x 4d`
    pub mlp_w1: Matrix,
    pub mlp_b1: Matrix,
    /// `4d x d`
    pub mlp_w2: Matrix,
    pub mlp_b2: Matrix,
    pub msa_adapter: Option<AdapterSlot>,
    pub mlp_adapter: Option<AdapterSlot>,
}

/// Three affine layers `d → head_hidden → head_hidden → n_answers`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadWeights {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
    pub w3: Matrix,
    pub b3: Matrix,
}

/// All weights of the model together with the config that shaped them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelWeights {
    pub cfg: ModelConfig,
    pub embed: EmbeddingWeights,
    pub blocks: Vec<BlockWeights>,
    pub head: HeadWeights,
}

/// Coarse ownership of a parameter, used by freeze policies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Embedding,
    Backbone,
    Adapter,
    Head,
}

pub fn param_group(name: &str) -> ParamGroup {
    if name.starts_with("embed.") {
        ParamGroup::Embedding
    } else if name.starts_with("head.") {
        ParamGroup::Head
    } else if name.contains("_adapter.") {
        ParamGroup::Adapter
    } else {
        ParamGroup::Backbone
    }
}

pub(crate) fn layer_prefix(layer: usize) -> String {
    format!("layers.{layer:02}")
}

fn normal(rng: &Rng, name: &str, rows: usize, cols: usize, std: f64) -> Matrix {
    rng_normal(&mut rng.fork(name), rows, cols, std)
}

impl ModelWeights {
    /// Fresh weights: `N(0, init_std²)` for backbone matrices, zero biases,
    /// unit layernorm gains, and the adapter initialization of
    /// [`AdapterWeights::init`].
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let rng = Rng::new(seed);
        let d = cfg.d;
        let std = cfg.init_std;
        let embed = EmbeddingWeights {
            token_table: normal(&rng, "embed.token_table", cfg.vocab_size, d, std),
            text_pos: normal(&rng, "embed.text_pos", cfg.text_rows(), d, std),
            image_pos: normal(&rng, "embed.image_pos", cfg.image_rows(), d, std),
            patch_proj: normal(&rng, "embed.patch_proj", cfg.patch_dim(), d, std),
            t_class: normal(&rng, "embed.t_class", 1, d, std),
            v_class: normal(&rng, "embed.v_class", 1, d, std),
            type_table: normal(&rng, "embed.type_table", 2, d, std),
        };
        let blocks = (0..cfg.n_layers)
            .map(|l| {
                let p = layer_prefix(l);
                let heads = (0..cfg.n_heads)
                    .map(|h| {
                        let hp = format!("{p}.attn.head{h:02}");
                        HeadProjection {
                            w_q: normal(&rng, &join(&hp, "w_q"), d, cfg.d_head(), std),
                            w_k: normal(&rng, &join(&hp, "w_k"), d, cfg.d_head(), std),
                            w_v: normal(&rng, &join(&hp, "w_v"), d, cfg.d_head(), std),
                        }
                    })
                    .collect();
                let adapter = |which: &str, present: bool| {
                    present.then(|| {
                        let ap = format!("{p}.{which}");
                        match cfg.adapter_variant {
                            AdapterVariant::Rs => AdapterSlot::Rs(AdapterWeights::init(d, cfg.d_prime, &rng, &ap, std)),
                            AdapterVariant::Plain => {
                                AdapterSlot::Plain(MergedAdapter::init_plain(d, cfg.d_prime, &rng, &ap, std))
                            }
                        }
                    })
                };
                BlockWeights {
                    ln1_gamma: Matrix::filled(1, d, 1.0),
                    ln1_beta: Matrix::zeros(1, d),
                    heads,
                    w_o: normal(&rng, &format!("{p}.attn.w_o"), d, d, std),
                    ln2_gamma: Matrix::filled(1, d, 1.0),
                    ln2_beta: Matrix::zeros(1, d),
                    mlp_w1: normal(&rng, &format!("{p}.mlp.w1"), d, cfg.mlp_hidden(), std),
                    mlp_b1: Matrix::zeros(1, cfg.mlp_hidden()),
                    mlp_w2: normal(&rng, &format!("{p}.mlp.w2"), cfg.mlp_hidden(), d, std),
                    mlp_b2: Matrix::zeros(1, d),
                    msa_adapter: adapter("msa_adapter", cfg.has_msa_adapter(l)),
                    mlp_adapter: adapter("mlp_adapter", cfg.has_mlp_adapter(l)),
                }
            })
            .collect();
        let hh = cfg.head_hidden;
        let head = HeadWeights {
            w1: normal(&rng, "head.w1", d, hh, std),
            b1: Matrix::zeros(1, hh),
            w2: normal(&rng, "head.w2", hh, hh, std),
            b2: Matrix::zeros(1, hh),
            w3: normal(&rng, "head.w3", hh, cfg.n_answers, std),
            b3: Matrix::zeros(1, cfg.n_answers),
        };
        Ok(Self {
            cfg: cfg.clone(),
            embed,
            blocks,
            head,
        })
    }

    /// Same structure, every value zero; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut(&mut |_, _, v| v.iter_mut().for_each(|x| *x = 0.0));
        z
    }

    pub fn is_merged(&self) -> bool {
        self.adapters().any(|a| matches!(a, AdapterSlot::Merged(_)))
    }

    pub fn has_rs_adapters(&self) -> bool {
        self.adapters().any(|a| matches!(a, AdapterSlot::Rs(_)))
    }

    pub fn adapters(&self) -> impl Iterator<Item = &AdapterSlot> {
        self.blocks
            .iter()
            .flat_map(|b| b.msa_adapter.iter().chain(b.mlp_adapter.iter()))
    }

    pub fn adapters_mut(&mut self) -> impl Iterator<Item = &mut AdapterSlot> {
        self.blocks
            .iter_mut()
            .flat_map(|b| b.msa_adapter.iter_mut().chain(b.mlp_adapter.iter_mut()))
    }

    /// Copy with every `Rs` adapter folded into its FC layers.
    pub fn merged(&self) -> Result<Self> {
        if !self.has_rs_adapters() {
            return Err(Error::Config("nothing to merge: model has no RSAdapter layers".into()));
        }
        let mut out = self.clone();
        for slot in out.adapters_mut() {
            *slot = slot.merged();
        }
        Ok(out)
    }

    /// Converts gradients taken on `self.merged()` into gradients for
    /// `self`: folded adapter gradients are pulled back through the merge,
    /// everything else is already in the right coordinates.
    pub fn pull_back_grads(&self, folded_grads: &ModelWeights) -> ModelWeights {
        let mut out = folded_grads.clone();
        for (slot, g) in self.adapters().zip(out.adapters_mut()) {
            if let (AdapterSlot::Rs(w), AdapterSlot::Merged(gm)) = (slot, &*g) {
                *g = AdapterSlot::Rs(pull_back(w, gm));
            }
        }
        out
    }

    /// Visits every parameter in a fixed order. The scale of an adapter is
    /// a parameter only when scaling is enabled.
    pub fn visit(&self, f: &mut Visit<'_>) {
        let e = &self.embed;
        for (name, m) in [
            ("token_table", &e.token_table),
            ("text_pos", &e.text_pos),
            ("image_pos", &e.image_pos),
            ("patch_proj", &e.patch_proj),
            ("t_class", &e.t_class),
            ("v_class", &e.v_class),
            ("type_table", &e.type_table),
        ] {
            visit_matrix("embed", name, m, f);
        }
        let with_scale = self.cfg.scaling_enabled;
        for (l, b) in self.blocks.iter().enumerate() {
            let p = layer_prefix(l);
            visit_matrix(&p, "ln1.gamma", &b.ln1_gamma, f);
            visit_matrix(&p, "ln1.beta", &b.ln1_beta, f);
            for (h, hp) in b.heads.iter().enumerate() {
                let pre = format!("{p}.attn.head{h:02}");
                visit_matrix(&pre, "w_q", &hp.w_q, f);
                visit_matrix(&pre, "w_k", &hp.w_k, f);
                visit_matrix(&pre, "w_v", &hp.w_v, f);
            }
            visit_matrix(&p, "attn.w_o", &b.w_o, f);
            visit_matrix(&p, "ln2.gamma", &b.ln2_gamma, f);
            visit_matrix(&p, "ln2.beta", &b.ln2_beta, f);
            visit_matrix(&p, "mlp.w1", &b.mlp_w1, f);
            visit_matrix(&p, "mlp.b1", &b.mlp_b1, f);
            visit_matrix(&p, "mlp.w2", &b.mlp_w2, f);
            visit_matrix(&p, "mlp.b2", &b.mlp_b2, f);
            if let Some(a) = &b.msa_adapter {
                a.visit(&format!("{p}.msa_adapter"), with_scale, f);
            }
            if let Some(a) = &b.mlp_adapter {
                a.visit(&format!("{p}.mlp_adapter"), with_scale, f);
            }
        }
        let h = &self.head;
        for (name, m) in [
            ("w1", &h.w1),
            ("b1", &h.b1),
            ("w2", &h.w2),
            ("b2", &h.b2),
            ("w3", &h.w3),
            ("b3", &h.b3),
        ] {
            visit_matrix("head", name, m, f);
        }
    }

    pub fn visit_mut(&mut self, f: &mut VisitMut<'_>) {
        let e = &mut self.embed;
        for (name, m) in [
            ("token_table", &mut e.token_table),
            ("text_pos", &mut e.text_pos),
            ("image_pos", &mut e.image_pos),
            ("patch_proj", &mut e.patch_proj),
            ("t_class", &mut e.t_class),
            ("v_class", &mut e.v_class),
            ("type_table", &mut e.type_table),
        ] {
            visit_matrix_mut("embed", name, m, f);
        }
        let with_scale = self.cfg.scaling_enabled;
        for (l, b) in self.blocks.iter_mut().enumerate() {
            let p = layer_prefix(l);
            visit_matrix_mut(&p, "ln1.gamma", &mut b.ln1_gamma, f);
            visit_matrix_mut(&p, "ln1.beta", &mut b.ln1_beta, f);
            for (h, hp) in b.heads.iter_mut().enumerate() {
                let pre = format!("{p}.attn.head{h:02}");
                visit_matrix_mut(&pre, "w_q", &mut hp.w_q, f);
                visit_matrix_mut(&pre, "w_k", &mut hp.w_k, f);
                visit_matrix_mut(&pre, "w_v", &mut hp.w_v, f);
            }
            visit_matrix_mut(&p, "attn.w_o", &mut b.w_o, f);
            visit_matrix_mut(&p, "ln2.gamma", &mut b.ln2_gamma, f);
            visit_matrix_mut(&p, "ln2.beta", &mut b.ln2_beta, f);
            visit_matrix_mut(&p, "mlp.w1", &mut b.mlp_w1, f);
            visit_matrix_mut(&p, "mlp.b1", &mut b.mlp_b1, f);
            visit_matrix_mut(&p, "mlp.w2", &mut b.mlp_w2, f);
            visit_matrix_mut(&p, "mlp.b2", &mut b.mlp_b2, f);
            if let Some(a) = &mut b.msa_adapter {
                a.visit_mut(&format!("{p}.msa_adapter"), with_scale, f);
            }
            if let Some(a) = &mut b.mlp_adapter {
                a.visit_mut(&format!("{p}.mlp_adapter"), with_scale, f);
            }
        }
        let h = &mut self.head;
        for (name, m) in [
            ("w1", &mut h.w1),
            ("b1", &mut h.b1),
            ("w2", &mut h.w2),
            ("b2", &mut h.b2),
            ("w3", &mut h.w3),
            ("b3", &mut h.b3),
        ] {
            visit_matrix_mut("head", name, m, f);
        }
    }

    /// `(name, shape)` of every parameter in visiting order.
    pub fn param_shapes(&self) -> Vec<(String, (usize, usize))> {
        let mut out = Vec::new();
        self.visit(&mut |n, s, _| out.push((n.to_string(), s)));
        out
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _, v| n += v.len());
        n
    }

    /// Copies values by name from a flat `(name, shape, values)` source.
    pub fn load_from(&mut self, mut lookup: impl FnMut(&str) -> Option<((usize, usize), Vec<f64>)>) -> Result<()> {
        let mut err = None;
        self.visit_mut(&mut |name, shape, v| {
            if err.is_some() {
                return;
            }
            match lookup(name) {
                None => err = Some(Error::MissingParam(name.to_string())),
                Some((found, _)) if found != shape => {
                    err = Some(Error::ParamShape {
                        name: name.to_string(),
                        expected: shape,
                        found,
                    })
                }
                Some((_, values)) => v.copy_from_slice(&values),
            }
        });
        err.map_or(Ok(()), Err)
    }

    /// Empty skeleton for `cfg` in either the trainable or the folded form,
    /// ready for [`ModelWeights::load_from`].
    pub fn skeleton(cfg: &ModelConfig, merged: bool) -> Result<Self> {
        let mut cfg0 = cfg.clone();
        cfg0.init_std = 0.0;
        let mut w = Self::init(&cfg0, 0)?;
        w.cfg = cfg.clone();
        if merged {
            if cfg.adapter_mode == AdapterMode::None || cfg.adapter_variant != AdapterVariant::Rs {
                return Err(Error::Config("only RSAdapter models have a merged form".into()));
            }
            w = w.merged()?;
        }
        Ok(w)
    }
}
