//! Single-stream multimodal transformer: text and patch embeddings are
//! concatenated, run through `N` pre-norm blocks, and the first class token
//! feeds a three-layer classification head.

mod block;
mod config;
mod embed;
mod weights;

pub use block::{block_forward, mlp_forward, msa_forward, GradScope};
pub use config::{AdapterMode, AdapterVariant, ModelConfig, PAD_ID};
pub use embed::{embed_image, embed_text, fuse, patchify};
pub use weights::{param_group, BlockWeights, EmbeddingWeights, HeadProjection, HeadWeights, ModelWeights, ParamGroup};

use block::{block_backward, block_cached, BlockCache};
use embed::{embed_backward, embed_patches};

use crate::error::Result;
use crate::numerics::{gelu, gelu_backward, mm, mm_nt, mm_tn_acc, Matrix};

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `1 x n_answers`; softmax is left to the loss or the evaluator.
    pub logits: Matrix,
    /// Row 0 of the last block's output.
    pub class_token: Matrix,
    /// Per layer, per head attention matrices.
    pub attentions: Vec<Vec<Matrix>>,
}

pub(crate) struct HeadCache {
    input: Matrix,
    pre1: Matrix,
    act1: Matrix,
    pre2: Matrix,
    act2: Matrix,
}

/// Everything the backward pass needs from one forward pass.
pub struct ModelCache {
    tokens: Vec<usize>,
    patches: Matrix,
    blocks: Vec<BlockCache>,
    head: HeadCache,
    seq_len: usize,
}

fn affine(x: &Matrix, w: &Matrix, b: &Matrix) -> Matrix {
    let mut out = mm(x, w);
    out.add_row_broadcast(b);
    out
}

/// Classification head on a `1 x d` class token.
pub fn head_forward(head: &HeadWeights, class_token: &Matrix) -> Matrix {
    head_cached(head, class_token).0
}

pub(crate) fn head_cached(head: &HeadWeights, class_token: &Matrix) -> (Matrix, HeadCache) {
    let pre1 = affine(class_token, &head.w1, &head.b1);
    let act1 = gelu(&pre1);
    let pre2 = affine(&act1, &head.w2, &head.b2);
    let act2 = gelu(&pre2);
    let logits = affine(&act2, &head.w3, &head.b3);
    let cache = HeadCache {
        input: class_token.clone(),
        pre1,
        act1,
        pre2,
        act2,
    };
    (logits, cache)
}

/// Backpropagates through the head, accumulating into `grads` when given,
/// and returns the gradient with respect to the class token.
pub(crate) fn head_backward(
    head: &HeadWeights,
    h: &HeadCache,
    d_logits: &Matrix,
    grads: Option<&mut HeadWeights>,
) -> Matrix {
    let d_pre2 = gelu_backward(&h.pre2, &mm_nt(d_logits, &head.w3));
    let d_pre1 = gelu_backward(&h.pre1, &mm_nt(&d_pre2, &head.w2));
    if let Some(g) = grads {
        mm_tn_acc(&mut g.w3, &h.act2, d_logits);
        g.b3.add_assign(d_logits);
        mm_tn_acc(&mut g.w2, &h.act1, &d_pre2);
        g.b2.add_assign(&d_pre2);
        mm_tn_acc(&mut g.w1, &h.input, &d_pre1);
        g.b1.add_assign(&d_pre1);
    }
    mm_nt(&d_pre1, &head.w1)
}

/// Forward pass keeping the intermediate values for [`backward`].
pub fn forward_train(w: &ModelWeights, tokens: &[usize], image: &Matrix) -> Result<(ForwardOutput, ModelCache)> {
    let cfg = &w.cfg;
    let text = embed_text(tokens, &w.embed, cfg)?;
    let patches = patchify(image, cfg)?;
    let img = embed_patches(&patches, &w.embed);
    let mut x = fuse(&text, &img, &w.embed)?;
    let seq_len = x.rows();

    let mut caches = Vec::with_capacity(w.blocks.len());
    for b in &w.blocks {
        let (next, cache) = block_cached(&x, b, cfg);
        caches.push(cache);
        x = next;
    }
    let class_token = x.row_block(0, 1);
    let (logits, head) = head_cached(&w.head, &class_token);

    let attentions = caches.iter().map(|c| c.attention().to_vec()).collect();
    let out = ForwardOutput {
        logits,
        class_token,
        attentions,
    };
    let cache = ModelCache {
        tokens: tokens.to_vec(),
        patches,
        blocks: caches,
        head,
        seq_len,
    };
    Ok((out, cache))
}

/// Full forward pass: embeddings, blocks, class token, head.
pub fn model_forward(w: &ModelWeights, tokens: &[usize], image: &Matrix) -> Result<ForwardOutput> {
    forward_train(w, tokens, image).map(|(out, _)| out)
}

/// Lowest block the backward pass must enter for the given scope.
fn lowest_block(w: &ModelWeights, scope: GradScope) -> Option<usize> {
    if scope.embeddings || scope.backbone {
        return Some(0);
    }
    if scope.adapters {
        return w
            .blocks
            .iter()
            .position(|b| b.msa_adapter.is_some() || b.mlp_adapter.is_some());
    }
    None
}

/// Backpropagates `d_logits` and accumulates parameter gradients into `grads`
/// for the groups enabled in `scope`. Frozen groups are skipped entirely.
pub fn backward(w: &ModelWeights, cache: &ModelCache, d_logits: &Matrix, scope: GradScope, grads: &mut ModelWeights) {
    let lowest = lowest_block(w, scope);
    if !scope.head && lowest.is_none() {
        return;
    }
    let d_class = head_backward(&w.head, &cache.head, d_logits, scope.head.then_some(&mut grads.head));
    let Some(lowest) = lowest else {
        return;
    };

    let mut dx = Matrix::zeros(cache.seq_len, w.cfg.d);
    dx.row_mut(0).copy_from_slice(d_class.row(0));
    for l in (lowest..w.blocks.len()).rev() {
        dx = block_backward(&dx, &cache.blocks[l], &w.blocks[l], &w.cfg, &mut grads.blocks[l], scope);
    }
    if scope.embeddings {
        embed_backward(&dx, &cache.tokens, &cache.patches, &w.cfg, &mut grads.embed);
    }
}

/// Head-averaged class-token attention of one layer, split by modality.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    /// The whole averaged row, over all `n_t + n_v + 2` tokens.
    pub full_row: Vec<f64>,
    /// Text segment: text class token followed by question/pad tokens.
    pub text: Vec<f64>,
    /// Weight on the image class token.
    pub image_class: f64,
    /// Patch weights as a `patch_grid x patch_grid` grid.
    pub image: Matrix,
}

/// Averages row 0 of every head's attention matrix and splits it into the
/// text and image segments.
pub fn attention_map(attentions: &[Matrix], cfg: &ModelConfig) -> AttentionMap {
    assert!(!attentions.is_empty(), "no attention heads");
    let n = attentions[0].cols();
    let mut full_row = vec![0.0; n];
    for a in attentions {
        for (o, v) in full_row.iter_mut().zip(a.row(0)) {
            *o += v;
        }
    }
    let inv = 1.0 / attentions.len() as f64;
    full_row.iter_mut().for_each(|v| *v *= inv);
    let split = cfg.text_rows();
    let text = full_row[..split].to_vec();
    let image_class = full_row[split];
    let image = Matrix::from_vec(cfg.patch_grid, cfg.patch_grid, full_row[split + 1..].to_vec())
        .expect("image segment has n_v entries");
    AttentionMap {
        full_row,
        text,
        image_class,
        image,
    }
}
