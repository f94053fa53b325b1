//! Multi-head self-attention, the MLP, and their wiring into one transformer
//! block, with hand-written backward passes.

use super::config::ModelConfig;
use super::weights::{BlockWeights, HeadProjection};
use crate::error::{Error, Result};
use crate::numerics::{
    gelu, gelu_backward, layernorm, layernorm_backward, mm, mm_nt, mm_tn_acc, softmax_rows_backward,
    softmax_rows_in_place, LayerNormCache, Matrix,
};
use crate::rsadapter::{AdapterCache, AdapterSlot};

/// Which parameter groups receive gradients during a backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradScope {
    pub embeddings: bool,
    pub backbone: bool,
    pub adapters: bool,
    pub head: bool,
}

impl GradScope {
    pub const ALL: GradScope = GradScope {
        embeddings: true,
        backbone: true,
        adapters: true,
        head: true,
    };
}

pub(crate) struct MsaCache {
    q: Vec<Matrix>,
    k: Vec<Matrix>,
    v: Vec<Matrix>,
    pub(crate) probs: Vec<Matrix>,
    concat: Matrix,
}

fn check_width(x: &Matrix, d: usize, op: &'static str) -> Result<()> {
    if x.cols() != d {
        return Err(Error::Dimension {
            op,
            left: x.shape(),
            right: (x.rows(), d),
        });
    }
    Ok(())
}

pub(crate) fn msa_cached(x: &Matrix, w: &BlockWeights) -> (Matrix, MsaCache) {
    let n = x.rows();
    let d = w.w_o.rows();
    let dk = w.heads[0].w_q.cols();
    let inv_sqrt = 1.0 / (dk as f64).sqrt();
    let mut concat = Matrix::zeros(n, d);
    let mut cache = MsaCache {
        q: Vec::with_capacity(w.heads.len()),
        k: Vec::with_capacity(w.heads.len()),
        v: Vec::with_capacity(w.heads.len()),
        probs: Vec::with_capacity(w.heads.len()),
        concat: Matrix::zeros(0, 0),
    };
    for (h, hp) in w.heads.iter().enumerate() {
        let q = mm(x, &hp.w_q);
        let k = mm(x, &hp.w_k);
        let v = mm(x, &hp.w_v);
        let mut p = mm_nt(&q, &k);
        p.scale_in_place(inv_sqrt);
        softmax_rows_in_place(&mut p);
        concat.set_column_block(h * dk, &mm(&p, &v));
        cache.q.push(q);
        cache.k.push(k);
        cache.v.push(v);
        cache.probs.push(p);
    }
    let out = mm(&concat, &w.w_o);
    cache.concat = concat;
    (out, cache)
}

/// `Concat(head_1..head_h)·W_O`, each head `softmax(QKᵀ/√d_k)·V`. Also returns
/// the per-head attention matrices.
pub fn msa_forward(x: &Matrix, w: &BlockWeights) -> Result<(Matrix, Vec<Matrix>)> {
    check_width(x, w.w_o.rows(), "msa_forward")?;
    let (out, cache) = msa_cached(x, w);
    Ok((out, cache.probs))
}

fn msa_backward(
    d_out: &Matrix,
    x: &Matrix,
    cache: &MsaCache,
    w: &BlockWeights,
    mut grads: Option<&mut BlockWeights>,
) -> Matrix {
    let dk = w.heads[0].w_q.cols();
    let inv_sqrt = 1.0 / (dk as f64).sqrt();
    if let Some(g) = grads.as_deref_mut() {
        mm_tn_acc(&mut g.w_o, &cache.concat, d_out);
    }
    let d_concat = mm_nt(d_out, &w.w_o);
    let mut dx = Matrix::zeros(x.rows(), x.cols());
    for (h, hp) in w.heads.iter().enumerate() {
        let d_head = d_concat.column_block(h * dk, dk);
        let p = &cache.probs[h];
        let d_p = mm_nt(&d_head, &cache.v[h]);
        let mut d_v = Matrix::zeros(p.cols(), dk);
        mm_tn_acc(&mut d_v, p, &d_head);
        let mut d_s = softmax_rows_backward(p, &d_p);
        d_s.scale_in_place(inv_sqrt);
        let d_q = mm(&d_s, &cache.k[h]);
        let mut d_k = Matrix::zeros(d_s.cols(), dk);
        mm_tn_acc(&mut d_k, &d_s, &cache.q[h]);
        if let Some(g) = grads.as_deref_mut() {
            let gh: &mut HeadProjection = &mut g.heads[h];
            mm_tn_acc(&mut gh.w_q, x, &d_q);
            mm_tn_acc(&mut gh.w_k, x, &d_k);
            mm_tn_acc(&mut gh.w_v, x, &d_v);
        }
        dx.add_assign(&mm_nt(&d_q, &hp.w_q));
        dx.add_assign(&mm_nt(&d_k, &hp.w_k));
        dx.add_assign(&mm_nt(&d_v, &hp.w_v));
    }
    dx
}

pub(crate) struct MlpCache {
    pre: Matrix,
    act: Matrix,
}

pub(crate) fn mlp_cached(x: &Matrix, w: &BlockWeights) -> (Matrix, MlpCache) {
    let mut pre = mm(x, &w.mlp_w1);
    pre.add_row_broadcast(&w.mlp_b1);
    let act = gelu(&pre);
    let mut out = mm(&act, &w.mlp_w2);
    out.add_row_broadcast(&w.mlp_b2);
    (out, MlpCache { pre, act })
}

/// `GELU(x·W1 + b1)·W2 + b2`.
pub fn mlp_forward(x: &Matrix, w: &BlockWeights) -> Result<Matrix> {
    check_width(x, w.mlp_w1.rows(), "mlp_forward")?;
    Ok(mlp_cached(x, w).0)
}

fn mlp_backward(
    d_out: &Matrix,
    x: &Matrix,
    cache: &MlpCache,
    w: &BlockWeights,
    mut grads: Option<&mut BlockWeights>,
) -> Matrix {
    if let Some(g) = grads.as_deref_mut() {
        mm_tn_acc(&mut g.mlp_w2, &cache.act, d_out);
        g.mlp_b2.add_assign(&d_out.column_sums());
    }
    let d_act = mm_nt(d_out, &w.mlp_w2);
    let d_pre = gelu_backward(&cache.pre, &d_act);
    if let Some(g) = grads {
        mm_tn_acc(&mut g.mlp_w1, x, &d_pre);
        g.mlp_b1.add_assign(&d_pre.column_sums());
    }
    mm_nt(&d_pre, &w.mlp_w1)
}

/// One residual half of a block: a sub-block `g` on `LN(x)` plus an optional adapter.
struct HalfCache {
    ln: LayerNormCache,
    ln_out: Matrix,
    adapter: Option<AdapterCache>,
}

pub(crate) struct BlockCache {
    first: HalfCache,
    msa: MsaCache,
    second: HalfCache,
    mlp: MlpCache,
}

impl BlockCache {
    pub(crate) fn attention(&self) -> &[Matrix] {
        &self.msa.probs
    }
}

fn effective_scale(slot: &AdapterSlot, cfg: &ModelConfig) -> f64 {
    if cfg.scaling_enabled {
        slot.scale()
    } else {
        1.0
    }
}

/// Residual update of one half: `g_out` plus the adapter branch for this placement.
fn half_update(
    g_out: &Matrix,
    ln_out: &Matrix,
    slot: Option<&AdapterSlot>,
    cfg: &ModelConfig,
) -> (Matrix, Option<AdapterCache>) {
    let skip = cfg.skip_connection_in_adapter;
    match slot {
        None => (g_out.clone(), None),
        Some(slot) => {
            let s = effective_scale(slot, cfg);
            if cfg.adapter_mode.is_sequential() {
                let cache = slot.forward_cached(g_out, skip);
                (cache.out.scale(s), Some(cache))
            } else {
                let cache = slot.forward_cached(ln_out, skip);
                let mut upd = g_out.clone();
                upd.add_scaled(&cache.out, s);
                (upd, Some(cache))
            }
        }
    }
}

pub(crate) fn block_cached(x: &Matrix, w: &BlockWeights, cfg: &ModelConfig) -> (Matrix, BlockCache) {
    let (ln1_out, ln1) = layernorm(x, &w.ln1_gamma, &w.ln1_beta).expect("validated shapes");
    let (msa_out, msa) = msa_cached(&ln1_out, w);
    let (upd, ada1) = half_update(&msa_out, &ln1_out, w.msa_adapter.as_ref(), cfg);
    let mut x1 = x.clone();
    x1.add_assign(&upd);

    let (ln2_out, ln2) = layernorm(&x1, &w.ln2_gamma, &w.ln2_beta).expect("validated shapes");
    let (mlp_out, mlp) = mlp_cached(&ln2_out, w);
    let (upd, ada2) = half_update(&mlp_out, &ln2_out, w.mlp_adapter.as_ref(), cfg);
    let mut x2 = x1;
    x2.add_assign(&upd);

    let cache = BlockCache {
        first: HalfCache {
            ln: ln1,
            ln_out: ln1_out,
            adapter: ada1,
        },
        msa,
        second: HalfCache {
            ln: ln2,
            ln_out: ln2_out,
            adapter: ada2,
        },
        mlp,
    };
    (x2, cache)
}

/// One transformer block. With `AdapterMode::None` this is
/// `x' = x + MSA(LN x); y = x' + MLP(LN x')`; parallel modes add
/// `s·Adapter(LN ·)` beside each enabled sub-block, sequential modes replace
/// the sub-block output `h` by `s·Adapter(h)`.
pub fn block_forward(x: &Matrix, w: &BlockWeights, cfg: &ModelConfig) -> Result<Matrix> {
    check_width(x, cfg.d, "block_forward")?;
    Ok(block_cached(x, w, cfg).0)
}

/// Backward through one half's residual update. Returns the gradient w.r.t.
/// the sub-block output and, for parallel adapters, the extra gradient
/// reaching the normalized input.
fn half_backward(
    d_upd: &Matrix,
    half: &HalfCache,
    slot: Option<&AdapterSlot>,
    grad_slot: Option<&mut AdapterSlot>,
    cfg: &ModelConfig,
    scope: GradScope,
) -> (Matrix, Option<Matrix>) {
    let (Some(slot), Some(cache)) = (slot, half.adapter.as_ref()) else {
        return (d_upd.clone(), None);
    };
    let skip = cfg.skip_connection_in_adapter;
    let s = effective_scale(slot, cfg);
    let grad_slot = grad_slot.filter(|_| scope.adapters);
    let d_branch = d_upd.scale(s);
    let d_scale = d_upd.dot(&cache.out);
    let grad_slot = grad_slot.map(|g| {
        if cfg.scaling_enabled {
            *g.scale_mut() += d_scale;
        }
        g
    });
    let d_in = slot.backward(&d_branch, cache, skip, grad_slot);
    if cfg.adapter_mode.is_sequential() {
        (d_in, None)
    } else {
        (d_upd.clone(), Some(d_in))
    }
}

/// Backward through one block. Accumulates into `grads` per `scope` and
/// returns the gradient w.r.t. the block input.
pub(crate) fn block_backward(
    d_out: &Matrix,
    cache: &BlockCache,
    w: &BlockWeights,
    cfg: &ModelConfig,
    grads: &mut BlockWeights,
    scope: GradScope,
) -> Matrix {
    // second half: x2 = x1 + upd2
    let (d_mlp_out, d_ln2_extra) = half_backward(
        d_out,
        &cache.second,
        w.mlp_adapter.as_ref(),
        grads.mlp_adapter.as_mut(),
        cfg,
        scope,
    );
    let bb = scope.backbone;
    let mut d_ln2 = mlp_backward(
        &d_mlp_out,
        &cache.second.ln_out,
        &cache.mlp,
        w,
        bb.then_some(&mut *grads),
    );
    if let Some(extra) = d_ln2_extra {
        d_ln2.add_assign(&extra);
    }
    let (dx1_ln, dg2, db2) = layernorm_backward(&d_ln2, &cache.second.ln, &w.ln2_gamma);
    if bb {
        grads.ln2_gamma.add_assign(&dg2);
        grads.ln2_beta.add_assign(&db2);
    }
    let mut d_x1 = d_out.clone();
    d_x1.add_assign(&dx1_ln);

    // first half: x1 = x + upd1
    let (d_msa_out, d_ln1_extra) = half_backward(
        &d_x1,
        &cache.first,
        w.msa_adapter.as_ref(),
        grads.msa_adapter.as_mut(),
        cfg,
        scope,
    );
    let mut d_ln1 = msa_backward(
        &d_msa_out,
        &cache.first.ln_out,
        &cache.msa,
        w,
        bb.then_some(&mut *grads),
    );
    if let Some(extra) = d_ln1_extra {
        d_ln1.add_assign(&extra);
    }
    let (dx_ln, dg1, db1) = layernorm_backward(&d_ln1, &cache.first.ln, &w.ln1_gamma);
    if bb {
        grads.ln1_gamma.add_assign(&dg1);
        grads.ln1_beta.add_assign(&db1);
    }
    let mut dx = d_x1;
    dx.add_assign(&dx_ln);
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AdapterMode, ModelWeights};
    use crate::numerics::{rng_normal, softmax_rows, Rng};

    fn cfg(d: usize, heads: usize) -> ModelConfig {
        let mut c = ModelConfig::toy();
        c.d = d;
        c.n_heads = heads;
        c.n_layers = 1;
        c.d_prime = 3;
        c.adapter_layer_mask = vec![true];
        c
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let c = cfg(8, 2);
        let w = ModelWeights::init(&c, 1).unwrap();
        let x = rng_normal(&mut Rng::new(2), 6, 8, 1.0);
        let (_, att) = msa_forward(&x, &w.blocks[0]).unwrap();
        for a in att {
            for r in 0..a.rows() {
                assert!((a.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_query_key_gives_uniform_attention() {
        let c = cfg(6, 1);
        let mut w = ModelWeights::init(&c, 1).unwrap().blocks.remove(0);
        w.heads[0].w_q.fill(0.0);
        w.heads[0].w_k.fill(0.0);
        let x = rng_normal(&mut Rng::new(3), 5, 6, 1.0);
        let (out, att) = msa_forward(&x, &w).unwrap();
        assert!(att[0].data().iter().all(|&p| (p - 0.2).abs() < 1e-15));
        let vo = mm(&mm(&x, &w.heads[0].w_v), &w.w_o);
        let mean = vo.column_sums().scale(1.0 / 5.0);
        for r in 0..5 {
            for c in 0..6 {
                assert!((out.get(r, c) - mean.get(0, c)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn msa_is_permutation_equivariant() {
        let c = cfg(8, 2);
        let w = ModelWeights::init(&c, 4).unwrap().blocks.remove(0);
        let x = rng_normal(&mut Rng::new(5), 4, 8, 1.0);
        let perm = [2, 0, 3, 1];
        let xp = Matrix::vstack(
            &perm
                .iter()
                .map(|&i| x.row_block(i, 1))
                .collect::<Vec<_>>()
                .iter()
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let (y, _) = msa_forward(&x, &w).unwrap();
        let (yp, _) = msa_forward(&xp, &w).unwrap();
        for (r, &i) in perm.iter().enumerate() {
            for c in 0..8 {
                assert!((yp.get(r, c) - y.get(i, c)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn mlp_cases() {
        let c = cfg(4, 1);
        let mut w = ModelWeights::init(&c, 1).unwrap().blocks.remove(0);
        let x = rng_normal(&mut Rng::new(6), 3, 4, 1.0);
        // direct composition
        let mut h = mm(&x, &w.mlp_w1);
        h.add_row_broadcast(&w.mlp_b1);
        let mut want = mm(&gelu(&h), &w.mlp_w2);
        want.add_row_broadcast(&w.mlp_b2);
        assert!(mlp_forward(&x, &w).unwrap().max_abs_diff(&want) < 1e-15);

        w.mlp_w1.fill(0.0);
        w.mlp_w2.fill(0.0);
        assert_eq!(mlp_forward(&x, &w).unwrap(), Matrix::zeros(3, 4));
        w.mlp_b2 = Matrix::row_vector(vec![1.0, -2.0, 0.5, 3.0]);
        let out = mlp_forward(&x, &w).unwrap();
        for r in 0..3 {
            assert_eq!(out.row(r), w.mlp_b2.row(0));
        }
    }

    #[test]
    fn adapters_at_init_leave_block_unchanged() {
        let base = cfg(8, 2);
        let x = rng_normal(&mut Rng::new(7), 5, 8, 1.0);
        let vanilla_cfg = base.with_adapters(AdapterMode::None);
        let vanilla = ModelWeights::init(&vanilla_cfg, 3).unwrap();
        let want = block_forward(&x, &vanilla.blocks[0], &vanilla_cfg).unwrap();
        for mode in [
            AdapterMode::ParallelMsa,
            AdapterMode::ParallelMlp,
            AdapterMode::ParallelBoth,
        ] {
            let c = base.with_adapters(mode);
            let w = ModelWeights::init(&c, 3).unwrap();
            assert_eq!(block_forward(&x, &w.blocks[0], &c).unwrap(), want, "{mode:?}");
        }
        for mode in [AdapterMode::SequentialMsa, AdapterMode::SequentialMlp] {
            let mut c = base.with_adapters(mode);
            c.skip_connection_in_adapter = true;
            let w = ModelWeights::init(&c, 3).unwrap();
            assert_eq!(block_forward(&x, &w.blocks[0], &c).unwrap(), want, "{mode:?}");
        }
    }

    #[test]
    fn zero_scales_annihilate_adapters() {
        let c = cfg(8, 2).with_adapters(AdapterMode::ParallelBoth);
        let mut rng = Rng::new(9);
        let mut w = ModelWeights::init(&c, 3).unwrap();
        for slot in w.adapters_mut() {
            if let AdapterSlot::Rs(a) = slot {
                *a = crate::rsadapter::AdapterWeights::random(8, 3, &mut rng, 0.5);
                a.scale = 0.0;
            }
        }
        let vanilla_cfg = c.with_adapters(AdapterMode::None);
        let vanilla = ModelWeights::init(&vanilla_cfg, 3).unwrap();
        let x = rng_normal(&mut rng, 5, 8, 1.0);
        assert_eq!(
            block_forward(&x, &w.blocks[0], &c).unwrap(),
            block_forward(&x, &vanilla.blocks[0], &vanilla_cfg).unwrap()
        );
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let c = cfg(8, 2);
        let w = ModelWeights::init(&c, 3).unwrap();
        assert!(block_forward(&Matrix::zeros(2, 7), &w.blocks[0], &c).is_err());
        assert!(msa_forward(&Matrix::zeros(2, 7), &w.blocks[0]).is_err());
        assert!(mlp_forward(&Matrix::zeros(2, 7), &w.blocks[0]).is_err());
        let _ = softmax_rows(&Matrix::zeros(1, 1));
    }
}
