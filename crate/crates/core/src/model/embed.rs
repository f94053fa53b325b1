use super::config::{ModelConfig, PAD_ID};
use super::weights::EmbeddingWeights;
use crate::error::{Error, Result};
use crate::numerics::{mm, mm_tn_acc, Matrix};

/// `(n_t + 1) x d`: class token followed by the padded question, plus positions.
pub fn embed_text(tokens: &[usize], w: &EmbeddingWeights, cfg: &ModelConfig) -> Result<Matrix> {
    if tokens.len() > cfg.max_text_len {
        return Err(Error::QuestionTooLong {
            len: tokens.len(),
            max: cfg.max_text_len,
        });
    }
    if let Some(&id) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::TokenOutOfRange {
            id,
            vocab: cfg.vocab_size,
        });
    }
    let mut out = w.text_pos.clone();
    for (o, v) in out.row_mut(0).iter_mut().zip(w.t_class.data()) {
        *o += v;
    }
    for r in 1..cfg.text_rows() {
        let id = tokens.get(r - 1).copied().unwrap_or(PAD_ID);
        for (o, v) in out.row_mut(r).iter_mut().zip(w.token_table.row(id)) {
            *o += v;
        }
    }
    Ok(out)
}

/// Rearranges a `(side·side) x channels` image into `n_v x patch_dim` rows,
/// patches in row-major grid order, each flattened as (row, col, channel).
pub fn patchify(image: &Matrix, cfg: &ModelConfig) -> Result<Matrix> {
    let side = cfg.image_side;
    if image.shape() != (side * side, cfg.patch_channels) {
        return Err(Error::Dimension {
            op: "embed_image",
            left: image.shape(),
            right: (side * side, cfg.patch_channels),
        });
    }
    let p = cfg.patch_size();
    let grid = cfg.patch_grid;
    let mut out = Matrix::zeros(cfg.n_v(), cfg.patch_dim());
    for pr in 0..grid {
        for pc in 0..grid {
            let row = out.row_mut(pr * grid + pc);
            let mut k = 0;
            for dy in 0..p {
                for dx in 0..p {
                    let pixel = (pr * p + dy) * side + pc * p + dx;
                    for &v in image.row(pixel) {
                        row[k] = v;
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// `(n_v + 1) x d`: image class token followed by projected patches, plus positions.
pub fn embed_image(image: &Matrix, w: &EmbeddingWeights, cfg: &ModelConfig) -> Result<Matrix> {
    let patches = patchify(image, cfg)?;
    Ok(embed_patches(&patches, w))
}

pub(crate) fn embed_patches(patches: &Matrix, w: &EmbeddingWeights) -> Matrix {
    let proj = mm(patches, &w.patch_proj);
    let mut out = w.image_pos.clone();
    for (o, v) in out.row_mut(0).iter_mut().zip(w.v_class.data()) {
        *o += v;
    }
    for r in 0..proj.rows() {
        for (o, v) in out.row_mut(r + 1).iter_mut().zip(proj.row(r)) {
            *o += v;
        }
    }
    out
}

/// Adds the modal-type rows and stacks text above image.
pub fn fuse(text: &Matrix, image: &Matrix, w: &EmbeddingWeights) -> Result<Matrix> {
    let mut x = Matrix::vstack(&[text, image])?;
    let split = text.rows();
    for r in 0..x.rows() {
        let t = if r < split { 0 } else { 1 };
        for (o, v) in x.row_mut(r).iter_mut().zip(w.type_table.row(t)) {
            *o += v;
        }
    }
    Ok(x)
}

/// Accumulates embedding gradients from `d x0`.
pub(crate) fn embed_backward(
    d_x0: &Matrix,
    tokens: &[usize],
    patches: &Matrix,
    cfg: &ModelConfig,
    g: &mut EmbeddingWeights,
) {
    let split = cfg.text_rows();
    let d = cfg.d;
    for r in 0..d_x0.rows() {
        let row = d_x0.row(r);
        let t = if r < split { 0 } else { 1 };
        add_into(g.type_table.row_mut(t), row);
        if r < split {
            add_into(g.text_pos.row_mut(r), row);
            if r == 0 {
                add_into(g.t_class.row_mut(0), row);
            } else {
                let id = tokens.get(r - 1).copied().unwrap_or(PAD_ID);
                add_into(g.token_table.row_mut(id), row);
            }
        } else {
            let ir = r - split;
            add_into(g.image_pos.row_mut(ir), row);
            if ir == 0 {
                add_into(g.v_class.row_mut(0), row);
            }
        }
    }
    let d_proj = d_x0.row_block(split + 1, cfg.n_v());
    debug_assert_eq!(d_proj.cols(), d);
    mm_tn_acc(&mut g.patch_proj, patches, &d_proj);
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelWeights;
    use crate::numerics::{rng_normal, Rng};

    fn small_cfg() -> ModelConfig {
        let mut c = ModelConfig::toy();
        c.d = 8;
        c.n_heads = 2;
        c.max_text_len = 8;
        c.image_side = 4;
        c.patch_grid = 2;
        c.vocab_size = 10;
        c
    }

    fn zeroed(cfg: &ModelConfig) -> EmbeddingWeights {
        let mut w = ModelWeights::init(cfg, 3).unwrap().embed;
        for m in [
            &mut w.token_table,
            &mut w.text_pos,
            &mut w.image_pos,
            &mut w.patch_proj,
            &mut w.t_class,
            &mut w.v_class,
            &mut w.type_table,
        ] {
            m.fill(0.0);
        }
        w
    }

    #[test]
    fn empty_question_uses_class_and_pad_rows() {
        let cfg = small_cfg();
        let w = ModelWeights::init(&cfg, 3).unwrap().embed;
        let t = embed_text(&[], &w, &cfg).unwrap();
        assert_eq!(t.rows(), 9);
        for c in 0..cfg.d {
            assert_eq!(t.get(0, c), w.t_class.get(0, c) + w.text_pos.get(0, c));
            assert_eq!(t.get(5, c), w.token_table.get(PAD_ID, c) + w.text_pos.get(5, c));
        }
    }

    #[test]
    fn zero_tables_give_positions() {
        let cfg = small_cfg();
        let mut w = zeroed(&cfg);
        w.text_pos = rng_normal(&mut Rng::new(1), cfg.text_rows(), cfg.d, 1.0);
        assert_eq!(embed_text(&[0], &w, &cfg).unwrap(), w.text_pos);
    }

    #[test]
    fn token_permutation_permutes_rows() {
        let cfg = small_cfg();
        let mut w = ModelWeights::init(&cfg, 3).unwrap().embed;
        w.text_pos.fill(0.0);
        let a = embed_text(&[3, 5, 7], &w, &cfg).unwrap();
        let b = embed_text(&[7, 3, 5], &w, &cfg).unwrap();
        assert_eq!(a.row(0), b.row(0));
        assert_eq!(a.row(1), b.row(2));
        assert_eq!(a.row(2), b.row(3));
        assert_eq!(a.row(3), b.row(1));
    }

    #[test]
    fn text_errors() {
        let cfg = small_cfg();
        let w = ModelWeights::init(&cfg, 3).unwrap().embed;
        assert!(matches!(
            embed_text(&[10], &w, &cfg),
            Err(Error::TokenOutOfRange { id: 10, .. })
        ));
        assert!(matches!(
            embed_text(&[1; 9], &w, &cfg),
            Err(Error::QuestionTooLong { .. })
        ));
    }

    #[test]
    fn image_shapes_and_locality() {
        let cfg = small_cfg();
        let w = ModelWeights::init(&cfg, 3).unwrap().embed;
        let img = rng_normal(&mut Rng::new(2), 16, 3, 1.0);
        let v = embed_image(&img, &w, &cfg).unwrap();
        assert_eq!(v.shape(), (5, 8));
        // pixel (3, 3) lives in patch (1, 1) → token row 4
        let mut img2 = img.clone();
        img2.set(15, 1, 9.0);
        let v2 = embed_image(&img2, &w, &cfg).unwrap();
        for r in 0..5 {
            assert_eq!(v.row(r) == v2.row(r), r != 4, "row {r}");
        }
        assert!(embed_image(&Matrix::zeros(16, 2), &w, &cfg).is_err());
    }

    #[test]
    fn zero_image_zero_projection() {
        let cfg = small_cfg();
        let mut w = ModelWeights::init(&cfg, 3).unwrap().embed;
        w.patch_proj.fill(0.0);
        let v = embed_image(&Matrix::zeros(16, 3), &w, &cfg).unwrap();
        let mut want = w.image_pos.clone();
        for (o, c) in want.row_mut(0).iter_mut().zip(w.v_class.data()) {
            *o += c;
        }
        assert_eq!(v, want);
    }

    #[test]
    fn fuse_layout() {
        let cfg = small_cfg();
        let mut w = ModelWeights::init(&cfg, 3).unwrap().embed;
        let t = embed_text(&[1, 2], &w, &cfg).unwrap();
        let v = embed_image(&Matrix::zeros(16, 3), &w, &cfg).unwrap();
        let x = fuse(&t, &v, &w).unwrap();
        assert_eq!(x.rows(), 14);
        w.type_table.fill(0.0);
        let plain = fuse(&t, &v, &w).unwrap();
        assert_eq!(plain, Matrix::vstack(&[&t, &v]).unwrap());
        assert_eq!(plain.row(0), t.row(0));
        assert_eq!(plain.row(cfg.max_text_len + 1), v.row(0));
    }
}
