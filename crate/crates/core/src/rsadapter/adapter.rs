use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::AdapterVariant;
use crate::numerics::{gelu, gelu_backward, mm, mm_nt, mm_tn_acc, rng_normal, Matrix, Rng};
use crate::params::{join, visit_matrix, visit_matrix_mut, Visit, VisitMut};

/// Training-time adapter: two bias-carrying FC layers, each followed by a
/// learnable linear transformation, plus a scalar branch scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterWeights {
    /// `d x d'`
    pub w_down: Matrix,
    /// `1 x d'`
    pub b_down: Matrix,
    /// `d' x d'`
    pub phi_down_w: Matrix,
    /// `1 x d'`
    pub phi_down_b: Matrix,
    /// `d' x d`
    pub w_up: Matrix,
    /// `1 x d`
    pub b_up: Matrix,
    /// `d x d`
    pub phi_up_w: Matrix,
    /// `1 x d`
    pub phi_up_b: Matrix,
    pub scale: f64,
}

/// Inference-time adapter with the linear transformations folded into the
/// FC layers. A plain (transform-free) adapter has the same structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergedAdapter {
    pub w_down_rep: Matrix,
    pub b_down_rep: Matrix,
    pub w_up_rep: Matrix,
    pub b_up_rep: Matrix,
    pub scale: f64,
}

impl AdapterWeights {
    /// Standard initialization: `w_down ~ N(0, std²)`, zero up-projection,
    /// identity transforms with zero bias, unit scale.
    pub fn init(d: usize, d_prime: usize, rng: &Rng, prefix: &str, std: f64) -> Self {
        Self {
            w_down: rng_normal(&mut rng.fork(&join(prefix, "w_down")), d, d_prime, std),
            b_down: Matrix::zeros(1, d_prime),
            phi_down_w: Matrix::identity(d_prime),
            phi_down_b: Matrix::zeros(1, d_prime),
            w_up: Matrix::zeros(d_prime, d),
            b_up: Matrix::zeros(1, d),
            phi_up_w: Matrix::identity(d),
            phi_up_b: Matrix::zeros(1, d),
            scale: 1.0,
        }
    }

    /// Every field drawn from `N(0, std²)`, scale included. Used by tests and
    /// merge verification where the init state would be too easy.
    pub fn random(d: usize, d_prime: usize, rng: &mut Rng, std: f64) -> Self {
        Self {
            w_down: rng_normal(rng, d, d_prime, std),
            b_down: rng_normal(rng, 1, d_prime, std),
            phi_down_w: rng_normal(rng, d_prime, d_prime, std),
            phi_down_b: rng_normal(rng, 1, d_prime, std),
            w_up: rng_normal(rng, d_prime, d, std),
            b_up: rng_normal(rng, 1, d, std),
            phi_up_w: rng_normal(rng, d, d, std),
            phi_up_b: rng_normal(rng, 1, d, std),
            scale: 1.0 + std * rng.normal(),
        }
    }

    pub fn zeros(d: usize, d_prime: usize) -> Self {
        Self {
            w_down: Matrix::zeros(d, d_prime),
            b_down: Matrix::zeros(1, d_prime),
            phi_down_w: Matrix::zeros(d_prime, d_prime),
            phi_down_b: Matrix::zeros(1, d_prime),
            w_up: Matrix::zeros(d_prime, d),
            b_up: Matrix::zeros(1, d),
            phi_up_w: Matrix::zeros(d, d),
            phi_up_b: Matrix::zeros(1, d),
            scale: 0.0,
        }
    }

    pub fn d(&self) -> usize {
        self.w_down.rows()
    }

    pub fn d_prime(&self) -> usize {
        self.w_down.cols()
    }

    fn matrices(&self) -> [(&'static str, &Matrix); 8] {
        [
            ("w_down", &self.w_down),
            ("b_down", &self.b_down),
            ("phi_down_w", &self.phi_down_w),
            ("phi_down_b", &self.phi_down_b),
            ("w_up", &self.w_up),
            ("b_up", &self.b_up),
            ("phi_up_w", &self.phi_up_w),
            ("phi_up_b", &self.phi_up_b),
        ]
    }

    fn matrices_mut(&mut self) -> [(&'static str, &mut Matrix); 8] {
        [
            ("w_down", &mut self.w_down),
            ("b_down", &mut self.b_down),
            ("phi_down_w", &mut self.phi_down_w),
            ("phi_down_b", &mut self.phi_down_b),
            ("w_up", &mut self.w_up),
            ("b_up", &mut self.b_up),
            ("phi_up_w", &mut self.phi_up_w),
            ("phi_up_b", &mut self.phi_up_b),
        ]
    }
}

impl MergedAdapter {
    pub fn init_plain(d: usize, d_prime: usize, rng: &Rng, prefix: &str, std: f64) -> Self {
        Self {
            w_down_rep: rng_normal(&mut rng.fork(&join(prefix, "w_down")), d, d_prime, std),
            b_down_rep: Matrix::zeros(1, d_prime),
            w_up_rep: Matrix::zeros(d_prime, d),
            b_up_rep: Matrix::zeros(1, d),
            scale: 1.0,
        }
    }

    pub fn zeros(d: usize, d_prime: usize) -> Self {
        Self {
            w_down_rep: Matrix::zeros(d, d_prime),
            b_down_rep: Matrix::zeros(1, d_prime),
            w_up_rep: Matrix::zeros(d_prime, d),
            b_up_rep: Matrix::zeros(1, d),
            scale: 0.0,
        }
    }

    pub fn d(&self) -> usize {
        self.w_down_rep.rows()
    }

    pub fn d_prime(&self) -> usize {
        self.w_down_rep.cols()
    }

    /// Weight plus bias entries (the scale is not counted).
    pub fn param_count(&self) -> usize {
        self.w_down_rep.len() + self.b_down_rep.len() + self.w_up_rep.len() + self.b_up_rep.len()
    }
}

/// `x·w + b` with `b` broadcast over rows.
fn affine(x: &Matrix, w: &Matrix, b: &Matrix) -> Matrix {
    let mut out = mm(x, w);
    out.add_row_broadcast(b);
    out
}

fn check_input(x: &Matrix, d: usize, op: &'static str) -> Result<()> {
    if x.cols() != d {
        return Err(Error::Dimension {
            op,
            left: x.shape(),
            right: (d, 0),
        });
    }
    Ok(())
}

/// Adapter branch output (before the scale, which the caller applies).
///
/// `Plain` computes `f(x·W_down + b_down)·W_up + b_up`; `Rs` inserts the linear
/// transforms after each FC layer. With `skip`, `x` is added to the result.
pub fn adapter_forward(x: &Matrix, w: &AdapterWeights, variant: AdapterVariant, skip: bool) -> Result<Matrix> {
    check_input(x, w.d(), "adapter_forward")?;
    let mut out = match variant {
        AdapterVariant::Plain => {
            let act = gelu(&affine(x, &w.w_down, &w.b_down));
            affine(&act, &w.w_up, &w.b_up)
        }
        AdapterVariant::Rs => {
            let h = affine(&affine(x, &w.w_down, &w.b_down), &w.phi_down_w, &w.phi_down_b);
            let u = affine(&gelu(&h), &w.w_up, &w.b_up);
            affine(&u, &w.phi_up_w, &w.phi_up_b)
        }
    };
    if skip {
        out.add_assign(x);
    }
    Ok(out)
}

/// Folds `(x·W + b)·W' + b'` into `x·(W·W') + (b·W' + b')` for both branches.
pub fn merge(w: &AdapterWeights) -> MergedAdapter {
    MergedAdapter {
        w_down_rep: mm(&w.w_down, &w.phi_down_w),
        b_down_rep: affine(&w.b_down, &w.phi_down_w, &w.phi_down_b),
        w_up_rep: mm(&w.w_up, &w.phi_up_w),
        b_up_rep: affine(&w.b_up, &w.phi_up_w, &w.phi_up_b),
        scale: w.scale,
    }
}

/// Gradients with respect to the unfolded weights `w`, given gradients
/// `g` with respect to its folded form `merge(w)`.
///
/// The loss sees `w` only through `W·W' ` and `b·W' + b'`, so the chain
/// rule through [`merge`] is exact: `dW = dW_rep·W'ᵀ`, `db = db_rep·W'ᵀ`,
/// `dW' = Wᵀ·dW_rep + bᵀ·db_rep`, `db' = db_rep`. This lets training run
/// forward and backward passes on the cheaper folded adapter.
pub fn pull_back(w: &AdapterWeights, g: &MergedAdapter) -> AdapterWeights {
    let branch = |fc_w: &Matrix, fc_b: &Matrix, phi_w: &Matrix, dw_rep: &Matrix, db_rep: &Matrix| {
        let d_fc_w = mm_nt(dw_rep, phi_w);
        let d_fc_b = mm_nt(db_rep, phi_w);
        let mut d_phi_w = Matrix::zeros(phi_w.rows(), phi_w.cols());
        mm_tn_acc(&mut d_phi_w, fc_w, dw_rep);
        mm_tn_acc(&mut d_phi_w, fc_b, db_rep);
        (d_fc_w, d_fc_b, d_phi_w, db_rep.clone())
    };
    let (w_down, b_down, phi_down_w, phi_down_b) =
        branch(&w.w_down, &w.b_down, &w.phi_down_w, &g.w_down_rep, &g.b_down_rep);
    let (w_up, b_up, phi_up_w, phi_up_b) = branch(&w.w_up, &w.b_up, &w.phi_up_w, &g.w_up_rep, &g.b_up_rep);
    AdapterWeights {
        w_down,
        b_down,
        phi_down_w,
        phi_down_b,
        w_up,
        b_up,
        phi_up_w,
        phi_up_b,
        scale: g.scale,
    }
}

/// Two affine maps and one activation; no transform layers remain.
pub fn merged_forward(x: &Matrix, m: &MergedAdapter) -> Result<Matrix> {
    check_input(x, m.d(), "merged_forward")?;
    let act = gelu(&affine(x, &m.w_down_rep, &m.b_down_rep));
    Ok(affine(&act, &m.w_up_rep, &m.b_up_rep))
}

/// An adapter as it sits inside a transformer block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum AdapterSlot {
    Rs(AdapterWeights),
    /// A transform-free bottleneck trained directly.
    Plain(MergedAdapter),
    /// An `Rs` adapter after folding.
    Merged(MergedAdapter),
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct AdapterCache {
    input: Matrix,
    /// FC output before the down transform (`Rs` only).
    down_fc: Option<Matrix>,
    pre_act: Matrix,
    act: Matrix,
    /// FC output before the up transform (`Rs` only).
    up_fc: Option<Matrix>,
    /// Unscaled branch output, skip included.
    pub(crate) out: Matrix,
}

impl AdapterSlot {
    pub fn scale(&self) -> f64 {
        match self {
            AdapterSlot::Rs(w) => w.scale,
            AdapterSlot::Plain(m) | AdapterSlot::Merged(m) => m.scale,
        }
    }

    pub fn scale_mut(&mut self) -> &mut f64 {
        match self {
            AdapterSlot::Rs(w) => &mut w.scale,
            AdapterSlot::Plain(m) | AdapterSlot::Merged(m) => &mut m.scale,
        }
    }

    pub fn zeros_like(&self) -> AdapterSlot {
        match self {
            AdapterSlot::Rs(w) => AdapterSlot::Rs(AdapterWeights::zeros(w.d(), w.d_prime())),
            AdapterSlot::Plain(m) => AdapterSlot::Plain(MergedAdapter::zeros(m.d(), m.d_prime())),
            AdapterSlot::Merged(m) => AdapterSlot::Merged(MergedAdapter::zeros(m.d(), m.d_prime())),
        }
    }

    /// Folded copy; plain and already-merged slots are returned unchanged.
    pub fn merged(&self) -> AdapterSlot {
        match self {
            AdapterSlot::Rs(w) => AdapterSlot::Merged(merge(w)),
            other => other.clone(),
        }
    }

    /// Unscaled branch output, without caching.
    pub fn forward(&self, x: &Matrix, skip: bool) -> Result<Matrix> {
        match self {
            AdapterSlot::Rs(w) => adapter_forward(x, w, AdapterVariant::Rs, skip),
            AdapterSlot::Plain(m) | AdapterSlot::Merged(m) => {
                let mut out = merged_forward(x, m)?;
                if skip {
                    out.add_assign(x);
                }
                Ok(out)
            }
        }
    }

    pub(crate) fn forward_cached(&self, x: &Matrix, skip: bool) -> AdapterCache {
        let (down_fc, pre_act, act, up_fc, mut out) = match self {
            AdapterSlot::Rs(w) => {
                let down_fc = affine(x, &w.w_down, &w.b_down);
                let pre_act = affine(&down_fc, &w.phi_down_w, &w.phi_down_b);
                let act = gelu(&pre_act);
                let up_fc = affine(&act, &w.w_up, &w.b_up);
                let out = affine(&up_fc, &w.phi_up_w, &w.phi_up_b);
                (Some(down_fc), pre_act, act, Some(up_fc), out)
            }
            AdapterSlot::Plain(m) | AdapterSlot::Merged(m) => {
                let pre_act = affine(x, &m.w_down_rep, &m.b_down_rep);
                let act = gelu(&pre_act);
                let out = affine(&act, &m.w_up_rep, &m.b_up_rep);
                (None, pre_act, act, None, out)
            }
        };
        if skip {
            out.add_assign(x);
        }
        AdapterCache {
            input: x.clone(),
            down_fc,
            pre_act,
            act,
            up_fc,
            out,
        }
    }

    /// Backward from the gradient of the unscaled branch output. Weight
    /// gradients are accumulated into `grads` when given; returns `d input`.
    pub(crate) fn backward(
        &self,
        d_out: &Matrix,
        cache: &AdapterCache,
        skip: bool,
        grads: Option<&mut AdapterSlot>,
    ) -> Matrix {
        let mut dx = match (self, grads) {
            (AdapterSlot::Rs(w), g) => {
                let mut g = g.map(|g| match g {
                    AdapterSlot::Rs(g) => g,
                    _ => panic!("gradient slot kind mismatch"),
                });
                let down_fc = cache.down_fc.as_ref().expect("rs cache");
                let up_fc = cache.up_fc.as_ref().expect("rs cache");
                if let Some(g) = g.as_deref_mut() {
                    mm_tn_acc(&mut g.phi_up_w, up_fc, d_out);
                    g.phi_up_b.add_assign(&d_out.column_sums());
                }
                let d_up_fc = mm_nt(d_out, &w.phi_up_w);
                if let Some(g) = g.as_deref_mut() {
                    mm_tn_acc(&mut g.w_up, &cache.act, &d_up_fc);
                    g.b_up.add_assign(&d_up_fc.column_sums());
                }
                let d_act = mm_nt(&d_up_fc, &w.w_up);
                let d_pre = gelu_backward(&cache.pre_act, &d_act);
                if let Some(g) = g.as_deref_mut() {
                    mm_tn_acc(&mut g.phi_down_w, down_fc, &d_pre);
                    g.phi_down_b.add_assign(&d_pre.column_sums());
                }
                let d_down_fc = mm_nt(&d_pre, &w.phi_down_w);
                if let Some(g) = g {
                    mm_tn_acc(&mut g.w_down, &cache.input, &d_down_fc);
                    g.b_down.add_assign(&d_down_fc.column_sums());
                }
                mm_nt(&d_down_fc, &w.w_down)
            }
            (AdapterSlot::Plain(m) | AdapterSlot::Merged(m), g) => {
                let mut g = g.map(|g| match g {
                    AdapterSlot::Plain(g) | AdapterSlot::Merged(g) => g,
                    _ => panic!("gradient slot kind mismatch"),
                });
                if let Some(g) = g.as_deref_mut() {
                    mm_tn_acc(&mut g.w_up_rep, &cache.act, d_out);
                    g.b_up_rep.add_assign(&d_out.column_sums());
                }
                let d_act = mm_nt(d_out, &m.w_up_rep);
                let d_pre = gelu_backward(&cache.pre_act, &d_act);
                if let Some(g) = g {
                    mm_tn_acc(&mut g.w_down_rep, &cache.input, &d_pre);
                    g.b_down_rep.add_assign(&d_pre.column_sums());
                }
                mm_nt(&d_pre, &m.w_down_rep)
            }
        };
        if skip {
            dx.add_assign(d_out);
        }
        dx
    }

    /// Tensor names within a slot, in visiting order.
    pub fn tensor_names(&self, with_scale: bool) -> Vec<&'static str> {
        let mut names: Vec<&'static str> = match self {
            AdapterSlot::Rs(w) => w.matrices().iter().map(|(n, _)| *n).collect(),
            AdapterSlot::Plain(_) => vec!["w_down", "b_down", "w_up", "b_up"],
            AdapterSlot::Merged(_) => vec!["w_down_rep", "b_down_rep", "w_up_rep", "b_up_rep"],
        };
        if with_scale {
            names.push("scale");
        }
        names
    }

    pub fn visit(&self, prefix: &str, with_scale: bool, f: &mut Visit<'_>) {
        match self {
            AdapterSlot::Rs(w) => {
                for (name, m) in w.matrices() {
                    visit_matrix(prefix, name, m, f);
                }
            }
            AdapterSlot::Plain(m) | AdapterSlot::Merged(m) => {
                let names = self.tensor_names(false);
                for (name, t) in names
                    .into_iter()
                    .zip([&m.w_down_rep, &m.b_down_rep, &m.w_up_rep, &m.b_up_rep])
                {
                    visit_matrix(prefix, name, t, f);
                }
            }
        }
        if with_scale {
            f(&join(prefix, "scale"), (1, 1), std::slice::from_ref(&self.scale()));
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, with_scale: bool, f: &mut VisitMut<'_>) {
        let names = self.tensor_names(false);
        match self {
            AdapterSlot::Rs(w) => {
                for (name, m) in w.matrices_mut() {
                    visit_matrix_mut(prefix, name, m, f);
                }
            }
            AdapterSlot::Plain(m) | AdapterSlot::Merged(m) => {
                let tensors = [&mut m.w_down_rep, &mut m.b_down_rep, &mut m.w_up_rep, &mut m.b_up_rep];
                for (name, t) in names.into_iter().zip(tensors) {
                    visit_matrix_mut(prefix, name, t, f);
                }
            }
        }
        if with_scale {
            f(&join(prefix, "scale"), (1, 1), std::slice::from_mut(self.scale_mut()));
        }
    }
}
