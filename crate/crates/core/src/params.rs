//! Name-addressed traversal over parameter tensors.
//!
//! Every weight container exposes its tensors as `(name, shape, values)`
//! triples so that registries, checkpoints and gradient checks can treat the
//! model uniformly. Scalars are reported with shape `(1, 1)`.

use crate::numerics::Matrix;

pub type Visit<'a> = dyn FnMut(&str, (usize, usize), &[f64]) + 'a;
pub type VisitMut<'a> = dyn FnMut(&str, (usize, usize), &mut [f64]) + 'a;

pub(crate) fn visit_matrix(prefix: &str, name: &str, m: &Matrix, f: &mut Visit<'_>) {
    f(&join(prefix, name), m.shape(), m.data());
}

pub(crate) fn visit_matrix_mut(prefix: &str, name: &str, m: &mut Matrix, f: &mut VisitMut<'_>) {
    let shape = m.shape();
    f(&join(prefix, name), shape, m.data_mut());
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
