//! Uniform traversal over learnable tensors.

use crate::scalar::Scalar;

/// A bundle of named learnable tensors. Traversal order is fixed, so two
/// bundles of the same architecture flatten to aligned vectors.
pub trait ParamGroup<T: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[T]));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [T]));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, v| n += v.len());
        n
    }

    fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.param_count());
        self.visit("", &mut |_, v| out.extend_from_slice(v));
        out
    }

    /// Loads values produced by [`ParamGroup::flatten`].
    fn unflatten(&mut self, flat: &[T]) {
        let mut off = 0;
        self.visit_mut("", &mut |_, v| {
            let n = v.len();
            v.copy_from_slice(&flat[off..off + n]);
            off += n;
        });
        assert_eq!(off, flat.len(), "flat parameter vector has wrong length");
    }

    fn zero(&mut self) {
        self.visit_mut("", &mut |_, v| v.iter_mut().for_each(|x| *x = T::zero()));
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit("", &mut |_, v| ok &= v.iter().all(|x| x.is_finite()));
        ok
    }

    /// `(name, offset, len)` of every tensor in flattening order.
    fn layout(&self, prefix: &str) -> Vec<(String, usize, usize)> {
        let mut out = Vec::new();
        let mut off = 0;
        self.visit(prefix, &mut |name, v| {
            out.push((name.to_string(), off, v.len()));
            off += v.len();
        });
        out
    }
}

#[inline]
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Glorot-uniform initialisation drawn from `rng`.
pub fn glorot_uniform<T: Scalar>(
    rows: usize,
    cols: usize,
    rng: &mut crate::numerics::rng::RngStream,
) -> crate::numerics::matrix::Matrix<T> {
    let limit = (6.0 / (rows + cols).max(1) as f64).sqrt();
    crate::numerics::matrix::Matrix::from_fn(rows, cols, |_, _| {
        T::c(rng.uniform_range(-limit, limit))
    })
}
