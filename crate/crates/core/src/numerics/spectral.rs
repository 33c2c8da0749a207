//! Power-iteration spectral norms and spectral clipping.

use crate::error::{CdlfError, Result};
use crate::numerics::matrix::{norm2, Matrix};
use crate::numerics::rng::RngStream;
use crate::scalar::Scalar;

pub const DEFAULT_POWER_ITERS: usize = 100;
pub const DEFAULT_POWER_TOL: f64 = 1e-9;

const START_SEED: u64 = 0x5EED_0F_5EC7;

/// Largest singular value by power iteration on `M^T M` from a fixed seeded
/// start vector. The estimate never exceeds the true value (up to rounding).
pub fn spectral_norm<T: Scalar>(m: &Matrix<T>, iters: usize, tol: f64) -> T {
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 || m.data().iter().all(|v| *v == T::zero()) {
        return T::zero();
    }
    let mut rng = RngStream::new(START_SEED);
    let mut v: Vec<T> = rng.gaussian_vec(cols);
    let n = norm2(&v);
    v.iter_mut().for_each(|x| *x /= n);

    let tol = T::c(tol);
    let mut sigma = T::zero();
    let mut mv = vec![T::zero(); rows];
    for _ in 0..iters.max(1) {
        m.matvec_into(&v, &mut mv);
        let next = norm2(&mv);
        if next == T::zero() {
            // start vector landed in the null space; try a different direction
            v = rng.gaussian_vec(cols);
            let n = norm2(&v);
            v.iter_mut().for_each(|x| *x /= n);
            continue;
        }
        let mut w = m.matvec_t(&mv);
        let wn = norm2(&w);
        if wn == T::zero() {
            sigma = next;
            break;
        }
        w.iter_mut().for_each(|x| *x /= wn);
        v = w;
        let converged = (next - sigma).abs() <= tol * next;
        sigma = next;
        if converged {
            break;
        }
    }
    m.matvec_into(&v, &mut mv);
    norm2(&mv).max(sigma)
}

pub fn spectral_norm_default<T: Scalar>(m: &Matrix<T>) -> T {
    spectral_norm(m, DEFAULT_POWER_ITERS, DEFAULT_POWER_TOL)
}

/// Rescales `m` so its spectral norm does not exceed `cap`.
pub fn spectral_clip<T: Scalar>(m: &Matrix<T>, cap: T) -> Result<Matrix<T>> {
    if !(cap > T::zero()) {
        return Err(CdlfError::InvalidArgument(format!("spectral cap must be positive, got {cap}")));
    }
    let s = spectral_norm_default(m);
    if s <= cap {
        Ok(m.clone())
    } else {
        Ok(m.scaled(cap / s))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_and_diagonal() {
        assert!((spectral_norm_default(&Matrix::<f64>::identity(3)) - 1.0).abs() < 1e-12);
        let d = Matrix::from_diag(&[3.0, 1.0]);
        assert!((spectral_norm_default::<f64>(&d) - 3.0).abs() < 1e-9);
        assert_eq!(spectral_norm_default(&Matrix::<f64>::zeros(2, 4)), 0.0);
    }

    #[test]
    fn clip_behaviour() {
        let small = Matrix::from_diag(&[0.5, 0.2]);
        assert_eq!(spectral_clip(&small, 1.0).unwrap(), small);
        let two = Matrix::<f64>::identity(2).scaled(2.0);
        let clipped = spectral_clip(&two, 1.0).unwrap();
        for (a, b) in clipped.data().iter().zip(Matrix::<f64>::identity(2).data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(spectral_clip(&two, 0.0).is_err());
        assert!(spectral_clip(&two, -1.0).is_err());
    }

    #[test]
    fn clip_hits_cap() {
        let mut rng = RngStream::new(3);
        let m = Matrix::<f64>::from_fn(4, 3, |_, _| rng.gaussian());
        assert!(spectral_norm_default(&m) > 0.7);
        let c = spectral_clip(&m, 0.7).unwrap();
        assert!((spectral_norm_default(&c) - 0.7).abs() < 1e-6);
    }

    #[test]
    fn rank_one_matrix() {
        // u v^T has norm |u||v|
        let mut m = Matrix::<f64>::zeros(3, 2);
        m.add_outer(1.0, &[1.0, 2.0, 2.0], &[3.0, 4.0]);
        assert!((spectral_norm_default(&m) - 15.0).abs() < 1e-9);
    }
}
