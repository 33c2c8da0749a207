//! Conditional denoising diffusion: schedule, forward noising, posterior and
//! reverse means, ancestral sampling and autoregressive rollouts.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CdlfError, Result};
use crate::numerics::conv::CausalConvNet;
use crate::numerics::matrix::Matrix;
use crate::numerics::rng::RngStream;
use crate::scalar::Scalar;

/// Tables for an `N`-step chain. Index 0 holds the `n = 0` convention
/// (`alpha_bar = 1`); indices `1..=N` are the diffusion steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct NoiseSchedule<T> {
    pub betas: Vec<T>,
    pub alphas: Vec<T>,
    pub alpha_bars: Vec<T>,
    pub sigma2: Vec<T>,
}

impl<T: Scalar> NoiseSchedule<T> {
    /// Linear `beta` from `beta_start` to `beta_end` over `n` steps.
    pub fn linear(n: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if n == 0 {
            return Err(CdlfError::InvalidArgument("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(CdlfError::InvalidArgument(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let betas = (0..n)
            .map(|i| {
                let f = if n == 1 { 0.0 } else { i as f64 / (n - 1) as f64 };
                beta_start + (beta_end - beta_start) * f
            })
            .collect::<Vec<_>>();
        Self::from_betas(&betas)
    }

    pub fn from_betas(betas: &[f64]) -> Result<Self> {
        if betas.is_empty() {
            return Err(CdlfError::InvalidArgument("schedule needs at least one step".into()));
        }
        if betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(CdlfError::InvalidArgument("every beta must lie in (0, 1)".into()));
        }
        let n = betas.len();
        let mut b = vec![T::zero(); n + 1];
        let mut a = vec![T::one(); n + 1];
        let mut ab = vec![T::one(); n + 1];
        let mut s2 = vec![T::zero(); n + 1];
        let mut prod = 1.0f64;
        for i in 1..=n {
            let beta = betas[i - 1];
            let prev = prod;
            prod *= 1.0 - beta;
            b[i] = T::c(beta);
            a[i] = T::c(1.0 - beta);
            ab[i] = T::c(prod);
            s2[i] = T::c((1.0 - prev) / (1.0 - prod) * beta);
        }
        Ok(Self {
            betas: b,
            alphas: a,
            alpha_bars: ab,
            sigma2: s2,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len() - 1
    }

    fn check(&self, n: usize) -> Result<()> {
        if n == 0 || n > self.steps() {
            return Err(CdlfError::StepOutOfRange { n, max: self.steps() });
        }
        Ok(())
    }
}

pub fn build_schedule<T: Scalar>(n: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule<T>> {
    NoiseSchedule::linear(n, beta_start, beta_end)
}

/// `x^n = sqrt(abar_n) x0 + sqrt(1 - abar_n) eps`; `n = 0` returns `x0`.
pub fn forward_noise<T: Scalar>(x0: &[T], n: usize, eps: &[T], s: &NoiseSchedule<T>) -> Result<Vec<T>> {
    if n > s.steps() {
        return Err(CdlfError::StepOutOfRange { n, max: s.steps() });
    }
    let ab = s.alpha_bars[n];
    let (a, b) = (ab.sqrt(), (T::one() - ab).sqrt());
    Ok(x0.iter().zip(eps).map(|(&x, &e)| a * x + b * e).collect())
}

/// Mean and variance of `q(x^{n-1} | x^n, x0)`.
pub fn posterior_params<T: Scalar>(xn: &[T], x0: &[T], n: usize, s: &NoiseSchedule<T>) -> Result<(Vec<T>, T)> {
    s.check(n)?;
    let one = T::one();
    let ab = s.alpha_bars[n];
    let ab_prev = s.alpha_bars[n - 1];
    let c0 = ab_prev.sqrt() * s.betas[n] / (one - ab);
    let cn = s.alphas[n].sqrt() * (one - ab_prev) / (one - ab);
    let mu = x0.iter().zip(xn).map(|(&a, &b)| c0 * a + cn * b).collect();
    Ok((mu, s.sigma2[n]))
}

/// `(x^n - beta_n / sqrt(1 - abar_n) eps_hat) / sqrt(alpha_n)`
pub fn reverse_mean<T: Scalar>(xn: &[T], eps_hat: &[T], n: usize, s: &NoiseSchedule<T>) -> Result<Vec<T>> {
    s.check(n)?;
    let k = s.betas[n] / (T::one() - s.alpha_bars[n]).sqrt();
    let inv = T::one() / s.alphas[n].sqrt();
    Ok(xn.iter().zip(eps_hat).map(|(&x, &e)| inv * (x - k * e)).collect())
}

/// Sinusoidal features of the diffusion step: `sin(n w_i)` then `cos(n w_i)`
/// with `w_i = 10000^(-i / half)`.
pub fn step_embedding<T: Scalar>(n: usize, width: usize) -> Vec<T> {
    let half = width / 2;
    let mut e = vec![T::zero(); width];
    for i in 0..half {
        let w = (-(10000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        e[i] = T::c((n as f64 * w).sin());
        e[half + i] = T::c((n as f64 * w).cos());
    }
    e
}

/// Builds the `W x D` window for position `t`: the most recent clean rows
/// of `past` followed by `current`, left-padded with zeros.
pub fn assemble_window<T: Scalar>(past: &[&[T]], current: &[T], width: usize) -> Matrix<T> {
    let d = current.len();
    let mut win = Matrix::zeros(width, d);
    let keep = past.len().min(width - 1);
    let start = width - 1 - keep;
    for (i, row) in past[past.len() - keep..].iter().enumerate() {
        win.data_mut()[(start + i) * d..(start + i + 1) * d].copy_from_slice(row);
    }
    win.data_mut()[(width - 1) * d..].copy_from_slice(current);
    win
}

pub fn score_predict<T: Scalar>(
    window: &Matrix<T>,
    h_prev: &[T],
    n: usize,
    net: &CausalConvNet<T>,
    embed_dim: usize,
) -> Result<Vec<T>> {
    net.forward(window, h_prev, &step_embedding(n, embed_dim))
}

/// Score network, schedule and sampling constants needed to draw values.
#[derive(Clone, Copy, Debug)]
pub struct Sampler<'a, T: Scalar> {
    pub net: &'a CausalConvNet<T>,
    pub schedule: &'a NoiseSchedule<T>,
    pub window: usize,
    pub embed_dim: usize,
    pub clip: T,
}

impl<'a, T: Scalar> Sampler<'a, T> {
    /// Ancestral sampling of the value at the next position given the clean
    /// history `past` and latent state `h_prev`.
    pub fn sample_next(&self, past: &[&[T]], h_prev: &[T], rng: &mut RngStream) -> Result<Vec<T>> {
        let d = self.net.data_dim();
        let mut x: Vec<T> = rng.gaussian_vec(d);
        for n in (1..=self.schedule.steps()).rev() {
            let win = assemble_window(past, &x, self.window);
            let eps = score_predict(&win, h_prev, n, self.net, self.embed_dim)?;
            let mut next = reverse_mean(&x, &eps, n, self.schedule)?;
            if n > 1 {
                let sd = self.schedule.sigma2[n].sqrt();
                for v in next.iter_mut() {
                    *v += sd * rng.gaussian::<T>();
                }
            }
            x = next;
        }
        for v in x.iter_mut() {
            *v = v.max(-self.clip).min(self.clip);
            if !v.is_finite() {
                return Err(CdlfError::NonFinite("sampled value"));
            }
        }
        Ok(x)
    }
}

/// `M` sampled continuations from origin `t0` (1-based time index of the
/// first forecast position).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ForecastDistribution<T> {
    pub origin: usize,
    pub horizon: usize,
    pub dim: usize,
    /// One `horizon x dim` path per rollout.
    pub samples: Vec<Matrix<T>>,
}

impl<T: Scalar> ForecastDistribution<T> {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Values of coordinate `k` at horizon step `h` across rollouts.
    pub fn marginal(&self, h: usize, k: usize) -> Vec<T> {
        self.samples.iter().map(|s| s[(h, k)]).collect()
    }
}

/// Events emitted by a rollout, in call order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RolloutEvent {
    Transition,
    Sample,
}

/// Recursion used by [`rollout`]: one latent update per observed or
/// generated value.
pub trait LatentRecursion<T: Scalar>: Sync {
    fn step(&self, h_prev: &[T], x: &[T]) -> Vec<T>;
}

/// Draws `m` independent paths of length `horizon`. The prefix supplies
/// the `t0 - 1` observed rows; rollout `i` uses `rng.substream(i)`.
#[allow(clippy::too_many_arguments)]
pub fn rollout<T: Scalar, F: LatentRecursion<T>>(
    sampler: &Sampler<'_, T>,
    recursion: &F,
    h0: &[T],
    prefix: &Matrix<T>,
    horizon: usize,
    m: usize,
    rng: &RngStream,
) -> Result<ForecastDistribution<T>> {
    let paths: Result<Vec<Matrix<T>>> = (0..m)
        .into_par_iter()
        .map(|i| {
            let mut sub = rng.substream(i as u64);
            rollout_one(sampler, recursion, h0, prefix, horizon, &mut sub, &mut |_| {})
        })
        .collect();
    Ok(ForecastDistribution {
        origin: prefix.rows() + 1,
        horizon,
        dim: sampler.net.data_dim(),
        samples: paths?,
    })
}

/// One path, reporting each transition and sample to `trace`.
pub fn rollout_one<T: Scalar, F: LatentRecursion<T>>(
    sampler: &Sampler<'_, T>,
    recursion: &F,
    h0: &[T],
    prefix: &Matrix<T>,
    horizon: usize,
    rng: &mut RngStream,
    trace: &mut dyn FnMut(RolloutEvent),
) -> Result<Matrix<T>> {
    let d = sampler.net.data_dim();
    if prefix.rows() > 0 && prefix.cols() != d {
        return Err(crate::error::dim_err("rollout prefix", d, prefix.cols()));
    }
    let mut h = h0.to_vec();
    let mut history: Vec<Vec<T>> = Vec::with_capacity(prefix.rows() + horizon);
    for t in 0..prefix.rows() {
        h = recursion.step(&h, prefix.row(t));
        trace(RolloutEvent::Transition);
        history.push(prefix.row(t).to_vec());
    }
    let mut out = Matrix::zeros(horizon, d);
    for k in 0..horizon {
        let past: Vec<&[T]> = history.iter().map(|v| v.as_slice()).collect();
        let x = sampler.sample_next(&past, &h, rng)?;
        trace(RolloutEvent::Sample);
        out.data_mut()[k * d..(k + 1) * d].copy_from_slice(&x);
        if k + 1 < horizon {
            h = recursion.step(&h, &x);
            trace(RolloutEvent::Transition);
        }
        history.push(x);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_tables() {
        let s = NoiseSchedule::<f64>::linear(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bars[1], 0.5);
        assert_eq!(s.sigma2[1], 0.0);
        let s = NoiseSchedule::<f64>::from_betas(&[0.1, 0.2, 0.3]).unwrap();
        for (got, want) in s.alpha_bars[1..].iter().zip([0.9, 0.72, 0.504]) {
            assert!((got - want).abs() < 1e-15);
        }
        let s = build_schedule::<f64>(50, 1e-4, 0.1).unwrap();
        assert_eq!(s.steps(), 50);
        assert!((s.betas[50] - 0.1).abs() < 1e-15 && (s.betas[1] - 1e-4).abs() < 1e-18);
        assert!(s.alpha_bars.windows(2).all(|w| w[1] < w[0]));
        assert!(s.sigma2.iter().all(|&v| v >= 0.0));
        assert!(build_schedule::<f64>(0, 0.1, 0.2).is_err());
        assert!(build_schedule::<f64>(5, 0.3, 0.2).is_err());
        assert!(build_schedule::<f64>(5, 0.0, 0.2).is_err());
        assert!(build_schedule::<f64>(5, 0.1, 1.0).is_err());
    }

    #[test]
    fn forward_noise_cases() {
        let s = NoiseSchedule::<f64>::from_betas(&[0.75]).unwrap();
        let got = forward_noise(&[2.0], 1, &[-1.0], &s).unwrap()[0];
        assert!((got - (1.0 - 0.75f64.sqrt())).abs() < 1e-15);
        assert!((got - 0.1340).abs() < 1e-4);
        assert_eq!(forward_noise(&[2.0], 0, &[-1.0], &s).unwrap(), vec![2.0]);
        let z = forward_noise(&[0.0], 1, &[3.0], &s).unwrap()[0];
        assert!((z - 0.75f64.sqrt() * 3.0).abs() < 1e-15);
        assert!(forward_noise(&[0.0], 2, &[0.0], &s).is_err());
    }

    #[test]
    fn posterior_cases() {
        let s = NoiseSchedule::<f64>::from_betas(&[0.1, 0.2]).unwrap();
        let (mu, v) = posterior_params(&[5.0], &[1.3], 1, &s).unwrap();
        assert!((mu[0] - 1.3).abs() < 1e-14);
        assert_eq!(v, 0.0);
        assert_eq!(posterior_params(&[0.0], &[0.0], 2, &s).unwrap().0, vec![0.0]);
        // abar = (0.9, 0.72): c0 = sqrt(0.9) 0.2 / 0.28, cn = sqrt(0.8) 0.1 / 0.28
        let (mu, v) = posterior_params(&[2.0], &[1.0], 2, &s).unwrap();
        let want = 0.9f64.sqrt() * 0.2 / 0.28 + 0.8f64.sqrt() * 0.1 / 0.28 * 2.0;
        assert!((mu[0] - want).abs() < 1e-14);
        assert!((v - 0.1 / 0.28 * 0.2).abs() < 1e-15);
        assert!(posterior_params(&[0.0], &[0.0], 0, &s).is_err());
        assert!(posterior_params(&[0.0], &[0.0], 3, &s).is_err());
    }

    #[test]
    fn reverse_mean_cases() {
        let s = NoiseSchedule::<f64>::from_betas(&[0.19]).unwrap();
        let r = reverse_mean(&[1.8], &[0.0], 1, &s).unwrap()[0];
        assert!((r - 1.8 / 0.9).abs() < 1e-14);
        let tiny = NoiseSchedule::<f64>::from_betas(&[1e-12]).unwrap();
        assert!((reverse_mean(&[1.8], &[0.4], 1, &tiny).unwrap()[0] - 1.8).abs() < 1e-6);
        assert!(reverse_mean(&[1.8], &[0.0], 2, &s).is_err());
    }

    #[test]
    fn reverse_mean_with_true_noise_is_posterior_mean() {
        let s = build_schedule::<f64>(50, 1e-4, 0.1).unwrap();
        let mut rng = RngStream::new(77);
        for _ in 0..200 {
            let n = rng.int_inclusive(1, 50);
            let x0: Vec<f64> = rng.gaussian_vec(2);
            let e: Vec<f64> = rng.gaussian_vec(2);
            let xn = forward_noise(&x0, n, &e, &s).unwrap();
            let a = reverse_mean(&xn, &e, n, &s).unwrap();
            let b = posterior_params(&xn, &x0, n, &s).unwrap().0;
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn embedding_is_bounded_and_distinct() {
        let a: Vec<f64> = step_embedding(3, 32);
        let b: Vec<f64> = step_embedding(4, 32);
        assert_eq!(a.len(), 32);
        assert!(a.iter().all(|v| v.abs() <= 1.0));
        assert_ne!(a, b);
        assert_eq!(a[0], 3f64.sin());
        assert_eq!(a[16], 3f64.cos());
    }

    #[test]
    fn window_assembly_pads_and_truncates() {
        let p1 = [1.0];
        let p2 = [2.0];
        let w = assemble_window::<f64>(&[&p1, &p2], &[9.0], 4);
        assert_eq!(w.data(), &[0.0, 1.0, 2.0, 9.0]);
        let w = assemble_window::<f64>(&[&p1, &p2], &[9.0], 2);
        assert_eq!(w.data(), &[2.0, 9.0]);
        let w = assemble_window::<f64>(&[], &[9.0], 3);
        assert_eq!(w.data(), &[0.0, 0.0, 9.0]);
    }

    struct Identity;
    impl LatentRecursion<f64> for Identity {
        fn step(&self, h: &[f64], _x: &[f64]) -> Vec<f64> {
            h.to_vec()
        }
    }

    #[test]
    fn zero_network_one_step_moments() {
        let net = CausalConvNet::<f64>::zeros(1, 2, 1, 2, 2 + 4);
        let s = NoiseSchedule::from_betas(&[0.36]).unwrap();
        let sampler = Sampler { net: &net, schedule: &s, window: 2, embed_dim: 4, clip: 1e9 };
        let mut rng = RngStream::new(3);
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| sampler.sample_next(&[], &[0.0, 0.0], &mut rng).unwrap()[0]).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let want_var = 1.0 / 0.64;
        let se_mean = (want_var / n as f64).sqrt();
        let se_var = want_var * (2.0 / (n - 1) as f64).sqrt();
        assert!(mean.abs() < 3.0 * se_mean, "mean {mean}");
        assert!((var - want_var).abs() < 3.0 * se_var, "var {var}");
    }

    #[test]
    fn samples_are_clipped() {
        let mut net = CausalConvNet::<f64>::zeros(1, 2, 1, 2, 2 + 4);
        net.head_b[0] = -40.0;
        let s = build_schedule(10, 1e-4, 0.1).unwrap();
        let sampler = Sampler { net: &net, schedule: &s, window: 2, embed_dim: 4, clip: 5.0 };
        let mut rng = RngStream::new(1);
        for _ in 0..50 {
            let x = sampler.sample_next(&[], &[0.0, 0.0], &mut rng).unwrap();
            assert!(x[0].abs() <= 5.0);
        }
    }

    #[test]
    fn rollout_trace_and_determinism() {
        let mut rng0 = RngStream::new(2);
        let net = CausalConvNet::<f64>::random(1, 3, 1, 2, 1 + 4, &mut rng0);
        let s = build_schedule(5, 1e-4, 0.1).unwrap();
        let sampler = Sampler { net: &net, schedule: &s, window: 3, embed_dim: 4, clip: 5.0 };
        let prefix = Matrix::from_fn(5, 1, |i, _| i as f64 * 0.1);
        let mut ev = Vec::new();
        let mut sub = RngStream::new(9);
        rollout_one(&sampler, &Identity, &[0.0], &prefix, 3, &mut sub, &mut |e| ev.push(e)).unwrap();
        let first = ev.iter().position(|e| *e == RolloutEvent::Sample).unwrap();
        assert_eq!(first, 5);
        assert!(ev[..5].iter().all(|e| *e == RolloutEvent::Transition));

        let rng = RngStream::new(11);
        let a = rollout(&sampler, &Identity, &[0.0], &prefix, 4, 3, &rng).unwrap();
        let b = rollout(&sampler, &Identity, &[0.0], &prefix, 4, 3, &rng).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.origin, 6);
        let p0 = rollout_one(&sampler, &Identity, &[0.0], &prefix, 4, &mut rng.substream(0), &mut |_| {}).unwrap();
        let p0b = rollout_one(&sampler, &Identity, &[0.0], &prefix, 4, &mut rng.substream(0), &mut |_| {}).unwrap();
        assert_eq!(p0, p0b);
        assert_eq!(a.samples[0], p0);
        let empty = rollout(&sampler, &Identity, &[0.0], &prefix, 0, 2, &rng).unwrap();
        assert_eq!(empty.horizon, 0);
        assert!(empty.samples.iter().all(|p| p.rows() == 0));
    }
}
