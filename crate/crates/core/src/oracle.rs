//! Linear-Gaussian oracle for the multi-step error recursion.
//!
//! True and learned systems share the emission `x_t ~ N(C h_{t-1}, I)` and
//! transition `h_t = rho R h_{t-1} + L_x B x_t`; the learned one adds a mean
//! bias `b_mis` to every emission and a drift `d_f` to every transition.
//! With a shared covariance the one-step Wasserstein-1 error is
//! `|C (h_hat - h*) + b_mis|`, evaluated exactly per rollout.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CdlfError, Result};
use crate::numerics::matrix::{dot, norm2, Matrix};
use crate::numerics::rng::RngStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Geometry {
    /// `R = I`, `B = Q_D`, `C = L_P Q_D^T`, bias along the first output axis.
    Aligned,
    /// Independent orthonormal factors and random unit bias directions.
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coupling {
    /// Both systems consume the same Gaussian draw each step.
    Common,
    /// Independent draws for the true and learned emissions.
    Independent,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleParams {
    pub rho: f64,
    pub lx: f64,
    pub lp: f64,
    pub eps_gen: f64,
    pub eps_f: f64,
    pub latent_dim: usize,
    pub obs_dim: usize,
    pub geometry: Geometry,
    pub seed: u64,
}

impl Default for OracleParams {
    fn default() -> Self {
        Self {
            rho: 0.5,
            lx: 0.4,
            lp: 1.0,
            eps_gen: 0.1,
            eps_f: 0.0,
            latent_dim: 2,
            obs_dim: 1,
            geometry: Geometry::Aligned,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleSystem {
    pub params: OracleParams,
    /// `m x m` orthonormal
    pub r: Matrix<f64>,
    /// `m x D` with orthonormal columns
    pub b: Matrix<f64>,
    /// `D x m`, spectral norm `L_P`
    pub c: Matrix<f64>,
    pub b_mis: Vec<f64>,
    pub d_f: Vec<f64>,
    /// Unit direction of the initial latent error.
    pub e0_dir: Vec<f64>,
    /// Unit direction of injected pulses.
    pub pulse_dir: Vec<f64>,
}

impl OracleSystem {
    pub fn kappa(&self) -> f64 {
        let p = &self.params;
        p.lp * p.lx / (1.0 - p.rho)
    }

    /// `(eps_gen + L_P eps_f / (1 - rho) + L_P E0) / (1 - kappa)`, or `None`
    /// outside the stable regime.
    pub fn error_bound(&self, e0: f64) -> Option<f64> {
        let p = &self.params;
        let k = self.kappa();
        if p.rho >= 1.0 || k >= 1.0 {
            return None;
        }
        Some((p.eps_gen + p.lp * p.eps_f / (1.0 - p.rho) + p.lp * e0) / (1.0 - k))
    }
}

/// Orthonormal `n x n` factor of a seeded Gaussian matrix (modified
/// Gram-Schmidt with one re-orthogonalisation pass). Columns are returned.
fn orthonormal_columns(n: usize, rng: &mut RngStream) -> Vec<Vec<f64>> {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    while cols.len() < n {
        let mut v: Vec<f64> = rng.gaussian_vec(n);
        for _ in 0..2 {
            for q in &cols {
                let p = dot(&v, q);
                for (a, b) in v.iter_mut().zip(q) {
                    *a -= p * b;
                }
            }
        }
        let nv = norm2(&v);
        if nv > 1e-8 {
            v.iter_mut().for_each(|a| *a /= nv);
            cols.push(v);
        }
    }
    cols
}

fn from_columns(cols: &[Vec<f64>], rows: usize) -> Matrix<f64> {
    Matrix::from_fn(rows, cols.len(), |i, j| cols[j][i])
}

fn unit(rng: &mut RngStream, n: usize) -> Vec<f64> {
    orthonormal_columns(n, rng).swap_remove(0)
}

pub fn build_oracle(p: OracleParams) -> Result<OracleSystem> {
    let (m, d) = (p.latent_dim, p.obs_dim);
    if m == 0 || d == 0 {
        return Err(CdlfError::InvalidArgument("oracle dimensions must be positive".into()));
    }
    if d > m {
        return Err(CdlfError::InvalidArgument(format!(
            "observation dim {d} exceeds latent dim {m}; B needs orthonormal columns"
        )));
    }
    if !(p.rho >= 0.0 && p.lx >= 0.0 && p.lp >= 0.0 && p.eps_gen >= 0.0 && p.eps_f >= 0.0) {
        return Err(CdlfError::InvalidArgument("oracle constants must be non-negative".into()));
    }
    let mut rng = RngStream::with_stream(p.seed, 0x0AC1E);
    let q = orthonormal_columns(m, &mut rng);
    let (r, b, c, bias_dir, drift_dir, e0_dir, pulse_dir) = match p.geometry {
        Geometry::Aligned => {
            let qd = from_columns(&q[..d], m);
            let mut e1 = vec![0.0; d];
            e1[0] = 1.0;
            let pulse = if m > d { q[d].clone() } else { q[0].clone() };
            (Matrix::identity(m), qd.clone(), qd.transpose().scaled(p.lp), e1, q[0].clone(), q[0].clone(), pulse)
        }
        Geometry::Random => {
            let r = from_columns(&q, m);
            let qb = orthonormal_columns(m, &mut rng);
            let qc = orthonormal_columns(m, &mut rng);
            let b = from_columns(&qb[..d], m);
            let c = from_columns(&qc[..d], m).transpose().scaled(p.lp);
            let bias = unit(&mut rng, d);
            let drift = unit(&mut rng, m);
            let e0 = unit(&mut rng, m);
            let pulse = unit(&mut rng, m);
            (r, b, c, bias, drift, e0, pulse)
        }
    };
    Ok(OracleSystem {
        params: p,
        r,
        b,
        c,
        b_mis: bias_dir.iter().map(|v| v * p.eps_gen).collect(),
        d_f: drift_dir.iter().map(|v| v * p.eps_f).collect(),
        e0_dir,
        pulse_dir,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pulse {
    /// 1-based time at which the pulse is added to the learned state.
    pub t: usize,
    pub magnitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutStats {
    pub rollouts: usize,
    pub pulse: Option<Pulse>,
    /// Mean latent error `|h_hat_t - h*_t|`, `t = 1..=T`.
    pub e_hat: Vec<f64>,
    pub e_se: Vec<f64>,
    /// Mean closed-form one-step `W1` at `t`, from the states at `t - 1`.
    pub delta_hat: Vec<f64>,
    pub delta_se: Vec<f64>,
    /// Mean `|x_hat_t - x_t|` under the chosen coupling.
    pub gap_hat: Vec<f64>,
}

impl RolloutStats {
    pub fn horizon(&self) -> usize {
        self.e_hat.len()
    }

    /// Mean of `delta_hat` over the final fifth of the horizon.
    pub fn plateau(&self) -> f64 {
        let t = self.horizon();
        let k = (t / 5).max(1);
        self.delta_hat[t - k..].iter().sum::<f64>() / k as f64
    }
}

struct Path {
    e: Vec<f64>,
    delta: Vec<f64>,
    gap: Vec<f64>,
}

fn one_path(sys: &OracleSystem, horizon: usize, e0: f64, pulse: Option<Pulse>, coupling: Coupling, rng: &mut RngStream) -> Path {
    let p = &sys.params;
    let m = p.latent_dim;
    let d = p.obs_dim;
    let mut h = vec![0.0; m];
    let mut hh: Vec<f64> = sys.e0_dir.iter().map(|v| v * e0).collect();
    let mut out = Path {
        e: Vec::with_capacity(horizon),
        delta: Vec::with_capacity(horizon),
        gap: Vec::with_capacity(horizon),
    };
    let mut mean_true = vec![0.0; d];
    let mut mean_model = vec![0.0; d];
    for t in 1..=horizon {
        sys.c.matvec_into(&h, &mut mean_true);
        sys.c.matvec_into(&hh, &mut mean_model);
        for (a, b) in mean_model.iter_mut().zip(&sys.b_mis) {
            *a += b;
        }
        let diff: Vec<f64> = mean_model.iter().zip(&mean_true).map(|(a, b)| a - b).collect();
        out.delta.push(norm2(&diff));

        let xi: Vec<f64> = rng.gaussian_vec(d);
        let xi_hat: Vec<f64> = match coupling {
            Coupling::Common => xi.clone(),
            Coupling::Independent => rng.gaussian_vec(d),
        };
        let x: Vec<f64> = mean_true.iter().zip(&xi).map(|(a, b)| a + b).collect();
        let xh: Vec<f64> = mean_model.iter().zip(&xi_hat).map(|(a, b)| a + b).collect();
        out.gap
            .push(norm2(&x.iter().zip(&xh).map(|(a, b)| a - b).collect::<Vec<_>>()));

        let mut nh = sys.r.matvec(&h);
        nh.iter_mut().for_each(|v| *v *= p.rho);
        sys.b.scaled(p.lx).matvec_acc(&x, &mut nh);
        let mut nhh = sys.r.matvec(&hh);
        nhh.iter_mut().for_each(|v| *v *= p.rho);
        sys.b.scaled(p.lx).matvec_acc(&xh, &mut nhh);
        for (a, b) in nhh.iter_mut().zip(&sys.d_f) {
            *a += b;
        }
        if let Some(pl) = pulse {
            if pl.t == t {
                for (a, b) in nhh.iter_mut().zip(&sys.pulse_dir) {
                    *a += pl.magnitude * b;
                }
            }
        }
        h = nh;
        hh = nhh;
        out.e
            .push(norm2(&hh.iter().zip(&h).map(|(a, b)| a - b).collect::<Vec<_>>()));
    }
    out
}

fn mean_se(cols: impl Iterator<Item = f64>, n: usize) -> (f64, f64) {
    let v: Vec<f64> = cols.collect();
    let mean = v.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Monte Carlo over `rollouts` paths; path `i` draws from `substream(i)`.
pub fn simulate(
    sys: &OracleSystem,
    horizon: usize,
    rollouts: usize,
    e0: f64,
    pulse: Option<Pulse>,
    coupling: Coupling,
    seed: u64,
) -> Result<RolloutStats> {
    if rollouts == 0 {
        return Err(CdlfError::InvalidArgument("need at least one rollout".into()));
    }
    let root = RngStream::with_stream(seed, 0x51);
    let paths: Vec<Path> = (0..rollouts)
        .into_par_iter()
        .map(|i| one_path(sys, horizon, e0, pulse, coupling, &mut root.substream(i as u64)))
        .collect();
    let mut st = RolloutStats {
        rollouts,
        pulse,
        e_hat: Vec::with_capacity(horizon),
        e_se: Vec::with_capacity(horizon),
        delta_hat: Vec::with_capacity(horizon),
        delta_se: Vec::with_capacity(horizon),
        gap_hat: Vec::with_capacity(horizon),
    };
    for t in 0..horizon {
        let (e, es) = mean_se(paths.iter().map(|p| p.e[t]), rollouts);
        let (dl, ds) = mean_se(paths.iter().map(|p| p.delta[t]), rollouts);
        let (g, _) = mean_se(paths.iter().map(|p| p.gap[t]), rollouts);
        st.e_hat.push(e);
        st.e_se.push(es);
        st.delta_hat.push(dl);
        st.delta_se.push(ds);
        st.gap_hat.push(g);
    }
    Ok(st)
}

/// Per-step geometric ratio of the pulse-induced excess latent error over
/// `steps` steps from the pulse, fitted by least squares on `log(excess)`.
pub fn pulse_decay_ratio(with_pulse: &RolloutStats, baseline: &RolloutStats, pulse_t: usize, steps: usize) -> Option<f64> {
    let pts: Vec<(f64, f64)> = (pulse_t..=pulse_t + steps)
        .filter_map(|t| {
            let ex = with_pulse.e_hat.get(t - 1)? - baseline.e_hat.get(t - 1)?;
            (ex > 0.0).then(|| (t as f64, ex.ln()))
        })
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Some((sxy / sxx).exp())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub kappa: f64,
    pub lx: f64,
    pub plateau: f64,
    pub plateau_se: f64,
    /// `None` for `kappa >= 1`.
    pub bound: Option<f64>,
}

/// One simulation per `kappa`, setting `L_x = kappa (1 - rho) / L_P` with
/// everything else from `base`.
pub fn sweep_kappa(
    kappas: &[f64],
    base: OracleParams,
    horizon: usize,
    rollouts: usize,
    coupling: Coupling,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if kappas.is_empty() {
        return Err(CdlfError::Empty("kappa grid"));
    }
    if !(base.lp > 0.0 && base.rho < 1.0) {
        return Err(CdlfError::InvalidArgument("sweep needs L_P > 0 and rho < 1".into()));
    }
    kappas
        .iter()
        .map(|&k| {
            let lx = k * (1.0 - base.rho) / base.lp;
            let sys = build_oracle(OracleParams { lx, ..base })?;
            if k >= 1.0 {
                log::warn!("kappa {k} is outside the stable regime");
            }
            let st = simulate(&sys, horizon, rollouts, 0.0, None, coupling, seed)?;
            let tail = (horizon / 5).max(1);
            let se = st.delta_se[horizon - tail..].iter().sum::<f64>() / tail as f64;
            Ok(SweepRow {
                kappa: k,
                lx,
                plateau: st.plateau(),
                plateau_se: se,
                bound: sys.error_bound(0.0),
            })
        })
        .collect()
}

/// `t,e_hat,delta_hat,bound` rows.
pub fn write_rollout_csv<W: Write>(st: &RolloutStats, bound: Option<f64>, w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["t", "e_hat", "delta_hat", "bound"])?;
    for t in 0..st.horizon() {
        wr.write_record([
            (t + 1).to_string(),
            st.e_hat[t].to_string(),
            st.delta_hat[t].to_string(),
            bound.map_or_else(|| "inf".to_string(), |b| b.to_string()),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

/// `kappa,lx,plateau,bound` rows.
pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["kappa", "lx", "plateau", "bound"])?;
    for r in rows {
        wr.write_record([
            r.kappa.to_string(),
            r.lx.to_string(),
            r.plateau.to_string(),
            r.bound.map_or_else(|| "inf".to_string(), |b| b.to_string()),
        ])?;
    }
    wr.flush()?;
    Ok(())
}
