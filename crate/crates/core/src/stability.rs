//! Contraction constants of the latent recursion: closed-form GRU Jacobian
//! bounds, finite-difference measurements, the stability margin `kappa`,
//! the sufficient condition and a spectral shrink that enforces it.

use serde::{Deserialize, Serialize};

use crate::context::ReferenceLibrary;
use crate::error::{CdlfError, Result};
use crate::model::Model;
use crate::numerics::gru::{gru_forward_unchecked, GruParams};
use crate::numerics::matrix::{norm2, norm_inf, Matrix};
use crate::numerics::rng::RngStream;
use crate::numerics::spectral::spectral_norm_default;
use crate::scalar::Scalar;

pub const DEFAULT_FD_STEP: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateRanges {
    pub z_min: f64,
    pub z_max: f64,
    pub r_max: f64,
    /// Largest `|h_i|` seen on the states the ranges were measured on.
    pub h_inf: f64,
}

impl GateRanges {
    pub fn validate(&self) -> Result<()> {
        let ok = self.z_min > 0.0 && self.z_min <= self.z_max && self.z_max < 1.0 && (0.0..1.0).contains(&self.r_max);
        if ok {
            Ok(())
        } else {
            Err(CdlfError::InvalidArgument(format!(
                "gate ranges need 0 < z_min <= z_max < 1 and 0 <= r_max < 1, got {self:?}"
            )))
        }
    }

    /// Moves each limit a fraction `frac` of the way towards its extreme.
    pub fn widened(&self, frac: f64) -> Self {
        Self {
            z_min: self.z_min * (1.0 - frac),
            z_max: self.z_max + frac * (1.0 - self.z_max),
            r_max: self.r_max + frac * (1.0 - self.r_max),
            h_inf: self.h_inf,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Norms {
    wz: f64,
    wr: f64,
    wh: f64,
    uz: f64,
    ur: f64,
    uh: f64,
}

fn norms<T: Scalar>(p: &GruParams<T>) -> Norms {
    let n = |m: &Matrix<T>| spectral_norm_default(m).f64();
    Norms {
        wz: n(&p.w_z),
        wr: n(&p.w_r),
        wh: n(&p.w_h),
        uz: n(&p.u_z),
        ur: n(&p.u_r),
        uh: n(&p.u_h),
    }
}

fn rho_from(n: &Norms, g: &GateRanges) -> f64 {
    (1.0 - g.z_min) + 0.5 * n.uz + g.z_max * n.uh * (g.r_max + 0.25 * n.ur)
}

fn lx_from(n: &Norms, g: &GateRanges) -> f64 {
    0.5 * n.wz + g.z_max * (n.wh + 0.25 * n.uh * n.wr)
}

/// `(1 - z_min) + |U_z|/2 + z_max |U_h| (r_max + |U_r|/4)`
pub fn gru_bound_rho<T: Scalar>(p: &GruParams<T>, g: &GateRanges) -> Result<f64> {
    g.validate()?;
    Ok(rho_from(&norms(p), g))
}

/// `|W_z|/2 + z_max (|W_h| + |U_h| |W_r| / 4)`
pub fn gru_bound_lx<T: Scalar>(p: &GruParams<T>, g: &GateRanges) -> Result<f64> {
    g.validate()?;
    Ok(lx_from(&norms(p), g))
}

/// `L_P L_x / (1 - rho)`; errors when `rho >= 1`.
pub fn kappa(rho: f64, lx: f64, lp: f64) -> Result<f64> {
    if !(rho < 1.0) {
        return Err(CdlfError::MarginViolated { rho });
    }
    Ok(lp * lx / (1.0 - rho))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub pass: bool,
    /// `1 - rho`
    pub rho_margin: f64,
    /// `(1 - rho) - L_P L_x`
    pub coupling_margin: f64,
}

/// `rho < 1` and `L_P L_x < 1 - rho`, both strict.
pub fn check_sufficient(rho: f64, lx: f64, lp: f64) -> Verdict {
    let rho_margin = 1.0 - rho;
    let coupling_margin = rho_margin - lp * lx;
    Verdict {
        pass: rho < 1.0 && lp * lx < rho_margin,
        rho_margin,
        coupling_margin,
    }
}

/// Maxima of finite-difference Jacobian norms and gate extremes over states.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalConstants {
    pub rho_hat: f64,
    pub lx_hat: f64,
    pub gates: GateRanges,
}

/// Central-difference Jacobians of the cell with respect to `h` and `x`.
pub fn fd_jacobians<T: Scalar>(p: &GruParams<T>, h: &[T], x: &[T], step: f64) -> (Matrix<T>, Matrix<T>) {
    let m = p.hidden();
    let d = p.input();
    let two = T::c(2.0 * step);
    let st = T::c(step);
    let mut jh = Matrix::zeros(m, m);
    let mut hp = h.to_vec();
    for j in 0..m {
        hp[j] = h[j] + st;
        let a = gru_forward_unchecked(&hp, x, p).h_new;
        hp[j] = h[j] - st;
        let b = gru_forward_unchecked(&hp, x, p).h_new;
        hp[j] = h[j];
        for i in 0..m {
            jh[(i, j)] = (a[i] - b[i]) / two;
        }
    }
    let mut jx = Matrix::zeros(m, d);
    let mut xp = x.to_vec();
    for j in 0..d {
        xp[j] = x[j] + st;
        let a = gru_forward_unchecked(h, &xp, p).h_new;
        xp[j] = x[j] - st;
        let b = gru_forward_unchecked(h, &xp, p).h_new;
        xp[j] = x[j];
        for i in 0..m {
            jx[(i, j)] = (a[i] - b[i]) / two;
        }
    }
    (jh, jx)
}

/// Measures contraction constants on visited `(h, x)` pairs.
pub fn measure_empirical<T: Scalar>(p: &GruParams<T>, states: &[(Vec<T>, Vec<T>)], fd_step: f64) -> Result<EmpiricalConstants> {
    if states.is_empty() {
        return Err(CdlfError::Empty("state sample"));
    }
    let mut rho_hat = 0.0f64;
    let mut lx_hat = 0.0f64;
    let mut z_min = f64::INFINITY;
    let mut z_max = f64::NEG_INFINITY;
    let mut r_max = f64::NEG_INFINITY;
    let mut h_inf = 0.0f64;
    for (h, x) in states {
        let (jh, jx) = fd_jacobians(p, h, x, fd_step);
        rho_hat = rho_hat.max(spectral_norm_default(&jh).f64());
        lx_hat = lx_hat.max(spectral_norm_default(&jx).f64());
        let st = gru_forward_unchecked(h, x, p);
        for &z in &st.z {
            z_min = z_min.min(z.f64());
            z_max = z_max.max(z.f64());
        }
        for &r in &st.r {
            r_max = r_max.max(r.f64());
        }
        h_inf = h_inf.max(norm_inf(h).f64());
    }
    Ok(EmpiricalConstants {
        rho_hat,
        lx_hat,
        gates: GateRanges {
            z_min,
            z_max,
            r_max,
            h_inf,
        },
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Enforcement<T> {
    pub params: GruParams<T>,
    pub actions: Vec<String>,
    pub rho_bar: f64,
    pub lx_bar: f64,
    pub kappa_bar: f64,
    pub verdict: Verdict,
}

const SHRINK_SLACK: f64 = 1e-6;

/// Shrinks the recurrent matrices (one common factor) and then the input
/// matrices (another common factor) until the sufficient condition holds
/// with `kappa <= target_kappa` at the given gate ranges.
///
/// The recurrent factor brings the bound to `1 - z_min / 2`, half the
/// headroom left by the `(1 - z_min)` term; the input factor is solved in
/// closed form since the input bound is linear in the input matrices.
pub fn enforce<T: Scalar>(p: &GruParams<T>, target_kappa: f64, lp: f64, g: &GateRanges) -> Result<Enforcement<T>> {
    if !(target_kappa > 0.0 && target_kappa < 1.0) {
        return Err(CdlfError::InvalidArgument(format!("target kappa must lie in (0, 1), got {target_kappa}")));
    }
    if !(lp >= 0.0) {
        return Err(CdlfError::InvalidArgument(format!("L_P must be non-negative, got {lp}")));
    }
    g.validate()?;
    let mut out = p.clone();
    let mut actions = Vec::new();
    let mut n = norms(&out);
    let mut rho = rho_from(&n, g);
    let mut lx = lx_from(&n, g);
    let satisfied = |rho: f64, lx: f64| rho < 1.0 && lp * lx / (1.0 - rho) <= target_kappa && check_sufficient(rho, lx, lp).pass;

    if !satisfied(rho, lx) {
        let rho_target = 1.0 - 0.5 * g.z_min;
        if rho > rho_target {
            // rho(s) = (1 - z_min) + s a + s^2 q with a, q >= 0
            let a = 0.5 * n.uz + g.z_max * n.uh * g.r_max;
            let q = 0.25 * g.z_max * n.uh * n.ur;
            let c = 0.5 * g.z_min;
            let s = if q > 0.0 {
                (2.0 * c) / (a + (a * a + 4.0 * q * c).sqrt())
            } else {
                c / a
            };
            let s = s * (1.0 - SHRINK_SLACK);
            let st = T::c(s);
            out.u_z.scale_in_place(st);
            out.u_r.scale_in_place(st);
            out.u_h.scale_in_place(st);
            actions.push(format!("scaled recurrent matrices by {s:.6e}"));
            n = norms(&out);
            rho = rho_from(&n, g);
            lx = lx_from(&n, g);
        }
        if rho >= 1.0 {
            return Err(CdlfError::Validation(format!(
                "stability enforcement infeasible at these gate ranges: rho bound {rho} after shrink"
            )));
        }
        if lp * lx / (1.0 - rho) > target_kappa || !check_sufficient(rho, lx, lp).pass {
            let qf = target_kappa * (1.0 - rho) / (lp * lx) * (1.0 - SHRINK_SLACK);
            let st = T::c(qf);
            out.w_z.scale_in_place(st);
            out.w_r.scale_in_place(st);
            out.w_h.scale_in_place(st);
            actions.push(format!("scaled input matrices by {qf:.6e}"));
            n = norms(&out);
            rho = rho_from(&n, g);
            lx = lx_from(&n, g);
        }
    }
    let kappa_bar = kappa(rho, lx, lp)?;
    let verdict = check_sufficient(rho, lx, lp);
    if !(verdict.pass && kappa_bar <= target_kappa) {
        return Err(CdlfError::Validation(format!(
            "stability enforcement did not reach target: kappa {kappa_bar}"
        )));
    }
    Ok(Enforcement {
        params: out,
        actions,
        rho_bar: rho,
        lx_bar: lx,
        kappa_bar,
        verdict,
    })
}

/// Everything the toolkit knows about one recursion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub rho_bar: f64,
    pub lx_bar: f64,
    pub rho_hat: f64,
    pub lx_hat: f64,
    pub lp: f64,
    /// `true` when `lp` comes from the sampling proxy rather than the user.
    pub lp_is_proxy: bool,
    /// `None` when the bound on `rho` is not below one.
    pub kappa_bar: Option<f64>,
    pub kappa_hat: Option<f64>,
    pub gates_measured: GateRanges,
    pub gates_used: GateRanges,
    pub verdict: Verdict,
    pub actions: Vec<String>,
}

/// Bounds at `gates_used` plus measurements on `states`.
pub fn stability_report<T: Scalar>(
    p: &GruParams<T>,
    states: &[(Vec<T>, Vec<T>)],
    lp: f64,
    lp_is_proxy: bool,
    widen: f64,
) -> Result<StabilityReport> {
    let emp = measure_empirical(p, states, DEFAULT_FD_STEP)?;
    let gates_used = emp.gates.widened(widen);
    let rho_bar = gru_bound_rho(p, &gates_used)?;
    let lx_bar = gru_bound_lx(p, &gates_used)?;
    Ok(StabilityReport {
        rho_bar,
        lx_bar,
        rho_hat: emp.rho_hat,
        lx_hat: emp.lx_hat,
        lp,
        lp_is_proxy,
        kappa_bar: kappa(rho_bar, lx_bar, lp).ok(),
        kappa_hat: kappa(emp.rho_hat, emp.lx_hat, lp).ok(),
        gates_measured: emp.gates,
        gates_used,
        verdict: check_sufficient(rho_bar, lx_bar, lp),
        actions: Vec::new(),
    })
}

/// Ratio `|mean(f(h)) - mean(f(h'))| / |h - h'|` for paired sample means
/// drawn with common random numbers; used as a heuristic `L_P`.
pub fn lp_ratio<T: Scalar>(mean_a: &[T], mean_b: &[T], h_a: &[T], h_b: &[T]) -> f64 {
    let num: Vec<T> = mean_a.iter().zip(mean_b).map(|(&a, &b)| a - b).collect();
    let den: Vec<T> = h_a.iter().zip(h_b).map(|(&a, &b)| a - b).collect();
    let d = norm2(&den).f64();
    if d == 0.0 {
        0.0
    } else {
        norm2(&num).f64() / d
    }
}


/// The transition cell seen by `x` alone: the context columns of every
/// input matrix are folded into the biases for a fixed `c`.
pub fn absorb_context<T: Scalar>(p: &GruParams<T>, data_dim: usize, c: &[T]) -> GruParams<T> {
    let mut q = p.input_columns(0, data_dim);
    let ctx = p.input_columns(data_dim, c.len());
    ctx.w_z.matvec_acc(c, &mut q.b_z);
    ctx.w_r.matvec_acc(c, &mut q.b_r);
    ctx.w_h.matvec_acc(c, &mut q.b_h);
    q
}

/// Visited `(h_{t-1}, x_t)` pairs of one series under its own context.
#[derive(Clone, Debug)]
pub struct SeriesStates<T> {
    pub cell: GruParams<T>,
    pub states: Vec<(Vec<T>, Vec<T>)>,
}

/// Teacher-forced states over each series in `series`, plus `rollouts`
/// sampled paths per series.
pub fn collect_model_states<T: Scalar>(
    model: &Model<T>,
    lib: &ReferenceLibrary<T>,
    series: &[usize],
    rollouts: usize,
    rng: &RngStream,
) -> Result<Vec<SeriesStates<T>>> {
    let d = model.config.data_dim;
    let mut out = Vec::with_capacity(series.len());
    for &i in series {
        let e = &lib.entries[i];
        let (ctx, _) = model.context(&e.descriptor, lib, Some(&e.id))?;
        let cell = absorb_context(&model.params.context.transition, d, &ctx.c);
        let mut states = Vec::new();
        let mut paths = vec![e.trajectory.clone()];
        if rollouts > 0 {
            let empty = Matrix::zeros(0, d);
            let dist = model.forecast_from(&ctx, &empty, e.trajectory.rows(), rollouts, &rng.substream(i as u64))?;
            paths.extend(dist.samples);
        }
        for path in &paths {
            let mut h = ctx.h0.clone();
            for t in 0..path.rows() {
                let x = path.row(t).to_vec();
                let next = gru_forward_unchecked(&h, &x, &cell).h_new;
                states.push((h, x));
                h = next;
            }
        }
        out.push(SeriesStates { cell, states });
    }
    Ok(out)
}

/// Measurements pooled over series: maxima of the Jacobian norms and the
/// widest gate extremes.
pub fn measure_pooled<T: Scalar>(groups: &[SeriesStates<T>]) -> Result<EmpiricalConstants> {
    let mut acc: Option<EmpiricalConstants> = None;
    for g in groups {
        if g.states.is_empty() {
            continue;
        }
        let e = measure_empirical(&g.cell, &g.states, DEFAULT_FD_STEP)?;
        acc = Some(match acc {
            None => e,
            Some(a) => EmpiricalConstants {
                rho_hat: a.rho_hat.max(e.rho_hat),
                lx_hat: a.lx_hat.max(e.lx_hat),
                gates: GateRanges {
                    z_min: a.gates.z_min.min(e.gates.z_min),
                    z_max: a.gates.z_max.max(e.gates.z_max),
                    r_max: a.gates.r_max.max(e.gates.r_max),
                    h_inf: a.gates.h_inf.max(e.gates.h_inf),
                },
            },
        });
    }
    acc.ok_or(CdlfError::Empty("state sample"))
}

/// Keeps measured gate ranges strictly inside the open unit interval.
pub fn sanitize_gates(g: GateRanges) -> GateRanges {
    let lo = 1e-9;
    let hi = 1.0 - 1e-9;
    GateRanges {
        z_min: g.z_min.clamp(lo, hi),
        z_max: g.z_max.clamp(lo, hi).max(g.z_min.clamp(lo, hi)),
        r_max: g.r_max.clamp(0.0, hi),
        h_inf: g.h_inf,
    }
}

/// Bounds (at widened measured gates) and measurements for the transition
/// of a trained model.
pub fn model_stability_report<T: Scalar>(
    model: &Model<T>,
    groups: &[SeriesStates<T>],
    lp: f64,
    lp_is_proxy: bool,
    widen: f64,
) -> Result<StabilityReport> {
    let emp = measure_pooled(groups)?;
    let gates_used = sanitize_gates(emp.gates.widened(widen));
    let x_cell = model
        .params
        .context
        .transition
        .input_columns(0, model.config.data_dim);
    let rho_bar = gru_bound_rho(&x_cell, &gates_used)?;
    let lx_bar = gru_bound_lx(&x_cell, &gates_used)?;
    Ok(StabilityReport {
        rho_bar,
        lx_bar,
        rho_hat: emp.rho_hat,
        lx_hat: emp.lx_hat,
        lp,
        lp_is_proxy,
        kappa_bar: kappa(rho_bar, lx_bar, lp).ok(),
        kappa_hat: kappa(emp.rho_hat, emp.lx_hat, lp).ok(),
        gates_measured: emp.gates,
        gates_used,
        verdict: check_sufficient(rho_bar, lx_bar, lp),
        actions: Vec::new(),
    })
}

/// Applies [`enforce`] to the input-to-hidden columns acting on `x` and the
/// recurrent matrices of the model's transition.
pub fn enforce_model<T: Scalar>(
    model: &mut Model<T>,
    target_kappa: f64,
    lp: f64,
    gates: &GateRanges,
) -> Result<Enforcement<T>> {
    let d = model.config.data_dim;
    let tr = &mut model.params.context.transition;
    let x_cell = tr.input_columns(0, d);
    let e = enforce(&x_cell, target_kappa, lp, gates)?;
    tr.set_input_columns(0, &e.params);
    tr.u_z = e.params.u_z.clone();
    tr.u_r = e.params.u_r.clone();
    tr.u_h = e.params.u_h.clone();
    Ok(e)
}

/// Heuristic `L_P`: for `probes` visited states `h` and nearby `h'`, the
/// shift of the mean next-step sample (`m` draws, common random numbers)
/// relative to `|h - h'|`; the maximum ratio is returned.
pub fn estimate_lp_proxy<T: Scalar>(
    model: &Model<T>,
    groups: &[SeriesStates<T>],
    probes: usize,
    m: usize,
    rng: &RngStream,
) -> Result<f64> {
    let pool: Vec<&Vec<T>> = groups.iter().flat_map(|g| g.states.iter().map(|s| &s.0)).collect();
    if pool.is_empty() {
        return Err(CdlfError::Empty("state sample"));
    }
    let sampler = model.sampler();
    let mut pick = rng.substream(1);
    let mut best = 0.0f64;
    for probe in 0..probes {
        let h = pool[pick.int_inclusive(0, pool.len() - 1)].clone();
        let dir: Vec<T> = pick.gaussian_vec(h.len());
        let nd = norm2(&dir);
        let h2: Vec<T> = h.iter().zip(&dir).map(|(&a, &b)| a + T::c(0.1) * b / nd).collect();
        let mean = |hh: &[T]| -> Result<Vec<T>> {
            let mut acc = vec![T::zero(); model.config.data_dim];
            for j in 0..m {
                let mut r = rng.substream(1000 + probe as u64).substream(j as u64);
                let x = sampler.sample_next(&[], hh, &mut r)?;
                for (a, v) in acc.iter_mut().zip(x) {
                    *a += v / T::usize(m);
                }
            }
            Ok(acc)
        };
        best = best.max(lp_ratio(&mean(&h)?, &mean(&h2)?, &h, &h2));
    }
    Ok(best)
}
