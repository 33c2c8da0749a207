//! Joint training of the score network and every context/transition
//! parameter on the denoising objective, with periodic stability checks.

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};

use crate::context::ReferenceLibrary;
use crate::error::{CdlfError, Result};
use crate::model::{loss_and_grads, Model};
use crate::numerics::gru::GruParams;
use crate::numerics::optim::{AdamConfig, OptimizerState};
use crate::numerics::params::ParamGroup;
use crate::numerics::rng::RngStream;
use crate::scalar::Scalar;
use crate::stability::{collect_model_states, enforce_model, measure_pooled, sanitize_gates};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub max_steps: usize,
    /// Series drawn (with replacement) per step.
    pub batch_series: usize,
    /// Positions drawn per series; 0 uses every position.
    pub positions_per_series: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Stability check interval in steps; 0 disables the hook.
    pub enforce_every: usize,
    pub target_kappa: f64,
    pub lp: f64,
    pub gate_widening: f64,
    /// Series and sampled paths used to measure the recursion per check.
    pub check_series: usize,
    pub check_rollouts: usize,
    pub reinit_rho: f64,
    pub reinit_patience: usize,
    /// Stop after this many steps without a new best smoothed loss.
    pub plateau_steps: usize,
    pub max_nonfinite: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_steps: 20_000,
            batch_series: 4,
            positions_per_series: 8,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            enforce_every: 100,
            target_kappa: 0.8,
            lp: 1.0,
            gate_widening: 0.1,
            check_series: 4,
            check_rollouts: 1,
            reinit_rho: 1.2,
            reinit_patience: 3,
            plateau_steps: 2_000,
            max_nonfinite: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_series == 0 {
            return Err(CdlfError::Config("batch_series must be positive".into()));
        }
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(CdlfError::Config("invalid optimizer settings".into()));
        }
        if !(self.target_kappa > 0.0 && self.target_kappa < 1.0) {
            return Err(CdlfError::Config("target_kappa must lie in (0, 1)".into()));
        }
        if !(self.lp >= 0.0) || !(0.0..1.0).contains(&self.gate_widening) {
            return Err(CdlfError::Config("invalid stability settings".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Budget,
    Plateau,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityCheck {
    pub step: usize,
    pub rho_hat: f64,
    pub rho_bar: f64,
    pub kappa_bar: f64,
    pub actions: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub losses: Vec<f64>,
    pub checks: Vec<StabilityCheck>,
    pub reinitializations: usize,
    pub skipped_nonfinite: usize,
    pub steps: usize,
    pub stop: Option<StopReason>,
}

const EMA: f64 = 0.01;
const MIN_REL_GAIN: f64 = 1e-3;

/// Trains `model` in place on every entry of `lib`. Each series is drawn
/// uniformly, then its positions uniformly; every series is excluded from
/// its own reference set.
pub fn train<T: Scalar>(model: &mut Model<T>, lib: &ReferenceLibrary<T>, cfg: &TrainConfig, seed: u64) -> Result<TrainLog> {
    cfg.validate()?;
    if lib.len() < 2 {
        return Err(CdlfError::InvalidArgument(
            "training needs at least two series so each has a reference".into(),
        ));
    }
    let root = RngStream::new(seed);
    let mut rng = root.substream(1);
    let mut opt = OptimizerState::<T>::new(model.params.param_count(), cfg.adam());
    let mut log = TrainLog::default();
    let mut ema: Option<f64> = None;
    let mut best = f64::INFINITY;
    let mut best_step = 0;
    let mut nonfinite_streak = 0;
    let mut high_rho_streak = 0;

    for step in 1..=cfg.max_steps {
        let mut batch = Vec::new();
        for _ in 0..cfg.batch_series {
            let s = rng.int_inclusive(0, lib.len() - 1);
            batch.extend(model.sample_instances(lib, s, cfg.positions_per_series, &mut rng));
        }
        match loss_and_grads(model, lib, &batch) {
            Ok((loss, grads)) => {
                nonfinite_streak = 0;
                let mut theta = model.params.flatten();
                opt.step_flat(&mut theta, &grads.flatten())?;
                model.params.unflatten(&theta);
                let l = loss.f64();
                log.losses.push(l);
                let e = ema.map_or(l, |v| (1.0 - EMA) * v + EMA * l);
                ema = Some(e);
                if e < best * (1.0 - MIN_REL_GAIN) {
                    best = e;
                    best_step = step;
                }
            }
            Err(CdlfError::NonFinite(what)) => {
                nonfinite_streak += 1;
                log.skipped_nonfinite += 1;
                warn!("step {step}: non-finite {what}, skipped");
                if nonfinite_streak > cfg.max_nonfinite {
                    return Err(CdlfError::Diverged(format!(
                        "{nonfinite_streak} consecutive non-finite losses at step {step}"
                    )));
                }
            }
            Err(e) => return Err(e),
        }
        log.steps = step;

        if cfg.enforce_every > 0 && step % cfg.enforce_every == 0 {
            let check = stability_hook(model, lib, cfg, &root, step)?;
            if check.rho_hat > cfg.reinit_rho {
                high_rho_streak += 1;
            } else {
                high_rho_streak = 0;
            }
            if high_rho_streak >= cfg.reinit_patience {
                warn!("step {step}: measured contraction {:.3} above {} for {} checks, re-initializing transition", check.rho_hat, cfg.reinit_rho, high_rho_streak);
                let p = &model.params.context.transition;
                model.params.context.transition =
                    GruParams::random(p.hidden(), p.input(), &mut root.substream(10_000 + step as u64));
                opt = OptimizerState::new(model.params.param_count(), cfg.adam());
                log.reinitializations += 1;
                high_rho_streak = 0;
            }
            log.checks.push(check);
        }
        if step % 500 == 0 {
            info!("step {step}: smoothed loss {:.5}", ema.unwrap_or(f64::NAN));
        }
        if cfg.plateau_steps > 0 && step - best_step >= cfg.plateau_steps {
            log.stop = Some(StopReason::Plateau);
            info!("plateau after {step} steps");
            return Ok(log);
        }
    }
    log.stop = Some(StopReason::Budget);
    Ok(log)
}

fn stability_hook<T: Scalar>(
    model: &mut Model<T>,
    lib: &ReferenceLibrary<T>,
    cfg: &TrainConfig,
    root: &RngStream,
    step: usize,
) -> Result<StabilityCheck> {
    let mut pick = root.substream(20_000 + step as u64);
    let series: Vec<usize> = (0..cfg.check_series.max(1))
        .map(|_| pick.int_inclusive(0, lib.len() - 1))
        .collect();
    let groups = collect_model_states(model, lib, &series, cfg.check_rollouts, &pick.substream(0))?;
    let emp = measure_pooled(&groups)?;
    let gates = sanitize_gates(emp.gates.widened(cfg.gate_widening));
    let e = enforce_model(model, cfg.target_kappa, cfg.lp, &gates)?;
    debug!(
        "step {step}: rho_hat {:.4} rho_bar {:.4} kappa_bar {:.4} {:?}",
        emp.rho_hat, e.rho_bar, e.kappa_bar, e.actions
    );
    Ok(StabilityCheck {
        step,
        rho_hat: emp.rho_hat,
        rho_bar: e.rho_bar,
        kappa_bar: e.kappa_bar,
        actions: e.actions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::ReferenceEntry;
    use crate::model::ModelConfig;
    use crate::numerics::matrix::Matrix;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            descriptor_dim: 2,
            ref_dim: 4,
            static_dim: 4,
            hidden_dim: 4,
            window: 4,
            blocks: 2,
            channels: 6,
            embed_dim: 8,
            diffusion_steps: 10,
            k_refs: 2,
            ..Default::default()
        }
    }

    fn lib(values: impl Fn(usize, usize) -> f64) -> ReferenceLibrary<f64> {
        let mut rng = RngStream::new(1);
        ReferenceLibrary::new(
            (0..4)
                .map(|i| ReferenceEntry {
                    id: format!("s{i}"),
                    trajectory: Matrix::from_fn(6, 1, |t, _| values(i, t)),
                    descriptor: rng.gaussian_vec(2),
                })
                .collect(),
        )
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let mut model = Model::<f64>::new(small_cfg(), 3).unwrap();
        let before = model.params.clone();
        let cfg = TrainConfig { max_steps: 3, lr: 0.0, enforce_every: 0, ..Default::default() };
        train(&mut model, &lib(|i, t| (i + t) as f64 * 0.1), &cfg, 5).unwrap();
        assert_eq!(model.params, before);
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = TrainConfig { max_steps: 200, enforce_every: 50, ..Default::default() };
        let data = lib(|i, t| ((i + t) as f64 * 0.4).sin() * 0.5);
        let run = || {
            let mut m = Model::<f64>::new(small_cfg(), 9).unwrap();
            let log = train(&mut m, &data, &cfg, 17).unwrap();
            (m.params, log.losses)
        };
        let (pa, la) = run();
        let (pb, lb) = run();
        assert_eq!(la.last(), lb.last());
        assert_eq!(pa, pb);
    }

    #[test]
    fn enforcement_hook_keeps_margin() {
        let cfg = TrainConfig { max_steps: 100, enforce_every: 25, ..Default::default() };
        let mut m = Model::<f64>::new(small_cfg(), 2).unwrap();
        let log = train(&mut m, &lib(|i, t| (i * t) as f64 * 0.05), &cfg, 1).unwrap();
        assert_eq!(log.checks.len(), 4);
        assert!(log.checks.iter().all(|c| c.kappa_bar <= 0.8 && c.rho_bar < 1.0));
    }

    #[test]
    fn constant_zero_data_learns_zero_mean() {
        let cfg = TrainConfig {
            max_steps: 1500,
            positions_per_series: 0,
            lr: 3e-3,
            ..Default::default()
        };
        let data = lib(|_, _| 0.0);
        let mut m = Model::<f64>::new(small_cfg(), 4).unwrap();
        train(&mut m, &data, &cfg, 2).unwrap();
        let e = &data.entries[0];
        let dist = m
            .forecast(&e.descriptor, &data, Some(&e.id), &Matrix::zeros(0, 1), 1, 400, &RngStream::new(8))
            .unwrap();
        let mean = dist.marginal(0, 0).iter().sum::<f64>() / 400.0;
        assert!(mean.abs() < 0.1, "sampled mean {mean}");
    }
}
