//! The full forecaster: configuration, parameters, the joint denoising loss
//! with gradients through the score network, the latent recursion and every
//! context encoder, and forecast rollouts.

use serde::{Deserialize, Serialize};

use crate::context::{
    context_backward, context_for, transition_unchecked, ContextCache, ContextDims, ContextParams,
    ContextSettings, ContextVector, Fusion, ReferenceLibrary,
};
use crate::diffusion::{
    assemble_window, forward_noise, rollout, step_embedding, ForecastDistribution, LatentRecursion,
    NoiseSchedule, Sampler,
};
use crate::error::{dim_err, CdlfError, Result};
use crate::numerics::conv::CausalConvNet;
use crate::numerics::gru::{gru_backward, GruParams, GruStep};
use crate::numerics::matrix::Matrix;
use crate::numerics::params::{join, ParamGroup};
use crate::numerics::rng::RngStream;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub data_dim: usize,
    pub descriptor_dim: usize,
    pub ref_dim: usize,
    pub static_dim: usize,
    pub hidden_dim: usize,
    pub window: usize,
    pub blocks: usize,
    pub channels: usize,
    pub kernel: usize,
    pub embed_dim: usize,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub k_refs: usize,
    pub gamma: f64,
    pub fusion: Fusion,
    pub clip: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            data_dim: 1,
            descriptor_dim: 1,
            ref_dim: 8,
            static_dim: 8,
            hidden_dim: 16,
            window: 8,
            blocks: 3,
            channels: 16,
            kernel: 2,
            embed_dim: 32,
            diffusion_steps: 50,
            beta_start: 1e-4,
            beta_end: 0.1,
            k_refs: 5,
            gamma: 1.0,
            fusion: Fusion::Concat,
            clip: 5.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("data_dim", self.data_dim),
            ("descriptor_dim", self.descriptor_dim),
            ("ref_dim", self.ref_dim),
            ("static_dim", self.static_dim),
            ("hidden_dim", self.hidden_dim),
            ("window", self.window),
            ("blocks", self.blocks),
            ("channels", self.channels),
            ("kernel", self.kernel),
            ("diffusion_steps", self.diffusion_steps),
            ("k_refs", self.k_refs),
        ];
        for (name, v) in pos {
            if v == 0 {
                return Err(CdlfError::Config(format!("{name} must be positive")));
            }
        }
        if self.embed_dim % 2 != 0 {
            return Err(CdlfError::Config("embed_dim must be even".into()));
        }
        if !(self.gamma >= 0.0) {
            return Err(CdlfError::Config("gamma must be non-negative".into()));
        }
        if !(self.clip > 0.0) {
            return Err(CdlfError::Config("clip must be positive".into()));
        }
        if !(self.beta_start > 0.0 && self.beta_start <= self.beta_end && self.beta_end < 1.0) {
            return Err(CdlfError::Config("need 0 < beta_start <= beta_end < 1".into()));
        }
        Ok(())
    }

    pub fn context_dims(&self) -> ContextDims {
        ContextDims {
            data_dim: self.data_dim,
            descriptor_dim: self.descriptor_dim,
            ref_dim: self.ref_dim,
            static_dim: self.static_dim,
            hidden_dim: self.hidden_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ModelParameters<T> {
    pub context: ContextParams<T>,
    pub score: CausalConvNet<T>,
}

impl<T: Scalar> ModelParameters<T> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self {
            context: ContextParams::zeros(cfg.context_dims()),
            score: CausalConvNet::zeros(
                cfg.data_dim,
                cfg.channels,
                cfg.blocks,
                cfg.kernel,
                cfg.hidden_dim + cfg.embed_dim,
            ),
        }
    }

    pub fn random(cfg: &ModelConfig, rng: &RngStream) -> Self {
        Self {
            context: ContextParams::random(cfg.context_dims(), &mut rng.substream(100)),
            score: CausalConvNet::random(
                cfg.data_dim,
                cfg.channels,
                cfg.blocks,
                cfg.kernel,
                cfg.hidden_dim + cfg.embed_dim,
                &mut rng.substream(200),
            ),
        }
    }
}

impl<T: Scalar> ParamGroup<T> for ModelParameters<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[T])) {
        self.context.visit(&join(prefix, "context"), f);
        self.score.visit(&join(prefix, "score"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [T])) {
        self.context.visit_mut(&join(prefix, "context"), f);
        self.score.visit_mut(&join(prefix, "score"), f);
    }
}

/// `f_phi(h, x, c)` with the context held fixed.
pub struct Transition<'a, T: Scalar> {
    pub params: &'a GruParams<T>,
    pub c: &'a [T],
}

impl<'a, T: Scalar> LatentRecursion<T> for Transition<'a, T> {
    fn step(&self, h_prev: &[T], x: &[T]) -> Vec<T> {
        transition_unchecked(h_prev, x, self.c, self.params).h_new
    }
}

/// One term of the denoising objective: series `series` of the library,
/// 1-based position `t0`, diffusion step `n` and injected noise `eps`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingInstance<T> {
    pub series: usize,
    pub t0: usize,
    pub n: usize,
    pub eps: Vec<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ModelParameters<T>,
    pub schedule: NoiseSchedule<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let schedule = NoiseSchedule::linear(config.diffusion_steps, config.beta_start, config.beta_end)?;
        let params = ModelParameters::random(&config, &RngStream::new(seed));
        Ok(Self {
            config,
            params,
            schedule,
        })
    }

    pub fn settings(&self) -> ContextSettings<T> {
        ContextSettings {
            k: self.config.k_refs,
            gamma: T::c(self.config.gamma),
            fusion: self.config.fusion,
        }
    }

    /// Context for descriptor `s`, never selecting the entry named `exclude_id`.
    pub fn context(
        &self,
        s: &[T],
        lib: &ReferenceLibrary<T>,
        exclude_id: Option<&str>,
    ) -> Result<(ContextVector<T>, ContextCache<T>)> {
        context_for(&self.params.context, s, lib, self.settings(), exclude_id)
    }

    pub fn sampler(&self) -> Sampler<'_, T> {
        Sampler {
            net: &self.params.score,
            schedule: &self.schedule,
            window: self.config.window,
            embed_dim: self.config.embed_dim,
            clip: T::c(self.config.clip),
        }
    }

    /// `m` sampled paths of length `horizon` following the observed `prefix`.
    #[allow(clippy::too_many_arguments)]
    pub fn forecast(
        &self,
        s: &[T],
        lib: &ReferenceLibrary<T>,
        exclude_id: Option<&str>,
        prefix: &Matrix<T>,
        horizon: usize,
        m: usize,
        rng: &RngStream,
    ) -> Result<ForecastDistribution<T>> {
        let (ctx, _) = self.context(s, lib, exclude_id)?;
        self.forecast_from(&ctx, prefix, horizon, m, rng)
    }

    pub fn forecast_from(
        &self,
        ctx: &ContextVector<T>,
        prefix: &Matrix<T>,
        horizon: usize,
        m: usize,
        rng: &RngStream,
    ) -> Result<ForecastDistribution<T>> {
        let rec = Transition {
            params: &self.params.context.transition,
            c: &ctx.c,
        };
        rollout(&self.sampler(), &rec, &ctx.h0, prefix, horizon, m, rng)
    }

    /// Latent states `h_0..=h_len` driven by the first `len` rows of `traj`.
    pub fn teacher_forced_states(&self, ctx: &ContextVector<T>, traj: &Matrix<T>, len: usize) -> Vec<GruStep<T>> {
        let p = &self.params.context.transition;
        let mut h = ctx.h0.clone();
        let mut out = Vec::with_capacity(len);
        for t in 0..len.min(traj.rows()) {
            let st = transition_unchecked(&h, traj.row(t), &ctx.c, p);
            h.clone_from(&st.h_new);
            out.push(st);
        }
        out
    }

    /// Draws `positions` instances for `series` (all positions when
    /// `positions == 0` or it exceeds the length).
    pub fn sample_instances(
        &self,
        lib: &ReferenceLibrary<T>,
        series: usize,
        positions: usize,
        rng: &mut RngStream,
    ) -> Vec<TrainingInstance<T>> {
        let len = lib.entries[series].trajectory.rows();
        let d = self.config.data_dim;
        let n_max = self.schedule.steps();
        let ts: Vec<usize> = if positions == 0 || positions >= len {
            (1..=len).collect()
        } else {
            (0..positions).map(|_| rng.int_inclusive(1, len)).collect()
        };
        ts.into_iter()
            .map(|t0| TrainingInstance {
                series,
                t0,
                n: rng.int_inclusive(1, n_max),
                eps: rng.gaussian_vec(d),
            })
            .collect()
    }
}

/// Mean squared noise-prediction error over `batch` and its gradient with
/// respect to every parameter. Each series is excluded from its own
/// reference set.
pub fn loss_and_grads<T: Scalar>(
    model: &Model<T>,
    lib: &ReferenceLibrary<T>,
    batch: &[TrainingInstance<T>],
) -> Result<(T, ModelParameters<T>)> {
    if batch.is_empty() {
        return Err(CdlfError::Empty("training batch"));
    }
    let cfg = &model.config;
    let p = &model.params;
    let m = cfg.hidden_dim;
    let d = cfg.data_dim;
    let scale = T::one() / T::usize(batch.len());
    let two = T::c(2.0);
    let mut grads = ModelParameters::zeros(cfg);
    let mut loss = T::zero();

    let mut groups: Vec<(usize, Vec<&TrainingInstance<T>>)> = Vec::new();
    for inst in batch {
        match groups.iter_mut().find(|g| g.0 == inst.series) {
            Some(g) => g.1.push(inst),
            None => groups.push((inst.series, vec![inst])),
        }
    }

    for (series, insts) in groups {
        let entry = lib
            .entries
            .get(series)
            .ok_or_else(|| CdlfError::InvalidArgument(format!("series index {series} out of range")))?;
        let traj = &entry.trajectory;
        if traj.cols() != d {
            return Err(dim_err("loss_and_grads trajectory", d, traj.cols()));
        }
        let (ctx, cache) = model.context(&entry.descriptor, lib, Some(&entry.id))?;
        let max_prev = insts.iter().map(|i| i.t0 - 1).max().unwrap_or(0);
        for i in &insts {
            if i.t0 == 0 || i.t0 > traj.rows() || i.eps.len() != d {
                return Err(CdlfError::InvalidArgument(format!(
                    "instance at t0 = {} invalid for series of length {}",
                    i.t0,
                    traj.rows()
                )));
            }
        }
        let steps = model.teacher_forced_states(&ctx, traj, max_prev);
        let h_at = |t: usize| if t == 0 { &ctx.h0 } else { &steps[t - 1].h_new };

        let mut dh = vec![vec![T::zero(); m]; max_prev + 1];
        for inst in insts {
            let past: Vec<&[T]> = (0..inst.t0 - 1).map(|r| traj.row(r)).collect();
            let noisy = forward_noise(traj.row(inst.t0 - 1), inst.n, &inst.eps, &model.schedule)?;
            let win = assemble_window(&past, &noisy, cfg.window);
            let emb = step_embedding(inst.n, cfg.embed_dim);
            let (eps_hat, cc) = p.score.forward_cached(&win, h_at(inst.t0 - 1), &emb)?;
            let mut d_out = Vec::with_capacity(d);
            for (e_hat, &e) in eps_hat.iter().zip(&inst.eps) {
                let r = *e_hat - e;
                loss += r * r * scale;
                d_out.push(two * r * scale);
            }
            let d_cond = p.score.backward(&cc, &d_out, &mut grads.score);
            for (a, &b) in dh[inst.t0 - 1].iter_mut().zip(&d_cond[..m]) {
                *a += b;
            }
        }

        let mut d_c = vec![T::zero(); ctx.c.len()];
        for t in (1..=max_prev).rev() {
            let (dh_prev, dx) = gru_backward(&steps[t - 1], &p.context.transition, &dh[t], &mut grads.context.transition);
            for (a, &b) in dh[t - 1].iter_mut().zip(&dh_prev) {
                *a += b;
            }
            for (a, &b) in d_c.iter_mut().zip(&dx[d..]) {
                *a += b;
            }
        }
        context_backward(&p.context, &ctx, &cache, &d_c, &dh[0], cfg.fusion, &mut grads.context);
    }
    if !loss.is_finite() {
        return Err(CdlfError::NonFinite("denoising loss"));
    }
    Ok((loss, grads))
}
