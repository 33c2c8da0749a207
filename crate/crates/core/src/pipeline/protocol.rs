//! Cold-start evaluation protocol: series split, window enumeration,
//! leave-focal-out forecasting, scoring and the climatology baseline.

use std::io::Write;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::descriptors::DescriptorMap;
use super::panel::PanelDataset;
use super::transforms::{invert_path, InverseStep};
use crate::context::{ReferenceEntry, ReferenceLibrary};
use crate::error::{CdlfError, Result};
use crate::metrics::{
    launch_summaries, quantile_levels, quantile_sorted, score_window, segment, LaunchSummary, MetricReport,
    Segment, WindowMetrics,
};
use crate::model::{Model, ModelConfig};
use crate::numerics::matrix::Matrix;
use crate::numerics::rng::RngStream;
use crate::scalar::Scalar;
use crate::train::{train, TrainConfig, TrainLog};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolMode {
    /// No observed prefix; forecast steps `1..=horizon`.
    #[default]
    PreLaunch,
    /// Prefix `1..t0`; forecast steps `t0..=horizon`.
    PostLaunch,
    /// Windows of `horizon` steps at every `stride`-th origin, each
    /// conditioned on all earlier observations.
    Rolling,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolSpec {
    pub mode: ProtocolMode,
    pub t0: usize,
    pub horizon: usize,
    pub samples: usize,
    pub stride: usize,
    pub test_fraction: f64,
    /// Inclusive 1-based ranges of forecast steps.
    pub bands: Vec<[usize; 2]>,
}

impl Default for ProtocolSpec {
    fn default() -> Self {
        Self {
            mode: ProtocolMode::PreLaunch,
            t0: 1,
            horizon: 16,
            samples: 100,
            stride: 1,
            test_fraction: 0.2,
            bands: vec![[1, 8], [9, 16]],
        }
    }
}

impl ProtocolSpec {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.samples == 0 || self.stride == 0 {
            return Err(CdlfError::Config("horizon, samples and stride must be positive".into()));
        }
        if self.mode == ProtocolMode::PostLaunch && !(1..=self.horizon).contains(&self.t0) {
            return Err(CdlfError::Config(format!("t0 = {} outside 1..={}", self.t0, self.horizon)));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(CdlfError::Config("test_fraction must lie in (0, 1)".into()));
        }
        if self.bands.iter().any(|b| b[0] == 0 || b[0] > b[1]) {
            return Err(CdlfError::Config("bands must be 1-based with first <= last".into()));
        }
        Ok(())
    }

    /// Forecast origin; pre-launch always starts at 1.
    pub fn effective_t0(&self) -> usize {
        match self.mode {
            ProtocolMode::PostLaunch => self.t0,
            _ => 1,
        }
    }

    /// `(prefix_len, steps)` of every window on a series of length `len`.
    pub fn windows(&self, len: usize) -> Vec<(usize, usize)> {
        match self.mode {
            ProtocolMode::PreLaunch | ProtocolMode::PostLaunch => {
                let end = self.horizon.min(len);
                let p = self.effective_t0() - 1;
                if end > p {
                    vec![(p, end - p)]
                } else {
                    Vec::new()
                }
            }
            ProtocolMode::Rolling => rolling_windows(len, self.horizon, self.stride)
                .into_iter()
                .map(|o| (o, self.horizon))
                .collect(),
        }
    }

    pub fn band_ranges(&self) -> Vec<(usize, usize)> {
        self.bands.iter().map(|b| (b[0], b[1])).collect()
    }
}

/// 0-based offsets of every full window of `horizon` steps.
pub fn rolling_windows(len: usize, horizon: usize, stride: usize) -> Vec<usize> {
    if horizon == 0 || horizon > len {
        return Vec::new();
    }
    (0..=len - horizon).step_by(stride.max(1)).collect()
}

/// A series on the working scale with its encoded descriptor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreparedSeries {
    pub id: String,
    pub values: Vec<f64>,
    pub descriptor: Vec<f64>,
    pub inverse: Vec<InverseStep>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreparedPanel {
    pub train: Vec<PreparedSeries>,
    pub test: Vec<PreparedSeries>,
    pub map: DescriptorMap,
}

/// Seeded split by series: `round(n * test_fraction)` test series, at
/// least one on each side when `n >= 2`. Both index lists are ascending.
pub fn split_series(n: usize, test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    if n < 2 {
        return ((0..n).collect(), Vec::new());
    }
    let n_test = ((n as f64 * test_fraction).round() as usize).clamp(1, n - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = RngStream::new(seed).substream(0x5b1);
    for i in (1..n).rev() {
        idx.swap(i, rng.int_inclusive(0, i));
    }
    let mut test = idx[..n_test].to_vec();
    let mut tr = idx[n_test..].to_vec();
    test.sort_unstable();
    tr.sort_unstable();
    (tr, test)
}

/// Splits, fits the descriptor map on the training split and encodes both.
pub fn prepare(ds: &PanelDataset, test_fraction: f64, seed: u64) -> Result<PreparedPanel> {
    let (tr, te) = split_series(ds.len(), test_fraction, seed);
    let map = DescriptorMap::fit(&ds.descriptor_columns, tr.iter().map(|&i| &ds.series[i]));
    let enc = |idx: &[usize]| -> Result<Vec<PreparedSeries>> {
        idx.iter().map(|&i| prepare_series(&ds.series[i], &map)).collect()
    };
    Ok(PreparedPanel {
        train: enc(&tr)?,
        test: enc(&te)?,
        map,
    })
}

pub fn prepare_series(s: &super::panel::SeriesRecord, map: &DescriptorMap) -> Result<PreparedSeries> {
    if s.is_empty() {
        return Err(CdlfError::Validation(format!("series '{}' has no observations", s.id)));
    }
    Ok(PreparedSeries {
        id: s.id.clone(),
        values: s.values.clone(),
        descriptor: map.encode(s)?,
        inverse: s.inverse.clone(),
    })
}

pub fn to_library<T: Scalar>(series: &[PreparedSeries]) -> ReferenceLibrary<T> {
    ReferenceLibrary::new(
        series
            .iter()
            .map(|s| ReferenceEntry {
                id: s.id.clone(),
                trajectory: Matrix::from_fn(s.values.len(), 1, |t, _| T::c(s.values[t])),
                descriptor: s.descriptor.iter().map(|&v| T::c(v)).collect(),
            })
            .collect(),
    )
}

/// Builds a model sized to the descriptor encoding and trains it on `train`.
pub fn train_model<T: Scalar>(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    train_series: &[PreparedSeries],
    seed: u64,
) -> Result<(Model<T>, TrainLog)> {
    let dim = train_series
        .first()
        .map(|s| s.descriptor.len())
        .ok_or(CdlfError::Empty("training series"))?;
    let cfg = ModelConfig {
        descriptor_dim: dim,
        ..model_cfg.clone()
    };
    let mut model = Model::new(cfg, seed)?;
    let log = train(&mut model, &to_library(train_series), train_cfg, seed)?;
    Ok((model, log))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileRow {
    pub series_id: String,
    pub t: usize,
    pub u: f64,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesSummary {
    pub series_id: String,
    pub summary: LaunchSummary,
    pub segment: Segment,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolOutcome {
    pub report: MetricReport,
    pub windows: Vec<WindowMetrics>,
    pub quantiles: Vec<QuantileRow>,
    pub summaries: Vec<SeriesSummary>,
    /// Windows on which the reference set was checked to exclude the focal series.
    pub focal_checks: usize,
}

struct WindowResult {
    metrics: WindowMetrics,
    quantiles: Vec<QuantileRow>,
    summary: Option<LaunchSummary>,
    checked: bool,
}

/// Forecasts every window of every test series with `model`, using
/// `train` as the reference library.
pub fn run_protocol<T: Scalar>(
    model: &Model<T>,
    train_series: &[PreparedSeries],
    test: &[PreparedSeries],
    spec: &ProtocolSpec,
    seed: u64,
) -> Result<ProtocolOutcome> {
    spec.validate()?;
    let lib = to_library::<T>(train_series);
    let root = RngStream::new(seed);
    evaluate_windows(test, spec, |i, s, prefix_len, steps| {
        if s.descriptor.len() != model.config.descriptor_dim {
            return Err(CdlfError::Validation(format!(
                "series '{}' has {} descriptor values, model expects {}",
                s.id,
                s.descriptor.len(),
                model.config.descriptor_dim
            )));
        }
        let desc: Vec<T> = s.descriptor.iter().map(|&v| T::c(v)).collect();
        let (ctx, _) = model.context(&desc, &lib, Some(&s.id))?;
        if let Some(sel) = ctx.selected.iter().find(|r| lib.entries[r.index].id == s.id) {
            return Err(CdlfError::Validation(format!(
                "focal series '{}' selected as its own reference (index {})",
                s.id, sel.index
            )));
        }
        let prefix = Matrix::from_fn(prefix_len, 1, |t, _| T::c(s.values[t]));
        let rng = root.substream(i as u64).substream(prefix_len as u64);
        let dist = model.forecast_from(&ctx, &prefix, steps, spec.samples, &rng)?;
        let paths = dist
            .samples
            .iter()
            .map(|m| (0..steps).map(|h| m[(h, 0)].f64()).collect())
            .collect();
        Ok((paths, true))
    })
}

/// Scores the per-time cross-sectional distribution of the training
/// series on the same windows.
pub fn run_climatology(train_series: &[PreparedSeries], test: &[PreparedSeries], spec: &ProtocolSpec) -> Result<ProtocolOutcome> {
    spec.validate()?;
    evaluate_windows(test, spec, |_, s, prefix_len, steps| {
        let end = prefix_len + steps;
        let paths: Vec<Vec<f64>> = train_series
            .iter()
            .filter(|r| r.values.len() >= end)
            .map(|r| r.values[prefix_len..end].to_vec())
            .collect();
        if paths.is_empty() {
            return Err(CdlfError::Validation(format!(
                "no training series covers steps {}..={end} needed for '{}'",
                prefix_len + 1,
                s.id
            )));
        }
        Ok((paths, false))
    })
}

fn evaluate_windows<F>(test: &[PreparedSeries], spec: &ProtocolSpec, forecast: F) -> Result<ProtocolOutcome>
where
    F: Fn(usize, &PreparedSeries, usize, usize) -> Result<(Vec<Vec<f64>>, bool)> + Sync,
{
    let jobs: Vec<(usize, usize, usize)> = test
        .iter()
        .enumerate()
        .flat_map(|(i, s)| {
            let w = spec.windows(s.values.len());
            if w.is_empty() {
                warn!("series '{}' (length {}) yields no window", s.id, s.values.len());
            }
            w.into_iter().map(move |(p, h)| (i, p, h))
        })
        .collect();
    let results: Vec<WindowResult> = jobs
        .par_iter()
        .map(|&(i, prefix_len, steps)| {
            let s = &test[i];
            let (paths, checked) = forecast(i, s, prefix_len, steps)?;
            let actual = &s.values[prefix_len..prefix_len + steps];
            let inv = |p: &[f64]| invert_path(&s.inverse, p);
            let metrics = score_window(&s.id, prefix_len + 1, &paths, actual, inv)?;
            let mut quantiles = Vec::with_capacity(steps * 99);
            for h in 0..steps {
                let mut col: Vec<f64> = paths.iter().map(|p| p[h]).collect();
                col.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
                for u in quantile_levels() {
                    quantiles.push(QuantileRow {
                        series_id: s.id.clone(),
                        t: prefix_len + 1 + h,
                        u,
                        value: quantile_sorted(&col, u),
                    });
                }
            }
            let summary = if prefix_len == 0 || spec.mode != ProtocolMode::Rolling {
                let raw: Vec<Vec<f64>> = paths.iter().map(|p| inv(p)).collect();
                Some(launch_summaries(&raw)?)
            } else {
                None
            };
            Ok(WindowResult {
                metrics,
                quantiles,
                summary,
                checked,
            })
        })
        .collect::<Result<_>>()?;

    let mut seen = std::collections::HashSet::new();
    let mut ids = Vec::new();
    let mut sums = Vec::new();
    for (r, &(i, _, _)) in results.iter().zip(&jobs) {
        if let Some(s) = r.summary {
            if seen.insert(i) {
                ids.push(test[i].id.clone());
                sums.push(s);
            }
        }
    }
    let segs = segment(&sums);
    let summaries = ids
        .into_iter()
        .zip(sums)
        .zip(segs)
        .map(|((series_id, summary), segment)| SeriesSummary {
            series_id,
            summary,
            segment,
        })
        .collect();
    let focal_checks = results.iter().filter(|r| r.checked).count();
    let windows: Vec<WindowMetrics> = results.iter().map(|r| r.metrics.clone()).collect();
    let report = MetricReport::from_windows(&windows, &spec.band_ranges())?;
    Ok(ProtocolOutcome {
        report,
        windows,
        quantiles: results.into_iter().flat_map(|r| r.quantiles).collect(),
        summaries,
        focal_checks,
    })
}

/// Mean CRPS over forecast positions with absolute time index `>= first_t`.
pub fn mcrps_from(windows: &[WindowMetrics], first_t: usize) -> f64 {
    let mut tot = 0.0;
    let mut n = 0usize;
    for w in windows {
        for (h, c) in w.crps.iter().enumerate() {
            if w.origin + h >= first_t {
                tot += c;
                n += 1;
            }
        }
    }
    if n == 0 {
        f64::NAN
    } else {
        tot / n as f64
    }
}

pub fn write_window_csv<W: Write>(windows: &[WindowMetrics], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(["series_id", "origin", "steps", "mae", "rmse", "mcrps", "dtw", "peak_error", "auc_error"])?;
    for m in windows {
        let n = m.abs_err.len().max(1) as f64;
        w.write_record([
            m.series_id.clone(),
            m.origin.to_string(),
            m.abs_err.len().to_string(),
            (m.abs_err.iter().sum::<f64>() / n).to_string(),
            (m.sq_err.iter().sum::<f64>() / n).sqrt().to_string(),
            (m.crps.iter().sum::<f64>() / n).to_string(),
            m.dtw.to_string(),
            m.peak_error.to_string(),
            m.auc_error.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_quantile_csv<W: Write>(rows: &[QuantileRow], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(["series_id", "t", "u", "value"])?;
    for r in rows {
        w.write_record([r.series_id.clone(), r.t.to_string(), format!("{:.2}", r.u), r.value.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
