//! Scale and increment transforms with stored inverses, and episode
//! segmentation.

use log::warn;
use serde::{Deserialize, Serialize};

use super::panel::{PanelDataset, SeriesRecord};
use crate::error::{CdlfError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum InverseStep {
    /// Multiply by the stored maximum.
    Scale { max: f64 },
    /// `exp(x) - 1`, giving raw increments.
    LogIncrement,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    None,
    #[default]
    MaxNormalize,
    LogIncrement,
}

pub fn invert_path(steps: &[InverseStep], path: &[f64]) -> Vec<f64> {
    let mut out = path.to_vec();
    for s in steps.iter().rev() {
        match *s {
            InverseStep::Scale { max } => out.iter_mut().for_each(|v| *v *= max),
            InverseStep::LogIncrement => out.iter_mut().for_each(|v| *v = v.exp_m1()),
        }
    }
    out
}

/// Divides each series by its own maximum and re-indexes time from launch
/// (`t = 1` at the first observation). Series whose maximum is not positive
/// are dropped.
pub fn normalize_max_align(ds: &PanelDataset) -> PanelDataset {
    let mut out = PanelDataset {
        series: Vec::with_capacity(ds.len()),
        descriptor_columns: ds.descriptor_columns.clone(),
    };
    for s in &ds.series {
        let max = s.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !(max > 0.0) {
            warn!("series '{}' has no positive value, excluded", s.id);
            continue;
        }
        let mut r = align(s);
        r.values.iter_mut().for_each(|v| *v /= max);
        r.inverse.push(InverseStep::Scale { max });
        out.series.push(r);
    }
    out
}

fn align(s: &SeriesRecord) -> SeriesRecord {
    let t0 = s.launch_time().unwrap_or(1);
    SeriesRecord {
        times: s.times.iter().map(|t| t - t0 + 1).collect(),
        ..s.clone()
    }
}

/// `x_t = log(1 + Δ_t)` of the increments of a cumulative series, with
/// `Δ_1 = 0`; negative increments become zero.
pub fn log_increment_transform(ds: &PanelDataset) -> Result<PanelDataset> {
    let mut out = PanelDataset {
        series: Vec::with_capacity(ds.len()),
        descriptor_columns: ds.descriptor_columns.clone(),
    };
    for s in &ds.series {
        if let Some((i, v)) = s.values.iter().enumerate().find(|(_, v)| **v < 0.0) {
            return Err(CdlfError::Validation(format!(
                "series '{}' has negative cumulative value {v} at t = {}",
                s.id, s.times[i]
            )));
        }
        let mut r = s.clone();
        let mut floored = 0;
        for (i, x) in r.values.iter_mut().enumerate() {
            let d = if i == 0 { 0.0 } else { s.values[i] - s.values[i - 1] };
            if d < 0.0 {
                floored += 1;
            }
            *x = d.max(0.0).ln_1p();
        }
        if floored > 0 {
            warn!("series '{}': {floored} negative increments floored at zero", s.id);
        }
        r.inverse.push(InverseStep::LogIncrement);
        out.series.push(r);
    }
    Ok(out)
}

/// Splits every series at gaps in its time index and keeps the pieces of
/// length at least `min_len`, each re-indexed from `t = 1`. Pieces are
/// named `<id>#<k>` with `k` counting from 0 over all pieces.
pub fn segment_episodes(ds: &PanelDataset, min_len: usize) -> PanelDataset {
    let mut out = PanelDataset {
        series: Vec::new(),
        descriptor_columns: ds.descriptor_columns.clone(),
    };
    for s in &ds.series {
        let mut start = 0;
        let mut k = 0;
        for i in 1..=s.len() {
            if i == s.len() || s.times[i] != s.times[i - 1] + 1 {
                if i - start >= min_len.max(1) {
                    let piece = SeriesRecord {
                        id: format!("{}#{k}", s.id),
                        times: s.times[start..i].to_vec(),
                        values: s.values[start..i].to_vec(),
                        fields: s.fields.clone(),
                        inverse: s.inverse.clone(),
                    };
                    out.series.push(align(&piece));
                }
                k += 1;
                start = i;
            }
        }
    }
    if out.is_empty() && !ds.is_empty() {
        warn!("no episode reaches length {min_len}");
    }
    out
}

pub fn apply_transform(ds: &PanelDataset, kind: TransformKind) -> Result<PanelDataset> {
    match kind {
        TransformKind::None => Ok(ds.clone()),
        TransformKind::MaxNormalize => Ok(normalize_max_align(ds)),
        TransformKind::LogIncrement => log_increment_transform(ds),
    }
}
