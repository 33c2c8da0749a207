//! Seeded synthetic launch panels with descriptor-driven hump shapes.

use serde::{Deserialize, Serialize};

use super::panel::{PanelDataset, SeriesRecord};
use crate::numerics::rng::RngStream;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticFamily {
    /// Increments of a Bass adoption curve.
    #[default]
    Bass,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_series: usize,
    pub length: usize,
    pub family: SyntheticFamily,
    /// Log-scale standard deviation of the multiplicative noise.
    pub noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_series: 40,
            length: 24,
            family: SyntheticFamily::Bass,
            noise: 0.1,
        }
    }
}

/// Innovation and imitation coefficients per category.
const BASS_PQ: [(f64, f64); 3] = [(0.02, 0.6), (0.01, 0.35), (0.005, 0.25)];
const ACCESS_SPEEDUP: f64 = 1.3;
const BASE_PEAK: f64 = 100.0;

pub fn bass_cdf(t: f64, p: f64, q: f64) -> f64 {
    let e = (-(p + q) * t).exp();
    (1.0 - e) / (1.0 + (q / p) * e)
}

/// Noise-free increments scaled so the largest equals `peak`.
pub fn bass_increments(len: usize, p: f64, q: f64, peak: f64) -> Vec<f64> {
    let f: Vec<f64> = (1..=len)
        .map(|t| bass_cdf(t as f64, p, q) - bass_cdf(t as f64 - 1.0, p, q))
        .collect();
    let mx = f.iter().copied().fold(0.0, f64::max);
    f.into_iter().map(|v| peak * v / mx).collect()
}

/// Descriptors: `category` (c0..c2) sets the Bass coefficients, `access`
/// (0/1) speeds diffusion up, `scale` sets the noise-free peak height to
/// `100 * scale`.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> PanelDataset {
    let root = RngStream::new(seed);
    let series = (0..spec.n_series)
        .map(|i| {
            let mut rng = root.substream(i as u64);
            let cat = rng.int_inclusive(0, BASS_PQ.len() - 1);
            let access = rng.uniform::<f64>() < 0.5;
            let scale = rng.uniform_range(0.5, 3.0);
            let jitter = (0.1 * rng.gaussian::<f64>()).exp();
            let speed = if access { ACCESS_SPEEDUP } else { 1.0 } * jitter;
            let (p, q) = BASS_PQ[cat];
            let base = match spec.family {
                SyntheticFamily::Bass => bass_increments(spec.length, p * speed, q * speed, BASE_PEAK * scale),
            };
            let values = base
                .into_iter()
                .map(|v| v * (spec.noise * rng.gaussian::<f64>()).exp())
                .collect();
            let mut s = SeriesRecord::new(format!("syn{i:04}"), values);
            s.fields.insert("category".into(), format!("c{cat}"));
            s.fields.insert("scale".into(), format!("{scale:?}"));
            s.fields.insert("access".into(), if access { "1" } else { "0" }.into());
            s
        })
        .collect();
    PanelDataset {
        series,
        descriptor_columns: vec!["category".into(), "scale".into(), "access".into()],
    }
}
