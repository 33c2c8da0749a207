//! Orchestration shared by the command-line entry points.

use super::artifact::ModelArtifact;
use super::config::{DataConfig, StabilityRunConfig};
use super::panel::PanelDataset;
use super::protocol::{prepare_series, to_library, PreparedPanel, PreparedSeries};
use super::transforms::{apply_transform, segment_episodes};
use crate::error::{CdlfError, Result};
use crate::model::Model;
use crate::numerics::rng::RngStream;
use crate::scalar::Scalar;
use crate::stability::{collect_model_states, estimate_lp_proxy, model_stability_report, StabilityReport};

/// Episode segmentation (when enabled) followed by the configured transform.
pub fn working_panel(ds: &PanelDataset, data: &DataConfig) -> Result<PanelDataset> {
    let seg = if data.min_episode_len > 0 {
        segment_episodes(ds, data.min_episode_len)
    } else {
        ds.clone()
    };
    apply_transform(&seg, data.transform)
}

impl ModelArtifact {
    /// Re-creates the split recorded in the artifact: its training series
    /// form the library and every other series is a test series.
    pub fn split_panel(&self, ds: &PanelDataset) -> Result<PreparedPanel> {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for s in &ds.series {
            let p = prepare_series(s, &self.descriptor_map)?;
            if self.train_ids.contains(&s.id) {
                train.push(p);
            } else {
                test.push(p);
            }
        }
        if train.len() != self.train_ids.len() {
            return Err(CdlfError::Validation(format!(
                "panel holds {} of the {} training series recorded in the model",
                train.len(),
                self.train_ids.len()
            )));
        }
        Ok(PreparedPanel {
            train,
            test,
            map: self.descriptor_map.clone(),
        })
    }
}

/// Stability report of a trained transition measured on `series`.
pub fn stability_check<T: Scalar>(
    model: &Model<T>,
    series: &[PreparedSeries],
    cfg: &StabilityRunConfig,
    seed: u64,
) -> Result<StabilityReport> {
    let lib = to_library::<T>(series);
    if lib.len() < 2 {
        return Err(CdlfError::InvalidArgument("stability check needs at least two series".into()));
    }
    let root = RngStream::new(seed).substream(0x57ab);
    let idx: Vec<usize> = (0..lib.len().min(cfg.series.max(1))).collect();
    let groups = collect_model_states(model, &lib, &idx, cfg.rollouts, &root.substream(0))?;
    let (lp, proxy) = if cfg.estimate_lp {
        (estimate_lp_proxy(model, &groups, cfg.lp_probes, cfg.lp_samples, &root.substream(1))?, true)
    } else {
        (cfg.lp, false)
    };
    model_stability_report(model, &groups, lp, proxy, cfg.gate_widening)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::pipeline::protocol::prepare;
    use crate::pipeline::synthetic::{generate_synthetic, SyntheticSpec};
    use crate::pipeline::transforms::TransformKind;

    #[test]
    fn artifact_split_matches_original() {
        let raw = generate_synthetic(&SyntheticSpec { n_series: 10, length: 10, ..Default::default() }, 1);
        let ds = working_panel(&raw, &DataConfig::default()).unwrap();
        let p = prepare(&ds, 0.2, 3).unwrap();
        let cfg = ModelConfig { descriptor_dim: p.map.dim(), ..Default::default() };
        let a = ModelArtifact::new(
            Model::new(cfg, 1).unwrap(),
            ds.descriptor_columns.clone(),
            p.map.clone(),
            TransformKind::MaxNormalize,
            p.train.iter().map(|s| s.id.clone()).collect(),
            3,
        );
        assert_eq!(a.split_panel(&ds).unwrap(), p);
        let mut short = ds.clone();
        short.series.retain(|s| s.id != p.train[0].id);
        assert!(a.split_panel(&short).is_err());
    }

    #[test]
    fn stability_check_reports_bounds() {
        let raw = generate_synthetic(&SyntheticSpec { n_series: 4, length: 8, ..Default::default() }, 2);
        let ds = working_panel(&raw, &DataConfig::default()).unwrap();
        let p = prepare(&ds, 0.25, 1).unwrap();
        let cfg = ModelConfig { descriptor_dim: p.map.dim(), hidden_dim: 4, ..Default::default() };
        let m = Model::<f64>::new(cfg, 2).unwrap();
        let sc = StabilityRunConfig { rollouts: 1, ..Default::default() };
        let r = stability_check(&m, &p.train, &sc, 0).unwrap();
        assert!(r.rho_bar >= r.rho_hat && r.lx_bar >= r.lx_hat);
        assert!(!r.lp_is_proxy);
    }
}
