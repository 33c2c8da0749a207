//! Paired training and evaluation of the two reference-fusion variants.

use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::protocol::{run_protocol, train_model, PreparedPanel};
use crate::context::Fusion;
use crate::error::Result;
use crate::metrics::MetricReport;
use crate::model::{Model, ModelConfig, ModelParameters};
use crate::numerics::params::ParamGroup;
use crate::scalar::Scalar;

/// Hash of every parameter except the fusion projection.
pub fn non_fusion_hash<T: Scalar>(p: &ModelParameters<T>) -> u64 {
    let mut q = p.clone();
    q.context.fuse_w.fill(T::zero());
    q.context.fuse_b.iter_mut().for_each(|v| *v = T::zero());
    let mut h = DefaultHasher::new();
    for v in q.flatten() {
        h.write_u64(v.f64().to_bits());
    }
    h.finish()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationVariant {
    pub fusion: Fusion,
    pub label: String,
    pub init_hash: u64,
    pub final_loss: f64,
    pub report: MetricReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub variants: Vec<AblationVariant>,
    pub init_hashes_match: bool,
}

impl AblationReport {
    /// Rows per variant, MAE and MCRPS per horizon band.
    pub fn table(&self) -> String {
        let mut out = String::from("variant");
        if let Some(v) = self.variants.first() {
            for b in &v.report.bands {
                out.push_str(&format!(",MAE {0},MCRPS {0}", b.label));
            }
        }
        out.push('\n');
        for v in &self.variants {
            out.push_str(&v.label);
            for b in &v.report.bands {
                out.push_str(&format!(",{:.4},{:.4}", b.mae, b.mcrps));
            }
            out.push('\n');
        }
        out
    }
}

pub fn fusion_label(f: Fusion) -> &'static str {
    match f {
        Fusion::Multiplicative => "(A) Multiplicative scaling",
        Fusion::Concat => "(B) Concat + proj (ReLU)",
    }
}

/// Initial parameters of a variant: same seed, only the fusion differs.
pub fn variant_init(cfg: &ModelConfig, fusion: Fusion, descriptor_dim: usize, seed: u64) -> Result<Model<f64>> {
    Model::new(
        ModelConfig {
            fusion,
            descriptor_dim,
            ..cfg.clone()
        },
        seed,
    )
}

pub fn ablate_fusion(panel: &PreparedPanel, run: &RunConfig) -> Result<AblationReport> {
    let dim = panel.map.dim();
    let mut variants = Vec::new();
    for fusion in [Fusion::Multiplicative, Fusion::Concat] {
        let init_hash = non_fusion_hash(&variant_init(&run.model, fusion, dim, run.seed)?.params);
        let cfg = ModelConfig {
            fusion,
            ..run.model.clone()
        };
        let (model, log) = train_model::<f64>(&cfg, &run.train, &panel.train, run.seed)?;
        let out = run_protocol(&model, &panel.train, &panel.test, &run.protocol, run.seed)?;
        variants.push(AblationVariant {
            fusion,
            label: fusion_label(fusion).into(),
            init_hash,
            final_loss: log.losses.last().copied().unwrap_or(f64::NAN),
            report: out.report,
        });
    }
    let init_hashes_match = variants.windows(2).all(|w| w[0].init_hash == w[1].init_hash);
    Ok(AblationReport {
        variants,
        init_hashes_match,
    })
}
