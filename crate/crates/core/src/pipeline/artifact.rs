//! Versioned JSON model artifact.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::descriptors::DescriptorMap;
use super::transforms::TransformKind;
use crate::error::{CdlfError, Result};
use crate::model::Model;

pub const ARTIFACT_FORMAT: &str = "cdlf-model";
pub const ARTIFACT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub transform: TransformKind,
    pub descriptor_columns: Vec<String>,
    pub descriptor_map: DescriptorMap,
    /// Series the model was trained on; they form the reference library.
    pub train_ids: Vec<String>,
    pub model: Model<f64>,
}

impl ModelArtifact {
    pub fn new(
        model: Model<f64>,
        descriptor_columns: Vec<String>,
        descriptor_map: DescriptorMap,
        transform: TransformKind,
        train_ids: Vec<String>,
        seed: u64,
    ) -> Self {
        Self {
            format: ARTIFACT_FORMAT.into(),
            version: ARTIFACT_VERSION,
            seed,
            transform,
            descriptor_columns,
            descriptor_map,
            train_ids,
            model,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path.as_ref())?;
        serde_json::to_writer(std::io::BufWriter::new(f), self)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(text)?;
        let format = v.get("format").and_then(|f| f.as_str()).unwrap_or("");
        let version = v.get("version").and_then(|f| f.as_u64()).unwrap_or(0);
        if format != ARTIFACT_FORMAT || version != ARTIFACT_VERSION as u64 {
            return Err(CdlfError::Validation(format!(
                "unsupported artifact '{format}' version {version}; expected '{ARTIFACT_FORMAT}' version {ARTIFACT_VERSION}"
            )));
        }
        let a: Self = serde_json::from_value(v)?;
        a.model.config.validate()?;
        if a.descriptor_map.dim() != a.model.config.descriptor_dim {
            return Err(CdlfError::Validation("descriptor map width does not match the model".into()));
        }
        Ok(a)
    }
}
