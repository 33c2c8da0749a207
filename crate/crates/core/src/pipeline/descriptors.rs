//! Descriptor encoding: numeric columns are z-scored with mean imputation,
//! everything else is one-hot with an extra level for unknown values.

use serde::{Deserialize, Serialize};

use super::panel::SeriesRecord;
use crate::error::{CdlfError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ColumnEncoding {
    Numeric { name: String, mean: f64, std: f64 },
    Categorical { name: String, levels: Vec<String> },
}

impl ColumnEncoding {
    pub fn width(&self) -> usize {
        match self {
            ColumnEncoding::Numeric { .. } => 1,
            ColumnEncoding::Categorical { levels, .. } => levels.len() + 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DescriptorMap {
    pub columns: Vec<ColumnEncoding>,
}

impl DescriptorMap {
    /// Fits on `series` only; pass the training split.
    pub fn fit<'a>(columns: &[String], series: impl IntoIterator<Item = &'a SeriesRecord>) -> Self {
        let series: Vec<&SeriesRecord> = series.into_iter().collect();
        let columns = columns
            .iter()
            .map(|name| {
                let cells: Vec<&str> = series
                    .iter()
                    .filter_map(|s| s.fields.get(name).map(String::as_str))
                    .filter(|c| !c.is_empty())
                    .collect();
                let nums: Option<Vec<f64>> = cells.iter().map(|c| c.parse::<f64>().ok().filter(|v| v.is_finite())).collect();
                match nums {
                    Some(v) if !v.is_empty() => {
                        let n = v.len() as f64;
                        let mean = v.iter().sum::<f64>() / n;
                        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
                        let std = if var > 0.0 { var.sqrt() } else { 1.0 };
                        ColumnEncoding::Numeric { name: name.clone(), mean, std }
                    }
                    _ => {
                        let mut levels: Vec<String> = cells.iter().map(|c| c.to_string()).collect();
                        levels.sort();
                        levels.dedup();
                        ColumnEncoding::Categorical { name: name.clone(), levels }
                    }
                }
            })
            .collect();
        Self { columns }
    }

    pub fn dim(&self) -> usize {
        self.columns.iter().map(ColumnEncoding::width).sum()
    }

    pub fn encode(&self, s: &SeriesRecord) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.dim());
        for col in &self.columns {
            match col {
                ColumnEncoding::Numeric { name, mean, std } => {
                    let cell = s.fields.get(name).map(String::as_str).unwrap_or("");
                    let v = if cell.is_empty() {
                        *mean
                    } else {
                        cell.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                            CdlfError::Validation(format!("series '{}': non-numeric descriptor {name} = '{cell}'", s.id))
                        })?
                    };
                    out.push((v - mean) / std);
                }
                ColumnEncoding::Categorical { name, levels } => {
                    let cell = s.fields.get(name).map(String::as_str).unwrap_or("");
                    let hit = levels.iter().position(|l| l == cell).unwrap_or(levels.len());
                    out.extend((0..=levels.len()).map(|i| if i == hit { 1.0 } else { 0.0 }));
                }
            }
        }
        Ok(out)
    }
}
