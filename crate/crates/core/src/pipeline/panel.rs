//! Panel CSV ingestion and serialization.
//!
//! Schema: `series_id,t,value[,desc_*...]`. Descriptor cells repeat on every
//! row of a series and must agree; an empty cell means missing.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::transforms::InverseStep;
use crate::error::{CdlfError, Result};

pub const DESCRIPTOR_PREFIX: &str = "desc_";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesRecord {
    pub id: String,
    /// Time index of each observation, strictly increasing.
    pub times: Vec<i64>,
    pub values: Vec<f64>,
    /// Raw descriptor cells keyed by column name (without the prefix).
    pub fields: BTreeMap<String, String>,
    /// Inverse steps, applied last to first when mapping back to raw units.
    pub inverse: Vec<InverseStep>,
}

impl SeriesRecord {
    pub fn new(id: impl Into<String>, values: Vec<f64>) -> Self {
        let times = (1..=values.len() as i64).collect();
        Self {
            id: id.into(),
            times,
            values,
            fields: BTreeMap::new(),
            inverse: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn launch_time(&self) -> Option<i64> {
        self.times.first().copied()
    }

    /// Maps a path on the working scale back to raw units.
    pub fn invert(&self, path: &[f64]) -> Vec<f64> {
        super::transforms::invert_path(&self.inverse, path)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PanelDataset {
    pub series: Vec<SeriesRecord>,
    /// Descriptor column names (without the prefix), in file order.
    pub descriptor_columns: Vec<String>,
}

impl PanelDataset {
    pub fn len(&self) -> usize {
        self.series.len()
    }

    pub fn is_empty(&self) -> bool {
        self.series.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&SeriesRecord> {
        self.series.iter().find(|s| s.id == id)
    }
}

pub fn load_panel(path: impl AsRef<Path>) -> Result<PanelDataset> {
    let f = std::fs::File::open(path.as_ref())?;
    read_panel(f)
}

/// Parses a panel; series keep first-appearance order and observations
/// are sorted by `t`.
pub fn read_panel<R: Read>(input: R) -> Result<PanelDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let missing: Vec<&str> = ["series_id", "t", "value"]
        .into_iter()
        .filter(|c| col(c).is_none())
        .collect();
    if !missing.is_empty() {
        return Err(CdlfError::Validation(format!("missing columns: {}", missing.join(", "))));
    }
    let (ci, ct, cv) = (col("series_id").unwrap(), col("t").unwrap(), col("value").unwrap());
    let desc: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter_map(|(i, h)| h.strip_prefix(DESCRIPTOR_PREFIX).map(|n| (i, n.to_string())))
        .collect();
    if let Some((_, h)) = headers
        .iter()
        .enumerate()
        .find(|(i, h)| ![ci, ct, cv].contains(i) && !h.starts_with(DESCRIPTOR_PREFIX))
    {
        return Err(CdlfError::Validation(format!("unexpected column '{h}'")));
    }

    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, Vec<(i64, f64, u64)>> = HashMap::new();
    let mut fields: HashMap<String, (BTreeMap<String, String>, u64)> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        // header is line 1
        let line = rec.position().map_or(0, |p| p.line());
        let id = rec.get(ci).unwrap_or("").to_string();
        if id.is_empty() {
            return Err(CdlfError::Validation(format!("row {line}: empty series_id")));
        }
        let t: i64 = rec
            .get(ct)
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|_| CdlfError::Validation(format!("row {line}: non-integer t '{}'", rec.get(ct).unwrap_or(""))))?;
        let raw = rec.get(cv).unwrap_or("").trim();
        let v: f64 = raw
            .parse()
            .ok()
            .filter(|x: &f64| x.is_finite())
            .ok_or_else(|| CdlfError::Validation(format!("row {line}: non-numeric value '{raw}'")))?;
        let row_fields: BTreeMap<String, String> = desc
            .iter()
            .map(|(i, n)| (n.clone(), rec.get(*i).unwrap_or("").trim().to_string()))
            .collect();
        match fields.get(&id) {
            Some((f, first)) if *f != row_fields => {
                return Err(CdlfError::Validation(format!(
                    "row {line}: descriptors of series '{id}' differ from row {first}"
                )));
            }
            Some(_) => {}
            None => {
                fields.insert(id.clone(), (row_fields, line));
                order.push(id.clone());
            }
        }
        rows.entry(id).or_default().push((t, v, line));
    }

    let mut series = Vec::with_capacity(order.len());
    for id in order {
        let mut obs = rows.remove(&id).unwrap_or_default();
        obs.sort_by_key(|o| o.0);
        for w in obs.windows(2) {
            if w[0].0 == w[1].0 {
                let (a, b) = (w[0].2.min(w[1].2), w[0].2.max(w[1].2));
                return Err(CdlfError::Validation(format!(
                    "row {b}: duplicate (series_id, t) = ({id}, {}) first seen at row {a}",
                    w[0].0
                )));
            }
        }
        let (f, _) = fields.remove(&id).unwrap_or_default();
        series.push(SeriesRecord {
            id,
            times: obs.iter().map(|o| o.0).collect(),
            values: obs.iter().map(|o| o.1).collect(),
            fields: f,
            inverse: Vec::new(),
        });
    }
    Ok(PanelDataset {
        series,
        descriptor_columns: desc.into_iter().map(|(_, n)| n).collect(),
    })
}

pub fn write_panel<W: Write>(ds: &PanelDataset, out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    let mut header = vec!["series_id".to_string(), "t".into(), "value".into()];
    header.extend(ds.descriptor_columns.iter().map(|c| format!("{DESCRIPTOR_PREFIX}{c}")));
    w.write_record(&header)?;
    for s in &ds.series {
        for (t, v) in s.times.iter().zip(&s.values) {
            let mut rec = vec![s.id.clone(), t.to_string(), format_value(*v)];
            rec.extend(
                ds.descriptor_columns
                    .iter()
                    .map(|c| s.fields.get(c).cloned().unwrap_or_default()),
            );
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_panel(ds: &PanelDataset, path: impl AsRef<Path>) -> Result<()> {
    let f = std::fs::File::create(path.as_ref())?;
    write_panel(ds, std::io::BufWriter::new(f))
}

/// Shortest representation that parses back to the same `f64`.
fn format_value(v: f64) -> String {
    format!("{v:?}")
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "series_id,t,value,desc_kind,desc_size\na,1,0.5,x,1.5\na,2,1.0,x,1.5\nb,1,2,y,\n";

    #[test]
    fn two_series() {
        let ds = read_panel(MINIMAL.as_bytes()).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.descriptor_columns, vec!["kind", "size"]);
        assert_eq!(ds.series[0].values, vec![0.5, 1.0]);
        assert_eq!(ds.series[1].fields["size"], "");
    }

    #[test]
    fn unordered_rows_are_sorted() {
        let ds = read_panel("series_id,t,value\na,3,3\na,1,1\na,2,2\n".as_bytes()).unwrap();
        assert_eq!(ds.series[0].times, vec![1, 2, 3]);
        assert_eq!(ds.series[0].values, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn duplicate_rows_name_the_row() {
        let err = read_panel("series_id,t,value\na,1,1\na,2,2\na,1,3\n".as_bytes()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("row 4") && msg.contains("row 2"), "{msg}");
    }

    #[test]
    fn validation_errors() {
        let e = read_panel("series_id,value\na,1\n".as_bytes()).unwrap_err().to_string();
        assert!(e.contains("missing columns: t"), "{e}");
        let e = read_panel("series_id,t,value\na,1,abc\n".as_bytes()).unwrap_err().to_string();
        assert!(e.contains("row 2") && e.contains("non-numeric"), "{e}");
        let e = read_panel("series_id,t,value\na,x,1\n".as_bytes()).unwrap_err().to_string();
        assert!(e.contains("row 2"), "{e}");
        let e = read_panel("series_id,t,value,desc_k\na,1,1,u\na,2,1,v\n".as_bytes())
            .unwrap_err()
            .to_string();
        assert!(e.contains("row 3") && e.contains("differ"), "{e}");
        assert!(read_panel("series_id,t,value,extra\na,1,1,2\n".as_bytes()).is_err());
    }

    #[test]
    fn round_trip() {
        let mut ds = read_panel(MINIMAL.as_bytes()).unwrap();
        ds.series[0].values[1] = 0.1 + 0.2;
        let mut buf = Vec::new();
        write_panel(&ds, &mut buf).unwrap();
        let back = read_panel(buf.as_slice()).unwrap();
        assert_eq!(back, ds);
        assert!(!buf.contains(&b'\r'));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("panel.csv");
        let ds = read_panel(MINIMAL.as_bytes()).unwrap();
        save_panel(&ds, &p).unwrap();
        assert_eq!(load_panel(&p).unwrap(), ds);
    }
}
