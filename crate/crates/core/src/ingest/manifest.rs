//! JSON dataset manifests pointing at per-channel CSV columns.
//!
//! ```json
//! {
//!   "name": "pamap2-subset",
//!   "target_rate": 100.0,
//!   "window_length": 500,
//!   "classes": ["walk", "run"],
//!   "recordings": [{
//!     "id": "subject101",
//!     "channels": [{
//!       "metadata": {"body_part": "Chest", "sensor": "acc", "axis": "x", "native_rate": 100.0},
//!       "file": "subject101.csv", "column": "chest_acc_x"
//!     }],
//!     "label": {"file": "subject101.csv", "column": "activity"}
//!   }]
//! }
//! ```
//!
//! Relative paths resolve against the manifest's directory. Label cells may be
//! class names (looked up in `classes`) or integer ids.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{resample, window_series, ChannelMetadata, SensorWindow, DEFAULT_RATE_HZ, DEFAULT_WINDOW};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSource {
    pub metadata: ChannelMetadata,
    pub file: PathBuf,
    pub column: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelSource {
    pub file: PathBuf,
    pub column: String,
    /// Rate of the label column; defaults to the first channel's native rate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Recording {
    pub id: String,
    pub channels: Vec<ChannelSource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<LabelSource>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    #[serde(default = "default_rate")]
    pub target_rate: f64,
    #[serde(default = "default_window")]
    pub window_length: usize,
    /// Defaults to `window_length` (non-overlapping windows).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
    #[serde(default)]
    pub classes: Vec<String>,
    pub recordings: Vec<Recording>,
}

fn default_rate() -> f64 {
    DEFAULT_RATE_HZ
}

fn default_window() -> usize {
    DEFAULT_WINDOW
}

/// Parses and validates a manifest; every referenced file must exist.
pub fn load_manifest(path: &Path) -> Result<(DatasetManifest, PathBuf)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let base = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    manifest.validate(&base)?;
    Ok((manifest, base))
}

impl DatasetManifest {
    pub fn stride(&self) -> usize {
        self.stride.unwrap_or(self.window_length)
    }

    pub fn validate(&self, base: &Path) -> Result<()> {
        if self.stride() == 0 || self.window_length == 0 {
            return Err(Error::Data(format!(
                "manifest `{}`: window_length and stride must be positive",
                self.name
            )));
        }
        if !(self.target_rate > 0.0) {
            return Err(Error::Data(format!(
                "manifest `{}`: target_rate must be positive",
                self.name
            )));
        }
        if self.recordings.is_empty() {
            return Err(Error::Data(format!("manifest `{}` has no recordings", self.name)));
        }
        for rec in &self.recordings {
            if rec.channels.is_empty() {
                return Err(Error::Data(format!(
                    "recording `{}` lists no channels",
                    rec.id
                )));
            }
            let files = rec
                .channels
                .iter()
                .map(|c| &c.file)
                .chain(rec.label.as_ref().map(|l| &l.file));
            for file in files {
                let full = base.join(file);
                if !full.is_file() {
                    return Err(Error::Data(format!(
                        "recording `{}` references missing file {}",
                        rec.id,
                        full.display()
                    )));
                }
            }
            for c in &rec.channels {
                c.metadata
                    .validate()
                    .map_err(|e| Error::Data(format!("recording `{}`: {e}", rec.id)))?;
            }
        }
        Ok(())
    }

    /// Reads, resamples and windows every recording.
    pub fn load_windows<S: Scalar>(&self, base: &Path) -> Result<Vec<SensorWindow<S>>> {
        let mut tables: HashMap<PathBuf, CsvTable> = HashMap::new();
        let mut out = Vec::new();
        for rec in &self.recordings {
            let mut series = Vec::with_capacity(rec.channels.len());
            for ch in &rec.channels {
                let table = table_for(&mut tables, base, &ch.file)?;
                let raw: Vec<f64> = table
                    .column(&ch.column)?
                    .iter()
                    .map(|cell| {
                        cell.trim().parse::<f64>().map_err(|_| {
                            Error::Data(format!(
                                "{}: non-numeric value `{cell}` in column `{}`",
                                ch.file.display(),
                                ch.column
                            ))
                        })
                    })
                    .collect::<Result<_>>()?;
                if raw.len() < 2 {
                    series.push(Vec::new());
                    continue;
                }
                series.push(resample(&raw, ch.metadata.native_rate, self.target_rate)?);
            }
            let len = series.iter().map(Vec::len).min().unwrap_or(0);
            let mut samples = Array2::<S>::zeros((len, series.len()));
            for (c, s) in series.iter().enumerate() {
                for (t, &v) in s.iter().take(len).enumerate() {
                    samples[[t, c]] = S::of(v);
                }
            }
            let labels = match &rec.label {
                Some(src) => {
                    let table = table_for(&mut tables, base, &src.file)?;
                    let raw = table
                        .column(&src.column)?
                        .iter()
                        .map(|cell| self.parse_label(cell))
                        .collect::<Result<Vec<_>>>()?;
                    let rate = src.rate.unwrap_or(rec.channels[0].metadata.native_rate);
                    Some(nearest_resample(&raw, rate, self.target_rate, len))
                }
                None => None,
            };
            let metadata: Vec<ChannelMetadata> =
                rec.channels.iter().map(|c| c.metadata.clone()).collect();
            out.extend(window_series(
                samples.view(),
                &metadata,
                labels.as_deref(),
                self.window_length,
                self.stride(),
                &format!("{}:{}", self.name, rec.id),
            )?);
        }
        Ok(out)
    }

    fn parse_label(&self, cell: &str) -> Result<usize> {
        let cell = cell.trim();
        if let Some(i) = self.classes.iter().position(|c| c == cell) {
            return Ok(i);
        }
        cell.parse::<usize>()
            .map_err(|_| Error::Data(format!("unknown activity label `{cell}`")))
    }
}

fn nearest_resample(labels: &[usize], src: f64, dst: f64, len: usize) -> Vec<usize> {
    if labels.is_empty() {
        return Vec::new();
    }
    (0..len)
        .map(|i| {
            let j = ((i as f64) * src / dst).round() as usize;
            labels[j.min(labels.len() - 1)]
        })
        .collect()
}

struct CsvTable {
    path: PathBuf,
    header: Vec<String>,
    rows: Vec<csv::StringRecord>,
}

impl CsvTable {
    fn read(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let header = reader.headers()?.iter().map(str::to_string).collect();
        let rows = reader.records().collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self {
            path: path.to_path_buf(),
            header,
            rows,
        })
    }

    fn column(&self, name: &str) -> Result<Vec<&str>> {
        let idx = self.header.iter().position(|h| h == name).ok_or_else(|| {
            Error::Data(format!("{}: no column named `{name}`", self.path.display()))
        })?;
        self.rows
            .iter()
            .map(|r| {
                r.get(idx).ok_or_else(|| {
                    Error::Data(format!("{}: short row in column `{name}`", self.path.display()))
                })
            })
            .collect()
    }
}

fn table_for<'a>(
    tables: &'a mut HashMap<PathBuf, CsvTable>,
    base: &Path,
    file: &Path,
) -> Result<&'a CsvTable> {
    let full = base.join(file);
    if !tables.contains_key(&full) {
        let table = CsvTable::read(&full)?;
        tables.insert(full.clone(), table);
    }
    Ok(&tables[&full])
}
