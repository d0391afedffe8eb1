//! Deterministic synthetic activity data.
//!
//! Each class assigns one waveform generator per channel. Every window starts
//! at phase zero, so a zero-noise generator produces a finite set of segment
//! shapes that tests can enumerate exactly.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::manifest::{ChannelSource, DatasetManifest, LabelSource, Recording};
use super::{ChannelMetadata, SensorWindow, DEFAULT_RATE_HZ, DEFAULT_WINDOW};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Waveform {
    Sine,
    Square,
    Sawtooth,
    Constant,
}

impl Waveform {
    pub fn parse(id: &str) -> Result<Self> {
        match id {
            "sine" => Ok(Self::Sine),
            "square" => Ok(Self::Square),
            "sawtooth" => Ok(Self::Sawtooth),
            "constant" => Ok(Self::Constant),
            other => Err(Error::InvalidInput(format!(
                "unknown waveform generator `{other}` (expected sine, square, sawtooth or constant)"
            ))),
        }
    }
}

/// One channel's generator. `constant` emits `offset + amplitude`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub generator: String,
    pub amplitude: f64,
    #[serde(default)]
    pub frequency: f64,
    #[serde(default)]
    pub offset: f64,
    /// Per-generator noise sigma; falls back to [`SyntheticSpec::noise`].
    #[serde(default)]
    pub noise: Option<f64>,
}

impl GeneratorSpec {
    pub fn new(generator: &str, amplitude: f64, frequency: f64) -> Self {
        Self {
            generator: generator.to_string(),
            amplitude,
            frequency,
            offset: 0.0,
            noise: None,
        }
    }

    /// Noise-free value at sample `n`.
    pub fn clean_value(&self, waveform: Waveform, n: usize, rate: f64) -> f64 {
        let cycles = n as f64 * self.frequency / rate;
        let phase = cycles - cycles.floor();
        let shape = match waveform {
            Waveform::Sine => (2.0 * PI * cycles).sin(),
            Waveform::Square => {
                if phase < 0.5 {
                    1.0
                } else {
                    -1.0
                }
            }
            Waveform::Sawtooth => 2.0 * phase - 1.0,
            Waveform::Constant => 1.0,
        };
        self.offset + self.amplitude * shape
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub name: String,
    pub channels: Vec<GeneratorSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: Vec<ClassSpec>,
    pub channels: Vec<ChannelMetadata>,
    pub windows_per_class: usize,
    #[serde(default = "default_window")]
    pub window_length: usize,
    #[serde(default = "default_rate")]
    pub sample_rate: f64,
    #[serde(default)]
    pub noise: f64,
    pub seed: u64,
}

fn default_window() -> usize {
    DEFAULT_WINDOW
}

fn default_rate() -> f64 {
    DEFAULT_RATE_HZ
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "synthetic spec needs at least 2 classes, got {}",
                self.classes.len()
            )));
        }
        if self.channels.is_empty() {
            return Err(Error::InvalidInput("synthetic spec has no channels".into()));
        }
        for ch in &self.channels {
            ch.validate()?;
        }
        if self.window_length == 0 || !(self.sample_rate > 0.0) {
            return Err(Error::InvalidInput(
                "window_length and sample_rate must be positive".into(),
            ));
        }
        for class in &self.classes {
            if class.channels.len() != self.channels.len() {
                return Err(Error::InvalidInput(format!(
                    "class `{}` defines {} generators for {} channels",
                    class.name,
                    class.channels.len(),
                    self.channels.len()
                )));
            }
            for g in &class.channels {
                Waveform::parse(&g.generator)?;
                let sigma = g.noise.unwrap_or(self.noise);
                if !(sigma >= 0.0 && sigma.is_finite()) {
                    return Err(Error::InvalidInput(format!("noise sigma {sigma} is invalid")));
                }
            }
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    /// Same spec with every noise sigma forced to zero.
    pub fn noiseless(&self) -> Self {
        let mut spec = self.clone();
        spec.noise = 0.0;
        for class in &mut spec.classes {
            for g in &mut class.channels {
                g.noise = Some(0.0);
            }
        }
        spec
    }
}

/// Windows ordered class by class; bit-identical for a fixed seed.
pub fn generate_synthetic<S: Scalar>(spec: &SyntheticSpec) -> Result<Vec<SensorWindow<S>>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let t = spec.window_length;
    let mut out = Vec::with_capacity(spec.classes.len() * spec.windows_per_class);
    for (label, class) in spec.classes.iter().enumerate() {
        let generators: Vec<(Waveform, &GeneratorSpec, Option<Normal<f64>>)> = class
            .channels
            .iter()
            .map(|g| {
                let waveform = Waveform::parse(&g.generator)?;
                let sigma = g.noise.unwrap_or(spec.noise);
                let noise = (sigma > 0.0)
                    .then(|| Normal::new(0.0, sigma).map_err(|e| Error::InvalidInput(e.to_string())))
                    .transpose()?;
                Ok((waveform, g, noise))
            })
            .collect::<Result<_>>()?;
        for w in 0..spec.windows_per_class {
            let mut samples = Array2::<S>::zeros((t, generators.len()));
            for n in 0..t {
                for (c, (waveform, g, noise)) in generators.iter().enumerate() {
                    let mut v = g.clean_value(*waveform, n, spec.sample_rate);
                    if let Some(dist) = noise {
                        v += dist.sample(&mut rng);
                    }
                    samples[[n, c]] = S::of(v);
                }
            }
            out.push(SensorWindow::new(
                samples,
                spec.channels.clone(),
                Some(label),
                format!("synthetic:{}:{w}", class.name),
            )?);
        }
    }
    Ok(out)
}

/// Writes one CSV recording per class plus a `manifest.json` that reloads to
/// the same windows. Returns the manifest path.
pub fn write_synthetic_dataset(spec: &SyntheticSpec, out_dir: &Path) -> Result<PathBuf> {
    let windows = generate_synthetic::<f64>(spec)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let columns: Vec<String> = (0..spec.channels.len()).map(|c| format!("ch{c}")).collect();
    let mut recordings = Vec::new();
    for (label, class) in spec.classes.iter().enumerate() {
        let file = format!("{}.csv", sanitize(&class.name));
        let path = out_dir.join(&file);
        let mut writer = csv::Writer::from_path(&path)?;
        let mut header = columns.clone();
        header.push("label".into());
        writer.write_record(&header)?;
        for w in windows.iter().filter(|w| w.label == Some(label)) {
            for row in w.samples.rows() {
                let mut record: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
                record.push(class.name.clone());
                writer.write_record(&record)?;
            }
        }
        writer.flush().map_err(|e| Error::io(&path, e))?;
        recordings.push(Recording {
            id: class.name.clone(),
            channels: spec
                .channels
                .iter()
                .zip(&columns)
                .map(|(meta, col)| ChannelSource {
                    metadata: meta.clone(),
                    file: file.clone().into(),
                    column: col.clone(),
                })
                .collect(),
            label: Some(LabelSource {
                file: file.clone().into(),
                column: "label".into(),
                rate: None,
            }),
        });
    }
    let manifest = DatasetManifest {
        name: "synthetic".into(),
        target_rate: spec.sample_rate,
        window_length: spec.window_length,
        stride: None,
        classes: spec.class_names(),
        recordings,
    };
    let manifest_path = out_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest_path)
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}
