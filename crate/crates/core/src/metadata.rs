//! Sensor metadata: canonical descriptors, text-embedding providers and the
//! linear adapter into model space.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use ndarray::{Array1, Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ingest::ChannelMetadata;
use crate::scalar::Scalar;

pub const DEFAULT_META_DIM: usize = 768;
pub const ENDPOINT_ENV: &str = "MOPFORMER_EMBEDDING_ENDPOINT";
pub const API_KEY_ENV: &str = "MOPFORMER_EMBEDDING_API_KEY";

/// `body_part: <B>, sensor: <S>, axis: <A>`
pub fn canonical_descriptor(meta: &ChannelMetadata) -> String {
    format!(
        "body_part: {}, sensor: {}, axis: {}",
        meta.body_part, meta.sensor, meta.axis
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetadataVector<S> {
    pub values: Array1<S>,
    pub descriptor: String,
    pub provider: &'static str,
}

pub trait MetadataProvider: Send + Sync {
    fn name(&self) -> &'static str;
    fn dim(&self) -> usize;
    fn embed_raw(&self, descriptor: &str) -> Result<Vec<f64>>;

    fn embed<S: Scalar>(&self, descriptor: &str) -> Result<MetadataVector<S>>
    where
        Self: Sized,
    {
        embed_with(self, descriptor)
    }
}

pub fn embed_with<S: Scalar>(
    provider: &dyn MetadataProvider,
    descriptor: &str,
) -> Result<MetadataVector<S>> {
    let raw = provider.embed_raw(descriptor)?;
    if raw.len() != provider.dim() {
        return Err(Error::Provider {
            provider: provider.name(),
            message: format!(
                "embedding for `{descriptor}` has {} values, expected {}",
                raw.len(),
                provider.dim()
            ),
        });
    }
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("metadata embedding for `{descriptor}`")));
    }
    Ok(MetadataVector {
        values: raw.into_iter().map(S::of).collect(),
        descriptor: descriptor.to_string(),
        provider: provider.name(),
    })
}

/// Offline provider: a seeded hash of the descriptor drives `dim` standard
/// normal draws, then the vector is L2-normalized.
#[derive(Debug, Clone)]
pub struct HashProvider {
    pub dim: usize,
    pub seed: u64,
}

impl MetadataProvider for HashProvider {
    fn name(&self) -> &'static str {
        "deterministic-hash"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_raw(&self, descriptor: &str) -> Result<Vec<f64>> {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(descriptor.as_bytes());
        let digest = hasher.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(key);
        let mut v: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(v)
    }
}

/// Replays a JSON cache of the form `{descriptor: [N floats]}`.
#[derive(Debug, Clone)]
pub struct FileLookupProvider {
    pub path: PathBuf,
    entries: BTreeMap<String, Vec<f64>>,
    dim: usize,
}

impl FileLookupProvider {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let entries: BTreeMap<String, Vec<f64>> = serde_json::from_str(&text)?;
        let dim = entries.values().next().map(Vec::len).unwrap_or(0);
        if let Some((k, v)) = entries.iter().find(|(_, v)| v.len() != dim) {
            return Err(Error::Provider {
                provider: "file-lookup",
                message: format!("entry `{k}` has {} values, expected {dim}", v.len()),
            });
        }
        Ok(Self {
            path: path.to_path_buf(),
            entries,
            dim,
        })
    }
}

impl MetadataProvider for FileLookupProvider {
    fn name(&self) -> &'static str {
        "file-lookup"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_raw(&self, descriptor: &str) -> Result<Vec<f64>> {
        self.entries.get(descriptor).cloned().ok_or_else(|| Error::Provider {
            provider: "file-lookup",
            message: format!(
                "descriptor `{descriptor}` not present in {}",
                self.path.display()
            ),
        })
    }
}

/// Thin client for a hosted text-embedding endpoint. Endpoint and key come
/// from [`ENDPOINT_ENV`] and [`API_KEY_ENV`]. Requests are serialized and
/// retried up to three times with exponential backoff; failures are returned,
/// never papered over with another provider.
pub struct RemoteProvider {
    endpoint: String,
    api_key: String,
    dim: usize,
    agent: Mutex<ureq::Agent>,
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    content: &'a str,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum EmbedResponse {
    Nested { embedding: EmbeddingValues },
    Flat { embedding: Vec<f64> },
}

#[derive(Deserialize)]
struct EmbeddingValues {
    values: Vec<f64>,
}

impl RemoteProvider {
    pub const ATTEMPTS: u32 = 3;

    pub fn from_env(dim: usize) -> Result<Self> {
        let var = |name: &str| {
            std::env::var(name).map_err(|_| Error::Provider {
                provider: "remote-service",
                message: format!("environment variable {name} is not set"),
            })
        };
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(30)))
            .build()
            .into();
        Ok(Self {
            endpoint: var(ENDPOINT_ENV)?,
            api_key: var(API_KEY_ENV)?,
            dim,
            agent: Mutex::new(agent),
        })
    }

    fn request(&self, agent: &ureq::Agent, descriptor: &str) -> std::result::Result<Vec<f64>, String> {
        let mut response = agent
            .post(&self.endpoint)
            .header("x-goog-api-key", &self.api_key)
            .send_json(EmbedRequest { content: descriptor })
            .map_err(|e| e.to_string())?;
        let parsed: EmbedResponse = response.body_mut().read_json().map_err(|e| e.to_string())?;
        Ok(match parsed {
            EmbedResponse::Nested { embedding } => embedding.values,
            EmbedResponse::Flat { embedding } => embedding,
        })
    }
}

impl MetadataProvider for RemoteProvider {
    fn name(&self) -> &'static str {
        "remote-service"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_raw(&self, descriptor: &str) -> Result<Vec<f64>> {
        let agent = self.agent.lock().expect("remote provider lock poisoned");
        let mut last = String::new();
        for attempt in 0..Self::ATTEMPTS {
            log::info!("remote embedding request for `{descriptor}` (attempt {})", attempt + 1);
            match self.request(&agent, descriptor) {
                Ok(v) => {
                    log::info!("remote embedding for `{descriptor}`: {} values", v.len());
                    return Ok(v);
                }
                Err(e) => {
                    log::warn!("remote embedding attempt {} failed: {e}", attempt + 1);
                    last = e;
                    if attempt + 1 < Self::ATTEMPTS {
                        std::thread::sleep(Duration::from_millis(250 << attempt));
                    }
                }
            }
        }
        Err(Error::Provider {
            provider: "remote-service",
            message: format!("{} attempts failed, last error: {last}", Self::ATTEMPTS),
        })
    }
}

/// Provider selection as written in run configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ProviderConfig {
    DeterministicHash {
        #[serde(default = "default_dim")]
        dim: usize,
        #[serde(default)]
        seed: u64,
    },
    FileLookup {
        path: PathBuf,
    },
    RemoteService {
        #[serde(default = "default_dim")]
        dim: usize,
    },
}

fn default_dim() -> usize {
    DEFAULT_META_DIM
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig::DeterministicHash {
            dim: DEFAULT_META_DIM,
            seed: 0,
        }
    }
}

impl ProviderConfig {
    pub fn build(&self) -> Result<Box<dyn MetadataProvider>> {
        Ok(match self {
            ProviderConfig::DeterministicHash { dim, seed } => Box::new(HashProvider {
                dim: *dim,
                seed: *seed,
            }),
            ProviderConfig::FileLookup { path } => Box::new(FileLookupProvider::load(path)?),
            ProviderConfig::RemoteService { dim } => Box::new(RemoteProvider::from_env(*dim)?),
        })
    }
}

/// Writes `{descriptor: vector}` so a remote fetch can be replayed offline.
pub fn write_embedding_cache(
    provider: &dyn MetadataProvider,
    descriptors: &[String],
    path: &Path,
) -> Result<()> {
    let mut map = BTreeMap::new();
    for d in descriptors {
        map.insert(d.clone(), provider.embed_raw(d)?);
    }
    let text = serde_json::to_string_pretty(&map)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Linear map from the `N`-dimensional metadata space into model space.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams<S> {
    /// `D x N`
    pub weight: Array2<S>,
    pub bias: Array1<S>,
}

impl<S: Scalar> AdapterParams<S> {
    pub fn zeros(model_dim: usize, meta_dim: usize) -> Self {
        Self {
            weight: Array2::zeros((model_dim, meta_dim)),
            bias: Array1::zeros(model_dim),
        }
    }

    pub fn project(&self, v: ArrayView1<S>) -> Result<Array1<S>> {
        if v.len() != self.weight.ncols() {
            return Err(Error::shape("adapter input", self.weight.ncols(), v.len()));
        }
        Ok(self.weight.dot(&v) + &self.bias)
    }

    /// Accumulates `dL/dW += g v^T` and `dL/db += g` for output gradient `g`.
    pub fn backward(&self, v: ArrayView1<S>, grad_out: ArrayView1<S>, grads: &mut AdapterParams<S>) {
        for (i, &g) in grad_out.iter().enumerate() {
            if g == S::zero() {
                continue;
            }
            grads.bias[i] += g;
            grads
                .weight
                .row_mut(i)
                .zip_mut_with(&v, |w, &x| *w += g * x);
        }
    }
}
