//! The assembled model: codebook, context embedder, encoder and task heads.

use std::collections::HashMap;

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::embedder::{ChannelTokens, ContextEmbedder, MaskConfig, TokenSequence};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::ingest::{
    instance_normalize, segment_window, SegmentStats, SensorWindow, DEFAULT_NORM_EPS,
    DEFAULT_SEGMENT, DEFAULT_WINDOW,
};
use crate::metadata::{canonical_descriptor, embed_with, MetadataProvider, ProviderConfig};
use crate::quantizer::{Codebook, InitStrategy, DEFAULT_BETA};
use crate::scalar::Scalar;

pub const DEFAULT_CODEBOOK_SIZE: usize = 1024;
pub const DEFAULT_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub codebook_size: usize,
    pub segment_len: usize,
    pub window_length: usize,
    pub beta: f64,
    pub norm_eps: f64,
    pub codebook_init: InitStrategy,
    pub metadata: ProviderConfig,
    pub encoder: EncoderConfig,
    pub mask: MaskConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            codebook_size: DEFAULT_CODEBOOK_SIZE,
            segment_len: DEFAULT_SEGMENT,
            window_length: DEFAULT_WINDOW,
            beta: DEFAULT_BETA,
            norm_eps: DEFAULT_NORM_EPS,
            codebook_init: InitStrategy::default(),
            metadata: ProviderConfig::default(),
            encoder: EncoderConfig::default(),
            mask: MaskConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.codebook_size < 2 {
            return Err(Error::Config(format!(
                "codebook_size must be at least 2, got {}",
                self.codebook_size
            )));
        }
        if self.segment_len == 0 || self.segment_len > self.window_length {
            return Err(Error::Config(format!(
                "segment_len {} must be in 1..={}",
                self.segment_len, self.window_length
            )));
        }
        if !(self.beta >= 0.0) || !(self.norm_eps > 0.0) {
            return Err(Error::Config("beta must be >= 0 and norm_eps > 0".into()));
        }
        if !(0.0..1.0).contains(&self.mask.ratio) {
            return Err(Error::Config(format!("mask.ratio {} outside [0, 1)", self.mask.ratio)));
        }
        Ok(())
    }

    pub fn segments_per_channel(&self) -> usize {
        self.window_length / self.segment_len
    }

    /// One slot per time step plus the three reserved special-token slots.
    pub fn position_slots(&self) -> usize {
        self.segments_per_channel() + 3
    }
}

/// Affine map `W h + b` with `W` stored `out x D`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead<S> {
    pub weight: Array2<S>,
    pub bias: Array1<S>,
}

impl<S: Scalar> LinearHead<S> {
    pub fn zeros(out: usize, dim: usize) -> Self {
        Self {
            weight: Array2::zeros((out, dim)),
            bias: Array1::zeros(out),
        }
    }

    pub fn init(out: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut head = Self::zeros(out, dim);
        fill_normal(head.weight.as_slice_mut().expect("standard layout"), rng);
        head
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn logits(&self, h: ndarray::ArrayView1<S>) -> Array1<S> {
        self.weight.dot(&h) + &self.bias
    }

    /// Accumulates parameter gradients for `dL/dlogits` and returns `dL/dh`.
    pub fn backward(&self, h: ndarray::ArrayView1<S>, dlogits: &Array1<S>, grads: &mut Self) -> Array1<S> {
        for (i, &g) in dlogits.iter().enumerate() {
            if g == S::zero() {
                continue;
            }
            let mut row = grads.weight.row_mut(i);
            row.scaled_add(g, &h);
        }
        grads.bias += dlogits;
        self.weight.t().dot(dlogits)
    }
}

pub type MaeHead<S> = LinearHead<S>;
pub type ClsHead<S> = LinearHead<S>;

/// Trainable parameter groups, in the order used by freeze policies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamGroup {
    Codebook,
    Embedding,
    Encoder,
    MaeHead,
    ClsHead,
}

/// Everything updated by the optimizer. The codebook is kept apart because it
/// is updated by its own rule.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<S> {
    pub embedder: ContextEmbedder<S>,
    pub encoder: Encoder<S>,
    pub mae: MaeHead<S>,
    pub cls: Option<ClsHead<S>>,
}

pub struct NamedTensor<'a, S> {
    pub name: String,
    pub group: ParamGroup,
    pub data: &'a [S],
}

pub struct NamedTensorMut<'a, S> {
    pub name: String,
    pub group: ParamGroup,
    pub data: &'a mut [S],
}

impl<S: Scalar> Network<S> {
    pub fn new(config: &ModelConfig, meta_dim: usize, num_classes: Option<usize>, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.encoder.model_dim;
        let mut embedder = ContextEmbedder::zeros(config.codebook_size, d, config.position_slots(), meta_dim);
        for (name, t) in embedder.tensors_mut() {
            if !name.ends_with("bias") {
                fill_normal(t, &mut rng);
            }
        }
        let encoder = Encoder::new(config.encoder.clone(), rand::Rng::random(&mut rng))?;
        let mae = LinearHead::init(config.codebook_size, d, &mut rng);
        let cls = num_classes.map(|c| LinearHead::init(c, d, &mut rng));
        Ok(Self { embedder, encoder, mae, cls })
    }

    pub fn zeros_like(&self) -> Self {
        let k = self.mae.outputs();
        let d = self.embedder.dim();
        Self {
            embedder: ContextEmbedder::zeros(
                k,
                d,
                self.embedder.positions.len(),
                self.embedder.adapter.weight.ncols(),
            ),
            encoder: self.encoder.zeros_like(),
            mae: LinearHead::zeros(k, d),
            cls: self.cls.as_ref().map(|c| LinearHead::zeros(c.outputs(), d)),
        }
    }

    pub fn tensors(&self) -> Vec<NamedTensor<'_, S>> {
        let mut out: Vec<NamedTensor<'_, S>> = self
            .embedder
            .tensors()
            .into_iter()
            .map(|(n, data)| NamedTensor { name: n.to_string(), group: ParamGroup::Embedding, data })
            .collect();
        out.extend(
            self.encoder
                .tensors()
                .into_iter()
                .map(|(name, data)| NamedTensor { name, group: ParamGroup::Encoder, data }),
        );
        fn head<'a, S>(prefix: &str, group: ParamGroup, h: &'a LinearHead<S>) -> [NamedTensor<'a, S>; 2] {
            [
                NamedTensor {
                    name: format!("{prefix}.weight"),
                    group,
                    data: h.weight.as_slice().expect("standard layout"),
                },
                NamedTensor {
                    name: format!("{prefix}.bias"),
                    group,
                    data: h.bias.as_slice().expect("standard layout"),
                },
            ]
        }
        out.extend(head("mae_head", ParamGroup::MaeHead, &self.mae));
        if let Some(cls) = &self.cls {
            out.extend(head("cls_head", ParamGroup::ClsHead, cls));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<NamedTensorMut<'_, S>> {
        let mut out: Vec<NamedTensorMut<'_, S>> = self
            .embedder
            .tensors_mut()
            .into_iter()
            .map(|(n, data)| NamedTensorMut { name: n.to_string(), group: ParamGroup::Embedding, data })
            .collect();
        out.extend(
            self.encoder
                .tensors_mut()
                .into_iter()
                .map(|(name, data)| NamedTensorMut { name, group: ParamGroup::Encoder, data }),
        );
        fn head<'a, S>(prefix: &str, group: ParamGroup, h: &'a mut LinearHead<S>) -> [NamedTensorMut<'a, S>; 2] {
            [
                NamedTensorMut {
                    name: format!("{prefix}.weight"),
                    group,
                    data: h.weight.as_slice_mut().expect("standard layout"),
                },
                NamedTensorMut {
                    name: format!("{prefix}.bias"),
                    group,
                    data: h.bias.as_slice_mut().expect("standard layout"),
                },
            ]
        }
        out.extend(head("mae_head", ParamGroup::MaeHead, &mut self.mae));
        if let Some(cls) = &mut self.cls {
            out.extend(head("cls_head", ParamGroup::ClsHead, cls));
        }
        out
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (a, &b) in dst.data.iter_mut().zip(src.data) {
                *a += b;
            }
        }
    }

    pub fn scale(&mut self, factor: S) {
        for t in self.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }
}

pub(crate) fn fill_normal<S: Scalar>(data: &mut [S], rng: &mut ChaCha8Rng) {
    let normal = Normal::new(0.0, DEFAULT_INIT_STD).expect("finite std");
    data.iter_mut().for_each(|v| *v = S::of(normal.sample(rng)));
}

/// A window cut into normalized segments, ready for quantization.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedWindow<S> {
    /// Instance-normalized segments, channel-major.
    pub segments: Vec<Vec<S>>,
    pub stats: Vec<SegmentStats<S>>,
    pub descriptors: Vec<String>,
    pub segments_per_channel: usize,
    pub label: Option<usize>,
    pub source_id: String,
}

impl<S: Scalar> PreparedWindow<S> {
    pub fn num_channels(&self) -> usize {
        self.descriptors.len()
    }

    /// Channel-major primitive indices to a token sequence.
    pub fn tokens(&self, indices: &[usize]) -> TokenSequence<S> {
        let n = self.segments_per_channel;
        TokenSequence {
            channels: self
                .descriptors
                .iter()
                .enumerate()
                .map(|(c, d)| ChannelTokens {
                    indices: indices[c * n..(c + 1) * n].to_vec(),
                    stats: self.stats[c * n..(c + 1) * n].to_vec(),
                    descriptor: d.clone(),
                })
                .collect(),
        }
    }
}

pub fn prepare_window<S: Scalar>(window: &SensorWindow<S>, config: &ModelConfig) -> Result<PreparedWindow<S>> {
    let slots = config.segments_per_channel();
    let per_channel = window.len() / config.segment_len;
    if per_channel > slots {
        return Err(Error::Data(format!(
            "window `{}` has {} segments per channel but the model has {slots} positional slots",
            window.source_id, per_channel
        )));
    }
    let eps = S::of(config.norm_eps);
    let mut segments = Vec::new();
    let mut stats = Vec::new();
    for (seg, st) in segment_window(window, config.segment_len)? {
        segments.push(instance_normalize(&seg.values, eps)?);
        stats.push(st);
    }
    Ok(PreparedWindow {
        segments,
        stats,
        descriptors: window.channels.iter().map(canonical_descriptor).collect(),
        segments_per_channel: per_channel,
        label: window.label,
        source_id: window.source_id.clone(),
    })
}

/// Metadata vectors per descriptor, fetched once per run.
#[derive(Debug, Clone, Default)]
pub struct MetaTable<S> {
    pub vectors: HashMap<String, Array1<S>>,
    pub provider: String,
}

impl<S: Scalar> MetaTable<S> {
    pub fn build<'a>(
        provider: &dyn MetadataProvider,
        descriptors: impl IntoIterator<Item = &'a String>,
    ) -> Result<Self> {
        let mut vectors = HashMap::new();
        for d in descriptors {
            if !vectors.contains_key(d) {
                vectors.insert(d.clone(), embed_with::<S>(provider, d)?.values);
            }
        }
        Ok(Self { vectors, provider: provider.name().to_string() })
    }

    pub fn for_window(&self, w: &PreparedWindow<S>) -> Result<Vec<Array1<S>>> {
        w.descriptors
            .iter()
            .map(|d| {
                self.vectors
                    .get(d)
                    .cloned()
                    .ok_or_else(|| Error::Data(format!("no metadata embedding for `{d}`")))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoPFormer<S> {
    pub config: ModelConfig,
    pub codebook: Codebook<S>,
    pub net: Network<S>,
    pub classes: Vec<String>,
    pub seed: u64,
}

impl<S: Scalar> MoPFormer<S> {
    pub fn quantize_indices(&self, w: &PreparedWindow<S>) -> Vec<usize> {
        quantize_window(&self.codebook, w)
    }

    /// Hidden states of an unmasked window.
    pub fn encode(&self, w: &PreparedWindow<S>, meta: &MetaTable<S>) -> Result<Array2<S>> {
        let tokens = w.tokens(&self.quantize_indices(w));
        let (seq, _) = self.net.embedder.forward(&tokens, &meta.for_window(w)?)?;
        Ok(self.net.encoder.forward(&seq.vectors, None, None)?.0)
    }

    pub fn predict_proba(&self, w: &PreparedWindow<S>, meta: &MetaTable<S>) -> Result<Array1<S>> {
        let cls = self
            .net
            .cls
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("model has no classification head".into()))?;
        let h = self.encode(w, meta)?;
        Ok(crate::training::softmax(cls.logits(h.row(0)).view()))
    }

    pub fn predict(&self, w: &PreparedWindow<S>, meta: &MetaTable<S>) -> Result<usize> {
        let p = self.predict_proba(w, meta)?;
        Ok(argmax(p.view()))
    }

    /// Mean composed input embedding (before positions) of every occurrence
    /// of each primitive.
    pub fn contextual_primitive_embeddings(
        &self,
        windows: &[PreparedWindow<S>],
        meta: &MetaTable<S>,
    ) -> Result<(Array2<S>, Vec<u64>)> {
        let k = self.config.codebook_size;
        let d = self.net.embedder.dim();
        let mut sums = Array2::<S>::zeros((k, d));
        let mut counts = vec![0u64; k];
        for w in windows {
            let tokens = w.tokens(&self.quantize_indices(w));
            let metas = meta.for_window(w)?;
            for (c, ch) in tokens.channels.iter().enumerate() {
                let e_meta = self.net.embedder.adapter.project(metas[c].view())?;
                for (&idx, f) in ch.indices.iter().zip(&ch.stats) {
                    let mut row = sums.row_mut(idx);
                    row += &self.net.embedder.table.embed_index(idx)?;
                    row += &self.net.embedder.stat.embed_stats(f);
                    row += &e_meta;
                    counts[idx] += 1;
                }
            }
        }
        for (mut row, &n) in sums.axis_iter_mut(Axis(0)).zip(&counts) {
            if n > 0 {
                row /= S::of(n as f64);
            }
        }
        Ok((sums, counts))
    }
}

/// Nearest-prototype index of every segment, channel-major.
pub fn quantize_window<S: Scalar>(codebook: &Codebook<S>, w: &PreparedWindow<S>) -> Vec<usize> {
    w.segments.iter().map(|s| codebook.nearest(s).0).collect()
}

pub fn argmax<S: Scalar>(v: ndarray::ArrayView1<S>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, DEFAULT_STEP};

    #[test]
    fn position_slots_cover_segments_and_specials() {
        let c = ModelConfig::default();
        assert_eq!(c.segments_per_channel(), 10);
        assert_eq!(c.position_slots(), 13);
        assert!(c.validate().is_ok());
        let bad = ModelConfig { segment_len: 600, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn tensor_names_are_unique_and_grouped() {
        let cfg = ModelConfig {
            codebook_size: 8,
            encoder: EncoderConfig { depth: 2, heads: 2, model_dim: 8, ..Default::default() },
            ..Default::default()
        };
        let net = Network::<f64>::new(&cfg, 6, Some(3), 1).unwrap();
        let names: Vec<_> = net.tensors().iter().map(|t| t.name.clone()).collect();
        let unique: std::collections::HashSet<_> = names.iter().collect();
        assert_eq!(unique.len(), names.len());
        assert!(net.tensors().iter().any(|t| t.group == ParamGroup::ClsHead));
        let zeros = net.zeros_like();
        assert_eq!(zeros.num_parameters(), net.num_parameters());
        assert!(zeros.tensors().iter().all(|t| t.data.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn linear_head_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let head = LinearHead::<f64>::init(4, 5, &mut rng);
        let h = Array1::from(vec![0.3, -0.2, 0.9, 0.1, -0.5]);
        let g = Array1::from(vec![0.5, -1.0, 0.25, 2.0]);
        let mut grads = LinearHead::zeros(4, 5);
        let dh = head.backward(h.view(), &g, &mut grads);
        let hv: Vec<f64> = h.to_vec();
        let r = grad_check(
            |x: &[f64]| head.logits(Array1::from(x.to_vec()).view()).dot(&g),
            &hv,
            dh.as_slice().unwrap(),
            DEFAULT_STEP,
        );
        assert!(r.max_rel_err < 1e-6, "{r:?}");
        let flat: Vec<f64> = head.weight.iter().chain(head.bias.iter()).copied().collect();
        let analytic: Vec<f64> = grads.weight.iter().chain(grads.bias.iter()).copied().collect();
        let loss = |p: &[f64]| {
            let hd = LinearHead {
                weight: Array2::from_shape_vec((4, 5), p[..20].to_vec()).unwrap(),
                bias: Array1::from(p[20..].to_vec()),
            };
            hd.logits(h.view()).dot(&g)
        };
        assert!(grad_check(loss, &flat, &analytic, DEFAULT_STEP).max_rel_err < 1e-6);
    }
}
