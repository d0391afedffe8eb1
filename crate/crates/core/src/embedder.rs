//! Context-aware token embedding.
//!
//! A window becomes the sequence
//! `[CLS] [START] ch0 tokens [END] [START] ch1 tokens [END] ...` where every
//! motion token is the sum of its primitive embedding, an affine embedding of
//! its raw segment statistics and the projected metadata of its channel.
//!
//! Embedding-table layout (0-based): rows `0..K` are primitives, row `K` is
//! `[MASK]`, `K + 1` is `[START]`, `K + 2` is `[END]`. `[CLS]` is a separate
//! vector. `[START]`/`[END]` carry their channel's metadata embedding and no
//! statistics; `[CLS]` carries neither.
//!
//! Positional slots are shared across channels: a motion token at time `t`
//! uses slot `t`, while `[CLS]`, `[START]` and `[END]` use the last three
//! slots of the table (`P - 1`, `P - 2`, `P - 3`).

use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::SegmentStats;
use crate::metadata::AdapterParams;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TokenKind {
    Cls,
    Start,
    End,
    Motion,
    Mask,
}

impl TokenKind {
    pub fn is_special(self) -> bool {
        matches!(self, TokenKind::Cls | TokenKind::Start | TokenKind::End)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable<S> {
    /// `(K + 3) x D`
    pub rows: Array2<S>,
    pub cls: Array1<S>,
}

impl<S: Scalar> EmbeddingTable<S> {
    pub fn zeros(codebook_size: usize, dim: usize) -> Self {
        Self {
            rows: Array2::zeros((codebook_size + 3, dim)),
            cls: Array1::zeros(dim),
        }
    }

    pub fn codebook_size(&self) -> usize {
        self.rows.nrows() - 3
    }

    pub fn mask_index(&self) -> usize {
        self.codebook_size()
    }

    pub fn start_index(&self) -> usize {
        self.codebook_size() + 1
    }

    pub fn end_index(&self) -> usize {
        self.codebook_size() + 2
    }

    pub fn embed_index(&self, idx: usize) -> Result<ArrayView1<'_, S>> {
        if idx >= self.rows.nrows() {
            return Err(Error::InvalidInput(format!(
                "token index {idx} outside embedding table of {} rows",
                self.rows.nrows()
            )));
        }
        Ok(self.rows.row(idx))
    }

    /// Gradient of a lookup: `grad` lands in row `idx` only.
    pub fn backward_index(grads: &mut Self, idx: usize, grad: ArrayView1<S>) {
        let mut row = grads.rows.row_mut(idx);
        row += &grad;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatProjector<S> {
    /// `D x 2`; column 0 multiplies the mean, column 1 the variance.
    pub weight: Array2<S>,
    pub bias: Array1<S>,
}

impl<S: Scalar> StatProjector<S> {
    pub fn zeros(dim: usize) -> Self {
        Self {
            weight: Array2::zeros((dim, 2)),
            bias: Array1::zeros(dim),
        }
    }

    pub fn embed_stats(&self, f: &SegmentStats<S>) -> Array1<S> {
        let mut out = self.bias.clone();
        out.scaled_add(f.mean, &self.weight.column(0));
        out.scaled_add(f.variance, &self.weight.column(1));
        out
    }

    pub fn backward(f: &SegmentStats<S>, grad: ArrayView1<S>, grads: &mut Self) {
        grads.bias += &grad;
        let mut w0 = grads.weight.column_mut(0);
        w0.scaled_add(f.mean, &grad);
        let mut w1 = grads.weight.column_mut(1);
        w1.scaled_add(f.variance, &grad);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PositionTable<S> {
    /// `P x D`
    pub rows: Array2<S>,
}

impl<S: Scalar> PositionTable<S> {
    pub fn zeros(slots: usize, dim: usize) -> Self {
        Self {
            rows: Array2::zeros((slots, dim)),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    /// Slot for a token; `None` when the table is too small.
    pub fn slot(&self, kind: TokenKind, time: Option<usize>) -> Option<usize> {
        let p = self.len();
        if p < 3 {
            return None;
        }
        let slot = match kind {
            TokenKind::Cls => p - 1,
            TokenKind::Start => p - 2,
            TokenKind::End => p - 3,
            TokenKind::Motion | TokenKind::Mask => {
                let t = time?;
                if t >= p - 3 {
                    return None;
                }
                t
            }
        };
        Some(slot)
    }
}

/// `e_vq + e_stat + e_meta`, elementwise.
pub fn compose_token<S: Scalar>(
    e_vq: ArrayView1<S>,
    e_stat: ArrayView1<S>,
    e_meta: ArrayView1<S>,
) -> Array1<S> {
    let mut out = e_vq.to_owned();
    out += &e_stat;
    out += &e_meta;
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelTokens<S> {
    /// Primitive index per time step; entries may be the `[MASK]` index after
    /// masking.
    pub indices: Vec<usize>,
    pub stats: Vec<SegmentStats<S>>,
    pub descriptor: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence<S> {
    pub channels: Vec<ChannelTokens<S>>,
}

impl<S: Scalar> TokenSequence<S> {
    pub fn motion_count(&self) -> usize {
        self.channels.iter().map(|c| c.indices.len()).sum()
    }

    pub fn seq_len(&self) -> usize {
        1 + self.channels.iter().map(|c| c.indices.len() + 2).sum::<usize>()
    }

    /// Flat position of motion token `t` of channel `c` in the composed
    /// sequence.
    pub fn position_of(&self, channel: usize, time: usize) -> usize {
        let before: usize = self.channels[..channel]
            .iter()
            .map(|c| c.indices.len() + 2)
            .sum();
        1 + before + 1 + time
    }

    fn flat_indices(&self) -> Vec<usize> {
        self.channels.iter().flat_map(|c| c.indices.iter().copied()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComposedSequence<S> {
    /// `Seq x D`
    pub vectors: Array2<S>,
    pub kinds: Vec<TokenKind>,
    pub channel: Vec<Option<usize>>,
    pub time: Vec<Option<usize>>,
    /// Embedding-table row used per position; `None` for `[CLS]`.
    pub table_index: Vec<Option<usize>>,
}

impl<S> ComposedSequence<S> {
    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }
}

/// Lays out the sequence and sums the per-token embeddings. `meta` holds the
/// projected metadata embedding of every channel.
pub fn assemble<S: Scalar>(
    tokens: &TokenSequence<S>,
    table: &EmbeddingTable<S>,
    stat: &StatProjector<S>,
    meta: &[Array1<S>],
) -> Result<ComposedSequence<S>> {
    if tokens.channels.is_empty() {
        return Err(Error::InvalidInput("cannot assemble a window without channels".into()));
    }
    if meta.len() != tokens.channels.len() {
        return Err(Error::shape("channel metadata", tokens.channels.len(), meta.len()));
    }
    let dim = table.rows.ncols();
    let seq = tokens.seq_len();
    let mut vectors = Array2::zeros((seq, dim));
    let mut kinds = Vec::with_capacity(seq);
    let mut channel = Vec::with_capacity(seq);
    let mut time = Vec::with_capacity(seq);
    let mut table_index = Vec::with_capacity(seq);
    let zero = Array1::<S>::zeros(dim);

    vectors.row_mut(0).assign(&table.cls);
    kinds.push(TokenKind::Cls);
    channel.push(None);
    time.push(None);
    table_index.push(None);

    let mut row = 1;
    for (c, ch) in tokens.channels.iter().enumerate() {
        if ch.stats.len() != ch.indices.len() {
            return Err(Error::shape("channel stats", ch.indices.len(), ch.stats.len()));
        }
        let mut push = |vectors: &mut Array2<S>, v: Array1<S>, kind, t, idx| {
            vectors.row_mut(row).assign(&v);
            kinds.push(kind);
            channel.push(Some(c));
            time.push(t);
            table_index.push(Some(idx));
            row += 1;
        };
        let start = compose_token(table.embed_index(table.start_index())?, zero.view(), meta[c].view());
        push(&mut vectors, start, TokenKind::Start, None, table.start_index());
        for (t, (&idx, f)) in ch.indices.iter().zip(&ch.stats).enumerate() {
            let kind = if idx == table.mask_index() {
                TokenKind::Mask
            } else if idx < table.codebook_size() {
                TokenKind::Motion
            } else {
                return Err(Error::InvalidInput(format!(
                    "channel {c} time {t}: index {idx} is not a primitive or [MASK]"
                )));
            };
            let e = compose_token(table.embed_index(idx)?, stat.embed_stats(f).view(), meta[c].view());
            push(&mut vectors, e, kind, Some(t), idx);
        }
        let end = compose_token(table.embed_index(table.end_index())?, zero.view(), meta[c].view());
        push(&mut vectors, end, TokenKind::End, None, table.end_index());
    }
    Ok(ComposedSequence {
        vectors,
        kinds,
        channel,
        time,
        table_index,
    })
}

/// Adds the shared positional slot of every token in place.
pub fn add_positions<S: Scalar>(seq: &mut ComposedSequence<S>, table: &PositionTable<S>) -> Result<Vec<usize>> {
    let slots = slots_for(seq, table)?;
    for (r, &slot) in slots.iter().enumerate() {
        let mut row = seq.vectors.row_mut(r);
        row += &table.rows.row(slot);
    }
    Ok(slots)
}

pub fn slots_for<S: Scalar>(seq: &ComposedSequence<S>, table: &PositionTable<S>) -> Result<Vec<usize>> {
    seq.kinds
        .iter()
        .zip(&seq.time)
        .map(|(&kind, &t)| {
            table.slot(kind, t).ok_or_else(|| {
                Error::InvalidInput(format!(
                    "no positional slot for {kind:?} at time {t:?} in a table of {} slots",
                    table.len()
                ))
            })
        })
        .collect()
}

/// Scatter-adds each row gradient into its slot.
pub fn backward_positions<S: Scalar>(grad: &Array2<S>, slots: &[usize], grads: &mut PositionTable<S>) {
    for (r, &slot) in slots.iter().enumerate() {
        let mut row = grads.rows.row_mut(slot);
        row += &grad.row(r);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskConfig {
    pub ratio: f64,
    /// Probability that a selected position keeps its original index.
    #[serde(default)]
    pub keep_prob: f64,
    /// Probability that a selected position gets a random primitive index.
    #[serde(default)]
    pub random_prob: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            ratio: 0.25,
            keep_prob: 0.0,
            random_prob: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    /// Positions in channel-major motion-token order, ascending.
    pub masked: Vec<usize>,
    /// Original primitive index at each masked position.
    pub targets: Vec<usize>,
    /// All motion-token indices after masking.
    pub indices: Vec<usize>,
}

/// `round_half_up(ratio * count)`, at least one when `ratio > 0` and there is
/// something to mask.
pub fn mask_count(ratio: f64, count: usize) -> usize {
    if count == 0 || ratio <= 0.0 {
        return 0;
    }
    (((ratio * count as f64) + 0.5).floor() as usize).clamp(1, count)
}

/// Chooses the masked motion positions and rewrites their indices.
pub fn plan_mask(
    indices: &[usize],
    codebook_size: usize,
    config: &MaskConfig,
    seed: u64,
) -> Result<MaskPlan> {
    if !(0.0..1.0).contains(&config.ratio) {
        return Err(Error::InvalidInput(format!("mask ratio {} outside [0, 1)", config.ratio)));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= codebook_size) {
        return Err(Error::InvalidInput(format!(
            "mask targets must be primitives, found index {bad}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = mask_count(config.ratio, indices.len());
    let mut masked = index::sample(&mut rng, indices.len(), m).into_vec();
    masked.sort_unstable();
    let mut out = indices.to_vec();
    let targets = masked.iter().map(|&p| indices[p]).collect();
    for &p in &masked {
        let u: f64 = if config.keep_prob > 0.0 || config.random_prob > 0.0 {
            rng.random()
        } else {
            1.0
        };
        out[p] = if u < config.keep_prob {
            indices[p]
        } else if u < config.keep_prob + config.random_prob {
            rng.random_range(0..codebook_size)
        } else {
            codebook_size
        };
    }
    Ok(MaskPlan {
        masked,
        targets,
        indices: out,
    })
}

/// Applies a mask plan to a token sequence (channel-major flat order).
pub fn apply_mask<S: Scalar>(tokens: &TokenSequence<S>, plan: &MaskPlan) -> TokenSequence<S> {
    let mut out = tokens.clone();
    let mut flat = plan.indices.iter();
    for ch in &mut out.channels {
        for idx in ch.indices.iter_mut() {
            *idx = *flat.next().expect("mask plan covers every motion token");
        }
    }
    out
}

pub fn flat_motion_indices<S: Scalar>(tokens: &TokenSequence<S>) -> Vec<usize> {
    tokens.flat_indices()
}

/// Every trainable tensor on the input side of the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextEmbedder<S> {
    pub table: EmbeddingTable<S>,
    pub stat: StatProjector<S>,
    pub positions: PositionTable<S>,
    pub adapter: AdapterParams<S>,
}

/// What the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct EmbedCache<S> {
    pub slots: Vec<usize>,
    pub meta_inputs: Vec<Array1<S>>,
}

impl<S: Scalar> ContextEmbedder<S> {
    pub fn zeros(codebook_size: usize, dim: usize, slots: usize, meta_dim: usize) -> Self {
        Self {
            table: EmbeddingTable::zeros(codebook_size, dim),
            stat: StatProjector::zeros(dim),
            positions: PositionTable::zeros(slots, dim),
            adapter: AdapterParams::zeros(dim, meta_dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.table.rows.ncols()
    }

    /// Builds `X + P` for one window. `meta_inputs` are the raw metadata
    /// vectors of each channel.
    pub fn forward(
        &self,
        tokens: &TokenSequence<S>,
        meta_inputs: &[Array1<S>],
    ) -> Result<(ComposedSequence<S>, EmbedCache<S>)> {
        let projected = meta_inputs
            .iter()
            .map(|v| self.adapter.project(v.view()))
            .collect::<Result<Vec<_>>>()?;
        let mut seq = assemble(tokens, &self.table, &self.stat, &projected)?;
        let slots = add_positions(&mut seq, &self.positions)?;
        Ok((
            seq,
            EmbedCache {
                slots,
                meta_inputs: meta_inputs.to_vec(),
            },
        ))
    }

    /// Accumulates parameter gradients from `dL/d(X + P)`.
    pub fn backward(
        &self,
        tokens: &TokenSequence<S>,
        seq: &ComposedSequence<S>,
        cache: &EmbedCache<S>,
        grad: &Array2<S>,
        grads: &mut ContextEmbedder<S>,
    ) {
        backward_positions(grad, &cache.slots, &mut grads.positions);
        let dim = self.dim();
        let mut meta_grads = vec![Array1::<S>::zeros(dim); tokens.channels.len()];
        for r in 0..seq.len() {
            let g = grad.row(r);
            match seq.kinds[r] {
                TokenKind::Cls => grads.table.cls += &g,
                kind => {
                    let c = seq.channel[r].expect("channel tokens carry a channel");
                    let idx = seq.table_index[r].expect("channel tokens carry a table row");
                    EmbeddingTable::backward_index(&mut grads.table, idx, g);
                    meta_grads[c] += &g;
                    if !kind.is_special() {
                        let t = seq.time[r].expect("motion tokens carry a time index");
                        StatProjector::backward(&tokens.channels[c].stats[t], g, &mut grads.stat);
                    }
                }
            }
        }
        for (v, g) in cache.meta_inputs.iter().zip(&meta_grads) {
            self.adapter.backward(v.view(), g.view(), &mut grads.adapter);
        }
    }

    /// `(name, tensor)` pairs in a fixed order.
    pub fn tensors(&self) -> Vec<(&'static str, &[S])> {
        vec![
            ("embed.table", self.table.rows.as_slice().expect("standard layout")),
            ("embed.cls", self.table.cls.as_slice().expect("standard layout")),
            ("embed.stat.weight", self.stat.weight.as_slice().expect("standard layout")),
            ("embed.stat.bias", self.stat.bias.as_slice().expect("standard layout")),
            ("embed.positions", self.positions.rows.as_slice().expect("standard layout")),
            ("adapter.weight", self.adapter.weight.as_slice().expect("standard layout")),
            ("adapter.bias", self.adapter.bias.as_slice().expect("standard layout")),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [S])> {
        vec![
            ("embed.table", self.table.rows.as_slice_mut().expect("standard layout")),
            ("embed.cls", self.table.cls.as_slice_mut().expect("standard layout")),
            ("embed.stat.weight", self.stat.weight.as_slice_mut().expect("standard layout")),
            ("embed.stat.bias", self.stat.bias.as_slice_mut().expect("standard layout")),
            ("embed.positions", self.positions.rows.as_slice_mut().expect("standard layout")),
            ("adapter.weight", self.adapter.weight.as_slice_mut().expect("standard layout")),
            ("adapter.bias", self.adapter.bias.as_slice_mut().expect("standard layout")),
        ]
    }
}
