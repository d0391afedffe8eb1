//! Transformer encoder with hand-written reverse-mode gradients.
//!
//! Each layer is multi-head self-attention followed by a GELU feed-forward
//! block, both wrapped in residual connections. Layer normalization sits
//! before each block (`pre`, default) or after each residual sum (`post`).
//! Attention is fully bidirectional over the whole token sequence unless an
//! explicit mask is supplied.

pub mod ops;

use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
pub use ops::Activation;
use ops::{
    attention_backward, attention_forward, layer_norm_backward, layer_norm_forward,
    AttentionCache, AttentionGrads, AttentionWeights, LayerNormCache,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormPlacement {
    Pre,
    Post,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub depth: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub mlp_ratio: f64,
    pub activation: Activation,
    pub dropout: f64,
    pub norm_placement: NormPlacement,
    pub norm_eps: f64,
    pub init_std: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            depth: 5,
            heads: 8,
            model_dim: 256,
            mlp_ratio: 1.0,
            activation: Activation::Gelu,
            dropout: 0.0,
            norm_placement: NormPlacement::Pre,
            norm_eps: 1e-5,
            init_std: 0.02,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.model_dim == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model_dim {} must be a positive multiple of heads {}",
                self.model_dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.mlp_ratio > 0.0) {
            return Err(Error::Config(format!("mlp_ratio {} must be positive", self.mlp_ratio)));
        }
        Ok(())
    }

    pub fn hidden_dim(&self) -> usize {
        ((self.model_dim as f64 * self.mlp_ratio).round() as usize).max(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<S> {
    pub wq: Array2<S>,
    pub bq: Array1<S>,
    pub wk: Array2<S>,
    pub bk: Array1<S>,
    pub wv: Array2<S>,
    pub bv: Array1<S>,
    pub wo: Array2<S>,
    pub bo: Array1<S>,
    pub ln1_gamma: Array1<S>,
    pub ln1_beta: Array1<S>,
    pub ln2_gamma: Array1<S>,
    pub ln2_beta: Array1<S>,
    /// `D x H`
    pub w1: Array2<S>,
    pub b1: Array1<S>,
    /// `H x D`
    pub w2: Array2<S>,
    pub b2: Array1<S>,
}

const LAYER_TENSORS: [&str; 16] = [
    "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln1_gamma", "ln1_beta", "ln2_gamma",
    "ln2_beta", "w1", "b1", "w2", "b2",
];

impl<S: Scalar> LayerParams<S> {
    fn zeros(d: usize, h: usize) -> Self {
        Self {
            wq: Array2::zeros((d, d)),
            bq: Array1::zeros(d),
            wk: Array2::zeros((d, d)),
            bk: Array1::zeros(d),
            wv: Array2::zeros((d, d)),
            bv: Array1::zeros(d),
            wo: Array2::zeros((d, d)),
            bo: Array1::zeros(d),
            ln1_gamma: Array1::zeros(d),
            ln1_beta: Array1::zeros(d),
            ln2_gamma: Array1::zeros(d),
            ln2_beta: Array1::zeros(d),
            w1: Array2::zeros((d, h)),
            b1: Array1::zeros(h),
            w2: Array2::zeros((h, d)),
            b2: Array1::zeros(d),
        }
    }

    fn init(d: usize, h: usize, std: f64, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("init std is finite");
        let mut draw = |r, c| Array2::from_shape_simple_fn((r, c), || S::of(normal.sample(rng)));
        let mut p = Self::zeros(d, h);
        p.wq = draw(d, d);
        p.wk = draw(d, d);
        p.wv = draw(d, d);
        p.wo = draw(d, d);
        p.w1 = draw(d, h);
        p.w2 = draw(h, d);
        p.ln1_gamma.fill(S::one());
        p.ln2_gamma.fill(S::one());
        p
    }

    fn attention(&self) -> AttentionWeights<'_, S> {
        AttentionWeights {
            wq: &self.wq,
            bq: &self.bq,
            wk: &self.wk,
            bk: &self.bk,
            wv: &self.wv,
            bv: &self.bv,
            wo: &self.wo,
            bo: &self.bo,
        }
    }

    fn attention_grads(&mut self) -> AttentionGrads<'_, S> {
        AttentionGrads {
            wq: &mut self.wq,
            bq: &mut self.bq,
            wk: &mut self.wk,
            bk: &mut self.bk,
            wv: &mut self.wv,
            bv: &mut self.bv,
            wo: &mut self.wo,
            bo: &mut self.bo,
        }
    }

    fn slices(&self) -> [&[S]; 16] {
        fn m<S>(a: &Array2<S>) -> &[S] {
            a.as_slice().expect("standard layout")
        }
        fn v<S>(a: &Array1<S>) -> &[S] {
            a.as_slice().expect("standard layout")
        }
        [
            m(&self.wq), v(&self.bq), m(&self.wk), v(&self.bk), m(&self.wv), v(&self.bv),
            m(&self.wo), v(&self.bo), v(&self.ln1_gamma), v(&self.ln1_beta),
            v(&self.ln2_gamma), v(&self.ln2_beta), m(&self.w1), v(&self.b1), m(&self.w2),
            v(&self.b2),
        ]
    }

    fn slices_mut(&mut self) -> [&mut [S]; 16] {
        [
            self.wq.as_slice_mut().expect("standard layout"),
            self.bq.as_slice_mut().expect("standard layout"),
            self.wk.as_slice_mut().expect("standard layout"),
            self.bk.as_slice_mut().expect("standard layout"),
            self.wv.as_slice_mut().expect("standard layout"),
            self.bv.as_slice_mut().expect("standard layout"),
            self.wo.as_slice_mut().expect("standard layout"),
            self.bo.as_slice_mut().expect("standard layout"),
            self.ln1_gamma.as_slice_mut().expect("standard layout"),
            self.ln1_beta.as_slice_mut().expect("standard layout"),
            self.ln2_gamma.as_slice_mut().expect("standard layout"),
            self.ln2_beta.as_slice_mut().expect("standard layout"),
            self.w1.as_slice_mut().expect("standard layout"),
            self.b1.as_slice_mut().expect("standard layout"),
            self.w2.as_slice_mut().expect("standard layout"),
            self.b2.as_slice_mut().expect("standard layout"),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<S> {
    pub config: EncoderConfig,
    pub layers: Vec<LayerParams<S>>,
}

struct MlpCache<S> {
    input: Array2<S>,
    pre_act: Array2<S>,
    act: Array2<S>,
}

struct LayerCache<S> {
    ln1: LayerNormCache<S>,
    attn: AttentionCache<S>,
    attn_drop: Option<Array2<S>>,
    ln2: LayerNormCache<S>,
    mlp: MlpCache<S>,
    mlp_drop: Option<Array2<S>>,
}

/// Activations saved by [`Encoder::forward`] for the backward pass.
pub struct EncoderCache<S> {
    layers: Vec<LayerCache<S>>,
}

impl<S: Scalar> Encoder<S> {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, h) = (config.model_dim, config.hidden_dim());
        let layers = (0..config.depth)
            .map(|_| LayerParams::init(d, h, config.init_std, &mut rng))
            .collect();
        Ok(Self { config, layers })
    }

    pub fn zeros_like(&self) -> Self {
        let (d, h) = (self.config.model_dim, self.config.hidden_dim());
        Self {
            config: self.config.clone(),
            layers: (0..self.layers.len()).map(|_| LayerParams::zeros(d, h)).collect(),
        }
    }

    fn mlp_forward(&self, layer: &LayerParams<S>, x: &Array2<S>) -> (Array2<S>, MlpCache<S>) {
        let act_fn = self.config.activation;
        let pre_act = x.dot(&layer.w1) + &layer.b1;
        let act = pre_act.mapv(|v| act_fn.apply(v));
        let out = act.dot(&layer.w2) + &layer.b2;
        (
            out,
            MlpCache {
                input: x.clone(),
                pre_act,
                act,
            },
        )
    }

    fn mlp_backward(
        &self,
        layer: &LayerParams<S>,
        grad: &Array2<S>,
        cache: &MlpCache<S>,
        g: &mut LayerParams<S>,
    ) -> Array2<S> {
        let act_fn = self.config.activation;
        g.w2 += &cache.act.t().dot(grad);
        g.b2 += &grad.sum_axis(ndarray::Axis(0));
        let dact = grad.dot(&layer.w2.t());
        let mut dpre = dact;
        dpre.zip_mut_with(&cache.pre_act, |d, &x| *d *= act_fn.derivative(x));
        g.w1 += &cache.input.t().dot(&dpre);
        g.b1 += &dpre.sum_axis(ndarray::Axis(0));
        dpre.dot(&layer.w1.t())
    }

    fn dropout_mask(&self, shape: (usize, usize), rng: Option<&mut ChaCha8Rng>) -> Option<Array2<S>> {
        let p = self.config.dropout;
        let rng = rng?;
        if p <= 0.0 {
            return None;
        }
        let keep = S::of(1.0 / (1.0 - p));
        Some(Array2::from_shape_simple_fn(shape, || {
            if rng.random::<f64>() < p {
                S::zero()
            } else {
                keep
            }
        }))
    }

    /// Runs every layer. Dropout is only active when `dropout_seed` is given.
    pub fn forward(
        &self,
        x: &Array2<S>,
        allowed: Option<ArrayView2<bool>>,
        dropout_seed: Option<u64>,
    ) -> Result<(Array2<S>, EncoderCache<S>)> {
        if x.ncols() != self.config.model_dim {
            return Err(Error::shape("encoder input", self.config.model_dim, x.ncols()));
        }
        if let Some(mask) = allowed {
            if mask.dim() != (x.nrows(), x.nrows()) {
                return Err(Error::shape("attention mask", (x.nrows(), x.nrows()), mask.dim()));
            }
            if mask.rows().into_iter().any(|r| !r.iter().any(|&b| b)) {
                return Err(Error::InvalidInput("attention mask row with no allowed keys".into()));
            }
        }
        let mut rng = dropout_seed.map(ChaCha8Rng::seed_from_u64);
        let eps = S::of(self.config.norm_eps);
        let heads = self.config.heads;
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let cache = match self.config.norm_placement {
                NormPlacement::Pre => {
                    let (a, ln1) = layer_norm_forward(&h, &layer.ln1_gamma, &layer.ln1_beta, eps);
                    let (mut attn_out, attn) = attention_forward(&a, &layer.attention(), heads, allowed);
                    let attn_drop = self.dropout_mask(attn_out.dim(), rng.as_mut());
                    if let Some(m) = &attn_drop {
                        attn_out *= m;
                    }
                    let x1 = &h + &attn_out;
                    let (b, ln2) = layer_norm_forward(&x1, &layer.ln2_gamma, &layer.ln2_beta, eps);
                    let (mut mlp_out, mlp) = self.mlp_forward(layer, &b);
                    let mlp_drop = self.dropout_mask(mlp_out.dim(), rng.as_mut());
                    if let Some(m) = &mlp_drop {
                        mlp_out *= m;
                    }
                    h = x1 + mlp_out;
                    LayerCache { ln1, attn, attn_drop, ln2, mlp, mlp_drop }
                }
                NormPlacement::Post => {
                    let (mut attn_out, attn) = attention_forward(&h, &layer.attention(), heads, allowed);
                    let attn_drop = self.dropout_mask(attn_out.dim(), rng.as_mut());
                    if let Some(m) = &attn_drop {
                        attn_out *= m;
                    }
                    let (x1, ln1) =
                        layer_norm_forward(&(&h + &attn_out), &layer.ln1_gamma, &layer.ln1_beta, eps);
                    let (mut mlp_out, mlp) = self.mlp_forward(layer, &x1);
                    let mlp_drop = self.dropout_mask(mlp_out.dim(), rng.as_mut());
                    if let Some(m) = &mlp_drop {
                        mlp_out *= m;
                    }
                    let (y, ln2) =
                        layer_norm_forward(&(&x1 + &mlp_out), &layer.ln2_gamma, &layer.ln2_beta, eps);
                    h = y;
                    LayerCache { ln1, attn, attn_drop, ln2, mlp, mlp_drop }
                }
            };
            if h.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("encoder layer {i} activations")));
            }
            caches.push(cache);
        }
        Ok((h, EncoderCache { layers: caches }))
    }

    /// Reverse pass: accumulates parameter gradients into `grads` and returns
    /// the gradient with respect to the encoder input.
    pub fn backward(
        &self,
        grad_out: &Array2<S>,
        cache: &EncoderCache<S>,
        grads: &mut Encoder<S>,
    ) -> Result<Array2<S>> {
        if cache.layers.len() != self.layers.len() || grads.layers.len() != self.layers.len() {
            return Err(Error::InvalidInput(
                "encoder backward needs the cache of a forward pass through the same encoder".into(),
            ));
        }
        let heads = self.config.heads;
        let mut g = grad_out.clone();
        for ((layer, lc), lg) in self
            .layers
            .iter()
            .zip(&cache.layers)
            .zip(grads.layers.iter_mut())
            .rev()
        {
            match self.config.norm_placement {
                NormPlacement::Pre => {
                    // y = x1 + drop(mlp(ln2(x1)))
                    let mut dmlp = g.clone();
                    if let Some(m) = &lc.mlp_drop {
                        dmlp *= m;
                    }
                    let db = self.mlp_backward(layer, &dmlp, &lc.mlp, lg);
                    let dx1 = layer_norm_backward(
                        &db, &lc.ln2, &layer.ln2_gamma, &mut lg.ln2_gamma, &mut lg.ln2_beta,
                    ) + &g;
                    // x1 = x + drop(attn(ln1(x)))
                    let mut dattn = dx1.clone();
                    if let Some(m) = &lc.attn_drop {
                        dattn *= m;
                    }
                    let da = attention_backward(&dattn, &lc.attn, &layer.attention(), lg.attention_grads(), heads);
                    g = layer_norm_backward(
                        &da, &lc.ln1, &layer.ln1_gamma, &mut lg.ln1_gamma, &mut lg.ln1_beta,
                    ) + &dx1;
                }
                NormPlacement::Post => {
                    // y = ln2(x1 + drop(mlp(x1)))
                    let dsum2 = layer_norm_backward(
                        &g, &lc.ln2, &layer.ln2_gamma, &mut lg.ln2_gamma, &mut lg.ln2_beta,
                    );
                    let mut dmlp = dsum2.clone();
                    if let Some(m) = &lc.mlp_drop {
                        dmlp *= m;
                    }
                    let dx1 = self.mlp_backward(layer, &dmlp, &lc.mlp, lg) + &dsum2;
                    // x1 = ln1(x + drop(attn(x)))
                    let dsum1 = layer_norm_backward(
                        &dx1, &lc.ln1, &layer.ln1_gamma, &mut lg.ln1_gamma, &mut lg.ln1_beta,
                    );
                    let mut dattn = dsum1.clone();
                    if let Some(m) = &lc.attn_drop {
                        dattn *= m;
                    }
                    g = attention_backward(&dattn, &lc.attn, &layer.attention(), lg.attention_grads(), heads)
                        + &dsum1;
                }
            }
        }
        Ok(g)
    }

    pub fn tensors(&self) -> Vec<(String, &[S])> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                LAYER_TENSORS
                    .iter()
                    .zip(l.slices())
                    .map(move |(n, t)| (format!("encoder.{i}.{n}"), t))
            })
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [S])> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| {
                LAYER_TENSORS
                    .iter()
                    .zip(l.slices_mut())
                    .map(move |(n, t)| (format!("encoder.{i}.{n}"), t))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, DEFAULT_STEP};
    use ndarray::Array;

    fn tiny_config(depth: usize, norm: NormPlacement) -> EncoderConfig {
        EncoderConfig {
            depth,
            heads: 2,
            model_dim: 8,
            mlp_ratio: 1.0,
            norm_placement: norm,
            init_std: 0.3,
            ..Default::default()
        }
    }

    fn random_input(seed: u64, seq: usize, d: usize) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array::from_shape_simple_fn((seq, d), || rng.random_range(-1.0..1.0))
    }

    /// Randomizes every tensor (including norm gains/offsets and biases).
    fn perturbed(enc: &Encoder<f64>, seed: u64) -> Encoder<f64> {
        let mut e = enc.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, t) in e.tensors_mut() {
            for v in t.iter_mut() {
                let bump = rng.random_range(-0.3..0.3);
                *v = if name.ends_with("gamma") { 1.0 + bump } else { *v + bump * 0.5 };
            }
        }
        e
    }

    /// Dense oracle: explicit loops over heads, queries and keys.
    fn attention_oracle(x: &Array2<f64>, l: &LayerParams<f64>, heads: usize) -> Array2<f64> {
        let (seq, d) = x.dim();
        let dh = d / heads;
        let proj = |w: &Array2<f64>, b: &Array1<f64>| {
            let mut out = Array2::<f64>::zeros((seq, d));
            for r in 0..seq {
                for j in 0..d {
                    let mut acc = b[j];
                    for i in 0..d {
                        acc += x[[r, i]] * w[[i, j]];
                    }
                    out[[r, j]] = acc;
                }
            }
            out
        };
        let (q, k, v) = (proj(&l.wq, &l.bq), proj(&l.wk, &l.bk), proj(&l.wv, &l.bv));
        let mut ctx = Array2::<f64>::zeros((seq, d));
        for h in 0..heads {
            for r in 0..seq {
                let scores: Vec<f64> = (0..seq)
                    .map(|c| (0..dh).map(|j| q[[r, h * dh + j]] * k[[c, h * dh + j]]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for j in 0..dh {
                    ctx[[r, h * dh + j]] = (0..seq).map(|c| e[c] / z * v[[c, h * dh + j]]).sum();
                }
            }
        }
        let mut out = Array2::<f64>::zeros((seq, d));
        for r in 0..seq {
            for j in 0..d {
                out[[r, j]] = l.bo[j] + (0..d).map(|i| ctx[[r, i]] * l.wo[[i, j]]).sum::<f64>();
            }
        }
        out
    }

    #[test]
    fn attention_matches_dense_oracle() {
        let enc = perturbed(&Encoder::<f64>::new(tiny_config(1, NormPlacement::Pre), 1).unwrap(), 2);
        let x = random_input(3, 4, 8);
        let (out, cache) = attention_forward(&x, &enc.layers[0].attention(), 2, None);
        let oracle = attention_oracle(&x, &enc.layers[0], 2);
        for (a, b) in out.iter().zip(oracle.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
        for p in &cache.probs {
            for row in p.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-9);
                assert!(row.iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn single_token_attention_is_value_path() {
        let enc = perturbed(&Encoder::<f64>::new(tiny_config(1, NormPlacement::Pre), 1).unwrap(), 5);
        let l = &enc.layers[0];
        let x = random_input(4, 1, 8);
        let (out, _) = attention_forward(&x, &l.attention(), 2, None);
        let expected = (x.dot(&l.wv) + &l.bv).dot(&l.wo) + &l.bo;
        for (a, b) in out.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_tokens_give_identical_rows() {
        let enc = perturbed(&Encoder::<f64>::new(tiny_config(2, NormPlacement::Pre), 1).unwrap(), 6);
        let row = random_input(5, 1, 8);
        let x = Array2::from_shape_fn((5, 8), |(_, j)| row[[0, j]]);
        let (out, _) = enc.forward(&x, None, None).unwrap();
        for r in 1..5 {
            for j in 0..8 {
                assert!((out[[r, j]] - out[[0, j]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn depth_zero_is_identity_and_forward_is_deterministic() {
        let enc = Encoder::<f64>::new(tiny_config(0, NormPlacement::Pre), 1).unwrap();
        let x = random_input(7, 6, 8);
        assert_eq!(enc.forward(&x, None, None).unwrap().0, x);
        let enc = perturbed(&Encoder::<f64>::new(tiny_config(2, NormPlacement::Pre), 1).unwrap(), 8);
        let a = enc.forward(&x, None, None).unwrap().0;
        let b = enc.forward(&x, None, None).unwrap().0;
        assert_eq!(a, b);
    }

    #[test]
    fn permutation_equivariance() {
        let enc = perturbed(&Encoder::<f64>::new(tiny_config(2, NormPlacement::Pre), 1).unwrap(), 9);
        let x = random_input(10, 6, 8);
        let perm = [0, 3, 2, 1, 5, 4];
        let px = Array2::from_shape_fn((6, 8), |(r, j)| x[[perm[r], j]]);
        let (out, _) = enc.forward(&x, None, None).unwrap();
        let (pout, _) = enc.forward(&px, None, None).unwrap();
        for r in 0..6 {
            for j in 0..8 {
                assert!((pout[[r, j]] - out[[perm[r], j]]).abs() < 1e-12);
            }
        }
    }

    fn check_encoder_gradients(norm: NormPlacement, dropout: Option<u64>) {
        let mut cfg = tiny_config(2, norm);
        if dropout.is_some() {
            cfg.dropout = 0.2;
        }
        let enc = perturbed(&Encoder::<f64>::new(cfg, 11).unwrap(), 12);
        let x = random_input(13, 5, 8);
        let w = random_input(14, 5, 8);
        let flat: Vec<f64> = enc.tensors().iter().flat_map(|(_, t)| t.iter().copied()).collect();
        let rebuild = |p: &[f64]| {
            let mut e = enc.clone();
            let mut off = 0;
            for (_, t) in e.tensors_mut() {
                let n = t.len();
                t.copy_from_slice(&p[off..off + n]);
                off += n;
            }
            e
        };
        let loss = |p: &[f64]| (&rebuild(p).forward(&x, None, dropout).unwrap().0 * &w).sum();
        let (_, cache) = enc.forward(&x, None, dropout).unwrap();
        let mut grads = enc.zeros_like();
        let dx = enc.backward(&w, &cache, &mut grads).unwrap();
        let analytic: Vec<f64> = grads.tensors().iter().flat_map(|(_, t)| t.iter().copied()).collect();
        let r = grad_check(loss, &flat, &analytic, DEFAULT_STEP);
        assert!(r.max_rel_err < 1e-4, "{norm:?}: {r:?}");

        let xflat: Vec<f64> = x.iter().copied().collect();
        let input_loss = |p: &[f64]| {
            let xi = Array2::from_shape_vec((5, 8), p.to_vec()).unwrap();
            (&enc.forward(&xi, None, dropout).unwrap().0 * &w).sum()
        };
        let dxflat: Vec<f64> = dx.iter().copied().collect();
        let r = grad_check(input_loss, &xflat, &dxflat, DEFAULT_STEP);
        assert!(r.max_rel_err < 1e-4, "{norm:?} input: {r:?}");
    }

    #[test]
    fn pre_norm_gradients_match_finite_differences() {
        check_encoder_gradients(NormPlacement::Pre, None);
    }

    #[test]
    fn post_norm_gradients_match_finite_differences() {
        check_encoder_gradients(NormPlacement::Post, None);
    }

    #[test]
    fn dropout_gradients_match_with_fixed_masks() {
        check_encoder_gradients(NormPlacement::Pre, Some(77));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let enc = perturbed(&Encoder::<f64>::new(tiny_config(2, NormPlacement::Pre), 1).unwrap(), 15);
        let x = random_input(16, 5, 8);
        let (_, cache) = enc.forward(&x, None, None).unwrap();
        let mut grads = enc.zeros_like();
        let dx = enc.backward(&Array2::zeros((5, 8)), &cache, &mut grads).unwrap();
        assert!(dx.iter().all(|&v| v == 0.0));
        assert!(grads.tensors().iter().all(|(_, t)| t.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn cls_only_loss_reaches_attention_parameters() {
        let enc = perturbed(&Encoder::<f64>::new(tiny_config(2, NormPlacement::Pre), 1).unwrap(), 17);
        let x = random_input(18, 5, 8);
        let (_, cache) = enc.forward(&x, None, None).unwrap();
        let mut upstream = Array2::zeros((5, 8));
        upstream.row_mut(0).fill(1.0);
        let mut grads = enc.zeros_like();
        enc.backward(&upstream, &cache, &mut grads).unwrap();
        for l in &grads.layers {
            assert!(l.wk.iter().any(|&v| v != 0.0));
            assert!(l.wv.iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn attention_mask_blocks_keys() {
        let enc = perturbed(&Encoder::<f64>::new(tiny_config(1, NormPlacement::Pre), 1).unwrap(), 19);
        let x = random_input(20, 3, 8);
        let mut allowed = Array2::from_elem((3, 3), true);
        allowed[[0, 2]] = false;
        let (_, cache) = attention_forward(&x, &enc.layers[0].attention(), 2, Some(allowed.view()));
        assert!(cache.probs.iter().all(|p| p[[0, 2]] == 0.0));
        let blocked = Array2::from_elem((3, 3), false);
        assert!(enc.forward(&x, Some(blocked.view()), None).is_err());
    }

    #[test]
    fn gelu_derivatives() {
        for act in [Activation::Gelu, Activation::GeluTanh] {
            for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
                let num = (act.apply(x + 1e-6) - act.apply(x - 1e-6)) / 2e-6;
                assert!((act.derivative(x) - num).abs() < 1e-8, "{act:?} at {x}");
            }
        }
        assert!((Activation::Gelu.apply(1.0f64) - 0.841_344_746_068_542_9).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        let mut c = EncoderConfig::default();
        assert!(c.validate().is_ok());
        assert_eq!(c.hidden_dim(), 256);
        c.heads = 3;
        assert!(c.validate().is_err());
        let c = EncoderConfig { dropout: 1.0, ..Default::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn non_finite_activations_name_the_layer() {
        let mut enc = Encoder::<f64>::new(tiny_config(2, NormPlacement::Pre), 1).unwrap();
        enc.layers[1].b2[0] = f64::NAN;
        let err = match enc.forward(&random_input(1, 3, 8), None, None) {
            Err(e) => e,
            Ok(_) => panic!("expected a non-finite error"),
        };
        assert!(err.to_string().contains("layer 1"), "{err}");
    }

    #[test]
    fn f32_forward_tracks_f64() {
        let enc = perturbed(&Encoder::<f64>::new(tiny_config(2, NormPlacement::Pre), 1).unwrap(), 21);
        let mut enc32 = Encoder::<f32>::new(enc.config.clone(), 1).unwrap();
        for ((_, dst), (_, src)) in enc32.tensors_mut().into_iter().zip(enc.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = *s as f32;
            }
        }
        let x = random_input(22, 5, 8);
        let (a, _) = enc.forward(&x, None, None).unwrap();
        let (b, _) = enc32.forward(&x.mapv(|v| v as f32), None, None).unwrap();
        for (u, v) in a.iter().zip(b.iter()) {
            assert!((u - *v as f64).abs() < 1e-4);
        }
    }
}
