//! Differentiable building blocks: layer normalization, GELU, multi-head
//! self-attention. Row-major convention: activations are `Seq x D` and a
//! linear layer computes `x W + b` with `W` stored `in x out`.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use crate::scalar::Scalar;

pub struct LayerNormCache<S> {
    pub normed: Array2<S>,
    pub inv_std: Array1<S>,
}

pub fn layer_norm_forward<S: Scalar>(
    x: &Array2<S>,
    gamma: &Array1<S>,
    beta: &Array1<S>,
    eps: S,
) -> (Array2<S>, LayerNormCache<S>) {
    let d = S::of_usize(x.ncols());
    let mut normed = Array2::zeros(x.raw_dim());
    let mut inv_std = Array1::zeros(x.nrows());
    for (r, row) in x.rows().into_iter().enumerate() {
        let mean = row.sum() / d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / d;
        let inv = S::one() / (var + eps).sqrt();
        inv_std[r] = inv;
        normed
            .row_mut(r)
            .zip_mut_with(&row, |n, &v| *n = (v - mean) * inv);
    }
    let out = &normed * gamma + beta;
    (out, LayerNormCache { normed, inv_std })
}

/// Returns `dL/dx`, accumulating into `dgamma`/`dbeta`.
pub fn layer_norm_backward<S: Scalar>(
    grad: &Array2<S>,
    cache: &LayerNormCache<S>,
    gamma: &Array1<S>,
    dgamma: &mut Array1<S>,
    dbeta: &mut Array1<S>,
) -> Array2<S> {
    *dgamma += &(grad * &cache.normed).sum_axis(Axis(0));
    *dbeta += &grad.sum_axis(Axis(0));
    let d = S::of_usize(grad.ncols());
    let dnormed = grad * gamma;
    let mut dx = Array2::zeros(grad.raw_dim());
    for r in 0..grad.nrows() {
        let dn = dnormed.row(r);
        let n = cache.normed.row(r);
        let sum_dn = dn.sum();
        let sum_dn_n = dn.iter().zip(n.iter()).map(|(&a, &b)| a * b).sum::<S>();
        let scale = cache.inv_std[r] / d;
        for j in 0..grad.ncols() {
            dx[[r, j]] = scale * (d * dn[j] - sum_dn - n[j] * sum_dn_n);
        }
    }
    dx
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    /// `x * Phi(x)` with the exact error function.
    Gelu,
    /// The tanh approximation.
    GeluTanh,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

impl Activation {
    pub fn apply<S: Scalar>(self, x: S) -> S {
        let half = S::of(0.5);
        match self {
            Activation::Gelu => half * x * (S::one() + (x / S::of(std::f64::consts::SQRT_2)).erf()),
            Activation::GeluTanh => {
                let inner = S::of(SQRT_2_OVER_PI) * (x + S::of(GELU_CUBIC) * x * x * x);
                half * x * (S::one() + inner.tanh())
            }
        }
    }

    pub fn derivative<S: Scalar>(self, x: S) -> S {
        let half = S::of(0.5);
        match self {
            Activation::Gelu => {
                let cdf = half * (S::one() + (x / S::of(std::f64::consts::SQRT_2)).erf());
                let pdf = (-half * x * x).exp() / S::of((2.0 * std::f64::consts::PI).sqrt());
                cdf + x * pdf
            }
            Activation::GeluTanh => {
                let c = S::of(SQRT_2_OVER_PI);
                let a = S::of(GELU_CUBIC);
                let t = (c * (x + a * x * x * x)).tanh();
                half * (S::one() + t)
                    + half * x * (S::one() - t * t) * c * (S::one() + S::of(3.0) * a * x * x)
            }
        }
    }
}

/// Row-wise softmax; masked entries (`false`) get probability zero.
pub fn softmax_rows<S: Scalar>(scores: &mut Array2<S>, allowed: Option<ArrayView2<bool>>) {
    for (r, mut row) in scores.rows_mut().into_iter().enumerate() {
        if let Some(mask) = allowed {
            for (j, v) in row.iter_mut().enumerate() {
                if !mask[[r, j]] {
                    *v = S::neg_infinity();
                }
            }
        }
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let mut sum = S::zero();
        for v in row.iter_mut() {
            *v = if v.is_infinite() && *v < S::zero() {
                S::zero()
            } else {
                (*v - max).exp()
            };
            sum += *v;
        }
        row.mapv_inplace(|v| v / sum);
    }
}

pub struct AttentionCache<S> {
    pub input: Array2<S>,
    pub q: Array2<S>,
    pub k: Array2<S>,
    pub v: Array2<S>,
    /// One `Seq x Seq` probability matrix per head.
    pub probs: Vec<Array2<S>>,
    pub context: Array2<S>,
}

pub struct AttentionWeights<'a, S> {
    pub wq: &'a Array2<S>,
    pub bq: &'a Array1<S>,
    pub wk: &'a Array2<S>,
    pub bk: &'a Array1<S>,
    pub wv: &'a Array2<S>,
    pub bv: &'a Array1<S>,
    pub wo: &'a Array2<S>,
    pub bo: &'a Array1<S>,
}

pub struct AttentionGrads<'a, S> {
    pub wq: &'a mut Array2<S>,
    pub bq: &'a mut Array1<S>,
    pub wk: &'a mut Array2<S>,
    pub bk: &'a mut Array1<S>,
    pub wv: &'a mut Array2<S>,
    pub bv: &'a mut Array1<S>,
    pub wo: &'a mut Array2<S>,
    pub bo: &'a mut Array1<S>,
}

/// `softmax(Q K^T / sqrt(d_head)) V` per head, concatenated and projected.
pub fn attention_forward<S: Scalar>(
    x: &Array2<S>,
    w: &AttentionWeights<S>,
    heads: usize,
    allowed: Option<ArrayView2<bool>>,
) -> (Array2<S>, AttentionCache<S>) {
    let (seq, d) = x.dim();
    let dh = d / heads;
    let q = x.dot(w.wq) + w.bq;
    let k = x.dot(w.wk) + w.bk;
    let v = x.dot(w.wv) + w.bv;
    let scale = S::one() / S::of_usize(dh).sqrt();
    let mut context = Array2::zeros((seq, d));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let qh = q.slice(cols);
        let kh = k.slice(cols);
        let vh = v.slice(cols);
        let mut scores = qh.dot(&kh.t()) * scale;
        softmax_rows(&mut scores, allowed);
        context.slice_mut(cols).assign(&scores.dot(&vh));
        probs.push(scores);
    }
    let out = context.dot(w.wo) + w.bo;
    (
        out,
        AttentionCache {
            input: x.clone(),
            q,
            k,
            v,
            probs,
            context,
        },
    )
}

/// Returns `dL/dx` and accumulates the projection gradients.
pub fn attention_backward<S: Scalar>(
    grad: &Array2<S>,
    cache: &AttentionCache<S>,
    w: &AttentionWeights<S>,
    g: AttentionGrads<S>,
    heads: usize,
) -> Array2<S> {
    let (seq, d) = grad.dim();
    let dh = d / heads;
    let scale = S::one() / S::of_usize(dh).sqrt();
    *g.wo += &cache.context.t().dot(grad);
    *g.bo += &grad.sum_axis(Axis(0));
    let dcontext = grad.dot(&w.wo.t());
    let mut dq = Array2::zeros((seq, d));
    let mut dk = Array2::zeros((seq, d));
    let mut dv = Array2::zeros((seq, d));
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let p = &cache.probs[h];
        let dctx = dcontext.slice(cols);
        let dp = dctx.dot(&cache.v.slice(cols).t());
        dv.slice_mut(cols).assign(&p.t().dot(&dctx));
        let mut ds = Array2::zeros((seq, seq));
        for r in 0..seq {
            let dot = p.row(r).dot(&dp.row(r));
            for c in 0..seq {
                ds[[r, c]] = p[[r, c]] * (dp[[r, c]] - dot) * scale;
            }
        }
        dq.slice_mut(cols).assign(&ds.dot(&cache.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&cache.q.slice(cols)));
    }
    let x = &cache.input;
    *g.wq += &x.t().dot(&dq);
    *g.wk += &x.t().dot(&dk);
    *g.wv += &x.t().dot(&dv);
    *g.bq += &dq.sum_axis(Axis(0));
    *g.bk += &dk.sum_axis(Axis(0));
    *g.bv += &dv.sum_axis(Axis(0));
    dq.dot(&w.wq.t()) + dk.dot(&w.wk.t()) + dv.dot(&w.wv.t())
}
