//! Softmax heads and the loss terms built on them.

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Numerically stable softmax.
pub fn softmax<S: Scalar>(logits: ArrayView1<S>) -> Array1<S> {
    let max = logits.iter().copied().fold(S::neg_infinity(), S::max);
    let mut out = logits.mapv(|v| (v - max).exp());
    let z = out.sum();
    out /= z;
    out
}

/// `-ln p[y]` for one distribution.
pub fn cross_entropy<S: Scalar>(probs: ArrayView1<S>, target: usize) -> Result<S> {
    if target >= probs.len() {
        return Err(Error::InvalidInput(format!(
            "label {target} out of range for {} classes",
            probs.len()
        )));
    }
    Ok(-probs[target].ln())
}

/// Gradient of `-ln softmax(z)[y]` with respect to `z`: `p - onehot(y)`.
pub fn cross_entropy_grad<S: Scalar>(probs: ArrayView1<S>, target: usize) -> Array1<S> {
    let mut g = probs.to_owned();
    g[target] -= S::one();
    g
}

/// Mean negative log-likelihood of the targets over the masked set.
/// An empty set contributes zero.
pub fn mae_loss<S: Scalar>(predictions: &[Array1<S>], targets: &[usize]) -> Result<S> {
    if predictions.len() != targets.len() {
        return Err(Error::shape("mae targets", predictions.len(), targets.len()));
    }
    if predictions.is_empty() {
        log::warn!("mae_loss called with no masked positions; returning 0");
        return Ok(S::zero());
    }
    let mut total = S::zero();
    for (p, &y) in predictions.iter().zip(targets) {
        total += cross_entropy(p.view(), y)?;
    }
    Ok(total / S::of_usize(predictions.len()))
}

pub fn cls_loss<S: Scalar>(probs: ArrayView1<S>, label: usize) -> Result<S> {
    cross_entropy(probs, label)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_mae: f64,
    pub lambda_cls: f64,
    pub lambda_vq: f64,
}

impl LossWeights {
    pub const PRETRAIN: LossWeights = LossWeights {
        lambda_mae: 1.0,
        lambda_cls: 0.0,
        lambda_vq: 1.0,
    };
    pub const FINETUNE: LossWeights = LossWeights {
        lambda_mae: 0.0,
        lambda_cls: 1.0,
        lambda_vq: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_mae, self.lambda_cls, self.lambda_vq];
        if all.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        if all.iter().all(|&l| l == 0.0) {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        Ok(())
    }
}

/// Weighted sum of the three losses. A zero weight drops its term entirely,
/// so a non-finite value there cannot leak into the total.
pub fn total_loss(mae: f64, cls: f64, vq: f64, w: &LossWeights) -> f64 {
    [(w.lambda_mae, mae), (w.lambda_cls, cls), (w.lambda_vq, vq)]
        .iter()
        .filter(|(l, _)| *l != 0.0)
        .map(|(l, v)| l * v)
        .sum()
}
