//! AdamW with decoupled weight decay, and parameter-group freezing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Network, ParamGroup};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Windows per optimizer step.
    pub batch_size: usize,
    /// Windows per gradient-accumulation chunk.
    pub micro_batch: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 512,
            micro_batch: 32,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "optimizer.learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !(self.weight_decay >= 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("optimizer weight_decay >= 0 and betas in [0, 1) required".into()));
        }
        if self.batch_size == 0 || self.micro_batch == 0 {
            return Err(Error::Config("optimizer batch_size and micro_batch must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Trainability {
    Frozen,
    Trainable,
}

/// Which parameter groups an optimizer may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "FreezeRepr", into = "FreezeRepr")]
pub struct FreezePolicy {
    pub codebook: Trainability,
    pub embedding: Trainability,
    pub encoder: Trainability,
    pub mae_head: Trainability,
    pub cls_head: Trainability,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FreezeFlags {
    codebook: Trainability,
    embedding: Trainability,
    encoder: Trainability,
    mae_head: Trainability,
    cls_head: Trainability,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum FreezeRepr {
    Preset(String),
    Flags(FreezeFlags),
}

impl TryFrom<FreezeRepr> for FreezePolicy {
    type Error = String;

    fn try_from(r: FreezeRepr) -> std::result::Result<Self, String> {
        match r {
            FreezeRepr::Preset(name) => FreezePolicy::preset(&name).map_err(|e| e.to_string()),
            FreezeRepr::Flags(f) => Ok(FreezePolicy {
                codebook: f.codebook,
                embedding: f.embedding,
                encoder: f.encoder,
                mae_head: f.mae_head,
                cls_head: f.cls_head,
            }),
        }
    }
}

impl From<FreezePolicy> for FreezeRepr {
    fn from(p: FreezePolicy) -> Self {
        for name in ["pretrain", "linear-probe", "encoder-finetune"] {
            if FreezePolicy::preset(name).ok() == Some(p) {
                return FreezeRepr::Preset(name.to_string());
            }
        }
        FreezeRepr::Flags(FreezeFlags {
            codebook: p.codebook,
            embedding: p.embedding,
            encoder: p.encoder,
            mae_head: p.mae_head,
            cls_head: p.cls_head,
        })
    }
}

impl Default for FreezePolicy {
    fn default() -> Self {
        Self::ENCODER_FINETUNE
    }
}

impl FreezePolicy {
    pub const PRETRAIN: FreezePolicy = FreezePolicy {
        codebook: Trainability::Trainable,
        embedding: Trainability::Trainable,
        encoder: Trainability::Trainable,
        mae_head: Trainability::Trainable,
        cls_head: Trainability::Frozen,
    };
    /// Only the classification head learns.
    pub const LINEAR_PROBE: FreezePolicy = FreezePolicy {
        codebook: Trainability::Frozen,
        embedding: Trainability::Frozen,
        encoder: Trainability::Frozen,
        mae_head: Trainability::Frozen,
        cls_head: Trainability::Trainable,
    };
    /// Classification head and transformer layers learn.
    pub const ENCODER_FINETUNE: FreezePolicy = FreezePolicy {
        codebook: Trainability::Frozen,
        embedding: Trainability::Frozen,
        encoder: Trainability::Trainable,
        mae_head: Trainability::Frozen,
        cls_head: Trainability::Trainable,
    };

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "pretrain" => Ok(Self::PRETRAIN),
            "linear-probe" => Ok(Self::LINEAR_PROBE),
            "encoder-finetune" => Ok(Self::ENCODER_FINETUNE),
            other => Err(Error::Config(format!(
                "unknown freeze preset `{other}` (expected pretrain, linear-probe or encoder-finetune)"
            ))),
        }
    }

    pub fn is_trainable(&self, group: ParamGroup) -> bool {
        let t = match group {
            ParamGroup::Codebook => self.codebook,
            ParamGroup::Embedding => self.embedding,
            ParamGroup::Encoder => self.encoder,
            ParamGroup::MaeHead => self.mae_head,
            ParamGroup::ClsHead => self.cls_head,
        };
        t == Trainability::Trainable
    }

    pub fn validate(&self) -> Result<()> {
        let groups = [
            ParamGroup::Codebook,
            ParamGroup::Embedding,
            ParamGroup::Encoder,
            ParamGroup::MaeHead,
            ParamGroup::ClsHead,
        ];
        if groups.iter().any(|&g| self.is_trainable(g)) {
            Ok(())
        } else {
            Err(Error::Config("freeze policy leaves nothing trainable".into()))
        }
    }
}

/// AdamW over the tensors of a [`Network`], in their fixed order.
#[derive(Debug, Clone)]
pub struct AdamW<S> {
    pub config: OptimizerConfig,
    pub step: u64,
    first: Vec<Vec<S>>,
    second: Vec<Vec<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(config: OptimizerConfig, net: &Network<S>) -> Self {
        let shapes: Vec<usize> = net.tensors().iter().map(|t| t.data.len()).collect();
        Self {
            config,
            step: 0,
            first: shapes.iter().map(|&n| vec![S::zero(); n]).collect(),
            second: shapes.iter().map(|&n| vec![S::zero(); n]).collect(),
        }
    }

    /// One update of every trainable tensor. Nothing is modified when any
    /// trainable gradient is non-finite.
    pub fn step(&mut self, params: &mut Network<S>, grads: &Network<S>, freeze: &FreezePolicy) -> Result<()> {
        let grad_tensors = grads.tensors();
        if grad_tensors.len() != self.first.len() {
            return Err(Error::shape("optimizer state", self.first.len(), grad_tensors.len()));
        }
        for g in &grad_tensors {
            if freeze.is_trainable(g.group) && g.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of `{}`; step aborted", g.name)));
            }
        }
        self.step += 1;
        let c = &self.config;
        let lr = S::of(c.learning_rate);
        let decay = S::one() - S::of(c.learning_rate * c.weight_decay);
        let (b1, b2) = (S::of(c.beta1), S::of(c.beta2));
        let bias1 = S::one() - S::of(c.beta1.powi(self.step as i32));
        let bias2 = S::one() - S::of(c.beta2.powi(self.step as i32));
        let eps = S::of(c.eps);
        for (i, (p, g)) in params.tensors_mut().into_iter().zip(&grad_tensors).enumerate() {
            if !freeze.is_trainable(p.group) {
                continue;
            }
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for j in 0..p.data.len() {
                let gj = g.data[j];
                m[j] = b1 * m[j] + (S::one() - b1) * gj;
                v[j] = b2 * v[j] + (S::one() - b2) * gj * gj;
                let m_hat = m[j] / bias1;
                let v_hat = v[j] / bias2;
                p.data[j] = p.data[j] * decay - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
