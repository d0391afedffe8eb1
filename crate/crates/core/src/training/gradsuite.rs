//! Finite-difference check of every trainable tensor of a tiny network,
//! grouped into components, plus the commitment-loss gradients.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{derive_seed, example_pass, Example, Needs};
use crate::embedder::{plan_mask, MaskConfig};
use crate::encoder::{EncoderConfig, NormPlacement};
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, relative_error, DEFAULT_STEP};
use crate::ingest::{ChannelMetadata, SensorWindow};
use crate::metadata::ProviderConfig;
use crate::model::{prepare_window, quantize_window, MetaTable, ModelConfig, Network};
use crate::quantizer::{vq_loss, Codebook};

pub const SUITE_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentCheck {
    pub component: String,
    pub max_rel_err: f64,
    pub checked: usize,
    pub passed: bool,
}

fn component_of(name: &str) -> String {
    let parts: Vec<&str> = name.split('.').collect();
    match parts.as_slice() {
        ["encoder", layer, ..] => format!("encoder.layer{layer}"),
        ["embed", "stat", ..] => "embed.stat".into(),
        [first, second] if *first == "embed" => format!("embed.{second}"),
        [first, ..] => (*first).into(),
        [] => name.into(),
    }
}

fn tiny_config(norm: NormPlacement) -> ModelConfig {
    ModelConfig {
        codebook_size: 6,
        segment_len: 4,
        window_length: 20,
        metadata: ProviderConfig::DeterministicHash { dim: 5, seed: 3 },
        encoder: EncoderConfig {
            depth: 2,
            heads: 2,
            model_dim: 8,
            mlp_ratio: 1.5,
            norm_placement: norm,
            ..EncoderConfig::default()
        },
        mask: MaskConfig { ratio: 0.5, ..MaskConfig::default() },
        ..ModelConfig::default()
    }
}

/// Checks every parameter of a tiny model (width 8, depth 2) against central
/// differences of the joint masked-prediction and classification loss. Two
/// layouts are used, one channel of five segments (8 tokens) and two channels
/// of one segment (7 tokens), each under pre- and post-norm.
pub fn gradient_suite(seed: u64) -> Result<Vec<ComponentCheck>> {
    let mut worst: Vec<(String, f64, usize)> = Vec::new();
    let layouts = [(20usize, 1usize), (4, 2)];
    for (norm, (len, n_channels)) in [NormPlacement::Pre, NormPlacement::Post]
        .into_iter()
        .flat_map(|n| layouts.into_iter().map(move |l| (n, l)))
    {
        let config = tiny_config(norm);
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[1, len as u64]));
        let samples = Array2::from_shape_simple_fn((len, n_channels), || rng.random_range(-2.0..2.0));
        let channels = [
            ChannelMetadata::new("wrist", "acc", "x", 50.0)?,
            ChannelMetadata::new("ankle", "gyro", "z", 50.0)?,
        ][..n_channels]
            .to_vec();
        let window = prepare_window(&SensorWindow::<f64>::new(samples, channels, Some(1), "gradcheck")?, &config)?;
        let codebook = Codebook::from_prototypes(Array2::from_shape_simple_fn(
            (config.codebook_size, config.segment_len),
            || rng.random_range(-1.5..1.5),
        ))?;
        let indices = quantize_window(&codebook, &window);
        debug_assert!(window.tokens(&indices).seq_len() <= 8);
        let mask = plan_mask(&indices, config.codebook_size, &config.mask, derive_seed(seed, &[2]))?;
        let mae_scale = 1.0 / mask.masked.len().max(1) as f64;
        let provider = config.metadata.build()?;
        let meta = MetaTable::<f64>::build(provider.as_ref(), window.descriptors.iter())?;
        let mut net = Network::<f64>::new(&config, provider.dim(), Some(3), derive_seed(seed, &[3]))?;
        // larger weights than the training init so every path carries signal
        for t in net.tensors_mut() {
            for v in t.data.iter_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
        }
        let example = Example {
            window: &window,
            indices,
            meta: meta.for_window(&window)?,
            mask: Some(mask),
            dropout_seed: None,
        };
        let needs = Needs { embedding: true, encoder: true, heads: true };
        let loss = |n: &Network<f64>| -> Result<f64> {
            let s = example_pass(n, &example, 0.0, 0.0, Needs::NONE, None)?;
            Ok(mae_scale * s.mae_sum + s.cls_loss.unwrap_or(0.0))
        };
        let mut grads = net.zeros_like();
        example_pass(&net, &example, mae_scale, 1.0, needs, Some(&mut grads))?;
        let analytic: Vec<(String, Vec<f64>)> =
            grads.tensors().into_iter().map(|t| (t.name, t.data.to_vec())).collect();

        for (ti, (name, g)) in analytic.iter().enumerate() {
            let mut max_err: f64 = 0.0;
            for (i, &analytic) in g.iter().enumerate() {
                let orig = net.tensors()[ti].data[i];
                let mut eval = |v: f64| -> Result<f64> {
                    net.tensors_mut()[ti].data[i] = v;
                    loss(&net)
                };
                let plus = eval(orig + DEFAULT_STEP)?;
                let minus = eval(orig - DEFAULT_STEP)?;
                eval(orig)?;
                let numeric = (plus - minus) / (2.0 * DEFAULT_STEP);
                max_err = max_err.max(relative_error(analytic, numeric));
            }
            let component = format!("{}{}", component_of(name), if norm == NormPlacement::Post { "/post-norm" } else { "" });
            match worst.iter_mut().find(|(c, _, _)| *c == component) {
                Some(entry) => {
                    entry.1 = entry.1.max(max_err);
                    entry.2 += g.len();
                }
                None => worst.push((component, max_err, g.len())),
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[4]));
    let (mut vq_err, mut vq_checked) = (0.0f64, 0usize);
    for _ in 0..10 {
        let s: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let z: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let beta = 0.25;
        let l = vq_loss(&s, &z, beta);
        // the stopped argument contributes only its own term
        let by_input = grad_check(|x| beta * vq_loss(x, &z, beta).loss / (1.0 + beta), &s, &l.grad_input, DEFAULT_STEP);
        let by_code = grad_check(|x| vq_loss(&s, x, beta).loss / (1.0 + beta), &z, &l.grad_codeword, DEFAULT_STEP);
        vq_err = vq_err.max(by_input.max_rel_err).max(by_code.max_rel_err);
        vq_checked += by_input.checked + by_code.checked;
    }
    worst.push(("commitment".into(), vq_err, vq_checked));

    let out: Vec<ComponentCheck> = worst
        .into_iter()
        .map(|(component, max_rel_err, checked)| ComponentCheck {
            passed: max_rel_err < SUITE_TOLERANCE,
            component,
            max_rel_err,
            checked,
        })
        .collect();
    if out.iter().any(|c| !c.max_rel_err.is_finite()) {
        return Err(Error::NonFinite("gradient check".into()));
    }
    Ok(out)
}
