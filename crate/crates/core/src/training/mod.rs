//! Two-stage training: masked-primitive pretraining, then supervised
//! fine-tuning under a freeze policy.

pub mod gradsuite;
pub mod heads;
pub mod metrics;
pub mod optim;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedder::{apply_mask, plan_mask, MaskPlan};
use crate::error::{Error, Result};
use crate::ingest::SensorWindow;
use crate::model::{prepare_window, quantize_window, LinearHead, MetaTable, ModelConfig, MoPFormer, Network, PreparedWindow};
use crate::quantizer::{usage_report, vq_loss, Codebook, UpdateMode};
use crate::scalar::Scalar;

pub use heads::{cls_loss, cross_entropy, cross_entropy_grad, mae_loss, softmax, total_loss, LossWeights};
pub use gradsuite::{gradient_suite, ComponentCheck};
pub use metrics::{classification_metrics, Metrics};
pub use optim::{AdamW, FreezePolicy, OptimizerConfig, Trainability};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodebookTraining {
    pub update_mode: UpdateMode,
    /// Step size for `sgd` (scaled by the VQ loss weight) or decay for `ema`.
    pub rate: f64,
    pub reseed_dead: bool,
    /// Upper bound on the number of segments fed to k-means initialization.
    pub init_sample_limit: usize,
}

impl Default for CodebookTraining {
    fn default() -> Self {
        Self {
            update_mode: UpdateMode::Sgd,
            rate: 0.1,
            reseed_dead: false,
            init_sample_limit: 20_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub loss: LossWeights,
    pub heldout_fraction: f64,
    pub codebook: CodebookTraining,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            loss: LossWeights::PRETRAIN,
            heldout_fraction: 0.1,
            codebook: CodebookTraining::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub loss: LossWeights,
    pub freeze: FreezePolicy,
    /// Fraction of windows used for fine-tuning; the rest is held out.
    pub train_fraction: f64,
    pub codebook: CodebookTraining,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            loss: LossWeights::FINETUNE,
            freeze: FreezePolicy::default(),
            train_fraction: 0.2,
            codebook: CodebookTraining::default(),
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: String,
    pub epoch: usize,
    pub total_loss: f64,
    pub train_mae: Option<f64>,
    pub heldout_mae: Option<f64>,
    pub train_cls: Option<f64>,
    pub train_accuracy: Option<f64>,
    pub vq_loss: f64,
    pub perplexity: Option<f64>,
    pub active_codes: Option<usize>,
    pub masked_fraction: Option<f64>,
    pub steps: u64,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

/// SplitMix64 over a base seed and a list of stream ids.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut z = base;
    for &p in parts {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(p.wrapping_mul(0xD6E8_FEB8_6659_FD93));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// Which gradients a batch pass must produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Needs {
    embedding: bool,
    encoder: bool,
    heads: bool,
}

impl Needs {
    fn from_policy(p: &FreezePolicy) -> Self {
        use crate::model::ParamGroup as G;
        let embedding = p.is_trainable(G::Embedding);
        let encoder = embedding || p.is_trainable(G::Encoder);
        Self {
            embedding,
            encoder,
            heads: encoder || p.is_trainable(G::MaeHead) || p.is_trainable(G::ClsHead),
        }
    }

    const NONE: Needs = Needs { embedding: false, encoder: false, heads: false };
}

struct Example<'a, S> {
    window: &'a PreparedWindow<S>,
    indices: Vec<usize>,
    meta: Vec<Array1<S>>,
    mask: Option<MaskPlan>,
    dropout_seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, Default)]
struct ExampleStats {
    mae_sum: f64,
    mae_count: usize,
    cls_loss: Option<f64>,
    correct: Option<bool>,
}

/// Forward pass of one window plus, when asked, the reverse pass scaled by
/// the per-term weights.
fn example_pass<S: Scalar>(
    net: &Network<S>,
    ex: &Example<'_, S>,
    mae_scale: S,
    cls_scale: S,
    needs: Needs,
    mut grads: Option<&mut Network<S>>,
) -> Result<ExampleStats> {
    let tokens = ex.window.tokens(&ex.indices);
    let input = match &ex.mask {
        Some(plan) => apply_mask(&tokens, plan),
        None => tokens,
    };
    let (seq, cache) = net.embedder.forward(&input, &ex.meta)?;
    let (h, enc_cache) = net.encoder.forward(&seq.vectors, None, ex.dropout_seed)?;
    let mut dh = Array2::<S>::zeros(h.dim());
    let mut stats = ExampleStats::default();

    if let Some(plan) = &ex.mask {
        let n = ex.window.segments_per_channel;
        for (&p, &target) in plan.masked.iter().zip(&plan.targets) {
            let row = input.position_of(p / n, p % n);
            let probs = softmax(net.mae.logits(h.row(row)).view());
            stats.mae_sum += cross_entropy(probs.view(), target)?.f64();
            stats.mae_count += 1;
            if let (true, Some(g)) = (needs.heads && mae_scale != S::zero(), grads.as_deref_mut()) {
                let dlogits = cross_entropy_grad(probs.view(), target) * mae_scale;
                let back = net.mae.backward(h.row(row), &dlogits, &mut g.mae);
                let mut r = dh.row_mut(row);
                r += &back;
            }
        }
    }
    if let (Some(cls), Some(label)) = (&net.cls, ex.window.label) {
        let probs = softmax(cls.logits(h.row(0)).view());
        stats.cls_loss = Some(cross_entropy(probs.view(), label)?.f64());
        stats.correct = Some(crate::model::argmax(probs.view()) == label);
        if let (true, Some(g)) = (needs.heads && cls_scale != S::zero(), grads.as_deref_mut()) {
            let dlogits = cross_entropy_grad(probs.view(), label) * cls_scale;
            let g = g.cls.as_mut().expect("gradient buffers mirror the network");
            let back = cls.backward(h.row(0), &dlogits, g);
            let mut r = dh.row_mut(0);
            r += &back;
        }
    }
    if let (true, Some(g)) = (needs.encoder, grads) {
        let dx = net.encoder.backward(&dh, &enc_cache, &mut g.encoder)?;
        if needs.embedding {
            net.embedder.backward(&input, &seq, &cache, &dx, &mut g.embedder);
        }
    }
    Ok(stats)
}

/// Sums per-window gradients over fixed-size chunks, then adds the chunk
/// sums in chunk order, so the result does not depend on the thread count.
fn batch_pass<S: Scalar>(
    net: &Network<S>,
    examples: &[Example<'_, S>],
    mae_scale: S,
    cls_scale: S,
    needs: Needs,
    micro_batch: usize,
) -> Result<(Network<S>, Vec<ExampleStats>)> {
    let chunks: Vec<&[Example<'_, S>]> = examples.chunks(micro_batch.max(1)).collect();
    let wave = rayon::current_num_threads().max(1);
    let mut total = net.zeros_like();
    let mut stats = Vec::with_capacity(examples.len());
    for group in chunks.chunks(wave) {
        let results: Vec<Result<(Network<S>, Vec<ExampleStats>)>> = group
            .par_iter()
            .map(|chunk| {
                let mut g = net.zeros_like();
                let mut s = Vec::with_capacity(chunk.len());
                for ex in chunk.iter() {
                    s.push(example_pass(net, ex, mae_scale, cls_scale, needs, Some(&mut g))?);
                }
                Ok((g, s))
            })
            .collect();
        for r in results {
            let (g, s) = r?;
            total.add_assign(&g);
            stats.extend(s);
        }
    }
    Ok((total, stats))
}

/// Forward-only pass over many windows.
fn forward_stats<S: Scalar>(net: &Network<S>, examples: &[Example<'_, S>]) -> Result<Vec<ExampleStats>> {
    examples
        .par_iter()
        .map(|ex| example_pass(net, ex, S::zero(), S::zero(), Needs::NONE, None))
        .collect()
}

fn prepare_all<S: Scalar>(windows: &[SensorWindow<S>], config: &ModelConfig) -> Result<Vec<PreparedWindow<S>>> {
    windows.par_iter().map(|w| prepare_window(w, config)).collect()
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

/// Deterministic subsample of normalized segments for codebook init.
fn init_sample<S: Scalar>(windows: &[&PreparedWindow<S>], limit: usize, l: usize, seed: u64) -> Array2<S> {
    let all: Vec<&Vec<S>> = windows.iter().flat_map(|w| w.segments.iter()).collect();
    let picked: Vec<&Vec<S>> = if all.len() > limit {
        let mut order = shuffled(all.len(), seed);
        order.truncate(limit);
        order.sort_unstable();
        order.into_iter().map(|i| all[i]).collect()
    } else {
        all
    };
    let mut out = Array2::zeros((picked.len(), l));
    for (r, s) in picked.iter().enumerate() {
        out.row_mut(r).assign(&ndarray::ArrayView1::from(s.as_slice()));
    }
    out
}

/// Applies the commitment-loss codebook rule to one batch and returns the
/// summed commitment loss and the number of segments.
fn codebook_batch<S: Scalar>(
    codebook: &mut Codebook<S>,
    examples: &[Example<'_, S>],
    beta: S,
    lambda_vq: f64,
    rule: &CodebookTraining,
    trainable: bool,
) -> Result<(f64, usize)> {
    let mut sum = 0.0;
    let mut pairs: Vec<(&[S], usize)> = Vec::new();
    for ex in examples {
        for (seg, &idx) in ex.window.segments.iter().zip(&ex.indices) {
            let z = codebook.prototypes.row(idx);
            sum += vq_loss(seg, z.as_slice().expect("standard layout"), beta).loss.f64();
            pairs.push((seg.as_slice(), idx));
        }
    }
    if trainable && lambda_vq > 0.0 {
        let rate = match rule.update_mode {
            UpdateMode::Sgd => (rule.rate * lambda_vq).min(1.0),
            UpdateMode::Ema => rule.rate,
        };
        codebook.update(&pairs, rule.update_mode, S::of(rate))?;
    }
    Ok((sum, pairs.len()))
}

pub struct PretrainOutcome<S> {
    pub model: MoPFormer<S>,
    pub records: Vec<EpochRecord>,
    pub heldout: Vec<usize>,
}

/// Masked-primitive pretraining over the pooled windows of every dataset.
/// Labels are ignored. `on_epoch` sees each log record as it is produced.
pub fn pretrain<S: Scalar>(
    windows: &[SensorWindow<S>],
    config: &ModelConfig,
    optimizer: &OptimizerConfig,
    stage: &PretrainConfig,
    seed: u64,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<PretrainOutcome<S>> {
    config.validate()?;
    optimizer.validate()?;
    stage.loss.validate()?;
    if windows.is_empty() {
        return Err(Error::Data("pretraining needs at least one window".into()));
    }
    if !(0.0..1.0).contains(&stage.heldout_fraction) {
        return Err(Error::Config(format!(
            "pretrain.heldout_fraction {} outside [0, 1)",
            stage.heldout_fraction
        )));
    }
    let prepared = prepare_all(windows, config)?;
    let provider = config.metadata.build()?;
    let meta = MetaTable::<S>::build(provider.as_ref(), prepared.iter().flat_map(|w| w.descriptors.iter()))?;

    let n = prepared.len();
    let mut n_held = (stage.heldout_fraction * n as f64).round() as usize;
    if n_held >= n {
        n_held = n - 1;
    }
    let order = shuffled(n, derive_seed(seed, &[1]));
    let heldout: Vec<usize> = order[..n_held].to_vec();
    let train: Vec<usize> = order[n_held..].to_vec();

    let train_windows: Vec<&PreparedWindow<S>> = train.iter().map(|&i| &prepared[i]).collect();
    let sample = init_sample(
        &train_windows,
        stage.codebook.init_sample_limit.max(config.codebook_size),
        config.segment_len,
        derive_seed(seed, &[2]),
    );
    let mut codebook = Codebook::init(
        config.codebook_size,
        config.segment_len,
        config.codebook_init,
        Some(sample.view()),
        derive_seed(seed, &[3]),
    )?;
    let mut net = Network::new(config, provider.dim(), None, derive_seed(seed, &[4]))?;
    let policy = FreezePolicy::PRETRAIN;
    let mut opt = AdamW::new(optimizer.clone(), &net);
    let needs = Needs::from_policy(&policy);
    let beta = S::of(config.beta);
    let k = config.codebook_size;
    let dropout = config.encoder.dropout > 0.0;
    let mut records = Vec::with_capacity(stage.epochs);

    for epoch in 1..=stage.epochs {
        codebook.reset_usage();
        let order = {
            let mut o = train.clone();
            o.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[5, epoch as u64])));
            o
        };
        let (mut mae_sum, mut mae_count, mut vq_sum, mut seg_count, mut motion) = (0.0, 0usize, 0.0, 0usize, 0usize);
        for batch in order.chunks(optimizer.batch_size) {
            let mut examples = Vec::with_capacity(batch.len());
            for &i in batch {
                let w = &prepared[i];
                let indices = quantize_window(&codebook, w);
                codebook.record_usage(indices.iter().copied());
                let mask = plan_mask(&indices, k, &config.mask, derive_seed(seed, &[6, epoch as u64, i as u64]))?;
                motion += indices.len();
                examples.push(Example {
                    window: w,
                    meta: meta.for_window(w)?,
                    indices,
                    mask: Some(mask),
                    dropout_seed: dropout.then(|| derive_seed(seed, &[7, epoch as u64, i as u64])),
                });
            }
            let masked: usize = examples.iter().map(|e| e.mask.as_ref().map_or(0, |m| m.masked.len())).sum();
            let mae_scale = if masked > 0 {
                S::of(stage.loss.lambda_mae / masked as f64)
            } else {
                S::zero()
            };
            let (grads, stats) = batch_pass(&net, &examples, mae_scale, S::zero(), needs, optimizer.micro_batch)?;
            opt.step(&mut net, &grads, &policy)?;
            let (vq, segs) = codebook_batch(
                &mut codebook,
                &examples,
                beta,
                stage.loss.lambda_vq,
                &stage.codebook,
                true,
            )?;
            vq_sum += vq;
            seg_count += segs;
            for s in stats {
                mae_sum += s.mae_sum;
                mae_count += s.mae_count;
            }
        }
        let usage = usage_report(&codebook.usage_counts).ok();
        if stage.codebook.reseed_dead {
            let pool: Vec<Vec<S>> = train_windows.iter().flat_map(|w| w.segments.iter().cloned()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[8, epoch as u64]));
            let dead = codebook.reseed_dead(&pool, &mut rng);
            if !dead.is_empty() {
                log::info!("epoch {epoch}: re-seeded {} unused codes", dead.len());
            }
        }
        let heldout_mae = if heldout.is_empty() {
            None
        } else {
            let examples: Vec<Example<'_, S>> = heldout
                .iter()
                .map(|&i| {
                    let w = &prepared[i];
                    let indices = quantize_window(&codebook, w);
                    let mask = plan_mask(&indices, k, &config.mask, derive_seed(seed, &[9, i as u64]))?;
                    Ok(Example { window: w, meta: meta.for_window(w)?, indices, mask: Some(mask), dropout_seed: None })
                })
                .collect::<Result<_>>()?;
            let stats = forward_stats(&net, &examples)?;
            let (s, c) = stats.iter().fold((0.0, 0usize), |(s, c), e| (s + e.mae_sum, c + e.mae_count));
            (c > 0).then(|| s / c as f64)
        };
        let train_mae = (mae_count > 0).then(|| mae_sum / mae_count as f64);
        let vq_mean = if seg_count > 0 { vq_sum / seg_count as f64 } else { 0.0 };
        let record = EpochRecord {
            stage: "pretrain".into(),
            epoch,
            total_loss: total_loss(train_mae.unwrap_or(0.0), 0.0, vq_mean, &stage.loss),
            train_mae,
            heldout_mae,
            train_cls: None,
            train_accuracy: None,
            vq_loss: vq_mean,
            perplexity: usage.map(|u| u.perplexity),
            active_codes: usage.map(|u| u.active_codes),
            masked_fraction: (motion > 0).then(|| mae_count as f64 / motion as f64),
            steps: opt.step,
        };
        log::info!(
            "pretrain epoch {epoch}: train_mae {} heldout_mae {} vq {:.4} perplexity {}",
            fmt_opt(record.train_mae),
            fmt_opt(record.heldout_mae),
            record.vq_loss,
            fmt_opt(record.perplexity)
        );
        on_epoch(&record);
        records.push(record);
    }
    Ok(PretrainOutcome {
        model: MoPFormer { config: config.clone(), codebook, net, classes: Vec::new(), seed },
        records,
        heldout,
    })
}

pub struct FinetuneOutcome<S> {
    pub model: MoPFormer<S>,
    pub metrics: Metrics,
    pub records: Vec<EpochRecord>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Splits `(train, test)` by a seeded shuffle; the training share is
/// `round(fraction * n)`, kept within `1..n`.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::Data(format!("need at least 2 windows to split, got {n}")));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("split fraction {fraction} outside (0, 1)")));
    }
    let n_train = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
    let order = shuffled(n, seed);
    let mut train = order[..n_train].to_vec();
    let mut test = order[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Supervised fine-tuning on a seeded split of `windows`, then evaluation on
/// the held-out part.
pub fn finetune<S: Scalar>(
    mut model: MoPFormer<S>,
    windows: &[SensorWindow<S>],
    classes: &[String],
    optimizer: &OptimizerConfig,
    stage: &FinetuneConfig,
    seed: u64,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<FinetuneOutcome<S>> {
    optimizer.validate()?;
    stage.loss.validate()?;
    stage.freeze.validate()?;
    if classes.len() < 2 {
        return Err(Error::Data(format!("fine-tuning needs at least 2 classes, got {}", classes.len())));
    }
    if let Some(w) = windows.iter().find(|w| w.label.is_none_or(|l| l >= classes.len())) {
        return Err(Error::Data(format!("window `{}` has a missing or out-of-range label", w.source_id)));
    }
    let config = model.config.clone();
    let prepared = prepare_all(windows, &config)?;
    let provider = config.metadata.build()?;
    if provider.dim() != model.net.embedder.adapter.weight.ncols() {
        return Err(Error::Checkpoint(format!(
            "metadata provider gives {} values but the adapter expects {}",
            provider.dim(),
            model.net.embedder.adapter.weight.ncols()
        )));
    }
    let meta = MetaTable::<S>::build(provider.as_ref(), prepared.iter().flat_map(|w| w.descriptors.iter()))?;

    let d = model.net.embedder.dim();
    let head_matches = model.net.cls.as_ref().is_some_and(|h| h.outputs() == classes.len()) && model.classes == classes;
    if !head_matches {
        log::info!(
            "initializing a new classification head for {} classes (checkpoint had {:?})",
            classes.len(),
            model.classes
        );
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[10]));
        model.net.cls = Some(LinearHead::init(classes.len(), d, &mut rng));
        model.classes = classes.to_vec();
    }

    let (train, test) = split_indices(prepared.len(), stage.train_fraction, derive_seed(seed, &[11]))?;
    let policy = stage.freeze;
    let needs = Needs::from_policy(&policy);
    let codebook_trainable = policy.is_trainable(crate::model::ParamGroup::Codebook);
    let mut opt = AdamW::new(optimizer.clone(), &model.net);
    let beta = S::of(config.beta);
    let k = config.codebook_size;
    let dropout = config.encoder.dropout > 0.0;
    let mut records = Vec::with_capacity(stage.epochs);

    for epoch in 1..=stage.epochs {
        let mut order = train.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[12, epoch as u64])));
        let (mut cls_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        let (mut mae_sum, mut mae_count, mut vq_sum, mut seg_count) = (0.0, 0usize, 0.0, 0usize);
        for batch in order.chunks(optimizer.batch_size) {
            let mut examples = Vec::with_capacity(batch.len());
            for &i in batch {
                let w = &prepared[i];
                let indices = quantize_window(&model.codebook, w);
                if codebook_trainable {
                    model.codebook.record_usage(indices.iter().copied());
                }
                let mask = if stage.loss.lambda_mae > 0.0 {
                    Some(plan_mask(&indices, k, &config.mask, derive_seed(seed, &[13, epoch as u64, i as u64]))?)
                } else {
                    None
                };
                examples.push(Example {
                    window: w,
                    meta: meta.for_window(w)?,
                    indices,
                    mask,
                    dropout_seed: dropout.then(|| derive_seed(seed, &[14, epoch as u64, i as u64])),
                });
            }
            let masked: usize = examples.iter().map(|e| e.mask.as_ref().map_or(0, |m| m.masked.len())).sum();
            let mae_scale = if masked > 0 { S::of(stage.loss.lambda_mae / masked as f64) } else { S::zero() };
            let cls_scale = S::of(stage.loss.lambda_cls / examples.len() as f64);
            let (grads, stats) = batch_pass(&model.net, &examples, mae_scale, cls_scale, needs, optimizer.micro_batch)?;
            opt.step(&mut model.net, &grads, &policy)?;
            if codebook_trainable {
                let (vq, segs) = codebook_batch(
                    &mut model.codebook,
                    &examples,
                    beta,
                    stage.loss.lambda_vq,
                    &stage.codebook,
                    true,
                )?;
                vq_sum += vq;
                seg_count += segs;
            }
            for s in stats {
                cls_sum += s.cls_loss.unwrap_or(0.0);
                correct += usize::from(s.correct == Some(true));
                seen += 1;
                mae_sum += s.mae_sum;
                mae_count += s.mae_count;
            }
        }
        let train_cls = (seen > 0).then(|| cls_sum / seen as f64);
        let train_mae = (mae_count > 0).then(|| mae_sum / mae_count as f64);
        let vq_mean = if seg_count > 0 { vq_sum / seg_count as f64 } else { 0.0 };
        let record = EpochRecord {
            stage: "finetune".into(),
            epoch,
            total_loss: total_loss(train_mae.unwrap_or(0.0), train_cls.unwrap_or(0.0), vq_mean, &stage.loss),
            train_mae,
            heldout_mae: None,
            train_cls,
            train_accuracy: (seen > 0).then(|| correct as f64 / seen as f64),
            vq_loss: vq_mean,
            perplexity: None,
            active_codes: None,
            masked_fraction: None,
            steps: opt.step,
        };
        log::info!(
            "finetune epoch {epoch}: cls {} accuracy {}",
            fmt_opt(record.train_cls),
            fmt_opt(record.train_accuracy)
        );
        on_epoch(&record);
        records.push(record);
    }

    let test_windows: Vec<PreparedWindow<S>> = test.iter().map(|&i| prepared[i].clone()).collect();
    let metrics = evaluate_prepared(&model, &test_windows, &meta)?;
    Ok(FinetuneOutcome { model, metrics, records, train, test })
}

fn evaluate_prepared<S: Scalar>(
    model: &MoPFormer<S>,
    windows: &[PreparedWindow<S>],
    meta: &MetaTable<S>,
) -> Result<Metrics> {
    let predicted: Vec<usize> = windows
        .par_iter()
        .map(|w| model.predict(w, meta))
        .collect::<Result<_>>()?;
    let truth: Vec<usize> = windows
        .iter()
        .map(|w| w.label.ok_or_else(|| Error::Data(format!("window `{}` has no label", w.source_id))))
        .collect::<Result<_>>()?;
    classification_metrics(&predicted, &truth, model.classes.len().max(1))
}

/// Accuracy, macro-F1 and confusion matrix of a fine-tuned model.
pub fn evaluate<S: Scalar>(model: &MoPFormer<S>, windows: &[SensorWindow<S>]) -> Result<Metrics> {
    if windows.is_empty() {
        return Err(Error::Data("cannot evaluate an empty dataset".into()));
    }
    let prepared = prepare_all(windows, &model.config)?;
    let provider = model.config.metadata.build()?;
    let meta = MetaTable::<S>::build(provider.as_ref(), prepared.iter().flat_map(|w| w.descriptors.iter()))?;
    evaluate_prepared(model, &prepared, &meta)
}

/// Quantizes every window with the current codebook and reports usage.
pub fn tokenization_usage<S: Scalar>(
    model: &MoPFormer<S>,
    windows: &[SensorWindow<S>],
) -> Result<crate::quantizer::UsageReport> {
    let prepared = prepare_all(windows, &model.config)?;
    let mut counts = vec![0u64; model.config.codebook_size];
    for w in &prepared {
        for i in model.quantize_indices(w) {
            counts[i] += 1;
        }
    }
    usage_report(&counts)
}

/// Mean held-out masked-token loss with the pretraining mask seeds.
pub fn heldout_mae<S: Scalar>(
    model: &MoPFormer<S>,
    windows: &[SensorWindow<S>],
    seed: u64,
) -> Result<f64> {
    let prepared = prepare_all(windows, &model.config)?;
    let provider = model.config.metadata.build()?;
    let meta = MetaTable::<S>::build(provider.as_ref(), prepared.iter().flat_map(|w| w.descriptors.iter()))?;
    let examples: Vec<Example<'_, S>> = prepared
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let indices = model.quantize_indices(w);
            let mask = plan_mask(&indices, model.config.codebook_size, &model.config.mask, derive_seed(seed, &[9, i as u64]))?;
            Ok(Example { window: w, meta: meta.for_window(w)?, indices, mask: Some(mask), dropout_seed: None })
        })
        .collect::<Result<_>>()?;
    let stats = forward_stats(&model.net, &examples)?;
    let (s, c) = stats.iter().fold((0.0, 0usize), |(s, c), e| (s + e.mae_sum, c + e.mae_count));
    if c == 0 {
        return Err(Error::Data("no masked tokens to score".into()));
    }
    Ok(s / c as f64)
}
