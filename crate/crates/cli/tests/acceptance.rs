//! Acceptance criteria, one PASS/FAIL line each. Runs without the libtest
//! harness so the lines always appear in `cargo test` output.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use mopformer::analysis;
use mopformer::checkpoint::{read_raw, write_checkpoint};
use mopformer::embedder::{apply_mask, plan_mask, MaskConfig, TokenKind};
use mopformer::encoder::EncoderConfig;
use mopformer::ingest::{generate_synthetic, ChannelMetadata, GeneratorSpec, SensorWindow, SyntheticSpec};
use mopformer::model::{prepare_window, MetaTable, ModelConfig, MoPFormer, Network};
use mopformer::quantizer::{Codebook, InitStrategy};
use mopformer::training::{
    self, gradient_suite, mae_loss, FinetuneConfig, FreezePolicy, OptimizerConfig, PretrainConfig,
};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

const SEEDS: [u64; 3] = [1, 2, 3];
const QUANTIZER_TIME_LIMIT: Duration = Duration::from_secs(10);
const GRADIENT_TIME_LIMIT: Duration = Duration::from_secs(120);
const GRADIENT_TOLERANCE: f64 = 1e-4;
const CHANCE_TOLERANCE: f64 = 1e-6;
const BENCHMARK_TIME_LIMIT: Duration = Duration::from_secs(600);
const BENCHMARK_MIN_SCORE: f64 = 0.95;
const MIN_PERPLEXITY: f64 = 4.0;
const MASK_RATIO: f64 = 0.25;
const TRANSFER_MARGIN: f64 = 0.2;
const ANALYSIS_TOLERANCE: f64 = 1e-9;
const DETERMINISM_TOLERANCE: f64 = 1e-9;

struct Outcome {
    id: u8,
    name: &'static str,
    passed: bool,
    blocking: bool,
    detail: String,
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn benchmark_spec() -> SyntheticSpec {
    let path = workspace_root().join("configs/synthetic_benchmark.json");
    serde_json::from_str(&fs::read_to_string(&path).expect("benchmark spec")).expect("benchmark spec parses")
}

fn desk_model(k: usize) -> ModelConfig {
    ModelConfig {
        codebook_size: k,
        segment_len: 50,
        window_length: 500,
        encoder: EncoderConfig { depth: 2, heads: 4, model_dim: 64, ..EncoderConfig::default() },
        ..ModelConfig::default()
    }
}

fn desk_optimizer() -> OptimizerConfig {
    OptimizerConfig { learning_rate: 1e-3, batch_size: 32, micro_batch: 8, ..OptimizerConfig::default() }
}

fn desk_pretrain() -> PretrainConfig {
    PretrainConfig { epochs: 8, ..PretrainConfig::default() }
}

fn desk_finetune(freeze: FreezePolicy) -> FinetuneConfig {
    FinetuneConfig { epochs: 10, freeze, train_fraction: 0.2, ..FinetuneConfig::default() }
}

struct SeedRun {
    pretrained: MoPFormer<f64>,
    heldout_mae: Vec<f64>,
    accuracy: f64,
    macro_f1: f64,
}

fn run_seed(windows: &[SensorWindow<f64>], classes: &[String], k: usize, seed: u64) -> SeedRun {
    let pre = training::pretrain(windows, &desk_model(k), &desk_optimizer(), &desk_pretrain(), seed, &mut |_| {})
        .expect("pretraining runs");
    let heldout_mae = pre.records.iter().filter_map(|r| r.heldout_mae).collect();
    let fine = training::finetune(
        pre.model.clone(),
        windows,
        classes,
        &desk_optimizer(),
        &desk_finetune(FreezePolicy::ENCODER_FINETUNE),
        seed,
        &mut |_| {},
    )
    .expect("fine-tuning runs");
    SeedRun { pretrained: pre.model, heldout_mae, accuracy: fine.metrics.accuracy, macro_f1: fine.metrics.macro_f1 }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn quantizer_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut mismatches = 0;
    let l = 50;
    for case in 0..1000 {
        let k = if case % 2 == 0 { 16 } else { 64 };
        let protos = Array2::from_shape_simple_fn((k, l), || rng.random_range(-2.0..2.0));
        let segment: Vec<f64> = (0..l).map(|_| rng.random_range(-2.0..2.0)).collect();
        let codebook = Codebook::from_prototypes(protos.clone()).expect("codebook");
        let got = codebook.quantize(&segment, 0.25);
        let (mut best, mut best_d) = (0, f64::INFINITY);
        for j in 0..k {
            let d: f64 = (0..l).map(|i| (segment[i] - protos[[j, i]]).powi(2)).sum();
            if d < best_d {
                best = j;
                best_d = d;
            }
        }
        if got.index != best || (got.distance - best_d).abs() > 1e-12 * best_d.max(1.0) {
            mismatches += 1;
        }
    }
    let elapsed = start.elapsed();
    Outcome {
        id: 1,
        name: "quantizer matches exhaustive scan",
        passed: mismatches == 0 && elapsed < QUANTIZER_TIME_LIMIT,
        blocking: true,
        detail: format!("{mismatches}/1000 mismatches in {:.2}s", elapsed.as_secs_f64()),
    }
}

fn gradient_criterion() -> Outcome {
    let start = Instant::now();
    let report = gradient_suite(0).expect("gradient suite runs");
    let elapsed = start.elapsed();
    let worst = report.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    let failing: Vec<&str> = report.iter().filter(|c| c.max_rel_err >= GRADIENT_TOLERANCE).map(|c| c.component.as_str()).collect();
    Outcome {
        id: 2,
        name: "finite-difference gradient suite",
        passed: failing.is_empty() && elapsed < GRADIENT_TIME_LIMIT,
        blocking: true,
        detail: format!(
            "{} components, worst rel err {worst:.2e}, failing {failing:?}, {:.2}s",
            report.len(),
            elapsed.as_secs_f64()
        ),
    }
}

fn chance_calibration() -> Outcome {
    let k = 1024;
    let uniform = Array1::from_elem(k, 1.0 / k as f64);
    let predictions = vec![uniform; 37];
    let targets: Vec<usize> = (0..37).map(|i| (i * 97) % k).collect();
    let loss = mae_loss(&predictions, &targets).expect("loss");
    let expected = (k as f64).ln();
    Outcome {
        id: 3,
        name: "uniform prediction loss equals ln K",
        passed: (loss - expected).abs() <= CHANCE_TOLERANCE,
        blocking: true,
        detail: format!("loss {loss:.7}, ln 1024 = {expected:.7}"),
    }
}

fn benchmark_criteria(runs: &[SeedRun], elapsed: Duration) -> Outcome {
    let acc = median(runs.iter().map(|r| r.accuracy).collect());
    let f1 = median(runs.iter().map(|r| r.macro_f1).collect());
    Outcome {
        id: 4,
        name: "synthetic end-to-end accuracy",
        passed: acc >= BENCHMARK_MIN_SCORE && f1 >= BENCHMARK_MIN_SCORE && elapsed < BENCHMARK_TIME_LIMIT,
        blocking: true,
        detail: format!(
            "median accuracy {acc:.4}, macro-F1 {f1:.4} over seeds {SEEDS:?}; {:.1}s for 3 seeds",
            elapsed.as_secs_f64()
        ),
    }
}

fn mae_signal(runs: &[SeedRun], k: usize) -> Outcome {
    let bound = 0.5 * (k as f64).ln();
    let finals: Vec<f64> = runs.iter().map(|r| *r.heldout_mae.last().expect("held-out losses")).collect();
    let decreasing = runs
        .iter()
        .filter(|r| r.heldout_mae.len() >= 3 && r.heldout_mae[0] > r.heldout_mae[1] && r.heldout_mae[1] > r.heldout_mae[2])
        .count();
    Outcome {
        id: 5,
        name: "masked-token learning signal",
        passed: finals.iter().all(|&f| f < bound) && decreasing >= 2,
        blocking: true,
        detail: format!("final held-out losses {finals:.3?} vs bound {bound:.3}; {decreasing}/3 seeds decrease over epochs 1-3"),
    }
}

/// Counts distinct instance-normalized segments of the noise-free
/// generators, computed from the waveform definitions directly.
fn distinct_clean_shapes(spec: &SyntheticSpec, l: usize, eps: f64) -> usize {
    let mut shapes: Vec<Vec<f64>> = Vec::new();
    for class in &spec.classes {
        for g in &class.channels {
            for start in (0..spec.window_length - l + 1).step_by(l) {
                let raw: Vec<f64> = (start..start + l)
                    .map(|n| {
                        let t = n as f64 * g.frequency / spec.sample_rate;
                        let frac = t - t.floor();
                        g.offset
                            + g.amplitude
                                * match g.generator.as_str() {
                                    "sine" => (2.0 * PI * t).sin(),
                                    "square" => if frac < 0.5 { 1.0 } else { -1.0 },
                                    "sawtooth" => 2.0 * frac - 1.0,
                                    _ => 1.0,
                                }
                    })
                    .collect();
                let mean = raw.iter().sum::<f64>() / l as f64;
                let sd = (raw.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / l as f64 + eps).sqrt();
                let norm: Vec<f64> = raw.iter().map(|v| (v - mean) / sd).collect();
                if !shapes.iter().any(|s| s.iter().zip(&norm).all(|(a, b)| (a - b).abs() < 1e-6)) {
                    shapes.push(norm);
                }
            }
        }
    }
    shapes.len()
}

fn codebook_utilization(runs: &[SeedRun], windows: &[SensorWindow<f64>], spec: &SyntheticSpec) -> Outcome {
    let shapes = distinct_clean_shapes(spec, 50, desk_model(64).norm_eps);
    let usage: Vec<_> = runs
        .iter()
        .map(|r| training::tokenization_usage(&r.pretrained, windows).expect("usage"))
        .collect();
    let passed = usage.iter().all(|u| u.active_codes >= shapes && u.perplexity > MIN_PERPLEXITY);
    Outcome {
        id: 6,
        name: "codebook utilization",
        passed,
        blocking: true,
        detail: format!(
            "{} distinct noise-free shapes; active codes {:?}; perplexity {:.2?}",
            shapes,
            usage.iter().map(|u| u.active_codes).collect::<Vec<_>>(),
            usage.iter().map(|u| u.perplexity).collect::<Vec<_>>()
        ),
    }
}

fn masking_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let k = 32;
    let config = ModelConfig {
        codebook_size: k,
        segment_len: 10,
        window_length: 200,
        codebook_init: InitStrategy::RandomNormal,
        encoder: EncoderConfig { depth: 1, heads: 2, model_dim: 8, ..EncoderConfig::default() },
        mask: MaskConfig { ratio: MASK_RATIO, ..MaskConfig::default() },
        ..ModelConfig::default()
    };
    let provider = config.metadata.build().expect("provider");
    let net = Network::<f64>::new(&config, provider.dim(), None, 3).expect("network");
    let codebook = Codebook::<f64>::init(k, 10, InitStrategy::RandomNormal, None, 5).expect("codebook");
    let axes = ["x", "y", "z"];
    let mut failures = 0;
    for trial in 0..100u64 {
        let channels = rng.random_range(1..=6);
        let len = 10 * rng.random_range(1..=20);
        let samples = Array2::from_shape_simple_fn((len, channels), || rng.random_range(-3.0..3.0));
        let meta: Vec<ChannelMetadata> = (0..channels)
            .map(|c| ChannelMetadata::new("wrist", if c < 3 { "acc" } else { "gyro" }, axes[c % 3], 100.0).expect("meta"))
            .collect();
        let window = prepare_window(&SensorWindow::new(samples, meta, None, "mask").expect("window"), &config).expect("prepare");
        let indices: Vec<usize> = window.segments.iter().map(|s| codebook.nearest(s).0).collect();
        let n = indices.len();
        let plan = plan_mask(&indices, k, &config.mask, trial).expect("plan");
        let tokens = apply_mask(&window.tokens(&indices), &plan);
        let table = MetaTable::<f64>::build(provider.as_ref(), window.descriptors.iter()).expect("meta table");
        let (seq, _) = net.embedder.forward(&tokens, &table.for_window(&window).expect("meta")).expect("forward");
        let expected = (MASK_RATIO * n as f64 + 0.5).floor() as usize;
        let masked = seq.kinds.iter().filter(|&&kd| kd == TokenKind::Mask).count();
        let specials_intact = seq.kinds.iter().filter(|&&kd| kd == TokenKind::Cls).count() == 1
            && seq.kinds.iter().filter(|&&kd| kd == TokenKind::Start).count() == channels
            && seq.kinds.iter().filter(|&&kd| kd == TokenKind::End).count() == channels
            && seq.table_index.iter().zip(&seq.kinds).all(|(t, kd)| match kd {
                TokenKind::Cls => t.is_none(),
                TokenKind::Start => *t == Some(k + 1),
                TokenKind::End => *t == Some(k + 2),
                TokenKind::Mask => *t == Some(k),
                TokenKind::Motion => t.is_some_and(|i| i < k),
            });
        if masked != expected || plan.masked.len() != expected || !specials_intact {
            failures += 1;
        }
    }
    Outcome {
        id: 7,
        name: "masking contract",
        passed: failures == 0,
        blocking: true,
        detail: format!("{failures}/100 windows violate the contract"),
    }
}

fn heterogeneity(bench_windows: &[SensorWindow<f64>], classes: &[String]) -> Outcome {
    let mut spec = benchmark_spec();
    spec.windows_per_class = 60;
    spec.seed = 21;
    spec.channels = ["x", "y", "z"]
        .iter()
        .map(|a| ChannelMetadata::new("Ankle", "acc", *a, 100.0).expect("meta"))
        .chain(["x", "y", "z"].iter().map(|a| ChannelMetadata::new("Chest", "gyro", *a, 100.0).expect("meta")))
        .collect();
    for (i, class) in spec.classes.iter_mut().enumerate() {
        let extra: Vec<GeneratorSpec> = class
            .channels
            .iter()
            .map(|g| GeneratorSpec { frequency: g.frequency * (1.0 + 0.5 * i as f64), ..g.clone() })
            .collect();
        class.channels.extend(extra);
    }
    let six = generate_synthetic::<f64>(&spec).expect("six-channel data");
    let pre = training::pretrain(
        &six,
        &desk_model(64),
        &desk_optimizer(),
        &PretrainConfig { epochs: 3, ..PretrainConfig::default() },
        5,
        &mut |_| {},
    )
    .expect("six-channel pretraining");
    let result = training::finetune(
        pre.model,
        bench_windows,
        classes,
        &desk_optimizer(),
        &desk_finetune(FreezePolicy::ENCODER_FINETUNE),
        5,
        &mut |_| {},
    );
    let bar = 1.0 / classes.len() as f64 + TRANSFER_MARGIN;
    match result {
        Ok(fine) => Outcome {
            id: 8,
            name: "6-channel pretrain transfers to 3-channel fine-tune",
            passed: fine.metrics.accuracy > bar,
            blocking: true,
            detail: format!("accuracy {:.4} vs bar {bar:.2}", fine.metrics.accuracy),
        },
        Err(e) => Outcome {
            id: 8,
            name: "6-channel pretrain transfers to 3-channel fine-tune",
            passed: false,
            blocking: true,
            detail: format!("fine-tuning failed: {e}"),
        },
    }
}

fn raw_of(model: &MoPFormer<f64>, stage: &str) -> mopformer::checkpoint::RawCheckpoint {
    let mut bytes = Vec::new();
    write_checkpoint(model, stage, &mut bytes).expect("checkpoint writes");
    read_raw(&mut bytes.as_slice()).expect("checkpoint reads")
}

fn freeze_policy(pretrained: &MoPFormer<f64>, windows: &[SensorWindow<f64>], classes: &[String]) -> Outcome {
    // give the model its class head first so both checkpoints hold the same tensor set
    let headed = training::finetune(
        pretrained.clone(),
        windows,
        classes,
        &desk_optimizer(),
        &FinetuneConfig { epochs: 0, ..desk_finetune(FreezePolicy::LINEAR_PROBE) },
        9,
        &mut |_| {},
    )
    .expect("head initialization");
    let before = raw_of(&headed.model, "finetune");
    let probed = training::finetune(
        headed.model,
        windows,
        classes,
        &desk_optimizer(),
        &FinetuneConfig { epochs: 3, ..desk_finetune(FreezePolicy::LINEAR_PROBE) },
        9,
        &mut |_| {},
    )
    .expect("linear probe");
    let after = raw_of(&probed.model, "finetune");
    let changed = before.diff(&after);
    let only_head = !changed.is_empty() && changed.iter().all(|n| n.starts_with("cls_head."));
    Outcome {
        id: 9,
        name: "linear-probe changes only the class head",
        passed: only_head,
        blocking: true,
        detail: format!("changed tensors {changed:?}"),
    }
}

fn bits(m: &[Vec<f64>]) -> Vec<Vec<u64>> {
    m.iter().map(|r| r.iter().map(|v| v.to_bits()).collect()).collect()
}

fn analysis_properties(model: &MoPFormer<f64>, windows: &[SensorWindow<f64>], classes: &[String]) -> Outcome {
    let k = model.config.codebook_size;
    let ids: Vec<usize> = (0..k).collect();
    let mut problems = Vec::new();
    let streams = analysis::token_streams(model, windows).expect("streams");
    let motion_tokens: usize = streams.iter().map(|s| s.indices.len()).sum();
    let sims = [
        analysis::primitive_similarity(model, &ids).expect("similarity"),
        analysis::contextual_similarity(model, windows, &ids).expect("contextual similarity"),
    ];
    for (n, s) in sims.iter().enumerate() {
        for a in 0..s.tokens.len() {
            if s.undefined.contains(&s.tokens[a]) {
                continue;
            }
            if (s.values[a][a] - 1.0).abs() > ANALYSIS_TOLERANCE {
                problems.push(format!("similarity {n} diagonal {a}"));
            }
            for b in 0..s.tokens.len() {
                let (x, y) = (s.values[a][b], s.values[b][a]);
                if !(x.is_nan() && y.is_nan()) && (x - y).abs() > ANALYSIS_TOLERANCE {
                    problems.push(format!("similarity {n} asymmetric at ({a}, {b})"));
                }
            }
        }
    }
    let freq = analysis::frequency(&streams, k, classes, analysis::DEFAULT_TOP_N).expect("frequency");
    if freq.total as usize != motion_tokens || freq.counts.iter().sum::<u64>() as usize != motion_tokens {
        problems.push(format!("frequency total {} vs {motion_tokens} tokens", freq.total));
    }
    let trans = analysis::transitions(&streams, k).expect("transitions");
    let pairs: usize = streams.iter().map(|s| s.indices.len().saturating_sub(1)).sum();
    if trans.row_totals().iter().sum::<u64>() as usize != pairs {
        problems.push("transition count".into());
    }
    for (i, row) in trans.values.iter().enumerate() {
        if trans.observed[i] && (row.iter().sum::<f64>() - 1.0).abs() > ANALYSIS_TOLERANCE {
            problems.push(format!("transition row {i} sum"));
        }
    }
    let dir = tempfile::tempdir().expect("tempdir");
    for format in [analysis::ExportFormat::Csv, analysis::ExportFormat::Json] {
        let sp = analysis::report_path(dir.path(), "accept", "similarity", format);
        let fp = analysis::report_path(dir.path(), "accept", "frequency", format);
        let tp = analysis::report_path(dir.path(), "accept", "transitions", format);
        let ok = match format {
            analysis::ExportFormat::Csv => {
                analysis::write_similarity_csv(&sims[1], &sp).expect("export");
                analysis::write_frequency_csv(&freq, &fp).expect("export");
                analysis::write_transitions_csv(&trans, &tp).expect("export");
                let s = analysis::read_similarity_csv(&sp).expect("import");
                let (_, rows) = analysis::read_frequency_csv(&fp).expect("import");
                let back = analysis::read_transitions_csv(&tp).expect("import");
                bits(&s.values) == bits(&sims[1].values)
                    && s.undefined == sims[1].undefined
                    && rows == freq.top_rows()
                    && bits(&back.values) == bits(&trans.values)
                    && back.observed == trans.observed
                    && back.totals == trans.row_totals()
            }
            analysis::ExportFormat::Json => {
                analysis::write_json(&sims[1], &sp).expect("export");
                analysis::write_json(&freq, &fp).expect("export");
                analysis::write_json(&trans, &tp).expect("export");
                let s: analysis::SimilarityMatrix = analysis::read_json(&sp).expect("import");
                bits(&s.values) == bits(&sims[1].values)
                    && analysis::read_json::<analysis::FrequencyReport>(&fp).expect("import") == freq
                    && analysis::read_json::<analysis::TransitionMatrix>(&tp).expect("import") == trans
            }
        };
        if !ok {
            problems.push(format!("{format:?} round trip"));
        }
    }
    Outcome {
        id: 10,
        name: "analysis properties and export round trip",
        passed: problems.is_empty(),
        blocking: true,
        detail: if problems.is_empty() {
            format!("{motion_tokens} tokens, {} undefined contextual rows", sims[1].undefined.len())
        } else {
            format!("{problems:?}")
        },
    }
}

fn codebook_size_trend(large: &[SeedRun], windows: &[SensorWindow<f64>], classes: &[String]) -> Outcome {
    let small: Vec<f64> = SEEDS.iter().map(|&s| run_seed(windows, classes, 8, s).accuracy).collect();
    let big = median(large.iter().map(|r| r.accuracy).collect());
    let little = median(small.clone());
    Outcome {
        id: 11,
        name: "K=64 median accuracy >= K=8 (non-blocking)",
        passed: big >= little,
        blocking: false,
        detail: format!("K=64 median {big:.4}, K=8 median {little:.4} (K=8 runs {small:.4?})"),
    }
}

fn sha256_hex(path: &Path) -> String {
    hex::encode(Sha256::digest(fs::read(path).expect("read")))
}

fn loss_sequences(path: &Path) -> Vec<Vec<f64>> {
    fs::read_to_string(path)
        .expect("log")
        .lines()
        .map(|line| {
            let v: serde_json::Value = serde_json::from_str(line).expect("log line");
            ["total_loss", "train_mae", "heldout_mae", "vq_loss"]
                .iter()
                .map(|k| v[*k].as_f64().unwrap_or(f64::NAN))
                .collect()
        })
        .collect()
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().expect("tempdir");
    let mut spec = benchmark_spec();
    spec.windows_per_class = 12;
    let spec_path = dir.path().join("spec.json");
    fs::write(&spec_path, serde_json::to_string(&spec).expect("spec")).expect("write spec");
    let bin = env!("CARGO_BIN_EXE_mopformer");
    let status = Command::new(bin)
        .args(["synth", spec_path.to_str().unwrap(), dir.path().join("data").to_str().unwrap()])
        .output()
        .expect("synth runs");
    assert!(status.status.success(), "synth failed: {}", String::from_utf8_lossy(&status.stderr));
    let config = serde_json::json!({
        "run_id": "det",
        "seed": 4,
        "datasets": ["data/manifest.json"],
        "model": { "codebook_size": 16, "encoder": { "depth": 1, "heads": 2, "model_dim": 16 } },
        "optimizer": { "learning_rate": 1e-3, "batch_size": 16, "micro_batch": 4 },
        "pretrain": { "epochs": 3 }
    });
    let config_path = dir.path().join("config.json");
    fs::write(&config_path, config.to_string()).expect("write config");
    let mut runs = Vec::new();
    for out in ["a", "b"] {
        let o = Command::new(bin)
            .args(["--workers", "1", "pretrain", config_path.to_str().unwrap(), "--set"])
            .arg(format!("output_dir={out}"))
            .output()
            .expect("pretrain runs");
        if !o.status.success() {
            return Outcome {
                id: 12,
                name: "single-worker pretraining is deterministic",
                passed: false,
                blocking: true,
                detail: format!("pretrain failed: {}", String::from_utf8_lossy(&o.stderr)),
            };
        }
        let base = dir.path().join(out);
        runs.push((loss_sequences(&base.join("det_pretrain_log.jsonl")), sha256_hex(&base.join("det_pretrain.ckpt"))));
    }
    let (la, ha) = &runs[0];
    let (lb, hb) = &runs[1];
    let logs_match = la.len() == lb.len()
        && !la.is_empty()
        && la.iter().zip(lb).all(|(x, y)| {
            x.iter().zip(y).all(|(p, q)| (p.is_nan() && q.is_nan()) || (p - q).abs() <= DETERMINISM_TOLERANCE)
        });
    Outcome {
        id: 12,
        name: "single-worker pretraining is deterministic",
        passed: logs_match && ha == hb,
        blocking: true,
        detail: format!("{} epochs logged, checkpoint sha256 {}..{}", la.len(), &ha[..12], if ha == hb { "equal" } else { "differ" }),
    }
}

fn main() {
    // a filter argument from `cargo test <name>` that does not name this target skips it
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if args.iter().any(|a| !"acceptance".contains(a.as_str())) {
        return;
    }
    let mut outcomes = vec![quantizer_oracle(), gradient_criterion(), chance_calibration()];

    let spec = benchmark_spec();
    let windows = generate_synthetic::<f64>(&spec).expect("benchmark data");
    let classes = spec.class_names();
    let start = Instant::now();
    let runs: Vec<SeedRun> = SEEDS.iter().map(|&s| run_seed(&windows, &classes, 64, s)).collect();
    let elapsed = start.elapsed();
    outcomes.push(benchmark_criteria(&runs, elapsed));
    outcomes.push(mae_signal(&runs, 64));
    outcomes.push(codebook_utilization(&runs, &windows, &spec));
    outcomes.push(masking_contract());
    outcomes.push(heterogeneity(&windows, &classes));
    outcomes.push(freeze_policy(&runs[0].pretrained, &windows, &classes));
    outcomes.push(analysis_properties(&runs[0].pretrained, &windows, &classes));
    outcomes.push(codebook_size_trend(&runs, &windows, &classes));
    outcomes.push(determinism());

    outcomes.sort_by_key(|o| o.id);
    for o in &outcomes {
        println!(
            "{} #{:02} {}: {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.id,
            o.name,
            o.detail
        );
    }
    let blocking_failures = outcomes.iter().filter(|o| o.blocking && !o.passed).count();
    println!(
        "acceptance: {}/{} criteria passed",
        outcomes.iter().filter(|o| o.passed).count(),
        outcomes.len()
    );
    if blocking_failures > 0 {
        std::process::exit(1);
    }
}
