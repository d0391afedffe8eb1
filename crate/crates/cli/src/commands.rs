use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use mopformer::analysis::{self, ExportFormat};
use mopformer::checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
use mopformer::config::RunConfig;
use mopformer::ingest::load_manifest;
use mopformer::ingest::{write_synthetic_dataset, SyntheticSpec};
use mopformer::training::{self, gradient_suite, EpochRecord, Metrics};
use mopformer::{Error, Result, SensorWindow};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub struct Context {
    pub workers: usize,
    pub argv: Vec<String>,
}

pub struct AnalyzeOptions {
    pub similarity: bool,
    pub frequency: bool,
    pub transitions: bool,
    pub format: ExportFormat,
    pub contextual: bool,
    pub top_n: usize,
    pub tokens: Option<Vec<usize>>,
    pub run_id: String,
}

#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    argv: &'a [String],
    run_id: &'a str,
    config_hash: Option<String>,
    seed: Option<u64>,
    workers: usize,
    precision: &'static str,
    versions: BTreeMap<&'static str, String>,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

fn hashes(paths: &[&Path]) -> Result<BTreeMap<String, String>> {
    paths.iter().map(|p| Ok((p.display().to_string(), sha256_file(p)?))).collect()
}

#[allow(clippy::too_many_arguments)]
fn write_run_manifest(
    ctx: &Context,
    dir: &Path,
    command: &str,
    run_id: &str,
    config: Option<&RunConfig>,
    inputs: &[&Path],
    outputs: &[&Path],
) -> Result<PathBuf> {
    let mut versions = BTreeMap::new();
    versions.insert("mopformer", env!("CARGO_PKG_VERSION").to_string());
    versions.insert("checkpoint_format", CHECKPOINT_VERSION.to_string());
    let manifest = RunManifest {
        command,
        argv: &ctx.argv,
        run_id,
        config_hash: config.map(RunConfig::hash),
        seed: config.map(|c| c.seed),
        workers: ctx.workers,
        precision: "f64",
        versions,
        inputs: hashes(inputs)?,
        outputs: hashes(outputs)?,
    };
    let path = dir.join(format!("{run_id}_{command}_run_manifest.json"));
    write_json(&manifest, &path)?;
    Ok(path)
}

struct Pooled {
    windows: Vec<SensorWindow>,
    classes: Vec<String>,
}

/// Loads and concatenates datasets. The class list is the first dataset's;
/// with `labels_required` every dataset must share it.
fn load_datasets(paths: &[PathBuf], labels_required: bool) -> Result<Pooled> {
    if paths.is_empty() {
        return Err(Error::Config("`datasets` lists no manifests".into()));
    }
    let mut windows = Vec::new();
    let mut classes: Option<Vec<String>> = None;
    for path in paths {
        let (manifest, base) = load_manifest(path)?;
        let loaded = manifest.load_windows::<f64>(&base)?;
        info!("{}: {} windows", path.display(), loaded.len());
        match &classes {
            Some(c) if labels_required && *c != manifest.classes => {
                return Err(Error::Data(format!(
                    "{} has classes {:?}, expected {:?}",
                    path.display(),
                    manifest.classes,
                    c
                )))
            }
            Some(_) => {}
            None => classes = Some(manifest.classes.clone()),
        }
        windows.extend(loaded);
    }
    Ok(Pooled { windows, classes: classes.unwrap_or_default() })
}

/// Streams epoch records to a JSON-lines file as training runs.
struct EpochLog {
    path: PathBuf,
    writer: BufWriter<File>,
    error: Option<Error>,
}

impl EpochLog {
    fn create(path: PathBuf) -> Result<Self> {
        let file = File::create(&path).map_err(|e| io_err(&path, e))?;
        Ok(Self { writer: BufWriter::new(file), path, error: None })
    }

    fn record(&mut self, r: &EpochRecord) {
        if self.error.is_some() {
            return;
        }
        let line = serde_json::to_string(r).expect("epoch record serializes");
        if let Err(e) = writeln!(self.writer, "{line}").and_then(|_| self.writer.flush()) {
            self.error = Some(io_err(&self.path, e));
        }
    }

    fn finish(self) -> Result<PathBuf> {
        match self.error {
            Some(e) => Err(e),
            None => Ok(self.path),
        }
    }
}

pub fn synth(ctx: &Context, spec_path: &Path, out_dir: &Path) -> Result<()> {
    let text = fs::read_to_string(spec_path).map_err(|e| io_err(spec_path, e))?;
    let spec: SyntheticSpec = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", spec_path.display())))?;
    let manifest = write_synthetic_dataset(&spec, out_dir)?;
    info!("wrote {}", manifest.display());
    write_run_manifest(ctx, out_dir, "synth", "synthetic", None, &[spec_path], &[&manifest])?;
    println!("{}", manifest.display());
    Ok(())
}

pub fn pretrain(ctx: &Context, config_path: &Path, overrides: &[String]) -> Result<()> {
    let config = RunConfig::load(config_path, overrides)?;
    let data = load_datasets(&config.datasets, false)?;
    let out = &config.output_dir;
    create_dir(out)?;
    let run_id = &config.run_id;
    let mut log = EpochLog::create(out.join(format!("{run_id}_pretrain_log.jsonl")))?;
    let outcome = training::pretrain(
        &data.windows,
        &config.model,
        &config.optimizer,
        &config.pretrain,
        config.seed,
        &mut |r| log.record(r),
    )?;
    let log_path = log.finish()?;
    let ckpt = out.join(format!("{run_id}_pretrain.ckpt"));
    save_checkpoint(&outcome.model, "pretrain", &ckpt)?;
    let mut inputs: Vec<&Path> = vec![config_path];
    inputs.extend(config.datasets.iter().map(PathBuf::as_path));
    write_run_manifest(ctx, out, "pretrain", run_id, Some(&config), &inputs, &[&ckpt, &log_path])?;
    println!("{}", ckpt.display());
    Ok(())
}

#[derive(Serialize)]
struct MetricsFile<'a> {
    classes: &'a [String],
    #[serde(skip_serializing_if = "Option::is_none")]
    train_windows: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    test_windows: Option<usize>,
    #[serde(flatten)]
    metrics: &'a Metrics,
}

pub fn finetune(ctx: &Context, config_path: &Path, checkpoint: &Path, overrides: &[String]) -> Result<()> {
    let config = RunConfig::load(config_path, overrides)?;
    let (model, _) = load_checkpoint::<f64>(checkpoint)?;
    if model.config != config.model {
        warn!("the checkpoint's model settings take precedence over `model` in {}", config_path.display());
    }
    let data = load_datasets(&config.datasets, true)?;
    let out = &config.output_dir;
    create_dir(out)?;
    let run_id = &config.run_id;
    let mut log = EpochLog::create(out.join(format!("{run_id}_finetune_log.jsonl")))?;
    let outcome = training::finetune(
        model,
        &data.windows,
        &data.classes,
        &config.optimizer,
        &config.finetune,
        config.seed,
        &mut |r| log.record(r),
    )?;
    let log_path = log.finish()?;
    let ckpt = out.join(format!("{run_id}_finetune.ckpt"));
    save_checkpoint(&outcome.model, "finetune", &ckpt)?;
    let metrics_path = out.join(format!("{run_id}_finetune_metrics.json"));
    write_json(
        &MetricsFile {
            classes: &outcome.model.classes,
            train_windows: Some(outcome.train.len()),
            test_windows: Some(outcome.test.len()),
            metrics: &outcome.metrics,
        },
        &metrics_path,
    )?;
    info!(
        "held-out accuracy {:.4}, macro-F1 {:.4}",
        outcome.metrics.accuracy, outcome.metrics.macro_f1
    );
    let mut inputs: Vec<&Path> = vec![config_path, checkpoint];
    inputs.extend(config.datasets.iter().map(PathBuf::as_path));
    write_run_manifest(ctx, out, "finetune", run_id, Some(&config), &inputs, &[&ckpt, &log_path, &metrics_path])?;
    println!("{}", metrics_path.display());
    Ok(())
}

/// Rewrites dataset labels into the checkpoint's class order.
fn align_labels(windows: &mut [SensorWindow], dataset_classes: &[String], model_classes: &[String]) -> Result<()> {
    if model_classes.is_empty() {
        return Err(Error::Checkpoint("checkpoint has no classification head; fine-tune it first".into()));
    }
    let map: Vec<usize> = dataset_classes
        .iter()
        .map(|c| {
            model_classes
                .iter()
                .position(|m| m == c)
                .ok_or_else(|| Error::Checkpoint(format!("dataset class `{c}` is unknown to the checkpoint")))
        })
        .collect::<Result<_>>()?;
    for w in windows {
        w.label = match w.label {
            Some(l) => Some(*map.get(l).ok_or_else(|| Error::Data(format!("window `{}` has label {l}", w.source_id)))?),
            None => return Err(Error::Data(format!("window `{}` has no label", w.source_id))),
        };
    }
    Ok(())
}

pub fn evaluate(ctx: &Context, checkpoint: &Path, manifest: &Path, out: &Path, run_id: &str) -> Result<()> {
    let (model, _) = load_checkpoint::<f64>(checkpoint)?;
    let mut data = load_datasets(&[manifest.to_path_buf()], true)?;
    align_labels(&mut data.windows, &data.classes, &model.classes)?;
    let metrics = training::evaluate(&model, &data.windows)?;
    create_dir(out)?;
    let path = out.join(format!("{run_id}_metrics.json"));
    write_json(&MetricsFile { classes: &model.classes, train_windows: None, test_windows: None, metrics: &metrics }, &path)?;
    info!("accuracy {:.4}, macro-F1 {:.4}", metrics.accuracy, metrics.macro_f1);
    write_run_manifest(ctx, out, "evaluate", run_id, None, &[checkpoint, manifest], &[&path])?;
    println!("{}", path.display());
    Ok(())
}

pub fn analyze(ctx: &Context, checkpoint: &Path, manifest: &Path, out: &Path, opts: &AnalyzeOptions) -> Result<()> {
    let (model, _) = load_checkpoint::<f64>(checkpoint)?;
    let data = load_datasets(&[manifest.to_path_buf()], false)?;
    create_dir(out)?;
    let k = model.config.codebook_size;
    let run_id = &opts.run_id;
    let mut written: Vec<PathBuf> = Vec::new();
    if opts.similarity {
        let ids = opts.tokens.clone().unwrap_or_else(|| (0..k).collect());
        let (report, name) = if opts.contextual {
            (analysis::contextual_similarity(&model, &data.windows, &ids)?, "similarity_contextual")
        } else {
            (analysis::primitive_similarity(&model, &ids)?, "similarity")
        };
        let path = analysis::report_path(out, run_id, name, opts.format);
        match opts.format {
            ExportFormat::Csv => analysis::write_similarity_csv(&report, &path)?,
            ExportFormat::Json => analysis::write_json(&report, &path)?,
        }
        written.push(path);
    }
    if opts.frequency || opts.transitions {
        let streams = analysis::token_streams(&model, &data.windows)?;
        if opts.frequency {
            let report = analysis::frequency(&streams, k, &data.classes, opts.top_n)?;
            let path = analysis::report_path(out, run_id, "frequency", opts.format);
            match opts.format {
                ExportFormat::Csv => analysis::write_frequency_csv(&report, &path)?,
                ExportFormat::Json => analysis::write_json(&report, &path)?,
            }
            written.push(path);
        }
        if opts.transitions {
            let report = analysis::transitions(&streams, k)?;
            let path = analysis::report_path(out, run_id, "transitions", opts.format);
            match opts.format {
                ExportFormat::Csv => analysis::write_transitions_csv(&report, &path)?,
                ExportFormat::Json => analysis::write_json(&report, &path)?,
            }
            written.push(path);
        }
    }
    let outputs: Vec<&Path> = written.iter().map(PathBuf::as_path).collect();
    write_run_manifest(ctx, out, "analyze", run_id, None, &[checkpoint, manifest], &outputs)?;
    for p in &written {
        println!("{}", p.display());
    }
    Ok(())
}

#[derive(Serialize)]
struct GradcheckFile<'a> {
    tolerance: f64,
    passed: bool,
    components: &'a [training::ComponentCheck],
}

pub fn gradcheck(ctx: &Context, out: &Path, seed: u64) -> Result<()> {
    let report = gradient_suite(seed)?;
    let passed = report.iter().all(|c| c.passed);
    create_dir(out)?;
    let path = out.join("gradcheck_report.json");
    write_json(
        &GradcheckFile { tolerance: training::gradsuite::SUITE_TOLERANCE, passed, components: &report },
        &path,
    )?;
    write_run_manifest(ctx, out, "gradcheck", "gradcheck", None, &[], &[&path])?;
    for c in &report {
        println!(
            "{} {:<28} max rel err {:.3e} over {} coordinates",
            if c.passed { "PASS" } else { "FAIL" },
            c.component,
            c.max_rel_err,
            c.checked
        );
    }
    if passed {
        Ok(())
    } else {
        let failed: Vec<&str> = report.iter().filter(|c| !c.passed).map(|c| c.component.as_str()).collect();
        Err(Error::GradientCheck(failed.join(", ")))
    }
}
