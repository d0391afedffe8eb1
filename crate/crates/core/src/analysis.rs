//! Interpretability reports over a trained model: primitive-embedding
//! similarity, primitive frequency by activity, and the primitive transition
//! matrix, with CSV and JSON export.
//!
//! CSV schemas:
//!
//! * similarity: `token,<id_1>,...,<id_n>`, one row per token id; undefined
//!   (zero-norm) rows and columns hold `NaN`.
//! * frequency: `rank,token,count,<label_1>,...` with the label columns
//!   holding composition fractions; only the top-n rows are written.
//! * transitions: `from_token,observed,total,p_0,...,p_{K-1}`; unobserved rows
//!   are zeros with `observed=false`.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use ndarray::{s, ArrayView2};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::SensorWindow;
use crate::model::{prepare_window, MetaTable, MoPFormer, PreparedWindow};
use crate::scalar::Scalar;

pub const DEFAULT_TOP_N: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub tokens: Vec<usize>,
    /// Cosine similarities; `NaN` where a row has zero norm.
    #[serde(with = "nan_safe")]
    pub values: Vec<Vec<f64>>,
    /// Token ids whose embedding has zero norm.
    pub undefined: Vec<usize>,
}

/// Pairwise cosine similarity between rows `ids` of `embeddings`.
pub fn similarity<S: Scalar>(embeddings: ArrayView2<S>, ids: &[usize]) -> Result<SimilarityMatrix> {
    let k = embeddings.nrows();
    if let Some(&bad) = ids.iter().find(|&&i| i >= k) {
        return Err(Error::InvalidInput(format!("token id {bad} out of range for {k} primitives")));
    }
    let rows: Vec<Vec<f64>> = ids.iter().map(|&i| embeddings.row(i).iter().map(|v| v.f64()).collect()).collect();
    let norms: Vec<f64> = rows.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let n = ids.len();
    let mut values = vec![vec![f64::NAN; n]; n];
    for a in 0..n {
        if norms[a] == 0.0 {
            continue;
        }
        for b in a..n {
            if norms[b] == 0.0 {
                continue;
            }
            let dot: f64 = rows[a].iter().zip(&rows[b]).map(|(x, y)| x * y).sum();
            let c = if a == b { 1.0 } else { dot / (norms[a] * norms[b]) };
            values[a][b] = c;
            values[b][a] = c;
        }
    }
    let undefined = ids.iter().zip(&norms).filter(|(_, &n)| n == 0.0).map(|(&i, _)| i).collect();
    Ok(SimilarityMatrix { tokens: ids.to_vec(), values, undefined })
}

/// Similarity of the learned primitive embeddings of `ids`.
pub fn primitive_similarity<S: Scalar>(model: &MoPFormer<S>, ids: &[usize]) -> Result<SimilarityMatrix> {
    let k = model.config.codebook_size;
    similarity(model.net.embedder.table.rows.slice(s![..k, ..]), ids)
}

/// Similarity of the mean composed input embedding of each primitive over
/// its occurrences in `windows`. Primitives that never occur are undefined.
pub fn contextual_similarity<S: Scalar>(
    model: &MoPFormer<S>,
    windows: &[SensorWindow<S>],
    ids: &[usize],
) -> Result<SimilarityMatrix> {
    let prepared = prepare(model, windows)?;
    let provider = model.config.metadata.build()?;
    let meta = MetaTable::<S>::build(provider.as_ref(), prepared.iter().flat_map(|w| w.descriptors.iter()))?;
    let (means, _) = model.contextual_primitive_embeddings(&prepared, &meta)?;
    similarity(means.view(), ids)
}

fn prepare<S: Scalar>(model: &MoPFormer<S>, windows: &[SensorWindow<S>]) -> Result<Vec<PreparedWindow<S>>> {
    windows.iter().map(|w| prepare_window(w, &model.config)).collect()
}

/// One stream per channel per window, in window order.
pub fn token_streams<S: Scalar>(model: &MoPFormer<S>, windows: &[SensorWindow<S>]) -> Result<Vec<TokenStream>> {
    let mut out = Vec::new();
    for w in prepare(model, windows)? {
        let indices = model.quantize_indices(&w);
        for ch in indices.chunks(w.segments_per_channel.max(1)) {
            out.push(TokenStream { indices: ch.to_vec(), label: w.label });
        }
    }
    Ok(out)
}

/// Time-ordered primitive indices of one channel of one window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenStream {
    pub indices: Vec<usize>,
    pub label: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyReport {
    pub labels: Vec<String>,
    pub counts: Vec<u64>,
    /// Per primitive, the share of labeled occurrences per label.
    pub composition: Vec<Vec<f64>>,
    /// All primitive ids by descending count, ties by id.
    pub order: Vec<usize>,
    pub top_n: usize,
    pub total: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyRow {
    pub rank: usize,
    pub token: usize,
    pub count: u64,
    pub composition: Vec<f64>,
}

impl FrequencyReport {
    pub fn top_rows(&self) -> Vec<FrequencyRow> {
        self.order
            .iter()
            .take(self.top_n)
            .enumerate()
            .map(|(r, &t)| FrequencyRow {
                rank: r + 1,
                token: t,
                count: self.counts[t],
                composition: self.composition[t].clone(),
            })
            .collect()
    }
}

pub fn frequency(streams: &[TokenStream], codebook_size: usize, labels: &[String], top_n: usize) -> Result<FrequencyReport> {
    let mut counts = vec![0u64; codebook_size];
    let mut by_label = vec![vec![0u64; labels.len()]; codebook_size];
    for s in streams {
        if let Some(l) = s.label {
            if l >= labels.len() {
                return Err(Error::InvalidInput(format!("label {l} out of range for {} labels", labels.len())));
            }
        }
        for &i in &s.indices {
            if i >= codebook_size {
                return Err(Error::InvalidInput(format!("token {i} out of range for {codebook_size} primitives")));
            }
            counts[i] += 1;
            if let Some(l) = s.label {
                by_label[i][l] += 1;
            }
        }
    }
    let composition = by_label
        .iter()
        .map(|row| {
            let n: u64 = row.iter().sum();
            row.iter().map(|&c| if n == 0 { 0.0 } else { c as f64 / n as f64 }).collect()
        })
        .collect();
    let mut order: Vec<usize> = (0..codebook_size).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    Ok(FrequencyReport {
        labels: labels.to_vec(),
        total: counts.iter().sum(),
        counts,
        composition,
        order,
        top_n: top_n.min(codebook_size),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionMatrix {
    pub counts: Vec<Vec<u64>>,
    pub values: Vec<Vec<f64>>,
    pub observed: Vec<bool>,
}

impl TransitionMatrix {
    pub fn row_totals(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }
}

/// Bigram counts within each stream, normalized per row. Streams never
/// connect to each other.
pub fn transitions(streams: &[TokenStream], codebook_size: usize) -> Result<TransitionMatrix> {
    let mut counts = vec![vec![0u64; codebook_size]; codebook_size];
    for s in streams {
        if let Some(&bad) = s.indices.iter().find(|&&i| i >= codebook_size) {
            return Err(Error::InvalidInput(format!("token {bad} out of range for {codebook_size} primitives")));
        }
        for pair in s.indices.windows(2) {
            counts[pair[0]][pair[1]] += 1;
        }
    }
    let mut values = vec![vec![0.0; codebook_size]; codebook_size];
    let mut observed = vec![false; codebook_size];
    for (i, row) in counts.iter().enumerate() {
        let n: u64 = row.iter().sum();
        if n > 0 {
            observed[i] = true;
            for (v, &c) in values[i].iter_mut().zip(row) {
                *v = c as f64 / n as f64;
            }
        }
    }
    Ok(TransitionMatrix { counts, values, observed })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportFormat {
    Csv,
    Json,
}

impl ExportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ExportFormat::Csv => "csv",
            ExportFormat::Json => "json",
        }
    }
}

/// `<run_id>_<report>.<ext>` inside `dir`.
pub fn report_path(dir: &Path, run_id: &str, report: &str, format: ExportFormat) -> PathBuf {
    dir.join(format!("{run_id}_{report}.{}", format.extension()))
}

fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

fn parse_f64(s: &str) -> Result<f64> {
    s.parse().map_err(|_| Error::Data(format!("`{s}` is not a number")))
}

fn parse_usize(s: &str) -> Result<usize> {
    s.parse().map_err(|_| Error::Data(format!("`{s}` is not a non-negative integer")))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::WriterBuilder::new().from_writer(BufWriter::new(file)))
}

fn csv_records(path: &Path) -> Result<(Vec<String>, Vec<csv::StringRecord>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(BufReader::new(file));
    let header = r.headers()?.iter().map(str::to_string).collect();
    let rows = r.records().collect::<std::result::Result<Vec<_>, _>>()?;
    Ok((header, rows))
}

pub fn similarity_csv_header(m: &SimilarityMatrix) -> Vec<String> {
    std::iter::once("token".to_string()).chain(m.tokens.iter().map(|t| t.to_string())).collect()
}

pub fn write_similarity_csv(m: &SimilarityMatrix, path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(similarity_csv_header(m))?;
    for (t, row) in m.tokens.iter().zip(&m.values) {
        w.write_record(std::iter::once(t.to_string()).chain(row.iter().map(|&v| fmt_f64(v))))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_similarity_csv(path: &Path) -> Result<SimilarityMatrix> {
    let (header, rows) = csv_records(path)?;
    if header.first().map(String::as_str) != Some("token") {
        return Err(Error::Data(format!("{}: not a similarity export", path.display())));
    }
    let tokens = header[1..].iter().map(|s| parse_usize(s)).collect::<Result<Vec<_>>>()?;
    let mut values = Vec::with_capacity(rows.len());
    let mut undefined = Vec::new();
    for (i, rec) in rows.iter().enumerate() {
        let row = rec.iter().skip(1).map(parse_f64).collect::<Result<Vec<_>>>()?;
        if row.len() != tokens.len() {
            return Err(Error::shape("similarity row", tokens.len(), row.len()));
        }
        if row[i].is_nan() {
            undefined.push(tokens[i]);
        }
        values.push(row);
    }
    Ok(SimilarityMatrix { tokens, values, undefined })
}

pub fn frequency_csv_header(r: &FrequencyReport) -> Vec<String> {
    ["rank", "token", "count"]
        .iter()
        .map(|s| s.to_string())
        .chain(r.labels.iter().cloned())
        .collect()
}

pub fn write_frequency_csv(r: &FrequencyReport, path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(frequency_csv_header(r))?;
    for row in r.top_rows() {
        w.write_record(
            [row.rank.to_string(), row.token.to_string(), row.count.to_string()]
                .into_iter()
                .chain(row.composition.iter().map(|&v| fmt_f64(v))),
        )?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads the top-n rows of a frequency export and its label names.
pub fn read_frequency_csv(path: &Path) -> Result<(Vec<String>, Vec<FrequencyRow>)> {
    let (header, rows) = csv_records(path)?;
    if header.len() < 3 || header[..3] != ["rank", "token", "count"] {
        return Err(Error::Data(format!("{}: not a frequency export", path.display())));
    }
    let labels = header[3..].to_vec();
    let out = rows
        .iter()
        .map(|rec| {
            Ok(FrequencyRow {
                rank: parse_usize(&rec[0])?,
                token: parse_usize(&rec[1])?,
                count: rec[2].parse().map_err(|_| Error::Data(format!("bad count `{}`", &rec[2])))?,
                composition: rec.iter().skip(3).map(parse_f64).collect::<Result<_>>()?,
            })
        })
        .collect::<Result<_>>()?;
    Ok((labels, out))
}

pub fn transitions_csv_header(k: usize) -> Vec<String> {
    ["from_token", "observed", "total"]
        .iter()
        .map(|s| s.to_string())
        .chain((0..k).map(|j| format!("p_{j}")))
        .collect()
}

pub fn write_transitions_csv(m: &TransitionMatrix, path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(transitions_csv_header(m.values.len()))?;
    for (i, (row, total)) in m.values.iter().zip(m.row_totals()).enumerate() {
        w.write_record(
            [i.to_string(), m.observed[i].to_string(), total.to_string()]
                .into_iter()
                .chain(row.iter().map(|&v| fmt_f64(v))),
        )?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Contents of a transitions CSV export.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionTable {
    pub values: Vec<Vec<f64>>,
    pub observed: Vec<bool>,
    pub totals: Vec<u64>,
}

pub fn read_transitions_csv(path: &Path) -> Result<TransitionTable> {
    let (header, rows) = csv_records(path)?;
    if header.len() < 3 || header[..3] != ["from_token", "observed", "total"] {
        return Err(Error::Data(format!("{}: not a transitions export", path.display())));
    }
    let mut values = Vec::with_capacity(rows.len());
    let mut observed = Vec::with_capacity(rows.len());
    let mut totals = Vec::with_capacity(rows.len());
    for rec in &rows {
        observed.push(
            rec[1]
                .parse()
                .map_err(|_| Error::Data(format!("bad observed flag `{}`", &rec[1])))?,
        );
        totals.push(rec[2].parse().map_err(|_| Error::Data(format!("bad total `{}`", &rec[2])))?);
        values.push(rec.iter().skip(3).map(parse_f64).collect::<Result<Vec<_>>>()?);
    }
    Ok(TransitionTable { values, observed, totals })
}

pub fn write_json<T: Serialize>(report: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(report)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// JSON has no NaN; undefined similarities travel as `null`.
mod nan_safe {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[Vec<f64>], s: S) -> Result<S::Ok, S::Error> {
        let opt: Vec<Vec<Option<f64>>> = v
            .iter()
            .map(|r| r.iter().map(|&x| (!x.is_nan()).then_some(x)).collect())
            .collect();
        opt.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vec<f64>>, D::Error> {
        let opt: Vec<Vec<Option<f64>>> = Vec::deserialize(d)?;
        Ok(opt
            .into_iter()
            .map(|r| r.into_iter().map(|x| x.unwrap_or(f64::NAN)).collect())
            .collect())
    }
}
