//! Motion-primitive codebook: nearest-prototype assignment, commitment loss
//! with stop-gradient semantics, codebook updates and usage monitoring.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const DEFAULT_BETA: f64 = 0.25;
pub const DEFAULT_KMEANS_ITERS: usize = 25;
const MAGIC: &[u8; 8] = b"MOPFCB\0\0";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum InitStrategy {
    RandomNormal,
    KmeansSeeded { iterations: usize },
}

impl Default for InitStrategy {
    fn default() -> Self {
        InitStrategy::KmeansSeeded {
            iterations: DEFAULT_KMEANS_ITERS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateMode {
    Sgd,
    Ema,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook<S> {
    /// `K x L`, one prototype per row.
    pub prototypes: Array2<S>,
    pub usage_counts: Vec<u64>,
    pub ema_cluster_size: Option<Vec<S>>,
    pub ema_mean: Option<Array2<S>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizeResult<S> {
    pub index: usize,
    pub codeword: Vec<S>,
    /// Squared L2 distance to the chosen codeword.
    pub distance: S,
    pub vq_loss: S,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VqLoss<S> {
    pub loss: S,
    pub grad_input: Vec<S>,
    pub grad_codeword: Vec<S>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UsageReport {
    pub active_codes: usize,
    pub perplexity: f64,
}

pub fn squared_distance<S: Scalar>(a: &[S], b: ArrayView1<S>) -> S {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y) * (x - y))
        .fold(S::zero(), |acc, d| acc + d)
}

impl<S: Scalar> Codebook<S> {
    pub fn from_prototypes(prototypes: Array2<S>) -> Result<Self> {
        if prototypes.nrows() < 2 {
            return Err(Error::InvalidInput(format!(
                "codebook needs at least 2 prototypes, got {}",
                prototypes.nrows()
            )));
        }
        if prototypes.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("codebook prototypes".into()));
        }
        let k = prototypes.nrows();
        Ok(Self {
            prototypes,
            usage_counts: vec![0; k],
            ema_cluster_size: None,
            ema_mean: None,
        })
    }

    /// Builds a `K x L` codebook. `KmeansSeeded` needs at least `K` sample
    /// segments and runs k-means++ seeding followed by a fixed number of
    /// Lloyd iterations.
    pub fn init(
        k: usize,
        l: usize,
        strategy: InitStrategy,
        sample: Option<ArrayView2<S>>,
        seed: u64,
    ) -> Result<Self> {
        if k < 2 || l == 0 {
            return Err(Error::InvalidInput(format!(
                "codebook shape {k}x{l} is invalid (K >= 2, L >= 1)"
            )));
        }
        match strategy {
            InitStrategy::RandomNormal => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let normal = Normal::new(0.0, (1.0 / l as f64).sqrt())
                    .map_err(|e| Error::InvalidInput(e.to_string()))?;
                let protos = Array2::from_shape_simple_fn((k, l), || S::of(normal.sample(&mut rng)));
                Self::from_prototypes(protos)
            }
            InitStrategy::KmeansSeeded { iterations } => {
                let sample = sample.ok_or_else(|| {
                    Error::InvalidInput("kmeans-seeded init needs sample segments".into())
                })?;
                if sample.nrows() < k {
                    return Err(Error::InvalidInput(format!(
                        "kmeans-seeded init needs at least {k} segments, got {}",
                        sample.nrows()
                    )));
                }
                if sample.ncols() != l {
                    return Err(Error::shape("kmeans sample", l, sample.ncols()));
                }
                let seeds = kmeans_plus_plus_seeds(sample, k, seed);
                let mut centroids = Array2::zeros((k, l));
                for (row, &i) in seeds.iter().enumerate() {
                    centroids.row_mut(row).assign(&sample.row(i));
                }
                lloyd(sample, &mut centroids, iterations);
                Self::from_prototypes(centroids)
            }
        }
    }

    pub fn size(&self) -> usize {
        self.prototypes.nrows()
    }

    pub fn segment_len(&self) -> usize {
        self.prototypes.ncols()
    }

    /// Nearest prototype by squared L2; ties resolve to the lowest index.
    pub fn nearest(&self, segment: &[S]) -> (usize, S) {
        let mut best = (0, S::infinity());
        for (k, row) in self.prototypes.rows().into_iter().enumerate() {
            let d = squared_distance(segment, row);
            if d < best.1 {
                best = (k, d);
            }
        }
        best
    }

    /// Read-only quantization with the commitment loss at `beta`.
    pub fn quantize(&self, segment: &[S], beta: S) -> QuantizeResult<S> {
        let (index, distance) = self.nearest(segment);
        QuantizeResult {
            index,
            codeword: self.prototypes.row(index).to_vec(),
            distance,
            vq_loss: distance * (S::one() + beta),
        }
    }

    /// Training-mode quantization: also bumps the usage counter.
    pub fn quantize_train(&mut self, segment: &[S], beta: S) -> QuantizeResult<S> {
        let result = self.quantize(segment, beta);
        self.usage_counts[result.index] += 1;
        result
    }

    pub fn record_usage(&mut self, indices: impl IntoIterator<Item = usize>) {
        for i in indices {
            self.usage_counts[i] += 1;
        }
    }

    pub fn reset_usage(&mut self) {
        self.usage_counts.iter_mut().for_each(|c| *c = 0);
    }

    /// Applies one update from `(normalized segment, assigned index)` pairs.
    ///
    /// `Sgd` descends the codebook term of the commitment loss, averaged over
    /// the segments assigned to each row: `z_k -= rate * mean(2 (z_k - s))`.
    /// `Ema` treats `rate` as the decay of the usual cluster-size and
    /// cluster-sum accumulators. Rows without assignments are left untouched.
    pub fn update(&mut self, batch: &[(&[S], usize)], mode: UpdateMode, rate: S) -> Result<()> {
        if batch.is_empty() {
            return Ok(());
        }
        let (k, l) = self.prototypes.dim();
        let mut sums = Array2::<S>::zeros((k, l));
        let mut counts = vec![0usize; k];
        for (seg, idx) in batch {
            if *idx >= k || seg.len() != l {
                return Err(Error::shape("codebook update", (k, l), (*idx, seg.len())));
            }
            counts[*idx] += 1;
            let mut row = sums.row_mut(*idx);
            for (acc, &v) in row.iter_mut().zip(seg.iter()) {
                *acc += v;
            }
        }
        match mode {
            UpdateMode::Sgd => {
                if !(rate > S::zero() && rate <= S::one()) {
                    return Err(Error::InvalidInput(format!("sgd rate {rate} outside (0, 1]")));
                }
                let two = S::of(2.0);
                for (r, &n) in counts.iter().enumerate() {
                    if n == 0 {
                        continue;
                    }
                    let n = S::of_usize(n);
                    let mut z = self.prototypes.row_mut(r);
                    for (zv, &sum) in z.iter_mut().zip(sums.row(r).iter()) {
                        let grad = two * (*zv - sum / n);
                        *zv -= rate * grad;
                    }
                }
            }
            UpdateMode::Ema => {
                if !(rate >= S::zero() && rate < S::one()) {
                    return Err(Error::InvalidInput(format!("ema decay {rate} outside [0, 1)")));
                }
                let sizes = self.ema_cluster_size.get_or_insert_with(|| vec![S::zero(); k]);
                let means = self.ema_mean.get_or_insert_with(|| Array2::zeros((k, l)));
                let keep = S::one() - rate;
                for (r, &n) in counts.iter().enumerate() {
                    if n == 0 {
                        continue;
                    }
                    sizes[r] = rate * sizes[r] + keep * S::of_usize(n);
                    let mut m = means.row_mut(r);
                    m.zip_mut_with(&sums.row(r), |mv, &s| *mv = rate * *mv + keep * s);
                    let size = sizes[r];
                    self.prototypes
                        .row_mut(r)
                        .zip_mut_with(&m, |z, &mv| *z = mv / size);
                }
            }
        }
        Ok(())
    }

    /// Re-seeds rows whose usage count is zero with random pool segments.
    /// Returns the re-seeded row indices.
    pub fn reseed_dead(&mut self, pool: &[Vec<S>], rng: &mut impl Rng) -> Vec<usize> {
        if pool.is_empty() {
            return Vec::new();
        }
        let dead: Vec<usize> = (0..self.size())
            .filter(|&k| self.usage_counts[k] == 0)
            .collect();
        for &k in &dead {
            let pick = &pool[rng.random_range(0..pool.len())];
            self.prototypes
                .row_mut(k)
                .iter_mut()
                .zip(pick)
                .for_each(|(z, &v)| *z = v);
        }
        dead
    }

    pub fn usage_report(&self) -> Result<UsageReport> {
        usage_report(&self.usage_counts)
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
        let (k, l) = self.prototypes.dim();
        w.write_u64::<LittleEndian>(k as u64)?;
        w.write_u64::<LittleEndian>(l as u64)?;
        for v in self.prototypes.iter() {
            w.write_f64::<LittleEndian>(v.f64())?;
        }
        for &c in &self.usage_counts {
            w.write_u64::<LittleEndian>(c)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let corrupt = |e: std::io::Error| Error::Checkpoint(format!("codebook block: {e}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(corrupt)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("codebook block has a bad magic string".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(corrupt)?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported codebook format version {version}"
            )));
        }
        let k = r.read_u64::<LittleEndian>().map_err(corrupt)? as usize;
        let l = r.read_u64::<LittleEndian>().map_err(corrupt)? as usize;
        let mut values = Vec::with_capacity(k * l);
        for _ in 0..k * l {
            values.push(S::of(r.read_f64::<LittleEndian>().map_err(corrupt)?));
        }
        let prototypes = Array2::from_shape_vec((k, l), values)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut book = Self::from_prototypes(prototypes)?;
        for c in book.usage_counts.iter_mut() {
            *c = r.read_u64::<LittleEndian>().map_err(corrupt)?;
        }
        Ok(book)
    }
}

/// Commitment loss `|sg[s] - z|^2 + beta |s - sg[z]|^2`.
///
/// The codeword gradient carries only the first term and the input gradient
/// only the second; each stopped argument is treated as a constant.
pub fn vq_loss<S: Scalar>(segment: &[S], codeword: &[S], beta: S) -> VqLoss<S> {
    let two = S::of(2.0);
    let mut dist = S::zero();
    let mut grad_input = Vec::with_capacity(segment.len());
    let mut grad_codeword = Vec::with_capacity(segment.len());
    for (&s, &z) in segment.iter().zip(codeword) {
        let diff = s - z;
        dist += diff * diff;
        grad_input.push(two * beta * diff);
        grad_codeword.push(-two * diff);
    }
    VqLoss {
        loss: dist + beta * dist,
        grad_input,
        grad_codeword,
    }
}

/// Straight-through estimator: gradients cross the quantization step as if
/// it were the identity.
pub fn straight_through<S: Scalar>(downstream_grad_wrt_codeword: &[S]) -> Vec<S> {
    downstream_grad_wrt_codeword.to_vec()
}

pub fn usage_report(counts: &[u64]) -> Result<UsageReport> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::InvalidInput("no codebook usage has been recorded".into()));
    }
    let total = total as f64;
    let entropy: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum();
    Ok(UsageReport {
        active_codes: counts.iter().filter(|&&c| c > 0).count(),
        perplexity: entropy.exp(),
    })
}

/// k-means++ seeding: first seed uniform, later seeds proportional to the
/// squared distance to the nearest chosen seed.
pub fn kmeans_plus_plus_seeds<S: Scalar>(points: ArrayView2<S>, k: usize, seed: u64) -> Vec<usize> {
    let n = points.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if n == 0 || k == 0 {
        return Vec::new();
    }
    let mut chosen = vec![rng.random_range(0..n)];
    let mut best: Vec<f64> = (0..n)
        .map(|i| sq_dist_rows(points.row(i), points.row(chosen[0])))
        .collect();
    while chosen.len() < k.min(n) {
        let total: f64 = best.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            let mut last_positive = 0;
            for (i, &d) in best.iter().enumerate() {
                if d <= 0.0 {
                    continue;
                }
                last_positive = i;
                if target < d {
                    pick = Some(i);
                    break;
                }
                target -= d;
            }
            pick.unwrap_or(last_positive)
        } else {
            let remaining: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            remaining[index::sample(&mut rng, remaining.len(), 1).index(0)]
        };
        chosen.push(next);
        for (i, b) in best.iter_mut().enumerate() {
            let d = sq_dist_rows(points.row(i), points.row(next));
            if d < *b {
                *b = d;
            }
        }
    }
    chosen
}

fn sq_dist_rows<S: Scalar>(a: ArrayView1<S>, b: ArrayView1<S>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let d = (x - y).f64();
            d * d
        })
        .sum()
}

/// Lloyd iterations; empty clusters keep their previous centroid.
fn lloyd<S: Scalar>(points: ArrayView2<S>, centroids: &mut Array2<S>, iterations: usize) {
    let (k, l) = centroids.dim();
    let mut assign = vec![0usize; points.nrows()];
    for _ in 0..iterations {
        let book = CentroidView(centroids);
        for (i, row) in points.rows().into_iter().enumerate() {
            assign[i] = book.nearest(row);
        }
        let mut sums = Array2::<S>::zeros((k, l));
        let mut counts = vec![0usize; k];
        for (i, row) in points.rows().into_iter().enumerate() {
            counts[assign[i]] += 1;
            let mut s = sums.row_mut(assign[i]);
            s += &row;
        }
        for (c, &n) in counts.iter().enumerate() {
            if n > 0 {
                let mean = &sums.row(c) / S::of_usize(n);
                centroids.row_mut(c).assign(&mean);
            }
        }
    }
}

struct CentroidView<'a, S>(&'a Array2<S>);

impl<S: Scalar> CentroidView<'_, S> {
    fn nearest(&self, x: ArrayView1<S>) -> usize {
        let mut best = (0, S::infinity());
        for (k, row) in self.0.rows().into_iter().enumerate() {
            let d = x
                .iter()
                .zip(row.iter())
                .fold(S::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b));
            if d < best.1 {
                best = (k, d);
            }
        }
        best.0
    }
}
