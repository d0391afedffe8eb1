//! Sensor ingestion: resampling, windowing, segmentation and per-segment
//! instance normalization.
//!
//! Segments of a window are always emitted channel-major: every segment of
//! channel 0 in time order, then channel 1, and so on. The embedder relies
//! on this to lay out one `[START] .. [END]` block per channel.

mod manifest;
mod synthetic;

pub use manifest::{load_manifest, ChannelSource, DatasetManifest, LabelSource, Recording};
pub use synthetic::{
    generate_synthetic, write_synthetic_dataset, ClassSpec, GeneratorSpec, SyntheticSpec, Waveform,
};

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const DEFAULT_RATE_HZ: f64 = 100.0;
pub const DEFAULT_WINDOW: usize = 500;
pub const DEFAULT_SEGMENT: usize = 50;
pub const DEFAULT_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelMetadata {
    pub body_part: String,
    pub sensor: String,
    pub axis: String,
    /// Samples per second of the source recording.
    pub native_rate: f64,
}

impl ChannelMetadata {
    pub fn new(
        body_part: impl Into<String>,
        sensor: impl Into<String>,
        axis: impl Into<String>,
        native_rate: f64,
    ) -> Result<Self> {
        let meta = Self {
            body_part: body_part.into(),
            sensor: sensor.into(),
            axis: axis.into(),
            native_rate,
        };
        meta.validate()?;
        Ok(meta)
    }

    pub fn validate(&self) -> Result<()> {
        for (field, value) in [
            ("body_part", &self.body_part),
            ("sensor", &self.sensor),
            ("axis", &self.axis),
        ] {
            if value.trim().is_empty() {
                return Err(Error::InvalidInput(format!(
                    "channel metadata field `{field}` is empty"
                )));
            }
        }
        let rate = self.native_rate;
        if !(rate.is_finite() && rate > 0.0) {
            return Err(Error::InvalidInput(format!(
                "channel native_rate must be positive, got {rate}"
            )));
        }
        Ok(())
    }
}

/// A `T x C` block of resampled samples: the unit of recognition.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorWindow<S> {
    pub samples: Array2<S>,
    pub channels: Vec<ChannelMetadata>,
    pub label: Option<usize>,
    pub source_id: String,
}

impl<S: Scalar> SensorWindow<S> {
    pub fn new(
        samples: Array2<S>,
        channels: Vec<ChannelMetadata>,
        label: Option<usize>,
        source_id: impl Into<String>,
    ) -> Result<Self> {
        if samples.ncols() != channels.len() || channels.is_empty() {
            return Err(Error::shape(
                "SensorWindow channels",
                samples.ncols(),
                channels.len(),
            ));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sensor window samples".into()));
        }
        Ok(Self {
            samples,
            channels,
            label,
            source_id: source_id.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.nrows() == 0
    }

    pub fn num_channels(&self) -> usize {
        self.samples.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment<S> {
    pub values: Vec<S>,
    pub channel_index: usize,
    pub time_index: usize,
}

/// Raw-unit statistics of one segment, taken before normalization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentStats<S> {
    pub mean: S,
    /// Population variance.
    pub variance: S,
}

impl<S: Scalar> SegmentStats<S> {
    pub fn of(values: &[S]) -> Self {
        let mean = mean(values);
        let variance = values.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>()
            / S::of_usize(values.len().max(1));
        Self { mean, variance }
    }

    pub fn zero() -> Self {
        Self {
            mean: S::zero(),
            variance: S::zero(),
        }
    }
}

fn mean<S: Scalar>(values: &[S]) -> S {
    values.iter().copied().sum::<S>() / S::of_usize(values.len().max(1))
}

/// Linear-interpolation resampling with both endpoints pinned.
///
/// The output has `round(len * dst_rate / src_rate)` samples; output sample
/// `i` sits at source coordinate `i * (len - 1) / (out_len - 1)`.
pub fn resample<S: Scalar>(series: &[S], src_rate: f64, dst_rate: f64) -> Result<Vec<S>> {
    if series.is_empty() {
        return Err(Error::InvalidInput("cannot resample an empty series".into()));
    }
    if series.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "resampling needs at least 2 samples, got {}",
            series.len()
        )));
    }
    if !(src_rate > 0.0 && dst_rate > 0.0) {
        return Err(Error::InvalidInput(format!(
            "sample rates must be positive (src {src_rate}, dst {dst_rate})"
        )));
    }
    let out_len = (series.len() as f64 * dst_rate / src_rate).round() as usize;
    if out_len == series.len() {
        return Ok(series.to_vec());
    }
    match out_len {
        0 => Err(Error::InvalidInput(format!(
            "resampling {} samples from {src_rate} Hz to {dst_rate} Hz leaves nothing",
            series.len()
        ))),
        1 => Ok(vec![series[0]]),
        _ => {
            let scale = (series.len() - 1) as f64 / (out_len - 1) as f64;
            let last = series.len() - 1;
            Ok((0..out_len)
                .map(|i| {
                    if i == out_len - 1 {
                        return series[last];
                    }
                    let x = i as f64 * scale;
                    let lo = (x.floor() as usize).min(last);
                    let hi = (lo + 1).min(last);
                    let frac = S::of(x - lo as f64);
                    series[lo] + (series[hi] - series[lo]) * frac
                })
                .collect())
        }
    }
}

/// Cuts fixed-length windows starting at `0, stride, 2*stride, ...`.
///
/// Trailing partial windows are discarded. When `labels` is given, windows
/// whose samples carry more than one label are dropped.
pub fn window_series<S: Scalar>(
    samples: ArrayView2<S>,
    channels: &[ChannelMetadata],
    labels: Option<&[usize]>,
    win: usize,
    stride: usize,
    source_id: &str,
) -> Result<Vec<SensorWindow<S>>> {
    if win == 0 || stride == 0 {
        return Err(Error::InvalidInput(format!(
            "window length and stride must be positive (win {win}, stride {stride})"
        )));
    }
    if let Some(labels) = labels {
        if labels.len() != samples.nrows() {
            return Err(Error::shape("label column", samples.nrows(), labels.len()));
        }
    }
    let total = samples.nrows();
    let mut out = Vec::new();
    let mut start = 0;
    while start + win <= total {
        let label = match labels {
            Some(labels) => {
                let first = labels[start];
                if labels[start..start + win].iter().any(|&l| l != first) {
                    log::debug!("{source_id}: dropping mixed-label window at {start}");
                    start += stride;
                    continue;
                }
                Some(first)
            }
            None => None,
        };
        let block = samples.slice(ndarray::s![start..start + win, ..]).to_owned();
        out.push(SensorWindow::new(
            block,
            channels.to_vec(),
            label,
            format!("{source_id}@{start}"),
        )?);
        start += stride;
    }
    Ok(out)
}

/// Splits every channel into `floor(T / L)` segments, channel-major, with
/// statistics computed on the raw values.
pub fn segment_window<S: Scalar>(
    window: &SensorWindow<S>,
    seg_len: usize,
) -> Result<Vec<(Segment<S>, SegmentStats<S>)>> {
    let t = window.len();
    if seg_len == 0 || seg_len > t {
        return Err(Error::InvalidInput(format!(
            "segment length {seg_len} must be in 1..={t}"
        )));
    }
    let per_channel = t / seg_len;
    let mut out = Vec::with_capacity(per_channel * window.num_channels());
    for (c, column) in window.samples.columns().into_iter().enumerate() {
        for s in 0..per_channel {
            let values: Vec<S> = column
                .slice(ndarray::s![s * seg_len..(s + 1) * seg_len])
                .to_vec();
            let stats = SegmentStats::of(&values);
            out.push((
                Segment {
                    values,
                    channel_index: c,
                    time_index: s,
                },
                stats,
            ));
        }
    }
    Ok(out)
}

/// `(s - mean(s)) / (std(s) + eps)` with the population standard deviation.
pub fn instance_normalize<S: Scalar>(values: &[S], eps: S) -> Result<Vec<S>> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("segment passed to instance_normalize".into()));
    }
    if values.is_empty() {
        return Ok(Vec::new());
    }
    let stats = SegmentStats::of(values);
    let denom = stats.variance.sqrt() + eps;
    Ok(values.iter().map(|&v| (v - stats.mean) / denom).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;

    fn meta(axis: &str) -> ChannelMetadata {
        ChannelMetadata::new("Chest", "acc", axis, 100.0).unwrap()
    }

    /// Endpoint-aligned linear interpolation written without the
    /// implementation's index arithmetic.
    fn interp_oracle(series: &[f64], out_len: usize) -> Vec<f64> {
        let n = series.len();
        (0..out_len)
            .map(|i| {
                let x = i as f64 * (n - 1) as f64 / (out_len - 1) as f64;
                let mut best = series[n - 1];
                for j in 0..n - 1 {
                    if x >= j as f64 && x <= (j + 1) as f64 {
                        let w = x - j as f64;
                        best = (1.0 - w) * series[j] + w * series[j + 1];
                        break;
                    }
                }
                best
            })
            .collect()
    }

    #[test]
    fn resample_constant_doubles_length() {
        let out = resample(&[5.0f64, 5.0, 5.0, 5.0], 50.0, 100.0).unwrap();
        assert_eq!(out, vec![5.0; 8]);
    }

    #[test]
    fn resample_identity_rate() {
        let input = [0.3f64, -1.2, 4.0, 2.5];
        assert_eq!(resample(&input, 100.0, 100.0).unwrap(), input.to_vec());
    }

    #[test]
    fn resample_ramp_matches_oracle() {
        let input = [0.0f64, 1.0, 2.0, 3.0];
        let out = resample(&input, 50.0, 100.0).unwrap();
        let oracle = interp_oracle(&input, 8);
        assert_eq!(out.len(), 8);
        for (a, b) in out.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        assert_eq!(out[0], 0.0);
        assert_eq!(out[7], 3.0);
    }

    #[test]
    fn resample_rejects_empty_and_short() {
        assert!(resample::<f64>(&[], 50.0, 100.0).is_err());
        assert!(resample(&[1.0f64], 50.0, 100.0).is_err());
        assert!(resample(&[1.0f64, 2.0], 0.0, 100.0).is_err());
    }

    fn ramp_matrix(rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |(r, c)| (r * cols + c) as f64)
    }

    #[test]
    fn window_default_stride_discards_tail() {
        let x = ramp_matrix(1200, 1);
        let ws = window_series(x.view(), &[meta("x")], None, 500, 500, "t").unwrap();
        assert_eq!(ws.len(), 2);
        assert_eq!(ws[0].samples[[0, 0]], 0.0);
        assert_eq!(ws[1].samples[[0, 0]], 500.0);
        assert_eq!(ws[1].samples[[499, 0]], 999.0);
    }

    #[test]
    fn window_short_series_is_empty() {
        let x = ramp_matrix(499, 1);
        let ws = window_series(x.view(), &[meta("x")], None, 500, 500, "t").unwrap();
        assert!(ws.is_empty());
    }

    #[test]
    fn window_overlapping_stride_enumerates_offsets() {
        let x = ramp_matrix(1500, 1);
        let ws = window_series(x.view(), &[meta("x")], None, 500, 250, "t").unwrap();
        let expected: Vec<usize> = (0..).map(|k| k * 250).take_while(|s| s + 500 <= 1500).collect();
        assert_eq!(ws.len(), expected.len());
        assert_eq!(ws.len(), 5);
        for (w, s) in ws.iter().zip(expected) {
            assert_eq!(w.samples[[0, 0]], s as f64);
        }
    }

    #[test]
    fn window_drops_mixed_labels() {
        let x = ramp_matrix(1000, 1);
        let mut labels = vec![0usize; 1000];
        for l in labels.iter_mut().skip(700) {
            *l = 1;
        }
        let ws = window_series(x.view(), &[meta("x")], Some(&labels), 500, 500, "t").unwrap();
        assert_eq!(ws.len(), 1);
        assert_eq!(ws[0].label, Some(0));
    }

    #[test]
    fn window_rejects_zero_stride() {
        let x = ramp_matrix(10, 1);
        assert!(window_series(x.view(), &[meta("x")], None, 5, 0, "t").is_err());
    }

    #[test]
    fn segment_counts_and_order() {
        let channels: Vec<_> = ["x", "y", "z", "x", "y", "z"].iter().map(|a| meta(a)).collect();
        let w = SensorWindow::new(ramp_matrix(500, 6), channels, None, "t").unwrap();
        let segs = segment_window(&w, 50).unwrap();
        assert_eq!(segs.len(), 60);
        for (i, (seg, _)) in segs.iter().enumerate() {
            assert_eq!(seg.channel_index, i / 10);
            assert_eq!(seg.time_index, i % 10);
            assert_eq!(seg.values.len(), 50);
        }
        assert!(segment_window(&w, 501).is_err());
    }

    #[test]
    fn stats_of_constant_segment() {
        let s = SegmentStats::of(&[3.0f64; 50]);
        assert_eq!(s.mean, 3.0);
        assert_eq!(s.variance, 0.0);
    }

    #[test]
    fn stats_match_direct_summation() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let values: Vec<f64> = (0..50).map(|_| rng.random_range(-4.0..9.0)).collect();
        let mut sum = 0.0;
        for v in &values {
            sum += v;
        }
        let m = sum / 50.0;
        let mut sq = 0.0;
        for v in &values {
            sq += (v - m) * (v - m);
        }
        let s = SegmentStats::of(&values);
        assert!((s.mean - m).abs() < 1e-12);
        assert!((s.variance - sq / 50.0).abs() < 1e-12);
    }

    #[test]
    fn normalize_constant_is_zero() {
        let out = instance_normalize(&[7.5f64; 50], 1e-5).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalize_symmetric_pair() {
        let out = instance_normalize(&[-1.0f64, 1.0], 1e-300).unwrap();
        assert!((out[0] + 1.0).abs() < 1e-12 && (out[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn normalize_matches_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let values: Vec<f64> = (0..50).map(|_| rng.random_range(-2.0..5.0)).collect();
        let n = values.len() as f64;
        let mu = values.iter().fold(0.0, |a, b| a + b) / n;
        let sigma = (values.iter().fold(0.0, |a, b| a + (b - mu).powi(2)) / n).sqrt();
        let out = instance_normalize(&values, 1e-5).unwrap();
        for (o, v) in out.iter().zip(&values) {
            assert!((o - (v - mu) / (sigma + 1e-5)).abs() < 1e-9);
        }
    }

    #[test]
    fn normalize_rejects_nan() {
        assert!(instance_normalize(&[1.0f64, f64::NAN], 1e-5).is_err());
    }

    #[test]
    fn metadata_validation() {
        assert!(ChannelMetadata::new("", "acc", "x", 100.0).is_err());
        assert!(ChannelMetadata::new("Chest", "acc", "x", 0.0).is_err());
        let m = ChannelMetadata::new("Chest", "acc", "x", 50.0).unwrap();
        let json = serde_json::to_string(&m).unwrap();
        assert_eq!(serde_json::from_str::<ChannelMetadata>(&json).unwrap(), m);
    }

    proptest! {
        #[test]
        fn normalized_segments_are_standardized(values in prop::collection::vec(-100.0f64..100.0, 2..80)) {
            let out = instance_normalize(&values, 1e-5).unwrap();
            let n = out.len() as f64;
            let m = out.iter().sum::<f64>() / n;
            prop_assert!(m.abs() <= 1e-9);
            let raw = SegmentStats::of(&values);
            if raw.variance.sqrt() > 1e-1 {
                let sd = (out.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
                prop_assert!((sd - 1.0).abs() < 1e-3);
            }
        }

        #[test]
        fn windows_tile_without_gaps(total in 0usize..3000, win in 1usize..600) {
            let x = ramp_matrix(total, 1);
            let ws = window_series(x.view(), &[meta("x")], None, win, win, "p").unwrap();
            prop_assert_eq!(ws.len(), total / win);
            for (k, w) in ws.iter().enumerate() {
                prop_assert_eq!(w.samples[[0, 0]], (k * win) as f64);
                prop_assert_eq!(w.len(), win);
            }
        }

        #[test]
        fn resample_constant_stays_constant(c in -50.0f64..50.0, n in 2usize..40, up in 1u32..4) {
            let out = resample(&vec![c; n], 50.0, 50.0 * up as f64).unwrap();
            prop_assert!(out.iter().all(|&v| (v - c).abs() < 1e-12));
        }
    }
}
