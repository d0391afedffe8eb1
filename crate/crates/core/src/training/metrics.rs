//! Classification metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    /// `confusion[truth][predicted]`
    pub confusion: Vec<Vec<u64>>,
    pub per_class_f1: Vec<Option<f64>>,
    /// Classes absent from both truth and predictions.
    pub excluded_classes: Vec<usize>,
    pub total: usize,
}

pub fn classification_metrics(predicted: &[usize], truth: &[usize], num_classes: usize) -> Result<Metrics> {
    if truth.is_empty() {
        return Err(Error::Data("cannot evaluate an empty dataset".into()));
    }
    if predicted.len() != truth.len() {
        return Err(Error::shape("predictions", truth.len(), predicted.len()));
    }
    let mut confusion = vec![vec![0u64; num_classes]; num_classes];
    for (&p, &t) in predicted.iter().zip(truth) {
        if p >= num_classes || t >= num_classes {
            return Err(Error::InvalidInput(format!(
                "label pair ({t}, {p}) out of range for {num_classes} classes"
            )));
        }
        confusion[t][p] += 1;
    }
    let correct: u64 = (0..num_classes).map(|c| confusion[c][c]).sum();
    let mut per_class_f1 = Vec::with_capacity(num_classes);
    let mut excluded = Vec::new();
    for c in 0..num_classes {
        let tp = confusion[c][c] as f64;
        let actual: u64 = confusion[c].iter().sum();
        let predicted_c: u64 = confusion.iter().map(|row| row[c]).sum();
        if actual == 0 && predicted_c == 0 {
            excluded.push(c);
            per_class_f1.push(None);
            continue;
        }
        per_class_f1.push(Some(2.0 * tp / (actual + predicted_c) as f64));
    }
    if !excluded.is_empty() {
        log::info!("macro-F1 excludes classes absent from truth and predictions: {excluded:?}");
    }
    let defined: Vec<f64> = per_class_f1.iter().flatten().copied().collect();
    Ok(Metrics {
        accuracy: correct as f64 / truth.len() as f64,
        macro_f1: defined.iter().sum::<f64>() / defined.len() as f64,
        confusion,
        per_class_f1,
        excluded_classes: excluded,
        total: truth.len(),
    })
}
