//! Evaluation and efficiency accounting.
//!
//! Classification quality is accuracy and macro-F1 (unweighted mean of
//! per-class F1; a class that never occurs in the labels and is never
//! predicted is excluded from the mean, any other empty denominator counts
//! as 0). Efficiency is parameter count, model size in MiB, multiply-
//! accumulate operations per inference (GMACs, a shape-only function of
//! the architecture), and an optional energy proxy driven entirely by a
//! user-supplied per-MAC energy table.
//!
//! Model size follows the `count * bits / 8 / 1024^2` convention: every
//! parameter is billed at the codebook's bit length. The serialized file
//! is slightly larger (centroid tables and fp32-exempt tensors); both
//! numbers are reported.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::model::{LayerKind, ModelGraph};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("metric inputs must be non-empty")]
    Empty,
    #[error("preds and labels differ in length: {preds} vs {labels}")]
    LengthMismatch { preds: usize, labels: usize },
    #[error("class index {index} out of range for {n_classes} classes")]
    ClassOutOfRange { index: usize, n_classes: usize },
    #[error("n_classes must be >= 1")]
    NoClasses,
    #[error("input of {frames} frames is too short for {layer} (kernel {kernel})")]
    InputTooShort {
        layer: String,
        frames: usize,
        kernel: usize,
    },
    #[error("no energy entry for bit length {0}")]
    MissingEnergyEntry(u8),
}

/// Fraction of exact matches.
pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64, MetricsError> {
    if preds.is_empty() {
        return Err(MetricsError::Empty);
    }
    if preds.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            preds: preds.len(),
            labels: labels.len(),
        });
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Unweighted mean of per-class F1 scores.
pub fn macro_f1(preds: &[usize], labels: &[usize], n_classes: usize) -> Result<f64, MetricsError> {
    if n_classes < 1 {
        return Err(MetricsError::NoClasses);
    }
    if preds.is_empty() {
        return Err(MetricsError::Empty);
    }
    if preds.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            preds: preds.len(),
            labels: labels.len(),
        });
    }
    for &v in preds.iter().chain(labels) {
        if v >= n_classes {
            return Err(MetricsError::ClassOutOfRange {
                index: v,
                n_classes,
            });
        }
    }
    let mut tp = vec![0usize; n_classes];
    let mut fp = vec![0usize; n_classes];
    let mut fn_ = vec![0usize; n_classes];
    for (&p, &l) in preds.iter().zip(labels) {
        if p == l {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[l] += 1;
        }
    }
    let mut sum = 0.0;
    let mut counted = 0usize;
    for c in 0..n_classes {
        let present = tp[c] + fp[c] + fn_[c] > 0;
        if !present {
            continue; // never true, never predicted: excluded
        }
        let denom = 2 * tp[c] + fp[c] + fn_[c];
        sum += if denom == 0 {
            0.0
        } else {
            2.0 * tp[c] as f64 / denom as f64
        };
        counted += 1;
    }
    if counted == 0 {
        return Err(MetricsError::Empty);
    }
    Ok(sum / counted as f64)
}

/// `param_count * bit_length / 8 / 1024^2`: MiB at a uniform bit cost per
/// parameter.
pub fn model_size_mb(param_count: usize, bit_length: u8) -> f64 {
    param_count as f64 * bit_length as f64 / 8.0 / (1024.0 * 1024.0)
}

/// Multiply-accumulate count for one inference at the given input length,
/// in units of 1e9. Convolutions cost `kernel * c_in * c_out * t_out`,
/// framewise dense layers `fan_in * fan_out * frames`, and the classifier
/// head `fan_in * fan_out` once on the pooled vector. Weights never enter:
/// the count is a function of shapes alone, so it is identical at every
/// bit length.
pub fn count_gmacs(model: &ModelGraph, input_frames: usize) -> Result<f64, MetricsError> {
    let mut frames = input_frames;
    let mut macs = 0u128;
    for layer in &model.layers {
        match layer.kind {
            LayerKind::Conv1d { stride } => {
                let (c_out, c_in, k) = (
                    layer.weight.shape[0],
                    layer.weight.shape[1],
                    layer.weight.shape[2],
                );
                if frames < k {
                    return Err(MetricsError::InputTooShort {
                        layer: layer.weight.name.clone(),
                        frames,
                        kernel: k,
                    });
                }
                let t_out = (frames - k) / stride + 1;
                macs += (k * c_in * c_out * t_out) as u128;
                frames = t_out;
            }
            LayerKind::Dense => {
                let (fan_in, fan_out) = (layer.weight.shape[0], layer.weight.shape[1]);
                macs += (fan_in * fan_out * frames) as u128;
            }
        }
    }
    if let Some(head) = &model.head {
        macs += (head.weight.shape[0] * head.weight.shape[1]) as u128;
    }
    Ok(macs as f64 / 1e9)
}

/// `gmacs * 1e9 * energy_table[bit_length]`. The table is entirely
/// user-supplied; no default energy-per-MAC figures ship with the crate.
pub fn energy_proxy(
    gmacs: f64,
    bit_length: u8,
    energy_table: &BTreeMap<u8, f64>,
) -> Result<f64, MetricsError> {
    let per_mac = energy_table
        .get(&bit_length)
        .ok_or(MetricsError::MissingEnergyEntry(bit_length))?;
    Ok(gmacs * 1e9 * per_mac)
}

/// One efficiency row of a run report.
#[derive(Debug, Clone, PartialEq)]
pub struct EfficiencyReport {
    pub param_count: usize,
    pub bit_length: u8,
    /// All parameters billed at `bit_length`.
    pub size_mb_paper_convention: f64,
    /// Actual packed footprint: indices + centroid tables + exempt fp32.
    pub size_mb_serialized: f64,
    pub gmacs: f64,
    pub energy_proxy: Option<f64>,
}

impl EfficiencyReport {
    pub fn new(
        param_count: usize,
        bit_length: u8,
        serialized_param_bytes: usize,
        gmacs: f64,
    ) -> Self {
        Self {
            param_count,
            bit_length,
            size_mb_paper_convention: model_size_mb(param_count, bit_length),
            size_mb_serialized: serialized_param_bytes as f64 / (1024.0 * 1024.0),
            gmacs,
            energy_proxy: None,
        }
    }
}
