//! k-means weight-sharing quantization.
//!
//! At bit length `b` a layer's weights collapse onto `k = 2^b` shared
//! scalar centroids; each weight then stores only a `b`-bit index. Fitting
//! is Lloyd's algorithm in one dimension: assign every weight to its
//! nearest centroid, move each centroid to the mean of its cluster, repeat
//! until nothing changes. Random restarts keep the best fit by
//! within-cluster sum of squares (SSE).
//!
//! During codebook training the gradient of the task loss with respect to
//! a centroid is the sum of the gradients of all weights assigned to it:
//!
//! ```text
//! dL/dC_k = sum over (i,j) of dL/dW[i,j] * [I[i,j] == k]
//! ```
//!
//! which is also exactly what reverse mode produces when the reconstructed
//! layer is expressed as a gather from the centroid vector, so the two
//! routes can be cross-checked bit for bit.
//!
//! Conventions: centroids are kept sorted ascending; nearest-centroid ties
//! break toward the lowest index; an empty cluster is reseeded to the
//! weight currently farthest from its centroid; a layer with no more
//! distinct values than centroids collapses directly to a zero-error
//! codebook.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::autodiff::{Real, Tensor};
use crate::model::{ModelGraph, Role};
use crate::rng::SplitMix64;

#[derive(Debug, Error)]
pub enum QuantError {
    #[error("bit length {0} outside the supported 1..=16 range")]
    BitLength(u8),
    #[error("cannot fit a codebook to an empty weight vector")]
    EmptyWeights,
    #[error("index {index} addresses no centroid (k = {k})")]
    IndexOutOfRange { index: usize, k: usize },
    #[error("{what} length {got} does not match expected {expected}")]
    LengthMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("codebook step rejected: gradient component {index} is not finite")]
    NonFiniteGradient { index: usize },
    #[error("shape {shape:?} holds {num} values but the codebook indexes {indices}")]
    ShapeMismatch {
        shape: Vec<usize>,
        num: usize,
        indices: usize,
    },
    #[error("quantize_model requires the student role")]
    NotAStudent,
}

/// Per-layer codebook: `2^b` centroids plus one index per weight.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCodebook<E: Real = f32> {
    pub bit_length: u8,
    /// Always exactly `2^bit_length` entries, sorted ascending at fit time.
    pub centroids: Vec<E>,
    /// Row-major, one entry per weight, each `< 2^bit_length`.
    pub indices: Vec<u32>,
}

impl<E: Real> LayerCodebook<E> {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    /// Reconstructed weight values `W[i] = C[I[i]]`.
    pub fn reconstruct_values(&self) -> Vec<E> {
        self.indices
            .iter()
            .map(|&i| self.centroids[i as usize])
            .collect()
    }

    /// Number of distinct values the reconstructed layer can contain.
    pub fn distinct_reconstructed(&self) -> usize {
        let mut vals: Vec<u64> = self
            .reconstruct_values()
            .iter()
            .map(|v| v.to_f64().to_bits())
            .collect();
        vals.sort_unstable();
        vals.dedup();
        vals.len()
    }

    /// Sum of squared reconstruction errors against `weights`.
    pub fn sse(&self, weights: &[E]) -> f64 {
        weights
            .iter()
            .zip(&self.indices)
            .map(|(&w, &i)| {
                let d = w.to_f64() - self.centroids[i as usize].to_f64();
                d * d
            })
            .sum()
    }
}

/// Result of a k-means fit: the codebook, its SSE, and the per-iteration
/// SSE trace of the winning restart (non-increasing by construction).
#[derive(Debug, Clone)]
pub struct KmeansFit<E: Real = f32> {
    pub codebook: LayerCodebook<E>,
    pub sse: f64,
    pub sse_trace: Vec<f64>,
}

/// Fits a `2^b`-entry codebook to `weights` by Lloyd's algorithm, keeping
/// the best of `restarts` random initializations (distinct draws from the
/// weight range). Deterministic in `seed`.
pub fn kmeans_fit<E: Real>(
    weights: &[E],
    bit_length: u8,
    max_iters: usize,
    seed: u64,
    restarts: usize,
) -> Result<KmeansFit<E>, QuantError> {
    if !(1..=16).contains(&bit_length) {
        return Err(QuantError::BitLength(bit_length));
    }
    if weights.is_empty() {
        return Err(QuantError::EmptyWeights);
    }
    let k = 1usize << bit_length;

    if let Some(fit) = collapse_if_degenerate(weights, bit_length, k) {
        return Ok(fit);
    }

    let (lo, hi) = weight_range(weights);
    let mut best: Option<KmeansFit<E>> = None;
    for r in 0..restarts.max(1) {
        let mut rng = SplitMix64::substream(seed, r as u64);
        let init = draw_distinct(&mut rng, lo, hi, k);
        let fit = lloyd(weights, init, bit_length, max_iters);
        if best.as_ref().map(|b| fit.sse < b.sse).unwrap_or(true) {
            best = Some(fit);
        }
    }
    Ok(best.expect("restarts >= 1"))
}

/// Re-fits a codebook starting from existing centroids instead of random
/// draws; used when a quantization phase resumes after distillation moved
/// the weights.
pub fn kmeans_fit_warm<E: Real>(
    weights: &[E],
    bit_length: u8,
    max_iters: usize,
    init_centroids: &[E],
) -> Result<KmeansFit<E>, QuantError> {
    if !(1..=16).contains(&bit_length) {
        return Err(QuantError::BitLength(bit_length));
    }
    if weights.is_empty() {
        return Err(QuantError::EmptyWeights);
    }
    let k = 1usize << bit_length;
    if init_centroids.len() != k {
        return Err(QuantError::LengthMismatch {
            what: "warm-start centroids",
            got: init_centroids.len(),
            expected: k,
        });
    }
    if let Some(fit) = collapse_if_degenerate(weights, bit_length, k) {
        return Ok(fit);
    }
    let mut init: Vec<f64> = init_centroids.iter().map(|c| c.to_f64()).collect();
    init.sort_by(f64::total_cmp);
    Ok(lloyd(weights, init, bit_length, max_iters))
}

/// When the weights hold at most `k` distinct values the optimum is exact:
/// one centroid per distinct value, SSE zero, surplus centroids collapsed
/// onto the largest value.
fn collapse_if_degenerate<E: Real>(
    weights: &[E],
    bit_length: u8,
    k: usize,
) -> Option<KmeansFit<E>> {
    let mut distinct: Vec<f64> = weights.iter().map(|w| w.to_f64()).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() > k {
        return None;
    }
    let mut centroids = distinct.clone();
    centroids.resize(k, *distinct.last().expect("non-empty"));
    let indices = weights
        .iter()
        .map(|w| distinct.partition_point(|&c| c < w.to_f64()) as u32)
        .collect();
    Some(KmeansFit {
        codebook: LayerCodebook {
            bit_length,
            centroids: centroids.iter().map(|&c| E::from_f64(c)).collect(),
            indices,
        },
        sse: 0.0,
        sse_trace: vec![0.0],
    })
}

fn weight_range<E: Real>(weights: &[E]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for w in weights {
        let v = w.to_f64();
        lo = lo.min(v);
        hi = hi.max(v);
    }
    (lo, hi)
}

fn draw_distinct(rng: &mut SplitMix64, lo: f64, hi: f64, k: usize) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::with_capacity(k);
    let mut guard = 0usize;
    while out.len() < k {
        let v = rng.uniform(lo, hi);
        if !out.contains(&v) {
            out.push(v);
        }
        guard += 1;
        if guard > 64 * k {
            // range too quantized to keep drawing; spread the rest evenly
            let missing = k - out.len();
            for i in 0..missing {
                out.push(lo + (hi - lo) * (i as f64 + 0.5) / missing as f64);
            }
            break;
        }
    }
    out.sort_by(f64::total_cmp);
    out
}

/// Nearest sorted centroid, ties toward the lowest index.
fn assign_sorted(centroids: &[f64], w: f64) -> usize {
    let k = centroids.len();
    // count of boundary midpoints strictly below w; a weight exactly on a
    // midpoint is equidistant and goes left
    let mut idx = {
        let mut lo = 0usize;
        let mut hi = k - 1; // number of midpoints
        while lo < hi {
            let mid = (lo + hi) / 2;
            let boundary = (centroids[mid] + centroids[mid + 1]) / 2.0;
            if boundary < w {
                lo = mid + 1;
            } else {
                hi = mid;
            }
        }
        lo
    };
    // duplicate centroids: land on the first of the run
    while idx > 0 && centroids[idx - 1] == centroids[idx] {
        idx -= 1;
    }
    idx
}

fn lloyd<E: Real>(
    weights: &[E],
    mut centroids: Vec<f64>,
    bit_length: u8,
    max_iters: usize,
) -> KmeansFit<E> {
    let k = centroids.len();
    let n = weights.len();
    let ws: Vec<f64> = weights.iter().map(|w| w.to_f64()).collect();
    let mut assign = vec![0usize; n];
    let mut prev_assign: Option<Vec<usize>> = None;
    let mut trace = Vec::new();

    for _ in 0..max_iters.max(1) {
        centroids.sort_by(f64::total_cmp);

        for (a, &w) in assign.iter_mut().zip(&ws) {
            *a = assign_sorted(&centroids, w);
        }

        // reseed empty clusters to the farthest-from-centroid weight
        let mut counts = vec![0usize; k];
        for &a in &assign {
            counts[a] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let mut far_i = None;
            let mut far_d = 0.0f64;
            for i in 0..n {
                if counts[assign[i]] <= 1 {
                    continue; // moving it would just empty another cluster
                }
                let d = (ws[i] - centroids[assign[i]]).abs();
                if d > far_d {
                    far_d = d;
                    far_i = Some(i);
                }
            }
            match far_i {
                Some(i) if far_d > 0.0 => {
                    counts[assign[i]] -= 1;
                    assign[i] = c;
                    counts[c] = 1;
                    centroids[c] = ws[i];
                }
                _ => break, // nothing left worth moving
            }
        }

        // means update
        let mut sums = vec![0.0f64; k];
        for (&a, &w) in assign.iter().zip(&ws) {
            sums[a] += w;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c] / counts[c] as f64;
            }
        }

        let sse: f64 = assign
            .iter()
            .zip(&ws)
            .map(|(&a, &w)| (w - centroids[a]) * (w - centroids[a]))
            .sum();
        trace.push(sse);

        let converged = prev_assign.as_deref() == Some(assign.as_slice());
        prev_assign = Some(assign.clone());
        if converged {
            break;
        }
    }

    // one closing assignment so the nearest-centroid invariant holds exactly
    centroids.sort_by(f64::total_cmp);
    for (a, &w) in assign.iter_mut().zip(&ws) {
        *a = assign_sorted(&centroids, w);
    }
    let sse: f64 = assign
        .iter()
        .zip(&ws)
        .map(|(&a, &w)| (w - centroids[a]) * (w - centroids[a]))
        .sum();

    KmeansFit {
        codebook: LayerCodebook {
            bit_length,
            centroids: centroids.iter().map(|&c| E::from_f64(c)).collect(),
            indices: assign.iter().map(|&a| a as u32).collect(),
        },
        sse,
        sse_trace: trace,
    }
}

/// Reconstructed weight tensor `W[pos] = C[I[pos]]` in the given shape.
pub fn reconstruct<E: Real>(
    cb: &LayerCodebook<E>,
    shape: &[usize],
) -> Result<Tensor<E>, QuantError> {
    let num: usize = shape.iter().product();
    if num != cb.indices.len() {
        return Err(QuantError::ShapeMismatch {
            shape: shape.to_vec(),
            num,
            indices: cb.indices.len(),
        });
    }
    Tensor::new(cb.reconstruct_values(), shape).map_err(|_| QuantError::ShapeMismatch {
        shape: shape.to_vec(),
        num,
        indices: cb.indices.len(),
    })
}

/// Indicator-sum centroid gradient: `out[c] = sum of weight_grad where the
/// index map assigns c`. Centroids with no assigned weight get zero.
pub fn centroid_gradient<E: Real>(
    weight_grad: &[E],
    indices: &[u32],
    k: usize,
) -> Result<Vec<E>, QuantError> {
    if weight_grad.len() != indices.len() {
        return Err(QuantError::LengthMismatch {
            what: "weight gradient",
            got: weight_grad.len(),
            expected: indices.len(),
        });
    }
    let mut out = vec![E::ZERO; k];
    for (&g, &i) in weight_grad.iter().zip(indices) {
        let i = i as usize;
        if i >= k {
            return Err(QuantError::IndexOutOfRange { index: i, k });
        }
        out[i] += g;
    }
    Ok(out)
}

/// One gradient step on the centroids; assignments stay frozen.
pub fn apply_codebook_step<E: Real>(
    cb: &LayerCodebook<E>,
    grad: &[E],
    lr: E,
) -> Result<LayerCodebook<E>, QuantError> {
    if grad.len() != cb.centroids.len() {
        return Err(QuantError::LengthMismatch {
            what: "centroid gradient",
            got: grad.len(),
            expected: cb.centroids.len(),
        });
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(QuantError::NonFiniteGradient { index: i });
    }
    let centroids = cb
        .centroids
        .iter()
        .zip(grad)
        .map(|(&c, &g)| c - lr * g)
        .collect();
    Ok(LayerCodebook {
        bit_length: cb.bit_length,
        centroids,
        indices: cb.indices.clone(),
    })
}

/// Which tensors participate in quantization. Biases (and other rank-1
/// tensors) stay at full precision by default; weight matrices, conv
/// kernels and the classifier head weight are quantized.
#[derive(Debug, Clone)]
pub struct QuantPolicy {
    pub include_biases: bool,
    pub include_head: bool,
    pub max_iters: usize,
    pub restarts: usize,
}

impl Default for QuantPolicy {
    fn default() -> Self {
        Self {
            include_biases: false,
            include_head: true,
            max_iters: 60,
            restarts: 4,
        }
    }
}

/// A student model together with the codebooks that shadow its quantized
/// tensors. `base` keeps the full-precision values (they stay untouched
/// while codebooks train); tensors not named in `codebooks` are exempt and
/// live at full precision.
#[derive(Debug, Clone)]
pub struct QuantizedModel {
    pub base: ModelGraph,
    pub codebooks: BTreeMap<String, LayerCodebook<f32>>,
}

impl QuantizedModel {
    /// Bit length shared by every codebook.
    pub fn bit_length(&self) -> Option<u8> {
        self.codebooks.values().next().map(|c| c.bit_length)
    }

    /// Materializes the codebook values back into a plain model: every
    /// quantized tensor becomes its reconstruction, bit for bit.
    pub fn materialize(&self) -> ModelGraph {
        let mut model = self.base.clone();
        for p in model.named_params_mut() {
            if let Some(cb) = self.codebooks.get(&p.name) {
                p.data = cb.reconstruct_values();
            }
        }
        model
    }

    /// Total serialized parameter footprint in bytes: packed indices plus
    /// fp32 centroids for quantized tensors, fp32 for exempt tensors.
    pub fn serialized_param_bytes(&self) -> usize {
        self.base
            .named_params()
            .map(|p| match self.codebooks.get(&p.name) {
                Some(cb) => {
                    4 * cb.centroids.len() + (p.data.len() * cb.bit_length as usize).div_ceil(8)
                }
                None => 4 * p.data.len(),
            })
            .sum()
    }
}

/// Fits a codebook to every policy-selected tensor of a student model.
pub fn quantize_model(
    student: &ModelGraph,
    bit_length: u8,
    policy: &QuantPolicy,
    seed: u64,
) -> Result<QuantizedModel, QuantError> {
    if student.role != Role::Student {
        return Err(QuantError::NotAStudent);
    }
    let mut codebooks = BTreeMap::new();
    for (i, p) in student.named_params().enumerate() {
        if !quantized_by_policy(&p.name, policy) {
            continue;
        }
        let fit = kmeans_fit(
            &p.data,
            bit_length,
            policy.max_iters,
            SplitMix64::substream(seed, i as u64).next_u64(),
            policy.restarts,
        )?;
        codebooks.insert(p.name.clone(), fit.codebook);
    }
    Ok(QuantizedModel {
        base: student.clone(),
        codebooks,
    })
}

pub fn quantized_by_policy(name: &str, policy: &QuantPolicy) -> bool {
    if name.ends_with(".bias") {
        return policy.include_biases;
    }
    if name.starts_with("head.") {
        return policy.include_head;
    }
    true
}
