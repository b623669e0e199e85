//! Scalar training objectives.
//!
//! The distillation phase optimizes a blend of two terms: an L1 loss that
//! pulls the student's latent features toward the teacher's, and the
//! cross-entropy of the student's predictions against ground truth,
//!
//! ```text
//! L_dis = alpha * L1 + (1 - alpha) * L_gt
//! ```
//!
//! The quantization phase optimizes `L_quant = L_centroid + L_gt`, where
//! `L_centroid` is the task loss evaluated through the reconstructed
//! (codebook) weights; its gradient lands on the centroids. A binary gate
//! selects the phase objective:
//!
//! ```text
//! L = gamma * L_dis + (1 - gamma) * L_quant,   gamma in {0, 1}
//! ```
//!
//! with the unselected branch neither evaluated nor backpropagated.

use thiserror::Error;

use crate::autodiff::{AutodiffError, Real, Tensor};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("feature batches disagree: teacher {teacher:?} vs student {student:?}")]
    FeatureShapeMismatch {
        teacher: Vec<usize>,
        student: Vec<usize>,
    },
    #[error("alpha must lie in [0, 1], got {0}")]
    AlphaOutOfRange(f64),
    #[error("gamma must be exactly 0 or 1, got {0}")]
    GammaNotBinary(f64),
    #[error("the branch selected by gamma={gamma} was not provided")]
    MissingBranch { gamma: f64 },
    #[error("label {label} out of range for {n_classes} classes (sample {sample})")]
    LabelOutOfRange {
        label: usize,
        n_classes: usize,
        sample: usize,
    },
    #[error("labels count {labels} does not match batch size {batch}")]
    LabelCountMismatch { labels: usize, batch: usize },
    #[error("loss input is not finite: {0}")]
    NonFinite(f64),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Batch reduction of a loss: literal sum over samples, or sum divided by
/// the batch size. Training defaults to `Mean` so learning rates transfer
/// across batch sizes; `Sum` keeps the literal-equation form for tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

/// Per-step scalar record. The identities between the fields are exactly
/// the blend equations above and are enforced by [`LossBreakdown::check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l1: f64,
    pub l_gt: f64,
    pub l_dis: f64,
    pub l_centroid: f64,
    pub l_quant: f64,
    pub total: f64,
    pub alpha: f64,
    pub gamma: f64,
}

impl LossBreakdown {
    /// Verifies the stored identities as stored (no tolerance):
    /// `l_dis = alpha*l1 + (1-alpha)*l_gt`, `l_quant = l_centroid + l_gt`,
    /// `total = gamma*l_dis + (1-gamma)*l_quant`, `gamma in {0,1}`.
    pub fn check(&self) -> bool {
        (self.gamma == 0.0 || self.gamma == 1.0)
            && self.l_dis == self.alpha * self.l1 + (1.0 - self.alpha) * self.l_gt
            && self.l_quant == self.l_centroid + self.l_gt
            && self.total
                == if self.gamma == 1.0 {
                    self.l_dis
                } else {
                    self.l_quant
                }
    }
}

/// L1 distance between teacher and student feature batches, `(batch, n)`.
/// The teacher branch is detached: gradients flow into `z_student` only.
pub fn l1_feature_loss<E: Real>(
    z_teacher: &Tensor<E>,
    z_student: &Tensor<E>,
    reduction: Reduction,
) -> Result<Tensor<E>, LossError> {
    if z_teacher.shape() != z_student.shape() || z_teacher.shape().len() != 2 {
        return Err(LossError::FeatureShapeMismatch {
            teacher: z_teacher.shape().to_vec(),
            student: z_student.shape().to_vec(),
        });
    }
    let detached = Tensor::new(z_teacher.data().to_vec(), z_teacher.shape())?;
    let total = z_student.sub(&detached)?.abs().sum();
    Ok(match reduction {
        Reduction::Sum => total,
        Reduction::Mean => total.mul_scalar(E::from_f64(1.0 / z_teacher.shape()[0] as f64)),
    })
}

/// Mean over the batch of `-log softmax(logits)[label]`, stabilized by
/// max-subtraction inside the softmax.
pub fn cross_entropy<E: Real>(
    logits: &Tensor<E>,
    labels: &[usize],
) -> Result<Tensor<E>, LossError> {
    cross_entropy_reduced(logits, labels, Reduction::Mean)
}

pub fn cross_entropy_reduced<E: Real>(
    logits: &Tensor<E>,
    labels: &[usize],
    reduction: Reduction,
) -> Result<Tensor<E>, LossError> {
    let shape = logits.shape();
    if shape.len() != 2 {
        return Err(AutodiffError::BadShape {
            op: "cross_entropy",
            expected: "(batch, n_classes)".into(),
            got: shape.to_vec(),
        }
        .into());
    }
    let (batch, n_classes) = (shape[0], shape[1]);
    if labels.len() != batch {
        return Err(LossError::LabelCountMismatch {
            labels: labels.len(),
            batch,
        });
    }
    let mut flat = Vec::with_capacity(batch);
    for (i, &label) in labels.iter().enumerate() {
        if label >= n_classes {
            return Err(LossError::LabelOutOfRange {
                label,
                n_classes,
                sample: i,
            });
        }
        flat.push(i * n_classes + label);
    }
    let picked = logits
        .softmax()?
        .log()?
        .reshape(&[batch * n_classes])?
        .gather_rows(&flat)?
        .sum();
    Ok(match reduction {
        Reduction::Sum => picked.mul_scalar(-E::ONE),
        Reduction::Mean => picked.mul_scalar(E::from_f64(-1.0 / batch as f64)),
    })
}

/// `alpha * l1 + (1 - alpha) * l_gt`.
pub fn distillation_loss<E: Real>(
    l1: &Tensor<E>,
    l_gt: &Tensor<E>,
    alpha: f64,
) -> Result<Tensor<E>, LossError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(LossError::AlphaOutOfRange(alpha));
    }
    Ok(l1
        .mul_scalar(E::from_f64(alpha))
        .add(&l_gt.mul_scalar(E::from_f64(1.0 - alpha)))?)
}

/// `l_centroid + l_gt`; both addends must be finite.
pub fn quantization_loss<E: Real>(
    l_centroid: &Tensor<E>,
    l_gt: &Tensor<E>,
) -> Result<Tensor<E>, LossError> {
    for t in [l_centroid, l_gt] {
        let v = t.item();
        if !v.is_finite() {
            return Err(LossError::NonFinite(v.to_f64()));
        }
    }
    Ok(l_centroid.add(l_gt)?)
}

/// Binary phase gate. `gamma = 1` selects the distillation branch,
/// `gamma = 0` the quantization branch; the selected tensor is returned
/// bit-exactly (no arithmetic), so nothing flows into the other branch.
/// Callers are expected to pass `None` for the branch they did not build.
pub fn combined_loss<E: Real>(
    l_dis: Option<&Tensor<E>>,
    l_quant: Option<&Tensor<E>>,
    gamma: f64,
) -> Result<Tensor<E>, LossError> {
    let branch = if gamma == 1.0 {
        l_dis
    } else if gamma == 0.0 {
        l_quant
    } else {
        return Err(LossError::GammaNotBinary(gamma));
    };
    branch.cloned().ok_or(LossError::MissingBranch { gamma })
}
