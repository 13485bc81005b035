//! Supervised contrastive loss over a batch of unit embeddings, and the
//! logistic loss used by the pair classifier.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// Tolerance on row norms accepted by [`scl_loss`].
pub const UNIT_NORM_TOL: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("contrastive loss needs at least 2 rows, got {0}")]
    BatchTooSmall(usize),
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("no element of the batch has a positive")]
    NoPositives,
    #[error("row {row} has norm {norm}, expected unit norm")]
    NotUnit { row: usize, norm: f64 },
    #[error("{rows} rows but {labels} product ids")]
    LabelCount { rows: usize, labels: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub temperature: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { temperature: 0.07 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SclOutput<T> {
    pub loss: T,
    /// Gradient of the loss with respect to the embedding rows.
    pub grad: Tensor<T>,
    /// Anchors with at least one positive (the averaging denominator).
    pub anchors: usize,
}

/// Supervised contrastive loss.
///
/// For each anchor `i` with same-product set `P_i` (excluding `i`), the term
/// is the mean over `p in P_i` of `-log softmax_{b != i}(z_i . z_b / tau)[p]`.
/// Anchors with empty `P_i` are skipped and the loss averages over the
/// remaining anchors. Log-sum-exp uses the per-row maximum as shift.
pub fn scl_loss<T: Scalar>(
    z: &Tensor<T>,
    product_ids: &[usize],
    temperature: f64,
) -> Result<SclOutput<T>, LossError> {
    if !(temperature > 0.0) {
        return Err(LossError::Temperature(temperature));
    }
    let b = z.rows();
    if b < 2 {
        return Err(LossError::BatchTooSmall(b));
    }
    if product_ids.len() != b {
        return Err(LossError::LabelCount {
            rows: b,
            labels: product_ids.len(),
        });
    }
    for i in 0..b {
        let norm = z.row(i).iter().map(|&v| v * v).sum::<T>().sqrt().as_f64();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(LossError::NotUnit { row: i, norm });
        }
    }

    let positives: Vec<usize> = (0..b)
        .map(|i| (0..b).filter(|&j| j != i && product_ids[j] == product_ids[i]).count())
        .collect();
    let anchors = positives.iter().filter(|&&p| p > 0).count();
    if anchors == 0 {
        return Err(LossError::NoPositives);
    }

    let inv_tau = T::of(1.0 / temperature);
    let mut sim = vec![T::zero(); b * b];
    for i in 0..b {
        for j in i..b {
            let s = z.row(i).iter().zip(z.row(j)).map(|(&x, &y)| x * y).sum::<T>() * inv_tau;
            sim[i * b + j] = s;
            sim[j * b + i] = s;
        }
    }

    let inv_anchors = T::one() / T::of(anchors as f64);
    let mut loss = T::zero();
    // dL/dsim, zero on the diagonal and for skipped anchors
    let mut dsim = vec![T::zero(); b * b];
    for i in 0..b {
        if positives[i] == 0 {
            continue;
        }
        let row = &sim[i * b..(i + 1) * b];
        let max = (0..b)
            .filter(|&j| j != i)
            .map(|j| row[j])
            .fold(T::neg_infinity(), T::max);
        let denom: T = (0..b).filter(|&j| j != i).map(|j| (row[j] - max).exp()).sum();
        let lse = max + denom.ln();
        let inv_p = T::one() / T::of(positives[i] as f64);
        let mut term = T::zero();
        for j in 0..b {
            if j == i {
                continue;
            }
            let softmax = (row[j] - max).exp() / denom;
            let mut g = softmax;
            if product_ids[j] == product_ids[i] {
                term += lse - row[j];
                g -= inv_p;
            }
            dsim[i * b + j] = g * inv_anchors;
        }
        loss += term * inv_p;
    }
    loss *= inv_anchors;

    let d = z.cols();
    let mut grad = Tensor::zeros(&[b, d]);
    for i in 0..b {
        for j in 0..b {
            // sim is symmetric: s_ij feeds both z_i and z_j
            let g = (dsim[i * b + j] + dsim[j * b + i]) * inv_tau;
            if g == T::zero() {
                continue;
            }
            let zj = z.row(j);
            for (acc, &v) in grad.row_mut(i).iter_mut().zip(zj) {
                *acc += g * v;
            }
        }
    }
    Ok(SclOutput { loss, grad, anchors })
}

/// Numerically stable logistic loss on a single logit.
/// Returns `(loss, d loss / d logit)`.
pub fn bce_logit_loss<T: Scalar>(logit: T, label: bool) -> (T, T) {
    let y = if label { T::one() } else { T::zero() };
    let loss = logit.max(T::zero()) - logit * y + (-logit.abs()).exp().ln_1p();
    (loss, sigmoid(logit) - y)
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
