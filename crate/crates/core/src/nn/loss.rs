use serde::{Deserialize, Serialize};

use crate::error::{DataError, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Probabilities are clamped to this floor inside the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Per-class weights `w_j = (1/M_j) / Σ_n (1/M_n)` for class-balanced cross-entropy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalancedLossSpec<F> {
    pub class_weights: Vec<F>,
}

impl<F: Scalar> BalancedLossSpec<F> {
    pub fn uniform(classes: usize) -> Self {
        Self { class_weights: vec![F::one() / F::from_count(classes); classes] }
    }

    pub fn num_classes(&self) -> usize {
        self.class_weights.len()
    }
}

/// Class weights from per-class sample counts. `task` only labels the error.
pub fn balanced_weights<F: Scalar>(task: &str, class_counts: &[usize]) -> Result<BalancedLossSpec<F>> {
    if let Some(class) = class_counts.iter().position(|&c| c == 0) {
        return Err(DataError::EmptyClass { task: task.to_owned(), class }.into());
    }
    let inv: Vec<F> = class_counts.iter().map(|&c| F::one() / F::from_count(c)).collect();
    let total = inv.iter().copied().sum::<F>();
    Ok(BalancedLossSpec { class_weights: inv.into_iter().map(|v| v / total).collect() })
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<F: Scalar>(logits: &Matrix<F>) -> Matrix<F> {
    let mut p = logits.clone();
    for i in 0..p.rows() {
        let row = p.row_mut(i);
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    p
}

/// Mean class-weighted negative log-likelihood over the batch, plus its gradient
/// with respect to the pre-softmax logits: `(w_{y_i}/N)·(p_i − onehot(y_i))`.
pub fn balanced_xent<F: Scalar>(
    probs: &Matrix<F>,
    targets: &[usize],
    spec: &BalancedLossSpec<F>,
) -> Result<(F, Matrix<F>)> {
    let n = probs.rows();
    let m = spec.num_classes();
    if probs.cols() != m || targets.len() != n {
        return Err(Error::shape(format!(
            "probabilities {:?}, {} targets, {m} class weights",
            probs.shape(),
            targets.len()
        )));
    }
    if n == 0 {
        return Err(Error::shape("empty batch"));
    }
    let tol = F::lit(1e-6);
    for i in 0..n {
        let row = probs.row(i);
        let sum = row.iter().copied().sum::<F>();
        if row.iter().any(|&p| p < F::zero() || !p.is_finite()) || (sum - F::one()).abs() > tol {
            return Err(Error::numeric(format!("row {i} is not a probability vector")));
        }
        if targets[i] >= m {
            return Err(DataError::LabelOutOfRange { task: String::new(), label: targets[i], classes: m }.into());
        }
    }
    let inv_n = F::one() / F::from_count(n);
    let floor = F::lit(PROB_FLOOR);
    let mut loss = F::zero();
    let mut grad = probs.clone();
    for (i, &y) in targets.iter().enumerate() {
        let w = spec.class_weights[y];
        loss -= w * probs.get(i, y).max(floor).ln();
        let row = grad.row_mut(i);
        row[y] -= F::one();
        for g in row.iter_mut() {
            *g *= w * inv_n;
        }
    }
    Ok((loss * inv_n, grad))
}
