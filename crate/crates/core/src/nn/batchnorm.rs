use serde::{Deserialize, Serialize};

use super::{Mode, ParamMut};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.9;

/// Per-feature batch normalization. Batch variance uses 1/N normalization.
///
/// Running statistics move as `running = momentum·running + (1−momentum)·batch`
/// and are only touched by [`BatchNormLayer::commit_running`], never by `forward`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormLayer<F> {
    pub gamma: Vec<F>,
    pub beta: Vec<F>,
    pub running_mean: Vec<F>,
    pub running_var: Vec<F>,
    pub epsilon: F,
    pub momentum: F,
}

/// Intermediates of a forward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache<F> {
    /// True when normalized with batch statistics (training mode).
    pub batch_stats: bool,
    pub normalized: Matrix<F>,
    pub inv_std: Vec<F>,
    pub mean: Vec<F>,
    pub var: Vec<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormGrads<F> {
    pub gamma: Vec<F>,
    pub beta: Vec<F>,
}

impl<F: Scalar> BatchNormGrads<F> {
    pub fn tensors(&self) -> [&[F]; 2] {
        [&self.gamma, &self.beta]
    }
}

impl<F: Scalar> BatchNormLayer<F> {
    pub fn new(dim: usize) -> Self {
        Self::with_constants(dim, DEFAULT_EPSILON, DEFAULT_MOMENTUM).expect("default constants are valid")
    }

    pub fn with_constants(dim: usize, epsilon: f64, momentum: f64) -> Result<Self> {
        if epsilon <= 0.0 || !(0.0..1.0).contains(&momentum) || momentum == 0.0 {
            return Err(Error::config(format!("invalid batch-norm constants eps={epsilon}, momentum={momentum}")));
        }
        Ok(Self {
            gamma: vec![F::one(); dim],
            beta: vec![F::zero(); dim],
            running_mean: vec![F::zero(); dim],
            running_var: vec![F::one(); dim],
            epsilon: F::lit(epsilon),
            momentum: F::lit(momentum),
        })
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    /// Forward pass. Training mode needs at least two rows.
    pub fn forward(&self, x: &Matrix<F>, mode: Mode) -> Result<(Matrix<F>, BatchNormCache<F>)> {
        if x.cols() != self.dim() {
            return Err(Error::shape(format!("batch-norm over {} features got width {}", self.dim(), x.cols())));
        }
        match mode {
            Mode::Infer => {
                let inv_std: Vec<F> = self.running_var.iter().map(|&v| (v + self.epsilon).sqrt().recip()).collect();
                let mut normalized = x.clone();
                let mut y = x.clone();
                for i in 0..y.rows() {
                    let xr = normalized.row_mut(i);
                    for j in 0..xr.len() {
                        xr[j] = (xr[j] - self.running_mean[j]) * inv_std[j];
                    }
                    let yr = y.row_mut(i);
                    for j in 0..yr.len() {
                        yr[j] = self.gamma[j] * normalized.get(i, j) + self.beta[j];
                    }
                }
                let cache = BatchNormCache {
                    batch_stats: false,
                    normalized,
                    inv_std,
                    mean: self.running_mean.clone(),
                    var: self.running_var.clone(),
                };
                Ok((y, cache))
            }
            Mode::Train => {
                let n = x.rows();
                if n < 2 {
                    return Err(Error::config(format!("training-mode batch norm needs a batch of at least 2, got {n}")));
                }
                let inv_n = F::one() / F::from_count(n);
                let mean: Vec<F> = x.column_sums().into_iter().map(|s| s * inv_n).collect();
                let mut var = vec![F::zero(); self.dim()];
                for i in 0..n {
                    for ((acc, &v), &m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
                        let d = v - m;
                        *acc += d * d;
                    }
                }
                for v in &mut var {
                    *v *= inv_n;
                }
                let inv_std: Vec<F> = var.iter().map(|&v| (v + self.epsilon).sqrt().recip()).collect();
                let mut normalized = x.clone();
                let mut y = Matrix::zeros(n, self.dim());
                for i in 0..n {
                    let xr = normalized.row_mut(i);
                    for j in 0..xr.len() {
                        xr[j] = (xr[j] - mean[j]) * inv_std[j];
                    }
                    let yr = y.row_mut(i);
                    for j in 0..yr.len() {
                        yr[j] = self.gamma[j] * normalized.get(i, j) + self.beta[j];
                    }
                }
                Ok((y, BatchNormCache { batch_stats: true, normalized, inv_std, mean, var }))
            }
        }
    }

    /// Folds one training batch's statistics into the running averages.
    /// Inference-mode caches are ignored.
    pub fn commit_running(&mut self, cache: &BatchNormCache<F>) {
        if !cache.batch_stats {
            return;
        }
        let m = self.momentum;
        let keep = F::one() - m;
        for j in 0..self.dim() {
            self.running_mean[j] = m * self.running_mean[j] + keep * cache.mean[j];
            self.running_var[j] = m * self.running_var[j] + keep * cache.var[j];
        }
    }

    pub fn backward(&self, cache: &BatchNormCache<F>, dy: &Matrix<F>) -> Result<(BatchNormGrads<F>, Matrix<F>)> {
        let xhat = &cache.normalized;
        if dy.shape() != xhat.shape() {
            return Err(Error::shape(format!("batch-norm upstream {:?} vs cached {:?}", dy.shape(), xhat.shape())));
        }
        let n = dy.rows();
        let d = self.dim();
        let nf = F::from_count(n);
        let mut dgamma = vec![F::zero(); d];
        let mut dbeta = vec![F::zero(); d];
        for i in 0..n {
            for j in 0..d {
                let g = dy.get(i, j);
                dgamma[j] += g * xhat.get(i, j);
                dbeta[j] += g;
            }
        }
        let mut dx = Matrix::zeros(n, d);
        if !cache.batch_stats {
            // Fixed statistics: the map is affine per feature.
            for i in 0..n {
                let row = dx.row_mut(i);
                for j in 0..d {
                    row[j] = self.gamma[j] * cache.inv_std[j] * dy.get(i, j);
                }
            }
            return Ok((BatchNormGrads { gamma: dgamma, beta: dbeta }, dx));
        }
        // dx = γ·inv_std/N · (N·dy − Σdy − x̂·Σ(dy·x̂))
        for i in 0..n {
            let row = dx.row_mut(i);
            for j in 0..d {
                let scale = self.gamma[j] * cache.inv_std[j] / nf;
                row[j] = scale * (nf * dy.get(i, j) - dbeta[j] - xhat.get(i, j) * dgamma[j]);
            }
        }
        Ok((BatchNormGrads { gamma: dgamma, beta: dbeta }, dx))
    }

    pub fn params_mut(&mut self) -> [ParamMut<'_, F>; 2] {
        [
            ParamMut { name: "gamma", values: &mut self.gamma, decays: false },
            ParamMut { name: "beta", values: &mut self.beta, decays: false },
        ]
    }
}
