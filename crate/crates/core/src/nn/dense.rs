use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ParamMut;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Fully connected layer, `y = W·x + b` with `W` stored out×in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer<F> {
    pub weights: Matrix<F>,
    pub bias: Vec<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrads<F> {
    pub weights: Matrix<F>,
    pub bias: Vec<F>,
}

impl<F: Scalar> DenseGrads<F> {
    pub fn zeros_like(layer: &DenseLayer<F>) -> Self {
        Self { weights: Matrix::zeros(layer.out_dim(), layer.in_dim()), bias: vec![F::zero(); layer.out_dim()] }
    }

    pub fn tensors(&self) -> [&[F]; 2] {
        [self.weights.as_slice(), &self.bias]
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.weights.add_assign(&other.weights)?;
        for (a, &b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
        Ok(())
    }
}

impl<F: Scalar> DenseLayer<F> {
    pub fn new(weights: Matrix<F>, bias: Vec<F>) -> Result<Self> {
        if bias.len() != weights.rows() {
            return Err(Error::shape(format!(
                "bias of length {} for a layer with {} outputs",
                bias.len(),
                weights.rows()
            )));
        }
        Ok(Self { weights, bias })
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self { weights: Matrix::zeros(out_dim, in_dim), bias: vec![F::zero(); out_dim] }
    }

    /// Uniform weights in ±sqrt(6 / (fan_in + fan_out)), zero bias.
    pub fn glorot<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let data = (0..in_dim * out_dim).map(|_| F::lit(rng.random_range(-limit..limit))).collect();
        Self { weights: Matrix::new(out_dim, in_dim, data).expect("sized above"), bias: vec![F::zero(); out_dim] }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn forward(&self, x: &Matrix<F>) -> Result<Matrix<F>> {
        if x.cols() != self.in_dim() {
            return Err(Error::shape(format!("input width {} for a layer expecting {}", x.cols(), self.in_dim())));
        }
        let mut y = x.matmul_transposed(&self.weights)?;
        for i in 0..y.rows() {
            for (v, &b) in y.row_mut(i).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(y)
    }

    /// Returns parameter gradients and, when `input_grad` is set, dL/dx.
    pub fn backward(&self, x: &Matrix<F>, dy: &Matrix<F>, input_grad: bool) -> Result<(DenseGrads<F>, Option<Matrix<F>>)> {
        if dy.cols() != self.out_dim() || dy.rows() != x.rows() {
            return Err(Error::shape(format!("upstream gradient {:?} for input {:?}", dy.shape(), x.shape())));
        }
        let weights = dy.transpose_matmul(x)?;
        let bias = dy.column_sums();
        let dx = if input_grad { Some(dy.matmul(&self.weights)?) } else { None };
        Ok((DenseGrads { weights, bias }, dx))
    }

    pub fn params_mut(&mut self) -> [ParamMut<'_, F>; 2] {
        [
            ParamMut { name: "weight", values: self.weights.as_mut_slice(), decays: true },
            ParamMut { name: "bias", values: &mut self.bias, decays: false },
        ]
    }
}
