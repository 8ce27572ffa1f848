use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Mode;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Inverted dropout: survivors are scaled by 1/(1−rate) at training time so the
/// inference pass is the identity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropoutLayer {
    pub rate: f64,
}

impl DropoutLayer {
    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::config(format!("dropout rate {rate} outside [0, 1)")));
        }
        Ok(Self { rate })
    }

    /// Returns the output and the per-entry multiplier mask (absent when the pass is the identity).
    pub fn forward<F: Scalar, R: Rng + ?Sized>(
        &self,
        x: &Matrix<F>,
        mode: Mode,
        rng: &mut R,
    ) -> (Matrix<F>, Option<Matrix<F>>) {
        if mode == Mode::Infer || self.rate == 0.0 {
            return (x.clone(), None);
        }
        let keep = F::lit(1.0 / (1.0 - self.rate));
        let mut mask = Matrix::zeros(x.rows(), x.cols());
        for m in mask.as_mut_slice() {
            if rng.random::<f64>() >= self.rate {
                *m = keep;
            }
        }
        let mut y = x.clone();
        for (v, &m) in y.as_mut_slice().iter_mut().zip(mask.as_slice()) {
            *v *= m;
        }
        (y, Some(mask))
    }

    pub fn backward<F: Scalar>(dy: &Matrix<F>, mask: Option<&Matrix<F>>) -> Matrix<F> {
        match mask {
            None => dy.clone(),
            Some(m) => {
                let mut dx = dy.clone();
                for (v, &k) in dx.as_mut_slice().iter_mut().zip(m.as_slice()) {
                    *v *= k;
                }
                dx
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Matrix::<f64>::from_f64_rows(&[&[1.0, -2.0, 3.5]]).unwrap();
        let (y, m) = DropoutLayer::new(0.0).unwrap().forward(&x, Mode::Train, &mut rng);
        assert_eq!(y, x);
        assert!(m.is_none());
        let (y, _) = DropoutLayer::new(0.75).unwrap().forward(&x, Mode::Infer, &mut rng);
        assert_eq!(y, x);
    }

    #[test]
    fn rejects_rate_one() {
        assert!(DropoutLayer::new(1.0).is_err());
        assert!(DropoutLayer::new(-0.1).is_err());
    }

    #[test]
    fn unbiased_in_expectation() {
        // 10^5 Bernoulli(0.5) draws scaled by 2: per-entry std is 1, so 3 SE = 3/sqrt(1e5).
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Matrix::<f64>::filled(1000, 100, 1.0);
        let (y, _) = DropoutLayer::new(0.5).unwrap().forward(&x, Mode::Train, &mut rng);
        let n = y.as_slice().len() as f64;
        let mean = y.as_slice().iter().sum::<f64>() / n;
        let var = y.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let se = (var / n).sqrt();
        assert!((mean - 1.0).abs() < 3.0 * se, "mean {mean}, se {se}");
    }

    #[test]
    fn backward_reuses_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Matrix::<f64>::filled(4, 4, 1.0);
        let (y, m) = DropoutLayer::new(0.5).unwrap().forward(&x, Mode::Train, &mut rng);
        let dx = DropoutLayer::backward(&x, m.as_ref());
        assert_eq!(dx, y);
    }
}
