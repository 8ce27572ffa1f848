//! Central finite-difference verification of the analytic backward passes.
//!
//! Each checked coordinate is perturbed by ±step on a copy of the parameters and
//! the loss is re-evaluated from scratch. Coordinates whose perturbation flips a
//! ReLU on or off are skipped, since the loss is not differentiable there.
//! The relative error is `|a − n| / max(|a|, |n|, 1e-6)`.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{balanced_weights, balanced_xent, softmax_rows, BalancedLossSpec, DenseLayer, Mode};
use crate::error::{Error, Result};
use crate::model::{multitask_loss, GroupModel, HeadShape, TaskHead, TaskTargets};
use crate::tensor::Matrix;

/// Denominator floor for the relative error.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
}

impl GradCheckReport {
    fn merge(&mut self, other: &Self) {
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.checked += other.checked;
        self.skipped_kinks += other.skipped_kinks;
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Loss at a perturbed point and the ReLU activity pattern it produced.
type Probe<'a> = dyn FnMut(usize, usize, f64) -> Result<(f64, Vec<bool>)> + 'a;

fn compare(
    analytic: &[Vec<f64>],
    probe: &mut Probe<'_>,
    step: f64,
    max_coords: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> Result<GradCheckReport> {
    let mut report = GradCheckReport::default();
    for (t, grad) in analytic.iter().enumerate() {
        let coords: Vec<usize> = match max_coords {
            Some(k) if k < grad.len() => sample(rng, grad.len(), k).into_vec(),
            _ => (0..grad.len()).collect(),
        };
        for i in coords {
            let (up, mask_up) = probe(t, i, step)?;
            let (down, mask_down) = probe(t, i, -step)?;
            if mask_up != mask_down {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * step);
            report.max_rel_error = report.max_rel_error.max(relative_error(grad[i], numeric));
            report.checked += 1;
        }
    }
    Ok(report)
}

fn relu_pattern(pre: &Matrix<f64>) -> Vec<bool> {
    pre.as_slice().iter().map(|&v| v > 0.0).collect()
}

/// Checks every head parameter against finite differences. Dropout must be off;
/// batch-norm runs on batch statistics, which is deterministic for a fixed batch.
pub fn gradient_check(
    head: &TaskHead<f64>,
    x: &Matrix<f64>,
    targets: &[usize],
    spec: &BalancedLossSpec<f64>,
    step: f64,
    max_coords: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport> {
    if head.drop.rate != 0.0 {
        return Err(Error::config("gradient check needs dropout disabled"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cache = head.forward(x, Mode::Train, &mut rng)?;
    let (_, dlogits) = balanced_xent(&cache.probs, targets, spec)?;
    let (grads, _) = head.backward(x, &cache, &dlogits, false)?;
    let analytic: Vec<Vec<f64>> = grads.tensors().into_iter().map(<[f64]>::to_vec).collect();

    let mut probe = |t: usize, i: usize, delta: f64| -> Result<(f64, Vec<bool>)> {
        let mut h = head.clone();
        h.params_mut()[t].values[i] += delta;
        let c = h.forward(x, Mode::Train, &mut rng)?;
        Ok((balanced_xent(&c.probs, targets, spec)?.0, relu_pattern(&c.pre_activation)))
    };
    let mut sampler = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    compare(&analytic, &mut probe, step, max_coords, &mut sampler)
}

/// Checks a bare dense layer followed by softmax and the balanced loss.
pub fn linear_softmax_check(
    layer: &DenseLayer<f64>,
    x: &Matrix<f64>,
    targets: &[usize],
    spec: &BalancedLossSpec<f64>,
    step: f64,
) -> Result<GradCheckReport> {
    let probs = softmax_rows(&layer.forward(x)?);
    let (_, dlogits) = balanced_xent(&probs, targets, spec)?;
    let (grads, _) = layer.backward(x, &dlogits, false)?;
    let analytic = vec![grads.weights.as_slice().to_vec(), grads.bias.clone()];
    let mut probe = |t: usize, i: usize, delta: f64| -> Result<(f64, Vec<bool>)> {
        let mut l = layer.clone();
        l.params_mut()[t].values[i] += delta;
        let p = softmax_rows(&l.forward(x)?);
        Ok((balanced_xent(&p, targets, spec)?.0, Vec::new()))
    };
    let mut sampler = ChaCha8Rng::seed_from_u64(0);
    compare(&analytic, &mut probe, step, None, &mut sampler)
}

/// Checks the uniform multi-task aggregate of a whole group, including the shared adapter.
pub fn group_gradient_check(
    model: &GroupModel<f64>,
    x: &Matrix<f64>,
    targets: &TaskTargets,
    specs: &[BalancedLossSpec<f64>],
    step: f64,
    max_coords: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport> {
    if model.heads.iter().any(|h| h.drop.rate != 0.0) {
        return Err(Error::config("gradient check needs dropout disabled"));
    }
    let mut rngs: Vec<ChaCha8Rng> = (0..model.n_tasks()).map(|k| ChaCha8Rng::seed_from_u64(k as u64)).collect();
    let out = multitask_loss(model, x, targets, specs, Mode::Train, &mut rngs)?;
    let mut analytic: Vec<Vec<f64>> = Vec::new();
    if let Some(a) = &out.grads.adapter {
        analytic.push(a.weights.as_slice().to_vec());
        analytic.push(a.bias.clone());
    }
    for g in &out.grads.heads {
        analytic.extend(g.tensors().into_iter().map(<[f64]>::to_vec));
    }
    let has_adapter = model.adapter.is_some();
    let mut probe = |t: usize, i: usize, delta: f64| -> Result<(f64, Vec<bool>)> {
        let mut m = model.clone();
        let mut tensor = t;
        if has_adapter {
            if tensor < 2 {
                m.adapter_params_mut().expect("adapter present")[tensor].values[i] += delta;
            }
            tensor = tensor.wrapping_sub(2);
        }
        if tensor < 6 * m.heads.len() {
            m.heads[tensor / 6].params_mut()[tensor % 6].values[i] += delta;
        }
        let o = multitask_loss(&m, x, targets, specs, Mode::Train, &mut rngs)?;
        let pattern = o.caches.iter().flat_map(|c| relu_pattern(&c.pre_activation)).collect();
        Ok((o.loss, pattern))
    };
    let mut sampler = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    compare(&analytic, &mut probe, step, max_coords, &mut sampler)
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix<f64> {
    Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect()).expect("sized")
}

fn random_spec(rng: &mut ChaCha8Rng, classes: usize) -> BalancedLossSpec<f64> {
    let counts: Vec<usize> = (0..classes).map(|_| rng.random_range(1..50)).collect();
    balanced_weights("gradcheck", &counts).expect("counts are positive")
}

/// Outcome of [`run_suite`].
#[derive(Debug, Clone, Default, Serialize)]
pub struct SuiteReport {
    pub head: GradCheckReport,
    pub linear: GradCheckReport,
    pub group: GradCheckReport,
    pub configs: usize,
}

impl SuiteReport {
    pub fn max_rel_error(&self) -> f64 {
        self.head.max_rel_error.max(self.linear.max_rel_error).max(self.group.max_rel_error)
    }
}

/// Random head, linear and grouped configurations, `configs` of each.
pub fn run_suite(configs: usize, seed: u64, step: f64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut suite = SuiteReport { configs, ..SuiteReport::default() };
    for c in 0..configs {
        let in_dim = rng.random_range(1..6);
        let hidden = rng.random_range(2..10);
        let classes = rng.random_range(2..5);
        let batch = rng.random_range(3..9);
        let head = TaskHead::new(0, in_dim, hidden, classes, 0.0, &mut rng)?;
        let mut head = head;
        // Move batch-norm away from its identity initialization.
        for v in head.bn.gamma.iter_mut().chain(head.bn.beta.iter_mut()) {
            *v += rng.random_range(-0.5..0.5);
        }
        let x = random_matrix(&mut rng, batch, in_dim);
        let targets: Vec<usize> = (0..batch).map(|_| rng.random_range(0..classes)).collect();
        let spec = random_spec(&mut rng, classes);
        suite.head.merge(&gradient_check(&head, &x, &targets, &spec, step, None, seed + c as u64)?);

        let layer = DenseLayer::glorot(in_dim, classes, &mut rng);
        suite.linear.merge(&linear_softmax_check(&layer, &x, &targets, &spec, step)?);

        let n_tasks = rng.random_range(1..4);
        let class_counts: Vec<usize> = (0..n_tasks).map(|_| rng.random_range(2..4)).collect();
        let shape = HeadShape { in_dim, hidden, dropout: 0.0, shared_adapter: rng.random_bool(0.5) };
        let model = GroupModel::new((0..n_tasks).collect(), &class_counts, &shape, String::new(), &mut rng)?;
        let targets = TaskTargets {
            task_ids: (0..n_tasks).collect(),
            columns: class_counts.iter().map(|&m| (0..batch).map(|_| rng.random_range(0..m)).collect()).collect(),
        };
        let specs: Vec<_> = class_counts.iter().map(|&m| random_spec(&mut rng, m)).collect();
        suite.group.merge(&group_gradient_check(&model, &x, &targets, &specs, step, None, seed + c as u64)?);
    }
    Ok(suite)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.0001) - 0.0001 / 1.0001).abs() < 1e-15);
        assert_eq!(relative_error(1e-9, 0.0), 1e-3);
    }

    #[test]
    fn rejects_active_dropout() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = TaskHead::<f64>::new(0, 2, 3, 2, 0.5, &mut rng).unwrap();
        let x = Matrix::zeros(3, 2);
        assert!(gradient_check(&head, &x, &[0, 1, 0], &BalancedLossSpec::uniform(2), 1e-5, None, 0).is_err());
    }

    #[test]
    fn linear_softmax_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layer = DenseLayer::glorot(4, 3, &mut rng);
        let x = random_matrix(&mut rng, 6, 4);
        let spec = random_spec(&mut rng, 3);
        let r = linear_softmax_check(&layer, &x, &[0, 2, 1, 1, 0, 2], &spec, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
        assert_eq!(r.checked, 15);
    }
}
