//! Per-task classification heads over frozen features, grouped into the
//! networks that learn one task group, plus the optional shared adapter.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::labels::LabelMatrix;
use crate::nn::{
    balanced_xent, softmax_rows, BalancedLossSpec, BatchNormCache, BatchNormGrads, BatchNormLayer, DenseGrads,
    DenseLayer, DropoutLayer, Mode, ParamMut,
};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Width of every head's hidden layer.
pub const HIDDEN_UNITS: usize = 512;

/// Dropout rate picked from the training-set size.
pub fn dropout_for_training_size(n_train: usize) -> f64 {
    if n_train < 1000 {
        0.75
    } else {
        0.5
    }
}

/// dense(D→H) → batch-norm → ReLU → dropout → dense(H→M) → softmax
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskHead<F> {
    /// Global task index this head predicts.
    pub task: usize,
    pub fc: DenseLayer<F>,
    pub bn: BatchNormLayer<F>,
    pub drop: DropoutLayer,
    pub out: DenseLayer<F>,
}

/// Intermediates kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct HeadCache<F> {
    pub bn: BatchNormCache<F>,
    /// Batch-norm output, before ReLU.
    pub pre_activation: Matrix<F>,
    pub drop_mask: Option<Matrix<F>>,
    /// Input to the output layer (after ReLU and dropout).
    pub hidden: Matrix<F>,
    pub probs: Matrix<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads<F> {
    pub fc: DenseGrads<F>,
    pub bn: BatchNormGrads<F>,
    pub out: DenseGrads<F>,
}

impl<F: Scalar> HeadGrads<F> {
    /// Same order as [`TaskHead::params_mut`].
    pub fn tensors(&self) -> Vec<&[F]> {
        let [a, b] = self.fc.tensors();
        let [c, d] = self.bn.tensors();
        let [e, f] = self.out.tensors();
        vec![a, b, c, d, e, f]
    }

    pub fn scale(&mut self, s: F) {
        self.fc.weights.scale(s);
        self.out.weights.scale(s);
        for v in self.fc.bias.iter_mut().chain(&mut self.out.bias).chain(&mut self.bn.gamma).chain(&mut self.bn.beta) {
            *v *= s;
        }
    }
}

impl<F: Scalar> TaskHead<F> {
    pub fn new<R: Rng + ?Sized>(
        task: usize,
        in_dim: usize,
        hidden: usize,
        classes: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if classes < 2 {
            return Err(Error::config(format!("task {task} needs at least 2 classes, got {classes}")));
        }
        Ok(Self {
            task,
            fc: DenseLayer::glorot(in_dim, hidden, rng),
            bn: BatchNormLayer::new(hidden),
            drop: DropoutLayer::new(dropout)?,
            out: DenseLayer::glorot(hidden, classes, rng),
        })
    }

    pub fn in_dim(&self) -> usize {
        self.fc.in_dim()
    }

    pub fn hidden(&self) -> usize {
        self.fc.out_dim()
    }

    pub fn classes(&self) -> usize {
        self.out.out_dim()
    }

    pub fn forward<R: Rng + ?Sized>(&self, x: &Matrix<F>, mode: Mode, rng: &mut R) -> Result<HeadCache<F>> {
        let z = self.fc.forward(x)?;
        let (pre_activation, bn) = self.bn.forward(&z, mode)?;
        let act = pre_activation.map(|v| v.max(F::zero()));
        let (hidden, drop_mask) = self.drop.forward(&act, mode, rng);
        let logits = self.out.forward(&hidden)?;
        if !logits.is_finite() {
            return Err(Error::numeric(format!("non-finite logits in head for task {}", self.task)));
        }
        let probs = softmax_rows(&logits);
        Ok(HeadCache { bn, pre_activation, drop_mask, hidden, probs })
    }

    /// Inference-mode probabilities (running statistics, no dropout).
    pub fn predict(&self, x: &Matrix<F>) -> Result<Matrix<F>> {
        // Inference never draws from the generator.
        let mut unused = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        Ok(self.forward(x, Mode::Infer, &mut unused)?.probs)
    }

    /// Backpropagates dL/dlogits through the head. `x` is the input given to `forward`.
    /// After an inference-mode forward, batch-norm is treated as a fixed affine map.
    pub fn backward(
        &self,
        x: &Matrix<F>,
        cache: &HeadCache<F>,
        dlogits: &Matrix<F>,
        input_grad: bool,
    ) -> Result<(HeadGrads<F>, Option<Matrix<F>>)> {
        let bn_cache = &cache.bn;
        let (out, dhidden) = self.out.backward(&cache.hidden, dlogits, true)?;
        let mut dact = DropoutLayer::backward(&dhidden.expect("requested"), cache.drop_mask.as_ref());
        for (g, &a) in dact.as_mut_slice().iter_mut().zip(cache.pre_activation.as_slice()) {
            if a <= F::zero() {
                *g = F::zero();
            }
        }
        let (bn, dz) = self.bn.backward(bn_cache, &dact)?;
        let (fc, dx) = self.fc.backward(x, &dz, input_grad)?;
        Ok((HeadGrads { fc, bn, out }, dx))
    }

    /// fc.weight, fc.bias, bn.gamma, bn.beta, out.weight, out.bias
    pub fn params_mut(&mut self) -> Vec<ParamMut<'_, F>> {
        let [a, b] = self.fc.params_mut();
        let [c, d] = self.bn.params_mut();
        let [e, f] = self.out.params_mut();
        vec![a, b, c, d, e, f]
    }
}

/// Per-task class targets for one batch, keyed by global task index.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskTargets {
    pub task_ids: Vec<usize>,
    pub columns: Vec<Vec<usize>>,
}

impl TaskTargets {
    pub fn gather(labels: &LabelMatrix, rows: &[usize], tasks: &[usize]) -> Self {
        Self {
            task_ids: tasks.to_vec(),
            columns: tasks.iter().map(|&t| rows.iter().map(|&r| labels.get(r, t)).collect()).collect(),
        }
    }

    pub fn for_task(&self, task: usize) -> Result<&[usize]> {
        self.task_ids
            .iter()
            .position(|&t| t == task)
            .map(|k| self.columns[k].as_slice())
            .ok_or_else(|| Error::config(format!("no labels supplied for task {task}")))
    }
}

/// Output of evaluating the uniform-weight aggregate over a set of heads.
#[derive(Debug, Clone)]
pub struct HeadsPass<F> {
    /// `(1/T)·Σ_t L_t`
    pub loss: F,
    pub task_losses: Vec<F>,
    /// Gradients of `scale · loss`.
    pub grads: Vec<HeadGrads<F>>,
    pub caches: Vec<HeadCache<F>>,
    /// Gradient of `scale · loss` with respect to the shared head input.
    pub input_grad: Option<Matrix<F>>,
}

fn spec_for<F: Scalar>(specs: &[BalancedLossSpec<F>], task: usize) -> Result<&BalancedLossSpec<F>> {
    specs.get(task).ok_or_else(|| Error::config(format!("no class-balance spec for task {task}")))
}

/// Forward and backward through every head on a shared input. Heads run in
/// parallel; each draws dropout noise only from its own generator.
pub fn heads_pass<F: Scalar, R: Rng + Send>(
    heads: &[TaskHead<F>],
    x: &Matrix<F>,
    targets: &TaskTargets,
    specs: &[BalancedLossSpec<F>],
    mode: Mode,
    rngs: &mut [R],
    scale: F,
    input_grad: bool,
) -> Result<HeadsPass<F>> {
    if heads.is_empty() {
        return Err(Error::config("empty task group"));
    }
    if rngs.len() != heads.len() {
        return Err(Error::config(format!("{} generators for {} heads", rngs.len(), heads.len())));
    }
    let per_task = scale / F::from_count(heads.len());
    let results: Vec<Result<(F, HeadGrads<F>, HeadCache<F>, Option<Matrix<F>>)>> = heads
        .par_iter()
        .zip(rngs.par_iter_mut())
        .map(|(head, rng)| {
            let y = targets.for_task(head.task)?;
            let spec = spec_for(specs, head.task)?;
            let cache = head.forward(x, mode, rng)?;
            let (loss, mut dlogits) = balanced_xent(&cache.probs, y, spec)?;
            dlogits.scale(per_task);
            let (grads, dx) = head.backward(x, &cache, &dlogits, input_grad)?;
            Ok((loss, grads, cache, dx))
        })
        .collect();

    let mut task_losses = Vec::with_capacity(heads.len());
    let mut grads = Vec::with_capacity(heads.len());
    let mut caches = Vec::with_capacity(heads.len());
    let mut total_dx: Option<Matrix<F>> = None;
    for r in results {
        let (loss, g, c, dx) = r?;
        task_losses.push(loss);
        grads.push(g);
        caches.push(c);
        if let Some(dx) = dx {
            match total_dx.as_mut() {
                None => total_dx = Some(dx),
                Some(acc) => acc.add_assign(&dx)?,
            }
        }
    }
    let loss = task_losses.iter().copied().sum::<F>() / F::from_count(heads.len());
    Ok(HeadsPass { loss, task_losses, grads, caches, input_grad: total_dx })
}

/// Network part that learns one task group: one head per task, optionally
/// preceded by a dense adapter shared by all heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupModel<F> {
    pub task_ids: Vec<usize>,
    pub heads: Vec<TaskHead<F>>,
    pub adapter: Option<DenseLayer<F>>,
    /// Identifies the frozen backbone the heads were trained on.
    pub backbone_digest: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupGrads<F> {
    pub heads: Vec<HeadGrads<F>>,
    pub adapter: Option<DenseGrads<F>>,
}

/// Architecture shared by every head of a group.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadShape {
    pub in_dim: usize,
    pub hidden: usize,
    pub dropout: f64,
    pub shared_adapter: bool,
}

impl<F: Scalar> GroupModel<F> {
    /// Fresh model; `classes[k]` is the class count of `task_ids[k]`.
    pub fn new<R: Rng + ?Sized>(
        task_ids: Vec<usize>,
        classes: &[usize],
        shape: &HeadShape,
        backbone_digest: String,
        rng: &mut R,
    ) -> Result<Self> {
        if task_ids.is_empty() || task_ids.len() != classes.len() {
            return Err(Error::config("group needs one class count per task and at least one task"));
        }
        let adapter = shape.shared_adapter.then(|| DenseLayer::glorot(shape.in_dim, shape.in_dim, rng));
        let heads = task_ids
            .iter()
            .zip(classes)
            .map(|(&t, &m)| TaskHead::new(t, shape.in_dim, shape.hidden, m, shape.dropout, rng))
            .collect::<Result<_>>()?;
        Ok(Self { task_ids, heads, adapter, backbone_digest })
    }

    pub fn n_tasks(&self) -> usize {
        self.heads.len()
    }

    pub fn head_for(&self, task: usize) -> Option<&TaskHead<F>> {
        self.heads.iter().find(|h| h.task == task)
    }

    /// Applies the adapter (when present) to backbone features.
    pub fn adapt(&self, features: &Matrix<F>) -> Result<Matrix<F>> {
        match &self.adapter {
            Some(a) => a.forward(features),
            None => Ok(features.clone()),
        }
    }

    /// Inference-mode class probabilities for every head, in head order.
    pub fn predict(&self, features: &Matrix<F>) -> Result<Vec<Matrix<F>>> {
        let x = self.adapt(features)?;
        self.heads.par_iter().map(|h| h.predict(&x)).collect()
    }

    pub fn adapter_params_mut(&mut self) -> Option<[ParamMut<'_, F>; 2]> {
        self.adapter.as_mut().map(DenseLayer::params_mut)
    }
}

/// Result of [`multitask_loss`].
#[derive(Debug, Clone)]
pub struct MultitaskOutput<F> {
    pub loss: F,
    pub task_losses: Vec<F>,
    pub grads: GroupGrads<F>,
    pub caches: Vec<HeadCache<F>>,
}

/// Uniform-weight aggregate `(1/T)·Σ_t L_t` over the group's tasks with gradients
/// for every head and the shared adapter.
pub fn multitask_loss<F: Scalar, R: Rng + Send>(
    model: &GroupModel<F>,
    features: &Matrix<F>,
    targets: &TaskTargets,
    specs: &[BalancedLossSpec<F>],
    mode: Mode,
    rngs: &mut [R],
) -> Result<MultitaskOutput<F>> {
    for &t in &model.task_ids {
        targets.for_task(t)?;
    }
    let x = model.adapt(features)?;
    let pass = heads_pass(&model.heads, &x, targets, specs, mode, rngs, F::one(), model.adapter.is_some())?;
    let adapter = match (&model.adapter, &pass.input_grad) {
        (Some(a), Some(dx)) => Some(a.backward(features, dx, false)?.0),
        _ => None,
    };
    Ok(MultitaskOutput {
        loss: pass.loss,
        task_losses: pass.task_losses,
        grads: GroupGrads { heads: pass.grads, adapter },
        caches: pass.caches,
    })
}

/// Which parts of the target came from the source.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct InitReport {
    /// (source task, target task) for every paired head.
    pub paired: Vec<(usize, usize)>,
    /// Target tasks whose heads had no source partner.
    pub fresh_heads: Vec<usize>,
    /// Target tasks whose output layer was re-initialized for a class-count mismatch.
    pub fresh_outputs: Vec<usize>,
    pub adapter_copied: bool,
}

/// Copies learned parameters from `source` into a freshly initialized `target`.
/// Heads pair by position: both groups list tasks by descending dependency, so
/// the k-th strongest source head seeds the k-th target head.
pub fn init_from<F: Scalar>(source: &GroupModel<F>, target: &mut GroupModel<F>) -> Result<InitReport> {
    let mut report = InitReport::default();
    if let (Some(src), Some(dst)) = (&source.adapter, target.adapter.as_mut()) {
        if src.weights.shape() != dst.weights.shape() {
            return Err(Error::config("shared adapter shapes differ between groups"));
        }
        *dst = src.clone();
        report.adapter_copied = true;
    }
    for (k, dst) in target.heads.iter_mut().enumerate() {
        let Some(src) = source.heads.get(k) else {
            report.fresh_heads.push(dst.task);
            continue;
        };
        if src.fc.weights.shape() != dst.fc.weights.shape() {
            return Err(Error::config(format!(
                "head shapes differ: source {:?}, target {:?}",
                src.fc.weights.shape(),
                dst.fc.weights.shape()
            )));
        }
        dst.fc = src.fc.clone();
        dst.bn = src.bn.clone();
        if src.classes() == dst.classes() {
            dst.out = src.out.clone();
        } else {
            report.fresh_outputs.push(dst.task);
        }
        report.paired.push((src.task, dst.task));
    }
    Ok(report)
}

/// Fixed, non-trainable feature provider standing in for a pretrained network.
#[derive(Debug, Clone, PartialEq)]
pub enum FrozenBackbone<F> {
    /// Features were computed ahead of time; they pass through unchanged.
    Precomputed { digest: String },
    /// `tanh(W·x)` with `W` drawn once from the stored seed.
    Projection { seed: u64, weights: Matrix<F> },
}

impl<F: Scalar> FrozenBackbone<F> {
    pub fn precomputed(digest: impl Into<String>) -> Self {
        Self::Precomputed { digest: digest.into() }
    }

    pub fn projection(seed: u64, in_dim: usize, out_dim: usize) -> Self {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (in_dim.max(1) as f64).sqrt();
        let data = (0..in_dim * out_dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                F::lit(z * scale)
            })
            .collect();
        Self::Projection { seed, weights: Matrix::new(out_dim, in_dim, data).expect("sized above") }
    }

    pub fn digest(&self) -> String {
        match self {
            Self::Precomputed { digest } => digest.clone(),
            Self::Projection { seed, weights } => {
                let mut h = Sha256::new();
                h.update(format!("projection:{seed}:{}:{}", weights.cols(), weights.rows()).as_bytes());
                hex::encode(h.finalize())
            }
        }
    }

    pub fn embed(&self, inputs: &Matrix<F>) -> Result<Matrix<F>> {
        match self {
            Self::Precomputed { .. } => Ok(inputs.clone()),
            Self::Projection { weights, .. } => Ok(inputs.matmul_transposed(weights)?.map(|v| v.tanh())),
        }
    }
}
