//! Two-stage curriculum over task groups.
//!
//! Stage one trains the strongly correlated group on its uniform multi-task
//! loss. Stage two initializes the weakly correlated group from it and trains
//! on `λ·L_s + (1−λ)·L_w`, where `L_s` is re-evaluated on the strong heads with
//! the current parameters at every step.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_model, save_model};
use crate::data::{balance_specs, stratified_split, Dataset};
use crate::error::{Error, Result};
use crate::labels::{correlation_split, GroupSplit, LabelMatrix};
use crate::model::{
    dropout_for_training_size, heads_pass, init_from, FrozenBackbone, GroupModel, HeadShape, InitReport, TaskHead,
    TaskTargets, HIDDEN_UNITS,
};
use crate::nn::{apply_sgd, lr_at_epoch, BalancedLossSpec, Mode, SgdConfig};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    pub shared_adapter: bool,
    /// `None` picks the rate from the training-set size.
    pub dropout: Option<f64>,
    pub batch_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { hidden: HIDDEN_UNITS, shared_adapter: true, dropout: None, batch_size: 64 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrongHeads {
    Frozen,
    Trainable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferConfig {
    pub lambda: f64,
    pub epochs_phase1: usize,
    pub epochs_phase2: usize,
    pub strong_heads_phase2: StrongHeads,
    /// Stop a phase after this many epochs without validation-loss improvement.
    pub patience: Option<usize>,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self { lambda: 0.25, epochs_phase1: 300, epochs_phase2: 300, strong_heads_phase2: StrongHeads::Trainable, patience: None }
    }
}

impl TransferConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config(format!("transfer weight {} outside [0, 1]", self.lambda)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub sgd: SgdConfig,
    pub model: ModelConfig,
    pub transfer: TransferConfig,
    pub seed: u64,
    /// When set, stage one is written here and stage two reads it back.
    pub checkpoint_dir: Option<PathBuf>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.sgd.validate()?;
        self.transfer.validate()?;
        if self.model.batch_size < 2 || self.model.hidden == 0 {
            return Err(Error::config("batch size must be ≥ 2 and hidden width > 0"));
        }
        Ok(())
    }
}

/// Independent generator for a named purpose, derived from the run seed.
pub fn stream(seed: u64, tag: &str) -> ChaCha8Rng {
    // FNV-1a over the tag selects the stream; the seed selects the key.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(h);
    rng
}

/// Embedded features, labels and the fit/validation/test partition for one seed.
#[derive(Debug, Clone)]
pub struct TrainData<F> {
    pub features: Matrix<F>,
    pub labels: LabelMatrix,
    pub fit: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    /// Class-balance specs from the fit rows, indexed by task.
    pub specs: Vec<BalancedLossSpec<F>>,
    pub backbone_digest: String,
}

impl<F: Scalar> TrainData<F> {
    /// Test rows are held out first; validation rows are then carved from the rest.
    pub fn prepare(
        dataset: &Dataset<F>,
        backbone: &FrozenBackbone<F>,
        test_fraction: f64,
        val_fraction: f64,
        seed: u64,
    ) -> Result<Self> {
        let all: Vec<usize> = (0..dataset.n_samples()).collect();
        let outer = stratified_split(&dataset.labels, &all, test_fraction, seed)?;
        let (fit, val) = if val_fraction > 0.0 {
            let inner = stratified_split(&dataset.labels, &outer.train, val_fraction, seed.wrapping_add(1))?;
            (inner.train, inner.test)
        } else {
            (outer.train, Vec::new())
        };
        let specs = balance_specs(&dataset.labels.subset_rows(&fit)?)?;
        Ok(Self {
            features: backbone.embed(&dataset.features)?,
            labels: dataset.labels.clone(),
            fit,
            val,
            test: outer.test,
            specs,
            backbone_digest: backbone.digest(),
        })
    }

    pub fn fit_labels(&self) -> Result<LabelMatrix> {
        self.labels.subset_rows(&self.fit)
    }

    pub fn head_shape(&self, cfg: &ModelConfig) -> HeadShape {
        HeadShape {
            in_dim: self.features.cols(),
            hidden: cfg.hidden,
            dropout: cfg.dropout.unwrap_or_else(|| dropout_for_training_size(self.fit.len())),
            shared_adapter: cfg.shared_adapter,
        }
    }

    pub fn classes_of(&self, tasks: &[usize]) -> Vec<usize> {
        tasks.iter().map(|&t| self.labels.num_classes(t)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Objective that was minimized (the blended loss in stage two).
    pub loss: f64,
    /// Uniform aggregate over the group being trained.
    pub group_loss: f64,
    /// Strong-group aggregate during stage two.
    pub anchor_loss: Option<f64>,
    pub train_accuracy: Vec<f64>,
    pub val_accuracy: Vec<f64>,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseLog {
    pub phase: String,
    pub task_ids: Vec<usize>,
    pub records: Vec<EpochRecord>,
    pub stopped_early: bool,
}

impl PhaseLog {
    pub fn first_loss(&self) -> Option<f64> {
        self.records.first().map(|r| r.loss)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }
}

/// Stage-two objective `λ·L_s + (1−λ)·L_w`.
pub fn transfer_loss(lambda: f64, strong: f64, weak: f64) -> f64 {
    lambda * strong + (1.0 - lambda) * weak
}

/// Strong heads evaluated alongside the weak group in stage two.
pub struct Anchor<'a, F> {
    pub heads: &'a mut [TaskHead<F>],
    pub lambda: f64,
    pub strong_heads: StrongHeads,
}

fn batches(rows: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = rows.chunks(size).collect();
    // A trailing batch of one cannot be batch-normalized; fold it into its predecessor.
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let n = out.len();
        let start = (n - 1) * size;
        out[n - 1] = &rows[start..];
    }
    out
}

fn all_finite<F: Scalar>(g: &[F]) -> bool {
    g.iter().all(|v| v.is_finite())
}

fn argmax<F: Scalar>(row: &[F]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Per-task test metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task: usize,
    pub accuracy: f64,
    pub balanced_accuracy: f64,
}

/// Accuracy and mean per-class recall (over classes present in `rows`), per head.
pub fn evaluate<F: Scalar>(model: &GroupModel<F>, data: &TrainData<F>, rows: &[usize]) -> Result<Vec<TaskMetrics>> {
    if rows.is_empty() {
        return Err(Error::config("evaluation needs at least one row"));
    }
    let probs = model.predict(&data.features.gather_rows(rows))?;
    Ok(model
        .heads
        .iter()
        .zip(&probs)
        .map(|(h, p)| {
            let m = h.classes();
            let mut hits = vec![0usize; m];
            let mut totals = vec![0usize; m];
            for (i, &r) in rows.iter().enumerate() {
                let y = data.labels.get(r, h.task);
                totals[y] += 1;
                if argmax(p.row(i)) == y {
                    hits[y] += 1;
                }
            }
            let correct: usize = hits.iter().sum();
            let recalls: Vec<f64> = hits
                .iter()
                .zip(&totals)
                .filter(|(_, &t)| t > 0)
                .map(|(&h, &t)| h as f64 / t as f64)
                .collect();
            TaskMetrics {
                task: h.task,
                accuracy: correct as f64 / rows.len() as f64,
                balanced_accuracy: recalls.iter().sum::<f64>() / recalls.len() as f64,
            }
        })
        .collect())
}

fn validation_loss<F: Scalar>(model: &GroupModel<F>, data: &TrainData<F>) -> Result<Option<(f64, Vec<f64>)>> {
    if data.val.is_empty() {
        return Ok(None);
    }
    let probs = model.predict(&data.features.gather_rows(&data.val))?;
    let mut loss = 0.0;
    let mut acc = Vec::with_capacity(model.heads.len());
    for (h, p) in model.heads.iter().zip(&probs) {
        let y: Vec<usize> = data.val.iter().map(|&r| data.labels.get(r, h.task)).collect();
        let spec = &data.specs[h.task];
        loss += crate::nn::balanced_xent(p, &y, spec)?.0.widen();
        let hits = y.iter().enumerate().filter(|&(i, &t)| argmax(p.row(i)) == t).count();
        acc.push(hits as f64 / y.len() as f64);
    }
    Ok(Some((loss / model.heads.len() as f64, acc)))
}

/// Trains `model` for up to `epochs` epochs on the fit rows. With an anchor the
/// objective becomes `λ·L_anchor + (1−λ)·L_group`; otherwise it is `L_group`.
///
/// Each parameter set's weight decay is scaled by the weight of the loss term it
/// belongs to, and a set whose term has weight zero is not updated at all.
pub fn train_group<F: Scalar>(
    model: &mut GroupModel<F>,
    data: &TrainData<F>,
    epochs: usize,
    cfg: &TrainConfig,
    phase: &str,
    mut anchor: Option<Anchor<'_, F>>,
) -> Result<PhaseLog> {
    cfg.validate()?;
    if data.fit.len() < 2 {
        return Err(Error::config("need at least 2 training rows"));
    }
    let lambda = anchor.as_ref().map_or(0.0, |a| a.lambda);
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::config(format!("transfer weight {lambda} outside [0, 1]")));
    }
    let group_weight = F::lit(1.0 - lambda);
    let anchor_weight = F::lit(lambda);
    let wd = F::lit(cfg.sgd.weight_decay);
    let has_adapter = model.adapter.is_some();

    let mut all_tasks = model.task_ids.clone();
    if let Some(a) = &anchor {
        all_tasks.extend(a.heads.iter().map(|h| h.task));
    }
    let mut shuffle_rng = stream(cfg.seed, &format!("shuffle/{phase}"));
    let mut head_rngs: Vec<ChaCha8Rng> =
        model.heads.iter().map(|h| stream(cfg.seed, &format!("dropout/{phase}/{}", h.task))).collect();
    let mut anchor_rngs: Vec<ChaCha8Rng> = anchor
        .as_ref()
        .map(|a| a.heads.iter().map(|h| stream(cfg.seed, &format!("anchor/{phase}/{}", h.task))).collect())
        .unwrap_or_default();

    let mut log = PhaseLog { phase: phase.to_owned(), task_ids: model.task_ids.clone(), records: Vec::new(), stopped_early: false };
    let mut order = data.fit.clone();
    let mut best_val = f64::INFINITY;
    let mut since_best = 0usize;

    for epoch in 0..epochs {
        let lr = lr_at_epoch(&cfg.sgd, epoch);
        let lr_f = F::lit(lr);
        order.shuffle(&mut shuffle_rng);
        let mut sums = (0.0f64, 0.0f64, 0.0f64);
        let mut hits = vec![0usize; model.heads.len()];
        let mut seen = 0usize;

        for batch in batches(&order, cfg.model.batch_size) {
            let x = data.features.gather_rows(batch);
            let targets = TaskTargets::gather(&data.labels, batch, &all_tasks);
            let adapted = model.adapt(&x)?;
            let diverged = |e: Error| match e {
                Error::Numeric(msg) => Error::numeric(format!("{phase}: diverged at epoch {epoch}: {msg}")),
                other => other,
            };
            let group = heads_pass(&model.heads, &adapted, &targets, &data.specs, Mode::Train, &mut head_rngs, group_weight, has_adapter)
                .map_err(diverged)?;
            let anchored = match anchor.as_ref() {
                Some(a) => {
                    let mode = match a.strong_heads {
                        StrongHeads::Trainable => Mode::Train,
                        StrongHeads::Frozen => Mode::Infer,
                    };
                    Some(
                        heads_pass(a.heads, &adapted, &targets, &data.specs, mode, &mut anchor_rngs, anchor_weight, has_adapter)
                            .map_err(diverged)?,
                    )
                }
                None => None,
            };

            let group_loss = group.loss.widen();
            let anchor_loss = anchored.as_ref().map(|p| p.loss.widen());
            let objective = match anchor_loss {
                Some(ls) => transfer_loss(lambda, ls, group_loss),
                None => group_loss,
            };
            if !objective.is_finite() {
                return Err(Error::numeric(format!("{phase}: loss diverged at epoch {epoch}")));
            }
            let w = batch.len() as f64;
            sums.0 += objective * w;
            sums.1 += group_loss * w;
            sums.2 += anchor_loss.unwrap_or(0.0) * w;
            seen += batch.len();
            for (k, c) in group.caches.iter().enumerate() {
                let y = targets.for_task(model.heads[k].task)?;
                hits[k] += (0..batch.len()).filter(|&i| argmax(c.probs.row(i)) == y[i]).count();
            }

            // Adapter gradient from both terms.
            let adapter_grads = match model.adapter.as_ref() {
                Some(adapter) => {
                    let mut dx = group.input_grad.clone().expect("requested when adapter present");
                    if let (Some(p), true) = (&anchored, lambda > 0.0) {
                        dx.add_assign(p.input_grad.as_ref().expect("requested when adapter present"))?;
                    }
                    Some(adapter.backward(&x, &dx, false)?.0)
                }
                None => None,
            };
            let finite = adapter_grads.iter().flat_map(|g| g.tensors()).all(all_finite)
                && group.grads.iter().flat_map(|g| g.tensors()).all(all_finite)
                && anchored.iter().flat_map(|p| &p.grads).flat_map(|g| g.tensors()).all(all_finite);
            if !finite {
                return Err(Error::numeric(format!("{phase}: non-finite gradient at epoch {epoch}")));
            }
            if let (Some(adapter), Some(g)) = (model.adapter.as_mut(), &adapter_grads) {
                apply_sgd(&mut adapter.params_mut(), &g.tensors(), lr_f, wd)?;
            }
            if lambda < 1.0 {
                for ((head, g), c) in model.heads.iter_mut().zip(&group.grads).zip(&group.caches) {
                    apply_sgd(&mut head.params_mut(), &g.tensors(), lr_f, wd * group_weight)?;
                    head.bn.commit_running(&c.bn);
                }
            }
            if let (Some(a), Some(p)) = (anchor.as_mut(), &anchored) {
                if a.strong_heads == StrongHeads::Trainable && lambda > 0.0 {
                    for ((head, g), c) in a.heads.iter_mut().zip(&p.grads).zip(&p.caches) {
                        apply_sgd(&mut head.params_mut(), &g.tensors(), lr_f, wd * anchor_weight)?;
                        head.bn.commit_running(&c.bn);
                    }
                }
            }
        }

        let n = seen as f64;
        let val = validation_loss(model, data)?;
        log.records.push(EpochRecord {
            epoch,
            lr,
            loss: sums.0 / n,
            group_loss: sums.1 / n,
            anchor_loss: anchor.as_ref().map(|_| sums.2 / n),
            train_accuracy: hits.iter().map(|&h| h as f64 / n).collect(),
            val_accuracy: val.as_ref().map(|v| v.1.clone()).unwrap_or_default(),
            val_loss: val.as_ref().map(|v| v.0),
        });

        if let (Some(patience), Some((vl, _))) = (cfg.transfer.patience, &val) {
            if *vl < best_val {
                best_val = *vl;
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= patience {
                    log.stopped_early = true;
                    break;
                }
            }
        }
    }
    Ok(log)
}

/// A fresh group for `tasks`, initialized from the `init/<phase>` stream.
pub fn fresh_group<F: Scalar>(data: &TrainData<F>, tasks: &[usize], cfg: &TrainConfig, phase: &str) -> Result<GroupModel<F>> {
    let mut rng = stream(cfg.seed, &format!("init/{phase}"));
    GroupModel::new(tasks.to_vec(), &data.classes_of(tasks), &data.head_shape(&cfg.model), data.backbone_digest.clone(), &mut rng)
}

/// Stage one: multi-task training of the strongly correlated group.
pub fn train_phase1<F: Scalar>(data: &TrainData<F>, split: &GroupSplit<F>, cfg: &TrainConfig) -> Result<(GroupModel<F>, PhaseLog)> {
    let mut c_s = fresh_group(data, &split.strongly, cfg, "phase1")?;
    let log = train_group(&mut c_s, data, cfg.transfer.epochs_phase1, cfg, "phase1", None)?;
    Ok((c_s, log))
}

/// Outcome of stage two.
#[derive(Debug, Clone)]
pub struct Phase2Outcome<F> {
    pub c_w: GroupModel<F>,
    /// Strong heads as they ended stage two (unchanged when frozen).
    pub anchor_heads: Vec<TaskHead<F>>,
    pub log: PhaseLog,
    pub init: InitReport,
}

/// The weakly correlated group initialized from `c_s`, before any stage-two step.
pub fn transferred_group<F: Scalar>(
    data: &TrainData<F>,
    split: &GroupSplit<F>,
    c_s: &GroupModel<F>,
    cfg: &TrainConfig,
) -> Result<(GroupModel<F>, InitReport)> {
    if c_s.backbone_digest != data.backbone_digest {
        return Err(Error::config(format!(
            "strong-group model was trained on backbone {} but the data uses {}",
            c_s.backbone_digest, data.backbone_digest
        )));
    }
    let mut c_w = fresh_group(data, &split.weakly, cfg, "phase2")?;
    let init = init_from(c_s, &mut c_w)?;
    Ok((c_w, init))
}

/// Stage two: initialize from `c_s`, then train on the blended loss.
pub fn train_phase2<F: Scalar>(
    data: &TrainData<F>,
    split: &GroupSplit<F>,
    c_s: &GroupModel<F>,
    cfg: &TrainConfig,
) -> Result<Phase2Outcome<F>> {
    let (mut c_w, init) = transferred_group(data, split, c_s, cfg)?;
    let mut anchor_heads = c_s.heads.clone();
    let anchor = Anchor { heads: &mut anchor_heads, lambda: cfg.transfer.lambda, strong_heads: cfg.transfer.strong_heads_phase2 };
    let log = train_group(&mut c_w, data, cfg.transfer.epochs_phase2, cfg, "phase2", Some(anchor))?;
    Ok(Phase2Outcome { c_w, anchor_heads, log, init })
}

/// Single-seed result of the full curriculum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumReport {
    pub strongly: Vec<usize>,
    pub weakly: Vec<usize>,
    pub dependency: Vec<f64>,
    pub phase1: PhaseLog,
    pub phase2: PhaseLog,
    pub init: InitReport,
    /// Test metrics, strong tasks first.
    pub metrics: Vec<TaskMetrics>,
}

impl CurriculumReport {
    fn mean_of(&self, tasks: &[usize]) -> f64 {
        let v: Vec<f64> = self.metrics.iter().filter(|m| tasks.contains(&m.task)).map(|m| m.accuracy).collect();
        v.iter().sum::<f64>() / v.len() as f64
    }

    pub fn strongly_accuracy(&self) -> f64 {
        self.mean_of(&self.strongly)
    }

    pub fn weakly_accuracy(&self) -> f64 {
        self.mean_of(&self.weakly)
    }

    pub fn total_accuracy(&self) -> f64 {
        self.metrics.iter().map(|m| m.accuracy).sum::<f64>() / self.metrics.len() as f64
    }
}

/// Split, stage one, transfer, stage two, test evaluation.
pub fn run_cilicia<F: Scalar>(data: &TrainData<F>, cfg: &TrainConfig) -> Result<(GroupModel<F>, GroupModel<F>, CurriculumReport)> {
    let split = correlation_split::<F>(&data.fit_labels()?)?;
    run_with_split(data, &split, cfg)
}

/// The curriculum with a caller-supplied split.
pub fn run_with_split<F: Scalar>(
    data: &TrainData<F>,
    split: &GroupSplit<F>,
    cfg: &TrainConfig,
) -> Result<(GroupModel<F>, GroupModel<F>, CurriculumReport)> {
    let (mut c_s, phase1) = train_phase1(data, split, cfg)?;
    if let Some(dir) = &cfg.checkpoint_dir {
        let path = dir.join(format!("seed{}_phase1.json", cfg.seed));
        save_model(&c_s, &path)?;
        c_s = load_model(&path)?;
    }
    let outcome = train_phase2(data, split, &c_s, cfg)?;
    let mut metrics = evaluate(&c_s, data, &data.test)?;
    metrics.extend(evaluate(&outcome.c_w, data, &data.test)?);
    let report = CurriculumReport {
        strongly: split.strongly.clone(),
        weakly: split.weakly.clone(),
        dependency: split.dependency.p.iter().map(|v| v.widen()).collect(),
        phase1,
        phase2: outcome.log,
        init: outcome.init,
        metrics,
    };
    Ok((c_s, outcome.c_w, report))
}
