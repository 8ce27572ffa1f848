//! Learning regimes, multi-seed runs and their reports.
//!
//! Every regime sees the same fit/validation/test rows for a given seed, so
//! regimes are compared on paired splits. Output directory layout:
//!
//! ```text
//! table.csv                            one row per task plus group/total rows, columns per regime
//! convergence/<regime>/seed<s>_<phase>.csv
//! report.json                          full machine-readable comparison
//! config.toml                          resolved configuration
//! timing.csv                           wall-clock seconds per regime
//! ```
//!
//! Wall-clock time lives only in `timing.csv`, so `report.json` is a pure
//! function of configuration and seeds.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{DataSource, ExperimentConfig, Regime};
use crate::data::{generate_synthetic, load_dataset, Dataset};
use crate::error::{Error, Result};
use crate::labels::{correlation_split, total_dependency, GroupSplit};
use crate::model::{FrozenBackbone, InitReport};
use crate::scalar::Scalar;
use crate::trainer::{
    evaluate, fresh_group, run_with_split, stream, train_group, train_phase1, PhaseLog, TaskMetrics, TrainConfig,
    TrainData,
};

pub fn load_source<F: Scalar>(source: &DataSource) -> Result<Dataset<F>> {
    match source {
        DataSource::Files(files) => load_dataset(&files.features, &files.labels),
        DataSource::Synthetic(spec) => generate_synthetic(spec),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub strongly: Vec<usize>,
    pub weakly: Vec<usize>,
    pub init: Option<InitReport>,
    pub phases: Vec<PhaseLog>,
    /// Test metrics ordered by task index.
    pub metrics: Vec<TaskMetrics>,
}

impl SeedRun {
    pub fn total_accuracy(&self) -> f64 {
        self.metrics.iter().map(|m| m.accuracy).sum::<f64>() / self.metrics.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedFailure {
    pub seed: u64,
    pub exit_code: i32,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub task: usize,
    pub name: String,
    pub group: Option<String>,
    /// Test accuracy of every completed seed, in seed order.
    pub accuracy: Vec<f64>,
    pub accuracy_mean: Option<f64>,
    pub accuracy_std: Option<f64>,
    pub balanced_accuracy_mean: Option<f64>,
    pub balanced_accuracy_std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    /// Reference groups from the correlation split of the full label matrix.
    pub strongly: Vec<usize>,
    pub weakly: Vec<usize>,
    pub strongly_mean: Option<f64>,
    pub weakly_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub regime: Regime,
    pub seeds: Vec<u64>,
    pub tasks: Vec<TaskSummary>,
    pub groups: Option<GroupSummary>,
    pub total_mean: Option<f64>,
    pub runs: Vec<SeedRun>,
    pub failures: Vec<SeedFailure>,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl RunReport {
    /// Mean of the per-seed final training loss over the first epoch's, per phase.
    pub fn loss_ratios(&self) -> Vec<f64> {
        self.runs
            .iter()
            .flat_map(|r| &r.phases)
            .filter_map(|p| Some(p.final_loss()? / p.first_loss()?))
            .collect()
    }
}

/// Several regimes on the same data and seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub dataset_digest: String,
    pub task_names: Vec<String>,
    pub config: ExperimentConfig,
    pub reports: Vec<RunReport>,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Sample standard deviation; zero for a single value.
fn std_dev(v: &[f64]) -> Option<f64> {
    let m = mean(v)?;
    if v.len() < 2 {
        return Some(0.0);
    }
    Some((v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt())
}

fn mean_of_members(tasks: &[TaskSummary], members: &[usize]) -> Option<f64> {
    let v: Option<Vec<f64>> = members.iter().map(|&t| tasks[t].accuracy_mean).collect();
    mean(&v?)
}

fn train_config(cfg: &ExperimentConfig, seed: u64, checkpoints: Option<&Path>, regime: Regime) -> TrainConfig {
    TrainConfig {
        sgd: cfg.sgd.clone(),
        model: cfg.model.clone(),
        transfer: cfg.transfer.clone(),
        seed,
        checkpoint_dir: checkpoints.map(|d| d.join(regime.name())),
    }
}

fn random_split<F: Scalar>(data: &TrainData<F>, seed: u64) -> Result<GroupSplit<F>> {
    let reference = correlation_split::<F>(&data.fit_labels()?)?;
    let mut tasks: Vec<usize> = (0..data.labels.n_tasks()).collect();
    tasks.shuffle(&mut stream(seed, "random_split"));
    let weakly = tasks.split_off(reference.strongly.len());
    GroupSplit::with_groups(tasks, weakly, reference.dependency)
}

fn by_task(mut metrics: Vec<TaskMetrics>) -> Vec<TaskMetrics> {
    metrics.sort_by_key(|m| m.task);
    metrics
}

/// One regime on one seed's split.
pub fn run_seed<F: Scalar>(regime: Regime, data: &TrainData<F>, cfg: &TrainConfig) -> Result<SeedRun> {
    let n_tasks = data.labels.n_tasks();
    match regime {
        Regime::Individual => {
            let mut phases = Vec::with_capacity(n_tasks);
            let mut metrics = Vec::with_capacity(n_tasks);
            for t in 0..n_tasks {
                let tag = format!("task{t:02}");
                let mut model = fresh_group(data, &[t], cfg, &tag)?;
                phases.push(train_group(&mut model, data, cfg.transfer.epochs_phase1, cfg, &tag, None)?);
                metrics.extend(evaluate(&model, data, &data.test)?);
            }
            Ok(SeedRun { seed: cfg.seed, strongly: Vec::new(), weakly: Vec::new(), init: None, phases, metrics })
        }
        Regime::Multitask => {
            let tasks: Vec<usize> = (0..n_tasks).collect();
            let mut model = fresh_group(data, &tasks, cfg, "multitask")?;
            let log = train_group(&mut model, data, cfg.transfer.epochs_phase1, cfg, "multitask", None)?;
            let metrics = evaluate(&model, data, &data.test)?;
            Ok(SeedRun { seed: cfg.seed, strongly: Vec::new(), weakly: Vec::new(), init: None, phases: vec![log], metrics })
        }
        Regime::Cilicia | Regime::CiliciaRandomSplit => {
            let split = if regime == Regime::Cilicia {
                correlation_split::<F>(&data.fit_labels()?)?
            } else {
                random_split(data, cfg.seed)?
            };
            let (_, _, report) = run_with_split(data, &split, cfg)?;
            Ok(SeedRun {
                seed: cfg.seed,
                strongly: report.strongly,
                weakly: report.weakly,
                init: Some(report.init),
                phases: vec![report.phase1, report.phase2],
                metrics: by_task(report.metrics),
            })
        }
        Regime::CiliciaNoTransfer => {
            let split = correlation_split::<F>(&data.fit_labels()?)?;
            let (c_s, phase1) = train_phase1(data, &split, cfg)?;
            let mut c_w = fresh_group(data, &split.weakly, cfg, "phase2")?;
            let phase2 = train_group(&mut c_w, data, cfg.transfer.epochs_phase2, cfg, "phase2", None)?;
            let mut metrics = evaluate(&c_s, data, &data.test)?;
            metrics.extend(evaluate(&c_w, data, &data.test)?);
            Ok(SeedRun {
                seed: cfg.seed,
                strongly: split.strongly,
                weakly: split.weakly,
                init: None,
                phases: vec![phase1, phase2],
                metrics: by_task(metrics),
            })
        }
    }
}

/// Runs `regime` for every configured seed (in parallel) and summarizes.
/// Seeds that fail are listed in the report instead of aborting the others.
pub fn run_regime<F: Scalar>(
    regime: Regime,
    cfg: &ExperimentConfig,
    dataset: &Dataset<F>,
    checkpoints: Option<&Path>,
) -> Result<RunReport> {
    cfg.validate()?;
    let n_tasks = dataset.labels.n_tasks();
    if regime.is_curriculum() && n_tasks < 2 {
        return Err(Error::config(format!("regime {regime} needs at least 2 tasks, dataset has {n_tasks}")));
    }
    let started = Instant::now();
    let backbone = FrozenBackbone::precomputed(dataset.provenance.digest());
    let e = &cfg.experiment;
    let outcomes: Vec<(u64, Result<SeedRun>)> = e
        .seeds
        .par_iter()
        .map(|&seed| {
            let run = TrainData::prepare(dataset, &backbone, e.test_fraction, e.val_fraction, seed)
                .and_then(|data| run_seed(regime, &data, &train_config(cfg, seed, checkpoints, regime)));
            (seed, run)
        })
        .collect();

    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for (seed, outcome) in outcomes {
        match outcome {
            Ok(run) => runs.push(run),
            Err(err) => failures.push(SeedFailure { seed, exit_code: err.exit_code(), message: err.to_string() }),
        }
    }

    let reference = if n_tasks >= 2 { Some(correlation_split::<F>(&dataset.labels)?) } else { None };
    let group_of = |t: usize| {
        reference.as_ref().map(|s| if s.strongly.contains(&t) { "strongly".to_owned() } else { "weakly".to_owned() })
    };
    let tasks: Vec<TaskSummary> = (0..n_tasks)
        .map(|t| {
            let acc: Vec<f64> = runs.iter().map(|r| r.metrics[t].accuracy).collect();
            let bal: Vec<f64> = runs.iter().map(|r| r.metrics[t].balanced_accuracy).collect();
            TaskSummary {
                task: t,
                name: dataset.labels.task_name(t).to_owned(),
                group: group_of(t),
                accuracy_mean: mean(&acc),
                accuracy_std: std_dev(&acc),
                balanced_accuracy_mean: mean(&bal),
                balanced_accuracy_std: std_dev(&bal),
                accuracy: acc,
            }
        })
        .collect();
    let groups = reference.map(|s| GroupSummary {
        strongly_mean: mean_of_members(&tasks, &s.strongly),
        weakly_mean: mean_of_members(&tasks, &s.weakly),
        strongly: s.strongly,
        weakly: s.weakly,
    });
    let total_mean = mean_of_members(&tasks, &(0..n_tasks).collect::<Vec<_>>());
    Ok(RunReport {
        regime,
        seeds: e.seeds.clone(),
        tasks,
        groups,
        total_mean,
        runs,
        failures,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

/// Every configured regime on the configured data source.
pub fn compare<F: Scalar>(cfg: &ExperimentConfig, checkpoints: Option<&Path>) -> Result<Comparison> {
    cfg.validate()?;
    let dataset: Dataset<F> = load_source(&cfg.source()?)?;
    compare_on(cfg, &dataset, checkpoints)
}

pub fn compare_on<F: Scalar>(cfg: &ExperimentConfig, dataset: &Dataset<F>, checkpoints: Option<&Path>) -> Result<Comparison> {
    let reports = cfg
        .experiment
        .regimes
        .iter()
        .map(|&r| run_regime(r, cfg, dataset, checkpoints))
        .collect::<Result<Vec<_>>>()?;
    Ok(Comparison {
        dataset_digest: dataset.provenance.digest().to_owned(),
        task_names: dataset.labels.task_names().to_vec(),
        config: cfg.clone(),
        reports,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

fn write_table(cmp: &Comparison, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec!["row".to_owned(), "group".to_owned()];
    for r in &cmp.reports {
        for col in ["accuracy_mean", "accuracy_std", "balanced_accuracy_mean", "balanced_accuracy_std"] {
            header.push(format!("{}_{col}", r.regime));
        }
    }
    let mut rows = vec![header];
    for (t, name) in cmp.task_names.iter().enumerate() {
        let group = cmp.reports.first().and_then(|r| r.tasks[t].group.clone()).unwrap_or_default();
        let mut row = vec![name.clone(), group];
        for r in &cmp.reports {
            let s = &r.tasks[t];
            row.extend([s.accuracy_mean, s.accuracy_std, s.balanced_accuracy_mean, s.balanced_accuracy_std].map(cell));
        }
        rows.push(row);
    }
    let summary = |label: &str, pick: &dyn Fn(&RunReport) -> Option<f64>| {
        let mut row = vec![label.to_owned(), String::new()];
        for r in &cmp.reports {
            row.extend([cell(pick(r)), String::new(), String::new(), String::new()]);
        }
        row
    };
    if cmp.task_names.len() >= 2 {
        rows.push(summary("strongly_correlated", &|r| r.groups.as_ref().and_then(|g| g.strongly_mean)));
        rows.push(summary("weakly_correlated", &|r| r.groups.as_ref().and_then(|g| g.weakly_mean)));
        rows.push(summary("total_average", &|r| r.total_mean));
    }
    for row in rows {
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_convergence(log: &PhaseLog, names: &[String], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header: Vec<String> =
        ["epoch", "lr", "loss", "group_loss", "anchor_loss", "val_loss"].iter().map(|s| s.to_string()).collect();
    header.extend(log.task_ids.iter().map(|&t| format!("train_acc_{}", names[t])));
    header.extend(log.task_ids.iter().map(|&t| format!("val_acc_{}", names[t])));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for r in &log.records {
        let mut row =
            vec![r.epoch.to_string(), r.lr.to_string(), r.loss.to_string(), r.group_loss.to_string(), cell(r.anchor_loss), cell(r.val_loss)];
        row.extend(r.train_accuracy.iter().map(f64::to_string));
        row.extend(r.val_accuracy.iter().map(f64::to_string));
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes the table, convergence series, JSON report, config and timings into `out`.
pub fn emit_comparison(cmp: &Comparison, out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_table(cmp, &out.join("table.csv"))?;
    for r in &cmp.reports {
        let dir = out.join("convergence").join(r.regime.name());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for run in &r.runs {
            for log in &run.phases {
                write_convergence(log, &cmp.task_names, &dir.join(format!("seed{}_{}.csv", run.seed, log.phase)))?;
            }
        }
    }
    let json = serde_json::to_string_pretty(cmp).expect("report serializes");
    write_file(&out.join("report.json"), &(json + "\n"))?;
    write_file(&out.join("config.toml"), &cmp.config.to_toml())?;
    let mut timing = String::from("regime,wall_clock_seconds\n");
    for r in &cmp.reports {
        timing.push_str(&format!("{},{}\n", r.regime, r.wall_clock_secs));
    }
    write_file(&out.join("timing.csv"), &timing)
}

/// A single-regime report, emitted in the comparison layout.
pub fn emit_report<F: Scalar>(report: &RunReport, cfg: &ExperimentConfig, dataset: &Dataset<F>, out: &Path) -> Result<()> {
    let cmp = Comparison {
        dataset_digest: dataset.provenance.digest().to_owned(),
        task_names: dataset.labels.task_names().to_vec(),
        config: cfg.clone(),
        reports: vec![report.clone()],
    };
    emit_comparison(&cmp, out)
}

/// Dependency vector and groups of a label file, as printed by `split`.
pub fn describe_split(labels: &crate::labels::LabelMatrix) -> Result<String> {
    let dep = total_dependency::<f64>(labels)?;
    let split = correlation_split::<f64>(labels)?;
    let p: Vec<String> = dep.p.iter().map(|v| format!("{:.1}", (v * 10.0).round() / 10.0 + 0.0)).collect();
    let list = |g: &[usize]| g.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
    let names = |g: &[usize]| g.iter().map(|&t| labels.task_name(t)).collect::<Vec<_>>().join(",");
    let mut out = format!("p = [{}]\n", p.join(", "));
    out.push_str(&format!("strongly = {{{}}} ({})\n", list(&split.strongly), names(&split.strongly)));
    out.push_str(&format!("weakly = {{{}}} ({})\n", list(&split.weakly), names(&split.weakly)));
    for w in &dep.warnings {
        out.push_str(&format!("warning: {w}\n"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_std() {
        assert_eq!(std_dev(&[]), None);
        assert_eq!(std_dev(&[0.7]), Some(0.0));
        assert!((std_dev(&[1.0, 2.0, 3.0]).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn split_description_for_three_tasks() {
        let labels = crate::labels::LabelMatrix::from_columns(
            vec!["a".into(), "b".into(), "c".into()],
            &[vec![0, 1, 0, 1], vec![0, 1, 0, 1], vec![0, 0, 1, 1]],
        )
        .unwrap();
        let text = describe_split(&labels).unwrap();
        assert!(text.starts_with("p = [1.0, 1.0, 0.0]\n"), "{text}");
        assert!(text.contains("strongly = {0,1}"));
        assert!(text.contains("weakly = {2}"));
    }
}
