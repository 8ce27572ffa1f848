//! Dataset ingestion, synthetic generation, stratified splitting and per-task
//! class-balance weights.
//!
//! # File formats
//!
//! Features: comma-separated text with a header. The first column is `index`
//! (any unique string); the remaining columns are real-valued features.
//!
//! Labels: comma-separated text with a header `index,<task>,<task>,...`. Cells
//! are class indices `0..M_t`, or class names when a task-metadata sidecar is
//! present. Rows are matched to feature rows by `index`, in label-file order.
//!
//! Task metadata sidecar: `<labels stem>.tasks.csv` next to the labels file,
//! header `task,classes`, one row per task with `|`-separated class names in
//! index order. It fixes each task's class count; without it the count is
//! inferred as `max index + 1`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DataError, Error, Result};
use crate::labels::LabelMatrix;
use crate::nn::{balanced_weights, BalancedLossSpec};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// N×D frozen-backbone feature vectors, row-aligned with a [`LabelMatrix`].
pub type FeatureMatrix<F> = Matrix<F>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Files { features: String, labels: String, digest: String },
    Synthetic { spec: SynthSpec, digest: String },
}

impl Provenance {
    pub fn digest(&self) -> &str {
        match self {
            Provenance::Files { digest, .. } | Provenance::Synthetic { digest, .. } => digest,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<F> {
    pub sample_ids: Vec<String>,
    pub feature_names: Vec<String>,
    pub features: FeatureMatrix<F>,
    pub labels: LabelMatrix,
    /// Class names per task, index-aligned with class indices.
    pub class_names: Vec<Vec<String>>,
    pub provenance: Provenance,
}

impl<F: Scalar> Dataset<F> {
    pub fn n_samples(&self) -> usize {
        self.labels.n_samples()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    /// Writes `features.csv`, `labels.csv` and `labels.tasks.csv` into `dir`.
    pub fn write_csv(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let fpath = dir.join("features.csv");
        let lpath = dir.join("labels.csv");
        let mpath = dir.join("labels.tasks.csv");

        let mut out = String::from("index");
        for name in &self.feature_names {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for (i, id) in self.sample_ids.iter().enumerate() {
            out.push_str(id);
            for v in self.features.row(i) {
                out.push(',');
                out.push_str(&v.widen().to_string());
            }
            out.push('\n');
        }
        fs::write(&fpath, out).map_err(|e| Error::io(&fpath, e))?;

        let mut out = String::from("index");
        for name in self.labels.task_names() {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for (i, id) in self.sample_ids.iter().enumerate() {
            out.push_str(id);
            for y in self.labels.row(i) {
                out.push(',');
                out.push_str(&y.to_string());
            }
            out.push('\n');
        }
        fs::write(&lpath, out).map_err(|e| Error::io(&lpath, e))?;

        let mut out = String::from("task,classes\n");
        for (name, classes) in self.labels.task_names().iter().zip(&self.class_names) {
            out.push_str(&format!("{name},{}\n", classes.join("|")));
        }
        fs::write(&mpath, out).map_err(|e| Error::io(&mpath, e))?;
        Ok((fpath, lpath))
    }
}

/// Location of the task-metadata sidecar for a labels file.
pub fn sidecar_path(labels: &Path) -> PathBuf {
    let stem = labels.file_stem().and_then(|s| s.to_str()).unwrap_or("labels");
    labels.with_file_name(format!("{stem}.tasks.csv"))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn malformed(path: &Path, message: impl Into<String>) -> Error {
    DataError::Malformed { path: path.display().to_string(), message: message.into() }.into()
}

fn parse_table(path: &Path, bytes: &[u8]) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(bytes);
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| malformed(path, e.to_string()))?
        .iter()
        .map(|s| s.trim().to_owned())
        .collect();
    if header.first().map(String::as_str) != Some("index") {
        return Err(malformed(path, "first header column must be 'index'"));
    }
    let mut rows = Vec::new();
    for (r, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| malformed(path, e.to_string()))?;
        let mut cells: Vec<String> = rec.iter().map(|s| s.trim().to_owned()).collect();
        if cells.len() > header.len() {
            return Err(malformed(path, format!("row {} has {} cells, header has {}", r + 1, cells.len(), header.len())));
        }
        cells.resize(header.len(), String::new());
        rows.push(cells);
    }
    Ok((header, rows))
}

fn index_rows(path: &Path, rows: &[Vec<String>]) -> Result<HashMap<String, usize>> {
    let mut seen = HashMap::with_capacity(rows.len());
    for (r, row) in rows.iter().enumerate() {
        let id = &row[0];
        if id.is_empty() {
            return Err(DataError::MissingCell { path: path.display().to_string(), row: r + 1, column: "index".into() }.into());
        }
        if seen.insert(id.clone(), r).is_some() {
            return Err(DataError::DuplicateIndex { path: path.display().to_string(), row: r + 1, index: id.clone() }.into());
        }
    }
    Ok(seen)
}

fn read_sidecar(path: &Path) -> Result<Option<(Vec<u8>, HashMap<String, Vec<String>>)>> {
    if !path.exists() {
        return Ok(None);
    }
    let bytes = read_bytes(path)?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes.as_slice());
    let mut map = HashMap::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| malformed(path, e.to_string()))?;
        let task = rec.get(0).unwrap_or("").trim().to_owned();
        let classes: Vec<String> = rec.get(1).unwrap_or("").split('|').map(|s| s.trim().to_owned()).collect();
        if task.is_empty() || classes.len() < 2 || classes.iter().any(String::is_empty) {
            return Err(malformed(path, format!("task '{task}' needs at least two named classes")));
        }
        map.insert(task, classes);
    }
    Ok(Some((bytes, map)))
}

type ClassNames = Vec<Vec<String>>;

fn parse_labels(
    label_path: &Path,
    lheader: &[String],
    lrows: &[Vec<String>],
    sidecar: Option<&HashMap<String, Vec<String>>>,
) -> Result<(LabelMatrix, ClassNames)> {
    let lpath_s = label_path.display().to_string();
    let tasks: Vec<String> = lheader[1..].to_vec();
    let class_names: Vec<Option<Vec<String>>> = tasks
        .iter()
        .map(|t| sidecar.and_then(|m| m.get(t).cloned()))
        .collect();
    if let Some(m) = sidecar {
        if let Some(t) = tasks.iter().find(|t| !m.contains_key(*t)) {
            return Err(malformed(&sidecar_path(label_path), format!("no entry for task '{t}'")));
        }
    }
    let mut labels = Vec::with_capacity(lrows.len() * tasks.len());
    for (r, lrow) in lrows.iter().enumerate() {
        for (t, cell) in lrow.iter().enumerate().skip(1) {
            let task = &tasks[t - 1];
            if cell.is_empty() {
                return Err(DataError::MissingCell { path: lpath_s.clone(), row: r + 1, column: task.clone() }.into());
            }
            let unknown = || DataError::UnknownClass { path: lpath_s.clone(), row: r + 1, task: task.clone(), value: cell.clone() };
            let y = match &class_names[t - 1] {
                Some(names) => match cell.parse::<usize>() {
                    Ok(i) if i < names.len() => i,
                    Ok(_) => return Err(unknown().into()),
                    Err(_) => names.iter().position(|n| n == cell).ok_or_else(unknown)?,
                },
                None => cell.parse::<usize>().map_err(|_| unknown())?,
            };
            labels.push(y);
        }
    }
    let num_classes = if sidecar.is_some() {
        Some(class_names.iter().map(|c| c.as_ref().map_or(0, Vec::len)).collect())
    } else {
        None
    };
    let labels = LabelMatrix::new(tasks, labels, num_classes)?;
    let names = (0..labels.n_tasks())
        .map(|t| class_names[t].clone().unwrap_or_else(|| (0..labels.num_classes(t)).map(|c| c.to_string()).collect()))
        .collect();
    Ok((labels, names))
}

/// Reads a label file (plus optional sidecar) on its own.
pub fn load_labels(label_path: &Path) -> Result<LabelMatrix> {
    let lbytes = read_bytes(label_path)?;
    let sidecar = read_sidecar(&sidecar_path(label_path))?;
    let (lheader, lrows) = parse_table(label_path, &lbytes)?;
    if lheader.len() < 2 {
        return Err(malformed(label_path, "no task columns"));
    }
    index_rows(label_path, &lrows)?;
    Ok(parse_labels(label_path, &lheader, &lrows, sidecar.as_ref().map(|(_, m)| m))?.0)
}

/// Reads and validates a feature file and a label file (plus optional sidecar).
pub fn load_dataset<F: Scalar>(feature_path: &Path, label_path: &Path) -> Result<Dataset<F>> {
    let fbytes = read_bytes(feature_path)?;
    let lbytes = read_bytes(label_path)?;
    let meta_path = sidecar_path(label_path);
    let sidecar = read_sidecar(&meta_path)?;

    let (fheader, frows) = parse_table(feature_path, &fbytes)?;
    let (lheader, lrows) = parse_table(label_path, &lbytes)?;
    if fheader.len() < 2 {
        return Err(malformed(feature_path, "no feature columns"));
    }
    if lheader.len() < 2 {
        return Err(malformed(label_path, "no task columns"));
    }
    let fidx = index_rows(feature_path, &frows)?;
    index_rows(label_path, &lrows)?;
    if frows.len() != lrows.len() {
        return Err(DataError::RowCountMismatch { features: frows.len(), labels: lrows.len() }.into());
    }

    let fpath_s = feature_path.display().to_string();
    let lpath_s = label_path.display().to_string();
    let dim = fheader.len() - 1;
    let mut data = Vec::with_capacity(frows.len() * dim);
    let mut sample_ids = Vec::with_capacity(lrows.len());
    for lrow in &lrows {
        let r = *fidx.get(&lrow[0]).ok_or_else(|| DataError::UnmatchedIndex { index: lrow[0].clone() })?;
        for (c, cell) in frows[r].iter().enumerate().skip(1) {
            if cell.is_empty() {
                return Err(DataError::MissingCell { path: fpath_s.clone(), row: r + 1, column: fheader[c].clone() }.into());
            }
            let v: f64 = cell.parse().map_err(|_| DataError::NonNumeric {
                path: fpath_s.clone(),
                row: r + 1,
                column: fheader[c].clone(),
                value: cell.clone(),
            })?;
            if !v.is_finite() {
                return Err(DataError::NonNumeric { path: fpath_s.clone(), row: r + 1, column: fheader[c].clone(), value: cell.clone() }.into());
            }
            data.push(F::lit(v));
        }
        sample_ids.push(lrow[0].clone());
    }

    let (labels, class_names) = parse_labels(label_path, &lheader, &lrows, sidecar.as_ref().map(|(_, m)| m))?;

    let mut h = Sha256::new();
    h.update(b"features\0");
    h.update(&fbytes);
    h.update(b"\0labels\0");
    h.update(&lbytes);
    if let Some((b, _)) = &sidecar {
        h.update(b"\0tasks\0");
        h.update(b);
    }
    let digest = hex::encode(h.finalize());

    Ok(Dataset {
        sample_ids,
        feature_names: fheader[1..].to_vec(),
        features: Matrix::new(lrows.len(), dim, data)?,
        labels,
        class_names,
        provenance: Provenance::Files { features: fpath_s, labels: lpath_s, digest },
    })
}

/// Synthetic dataset with planted correlation clusters among binary tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_samples: usize,
    pub n_tasks: usize,
    /// Cluster index of every task.
    pub cluster_assignment: Vec<usize>,
    /// Target label correlation between two tasks of the same cluster.
    pub intra_correlation: Vec<f64>,
    /// Total latent dimensions; at least clusters + tasks.
    pub latent_dim: usize,
    /// Probability of flipping each binary label.
    pub label_noise: f64,
    /// Standard deviation of additive Gaussian feature noise.
    pub feature_noise: f64,
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    pub seed: u64,
}

fn default_feature_dim() -> usize {
    128
}

impl SynthSpec {
    /// Two clusters with tasks assigned alternately (0, 1, 0, 1, ...).
    pub fn two_clusters(n_samples: usize, n_tasks: usize, rho: (f64, f64), seed: u64) -> Self {
        Self {
            n_samples,
            n_tasks,
            cluster_assignment: (0..n_tasks).map(|t| t % 2).collect(),
            intra_correlation: vec![rho.0, rho.1],
            latent_dim: 2 + n_tasks + 4,
            label_noise: 0.0,
            feature_noise: 0.05,
            feature_dim: default_feature_dim(),
            seed,
        }
    }

    pub fn n_clusters(&self) -> usize {
        self.intra_correlation.len()
    }

    /// Correlation of the latent Gaussian scores that, after thresholding at
    /// zero and independent flips, yields the requested label correlation.
    ///
    /// Thresholded standard bivariate normals with correlation `a` have label
    /// correlation `(2/π)·asin(a)`; flipping each label with probability `q`
    /// scales a balanced pair's covariance by `(1 − 2q)²`.
    pub fn latent_correlation(&self, cluster: usize) -> Result<f64> {
        let rho = self.intra_correlation[cluster];
        let attenuation = (1.0 - 2.0 * self.label_noise).powi(2);
        let needed = rho / attenuation;
        if needed >= 1.0 {
            return Err(Error::config(format!(
                "cluster {cluster}: correlation {rho} unreachable with label noise {}",
                self.label_noise
            )));
        }
        Ok((std::f64::consts::FRAC_PI_2 * needed).sin())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if self.n_samples < 2 || self.n_tasks < 1 {
            return bad(format!("need ≥2 samples and ≥1 task, got {} / {}", self.n_samples, self.n_tasks));
        }
        if self.cluster_assignment.len() != self.n_tasks {
            return bad("cluster_assignment must list one cluster per task".into());
        }
        if let Some(&c) = self.cluster_assignment.iter().find(|&&c| c >= self.n_clusters()) {
            return bad(format!("task assigned to cluster {c} without a correlation target"));
        }
        if let Some(r) = self.intra_correlation.iter().find(|r| !(0.0..1.0).contains(*r)) {
            return bad(format!("cluster correlation {r} outside [0, 1)"));
        }
        if !(0.0..0.5).contains(&self.label_noise) {
            return bad(format!("label noise {} outside [0, 0.5)", self.label_noise));
        }
        if !(self.feature_noise >= 0.0) || self.feature_dim == 0 {
            return bad("feature noise must be ≥ 0 and feature_dim > 0".into());
        }
        if self.latent_dim < self.n_clusters() + self.n_tasks {
            return bad(format!("latent_dim {} below clusters + tasks = {}", self.latent_dim, self.n_clusters() + self.n_tasks));
        }
        for c in 0..self.n_clusters() {
            self.latent_correlation(c)?;
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        let mut h = Sha256::new();
        h.update(b"synthetic\0");
        h.update(&json);
        hex::encode(h.finalize())
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Latent layout: one shared factor per cluster, one private factor per task,
/// then nuisance factors. Task `t` in cluster `c` thresholds
/// `sqrt(a_c)·z_c + sqrt(1 − a_c)·z_{private t}` at zero. Features are
/// `tanh(W·z / sqrt(L))` plus Gaussian noise, with `W` drawn once from the seed.
pub fn generate_synthetic<F: Scalar>(spec: &SynthSpec) -> Result<Dataset<F>> {
    spec.validate()?;
    let k = spec.n_clusters();
    let l = spec.latent_dim;
    let mixing: Vec<f64> = (0..k).map(|c| spec.latent_correlation(c)).collect::<Result<_>>()?;

    let mut proj_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    proj_rng.set_stream(1);
    let projection: Vec<f64> = (0..spec.feature_dim * l).map(|_| normal(&mut proj_rng)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(2);

    let n = spec.n_samples;
    let t = spec.n_tasks;
    let scale = 1.0 / (l as f64).sqrt();
    let mut features = Vec::with_capacity(n * spec.feature_dim);
    let mut labels = Vec::with_capacity(n * t);
    let mut z = vec![0.0; l];
    for _ in 0..n {
        for v in z.iter_mut() {
            *v = normal(&mut rng);
        }
        for task in 0..t {
            let c = spec.cluster_assignment[task];
            let a = mixing[c];
            let score = a.sqrt() * z[c] + (1.0 - a).sqrt() * z[k + task];
            let mut y = usize::from(score > 0.0);
            if spec.label_noise > 0.0 && rng.random::<f64>() < spec.label_noise {
                y = 1 - y;
            }
            labels.push(y);
        }
        for d in 0..spec.feature_dim {
            let w = &projection[d * l..(d + 1) * l];
            let pre: f64 = w.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>() * scale;
            let noise = if spec.feature_noise > 0.0 { spec.feature_noise * normal(&mut rng) } else { 0.0 };
            features.push(F::lit(pre.tanh() + noise));
        }
    }
    let task_names: Vec<String> = (0..t).map(|i| format!("task{i:02}")).collect();
    let labels = LabelMatrix::new(task_names, labels, Some(vec![2; t]))?;
    Ok(Dataset {
        sample_ids: (0..n).map(|i| i.to_string()).collect(),
        feature_names: (0..spec.feature_dim).map(|d| format!("f{d}")).collect(),
        features: Matrix::new(n, spec.feature_dim, features)?,
        labels,
        class_names: vec![vec!["neg".into(), "pos".into()]; t],
        provenance: Provenance::Synthetic { spec: spec.clone(), digest: spec.digest() },
    })
}

/// Row indices of a two-way partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Partitions `rows` so that the joint label pattern is spread proportionally.
///
/// Rows are grouped by their full label vector, shuffled within each group,
/// laid out group by group, and every `1/test_fraction`-th position (with a
/// random phase) goes to the test side. Afterwards any class missing from the
/// training side is moved back from the test side.
pub fn stratified_split(labels: &LabelMatrix, rows: &[usize], test_fraction: f64, seed: u64) -> Result<RowSplit> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::config(format!("test fraction {test_fraction} outside (0, 1)")));
    }
    for task in 0..labels.n_tasks() {
        let mut counts = vec![0usize; labels.num_classes(task)];
        for &r in rows {
            counts[labels.get(r, task)] += 1;
        }
        if let Some((class, &count)) = counts.iter().enumerate().find(|(_, &c)| c == 1) {
            return Err(DataError::TooRareToStratify { task: labels.task_name(task).to_owned(), class, count }.into());
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups: BTreeMap<&[usize], Vec<usize>> = BTreeMap::new();
    for &r in rows {
        groups.entry(labels.row(r)).or_default().push(r);
    }
    let mut layout = Vec::with_capacity(rows.len());
    for g in groups.values_mut() {
        g.shuffle(&mut rng);
        layout.extend_from_slice(g);
    }
    let phase: f64 = rng.random();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (k, &r) in layout.iter().enumerate() {
        let before = (k as f64 * test_fraction + phase).floor();
        let after = ((k + 1) as f64 * test_fraction + phase).floor();
        if after > before {
            test.push(r);
        } else {
            train.push(r);
        }
    }
    for task in 0..labels.n_tasks() {
        let present: HashSet<usize> = train.iter().map(|&r| labels.get(r, task)).collect();
        for class in 0..labels.num_classes(task) {
            if present.contains(&class) {
                continue;
            }
            if let Some(pos) = test.iter().position(|&r| labels.get(r, task) == class) {
                train.push(test.remove(pos));
            }
        }
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(RowSplit { train, test })
}

/// One class-balance spec per task from training labels only.
pub fn balance_specs<F: Scalar>(train_labels: &LabelMatrix) -> Result<Vec<BalancedLossSpec<F>>> {
    (0..train_labels.n_tasks())
        .map(|t| {
            let counts = train_labels.class_counts(t);
            if counts.iter().filter(|&&c| c > 0).count() < 2 {
                return Err(DataError::SingleClass { task: train_labels.task_name(t).to_owned() }.into());
            }
            balanced_weights(train_labels.task_name(t), counts)
        })
        .collect()
}
