//! Task-label statistics: pairwise Pearson coefficients between label columns,
//! the per-task total dependency, and the strongly/weakly correlated split.
//!
//! Labels enter the coefficient as their raw integer class indices. Covariance
//! and standard deviation both use 1/N normalization. A task whose labels never
//! vary has no defined coefficient; it is assigned 0 against every other task and
//! reported through [`AnalysisWarning::ZeroVariance`].

use serde::{Deserialize, Serialize};

use crate::error::{DataError, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// N×T matrix of class indices plus per-task class bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelMatrix {
    n: usize,
    task_names: Vec<String>,
    /// Row-major N×T.
    labels: Vec<usize>,
    class_counts: Vec<Vec<usize>>,
}

impl LabelMatrix {
    /// Builds from row-major labels. `num_classes` fixes M_t per task; when `None`
    /// it is inferred as `max label + 1` (at least 2).
    pub fn new(
        task_names: Vec<String>,
        labels: Vec<usize>,
        num_classes: Option<Vec<usize>>,
    ) -> Result<Self> {
        let t = task_names.len();
        if t == 0 {
            return Err(DataError::Invalid("label matrix needs at least one task".into()).into());
        }
        if !labels.len().is_multiple_of(t) {
            return Err(Error::shape(format!("{} labels do not divide into {t} tasks", labels.len())));
        }
        let n = labels.len() / t;
        if n < 2 {
            return Err(DataError::Invalid(format!("label matrix needs at least 2 samples, got {n}")).into());
        }
        let classes = match num_classes {
            Some(c) => {
                if c.len() != t {
                    return Err(Error::shape(format!("{} class counts for {t} tasks", c.len())));
                }
                c
            }
            None => (0..t)
                .map(|j| (0..n).map(|i| labels[i * t + j]).max().unwrap_or(0).max(1) + 1)
                .collect(),
        };
        let mut class_counts: Vec<Vec<usize>> = classes.iter().map(|&m| vec![0; m]).collect();
        for i in 0..n {
            for j in 0..t {
                let y = labels[i * t + j];
                let m = classes[j];
                if y >= m {
                    return Err(DataError::LabelOutOfRange { task: task_names[j].clone(), label: y, classes: m }.into());
                }
                class_counts[j][y] += 1;
            }
        }
        Ok(Self { n, task_names, labels, class_counts })
    }

    /// Column-major convenience: one vector per task.
    pub fn from_columns(task_names: Vec<String>, columns: &[Vec<usize>]) -> Result<Self> {
        if columns.len() != task_names.len() {
            return Err(Error::shape("column count differs from task name count"));
        }
        let n = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != n) {
            return Err(Error::shape("label columns differ in length"));
        }
        let t = columns.len();
        let mut labels = vec![0; n * t];
        for (j, col) in columns.iter().enumerate() {
            for (i, &y) in col.iter().enumerate() {
                labels[i * t + j] = y;
            }
        }
        Self::new(task_names, labels, None)
    }

    pub fn n_samples(&self) -> usize {
        self.n
    }

    pub fn n_tasks(&self) -> usize {
        self.task_names.len()
    }

    pub fn task_names(&self) -> &[String] {
        &self.task_names
    }

    pub fn task_name(&self, task: usize) -> &str {
        &self.task_names[task]
    }

    #[inline]
    pub fn get(&self, sample: usize, task: usize) -> usize {
        self.labels[sample * self.n_tasks() + task]
    }

    pub fn column(&self, task: usize) -> Vec<usize> {
        (0..self.n).map(|i| self.get(i, task)).collect()
    }

    pub fn row(&self, sample: usize) -> &[usize] {
        let t = self.n_tasks();
        &self.labels[sample * t..(sample + 1) * t]
    }

    pub fn num_classes(&self, task: usize) -> usize {
        self.class_counts[task].len()
    }

    pub fn class_counts(&self, task: usize) -> &[usize] {
        &self.class_counts[task]
    }

    pub fn all_class_counts(&self) -> &[Vec<usize>] {
        &self.class_counts
    }

    /// Sub-matrix over the given sample rows, keeping every task's class count.
    pub fn subset_rows(&self, rows: &[usize]) -> Result<Self> {
        let t = self.n_tasks();
        let mut labels = Vec::with_capacity(rows.len() * t);
        for &r in rows {
            labels.extend_from_slice(self.row(r));
        }
        let classes = self.class_counts.iter().map(Vec::len).collect();
        Self::new(self.task_names.clone(), labels, Some(classes))
    }

    /// Sub-matrix over the given tasks, in the given order.
    pub fn select_tasks(&self, tasks: &[usize]) -> Result<Self> {
        let names = tasks.iter().map(|&j| self.task_names[j].clone()).collect();
        let mut labels = Vec::with_capacity(self.n * tasks.len());
        for i in 0..self.n {
            for &j in tasks {
                labels.push(self.get(i, j));
            }
        }
        let classes = tasks.iter().map(|&j| self.num_classes(j)).collect();
        Self::new(names, labels, Some(classes))
    }

    pub fn is_constant(&self, task: usize) -> bool {
        let first = self.get(0, task);
        (1..self.n).all(|i| self.get(i, task) == first)
    }
}

/// Structured notices produced while analysing labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnalysisWarning {
    /// The task has a single observed class, so its standard deviation is zero.
    ZeroVariance { task: usize, name: String },
}

impl std::fmt::Display for AnalysisWarning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AnalysisWarning::ZeroVariance { task, name } => {
                write!(f, "task {task} ({name}) has a single class; its correlations are set to 0")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix<F> {
    pub coefficients: Matrix<F>,
    pub warnings: Vec<AnalysisWarning>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DependencyVector<F> {
    pub p: Vec<F>,
    /// Task indices sorted by descending `p`, ties by ascending index.
    pub order: Vec<usize>,
    pub warnings: Vec<AnalysisWarning>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSplit<F> {
    pub strongly: Vec<usize>,
    pub weakly: Vec<usize>,
    pub dependency: DependencyVector<F>,
}

impl<F: Scalar> GroupSplit<F> {
    /// Splits with the given (already ordered) groups, bypassing correlation.
    /// Used by the random-partition ablation.
    pub fn with_groups(strongly: Vec<usize>, weakly: Vec<usize>, dependency: DependencyVector<F>) -> Result<Self> {
        let t = dependency.p.len();
        let mut seen = vec![false; t];
        for &i in strongly.iter().chain(&weakly) {
            if i >= t || seen[i] {
                return Err(Error::config(format!("task {i} repeated or out of range in group split")));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) || strongly.is_empty() || weakly.is_empty() {
            return Err(Error::config("group split must be a partition into two nonempty groups"));
        }
        Ok(Self { strongly, weakly, dependency })
    }
}

fn require_tasks(labels: &LabelMatrix) -> Result<()> {
    if labels.n_tasks() < 2 {
        return Err(Error::config(format!(
            "task grouping needs at least 2 tasks, got {}",
            labels.n_tasks()
        )));
    }
    Ok(())
}

/// Pairwise Pearson coefficients between task label columns.
pub fn pearson_matrix<F: Scalar>(labels: &LabelMatrix) -> CorrelationMatrix<F> {
    let n = labels.n_samples();
    let t = labels.n_tasks();
    let inv_n = F::one() / F::from_count(n);

    let mut centered: Vec<Vec<F>> = Vec::with_capacity(t);
    let mut sd: Vec<F> = Vec::with_capacity(t);
    let mut warnings = Vec::new();
    for j in 0..t {
        let col: Vec<F> = (0..n).map(|i| F::from_count(labels.get(i, j))).collect();
        let mean = col.iter().copied().sum::<F>() * inv_n;
        let c: Vec<F> = col.iter().map(|&y| y - mean).collect();
        let var = c.iter().map(|&d| d * d).sum::<F>() * inv_n;
        if labels.is_constant(j) {
            warnings.push(AnalysisWarning::ZeroVariance { task: j, name: labels.task_name(j).to_owned() });
            sd.push(F::zero());
        } else {
            sd.push(var.sqrt());
        }
        centered.push(c);
    }

    let mut m = Matrix::zeros(t, t);
    for i in 0..t {
        if sd[i] > F::zero() {
            m.set(i, i, F::one());
        }
        for j in (i + 1)..t {
            let r = if sd[i] > F::zero() && sd[j] > F::zero() {
                let cov = centered[i].iter().zip(&centered[j]).map(|(&a, &b)| a * b).sum::<F>() * inv_n;
                (cov / (sd[i] * sd[j])).max(-F::one()).min(F::one())
            } else {
                F::zero()
            };
            m.set(i, j, r);
            m.set(j, i, r);
        }
    }
    CorrelationMatrix { coefficients: m, warnings }
}

/// Sum of each task's coefficients against every other task, with the descending order.
pub fn total_dependency<F: Scalar>(labels: &LabelMatrix) -> Result<DependencyVector<F>> {
    require_tasks(labels)?;
    let corr = pearson_matrix::<F>(labels);
    let t = labels.n_tasks();
    let p: Vec<F> = (0..t)
        .map(|i| {
            (0..t)
                .filter(|&j| j != i)
                .map(|j| corr.coefficients.get(i, j))
                .fold(F::zero(), |a, b| a + b)
        })
        .collect();
    let order = descending_order(&p);
    Ok(DependencyVector { p, order, warnings: corr.warnings })
}

fn descending_order<F: Scalar>(p: &[F]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| {
        p[b].partial_cmp(&p[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    order
}

/// Top ceil(T/2) tasks by total dependency form the strongly correlated group.
pub fn split_groups<F: Scalar>(dep: DependencyVector<F>) -> Result<GroupSplit<F>> {
    let t = dep.p.len();
    if t < 2 {
        return Err(Error::config(format!("task grouping needs at least 2 tasks, got {t}")));
    }
    if dep.order.len() != t {
        return Err(Error::shape("dependency order does not match its vector"));
    }
    let n_strong = t.div_ceil(2);
    let strongly = dep.order[..n_strong].to_vec();
    let weakly = dep.order[n_strong..].to_vec();
    Ok(GroupSplit { strongly, weakly, dependency: dep })
}

/// `total_dependency` followed by `split_groups`.
pub fn correlation_split<F: Scalar>(labels: &LabelMatrix) -> Result<GroupSplit<F>> {
    split_groups(total_dependency(labels)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(t: usize) -> Vec<String> {
        (0..t).map(|i| format!("t{i}")).collect()
    }

    fn three_task() -> LabelMatrix {
        LabelMatrix::from_columns(names(3), &[vec![0, 0, 1, 1], vec![0, 0, 1, 1], vec![0, 1, 0, 1]]).unwrap()
    }

    #[test]
    fn identical_and_orthogonal_columns() {
        let c = pearson_matrix::<f64>(&three_task()).coefficients;
        assert_eq!(c.get(0, 1), 1.0);
        assert_eq!(c.get(0, 2), 0.0);
        assert_eq!(c.get(2, 2), 1.0);
    }

    #[test]
    fn constant_task_is_zero_with_warning() {
        let l = LabelMatrix::from_columns(names(2), &[vec![0, 0, 0, 0], vec![0, 1, 0, 1]]).unwrap();
        let c = pearson_matrix::<f64>(&l);
        assert_eq!(c.coefficients.get(0, 1), 0.0);
        assert_eq!(c.warnings, vec![AnalysisWarning::ZeroVariance { task: 0, name: "t0".into() }]);
        let split = correlation_split::<f64>(&l).unwrap();
        // p = [0, 0]; the tie goes to the lower index, so the constant task is strongly here.
        // With a third informative task it drops to weakly:
        assert_eq!(split.strongly, vec![0]);
        let l3 = LabelMatrix::from_columns(
            names(3),
            &[vec![0, 0, 0, 0], vec![0, 1, 0, 1], vec![0, 1, 0, 1]],
        )
        .unwrap();
        let split = correlation_split::<f64>(&l3).unwrap();
        assert_eq!(split.weakly, vec![0]);
    }

    #[test]
    fn dependency_and_split_of_three_tasks() {
        let dep = total_dependency::<f64>(&three_task()).unwrap();
        assert_eq!(dep.p, vec![1.0, 1.0, 0.0]);
        assert_eq!(dep.order, vec![0, 1, 2]);
        let split = split_groups(dep).unwrap();
        assert_eq!(split.strongly, vec![0, 1]);
        assert_eq!(split.weakly, vec![2]);
    }

    #[test]
    fn identical_columns_give_t_minus_one() {
        let col = vec![0, 1, 1, 0, 1];
        let l = LabelMatrix::from_columns(names(4), &vec![col; 4]).unwrap();
        let dep = total_dependency::<f64>(&l).unwrap();
        for &p in &dep.p {
            assert!((p - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn tie_breaks_by_index() {
        let dep = DependencyVector::<f64> { p: vec![0.5, 0.5], order: descending_order(&[0.5, 0.5]), warnings: vec![] };
        let split = split_groups(dep).unwrap();
        assert_eq!(split.strongly, vec![0]);
        assert_eq!(split.weakly, vec![1]);
    }

    #[test]
    fn twelve_tasks_split_six_six() {
        let p: Vec<f64> = (0..12).map(|i| i as f64 * 0.1).collect();
        let dep = DependencyVector { order: descending_order(&p), p, warnings: vec![] };
        let split = split_groups(dep).unwrap();
        assert_eq!(split.strongly.len(), 6);
        assert_eq!(split.weakly.len(), 6);
        assert_eq!(split.strongly, vec![11, 10, 9, 8, 7, 6]);
    }

    #[test]
    fn single_task_is_a_config_error() {
        let l = LabelMatrix::from_columns(names(1), &[vec![0, 1, 0]]).unwrap();
        assert!(matches!(total_dependency::<f64>(&l), Err(Error::Config(_))));
        let dep = DependencyVector::<f64> { p: vec![0.0], order: vec![0], warnings: vec![] };
        assert!(matches!(split_groups(dep), Err(Error::Config(_))));
    }

    #[test]
    fn multiclass_uses_raw_indices() {
        // y2 = 2*y1 exactly in index space, so r = 1 with raw indices.
        let l = LabelMatrix::from_columns(names(2), &[vec![0, 1, 0, 1], vec![0, 2, 0, 2]]).unwrap();
        assert_eq!(l.num_classes(1), 3);
        let c = pearson_matrix::<f64>(&l).coefficients;
        assert!((c.get(0, 1) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn construction_validates() {
        assert!(LabelMatrix::new(names(2), vec![0, 1], None).is_err());
        assert!(LabelMatrix::new(names(2), vec![0, 1, 2], None).is_err());
        let err = LabelMatrix::new(names(1), vec![0, 3], Some(vec![2])).unwrap_err();
        assert!(matches!(err, Error::Data(DataError::LabelOutOfRange { .. })));
        let l = LabelMatrix::new(names(2), vec![0, 1, 1, 1, 0, 0], None).unwrap();
        assert_eq!(l.class_counts(0), &[2, 1]);
        assert_eq!(l.class_counts(1).iter().sum::<usize>(), 3);
    }

    #[test]
    fn group_split_validation() {
        let dep = DependencyVector::<f64> { p: vec![0.0; 3], order: vec![0, 1, 2], warnings: vec![] };
        assert!(GroupSplit::with_groups(vec![0, 1], vec![2], dep.clone()).is_ok());
        assert!(GroupSplit::with_groups(vec![0, 1], vec![1], dep.clone()).is_err());
        assert!(GroupSplit::with_groups(vec![0, 1, 2], vec![], dep).is_err());
    }
}
