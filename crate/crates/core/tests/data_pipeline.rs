use std::fs;
use std::path::{Path, PathBuf};

use cilicia::data::{balance_specs, generate_synthetic, load_dataset, load_labels, stratified_split, SynthSpec};
use cilicia::labels::pearson_matrix;
use cilicia::{DataError, Error, LabelMatrix};
use proptest::prelude::*;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn data_error(err: Error) -> DataError {
    match err {
        Error::Data(d) => d,
        other => panic!("expected a data error, got {other}"),
    }
}

/// Copies the 4-row fixture into a scratch directory, applying `edit` to one file.
fn edited(file: &str, edit: impl Fn(&str) -> String) -> (tempfile::TempDir, PathBuf, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    for name in ["features4.csv", "labels4.csv", "labels4.tasks.csv"] {
        let text = fs::read_to_string(fixture(name)).unwrap();
        let text = if name == file { edit(&text) } else { text };
        fs::write(dir.path().join(name), text).unwrap();
    }
    let (f, l) = (dir.path().join("features4.csv"), dir.path().join("labels4.csv"));
    (dir, f, l)
}

#[test]
fn four_row_fixture_loads() {
    let ds = load_dataset::<f64>(&fixture("features4.csv"), &fixture("labels4.csv")).unwrap();
    assert_eq!(ds.n_samples(), 4);
    assert_eq!(ds.feature_dim(), 3);
    assert_eq!(ds.sample_ids, ["s3", "s1", "s4", "s2"]);
    assert_eq!(ds.features.row(0), &[-0.75, 2.0, 0.125]);
    assert_eq!(ds.labels.column(0), vec![1, 0, 1, 0]);
    assert_eq!(ds.labels.column(2), vec![2, 0, 1, 2]);
    assert_eq!(ds.labels.class_counts(2), &[1, 1, 2]);
    assert_eq!(ds.class_names[2], ["thin", "medium", "heavy"]);
    let again = load_dataset::<f64>(&fixture("features4.csv"), &fixture("labels4.csv")).unwrap();
    assert_eq!(again.provenance.digest(), ds.provenance.digest());
}

#[test]
fn labels_load_without_features() {
    let labels = load_labels(&fixture("labels4.csv")).unwrap();
    assert_eq!(labels.task_names(), ["gender", "backpack", "build"]);
    assert_eq!(labels.n_samples(), 4);
}

#[test]
fn any_byte_change_changes_the_digest() {
    let base = load_dataset::<f64>(&fixture("features4.csv"), &fixture("labels4.csv")).unwrap();
    for file in ["features4.csv", "labels4.csv", "labels4.tasks.csv"] {
        let (_dir, f, l) = edited(file, |t| format!("{t}\n"));
        let ds = load_dataset::<f64>(&f, &l).unwrap();
        assert_ne!(ds.provenance.digest(), base.provenance.digest(), "{file}");
    }
    let (_dir, f, l) = edited("features4.csv", |t| t.replace("0.125", "0.126"));
    assert_ne!(load_dataset::<f64>(&f, &l).unwrap().provenance.digest(), base.provenance.digest());
}

#[test]
fn empty_label_cell_cites_row_and_task() {
    let (_dir, f, l) = edited("labels4.csv", |t| t.replace("s4,female,no,1", "s4,female,,1"));
    match data_error(load_dataset::<f64>(&f, &l).unwrap_err()) {
        DataError::MissingCell { row, column, .. } => assert_eq!((row, column.as_str()), (3, "backpack")),
        other => panic!("{other}"),
    }
}

#[test]
fn distinct_errors_for_each_defect() {
    let (_d, f, l) = edited("labels4.csv", |t| t.replace("s1,male,no,0", "s1,male,maybe,0"));
    assert!(matches!(
        data_error(load_dataset::<f64>(&f, &l).unwrap_err()),
        DataError::UnknownClass { row: 2, ref task, ref value, .. } if task == "backpack" && value == "maybe"
    ));

    let (_d, f, l) = edited("labels4.csv", |t| t.replace("s2,male,yes,2", "s1,male,yes,2"));
    assert!(matches!(
        data_error(load_dataset::<f64>(&f, &l).unwrap_err()),
        DataError::DuplicateIndex { row: 4, ref index, .. } if index == "s1"
    ));

    let (_d, f, l) = edited("labels4.csv", |t| t.lines().take(4).map(|s| format!("{s}\n")).collect());
    assert_eq!(
        data_error(load_dataset::<f64>(&f, &l).unwrap_err()),
        DataError::RowCountMismatch { features: 4, labels: 3 }
    );

    let (_d, f, l) = edited("features4.csv", |t| t.replace("1.0,0.0,-2.5", "1.0,abc,-2.5"));
    assert!(matches!(
        data_error(load_dataset::<f64>(&f, &l).unwrap_err()),
        DataError::NonNumeric { row: 2, ref column, .. } if column == "f1"
    ));

    let (_d, f, l) = edited("features4.csv", |t| t.replace("s4,", "s5,"));
    assert!(matches!(data_error(load_dataset::<f64>(&f, &l).unwrap_err()), DataError::UnmatchedIndex { .. }));
}

#[test]
fn written_dataset_reloads_identically() {
    let mut spec = SynthSpec::two_clusters(60, 4, (0.8, 0.2), 11);
    spec.feature_dim = 5;
    let ds = generate_synthetic::<f64>(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (f, l) = ds.write_csv(dir.path()).unwrap();
    let back = load_dataset::<f64>(&f, &l).unwrap();
    assert_eq!(back.features, ds.features);
    assert_eq!(back.labels, ds.labels);
    assert_eq!(back.class_names, ds.class_names);
}

fn mean_intra_correlation(labels: &LabelMatrix, members: &[usize]) -> f64 {
    let c = pearson_matrix::<f64>(labels).coefficients;
    let mut sum = 0.0;
    let mut n = 0;
    for (a, &i) in members.iter().enumerate() {
        for &j in &members[a + 1..] {
            sum += c.get(i, j);
            n += 1;
        }
    }
    sum / n as f64
}

#[test]
fn synthetic_intra_cluster_correlation_hits_target() {
    for (rho, noise) in [((0.8, 0.2), 0.0), ((0.6, 0.3), 0.1)] {
        for seed in 0..5 {
            let mut spec = SynthSpec::two_clusters(2000, 6, rho, seed);
            spec.label_noise = noise;
            spec.feature_dim = 4;
            let ds = generate_synthetic::<f64>(&spec).unwrap();
            let a = mean_intra_correlation(&ds.labels, &[0, 2, 4]);
            let b = mean_intra_correlation(&ds.labels, &[1, 3, 5]);
            assert!((a - rho.0).abs() < 0.1, "seed {seed}: cluster A {a} vs {}", rho.0);
            assert!((b - rho.1).abs() < 0.1, "seed {seed}: cluster B {b} vs {}", rho.1);
        }
    }
}

#[test]
fn identical_spec_gives_identical_dataset() {
    let spec = SynthSpec::two_clusters(300, 4, (0.7, 0.1), 2);
    assert_eq!(generate_synthetic::<f64>(&spec).unwrap(), generate_synthetic::<f64>(&spec).unwrap());
}

#[test]
fn stratified_split_keeps_class_proportions() {
    let mut spec = SynthSpec::two_clusters(2000, 6, (0.8, 0.2), 4);
    spec.feature_dim = 4;
    let labels = generate_synthetic::<f64>(&spec).unwrap().labels;
    let rows: Vec<usize> = (0..2000).collect();
    for seed in 0..5 {
        let split = stratified_split(&labels, &rows, 0.2, seed).unwrap();
        assert_eq!((split.train.len(), split.test.len()), (1600, 400));
        let train = labels.subset_rows(&split.train).unwrap();
        for t in 0..labels.n_tasks() {
            for c in 0..labels.num_classes(t) {
                let full = labels.class_counts(t)[c] as f64 / 2000.0;
                let part = train.class_counts(t)[c] as f64 / 1600.0;
                assert!((full - part).abs() <= 0.05, "task {t} class {c}: {full} vs {part}");
            }
        }
        let specs = balance_specs::<f64>(&train).unwrap();
        assert!(specs.iter().all(|s| (s.class_weights.iter().sum::<f64>() - 1.0).abs() < 1e-12));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn stratified_split_partitions_rows(
        cols in (20usize..120, 1usize..4).prop_flat_map(|(n, t)| prop::collection::vec(prop::collection::vec(0usize..2, n), t)),
        fraction in 0.1f64..0.5,
        seed in any::<u64>(),
    ) {
        let n = cols[0].len();
        // Every class needs at least two members to stratify.
        let mut cols = cols;
        for c in &mut cols {
            c[0] = 0; c[1] = 0; c[2] = 1; c[3] = 1;
        }
        let names = (0..cols.len()).map(|t| format!("t{t}")).collect();
        let labels = LabelMatrix::from_columns(names, &cols).unwrap();
        let rows: Vec<usize> = (0..n).collect();
        let split = stratified_split(&labels, &rows, fraction, seed).unwrap();
        let mut all: Vec<usize> = split.train.iter().chain(&split.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, rows.clone());
        prop_assert!(!split.test.is_empty());
        let train = labels.subset_rows(&split.train).unwrap();
        for t in 0..labels.n_tasks() {
            prop_assert!(train.class_counts(t).iter().all(|&c| c > 0));
        }
        prop_assert_eq!(stratified_split(&labels, &rows, fraction, seed).unwrap(), split);
    }
}

#[test]
fn hundred_rows_split_eighty_twenty() {
    let cols = vec![(0..100).map(|i| i % 2).collect::<Vec<_>>(), (0..100).map(|i| usize::from(i % 10 == 0)).collect()];
    let labels = LabelMatrix::from_columns(vec!["a".into(), "b".into()], &cols).unwrap();
    let split = stratified_split(&labels, &(0..100).collect::<Vec<_>>(), 0.2, 9).unwrap();
    assert_eq!((split.train.len(), split.test.len()), (80, 20));
}
