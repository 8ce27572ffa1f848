use cilicia::nn::gradcheck::{relative_error, run_suite};
use cilicia::nn::{
    balanced_weights, balanced_xent, lr_at_epoch, softmax_rows, BalancedLossSpec, BatchNormLayer, Mode, SgdConfig,
};
use cilicia::Matrix64;
use proptest::prelude::*;

fn batch(rows: usize, cols: usize, range: f64) -> impl Strategy<Value = Matrix64> {
    prop::collection::vec(-range..range, rows * cols).prop_map(move |v| Matrix64::new(rows, cols, v).unwrap())
}

fn logits_and_targets() -> impl Strategy<Value = (Matrix64, Vec<usize>, Vec<usize>)> {
    (1usize..8, 2usize..6).prop_flat_map(|(n, m)| {
        (batch(n, m, 6.0), prop::collection::vec(0..m, n), prop::collection::vec(1usize..100, m))
    })
}

fn loss_at(logits: &Matrix64, targets: &[usize], spec: &BalancedLossSpec<f64>) -> f64 {
    balanced_xent(&softmax_rows(logits), targets, spec).unwrap().0
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn softmax_rows_are_distributions(
        logits in (1usize..10, 1usize..8).prop_flat_map(|(n, m)| batch(n, m, 500.0))
    ) {
        let p = softmax_rows(&logits);
        for i in 0..p.rows() {
            prop_assert!(p.row(i).iter().all(|&v| v >= 0.0));
            prop_assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn xent_logit_gradient_matches_finite_differences((logits, targets, counts) in logits_and_targets()) {
        let spec = balanced_weights::<f64>("t", &counts).unwrap();
        let (_, grad) = balanced_xent(&softmax_rows(&logits), &targets, &spec).unwrap();
        let h = 1e-5;
        for i in 0..logits.rows() {
            for j in 0..logits.cols() {
                let mut up = logits.clone();
                up.set(i, j, logits.get(i, j) + h);
                let mut down = logits.clone();
                down.set(i, j, logits.get(i, j) - h);
                let numeric = (loss_at(&up, &targets, &spec) - loss_at(&down, &targets, &spec)) / (2.0 * h);
                let err = relative_error(grad.get(i, j), numeric);
                prop_assert!(err < 1e-4, "({i},{j}) analytic {} numeric {numeric}", grad.get(i, j));
            }
        }
    }

    #[test]
    fn uniform_counts_scale_plain_cross_entropy((logits, targets, _) in logits_and_targets(), count in 1usize..50) {
        let m = logits.cols();
        let spec = balanced_weights::<f64>("t", &vec![count; m]).unwrap();
        let p = softmax_rows(&logits);
        let plain = -targets.iter().enumerate().map(|(i, &y)| p.get(i, y).max(1e-12).ln()).sum::<f64>()
            / targets.len() as f64;
        let (loss, _) = balanced_xent(&p, &targets, &spec).unwrap();
        prop_assert!((loss - plain / m as f64).abs() < 1e-12);
    }

    #[test]
    fn balanced_weights_are_a_distribution(counts in prop::collection::vec(1usize..10_000, 2..8)) {
        let w = balanced_weights::<f64>("t", &counts).unwrap().class_weights;
        prop_assert!(w.iter().all(|&v| v > 0.0));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_training_output_is_standardized(
        x in (2usize..24, 1usize..6, 0.01f64..100.0).prop_flat_map(|(n, d, s)| batch(n, d, s))
    ) {
        let bn = BatchNormLayer::<f64>::new(x.cols());
        let (y, cache) = bn.forward(&x, Mode::Train).unwrap();
        let n = x.rows() as f64;
        for j in 0..x.cols() {
            let col: Vec<f64> = (0..x.rows()).map(|i| x.get(i, j)).collect();
            let mean = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            prop_assume!(var >= 1e-4);
            let out: Vec<f64> = (0..y.rows()).map(|i| y.get(i, j)).collect();
            let out_mean = out.iter().sum::<f64>() / n;
            let out_var = out.iter().map(|v| (v - out_mean).powi(2)).sum::<f64>() / n;
            prop_assert!(out_mean.abs() < 1e-9);
            // ε in the denominator shrinks the variance to var/(var+ε).
            let expected = var / (var + bn.epsilon);
            prop_assert!((out_var - expected).abs() < 1e-9 * expected.max(1.0), "{out_var} vs {expected}");
            if var >= 10.0 {
                prop_assert!((out_var - 1.0).abs() < 1e-6);
            }
            prop_assert!((cache.var[j] - var).abs() < 1e-9 * var.max(1.0));
        }
    }

    #[test]
    fn schedule_is_stepwise_non_increasing(epoch in 0usize..5000) {
        let cfg = SgdConfig::default();
        let lr = lr_at_epoch(&cfg, epoch);
        prop_assert!(lr_at_epoch(&cfg, epoch + 1) <= lr);
        if epoch % cfg.decay_every != cfg.decay_every - 1 {
            prop_assert_eq!(lr_at_epoch(&cfg, epoch + 1), lr);
        }
        if epoch >= 500 {
            prop_assert_eq!(lr, 0.001 / 5f64.powi(5));
        }
    }
}

#[test]
fn batchnorm_inference_uses_running_statistics() {
    let mut bn = BatchNormLayer::<f64>::new(1);
    bn.running_mean = vec![2.0];
    bn.running_var = vec![4.0];
    let x = Matrix64::from_f64_rows(&[&[4.0], &[0.0]]).unwrap();
    let (y, _) = bn.forward(&x, Mode::Infer).unwrap();
    let s = (4.0f64 + 1e-5).sqrt();
    assert_eq!(y.as_slice(), &[2.0 / s, -2.0 / s]);
    let (single, _) = bn.forward(&Matrix64::from_f64_rows(&[&[4.0]]).unwrap(), Mode::Infer).unwrap();
    assert_eq!(single.as_slice(), &[2.0 / s]);
}

#[test]
fn gradient_suite_on_a_sample_of_configurations() {
    let suite = run_suite(20, 17, 1e-5).unwrap();
    assert!(suite.max_rel_error() < 1e-4, "{suite:?}");
    assert!(suite.head.checked > 0 && suite.group.checked > 0);
}
