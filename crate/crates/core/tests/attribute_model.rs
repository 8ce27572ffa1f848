use cilicia::model::{HeadShape, TaskTargets};
use cilicia::nn::{apply_sgd, balanced_weights, balanced_xent, BalancedLossSpec, Mode};
use cilicia::{init_from, multitask_loss, FrozenBackbone, GroupModel, GroupModel32, GroupModel64, Matrix, Matrix64, TaskHead64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

fn random_batch(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix64 {
    Matrix64::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

fn fixture(n_tasks: usize, adapter: bool, dropout: f64) -> (GroupModel64, Matrix64, TaskTargets, Vec<BalancedLossSpec<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let classes: Vec<usize> = (0..n_tasks).map(|t| 2 + t % 3).collect();
    let shape = HeadShape { in_dim: 6, hidden: 16, dropout, shared_adapter: adapter };
    let model = GroupModel::new((0..n_tasks).collect(), &classes, &shape, "d".into(), &mut rng).unwrap();
    let x = random_batch(&mut rng, 10, 6);
    let columns: Vec<Vec<usize>> = classes.iter().map(|&m| (0..10).map(|i| i % m).collect()).collect();
    let specs = classes
        .iter()
        .map(|&m| balanced_weights("t", &(1..=m).map(|c| c * 3).collect::<Vec<_>>()).unwrap())
        .collect();
    (model, x, TaskTargets { task_ids: (0..n_tasks).collect(), columns }, specs)
}

fn head_rngs(n: usize) -> Vec<ChaCha8Rng> {
    (0..n).map(|k| ChaCha8Rng::seed_from_u64(100 + k as u64)).collect()
}

#[test]
fn head_gradients_separate_without_adapter() {
    let (model, x, targets, specs) = fixture(3, false, 0.5);
    let out = multitask_loss(&model, &x, &targets, &specs, Mode::Train, &mut head_rngs(3)).unwrap();
    for (k, head) in model.heads.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + k as u64);
        let cache = head.forward(&x, Mode::Train, &mut rng).unwrap();
        let (_, dlogits) = balanced_xent(&cache.probs, &targets.columns[k], &specs[k]).unwrap();
        let (alone, _) = head.backward(&x, &cache, &dlogits, false).unwrap();
        for (joint, single) in out.grads.heads[k].tensors().iter().zip(alone.tensors()) {
            for (a, b) in joint.iter().zip(single) {
                assert!((a - b / 3.0).abs() < 1e-10, "head {k}: {a} vs {}", b / 3.0);
            }
        }
    }
    assert!(out.grads.adapter.is_none());
}

#[test]
fn aggregate_ignores_task_order() {
    for adapter in [false, true] {
        let (model, x, targets, specs) = fixture(4, adapter, 0.0);
        let base = multitask_loss(&model, &x, &targets, &specs, Mode::Train, &mut head_rngs(4)).unwrap().loss;
        let perm = [2, 0, 3, 1];
        let mut shuffled = model.clone();
        shuffled.heads = perm.iter().map(|&k| model.heads[k].clone()).collect();
        shuffled.task_ids = perm.to_vec();
        let loss = multitask_loss(&shuffled, &x, &targets, &specs, Mode::Train, &mut head_rngs(4)).unwrap().loss;
        assert!((loss - base).abs() < 1e-12, "adapter {adapter}: {loss} vs {base}");
    }
}

fn hash(m: &Matrix64) -> Vec<u8> {
    let mut h = Sha256::new();
    for v in m.as_slice() {
        h.update(v.to_le_bytes());
    }
    h.finalize().to_vec()
}

#[test]
fn backbone_output_is_stable_across_epochs() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let raw = random_batch(&mut rng, 12, 9);
    let backbone = FrozenBackbone::<f64>::projection(77, 9, 5);
    let first = hash(&backbone.embed(&raw).unwrap());
    for _ in 0..5 {
        assert_eq!(hash(&backbone.embed(&raw).unwrap()), first);
    }
    let rebuilt = FrozenBackbone::<f64>::projection(77, 9, 5);
    assert_eq!(hash(&rebuilt.embed(&raw).unwrap()), first);
    assert_eq!(rebuilt.digest(), backbone.digest());
    assert_ne!(FrozenBackbone::<f64>::projection(78, 9, 5).digest(), backbone.digest());
    let pre = FrozenBackbone::<f64>::precomputed("abc");
    assert_eq!(pre.embed(&raw).unwrap(), raw);
}

#[test]
fn single_head_overfits_separable_samples() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_batch(&mut rng, 32, 4);
    let y: Vec<usize> = (0..32).map(|i| usize::from(x.get(i, 0) + 0.5 * x.get(i, 1) > 0.0)).collect();
    let counts = [y.iter().filter(|&&c| c == 0).count(), y.iter().filter(|&&c| c == 1).count()];
    let spec = balanced_weights("sep", &counts).unwrap();
    let mut head = TaskHead64::new(0, 4, 512, 2, 0.0, &mut rng).unwrap();
    for _ in 0..300 {
        let cache = head.forward(&x, Mode::Train, &mut rng).unwrap();
        let (_, dlogits) = balanced_xent(&cache.probs, &y, &spec).unwrap();
        let (grads, _) = head.backward(&x, &cache, &dlogits, false).unwrap();
        head.bn.commit_running(&cache.bn);
        apply_sgd(&mut head.params_mut(), &grads.tensors(), 0.1, 0.0).unwrap();
    }
    let p = head.predict(&x).unwrap();
    let correct = (0..32).filter(|&i| usize::from(p.get(i, 1) > p.get(i, 0)) == y[i]).count();
    assert_eq!(correct, 32);
}

#[test]
fn extra_target_head_starts_fresh() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let shape = HeadShape { in_dim: 5, hidden: 8, dropout: 0.5, shared_adapter: true };
    let source = GroupModel64::new(vec![4, 0], &[2, 2], &shape, "d".into(), &mut rng).unwrap();
    let fresh = GroupModel64::new(vec![1, 3, 2], &[2, 2, 2], &shape, "d".into(), &mut rng).unwrap();
    let mut target = fresh.clone();
    let report = init_from(&source, &mut target).unwrap();
    assert_eq!(report.paired, vec![(4, 1), (0, 3)]);
    assert_eq!(report.fresh_heads, vec![2]);
    assert!(report.adapter_copied);
    assert_eq!(target.adapter, source.adapter);
    for k in 0..2 {
        assert_eq!(target.heads[k].fc, source.heads[k].fc);
        assert_eq!(target.heads[k].bn, source.heads[k].bn);
        assert_eq!(target.heads[k].out, source.heads[k].out);
    }
    assert_eq!(target.heads[2], fresh.heads[2]);
}

#[test]
fn single_precision_agrees_with_double() {
    let (model, x, targets, specs) = fixture(2, true, 0.0);
    let wide = multitask_loss(&model, &x, &targets, &specs, Mode::Train, &mut head_rngs(2)).unwrap();
    let ckpt = cilicia::checkpoint::Checkpoint::from_model(&model);
    let narrow_model: GroupModel32 = ckpt.to_model().unwrap();
    let x32 = Matrix::<f32>::new(x.rows(), x.cols(), x.as_slice().iter().map(|&v| v as f32).collect()).unwrap();
    let specs32: Vec<BalancedLossSpec<f32>> = specs
        .iter()
        .map(|s| BalancedLossSpec { class_weights: s.class_weights.iter().map(|&w| w as f32).collect() })
        .collect();
    let narrow = multitask_loss(&narrow_model, &x32, &targets, &specs32, Mode::Train, &mut head_rngs(2)).unwrap();
    assert!(narrow.loss.is_finite());
    assert!((f64::from(narrow.loss) - wide.loss).abs() < 1e-4, "{} vs {}", narrow.loss, wide.loss);
}
