mod common;

use common::*;
use swarmset::checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint};
use swarmset::model::{Model, ModelFamily, ModelSpec, Readout};
use swarmset::objectives::task_losses;
use swarmset::params::Tensors;
use swarmset::taskgen::{generate_dataset, ClusterTask, TaskKind};
use swarmset::trainer::*;
use swarmset::{Array, Error, PopulationBatch};

fn scalar_params(v: f64) -> TensorList<Array<f64>> {
    TensorList(vec![Array::from_f64(&[1], &[v]).unwrap()])
}

#[test]
fn zero_gradients_leave_params_and_count_step() {
    let mut p = scalar_params(0.7);
    let mut s = AdamState::new(&p);
    assert!(adam_step(&mut p, &[Array::zeros(&[1])], &mut s, 1e-3).unwrap());
    assert_eq!(p[0].data(), &[0.7]);
    assert_eq!(s.t, 1);
}

#[test]
fn first_step_moves_by_learning_rate() {
    for g in [3.0, -0.02, 150.0] {
        let mut p = scalar_params(0.0);
        let mut s = AdamState::new(&p);
        adam_step(
            &mut p,
            &[Array::from_f64(&[1], &[g]).unwrap()],
            &mut s,
            0.01,
        )
        .unwrap();
        let expect = -0.01 * g.signum();
        assert!((p[0].data()[0] - expect).abs() <= 1e-8 * 0.01 / g.abs() + 1e-15);
    }
}

#[test]
fn three_steps_on_quadratic_match_unrolled_oracle() {
    // f(p) = 0.5·a·(p − c)², gradient a·(p − c).
    let (a, c, lr) = (3.0f64, 0.5f64, 0.1f64);
    let mut p = scalar_params(2.0);
    let mut s = AdamState::new(&p);
    for _ in 0..3 {
        let g = a * (p[0].data()[0] - c);
        adam_step(&mut p, &[Array::from_f64(&[1], &[g]).unwrap()], &mut s, lr).unwrap();
    }
    // Hand unroll.
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
    let mut x = 2.0f64;
    let (mut m, mut v) = (0.0f64, 0.0f64);
    let g1 = a * (x - c);
    m = b1 * m + (1.0 - b1) * g1;
    v = b2 * v + (1.0 - b2) * g1 * g1;
    x -= lr * (m / (1.0 - b1)) / ((v / (1.0 - b2)).sqrt() + eps);
    let g2 = a * (x - c);
    m = b1 * m + (1.0 - b1) * g2;
    v = b2 * v + (1.0 - b2) * g2 * g2;
    x -= lr * (m / (1.0 - b1 * b1)) / ((v / (1.0 - b2 * b2)).sqrt() + eps);
    let g3 = a * (x - c);
    m = b1 * m + (1.0 - b1) * g3;
    v = b2 * v + (1.0 - b2) * g3 * g3;
    x -= lr * (m / (1.0 - b1 * b1 * b1)) / ((v / (1.0 - b2 * b2 * b2)).sqrt() + eps);
    assert!((p[0].data()[0] - x).abs() <= 1e-12);
    assert!((s.m[0].data()[0] - m).abs() <= 1e-12);
    assert!((s.v[0].data()[0] - v).abs() <= 1e-12);
    assert_eq!(s.t, 3);
}

#[test]
fn non_finite_gradient_skips_step() {
    let mut p = scalar_params(1.0);
    let mut s = AdamState::new(&p);
    let ok = adam_step(
        &mut p,
        &[Array::from_f64(&[1], &[f64::NAN]).unwrap()],
        &mut s,
        0.1,
    )
    .unwrap();
    assert!(!ok);
    assert_eq!((s.t, s.skipped), (0, 1));
    assert_eq!(p[0].data(), &[1.0]);
}

#[test]
fn backtrack_rule_examples() {
    // Epoch 10: the three preceding epochs all beat the current loss.
    let h10 = [1.0, 0.9, 0.8, 0.7, 0.6, 0.65, 0.5, 0.41, 0.42, 0.6];
    assert_eq!(better_run_length(&h10), 3);
    assert_eq!(
        backtrack_check(&h10, 10, 5, 0.2),
        BacktrackDecision::Backtrack
    );
    // Only two better preceding epochs: 2 > 2 is false.
    let h2 = [1.0, 0.9, 0.8, 0.7, 0.6, 0.55, 0.7, 0.41, 0.42, 0.5];
    assert_eq!(better_run_length(&h2), 2);
    assert_eq!(
        backtrack_check(&h2, 10, 5, 0.2),
        BacktrackDecision::Continue
    );
    assert_eq!(
        backtrack_check(&[1.0, 0.9, 0.8, 0.7, 0.6], 5, 5, 0.2),
        BacktrackDecision::Continue
    );
}

fn small_spec() -> ModelSpec {
    ModelSpec::new(ModelFamily::Swarm, "4-2-1", 2, 10, Readout::Entitywise).unwrap()
}

#[test]
fn injected_spike_triggers_backtrack_and_decay() {
    let model = Model::<f64>::init(&small_spec(), &mut rng(1)).unwrap();
    let mut st = TrainState::new(model, 1e-3);
    let losses = [2.0, 1.9, 1.8, 1.7, 1.6, 1.5, 1.4, 5.0, 1.45, 6.0];
    let mut fired = Vec::new();
    let mut snapshots = Vec::new();
    for (e, &l) in losses.iter().enumerate() {
        // Perturb parameters and moments so restoration is observable.
        st.model.params.visit_mut(&mut |a| a.data_mut()[0] += 0.01);
        st.adam.m[0].data_mut()[0] += 1.0;
        st.adam.t += 1;
        st.record_val(l);
        snapshots.push(st.snapshot());
        if backtrack_check(&st.val_history, e + 1, 5, 0.2) == BacktrackDecision::Backtrack {
            st.apply_backtrack(0.9, None).unwrap();
            fired.push(e + 1);
            let best = st.best.as_ref().unwrap();
            assert_eq!(st.snapshot(), best.snapshot);
            assert_eq!(st.snapshot(), snapshots[best.epoch - 1]);
        }
    }
    // Epoch 8: r = 7 > 1.6. Epoch 9: r = 1 (1.4 < 1.45) ≤ 1.8. Epoch 10: r = 3 > 2.
    assert_eq!(fired, vec![8, 10]);
    assert!((st.lr - 0.81e-3).abs() < 1e-18);
    assert_eq!(st.val_history.len(), 10);
    let best = st.best.as_ref().unwrap();
    assert_eq!((best.epoch, best.loss), (7, 1.4));
    // Moments were restored, not zeroed.
    assert_eq!(st.adam.m[0].data()[0], 7.0);
    assert_eq!(st.adam.t, 7);
}

fn dataset(count: usize, val: usize, seed: u64) -> (Vec<ClusterTask>, Vec<ClusterTask>) {
    let (ds, _) = generate_dataset(TaskKind::Direct, count, val, seed).unwrap();
    (ds.train().to_vec(), ds.val().to_vec())
}

#[test]
fn restoration_reproduces_best_validation_loss() {
    let (tr, val) = dataset(12, 4, 2);
    let spec = small_spec();
    let cfg = TrainConfig {
        batch_size: 4,
        max_epochs: 2,
        precision: 64,
        ..TrainConfig::default()
    };
    let mut out = train_model(
        Model::<f64>::init(&spec, &mut rng(2)).unwrap(),
        &tr,
        &val,
        &cfg,
        &TrainOptions::default(),
    )
    .unwrap();
    let st = &mut out.state;
    let best_loss = st.best.as_ref().unwrap().loss;
    // Wreck the parameters, then backtrack.
    st.model
        .params
        .visit_mut(&mut |a| a.data_mut().iter_mut().for_each(|v| *v += 0.5));
    let refs: Vec<&ClusterTask> = val.iter().collect();
    let wrecked = task_losses(&st.model, &refs, 4).unwrap();
    st.apply_backtrack(0.9, None).unwrap();
    let again = task_losses(&st.model, &refs, 4).unwrap();
    let mean = again.iter().sum::<f64>() / again.len() as f64;
    assert!((mean - best_loss).abs() <= 1e-6);
    assert_ne!(wrecked, again);
}

#[test]
fn zero_epochs_returns_initial_state_and_header() {
    let (tr, val) = dataset(6, 2, 3);
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        max_epochs: 0,
        ..TrainConfig::default()
    };
    let opts = TrainOptions {
        run_dir: Some(dir.path().to_path_buf()),
    };
    let out = train::<f32>(&small_spec(), &tr, &val, &cfg, &opts).unwrap();
    let fresh =
        Model::<f32>::init(&small_spec(), &mut swarmset::taskgen::task_rng(cfg.seed, 0)).unwrap();
    assert_eq!(out.state.model, fresh);
    assert!(out.metrics.is_empty());
    assert_eq!(
        std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap(),
        format!("{METRICS_HEADER}\n")
    );
}

#[test]
fn runs_are_deterministic_and_checkpoints_reload() {
    let (tr, val) = dataset(16, 4, 4);
    let cfg = TrainConfig {
        batch_size: 5,
        max_epochs: 3,
        seed: 9,
        shuffle_entities: true,
        ..TrainConfig::default()
    };
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let opts = TrainOptions {
            run_dir: Some(dir.path().to_path_buf()),
        };
        let out = train::<f32>(&small_spec(), &tr, &val, &cfg, &opts).unwrap();
        let read = |n: &str| std::fs::read(dir.path().join(n)).unwrap();
        (
            out,
            read("metrics.csv"),
            read("best.ckpt"),
            read("last.ckpt"),
        )
    };
    let (out, m1, b1, l1) = run();
    let (_, m2, b2, l2) = run();
    assert_eq!(m1, m2);
    assert_eq!(b1, b2);
    assert_eq!(l1, l2);

    let last = decode_checkpoint::<f32>(&l1).unwrap();
    assert_eq!(last.model(), out.state.model);
    assert_eq!(last.adam, out.state.adam);
    assert_eq!(last.config_hash, out.config_hash);
    assert_eq!(encode_checkpoint(&last).unwrap(), l1);

    // Evaluating the best checkpoint reproduces the best logged val loss.
    let best = decode_checkpoint::<f32>(&b1).unwrap();
    let refs: Vec<&ClusterTask> = val.iter().collect();
    let losses = task_losses(&best.model(), &refs, cfg.batch_size).unwrap();
    let mean = losses.iter().sum::<f64>() / losses.len() as f64;
    let logged = parse_metrics_csv(std::str::from_utf8(&m1).unwrap()).unwrap();
    let best_logged = logged
        .iter()
        .map(|r| r.val_loss)
        .fold(f64::INFINITY, f64::min);
    assert!(
        (mean - best_logged).abs() <= 1e-6,
        "{mean} vs {best_logged}"
    );
}

#[test]
fn reloaded_model_forward_is_bitwise_equal() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ModelSpec::new(ModelFamily::SeqLstm, "5-2", 2, 10, Readout::Entitywise).unwrap();
    let model = Model::<f64>::init(&spec, &mut rng(5)).unwrap();
    let st = TrainState::new(model.clone(), 1e-3);
    let path = dir.path().join("m.ckpt");
    swarmset::checkpoint::save_checkpoint(&path, &st.to_checkpoint(1)).unwrap();
    let back = load_checkpoint::<f64>(&path).unwrap().model();
    let x = random_batch::<f64>(&mut rng(6), 2, &[7, 3]);
    assert_eq!(
        model.entity_outputs(&x).unwrap(),
        back.entity_outputs(&x).unwrap()
    );
}

#[test]
fn batch_composition_does_not_change_task_losses() {
    let (_, val) = dataset(20, 12, 7);
    let model = Model::<f32>::init(&small_spec(), &mut rng(7)).unwrap();
    let refs: Vec<&ClusterTask> = val.iter().collect();
    let one = task_losses(&model, &refs, 1).unwrap();
    let five = task_losses(&model, &refs, 5).unwrap();
    let mut rev = refs.clone();
    rev.reverse();
    let mut all = task_losses(&model, &rev, 12).unwrap();
    all.reverse();
    for i in 0..refs.len() {
        assert!((one[i] - five[i]).abs() <= 1e-4);
        assert!((one[i] - all[i]).abs() <= 1e-4);
    }
}

#[test]
fn learning_rate_drop_schedule() {
    let (tr, val) = dataset(8, 2, 8);
    let cfg = TrainConfig {
        batch_size: 4,
        max_epochs: 10,
        beta: 0.99,
        lr_drop_at: Some(0.7),
        ..TrainConfig::default()
    };
    let spec = ModelSpec::new(ModelFamily::SetLinear, "4-1", 2, 10, Readout::Entitywise).unwrap();
    let out = train::<f32>(&spec, &tr, &val, &cfg, &TrainOptions::default()).unwrap();
    let lrs: Vec<f64> = out.metrics.iter().map(|m| m.lr).collect();
    assert!(out.metrics.iter().all(|m| !m.backtracked));
    assert!(lrs[..7].iter().all(|&l| l == 1e-3));
    assert!(lrs[7..].iter().all(|&l| (l - 1e-4).abs() < 1e-18));
}

#[test]
fn persistent_divergence_aborts() {
    let (tr, val) = dataset(6, 2, 9);
    let spec = small_spec();
    let mut model = Model::<f32>::init(&spec, &mut rng(9)).unwrap();
    model.params.visit_mut(&mut |a| a.data_mut().fill(f32::NAN));
    let cfg = TrainConfig {
        batch_size: 3,
        max_epochs: 30,
        ..TrainConfig::default()
    };
    let err = train_model(model, &tr, &val, &cfg, &TrainOptions::default())
        .err()
        .unwrap();
    assert!(matches!(err, Error::Divergence(_)), "{err}");
}

#[test]
fn mixture_model_trains() {
    let (ds, _) = generate_dataset(TaskKind::Param, 40, 10, 10).unwrap();
    let spec = ModelSpec::new(ModelFamily::Swarm, "8-2-1", 2, 20, Readout::MeanPool).unwrap();
    let cfg = TrainConfig {
        batch_size: 10,
        max_epochs: 3,
        lr0: 3e-3,
        ..TrainConfig::default()
    };
    let out = train::<f32>(&spec, ds.train(), ds.val(), &cfg, &TrainOptions::default()).unwrap();
    assert_eq!(out.metrics.len(), 3);
    assert!(out.metrics.iter().all(|m| m.val_loss.is_finite()));
    let x = PopulationBatch::from_sets(&[&ds.val()[0].points]).unwrap();
    assert_eq!(out.state.model.entity_outputs(&x).unwrap().features(), 20);
}

#[test]
fn precision_mismatch_is_rejected() {
    let (tr, val) = dataset(4, 1, 11);
    let cfg = TrainConfig {
        precision: 64,
        ..TrainConfig::default()
    };
    assert!(train::<f32>(&small_spec(), &tr, &val, &cfg, &TrainOptions::default()).is_err());
}
