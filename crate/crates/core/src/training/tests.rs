use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::dataset::{linear_gaussian_set, DatasetMeta, NormStats};
use crate::excitation::BasisFamily;
use crate::flow::{FlowConfig, ModelMeta};

fn small_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 100,
        seed: 3,
        ..TrainConfig::default()
    }
}

fn identity_model(d: usize) -> FlowModel<f64> {
    let meta = ModelMeta {
        n_u: 1,
        basis_family: BasisFamily::PiecewiseConstant,
        m: 1,
        dt: 1.0,
        x_box: None,
        integer_state: false,
        system: "test".into(),
    };
    FlowModel::new(FlowConfig::new(d, 1), meta, NormStats::identity(d, 1), 0).unwrap()
}

#[test]
fn schedule_examples() {
    let cfg = TrainConfig::default();
    assert!((lr_schedule(&cfg, 0, 0) - 3e-4).abs() < 1e-18);
    let peak = lr_schedule(&cfg, 10_000, 0);
    assert!((peak - 5e-4 * 0.99999f64.powi(10_000)).abs() < 1e-15);
    assert!((peak - 4.524e-4).abs() < 1e-7);
    let trough = lr_schedule(&cfg, 20_000, 0);
    assert!((trough - 3e-4 * 0.99999f64.powi(20_000)).abs() < 1e-15);
    // second amplitude period halves the triangle
    let later = lr_schedule(&cfg, 10_000, 40_000);
    assert!((later - 4e-4 * 0.99999f64.powi(10_000)).abs() < 1e-15);
}

#[test]
fn schedule_is_positive_bounded_and_continuous() {
    let cfg = TrainConfig::default();
    let mut prev = lr_schedule(&cfg, 0, 0);
    for it in 1..200_000u64 {
        let lr = lr_schedule(&cfg, it, it / 120);
        assert!(lr > 0.0 && lr <= cfg.max_lr);
        if (it / 120) % 40_000 != 0 || it % 120 != 0 {
            assert!((lr - prev).abs() < 1e-7, "jump at {it}");
        }
        prev = lr;
    }
}

fn record_set(rows: &[[f64; 3]]) -> TrainingSet {
    let meta = DatasetMeta {
        d: 1,
        n_u: 1,
        basis_family: BasisFamily::PiecewiseConstant,
        m: 1,
        n_gamma: 1,
        dt: 1.0,
        x_box: None,
        gamma_box: None,
        system: "test".into(),
        seed: 0,
    };
    TrainingSet::new(meta, rows.iter().flatten().copied().collect()).unwrap()
}

#[test]
fn single_record_loss_is_base_density() {
    let set = record_set(&[[0.0, 1.5, 1.5]]);
    let batch: Vec<_> = set.records().collect();
    let loss = nll_loss(&identity_model(1), &batch).unwrap();
    assert!((loss - 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
}

#[test]
fn gaussian_targets_give_entropy_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 20_000;
    let rows: Vec<[f64; 3]> = (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            [0.0, 0.0, z]
        })
        .collect();
    let set = record_set(&rows);
    let batch: Vec<_> = set.records().collect();
    let loss = nll_loss(&identity_model(1), &batch).unwrap();
    // -log phi(z) = 0.5 ln 2pi + z^2 / 2 has variance 1/2
    let se = (0.5f64 / n as f64).sqrt();
    assert!((loss - 1.4189).abs() < 3.0 * se + 1e-4, "loss {loss}");
}

#[test]
fn empty_batch_is_rejected() {
    assert!(nll_loss(&identity_model(1), &[]).is_err());
}

#[test]
fn zero_epochs_leave_model_unchanged() {
    let set = linear_gaussian_set(500, 1).unwrap();
    let model = FlowModel::<f64>::for_training_set(&set, false, 0).unwrap();
    let (out, hist) = train(model.clone(), &set, &small_cfg(0)).unwrap();
    assert_eq!(out.params(), model.params());
    assert!(hist.records.is_empty());
}

#[test]
fn loss_decreases_on_linear_gaussian_task() {
    let set = linear_gaussian_set(20_000, 2).unwrap();
    let model = FlowModel::<f64>::for_training_set(&set, false, 0).unwrap();
    let batch: Vec<_> = set.records().collect();
    let initial = nll_loss(&model, &batch).unwrap();
    let cfg = TrainConfig {
        epochs: 100, // 2,000 iterations
        seed: 5,
        ..TrainConfig::default()
    };
    let (trained, hist) = train(model, &set, &cfg).unwrap();
    assert_eq!(hist.records.len(), 100);
    let last = nll_loss(&trained, &batch).unwrap();
    assert!(last < initial - 0.2, "initial {initial}, final {last}");
}

#[test]
fn training_is_deterministic() {
    let set = linear_gaussian_set(1000, 3).unwrap();
    let model = FlowModel::<f64>::for_training_set(&set, false, 4).unwrap();
    let (a, ha) = train(model.clone(), &set, &small_cfg(5)).unwrap();
    let (b, hb) = train(model, &set, &small_cfg(5)).unwrap();
    assert_eq!(a.params(), b.params());
    let losses = |h: &TrainHistory| h.records.iter().map(|r| r.loss).collect::<Vec<_>>();
    assert_eq!(losses(&ha), losses(&hb));
}

#[test]
fn resumed_run_matches_straight_run() {
    let set = linear_gaussian_set(1000, 3).unwrap();
    let model = FlowModel::<f64>::for_training_set(&set, false, 4).unwrap();
    let cfg = small_cfg(6);

    let mut straight = TrainState::new(model.clone());
    train_until(&mut straight, &set, &cfg, 6).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.sfmt");
    let mut first = TrainState::new(model);
    train_until(&mut first, &set, &cfg, 2).unwrap();
    save_checkpoint(&first, &path).unwrap();
    let mut resumed: TrainState<f64> = resume(&path).unwrap();
    assert_eq!(resumed.to_bytes(), first.to_bytes());
    train_until(&mut resumed, &set, &cfg, 6).unwrap();

    assert_eq!(resumed.model.params(), straight.model.params());
    assert_eq!(resumed.best_model().params(), straight.best_model().params());
    let losses = |s: &TrainState<f64>| s.history.records.iter().map(|r| r.loss).collect::<Vec<_>>();
    assert_eq!(losses(&resumed), losses(&straight));
}

#[test]
fn checkpoint_resume_with_no_training_is_identity() {
    let set = linear_gaussian_set(300, 3).unwrap();
    let model = FlowModel::<f64>::for_training_set(&set, false, 4).unwrap();
    let mut st = TrainState::new(model);
    train_until(&mut st, &set, &small_cfg(2), 2).unwrap();
    let bytes = st.to_bytes();
    let mut back = TrainState::<f64>::from_bytes(&bytes).unwrap();
    train_until(&mut back, &set, &small_cfg(2), 2).unwrap();
    assert_eq!(back.to_bytes(), bytes);

    let mut bad = bytes.clone();
    bad[4] = 7;
    assert!(matches!(
        TrainState::<f64>::from_bytes(&bad),
        Err(Error::Format { offset: 4, .. })
    ));
    assert!(TrainState::<f64>::from_bytes(&bytes[..bytes.len() - 5]).is_err());
}

#[test]
fn periodic_checkpoints_are_written() {
    let set = linear_gaussian_set(300, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.sfmt");
    let cfg = TrainConfig {
        checkpoint_every: 2,
        checkpoint_path: Some(path.clone()),
        ..small_cfg(4)
    };
    let model = FlowModel::<f64>::for_training_set(&set, false, 4).unwrap();
    let (_, hist) = train(model, &set, &cfg).unwrap();
    assert_eq!(hist.checkpoints.len(), 2);
    let st: TrainState<f64> = resume(&path).unwrap();
    assert_eq!(st.epoch, 4);
    assert_eq!(hist.to_lines().lines().count(), 4);
}

#[test]
fn target_offset_is_absorbed_by_normalization() {
    // Dyadic data so that adding the offset is exact in floating point.
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let q = |v: f64| (v * 1024.0).round() / 1024.0;
    let rows: Vec<[f64; 3]> = (0..400)
        .map(|_| {
            let x0 = q(rng.random_range(-1.0..1.0));
            let g = q(rng.random_range(-1.0..1.0));
            let x1 = q(0.5 * x0 + g + 0.25 * rng.sample::<f64, _>(StandardNormal));
            [g, x0, x1]
        })
        .collect();
    let offset = 8.0;
    let shifted: Vec<[f64; 3]> = rows.iter().map(|r| [r[0], r[1], r[2] + offset]).collect();
    let (a_set, b_set) = (record_set(&rows), record_set(&shifted));

    let meta = ModelMeta::from_dataset(&a_set.meta, false);
    let mut norm = NormStats::identity(1, 1);
    norm.target_shift = vec![0.125];
    norm.target_scale = vec![0.5];
    let mut norm_b = norm.clone();
    norm_b.target_shift = vec![0.125 + offset];

    let a = FlowModel::new(FlowConfig::new(1, 1), meta.clone(), norm, 2).unwrap();
    let b = FlowModel::new(FlowConfig::new(1, 1), meta, norm_b, 2).unwrap();
    let cfg = TrainConfig {
        weight_decay: 0.0,
        ..small_cfg(3)
    };
    let (a, _) = train(a, &a_set, &cfg).unwrap();
    let (b, _) = train(b, &b_set, &cfg).unwrap();
    assert_eq!(a.params(), b.params());
}

#[test]
fn dequantization_noise_is_reproducible() {
    let set = linear_gaussian_set(300, 3).unwrap();
    let model = FlowModel::<f64>::for_training_set(&set, true, 4).unwrap();
    let cfg = TrainConfig {
        dequantize: true,
        ..small_cfg(2)
    };
    let (a, _) = train(model.clone(), &set, &cfg).unwrap();
    let (b, _) = train(model.clone(), &set, &cfg).unwrap();
    let (c, _) = train(model, &set, &small_cfg(2)).unwrap();
    assert_eq!(a.params(), b.params());
    assert_ne!(a.params(), c.params());
}

#[test]
fn dimension_mismatch_is_rejected() {
    let set = linear_gaussian_set(300, 3).unwrap();
    let model = identity_model(2);
    assert!(matches!(train(model, &set, &small_cfg(1)), Err(Error::Shape(_))));
}

#[test]
fn invalid_config_is_rejected() {
    let bad = TrainConfig {
        base_lr: 1e-3,
        max_lr: 1e-4,
        ..TrainConfig::default()
    };
    assert!(bad.validate().is_err());
    let bad = TrainConfig {
        checkpoint_every: 5,
        ..TrainConfig::default()
    };
    assert!(bad.validate().is_err());
}
