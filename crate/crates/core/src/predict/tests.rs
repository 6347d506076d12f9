use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::dataset::{generate_training_set, linear_gaussian_set, NormStats};
use crate::excitation::{BasisFamily, BasisSpec};
use crate::flow::{FlowConfig, ModelMeta};
use crate::systems::{builtin_system, ou_moment_oracle};

fn ou_signal() -> ExcitationSignal<f64> {
    ExcitationSignal::scalar(|t: f64| 0.5 * (6.0 * t).sin())
}

fn random_flow(seed: u64) -> FlowModel<f64> {
    let set = linear_gaussian_set(500, seed).unwrap();
    let mut f = FlowModel::for_training_set(&set, false, seed).unwrap();
    f.randomize(0.5, seed);
    f
}

/// KS two-sample critical value at level 0.01.
fn ks_crit(n: usize, m: usize) -> f64 {
    1.63 * ((n + m) as f64 / (n * m) as f64).sqrt()
}

#[test]
fn single_step_rollout_is_one_sample() {
    let flow = random_flow(3);
    let u = ExcitationSignal::scalar(|t: f64| 0.3 + t);
    let basis = flow.meta().basis().unwrap();
    let gamma = parameterize_step(&u, 0.0, &basis).unwrap();
    let want = flow
        .sample(&[0.7], gamma.coeffs(), 1, &mut ChaCha8Rng::seed_from_u64(9))
        .unwrap();
    let got = rollout(&flow, &[0.7], &u, 1, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!(got.state(0, 0), &[0.7]);
    assert_eq!(got.state(0, 1), want[0].as_slice());
}

#[test]
fn rollout_and_ensemble_are_reproducible() {
    let flow = random_flow(4);
    let u = ExcitationSignal::scalar(|t: f64| (3.0 * t).cos());
    let a = rollout(&flow, &[0.1], &u, 50, &mut rng::split(5, 0)).unwrap();
    let b = rollout(&flow, &[0.1], &u, 50, &mut rng::split(5, 0)).unwrap();
    assert_eq!(a, b);
    let single = ensemble(&flow, &[0.1], &u, 50, 1, 5).unwrap();
    assert_eq!(single.raw(), a.raw());

    // members do not depend on how many others share the batch
    let big = ensemble(&flow, &[0.1], &u, 50, 12, 5).unwrap();
    assert_eq!(
        big.to_bytes(),
        ensemble(&flow, &[0.1], &u, 50, 12, 5).unwrap().to_bytes()
    );
    for m in 0..12 {
        let alone = rollout(&flow, &[0.1], &u, 50, &mut rng::split(5, m as u64)).unwrap();
        assert_eq!(alone.raw(), big.trajectory(m));
    }
    let m = moments(&big).unwrap();
    assert_eq!(m.mean[[0, 0]], 0.1);
    assert_eq!(m.std[[0, 0]], 0.0);
}

fn ensemble_from(
    n_ens: usize,
    n_steps: usize,
    d: usize,
    f: impl Fn(usize, usize, usize) -> f64,
) -> TrajectoryEnsemble {
    let mut v = Vec::new();
    for m in 0..n_ens {
        for n in 0..=n_steps {
            for k in 0..d {
                v.push(f(m, n, k));
            }
        }
    }
    TrajectoryEnsemble::new(n_ens, n_steps, d, 0.5, v).unwrap()
}

#[test]
fn moments_of_simple_ensembles() {
    let c = ensemble_from(5, 3, 2, |_, n, k| (n + k) as f64);
    let mc = moments(&c).unwrap();
    assert!(mc.std.iter().all(|&s| s == 0.0));
    assert_eq!(mc.mean[[2, 1]], 3.0);

    let (a, b) = (1.25, -3.5);
    let two = ensemble_from(2, 1, 1, |m, _, _| if m == 0 { a } else { b });
    let m2 = moments(&two).unwrap();
    assert!((m2.mean[[1, 0]] - (a + b) / 2.0).abs() < 1e-15);
    assert!((m2.std[[1, 0]] - (a - b).abs() / 2f64.sqrt()).abs() < 1e-15);

    assert!(moments(&ensemble_from(1, 1, 1, |_, _, _| 0.0)).is_err());
}

#[test]
fn moments_of_gaussian_slices() {
    let n = 20_000;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let draws: Vec<f64> = (0..n)
        .map(|_| 3.0 + 2.0 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let ens = ensemble_from(n, 0, 1, |m, _, _| draws[m]);
    let mo = moments(&ens).unwrap();
    let se_mean = 2.0 / (n as f64).sqrt();
    let se_std = 2.0 / (2.0 * n as f64).sqrt();
    assert!((mo.mean[[0, 0]] - 3.0).abs() < 3.0 * se_mean);
    assert!((mo.std[[0, 0]] - 2.0).abs() < 3.0 * se_std);
}

#[test]
fn snapshot_distances() {
    let n = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut normals = |shift: f64| -> Vec<f64> {
        (0..n)
            .map(|_| shift + rng.sample::<f64, _>(StandardNormal))
            .collect()
    };
    let (a, b, c) = (normals(0.0), normals(0.0), normals(1.0));
    let ens = |v: &Vec<f64>| ensemble_from(n, 2, 1, |m, s, _| if s == 2 { v[m] } else { 0.0 });
    let (ea, eb, ec) = (ens(&a), ens(&b), ens(&c));

    let same = snapshot_distance(&ea, &ea, 1.0).unwrap();
    assert_eq!(same[0], SnapshotDistance { w1: 0.0, ks: 0.0 });
    let shifted = snapshot_distance(&ea, &ec, 1.0).unwrap()[0];
    assert!((shifted.w1 - 1.0).abs() < 0.05, "{shifted:?}");
    let indep = snapshot_distance(&ea, &eb, 1.0).unwrap()[0];
    assert!(indep.ks < ks_crit(n, n), "{indep:?}");
    assert!(snapshot_distance(&ea, &eb, 0.7).is_err());
    assert!(snapshot_distance(&ea, &eb, 1.5).is_err());
}

#[test]
fn ensemble_export_round_trip_and_corruption() {
    let flow = random_flow(7);
    let u = ExcitationSignal::constant(vec![0.2]);
    let mut ens = ensemble(&flow, &[0.0], &u, 20, 7, 1).unwrap();
    ens.name = "linear".into();
    let bytes = ens.to_bytes();
    let back = TrajectoryEnsemble::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes(), bytes);
    assert_eq!((back.n_ens, back.n_steps, back.d, back.dt), (7, 20, 1, 1.0));
    assert_eq!(back.name, "linear");

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("e.sfme");
    ens.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert_eq!(TrajectoryEnsemble::load(&path).unwrap().raw(), ens.raw());

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(
        TrajectoryEnsemble::from_bytes(&bad),
        Err(Error::Format { offset: 0, .. })
    ));
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(matches!(
        TrajectoryEnsemble::from_bytes(&bad),
        Err(Error::Format { offset: 4, .. })
    ));
    assert!(TrajectoryEnsemble::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    let mut long = bytes.clone();
    long.push(0);
    assert!(TrajectoryEnsemble::from_bytes(&long).is_err());
    // a NaN state is rejected
    let mut nan = bytes;
    let at = nan.len() - 8;
    nan[at..].copy_from_slice(&f64::NAN.to_le_bytes());
    assert!(TrajectoryEnsemble::from_bytes(&nan).is_err());
}

#[test]
fn truth_self_comparison_is_at_noise_floor() {
    let setup = builtin_system("ou_drift").unwrap();
    let truth = TruthModel::from_setup(&setup);
    let scenario = Scenario {
        x0: vec![2.0],
        signal: ou_signal(),
        t_end: 1.0,
        n_ens: 2000,
        seed: 11,
    };
    let report = validate(&truth, &truth, &scenario, &[0.5, 1.0]).unwrap();
    assert_eq!(report.snapshots.len(), 2);
    for s in &report.snapshots {
        assert!(s.distance.ks < ks_crit(2000, 2000), "{s:?}");
        // stationary std is about 0.14; W1 noise is a fraction of that
        assert!(s.distance.w1 < 0.02, "{s:?}");
        assert_eq!(s.model_hist.edges, s.truth_hist.edges);
        assert_eq!(s.model_hist.counts.iter().sum::<u64>(), 2000);
    }
    let se = 0.15 / (2000f64).sqrt();
    assert!(report.max_abs_mean_error[0] < 5.0 * se * 2f64.sqrt());
    assert!(report.warnings.is_empty());

    let text = report.to_text();
    assert!(text.starts_with("summary coord=0 "));
    assert_eq!(text.lines().filter(|l| l.starts_with("snapshot ")).count(), 2);
    assert_eq!(text.lines().filter(|l| l.starts_with("moment ")).count(), 101);
    assert!(report.plot_data().lines().count() > 2);
}

#[test]
fn validator_flags_untrained_flow() {
    let setup = builtin_system("ou_drift").unwrap();
    let set = generate_training_set(&setup, 2000, 1).unwrap();
    let flow = FlowModel::<f64>::for_training_set(&set, false, 0).unwrap();
    let scenario = Scenario {
        x0: vec![2.0],
        signal: ou_signal(),
        t_end: 4.0,
        n_ens: 500,
        seed: 2,
    };
    let report = validate(&flow, &TruthModel::from_setup(&setup), &scenario, &[4.0]).unwrap();
    assert!(
        report.snapshots[0].distance.w1 > 0.1,
        "{:?}",
        report.snapshots[0].distance
    );
}

#[test]
fn truth_moments_converge_to_oracle() {
    let setup = builtin_system("ou_drift").unwrap();
    let truth = TruthModel::from_setup(&setup);
    let u = ou_signal();
    let n_steps = 100;
    let grid: Vec<f64> = (0..=n_steps).map(|n| n as f64 * 0.01).collect();
    let oracle = ou_moment_oracle(1.0, 0.2, &u, 2.0, &grid).unwrap();
    let mut errors = Vec::new();
    for n_ens in [250, 1000, 4000] {
        let ens = ensemble(&truth, &[2.0], &u, n_steps, n_ens, 3).unwrap();
        let m = moments(&ens).unwrap();
        let rms = (m
            .mean
            .column(0)
            .iter()
            .zip(&oracle.mean)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / grid.len() as f64)
            .sqrt();
        errors.push(rms);
    }
    assert!(errors[1] < errors[0] && errors[2] < errors[1], "{errors:?}");
    // quadrupling the ensemble roughly halves the error
    assert!(errors[2] < 0.75 * errors[0], "{errors:?}");
}

#[test]
fn law_of_one_step_is_time_homogeneous() {
    let u = ExcitationSignal::constant(vec![0.4]);
    let n = 4000;
    let flow = random_flow(8);
    let setup = builtin_system("ou_drift").unwrap();
    let truth = TruthModel::from_setup(&setup);

    fn one_step<M: OneStepModel>(
        m: &M,
        u: &ExcitationSignal<f64>,
        t_n: f64,
        n: usize,
        seed: u64,
    ) -> Vec<f64> {
        let mut states = vec![0.5; n * m.d()];
        let mut rngs: Vec<_> = (0..n as u64).map(|i| rng::split(seed, i)).collect();
        m.step_batch(&mut states, u, t_n, &mut rngs).unwrap();
        states
    }
    for (early, late) in [
        (one_step(&flow, &u, 0.0, n, 1), one_step(&flow, &u, 37.0, n, 2)),
        (one_step(&truth, &u, 0.0, n, 1), one_step(&truth, &u, 3.7, n, 2)),
    ] {
        let ks = stats::ks_two_sample(&early, &late);
        assert!(ks < ks_crit(n, n), "ks {ks}");
    }
}

fn integer_flow() -> FlowModel<f64> {
    let meta = ModelMeta {
        n_u: 1,
        basis_family: BasisFamily::PiecewiseConstant,
        m: 1,
        dt: 1.0,
        x_box: Some(IntervalBox::cube(0.0, 10.0, 2).unwrap()),
        integer_state: true,
        system: "counts".into(),
    };
    let mut norm = NormStats::identity(2, 1);
    norm.target_scale = vec![3.0, 3.0];
    FlowModel::new(FlowConfig::new(2, 1), meta, norm, 0).unwrap()
}

#[test]
fn integer_models_floor_and_stay_nonnegative() {
    let flow = integer_flow();
    let ens = ensemble(
        &flow,
        &[4.0, 6.0],
        &ExcitationSignal::constant(vec![0.0]),
        30,
        50,
        1,
    )
    .unwrap();
    assert!(ens.raw().iter().all(|&v| v >= 0.0 && v.fract() == 0.0));
    assert!(moments(&ens).unwrap().std[[30, 0]] > 0.0);
}

#[test]
fn guard_box_exits_are_warnings() {
    let flow = integer_flow();
    let u = ExcitationSignal::constant(vec![0.0]);
    // 1.5x of [0, 10] is [-2.5, 12.5]
    let ens = ensemble(&flow, &[13.0, 1.0], &u, 3, 4, 1).unwrap();
    assert_eq!(ens.warnings.len(), 4);
    assert!(ens
        .warnings
        .iter()
        .all(|w| w.step == 0 && w.state == vec![13.0, 1.0]));
    let quiet = ensemble_with_guard(&flow, &[13.0, 1.0], &u, 3, 4, 1, None).unwrap();
    assert!(quiet.warnings.is_empty());
    assert_eq!(quiet.raw(), ens.raw());
}

#[test]
fn invalid_inputs_are_rejected() {
    let flow = random_flow(1);
    let u = ExcitationSignal::constant(vec![0.0]);
    assert!(matches!(
        ensemble(&flow, &[0.0, 1.0], &u, 3, 2, 0),
        Err(Error::Shape(_))
    ));
    assert!(matches!(
        ensemble(
            &flow,
            &[0.0],
            &ExcitationSignal::constant(vec![0.0, 1.0]),
            3,
            2,
            0
        ),
        Err(Error::Shape(_))
    ));
    assert!(matches!(
        ensemble(&flow, &[0.0], &u, 0, 2, 0),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        ensemble(&flow, &[0.0], &u, 3, 0, 0),
        Err(Error::Config(_))
    ));
    assert!(ensemble(&flow, &[f64::NAN], &u, 3, 2, 0).is_err());

    // a sampled signal that ends before the horizon cannot be parameterized
    let short = ExcitationSignal::sampled(1, vec![0.0, 1.0, 2.0], vec![0.0, 1.0, 0.0]).unwrap();
    assert!(matches!(
        ensemble(&flow, &[0.0], &short, 5, 2, 0),
        Err(Error::Domain(_))
    ));

    let setup = builtin_system("ou_drift").unwrap();
    let scenario = Scenario {
        x0: vec![0.0],
        signal: u,
        t_end: 0.015,
        n_ens: 10,
        seed: 0,
    };
    let truth = TruthModel::from_setup(&setup);
    assert!(validate(&truth, &truth, &scenario, &[]).is_err());
    // step mismatch between the learned model (dt = 1) and the truth
    let ok = Scenario {
        t_end: 1.0,
        ..scenario
    };
    assert!(matches!(validate(&flow, &truth, &ok, &[]), Err(Error::Config(_))));
}

#[test]
fn piecewise_linear_models_read_sampled_signals_at_endpoints() {
    let meta = ModelMeta {
        n_u: 1,
        basis_family: BasisFamily::PiecewiseLinear,
        m: 2,
        dt: 0.5,
        x_box: None,
        integer_state: false,
        system: "pl".into(),
    };
    let mut flow = FlowModel::new(FlowConfig::new(1, 2), meta, NormStats::identity(1, 2), 0).unwrap();
    flow.randomize(0.5, 2);
    let u = ExcitationSignal::sampled(1, vec![0.0, 0.5, 1.0], vec![1.0, 2.0, 0.0]).unwrap();
    let basis = BasisSpec::piecewise_linear(0.5).unwrap();
    let g1 = parameterize_step(&u, 0.5, &basis).unwrap();
    assert_eq!(g1.coeffs(), &[2.0, -4.0]);
    let ens = rollout(&flow, &[0.0], &u, 2, &mut rng::split(1, 0)).unwrap();
    let mut r = rng::split(1, 0);
    let x1 = flow.sample(&[0.0], &[1.0, 2.0], 1, &mut r).unwrap()[0][0];
    let x2 = flow.sample(&[x1], g1.coeffs(), 1, &mut r).unwrap()[0][0];
    assert_eq!(ens.state(0, 1), &[x1]);
    assert_eq!(ens.state(0, 2), &[x2]);
}
