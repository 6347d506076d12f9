use std::f64::consts::PI;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::stats::{ks_one_sample, normal_cdf};

fn meta(n_gamma: usize) -> ModelMeta {
    ModelMeta {
        n_u: n_gamma,
        basis_family: BasisFamily::PiecewiseConstant,
        m: 1,
        dt: 0.1,
        x_box: None,
        integer_state: false,
        system: "test".into(),
    }
}

fn identity_flow(d: usize, n_gamma: usize) -> FlowModel<f64> {
    FlowModel::new(
        FlowConfig::new(d, n_gamma),
        meta(n_gamma),
        NormStats::identity(d, n_gamma),
        1,
    )
    .unwrap()
}

fn random_flow(d: usize, n_gamma: usize, seed: u64) -> FlowModel<f64> {
    let mut norm = NormStats::identity(d, n_gamma);
    norm.target_scale = (0..d).map(|i| 0.5 + 0.3 * i as f64).collect();
    norm.target_shift = (0..d).map(|i| 0.1 * i as f64).collect();
    norm.ctx_scale = (0..d + n_gamma).map(|i| 1.0 + 0.2 * i as f64).collect();
    let mut f = FlowModel::new(FlowConfig::new(d, n_gamma), meta(n_gamma), norm, seed).unwrap();
    f.randomize(1.5, seed);
    f
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

#[test]
fn zero_output_layers_give_identity() {
    let f = identity_flow(3, 2);
    let z = [0.3, -1.2, 2.5];
    let x0 = [0.0; 3];
    let g = [0.7, -0.1];
    assert_eq!(f.forward_t(&z, &x0, &g).unwrap(), z.to_vec());
    let (back, ld) = f.inverse_s(&z, &x0, &g).unwrap();
    assert_eq!(back, z.to_vec());
    assert_eq!(ld, 0.0);
}

#[test]
fn forced_affine_layer() {
    let mut cfg = FlowConfig::new(1, 1);
    cfg.layers = 1;
    let mut f = FlowModel::<f64>::zeros(cfg, meta(1), NormStats::identity(1, 1)).unwrap();
    f.force_layer_affine(0, 2f64.ln(), 3.0).unwrap();
    let x = f.forward_t(&[0.5], &[0.0], &[0.0]).unwrap();
    assert!((x[0] - 4.0).abs() < 1e-12);
    let (z, ld) = f.inverse_s(&[4.0], &[0.0], &[0.0]).unwrap();
    assert!((z[0] - 0.5).abs() < 1e-12);
    assert!((ld + 2f64.ln()).abs() < 1e-12);
}

#[test]
fn base_log_density_of_identity_flow() {
    let f = identity_flow(1, 1);
    let lp = f.log_prob(&[0.0], &[0.0], &[0.0]).unwrap();
    assert!((lp + 0.5 * (2.0 * PI).ln()).abs() < 1e-12);
    assert!((lp + 0.9189).abs() < 1e-4);
    let f = identity_flow(2, 1);
    let lp = f.log_prob(&[0.0, 0.0], &[0.0, 0.0], &[0.0]).unwrap();
    assert!((lp + 1.8379).abs() < 1e-4);
}

#[test]
fn detailed_density_parts_add_up() {
    let f = random_flow(3, 2, 4);
    let dens = f
        .log_prob_detailed(&[0.2, 0.1, -0.4], &[1.0, 0.0, 0.5], &[0.3, -0.2])
        .unwrap();
    assert_eq!(dens.layer_log_dets.len(), 5);
    let sum = dens.base_log_density + dens.total_log_det();
    assert!((sum - dens.log_density).abs() < 1e-12);
    let (_, ld) = f
        .inverse_s(&[0.2, 0.1, -0.4], &[1.0, 0.0, 0.5], &[0.3, -0.2])
        .unwrap();
    assert!((ld - dens.total_log_det()).abs() < 1e-12);
}

#[test]
fn random_flow_is_invertible_with_consistent_log_dets() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for seed in 0..5 {
        let f = random_flow(3, 2, seed);
        for _ in 0..20 {
            let z = normals(&mut rng, 3);
            let x0 = normals(&mut rng, 3);
            let g = normals(&mut rng, 2);
            let row = |v: &[f64]| Array2::from_shape_vec((1, v.len()), v.to_vec()).unwrap();
            let (x, ld_t) = f
                .forward_batch_with_log_det(row(&z), &row(&x0), &row(&g))
                .unwrap();
            let x = x.row(0).to_vec();
            let (back, ld_s) = f.inverse_s(&x, &x0, &g).unwrap();
            for (a, b) in back.iter().zip(&z) {
                assert!((a - b).abs() < 1e-6);
            }
            assert!((ld_t[0] + ld_s).abs() < 1e-8);
            let (zz, _) = f.inverse_s(&z, &x0, &g).unwrap();
            let again = f.forward_t(&zz, &x0, &g).unwrap();
            for (a, b) in again.iter().zip(&z) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn log_det_matches_finite_difference_jacobian() {
    let f = random_flow(3, 2, 7);
    let x0 = [0.4, -0.3, 1.0];
    let g = [0.5, -1.0];
    let x1 = [0.9, 0.2, -0.5];
    let (_, ld) = f.inverse_s(&x1, &x0, &g).unwrap();
    let h = 1e-5;
    let mut jac = [[0.0; 3]; 3];
    for j in 0..3 {
        let mut p = x1;
        let mut m = x1;
        p[j] += h;
        m[j] -= h;
        let zp = f.inverse_s(&p, &x0, &g).unwrap().0;
        let zm = f.inverse_s(&m, &x0, &g).unwrap().0;
        for i in 0..3 {
            jac[i][j] = (zp[i] - zm[i]) / (2.0 * h);
        }
    }
    let det = jac[0][0] * (jac[1][1] * jac[2][2] - jac[1][2] * jac[2][1])
        - jac[0][1] * (jac[1][0] * jac[2][2] - jac[1][2] * jac[2][0])
        + jac[0][2] * (jac[1][0] * jac[2][1] - jac[1][1] * jac[2][0]);
    let fd = det.abs().ln();
    assert!((fd - ld).abs() <= 1e-4 * ld.abs().max(1.0), "fd {fd} vs {ld}");
}

fn batch_nll(f: &FlowModel<f64>, x1: &Array2<f64>, x0: &Array2<f64>, g: &Array2<f64>) -> f64 {
    -f.log_prob_batch(x1, x0, g).unwrap().mean().unwrap()
}

#[test]
fn analytic_gradient_matches_finite_differences() {
    let d = 2;
    let ng = 3;
    let mut f = random_flow(d, ng, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let b = 16;
    let x0 = Array2::from_shape_vec((b, d), normals(&mut rng, b * d)).unwrap();
    let x1 = Array2::from_shape_vec((b, d), normals(&mut rng, b * d)).unwrap();
    let g = Array2::from_shape_vec((b, ng), normals(&mut rng, b * ng)).unwrap();
    let ctx = f.standardize_context(&x0, &g);
    let v = f.standardize_target(&x0, &x1);
    let mut grad = vec![0.0; f.n_params()];
    let loss = f.nll_and_grad(v, &ctx, &mut grad).unwrap();
    assert!((loss - batch_nll(&f, &x1, &x0, &g)).abs() < 1e-12);

    let h = 1e-5;
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    while checked < 50 {
        let i = rng.random_range(0..f.n_params());
        let orig = f.params[i];
        f.params[i] = orig + h;
        let lp = batch_nll(&f, &x1, &x0, &g);
        f.params[i] = orig - h;
        let lm = batch_nll(&f, &x1, &x0, &g);
        f.params[i] = orig;
        let fd = (lp - lm) / (2.0 * h);
        let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
        worst = worst.max(rel);
        checked += 1;
    }
    assert!(worst < 1e-4, "worst relative gradient error {worst}");
}

#[test]
fn single_layer_is_autoregressive() {
    let mut cfg = FlowConfig::new(4, 1);
    cfg.layers = 1;
    let mut f = FlowModel::<f64>::zeros(cfg, meta(1), NormStats::identity(4, 1)).unwrap();
    f.randomize(1.0, 9);
    let x0 = [0.1, 0.2, 0.3, 0.4];
    let g = [0.5];
    let z = [0.3, -0.7, 1.1, 0.2];
    let base = f.forward_t(&z, &x0, &g).unwrap();
    for j in 0..4 {
        let mut zp = z;
        zp[j] += 0.5;
        let out = f.forward_t(&zp, &x0, &g).unwrap();
        for i in 0..4 {
            if i < j {
                assert_eq!(out[i], base[i], "z_{j} leaked into x_{i}");
            } else if i == j {
                assert_ne!(out[i], base[i]);
            }
        }
    }
}

#[test]
fn one_dimensional_density_integrates_to_one() {
    let f = random_flow(1, 2, 21);
    let x0 = [0.3];
    let g = [0.4, -0.8];
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let s: Vec<f64> = f
        .sample(&x0, &g, 4000, &mut rng)
        .unwrap()
        .into_iter()
        .map(|v| v[0])
        .collect();
    let m = crate::stats::mean(&s);
    let sd = crate::stats::sample_std(&s);
    let (lo, hi) = (m - 10.0 * sd, m + 10.0 * sd);
    let n = 40_000;
    let h = (hi - lo) / n as f64;
    let x1 = Array2::from_shape_fn((n + 1, 1), |(i, _)| lo + i as f64 * h);
    let x0b = Array2::from_elem((n + 1, 1), x0[0]);
    let gb = Array2::from_shape_fn((n + 1, 2), |(_, j)| g[j]);
    let p = f.log_prob_batch(&x1, &x0b, &gb).unwrap().mapv(f64::exp);
    let integral = h * (p.sum() - 0.5 * (p[0] + p[n]));
    assert!((integral - 1.0).abs() < 1e-3, "integral {integral}");
}

#[test]
fn two_dimensional_density_importance_check() {
    let f = random_flow(2, 1, 8);
    let x0 = [0.2, -0.1];
    let g = [0.6];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let s = f.sample(&x0, &g, 5000, &mut rng).unwrap();
    let col = |k: usize| s.iter().map(|v| v[k]).collect::<Vec<_>>();
    let (m0, m1) = (crate::stats::mean(&col(0)), crate::stats::mean(&col(1)));
    let (s0, s1) = (
        3.0 * crate::stats::sample_std(&col(0)),
        3.0 * crate::stats::sample_std(&col(1)),
    );
    let n = 100_000;
    let e = normals(&mut rng, 2 * n);
    let x1 = Array2::from_shape_fn((n, 2), |(i, k)| {
        if k == 0 {
            m0 + s0 * e[2 * i]
        } else {
            m1 + s1 * e[2 * i + 1]
        }
    });
    let q: Vec<f64> = (0..n)
        .map(|i| {
            let (a, b) = (e[2 * i], e[2 * i + 1]);
            (-0.5 * (a * a + b * b)).exp() / (2.0 * PI * s0 * s1)
        })
        .collect();
    let x0b = Array2::from_shape_fn((n, 2), |(_, k)| x0[k]);
    let gb = Array2::from_elem((n, 1), g[0]);
    let p = f.log_prob_batch(&x1, &x0b, &gb).unwrap();
    let w: Vec<f64> = p.iter().zip(&q).map(|(lp, q)| lp.exp() / q).collect();
    let mean = crate::stats::mean(&w);
    let se = crate::stats::sample_std(&w) / (n as f64).sqrt();
    assert!((mean - 1.0).abs() < 3.0 * se, "estimate {mean} +- {se}");
}

#[test]
fn identity_flow_samples_are_standard_normal() {
    let f = identity_flow(1, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n = 10_000;
    let s: Vec<f64> = f
        .sample(&[0.0], &[0.0], n, &mut rng)
        .unwrap()
        .into_iter()
        .map(|v| v[0])
        .collect();
    let ks = ks_one_sample(&s, normal_cdf(0.0, 1.0));
    assert!(ks < 1.63 / (n as f64).sqrt(), "KS {ks}");
    let again = f
        .sample(&[0.0], &[0.0], n, &mut ChaCha8Rng::seed_from_u64(0))
        .unwrap();
    assert!(again.iter().zip(&s).all(|(a, b)| a[0] == *b));
}

#[test]
fn sample_log_prob_self_consistency() {
    // The mean log density of the model's own samples estimates the negative
    // differential entropy; two independent draws must agree.
    let f = random_flow(2, 1, 13);
    let x0 = [0.5, 0.5];
    let g = [-0.3];
    let n = 10_000;
    let draw = |seed: u64| -> Vec<f64> {
        let s = f
            .sample(&x0, &g, n, &mut ChaCha8Rng::seed_from_u64(seed))
            .unwrap();
        s.iter().map(|x| f.log_prob(x, &x0, &g).unwrap()).collect()
    };
    let a = draw(1);
    let b = draw(2);
    let se = (crate::stats::sample_std(&a).powi(2) / n as f64
        + crate::stats::sample_std(&b).powi(2) / n as f64)
        .sqrt();
    assert!((crate::stats::mean(&a) - crate::stats::mean(&b)).abs() < 3.0 * se);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let f = random_flow(3, 2, 1);
    let bytes = f.to_bytes();
    let back = FlowModel::<f64>::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes(), bytes);
    assert_eq!(back.params(), f.params());
    assert_eq!(back.meta(), f.meta());

    let f32_model: FlowModel<f32> = f.cast();
    let bytes32 = f32_model.to_bytes();
    let back32 = FlowModel::<f32>::from_bytes(&bytes32).unwrap();
    assert_eq!(back32.params(), f32_model.params());

    let mut bad = bytes.clone();
    bad[1] = b'X';
    assert!(FlowModel::<f64>::from_bytes(&bad).is_err());
    assert!(matches!(
        FlowModel::<f64>::from_bytes(&bytes[..bytes.len() - 1]),
        Err(Error::Format { .. })
    ));
    let mut ver = bytes;
    ver[4] = 9;
    assert!(matches!(
        FlowModel::<f64>::from_bytes(&ver),
        Err(Error::Format { offset: 4, .. })
    ));
}

#[test]
fn single_precision_model_agrees_with_double() {
    let f = random_flow(2, 1, 6);
    let f32_model: FlowModel<f32> = f.cast();
    let a = f.log_prob(&[0.3, -0.2], &[0.1, 0.4], &[0.5]).unwrap();
    let b = f32_model.log_prob(&[0.3, -0.2], &[0.1, 0.4], &[0.5]).unwrap();
    assert!((a - b as f64).abs() < 1e-4 * a.abs().max(1.0));
}

#[test]
fn dimension_mismatch_is_a_shape_error() {
    let f = identity_flow(2, 1);
    assert!(matches!(
        f.log_prob(&[0.0], &[0.0, 0.0], &[0.0]),
        Err(Error::Shape(_))
    ));
    assert!(matches!(
        f.forward_t(&[0.0, 0.0], &[0.0], &[0.0]),
        Err(Error::Shape(_))
    ));
}
