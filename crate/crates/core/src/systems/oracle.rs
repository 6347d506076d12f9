//! Moment ODEs of the linear OU process, used as validation oracles.

use crate::error::{Error, Result};
use crate::excitation::ExcitationSignal;

/// Largest integration substep.
const MAX_SUBSTEP: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct MomentCurves {
    pub times: Vec<f64>,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl MomentCurves {
    pub fn std(&self) -> Vec<f64> {
        self.variance.iter().map(|v| v.max(0.0).sqrt()).collect()
    }
}

/// Mean and variance of `dx = (-mu x + alpha(t)) dt + sigma dW`, `x(0) = x0`,
/// from `m' = -mu m + alpha`, `v' = -2 mu v + sigma^2` integrated with RK4.
pub fn ou_moment_oracle(
    mu: f64,
    sigma: f64,
    alpha: &ExcitationSignal<f64>,
    x0: f64,
    t_grid: &[f64],
) -> Result<MomentCurves> {
    ou_moment_oracle_with_diffusion(mu, alpha, |_| sigma * sigma, x0, t_grid)
}

/// As [`ou_moment_oracle`] with a time-dependent squared diffusion `beta(t)^2`.
pub fn ou_moment_oracle_with_diffusion<B: Fn(f64) -> f64>(
    mu: f64,
    alpha: &ExcitationSignal<f64>,
    beta_sq: B,
    x0: f64,
    t_grid: &[f64],
) -> Result<MomentCurves> {
    if t_grid.first().is_some_and(|&t| t < 0.0) || t_grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Config("t_grid must be nondecreasing from 0".into()));
    }
    let a = |t: f64| -> f64 {
        let mut out = vec![0.0; alpha.n_u()];
        alpha.eval_into(t, &mut out).map(|_| out[0]).unwrap_or(f64::NAN)
    };
    let rhs = |t: f64, m: f64, v: f64| (-mu * m + a(t), -2.0 * mu * v + beta_sq(t));

    let (mut t, mut m, mut v) = (0.0, x0, 0.0);
    let mut mean = Vec::with_capacity(t_grid.len());
    let mut variance = Vec::with_capacity(t_grid.len());
    for &target in t_grid {
        let span = target - t;
        if span > 0.0 {
            let n = (span / MAX_SUBSTEP).ceil() as usize;
            let h = span / n as f64;
            for i in 0..n {
                let s = t + i as f64 * h;
                let k1 = rhs(s, m, v);
                let k2 = rhs(s + 0.5 * h, m + 0.5 * h * k1.0, v + 0.5 * h * k1.1);
                let k3 = rhs(s + 0.5 * h, m + 0.5 * h * k2.0, v + 0.5 * h * k2.1);
                let k4 = rhs(s + h, m + h * k3.0, v + h * k3.1);
                m += h / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
                v += h / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
            }
            t = target;
        }
        mean.push(m);
        variance.push(v);
    }
    Ok(MomentCurves {
        times: t_grid.to_vec(),
        mean,
        variance,
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::systems::{builtin_system, SignalWindow};

    #[test]
    fn closed_forms() {
        let zero = ExcitationSignal::constant(vec![0.0]);
        let c = ou_moment_oracle(1.0, 0.2, &zero, 2.0, &[0.0, 1.0, 4.0]).unwrap();
        assert_eq!(c.mean[0], 2.0);
        assert!((c.mean[1] - 2.0 * (-1.0f64).exp()).abs() < 1e-12);
        assert!((c.mean[1] - 0.7358).abs() < 1e-4);
        assert!((c.variance[2] - 0.02 * (1.0 - (-8.0f64).exp())).abs() < 1e-6);
    }

    #[test]
    fn sine_forcing_matches_monte_carlo() {
        // EM Monte Carlo with the raw signal; 10 substeps per 0.01 keep the
        // discretization bias well under the statistical tolerance.
        let setup = builtin_system("ou_drift").unwrap();
        let alpha = ExcitationSignal::scalar(|t: f64| 0.5 * (6.0 * t).sin());
        let times = [2.0, 4.0, 8.0];
        let oracle = ou_moment_oracle(1.0, 0.2, &alpha, 2.0, &times).unwrap();
        let n = 20_000;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut sums = [0.0; 3];
        for _ in 0..n {
            let mut x = vec![2.0];
            let mut k = 0;
            for step in 0..800 {
                let w = SignalWindow {
                    signal: &alpha,
                    t0: step as f64 * 0.01,
                };
                x = setup.kind.advance(&x, &w, 0.01, 10, &mut rng).unwrap();
                if step + 1 == [200, 400, 800][k] {
                    sums[k] += x[0];
                    k = (k + 1).min(2);
                }
            }
        }
        for (i, s) in sums.iter().enumerate() {
            let mean = s / n as f64;
            let se = (oracle.variance[i] / n as f64).sqrt();
            assert!(
                (mean - oracle.mean[i]).abs() < 3.0 * se,
                "t={} mean {mean}",
                times[i]
            );
        }
    }
}
