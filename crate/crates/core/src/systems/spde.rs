//! Stochastic heat equation `u_t = eps u_xx + alpha(t) g(x) + sigma xi` on the
//! periodic interval `(0, 2 pi)`, advanced in modal space.
//!
//! State layout (length `N + 1`, `N` even): `c[0]` is the mean mode,
//! `c[2k - 1]` and `c[2k]` are the `cos(kx)` and `sin(kx)` coefficients for
//! `k = 1..=N/2`. The field is `u(x) = c0 + sum_k c_{2k-1} cos kx + c_{2k} sin kx`.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;

use super::Forcing;
use crate::error::{Error, Result};
use crate::excitation::LocalExcitationParams;

/// Quadrature points used to project functions onto the modes.
const PROJECTION_POINTS: usize = 2048;

#[derive(Debug, Clone)]
pub struct SpdeSpec {
    /// Collocation grid size `N`; the grid spacing is `h = 2 pi / N`.
    pub n_modes: usize,
    pub eps: f64,
    pub p: f64,
    pub q: f64,
    pub sigma: f64,
    source_modes: Vec<f64>,
}

impl SpdeSpec {
    pub fn new(n_modes: usize, eps: f64, p: f64, q: f64, sigma: f64) -> Result<Self> {
        if n_modes < 2 || !n_modes.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "mode count must be even and >= 2, got {n_modes}"
            )));
        }
        if !(eps > 0.0) || !(q > 0.0) || !(sigma >= 0.0) {
            return Err(Error::Config(format!(
                "need eps > 0, q > 0, sigma >= 0 (got {eps}, {q}, {sigma})"
            )));
        }
        let mut spec = Self {
            n_modes,
            eps,
            p,
            q,
            sigma,
            source_modes: Vec::new(),
        };
        spec.source_modes = spec.project(|x| (-(x - p).powi(2) / (q * q)).exp());
        Ok(spec)
    }

    /// State dimension `N + 1`.
    pub fn dim(&self) -> usize {
        self.n_modes + 1
    }

    pub fn grid_spacing(&self) -> f64 {
        2.0 * PI / self.n_modes as f64
    }

    /// Wavenumber of state slot `i`.
    pub fn wavenumber(&self, i: usize) -> usize {
        i.div_ceil(2)
    }

    /// Modal coefficients of `f` by periodic trapezoid quadrature.
    pub fn project<F: Fn(f64) -> f64>(&self, f: F) -> Vec<f64> {
        let n = PROJECTION_POINTS;
        let dx = 2.0 * PI / n as f64;
        let vals: Vec<f64> = (0..n).map(|j| f(j as f64 * dx)).collect();
        let mut c = vec![0.0; self.dim()];
        c[0] = vals.iter().sum::<f64>() / n as f64;
        for k in 1..=self.n_modes / 2 {
            let (mut a, mut b) = (0.0, 0.0);
            for (j, v) in vals.iter().enumerate() {
                let x = j as f64 * dx;
                a += v * (k as f64 * x).cos();
                b += v * (k as f64 * x).sin();
            }
            c[2 * k - 1] = 2.0 * a / n as f64;
            c[2 * k] = 2.0 * b / n as f64;
        }
        c
    }

    /// Field value at `x` from modal coefficients.
    pub fn reconstruct(&self, c: &[f64], x: f64) -> f64 {
        let mut v = c[0];
        for k in 1..=self.n_modes / 2 {
            v += c[2 * k - 1] * (k as f64 * x).cos() + c[2 * k] * (k as f64 * x).sin();
        }
        v
    }

    /// Modal coefficients of the source profile `exp(-(x - p)^2 / q^2)`.
    pub fn source_modes(&self) -> &[f64] {
        &self.source_modes
    }
}

/// One step of length `dt` as `n_sub` Euler-Maruyama substeps of the
/// Galerkin system `c' = -eps k^2 c + alpha(t) g_hat + noise`; each mode gets an
/// independent Gaussian increment of variance `sigma^2 dt_sub / h`.
pub fn spde_step<R: Rng + ?Sized>(
    spec: &SpdeSpec,
    c: &[f64],
    gamma: &LocalExcitationParams<f64>,
    dt: f64,
    n_sub: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let basis_dt = gamma.basis().dt();
    if (basis_dt - dt).abs() > 1e-12 * dt.abs().max(1.0) {
        return Err(Error::Config(format!(
            "gamma basis step {basis_dt} differs from dt = {dt}"
        )));
    }
    spde_advance(spec, c, gamma, dt, n_sub, rng)
}

pub(crate) fn spde_advance<F: Forcing + ?Sized, R: Rng + ?Sized>(
    spec: &SpdeSpec,
    c: &[f64],
    forcing: &F,
    dt: f64,
    n_sub: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if n_sub == 0 {
        return Err(Error::Config("n_sub must be >= 1".into()));
    }
    if c.len() != spec.dim() {
        return Err(Error::Shape(format!(
            "modal state has length {}, expected {}",
            c.len(),
            spec.dim()
        )));
    }
    let h = dt / n_sub as f64;
    let noise_sd = spec.sigma * (h / spec.grid_spacing()).sqrt();
    let decay: Vec<f64> = (0..spec.dim())
        .map(|i| {
            let k = spec.wavenumber(i) as f64;
            -spec.eps * k * k
        })
        .collect();
    let mut state = c.to_vec();
    let mut alpha = [0.0];
    for sub in 0..n_sub {
        forcing.eval(sub as f64 * h, &mut alpha);
        for i in 0..state.len() {
            let drift = decay[i] * state[i] + alpha[0] * spec.source_modes[i];
            let noise = if noise_sd > 0.0 {
                noise_sd * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            state[i] += drift * h + noise;
        }
        if let Some(i) = state.iter().position(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                substep: sub,
                detail: format!("mode slot {i} became {}", state[i]),
            });
        }
    }
    Ok(state)
}
