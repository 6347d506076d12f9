use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use super::Forcing;
use crate::error::{Error, Result};
use crate::excitation::LocalExcitationParams;

/// `(x, u, out)` with `out` of length `d`.
pub type DriftFn = Arc<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;
/// `(x, u, out)` with `out` a row-major `d x m_noise` matrix.
pub type DiffusionFn = Arc<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;

/// `dx = a(x, u) dt + b(x, u) dW`, `W` an `m_noise`-dimensional Brownian motion.
#[derive(Clone)]
pub struct SdeSpec {
    pub d: usize,
    pub m_noise: usize,
    pub n_u: usize,
    pub drift: DriftFn,
    pub diffusion: DiffusionFn,
}

impl fmt::Debug for SdeSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SdeSpec")
            .field("d", &self.d)
            .field("m_noise", &self.m_noise)
            .field("n_u", &self.n_u)
            .finish_non_exhaustive()
    }
}

impl SdeSpec {
    pub fn new<A, B>(d: usize, m_noise: usize, n_u: usize, drift: A, diffusion: B) -> Result<Self>
    where
        A: Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
        B: Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        if d == 0 || m_noise == 0 {
            return Err(Error::Config(format!(
                "SDE needs d >= 1 and m_noise >= 1, got d = {d}, m_noise = {m_noise}"
            )));
        }
        Ok(Self {
            d,
            m_noise,
            n_u,
            drift: Arc::new(drift),
            diffusion: Arc::new(diffusion),
        })
    }
}

/// One step of length `dt` taken as `n_sub` Euler-Maruyama substeps, with the
/// input reconstructed from `gamma` at each substep's left endpoint.
pub fn em_step<R: Rng + ?Sized>(
    spec: &SdeSpec,
    x: &[f64],
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
    em_advance(spec, x, gamma, dt, n_sub, rng)
}

/// [`em_step`] for any forcing.
pub fn em_advance<F: Forcing + ?Sized, R: Rng + ?Sized>(
    spec: &SdeSpec,
    x: &[f64],
    forcing: &F,
    dt: f64,
    n_sub: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if n_sub == 0 {
        return Err(Error::Config("n_sub must be >= 1".into()));
    }
    if x.len() != spec.d {
        return Err(Error::Shape(format!(
            "state has length {}, SDE dimension is {}",
            x.len(),
            spec.d
        )));
    }
    let h = dt / n_sub as f64;
    let sqrt_h = h.sqrt();
    let mut state = x.to_vec();
    let mut u = vec![0.0; spec.n_u];
    let mut a = vec![0.0; spec.d];
    let mut b = vec![0.0; spec.d * spec.m_noise];
    let mut dw = vec![0.0; spec.m_noise];
    for sub in 0..n_sub {
        forcing.eval(sub as f64 * h, &mut u);
        (spec.drift)(&state, &u, &mut a);
        (spec.diffusion)(&state, &u, &mut b);
        for w in dw.iter_mut() {
            *w = sqrt_h * rng.sample::<f64, _>(StandardNormal);
        }
        for i in 0..spec.d {
            let noise: f64 = (0..spec.m_noise).map(|j| b[i * spec.m_noise + j] * dw[j]).sum();
            state[i] += a[i] * h + noise;
        }
        if let Some(i) = state.iter().position(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                substep: sub,
                detail: format!("coordinate {i} became {}", state[i]),
            });
        }
    }
    Ok(state)
}
