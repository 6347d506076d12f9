//! Ground-truth simulators. These are used to generate training pairs and as
//! validation references; the learned model never sees their equations.

mod builtin;
mod oracle;
mod reaction;
mod sde;
mod spde;

use rand::Rng;

use crate::error::{Error, Result};
use crate::excitation::{ExcitationSignal, LocalExcitationParams};

pub use builtin::{builtin_system, SystemSetup, BUILTIN_NAMES};
pub use oracle::{ou_moment_oracle, ou_moment_oracle_with_diffusion, MomentCurves};
pub use reaction::{
    mnrm_simulate, mnrm_simulate_counted, PropensityFn, ReactionNetworkSpec, MAX_FIRINGS, RATE_SUBINTERVALS,
};
pub use sde::{em_advance, em_step, DiffusionFn, DriftFn, SdeSpec};
pub use spde::{spde_step, SpdeSpec};

/// Input values seen by a simulator at local time `tau` within one step.
pub trait Forcing {
    fn n_u(&self) -> usize;
    fn eval(&self, tau: f64, out: &mut [f64]);
}

impl Forcing for LocalExcitationParams<f64> {
    fn n_u(&self) -> usize {
        LocalExcitationParams::n_u(self)
    }

    fn eval(&self, tau: f64, out: &mut [f64]) {
        self.reconstruct_into(tau, out)
    }
}

/// The raw signal restricted to `[t0, t0 + dt)`, as used by reference
/// simulations that must not see the local parameterization.
pub struct SignalWindow<'a> {
    pub signal: &'a ExcitationSignal<f64>,
    pub t0: f64,
}

impl Forcing for SignalWindow<'_> {
    fn n_u(&self) -> usize {
        self.signal.n_u()
    }

    fn eval(&self, tau: f64, out: &mut [f64]) {
        // Callers validate the signal's domain before stepping.
        if self.signal.eval_into(self.t0 + tau, out).is_err() {
            out.iter_mut().for_each(|v| *v = f64::NAN);
        }
    }
}

/// A ground-truth system of any supported kind.
#[derive(Clone, Debug)]
pub enum SystemKind {
    Sde(SdeSpec),
    Reaction(ReactionNetworkSpec),
    Spde(SpdeSpec),
}

impl SystemKind {
    pub fn d(&self) -> usize {
        match self {
            SystemKind::Sde(s) => s.d,
            SystemKind::Reaction(r) => r.n_species,
            SystemKind::Spde(p) => p.dim(),
        }
    }

    pub fn n_u(&self) -> usize {
        match self {
            SystemKind::Sde(s) => s.n_u,
            SystemKind::Reaction(r) => r.n_u,
            SystemKind::Spde(_) => 1,
        }
    }

    /// Whether states are nonnegative integers (jump processes).
    pub fn integer_state(&self) -> bool {
        matches!(self, SystemKind::Reaction(_))
    }

    /// Advance `x` by one step of length `dt` under `forcing`.
    pub fn advance<F: Forcing, R: Rng + ?Sized>(
        &self,
        x: &[f64],
        forcing: &F,
        dt: f64,
        n_sub: usize,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        if forcing.n_u() != self.n_u() {
            return Err(Error::Config(format!(
                "system expects {} input channels, forcing has {}",
                self.n_u(),
                forcing.n_u()
            )));
        }
        match self {
            SystemKind::Sde(s) => em_advance(s, x, forcing, dt, n_sub, rng),
            SystemKind::Spde(p) => spde::spde_advance(p, x, forcing, dt, n_sub, rng),
            SystemKind::Reaction(r) => {
                let mut xi = Vec::with_capacity(x.len());
                for &v in x {
                    if v < 0.0 || v.fract() != 0.0 || !v.is_finite() {
                        return Err(Error::Model(format!(
                            "reaction network state must be a nonnegative integer, got {v}"
                        )));
                    }
                    xi.push(v as i64);
                }
                let (out, _) = reaction::mnrm_advance(r, &xi, forcing, dt, rng)?;
                Ok(out.into_iter().map(|v| v as f64).collect())
            }
        }
    }
}
