//! The seven example systems with their training-data sampling domains.

use super::{ReactionNetworkSpec, SdeSpec, SpdeSpec, SystemKind};
use crate::error::{Error, Result};
use crate::excitation::{BasisSpec, IntervalBox};

pub const BUILTIN_NAMES: [&str; 7] = [
    "ou_drift",
    "ou_full",
    "nonlinear2d",
    "lotka_volterra",
    "double_well",
    "gene_expression",
    "stochastic_heat",
];

/// A ground-truth system plus everything needed to sample training pairs.
#[derive(Debug, Clone)]
pub struct SystemSetup {
    pub name: String,
    pub kind: SystemKind,
    /// Domain `I_x` of initial states.
    pub x_box: IntervalBox,
    /// Domain `I_gamma` of local excitation coefficients.
    pub gamma_box: IntervalBox,
    pub dt: f64,
    pub basis: BasisSpec<f64>,
    /// Solver substeps per data step.
    pub n_sub: usize,
}

impl SystemSetup {
    pub fn d(&self) -> usize {
        self.kind.d()
    }

    pub fn n_u(&self) -> usize {
        self.kind.n_u()
    }

    pub fn n_gamma(&self) -> usize {
        self.n_u() * self.basis.m()
    }

    pub fn validate(&self) -> Result<()> {
        self.x_box.validate()?;
        self.gamma_box.validate()?;
        if self.x_box.dim() != self.d() || self.gamma_box.dim() != self.n_gamma() {
            return Err(Error::Config(format!(
                "{}: box dimensions ({}, {}) do not match d = {} and n_gamma = {}",
                self.name,
                self.x_box.dim(),
                self.gamma_box.dim(),
                self.d(),
                self.n_gamma()
            )));
        }
        if (self.basis.dt() - self.dt).abs() > 1e-15 {
            return Err(Error::Config("basis step differs from data step".into()));
        }
        Ok(())
    }
}

fn diagonal(sig: [f64; 2]) -> impl Fn(&[f64], &[f64], &mut [f64]) + Send + Sync {
    move |_, _, out| {
        out.copy_from_slice(&[sig[0], 0.0, 0.0, sig[1]]);
    }
}

/// Look up one of [`BUILTIN_NAMES`].
pub fn builtin_system(name: &str) -> Result<SystemSetup> {
    let quadratic = |dt| BasisSpec::monomial(2, dt);
    let setup = match name {
        "ou_drift" => {
            let (mu, sigma) = (1.0, 0.2);
            SystemSetup {
                name: name.into(),
                kind: SystemKind::Sde(SdeSpec::new(
                    1,
                    1,
                    1,
                    move |x, u, o| o[0] = -mu * x[0] + u[0],
                    move |_, _, o| o[0] = sigma,
                )?),
                x_box: IntervalBox::from_pairs(&[(-2.0, 2.0)])?,
                gamma_box: IntervalBox::cube(-9.0, 9.0, 3)?,
                dt: 0.01,
                basis: quadratic(0.01)?,
                n_sub: 1,
            }
        }
        "ou_full" => {
            let mu = 1.0;
            SystemSetup {
                name: name.into(),
                // u = (alpha, beta): alpha drives the drift, beta the noise.
                kind: SystemKind::Sde(SdeSpec::new(
                    1,
                    1,
                    2,
                    move |x, u, o| o[0] = -mu * x[0] + u[0],
                    |_, u, o| o[0] = u[1],
                )?),
                x_box: IntervalBox::from_pairs(&[(-0.8, 1.5)])?,
                gamma_box: IntervalBox::from_pairs(&[
                    (-0.6, 0.6),
                    (-0.8, 0.8),
                    (-0.7, 0.7),
                    (0.01, 0.35),
                    (-0.5, 0.5),
                    (-1.55, 0.55),
                ])?,
                dt: 0.01,
                basis: quadratic(0.01)?,
                n_sub: 1,
            }
        }
        "nonlinear2d" => {
            let mu = 1.0;
            SystemSetup {
                name: name.into(),
                kind: SystemKind::Sde(SdeSpec::new(
                    2,
                    2,
                    1,
                    move |x, u, o| {
                        o[0] = -x[1].powi(3) + u[0];
                        o[1] = -mu * (x[1] - x[0]);
                    },
                    diagonal([0.2, 0.05]),
                )?),
                x_box: IntervalBox::from_pairs(&[(-1.5, 2.0), (-1.0, 1.6)])?,
                gamma_box: IntervalBox::from_pairs(&[(-2.0, 2.0), (-8.0, 8.0), (-15.0, 15.0)])?,
                dt: 0.01,
                basis: quadratic(0.01)?,
                n_sub: 1,
            }
        }
        "lotka_volterra" => {
            let (s1, s2) = (0.05, 0.05);
            SystemSetup {
                name: name.into(),
                kind: SystemKind::Sde(SdeSpec::new(
                    2,
                    2,
                    1,
                    |x, u, o| {
                        o[0] = x[0] - x[0] * x[1] + u[0];
                        o[1] = -x[1] + x[0] * x[1];
                    },
                    move |x, _, o| o.copy_from_slice(&[s1 * x[0], 0.0, 0.0, s2 * x[1]]),
                )?),
                x_box: IntervalBox::from_pairs(&[(0.1, 0.35), (0.2, 5.5)])?,
                gamma_box: IntervalBox::from_pairs(&[(0.01, 4.2), (-1.5, 1.5), (-0.7, 0.7)])?,
                dt: 0.01,
                basis: quadratic(0.01)?,
                n_sub: 1,
            }
        }
        "double_well" => {
            let sigma = 0.25;
            SystemSetup {
                name: name.into(),
                kind: SystemKind::Sde(SdeSpec::new(
                    1,
                    1,
                    1,
                    |x, u, o| o[0] = x[0] - x[0].powi(3) + u[0],
                    move |_, _, o| o[0] = sigma,
                )?),
                x_box: IntervalBox::from_pairs(&[(-1.6, 1.6)])?,
                gamma_box: IntervalBox::from_pairs(&[(-0.13, 0.13)])?,
                dt: 0.01,
                basis: BasisSpec::piecewise_constant(0.01)?,
                n_sub: 1,
            }
        }
        "gene_expression" => {
            let (k_s, k_dm, k_dp) = (500.0, 20.0, 5.0);
            // Species (M, P). The quadratic transcription rate k(t) can dip
            // below zero inside the sampled box; it is clipped at zero.
            let network = ReactionNetworkSpec::new(
                2,
                1,
                vec![vec![1, 0], vec![0, 1], vec![-1, 0], vec![0, -1]],
                vec![true, false, false, false],
                move |x, u, o| {
                    let (m, p) = (x[0] as f64, x[1] as f64);
                    o[0] = u[0].max(0.0);
                    o[1] = k_s * m;
                    o[2] = k_dm * m;
                    o[3] = k_dp * p;
                },
            )?;
            SystemSetup {
                name: name.into(),
                kind: SystemKind::Reaction(network),
                x_box: IntervalBox::from_pairs(&[(0.0, 10.0), (0.0, 400.0)])?,
                gamma_box: IntervalBox::from_pairs(&[(0.0, 40.0), (-5.3, 5.3), (-0.7, 0.7)])?,
                dt: 0.1,
                basis: quadratic(0.1)?,
                n_sub: 1,
            }
        }
        "stochastic_heat" => {
            let spec = SpdeSpec::new(30, 0.1, 1.0, 1.0, 0.05)?;
            // Mode k sampled in [-1/k, 1/k]; the mean mode in [-1, 1].
            let x_box = IntervalBox::new(
                (0..spec.dim())
                    .map(|i| -1.0 / spec.wavenumber(i).max(1) as f64)
                    .collect(),
                (0..spec.dim())
                    .map(|i| 1.0 / spec.wavenumber(i).max(1) as f64)
                    .collect(),
            )?;
            SystemSetup {
                name: name.into(),
                kind: SystemKind::Spde(spec),
                x_box,
                gamma_box: IntervalBox::from_pairs(&[(-1.2, 1.2), (-3.5, 3.5), (-5.0, 5.0)])?,
                dt: 0.05,
                basis: quadratic(0.05)?,
                n_sub: 10,
            }
        }
        _ => {
            return Err(Error::Lookup {
                name: name.into(),
                valid: BUILTIN_NAMES.join(", "),
            })
        }
    };
    setup.validate()?;
    Ok(setup)
}
