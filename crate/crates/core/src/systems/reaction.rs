//! Modified Next Reaction Method (Anderson 2007) with time-dependent rates.
//!
//! Each reaction `k` carries an internal clock `T_k` (integrated propensity)
//! and the clock value `P_k` of its next firing. Reactions flagged as
//! time-dependent have their propensity integrated over `[0, dt]` split into
//! [`RATE_SUBINTERVALS`] pieces, each handled with 3-point Gauss-Legendre,
//! which is exact for propensities polynomial of degree <= 5 in time.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::Exp1;

use super::Forcing;
use crate::error::{Error, Result};
use crate::excitation::LocalExcitationParams;

pub const RATE_SUBINTERVALS: usize = 32;

/// Guard against runaway networks.
pub const MAX_FIRINGS: u64 = 10_000_000;

/// `(x, u, out)`: propensity of every reaction at state `x` and input `u`.
pub type PropensityFn = Arc<dyn Fn(&[i64], &[f64], &mut [f64]) + Send + Sync>;

#[derive(Clone)]
pub struct ReactionNetworkSpec {
    pub n_species: usize,
    pub n_u: usize,
    /// One row of `n_species` state changes per reaction.
    pub stoichiometry: Vec<Vec<i64>>,
    pub propensity: PropensityFn,
    /// Reactions whose propensity depends on the input `u`.
    pub time_dependent: Vec<bool>,
}

impl fmt::Debug for ReactionNetworkSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ReactionNetworkSpec")
            .field("n_species", &self.n_species)
            .field("n_u", &self.n_u)
            .field("stoichiometry", &self.stoichiometry)
            .field("time_dependent", &self.time_dependent)
            .finish_non_exhaustive()
    }
}

impl ReactionNetworkSpec {
    pub fn new<P>(
        n_species: usize,
        n_u: usize,
        stoichiometry: Vec<Vec<i64>>,
        time_dependent: Vec<bool>,
        propensity: P,
    ) -> Result<Self>
    where
        P: Fn(&[i64], &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        if stoichiometry.is_empty()
            || stoichiometry.iter().any(|r| r.len() != n_species)
            || time_dependent.len() != stoichiometry.len()
        {
            return Err(Error::Config(
                "stoichiometry must have one row of n_species entries per reaction".into(),
            ));
        }
        Ok(Self {
            n_species,
            n_u,
            stoichiometry,
            propensity: Arc::new(propensity),
            time_dependent,
        })
    }

    pub fn n_reactions(&self) -> usize {
        self.stoichiometry.len()
    }
}

/// Gauss-Legendre nodes and weights on [-1, 1].
const GL_NODES: [f64; 3] = [-0.774_596_669_241_483_4, 0.0, 0.774_596_669_241_483_4];
const GL_WEIGHTS: [f64; 3] = [5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0];

struct Propensities<'a, F: ?Sized> {
    spec: &'a ReactionNetworkSpec,
    forcing: &'a F,
    u: Vec<f64>,
    buf: Vec<f64>,
}

impl<F: Forcing + ?Sized> Propensities<'_, F> {
    fn eval(&mut self, x: &[i64], tau: f64) -> Result<&[f64]> {
        self.forcing.eval(tau, &mut self.u);
        (self.spec.propensity)(x, &self.u, &mut self.buf);
        if let Some(k) = self.buf.iter().position(|a| !(*a >= 0.0) || !a.is_finite()) {
            return Err(Error::Model(format!(
                "reaction {k} has invalid propensity {} at tau = {tau}",
                self.buf[k]
            )));
        }
        Ok(&self.buf)
    }

    fn rate(&mut self, x: &[i64], k: usize, tau: f64) -> Result<f64> {
        Ok(self.eval(x, tau)?[k])
    }

    /// `int_a^b a_k(x, u(s)) ds` for `[a, b]` inside one sub-interval.
    fn integral_piece(&mut self, x: &[i64], k: usize, a: f64, b: f64) -> Result<f64> {
        if b <= a {
            return Ok(0.0);
        }
        let (mid, half) = (0.5 * (a + b), 0.5 * (b - a));
        let mut acc = 0.0;
        for (node, w) in GL_NODES.iter().zip(GL_WEIGHTS) {
            acc += w * self.rate(x, k, mid + half * node)?;
        }
        Ok(acc * half)
    }

    fn integral(&mut self, x: &[i64], k: usize, a: f64, b: f64, grid: &SubGrid) -> Result<f64> {
        let mut acc = 0.0;
        let mut lo = a;
        while lo < b {
            let hi = grid.next_node(lo).min(b);
            acc += self.integral_piece(x, k, lo, hi)?;
            lo = hi;
        }
        Ok(acc)
    }

    /// Smallest `s` in `(t, horizon]` with `int_t^s a_k = target`, if any.
    fn time_to_accumulate(
        &mut self,
        x: &[i64],
        k: usize,
        t: f64,
        target: f64,
        grid: &SubGrid,
    ) -> Result<Option<f64>> {
        let mut acc = 0.0;
        let mut lo = t;
        while lo < grid.horizon {
            let hi = grid.next_node(lo);
            let piece = self.integral_piece(x, k, lo, hi)?;
            if acc + piece >= target && piece > 0.0 {
                return self.solve_in_piece(x, k, lo, hi, target - acc).map(Some);
            }
            acc += piece;
            lo = hi;
        }
        Ok(None)
    }

    /// Root of `int_lo^s a_k = need` on `[lo, hi]`; Newton safeguarded by bisection.
    fn solve_in_piece(&mut self, x: &[i64], k: usize, lo: f64, hi: f64, need: f64) -> Result<f64> {
        let (mut a, mut b) = (lo, hi);
        let total = self.integral_piece(x, k, lo, hi)?;
        let mut s = lo + (hi - lo) * (need / total).clamp(0.0, 1.0);
        for _ in 0..100 {
            let f = self.integral_piece(x, k, lo, s)? - need;
            if f.abs() <= 1e-14 * need.max(1e-300) || (b - a) <= 1e-15 * hi.abs().max(1.0) {
                break;
            }
            if f > 0.0 {
                b = s;
            } else {
                a = s;
            }
            let rate = self.rate(x, k, s)?;
            let newton = if rate > 0.0 { s - f / rate } else { f64::NAN };
            s = if newton > a && newton < b {
                newton
            } else {
                0.5 * (a + b)
            };
        }
        Ok(s)
    }
}

struct SubGrid {
    horizon: f64,
    width: f64,
}

impl SubGrid {
    fn next_node(&self, t: f64) -> f64 {
        let idx = (t / self.width).floor() + 1.0;
        let node = (idx * self.width).min(self.horizon);
        if node <= t {
            ((idx + 1.0) * self.width).min(self.horizon)
        } else {
            node
        }
    }
}

/// Jump-process sample at horizon `dt` started from `x0`, with the
/// time-dependent input reconstructed from `gamma`.
pub fn mnrm_simulate<R: Rng + ?Sized>(
    spec: &ReactionNetworkSpec,
    x0: &[i64],
    gamma: &LocalExcitationParams<f64>,
    dt: f64,
    rng: &mut R,
) -> Result<Vec<i64>> {
    Ok(mnrm_simulate_counted(spec, x0, gamma, dt, rng)?.0)
}

/// [`mnrm_simulate`] that also reports the number of firings.
pub fn mnrm_simulate_counted<R: Rng + ?Sized>(
    spec: &ReactionNetworkSpec,
    x0: &[i64],
    gamma: &LocalExcitationParams<f64>,
    dt: f64,
    rng: &mut R,
) -> Result<(Vec<i64>, u64)> {
    mnrm_advance(spec, x0, gamma, dt, rng)
}

pub(crate) fn mnrm_advance<F: Forcing + ?Sized, R: Rng + ?Sized>(
    spec: &ReactionNetworkSpec,
    x0: &[i64],
    forcing: &F,
    dt: f64,
    rng: &mut R,
) -> Result<(Vec<i64>, u64)> {
    if x0.len() != spec.n_species {
        return Err(Error::Shape(format!(
            "state has {} species, network has {}",
            x0.len(),
            spec.n_species
        )));
    }
    if let Some(i) = x0.iter().position(|&v| v < 0) {
        return Err(Error::Model(format!("species {i} starts negative")));
    }
    if !(dt > 0.0) {
        return Err(Error::Config(format!("horizon must be > 0, got {dt}")));
    }
    let n_r = spec.n_reactions();
    let grid = SubGrid {
        horizon: dt,
        width: dt / RATE_SUBINTERVALS as f64,
    };
    let mut props = Propensities {
        spec,
        forcing,
        u: vec![0.0; spec.n_u],
        buf: vec![0.0; n_r],
    };

    let mut x = x0.to_vec();
    let mut t = 0.0;
    let mut internal = vec![0.0; n_r];
    let mut next: Vec<f64> = (0..n_r).map(|_| rng.sample(Exp1)).collect();
    let mut waits = vec![f64::INFINITY; n_r];
    let mut firings = 0u64;

    loop {
        let a_now = props.eval(&x, t)?.to_vec();
        for k in 0..n_r {
            let need = next[k] - internal[k];
            waits[k] = if spec.time_dependent[k] {
                match props.time_to_accumulate(&x, k, t, need, &grid)? {
                    Some(s) => s - t,
                    None => f64::INFINITY,
                }
            } else if a_now[k] > 0.0 {
                need / a_now[k]
            } else {
                f64::INFINITY
            };
        }
        let (mu, wait) = waits
            .iter()
            .copied()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("at least one reaction");
        if !(t + wait <= dt) {
            break;
        }
        let t_next = t + wait;
        for k in 0..n_r {
            if k == mu {
                internal[k] = next[k];
            } else if spec.time_dependent[k] {
                internal[k] += props.integral(&x, k, t, t_next, &grid)?;
            } else {
                internal[k] += a_now[k] * wait;
            }
        }
        t = t_next;
        for (xi, &nu) in x.iter_mut().zip(&spec.stoichiometry[mu]) {
            *xi += nu;
        }
        if let Some(i) = x.iter().position(|&v| v < 0) {
            return Err(Error::Model(format!(
                "reaction {mu} drove species {i} negative; its propensity must vanish there"
            )));
        }
        next[mu] += rng.sample::<f64, _>(Exp1);
        firings += 1;
        if firings > MAX_FIRINGS {
            return Err(Error::Runaway { limit: MAX_FIRINGS });
        }
    }
    Ok((x, firings))
}
