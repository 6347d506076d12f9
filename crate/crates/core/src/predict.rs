//! Iterative rollout of a one-step model, ensemble statistics and comparison
//! against reference simulations.
//!
//! Ensemble export layout (little-endian):
//!
//! ```text
//! "SFME" | version u32 = 1 | dt f64 | name: len u32, UTF-8 bytes
//! | n_ens u64 | n_steps + 1 u64 | d u64
//! | states f64, member-major, then time, then coordinate
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::excitation::{parameterize_step, ExcitationSignal, IntervalBox};
use crate::flow::FlowModel;
use crate::rng::{self, RESERVED_STREAM_BASE};
use crate::scalar::Scalar;
use crate::stats::{self, Histogram};
use crate::systems::{SignalWindow, SystemKind, SystemSetup};

pub const ENSEMBLE_MAGIC: &[u8; 4] = b"SFME";
pub const ENSEMBLE_VERSION: u32 = 1;

/// Default stretch of the training state box before a rollout is flagged as
/// extrapolating.
pub const GUARD_FACTOR: f64 = 1.5;

/// Bin cap for the Freedman-Diaconis plot histograms in a report.
pub const MAX_PLOT_BINS: usize = 200;

/// Anything that can advance a batch of states by one step of length
/// [`dt`](OneStepModel::dt) under an excitation signal.
pub trait OneStepModel {
    fn d(&self) -> usize;
    fn n_u(&self) -> usize;
    fn dt(&self) -> f64;

    /// Box outside which a state counts as an extrapolation.
    fn guard_box(&self) -> Option<IntervalBox> {
        None
    }

    /// Advance every row of `states` (`rngs.len() x d`, row-major) from time
    /// `t_n`, row `i` drawing only from `rngs[i]`.
    fn step_batch<R: Rng>(
        &self,
        states: &mut [f64],
        u: &ExcitationSignal<f64>,
        t_n: f64,
        rngs: &mut [R],
    ) -> Result<()>;
}

impl<S: Scalar> OneStepModel for FlowModel<S> {
    fn d(&self) -> usize {
        FlowModel::d(self)
    }

    fn n_u(&self) -> usize {
        self.meta().n_u
    }

    fn dt(&self) -> f64 {
        self.meta().dt
    }

    fn guard_box(&self) -> Option<IntervalBox> {
        self.meta().x_box.as_ref().map(|b| b.scaled(GUARD_FACTOR))
    }

    fn step_batch<R: Rng>(
        &self,
        states: &mut [f64],
        u: &ExcitationSignal<f64>,
        t_n: f64,
        rngs: &mut [R],
    ) -> Result<()> {
        let d = FlowModel::d(self);
        let b = rngs.len();
        let basis = self.meta().basis()?;
        let gamma = parameterize_step(u, t_n, &basis)?;
        let gamma: Vec<S> = gamma.coeffs().iter().map(|&g| S::of(g)).collect();
        let gamma = ArrayView2::from_shape((1, gamma.len()), &gamma)
            .expect("row")
            .broadcast((b, self.n_gamma()))
            .ok_or_else(|| Error::Shape("excitation parameters do not match the model".into()))?
            .to_owned();
        let x0 = Array2::from_shape_fn((b, d), |(i, k)| S::of(states[i * d + k]));
        let mut z = Array2::zeros((b, d));
        for (mut row, r) in z.outer_iter_mut().zip(rngs.iter_mut()) {
            row.iter_mut()
                .for_each(|v| *v = S::of(r.sample::<f64, _>(StandardNormal)));
        }
        let x1 = self.forward_batch(z, &x0, &gamma)?;
        let integer = self.meta().integer_state;
        for (dst, v) in states.iter_mut().zip(x1.iter()) {
            let v = v.to_f64_lossy();
            // dequantized training: the integer state is the floor
            *dst = if integer { v.floor().max(0.0) } else { v };
        }
        Ok(())
    }
}

/// The ground-truth simulator driven by the raw signal, usable wherever a
/// learned model is.
#[derive(Debug, Clone)]
pub struct TruthModel {
    pub kind: SystemKind,
    pub dt: f64,
    pub n_sub: usize,
    pub guard: Option<IntervalBox>,
}

impl TruthModel {
    pub fn new(kind: SystemKind, dt: f64, n_sub: usize) -> Self {
        Self {
            kind,
            dt,
            n_sub,
            guard: None,
        }
    }

    pub fn from_setup(setup: &SystemSetup) -> Self {
        Self::new(setup.kind.clone(), setup.dt, setup.n_sub)
    }
}

impl OneStepModel for TruthModel {
    fn d(&self) -> usize {
        self.kind.d()
    }

    fn n_u(&self) -> usize {
        self.kind.n_u()
    }

    fn dt(&self) -> f64 {
        self.dt
    }

    fn guard_box(&self) -> Option<IntervalBox> {
        self.guard.clone()
    }

    fn step_batch<R: Rng>(
        &self,
        states: &mut [f64],
        u: &ExcitationSignal<f64>,
        t_n: f64,
        rngs: &mut [R],
    ) -> Result<()> {
        let d = self.kind.d();
        let window = SignalWindow { signal: u, t0: t_n };
        for (x, r) in states.chunks_exact_mut(d).zip(rngs.iter_mut()) {
            let next = self.kind.advance(x, &window, self.dt, self.n_sub, r)?;
            x.copy_from_slice(&next);
        }
        Ok(())
    }
}

/// First exit of one member from the guard box.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtrapolationWarning {
    pub member: usize,
    pub step: usize,
    pub state: Vec<f64>,
}

/// `n_ens` trajectories of `n_steps + 1` states on the grid `n * dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryEnsemble {
    pub n_ens: usize,
    pub n_steps: usize,
    pub d: usize,
    pub dt: f64,
    /// Free-form label stored in the export.
    pub name: String,
    states: Vec<f64>,
    /// Guard-box exits seen while generating; not part of the export.
    pub warnings: Vec<ExtrapolationWarning>,
}

impl TrajectoryEnsemble {
    /// `states` is member-major, then time, then coordinate.
    pub fn new(n_ens: usize, n_steps: usize, d: usize, dt: f64, states: Vec<f64>) -> Result<Self> {
        if states.len() != n_ens * (n_steps + 1) * d || n_ens == 0 || d == 0 {
            return Err(Error::Shape(format!(
                "{} values for {n_ens} members, {} times, d = {d}",
                states.len(),
                n_steps + 1
            )));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Config(format!("step must be positive, got {dt}")));
        }
        if let Some(i) = states.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite state at flat index {i}")));
        }
        Ok(Self {
            n_ens,
            n_steps,
            d,
            dt,
            name: String::new(),
            states,
            warnings: Vec::new(),
        })
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|n| n as f64 * self.dt).collect()
    }

    pub fn raw(&self) -> &[f64] {
        &self.states
    }

    pub fn state(&self, member: usize, step: usize) -> &[f64] {
        let at = (member * (self.n_steps + 1) + step) * self.d;
        &self.states[at..at + self.d]
    }

    /// One member's path, `(n_steps + 1) * d` values.
    pub fn trajectory(&self, member: usize) -> &[f64] {
        let len = (self.n_steps + 1) * self.d;
        &self.states[member * len..(member + 1) * len]
    }

    /// Coordinate `coord` of every member at grid index `step`.
    pub fn snapshot(&self, step: usize, coord: usize) -> Vec<f64> {
        (0..self.n_ens).map(|m| self.state(m, step)[coord]).collect()
    }

    /// Grid index of time `t`, if `t` lies on the grid.
    pub fn step_at(&self, t: f64) -> Result<usize> {
        let n = (t / self.dt).round();
        if !(n >= 0.0 && n <= self.n_steps as f64) || (n * self.dt - t).abs() > 1e-9 * t.abs().max(1.0) {
            return Err(Error::Domain(format!(
                "t = {t} is not on the grid of {} steps of {}",
                self.n_steps, self.dt
            )));
        }
        Ok(n as usize)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::with_capacity(48 + self.name.len() + 8 * self.states.len()));
        w.bytes(ENSEMBLE_MAGIC);
        w.u32(ENSEMBLE_VERSION);
        w.f64(self.dt);
        w.string(&self.name);
        w.u64(self.n_ens as u64);
        w.u64(self.n_steps as u64 + 1);
        w.u64(self.d as u64);
        w.f64s(&self.states);
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(ENSEMBLE_MAGIC)?;
        r.version(ENSEMBLE_VERSION)?;
        let dt = r.f64()?;
        let name = r.string()?;
        let shape_at = r.pos;
        let (n_ens, n_times, d) = (r.u64()?, r.u64()?, r.u64()?);
        if n_ens == 0 || n_times == 0 || d == 0 {
            return Err(Error::format(shape_at, "empty ensemble shape"));
        }
        let count = n_ens
            .checked_mul(n_times)
            .and_then(|v| v.checked_mul(d))
            .filter(|&v| v <= (bytes.len() as u64) / 8)
            .ok_or_else(|| Error::format(shape_at, "shape exceeds payload"))?;
        let data_at = r.pos;
        let states = r.f64s(count as usize)?;
        if r.pos != bytes.len() as u64 {
            return Err(Error::format(r.pos, "trailing bytes after states"));
        }
        let mut ens = Self::new(n_ens as usize, n_times as usize - 1, d as usize, dt, states)
            .map_err(|e| Error::format(data_at, e.to_string()))?;
        ens.name = name;
        Ok(ens)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn check_inputs<M: OneStepModel>(
    model: &M,
    x0: &[f64],
    u: &ExcitationSignal<f64>,
    n_steps: usize,
) -> Result<()> {
    if x0.len() != model.d() {
        return Err(Error::Shape(format!(
            "x0 has length {}, model d = {}",
            x0.len(),
            model.d()
        )));
    }
    if u.n_u() != model.n_u() {
        return Err(Error::Shape(format!(
            "signal has {} channels, model expects {}",
            u.n_u(),
            model.n_u()
        )));
    }
    if n_steps == 0 {
        return Err(Error::Config("rollout needs at least one step".into()));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("initial state is not finite".into()));
    }
    Ok(())
}

/// Rolls out one member per generator, all in lockstep. Member `i` uses only
/// `rngs[i]`, so results do not depend on how members are batched.
fn run_members<M: OneStepModel, R: Rng>(
    model: &M,
    x0: &[f64],
    u: &ExcitationSignal<f64>,
    n_steps: usize,
    rngs: &mut [R],
    guard: Option<&IntervalBox>,
) -> Result<TrajectoryEnsemble> {
    check_inputs(model, x0, u, n_steps)?;
    if let Some(g) = guard {
        if g.dim() != x0.len() {
            return Err(Error::Shape(format!("guard box has dimension {}", g.dim())));
        }
    }
    let (n_ens, d, dt) = (rngs.len(), model.d(), model.dt());
    let stride = (n_steps + 1) * d;
    let mut out = vec![0.0; n_ens * stride];
    let mut cur: Vec<f64> = x0.iter().copied().cycle().take(n_ens * d).collect();
    let mut flagged = vec![false; n_ens];
    let mut warnings = Vec::new();
    for step in 0..=n_steps {
        if step > 0 {
            model.step_batch(&mut cur, u, (step - 1) as f64 * dt, rngs)?;
        }
        for (m, x) in cur.chunks_exact(d).enumerate() {
            if let Some(k) = x.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!(
                    "member {m} coordinate {k} is not finite at step {step}"
                )));
            }
            if let Some(g) = guard {
                if !flagged[m] && !g.contains(x) {
                    flagged[m] = true;
                    warnings.push(ExtrapolationWarning {
                        member: m,
                        step,
                        state: x.to_vec(),
                    });
                }
            }
            out[m * stride + step * d..m * stride + (step + 1) * d].copy_from_slice(x);
        }
    }
    let mut ens = TrajectoryEnsemble::new(n_ens, n_steps, d, dt, out)?;
    ens.warnings = warnings;
    Ok(ens)
}

/// One trajectory `x_{n+1} ~ model(x_n, u on [n dt, (n+1) dt))`, returned as
/// a single-member ensemble.
pub fn rollout<M: OneStepModel, R: Rng>(
    model: &M,
    x0: &[f64],
    u: &ExcitationSignal<f64>,
    n_steps: usize,
    rng: &mut R,
) -> Result<TrajectoryEnsemble> {
    let guard = model.guard_box();
    run_members(model, x0, u, n_steps, std::slice::from_mut(rng), guard.as_ref())
}

/// `n_ens` independent rollouts; member `i` draws from stream `i` of `seed`.
pub fn ensemble<M: OneStepModel>(
    model: &M,
    x0: &[f64],
    u: &ExcitationSignal<f64>,
    n_steps: usize,
    n_ens: usize,
    seed: u64,
) -> Result<TrajectoryEnsemble> {
    let guard = model.guard_box();
    ensemble_with_guard(model, x0, u, n_steps, n_ens, seed, guard.as_ref())
}

/// [`ensemble`] with an explicit guard box (`None` disables the check).
pub fn ensemble_with_guard<M: OneStepModel>(
    model: &M,
    x0: &[f64],
    u: &ExcitationSignal<f64>,
    n_steps: usize,
    n_ens: usize,
    seed: u64,
    guard: Option<&IntervalBox>,
) -> Result<TrajectoryEnsemble> {
    if n_ens == 0 {
        return Err(Error::Config("ensemble needs at least one member".into()));
    }
    let mut rngs: Vec<_> = (0..n_ens as u64).map(|m| rng::split(seed, m)).collect();
    run_members(model, x0, u, n_steps, &mut rngs, guard)
}

/// Per-time, per-coordinate curves, `(n_steps + 1) x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub mean: Array2<f64>,
    /// Unbiased sample standard deviation.
    pub std: Array2<f64>,
}

pub fn moments(ens: &TrajectoryEnsemble) -> Result<Moments> {
    if ens.n_ens < 2 {
        return Err(Error::Domain(
            "standard deviation needs at least two members".into(),
        ));
    }
    let shape = (ens.n_steps + 1, ens.d);
    let mut mean = Array2::zeros(shape);
    let mut std = Array2::zeros(shape);
    for n in 0..=ens.n_steps {
        for k in 0..ens.d {
            // centered on the first member, so constant slices are exact
            let mut v = ens.snapshot(n, k);
            let pivot = v[0];
            v.iter_mut().for_each(|x| *x -= pivot);
            mean[[n, k]] = pivot + stats::mean(&v);
            std[[n, k]] = stats::sample_std(&v);
        }
    }
    Ok(Moments { mean, std })
}

/// Distribution distances of one coordinate at one time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SnapshotDistance {
    pub w1: f64,
    pub ks: f64,
}

/// Per-coordinate Wasserstein-1 and two-sample KS distance at time `t`.
pub fn snapshot_distance(
    a: &TrajectoryEnsemble,
    b: &TrajectoryEnsemble,
    t: f64,
) -> Result<Vec<SnapshotDistance>> {
    if a.d != b.d {
        return Err(Error::Shape(format!("ensembles have d = {} and {}", a.d, b.d)));
    }
    let (na, nb) = (a.step_at(t)?, b.step_at(t)?);
    Ok((0..a.d)
        .map(|k| {
            let (sa, sb) = (a.snapshot(na, k), b.snapshot(nb, k));
            SnapshotDistance {
                w1: stats::wasserstein1(&sa, &sb),
                ks: stats::ks_two_sample(&sa, &sb),
            }
        })
        .collect())
}

/// Initial state, signal, horizon and ensemble size of a validation run.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub x0: Vec<f64>,
    pub signal: ExcitationSignal<f64>,
    pub t_end: f64,
    pub n_ens: usize,
    pub seed: u64,
}

impl Scenario {
    pub fn n_steps(&self, dt: f64) -> Result<usize> {
        let n = (self.t_end / dt).round();
        if !(n >= 1.0) || (n * dt - self.t_end).abs() > 1e-9 * self.t_end.max(1.0) {
            return Err(Error::Config(format!(
                "horizon {} is not a positive multiple of the step {dt}",
                self.t_end
            )));
        }
        Ok(n as usize)
    }
}

/// Comparison of one coordinate at one snapshot time.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotReport {
    pub time: f64,
    pub coord: usize,
    pub distance: SnapshotDistance,
    /// Model and truth histograms on shared Freedman-Diaconis edges.
    pub model_hist: Histogram,
    pub truth_hist: Histogram,
}

#[derive(Debug, Clone)]
pub struct ValidationReport {
    pub times: Vec<f64>,
    pub model: Moments,
    pub truth: Moments,
    pub snapshots: Vec<SnapshotReport>,
    /// Per coordinate, over the whole grid.
    pub max_abs_mean_error: Vec<f64>,
    pub max_abs_std_error: Vec<f64>,
    /// Guard-box exits of the model ensemble.
    pub warnings: Vec<ExtrapolationWarning>,
}

impl ValidationReport {
    /// One whitespace-separated `key=value` record per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let d = self.max_abs_mean_error.len();
        for k in 0..d {
            let _ = writeln!(
                s,
                "summary coord={k} max_abs_mean_error={:e} max_abs_std_error={:e}",
                self.max_abs_mean_error[k], self.max_abs_std_error[k]
            );
        }
        for r in &self.snapshots {
            let _ = writeln!(
                s,
                "snapshot t={} coord={} w1={:e} ks={:e}",
                r.time, r.coord, r.distance.w1, r.distance.ks
            );
        }
        for (n, t) in self.times.iter().enumerate() {
            for k in 0..d {
                let _ = writeln!(
                    s,
                    "moment t={t} coord={k} model_mean={:e} model_std={:e} truth_mean={:e} truth_std={:e}",
                    self.model.mean[[n, k]],
                    self.model.std[[n, k]],
                    self.truth.mean[[n, k]],
                    self.truth.std[[n, k]]
                );
            }
        }
        for w in &self.warnings {
            let _ = writeln!(
                s,
                "warning member={} step={} state={:?}",
                w.member, w.step, w.state
            );
        }
        s
    }

    /// Histogram rows `t coord center model_density truth_density` for plots.
    pub fn plot_data(&self) -> String {
        let mut s = String::from("t coord center model_density truth_density\n");
        for r in &self.snapshots {
            let (pm, pt) = (r.model_hist.density(), r.truth_hist.density());
            for ((c, a), b) in r.model_hist.centers().iter().zip(&pm).zip(&pt) {
                let _ = writeln!(s, "{} {} {c:e} {a:e} {b:e}", r.time, r.coord);
            }
        }
        s
    }
}

fn shared_histograms(a: &[f64], b: &[f64]) -> (Histogram, Histogram) {
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let edges = stats::histogram_fd(&pooled, MAX_PLOT_BINS).edges;
    (
        stats::histogram_on(edges.clone(), a),
        stats::histogram_on(edges, b),
    )
}

/// Runs `model` and `truth` on the same scenario with equal ensemble sizes
/// and compares them. The truth ensemble uses a seed derived from the
/// scenario seed, independent of the model's member streams.
pub fn validate<M: OneStepModel>(
    model: &M,
    truth: &TruthModel,
    scenario: &Scenario,
    snapshot_times: &[f64],
) -> Result<ValidationReport> {
    if model.d() != truth.d() || model.n_u() != truth.n_u() {
        return Err(Error::Shape(format!(
            "model (d = {}, n_u = {}) and truth (d = {}, n_u = {}) differ",
            model.d(),
            model.n_u(),
            truth.d(),
            truth.n_u()
        )));
    }
    if (model.dt() - truth.dt).abs() > 1e-12 * truth.dt {
        return Err(Error::Config(format!(
            "model step {} differs from truth step {}",
            model.dt(),
            truth.dt
        )));
    }
    let n_steps = scenario.n_steps(truth.dt)?;
    let m_ens = ensemble(
        model,
        &scenario.x0,
        &scenario.signal,
        n_steps,
        scenario.n_ens,
        scenario.seed,
    )?;
    let truth_seed = rng::split(scenario.seed, RESERVED_STREAM_BASE + 2).random::<u64>();
    let t_ens = ensemble_with_guard(
        truth,
        &scenario.x0,
        &scenario.signal,
        n_steps,
        scenario.n_ens,
        truth_seed,
        None,
    )?;
    let (mm, tm) = (moments(&m_ens)?, moments(&t_ens)?);
    let max_abs = |a: &Array2<f64>, b: &Array2<f64>| -> Vec<f64> {
        (0..a.ncols())
            .map(|k| {
                a.column(k)
                    .iter()
                    .zip(b.column(k))
                    .fold(0.0f64, |acc, (x, y)| acc.max((x - y).abs()))
            })
            .collect()
    };
    let mut snapshots = Vec::new();
    for &t in snapshot_times {
        let step = m_ens.step_at(t)?;
        for (coord, distance) in snapshot_distance(&m_ens, &t_ens, t)?.into_iter().enumerate() {
            let (model_hist, truth_hist) =
                shared_histograms(&m_ens.snapshot(step, coord), &t_ens.snapshot(step, coord));
            snapshots.push(SnapshotReport {
                time: step as f64 * truth.dt,
                coord,
                distance,
                model_hist,
                truth_hist,
            });
        }
    }
    Ok(ValidationReport {
        times: m_ens.times(),
        max_abs_mean_error: max_abs(&mm.mean, &tm.mean),
        max_abs_std_error: max_abs(&mm.std, &tm.std),
        model: mm,
        truth: tm,
        snapshots,
        warnings: m_ens.warnings,
    })
}

#[cfg(test)]
mod tests;
