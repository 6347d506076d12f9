//! Snapshot training sets `{(gamma, x0, x1)}` and their on-disk format.
//!
//! Binary layout (all integers and floats little-endian):
//!
//! ```text
//! "SFML" | version u32 = 1 | d u32 | n_u u32 | basis family u8 | m u32
//! | n_gamma u32 | dt f64 | M u64
//! | x-box: len u32, lo f64 * len, hi f64 * len
//! | gamma-box: len u32, lo f64 * len, hi f64 * len
//! | name: len u32, UTF-8 bytes | seed u64
//! | M records of f64: gamma (n_gamma), x0 (d), x1 (d)
//! ```
//!
//! A box length of zero means the set was not sampled from a box (for example
//! it was extracted from trajectories). Basis family codes: 0 monomial,
//! 1 piecewise-constant, 2 piecewise-linear.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::excitation::{
    parameterize_fit, parameterize_piecewise_linear, BasisFamily, BasisSpec, ExcitationSignal, IntervalBox,
    LocalExcitationParams, DEFAULT_FIT_SAMPLES,
};
use crate::rng;
use crate::scalar::Scalar;
use crate::systems::{SystemKind, SystemSetup};

pub const DATASET_MAGIC: &[u8; 4] = b"SFML";
pub const DATASET_VERSION: u32 = 1;

/// Lower bound applied to every standard deviation in [`NormStats`].
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub d: usize,
    pub n_u: usize,
    pub basis_family: BasisFamily,
    pub m: usize,
    pub n_gamma: usize,
    pub dt: f64,
    pub x_box: Option<IntervalBox>,
    pub gamma_box: Option<IntervalBox>,
    pub system: String,
    pub seed: u64,
}

impl DatasetMeta {
    pub fn basis(&self) -> Result<BasisSpec<f64>> {
        BasisSpec::new(self.basis_family, self.m, self.dt)
    }

    /// Width of one record in f64 values.
    pub fn record_len(&self) -> usize {
        self.n_gamma + 2 * self.d
    }

    fn validate(&self) -> Result<()> {
        self.basis()?;
        if self.d == 0 || self.n_u == 0 || self.n_gamma != self.n_u * self.m {
            return Err(Error::Config(format!(
                "inconsistent metadata: d = {}, n_u = {}, m = {}, n_gamma = {}",
                self.d, self.n_u, self.m, self.n_gamma
            )));
        }
        if let Some(b) = &self.x_box {
            b.validate()?;
            if b.dim() != self.d {
                return Err(Error::Config("x-box dimension differs from d".into()));
            }
        }
        if let Some(b) = &self.gamma_box {
            b.validate()?;
            if b.dim() != self.n_gamma {
                return Err(Error::Config("gamma-box dimension differs from n_gamma".into()));
            }
        }
        Ok(())
    }
}

/// One record: a trajectory of length two under a known excitation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SnapshotPair<'a> {
    pub gamma: &'a [f64],
    pub x0: &'a [f64],
    pub x1: &'a [f64],
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub meta: DatasetMeta,
    /// `M` records laid out as in the file: gamma, x0, x1.
    data: Vec<f64>,
}

impl TrainingSet {
    pub fn new(meta: DatasetMeta, data: Vec<f64>) -> Result<Self> {
        meta.validate()?;
        let w = meta.record_len();
        if data.is_empty() || !data.len().is_multiple_of(w) {
            return Err(Error::Shape(format!(
                "record payload of {} values is not a positive multiple of {w}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite entry in record {}", i / w)));
        }
        Ok(Self { meta, data })
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.meta.record_len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn record(&self, j: usize) -> SnapshotPair<'_> {
        let (ng, d) = (self.meta.n_gamma, self.meta.d);
        let r = &self.data[j * self.meta.record_len()..(j + 1) * self.meta.record_len()];
        SnapshotPair {
            gamma: &r[..ng],
            x0: &r[ng..ng + d],
            x1: &r[ng + d..],
        }
    }

    pub fn records(&self) -> impl Iterator<Item = SnapshotPair<'_>> {
        (0..self.len()).map(move |j| self.record(j))
    }

    pub fn raw(&self) -> &[f64] {
        &self.data
    }

    /// Records `[start, end)` as a new set with the same metadata.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        let w = self.meta.record_len();
        Self::new(self.meta.clone(), self.data[start * w..end * w].to_vec())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Human-readable JSON mirror of the header.
    pub fn sidecar_json(&self) -> String {
        #[derive(Serialize)]
        struct Sidecar<'a> {
            format: &'static str,
            version: u32,
            records: usize,
            #[serde(flatten)]
            meta: &'a DatasetMeta,
        }
        serde_json::to_string_pretty(&Sidecar {
            format: "SFML",
            version: DATASET_VERSION,
            records: self.len(),
            meta: &self.meta,
        })
        .expect("metadata serializes")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let m = &self.meta;
        let mut w = Writer::default();
        w.bytes(DATASET_MAGIC);
        w.u32(DATASET_VERSION);
        w.u32(m.d as u32);
        w.u32(m.n_u as u32);
        w.u8(m.basis_family.code());
        w.u32(m.m as u32);
        w.u32(m.n_gamma as u32);
        w.f64(m.dt);
        w.u64(self.len() as u64);
        w.opt_box(m.x_box.as_ref());
        w.opt_box(m.gamma_box.as_ref());
        w.string(&m.system);
        w.u64(m.seed);
        w.f64s(&self.data);
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(DATASET_MAGIC)?;
        r.version(DATASET_VERSION)?;
        let d = r.u32()? as usize;
        let n_u = r.u32()? as usize;
        let at = r.pos;
        let basis_family =
            BasisFamily::from_code(r.u8()?).ok_or_else(|| Error::format(at, "unknown basis family code"))?;
        let m = r.u32()? as usize;
        let n_gamma = r.u32()? as usize;
        let dt = r.f64()?;
        let at = r.pos;
        let count = r.u64()?;
        if count == 0 {
            return Err(Error::format(at, "record count must be >= 1"));
        }
        let x_box = r.opt_box()?;
        let gamma_box = r.opt_box()?;
        let system = r.string()?;
        let seed = r.u64()?;
        let meta = DatasetMeta {
            d,
            n_u,
            basis_family,
            m,
            n_gamma,
            dt,
            x_box,
            gamma_box,
            system,
            seed,
        };
        meta.validate()
            .map_err(|e| Error::format(at, format!("invalid header: {e}")))?;
        let n_values = (count as usize)
            .checked_mul(meta.record_len())
            .ok_or_else(|| Error::format(at, "record count overflows"))?;
        let data = r.f64s(n_values)?;
        if r.pos as usize != bytes.len() {
            return Err(Error::format(r.pos, "trailing bytes after records"));
        }
        Self::new(meta, data)
    }
}

/// Per-coordinate affine standardization of the conditioner input
/// `(x0, gamma)` and of the one-step increment `x1 - x0`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats<S = f64> {
    pub ctx_shift: Vec<S>,
    pub ctx_scale: Vec<S>,
    pub target_shift: Vec<S>,
    pub target_scale: Vec<S>,
}

impl<S: Scalar> NormStats<S> {
    /// Zero shift, unit scale.
    pub fn identity(d: usize, n_gamma: usize) -> Self {
        Self {
            ctx_shift: vec![S::zero(); d + n_gamma],
            ctx_scale: vec![S::one(); d + n_gamma],
            target_shift: vec![S::zero(); d],
            target_scale: vec![S::one(); d],
        }
    }

    pub fn cast<T: Scalar>(&self) -> NormStats<T> {
        let c = |v: &Vec<S>| v.iter().map(|x| T::of(x.to_f64_lossy())).collect();
        NormStats {
            ctx_shift: c(&self.ctx_shift),
            ctx_scale: c(&self.ctx_scale),
            target_shift: c(&self.target_shift),
            target_scale: c(&self.target_scale),
        }
    }

    pub fn validate(&self, d: usize, n_gamma: usize) -> Result<()> {
        let shapes = [
            self.ctx_shift.len() == d + n_gamma,
            self.ctx_scale.len() == d + n_gamma,
            self.target_shift.len() == d,
            self.target_scale.len() == d,
        ];
        if shapes.iter().any(|ok| !ok) {
            return Err(Error::Shape("normalization statistics have wrong lengths".into()));
        }
        if self
            .ctx_scale
            .iter()
            .chain(&self.target_scale)
            .any(|s| !(*s > S::zero()) || !s.is_finite())
        {
            return Err(Error::Config("normalization scales must be positive".into()));
        }
        Ok(())
    }
}

fn column_stats(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut n, mut mean, mut m2) = (0.0, 0.0, 0.0);
    // Welford
    for v in values {
        n += 1.0;
        let delta = v - mean;
        mean += delta / n;
        m2 += delta * (v - mean);
    }
    let std = (m2 / n).sqrt();
    (mean, if std > STD_FLOOR { std } else { STD_FLOOR })
}

/// Mean and (population) standard deviation of every input column and of the
/// increment `x1 - x0`, with deviations floored at [`STD_FLOOR`].
pub fn compute_norm_stats(set: &TrainingSet) -> Result<NormStats<f64>> {
    if set.len() < 2 {
        return Err(Error::Config(format!(
            "normalization needs at least 2 records, got {}",
            set.len()
        )));
    }
    let (d, ng) = (set.meta.d, set.meta.n_gamma);
    let mut stats = NormStats::identity(d, ng);
    for i in 0..d {
        let (a, b) = column_stats(set.records().map(|r| r.x0[i]));
        stats.ctx_shift[i] = a;
        stats.ctx_scale[i] = b;
        let (a, b) = column_stats(set.records().map(|r| r.x1[i] - r.x0[i]));
        stats.target_shift[i] = a;
        stats.target_scale[i] = b;
    }
    for k in 0..ng {
        let (a, b) = column_stats(set.records().map(|r| r.gamma[k]));
        stats.ctx_shift[d + k] = a;
        stats.ctx_scale[d + k] = b;
    }
    Ok(stats)
}

fn sample_initial_state<R: Rng + ?Sized>(kind: &SystemKind, x_box: &IntervalBox, rng: &mut R) -> Vec<f64> {
    if kind.integer_state() {
        // Uniform over the integers in each interval.
        x_box
            .lo
            .iter()
            .zip(&x_box.hi)
            .map(|(&l, &h)| {
                let (l, h) = (l.ceil(), h.floor());
                (l + ((h - l + 1.0) * rng.random::<f64>()).floor()).min(h)
            })
            .collect()
    } else {
        x_box.sample(rng)
    }
}

/// `M` pairs with `x0 ~ U(I_x)`, `gamma ~ U(I_gamma)` and `x1` one true step.
/// Record `j` draws from stream `j` of `seed`, so the set is reproducible and
/// any record can be regenerated on its own.
pub fn generate_training_set(setup: &SystemSetup, m: usize, seed: u64) -> Result<TrainingSet> {
    setup.validate()?;
    if m == 0 {
        return Err(Error::Config("M must be >= 1".into()));
    }
    let meta = DatasetMeta {
        d: setup.d(),
        n_u: setup.n_u(),
        basis_family: setup.basis.family(),
        m: setup.basis.m(),
        n_gamma: setup.n_gamma(),
        dt: setup.dt,
        x_box: Some(setup.x_box.clone()),
        gamma_box: Some(setup.gamma_box.clone()),
        system: setup.name.clone(),
        seed,
    };
    let mut data = Vec::with_capacity(m * meta.record_len());
    for j in 0..m {
        let mut rng = rng::split(seed, j as u64);
        let x0 = sample_initial_state(&setup.kind, &setup.x_box, &mut rng);
        let gamma = LocalExcitationParams::new(setup.gamma_box.sample(&mut rng), setup.n_u(), setup.basis)?;
        let x1 = setup
            .kind
            .advance(&x0, &gamma, setup.dt, setup.n_sub, &mut rng)
            .map_err(|e| Error::Training {
                index: j,
                detail: format!("simulation failed: {e}"),
            })?;
        data.extend_from_slice(gamma.coeffs());
        data.extend_from_slice(&x0);
        data.extend_from_slice(&x1);
    }
    TrainingSet::new(meta, data)
}

/// Synthetic linear-Gaussian pairs `x1 = 0.8 x0 + gamma + 0.1 z` with
/// `x0 ~ U(-2, 2)`, `gamma ~ U(-1, 1)` and `z ~ N(0, 1)`; the exact conditional
/// law is `N(0.8 x0 + gamma, 0.01)`.
pub fn linear_gaussian_set(m: usize, seed: u64) -> Result<TrainingSet> {
    if m == 0 {
        return Err(Error::Config("M must be >= 1".into()));
    }
    let x_box = IntervalBox::cube(-2.0, 2.0, 1)?;
    let gamma_box = IntervalBox::cube(-1.0, 1.0, 1)?;
    let mut data = Vec::with_capacity(3 * m);
    for j in 0..m {
        let mut rng = rng::split(seed, j as u64);
        let x0 = x_box.sample(&mut rng)[0];
        let g = gamma_box.sample(&mut rng)[0];
        let z: f64 = rng.sample(rand_distr::StandardNormal);
        data.extend_from_slice(&[g, x0, 0.8 * x0 + g + 0.1 * z]);
    }
    let meta = DatasetMeta {
        d: 1,
        n_u: 1,
        basis_family: BasisFamily::PiecewiseConstant,
        m: 1,
        n_gamma: 1,
        dt: 1.0,
        x_box: Some(x_box),
        gamma_box: Some(gamma_box),
        system: "linear_gaussian".into(),
        seed,
    };
    TrainingSet::new(meta, data)
}

/// Excitation that drove a recorded trajectory.
#[derive(Debug, Clone)]
pub enum TrajectoryInput {
    /// Input values at the same `L + 1` instants as the states, row-major.
    Sampled(Vec<f64>),
    /// A known signal; state `n` was recorded at `t0 + n * dt`.
    Analytic { signal: ExcitationSignal<f64>, t0: f64 },
}

/// One recorded trajectory of `L + 1` states (row-major, `d` per row).
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Vec<f64>,
    pub input: TrajectoryInput,
}

/// Splits trajectories into consecutive snapshot pairs with per-step gamma.
/// Absolute times are dropped: only input values (or the signal restricted to
/// each step) enter gamma.
pub fn extract_pairs(
    trajectories: &[Trajectory],
    d: usize,
    n_u: usize,
    basis: &BasisSpec<f64>,
) -> Result<TrainingSet> {
    let dt = basis.dt();
    let mut data = Vec::new();
    for (i, tr) in trajectories.iter().enumerate() {
        if d == 0 || tr.states.len() % d != 0 || tr.states.len() < 2 * d {
            return Err(Error::Shape(format!(
                "trajectory {i}: {} state values do not form >= 2 rows of {d}",
                tr.states.len()
            )));
        }
        let len = tr.states.len() / d - 1;
        for n in 0..len {
            let gamma = match &tr.input {
                TrajectoryInput::Sampled(u) => {
                    if u.len() != (len + 1) * n_u {
                        return Err(Error::Shape(format!(
                            "trajectory {i}: {} input values for {} states of {n_u} channels",
                            u.len(),
                            len + 1
                        )));
                    }
                    let (a, b) = (&u[n * n_u..(n + 1) * n_u], &u[(n + 1) * n_u..(n + 2) * n_u]);
                    match basis.family() {
                        BasisFamily::PiecewiseLinear => parameterize_piecewise_linear(a, b, dt)?,
                        BasisFamily::PiecewiseConstant => {
                            LocalExcitationParams::new(a.to_vec(), n_u, *basis)?
                        }
                        BasisFamily::Monomial => {
                            return Err(Error::Config(
                                "sampled inputs support piecewise-constant or piecewise-linear \
                                 bases only"
                                    .into(),
                            ))
                        }
                    }
                }
                TrajectoryInput::Analytic { signal, t0 } => {
                    if signal.n_u() != n_u {
                        return Err(Error::Shape(format!(
                            "trajectory {i}: signal has {} channels, expected {n_u}",
                            signal.n_u()
                        )));
                    }
                    parameterize_fit(signal, t0 + n as f64 * dt, basis, DEFAULT_FIT_SAMPLES)?.params
                }
            };
            data.extend_from_slice(gamma.coeffs());
            data.extend_from_slice(&tr.states[n * d..(n + 2) * d]);
        }
    }
    let meta = DatasetMeta {
        d,
        n_u,
        basis_family: basis.family(),
        m: basis.m(),
        n_gamma: n_u * basis.m(),
        dt,
        x_box: None,
        gamma_box: None,
        system: "extracted".into(),
        seed: 0,
    };
    TrainingSet::new(meta, data)
}
