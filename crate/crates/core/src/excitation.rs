//! Excitation signals and their per-step local polynomial parameterization.
//!
//! On each step `[t_n, t_n + dt)` a signal `u(t)` with `n_u` channels is
//! replaced by `sum_k coeffs[c][k] * p_k(tau)`, `tau = t - t_n`. The flat
//! coefficient vector (`gamma`) is stored channel-major, degree-minor:
//! `[c0_p1, c0_p2, .., c1_p1, ..]`. Absolute time never enters `gamma`.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Highest monomial degree accepted by [`BasisSpec::monomial`].
pub const MAX_MONOMIAL_DEGREE: usize = 2;

/// Collocation points per step used when fitting analytic signals.
pub const DEFAULT_FIT_SAMPLES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisFamily {
    Monomial,
    PiecewiseConstant,
    PiecewiseLinear,
}

impl BasisFamily {
    pub fn code(self) -> u8 {
        match self {
            BasisFamily::Monomial => 0,
            BasisFamily::PiecewiseConstant => 1,
            BasisFamily::PiecewiseLinear => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(BasisFamily::Monomial),
            1 => Some(BasisFamily::PiecewiseConstant),
            2 => Some(BasisFamily::PiecewiseLinear),
            _ => None,
        }
    }
}

impl fmt::Display for BasisFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            BasisFamily::Monomial => "monomial",
            BasisFamily::PiecewiseConstant => "piecewise-constant",
            BasisFamily::PiecewiseLinear => "piecewise-linear",
        };
        f.write_str(s)
    }
}

/// Basis `{p_1, .., p_m}` on `[0, dt)`. All three families are monomials
/// `p_k(tau) = tau^(k-1)`; they differ in `m` and in how signals are
/// parameterized onto them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BasisSpec<S> {
    family: BasisFamily,
    m: usize,
    dt: S,
}

impl<S: Scalar> BasisSpec<S> {
    pub fn new(family: BasisFamily, m: usize, dt: S) -> Result<Self> {
        if !(dt > S::zero()) || !dt.is_finite() {
            return Err(Error::Config(format!("step length must be > 0, got {dt}")));
        }
        let ok = match family {
            BasisFamily::PiecewiseConstant => m == 1,
            BasisFamily::PiecewiseLinear => m == 2,
            BasisFamily::Monomial => (1..=MAX_MONOMIAL_DEGREE + 1).contains(&m),
        };
        if !ok {
            return Err(Error::Config(format!("{family} basis cannot have m = {m}")));
        }
        Ok(Self { family, m, dt })
    }

    pub fn monomial(degree: usize, dt: S) -> Result<Self> {
        Self::new(BasisFamily::Monomial, degree + 1, dt)
    }

    pub fn piecewise_constant(dt: S) -> Result<Self> {
        Self::new(BasisFamily::PiecewiseConstant, 1, dt)
    }

    pub fn piecewise_linear(dt: S) -> Result<Self> {
        Self::new(BasisFamily::PiecewiseLinear, 2, dt)
    }

    pub fn family(&self) -> BasisFamily {
        self.family
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn dt(&self) -> S {
        self.dt
    }

    /// `[p_1(tau), .., p_m(tau)]` for `tau` in `[0, dt)`.
    pub fn eval_basis(&self, tau: S) -> Result<Vec<S>> {
        self.check_tau(tau)?;
        let mut out = vec![S::zero(); self.m];
        self.eval_into(tau, &mut out);
        Ok(out)
    }

    pub(crate) fn eval_into(&self, tau: S, out: &mut [S]) {
        let mut p = S::one();
        for v in out.iter_mut().take(self.m) {
            *v = p;
            p = p * tau;
        }
    }

    fn check_tau(&self, tau: S) -> Result<()> {
        if tau >= S::zero() && tau < self.dt {
            Ok(())
        } else {
            Err(Error::Domain(format!("tau = {tau} outside [0, {})", self.dt)))
        }
    }
}

/// Coefficients `gamma` of one step's local polynomial.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalExcitationParams<S> {
    coeffs: Vec<S>,
    n_u: usize,
    basis: BasisSpec<S>,
}

impl<S: Scalar> LocalExcitationParams<S> {
    pub fn new(coeffs: Vec<S>, n_u: usize, basis: BasisSpec<S>) -> Result<Self> {
        if n_u == 0 || coeffs.len() != n_u * basis.m() {
            return Err(Error::Config(format!(
                "gamma has {} entries but n_u * m = {} * {}",
                coeffs.len(),
                n_u,
                basis.m()
            )));
        }
        Ok(Self { coeffs, n_u, basis })
    }

    /// Flattened `gamma`.
    pub fn coeffs(&self) -> &[S] {
        &self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<S> {
        self.coeffs
    }

    pub fn n_u(&self) -> usize {
        self.n_u
    }

    pub fn n_gamma(&self) -> usize {
        self.coeffs.len()
    }

    pub fn basis(&self) -> &BasisSpec<S> {
        &self.basis
    }

    /// Coefficients of channel `c`.
    pub fn channel(&self, c: usize) -> &[S] {
        let m = self.basis.m();
        &self.coeffs[c * m..(c + 1) * m]
    }

    /// `u~(tau; gamma)` for `tau` in `[0, dt)`.
    pub fn reconstruct(&self, tau: S) -> Result<Vec<S>> {
        self.basis.check_tau(tau)?;
        let mut out = vec![S::zero(); self.n_u];
        self.reconstruct_into(tau, &mut out);
        Ok(out)
    }

    /// Unchecked evaluation; also valid at the closed right endpoint.
    pub(crate) fn reconstruct_into(&self, tau: S, out: &mut [S]) {
        let m = self.basis.m();
        for (c, o) in out.iter_mut().enumerate().take(self.n_u) {
            // Horner
            let row = &self.coeffs[c * m..(c + 1) * m];
            *o = row.iter().rev().fold(S::zero(), |acc, &a| acc * tau + a);
        }
    }
}

type AnalyticFn<S> = Arc<dyn Fn(S, &mut [S]) + Send + Sync>;

/// A time-dependent input `u(t)`, either a closed-form function or values
/// on a strictly increasing time grid (linearly interpolated between nodes).
#[derive(Clone)]
pub enum ExcitationSignal<S> {
    Analytic {
        n_u: usize,
        f: AnalyticFn<S>,
    },
    Sampled {
        n_u: usize,
        times: Vec<S>,
        values: Vec<S>,
    },
}

impl<S: Scalar> fmt::Debug for ExcitationSignal<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExcitationSignal::Analytic { n_u, .. } => f.debug_struct("Analytic").field("n_u", n_u).finish(),
            ExcitationSignal::Sampled { n_u, times, .. } => f
                .debug_struct("Sampled")
                .field("n_u", n_u)
                .field("len", &times.len())
                .finish(),
        }
    }
}

impl<S: Scalar> ExcitationSignal<S> {
    pub fn analytic<F>(n_u: usize, f: F) -> Self
    where
        F: Fn(S, &mut [S]) + Send + Sync + 'static,
    {
        ExcitationSignal::Analytic { n_u, f: Arc::new(f) }
    }

    /// Single-channel convenience constructor.
    pub fn scalar<F>(f: F) -> Self
    where
        F: Fn(S) -> S + Send + Sync + 'static,
    {
        Self::analytic(1, move |t, out: &mut [S]| out[0] = f(t))
    }

    pub fn constant(values: Vec<S>) -> Self {
        let n_u = values.len();
        Self::analytic(n_u, move |_, out: &mut [S]| out.copy_from_slice(&values))
    }

    /// `values` is row-major: `times.len()` rows of `n_u` channels.
    pub fn sampled(n_u: usize, times: Vec<S>, values: Vec<S>) -> Result<Self> {
        if n_u == 0 || times.is_empty() || values.len() != times.len() * n_u {
            return Err(Error::Shape(format!(
                "sampled signal: {} times, {} values, n_u = {n_u}",
                times.len(),
                values.len()
            )));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Config(
                "sampled signal grid must be strictly increasing".into(),
            ));
        }
        Ok(ExcitationSignal::Sampled { n_u, times, values })
    }

    pub fn n_u(&self) -> usize {
        match self {
            ExcitationSignal::Analytic { n_u, .. } | ExcitationSignal::Sampled { n_u, .. } => *n_u,
        }
    }

    pub fn is_sampled(&self) -> bool {
        matches!(self, ExcitationSignal::Sampled { .. })
    }

    pub fn eval(&self, t: S) -> Result<Vec<S>> {
        let mut out = vec![S::zero(); self.n_u()];
        self.eval_into(t, &mut out)?;
        Ok(out)
    }

    pub fn eval_into(&self, t: S, out: &mut [S]) -> Result<()> {
        match self {
            ExcitationSignal::Analytic { f, .. } => {
                f(t, out);
                Ok(())
            }
            ExcitationSignal::Sampled { n_u, times, values } => {
                let first = times[0];
                let last = *times.last().unwrap();
                if !(t >= first && t <= last) {
                    return Err(Error::Domain(format!(
                        "t = {t} outside sampled grid [{first}, {last}]"
                    )));
                }
                let hi = times.partition_point(|&s| s <= t);
                if hi >= times.len() {
                    out.copy_from_slice(&values[(times.len() - 1) * n_u..]);
                    return Ok(());
                }
                let lo = hi - 1;
                let w = (t - times[lo]) / (times[hi] - times[lo]);
                for (c, o) in out.iter_mut().enumerate() {
                    let a = values[lo * n_u + c];
                    let b = values[hi * n_u + c];
                    *o = a + w * (b - a);
                }
                Ok(())
            }
        }
    }
}

/// Piecewise-linear parameterization from the two endpoint values of a step:
/// per channel `[u_n, (u_next - u_n) / dt]`.
pub fn parameterize_piecewise_linear<S: Scalar>(
    u_n: &[S],
    u_next: &[S],
    dt: S,
) -> Result<LocalExcitationParams<S>> {
    if u_n.len() != u_next.len() || u_n.is_empty() {
        return Err(Error::Shape(format!(
            "endpoint values have lengths {} and {}",
            u_n.len(),
            u_next.len()
        )));
    }
    let basis = BasisSpec::piecewise_linear(dt)?;
    let coeffs = u_n
        .iter()
        .zip(u_next)
        .flat_map(|(&a, &b)| [a, (b - a) / dt])
        .collect();
    LocalExcitationParams::new(coeffs, u_n.len(), basis)
}

/// Result of a least-squares local fit.
#[derive(Debug, Clone)]
pub struct LocalFit<S> {
    pub params: LocalExcitationParams<S>,
    /// Root-mean-square residual over all samples and channels.
    pub residual_rms: S,
}

/// Least-squares fit of `basis` to `u` sampled at `samples` equispaced points
/// `t_n + j * dt / samples`, `j = 0..samples`.
pub fn parameterize_fit<S: Scalar>(
    u: &ExcitationSignal<S>,
    t_n: S,
    basis: &BasisSpec<S>,
    samples: usize,
) -> Result<LocalFit<S>> {
    let m = basis.m();
    if samples < m {
        return Err(Error::Config(format!(
            "fit needs at least m = {m} samples, got {samples}"
        )));
    }
    let n_u = u.n_u();
    let dt = basis.dt();
    let s_count = S::of(samples as f64);

    // Columns in the scaled variable tau / dt keep the design well conditioned.
    let mut design = vec![S::zero(); samples * m];
    let mut rhs = vec![S::zero(); samples * n_u];
    let mut row_u = vec![S::zero(); n_u];
    for j in 0..samples {
        let frac = S::of(j as f64) / s_count;
        basis.eval_into(frac, &mut design[j * m..(j + 1) * m]);
        u.eval_into(t_n + frac * dt, &mut row_u)?;
        rhs[j * n_u..(j + 1) * n_u].copy_from_slice(&row_u);
    }

    let scaled = least_squares(&design, samples, m, &rhs, n_u)?;

    let mut coeffs = vec![S::zero(); n_u * m];
    for c in 0..n_u {
        let mut scale = S::one();
        for k in 0..m {
            coeffs[c * m + k] = scaled[k * n_u + c] / scale;
            scale = scale * dt;
        }
    }

    let mut sq = S::zero();
    let mut p = vec![S::zero(); m];
    for j in 0..samples {
        basis.eval_into(S::of(j as f64) / s_count, &mut p);
        for c in 0..n_u {
            let fit: S = (0..m).map(|k| p[k] * scaled[k * n_u + c]).sum();
            let r = fit - rhs[j * n_u + c];
            sq = sq + r * r;
        }
    }
    let residual_rms = (sq / S::of((samples * n_u) as f64)).sqrt();

    Ok(LocalFit {
        params: LocalExcitationParams::new(coeffs, n_u, *basis)?,
        residual_rms,
    })
}

/// Parameterize step `[t_n, t_n + dt)` of `u` the way the model was trained:
/// endpoint interpolation for sampled signals on a piecewise-linear basis,
/// least-squares collocation otherwise.
pub fn parameterize_step<S: Scalar>(
    u: &ExcitationSignal<S>,
    t_n: S,
    basis: &BasisSpec<S>,
) -> Result<LocalExcitationParams<S>> {
    if u.is_sampled() && basis.family() == BasisFamily::PiecewiseLinear {
        let a = u.eval(t_n)?;
        let b = u.eval(t_n + basis.dt())?;
        return parameterize_piecewise_linear(&a, &b, basis.dt());
    }
    Ok(parameterize_fit(u, t_n, basis, DEFAULT_FIT_SAMPLES)?.params)
}

/// Axis-aligned box `prod_i [lo_i, hi_i]`, used for sampling domains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl IntervalBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        let b = Self { lo, hi };
        b.validate()?;
        Ok(b)
    }

    pub fn from_pairs(pairs: &[(f64, f64)]) -> Result<Self> {
        Self::new(
            pairs.iter().map(|p| p.0).collect(),
            pairs.iter().map(|p| p.1).collect(),
        )
    }

    /// The same interval repeated `n` times.
    pub fn cube(lo: f64, hi: f64, n: usize) -> Result<Self> {
        Self::new(vec![lo; n], vec![hi; n])
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.lo.len() != self.hi.len() || self.lo.is_empty() {
            return Err(Error::Config(format!(
                "box bounds have lengths {} and {}",
                self.lo.len(),
                self.hi.len()
            )));
        }
        for (i, (&l, &h)) in self.lo.iter().zip(&self.hi).enumerate() {
            if !l.is_finite() || !h.is_finite() || l > h {
                return Err(Error::Config(format!(
                    "box coordinate {i} is empty or unbounded: [{l}, {h}]"
                )));
            }
        }
        Ok(())
    }

    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        for ((o, &l), &h) in out.iter_mut().zip(&self.lo).zip(&self.hi) {
            *o = l + (h - l) * rng.random::<f64>();
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.sample_into(rng, &mut out);
        out
    }

    /// Each coordinate's interval stretched about its midpoint by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let (lo, hi) = self
            .lo
            .iter()
            .zip(&self.hi)
            .map(|(&l, &h)| {
                let mid = 0.5 * (l + h);
                let half = 0.5 * (h - l) * factor;
                (mid - half, mid + half)
            })
            .unzip();
        Self { lo, hi }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(&v, (&l, &h))| v >= l && v <= h)
    }
}

/// Uniform i.i.d. draw of `gamma` from `domain`.
pub fn sample_gamma<S: Scalar, R: Rng + ?Sized>(
    domain: &IntervalBox,
    n_u: usize,
    basis: &BasisSpec<S>,
    rng: &mut R,
) -> Result<LocalExcitationParams<S>> {
    domain.validate()?;
    if domain.dim() != n_u * basis.m() {
        return Err(Error::Config(format!(
            "gamma box has dimension {} but n_u * m = {}",
            domain.dim(),
            n_u * basis.m()
        )));
    }
    let coeffs = domain.sample(rng).into_iter().map(S::of).collect();
    LocalExcitationParams::new(coeffs, n_u, *basis)
}

/// Solves `min ||A X - B||` for `A` (`rows x cols`, row-major) and `B`
/// (`rows x nrhs`) by Householder QR. Returns `X` row-major (`cols x nrhs`).
fn least_squares<S: Scalar>(a: &[S], rows: usize, cols: usize, b: &[S], nrhs: usize) -> Result<Vec<S>> {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    let mut diag = vec![S::zero(); cols];
    let col_norm0: S = (0..rows).map(|i| a[i * cols] * a[i * cols]).sum::<S>().sqrt();
    let tol = S::epsilon() * S::of(rows.max(cols) as f64) * col_norm0.max(S::one()) * S::of(100.0);

    for k in 0..cols {
        let norm = (k..rows).map(|i| a[i * cols + k].powi(2)).sum::<S>().sqrt();
        if norm <= tol {
            return Err(Error::Numerical(format!(
                "rank-deficient design matrix: column {k} has residual norm {norm} \
                 ({rows} samples, {cols} basis functions)"
            )));
        }
        let alpha = if a[k * cols + k] > S::zero() { -norm } else { norm };
        let mut v: Vec<S> = (k..rows).map(|i| a[i * cols + k]).collect();
        v[0] = v[0] - alpha;
        let vnorm2: S = v.iter().map(|&x| x * x).sum();
        if vnorm2 > S::zero() {
            for j in k..cols {
                let dot: S = (k..rows).map(|i| v[i - k] * a[i * cols + j]).sum();
                let f = (dot + dot) / vnorm2;
                for i in k..rows {
                    a[i * cols + j] = a[i * cols + j] - f * v[i - k];
                }
            }
            for j in 0..nrhs {
                let dot: S = (k..rows).map(|i| v[i - k] * b[i * nrhs + j]).sum();
                let f = (dot + dot) / vnorm2;
                for i in k..rows {
                    b[i * nrhs + j] = b[i * nrhs + j] - f * v[i - k];
                }
            }
        }
        diag[k] = a[k * cols + k];
    }

    let mut x = vec![S::zero(); cols * nrhs];
    for j in 0..nrhs {
        for k in (0..cols).rev() {
            let mut s = b[k * nrhs + j];
            for l in k + 1..cols {
                s = s - a[k * cols + l] * x[l * nrhs + j];
            }
            x[k * nrhs + j] = s / diag[k];
        }
    }
    Ok(x)
}
