//! Conditional masked autoregressive flow for the one-step law
//! `x1 | (x0, gamma)`.
//!
//! The flow works on the standardized increment `v = (x1 - x0 - shift) /
//! scale` with the standardized context `[x0, gamma]`. Layer `k`, read in the
//! density direction, maps `v` to `perm_k((v - t) * exp(-s))`, where
//! `(s, t)` come from a masked conditioner fed `[v, context]`, so `s_i, t_i`
//! depend on `v_0 .. v_{i-1}` only. Density evaluation is one pass per layer;
//! sampling solves each layer coordinate by coordinate. Odd layers reverse the
//! coordinate order.

mod checkpoint;
mod made;

use ndarray::{concatenate, s, Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{StandardNormal, Uniform};

use crate::dataset::{compute_norm_stats, DatasetMeta, NormStats, TrainingSet};
use crate::error::{Error, Result};
use crate::excitation::{BasisFamily, BasisSpec, IntervalBox};
use crate::rng;
use crate::scalar::Scalar;

pub use checkpoint::{FLOW_MAGIC, FLOW_VERSION};
use made::{Made, MadeTrace};

pub const DEFAULT_LAYERS: usize = 5;
pub const DEFAULT_HIDDEN: [usize; 3] = [20, 20, 20];
pub const DEFAULT_LOG_SCALE_BOUND: f64 = 5.0;

/// Architecture of the flow.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowConfig {
    pub d: usize,
    pub n_gamma: usize,
    pub layers: usize,
    pub hidden: Vec<usize>,
    /// Log-scales are squashed to `(-bound, bound)` by `bound * tanh(s / bound)`.
    pub log_scale_bound: f64,
}

impl FlowConfig {
    pub fn new(d: usize, n_gamma: usize) -> Self {
        Self {
            d,
            n_gamma,
            layers: DEFAULT_LAYERS,
            hidden: DEFAULT_HIDDEN.to_vec(),
            log_scale_bound: DEFAULT_LOG_SCALE_BOUND,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.layers == 0 || self.hidden.is_empty() {
            return Err(Error::Config(
                "flow needs d >= 1, at least one layer and one hidden layer".into(),
            ));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        if !(self.log_scale_bound > 0.0) {
            return Err(Error::Config("log-scale bound must be positive".into()));
        }
        Ok(())
    }
}

/// What the model needs to know about the data it was trained on: the
/// excitation basis (prediction must parameterize inputs the same way), the
/// training box of initial states, and whether states are integer counts.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelMeta {
    pub n_u: usize,
    pub basis_family: BasisFamily,
    pub m: usize,
    pub dt: f64,
    pub x_box: Option<IntervalBox>,
    /// Samples are continuous surrogates of counts; rollout floors them.
    pub integer_state: bool,
    pub system: String,
}

impl ModelMeta {
    pub fn from_dataset(meta: &DatasetMeta, integer_state: bool) -> Self {
        Self {
            n_u: meta.n_u,
            basis_family: meta.basis_family,
            m: meta.m,
            dt: meta.dt,
            x_box: meta.x_box.clone(),
            integer_state,
            system: meta.system.clone(),
        }
    }

    pub fn basis(&self) -> Result<BasisSpec<f64>> {
        BasisSpec::new(self.basis_family, self.m, self.dt)
    }
}

/// `log p(x1 | x0, gamma)` with its pieces.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalDensity<S> {
    pub log_density: S,
    /// Base-distribution log density at `z`.
    pub base_log_density: S,
    /// Log-determinant of each layer's inverse map, in layer order.
    pub layer_log_dets: Vec<S>,
    /// Log-determinant of the target standardization.
    pub normalization_log_det: S,
}

impl<S: Scalar> ConditionalDensity<S> {
    pub fn total_log_det(&self) -> S {
        self.layer_log_dets.iter().copied().sum::<S>() + self.normalization_log_det
    }
}

struct LayerTrace<S> {
    made: MadeTrace<S>,
    s: Array2<S>,
    u: Array2<S>,
}

pub(crate) struct InverseRun<S> {
    pub z: Array2<S>,
    /// Per-row, per-layer `-sum(s)`: `B x layers`.
    pub layer_log_dets: Array2<S>,
    traces: Vec<LayerTrace<S>>,
}

#[derive(Debug, Clone)]
pub struct FlowModel<S = f64> {
    config: FlowConfig,
    meta: ModelMeta,
    norm: NormStats<S>,
    nets: Vec<Made<S>>,
    params: Vec<S>,
}

fn reverse_if_odd<S: Scalar>(a: Array2<S>, layer: usize) -> Array2<S> {
    if layer % 2 == 1 {
        a.slice(s![.., ..;-1]).to_owned()
    } else {
        a
    }
}

impl<S: Scalar> FlowModel<S> {
    /// A flow that starts as the identity in standardized space: hidden layers
    /// get Glorot-uniform weights from `seed`, output layers are zero.
    pub fn new(config: FlowConfig, meta: ModelMeta, norm: NormStats<S>, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(config, meta, norm)?;
        let mut rng = rng::split(seed, rng::RESERVED_STREAM_BASE);
        for net in &model.nets {
            for layer in &net.dense[..net.dense.len() - 1] {
                let limit = (6.0 / (layer.n_in + layer.n_out) as f64).sqrt();
                let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
                for p in &mut model.params[layer.offset..layer.bias_offset()] {
                    *p = S::of(rng.sample(dist));
                }
            }
        }
        Ok(model)
    }

    /// Default architecture sized for `set`, standardized with its statistics.
    pub fn for_training_set(set: &TrainingSet, integer_state: bool, seed: u64) -> Result<Self> {
        Self::new(
            FlowConfig::new(set.meta.d, set.meta.n_gamma),
            ModelMeta::from_dataset(&set.meta, integer_state),
            compute_norm_stats(set)?.cast(),
            seed,
        )
    }

    /// All parameters zero.
    pub fn zeros(config: FlowConfig, meta: ModelMeta, norm: NormStats<S>) -> Result<Self> {
        config.validate()?;
        norm.validate(config.d, config.n_gamma)?;
        if meta.n_u * meta.m != config.n_gamma {
            return Err(Error::Config(format!(
                "n_u * m = {} differs from n_gamma = {}",
                meta.n_u * meta.m,
                config.n_gamma
            )));
        }
        let n_ctx = config.d + config.n_gamma;
        let per_layer = Made::<S>::new(config.d, n_ctx, &config.hidden, 0).n_params();
        let nets = (0..config.layers)
            .map(|k| Made::new(config.d, n_ctx, &config.hidden, k * per_layer))
            .collect();
        Ok(Self {
            params: vec![S::zero(); per_layer * config.layers],
            config,
            meta,
            norm,
            nets,
        })
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    pub fn meta(&self) -> &ModelMeta {
        &self.meta
    }

    pub fn norm(&self) -> &NormStats<S> {
        &self.norm
    }

    pub fn d(&self) -> usize {
        self.config.d
    }

    pub fn n_gamma(&self) -> usize {
        self.config.n_gamma
    }

    /// Flat parameter vector: layer by layer, and within a layer dense by
    /// dense, each as a row-major weight matrix followed by its bias.
    pub fn params(&self) -> &[S] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [S] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// `true` for weight-matrix entries, `false` for biases.
    pub fn weight_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.params.len()];
        for net in &self.nets {
            for layer in &net.dense {
                mask[layer.offset..layer.bias_offset()].fill(true);
            }
        }
        mask
    }

    /// Replaces every parameter with `U(-scale, scale) / sqrt(fan_in)`. Masked
    /// entries are set too; they have no effect.
    pub fn randomize(&mut self, scale: f64, seed: u64) {
        let mut rng = rng::split(seed, rng::RESERVED_STREAM_BASE + 1);
        for net in &self.nets {
            for layer in &net.dense {
                let a = scale / (layer.n_in as f64).sqrt();
                for p in &mut self.params[layer.offset..layer.offset + layer.len()] {
                    *p = S::of(a * (2.0 * rng.random::<f64>() - 1.0));
                }
            }
        }
    }

    /// Sets the output bias of layer `layer` so that, with zero output
    /// weights, every coordinate gets log-scale `log_scale` and shift `shift`.
    pub fn force_layer_affine(&mut self, layer: usize, log_scale: f64, shift: f64) -> Result<()> {
        let bound = self.config.log_scale_bound;
        if layer >= self.config.layers || log_scale.abs() >= bound {
            return Err(Error::Config(format!(
                "cannot force layer {layer} to log-scale {log_scale}"
            )));
        }
        let raw = bound * (log_scale / bound).atanh();
        let out = self.nets[layer].output_layer().clone();
        let d = self.config.d;
        self.params[out.offset..out.bias_offset()].fill(S::zero());
        let bias = &mut self.params[out.bias_offset()..out.offset + out.len()];
        bias[..d].fill(S::of(raw));
        bias[d..].fill(S::of(shift));
        Ok(())
    }

    fn check_dims(&self, x0: &[S], gamma: &[S]) -> Result<()> {
        if x0.len() != self.d() || gamma.len() != self.n_gamma() {
            return Err(Error::Shape(format!(
                "expected x0 of length {} and gamma of length {}, got {} and {}",
                self.d(),
                self.n_gamma(),
                x0.len(),
                gamma.len()
            )));
        }
        Ok(())
    }

    /// Standardized context rows `[x0 | gamma]` for a batch.
    pub fn standardize_context(&self, x0: &Array2<S>, gamma: &Array2<S>) -> Array2<S> {
        let mut ctx = concatenate![Axis(1), x0.view(), gamma.view()];
        for (mut col, (sh, sc)) in ctx
            .columns_mut()
            .into_iter()
            .zip(self.norm.ctx_shift.iter().zip(&self.norm.ctx_scale))
        {
            col.mapv_inplace(|v| (v - *sh) / *sc);
        }
        ctx
    }

    pub fn standardize_target(&self, x0: &Array2<S>, x1: &Array2<S>) -> Array2<S> {
        let mut v = x1 - x0;
        for (mut col, (sh, sc)) in v
            .columns_mut()
            .into_iter()
            .zip(self.norm.target_shift.iter().zip(&self.norm.target_scale))
        {
            col.mapv_inplace(|x| (x - *sh) / *sc);
        }
        v
    }

    fn destandardize_target(&self, x0: &Array2<S>, mut v: Array2<S>) -> Array2<S> {
        for (mut col, (sh, sc)) in v
            .columns_mut()
            .into_iter()
            .zip(self.norm.target_shift.iter().zip(&self.norm.target_scale))
        {
            col.mapv_inplace(|x| x * *sc + *sh);
        }
        v + x0
    }

    /// Log-determinant of the target standardization, `-sum(log scale)`.
    pub fn normalization_log_det(&self) -> S {
        -self.norm.target_scale.iter().map(|s| s.ln()).sum::<S>()
    }

    fn clamp_log_scale(&self, raw: S) -> S {
        let b = S::of(self.config.log_scale_bound);
        b * (raw / b).tanh()
    }

    /// Density direction in standardized space.
    pub(crate) fn inverse_standardized(
        &self,
        v0: Array2<S>,
        ctx: &Array2<S>,
        trace: bool,
    ) -> Result<InverseRun<S>> {
        let (b, d) = v0.dim();
        let mut v = v0;
        let mut lds = Array2::zeros((b, self.config.layers));
        let mut traces = Vec::with_capacity(if trace { self.config.layers } else { 0 });
        for (k, net) in self.nets.iter().enumerate() {
            let input = concatenate![Axis(1), v.view(), ctx.view()];
            let (out, tr) = net.forward(&self.params, input, trace);
            let sc = out.slice(s![.., ..d]).mapv(|r| self.clamp_log_scale(r));
            let t = out.slice(s![.., d..]);
            let u = (&v - &t) * &sc.mapv(|x| (-x).exp());
            lds.column_mut(k).assign(&sc.sum_axis(Axis(1)).mapv(|x| -x));
            if u.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite value in inverse pass at layer {k}"
                )));
            }
            v = reverse_if_odd(u.clone(), k);
            if let Some(made) = tr {
                traces.push(LayerTrace { made, s: sc, u });
            }
        }
        Ok(InverseRun {
            z: v,
            layer_log_dets: lds,
            traces,
        })
    }

    /// Sampling direction in standardized space.
    pub(crate) fn forward_standardized(
        &self,
        z: Array2<S>,
        ctx: &Array2<S>,
    ) -> Result<(Array2<S>, Array1<S>)> {
        let (b, d) = z.dim();
        let mut v = z;
        let mut log_det = Array1::zeros(b);
        for k in (0..self.config.layers).rev() {
            let u = reverse_if_odd(v, k);
            let mut y = Array2::<S>::zeros((b, d));
            for i in 0..d {
                let input = concatenate![Axis(1), y.view(), ctx.view()];
                let (out, _) = self.nets[k].forward(&self.params, input, false);
                for r in 0..b {
                    let sc = self.clamp_log_scale(out[[r, i]]);
                    y[[r, i]] = u[[r, i]] * sc.exp() + out[[r, d + i]];
                    log_det[r] = log_det[r] + sc;
                }
            }
            if y.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite value in forward pass at layer {k}"
                )));
            }
            v = y;
        }
        Ok((v, log_det))
    }

    /// Batched `T`: maps base draws `z` (`B x d`) to next states.
    pub fn forward_batch(&self, z: Array2<S>, x0: &Array2<S>, gamma: &Array2<S>) -> Result<Array2<S>> {
        Ok(self.forward_batch_with_log_det(z, x0, gamma)?.0)
    }

    /// As [`Self::forward_batch`], also returning `log|det DT|` per row.
    pub fn forward_batch_with_log_det(
        &self,
        z: Array2<S>,
        x0: &Array2<S>,
        gamma: &Array2<S>,
    ) -> Result<(Array2<S>, Array1<S>)> {
        let ctx = self.standardize_context(x0, gamma);
        let (v, ld) = self.forward_standardized(z, &ctx)?;
        let nl = self.normalization_log_det();
        Ok((self.destandardize_target(x0, v), ld.mapv(|x| x - nl)))
    }

    /// Batched `S`: returns `z` and the per-row inverse log-determinant.
    pub fn inverse_batch(
        &self,
        x1: &Array2<S>,
        x0: &Array2<S>,
        gamma: &Array2<S>,
    ) -> Result<(Array2<S>, Array1<S>)> {
        let ctx = self.standardize_context(x0, gamma);
        let run = self.inverse_standardized(self.standardize_target(x0, x1), &ctx, false)?;
        let nl = self.normalization_log_det();
        Ok((run.z, run.layer_log_dets.sum_axis(Axis(1)).mapv(|x| x + nl)))
    }

    /// Per-row conditional log densities.
    pub fn log_prob_batch(&self, x1: &Array2<S>, x0: &Array2<S>, gamma: &Array2<S>) -> Result<Array1<S>> {
        let (z, ld) = self.inverse_batch(x1, x0, gamma)?;
        let c = S::of(-0.5 * self.d() as f64 * (2.0 * std::f64::consts::PI).ln());
        Ok(z.map_axis(Axis(1), |r| c - S::of(0.5) * r.dot(&r)) + ld)
    }

    fn row(v: &[S]) -> Array2<S> {
        Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("row shape")
    }

    /// `x1 = T(z; x0, gamma)`.
    pub fn forward_t(&self, z: &[S], x0: &[S], gamma: &[S]) -> Result<Vec<S>> {
        self.check_dims(x0, gamma)?;
        if z.len() != self.d() {
            return Err(Error::Shape(format!(
                "z has length {}, expected {}",
                z.len(),
                self.d()
            )));
        }
        Ok(self
            .forward_batch(Self::row(z), &Self::row(x0), &Self::row(gamma))?
            .into_raw_vec_and_offset()
            .0)
    }

    /// `(z, log|det DS|) = S(x1; x0, gamma)`, the log-determinant including
    /// the target standardization.
    pub fn inverse_s(&self, x1: &[S], x0: &[S], gamma: &[S]) -> Result<(Vec<S>, S)> {
        self.check_dims(x0, gamma)?;
        if x1.len() != self.d() {
            return Err(Error::Shape(format!(
                "x1 has length {}, expected {}",
                x1.len(),
                self.d()
            )));
        }
        let (z, ld) = self.inverse_batch(&Self::row(x1), &Self::row(x0), &Self::row(gamma))?;
        Ok((z.into_raw_vec_and_offset().0, ld[0]))
    }

    pub fn log_prob(&self, x1: &[S], x0: &[S], gamma: &[S]) -> Result<S> {
        Ok(self.log_prob_detailed(x1, x0, gamma)?.log_density)
    }

    pub fn log_prob_detailed(&self, x1: &[S], x0: &[S], gamma: &[S]) -> Result<ConditionalDensity<S>> {
        self.check_dims(x0, gamma)?;
        if x1.len() != self.d() {
            return Err(Error::Shape(format!(
                "x1 has length {}, expected {}",
                x1.len(),
                self.d()
            )));
        }
        let (x1r, x0r, gr) = (Self::row(x1), Self::row(x0), Self::row(gamma));
        let ctx = self.standardize_context(&x0r, &gr);
        let run = self.inverse_standardized(self.standardize_target(&x0r, &x1r), &ctx, false)?;
        let z = run.z.row(0);
        let base = S::of(-0.5 * self.d() as f64 * (2.0 * std::f64::consts::PI).ln()) - S::of(0.5) * z.dot(&z);
        let layer_log_dets = run.layer_log_dets.row(0).to_vec();
        let normalization_log_det = self.normalization_log_det();
        let log_density = base + layer_log_dets.iter().copied().sum::<S>() + normalization_log_det;
        Ok(ConditionalDensity {
            log_density,
            base_log_density: base,
            layer_log_dets,
            normalization_log_det,
        })
    }

    /// `n` draws from the conditional law (continuous; integer-state models
    /// are floored by the rollout, not here).
    pub fn sample<R: Rng + ?Sized>(
        &self,
        x0: &[S],
        gamma: &[S],
        n: usize,
        rng: &mut R,
    ) -> Result<Vec<Vec<S>>> {
        self.check_dims(x0, gamma)?;
        let d = self.d();
        let z = Array2::from_shape_fn((n, d), |_| S::of(rng.sample::<f64, _>(StandardNormal)));
        let x0b = Self::row(x0).broadcast((n, d)).expect("broadcast").to_owned();
        let gb = Self::row(gamma)
            .broadcast((n, self.n_gamma()))
            .expect("broadcast")
            .to_owned();
        let x = self.forward_batch(z, &x0b, &gb)?;
        Ok(x.outer_iter().map(|r| r.to_vec()).collect())
    }

    /// Mean negative log-likelihood (original units) of standardized
    /// targets `v` given standardized contexts, and its gradient added to
    /// `grad`.
    pub(crate) fn nll_and_grad(&self, v: Array2<S>, ctx: &Array2<S>, grad: &mut [S]) -> Result<S> {
        let (b, d) = v.dim();
        let run = self.inverse_standardized(v, ctx, true)?;
        let inv_b = S::one() / S::of(b as f64);
        let half_log_2pi = S::of(0.5 * (2.0 * std::f64::consts::PI).ln());
        let loss = (run.z.iter().map(|x| *x * *x).sum::<S>() * S::of(0.5) - run.layer_log_dets.sum()) * inv_b
            + S::of(d as f64) * half_log_2pi
            - self.normalization_log_det();

        let bound = S::of(self.config.log_scale_bound);
        let mut g_v = run.z.mapv(|x| x * inv_b);
        for (k, tr) in run.traces.iter().enumerate().rev() {
            let g_u = reverse_if_odd(g_v, k);
            let es = tr.s.mapv(|x| (-x).exp());
            let g_s = (&g_u * &tr.u).mapv(|x| inv_b - x);
            let g_t = -(&g_u * &es);
            let squash = tr.s.mapv(|x| {
                let r = x / bound;
                S::one() - r * r
            });
            let g_out = concatenate![Axis(1), (g_s * squash).view(), g_t.view()];
            let g_in = self.nets[k].backward(&self.params, &tr.made, g_out, grad);
            g_v = &g_u * &es + g_in;
        }
        Ok(loss)
    }

    /// Same architecture and metadata, parameters cast to another scalar.
    pub fn cast<T: Scalar>(&self) -> FlowModel<T> {
        let mut out = FlowModel::<T>::zeros(self.config.clone(), self.meta.clone(), self.norm.cast())
            .expect("validated configuration");
        for (o, p) in out.params.iter_mut().zip(&self.params) {
            *o = T::of(p.to_f64_lossy());
        }
        out
    }
}

#[cfg(test)]
mod tests;
