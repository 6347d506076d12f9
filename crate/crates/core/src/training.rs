//! Maximum-likelihood training of [`FlowModel`] on a [`TrainingSet`].
//!
//! Optimization is mini-batch Adam with decoupled weight decay on weight
//! matrices (biases are not decayed) under a decaying triangular cyclic rate.
//! Every epoch draws its shuffle (and dequantization noise) from its own
//! stream of the seed, so a run resumed from a checkpoint continues exactly as
//! the uninterrupted run would.
//!
//! Training checkpoint format (little-endian): `"SFMT" | version u32 = 1 |`
//! embedded flow checkpoint `| epoch u64 | iteration u64 | adam step u64 |`
//! first and second moments (f64 each, one per parameter) `| best loss f64 |
//! best epoch u64 | best parameters | history count u64 |` then per record
//! `epoch u64, loss f64, lr f64, seconds f64`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{Reader, Writer};
use crate::dataset::{SnapshotPair, TrainingSet};
use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::rng;
use crate::scalar::Scalar;

pub const TRAIN_MAGIC: &[u8; 4] = b"SFMT";
pub const TRAIN_VERSION: u32 = 1;

/// Stream offset for per-epoch shuffles, above the flow-initialization streams.
const EPOCH_STREAM_BASE: u64 = rng::RESERVED_STREAM_BASE + 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub max_lr: f64,
    /// Per-iteration exponential decay of the rate.
    pub lr_decay: f64,
    /// Iterations per half cycle.
    pub step_size: usize,
    /// Epochs per amplitude period.
    pub cycle_epochs: usize,
    /// Amplitude factor applied once per amplitude period.
    pub cycle_decay: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Add `U(0, 1)` noise to `x1` each epoch (integer-valued states).
    pub dequantize: bool,
    /// Epochs between checkpoints; 0 disables them.
    pub checkpoint_every: usize,
    pub checkpoint_path: Option<PathBuf>,
    /// Epochs between progress lines on stderr; 0 disables them.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            batch_size: 1000,
            base_lr: 3e-4,
            max_lr: 5e-4,
            lr_decay: 0.99999,
            step_size: 10_000,
            cycle_epochs: 40_000,
            cycle_decay: 0.5,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            dequantize: false,
            checkpoint_every: 0,
            checkpoint_path: None,
            log_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.base_lr > 0.0) || self.base_lr > self.max_lr {
            return bad("need 0 < base_lr <= max_lr");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must lie in (0, 1]");
        }
        if self.step_size == 0 || self.cycle_epochs == 0 {
            return bad("step_size and cycle_epochs must be >= 1");
        }
        if !(self.cycle_decay > 0.0 && self.cycle_decay <= 1.0) {
            return bad("cycle_decay must lie in (0, 1]");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be >= 0");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("Adam constants out of range");
        }
        if self.checkpoint_every > 0 && self.checkpoint_path.is_none() {
            return bad("checkpoint_every needs checkpoint_path");
        }
        Ok(())
    }
}

/// Triangular cyclic rate. `tri` ramps 0 -> 1 -> 0 over `2 * step_size`
/// iterations; its amplitude halves (by default) every `cycle_epochs` epochs,
/// and the whole rate decays by `lr_decay` per iteration.
pub fn lr_schedule(cfg: &TrainConfig, iteration: u64, epoch: u64) -> f64 {
    let step = cfg.step_size as f64;
    let phase = (iteration % (2 * cfg.step_size as u64)) as f64;
    let tri = 1.0 - (phase / step - 1.0).abs();
    let amp = cfg.cycle_decay.powi((epoch / cfg.cycle_epochs as u64) as i32);
    (cfg.base_lr + (cfg.max_lr - cfg.base_lr) * tri * amp) * cfg.lr_decay.powf(iteration as f64)
}

/// `(x0, x1, gamma)` of a batch as arrays.
fn gather_batch<S: Scalar>(flow: &FlowModel<S>, batch: &[SnapshotPair<'_>]) -> Result<[Array2<S>; 3]> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let (d, ng) = (flow.d(), flow.n_gamma());
    if let Some(i) = batch
        .iter()
        .position(|p| p.x0.len() != d || p.x1.len() != d || p.gamma.len() != ng)
    {
        return Err(Error::Shape(format!(
            "record {i} does not match d = {d}, n_gamma = {ng}"
        )));
    }
    let gather = |f: &dyn for<'a> Fn(SnapshotPair<'a>) -> &'a [f64], w: usize| {
        Array2::from_shape_fn((batch.len(), w), |(r, c)| S::of(f(batch[r])[c]))
    };
    Ok([
        gather(&|p| p.x0, d),
        gather(&|p| p.x1, d),
        gather(&|p| p.gamma, ng),
    ])
}

/// Mean negative log-likelihood of a batch.
pub fn nll_loss<S: Scalar>(flow: &FlowModel<S>, batch: &[SnapshotPair<'_>]) -> Result<S> {
    let [x0, x1, g] = gather_batch(flow, batch)?;
    let lp = flow.log_prob_batch(&x1, &x0, &g).map_err(|e| Error::Training {
        index: 0,
        detail: e.to_string(),
    })?;
    if let Some(i) = lp.iter().position(|v| !v.is_finite()) {
        return Err(Error::Training {
            index: i,
            detail: "non-finite log-likelihood".into(),
        });
    }
    Ok(-lp.mean().expect("nonempty"))
}

/// [`nll_loss`] together with its gradient with respect to every parameter,
/// exactly as the optimizer sees it.
pub fn nll_gradient<S: Scalar>(flow: &FlowModel<S>, batch: &[SnapshotPair<'_>]) -> Result<(S, Vec<S>)> {
    let [x0, x1, g] = gather_batch(flow, batch)?;
    let ctx = flow.standardize_context(&x0, &g);
    let v = flow.standardize_target(&x0, &x1);
    let mut grad = vec![S::zero(); flow.n_params()];
    let loss = flow.nll_and_grad(v, &ctx, &mut grad)?;
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    /// Mean training NLL over the epoch's batches.
    pub loss: f64,
    /// Rate at the epoch's last iteration.
    pub lr: f64,
    /// Wall-clock seconds since training (or resumption) began.
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainHistory {
    /// One JSON object per line.
    pub fn to_lines(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("record serializes"));
            s.push('\n');
        }
        s
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_lines().as_bytes())?;
        Ok(())
    }
}

/// Everything needed to continue a run.
#[derive(Debug, Clone)]
pub struct TrainState<S = f64> {
    pub model: FlowModel<S>,
    /// Completed epochs.
    pub epoch: u64,
    pub iteration: u64,
    adam_step: u64,
    first_moment: Vec<S>,
    second_moment: Vec<S>,
    pub best_loss: f64,
    pub best_epoch: u64,
    best_params: Vec<S>,
    pub history: TrainHistory,
}

impl<S: Scalar> TrainState<S> {
    pub fn new(model: FlowModel<S>) -> Self {
        let n = model.n_params();
        Self {
            best_params: model.params().to_vec(),
            model,
            epoch: 0,
            iteration: 0,
            adam_step: 0,
            first_moment: vec![S::zero(); n],
            second_moment: vec![S::zero(); n],
            best_loss: f64::INFINITY,
            best_epoch: 0,
            history: TrainHistory::default(),
        }
    }

    /// The model carrying the lowest-loss weights seen so far.
    pub fn best_model(&self) -> FlowModel<S> {
        let mut m = self.model.clone();
        m.params_mut().copy_from_slice(&self.best_params);
        m
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(TRAIN_MAGIC);
        w.u32(TRAIN_VERSION);
        self.model.write_into(&mut w);
        w.u64(self.epoch);
        w.u64(self.iteration);
        w.u64(self.adam_step);
        let put = |w: &mut Writer, v: &[S]| v.iter().for_each(|x| w.f64(x.to_f64_lossy()));
        put(&mut w, &self.first_moment);
        put(&mut w, &self.second_moment);
        w.f64(self.best_loss);
        w.u64(self.best_epoch);
        put(&mut w, &self.best_params);
        w.u64(self.history.records.len() as u64);
        for r in &self.history.records {
            w.u64(r.epoch);
            w.f64(r.loss);
            w.f64(r.lr);
            w.f64(r.seconds);
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(TRAIN_MAGIC)?;
        r.version(TRAIN_VERSION)?;
        let model = FlowModel::<S>::read_from(&mut r)?;
        let n = model.n_params();
        let epoch = r.u64()?;
        let iteration = r.u64()?;
        let adam_step = r.u64()?;
        let get = |r: &mut Reader<'_>| -> Result<Vec<S>> { Ok(r.f64s(n)?.into_iter().map(S::of).collect()) };
        let first_moment = get(&mut r)?;
        let second_moment = get(&mut r)?;
        let best_loss = r.f64()?;
        let best_epoch = r.u64()?;
        let best_params = get(&mut r)?;
        let at = r.pos;
        let count = r.u64()?;
        if count > epoch {
            return Err(Error::format(
                at,
                format!("{count} history records for {epoch} epochs"),
            ));
        }
        let mut records = Vec::with_capacity(count as usize);
        for _ in 0..count {
            records.push(EpochRecord {
                epoch: r.u64()?,
                loss: r.f64()?,
                lr: r.f64()?,
                seconds: r.f64()?,
            });
        }
        if r.pos as usize != bytes.len() {
            return Err(Error::format(r.pos, "trailing bytes after history"));
        }
        Ok(Self {
            model,
            epoch,
            iteration,
            adam_step,
            first_moment,
            second_moment,
            best_loss,
            best_epoch,
            best_params,
            history: TrainHistory {
                records,
                checkpoints: Vec::new(),
            },
        })
    }
}

pub fn save_checkpoint<S: Scalar>(state: &TrainState<S>, path: impl AsRef<Path>) -> Result<()> {
    // write-then-rename so an interrupted save never clobbers the last one
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, state.to_bytes())?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn resume<S: Scalar>(path: impl AsRef<Path>) -> Result<TrainState<S>> {
    TrainState::from_bytes(&fs::read(path)?)
}

/// Standardized training arrays, computed once per run.
struct Prepared<S> {
    ctx: Array2<S>,
    target: Array2<S>,
    /// `1 / target_scale`, the standardized size of one dequantization unit.
    inv_scale: Vec<S>,
}

fn prepare<S: Scalar>(model: &FlowModel<S>, set: &TrainingSet) -> Result<Prepared<S>> {
    let (d, ng) = (model.d(), model.n_gamma());
    if set.meta.d != d || set.meta.n_gamma != ng {
        return Err(Error::Shape(format!(
            "model expects d = {d}, n_gamma = {ng}; set has d = {}, n_gamma = {}",
            set.meta.d, set.meta.n_gamma
        )));
    }
    let m = set.len();
    let col = |f: &dyn for<'a> Fn(SnapshotPair<'a>) -> &'a [f64], w: usize| {
        Array2::from_shape_fn((m, w), |(r, c)| S::of(f(set.record(r))[c]))
    };
    let x0 = col(&|p| p.x0, d);
    let x1 = col(&|p| p.x1, d);
    let g = col(&|p| p.gamma, ng);
    Ok(Prepared {
        ctx: model.standardize_context(&x0, &g),
        target: model.standardize_target(&x0, &x1),
        inv_scale: model.norm().target_scale.iter().map(|s| S::one() / *s).collect(),
    })
}

/// Trains for `cfg.epochs` epochs from scratch and returns the best-loss
/// model with its history.
pub fn train<S: Scalar>(
    model: FlowModel<S>,
    set: &TrainingSet,
    cfg: &TrainConfig,
) -> Result<(FlowModel<S>, TrainHistory)> {
    let mut state = TrainState::new(model);
    train_until(&mut state, set, cfg, cfg.epochs as u64)?;
    Ok((state.best_model(), state.history))
}

/// Continues `state` until `until_epoch` epochs have completed. On a
/// non-finite loss the state is rolled back to the last completed epoch,
/// checkpointed if a path is configured, and an error is returned.
pub fn train_until<S: Scalar>(
    state: &mut TrainState<S>,
    set: &TrainingSet,
    cfg: &TrainConfig,
    until_epoch: u64,
) -> Result<()> {
    cfg.validate()?;
    if state.epoch >= until_epoch {
        return Ok(());
    }
    let data = prepare(&state.model, set)?;
    let m = set.len();
    let decay_mask = state.model.weight_mask();
    let started = Instant::now();
    let mut grad = vec![S::zero(); state.model.n_params()];
    let mut order: Vec<usize> = (0..m).collect();

    while state.epoch < until_epoch {
        let epoch = state.epoch;
        let mut rng = rng::split(cfg.seed, EPOCH_STREAM_BASE + epoch);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let snapshot = (
            state.model.params().to_vec(),
            state.first_moment.clone(),
            state.second_moment.clone(),
            state.adam_step,
            state.iteration,
        );
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let ctx = data.ctx.select(Axis(0), chunk);
            let mut target = data.target.select(Axis(0), chunk);
            if cfg.dequantize {
                for mut row in target.rows_mut() {
                    for (v, s) in row.iter_mut().zip(&data.inv_scale) {
                        *v = *v + S::of(rng.random::<f64>()) * *s;
                    }
                }
            }
            grad.fill(S::zero());
            let result = state.model.nll_and_grad(target, &ctx, &mut grad);
            let loss = match result {
                Ok(l) if l.is_finite() && grad.iter().all(|g| g.is_finite()) => l,
                other => {
                    let detail = match other {
                        Err(e) => e.to_string(),
                        Ok(l) => format!("loss became {l}"),
                    };
                    let (p, m1, m2, step, it) = snapshot;
                    state.model.params_mut().copy_from_slice(&p);
                    state.first_moment = m1;
                    state.second_moment = m2;
                    state.adam_step = step;
                    state.iteration = it;
                    let mut note = String::new();
                    if let Some(path) = &cfg.checkpoint_path {
                        save_checkpoint(state, path)?;
                        note = format!("; last good state saved to {}", path.display());
                    }
                    return Err(Error::Training {
                        index: chunk[0],
                        detail: format!("diverged in epoch {epoch}: {detail}{note}"),
                    });
                }
            };
            lr = lr_schedule(cfg, state.iteration, epoch);
            adam_update(state, &grad, &decay_mask, lr, cfg);
            state.iteration += 1;
            loss_sum += loss.to_f64_lossy() * chunk.len() as f64;
        }
        let epoch_loss = loss_sum / m as f64;
        state.epoch += 1;
        if epoch_loss < state.best_loss {
            state.best_loss = epoch_loss;
            state.best_epoch = state.epoch;
            state.best_params.copy_from_slice(state.model.params());
        }
        state.history.records.push(EpochRecord {
            epoch: state.epoch,
            loss: epoch_loss,
            lr,
            seconds: started.elapsed().as_secs_f64(),
        });
        if cfg.log_every > 0 && state.epoch.is_multiple_of(cfg.log_every as u64) {
            eprintln!(
                "epoch {:>7}  nll {:>10.5}  lr {:.3e}",
                state.epoch, epoch_loss, lr
            );
        }
        if cfg.checkpoint_every > 0 && state.epoch.is_multiple_of(cfg.checkpoint_every as u64) {
            let path = cfg.checkpoint_path.as_ref().expect("validated");
            save_checkpoint(state, path)?;
            state.history.checkpoints.push(path.clone());
        }
    }
    Ok(())
}

fn adam_update<S: Scalar>(
    state: &mut TrainState<S>,
    grad: &[S],
    decay_mask: &[bool],
    lr: f64,
    cfg: &TrainConfig,
) {
    state.adam_step += 1;
    let t = state.adam_step as i32;
    let (b1, b2) = (S::of(cfg.beta1), S::of(cfg.beta2));
    let c1 = S::one() / (S::one() - b1.powi(t));
    let c2 = S::one() / (S::one() - b2.powi(t));
    let (lr, wd, eps) = (S::of(lr), S::of(cfg.weight_decay), S::of(cfg.adam_eps));
    let params = state.model.params_mut();
    for i in 0..params.len() {
        let g = grad[i];
        let m1 = b1 * state.first_moment[i] + (S::one() - b1) * g;
        let m2 = b2 * state.second_moment[i] + (S::one() - b2) * g * g;
        state.first_moment[i] = m1;
        state.second_moment[i] = m2;
        let mut step = (m1 * c1) / ((m2 * c2).sqrt() + eps);
        if decay_mask[i] {
            step = step + wd * params[i];
        }
        params[i] = params[i] - lr * step;
    }
}

#[cfg(test)]
mod tests;
