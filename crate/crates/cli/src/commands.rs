//! The four subcommands. Each returns a [`Failure`] carrying the exit status
//! its error class maps to.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use rand::Rng;
use sfml::dataset::{compute_norm_stats, generate_training_set, TrainingSet};
use sfml::flow::{FlowConfig, FlowModel, ModelMeta};
use sfml::predict::{self, Scenario, TruthModel, ValidationReport, MAX_PLOT_BINS};
use sfml::rng::{self, RESERVED_STREAM_BASE};
use sfml::stats;
use sfml::training::{resume, train_until, TrainState};
use sfml::{Error, Scalar};

use crate::config::{ModelSource, Precision, RunConfig};

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_SIMULATE: u8 = 3;
pub const EXIT_TRAIN: u8 = 4;
pub const EXIT_PREDICT: u8 = 5;
pub const EXIT_THRESHOLD: u8 = 6;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn new(code: u8, error: impl Into<anyhow::Error>) -> Self {
        Self {
            code,
            error: error.into(),
        }
    }
}

pub type Outcome<T = ()> = std::result::Result<T, Failure>;

trait OrExit<T> {
    fn or_exit(self, code: u8) -> Outcome<T>;
}

impl<T, E: Into<anyhow::Error>> OrExit<T> for std::result::Result<T, E> {
    fn or_exit(self, code: u8) -> Outcome<T> {
        self.map_err(|e| Failure::new(code, e))
    }
}

/// Everything a subcommand needs besides its config.
pub struct RunContext {
    pub seed: u64,
    /// Base directory of every relative path in the config.
    pub out: PathBuf,
}

/// Independent roots for each pipeline stage, so that e.g. ensemble member
/// `i` never shares a stream with training record `i`.
#[derive(Clone, Copy)]
enum Stage {
    Data = 0,
    Init = 1,
    Train = 2,
    Predict = 3,
}

fn stage_seed(root: u64, stage: Stage) -> u64 {
    rng::split(root, RESERVED_STREAM_BASE + 64 + stage as u64).random()
}

impl RunContext {
    fn path(&self, p: &Path) -> PathBuf {
        self.out.join(p)
    }

    fn write(&self, p: &Path, bytes: impl AsRef<[u8]>, code: u8) -> Outcome<PathBuf> {
        let path = self.path(p);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).or_exit(code)?;
        }
        fs::write(&path, bytes)
            .with_context(|| format!("writing {}", path.display()))
            .or_exit(code)?;
        Ok(path)
    }
}

pub fn gen_data(cfg: &RunConfig, ctx: &RunContext) -> Outcome {
    let setup = cfg.system(&ctx.out).or_exit(EXIT_CONFIG)?;
    if cfg.data.m == 0 {
        return Err(Failure::new(EXIT_CONFIG, anyhow!("data.m must be >= 1")));
    }
    let set =
        generate_training_set(&setup, cfg.data.m, stage_seed(ctx.seed, Stage::Data)).map_err(
            |e| match e {
                Error::Config(_) | Error::Lookup { .. } => Failure::new(EXIT_CONFIG, e),
                other => Failure::new(EXIT_SIMULATE, other),
            },
        )?;
    let path = ctx.write(&cfg.data.path, set.to_bytes(), EXIT_SIMULATE)?;
    ctx.write(
        &cfg.data.path.with_extension("json"),
        set.sidecar_json(),
        EXIT_SIMULATE,
    )?;
    let m = &set.meta;
    println!(
        "wrote {}: M = {}, d = {}, n_gamma = {}, dt = {}, system = {}",
        path.display(),
        set.len(),
        m.d,
        m.n_gamma,
        m.dt,
        m.system
    );
    Ok(())
}

pub fn train(cfg: &RunConfig, ctx: &RunContext) -> Outcome {
    let data_path = ctx.path(&cfg.data.path);
    let set = TrainingSet::load(&data_path)
        .with_context(|| format!("loading {}", data_path.display()))
        .or_exit(EXIT_CONFIG)?;
    let integer_state = match cfg.model.integer_state {
        Some(v) => v,
        None => match &cfg.system {
            Some(_) => cfg.system(&ctx.out).or_exit(EXIT_CONFIG)?.kind.integer_state(),
            None => false,
        },
    };
    match cfg.model.precision {
        Precision::F64 => train_as::<f64>(cfg, ctx, &set, integer_state),
        Precision::F32 => train_as::<f32>(cfg, ctx, &set, integer_state),
    }
}

fn train_as<S: Scalar>(cfg: &RunConfig, ctx: &RunContext, set: &TrainingSet, integer_state: bool) -> Outcome {
    let mut tc = cfg.training.clone();
    tc.seed = stage_seed(ctx.seed, Stage::Train);
    tc.checkpoint_path = tc.checkpoint_path.map(|p| ctx.path(&p));
    tc.validate().or_exit(EXIT_CONFIG)?;

    let resumable = tc
        .checkpoint_path
        .as_ref()
        .filter(|p| cfg.model.resume && p.is_file());
    let mut state: TrainState<S> = match resumable {
        Some(p) => {
            let st = resume(p)
                .with_context(|| format!("resuming from {}", p.display()))
                .or_exit(EXIT_CONFIG)?;
            eprintln!("resuming at epoch {}", st.epoch);
            st
        }
        None => {
            let flow = FlowConfig {
                d: set.meta.d,
                n_gamma: set.meta.n_gamma,
                layers: cfg.model.layers,
                hidden: cfg.model.hidden.clone(),
                log_scale_bound: cfg.model.log_scale_bound,
            };
            let norm = compute_norm_stats(set).or_exit(EXIT_CONFIG)?.cast();
            let meta = ModelMeta::from_dataset(&set.meta, integer_state);
            TrainState::new(
                FlowModel::new(flow, meta, norm, stage_seed(ctx.seed, Stage::Init)).or_exit(EXIT_CONFIG)?,
            )
        }
    };
    let result = train_until(&mut state, set, &tc, tc.epochs as u64);
    ctx.write(&cfg.model.history, state.history.to_lines(), EXIT_TRAIN)?;
    result.map_err(|e| match e {
        Error::Config(_) | Error::Shape(_) => Failure::new(EXIT_CONFIG, e),
        other => Failure::new(EXIT_TRAIN, other),
    })?;
    let best = state.best_model().cast::<f64>();
    let path = ctx.write(&cfg.model.path, best.to_bytes(), EXIT_TRAIN)?;
    println!(
        "wrote {}: {} epochs, best loss {:.6} at epoch {}",
        path.display(),
        state.epoch,
        state.best_loss,
        state.best_epoch
    );
    Ok(())
}

fn load_model(cfg: &RunConfig, ctx: &RunContext) -> Outcome<FlowModel<f64>> {
    let path = ctx.path(&cfg.model.path);
    FlowModel::load(&path)
        .with_context(|| format!("loading {}", path.display()))
        .or_exit(EXIT_CONFIG)
}

fn scenario(cfg: &RunConfig, ctx: &RunContext) -> Outcome<Scenario> {
    let sc = cfg.scenario().or_exit(EXIT_CONFIG)?;
    if sc.n_ens == 0 {
        return Err(Failure::new(EXIT_CONFIG, anyhow!("scenario.n_ens must be >= 1")));
    }
    Ok(Scenario {
        x0: sc.x0.clone(),
        signal: sc.signal(&ctx.out).or_exit(EXIT_CONFIG)?,
        t_end: sc.t_end,
        n_ens: sc.n_ens,
        seed: stage_seed(ctx.seed, Stage::Predict),
    })
}

/// Shape and domain problems in a scenario are configuration errors; anything
/// that goes wrong during the rollout itself is a prediction error.
fn rollout_failure(e: Error) -> Failure {
    match e {
        Error::Config(_) | Error::Shape(_) => Failure::new(EXIT_CONFIG, e),
        other => Failure::new(EXIT_PREDICT, other),
    }
}

pub fn predict(cfg: &RunConfig, ctx: &RunContext) -> Outcome {
    let model = load_model(cfg, ctx)?;
    let sc = scenario(cfg, ctx)?;
    let section = cfg.scenario().or_exit(EXIT_CONFIG)?;
    let n_steps = sc.n_steps(model.meta().dt).or_exit(EXIT_CONFIG)?;
    let mut ens =
        predict::ensemble(&model, &sc.x0, &sc.signal, n_steps, sc.n_ens, sc.seed).map_err(rollout_failure)?;
    ens.name = model.meta().system.clone();
    for w in ens.warnings.iter().take(10) {
        eprintln!(
            "warning: member {} left the guard box at step {} (state {:?})",
            w.member, w.step, w.state
        );
    }
    if ens.warnings.len() > 10 {
        eprintln!(
            "warning: {} members left the guard box in total",
            ens.warnings.len()
        );
    }
    let path = ctx.write(&section.ensemble, ens.to_bytes(), EXIT_PREDICT)?;

    let mut curves = String::from("t");
    for k in 0..ens.d {
        let _ = write!(curves, " mean_{k} std_{k}");
    }
    curves.push('\n');
    let mo = if ens.n_ens >= 2 {
        Some(predict::moments(&ens).or_exit(EXIT_PREDICT)?)
    } else {
        None
    };
    for (n, t) in ens.times().iter().enumerate() {
        let _ = write!(curves, "{t}");
        for k in 0..ens.d {
            match &mo {
                Some(m) => {
                    let _ = write!(curves, " {:e} {:e}", m.mean[[n, k]], m.std[[n, k]]);
                }
                None => {
                    let _ = write!(curves, " {:e} nan", ens.state(0, n)[k]);
                }
            }
        }
        curves.push('\n');
    }
    ctx.write(&section.moments, curves, EXIT_PREDICT)?;

    let mut hist = String::from("t coord center density\n");
    for &t in &section.snapshots {
        let step = ens.step_at(t).or_exit(EXIT_CONFIG)?;
        for k in 0..ens.d {
            let h = stats::histogram_fd(&ens.snapshot(step, k), MAX_PLOT_BINS);
            for (c, p) in h.centers().iter().zip(h.density()) {
                let _ = writeln!(hist, "{} {k} {c:e} {p:e}", step as f64 * ens.dt);
            }
        }
    }
    ctx.write(&section.histograms, hist, EXIT_PREDICT)?;
    println!(
        "wrote {}: {} members x {} steps, d = {}",
        path.display(),
        ens.n_ens,
        ens.n_steps,
        ens.d
    );
    Ok(())
}

pub fn validate(cfg: &RunConfig, ctx: &RunContext) -> Outcome {
    let setup = cfg.system(&ctx.out).or_exit(EXIT_CONFIG)?;
    let truth = TruthModel::from_setup(&setup);
    let sc = scenario(cfg, ctx)?;
    let snapshots = &cfg.scenario().or_exit(EXIT_CONFIG)?.snapshots;
    let classify = |e: Error| match e {
        Error::Divergence { .. } | Error::Runaway { .. } => Failure::new(EXIT_SIMULATE, e),
        other => rollout_failure(other),
    };
    let report = match cfg.validate.model {
        ModelSource::Truth => predict::validate(&truth, &truth, &sc, snapshots),
        ModelSource::Checkpoint => predict::validate(&load_model(cfg, ctx)?, &truth, &sc, snapshots),
    }
    .map_err(classify)?;
    let path = ctx.write(&cfg.validate.report, report.to_text(), EXIT_PREDICT)?;
    ctx.write(&cfg.validate.plot, report.plot_data(), EXIT_PREDICT)?;
    println!("wrote {}", path.display());

    let violations = check_thresholds(cfg, &report);
    for v in &violations {
        eprintln!("threshold exceeded: {v}");
    }
    if !violations.is_empty() {
        return Err(Failure::new(
            EXIT_THRESHOLD,
            anyhow!("{} validation threshold(s) exceeded", violations.len()),
        ));
    }
    Ok(())
}

fn check_thresholds(cfg: &RunConfig, report: &ValidationReport) -> Vec<String> {
    let th = &cfg.validate.thresholds;
    let mut out = Vec::new();
    let mut check = |name: &str, limit: Option<f64>, values: &mut dyn Iterator<Item = (String, f64)>| {
        if let Some(limit) = limit {
            for (at, v) in values {
                // NaN never passes
                if v.is_nan() || v > limit {
                    out.push(format!("{name} {v:e} > {limit:e} ({at})"));
                }
            }
        }
    };
    let per_coord = |v: &[f64]| -> Vec<(String, f64)> {
        v.iter()
            .enumerate()
            .map(|(k, &x)| (format!("coord {k}"), x))
            .collect()
    };
    check(
        "max_mean_error",
        th.max_mean_error,
        &mut per_coord(&report.max_abs_mean_error).into_iter(),
    );
    check(
        "max_std_error",
        th.max_std_error,
        &mut per_coord(&report.max_abs_std_error).into_iter(),
    );
    let snap = |f: fn(&predict::SnapshotReport) -> f64| -> Vec<(String, f64)> {
        report
            .snapshots
            .iter()
            .map(|s| (format!("t = {}, coord {}", s.time, s.coord), f(s)))
            .collect()
    };
    check("max_w1", th.max_w1, &mut snap(|s| s.distance.w1).into_iter());
    check("max_ks", th.max_ks, &mut snap(|s| s.distance.ks).into_iter());
    out
}
