//! JSON run configuration shared by every subcommand.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use serde::Deserialize;
use sfml::excitation::{BasisFamily, BasisSpec, ExcitationSignal, IntervalBox};
use sfml::flow::{DEFAULT_HIDDEN, DEFAULT_LAYERS, DEFAULT_LOG_SCALE_BOUND};
use sfml::systems::{builtin_system, SdeSpec, SystemKind, SystemSetup, BUILTIN_NAMES};
use sfml::training::TrainConfig;

use crate::expr::Expr;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub system: Option<SystemRef>,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub training: TrainConfig,
    pub scenario: Option<ScenarioSection>,
    #[serde(default)]
    pub validate: ValidateSection,
}

/// A built-in system name, a path to a JSON custom system, or an inline one.
#[derive(Debug, Deserialize)]
#[serde(untagged)]
pub enum SystemRef {
    Named(String),
    Inline(CustomSystem),
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub m: usize,
    pub path: PathBuf,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            m: 1000,
            path: "data.sfml".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub path: PathBuf,
    pub precision: Precision,
    pub layers: usize,
    pub hidden: Vec<usize>,
    pub log_scale_bound: f64,
    /// Defaults to whether the training system has count-valued states.
    pub integer_state: Option<bool>,
    pub history: PathBuf,
    /// Continue from `training.checkpoint_path` when it exists.
    pub resume: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            path: "model.sfmf".into(),
            precision: Precision::F64,
            layers: DEFAULT_LAYERS,
            hidden: DEFAULT_HIDDEN.to_vec(),
            log_scale_bound: DEFAULT_LOG_SCALE_BOUND,
            integer_state: None,
            history: "history.jsonl".into(),
            resume: false,
        }
    }
}

/// One expression or one per channel.
#[derive(Debug, Deserialize)]
#[serde(untagged)]
pub enum SignalExprs {
    One(String),
    Many(Vec<String>),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSection {
    pub x0: Vec<f64>,
    pub u: Option<SignalExprs>,
    /// Text file of rows `t u_0 u_1 ...`.
    pub u_file: Option<PathBuf>,
    pub t_end: f64,
    pub n_ens: usize,
    #[serde(default)]
    pub snapshots: Vec<f64>,
    #[serde(default = "default_ensemble_path")]
    pub ensemble: PathBuf,
    #[serde(default = "default_moments_path")]
    pub moments: PathBuf,
    #[serde(default = "default_histograms_path")]
    pub histograms: PathBuf,
}

fn default_ensemble_path() -> PathBuf {
    "ensemble.sfme".into()
}
fn default_moments_path() -> PathBuf {
    "moments.txt".into()
}
fn default_histograms_path() -> PathBuf {
    "histograms.txt".into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelSource {
    /// The trained checkpoint at `model.path`.
    Checkpoint,
    /// The simulator itself, for self-tests of the validation pipeline.
    Truth,
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidateSection {
    pub model: ModelSource,
    pub report: PathBuf,
    pub plot: PathBuf,
    pub thresholds: Thresholds,
}

impl Default for ValidateSection {
    fn default() -> Self {
        Self {
            model: ModelSource::Checkpoint,
            report: "report.txt".into(),
            plot: "report_plot.txt".into(),
            thresholds: Thresholds::default(),
        }
    }
}

/// Upper bounds checked by `validate`; absent bounds are not checked.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    pub max_mean_error: Option<f64>,
    pub max_std_error: Option<f64>,
    pub max_w1: Option<f64>,
    pub max_ks: Option<f64>,
}

/// An SDE whose drift and diffusion are expressions in `x0..` and `u0..`.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomSystem {
    pub name: String,
    pub d: usize,
    pub n_u: usize,
    pub noise_dim: usize,
    pub drift: Vec<String>,
    /// `d x noise_dim`, row-major.
    pub diffusion: Vec<String>,
    pub x_box: Vec<(f64, f64)>,
    pub gamma_box: Vec<(f64, f64)>,
    pub dt: f64,
    pub basis: BasisFamily,
    /// Basis functions per channel (monomial degree + 1).
    pub m: usize,
    #[serde(default = "one")]
    pub n_sub: usize,
}

fn one() -> usize {
    1
}

/// Config keys each subcommand reads, shown by `--help`.
pub const GEN_DATA_KEYS: &str = "\
Config keys read:
  seed                root seed (required unless --seed is given)
  system              built-in name, path to a custom system JSON, or an inline custom system
  data.m              number of snapshot pairs [1000]
  data.path           output dataset file [data.sfml]";

pub const TRAIN_KEYS: &str = "\
Config keys read:
  seed                      root seed (required unless --seed is given)
  system                    only to default model.integer_state
  data.path                 input dataset [data.sfml]
  model.path                output model checkpoint [model.sfmf]
  model.precision           f64 | f32 [f64]
  model.layers              flow layers [5]
  model.hidden              hidden widths [[20, 20, 20]]
  model.log_scale_bound     log-scale clamp [5]
  model.integer_state       floor samples at prediction [system default]
  model.history             per-epoch loss log, JSON lines [history.jsonl]
  model.resume              continue from training.checkpoint_path if present [false]
  training.epochs, training.batch_size, training.base_lr, training.max_lr,
  training.lr_decay, training.step_size, training.cycle_epochs,
  training.cycle_decay, training.weight_decay, training.beta1, training.beta2,
  training.adam_eps, training.dequantize, training.checkpoint_every,
  training.checkpoint_path, training.log_every
                            optimizer settings (training.seed is replaced by the root seed)";

pub const PREDICT_KEYS: &str = "\
Config keys read:
  seed                  root seed (required unless --seed is given)
  model.path            model checkpoint [model.sfmf]
  scenario.x0           initial state
  scenario.u            expression in t, or one per input channel
  scenario.u_file       alternatively, rows `t u_0 u_1 ...` (linear interpolation)
  scenario.t_end        horizon, a multiple of the model step
  scenario.n_ens        ensemble size
  scenario.snapshots    times for histogram output [[]]
  scenario.ensemble     ensemble file [ensemble.sfme]
  scenario.moments      mean/std curves [moments.txt]
  scenario.histograms   snapshot histograms [histograms.txt]";

pub const VALIDATE_KEYS: &str = "\
Config keys read:
  seed                            root seed (required unless --seed is given)
  system                          reference simulator
  model.path                      model checkpoint [model.sfmf]
  scenario.x0, scenario.u, scenario.u_file, scenario.t_end, scenario.n_ens,
  scenario.snapshots              as for predict
  validate.model                  checkpoint | truth [checkpoint]
  validate.report                 report file [report.txt]
  validate.plot                   histogram plot data [report_plot.txt]
  validate.thresholds.max_mean_error, validate.thresholds.max_std_error,
  validate.thresholds.max_w1, validate.thresholds.max_ks
                                  limits; exceeding any exits with status 6";

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn scenario(&self) -> Result<&ScenarioSection> {
        self.scenario
            .as_ref()
            .ok_or_else(|| anyhow!("config has no `scenario` section"))
    }

    /// The configured system; relative custom-spec paths resolve against `base`.
    pub fn system(&self, base: &Path) -> Result<SystemSetup> {
        match &self.system {
            None => bail!(
                "config has no `system`; valid names: {}",
                BUILTIN_NAMES.join(", ")
            ),
            Some(SystemRef::Inline(c)) => c.build(),
            Some(SystemRef::Named(name)) if BUILTIN_NAMES.contains(&name.as_str()) => {
                Ok(builtin_system(name)?)
            }
            Some(SystemRef::Named(name)) => {
                let path = base.join(name);
                if !path.is_file() {
                    bail!(
                        "`{name}` is neither a built-in system ({}) nor a custom system file",
                        BUILTIN_NAMES.join(", ")
                    );
                }
                let text = std::fs::read_to_string(&path)?;
                let custom: CustomSystem =
                    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
                custom.build()
            }
        }
    }
}

impl ScenarioSection {
    /// The excitation signal; relative `u_file` paths resolve against `base`.
    pub fn signal(&self, base: &Path) -> Result<ExcitationSignal<f64>> {
        match (&self.u, &self.u_file) {
            (Some(_), Some(_)) => bail!("give either scenario.u or scenario.u_file, not both"),
            (None, None) => bail!("scenario needs `u` or `u_file`"),
            (Some(exprs), None) => {
                let srcs = match exprs {
                    SignalExprs::One(s) => vec![s.clone()],
                    SignalExprs::Many(v) => v.clone(),
                };
                if srcs.is_empty() {
                    bail!("scenario.u is empty");
                }
                let parsed = srcs
                    .iter()
                    .map(|s| Expr::parse(s, &["t"]).with_context(|| format!("in scenario.u `{s}`")))
                    .collect::<Result<Vec<_>>>()?;
                Ok(ExcitationSignal::analytic(
                    parsed.len(),
                    move |t, out: &mut [f64]| {
                        for (o, e) in out.iter_mut().zip(&parsed) {
                            *o = e.eval(&[t]);
                        }
                    },
                ))
            }
            (None, Some(file)) => read_signal_file(&base.join(file)),
        }
    }
}

fn read_signal_file(path: &Path) -> Result<ExcitationSignal<f64>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let (mut times, mut values, mut n_u) = (Vec::new(), Vec::new(), None);
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(str::parse::<f64>)
            .collect::<Result<Vec<_>, _>>()
            .with_context(|| format!("{}:{}: bad number", path.display(), i + 1))?;
        let width = *n_u.get_or_insert(row.len());
        if row.len() < 2 || row.len() != width {
            bail!(
                "{}:{}: expected `t u_0 ...` with {} columns",
                path.display(),
                i + 1,
                width.max(2)
            );
        }
        times.push(row[0]);
        values.extend_from_slice(&row[1..]);
    }
    let n_u = n_u.ok_or_else(|| anyhow!("{} has no samples", path.display()))? - 1;
    Ok(ExcitationSignal::sampled(n_u, times, values)?)
}

impl CustomSystem {
    pub fn build(&self) -> Result<SystemSetup> {
        let (d, n_u, q) = (self.d, self.n_u, self.noise_dim);
        if self.drift.len() != d || self.diffusion.len() != d * q {
            bail!(
                "custom system `{}`: need {d} drift and {} diffusion expressions",
                self.name,
                d * q
            );
        }
        let names: Vec<String> = (0..d)
            .map(|i| format!("x{i}"))
            .chain((0..n_u).map(|i| format!("u{i}")))
            .collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let compile = |srcs: &[String]| -> Result<Arc<Vec<Expr>>> {
            Ok(Arc::new(
                srcs.iter()
                    .map(|s| Expr::parse(s, &refs).with_context(|| format!("in `{s}`")))
                    .collect::<Result<_>>()?,
            ))
        };
        let (drift, diffusion) = (compile(&self.drift)?, compile(&self.diffusion)?);
        let apply = move |exprs: &Arc<Vec<Expr>>| {
            let exprs = exprs.clone();
            move |x: &[f64], u: &[f64], out: &mut [f64]| {
                let vals: Vec<f64> = x.iter().chain(u).copied().collect();
                for (o, e) in out.iter_mut().zip(exprs.iter()) {
                    *o = e.eval(&vals);
                }
            }
        };
        let kind = SystemKind::Sde(SdeSpec::new(d, q, n_u, apply(&drift), apply(&diffusion))?);
        let setup = SystemSetup {
            name: self.name.clone(),
            kind,
            x_box: IntervalBox::from_pairs(&self.x_box)?,
            gamma_box: IntervalBox::from_pairs(&self.gamma_box)?,
            dt: self.dt,
            basis: BasisSpec::new(self.basis, self.m, self.dt)?,
            n_sub: self.n_sub,
        };
        setup.validate()?;
        Ok(setup)
    }
}
