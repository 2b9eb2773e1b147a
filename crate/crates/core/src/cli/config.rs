//! Experiment configuration (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::guidance::GuidanceMode;
use crate::predictor::Label;
use crate::sampler::{Method, SamplerConfig};
use crate::smallnet::{Activation, OptimizerKind, TrainOpts};
use crate::toys::{self, Toy};
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub task: TaskConfig,
    #[serde(default)]
    pub flow: FlowConfig,
    #[serde(default)]
    pub denoiser: DenoiserConfig,
    #[serde(default)]
    pub predictor: PredictorConfig,
    #[serde(default)]
    pub sampler: SamplerSection,
    #[serde(default)]
    pub guidance: GuidanceSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub verify: VerifySection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    /// One of `counting`, `pairs`, `padded`.
    pub name: String,
    pub dims: Option<usize>,
    pub p_one: Option<f64>,
    /// JSONL training set, one `{"state": [...], "label": {...}}` per line.
    /// Without it, training data is drawn from the task's distribution.
    pub dataset: Option<PathBuf>,
    #[serde(default = "default_n_train")]
    pub n_train: usize,
}

fn default_n_train() -> usize {
    20_000
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    #[serde(default)]
    pub eta: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self { eta: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DenoiserKind {
    Exact,
    Neural,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_decay")]
    pub lr_decay: f64,
}

fn default_epochs() -> usize {
    20
}
fn default_batch() -> usize {
    64
}
fn default_lr() -> f64 {
    3e-3
}
fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Adam
}
fn default_decay() -> f64 {
    0.9
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            batch_size: default_batch(),
            learning_rate: default_lr(),
            optimizer: default_optimizer(),
            lr_decay: default_decay(),
        }
    }
}

impl TrainSection {
    pub fn opts(&self, seed: u64) -> TrainOpts {
        TrainOpts {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            optimizer: self.optimizer,
            seed,
            lr_decay: self.lr_decay,
        }
    }
}

fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}
fn default_activation() -> Activation {
    Activation::Relu
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    #[serde(default = "default_denoiser_kind")]
    pub kind: DenoiserKind,
    /// Defaults to `<out>/denoiser.json`.
    pub checkpoint: Option<PathBuf>,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default)]
    pub time_input: bool,
    #[serde(default)]
    pub train: TrainSection,
}

fn default_denoiser_kind() -> DenoiserKind {
    DenoiserKind::Exact
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            kind: DenoiserKind::Exact,
            checkpoint: None,
            hidden: default_hidden(),
            activation: default_activation(),
            time_input: false,
            train: TrainSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictorKind {
    Exact,
    Classifier,
    Regressor,
}

/// Where predictor training labels come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSource {
    /// Clean states from the training data with their labels.
    Data,
    /// Unguided samples of the denoiser, relabeled by the task's likelihood.
    Model,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictorConfig {
    #[serde(default = "default_predictor_kind")]
    pub kind: PredictorKind,
    /// Defaults to `<out>/predictor.json`.
    pub checkpoint: Option<PathBuf>,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default)]
    pub time_input: bool,
    #[serde(default = "default_label_source")]
    pub labels: LabelSource,
    #[serde(default)]
    pub train: TrainSection,
}

fn default_predictor_kind() -> PredictorKind {
    PredictorKind::Exact
}
fn default_label_source() -> LabelSource {
    LabelSource::Data
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            kind: PredictorKind::Exact,
            checkpoint: None,
            hidden: default_hidden(),
            activation: default_activation(),
            time_input: false,
            labels: LabelSource::Data,
            train: TrainSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSection {
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_t_max")]
    pub t_max: f64,
    #[serde(default = "default_true")]
    pub argmax_finish: bool,
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default)]
    pub record_trajectory: bool,
}

fn default_n() -> usize {
    1000
}
fn default_dt() -> f64 {
    0.001
}
fn default_t_max() -> f64 {
    0.98
}
fn default_true() -> bool {
    true
}
fn default_method() -> Method {
    Method::Euler
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self {
            n: default_n(),
            dt: default_dt(),
            t_max: default_t_max(),
            argmax_finish: true,
            method: Method::Euler,
            record_trajectory: false,
        }
    }
}

impl SamplerSection {
    pub fn config(&self, dt: f64, seed: u64) -> SamplerConfig {
        SamplerConfig {
            dt,
            t_max: self.t_max,
            argmax_finish: self.argmax_finish,
            method: self.method,
            record_trajectory: self.record_trajectory,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuideMode {
    None,
    Exact,
    Tag,
    Pfg,
}

impl GuideMode {
    pub fn guidance_mode(self) -> Option<GuidanceMode> {
        match self {
            GuideMode::None => None,
            GuideMode::Exact => Some(GuidanceMode::Exact),
            GuideMode::Tag => Some(GuidanceMode::Tag),
            GuideMode::Pfg => Some(GuidanceMode::Pfg),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceSection {
    #[serde(default = "default_mode")]
    pub mode: GuideMode,
    /// Guidance strengths to sweep.
    #[serde(default = "default_gammas")]
    pub gammas: Vec<f64>,
    /// Target class; defaults to the task's target.
    pub target: Option<usize>,
}

fn default_mode() -> GuideMode {
    GuideMode::None
}
fn default_gammas() -> Vec<f64> {
    vec![1.0]
}

impl Default for GuidanceSection {
    fn default() -> Self {
        Self { mode: GuideMode::None, gammas: default_gammas(), target: None }
    }
}

/// Optional sweeps over the stochasticity and step size. Empty lists fall
/// back to `flow.eta` and `sampler.dt`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(default)]
    pub eta: Vec<f64>,
    #[serde(default)]
    pub dt: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySection {
    #[serde(default = "default_dt_grid")]
    pub dt_grid: Vec<f64>,
    #[serde(default = "default_probes")]
    pub probes: usize,
    /// Samples per strength for the steering check.
    #[serde(default = "default_verify_samples")]
    pub samples: usize,
    /// Test hook: write a negative entry into every guided rate slice.
    #[serde(default)]
    pub inject_negative_rate: bool,
}

fn default_dt_grid() -> Vec<f64> {
    vec![0.01, 0.005, 0.002, 0.001]
}
fn default_probes() -> usize {
    1000
}
fn default_verify_samples() -> usize {
    2000
}

impl Default for VerifySection {
    fn default() -> Self {
        Self {
            dt_grid: default_dt_grid(),
            probes: default_probes(),
            samples: default_verify_samples(),
            inject_negative_rate: false,
        }
    }
}

/// A parsed config with command-line overrides applied.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub out: PathBuf,
    /// Directory relative paths in the config are resolved against.
    pub base: PathBuf,
    pub hash: String,
}

impl Resolved {
    pub fn load(path: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut config: ExperimentConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let seed = seed
            .or(config.seed)
            .ok_or_else(|| Error::Config("no seed: set `seed` in the config or pass --seed".into()))?;
        config.seed = Some(seed);
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let out = out.or_else(|| config.out.as_ref().map(|o| base.join(o))).unwrap_or_else(|| PathBuf::from("out"));
        config.validate(&base)?;
        let canonical = serde_json::to_vec(&config)?;
        let hash = hex::encode(Sha256::digest(&canonical));
        Ok(Self { config, seed, out, base, hash })
    }

    pub fn path(&self, p: &Path) -> PathBuf {
        self.base.join(p)
    }

    pub fn denoiser_checkpoint(&self) -> PathBuf {
        self.config.denoiser.checkpoint.as_ref().map_or_else(|| self.out.join("denoiser.json"), |p| self.path(p))
    }

    pub fn predictor_checkpoint(&self) -> PathBuf {
        self.config.predictor.checkpoint.as_ref().map_or_else(|| self.out.join("predictor.json"), |p| self.path(p))
    }

    pub fn toy(&self) -> Result<Toy> {
        let t = &self.config.task;
        toys::by_name(&t.name, t.dims, t.p_one)
    }

    pub fn target(&self, toy: &Toy) -> Label {
        self.config.guidance.target.map_or(toy.target, Label::Class)
    }

    pub fn etas(&self) -> Vec<f64> {
        if self.config.sweep.eta.is_empty() {
            vec![self.config.flow.eta]
        } else {
            self.config.sweep.eta.clone()
        }
    }

    pub fn dts(&self) -> Vec<f64> {
        if self.config.sweep.dt.is_empty() {
            vec![self.config.sampler.dt]
        } else {
            self.config.sweep.dt.clone()
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self, base: &Path) -> Result<()> {
        if !toys::TOY_NAMES.contains(&self.task.name.as_str()) {
            return Err(Error::Config(format!("unknown task {:?}; expected one of {:?}", self.task.name, toys::TOY_NAMES)));
        }
        if let Some(ds) = &self.task.dataset {
            if !base.join(ds).is_file() {
                return Err(Error::Config(format!("dataset {} does not exist", base.join(ds).display())));
            }
        }
        if self.guidance.gammas.is_empty() {
            return Err(Error::Config("guidance.gammas must not be empty".into()));
        }
        if self.verify.dt_grid.is_empty() {
            return Err(Error::Config("verify.dt_grid must not be empty".into()));
        }
        if let Some(g) = self.guidance.gammas.iter().find(|g| !(**g >= 0.0) || !g.is_finite()) {
            return Err(Error::Config(format!("guidance strength must be >= 0, got {g}")));
        }
        if let Some(e) = self.sweep.eta.iter().chain([&self.flow.eta]).find(|e| !(**e >= 0.0) || !e.is_finite()) {
            return Err(Error::Config(format!("eta must be >= 0, got {e}")));
        }
        for dt in self.sweep.dt.iter().chain([&self.sampler.dt]).chain(&self.verify.dt_grid) {
            self.sampler.config(*dt, 0).validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        if self.sampler.n == 0 {
            return Err(Error::Config("sampler.n must be positive".into()));
        }
        for train in [&self.denoiser.train, &self.predictor.train] {
            train.opts(0).validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        if self.guidance.mode == GuideMode::Tag && self.predictor.kind == PredictorKind::Exact {
            return Err(Error::Config("TAG needs a differentiable predictor; the exact predictor has no gradient".into()));
        }
        Ok(())
    }
}
