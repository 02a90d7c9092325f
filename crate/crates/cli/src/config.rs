//! Flat `key=value` run configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use bfno_core::autodiff::Activation;
use bfno_core::data::SyntheticKind;
use bfno_core::layers::{KernelSharing, OdeFunctionConfig, Variant};
use bfno_core::odeint::{Method, SolverConfig};
use bfno_core::training::{AdamConfig, GradMode, TrainConfig};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("line {line}: expected key=value, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config key `{0}` given twice")]
    Duplicate(String),
    #[error("config key `{key}`: cannot parse `{value}` as {expected}")]
    Value { key: String, value: String, expected: &'static str },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Idx,
    Synthetic(SyntheticKind),
}

impl DataSource {
    pub fn name(&self) -> &'static str {
        match self {
            DataSource::Idx => "idx",
            DataSource::Synthetic(k) => k.name(),
        }
    }

    fn parse(s: &str) -> Option<Self> {
        if s.eq_ignore_ascii_case("idx") {
            Some(DataSource::Idx)
        } else {
            SyntheticKind::parse(s).map(DataSource::Synthetic)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    /// Dataset directory name under `dir` for IDX data.
    pub name: String,
    pub dir: PathBuf,
    /// 0 keeps the whole split.
    pub train_size: usize,
    pub test_size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckConfig {
    /// Finite-difference step.
    pub eps: f64,
    /// Number of sampled coordinates; 0 checks every parameter.
    pub coords: usize,
    /// Labelled samples in the checked loss.
    pub samples: usize,
}

/// Every knob of a run. `in_channels`, `height` and `width` of the model
/// follow the data and are not configurable.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: OdeFunctionConfig,
    pub solver: SolverConfig,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub grad_mode: GradMode,
    pub seed: u64,
    pub data: DataConfig,
    pub record_wall_time: bool,
    pub gradcheck: GradcheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            model: OdeFunctionConfig::default(),
            solver: SolverConfig { rtol: 1e-3, atol: 1e-3, ..SolverConfig::default() },
            adam: t.adam,
            batch_size: t.batch_size,
            epochs: t.epochs,
            grad_mode: t.grad_mode,
            seed: 0,
            data: DataConfig {
                source: DataSource::Synthetic(SyntheticKind::Gaussians),
                name: "mnist".into(),
                dir: PathBuf::from("data"),
                train_size: 256,
                test_size: 128,
            },
            record_wall_time: false,
            gradcheck: GradcheckConfig { eps: 1e-3, coords: 0, samples: 1 },
        }
    }
}

pub const KEYS: &[&str] = &[
    "variant",
    "N",
    "L",
    "dim_g",
    "augment",
    "activation",
    "activate_last",
    "kernel_sharing",
    "fno.modes",
    "conv.width",
    "solver.method",
    "solver.steps",
    "solver.rtol",
    "solver.atol",
    "solver.h_init",
    "solver.max_steps",
    "solver.t0",
    "solver.t1",
    "train.lr",
    "train.beta1",
    "train.beta2",
    "train.eps",
    "train.batch_size",
    "train.epochs",
    "train.grad_mode",
    "seed",
    "data.source",
    "data.name",
    "data.dir",
    "data.train_size",
    "data.test_size",
    "metrics.record_wall_time",
    "gradcheck.eps",
    "gradcheck.coords",
    "gradcheck.samples",
];

fn num<T: std::str::FromStr>(key: &str, value: &str, expected: &'static str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::Value { key: key.into(), value: value.into(), expected })
}

fn flag(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(ConfigError::Value { key: key.into(), value: value.into(), expected: "a boolean" }),
    }
}

fn auto<T: std::str::FromStr>(key: &str, value: &str, expected: &'static str) -> Result<Option<T>, ConfigError> {
    if value.eq_ignore_ascii_case("auto") {
        Ok(None)
    } else {
        num(key, value, expected).map(Some)
    }
}

fn show_auto<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map_or_else(|| "auto".to_string(), |v| v.to_string())
}

impl RunConfig {
    /// Parses config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| ConfigError::Syntax { line: n + 1, text: raw.trim().to_string() })?;
            if key.is_empty() {
                return Err(ConfigError::Syntax { line: n + 1, text: raw.trim().to_string() });
            }
            if !KEYS.contains(&key) {
                return Err(ConfigError::UnknownKey(key.to_string()));
            }
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::Duplicate(key.to_string()));
            }
            cfg.set(key, value)?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::parse(&text)
    }

    /// `BFNO_DATA_DIR` replaces `data.dir` when set.
    pub fn apply_env(&mut self) {
        if let Some(dir) = std::env::var_os("BFNO_DATA_DIR") {
            self.data.dir = PathBuf::from(dir);
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let m = &mut self.model;
        let s = &mut self.solver;
        match key {
            "variant" => {
                m.variant = Variant::parse(value).ok_or_else(|| ConfigError::Value {
                    key: key.into(),
                    value: value.into(),
                    expected: "BFNO, FNO or CONV",
                })?
            }
            "N" => m.layers = num(key, value, "an integer")?,
            "L" => m.branches = num(key, value, "an integer")?,
            "dim_g" => m.dim_g = num(key, value, "an integer")?,
            "augment" => m.augment = num(key, value, "an integer")?,
            "activation" => {
                m.activation = Activation::parse(value).ok_or_else(|| ConfigError::Value {
                    key: key.into(),
                    value: value.into(),
                    expected: "relu, tanh, softplus or identity",
                })?
            }
            "activate_last" => m.activate_last = flag(key, value)?,
            "kernel_sharing" => {
                m.kernel_sharing = KernelSharing::parse(value).ok_or_else(|| ConfigError::Value {
                    key: key.into(),
                    value: value.into(),
                    expected: "per-channel or shared-across-channels",
                })?
            }
            "fno.modes" => m.fno_modes = auto(key, value, "an integer or auto")?,
            "conv.width" => m.conv_width = auto(key, value, "an integer or auto")?,
            "solver.method" => {
                s.method = Method::parse(value).ok_or_else(|| ConfigError::Value {
                    key: key.into(),
                    value: value.into(),
                    expected: "EULER, RK4 or DOPRI5",
                })?
            }
            "solver.steps" => s.fixed_steps = num(key, value, "an integer")?,
            "solver.rtol" => s.rtol = num(key, value, "a number")?,
            "solver.atol" => s.atol = num(key, value, "a number")?,
            "solver.h_init" => s.h_init = auto(key, value, "a number or auto")?,
            "solver.max_steps" => s.max_steps = num(key, value, "an integer")?,
            "solver.t0" => s.t0 = num(key, value, "a number")?,
            "solver.t1" => s.t1 = num(key, value, "a number")?,
            "train.lr" => self.adam.lr = num(key, value, "a number")?,
            "train.beta1" => self.adam.beta1 = num(key, value, "a number")?,
            "train.beta2" => self.adam.beta2 = num(key, value, "a number")?,
            "train.eps" => self.adam.eps = num(key, value, "a number")?,
            "train.batch_size" => self.batch_size = num(key, value, "an integer")?,
            "train.epochs" => self.epochs = num(key, value, "an integer")?,
            "train.grad_mode" => {
                self.grad_mode = GradMode::parse(value).ok_or_else(|| ConfigError::Value {
                    key: key.into(),
                    value: value.into(),
                    expected: "ADJOINT or DISCRETE",
                })?
            }
            "seed" => self.seed = num(key, value, "an unsigned integer")?,
            "data.source" => {
                self.data.source = DataSource::parse(value).ok_or_else(|| ConfigError::Value {
                    key: key.into(),
                    value: value.into(),
                    expected: "idx, rings or gaussians",
                })?
            }
            "data.name" => self.data.name = value.to_string(),
            "data.dir" => self.data.dir = PathBuf::from(value),
            "data.train_size" => self.data.train_size = num(key, value, "an integer")?,
            "data.test_size" => self.data.test_size = num(key, value, "an integer")?,
            "metrics.record_wall_time" => self.record_wall_time = flag(key, value)?,
            "gradcheck.eps" => self.gradcheck.eps = num(key, value, "a number")?,
            "gradcheck.coords" => self.gradcheck.coords = num(key, value, "an integer")?,
            "gradcheck.samples" => self.gradcheck.samples = num(key, value, "an integer")?,
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Value of `key` as it would be written back.
    pub fn get(&self, key: &str) -> Option<String> {
        let m = &self.model;
        let s = &self.solver;
        Some(match key {
            "variant" => m.variant.name().to_string(),
            "N" => m.layers.to_string(),
            "L" => m.branches.to_string(),
            "dim_g" => m.dim_g.to_string(),
            "augment" => m.augment.to_string(),
            "activation" => m.activation.name().to_string(),
            "activate_last" => m.activate_last.to_string(),
            "kernel_sharing" => match m.kernel_sharing {
                KernelSharing::PerChannel => "per-channel".to_string(),
                KernelSharing::Shared => "shared-across-channels".to_string(),
            },
            "fno.modes" => show_auto(m.fno_modes),
            "conv.width" => show_auto(m.conv_width),
            "solver.method" => s.method.name().to_string(),
            "solver.steps" => s.fixed_steps.to_string(),
            "solver.rtol" => s.rtol.to_string(),
            "solver.atol" => s.atol.to_string(),
            "solver.h_init" => show_auto(s.h_init),
            "solver.max_steps" => s.max_steps.to_string(),
            "solver.t0" => s.t0.to_string(),
            "solver.t1" => s.t1.to_string(),
            "train.lr" => self.adam.lr.to_string(),
            "train.beta1" => self.adam.beta1.to_string(),
            "train.beta2" => self.adam.beta2.to_string(),
            "train.eps" => self.adam.eps.to_string(),
            "train.batch_size" => self.batch_size.to_string(),
            "train.epochs" => self.epochs.to_string(),
            "train.grad_mode" => self.grad_mode.name().to_string(),
            "seed" => self.seed.to_string(),
            "data.source" => self.data.source.name().to_string(),
            "data.name" => self.data.name.clone(),
            "data.dir" => self.data.dir.display().to_string(),
            "data.train_size" => self.data.train_size.to_string(),
            "data.test_size" => self.data.test_size.to_string(),
            "metrics.record_wall_time" => self.record_wall_time.to_string(),
            "gradcheck.eps" => self.gradcheck.eps.to_string(),
            "gradcheck.coords" => self.gradcheck.coords.to_string(),
            "gradcheck.samples" => self.gradcheck.samples.to_string(),
            _ => return None,
        })
    }

    /// Every effective value, one `key=value` per line, in [`KEYS`] order.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key}={}", self.get(key).expect("listed key"));
        }
        out
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            adam: self.adam,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
            solver: self.solver.clone(),
            grad_mode: self.grad_mode,
            record_wall_time: self.record_wall_time,
        }
    }

    /// Checks that do not depend on the data.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.batch_size == 0 {
            return bad("train.batch_size must be at least 1".into());
        }
        if !(self.adam.lr > 0.0) {
            return bad("train.lr must be positive".into());
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return bad("train.beta1 and train.beta2 must lie in [0, 1)".into());
        }
        if !(self.gradcheck.eps > 0.0) || self.gradcheck.samples == 0 {
            return bad("gradcheck.eps must be positive and gradcheck.samples at least 1".into());
        }
        if let DataSource::Synthetic(_) = self.data.source {
            if self.data.train_size == 0 || self.data.test_size == 0 {
                return bad("synthetic data needs positive data.train_size and data.test_size".into());
            }
        }
        self.solver.validate().map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}
