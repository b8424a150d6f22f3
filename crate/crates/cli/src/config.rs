//! Run configuration: a JSON document with defaults, overridden by flags.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rkstack_core::data::{TaskKind, TaskSpec};
use rkstack_core::network::{InputSpec, NetworkShape};
use rkstack_core::schemes::{HGranularity, Scheme, VernerCoefficients};
use rkstack_core::subnet::Activation;
use rkstack_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

pub const OUT_ENV: &str = "RKSTACK_OUT";

/// Where the data comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum TaskConfig {
    Synthetic(TaskSpec),
    /// CIFAR-10 binary batches in `dir`, truncated to the given sizes.
    Cifar10 {
        dir: PathBuf,
        train_samples: usize,
        test_samples: usize,
    },
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig::Synthetic(TaskSpec::spirals())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    /// `(start, end, step)`.
    pub lr_grid: (f64, f64, f64),
    /// Epochs per learning-rate cell.
    pub lr_epochs: usize,
    pub depths: Vec<usize>,
    /// Seeds per probe or per cell; each sweep has its own default.
    pub seeds: Option<usize>,
    pub probe_size: usize,
    pub threshold: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            lr_grid: (0.05, 0.45, 0.05),
            lr_epochs: 50,
            depths: vec![10, 18, 30, 58],
            seeds: None,
            probe_size: 128,
            threshold: 0.95,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub command: String,
    pub schemes: Vec<Scheme>,
    pub depth: usize,
    pub width: usize,
    pub activation: Activation,
    pub verner: VernerCoefficients,
    pub h_granularity: HGranularity,
    pub h_clamp: bool,
    pub task: TaskConfig,
    pub train: TrainConfig,
    pub sweep: SweepConfig,
    /// Root seed; data, initialization and shuffling seeds split from it.
    pub seed: u64,
    pub output: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            command: String::new(),
            schemes: vec![Scheme::Rk4],
            depth: 58,
            width: 32,
            activation: Activation::Relu,
            verner: VernerCoefficients::Paper,
            h_granularity: HGranularity::Shared,
            h_clamp: false,
            task: TaskConfig::default(),
            train: TrainConfig::default(),
            sweep: SweepConfig::default(),
            seed: 0,
            output: PathBuf::new(),
        }
    }
}

impl RunConfig {
    /// Reads either a bare config or the `config` field of a run report, so
    /// a finished run can be replayed from its report.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let value = match value.get("schema_version") {
            Some(_) => value.get("config").cloned().context("report has no config")?,
            None => value,
        };
        serde_json::from_value(value).with_context(|| format!("invalid config in {}", path.display()))
    }

    pub fn scheme(&self) -> Result<Scheme> {
        match self.schemes.as_slice() {
            [s] => Ok(*s),
            other => bail!("this command takes exactly one scheme, got {}", other.len()),
        }
    }

    pub fn input(&self) -> (InputSpec, usize) {
        match &self.task {
            TaskConfig::Synthetic(t) => (InputSpec::Dense { features: 2 }, t.classes),
            TaskConfig::Cifar10 { .. } => (
                InputSpec::Image {
                    channels: 3,
                    height: 32,
                    width: 32,
                },
                10,
            ),
        }
    }

    pub fn shape(&self, scheme: Scheme, depth: usize) -> NetworkShape {
        let (input, classes) = self.input();
        NetworkShape {
            depth,
            scheme,
            width: self.width,
            input,
            classes,
            activation: self.activation,
            verner: self.verner,
            h_granularity: self.h_granularity,
            h_clamp: self.h_clamp,
        }
    }
}

pub fn parse_task_kind(s: &str) -> Option<TaskKind> {
    match s {
        "spirals" => Some(TaskKind::Spirals),
        "rings" => Some(TaskKind::Rings),
        "blobs" => Some(TaskKind::Blobs),
        _ => None,
    }
}

/// `start:end:step`.
pub fn parse_grid(s: &str) -> std::result::Result<(f64, f64, f64), String> {
    let parts: Vec<&str> = s.split(':').collect();
    let [a, b, c] = parts.as_slice() else {
        return Err(format!("expected start:end:step, got `{s}`"));
    };
    let num = |p: &str| p.trim().parse::<f64>().map_err(|e| format!("`{p}`: {e}"));
    Ok((num(a)?, num(b)?, num(c)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_json() {
        let mut cfg = RunConfig {
            schemes: vec![Scheme::Euler, Scheme::VernerAdaptive],
            ..RunConfig::default()
        };
        cfg.train.lr0 = 0.3;
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&json).unwrap(), cfg);
    }

    #[test]
    fn partial_config_takes_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"depth": 10, "train": {"epochs": 3}}"#).unwrap();
        assert_eq!(cfg.depth, 10);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.momentum, 0.9);
        assert_eq!(cfg.width, 32);
    }

    #[test]
    fn grid_syntax() {
        assert_eq!(parse_grid("0.05:0.45:0.05"), Ok((0.05, 0.45, 0.05)));
        assert!(parse_grid("0.05:0.45").is_err());
        assert!(parse_grid("a:b:c").is_err());
    }
}
