//! Run configuration: defaults, then a flat JSON file, then flags.

use std::path::{Path, PathBuf};

use clap::Args;
use provogan::geometry::ProgressionOrder;
use provogan::nets::NfScale;
use provogan::pipeline::{PipelineConfig, TaskSpec};
use provogan::training::{LossWeights, TrainConfig};
use provogan::Orientation;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

/// Flags shared by `train` and `order-search`. Every flag may also be given
/// as a key of the `--config` file (same name, dashes as underscores).
#[derive(Debug, Clone, Default, Args, Serialize)]
pub struct RunFlags {
    /// Flat JSON file of defaults; explicit flags take precedence.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// recon or synth.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Acceleration rate (reconstruction).
    #[arg(long = "R")]
    #[serde(rename = "R", skip_serializing_if = "Option::is_none")]
    pub r: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub readout_axis: Option<usize>,
    /// Ground-truth contrast (reconstruction).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub contrast: Option<String>,
    /// Stages 2 and 3 refine the prior additively (reconstruction).
    #[arg(long)]
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub residual: bool,
    /// Comma-separated source contrasts (synthesis).
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sources: Option<Vec<String>>,
    /// Target contrast (synthesis).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    /// Epoch at which linear decay starts (default: half of --epochs).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decay_start: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    /// Weight of the pixel-wise L1 term.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_c: Option<usize>,
    /// Complexity scale: 1/16, 1/9, 1/4, 1, 4, 9 or 16.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_f: Option<String>,
    /// Use only the first N training subjects.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_train: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// Fully resolved configuration, embedded in every output manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: String,
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
    #[serde(rename = "R")]
    pub r: f64,
    pub readout_axis: usize,
    pub contrast: String,
    pub residual: bool,
    pub sources: Vec<String>,
    pub target: String,
    pub epochs: usize,
    pub decay_start: Option<usize>,
    pub lr: f64,
    pub lambda: f64,
    pub n_c: usize,
    pub n_f: String,
    pub n_train: Option<usize>,
    pub seed: u64,
    /// Command-specific keys (order, baseline, parallel, ...).
    #[serde(default, skip_serializing_if = "Map::is_empty")]
    pub extra: Map<String, Value>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        RunConfig {
            task: "recon".into(),
            dataset: None,
            out: None,
            r: 4.0,
            readout_axis: 2,
            contrast: "t1".into(),
            residual: false,
            sources: vec!["t2".into(), "pd".into()],
            target: "t1".into(),
            epochs: train.epochs,
            decay_start: None,
            lr: train.lr_base,
            lambda: LossWeights::default().lambda_pix,
            n_c: 1,
            n_f: NfScale::One.label().into(),
            n_train: None,
            seed: 0,
            extra: Map::new(),
        }
    }
}

fn read_config_file(path: &Path) -> Result<Map<String, Value>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    match serde_json::from_str(&text) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err(CliError::Usage(format!("config {} must be a JSON object", path.display()))),
        Err(e) => Err(CliError::Usage(format!("config {}: {e}", path.display()))),
    }
}

impl RunConfig {
    /// Merges defaults, the config file (if any) and explicit flags. Keys in
    /// `extra_keys` are command-specific and collected into `extra`; their
    /// explicit flag values are passed in `extra_flags`.
    pub fn resolve(flags: &RunFlags, extra_keys: &[&str], extra_flags: Map<String, Value>) -> Result<Self, CliError> {
        let Value::Object(mut merged) = serde_json::to_value(RunConfig::default()).expect("serializable") else {
            unreachable!()
        };
        let mut extra = Map::new();
        let mut overlay = |map: Map<String, Value>, extra: &mut Map<String, Value>| {
            for (k, v) in map {
                if extra_keys.contains(&k.as_str()) {
                    extra.insert(k, v);
                } else {
                    merged.insert(k, v);
                }
            }
        };
        if let Some(path) = &flags.config {
            overlay(read_config_file(path)?, &mut extra);
        }
        let Value::Object(explicit) = serde_json::to_value(flags).expect("serializable") else {
            unreachable!()
        };
        overlay(explicit, &mut extra);
        overlay(extra_flags, &mut extra);
        merged.insert("extra".into(), Value::Object(extra));
        serde_json::from_value(Value::Object(merged)).map_err(|e| CliError::Usage(format!("config: {e}")))
    }

    pub fn extra_str(&self, key: &str) -> Option<&str> {
        self.extra.get(key).and_then(Value::as_str)
    }

    pub fn extra_u64(&self, key: &str) -> Option<u64> {
        self.extra.get(key).and_then(Value::as_u64)
    }

    pub fn dataset(&self) -> Result<&Path, CliError> {
        self.dataset
            .as_deref()
            .ok_or_else(|| CliError::Usage("--dataset is required".into()))
    }

    pub fn out(&self) -> Result<&Path, CliError> {
        self.out.as_deref().ok_or_else(|| CliError::Usage("--out is required".into()))
    }

    pub fn task_spec(&self) -> Result<TaskSpec, CliError> {
        let task = match self.task.as_str() {
            "recon" | "reconstruction" => TaskSpec::Reconstruction {
                r: self.r,
                readout_axis: self.readout_axis,
                contrast: self.contrast.clone(),
                residual: self.residual,
            },
            "synth" | "synthesis" => TaskSpec::Synthesis {
                sources: self.sources.clone(),
                target: self.target.clone(),
            },
            other => return Err(CliError::Usage(format!("--task must be recon or synth, got `{other}`"))),
        };
        task.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(task)
    }

    pub fn pipeline_config(&self) -> Result<PipelineConfig, CliError> {
        let mut train = TrainConfig::with_epochs(self.epochs);
        if let Some(d) = self.decay_start {
            train.decay_start = d;
        }
        train.lr_base = self.lr;
        train.seed = self.seed;
        train.n_train = self.n_train;
        let cfg = PipelineConfig {
            train,
            loss: LossWeights { lambda_pix: self.lambda },
            n_c: self.n_c,
            n_f: self.n_f.parse().map_err(|e: provogan::Error| CliError::Usage(e.to_string()))?,
            seed: self.seed,
        };
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }

    pub fn order(&self) -> Result<ProgressionOrder, CliError> {
        let code = self
            .extra_str("order")
            .ok_or_else(|| CliError::Usage("--order is required".into()))?;
        code.parse().map_err(|e: provogan::Error| CliError::Usage(e.to_string()))
    }

    pub fn orientation(&self) -> Result<Orientation, CliError> {
        let tag = self
            .extra_str("orientation")
            .ok_or_else(|| CliError::Usage("--orientation is required with --baseline".into()))?;
        let mut chars = tag.chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) => Orientation::from_tag(c).map_err(|e| CliError::Usage(e.to_string())),
            _ => Err(CliError::Usage(format!("--orientation must be A, C or S, got `{tag}`"))),
        }
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("serializable")
    }
}
