//! Layered experiment configuration: built-in defaults, then an optional
//! TOML file, then `--set key=value` and dedicated flag overrides.

use std::path::Path;

use lsrlab::evalkit::SynthConfig;
use lsrlab::{LossConfig, PruneConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use toml::Value;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    pub hidden: usize,
}

/// Hyperparameters of one run. Paths are given as flags, not here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: Option<u64>,
    pub model: ModelSection,
    pub train: TrainSection,
    pub loss: LossConfig,
    pub prune: PruneConfig,
    pub synth: SynthConfig,
}

/// [`TrainConfig`] without the seed and loss, which live at the top level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSection {
    pub lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub eval_every: u64,
    pub lr_floor: f64,
    pub max_len: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let t = TrainConfig::desk();
        Self {
            seed: None,
            model: ModelSection { hidden: 16 },
            train: TrainSection {
                lr: t.lr,
                warmup_steps: t.warmup_steps,
                total_steps: t.total_steps,
                batch_size: t.batch_size,
                weight_decay: t.weight_decay,
                eval_every: t.eval_every,
                lr_floor: t.lr_floor,
                max_len: t.max_len,
            },
            loss: LossConfig::default(),
            prune: PruneConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn seed(&self) -> Result<u64, CliError> {
        self.seed
            .ok_or_else(|| CliError::Usage("a seed is required (set `seed` in the config or pass --seed)".into()))
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let t = &self.train;
        let cfg = TrainConfig {
            lr: t.lr,
            warmup_steps: t.warmup_steps,
            total_steps: t.total_steps,
            batch_size: t.batch_size,
            weight_decay: t.weight_decay,
            seed: self.seed()?,
            loss: self.loss,
            eval_every: t.eval_every,
            lr_floor: t.lr_floor,
            max_len: t.max_len,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn synth_config(&self) -> Result<SynthConfig, CliError> {
        Ok(SynthConfig {
            seed: self.seed()?,
            ..self.synth.clone()
        })
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Table(b), Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn parse_scalar(raw: &str) -> Value {
    // a bare TOML value if it parses as one, otherwise a string
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => Value::String(raw.to_string()),
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<(), CliError> {
    let mut parts = key.split('.').peekable();
    let mut node = root;
    while let Some(part) = parts.next() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| CliError::Usage(format!("cannot set {key}: {part} is not a table")))?;
        if parts.peek().is_none() {
            table.insert(part.to_string(), value);
            return Ok(());
        }
        node = table
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(toml::Table::new()));
    }
    Err(CliError::Usage(format!("empty config key in {key:?}")))
}

/// Resolves the configuration from defaults, `file` and `overrides`
/// (`key=value` pairs, applied in order).
pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<ExperimentConfig, CliError> {
    let mut value = Value::try_from(ExperimentConfig::default()).expect("defaults serialize");
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Data(format!("cannot read config {}: {e}", path.display())))?;
        let table: toml::Table = text
            .parse()
            .map_err(|e| CliError::Data(format!("invalid config {}: {e}", path.display())))?;
        merge(&mut value, Value::Table(table));
    }
    for (key, raw) in overrides {
        set_path(&mut value, key, parse_scalar(raw))?;
    }
    value
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Usage(format!("invalid configuration: {}", e.message())))
}
