//! Experiment configuration: TOML files layered over shipped presets.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::EvalProtocolConfig;
use crate::network::AdapterConfig;
use crate::tasks::{Pattern, UniverseConfig};
use crate::training::{Method, StrategyConfig, TrainConfig};

pub const PRESETS: &[(&str, &str)] = &[
    ("paper-synthetic", include_str!("../../presets/paper-synthetic.toml")),
    ("rep-patterns", include_str!("../../presets/rep-patterns.toml")),
    ("adapter-designs", include_str!("../../presets/adapter-designs.toml")),
    ("baseline-grid", include_str!("../../presets/baseline-grid.toml")),
    ("adapter-plus-replay", include_str!("../../presets/adapter-plus-replay.toml")),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SequenceConfig {
    pub pattern: Pattern,
    /// Number of training tasks `l`.
    pub length: usize,
    /// Training samples per task `n`.
    pub samples_per_task: usize,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        Self {
            pattern: Pattern::RoundRobin,
            length: 50,
            samples_per_task: 2000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    /// Hidden layer widths; input and output sizes follow from the universe.
    pub hidden: Vec<usize>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            hidden: vec![100, 100, 100],
        }
    }
}

/// When evaluations run. Task indices are 1-based.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    /// Evaluate after every `eval_every`-th task (and always after the last).
    pub eval_every: Option<usize>,
    /// Restrict the finetuning evaluation to these task indices.
    pub rep_at: Option<Vec<usize>>,
}

impl ScheduleConfig {
    pub fn eval_every(&self) -> usize {
        self.eval_every.unwrap_or(1)
    }

    pub fn is_eval_point(&self, task_index: usize, length: usize) -> bool {
        task_index == length || task_index % self.eval_every() == 0 || self.is_rep_point(task_index, length)
    }

    pub fn is_rep_point(&self, task_index: usize, length: usize) -> bool {
        match &self.rep_at {
            Some(at) => at.contains(&task_index),
            None => task_index == length || task_index % self.eval_every() == 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedStrategy {
    pub name: String,
    pub method: Method,
    #[serde(default)]
    pub adapter: AdapterConfig,
    /// Overrides the experiment-wide schedule for this strategy.
    #[serde(default)]
    pub schedule: Option<ScheduleConfig>,
}

impl NamedStrategy {
    pub fn strategy_config(&self) -> StrategyConfig {
        StrategyConfig {
            method: self.method.clone(),
            adapter: self.adapter,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Name of the preset this file was layered on, if any.
    pub preset: Option<String>,
    pub universe: UniverseConfig,
    pub sequence: SequenceConfig,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub eval: EvalProtocolConfig,
    pub schedule: ScheduleConfig,
    pub strategies: Vec<NamedStrategy>,
    pub seeds: Vec<u64>,
    pub output: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            preset: None,
            universe: UniverseConfig::default(),
            sequence: SequenceConfig::default(),
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
            eval: EvalProtocolConfig::default(),
            schedule: ScheduleConfig::default(),
            strategies: vec![NamedStrategy {
                name: "vanilla".into(),
                method: Method::Vanilla,
                adapter: AdapterConfig::default(),
                schedule: None,
            }],
            seeds: vec![0],
            output: PathBuf::from("results"),
        }
    }
}

/// The part of a config that determines results, given a strategy and seed.
#[derive(Serialize)]
struct Protocol<'a> {
    universe: &'a UniverseConfig,
    sequence: &'a SequenceConfig,
    network: &'a NetworkConfig,
    train: &'a TrainConfig,
    eval: &'a EvalProtocolConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.universe.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "must list at least one seed"));
        }
        if self.sequence.length == 0 {
            return Err(Error::config("sequence.length", "must be >= 1"));
        }
        if self.sequence.samples_per_task == 0 {
            return Err(Error::config("sequence.samples_per_task", "must be >= 1"));
        }
        if self.sequence.samples_per_task < self.train.batch_size {
            return Err(Error::config(
                "train.batch_size",
                "cannot exceed sequence.samples_per_task",
            ));
        }
        self.sequence
            .pattern
            .feature_indices(self.universe.num_features, self.sequence.length)?;
        if self.network.hidden.is_empty() || self.network.hidden.contains(&0) {
            return Err(Error::config("network.hidden", "need >= 1 non-empty hidden layer"));
        }
        if self.strategies.is_empty() {
            return Err(Error::config("strategies", "must list at least one strategy"));
        }
        for (i, s) in self.strategies.iter().enumerate() {
            if s.name.is_empty()
                || !s
                    .name
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
            {
                return Err(Error::config(
                    format!("strategies[{i}].name"),
                    "use letters, digits, '-', '_' and '.' only",
                ));
            }
            if self.strategies[..i].iter().any(|o| o.name == s.name) {
                return Err(Error::config(
                    format!("strategies[{i}].name"),
                    format!("duplicate strategy `{}`", s.name),
                ));
            }
            s.strategy_config().validate()?;
            let schedule = s.schedule.as_ref().unwrap_or(&self.schedule);
            if schedule.eval_every == Some(0) {
                return Err(Error::config("schedule.eval_every", "must be >= 1"));
            }
        }
        if self.schedule.eval_every == Some(0) {
            return Err(Error::config("schedule.eval_every", "must be >= 1"));
        }
        Ok(())
    }

    /// Layer widths including input and scalar output.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.universe.d];
        w.extend(&self.network.hidden);
        w.push(1);
        w
    }

    pub fn schedule_for<'a>(&'a self, strategy: &'a NamedStrategy) -> &'a ScheduleConfig {
        strategy.schedule.as_ref().unwrap_or(&self.schedule)
    }

    /// SHA-256 over everything that shapes results except strategy and
    /// seed (which every output records separately). The schedule is left
    /// out too: it decides which rows exist, not their values.
    pub fn config_hash(&self) -> String {
        let protocol = Protocol {
            universe: &self.universe,
            sequence: &self.sequence,
            network: &self.network,
            train: &self.train,
            eval: &self.eval,
        };
        let canonical = serde_json::to_string(&protocol).expect("config serializes");
        hex_digest(canonical.as_bytes())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("config", e.to_string()))
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn preset(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

/// Recursively overlay `top` on `base`. Tables merge; everything else,
/// arrays included, is replaced.
fn deep_merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => deep_merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn parse_table(text: &str, origin: &Path) -> Result<toml::Table> {
    text.parse::<toml::Table>().map_err(|e| Error::Parse {
        path: origin.to_path_buf(),
        message: e.to_string(),
    })
}

/// Parse, layer over the named preset, default and validate.
pub fn parse_config(text: &str, origin: &Path) -> Result<ExperimentConfig> {
    let user = parse_table(text, origin)?;
    let mut merged = match user.get("preset") {
        Some(toml::Value::String(name)) => {
            let base = preset(name).ok_or_else(|| {
                let known: Vec<_> = PRESETS.iter().map(|(n, _)| *n).collect();
                Error::config("preset", format!("unknown preset `{name}` (known: {})", known.join(", ")))
            })?;
            parse_table(base, Path::new(&format!("<preset {name}>")))?
        }
        Some(_) => return Err(Error::config("preset", "must be a string")),
        None => toml::Table::new(),
    };
    deep_merge(&mut merged, user);
    let cfg: ExperimentConfig = merged.try_into().map_err(|e: toml::de::Error| Error::Parse {
        path: origin.to_path_buf(),
        message: e.to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text, path)
}
