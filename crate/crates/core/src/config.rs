//! Pipeline configuration: one TOML file with a `profile` key selecting the
//! desk or paper-scale defaults, and per-section overrides on top.
//!
//! ```toml
//! profile = "desk"
//!
//! [iql]
//! gradient_steps = 20000
//!
//! [experiment]
//! seeds = [0, 1, 2]
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::CorpusConfig;
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::iql::IqlConfig;
use crate::labeler::LabelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    #[default]
    Desk,
    Paper,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(Error::Config(format!("unknown profile `{other}` (expected desk or paper)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSettings {
    pub seeds: Vec<u64>,
    pub eval_interval: usize,
    pub eval_episodes: usize,
    /// Seed of the generated corpus (shared by all training seeds).
    pub corpus_seed: u64,
    /// Use only the first `n` expert demonstrations when labeling.
    pub expert_count: Option<usize>,
    /// Divisor for the [0, 1] return rescaling; the horizon when unset.
    pub return_scale: Option<f64>,
}

impl Default for ExperimentSettings {
    fn default() -> Self {
        Self {
            seeds: (0..10).collect(),
            eval_interval: 2_000,
            eval_episodes: 10,
            corpus_seed: 0,
            expert_count: None,
            return_scale: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub profile: Profile,
    pub env: EnvConfig,
    pub corpus: CorpusConfig,
    pub label: LabelConfig,
    pub iql: IqlConfig,
    pub experiment: ExperimentSettings,
}

impl PipelineConfig {
    pub fn desk() -> Self {
        let env = EnvConfig::default();
        Self {
            profile: Profile::Desk,
            iql: IqlConfig {
                hidden_sizes: vec![64, 64],
                gradient_steps: 50_000,
                checkpoint_interval: 2_000,
                action_bound: env.v_max,
                ..IqlConfig::default()
            },
            env,
            corpus: CorpusConfig::default(),
            label: LabelConfig::default(),
            experiment: ExperimentSettings::default(),
        }
    }

    pub fn paper() -> Self {
        let env = EnvConfig::paper();
        Self {
            profile: Profile::Paper,
            iql: IqlConfig {
                gradient_steps: 1_000_000,
                checkpoint_interval: 10_000,
                action_bound: env.v_max,
                ..IqlConfig::default()
            },
            env,
            corpus: CorpusConfig::default(),
            label: LabelConfig::default(),
            experiment: ExperimentSettings {
                eval_interval: 10_000,
                ..ExperimentSettings::default()
            },
        }
    }

    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Desk => Self::desk(),
            Profile::Paper => Self::paper(),
        }
    }

    /// Parses a config file: profile defaults first, file values on top.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let overrides: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let profile = match overrides.get("profile") {
            None => Profile::Desk,
            Some(toml::Value::String(s)) => s.parse()?,
            Some(other) => return Err(Error::Config(format!("profile must be a string, got {other}"))),
        };
        let base = match toml::Value::try_from(Self::for_profile(profile)) {
            Ok(toml::Value::Table(t)) => t,
            _ => unreachable!("config serializes to a table"),
        };
        let merged = toml::Value::Table(merge(base, overrides));
        let cfg: Self = merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.corpus.validate()?;
        self.label.validate()?;
        self.iql.validate()?;
        let x = &self.experiment;
        if x.seeds.is_empty() {
            return Err(Error::Config("experiment needs at least one seed".into()));
        }
        let mut sorted = x.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != x.seeds.len() {
            return Err(Error::Config("experiment seeds must be distinct".into()));
        }
        if x.eval_interval == 0 || x.eval_episodes == 0 {
            return Err(Error::Config("eval_interval and eval_episodes must be >= 1".into()));
        }
        if x.expert_count == Some(0) || x.expert_count.is_some_and(|k| k > self.corpus.expert_episodes) {
            return Err(Error::Config("expert_count must lie in 1..=corpus.expert_episodes".into()));
        }
        if x.return_scale.is_some_and(|s| !(s > 0.0)) {
            return Err(Error::Config("return_scale must be positive".into()));
        }
        if (self.iql.action_bound - self.env.v_max).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "iql.action_bound ({}) must equal env.v_max ({})",
                self.iql.action_bound, self.env.v_max
            )));
        }
        Ok(())
    }

    pub fn return_scale(&self) -> f64 {
        self.experiment.return_scale.unwrap_or(self.env.horizon as f64)
    }
}

fn merge(mut base: toml::Table, overrides: toml::Table) -> toml::Table {
    for (k, v) in overrides {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => {
                let merged = merge(std::mem::take(b), o);
                *b = merged;
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
    base
}
