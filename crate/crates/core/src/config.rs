//! Run configuration: one strict JSON document plus dotted-path overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::bc::{BcConfig, ExpertConfig};
use crate::bench::{ArenaTemplate, BehaviorKind, EvalConfig};
use crate::error::{Error, Result};
use crate::grpo::GrpoConfig;
use crate::io::json_hash;
use crate::marl::MarlConfig;
use crate::rewards::RewardConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub hidden: Vec<usize>,
    pub init_log_std: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            init_log_std: 0.3f64.ln(),
        }
    }
}

/// Demo collection sizes plus behavior-cloning hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BcSection {
    pub demo_arenas: u32,
    /// Extra arenas with a still opponent 0.5 m ahead of the tracker.
    pub demo_arenas_with_opponent: u32,
    pub episodes_per_arena: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub holdout_fraction: f64,
}

impl Default for BcSection {
    fn default() -> Self {
        Self {
            demo_arenas: 100,
            demo_arenas_with_opponent: 150,
            episodes_per_arena: 1,
            learning_rate: 1e-3,
            batch_size: 64,
            epochs: 15,
            holdout_fraction: 0.1,
        }
    }
}

impl BcSection {
    pub fn training(&self) -> BcConfig {
        BcConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            holdout_fraction: self.holdout_fraction,
        }
    }
}

/// Episodes the RL phases sample start contexts from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSuiteConfig {
    pub count: u32,
    /// Opponent behavior seen by single-agent training.
    pub single_behavior: BehaviorKind,
}

impl Default for TrainSuiteConfig {
    fn default() -> Self {
        Self {
            count: 100,
            single_behavior: BehaviorKind::Static,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub count: u32,
    pub behavior: BehaviorKind,
    pub eval: EvalConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            count: 100,
            behavior: BehaviorKind::Competitive,
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: String,
    pub arena: ArenaTemplate,
    pub expert: ExpertConfig,
    pub rewards: RewardConfig,
    pub policy: PolicyConfig,
    pub bc: BcSection,
    pub train_suite: TrainSuiteConfig,
    pub grpo: GrpoConfig,
    pub marl: MarlConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: "out".into(),
            arena: ArenaTemplate::default(),
            expert: ExpertConfig::default(),
            rewards: RewardConfig::default(),
            policy: PolicyConfig::default(),
            bc: BcSection::default(),
            train_suite: TrainSuiteConfig::default(),
            grpo: GrpoConfig::default(),
            marl: MarlConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.arena.validate()?;
        self.expert.validate()?;
        self.rewards.validate()?;
        self.bc.training().validate()?;
        if self.bc.demo_arenas + self.bc.demo_arenas_with_opponent == 0 || self.bc.episodes_per_arena == 0 {
            return Err(Error::Config("bc: demo collection needs at least one arena and episode".into()));
        }
        self.grpo.validate()?;
        self.marl.validate()?;
        if self.policy.hidden.iter().any(|&h| h == 0) {
            return Err(Error::Config("policy.hidden sizes must be >= 1".into()));
        }
        if self.train_suite.count == 0 || self.bench.count == 0 {
            return Err(Error::Config("train_suite.count and bench.count must be >= 1".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> Result<String> {
        json_hash(self)
    }

    /// Parses a document strictly; errors name the offending key path.
    pub fn from_value(value: Value) -> Result<Self> {
        let cfg: RunConfig = serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("at `{path}`: {}", e.into_inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file and applies `key.path=value` overrides in order.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut value: Value = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("config {} is not valid JSON: {e}", path.display())))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        Self::from_value(value)
    }
}

/// Sets `a.b.c=value` inside a JSON document. The value is parsed as JSON and
/// falls back to a plain string. Intermediate keys must already exist.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key.path=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = doc;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, k) in keys.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("at `{}`: not an object", keys[..i].join("."))))?;
        if i + 1 == keys.len() {
            if !obj.contains_key(*k) {
                return Err(Error::Config(format!("at `{path}`: unknown key")));
            }
            obj.insert(k.to_string(), value);
            return Ok(());
        }
        cur = obj
            .get_mut(*k)
            .ok_or_else(|| Error::Config(format!("at `{}`: unknown key", keys[..=i].join("."))))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_and_validates() {
        let cfg = RunConfig::default();
        let v = serde_json::to_value(&cfg).unwrap();
        assert_eq!(RunConfig::from_value(v).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_names_its_path() {
        let mut v = serde_json::to_value(RunConfig::default()).unwrap();
        v["grpo"]["bogus"] = Value::from(1);
        let msg = RunConfig::from_value(v).unwrap_err().to_string();
        assert!(msg.contains("grpo"), "{msg}");
        assert!(msg.contains("bogus"), "{msg}");
    }

    #[test]
    fn overrides_apply_and_reject_unknown_paths() {
        let mut v = serde_json::to_value(RunConfig::default()).unwrap();
        apply_override(&mut v, "grpo.epsilon=0.3").unwrap();
        apply_override(&mut v, "output_dir=elsewhere").unwrap();
        let cfg = RunConfig::from_value(v.clone()).unwrap();
        assert_eq!(cfg.grpo.epsilon, 0.3);
        assert_eq!(cfg.output_dir, "elsewhere");
        assert!(apply_override(&mut v, "grpo.nope=1").is_err());
        assert!(apply_override(&mut v, "missing").is_err());
    }

    #[test]
    fn invariant_violation_is_config_error() {
        let mut v = serde_json::to_value(RunConfig::default()).unwrap();
        apply_override(&mut v, "marl.rounds=0").unwrap();
        assert!(matches!(RunConfig::from_value(v), Err(Error::Config(_))));
    }
}
