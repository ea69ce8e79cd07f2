//! Run configuration: one TOML file, environment seed, `--set` overrides.

use std::path::{Path, PathBuf};

use mddkit_core::augment::AugmentPolicy;
use mddkit_core::decode::BeamConfig;
use mddkit_core::gradcheck::GradCheckConfig;
use mddkit_core::losses::LossWeights;
use mddkit_core::synth::SynthConfig;
use mddkit_core::train::{ModelConfigs, TrainConfig, TrainOptions};
use serde::{Deserialize, Serialize};

use crate::exit::CliError;

pub const SEED_ENV: &str = "MDDKIT_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Synthetic corpus: `vocab.json`, `feats/`, split manifests.
    pub data_dir: PathBuf,
    /// One subdirectory per training stage.
    pub run_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            run_dir: PathBuf::from("runs"),
        }
    }
}

/// Beam settings. The interpolation weight lives in `weights.lambda`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BeamSection {
    pub beam_size: usize,
    pub temperature: f64,
    pub max_len: usize,
}

impl Default for BeamSection {
    fn default() -> Self {
        let b = BeamConfig::default();
        Self {
            beam_size: b.beam_size,
            temperature: b.temperature,
            max_len: b.max_len,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub synth: SynthConfig,
    pub models: ModelConfigs,
    pub train: TrainConfig,
    pub weights: LossWeights,
    pub augment: AugmentPolicy,
    pub beam: BeamSection,
    pub gradcheck: GradCheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            paths: Paths::default(),
            synth: SynthConfig::default(),
            models: ModelConfigs::default(),
            train: TrainConfig::default(),
            weights: LossWeights::default(),
            augment: AugmentPolicy::default(),
            beam: BeamSection::default(),
            gradcheck: GradCheckConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> mddkit_core::Result<()> {
        self.synth.validate()?;
        self.train.validate()?;
        self.weights.validate()?;
        self.augment.validate()?;
        self.beam_at(self.weights.lambda).validate()?;
        self.gradcheck.validate()
    }

    pub fn beam_at(&self, lambda: f64) -> BeamConfig {
        BeamConfig {
            beam_size: self.beam.beam_size,
            temperature: self.beam.temperature,
            lambda,
            max_len: self.beam.max_len,
        }
    }

    pub fn beam(&self) -> BeamConfig {
        self.beam_at(self.weights.lambda)
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            train: self.train.clone(),
            weights: self.weights,
            augment: self.augment.clone(),
            beam: self.beam(),
            seed: self.seed,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), CliError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("malformed override key {key:?}")));
    }
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let next = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = next
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("{key}: {part} is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// File, then `MDDKIT_SEED`, then each `key=value` override in order.
pub fn load(path: Option<&Path>, env_seed: Option<&str>, overrides: &[String]) -> Result<RunConfig, CliError> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
            text.parse::<toml::Table>()
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    if let Some(raw) = env_seed {
        let seed: u64 = raw
            .trim()
            .parse()
            .map_err(|_| CliError::Config(format!("{SEED_ENV}={raw:?} is not an unsigned integer")))?;
        let seed = i64::try_from(seed).map_err(|_| CliError::Config(format!("{SEED_ENV} exceeds {}", i64::MAX)))?;
        table.insert("seed".into(), toml::Value::Integer(seed));
    }
    for o in overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("override {o:?} is not key=value")))?;
        set_path(&mut table, key.trim(), parse_value(raw.trim()))?;
    }
    let cfg: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_apply_in_order() {
        let sets = vec![
            "train.epochs=4".to_string(),
            "synth.split=[0.8, 0.1, 0.1]".to_string(),
            "paths.run_dir=out/runs".to_string(),
            "train.epochs=5".to_string(),
        ];
        let cfg = load(None, Some("11"), &sets).unwrap();
        assert_eq!(cfg.train.epochs, 5);
        assert_eq!(cfg.synth.split, (0.8, 0.1, 0.1));
        assert_eq!(cfg.paths.run_dir, PathBuf::from("out/runs"));
        assert_eq!(cfg.seed, 11);
        let cfg = load(None, Some("11"), &["seed=3".into()]).unwrap();
        assert_eq!(cfg.seed, 3);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(load(None, None, &["train.epoch=3".into()]), Err(CliError::Config(_))));
        assert!(matches!(load(None, None, &["bogus=1".into()]), Err(CliError::Config(_))));
        assert!(matches!(load(None, Some("x"), &[]), Err(CliError::Config(_))));
    }

    #[test]
    fn invalid_values_are_config_errors() {
        assert!(matches!(load(None, None, &["weights.lambda=1.5".into()]), Err(CliError::Config(_))));
    }
}
