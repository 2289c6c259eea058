//! Experiment configuration: a single TOML document with dataset, model,
//! training and sweep blocks. Every field has a default and unknown keys are
//! rejected. `key=value` overrides address fields by dotted path.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expfam::Family;
use crate::model::ModelConfig;
use crate::network::DEFAULT_LEAKY_SLOPE;
use crate::simdata::SynthConfig;
use crate::training::{Regime, TrainConfig, TrainSetup};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelBlock {
    pub z_card: usize,
    pub hidden: Vec<usize>,
    pub leaky_slope: f64,
    /// Per-view reliability weights, traffic first.
    pub alpha: Vec<f64>,
    /// Likelihood family per view; the dataset's families when absent.
    pub families: Option<Vec<Family>>,
}

impl Default for ModelBlock {
    fn default() -> Self {
        Self {
            z_card: 10,
            hidden: vec![64, 128],
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            alpha: vec![0.1, 0.9],
            families: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepBlock {
    /// PNR grid in dB; each point regenerates the dataset with
    /// `perturb_var = PNR * noise_var`.
    pub pnr_db: Vec<f64>,
    /// Regimes trained per PNR point; the train block's regime when absent.
    pub regimes: Option<Vec<Regime>>,
    /// Adds a K-means row per PNR point.
    pub baseline: bool,
    pub alpha_grid: Vec<f64>,
    pub z_min: usize,
    pub z_max: usize,
    /// Trials per `|Z|` during cluster-count detection.
    pub detect_trials: usize,
}

impl Default for SweepBlock {
    fn default() -> Self {
        Self {
            pnr_db: (3..=12).map(f64::from).collect(),
            regimes: None,
            baseline: false,
            alpha_grid: vec![0.1, 0.3, 0.5, 0.7, 0.9],
            z_min: 2,
            z_max: 16,
            detect_trials: 3,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: SynthConfig,
    pub model: ModelBlock,
    pub train: TrainConfig,
    pub sweep: SweepBlock,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(one_line(&e.to_string())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Writes the effective configuration as `config.toml` into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.toml"), self.to_toml()?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.train.validate()?;
        if self.model.alpha.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
            return Err(Error::Config(format!("model.alpha must be positive, got {:?}", self.model.alpha)));
        }
        if self.sweep.z_min == 0 || self.sweep.z_min > self.sweep.z_max {
            return Err(Error::Config("sweep.z_min must be in 1..=sweep.z_max".into()));
        }
        if self.sweep.detect_trials == 0 {
            return Err(Error::Config("sweep.detect_trials must be positive".into()));
        }
        Ok(())
    }

    /// Applies `key=value` overrides, where `key` is a dotted path and `value`
    /// a TOML literal (bare words are read as strings).
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut doc = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
            set_path(&mut doc, key.trim(), parse_literal(raw.trim()))?;
        }
        let cfg: Self = doc.try_into().map_err(|e: toml::de::Error| Error::Config(one_line(&e.to_string())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            z_card: self.model.z_card,
            hidden: self.model.hidden.clone(),
            leaky_slope: self.model.leaky_slope,
        }
    }

    pub fn setup(&self) -> TrainSetup {
        TrainSetup {
            model: self.model_config(),
            alpha: self.model.alpha.clone(),
            families: self.model.families.clone(),
            train: self.train.clone(),
        }
    }

    pub fn sweep_regimes(&self) -> Vec<Regime> {
        self.sweep.regimes.clone().unwrap_or_else(|| vec![self.train.regime])
    }

    /// `|Z|` values tried by cluster-count detection.
    pub fn z_values(&self) -> Vec<usize> {
        (self.sweep.z_min..=self.sweep.z_max).collect()
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn parse_literal(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(doc: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|p| !p.is_empty()).ok_or_else(|| Error::Config(format!("empty key in {key:?}")))?;
    let mut node = doc;
    for part in parts {
        node = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{key:?}: {part:?} is not a table")))?
            .entry(part)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("{key:?} does not address a table field")))?;
    // Integers given where floats live are widened so `lr=0` style overrides work.
    let value = match (table.get(last), value) {
        (Some(toml::Value::Float(_)), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
        (Some(toml::Value::Array(old)), toml::Value::Array(new)) if old.iter().any(|v| v.is_float()) => {
            toml::Value::Array(
                new.into_iter()
                    .map(|v| match v {
                        toml::Value::Integer(i) => toml::Value::Float(i as f64),
                        other => other,
                    })
                    .collect(),
            )
        }
        (_, v) => v,
    };
    table.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_fully_defaulted() {
        let cfg = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.dataset.n_train, 2557);
        assert_eq!(cfg.train.epochs, 200);
        assert_eq!(cfg.train.batch_size, 8);
        assert_eq!(cfg.sweep.pnr_db.len(), 10);
    }

    #[test]
    fn round_trip() {
        let cfg = ExperimentConfig::default()
            .with_overrides(&["train.trials=3", "model.families=[\"bernoulli\", \"gaussian-full\"]"])
            .unwrap();
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(ExperimentConfig::from_toml("[train]\nepoch = 3\n"), Err(Error::Config(_))));
        assert!(ExperimentConfig::from_toml("bogus = 1").is_err());
        assert!(ExperimentConfig::default().with_overrides(&["train.bogus=1"]).is_err());
    }

    #[test]
    fn overrides() {
        let cfg = ExperimentConfig::default()
            .with_overrides(&[
                "dataset.classes=2",
                "train.regime=unsupervised",
                "train.learning_rate=0",
                "sweep.pnr_db=[3, 4.5]",
                "dataset.csi.noise_var=2",
            ])
            .unwrap();
        assert_eq!(cfg.dataset.classes, 2);
        assert_eq!(cfg.train.regime, Regime::Unsupervised);
        assert_eq!(cfg.train.learning_rate, 0.0);
        assert_eq!(cfg.sweep.pnr_db, vec![3.0, 4.5]);
        assert_eq!(cfg.dataset.csi.noise_var, 2.0);
        assert!(ExperimentConfig::default().with_overrides(&["novalue"]).is_err());
        assert!(ExperimentConfig::default().with_overrides(&["train.epochs=0"]).is_err());
    }
}
