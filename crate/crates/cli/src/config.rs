//! Flat key/value run configuration layered over the shipped reference file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize};
use twostage::bound::MonotoneSpec;
use twostage::data::feature_index;
use twostage::experiment::ExperimentConfig;
use twostage::format::sha256_hex;
use twostage::mlp::{Optimizer, TrainConfig};
use twostage::sensitivity::SensitivityMode;

use crate::error::{CliError, Result};

/// The reference configuration shipped with the binary.
pub const REFERENCE_CONFIG: &str = include_str!("../configs/reference.toml");

fn seed_from_int_or_string<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Int(i64),
        Str(String),
    }
    match Raw::deserialize(d)? {
        Raw::Int(v) => u64::try_from(v).map_err(serde::de::Error::custom),
        Raw::Str(s) => s.trim().parse().map_err(serde::de::Error::custom),
    }
}

fn seed_as_string<S: serde::Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&v.to_string())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data_path: PathBuf,
    pub store_dir: PathBuf,
    pub out_dir: PathBuf,
    #[serde(
        deserialize_with = "seed_from_int_or_string",
        serialize_with = "seed_as_string"
    )]
    pub root_seed: u64,
    pub train_fraction: f64,
    pub members: usize,
    pub epsilon: f64,
    pub tau: Vec<f64>,
    pub censor_tau: f64,
    pub monotone_features: Vec<String>,
    pub grid_real_levels: usize,
    pub grid_integer_cap: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub init_scale: f64,
    pub importance_mode: SensitivityMode,
    pub plot_features: Vec<String>,
    pub plot_sum_min: f64,
    pub plot_sum_max: f64,
    pub plot_background_rows: usize,
}

/// Command-line overrides applied after the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub epsilon: Option<f64>,
    pub tau: Option<Vec<f64>>,
    pub members: Option<usize>,
    pub out_dir: Option<PathBuf>,
    pub data_path: Option<PathBuf>,
    pub store_dir: Option<PathBuf>,
}

fn probability(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(CliError::Config(format!("{name} = {v} must lie in (0, 1)")))
    }
}

impl RunConfig {
    pub fn reference() -> Self {
        Self::from_toml_str("").expect("reference config is valid")
    }

    /// Parse `text` as overrides on top of the reference config.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut table: toml::Table = REFERENCE_CONFIG
            .parse()
            .map_err(|e| CliError::Config(format!("reference config: {e}")))?;
        let user: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        for (k, v) in user {
            if !table.contains_key(&k) {
                return Err(CliError::Config(format!("unknown key `{k}`")));
            }
            table.insert(k, v);
        }
        let config: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Self::from_toml_str(""),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| CliError::Io {
                    path: p.to_path_buf(),
                    source,
                })?;
                Self::from_toml_str(&text)
            }
        }
    }

    pub fn apply(mut self, o: &Overrides) -> Result<Self> {
        if let Some(v) = o.seed {
            self.root_seed = v;
        }
        if let Some(v) = o.epsilon {
            self.epsilon = v;
        }
        if let Some(v) = &o.tau {
            self.tau = v.clone();
        }
        if let Some(v) = o.members {
            self.members = v;
        }
        if let Some(v) = &o.out_dir {
            self.out_dir = v.clone();
        }
        if let Some(v) = &o.data_path {
            self.data_path = v.clone();
        }
        if let Some(v) = &o.store_dir {
            self.store_dir = v.clone();
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        probability("train_fraction", self.train_fraction)?;
        probability("censor_tau", self.censor_tau)?;
        if self.members < 2 {
            return Err(CliError::Config(format!(
                "members = {} but the ensemble variance needs at least 2",
                self.members
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(CliError::Config(format!(
                "epsilon = {} must be positive",
                self.epsilon
            )));
        }
        if self.tau.is_empty() {
            return Err(CliError::Config("tau list is empty".into()));
        }
        for &t in &self.tau {
            probability("tau", t)?;
        }
        self.monotone_spec()?;
        self.plot_indices()?;
        if !(self.plot_sum_min < self.plot_sum_max) {
            return Err(CliError::Config(
                "plot_sum_min must be below plot_sum_max".into(),
            ));
        }
        for (name, v) in [
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(CliError::Config(format!("{name} = {v} must lie in [0, 1)")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(CliError::Config("adam_eps must be positive".into()));
        }
        self.train_config(0)
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            optimizer: match self.optimizer {
                OptimizerKind::Adam => Optimizer::Adam {
                    beta1: self.adam_beta1,
                    beta2: self.adam_beta2,
                    eps: self.adam_eps,
                },
                OptimizerKind::Sgd => Optimizer::Sgd,
            },
            init_scale: self.init_scale,
            seed,
        }
    }

    pub fn monotone_spec(&self) -> Result<MonotoneSpec> {
        Ok(MonotoneSpec::from_names(
            &self.monotone_features,
            self.grid_real_levels,
            self.grid_integer_cap,
        )?)
    }

    pub fn plot_indices(&self) -> Result<[usize; 3]> {
        if self.plot_features.len() != 3 {
            return Err(CliError::Config(
                "plot_features needs exactly 3 names".into(),
            ));
        }
        let mut out = [0; 3];
        for (slot, name) in out.iter_mut().zip(&self.plot_features) {
            *slot = feature_index(name)
                .ok_or_else(|| CliError::Config(format!("unknown feature `{name}`")))?;
        }
        Ok(out)
    }

    pub fn experiment_config(&self) -> ExperimentConfig {
        ExperimentConfig {
            root_seed: self.root_seed,
            train_fraction: self.train_fraction,
            censor_tau: self.censor_tau,
            members: self.members,
            epsilon: self.epsilon,
            train: self.train_config(0),
        }
    }

    /// Digest of the canonical serialization, recorded in manifests. Paths
    /// are left out so relocated runs compare equal.
    pub fn digest(&self) -> String {
        let mut canonical = self.clone();
        canonical.data_path = PathBuf::new();
        canonical.store_dir = PathBuf::new();
        canonical.out_dir = PathBuf::new();
        sha256_hex(
            toml::to_string(&canonical)
                .expect("config serializes")
                .as_bytes(),
        )
    }

    pub fn data_dir(&self) -> PathBuf {
        self.store_dir.join("data")
    }

    pub fn ensemble_dir(&self) -> PathBuf {
        self.store_dir.join("ensemble")
    }
}
