//! Persisted artifact formats.
//!
//! Network parameters and ensemble manifests are version-tagged TOML. Floats
//! are written in shortest round-trip decimal form, so every weight reloads
//! bit-for-bit. Seeds are stored as decimal strings because TOML integers
//! are signed 64-bit.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{Standardizer, N_FEATURES};
use crate::ensemble::{Ensemble, EnsembleError};
use crate::mlp::{MlpParams, TrainConfig, HIDDEN};

pub const MLP_FORMAT: &str = "twostage-mlp";
pub const ENSEMBLE_FORMAT: &str = "twostage-ensemble";
pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("serialize error: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("unsupported format `{format}` version {version}")]
    Version { format: String, version: u32 },
    #[error("digest mismatch for {file}: manifest {expected}, file {actual}")]
    Digest {
        file: String,
        expected: String,
        actual: String,
    },
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
}

/// Serde adapter storing `u64` as a decimal string.
pub mod u64_str {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        String::deserialize(d)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FormatError + '_ {
    move |source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Write to a sibling temp file, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), FormatError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(bytes).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn read_to_string(path: &Path) -> Result<String, FormatError> {
    fs::read_to_string(path).map_err(io_err(path))
}

#[derive(Serialize, Deserialize)]
struct LayerDoc {
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct OutputDoc {
    weights: Vec<f64>,
    bias: f64,
}

#[derive(Serialize, Deserialize)]
struct MlpDoc {
    format: String,
    version: u32,
    layout: Vec<usize>,
    hidden: LayerDoc,
    output: OutputDoc,
}

fn check_version(format: &str, version: u32, expected: &str) -> Result<(), FormatError> {
    if format != expected || version != FORMAT_VERSION {
        return Err(FormatError::Version {
            format: format.to_string(),
            version,
        });
    }
    Ok(())
}

pub fn params_to_text(params: &MlpParams) -> Result<String, FormatError> {
    let doc = MlpDoc {
        format: MLP_FORMAT.into(),
        version: FORMAT_VERSION,
        layout: vec![N_FEATURES, HIDDEN, 1],
        hidden: LayerDoc {
            weights: params.w1.iter().map(|r| r.to_vec()).collect(),
            bias: params.b1.to_vec(),
        },
        output: OutputDoc {
            weights: params.w2.to_vec(),
            bias: params.b2,
        },
    };
    Ok(toml::to_string(&doc)?)
}

pub fn params_from_text(text: &str) -> Result<MlpParams, FormatError> {
    let doc: MlpDoc = toml::from_str(text)?;
    check_version(&doc.format, doc.version, MLP_FORMAT)?;
    let shape_err = || FormatError::Version {
        format: format!("{MLP_FORMAT} with layout {:?}", doc.layout),
        version: doc.version,
    };
    if doc.layout != [N_FEATURES, HIDDEN, 1]
        || doc.hidden.weights.len() != HIDDEN
        || doc.hidden.weights.iter().any(|r| r.len() != N_FEATURES)
        || doc.hidden.bias.len() != HIDDEN
        || doc.output.weights.len() != HIDDEN
    {
        return Err(shape_err());
    }
    let mut p = MlpParams::zeros();
    for k in 0..HIDDEN {
        p.w1[k].copy_from_slice(&doc.hidden.weights[k]);
    }
    p.b1.copy_from_slice(&doc.hidden.bias);
    p.w2.copy_from_slice(&doc.output.weights);
    p.b2 = doc.output.bias;
    Ok(p)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemberEntry {
    pub index: usize,
    #[serde(with = "u64_str")]
    pub seed: u64,
    pub file: String,
    pub sha256: String,
}

/// Training settings as persisted; the per-member seed lives in each entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: crate::mlp::Optimizer,
    pub init_scale: f64,
}

impl From<&TrainConfig> for TrainSettings {
    fn from(c: &TrainConfig) -> Self {
        Self {
            epochs: c.epochs,
            batch_size: c.batch_size,
            learning_rate: c.learning_rate,
            optimizer: c.optimizer,
            init_scale: c.init_scale,
        }
    }
}

impl TrainSettings {
    pub fn to_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            optimizer: self.optimizer,
            init_scale: self.init_scale,
            seed,
        }
    }

    pub fn fingerprint(&self) -> String {
        sha256_hex(toml::to_string(self).unwrap_or_default().as_bytes())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub format: String,
    pub version: u32,
    pub members: usize,
    #[serde(with = "u64_str")]
    pub base_seed: u64,
    /// Identifies the training data the standardizer was fitted on.
    pub train_data_sha256: String,
    pub config_fingerprint: String,
    pub train_config: TrainSettings,
    pub standardizer: Standardizer,
    pub member: Vec<MemberEntry>,
}

fn member_file(index: usize) -> String {
    format!("member_{index:03}.toml")
}

/// Write each member file and the manifest into `dir`.
pub fn save_ensemble(
    dir: &Path,
    ensemble: &Ensemble,
    base_seed: u64,
    train_data_sha256: &str,
) -> Result<EnsembleManifest, FormatError> {
    let settings = TrainSettings::from(&ensemble.config);
    let mut entries = Vec::with_capacity(ensemble.m());
    for (i, (params, &seed)) in ensemble.members.iter().zip(&ensemble.seeds).enumerate() {
        let text = params_to_text(params)?;
        let file = member_file(i);
        write_atomic(&dir.join(&file), text.as_bytes())?;
        entries.push(MemberEntry {
            index: i,
            seed,
            file,
            sha256: sha256_hex(text.as_bytes()),
        });
    }
    let manifest = EnsembleManifest {
        format: ENSEMBLE_FORMAT.into(),
        version: FORMAT_VERSION,
        members: ensemble.m(),
        base_seed,
        train_data_sha256: train_data_sha256.to_string(),
        config_fingerprint: settings.fingerprint(),
        train_config: settings,
        standardizer: ensemble.standardizer.clone(),
        member: entries,
    };
    write_atomic(
        &dir.join(MANIFEST_FILE),
        toml::to_string(&manifest)?.as_bytes(),
    )?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<EnsembleManifest, FormatError> {
    let manifest: EnsembleManifest = toml::from_str(&read_to_string(&dir.join(MANIFEST_FILE))?)?;
    check_version(&manifest.format, manifest.version, ENSEMBLE_FORMAT)?;
    Ok(manifest)
}

/// Load an ensemble, verifying every member digest.
pub fn load_ensemble(dir: &Path) -> Result<(Ensemble, EnsembleManifest), FormatError> {
    let manifest = load_manifest(dir)?;
    let mut members = Vec::with_capacity(manifest.member.len());
    let mut seeds = Vec::with_capacity(manifest.member.len());
    for entry in &manifest.member {
        let text = read_to_string(&dir.join(&entry.file))?;
        let actual = sha256_hex(text.as_bytes());
        if actual != entry.sha256 {
            return Err(FormatError::Digest {
                file: entry.file.clone(),
                expected: entry.sha256.clone(),
                actual,
            });
        }
        members.push(params_from_text(&text)?);
        seeds.push(entry.seed);
    }
    let config = manifest.train_config.to_config(manifest.base_seed);
    let ensemble = Ensemble::new(members, manifest.standardizer.clone(), seeds, config)?;
    Ok((ensemble, manifest))
}
