//! Pipeline commands. Each reads its inputs from the artifact store, writes
//! its outputs atomically and records them in a manifest.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use twostage::bound::BoundSearch;
use twostage::data::{
    drop_missing, parse_dataset, split_train_test, Dataset, FeatureBounds, LabeledSample,
    Provenance,
};
use twostage::ensemble::{train_ensemble, Ensemble};
use twostage::experiment::{run_selection_experiment, ExperimentReport};
use twostage::format::{
    self, load_ensemble, load_manifest, save_ensemble, sha256_hex, TrainSettings,
};
use twostage::seed::{self, Stream};
use twostage::sensitivity::{feature_importance, ImportanceVector};
use twostage::surrogate::{self, SurrogateConfig};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::report::{DecisionReport, DecisionRow, OutputManifest};

pub const CLEAN_CSV: &str = "clean.csv";
pub const TRAIN_CSV: &str = "train.csv";
pub const TEST_CSV: &str = "test.csv";
pub const BOUNDS_FILE: &str = "bounds.toml";
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const RUN_FILE: &str = "run.toml";
pub const DECISIONS_CSV: &str = "decisions.csv";
pub const DECISIONS_SUMMARY_CSV: &str = "decisions_summary.csv";
pub const EXPERIMENT_FILE: &str = "experiment.toml";
pub const IMPORTANCE_CSV: &str = "importance.csv";
pub const PLOTDATA_CSV: &str = "plotdata.csv";

fn manifest_name(command: &str) -> String {
    format!("{command}_manifest.toml")
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn read_input(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_artifact(path: &Path, command: &'static str) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(CliError::MissingArtifact {
            path: path.to_path_buf(),
            command,
        });
    }
    read_input(path)
}

fn dataset_from_bytes(bytes: &[u8]) -> Result<Dataset> {
    Ok(drop_missing(&parse_dataset(bytes)?)?)
}

fn dataset_to_bytes(ds: &Dataset) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    ds.write_csv(&mut buf)?;
    Ok(buf)
}

fn open_ensemble(config: &RunConfig) -> Result<(Ensemble, Vec<u8>)> {
    let dir = config.ensemble_dir();
    let manifest = read_artifact(&dir.join(MANIFEST_FILE), "train")?;
    let (ensemble, _) = load_ensemble(&dir)?;
    Ok((ensemble, manifest))
}

fn load_bounds(config: &RunConfig) -> Result<(FeatureBounds, Vec<u8>)> {
    let bytes = read_artifact(&config.data_dir().join(BOUNDS_FILE), "ingest")?;
    let text = String::from_utf8_lossy(&bytes);
    let bounds = toml::from_str(&text).map_err(format::FormatError::from)?;
    Ok((bounds, bytes))
}

/// Parse, clean and split the raw data; record training-set feature bounds.
pub fn ingest(config: &RunConfig) -> Result<OutputManifest> {
    let raw_bytes = read_input(&config.data_path)?;
    let raw = parse_dataset(raw_bytes.as_slice())?;
    let dropped: Vec<u64> = raw
        .rows
        .iter()
        .filter(|r| r.is_missing())
        .map(|r| r.line)
        .collect();
    if !dropped.is_empty() {
        log::info!(
            "dropping {} rows with missing or invalid cells (first at line {})",
            dropped.len(),
            dropped[0]
        );
    }
    let clean = drop_missing(&raw)?;
    let split_seed = seed::derive(config.root_seed, Stream::Split);
    let (train, test) = split_train_test(&clean, config.train_fraction, split_seed)?;
    let bounds = FeatureBounds::from_dataset(&train)?;

    let dir = config.data_dir();
    let mut m = OutputManifest::new("ingest", config.root_seed, config.digest());
    m.seed("split", split_seed)
        .count("raw_rows", raw.rows.len())
        .count("dropped_rows", dropped.len())
        .count("clean_rows", clean.len())
        .count("train_rows", train.len())
        .count("test_rows", test.len())
        .input(&file_name(&config.data_path), &raw_bytes);
    m.emit(&dir, CLEAN_CSV, &dataset_to_bytes(&clean)?)?;
    m.emit(&dir, TRAIN_CSV, &dataset_to_bytes(&train)?)?;
    m.emit(&dir, TEST_CSV, &dataset_to_bytes(&test)?)?;
    m.emit(
        &dir,
        BOUNDS_FILE,
        toml::to_string(&bounds)
            .map_err(format::FormatError::from)?
            .as_bytes(),
    )?;
    m.write(&dir.join(MANIFEST_FILE))?;
    log::info!(
        "ingest: {} clean rows, {} train, {} test",
        clean.len(),
        train.len(),
        test.len()
    );
    Ok(m)
}

/// Train the ensemble, or resume a stored one trained with the same seed,
/// settings and data: extra members are appended, surplus ones dropped.
pub fn train(config: &RunConfig) -> Result<OutputManifest> {
    let train_path = config.data_dir().join(TRAIN_CSV);
    let bytes = read_artifact(&train_path, "ingest")?;
    let train_sha = sha256_hex(&bytes);
    let train_set = dataset_from_bytes(&bytes)?;
    let base_seed = seed::derive(config.root_seed, Stream::Ensemble);
    let train_config = config.train_config(base_seed);
    let fingerprint = TrainSettings::from(&train_config).fingerprint();
    let dir = config.ensemble_dir();

    let compatible = load_manifest(&dir).ok().filter(|m| {
        m.base_seed == base_seed
            && m.config_fingerprint == fingerprint
            && m.train_data_sha256 == train_sha
    });
    let ensemble = match compatible {
        Some(previous) => {
            let (mut ensemble, _) = load_ensemble(&dir)?;
            let before = ensemble.m();
            if before >= config.members {
                ensemble.members.truncate(config.members);
                ensemble.seeds.truncate(config.members);
            } else {
                ensemble.extend(&train_set, base_seed, config.members)?;
            }
            log::info!(
                "train: resumed {} stored members, now {}",
                previous.members,
                ensemble.m()
            );
            ensemble
        }
        None => {
            log::info!(
                "train: {} members on {} rows",
                config.members,
                train_set.len()
            );
            train_ensemble(&train_set, config.members, base_seed, &train_config)?
        }
    };

    let saved = save_ensemble(&dir, &ensemble, base_seed, &train_sha)?;
    remove_stale_members(&dir, ensemble.m())?;

    let mut m = OutputManifest::new("train", config.root_seed, config.digest());
    m.seed("ensemble_base", base_seed)
        .count("members", ensemble.m())
        .count("train_rows", train_set.len())
        .input(TRAIN_CSV, &bytes);
    let manifest_bytes = read_input(&dir.join(MANIFEST_FILE))?;
    m.outputs.push(crate::report::FileDigest::of(
        MANIFEST_FILE,
        &manifest_bytes,
    ));
    for entry in &saved.member {
        let member_bytes = read_input(&dir.join(&entry.file))?;
        m.outputs
            .push(crate::report::FileDigest::of(&entry.file, &member_bytes));
    }
    m.write(&dir.join(RUN_FILE))?;
    Ok(m)
}

fn remove_stale_members(dir: &Path, keep: usize) -> Result<()> {
    let mut i = keep;
    loop {
        let path = dir.join(format!("member_{i:03}.toml"));
        if !path.exists() {
            return Ok(());
        }
        fs::remove_file(&path).map_err(|source| CliError::Io { path, source })?;
        i += 1;
    }
}

/// Route each query row: confident rows keep the ensemble prediction;
/// unconfident rows get a monotone lower bound checked against every tau.
/// Rows with missing feature cells are skipped; labels are not used.
pub fn decide(config: &RunConfig, query: Option<&Path>) -> Result<DecisionReport> {
    let (ensemble, ensemble_manifest) = open_ensemble(config)?;
    let (bounds, bounds_bytes) = load_bounds(config)?;
    let spec = config.monotone_spec()?;
    let query_path: PathBuf = match query {
        Some(p) => p.to_path_buf(),
        None => config.data_dir().join(TEST_CSV),
    };
    let query_bytes = if query.is_some() {
        read_input(&query_path)?
    } else {
        read_artifact(&query_path, "ingest")?
    };
    let raw = parse_dataset(query_bytes.as_slice())?;
    let mut skipped = 0;
    let samples: Vec<LabeledSample> = raw
        .rows
        .iter()
        .filter_map(|r| {
            if r.values.iter().any(Option::is_none) {
                log::warn!("decide: skipping line {} with missing features", r.line);
                skipped += 1;
                return None;
            }
            Some(LabeledSample {
                id: r.id,
                features: twostage::FeatureVector(r.values.map(|v| v.unwrap_or_default())),
                label: r.label.unwrap_or(0),
            })
        })
        .collect();
    let queries = Dataset::new(samples, Provenance::Derived("query".into()));

    let search = BoundSearch::new(&ensemble, &spec, &bounds, config.epsilon);
    let stats = ensemble.stats_all(&queries);
    let rows: Vec<DecisionRow> = queries
        .samples
        .iter()
        .zip(stats)
        .map(|(s, st)| DecisionRow {
            id: s.id,
            stats: st,
            bound: (st.sigma2 > config.epsilon).then(|| search.lower_bound(&s.features)),
        })
        .collect();
    let report = DecisionReport {
        taus: config.tau.clone(),
        rows,
    };

    let out = &config.out_dir;
    let mut m = OutputManifest::new("decide", config.root_seed, config.digest());
    m.count("rows", report.rows.len())
        .count("skipped_rows", skipped)
        .count(
            "unconfident",
            report.rows.iter().filter(|r| r.bound.is_some()).count(),
        )
        .input(MANIFEST_FILE, &ensemble_manifest)
        .input(BOUNDS_FILE, &bounds_bytes)
        .input(&file_name(&query_path), &query_bytes);
    m.emit(out, DECISIONS_CSV, report.rows_csv().as_bytes())?;
    m.emit(out, DECISIONS_SUMMARY_CSV, report.summary_csv().as_bytes())?;
    m.write(&out.join(manifest_name("decide")))?;
    Ok(report)
}

/// Censoring experiment on the cleaned dataset.
pub fn experiment(config: &RunConfig) -> Result<ExperimentReport> {
    let bytes = read_artifact(&config.data_dir().join(CLEAN_CSV), "ingest")?;
    let dataset = dataset_from_bytes(&bytes)?;
    let report = run_selection_experiment(&dataset, &config.experiment_config())?;
    let text = toml::to_string(&report).map_err(format::FormatError::from)?;

    let mut m = OutputManifest::new("experiment", config.root_seed, config.digest());
    m.seed("split", report.split_seed)
        .seed("censor", report.censor_seed)
        .seed("ensemble_base", report.ensemble_base_seed)
        .count("rows", dataset.len())
        .input(CLEAN_CSV, &bytes);
    m.emit(&config.out_dir, EXPERIMENT_FILE, text.as_bytes())?;
    m.write(&config.out_dir.join(manifest_name("experiment")))?;
    Ok(report)
}

/// Sensitivity importance of the stored ensemble over the cleaned dataset.
pub fn importance(config: &RunConfig) -> Result<ImportanceVector> {
    let (ensemble, ensemble_manifest) = open_ensemble(config)?;
    let bytes = read_artifact(&config.data_dir().join(CLEAN_CSV), "ingest")?;
    let dataset = dataset_from_bytes(&bytes)?;
    let imp = feature_importance(&ensemble, &dataset, config.importance_mode)?;

    let mut m = OutputManifest::new("importance", config.root_seed, config.digest());
    m.count("rows", dataset.len())
        .input(MANIFEST_FILE, &ensemble_manifest)
        .input(CLEAN_CSV, &bytes);
    m.emit(&config.out_dir, IMPORTANCE_CSV, imp.to_csv().as_bytes())?;
    m.write(&config.out_dir.join(manifest_name("importance")))?;
    Ok(imp)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlotSummary {
    pub unconfident_rows: usize,
    pub background_rows: usize,
}

/// Table of unconfident rows inside the configured sum window of the three
/// plot features, plus a seeded sample of confident rows as background.
pub fn plotdata(config: &RunConfig) -> Result<PlotSummary> {
    let (ensemble, ensemble_manifest) = open_ensemble(config)?;
    let bytes = read_artifact(&config.data_dir().join(CLEAN_CSV), "ingest")?;
    let dataset = dataset_from_bytes(&bytes)?;
    let axes = config.plot_indices()?;
    let stats = ensemble.stats_all(&dataset);

    let in_window = |s: &LabeledSample| {
        let sum: f64 = axes.iter().map(|&j| s.features[j]).sum();
        sum > config.plot_sum_min && sum < config.plot_sum_max
    };
    let mut unconfident = Vec::new();
    let mut confident = Vec::new();
    for (s, st) in dataset.samples.iter().zip(&stats) {
        if st.sigma2 > config.epsilon {
            if in_window(s) {
                unconfident.push((s, *st));
            }
        } else {
            confident.push(s.clone());
        }
    }
    let background_seed = seed::derive(config.root_seed, Stream::PlotBackground);
    let background = Dataset::new(confident, Provenance::Derived("confident".into()))
        .sample_rows(config.plot_background_rows, background_seed);
    let background_stats = ensemble.stats_all(&background);

    let mut csv = String::from("set,id");
    for name in &config.plot_features {
        write!(csv, ",{name}").unwrap();
    }
    csv.push_str(",mu,sigma2\n");
    let mut push = |set: &str, s: &LabeledSample, st: &twostage::PredictionStats| {
        write!(csv, "{set},{}", s.id).unwrap();
        for &j in &axes {
            write!(csv, ",{}", s.features[j]).unwrap();
        }
        writeln!(csv, ",{},{}", st.mu, st.sigma2).unwrap();
    };
    for (s, st) in &unconfident {
        push("unconfident", s, st);
    }
    for (s, st) in background.samples.iter().zip(&background_stats) {
        push("confident", s, st);
    }

    let summary = PlotSummary {
        unconfident_rows: unconfident.len(),
        background_rows: background.len(),
    };
    let mut m = OutputManifest::new("plotdata", config.root_seed, config.digest());
    m.seed("background", background_seed)
        .count("unconfident_rows", summary.unconfident_rows)
        .count("background_rows", summary.background_rows)
        .input(MANIFEST_FILE, &ensemble_manifest)
        .input(CLEAN_CSV, &bytes);
    m.emit(&config.out_dir, PLOTDATA_CSV, csv.as_bytes())?;
    m.write(&config.out_dir.join(manifest_name("plotdata")))?;
    Ok(summary)
}

/// Write a synthetic dataset in the raw input layout.
pub fn synth(path: &Path, surrogate_config: &SurrogateConfig) -> Result<usize> {
    let mut buf = Vec::new();
    surrogate::write_csv(surrogate_config, &mut buf)?;
    format::write_atomic(path, &buf)?;
    Ok(surrogate_config.total_rows())
}
