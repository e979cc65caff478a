//! Decision reports and per-command output manifests.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use twostage::bound::{route_with_bound, BoundResult, DecisionOutcome, UndecidedReason};
use twostage::data::FEATURE_NAMES;
use twostage::ensemble::PredictionStats;
use twostage::format::{self, sha256_hex, FormatError};

pub const MANIFEST_VERSION: u32 = 1;

/// One query row: stage-one statistics and, if unconfident, its bound.
#[derive(Clone, Debug, PartialEq)]
pub struct DecisionRow {
    pub id: u64,
    pub stats: PredictionStats,
    /// `None` for confident rows, which never reach the bound search.
    pub bound: Option<BoundResult>,
}

impl DecisionRow {
    pub fn outcome(&self, tau: f64) -> DecisionOutcome {
        match &self.bound {
            None => DecisionOutcome::Confident { stats: self.stats },
            Some(b) => route_with_bound(self.stats, b, tau),
        }
    }
}

fn outcome_cell(o: &DecisionOutcome) -> String {
    match o {
        DecisionOutcome::Undecided { reason, .. } => format!("undecided:{reason}"),
        other => other.label().to_string(),
    }
}

/// Counts for one threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TauAggregate {
    pub tau: f64,
    pub rows: usize,
    pub confident: usize,
    pub unconfident: usize,
    pub decided_by_bound: usize,
    pub undecided_infeasible: usize,
    pub undecided_bound_below_tau: usize,
}

impl TauAggregate {
    pub fn undecided(&self) -> usize {
        self.undecided_infeasible + self.undecided_bound_below_tau
    }

    /// Undecided share of the unconfident rows; zero when there are none.
    pub fn undecided_of_unconfident(&self) -> f64 {
        ratio(self.undecided(), self.unconfident)
    }

    pub fn undecided_of_all(&self) -> f64 {
        ratio(self.undecided(), self.rows)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecisionReport {
    pub taus: Vec<f64>,
    pub rows: Vec<DecisionRow>,
}

impl DecisionReport {
    pub fn aggregate(&self, tau: f64) -> TauAggregate {
        let mut agg = TauAggregate {
            tau,
            rows: self.rows.len(),
            confident: 0,
            unconfident: 0,
            decided_by_bound: 0,
            undecided_infeasible: 0,
            undecided_bound_below_tau: 0,
        };
        for row in &self.rows {
            match row.outcome(tau) {
                DecisionOutcome::Confident { .. } => agg.confident += 1,
                DecisionOutcome::DecidedByBound { .. } => agg.decided_by_bound += 1,
                DecisionOutcome::Undecided { reason, .. } => match reason {
                    UndecidedReason::Infeasible => agg.undecided_infeasible += 1,
                    UndecidedReason::BoundBelowTau => agg.undecided_bound_below_tau += 1,
                },
            }
        }
        agg.unconfident = agg.rows - agg.confident;
        agg
    }

    pub fn aggregates(&self) -> Vec<TauAggregate> {
        self.taus.iter().map(|&t| self.aggregate(t)).collect()
    }

    /// Per-row table. The witness columns are empty for rows without one.
    pub fn rows_csv(&self) -> String {
        let mut out =
            String::from("id,mu,sigma2,confidence,bound_status,lower_bound,witness_sigma2");
        for name in FEATURE_NAMES {
            write!(out, ",witness_{name}").unwrap();
        }
        for t in &self.taus {
            write!(out, ",outcome_tau_{t}").unwrap();
        }
        out.push('\n');
        for row in &self.rows {
            write!(out, "{},{},{}", row.id, row.stats.mu, row.stats.sigma2).unwrap();
            let witness = row.bound.as_ref().and_then(|b| b.witness());
            let (confidence, status) = match &row.bound {
                None => ("confident", ""),
                Some(_) if witness.is_some() => ("unconfident", "feasible"),
                Some(_) => ("unconfident", "infeasible"),
            };
            write!(out, ",{confidence},{status}").unwrap();
            match witness {
                Some(w) => {
                    write!(out, ",{},{}", w.stats.mu, w.stats.sigma2).unwrap();
                    for v in w.point.0 {
                        write!(out, ",{v}").unwrap();
                    }
                }
                None => out.push_str(&",".repeat(2 + FEATURE_NAMES.len())),
            }
            for &t in &self.taus {
                write!(out, ",{}", outcome_cell(&row.outcome(t))).unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from(
            "tau,rows,confident,unconfident,decided_by_bound,undecided_infeasible,\
             undecided_bound_below_tau,undecided_of_unconfident,undecided_of_all\n",
        );
        for a in self.aggregates() {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                a.tau,
                a.rows,
                a.confident,
                a.unconfident,
                a.decided_by_bound,
                a.undecided_infeasible,
                a.undecided_bound_below_tau,
                a.undecided_of_unconfident(),
                a.undecided_of_all()
            )
            .unwrap();
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub file: String,
    pub bytes: u64,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(name: &str, bytes: &[u8]) -> Self {
        Self {
            file: name.to_string(),
            bytes: bytes.len() as u64,
            sha256: sha256_hex(bytes),
        }
    }
}

/// Written next to every command's outputs. Holds no timestamps or absolute
/// paths, so reruns with the same config and inputs are byte-identical.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputManifest {
    pub command: String,
    pub version: u32,
    #[serde(with = "twostage::format::u64_str")]
    pub root_seed: u64,
    pub config_sha256: String,
    /// Derived seeds by stream name, as decimal strings.
    pub seeds: BTreeMap<String, String>,
    pub counts: BTreeMap<String, u64>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

impl OutputManifest {
    pub fn new(command: &str, root_seed: u64, config_sha256: String) -> Self {
        Self {
            command: command.to_string(),
            version: MANIFEST_VERSION,
            root_seed,
            config_sha256,
            seeds: BTreeMap::new(),
            counts: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn seed(&mut self, name: &str, value: u64) -> &mut Self {
        self.seeds.insert(name.to_string(), value.to_string());
        self
    }

    pub fn count(&mut self, name: &str, value: usize) -> &mut Self {
        self.counts.insert(name.to_string(), value as u64);
        self
    }

    pub fn input(&mut self, name: &str, bytes: &[u8]) -> &mut Self {
        self.inputs.push(FileDigest::of(name, bytes));
        self
    }

    /// Atomically write `bytes` to `dir/name` and record its digest.
    pub fn emit(&mut self, dir: &Path, name: &str, bytes: &[u8]) -> Result<(), FormatError> {
        format::write_atomic(&dir.join(name), bytes)?;
        self.outputs.push(FileDigest::of(name, bytes));
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<(), FormatError> {
        format::write_atomic(path, toml::to_string(self)?.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self, FormatError> {
        Ok(toml::from_str(&format::read_to_string(path)?)?)
    }
}
