//! Selection-bias experiment: a censoring network decides which applicants
//! would have been approved, an ensemble is trained on approved training rows
//! only, and we measure how much of the rejected test region the ensemble
//! variance flags as unconfident.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{split_train_test, DataError, Dataset, Provenance, Standardizer};
use crate::ensemble::{train_ensemble, EnsembleError};
use crate::mlp::{self, MlpError, MlpParams, TrainConfig};
use crate::seed::{self, Stream};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("AUC is undefined: labels contain a single class")]
    SingleClass,
    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("experiment is degenerate: {0} is empty")]
    Degenerate(&'static str),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error("censoring model failed to train: {0}")]
    Censor(#[from] MlpError),
}

/// Area under the ROC curve as the Mann-Whitney statistic
/// `P(s_pos > s_neg) + P(s_pos = s_neg) / 2`, computed exactly from
/// mid-ranks. Labels are 1 for positives and 0 otherwise.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64, ExperimentError> {
    if scores.len() != labels.len() {
        return Err(ExperimentError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(ExperimentError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));

    // Sum of mid-ranks (1-based) of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let mid_rank = (i + 1 + j) as f64 / 2.0;
        let pos_in_tie = order[i..j].iter().filter(|&&k| labels[k] == 1).count();
        rank_sum += mid_rank * pos_in_tie as f64;
        i = j;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// A single network with its own standardizer, used as the censoring model.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoringModel {
    pub params: MlpParams,
    pub standardizer: Standardizer,
}

impl ScoringModel {
    pub fn fit(train: &Dataset, config: &TrainConfig) -> Result<Self, ExperimentError> {
        let standardizer = Standardizer::fit(train)?;
        let xs = standardizer.apply_all(train);
        let ys: Vec<f64> = train.samples.iter().map(|s| s.label as f64).collect();
        let params = mlp::train(config, &xs, &ys)?.params;
        Ok(Self {
            params,
            standardizer,
        })
    }

    pub fn predict_proba(&self, x: &crate::data::FeatureVector) -> f64 {
        self.params.predict_proba(&self.standardizer.apply(x))
    }
}

/// Split into (selected, unselected): selected iff predicted probability < `tau`.
pub fn censor_split(model: &ScoringModel, dataset: &Dataset, tau: f64) -> (Dataset, Dataset) {
    let selected_flags: Vec<bool> = dataset
        .samples
        .par_iter()
        .map(|s| model.predict_proba(&s.features) < tau)
        .collect();
    let mut selected = Vec::new();
    let mut unselected = Vec::new();
    for (s, keep) in dataset.samples.iter().zip(selected_flags) {
        if keep {
            selected.push(s.clone());
        } else {
            unselected.push(s.clone());
        }
    }
    (
        Dataset::new(selected, Provenance::Derived("selected".into())),
        Dataset::new(unselected, Provenance::Derived("unselected".into())),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(with = "crate::format::u64_str")]
    pub root_seed: u64,
    pub train_fraction: f64,
    /// Censoring threshold: rows with predicted probability >= tau are rejected.
    pub censor_tau: f64,
    pub members: usize,
    pub epsilon: f64,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            root_seed: 0,
            train_fraction: 0.75,
            censor_tau: 0.5,
            members: 10,
            epsilon: 1e-3,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    #[serde(with = "crate::format::u64_str")]
    pub root_seed: u64,
    #[serde(with = "crate::format::u64_str")]
    pub split_seed: u64,
    #[serde(with = "crate::format::u64_str")]
    pub censor_seed: u64,
    #[serde(with = "crate::format::u64_str")]
    pub ensemble_base_seed: u64,
    pub members: usize,
    pub epsilon: f64,
    pub censor_tau: f64,
    pub n_d1: usize,
    pub n_d2: usize,
    pub n_d11: usize,
    pub n_d12: usize,
    pub n_d21: usize,
    pub n_d22: usize,
    /// Fraction of the training set rejected by the censoring model.
    pub f1_default_rate_train: f64,
    /// Fraction of the test set rejected by the censoring model.
    pub d22_fraction: f64,
    /// AUC of the ensemble-mean score on the test set.
    pub f2_test_auc: f64,
    /// Mean of the per-member AUCs on the test set.
    pub f2_member_auc_mean: f64,
    pub unconfident_fraction_test: f64,
    pub coverage_of_d22: f64,
    pub unconfident_fraction_test_half_epsilon: f64,
    pub coverage_of_d22_half_epsilon: f64,
    pub train: TrainConfig,
}

impl ExperimentReport {
    /// Flat `key=value` lines for scripting.
    pub fn summary(&self) -> String {
        let rows: Vec<(&str, String)> = vec![
            ("root_seed", self.root_seed.to_string()),
            ("members", self.members.to_string()),
            ("epsilon", self.epsilon.to_string()),
            ("censor_tau", self.censor_tau.to_string()),
            ("n_d1", self.n_d1.to_string()),
            ("n_d2", self.n_d2.to_string()),
            ("n_d11", self.n_d11.to_string()),
            ("n_d12", self.n_d12.to_string()),
            ("n_d21", self.n_d21.to_string()),
            ("n_d22", self.n_d22.to_string()),
            (
                "f1_default_rate_train",
                self.f1_default_rate_train.to_string(),
            ),
            ("d22_fraction", self.d22_fraction.to_string()),
            ("f2_test_auc", self.f2_test_auc.to_string()),
            ("f2_member_auc_mean", self.f2_member_auc_mean.to_string()),
            (
                "unconfident_fraction_test",
                self.unconfident_fraction_test.to_string(),
            ),
            ("coverage_of_d22", self.coverage_of_d22.to_string()),
            (
                "unconfident_fraction_test_half_epsilon",
                self.unconfident_fraction_test_half_epsilon.to_string(),
            ),
            (
                "coverage_of_d22_half_epsilon",
                self.coverage_of_d22_half_epsilon.to_string(),
            ),
        ];
        rows.into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }
}

fn fraction(count: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        count as f64 / total as f64
    }
}

/// Run the full censoring experiment on a cleaned dataset.
pub fn run_selection_experiment(
    dataset: &Dataset,
    config: &ExperimentConfig,
) -> Result<ExperimentReport, ExperimentError> {
    let split_seed = seed::derive(config.root_seed, Stream::ExperimentSplit);
    let censor_seed = seed::derive(config.root_seed, Stream::CensorModel);
    let ensemble_base_seed = seed::derive(config.root_seed, Stream::ExperimentEnsemble);

    let (d1, d2) = split_train_test(dataset, config.train_fraction, split_seed)?;
    log::info!("experiment: D1 = {}, D2 = {}", d1.len(), d2.len());
    let f1 = ScoringModel::fit(&d1, &config.train.with_seed(censor_seed))?;
    let (d11, d12) = censor_split(&f1, &d1, config.censor_tau);
    let (d21, d22) = censor_split(&f1, &d2, config.censor_tau);
    if d11.is_empty() {
        return Err(ExperimentError::Degenerate("D_{1,1}"));
    }
    if d22.is_empty() {
        return Err(ExperimentError::Degenerate("D_{2,2}"));
    }
    log::info!(
        "experiment: f1 rejects {} of D1 and {} of D2",
        d12.len(),
        d22.len()
    );

    let f2 = train_ensemble(&d11, config.members, ensemble_base_seed, &config.train)?;

    let labels = d2.labels();
    let stats = f2.stats_all(&d2);
    let mu: Vec<f64> = stats.iter().map(|s| s.mu).collect();
    let f2_test_auc = auc(&mu, &labels)?;
    let mut member_auc_sum = 0.0;
    for member in &f2.members {
        let scores: Vec<f64> = d2
            .samples
            .iter()
            .map(|s| member.predict_proba(&f2.standardizer.apply(&s.features)))
            .collect();
        member_auc_sum += auc(&scores, &labels)?;
    }

    let d22_ids: std::collections::HashSet<u64> = d22.samples.iter().map(|s| s.id).collect();
    let coverage = |eps: f64| -> (f64, f64) {
        let mut unconfident = 0;
        let mut covered = 0;
        for (s, st) in d2.samples.iter().zip(&stats) {
            if st.sigma2 > eps {
                unconfident += 1;
                if d22_ids.contains(&s.id) {
                    covered += 1;
                }
            }
        }
        (
            fraction(unconfident, d2.len()),
            fraction(covered, d22.len()),
        )
    };
    let (unconfident_fraction_test, coverage_of_d22) = coverage(config.epsilon);
    let (unconfident_half, coverage_half) = coverage(config.epsilon / 2.0);

    Ok(ExperimentReport {
        root_seed: config.root_seed,
        split_seed,
        censor_seed,
        ensemble_base_seed,
        members: config.members,
        epsilon: config.epsilon,
        censor_tau: config.censor_tau,
        n_d1: d1.len(),
        n_d2: d2.len(),
        n_d11: d11.len(),
        n_d12: d12.len(),
        n_d21: d21.len(),
        n_d22: d22.len(),
        f1_default_rate_train: fraction(d12.len(), d1.len()),
        d22_fraction: fraction(d22.len(), d2.len()),
        f2_test_auc,
        f2_member_auc_mean: member_auc_sum / f2.m() as f64,
        unconfident_fraction_test,
        coverage_of_d22,
        unconfident_fraction_test_half_epsilon: unconfident_half,
        coverage_of_d22_half_epsilon: coverage_half,
        train: config.train.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{FeatureVector, LabeledSample, N_FEATURES};

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 5], &[0, 1, 0, 1, 1]).unwrap(), 0.5);
        assert!(matches!(
            auc(&[0.1, 0.2], &[1, 1]),
            Err(ExperimentError::SingleClass)
        ));
        assert!(matches!(
            auc(&[0.1], &[1, 0]),
            Err(ExperimentError::LengthMismatch { .. })
        ));
    }

    fn dataset(n: u64) -> Dataset {
        Dataset::new(
            (0..n)
                .map(|i| LabeledSample {
                    id: i,
                    features: FeatureVector(std::array::from_fn(|j| (i + j as u64) as f64)),
                    label: (i % 2) as u8,
                })
                .collect(),
            Provenance::Raw,
        )
    }

    fn zero_model() -> ScoringModel {
        ScoringModel {
            params: MlpParams::zeros(),
            standardizer: Standardizer {
                mean: [0.0; N_FEATURES],
                std: [1.0; N_FEATURES],
            },
        }
    }

    #[test]
    fn censor_boundary_goes_to_unselected() {
        let ds = dataset(6);
        let (sel, unsel) = censor_split(&zero_model(), &ds, 0.5);
        assert!(sel.is_empty());
        assert_eq!(unsel.len(), 6);
        let (sel, unsel) = censor_split(&zero_model(), &ds, 1.0);
        assert_eq!(sel.len(), 6);
        assert!(unsel.is_empty());
    }
}
