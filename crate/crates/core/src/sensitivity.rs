//! Sensitivity-based feature importance: average magnitude of the logit's
//! input gradient on standardized inputs, over samples and ensemble members.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, FEATURE_NAMES, N_FEATURES};
use crate::ensemble::Ensemble;

#[derive(Debug, Error, PartialEq)]
pub enum SensitivityError {
    #[error("importance needs a nonempty dataset")]
    EmptyDataset,
    #[error("all input gradients are zero; importance is degenerate")]
    Degenerate,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SensitivityMode {
    #[default]
    Absolute,
    Squared,
}

/// Nonnegative per-feature weights summing to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceVector(pub [f64; N_FEATURES]);

impl ImportanceVector {
    /// `(feature name, weight)` sorted by descending weight, ties by index.
    pub fn ranked(&self) -> Vec<(&'static str, f64)> {
        let mut idx: Vec<usize> = (0..N_FEATURES).collect();
        idx.sort_by(|&a, &b| self.0[b].total_cmp(&self.0[a]).then(a.cmp(&b)));
        idx.into_iter()
            .map(|j| (FEATURE_NAMES[j], self.0[j]))
            .collect()
    }

    pub fn sum_of(&self, features: &[usize]) -> f64 {
        features.iter().map(|&j| self.0[j]).sum()
    }

    /// Two-column CSV: feature, importance; sorted descending.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("feature,importance\n");
        for (name, w) in self.ranked() {
            out.push_str(&format!("{name},{w}\n"));
        }
        out
    }
}

fn pairwise_sum(rows: &[[f64; N_FEATURES]]) -> [f64; N_FEATURES] {
    match rows.len() {
        0 => [0.0; N_FEATURES],
        1 => rows[0],
        n => {
            let (a, b) = rows.split_at(n / 2);
            let (sa, sb) = (pairwise_sum(a), pairwise_sum(b));
            std::array::from_fn(|j| sa[j] + sb[j])
        }
    }
}

/// `I_j` proportional to the mean over samples and members of
/// `|df_i/dz_j|` (or its square), normalized to sum to one.
pub fn feature_importance(
    ensemble: &Ensemble,
    dataset: &Dataset,
    mode: SensitivityMode,
) -> Result<ImportanceVector, SensitivityError> {
    if dataset.is_empty() {
        return Err(SensitivityError::EmptyDataset);
    }
    let per_sample: Vec<[f64; N_FEATURES]> = dataset
        .samples
        .par_iter()
        .map(|s| {
            let z = ensemble.standardizer.apply(&s.features);
            let mut acc = [0.0; N_FEATURES];
            for member in &ensemble.members {
                let g = member.input_gradient(&z);
                for j in 0..N_FEATURES {
                    acc[j] += match mode {
                        SensitivityMode::Absolute => g[j].abs(),
                        SensitivityMode::Squared => g[j] * g[j],
                    };
                }
            }
            acc
        })
        .collect();
    let total = pairwise_sum(&per_sample);
    let norm: f64 = total.iter().sum();
    if !(norm > 0.0) {
        return Err(SensitivityError::Degenerate);
    }
    Ok(ImportanceVector(std::array::from_fn(|j| total[j] / norm)))
}
