//! Deep ensemble: members trained on the full training set that differ only
//! in their seeds. Member disagreement flags inputs the model has not seen.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, Dataset, FeatureVector, Provenance, Standardizer, N_FEATURES};
use crate::mlp::{self, MlpError, MlpParams, TrainConfig};
use crate::seed::member_seed;

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("an ensemble needs at least 2 members, got {0}")]
    TooFewMembers(usize),
    #[error("member {index} failed to train: {source}")]
    Member {
        index: usize,
        #[source]
        source: MlpError,
    },
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Ensemble mean and sample variance of member probabilities at one point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionStats {
    pub mu: f64,
    pub sigma2: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ConfidenceLabel {
    Confident(PredictionStats),
    Unconfident(PredictionStats),
}

impl ConfidenceLabel {
    pub fn stats(&self) -> PredictionStats {
        match *self {
            ConfidenceLabel::Confident(s) | ConfidenceLabel::Unconfident(s) => s,
        }
    }

    pub fn is_confident(&self) -> bool {
        matches!(self, ConfidenceLabel::Confident(_))
    }
}

/// Unconfident iff `sigma2 > epsilon`; equality counts as confident.
pub fn label_for(stats: PredictionStats, epsilon: f64) -> ConfidenceLabel {
    if stats.sigma2 > epsilon {
        ConfidenceLabel::Unconfident(stats)
    } else {
        ConfidenceLabel::Confident(stats)
    }
}

/// Mean and (m - 1)-denominator variance of member probabilities.
///
/// Computed relative to the first member, so identical members give exactly
/// zero variance and their common probability as the mean.
pub fn stats_from_probabilities(probs: &[f64]) -> PredictionStats {
    let m = probs.len() as f64;
    let shift = probs[0];
    let mean_dev = probs.iter().map(|p| p - shift).sum::<f64>() / m;
    let sigma2 = probs
        .iter()
        .map(|p| {
            let d = p - shift - mean_dev;
            d * d
        })
        .sum::<f64>()
        / (m - 1.0);
    PredictionStats {
        mu: shift + mean_dev,
        sigma2,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble {
    pub members: Vec<MlpParams>,
    pub standardizer: Standardizer,
    pub seeds: Vec<u64>,
    pub config: TrainConfig,
}

impl Ensemble {
    pub fn new(
        members: Vec<MlpParams>,
        standardizer: Standardizer,
        seeds: Vec<u64>,
        config: TrainConfig,
    ) -> Result<Self, EnsembleError> {
        if members.len() < 2 {
            return Err(EnsembleError::TooFewMembers(members.len()));
        }
        Ok(Self {
            members,
            standardizer,
            seeds,
            config,
        })
    }

    pub fn m(&self) -> usize {
        self.members.len()
    }

    /// Statistics at a raw-unit point.
    pub fn stats(&self, x: &FeatureVector) -> PredictionStats {
        self.stats_standardized(&self.standardizer.apply(x))
    }

    pub fn stats_standardized(&self, z: &[f64; N_FEATURES]) -> PredictionStats {
        let mut probs = [0.0; 64];
        if self.members.len() <= probs.len() {
            for (p, member) in probs.iter_mut().zip(&self.members) {
                *p = member.predict_proba(z);
            }
            stats_from_probabilities(&probs[..self.members.len()])
        } else {
            let probs: Vec<f64> = self.members.iter().map(|m| m.predict_proba(z)).collect();
            stats_from_probabilities(&probs)
        }
    }

    pub fn classify(&self, x: &FeatureVector, epsilon: f64) -> ConfidenceLabel {
        label_for(self.stats(x), epsilon)
    }

    /// Statistics for every sample, in dataset order.
    pub fn stats_all(&self, dataset: &Dataset) -> Vec<PredictionStats> {
        dataset
            .samples
            .par_iter()
            .map(|s| self.stats(&s.features))
            .collect()
    }

    /// Partition into (confident, unconfident), order preserved in each part.
    pub fn split_by_confidence(&self, dataset: &Dataset, epsilon: f64) -> (Dataset, Dataset) {
        let stats = self.stats_all(dataset);
        let mut confident = Vec::new();
        let mut unconfident = Vec::new();
        for (s, st) in dataset.samples.iter().zip(stats) {
            if st.sigma2 > epsilon {
                unconfident.push(s.clone());
            } else {
                confident.push(s.clone());
            }
        }
        (
            Dataset::new(confident, Provenance::Derived("confident".into())),
            Dataset::new(unconfident, Provenance::Derived("unconfident".into())),
        )
    }

    /// Appends members `m()..new_m` trained with the same base seed and config.
    pub fn extend(
        &mut self,
        train_set: &Dataset,
        base_seed: u64,
        new_m: usize,
    ) -> Result<(), EnsembleError> {
        let seeds: Vec<u64> = (self.m()..new_m)
            .map(|i| member_seed(base_seed, i))
            .collect();
        let offset = self.m();
        let members = train_members(train_set, &self.standardizer, &seeds, &self.config, offset)?;
        self.members.extend(members);
        self.seeds.extend(seeds);
        Ok(())
    }
}

fn train_members(
    train_set: &Dataset,
    standardizer: &Standardizer,
    seeds: &[u64],
    config: &TrainConfig,
    index_offset: usize,
) -> Result<Vec<MlpParams>, EnsembleError> {
    let xs = standardizer.apply_all(train_set);
    let ys: Vec<f64> = train_set.samples.iter().map(|s| s.label as f64).collect();
    seeds
        .par_iter()
        .enumerate()
        .map(|(i, &seed)| {
            log::debug!("training member {} (seed {seed})", i + index_offset);
            mlp::train(&config.with_seed(seed), &xs, &ys)
                .map(|out| out.params)
                .map_err(|source| EnsembleError::Member {
                    index: i + index_offset,
                    source,
                })
        })
        .collect()
}

/// Train `m` members on the full training set; member `i` uses seed
/// `base_seed ^ i` for both initialization and shuffling.
pub fn train_ensemble(
    train_set: &Dataset,
    m: usize,
    base_seed: u64,
    config: &TrainConfig,
) -> Result<Ensemble, EnsembleError> {
    if m < 2 {
        return Err(EnsembleError::TooFewMembers(m));
    }
    let seeds: Vec<u64> = (0..m).map(|i| member_seed(base_seed, i)).collect();
    train_ensemble_with_seeds(train_set, &seeds, config)
}

/// Train one member per explicit seed.
pub fn train_ensemble_with_seeds(
    train_set: &Dataset,
    seeds: &[u64],
    config: &TrainConfig,
) -> Result<Ensemble, EnsembleError> {
    if seeds.len() < 2 {
        return Err(EnsembleError::TooFewMembers(seeds.len()));
    }
    config
        .validate()
        .map_err(|source| EnsembleError::Member { index: 0, source })?;
    let standardizer = Standardizer::fit(train_set)?;
    let members = train_members(train_set, &standardizer, seeds, config, 0)?;
    Ensemble::new(members, standardizer, seeds.to_vec(), config.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::LabeledSample;

    fn unit_standardizer() -> Standardizer {
        Standardizer {
            mean: [0.0; N_FEATURES],
            std: [1.0; N_FEATURES],
        }
    }

    fn constant_member(logit: f64) -> MlpParams {
        let mut p = MlpParams::zeros();
        p.b2 = logit;
        p
    }

    fn fixed(members: Vec<MlpParams>) -> Ensemble {
        let seeds = (0..members.len() as u64).collect();
        Ensemble::new(members, unit_standardizer(), seeds, TrainConfig::default()).unwrap()
    }

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    #[test]
    fn two_point_formula() {
        let s = stats_from_probabilities(&[0.2, 0.4]);
        assert!((s.mu - 0.3).abs() < 1e-15);
        assert!((s.sigma2 - 0.02).abs() < 1e-15);
        let e = fixed(vec![
            constant_member(logit(0.2)),
            constant_member(logit(0.4)),
        ]);
        let s = e.stats(&FeatureVector([0.0; N_FEATURES]));
        assert!((s.mu - 0.3).abs() < 1e-12);
        assert!((s.sigma2 - 0.02).abs() < 1e-12);
    }

    #[test]
    fn identical_members_have_zero_variance() {
        let p = MlpParams::init(3, 0.5);
        let e = fixed(vec![p.clone(), p.clone(), p.clone()]);
        let x = FeatureVector([1.0; N_FEATURES]);
        let s = e.stats(&x);
        assert_eq!(s.sigma2, 0.0);
        assert_eq!(s.mu, p.predict_proba(&x.0));
        assert!(e.classify(&x, 1e-9).is_confident());
    }

    #[test]
    fn threshold_is_strict() {
        let s = PredictionStats {
            mu: 0.4,
            sigma2: 1e-3,
        };
        assert!(label_for(s, 1e-3).is_confident());
        let s = PredictionStats {
            mu: 0.4,
            sigma2: 1.5e-3,
        };
        assert!(!label_for(s, 1e-3).is_confident());
    }

    #[test]
    fn too_few_members() {
        assert!(matches!(
            Ensemble::new(
                vec![MlpParams::zeros()],
                unit_standardizer(),
                vec![0],
                TrainConfig::default()
            ),
            Err(EnsembleError::TooFewMembers(1))
        ));
    }

    #[test]
    fn empty_split() {
        let e = fixed(vec![MlpParams::zeros(), MlpParams::zeros()]);
        let (c, u) = e.split_by_confidence(&Dataset::new(vec![], Provenance::Raw), 1e-3);
        assert!(c.is_empty() && u.is_empty());
    }

    #[test]
    fn forced_identical_seeds_give_identical_members() {
        let samples = (0..40)
            .map(|i| LabeledSample {
                id: i,
                features: FeatureVector(std::array::from_fn(|j| ((i * 7 + j as u64) % 11) as f64)),
                label: (i % 3 == 0) as u8,
            })
            .collect();
        let ds = Dataset::new(samples, Provenance::Train);
        let config = TrainConfig {
            epochs: 3,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let e = train_ensemble_with_seeds(&ds, &[5, 5], &config).unwrap();
        assert_eq!(e.members[0], e.members[1]);
        assert!(e.stats_all(&ds).iter().all(|s| s.sigma2 == 0.0));

        let a = train_ensemble(&ds, 3, 17, &config).unwrap();
        let b = train_ensemble(&ds, 3, 17, &config).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.members[0], a.members[1]);
        assert_eq!(a.seeds, vec![17, 16, 19]);

        let mut c = train_ensemble(&ds, 2, 17, &config).unwrap();
        c.extend(&ds, 17, 3).unwrap();
        assert_eq!(c, a);
    }
}
