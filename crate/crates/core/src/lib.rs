//! Two-stage confident prediction for credit scoring.
//!
//! Stage one trains a deep ensemble of tiny networks and splits applicants
//! into confident and unconfident sets by the ensemble variance. Stage two
//! searches, over features with a known monotone effect on default risk, for
//! a nearby confident point whose predicted probability of default is a
//! lower bound for the query. Points without a usable bound are left
//! undecided for human review.

pub mod bound;
pub mod data;
pub mod ensemble;
pub mod experiment;
pub mod format;
pub mod mlp;
pub mod seed;
pub mod sensitivity;
pub mod surrogate;

pub use bound::{
    BoundResult, BoundStatus, DecisionOutcome, MonotoneSpec, UndecidedReason, Witness,
};
pub use data::{
    Dataset, FeatureBounds, FeatureVector, LabeledSample, RawDataset, Standardizer, N_FEATURES,
};
pub use ensemble::{ConfidenceLabel, Ensemble, PredictionStats};
pub use experiment::{ExperimentConfig, ExperimentReport};
pub use mlp::{MlpParams, TrainConfig};
pub use sensitivity::ImportanceVector;
