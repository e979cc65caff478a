//! Stage two: lower bounds on the probability of default for unconfident
//! points.
//!
//! For features where risk is known to be non-decreasing, any confident point
//! `x'` with `x'_a <= x_a` on those features (and equal elsewhere) has a
//! predicted probability of default that lower-bounds the one at `x`. We search
//! a finite grid of such points for the largest ensemble mean subject to the
//! ensemble variance staying strictly below `epsilon`.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    Dataset, FeatureBounds, FeatureVector, FEATURE_NAMES, INTEGER_FEATURES, N_FEATURES,
};
use crate::ensemble::{stats_from_probabilities, Ensemble, PredictionStats};
use crate::mlp::{sigmoid, HIDDEN};

#[derive(Debug, Error, PartialEq)]
pub enum BoundError {
    #[error("monotone feature set is empty")]
    EmptyAlpha,
    #[error("feature index {0} is out of range")]
    BadIndex(usize),
    #[error("feature {0} listed twice in the monotone set")]
    Duplicate(&'static str),
    #[error("unknown feature name `{0}`")]
    UnknownFeature(String),
    #[error("grid resolution must be at least 2, got {0}")]
    Resolution(usize),
    #[error("undecided portion is undefined for an empty set")]
    EmptySet,
}

/// Features with a monotone-increasing effect on risk, and grid settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonotoneSpec {
    alpha: Vec<usize>,
    /// Number of evenly spaced levels for real-valued features.
    pub real_levels: usize,
    /// Maximum number of levels for integer features; longer ranges are
    /// subsampled evenly, keeping both endpoints.
    pub level_cap: usize,
}

impl MonotoneSpec {
    pub fn new(
        alpha: Vec<usize>,
        real_levels: usize,
        level_cap: usize,
    ) -> Result<Self, BoundError> {
        if alpha.is_empty() {
            return Err(BoundError::EmptyAlpha);
        }
        for (i, &j) in alpha.iter().enumerate() {
            if j >= N_FEATURES {
                return Err(BoundError::BadIndex(j));
            }
            if alpha[..i].contains(&j) {
                return Err(BoundError::Duplicate(FEATURE_NAMES[j]));
            }
        }
        if real_levels < 2 {
            return Err(BoundError::Resolution(real_levels));
        }
        if level_cap < 2 {
            return Err(BoundError::Resolution(level_cap));
        }
        Ok(Self {
            alpha,
            real_levels,
            level_cap,
        })
    }

    pub fn from_names<S: AsRef<str>>(
        names: &[S],
        real_levels: usize,
        level_cap: usize,
    ) -> Result<Self, BoundError> {
        let alpha = names
            .iter()
            .map(|n| {
                crate::data::feature_index(n.as_ref())
                    .ok_or_else(|| BoundError::UnknownFeature(n.as_ref().to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(alpha, real_levels, level_cap)
    }

    pub fn alpha(&self) -> &[usize] {
        &self.alpha
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.alpha.iter().map(|&j| FEATURE_NAMES[j]).collect()
    }
}

impl Default for MonotoneSpec {
    /// x3, x5, x7, x9 and x10 with 32 levels.
    fn default() -> Self {
        Self::new(vec![2, 4, 6, 8, 9], 32, 32).expect("valid default")
    }
}

/// Cartesian product of per-feature levels over the monotone set; all other
/// coordinates stay at the query's values.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateGrid {
    pub base: FeatureVector,
    pub features: Vec<usize>,
    /// Ascending levels per monotone feature, raw units.
    pub levels: Vec<Vec<f64>>,
}

impl CandidateGrid {
    pub fn len(&self) -> usize {
        self.levels.iter().map(Vec::len).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Level indices of candidate `index`; the last feature varies fastest.
    pub fn digits(&self, mut index: usize, out: &mut [usize]) {
        for a in (0..self.levels.len()).rev() {
            let n = self.levels[a].len();
            out[a] = index % n;
            index /= n;
        }
    }

    pub fn point(&self, index: usize) -> FeatureVector {
        let mut digits = vec![0; self.levels.len()];
        self.digits(index, &mut digits);
        let mut x = self.base;
        for (a, &d) in digits.iter().enumerate() {
            x[self.features[a]] = self.levels[a][d];
        }
        x
    }

    pub fn points(&self) -> impl Iterator<Item = FeatureVector> + '_ {
        (0..self.len()).map(|i| self.point(i))
    }
}

fn integer_levels(lo: f64, hi: f64, cap: usize) -> Vec<f64> {
    let lo = lo.ceil();
    let hi = hi.floor();
    if hi <= lo {
        return vec![hi];
    }
    let count = (hi - lo) as usize + 1;
    if count <= cap {
        return (0..count).map(|k| lo + k as f64).collect();
    }
    let span = hi - lo;
    (0..cap)
        .map(|k| lo + (k as f64 * span / (cap - 1) as f64).round())
        .collect()
}

fn real_levels(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if hi <= lo {
        return vec![hi];
    }
    (0..n)
        .map(|k| {
            if k == n - 1 {
                hi
            } else {
                lo + (hi - lo) * k as f64 / (n - 1) as f64
            }
        })
        .collect()
}

/// Build the search grid for `x`. Each monotone feature ranges over
/// `[bounds.min, min(x, bounds.max)]`, so the query itself is a member
/// whenever it lies inside the training bounds.
pub fn candidate_grid(
    x: &FeatureVector,
    spec: &MonotoneSpec,
    bounds: &FeatureBounds,
) -> CandidateGrid {
    let mut levels = Vec::with_capacity(spec.alpha.len());
    for &j in &spec.alpha {
        let lo = bounds.min[j];
        let hi = x[j].min(bounds.max[j]);
        let feature_levels = if x[j] < lo {
            log::warn!(
                "{} = {} lies below the training minimum {}; holding it fixed",
                FEATURE_NAMES[j],
                x[j],
                lo
            );
            vec![x[j]]
        } else if INTEGER_FEATURES[j] {
            integer_levels(lo, hi, spec.level_cap)
        } else {
            real_levels(lo, hi, spec.real_levels.min(spec.level_cap))
        };
        levels.push(feature_levels);
    }
    CandidateGrid {
        base: *x,
        features: spec.alpha.clone(),
        levels,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub point: FeatureVector,
    pub stats: PredictionStats,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BoundStatus {
    Feasible(Witness),
    Infeasible,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundResult {
    pub status: BoundStatus,
    pub candidates_evaluated: usize,
}

impl BoundResult {
    pub fn witness(&self) -> Option<&Witness> {
        match &self.status {
            BoundStatus::Feasible(w) => Some(w),
            BoundStatus::Infeasible => None,
        }
    }

    pub fn lower_bound(&self) -> Option<f64> {
        self.witness().map(|w| w.stats.mu)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UndecidedReason {
    Infeasible,
    BoundBelowTau,
}

impl std::fmt::Display for UndecidedReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            UndecidedReason::Infeasible => "infeasible",
            UndecidedReason::BoundBelowTau => "bound-below-tau",
        })
    }
}

/// Routing of one applicant through both stages. A passing bound always
/// means reject; bounds are never used to approve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DecisionOutcome {
    Confident {
        stats: PredictionStats,
    },
    DecidedByBound {
        stats: PredictionStats,
        witness: Witness,
    },
    Undecided {
        stats: PredictionStats,
        reason: UndecidedReason,
        witness: Option<Witness>,
    },
}

impl DecisionOutcome {
    pub fn stats(&self) -> PredictionStats {
        match *self {
            DecisionOutcome::Confident { stats }
            | DecisionOutcome::DecidedByBound { stats, .. }
            | DecisionOutcome::Undecided { stats, .. } => stats,
        }
    }

    pub fn is_undecided(&self) -> bool {
        matches!(self, DecisionOutcome::Undecided { .. })
    }

    pub fn label(&self) -> &'static str {
        match self {
            DecisionOutcome::Confident { .. } => "confident",
            DecisionOutcome::DecidedByBound { .. } => "decided-by-bound",
            DecisionOutcome::Undecided { .. } => "undecided",
        }
    }
}

/// Route an unconfident point given its already computed bound.
pub fn route_with_bound(stats: PredictionStats, bound: &BoundResult, tau: f64) -> DecisionOutcome {
    match bound.status {
        BoundStatus::Feasible(witness) if witness.stats.mu > tau => {
            DecisionOutcome::DecidedByBound { stats, witness }
        }
        BoundStatus::Feasible(witness) => DecisionOutcome::Undecided {
            stats,
            reason: UndecidedReason::BoundBelowTau,
            witness: Some(witness),
        },
        BoundStatus::Infeasible => DecisionOutcome::Undecided {
            stats,
            reason: UndecidedReason::Infeasible,
            witness: None,
        },
    }
}

#[derive(Clone, Copy, Debug)]
struct Scored {
    index: usize,
    mu: f64,
    sigma2: f64,
}

/// Mean-variance search over an ensemble with fixed monotone spec and bounds.
#[derive(Clone, Debug)]
pub struct BoundSearch<'a> {
    pub ensemble: &'a Ensemble,
    pub spec: &'a MonotoneSpec,
    pub bounds: &'a FeatureBounds,
    pub epsilon: f64,
}

impl<'a> BoundSearch<'a> {
    pub fn new(
        ensemble: &'a Ensemble,
        spec: &'a MonotoneSpec,
        bounds: &'a FeatureBounds,
        epsilon: f64,
    ) -> Self {
        Self {
            ensemble,
            spec,
            bounds,
            epsilon,
        }
    }

    /// Maximize the ensemble mean over the grid subject to `sigma2 < epsilon`.
    ///
    /// Ties in the mean go to the candidate closest to `x` in standardized L1
    /// distance over the monotone features, then to the lexicographically
    /// smallest coordinates, so the result does not depend on evaluation order.
    pub fn lower_bound(&self, x: &FeatureVector) -> BoundResult {
        let grid = candidate_grid(x, self.spec, self.bounds);
        let n = grid.len();
        let eval = GridEvaluator::new(self.ensemble, &grid);
        let best = (0..n)
            .into_par_iter()
            .with_min_len(1024)
            .map_init(
                || {
                    (
                        vec![0usize; grid.levels.len()],
                        vec![0.0; self.ensemble.m()],
                    )
                },
                |(digits, probs), index| {
                    grid.digits(index, digits);
                    let stats = eval.stats(digits, probs);
                    Scored {
                        index,
                        mu: stats.mu,
                        sigma2: stats.sigma2,
                    }
                },
            )
            .filter(|s| s.sigma2 < self.epsilon)
            .reduce_with(|a, b| {
                if self.compare(&grid, x, &a, &b) == Ordering::Less {
                    b
                } else {
                    a
                }
            });
        let status = match best {
            Some(s) => BoundStatus::Feasible(Witness {
                point: grid.point(s.index),
                stats: PredictionStats {
                    mu: s.mu,
                    sigma2: s.sigma2,
                },
            }),
            None => BoundStatus::Infeasible,
        };
        BoundResult {
            status,
            candidates_evaluated: n,
        }
    }

    /// `Greater` when `a` is the better witness.
    fn compare(&self, grid: &CandidateGrid, x: &FeatureVector, a: &Scored, b: &Scored) -> Ordering {
        match a.mu.partial_cmp(&b.mu).unwrap_or(Ordering::Equal) {
            Ordering::Equal => {}
            other => return other,
        }
        let pa = grid.point(a.index);
        let pb = grid.point(b.index);
        let da = self.distance(x, &pa);
        let db = self.distance(x, &pb);
        match db.partial_cmp(&da).unwrap_or(Ordering::Equal) {
            Ordering::Equal => {}
            other => return other,
        }
        for &j in &grid.features {
            match pb[j].partial_cmp(&pa[j]).unwrap_or(Ordering::Equal) {
                Ordering::Equal => {}
                other => return other,
            }
        }
        Ordering::Equal
    }

    /// L1 distance over the monotone features in standardized units.
    pub fn distance(&self, x: &FeatureVector, y: &FeatureVector) -> f64 {
        self.spec
            .alpha
            .iter()
            .map(|&j| (x[j] - y[j]).abs() / self.ensemble.standardizer.std[j])
            .sum()
    }

    /// Full two-stage routing of one point.
    pub fn decide(&self, x: &FeatureVector, tau: f64) -> DecisionOutcome {
        let stats = self.ensemble.stats(x);
        if stats.sigma2 <= self.epsilon {
            return DecisionOutcome::Confident { stats };
        }
        route_with_bound(stats, &self.lower_bound(x), tau)
    }

    /// Fraction of `unconfident` routed to the undecided set at threshold `tau`.
    pub fn undecided_portion(&self, unconfident: &Dataset, tau: f64) -> Result<f64, BoundError> {
        if unconfident.is_empty() {
            return Err(BoundError::EmptySet);
        }
        let undecided = unconfident
            .samples
            .iter()
            .filter(|s| self.decide(&s.features, tau).is_undecided())
            .count();
        Ok(undecided as f64 / unconfident.len() as f64)
    }
}

/// Evaluates ensemble statistics on grid candidates from precomputed hidden
/// pre-activation contributions of each monotone level.
struct GridEvaluator<'e> {
    ensemble: &'e Ensemble,
    /// `[member][k]` pre-activation from bias and non-grid features.
    base: Vec<[f64; HIDDEN]>,
    /// `[feature][level][member][k]` contribution of each level.
    contrib: Vec<Vec<Vec<[f64; HIDDEN]>>>,
}

impl<'e> GridEvaluator<'e> {
    fn new(ensemble: &'e Ensemble, grid: &CandidateGrid) -> Self {
        let st = &ensemble.standardizer;
        let z = st.apply(&grid.base);
        let base = ensemble
            .members
            .iter()
            .map(|p| {
                std::array::from_fn(|k| {
                    let mut pre = p.b1[k];
                    for j in 0..N_FEATURES {
                        if !grid.features.contains(&j) {
                            pre += p.w1[k][j] * z[j];
                        }
                    }
                    pre
                })
            })
            .collect();
        let contrib = grid
            .features
            .iter()
            .zip(&grid.levels)
            .map(|(&j, levels)| {
                levels
                    .iter()
                    .map(|&v| {
                        let zj = st.apply_feature(j, v);
                        ensemble
                            .members
                            .iter()
                            .map(|p| std::array::from_fn(|k| p.w1[k][j] * zj))
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Self {
            ensemble,
            base,
            contrib,
        }
    }

    fn stats(&self, digits: &[usize], probs: &mut [f64]) -> PredictionStats {
        for (i, p) in self.ensemble.members.iter().enumerate() {
            let mut pre = self.base[i];
            for (a, &d) in digits.iter().enumerate() {
                let c = &self.contrib[a][d][i];
                for k in 0..HIDDEN {
                    pre[k] += c[k];
                }
            }
            let mut logit = p.b2;
            for k in 0..HIDDEN {
                logit += p.w2[k] * sigmoid(pre[k]);
            }
            probs[i] = sigmoid(logit);
        }
        stats_from_probabilities(probs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Standardizer;
    use crate::mlp::{MlpParams, TrainConfig};

    fn bounds(max: f64) -> FeatureBounds {
        FeatureBounds {
            min: [0.0; N_FEATURES],
            max: [max; N_FEATURES],
        }
    }

    fn point(pairs: &[(usize, f64)]) -> FeatureVector {
        let mut x = FeatureVector([0.0; N_FEATURES]);
        for &(j, v) in pairs {
            x[j] = v;
        }
        x
    }

    #[test]
    fn spec_validation() {
        assert_eq!(
            MonotoneSpec::new(vec![], 32, 32),
            Err(BoundError::EmptyAlpha)
        );
        assert_eq!(
            MonotoneSpec::new(vec![10], 32, 32),
            Err(BoundError::BadIndex(10))
        );
        assert_eq!(
            MonotoneSpec::new(vec![2, 2], 32, 32),
            Err(BoundError::Duplicate("x3"))
        );
        assert_eq!(
            MonotoneSpec::default().names(),
            vec!["x3", "x5", "x7", "x9", "x10"]
        );
        assert_eq!(
            MonotoneSpec::from_names(&["x7", "NumberOfDependents"], 32, 32)
                .unwrap()
                .alpha(),
            &[6, 9]
        );
    }

    #[test]
    fn integer_range_grid() {
        let spec = MonotoneSpec::new(vec![6], 32, 32).unwrap();
        let g = candidate_grid(&point(&[(6, 15.0)]), &spec, &bounds(100.0));
        assert_eq!(g.len(), 16);
        assert_eq!(g.levels[0], (0..16).map(f64::from).collect::<Vec<_>>());
    }

    #[test]
    fn product_grid() {
        let spec = MonotoneSpec::new(vec![6, 8], 32, 32).unwrap();
        let x = point(&[(6, 2.0), (8, 1.0)]);
        let g = candidate_grid(&x, &spec, &bounds(100.0));
        assert_eq!(g.len(), 6);
        assert!(g.points().any(|p| p == x));
        for p in g.points() {
            assert!(p[6] <= 2.0 && p[8] <= 1.0);
            assert_eq!(p[0], x[0]);
        }
    }

    #[test]
    fn degenerate_box() {
        let spec = MonotoneSpec::default();
        let x = point(&[(1, 40.0)]);
        let g = candidate_grid(&x, &spec, &bounds(100.0));
        assert_eq!(g.len(), 1);
        assert_eq!(g.point(0), x);
    }

    #[test]
    fn capped_integer_levels_keep_endpoints() {
        let spec = MonotoneSpec::new(vec![6], 32, 32).unwrap();
        let g = candidate_grid(&point(&[(6, 98.0)]), &spec, &bounds(98.0));
        let levels = &g.levels[0];
        assert_eq!(levels.len(), 32);
        assert_eq!(levels[0], 0.0);
        assert_eq!(levels[31], 98.0);
        assert!(levels.windows(2).all(|w| w[0] < w[1]));
        assert!(levels.iter().all(|v| v.fract() == 0.0));
    }

    #[test]
    fn real_levels_span_range() {
        let spec = MonotoneSpec::new(vec![4], 32, 32).unwrap();
        let g = candidate_grid(&point(&[(4, 3000.0)]), &spec, &bounds(1e6));
        assert_eq!(g.levels[0].len(), 32);
        assert_eq!(g.levels[0][0], 0.0);
        assert_eq!(g.levels[0][31], 3000.0);
    }

    #[test]
    fn grid_respects_training_max() {
        let spec = MonotoneSpec::new(vec![6], 32, 32).unwrap();
        let g = candidate_grid(&point(&[(6, 15.0)]), &spec, &bounds(10.0));
        assert_eq!(*g.levels[0].last().unwrap(), 10.0);
        assert_eq!(g.len(), 11);
    }

    #[test]
    fn below_minimum_is_held_fixed() {
        let spec = MonotoneSpec::new(vec![6], 32, 32).unwrap();
        let mut b = bounds(10.0);
        b.min[6] = 2.0;
        let g = candidate_grid(&point(&[(6, 1.0)]), &spec, &b);
        assert_eq!(g.levels[0], vec![1.0]);
    }

    /// Members with non-negative weights along x7 so the mean increases in x7.
    fn monotone_ensemble(identical: bool) -> Ensemble {
        let make = |scale: f64| {
            let mut p = MlpParams::zeros();
            p.w1[0][6] = 0.8 * scale;
            p.w1[1][8] = 0.5;
            p.b1 = [-1.0, 0.2];
            p.w2 = [2.0, 1.0];
            p.b2 = -2.5 * scale;
            p
        };
        let members = if identical {
            vec![make(1.0), make(1.0), make(1.0)]
        } else {
            vec![make(1.0), make(1.3), make(0.7)]
        };
        Ensemble::new(
            members,
            Standardizer {
                mean: [0.0; N_FEATURES],
                std: [1.0; N_FEATURES],
            },
            vec![0, 1, 2],
            TrainConfig::default(),
        )
        .unwrap()
    }

    #[test]
    fn zero_variance_witness_is_query() {
        let e = monotone_ensemble(true);
        let spec = MonotoneSpec::new(vec![6, 8], 32, 32).unwrap();
        let b = bounds(20.0);
        let search = BoundSearch::new(&e, &spec, &b, 1e-3);
        let x = point(&[(6, 4.0), (8, 3.0)]);
        let res = search.lower_bound(&x);
        let w = res.witness().expect("feasible");
        assert_eq!(w.point, x);
        assert_eq!(res.candidates_evaluated, 20);
        // brute force agrees
        let best = candidate_grid(&x, &spec, &b)
            .points()
            .map(|p| e.stats(&p).mu)
            .fold(f64::MIN, f64::max);
        assert_eq!(best, w.stats.mu);
    }

    #[test]
    fn fast_evaluator_matches_direct_stats() {
        let e = monotone_ensemble(false);
        let spec = MonotoneSpec::new(vec![6, 8], 32, 32).unwrap();
        let b = bounds(20.0);
        let x = point(&[(6, 9.0), (8, 4.0), (0, 0.3)]);
        let grid = candidate_grid(&x, &spec, &b);
        let eval = GridEvaluator::new(&e, &grid);
        let mut digits = vec![0; 2];
        let mut probs = vec![0.0; 3];
        for i in 0..grid.len() {
            grid.digits(i, &mut digits);
            let fast = eval.stats(&digits, &mut probs);
            let direct = e.stats(&grid.point(i));
            assert!((fast.mu - direct.mu).abs() < 1e-12);
            assert!((fast.sigma2 - direct.sigma2).abs() < 1e-12);
        }
    }

    #[test]
    fn infeasible_when_every_candidate_is_uncertain() {
        let e = monotone_ensemble(false);
        let spec = MonotoneSpec::new(vec![6], 32, 32).unwrap();
        let b = bounds(20.0);
        let search = BoundSearch::new(&e, &spec, &b, 1e-12);
        let x = point(&[(6, 3.0)]);
        assert_eq!(search.lower_bound(&x).status, BoundStatus::Infeasible);
        match search.decide(&x, 0.5) {
            DecisionOutcome::Undecided { reason, .. } => {
                assert_eq!(reason, UndecidedReason::Infeasible)
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn routing_thresholds() {
        let stats = PredictionStats {
            mu: 0.3,
            sigma2: 2e-3,
        };
        let witness = Witness {
            point: point(&[]),
            stats: PredictionStats {
                mu: 0.6,
                sigma2: 1e-4,
            },
        };
        let bound = BoundResult {
            status: BoundStatus::Feasible(witness),
            candidates_evaluated: 1,
        };
        assert!(matches!(
            route_with_bound(stats, &bound, 0.5),
            DecisionOutcome::DecidedByBound { .. }
        ));
        assert!(matches!(
            route_with_bound(stats, &bound, 0.6),
            DecisionOutcome::Undecided {
                reason: UndecidedReason::BoundBelowTau,
                ..
            }
        ));
        assert!(!route_with_bound(stats, &bound, 1e-300).is_undecided());
    }

    #[test]
    fn confident_passthrough() {
        let e = monotone_ensemble(true);
        let spec = MonotoneSpec::default();
        let b = bounds(20.0);
        let search = BoundSearch::new(&e, &spec, &b, 1e-3);
        let x = point(&[]);
        match search.decide(&x, 0.5) {
            DecisionOutcome::Confident { stats } => assert_eq!(stats, e.stats(&x)),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(
            search.undecided_portion(&Dataset::new(vec![], crate::data::Provenance::Raw), 0.1),
            Err(BoundError::EmptySet)
        );
    }
}
