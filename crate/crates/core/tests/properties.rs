use std::sync::OnceLock;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use twostage::bound::{candidate_grid, BoundSearch, BoundStatus, MonotoneSpec};
use twostage::data::{
    split_train_test, Dataset, FeatureBounds, LabeledSample, Provenance, Standardizer,
};
use twostage::ensemble::{stats_from_probabilities, train_ensemble, Ensemble};
use twostage::experiment::auc;
use twostage::mlp::{loss_and_gradient, MlpParams, TrainConfig, N_PARAMS};
use twostage::sensitivity::{feature_importance, SensitivityMode};
use twostage::surrogate::generate_complete;
use twostage::{FeatureVector, PredictionStats, N_FEATURES};

const H: f64 = 1e-5;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn dataset(seed: u64, rows: usize) -> Dataset {
    Dataset::new(
        generate_complete(seed, rows)
            .into_iter()
            .enumerate()
            .map(|(i, r)| LabeledSample {
                id: i as u64 + 1,
                features: FeatureVector(r.features),
                label: r.label,
            })
            .collect(),
        Provenance::Raw,
    )
}

struct Fixture {
    data: Dataset,
    train: Dataset,
    ensemble: Ensemble,
    bounds: FeatureBounds,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let data = dataset(7, 6000);
        let (train, _) = split_train_test(&data, 0.75, 3).unwrap();
        let config = TrainConfig {
            epochs: 15,
            ..TrainConfig::default()
        };
        let ensemble = train_ensemble(&train, 5, 11, &config).unwrap();
        let bounds = FeatureBounds::from_dataset(&train).unwrap();
        Fixture {
            data,
            train,
            ensemble,
            bounds,
        }
    })
}

#[test]
fn parameter_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let mut worst: f64 = 0.0;
    for draw in 0..100 {
        let params = MlpParams::init(draw, 1.5);
        let x: [f64; N_FEATURES] = std::array::from_fn(|_| rng.random_range(-2.0..2.0));
        let y = rng.random_range(0..2) as f64;
        let (_, grad) = loss_and_gradient(&params, &[x], &[y]).unwrap();
        let flat = params.to_flat();
        let g = grad.to_flat();
        for k in 0..N_PARAMS {
            let mut up = flat;
            let mut down = flat;
            up[k] += H;
            down[k] -= H;
            let lu = loss_and_gradient(&MlpParams::from_flat(&up), &[x], &[y])
                .unwrap()
                .0;
            let ld = loss_and_gradient(&MlpParams::from_flat(&down), &[x], &[y])
                .unwrap()
                .0;
            worst = worst.max(rel_err(g[k], (lu - ld) / (2.0 * H)));
        }
    }
    assert!(worst < 1e-5, "worst relative error {worst}");
}

#[test]
fn input_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for draw in 0..100 {
        let params = MlpParams::init(1000 + draw, 1.5);
        let x: [f64; N_FEATURES] = std::array::from_fn(|_| rng.random_range(-2.0..2.0));
        let g = params.input_gradient(&x);
        for j in 0..N_FEATURES {
            let mut up = x;
            let mut down = x;
            up[j] += H;
            down[j] -= H;
            let fd = (params.forward(&up) - params.forward(&down)) / (2.0 * H);
            worst = worst.max(rel_err(g[j], fd));
        }
    }
    assert!(worst < 1e-5, "worst relative error {worst}");
}

fn brute_force(ensemble: &Ensemble, x: &FeatureVector) -> PredictionStats {
    let z = ensemble.standardizer.apply(x);
    let probs: Vec<f64> = ensemble
        .members
        .iter()
        .map(|m| m.predict_proba(&z))
        .collect();
    let m = probs.len() as f64;
    let mu = probs.iter().sum::<f64>() / m;
    let sigma2 = probs.iter().map(|p| (p - mu) * (p - mu)).sum::<f64>() / (m - 1.0);
    PredictionStats { mu, sigma2 }
}

#[test]
fn ensemble_moments_match_brute_force() {
    let f = fixture();
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    for i in 0..1000 {
        let x = if i % 2 == 0 {
            f.data.samples[rng.random_range(0..f.data.len())].features
        } else {
            FeatureVector(std::array::from_fn(|j| {
                rng.random_range(f.bounds.min[j]..=f.bounds.max[j])
            }))
        };
        let fast = f.ensemble.stats(&x);
        let slow = brute_force(&f.ensemble, &x);
        assert!((fast.mu - slow.mu).abs() < 1e-12);
        assert!((fast.sigma2 - slow.sigma2).abs() < 1e-12);
    }
}

#[test]
fn unconfident_sets_shrink_as_epsilon_grows() {
    let f = fixture();
    let ladder = [2.5e-4, 5e-4, 1e-3, 2e-3, 4e-3];
    let ids = |eps: f64| -> Vec<u64> {
        let (_, u) = f.ensemble.split_by_confidence(&f.data, eps);
        u.samples.iter().map(|s| s.id).collect()
    };
    let sets: Vec<Vec<u64>> = ladder.iter().map(|&e| ids(e)).collect();
    for w in sets.windows(2) {
        assert!(w[1].iter().all(|id| w[0].contains(id)));
        assert!(w[1].len() <= w[0].len());
    }
}

#[test]
fn standardized_training_set_is_centered() {
    let f = fixture();
    let st = Standardizer::fit(&f.train).unwrap();
    let zs = st.apply_all(&f.train);
    let n = zs.len() as f64;
    for j in 0..N_FEATURES {
        let mean = zs.iter().map(|z| z[j]).sum::<f64>() / n;
        let var = zs.iter().map(|z| (z[j] - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 1e-9, "feature {j} mean {mean}");
        assert!(
            (var.sqrt() - 1.0).abs() < 1e-9,
            "feature {j} std {}",
            var.sqrt()
        );
    }
}

/// Re-enumerate the whole grid with direct ensemble evaluation.
fn exhaustive_best(
    search: &BoundSearch<'_>,
    x: &FeatureVector,
) -> Option<(FeatureVector, PredictionStats)> {
    let grid = candidate_grid(x, search.spec, search.bounds);
    let mut best: Option<(FeatureVector, PredictionStats)> = None;
    for p in grid.points() {
        let s = search.ensemble.stats(&p);
        if !(s.sigma2 < search.epsilon) {
            continue;
        }
        let better = match &best {
            None => true,
            Some((bp, bs)) => {
                s.mu > bs.mu
                    || (s.mu == bs.mu
                        && (search.distance(x, &p), p.0)
                            .partial_cmp(&(search.distance(x, bp), bp.0))
                            == Some(std::cmp::Ordering::Less))
            }
        };
        if better {
            best = Some((p, s));
        }
    }
    best
}

#[test]
fn witnesses_are_valid_and_grid_optimal() {
    let f = fixture();
    let spec = MonotoneSpec::default();
    let eps = 1e-3;
    let search = BoundSearch::new(&f.ensemble, &spec, &f.bounds, eps);
    let (_, unconfident) = f.ensemble.split_by_confidence(&f.data, eps);
    let points: Vec<FeatureVector> = unconfident
        .samples
        .iter()
        .map(|s| s.features)
        .filter(|x| candidate_grid(x, &spec, &f.bounds).len() <= 1 << 16)
        .take(50)
        .collect();
    assert!(points.len() >= 10, "only {} usable points", points.len());
    for x in &points {
        let result = search.lower_bound(x);
        let expected = exhaustive_best(&search, x);
        match (result.status, expected) {
            (BoundStatus::Infeasible, None) => {}
            (BoundStatus::Feasible(w), Some((p, s))) => {
                assert_eq!(w.point, p);
                assert!((w.stats.mu - s.mu).abs() < 1e-12);
                assert!(w.stats.sigma2 < eps);
                for j in 0..N_FEATURES {
                    if spec.alpha().contains(&j) {
                        assert!(w.point[j] <= x[j].max(f.bounds.min[j]));
                    } else {
                        assert_eq!(w.point[j], x[j]);
                    }
                }
            }
            (got, want) => panic!("search {got:?} vs exhaustive {want:?}"),
        }
    }
}

#[test]
fn importance_invariances() {
    let f = fixture();
    let base = feature_importance(&f.ensemble, &f.data, SensitivityMode::Absolute).unwrap();
    let mut reversed = f.ensemble.clone();
    reversed.members.reverse();
    let r = feature_importance(&reversed, &f.data, SensitivityMode::Absolute).unwrap();
    let doubled = Dataset::new(
        f.data
            .samples
            .iter()
            .flat_map(|s| [s.clone(), s.clone()])
            .collect(),
        Provenance::Raw,
    );
    let d = feature_importance(&f.ensemble, &doubled, SensitivityMode::Absolute).unwrap();
    assert!((base.0.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    for j in 0..N_FEATURES {
        assert!((base.0[j] - r.0[j]).abs() < 1e-12);
        assert!((base.0[j] - d.0[j]).abs() < 1e-12);
    }
}

fn labels_and_scores() -> impl Strategy<Value = (Vec<u8>, Vec<f64>)> {
    (2usize..60).prop_flat_map(|n| {
        (
            prop::collection::vec(0u8..2, n)
                .prop_filter("both classes", |l| l.contains(&0) && l.contains(&1)),
            prop::collection::vec(-5.0f64..5.0, n),
        )
    })
}

proptest! {
    #[test]
    fn auc_is_rank_based((labels, scores) in labels_and_scores()) {
        let a = auc(&scores, &labels).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        let squashed: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
        prop_assert!((auc(&squashed, &labels).unwrap() - a).abs() < 1e-12);
        let flipped: Vec<u8> = labels.iter().map(|l| 1 - l).collect();
        prop_assert!((auc(&scores, &flipped).unwrap() - (1.0 - a)).abs() < 1e-12);
        let negated: Vec<f64> = scores.iter().map(|s| -s).collect();
        prop_assert!((auc(&negated, &labels).unwrap() - (1.0 - a)).abs() < 1e-12);
        let mut idx: Vec<usize> = (0..labels.len()).collect();
        idx.reverse();
        let ps: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
        let pl: Vec<u8> = idx.iter().map(|&i| labels[i]).collect();
        prop_assert!((auc(&ps, &pl).unwrap() - a).abs() < 1e-12);
    }

    #[test]
    fn probabilities_stay_in_unit_interval(
        seed in any::<u64>(),
        scale in 0.0f64..50.0,
        x in prop::array::uniform10(-1e3f64..1e3),
    ) {
        let p = MlpParams::init(seed, scale).predict_proba(&x);
        prop_assert!((0.0..=1.0).contains(&p));
    }

    #[test]
    fn variance_is_nonnegative_and_shift_exact(probs in prop::collection::vec(0.0f64..1.0, 2..12)) {
        let s = stats_from_probabilities(&probs);
        prop_assert!(s.sigma2 >= 0.0);
        let m = probs.len() as f64;
        let mu = probs.iter().sum::<f64>() / m;
        let var = probs.iter().map(|p| (p - mu) * (p - mu)).sum::<f64>() / (m - 1.0);
        prop_assert!((s.mu - mu).abs() < 1e-12);
        prop_assert!((s.sigma2 - var).abs() < 1e-12);
    }

    #[test]
    fn split_partitions_rows(n in 2usize..300, fraction in 0.05f64..0.95, seed in any::<u64>()) {
        let ds = Dataset::new(
            (0..n as u64)
                .map(|i| LabeledSample { id: i, features: FeatureVector([i as f64; N_FEATURES]), label: (i % 2) as u8 })
                .collect(),
            Provenance::Raw,
        );
        let (train, test) = split_train_test(&ds, fraction, seed).unwrap();
        prop_assert_eq!(train.len(), ((n as f64) * fraction + 0.5).floor() as usize);
        prop_assert_eq!(train.len() + test.len(), n);
        let mut ids: Vec<u64> = train.samples.iter().chain(&test.samples).map(|s| s.id).collect();
        prop_assert!(train.samples.windows(2).all(|w| w[0].id < w[1].id));
        ids.sort_unstable();
        prop_assert_eq!(ids, (0..n as u64).collect::<Vec<_>>());
    }
}
