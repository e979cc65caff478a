//! A 10 -> 2 -> 1 feed-forward network with logistic hidden units and a
//! linear logit output, trained with binary cross-entropy.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::N_FEATURES;

pub const HIDDEN: usize = 2;

/// Total number of trainable parameters.
pub const N_PARAMS: usize = HIDDEN * N_FEATURES + HIDDEN + HIDDEN + 1;

/// Probabilities are clipped to `[PROB_CLIP, 1 - PROB_CLIP]` inside the log loss.
pub const PROB_CLIP: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum MlpError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("batch has {features} feature rows but {labels} labels")]
    LengthMismatch { features: usize, labels: usize },
    #[error("label {0} is not binary")]
    NonBinaryLabel(f64),
    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged {
        epoch: usize,
        step: usize,
        loss: f64,
    },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("expected {expected} parameters, found {found}")]
    Shape { expected: usize, found: usize },
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Network weights. Gradients share this layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    /// Hidden layer weights, one row per hidden unit.
    pub w1: [[f64; N_FEATURES]; HIDDEN],
    pub b1: [f64; HIDDEN],
    /// Output weights.
    pub w2: [f64; HIDDEN],
    pub b2: f64,
}

impl MlpParams {
    pub fn zeros() -> Self {
        Self {
            w1: [[0.0; N_FEATURES]; HIDDEN],
            b1: [0.0; HIDDEN],
            w2: [0.0; HIDDEN],
            b2: 0.0,
        }
    }

    /// Entries i.i.d. uniform on `[-init_scale, init_scale]`, drawn in flat order.
    pub fn init(seed: u64, init_scale: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init_from_rng(&mut rng, init_scale)
    }

    fn init_from_rng<R: Rng>(rng: &mut R, init_scale: f64) -> Self {
        let flat: [f64; N_PARAMS] =
            std::array::from_fn(|_| (2.0 * rng.random::<f64>() - 1.0) * init_scale);
        Self::from_flat(&flat)
    }

    pub fn to_flat(&self) -> [f64; N_PARAMS] {
        let mut out = [0.0; N_PARAMS];
        let mut i = 0;
        for row in &self.w1 {
            for &w in row {
                out[i] = w;
                i += 1;
            }
        }
        for &v in self.b1.iter().chain(&self.w2) {
            out[i] = v;
            i += 1;
        }
        out[i] = self.b2;
        out
    }

    pub fn from_flat(flat: &[f64; N_PARAMS]) -> Self {
        let mut p = Self::zeros();
        let mut it = flat.iter().copied();
        for row in &mut p.w1 {
            for w in row.iter_mut() {
                *w = it.next().unwrap();
            }
        }
        for v in p.b1.iter_mut().chain(p.w2.iter_mut()) {
            *v = it.next().unwrap();
        }
        p.b2 = it.next().unwrap();
        p
    }

    pub fn try_from_slice(flat: &[f64]) -> Result<Self, MlpError> {
        let arr: &[f64; N_PARAMS] = flat.try_into().map_err(|_| MlpError::Shape {
            expected: N_PARAMS,
            found: flat.len(),
        })?;
        Ok(Self::from_flat(arr))
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|v| v.is_finite())
    }

    /// Hidden activations for a standardized input.
    #[inline]
    pub fn hidden(&self, x: &[f64; N_FEATURES]) -> [f64; HIDDEN] {
        std::array::from_fn(|k| {
            let pre: f64 = self.b1[k] + self.w1[k].iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>();
            sigmoid(pre)
        })
    }

    /// Logit `f(x) = w2 . sigma(W1 x + b1) + b2`.
    #[inline]
    pub fn forward(&self, x: &[f64; N_FEATURES]) -> f64 {
        let a = self.hidden(x);
        self.b2 + self.w2[0] * a[0] + self.w2[1] * a[1]
    }

    /// Probability of default `g(f(x))`.
    #[inline]
    pub fn predict_proba(&self, x: &[f64; N_FEATURES]) -> f64 {
        sigmoid(self.forward(x))
    }

    /// Gradient of the logit with respect to the (standardized) input.
    pub fn input_gradient(&self, x: &[f64; N_FEATURES]) -> [f64; N_FEATURES] {
        let a = self.hidden(x);
        let dh: [f64; HIDDEN] = std::array::from_fn(|k| self.w2[k] * a[k] * (1.0 - a[k]));
        std::array::from_fn(|j| (0..HIDDEN).map(|k| dh[k] * self.w1[k][j]).sum())
    }

    /// Adds `scale * d(logit)/d(params)` and returns the sample's probability.
    #[inline]
    fn accumulate(&self, x: &[f64; N_FEATURES], y: f64, scale: f64, grad: &mut MlpParams) -> f64 {
        let a = self.hidden(x);
        let p = sigmoid(self.b2 + self.w2[0] * a[0] + self.w2[1] * a[1]);
        let df = (p - y) * scale;
        grad.b2 += df;
        for k in 0..HIDDEN {
            grad.w2[k] += df * a[k];
            let dh = df * self.w2[k] * a[k] * (1.0 - a[k]);
            grad.b1[k] += dh;
            for (g, xi) in grad.w1[k].iter_mut().zip(x) {
                *g += dh * xi;
            }
        }
        p
    }
}

fn log_loss(p: f64, y: f64) -> f64 {
    let p = p.clamp(PROB_CLIP, 1.0 - PROB_CLIP);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

fn check_batch(xs: &[[f64; N_FEATURES]], ys: &[f64]) -> Result<(), MlpError> {
    if xs.len() != ys.len() {
        return Err(MlpError::LengthMismatch {
            features: xs.len(),
            labels: ys.len(),
        });
    }
    if xs.is_empty() {
        return Err(MlpError::EmptyBatch);
    }
    if let Some(&y) = ys.iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(MlpError::NonBinaryLabel(y));
    }
    Ok(())
}

/// Mean binary cross-entropy over the batch and its exact gradient.
pub fn loss_and_gradient(
    params: &MlpParams,
    xs: &[[f64; N_FEATURES]],
    ys: &[f64],
) -> Result<(f64, MlpParams), MlpError> {
    check_batch(xs, ys)?;
    let scale = 1.0 / xs.len() as f64;
    let mut grad = MlpParams::zeros();
    let mut loss = 0.0;
    for (x, &y) in xs.iter().zip(ys) {
        let p = params.accumulate(x, y, scale, &mut grad);
        loss += log_loss(p, y);
    }
    Ok((loss * scale, grad))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd,
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub init_scale: f64,
    #[serde(with = "crate::format::u64_str")]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 256,
            learning_rate: 1e-2,
            optimizer: Optimizer::default(),
            init_scale: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), MlpError> {
        if self.epochs == 0 {
            return Err(MlpError::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(MlpError::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(MlpError::Config("learning_rate must be > 0".into()));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(MlpError::Config("init_scale must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: MlpParams,
    /// Mean training loss of each epoch, measured before each step's update.
    pub epoch_losses: Vec<f64>,
}

struct AdamState {
    m: [f64; N_PARAMS],
    v: [f64; N_PARAMS],
    t: i32,
}

/// Mini-batch training. One RNG seeded from `config.seed` draws the
/// initialization and then every epoch's shuffle.
pub fn train(
    config: &TrainConfig,
    xs: &[[f64; N_FEATURES]],
    ys: &[f64],
) -> Result<TrainOutcome, MlpError> {
    config.validate()?;
    check_batch(xs, ys)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = MlpParams::init_from_rng(&mut rng, config.init_scale);
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut adam = AdamState {
        m: [0.0; N_PARAMS],
        v: [0.0; N_PARAMS],
        t: 0,
    };
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut step = 0usize;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            let mut grad = MlpParams::zeros();
            let mut batch_loss = 0.0;
            for &i in batch {
                let p = params.accumulate(&xs[i], ys[i], scale, &mut grad);
                batch_loss += log_loss(p, ys[i]);
            }
            if !batch_loss.is_finite() {
                return Err(MlpError::Diverged {
                    epoch,
                    step,
                    loss: batch_loss * scale,
                });
            }
            epoch_loss += batch_loss;
            params = apply_update(config, &mut adam, &params, &grad);
            if !params.is_finite() {
                return Err(MlpError::Diverged {
                    epoch,
                    step,
                    loss: f64::NAN,
                });
            }
            step += 1;
        }
        epoch_losses.push(epoch_loss / xs.len() as f64);
    }
    Ok(TrainOutcome {
        params,
        epoch_losses,
    })
}

fn apply_update(
    config: &TrainConfig,
    adam: &mut AdamState,
    params: &MlpParams,
    grad: &MlpParams,
) -> MlpParams {
    let mut theta = params.to_flat();
    let g = grad.to_flat();
    let lr = config.learning_rate;
    match config.optimizer {
        Optimizer::Sgd => {
            for (t, gi) in theta.iter_mut().zip(g) {
                *t -= lr * gi;
            }
        }
        Optimizer::Adam { beta1, beta2, eps } => {
            adam.t += 1;
            let c1 = 1.0 - beta1.powi(adam.t);
            let c2 = 1.0 - beta2.powi(adam.t);
            for i in 0..N_PARAMS {
                adam.m[i] = beta1 * adam.m[i] + (1.0 - beta1) * g[i];
                adam.v[i] = beta2 * adam.v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = adam.m[i] / c1;
                let v_hat = adam.v[i] / c2;
                theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
    MlpParams::from_flat(&theta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_params(seed: u64) -> MlpParams {
        MlpParams::init(seed, 1.5)
    }

    fn random_input(rng: &mut ChaCha8Rng) -> [f64; N_FEATURES] {
        std::array::from_fn(|_| rng.random::<f64>() * 4.0 - 2.0)
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = MlpParams::init(11, 0.5);
        assert_eq!(a, MlpParams::init(11, 0.5));
        assert_ne!(a, MlpParams::init(12, 0.5));
        assert!(a.to_flat().iter().all(|v| v.abs() <= 0.5));
        assert_eq!(MlpParams::init(11, 0.0), MlpParams::zeros());
    }

    #[test]
    fn flat_round_trip() {
        let p = random_params(3);
        assert_eq!(MlpParams::from_flat(&p.to_flat()), p);
        assert!(matches!(
            MlpParams::try_from_slice(&[0.0; 3]),
            Err(MlpError::Shape { .. })
        ));
    }

    #[test]
    fn zero_and_constant_networks() {
        let x = [0.7; N_FEATURES];
        assert_eq!(MlpParams::zeros().forward(&x), 0.0);
        let mut p = MlpParams::zeros();
        p.w2 = [1.0, 1.0];
        assert_eq!(p.forward(&x), 1.0);
    }

    #[test]
    fn forward_matches_hand_written_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for s in 0..20 {
            let p = random_params(s);
            let x = random_input(&mut rng);
            let mut out = p.b2;
            for k in 0..HIDDEN {
                let mut z = p.b1[k];
                for j in 0..N_FEATURES {
                    z += p.w1[k][j] * x[j];
                }
                out += p.w2[k] / (1.0 + (-z).exp());
            }
            assert!((p.forward(&x) - out).abs() < 1e-12);
        }
    }

    #[test]
    fn sigmoid_closed_forms_and_saturation() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(3f64.ln()) - 0.75).abs() < 1e-15);
        let hi = sigmoid(750.0);
        let lo = sigmoid(-750.0);
        assert!(hi.is_finite() && hi <= 1.0 && hi > 1.0 - 1e-15);
        assert!(lo.is_finite() && lo >= 0.0 && lo < 1e-300);
        assert!(sigmoid(1e3).is_finite() && sigmoid(-1e3).is_finite());
    }

    #[test]
    fn zero_network_loss_is_ln2() {
        let (loss, _) =
            loss_and_gradient(&MlpParams::zeros(), &[[0.3; N_FEATURES]], &[1.0]).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn batch_errors() {
        let p = MlpParams::zeros();
        assert!(matches!(
            loss_and_gradient(&p, &[], &[]),
            Err(MlpError::EmptyBatch)
        ));
        assert!(matches!(
            loss_and_gradient(&p, &[[0.0; N_FEATURES]], &[0.5]),
            Err(MlpError::NonBinaryLabel(_))
        ));
        assert!(matches!(
            loss_and_gradient(&p, &[[0.0; N_FEATURES]], &[]),
            Err(MlpError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn duplicating_batch_is_invariant() {
        let p = random_params(8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xs: Vec<_> = (0..7).map(|_| random_input(&mut rng)).collect();
        let ys: Vec<f64> = (0..7).map(|i| (i % 2) as f64).collect();
        let (l1, g1) = loss_and_gradient(&p, &xs, &ys).unwrap();
        let xs2: Vec<_> = xs.iter().chain(&xs).copied().collect();
        let ys2: Vec<_> = ys.iter().chain(&ys).copied().collect();
        let (l2, g2) = loss_and_gradient(&p, &xs2, &ys2).unwrap();
        assert!((l1 - l2).abs() < 1e-14);
        for (a, b) in g1.to_flat().iter().zip(g2.to_flat()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn input_gradient_single_path() {
        let mut p = MlpParams::zeros();
        p.w1[0][0] = 1.0;
        p.w2 = [3.0, 0.0];
        let g = p.input_gradient(&[0.0; N_FEATURES]);
        assert_eq!(g[0], 0.75);
        assert!(g[1..].iter().all(|v| *v == 0.0));
        assert!(MlpParams::zeros()
            .input_gradient(&[1.0; N_FEATURES])
            .iter()
            .all(|v| *v == 0.0));
    }

    #[test]
    fn separable_toy_set_trains_to_low_loss() {
        let mut a = [0.0; N_FEATURES];
        let mut b = [0.0; N_FEATURES];
        a[0] = -1.0;
        b[0] = 1.0;
        let config = TrainConfig {
            epochs: 2000,
            batch_size: 2,
            learning_rate: 0.05,
            seed: 4,
            ..TrainConfig::default()
        };
        let out = train(&config, &[a, b], &[0.0, 1.0]).unwrap();
        let (loss, _) = loss_and_gradient(&out.params, &[a, b], &[0.0, 1.0]).unwrap();
        assert!(loss < 0.05, "loss {loss}");
        let again = train(&config, &[a, b], &[0.0, 1.0]).unwrap();
        assert_eq!(out.params, again.params);
    }

    #[test]
    fn divergence_is_reported() {
        let mut a = [0.0; N_FEATURES];
        a[3] = f64::NAN;
        let config = TrainConfig {
            epochs: 3,
            batch_size: 1,
            seed: 1,
            ..TrainConfig::default()
        };
        let err = train(&config, &[a, [0.0; N_FEATURES]], &[1.0, 0.0]).unwrap_err();
        assert!(matches!(err, MlpError::Diverged { epoch: 0, .. }), "{err}");
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
