//! Synthetic stand-in for the public credit-scoring table.
//!
//! Marginals follow the published summary statistics of the public training
//! file: heavy-tailed utilization, debt ratio and income; zero-inflated
//! delinquency counts with rare long tails; the `96`/`98` sentinel codes that
//! appear jointly in all three delinquency columns; and missing income and
//! dependents cells. Dependence comes from a Gaussian copula driven by a
//! latent risk factor, and labels come from a logistic risk model dominated
//! by the delinquency history. Output is deterministic per seed.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::function::erf::erfc;

use crate::data::{DataError, FEATURE_COLUMNS, LABEL_COLUMN, N_FEATURES};

#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateConfig {
    pub seed: u64,
    /// Rows with every field present.
    pub complete_rows: usize,
    /// Rows with a missing monthly income (dependents present).
    pub missing_income_rows: usize,
    /// Rows with both income and dependents missing.
    pub missing_both_rows: usize,
}

impl Default for SurrogateConfig {
    /// Row counts of the public training file: 150,000 rows of which 120,269
    /// are complete.
    fn default() -> Self {
        Self {
            seed: 2011,
            complete_rows: 120_269,
            missing_income_rows: 29_731 - 3_924,
            missing_both_rows: 3_924,
        }
    }
}

impl SurrogateConfig {
    pub fn complete_only(seed: u64, rows: usize) -> Self {
        Self {
            seed,
            complete_rows: rows,
            missing_income_rows: 0,
            missing_both_rows: 0,
        }
    }

    pub fn total_rows(&self) -> usize {
        self.complete_rows + self.missing_income_rows + self.missing_both_rows
    }
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Piecewise quantile function through `(p, value)` knots; interpolation is
/// geometric between positive values and linear otherwise.
struct Quantiles(&'static [(f64, f64)]);

impl Quantiles {
    fn at(&self, u: f64) -> f64 {
        let knots = self.0;
        for w in knots.windows(2) {
            let (p0, v0) = w[0];
            let (p1, v1) = w[1];
            if u == p1 {
                return v1;
            }
            if u < p1 {
                let t = if p1 > p0 { (u - p0) / (p1 - p0) } else { 1.0 };
                return if v0 > 0.0 && v1 > 0.0 {
                    v0 * (v1 / v0).powf(t)
                } else {
                    v0 + (v1 - v0) * t
                };
            }
        }
        knots[knots.len() - 1].1
    }
}

const UTILIZATION: Quantiles = Quantiles(&[
    (0.0, 0.0),
    (0.07, 0.0),
    (0.10, 0.003),
    (0.25, 0.03),
    (0.50, 0.154),
    (0.75, 0.56),
    (0.90, 0.98),
    (0.95, 1.0),
    (0.985, 1.09),
    (0.997, 1.6),
    (0.998, 3.0),
    (0.9985, 100.0),
    (0.9998, 1500.0),
    (1.0, 50708.0),
]);

const AGE: Quantiles = Quantiles(&[
    (0.0, 21.0),
    (0.01, 24.0),
    (0.10, 33.0),
    (0.25, 41.0),
    (0.50, 52.0),
    (0.75, 62.0),
    (0.90, 70.0),
    (0.99, 86.0),
    (1.0, 103.0),
]);

const DEBT_RATIO: Quantiles = Quantiles(&[
    (0.0, 0.0),
    (0.01, 0.0),
    (0.05, 0.03),
    (0.25, 0.143),
    (0.50, 0.296),
    (0.75, 0.482),
    (0.90, 0.75),
    (0.95, 1.0),
    (0.985, 2.5),
    (0.995, 100.0),
    (0.9995, 2000.0),
    (1.0, 61106.0),
]);

const INCOME: Quantiles = Quantiles(&[
    (0.0, 0.0),
    (0.014, 0.0),
    (0.02, 600.0),
    (0.10, 2005.0),
    (0.25, 3400.0),
    (0.50, 5400.0),
    (0.75, 8249.0),
    (0.90, 11666.0),
    (0.95, 14587.0),
    (0.99, 25000.0),
    (0.999, 60000.0),
    (0.99999, 400000.0),
    (1.0, 3008750.0),
]);

// Value counts of the delinquency columns in the public file, sentinel codes
// excluded. Index = count.
const PAST_DUE_30_59: &[f64] = &[
    126018.0, 16033.0, 4598.0, 1754.0, 747.0, 342.0, 140.0, 54.0, 25.0, 12.0, 4.0, 1.0, 2.0, 1.0,
];
const PAST_DUE_90: &[f64] = &[
    141662.0, 5243.0, 1555.0, 667.0, 291.0, 131.0, 80.0, 38.0, 21.0, 19.0, 8.0, 5.0, 2.0, 4.0, 2.0,
    2.0, 0.0, 1.0,
];
const PAST_DUE_60_89: &[f64] = &[
    142396.0, 5731.0, 1118.0, 318.0, 105.0, 34.0, 16.0, 9.0, 2.0, 1.0, 0.0, 1.0,
];

/// Share of rows carrying a sentinel code in all delinquency columns.
const SENTINEL_RATE: f64 = 0.0018;

/// Discrete inverse CDF.
struct Pmf {
    cdf: Vec<f64>,
}

impl Pmf {
    fn from_weights(weights: &[f64]) -> Self {
        let total: f64 = weights.iter().sum();
        let mut acc = 0.0;
        let cdf = weights
            .iter()
            .map(|w| {
                acc += w / total;
                acc
            })
            .collect();
        Self { cdf }
    }

    /// Negative binomial with the given mean and variance, truncated at `max`.
    fn negative_binomial(mean: f64, var: f64, max: usize) -> Self {
        let r = mean * mean / (var - mean);
        let q = mean / (r + mean);
        let mut p = (1.0 - q).powf(r);
        let mut weights = Vec::with_capacity(max + 1);
        for k in 0..=max {
            weights.push(p);
            p *= (k as f64 + r) / (k as f64 + 1.0) * q;
        }
        Self::from_weights(&weights)
    }

    fn at(&self, u: f64) -> f64 {
        self.cdf
            .iter()
            .position(|&c| u <= c)
            .unwrap_or(self.cdf.len() - 1) as f64
    }
}

struct Marginals {
    past_due_30: Pmf,
    past_due_90: Pmf,
    past_due_60: Pmf,
    open_lines: Pmf,
    real_estate: Pmf,
    dependents: Pmf,
}

impl Marginals {
    fn new() -> Self {
        Self {
            past_due_30: Pmf::from_weights(PAST_DUE_30_59),
            past_due_90: Pmf::from_weights(PAST_DUE_90),
            past_due_60: Pmf::from_weights(PAST_DUE_60_89),
            open_lines: Pmf::negative_binomial(8.76, 26.7, 58),
            real_estate: Pmf::negative_binomial(1.05, 1.32, 54),
            dependents: Pmf::negative_binomial(0.85, 1.32, 20),
        }
    }
}

/// One generated applicant with its label.
#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateRow {
    pub label: u8,
    pub features: [f64; N_FEATURES],
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// `Phi(rho * z + sqrt(1 - rho^2) * e)` with fresh noise `e`.
fn correlated_uniform<R: Rng>(rng: &mut R, z: f64, rho: f64) -> f64 {
    let e = normal(rng);
    std_normal_cdf(rho * z + (1.0 - rho * rho).sqrt() * e).clamp(1e-15, 1.0 - 1e-15)
}

fn default_logit(x: &[f64; N_FEATURES]) -> f64 {
    let [util, age, pd30, debt, income, lines, pd90, estate, pd60, deps] = *x;
    -4.2 + 1.0 * pd30.ln_1p() + 1.9 * pd90.ln_1p() + 1.2 * pd60.ln_1p() + 1.6 * util.min(1.2)
        - 0.022 * (age - 51.0)
        - 0.25 * ((income + 500.0) / 5900.0).ln()
        + 0.07 * deps
        + 0.25 * debt.min(1.5)
        - 0.02 * (lines - 8.0)
        + 0.12 * (estate - 2.0).max(0.0)
}

fn sample_row<R: Rng>(rng: &mut R, marginals: &Marginals) -> SurrogateRow {
    let risk = normal(rng);
    let mut x = [0.0; N_FEATURES];

    x[1] = AGE.at(correlated_uniform(rng, risk, -0.3)).floor();
    x[3] = DEBT_RATIO.at(correlated_uniform(rng, risk, 0.1));
    x[4] = INCOME.at(correlated_uniform(rng, risk, -0.15)).round();
    x[9] = marginals.dependents.at(correlated_uniform(rng, risk, 0.1));

    let credit = normal(rng);
    x[5] = marginals
        .open_lines
        .at(correlated_uniform(rng, credit, 0.5));
    x[7] = marginals
        .real_estate
        .at(correlated_uniform(rng, credit, 0.5));
    if rng.random::<f64>() < 2e-4 {
        x[5] = 30.0 + (28.0 * rng.random::<f64>()).floor();
    }
    if rng.random::<f64>() < 3e-4 {
        x[7] = 8.0 + (46.0 * rng.random::<f64>().powi(2)).floor();
    }

    if rng.random::<f64>() < SENTINEL_RATE {
        let code = if rng.random::<f64>() < 0.02 {
            96.0
        } else {
            98.0
        };
        x[0] = 0.9999999;
        x[2] = code;
        x[6] = code;
        x[8] = code;
        x[5] = (3.0 * rng.random::<f64>()).floor();
        x[7] = 0.0;
        let label = (rng.random::<f64>() < 0.56) as u8;
        return SurrogateRow { label, features: x };
    }

    x[0] = UTILIZATION.at(correlated_uniform(rng, risk, 0.55));
    let delinquency = 0.8 * risk + 0.6 * normal(rng);
    x[2] = marginals
        .past_due_30
        .at(correlated_uniform(rng, delinquency, 0.85));
    x[6] = marginals
        .past_due_90
        .at(correlated_uniform(rng, delinquency, 0.85));
    x[8] = marginals
        .past_due_60
        .at(correlated_uniform(rng, delinquency, 0.85));

    let p = crate::mlp::sigmoid(default_logit(&x));
    let label = (rng.random::<f64>() < p) as u8;
    SurrogateRow { label, features: x }
}

/// Complete rows only, in generation order.
pub fn generate_complete(seed: u64, rows: usize) -> Vec<SurrogateRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let marginals = Marginals::new();
    (0..rows)
        .map(|_| sample_row(&mut rng, &marginals))
        .collect()
}

/// Write a raw CSV in the public file's layout, including `NA` cells for the
/// configured number of incomplete rows, interleaved at random positions.
pub fn write_csv<W: Write>(config: &SurrogateConfig, out: W) -> Result<(), DataError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let marginals = Marginals::new();
    let total = config.total_rows();
    // 0 = complete, 1 = income missing, 2 = income and dependents missing
    let mut kinds: Vec<u8> = std::iter::repeat_n(0u8, config.complete_rows)
        .chain(std::iter::repeat_n(1u8, config.missing_income_rows))
        .chain(std::iter::repeat_n(2u8, config.missing_both_rows))
        .collect();
    kinds.shuffle(&mut rng);

    let mut writer = csv::Writer::from_writer(out);
    let mut header = vec!["", LABEL_COLUMN];
    header.extend(FEATURE_COLUMNS);
    writer.write_record(&header)?;
    let mut record: Vec<String> = Vec::with_capacity(N_FEATURES + 2);
    for (i, kind) in kinds.into_iter().enumerate().take(total) {
        let row = sample_row(&mut rng, &marginals);
        record.clear();
        record.push((i + 1).to_string());
        record.push(row.label.to_string());
        for (j, v) in row.features.iter().enumerate() {
            let missing = (j == 4 && kind >= 1) || (j == 9 && kind == 2);
            record.push(if missing {
                "NA".to_string()
            } else {
                v.to_string()
            });
        }
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}
