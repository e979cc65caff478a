//! Feature schema, CSV ingestion, cleaning, splitting and standardization.

use std::fmt;
use std::io::{Read, Write};
use std::ops::{Index, IndexMut};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of explanatory features.
pub const N_FEATURES: usize = 10;

/// Name of the label column.
pub const LABEL_COLUMN: &str = "SeriousDlqin2yrs";

/// Feature columns in schema order (x1..x10).
pub const FEATURE_COLUMNS: [&str; N_FEATURES] = [
    "RevolvingUtilizationOfUnsecuredLines",
    "age",
    "NumberOfTime30-59DaysPastDueNotWorse",
    "DebtRatio",
    "MonthlyIncome",
    "NumberOfOpenCreditLinesAndLoans",
    "NumberOfTimes90DaysLate",
    "NumberRealEstateLoansOrLines",
    "NumberOfTime60-89DaysPastDueNotWorse",
    "NumberOfDependents",
];

/// Short names used in reports and configuration.
pub const FEATURE_NAMES: [&str; N_FEATURES] =
    ["x1", "x2", "x3", "x4", "x5", "x6", "x7", "x8", "x9", "x10"];

/// Which features are counts (or whole years) and must hold integer values.
pub const INTEGER_FEATURES: [bool; N_FEATURES] = [
    false, true, true, false, false, true, true, true, true, true,
];

/// Index of a feature from its short name (`"x7"`) or its column name.
pub fn feature_index(name: &str) -> Option<usize> {
    FEATURE_NAMES
        .iter()
        .position(|n| *n == name)
        .or_else(|| FEATURE_COLUMNS.iter().position(|c| *c == name))
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("schema error: missing column `{0}`")]
    MissingColumn(String),
    #[error("schema error: empty input, no header row")]
    NoHeader,
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset is empty after cleaning")]
    Empty,
    #[error("train fraction {0} must lie strictly between 0 and 1")]
    Fraction(f64),
    #[error("feature {0} is constant on the training set")]
    ConstantFeature(&'static str),
    #[error("cannot fit a standardizer on {0} samples")]
    TooFewSamples(usize),
}

/// One applicant's feature values in raw units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(pub [f64; N_FEATURES]);

impl FeatureVector {
    pub fn new(values: [f64; N_FEATURES]) -> Self {
        Self(values)
    }

    pub fn as_array(&self) -> &[f64; N_FEATURES] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl Index<usize> for FeatureVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl IndexMut<usize> for FeatureVector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

impl fmt::Display for FeatureVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        write!(f, "]")
    }
}

/// A cleaned sample with its binary default label (1 = default).
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub id: u64,
    pub features: FeatureVector,
    pub label: u8,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Provenance {
    Raw,
    Train,
    Test,
    Derived(String),
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Raw => f.write_str("raw"),
            Provenance::Train => f.write_str("train"),
            Provenance::Test => f.write_str("test"),
            Provenance::Derived(name) => f.write_str(name),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<LabeledSample>,
    pub provenance: Provenance,
}

/// A parsed but uncleaned row. `None` marks a missing or unparseable cell.
#[derive(Clone, Debug, PartialEq)]
pub struct RawRow {
    pub id: u64,
    /// 1-based line number in the source, header is line 1.
    pub line: u64,
    pub label: Option<u8>,
    pub values: [Option<f64>; N_FEATURES],
}

impl RawRow {
    pub fn is_missing(&self) -> bool {
        self.label.is_none() || self.values.iter().any(Option::is_none)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawDataset {
    pub rows: Vec<RawRow>,
}

impl RawDataset {
    pub fn missing_count(&self) -> usize {
        self.rows.iter().filter(|r| r.is_missing()).count()
    }
}

fn parse_cell(cell: Option<&str>, integer: bool) -> Option<f64> {
    let cell = cell?.trim();
    if cell.is_empty() || cell == "NA" {
        return None;
    }
    let v: f64 = cell.parse().ok()?;
    if !v.is_finite() || (integer && v.fract() != 0.0) {
        return None;
    }
    Some(v)
}

/// Parse a header-bearing CSV with the credit-scoring columns.
///
/// An unnamed leading column is taken as the row id; otherwise rows are
/// numbered from 1. Bad cells flag the row as missing rather than failing.
pub fn parse_dataset<R: Read>(input: R) -> Result<RawDataset, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(input);
    let headers = reader.headers()?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].trim().is_empty()) {
        return Err(DataError::NoHeader);
    }
    let find = |name: &str| -> Result<usize, DataError> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let label_col = find(LABEL_COLUMN)?;
    let mut feature_cols = [0usize; N_FEATURES];
    for (slot, name) in feature_cols.iter_mut().zip(FEATURE_COLUMNS) {
        *slot = find(name)?;
    }
    let id_col = headers
        .get(0)
        .filter(|h| h.trim().is_empty())
        .map(|_| 0usize);

    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(i as u64 + 2);
        let id = id_col
            .and_then(|c| record.get(c))
            .and_then(|s| s.trim().parse::<u64>().ok())
            .unwrap_or(i as u64 + 1);
        let label = match parse_cell(record.get(label_col), true) {
            Some(v) if v == 0.0 => Some(0),
            Some(v) if v == 1.0 => Some(1),
            _ => None,
        };
        let mut values = [None; N_FEATURES];
        for (j, slot) in values.iter_mut().enumerate() {
            *slot = parse_cell(record.get(feature_cols[j]), INTEGER_FEATURES[j]);
        }
        rows.push(RawRow {
            id,
            line,
            label,
            values,
        });
    }
    Ok(RawDataset { rows })
}

/// Keep only rows without missing fields, preserving order.
pub fn drop_missing(raw: &RawDataset) -> Result<Dataset, DataError> {
    let samples: Vec<LabeledSample> = raw
        .rows
        .iter()
        .filter(|r| !r.is_missing())
        .map(|r| LabeledSample {
            id: r.id,
            features: FeatureVector(r.values.map(|v| v.expect("checked by is_missing"))),
            label: r.label.expect("checked by is_missing"),
        })
        .collect();
    if samples.is_empty() {
        return Err(DataError::Empty);
    }
    Ok(Dataset {
        samples,
        provenance: Provenance::Raw,
    })
}

impl Dataset {
    pub fn new(samples: Vec<LabeledSample>, provenance: Provenance) -> Self {
        Self {
            samples,
            provenance,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn features(&self) -> impl Iterator<Item = &FeatureVector> {
        self.samples.iter().map(|s| &s.features)
    }

    pub fn labels(&self) -> Vec<u8> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Default rate of the labels; 0 for an empty dataset.
    pub fn positive_rate(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().filter(|s| s.label == 1).count() as f64 / self.len() as f64
    }

    /// Subset by predicate, order preserved.
    pub fn filter<F>(&self, name: &str, mut keep: F) -> Dataset
    where
        F: FnMut(&LabeledSample) -> bool,
    {
        Dataset {
            samples: self.samples.iter().filter(|s| keep(s)).cloned().collect(),
            provenance: Provenance::Derived(name.to_string()),
        }
    }

    /// Seeded sample of `n` rows without replacement, original order kept.
    /// Returns every row when `n >= len`.
    pub fn sample_rows(&self, n: usize, seed: u64) -> Dataset {
        let mut picked = if n >= self.len() {
            (0..self.len()).collect()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rand::seq::index::sample(&mut rng, self.len(), n).into_vec()
        };
        picked.sort_unstable();
        Dataset {
            samples: picked
                .into_iter()
                .map(|i| self.samples[i].clone())
                .collect(),
            provenance: Provenance::Derived("sample".into()),
        }
    }

    /// Write in the input CSV layout: unnamed id column, label, then x1..x10.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), DataError> {
        let mut writer = csv::Writer::from_writer(out);
        let mut header = vec!["", LABEL_COLUMN];
        header.extend(FEATURE_COLUMNS);
        writer.write_record(&header)?;
        let mut record: Vec<String> = Vec::with_capacity(N_FEATURES + 2);
        for s in &self.samples {
            record.clear();
            record.push(s.id.to_string());
            record.push(s.label.to_string());
            record.extend(s.features.0.iter().map(|v| v.to_string()));
            writer.write_record(&record)?;
        }
        writer.flush()?;
        Ok(())
    }
}

/// Randomly partition into (train, test) with `round(n * train_fraction)`
/// training rows, ties rounding up. Relative order is preserved in each part.
pub fn split_train_test(
    dataset: &Dataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset), DataError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DataError::Fraction(train_fraction));
    }
    let n = dataset.len();
    let n_train = ((n as f64) * train_fraction + 0.5).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut in_train = vec![false; n];
    for &i in &order[..n_train.min(n)] {
        in_train[i] = true;
    }
    let mut train = Vec::with_capacity(n_train);
    let mut test = Vec::with_capacity(n - n_train.min(n));
    for (s, keep) in dataset.samples.iter().zip(in_train) {
        if keep {
            train.push(s.clone());
        } else {
            test.push(s.clone());
        }
    }
    Ok((
        Dataset::new(train, Provenance::Train),
        Dataset::new(test, Provenance::Test),
    ))
}

/// Z-score transform fitted on training statistics (sample standard deviation).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: [f64; N_FEATURES],
    pub std: [f64; N_FEATURES],
}

impl Standardizer {
    pub fn fit(train: &Dataset) -> Result<Self, DataError> {
        let n = train.len();
        if n < 2 {
            return Err(DataError::TooFewSamples(n));
        }
        let mut mean = [0.0; N_FEATURES];
        for x in train.features() {
            for j in 0..N_FEATURES {
                mean[j] += x[j];
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut ss = [0.0; N_FEATURES];
        for x in train.features() {
            for j in 0..N_FEATURES {
                let d = x[j] - mean[j];
                ss[j] += d * d;
            }
        }
        let mut std = [0.0; N_FEATURES];
        for j in 0..N_FEATURES {
            std[j] = (ss[j] / (n - 1) as f64).sqrt();
            if !(std[j] > 0.0) || !std[j].is_finite() {
                return Err(DataError::ConstantFeature(FEATURE_NAMES[j]));
            }
        }
        Ok(Self { mean, std })
    }

    #[inline]
    pub fn apply(&self, x: &FeatureVector) -> [f64; N_FEATURES] {
        std::array::from_fn(|j| (x[j] - self.mean[j]) / self.std[j])
    }

    #[inline]
    pub fn apply_feature(&self, j: usize, value: f64) -> f64 {
        (value - self.mean[j]) / self.std[j]
    }

    pub fn inverse(&self, z: &[f64; N_FEATURES]) -> FeatureVector {
        FeatureVector(std::array::from_fn(|j| z[j] * self.std[j] + self.mean[j]))
    }

    pub fn apply_all(&self, dataset: &Dataset) -> Vec<[f64; N_FEATURES]> {
        dataset.features().map(|x| self.apply(x)).collect()
    }
}

/// Observed per-feature (min, max) on the training set, raw units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureBounds {
    pub min: [f64; N_FEATURES],
    pub max: [f64; N_FEATURES],
}

impl FeatureBounds {
    pub fn from_dataset(dataset: &Dataset) -> Result<Self, DataError> {
        if dataset.is_empty() {
            return Err(DataError::Empty);
        }
        let mut min = [f64::INFINITY; N_FEATURES];
        let mut max = [f64::NEG_INFINITY; N_FEATURES];
        for x in dataset.features() {
            for j in 0..N_FEATURES {
                min[j] = min[j].min(x[j]);
                max[j] = max[j].max(x[j]);
            }
        }
        Ok(Self { min, max })
    }

    pub fn contains(&self, x: &FeatureVector) -> bool {
        (0..N_FEATURES).all(|j| x[j] >= self.min[j] && x[j] <= self.max[j])
    }
}
