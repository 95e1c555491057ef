//! Datasets with partially missing binary outcomes.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// One unit: binary covariates, and the outcome when it was observed.
///
/// The missingness flag is derived from the outcome so that `m = 1` exactly
/// when `y` is absent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Unit {
    x: Vec<u8>,
    y: Option<u8>,
}

impl Unit {
    pub fn new(x: Vec<u8>, y: Option<u8>) -> Result<Self> {
        if x.is_empty() {
            return Err(Error::InvalidArgument("covariate vector must be non-empty".into()));
        }
        if let Some(v) = x.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidArgument(format!("covariate value {v} is not binary")));
        }
        if let Some(v) = y.filter(|&v| v > 1) {
            return Err(Error::InvalidArgument(format!("outcome value {v} is not binary")));
        }
        Ok(Unit { x, y })
    }

    pub fn observed(x: Vec<u8>, y: u8) -> Result<Self> {
        Unit::new(x, Some(y))
    }

    pub fn missing(x: Vec<u8>) -> Result<Self> {
        Unit::new(x, None)
    }

    pub fn x(&self) -> &[u8] {
        &self.x
    }

    pub fn y(&self) -> Option<u8> {
        self.y
    }

    /// Missingness flag: 1 when the outcome is missing.
    pub fn m(&self) -> u8 {
        u8::from(self.y.is_none())
    }

    pub fn is_observed(&self) -> bool {
        self.y.is_some()
    }

    /// Mean of the covariate vector.
    pub fn x_mean(&self) -> f64 {
        self.x.iter().map(|&v| f64::from(v)).sum::<f64>() / self.x.len() as f64
    }
}

/// An immutable, ordered collection of units sharing one covariate dimension.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    units: Vec<Unit>,
    dim: usize,
}

impl Dataset {
    pub fn new(units: Vec<Unit>) -> Result<Self> {
        let dim = units
            .first()
            .map(|u| u.x.len())
            .ok_or_else(|| Error::InsufficientData("dataset has no units".into()))?;
        if let Some((i, _)) = units.iter().enumerate().find(|(_, u)| u.x.len() != dim) {
            return Err(Error::Validation {
                row: i,
                message: format!("expected {dim} covariates, found {}", units[i].x.len()),
            });
        }
        Ok(Dataset { units, dim })
    }

    /// An empty dataset of known dimension; only produced by splits.
    fn empty(dim: usize) -> Self {
        Dataset { units: Vec::new(), dim }
    }

    pub fn units(&self) -> &[Unit] {
        &self.units
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn n_observed(&self) -> usize {
        self.units.iter().filter(|u| u.is_observed()).count()
    }

    pub fn n_missing(&self) -> usize {
        self.len() - self.n_observed()
    }

    /// Fraction of units whose outcome is missing.
    pub fn missing_rate(&self) -> f64 {
        self.n_missing() as f64 / self.len() as f64
    }

    /// Outcomes of the observed units, in order.
    pub fn observed_labels(&self) -> Vec<u8> {
        self.units.iter().filter_map(|u| u.y).collect()
    }

    /// Missingness flags of every unit, in order.
    pub fn missingness_labels(&self) -> Vec<u8> {
        self.units.iter().map(Unit::m).collect()
    }

    /// A new dataset holding the selected units, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            units: indices.iter().map(|&i| self.units[i].clone()).collect(),
            dim: self.dim,
        }
    }

    /// Concatenation of two datasets of equal dimension.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if self.dim != other.dim {
            return Err(Error::InvalidArgument(format!(
                "cannot pool datasets of dimension {} and {}",
                self.dim, other.dim
            )));
        }
        let mut units = self.units.clone();
        units.extend(other.units.iter().cloned());
        Ok(Dataset { units, dim: self.dim })
    }

    /// Every observed outcome flipped, `y -> 1 - y`.
    pub fn complement_labels(&self) -> Dataset {
        Dataset {
            units: self
                .units
                .iter()
                .map(|u| Unit { x: u.x.clone(), y: u.y.map(|y| 1 - y) })
                .collect(),
            dim: self.dim,
        }
    }

    fn observed_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.units[i].is_observed()).collect()
    }

    fn missing_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.units[i].is_observed()).collect()
    }
}

/// The train / calibration / target partition used by the estimation routine.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub train: Dataset,
    pub validation_observed: Dataset,
    pub validation_missing: Dataset,
    /// Source-dataset indices of each part, in part order.
    pub train_indices: Vec<usize>,
    pub validation_observed_indices: Vec<usize>,
    pub validation_missing_indices: Vec<usize>,
}

fn check_fraction(fraction: f64) -> Result<()> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "split fraction must lie in (0, 1), got {fraction}"
        )));
    }
    Ok(())
}

/// Shuffles `indices` with a seeded Fisher-Yates pass and cuts the prefix.
/// Both parts keep at least one element when `indices.len() >= 2`.
pub(crate) fn seeded_partition(indices: &[usize], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut shuffled = indices.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);
    let n = shuffled.len();
    let mut cut = (fraction * n as f64).round() as usize;
    if n >= 2 {
        cut = cut.clamp(1, n - 1);
    }
    let rest = shuffled.split_off(cut.min(n));
    (shuffled, rest)
}

/// Splits the observed units into train and validation parts; every missing
/// unit goes to the missing validation part.
pub fn split_data(dataset: &Dataset, observed_fraction: f64, seed: u64) -> Result<SplitDataset> {
    check_fraction(observed_fraction)?;
    let observed = dataset.observed_indices();
    if observed.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "need at least 2 observed units to split, found {}",
            observed.len()
        )));
    }
    let (train_indices, validation_observed_indices) = seeded_partition(&observed, observed_fraction, seed);
    let validation_missing_indices = dataset.missing_indices();
    Ok(SplitDataset {
        train: dataset.subset(&train_indices),
        validation_observed: dataset.subset(&validation_observed_indices),
        validation_missing: if validation_missing_indices.is_empty() {
            Dataset::empty(dataset.dim)
        } else {
            dataset.subset(&validation_missing_indices)
        },
        train_indices,
        validation_observed_indices,
        validation_missing_indices,
    })
}

/// Sample mean of the observed outcomes.
pub fn observed_prevalence(dataset: &Dataset) -> Result<f64> {
    let labels = dataset.observed_labels();
    if labels.is_empty() {
        return Err(Error::InsufficientData("no observed outcomes".into()));
    }
    Ok(labels.iter().map(|&y| f64::from(y)).sum::<f64>() / labels.len() as f64)
}

fn check_unit_interval(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::InvalidArgument(format!("{name} must lie in [0, 1], got {v}")));
    }
    Ok(())
}

/// Overall outcome mean from the per-pattern means: `(1 - r) mu0 + r mu1`.
pub fn overall_mean(missing_rate: f64, mu0: f64, mu1: f64) -> Result<f64> {
    check_unit_interval("missing_rate", missing_rate)?;
    check_unit_interval("mu0", mu0)?;
    check_unit_interval("mu1", mu1)?;
    Ok((1.0 - missing_rate) * mu0 + missing_rate * mu1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Cc,
    Ipw,
    Cipw,
    Direct,
    Cdirect,
    Proxy,
    Cproxy,
    Mom,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Cc,
        Method::Ipw,
        Method::Cipw,
        Method::Direct,
        Method::Cdirect,
        Method::Proxy,
        Method::Cproxy,
        Method::Mom,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Cc => "cc",
            Method::Ipw => "ipw",
            Method::Cipw => "cipw",
            Method::Direct => "direct",
            Method::Cdirect => "cdirect",
            Method::Proxy => "proxy",
            Method::Cproxy => "cproxy",
            Method::Mom => "mom",
        }
    }

    pub fn is_calibrated(self) -> bool {
        matches!(self, Method::Cipw | Method::Cdirect | Method::Cproxy)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method `{s}`")))
    }
}

/// A point estimate of the missing-case prevalence with its percentile interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub method: Method,
    pub point: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Requested bootstrap replicates `B`.
    pub replicates: usize,
    /// Replicates skipped because the procedure failed on them.
    pub failed_replicates: usize,
    pub seed: u64,
}
