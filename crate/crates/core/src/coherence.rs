//! Propensity coherence: compares directly fitted propensities against the
//! propensities implied by the label-shift assumption.

use serde::{Deserialize, Serialize};

use crate::calibrate::{Population, ScoreSet};
use crate::error::{Error, Result};
use crate::math::{clamp_prob, logit};

/// `P(M = 1 | x)` implied by the outcome score under label shift.
///
/// The unnormalized mass of `m = 1` is `p(m=1) * sum_y p(y | x, m=0) p(y | m=1) / p(y | m=0)`;
/// for `m = 0` the sum collapses to one.
pub fn stable_propensity(outcome_score: f64, source_prevalence: f64, target_prevalence: f64, missing_rate: f64) -> f64 {
    let s = outcome_score;
    let ratio = s * target_prevalence / source_prevalence
        + (1.0 - s) * (1.0 - target_prevalence) / (1.0 - source_prevalence);
    let missing = ratio * missing_rate;
    let observed = 1.0 - missing_rate;
    missing / (missing + observed)
}

/// Symmetric Bernoulli KL divergence, `(p - q)(logit p - logit q)`.
pub fn sym_kl_bernoulli(p: f64, q: f64) -> f64 {
    let (p, q) = (clamp_prob(p), clamp_prob(q));
    ((p - q) * (logit(p) - logit(q))).max(0.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropensityPair {
    direct: ScoreSet,
    stable: ScoreSet,
    population: Population,
}

impl PropensityPair {
    pub fn new(direct: ScoreSet, stable: ScoreSet, population: Population) -> Result<Self> {
        if direct.len() != stable.len() {
            return Err(Error::InvalidArgument(format!(
                "{} direct propensities but {} stable ones",
                direct.len(),
                stable.len()
            )));
        }
        if direct.is_empty() {
            return Err(Error::InsufficientData("empty propensity pair".into()));
        }
        Ok(PropensityPair { direct, stable, population })
    }

    /// Builds the stable side from outcome scores on the same units.
    pub fn from_outcome_scores(
        direct: ScoreSet,
        outcome_scores: &ScoreSet,
        source_prevalence: f64,
        target_prevalence: f64,
        missing_rate: f64,
        population: Population,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&target_prevalence) {
            return Err(Error::InvalidArgument(format!("target_prevalence must lie in [0, 1], got {target_prevalence}")));
        }
        for (name, v) in [("source_prevalence", source_prevalence), ("missing_rate", missing_rate)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::InvalidArgument(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        let target = clamp_prob(target_prevalence);
        let stable = outcome_scores
            .scores()
            .iter()
            .map(|&s| stable_propensity(s, source_prevalence, target, missing_rate))
            .collect();
        let stable = ScoreSet::new(stable, outcome_scores.is_calibrated(), population)?;
        PropensityPair::new(direct, stable, population)
    }

    pub fn direct(&self) -> &ScoreSet {
        &self.direct
    }

    pub fn stable(&self) -> &ScoreSet {
        &self.stable
    }

    pub fn population(&self) -> Population {
        self.population
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoherenceResult {
    pub delta: f64,
    pub per_unit: Vec<f64>,
    pub calibrated_inputs: bool,
    pub population: Population,
}

fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 32 {
        return v.iter().sum();
    }
    let (a, b) = v.split_at(v.len() / 2);
    pairwise_sum(a) + pairwise_sum(b)
}

/// Mean symmetric KL between the direct and stable propensities.
pub fn coherence_score(pair: &PropensityPair) -> CoherenceResult {
    let per_unit: Vec<f64> = pair
        .direct
        .scores()
        .iter()
        .zip(pair.stable.scores())
        .map(|(&p, &q)| sym_kl_bernoulli(p, q))
        .collect();
    let delta = pairwise_sum(&per_unit) / per_unit.len() as f64;
    CoherenceResult {
        delta,
        per_unit,
        calibrated_inputs: pair.direct.is_calibrated() && pair.stable.is_calibrated(),
        population: pair.population,
    }
}
