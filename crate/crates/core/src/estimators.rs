//! Point estimators of the missing-case prevalence `E[Y | M = 1]`.
//!
//! Ignorable estimators (complete case, direct regression, importance
//! weighting) sit next to the label-shift estimator, which maximizes the
//! likelihood of the missing cases' covariates over the target prevalence
//! using the scaled-likelihood form `p(x | y) ∝ p(y | x) / p(y)`.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibrate::ScoreSet;
use crate::data::{observed_prevalence, Dataset, Estimate, Method};
use crate::error::{Error, Result};
use crate::math::{clamp_prob, quantile_sorted};

fn check_interior(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v < 1.0) {
        return Err(Error::InvalidArgument(format!("{name} must lie in (0, 1), got {v}")));
    }
    Ok(())
}

/// Complete-case estimate: the observed outcome mean stands in for the
/// missing one.
pub fn estimate_cc(validation_observed: &Dataset) -> Result<f64> {
    observed_prevalence(validation_observed)
}

/// Mean predicted outcome over the missing cases.
pub fn estimate_direct(missing_scores: &ScoreSet) -> Result<f64> {
    if missing_scores.is_empty() {
        return Err(Error::InsufficientData("no missing-case scores".into()));
    }
    Ok(missing_scores.mean())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IpwOptions {
    /// Weights above this empirical quantile are truncated to it.
    pub clip_quantile: Option<f64>,
    pub normalize: bool,
    /// `P(M = 1)`, needed only by the unnormalized form.
    pub missing_rate: Option<f64>,
}

impl Default for IpwOptions {
    fn default() -> Self {
        IpwOptions { clip_quantile: None, normalize: true, missing_rate: None }
    }
}

/// Odds of missingness `e / (1 - e)`, mapping observed units onto the
/// missing population.
pub fn ipw_weights(propensities: &ScoreSet) -> Vec<f64> {
    propensities.scores().iter().map(|&e| e / (1.0 - e)).collect()
}

/// Truncates every weight above `cap` to `cap`.
pub fn truncate_weights(weights: &[f64], cap: f64) -> Vec<f64> {
    weights.iter().map(|&w| w.min(cap)).collect()
}

/// Weighted outcome mean from raw weights, applying the clipping and
/// normalization options.
pub fn ipw_from_weights(labels: &[u8], weights: &[f64], options: &IpwOptions) -> Result<f64> {
    if labels.len() != weights.len() {
        return Err(Error::InvalidArgument(format!(
            "{} labels but {} weights",
            labels.len(),
            weights.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::InsufficientData("no observed units to weight".into()));
    }
    let weights = match options.clip_quantile {
        None => weights.to_vec(),
        Some(q) => {
            if !(q > 0.0 && q <= 1.0) {
                return Err(Error::InvalidArgument(format!("clip quantile must lie in (0, 1], got {q}")));
            }
            let mut sorted = weights.to_vec();
            sorted.sort_by(f64::total_cmp);
            truncate_weights(weights, quantile_sorted(&sorted, q))
        }
    };
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::DegenerateWeights);
    }
    let weighted: f64 = labels.iter().zip(&weights).map(|(&y, &w)| f64::from(y) * w).sum();
    if options.normalize {
        Ok(weighted / total)
    } else {
        let rate = options.missing_rate.ok_or_else(|| {
            Error::InvalidArgument("unnormalized IPW needs the missing rate".into())
        })?;
        check_interior("missing_rate", rate)?;
        Ok((weighted / labels.len() as f64) * ((1.0 - rate) / rate))
    }
}

/// Inverse-probability-weighted outcome mean over the observed validation units.
pub fn estimate_ipw(
    validation_observed: &Dataset,
    propensity_scores_on_observed: &ScoreSet,
    options: &IpwOptions,
) -> Result<f64> {
    if validation_observed.n_missing() > 0 {
        return Err(Error::InvalidArgument("IPW weights observed units only".into()));
    }
    let labels = validation_observed.observed_labels();
    ipw_from_weights(&labels, &ipw_weights(propensity_scores_on_observed), options)
}

// ---------------------------------------------------------------------------
// Label-shift likelihood and EM

/// Per-unit likelihood ratios `(s / p0, (1 - s) / (1 - p0))`.
fn ratios(scores: &ScoreSet, source_prevalence: f64) -> Vec<(f64, f64)> {
    scores
        .scores()
        .iter()
        .map(|&s| (s / source_prevalence, (1.0 - s) / (1.0 - source_prevalence)))
        .collect()
}

/// Log-likelihood of the target covariates as a function of the target
/// prevalence `pi`, up to an additive constant.
pub fn log_likelihood(pi: f64, scores: &ScoreSet, source_prevalence: f64) -> f64 {
    ratio_log_likelihood(pi, &ratios(scores, source_prevalence))
}

fn ratio_log_likelihood(pi: f64, ratios: &[(f64, f64)]) -> f64 {
    ratios.iter().map(|&(a, b)| (pi * a + (1.0 - pi) * b).ln()).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmSettings {
    /// Starting prevalence; the source prevalence when `None`.
    pub init: Option<f64>,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for EmSettings {
    fn default() -> Self {
        EmSettings { init: None, tol: 1e-8, max_iter: 500 }
    }
}

/// Output of the EM prevalence estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyFit {
    /// Estimated target prevalence, the estimate of `E[Y | M = 1]`.
    pub pi_hat: f64,
    /// Iterates, starting with the initial value.
    pub trajectory: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub source_prevalence: f64,
}

impl ProxyFit {
    /// Prevalence ratio `q(1) / p(1)`.
    pub fn weight_ratio(&self) -> f64 {
        self.pi_hat / self.source_prevalence
    }
}

/// Expectation-maximization for the target prevalence: each step averages
/// the prior-adapted posteriors of the target units.
pub fn em_label_shift(scores: &ScoreSet, source_prevalence: f64, settings: &EmSettings) -> Result<ProxyFit> {
    em_label_shift_weighted(scores, &vec![1.0; scores.len()], source_prevalence, settings)
}

/// EM with per-unit frequency weights. Identical scores are pooled, so the
/// result does not depend on unit order.
pub fn em_label_shift_weighted(
    scores: &ScoreSet,
    weights: &[f64],
    source_prevalence: f64,
    settings: &EmSettings,
) -> Result<ProxyFit> {
    check_interior("source_prevalence", source_prevalence)?;
    let init = settings.init.unwrap_or(source_prevalence);
    check_interior("init", init)?;
    if weights.len() != scores.len() {
        return Err(Error::InvalidArgument(format!("{} scores but {} weights", scores.len(), weights.len())));
    }
    let mut pooled: BTreeMap<u64, f64> = BTreeMap::new();
    for (&s, &w) in scores.scores().iter().zip(weights) {
        if !(w >= 0.0 && w.is_finite()) {
            return Err(Error::InvalidArgument(format!("weight {w} is not a finite non-negative number")));
        }
        if w > 0.0 {
            *pooled.entry(s.to_bits()).or_insert(0.0) += w;
        }
    }
    let total: f64 = pooled.values().sum();
    if pooled.is_empty() || !(total > 0.0) {
        return Err(Error::InsufficientData("no target scores".into()));
    }
    let groups: Vec<(f64, f64, f64)> = pooled
        .into_iter()
        .map(|(bits, w)| {
            let s = f64::from_bits(bits);
            (s / source_prevalence, (1.0 - s) / (1.0 - source_prevalence), w / total)
        })
        .collect();
    let em_map = |pi: f64| -> f64 {
        groups
            .iter()
            .map(|&(a, b, w)| {
                let num = pi * a;
                w * num / (num + (1.0 - pi) * b)
            })
            .sum()
    };
    let objective = |pi: f64| -> f64 { groups.iter().map(|&(a, b, w)| w * (pi * a + (1.0 - pi) * b).ln()).sum() };

    let mut pi = init;
    let mut trajectory = vec![pi];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < settings.max_iter {
        iterations += 1;
        let p1 = em_map(pi);
        let p2 = em_map(p1);
        let next = squarem_step(pi, p1, p2, &em_map, &objective);
        let delta = (next - pi).abs();
        pi = next;
        trajectory.push(pi);
        if delta < settings.tol {
            converged = true;
            break;
        }
    }
    Ok(ProxyFit { pi_hat: pi.clamp(0.0, 1.0), trajectory, iterations, converged, source_prevalence })
}

/// One squared-extrapolation step built on two EM updates `p1 = T(p)` and
/// `p2 = T(p1)`. The extrapolated point is pulled back inside `(0, 1)`,
/// stabilized by one more EM update and kept only if it does not lower the
/// likelihood below that of `p2`.
fn squarem_step(p: f64, p1: f64, p2: f64, em_map: &impl Fn(f64) -> f64, objective: &impl Fn(f64) -> f64) -> f64 {
    let r = p1 - p;
    let v = p2 - 2.0 * p1 + p;
    if v == 0.0 || r == 0.0 {
        return p2;
    }
    let mut alpha = (-(r.abs() / v.abs())).min(-1.0);
    let mut candidate = p - 2.0 * alpha * r + alpha * alpha * v;
    for _ in 0..60 {
        if candidate > 0.0 && candidate < 1.0 {
            break;
        }
        alpha = 0.5 * (alpha - 1.0);
        candidate = p - 2.0 * alpha * r + alpha * alpha * v;
    }
    if !(candidate > 0.0 && candidate < 1.0) {
        return p2;
    }
    let stabilized = em_map(candidate);
    if objective(stabilized) >= objective(p2) { stabilized } else { p2 }
}

/// Maximizes the log-likelihood over the grid `{0, r, 2r, ..., 1}`; ties go to
/// the smallest grid point.
///
/// The search scans a coarse sub-grid and then every fine point between the
/// coarse neighbours of the coarse winner. The objective is concave in `pi`,
/// so this visits the exhaustive argmax.
pub fn grid_mle(scores: &ScoreSet, source_prevalence: f64, resolution: f64) -> Result<f64> {
    if !(resolution > 0.0 && resolution <= 0.01) {
        return Err(Error::InvalidArgument(format!("resolution must lie in (0, 0.01], got {resolution}")));
    }
    check_interior("source_prevalence", source_prevalence)?;
    let ratios = ratios(scores, source_prevalence);
    let inv = 1.0 / resolution;
    let steps = if (inv - inv.round()).abs() < 1e-9 { inv.round() as usize } else { inv.floor() as usize };
    let point = |i: usize| (i as f64 * resolution).min(1.0);
    let value = |i: usize| ratio_log_likelihood(point(i), &ratios);

    let stride = ((steps as f64).sqrt() as usize).max(1);
    let mut coarse: Vec<usize> = (0..=steps).step_by(stride).collect();
    if *coarse.last().unwrap() != steps {
        coarse.push(steps);
    }
    let argmax = |candidates: &mut dyn Iterator<Item = usize>| {
        let mut best = (usize::MAX, f64::NEG_INFINITY);
        for i in candidates {
            let v = value(i);
            if v > best.1 {
                best = (i, v);
            }
        }
        best.0
    };
    let winner = argmax(&mut coarse.iter().copied());
    let c = coarse.iter().position(|&i| i == winner).unwrap();
    let lo = coarse[c.saturating_sub(1)];
    let hi = coarse[(c + 1).min(coarse.len() - 1)];
    Ok(point(argmax(&mut (lo..=hi))))
}

/// Prior adaptation of source posteriors to a target prevalence:
/// `q(y | x) ∝ p(y | x) q(y) / p(y)`.
pub fn adapt_scores(scores: &ScoreSet, source_prevalence: f64, target_prevalence: f64) -> Result<ScoreSet> {
    check_interior("source_prevalence", source_prevalence)?;
    check_interior("target_prevalence", target_prevalence)?;
    let adapted = scores
        .scores()
        .iter()
        .map(|&s| {
            let pos = s * target_prevalence / source_prevalence;
            let neg = (1.0 - s) * (1.0 - target_prevalence) / (1.0 - source_prevalence);
            clamp_prob(pos / (pos + neg))
        })
        .collect();
    ScoreSet::new(adapted, scores.is_calibrated(), scores.population())
}

// ---------------------------------------------------------------------------
// Method of moments

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomEstimate {
    pub value: f64,
    /// The raw ratio fell outside `[0, 1]` and was clipped.
    pub clipped: bool,
}

/// Moment estimator for a scalar binary covariate:
/// `(mu_x_missing - beta0) / (beta1 - beta0)` with `beta_c = P(X = 1 | Y = c)`.
pub fn estimate_mom(beta0: f64, beta1: f64, mu_x_missing: f64) -> Result<MomEstimate> {
    for (name, v) in [("beta0", beta0), ("beta1", beta1), ("mu_x_missing", mu_x_missing)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidArgument(format!("{name} must lie in [0, 1], got {v}")));
        }
    }
    if beta0 == beta1 {
        return Err(Error::Unidentified("class-conditional covariate means are equal".into()));
    }
    let raw = (mu_x_missing - beta0) / (beta1 - beta0);
    let value = raw.clamp(0.0, 1.0);
    let clipped = value != raw;
    if clipped {
        log::debug!("moment estimate {raw} clipped to [0, 1]");
    }
    Ok(MomEstimate { value, clipped })
}

// ---------------------------------------------------------------------------
// Bootstrap

/// Identity draw: every stratum at full size, in order.
pub fn full_sample(strata: &[usize]) -> Vec<Vec<usize>> {
    strata.iter().map(|&n| (0..n).collect()).collect()
}

/// Generator for one replicate; replicate streams are independent of the
/// order in which replicates run.
fn replicate_rng(seed: u64, replicate: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replicate as u64 + 1);
    rng
}

/// Multiplicity of each of `n` units in a resampled index vector.
pub fn draw_counts(draw: &[usize], n: usize) -> Vec<f64> {
    let mut counts = vec![0.0; n];
    for &i in draw {
        counts[i] += 1.0;
    }
    counts
}

/// With-replacement resample of each stratum.
pub fn resample_strata(strata: &[usize], rng: &mut impl Rng) -> Vec<Vec<usize>> {
    strata.iter().map(|&n| (0..n).map(|_| rng.gen_range(0..n)).collect()).collect()
}

/// Percentile bootstrap around a deterministic point procedure.
///
/// `strata` lists the sizes of the independently resampled input groups; the
/// procedure receives one index vector per stratum. The point estimate comes
/// from the full sample and the interval from the 2.5 / 97.5 percentiles of
/// the replicates. Failing replicates are skipped; more than 10% failures is
/// an error.
pub fn bootstrap_estimate<F>(
    method: Method,
    strata: &[usize],
    replicates: usize,
    seed: u64,
    procedure: F,
) -> Result<Estimate>
where
    F: Fn(&[Vec<usize>]) -> Result<f64> + Sync,
{
    if replicates == 0 {
        return Err(Error::InvalidArgument("bootstrap needs at least one replicate".into()));
    }
    if strata.is_empty() || strata.contains(&0) {
        return Err(Error::InsufficientData("bootstrap sample has an empty stratum".into()));
    }
    let point = procedure(&full_sample(strata))?;
    let outcomes: Vec<Option<f64>> = (0..replicates)
        .into_par_iter()
        .map(|b| {
            let draw = resample_strata(strata, &mut replicate_rng(seed, b));
            procedure(&draw).ok().filter(|v| v.is_finite())
        })
        .collect();
    let mut values: Vec<f64> = outcomes.iter().flatten().copied().collect();
    let failures = replicates - values.len();
    if failures * 10 > replicates || values.is_empty() {
        return Err(Error::BootstrapDegenerate { failures, replicates });
    }
    values.sort_by(f64::total_cmp);
    let ci_low = quantile_sorted(&values, 0.025).clamp(0.0, 1.0);
    let ci_high = quantile_sorted(&values, 0.975).clamp(ci_low, 1.0);
    Ok(Estimate { method, point, ci_low, ci_high, replicates, failed_replicates: failures, seed })
}
