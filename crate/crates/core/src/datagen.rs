//! Simulation designs with outcome-dependent missingness.
//!
//! Units draw `Y ~ Bern(mu_y)`, then independent covariates
//! `X_d ~ Bern(cond[d][Y])`, then `M ~ Bern(sigmoid(beta0 + beta((1 - phi) xbar + phi y)))`.
//! `phi = 0` gives ignorable missingness given the covariate mean and `phi = 1`
//! gives pure label shift. Link coefficients are solved so the observed and
//! missing prevalences hit fixed targets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Unit};
use crate::error::{Error, Result};
use crate::math::sigmoid;

pub const TOY_COND: [f64; 2] = [0.3, 0.7];
pub const HIGHDIM_COND: [f64; 2] = [0.42, 0.5];
pub const HIGHDIM_DIM: usize = 100;
pub const DESIGN_MU_Y: f64 = 0.35;
pub const DESIGN_TARGETS: MomentTargets = MomentTargets { mu0_target: 0.25, mu1_target: 0.5 };
const LINK_BOX: f64 = 20.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub mu_y: f64,
    /// `cond[d][c] = P(X_d = 1 | Y = c)`.
    pub cond: Vec<[f64; 2]>,
    pub phi: f64,
    pub beta0: f64,
    pub beta: f64,
    pub n: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentTargets {
    /// `E[Y | M = 0]`.
    pub mu0_target: f64,
    /// `E[Y | M = 1]`.
    pub mu1_target: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImpliedMoments {
    pub p_m: f64,
    pub mu0: f64,
    pub mu1: f64,
}

fn interior(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v < 1.0) {
        return Err(Error::InvalidArgument(format!("{name} must lie in (0, 1), got {v}")));
    }
    Ok(())
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        interior("mu_y", self.mu_y)?;
        if self.cond.is_empty() {
            return Err(Error::InvalidArgument("cond needs at least one covariate".into()));
        }
        for (d, row) in self.cond.iter().enumerate() {
            interior(&format!("cond[{d}][0]"), row[0])?;
            interior(&format!("cond[{d}][1]"), row[1])?;
        }
        if !(0.0..=1.0).contains(&self.phi) {
            return Err(Error::InvalidArgument(format!("phi must lie in [0, 1], got {}", self.phi)));
        }
        if !self.beta0.is_finite() || !self.beta.is_finite() {
            return Err(Error::InvalidArgument("link coefficients must be finite".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.cond.len()
    }

    pub fn with_n(mut self, n: usize) -> Self {
        self.n = n;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    fn link(&self) -> Link {
        Link { phi: self.phi, beta0: self.beta0, beta: self.beta }
    }

    fn problem(&self) -> LinkProblem {
        LinkProblem { mu_y: self.mu_y, phi: self.phi, laws: [xbar_law(&self.cond, 0), xbar_law(&self.cond, 1)] }
    }

    /// Exact `P(Y = 1 | X = x, M = m)` under this configuration.
    pub fn outcome_posterior(&self, x: &[u8], m: u8) -> Result<f64> {
        let masses = self.joint_masses(x)?;
        let pick = |y: usize| if m == 1 { masses[y].1 } else { masses[y].0 };
        Ok(pick(1) / (pick(0) + pick(1)))
    }

    /// Exact propensity `P(M = 1 | X = x)`.
    pub fn propensity(&self, x: &[u8]) -> Result<f64> {
        let masses = self.joint_masses(x)?;
        let missing = masses[0].1 + masses[1].1;
        Ok(missing / (missing + masses[0].0 + masses[1].0))
    }

    /// `P(X = x | Y = y)`.
    pub fn covariate_likelihood(&self, x: &[u8], y: u8) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::InvalidArgument(format!("expected {} covariates, got {}", self.dim(), x.len())));
        }
        Ok(x.iter()
            .zip(&self.cond)
            .map(|(&v, row)| {
                let p = row[y as usize];
                if v == 1 { p } else { 1.0 - p }
            })
            .product())
    }

    /// Per class `y`: `(P(x, y, M=0), P(x, y, M=1))`.
    fn joint_masses(&self, x: &[u8]) -> Result<[(f64, f64); 2]> {
        let xbar = x.iter().map(|&v| f64::from(v)).sum::<f64>() / x.len().max(1) as f64;
        let mut out = [(0.0, 0.0); 2];
        for y in 0..2u8 {
            let prior = if y == 1 { self.mu_y } else { 1.0 - self.mu_y };
            let base = prior * self.covariate_likelihood(x, y)?;
            let e = missing_prob(xbar, y, self);
            out[y as usize] = (base * (1.0 - e), base * e);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy)]
struct Link {
    phi: f64,
    beta0: f64,
    beta: f64,
}

impl Link {
    fn prob(&self, xbar: f64, y: u8) -> f64 {
        sigmoid(self.beta0 + self.beta * ((1.0 - self.phi) * xbar + self.phi * f64::from(y)))
    }
}

/// `P(M = 1 | xbar, y)`.
pub fn missing_prob(x_mean: f64, y: u8, config: &SimConfig) -> f64 {
    config.link().prob(x_mean, y)
}

/// Distribution of the covariate mean within one class: support points and
/// their probabilities.
#[derive(Debug, Clone, PartialEq)]
struct XbarLaw(Vec<(f64, f64)>);

/// Exact law of the mean of independent Bernoulli covariates, by the
/// Poisson-binomial recursion over the count of ones.
fn xbar_law(cond: &[[f64; 2]], y: usize) -> XbarLaw {
    let mut counts = vec![1.0];
    for row in cond {
        let p = row[y];
        let mut next = vec![0.0; counts.len() + 1];
        for (k, &w) in counts.iter().enumerate() {
            next[k] += w * (1.0 - p);
            next[k + 1] += w * p;
        }
        counts = next;
    }
    let d = cond.len() as f64;
    XbarLaw(counts.into_iter().enumerate().map(|(k, w)| (k as f64 / d, w)).collect())
}

fn empirical_law(dataset: &Dataset, oracle_y: &[u8], y: u8) -> XbarLaw {
    let mut tally = std::collections::BTreeMap::new();
    let mut total = 0usize;
    for (unit, &label) in dataset.units().iter().zip(oracle_y) {
        if label == y {
            let ones = unit.x().iter().filter(|&&v| v == 1).count();
            *tally.entry(ones).or_insert(0usize) += 1;
            total += 1;
        }
    }
    let d = dataset.dim() as f64;
    XbarLaw(tally.into_iter().map(|(k, c)| (k as f64 / d, c as f64 / total as f64)).collect())
}

#[derive(Debug, Clone)]
struct LinkProblem {
    mu_y: f64,
    phi: f64,
    laws: [XbarLaw; 2],
}

impl LinkProblem {
    fn rate(&self, beta0: f64, beta: f64, y: u8) -> f64 {
        let link = Link { phi: self.phi, beta0, beta };
        self.laws[y as usize].0.iter().map(|&(xbar, w)| w * link.prob(xbar, y)).sum()
    }

    fn moments(&self, beta0: f64, beta: f64) -> Result<ImpliedMoments> {
        let r1 = self.rate(beta0, beta, 1);
        let r0 = self.rate(beta0, beta, 0);
        let p_m = r1 * self.mu_y + r0 * (1.0 - self.mu_y);
        if !(p_m > 0.0 && p_m < 1.0) {
            return Err(Error::DegenerateMechanism { p_m });
        }
        Ok(ImpliedMoments {
            p_m,
            mu1: r1 * self.mu_y / p_m,
            mu0: (1.0 - r1) * self.mu_y / (1.0 - p_m),
        })
    }

    /// Intercept hitting `P(M = 1) = p_m` for a fixed slope.
    fn intercept_for(&self, beta: f64, p_m: f64) -> Option<f64> {
        let pm = |b0: f64| self.rate(b0, beta, 1) * self.mu_y + self.rate(b0, beta, 0) * (1.0 - self.mu_y);
        let (mut lo, mut hi) = (-LINK_BOX, LINK_BOX);
        if pm(lo) > p_m || pm(hi) < p_m {
            return None;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if pm(mid) < p_m {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-15 {
                break;
            }
        }
        Some(0.5 * (lo + hi))
    }

    fn solve(&self, targets: MomentTargets) -> Result<(f64, f64)> {
        let (mu0, mu1, mu_y) = (targets.mu0_target, targets.mu1_target, self.mu_y);
        interior("mu0_target", mu0)?;
        interior("mu1_target", mu1)?;
        if mu0 == mu_y && mu1 == mu_y {
            return Ok((0.0, 0.0));
        }
        if !((mu0 < mu_y && mu_y < mu1) || (mu1 < mu_y && mu_y < mu0)) {
            return Err(Error::InfeasibleTargets(format!(
                "mu_y = {mu_y} must lie strictly between the targets {mu0} and {mu1}"
            )));
        }
        let p_m = (mu_y - mu0) / (mu1 - mu0);
        // P(M = 1 | Y = 1) forced by Bayes rule.
        let r1_target = mu1 * p_m / mu_y;
        let residual = |beta: f64| {
            self.intercept_for(beta, p_m).map(|b0| (b0, self.rate(b0, beta, 1) - r1_target))
        };
        let infeasible = || Error::InfeasibleTargets(format!("no link parameters in [-{LINK_BOX}, {LINK_BOX}]^2"));
        let (b0_zero, h0) = residual(0.0).ok_or_else(infeasible)?;
        if h0 == 0.0 {
            return Ok((b0_zero, 0.0));
        }
        for side in [1.0, -1.0] {
            let end = side * LINK_BOX;
            let Some((_, h_end)) = residual(end) else { continue };
            if h_end.signum() == h0.signum() {
                continue;
            }
            let (mut lo, mut hi) = (0.0f64, end);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                let (_, h) = residual(mid).ok_or_else(infeasible)?;
                if h.signum() == h0.signum() {
                    lo = mid;
                } else {
                    hi = mid;
                }
                if (hi - lo).abs() < 1e-14 {
                    break;
                }
            }
            let beta = 0.5 * (lo + hi);
            let (beta0, _) = residual(beta).ok_or_else(infeasible)?;
            return Ok((beta0, beta));
        }
        Err(infeasible())
    }
}

/// Exact `P(M = 1 | Y = y)`, averaging the link over the law of the
/// covariate mean given `y`.
pub fn conditional_missing_rate(config: &SimConfig, y: u8) -> Result<f64> {
    config.validate()?;
    Ok(config.problem().rate(config.beta0, config.beta, y))
}

/// Exact missingness rate and class prevalences under the configuration.
pub fn implied_moments(config: &SimConfig) -> Result<ImpliedMoments> {
    config.validate()?;
    config.problem().moments(config.beta0, config.beta)
}

/// Link coefficients `(beta0, beta)` reproducing the target prevalences. The
/// configuration's own link values are ignored.
pub fn solve_link_params(targets: MomentTargets, config: &SimConfig) -> Result<(f64, f64)> {
    let probe = SimConfig { beta0: 0.0, beta: 0.0, ..config.clone() };
    probe.validate()?;
    probe.problem().solve(targets)
}

/// Configuration with `mu_y` and `cond` given and links solved for the
/// targets.
pub fn solved_config(mu_y: f64, cond: Vec<[f64; 2]>, phi: f64, targets: MomentTargets, n: usize, seed: u64) -> Result<SimConfig> {
    let mut config = SimConfig { mu_y, cond, phi, beta0: 0.0, beta: 0.0, n, seed };
    let (beta0, beta) = solve_link_params(targets, &config)?;
    config.beta0 = beta0;
    config.beta = beta;
    Ok(config)
}

/// One binary covariate with `P(X = 1 | Y) = (0.3, 0.7)`, 1,000 units.
pub fn toy_config(phi: f64) -> Result<SimConfig> {
    solved_config(DESIGN_MU_Y, vec![TOY_COND], phi, DESIGN_TARGETS, 1_000, 0)
}

/// 100 exchangeable covariates with `P(X_d = 1 | Y) = (0.42, 0.5)`, 10,000 units.
pub fn highdim_config(phi: f64) -> Result<SimConfig> {
    solved_config(DESIGN_MU_Y, vec![HIGHDIM_COND; HIGHDIM_DIM], phi, DESIGN_TARGETS, 10_000, 0)
}

/// True outcomes for every unit, kept apart from the estimator-facing data.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleLabels(Vec<u8>);

impl OracleLabels {
    pub fn new(labels: Vec<u8>) -> Self {
        OracleLabels(labels)
    }

    pub fn labels(&self) -> &[u8] {
        &self.0
    }

    /// Realized outcome mean over the missing units.
    pub fn missing_mean(&self, dataset: &Dataset) -> Option<f64> {
        let (sum, count) = dataset
            .units()
            .iter()
            .zip(&self.0)
            .filter(|(u, _)| !u.is_observed())
            .fold((0usize, 0usize), |(s, c), (_, &y)| (s + y as usize, c + 1));
        (count > 0).then(|| sum as f64 / count as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub dataset: Dataset,
    pub oracle: OracleLabels,
}

/// Draws `config.n` units from one seeded stream: `y`, then each `x_d`, then `m`.
pub fn generate(config: &SimConfig) -> Result<Generated> {
    config.validate()?;
    if config.n == 0 {
        return Err(Error::InvalidArgument("n must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let link = config.link();
    let d = config.dim();
    let mut units = Vec::with_capacity(config.n);
    let mut oracle = Vec::with_capacity(config.n);
    for _ in 0..config.n {
        let y = u8::from(rng.gen::<f64>() < config.mu_y);
        let x: Vec<u8> = config.cond.iter().map(|row| u8::from(rng.gen::<f64>() < row[y as usize])).collect();
        let xbar = x.iter().map(|&v| f64::from(v)).sum::<f64>() / d as f64;
        let m = rng.gen::<f64>() < link.prob(xbar, y);
        units.push(if m { Unit::missing(x)? } else { Unit::observed(x, y)? });
        oracle.push(y);
    }
    Ok(Generated { dataset: Dataset::new(units)?, oracle: OracleLabels(oracle) })
}

/// Missingness induced on a fully observed dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Induced {
    pub generated: Generated,
    pub beta0: f64,
    pub beta: f64,
    /// Moments implied by the link on the source dataset's empirical law.
    pub implied: ImpliedMoments,
}

/// Applies the simulation mechanism to complete `(x, y)` data, with link
/// coefficients solved against the data's empirical outcome rate and
/// class-wise covariate-mean distributions.
pub fn induce_missingness(complete: &Dataset, phi: f64, targets: MomentTargets, seed: u64) -> Result<Induced> {
    if complete.n_missing() > 0 {
        return Err(Error::InvalidArgument("induction needs a fully observed dataset".into()));
    }
    if !(0.0..=1.0).contains(&phi) {
        return Err(Error::InvalidArgument(format!("phi must lie in [0, 1], got {phi}")));
    }
    let labels = complete.observed_labels();
    let mu_y = labels.iter().map(|&y| f64::from(y)).sum::<f64>() / labels.len() as f64;
    interior("empirical mu_y", mu_y)?;
    let problem = LinkProblem {
        mu_y,
        phi,
        laws: [empirical_law(complete, &labels, 0), empirical_law(complete, &labels, 1)],
    };
    let (beta0, beta) = problem.solve(targets)?;
    let implied = problem.moments(beta0, beta)?;
    let link = Link { phi, beta0, beta };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let units = complete
        .units()
        .iter()
        .map(|u| {
            let y = u.y().expect("observed");
            if rng.gen::<f64>() < link.prob(u.x_mean(), y) {
                Unit::missing(u.x().to_vec())
            } else {
                Ok(u.clone())
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Induced {
        generated: Generated { dataset: Dataset::new(units)?, oracle: OracleLabels(labels) },
        beta0,
        beta,
        implied,
    })
}

/// One cell of an exactly enumerated joint distribution over `(x, y, m)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointCell {
    pub x: Vec<u8>,
    pub y: u8,
    pub m: u8,
    pub prob: f64,
}

/// Every `(x, y, m)` cell with its probability. Limited to 16 covariates.
pub fn enumerate_joint(config: &SimConfig) -> Result<Vec<JointCell>> {
    config.validate()?;
    let d = config.dim();
    if d > 16 {
        return Err(Error::InvalidArgument(format!("exact enumeration supports up to 16 covariates, got {d}")));
    }
    let mut cells = Vec::with_capacity(1 << (d + 2));
    for code in 0..(1usize << d) {
        let x: Vec<u8> = (0..d).map(|j| ((code >> j) & 1) as u8).collect();
        for (y, (p0, p1)) in config.joint_masses(&x)?.into_iter().enumerate() {
            cells.push(JointCell { x: x.clone(), y: y as u8, m: 0, prob: p0 });
            cells.push(JointCell { x: x.clone(), y: y as u8, m: 1, prob: p1 });
        }
    }
    Ok(cells)
}
