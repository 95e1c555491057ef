//! Platt scaling: a two-parameter logistic recalibration of model scores,
//! `p = sigmoid(a * logit(s) + b)`, fitted on held-out labels.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{clamp_prob, logit, sigmoid, softplus, PROB_EPS};

/// Magnitude cap on both Platt coefficients.
pub const COEFFICIENT_CAP: f64 = 40.0;
const MAX_ITER: usize = 200;
const GRADIENT_TOL: f64 = 1e-8;

/// Which units a score set describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Population {
    ValidationObserved,
    ValidationMissing,
    All,
}

/// Per-unit probabilities, kept inside `[1e-6, 1 - 1e-6]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    scores: Vec<f64>,
    calibrated: bool,
    population: Population,
}

impl ScoreSet {
    /// Validates that every score is a probability and clamps it inward.
    pub fn new(scores: Vec<f64>, calibrated: bool, population: Population) -> Result<Self> {
        if let Some(bad) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::InvalidArgument(format!("score {bad} is not a probability")));
        }
        Ok(ScoreSet { scores: scores.into_iter().map(clamp_prob).collect(), calibrated, population })
    }

    pub fn raw(scores: Vec<f64>, population: Population) -> Result<Self> {
        ScoreSet::new(scores, false, population)
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn is_calibrated(&self) -> bool {
        self.calibrated
    }

    pub fn population(&self) -> Population {
        self.population
    }

    /// Scores at the given positions, same flags.
    pub fn select(&self, indices: &[usize]) -> ScoreSet {
        ScoreSet {
            scores: indices.iter().map(|&i| self.scores[i]).collect(),
            calibrated: self.calibrated,
            population: self.population,
        }
    }

    /// `s -> 1 - s`.
    pub fn complement(&self) -> ScoreSet {
        ScoreSet { scores: self.scores.iter().map(|s| clamp_prob(1.0 - s)).collect(), ..self.clone() }
    }

    pub fn mean(&self) -> f64 {
        crate::math::mean(&self.scores)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlattParams {
    /// The `1/T` coefficient on the raw logit.
    pub inv_temperature: f64,
    pub offset: f64,
}

impl PlattParams {
    pub const IDENTITY: PlattParams = PlattParams { inv_temperature: 1.0, offset: 0.0 };

    pub fn transform(&self, score: f64) -> f64 {
        clamp_prob(sigmoid(self.inv_temperature * logit(score) + self.offset))
    }
}

/// Result of a Platt fit, with the in-sample log loss before and after.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlattFit {
    pub params: PlattParams,
    pub pre_log_loss: f64,
    pub post_log_loss: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Set when every label was identical; the offset then runs to the cap.
    pub degenerate_labels: bool,
}

/// Distinct `(logit, label)` pairs with their total weight, ordered by pair.
struct Rows {
    z: Vec<f64>,
    y: Vec<f64>,
    w: Vec<f64>,
    total: f64,
}

impl Rows {
    fn group(scores: &[f64], labels: &[u8], weights: &[f64]) -> Rows {
        let mut tally: BTreeMap<(u64, u8), (f64, f64)> = BTreeMap::new();
        for ((&s, &label), &w) in scores.iter().zip(labels).zip(weights) {
            tally.entry((s.to_bits(), label)).or_insert((s, 0.0)).1 += w;
        }
        let mut rows = Rows { z: vec![], y: vec![], w: vec![], total: 0.0 };
        for ((_, label), (s, w)) in tally {
            if w > 0.0 {
                rows.z.push(logit(s));
                rows.y.push(f64::from(label));
                rows.w.push(w);
                rows.total += w;
            }
        }
        rows
    }

    fn objective(&self, a: f64, b: f64) -> f64 {
        let mut f = 0.0;
        for i in 0..self.z.len() {
            let t = a * self.z[i] + b;
            f += self.w[i] * (softplus(t) - self.y[i] * t);
        }
        f / self.total
    }

    fn grad_hess(&self, a: f64, b: f64) -> ([f64; 2], [[f64; 2]; 2]) {
        let mut g = [0.0; 2];
        let mut h = [[0.0; 2]; 2];
        for i in 0..self.z.len() {
            let (z, w) = (self.z[i], self.w[i]);
            let p = sigmoid(a * z + b);
            let r = w * (p - self.y[i]);
            let curv = w * p * (1.0 - p);
            g[0] += r * z;
            g[1] += r;
            h[0][0] += curv * z * z;
            h[0][1] += curv * z;
            h[1][1] += curv;
        }
        let n = self.total;
        g.iter_mut().for_each(|v| *v /= n);
        h[0][0] /= n;
        h[0][1] /= n;
        h[1][1] /= n;
        h[1][0] = h[0][1];
        (g, h)
    }

    /// Weighted log loss of the clamped transformed scores.
    fn log_loss(&self, params: &PlattParams) -> f64 {
        let mut total = 0.0;
        for i in 0..self.z.len() {
            let p = clamp_prob(sigmoid(params.inv_temperature * self.z[i] + params.offset));
            total -= self.w[i] * if self.y[i] == 1.0 { p.ln() } else { (1.0 - p).ln() };
        }
        total / self.total
    }
}

/// Newton direction for the 2x2 system, with Levenberg damping when the
/// Hessian is singular (e.g. every raw logit equal to zero).
fn direction(g: [f64; 2], h: [[f64; 2]; 2]) -> [f64; 2] {
    let scale = h[0][0].max(h[1][1]).max(1e-300);
    let mut damping = 0.0;
    loop {
        let a = h[0][0] + damping;
        let d = h[1][1] + damping;
        let det = a * d - h[0][1] * h[1][0];
        if a > 0.0 && det > 1e-14 * scale * scale {
            return [(d * g[0] - h[0][1] * g[1]) / det, (a * g[1] - h[1][0] * g[0]) / det];
        }
        damping = if damping == 0.0 { 1e-10 * scale } else { damping * 10.0 };
        if damping > 1e10 {
            return g;
        }
    }
}

fn project(v: f64) -> f64 {
    v.clamp(-COEFFICIENT_CAP, COEFFICIENT_CAP)
}

/// Gradient with components that push against an active bound zeroed.
fn projected_gradient(g: [f64; 2], theta: [f64; 2]) -> [f64; 2] {
    let mut pg = g;
    for i in 0..2 {
        if (theta[i] >= COEFFICIENT_CAP && g[i] < 0.0) || (theta[i] <= -COEFFICIENT_CAP && g[i] > 0.0) {
            pg[i] = 0.0;
        }
    }
    pg
}

/// Fits `(1/T, b)` by Newton's method on the mean log loss, starting from the
/// identity transform.
pub fn fit_platt(raw_scores: &ScoreSet, labels: &[u8]) -> Result<PlattFit> {
    fit_platt_weighted(raw_scores, labels, &vec![1.0; labels.len()])
}

/// Platt fit with per-unit frequency weights, as produced by resampling.
pub fn fit_platt_weighted(raw_scores: &ScoreSet, labels: &[u8], weights: &[f64]) -> Result<PlattFit> {
    if raw_scores.len() != labels.len() || labels.len() != weights.len() {
        return Err(Error::InvalidArgument(format!(
            "{} scores, {} labels and {} weights",
            raw_scores.len(),
            labels.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
        return Err(Error::InvalidArgument("weights must be finite and non-negative".into()));
    }
    let rows = Rows::group(raw_scores.scores(), labels, weights);
    if labels.len() < 2 || rows.total <= 0.0 {
        return Err(Error::InsufficientData("Platt scaling needs at least 2 labelled scores".into()));
    }
    let degenerate_labels = rows.y.iter().all(|&v| v == rows.y[0]);
    if degenerate_labels {
        log::warn!("Platt scaling fitted on labels that are all {}", rows.y[0]);
    }

    let mut theta = [1.0, 0.0];
    let mut f = rows.objective(theta[0], theta[1]);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < MAX_ITER {
        let (g, h) = rows.grad_hess(theta[0], theta[1]);
        let pg = projected_gradient(g, theta);
        if pg[0].abs().max(pg[1].abs()) <= GRADIENT_TOL {
            converged = true;
            break;
        }
        iterations += 1;
        let mut moved = false;
        for dir in [direction(g, h), g] {
            let mut step = 1.0;
            for _ in 0..60 {
                let cand = [project(theta[0] - step * dir[0]), project(theta[1] - step * dir[1])];
                let f_new = rows.objective(cand[0], cand[1]);
                if f_new < f || (f_new <= f && cand != theta) {
                    theta = cand;
                    f = f_new;
                    moved = true;
                    break;
                }
                step *= 0.5;
            }
            if moved {
                break;
            }
        }
        if !moved {
            // No representable decrease remains.
            converged = degenerate_labels || pg[0].abs().max(pg[1].abs()) <= 1e-6;
            break;
        }
    }

    let pre_log_loss = rows.log_loss(&PlattParams::IDENTITY);
    let mut params = PlattParams { inv_temperature: theta[0], offset: theta[1] };
    let mut post_log_loss = rows.log_loss(&params);
    if post_log_loss > pre_log_loss {
        // Output clamping can cost more than the fit gained; the identity
        // transform is always available.
        params = PlattParams::IDENTITY;
        post_log_loss = pre_log_loss;
    }
    Ok(PlattFit { params, pre_log_loss, post_log_loss, iterations, converged, degenerate_labels })
}

pub fn apply_platt(params: &PlattParams, raw_scores: &ScoreSet) -> ScoreSet {
    ScoreSet {
        scores: raw_scores.scores().iter().map(|&s| params.transform(s)).collect(),
        calibrated: true,
        population: raw_scores.population(),
    }
}

/// Lower clamp bound, re-exported for callers checking emitted probabilities.
pub const SCORE_FLOOR: f64 = PROB_EPS;
