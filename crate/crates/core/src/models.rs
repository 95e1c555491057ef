//! Discriminative models for `P(Y | X, M = 0)` and `P(M | X)`.
//!
//! Two model families are provided: a Bernoulli naive Bayes classifier with
//! Laplace smoothing, and an L2-regularized logistic regression fitted by
//! damped Newton iterations, with k-fold cross-validation over the penalty.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::math::{clamp_prob, log_loss_logit, mean_log_loss, sigmoid};

pub const DEFAULT_ALPHA: f64 = 1.0;
pub const DEFAULT_FOLDS: usize = 10;
pub const GRADIENT_TOL: f64 = 1e-8;
pub const MAX_NEWTON_ITER: usize = 500;

/// Which binary column a model is trained to predict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSelector {
    /// The outcome `y`; only observed units take part.
    Outcome,
    /// The missingness flag `m`; every unit takes part.
    Missingness,
}

/// `(covariates, label)` pairs selected from a dataset.
fn labelled_rows(data: &Dataset, selector: LabelSelector) -> Result<Vec<(&[u8], u8)>> {
    let rows: Vec<_> = match selector {
        LabelSelector::Outcome => {
            if data.n_missing() > 0 {
                return Err(Error::InvalidArgument(
                    "outcome models train on observed units only".into(),
                ));
            }
            data.units().iter().filter_map(|u| u.y().map(|y| (u.x(), y))).collect()
        }
        LabelSelector::Missingness => data.units().iter().map(|u| (u.x(), u.m())).collect(),
    };
    if rows.is_empty() {
        return Err(Error::InsufficientData("training set is empty".into()));
    }
    Ok(rows)
}

fn check_dim(expected: usize, x: &[u8]) -> Result<()> {
    if x.len() != expected {
        return Err(Error::InvalidArgument(format!(
            "covariate dimension {} does not match model dimension {expected}",
            x.len()
        )));
    }
    Ok(())
}

/// Common prediction surface of the fitted models.
pub trait Classifier {
    fn dim(&self) -> usize;

    /// `P(label = 1 | x)`, clamped to `[1e-6, 1 - 1e-6]`.
    fn predict(&self, x: &[u8]) -> Result<f64>;

    fn predict_dataset(&self, data: &Dataset) -> Result<Vec<f64>> {
        data.units().iter().map(|u| self.predict(u.x())).collect()
    }
}

// ---------------------------------------------------------------------------
// Naive Bayes

/// Bernoulli naive Bayes over binary covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NaiveBayesModel {
    /// `ln P(class = 1)`.
    pub log_prior: f64,
    /// `log_cond[d][c] = ln P(x_d = 1 | class = c)`.
    pub log_cond: Vec<[f64; 2]>,
    pub alpha: f64,
}

pub fn fit_naive_bayes(train: &Dataset, alpha: f64) -> Result<NaiveBayesModel> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidArgument(format!("smoothing must be positive, got {alpha}")));
    }
    let dim = train.dim();
    let mut class_counts = [0u64; 2];
    let mut ones = vec![[0u64; 2]; dim];
    for unit in train.units() {
        let Some(y) = unit.y() else { continue };
        let c = usize::from(y);
        class_counts[c] += 1;
        for (d, &v) in unit.x().iter().enumerate() {
            ones[d][c] += u64::from(v);
        }
    }
    let n = class_counts[0] + class_counts[1];
    if n == 0 {
        return Err(Error::InsufficientData("naive Bayes needs at least one observed unit".into()));
    }
    let prior = (class_counts[1] as f64 + alpha) / (n as f64 + 2.0 * alpha);
    let log_cond = ones
        .iter()
        .map(|counts| {
            let mut row = [0.0; 2];
            for c in 0..2 {
                row[c] = ((counts[c] as f64 + alpha) / (class_counts[c] as f64 + 2.0 * alpha)).ln();
            }
            row
        })
        .collect();
    Ok(NaiveBayesModel { log_prior: prior.ln(), log_cond, alpha })
}

/// `ln(1 - exp(a))` for `a < 0`.
fn log1m_exp(a: f64) -> f64 {
    if a > -std::f64::consts::LN_2 {
        (-a.exp_m1()).ln()
    } else {
        (-a.exp()).ln_1p()
    }
}

impl NaiveBayesModel {
    pub fn prior(&self) -> f64 {
        self.log_prior.exp()
    }

    /// `P(x_d = 1 | class)`.
    pub fn conditional(&self, d: usize, class: usize) -> f64 {
        self.log_cond[d][class].exp()
    }

    /// Class log-joint `ln P(x, class)` for both classes.
    fn log_joint(&self, x: &[u8]) -> [f64; 2] {
        let mut acc = [log1m_exp(self.log_prior), self.log_prior];
        for (row, &v) in self.log_cond.iter().zip(x) {
            for c in 0..2 {
                acc[c] += if v == 1 { row[c] } else { log1m_exp(row[c]) };
            }
        }
        acc
    }
}

impl Classifier for NaiveBayesModel {
    fn dim(&self) -> usize {
        self.log_cond.len()
    }

    fn predict(&self, x: &[u8]) -> Result<f64> {
        check_dim(self.dim(), x)?;
        let [l0, l1] = self.log_joint(x);
        // P(1|x) = sigma(l1 - l0), the two-class log-sum-exp in closed form.
        Ok(clamp_prob(sigmoid(l1 - l0)))
    }
}

// ---------------------------------------------------------------------------
// Logistic regression

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub lambda: f64,
}

impl LogisticModel {
    pub fn linear_predictor(&self, x: &[u8]) -> f64 {
        self.intercept
            + self
                .weights
                .iter()
                .zip(x)
                .filter(|(_, &v)| v == 1)
                .map(|(w, _)| w)
                .sum::<f64>()
    }
}

impl Classifier for LogisticModel {
    fn dim(&self) -> usize {
        self.weights.len()
    }

    fn predict(&self, x: &[u8]) -> Result<f64> {
        check_dim(self.dim(), x)?;
        Ok(clamp_prob(sigmoid(self.linear_predictor(x))))
    }
}

/// Distinct covariate patterns with their label counts, in lexicographic
/// pattern order. Working on this table makes the fit independent of the
/// order of the training units.
pub(crate) struct PatternTable {
    /// `n_patterns x (dim + 1)`, last column is the intercept.
    design: DMatrix<f64>,
    design_t: DMatrix<f64>,
    negatives: DVector<f64>,
    positives: DVector<f64>,
    total: f64,
    dim: usize,
}

impl PatternTable {
    pub(crate) fn new(rows: &[(&[u8], u8)], dim: usize) -> Self {
        let mut table: BTreeMap<&[u8], [u64; 2]> = BTreeMap::new();
        for &(x, y) in rows {
            table.entry(x).or_default()[usize::from(y)] += 1;
        }
        let n = table.len();
        let p = dim + 1;
        let mut design = DMatrix::zeros(n, p);
        let mut negatives = DVector::zeros(n);
        let mut positives = DVector::zeros(n);
        for (r, (x, counts)) in table.iter().enumerate() {
            for (d, &v) in x.iter().enumerate() {
                design[(r, d)] = f64::from(v);
            }
            design[(r, dim)] = 1.0;
            negatives[r] = counts[0] as f64;
            positives[r] = counts[1] as f64;
        }
        let design_t = design.transpose();
        PatternTable { design, design_t, negatives, positives, total: rows.len() as f64, dim }
    }

    /// Penalized mean log loss at `theta = (weights, intercept)`.
    fn objective(&self, theta: &DVector<f64>, lambda: f64) -> f64 {
        let z = &self.design * theta;
        let mut loss = 0.0;
        for r in 0..z.len() {
            loss += self.negatives[r] * log_loss_logit(z[r], 0.0)
                + self.positives[r] * log_loss_logit(z[r], 1.0);
        }
        let penalty: f64 = theta.rows(0, self.dim).iter().map(|w| w * w).sum();
        loss / self.total + 0.5 * lambda * penalty
    }

    fn gradient_hessian(&self, theta: &DVector<f64>, lambda: f64) -> (DVector<f64>, DMatrix<f64>) {
        let z = &self.design * theta;
        let n = z.len();
        let mut resid = DVector::zeros(n);
        let mut curv = DVector::zeros(n);
        for r in 0..n {
            let p = sigmoid(z[r]);
            let count = self.negatives[r] + self.positives[r];
            resid[r] = (count * p - self.positives[r]) / self.total;
            curv[r] = count * p * (1.0 - p) / self.total;
        }
        let mut grad = &self.design_t * resid;
        let mut scaled_t = self.design_t.clone();
        for (r, mut col) in scaled_t.column_iter_mut().enumerate() {
            col *= curv[r];
        }
        let mut hess = scaled_t * &self.design;
        for d in 0..self.dim {
            grad[d] += lambda * theta[d];
            hess[(d, d)] += lambda;
        }
        (grad, hess)
    }

    fn gradient(&self, theta: &DVector<f64>, lambda: f64) -> DVector<f64> {
        self.gradient_hessian(theta, lambda).0
    }
}

/// Solves `H d = g`, adding Levenberg damping when `H` is not positive definite.
fn newton_direction(hess: &DMatrix<f64>, grad: &DVector<f64>) -> DVector<f64> {
    if let Some(chol) = hess.clone().cholesky() {
        return chol.solve(grad);
    }
    let scale = hess.diagonal().iter().fold(0.0f64, |a, &b| a.max(b.abs())).max(1e-12);
    let mut damping = 1e-10 * scale;
    loop {
        let mut damped = hess.clone();
        for i in 0..damped.nrows() {
            damped[(i, i)] += damping;
        }
        if let Some(chol) = damped.cholesky() {
            return chol.solve(grad);
        }
        damping *= 10.0;
    }
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0f64, |a, &b| a.max(b.abs()))
}

/// Stopping rule for the Newton solver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonSettings {
    /// Convergence when the gradient infinity-norm falls to this value.
    pub gradient_tol: f64,
    pub max_iter: usize,
}

impl Default for NewtonSettings {
    fn default() -> Self {
        NewtonSettings { gradient_tol: GRADIENT_TOL, max_iter: MAX_NEWTON_ITER }
    }
}

/// Damped Newton minimization of the penalized mean log loss.
fn minimize_logistic(
    table: &PatternTable,
    lambda: f64,
    init: DVector<f64>,
    settings: &NewtonSettings,
) -> Result<(DVector<f64>, usize)> {
    let mut theta = init;
    let mut f = table.objective(&theta, lambda);
    for iter in 0..settings.max_iter {
        let (grad, hess) = table.gradient_hessian(&theta, lambda);
        let gnorm = inf_norm(&grad);
        if gnorm <= settings.gradient_tol {
            return Ok((theta, iter));
        }
        let mut accepted = false;
        for direction in [newton_direction(&hess, &grad), grad.clone()] {
            let slope = -grad.dot(&direction);
            if slope >= 0.0 {
                continue;
            }
            let mut step = 1.0;
            for _ in 0..60 {
                let candidate = &theta - step * &direction;
                let f_new = table.objective(&candidate, lambda);
                // The absolute slack absorbs rounding once the decrease reaches
                // machine precision.
                if f_new <= f + 1e-4 * step * slope + 1e-15 * f.abs().max(1.0) {
                    theta = candidate;
                    f = f_new;
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if accepted {
                break;
            }
        }
        if !accepted {
            return Err(Error::Convergence { iterations: iter, grad_norm: gnorm });
        }
    }
    let gnorm = inf_norm(&table.gradient(&theta, lambda));
    if gnorm <= settings.gradient_tol {
        Ok((theta, settings.max_iter))
    } else {
        Err(Error::Convergence { iterations: settings.max_iter, grad_norm: gnorm })
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!("penalty must be finite and >= 0, got {lambda}")));
    }
    Ok(())
}

fn model_from_theta(theta: &DVector<f64>, dim: usize, lambda: f64) -> LogisticModel {
    LogisticModel { weights: theta.rows(0, dim).iter().copied().collect(), intercept: theta[dim], lambda }
}

/// Fits `min mean log loss + (lambda / 2) |w|^2` with an unpenalized intercept.
pub fn fit_logistic(train: &Dataset, selector: LabelSelector, lambda: f64) -> Result<LogisticModel> {
    fit_logistic_from(train, selector, lambda, None)
}

/// As [`fit_logistic`], starting the optimizer at `init = (weights, intercept)`.
pub fn fit_logistic_from(
    train: &Dataset,
    selector: LabelSelector,
    lambda: f64,
    init: Option<&LogisticModel>,
) -> Result<LogisticModel> {
    fit_logistic_with(train, selector, lambda, init, &NewtonSettings::default())
}

pub fn fit_logistic_with(
    train: &Dataset,
    selector: LabelSelector,
    lambda: f64,
    init: Option<&LogisticModel>,
    settings: &NewtonSettings,
) -> Result<LogisticModel> {
    check_lambda(lambda)?;
    let rows = labelled_rows(train, selector)?;
    let table = PatternTable::new(&rows, train.dim());
    let start = theta_from(init, train.dim())?;
    let (theta, _) = minimize_logistic(&table, lambda, start, settings)?;
    Ok(model_from_theta(&theta, train.dim(), lambda))
}

fn theta_from(init: Option<&LogisticModel>, dim: usize) -> Result<DVector<f64>> {
    match init {
        None => Ok(DVector::zeros(dim + 1)),
        Some(m) => {
            if m.weights.len() != dim {
                return Err(Error::InvalidArgument("initial weights have the wrong dimension".into()));
            }
            let mut theta = DVector::zeros(dim + 1);
            theta.rows_mut(0, dim).copy_from_slice(&m.weights);
            theta[dim] = m.intercept;
            Ok(theta)
        }
    }
}

/// Penalized objective of a model on a dataset, for optimizer diagnostics.
pub fn logistic_objective(model: &LogisticModel, data: &Dataset, selector: LabelSelector) -> Result<f64> {
    let rows = labelled_rows(data, selector)?;
    let table = PatternTable::new(&rows, data.dim());
    let theta = theta_from(Some(model), data.dim())?;
    Ok(table.objective(&theta, model.lambda))
}

/// Analytic gradient of the penalized objective, `(weights..., intercept)`.
pub fn logistic_gradient(model: &LogisticModel, data: &Dataset, selector: LabelSelector) -> Result<Vec<f64>> {
    let rows = labelled_rows(data, selector)?;
    let table = PatternTable::new(&rows, data.dim());
    let theta = theta_from(Some(model), data.dim())?;
    Ok(table.gradient(&theta, model.lambda).iter().copied().collect())
}

// ---------------------------------------------------------------------------
// Cross-validation

/// Penalty grid log-spaced over `[1e-4, 1e2]`.
pub fn default_lambda_grid() -> Vec<f64> {
    (-4..=2).map(|e| 10f64.powi(e)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub grid: Vec<f64>,
    pub mean_loss: Vec<f64>,
    pub chosen: f64,
}

/// Seeded k-fold assignment; fold sizes differ by at most one.
pub fn kfold_assignment(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold[i] = pos % k;
    }
    fold
}

/// Mean held-out log loss for each penalty, averaged over `k` folds.
/// Ties in the argmin resolve toward the larger penalty.
pub fn cross_validate(
    train: &Dataset,
    selector: LabelSelector,
    grid: &[f64],
    k: usize,
    seed: u64,
) -> Result<CvReport> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("penalty grid is empty".into()));
    }
    for &l in grid {
        check_lambda(l)?;
    }
    if k < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 folds, got {k}")));
    }
    let rows = labelled_rows(train, selector)?;
    if rows.len() < k {
        return Err(Error::InvalidArgument(format!("{} units cannot fill {k} folds", rows.len())));
    }
    let folds = kfold_assignment(rows.len(), k, seed);
    let dim = train.dim();

    // Penalties are visited from largest to smallest so each fit warm-starts
    // from the next-smoother solution.
    let mut order: Vec<usize> = (0..grid.len()).collect();
    order.sort_by(|&a, &b| grid[b].total_cmp(&grid[a]));

    let mut loss_sum = vec![0.0; grid.len()];
    for fold in 0..k {
        let (fit_rows, held): (Vec<_>, Vec<_>) =
            rows.iter().zip(&folds).partition(|(_, &f)| f != fold);
        let fit_rows: Vec<(&[u8], u8)> = fit_rows.into_iter().map(|(r, _)| *r).collect();
        let held: Vec<(&[u8], u8)> = held.into_iter().map(|(r, _)| *r).collect();
        let table = PatternTable::new(&fit_rows, dim);
        let mut theta = DVector::zeros(dim + 1);
        for &gi in &order {
            let (solution, _) = minimize_logistic(&table, grid[gi], theta, &NewtonSettings::default())?;
            let model = model_from_theta(&solution, dim, grid[gi]);
            let probs: Vec<f64> = held.iter().map(|(x, _)| clamp_prob(sigmoid(model.linear_predictor(x)))).collect();
            let labels: Vec<u8> = held.iter().map(|(_, y)| *y).collect();
            loss_sum[gi] += mean_log_loss(&probs, &labels);
            theta = solution;
        }
    }
    let mean_loss: Vec<f64> = loss_sum.iter().map(|s| s / k as f64).collect();
    let mut best = 0;
    for i in 1..grid.len() {
        let better = mean_loss[i] < mean_loss[best]
            || (mean_loss[i] == mean_loss[best] && grid[i] > grid[best]);
        if better {
            best = i;
        }
    }
    Ok(CvReport { grid: grid.to_vec(), mean_loss, chosen: grid[best] })
}

/// Cross-validates the penalty and refits on the full training set.
pub fn fit_logistic_cv(
    train: &Dataset,
    selector: LabelSelector,
    grid: &[f64],
    k: usize,
    seed: u64,
) -> Result<(LogisticModel, CvReport)> {
    let report = cross_validate(train, selector, grid, k, seed)?;
    let model = fit_logistic(train, selector, report.chosen)?;
    Ok((model, report))
}

// ---------------------------------------------------------------------------

/// Serializable form of any fitted model, tagged by `kind`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FittedModel {
    NaiveBayes(NaiveBayesModel),
    Logistic(LogisticModel),
}

impl Classifier for FittedModel {
    fn dim(&self) -> usize {
        match self {
            FittedModel::NaiveBayes(m) => m.dim(),
            FittedModel::Logistic(m) => m.dim(),
        }
    }

    fn predict(&self, x: &[u8]) -> Result<f64> {
        match self {
            FittedModel::NaiveBayes(m) => m.predict(x),
            FittedModel::Logistic(m) => m.predict(x),
        }
    }
}
