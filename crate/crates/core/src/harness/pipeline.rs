//! The end-to-end estimation routine on one dataset.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::calibrate::{apply_platt, fit_platt, fit_platt_weighted, PlattFit, Population, ScoreSet};
use crate::coherence::{coherence_score, CoherenceResult, PropensityPair};
use crate::data::{observed_prevalence, seeded_partition, split_data, Dataset, Estimate, Method};
use crate::estimators::{
    bootstrap_estimate, draw_counts, em_label_shift, em_label_shift_weighted, estimate_mom, full_sample,
    ipw_from_weights, ipw_weights, EmSettings, IpwOptions, MomEstimate, ProxyFit,
};
use crate::error::{Error, Result};
use crate::models::{
    default_lambda_grid, fit_logistic_cv, fit_naive_bayes, Classifier, CvReport, FittedModel, LabelSelector,
    LogisticModel, DEFAULT_ALPHA, DEFAULT_FOLDS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    NaiveBayes,
    Logistic,
}

/// What a bootstrap replicate resamples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BootstrapScope {
    /// Only the scores each estimator consumes; calibration maps stay fixed.
    Inputs,
    /// The calibration units as well, refitting Platt maps and the source
    /// prevalence inside every replicate.
    Recalibrate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOptions {
    pub model_kind: ModelKind,
    /// Compute the Platt-calibrated estimators and coherence score.
    pub calibrate: bool,
    pub ipw_clip_quantile: Option<f64>,
    pub bootstrap_b: usize,
    pub split_fraction: f64,
    pub seed: u64,
    pub coherence_population: Population,
    pub bootstrap_scope: BootstrapScope,
    pub nb_alpha: f64,
    pub cv_folds: usize,
    pub lambda_grid: Vec<f64>,
    pub em: EmSettings,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            model_kind: ModelKind::Logistic,
            calibrate: true,
            ipw_clip_quantile: None,
            bootstrap_b: 1000,
            split_fraction: 0.5,
            seed: 0,
            coherence_population: Population::All,
            bootstrap_scope: BootstrapScope::Recalibrate,
            nb_alpha: DEFAULT_ALPHA,
            cv_folds: DEFAULT_FOLDS,
            lambda_grid: default_lambda_grid(),
            em: EmSettings::default(),
        }
    }
}

impl PipelineOptions {
    pub fn validate(&self) -> Result<()> {
        if self.bootstrap_b == 0 {
            return Err(Error::InvalidArgument("bootstrap_b must be at least 1".into()));
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!("split_fraction must lie in (0, 1), got {}", self.split_fraction)));
        }
        if let Some(q) = self.ipw_clip_quantile {
            if !(q > 0.0 && q <= 1.0) {
                return Err(Error::InvalidArgument(format!("ipw_clip_quantile must lie in (0, 1], got {q}")));
            }
        }
        Ok(())
    }

    /// Methods a run reports, in output order.
    pub fn methods(&self, dim: usize) -> Vec<Method> {
        Method::ALL
            .into_iter()
            .filter(|m| self.calibrate || !m.is_calibrated())
            .filter(|m| *m != Method::Mom || dim == 1)
            .collect()
    }
}

/// SplitMix64 finalizer, used to derive independent seeds from one run seed.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSeeds {
    pub split: u64,
    pub propensity_split: u64,
    pub outcome_cv: u64,
    pub propensity_cv: u64,
    pub bootstrap: BTreeMap<Method, u64>,
}

impl RunSeeds {
    fn new(seed: u64) -> Self {
        RunSeeds {
            split: derive_seed(seed, 1),
            propensity_split: derive_seed(seed, 2),
            outcome_cv: derive_seed(seed, 3),
            propensity_cv: derive_seed(seed, 4),
            bootstrap: Method::ALL.into_iter().map(|m| (m, derive_seed(seed, 100 + m as u64))).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub options: PipelineOptions,
    pub n_units: usize,
    pub dim: usize,
    pub n_train: usize,
    pub n_validation_observed: usize,
    pub n_validation_missing: usize,
    pub n_propensity_validation_missing: usize,
    pub seeds: RunSeeds,
    pub outcome_model: FittedModel,
    pub outcome_cv: Option<CvReport>,
    pub propensity_model: LogisticModel,
    pub propensity_cv: CvReport,
    pub outcome_platt: Option<PlattFit>,
    pub propensity_platt: Option<PlattFit>,
    pub train_prevalence: f64,
    pub validation_prevalence: f64,
    pub missing_rate: f64,
    pub proxy_fit: ProxyFit,
    pub cproxy_fit: Option<ProxyFit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub estimates: Vec<Estimate>,
    pub coherence_calibrated: Option<CoherenceResult>,
    pub coherence_uncalibrated: CoherenceResult,
    pub manifest: RunManifest,
}

impl RunResult {
    pub fn estimate(&self, method: Method) -> Option<&Estimate> {
        self.estimates.iter().find(|e| e.method == method)
    }
}

fn prevalence_of(labels: &[u8], weights: &[f64]) -> f64 {
    let total: f64 = weights.iter().sum();
    labels.iter().zip(weights).map(|(&y, &w)| f64::from(y) * w).sum::<f64>() / total
}

fn interior_prevalence(p: f64, what: &str) -> Result<f64> {
    if p > 0.0 && p < 1.0 {
        Ok(p)
    } else {
        Err(Error::InsufficientData(format!("{what} prevalence is {p}; both classes are needed")))
    }
}

fn scores_on(model: &dyn Classifier, data: &Dataset, population: Population) -> Result<ScoreSet> {
    ScoreSet::raw(model.predict_dataset(data)?, population)
}

/// Runs split, outcome model, calibration, EM, propensity model, the
/// ignorable estimators, bootstrap intervals and both coherence scores.
pub fn run_pipeline(dataset: &Dataset, options: &PipelineOptions) -> Result<RunResult> {
    options.validate()?;
    if dataset.n_observed() < 10 || dataset.n_missing() < 1 {
        return Err(Error::InsufficientData(format!(
            "need at least 10 observed and 1 missing unit, found {} and {}",
            dataset.n_observed(),
            dataset.n_missing()
        )));
    }
    let seeds = RunSeeds::new(options.seed);
    let dim = dataset.dim();
    let split = split_data(dataset, options.split_fraction, seeds.split).map_err(|e| e.at_step("split"))?;
    let val_obs = &split.validation_observed;
    let val_mis = &split.validation_missing;
    let obs_labels = val_obs.observed_labels();

    // Outcome model on the training half.
    let train_labels = split.train.observed_labels();
    if train_labels.iter().all(|&y| y == train_labels[0]) {
        return Err(Error::Pipeline {
            step: "fit_outcome_model",
            message: format!("training labels are all {}", train_labels[0]),
        });
    }
    let (outcome_model, outcome_cv) = match options.model_kind {
        ModelKind::NaiveBayes => (FittedModel::NaiveBayes(fit_naive_bayes(&split.train, options.nb_alpha)?), None),
        ModelKind::Logistic => {
            let (m, cv) = fit_logistic_cv(
                &split.train,
                LabelSelector::Outcome,
                &options.lambda_grid,
                options.cv_folds,
                seeds.outcome_cv,
            )
            .map_err(|e| e.at_step("fit_outcome_model"))?;
            (FittedModel::Logistic(m), Some(cv))
        }
    };
    let train_prevalence = interior_prevalence(observed_prevalence(&split.train)?, "training")
        .map_err(|e| e.at_step("fit_outcome_model"))?;
    let raw_obs = scores_on(&outcome_model, val_obs, Population::ValidationObserved)?;
    let raw_mis = scores_on(&outcome_model, val_mis, Population::ValidationMissing)?;
    let validation_prevalence = observed_prevalence(val_obs)?;

    // Propensity model: the same train/validation cut applied to the missing units.
    let missing_idx: Vec<usize> = split.validation_missing_indices.clone();
    let (prop_train_mis, prop_val_mis) = seeded_partition(&missing_idx, options.split_fraction, seeds.propensity_split);
    let prop_train = if prop_train_mis.is_empty() {
        split.train.clone()
    } else {
        split.train.concat(&dataset.subset(&prop_train_mis))?
    };
    let (propensity_model, propensity_cv) = fit_logistic_cv(
        &prop_train,
        LabelSelector::Missingness,
        &options.lambda_grid,
        options.cv_folds,
        seeds.propensity_cv,
    )
    .map_err(|e| e.at_step("fit_propensity_model"))?;
    let pool = if prop_val_mis.is_empty() { val_obs.clone() } else { val_obs.concat(&dataset.subset(&prop_val_mis))? };
    let pool_m = pool.missingness_labels();
    let n_vo = val_obs.len();
    let n_pm = prop_val_mis.len();
    let raw_prop_pool = scores_on(&propensity_model, &pool, Population::All)?;

    // Calibration maps.
    let (outcome_platt, propensity_platt) = if options.calibrate {
        let o = fit_platt(&raw_obs, &obs_labels).map_err(|e| e.at_step("calibrate_outcome"))?;
        let p = fit_platt(&raw_prop_pool, &pool_m).map_err(|e| e.at_step("calibrate_propensity"))?;
        (Some(o), Some(p))
    } else {
        (None, None)
    };
    let cal_mis = outcome_platt.map(|f| apply_platt(&f.params, &raw_mis));
    let cal_prop_pool = propensity_platt.map(|f| apply_platt(&f.params, &raw_prop_pool));

    let b = options.bootstrap_b;
    let ipw_opts = IpwOptions {
        clip_quantile: options.ipw_clip_quantile,
        normalize: true,
        missing_rate: Some(dataset.missing_rate()),
    };
    let recalibrate = options.bootstrap_scope == BootstrapScope::Recalibrate;
    let first_n = |v: &[f64]| v[..n_vo].to_vec();

    let mut estimates = Vec::new();
    let mut proxy_fit = None;
    let mut cproxy_fit = None;
    for method in options.methods(dim) {
        let seed = seeds.bootstrap[&method];
        let step = method.as_str();
        let est = match method {
            Method::Cc => bootstrap_estimate(method, &[n_vo], b, seed, |d| {
                Ok(prevalence_of(&obs_labels, &draw_counts(&d[0], n_vo)))
            }),
            Method::Ipw => {
                let w = first_n(&ipw_weights(&raw_prop_pool));
                bootstrap_estimate(method, &[n_vo], b, seed, |d| {
                    let labels: Vec<u8> = d[0].iter().map(|&i| obs_labels[i]).collect();
                    let ws: Vec<f64> = d[0].iter().map(|&i| w[i]).collect();
                    ipw_from_weights(&labels, &ws, &ipw_opts)
                })
            }
            Method::Cipw => {
                let cal = cal_prop_pool.as_ref().expect("calibrated");
                if recalibrate && n_pm > 0 {
                    bootstrap_estimate(method, &[n_vo, n_pm], b, seed, |d| {
                        let mut counts = draw_counts(&d[0], n_vo);
                        counts.extend(draw_counts(&d[1], n_pm));
                        let fit = fit_platt_weighted(&raw_prop_pool, &pool_m, &counts)?;
                        let labels: Vec<u8> = d[0].iter().map(|&i| obs_labels[i]).collect();
                        let ws: Vec<f64> = d[0]
                            .iter()
                            .map(|&i| {
                                let e = fit.params.transform(raw_prop_pool.scores()[i]);
                                e / (1.0 - e)
                            })
                            .collect();
                        ipw_from_weights(&labels, &ws, &ipw_opts)
                    })
                } else {
                    let w = first_n(&ipw_weights(cal));
                    bootstrap_estimate(method, &[n_vo], b, seed, |d| {
                        let labels: Vec<u8> = d[0].iter().map(|&i| obs_labels[i]).collect();
                        let ws: Vec<f64> = d[0].iter().map(|&i| w[i]).collect();
                        ipw_from_weights(&labels, &ws, &ipw_opts)
                    })
                }
            }
            Method::Direct => bootstrap_estimate(method, &[val_mis.len()], b, seed, |d| {
                Ok(raw_mis.select(&d[0]).mean())
            }),
            Method::Cdirect => {
                let cal = cal_mis.as_ref().expect("calibrated");
                if recalibrate {
                    bootstrap_estimate(method, &[n_vo, val_mis.len()], b, seed, |d| {
                        let fit = fit_platt_weighted(&raw_obs, &obs_labels, &draw_counts(&d[0], n_vo))?;
                        Ok(apply_platt(&fit.params, &raw_mis.select(&d[1])).mean())
                    })
                } else {
                    bootstrap_estimate(method, &[val_mis.len()], b, seed, |d| Ok(cal.select(&d[0]).mean()))
                }
            }
            Method::Proxy => {
                let fit = em_label_shift(&raw_mis, train_prevalence, &options.em).map_err(|e| e.at_step(step))?;
                proxy_fit = Some(fit);
                bootstrap_estimate(method, &[val_mis.len()], b, seed, |d| {
                    let counts = draw_counts(&d[0], val_mis.len());
                    Ok(em_label_shift_weighted(&raw_mis, &counts, train_prevalence, &options.em)?.pi_hat)
                })
            }
            Method::Cproxy => {
                let cal = cal_mis.as_ref().expect("calibrated");
                let p0 = interior_prevalence(validation_prevalence, "validation").map_err(|e| e.at_step(step))?;
                let fit = em_label_shift(cal, p0, &options.em).map_err(|e| e.at_step(step))?;
                cproxy_fit = Some(fit);
                if recalibrate {
                    bootstrap_estimate(method, &[n_vo, val_mis.len()], b, seed, |d| {
                        let counts_obs = draw_counts(&d[0], n_vo);
                        let p0 = interior_prevalence(prevalence_of(&obs_labels, &counts_obs), "resampled")?;
                        let platt = fit_platt_weighted(&raw_obs, &obs_labels, &counts_obs)?;
                        let cal = apply_platt(&platt.params, &raw_mis);
                        let counts = draw_counts(&d[1], val_mis.len());
                        Ok(em_label_shift_weighted(&cal, &counts, p0, &options.em)?.pi_hat)
                    })
                } else {
                    bootstrap_estimate(method, &[val_mis.len()], b, seed, |d| {
                        let counts = draw_counts(&d[0], val_mis.len());
                        Ok(em_label_shift_weighted(cal, &counts, p0, &options.em)?.pi_hat)
                    })
                }
            }
            Method::Mom => {
                let observed: Vec<(u8, u8)> = dataset
                    .units()
                    .iter()
                    .filter_map(|u| u.y().map(|y| (u.x()[0], y)))
                    .collect();
                let missing_x: Vec<u8> = dataset.units().iter().filter(|u| !u.is_observed()).map(|u| u.x()[0]).collect();
                let strata = [observed.len(), missing_x.len()];
                let mom = |d: &[Vec<usize>]| -> Result<MomEstimate> {
                    let mut ones = [0usize; 2];
                    let mut totals = [0usize; 2];
                    for &i in &d[0] {
                        let (x, y) = observed[i];
                        totals[y as usize] += 1;
                        ones[y as usize] += x as usize;
                    }
                    if totals.contains(&0) {
                        return Err(Error::Unidentified("a class is absent among observed units".into()));
                    }
                    let beta0 = ones[0] as f64 / totals[0] as f64;
                    let beta1 = ones[1] as f64 / totals[1] as f64;
                    let mu_x = d[1].iter().map(|&i| f64::from(missing_x[i])).sum::<f64>() / d[1].len() as f64;
                    estimate_mom(beta0, beta1, mu_x)
                };
                let point = mom(&full_sample(&strata)).map_err(|e| e.at_step(step))?;
                if point.clipped {
                    log::warn!("moment estimate clipped to {}", point.value);
                }
                bootstrap_estimate(method, &strata, b, seed, |d| Ok(mom(d)?.value))
            }
        };
        estimates.push(est.map_err(|e| e.at_step(step))?);
    }
    let proxy_fit = proxy_fit.expect("proxy always runs");

    // Coherence on the held-out pool or one of its parts.
    let coherence_idx: Vec<usize> = match options.coherence_population {
        Population::All => (0..pool.len()).collect(),
        Population::ValidationObserved => (0..n_vo).collect(),
        Population::ValidationMissing => (n_vo..pool.len()).collect(),
    };
    if coherence_idx.is_empty() {
        return Err(Error::Pipeline { step: "coherence", message: "coherence population is empty".into() });
    }
    let coh_units = pool.subset(&coherence_idx);
    let raw_outcome_coh = scores_on(&outcome_model, &coh_units, options.coherence_population)?;
    let p_m = dataset.missing_rate();
    let population = options.coherence_population;
    let coherence_uncalibrated = coherence_score(
        &PropensityPair::from_outcome_scores(
            raw_prop_pool.select(&coherence_idx),
            &raw_outcome_coh,
            train_prevalence,
            proxy_fit.pi_hat,
            p_m,
            population,
        )
        .map_err(|e| e.at_step("coherence"))?,
    );
    let coherence_calibrated = match (&outcome_platt, &cal_prop_pool, &cproxy_fit) {
        (Some(op), Some(cal_prop), Some(cfit)) => {
            let cal_outcome = apply_platt(&op.params, &raw_outcome_coh);
            let pair = PropensityPair::from_outcome_scores(
                cal_prop.select(&coherence_idx),
                &cal_outcome,
                cfit.source_prevalence,
                cfit.pi_hat,
                p_m,
                population,
            )
            .map_err(|e| e.at_step("coherence"))?;
            Some(coherence_score(&pair))
        }
        _ => None,
    };

    let manifest = RunManifest {
        options: options.clone(),
        n_units: dataset.len(),
        dim,
        n_train: split.train.len(),
        n_validation_observed: n_vo,
        n_validation_missing: val_mis.len(),
        n_propensity_validation_missing: n_pm,
        seeds,
        outcome_model,
        outcome_cv,
        propensity_model,
        propensity_cv,
        outcome_platt,
        propensity_platt,
        train_prevalence,
        validation_prevalence,
        missing_rate: p_m,
        proxy_fit,
        cproxy_fit,
    };
    Ok(RunResult { estimates, coherence_calibrated, coherence_uncalibrated, manifest })
}
