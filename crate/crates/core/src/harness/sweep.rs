//! Sweeps over the missingness-mechanism grid and tidy result tables.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::pipeline::{derive_seed, run_pipeline, PipelineOptions, RunManifest, RunResult};
use crate::calibrate::Population;
use crate::data::{Dataset, Method};
use crate::datagen::{
    generate, highdim_config, implied_moments, induce_missingness, toy_config, Generated, ImpliedMoments,
    MomentTargets,
};
use crate::error::{Error, Result};

/// Environment variable overriding the worker count of a sweep.
pub const WORKERS_ENV: &str = "LABELSHIFT_WORKERS";

#[derive(Debug, Clone, PartialEq)]
pub enum ConfigFamily {
    Toy,
    Highdim,
    /// Missingness induced on a fully observed dataset.
    CsvInduced { complete: Dataset, targets: MomentTargets },
}

impl ConfigFamily {
    pub fn name(&self) -> &'static str {
        match self {
            ConfigFamily::Toy => "toy",
            ConfigFamily::Highdim => "highdim",
            ConfigFamily::CsvInduced { .. } => "csv_induced",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub family: ConfigFamily,
    pub phi_grid: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Units per simulated dataset; ignored for induced data.
    pub n: usize,
    pub options: PipelineOptions,
    /// Worker threads; `WORKERS_ENV` wins when set.
    pub workers: Option<usize>,
}

/// Seed for the dataset of one grid cell.
pub fn cell_data_seed(phi_index: usize, seed: u64) -> u64 {
    derive_seed(seed, 0x5EED_0000 + phi_index as u64)
}

/// Solved link coefficients and exact moments at one grid point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhiLinks {
    pub phi: f64,
    pub beta0: f64,
    pub beta: f64,
    pub implied: ImpliedMoments,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellOutcome {
    pub phi_index: usize,
    pub phi: f64,
    pub seed: u64,
    pub data_seed: u64,
    /// The oracle missing-case prevalence of the generating mechanism.
    pub oracle_mu1: Option<f64>,
    pub result: std::result::Result<RunResult, Error>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResults {
    pub family: &'static str,
    pub phi_grid: Vec<f64>,
    pub seeds: Vec<u64>,
    pub dim: usize,
    pub options: PipelineOptions,
    pub links: Vec<PhiLinks>,
    pub cells: Vec<CellOutcome>,
}

/// The dataset a grid cell analyses, with its oracle prevalence.
pub fn cell_dataset(spec: &GridSpec, phi_index: usize, seed: u64) -> Result<(Generated, PhiLinks)> {
    let phi = spec.phi_grid[phi_index];
    let data_seed = cell_data_seed(phi_index, seed);
    match &spec.family {
        ConfigFamily::Toy | ConfigFamily::Highdim => {
            let config = if spec.family == ConfigFamily::Toy { toy_config(phi)? } else { highdim_config(phi)? };
            let config = config.with_n(spec.n).with_seed(data_seed);
            let implied = implied_moments(&config)?;
            let links = PhiLinks { phi, beta0: config.beta0, beta: config.beta, implied };
            Ok((generate(&config)?, links))
        }
        ConfigFamily::CsvInduced { complete, targets } => {
            let induced = induce_missingness(complete, phi, *targets, data_seed)?;
            let links = PhiLinks { phi, beta0: induced.beta0, beta: induced.beta, implied: induced.implied };
            Ok((induced.generated, links))
        }
    }
}

fn worker_count(spec: &GridSpec) -> Result<Option<usize>> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .map(Some)
            .ok_or_else(|| Error::InvalidArgument(format!("{WORKERS_ENV} must be a positive integer, got `{v}`"))),
        Err(_) => Ok(spec.workers),
    }
}

/// Runs every `(phi, seed)` cell. Failed cells keep their error; output order
/// is `(phi, seed)` regardless of completion order.
pub fn run_phi_grid(spec: &GridSpec) -> Result<GridResults> {
    if spec.phi_grid.is_empty() || spec.seeds.is_empty() {
        return Err(Error::InvalidArgument("phi grid and seed list must be non-empty".into()));
    }
    spec.options.validate()?;
    let jobs: Vec<(usize, u64)> =
        (0..spec.phi_grid.len()).flat_map(|i| spec.seeds.iter().map(move |&s| (i, s))).collect();
    let run = || -> Vec<(CellOutcome, Option<PhiLinks>, Option<usize>)> {
        jobs.par_iter()
            .map(|&(i, seed)| {
                let phi = spec.phi_grid[i];
                let data_seed = cell_data_seed(i, seed);
                let (result, links, dim) = match cell_dataset(spec, i, seed) {
                    Ok((generated, links)) => {
                        let options = PipelineOptions { seed, ..spec.options.clone() };
                        let dim = generated.dataset.dim();
                        (run_pipeline(&generated.dataset, &options), Some(links), Some(dim))
                    }
                    Err(e) => (Err(e.at_step("generate")), None, None),
                };
                if let Err(e) = &result {
                    log::warn!("cell phi={phi} seed={seed} failed: {e}");
                }
                let oracle_mu1 = links.map(|l| l.implied.mu1);
                (CellOutcome { phi_index: i, phi, seed, data_seed, oracle_mu1, result }, links, dim)
            })
            .collect()
    };
    let outcomes = match worker_count(spec)? {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?
            .install(run),
        None => run(),
    };
    let mut links: BTreeMap<usize, PhiLinks> = BTreeMap::new();
    let mut dim = None;
    let mut cells = Vec::with_capacity(outcomes.len());
    for (cell, l, d) in outcomes {
        if let Some(l) = l {
            links.entry(cell.phi_index).or_insert(l);
        }
        dim = dim.or(d);
        cells.push(cell);
    }
    let dim = match (&spec.family, dim) {
        (_, Some(d)) => d,
        (ConfigFamily::Toy, None) => 1,
        (ConfigFamily::Highdim, None) => crate::datagen::HIGHDIM_DIM,
        (ConfigFamily::CsvInduced { complete, .. }, None) => complete.dim(),
    };
    Ok(GridResults {
        family: spec.family.name(),
        phi_grid: spec.phi_grid.clone(),
        seeds: spec.seeds.clone(),
        dim,
        options: spec.options.clone(),
        links: links.into_values().collect(),
        cells,
    })
}

/// One estimate row of the results table. Numeric fields are empty for
/// failed cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRow {
    pub phi: f64,
    pub seed: u64,
    pub method: Method,
    pub point: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub abs_error: Option<f64>,
    pub calibrated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoherenceRow {
    pub phi: f64,
    pub seed: u64,
    pub delta: Option<f64>,
    pub calibrated: bool,
    pub population: Population,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRow {
    pub phi: f64,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub phi: f64,
    pub method: Method,
    pub calibrated: bool,
    pub n_ok: usize,
    pub n_failed: usize,
    pub mean_point: Option<f64>,
    pub mean_abs_error: Option<f64>,
    /// Share of intervals containing the oracle prevalence.
    pub coverage: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoherenceSummaryRow {
    pub phi: f64,
    pub calibrated: bool,
    pub n_ok: usize,
    pub mean_delta: Option<f64>,
}

impl EstimateRow {
    pub const HEADER: &'static [&'static str] = &["phi", "seed", "method", "point", "ci_low", "ci_high", "abs_error", "calibrated"];
}

impl CoherenceRow {
    pub const HEADER: &'static [&'static str] = &["phi", "seed", "delta", "calibrated", "population"];
}

impl ErrorRow {
    pub const HEADER: &'static [&'static str] = &["phi", "seed", "error"];
}

impl SummaryRow {
    pub const HEADER: &'static [&'static str] = &["phi", "method", "calibrated", "n_ok", "n_failed", "mean_point", "mean_abs_error", "coverage"];
}

impl CoherenceSummaryRow {
    pub const HEADER: &'static [&'static str] = &["phi", "calibrated", "n_ok", "mean_delta"];
}

impl GridResults {
    /// `|phi| * |seeds| * |methods|` rows in `(phi, seed, method)` order.
    pub fn estimate_rows(&self) -> Vec<EstimateRow> {
        let methods = self.options.methods(self.dim);
        let mut rows = Vec::with_capacity(self.cells.len() * methods.len());
        for cell in &self.cells {
            for &method in &methods {
                let est = cell.result.as_ref().ok().and_then(|r| r.estimate(method));
                rows.push(EstimateRow {
                    phi: cell.phi,
                    seed: cell.seed,
                    method,
                    point: est.map(|e| e.point),
                    ci_low: est.map(|e| e.ci_low),
                    ci_high: est.map(|e| e.ci_high),
                    abs_error: est.and_then(|e| cell.oracle_mu1.map(|t| (e.point - t).abs())),
                    calibrated: method.is_calibrated(),
                });
            }
        }
        rows
    }

    /// Uncalibrated then calibrated coherence per cell.
    pub fn coherence_rows(&self) -> Vec<CoherenceRow> {
        let population = self.options.coherence_population;
        let mut rows = Vec::new();
        for cell in &self.cells {
            let ok = cell.result.as_ref().ok();
            rows.push(CoherenceRow {
                phi: cell.phi,
                seed: cell.seed,
                delta: ok.map(|r| r.coherence_uncalibrated.delta),
                calibrated: false,
                population,
            });
            if self.options.calibrate {
                rows.push(CoherenceRow {
                    phi: cell.phi,
                    seed: cell.seed,
                    delta: ok.and_then(|r| r.coherence_calibrated.as_ref().map(|c| c.delta)),
                    calibrated: true,
                    population,
                });
            }
        }
        rows
    }

    pub fn error_rows(&self) -> Vec<ErrorRow> {
        self.cells
            .iter()
            .filter_map(|c| c.result.as_ref().err().map(|e| ErrorRow { phi: c.phi, seed: c.seed, error: e.to_string() }))
            .collect()
    }

    /// Oracle prevalence per grid point.
    pub fn oracle_for(&self, phi: f64) -> Option<f64> {
        self.links.iter().find(|l| l.phi == phi).map(|l| l.implied.mu1)
    }

    pub fn summary_rows(&self) -> Vec<SummaryRow> {
        summarize_estimates(&self.estimate_rows(), |phi| self.oracle_for(phi))
    }

    pub fn coherence_summary_rows(&self) -> Vec<CoherenceSummaryRow> {
        summarize_coherence(&self.coherence_rows())
    }

    pub fn manifest(&self) -> GridManifest<'_> {
        GridManifest {
            family: self.family,
            phi_grid: &self.phi_grid,
            seeds: &self.seeds,
            dim: self.dim,
            options: &self.options,
            links: &self.links,
            cells: self
                .cells
                .iter()
                .map(|c| CellManifest {
                    phi: c.phi,
                    seed: c.seed,
                    data_seed: c.data_seed,
                    oracle_mu1: c.oracle_mu1,
                    run: c.result.as_ref().ok().map(|r| &r.manifest),
                    error: c.result.as_ref().err().map(|e| e.to_string()),
                })
                .collect(),
        }
    }
}

/// Resolved configuration of a sweep: options, solved links per phi and the
/// per-cell run manifests.
#[derive(Debug, Serialize)]
pub struct GridManifest<'a> {
    pub family: &'static str,
    pub phi_grid: &'a [f64],
    pub seeds: &'a [u64],
    pub dim: usize,
    pub options: &'a PipelineOptions,
    pub links: &'a [PhiLinks],
    pub cells: Vec<CellManifest<'a>>,
}

#[derive(Debug, Serialize)]
pub struct CellManifest<'a> {
    pub phi: f64,
    pub seed: u64,
    pub data_seed: u64,
    pub oracle_mu1: Option<f64>,
    pub run: Option<&'a RunManifest>,
    pub error: Option<String>,
}

fn mean_of(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Per-`(phi, method)` aggregates recomputed from raw rows, in first-seen order.
pub fn summarize_estimates(rows: &[EstimateRow], oracle: impl Fn(f64) -> Option<f64>) -> Vec<SummaryRow> {
    let mut keys: Vec<(u64, Method)> = Vec::new();
    let mut groups: BTreeMap<(u64, Method), Vec<&EstimateRow>> = BTreeMap::new();
    for r in rows {
        let key = (r.phi.to_bits(), r.method);
        if !groups.contains_key(&key) {
            keys.push(key);
        }
        groups.entry(key).or_default().push(r);
    }
    keys.into_iter()
        .map(|key| {
            let group = &groups[&key];
            let phi = f64::from_bits(key.0);
            let ok: Vec<&&EstimateRow> = group.iter().filter(|r| r.point.is_some()).collect();
            let points: Vec<f64> = ok.iter().filter_map(|r| r.point).collect();
            let errors: Vec<f64> = ok.iter().filter_map(|r| r.abs_error).collect();
            let coverage = oracle(phi).filter(|_| !ok.is_empty()).map(|t| {
                ok.iter().filter(|r| r.ci_low.unwrap() <= t && t <= r.ci_high.unwrap()).count() as f64 / ok.len() as f64
            });
            SummaryRow {
                phi,
                method: key.1,
                calibrated: key.1.is_calibrated(),
                n_ok: ok.len(),
                n_failed: group.len() - ok.len(),
                mean_point: mean_of(&points),
                mean_abs_error: mean_of(&errors),
                coverage,
            }
        })
        .collect()
}

pub fn summarize_coherence(rows: &[CoherenceRow]) -> Vec<CoherenceSummaryRow> {
    let mut keys: Vec<(u64, bool)> = Vec::new();
    let mut groups: BTreeMap<(u64, bool), Vec<f64>> = BTreeMap::new();
    for r in rows {
        let key = (r.phi.to_bits(), r.calibrated);
        if !groups.contains_key(&key) {
            keys.push(key);
        }
        let entry = groups.entry(key).or_default();
        if let Some(d) = r.delta {
            entry.push(d);
        }
    }
    keys.into_iter()
        .map(|key| {
            let deltas = &groups[&key];
            CoherenceSummaryRow {
                phi: f64::from_bits(key.0),
                calibrated: key.1,
                n_ok: deltas.len(),
                mean_delta: mean_of(deltas),
            }
        })
        .collect()
}
