//! Experiment driver: fit dispatch across methods, simulated-replicate
//! experiments, location-level cross-validation and report tables.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GspsError, Result};
use crate::gsps::{gsps_fit, partition_random, BlockPartition, GspsConfig, GspsFit};
use crate::io::{matrix_to_rows, sig6, FitMethod, FittedModelFile, ResponseFit};
use crate::mle::{mle_fit, MleConfig, MleFit};
use crate::model::{CorrelationModel, Dataset, SeparableModel};
use crate::predict::{mspe, BlockRule, BlockedPredictor, Predict, Predictor, StackedPredictor};
use crate::seed::derive_seed;
use crate::simulate::{default_w, random_true_params, sample_grf_psd, uniform_locations};

pub type DynPredictor = Box<dyn Predict + Send + Sync>;

/// Settings shared by every fitting method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSettings {
    pub gsps: GspsConfig,
    pub mle_starts: usize,
    /// Number of random-selection blocks; overrides `block_size`.
    pub blocks: Option<usize>,
    /// Target block size for random-selection blocking; `None` fits unblocked.
    pub block_size: Option<usize>,
    pub block_rule: BlockRule,
}

impl Default for FitSettings {
    fn default() -> Self {
        FitSettings {
            gsps: GspsConfig::default(),
            mle_starts: 10,
            blocks: None,
            block_size: None,
            block_rule: BlockRule::Nearest,
        }
    }
}

impl FitSettings {
    /// Partition with `blocks` or `ceil(n / block_size)` blocks, or `None` for one block.
    pub fn partition(&self, n: usize, seed: u64) -> Result<Option<BlockPartition>> {
        if let Some(k) = self.blocks {
            return partition_random(n, k, seed).map(Some);
        }
        match self.block_size {
            None => Ok(None),
            Some(0) => Err(GspsError::InvalidInput("block size must be positive".into())),
            Some(b) if b >= n => Ok(None),
            Some(b) => partition_random(n, n.div_ceil(b), seed).map(Some),
        }
    }
}

/// `p` single-response fits ("mSPS").
#[derive(Debug, Clone, PartialEq)]
pub struct IndependentFit {
    pub responses: Vec<GspsFit>,
}

impl IndependentFit {
    /// `p (q + 1)` fitted scalars.
    pub fn parameter_count(&self) -> usize {
        self.responses.iter().map(GspsFit::parameter_count).sum()
    }

    /// Diagonal of the per-response variances.
    pub fn gamma_hat(&self) -> DMatrix<f64> {
        let p = self.responses.len();
        DMatrix::from_fn(p, p, |i, j| if i == j { self.responses[i].gamma_hat[(0, 0)] } else { 0.0 })
    }
}

pub fn fit_independent(dataset: &Dataset, config: &GspsConfig, partition: Option<&BlockPartition>) -> Result<IndependentFit> {
    let responses = (0..dataset.p())
        .map(|k| gsps_fit(&dataset.response(k)?, config, partition))
        .collect::<Result<Vec<_>>>()?;
    Ok(IndependentFit { responses })
}

#[derive(Debug, Clone, PartialEq)]
pub enum FittedModel {
    Gsps(GspsFit),
    Independent(IndependentFit),
    Mle(MleFit),
}

impl FittedModel {
    pub fn fit(method: FitMethod, dataset: &Dataset, settings: &FitSettings, seed: u64) -> Result<Self> {
        let mut gsps = settings.gsps.clone();
        gsps.seed = seed;
        let partition = settings.partition(dataset.n(), derive_seed(seed, &[0xB10C]))?;
        Ok(match method {
            FitMethod::Gsps => FittedModel::Gsps(gsps_fit(dataset, &gsps, partition.as_ref())?),
            FitMethod::Independent => FittedModel::Independent(fit_independent(dataset, &gsps, partition.as_ref())?),
            FitMethod::Mle => FittedModel::Mle(mle_fit(
                dataset,
                &MleConfig {
                    family: gsps.family,
                    theta_bounds: gsps.theta_bounds.clone(),
                    starts: settings.mle_starts,
                    seed,
                },
            )?),
        })
    }

    pub fn method(&self) -> FitMethod {
        match self {
            FittedModel::Gsps(_) => FitMethod::Gsps,
            FittedModel::Independent(_) => FitMethod::Independent,
            FittedModel::Mle(_) => FitMethod::Mle,
        }
    }

    pub fn gamma_hat(&self) -> DMatrix<f64> {
        match self {
            FittedModel::Gsps(f) => f.gamma_hat.clone(),
            FittedModel::Independent(f) => f.gamma_hat(),
            FittedModel::Mle(f) => f.gamma_hat.clone(),
        }
    }

    /// Distance to `theta_star`; independent fits average over responses.
    pub fn theta_error(&self, theta_star: &[f64]) -> f64 {
        let dist = |t: &[f64]| t.iter().zip(theta_star).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        match self {
            FittedModel::Gsps(f) => dist(&f.theta_hat),
            FittedModel::Independent(f) => {
                f.responses.iter().map(|r| dist(&r.theta_hat)).sum::<f64>() / f.responses.len() as f64
            }
            FittedModel::Mle(f) => dist(&f.theta_hat),
        }
    }

    pub fn to_file(&self) -> FittedModelFile {
        match self {
            FittedModel::Gsps(f) => FittedModelFile {
                method: FitMethod::Gsps,
                family: f.family,
                theta_hat: f.theta_hat.clone(),
                theta_bounds: f.theta_bounds.clone(),
                gamma_hat: matrix_to_rows(&f.gamma_hat),
                per_response: Vec::new(),
                partition: (f.partition.k > 1).then(|| f.partition.clone()),
                neg_loglik: None,
                parameter_count: f.parameter_count(),
                diagnostics: serde_json::to_value(&f.diagnostics).unwrap_or_default(),
            },
            FittedModel::Independent(f) => {
                let first = &f.responses[0];
                FittedModelFile {
                    method: FitMethod::Independent,
                    family: first.family,
                    theta_hat: Vec::new(),
                    theta_bounds: first.theta_bounds.clone(),
                    gamma_hat: matrix_to_rows(&f.gamma_hat()),
                    per_response: f
                        .responses
                        .iter()
                        .map(|r| ResponseFit { theta_hat: r.theta_hat.clone(), variance: r.gamma_hat[(0, 0)] })
                        .collect(),
                    partition: (first.partition.k > 1).then(|| first.partition.clone()),
                    neg_loglik: None,
                    parameter_count: f.parameter_count(),
                    diagnostics: serde_json::to_value(f.responses.iter().map(|r| &r.diagnostics).collect::<Vec<_>>())
                        .unwrap_or_default(),
                }
            }
            FittedModel::Mle(f) => FittedModelFile {
                method: FitMethod::Mle,
                family: f.family,
                theta_hat: f.theta_hat.clone(),
                theta_bounds: f.theta_bounds.clone(),
                gamma_hat: matrix_to_rows(&f.gamma_hat),
                per_response: Vec::new(),
                partition: None,
                neg_loglik: Some(f.neg_loglik),
                parameter_count: f.theta_hat.len() + f.gamma_hat.nrows() * (f.gamma_hat.nrows() + 1) / 2,
                diagnostics: serde_json::json!({
                    "starts": f.runs.len(),
                    "all_failed": f.all_failed,
                    "start_values": f.runs.iter().map(|r| r.value).collect::<Vec<_>>(),
                }),
            },
        }
    }

    pub fn predictor(&self, training: &Dataset, rule: BlockRule) -> Result<DynPredictor> {
        predictor_from_file(&self.to_file(), training, rule)
    }
}

fn single_predictor(model: SeparableModel, training: &Dataset, ybar: &DMatrix<f64>, partition: Option<&BlockPartition>, rule: BlockRule) -> Result<DynPredictor> {
    Ok(match partition {
        Some(part) if part.k > 1 => Box::new(BlockedPredictor::new(&model, training.locations(), ybar, part, rule)?),
        _ => Box::new(Predictor::new(model, training.locations().to_vec(), ybar.clone())?),
    })
}

/// Builds the point predictor described by a fitted-model file.
pub fn predictor_from_file(file: &FittedModelFile, training: &Dataset, rule: BlockRule) -> Result<DynPredictor> {
    let ybar = training.mean_response();
    let partition = file.partition.as_ref();
    match file.method {
        FitMethod::Independent => {
            if file.per_response.len() != training.p() {
                return Err(GspsError::DimensionMismatch("one fit per response column".into()));
            }
            let responses = file
                .per_response
                .iter()
                .enumerate()
                .map(|(k, r)| {
                    let corr = CorrelationModel::new(file.family, r.theta_hat.clone(), file.theta_bounds.clone())?;
                    let model = SeparableModel::new(corr, DMatrix::from_element(1, 1, r.variance))?;
                    single_predictor(model, training, &ybar.columns(k, 1).into_owned(), partition, rule)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Box::new(StackedPredictor { responses }))
        }
        FitMethod::Gsps | FitMethod::Mle => {
            let gamma = file.gamma()?;
            if gamma.nrows() != training.p() {
                return Err(GspsError::DimensionMismatch("fitted Gamma does not match the training responses".into()));
            }
            let corr = CorrelationModel::new(file.family, file.theta_hat.clone(), file.theta_bounds.clone())?;
            single_predictor(SeparableModel::new(corr, gamma)?, training, &ybar, partition, rule)
        }
    }
}

/// One `(d, n, p, N)` configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub d: usize,
    pub n: usize,
    pub p: usize,
    pub num_realizations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub cells: Vec<Cell>,
    pub replications: usize,
    pub methods: Vec<FitMethod>,
    pub settings: FitSettings,
    /// Held-out locations simulated jointly with the training set.
    pub n_test: usize,
    /// Side of the square domain `[0, side]^d`.
    pub domain_side: f64,
    pub theta_radius: f64,
    /// Rows of the factor `A` in `Gamma* = A^T A`; `None` uses `p + 3`.
    pub w: Option<usize>,
    /// Fixed `Gamma*` for every replicate instead of a random draw.
    pub gamma_star: Option<Vec<Vec<f64>>>,
    pub seed: u64,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            cells: vec![Cell { d: 2, n: 60, p: 2, num_realizations: 10 }],
            replications: 10,
            methods: vec![FitMethod::Gsps],
            settings: FitSettings::default(),
            n_test: 200,
            domain_side: 10.0,
            theta_radius: 1.0,
            w: None,
            gamma_star: None,
            seed: 0,
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.cells.is_empty() || self.methods.is_empty() {
            return Err(GspsError::InvalidInput("need at least one cell and one method".into()));
        }
        if self.replications == 0 || self.n_test == 0 {
            return Err(GspsError::InvalidInput("replications and n_test must be positive".into()));
        }
        for c in &self.cells {
            if c.d == 0 || c.p == 0 || c.num_realizations == 0 || c.n < 2 {
                return Err(GspsError::InvalidInput(format!("invalid cell {c:?}")));
            }
            if let Some(g) = &self.gamma_star {
                if g.len() != c.p {
                    return Err(GspsError::DimensionMismatch("gamma_star does not match p".into()));
                }
            }
        }
        if !(self.domain_side > 0.0 && self.theta_radius > 0.0) {
            return Err(GspsError::InvalidInput("domain side and theta radius must be positive".into()));
        }
        Ok(())
    }
}

/// Metrics of one method on one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub cell: usize,
    pub replicate: usize,
    pub method: FitMethod,
    pub theta_error: f64,
    pub gamma_error: f64,
    pub mspe: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub cell: usize,
    pub replicate: usize,
    pub method: Option<FitMethod>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub cell: Cell,
    pub method: FitMethod,
    pub replications: usize,
    pub failures: usize,
    pub theta_error: f64,
    pub gamma_error: f64,
    pub mspe: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub spec: ExperimentSpec,
    pub summaries: Vec<CellSummary>,
    pub records: Vec<ReplicateRecord>,
    pub failures: Vec<FailureRecord>,
}

/// Simulated training set, truth and test-point means for one replicate.
pub struct Replicate {
    pub theta_star: Vec<f64>,
    pub gamma_star: DMatrix<f64>,
    pub training: Dataset,
    pub test_locations: Vec<crate::model::Location>,
    /// Realization mean of the held-out responses, `n_test x p`.
    pub test_truth: DMatrix<f64>,
}

pub fn simulate_replicate(spec: &ExperimentSpec, cell: &Cell, seed: u64) -> Result<Replicate> {
    let (theta_star, random_gamma) = random_true_params(
        cell.d,
        cell.p,
        spec.w.unwrap_or_else(|| default_w(cell.p)),
        spec.theta_radius,
        derive_seed(seed, &[0]),
    )?;
    let gamma_star = match &spec.gamma_star {
        Some(rows) => crate::io::rows_to_matrix(rows)?,
        None => random_gamma,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[1]));
    let all = uniform_locations(&mut rng, cell.n + spec.n_test, cell.d, spec.domain_side);
    let corr = CorrelationModel::new(
        spec.settings.gsps.family,
        theta_star.clone(),
        crate::model::ThetaBounds::default_for(theta_star.len()),
    )?;
    let full = sample_grf_psd(&all, &corr, &gamma_star, cell.num_realizations, derive_seed(seed, &[2]))?;
    let train_idx: Vec<usize> = (0..cell.n).collect();
    let training = full.subset(&train_idx)?;
    let test_truth = full.mean_response().rows(cell.n, spec.n_test).into_owned();
    Ok(Replicate {
        theta_star,
        gamma_star,
        training,
        test_locations: all[cell.n..].to_vec(),
        test_truth,
    })
}

fn evaluate(method: FitMethod, rep: &Replicate, settings: &FitSettings, seed: u64) -> Result<(f64, f64, f64, f64)> {
    let start = Instant::now();
    let fit = FittedModel::fit(method, &rep.training, settings, seed)?;
    let seconds = start.elapsed().as_secs_f64();
    let theta_error = fit.theta_error(&rep.theta_star);
    let gamma_error = (fit.gamma_hat() - &rep.gamma_star).norm();
    let predictor = fit.predictor(&rep.training, settings.block_rule)?;
    let err = mspe(&predictor, &rep.test_locations, &rep.test_truth)?;
    Ok((theta_error, gamma_error, err, seconds))
}

/// Runs every `(cell, replicate, method)`; failures are recorded and skipped.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentReport> {
    spec.validate()?;
    let jobs: Vec<(usize, usize)> = (0..spec.cells.len())
        .flat_map(|c| (0..spec.replications).map(move |r| (c, r)))
        .collect();
    let outcomes: Vec<(Vec<ReplicateRecord>, Vec<FailureRecord>)> = jobs
        .par_iter()
        .map(|&(c, r)| {
            let seed = derive_seed(spec.seed, &[c as u64, r as u64]);
            let mut records = Vec::new();
            let mut failures = Vec::new();
            let rep = match simulate_replicate(spec, &spec.cells[c], seed) {
                Ok(rep) => rep,
                Err(e) => {
                    failures.push(FailureRecord { cell: c, replicate: r, method: None, message: e.to_string() });
                    return (records, failures);
                }
            };
            for &method in &spec.methods {
                match evaluate(method, &rep, &spec.settings, derive_seed(seed, &[3])) {
                    Ok((theta_error, gamma_error, mspe, seconds)) => records.push(ReplicateRecord {
                        cell: c,
                        replicate: r,
                        method,
                        theta_error,
                        gamma_error,
                        mspe,
                        seconds,
                    }),
                    Err(e) => failures.push(FailureRecord {
                        cell: c,
                        replicate: r,
                        method: Some(method),
                        message: e.to_string(),
                    }),
                }
            }
            (records, failures)
        })
        .collect();

    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (r, f) in outcomes {
        records.extend(r);
        failures.extend(f);
    }
    let mut summaries = Vec::new();
    for (c, cell) in spec.cells.iter().enumerate() {
        for &method in &spec.methods {
            let rows: Vec<&ReplicateRecord> = records.iter().filter(|r| r.cell == c && r.method == method).collect();
            let failed = failures
                .iter()
                .filter(|f| f.cell == c && f.method.is_none_or(|m| m == method))
                .count();
            let mean = |g: fn(&ReplicateRecord) -> f64| {
                if rows.is_empty() {
                    f64::NAN
                } else {
                    rows.iter().map(|r| g(r)).sum::<f64>() / rows.len() as f64
                }
            };
            summaries.push(CellSummary {
                cell: *cell,
                method,
                replications: rows.len(),
                failures: failed,
                theta_error: mean(|r| r.theta_error),
                gamma_error: mean(|r| r.gamma_error),
                mspe: mean(|r| r.mspe),
                seconds: mean(|r| r.seconds),
            });
        }
    }
    Ok(ExperimentReport { spec: spec.clone(), summaries, records, failures })
}

impl ExperimentReport {
    /// Copy with every wall time zeroed, for reproducibility comparisons.
    pub fn without_timings(&self) -> Self {
        let mut out = self.clone();
        out.records.iter_mut().for_each(|r| r.seconds = 0.0);
        out.summaries.iter_mut().for_each(|s| s.seconds = 0.0);
        out
    }

    fn table_rows(&self) -> (Vec<&'static str>, Vec<Vec<String>>) {
        let header = vec!["d", "n", "p", "N", "method", "reps", "failed", "theta_err", "gamma_err", "mspe", "seconds"];
        let rows = self
            .summaries
            .iter()
            .map(|s| {
                vec![
                    s.cell.d.to_string(),
                    s.cell.n.to_string(),
                    s.cell.p.to_string(),
                    s.cell.num_realizations.to_string(),
                    s.method.name().to_string(),
                    s.replications.to_string(),
                    s.failures.to_string(),
                    sig6(s.theta_error),
                    sig6(s.gamma_error),
                    sig6(s.mspe),
                    sig6(s.seconds),
                ]
            })
            .collect();
        (header, rows)
    }

    pub fn to_table(&self) -> String {
        let (header, rows) = self.table_rows();
        aligned_table(&header, &rows)
    }

    pub fn to_csv(&self) -> String {
        let (header, rows) = self.table_rows();
        let mut out = header.join(",");
        out.push('\n');
        for r in rows {
            out.push_str(&r.join(","));
            out.push('\n');
        }
        out
    }
}

/// Right-aligned columns separated by two spaces.
pub fn aligned_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, cell) in widths.iter_mut().zip(r) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: Vec<&str>| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:>w$}"))
            .collect::<Vec<_>>()
            .join("  ")
    };
    let mut out = line(header.to_vec());
    out.push('\n');
    for r in rows {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossvalMethod {
    pub method: FitMethod,
    /// MSPE of every fold that fitted; failed folds are listed separately.
    pub scores: Vec<f64>,
    pub failed_folds: Vec<usize>,
    pub mean: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossvalReport {
    pub folds: usize,
    pub methods: Vec<CrossvalMethod>,
}

impl CrossvalReport {
    pub fn to_table(&self) -> String {
        let header = ["method", "folds", "failed", "mspe", "std_err"];
        let rows: Vec<Vec<String>> = self
            .methods
            .iter()
            .map(|m| {
                vec![
                    m.method.name().to_string(),
                    m.scores.len().to_string(),
                    m.failed_folds.len().to_string(),
                    sig6(m.mean),
                    sig6(m.std_error),
                ]
            })
            .collect();
        aligned_table(&header, &rows)
    }
}

/// Assigns each location to one of `folds` folds, sizes differing by at most one.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold[i] = pos % folds;
    }
    fold
}

/// Location-level k-fold cross-validation of the mean predictor.
pub fn run_crossval(
    dataset: &Dataset,
    folds: usize,
    methods: &[FitMethod],
    settings: &FitSettings,
    seed: u64,
) -> Result<CrossvalReport> {
    let n = dataset.n();
    if folds < 2 || folds > n {
        return Err(GspsError::InvalidInput(format!("need 2 <= folds <= n = {n}, got {folds}")));
    }
    let min_train = n - n.div_ceil(folds);
    let min_block = match (settings.blocks, settings.block_size) {
        (Some(k), _) => min_train / k.max(1),
        (None, Some(b)) => b.min(min_train),
        (None, None) => min_train,
    };
    if min_train < 2 || min_block < 2 {
        return Err(GspsError::InvalidInput("training folds are too small".into()));
    }
    let assignment = fold_assignment(n, folds, derive_seed(seed, &[0]));
    let ybar = dataset.mean_response();

    let per_fold: Vec<Vec<Result<f64>>> = (0..folds)
        .into_par_iter()
        .map(|f| {
            let train: Vec<usize> = (0..n).filter(|&i| assignment[i] != f).collect();
            let test: Vec<usize> = (0..n).filter(|&i| assignment[i] == f).collect();
            let training = match dataset.subset(&train) {
                Ok(t) => t,
                Err(e) => return methods.iter().map(|_| Err(GspsError::InvalidInput(e.to_string()))).collect(),
            };
            let test_locs: Vec<_> = test.iter().map(|&i| dataset.locations()[i].clone()).collect();
            let truth = ybar.select_rows(test.iter());
            methods
                .iter()
                .map(|&m| {
                    let fit = FittedModel::fit(m, &training, settings, derive_seed(seed, &[1, f as u64]))?;
                    let pred = fit.predictor(&training, settings.block_rule)?;
                    mspe(&pred, &test_locs, &truth)
                })
                .collect()
        })
        .collect();

    let methods = methods
        .iter()
        .enumerate()
        .map(|(j, &method)| {
            let mut scores = Vec::new();
            let mut failed_folds = Vec::new();
            for (f, fold) in per_fold.iter().enumerate() {
                match &fold[j] {
                    Ok(v) => scores.push(*v),
                    Err(e) => {
                        log::warn!("fold {f}, {}: {e}", method.name());
                        failed_folds.push(f);
                    }
                }
            }
            let k = scores.len() as f64;
            let mean = scores.iter().sum::<f64>() / k;
            let std_error = if scores.len() > 1 {
                (scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt() / k.sqrt()
            } else {
                f64::NAN
            };
            CrossvalMethod { method, scores, failed_folds, mean, std_error }
        })
        .collect();
    Ok(CrossvalReport { folds, methods })
}
