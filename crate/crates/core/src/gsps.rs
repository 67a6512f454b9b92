//! The two-stage fitting pipeline: precision estimation per block, pooled
//! between-response covariance, then correlation-parameter fitting.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GspsError, Result};
use crate::linalg;
use crate::model::{CorrelationFamily, CorrelationModel, Dataset, SeparableModel, ThetaBounds};
use crate::stage1::{admm_solve, default_alpha, PrecisionEstimate, SolverConfig, SpectralBounds, Stage1Problem, DEFAULT_ALPHA_C};
use crate::stage2::{fit_theta, CovarianceBlock, Stage2Problem, ThetaFit};

/// `Gamma_hat = (1/n) sum_i C_hat^{ii}`, symmetrized.
pub fn estimate_gamma(c_hat: &DMatrix<f64>, n: usize, p: usize) -> Result<DMatrix<f64>> {
    if c_hat.shape() != (n * p, n * p) || n == 0 || p == 0 {
        return Err(GspsError::DimensionMismatch(format!(
            "C_hat is {:?}, expected ({}, {})",
            c_hat.shape(),
            n * p,
            n * p
        )));
    }
    let mut acc = DMatrix::<f64>::zeros(p, p);
    for i in 0..n {
        acc += c_hat.view((i * p, i * p), (p, p));
    }
    acc /= n as f64;
    Ok(linalg::symmetrize(&acc))
}

/// Assignment of locations to blocks treated as mutually independent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockPartition {
    pub k: usize,
    /// Block id of each location.
    pub assignment: Vec<usize>,
    pub seed: u64,
}

impl BlockPartition {
    /// Every location in one block.
    pub fn single(n: usize) -> Self {
        BlockPartition { k: 1, assignment: vec![0; n], seed: 0 }
    }

    /// Location indices of each block, ascending within a block.
    pub fn blocks(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.k];
        for (i, &b) in self.assignment.iter().enumerate() {
            out[b].push(i);
        }
        out
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.blocks().iter().map(Vec::len).collect()
    }
}

/// Seeded uniform shuffle of `0..n` cut into `k` parts whose sizes differ by
/// at most one (larger parts first).
pub fn partition_random(n: usize, k: usize, seed: u64) -> Result<BlockPartition> {
    if k == 0 || k > n {
        return Err(GspsError::InvalidInput(format!("need 1 <= K <= n, got K = {k}, n = {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / k, n % k);
    let mut assignment = vec![0; n];
    let mut pos = 0;
    for b in 0..k {
        let size = base + usize::from(b < extra);
        for &i in &order[pos..pos + size] {
            assignment[i] = b;
        }
        pos += size;
    }
    Ok(BlockPartition { k, assignment, seed })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlphaChoice {
    Fixed(f64),
    /// `c sqrt(ln(n_b p) / N)` evaluated per block.
    Scaled(f64),
}

impl Default for AlphaChoice {
    fn default() -> Self {
        AlphaChoice::Scaled(DEFAULT_ALPHA_C)
    }
}

impl AlphaChoice {
    pub fn resolve(self, n: usize, p: usize, num_realizations: usize) -> f64 {
        match self {
            AlphaChoice::Fixed(a) => a,
            AlphaChoice::Scaled(c) => default_alpha(n, p, num_realizations, c),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GammaPooling {
    #[default]
    Unweighted,
    SizeWeighted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GspsConfig {
    pub family: CorrelationFamily,
    pub alpha: AlphaChoice,
    /// `None` selects the wide default box per block.
    pub spectral_bounds: Option<SpectralBounds>,
    pub solver: SolverConfig,
    /// `None` selects `[1e-4, 1e2]^q`.
    pub theta_bounds: Option<ThetaBounds>,
    pub multistart: usize,
    pub pooling: GammaPooling,
    pub seed: u64,
}

impl Default for GspsConfig {
    fn default() -> Self {
        GspsConfig {
            family: CorrelationFamily::AnisotropicExponential,
            alpha: AlphaChoice::default(),
            spectral_bounds: None,
            solver: SolverConfig::default(),
            theta_bounds: None,
            multistart: 10,
            pooling: GammaPooling::Unweighted,
            seed: 0,
        }
    }
}

impl GspsConfig {
    pub fn theta_bounds_for(&self, d: usize) -> Result<ThetaBounds> {
        let q = self.family.num_params(d);
        match &self.theta_bounds {
            Some(b) if b.len() == q => Ok(b.clone()),
            Some(b) => Err(GspsError::DimensionMismatch(format!(
                "theta bounds have {} entries, family needs {q}",
                b.len()
            ))),
            None => Ok(ThetaBounds::default_for(q)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockDiagnostics {
    pub block: usize,
    pub size: usize,
    pub alpha: f64,
    pub a_star: f64,
    pub b_star: f64,
    pub iterations: usize,
    pub converged: bool,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub objective: f64,
    pub objective_increases: usize,
    pub off_diagonal_sparsity: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct Stage1Block {
    pub indices: Vec<usize>,
    pub alpha: f64,
    pub bounds: SpectralBounds,
    pub estimate: PrecisionEstimate,
    pub seconds: f64,
}

impl Stage1Block {
    fn diagnostics(&self, block: usize) -> BlockDiagnostics {
        let e = &self.estimate;
        BlockDiagnostics {
            block,
            size: self.indices.len(),
            alpha: self.alpha,
            a_star: self.bounds.a_star,
            b_star: self.bounds.b_star,
            iterations: e.iterations,
            converged: e.converged,
            primal_residual: e.primal_residual,
            dual_residual: e.dual_residual,
            objective: e.objective,
            objective_increases: e.objective_increases,
            off_diagonal_sparsity: e.off_diagonal_sparsity(),
            seconds: self.seconds,
        }
    }
}

/// Solves the precision program independently on every block.
pub fn stage1_blocks(dataset: &Dataset, config: &GspsConfig, partition: &BlockPartition) -> Result<Vec<Stage1Block>> {
    if partition.assignment.len() != dataset.n() {
        return Err(GspsError::DimensionMismatch(format!(
            "partition covers {} locations, dataset has {}",
            partition.assignment.len(),
            dataset.n()
        )));
    }
    let blocks = partition.blocks();
    if let Some(b) = blocks.iter().position(|idx| idx.len() < 2) {
        return Err(GspsError::Block {
            block: b,
            source: Box::new(GspsError::TooFewLocations(blocks[b].len())),
        });
    }
    blocks
        .into_par_iter()
        .enumerate()
        .map(|(b, indices)| {
            solve_block(dataset, config, indices).map_err(|e| GspsError::Block { block: b, source: Box::new(e) })
        })
        .collect()
}

fn solve_block(dataset: &Dataset, config: &GspsConfig, indices: Vec<usize>) -> Result<Stage1Block> {
    let start = std::time::Instant::now();
    let sub = if indices.len() == dataset.n() && indices.iter().enumerate().all(|(a, &b)| a == b) {
        dataset.clone()
    } else {
        dataset.subset(&indices)?
    };
    let alpha = config.alpha.resolve(sub.n(), sub.p(), sub.num_realizations());
    let problem = Stage1Problem::from_dataset(&sub, alpha, config.spectral_bounds)?;
    let bounds = problem.bounds;
    let estimate = admm_solve(&problem, &config.solver)?;
    Ok(Stage1Block { indices, alpha, bounds, estimate, seconds: start.elapsed().as_secs_f64() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GspsDiagnostics {
    pub blocks: Vec<BlockDiagnostics>,
    pub stage2_objective: f64,
    pub stage2: ThetaFit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GspsFit {
    pub family: CorrelationFamily,
    pub theta_hat: Vec<f64>,
    pub theta_bounds: ThetaBounds,
    pub gamma_hat: DMatrix<f64>,
    pub partition: BlockPartition,
    pub diagnostics: GspsDiagnostics,
}

impl GspsFit {
    pub fn correlation(&self) -> CorrelationModel {
        CorrelationModel {
            family: self.family,
            theta: self.theta_hat.clone(),
            bounds: self.theta_bounds.clone(),
        }
    }

    pub fn model(&self) -> Result<SeparableModel> {
        SeparableModel::new(self.correlation(), self.gamma_hat.clone())
    }

    /// `q + p(p+1)/2` free scalars.
    pub fn parameter_count(&self) -> usize {
        let p = self.gamma_hat.nrows();
        self.theta_hat.len() + p * (p + 1) / 2
    }
}

/// Pools per-block `Gamma_hat_b` into one estimate.
pub fn pool_gamma(estimates: &[(usize, DMatrix<f64>)], pooling: GammaPooling) -> DMatrix<f64> {
    let p = estimates[0].1.nrows();
    let mut acc = DMatrix::<f64>::zeros(p, p);
    match pooling {
        GammaPooling::Unweighted => {
            for (_, g) in estimates {
                acc += g;
            }
            acc /= estimates.len() as f64;
        }
        GammaPooling::SizeWeighted => {
            let total: usize = estimates.iter().map(|(s, _)| s).sum();
            for (s, g) in estimates {
                acc += g * (*s as f64);
            }
            acc /= total as f64;
        }
    }
    linalg::symmetrize(&acc)
}

/// Fits `(theta, Gamma)` to a dataset; `partition = None` solves one block
/// holding every location.
pub fn gsps_fit(dataset: &Dataset, config: &GspsConfig, partition: Option<&BlockPartition>) -> Result<GspsFit> {
    let single;
    let partition = match partition {
        Some(p) => p,
        None => {
            single = BlockPartition::single(dataset.n());
            &single
        }
    };
    let theta_bounds = config.theta_bounds_for(dataset.dim())?;
    let p = dataset.p();
    let solved = stage1_blocks(dataset, config, partition)?;

    let per_block: Vec<(usize, DMatrix<f64>)> = solved
        .iter()
        .map(|b| estimate_gamma(&b.estimate.c_hat, b.indices.len(), p).map(|g| (b.indices.len(), g)))
        .collect::<Result<_>>()?;
    let gamma_hat = pool_gamma(&per_block, config.pooling);

    let diagnostics: Vec<BlockDiagnostics> = solved.iter().enumerate().map(|(b, s)| s.diagnostics(b)).collect();
    let blocks: Vec<CovarianceBlock> = solved
        .into_iter()
        .map(|b| CovarianceBlock {
            locations: b.indices.iter().map(|&i| dataset.locations()[i].clone()).collect(),
            c_hat: b.estimate.c_hat,
        })
        .collect();
    let problem = Stage2Problem {
        gamma_hat: gamma_hat.clone(),
        blocks,
        family: config.family,
        bounds: theta_bounds.clone(),
        multistart: config.multistart,
        seed: config.seed,
    };
    let theta_fit = fit_theta(&problem)?;
    if theta_fit.all_failed {
        log::warn!("stage-2: no start reached the gradient tolerance; using best point found");
    }
    Ok(GspsFit {
        family: config.family,
        theta_hat: theta_fit.theta.clone(),
        theta_bounds,
        gamma_hat,
        partition: partition.clone(),
        diagnostics: GspsDiagnostics {
            blocks: diagnostics,
            stage2_objective: theta_fit.objective,
            stage2: theta_fit,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{correlation_matrix, kronecker_cov, Location};

    #[test]
    fn gamma_from_identity_and_scalar_blocks() {
        assert_eq!(estimate_gamma(&DMatrix::identity(6, 6), 3, 2).unwrap(), DMatrix::<f64>::identity(2, 2));
        let c = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 3.0]);
        assert_eq!(estimate_gamma(&c, 2, 1).unwrap()[(0, 0)], 2.0);
        assert!(estimate_gamma(&c, 3, 1).is_err());
    }

    #[test]
    fn gamma_recovered_from_exact_kronecker() {
        let locs: Vec<Location> = (0..5).map(|i| Location::new(vec![i as f64 * 0.7]).unwrap()).collect();
        let model = CorrelationModel::with_default_bounds(CorrelationFamily::AnisotropicExponential, vec![0.9]).unwrap();
        let r = correlation_matrix(&model, &locs).unwrap();
        let gamma = DMatrix::from_row_slice(2, 2, &[2.0, 0.7, 0.7, 1.0]);
        let c = kronecker_cov(&r, &gamma).unwrap();
        assert!((estimate_gamma(&c, 5, 2).unwrap() - gamma).amax() < 1e-15);
    }

    #[test]
    fn partition_shapes() {
        let one = partition_random(7, 1, 3).unwrap();
        assert_eq!(one.blocks(), vec![(0..7).collect::<Vec<_>>()]);
        let singles = partition_random(5, 5, 3).unwrap();
        assert!(singles.sizes().iter().all(|&s| s == 1));
        let mut sizes = partition_random(10, 3, 3).unwrap().sizes();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![3, 3, 4]);
        assert!(partition_random(3, 4, 0).is_err());
        assert!(partition_random(3, 0, 0).is_err());
        assert_eq!(partition_random(50, 4, 9).unwrap(), partition_random(50, 4, 9).unwrap());
    }

    #[test]
    fn size_weighted_pooling() {
        let a = DMatrix::from_element(1, 1, 1.0);
        let b = DMatrix::from_element(1, 1, 4.0);
        let est = vec![(1, a), (3, b)];
        assert_eq!(pool_gamma(&est, GammaPooling::Unweighted)[(0, 0)], 2.5);
        assert_eq!(pool_gamma(&est, GammaPooling::SizeWeighted)[(0, 0)], 3.25);
    }
}
