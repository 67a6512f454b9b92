//! Correlation-parameter fitting: least-squares match of `r_ij(theta) Gamma_hat`
//! to the blocks `C_hat^{ij}` of the estimated covariance,
//!
//! ```text
//! f(theta) = 1/2 sum_ij | r_ij(theta) Gamma_hat - C_hat^{ij} |_F^2
//! ```
//!
//! summed over independent location blocks when the data are segmented.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{GspsError, Result};
use crate::linalg;
use crate::model::{correlation_from_features, validate_locations, CorrelationFamily, CorrelationModel, Location, ThetaBounds};
use crate::optim::{self, golden_section, multistart_points, QnOptions, QnResult};

/// Estimated covariance for one block of locations (`n_b p x n_b p`,
/// location-major).
#[derive(Debug, Clone)]
pub struct CovarianceBlock {
    pub locations: Vec<Location>,
    pub c_hat: DMatrix<f64>,
}

/// The objective with all theta-independent quantities precomputed, so each
/// evaluation costs `O(n^2 q)`.
#[derive(Debug, Clone)]
pub struct Stage2Objective {
    family: CorrelationFamily,
    q: usize,
    gamma_norm_sq: f64,
    /// Features `s(x_i - x_j)` for each unordered pair `i < j`, flattened.
    features: Vec<f64>,
    /// `<C^ij, Gamma> + <C^ji, Gamma>` per pair.
    cross: Vec<f64>,
    /// Everything that does not depend on theta.
    constant: f64,
}

fn block_dot(c: &DMatrix<f64>, i: usize, j: usize, p: usize, gamma: &DMatrix<f64>) -> f64 {
    let mut acc = 0.0;
    for b in 0..p {
        for a in 0..p {
            acc += c[(i * p + a, j * p + b)] * gamma[(a, b)];
        }
    }
    acc
}

fn block_norm_sq(c: &DMatrix<f64>, i: usize, j: usize, p: usize) -> f64 {
    let mut acc = 0.0;
    for b in 0..p {
        for a in 0..p {
            let v = c[(i * p + a, j * p + b)];
            acc += v * v;
        }
    }
    acc
}

impl Stage2Objective {
    pub fn new(family: CorrelationFamily, gamma_hat: &DMatrix<f64>, blocks: &[CovarianceBlock]) -> Result<Self> {
        if !gamma_hat.is_square() || gamma_hat.nrows() == 0 {
            return Err(GspsError::DimensionMismatch("gamma_hat must be square".into()));
        }
        if blocks.is_empty() {
            return Err(GspsError::InvalidInput("no covariance blocks".into()));
        }
        let p = gamma_hat.nrows();
        let d = blocks[0].locations.first().map(Location::dim).unwrap_or(0);
        let q = family.num_params(d);
        let gamma_norm_sq = linalg::frobenius_dot(gamma_hat, gamma_hat);
        let mut features = Vec::new();
        let mut cross = Vec::new();
        let mut constant = 0.0;
        let mut s = vec![0.0; q];
        for (b, block) in blocks.iter().enumerate() {
            let n = block.locations.len();
            let bd = validate_locations(&block.locations, 1).map_err(|e| GspsError::Block { block: b, source: Box::new(e) })?;
            if bd != d {
                return Err(GspsError::DimensionMismatch(format!("block {b} has dimension {bd}, expected {d}")));
            }
            if block.c_hat.shape() != (n * p, n * p) {
                return Err(GspsError::DimensionMismatch(format!(
                    "block {b}: C_hat is {:?}, expected ({}, {})",
                    block.c_hat.shape(),
                    n * p,
                    n * p
                )));
            }
            let c = &block.c_hat;
            for i in 0..n {
                // r_ii = 1
                let diag_dot = block_dot(c, i, i, p, gamma_hat);
                constant += 0.5 * (gamma_norm_sq - 2.0 * diag_dot + block_norm_sq(c, i, i, p));
                for j in (i + 1)..n {
                    family.features(block.locations[i].coords(), block.locations[j].coords(), &mut s);
                    features.extend_from_slice(&s);
                    cross.push(block_dot(c, i, j, p, gamma_hat) + block_dot(c, j, i, p, gamma_hat));
                    constant += 0.5 * (block_norm_sq(c, i, j, p) + block_norm_sq(c, j, i, p));
                }
            }
        }
        Ok(Stage2Objective { family, q, gamma_norm_sq, features, cross, constant })
    }

    pub fn family(&self) -> CorrelationFamily {
        self.family
    }

    pub fn q(&self) -> usize {
        self.q
    }

    fn pairs(&self) -> impl Iterator<Item = (&[f64], f64)> {
        self.features.chunks_exact(self.q.max(1)).zip(self.cross.iter().copied())
    }

    pub fn value(&self, theta: &[f64]) -> f64 {
        let g2 = self.gamma_norm_sq;
        let mut acc = 0.0;
        for (s, cross) in self.pairs() {
            let r = correlation_from_features(theta, s);
            acc += r * (r * g2 - cross);
        }
        self.constant + acc
    }

    /// Value and gradient; `df/dtheta_k = sum_ij dr_ij/dtheta_k (r_ij |Gamma|^2 - <C^ij, Gamma>)`.
    pub fn value_and_gradient(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        let g2 = self.gamma_norm_sq;
        let mut acc = 0.0;
        let mut grad = vec![0.0; self.q];
        for (s, cross) in self.pairs() {
            let r = correlation_from_features(theta, s);
            acc += r * (r * g2 - cross);
            let common = -r * (2.0 * r * g2 - cross);
            for (gk, sk) in grad.iter_mut().zip(s) {
                *gk += sk * common;
            }
        }
        (self.constant + acc, grad)
    }

    pub fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        self.value_and_gradient(theta).1
    }

    /// `|Gamma|^2 <R'_k, R'_l> + <R''_kl (x) Gamma, R (x) Gamma - C>`.
    pub fn hessian(&self, theta: &[f64]) -> DMatrix<f64> {
        let g2 = self.gamma_norm_sq;
        let q = self.q;
        let mut h = DMatrix::<f64>::zeros(q, q);
        for (s, cross) in self.pairs() {
            let r = correlation_from_features(theta, s);
            let common = r * (4.0 * r * g2 - cross);
            for k in 0..q {
                for l in k..q {
                    h[(k, l)] += s[k] * s[l] * common;
                }
            }
        }
        for k in 0..q {
            for l in 0..k {
                h[(k, l)] = h[(l, k)];
            }
        }
        h
    }
}

pub fn stage2_objective(model: &CorrelationModel, gamma_hat: &DMatrix<f64>, blocks: &[CovarianceBlock]) -> Result<f64> {
    model.bounds.check(&model.theta)?;
    let obj = Stage2Objective::new(model.family, gamma_hat, blocks)?;
    check_q(&obj, model)?;
    Ok(obj.value(&model.theta))
}

pub fn stage2_gradient(model: &CorrelationModel, gamma_hat: &DMatrix<f64>, blocks: &[CovarianceBlock]) -> Result<Vec<f64>> {
    let obj = Stage2Objective::new(model.family, gamma_hat, blocks)?;
    check_q(&obj, model)?;
    Ok(obj.gradient(&model.theta))
}

pub fn stage2_hessian(model: &CorrelationModel, gamma_hat: &DMatrix<f64>, blocks: &[CovarianceBlock]) -> Result<DMatrix<f64>> {
    model.bounds.check(&model.theta)?;
    let obj = Stage2Objective::new(model.family, gamma_hat, blocks)?;
    check_q(&obj, model)?;
    Ok(obj.hessian(&model.theta))
}

fn check_q(obj: &Stage2Objective, model: &CorrelationModel) -> Result<()> {
    if obj.q() != model.q() {
        return Err(GspsError::DimensionMismatch(format!(
            "objective has {} parameters, model has {}",
            obj.q(),
            model.q()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Stage2Problem {
    pub gamma_hat: DMatrix<f64>,
    pub blocks: Vec<CovarianceBlock>,
    pub family: CorrelationFamily,
    pub bounds: ThetaBounds,
    pub multistart: usize,
    pub seed: u64,
}

/// Width at which golden-section search stops for one-parameter families.
pub const GOLDEN_WIDTH: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaFit {
    pub theta: Vec<f64>,
    pub objective: f64,
    /// One entry per start (empty for golden-section search).
    pub runs: Vec<QnResult>,
    pub best_start: Option<usize>,
    /// No start reached the gradient tolerance; `theta` is the best point seen.
    pub all_failed: bool,
}

pub fn fit_theta(problem: &Stage2Problem) -> Result<ThetaFit> {
    let objective = Stage2Objective::new(problem.family, &problem.gamma_hat, &problem.blocks)?;
    if objective.q() != problem.bounds.len() {
        return Err(GspsError::DimensionMismatch(format!(
            "bounds have {} entries for {} parameters",
            problem.bounds.len(),
            objective.q()
        )));
    }
    if objective.q() == 1 {
        let (lo, hi) = (problem.bounds.lower[0], problem.bounds.upper[0]);
        let res = golden_section(|t| objective.value(&[t]), lo, hi, GOLDEN_WIDTH);
        return Ok(ThetaFit {
            theta: vec![res.x],
            objective: res.value,
            runs: Vec::new(),
            best_start: None,
            all_failed: !res.value.is_finite(),
        });
    }
    let starts = multistart_points(&problem.bounds, problem.multistart, problem.seed);
    let result = optim::multistart(
        |x| objective.value_and_gradient(x),
        &starts,
        &problem.bounds,
        QnOptions::default(),
    );
    if !result.best.value.is_finite() {
        return Err(GspsError::NonFinite("stage-2 objective at every start".into()));
    }
    Ok(ThetaFit {
        theta: result.best.x.clone(),
        objective: result.best.value,
        best_start: Some(result.best_index),
        all_failed: result.all_failed,
        runs: result.runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{correlation_grad, correlation_matrix, kronecker_cov};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64, n: usize, d: usize, p: usize) -> (CorrelationModel, Vec<Location>, DMatrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let locs: Vec<Location> = (0..n)
            .map(|_| Location::new((0..d).map(|_| rng.random::<f64>() * 3.0).collect()).unwrap())
            .collect();
        let theta: Vec<f64> = (0..d).map(|_| rng.random_range(0.3..1.5)).collect();
        let a = DMatrix::from_fn(p, p, |_, _| rng.random::<f64>() - 0.5);
        let gamma = &a * a.transpose() + DMatrix::identity(p, p) * 0.5;
        let model = CorrelationModel::with_default_bounds(CorrelationFamily::AnisotropicExponential, theta).unwrap();
        (model, locs, gamma)
    }

    fn exact_block(model: &CorrelationModel, locs: &[Location], gamma: &DMatrix<f64>) -> CovarianceBlock {
        let r = correlation_matrix(model, locs).unwrap();
        CovarianceBlock { locations: locs.to_vec(), c_hat: kronecker_cov(&r, gamma).unwrap() }
    }

    #[test]
    fn zero_at_exact_fit() {
        let (model, locs, gamma) = setup(1, 6, 2, 2);
        let block = exact_block(&model, &locs, &gamma);
        let f = stage2_objective(&model, &gamma, std::slice::from_ref(&block)).unwrap();
        assert!(f.abs() < 1e-12);
        let g = stage2_gradient(&model, &gamma, &[block]).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn identity_model_against_zero_covariance() {
        // theta at the upper bound with far-apart points makes R numerically I
        let locs: Vec<Location> = (0..4).map(|i| Location::new(vec![10.0 * i as f64, 0.0]).unwrap()).collect();
        let model = CorrelationModel::with_default_bounds(CorrelationFamily::AnisotropicExponential, vec![100.0, 100.0]).unwrap();
        let p = 3;
        let block = CovarianceBlock { locations: locs, c_hat: DMatrix::zeros(4 * p, 4 * p) };
        let f = stage2_objective(&model, &DMatrix::identity(p, p), &[block]).unwrap();
        assert!((f - (4 * p) as f64 / 2.0).abs() < 1e-12);
    }

    #[test]
    fn matches_dense_kronecker_oracle() {
        let (model, locs, gamma) = setup(2, 4, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let c0 = DMatrix::from_fn(8, 8, |_, _| rng.random::<f64>());
        let c = linalg::symmetrize(&c0);
        let r = correlation_matrix(&model, &locs).unwrap();
        let dense = 0.5 * (kronecker_cov(&r, &gamma).unwrap() - &c).norm_squared();
        let block = CovarianceBlock { locations: locs, c_hat: c };
        let f = stage2_objective(&model, &gamma, &[block]).unwrap();
        assert!((f - dense).abs() < 1e-10);
    }

    #[test]
    fn gradient_matches_hand_expansion_q1_n2() {
        // f(t) = 1/2 [2 |Gamma - C_d|^2 + 2 |e^{-t s} Gamma - C_o|^2] with C symmetric
        let locs = vec![Location::new(vec![0.0]).unwrap(), Location::new(vec![1.3]).unwrap()];
        let gamma = DMatrix::from_row_slice(1, 1, &[2.0]);
        let c = DMatrix::from_row_slice(2, 2, &[1.5, 0.4, 0.4, 2.5]);
        let model = CorrelationModel::with_default_bounds(CorrelationFamily::AnisotropicExponential, vec![0.7]).unwrap();
        let block = CovarianceBlock { locations: locs, c_hat: c };
        let s = 1.3f64 * 1.3;
        let r = (-0.7 * s).exp();
        let hand = 2.0 * (-s * r) * (r * 2.0 - 0.4) * 2.0;
        let g = stage2_gradient(&model, &gamma, &[block]).unwrap();
        assert!((g[0] - hand).abs() < 1e-12);
    }

    #[test]
    fn gradient_and_hessian_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..10 {
            let (model, locs, gamma) = setup(100 + trial, 8, 3, 2);
            let m = 16;
            let c0 = DMatrix::from_fn(m, m, |_, _| rng.random::<f64>() - 0.3);
            let block = CovarianceBlock { locations: locs, c_hat: linalg::symmetrize(&c0) };
            let obj = Stage2Objective::new(model.family, &gamma, &[block]).unwrap();
            let theta = model.theta.clone();
            let g = obj.gradient(&theta);
            let hess = obj.hessian(&theta);
            let h = 1e-5;
            for k in 0..3 {
                let mut tp = theta.clone();
                tp[k] += h;
                let mut tm = theta.clone();
                tm[k] -= h;
                let fd = (obj.value(&tp) - obj.value(&tm)) / (2.0 * h);
                assert!((fd - g[k]).abs() <= 1e-5 * g[k].abs().max(1.0), "grad {k}: {fd} vs {}", g[k]);
                let gp = obj.gradient(&tp);
                let gm = obj.gradient(&tm);
                for l in 0..3 {
                    let fd2 = (gp[l] - gm[l]) / (2.0 * h);
                    assert!((fd2 - hess[(l, k)]).abs() <= 1e-4 * hess[(l, k)].abs().max(1.0));
                }
            }
            assert!(linalg::max_asymmetry(&hess) == 0.0);
        }
    }

    #[test]
    fn hessian_at_truth_is_gram_matrix() {
        let (model, locs, gamma) = setup(5, 10, 2, 3);
        let block = exact_block(&model, &locs, &gamma);
        let h = stage2_hessian(&model, &gamma, &[block]).unwrap();
        let g2 = gamma.norm_squared();
        let grads: Vec<DMatrix<f64>> = (0..2).map(|k| correlation_grad(&model, &locs, k).unwrap()).collect();
        for k in 0..2 {
            for l in 0..2 {
                let want = g2 * linalg::frobenius_dot(&grads[k], &grads[l]);
                assert!((h[(k, l)] - want).abs() < 1e-10);
            }
        }
        assert!(linalg::sym_eigen(&h).eigenvalues.min() > 0.0);
    }

    #[test]
    fn fit_recovers_noiseless_theta() {
        let (model, locs, gamma) = setup(8, 15, 2, 2);
        let block = exact_block(&model, &locs, &gamma);
        let problem = Stage2Problem {
            gamma_hat: gamma,
            blocks: vec![block],
            family: model.family,
            bounds: model.bounds.clone(),
            multistart: 10,
            seed: 1,
        };
        let fit = fit_theta(&problem).unwrap();
        for (a, b) in fit.theta.iter().zip(&model.theta) {
            assert!((a - b).abs() < 1e-6, "{:?} vs {:?}", fit.theta, model.theta);
        }
        assert_eq!(fit.runs.len(), 11);
    }

    #[test]
    fn golden_search_for_one_parameter() {
        let (_, locs, gamma) = setup(9, 12, 2, 2);
        let truth = CorrelationModel::with_default_bounds(CorrelationFamily::IsotropicExponential, vec![0.8]).unwrap();
        let block = exact_block(&truth, &locs, &gamma);
        let problem = Stage2Problem {
            gamma_hat: gamma,
            blocks: vec![block],
            family: CorrelationFamily::IsotropicExponential,
            bounds: ThetaBounds::default_for(1),
            multistart: 10,
            seed: 0,
        };
        let fit = fit_theta(&problem).unwrap();
        assert!((fit.theta[0] - 0.8).abs() < 1e-6);
    }

    #[test]
    fn rejects_theta_outside_box_and_bad_shapes() {
        let (model, locs, gamma) = setup(4, 5, 2, 2);
        let block = exact_block(&model, &locs, &gamma);
        let mut outside = model.clone();
        outside.theta[0] = 1e3;
        assert!(stage2_objective(&outside, &gamma, std::slice::from_ref(&block)).is_err());
        let wrong = CovarianceBlock { locations: locs, c_hat: DMatrix::zeros(3, 3) };
        assert!(stage2_objective(&model, &gamma, &[wrong]).is_err());
    }
}
