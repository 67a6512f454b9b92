//! Distance-weighted l1-penalized log-determinant precision estimation:
//!
//! ```text
//! P_hat = argmin_{a* I <= P <= b* I}  <S, P> - log det P + alpha <W, |P|>
//! ```
//!
//! solved by ADMM on the splitting `P = Z`, with the smooth term and the
//! spectral box on `P` and the weighted l1 term on `Z`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{GspsError, Result};
use crate::linalg;
use crate::model::{distance_matrix, Dataset};

/// Sample second-moment matrix `S = (1/N) sum_r y_r y_r^T` of the
/// location-major stacked realizations (`np x np`).
pub fn sample_covariance(dataset: &Dataset) -> DMatrix<f64> {
    let m = dataset.n() * dataset.p();
    let big_n = dataset.num_realizations();
    let mut stacked = DMatrix::<f64>::zeros(m, big_n);
    for (r, y) in dataset.realizations().iter().enumerate() {
        // column-major storage of Y^T is the row-major order of Y
        let yt = y.transpose();
        stacked.column_mut(r).copy_from_slice(yt.as_slice());
    }
    let mut s = &stacked * stacked.transpose() / big_n as f64;
    linalg::symmetrize_in_place(&mut s);
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralBounds {
    pub a_star: f64,
    pub b_star: f64,
}

impl SpectralBounds {
    pub fn new(a_star: f64, b_star: f64) -> Result<Self> {
        if !(a_star > 0.0 && a_star <= b_star && b_star.is_finite()) {
            return Err(GspsError::InvalidInput(format!(
                "spectral bounds need 0 < a* <= b* < inf, got [{a_star}, {b_star}]"
            )));
        }
        Ok(SpectralBounds { a_star, b_star })
    }

    /// Wide default box used when nothing is known about the precision spectrum:
    /// `a* = 1e-6 / |S|_2`, `b* = 1e6 max(1, 1 / lambda_min^+(S))`.
    pub fn wide_default(s: &DMatrix<f64>) -> Self {
        let eig = linalg::sym_eigen(s).eigenvalues;
        let top = eig.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let a_star = if top > 0.0 { 1e-6 / top } else { 1e-6 };
        let floor = 1e-12 * top;
        let min_pos = eig
            .iter()
            .copied()
            .filter(|&v| v > floor && v > 0.0)
            .fold(f64::INFINITY, f64::min);
        let b_star = if min_pos.is_finite() {
            1e6 * (1.0f64).max(1.0 / min_pos)
        } else {
            1e6
        };
        SpectralBounds { a_star, b_star: b_star.max(a_star) }
    }
}

#[derive(Debug, Clone)]
pub struct Stage1Problem {
    pub s: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub alpha: f64,
    pub bounds: SpectralBounds,
}

impl Stage1Problem {
    pub fn new(s: DMatrix<f64>, w: DMatrix<f64>, alpha: f64, bounds: SpectralBounds) -> Result<Self> {
        if !s.is_square() || s.shape() != w.shape() {
            return Err(GspsError::DimensionMismatch(format!(
                "S is {:?}, W is {:?}",
                s.shape(),
                w.shape()
            )));
        }
        if !linalg::all_finite(&s) || !linalg::all_finite(&w) {
            return Err(GspsError::NonFinite("S or W".into()));
        }
        let scale = s.amax().max(1.0);
        if linalg::max_asymmetry(&s) > 1e-10 * scale {
            return Err(GspsError::InvalidInput("S is not symmetric".into()));
        }
        if linalg::max_asymmetry(&w) > 1e-10 * w.amax().max(1.0) || w.min() < 0.0 {
            return Err(GspsError::InvalidInput("W must be symmetric and nonnegative".into()));
        }
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(GspsError::InvalidInput(format!("alpha must be >= 0, got {alpha}")));
        }
        SpectralBounds::new(bounds.a_star, bounds.b_star)?;
        Ok(Stage1Problem { s, w, alpha, bounds })
    }

    /// Builds `S` and `W = G (x) 1 1^T` from a dataset. With `bounds = None`
    /// the wide default box is used.
    pub fn from_dataset(dataset: &Dataset, alpha: f64, bounds: Option<SpectralBounds>) -> Result<Self> {
        let s = sample_covariance(dataset);
        let w = distance_matrix(dataset.locations())?.penalty_weights(dataset.p());
        let bounds = bounds.unwrap_or_else(|| SpectralBounds::wide_default(&s));
        Stage1Problem::new(s, w, alpha, bounds)
    }

    pub fn dim(&self) -> usize {
        self.s.nrows()
    }

    /// Objective value at a positive-definite `p`; `+inf` otherwise.
    pub fn objective(&self, p: &DMatrix<f64>) -> f64 {
        match nalgebra::Cholesky::new(p.clone()) {
            Some(chol) => self.objective_with_logdet(p, linalg::log_det_chol(&chol)),
            None => f64::INFINITY,
        }
    }

    fn objective_with_logdet(&self, p: &DMatrix<f64>, log_det: f64) -> f64 {
        let penalty: f64 = self.w.iter().zip(p.iter()).map(|(w, v)| w * v.abs()).sum();
        linalg::frobenius_dot(&self.s, p) - log_det + self.alpha * penalty
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub admm_penalty: f64,
    pub primal_tol: f64,
    pub dual_tol: f64,
    pub max_iter: usize,
    pub adaptive_penalty: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            admm_penalty: 1.0,
            primal_tol: 1e-6,
            dual_tol: 1e-6,
            max_iter: 5000,
            adaptive_penalty: true,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.admm_penalty > 0.0 && self.primal_tol > 0.0 && self.dual_tol > 0.0) {
            return Err(GspsError::InvalidInput(
                "ADMM penalty and tolerances must be positive".into(),
            ));
        }
        if self.max_iter == 0 {
            return Err(GspsError::InvalidInput("max_iter must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub penalty: f64,
    pub objective: f64,
}

#[derive(Debug, Clone)]
pub struct PrecisionEstimate {
    pub p_hat: DMatrix<f64>,
    pub c_hat: DMatrix<f64>,
    pub iterations: usize,
    /// False when `max_iter` was hit; the estimate is still usable.
    pub converged: bool,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub objective: f64,
    /// Number of iterations whose objective (at the `P` iterate) rose by more
    /// than `1e-10 (1 + |f|)` over the previous one.
    pub objective_increases: usize,
    pub trace: Vec<IterationRecord>,
}

impl PrecisionEstimate {
    /// Fraction of exactly-zero off-diagonal entries of `p_hat`.
    pub fn off_diagonal_sparsity(&self) -> f64 {
        let m = self.p_hat.nrows();
        if m < 2 {
            return 0.0;
        }
        let mut zeros = 0usize;
        for i in 0..m {
            for j in 0..m {
                if i != j && self.p_hat[(i, j)] == 0.0 {
                    zeros += 1;
                }
            }
        }
        zeros as f64 / (m * (m - 1)) as f64
    }
}

/// Positive root of `rho x - 1/x = m`, written to avoid cancellation.
fn logdet_prox_root(m: f64, rho: f64) -> f64 {
    let disc = (m * m + 4.0 * rho).sqrt();
    if m >= 0.0 {
        (m + disc) / (2.0 * rho)
    } else {
        2.0 / (disc - m)
    }
}

fn prox_with_eigenvalues(
    a: &DMatrix<f64>,
    s: &DMatrix<f64>,
    rho: f64,
    a_star: f64,
    b_star: f64,
) -> (DMatrix<f64>, DVector<f64>) {
    let mut m = a * rho - s;
    linalg::symmetrize_in_place(&mut m);
    let (vectors, eigenvalues) = linalg::sym_eigen_fast(&m);
    let values = eigenvalues.map(|lambda| logdet_prox_root(lambda, rho).clamp(a_star, b_star));
    (linalg::reconstruct(&vectors, &values), values)
}

/// `argmin_{a* I <= P <= b* I} <S, P> - log det P + (rho/2) |P - A|_F^2`.
pub fn prox_logdet_box(
    a: &DMatrix<f64>,
    s: &DMatrix<f64>,
    rho: f64,
    a_star: f64,
    b_star: f64,
) -> Result<DMatrix<f64>> {
    if !(rho > 0.0) {
        return Err(GspsError::InvalidInput(format!("ADMM penalty must be > 0, got {rho}")));
    }
    if a.shape() != s.shape() || !a.is_square() {
        return Err(GspsError::DimensionMismatch("prox arguments must be square and equal".into()));
    }
    SpectralBounds::new(a_star, b_star)?;
    Ok(prox_with_eigenvalues(a, s, rho, a_star, b_star).0)
}

/// Entrywise `sign(Z_ij) max(|Z_ij| - tau W_ij, 0)`, diagonal included.
pub fn soft_threshold_weighted(z: &DMatrix<f64>, w: &DMatrix<f64>, tau: f64) -> DMatrix<f64> {
    z.zip_map(w, |v, wt| {
        let shrunk = v.abs() - tau * wt;
        if shrunk > 0.0 {
            shrunk.copysign(v)
        } else {
            0.0
        }
    })
}

fn clip_into_box(z: &DMatrix<f64>, bounds: SpectralBounds) -> DMatrix<f64> {
    let mut sym = z.clone();
    linalg::symmetrize_in_place(&mut sym);
    let eig = linalg::sym_eigen(&sym);
    let (lo, hi) = (eig.eigenvalues.min(), eig.eigenvalues.max());
    if lo >= bounds.a_star && hi <= bounds.b_star {
        // already feasible; keep the exact zeros of the l1 iterate
        return sym;
    }
    let clipped = eig.eigenvalues.map(|v| v.clamp(bounds.a_star, bounds.b_star));
    linalg::reconstruct(&eig.eigenvectors, &clipped)
}

pub fn admm_solve(problem: &Stage1Problem, config: &SolverConfig) -> Result<PrecisionEstimate> {
    config.validate()?;
    let m = problem.dim();
    let SpectralBounds { a_star, b_star } = problem.bounds;
    let alpha = problem.alpha;

    // diagonal start: exact minimizer when all off-diagonal entries vanish
    let mut z = DMatrix::<f64>::zeros(m, m);
    for i in 0..m {
        let denom = problem.s[(i, i)] + alpha * problem.w[(i, i)];
        let v = if denom > 0.0 { 1.0 / denom } else { b_star };
        z[(i, i)] = v.clamp(a_star, b_star);
    }
    let mut u = DMatrix::<f64>::zeros(m, m);
    let mut rho = config.admm_penalty;
    let mut trace = Vec::new();
    let mut objective_increases = 0usize;
    let mut last_objective = f64::INFINITY;
    let mut converged = false;
    let (mut primal, mut dual) = (f64::INFINITY, f64::INFINITY);
    let mut iterations = 0;

    for iter in 1..=config.max_iter {
        iterations = iter;
        let (p, eigvals) = prox_with_eigenvalues(&(&z - &u), &problem.s, rho, a_star, b_star);
        let z_prev = std::mem::replace(&mut z, soft_threshold_weighted(&(&p + &u), &problem.w, alpha / rho));
        let diff = &p - &z;
        u += &diff;

        primal = diff.norm();
        dual = rho * (&z - &z_prev).norm();
        if !primal.is_finite() || !dual.is_finite() || !linalg::all_finite(&z) {
            return Err(GspsError::NonFinite(format!("ADMM iterate at iteration {iter}")));
        }
        let log_det: f64 = eigvals.iter().map(|v| v.ln()).sum();
        let objective = problem.objective_with_logdet(&p, log_det);
        if objective > last_objective + 1e-10 * (1.0 + last_objective.abs()) {
            objective_increases += 1;
        }
        last_objective = objective;
        trace.push(IterationRecord {
            iteration: iter,
            primal_residual: primal,
            dual_residual: dual,
            penalty: rho,
            objective,
        });

        let eps_primal = config.primal_tol * (1.0 + p.norm().max(z.norm()));
        let eps_dual = config.dual_tol * (1.0 + rho * u.norm());
        if primal <= eps_primal && dual <= eps_dual {
            converged = true;
            break;
        }
        if config.adaptive_penalty {
            if primal > 10.0 * dual {
                rho *= 2.0;
                u /= 2.0;
            } else if dual > 10.0 * primal {
                rho /= 2.0;
                u *= 2.0;
            }
        }
    }
    if !converged {
        log::warn!("ADMM stopped at max_iter = {} (primal {primal:e}, dual {dual:e})", config.max_iter);
    }

    let p_hat = clip_into_box(&z, problem.bounds);
    let c_hat = linalg::spd_inverse(&p_hat)?;
    let objective = problem.objective(&p_hat);
    Ok(PrecisionEstimate {
        p_hat,
        c_hat,
        iterations,
        converged,
        primal_residual: primal,
        dual_residual: dual,
        objective,
        objective_increases,
        trace,
    })
}

/// `alpha = c sqrt(ln(np) / N)`. Zero when `np = 1`.
pub fn default_alpha(n: usize, p: usize, num_realizations: usize, c: f64) -> f64 {
    let np = (n * p) as f64;
    c * (np.ln() / num_realizations as f64).sqrt()
}

pub const DEFAULT_ALPHA_C: f64 = 1e-2;

/// Range of penalties for which the high-probability error bounds apply.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaWindow {
    /// `N_0 = ceil(2[(M + 2) ln(np) + ln 4])`.
    pub n0: usize,
    pub lower: f64,
    pub upper: f64,
}

impl AlphaWindow {
    pub fn is_nonempty(&self) -> bool {
        self.lower <= self.upper
    }
}

pub fn min_realizations(n: usize, p: usize, m: f64) -> usize {
    let np = (n * p) as f64;
    (2.0 * ((m + 2.0) * np.ln() + 4f64.ln())).ceil() as usize
}

/// `[40 max_i Gamma_ii sqrt(N_0 / N), 40 max_i Gamma_ii]`.
pub fn theoretical_alpha_window(
    n: usize,
    p: usize,
    num_realizations: usize,
    m: f64,
    max_gamma_diag: f64,
) -> AlphaWindow {
    let n0 = min_realizations(n, p, m);
    let upper = 40.0 * max_gamma_diag;
    AlphaWindow {
        n0,
        lower: upper * (n0 as f64 / num_realizations as f64).sqrt(),
        upper,
    }
}

/// Right-hand side of the Frobenius error bound `2 b*^2 p (n + |G|_F) alpha`.
pub fn precision_error_bound(b_star: f64, p: usize, n: usize, g_frobenius: f64, alpha: f64) -> f64 {
    2.0 * b_star * b_star * p as f64 * (n as f64 + g_frobenius) * alpha
}

/// Right-hand side of the spectral covariance bound `2 (b*/a*)^2 p (n + |G|_F) alpha`.
pub fn covariance_error_bound(
    a_star: f64,
    b_star: f64,
    p: usize,
    n: usize,
    g_frobenius: f64,
    alpha: f64,
) -> f64 {
    let ratio = b_star / a_star;
    2.0 * ratio * ratio * p as f64 * (n as f64 + g_frobenius) * alpha
}
