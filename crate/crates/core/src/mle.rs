//! Maximum-likelihood baseline for the separable model, with `Gamma`
//! profiled out: `Gamma_hat(theta) = (1/(nN)) sum_r Y_r^T R(theta)^{-1} Y_r`.

use nalgebra::{Cholesky, DMatrix, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{GspsError, Result};
use crate::linalg;
use crate::model::{correlation_from_features, CorrelationFamily, CorrelationModel, Dataset, SeparableModel, ThetaBounds};
use crate::optim::{self, golden_section, multistart_points, QnOptions, QnResult};
use crate::stage2::GOLDEN_WIDTH;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Exact negative log-likelihood of the `N` realizations under
/// `vec(Y_r^T) ~ N(0, R(theta) (x) Gamma)`, via `n x n` and `p x p` factors only.
pub fn neg_loglik(model: &CorrelationModel, gamma: &DMatrix<f64>, dataset: &Dataset) -> Result<f64> {
    let r = crate::model::correlation_matrix(model, dataset.locations())?;
    let chol_r = linalg::cholesky(&r)?;
    if gamma.shape() != (dataset.p(), dataset.p()) {
        return Err(GspsError::DimensionMismatch("gamma does not match response count".into()));
    }
    let chol_g = linalg::cholesky(gamma)?;
    let (n, p, big_n) = (dataset.n() as f64, dataset.p() as f64, dataset.num_realizations() as f64);
    let q = scatter(&chol_r, dataset).0;
    let quad = linalg::frobenius_dot(&chol_g.inverse(), &q);
    Ok(0.5 * big_n * (n * p * LN_2PI + p * linalg::log_det_chol(&chol_r) + n * linalg::log_det_chol(&chol_g))
        + 0.5 * quad)
}

/// `Q = sum_r Y_r^T R^{-1} Y_r` and the whitened `R^{-1} Y_r`.
fn scatter(chol_r: &Cholesky<f64, Dyn>, dataset: &Dataset) -> (DMatrix<f64>, Vec<DMatrix<f64>>) {
    let p = dataset.p();
    let mut q = DMatrix::<f64>::zeros(p, p);
    let mut solved = Vec::with_capacity(dataset.num_realizations());
    for y in dataset.realizations() {
        let v = chol_r.solve(y);
        q += y.tr_mul(&v);
        solved.push(v);
    }
    linalg::symmetrize_in_place(&mut q);
    (q, solved)
}

/// Profile likelihood over `theta` with cached pair features.
#[derive(Debug, Clone)]
pub struct ProfileLikelihood<'a> {
    dataset: &'a Dataset,
    family: CorrelationFamily,
    q: usize,
    /// Features of every ordered pair, row-major `n x n x q`.
    features: Vec<f64>,
}

impl<'a> ProfileLikelihood<'a> {
    pub fn new(dataset: &'a Dataset, family: CorrelationFamily) -> Self {
        let n = dataset.n();
        let q = family.num_params(dataset.dim());
        let mut features = vec![0.0; n * n * q];
        for i in 0..n {
            for j in 0..n {
                let off = (i * n + j) * q;
                family.features(
                    dataset.locations()[i].coords(),
                    dataset.locations()[j].coords(),
                    &mut features[off..off + q],
                );
            }
        }
        ProfileLikelihood { dataset, family, q, features }
    }

    fn correlation(&self, theta: &[f64]) -> DMatrix<f64> {
        let n = self.dataset.n();
        DMatrix::from_fn(n, n, |i, j| {
            let off = (i * n + j) * self.q;
            correlation_from_features(theta, &self.features[off..off + self.q])
        })
    }

    /// `Gamma_hat(theta)`; `None` when `R(theta)` is numerically singular.
    pub fn gamma_hat(&self, theta: &[f64]) -> Option<DMatrix<f64>> {
        let chol = Cholesky::new(self.correlation(theta))?;
        let (q, _) = scatter(&chol, self.dataset);
        let denom = (self.dataset.n() * self.dataset.num_realizations()) as f64;
        Some(q / denom)
    }

    pub fn value(&self, theta: &[f64]) -> f64 {
        self.value_and_gradient(theta).0
    }

    /// Profiled negative log-likelihood and its gradient; `+inf` where `R` or
    /// `Gamma_hat` is not positive definite.
    pub fn value_and_gradient(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        let fail = (f64::INFINITY, vec![0.0; self.q]);
        let ds = self.dataset;
        let (n, p, big_n) = (ds.n(), ds.p(), ds.num_realizations());
        let Some(chol_r) = Cholesky::new(self.correlation(theta)) else {
            return fail;
        };
        let (q, solved) = scatter(&chol_r, ds);
        let gamma_hat = q / (n * big_n) as f64;
        let Some(chol_g) = Cholesky::new(gamma_hat) else {
            return fail;
        };
        let (nf, pf, nn) = (n as f64, p as f64, big_n as f64);
        let value = 0.5 * nn * (nf * pf * LN_2PI + pf * linalg::log_det_chol(&chol_r) + nf * linalg::log_det_chol(&chol_g) + nf * pf);

        // d/dtheta_k = 1/2 <R'_k, N p R^{-1} - sum_r V_r Gamma^{-1} V_r^T>
        let g_inv = chol_g.inverse();
        let mut inner = chol_r.inverse() * (nn * pf);
        for v in &solved {
            inner -= v * &g_inv * v.transpose();
        }
        let mut grad = vec![0.0; self.q];
        for i in 0..n {
            for j in 0..n {
                let off = (i * n + j) * self.q;
                let s = &self.features[off..off + self.q];
                let r = correlation_from_features(theta, s);
                let w = -0.5 * r * inner[(i, j)];
                for (gk, sk) in grad.iter_mut().zip(s) {
                    *gk += w * sk;
                }
            }
        }
        if !value.is_finite() {
            return fail;
        }
        (value, grad)
    }

    pub fn family(&self) -> CorrelationFamily {
        self.family
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MleConfig {
    pub family: CorrelationFamily,
    pub theta_bounds: Option<ThetaBounds>,
    pub starts: usize,
    pub seed: u64,
}

impl Default for MleConfig {
    fn default() -> Self {
        MleConfig {
            family: CorrelationFamily::AnisotropicExponential,
            theta_bounds: None,
            starts: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MleFit {
    pub family: CorrelationFamily,
    pub theta_hat: Vec<f64>,
    pub theta_bounds: ThetaBounds,
    pub gamma_hat: DMatrix<f64>,
    pub neg_loglik: f64,
    pub runs: Vec<QnResult>,
    pub all_failed: bool,
}

impl MleFit {
    pub fn model(&self) -> Result<SeparableModel> {
        SeparableModel::new(
            CorrelationModel {
                family: self.family,
                theta: self.theta_hat.clone(),
                bounds: self.theta_bounds.clone(),
            },
            self.gamma_hat.clone(),
        )
    }
}

pub fn mle_fit(dataset: &Dataset, config: &MleConfig) -> Result<MleFit> {
    let q = config.family.num_params(dataset.dim());
    let bounds = config.theta_bounds.clone().unwrap_or_else(|| ThetaBounds::default_for(q));
    if bounds.len() != q {
        return Err(GspsError::DimensionMismatch("theta bounds do not match the family".into()));
    }
    let profile = ProfileLikelihood::new(dataset, config.family);
    let (theta, value, runs, all_failed) = if q == 1 {
        let res = golden_section(|t| profile.value(&[t]), bounds.lower[0], bounds.upper[0], GOLDEN_WIDTH);
        (vec![res.x], res.value, Vec::new(), !res.value.is_finite())
    } else {
        let starts = multistart_points(&bounds, config.starts, config.seed);
        let res = optim::multistart(|x| profile.value_and_gradient(x), &starts, &bounds, QnOptions::default());
        (res.best.x.clone(), res.best.value, res.runs, res.all_failed)
    };
    if !value.is_finite() {
        return Err(GspsError::NotPositiveDefinite("likelihood is infinite at every start".into()));
    }
    let gamma_hat = profile
        .gamma_hat(&theta)
        .ok_or_else(|| GspsError::NotPositiveDefinite("R(theta_hat)".into()))?;
    Ok(MleFit {
        family: config.family,
        theta_hat: theta,
        theta_bounds: bounds,
        gamma_hat: linalg::symmetrize(&gamma_hat),
        neg_loglik: value,
        runs,
        all_failed,
    })
}
