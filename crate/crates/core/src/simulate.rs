//! Sampling zero-mean separable multivariate Gaussian random fields and
//! drawing random ground-truth parameters.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{GspsError, Result};
use crate::linalg;
use crate::model::{correlation_matrix, Dataset, Location, SeparableModel};
use crate::seed::derive_seed;

/// Eigenvalues in `(-EIG_CLAMP, 0)` are treated as zero when taking square roots.
pub const EIG_CLAMP: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct SimulationSpec {
    pub locations: Vec<Location>,
    pub model: SeparableModel,
    pub num_realizations: usize,
    pub seed: u64,
}

/// Draws `N` realizations `Y_r = R^{1/2} Z_r Gamma^{1/2}` with `Z_r` standard normal,
/// so that the location-major stacking of `Y_r` has covariance `R (x) Gamma`.
///
/// Realization `r` uses its own stream seeded from `(seed, r)`, so the output does
/// not depend on how the work is scheduled.
pub fn sample_grf(spec: &SimulationSpec) -> Result<Dataset> {
    if spec.num_realizations == 0 {
        return Err(GspsError::InvalidInput("need at least one realization".into()));
    }
    let r = correlation_matrix(&spec.model.correlation, &spec.locations)?;
    let root_r = linalg::psd_sqrt(&r, EIG_CLAMP)
        .map_err(|e| GspsError::NotPositiveDefinite(format!("correlation matrix: {e}")))?;
    let root_gamma = linalg::psd_sqrt(&spec.model.gamma, EIG_CLAMP)
        .map_err(|e| GspsError::NotPositiveDefinite(format!("gamma: {e}")))?;
    sample_with_roots(&spec.locations, &root_r, &root_gamma, spec.num_realizations, spec.seed)
}

/// Like [`sample_grf`] but accepts a PSD (possibly singular) between-response
/// covariance; the separable model type itself requires `Gamma` PD.
pub fn sample_grf_psd(
    locations: &[Location],
    correlation: &crate::model::CorrelationModel,
    gamma: &DMatrix<f64>,
    num_realizations: usize,
    seed: u64,
) -> Result<Dataset> {
    if num_realizations == 0 {
        return Err(GspsError::InvalidInput("need at least one realization".into()));
    }
    let r = correlation_matrix(correlation, locations)?;
    let root_r = linalg::psd_sqrt(&r, EIG_CLAMP)?;
    let root_gamma = linalg::psd_sqrt(gamma, EIG_CLAMP)?;
    sample_with_roots(locations, &root_r, &root_gamma, num_realizations, seed)
}

fn sample_with_roots(
    locations: &[Location],
    root_r: &DMatrix<f64>,
    root_gamma: &DMatrix<f64>,
    num_realizations: usize,
    seed: u64,
) -> Result<Dataset> {
    let n = locations.len();
    let p = root_gamma.nrows();
    let realizations: Vec<DMatrix<f64>> = (0..num_realizations)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[r as u64]));
            let z = DMatrix::<f64>::from_fn(n, p, |_, _| rng.sample(StandardNormal));
            root_r * z * root_gamma
        })
        .collect();
    Dataset::new(locations.to_vec(), realizations)
}

/// Ground truth for one replicate: `theta*` uniform on the positive-orthant
/// part of the sphere of the given radius, and `Gamma* = A^T A` with `A` a
/// `w x p` standard normal matrix.
pub fn random_true_params(
    d: usize,
    p: usize,
    w: usize,
    radius: f64,
    seed: u64,
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    if d == 0 || p == 0 {
        return Err(GspsError::InvalidInput("need d >= 1 and p >= 1".into()));
    }
    if w <= p {
        return Err(GspsError::InvalidInput(format!("need w > p, got w = {w}, p = {p}")));
    }
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(GspsError::InvalidInput("radius must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta = if d == 1 {
        vec![radius]
    } else {
        loop {
            let z: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal).abs()).collect();
            let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
            // a zero coordinate would put theta on the boundary of the orthant
            if norm > 0.0 && z.iter().all(|&v| v > 0.0) {
                break z.into_iter().map(|v| radius * v / norm).collect();
            }
        }
    };
    let a = DMatrix::<f64>::from_fn(w, p, |_, _| rng.sample(StandardNormal));
    let mut gamma = a.transpose() * &a;
    linalg::symmetrize_in_place(&mut gamma);
    Ok((theta, gamma))
}

/// Default number of rows of `A` when drawing `Gamma*`.
pub fn default_w(p: usize) -> usize {
    p + 3
}

/// `n` points uniform in `[0, side]^d`.
pub fn uniform_locations<R: Rng>(rng: &mut R, n: usize, d: usize, side: f64) -> Vec<Location> {
    (0..n)
        .map(|_| {
            let coords = (0..d).map(|_| rng.random::<f64>() * side).collect();
            Location::new(coords).expect("finite coordinates")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{kronecker_cov, CorrelationFamily, CorrelationModel};

    fn spec(n: usize, p_gamma: DMatrix<f64>, num: usize, seed: u64) -> SimulationSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let locations = uniform_locations(&mut rng, n, 2, 3.0);
        let correlation =
            CorrelationModel::with_default_bounds(CorrelationFamily::AnisotropicExponential, vec![0.8, 0.5])
                .unwrap();
        SimulationSpec {
            locations,
            model: SeparableModel { correlation, gamma: p_gamma },
            num_realizations: num,
            seed,
        }
    }

    #[test]
    fn rank_one_gamma_gives_identical_columns() {
        let gamma = DMatrix::from_element(2, 2, 1.0);
        let s = spec(6, gamma.clone(), 20, 1);
        let data = sample_grf_psd(&s.locations, &s.model.correlation, &gamma, 20, 1).unwrap();
        for y in data.realizations() {
            for i in 0..6 {
                assert!((y[(i, 0)] - y[(i, 1)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn seeded_determinism_is_bit_exact() {
        let gamma = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let a = sample_grf(&spec(5, gamma.clone(), 50, 42)).unwrap();
        let b = sample_grf(&spec(5, gamma.clone(), 50, 42)).unwrap();
        assert_eq!(a, b);
        let c = sample_grf(&spec(5, gamma, 50, 43)).unwrap();
        assert_ne!(a.realizations(), c.realizations());
    }

    #[test]
    fn location_marginal_matches_gamma() {
        let gamma = DMatrix::from_row_slice(2, 2, &[2.0, 0.8, 0.8, 1.0]);
        let mut s = spec(2, gamma.clone(), 40_000, 7);
        s.locations.truncate(1);
        s.locations.push(Location::new(vec![50.0, 50.0]).unwrap());
        let data = sample_grf(&s).unwrap();
        let mut emp = DMatrix::<f64>::zeros(2, 2);
        for y in data.realizations() {
            let row = y.row(0).transpose();
            emp += &row * row.transpose();
        }
        emp /= data.num_realizations() as f64;
        assert!((emp - gamma.clone()).norm() / gamma.norm() < 0.03);
    }

    #[test]
    fn cross_location_covariance_within_three_standard_errors() {
        let gamma = DMatrix::from_row_slice(2, 2, &[1.5, 0.6, 0.6, 1.0]);
        let s = spec(3, gamma.clone(), 20_000, 9);
        let data = sample_grf(&s).unwrap();
        let r = correlation_matrix(&s.model.correlation, &s.locations).unwrap();
        let c = kronecker_cov(&r, &gamma).unwrap();
        let big_n = data.num_realizations() as f64;
        let m = 6;
        let mut sum = DMatrix::<f64>::zeros(m, m);
        let mut sum_sq = DMatrix::<f64>::zeros(m, m);
        for y in data.realizations() {
            let v = nalgebra::DVector::from_iterator(m, y.transpose().iter().copied());
            let outer = &v * v.transpose();
            sum_sq += outer.component_mul(&outer);
            sum += outer;
        }
        for a in 0..m {
            for b in 0..m {
                let mean = sum[(a, b)] / big_n;
                let var = sum_sq[(a, b)] / big_n - mean * mean;
                let se = (var / big_n).sqrt();
                assert!((mean - c[(a, b)]).abs() <= 3.0 * se + 1e-12, "entry ({a},{b})");
            }
        }
    }

    #[test]
    fn true_params_contract() {
        let (theta, _) = random_true_params(1, 2, 5, 1.0, 0).unwrap();
        assert_eq!(theta, vec![1.0]);
        let (theta, _) = random_true_params(1, 2, 5, 2.5, 0).unwrap();
        assert_eq!(theta, vec![2.5]);
        let (theta, gamma) = random_true_params(10, 3, 6, 1.0, 3).unwrap();
        let norm = theta.iter().map(|t| t * t).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        assert!(theta.iter().all(|&t| t > 0.0));
        assert_eq!(gamma.shape(), (3, 3));
        assert!(random_true_params(2, 3, 3, 1.0, 0).is_err());
    }

    #[test]
    fn true_gamma_is_positive_definite() {
        for seed in 0..1000 {
            let (_, gamma) = random_true_params(2, 2, default_w(2), 1.0, seed).unwrap();
            assert!(linalg::sym_eigen(&gamma).eigenvalues.min() > 0.0, "seed {seed}");
        }
    }

    #[test]
    fn rejects_indefinite_correlation() {
        let gamma = DMatrix::<f64>::identity(1, 1);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, -2.0, -2.0, 1.0]);
        assert!(linalg::psd_sqrt(&bad, EIG_CLAMP).is_err());
        let s = spec(3, gamma, 0, 1);
        assert!(sample_grf(&s).is_err());
    }
}
