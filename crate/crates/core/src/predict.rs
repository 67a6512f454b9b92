//! Co-kriging with a fitted separable model.
//!
//! For `C = R (x) Gamma` the kriging weights factor as
//! `(r^T (x) Gamma)(R (x) Gamma)^{-1} = (r^T R^{-1}) (x) I_p`, so the mean
//! prediction is `Y_bar^T R^{-1} r` and never touches an `np x np` system.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{GspsError, Result};
use crate::gsps::BlockPartition;
use crate::model::{correlation_matrix, correlation_vector, Location, SeparableModel};

/// Point prediction interface shared by joint, blocked and per-response models.
pub trait Predict {
    fn p(&self) -> usize;
    fn predict_mean(&self, x0: &Location) -> Result<DVector<f64>>;
    fn predict_cov(&self, x0: &Location) -> Result<DMatrix<f64>>;
}

const JITTERS: [f64; 4] = [0.0, 1e-10, 1e-8, 1e-6];

#[derive(Debug, Clone)]
pub struct Predictor {
    model: SeparableModel,
    locations: Vec<Location>,
    ybar: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    jitter: f64,
}

impl Predictor {
    /// Factorizes `R(theta)` once. If the factorization fails a diagonal
    /// jitter (starting at `1e-10`) is added and a warning logged.
    pub fn new(model: SeparableModel, locations: Vec<Location>, ybar: DMatrix<f64>) -> Result<Self> {
        if ybar.shape() != (locations.len(), model.p()) {
            return Err(GspsError::DimensionMismatch(format!(
                "mean response is {:?}, expected ({}, {})",
                ybar.shape(),
                locations.len(),
                model.p()
            )));
        }
        let r = correlation_matrix(&model.correlation, &locations)?;
        let n = r.nrows();
        for jitter in JITTERS {
            let mut rj = r.clone();
            if jitter > 0.0 {
                rj += DMatrix::<f64>::identity(n, n) * jitter;
            }
            if let Some(chol) = Cholesky::new(rj) {
                if jitter > 0.0 {
                    log::warn!("correlation matrix numerically singular; added {jitter:e} I");
                }
                return Ok(Predictor { model, locations, ybar, chol, jitter });
            }
        }
        Err(GspsError::NotPositiveDefinite("correlation matrix at training locations".into()))
    }

    pub fn model(&self) -> &SeparableModel {
        &self.model
    }

    pub fn locations(&self) -> &[Location] {
        &self.locations
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Kriging weights `R^{-1} r(x0)` together with `r(x0)`.
    pub fn weights(&self, x0: &Location) -> Result<(DVector<f64>, DVector<f64>)> {
        let r0 = correlation_vector(&self.model.correlation, &self.locations, x0)?;
        let w = self.chol.solve(&r0);
        Ok((w, r0))
    }

    /// `1 - r^T R^{-1} r`, clamped at zero.
    pub fn variance_factor(&self, x0: &Location) -> Result<f64> {
        let (w, r0) = self.weights(x0)?;
        Ok((1.0 - r0.dot(&w)).max(0.0))
    }
}

impl Predict for Predictor {
    fn p(&self) -> usize {
        self.model.p()
    }

    fn predict_mean(&self, x0: &Location) -> Result<DVector<f64>> {
        let (w, _) = self.weights(x0)?;
        Ok(self.ybar.tr_mul(&w))
    }

    fn predict_cov(&self, x0: &Location) -> Result<DMatrix<f64>> {
        Ok(&self.model.gamma * self.variance_factor(x0)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockRule {
    /// Use the block that holds the nearest training location.
    #[default]
    Nearest,
    /// Blend block predictions with weights `1 / dist(x0, block)`.
    InverseDistance,
}

/// One predictor per block of a partition.
#[derive(Debug, Clone)]
pub struct BlockedPredictor {
    blocks: Vec<Predictor>,
    rule: BlockRule,
}

impl BlockedPredictor {
    pub fn new(
        model: &SeparableModel,
        locations: &[Location],
        ybar: &DMatrix<f64>,
        partition: &BlockPartition,
        rule: BlockRule,
    ) -> Result<Self> {
        if partition.assignment.len() != locations.len() {
            return Err(GspsError::DimensionMismatch("partition does not match training locations".into()));
        }
        let blocks = partition
            .blocks()
            .into_iter()
            .map(|idx| {
                let locs = idx.iter().map(|&i| locations[i].clone()).collect();
                let y = ybar.select_rows(idx.iter());
                Predictor::new(model.clone(), locs, y)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BlockedPredictor { blocks, rule })
    }

    fn block_distances(&self, x0: &Location) -> Vec<f64> {
        self.blocks
            .iter()
            .map(|b| b.locations().iter().map(|x| x.distance(x0)).fold(f64::INFINITY, f64::min))
            .collect()
    }

    fn blend_weights(&self, x0: &Location) -> Vec<f64> {
        let dist = self.block_distances(x0);
        let nearest = (0..dist.len()).min_by(|&a, &b| dist[a].total_cmp(&dist[b])).unwrap_or(0);
        let mut w = vec![0.0; dist.len()];
        match self.rule {
            BlockRule::Nearest => w[nearest] = 1.0,
            BlockRule::InverseDistance => {
                if dist[nearest] == 0.0 {
                    w[nearest] = 1.0;
                } else {
                    let total: f64 = dist.iter().map(|d| 1.0 / d).sum();
                    for (wi, d) in w.iter_mut().zip(&dist) {
                        *wi = (1.0 / d) / total;
                    }
                }
            }
        }
        w
    }
}

impl Predict for BlockedPredictor {
    fn p(&self) -> usize {
        self.blocks[0].p()
    }

    fn predict_mean(&self, x0: &Location) -> Result<DVector<f64>> {
        let mut out = DVector::zeros(self.p());
        for (b, w) in self.blend_weights(x0).into_iter().enumerate() {
            if w > 0.0 {
                out += self.blocks[b].predict_mean(x0)? * w;
            }
        }
        Ok(out)
    }

    fn predict_cov(&self, x0: &Location) -> Result<DMatrix<f64>> {
        let p = self.p();
        let mut out = DMatrix::zeros(p, p);
        for (b, w) in self.blend_weights(x0).into_iter().enumerate() {
            if w > 0.0 {
                out += self.blocks[b].predict_cov(x0)? * w;
            }
        }
        Ok(out)
    }
}

/// Independent single-response predictors stacked into a `p`-variate one.
#[derive(Debug, Clone)]
pub struct StackedPredictor<P: Predict> {
    pub responses: Vec<P>,
}

impl<P: Predict> Predict for StackedPredictor<P> {
    fn p(&self) -> usize {
        self.responses.len()
    }

    fn predict_mean(&self, x0: &Location) -> Result<DVector<f64>> {
        let mut out = DVector::zeros(self.p());
        for (k, pred) in self.responses.iter().enumerate() {
            out[k] = pred.predict_mean(x0)?[0];
        }
        Ok(out)
    }

    fn predict_cov(&self, x0: &Location) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(self.p(), self.p());
        for (k, pred) in self.responses.iter().enumerate() {
            out[(k, k)] = pred.predict_cov(x0)?[(0, 0)];
        }
        Ok(out)
    }
}

impl Predict for Box<dyn Predict + Send + Sync> {
    fn p(&self) -> usize {
        (**self).p()
    }

    fn predict_mean(&self, x0: &Location) -> Result<DVector<f64>> {
        (**self).predict_mean(x0)
    }

    fn predict_cov(&self, x0: &Location) -> Result<DMatrix<f64>> {
        (**self).predict_cov(x0)
    }
}

/// Mean over test points and responses of the squared error against `truth`
/// (`n0 x p`, row `i` the held-out response at `locations[i]`).
pub fn mspe<P: Predict + ?Sized>(predictor: &P, locations: &[Location], truth: &DMatrix<f64>) -> Result<f64> {
    if locations.is_empty() {
        return Err(GspsError::InvalidInput("empty test set".into()));
    }
    if truth.shape() != (locations.len(), predictor.p()) {
        return Err(GspsError::DimensionMismatch(format!(
            "truth is {:?}, expected ({}, {})",
            truth.shape(),
            locations.len(),
            predictor.p()
        )));
    }
    let mut acc = 0.0;
    for (i, x0) in locations.iter().enumerate() {
        let yhat = predictor.predict_mean(x0)?;
        for k in 0..predictor.p() {
            let e = yhat[k] - truth[(i, k)];
            acc += e * e;
        }
    }
    Ok(acc / (locations.len() * predictor.p()) as f64)
}

/// [`mspe`] against the realization-averaged responses of a test dataset.
pub fn mspe_dataset<P: Predict + ?Sized>(predictor: &P, test: &crate::model::Dataset) -> Result<f64> {
    mspe(predictor, test.locations(), &test.mean_response())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{kronecker_cov, CorrelationFamily, CorrelationModel};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(n: usize, p: usize, seed: u64) -> (SeparableModel, Vec<Location>, DMatrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let locs: Vec<Location> = (0..n)
            .map(|_| Location::new(vec![rng.random::<f64>() * 4.0, rng.random::<f64>() * 4.0]).unwrap())
            .collect();
        let corr = CorrelationModel::with_default_bounds(CorrelationFamily::AnisotropicExponential, vec![0.6, 0.9]).unwrap();
        let a = DMatrix::from_fn(p, p, |_, _| rng.random::<f64>());
        let gamma = &a * a.transpose() + DMatrix::identity(p, p);
        let ybar = DMatrix::from_fn(n, p, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        (SeparableModel::new(corr, gamma).unwrap(), locs, ybar)
    }

    #[test]
    fn interpolates_training_points() {
        let (model, locs, ybar) = setup(12, 2, 1);
        let pred = Predictor::new(model, locs.clone(), ybar.clone()).unwrap();
        for (i, x) in locs.iter().enumerate() {
            let y = pred.predict_mean(x).unwrap();
            assert!((y[0] - ybar[(i, 0)]).abs() < 1e-8 && (y[1] - ybar[(i, 1)]).abs() < 1e-8);
            let (w, _) = pred.weights(x).unwrap();
            let mut e = DVector::zeros(12);
            e[i] = 1.0;
            assert!((w - e).amax() < 1e-10);
            assert!(pred.predict_cov(x).unwrap().amax() < 1e-8);
        }
    }

    #[test]
    fn reverts_to_prior_far_away() {
        let (model, locs, ybar) = setup(8, 2, 2);
        let gamma = model.gamma.clone();
        let pred = Predictor::new(model, locs, ybar).unwrap();
        let far = Location::new(vec![1e3, 1e3]).unwrap();
        assert!(pred.predict_mean(&far).unwrap().amax() < 1e-300);
        assert!((pred.predict_cov(&far).unwrap() - gamma).amax() < 1e-12);
    }

    #[test]
    fn reduced_form_matches_dense_kronecker() {
        let (model, locs, ybar) = setup(4, 2, 3);
        let pred = Predictor::new(model.clone(), locs.clone(), ybar.clone()).unwrap();
        let r = correlation_matrix(&model.correlation, &locs).unwrap();
        let c_inv = kronecker_cov(&r, &model.gamma).unwrap().try_inverse().unwrap();
        let stacked = DVector::from_column_slice(ybar.transpose().as_slice());
        let x0 = Location::new(vec![1.1, 2.3]).unwrap();
        let r0 = correlation_vector(&model.correlation, &locs, &x0).unwrap();
        let left = DMatrix::from_row_slice(1, 4, r0.as_slice()).kronecker(&model.gamma);
        let dense = left * c_inv * stacked;
        assert!((pred.predict_mean(&x0).unwrap() - dense).amax() < 1e-10);
    }

    #[test]
    fn mean_is_invariant_to_gamma() {
        let (model, locs, ybar) = setup(10, 3, 4);
        let other = SeparableModel::new(model.correlation.clone(), DMatrix::identity(3, 3) * 7.0).unwrap();
        let a = Predictor::new(model, locs.clone(), ybar.clone()).unwrap();
        let b = Predictor::new(other, locs, ybar).unwrap();
        let x0 = Location::new(vec![0.3, 3.3]).unwrap();
        assert_eq!(a.predict_mean(&x0).unwrap(), b.predict_mean(&x0).unwrap());
    }

    #[test]
    fn variance_factor_in_unit_interval() {
        let (model, locs, ybar) = setup(15, 1, 5);
        let pred = Predictor::new(model, locs, ybar).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..1000 {
            let x0 = Location::new(vec![rng.random::<f64>() * 6.0 - 1.0, rng.random::<f64>() * 6.0 - 1.0]).unwrap();
            let v = pred.variance_factor(&x0).unwrap();
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn mean_is_linear_in_ybar() {
        let (model, locs, y1) = setup(6, 2, 6);
        let y2 = y1.map(|v| v * v - 0.3);
        let x0 = Location::new(vec![2.0, 2.0]).unwrap();
        let p = |y: &DMatrix<f64>| Predictor::new(model.clone(), locs.clone(), y.clone()).unwrap().predict_mean(&x0).unwrap();
        let combo = p(&(&y1 * 2.0 + &y2 * -0.5));
        assert!((combo - (p(&y1) * 2.0 + p(&y2) * -0.5)).amax() < 1e-12);
    }

    #[test]
    fn mspe_definitions() {
        let (model, locs, ybar) = setup(6, 2, 7);
        let pred = Predictor::new(model, locs.clone(), ybar.clone()).unwrap();
        assert!(mspe(&pred, &locs, &ybar).unwrap() < 1e-16);
        let far: Vec<Location> = (0..3).map(|i| Location::new(vec![500.0 + i as f64, 500.0]).unwrap()).collect();
        let truth = DMatrix::from_row_slice(3, 2, &[1.0, -1.0, 2.0, 0.0, 0.5, 0.5]);
        let want = truth.norm_squared() / 6.0;
        assert!((mspe(&pred, &far, &truth).unwrap() - want).abs() < 1e-12);
        assert!(mspe(&pred, &[], &DMatrix::zeros(0, 2)).is_err());
    }

    #[test]
    fn blocked_prediction_uses_nearest_block() {
        let (model, locs, ybar) = setup(10, 2, 9);
        let part = crate::gsps::partition_random(10, 2, 1).unwrap();
        let bp = BlockedPredictor::new(&model, &locs, &ybar, &part, BlockRule::Nearest).unwrap();
        for (i, x) in locs.iter().enumerate() {
            let y = bp.predict_mean(x).unwrap();
            assert!((y[0] - ybar[(i, 0)]).abs() < 1e-8);
        }
        let idw = BlockedPredictor::new(&model, &locs, &ybar, &part, BlockRule::InverseDistance).unwrap();
        let y = idw.predict_mean(&locs[3]).unwrap();
        assert!((y[1] - ybar[(3, 1)]).abs() < 1e-8);
    }
}
