//! Domain types for separable multivariate random fields: locations,
//! datasets, the spatial correlation family and its parameter derivatives,
//! distance weights and the Kronecker covariance `R (x) Gamma`.
//!
//! Responses are stacked location-major, `y = [y(x_1)^T, ..., y(x_n)^T]^T`,
//! so that `cov(y) = R (x) Gamma` with `Gamma` the trailing factor.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{GspsError, Result};
use crate::linalg;

/// A point in `R^d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Location {
    coords: Vec<f64>,
}

impl Location {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.is_empty() {
            return Err(GspsError::InvalidInput("location needs d >= 1 coordinates".into()));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(GspsError::NonFinite("location coordinate".into()));
        }
        Ok(Location { coords })
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn distance(&self, other: &Location) -> f64 {
        self.sq_distance(other).sqrt()
    }

    pub fn sq_distance(&self, other: &Location) -> f64 {
        self.coords
            .iter()
            .zip(&other.coords)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }
}

impl From<Location> for Vec<f64> {
    fn from(loc: Location) -> Self {
        loc.coords
    }
}

/// Checks a location list: nonempty, consistent dimension, pairwise distinct.
pub fn validate_locations(locations: &[Location], min_count: usize) -> Result<usize> {
    if locations.len() < min_count {
        return Err(GspsError::TooFewLocations(locations.len()));
    }
    let d = locations.first().map(Location::dim).unwrap_or(0);
    if let Some(bad) = locations.iter().position(|l| l.dim() != d) {
        return Err(GspsError::DimensionMismatch(format!(
            "location {bad} has dimension {} but expected {d}",
            locations[bad].dim()
        )));
    }
    for i in 0..locations.len() {
        for j in (i + 1)..locations.len() {
            if locations[i].coords == locations[j].coords {
                return Err(GspsError::DuplicateLocation(i, j));
            }
        }
    }
    Ok(d)
}

/// `N` realizations of a `p`-variate response observed at `n` shared locations.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    locations: Vec<Location>,
    realizations: Vec<DMatrix<f64>>,
}

impl Dataset {
    pub fn new(locations: Vec<Location>, realizations: Vec<DMatrix<f64>>) -> Result<Self> {
        validate_locations(&locations, 2)?;
        let n = locations.len();
        let first = realizations
            .first()
            .ok_or_else(|| GspsError::InvalidInput("dataset has no realizations".into()))?;
        let p = first.ncols();
        if p == 0 {
            return Err(GspsError::InvalidInput("responses need p >= 1 columns".into()));
        }
        for (r, y) in realizations.iter().enumerate() {
            if y.shape() != (n, p) {
                return Err(GspsError::DimensionMismatch(format!(
                    "realization {r} has shape {:?}, expected ({n}, {p})",
                    y.shape()
                )));
            }
            if !linalg::all_finite(y) {
                return Err(GspsError::NonFinite(format!("realization {r}")));
            }
        }
        Ok(Dataset { locations, realizations })
    }

    pub fn locations(&self) -> &[Location] {
        &self.locations
    }

    /// Each realization is an `n x p` matrix; row `i` is `y(x_i)`.
    pub fn realizations(&self) -> &[DMatrix<f64>] {
        &self.realizations
    }

    pub fn n(&self) -> usize {
        self.locations.len()
    }

    pub fn p(&self) -> usize {
        self.realizations[0].ncols()
    }

    pub fn dim(&self) -> usize {
        self.locations[0].dim()
    }

    pub fn num_realizations(&self) -> usize {
        self.realizations.len()
    }

    /// `(1/N) sum_r Y_r`.
    pub fn mean_response(&self) -> DMatrix<f64> {
        let mut acc = DMatrix::zeros(self.n(), self.p());
        for y in &self.realizations {
            acc += y;
        }
        acc / self.num_realizations() as f64
    }

    /// Restriction to a subset of locations, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.n()) {
            return Err(GspsError::InvalidInput(format!("location index {bad} out of range")));
        }
        let locations = indices.iter().map(|&i| self.locations[i].clone()).collect();
        let realizations = self
            .realizations
            .iter()
            .map(|y| y.select_rows(indices.iter()))
            .collect();
        Dataset::new(locations, realizations)
    }

    /// Single-response dataset holding column `k`.
    pub fn response(&self, k: usize) -> Result<Dataset> {
        if k >= self.p() {
            return Err(GspsError::InvalidInput(format!("response {k} out of range")));
        }
        let realizations = self
            .realizations
            .iter()
            .map(|y| y.columns(k, 1).into_owned())
            .collect();
        Dataset::new(self.locations.clone(), realizations)
    }
}

/// Parametric spatial correlation families of the form
/// `rho(x, x'; theta) = exp(-sum_k theta_k s_k(x - x'))`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorrelationFamily {
    /// `exp(-(x-x')^T diag(theta) (x-x'))`, one parameter per axis.
    AnisotropicExponential,
    /// `exp(-theta |x-x'|^2)`: the anisotropic family with a shared parameter.
    IsotropicExponential,
}

impl CorrelationFamily {
    pub fn num_params(self, d: usize) -> usize {
        match self {
            CorrelationFamily::AnisotropicExponential => d,
            CorrelationFamily::IsotropicExponential => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CorrelationFamily::AnisotropicExponential => "anisotropic-exponential",
            CorrelationFamily::IsotropicExponential => "isotropic-exponential",
        }
    }

    /// Writes the per-parameter features `s_k(a - b)` into `out`.
    pub fn features(self, a: &[f64], b: &[f64], out: &mut [f64]) {
        match self {
            CorrelationFamily::AnisotropicExponential => {
                for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
                    *o = (x - y) * (x - y);
                }
            }
            CorrelationFamily::IsotropicExponential => {
                out[0] = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
            }
        }
    }
}

impl std::str::FromStr for CorrelationFamily {
    type Err = GspsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "anisotropic-exponential" | "anisotropic" | "aniso-exp" => {
                Ok(CorrelationFamily::AnisotropicExponential)
            }
            "isotropic-exponential" | "isotropic" | "iso-exp" => {
                Ok(CorrelationFamily::IsotropicExponential)
            }
            other => Err(GspsError::Parse(format!("unknown correlation family `{other}`"))),
        }
    }
}

/// Closed box `Theta = prod_k [lower_k, upper_k]` in the positive orthant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaBounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl ThetaBounds {
    pub const DEFAULT_LOWER: f64 = 1e-4;
    pub const DEFAULT_UPPER: f64 = 1e2;

    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(GspsError::DimensionMismatch("theta bound lengths differ".into()));
        }
        for (k, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if !(lo.is_finite() && hi.is_finite() && *lo > 0.0 && lo <= hi) {
                return Err(GspsError::InvalidInput(format!(
                    "theta bound {k} = [{lo}, {hi}] must satisfy 0 < lower <= upper < inf"
                )));
            }
        }
        Ok(ThetaBounds { lower, upper })
    }

    pub fn uniform(q: usize, lower: f64, upper: f64) -> Result<Self> {
        ThetaBounds::new(vec![lower; q], vec![upper; q])
    }

    pub fn default_for(q: usize) -> Self {
        ThetaBounds {
            lower: vec![Self::DEFAULT_LOWER; q],
            upper: vec![Self::DEFAULT_UPPER; q],
        }
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    pub fn check(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.len() {
            return Err(GspsError::DimensionMismatch(format!(
                "theta has {} entries, bounds have {}",
                theta.len(),
                self.len()
            )));
        }
        for (k, &t) in theta.iter().enumerate() {
            if !(t >= self.lower[k] && t <= self.upper[k]) {
                return Err(GspsError::ThetaOutOfBounds {
                    index: k,
                    value: t,
                    lower: self.lower[k],
                    upper: self.upper[k],
                });
            }
        }
        Ok(())
    }

    pub fn project(&self, theta: &mut [f64]) {
        for (k, t) in theta.iter_mut().enumerate() {
            *t = t.clamp(self.lower[k], self.upper[k]);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationModel {
    pub family: CorrelationFamily,
    pub theta: Vec<f64>,
    pub bounds: ThetaBounds,
}

impl CorrelationModel {
    pub fn new(family: CorrelationFamily, theta: Vec<f64>, bounds: ThetaBounds) -> Result<Self> {
        bounds.check(&theta)?;
        Ok(CorrelationModel { family, theta, bounds })
    }

    /// Model with the default box `[1e-4, 1e2]^q`.
    pub fn with_default_bounds(family: CorrelationFamily, theta: Vec<f64>) -> Result<Self> {
        let bounds = ThetaBounds::default_for(theta.len());
        Self::new(family, theta, bounds)
    }

    pub fn q(&self) -> usize {
        self.theta.len()
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        let q = self.family.num_params(d);
        if q != self.q() {
            return Err(GspsError::DimensionMismatch(format!(
                "{} in d = {d} needs {q} parameters, got {}",
                self.family.name(),
                self.q()
            )));
        }
        Ok(())
    }

    pub fn correlation(&self, a: &Location, b: &Location) -> f64 {
        let mut s = vec![0.0; self.q()];
        self.family.features(a.coords(), b.coords(), &mut s);
        correlation_from_features(&self.theta, &s)
    }
}

pub(crate) fn correlation_from_features(theta: &[f64], s: &[f64]) -> f64 {
    let arg: f64 = theta.iter().zip(s).map(|(t, f)| t * f).sum();
    (-arg).exp()
}

/// Fitted separable cross-covariance `c(x, x') = rho(x, x') Gamma`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparableModel {
    pub correlation: CorrelationModel,
    pub gamma: DMatrix<f64>,
}

impl SeparableModel {
    pub fn new(correlation: CorrelationModel, gamma: DMatrix<f64>) -> Result<Self> {
        check_gamma(&gamma)?;
        Ok(SeparableModel { correlation, gamma })
    }

    pub fn p(&self) -> usize {
        self.gamma.nrows()
    }
}

pub(crate) fn check_gamma(gamma: &DMatrix<f64>) -> Result<()> {
    if !gamma.is_square() || gamma.nrows() == 0 {
        return Err(GspsError::DimensionMismatch("gamma must be square and nonempty".into()));
    }
    if !linalg::all_finite(gamma) {
        return Err(GspsError::NonFinite("gamma".into()));
    }
    let scale = gamma.amax().max(f64::MIN_POSITIVE);
    if linalg::max_asymmetry(gamma) > 1e-12 * scale {
        return Err(GspsError::InvalidInput("gamma is not symmetric".into()));
    }
    let min = linalg::sym_eigen(gamma).eigenvalues.min();
    if min <= 0.0 {
        return Err(GspsError::NotPositiveDefinite(format!(
            "gamma has minimum eigenvalue {min:e}"
        )));
    }
    Ok(())
}

/// Pairwise distance weights with the nearest-neighbour distance on the diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    pub g: DMatrix<f64>,
}

impl WeightMatrix {
    /// `G (x) 1_p 1_p^T`: every entry of block `(i, j)` carries `G_ij`.
    pub fn penalty_weights(&self, p: usize) -> DMatrix<f64> {
        self.g.kronecker(&DMatrix::from_element(p, p, 1.0))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.g.norm()
    }
}

pub fn distance_matrix(locations: &[Location]) -> Result<WeightMatrix> {
    validate_locations(locations, 2)?;
    let n = locations.len();
    let mut g = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let dist = locations[i].distance(&locations[j]);
            g[(i, j)] = dist;
            g[(j, i)] = dist;
        }
    }
    for i in 0..n {
        let nearest = (0..n)
            .filter(|&j| j != i)
            .map(|j| g[(i, j)])
            .fold(f64::INFINITY, f64::min);
        g[(i, i)] = nearest;
    }
    Ok(WeightMatrix { g })
}

fn pairwise<F>(model: &CorrelationModel, locations: &[Location], mut entry: F) -> Result<DMatrix<f64>>
where
    F: FnMut(f64, &[f64]) -> f64,
{
    model.bounds.check(&model.theta)?;
    let d = validate_locations(locations, 1)?;
    model.check_dim(d)?;
    let n = locations.len();
    let mut out = DMatrix::zeros(n, n);
    let mut s = vec![0.0; model.q()];
    for i in 0..n {
        for j in i..n {
            model
                .family
                .features(locations[i].coords(), locations[j].coords(), &mut s);
            let r = correlation_from_features(&model.theta, &s);
            let v = entry(r, &s);
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    Ok(out)
}

/// `R(theta)_ij = rho(x_i, x_j; theta)`.
pub fn correlation_matrix(model: &CorrelationModel, locations: &[Location]) -> Result<DMatrix<f64>> {
    pairwise(model, locations, |r, _| r)
}

/// `R'_k(theta)`, entrywise `d r_ij / d theta_k = -s_k r_ij` (0-based `k`).
pub fn correlation_grad(
    model: &CorrelationModel,
    locations: &[Location],
    k: usize,
) -> Result<DMatrix<f64>> {
    if k >= model.q() {
        return Err(GspsError::IndexOutOfRange { index: k, q: model.q() });
    }
    pairwise(model, locations, |r, s| -s[k] * r)
}

/// `R''_kl(theta)`, entrywise `s_k s_l r_ij` (0-based `k`, `l`).
pub fn correlation_hess(
    model: &CorrelationModel,
    locations: &[Location],
    k: usize,
    l: usize,
) -> Result<DMatrix<f64>> {
    for idx in [k, l] {
        if idx >= model.q() {
            return Err(GspsError::IndexOutOfRange { index: idx, q: model.q() });
        }
    }
    pairwise(model, locations, |r, s| s[k] * s[l] * r)
}

/// Correlations between `x0` and each location.
pub fn correlation_vector(
    model: &CorrelationModel,
    locations: &[Location],
    x0: &Location,
) -> Result<nalgebra::DVector<f64>> {
    if let Some(first) = locations.first() {
        if first.dim() != x0.dim() {
            return Err(GspsError::DimensionMismatch(format!(
                "query has dimension {}, training locations {}",
                x0.dim(),
                first.dim()
            )));
        }
        model.check_dim(first.dim())?;
    }
    Ok(nalgebra::DVector::from_iterator(
        locations.len(),
        locations.iter().map(|x| model.correlation(x, x0)),
    ))
}

/// `R (x) Gamma`: block `(i, j)` equals `R_ij Gamma`.
pub fn kronecker_cov(r: &DMatrix<f64>, gamma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !r.is_square() || !gamma.is_square() {
        return Err(GspsError::DimensionMismatch(format!(
            "kronecker factors must be square, got {:?} and {:?}",
            r.shape(),
            gamma.shape()
        )));
    }
    Ok(r.kronecker(gamma))
}
