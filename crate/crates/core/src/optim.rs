//! Box-constrained minimizers for the low-dimensional correlation-parameter
//! problems: golden-section search for one parameter and a projected BFGS
//! method with multistart for several.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::ThetaBounds;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GoldenResult {
    pub x: f64,
    pub value: f64,
    pub evaluations: usize,
}

/// Golden-section search on `[lo, hi]` until the bracket is narrower than `width`.
pub fn golden_section<F>(mut f: F, mut lo: f64, mut hi: f64, width: f64) -> GoldenResult
where
    F: FnMut(f64) -> f64,
{
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = hi - inv_phi * (hi - lo);
    let mut b = lo + inv_phi * (hi - lo);
    let mut fa = f(a);
    let mut fb = f(b);
    let mut evaluations = 2;
    while hi - lo > width {
        if fa <= fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - inv_phi * (hi - lo);
            fa = f(a);
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + inv_phi * (hi - lo);
            fb = f(b);
        }
        evaluations += 1;
    }
    let x = 0.5 * (lo + hi);
    let value = f(x);
    evaluations += 1;
    // the midpoint can lose to an interior probe when the bracket hits a wall
    let (x, value) = [(x, value), (a, fa), (b, fb)]
        .into_iter()
        .fold((x, value), |best, cand| if cand.1 < best.1 { cand } else { best });
    GoldenResult { x, value, evaluations }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QnStatus {
    Converged,
    LineSearchFailed,
    MaxIterations,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QnOptions {
    /// Stop when the projected-gradient norm is below `grad_tol (1 + |f|)`.
    pub grad_tol: f64,
    pub max_iter: usize,
}

impl Default for QnOptions {
    fn default() -> Self {
        QnOptions { grad_tol: 1e-8, max_iter: 500 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QnResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub projected_grad_norm: f64,
    pub iterations: usize,
    pub status: QnStatus,
}

fn projected_gradient(x: &[f64], g: &[f64], bounds: &ThetaBounds) -> Vec<f64> {
    x.iter()
        .zip(g)
        .enumerate()
        .map(|(k, (&xi, &gi))| xi - (xi - gi).clamp(bounds.lower[k], bounds.upper[k]))
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Projected BFGS with Armijo backtracking along the projection arc.
///
/// `fg` returns the objective and its gradient; a non-finite objective marks
/// an infeasible point and is rejected by the line search.
pub fn projected_quasi_newton<F>(mut fg: F, x0: &[f64], bounds: &ThetaBounds, opts: QnOptions) -> QnResult
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let q = x0.len();
    let mut x = x0.to_vec();
    bounds.project(&mut x);
    let (mut f, mut g) = fg(&x);
    if !f.is_finite() {
        return QnResult {
            x,
            value: f,
            projected_grad_norm: f64::INFINITY,
            iterations: 0,
            status: QnStatus::LineSearchFailed,
        };
    }
    let mut h = DMatrix::<f64>::identity(q, q);
    let mut fresh = true;

    for iter in 0..opts.max_iter {
        let pg = norm(&projected_gradient(&x, &g, bounds));
        if pg <= opts.grad_tol * (1.0 + f.abs()) {
            return QnResult { x, value: f, projected_grad_norm: pg, iterations: iter, status: QnStatus::Converged };
        }
        let active: Vec<bool> = (0..q)
            .map(|k| (x[k] <= bounds.lower[k] && g[k] > 0.0) || (x[k] >= bounds.upper[k] && g[k] < 0.0))
            .collect();
        let gv = DVector::from_column_slice(&g);
        let mut d = -(&h * &gv);
        for k in 0..q {
            if active[k] {
                d[k] = 0.0;
            }
        }
        if d.dot(&gv) >= 0.0 || !d.iter().all(|v| v.is_finite()) {
            h = DMatrix::identity(q, q);
            fresh = true;
            d = -gv.clone();
            for k in 0..q {
                if active[k] {
                    d[k] = 0.0;
                }
            }
        }
        if fresh {
            // keep the first steepest-descent step on the scale of the box
            let span = (0..q)
                .map(|k| bounds.upper[k] - bounds.lower[k])
                .fold(f64::INFINITY, f64::min);
            let dmax = d.amax();
            if dmax > 0.1 * span {
                d *= 0.1 * span / dmax;
            }
        }

        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let mut trial: Vec<f64> = x.iter().zip(d.iter()).map(|(xi, di)| xi + t * di).collect();
            bounds.project(&mut trial);
            let decrease: f64 = g.iter().zip(&trial).zip(&x).map(|((gi, ti), xi)| gi * (ti - xi)).sum();
            let (ft, gt) = fg(&trial);
            if ft.is_finite() && ft <= f + 1e-4 * decrease {
                accepted = Some((trial, ft, gt));
                break;
            }
            t *= 0.5;
        }
        let Some((x_new, f_new, g_new)) = accepted else {
            return QnResult { x, value: f, projected_grad_norm: pg, iterations: iter, status: QnStatus::LineSearchFailed };
        };

        let s = DVector::from_iterator(q, x_new.iter().zip(&x).map(|(a, b)| a - b));
        let y = DVector::from_iterator(q, g_new.iter().zip(&g).map(|(a, b)| a - b));
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() && sy > 0.0 {
            if fresh {
                h *= sy / y.dot(&y);
                fresh = false;
            }
            let rho = 1.0 / sy;
            let eye = DMatrix::<f64>::identity(q, q);
            let left = &eye - &s * y.transpose() * rho;
            let right = &eye - &y * s.transpose() * rho;
            h = &left * &h * &right + &s * s.transpose() * rho;
        }
        let stalled = s.amax() == 0.0;
        x = x_new;
        f = f_new;
        g = g_new;
        if stalled {
            let pg = norm(&projected_gradient(&x, &g, bounds));
            return QnResult { x, value: f, projected_grad_norm: pg, iterations: iter + 1, status: QnStatus::LineSearchFailed };
        }
    }
    let pg = norm(&projected_gradient(&x, &g, bounds));
    QnResult { x, value: f, projected_grad_norm: pg, iterations: opts.max_iter, status: QnStatus::MaxIterations }
}

/// Starting points: the geometric centroid of the box followed by `count`
/// draws that are uniform in log-coordinates.
pub fn multistart_points(bounds: &ThetaBounds, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centroid: Vec<f64> = bounds
        .lower
        .iter()
        .zip(&bounds.upper)
        .map(|(lo, hi)| (lo * hi).sqrt())
        .collect();
    let mut points = vec![centroid];
    for _ in 0..count {
        points.push(
            bounds
                .lower
                .iter()
                .zip(&bounds.upper)
                .map(|(lo, hi)| {
                    let u: f64 = rng.random();
                    (lo.ln() + u * (hi.ln() - lo.ln())).exp().clamp(*lo, *hi)
                })
                .collect(),
        );
    }
    points
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultistartResult {
    pub best: QnResult,
    pub best_index: usize,
    pub runs: Vec<QnResult>,
    /// True when no run reached the gradient tolerance.
    pub all_failed: bool,
}

/// Runs [`projected_quasi_newton`] from every start; lowest objective wins,
/// ties go to the smaller `|x|`, then to the earlier start.
pub fn multistart<F>(fg: F, starts: &[Vec<f64>], bounds: &ThetaBounds, opts: QnOptions) -> MultistartResult
where
    F: Fn(&[f64]) -> (f64, Vec<f64>) + Sync,
{
    let runs: Vec<QnResult> = starts
        .par_iter()
        .map(|x0| projected_quasi_newton(&fg, x0, bounds, opts))
        .collect();
    let best_index = pick_best(&runs);
    let all_failed = runs.iter().all(|r| r.status != QnStatus::Converged);
    MultistartResult { best: runs[best_index].clone(), best_index, runs, all_failed }
}

pub(crate) fn pick_best(runs: &[QnResult]) -> usize {
    let key = |r: &QnResult| (if r.value.is_finite() { r.value } else { f64::INFINITY }, norm(&r.x));
    let mut best = 0;
    for (i, r) in runs.iter().enumerate().skip(1) {
        let (fv, nv) = key(r);
        let (fb, nb) = key(&runs[best]);
        if fv < fb || (fv == fb && nv < nb) {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn golden_finds_parabola_minimum() {
        let r = golden_section(|x| (x - 1.234).powi(2), 0.0, 5.0, 1e-10);
        assert!((r.x - 1.234).abs() < 1e-9);
    }

    #[test]
    fn golden_respects_boundary() {
        let r = golden_section(|x| x, 0.5, 3.0, 1e-10);
        assert!((r.x - 0.5).abs() < 1e-9);
    }

    fn rosenbrock(x: &[f64]) -> (f64, Vec<f64>) {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
        (f, g)
    }

    #[test]
    fn bfgs_solves_interior_rosenbrock() {
        let bounds = ThetaBounds::uniform(2, 1e-3, 5.0).unwrap();
        let r = projected_quasi_newton(rosenbrock, &[0.3, 2.0], &bounds, QnOptions::default());
        assert_eq!(r.status, QnStatus::Converged);
        assert!((r.x[0] - 1.0).abs() < 1e-6 && (r.x[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn bfgs_stops_on_active_bound() {
        // unconstrained minimum at (-1, 2); the box forces x0 = 0.5
        let f = |x: &[f64]| {
            let v = (x[0] + 1.0).powi(2) + 3.0 * (x[1] - 2.0).powi(2);
            (v, vec![2.0 * (x[0] + 1.0), 6.0 * (x[1] - 2.0)])
        };
        let bounds = ThetaBounds::uniform(2, 0.5, 10.0).unwrap();
        let r = projected_quasi_newton(f, &[4.0, 7.0], &bounds, QnOptions::default());
        assert_eq!(r.status, QnStatus::Converged);
        assert_eq!(r.x[0], 0.5);
        assert!((r.x[1] - 2.0).abs() < 1e-7);
    }

    #[test]
    fn multistart_prefers_lower_objective_then_smaller_norm() {
        let mk = |v: f64, x: Vec<f64>| QnResult {
            x,
            value: v,
            projected_grad_norm: 0.0,
            iterations: 1,
            status: QnStatus::Converged,
        };
        let runs = vec![mk(1.0, vec![3.0]), mk(0.5, vec![2.0]), mk(0.5, vec![1.0]), mk(f64::NAN, vec![0.1])];
        assert_eq!(pick_best(&runs), 2);
    }

    #[test]
    fn multistart_points_lie_in_box() {
        let bounds = ThetaBounds::uniform(3, 1e-4, 1e2).unwrap();
        let pts = multistart_points(&bounds, 10, 5);
        assert_eq!(pts.len(), 11);
        assert!((pts[0][0] - 0.1).abs() < 1e-12);
        for p in &pts {
            assert!(bounds.check(p).is_ok());
        }
        assert_eq!(pts, multistart_points(&bounds, 10, 5));
    }
}
