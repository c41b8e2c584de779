//! Convex quadratic value functions `V(x) = xᵀPx + qᵀx + r` and their
//! least-squares fit under `P ⪰ 0`.
//!
//! The fit works in normalized coordinates: each state axis is divided by
//! its largest absolute sample value and the targets by their mean
//! magnitude. Off-diagonal features carry a `√2` so the parameter vector's
//! squared norm equals `‖P‖_F² + ‖q‖² + r²` in those coordinates. The fit
//! minimizes `Σ(V(x) − β)² + ridge·‖(P, q, r)‖²` with the penalty taken on
//! these dimensionless parameters, so `ridge` carries the units of `β²`.
//!
//! When the unconstrained least-squares solution already has `P ⪰ 0` it is
//! the answer. Otherwise an accelerated projected gradient runs to
//! stationarity, and the active face `P = U M Uᵀ` is then re-solved in
//! closed form, which recovers full precision where the gradient method
//! has only crept up to it.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::StorageState;

pub use crate::linalg::{min_eigenvalue, project_psd};

/// Lowest eigenvalue tolerated in a stored `P`.
pub const PSD_TOLERANCE: f64 = 1e-8;

const MAX_ITER: usize = 10_000;
const REL_DECREASE: f64 = 1e-10;
const STEP_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum FitError {
    #[error("no samples to fit")]
    Empty,
    #[error("sample {index} has dimension {got}, expected {expected}")]
    Dimension {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("sample {0} is not finite")]
    NonFinite(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "QuadraticData", try_from = "QuadraticData")]
pub struct QuadraticValueFunction {
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    pub r: f64,
}

#[derive(Serialize, Deserialize)]
struct QuadraticData {
    p: Vec<Vec<f64>>,
    q: Vec<f64>,
    r: f64,
}

impl From<QuadraticValueFunction> for QuadraticData {
    fn from(v: QuadraticValueFunction) -> Self {
        let n = v.q.len();
        Self {
            p: (0..n).map(|i| v.p.row(i).iter().copied().collect()).collect(),
            q: v.q.as_slice().to_vec(),
            r: v.r,
        }
    }
}

impl TryFrom<QuadraticData> for QuadraticValueFunction {
    type Error = String;

    fn try_from(d: QuadraticData) -> Result<Self, String> {
        let n = d.q.len();
        if d.p.len() != n || d.p.iter().any(|row| row.len() != n) {
            return Err(format!("P must be {n}x{n}"));
        }
        Ok(Self {
            p: DMatrix::from_fn(n, n, |i, j| d.p[i][j]),
            q: DVector::from_vec(d.q),
            r: d.r,
        })
    }
}

impl QuadraticValueFunction {
    pub fn zero(n: usize) -> Self {
        Self {
            p: DMatrix::zeros(n, n),
            q: DVector::zeros(n),
            r: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }

    pub fn is_zero(&self) -> bool {
        self.r == 0.0 && self.q.iter().all(|&v| v == 0.0) && self.p.iter().all(|&v| v == 0.0)
    }

    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        (x.transpose() * &self.p * x)[(0, 0)] + self.q.dot(x) + self.r
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub x: StorageState,
    pub beta: f64,
}

/// How a fit was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMethod {
    /// The unconstrained minimizer already had `P ⪰ 0`.
    LeastSquares,
    ProjectedGradient,
    /// Projected gradient followed by a closed-form solve on its face.
    FacePolish,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// `Σ(V(x) − β)²` in original units.
    pub residual: f64,
    /// Residual plus ridge term.
    pub objective: f64,
    pub iterations: usize,
    pub method: FitMethod,
}

/// `xᵀPx + qᵀx + r`.
pub fn evaluate(v: &QuadraticValueFunction, x: &StorageState) -> f64 {
    assert_eq!(x.x.len(), v.dim(), "state dimension does not match value function");
    v.eval(&x.x)
}

/// Ridge used when none is configured: `1e-8·(mean β)²`.
pub fn default_ridge(samples: &[SamplePair]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let mean = samples.iter().map(|s| s.beta).sum::<f64>() / samples.len() as f64;
    1e-8 * mean * mean
}

pub fn fit_quadratic(
    samples: &[SamplePair],
    ridge: f64,
) -> Result<QuadraticValueFunction, FitError> {
    fit_quadratic_with_report(samples, ridge).map(|(v, _)| v)
}

/// Number of free parameters of an `n`-dimensional quadratic.
pub fn n_parameters(n: usize) -> usize {
    (n + 1) * (n + 2) / 2
}

pub fn fit_quadratic_with_report(
    samples: &[SamplePair],
    ridge: f64,
) -> Result<(QuadraticValueFunction, FitReport), FitError> {
    let first = samples.first().ok_or(FitError::Empty)?;
    let n = first.x.x.len();
    for (index, s) in samples.iter().enumerate() {
        if s.x.x.len() != n {
            return Err(FitError::Dimension {
                index,
                expected: n,
                got: s.x.x.len(),
            });
        }
        if !s.beta.is_finite() || s.x.x.iter().any(|v| !v.is_finite()) {
            return Err(FitError::NonFinite(index));
        }
    }

    let axis = DVector::from_fn(n, |i, _| {
        let m = samples.iter().fold(0.0f64, |m, s| m.max(s.x.x[i].abs()));
        if m > 0.0 {
            m
        } else {
            1.0
        }
    });
    let mean_abs = samples.iter().map(|s| s.beta.abs()).sum::<f64>() / samples.len() as f64;
    let beta_scale = if mean_abs > 0.0 { mean_abs } else { 1.0 };
    let lambda = ridge.max(0.0) / (beta_scale * beta_scale);

    let ys: Vec<DVector<f64>> = samples.iter().map(|s| s.x.x.component_div(&axis)).collect();
    let b = DVector::from_iterator(samples.len(), samples.iter().map(|s| s.beta / beta_scale));
    let basis = DMatrix::identity(n, n);
    let phi = design(&ys, &basis);

    let (theta, iterations, method) = solve_normalized(&phi, &b, lambda, n, &ys);
    let (p, q, r) = unpack(&theta, n, &basis);

    // back to original coordinates
    let inv = axis.map(|a| 1.0 / a);
    let p = DMatrix::from_fn(n, n, |i, j| p[(i, j)] * inv[i] * inv[j] * beta_scale);
    let fitted = QuadraticValueFunction {
        p: crate::linalg::symmetrize(&p),
        q: q.component_mul(&inv) * beta_scale,
        r: r * beta_scale,
    };
    let residual: f64 = samples
        .iter()
        .map(|s| (fitted.eval(&s.x.x) - s.beta).powi(2))
        .sum();
    let report = FitReport {
        residual,
        objective: residual + ridge.max(0.0) * theta.norm_squared(),
        iterations,
        method,
    };
    Ok((fitted, report))
}

/// Feature rows for `P = U M Uᵀ` with `M` symmetric in the columns of
/// `basis`: `z_i²`, `√2 z_i z_j`, then `y`, then `1`, where `z = Uᵀy`.
fn design(ys: &[DVector<f64>], basis: &DMatrix<f64>) -> DMatrix<f64> {
    let n = basis.nrows();
    let k = basis.ncols();
    let d = k * (k + 1) / 2 + n + 1;
    let mut phi = DMatrix::zeros(ys.len(), d);
    for (row, y) in ys.iter().enumerate() {
        let z = basis.transpose() * y;
        let mut col = 0;
        for i in 0..k {
            phi[(row, col)] = z[i] * z[i];
            col += 1;
            for j in i + 1..k {
                phi[(row, col)] = std::f64::consts::SQRT_2 * z[i] * z[j];
                col += 1;
            }
        }
        for i in 0..n {
            phi[(row, col + i)] = y[i];
        }
        phi[(row, d - 1)] = 1.0;
    }
    phi
}

fn unpack_m(theta: &DVector<f64>, k: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(k, k);
    let mut col = 0;
    for i in 0..k {
        m[(i, i)] = theta[col];
        col += 1;
        for j in i + 1..k {
            let v = theta[col] / std::f64::consts::SQRT_2;
            m[(i, j)] = v;
            m[(j, i)] = v;
            col += 1;
        }
    }
    m
}

fn pack_m(m: &DMatrix<f64>, theta: &mut DVector<f64>) {
    let k = m.nrows();
    let mut col = 0;
    for i in 0..k {
        theta[col] = m[(i, i)];
        col += 1;
        for j in i + 1..k {
            theta[col] = std::f64::consts::SQRT_2 * 0.5 * (m[(i, j)] + m[(j, i)]);
            col += 1;
        }
    }
}

fn unpack(theta: &DVector<f64>, n: usize, basis: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>, f64) {
    let k = basis.ncols();
    let m = unpack_m(theta, k);
    let off = k * (k + 1) / 2;
    let p = basis * m * basis.transpose();
    let q = theta.rows(off, n).into_owned();
    (p, q, theta[off + n])
}

fn objective(phi: &DMatrix<f64>, b: &DVector<f64>, lambda: f64, theta: &DVector<f64>) -> f64 {
    (phi * theta - b).norm_squared() + lambda * theta.norm_squared()
}

/// Minimum-norm minimizer of `‖Φθ − b‖² + λ‖θ‖²` through the SVD.
fn ridge_least_squares(phi: &DMatrix<f64>, b: &DVector<f64>, lambda: f64) -> DVector<f64> {
    let d = phi.ncols();
    if phi.nrows() == 0 || d == 0 {
        return DVector::zeros(d);
    }
    let svd = phi.clone().svd(true, true);
    let u = svd.u.as_ref().expect("requested U");
    let vt = svd.v_t.as_ref().expect("requested Vᵀ");
    let smax = svd.singular_values.max();
    let cutoff = smax * 1e-12 * (phi.nrows().max(d) as f64);
    let utb = u.transpose() * b;
    let mut coef = DVector::zeros(svd.singular_values.len());
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > cutoff {
            coef[i] = s / (s * s + lambda) * utb[i];
        }
    }
    vt.transpose() * coef
}

fn solve_normalized(
    phi: &DMatrix<f64>,
    b: &DVector<f64>,
    lambda: f64,
    n: usize,
    ys: &[DVector<f64>],
) -> (DVector<f64>, usize, FitMethod) {
    let np = n * (n + 1) / 2;
    let mut theta = ridge_least_squares(phi, b, lambda);
    let p = unpack_m(&theta, n);
    if min_eigenvalue(&p) >= -1e-12 * p.amax().max(1.0) {
        let clipped = project_psd(&p, 0.0);
        pack_m(&clipped, &mut theta);
        return (theta, 0, FitMethod::LeastSquares);
    }

    // accelerated projected gradient on the full parameter vector
    let gram = phi.transpose() * phi;
    let rhs = phi.transpose() * b;
    let lmax = SymmetricEigen::new(gram.clone()).eigenvalues.max().max(0.0);
    let step = 1.0 / (2.0 * lmax + 2.0 * lambda).max(f64::MIN_POSITIVE);
    let project = |t: &mut DVector<f64>| {
        let m = unpack_m(t, n);
        pack_m(&project_psd(&m, 0.0), t);
    };
    project(&mut theta);
    let mut best = objective(phi, b, lambda, &theta);
    let mut prev = theta.clone();
    let mut yk = theta.clone();
    let mut tk = 1.0f64;
    let mut iterations = 0;
    let mut quiet = 0;
    while iterations < MAX_ITER {
        iterations += 1;
        let grad = (&gram * &yk - &rhs) * 2.0 + &yk * (2.0 * lambda);
        let mut next = &yk - grad * step;
        project(&mut next);
        let f = objective(phi, b, lambda, &next);
        if f > best {
            // restart the momentum from the last accepted point
            yk = prev.clone();
            tk = 1.0;
            continue;
        }
        let decrease = (best - f) / best.abs().max(f64::MIN_POSITIVE);
        let moved = (&next - &prev).norm() / (1.0 + next.norm());
        let tnext = 0.5 * (1.0 + (1.0 + 4.0 * tk * tk).sqrt());
        yk = &next + (&next - &prev) * ((tk - 1.0) / tnext);
        tk = tnext;
        prev = next;
        best = f;
        if decrease < REL_DECREASE && moved < STEP_TOLERANCE {
            quiet += 1;
            if quiet >= 3 {
                break;
            }
        } else {
            quiet = 0;
        }
    }
    theta = prev;
    let pg_value = best;

    // closed-form solve on the face spanned by the positive eigenvectors
    let m = unpack_m(&theta, n);
    let eig = SymmetricEigen::new(m);
    let top = eig.eigenvalues.amax();
    let keep: Vec<usize> = (0..n)
        .filter(|&i| eig.eigenvalues[i] > 1e-9 * top.max(f64::MIN_POSITIVE))
        .collect();
    let basis = DMatrix::from_fn(n, keep.len(), |i, j| eig.eigenvectors[(i, keep[j])]);
    let face_phi = design(ys, &basis);
    let face = ridge_least_squares(&face_phi, b, lambda);
    let k = keep.len();
    let mf = unpack_m(&face, k);
    if min_eigenvalue(&mf) >= 0.0 {
        let face_value = objective(&face_phi, b, lambda, &face);
        if face_value <= pg_value {
            let (p, q, r) = unpack(&face, n, &basis);
            let mut full = DVector::zeros(np + n + 1);
            pack_m(&p, &mut full);
            full.rows_mut(np, n).copy_from(&q);
            full[np + n] = r;
            return (full, iterations, FitMethod::FacePolish);
        }
    }
    (theta, iterations, FitMethod::ProjectedGradient)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pair(x: &[f64], beta: f64) -> SamplePair {
        SamplePair {
            x: StorageState::new(DVector::from_column_slice(x)),
            beta,
        }
    }

    fn samples_from(v: &QuadraticValueFunction, xs: &[DVector<f64>]) -> Vec<SamplePair> {
        xs.iter()
            .map(|x| SamplePair {
                x: StorageState::new(x.clone()),
                beta: v.eval(x),
            })
            .collect()
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize, count: usize) -> Vec<DVector<f64>> {
        (0..count)
            .map(|_| DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0)))
            .collect()
    }

    fn max_param_error(a: &QuadraticValueFunction, b: &QuadraticValueFunction) -> f64 {
        (&a.p - &b.p)
            .amax()
            .max((&a.q - &b.q).amax())
            .max((a.r - b.r).abs())
    }

    /// Exact objective of the fit problem with the ridge in normalized
    /// coordinates, for comparing candidate fits.
    fn residual(v: &QuadraticValueFunction, samples: &[SamplePair]) -> f64 {
        samples.iter().map(|s| (v.eval(&s.x.x) - s.beta).powi(2)).sum()
    }

    #[test]
    fn recovers_identity_from_generic_points() {
        let truth = QuadraticValueFunction {
            p: DMatrix::identity(3, 3),
            q: DVector::zeros(3),
            r: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xs = random_points(&mut rng, 3, n_parameters(3));
        let (fit, report) = fit_quadratic_with_report(&samples_from(&truth, &xs), 0.0).unwrap();
        assert!(max_param_error(&fit, &truth) <= 1e-4);
        assert_eq!(report.method, FitMethod::LeastSquares);
        for x in &xs {
            assert!((fit.eval(x) - truth.eval(x)).abs() <= 1e-4);
        }
    }

    #[test]
    fn single_sample_is_interpolated() {
        let s = vec![pair(&[2.0, 3.0], 7.0)];
        let fit = fit_quadratic(&s, 0.0).unwrap();
        assert!((fit.eval(&s[0].x.x) - 7.0).abs() < 1e-9);
        assert!(min_eigenvalue(&fit.p) >= -PSD_TOLERANCE);
    }

    #[test]
    fn indefinite_targets_are_fit_within_the_cone() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let xs: Vec<DVector<f64>> = (0..40)
            .map(|_| DVector::from_fn(2, |_, _| rng.random_range(0.0..1.0)))
            .collect();
        let samples: Vec<SamplePair> = xs
            .iter()
            .map(|x| SamplePair {
                x: StorageState::new(x.clone()),
                beta: x[0] * x[0] - x[1] * x[1],
            })
            .collect();
        let (fit, report) = fit_quadratic_with_report(&samples, 0.0).unwrap();
        assert!(min_eigenvalue(&fit.p) >= -PSD_TOLERANCE);
        assert_ne!(report.method, FitMethod::LeastSquares);

        // unconstrained fit followed by spectral projection of P
        let ys: Vec<DVector<f64>> = xs.clone();
        let phi = design(&ys, &DMatrix::identity(2, 2));
        let b = DVector::from_iterator(40, samples.iter().map(|s| s.beta));
        let theta = ridge_least_squares(&phi, &b, 0.0);
        let (p, q, r) = unpack(&theta, 2, &DMatrix::identity(2, 2));
        let projected = QuadraticValueFunction {
            p: project_psd(&p, 0.0),
            q,
            r,
        };
        assert!(residual(&fit, &samples) <= residual(&projected, &samples) + 1e-12);
    }

    #[test]
    fn constrained_optimum_matches_a_fine_search() {
        // β = x² on a single axis with a negative curvature target shifted
        // so the optimum sits on the boundary P = 0: the best line fit
        let samples: Vec<SamplePair> =
            (0..11).map(|i| {
                let x = i as f64 / 10.0;
                pair(&[x], 1.0 - x * x)
            }).collect();
        let fit = fit_quadratic(&samples, 0.0).unwrap();
        assert!(fit.p[(0, 0)].abs() < 1e-9);
        // least squares line through the same points
        let xs: Vec<f64> = (0..11).map(|i| i as f64 / 10.0).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 1.0 - x * x).collect();
        let mx = xs.iter().sum::<f64>() / 11.0;
        let my = ys.iter().sum::<f64>() / 11.0;
        let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
            / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
        assert!((fit.q[0] - slope).abs() < 1e-7);
        assert!((fit.r - (my - slope * mx)).abs() < 1e-7);
    }

    #[test]
    fn empty_and_ragged_inputs_are_rejected() {
        assert!(matches!(fit_quadratic(&[], 0.0), Err(FitError::Empty)));
        let s = vec![pair(&[1.0], 1.0), pair(&[1.0, 2.0], 1.0)];
        assert!(matches!(fit_quadratic(&s, 0.0), Err(FitError::Dimension { index: 1, .. })));
    }

    #[test]
    fn evaluate_examples() {
        let mut v = QuadraticValueFunction::zero(2);
        v.r = 3.5;
        assert_eq!(evaluate(&v, &StorageState::new(DVector::from_column_slice(&[9.0, -4.0]))), 3.5);
        let v = QuadraticValueFunction {
            p: DMatrix::identity(2, 2),
            q: DVector::zeros(2),
            r: 0.0,
        };
        assert_eq!(evaluate(&v, &StorageState::new(DVector::from_column_slice(&[1.0, 2.0]))), 5.0);
    }

    #[test]
    fn serde_round_trip() {
        let v = QuadraticValueFunction {
            p: DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]),
            q: DVector::from_column_slice(&[-1.0, 0.25]),
            r: 3.0,
        };
        let text = serde_json::to_string(&v).unwrap();
        assert_eq!(serde_json::from_str::<QuadraticValueFunction>(&text).unwrap(), v);
    }

    #[test]
    fn projection_is_nearest_among_sampled_psd_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = DMatrix::from_fn(4, 4, |_, _| rng.random_range(-1.0..1.0));
        let p = crate::linalg::symmetrize(&a);
        let proj = project_psd(&p, 0.0);
        let dist = (&proj - &p).norm();
        for _ in 0..100 {
            let g = DMatrix::from_fn(4, 4, |_, _| rng.random_range(-1.0..1.0));
            let s = g.transpose() * g;
            assert!(dist <= (s - &p).norm() + 1e-12);
        }
    }

    /// Smallest root of the characteristic polynomial, found by scanning
    /// from the Gershgorin lower bound and bisecting the first sign change.
    fn charpoly_min_root(a: &DMatrix<f64>) -> f64 {
        let n = a.nrows();
        // Faddeev-LeVerrier: det(λI − A) = Σ c_k λ^k
        let mut c = vec![0.0; n + 1];
        c[n] = 1.0;
        let mut m = DMatrix::<f64>::zeros(n, n);
        for k in 1..=n {
            m = a * &m + DMatrix::identity(n, n) * c[n - k + 1];
            c[n - k] = -(a * &m).trace() / k as f64;
        }
        let poly = |x: f64| c.iter().rev().fold(0.0, |acc, &ck| acc * x + ck);
        let lo = (0..n)
            .map(|i| a[(i, i)] - (0..n).filter(|&j| j != i).map(|j| a[(i, j)].abs()).sum::<f64>())
            .fold(f64::INFINITY, f64::min)
            - 1e-6;
        let hi = (0..n)
            .map(|i| a[(i, i)] + (0..n).filter(|&j| j != i).map(|j| a[(i, j)].abs()).sum::<f64>())
            .fold(f64::NEG_INFINITY, f64::max)
            + 1e-6;
        let steps = 200_000;
        let h = (hi - lo) / steps as f64;
        let mut x0 = lo;
        let mut f0 = poly(x0);
        for i in 1..=steps {
            let x1 = lo + h * i as f64;
            let f1 = poly(x1);
            if f0 == 0.0 {
                return x0;
            }
            if f0.signum() != f1.signum() {
                let (mut a0, mut b0) = (x0, x1);
                for _ in 0..200 {
                    let mid = 0.5 * (a0 + b0);
                    if poly(mid).signum() == poly(a0).signum() {
                        a0 = mid;
                    } else {
                        b0 = mid;
                    }
                }
                return 0.5 * (a0 + b0);
            }
            x0 = x1;
            f0 = f1;
        }
        panic!("no root found");
    }

    #[test]
    fn min_eigenvalue_matches_characteristic_polynomial() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let g = DMatrix::from_fn(4, 4, |_, _| rng.random_range(-1.0..1.0));
            let a = crate::linalg::symmetrize(&g);
            assert!((min_eigenvalue(&a) - charpoly_min_root(&a)).abs() < 1e-10);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn fitted_function_is_convex(
            seed in 0u64..1000,
            t in 0.0f64..=1.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let xs = random_points(&mut rng, 3, 25);
            let samples: Vec<SamplePair> = xs
                .iter()
                .map(|x| SamplePair {
                    x: StorageState::new(x.clone()),
                    beta: rng.random_range(0.0..10.0) + x[0] * x[1] - x[2] * x[2],
                })
                .collect();
            let fit = fit_quadratic(&samples, 0.0).unwrap();
            prop_assert!(min_eigenvalue(&fit.p) >= -PSD_TOLERANCE);
            let a = &xs[0];
            let b = &xs[1];
            let mid = a * t + b * (1.0 - t);
            prop_assert!(fit.eval(&mid) <= t * fit.eval(a) + (1.0 - t) * fit.eval(b) + 1e-9);
        }

        #[test]
        fn never_worse_than_the_zero_function(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let xs = random_points(&mut rng, 2, 12);
            let samples: Vec<SamplePair> = xs
                .iter()
                .map(|x| SamplePair {
                    x: StorageState::new(x.clone()),
                    beta: rng.random_range(0.0..5.0),
                })
                .collect();
            let (_, report) = fit_quadratic_with_report(&samples, 0.0).unwrap();
            let zero: f64 = samples.iter().map(|s| s.beta * s.beta).sum();
            prop_assert!(report.residual <= zero * (1.0 + 1e-12));
        }

        #[test]
        fn duplicating_every_sample_leaves_the_fit(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let xs = random_points(&mut rng, 2, 15);
            let samples: Vec<SamplePair> = xs
                .iter()
                .map(|x| SamplePair {
                    x: StorageState::new(x.clone()),
                    beta: rng.random_range(0.0..5.0) + x[0] * x[0],
                })
                .collect();
            let doubled: Vec<SamplePair> = samples.iter().chain(samples.iter()).cloned().collect();
            let (a, ra) = fit_quadratic_with_report(&samples, 0.0).unwrap();
            let (b, rb) = fit_quadratic_with_report(&doubled, 0.0).unwrap();
            prop_assert!((rb.objective - 2.0 * ra.objective).abs() <= 1e-6 * rb.objective);
            prop_assert!((residual(&b, &samples) - ra.residual).abs() <= 1e-6 * ra.residual);
            for x in &xs {
                prop_assert!((a.eval(x) - b.eval(x)).abs() <= 1e-6 * (1.0 + a.eval(x).abs()));
            }
        }

        #[test]
        fn projection_is_idempotent(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = crate::linalg::symmetrize(&DMatrix::from_fn(4, 4, |_, _| rng.random_range(-1.0..1.0)));
            let once = project_psd(&a, 0.0);
            let twice = project_psd(&once, 0.0);
            prop_assert!((&once - &twice).amax() < 1e-12);
            prop_assert!(min_eigenvalue(&once) >= -1e-12);
        }
    }
}
