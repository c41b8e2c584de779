//! Dense convex quadratic programs with linear constraints.
//!
//! Problems have the form
//!
//! ```text
//! minimize    ½ zᵀQz + cᵀz
//! subject to  A_eq z  = b_eq
//!             A_in z ≤ b_in
//!             lb ≤ z ≤ ub        (infinite bounds allowed)
//! ```
//!
//! with `Q` symmetric positive semidefinite (possibly zero, so linear
//! programs are covered). [`solve_qp`] runs a Mehrotra predictor-corrector
//! interior point method on a Ruiz-equilibrated copy of the problem, then
//! polishes the result by solving the equality-constrained problem on the
//! detected active set. Every reported optimum is re-checked with
//! [`kkt_residuals`] on the original data before it is returned.
//!
//! ```
//! use nalgebra::{DMatrix, DVector};
//! use qadp::qpsolve::{solve_qp, QpProblem, QpStatus};
//!
//! // min z² s.t. z ≥ 1
//! let p = QpProblem::new(DMatrix::from_element(1, 1, 2.0), DVector::zeros(1))
//!     .unwrap()
//!     .with_bounds(DVector::from_element(1, 1.0), DVector::from_element(1, f64::INFINITY))
//!     .unwrap();
//! let sol = solve_qp(&p, None);
//! assert_eq!(sol.status, QpStatus::Optimal);
//! assert!((sol.z[0] - 1.0).abs() < 1e-9);
//! ```

mod ipm;
mod ldl;
mod sparse;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;

pub use ipm::QpSolver;

/// Relative contract every optimal solution meets on each KKT residual.
pub const KKT_CONTRACT: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("QP did not reach optimality: {0:?}")]
    NotOptimal(QpStatus),
    #[error("malformed QP dump: {0}")]
    Dump(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    q: DMatrix<f64>,
    c: DVector<f64>,
    a_eq: DMatrix<f64>,
    b_eq: DVector<f64>,
    a_in: DMatrix<f64>,
    b_in: DVector<f64>,
    lb: DVector<f64>,
    ub: DVector<f64>,
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<(), QpError> {
    if expected == got {
        Ok(())
    } else {
        Err(QpError::Dimension {
            what,
            expected,
            got,
        })
    }
}

impl QpProblem {
    /// Unconstrained problem `min ½zᵀQz + cᵀz`. `Q` is symmetrized; if its
    /// smallest eigenvalue is below −1e-8 it is replaced by its PSD projection.
    pub fn new(q: DMatrix<f64>, c: DVector<f64>) -> Result<Self, QpError> {
        let n = c.len();
        check_len("Q rows", n, q.nrows())?;
        check_len("Q cols", n, q.ncols())?;
        if q.iter().chain(c.iter()).any(|v| !v.is_finite()) {
            return Err(QpError::NonFinite("objective"));
        }
        let mut q = linalg::symmetrize(&q);
        if q.iter().any(|&v| v != 0.0) && !linalg::is_psd_with_shift(&q, 1e-8) {
            q = linalg::project_psd(&q, 0.0);
        }
        Ok(Self {
            q,
            c,
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
            a_in: DMatrix::zeros(0, n),
            b_in: DVector::zeros(0),
            lb: DVector::from_element(n, f64::NEG_INFINITY),
            ub: DVector::from_element(n, f64::INFINITY),
        })
    }

    /// Linear program `min cᵀz`.
    pub fn linear(c: DVector<f64>) -> Result<Self, QpError> {
        let n = c.len();
        Self::new(DMatrix::zeros(n, n), c)
    }

    pub fn with_equalities(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Result<Self, QpError> {
        check_len("A_eq cols", self.dim(), a.ncols())?;
        check_len("b_eq", a.nrows(), b.len())?;
        if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(QpError::NonFinite("equalities"));
        }
        self.a_eq = a;
        self.b_eq = b;
        Ok(self)
    }

    pub fn with_inequalities(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Result<Self, QpError> {
        check_len("A_in cols", self.dim(), a.ncols())?;
        check_len("b_in", a.nrows(), b.len())?;
        if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(QpError::NonFinite("inequalities"));
        }
        self.a_in = a;
        self.b_in = b;
        Ok(self)
    }

    pub fn with_bounds(mut self, lb: DVector<f64>, ub: DVector<f64>) -> Result<Self, QpError> {
        check_len("lb", self.dim(), lb.len())?;
        check_len("ub", self.dim(), ub.len())?;
        if lb.iter().any(|&v| v.is_nan() || v == f64::INFINITY)
            || ub.iter().any(|&v| v.is_nan() || v == f64::NEG_INFINITY)
        {
            return Err(QpError::NonFinite("bounds"));
        }
        self.lb = lb;
        self.ub = ub;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.c.len()
    }
    pub fn n_eq(&self) -> usize {
        self.b_eq.len()
    }
    pub fn n_in(&self) -> usize {
        self.b_in.len()
    }
    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }
    pub fn c(&self) -> &DVector<f64> {
        &self.c
    }
    pub fn a_eq(&self) -> &DMatrix<f64> {
        &self.a_eq
    }
    pub fn b_eq(&self) -> &DVector<f64> {
        &self.b_eq
    }
    pub fn a_in(&self) -> &DMatrix<f64> {
        &self.a_in
    }
    pub fn b_in(&self) -> &DVector<f64> {
        &self.b_in
    }
    pub fn lb(&self) -> &DVector<f64> {
        &self.lb
    }
    pub fn ub(&self) -> &DVector<f64> {
        &self.ub
    }

    /// `½zᵀQz + cᵀz`
    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.q * z)) + self.c.dot(z)
    }

    /// Largest magnitude among the problem data, finite bounds included.
    pub fn data_scale(&self) -> f64 {
        let finite = |v: &f64| if v.is_finite() { v.abs() } else { 0.0 };
        [
            self.q.amax(),
            self.c.amax(),
            self.a_eq.amax(),
            self.b_eq.amax(),
            self.a_in.amax(),
            self.b_in.amax(),
            self.lb.iter().map(finite).fold(0.0, f64::max),
            self.ub.iter().map(finite).fold(0.0, f64::max),
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }

    /// Self-describing JSON dump for reproducing a solve offline.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&QpDump::from(self)).expect("QP dump serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, QpError> {
        let dump: QpDump = serde_json::from_str(s).map_err(|e| QpError::Dump(e.to_string()))?;
        dump.try_into()
    }
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

fn from_rows(rows: &[Vec<f64>], ncols: usize, what: &'static str) -> Result<DMatrix<f64>, QpError> {
    for r in rows {
        check_len(what, ncols, r.len())?;
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

/// On-disk form of a [`QpProblem`]. Infinite bounds are written as `null`.
#[derive(Debug, Serialize, Deserialize)]
struct QpDump {
    format: String,
    dim: usize,
    q: Vec<Vec<f64>>,
    c: Vec<f64>,
    a_eq: Vec<Vec<f64>>,
    b_eq: Vec<f64>,
    a_in: Vec<Vec<f64>>,
    b_in: Vec<f64>,
    lb: Vec<Option<f64>>,
    ub: Vec<Option<f64>>,
}

const DUMP_FORMAT: &str = "qadp-qp-v1: minimize 0.5 z'Qz + c'z s.t. A_eq z = b_eq, A_in z <= b_in, lb <= z <= ub (null = unbounded)";

impl From<&QpProblem> for QpDump {
    fn from(p: &QpProblem) -> Self {
        let opt = |v: &f64| v.is_finite().then_some(*v);
        Self {
            format: DUMP_FORMAT.to_string(),
            dim: p.dim(),
            q: rows(&p.q),
            c: p.c.iter().copied().collect(),
            a_eq: rows(&p.a_eq),
            b_eq: p.b_eq.iter().copied().collect(),
            a_in: rows(&p.a_in),
            b_in: p.b_in.iter().copied().collect(),
            lb: p.lb.iter().map(opt).collect(),
            ub: p.ub.iter().map(opt).collect(),
        }
    }
}

impl TryFrom<QpDump> for QpProblem {
    type Error = QpError;

    fn try_from(d: QpDump) -> Result<Self, QpError> {
        let n = d.dim;
        QpProblem::new(from_rows(&d.q, n, "Q")?, DVector::from_vec(d.c))?
            .with_equalities(from_rows(&d.a_eq, n, "A_eq")?, DVector::from_vec(d.b_eq))?
            .with_inequalities(from_rows(&d.a_in, n, "A_in")?, DVector::from_vec(d.b_in))?
            .with_bounds(
                DVector::from_iterator(n, d.lb.iter().map(|v| v.unwrap_or(f64::NEG_INFINITY))),
                DVector::from_iterator(n, d.ub.iter().map(|v| v.unwrap_or(f64::INFINITY))),
            )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    Unbounded,
    MaxIterations,
}

/// Farkas certificate of primal infeasibility: multipliers with
/// `A_eqᵀy_eq + A_inᵀy_in − y_lb + y_ub = 0`, `y_in, y_lb, y_ub ≥ 0` and
/// `b_eqᵀy_eq + b_inᵀy_in − lbᵀy_lb + ubᵀy_ub < 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct FarkasCertificate {
    pub y_eq: DVector<f64>,
    pub y_in: DVector<f64>,
    pub y_lb: DVector<f64>,
    pub y_ub: DVector<f64>,
}

impl FarkasCertificate {
    /// The value `b_eqᵀy_eq + b_inᵀy_in − lbᵀy_lb + ubᵀy_ub` (negative for a
    /// valid certificate). Infinite bounds must carry zero multipliers.
    pub fn gap(&self, p: &QpProblem) -> f64 {
        let mut gap = p.b_eq.dot(&self.y_eq) + p.b_in.dot(&self.y_in);
        for j in 0..p.dim() {
            for (bound, y, sign) in [(p.lb[j], self.y_lb[j], -1.0), (p.ub[j], self.y_ub[j], 1.0)] {
                if y != 0.0 {
                    if !bound.is_finite() {
                        return f64::INFINITY;
                    }
                    gap += sign * bound * y;
                }
            }
        }
        gap
    }

    /// Checks the certificate against `p` to a relative tolerance.
    pub fn verify(&self, p: &QpProblem, tol: f64) -> bool {
        let gap = self.gap(p);
        if !(gap < 0.0) || !gap.is_finite() {
            return false;
        }
        if self.y_in.iter().chain(self.y_lb.iter()).chain(self.y_ub.iter()).any(|&v| v < -tol * gap.abs()) {
            return false;
        }
        let combo = p.a_eq.transpose() * &self.y_eq + p.a_in.transpose() * &self.y_in - &self.y_lb + &self.y_ub;
        combo.amax() <= tol * gap.abs()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub status: QpStatus,
    pub z: DVector<f64>,
    /// Multipliers of `A_eq z = b_eq` (sign free).
    pub y_eq: DVector<f64>,
    /// Multipliers of `A_in z ≤ b_in` (nonnegative).
    pub y_in: DVector<f64>,
    /// Multipliers of `z ≥ lb`, zero where the bound is infinite.
    pub y_lb: DVector<f64>,
    /// Multipliers of `z ≤ ub`, zero where the bound is infinite.
    pub y_ub: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
    /// Whether the reported point came from the active-set polish step.
    pub polished: bool,
    pub certificate: Option<FarkasCertificate>,
}

impl QpSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == QpStatus::Optimal
    }

    pub fn into_result(self) -> Result<Self, QpError> {
        match self.status {
            QpStatus::Optimal => Ok(self),
            s => Err(QpError::NotOptimal(s)),
        }
    }
}

/// Initial guess for [`solve_qp`].
#[derive(Debug, Clone, PartialEq)]
pub struct WarmStart {
    pub z: DVector<f64>,
}

impl From<&QpSolution> for WarmStart {
    fn from(s: &QpSolution) -> Self {
        Self { z: s.z.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpSettings {
    pub eps_abs: f64,
    pub eps_rel: f64,
    /// Interior point iteration cap; `None` means `max(10·n², 100)`.
    pub max_iter: Option<usize>,
    pub ruiz_iterations: usize,
    pub polish: bool,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            eps_abs: 1e-8,
            eps_rel: 1e-6,
            max_iter: None,
            ruiz_iterations: 10,
            polish: true,
        }
    }
}

/// Infinity-norm KKT residuals of a candidate solution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals {
    /// `‖Qz + c + A_eqᵀy_eq + A_inᵀy_in − y_lb + y_ub‖∞`
    pub stationarity: f64,
    /// Largest equality or inequality or bound violation.
    pub primal: f64,
    /// Largest negative part among inequality and bound multipliers.
    pub dual: f64,
    /// Largest `|multiplier × slack|`.
    pub complementarity: f64,
    /// Magnitude the residuals are measured against: the problem data plus
    /// `‖Qz‖∞`, `‖A z‖∞` and `‖Aᵀy‖∞` at the candidate.
    pub scale: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal)
            .max(self.dual)
            .max(self.complementarity)
    }

    /// Each residual is at most `tol·(1 + scale)`.
    pub fn within(&self, tol: f64) -> bool {
        self.max() <= tol * (1.0 + self.scale)
    }
}

/// Recomputes KKT residuals from the original problem data only.
pub fn kkt_residuals(p: &QpProblem, s: &QpSolution) -> KktResiduals {
    let z = &s.z;
    let qz = &p.q * z;
    let aeq_z = &p.a_eq * z;
    let ain_z = &p.a_in * z;
    let at_y = p.a_eq.transpose() * &s.y_eq + p.a_in.transpose() * &s.y_in;
    let grad = &qz + &p.c + &at_y - &s.y_lb + &s.y_ub;
    let stationarity = grad.amax();

    let mut primal = (&aeq_z - &p.b_eq).amax();
    let mut comp = 0.0f64;
    for i in 0..p.n_in() {
        let slack = p.b_in[i] - ain_z[i];
        primal = primal.max(-slack);
        comp = comp.max((s.y_in[i] * slack).abs());
    }
    for j in 0..p.dim() {
        if p.lb[j].is_finite() {
            primal = primal.max(p.lb[j] - z[j]);
            comp = comp.max((s.y_lb[j] * (z[j] - p.lb[j])).abs());
        } else if s.y_lb[j] != 0.0 {
            comp = f64::INFINITY;
        }
        if p.ub[j].is_finite() {
            primal = primal.max(z[j] - p.ub[j]);
            comp = comp.max((s.y_ub[j] * (p.ub[j] - z[j])).abs());
        } else if s.y_ub[j] != 0.0 {
            comp = f64::INFINITY;
        }
    }
    let dual = s
        .y_in
        .iter()
        .chain(s.y_lb.iter())
        .chain(s.y_ub.iter())
        .fold(0.0f64, |m, &v| m.max(-v));
    let scale = p
        .data_scale()
        .max(qz.amax())
        .max(aeq_z.amax())
        .max(ain_z.amax())
        .max(at_y.amax());
    KktResiduals {
        stationarity,
        primal: primal.max(0.0),
        dual,
        complementarity: comp,
        scale,
    }
}

/// Solves `p` with default settings.
pub fn solve_qp(p: &QpProblem, warm_start: Option<&WarmStart>) -> QpSolution {
    QpSolver::default().solve(p, warm_start)
}
