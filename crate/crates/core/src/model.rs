//! Reservoir system instance: dimensions, affine storage dynamics, linear
//! stage cost and the polyhedral feasible set of each stage.
//!
//! Controls are laid out as `u = (r, s, t, d)`: `n` releases, `n` spills,
//! thermal generation and the deficit slack, so `u` has `2n + 2` entries.
//! The deficit slack is not a control of the physical system; it prices
//! unserved energy so every stage problem stays feasible.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{what}[{index}] must be positive, got {value}")]
    NonPositive {
        what: &'static str,
        index: usize,
        value: f64,
    },
    #[error("coupling column {column} sums to {sum}; routing columns must sum to 0 or -1")]
    Routing { column: usize, sum: f64 },
    #[error("coupling diagonal entry {index} is {value}, expected -1")]
    Diagonal { index: usize, value: f64 },
    #[error("costs must satisfy deficit_cost > thermal_cost > 0 (got {thermal} and {deficit})")]
    Costs { thermal: f64, deficit: f64 },
    #[error("{0}")]
    Invalid(String),
    #[error("storage {index} leaves [0, {capacity}] with value {value}")]
    OutOfBounds {
        index: usize,
        value: f64,
        capacity: f64,
    },
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parsing system description: {0}")]
    Parse(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SystemDims {
    pub n_reservoirs: usize,
    pub n_controls: usize,
    pub n_inflows: usize,
    pub horizon: usize,
    pub n_hydro_states: usize,
}

/// On-disk description of a system. All volumes in hm³, energies in MWh,
/// rates per week.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    /// Routing matrix B, row-major.
    pub coupling: Vec<Vec<f64>>,
    pub capacity: Vec<f64>,
    pub release_max: Vec<f64>,
    /// Defaults to `capacity + max_inflow`.
    #[serde(default)]
    pub spill_max: Option<Vec<f64>>,
    /// Largest weekly inflow expected at each reservoir; only used for the
    /// spill default and the overflow warning.
    #[serde(default)]
    pub max_inflow: Option<Vec<f64>>,
    pub conversion: Vec<f64>,
    /// One entry per stage; its length is the horizon K.
    pub demand: Vec<f64>,
    pub thermal_cost: f64,
    pub thermal_max: f64,
    pub deficit_cost: f64,
    /// Reservoir index receiving each measured inflow series.
    pub inflow_map: Vec<usize>,
    #[serde(default = "one")]
    pub n_hydro_states: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReservoirSystem {
    pub dims: SystemDims,
    pub coupling: DMatrix<f64>,
    pub capacity: DVector<f64>,
    pub release_max: DVector<f64>,
    pub spill_max: DVector<f64>,
    pub conversion: DVector<f64>,
    pub demand: DVector<f64>,
    pub thermal_cost: f64,
    pub thermal_max: f64,
    pub deficit_cost: f64,
    pub inflow_map: Vec<usize>,
    max_inflow: Option<DVector<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StorageState {
    pub x: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Control {
    pub r: DVector<f64>,
    pub s: DVector<f64>,
    pub t: f64,
    pub d: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InflowVector {
    pub w: DVector<f64>,
}

impl StorageState {
    pub fn new(x: DVector<f64>) -> Self {
        Self { x }
    }
}

impl InflowVector {
    pub fn new(w: DVector<f64>) -> Self {
        Self { w }
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            w: DVector::zeros(n),
        }
    }
}

impl Control {
    pub fn zeros(n: usize) -> Self {
        Self {
            r: DVector::zeros(n),
            s: DVector::zeros(n),
            t: 0.0,
            d: 0.0,
        }
    }

    /// Packs into `(r, s, t, d)`.
    pub fn to_vector(&self) -> DVector<f64> {
        let n = self.r.len();
        let mut u = DVector::zeros(2 * n + 2);
        u.rows_mut(0, n).copy_from(&self.r);
        u.rows_mut(n, n).copy_from(&self.s);
        u[2 * n] = self.t;
        u[2 * n + 1] = self.d;
        u
    }

    pub fn from_vector(u: &DVector<f64>, n: usize) -> Self {
        Self {
            r: u.rows(0, n).into_owned(),
            s: u.rows(n, n).into_owned(),
            t: u[2 * n],
            d: u[2 * n + 1],
        }
    }
}

/// Linear constraints over the packed control `u`:
/// `a_in·u ≤ b_in`, `a_eq·u = b_eq`, `lb ≤ u ≤ ub`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSet {
    pub a_in: DMatrix<f64>,
    pub b_in: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub lb: DVector<f64>,
    pub ub: DVector<f64>,
}

impl ConstraintSet {
    /// Largest violation of any constraint at `u`.
    pub fn violation(&self, u: &DVector<f64>) -> f64 {
        let ineq = (&self.a_in * u - &self.b_in).iter().fold(0.0f64, |m, &v| m.max(v));
        let eq = (&self.a_eq * u - &self.b_eq).amax();
        let bounds = u
            .iter()
            .zip(self.lb.iter().zip(self.ub.iter()))
            .fold(0.0f64, |m, (&v, (&l, &h))| m.max(l - v).max(v - h));
        ineq.max(eq).max(bounds)
    }

    pub fn contains(&self, u: &DVector<f64>, tol: f64) -> bool {
        self.violation(u) <= tol
    }
}

impl ReservoirSystem {
    pub fn from_config(cfg: &SystemConfig) -> Result<Self, ModelError> {
        let n = cfg.capacity.len();
        if n == 0 {
            return Err(ModelError::Invalid("system needs at least one reservoir".into()));
        }
        check_len("coupling rows", n, cfg.coupling.len())?;
        for row in &cfg.coupling {
            check_len("coupling columns", n, row.len())?;
        }
        check_len("release_max", n, cfg.release_max.len())?;
        check_len("conversion", n, cfg.conversion.len())?;
        if let Some(s) = &cfg.spill_max {
            check_len("spill_max", n, s.len())?;
        }
        if let Some(m) = &cfg.max_inflow {
            check_len("max_inflow", n, m.len())?;
        }
        let horizon = cfg.demand.len();
        if horizon == 0 {
            return Err(ModelError::Invalid("demand must cover at least one stage".into()));
        }
        let p = cfg.inflow_map.len();
        if p == 0 || p > n {
            return Err(ModelError::Invalid(format!(
                "inflow_map must list between 1 and {n} reservoirs, got {p}"
            )));
        }
        if let Some(&bad) = cfg.inflow_map.iter().find(|&&i| i >= n) {
            return Err(ModelError::Invalid(format!("inflow_map entry {bad} out of range")));
        }
        if cfg.n_hydro_states == 0 {
            return Err(ModelError::Invalid("n_hydro_states must be at least 1".into()));
        }

        let coupling = DMatrix::from_fn(n, n, |i, j| cfg.coupling[i][j]);
        for j in 0..n {
            if coupling[(j, j)] != -1.0 {
                return Err(ModelError::Diagonal {
                    index: j,
                    value: coupling[(j, j)],
                });
            }
            let sum: f64 = coupling.column(j).sum();
            if sum.abs() > 1e-12 && (sum + 1.0).abs() > 1e-12 {
                return Err(ModelError::Routing { column: j, sum });
            }
        }

        positive("capacity", &cfg.capacity)?;
        positive("release_max", &cfg.release_max)?;
        positive("conversion", &cfg.conversion)?;
        let max_inflow = cfg.max_inflow.as_ref().map(|m| DVector::from_column_slice(m));
        let spill_max = match (&cfg.spill_max, &max_inflow) {
            (Some(s), _) => DVector::from_column_slice(s),
            (None, Some(m)) => DVector::from_column_slice(&cfg.capacity) + m,
            (None, None) => DVector::from_column_slice(&cfg.capacity),
        };
        positive("spill_max", spill_max.as_slice())?;
        if !(cfg.thermal_cost > 0.0 && cfg.deficit_cost > cfg.thermal_cost) {
            return Err(ModelError::Costs {
                thermal: cfg.thermal_cost,
                deficit: cfg.deficit_cost,
            });
        }
        if !(cfg.thermal_max >= 0.0) {
            return Err(ModelError::Invalid("thermal_max must be nonnegative".into()));
        }
        if let Some((k, d)) = cfg.demand.iter().enumerate().find(|(_, d)| !(**d >= 0.0)) {
            return Err(ModelError::Invalid(format!("demand[{k}] = {d} is negative")));
        }

        let sys = Self {
            dims: SystemDims {
                n_reservoirs: n,
                n_controls: 2 * n + 1,
                n_inflows: p,
                horizon,
                n_hydro_states: cfg.n_hydro_states,
            },
            coupling,
            capacity: DVector::from_column_slice(&cfg.capacity),
            release_max: DVector::from_column_slice(&cfg.release_max),
            spill_max,
            conversion: DVector::from_column_slice(&cfg.conversion),
            demand: DVector::from_column_slice(&cfg.demand),
            thermal_cost: cfg.thermal_cost,
            thermal_max: cfg.thermal_max,
            deficit_cost: cfg.deficit_cost,
            inflow_map: cfg.inflow_map.clone(),
            max_inflow,
        };
        if let Some(m) = &sys.max_inflow {
            for i in 0..n {
                if sys.spill_max[i] < sys.capacity[i] + m[i] {
                    log::warn!(
                        "reservoir {i}: spill_max {} is below capacity + max inflow {}; \
                         some stage problems may be infeasible",
                        sys.spill_max[i],
                        sys.capacity[i] + m[i]
                    );
                }
            }
        }
        Ok(sys)
    }

    pub fn from_json(s: &str) -> Result<Self, ModelError> {
        Self::from_config(&serde_json::from_str(s)?)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn to_config(&self) -> SystemConfig {
        let n = self.n();
        SystemConfig {
            coupling: (0..n)
                .map(|i| self.coupling.row(i).iter().copied().collect())
                .collect(),
            capacity: self.capacity.as_slice().to_vec(),
            release_max: self.release_max.as_slice().to_vec(),
            spill_max: Some(self.spill_max.as_slice().to_vec()),
            max_inflow: self.max_inflow.as_ref().map(|m| m.as_slice().to_vec()),
            conversion: self.conversion.as_slice().to_vec(),
            demand: self.demand.as_slice().to_vec(),
            thermal_cost: self.thermal_cost,
            thermal_max: self.thermal_max,
            deficit_cost: self.deficit_cost,
            inflow_map: self.inflow_map.clone(),
            n_hydro_states: self.dims.n_hydro_states,
        }
    }

    /// Same system with a different number of hydrologic states.
    pub fn with_hydro_states(mut self, e: usize) -> Self {
        self.dims.n_hydro_states = e.max(1);
        self
    }

    pub fn n(&self) -> usize {
        self.dims.n_reservoirs
    }

    pub fn horizon(&self) -> usize {
        self.dims.horizon
    }

    /// Length of the packed control vector, including the deficit slack.
    pub fn control_len(&self) -> usize {
        2 * self.n() + 2
    }

    /// `G` such that the storage change is `G·u`: `[B, B, 0, 0]`.
    pub fn control_to_storage(&self) -> DMatrix<f64> {
        let n = self.n();
        let mut g = DMatrix::zeros(n, self.control_len());
        g.view_mut((0, 0), (n, n)).copy_from(&self.coupling);
        g.view_mut((0, n), (n, n)).copy_from(&self.coupling);
        g
    }

    /// Cost row over the packed control.
    pub fn cost_vector(&self) -> DVector<f64> {
        let mut c = DVector::zeros(self.control_len());
        c[2 * self.n()] = self.thermal_cost;
        c[2 * self.n() + 1] = self.deficit_cost;
        c
    }

    /// Spreads the measured series onto reservoirs; unmeasured reservoirs
    /// get zero and several series mapped to one reservoir add up.
    pub fn map_inflows(&self, site_values: &[f64]) -> InflowVector {
        let mut w = DVector::zeros(self.n());
        for (&v, &i) in site_values.iter().zip(&self.inflow_map) {
            w[i] += v;
        }
        InflowVector { w }
    }
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<(), ModelError> {
    if expected == got {
        Ok(())
    } else {
        Err(ModelError::Dimension {
            what,
            expected,
            got,
        })
    }
}

fn positive(what: &'static str, v: &[f64]) -> Result<(), ModelError> {
    match v.iter().enumerate().find(|(_, x)| !(**x > 0.0)) {
        Some((index, &value)) => Err(ModelError::NonPositive { what, index, value }),
        None => Ok(()),
    }
}

pub fn build_system(cfg: &SystemConfig) -> Result<ReservoirSystem, ModelError> {
    ReservoirSystem::from_config(cfg)
}

/// `x' = x + B(r + s) + w`. Values within `1e-9·capacity` outside the box
/// are clipped onto it; anything further out is an error.
pub fn dynamics(
    sys: &ReservoirSystem,
    x: &StorageState,
    u: &Control,
    w: &InflowVector,
) -> Result<StorageState, ModelError> {
    let mut next = &x.x + &sys.coupling * (&u.r + &u.s) + &w.w;
    for i in 0..sys.n() {
        let cap = sys.capacity[i];
        let tol = 1e-9 * cap;
        let v = next[i];
        if !(v >= -tol && v <= cap + tol) {
            return Err(ModelError::OutOfBounds {
                index: i,
                value: v,
                capacity: cap,
            });
        }
        next[i] = v.clamp(0.0, cap);
    }
    Ok(StorageState { x: next })
}

/// Constraints on `u = (r, s, t, d)` at stage `k`: control boxes, storage
/// staying in `[0, capacity]` and `η·r + t + d = demand[k]`.
pub fn feasible_set(
    sys: &ReservoirSystem,
    k: usize,
    x: &StorageState,
    w: &InflowVector,
) -> ConstraintSet {
    let n = sys.n();
    let m = sys.control_len();
    let g = sys.control_to_storage();
    let a = &x.x + &w.w;

    let mut a_in = DMatrix::zeros(2 * n, m);
    a_in.view_mut((0, 0), (n, m)).copy_from(&g);
    a_in.view_mut((n, 0), (n, m)).copy_from(&(-&g));
    let mut b_in = DVector::zeros(2 * n);
    b_in.rows_mut(0, n).copy_from(&(&sys.capacity - &a));
    b_in.rows_mut(n, n).copy_from(&a);

    let mut a_eq = DMatrix::zeros(1, m);
    for i in 0..n {
        a_eq[(0, i)] = sys.conversion[i];
    }
    a_eq[(0, 2 * n)] = 1.0;
    a_eq[(0, 2 * n + 1)] = 1.0;
    let b_eq = DVector::from_element(1, sys.demand[k]);

    let lb = DVector::zeros(m);
    let mut ub = DVector::from_element(m, f64::INFINITY);
    ub.rows_mut(0, n).copy_from(&sys.release_max);
    ub.rows_mut(n, n).copy_from(&sys.spill_max);
    ub[2 * n] = sys.thermal_max;

    ConstraintSet {
        a_in,
        b_in,
        a_eq,
        b_eq,
        lb,
        ub,
    }
}

/// `thermal_cost·t + deficit_cost·d`.
pub fn stage_cost(sys: &ReservoirSystem, _k: usize, u: &Control) -> f64 {
    sys.thermal_cost * u.t + sys.deficit_cost * u.d
}
