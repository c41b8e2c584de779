//! Quadratic approximate dynamic programming.
//!
//! The backward pass walks stages from the horizon down. At each stage it
//! samples, for every hydrologic state and grid point, the one-stage
//! Bellman problem under `M` inflow draws, averages the optimal values and
//! fits a convex quadratic to the averages. The forward policy then solves
//! the same one-stage problem with the fitted functions.
//!
//! With `x' = x + w + G·u` affine in the control, a quadratic value
//! function `x'ᵀP̄x' + q̄ᵀx' + r̄` of the next state is a quadratic in `u`:
//!
//! ```text
//! ½uᵀ(2GᵀP̄G)u + (cost + Gᵀ(2P̄a + q̄))ᵀu + (aᵀP̄a + q̄ᵀa + r̄),  a = x + w
//! ```
//!
//! where `P̄, q̄, r̄` are the transition-weighted averages over next states.

use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::hydrology::{HydroError, InflowSampler, WEEKS_PER_YEAR};
use crate::model::{feasible_set, Control, InflowVector, ModelError, ReservoirSystem, StorageState};
use crate::qpsolve::{solve_qp, QpError, QpProblem, QpSolution, QpStatus};
use crate::rng::{stream, tag, StreamRng};
use crate::vfit::{
    default_ridge, fit_quadratic_with_report, min_eigenvalue, FitError, FitMethod,
    QuadraticValueFunction, SamplePair, PSD_TOLERANCE,
};

#[derive(Debug, Error)]
pub enum AdpError {
    #[error("stage {k}: {source}")]
    Qp { k: usize, source: QpError },
    #[error("stage {k}: one-stage problem ended with status {status:?}")]
    Status { k: usize, status: QpStatus },
    #[error("stage {k}, state {e}: fit failed: {source}")]
    Fit { k: usize, e: usize, source: FitError },
    #[error("stage {k}, state {e}: {source}")]
    Sampling { k: usize, e: usize, source: HydroError },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{0}")]
    Config(String),
}

/// Parameters of the backward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    /// Grid points per reservoir axis.
    pub grid_steps: Vec<usize>,
    /// Inflow draws averaged at each grid point.
    pub noise_draws: usize,
    /// Fit regularization; `None` uses `1e-8·(mean β)²`.
    #[serde(default)]
    pub ridge: Option<f64>,
    pub seed: u64,
    /// Value after the last stage; zero when absent.
    #[serde(default)]
    pub terminal: Option<QuadraticValueFunction>,
}

impl TrainingConfig {
    pub fn validate(&self, sys: &ReservoirSystem) -> Result<(), AdpError> {
        if self.grid_steps.len() != sys.n() {
            return Err(AdpError::Config(format!(
                "grid_steps has {} entries for {} reservoirs",
                self.grid_steps.len(),
                sys.n()
            )));
        }
        if self.grid_steps.contains(&0) || self.noise_draws == 0 {
            return Err(AdpError::Config("grid counts and noise draws must be at least 1".into()));
        }
        if let Some(t) = &self.terminal {
            if t.dim() != sys.n() {
                return Err(AdpError::Config("terminal function has the wrong dimension".into()));
            }
            if min_eigenvalue(&t.p) < -PSD_TOLERANCE {
                return Err(AdpError::Config("terminal function is not convex".into()));
            }
        }
        Ok(())
    }

    pub fn grid_size(&self) -> usize {
        self.grid_steps.iter().product()
    }
}

/// Fit outcome for one (stage, state).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub k: usize,
    pub e: usize,
    pub objective: f64,
    pub residual: f64,
    pub iterations: usize,
    pub method: FitMethod,
    pub min_eigenvalue: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub config: TrainingConfig,
    /// SHA-256 of the training config, system and transition matrix.
    pub config_hash: String,
    /// Hash of the hydrologic model the sampler came from, if known.
    #[serde(default)]
    pub model_hash: Option<String>,
    pub qp_count: usize,
    pub fits: Vec<FitSummary>,
}

pub const POLICY_FORMAT: &str = "qadp-policy/1";

/// The `K × E` table of fitted value functions and what produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedPolicy {
    pub format: String,
    pub n_reservoirs: usize,
    pub horizon: usize,
    pub n_states: usize,
    #[serde(with = "crate::linalg::rows")]
    pub transition: DMatrix<f64>,
    /// `values[k][e]` approximates the cost-to-go from stage `k`.
    pub values: Vec<Vec<QuadraticValueFunction>>,
    pub terminal: QuadraticValueFunction,
    pub metadata: Option<TrainingMetadata>,
}

impl TrainedPolicy {
    /// All value functions zero: the greedy policy is then myopic.
    pub fn zero(sys: &ReservoirSystem, transition: &DMatrix<f64>) -> Self {
        let n = sys.n();
        Self {
            format: POLICY_FORMAT.into(),
            n_reservoirs: n,
            horizon: sys.horizon(),
            n_states: transition.nrows(),
            transition: transition.clone(),
            values: vec![vec![QuadraticValueFunction::zero(n); transition.nrows()]; sys.horizon()],
            terminal: QuadraticValueFunction::zero(n),
            metadata: None,
        }
    }

    /// Value functions for the state after stage `k`, one per next state.
    pub fn next_values(&self, k: usize) -> Vec<&QuadraticValueFunction> {
        if k + 1 < self.horizon {
            self.values[k + 1].iter().collect()
        } else {
            vec![&self.terminal; self.n_states]
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("policy serializes");
        s.push('\n');
        s
    }

    pub fn from_json(s: &str) -> Result<Self, AdpError> {
        let p: Self = serde_json::from_str(s).map_err(|e| AdpError::Config(e.to_string()))?;
        if p.format != POLICY_FORMAT {
            return Err(AdpError::Config(format!("unsupported policy format {:?}", p.format)));
        }
        if p.values.len() != p.horizon || p.values.iter().any(|row| row.len() != p.n_states) {
            return Err(AdpError::Config("policy table is incomplete".into()));
        }
        let all = p.values.iter().flatten().chain(std::iter::once(&p.terminal));
        for v in all {
            if v.dim() != p.n_reservoirs {
                return Err(AdpError::Config("value function dimension mismatch".into()));
            }
            if min_eigenvalue(&v.p) < -PSD_TOLERANCE * v.p.amax().max(1.0) {
                return Err(AdpError::Config("stored value function is not convex".into()));
            }
        }
        Ok(p)
    }

    pub fn check_system(&self, sys: &ReservoirSystem) -> Result<(), AdpError> {
        if self.n_reservoirs != sys.n() || self.horizon != sys.horizon() {
            return Err(AdpError::Config(format!(
                "policy is for {} reservoirs over {} stages, system has {} over {}",
                self.n_reservoirs,
                self.horizon,
                sys.n(),
                sys.horizon()
            )));
        }
        Ok(())
    }
}

/// Spill price, as a fraction of the thermal cost per hm³, added to the
/// one-stage QPs only. Without it a zero or flat value function leaves the
/// solver indifferent between storing and spilling, and the interior point
/// method settles halfway, wasting water.
pub const SPILL_TIE_BREAK: f64 = 1e-3;

/// A one-stage problem: the QP over the packed control plus the constant
/// part of its objective.
#[derive(Debug, Clone)]
pub struct StageProblem {
    pub qp: QpProblem,
    pub constant: f64,
    /// Tie-breaking price on each spill, excluded from `value`.
    pub spill_price: f64,
    n: usize,
}

impl StageProblem {
    /// Stage cost plus expected next-stage value at `z`.
    pub fn value(&self, z: &DVector<f64>) -> f64 {
        let spill: f64 = z.rows(self.n, self.n).sum();
        self.qp.objective(z) + self.constant - self.spill_price * spill
    }
}

/// Stage cost plus the transition-weighted next-stage values, as a QP in
/// `u = (r, s, t, d)` over the stage's feasible set.
pub fn one_stage_problem(
    sys: &ReservoirSystem,
    vnext: &[&QuadraticValueFunction],
    trans_row: &[f64],
    k: usize,
    x: &StorageState,
    w: &InflowVector,
) -> Result<StageProblem, AdpError> {
    if vnext.len() != trans_row.len() {
        return Err(AdpError::Config("one value function per transition entry".into()));
    }
    let n = sys.n();
    let mut pbar = DMatrix::zeros(n, n);
    let mut qbar = DVector::zeros(n);
    let mut rbar = 0.0;
    for (v, &p) in vnext.iter().zip(trans_row) {
        if p != 0.0 {
            pbar += &v.p * p;
            qbar += &v.q * p;
            rbar += v.r * p;
        }
    }
    let set = feasible_set(sys, k, x, w);
    let g = sys.control_to_storage();
    let a = &x.x + &w.w;
    let pg = &pbar * &g;
    let q = g.transpose() * &pg * 2.0;
    let spill_price = SPILL_TIE_BREAK * sys.thermal_cost;
    let mut c = sys.cost_vector() + g.transpose() * (&pbar * &a * 2.0 + &qbar);
    c.rows_mut(n, n).add_scalar_mut(spill_price);
    let constant = (a.transpose() * &pbar * &a)[(0, 0)] + qbar.dot(&a) + rbar;
    let qp = QpProblem::new(q, c)
        .and_then(|p| p.with_inequalities(set.a_in, set.b_in))
        .and_then(|p| p.with_equalities(set.a_eq, set.b_eq))
        .and_then(|p| p.with_bounds(set.lb, set.ub))
        .map_err(|source| AdpError::Qp { k, source })?;
    Ok(StageProblem {
        qp,
        constant,
        spill_price,
        n,
    })
}

fn solve_stage(problem: &StageProblem, k: usize) -> Result<QpSolution, AdpError> {
    let sol = solve_qp(&problem.qp, None);
    if sol.status != QpStatus::Optimal {
        return Err(AdpError::Status { k, status: sol.status });
    }
    Ok(sol)
}

/// Optimal value of the one-stage problem for a known inflow.
pub fn sample_bellman(
    sys: &ReservoirSystem,
    vnext: &[&QuadraticValueFunction],
    trans_row: &[f64],
    k: usize,
    x: &StorageState,
    w: &InflowVector,
) -> Result<f64, AdpError> {
    let problem = one_stage_problem(sys, vnext, trans_row, k, x, w)?;
    let sol = solve_stage(&problem, k)?;
    Ok(problem.value(&sol.z))
}

/// Mean of `m` Bellman samples with inflows drawn for (week of `k`, `e`).
/// Draw `i` uses the generator returned by `draw_rng(i)`.
#[allow(clippy::too_many_arguments)]
pub fn average_samples(
    sys: &ReservoirSystem,
    vnext: &[&QuadraticValueFunction],
    trans_row: &[f64],
    sampler: &dyn InflowSampler,
    k: usize,
    e: usize,
    x: &StorageState,
    m: usize,
    draw_rng: impl Fn(usize) -> StreamRng,
) -> Result<SamplePair, AdpError> {
    let mut total = 0.0;
    for i in 0..m {
        let mut rng = draw_rng(i);
        let w = sampler
            .sample(k % WEEKS_PER_YEAR, e, &mut rng)
            .map_err(|source| AdpError::Sampling { k, e, source })?;
        total += sample_bellman(sys, vnext, trans_row, k, x, &w)?;
    }
    Ok(SamplePair {
        x: x.clone(),
        beta: total / m as f64,
    })
}

/// `N_i` evenly spaced levels per axis including 0 and capacity (the
/// midpoint when `N_i = 1`); axis 0 varies slowest.
pub fn grid_points(sys: &ReservoirSystem, steps: &[usize]) -> Vec<StorageState> {
    let levels: Vec<Vec<f64>> = steps
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let cap = sys.capacity[i];
            if s == 1 {
                vec![0.5 * cap]
            } else {
                (0..s).map(|j| cap * j as f64 / (s - 1) as f64).collect()
            }
        })
        .collect();
    let total: usize = steps.iter().product();
    (0..total)
        .map(|mut idx| {
            let mut x = DVector::zeros(steps.len());
            for i in (0..steps.len()).rev() {
                x[i] = levels[i][idx % steps[i]];
                idx /= steps[i];
            }
            StorageState::new(x)
        })
        .collect()
}

/// Hex SHA-256 of length-prefixed parts.
pub fn hash_hex(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash identifying a training run's inputs.
pub fn config_hash(sys: &ReservoirSystem, transition: &DMatrix<f64>, cfg: &TrainingConfig) -> String {
    let sys_json = serde_json::to_vec(&sys.to_config()).expect("system serializes");
    let rows: Vec<Vec<f64>> = transition.row_iter().map(|r| r.iter().copied().collect()).collect();
    let trans_json = serde_json::to_vec(&rows).expect("matrix serializes");
    let cfg_json = serde_json::to_vec(cfg).expect("config serializes");
    hash_hex(&[&sys_json, &trans_json, &cfg_json])
}

/// Runs `f` on a pool with `workers` threads, or the global pool.
pub fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> T {
    match workers {
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w.max(1))
            .build()
            .expect("thread pool")
            .install(f),
        None => f(),
    }
}

/// Backward sampling-and-fitting pass. Every inflow draw has its own
/// generator keyed by (stage, state, grid point, draw), so the result does
/// not depend on the number of workers.
pub fn backward_pass(
    sys: &ReservoirSystem,
    transition: &DMatrix<f64>,
    sampler: &dyn InflowSampler,
    cfg: &TrainingConfig,
    workers: Option<usize>,
) -> Result<TrainedPolicy, AdpError> {
    cfg.validate(sys)?;
    let e_count = transition.nrows();
    crate::hydrology::markov::check_stochastic(transition, 1e-9)
        .map_err(|source| AdpError::Sampling { k: 0, e: 0, source })?;
    let horizon = sys.horizon();
    let grid = grid_points(sys, &cfg.grid_steps);
    let terminal = cfg
        .terminal
        .clone()
        .unwrap_or_else(|| QuadraticValueFunction::zero(sys.n()));
    let mut values: Vec<Vec<QuadraticValueFunction>> = vec![Vec::new(); horizon];
    let mut fits = Vec::new();
    let qp_count = AtomicUsize::new(0);
    let rows: Vec<Vec<f64>> = transition.row_iter().map(|r| r.iter().copied().collect()).collect();

    with_workers(workers, || -> Result<(), AdpError> {
        for k in (0..horizon).rev() {
            let vnext: Vec<&QuadraticValueFunction> = if k + 1 < horizon {
                values[k + 1].iter().collect()
            } else {
                vec![&terminal; e_count]
            };
            let jobs: Vec<(usize, usize)> = (0..e_count)
                .flat_map(|e| (0..grid.len()).map(move |g| (e, g)))
                .collect();
            let pairs: Vec<SamplePair> = jobs
                .par_iter()
                .map(|&(e, g)| {
                    let pair = average_samples(
                        sys,
                        &vnext,
                        &rows[e],
                        sampler,
                        k,
                        e,
                        &grid[g],
                        cfg.noise_draws,
                        |i| stream(cfg.seed, &[tag::TRAIN, k as u64, e as u64, g as u64, i as u64]),
                    )?;
                    qp_count.fetch_add(cfg.noise_draws, Ordering::Relaxed);
                    Ok(pair)
                })
                .collect::<Result<_, AdpError>>()?;
            let fitted: Vec<(QuadraticValueFunction, FitSummary)> = (0..e_count)
                .into_par_iter()
                .map(|e| {
                    let samples = &pairs[e * grid.len()..(e + 1) * grid.len()];
                    let ridge = cfg.ridge.unwrap_or_else(|| default_ridge(samples));
                    let (v, report) = fit_quadratic_with_report(samples, ridge)
                        .map_err(|source| AdpError::Fit { k, e, source })?;
                    let summary = FitSummary {
                        k,
                        e,
                        objective: report.objective,
                        residual: report.residual,
                        iterations: report.iterations,
                        method: report.method,
                        min_eigenvalue: min_eigenvalue(&v.p),
                    };
                    Ok((v, summary))
                })
                .collect::<Result<_, AdpError>>()?;
            let (stage_values, summaries): (Vec<_>, Vec<_>) = fitted.into_iter().unzip();
            log::info!(
                "stage {k}: fitted {} states, {} QPs so far",
                e_count,
                qp_count.load(Ordering::Relaxed)
            );
            values[k] = stage_values;
            fits.extend(summaries);
        }
        Ok(())
    })?;
    fits.sort_by_key(|f| (f.k, f.e));

    Ok(TrainedPolicy {
        format: POLICY_FORMAT.into(),
        n_reservoirs: sys.n(),
        horizon,
        n_states: e_count,
        transition: transition.clone(),
        values,
        terminal,
        metadata: Some(TrainingMetadata {
            config: cfg.clone(),
            config_hash: config_hash(sys, transition, cfg),
            model_hash: None,
            qp_count: qp_count.into_inner(),
            fits,
        }),
    })
}

/// Unpacks a solver point into a control, clearing roundoff below the
/// lower bounds.
fn control_from(sys: &ReservoirSystem, z: &DVector<f64>) -> Control {
    let z = z.map(|v| v.max(0.0));
    Control::from_vector(&z, sys.n())
}

/// Minimizer of the one-stage problem with the policy's next-stage values.
pub fn greedy_action(
    sys: &ReservoirSystem,
    policy: &TrainedPolicy,
    k: usize,
    e: usize,
    x: &StorageState,
    w: &InflowVector,
) -> Result<Control, AdpError> {
    let row: Vec<f64> = policy.transition.row(e).iter().copied().collect();
    let problem = one_stage_problem(sys, &policy.next_values(k), &row, k, x, w)?;
    let sol = solve_stage(&problem, k)?;
    Ok(control_from(sys, &sol.z))
}

/// Minimizer of the stage cost alone; the same QP the greedy policy builds
/// when every value function is zero.
pub fn myopic_action(
    sys: &ReservoirSystem,
    k: usize,
    x: &StorageState,
    w: &InflowVector,
) -> Result<Control, AdpError> {
    let zero = QuadraticValueFunction::zero(sys.n());
    let problem = one_stage_problem(sys, &[&zero], &[1.0], k, x, w)?;
    let sol = solve_stage(&problem, k)?;
    Ok(control_from(sys, &sol.z))
}

/// Anything that maps (stage, state, storage, inflow) to a control.
pub trait ActionRule: Sync {
    fn act(
        &self,
        sys: &ReservoirSystem,
        k: usize,
        e: usize,
        x: &StorageState,
        w: &InflowVector,
    ) -> Result<Control, AdpError>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Myopic;

impl ActionRule for Myopic {
    fn act(
        &self,
        sys: &ReservoirSystem,
        k: usize,
        _e: usize,
        x: &StorageState,
        w: &InflowVector,
    ) -> Result<Control, AdpError> {
        myopic_action(sys, k, x, w)
    }
}

impl ActionRule for TrainedPolicy {
    fn act(
        &self,
        sys: &ReservoirSystem,
        k: usize,
        e: usize,
        x: &StorageState,
        w: &InflowVector,
    ) -> Result<Control, AdpError> {
        greedy_action(sys, self, k, e, x, w)
    }
}

/// Perfect-foresight optimum over the whole horizon for one inflow
/// sequence: a single LP in the controls and the storage trajectory.
pub fn lower_bound(
    sys: &ReservoirSystem,
    x0: &StorageState,
    ws: &[InflowVector],
) -> Result<(Vec<Control>, f64), AdpError> {
    let horizon = sys.horizon();
    if ws.len() != horizon {
        return Err(AdpError::Config(format!(
            "lower bound needs {horizon} inflow vectors, got {}",
            ws.len()
        )));
    }
    let n = sys.n();
    let m = sys.control_len();
    let block = m + n;
    let dim = horizon * block;
    let g = sys.control_to_storage();
    let cost = sys.cost_vector();

    let mut c = DVector::zeros(dim);
    let mut lb = DVector::zeros(dim);
    let mut ub = DVector::from_element(dim, f64::INFINITY);
    let mut a_eq = DMatrix::zeros(horizon * (n + 1), dim);
    let mut b_eq = DVector::zeros(horizon * (n + 1));
    for k in 0..horizon {
        let u0 = k * block;
        let x1 = u0 + m;
        c.rows_mut(u0, m).copy_from(&cost);
        ub.rows_mut(u0, n).copy_from(&sys.release_max);
        ub.rows_mut(u0 + n, n).copy_from(&sys.spill_max);
        ub[u0 + 2 * n] = sys.thermal_max;
        ub.rows_mut(x1, n).copy_from(&sys.capacity);
        lb.rows_mut(x1, n).fill(0.0);

        // x_{k+1} − x_k − G u_k = w_k
        let r0 = k * (n + 1);
        for i in 0..n {
            a_eq[(r0 + i, x1 + i)] = 1.0;
            for j in 0..m {
                a_eq[(r0 + i, u0 + j)] = -g[(i, j)];
            }
            if k > 0 {
                a_eq[(r0 + i, u0 - n + i)] = -1.0;
            }
            b_eq[r0 + i] = ws[k].w[i] + if k == 0 { x0.x[i] } else { 0.0 };
        }
        // η·r + t + d = demand
        let rb = r0 + n;
        for i in 0..n {
            a_eq[(rb, u0 + i)] = sys.conversion[i];
        }
        a_eq[(rb, u0 + 2 * n)] = 1.0;
        a_eq[(rb, u0 + 2 * n + 1)] = 1.0;
        b_eq[rb] = sys.demand[k];
    }
    let qp = QpProblem::linear(c)
        .and_then(|p| p.with_equalities(a_eq, b_eq))
        .and_then(|p| p.with_bounds(lb, ub))
        .map_err(|source| AdpError::Qp { k: 0, source })?;
    let sol = solve_qp(&qp, None);
    if sol.status != QpStatus::Optimal {
        return Err(AdpError::Status { k: 0, status: sol.status });
    }
    let controls = (0..horizon)
        .map(|k| control_from(sys, &sol.z.rows(k * block, m).into_owned()))
        .collect();
    Ok((controls, dual_objective(&qp, &sol)))
}

/// Dual value of a bounded LP, after moving the stationarity residual into
/// the bound multipliers. By weak duality it never exceeds the cost of any
/// feasible point, unlike the primal value which carries the duality gap.
fn dual_objective(qp: &QpProblem, sol: &QpSolution) -> f64 {
    let residual = qp.c() + qp.a_eq().tr_mul(&sol.y_eq) - &sol.y_lb + &sol.y_ub;
    let mut value = -qp.b_eq().dot(&sol.y_eq);
    for (j, r) in residual.iter().enumerate() {
        let net = sol.y_lb[j] - sol.y_ub[j] + r;
        let (lo, hi) = (qp.lb()[j], qp.ub()[j]);
        if net > 0.0 {
            value += net * lo;
        } else if net < 0.0 {
            value += net * hi;
        }
        if !value.is_finite() {
            // nothing to absorb the residual; keep the primal value
            return sol.objective;
        }
    }
    value
}
