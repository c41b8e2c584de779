//! Forward evaluation of policies: Monte Carlo rollouts, historical replay,
//! the perfect-foresight bound per scenario and paired comparisons.
//!
//! Scenarios (the hydrologic chain and the inflows) are drawn from their own
//! generators before any action is taken, so every policy evaluated with
//! the same seed sees exactly the same sequences.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adp::{lower_bound, with_workers, ActionRule, AdpError};
use crate::hydrology::markov::next_state;
use crate::hydrology::{HydroError, HydroMarkovModel, InflowSampler, WEEKS_PER_YEAR};
use crate::model::{dynamics, feasible_set, stage_cost, Control, InflowVector, ModelError, ReservoirSystem, StorageState};
use crate::rng::{stream, tag, StreamRng};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Adp(#[from] AdpError),
    #[error(transparent)]
    Hydro(#[from] HydroError),
    #[error("stage {k}: {source}")]
    Model { k: usize, source: ModelError },
    #[error("stage {k}: action violates the feasible set by {violation:.3e}")]
    Infeasible { k: usize, violation: f64 },
    #[error("reports do not share a scenario set: {0}")]
    Mismatch(String),
    #[error("no complete historical year to replay")]
    NoYears,
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

fn io(path: &Path, e: impl std::fmt::Display) -> SimError {
    SimError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Relative tolerance on the feasibility of an applied control.
pub const FEASIBILITY_TOLERANCE: f64 = 1e-6;

/// Hydrologic labels and inflows for one run of the horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    /// `K + 1` labels, starting with `e0`.
    pub hydro_states: Vec<usize>,
    /// `K` inflow vectors.
    pub inflows: Vec<InflowVector>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<StorageState>,
    pub controls: Vec<Control>,
    pub inflows: Vec<InflowVector>,
    pub hydro_states: Vec<usize>,
    pub stage_costs: Vec<f64>,
}

impl Trajectory {
    pub fn total(&self) -> f64 {
        self.stage_costs.iter().sum()
    }

    pub fn terminal(&self) -> &StorageState {
        self.states.last().expect("trajectory has an initial state")
    }

    /// Re-steps the dynamics and re-prices every control.
    pub fn check(&self, sys: &ReservoirSystem) -> Result<(), SimError> {
        for k in 0..self.controls.len() {
            let next = dynamics(sys, &self.states[k], &self.controls[k], &self.inflows[k])
                .map_err(|source| SimError::Model { k, source })?;
            if next != self.states[k + 1] {
                return Err(SimError::Invalid(format!("stage {k}: state does not follow the dynamics")));
            }
            let cost = stage_cost(sys, k, &self.controls[k]);
            if (cost - self.stage_costs[k]).abs() > 1e-9 * (1.0 + cost.abs()) {
                return Err(SimError::Invalid(format!("stage {k}: stored cost {} vs {cost}", self.stage_costs[k])));
            }
        }
        Ok(())
    }
}

/// Draws a scenario for trial `trial`: the chain from one generator, the
/// inflows from another, both keyed by the seed and trial index.
pub fn sample_scenario(
    horizon: usize,
    transition: &DMatrix<f64>,
    sampler: &dyn InflowSampler,
    e0: usize,
    seed: u64,
    trial: u64,
) -> Result<Scenario, SimError> {
    let mut chain = stream(seed, &[tag::SCENARIO_STATES, trial]);
    let mut water = stream(seed, &[tag::SCENARIO_INFLOWS, trial]);
    draw_scenario(horizon, transition, sampler, e0, &mut chain, &mut water)
}

fn draw_scenario(
    horizon: usize,
    transition: &DMatrix<f64>,
    sampler: &dyn InflowSampler,
    e0: usize,
    chain: &mut StreamRng,
    water: &mut StreamRng,
) -> Result<Scenario, SimError> {
    if e0 >= transition.nrows() {
        return Err(SimError::Invalid(format!("initial state {e0} outside 0..{}", transition.nrows())));
    }
    let mut hydro_states = vec![e0];
    let mut inflows = Vec::with_capacity(horizon);
    for k in 0..horizon {
        let e = hydro_states[k];
        inflows.push(sampler.sample(k % WEEKS_PER_YEAR, e, water)?);
        hydro_states.push(next_state(transition, e, chain));
    }
    Ok(Scenario { hydro_states, inflows })
}

/// Applies `act` along a fixed scenario.
pub fn run_policy(
    sys: &ReservoirSystem,
    act: &dyn ActionRule,
    scenario: &Scenario,
    x0: &StorageState,
) -> Result<Trajectory, SimError> {
    check_start(sys, x0)?;
    let horizon = scenario.inflows.len();
    let mut states = vec![x0.clone()];
    let mut controls = Vec::with_capacity(horizon);
    let mut stage_costs = Vec::with_capacity(horizon);
    for k in 0..horizon {
        let (x, w, e) = (&states[k], &scenario.inflows[k], scenario.hydro_states[k]);
        let u = act.act(sys, k, e, x, w)?;
        let set = feasible_set(sys, k, x, w);
        let scale = 1.0 + set.b_in.amax().max(set.b_eq.amax());
        let violation = set.violation(&u.to_vector());
        if violation > FEASIBILITY_TOLERANCE * scale {
            return Err(SimError::Infeasible { k, violation });
        }
        let next = dynamics(sys, x, &u, w).map_err(|source| SimError::Model { k, source })?;
        stage_costs.push(stage_cost(sys, k, &u));
        controls.push(u);
        states.push(next);
    }
    Ok(Trajectory {
        states,
        controls,
        inflows: scenario.inflows.clone(),
        hydro_states: scenario.hydro_states.clone(),
        stage_costs,
    })
}

fn check_start(sys: &ReservoirSystem, x0: &StorageState) -> Result<(), SimError> {
    let ok = x0.x.len() == sys.n()
        && x0.x.iter().zip(sys.capacity.iter()).all(|(&x, &c)| (0.0..=c).contains(&x));
    if ok {
        Ok(())
    } else {
        Err(SimError::Invalid("initial storage outside [0, capacity]".into()))
    }
}

/// One rollout; the chain and the inflows get generators seeded from `rng`.
#[allow(clippy::too_many_arguments)]
pub fn simulate_trajectory(
    sys: &ReservoirSystem,
    act: &dyn ActionRule,
    transition: &DMatrix<f64>,
    sampler: &dyn InflowSampler,
    x0: &StorageState,
    e0: usize,
    rng: &mut StreamRng,
) -> Result<Trajectory, SimError> {
    let mut chain = StreamRng::seed_from_u64(rng.random());
    let mut water = StreamRng::seed_from_u64(rng.random());
    let scenario = draw_scenario(sys.horizon(), transition, sampler, e0, &mut chain, &mut water)?;
    run_policy(sys, act, &scenario, x0)
}

/// Identifies a set of scenarios; reports are only comparable when equal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioKey {
    pub mode: String,
    pub seed: u64,
    pub trials: usize,
    pub e0: usize,
    pub x0: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub policy: String,
    pub scenario: ScenarioKey,
    pub trials: usize,
    pub mean_total: f64,
    /// Sample standard deviation of the trial totals (`T − 1` denominator).
    pub sample_dev: f64,
    /// Standard error `σ/√T`.
    pub band_halfwidth: f64,
    /// `√σ/T`, the band as printed in the original figure caption.
    pub band_literal: f64,
    pub per_trial_totals: Vec<f64>,
    /// Seed or historical year of each trial.
    pub trial_ids: Vec<i64>,
    pub terminal_storage: Vec<Vec<f64>>,
}

impl SimulationReport {
    pub fn from_totals(
        policy: &str,
        scenario: ScenarioKey,
        trial_ids: Vec<i64>,
        totals: Vec<f64>,
        terminal_storage: Vec<Vec<f64>>,
    ) -> Self {
        let t = totals.len();
        let mean = totals.iter().sum::<f64>() / t as f64;
        let dev = if t > 1 {
            (totals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (t - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self {
            policy: policy.into(),
            scenario,
            trials: t,
            mean_total: mean,
            sample_dev: dev,
            band_halfwidth: dev / (t as f64).sqrt(),
            band_literal: dev.sqrt() / t as f64,
            per_trial_totals: totals,
            trial_ids,
            terminal_storage,
        }
    }

    /// One row per trial: id, total and terminal storage.
    pub fn write_trials_csv(&self, path: &Path) -> Result<(), SimError> {
        let mut w = csv::Writer::from_path(path).map_err(|e| io(path, e))?;
        let n = self.terminal_storage.first().map_or(0, Vec::len);
        let mut header = vec!["trial".to_string(), "total".to_string()];
        header.extend((0..n).map(|i| format!("x{i}_final")));
        w.write_record(&header).map_err(|e| io(path, e))?;
        for ((id, total), x) in self.trial_ids.iter().zip(&self.per_trial_totals).zip(&self.terminal_storage) {
            let mut rec = vec![id.to_string(), total.to_string()];
            rec.extend(x.iter().map(f64::to_string));
            w.write_record(&rec).map_err(|e| io(path, e))?;
        }
        w.flush().map_err(|e| io(path, e))
    }
}

/// Summary rows for several reports.
pub fn write_summary_csv(path: &Path, reports: &[SimulationReport]) -> Result<(), SimError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io(path, e))?;
    w.write_record(["policy", "mode", "trials", "mean_total", "sample_dev", "band_halfwidth", "band_literal"])
        .map_err(|e| io(path, e))?;
    for r in reports {
        w.write_record([
            r.policy.clone(),
            r.scenario.mode.clone(),
            r.trials.to_string(),
            r.mean_total.to_string(),
            r.sample_dev.to_string(),
            r.band_halfwidth.to_string(),
            r.band_literal.to_string(),
        ])
        .map_err(|e| io(path, e))?;
    }
    w.flush().map_err(|e| io(path, e))
}

/// Everything `monte_carlo` needs besides the policy.
#[derive(Clone, Copy)]
pub struct MonteCarloSetup<'a> {
    pub sys: &'a ReservoirSystem,
    pub transition: &'a DMatrix<f64>,
    pub sampler: &'a dyn InflowSampler,
    pub x0: &'a StorageState,
    pub e0: usize,
    pub trials: usize,
    pub seed: u64,
    pub workers: Option<usize>,
}

impl MonteCarloSetup<'_> {
    fn key(&self, mode: &str) -> ScenarioKey {
        ScenarioKey {
            mode: mode.into(),
            seed: self.seed,
            trials: self.trials,
            e0: self.e0,
            x0: self.x0.x.iter().copied().collect(),
        }
    }

    pub fn scenario(&self, trial: usize) -> Result<Scenario, SimError> {
        sample_scenario(self.sys.horizon(), self.transition, self.sampler, self.e0, self.seed, trial as u64)
    }

    fn run<T: Send>(&self, f: impl Fn(usize) -> Result<T, SimError> + Sync + Send) -> Result<Vec<T>, SimError> {
        if self.trials == 0 {
            return Err(SimError::Invalid("at least one trial is needed".into()));
        }
        with_workers(self.workers, || (0..self.trials).into_par_iter().map(&f).collect())
    }
}

/// `T` rollouts of `act` on independent scenarios.
pub fn monte_carlo(setup: &MonteCarloSetup, act: &dyn ActionRule, name: &str) -> Result<SimulationReport, SimError> {
    let runs = setup.run(|i| {
        let traj = run_policy(setup.sys, act, &setup.scenario(i)?, setup.x0)?;
        Ok((traj.total(), traj.terminal().x.iter().copied().collect::<Vec<f64>>()))
    })?;
    let (totals, terminal): (Vec<f64>, Vec<Vec<f64>>) = runs.into_iter().unzip();
    let ids = (0..setup.trials as i64).collect();
    Ok(SimulationReport::from_totals(name, setup.key("montecarlo"), ids, totals, terminal))
}

/// The perfect-foresight optimum of each Monte Carlo scenario.
pub fn monte_carlo_bound(setup: &MonteCarloSetup) -> Result<SimulationReport, SimError> {
    let runs = setup.run(|i| {
        let sc = setup.scenario(i)?;
        let (controls, cost) = lower_bound(setup.sys, setup.x0, &sc.inflows)?;
        let mut x = setup.x0.clone();
        for (k, (u, w)) in controls.iter().zip(&sc.inflows).enumerate() {
            x = dynamics(setup.sys, &x, u, w).map_err(|source| SimError::Model { k, source })?;
        }
        Ok((cost, x.x.iter().copied().collect::<Vec<f64>>()))
    })?;
    let (totals, terminal): (Vec<f64>, Vec<Vec<f64>>) = runs.into_iter().unzip();
    let ids = (0..setup.trials as i64).collect();
    // compared against Monte Carlo reports on the same scenarios
    Ok(SimulationReport::from_totals("bound", setup.key("montecarlo"), ids, totals, terminal))
}

/// Historical scenarios: one per year whose first `K` weeks (and the label
/// after them) are present, complete and consecutive in the record.
pub fn historical_scenarios(
    sys: &ReservoirSystem,
    model: &HydroMarkovModel,
    years: Option<(i32, i32)>,
) -> Result<(Vec<(i32, Scenario)>, Vec<i32>), SimError> {
    let horizon = sys.horizon();
    let recs = &model.records;
    let mut out = Vec::new();
    let mut skipped = Vec::new();
    for (start, r) in recs.iter().enumerate() {
        if r.week != 0 || years.is_some_and(|(a, b)| r.year < a || r.year > b) {
            continue;
        }
        let mut inflows = Vec::with_capacity(horizon);
        let mut states = Vec::with_capacity(horizon + 1);
        for k in 0..horizon {
            let Some(rec) = recs.get(start + k) else { break };
            let on_time = rec.year == r.year + (k / WEEKS_PER_YEAR) as i32 && rec.week == k % WEEKS_PER_YEAR;
            let (true, Some(label), Some(vals)) =
                (on_time, rec.label, rec.inflow.iter().copied().collect::<Option<Vec<f64>>>())
            else {
                break;
            };
            inflows.push(sys.map_inflows(&vals));
            states.push(label);
        }
        if inflows.len() < horizon {
            skipped.push(r.year);
            continue;
        }
        // the label after the horizon is not used by any action
        let last = *states.last().expect("horizon is at least one stage");
        states.push(recs.get(start + horizon).and_then(|r| r.label).unwrap_or(last));
        out.push((r.year, Scenario { hydro_states: states, inflows }));
    }
    if !skipped.is_empty() {
        log::warn!("skipping incomplete historical years {skipped:?}");
    }
    if out.is_empty() {
        return Err(SimError::NoYears);
    }
    Ok((out, skipped))
}

/// One trial per complete historical year; inflows and labels verbatim.
pub fn replay_historical(
    sys: &ReservoirSystem,
    act: &dyn ActionRule,
    model: &HydroMarkovModel,
    x0: &StorageState,
    years: Option<(i32, i32)>,
    name: &str,
    workers: Option<usize>,
) -> Result<(SimulationReport, Vec<i32>), SimError> {
    let (scenarios, skipped) = historical_scenarios(sys, model, years)?;
    let runs: Vec<(f64, Vec<f64>)> = with_workers(workers, || {
        scenarios
            .par_iter()
            .map(|(_, sc)| {
                let t = run_policy(sys, act, sc, x0)?;
                Ok((t.total(), t.terminal().x.iter().copied().collect()))
            })
            .collect::<Result<_, SimError>>()
    })?;
    let (totals, terminal): (Vec<f64>, Vec<Vec<f64>>) = runs.into_iter().unzip();
    let key = ScenarioKey {
        mode: "historical".into(),
        seed: 0,
        trials: scenarios.len(),
        e0: scenarios[0].1.hydro_states[0],
        x0: x0.x.iter().copied().collect(),
    };
    let ids = scenarios.iter().map(|(y, _)| *y as i64).collect();
    Ok((SimulationReport::from_totals(name, key, ids, totals, terminal), skipped))
}

/// Paired difference of one policy against a baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub policy: String,
    pub baseline: String,
    pub mean_policy: f64,
    pub mean_baseline: f64,
    /// `mean_policy − mean_baseline`.
    pub delta: f64,
    /// Delta as a percentage of the baseline mean.
    pub delta_pct: f64,
    /// Standard error of the paired per-trial differences.
    pub paired_se: f64,
}

/// Every ordered pair of reports. Refuses reports drawn from different
/// scenario sets.
pub fn compare_policies(reports: &[SimulationReport]) -> Result<Vec<ComparisonRow>, SimError> {
    let Some(first) = reports.first() else {
        return Ok(Vec::new());
    };
    for r in reports {
        if r.scenario != first.scenario || r.trial_ids != first.trial_ids {
            return Err(SimError::Mismatch(format!(
                "{:?} vs {:?}",
                first.scenario, r.scenario
            )));
        }
    }
    let mut rows = Vec::new();
    for a in reports {
        for b in reports {
            if std::ptr::eq(a, b) {
                continue;
            }
            let diffs: Vec<f64> = a.per_trial_totals.iter().zip(&b.per_trial_totals).map(|(x, y)| x - y).collect();
            let t = diffs.len() as f64;
            let mean = diffs.iter().sum::<f64>() / t;
            let se = if diffs.len() > 1 {
                (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (t - 1.0)).sqrt() / t.sqrt()
            } else {
                0.0
            };
            rows.push(ComparisonRow {
                policy: a.policy.clone(),
                baseline: b.policy.clone(),
                mean_policy: a.mean_total,
                mean_baseline: b.mean_total,
                delta: mean,
                delta_pct: if b.mean_total != 0.0 { 100.0 * mean / b.mean_total } else { 0.0 },
                paired_se: se,
            });
        }
    }
    Ok(rows)
}

pub fn write_comparison_csv(path: &Path, rows: &[ComparisonRow]) -> Result<(), SimError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| io(path, e))?;
    }
    w.flush().map_err(|e| io(path, e))
}

/// Initial storage with reservoir 0 at `level` and the others at the given
/// fractions of capacity.
pub fn sweep_start(sys: &ReservoirSystem, level: f64, fractions: &[f64]) -> StorageState {
    let mut x = DVector::zeros(sys.n());
    x[0] = level.clamp(0.0, sys.capacity[0]);
    for i in 1..sys.n() {
        x[i] = fractions.get(i - 1).copied().unwrap_or(0.5).clamp(0.0, 1.0) * sys.capacity[i];
    }
    StorageState::new(x)
}
