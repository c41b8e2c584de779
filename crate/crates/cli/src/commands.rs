//! The subcommands. Each reads its inputs from files, writes its outputs
//! into the run's output directory and echoes the resolved config there.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use qadp::adp::{backward_pass, hash_hex, ActionRule, Myopic, TrainedPolicy, TrainingConfig};
use qadp::hydrology::{
    clean_negatives, estimate_model, load_inflow_csv, ClusterMethod, EmpiricalSampler, EstimationDiagnostics,
    HydroMarkovModel,
};
use qadp::model::{ReservoirSystem, StorageState};
use qadp::sim::{
    compare_policies, monte_carlo, monte_carlo_bound, replay_historical, sweep_start, write_comparison_csv,
    write_summary_csv, ComparisonRow, MonteCarloSetup, SimulationReport,
};
use qadp::synthetic::{cascade_config, InflowGenerator};

use crate::config::{RunConfig, Sweep};
use crate::error::CliError;

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::data(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

fn csv_text(header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}

fn matrix_csv(m: &nalgebra::DMatrix<f64>, first: &str, col: &str) -> String {
    let mut header = vec![first.to_string()];
    header.extend((0..m.ncols()).map(|j| format!("{col}{j}")));
    let rows = (0..m.nrows()).map(|i| {
        let mut r = vec![i.to_string()];
        r.extend(m.row(i).iter().map(f64::to_string));
        r
    });
    csv_text(&header, rows)
}

pub fn load_model(cfg: &RunConfig) -> Result<HydroMarkovModel, CliError> {
    let path = cfg.model_path();
    HydroMarkovModel::from_json(&read_text(path)?).map_err(|e| CliError::from(e).context(&path.display().to_string()))
}

/// The system file with the number of hydrologic states taken from the
/// model.
pub fn load_system(cfg: &RunConfig, model: &HydroMarkovModel) -> Result<ReservoirSystem, CliError> {
    if model.n_states != cfg.n_states {
        return Err(CliError::config(format!(
            "config asks for {} hydrologic states, the model has {}",
            cfg.n_states, model.n_states
        )));
    }
    let sys = ReservoirSystem::load(&cfg.system).map_err(|e| CliError::from(e).context("system"))?;
    Ok(sys.with_hydro_states(model.n_states))
}

#[derive(Debug, Serialize)]
struct EstimateReport<'a> {
    method: ClusterMethod,
    n_states: usize,
    negatives_replaced: usize,
    diagnostics: &'a EstimationDiagnostics,
    transition: Vec<Vec<f64>>,
}

/// Fits the hydrologic model and writes it with its diagnostics.
pub fn cmd_estimate(cfg: &RunConfig) -> Result<HydroMarkovModel, CliError> {
    let path = cfg
        .inflows
        .as_deref()
        .ok_or_else(|| CliError::config("estimate needs an inflows file"))?;
    if cfg.method == ClusterMethod::External {
        return Err(CliError::config("the external method takes a transition matrix from the library API"));
    }
    let raw = load_inflow_csv(path)?;
    let (ds, negatives) = clean_negatives(&raw);
    if negatives > 0 {
        log::warn!("{negatives} negative inflow readings treated as missing");
    }
    let (model, diag) = estimate_model(&ds, cfg.method, cfg.n_states, cfg.seed)?;
    log::info!("cluster sizes {:?}", diag.cluster_sizes);

    let out = &cfg.out;
    write_text(cfg.model_path(), &model.to_json())?;
    let report = EstimateReport {
        method: cfg.method,
        n_states: cfg.n_states,
        negatives_replaced: negatives,
        diagnostics: &diag,
        transition: model.transition.row_iter().map(|r| r.iter().copied().collect()).collect(),
    };
    write_text(&out.join("estimate_diagnostics.json"), &json(&report))?;
    write_text(&out.join("transition.csv"), &matrix_csv(&model.transition, "from", "to_"))?;
    write_text(&out.join("medians.csv"), &matrix_csv(&model.medians, "week", "site_"))?;
    let sizes = diag.cluster_sizes.iter().enumerate().map(|(e, n)| vec![e.to_string(), n.to_string()]);
    write_text(
        &out.join("cluster_sizes.csv"),
        &csv_text(&["state".into(), "rows".into()], sizes),
    )?;
    cfg.echo("estimate")?;
    Ok(model)
}

/// Training outcome written next to the policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub horizon: usize,
    pub n_states: usize,
    pub grid_size: usize,
    pub noise_draws: usize,
    pub qp_count: usize,
    pub expected_qp_count: usize,
    pub config_hash: String,
    pub model_hash: String,
}

/// Runs the backward pass and writes the policy and training log.
pub fn cmd_train(cfg: &RunConfig, workers: Option<usize>) -> Result<(TrainedPolicy, TrainingSummary), CliError> {
    let model = load_model(cfg)?;
    let sys = load_system(cfg, &model)?;
    if cfg.grid.is_empty() {
        return Err(CliError::config("train needs grid counts"));
    }
    let sampler = EmpiricalSampler::new(&model, &sys)?;
    let tc = TrainingConfig {
        grid_steps: cfg.grid.clone(),
        noise_draws: cfg.noise_draws,
        ridge: cfg.ridge,
        seed: cfg.seed,
        terminal: cfg.terminal.clone(),
    };
    let mut policy = backward_pass(&sys, &model.transition, &sampler, &tc, workers)?;
    let model_hash = hash_hex(&[model.to_json().as_bytes()]);
    let meta = policy.metadata.as_mut().expect("training fills metadata");
    meta.model_hash = Some(model_hash.clone());

    let summary = TrainingSummary {
        horizon: sys.horizon(),
        n_states: model.n_states,
        grid_size: tc.grid_size(),
        noise_draws: tc.noise_draws,
        qp_count: meta.qp_count,
        expected_qp_count: sys.horizon() * model.n_states * tc.grid_size() * tc.noise_draws,
        config_hash: meta.config_hash.clone(),
        model_hash,
    };
    log::info!("backward pass solved {} QPs", summary.qp_count);

    let header: Vec<String> = ["k", "e", "objective", "residual", "iterations", "method", "min_eigenvalue"]
        .map(String::from)
        .to_vec();
    let rows = meta.fits.iter().map(|f| {
        vec![
            f.k.to_string(),
            f.e.to_string(),
            f.objective.to_string(),
            f.residual.to_string(),
            f.iterations.to_string(),
            format!("{:?}", f.method),
            f.min_eigenvalue.to_string(),
        ]
    });
    let log_csv = csv_text(&header, rows);
    write_text(cfg.policy_path(), &policy.to_json())?;
    write_text(&cfg.out.join("training_log.csv"), &log_csv)?;
    write_text(&cfg.out.join("training_summary.json"), &json(&summary))?;
    cfg.echo("train")?;
    Ok((policy, summary))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum PolicyKind {
    Trained,
    Myopic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SimMode {
    Montecarlo,
    Historical,
    Bound,
}

/// One point of an initial-storage sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub level: f64,
    pub report: SimulationReport,
}

/// Reports written by `cmd_simulate`, one per initial storage.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulateOutput {
    pub stem: String,
    pub points: Vec<SweepPoint>,
    pub swept: bool,
}

fn initial_storage(cfg: &RunConfig, sys: &ReservoirSystem) -> Result<StorageState, CliError> {
    let x = match &cfg.x0 {
        None => return Ok(StorageState::new(sys.capacity.map(|c| 0.5 * c))),
        Some(x) => x,
    };
    if x.len() != sys.n() {
        return Err(CliError::config(format!("x0 has {} entries for {} reservoirs", x.len(), sys.n())));
    }
    if let Some(i) = (0..sys.n()).find(|&i| !(0.0..=sys.capacity[i]).contains(&x[i])) {
        return Err(CliError::config(format!("x0[{i}] = {} is outside [0, {}]", x[i], sys.capacity[i])));
    }
    Ok(StorageState::new(nalgebra::DVector::from_column_slice(x)))
}

fn starts(cfg: &RunConfig, sys: &ReservoirSystem) -> Result<Vec<(f64, StorageState)>, CliError> {
    match &cfg.sweep {
        Some(Sweep { levels, fractions }) => {
            if let Some(l) = levels.iter().find(|&&l| !(0.0..=sys.capacity[0]).contains(&l)) {
                return Err(CliError::config(format!("sweep level {l} is outside [0, {}]", sys.capacity[0])));
            }
            Ok(levels.iter().map(|&l| (l, sweep_start(sys, l, fractions))).collect())
        }
        None => {
            let x = initial_storage(cfg, sys)?;
            Ok(vec![(x.x[0], x)])
        }
    }
}

/// Evaluates a policy, or the perfect-foresight bound, on Monte Carlo or
/// historical scenarios, once per initial storage.
pub fn cmd_simulate(
    cfg: &RunConfig,
    policy: PolicyKind,
    mode: SimMode,
    workers: Option<usize>,
) -> Result<SimulateOutput, CliError> {
    let model = load_model(cfg)?;
    let sys = load_system(cfg, &model)?;
    let sampler = EmpiricalSampler::new(&model, &sys)?;
    let act: Box<dyn ActionRule> = match (mode, policy) {
        (SimMode::Bound, _) | (_, PolicyKind::Myopic) => Box::new(Myopic),
        (_, PolicyKind::Trained) => {
            let path = cfg.policy_path();
            let p = TrainedPolicy::from_json(&read_text(path)?)
                .map_err(|e| CliError::from(e).context(&path.display().to_string()))?;
            p.check_system(&sys)?;
            if p.n_states != model.n_states || p.transition != model.transition {
                return Err(CliError::config("the policy was trained on a different hydrologic model"));
            }
            Box::new(p)
        }
    };
    let name = match policy {
        PolicyKind::Trained => "trained",
        PolicyKind::Myopic => "myopic",
    };
    let stem = match mode {
        SimMode::Montecarlo => format!("{name}_montecarlo"),
        SimMode::Historical => format!("{name}_historical"),
        SimMode::Bound => "bound_montecarlo".to_string(),
    };

    let mut points = Vec::new();
    let mut skipped_years = Vec::new();
    for (level, x0) in starts(cfg, &sys)? {
        let setup = MonteCarloSetup {
            sys: &sys,
            transition: &model.transition,
            sampler: &sampler,
            x0: &x0,
            e0: cfg.e0(),
            trials: cfg.trials,
            seed: cfg.seed,
            workers,
        };
        let report = match mode {
            SimMode::Montecarlo => monte_carlo(&setup, act.as_ref(), name)?,
            SimMode::Bound => monte_carlo_bound(&setup)?,
            SimMode::Historical => {
                let (r, skipped) = replay_historical(&sys, act.as_ref(), &model, &x0, cfg.years, name, workers)?;
                skipped_years = skipped;
                r
            }
        };
        log::info!(
            "{stem} from level {level}: mean {:.6e} ± {:.3e} over {} trials",
            report.mean_total,
            report.band_halfwidth,
            report.trials
        );
        points.push(SweepPoint { level, report });
    }

    let out = &cfg.out;
    create_dir(out)?;
    let swept = cfg.sweep.is_some();
    let reports: Vec<SimulationReport> = points.iter().map(|p| p.report.clone()).collect();
    write_summary_csv(&out.join(format!("summary_{stem}.csv")), &reports)?;
    if swept {
        write_text(&out.join(format!("sweep_{stem}.json")), &json(&points))?;
        let xy = |f: fn(&SimulationReport) -> f64| {
            csv_text(
                &["x".into(), "y".into()],
                points.iter().map(|p| vec![p.level.to_string(), f(&p.report).to_string()]),
            )
        };
        write_text(&out.join(format!("plot_{stem}.csv")), &xy(|r| r.mean_total))?;
        write_text(&out.join(format!("plot_{stem}_band.csv")), &xy(|r| r.band_halfwidth))?;
    } else {
        let r = &points[0].report;
        write_text(&out.join(format!("report_{stem}.json")), &json(r))?;
        r.write_trials_csv(&out.join(format!("trials_{stem}.csv")))?;
    }
    if mode == SimMode::Historical {
        write_text(
            &out.join(format!("skipped_{stem}.csv")),
            &csv_text(&["year".into()], skipped_years.iter().map(|y| vec![y.to_string()])),
        )?;
    }
    cfg.echo(&format!("simulate_{stem}"))?;
    Ok(SimulateOutput { stem, points, swept })
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::data(format!("{}: {e}", dir.display())))
}

/// Comparison of single reports and of sweeps, written as CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareOutput {
    pub rows: Vec<ComparisonRow>,
    pub sweep_rows: Vec<(f64, ComparisonRow)>,
}

/// Default inputs: every report and sweep file in the output directory.
pub fn default_compare_inputs(out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let entries = std::fs::read_dir(out).map_err(|e| CliError::data(format!("{}: {e}", out.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            (name.starts_with("report_") || name.starts_with("sweep_")) && name.ends_with(".json")
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Paired comparison of every pair of reports sharing a scenario set.
pub fn cmd_compare(out: &Path, inputs: &[PathBuf]) -> Result<CompareOutput, CliError> {
    let mut singles = Vec::new();
    let mut sweeps: Vec<Vec<SweepPoint>> = Vec::new();
    for path in inputs {
        let text = read_text(path)?;
        if let Ok(r) = serde_json::from_str::<SimulationReport>(&text) {
            singles.push(r);
        } else {
            let s: Vec<SweepPoint> = serde_json::from_str(&text)
                .map_err(|e| CliError::data(format!("{}: not a report or sweep file: {e}", path.display())))?;
            sweeps.push(s);
        }
    }

    create_dir(out)?;
    // only reports on the same scenarios are comparable
    let mut groups: Vec<Vec<SimulationReport>> = Vec::new();
    for r in singles {
        match groups.iter_mut().find(|g| g[0].scenario == r.scenario) {
            Some(g) => g.push(r),
            None => groups.push(vec![r]),
        }
    }
    let mut rows = Vec::new();
    let mut compared = Vec::new();
    for g in groups.into_iter().filter(|g| g.len() >= 2) {
        rows.extend(compare_policies(&g)?);
        compared.extend(g);
    }
    if !compared.is_empty() {
        write_comparison_csv(&out.join("comparison.csv"), &rows)?;
        write_summary_csv(&out.join("summary.csv"), &compared)?;
    }

    let mut sweep_rows = Vec::new();
    if sweeps.len() >= 2 {
        let levels: Vec<f64> = sweeps[0].iter().map(|p| p.level).collect();
        if sweeps.iter().any(|s| s.iter().map(|p| p.level).ne(levels.iter().copied())) {
            return Err(CliError::config("sweeps were run over different levels"));
        }
        for (i, &level) in levels.iter().enumerate() {
            let at: Vec<SimulationReport> = sweeps.iter().map(|s| s[i].report.clone()).collect();
            for row in compare_policies(&at)? {
                sweep_rows.push((level, row));
            }
        }
        let header: Vec<String> = [
            "level",
            "policy",
            "baseline",
            "mean_policy",
            "mean_baseline",
            "delta",
            "delta_pct",
            "paired_se",
        ]
        .map(String::from)
        .to_vec();
        let rows_csv = sweep_rows.iter().map(|(l, r)| {
            vec![
                l.to_string(),
                r.policy.clone(),
                r.baseline.clone(),
                r.mean_policy.to_string(),
                r.mean_baseline.to_string(),
                r.delta.to_string(),
                r.delta_pct.to_string(),
                r.paired_se.to_string(),
            ]
        });
        write_text(&out.join("comparison_sweep.csv"), &csv_text(&header, rows_csv))?;
        let mut pairs: Vec<(String, String)> =
            sweep_rows.iter().map(|(_, r)| (r.policy.clone(), r.baseline.clone())).collect();
        pairs.dedup();
        pairs.sort();
        pairs.dedup();
        for (p, b) in pairs {
            let xy = sweep_rows
                .iter()
                .filter(|(_, r)| r.policy == p && r.baseline == b)
                .map(|(l, r)| vec![l.to_string(), r.delta_pct.to_string()]);
            write_text(
                &out.join(format!("plot_delta_{p}_vs_{b}.csv")),
                &csv_text(&["x".into(), "y".into()], xy),
            )?;
        }
    }
    if rows.is_empty() && sweep_rows.is_empty() {
        return Err(CliError::config("compare needs two reports, or two sweeps, on the same scenarios"));
    }
    Ok(CompareOutput { rows, sweep_rows })
}

/// Files written by `cmd_synth`.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub system: PathBuf,
    pub inflows: PathBuf,
    pub config: PathBuf,
}

/// Writes the synthetic cascade, a generated inflow record and a run config
/// that points at them.
pub fn cmd_synth(out: &Path, horizon: usize, years: usize, n_states: usize, seed: u64) -> Result<SynthOutput, CliError> {
    if horizon == 0 || years == 0 || n_states == 0 {
        return Err(CliError::config("horizon, years and states must be at least 1"));
    }
    let system = out.join("system.json");
    let inflows = out.join("inflows.csv");
    let config = out.join("run.json");
    write_text(&system, &json(&cascade_config(horizon, n_states)))?;
    let ds = InflowGenerator::default().generate(1909, years, seed);
    ds.write_csv(&inflows)?;
    let run = serde_json::json!({
        "system": "system.json",
        "inflows": "inflows.csv",
        "method": "pca",
        "n_states": n_states,
        "seed": seed,
        "grid": [10, 3, 3, 3],
        "noise_draws": 10,
        "trials": 105,
        "out": "out",
    });
    write_text(&config, &json(&run))?;
    Ok(SynthOutput { system, inflows, config })
}
