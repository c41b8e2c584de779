use nalgebra::DVector;
use rand::Rng;

use super::data::WEEKS_PER_YEAR;
use super::markov::HydroMarkovModel;
use super::HydroError;
use crate::model::{InflowVector, ReservoirSystem};
use crate::rng::StreamRng;

/// Inflow distribution conditioned on week of year and hydrologic state.
pub trait InflowSampler: Send + Sync {
    fn sample(&self, week: usize, e: usize, rng: &mut StreamRng) -> Result<InflowVector, HydroError>;
}

/// Half-widths of the week window tried in turn when a pool is empty.
pub const POOL_WINDOWS: [usize; 3] = [2, 4, 8];

/// Resamples historical weeks: a uniform draw from the rows labelled `e`
/// whose week lies within a circular window around the target week.
#[derive(Debug, Clone)]
pub struct EmpiricalSampler {
    /// Reservoir-mapped inflows of every labelled record.
    rows: Vec<InflowVector>,
    /// `pools[week][e]` indexes into `rows`.
    pools: Vec<Vec<Vec<usize>>>,
}

fn circular_distance(a: usize, b: usize) -> usize {
    let d = a.abs_diff(b);
    d.min(WEEKS_PER_YEAR - d)
}

impl EmpiricalSampler {
    pub fn new(model: &HydroMarkovModel, sys: &ReservoirSystem) -> Result<Self, HydroError> {
        if model.records.first().map_or(0, |r| r.inflow.len()) != sys.dims.n_inflows {
            return Err(HydroError::Data(format!(
                "model has {} sites but the system maps {}",
                model.records.first().map_or(0, |r| r.inflow.len()),
                sys.dims.n_inflows
            )));
        }
        let mut rows = Vec::new();
        let mut meta = Vec::new();
        for r in &model.records {
            if let (Some(label), Some(vals)) = (r.label, r.inflow.iter().copied().collect::<Option<Vec<f64>>>()) {
                rows.push(sys.map_inflows(&vals));
                meta.push((r.week, label));
            }
        }
        let e = model.n_states;
        let mut pools = vec![vec![Vec::new(); e]; WEEKS_PER_YEAR];
        for (week, by_state) in pools.iter_mut().enumerate() {
            for (state, pool) in by_state.iter_mut().enumerate() {
                for &half in &POOL_WINDOWS {
                    pool.extend(
                        meta.iter()
                            .enumerate()
                            .filter(|(_, (w, l))| *l == state && circular_distance(*w, week) <= half)
                            .map(|(i, _)| i),
                    );
                    if !pool.is_empty() {
                        break;
                    }
                }
            }
        }
        Ok(Self { rows, pools })
    }

    pub fn pool(&self, week: usize, e: usize) -> &[usize] {
        &self.pools[week % WEEKS_PER_YEAR][e]
    }

    pub fn pool_rows(&self, week: usize, e: usize) -> impl Iterator<Item = &InflowVector> {
        self.pool(week, e).iter().map(|&i| &self.rows[i])
    }
}

impl InflowSampler for EmpiricalSampler {
    fn sample(&self, week: usize, e: usize, rng: &mut StreamRng) -> Result<InflowVector, HydroError> {
        let week = week % WEEKS_PER_YEAR;
        let pool = self
            .pools
            .get(week)
            .and_then(|p| p.get(e))
            .filter(|p| !p.is_empty())
            .ok_or(HydroError::EmptyPool { week, state: e })?;
        Ok(self.rows[pool[rng.random_range(0..pool.len())]].clone())
    }
}

/// Always the same inflow; draws nothing from the rng.
#[derive(Debug, Clone)]
pub struct ConstantSampler {
    pub w: InflowVector,
}

impl InflowSampler for ConstantSampler {
    fn sample(&self, _week: usize, _e: usize, _rng: &mut StreamRng) -> Result<InflowVector, HydroError> {
        Ok(self.w.clone())
    }
}

/// Finite inflow distribution per hydrologic state, the same every week.
#[derive(Debug, Clone)]
pub struct DiscreteSampler {
    /// `support[e]` lists `(inflow, probability)`.
    pub support: Vec<Vec<(InflowVector, f64)>>,
}

impl DiscreteSampler {
    pub fn new(support: Vec<Vec<(InflowVector, f64)>>) -> Result<Self, HydroError> {
        for (e, atoms) in support.iter().enumerate() {
            let total: f64 = atoms.iter().map(|a| a.1).sum();
            if atoms.is_empty() || atoms.iter().any(|a| !(a.1 >= 0.0)) || (total - 1.0).abs() > 1e-12 {
                return Err(HydroError::Data(format!("state {e}: probabilities must be a distribution")));
            }
        }
        Ok(Self { support })
    }

    /// Scalar inflows on a single reservoir.
    pub fn scalar(support: Vec<Vec<(f64, f64)>>) -> Result<Self, HydroError> {
        Self::new(
            support
                .into_iter()
                .map(|atoms| {
                    atoms
                        .into_iter()
                        .map(|(w, p)| (InflowVector::new(DVector::from_element(1, w)), p))
                        .collect()
                })
                .collect(),
        )
    }
}

impl InflowSampler for DiscreteSampler {
    fn sample(&self, _week: usize, e: usize, rng: &mut StreamRng) -> Result<InflowVector, HydroError> {
        let atoms = self
            .support
            .get(e)
            .ok_or(HydroError::EmptyPool { week: _week, state: e })?;
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (w, p) in &atoms[..atoms.len() - 1] {
            acc += p;
            if u < acc {
                return Ok(w.clone());
            }
        }
        Ok(atoms[atoms.len() - 1].0.clone())
    }
}
