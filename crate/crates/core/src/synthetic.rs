//! Synthetic instances: a three-dam cascade plus one independent plant, a
//! one-reservoir toy, and a regime-switching lognormal generator for weekly
//! inflow records.
//!
//! All parameters are invented. Dry-season demand exceeds what thermal
//! generation alone can cover, so stored water has value.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::hydrology::{InflowDataset, WEEKS_PER_YEAR};
use crate::model::SystemConfig;
use crate::rng::{stream, tag};

/// Routing of the three-dam cascade plus an independent fourth plant.
pub fn cascade_coupling() -> Vec<Vec<f64>> {
    vec![
        vec![-1.0, 0.0, 0.0, 0.0],
        vec![1.0, -1.0, 0.0, 0.0],
        vec![0.0, 1.0, -1.0, 0.0],
        vec![0.0, 0.0, 0.0, -1.0],
    ]
}

/// Reservoirs fed by the three generated inflow series.
pub const CASCADE_INFLOW_MAP: [usize; 3] = [0, 2, 3];

/// Weekly demand in MWh, peaking mid-year.
pub fn seasonal_demand(horizon: usize) -> Vec<f64> {
    (0..horizon)
        .map(|k| {
            let phase = 2.0 * PI * ((k % WEEKS_PER_YEAR) as f64 - 26.0) / WEEKS_PER_YEAR as f64;
            175_000.0 + 25_000.0 * phase.cos()
        })
        .collect()
}

/// Four reservoirs (hm³), three inflow sites, `horizon` weekly stages.
pub fn cascade_config(horizon: usize, n_hydro_states: usize) -> SystemConfig {
    SystemConfig {
        coupling: cascade_coupling(),
        capacity: vec![8000.0, 600.0, 3700.0, 5000.0],
        release_max: vec![390.0, 500.0, 830.0, 2480.0],
        spill_max: Some(vec![20_000.0, 20_000.0, 20_000.0, 40_000.0]),
        max_inflow: None,
        conversion: vec![70.0, 36.0, 67.0, 64.0],
        demand: seasonal_demand(horizon),
        thermal_cost: 100.0,
        thermal_max: 140_000.0,
        deficit_cost: 1000.0,
        inflow_map: CASCADE_INFLOW_MAP.to_vec(),
        n_hydro_states,
    }
}

/// One reservoir, scalar inflow, small numbers.
pub fn toy_config(demand: Vec<f64>, n_hydro_states: usize) -> SystemConfig {
    SystemConfig {
        coupling: vec![vec![-1.0]],
        capacity: vec![10.0],
        release_max: vec![4.0],
        spill_max: Some(vec![20.0]),
        max_inflow: None,
        conversion: vec![1.0],
        demand,
        thermal_cost: 10.0,
        thermal_max: 2.0,
        deficit_cost: 100.0,
        inflow_map: vec![0],
        n_hydro_states,
    }
}

/// Parameters of the regime-switching lognormal record.
#[derive(Debug, Clone)]
pub struct InflowGenerator {
    /// Median inflow per site (hm³/week) averaged over the year.
    pub base: Vec<f64>,
    /// Relative amplitude of the seasonal cycle per site.
    pub amplitude: Vec<f64>,
    /// Week of the seasonal peak per site.
    pub peak_week: Vec<f64>,
    /// Log offset added in each regime.
    pub regime_offsets: Vec<f64>,
    /// Regime transition matrix.
    pub regimes: DMatrix<f64>,
    /// Standard deviation of the site noise in log space.
    pub noise: f64,
    /// Correlation of the noise between sites.
    pub correlation: f64,
    /// Per-entry probability of a zero and of a negative reading.
    pub zero_rate: f64,
    pub negative_rate: f64,
}

impl Default for InflowGenerator {
    fn default() -> Self {
        let offsets = vec![-0.9, -0.4, 0.0, 0.4, 0.9];
        let e = offsets.len();
        let regimes = DMatrix::from_fn(e, e, |i, j| {
            if i == j {
                0.85
            } else if i.abs_diff(j) == 1 {
                if i == 0 || i == e - 1 { 0.15 } else { 0.075 }
            } else {
                0.0
            }
        });
        Self {
            base: vec![120.0, 80.0, 700.0],
            amplitude: vec![0.5, 0.5, 0.4],
            peak_week: vec![30.0, 30.0, 40.0],
            regime_offsets: offsets,
            regimes,
            noise: 0.35,
            correlation: 0.6,
            zero_rate: 0.0,
            negative_rate: 0.0,
        }
    }
}

impl InflowGenerator {
    pub fn n_sites(&self) -> usize {
        self.base.len()
    }

    pub fn seasonal_median(&self, week: usize, site: usize) -> f64 {
        let phase = 2.0 * PI * (week as f64 - self.peak_week[site]) / WEEKS_PER_YEAR as f64;
        self.base[site] * (1.0 + self.amplitude[site] * phase.cos())
    }

    /// `years` consecutive years of weekly records starting in `first_year`.
    pub fn generate(&self, first_year: i32, years: usize, seed: u64) -> InflowDataset {
        let mut rng = stream(seed, &[tag::SYNTHETIC]);
        let p = self.n_sites();
        let shared = self.correlation.sqrt();
        let own = (1.0 - self.correlation).sqrt();
        let mut regime = self.regime_offsets.len() / 2;
        let mut rows = Vec::with_capacity(years * WEEKS_PER_YEAR);
        for y in 0..years {
            for week in 0..WEEKS_PER_YEAR {
                let common: f64 = StandardNormal.sample(&mut rng);
                let mut vals = Vec::with_capacity(p);
                for site in 0..p {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    let log = self.regime_offsets[regime] + self.noise * (shared * common + own * z);
                    let mut v = self.seasonal_median(week, site) * log.exp();
                    let u: f64 = rng.random();
                    if u < self.zero_rate {
                        v = 0.0;
                    } else if u < self.zero_rate + self.negative_rate {
                        v = -v * 0.01;
                    }
                    vals.push(Some(v));
                }
                rows.push((first_year + y as i32, week, vals));
                regime = crate::hydrology::markov::next_state(&self.regimes, regime, &mut rng);
            }
        }
        InflowDataset::from_rows(rows).expect("generated rows are well formed")
    }
}

/// Half-full storage for a system config.
pub fn half_full(cfg: &SystemConfig) -> DVector<f64> {
    DVector::from_iterator(cfg.capacity.len(), cfg.capacity.iter().map(|c| 0.5 * c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hydrology::markov::check_stochastic;
    use crate::model::build_system;

    #[test]
    fn configs_are_valid() {
        let sys = build_system(&cascade_config(52, 5)).unwrap();
        assert_eq!((sys.n(), sys.horizon()), (4, 52));
        build_system(&toy_config(vec![1.0; 4], 2)).unwrap();
    }

    #[test]
    fn dry_season_needs_water() {
        let cfg = cascade_config(52, 1);
        let peak = cfg.demand.iter().cloned().fold(0.0, f64::max);
        assert!(peak > cfg.thermal_max);
    }

    #[test]
    fn generator_is_reproducible_and_well_formed() {
        let g = InflowGenerator::default();
        check_stochastic(&g.regimes, 1e-12).unwrap();
        let a = g.generate(1905, 3, 1);
        assert_eq!(a, g.generate(1905, 3, 1));
        assert_ne!(a, g.generate(1905, 3, 2));
        assert_eq!((a.n_rows(), a.n_sites()), (156, 3));
        assert!((0..a.n_rows()).all(|i| a.row_complete(i)));
        assert!(a.series.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn defects_appear_at_the_requested_rate() {
        let g = InflowGenerator {
            zero_rate: 0.01,
            negative_rate: 0.01,
            ..Default::default()
        };
        let ds = g.generate(1905, 105, 4);
        let total = ds.series.len() as f64;
        let zeros = ds.series.iter().filter(|&&v| v == 0.0).count() as f64 / total;
        let negatives = ds.series.iter().filter(|&&v| v < 0.0).count() as f64 / total;
        assert!((zeros - 0.01).abs() < 0.004 && (negatives - 0.01).abs() < 0.004);
    }
}
