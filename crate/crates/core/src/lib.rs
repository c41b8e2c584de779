//! Quadratic approximate dynamic programming for multi-reservoir
//! hydrothermal scheduling.
//!
//! Cost-to-go functions are convex quadratics `xᵀPx + qᵀx + r`, one per
//! stage and hydrologic state, fitted backwards in time from sampled
//! one-stage QPs. A trained policy acts by solving one convex QP per stage.
//!
//! ```
//! use nalgebra::{dmatrix, DVector};
//! use qadp::adp::{backward_pass, TrainingConfig};
//! use qadp::hydrology::ConstantSampler;
//! use qadp::model::{build_system, InflowVector, StorageState};
//! use qadp::sim::{monte_carlo, MonteCarloSetup};
//! use qadp::synthetic::toy_config;
//!
//! let sys = build_system(&toy_config(vec![3.0; 6], 1)).unwrap();
//! let transition = dmatrix![1.0];
//! let sampler = ConstantSampler { w: InflowVector::new(DVector::from_element(1, 1.0)) };
//! let cfg = TrainingConfig { grid_steps: vec![6], noise_draws: 1, ridge: None, seed: 0, terminal: None };
//! let policy = backward_pass(&sys, &transition, &sampler, &cfg, None).unwrap();
//!
//! let x0 = StorageState::new(DVector::from_element(1, 4.0));
//! let setup = MonteCarloSetup {
//!     sys: &sys, transition: &transition, sampler: &sampler,
//!     x0: &x0, e0: 0, trials: 3, seed: 0, workers: None,
//! };
//! let report = monte_carlo(&setup, &policy, "trained").unwrap();
//! assert_eq!(report.per_trial_totals.len(), 3);
//! ```
//!
//! The guide in `book/` walks through each module; its code blocks are
//! compiled as doc-tests of this crate.

pub mod linalg;
pub mod qpsolve;
pub mod model;
pub mod vfit;
pub mod hydrology;
pub mod rng;
pub mod adp;
pub mod sim;
pub mod synthetic;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/qp.md")]
    mod qp {}
    #[doc = include_str!("../../../book/src/fitting.md")]
    mod fitting {}
    #[doc = include_str!("../../../book/src/hydrology.md")]
    mod hydrology {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
