//! Demand-side management in a microgrid with a shared battery, posed as a
//! stochastic aggregative game with chance constraints.
//!
//! Chance constraints on the battery state of charge and on the grid exchange
//! are replaced by deterministic inequalities with Hoeffding margins
//! ([`chance`], [`constraints`]). The resulting game has an affine, strongly
//! monotone pseudo-gradient ([`game`]) and its variational generalized Nash
//! equilibrium is computed with a preconditioned forward–backward method
//! ([`solver`]). [`experiments`] compares the stochastic formulation against
//! deterministic worst-case baselines by Monte Carlo.

pub mod chance;
pub mod cli;
pub mod config;
pub mod constraints;
pub mod experiments;
pub mod game;
pub mod linalg;
pub mod model;
pub mod report;
pub mod solver;

pub use chance::MarginSet;
pub use config::{load_config, load_config_file, to_toml, ConfigError};
pub use constraints::{build_coupling, CouplingConstraint, LocalBox, Mode};
pub use experiments::{run_mode, ModeResult};
pub use game::{build_cost, GameMatrices, MonotonicityConstants, SolverParams};
pub use linalg::{DenseMatrix, Strategies};
pub use model::{BoundedRV, DependencyGraph, MicrogridConfig, ScenarioDraw};
pub use solver::{solve_centralized, solve_semidecentralized, Algorithm, GNEResult, Variant};
