//! Mode comparison, SoC simulation and Monte Carlo audits.

use rayon::prelude::*;
use thiserror::Error;

use crate::chance::{ChanceError, MarginSet};
use crate::constraints::{
    build_coupling, feasibility_search, local_boxes, ConstraintError, CouplingConstraint,
    FeasibilityReport, Mode,
};
use crate::game::{
    build_cost, configured_constants, configured_step_sizes, GameError, GameMatrices,
    MonotonicityConstants, SolverParams,
};
use crate::linalg::Strategies;
use crate::model::{indexed_scenario, MicrogridConfig, ScenarioDraw};
use crate::solver::{solve, Algorithm, GNEResult, SolveOptions, SolverError, Variant};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Chance(#[from] ChanceError),
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
    #[error(transparent)]
    Game(#[from] GameError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("{mode}: no strictly feasible point found (min max violation {min_max_violation:e})")]
    Infeasible {
        mode: Mode,
        min_max_violation: f64,
    },
    #[error("{}: not converged after {} iterations", .0.mode, .0.gne.iterations)]
    NotConverged(Box<ModeResult>),
    #[error("at least one Monte Carlo sample is required")]
    NoSamples,
}

/// SoC trajectory `x^0..x^tau` by the one-step recursion.
pub fn simulate_soc(cfg: &MicrogridConfig, u: &Strategies, scenario: &ScenarioDraw) -> Vec<f64> {
    simulate_soc_aggregate(cfg, &u.aggregate(), &scenario.renewable)
}

pub fn simulate_soc_aggregate(cfg: &MicrogridConfig, agg: &[f64], renewable: &[f64]) -> Vec<f64> {
    let rho = cfg.rho();
    let mut x = Vec::with_capacity(agg.len() + 1);
    let mut cur = cfg.battery.x0;
    x.push(cur);
    for (s, r) in agg.iter().zip(renewable) {
        cur += rho * (r - s);
        x.push(cur);
    }
    x
}

/// SoC trajectory from the explicit sum `x^t = x0 + sum_{k<t} rho (r^k - S^k)`.
pub fn simulate_soc_closed_form(cfg: &MicrogridConfig, u: &Strategies, scenario: &ScenarioDraw) -> Vec<f64> {
    let rho = cfg.rho();
    let agg = u.aggregate();
    (0..=cfg.horizon)
        .map(|t| {
            let sum: f64 = (0..t).map(|k| -rho * agg[k] + rho * scenario.renewable[k]).sum();
            cfg.battery.x0 + sum
        })
        .collect()
}

/// Everything produced by solving one mode.
#[derive(Clone, Debug)]
pub struct ModeResult {
    pub mode: Mode,
    pub gne: GNEResult,
    pub margins: MarginSet,
    pub constants: MonotonicityConstants,
    pub params: SolverParams,
    pub feasibility: FeasibilityReport,
    pub coupling: CouplingConstraint,
    /// `sum_j (mu_{d_j}^t - u_j^t)`
    pub grid_exchange_mean: Vec<f64>,
    /// SoC under mean renewable input, length `tau + 1`.
    pub soc_mean: Vec<f64>,
}

impl ModeResult {
    pub fn peak_grid_exchange(&self) -> f64 {
        self.grid_exchange_mean.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOptions {
    pub algorithm: Algorithm,
    pub variant: Variant,
    /// Solve even when the strict-feasibility check fails.
    pub allow_nonslater: bool,
    pub solve: SolveOptions,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::SemiDecentralized,
            variant: Variant::Consistent,
            allow_nonslater: false,
            solve: SolveOptions::default(),
        }
    }
}

/// The pieces needed to solve one mode, before iterating.
#[derive(Clone, Debug)]
pub struct PreparedMode {
    pub mode: Mode,
    pub margins: MarginSet,
    pub coupling: CouplingConstraint,
    pub game: GameMatrices,
    pub constants: MonotonicityConstants,
    pub params: SolverParams,
    pub feasibility: FeasibilityReport,
}

/// Margins, coupling, Slater check and step sizes for `mode`.
pub fn prepare_mode(cfg: &MicrogridConfig, mode: Mode, opts: &RunOptions) -> Result<PreparedMode, ExperimentError> {
    let margins = match mode {
        Mode::Stochastic => MarginSet::compute(cfg)?,
        Mode::DetLower | Mode::DetUpper => MarginSet::zero(cfg.horizon),
    };
    let coupling = build_coupling(cfg, &margins, mode)?;
    let feasibility = feasibility_search(&coupling, &local_boxes(cfg));
    if !feasibility.strictly_feasible {
        if opts.allow_nonslater {
            log::warn!("{mode}: no strictly feasible point found; solving anyway");
        } else {
            return Err(ExperimentError::Infeasible {
                mode,
                min_max_violation: feasibility.min_max_violation,
            });
        }
    }
    let game = build_cost(cfg);
    let constants = configured_constants(cfg)?;
    let mut params = configured_step_sizes(cfg, &constants, &coupling)?;
    params.variant = opts.variant;
    Ok(PreparedMode {
        mode,
        margins,
        coupling,
        game,
        constants,
        params,
        feasibility,
    })
}

/// Solves a mode with the consistent semi-decentralized scheme.
pub fn run_mode(cfg: &MicrogridConfig, mode: Mode) -> Result<ModeResult, ExperimentError> {
    run_mode_with(cfg, mode, &RunOptions::default())
}

pub fn run_mode_with(cfg: &MicrogridConfig, mode: Mode, opts: &RunOptions) -> Result<ModeResult, ExperimentError> {
    let p = prepare_mode(cfg, mode, opts)?;
    let gne = solve(cfg, &p.game, &p.coupling, &p.params, opts.algorithm, &opts.solve)?;
    let agg = gne.u_star.aggregate();
    let grid_exchange_mean = cfg
        .aggregate_demand_mean()
        .iter()
        .zip(&agg)
        .map(|(d, s)| d - s)
        .collect();
    let soc_mean = simulate_soc_aggregate(cfg, &agg, &cfg.renewable_mean());
    let result = ModeResult {
        mode,
        gne,
        margins: p.margins,
        constants: p.constants,
        params: p.params,
        feasibility: p.feasibility,
        coupling: p.coupling,
        grid_exchange_mean,
        soc_mean,
    };
    if result.gne.converged {
        Ok(result)
    } else {
        Err(ExperimentError::NotConverged(Box::new(result)))
    }
}

/// Empirical violation frequencies of the original chance constraints.
#[derive(Clone, Debug, PartialEq)]
pub struct ViolationReport {
    pub samples: usize,
    /// `Pr{x^t outside [x_min, x_max]}` for `t = 1..=tau`.
    pub soc_rate: Vec<f64>,
    pub soc_se: Vec<f64>,
    /// `Pr{|x^tau - r| > epsilon}`.
    pub final_rate: f64,
    pub final_se: f64,
    /// `Pr{g^t outside [0, g_max]}` for `t = 0..tau`.
    pub grid_rate: Vec<f64>,
    pub grid_se: Vec<f64>,
}

fn standard_error(p: f64, n: usize) -> f64 {
    (p * (1.0 - p) / n as f64).sqrt()
}

#[derive(Clone, Default)]
struct Counts {
    soc: Vec<u64>,
    fin: u64,
    grid: Vec<u64>,
}

impl Counts {
    fn new(tau: usize) -> Self {
        Self {
            soc: vec![0; tau],
            fin: 0,
            grid: vec![0; tau],
        }
    }

    fn merge(mut self, other: Counts) -> Counts {
        for (a, b) in self.soc.iter_mut().zip(other.soc) {
            *a += b;
        }
        for (a, b) in self.grid.iter_mut().zip(other.grid) {
            *a += b;
        }
        self.fin += other.fin;
        self
    }
}

/// Scenario `index` of the Monte Carlo stream for `seed`; the same index
/// gives the same draw for every mode.
pub fn monte_carlo_scenario(cfg: &MicrogridConfig, seed: u64, index: usize) -> ScenarioDraw {
    indexed_scenario(cfg, seed, index as u64)
}

pub fn montecarlo_validate(
    cfg: &MicrogridConfig,
    u: &Strategies,
    samples: usize,
    seed: u64,
) -> Result<ViolationReport, ExperimentError> {
    if samples == 0 {
        return Err(ExperimentError::NoSamples);
    }
    let tau = cfg.horizon;
    let agg = u.aggregate();
    let bat = &cfg.battery;
    let ch = &cfg.chance;
    // Integer counts make the reduction order irrelevant.
    let counts = (0..samples)
        .into_par_iter()
        .fold(
            || Counts::new(tau),
            |mut c, idx| {
                let s = monte_carlo_scenario(cfg, seed, idx);
                let x = simulate_soc_aggregate(cfg, &agg, &s.renewable);
                for t in 1..=tau {
                    if x[t] < bat.x_min || x[t] > bat.x_max {
                        c.soc[t - 1] += 1;
                    }
                }
                if (x[tau] - ch.r_target).abs() > ch.epsilon {
                    c.fin += 1;
                }
                let d = s.aggregate_demand();
                for t in 0..tau {
                    let g = d[t] - agg[t];
                    if g < 0.0 || g > ch.g_max {
                        c.grid[t] += 1;
                    }
                }
                c
            },
        )
        .reduce(|| Counts::new(tau), Counts::merge);

    let n = samples as f64;
    let rate = |k: u64| k as f64 / n;
    let soc_rate: Vec<f64> = counts.soc.iter().map(|&k| rate(k)).collect();
    let grid_rate: Vec<f64> = counts.grid.iter().map(|&k| rate(k)).collect();
    let final_rate = rate(counts.fin);
    Ok(ViolationReport {
        samples,
        soc_se: soc_rate.iter().map(|&p| standard_error(p, samples)).collect(),
        grid_se: grid_rate.iter().map(|&p| standard_error(p, samples)).collect(),
        final_se: standard_error(final_rate, samples),
        soc_rate,
        final_rate,
        grid_rate,
    })
}

/// Realized total costs per mode on paired scenarios.
#[derive(Clone, Debug, PartialEq)]
pub struct CostHistogram {
    pub modes: Vec<Mode>,
    /// `costs[m][s]`: total cost of mode `m` in scenario `s`.
    pub costs: Vec<Vec<f64>>,
    pub bin_edges: Vec<f64>,
    /// `counts[m][b]`
    pub counts: Vec<Vec<usize>>,
    pub means: Vec<f64>,
    pub standard_errors: Vec<f64>,
}

impl CostHistogram {
    pub fn mean_of(&self, mode: Mode) -> Option<f64> {
        self.modes.iter().position(|&m| m == mode).map(|i| self.means[i])
    }
}

pub fn montecarlo_costs(
    cfg: &MicrogridConfig,
    mode_results: &[ModeResult],
    samples: usize,
    seed: u64,
) -> Result<CostHistogram, ExperimentError> {
    let inputs: Vec<(Mode, &Strategies)> = mode_results.iter().map(|r| (r.mode, &r.gne.u_star)).collect();
    montecarlo_costs_for(cfg, &inputs, samples, seed)
}

pub fn montecarlo_costs_for(
    cfg: &MicrogridConfig,
    strategies: &[(Mode, &Strategies)],
    samples: usize,
    seed: u64,
) -> Result<CostHistogram, ExperimentError> {
    if samples == 0 {
        return Err(ExperimentError::NoSamples);
    }
    // One row per scenario, collected in index order.
    let per_scenario: Vec<Vec<f64>> = (0..samples)
        .into_par_iter()
        .map(|idx| {
            let s = monte_carlo_scenario(cfg, seed, idx);
            strategies
                .iter()
                .map(|(_, u)| crate::game::realized_total_cost(cfg, u, &s))
                .collect()
        })
        .collect();
    let costs: Vec<Vec<f64>> = (0..strategies.len())
        .map(|m| per_scenario.iter().map(|row| row[m]).collect())
        .collect();
    let means: Vec<f64> = costs.iter().map(|c| c.iter().sum::<f64>() / samples as f64).collect();
    let standard_errors = costs
        .iter()
        .zip(&means)
        .map(|(c, m)| {
            if samples < 2 {
                return 0.0;
            }
            let var = c.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (samples - 1) as f64;
            (var / samples as f64).sqrt()
        })
        .collect();
    let pooled: Vec<f64> = costs.iter().flatten().copied().collect();
    let bin_edges = freedman_diaconis_edges(&pooled);
    let counts = costs.iter().map(|c| bin_counts(c, &bin_edges)).collect();
    Ok(CostHistogram {
        modes: strategies.iter().map(|(m, _)| *m).collect(),
        costs,
        bin_edges,
        counts,
        means,
        standard_errors,
    })
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

const MAX_BINS: usize = 1000;

/// Bin edges with the Freedman–Diaconis width `2 IQR n^{-1/3}`.
pub fn freedman_diaconis_edges(data: &[f64]) -> Vec<f64> {
    if data.is_empty() {
        return vec![0.0, 1.0];
    }
    let mut sorted = data.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (lo, hi) = (sorted[0], sorted[sorted.len() - 1]);
    let iqr = quantile(&sorted, 0.75) - quantile(&sorted, 0.25);
    let width = 2.0 * iqr / (sorted.len() as f64).cbrt();
    if hi <= lo || width <= 0.0 {
        let pad = if lo == 0.0 { 0.5 } else { 0.5 * lo.abs() * 1e-9 };
        return if hi > lo { vec![lo, hi] } else { vec![lo - pad, lo + pad] };
    }
    let bins = (((hi - lo) / width).ceil() as usize).clamp(1, MAX_BINS);
    let step = (hi - lo) / bins as f64;
    let mut edges: Vec<f64> = (0..bins).map(|b| lo + b as f64 * step).collect();
    edges.push(hi);
    edges
}

/// Counts per bin; the last bin is closed on the right.
pub fn bin_counts(data: &[f64], edges: &[f64]) -> Vec<usize> {
    let bins = edges.len() - 1;
    let mut counts = vec![0; bins];
    for &x in data {
        if x < edges[0] || x > edges[bins] {
            continue;
        }
        let b = edges.partition_point(|&e| e <= x).saturating_sub(1).min(bins - 1);
        counts[b] += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures::small_config;
    use crate::model::BoundedRV;

    #[test]
    fn no_flow_keeps_soc() {
        let cfg = small_config(2, 4);
        let s = ScenarioDraw {
            renewable: vec![0.0; 4],
            demand: vec![vec![1.0; 4]; 2],
        };
        assert_eq!(simulate_soc(&cfg, &Strategies::zeros(2, 4), &s), vec![0.5; 5]);
    }

    #[test]
    fn two_step_hand_recursion() {
        let mut cfg = small_config(1, 2);
        cfg.battery.eta = 1.0;
        let s = ScenarioDraw {
            renewable: vec![0.1, 0.1],
            demand: vec![vec![1.0, 1.0]],
        };
        let x = simulate_soc(&cfg, &Strategies::from_rows(&[vec![0.2, 0.0]]), &s);
        let expect = [0.5, 0.4, 0.5];
        for (a, b) in x.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn degenerate_supports_never_violate() {
        let mut cfg = small_config(2, 3);
        cfg.renewable = vec![BoundedRV::degenerate(0.1); 3];
        cfg.demand = vec![vec![BoundedRV::degenerate(2.0); 3]; 2];
        let u = Strategies::filled(2, 3, 0.1);
        let rep = montecarlo_validate(&cfg, &u, 500, 1).unwrap();
        assert!(rep.soc_rate.iter().chain(&rep.grid_rate).all(|&r| r == 0.0));
        assert_eq!(rep.final_rate, 0.0);
    }

    #[test]
    fn identical_strategies_give_identical_histograms() {
        let cfg = small_config(2, 3);
        let u = Strategies::filled(2, 3, 0.4);
        let h = montecarlo_costs_for(&cfg, &[(Mode::Stochastic, &u), (Mode::DetUpper, &u)], 200, 3).unwrap();
        assert_eq!(h.costs[0], h.costs[1]);
        assert_eq!(h.counts[0], h.counts[1]);
        assert_eq!(h.counts[0].iter().sum::<usize>(), 200);
    }

    #[test]
    fn zero_samples_rejected() {
        let cfg = small_config(1, 1);
        let u = Strategies::zeros(1, 1);
        assert!(matches!(montecarlo_validate(&cfg, &u, 0, 0), Err(ExperimentError::NoSamples)));
    }

    #[test]
    fn histogram_edges_cover_data() {
        let data: Vec<f64> = (0..100).map(|k| (k as f64).sqrt()).collect();
        let edges = freedman_diaconis_edges(&data);
        assert_eq!(edges[0], 0.0);
        assert_eq!(*edges.last().unwrap(), 99f64.sqrt());
        assert_eq!(bin_counts(&data, &edges).iter().sum::<usize>(), 100);
        assert_eq!(bin_counts(&[3.0; 4], &freedman_diaconis_edges(&[3.0; 4])), vec![4]);
    }
}
