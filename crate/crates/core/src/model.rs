//! Game instance: battery, tariff, chance-constraint budgets and the random
//! inputs, plus scenario sampling.

use std::collections::BTreeSet;
use std::fmt;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::solver::{Algorithm, Variant};

/// A random variable with bounded support `[lower, upper]` and known mean.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundedRV {
    pub lower: f64,
    pub upper: f64,
    pub mean: f64,
}

impl BoundedRV {
    pub fn new(lower: f64, upper: f64, mean: f64) -> Self {
        Self { lower, upper, mean }
    }

    /// Support `[mean(1 - dev), mean(1 + dev)]`.
    pub fn symmetric(mean: f64, deviation: f64) -> Self {
        let half = (mean * deviation).abs();
        Self {
            lower: mean - half,
            upper: mean + half,
            mean,
        }
    }

    pub fn degenerate(value: f64) -> Self {
        Self::new(value, value, value)
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn is_valid(&self) -> bool {
        self.lower.is_finite()
            && self.upper.is_finite()
            && self.mean.is_finite()
            && self.lower <= self.mean
            && self.mean <= self.upper
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }

    /// Second moment under the uniform sampling model.
    pub fn uniform_second_moment(&self) -> f64 {
        self.mean * self.mean + self.width() * self.width() / 12.0
    }

    /// Uniform draw on the support. A zero-width support returns `lower` exactly.
    pub fn sample<R: RngExt + ?Sized>(&self, rng: &mut R) -> f64 {
        let w = self.width();
        if w <= 0.0 {
            return self.lower;
        }
        let x = self.lower + w * rng.random::<f64>();
        x.min(self.upper)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GraphError {
    #[error("edge ({0}, {1}) references a node outside 0..{2}")]
    NodeOutOfRange(usize, usize, usize),
    #[error("self-loop on node {0}")]
    SelfLoop(usize),
}

/// Undirected dependency graph between random variables.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct DependencyGraph {
    node_count: usize,
    edges: BTreeSet<(usize, usize)>,
}

impl DependencyGraph {
    pub fn new(
        node_count: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self, GraphError> {
        let mut set = BTreeSet::new();
        for (a, b) in edges {
            if a >= node_count || b >= node_count {
                return Err(GraphError::NodeOutOfRange(a, b, node_count));
            }
            if a == b {
                return Err(GraphError::SelfLoop(a));
            }
            set.insert((a.min(b), a.max(b)));
        }
        Ok(Self {
            node_count,
            edges: set,
        })
    }

    pub fn edgeless(node_count: usize) -> Self {
        Self {
            node_count,
            edges: BTreeSet::new(),
        }
    }

    pub fn complete(node_count: usize) -> Self {
        let edges = (0..node_count)
            .flat_map(|a| (a + 1..node_count).map(move |b| (a, b)))
            .collect();
        Self { node_count, edges }
    }

    pub fn cycle(node_count: usize) -> Self {
        let edges = (0..node_count)
            .map(|a| (a, (a + 1) % node_count))
            .filter(|(a, b)| a != b);
        Self::new(node_count, edges.collect::<Vec<_>>()).expect("cycle edges are valid")
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.edges.contains(&(a.min(b), a.max(b)))
    }

    pub fn neighbors(&self, v: usize) -> Vec<usize> {
        self.edges
            .iter()
            .filter_map(|&(a, b)| {
                if a == v {
                    Some(b)
                } else if b == v {
                    Some(a)
                } else {
                    None
                }
            })
            .collect()
    }

    /// Subgraph induced by nodes `0..k`.
    pub fn induced_prefix(&self, k: usize) -> DependencyGraph {
        let k = k.min(self.node_count);
        DependencyGraph {
            node_count: k,
            edges: self
                .edges
                .iter()
                .copied()
                .filter(|&(_, b)| b < k)
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatteryParams {
    pub x0: f64,
    pub x_min: f64,
    pub x_max: f64,
    pub capacity: f64,
    /// Per-unit efficiency, so that SoC is a fraction of capacity.
    pub eta: f64,
    pub dt: f64,
    /// Per-agent discharge limit.
    pub u_max: Vec<f64>,
}

impl BatteryParams {
    /// `rho = eta * dt`, the SoC change per unit of net power over one step.
    pub fn rho(&self) -> f64 {
        self.eta * self.dt
    }
}

/// Probability budgets and thresholds of the chance constraints.
///
/// `delta_x`, `delta_x_tilde` and `nu_r` are indexed by `t = 1..=tau`
/// (position `t - 1`); `delta_g`, `delta_g_tilde` and `nu_d` by `t = 0..tau`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChanceSpec {
    pub delta_x: Vec<f64>,
    pub delta_x_tilde: Vec<f64>,
    pub delta_final: f64,
    pub delta_final_tilde: f64,
    pub delta_g: Vec<f64>,
    pub delta_g_tilde: Vec<f64>,
    pub r_target: f64,
    pub epsilon: f64,
    pub g_max: f64,
    pub nu_r: Vec<f64>,
    pub nu_d: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TariffCostParams {
    pub k_tou: Vec<f64>,
    pub k_c: f64,
    pub alpha_dch: f64,
    pub beta_dch: f64,
}

/// Solver knobs carried by the configuration file.
#[derive(Clone, Debug, PartialEq)]
pub struct SolverSettings {
    pub algorithm: Algorithm,
    pub variant: Variant,
    /// Pinned strong-monotonicity constant; overrides `zeta_fraction`.
    pub zeta: Option<f64>,
    pub zeta_fraction: f64,
    /// Per-agent step sizes; override `alpha_fraction`.
    pub alpha: Option<Vec<f64>>,
    pub alpha_fraction: f64,
    /// Pinned coordinator step; overrides `gamma_fraction`.
    pub gamma: Option<f64>,
    pub gamma_fraction: f64,
    pub eps_u: f64,
    pub eps_lambda: f64,
    pub max_iters: usize,
    pub log_stride: usize,
    /// Lipschitz constant quoted alongside the instance, reported next to the computed one.
    pub reported_lipschitz: Option<f64>,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::SemiDecentralized,
            variant: Variant::Consistent,
            zeta: None,
            zeta_fraction: 0.99,
            alpha: None,
            alpha_fraction: 0.9,
            gamma: None,
            gamma_fraction: 0.9,
            eps_u: 1e-6,
            eps_lambda: 1e-6,
            max_iters: 100_000,
            log_stride: 1,
            reported_lipschitz: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSettings {
    pub seed: u64,
    pub validation_samples: usize,
    pub cost_samples: usize,
}

impl Default for ExperimentSettings {
    fn default() -> Self {
        Self {
            seed: 0,
            validation_samples: 100_000,
            cost_samples: 1_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MicrogridConfig {
    pub n_agents: usize,
    pub horizon: usize,
    pub battery: BatteryParams,
    pub chance: ChanceSpec,
    pub tariff: TariffCostParams,
    pub renewable: Vec<BoundedRV>,
    /// `demand[i][t]`
    pub demand: Vec<Vec<BoundedRV>>,
    /// Graph over `r^0..r^{tau-1}`; the prefix `0..t` governs the SoC margin at `t`.
    pub renewable_dependency: DependencyGraph,
    /// Graph over the agents' demands at a single time step.
    pub demand_dependency: DependencyGraph,
    pub solver: SolverSettings,
    pub experiment: ExperimentSettings,
}

impl MicrogridConfig {
    pub fn rho(&self) -> f64 {
        self.battery.rho()
    }

    pub fn renewable_mean(&self) -> Vec<f64> {
        self.renewable.iter().map(|r| r.mean).collect()
    }

    pub fn renewable_widths(&self) -> Vec<f64> {
        self.renewable.iter().map(BoundedRV::width).collect()
    }

    pub fn demand_mean(&self, i: usize) -> Vec<f64> {
        self.demand[i].iter().map(|d| d.mean).collect()
    }

    /// `sum_j mu_{d_j}^t`
    pub fn aggregate_demand_mean(&self) -> Vec<f64> {
        self.aggregate_demand_by(|d| d.mean)
    }

    pub fn aggregate_demand_by(&self, f: impl Fn(&BoundedRV) -> f64) -> Vec<f64> {
        (0..self.horizon)
            .map(|t| self.demand.iter().map(|row| f(&row[t])).sum())
            .collect()
    }

    pub fn validate(&self) -> ValidationReport {
        validate(self)
    }

    pub fn sample_scenario(&self, seed: u64) -> ScenarioDraw {
        sample_scenario(self, seed)
    }
}

/// One realization of all random inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioDraw {
    pub renewable: Vec<f64>,
    /// `demand[i][t]`
    pub demand: Vec<Vec<f64>>,
}

impl ScenarioDraw {
    pub fn aggregate_demand(&self) -> Vec<f64> {
        let tau = self.renewable.len();
        (0..tau)
            .map(|t| self.demand.iter().map(|row| row[t]).sum())
            .collect()
    }

    pub fn within_support(&self, cfg: &MicrogridConfig) -> bool {
        self.renewable
            .iter()
            .zip(&cfg.renewable)
            .all(|(x, rv)| rv.contains(*x))
            && self
                .demand
                .iter()
                .zip(&cfg.demand)
                .all(|(row, rvs)| row.iter().zip(rvs).all(|(x, rv)| rv.contains(*x)))
    }
}

/// Draws a scenario from a caller-owned generator.
pub fn draw_scenario<R: RngExt + ?Sized>(cfg: &MicrogridConfig, rng: &mut R) -> ScenarioDraw {
    let renewable = cfg.renewable.iter().map(|rv| rv.sample(rng)).collect();
    let demand = cfg
        .demand
        .iter()
        .map(|row| row.iter().map(|rv| rv.sample(rng)).collect())
        .collect();
    ScenarioDraw { renewable, demand }
}

/// Deterministic scenario for a seed.
pub fn sample_scenario(cfg: &MicrogridConfig, seed: u64) -> ScenarioDraw {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    draw_scenario(cfg, &mut rng)
}

/// Scenario `index` of the stream derived from `seed`. Independent of how
/// many other indices are drawn or in what order.
pub fn indexed_scenario(cfg: &MicrogridConfig, seed: u64, index: u64) -> ScenarioDraw {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    draw_scenario(cfg, &mut rng)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub key: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.key, self.message)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn first(&self) -> Option<&Violation> {
        self.violations.first()
    }

    fn push(&mut self, key: impl Into<String>, message: impl Into<String>) {
        self.violations.push(Violation {
            key: key.into(),
            message: message.into(),
        });
    }

    fn check(&mut self, ok: bool, key: impl Into<String>, message: impl Into<String>) {
        if !ok {
            self.push(key, message);
        }
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "OK");
        }
        for v in &self.violations {
            writeln!(f, "{v}")?;
        }
        Ok(())
    }
}

fn finite_positive(x: f64) -> bool {
    x.is_finite() && x > 0.0
}

fn check_split(
    rep: &mut ValidationReport,
    key: &str,
    key_tilde: &str,
    delta: f64,
    tilde: f64,
    label: &str,
) {
    rep.check(
        (0.0..=1.0).contains(&delta),
        key,
        format!("0 ≤ {label} ≤ 1 violated"),
    );
    rep.check(
        tilde > 0.0 && tilde < 1.0,
        key_tilde,
        format!("0 < {label}~ < 1 violated"),
    );
    let diff = delta - tilde;
    rep.check(
        diff > 0.0 && diff <= 1.0,
        key,
        format!("{label} − {label}~ > 0 required"),
    );
}

/// Lists every violated invariant. An empty report means the instance is usable.
pub fn validate(cfg: &MicrogridConfig) -> ValidationReport {
    let mut rep = ValidationReport::default();
    let n = cfg.n_agents;
    let tau = cfg.horizon;
    rep.check(n >= 1, "agents", "N ≥ 1 violated");
    rep.check(tau >= 1, "horizon", "τ ≥ 1 violated");

    let b = &cfg.battery;
    rep.check(b.x_min < b.x_max, "battery.x_min", "x_min < x_max violated");
    rep.check(
        b.x_min <= b.x0 && b.x0 <= b.x_max,
        "battery.x0",
        "x_min ≤ x0 ≤ x_max violated",
    );
    for (key, v) in [("battery.x0", b.x0), ("battery.x_min", b.x_min), ("battery.x_max", b.x_max)] {
        rep.check((0.0..=1.0).contains(&v), key, "SoC fraction must lie in [0, 1]");
    }
    rep.check(finite_positive(b.capacity), "battery.capacity", "capacity > 0 violated");
    rep.check(finite_positive(b.eta), "battery.eta", "eta > 0 violated");
    rep.check(finite_positive(b.dt), "battery.dt", "dt > 0 violated");
    rep.check(
        b.u_max.len() == n,
        "battery.u_max",
        format!("expected {n} per-agent limits, found {}", b.u_max.len()),
    );
    for (i, &u) in b.u_max.iter().enumerate() {
        rep.check(finite_positive(u), format!("battery.u_max[{i}]"), "u_max > 0 violated");
    }

    let c = &cfg.chance;
    for (key, len) in [
        ("chance.delta_x", c.delta_x.len()),
        ("chance.delta_x_tilde", c.delta_x_tilde.len()),
        ("chance.delta_g", c.delta_g.len()),
        ("chance.delta_g_tilde", c.delta_g_tilde.len()),
        ("chance.nu_r", c.nu_r.len()),
        ("chance.nu_d", c.nu_d.len()),
    ] {
        rep.check(len == tau, key, format!("expected {tau} entries, found {len}"));
    }
    for t in 0..c.delta_x.len().min(c.delta_x_tilde.len()) {
        check_split(
            &mut rep,
            &format!("chance.delta_x[{t}]"),
            &format!("chance.delta_x_tilde[{t}]"),
            c.delta_x[t],
            c.delta_x_tilde[t],
            "δ_x",
        );
    }
    check_split(
        &mut rep,
        "chance.delta_final",
        "chance.delta_final_tilde",
        c.delta_final,
        c.delta_final_tilde,
        "δ_final",
    );
    for t in 0..c.delta_g.len().min(c.delta_g_tilde.len()) {
        check_split(
            &mut rep,
            &format!("chance.delta_g[{t}]"),
            &format!("chance.delta_g_tilde[{t}]"),
            c.delta_g[t],
            c.delta_g_tilde[t],
            "δ_g",
        );
    }
    rep.check(
        b.x_min <= c.r_target && c.r_target <= b.x_max,
        "chance.r_target",
        "x_min ≤ r ≤ x_max violated",
    );
    let eps_cap = (c.r_target - b.x_min).min(b.x_max - c.r_target);
    rep.check(
        c.epsilon > 0.0 && c.epsilon < eps_cap,
        "chance.epsilon",
        format!("ε < min(r−x̲, x̄−r) violated (ε = {}, bound = {eps_cap})", c.epsilon),
    );
    rep.check(finite_positive(c.g_max), "chance.g_max", "g_max > 0 violated");
    for (name, nus) in [("chance.nu_r", &c.nu_r), ("chance.nu_d", &c.nu_d)] {
        for (t, &nu) in nus.iter().enumerate() {
            rep.check(finite_positive(nu), format!("{name}[{t}]"), "ν > 0 violated");
        }
    }

    let tf = &cfg.tariff;
    rep.check(
        tf.k_tou.len() == tau,
        "tariff.k_tou",
        format!("expected {tau} entries, found {}", tf.k_tou.len()),
    );
    rep.check(
        tf.k_tou.iter().all(|k| k.is_finite()),
        "tariff.k_tou",
        "entries must be finite",
    );
    rep.check(finite_positive(tf.k_c), "tariff.k_c", "k_c > 0 violated");
    rep.check(finite_positive(tf.alpha_dch), "tariff.alpha_dch", "alpha_dch > 0 violated");
    rep.check(finite_positive(tf.beta_dch), "tariff.beta_dch", "beta_dch > 0 violated");

    rep.check(
        cfg.renewable.len() == tau,
        "renewable",
        format!("expected {tau} entries, found {}", cfg.renewable.len()),
    );
    for (t, rv) in cfg.renewable.iter().enumerate() {
        rep.check(
            rv.is_valid(),
            format!("renewable[{t}]"),
            "lower ≤ mean ≤ upper violated",
        );
    }
    rep.check(
        cfg.demand.len() == n,
        "demand",
        format!("expected {n} agents, found {}", cfg.demand.len()),
    );
    for (i, row) in cfg.demand.iter().enumerate() {
        rep.check(
            row.len() == tau,
            format!("demand[{i}]"),
            format!("expected {tau} entries, found {}", row.len()),
        );
        for (t, rv) in row.iter().enumerate() {
            rep.check(
                rv.is_valid(),
                format!("demand[{i}][{t}]"),
                "lower ≤ mean ≤ upper violated",
            );
        }
    }
    rep.check(
        cfg.renewable_dependency.node_count() == tau,
        "dependencies.renewable",
        "graph must have one node per time step",
    );
    rep.check(
        cfg.demand_dependency.node_count() == n,
        "dependencies.demand",
        "graph must have one node per agent",
    );

    let s = &cfg.solver;
    if let Some(z) = s.zeta {
        rep.check(finite_positive(z), "solver.zeta", "zeta > 0 violated");
    }
    rep.check(
        s.zeta_fraction > 0.0 && s.zeta_fraction <= 1.0,
        "solver.zeta_fraction",
        "zeta_fraction in (0, 1] violated",
    );
    rep.check(
        s.alpha_fraction > 0.0 && s.alpha_fraction < 1.0,
        "solver.alpha_fraction",
        "alpha_fraction in (0, 1) violated",
    );
    rep.check(
        s.gamma_fraction > 0.0 && s.gamma_fraction < 1.0,
        "solver.gamma_fraction",
        "gamma_fraction in (0, 1) violated",
    );
    if let Some(alpha) = &s.alpha {
        rep.check(
            alpha.len() == n,
            "solver.alpha",
            format!("expected {n} step sizes, found {}", alpha.len()),
        );
        for (i, &a) in alpha.iter().enumerate() {
            rep.check(finite_positive(a), format!("solver.alpha[{i}]"), "alpha > 0 violated");
        }
    }
    if let Some(g) = s.gamma {
        rep.check(finite_positive(g), "solver.gamma", "gamma > 0 violated");
    }
    rep.check(finite_positive(s.eps_u), "solver.eps_u", "eps_u > 0 violated");
    rep.check(finite_positive(s.eps_lambda), "solver.eps_lambda", "eps_lambda > 0 violated");
    rep.check(s.max_iters >= 1, "solver.max_iters", "max_iters ≥ 1 violated");
    rep.check(s.log_stride >= 1, "solver.log_stride", "log_stride ≥ 1 violated");
    rep
}
