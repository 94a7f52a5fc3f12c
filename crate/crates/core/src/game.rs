//! Quadratic cost structure, pseudo-gradient, monotonicity constants and
//! step-size synthesis.

use thiserror::Error;

use crate::constraints::CouplingConstraint;
use crate::linalg::{dot, Strategies};
use crate::model::{MicrogridConfig, ScenarioDraw};
use crate::solver::{check_preconditioner_raw, Variant};

#[derive(Debug, Error, PartialEq)]
pub enum GameError {
    #[error("strategy shape {got:?} does not match game shape {expected:?}")]
    Shape {
        got: (usize, usize),
        expected: (usize, usize),
    },
    #[error("zeta_fraction {0} outside (0, 1]")]
    ZetaFraction(f64),
    #[error("zeta {zeta} outside (0, {eig_min}]")]
    Zeta { zeta: f64, eig_min: f64 },
    #[error("{name} fraction {value} outside (0, 1)")]
    Fraction { name: &'static str, value: f64 },
    #[error("agent {agent} step size {alpha} outside (0, {bound})")]
    AlphaRange { agent: usize, alpha: f64, bound: f64 },
    #[error("expected {expected} agent step sizes, found {found}")]
    AlphaCount { expected: usize, found: usize },
    #[error("gamma_max = {0} is not positive; agent step sizes are too large")]
    GammaMaxNonPositive(f64),
    #[error("gamma {gamma} outside (0, gamma_max = {gamma_max})")]
    GammaRange { gamma: f64, gamma_max: f64 },
    #[error("preconditioning matrix is not positive definite")]
    NotPositiveDefinite,
}

/// Cost data in the form `J_i = u_i' G u_i + (1/N) u_i' H sum_j u_j + T_i u_i + c_i`,
/// with `G = g_scalar * I` and `H = h_scalar * I`.
#[derive(Clone, Debug, PartialEq)]
pub struct GameMatrices {
    pub g_scalar: f64,
    pub h_scalar: f64,
    /// Row `i` is `T_i`.
    pub t: Strategies,
}

impl GameMatrices {
    pub fn n_agents(&self) -> usize {
        self.t.n_agents()
    }

    pub fn horizon(&self) -> usize {
        self.t.horizon()
    }

    /// Coupling weight `H / N`, equal to `k_c`.
    pub fn k_c(&self) -> f64 {
        self.h_scalar / self.n_agents() as f64
    }

    /// The stacked affine term of the pseudo-gradient.
    pub fn lambda(&self) -> &[f64] {
        self.t.as_flat()
    }

    fn check(&self, u: &Strategies) -> Result<(), GameError> {
        if u.same_shape(&self.t) {
            Ok(())
        } else {
            Err(GameError::Shape {
                got: (u.n_agents(), u.horizon()),
                expected: (self.n_agents(), self.horizon()),
            })
        }
    }
}

pub fn build_cost(cfg: &MicrogridConfig) -> GameMatrices {
    let n = cfg.n_agents;
    let tau = cfg.horizon;
    let tf = &cfg.tariff;
    let total = cfg.aggregate_demand_mean();
    let mut t = Strategies::zeros(n, tau);
    for i in 0..n {
        for k in 0..tau {
            let v = -tf.k_tou[k] - tf.k_c * cfg.demand[i][k].mean - tf.k_c * total[k] + tf.beta_dch;
            t.set(i, k, v);
        }
    }
    GameMatrices {
        g_scalar: tf.alpha_dch,
        h_scalar: n as f64 * tf.k_c,
        t,
    }
}

/// `F(u) = Gamma u + Lambda`, row `i` being `(2a + k_c) u_i + k_c sum_j u_j + T_i`.
pub fn pseudo_gradient(gm: &GameMatrices, u: &Strategies) -> Result<Strategies, GameError> {
    gm.check(u)?;
    let s = u.aggregate();
    let mut out = Strategies::zeros(gm.n_agents(), gm.horizon());
    pseudo_gradient_into(gm, u, &s, &mut out);
    Ok(out)
}

pub(crate) fn pseudo_gradient_into(gm: &GameMatrices, u: &Strategies, s: &[f64], out: &mut Strategies) {
    let kc = gm.k_c();
    let diag = 2.0 * gm.g_scalar + kc;
    for i in 0..gm.n_agents() {
        let (ui, ti) = (u.row(i), gm.t.row(i));
        for (k, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = diag * ui[k] + kc * s[k] + ti[k];
        }
    }
}

/// The two distinct eigenvalues of `Gamma`: `(2a + k_c, 2a + (N+1) k_c)`.
pub fn gamma_eigenvalues(cfg: &MicrogridConfig) -> (f64, f64) {
    let a = cfg.tariff.alpha_dch;
    let kc = cfg.tariff.k_c;
    let n = cfg.n_agents as f64;
    (2.0 * a + kc, 2.0 * a + (n + 1.0) * kc)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MonotonicityConstants {
    pub zeta: f64,
    pub l_f: f64,
    pub eig_min: f64,
    pub eig_max: f64,
}

/// Relative slack keeping the Lipschitz constant strictly above the bound.
pub const LIPSCHITZ_SLACK: f64 = 1e-6;

pub fn monotonicity_constants(
    cfg: &MicrogridConfig,
    zeta_fraction: f64,
) -> Result<MonotonicityConstants, GameError> {
    if !(zeta_fraction > 0.0 && zeta_fraction <= 1.0) {
        return Err(GameError::ZetaFraction(zeta_fraction));
    }
    let (eig_min, eig_max) = gamma_eigenvalues(cfg);
    Ok(MonotonicityConstants {
        zeta: zeta_fraction * eig_min,
        l_f: (1.0 + LIPSCHITZ_SLACK) * eig_max,
        eig_min,
        eig_max,
    })
}

/// Same as [`monotonicity_constants`] with an explicitly chosen `zeta`.
pub fn monotonicity_constants_with_zeta(
    cfg: &MicrogridConfig,
    zeta: f64,
) -> Result<MonotonicityConstants, GameError> {
    let (eig_min, _) = gamma_eigenvalues(cfg);
    if !(zeta > 0.0 && zeta <= eig_min) {
        return Err(GameError::Zeta { zeta, eig_min });
    }
    let mut mc = monotonicity_constants(cfg, 1.0)?;
    mc.zeta = zeta;
    Ok(mc)
}

/// Constants as the config asks for: pinned `zeta` if present, else the fraction.
pub fn configured_constants(cfg: &MicrogridConfig) -> Result<MonotonicityConstants, GameError> {
    match cfg.solver.zeta {
        Some(z) => monotonicity_constants_with_zeta(cfg, z),
        None => monotonicity_constants(cfg, cfg.solver.zeta_fraction),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverParams {
    pub alpha: Vec<f64>,
    pub gamma: f64,
    pub gamma_max: f64,
    pub eps_u: f64,
    pub eps_lambda: f64,
    pub max_iters: usize,
    pub variant: Variant,
    pub log_stride: usize,
}

/// Largest singular value of `A` by power iteration on `A'A`.
pub fn spectral_norm(cc: &CouplingConstraint) -> f64 {
    let a = &cc.a;
    let n = a.cols();
    if n == 0 || a.rows() == 0 {
        return 0.0;
    }
    // Deterministic, non-degenerate start vector.
    let mut x: Vec<f64> = (0..n).map(|k| 1.0 + 0.1 * ((k * 7919) % 13) as f64).collect();
    let mut sigma2 = 0.0;
    for _ in 0..10_000 {
        let nx = dot(&x, &x).sqrt();
        if nx == 0.0 {
            return 0.0;
        }
        x.iter_mut().for_each(|v| *v /= nx);
        let y = a.matvec_transpose(&a.matvec(&x));
        let next = dot(&x, &y);
        x = y;
        if (next - sigma2).abs() <= 1e-14 * next.abs() {
            sigma2 = next;
            break;
        }
        sigma2 = next;
    }
    sigma2.max(0.0).sqrt()
}

/// `||1_N' (x) A||_2 = sqrt(N) * sigma_max(A)`.
pub fn coupling_operator_norm(cc: &CouplingConstraint, n_agents: usize) -> f64 {
    (n_agents as f64).sqrt() * spectral_norm(cc)
}

/// `(1 / ||1' (x) A||^2) * (1 / alpha_max - l_f^2 / (2 zeta))`.
pub fn gamma_max(alpha_max: f64, mc: &MonotonicityConstants, op_norm: f64) -> f64 {
    (1.0 / alpha_max - mc.l_f * mc.l_f / (2.0 * mc.zeta)) / (op_norm * op_norm)
}

/// Upper end of the open interval for agent step sizes, `2 zeta / l_f^2`.
pub fn alpha_bound(mc: &MonotonicityConstants) -> f64 {
    2.0 * mc.zeta / (mc.l_f * mc.l_f)
}

/// Synthesizes `alpha_i` and `gamma`, honoring per-agent and coordinator
/// overrides from the config, and checks the preconditioner.
pub fn step_sizes(
    cfg: &MicrogridConfig,
    mc: &MonotonicityConstants,
    cc: &CouplingConstraint,
    alpha_fraction: f64,
    gamma_fraction: f64,
) -> Result<SolverParams, GameError> {
    for (name, value) in [("alpha", alpha_fraction), ("gamma", gamma_fraction)] {
        if !(value > 0.0 && value < 1.0) {
            return Err(GameError::Fraction { name, value });
        }
    }
    let n = cfg.n_agents;
    let bound = alpha_bound(mc);
    let alpha = match &cfg.solver.alpha {
        Some(a) if a.len() != n => {
            return Err(GameError::AlphaCount {
                expected: n,
                found: a.len(),
            })
        }
        Some(a) => a.clone(),
        None => vec![alpha_fraction * bound; n],
    };
    build_params(cfg, mc, cc, alpha, cfg.solver.gamma, gamma_fraction)
}

/// Validates explicit `alpha` (and optional `gamma`) against the admissible intervals.
pub fn build_params(
    cfg: &MicrogridConfig,
    mc: &MonotonicityConstants,
    cc: &CouplingConstraint,
    alpha: Vec<f64>,
    gamma: Option<f64>,
    gamma_fraction: f64,
) -> Result<SolverParams, GameError> {
    let bound = alpha_bound(mc);
    for (agent, &a) in alpha.iter().enumerate() {
        if !(a > 0.0 && a < bound) {
            return Err(GameError::AlphaRange {
                agent,
                alpha: a,
                bound,
            });
        }
    }
    let alpha_max = alpha.iter().copied().fold(0.0, f64::max);
    let op = coupling_operator_norm(cc, alpha.len());
    let g_max = if op > 0.0 {
        gamma_max(alpha_max, mc, op)
    } else {
        f64::INFINITY
    };
    if !(g_max > 0.0) {
        return Err(GameError::GammaMaxNonPositive(g_max));
    }
    let gamma = match gamma {
        Some(g) => g,
        None if g_max.is_finite() => gamma_fraction * g_max,
        None => 1.0,
    };
    if !(gamma > 0.0 && gamma < g_max) {
        return Err(GameError::GammaRange {
            gamma,
            gamma_max: g_max,
        });
    }
    if !check_preconditioner_raw(&alpha, gamma, cc) {
        return Err(GameError::NotPositiveDefinite);
    }
    let s = &cfg.solver;
    Ok(SolverParams {
        alpha,
        gamma,
        gamma_max: g_max,
        eps_u: s.eps_u,
        eps_lambda: s.eps_lambda,
        max_iters: s.max_iters,
        variant: s.variant,
        log_stride: s.log_stride,
    })
}

/// Step sizes exactly as the config describes them.
pub fn configured_step_sizes(
    cfg: &MicrogridConfig,
    mc: &MonotonicityConstants,
    cc: &CouplingConstraint,
) -> Result<SolverParams, GameError> {
    step_sizes(cfg, mc, cc, cfg.solver.alpha_fraction, cfg.solver.gamma_fraction)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostReport {
    /// Terms that depend on the agent's own strategy:
    /// `sum_t a u_i^2 + k_c u_i sum_j u_j + T_i u_i`.
    pub controllable_cost: f64,
    /// Everything else, `c_i`. Includes the other agents' battery terms.
    pub constant_c: f64,
    pub total_expected: f64,
}

/// Expected cost of every agent, with independent uniform demands.
///
/// Each agent pays its grid bill at the common tariff plus the degradation
/// cost of the whole shared battery.
pub fn expected_cost(cfg: &MicrogridConfig, u: &Strategies) -> Result<Vec<CostReport>, GameError> {
    let n = cfg.n_agents;
    let tau = cfg.horizon;
    if u.n_agents() != n || u.horizon() != tau {
        return Err(GameError::Shape {
            got: (u.n_agents(), u.horizon()),
            expected: (n, tau),
        });
    }
    let gm = build_cost(cfg);
    let tf = &cfg.tariff;
    let (a, beta, kc) = (tf.alpha_dch, tf.beta_dch, tf.k_c);
    let s = u.aggregate();
    let sq: Vec<f64> = (0..tau).map(|t| u.rows().map(|r| r[t] * r[t]).sum()).collect();
    let d_mean = cfg.aggregate_demand_mean();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut controllable = 0.0;
        let mut constant = 0.0;
        for t in 0..tau {
            let di = &cfg.demand[i][t];
            let ui = u.get(i, t);
            controllable += a * ui * ui + kc * s[t] * ui + gm.t.get(i, t) * ui;
            // E{d_i * sum_j d_j} = E{d_i^2} + mu_i * sum_{j != i} mu_j
            let cross = di.uniform_second_moment() + di.mean * (d_mean[t] - di.mean);
            let others = s[t] - ui;
            let others_sq = sq[t] - ui * ui;
            constant += di.mean * tf.k_tou[t] + kc * cross + a * others_sq + (beta - kc * di.mean) * others;
        }
        out.push(CostReport {
            controllable_cost: controllable,
            constant_c: constant,
            total_expected: controllable + constant,
        });
    }
    Ok(out)
}

fn battery_cost(cfg: &MicrogridConfig, u: &Strategies) -> f64 {
    let tf = &cfg.tariff;
    u.as_flat()
        .iter()
        .map(|&x| tf.alpha_dch * x * x + tf.beta_dch * x)
        .sum()
}

/// Realized cost of agent `i` in one scenario.
pub fn realized_agent_cost(cfg: &MicrogridConfig, u: &Strategies, scenario: &ScenarioDraw, i: usize) -> f64 {
    let tf = &cfg.tariff;
    let s = u.aggregate();
    let d = scenario.aggregate_demand();
    let grid: f64 = (0..cfg.horizon)
        .map(|t| {
            let g = d[t] - s[t];
            let gi = scenario.demand[i][t] - u.get(i, t);
            (tf.k_tou[t] + tf.k_c * g) * gi
        })
        .sum();
    grid + battery_cost(cfg, u)
}

/// Sum over agents of the realized costs in one scenario.
pub fn realized_total_cost(cfg: &MicrogridConfig, u: &Strategies, scenario: &ScenarioDraw) -> f64 {
    let tf = &cfg.tariff;
    let s = u.aggregate();
    let d = scenario.aggregate_demand();
    let grid: f64 = (0..cfg.horizon)
        .map(|t| {
            let g = d[t] - s[t];
            (tf.k_tou[t] + tf.k_c * g) * g
        })
        .sum();
    grid + cfg.n_agents as f64 * battery_cost(cfg, u)
}
