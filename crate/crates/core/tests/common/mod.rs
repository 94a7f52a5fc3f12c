#![allow(dead_code)]

use std::path::PathBuf;

use microgrid_gne::model::{
    BatteryParams, ChanceSpec, ExperimentSettings, SolverSettings, TariffCostParams,
};
use microgrid_gne::{load_config_file, BoundedRV, CouplingConstraint, DependencyGraph, MicrogridConfig, Mode};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn reference_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("examples/reference.cfg")
}

pub fn reference_config() -> MicrogridConfig {
    load_config_file(&reference_path()).expect("reference config loads")
}

/// Knobs for a small synthetic instance.
#[derive(Clone, Debug)]
pub struct Toy {
    pub n: usize,
    pub tau: usize,
    pub rho: f64,
    pub u_max: f64,
    pub alpha: f64,
    pub beta: f64,
    pub k_c: f64,
    pub k_tou: f64,
    pub demand: f64,
    pub renewable: f64,
    pub deviation: f64,
    pub g_max: f64,
}

impl Default for Toy {
    fn default() -> Self {
        Self {
            n: 2,
            tau: 3,
            rho: 0.1,
            u_max: 1.0,
            alpha: 1.0,
            beta: 0.5,
            k_c: 0.1,
            k_tou: 3.0,
            demand: 2.0,
            renewable: 0.2,
            deviation: 0.25,
            g_max: 100.0,
        }
    }
}

impl Toy {
    pub fn build(&self) -> MicrogridConfig {
        let (n, tau) = (self.n, self.tau);
        let dev = |m: f64| BoundedRV::symmetric(m, self.deviation);
        MicrogridConfig {
            n_agents: n,
            horizon: tau,
            battery: BatteryParams {
                x0: 0.5,
                x_min: 0.1,
                x_max: 0.9,
                capacity: 1.0 / self.rho,
                eta: self.rho,
                dt: 1.0,
                u_max: vec![self.u_max; n],
            },
            chance: ChanceSpec {
                delta_x: vec![0.8; tau],
                delta_x_tilde: vec![0.05; tau],
                delta_final: 0.9,
                delta_final_tilde: 0.05,
                delta_g: vec![0.8; tau],
                delta_g_tilde: vec![0.05; tau],
                r_target: 0.5,
                epsilon: 0.3,
                g_max: self.g_max,
                nu_r: vec![1.0; tau],
                nu_d: vec![1.0; tau],
            },
            tariff: TariffCostParams {
                k_tou: vec![self.k_tou; tau],
                k_c: self.k_c,
                alpha_dch: self.alpha,
                beta_dch: self.beta,
            },
            renewable: vec![dev(self.renewable); tau],
            demand: vec![vec![dev(self.demand); tau]; n],
            renewable_dependency: DependencyGraph::edgeless(tau),
            demand_dependency: DependencyGraph::edgeless(n),
            solver: SolverSettings::default(),
            experiment: ExperimentSettings::default(),
        }
    }
}

/// Random small instance with heterogeneous demands and tariffs.
pub fn fuzzed_config(seed: u64, max_n: usize, max_tau: usize) -> MicrogridConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=max_n);
    let tau = rng.random_range(1..=max_tau);
    let mut cfg = Toy {
        n,
        tau,
        alpha: rng.random_range(0.2..2.0),
        k_c: rng.random_range(0.0..0.5),
        ..Toy::default()
    }
    .build();
    cfg.tariff.k_tou = (0..tau).map(|_| rng.random_range(1.0..6.0)).collect();
    for row in &mut cfg.demand {
        for d in row.iter_mut() {
            *d = BoundedRV::symmetric(rng.random_range(0.5..3.0), 0.25);
        }
    }
    // Tight enough that some grid-upper rows bind.
    let peak = cfg.aggregate_demand_mean().iter().copied().fold(0.0, f64::max);
    cfg.chance.g_max = peak - rng.random_range(0.0..0.5 * n as f64);
    cfg
}

pub fn random_vec(rng: &mut ChaCha8Rng, len: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(lo..hi)).collect()
}

/// `Gamma = (2a + k_c) I + k_c (11' (x) I_tau)` built entry by entry.
pub fn dense_gamma(n: usize, tau: usize, alpha: f64, kc: f64) -> DMatrix<f64> {
    DMatrix::from_fn(n * tau, n * tau, |r, c| {
        let same_t = r % tau == c % tau;
        let mut v = if same_t { kc } else { 0.0 };
        if r == c {
            v += 2.0 * alpha + kc;
        }
        v
    })
}

pub fn sorted_eigenvalues(m: DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = SymmetricEigen::new(m).eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

/// Exact variational equilibrium of a two-agent, single-step game.
///
/// `Gamma` is symmetric, so the equilibrium minimizes the potential
/// `0.5 u' Gamma u + Lambda' u` over the box and the aggregate interval
/// implied by the coupling rows.
pub struct TwoAgentOracle {
    gamma: [[f64; 2]; 2],
    lambda: [f64; 2],
    ub: [f64; 2],
    s_lo: f64,
    s_hi: f64,
}

impl TwoAgentOracle {
    pub fn new(cfg: &MicrogridConfig, cc: &CouplingConstraint) -> Self {
        assert_eq!((cfg.n_agents, cfg.horizon), (2, 1));
        let (a, kc) = (cfg.tariff.alpha_dch, cfg.tariff.k_c);
        let d: Vec<f64> = (0..2).map(|i| cfg.demand[i][0].mean).collect();
        let total = d[0] + d[1];
        // Own derivative of the expected cost at u = 0.
        let lambda = [0, 1].map(|i| -cfg.tariff.k_tou[0] - kc * d[i] - kc * total + cfg.tariff.beta_dch);
        let (mut s_lo, mut s_hi) = (f64::NEG_INFINITY, f64::INFINITY);
        for r in 0..cc.rows() {
            let (coef, b) = (cc.a.get(r, 0), cc.b[r]);
            if coef > 0.0 {
                s_hi = s_hi.min(b / coef);
            } else if coef < 0.0 {
                s_lo = s_lo.max(b / coef);
            }
        }
        Self {
            gamma: [[2.0 * a + 2.0 * kc, kc], [kc, 2.0 * a + 2.0 * kc]],
            lambda,
            ub: [cfg.battery.u_max[0], cfg.battery.u_max[1]],
            s_lo,
            s_hi,
        }
    }

    fn potential(&self, u: [f64; 2]) -> f64 {
        let g = &self.gamma;
        0.5 * (g[0][0] * u[0] * u[0] + 2.0 * g[0][1] * u[0] * u[1] + g[1][1] * u[1] * u[1])
            + self.lambda[0] * u[0]
            + self.lambda[1] * u[1]
    }

    fn grad(&self, u: [f64; 2]) -> [f64; 2] {
        let g = &self.gamma;
        [
            g[0][0] * u[0] + g[0][1] * u[1] + self.lambda[0],
            g[1][0] * u[0] + g[1][1] * u[1] + self.lambda[1],
        ]
    }

    /// Box-constrained minimizer by enumerating the nine bound patterns.
    fn box_minimizer(&self) -> [f64; 2] {
        let mut best: Option<[f64; 2]> = None;
        for s0 in 0..3 {
            for s1 in 0..3 {
                let fix = |s: usize, i: usize| match s {
                    0 => Some(0.0),
                    1 => Some(self.ub[i]),
                    _ => None,
                };
                let (f0, f1) = (fix(s0, 0), fix(s1, 1));
                let g = &self.gamma;
                let u = match (f0, f1) {
                    (Some(a), Some(b)) => [a, b],
                    (Some(a), None) => [a, -(g[1][0] * a + self.lambda[1]) / g[1][1]],
                    (None, Some(b)) => [-(g[0][1] * b + self.lambda[0]) / g[0][0], b],
                    (None, None) => {
                        let det = g[0][0] * g[1][1] - g[0][1] * g[1][0];
                        [
                            (-self.lambda[0] * g[1][1] + self.lambda[1] * g[0][1]) / det,
                            (-self.lambda[1] * g[0][0] + self.lambda[0] * g[1][0]) / det,
                        ]
                    }
                };
                let inside = (0..2).all(|i| u[i] >= -1e-12 && u[i] <= self.ub[i] + 1e-12);
                let gr = self.grad(u);
                let kkt = [(s0, 0), (s1, 1)].iter().all(|&(s, i)| match s {
                    0 => gr[i] >= -1e-12,
                    1 => gr[i] <= 1e-12,
                    _ => true,
                });
                if inside && kkt {
                    best = Some(u);
                }
            }
        }
        best.expect("strictly convex box problem has a KKT point")
    }

    /// Minimizer along `u0 + u1 = s`, clamped to the box.
    fn on_line(&self, s: f64) -> Option<[f64; 2]> {
        let lo = (s - self.ub[1]).max(0.0);
        let hi = self.ub[0].min(s);
        if lo > hi {
            return None;
        }
        // phi(x) = potential([x, s - x]) is a 1-D quadratic.
        let g = &self.gamma;
        let curv = g[0][0] - 2.0 * g[0][1] + g[1][1];
        let slope0 = g[0][1] * s - g[1][1] * s + self.lambda[0] - self.lambda[1];
        let x = (-slope0 / curv).clamp(lo, hi);
        Some([x, s - x])
    }

    pub fn solve(&self) -> [f64; 2] {
        let u = self.box_minimizer();
        let s = u[0] + u[1];
        if s >= self.s_lo && s <= self.s_hi {
            return u;
        }
        let target = if s < self.s_lo { self.s_lo } else { self.s_hi };
        self.on_line(target).expect("coupled set is nonempty")
    }

    /// Brute-force check on a grid near the candidate.
    pub fn grid_confirms(&self, u: [f64; 2]) -> bool {
        let p = self.potential(u);
        let h = 1e-4;
        for a in -50..=50 {
            for b in -50..=50 {
                let v = [u[0] + a as f64 * h, u[1] + b as f64 * h];
                let s = v[0] + v[1];
                let feasible = (0..2).all(|i| v[i] >= 0.0 && v[i] <= self.ub[i]) && s >= self.s_lo && s <= self.s_hi;
                if feasible && self.potential(v) < p - 1e-12 {
                    return false;
                }
            }
        }
        true
    }
}

pub fn two_agent_instances() -> Vec<(MicrogridConfig, Mode, &'static str)> {
    let base = Toy {
        n: 2,
        tau: 1,
        k_tou: 2.0,
        ..Toy::default()
    };
    let mut hetero = Toy { k_tou: 2.5, ..base.clone() }.build();
    hetero.demand[1][0] = BoundedRV::symmetric(3.0, 0.25);
    vec![
        (Toy { k_tou: 1.5, ..base.clone() }.build(), Mode::Stochastic, "interior"),
        (Toy { k_tou: 1.0, g_max: 3.5, ..base.clone() }.build(), Mode::Stochastic, "grid-upper"),
        (Toy { k_tou: 4.0, ..base.clone() }.build(), Mode::Stochastic, "grid-lower"),
        (Toy { k_tou: 5.0, ..base.clone() }.build(), Mode::DetUpper, "box"),
        (Toy { k_tou: 1.0, g_max: 3.2, ..base }.build(), Mode::DetUpper, "grid-upper-det"),
        (hetero, Mode::Stochastic, "heterogeneous"),
    ]
}

