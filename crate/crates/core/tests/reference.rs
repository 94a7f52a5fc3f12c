//! Checks on the shipped 20-household reference instance.

mod common;

use std::sync::OnceLock;

use common::reference_config;
use microgrid_gne::chance::{final_soc_margins, MarginSet};
use microgrid_gne::constraints::{feasibility_search, local_boxes};
use microgrid_gne::experiments::{montecarlo_costs, montecarlo_costs_for, montecarlo_validate};
use microgrid_gne::game::{configured_constants, configured_step_sizes, expected_cost};
use microgrid_gne::solver::{check_preconditioner, check_preconditioner_raw, preconditioner_schur_min_eigenvalue};
use microgrid_gne::{build_cost, build_coupling, run_mode, MicrogridConfig, Mode, ModeResult};

struct Solved {
    cfg: MicrogridConfig,
    results: Vec<ModeResult>,
}

fn solved() -> &'static Solved {
    static CELL: OnceLock<Solved> = OnceLock::new();
    CELL.get_or_init(|| {
        let cfg = reference_config();
        let results = Mode::ALL.iter().map(|&m| run_mode(&cfg, m).unwrap()).collect();
        Solved { cfg, results }
    })
}

fn result(mode: Mode) -> &'static ModeResult {
    solved().results.iter().find(|r| r.mode == mode).unwrap()
}

#[test]
fn loads_with_expected_parameters() {
    let cfg = reference_config();
    assert_eq!((cfg.n_agents, cfg.horizon), (20, 24));
    assert_eq!(cfg.tariff.alpha_dch, 8.0);
    assert_eq!(cfg.tariff.beta_dch, 10.0);
    assert_eq!(cfg.tariff.k_c, 0.015);
    assert!(cfg.validate().is_ok());
    let gm = build_cost(&cfg);
    assert_eq!(gm.g_scalar, 8.0);
    assert!((gm.h_scalar - 0.3).abs() < 1e-15);
}

#[test]
fn final_margins_follow_log_ratio() {
    let cfg = reference_config();
    let (q1, q2) = final_soc_margins(&cfg).unwrap();
    let ratio = (0.05f64.ln() / 0.85f64.ln()).sqrt();
    assert!((q1 / q2 - ratio).abs() < 1e-12);
}

#[test]
fn stochastic_rhs_is_shifted_by_margins() {
    let cfg = reference_config();
    let m = MarginSet::compute(&cfg).unwrap();
    let with = build_coupling(&cfg, &m, Mode::Stochastic).unwrap();
    let without = build_coupling(&cfg, &MarginSet::zero(cfg.horizon), Mode::Stochastic).unwrap();
    let stacked: Vec<f64> = m.entries().collect();
    assert_eq!(stacked.len(), with.rows());
    for (j, q) in stacked.iter().enumerate() {
        assert!((without.b[j] - with.b[j] - q).abs() < 1e-9, "row {j}");
    }
    assert_eq!(with.a, without.a);
}

#[test]
fn reference_instance_is_strictly_feasible() {
    let cfg = reference_config();
    for mode in Mode::ALL {
        let m = match mode {
            Mode::Stochastic => MarginSet::compute(&cfg).unwrap(),
            _ => MarginSet::zero(cfg.horizon),
        };
        let cc = build_coupling(&cfg, &m, mode).unwrap();
        assert!(feasibility_search(&cc, &local_boxes(&cfg)).strictly_feasible, "{mode}");
    }
}

#[test]
fn quoted_steps_are_admissible() {
    let cfg = reference_config();
    let mc = configured_constants(&cfg).unwrap();
    assert_eq!(mc.zeta, 4.24);
    assert!(mc.l_f >= 16.315 && mc.l_f <= 16.316);
    let cc = build_coupling(&cfg, &MarginSet::compute(&cfg).unwrap(), Mode::Stochastic).unwrap();
    let p = configured_step_sizes(&cfg, &mc, &cc).unwrap();
    assert_eq!(p.gamma, 5.33e-4);
    assert!(p.gamma < p.gamma_max);
    assert!(check_preconditioner(&p, &cc, cfg.n_agents));
    assert!(check_preconditioner_raw(&p.alpha, p.gamma_max, &cc));
    // Positive definiteness is lost once 1/gamma drops below sum(alpha) * ||A||^2.
    let sigma2 = microgrid_gne::game::spectral_norm(&cc).powi(2);
    let threshold = 1.0 / (p.alpha.iter().sum::<f64>() * sigma2);
    assert!(preconditioner_schur_min_eigenvalue(&p.alpha, 0.99 * threshold, &cc) > 0.0);
    assert!(!check_preconditioner_raw(&p.alpha, 1.01 * threshold, &cc));
}

#[test]
fn every_mode_converges_and_passes_audits() {
    for r in &solved().results {
        assert!(r.gne.converged, "{}", r.mode);
        assert!(r.gne.iterations <= 100_000);
        assert!(r.gne.final_residual_u() <= 1e-6);
        assert!(r.gne.final_residual_lam() <= 1e-6);
        assert!(r.gne.fixed_point_residual <= 1e-6);
        assert!(r.gne.feasibility_max <= 1e-6);
        let viol = r.coupling.violation_of_aggregate(&r.gne.u_star.aggregate());
        assert!(viol.iter().all(|v| *v <= 1e-6));
    }
}

#[test]
fn grid_exchange_balances_demand() {
    let cfg = &solved().cfg;
    let demand = cfg.aggregate_demand_mean();
    for r in &solved().results {
        let agg = r.gne.u_star.aggregate();
        for t in 0..cfg.horizon {
            assert_eq!(r.grid_exchange_mean[t], demand[t] - agg[t]);
        }
    }
}

#[test]
fn discharge_concentrates_in_evening() {
    let agg = result(Mode::Stochastic).gne.u_star.aggregate();
    let evening: f64 = agg[17..=21].iter().sum::<f64>() / 5.0;
    let night: f64 = agg[0..=4].iter().sum::<f64>() / 5.0;
    assert!(evening >= night, "{evening} < {night}");
}

#[test]
fn expected_cost_agrees_with_monte_carlo() {
    let cfg = &solved().cfg;
    let r = result(Mode::Stochastic);
    let expected: f64 = expected_cost(cfg, &r.gne.u_star).unwrap().iter().map(|c| c.total_expected).sum();
    let hist = montecarlo_costs(cfg, std::slice::from_ref(r), 1000, 0).unwrap();
    let (mean, se) = (hist.means[0], hist.standard_errors[0]);
    assert!((mean - expected).abs() <= 2.0 * se, "{mean} vs {expected} (se {se})");
}

#[test]
fn scenario_draws_do_not_depend_on_mode() {
    let cfg = &solved().cfg;
    let u = &result(Mode::Stochastic).gne.u_star;
    let a = montecarlo_costs_for(cfg, &[(Mode::Stochastic, u)], 200, 5).unwrap();
    let b = montecarlo_costs_for(cfg, &[(Mode::DetUpper, u), (Mode::DetLower, u)], 200, 5).unwrap();
    assert_eq!(a.costs[0], b.costs[0]);
    assert_eq!(b.costs[0], b.costs[1]);
    assert_eq!(b.counts[0], b.counts[1]);
}

#[test]
fn violation_rates_are_stable_in_sample_size() {
    let cfg = &solved().cfg;
    let u = &result(Mode::Stochastic).gne.u_star;
    let a = montecarlo_validate(cfg, u, 20_000, 3).unwrap();
    let b = montecarlo_validate(cfg, u, 40_000, 3).unwrap();
    let close = |p: f64, q: f64, se: f64| (p - q).abs() <= 4.0 * se.max(1.0 / 20_000.0);
    for t in 0..cfg.horizon {
        assert!(close(a.soc_rate[t], b.soc_rate[t], a.soc_se[t]));
        assert!(close(a.grid_rate[t], b.grid_rate[t], a.grid_se[t]));
    }
    assert!(close(a.final_rate, b.final_rate, a.final_se));
}

#[test]
fn solution_is_reproducible_under_thread_counts() {
    let cfg = &solved().cfg;
    let u = &result(Mode::Stochastic).gne.u_star;
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let many = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    let a = one.install(|| montecarlo_validate(cfg, u, 5_000, 1).unwrap());
    let b = many.install(|| montecarlo_validate(cfg, u, 5_000, 1).unwrap());
    assert_eq!(a, b);
    let a = one.install(|| montecarlo_costs_for(cfg, &[(Mode::Stochastic, u)], 500, 1).unwrap());
    let b = many.install(|| montecarlo_costs_for(cfg, &[(Mode::Stochastic, u)], 500, 1).unwrap());
    assert_eq!(a, b);
}
