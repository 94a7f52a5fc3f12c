mod common;

use common::{fuzzed_config, Toy};
use microgrid_gne::chance::{chromatic_upper_bound, hoeffding_margin, MarginSet};
use microgrid_gne::constraints::{project_box, project_nonneg, RowBlock};
use microgrid_gne::experiments::{simulate_soc, simulate_soc_closed_form};
use microgrid_gne::game::{monotonicity_constants, pseudo_gradient};
use microgrid_gne::linalg::{dot, norm2};
use microgrid_gne::model::{indexed_scenario, sample_scenario};
use microgrid_gne::{
    build_cost, build_coupling, load_config, run_mode, to_toml, BoundedRV, DependencyGraph,
    LocalBox, Mode, Strategies,
};
use proptest::prelude::*;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn strategies(rng: &mut ChaCha8Rng, n: usize, tau: usize, scale: f64) -> Strategies {
    Strategies::from_flat(n, tau, common::random_vec(rng, n * tau, -scale, scale))
}

fn diff(a: &Strategies, b: &Strategies) -> Vec<f64> {
    a.as_flat().iter().zip(b.as_flat()).map(|(x, y)| x - y).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn pseudo_gradient_is_strongly_monotone_and_lipschitz(seed in any::<u64>()) {
        let cfg = fuzzed_config(seed, 6, 6);
        let gm = build_cost(&cfg);
        let mc = monotonicity_constants(&cfg, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let u = strategies(&mut rng, cfg.n_agents, cfg.horizon, 10.0);
        let v = strategies(&mut rng, cfg.n_agents, cfg.horizon, 10.0);
        let fu = pseudo_gradient(&gm, &u).unwrap();
        let fv = pseudo_gradient(&gm, &v).unwrap();
        let du = diff(&u, &v);
        let df = diff(&fu, &fv);
        let d2 = dot(&du, &du);
        prop_assert!(dot(&df, &du) >= mc.zeta * d2 * (1.0 - 1e-12));
        prop_assert!(norm2(&df) <= mc.l_f * d2.sqrt());
    }
}

proptest! {
    #[test]
    fn box_projection_is_idempotent_and_nonexpansive(
        pts in prop::collection::vec((-5.0..5.0f64, -5.0..5.0f64, 0.0..3.0f64, 0.0..3.0f64), 1..12)
    ) {
        let lower: Vec<f64> = pts.iter().map(|p| -p.2).collect();
        let upper: Vec<f64> = pts.iter().map(|p| p.3).collect();
        let bx = LocalBox::new(lower, upper);
        let x: Vec<f64> = pts.iter().map(|p| p.0).collect();
        let y: Vec<f64> = pts.iter().map(|p| p.1).collect();
        let px = project_box(&x, &bx);
        let py = project_box(&y, &bx);
        prop_assert!(bx.contains(&px));
        prop_assert_eq!(project_box(&px, &bx), px.clone());
        let dp: Vec<f64> = px.iter().zip(&py).map(|(a, b)| a - b).collect();
        let dx: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a - b).collect();
        prop_assert!(norm2(&dp) <= norm2(&dx) + 1e-12);
    }

    #[test]
    fn nonneg_projection_matches_sign_grid_search(v in prop::collection::vec(-3.0..3.0f64, 1..8)) {
        // Each coordinate of the minimizer is either the input or zero.
        let n = v.len();
        let mut best = (f64::INFINITY, vec![]);
        for mask in 0..(1u32 << n) {
            let cand: Vec<f64> = (0..n).map(|k| if mask >> k & 1 == 1 { v[k] } else { 0.0 }).collect();
            if cand.iter().any(|c| *c < 0.0) {
                continue;
            }
            let d: f64 = cand.iter().zip(&v).map(|(c, x)| (c - x).powi(2)).sum();
            if d < best.0 {
                best = (d, cand);
            }
        }
        prop_assert_eq!(project_nonneg(&v), best.1);
        let p = project_nonneg(&v);
        prop_assert_eq!(project_nonneg(&p), p);
    }

    #[test]
    fn soc_recursion_matches_closed_form(seed in any::<u64>()) {
        let cfg = fuzzed_config(seed, 5, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = Strategies::from_flat(
            cfg.n_agents,
            cfg.horizon,
            common::random_vec(&mut rng, cfg.n_agents * cfg.horizon, 0.0, 1.0),
        );
        let s = sample_scenario(&cfg, seed);
        let a = simulate_soc(&cfg, &u, &s);
        let b = simulate_soc_closed_form(&cfg, &u, &s);
        prop_assert_eq!(a.len(), cfg.horizon + 1);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn margin_grows_as_confidence_tightens(
        widths in prop::collection::vec(0.0..5.0f64, 1..10),
        nu in 0.1..4.0f64,
        d1 in 0.001..1.0f64,
        d2 in 0.001..1.0f64,
    ) {
        let (lo, hi) = if d1 < d2 { (d1, d2) } else { (d2, d1) };
        prop_assert!(hoeffding_margin(&widths, nu, lo).unwrap() >= hoeffding_margin(&widths, nu, hi).unwrap());
    }

    #[test]
    fn margin_grows_with_widths_and_nu(
        widths in prop::collection::vec(0.0..5.0f64, 1..10),
        extra in prop::collection::vec(0.0..2.0f64, 10),
        nu in 0.1..4.0f64,
        dnu in 0.0..2.0f64,
        delta in 0.001..1.0f64,
    ) {
        let wider: Vec<f64> = widths.iter().zip(&extra).map(|(w, e)| w + e).collect();
        let base = hoeffding_margin(&widths, nu, delta).unwrap();
        prop_assert!(hoeffding_margin(&wider, nu, delta).unwrap() >= base);
        prop_assert!(hoeffding_margin(&widths, nu + dnu, delta).unwrap() >= base);
        // Adding a variable never shrinks the margin.
        let mut longer = widths.clone();
        longer.push(extra[0]);
        prop_assert!(hoeffding_margin(&longer, nu, delta).unwrap() >= base);
    }

    #[test]
    fn coupling_has_expected_block_structure(seed in any::<u64>()) {
        let cfg = fuzzed_config(seed, 4, 10);
        let tau = cfg.horizon;
        let rho = cfg.rho();
        let margins = MarginSet::compute(&cfg).unwrap();
        for mode in Mode::ALL {
            let cc = build_coupling(&cfg, &margins, mode).unwrap();
            prop_assert_eq!(cc.rows(), 4 * tau + 2);
            prop_assert_eq!(cc.a.cols(), tau);
            prop_assert_eq!(cc.b.len(), 4 * tau + 2);
            let expect = |block: RowBlock, r: usize, k: usize| -> f64 {
                match block {
                    RowBlock::SocLower => if k <= r { rho } else { 0.0 },
                    RowBlock::SocUpper => if k <= r { -rho } else { 0.0 },
                    RowBlock::FinalLower => rho,
                    RowBlock::FinalUpper => -rho,
                    RowBlock::GridLower => if k == r { 1.0 } else { 0.0 },
                    RowBlock::GridUpper => if k == r { -1.0 } else { 0.0 },
                    RowBlock::Custom => unreachable!(),
                }
            };
            let order = [
                (RowBlock::SocLower, tau),
                (RowBlock::SocUpper, tau),
                (RowBlock::FinalLower, 1),
                (RowBlock::FinalUpper, 1),
                (RowBlock::GridLower, tau),
                (RowBlock::GridUpper, tau),
            ];
            let mut row = 0;
            for (block, len) in order {
                prop_assert_eq!(cc.block_rows(block), row..row + len);
                for r in 0..len {
                    prop_assert_eq!(cc.blocks[row + r], block);
                    for k in 0..tau {
                        prop_assert_eq!(cc.a.get(row + r, k), expect(block, r, k));
                    }
                }
                row += len;
            }
        }
    }

    #[test]
    fn config_survives_toml_round_trip(seed in any::<u64>()) {
        let mut cfg = fuzzed_config(seed, 5, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        cfg.demand[0][0] = BoundedRV::new(0.1, 2.0, rng.random_range(0.1..2.0));
        cfg.renewable_dependency = DependencyGraph::cycle(cfg.horizon.max(3)).induced_prefix(cfg.horizon);
        let again = load_config(&to_toml(&cfg)).unwrap();
        prop_assert_eq!(again, cfg);
    }

    #[test]
    fn scenarios_stay_in_support(seed in any::<u64>(), idx in 0u64..1000) {
        let cfg = fuzzed_config(seed, 5, 8);
        prop_assert!(indexed_scenario(&cfg, seed, idx).within_support(&cfg));
    }

    #[test]
    fn greedy_coloring_bounds_chromatic_number(
        n in 1usize..=8,
        mask in any::<u64>(),
    ) {
        let mut edges = Vec::new();
        let mut bit = 0;
        for a in 0..n {
            for b in a + 1..n {
                if mask >> (bit % 64) & 1 == 1 {
                    edges.push((a, b));
                }
                bit += 1;
            }
        }
        let g = DependencyGraph::new(n, edges.clone()).unwrap();
        let greedy = chromatic_upper_bound(&g);
        let exact = exact_chromatic(n, &edges);
        prop_assert!(greedy >= exact, "greedy {greedy} < exact {exact}");
        prop_assert!(greedy <= n);
    }
}

/// Smallest k admitting a proper coloring, by exhaustive search.
fn exact_chromatic(n: usize, edges: &[(usize, usize)]) -> usize {
    fn colorable(v: usize, n: usize, k: usize, colors: &mut Vec<usize>, edges: &[(usize, usize)]) -> bool {
        if v == n {
            return true;
        }
        for c in 0..k {
            let clash = edges
                .iter()
                .any(|&(a, b)| (a == v && b < v && colors[b] == c) || (b == v && a < v && colors[a] == c));
            if !clash {
                colors[v] = c;
                if colorable(v + 1, n, k, colors, edges) {
                    return true;
                }
            }
        }
        false
    }
    (1..=n)
        .find(|&k| colorable(0, n, k, &mut vec![0; n], edges))
        .unwrap_or(1)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Independent uniforms: the one-sided tail beyond the margin (with the
    /// independent-case factor 1/2) is at most delta.
    #[test]
    fn hoeffding_margin_is_sound_for_independent_uniforms(
        widths in prop::collection::vec(0.1..3.0f64, 1..8),
        delta in 0.02..0.9f64,
        seed in any::<u64>(),
    ) {
        let q = hoeffding_margin(&widths, 0.5, delta).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = 20_000;
        let mut hits = 0;
        for _ in 0..samples {
            let dev: f64 = widths.iter().map(|w| w * (rng.random::<f64>() - 0.5)).sum();
            if dev < -q {
                hits += 1;
            }
        }
        let p = hits as f64 / samples as f64;
        let se = (delta * (1.0 - delta) / samples as f64).sqrt();
        prop_assert!(p <= delta + 4.0 * se, "rate {p} > {delta}");
    }

    /// With demand supports collapsed to their means the two deterministic
    /// baselines are the same problem.
    #[test]
    fn deterministic_modes_coincide_without_demand_spread(seed in any::<u64>()) {
        let mut cfg = fuzzed_config(seed, 3, 4);
        for row in &mut cfg.demand {
            for d in row.iter_mut() {
                *d = BoundedRV::degenerate(d.mean);
            }
        }
        cfg.chance.g_max = 100.0;
        let lo = run_mode(&cfg, Mode::DetLower).unwrap();
        let hi = run_mode(&cfg, Mode::DetUpper).unwrap();
        prop_assert_eq!(lo.coupling.b, hi.coupling.b);
        prop_assert_eq!(lo.gne.u_star, hi.gne.u_star);
    }
}

#[test]
fn toy_builder_is_valid() {
    assert!(Toy::default().build().validate().is_ok());
    for seed in 0..50 {
        let cfg = fuzzed_config(seed, 4, 6);
        assert!(cfg.validate().is_ok(), "{}", cfg.validate());
    }
}
