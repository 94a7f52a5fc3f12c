//! CSV output. Floats use the shortest representation that parses back to
//! the same `f64`.

use std::io::{self, Write};

use crate::chance::MarginSet;
use crate::constraints::{CouplingConstraint, Mode};
use crate::experiments::{CostHistogram, ModeResult, ViolationReport};
use crate::game::{alpha_bound, expected_cost};
use crate::linalg::Strategies;
use crate::model::MicrogridConfig;
use crate::solver::{preconditioner_schur_min_eigenvalue, Algorithm, GNEResult, Variant};

pub fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

fn join(values: impl IntoIterator<Item = f64>) -> String {
    values.into_iter().map(fmt_f64).collect::<Vec<_>>().join(",")
}

pub fn write_solution<W: Write>(mut w: W, u: &Strategies) -> io::Result<()> {
    writeln!(w, "agent,t,u")?;
    for (i, row) in u.rows().enumerate() {
        for (t, &x) in row.iter().enumerate() {
            writeln!(w, "{i},{t},{}", fmt_f64(x))?;
        }
    }
    Ok(())
}

pub fn write_multipliers<W: Write>(mut w: W, cc: &CouplingConstraint, lam: &[f64]) -> io::Result<()> {
    writeln!(w, "row,block,lambda")?;
    for (j, (&l, block)) in lam.iter().zip(&cc.blocks).enumerate() {
        writeln!(w, "{j},{block},{}", fmt_f64(l))?;
    }
    Ok(())
}

/// One row per mode with the aggregate discharge profile in `u_total_<t>` columns.
pub fn write_solve_summary<W: Write>(
    mut w: W,
    cfg: &MicrogridConfig,
    rows: &[(Mode, Algorithm, Variant, &GNEResult)],
) -> io::Result<()> {
    write!(
        w,
        "mode,algorithm,variant,iterations,converged,residual_u,residual_lam,\
         fixed_point_residual,feasibility_max,expected_total_cost,peak_grid_exchange"
    )?;
    for t in 0..cfg.horizon {
        write!(w, ",u_total_{t}")?;
    }
    writeln!(w)?;
    let demand = cfg.aggregate_demand_mean();
    for (mode, algorithm, variant, r) in rows {
        let agg = r.u_star.aggregate();
        let cost: f64 = expected_cost(cfg, &r.u_star)
            .map(|c| c.iter().map(|x| x.total_expected).sum())
            .unwrap_or(f64::NAN);
        let peak = demand
            .iter()
            .zip(&agg)
            .map(|(d, s)| d - s)
            .fold(f64::NEG_INFINITY, f64::max);
        writeln!(
            w,
            "{mode},{algorithm},{variant},{},{},{},{},{},{},{},{},{}",
            r.iterations,
            r.converged,
            fmt_f64(r.final_residual_u()),
            fmt_f64(r.final_residual_lam()),
            fmt_f64(r.fixed_point_residual),
            fmt_f64(r.feasibility_max),
            fmt_f64(cost),
            fmt_f64(peak),
            join(agg)
        )?;
    }
    Ok(())
}

pub fn write_discharge_profiles<W: Write>(mut w: W, results: &[ModeResult]) -> io::Result<()> {
    let Some(first) = results.first() else {
        return writeln!(w, "t,mode,total");
    };
    write!(w, "t,mode")?;
    for i in 0..first.gne.u_star.n_agents() {
        write!(w, ",agent_{i}")?;
    }
    writeln!(w, ",total")?;
    for r in results {
        let u = &r.gne.u_star;
        let agg = u.aggregate();
        for (t, total) in agg.iter().enumerate() {
            let per_agent = (0..u.n_agents()).map(|i| u.get(i, t));
            writeln!(w, "{t},{},{},{}", r.mode, join(per_agent), fmt_f64(*total))?;
        }
    }
    Ok(())
}

pub fn write_grid_exchange<W: Write>(mut w: W, results: &[ModeResult]) -> io::Result<()> {
    writeln!(w, "t,mode,g")?;
    for r in results {
        for (t, g) in r.grid_exchange_mean.iter().enumerate() {
            writeln!(w, "{t},{},{}", r.mode, fmt_f64(*g))?;
        }
    }
    Ok(())
}

pub fn write_soc<W: Write>(mut w: W, results: &[ModeResult]) -> io::Result<()> {
    writeln!(w, "t,mode,soc")?;
    for r in results {
        for (t, x) in r.soc_mean.iter().enumerate() {
            writeln!(w, "{t},{},{}", r.mode, fmt_f64(*x))?;
        }
    }
    Ok(())
}

pub fn write_violations<W: Write>(mut w: W, rep: &ViolationReport) -> io::Result<()> {
    writeln!(w, "t,constraint,rate,se")?;
    for (k, (p, se)) in rep.soc_rate.iter().zip(&rep.soc_se).enumerate() {
        writeln!(w, "{},soc,{},{}", k + 1, fmt_f64(*p), fmt_f64(*se))?;
    }
    writeln!(
        w,
        "{},final,{},{}",
        rep.soc_rate.len(),
        fmt_f64(rep.final_rate),
        fmt_f64(rep.final_se)
    )?;
    for (t, (p, se)) in rep.grid_rate.iter().zip(&rep.grid_se).enumerate() {
        writeln!(w, "{t},grid,{},{}", fmt_f64(*p), fmt_f64(*se))?;
    }
    Ok(())
}

pub fn write_costs<W: Write>(mut w: W, hist: &CostHistogram) -> io::Result<()> {
    writeln!(w, "mode,sample,cost")?;
    for (mode, costs) in hist.modes.iter().zip(&hist.costs) {
        for (s, c) in costs.iter().enumerate() {
            writeln!(w, "{mode},{s},{}", fmt_f64(*c))?;
        }
    }
    Ok(())
}

pub fn write_histogram<W: Write>(mut w: W, hist: &CostHistogram) -> io::Result<()> {
    write!(w, "bin_lower,bin_upper")?;
    for m in &hist.modes {
        write!(w, ",{m}")?;
    }
    writeln!(w)?;
    for b in 0..hist.bin_edges.len() - 1 {
        write!(w, "{},{}", fmt_f64(hist.bin_edges[b]), fmt_f64(hist.bin_edges[b + 1]))?;
        for counts in &hist.counts {
            write!(w, ",{}", counts[b])?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn write_compare_summary<W: Write>(
    mut w: W,
    results: &[ModeResult],
    hist: &CostHistogram,
) -> io::Result<()> {
    writeln!(
        w,
        "mode,mean_cost,cost_se,peak_grid_exchange,iterations,converged,fixed_point_residual,feasibility_max"
    )?;
    for r in results {
        let idx = hist.modes.iter().position(|&m| m == r.mode);
        let mean = idx.map_or(f64::NAN, |i| hist.means[i]);
        let se = idx.map_or(f64::NAN, |i| hist.standard_errors[i]);
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.mode,
            fmt_f64(mean),
            fmt_f64(se),
            fmt_f64(r.peak_grid_exchange()),
            r.gne.iterations,
            r.gne.converged,
            fmt_f64(r.gne.fixed_point_residual),
            fmt_f64(r.gne.feasibility_max)
        )?;
    }
    Ok(())
}

pub fn write_constraints<W: Write>(mut w: W, cc: &CouplingConstraint) -> io::Result<()> {
    write!(w, "row,block")?;
    for k in 0..cc.horizon() {
        write!(w, ",a_{k}")?;
    }
    writeln!(w, ",b")?;
    for j in 0..cc.rows() {
        writeln!(
            w,
            "{j},{},{},{}",
            cc.blocks[j],
            join(cc.a.row(j).iter().copied()),
            fmt_f64(cc.b[j])
        )?;
    }
    Ok(())
}

pub fn write_margins<W: Write>(mut w: W, m: &MarginSet) -> io::Result<()> {
    writeln!(w, "t,q_x1,q_x2,q_g1,q_g2")?;
    for t in 0..m.horizon() {
        writeln!(
            w,
            "{t},{},{},{},{}",
            fmt_f64(m.q_x1[t]),
            fmt_f64(m.q_x2[t]),
            fmt_f64(m.q_g1[t]),
            fmt_f64(m.q_g2[t])
        )?;
    }
    writeln!(w, "final,{},{},,", fmt_f64(m.q_final1), fmt_f64(m.q_final2))
}

/// Monotonicity constants and step sizes as `key,value` rows.
pub fn write_constants<W: Write>(mut w: W, cfg: &MicrogridConfig, r: &ModeResult) -> io::Result<()> {
    let mc = &r.constants;
    let p = &r.params;
    writeln!(w, "key,value")?;
    let mut rows = vec![
        ("zeta", mc.zeta),
        ("l_f", mc.l_f),
        ("eig_min", mc.eig_min),
        ("eig_max", mc.eig_max),
        ("alpha_bound", alpha_bound(mc)),
        ("alpha_max", p.alpha.iter().copied().fold(0.0, f64::max)),
        ("gamma", p.gamma),
        ("gamma_max", p.gamma_max),
        (
            "schur_min_eigenvalue",
            preconditioner_schur_min_eigenvalue(&p.alpha, p.gamma, &r.coupling),
        ),
        ("feasibility_min_max_violation", r.feasibility.min_max_violation),
    ];
    if let Some(l) = cfg.solver.reported_lipschitz {
        rows.push(("reported_lipschitz", l));
    }
    for (k, v) in rows {
        writeln!(w, "{k},{}", fmt_f64(v))?;
    }
    Ok(())
}
