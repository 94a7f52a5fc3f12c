//! The shared polyhedron `A * sum_j u_j <= b`, local boxes, projections and a
//! strict-feasibility check.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

use crate::chance::MarginSet;
use crate::linalg::{cumulative_sum, max_entry, DenseMatrix, Strategies};
use crate::model::MicrogridConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Hoeffding margins, mean demand.
    Stochastic,
    /// No margins, demand at the lower end of its support.
    DetLower,
    /// No margins, demand at the upper end of its support.
    DetUpper,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Stochastic, Mode::DetLower, Mode::DetUpper];

    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Stochastic => "stochastic",
            Mode::DetLower => "det_lower",
            Mode::DetUpper => "det_upper",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('-', "_").as_str() {
            "stochastic" => Ok(Mode::Stochastic),
            "det_lower" => Ok(Mode::DetLower),
            "det_upper" => Ok(Mode::DetUpper),
            other => Err(format!(
                "unknown mode `{other}` (expected stochastic, det_lower or det_upper)"
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum RowBlock {
    SocLower,
    SocUpper,
    FinalLower,
    FinalUpper,
    GridLower,
    GridUpper,
    /// Rows of a hand-built constraint.
    Custom,
}

impl RowBlock {
    pub fn as_str(&self) -> &'static str {
        match self {
            RowBlock::SocLower => "soc-lower",
            RowBlock::SocUpper => "soc-upper",
            RowBlock::FinalLower => "final-lower",
            RowBlock::FinalUpper => "final-upper",
            RowBlock::GridLower => "grid-lower",
            RowBlock::GridUpper => "grid-upper",
            RowBlock::Custom => "custom",
        }
    }
}

impl fmt::Display for RowBlock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ConstraintError {
    #[error("margins cover horizon {margins}, config has {config}")]
    HorizonMismatch { margins: usize, config: usize },
    #[error("strategies have shape {got:?}, expected (_, {expected})")]
    Shape { got: (usize, usize), expected: usize },
    #[error("A is {rows}x{cols} but b has {b_len} entries")]
    Parts { rows: usize, cols: usize, b_len: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct CouplingConstraint {
    pub a: DenseMatrix,
    pub b: Vec<f64>,
    /// Block label of every row.
    pub blocks: Vec<RowBlock>,
}

impl CouplingConstraint {
    /// A hand-built constraint; every row is labelled [`RowBlock::Custom`].
    pub fn from_parts(a: DenseMatrix, b: Vec<f64>) -> Result<Self, ConstraintError> {
        if a.rows() != b.len() {
            return Err(ConstraintError::Parts {
                rows: a.rows(),
                cols: a.cols(),
                b_len: b.len(),
            });
        }
        let blocks = vec![RowBlock::Custom; b.len()];
        Ok(Self { a, b, blocks })
    }

    pub fn rows(&self) -> usize {
        self.a.rows()
    }

    pub fn horizon(&self) -> usize {
        self.a.cols()
    }

    /// Row indices belonging to `block`.
    pub fn block_rows(&self, block: RowBlock) -> std::ops::Range<usize> {
        let start = self.blocks.iter().position(|&b| b == block).unwrap_or(0);
        let len = self.blocks.iter().filter(|&&b| b == block).count();
        start..start + len
    }

    /// `A s - b` for an aggregate `s`.
    pub fn violation_of_aggregate(&self, s: &[f64]) -> Vec<f64> {
        let mut v = self.a.matvec(s);
        for (vi, bi) in v.iter_mut().zip(&self.b) {
            *vi -= bi;
        }
        v
    }
}

/// Stacks the six row blocks for `mode`.
pub fn build_coupling(
    cfg: &MicrogridConfig,
    margins: &MarginSet,
    mode: Mode,
) -> Result<CouplingConstraint, ConstraintError> {
    let tau = cfg.horizon;
    let lengths = [
        margins.q_x1.len(),
        margins.q_x2.len(),
        margins.q_g1.len(),
        margins.q_g2.len(),
    ];
    if let Some(&bad) = lengths.iter().find(|&&l| l != tau) {
        return Err(ConstraintError::HorizonMismatch {
            margins: bad,
            config: tau,
        });
    }
    let zero;
    let (q, demand) = match mode {
        Mode::Stochastic => (margins, cfg.aggregate_demand_mean()),
        Mode::DetLower => {
            zero = MarginSet::zero(tau);
            (&zero, cfg.aggregate_demand_by(|d| d.lower))
        }
        Mode::DetUpper => {
            zero = MarginSet::zero(tau);
            (&zero, cfg.aggregate_demand_by(|d| d.upper))
        }
    };

    let rho = cfg.rho();
    let bat = &cfg.battery;
    let ch = &cfg.chance;
    let mu_r = cfg.renewable_mean();
    let cum_r = cumulative_sum(&mu_r);
    let total_r: f64 = mu_r.iter().sum();
    let m = 4 * tau + 2;

    let mut a = DenseMatrix::zeros(m, tau);
    let mut b = Vec::with_capacity(m);
    let mut blocks = Vec::with_capacity(m);

    // SoC at t = 1..tau: x^t = x0 + rho * (M mu_r)_t - rho * (M S)_t.
    for t in 0..tau {
        for k in 0..=t {
            a.set(t, k, rho);
        }
        b.push(-((bat.x_min - bat.x0) - rho * cum_r[t] + q.q_x1[t]));
        blocks.push(RowBlock::SocLower);
    }
    for t in 0..tau {
        for k in 0..=t {
            a.set(tau + t, k, -rho);
        }
        b.push(-((bat.x0 - bat.x_max) + rho * cum_r[t] + q.q_x2[t]));
        blocks.push(RowBlock::SocUpper);
    }

    let row = 2 * tau;
    for k in 0..tau {
        a.set(row, k, rho);
        a.set(row + 1, k, -rho);
    }
    b.push(-(ch.r_target - ch.epsilon - bat.x0 - rho * total_r + q.q_final1));
    blocks.push(RowBlock::FinalLower);
    b.push(-(bat.x0 - ch.r_target - ch.epsilon + rho * total_r + q.q_final2));
    blocks.push(RowBlock::FinalUpper);

    // Grid exchange g^t = D^t - S^t must stay within [0, g_max].
    let base = 2 * tau + 2;
    for t in 0..tau {
        a.set(base + t, t, 1.0);
        b.push(-(-demand[t] + q.q_g1[t]));
        blocks.push(RowBlock::GridLower);
    }
    for t in 0..tau {
        a.set(base + tau + t, t, -1.0);
        b.push(-(-ch.g_max + demand[t] + q.q_g2[t]));
        blocks.push(RowBlock::GridUpper);
    }

    Ok(CouplingConstraint { a, b, blocks })
}

/// Local decision set `[lower, upper]` of one agent.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl LocalBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Self {
        assert_eq!(lower.len(), upper.len());
        debug_assert!(lower.iter().zip(&upper).all(|(l, u)| l <= u));
        Self { lower, upper }
    }

    pub fn uniform(horizon: usize, upper: f64) -> Self {
        Self::new(vec![0.0; horizon], vec![upper; horizon])
    }

    pub fn midpoint(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| 0.5 * (l + u))
            .collect()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(v, (l, u))| *l <= *v && *v <= *u)
    }
}

/// `[0, u_max_i]` for every agent.
pub fn local_boxes(cfg: &MicrogridConfig) -> Vec<LocalBox> {
    cfg.battery
        .u_max
        .iter()
        .map(|&u| LocalBox::uniform(cfg.horizon, u))
        .collect()
}

pub fn project_box(x: &[f64], bx: &LocalBox) -> Vec<f64> {
    let mut out = x.to_vec();
    project_box_in_place(&mut out, bx);
    out
}

pub fn project_box_in_place(x: &mut [f64], bx: &LocalBox) {
    for ((v, l), u) in x.iter_mut().zip(&bx.lower).zip(&bx.upper) {
        *v = v.clamp(*l, *u);
    }
}

pub fn project_nonneg(lam: &[f64]) -> Vec<f64> {
    lam.iter().map(|v| v.max(0.0)).collect()
}

/// `A * sum_j u_j - b`; feasible iff every entry is `<= 0`.
pub fn aggregate_violation(
    cc: &CouplingConstraint,
    u: &Strategies,
) -> Result<Vec<f64>, ConstraintError> {
    if u.horizon() != cc.horizon() {
        return Err(ConstraintError::Shape {
            got: (u.n_agents(), u.horizon()),
            expected: cc.horizon(),
        });
    }
    Ok(cc.violation_of_aggregate(&u.aggregate()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeasibilityReport {
    pub strictly_feasible: bool,
    pub witness: Option<Strategies>,
    pub min_max_violation: f64,
    pub iterations: usize,
}

pub const STRICT_FEASIBILITY_THRESHOLD: f64 = -1e-8;
pub const FEASIBILITY_MAX_ITERS: usize = 100_000;

/// Splits an aggregate inside the summed box back into per-agent strategies.
fn disaggregate(s: &[f64], boxes: &[LocalBox]) -> Strategies {
    let tau = s.len();
    let mut u = Strategies::zeros(boxes.len(), tau);
    for t in 0..tau {
        let lo: f64 = boxes.iter().map(|b| b.lower[t]).sum();
        let span: f64 = boxes.iter().map(|b| b.upper[t] - b.lower[t]).sum();
        let frac = if span > 0.0 { ((s[t] - lo) / span).clamp(0.0, 1.0) } else { 0.0 };
        for (i, b) in boxes.iter().enumerate() {
            u.set(i, t, b.lower[t] + frac * (b.upper[t] - b.lower[t]));
        }
    }
    u
}

/// Minimizes `max_k (A sum_j u_j - b)_k` over the local boxes with projected
/// subgradient steps from the box midpoint, stopping at the first strictly
/// feasible point.
///
/// The objective depends on the strategies only through the aggregate, and
/// the sum of boxes is itself a box, so the search runs on the aggregate.
pub fn feasibility_search(cc: &CouplingConstraint, boxes: &[LocalBox]) -> FeasibilityReport {
    feasibility_search_with(cc, boxes, FEASIBILITY_MAX_ITERS)
}

pub fn feasibility_search_with(
    cc: &CouplingConstraint,
    boxes: &[LocalBox],
    max_iters: usize,
) -> FeasibilityReport {
    let tau = cc.horizon();
    let agg_lo: Vec<f64> = (0..tau).map(|t| boxes.iter().map(|b| b.lower[t]).sum()).collect();
    let agg_hi: Vec<f64> = (0..tau).map(|t| boxes.iter().map(|b| b.upper[t]).sum()).collect();
    let agg_box = LocalBox::new(agg_lo, agg_hi);
    let diameter = agg_box
        .lower
        .iter()
        .zip(&agg_box.upper)
        .map(|(l, u)| (u - l) * (u - l))
        .sum::<f64>()
        .sqrt();

    let mut s = agg_box.midpoint();
    let mut best_s = s.clone();
    let mut best = f64::INFINITY;
    let step0 = 0.5 * diameter.max(f64::MIN_POSITIVE);
    let mut iterations = 0;

    for k in 1..=max_iters.max(1) {
        iterations = k;
        let v = cc.violation_of_aggregate(&s);
        let (arg, val) = v
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, x)| if x > acc.1 { (i, x) } else { acc });
        if val < best {
            best = val;
            best_s.clone_from(&s);
        }
        if best < STRICT_FEASIBILITY_THRESHOLD {
            break;
        }
        let g = cc.a.row(arg);
        let gnorm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        if gnorm == 0.0 {
            // A constant row dominates; nothing to improve.
            break;
        }
        let step = step0 / (k as f64).sqrt() / gnorm;
        for (si, gi) in s.iter_mut().zip(g) {
            *si -= step * gi;
        }
        project_box_in_place(&mut s, &agg_box);
    }

    if !best.is_finite() {
        best = max_entry(&cc.violation_of_aggregate(&best_s));
    }
    let strictly_feasible = best < STRICT_FEASIBILITY_THRESHOLD;
    FeasibilityReport {
        strictly_feasible,
        witness: strictly_feasible.then(|| disaggregate(&best_s, boxes)),
        min_max_violation: best,
        iterations,
    }
}
