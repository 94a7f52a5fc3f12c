//! Preconditioned forward–backward iterations for the variational GNE.
//!
//! Two drivers share one iteration engine: the semi-decentralized scheme, in
//! which every agent updates from the broadcast `(lambda, sum_j u_j)` and a
//! coordinator updates `lambda`, and the centralized scheme on the stacked
//! profile. With [`Variant::Consistent`] both realize the same map.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::constraints::{local_boxes, project_box_in_place, CouplingConstraint, LocalBox};
use crate::game::{expected_cost, pseudo_gradient_into, GameMatrices, SolverParams};
use crate::linalg::{max_abs_diff, max_entry, Strategies};
use crate::model::MicrogridConfig;

/// Agent update rule of the semi-decentralized scheme.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Includes the `k_c * sum_{j != i} u_j` term, so the agent step is the
    /// block row of the centralized step.
    #[default]
    Consistent,
    /// Drops that term.
    Literal,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Consistent => "consistent",
            Variant::Literal => "literal",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "consistent" => Ok(Variant::Consistent),
            "literal" => Ok(Variant::Literal),
            other => Err(format!("unknown variant `{other}` (expected consistent or literal)")),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub enum Algorithm {
    #[default]
    SemiDecentralized,
    Centralized,
}

impl Algorithm {
    pub fn as_str(&self) -> &'static str {
        match self {
            Algorithm::SemiDecentralized => "semi",
            Algorithm::Centralized => "central",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "semi" => Ok(Algorithm::SemiDecentralized),
            "central" => Ok(Algorithm::Centralized),
            other => Err(format!("unknown algorithm `{other}` (expected semi or central)")),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SolverError {
    #[error("game has shape {game:?}, constraint horizon {constraint}, config shape {config:?}")]
    Shape {
        game: (usize, usize),
        constraint: usize,
        config: (usize, usize),
    },
    #[error("expected {expected} agent step sizes, found {found}")]
    StepCount { expected: usize, found: usize },
    #[error("invalid step sizes: {0}")]
    InvalidSteps(String),
    #[error("initial point has the wrong shape")]
    InitShape,
}

/// Largest violation of `A sum_j u_j <= b` accepted at a converged point.
pub const FEASIBILITY_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct IterateState {
    pub u: Strategies,
    pub lam: Vec<f64>,
    pub k: usize,
    pub prev_u: Strategies,
    pub prev_lam: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct IterationRecord {
    pub k: usize,
    pub residual_u: f64,
    pub residual_lam: f64,
    pub feasibility_max: f64,
    pub objective_total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GNEResult {
    pub u_star: Strategies,
    pub lam_star: Vec<f64>,
    pub iterations: usize,
    pub residual_u: Vec<f64>,
    pub residual_lam: Vec<f64>,
    pub converged: bool,
    pub fixed_point_residual: f64,
    pub feasibility_max: f64,
    /// Decimated iteration log.
    pub log: Vec<IterationRecord>,
}

impl GNEResult {
    pub fn final_residual_u(&self) -> f64 {
        self.residual_u.last().copied().unwrap_or(f64::INFINITY)
    }

    pub fn final_residual_lam(&self) -> f64 {
        self.residual_lam.last().copied().unwrap_or(f64::INFINITY)
    }
}

/// Optional starting point; defaults are the box midpoints and `lambda = 0`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SolveOptions {
    pub init_u: Option<Strategies>,
    pub init_lam: Option<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub residual_u: f64,
    pub residual_lam: f64,
    /// `max_k (A sum_j u_j^{k+1} - b)_k`
    pub feasibility_max: f64,
}

/// Agent updates run in parallel above this many scalar unknowns.
const PARALLEL_THRESHOLD: usize = 4096;

/// One forward–backward run; advance it with [`Iteration::step`].
pub struct Iteration<'a> {
    gm: &'a GameMatrices,
    cc: &'a CouplingConstraint,
    params: &'a SolverParams,
    boxes: Vec<LocalBox>,
    algorithm: Algorithm,
    state: IterateState,
    agg: Vec<f64>,
    a_agg: Vec<f64>,
    at_lam: Vec<f64>,
    grad: Strategies,
}

fn check_shapes(
    cfg: &MicrogridConfig,
    gm: &GameMatrices,
    cc: &CouplingConstraint,
    params: &SolverParams,
) -> Result<(), SolverError> {
    let ok = gm.n_agents() == cfg.n_agents
        && gm.horizon() == cfg.horizon
        && cc.horizon() == cfg.horizon
        && cfg.battery.u_max.len() == cfg.n_agents;
    if !ok {
        return Err(SolverError::Shape {
            game: (gm.n_agents(), gm.horizon()),
            constraint: cc.horizon(),
            config: (cfg.n_agents, cfg.horizon),
        });
    }
    if params.alpha.len() != cfg.n_agents {
        return Err(SolverError::StepCount {
            expected: cfg.n_agents,
            found: params.alpha.len(),
        });
    }
    if !params.alpha.iter().all(|a| *a > 0.0 && a.is_finite()) || !(params.gamma > 0.0) {
        return Err(SolverError::InvalidSteps(format!(
            "alpha and gamma must be positive (gamma = {})",
            params.gamma
        )));
    }
    Ok(())
}

impl<'a> Iteration<'a> {
    pub fn new(
        cfg: &MicrogridConfig,
        gm: &'a GameMatrices,
        cc: &'a CouplingConstraint,
        params: &'a SolverParams,
        algorithm: Algorithm,
        options: &SolveOptions,
    ) -> Result<Self, SolverError> {
        check_shapes(cfg, gm, cc, params)?;
        let boxes = local_boxes(cfg);
        let (n, tau, m) = (cfg.n_agents, cfg.horizon, cc.rows());
        let u = match &options.init_u {
            Some(u) if u.n_agents() != n || u.horizon() != tau => return Err(SolverError::InitShape),
            Some(u) => {
                let mut u = u.clone();
                for (row, bx) in u.rows_mut().zip(&boxes) {
                    project_box_in_place(row, bx);
                }
                u
            }
            None => Strategies::from_rows(&boxes.iter().map(LocalBox::midpoint).collect::<Vec<_>>()),
        };
        let lam = match &options.init_lam {
            Some(l) if l.len() != m => return Err(SolverError::InitShape),
            Some(l) => l.iter().map(|v| v.max(0.0)).collect(),
            None => vec![0.0; m],
        };
        let agg = u.aggregate();
        let a_agg = cc.a.matvec(&agg);
        Ok(Self {
            gm,
            cc,
            params,
            boxes,
            algorithm,
            state: IterateState {
                prev_u: u.clone(),
                prev_lam: lam.clone(),
                u,
                lam,
                k: 0,
            },
            agg,
            a_agg,
            at_lam: vec![0.0; tau],
            grad: Strategies::zeros(n, tau),
        })
    }

    pub fn state(&self) -> &IterateState {
        &self.state
    }

    pub fn into_state(self) -> IterateState {
        self.state
    }

    /// Performs one full round: agent updates, then the coordinator update.
    pub fn step(&mut self) -> StepOutcome {
        let st = &mut self.state;
        st.prev_u.clone_from(&st.u);
        st.prev_lam.clone_from(&st.lam);
        self.cc.a.matvec_transpose_into(&st.lam, &mut self.at_lam);

        match self.algorithm {
            Algorithm::Centralized => {
                // u <- proj_Omega[u - alpha (Gamma u + Lambda + (1' (x) A)' lambda)]
                pseudo_gradient_into(self.gm, &st.prev_u, &self.agg, &mut self.grad);
                let (grad, at_lam, alpha) = (&self.grad, &self.at_lam, &self.params.alpha);
                let boxes = &self.boxes;
                let update = |(i, row): (usize, &mut [f64])| {
                    let a = alpha[i];
                    for ((x, g), l) in row.iter_mut().zip(grad.row(i)).zip(at_lam) {
                        *x -= a * (g + l);
                    }
                    project_box_in_place(row, &boxes[i]);
                };
                if st.u.as_flat().len() >= PARALLEL_THRESHOLD {
                    st.u.as_flat_mut()
                        .par_chunks_mut(self.gm.horizon())
                        .enumerate()
                        .for_each(update);
                } else {
                    st.u.rows_mut().enumerate().for_each(update);
                }
            }
            Algorithm::SemiDecentralized => {
                let g = self.gm.g_scalar;
                let kc = self.gm.k_c();
                let consistent = self.params.variant == Variant::Consistent;
                let (agg, at_lam, alpha, t) = (&self.agg, &self.at_lam, &self.params.alpha, &self.gm.t);
                let boxes = &self.boxes;
                let prev = &st.prev_u;
                // u_i <- proj[(I - 2 a_i (G + H'/N)) u_i - a_i k_c sum_{j!=i} u_j - a_i A' lambda - a_i T_i]
                let update = |(i, row): (usize, &mut [f64])| {
                    let a = alpha[i];
                    let shrink = 1.0 - 2.0 * a * (g + kc);
                    let ui = prev.row(i);
                    let ti = t.row(i);
                    for k in 0..row.len() {
                        let mut v = shrink * ui[k] - a * at_lam[k] - a * ti[k];
                        if consistent {
                            v -= a * kc * (agg[k] - ui[k]);
                        }
                        row[k] = v;
                    }
                    project_box_in_place(row, &boxes[i]);
                };
                if st.u.as_flat().len() >= PARALLEL_THRESHOLD {
                    st.u.as_flat_mut()
                        .par_chunks_mut(self.gm.horizon())
                        .enumerate()
                        .for_each(update);
                } else {
                    st.u.rows_mut().enumerate().for_each(update);
                }
            }
        }

        // Coordinator: lambda <- max(0, lambda + gamma (2 A S^{k+1} - A S^k - b)).
        st.u.aggregate_into(&mut self.agg);
        let a_new = self.cc.a.matvec(&self.agg);
        let gamma = self.params.gamma;
        let mut feas = f64::NEG_INFINITY;
        for (j, l) in st.lam.iter_mut().enumerate() {
            let viol = a_new[j] - self.cc.b[j];
            feas = feas.max(viol);
            *l = (*l + gamma * (2.0 * a_new[j] - self.a_agg[j] - self.cc.b[j])).max(0.0);
        }
        self.a_agg = a_new;
        st.k += 1;

        debug_assert!(st.u.rows().zip(&self.boxes).all(|(r, b)| b.contains(r)));
        debug_assert!(st.lam.iter().all(|l| *l >= 0.0));

        StepOutcome {
            residual_u: st.u.max_abs_diff(&st.prev_u),
            residual_lam: max_abs_diff(&st.lam, &st.prev_lam),
            feasibility_max: feas,
        }
    }
}

fn objective_total(cfg: &MicrogridConfig, u: &Strategies) -> f64 {
    expected_cost(cfg, u)
        .map(|r| r.iter().map(|c| c.total_expected).sum())
        .unwrap_or(f64::NAN)
}

/// Runs `algorithm` until the stopping rule or `max_iters`.
///
/// Stops once every agent moved by at most `eps_u`, the multiplier by at most
/// `eps_lambda` (both in the infinity norm) and the aggregate satisfies the
/// coupling constraint to within [`FEASIBILITY_TOL`].
pub fn solve(
    cfg: &MicrogridConfig,
    gm: &GameMatrices,
    cc: &CouplingConstraint,
    params: &SolverParams,
    algorithm: Algorithm,
    options: &SolveOptions,
) -> Result<GNEResult, SolverError> {
    let mut it = Iteration::new(cfg, gm, cc, params, algorithm, options)?;
    let stride = params.log_stride.max(1);
    let mut residual_u = Vec::new();
    let mut residual_lam = Vec::new();
    let mut log = Vec::new();
    let mut converged = false;
    for _ in 0..params.max_iters {
        let out = it.step();
        residual_u.push(out.residual_u);
        residual_lam.push(out.residual_lam);
        let k = it.state().k;
        converged = out.residual_u <= params.eps_u
            && out.residual_lam <= params.eps_lambda
            && out.feasibility_max <= FEASIBILITY_TOL;
        if k % stride == 0 || k == 1 || converged || k == params.max_iters {
            log.push(IterationRecord {
                k,
                residual_u: out.residual_u,
                residual_lam: out.residual_lam,
                feasibility_max: out.feasibility_max,
                objective_total: objective_total(cfg, &it.state().u),
            });
        }
        if converged {
            break;
        }
    }
    let state = it.into_state();
    let fpr = fixed_point_residual(cfg, gm, cc, params, &state.u, &state.lam);
    let feasibility_max = max_entry(&cc.violation_of_aggregate(&state.u.aggregate()));
    if !converged {
        log::warn!(
            "{algorithm} solver stopped after {} iterations without meeting the tolerances",
            state.k
        );
    }
    Ok(GNEResult {
        iterations: state.k,
        u_star: state.u,
        lam_star: state.lam,
        residual_u,
        residual_lam,
        converged,
        fixed_point_residual: fpr,
        feasibility_max,
        log,
    })
}

pub fn solve_semidecentralized(
    cfg: &MicrogridConfig,
    gm: &GameMatrices,
    cc: &CouplingConstraint,
    params: &SolverParams,
) -> Result<GNEResult, SolverError> {
    solve(cfg, gm, cc, params, Algorithm::SemiDecentralized, &SolveOptions::default())
}

pub fn solve_centralized(
    cfg: &MicrogridConfig,
    gm: &GameMatrices,
    cc: &CouplingConstraint,
    params: &SolverParams,
) -> Result<GNEResult, SolverError> {
    solve(cfg, gm, cc, params, Algorithm::Centralized, &SolveOptions::default())
}

/// `max(||u - proj_Omega(u - alpha (F(u) + A' lambda))||_inf,
///      ||lambda - proj_{>=0}(lambda + gamma (A sum u - b))||_inf)`;
/// zero exactly at a KKT point of the variational inequality.
pub fn fixed_point_residual(
    cfg: &MicrogridConfig,
    gm: &GameMatrices,
    cc: &CouplingConstraint,
    params: &SolverParams,
    u: &Strategies,
    lam: &[f64],
) -> f64 {
    let boxes = local_boxes(cfg);
    let agg = u.aggregate();
    let mut grad = Strategies::zeros(u.n_agents(), u.horizon());
    pseudo_gradient_into(gm, u, &agg, &mut grad);
    let at_lam = cc.a.matvec_transpose(lam);
    let mut res: f64 = 0.0;
    for (i, bx) in boxes.iter().enumerate() {
        let mut step: Vec<f64> = u
            .row(i)
            .iter()
            .zip(grad.row(i))
            .zip(&at_lam)
            .map(|((x, g), l)| x - params.alpha[i] * (g + l))
            .collect();
        project_box_in_place(&mut step, bx);
        res = res.max(max_abs_diff(u.row(i), &step));
    }
    let viol = cc.violation_of_aggregate(&agg);
    for (l, v) in lam.iter().zip(&viol) {
        let next = (l + params.gamma * v).max(0.0);
        res = res.max((l - next).abs());
    }
    res
}

/// Positive definiteness of the preconditioner
/// `[[diag(alpha)^-1, -(1' (x) A)'], [-(1' (x) A), gamma^-1 I]]`.
pub fn check_preconditioner(params: &SolverParams, cc: &CouplingConstraint, n_agents: usize) -> bool {
    params.alpha.len() == n_agents && check_preconditioner_raw(&params.alpha, params.gamma, cc)
}

/// Smallest eigenvalue of the Schur complement `gamma^-1 I - (sum_i alpha_i) A A'`.
pub fn preconditioner_schur_min_eigenvalue(alpha: &[f64], gamma: f64, cc: &CouplingConstraint) -> f64 {
    let m = cc.rows();
    if m == 0 {
        return f64::INFINITY;
    }
    let total: f64 = alpha.iter().sum();
    let gram = cc.a.gram_rows();
    let schur = DMatrix::from_fn(m, m, |r, c| {
        let diag = if r == c { 1.0 / gamma } else { 0.0 };
        diag - total * gram.get(r, c)
    });
    SymmetricEigen::new(schur)
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

pub fn check_preconditioner_raw(alpha: &[f64], gamma: f64, cc: &CouplingConstraint) -> bool {
    if !(gamma > 0.0 && gamma.is_finite()) || !alpha.iter().all(|a| *a > 0.0 && a.is_finite()) {
        return false;
    }
    preconditioner_schur_min_eigenvalue(alpha, gamma, cc) > 0.0
}

/// Writes the iteration log as CSV.
pub fn write_iteration_log<W: std::io::Write>(mut w: W, log: &[IterationRecord]) -> std::io::Result<()> {
    writeln!(w, "k,residual_u,residual_lam,feasibility_max,objective_total")?;
    for r in log {
        writeln!(
            w,
            "{},{:?},{:?},{:?},{:?}",
            r.k, r.residual_u, r.residual_lam, r.feasibility_max, r.objective_total
        )?;
    }
    Ok(())
}
