//! Chernoff–Hoeffding margins that turn the chance constraints into
//! deterministic inequalities.

use thiserror::Error;

use crate::model::{DependencyGraph, MicrogridConfig};

#[derive(Debug, Error, PartialEq)]
pub enum ChanceError {
    #[error("confidence parameter {0} outside (0, 1]")]
    Confidence(f64),
    #[error("dependency factor {0} must be positive")]
    Nu(f64),
    #[error("support width {0} must be finite and nonnegative")]
    Width(f64),
    #[error("{what}: {context}")]
    At {
        what: String,
        #[source]
        context: Box<ChanceError>,
    },
}

impl ChanceError {
    fn at(self, what: impl Into<String>) -> Self {
        ChanceError::At {
            what: what.into(),
            context: Box::new(self),
        }
    }
}

/// Greedy coloring over nodes `0..n` in index order. Never below 1.
pub fn chromatic_upper_bound(graph: &DependencyGraph) -> usize {
    let n = graph.node_count();
    let mut adj = vec![Vec::new(); n];
    for (a, b) in graph.edges() {
        adj[a].push(b);
        adj[b].push(a);
    }
    let mut color: Vec<Option<usize>> = vec![None; n];
    let mut used = 0;
    for v in 0..n {
        let taken: Vec<usize> = adj[v].iter().filter_map(|&w| color[w]).collect();
        let c = (0..).find(|c| !taken.contains(c)).expect("a free color exists");
        color[v] = Some(c);
        used = used.max(c + 1);
    }
    used.max(1)
}

/// `sqrt(-nu * sum(w^2) * ln(delta))`: the lower-tail deviation of a sum of
/// bounded variables that is exceeded with probability at most `delta`.
pub fn hoeffding_margin(widths: &[f64], nu: f64, confidence: f64) -> Result<f64, ChanceError> {
    if !(confidence > 0.0 && confidence <= 1.0) {
        return Err(ChanceError::Confidence(confidence));
    }
    if !(nu > 0.0 && nu.is_finite()) {
        return Err(ChanceError::Nu(nu));
    }
    if let Some(&w) = widths.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
        return Err(ChanceError::Width(w));
    }
    let tail = -confidence.ln();
    if tail <= 0.0 {
        return Ok(0.0);
    }
    let sum_sq: f64 = widths.iter().map(|w| w * w).sum();
    Ok((nu * sum_sq * tail).sqrt())
}

/// All margins of one instance. Independent of the strategies.
#[derive(Clone, Debug, PartialEq)]
pub struct MarginSet {
    /// SoC lower-bound margin at `t = 1..=tau` (position `t - 1`).
    pub q_x1: Vec<f64>,
    pub q_x2: Vec<f64>,
    pub q_final1: f64,
    pub q_final2: f64,
    /// Grid margins at `t = 0..tau`.
    pub q_g1: Vec<f64>,
    pub q_g2: Vec<f64>,
}

impl MarginSet {
    pub fn zero(horizon: usize) -> Self {
        Self {
            q_x1: vec![0.0; horizon],
            q_x2: vec![0.0; horizon],
            q_final1: 0.0,
            q_final2: 0.0,
            q_g1: vec![0.0; horizon],
            q_g2: vec![0.0; horizon],
        }
    }

    pub fn compute(cfg: &MicrogridConfig) -> Result<Self, ChanceError> {
        let (q_x1, q_x2) = soc_margins(cfg)?;
        let (q_final1, q_final2) = final_soc_margins(cfg)?;
        let (q_g1, q_g2) = grid_margins(cfg)?;
        Ok(Self {
            q_x1,
            q_x2,
            q_final1,
            q_final2,
            q_g1,
            q_g2,
        })
    }

    pub fn horizon(&self) -> usize {
        self.q_x1.len()
    }

    pub fn entries(&self) -> impl Iterator<Item = f64> + '_ {
        self.q_x1
            .iter()
            .chain(&self.q_x2)
            .chain([&self.q_final1, &self.q_final2])
            .chain(&self.q_g1)
            .chain(&self.q_g2)
            .copied()
    }
}

pub fn soc_margins(cfg: &MicrogridConfig) -> Result<(Vec<f64>, Vec<f64>), ChanceError> {
    let rho = cfg.rho();
    let widths = cfg.renewable_widths();
    let c = &cfg.chance;
    let mut q1 = Vec::with_capacity(cfg.horizon);
    let mut q2 = Vec::with_capacity(cfg.horizon);
    for t in 1..=cfg.horizon {
        let prefix = &widths[..t];
        let nu = c.nu_r[t - 1];
        let tilde = c.delta_x_tilde[t - 1];
        let rest = c.delta_x[t - 1] - tilde;
        q1.push(rho * hoeffding_margin(prefix, nu, tilde).map_err(|e| e.at(format!("q_x1 at t={t}")))?);
        q2.push(rho * hoeffding_margin(prefix, nu, rest).map_err(|e| e.at(format!("q_x2 at t={t}")))?);
    }
    Ok((q1, q2))
}

pub fn final_soc_margins(cfg: &MicrogridConfig) -> Result<(f64, f64), ChanceError> {
    let rho = cfg.rho();
    let widths = cfg.renewable_widths();
    let c = &cfg.chance;
    let nu = c.nu_r[cfg.horizon - 1];
    let tilde = c.delta_final_tilde;
    let q1 = hoeffding_margin(&widths, nu, tilde).map_err(|e| e.at("q_final1"))?;
    let q2 = hoeffding_margin(&widths, nu, c.delta_final - tilde).map_err(|e| e.at("q_final2"))?;
    Ok((rho * q1, rho * q2))
}

pub fn grid_margins(cfg: &MicrogridConfig) -> Result<(Vec<f64>, Vec<f64>), ChanceError> {
    let c = &cfg.chance;
    let mut q1 = Vec::with_capacity(cfg.horizon);
    let mut q2 = Vec::with_capacity(cfg.horizon);
    for t in 0..cfg.horizon {
        let widths: Vec<f64> = cfg.demand.iter().map(|row| row[t].width()).collect();
        let nu = c.nu_d[t];
        let tilde = c.delta_g_tilde[t];
        let rest = c.delta_g[t] - tilde;
        q1.push(hoeffding_margin(&widths, nu, tilde).map_err(|e| e.at(format!("q_g1 at t={t}")))?);
        q2.push(hoeffding_margin(&widths, nu, rest).map_err(|e| e.at(format!("q_g2 at t={t}")))?);
    }
    Ok((q1, q2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures::small_config;
    use crate::model::BoundedRV;
    use std::f64::consts::E;

    #[test]
    fn chromatic_examples() {
        assert_eq!(chromatic_upper_bound(&DependencyGraph::edgeless(5)), 1);
        assert_eq!(chromatic_upper_bound(&DependencyGraph::complete(4)), 4);
        assert_eq!(chromatic_upper_bound(&DependencyGraph::cycle(5)), 3);
        assert_eq!(chromatic_upper_bound(&DependencyGraph::edgeless(0)), 1);
    }

    #[test]
    fn hoeffding_examples() {
        let q = hoeffding_margin(&[2.0], 1.0, 1.0 / E).unwrap();
        assert!((q - 2.0).abs() < 1e-12);
        assert_eq!(hoeffding_margin(&[3.0, 4.0], 2.0, 1.0).unwrap(), 0.0);
        assert_eq!(hoeffding_margin(&[0.0, 0.0], 1.0, 0.05).unwrap(), 0.0);
    }

    #[test]
    fn hoeffding_domain_errors() {
        assert_eq!(hoeffding_margin(&[1.0], 1.0, 0.0), Err(ChanceError::Confidence(0.0)));
        assert_eq!(hoeffding_margin(&[1.0], 1.0, 1.5), Err(ChanceError::Confidence(1.5)));
        assert_eq!(hoeffding_margin(&[1.0], 0.0, 0.5), Err(ChanceError::Nu(0.0)));
        assert!(hoeffding_margin(&[1.0], 1.0, -0.1).is_err());
    }

    fn one_step(width: f64) -> MicrogridConfig {
        let mut cfg = small_config(1, 1);
        cfg.battery.eta = 1.0;
        cfg.battery.dt = 1.0;
        cfg.renewable = vec![BoundedRV::new(0.0, width, width / 2.0)];
        cfg
    }

    #[test]
    fn soc_margin_hand_value() {
        let mut cfg = one_step(2.0);
        cfg.chance.delta_x_tilde = vec![1.0 / E];
        let (q1, _) = soc_margins(&cfg).unwrap();
        assert!((q1[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn soc_margin_vanishes_at_full_confidence_split() {
        let mut cfg = small_config(2, 4);
        cfg.chance.delta_x_tilde = vec![1.0; 4];
        cfg.chance.delta_x = vec![2.0; 4];
        let (q1, q2) = soc_margins(&cfg).unwrap();
        assert_eq!(q1, vec![0.0; 4]);
        assert!(q2.iter().all(|&q| q == 0.0));
    }

    #[test]
    fn final_margin_hand_value() {
        let mut cfg = small_config(1, 2);
        cfg.battery.eta = 1.0;
        cfg.renewable = vec![BoundedRV::new(0.0, 1.0, 0.5); 2];
        cfg.chance.delta_final_tilde = (-2.0f64).exp();
        let (q1, _) = final_soc_margins(&cfg).unwrap();
        assert!((q1 - 2.0).abs() < 1e-12);

        cfg.chance.delta_final_tilde = 1.0;
        cfg.chance.delta_final = 2.0;
        assert_eq!(final_soc_margins(&cfg).unwrap().0, 0.0);
    }

    #[test]
    fn final_margins_scale_with_log_ratio() {
        let mut cfg = small_config(2, 5);
        cfg.chance.delta_final = 0.9;
        cfg.chance.delta_final_tilde = 0.05;
        let (q1, q2) = final_soc_margins(&cfg).unwrap();
        let ratio = (0.05f64.ln() / 0.85f64.ln()).sqrt();
        assert!((q1 - q2 * ratio).abs() < 1e-12 * q1);
    }

    #[test]
    fn grid_margin_examples() {
        let mut cfg = small_config(1, 1);
        cfg.demand = vec![vec![BoundedRV::new(1.0, 3.0, 2.0)]];
        cfg.chance.delta_g_tilde = vec![1.0 / E];
        assert!((grid_margins(&cfg).unwrap().0[0] - 2.0).abs() < 1e-12);

        let w = 0.7;
        let mut cfg = small_config(4, 2);
        cfg.demand = vec![vec![BoundedRV::new(1.0, 1.0 + w, 1.2); 2]; 4];
        let (q1, _) = grid_margins(&cfg).unwrap();
        let expect = 2.0 * w * (-(0.05f64).ln()).sqrt();
        assert!((q1[1] - expect).abs() < 1e-12);

        cfg.demand = vec![vec![BoundedRV::degenerate(1.0); 2]; 4];
        let (q1, q2) = grid_margins(&cfg).unwrap();
        assert_eq!((q1, q2), (vec![0.0; 2], vec![0.0; 2]));
    }

    #[test]
    fn soc_margins_grow_with_equal_widths() {
        let cfg = small_config(2, 6);
        let (q1, q2) = soc_margins(&cfg).unwrap();
        assert!(q1.windows(2).all(|w| w[0] <= w[1]));
        assert!(q2.windows(2).all(|w| w[0] <= w[1]));
    }
}
