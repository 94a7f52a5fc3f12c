//! TOML configuration format.
//!
//! ```toml
//! agents = 20
//! horizon = 24
//!
//! [battery]            # x0, x_min, x_max, capacity, dt; eta defaults to 1/capacity,
//! ...                  # u_max (scalar or per-agent) to capacity / (agents * dt)
//! [chance]             # per-time entries accept a scalar or a length-horizon array;
//! ...                  # nu_r / nu_d default to half the greedy chromatic bound
//! [tariff]
//! [renewable]          # mean + deviation, or mean + lower + upper
//! [[demand]]           # one table per profile; `count` agents share it
//! [dependencies]       # edge lists, default edgeless
//! [solver]
//! [experiment]
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chance::chromatic_upper_bound;
use crate::model::{
    validate, BatteryParams, BoundedRV, ChanceSpec, DependencyGraph, ExperimentSettings,
    MicrogridConfig, SolverSettings, TariffCostParams, ValidationReport,
};
use crate::solver::{Algorithm, Variant};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parse error at `{key}`: {message}")]
    Parse { key: String, message: String },
    #[error("schema error at `{key}`: {message}")]
    Schema { key: String, message: String },
    #[error("invalid configuration: {}", .0.first().map(ToString::to_string).unwrap_or_default())]
    Invalid(ValidationReport),
}

fn schema(key: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError::Schema {
        key: key.into(),
        message: message.into(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScalarOrVec {
    Scalar(f64),
    Vec(Vec<f64>),
}

impl ScalarOrVec {
    fn expand(&self, len: usize, key: &str) -> Result<Vec<f64>, ConfigError> {
        match self {
            ScalarOrVec::Scalar(x) => Ok(vec![*x; len]),
            ScalarOrVec::Vec(v) if v.len() == len => Ok(v.clone()),
            ScalarOrVec::Vec(v) => Err(schema(
                key,
                format!("expected a scalar or {len} entries, found {}", v.len()),
            )),
        }
    }

    fn compact(v: &[f64]) -> Self {
        match v.first() {
            Some(&x) if v.iter().all(|&y| y.to_bits() == x.to_bits()) => ScalarOrVec::Scalar(x),
            _ => ScalarOrVec::Vec(v.to_vec()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub agents: usize,
    pub horizon: usize,
    pub battery: BatteryFile,
    pub chance: ChanceFile,
    pub tariff: TariffFile,
    pub renewable: ProfileFile,
    pub demand: Vec<ProfileFile>,
    #[serde(default)]
    pub dependencies: DependenciesFile,
    #[serde(default)]
    pub solver: SolverFile,
    #[serde(default)]
    pub experiment: ExperimentFile,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatteryFile {
    pub x0: f64,
    pub x_min: f64,
    pub x_max: f64,
    pub capacity: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(default = "one")]
    pub dt: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u_max: Option<ScalarOrVec>,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChanceFile {
    pub delta_x: ScalarOrVec,
    pub delta_x_tilde: ScalarOrVec,
    pub delta_final: f64,
    pub delta_final_tilde: f64,
    pub delta_g: ScalarOrVec,
    pub delta_g_tilde: ScalarOrVec,
    pub r_target: f64,
    pub epsilon: f64,
    pub g_max: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nu_r: Option<ScalarOrVec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nu_d: Option<ScalarOrVec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TariffFile {
    pub k_tou: Vec<f64>,
    pub k_c: f64,
    pub alpha_dch: f64,
    pub beta_dch: f64,
}

/// A time profile of bounded random variables. Either `deviation` (relative
/// half-width around the mean) or both `lower` and `upper` must be given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileFile {
    pub mean: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deviation: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lower: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upper: Option<Vec<f64>>,
    /// Number of agents sharing this profile (demand only).
    #[serde(default = "one_usize", skip_serializing_if = "is_one")]
    pub count: usize,
}

fn one_usize() -> usize {
    1
}

fn is_one(x: &usize) -> bool {
    *x == 1
}

impl ProfileFile {
    fn resolve(&self, horizon: usize, key: &str) -> Result<Vec<BoundedRV>, ConfigError> {
        if self.mean.len() != horizon {
            return Err(schema(
                format!("{key}.mean"),
                format!("expected {horizon} entries, found {}", self.mean.len()),
            ));
        }
        match (&self.deviation, &self.lower, &self.upper) {
            (Some(dev), None, None) => Ok(self
                .mean
                .iter()
                .map(|&m| BoundedRV::symmetric(m, *dev))
                .collect()),
            (None, Some(lo), Some(hi)) => {
                for (name, v) in [("lower", lo), ("upper", hi)] {
                    if v.len() != horizon {
                        return Err(schema(
                            format!("{key}.{name}"),
                            format!("expected {horizon} entries, found {}", v.len()),
                        ));
                    }
                }
                Ok((0..horizon)
                    .map(|t| BoundedRV::new(lo[t], hi[t], self.mean[t]))
                    .collect())
            }
            _ => Err(schema(
                key,
                "give either `deviation` or both `lower` and `upper`",
            )),
        }
    }

    fn explicit(rvs: &[BoundedRV], count: usize) -> Self {
        Self {
            mean: rvs.iter().map(|r| r.mean).collect(),
            deviation: None,
            lower: Some(rvs.iter().map(|r| r.lower).collect()),
            upper: Some(rvs.iter().map(|r| r.upper).collect()),
            count,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DependenciesFile {
    /// Edges between time indices of the renewable inputs.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub renewable: Vec<[usize; 2]>,
    /// Edges between agent indices of the demands at one time step.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub demand: Vec<[usize; 2]>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlgorithmName {
    Semi,
    Central,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariantName {
    Consistent,
    Literal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverFile {
    pub algorithm: AlgorithmName,
    pub variant: VariantName,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub zeta: Option<f64>,
    pub zeta_fraction: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<ScalarOrVec>,
    pub alpha_fraction: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    pub gamma_fraction: f64,
    pub eps_u: f64,
    pub eps_lambda: f64,
    pub max_iters: usize,
    pub log_stride: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reported_lipschitz: Option<f64>,
}

impl Default for SolverFile {
    fn default() -> Self {
        SolverFile::from(&SolverSettings::default())
    }
}

impl From<&SolverSettings> for SolverFile {
    fn from(s: &SolverSettings) -> Self {
        Self {
            algorithm: match s.algorithm {
                Algorithm::SemiDecentralized => AlgorithmName::Semi,
                Algorithm::Centralized => AlgorithmName::Central,
            },
            variant: match s.variant {
                Variant::Consistent => VariantName::Consistent,
                Variant::Literal => VariantName::Literal,
            },
            zeta: s.zeta,
            zeta_fraction: s.zeta_fraction,
            alpha: s.alpha.as_ref().map(|a| ScalarOrVec::Vec(a.clone())),
            alpha_fraction: s.alpha_fraction,
            gamma: s.gamma,
            gamma_fraction: s.gamma_fraction,
            eps_u: s.eps_u,
            eps_lambda: s.eps_lambda,
            max_iters: s.max_iters,
            log_stride: s.log_stride,
            reported_lipschitz: s.reported_lipschitz,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentFile {
    pub seed: u64,
    pub validation_samples: usize,
    pub cost_samples: usize,
}

impl Default for ExperimentFile {
    fn default() -> Self {
        let d = ExperimentSettings::default();
        Self {
            seed: d.seed,
            validation_samples: d.validation_samples,
            cost_samples: d.cost_samples,
        }
    }
}

fn graph(
    nodes: usize,
    edges: &[[usize; 2]],
    key: &str,
) -> Result<DependencyGraph, ConfigError> {
    DependencyGraph::new(nodes, edges.iter().map(|e| (e[0], e[1])))
        .map_err(|e| schema(key, e.to_string()))
}

impl ConfigFile {
    /// Resolves defaults and shapes. Does not check value invariants.
    pub fn into_config(self) -> Result<MicrogridConfig, ConfigError> {
        let n = self.agents;
        let tau = self.horizon;
        if n == 0 {
            return Err(schema("agents", "at least one agent required"));
        }
        if tau == 0 {
            return Err(schema("horizon", "horizon must be at least 1"));
        }

        let b = &self.battery;
        let eta = b.eta.unwrap_or(1.0 / b.capacity);
        let u_max = match &b.u_max {
            Some(u) => u.expand(n, "battery.u_max")?,
            None => vec![b.capacity / (n as f64 * b.dt); n],
        };
        let battery = BatteryParams {
            x0: b.x0,
            x_min: b.x_min,
            x_max: b.x_max,
            capacity: b.capacity,
            eta,
            dt: b.dt,
            u_max,
        };

        let renewable_dependency = graph(tau, &self.dependencies.renewable, "dependencies.renewable")?;
        let demand_dependency = graph(n, &self.dependencies.demand, "dependencies.demand")?;

        let c = &self.chance;
        let nu_r = match &c.nu_r {
            Some(v) => v.expand(tau, "chance.nu_r")?,
            None => (1..=tau)
                .map(|t| chromatic_upper_bound(&renewable_dependency.induced_prefix(t)) as f64 / 2.0)
                .collect(),
        };
        let nu_d = match &c.nu_d {
            Some(v) => v.expand(tau, "chance.nu_d")?,
            None => vec![chromatic_upper_bound(&demand_dependency) as f64 / 2.0; tau],
        };
        let chance = ChanceSpec {
            delta_x: c.delta_x.expand(tau, "chance.delta_x")?,
            delta_x_tilde: c.delta_x_tilde.expand(tau, "chance.delta_x_tilde")?,
            delta_final: c.delta_final,
            delta_final_tilde: c.delta_final_tilde,
            delta_g: c.delta_g.expand(tau, "chance.delta_g")?,
            delta_g_tilde: c.delta_g_tilde.expand(tau, "chance.delta_g_tilde")?,
            r_target: c.r_target,
            epsilon: c.epsilon,
            g_max: c.g_max,
            nu_r,
            nu_d,
        };

        if self.tariff.k_tou.len() != tau {
            return Err(schema(
                "tariff.k_tou",
                format!("expected {tau} entries, found {}", self.tariff.k_tou.len()),
            ));
        }
        let tariff = TariffCostParams {
            k_tou: self.tariff.k_tou.clone(),
            k_c: self.tariff.k_c,
            alpha_dch: self.tariff.alpha_dch,
            beta_dch: self.tariff.beta_dch,
        };

        let renewable = self.renewable.resolve(tau, "renewable")?;

        if self.demand.is_empty() {
            return Err(schema("demand", "at least one demand profile required"));
        }
        let mut demand = Vec::with_capacity(n);
        for (k, p) in self.demand.iter().enumerate() {
            let key = format!("demand[{k}]");
            if p.count == 0 {
                return Err(schema(format!("{key}.count"), "count must be at least 1"));
            }
            let row = p.resolve(tau, &key)?;
            demand.extend(std::iter::repeat_n(row, p.count));
        }
        if demand.len() != n {
            return Err(schema(
                "demand",
                format!("profiles cover {} agents, expected {n}", demand.len()),
            ));
        }

        let s = &self.solver;
        let solver = SolverSettings {
            algorithm: match s.algorithm {
                AlgorithmName::Semi => Algorithm::SemiDecentralized,
                AlgorithmName::Central => Algorithm::Centralized,
            },
            variant: match s.variant {
                VariantName::Consistent => Variant::Consistent,
                VariantName::Literal => Variant::Literal,
            },
            zeta: s.zeta,
            zeta_fraction: s.zeta_fraction,
            alpha: s
                .alpha
                .as_ref()
                .map(|a| a.expand(n, "solver.alpha"))
                .transpose()?,
            alpha_fraction: s.alpha_fraction,
            gamma: s.gamma,
            gamma_fraction: s.gamma_fraction,
            eps_u: s.eps_u,
            eps_lambda: s.eps_lambda,
            max_iters: s.max_iters,
            log_stride: s.log_stride,
            reported_lipschitz: s.reported_lipschitz,
        };
        let experiment = ExperimentSettings {
            seed: self.experiment.seed,
            validation_samples: self.experiment.validation_samples,
            cost_samples: self.experiment.cost_samples,
        };

        Ok(MicrogridConfig {
            n_agents: n,
            horizon: tau,
            battery,
            chance,
            tariff,
            renewable,
            demand,
            renewable_dependency,
            demand_dependency,
            solver,
            experiment,
        })
    }

    /// Fully explicit file form of a config; reloading it reproduces `cfg` exactly.
    pub fn from_config(cfg: &MicrogridConfig) -> Self {
        let b = &cfg.battery;
        let c = &cfg.chance;
        let mut demand: Vec<ProfileFile> = Vec::new();
        let mut i = 0;
        while i < cfg.demand.len() {
            let mut j = i + 1;
            while j < cfg.demand.len() && cfg.demand[j] == cfg.demand[i] {
                j += 1;
            }
            demand.push(ProfileFile::explicit(&cfg.demand[i], j - i));
            i = j;
        }
        let edges = |g: &DependencyGraph| g.edges().map(|(a, b)| [a, b]).collect();
        Self {
            agents: cfg.n_agents,
            horizon: cfg.horizon,
            battery: BatteryFile {
                x0: b.x0,
                x_min: b.x_min,
                x_max: b.x_max,
                capacity: b.capacity,
                eta: Some(b.eta),
                dt: b.dt,
                u_max: Some(ScalarOrVec::compact(&b.u_max)),
            },
            chance: ChanceFile {
                delta_x: ScalarOrVec::compact(&c.delta_x),
                delta_x_tilde: ScalarOrVec::compact(&c.delta_x_tilde),
                delta_final: c.delta_final,
                delta_final_tilde: c.delta_final_tilde,
                delta_g: ScalarOrVec::compact(&c.delta_g),
                delta_g_tilde: ScalarOrVec::compact(&c.delta_g_tilde),
                r_target: c.r_target,
                epsilon: c.epsilon,
                g_max: c.g_max,
                nu_r: Some(ScalarOrVec::compact(&c.nu_r)),
                nu_d: Some(ScalarOrVec::compact(&c.nu_d)),
            },
            tariff: TariffFile {
                k_tou: cfg.tariff.k_tou.clone(),
                k_c: cfg.tariff.k_c,
                alpha_dch: cfg.tariff.alpha_dch,
                beta_dch: cfg.tariff.beta_dch,
            },
            renewable: ProfileFile::explicit(&cfg.renewable, 1),
            demand,
            dependencies: DependenciesFile {
                renewable: edges(&cfg.renewable_dependency),
                demand: edges(&cfg.demand_dependency),
            },
            solver: SolverFile::from(&cfg.solver),
            experiment: ExperimentFile {
                seed: cfg.experiment.seed,
                validation_samples: cfg.experiment.validation_samples,
                cost_samples: cfg.experiment.cost_samples,
            },
        }
    }
}

/// Parses and resolves a config without checking value invariants.
pub fn parse_config(source: &str) -> Result<MicrogridConfig, ConfigError> {
    let de = toml::Deserializer::parse(source).map_err(|e| ConfigError::Parse {
        key: ".".into(),
        message: e.to_string(),
    })?;
    let file: ConfigFile = serde_path_to_error::deserialize(de).map_err(|e| {
        let key = e.path().to_string();
        ConfigError::Parse {
            key,
            message: e.into_inner().message().to_string(),
        }
    })?;
    file.into_config()
}

/// Parses, resolves and validates a config.
pub fn load_config(source: &str) -> Result<MicrogridConfig, ConfigError> {
    let cfg = parse_config(source)?;
    let report = validate(&cfg);
    if report.is_ok() {
        Ok(cfg)
    } else {
        Err(ConfigError::Invalid(report))
    }
}

pub fn read_config_source(path: &Path) -> Result<String, ConfigError> {
    fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_config_file(path: &Path) -> Result<MicrogridConfig, ConfigError> {
    load_config(&read_config_source(path)?)
}

pub fn to_toml(cfg: &MicrogridConfig) -> String {
    toml::to_string(&ConfigFile::from_config(cfg)).expect("config is always serializable")
}
