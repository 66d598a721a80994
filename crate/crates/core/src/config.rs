//! TOML run configuration.
//!
//! ```toml
//! [model]
//! lambda_l = 1.0
//! lambda_g = 2.0
//! gamma = 1.0
//! pi = "geometric(0.5)"      # or { 1 = 0.3, 2 = 0.7 }, "poisson(1.5)+1", "delta(3)"
//!
//! [initial]
//! kind = "binomial"
//! q = 0.1
//!
//! [fp]
//! horizon = 20.0
//! dt = 1e-3
//! ```
//!
//! Unknown keys are errors. Each subcommand reads only its own table.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{JointDist, Model, ModelError, Rates, SizeDist};

pub const DEFAULT_TAIL_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid configuration: {0}")]
    Parse(String),
    #[error("override `{0}` must look like section.key=value")]
    BadOverride(String),
    #[error("missing [{0}] table")]
    MissingSection(&'static str),
    #[error("cannot parse pi = {0:?}; expected a map, delta(n), geometric(p) or poisson(mu)+1")]
    BadFamily(String),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PiSpec {
    Family(String),
    Map(BTreeMap<String, f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub lambda_l: f64,
    pub lambda_g: f64,
    pub gamma: f64,
    pub pi: PiSpec,
    /// Tail mass left out when truncating an infinite family.
    pub tail_tol: Option<f64>,
    /// Truncation point for an infinite family; overrides `tail_tol`.
    pub n_max: Option<usize>,
    /// Permit `lambda_l = 0` or `lambda_g = 0`.
    #[serde(default)]
    pub allow_zero_rates: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialSection {
    DiseaseFree,
    Binomial {
        q: f64,
    },
    Fixed {
        count: usize,
    },
    /// Stationary law under constant forcing `m`.
    Stationary {
        m: f64,
    },
    /// Stationary law at the endemic level `m*`.
    Endemic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointOutput {
    None,
    Final,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    pub households: usize,
    pub horizon: f64,
    pub sample_dt: f64,
    #[serde(default = "one")]
    pub replicas: usize,
    #[serde(default = "joint_none")]
    pub joint: JointOutput,
    /// Start of the window averaged into the long-run mean.
    pub average_from: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FpMode {
    Nonlinear,
    Forced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FpSection {
    #[serde(default = "nonlinear")]
    pub mode: FpMode,
    pub horizon: f64,
    pub dt: f64,
    /// Keep every `store_every`-th law for the `t,n,k,weight` export.
    pub store_every: Option<usize>,
    /// Forced mode: constant forcing.
    pub forcing: Option<f64>,
    /// Forced mode: CSV with columns `t` and `mean` (or `m`) on a uniform grid.
    pub forcing_file: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedpointSection {
    pub horizon: f64,
    pub dt: f64,
    pub tol: f64,
    #[serde(default = "k_max")]
    pub k_max: usize,
    #[serde(default)]
    pub picard: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EquilibriumSection {
    #[serde(default = "eq_tol")]
    pub tol: f64,
    #[serde(default)]
    pub discount: f64,
    /// Monte Carlo replicas for the simulated `R0`; `0` skips it.
    #[serde(default)]
    pub replicas: usize,
    pub derivative_step: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChaosSection {
    pub households: Vec<usize>,
    pub replicas: usize,
    pub horizon: f64,
    pub probe_dt: f64,
    pub fp_dt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchingSection {
    #[serde(default)]
    pub discount: f64,
    pub init_count: usize,
    pub horizon: f64,
    pub sample_dt: f64,
    #[serde(default = "one")]
    pub replicas: usize,
    /// Fit window for the growth rate; defaults to the second half of the run.
    pub window: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub initial: Option<InitialSection>,
    pub simulate: Option<SimulateSection>,
    pub fp: Option<FpSection>,
    pub fixedpoint: Option<FixedpointSection>,
    pub equilibrium: Option<EquilibriumSection>,
    pub chaos: Option<ChaosSection>,
    pub branching: Option<BranchingSection>,
}

fn one() -> usize {
    1
}
fn joint_none() -> JointOutput {
    JointOutput::None
}
fn nonlinear() -> FpMode {
    FpMode::Nonlinear
}
fn k_max() -> usize {
    200
}
fn eq_tol() -> f64 {
    1e-10
}

impl RunConfig {
    /// Parses `text`, applying `section.key=value` overrides first. Values
    /// are TOML literals; anything unparseable is taken as a string.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        table
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))
    }

    pub fn load(path: &std::path::Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.into(),
            source,
        })?;
        Self::parse(&text, overrides)
    }

    pub fn build_model(&self) -> Result<Model, ConfigError> {
        self.model.build()
    }

    /// SHA-256 of the canonical JSON of the effective configuration and
    /// seed, first 16 hex digits.
    pub fn hash(&self, seed: Option<u64>) -> String {
        #[derive(Serialize)]
        struct Hashed<'a> {
            config: &'a RunConfig,
            seed: Option<u64>,
        }
        let json = serde_json::to_vec(&Hashed { config: self, seed }).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), ConfigError> {
    let bad = || ConfigError::BadOverride(spec.to_string());
    let (path, raw) = spec.split_once('=').ok_or_else(bad)?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(bad());
    }
    let value = format!("v = {}", raw.trim())
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let mut cur = table;
    for k in &keys[..keys.len() - 1] {
        cur = cur
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(bad)?;
    }
    cur.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

impl ModelSection {
    pub fn build(&self) -> Result<Model, ConfigError> {
        let rates = Rates::new(self.lambda_l, self.lambda_g, self.gamma);
        let sizes = self.sizes()?;
        Ok(if self.allow_zero_rates {
            Model::validate_relaxed(rates, sizes)?
        } else {
            Model::validate(rates, sizes)?
        })
    }

    fn sizes(&self) -> Result<SizeDist, ConfigError> {
        let tail = self.tail_tol.unwrap_or(DEFAULT_TAIL_TOL);
        match &self.pi {
            PiSpec::Map(map) => {
                let mut parsed = BTreeMap::new();
                for (k, v) in map {
                    let n = k
                        .trim()
                        .parse::<usize>()
                        .map_err(|_| ConfigError::BadFamily(k.clone()))?;
                    parsed.insert(n, *v);
                }
                Ok(SizeDist::from_map(&parsed)?)
            }
            PiSpec::Family(s) => {
                let s = s.replace(' ', "");
                let arg = |prefix: &str, suffix: &str| -> Option<f64> {
                    s.strip_prefix(prefix)?.strip_suffix(suffix)?.parse().ok()
                };
                if let Some(n) = arg("delta(", ")") {
                    if n < 1.0 || n.fract() != 0.0 {
                        return Err(ConfigError::BadFamily(s));
                    }
                    Ok(SizeDist::delta(n as usize))
                } else if let Some(p) = arg("geometric(", ")") {
                    Ok(match self.n_max {
                        Some(n) => SizeDist::geometric_at(p, n)?,
                        None => SizeDist::geometric(p, tail)?,
                    })
                } else if let Some(mu) = arg("poisson(", ")+1") {
                    Ok(match self.n_max {
                        Some(n) => SizeDist::shifted_poisson_at(mu, n)?,
                        None => SizeDist::shifted_poisson(mu, tail)?,
                    })
                } else {
                    Err(ConfigError::BadFamily(s))
                }
            }
        }
    }
}

impl InitialSection {
    /// `m_star` is only consulted for [`InitialSection::Endemic`].
    pub fn build(
        &self,
        model: &Model,
        m_star: impl FnOnce() -> Result<f64, ConfigError>,
    ) -> Result<JointDist, ConfigError> {
        let sizes = model.sizes_arc().clone();
        Ok(match self {
            InitialSection::DiseaseFree => JointDist::disease_free(sizes),
            InitialSection::Binomial { q } => JointDist::binomial(sizes, *q)?,
            InitialSection::Fixed { count } => JointDist::fixed_count(sizes, *count)?,
            InitialSection::Stationary { m } => crate::equilibrium::stationary_dist(model, *m)
                .map_err(|e| ConfigError::Invalid(e.to_string()))?,
            InitialSection::Endemic => crate::equilibrium::stationary_dist(model, m_star()?)
                .map_err(|e| ConfigError::Invalid(e.to_string()))?,
        })
    }
}
