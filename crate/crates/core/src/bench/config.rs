//! Benchmark configuration: profiles, TOML overrides and grid enumeration.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::node::GradientMethod;
use crate::nssm::{BlockKind, LinearMapKind};
use crate::odeint::SolverConfig;
use crate::subspace::SubspaceMethod;
use crate::systems::BUILTIN_SYSTEMS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Node,
    Nssm,
    Lssm,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Node, Family::Nssm, Family::Lssm];

    pub fn name(self) -> &'static str {
        match self {
            Family::Node => "node",
            Family::Nssm => "nssm",
            Family::Lssm => "lssm",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "node" => Ok(Family::Node),
            "nssm" => Ok(Family::Nssm),
            "lssm" => Ok(Family::Lssm),
            other => Err(Error::Config(format!("unknown model family `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Desk,
    Paper,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(Error::Config(format!("unknown profile `{other}`"))),
        }
    }
}

/// Hyperparameters of one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum TrialParams {
    Node { latent_multiplier: usize, field_hidden: usize, encoder_hidden: usize },
    Nssm { linear_map: LinearMapKind, block: BlockKind, q_dx: f64, n_steps: usize, state_multiplier: usize },
    Lssm { method: SubspaceMethod, n_x: usize, horizon: usize },
}

impl TrialParams {
    pub fn family(&self) -> Family {
        match self {
            TrialParams::Node { .. } => Family::Node,
            TrialParams::Nssm { .. } => Family::Nssm,
            TrialParams::Lssm { .. } => Family::Lssm,
        }
    }

    /// Short stable label used in trial keys and file names.
    pub fn label(&self) -> String {
        match self {
            TrialParams::Node { latent_multiplier, field_hidden, encoder_hidden } => {
                format!("m{latent_multiplier}_f{field_hidden}_e{encoder_hidden}")
            }
            TrialParams::Nssm { linear_map, block, q_dx, n_steps, state_multiplier } => {
                let map = match linear_map {
                    LinearMapKind::Plain => "plain",
                    LinearMapKind::SoftSvd => "svd",
                };
                let block = match block {
                    BlockKind::Linear => "lin",
                    BlockKind::Mlp => "mlp",
                };
                format!("{map}_{block}_q{q_dx}_s{n_steps}_x{state_multiplier}")
            }
            TrialParams::Lssm { method, n_x, horizon } => format!("{}_x{n_x}_f{horizon}", method.name()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NodeGrid {
    pub latent_multiplier: Vec<usize>,
    pub field_hidden: Vec<usize>,
    pub encoder_hidden: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NssmGrid {
    pub linear_map: Vec<LinearMapKind>,
    pub block: Vec<BlockKind>,
    pub q_dx: Vec<f64>,
    pub n_steps: Vec<usize>,
    pub state_multiplier: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LssmGrid {
    pub method: Vec<SubspaceMethod>,
    pub n_x: Vec<usize>,
    pub horizon: Vec<usize>,
}

impl Default for NodeGrid {
    fn default() -> Self {
        Self { latent_multiplier: vec![1, 5, 10], field_hidden: vec![32, 64, 128, 256], encoder_hidden: vec![32, 64, 128, 256] }
    }
}

impl Default for NssmGrid {
    fn default() -> Self {
        Self {
            linear_map: vec![LinearMapKind::Plain, LinearMapKind::SoftSvd],
            block: vec![BlockKind::Linear, BlockKind::Mlp],
            q_dx: vec![0.0, 0.1, 0.2],
            n_steps: vec![1, 5, 10, 20, 50],
            state_multiplier: vec![10, 30, 50],
        }
    }
}

impl Default for LssmGrid {
    fn default() -> Self {
        Self { method: SubspaceMethod::ALL.to_vec(), n_x: vec![10, 20, 40, 60, 80], horizon: vec![1, 5, 10, 20, 50] }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub node: NodeGrid,
    pub nssm: NssmGrid,
    pub lssm: LssmGrid,
}

impl GridSpec {
    /// Analytic size of the Cartesian product for `family`.
    pub fn count(&self, family: Family) -> usize {
        match family {
            Family::Node => self.node.latent_multiplier.len() * self.node.field_hidden.len() * self.node.encoder_hidden.len(),
            Family::Nssm => {
                let g = &self.nssm;
                g.linear_map.len() * g.block.len() * g.q_dx.len() * g.n_steps.len() * g.state_multiplier.len()
            }
            Family::Lssm => self.lssm.method.len() * self.lssm.n_x.len() * self.lssm.horizon.len(),
        }
    }

    /// Every grid point of `family`, last axis varying fastest.
    pub fn trials(&self, family: Family) -> Vec<TrialParams> {
        let mut out = Vec::new();
        match family {
            Family::Node => {
                let g = &self.node;
                for &latent_multiplier in &g.latent_multiplier {
                    for &field_hidden in &g.field_hidden {
                        for &encoder_hidden in &g.encoder_hidden {
                            out.push(TrialParams::Node { latent_multiplier, field_hidden, encoder_hidden });
                        }
                    }
                }
            }
            Family::Nssm => {
                let g = &self.nssm;
                for &linear_map in &g.linear_map {
                    for &block in &g.block {
                        for &q_dx in &g.q_dx {
                            for &n_steps in &g.n_steps {
                                for &state_multiplier in &g.state_multiplier {
                                    out.push(TrialParams::Nssm { linear_map, block, q_dx, n_steps, state_multiplier });
                                }
                            }
                        }
                    }
                }
            }
            Family::Lssm => {
                let g = &self.lssm;
                for &method in &g.method {
                    for &n_x in &g.n_x {
                        for &horizon in &g.horizon {
                            out.push(TrialParams::Lssm { method, n_x, horizon });
                        }
                    }
                }
            }
        }
        out
    }

    pub fn validate(&self, families: &[Family]) -> Result<()> {
        for &f in families {
            if self.count(f) == 0 {
                return Err(Error::Config(format!("grid for {f} has an empty axis")));
            }
        }
        let positive = |name: &str, v: &[usize]| {
            if v.contains(&0) {
                Err(Error::Config(format!("grid axis {name} must be positive")))
            } else {
                Ok(())
            }
        };
        positive("node.latent_multiplier", &self.node.latent_multiplier)?;
        positive("node.field_hidden", &self.node.field_hidden)?;
        positive("node.encoder_hidden", &self.node.encoder_hidden)?;
        positive("nssm.n_steps", &self.nssm.n_steps)?;
        positive("nssm.state_multiplier", &self.nssm.state_multiplier)?;
        positive("lssm.n_x", &self.lssm.n_x)?;
        positive("lssm.horizon", &self.lssm.horizon)?;
        if self.nssm.q_dx.iter().any(|q| !(*q >= 0.0)) {
            return Err(Error::Config("grid axis nssm.q_dx must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NodeTraining {
    pub lr: f64,
    pub epochs: usize,
    /// Future samples per training window.
    pub n_steps: usize,
    pub batch_size: Option<usize>,
    pub eval_every: usize,
    pub dev_horizon: Option<usize>,
    pub gradient: GradientMethod,
    pub solver: SolverConfig,
}

impl Default for NodeTraining {
    fn default() -> Self {
        Self {
            lr: 0.01,
            epochs: 2000,
            n_steps: 1,
            batch_size: None,
            eval_every: 100,
            dev_horizon: None,
            gradient: GradientMethod::Adjoint,
            solver: SolverConfig::dopri5(1e-6, 1e-8),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NssmTraining {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: Option<usize>,
    pub eval_every: usize,
    pub dev_horizon: Option<usize>,
    pub svd_weight: f64,
    /// Penalize outputs outside the widened training range.
    pub output_bounds: bool,
}

impl Default for NssmTraining {
    fn default() -> Self {
        Self { lr: 0.003, weight_decay: 0.01, epochs: 5000, batch_size: None, eval_every: 50, dev_horizon: None, svd_weight: 1.0, output_bounds: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LssmSettings {
    /// Rows preceding a forecast used to estimate the initial state.
    pub x0_window: usize,
}

impl Default for LssmSettings {
    fn default() -> Self {
        Self { x0_window: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub systems: Vec<String>,
    pub families: Vec<Family>,
    /// Model initialization seeds; one trial per grid point and seed.
    pub seeds: Vec<u64>,
    /// Seed of the excitation signals.
    pub data_seed: u64,
    /// Overrides the default series length of every system.
    pub n_samples: Option<usize>,
    /// Per-system CSV files used instead of the emulators.
    pub data_files: BTreeMap<String, PathBuf>,
    pub output_dir: PathBuf,
    pub timing_repeats: usize,
    pub grid: GridSpec,
    pub node: NodeTraining,
    pub nssm: NssmTraining,
    pub lssm: LssmSettings,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self::profile(Profile::Paper)
    }
}

impl BenchConfig {
    pub fn profile(profile: Profile) -> Self {
        let full = Self {
            systems: BUILTIN_SYSTEMS.iter().map(|s| s.to_string()).collect(),
            families: Family::ALL.to_vec(),
            seeds: vec![0],
            data_seed: 0,
            n_samples: None,
            data_files: BTreeMap::new(),
            output_dir: PathBuf::from("results"),
            timing_repeats: 5,
            grid: GridSpec::default(),
            node: NodeTraining::default(),
            nssm: NssmTraining::default(),
            lssm: LssmSettings::default(),
        };
        match profile {
            Profile::Paper => full,
            Profile::Desk => Self {
                timing_repeats: 3,
                grid: GridSpec {
                    node: NodeGrid { latent_multiplier: vec![1, 5], field_hidden: vec![64, 128], encoder_hidden: vec![32, 64] },
                    nssm: NssmGrid {
                        linear_map: vec![LinearMapKind::Plain, LinearMapKind::SoftSvd],
                        block: vec![BlockKind::Linear, BlockKind::Mlp],
                        q_dx: vec![0.0, 0.1],
                        n_steps: vec![10, 20],
                        state_multiplier: vec![10, 30],
                    },
                    lssm: LssmGrid { method: SubspaceMethod::ALL.to_vec(), n_x: vec![10, 20], horizon: vec![10, 20] },
                },
                node: NodeTraining { epochs: 2000, batch_size: Some(64), eval_every: 25, ..NodeTraining::default() },
                nssm: NssmTraining { epochs: 1500, batch_size: Some(128), ..NssmTraining::default() },
                ..full
            },
        }
    }

    /// Profile defaults overridden by the keys present in `text`.
    pub fn from_toml(text: &str, profile: Profile) -> Result<Self> {
        let overrides: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let base = toml::Table::try_from(Self::profile(profile)).map_err(|e| Error::Config(e.to_string()))?;
        let merged = merge(base, overrides);
        let cfg: Self = toml::Value::Table(merged).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path, profile: Profile) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, profile)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.systems.is_empty() || self.families.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("systems, families and seeds must be non-empty".into()));
        }
        for s in &self.systems {
            if !BUILTIN_SYSTEMS.contains(&s.as_str()) {
                return Err(Error::Config(format!("unknown system `{s}`")));
            }
        }
        for s in self.data_files.keys() {
            if !self.systems.contains(s) {
                return Err(Error::Config(format!("data file given for unlisted system `{s}`")));
            }
        }
        self.grid.validate(&self.families)?;
        let n = &self.node;
        if !(n.lr > 0.0) || n.epochs == 0 || n.n_steps == 0 || n.eval_every == 0 || n.batch_size == Some(0) {
            return Err(Error::Config("node training settings must be positive".into()));
        }
        n.solver.validate().map_err(|e| Error::Config(format!("node solver: {e}")))?;
        let s = &self.nssm;
        if !(s.lr > 0.0) || s.epochs == 0 || s.eval_every == 0 || s.batch_size == Some(0) || !(s.weight_decay >= 0.0) || !(s.svd_weight >= 0.0) {
            return Err(Error::Config("nssm training settings must be positive".into()));
        }
        if self.lssm.x0_window == 0 || self.timing_repeats < 3 {
            return Err(Error::Config("lssm.x0_window must be positive and timing_repeats at least 3".into()));
        }
        if self.n_samples.is_some_and(|n| n < 30) {
            return Err(Error::Config("n_samples must be at least 30".into()));
        }
        Ok(())
    }

    /// All trials in execution order: system, family, grid point, seed.
    pub fn trials(&self) -> Vec<Trial> {
        let mut out = Vec::new();
        for system in &self.systems {
            for &family in &self.families {
                for params in self.grid.trials(family) {
                    for &seed in &self.seeds {
                        out.push(Trial { system: system.clone(), params: params.clone(), seed });
                    }
                }
            }
        }
        out
    }
}

fn merge(mut base: toml::Table, over: toml::Table) -> toml::Table {
    for (k, v) in over {
        match (base.remove(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => {
                base.insert(k, toml::Value::Table(merge(b, o)));
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
    base
}

/// One unit of work in a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub system: String,
    pub params: TrialParams,
    pub seed: u64,
}

impl Trial {
    pub fn family(&self) -> Family {
        self.params.family()
    }

    /// Identity used for resuming; unique within a sweep.
    pub fn key(&self) -> String {
        format!("{}/{}/{}/seed{}", self.system, self.family(), self.params.label(), self.seed)
    }
}

/// Series subsampling applied to the NSSM family only.
pub fn nssm_downsample_factor(system: &str) -> usize {
    match system {
        "tank" => 10,
        "vehicle" => 8,
        _ => 1,
    }
}
