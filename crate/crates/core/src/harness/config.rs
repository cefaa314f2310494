//! Experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::network::Partition;
use crate::grid::{BusId, FeatureSpec, NetworkModel};
use crate::integrators::{TimeGrid, TrapezoidalOptions};
use crate::neudye::{DnnOptions, TrainOptions};
use crate::par::Execution;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    /// Trained fault locations with unseen clearing times.
    Holdout,
    /// Unseen fault locations.
    Test,
}

impl Split {
    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Holdout => "holdout",
            Split::Test => "test",
        }
    }

    /// Offset added to scenario ids so ids are unique across splits.
    pub fn id_base(&self) -> usize {
        match self {
            Split::Train => 0,
            Split::Holdout => 1000,
            Split::Test => 2000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Open,
    Pi,
    Pg,
    Dnn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub fault_buses: Vec<BusId>,
    /// Clearing-time range (s, absolute).
    pub clearing: [f64; 2],
    pub count: usize,
    /// Load-scale range; defaults to the experiment-wide range.
    #[serde(default)]
    pub load_scale: Option<[f64; 2]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub t0: f64,
    pub tn: f64,
    pub h: f64,
}

impl GridConfig {
    pub fn time_grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.t0, self.tn, self.h)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    /// Smallest per-feature normalization scale.
    pub normalization_floor: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            normalization_floor: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    Connectivity,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PgConfig {
    pub mask: MaskKind,
    /// Couplings below this magnitude are treated as absent.
    pub coupling_tol: f64,
}

impl Default for PgConfig {
    fn default() -> Self {
        Self {
            mask: MaskKind::Connectivity,
            coupling_tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckConfig {
    pub horizon: f64,
    pub coordinates: usize,
    pub fd_step: f64,
    pub fault_bus: Option<BusId>,
    pub clearing: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            horizon: 0.5,
            coordinates: 20,
            fd_step: 1e-6,
            fault_bus: None,
            clearing: 0.15,
        }
    }
}

fn default_fault_start() -> f64 {
    0.1
}

fn default_load_scale() -> [f64; 2] {
    [1.0, 1.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Built-in network name or a path to a network JSON file, relative to
    /// the config file.
    pub network: String,
    #[serde(default)]
    pub partition: Option<Partition>,
    #[serde(default)]
    pub features: Option<FeatureSpec>,
    pub train: SplitConfig,
    #[serde(default)]
    pub holdout: Option<SplitConfig>,
    pub test: SplitConfig,
    #[serde(default = "default_fault_start")]
    pub fault_start: f64,
    #[serde(default = "default_load_scale")]
    pub load_scale: [f64; 2],
    pub grid: GridConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default = "default_mode")]
    pub mode: TrainMode,
    #[serde(default)]
    pub training: TrainOptions,
    #[serde(default)]
    pub dnn: DnnOptions,
    #[serde(default)]
    pub pg: PgConfig,
    #[serde(default)]
    pub gradcheck: GradcheckConfig,
    #[serde(default)]
    pub integrator: TrapezoidalOptions,
    #[serde(default)]
    pub execution: Execution,
    pub seed: u64,
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

fn default_mode() -> TrainMode {
    TrainMode::Pi
}

impl ExperimentConfig {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_json_str(&s)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf);
        Ok(cfg)
    }

    /// Built-in desk-scale experiment on the 9-bus grid.
    pub fn builtin(name: &str) -> Result<Self> {
        let src = match name {
            "wscc9" => include_str!("../../configs/wscc9.json"),
            "two_machine" => include_str!("../../configs/two_machine.json"),
            other => return Err(Error::Config(format!("unknown builtin config `{other}`"))),
        };
        Self::from_json_str(src)
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = (self.load_scale[0], self.load_scale[1]);
        if !(0.5 <= lo && lo <= hi && hi <= 1.5) {
            return Err(Error::Config(format!("load-scale range [{lo}, {hi}] must lie in [0.5, 1.5]")));
        }
        self.grid.time_grid()?;
        for (name, sp) in self.splits() {
            if sp.fault_buses.is_empty() && sp.count > 0 {
                return Err(Error::Config(format!("{} split has no fault buses", name.name())));
            }
            let [a, b] = sp.clearing;
            if !(a <= b && a > self.fault_start) {
                return Err(Error::Config(format!(
                    "{} clearing range [{a}, {b}] must follow the fault start {}",
                    name.name(),
                    self.fault_start
                )));
            }
        }
        Ok(())
    }

    pub fn splits(&self) -> Vec<(Split, &SplitConfig)> {
        let mut v = vec![(Split::Train, &self.train)];
        if let Some(h) = &self.holdout {
            v.push((Split::Holdout, h));
        }
        v.push((Split::Test, &self.test));
        v
    }

    pub fn split(&self, split: Split) -> Result<&SplitConfig> {
        match split {
            Split::Train => Ok(&self.train),
            Split::Test => Ok(&self.test),
            Split::Holdout => self
                .holdout
                .as_ref()
                .ok_or_else(|| Error::Config("config has no holdout split".into())),
        }
    }

    /// Loads the network and applies the partition override.
    pub fn network(&self) -> Result<NetworkModel> {
        let mut net = match NetworkModel::builtin(&self.network) {
            Ok(net) => net,
            Err(_) => {
                let path = match &self.base_dir {
                    Some(dir) => dir.join(&self.network),
                    None => PathBuf::from(&self.network),
                };
                NetworkModel::from_file(&path)
                    .map_err(|e| Error::Config(format!("network {}: {e}", path.display())))?
            }
        };
        if let Some(p) = &self.partition {
            net.partition = p.clone();
            net.validate()?;
        }
        Ok(net)
    }

    pub fn feature_spec(&self, net: &NetworkModel) -> FeatureSpec {
        self.features.clone().unwrap_or_else(|| FeatureSpec::default_for(net))
    }
}
