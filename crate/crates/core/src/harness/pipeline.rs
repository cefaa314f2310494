//! End-to-end steps shared by the CLI and the test suites.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, MaskKind, Split, TrainMode};
use super::dataset::{build_dataset, episodes, internal_systems, Dropped};
use super::evaluate::{evaluate, EvaluationReport, ScenarioSeries, Surrogate};
use super::io;
use super::scenarios::generate_scenarios;
use crate::error::{Error, Result};
use crate::grid::{HybridLayout, InternalSystem, NetworkModel};
use crate::mlp::NeuralOdeModel;
use crate::neudye::{
    connectivity_mask, dnn_baseline, fit_normalization, full_mask, pg_estimate_jacobian, train_open_loop, train_pg,
    train_pi, DiscreteSurrogate, DnnOptions, EpochRecord, JacobianEstimate, TrainOptions, TrainingSet,
};
use crate::integrators::TrapezoidalOptions;

/// Network, internal systems and measurements of one split.
pub struct SplitData {
    pub net: NetworkModel,
    pub data: TrainingSet,
    pub systems: Vec<InternalSystem>,
    pub dropped: Vec<Dropped>,
}

impl SplitData {
    pub fn episodes(&self) -> Vec<crate::neudye::Episode<'_>> {
        episodes(&self.data, &self.systems)
    }
}

/// Column names of dataset CSVs: `[x_in; x_ex; s_in; boundary voltages]`.
pub fn dataset_names(net: &NetworkModel, layout: &HybridLayout) -> Vec<String> {
    let mut names = layout.names_in();
    names.extend(layout.names_ex(net));
    names.extend(layout.names_features(net));
    names.extend(layout.boundary_bus_ids().iter().map(|b| format!("vb_{b}")));
    names
}

/// Simulates the ground truth of a split.
pub fn generate_split(config: &ExperimentConfig, split: Split) -> Result<SplitData> {
    let net = config.network()?;
    let features = config.feature_spec(&net);
    let scenarios = generate_scenarios(config, split)?;
    let grid = config.grid.time_grid()?;
    let (data, dropped) = build_dataset(&net, &features, &scenarios, &grid, &config.integrator, config.execution)?;
    let systems = internal_systems(&net, &features, &data)?;
    Ok(SplitData {
        net,
        data,
        systems,
        dropped,
    })
}

/// Reads a split from `<out>/dataset`, generating and writing it first when
/// absent.
pub fn load_split(config: &ExperimentConfig, out: &Path, split: Split) -> Result<SplitData> {
    let dir = out.join("dataset");
    if io::dataset_exists(&dir, split.name()) {
        let net = config.network()?;
        let features = config.feature_spec(&net);
        let data = io::read_dataset(&dir, split.name())?;
        let systems = internal_systems(&net, &features, &data)?;
        return Ok(SplitData {
            net,
            data,
            systems,
            dropped: Vec::new(),
        });
    }
    let sd = generate_split(config, split)?;
    write_split(config, out, split, &sd)?;
    Ok(sd)
}

pub fn write_split(config: &ExperimentConfig, out: &Path, split: Split, sd: &SplitData) -> Result<()> {
    let layout = HybridLayout::new(&sd.net, &config.feature_spec(&sd.net))?;
    io::write_dataset(&out.join("dataset"), split.name(), &sd.data, &dataset_names(&sd.net, &layout))
}

/// A trained surrogate of any mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TrainedModel {
    Node(NeuralOdeModel),
    Discrete(DiscreteSurrogate),
}

impl TrainedModel {
    pub fn surrogate(&self) -> Surrogate<'_> {
        match self {
            TrainedModel::Node(m) => Surrogate::Node(m),
            TrainedModel::Discrete(d) => Surrogate::Discrete(d),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let m: Self = io::read_json(path)?;
        if let TrainedModel::Node(n) = &m {
            n.validate()?;
        }
        Ok(m)
    }
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub mode: TrainMode,
    pub model: TrainedModel,
    pub history: Vec<EpochRecord>,
    pub jacobian: Option<JacobianEstimate>,
    /// One-step error of the discrete baseline.
    pub one_step_error: Option<f64>,
}

/// Initial surrogate with normalization fitted to the training data.
pub fn initial_model(config: &ExperimentConfig, train: &SplitData) -> Result<NeuralOdeModel> {
    let mut model = NeuralOdeModel::new(
        train.data.n_ex(),
        train.data.n_features(),
        &config.model.hidden,
        config.seed,
    )?;
    fit_normalization(&mut model, &train.data, config.model.normalization_floor);
    Ok(model)
}

pub fn estimate_jacobian(config: &ExperimentConfig, train: &SplitData) -> Result<JacobianEstimate> {
    let insys = train
        .systems
        .first()
        .ok_or_else(|| Error::Data("no training scenarios".into()))?;
    let mask = match config.pg.mask {
        MaskKind::Connectivity => connectivity_mask(insys, config.pg.coupling_tol),
        MaskKind::Full => full_mask(insys.n_in(), insys.n_ex()),
    };
    pg_estimate_jacobian(&train.data, &mask)
}

/// Trains a surrogate in the given mode on the training split.
pub fn train(config: &ExperimentConfig, train: &SplitData, mode: TrainMode) -> Result<TrainResult> {
    let model = initial_model(config, train)?;
    let mut opts = config.training.clone();
    opts.integrator = config.integrator;
    opts.execution = config.execution;
    let eps = train.episodes();
    match mode {
        TrainMode::Open => {
            let o = train_open_loop(model, &train.data, &opts)?;
            Ok(TrainResult {
                mode,
                model: TrainedModel::Node(o.model),
                history: o.history,
                jacobian: None,
                one_step_error: None,
            })
        }
        TrainMode::Pi => {
            let o = train_pi(model, &eps, &opts)?;
            Ok(TrainResult {
                mode,
                model: TrainedModel::Node(o.model),
                history: o.history,
                jacobian: None,
                one_step_error: None,
            })
        }
        TrainMode::Pg => {
            let est = estimate_jacobian(config, train)?;
            let o = train_pg(model, &est, &eps, &opts)?;
            Ok(TrainResult {
                mode,
                model: TrainedModel::Node(o.model),
                history: o.history,
                jacobian: Some(est),
                one_step_error: None,
            })
        }
        TrainMode::Dnn => {
            let mut dopts = config.dnn.clone();
            dopts.seed = config.seed;
            let o = dnn_baseline(model, &train.data, &dopts)?;
            Ok(TrainResult {
                mode,
                model: TrainedModel::Discrete(o.surrogate),
                history: o.history,
                jacobian: None,
                one_step_error: Some(o.one_step_error),
            })
        }
    }
}

/// Settings and inputs of a training run, written beside the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub mode: TrainMode,
    pub seed: u64,
    pub network: String,
    pub hidden: Vec<usize>,
    pub training: TrainOptions,
    /// Present for the discrete baseline only.
    pub dnn: Option<DnnOptions>,
    pub integrator: TrapezoidalOptions,
    /// Dataset files relative to the output directory.
    pub data: Vec<String>,
}

impl RunManifest {
    pub fn new(config: &ExperimentConfig, train: &SplitData, mode: TrainMode) -> Self {
        let split = Split::Train.name();
        let mut data = vec![format!("dataset/{split}_manifest.json")];
        data.extend(
            train
                .data
                .scenarios
                .iter()
                .map(|s| format!("dataset/{split}_{}.csv", s.scenario.id)),
        );
        let mut dnn = config.dnn.clone();
        dnn.seed = config.seed;
        Self {
            mode,
            seed: config.seed,
            network: config.network.clone(),
            hidden: config.model.hidden.clone(),
            training: config.training.clone(),
            dnn: (mode == TrainMode::Dnn).then_some(dnn),
            integrator: config.integrator,
            data,
        }
    }
}

/// Writes `model.json`, `loss_history.csv`, `train_manifest.json` and, for
/// gradient-estimated training, `jacobian.json`.
pub fn write_training(out: &Path, config: &ExperimentConfig, train: &SplitData, result: &TrainResult) -> Result<()> {
    io::write_json(&out.join("model.json"), &result.model)?;
    io::write_json(&out.join("train_manifest.json"), &RunManifest::new(config, train, result.mode))?;
    io::write_loss_history(&out.join("loss_history.csv"), &result.history)?;
    if let Some(j) = &result.jacobian {
        io::write_json(&out.join("jacobian.json"), j)?;
    }
    Ok(())
}

pub fn evaluate_split(config: &ExperimentConfig, model: &TrainedModel, sd: &SplitData) -> (EvaluationReport, Vec<ScenarioSeries>) {
    evaluate(
        model.surrogate(),
        &sd.episodes(),
        sd.net.base_frequency_hz,
        &config.integrator,
        config.execution,
    )
}

pub fn write_evaluation(out: &Path, report: &EvaluationReport, series: &[ScenarioSeries]) -> Result<()> {
    for s in series {
        io::write_series(out, s)?;
    }
    io::write_json(&out.join("report.json"), report)
}
