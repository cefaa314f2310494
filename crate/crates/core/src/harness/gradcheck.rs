//! Adjoint gradient against central finite differences of the closed-loop
//! loss.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::dataset::{build_dataset, internal_systems};
use crate::error::{Error, Result};
use crate::grid::{FaultScenario, InternalSystem};
use crate::integrators::{TimeGrid, TrapezoidalOptions};
use crate::mlp::NeuralOdeModel;
use crate::neudye::data::ScenarioData;
use crate::neudye::{fit_normalization, loss, pi_gradient, simulate_closed_loop, HybridState, LossScales, PhysicsJacobian};
use crate::par::Execution;

/// Corrector settings tight enough that finite differences resolve the
/// gradient.
pub const GRADCHECK_INTEGRATOR: TrapezoidalOptions = TrapezoidalOptions {
    tol: 1e-13,
    max_iter: 500,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradcheckEntry {
    pub index: usize,
    pub adjoint: f64,
    pub finite_difference: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub loss: f64,
    pub entries: Vec<GradcheckEntry>,
    /// Over coordinates with `|grad| > 1e-8`.
    pub max_relative_error: f64,
}

/// Closed-loop loss at parameters `theta`.
pub fn closed_loop_loss(
    model: &NeuralOdeModel,
    insys: &InternalSystem,
    data: &ScenarioData,
    scales: &LossScales,
    opts: &TrapezoidalOptions,
) -> Result<f64> {
    let x0 = HybridState {
        x_in: data.x_in(0).to_vec(),
        x_ex: data.x_ex(0).to_vec(),
        t: data.grid.t0,
    };
    let traj = simulate_closed_loop(model, insys, &x0, &data.scenario, &data.grid, opts)?;
    Ok(loss(&traj, data, scales)?.total)
}

/// Compares `pi_gradient` with central differences on `coords`.
#[allow(clippy::too_many_arguments)]
pub fn check_gradient(
    model: &NeuralOdeModel,
    insys: &InternalSystem,
    data: &ScenarioData,
    physics: PhysicsJacobian,
    coords: &[usize],
    step: f64,
    opts: &TrapezoidalOptions,
) -> Result<GradcheckReport> {
    let scales = LossScales::from_model(model, data.n_in);
    let g = pi_gradient(model, insys, data, physics, &scales, opts)?;
    let mut entries = Vec::with_capacity(coords.len());
    let mut worst = 0.0f64;
    for &k in coords {
        let mut m = model.clone();
        m.theta[k] = model.theta[k] + step;
        let lp = closed_loop_loss(&m, insys, data, &scales, opts)?;
        m.theta[k] = model.theta[k] - step;
        let lm = closed_loop_loss(&m, insys, data, &scales, opts)?;
        let fd = (lp - lm) / (2.0 * step);
        let a = g.grad[k];
        let denom = a.abs().max(fd.abs());
        let rel = if denom > 0.0 { (a - fd).abs() / denom } else { 0.0 };
        if a.abs() > 1e-8 {
            worst = worst.max(rel);
        }
        entries.push(GradcheckEntry {
            index: k,
            adjoint: a,
            finite_difference: fd,
            relative_error: rel,
        });
    }
    Ok(GradcheckReport {
        loss: g.loss,
        entries,
        max_relative_error: worst,
    })
}

/// The configured gradient check: one fault on the first training bus over
/// the gradcheck horizon, a freshly initialized model and random
/// coordinates.
pub fn run_gradcheck(config: &ExperimentConfig) -> Result<GradcheckReport> {
    let gc = &config.gradcheck;
    let net = config.network()?;
    let features = config.feature_spec(&net);
    let grid = TimeGrid::new(config.grid.t0, config.grid.t0 + gc.horizon, config.grid.h)?;
    let bus = gc
        .fault_bus
        .or_else(|| config.train.fault_buses.first().copied())
        .ok_or_else(|| Error::Config("gradcheck needs a fault bus".into()))?;
    let scenario = FaultScenario {
        id: 0,
        fault_bus: Some(bus),
        start: config.fault_start,
        clear: gc.clearing,
        alpha: config.load_scale[0],
    }
    .snapped(&grid)?;
    let (data, _) = build_dataset(&net, &features, &[scenario], &grid, &GRADCHECK_INTEGRATOR, Execution::Sequential)?;
    let systems = internal_systems(&net, &features, &data)?;
    let layout = &systems[0].layout;
    let mut model = NeuralOdeModel::new(layout.n_ex(), layout.n_features(), &config.model.hidden, config.seed)?;
    fit_normalization(&mut model, &data, config.model.normalization_floor);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = gc.coordinates.min(model.n_params());
    let coords: Vec<usize> = sample(&mut rng, model.n_params(), n).into_vec();
    check_gradient(
        &model,
        &systems[0],
        &data.scenarios[0],
        PhysicsJacobian::Analytic,
        &coords,
        gc.fd_step,
        &GRADCHECK_INTEGRATOR,
    )
}
