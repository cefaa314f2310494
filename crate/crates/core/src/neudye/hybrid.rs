//! Closed-loop co-simulation of the internal physics and the neural
//! surrogate of the external system.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::pg::JacobianEstimate;
use crate::error::{Error, Result};
use crate::grid::{FaultScenario, FaultStage, InternalSystem};
use crate::integrators::{integrate, TimeGrid, Trajectory, TrapezoidalOptions};
use crate::mlp::{ForwardCache, NeuralOdeModel};

/// Internal machine states and tie-line currents at one instant.
/// Tie-current component magnitude beyond which a closed-loop rollout counts
/// as diverged.
pub const DIVERGENCE_BOUND: f64 = 1e3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridState {
    pub x_in: Vec<f64>,
    pub x_ex: Vec<f64>,
    pub t: f64,
}

impl HybridState {
    /// `[x_in; x_ex]`.
    pub fn stacked(&self) -> Vec<f64> {
        let mut z = self.x_in.clone();
        z.extend_from_slice(&self.x_ex);
        z
    }
}

/// Closed-loop trajectory with states stacked as `[x_in; x_ex]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridTrajectory {
    pub traj: Trajectory,
    pub n_in: usize,
    pub events: Vec<usize>,
}

impl HybridTrajectory {
    pub fn len(&self) -> usize {
        self.traj.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traj.is_empty()
    }

    pub fn x_in(&self, i: usize) -> &[f64] {
        &self.traj.state(i)[..self.n_in]
    }

    pub fn x_ex(&self, i: usize) -> &[f64] {
        &self.traj.state(i)[self.n_in..]
    }
}

/// Where the adjoint takes `∂P̃/∂x_in` and `∂P̃/∂x_ex` from.
#[derive(Debug, Clone, Copy)]
pub enum PhysicsJacobian<'a> {
    Analytic,
    Estimated(&'a JacobianEstimate),
}

/// Checks that the model and the internal system agree on dimensions.
pub(crate) fn check_dims(model: &NeuralOdeModel, insys: &InternalSystem) -> Result<()> {
    if model.n_ex() != insys.n_ex() || model.n_features() != insys.n_features() {
        return Err(Error::Structural(format!(
            "model expects {} tie states and {} features, system has {} and {}",
            model.n_ex(),
            model.n_features(),
            insys.n_ex(),
            insys.n_features()
        )));
    }
    Ok(())
}

/// Scratch buffers for repeated right-hand-side evaluations.
#[derive(Debug, Default)]
pub(crate) struct RhsScratch {
    pub s: Vec<f64>,
    pub cache: ForwardCache,
}

/// `[P̃(x_in, x_ex); N_θ(x_ex, s_in(x_in, x_ex))]`.
pub(crate) fn hybrid_rhs(
    insys: &InternalSystem,
    model: &NeuralOdeModel,
    stage: FaultStage,
    z: &[f64],
    out: &mut [f64],
    scratch: &mut RhsScratch,
) {
    let n_in = insys.n_in();
    let (x_in, x_ex) = z.split_at(n_in);
    let (o_in, o_ex) = out.split_at_mut(n_in);
    insys.rhs(x_in, x_ex, stage, o_in);
    scratch.s.resize(insys.n_features(), 0.0);
    insys.features(x_in, x_ex, stage, &mut scratch.s);
    model.forward_into(x_ex, &scratch.s, &mut scratch.cache);
    o_ex.copy_from_slice(&scratch.cache.output);
}

/// Jacobian of the hybrid right-hand side at `z`, with the network forward
/// cache needed for parameter products at the same point.
pub(crate) fn hybrid_jacobian(
    insys: &InternalSystem,
    model: &NeuralOdeModel,
    physics: PhysicsJacobian,
    stage: FaultStage,
    z: &[f64],
) -> (DMatrix<f64>, ForwardCache) {
    let (n_in, n_ex, n_s) = (insys.n_in(), insys.n_ex(), insys.n_features());
    let n = n_in + n_ex;
    let (x_in, x_ex) = z.split_at(n_in);
    let phys = insys.jacobian(x_in, x_ex, stage);
    let mut s = vec![0.0; n_s];
    insys.features(x_in, x_ex, stage, &mut s);
    let mut cache = ForwardCache::default();
    model.forward_into(x_ex, &s, &mut cache);
    let nn = model.input_jacobian_cached(&cache);
    let n_inputs = n_ex + n_s;
    let jx = DMatrix::from_fn(n_ex, n_ex, |r, c| nn[r * n_inputs + c]);
    let js = DMatrix::from_fn(n_ex, n_s, |r, c| nn[r * n_inputs + n_ex + c]);

    let mut j = DMatrix::zeros(n, n);
    match physics {
        PhysicsJacobian::Analytic => {
            j.view_mut((0, 0), (n_in, n_in)).copy_from(&phys.rhs_in);
            j.view_mut((0, n_in), (n_in, n_ex)).copy_from(&phys.rhs_ex);
        }
        PhysicsJacobian::Estimated(est) => {
            for r in 0..n_in {
                for c in 0..n_ex {
                    j[(r, n_in + c)] = est.get(r, c);
                }
                for c in 0..n_in {
                    j[(r, c)] = est.get(r, n_ex + c);
                }
            }
        }
    }
    j.view_mut((n_in, 0), (n_ex, n_in)).copy_from(&(&js * &phys.feat_in));
    j.view_mut((n_in, n_in), (n_ex, n_ex))
        .copy_from(&(jx + &js * &phys.feat_ex));
    (j, cache)
}

/// Integrates the coupled system from `x0` over `grid` under `scenario`.
/// Features are recomputed from the hybrid state at every corrector
/// iteration.
pub fn simulate_closed_loop(
    model: &NeuralOdeModel,
    insys: &InternalSystem,
    x0: &HybridState,
    scenario: &FaultScenario,
    grid: &TimeGrid,
    opts: &TrapezoidalOptions,
) -> Result<HybridTrajectory> {
    check_dims(model, insys)?;
    if x0.x_in.len() != insys.n_in() || x0.x_ex.len() != insys.n_ex() {
        return Err(Error::Structural("initial hybrid state has the wrong size".into()));
    }
    let events = scenario.events(grid)?;
    let stages = scenario.segment_stages();
    let mut scratch = RhsScratch::default();
    let traj = integrate(
        |seg, z, _, out| hybrid_rhs(insys, model, stages[seg], z, out, &mut scratch),
        &x0.stacked(),
        grid,
        &events,
        opts,
    )
    .map_err(|e| e.in_scenario(scenario.id))?;
    let n_in = insys.n_in();
    if let Some(i) = (0..traj.len()).find(|&i| traj.state(i)[n_in..].iter().any(|v| !(v.abs() <= DIVERGENCE_BOUND))) {
        return Err(Error::Divergence { t: grid.t(i) }.at_step(i.saturating_sub(1)).in_scenario(scenario.id));
    }
    Ok(HybridTrajectory { traj, n_in, events })
}
