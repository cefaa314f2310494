//! Ground-truth simulation of fault scenarios and their measurements.

use crate::error::{Error, Result};
use crate::grid::{FaultScenario, FeatureSpec, FullSystem, HybridLayout, InternalSystem, NetworkModel};
use crate::grid::solve_operating_point;
use crate::integrators::{integrate, TimeGrid, Trajectory, TrapezoidalOptions};
use crate::neudye::data::{LeftLimit, ScenarioData, TrainingSet};
use crate::neudye::Episode;
use crate::par::{map_indexed, Execution};

/// Full-system trajectory of one scenario, starting from the pre-fault
/// equilibrium of its loading.
pub fn simulate_ground_truth(
    net: &NetworkModel,
    scenario: &FaultScenario,
    grid: &TimeGrid,
    opts: &TrapezoidalOptions,
) -> Result<(FullSystem, Trajectory)> {
    scenario.validate(net)?;
    let full = FullSystem::new(net, scenario.fault_bus, scenario.alpha)?;
    let events = scenario.events(grid)?;
    let stages = scenario.segment_stages();
    let traj = integrate(
        |seg, x, _, out| full.rhs(x, stages[seg], out),
        &full.equilibrium,
        grid,
        &events,
        opts,
    )
    .map_err(|e| e.in_scenario(scenario.id))?;
    Ok((full, traj))
}

/// Measures a ground-truth trajectory at every grid point, right limits at
/// events.
pub fn measure_trajectory(
    full: &FullSystem,
    layout: &HybridLayout,
    scenario: &FaultScenario,
    traj: &Trajectory,
) -> Result<ScenarioData> {
    let grid = traj.grid;
    let events = scenario.events(&grid)?;
    let (n_in, n_ex, n_s) = (layout.n_in(), layout.n_ex(), layout.n_features());
    let m = grid.len();
    let mut x_in = Vec::with_capacity(m * n_in);
    let mut x_ex = Vec::with_capacity(m * n_ex);
    let mut s_in = Vec::with_capacity(m * n_s);
    let mut vb = Vec::new();
    for i in 0..m {
        let meas = full.measure(layout, traj.state(i), scenario.stage_at(&events, i));
        x_in.extend_from_slice(&meas.x_in);
        x_ex.extend_from_slice(&meas.x_ex);
        s_in.extend_from_slice(&meas.s_in);
        vb.extend_from_slice(&meas.boundary_voltage);
    }
    let left_limits = events
        .iter()
        .filter(|&&e| e > 0)
        .map(|&e| LeftLimit {
            index: e,
            s_in: full.measure(layout, traj.state(e), scenario.stage_at(&events, e - 1)).s_in,
        })
        .collect();
    let eq = full.measure(layout, &full.equilibrium, crate::grid::FaultStage::PreFault);
    let mut equilibrium = eq.x_ex;
    equilibrium.extend_from_slice(&eq.x_in);
    Ok(ScenarioData {
        scenario: *scenario,
        grid,
        events,
        n_in,
        n_ex,
        n_features: n_s,
        x_in,
        x_ex,
        s_in,
        boundary_voltage: vb,
        equilibrium,
        left_limits,
    })
}

/// Scenarios whose ground truth failed, with the reason.
#[derive(Debug, Clone, PartialEq)]
pub struct Dropped {
    pub scenario: usize,
    pub reason: String,
}

/// Simulates and measures every scenario; numerical failures are dropped
/// and reported, other errors abort.
pub fn build_dataset(
    net: &NetworkModel,
    features: &FeatureSpec,
    scenarios: &[FaultScenario],
    grid: &TimeGrid,
    opts: &TrapezoidalOptions,
    exec: Execution,
) -> Result<(TrainingSet, Vec<Dropped>)> {
    let layout = HybridLayout::new(net, features)?;
    let results = map_indexed(scenarios, exec, |_, sc| {
        let (full, traj) = simulate_ground_truth(net, sc, grid, opts)?;
        measure_trajectory(&full, &layout, sc, &traj)
    });
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for (sc, r) in scenarios.iter().zip(results) {
        match r {
            Ok(d) => kept.push(d),
            Err(e) if e.is_numerical() => {
                log::warn!("dropping scenario {}: {e}", sc.id);
                dropped.push(Dropped {
                    scenario: sc.id,
                    reason: e.to_string(),
                });
            }
            Err(e) => return Err(e),
        }
    }
    if kept.is_empty() {
        return Err(Error::Data("every ground-truth simulation failed".into()));
    }
    Ok((TrainingSet::new(kept)?, dropped))
}

/// Internal physics for each scenario's loading and fault location.
pub fn internal_systems(net: &NetworkModel, features: &FeatureSpec, data: &TrainingSet) -> Result<Vec<InternalSystem>> {
    data.scenarios
        .iter()
        .map(|d| {
            let op = solve_operating_point(net, d.scenario.alpha)?;
            InternalSystem::new(net, &op, d.scenario.fault_bus, features)
        })
        .collect()
}

/// Pairs measurements with their internal systems.
pub fn episodes<'a>(data: &'a TrainingSet, systems: &'a [InternalSystem]) -> Vec<Episode<'a>> {
    data.scenarios
        .iter()
        .zip(systems)
        .map(|(data, insys)| Episode { data, insys })
        .collect()
}
