//! Fixtures shared by unit tests.

use crate::grid::{BusId, FaultScenario, FeatureSpec, InternalSystem, NetworkModel};
use crate::harness::dataset::{build_dataset, internal_systems};
use crate::integrators::{TimeGrid, TrapezoidalOptions};
use crate::mlp::NeuralOdeModel;
use crate::neudye::data::{ScenarioData, TrainingSet};
use crate::neudye::fit_normalization;
use crate::par::Execution;

pub const TIGHT: TrapezoidalOptions = TrapezoidalOptions {
    tol: 1e-13,
    max_iter: 500,
};

/// Two-machine measurements of one fault with a fitted model.
pub struct Fixture {
    pub data: TrainingSet,
    pub systems: Vec<InternalSystem>,
    pub model: NeuralOdeModel,
}

pub fn fixture(network: &str, scenarios: &[FaultScenario], tn: f64, hidden: &[usize], seed: u64) -> Fixture {
    let net = NetworkModel::builtin(network).unwrap();
    let features = FeatureSpec::default_for(&net);
    let grid = TimeGrid::new(0.0, tn, 1e-3).unwrap();
    let snapped: Vec<FaultScenario> = scenarios.iter().map(|s| s.snapped(&grid).unwrap()).collect();
    let (data, dropped) = build_dataset(&net, &features, &snapped, &grid, &TIGHT, Execution::Sequential).unwrap();
    assert!(dropped.is_empty());
    let systems = internal_systems(&net, &features, &data).unwrap();
    let mut model = NeuralOdeModel::new(data.n_ex(), data.n_features(), hidden, seed).unwrap();
    fit_normalization(&mut model, &data, 1e-3);
    Fixture {
        data,
        systems,
        model,
    }
}

pub fn fault(id: usize, bus: BusId, clear: f64) -> FaultScenario {
    FaultScenario {
        id,
        fault_bus: Some(bus),
        start: 0.05,
        clear,
        alpha: 1.0,
    }
}

/// Zeroes the output layer so the model returns its output offset.
pub fn zero_output_layer(model: &mut NeuralOdeModel) {
    let w = &model.widths;
    let (a, b) = (w[w.len() - 2], w[w.len() - 1]);
    let n = model.theta.len();
    model.theta[n - a * b - b..].iter_mut().for_each(|v| *v = 0.0);
}

/// Measurements with arbitrary rows and no events.
pub fn synthetic_data(grid: TimeGrid, n_in: usize, n_ex: usize, x_in: Vec<f64>, x_ex: Vec<f64>, s_in: Vec<f64>) -> ScenarioData {
    let n_features = s_in.len() / grid.len();
    ScenarioData {
        scenario: FaultScenario::no_fault(0, 1.0),
        grid,
        events: Vec::new(),
        n_in,
        n_ex,
        n_features,
        equilibrium: vec![0.0; n_in + n_ex],
        boundary_voltage: vec![0.0; grid.len()],
        x_in,
        x_ex,
        s_in,
        left_limits: Vec::new(),
    }
}

/// Trapezoidal samples of `ż = M z` with `z = [x_ex; x_in]`, one scenario
/// per initial state. The linear step is solved exactly.
pub fn linear_dataset(m: &nalgebra::DMatrix<f64>, n_ex: usize, starts: &[Vec<f64>], h: f64, steps: usize) -> TrainingSet {
    let n = m.nrows();
    let n_in = n - n_ex;
    let eye = nalgebra::DMatrix::<f64>::identity(n, n);
    let step = (&eye - m * (0.5 * h)).lu().solve(&(&eye + m * (0.5 * h))).unwrap();
    let grid = TimeGrid::new(0.0, h * steps as f64, h).unwrap();
    let scenarios = starts
        .iter()
        .enumerate()
        .map(|(id, z0)| {
            let mut z = nalgebra::DVector::from_column_slice(z0);
            let (mut x_in, mut x_ex) = (Vec::new(), Vec::new());
            for _ in 0..grid.len() {
                x_ex.extend(z.rows(0, n_ex).iter());
                x_in.extend(z.rows(n_ex, n_in).iter());
                z = &step * z;
            }
            let mut d = synthetic_data(grid, n_in, n_ex, x_in, x_ex, vec![0.0; grid.len()]);
            d.scenario.id = id;
            d
        })
        .collect();
    TrainingSet::new(scenarios).unwrap()
}
