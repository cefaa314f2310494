//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use neudye::grid::admittance::CMatrix;
use neudye::grid::FaultScenario;
use neudye::integrators::TimeGrid;
use neudye::neudye::{ScenarioData, TrainingSet};
use num_complex::Complex64;
use rand::Rng;

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

/// Trapezoidal samples of `ż = M z` with `z = [x_ex; x_in]`, one scenario per
/// initial state. The implicit step is solved exactly.
pub fn linear_dataset(m: &DMatrix<f64>, n_ex: usize, starts: &[Vec<f64>], h: f64, steps: usize) -> TrainingSet {
    let n = m.nrows();
    let n_in = n - n_ex;
    let eye = DMatrix::<f64>::identity(n, n);
    let step = (&eye - m * (0.5 * h)).lu().solve(&(&eye + m * (0.5 * h))).unwrap();
    let grid = TimeGrid::new(0.0, h * steps as f64, h).unwrap();
    let scenarios = starts
        .iter()
        .enumerate()
        .map(|(id, z0)| {
            let mut z = DVector::from_column_slice(z0);
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

/// Stable random system matrix: a damped rotation per pair of states plus a
/// small random coupling.
pub fn random_stable_matrix<R: Rng>(rng: &mut R, n: usize) -> DMatrix<f64> {
    let mut m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-0.3..0.3));
    for k in 0..n {
        m[(k, k)] -= 1.0 + rng.random_range(0.0..1.0);
    }
    for k in (0..n - 1).step_by(2) {
        let w = rng.random_range(2.0..8.0);
        m[(k, k + 1)] += w;
        m[(k + 1, k)] -= w;
    }
    m
}

/// Bus admittance matrix of a random connected network: a random spanning
/// tree plus extra branches, lossy series admittances, line charging and
/// constant-impedance loads.
pub fn random_admittance<R: Rng>(rng: &mut R, n: usize) -> CMatrix {
    let mut y = CMatrix::zeros(n, n);
    let branch = |y: &mut CMatrix, a: usize, b: usize, rng: &mut R| {
        let z = Complex64::new(rng.random_range(0.001..0.05), rng.random_range(0.02..0.4));
        let ys = z.inv();
        let half_b = Complex64::new(0.0, rng.random_range(0.0..0.2));
        y[(a, a)] += ys + half_b;
        y[(b, b)] += ys + half_b;
        y[(a, b)] -= ys;
        y[(b, a)] -= ys;
    };
    for k in 1..n {
        let parent = rng.random_range(0..k);
        branch(&mut y, k, parent, rng);
    }
    for _ in 0..n / 2 {
        let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
        if a != b {
            branch(&mut y, a, b, rng);
        }
    }
    for k in 0..n {
        if rng.random_bool(0.5) {
            y[(k, k)] += Complex64::new(rng.random_range(0.2..1.5), -rng.random_range(0.0..0.5));
        }
    }
    y
}

/// Largest relative deviation `|a - b| / max|b|` over paired slices.
pub fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}
