//! Trajectory loss `Σ_i ‖(x_ex,i - x̂_ex,i)/σ_ex‖ + ‖(x_in,i - x̂_in,i)/σ_in‖`.

use super::data::ScenarioData;
use super::hybrid::HybridTrajectory;
use crate::error::{Error, Result};
use crate::mlp::NeuralOdeModel;

/// Per-feature loss scales.
#[derive(Debug, Clone, PartialEq)]
pub struct LossScales {
    pub ex: Vec<f64>,
    pub r#in: Vec<f64>,
}

impl LossScales {
    pub fn unit(n_in: usize, n_ex: usize) -> Self {
        Self {
            ex: vec![1.0; n_ex],
            r#in: vec![1.0; n_in],
        }
    }

    /// Scales stored in the model; internal scales default to one.
    pub fn from_model(model: &NeuralOdeModel, n_in: usize) -> Self {
        let r#in = if model.state_scale_in.len() == n_in {
            model.state_scale_in.clone()
        } else {
            vec![1.0; n_in]
        };
        Self {
            ex: model.state_scale_ex().to_vec(),
            r#in,
        }
    }
}

/// Scaled Euclidean norm and its gradient with respect to `x`. The gradient
/// is taken as zero where the norm vanishes.
fn scaled_norm(x: &[f64], target: &[f64], scale: &[f64], grad: Option<&mut [f64]>) -> f64 {
    let norm = x
        .iter()
        .zip(target)
        .zip(scale)
        .map(|((a, b), s)| ((a - b) / s).powi(2))
        .sum::<f64>()
        .sqrt();
    if let Some(g) = grad {
        for k in 0..x.len() {
            g[k] = if norm > 0.0 {
                (x[k] - target[k]) / (scale[k] * scale[k] * norm)
            } else {
                0.0
            };
        }
    }
    norm
}

/// `L_i` for one sample.
pub fn sample_loss(
    x_in: &[f64],
    x_ex: &[f64],
    data: &ScenarioData,
    i: usize,
    scales: &LossScales,
) -> f64 {
    scaled_norm(x_ex, data.x_ex(i), &scales.ex, None) + scaled_norm(x_in, data.x_in(i), &scales.r#in, None)
}

/// `L_i` and its gradients with respect to `x_in` and `x_ex`.
pub fn sample_loss_grad(
    x_in: &[f64],
    x_ex: &[f64],
    data: &ScenarioData,
    i: usize,
    scales: &LossScales,
    d_in: &mut [f64],
    d_ex: &mut [f64],
) -> f64 {
    scaled_norm(x_ex, data.x_ex(i), &scales.ex, Some(d_ex))
        + scaled_norm(x_in, data.x_in(i), &scales.r#in, Some(d_in))
}

/// Total loss and per-sample terms; `per_sample[0]` is zero because the
/// initial state is given.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub per_sample: Vec<f64>,
}

pub fn loss(traj: &HybridTrajectory, data: &ScenarioData, scales: &LossScales) -> Result<LossValue> {
    if traj.len() != data.len() || traj.traj.grid != data.grid || traj.n_in != data.n_in {
        return Err(Error::Structural(
            "trajectory and measurements are on different grids".into(),
        ));
    }
    let mut per_sample = vec![0.0; data.len()];
    for (i, l) in per_sample.iter_mut().enumerate().skip(1) {
        *l = sample_loss(traj.x_in(i), traj.x_ex(i), data, i, scales);
    }
    Ok(LossValue {
        total: per_sample.iter().sum(),
        per_sample,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrators::{TimeGrid, Trajectory};
    use crate::testutil::synthetic_data;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn traj_of(grid: TimeGrid, n_in: usize, x_in: &[f64], x_ex: &[f64]) -> HybridTrajectory {
        let n_ex = x_ex.len() / grid.len();
        let mut data = Vec::new();
        for i in 0..grid.len() {
            data.extend_from_slice(&x_in[i * n_in..(i + 1) * n_in]);
            data.extend_from_slice(&x_ex[i * n_ex..(i + 1) * n_ex]);
        }
        HybridTrajectory {
            traj: Trajectory {
                grid,
                dim: n_in + n_ex,
                data,
            },
            n_in,
            events: Vec::new(),
        }
    }

    #[test]
    fn matching_trajectory_has_zero_loss() {
        let grid = TimeGrid::new(0.0, 0.003, 1e-3).unwrap();
        let x_in = vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8];
        let x_ex = vec![1.0, 2.0, 3.0, 4.0];
        let d = synthetic_data(grid, 2, 1, x_in.clone(), x_ex.clone(), vec![0.0; 4]);
        let l = loss(&traj_of(grid, 2, &x_in, &x_ex), &d, &LossScales::unit(2, 1)).unwrap();
        assert_eq!(l.total, 0.0);
    }

    #[test]
    fn norms_add_without_squaring() {
        let grid = TimeGrid::new(0.0, 1e-3, 1e-3).unwrap();
        let d = synthetic_data(grid, 1, 1, vec![0.0, 0.0], vec![0.0, 0.0], vec![0.0; 2]);
        let t = traj_of(grid, 1, &[0.0, 4.0], &[0.0, 3.0]);
        let l = loss(&t, &d, &LossScales::unit(1, 1)).unwrap();
        assert_eq!(l.per_sample, vec![0.0, 7.0]);
        assert_eq!(l.total, 7.0);
    }

    #[test]
    fn random_loss_matches_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let grid = TimeGrid::new(0.0, 0.02, 1e-3).unwrap();
        let (n_in, n_ex, m) = (3, 4, grid.len());
        let mut r = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let (a_in, a_ex, b_in, b_ex) = (r(m * n_in), r(m * n_ex), r(m * n_in), r(m * n_ex));
        let scales = LossScales {
            ex: vec![0.5, 1.0, 2.0, 4.0],
            r#in: vec![0.1, 1.0, 10.0],
        };
        let d = synthetic_data(grid, n_in, n_ex, b_in.clone(), b_ex.clone(), vec![0.0; m]);
        let l = loss(&traj_of(grid, n_in, &a_in, &a_ex), &d, &scales).unwrap();
        let mut expect = 0.0;
        for i in 1..m {
            let e: f64 = (0..n_ex)
                .map(|k| ((a_ex[i * n_ex + k] - b_ex[i * n_ex + k]) / scales.ex[k]).powi(2))
                .sum();
            let n: f64 = (0..n_in)
                .map(|k| ((a_in[i * n_in + k] - b_in[i * n_in + k]) / scales.r#in[k]).powi(2))
                .sum();
            expect += e.sqrt() + n.sqrt();
        }
        assert!((l.total - expect).abs() <= 1e-12 * expect);
        assert!((l.total - l.per_sample.iter().sum::<f64>()).abs() <= 1e-12 * expect);
    }

    #[test]
    fn sample_gradient_matches_finite_differences() {
        let grid = TimeGrid::new(0.0, 1e-3, 1e-3).unwrap();
        let d = synthetic_data(grid, 2, 2, vec![0.0; 4], vec![0.0; 4], vec![0.0; 2]);
        let scales = LossScales {
            ex: vec![0.3, 2.0],
            r#in: vec![1.5, 0.7],
        };
        let x_in = [0.4, -0.2];
        let x_ex = [0.1, 0.9];
        let (mut g_in, mut g_ex) = ([0.0; 2], [0.0; 2]);
        sample_loss_grad(&x_in, &x_ex, &d, 1, &scales, &mut g_in, &mut g_ex);
        let eps = 1e-6;
        for k in 0..2 {
            let (mut p, mut m) = (x_in, x_in);
            p[k] += eps;
            m[k] -= eps;
            let fd = (sample_loss(&p, &x_ex, &d, 1, &scales) - sample_loss(&m, &x_ex, &d, 1, &scales)) / (2.0 * eps);
            assert!((fd - g_in[k]).abs() < 1e-8);
            let (mut p, mut m) = (x_ex, x_ex);
            p[k] += eps;
            m[k] -= eps;
            let fd = (sample_loss(&x_in, &p, &d, 1, &scales) - sample_loss(&x_in, &m, &d, 1, &scales)) / (2.0 * eps);
            assert!((fd - g_ex[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn grid_mismatch_is_structural() {
        let grid = TimeGrid::new(0.0, 2e-3, 1e-3).unwrap();
        let d = synthetic_data(grid, 1, 1, vec![0.0; 3], vec![0.0; 3], vec![0.0; 3]);
        let short = TimeGrid::new(0.0, 1e-3, 1e-3).unwrap();
        let t = traj_of(short, 1, &[0.0; 2], &[0.0; 2]);
        assert!(matches!(loss(&t, &d, &LossScales::unit(1, 1)), Err(Error::Structural(_))));
    }
}
