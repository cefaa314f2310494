//! Loss gradients through the closed loop (and the open-loop replay) by the
//! discrete adjoint of the trapezoidal rule.

use std::cell::RefCell;

use nalgebra::DMatrix;

use super::data::ScenarioData;
use super::hybrid::{check_dims, hybrid_jacobian, simulate_closed_loop, HybridState, HybridTrajectory, PhysicsJacobian};
use super::loss::{sample_loss_grad, LossScales};
use crate::error::{Error, Result};
use crate::grid::{FaultStage, InternalSystem};
use crate::integrators::{
    integrate_adjoint_segment, segment_of, trapezoidal_step_from, AdjointDynamics, AdjointState,
    TrapezoidalOptions,
};
use crate::mlp::{ForwardCache, NeuralOdeModel};

/// Loss of one scenario and its gradient with respect to θ.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientResult {
    pub loss: f64,
    pub grad: Vec<f64>,
    /// Number of loss samples (`n`).
    pub samples: usize,
}

/// Linearizations keyed by `(point, stage index)`. A backward sweep touches
/// each point under at most two stages, so a few slots suffice.
struct PointCache {
    slots: RefCell<Vec<Slot>>,
}

type Slot = (usize, usize, DMatrix<f64>, ForwardCache);

impl PointCache {
    fn new() -> Self {
        Self {
            slots: RefCell::new(Vec::with_capacity(3)),
        }
    }

    fn with<R>(
        &self,
        point: usize,
        stage: usize,
        build: impl FnOnce() -> (DMatrix<f64>, ForwardCache),
        use_it: impl FnOnce(&DMatrix<f64>, &ForwardCache) -> R,
    ) -> R {
        let mut slots = self.slots.borrow_mut();
        let pos = match slots.iter().position(|s| s.0 == point && s.1 == stage) {
            Some(p) => p,
            None => {
                let (j, c) = build();
                if slots.len() >= 3 {
                    slots.remove(0);
                }
                slots.push((point, stage, j, c));
                slots.len() - 1
            }
        };
        let s = &slots[pos];
        use_it(&s.2, &s.3)
    }
}

struct ClosedLoopAdjoint<'a> {
    model: &'a NeuralOdeModel,
    insys: &'a InternalSystem,
    physics: PhysicsJacobian<'a>,
    traj: &'a HybridTrajectory,
    stages: Vec<FaultStage>,
    cache: PointCache,
}

impl ClosedLoopAdjoint<'_> {
    fn step_stage(&self, step: usize) -> (usize, FaultStage) {
        let seg = segment_of(&self.traj.events, step - 1);
        (seg, self.stages[seg])
    }

    fn linearize<R>(&self, step: usize, point: usize, f: impl FnOnce(&DMatrix<f64>, &ForwardCache) -> R) -> R {
        let (seg, stage) = self.step_stage(step);
        self.cache.with(
            point,
            seg,
            || hybrid_jacobian(self.insys, self.model, self.physics, stage, self.traj.traj.state(point)),
            f,
        )
    }
}

impl AdjointDynamics for ClosedLoopAdjoint<'_> {
    fn state_dim(&self) -> usize {
        self.traj.traj.dim
    }

    fn n_params(&self) -> usize {
        self.model.n_params()
    }

    fn state_jacobian(&self, step: usize, point: usize) -> DMatrix<f64> {
        self.linearize(step, point, |j, _| j.clone())
    }

    fn add_param_vjp(&self, step: usize, point: usize, w: &[f64], out: &mut [f64]) {
        let n_in = self.traj.n_in;
        self.linearize(step, point, |_, cache| {
            self.model.backward(cache, &w[n_in..], Some(out));
        });
    }
}

/// Runs the adjoint sweep over `n` steps given per-sample loss gradients.
fn backward_sweep<D: AdjointDynamics>(
    dynamics: &D,
    n: usize,
    h: f64,
    n_in: usize,
    n_ex: usize,
    mut loss_grad: impl FnMut(usize, &mut [f64], &mut [f64]),
) -> Result<Vec<f64>> {
    let mut state = AdjointState::zeros(n_in, n_ex, dynamics.n_params());
    let (mut d_in, mut d_ex) = (vec![0.0; n_in], vec![0.0; n_ex]);
    loss_grad(n, &mut d_in, &mut d_ex);
    state.jump(&d_in, &d_ex);
    for step in (1..=n).rev() {
        state = integrate_adjoint_segment(dynamics, &state, step, h)?;
        if step > 1 {
            loss_grad(step - 1, &mut d_in, &mut d_ex);
            state.jump(&d_in, &d_ex);
        }
    }
    // the accumulator integrates backwards from zero, so dL/dθ = -g(t0)
    Ok(state.grad.iter().map(|g| -g).collect())
}

/// Closed-loop loss of one scenario and its adjoint gradient.
///
/// The forward trajectory is stored and reused. `physics` selects analytic or
/// estimated internal Jacobians for the backward pass only.
pub fn pi_gradient(
    model: &NeuralOdeModel,
    insys: &InternalSystem,
    data: &ScenarioData,
    physics: PhysicsJacobian,
    scales: &LossScales,
    opts: &TrapezoidalOptions,
) -> Result<GradientResult> {
    check_dims(model, insys)?;
    let x0 = HybridState {
        x_in: data.x_in(0).to_vec(),
        x_ex: data.x_ex(0).to_vec(),
        t: data.grid.t0,
    };
    let traj = simulate_closed_loop(model, insys, &x0, &data.scenario, &data.grid, opts)?;
    let n = data.grid.n;
    let mut total = 0.0;
    let dynamics = ClosedLoopAdjoint {
        model,
        insys,
        physics,
        traj: &traj,
        stages: data.scenario.segment_stages(),
        cache: PointCache::new(),
    };
    let grad = backward_sweep(&dynamics, n, data.grid.h, insys.n_in(), insys.n_ex(), |i, d_in, d_ex| {
        total += sample_loss_grad(traj.x_in(i), traj.x_ex(i), data, i, scales, d_in, d_ex);
    })
    .map_err(|e| e.in_scenario(data.scenario.id))?;
    Ok(GradientResult {
        loss: total,
        grad,
        samples: n,
    })
}

/// Open-loop replay `ẋ_ex = N_θ(x_ex, ŝ_in)` with measured features.
pub fn simulate_open_loop(
    model: &NeuralOdeModel,
    data: &ScenarioData,
    opts: &TrapezoidalOptions,
) -> Result<Vec<f64>> {
    if model.n_ex() != data.n_ex || model.n_features() != data.n_features {
        return Err(Error::Structural("model does not match the data layout".into()));
    }
    let n_ex = data.n_ex;
    let mut out = Vec::with_capacity(n_ex * data.len());
    out.extend_from_slice(data.x_ex(0));
    let mut x = data.x_ex(0).to_vec();
    let mut cache = ForwardCache::default();
    for i in 0..data.grid.n {
        model.forward_into(&x, data.s_in(i), &mut cache);
        let f0 = cache.output.clone();
        let s_end = data.s_in_left(i + 1);
        let mut f = |z: &[f64], _: f64, o: &mut [f64]| {
            model.forward_into(z, s_end, &mut cache);
            o.copy_from_slice(&cache.output);
        };
        x = trapezoidal_step_from(&mut f, &x, &f0, data.grid.t(i), data.grid.h, opts)
            .map_err(|e| e.at_step(i).in_scenario(data.scenario.id))?;
        out.extend_from_slice(&x);
    }
    Ok(out)
}

struct OpenLoopAdjoint<'a> {
    model: &'a NeuralOdeModel,
    data: &'a ScenarioData,
    x_ex: &'a [f64],
    cache: PointCache,
}

impl OpenLoopAdjoint<'_> {
    fn linearize<R>(&self, step: usize, point: usize, f: impl FnOnce(&DMatrix<f64>, &ForwardCache) -> R) -> R {
        let n_ex = self.data.n_ex;
        let at_end = point == step;
        self.cache.with(
            point,
            at_end as usize,
            || {
                let s = if at_end { self.data.s_in_left(point) } else { self.data.s_in(point) };
                let mut cache = ForwardCache::default();
                self.model.forward_into(&self.x_ex[point * n_ex..(point + 1) * n_ex], s, &mut cache);
                let full = self.model.input_jacobian_cached(&cache);
                let ni = self.model.n_inputs();
                (DMatrix::from_fn(n_ex, n_ex, |r, c| full[r * ni + c]), cache)
            },
            f,
        )
    }
}

impl AdjointDynamics for OpenLoopAdjoint<'_> {
    fn state_dim(&self) -> usize {
        self.data.n_ex
    }

    fn n_params(&self) -> usize {
        self.model.n_params()
    }

    fn state_jacobian(&self, step: usize, point: usize) -> DMatrix<f64> {
        self.linearize(step, point, |j, _| j.clone())
    }

    fn add_param_vjp(&self, step: usize, point: usize, w: &[f64], out: &mut [f64]) {
        self.linearize(step, point, |_, cache| {
            self.model.backward(cache, w, Some(out));
        });
    }
}

/// Open-loop loss `Σ_i ‖(x_ex,i - x̂_ex,i)/σ_ex‖` and its gradient, with the
/// internal adjoint held at zero.
pub fn open_loop_gradient(
    model: &NeuralOdeModel,
    data: &ScenarioData,
    scales: &LossScales,
    opts: &TrapezoidalOptions,
) -> Result<GradientResult> {
    let x_ex = simulate_open_loop(model, data, opts)?;
    let n_ex = data.n_ex;
    let dynamics = OpenLoopAdjoint {
        model,
        data,
        x_ex: &x_ex,
        cache: PointCache::new(),
    };
    let zero_scales = LossScales {
        ex: scales.ex.clone(),
        r#in: vec![1.0; data.n_in],
    };
    let mut total = 0.0;
    let mut d_in_unused = vec![0.0; data.n_in];
    let n = data.grid.n;
    let grad = backward_sweep(&dynamics, n, data.grid.h, 0, n_ex, |i, _, d_ex| {
        let xi = &x_ex[i * n_ex..(i + 1) * n_ex];
        // x_in taken equal to the measurement so only the x_ex term remains
        total += sample_loss_grad(data.x_in(i), xi, data, i, &zero_scales, &mut d_in_unused, d_ex);
    })
    .map_err(|e| e.in_scenario(data.scenario.id))?;
    Ok(GradientResult {
        loss: total,
        grad,
        samples: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::FaultScenario;
    use crate::harness::gradcheck::check_gradient;
    use crate::integrators::TimeGrid;
    use crate::neudye::pg::JacobianEstimate;
    use crate::testutil::{fault, fixture, synthetic_data, TIGHT};
    use nalgebra::DVector;

    #[test]
    fn closed_loop_gradient_matches_finite_differences() {
        let fx = fixture("two_machine", &[fault(0, 2, 0.1)], 0.2, &[8, 8], 11);
        let coords: Vec<usize> = (0..fx.model.n_params()).step_by(13).collect();
        let r = check_gradient(
            &fx.model,
            &fx.systems[0],
            &fx.data.scenarios[0],
            PhysicsJacobian::Analytic,
            &coords,
            1e-6,
            &TIGHT,
        )
        .unwrap();
        assert!(r.max_relative_error <= 1e-4, "{:?}", r.entries);
    }

    #[test]
    fn zero_error_gives_zero_gradient() {
        let fx = fixture("wscc9", &[fault(0, 6, 0.09)], 0.2, &[8], 12);
        let insys = &fx.systems[0];
        let mut d = fx.data.scenarios[0].clone();
        let x0 = HybridState {
            x_in: d.x_in(0).to_vec(),
            x_ex: d.x_ex(0).to_vec(),
            t: 0.0,
        };
        let t = simulate_closed_loop(&fx.model, insys, &x0, &d.scenario, &d.grid, &TIGHT).unwrap();
        d.x_in = (0..t.len()).flat_map(|i| t.x_in(i).to_vec()).collect();
        d.x_ex = (0..t.len()).flat_map(|i| t.x_ex(i).to_vec()).collect();
        let scales = LossScales::from_model(&fx.model, d.n_in);
        let g = pi_gradient(&fx.model, insys, &d, PhysicsJacobian::Analytic, &scales, &TIGHT).unwrap();
        assert_eq!(g.loss, 0.0);
        assert!(g.grad.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_step_gradient_by_hand() {
        let fx = fixture("two_machine", &[FaultScenario::no_fault(0, 1.0)], 0.001, &[6], 13);
        let insys = &fx.systems[0];
        let model = &fx.model;
        let mut d = fx.data.scenarios[0].clone();
        assert_eq!(d.grid.n, 1);
        d.x_in[d.n_in..].iter_mut().for_each(|v| *v += 0.01);
        d.x_ex[d.n_ex..].iter_mut().for_each(|v| *v -= 0.02);
        let scales = LossScales::unit(d.n_in, d.n_ex);
        let g = pi_gradient(model, insys, &d, PhysicsJacobian::Analytic, &scales, &TIGHT).unwrap();

        let x0 = HybridState {
            x_in: d.x_in(0).to_vec(),
            x_ex: d.x_ex(0).to_vec(),
            t: 0.0,
        };
        let t = simulate_closed_loop(model, insys, &x0, &d.scenario, &d.grid, &TIGHT).unwrap();
        let (z0, z1) = (t.traj.state(0), t.traj.state(1));
        let (n_in, n) = (d.n_in, z0.len());
        let (mut w_in, mut w_ex) = (vec![0.0; n_in], vec![0.0; d.n_ex]);
        sample_loss_grad(t.x_in(1), t.x_ex(1), &d, 1, &scales, &mut w_in, &mut w_ex);
        let w = DVector::from_iterator(n, w_in.into_iter().chain(w_ex));
        let (j1, _) = hybrid_jacobian(insys, model, PhysicsJacobian::Analytic, FaultStage::PreFault, z1);
        let m = DMatrix::identity(n, n) - j1 * (0.5 * d.grid.h);
        let p = m.transpose().lu().solve(&w).unwrap();
        let mut expect = vec![0.0; model.n_params()];
        for z in [z0, z1] {
            let mut s = vec![0.0; insys.n_features()];
            insys.features(&z[..n_in], &z[n_in..], FaultStage::PreFault, &mut s);
            let jp = model.jacobian_params(&z[n_in..], &s).unwrap();
            for (k, e) in expect.iter_mut().enumerate() {
                for r in 0..d.n_ex {
                    *e += 0.5 * d.grid.h * p[n_in + r] * jp[r * model.n_params() + k];
                }
            }
        }
        for (a, b) in g.grad.iter().zip(&expect) {
            assert!((a - b).abs() <= 1e-12 + 1e-9 * b.abs(), "{a} vs {b}");
        }
    }

    #[test]
    fn open_loop_gradient_matches_finite_differences() {
        let fx = fixture("wscc9", &[fault(0, 9, 0.1)], 0.2, &[8], 14);
        let d = &fx.data.scenarios[0];
        let scales = LossScales::from_model(&fx.model, d.n_in);
        let g = open_loop_gradient(&fx.model, d, &scales, &TIGHT).unwrap();
        let eps = 1e-6;
        for k in (0..fx.model.n_params()).step_by(17) {
            let mut m = fx.model.clone();
            m.theta[k] += eps;
            let lp = open_loop_gradient(&m, d, &scales, &TIGHT).unwrap().loss;
            m.theta[k] -= 2.0 * eps;
            let lm = open_loop_gradient(&m, d, &scales, &TIGHT).unwrap().loss;
            let fd = (lp - lm) / (2.0 * eps);
            let a = g.grad[k];
            if a.abs() > 1e-8 {
                assert!((a - fd).abs() <= 1e-4 * a.abs().max(fd.abs()), "{k}: {a} vs {fd}");
            }
        }
    }

    #[test]
    fn open_loop_replay_of_constant_data_with_zero_model_is_exact() {
        let grid = TimeGrid::new(0.0, 0.01, 1e-3).unwrap();
        let m = grid.len();
        let d = synthetic_data(grid, 2, 2, vec![0.3; 2 * m], vec![0.5; 2 * m], vec![1.0; 3 * m]);
        let mut model = NeuralOdeModel::new(2, 3, &[4], 0).unwrap();
        model.theta.iter_mut().for_each(|v| *v = 0.0);
        let g = open_loop_gradient(&model, &d, &LossScales::unit(2, 2), &TIGHT).unwrap();
        assert_eq!(g.loss, 0.0);
        assert!(g.grad.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn estimated_physics_at_equilibrium_tracks_the_analytic_gradient() {
        let fx = fixture("wscc9", &[fault(0, 6, 0.052)], 0.5, &[8], 15);
        let insys = &fx.systems[0];
        let d = &fx.data.scenarios[0];
        let (n_in, n_ex) = (insys.n_in(), insys.n_ex());
        let jac = insys.jacobian(d.equilibrium_in(), d.equilibrium_ex(), FaultStage::PreFault);
        let cols = n_ex + n_in;
        let mut a = vec![0.0; n_in * cols];
        for r in 0..n_in {
            for c in 0..n_ex {
                a[r * cols + c] = jac.rhs_ex[(r, c)];
            }
            for c in 0..n_in {
                a[r * cols + n_ex + c] = jac.rhs_in[(r, c)];
            }
        }
        let est = JacobianEstimate {
            rows: n_in,
            cols,
            a,
            mask: vec![true; n_in * cols],
            condition_numbers: vec![1.0; n_in],
            samples: 0,
        };
        let scales = LossScales::from_model(&fx.model, n_in);
        let pi = pi_gradient(&fx.model, insys, d, PhysicsJacobian::Analytic, &scales, &TIGHT).unwrap();
        let pg = pi_gradient(&fx.model, insys, d, PhysicsJacobian::Estimated(&est), &scales, &TIGHT).unwrap();
        assert_eq!(pi.loss, pg.loss);
        let diff: f64 = pi.grad.iter().zip(&pg.grad).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = pi.grad.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!(diff <= 0.05 * norm, "relative difference {}", diff / norm);
    }
}
