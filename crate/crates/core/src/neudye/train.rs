//! Adam training loops for the open-loop, physics-informed and
//! physics-guided modes.

use serde::{Deserialize, Serialize};

use super::adjoint::{open_loop_gradient, pi_gradient, GradientResult};
use super::data::{ScenarioData, TrainingSet};
use super::hybrid::PhysicsJacobian;
use super::loss::LossScales;
use super::pg::JacobianEstimate;
use crate::error::{Error, Result};
use crate::grid::InternalSystem;
use crate::integrators::TrapezoidalOptions;
use crate::mlp::{NeuralOdeModel, Normalization};
use crate::par::{map_indexed, Execution};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamOptions {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Gradients are rescaled to at most this Euclidean norm.
    pub clip: f64,
}

impl Default for AdamOptions {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: 10.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub opts: AdamOptions,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, opts: AdamOptions) -> Self {
        Self {
            opts,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// Clips `grad` in place and applies one update; returns the norm before
    /// clipping.
    pub fn step(&mut self, theta: &mut [f64], grad: &mut [f64]) -> f64 {
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm > self.opts.clip {
            let s = self.opts.clip / norm;
            grad.iter_mut().for_each(|g| *g *= s);
        }
        self.t += 1;
        let o = self.opts;
        let c1 = 1.0 - o.beta1.powi(self.t);
        let c2 = 1.0 - o.beta2.powi(self.t);
        for k in 0..theta.len() {
            self.m[k] = o.beta1 * self.m[k] + (1.0 - o.beta1) * grad[k];
            self.v[k] = o.beta2 * self.v[k] + (1.0 - o.beta2) * grad[k] * grad[k];
            theta[k] -= o.lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + o.eps);
        }
        norm
    }
}

/// A phase of training on a shortened horizon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurriculumStage {
    pub epochs: usize,
    /// Horizon in seconds from the start of each scenario.
    pub horizon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    /// Epochs on the full horizon, after the curriculum.
    pub max_epochs: usize,
    pub adam: AdamOptions,
    pub plateau_window: usize,
    pub plateau_tol: f64,
    pub curriculum: Vec<CurriculumStage>,
    #[serde(skip)]
    pub execution: Execution,
    #[serde(skip)]
    pub integrator: TrapezoidalOptions,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            max_epochs: 200,
            adam: AdamOptions::default(),
            plateau_window: 20,
            plateau_tol: 1e-5,
            curriculum: Vec::new(),
            execution: Execution::default(),
            integrator: TrapezoidalOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-sample loss over the scenarios that completed.
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the lowest full-horizon loss seen.
    pub model: NeuralOdeModel,
    pub history: Vec<EpochRecord>,
    pub best_loss: f64,
    /// Scenario evaluations skipped after a numerical failure.
    pub skipped: usize,
}

/// A scenario's measurements with the internal physics of its loading and
/// fault location.
#[derive(Debug, Clone, Copy)]
pub struct Episode<'a> {
    pub data: &'a ScenarioData,
    pub insys: &'a InternalSystem,
}

/// Fits input and output normalization and the loss scales to `data`.
///
/// Inputs are centred and scaled by their spread; outputs keep a zero offset
/// and are scaled by the RMS of the finite-difference tie-current derivative.
pub fn fit_normalization(model: &mut NeuralOdeModel, data: &TrainingSet, floor: f64) {
    let n_ex = data.n_ex();
    let n_s = data.n_features();
    let mut inputs = Vec::new();
    let mut derivs = Vec::new();
    for sc in &data.scenarios {
        let h = sc.grid.h;
        for i in 0..sc.len() {
            let mut row = sc.x_ex(i).to_vec();
            row.extend_from_slice(sc.s_in(i));
            inputs.push(row);
            if i > 0 && !sc.events.contains(&i) {
                derivs.push(
                    (0..n_ex)
                        .map(|k| (sc.x_ex(i)[k] - sc.x_ex(i - 1)[k]) / h)
                        .collect::<Vec<_>>(),
                );
            }
        }
    }
    model.input_norm = Normalization::fit(n_ex + n_s, inputs.iter().map(|r| r.as_slice()), true, floor);
    model.output_norm = Normalization::fit(n_ex, derivs.iter().map(|r| r.as_slice()), false, floor);
    let n_in = data.n_in();
    let states: Vec<&[f64]> = data
        .scenarios
        .iter()
        .flat_map(|sc| (0..sc.len()).map(move |i| sc.x_in(i)))
        .collect();
    model.state_scale_in = Normalization::fit(n_in, states, true, floor).scale;
}

/// Truncated copies of `data` for every curriculum stage, then the full set.
fn phases(scenarios: &[&ScenarioData], opts: &TrainOptions) -> Vec<(usize, Vec<ScenarioData>)> {
    let mut out: Vec<(usize, Vec<ScenarioData>)> = opts
        .curriculum
        .iter()
        .map(|st| {
            let cut = scenarios
                .iter()
                .map(|d| d.truncated(((st.horizon / d.grid.h).round() as usize).max(1)))
                .collect();
            (st.epochs, cut)
        })
        .collect();
    out.push((opts.max_epochs, scenarios.iter().map(|d| (*d).clone()).collect()));
    out
}

/// Shared epoch loop. `grad_one(model, k, data)` evaluates scenario `k` on
/// the (possibly truncated) `data`.
fn run<F>(mut model: NeuralOdeModel, scenarios: &[&ScenarioData], opts: &TrainOptions, grad_one: F) -> Result<TrainOutcome>
where
    F: Fn(&NeuralOdeModel, usize, &ScenarioData) -> Result<GradientResult> + Sync + Send,
{
    if scenarios.is_empty() {
        return Err(Error::Data("no training scenarios".into()));
    }
    let mut adam = Adam::new(model.n_params(), opts.adam);
    let mut history = Vec::new();
    let mut skipped = 0;
    let mut best_early: Option<(f64, Vec<f64>)> = None;
    let mut best_final: Option<(f64, Vec<f64>)> = None;
    let mut best_trace: Vec<f64> = Vec::new();
    let mut epoch = 0;
    let phase_list = phases(scenarios, opts);
    let last_phase = phase_list.len() - 1;
    for (phase, (epochs, data)) in phase_list.iter().enumerate() {
        let final_phase = phase == last_phase;
        for _ in 0..*epochs {
            let results = map_indexed(data, opts.execution, |k, d| grad_one(&model, k, d));
            let mut loss = 0.0;
            let mut samples = 0usize;
            let mut grad = vec![0.0; model.n_params()];
            let skipped_before = skipped;
            for r in results {
                match r {
                    Ok(g) => {
                        loss += g.loss;
                        samples += g.samples;
                        grad.iter_mut().zip(&g.grad).for_each(|(a, b)| *a += b);
                    }
                    Err(e) if e.is_numerical() => {
                        log::warn!("epoch {epoch}: skipping scenario ({e})");
                        skipped += 1;
                    }
                    Err(e) => return Err(e),
                }
            }
            if samples == 0 {
                return Err(Error::TrainingFailure(format!(
                    "every scenario failed in epoch {epoch}"
                )));
            }
            let loss = loss / samples as f64;
            grad.iter_mut().for_each(|g| *g /= samples as f64);
            let slot = if final_phase { &mut best_final } else { &mut best_early };
            // a partial epoch averages over fewer scenarios and is not comparable
            let complete = skipped == skipped_before;
            if complete && slot.as_ref().is_none_or(|(b, _)| loss < *b) {
                *slot = Some((loss, model.theta.clone()));
            }
            let mut theta = std::mem::take(&mut model.theta);
            let grad_norm = adam.step(&mut theta, &mut grad);
            model.theta = theta;
            history.push(EpochRecord {
                epoch,
                loss,
                grad_norm,
            });
            log::info!("epoch {epoch}: loss {loss:.6e}, |grad| {grad_norm:.3e}");
            epoch += 1;
            if final_phase {
                best_trace.push(best_final.as_ref().map(|b| b.0).unwrap());
                let w = opts.plateau_window;
                if w > 0 && best_trace.len() > w {
                    let then = best_trace[best_trace.len() - 1 - w];
                    let now = *best_trace.last().unwrap();
                    if (then - now) <= opts.plateau_tol * then.abs() {
                        log::info!("plateau reached after {epoch} epochs");
                        break;
                    }
                }
            }
        }
    }
    let (best_loss, theta) = best_final.or(best_early).ok_or_else(|| Error::Config("no training epochs configured".into()))?;
    model.theta = theta;
    Ok(TrainOutcome {
        model,
        history,
        best_loss,
        skipped,
    })
}

/// Fits `ẋ_ex = N_θ(x_ex, ŝ_in)` with measured features replayed and no
/// physics coupling.
pub fn train_open_loop(model: NeuralOdeModel, data: &TrainingSet, opts: &TrainOptions) -> Result<TrainOutcome> {
    data.validate()?;
    let scenarios: Vec<&ScenarioData> = data.scenarios.iter().collect();
    let scales = LossScales::from_model(&model, data.n_in());
    run(model, &scenarios, opts, |m, _, d| open_loop_gradient(m, d, &scales, &opts.integrator))
}

fn train_closed_loop(
    model: NeuralOdeModel,
    episodes: &[Episode],
    physics: PhysicsJacobian,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    let first = episodes
        .first()
        .ok_or_else(|| Error::Data("no training scenarios".into()))?;
    let scales = LossScales::from_model(&model, first.data.n_in);
    let scenarios: Vec<&ScenarioData> = episodes.iter().map(|e| e.data).collect();
    run(model, &scenarios, opts, |m, k, d| {
        pi_gradient(m, episodes[k].insys, d, physics, &scales, &opts.integrator)
    })
}

/// Closed-loop training with analytic internal Jacobians in the adjoint.
pub fn train_pi(model: NeuralOdeModel, episodes: &[Episode], opts: &TrainOptions) -> Result<TrainOutcome> {
    train_closed_loop(model, episodes, PhysicsJacobian::Analytic, opts)
}

/// Closed-loop training with the estimated Jacobian in the adjoint; the
/// forward pass still uses the true internal physics.
pub fn train_pg(
    model: NeuralOdeModel,
    estimate: &JacobianEstimate,
    episodes: &[Episode],
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    train_closed_loop(model, episodes, PhysicsJacobian::Estimated(estimate), opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::FaultScenario;
    use crate::integrators::TimeGrid;
    use crate::neudye::adjoint::simulate_open_loop;
    use crate::testutil::{fault, fixture, synthetic_data, TIGHT};

    fn quick(max_epochs: usize, lr: f64) -> TrainOptions {
        TrainOptions {
            max_epochs,
            adam: AdamOptions { lr, ..AdamOptions::default() },
            execution: Execution::Sequential,
            integrator: TIGHT,
            ..TrainOptions::default()
        }
    }

    #[test]
    fn first_adam_step_moves_each_parameter_by_the_learning_rate() {
        let mut adam = Adam::new(3, AdamOptions::default());
        let mut theta = [1.0, 2.0, 3.0];
        let mut g = [0.5, -2.0, 0.0];
        adam.step(&mut theta, &mut g);
        assert!((theta[0] - (1.0 - 1e-3 * 0.5 / (0.5 + 1e-8))).abs() < 1e-15);
        assert!((theta[1] - (2.0 + 1e-3 * 2.0 / (2.0 + 1e-8))).abs() < 1e-15);
        assert_eq!(theta[2], 3.0);
    }

    #[test]
    fn adam_matches_a_scripted_two_step_recomputation() {
        let o = AdamOptions::default();
        let mut adam = Adam::new(1, o);
        let mut theta = [0.0];
        adam.step(&mut theta, &mut [1.0]);
        adam.step(&mut theta, &mut [3.0]);
        let m1 = 0.1;
        let v1 = 0.001;
        let after1 = -o.lr * (m1 / 0.1) / ((v1 / 0.001f64).sqrt() + o.eps);
        let m2 = 0.9 * m1 + 0.1 * 3.0;
        let v2 = 0.999 * v1 + 0.001 * 9.0;
        let after2 = after1 - o.lr * (m2 / (1.0 - 0.81)) / ((v2 / (1.0 - 0.999f64.powi(2))).sqrt() + o.eps);
        assert!((theta[0] - after2).abs() < 1e-15);
    }

    #[test]
    fn adam_clips_large_gradients() {
        let mut adam = Adam::new(2, AdamOptions::default());
        let mut theta = [0.0; 2];
        let mut g = [12.0, 16.0];
        let norm = adam.step(&mut theta, &mut g);
        assert_eq!(norm, 20.0);
        assert!((g[0] - 6.0).abs() < 1e-12 && (g[1] - 8.0).abs() < 1e-12);
    }

    fn replay_data(model: &NeuralOdeModel, tn: f64) -> TrainingSet {
        let grid = TimeGrid::new(0.0, tn, 1e-3).unwrap();
        let m = grid.len();
        let s: Vec<f64> = (0..m).flat_map(|i| [(10.0 * grid.t(i)).sin(), (7.0 * grid.t(i)).cos()]).collect();
        let mut d = synthetic_data(grid, 1, 2, vec![0.0; m], vec![0.2; 2 * m], s);
        d.x_ex = simulate_open_loop(model, &d, &TIGHT).unwrap();
        TrainingSet::new(vec![d]).unwrap()
    }

    #[test]
    fn perfect_open_loop_model_stays_put_and_plateaus() {
        let model = NeuralOdeModel::new(2, 2, &[5], 31).unwrap();
        let data = replay_data(&model, 0.1);
        let opts = TrainOptions {
            plateau_window: 3,
            ..quick(50, 1e-3)
        };
        let out = train_open_loop(model.clone(), &data, &opts).unwrap();
        assert!(out.best_loss <= 1e-10);
        assert!(out.history.len() < 10);
        let moved = out.model.theta.iter().zip(&model.theta).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(moved <= 1e-8);
    }

    #[test]
    fn open_loop_training_fits_linear_external_dynamics() {
        let truth = NeuralOdeModel::new(2, 2, &[], 40).unwrap();
        let data = replay_data(&truth, 1.0);
        let mut model = NeuralOdeModel::new(2, 2, &[], 41).unwrap();
        fit_normalization(&mut model, &data, 1e-3);
        let first = open_loop_gradient(&model, &data.scenarios[0], &LossScales::from_model(&model, 1), &TIGHT)
            .unwrap()
            .loss;
        // the non-squared norm has a kink at zero, so the step is annealed
        for (lr, epochs) in [(1e-2, 1000), (1e-3, 300), (1e-4, 300)] {
            let opts = TrainOptions {
                plateau_window: 0,
                ..quick(epochs, lr)
            };
            model = train_open_loop(model, &data, &opts).unwrap().model;
        }
        let last = open_loop_gradient(&model, &data.scenarios[0], &LossScales::from_model(&model, 1), &TIGHT)
            .unwrap()
            .loss
            / data.scenarios[0].grid.n as f64;
        assert!(last <= 1e-4, "final loss {last}");
        assert!(last < first);
    }

    #[test]
    fn constant_data_drives_the_surrogate_to_rest() {
        let fx = fixture("two_machine", &[FaultScenario::no_fault(0, 1.0)], 0.1, &[4], 32);
        let eps: Vec<Episode> = fx
            .data
            .scenarios
            .iter()
            .zip(&fx.systems)
            .map(|(data, insys)| Episode { data, insys })
            .collect();
        let out = train_pi(fx.model, &eps, &quick(400, 1e-2)).unwrap();
        let d = &fx.data.scenarios[0];
        let insys = &fx.systems[0];
        let mut s = vec![0.0; insys.n_features()];
        insys.features(d.x_in(0), d.x_ex(0), crate::grid::FaultStage::PreFault, &mut s);
        let n = out.model.forward(d.x_ex(0), &s).unwrap();
        assert!(n.iter().all(|v| v.abs() <= 1e-4), "{n:?}");
    }

    #[test]
    fn curriculum_runs_before_the_full_horizon() {
        let fx = fixture("two_machine", &[fault(0, 2, 0.08)], 0.2, &[4], 33);
        let eps = [Episode {
            data: &fx.data.scenarios[0],
            insys: &fx.systems[0],
        }];
        let opts = TrainOptions {
            curriculum: vec![CurriculumStage { epochs: 2, horizon: 0.05 }],
            ..quick(1, 1e-3)
        };
        let out = train_pi(fx.model, &eps, &opts).unwrap();
        assert_eq!(out.history.len(), 3);
        assert_eq!(out.best_loss, out.history[2].loss);
    }

    #[test]
    fn empty_training_set_is_a_data_error() {
        let model = NeuralOdeModel::new(2, 2, &[3], 0).unwrap();
        assert!(matches!(train_pi(model, &[], &quick(1, 1e-3)), Err(Error::Data(_))));
    }

    #[test]
    fn normalization_centres_inputs_and_scales_outputs_by_rms_derivative() {
        let grid = TimeGrid::new(0.0, 2e-3, 1e-3).unwrap();
        let d = synthetic_data(grid, 1, 1, vec![0.0, 1.0, 2.0], vec![0.0, 0.003, 0.002], vec![4.0, 6.0, 8.0]);
        let data = TrainingSet::new(vec![d]).unwrap();
        let mut model = NeuralOdeModel::new(1, 1, &[2], 0).unwrap();
        fit_normalization(&mut model, &data, 1e-3);
        assert!((model.input_norm.offset[1] - 6.0).abs() < 1e-12);
        assert_eq!(model.output_norm.offset, vec![0.0]);
        let rms = ((9.0f64 + 1.0) / 2.0).sqrt();
        assert!((model.output_norm.scale[0] - rms).abs() < 1e-9);
    }
}
