//! Discrete-time baseline: a one-step map of the tie currents trained with
//! teacher forcing, rolled out in closed loop with the internal physics.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::TrainingSet;
use super::hybrid::{check_dims, HybridState, HybridTrajectory, DIVERGENCE_BOUND};
use super::train::{Adam, AdamOptions, EpochRecord};
use crate::error::{Error, Result};
use crate::grid::{FaultScenario, InternalSystem};
use crate::integrators::{segment_of, trapezoidal_step_from, TimeGrid, Trajectory, TrapezoidalOptions};
use crate::mlp::{ForwardCache, NeuralOdeModel, Normalization};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DnnOptions {
    pub epochs: usize,
    pub batch_size: usize,
    /// Use every `stride`-th one-step pair.
    pub stride: usize,
    pub adam: AdamOptions,
    /// Learning-rate factor applied after every epoch.
    pub lr_decay: f64,
    pub seed: u64,
}

impl Default for DnnOptions {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 256,
            stride: 1,
            adam: AdamOptions::default(),
            lr_decay: 0.95,
            seed: 0,
        }
    }
}

/// `x_ex,i+1 = x_ex,i + M_φ(x_ex,i, s_in,i)`; the network predicts the
/// increment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteSurrogate {
    pub model: NeuralOdeModel,
    pub h: f64,
}

impl DiscreteSurrogate {
    pub fn step(&self, x_ex: &[f64], s_in: &[f64], cache: &mut ForwardCache) -> Vec<f64> {
        self.model.forward_into(x_ex, s_in, cache);
        x_ex.iter().zip(&cache.output).map(|(x, d)| x + d).collect()
    }
}

#[derive(Debug, Clone)]
pub struct DnnOutcome {
    pub surrogate: DiscreteSurrogate,
    pub history: Vec<EpochRecord>,
    /// Mean squared normalized one-step error `((x_ex,i+1 - x̂_ex,i+1)/σ_ex)²`
    /// over the training pairs and tie-current components.
    pub one_step_error: f64,
}

struct Pair {
    scenario: usize,
    index: usize,
}

/// One-step pairs whose target is not across a jump of the measurements.
fn pairs(data: &TrainingSet, stride: usize) -> Vec<Pair> {
    let mut out = Vec::new();
    for (m, sc) in data.scenarios.iter().enumerate() {
        for i in (0..sc.grid.n).step_by(stride.max(1)) {
            if !sc.events.contains(&(i + 1)) {
                out.push(Pair { scenario: m, index: i });
            }
        }
    }
    out
}

/// Mean squared normalized one-step error of `surrogate` on the training
/// pairs, per tie-current component.
pub fn one_step_error(surrogate: &DiscreteSurrogate, data: &TrainingSet) -> f64 {
    let scale = surrogate.model.state_scale_ex().to_vec();
    let mut cache = ForwardCache::default();
    let ps = pairs(data, 1);
    let total: f64 = ps
        .iter()
        .map(|p| {
            let sc = &data.scenarios[p.scenario];
            let next = surrogate.step(sc.x_ex(p.index), sc.s_in(p.index), &mut cache);
            next.iter()
                .zip(sc.x_ex(p.index + 1))
                .zip(&scale)
                .map(|((a, b), s)| ((a - b) / s).powi(2))
                .sum::<f64>()
        })
        .sum();
    total / (ps.len() * scale.len()).max(1) as f64
}

/// Trains the one-step map on measured pairs by minibatch Adam on the
/// normalized squared increment error.
pub fn dnn_baseline(mut model: NeuralOdeModel, data: &TrainingSet, opts: &DnnOptions) -> Result<DnnOutcome> {
    data.validate()?;
    if model.n_ex() != data.n_ex() || model.n_features() != data.n_features() {
        return Err(Error::Structural("model does not match the data layout".into()));
    }
    let mut ps = pairs(data, opts.stride);
    if ps.is_empty() {
        return Err(Error::Data("no one-step pairs".into()));
    }
    let n_ex = data.n_ex();
    let increments: Vec<Vec<f64>> = ps
        .iter()
        .map(|p| {
            let sc = &data.scenarios[p.scenario];
            (0..n_ex).map(|k| sc.x_ex(p.index + 1)[k] - sc.x_ex(p.index)[k]).collect()
        })
        .collect();
    model.output_norm = Normalization::fit(n_ex, increments.iter().map(|r| r.as_slice()), true, 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut adam = Adam::new(model.n_params(), opts.adam);
    let mut history = Vec::with_capacity(opts.epochs);
    let mut cache = ForwardCache::default();
    let batch = opts.batch_size.max(1);
    for epoch in 0..opts.epochs {
        ps.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut last_norm = 0.0;
        for chunk in ps.chunks(batch) {
            let mut grad = vec![0.0; model.n_params()];
            for p in chunk {
                let sc = &data.scenarios[p.scenario];
                model.forward_into(sc.x_ex(p.index), sc.s_in(p.index), &mut cache);
                let w: Vec<f64> = (0..n_ex)
                    .map(|k| {
                        let target = sc.x_ex(p.index + 1)[k] - sc.x_ex(p.index)[k];
                        let s = model.output_norm.scale[k];
                        let r = (cache.output[k] - target) / s;
                        epoch_loss += r * r;
                        2.0 * r / s / chunk.len() as f64
                    })
                    .collect();
                model.backward(&cache, &w, Some(&mut grad));
            }
            let mut theta = std::mem::take(&mut model.theta);
            last_norm = adam.step(&mut theta, &mut grad);
            model.theta = theta;
        }
        adam.opts.lr *= opts.lr_decay;
        let loss = epoch_loss / ps.len() as f64;
        log::info!("dnn epoch {epoch}: loss {loss:.6e}");
        history.push(EpochRecord {
            epoch,
            loss,
            grad_norm: last_norm,
        });
    }
    let surrogate = DiscreteSurrogate { model, h: data.h() };
    Ok(DnnOutcome {
        one_step_error: one_step_error(&surrogate, data),
        surrogate,
        history,
    })
}

/// Alternates one surrogate step of the tie currents with one trapezoidal
/// step of the internal physics driven by them.
pub fn simulate_dnn_closed_loop(
    surrogate: &DiscreteSurrogate,
    insys: &InternalSystem,
    x0: &HybridState,
    scenario: &FaultScenario,
    grid: &TimeGrid,
    opts: &TrapezoidalOptions,
) -> Result<HybridTrajectory> {
    check_dims(&surrogate.model, insys)?;
    if (grid.h - surrogate.h).abs() > 1e-12 * grid.h {
        return Err(Error::Config("discrete surrogate used with a different step".into()));
    }
    let events = scenario.events(grid)?;
    let stages = scenario.segment_stages();
    let (n_in, n_ex) = (insys.n_in(), insys.n_ex());
    let mut data = Vec::with_capacity((n_in + n_ex) * grid.len());
    let (mut x_in, mut x_ex) = (x0.x_in.clone(), x0.x_ex.clone());
    data.extend_from_slice(&x_in);
    data.extend_from_slice(&x_ex);
    let mut s = vec![0.0; insys.n_features()];
    let mut cache = ForwardCache::default();
    let annotate = |e: Error, i: usize| e.at_step(i).in_scenario(scenario.id);
    for i in 0..grid.n {
        let stage = stages[segment_of(&events, i)];
        insys.features(&x_in, &x_ex, stage, &mut s);
        let next_ex = surrogate.step(&x_ex, &s, &mut cache);
        if next_ex.iter().any(|v| !(v.abs() <= DIVERGENCE_BOUND)) {
            return Err(annotate(Error::Divergence { t: grid.t(i + 1) }, i));
        }
        let mut f0 = vec![0.0; n_in];
        insys.rhs(&x_in, &x_ex, stage, &mut f0);
        let mut f = |z: &[f64], _: f64, o: &mut [f64]| insys.rhs(z, &next_ex, stage, o);
        x_in = trapezoidal_step_from(&mut f, &x_in, &f0, grid.t(i), grid.h, opts).map_err(|e| annotate(e, i))?;
        x_ex = next_ex;
        data.extend_from_slice(&x_in);
        data.extend_from_slice(&x_ex);
    }
    Ok(HybridTrajectory {
        traj: Trajectory {
            grid: *grid,
            dim: n_in + n_ex,
            data,
        },
        n_in,
        events,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{fault, fixture, synthetic_data, TIGHT};

    fn opts(epochs: usize) -> DnnOptions {
        DnnOptions {
            epochs,
            batch_size: 16,
            ..DnnOptions::default()
        }
    }

    #[test]
    fn constant_measurements_train_the_identity_map() {
        let grid = TimeGrid::new(0.0, 0.05, 1e-3).unwrap();
        let m = grid.len();
        let d = synthetic_data(grid, 1, 2, vec![0.0; m], [0.7, -0.2].repeat(m), vec![1.0; m]);
        let data = TrainingSet::new(vec![d]).unwrap();
        let model = NeuralOdeModel::new(2, 1, &[6], 1).unwrap();
        let out = dnn_baseline(model, &data, &opts(20)).unwrap();
        let mut cache = ForwardCache::default();
        let next = out.surrogate.step(&[0.7, -0.2], &[1.0], &mut cache);
        assert!((next[0] - 0.7).abs() <= 1e-6 && (next[1] + 0.2).abs() <= 1e-6);
        assert_eq!(out.history.len(), 20);
    }

    #[test]
    fn self_generated_pairs_have_zero_one_step_error() {
        let grid = TimeGrid::new(0.0, 0.02, 1e-3).unwrap();
        let m = grid.len();
        let s: Vec<f64> = (0..m).map(|i| (i as f64 * 0.3).sin()).collect();
        let model = NeuralOdeModel::new(1, 1, &[3], 2).unwrap();
        let sur = DiscreteSurrogate { model, h: grid.h };
        let mut x = vec![0.4];
        let mut cache = ForwardCache::default();
        let mut xs = x.clone();
        for i in 0..grid.n {
            x = sur.step(&x, &s[i..i + 1], &mut cache);
            xs.extend_from_slice(&x);
        }
        let d = synthetic_data(grid, 1, 1, vec![0.0; m], xs, s);
        let data = TrainingSet::new(vec![d]).unwrap();
        assert!(one_step_error(&sur, &data) <= 1e-15);
    }

    #[test]
    fn pairs_skip_targets_at_events() {
        let fx = fixture("two_machine", &[fault(0, 2, 0.08)], 0.1, &[3], 3);
        let ps = pairs(&fx.data, 1);
        assert_eq!(ps.len(), 100 - 2);
        assert!(ps.iter().all(|p| p.index + 1 != 50 && p.index + 1 != 80));
    }

    #[test]
    fn runaway_rollout_is_flagged_as_divergence() {
        let fx = fixture("two_machine", &[fault(0, 2, 0.08)], 0.1, &[3], 4);
        let d = &fx.data.scenarios[0];
        let mut model = fx.model.clone();
        let n = model.theta.len();
        model.theta[n - 1] = 1e4;
        model.output_norm = Normalization::identity(model.n_ex());
        let sur = DiscreteSurrogate { model, h: d.grid.h };
        let x0 = HybridState {
            x_in: d.x_in(0).to_vec(),
            x_ex: d.x_ex(0).to_vec(),
            t: 0.0,
        };
        let r = simulate_dnn_closed_loop(&sur, &fx.systems[0], &x0, &d.scenario, &d.grid, &TIGHT);
        assert!(r.unwrap_err().is_numerical());
        let wrong_h = DiscreteSurrogate { h: 2e-3, ..sur };
        let r = simulate_dnn_closed_loop(&wrong_h, &fx.systems[0], &x0, &d.scenario, &d.grid, &TIGHT);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn zero_increment_rollout_holds_tie_currents() {
        let fx = fixture("wscc9", &[crate::grid::FaultScenario::no_fault(0, 1.0)], 0.2, &[3], 5);
        let d = &fx.data.scenarios[0];
        let mut model = fx.model.clone();
        model.theta.iter_mut().for_each(|v| *v = 0.0);
        let sur = DiscreteSurrogate { model, h: d.grid.h };
        let x0 = HybridState {
            x_in: d.x_in(0).to_vec(),
            x_ex: d.x_ex(0).to_vec(),
            t: 0.0,
        };
        let t = simulate_dnn_closed_loop(&sur, &fx.systems[0], &x0, &d.scenario, &d.grid, &TIGHT).unwrap();
        for i in 0..t.len() {
            for (a, b) in t.traj.state(i).iter().zip(t.traj.state(0)) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
