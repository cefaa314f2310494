//! Sampled measurements used for training and evaluation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::FaultScenario;
use crate::integrators::TimeGrid;

/// Features just before an event, where the sampled right limit differs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeftLimit {
    pub index: usize,
    pub s_in: Vec<f64>,
}

/// One scenario's measurements on its time grid, stored row by row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioData {
    pub scenario: FaultScenario,
    pub grid: TimeGrid,
    /// Grid indices where the fault stage changes.
    pub events: Vec<usize>,
    pub n_in: usize,
    pub n_ex: usize,
    pub n_features: usize,
    pub x_in: Vec<f64>,
    pub x_ex: Vec<f64>,
    pub s_in: Vec<f64>,
    pub boundary_voltage: Vec<f64>,
    /// Pre-fault equilibrium `[x_ex; x_in]` of this scenario's loading.
    pub equilibrium: Vec<f64>,
    pub left_limits: Vec<LeftLimit>,
}

impl ScenarioData {
    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn x_in(&self, i: usize) -> &[f64] {
        &self.x_in[i * self.n_in..(i + 1) * self.n_in]
    }

    pub fn x_ex(&self, i: usize) -> &[f64] {
        &self.x_ex[i * self.n_ex..(i + 1) * self.n_ex]
    }

    pub fn s_in(&self, i: usize) -> &[f64] {
        &self.s_in[i * self.n_features..(i + 1) * self.n_features]
    }

    /// Features at grid point `i` as seen from the step ending there.
    pub fn s_in_left(&self, i: usize) -> &[f64] {
        self.left_limits
            .iter()
            .find(|l| l.index == i)
            .map(|l| l.s_in.as_slice())
            .unwrap_or_else(|| self.s_in(i))
    }

    pub fn n_boundary(&self) -> usize {
        self.boundary_voltage.len() / self.len()
    }

    pub fn boundary_voltage(&self, i: usize) -> &[f64] {
        let nb = self.n_boundary();
        &self.boundary_voltage[i * nb..(i + 1) * nb]
    }

    pub fn equilibrium_ex(&self) -> &[f64] {
        &self.equilibrium[..self.n_ex]
    }

    pub fn equilibrium_in(&self) -> &[f64] {
        &self.equilibrium[self.n_ex..]
    }

    /// Same data cut to the first `n` steps.
    pub fn truncated(&self, n: usize) -> Self {
        let grid = self.grid.truncated(n);
        let m = grid.len();
        let nb = self.n_boundary();
        Self {
            scenario: self.scenario,
            grid,
            events: self.events.iter().copied().filter(|&e| e <= grid.n).collect(),
            n_in: self.n_in,
            n_ex: self.n_ex,
            n_features: self.n_features,
            x_in: self.x_in[..m * self.n_in].to_vec(),
            x_ex: self.x_ex[..m * self.n_ex].to_vec(),
            s_in: self.s_in[..m * self.n_features].to_vec(),
            boundary_voltage: self.boundary_voltage[..m * nb].to_vec(),
            equilibrium: self.equilibrium.clone(),
            left_limits: self.left_limits.iter().filter(|l| l.index <= grid.n).cloned().collect(),
        }
    }

    fn check(&self) -> Result<()> {
        let m = self.len();
        if m < 2 {
            return Err(Error::Data("a scenario needs at least two samples".into()));
        }
        if self.x_in.len() != m * self.n_in
            || self.x_ex.len() != m * self.n_ex
            || self.s_in.len() != m * self.n_features
            || self.equilibrium.len() != self.n_in + self.n_ex
        {
            return Err(Error::Data(format!(
                "scenario {} has inconsistent sample arrays",
                self.scenario.id
            )));
        }
        Ok(())
    }
}

/// Measured scenarios sharing one sampling step and state layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSet {
    pub scenarios: Vec<ScenarioData>,
}

impl TrainingSet {
    pub fn new(scenarios: Vec<ScenarioData>) -> Result<Self> {
        let set = Self { scenarios };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .scenarios
            .first()
            .ok_or_else(|| Error::Data("training set is empty".into()))?;
        for s in &self.scenarios {
            s.check()?;
            if s.grid.h != first.grid.h {
                return Err(Error::Data("scenarios must share the sampling step".into()));
            }
            if (s.n_in, s.n_ex, s.n_features) != (first.n_in, first.n_ex, first.n_features) {
                return Err(Error::Data("scenarios must share the state layout".into()));
            }
        }
        Ok(())
    }

    pub fn n_in(&self) -> usize {
        self.scenarios[0].n_in
    }

    pub fn n_ex(&self) -> usize {
        self.scenarios[0].n_ex
    }

    pub fn n_features(&self) -> usize {
        self.scenarios[0].n_features
    }

    pub fn h(&self) -> f64 {
        self.scenarios[0].grid.h
    }
}
