//! Fault scenarios and their stage schedule on a time grid.

use serde::{Deserialize, Serialize};

use super::admittance::FaultStage;
use super::network::{BusId, NetworkModel};
use crate::error::{Error, Result};
use crate::integrators::{segment_of, TimeGrid};

pub const ALPHA_RANGE: (f64, f64) = (0.5, 1.5);

/// Self-clearing three-phase fault. `fault_bus = None` is the undisturbed
/// case.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaultScenario {
    pub id: usize,
    pub fault_bus: Option<BusId>,
    /// Fault start (s).
    pub start: f64,
    /// Absolute clearing time (s).
    pub clear: f64,
    /// Load scale of the internal system.
    pub alpha: f64,
}

impl FaultScenario {
    pub fn no_fault(id: usize, alpha: f64) -> Self {
        Self {
            id,
            fault_bus: None,
            start: 0.0,
            clear: 0.0,
            alpha,
        }
    }

    pub fn validate(&self, net: &NetworkModel) -> Result<()> {
        if !(ALPHA_RANGE.0..=ALPHA_RANGE.1).contains(&self.alpha) {
            return Err(Error::Config(format!(
                "scenario {}: load scale {} outside [{}, {}]",
                self.id, self.alpha, ALPHA_RANGE.0, ALPHA_RANGE.1
            )));
        }
        if let Some(bus) = self.fault_bus {
            net.bus_index(bus)
                .map_err(|_| Error::Config(format!("scenario {}: unknown fault bus {bus}", self.id)))?;
            if !(self.clear > self.start) {
                return Err(Error::Config(format!(
                    "scenario {}: clearing time {} must follow start {}",
                    self.id, self.clear, self.start
                )));
            }
        }
        Ok(())
    }

    /// Start and clearing times moved to the nearest grid points.
    pub fn snapped(&self, grid: &TimeGrid) -> Result<Self> {
        let mut s = *self;
        if self.fault_bus.is_some() {
            s.start = grid.t(grid.nearest_index(self.start)?);
            s.clear = grid.t(grid.nearest_index(self.clear)?);
            if s.clear <= s.start {
                return Err(Error::Config(format!(
                    "scenario {}: fault shorter than one step",
                    self.id
                )));
            }
        }
        Ok(s)
    }

    /// Grid indices where the stage changes. Events after the grid end are
    /// never reached and are omitted.
    pub fn events(&self, grid: &TimeGrid) -> Result<Vec<usize>> {
        match self.fault_bus {
            None => Ok(Vec::new()),
            Some(_) => {
                let end = grid.t(grid.n) + 0.5 * grid.h;
                [self.start, self.clear]
                    .into_iter()
                    .filter(|&t| t <= end)
                    .map(|t| grid.exact_index(t))
                    .collect()
            }
        }
    }

    /// Stage of each segment between events.
    pub fn segment_stages(&self) -> Vec<FaultStage> {
        match self.fault_bus {
            None => vec![FaultStage::PreFault],
            Some(b) => vec![
                FaultStage::PreFault,
                FaultStage::DuringFault(b),
                FaultStage::PostFault,
            ],
        }
    }

    /// Stage seen at grid index `i`, taking the right limit at events.
    pub fn stage_at(&self, events: &[usize], i: usize) -> FaultStage {
        self.segment_stages()[segment_of(events, i)]
    }
}
