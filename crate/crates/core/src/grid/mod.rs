//! Test grids, network reduction and swing dynamics.

pub mod admittance;
pub mod dynamics;
pub mod network;
pub mod powerflow;
pub mod scenario;

pub use admittance::{build_admittance, kron_reduce, AdmittanceSet, FaultStage, FAULT_SHUNT};
pub use dynamics::{FeatureSpec, FullSystem, HybridLayout, InsysJacobian, InternalSystem, Measurement, SwingParams};
pub use network::{BusId, NetworkModel};
pub use powerflow::{solve_operating_point, OperatingPoint};
pub use scenario::FaultScenario;
