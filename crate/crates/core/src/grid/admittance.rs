//! Bus admittance assembly, fault stages and Kron reduction.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::network::{BusId, NetworkModel};
use crate::error::{Error, Result};

pub type CMatrix = DMatrix<Complex64>;

/// Shunt admittance (p.u.) that stands in for a bolted three-phase fault.
pub const FAULT_SHUNT: f64 = 1.0e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "stage", content = "bus")]
pub enum FaultStage {
    PreFault,
    DuringFault(BusId),
    PostFault,
}

impl FaultStage {
    pub fn faulted_bus(&self) -> Option<BusId> {
        match self {
            FaultStage::DuringFault(b) => Some(*b),
            _ => None,
        }
    }

    /// 0, 1, 2 for pre-, during- and post-fault.
    pub fn index(&self) -> usize {
        match self {
            FaultStage::PreFault => 0,
            FaultStage::DuringFault(_) => 1,
            FaultStage::PostFault => 2,
        }
    }
}

/// Load scale applied to a bus: loads inside the internal system follow `alpha`,
/// everything else stays at nominal.
fn load_scale(net: &NetworkModel, bus: BusId, alpha: f64) -> f64 {
    if net.is_internal(bus) {
        alpha
    } else {
        1.0
    }
}

/// Bus admittance matrix of the network at a fault stage.
///
/// Off-diagonals are `-y` per branch; the diagonal collects incident series
/// admittances, half line charging, static shunts and the constant-impedance
/// loads (internal loads scaled by `alpha`). The during-fault stage adds
/// [`FAULT_SHUNT`] at the faulted bus. Pre- and post-fault matrices are equal.
pub fn build_admittance(net: &NetworkModel, stage: FaultStage, alpha: f64) -> Result<CMatrix> {
    let n = net.buses.len();
    let mut y = CMatrix::zeros(n, n);
    for br in &net.branches {
        let f = net.bus_index(br.from)?;
        let t = net.bus_index(br.to)?;
        let half = Complex64::new(0.0, 0.5 * br.charging);
        y[(f, f)] += br.y + half;
        y[(t, t)] += br.y + half;
        y[(f, t)] -= br.y;
        y[(t, f)] -= br.y;
    }
    for (i, bus) in net.buses.iter().enumerate() {
        y[(i, i)] += bus.shunt + bus.load * load_scale(net, bus.id, alpha);
    }
    if let Some(b) = stage.faulted_bus() {
        let i = net.bus_index(b)?;
        y[(i, i)] += Complex64::new(FAULT_SHUNT, 0.0);
    }
    Ok(y)
}

/// Bus admittance plus one internal node per listed machine, tied to its
/// terminal bus through `1 / (j x'd)`. Machine nodes follow the buses, in the
/// order of `machines`.
pub fn augmented_admittance(
    net: &NetworkModel,
    stage: FaultStage,
    alpha: f64,
    machines: &[usize],
) -> Result<CMatrix> {
    let nb = net.buses.len();
    let ybus = build_admittance(net, stage, alpha)?;
    let mut y = CMatrix::zeros(nb + machines.len(), nb + machines.len());
    y.view_mut((0, 0), (nb, nb)).copy_from(&ybus);
    for (j, &k) in machines.iter().enumerate() {
        let m = &net.machines[k];
        let t = net.bus_index(m.bus)?;
        let ym = Complex64::new(0.0, -1.0 / m.xd_prime);
        let node = nb + j;
        y[(t, t)] += ym;
        y[(node, node)] += ym;
        y[(t, node)] -= ym;
        y[(node, t)] -= ym;
    }
    Ok(y)
}

/// LU factorization that rejects numerically singular matrices.
pub(crate) fn checked_lu(
    a: CMatrix,
    what: &str,
) -> Result<nalgebra::linalg::LU<Complex64, nalgebra::Dyn, nalgebra::Dyn>> {
    let n = a.nrows();
    let scale = a.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let lu = a.lu();
    let u = lu.u();
    let min_pivot = (0..n).map(|i| u[(i, i)].norm()).fold(f64::INFINITY, f64::min);
    if n > 0 && (!min_pivot.is_finite() || min_pivot <= 1e-14 * scale.max(1e-300)) {
        return Err(Error::DegenerateNetwork(format!(
            "{what} is singular (pivot {min_pivot:e}, scale {scale:e})"
        )));
    }
    Ok(lu)
}

pub(crate) fn solve(a: CMatrix, b: &CMatrix, what: &str) -> Result<CMatrix> {
    let lu = checked_lu(a, what)?;
    lu.solve(b)
        .ok_or_else(|| Error::DegenerateNetwork(format!("{what} is singular")))
}

pub(crate) fn submatrix(y: &CMatrix, rows: &[usize], cols: &[usize]) -> CMatrix {
    CMatrix::from_fn(rows.len(), cols.len(), |i, j| y[(rows[i], cols[j])])
}

/// Eliminates every node not in `retained`: `Y_rr - Y_re Y_ee^{-1} Y_er`,
/// with rows and columns in the order of `retained`.
pub fn kron_reduce(y: &CMatrix, retained: &[usize]) -> Result<CMatrix> {
    let n = y.nrows();
    if y.ncols() != n {
        return Err(Error::Structural("admittance matrix must be square".into()));
    }
    if let Some(&bad) = retained.iter().find(|&&r| r >= n) {
        return Err(Error::Structural(format!("retained node {bad} out of range")));
    }
    let eliminated: Vec<usize> = (0..n).filter(|i| !retained.contains(i)).collect();
    let y_rr = submatrix(y, retained, retained);
    if eliminated.is_empty() {
        return Ok(y_rr);
    }
    let y_re = submatrix(y, retained, &eliminated);
    let y_er = submatrix(y, &eliminated, retained);
    let y_ee = submatrix(y, &eliminated, &eliminated);
    let x = solve(y_ee, &y_er, "eliminated block")?;
    Ok(y_rr - y_re * x)
}

/// Node kept after reduction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetainedNode {
    /// Internal EMF node of machine `k` (index into `NetworkModel::machines`).
    Machine(usize),
    /// Bus by index into `NetworkModel::buses`.
    Bus(usize),
}

/// Reduced admittances of the three fault stages over a common node ordering.
#[derive(Debug, Clone)]
pub struct AdmittanceSet {
    pub nodes: Vec<RetainedNode>,
    pub pre_fault: CMatrix,
    pub during_fault: CMatrix,
    pub post_fault: CMatrix,
}

impl AdmittanceSet {
    pub fn get(&self, stage: FaultStage) -> &CMatrix {
        match stage {
            FaultStage::PreFault => &self.pre_fault,
            FaultStage::DuringFault(_) => &self.during_fault,
            FaultStage::PostFault => &self.post_fault,
        }
    }

    /// All machines reduced onto their internal nodes. Without a fault bus the
    /// during-fault matrix equals the pre-fault one.
    pub fn full_system(net: &NetworkModel, fault_bus: Option<BusId>, alpha: f64) -> Result<Self> {
        let machines: Vec<usize> = (0..net.machines.len()).collect();
        let nb = net.buses.len();
        let retained: Vec<usize> = (nb..nb + machines.len()).collect();
        let nodes = machines.iter().map(|&k| RetainedNode::Machine(k)).collect();
        Self::reduce(net, fault_bus, alpha, &machines, &retained, nodes, None)
    }

    /// Internal network only (external buses and tie-line series elements
    /// removed), reduced onto internal machine nodes followed by the boundary
    /// buses.
    pub fn internal_system(net: &NetworkModel, fault_bus: Option<BusId>, alpha: f64) -> Result<Self> {
        let machines = net.internal_machines();
        let boundary = net.boundary_buses()?;
        let internal_buses: Vec<usize> = (0..net.buses.len())
            .filter(|&i| net.is_internal(net.buses[i].id))
            .collect();
        let nb = net.buses.len();
        let mut retained: Vec<usize> = (nb..nb + machines.len()).collect();
        retained.extend(boundary.iter().copied());
        let mut nodes: Vec<RetainedNode> = machines.iter().map(|&k| RetainedNode::Machine(k)).collect();
        nodes.extend(boundary.iter().map(|&b| RetainedNode::Bus(b)));
        Self::reduce(net, fault_bus, alpha, &machines, &retained, nodes, Some(&internal_buses))
    }

    fn reduce(
        net: &NetworkModel,
        fault_bus: Option<BusId>,
        alpha: f64,
        machines: &[usize],
        retained: &[usize],
        nodes: Vec<RetainedNode>,
        internal_only: Option<&[usize]>,
    ) -> Result<Self> {
        let build = |stage| -> Result<CMatrix> {
            let y = match internal_only {
                None => augmented_admittance(net, stage, alpha, machines)?,
                Some(buses) => internal_augmented(net, stage, alpha, machines, buses)?,
            };
            kron_reduce(&y, retained)
        };
        let pre_fault = build(FaultStage::PreFault)?;
        let during_fault = match fault_bus {
            Some(b) => build(FaultStage::DuringFault(b))?,
            None => pre_fault.clone(),
        };
        Ok(Self {
            nodes,
            during_fault,
            post_fault: build(FaultStage::PostFault)?,
            pre_fault,
        })
    }
}

/// Augmented admittance with every branch that touches an external bus
/// stripped of its series element. Tie-line charging at the internal end
/// stays, so the tie current is exactly the series current. External rows
/// are left as isolated identity rows so indices keep matching
/// `NetworkModel::buses`.
pub(crate) fn internal_augmented(
    net: &NetworkModel,
    stage: FaultStage,
    alpha: f64,
    machines: &[usize],
    internal_buses: &[usize],
) -> Result<CMatrix> {
    let mut y = augmented_admittance(net, stage, alpha, machines)?;
    let nb = net.buses.len();
    for br in &net.branches {
        let f = net.bus_index(br.from)?;
        let t = net.bus_index(br.to)?;
        let fi = internal_buses.contains(&f);
        let ti = internal_buses.contains(&t);
        if fi && ti {
            continue;
        }
        // remove the series element from both ends
        y[(f, f)] -= br.y;
        y[(t, t)] -= br.y;
        y[(f, t)] += br.y;
        y[(t, f)] += br.y;
    }
    for i in 0..nb {
        if !internal_buses.contains(&i) {
            for j in 0..y.ncols() {
                y[(i, j)] = Complex64::new(0.0, 0.0);
                y[(j, i)] = Complex64::new(0.0, 0.0);
            }
            y[(i, i)] = Complex64::new(1.0, 0.0);
        }
    }
    Ok(y)
}
