//! Classical swing dynamics of the full grid and of the internal system.
//!
//! Machine states are interleaved as `[δ_1, Δω_1, δ_2, Δω_2, ...]` (rad, p.u.).
//! Tie-line currents are interleaved as `[Re I_1, Im I_1, ...]` in the
//! synchronous frame, positive from the internal endpoint outwards.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::admittance::{
    augmented_admittance, internal_augmented, solve, submatrix, AdmittanceSet, CMatrix,
    FaultStage,
};
use super::network::{BusId, NetworkModel, TieLine};
use super::powerflow::{solve_operating_point, OperatingPoint};
use crate::error::{Error, Result};

const J: Complex64 = Complex64::new(0.0, 1.0);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwingParams {
    pub h: f64,
    pub d: f64,
    pub pm: f64,
    pub e: f64,
}

impl SwingParams {
    #[inline]
    fn accel(&self, pe: f64, domega: f64) -> f64 {
        (self.pm - pe - self.d * domega) / (2.0 * self.h)
    }
}

fn emf(params: &[SwingParams], x: &[f64]) -> Vec<Complex64> {
    params
        .iter()
        .enumerate()
        .map(|(k, p)| Complex64::from_polar(p.e, x[2 * k]))
        .collect()
}

/// Which internal quantities feed the surrogate besides the tie-line currents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    /// Internal rotor angles relative to the internal centre of inertia.
    pub relative_angles: bool,
    /// Internal speed deviations.
    pub speeds: bool,
    /// Internal branches whose series current (rectangular) is a feature.
    pub line_currents: Vec<[BusId; 2]>,
}

impl FeatureSpec {
    /// Speeds, COI angles when there is more than one internal machine, and
    /// the currents of every branch inside the internal system.
    pub fn default_for(net: &NetworkModel) -> Self {
        let line_currents = net
            .branches
            .iter()
            .filter(|b| net.is_internal(b.from) && net.is_internal(b.to))
            .map(|b| [b.from, b.to])
            .collect();
        Self {
            relative_angles: net.internal_machines().len() > 1,
            speeds: true,
            line_currents,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct FeatureLine {
    from: usize,
    to: usize,
    y: Complex64,
}

/// Index bookkeeping shared by the full system and the internal model.
#[derive(Debug, Clone)]
pub struct HybridLayout {
    pub internal_machines: Vec<usize>,
    pub ties: Vec<TieLine>,
    /// Bus indices of the internal endpoints of tie-lines.
    pub boundary_buses: Vec<usize>,
    pub features: FeatureSpec,
    lines: Vec<FeatureLine>,
    coi_weights: Vec<f64>,
    machine_bus_ids: Vec<BusId>,
    boundary_bus_ids: Vec<BusId>,
}

impl HybridLayout {
    pub fn new(net: &NetworkModel, features: &FeatureSpec) -> Result<Self> {
        let internal_machines = net.internal_machines();
        if internal_machines.is_empty() {
            return Err(Error::Structural("internal system has no machine".into()));
        }
        let ties = net.tie_lines()?;
        let boundary_buses = net.boundary_buses()?;
        let lines = features
            .line_currents
            .iter()
            .map(|&[f, t]| {
                if !(net.is_internal(f) && net.is_internal(t)) {
                    return Err(Error::Config(format!("feature line {f}-{t} is not internal")));
                }
                let br = net
                    .branches
                    .iter()
                    .find(|b| (b.from == f && b.to == t) || (b.from == t && b.to == f))
                    .ok_or_else(|| Error::Config(format!("feature line {f}-{t} is not a branch")))?;
                Ok(FeatureLine {
                    from: net.bus_index(f)?,
                    to: net.bus_index(t)?,
                    y: br.y,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let total_h: f64 = internal_machines.iter().map(|&k| net.machines[k].h).sum();
        Ok(Self {
            coi_weights: internal_machines
                .iter()
                .map(|&k| net.machines[k].h / total_h)
                .collect(),
            machine_bus_ids: internal_machines.iter().map(|&k| net.machines[k].bus).collect(),
            boundary_bus_ids: boundary_buses.iter().map(|&b| net.buses[b].id).collect(),
            internal_machines,
            ties,
            boundary_buses,
            features: features.clone(),
            lines,
        })
    }

    pub fn n_in(&self) -> usize {
        2 * self.internal_machines.len()
    }

    pub fn n_ex(&self) -> usize {
        2 * self.ties.len()
    }

    pub fn n_features(&self) -> usize {
        let m = self.internal_machines.len();
        (self.features.relative_angles as usize) * m
            + (self.features.speeds as usize) * m
            + 2 * self.lines.len()
    }

    pub fn n_lines(&self) -> usize {
        self.lines.len()
    }

    pub fn names_in(&self) -> Vec<String> {
        self.machine_bus_ids
            .iter()
            .flat_map(|b| [format!("delta_{b}"), format!("domega_{b}")])
            .collect()
    }

    pub fn names_ex(&self, net: &NetworkModel) -> Vec<String> {
        self.ties
            .iter()
            .flat_map(|t| {
                let (a, b) = (net.buses[t.internal_bus].id, net.buses[t.external_bus].id);
                [format!("itie_{a}_{b}_re"), format!("itie_{a}_{b}_im")]
            })
            .collect()
    }

    pub fn names_features(&self, net: &NetworkModel) -> Vec<String> {
        let mut out = Vec::new();
        if self.features.relative_angles {
            out.extend(self.machine_bus_ids.iter().map(|b| format!("delta_coi_{b}")));
        }
        if self.features.speeds {
            out.extend(self.machine_bus_ids.iter().map(|b| format!("domega_{b}")));
        }
        for l in &self.lines {
            let (a, b) = (net.buses[l.from].id, net.buses[l.to].id);
            out.push(format!("iline_{a}_{b}_re"));
            out.push(format!("iline_{a}_{b}_im"));
        }
        out
    }

    pub fn boundary_bus_ids(&self) -> &[BusId] {
        &self.boundary_bus_ids
    }

    fn coi_angle(&self, x_in: &[f64]) -> f64 {
        self.coi_weights
            .iter()
            .enumerate()
            .map(|(k, w)| w * x_in[2 * k])
            .sum()
    }

    /// Features from internal states and internal line currents.
    fn assemble_features(&self, x_in: &[f64], line_currents: &[Complex64], out: &mut [f64]) {
        let m = self.internal_machines.len();
        let mut r = 0;
        if self.features.relative_angles {
            let coi = self.coi_angle(x_in);
            for k in 0..m {
                out[r] = x_in[2 * k] - coi;
                r += 1;
            }
        }
        if self.features.speeds {
            for k in 0..m {
                out[r] = x_in[2 * k + 1];
                r += 1;
            }
        }
        for i in line_currents {
            out[r] = i.re;
            out[r + 1] = i.im;
            r += 2;
        }
    }
}

/// Measured quantities at one time instant of a full-system trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub x_in: Vec<f64>,
    pub x_ex: Vec<f64>,
    pub s_in: Vec<f64>,
    pub boundary_voltage: Vec<f64>,
}

/// Ground-truth model: every machine, full network reduced to EMF nodes.
#[derive(Debug, Clone)]
pub struct FullSystem {
    pub machines: Vec<SwingParams>,
    pub omega_base: f64,
    pub admittances: AdmittanceSet,
    /// Bus voltages as a linear map of the EMF phasors, per stage.
    bus_maps: [CMatrix; 3],
    pub equilibrium: Vec<f64>,
}

impl FullSystem {
    pub fn new(net: &NetworkModel, fault_bus: Option<BusId>, alpha: f64) -> Result<Self> {
        let op = solve_operating_point(net, alpha)?;
        Self::from_operating_point(net, &op, fault_bus)
    }

    pub fn from_operating_point(
        net: &NetworkModel,
        op: &OperatingPoint,
        fault_bus: Option<BusId>,
    ) -> Result<Self> {
        let admittances = AdmittanceSet::full_system(net, fault_bus, op.alpha)?;
        let machines: Vec<SwingParams> = net
            .machines
            .iter()
            .zip(&op.machines)
            .map(|(m, init)| SwingParams {
                h: m.h,
                d: m.d,
                pm: init.pm,
                e: init.e,
            })
            .collect();
        let all: Vec<usize> = (0..net.machines.len()).collect();
        let nb = net.buses.len();
        let buses: Vec<usize> = (0..nb).collect();
        let sources: Vec<usize> = (nb..nb + all.len()).collect();
        let map = |stage: FaultStage| -> Result<CMatrix> {
            let y = augmented_admittance(net, stage, op.alpha, &all)?;
            let ybb = submatrix(&y, &buses, &buses);
            let ybs = submatrix(&y, &buses, &sources);
            Ok(-solve(ybb, &ybs, "bus admittance")?)
        };
        let pre = map(FaultStage::PreFault)?;
        let during = match fault_bus {
            Some(b) => map(FaultStage::DuringFault(b))?,
            None => pre.clone(),
        };
        let post = map(FaultStage::PostFault)?;
        let equilibrium = op
            .machines
            .iter()
            .flat_map(|m| [m.delta, 0.0])
            .collect();
        Ok(Self {
            machines,
            omega_base: net.omega_base(),
            admittances,
            bus_maps: [pre, during, post],
            equilibrium,
        })
    }

    pub fn dim(&self) -> usize {
        2 * self.machines.len()
    }

    /// Electrical power of every machine.
    pub fn electrical_power(&self, x: &[f64], stage: FaultStage) -> Vec<f64> {
        let e = emf(&self.machines, x);
        let y = self.admittances.get(stage);
        (0..e.len())
            .map(|k| {
                let i: Complex64 = (0..e.len()).map(|l| y[(k, l)] * e[l]).sum();
                (e[k] * i.conj()).re
            })
            .collect()
    }

    /// `dδ/dt = ω_b Δω`, `dΔω/dt = (Pm - Pe - D Δω) / 2H`.
    pub fn rhs(&self, x: &[f64], stage: FaultStage, out: &mut [f64]) {
        let pe = self.electrical_power(x, stage);
        for (k, p) in self.machines.iter().enumerate() {
            out[2 * k] = self.omega_base * x[2 * k + 1];
            out[2 * k + 1] = p.accel(pe[k], x[2 * k + 1]);
        }
    }

    pub fn bus_voltages(&self, x: &[f64], stage: FaultStage) -> Vec<Complex64> {
        let e = nalgebra::DVector::from_vec(emf(&self.machines, x));
        (&self.bus_maps[stage.index()] * e).iter().copied().collect()
    }

    /// Transient energy `Σ H Δω² + V(δ)/ω_b` on the network of `stage`, with
    /// potential measured from `reference`. Conserved along trajectories when
    /// D = 0 and the reduced network has no transfer conductances.
    pub fn energy(&self, x: &[f64], reference: &[f64], stage: FaultStage) -> f64 {
        let y = self.admittances.get(stage);
        let n = self.machines.len();
        let mut kinetic = 0.0;
        let mut potential = 0.0;
        for k in 0..n {
            let p = &self.machines[k];
            kinetic += p.h * x[2 * k + 1].powi(2);
            let dk = x[2 * k] - reference[2 * k];
            potential += (p.e * p.e * y[(k, k)].re - p.pm) * dk;
            for l in (k + 1)..n {
                let b = y[(k, l)].im;
                let now = (x[2 * k] - x[2 * l]).cos();
                let then = (reference[2 * k] - reference[2 * l]).cos();
                potential -= p.e * self.machines[l].e * b * (now - then);
            }
        }
        kinetic + potential / self.omega_base
    }

    /// Tie currents, internal features and boundary voltage magnitudes.
    pub fn measure(&self, layout: &HybridLayout, x: &[f64], stage: FaultStage) -> Measurement {
        let v = self.bus_voltages(x, stage);
        let x_in: Vec<f64> = layout
            .internal_machines
            .iter()
            .flat_map(|&k| [x[2 * k], x[2 * k + 1]])
            .collect();
        let x_ex: Vec<f64> = layout
            .ties
            .iter()
            .flat_map(|t| {
                let i = t.y * (v[t.internal_bus] - v[t.external_bus]);
                [i.re, i.im]
            })
            .collect();
        let currents: Vec<Complex64> = layout.lines.iter().map(|l| l.y * (v[l.from] - v[l.to])).collect();
        let mut s_in = vec![0.0; layout.n_features()];
        layout.assemble_features(&x_in, &currents, &mut s_in);
        Measurement {
            x_in,
            x_ex,
            s_in,
            boundary_voltage: layout.boundary_buses.iter().map(|&b| v[b].norm()).collect(),
        }
    }
}

#[derive(Debug, Clone)]
struct InsysStage {
    /// Machine currents from EMFs with the boundary open.
    k: CMatrix,
    /// Machine currents from tie currents.
    b: CMatrix,
    /// Boundary voltages from EMFs and from tie currents.
    vb_e: CMatrix,
    vb_i: CMatrix,
    /// Feature line currents from EMFs and from tie currents.
    line_e: CMatrix,
    line_i: CMatrix,
}

/// Jacobians of the internal dynamics and of the feature map.
#[derive(Debug, Clone)]
pub struct InsysJacobian {
    pub rhs_in: DMatrix<f64>,
    pub rhs_ex: DMatrix<f64>,
    pub feat_in: DMatrix<f64>,
    pub feat_ex: DMatrix<f64>,
}

/// Internal-system physics with the external grid replaced by tie-line
/// current injections at the boundary buses.
#[derive(Debug, Clone)]
pub struct InternalSystem {
    pub machines: Vec<SwingParams>,
    pub omega_base: f64,
    pub layout: HybridLayout,
    pub admittances: AdmittanceSet,
    stages: [InsysStage; 3],
}

impl InternalSystem {
    pub fn new(
        net: &NetworkModel,
        op: &OperatingPoint,
        fault_bus: Option<BusId>,
        features: &FeatureSpec,
    ) -> Result<Self> {
        let layout = HybridLayout::new(net, features)?;
        let admittances = AdmittanceSet::internal_system(net, fault_bus, op.alpha)?;
        let machines: Vec<SwingParams> = layout
            .internal_machines
            .iter()
            .map(|&k| SwingParams {
                h: net.machines[k].h,
                d: net.machines[k].d,
                pm: op.machines[k].pm,
                e: op.machines[k].e,
            })
            .collect();

        let nm = layout.internal_machines.len();
        let nt = layout.ties.len();
        let nbd = layout.boundary_buses.len();
        // tie t injects -I_t into the internal network at its boundary bus
        let mut inj = CMatrix::zeros(nbd, nt);
        for (t, tie) in layout.ties.iter().enumerate() {
            let slot = layout.boundary_buses.iter().position(|&b| b == tie.internal_bus).unwrap();
            inj[(slot, t)] = Complex64::new(-1.0, 0.0);
        }

        let nb = net.buses.len();
        let internal_buses: Vec<usize> = (0..nb).filter(|&i| net.is_internal(net.buses[i].id)).collect();
        let sources: Vec<usize> = (nb..nb + nm).collect();
        let mut full_inj = CMatrix::zeros(internal_buses.len(), nt);
        for (t, tie) in layout.ties.iter().enumerate() {
            let slot = internal_buses.iter().position(|&b| b == tie.internal_bus).unwrap();
            full_inj[(slot, t)] = Complex64::new(-1.0, 0.0);
        }
        let slot_of = |bus: usize| internal_buses.iter().position(|&b| b == bus).unwrap();

        let build = |stage: FaultStage| -> Result<InsysStage> {
            let y = admittances.get(stage);
            let m: Vec<usize> = (0..nm).collect();
            let bd: Vec<usize> = (nm..nm + nbd).collect();
            let ymm = submatrix(y, &m, &m);
            let ymb = submatrix(y, &m, &bd);
            let ybm = submatrix(y, &bd, &m);
            let ybb = submatrix(y, &bd, &bd);
            let mut rhs = CMatrix::zeros(nbd, nm + nt);
            rhs.view_mut((0, 0), (nbd, nm)).copy_from(&(-ybm));
            rhs.view_mut((0, nm), (nbd, nt)).copy_from(&inj);
            let vb = solve(ybb, &rhs, "boundary block")?;
            let vb_e = vb.columns(0, nm).into_owned();
            let vb_i = vb.columns(nm, nt).into_owned();
            let k = &ymm + &ymb * &vb_e;
            let b = &ymb * &vb_i;

            // every internal bus voltage, for the feature line currents
            let ya = internal_augmented(net, stage, op.alpha, &layout.internal_machines, &internal_buses)?;
            let yii = submatrix(&ya, &internal_buses, &internal_buses);
            let yis = submatrix(&ya, &internal_buses, &sources);
            let mut rhs = CMatrix::zeros(internal_buses.len(), nm + nt);
            rhs.view_mut((0, 0), (internal_buses.len(), nm)).copy_from(&(-yis));
            rhs.view_mut((0, nm), (internal_buses.len(), nt)).copy_from(&full_inj);
            let v = solve(yii, &rhs, "internal network")?;
            let nl = layout.lines.len();
            let mut line_e = CMatrix::zeros(nl, nm);
            let mut line_i = CMatrix::zeros(nl, nt);
            for (l, line) in layout.lines.iter().enumerate() {
                let (f, t) = (slot_of(line.from), slot_of(line.to));
                for c in 0..nm {
                    line_e[(l, c)] = line.y * (v[(f, c)] - v[(t, c)]);
                }
                for c in 0..nt {
                    line_i[(l, c)] = line.y * (v[(f, nm + c)] - v[(t, nm + c)]);
                }
            }
            Ok(InsysStage {
                k,
                b,
                vb_e,
                vb_i,
                line_e,
                line_i,
            })
        };
        let pre = build(FaultStage::PreFault)?;
        let during = match fault_bus.filter(|&b| net.is_internal(b)) {
            Some(b) => build(FaultStage::DuringFault(b))?,
            None => pre.clone(),
        };
        let post = build(FaultStage::PostFault)?;
        Ok(Self {
            machines,
            omega_base: net.omega_base(),
            layout,
            admittances,
            stages: [pre, during, post],
        })
    }

    pub fn n_in(&self) -> usize {
        self.layout.n_in()
    }

    pub fn n_ex(&self) -> usize {
        self.layout.n_ex()
    }

    pub fn n_features(&self) -> usize {
        self.layout.n_features()
    }

    fn tie_currents(x_ex: &[f64]) -> Vec<Complex64> {
        x_ex.chunks_exact(2).map(|c| Complex64::new(c[0], c[1])).collect()
    }

    fn machine_currents(&self, e: &[Complex64], it: &[Complex64], st: &InsysStage) -> Vec<Complex64> {
        (0..e.len())
            .map(|k| {
                let mut i = Complex64::new(0.0, 0.0);
                for (l, el) in e.iter().enumerate() {
                    i += st.k[(k, l)] * el;
                }
                for (t, itl) in it.iter().enumerate() {
                    i += st.b[(k, t)] * itl;
                }
                i
            })
            .collect()
    }

    /// Internal state derivative given tie-line currents.
    pub fn rhs(&self, x_in: &[f64], x_ex: &[f64], stage: FaultStage, out: &mut [f64]) {
        let st = &self.stages[stage.index()];
        let e = emf(&self.machines, x_in);
        let it = Self::tie_currents(x_ex);
        let im = self.machine_currents(&e, &it, st);
        for (k, p) in self.machines.iter().enumerate() {
            let pe = (e[k] * im[k].conj()).re;
            out[2 * k] = self.omega_base * x_in[2 * k + 1];
            out[2 * k + 1] = p.accel(pe, x_in[2 * k + 1]);
        }
    }

    /// Surrogate input features computed from the hybrid state.
    pub fn features(&self, x_in: &[f64], x_ex: &[f64], stage: FaultStage, out: &mut [f64]) {
        let st = &self.stages[stage.index()];
        let e = emf(&self.machines, x_in);
        let it = Self::tie_currents(x_ex);
        let currents: Vec<Complex64> = (0..self.layout.n_lines())
            .map(|l| {
                let mut i = Complex64::new(0.0, 0.0);
                for (c, ec) in e.iter().enumerate() {
                    i += st.line_e[(l, c)] * ec;
                }
                for (c, ic) in it.iter().enumerate() {
                    i += st.line_i[(l, c)] * ic;
                }
                i
            })
            .collect();
        self.layout.assemble_features(x_in, &currents, out);
    }

    pub fn boundary_voltages(&self, x_in: &[f64], x_ex: &[f64], stage: FaultStage) -> Vec<Complex64> {
        let st = &self.stages[stage.index()];
        let e = emf(&self.machines, x_in);
        let it = Self::tie_currents(x_ex);
        (0..st.vb_e.nrows())
            .map(|r| {
                let mut v = Complex64::new(0.0, 0.0);
                for (c, ec) in e.iter().enumerate() {
                    v += st.vb_e[(r, c)] * ec;
                }
                for (c, ic) in it.iter().enumerate() {
                    v += st.vb_i[(r, c)] * ic;
                }
                v
            })
            .collect()
    }

    /// Analytic Jacobians of the internal dynamics and features with respect
    /// to the internal states and tie currents.
    pub fn jacobian(&self, x_in: &[f64], x_ex: &[f64], stage: FaultStage) -> InsysJacobian {
        let st = &self.stages[stage.index()];
        let (n_in, n_ex, n_s) = (self.n_in(), self.n_ex(), self.n_features());
        let nm = self.machines.len();
        let e = emf(&self.machines, x_in);
        let it = Self::tie_currents(x_ex);
        let im = self.machine_currents(&e, &it, st);

        let mut rhs_in = DMatrix::zeros(n_in, n_in);
        let mut rhs_ex = DMatrix::zeros(n_in, n_ex);
        for (k, p) in self.machines.iter().enumerate() {
            let row = 2 * k + 1;
            rhs_in[(2 * k, 2 * k + 1)] = self.omega_base;
            rhs_in[(row, 2 * k + 1)] = -p.d / (2.0 * p.h);
            let scale = -1.0 / (2.0 * p.h);
            // Pe_k = Re(E_k conj(I_k)); dE_l/dδ_l = j E_l
            for l in 0..nm {
                let di = st.k[(k, l)] * J * e[l];
                let mut dpe = (e[k] * di.conj()).re;
                if l == k {
                    dpe += (J * e[k] * im[k].conj()).re;
                }
                rhs_in[(row, 2 * l)] = scale * dpe;
            }
            for t in 0..it.len() {
                let b = st.b[(k, t)];
                rhs_ex[(row, 2 * t)] = scale * (e[k] * b.conj()).re;
                rhs_ex[(row, 2 * t + 1)] = scale * (e[k] * (J * b).conj()).re;
            }
        }

        let mut feat_in = DMatrix::zeros(n_s, n_in);
        let mut feat_ex = DMatrix::zeros(n_s, n_ex);
        let mut r = 0;
        if self.layout.features.relative_angles {
            for k in 0..nm {
                for l in 0..nm {
                    feat_in[(r, 2 * l)] = (k == l) as u8 as f64 - self.layout.coi_weights[l];
                }
                r += 1;
            }
        }
        if self.layout.features.speeds {
            for k in 0..nm {
                feat_in[(r, 2 * k + 1)] = 1.0;
                r += 1;
            }
        }
        for l in 0..self.layout.n_lines() {
            for c in 0..nm {
                let d = st.line_e[(l, c)] * J * e[c];
                feat_in[(r, 2 * c)] = d.re;
                feat_in[(r + 1, 2 * c)] = d.im;
            }
            for t in 0..it.len() {
                let a = st.line_i[(l, t)];
                let b = a * J;
                feat_ex[(r, 2 * t)] = a.re;
                feat_ex[(r + 1, 2 * t)] = a.im;
                feat_ex[(r, 2 * t + 1)] = b.re;
                feat_ex[(r + 1, 2 * t + 1)] = b.im;
            }
            r += 2;
        }
        InsysJacobian {
            rhs_in,
            rhs_ex,
            feat_in,
            feat_ex,
        }
    }

    /// Machine-to-machine and machine-to-tie couplings of the reduced
    /// internal network whose magnitude exceeds `tol`.
    pub(crate) fn coupling(&self, tol: f64) -> (Vec<Vec<bool>>, Vec<Vec<bool>>) {
        let st = &self.stages[0];
        let nm = self.machines.len();
        let nt = self.layout.ties.len();
        let mm = (0..nm)
            .map(|k| (0..nm).map(|l| k == l || st.k[(k, l)].norm() > tol).collect())
            .collect();
        let mt = (0..nm)
            .map(|k| (0..nt).map(|t| st.b[(k, t)].norm() > tol).collect())
            .collect();
        (mm, mt)
    }
}
