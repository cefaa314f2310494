//! Flat-start Newton power flow and classical-machine initialization.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use super::admittance::{build_admittance, FaultStage};
use super::network::NetworkModel;
use crate::error::{Error, Result};

pub const POWER_FLOW_TOL: f64 = 1e-10;
const MAX_ITERATIONS: usize = 30;

/// Pre-fault equilibrium of one machine.
#[derive(Debug, Clone, Copy)]
pub struct MachineInit {
    /// Internal EMF magnitude (p.u.).
    pub e: f64,
    /// Rotor angle (rad, synchronous frame).
    pub delta: f64,
    /// Mechanical power (p.u.), equal to the electrical output at equilibrium.
    pub pm: f64,
}

/// Power-flow solution with loads modelled as constant impedances.
#[derive(Debug, Clone)]
pub struct OperatingPoint {
    pub alpha: f64,
    pub voltages: Vec<Complex64>,
    pub machines: Vec<MachineInit>,
    pub iterations: usize,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum BusType {
    Slack,
    Pv,
    Pq,
}

/// Solves the power flow of the intact network with internal loads scaled by
/// `alpha`, then places each machine's EMF behind x'd.
pub fn solve_operating_point(net: &NetworkModel, alpha: f64) -> Result<OperatingPoint> {
    let y = build_admittance(net, FaultStage::PreFault, alpha)?;
    let n = net.buses.len();

    let mut kind = vec![BusType::Pq; n];
    let mut p_spec = vec![0.0; n];
    let mut vm = vec![1.0; n];
    let mut va = vec![0.0; n];
    for m in &net.machines {
        let i = net.bus_index(m.bus)?;
        kind[i] = if m.slack { BusType::Slack } else { BusType::Pv };
        vm[i] = m.v_set;
        p_spec[i] = m.p_set;
    }

    let pvpq: Vec<usize> = (0..n).filter(|&i| kind[i] != BusType::Slack).collect();
    let pq: Vec<usize> = (0..n).filter(|&i| kind[i] == BusType::Pq).collect();
    let dim = pvpq.len() + pq.len();

    let mut iterations = 0;
    loop {
        let v: Vec<Complex64> = (0..n).map(|i| Complex64::from_polar(vm[i], va[i])).collect();
        let vv = DVector::from_vec(v.clone());
        let ibus = &y * &vv;
        let s: Vec<Complex64> = (0..n).map(|i| v[i] * ibus[i].conj()).collect();

        let mut f = DVector::zeros(dim);
        for (r, &i) in pvpq.iter().enumerate() {
            f[r] = s[i].re - p_spec[i];
        }
        for (r, &i) in pq.iter().enumerate() {
            f[pvpq.len() + r] = s[i].im;
        }
        let mismatch = f.amax();
        if mismatch <= POWER_FLOW_TOL {
            break;
        }
        if iterations == MAX_ITERATIONS || !mismatch.is_finite() {
            return Err(Error::PowerFlow {
                iterations,
                mismatch,
            });
        }

        // dS/dVa = j diag(V) conj(diag(I) - Y diag(V))
        // dS/dVm = diag(V) conj(Y diag(V/|V|)) + conj(diag(I)) diag(V/|V|)
        let ds_dva = |i: usize, k: usize| {
            let mut t = -y[(i, k)] * v[k];
            if i == k {
                t += ibus[i];
            }
            Complex64::new(0.0, 1.0) * v[i] * t.conj()
        };
        let ds_dvm = |i: usize, k: usize| {
            let unit = v[k] / vm[k];
            let mut t = v[i] * (y[(i, k)] * unit).conj();
            if i == k {
                t += ibus[i].conj() * unit;
            }
            t
        };
        let mut jac = DMatrix::zeros(dim, dim);
        for (r, &i) in pvpq.iter().enumerate() {
            for (c, &k) in pvpq.iter().enumerate() {
                jac[(r, c)] = ds_dva(i, k).re;
            }
            for (c, &k) in pq.iter().enumerate() {
                jac[(r, pvpq.len() + c)] = ds_dvm(i, k).re;
            }
        }
        for (r, &i) in pq.iter().enumerate() {
            for (c, &k) in pvpq.iter().enumerate() {
                jac[(pvpq.len() + r, c)] = ds_dva(i, k).im;
            }
            for (c, &k) in pq.iter().enumerate() {
                jac[(pvpq.len() + r, pvpq.len() + c)] = ds_dvm(i, k).im;
            }
        }
        let dx = jac.lu().solve(&(-f)).ok_or(Error::PowerFlow {
            iterations,
            mismatch,
        })?;
        for (r, &i) in pvpq.iter().enumerate() {
            va[i] += dx[r];
        }
        for (r, &i) in pq.iter().enumerate() {
            vm[i] += dx[pvpq.len() + r];
        }
        iterations += 1;
    }

    let voltages: Vec<Complex64> = (0..n).map(|i| Complex64::from_polar(vm[i], va[i])).collect();
    let ibus = &y * DVector::from_vec(voltages.clone());
    let machines = net
        .machines
        .iter()
        .map(|m| {
            let i = net.bus_index(m.bus)?;
            let vt = voltages[i];
            let ig = ibus[i];
            let e = vt + Complex64::new(0.0, m.xd_prime) * ig;
            Ok(MachineInit {
                e: e.norm(),
                delta: e.arg(),
                pm: (e * ig.conj()).re,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(OperatingPoint {
        alpha,
        voltages,
        machines,
        iterations,
    })
}
