//! Data-driven estimate of the internal Jacobian from the trapezoidal
//! identity, for use in place of the analytic one.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::data::TrainingSet;
use crate::error::{Error, Result};
use crate::grid::{FaultStage, InternalSystem};
use crate::integrators::segment_of;

/// Floor added to the diagonal of every Gram matrix.
pub const RIDGE: f64 = 1e-10;
/// Rows whose Gram condition number exceeds this are reported.
pub const ILL_CONDITIONED: f64 = 1e12;

/// Estimate of `[∂P̃/∂x_ex, ∂P̃/∂x_in]` (`n_in` rows, `n_ex + n_in` columns,
/// stored row-major) with its sparsity mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JacobianEstimate {
    pub rows: usize,
    pub cols: usize,
    #[serde(rename = "A")]
    pub a: Vec<f64>,
    pub mask: Vec<bool>,
    pub condition_numbers: Vec<f64>,
    pub samples: usize,
}

impl JacobianEstimate {
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.a[r * self.cols + c]
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.a)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let est: Self = serde_json::from_str(s)?;
        if est.a.len() != est.rows * est.cols || est.mask.len() != est.a.len() {
            return Err(Error::Data("jacobian estimate has inconsistent sizes".into()));
        }
        Ok(est)
    }
}

/// Mask admitting, for both rows of an internal machine, its own states,
/// the states of machines it couples to in the reduced internal network and
/// the tie-lines feeding its node. Columns are `[x_ex; x_in]`.
pub fn connectivity_mask(insys: &InternalSystem, tol: f64) -> Vec<bool> {
    let (n_in, n_ex) = (insys.n_in(), insys.n_ex());
    let cols = n_ex + n_in;
    let (mm, mt) = insys.coupling(tol);
    let mut mask = vec![false; n_in * cols];
    for r in 0..n_in {
        let a = r / 2;
        for (t, &on) in mt[a].iter().enumerate() {
            mask[r * cols + 2 * t] = on;
            mask[r * cols + 2 * t + 1] = on;
        }
        for (b, &on) in mm[a].iter().enumerate() {
            mask[r * cols + n_ex + 2 * b] = on;
            mask[r * cols + n_ex + 2 * b + 1] = on;
        }
    }
    mask
}

/// Full mask of the given shape.
pub fn full_mask(n_in: usize, n_ex: usize) -> Vec<bool> {
    vec![true; n_in * (n_ex + n_in)]
}

/// Row-wise least squares of `(2/h) Δx̂_in,k = A_k (x̂_i + x̂_{i-1} - 2x̂⁰)`
/// over every step whose network equals the pre-fault one and that does not
/// end at an event.
///
/// `x̂⁰` is each scenario's pre-fault equilibrium, where the internal
/// dynamics vanish. The mask must include every row's self entry.
pub fn pg_estimate_jacobian(data: &TrainingSet, mask: &[bool]) -> Result<JacobianEstimate> {
    data.validate()?;
    let (n_in, n_ex) = (data.n_in(), data.n_ex());
    let cols = n_ex + n_in;
    if mask.len() != n_in * cols {
        return Err(Error::Structural(format!(
            "mask must have {n_in} x {cols} entries"
        )));
    }
    for r in 0..n_in {
        if !mask[r * cols + n_ex + r] {
            return Err(Error::Structural(format!("mask row {r} lacks its self entry")));
        }
    }
    let active: Vec<Vec<usize>> = (0..n_in)
        .map(|r| (0..cols).filter(|&c| mask[r * cols + c]).collect())
        .collect();
    let mut grams: Vec<DMatrix<f64>> = active.iter().map(|a| DMatrix::zeros(a.len(), a.len())).collect();
    let mut rhs: Vec<DVector<f64>> = active.iter().map(|a| DVector::zeros(a.len())).collect();
    let mut samples = 0usize;
    let mut reg = vec![0.0; cols];
    for sc in &data.scenarios {
        let h = sc.grid.h;
        let stages = sc.scenario.segment_stages();
        let x0 = &sc.equilibrium;
        for i in 1..sc.len() {
            // right-limit samples at events do not belong to the step ending there
            if sc.events.contains(&i) || matches!(stages[segment_of(&sc.events, i - 1)], FaultStage::DuringFault(_)) {
                continue;
            }
            let (xe1, xe0) = (sc.x_ex(i), sc.x_ex(i - 1));
            let (xi1, xi0) = (sc.x_in(i), sc.x_in(i - 1));
            for c in 0..n_ex {
                reg[c] = xe1[c] + xe0[c] - 2.0 * x0[c];
            }
            for c in 0..n_in {
                reg[n_ex + c] = xi1[c] + xi0[c] - 2.0 * x0[n_ex + c];
            }
            for r in 0..n_in {
                let target = 2.0 / h * (xi1[r] - xi0[r]);
                let a = &active[r];
                let g = &mut grams[r];
                for (p, &cp) in a.iter().enumerate() {
                    rhs[r][p] += reg[cp] * target;
                    for (q, &cq) in a.iter().enumerate().skip(p) {
                        g[(p, q)] += reg[cp] * reg[cq];
                    }
                }
            }
            samples += 1;
        }
    }
    if samples == 0 {
        return Err(Error::Data("no regression samples outside fault periods".into()));
    }

    let mut a = vec![0.0; n_in * cols];
    let mut condition_numbers = Vec::with_capacity(n_in);
    for r in 0..n_in {
        let mut g = grams[r].clone();
        let m = g.nrows();
        for p in 0..m {
            for q in 0..p {
                g[(p, q)] = g[(q, p)];
            }
            g[(p, p)] += RIDGE;
        }
        let eig = g.clone().symmetric_eigen();
        let max = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
        let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        let cond = if min > 0.0 { max / min } else { f64::INFINITY };
        if cond > ILL_CONDITIONED {
            log::warn!("jacobian row {r}: ill-conditioned regression (condition number {cond:e})");
        }
        condition_numbers.push(cond);
        let sol = g
            .cholesky()
            .map(|c| c.solve(&rhs[r]))
            .ok_or_else(|| Error::Data(format!("jacobian row {r}: Gram matrix is not positive definite")))?;
        for (p, &c) in active[r].iter().enumerate() {
            a[r * cols + c] = sol[p];
        }
    }
    Ok(JacobianEstimate {
        rows: n_in,
        cols,
        a,
        mask: mask.to_vec(),
        condition_numbers,
        samples,
    })
}
