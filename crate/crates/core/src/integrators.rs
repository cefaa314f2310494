//! Fixed-step trapezoidal integration of forward dynamics and of the
//! matching discrete adjoint.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform time grid `t_i = t0 + i h`, `i = 0..=n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t0: f64,
    pub tn: f64,
    pub h: f64,
    pub n: usize,
}

/// Relative slack allowed when snapping a time onto the grid.
const GRID_SNAP: f64 = 1e-9;

impl TimeGrid {
    /// `(tn - t0) / h` must be an integer up to rounding.
    pub fn new(t0: f64, tn: f64, h: f64) -> Result<Self> {
        if !(h > 0.0 && h.is_finite() && tn > t0 && t0.is_finite() && tn.is_finite()) {
            return Err(Error::Config(format!("invalid time grid [{t0}, {tn}] with h = {h}")));
        }
        let steps = (tn - t0) / h;
        let n = steps.round();
        if (steps - n).abs() > GRID_SNAP * n.max(1.0) {
            return Err(Error::Config(format!(
                "horizon {} s is not a whole number of steps of {h} s",
                tn - t0
            )));
        }
        Ok(Self {
            t0,
            tn,
            h,
            n: n as usize,
        })
    }

    pub fn t(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.h
    }

    /// Number of samples, `n + 1`.
    pub fn len(&self) -> usize {
        self.n + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Index of the grid point nearest to `t`; errors outside the grid.
    pub fn nearest_index(&self, t: f64) -> Result<usize> {
        let s = ((t - self.t0) / self.h).round();
        if !(0.0..=self.n as f64).contains(&s) {
            return Err(Error::Config(format!(
                "time {t} s lies outside [{}, {}]",
                self.t0, self.tn
            )));
        }
        Ok(s as usize)
    }

    /// Like [`Self::nearest_index`] but also requires `t` to already sit on
    /// the grid.
    pub fn exact_index(&self, t: f64) -> Result<usize> {
        let i = self.nearest_index(t)?;
        if (self.t(i) - t).abs() > GRID_SNAP * self.h.max(t.abs()) + 1e-12 {
            return Err(Error::Config(format!("time {t} s is not on the grid")));
        }
        Ok(i)
    }

    /// Same grid, different horizon.
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.n);
        Self {
            t0: self.t0,
            tn: self.t(n),
            h: self.h,
            n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrapezoidalOptions {
    /// Max-norm tolerance on the corrector update.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for TrapezoidalOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 50,
        }
    }
}

fn max_norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn all_finite(x: &[f64]) -> bool {
    x.iter().all(|v| v.is_finite())
}

/// One step of `x' = x_i + h/2 (f(x_i, t_i) + f(x', t_i + h))`.
///
/// Predictor `x_i + h f(x_i, t_i)`, then damped fixed-point corrector. The
/// relaxation factor halves whenever the residual grows.
pub fn trapezoidal_step<F>(
    mut f: F,
    x: &[f64],
    t: f64,
    h: f64,
    opts: &TrapezoidalOptions,
) -> Result<Vec<f64>>
where
    F: FnMut(&[f64], f64, &mut [f64]),
{
    let n = x.len();
    let mut f0 = vec![0.0; n];
    f(x, t, &mut f0);
    trapezoidal_step_from(&mut f, x, &f0, t, h, opts)
}

/// [`trapezoidal_step`] with `f(x_i, t_i)` already evaluated.
pub fn trapezoidal_step_from<F>(
    f: &mut F,
    x: &[f64],
    f0: &[f64],
    t: f64,
    h: f64,
    opts: &TrapezoidalOptions,
) -> Result<Vec<f64>>
where
    F: FnMut(&[f64], f64, &mut [f64]),
{
    let n = x.len();
    if !all_finite(f0) || !all_finite(x) {
        return Err(Error::Divergence { t });
    }
    let t1 = t + h;
    let base: Vec<f64> = x.iter().zip(f0).map(|(xi, fi)| xi + 0.5 * h * fi).collect();
    let mut cur: Vec<f64> = x.iter().zip(f0).map(|(xi, fi)| xi + h * fi).collect();
    let mut fx = vec![0.0; n];
    let mut next = vec![0.0; n];
    let mut beta = 1.0;
    let mut last = f64::INFINITY;
    for _ in 0..opts.max_iter {
        f(&cur, t1, &mut fx);
        for k in 0..n {
            next[k] = base[k] + 0.5 * h * fx[k];
        }
        if !all_finite(&next) {
            return Err(Error::Divergence { t: t1 });
        }
        let r = max_norm_diff(&next, &cur);
        if r <= opts.tol {
            return Ok(next);
        }
        if r > last {
            beta *= 0.5;
        }
        last = r;
        for k in 0..n {
            cur[k] += beta * (next[k] - cur[k]);
        }
    }
    Err(Error::NonConvergence {
        t: t1,
        residual: last,
    })
}

/// States at every grid point, stored row by row.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub grid: TimeGrid,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl Trajectory {
    pub fn state(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn last(&self) -> &[f64] {
        self.state(self.len() - 1)
    }

    /// Time series of component `k`.
    pub fn component(&self, k: usize) -> Vec<f64> {
        (0..self.len()).map(|i| self.state(i)[k]).collect()
    }
}

/// Segment of the step starting at grid index `i`: the number of events at
/// or before `i`. Events are grid indices in increasing order.
pub fn segment_of(events: &[usize], i: usize) -> usize {
    events.iter().take_while(|&&e| e <= i).count()
}

/// Integrates over `grid`, switching the right-hand side at event indices.
///
/// `f(segment, x, t, out)` is called with the segment of the step being
/// taken, so a step starting exactly at an event already uses the new
/// dynamics.
pub fn integrate<F>(
    mut f: F,
    x0: &[f64],
    grid: &TimeGrid,
    events: &[usize],
    opts: &TrapezoidalOptions,
) -> Result<Trajectory>
where
    F: FnMut(usize, &[f64], f64, &mut [f64]),
{
    if events.windows(2).any(|w| w[0] > w[1]) || events.iter().any(|&e| e > grid.n) {
        return Err(Error::Config("events must be sorted grid indices".into()));
    }
    let dim = x0.len();
    let mut data = Vec::with_capacity(dim * grid.len());
    data.extend_from_slice(x0);
    let mut x = x0.to_vec();
    for i in 0..grid.n {
        let seg = segment_of(events, i);
        let mut rhs = |z: &[f64], t: f64, out: &mut [f64]| f(seg, z, t, out);
        x = trapezoidal_step(&mut rhs, &x, grid.t(i), grid.h, opts).map_err(|e| e.at_step(i))?;
        data.extend_from_slice(&x);
    }
    Ok(Trajectory {
        grid: *grid,
        dim,
        data,
    })
}

/// Adjoint vectors and the running parameter-gradient accumulator.
///
/// The state is ordered `[x_in; x_ex]`, so `mu` pairs with the first block
/// and `lambda` with the second.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointState {
    pub mu: Vec<f64>,
    pub lambda: Vec<f64>,
    pub grad: Vec<f64>,
}

impl AdjointState {
    pub fn zeros(n_in: usize, n_ex: usize, n_params: usize) -> Self {
        Self {
            mu: vec![0.0; n_in],
            lambda: vec![0.0; n_ex],
            grad: vec![0.0; n_params],
        }
    }

    /// `[mu; lambda]`.
    pub fn stacked(&self) -> Vec<f64> {
        let mut v = self.mu.clone();
        v.extend_from_slice(&self.lambda);
        v
    }

    pub fn set_stacked(&mut self, v: &[f64]) {
        let n = self.mu.len();
        self.mu.copy_from_slice(&v[..n]);
        self.lambda.copy_from_slice(&v[n..]);
    }

    /// Adds a sample's loss gradient (the jump at an observation time).
    pub fn jump(&mut self, d_in: &[f64], d_ex: &[f64]) {
        for (m, d) in self.mu.iter_mut().zip(d_in) {
            *m += d;
        }
        for (l, d) in self.lambda.iter_mut().zip(d_ex) {
            *l += d;
        }
    }

    pub fn is_finite(&self) -> bool {
        all_finite(&self.mu) && all_finite(&self.lambda) && all_finite(&self.grad)
    }
}

/// Linearization of a stored forward trajectory.
///
/// `step` is the index `i` of the step `t_{i-1} -> t_i`; `point` is the grid
/// index at which to linearize, `i - 1` or `i`. Both are passed because the
/// right-hand side of a step is fixed by the step, not by the point.
pub trait AdjointDynamics {
    fn state_dim(&self) -> usize;
    fn n_params(&self) -> usize;
    /// `∂F/∂z` at the given point.
    fn state_jacobian(&self, step: usize, point: usize) -> DMatrix<f64>;
    /// Adds `(∂F/∂θ)ᵀ w` at the given point into `out`.
    fn add_param_vjp(&self, step: usize, point: usize, w: &[f64], out: &mut [f64]);
}

/// Carries the adjoint across the step `t_{i-1} -> t_i` backwards.
///
/// Uses the exact transpose of the trapezoidal step, so the result is the
/// gradient of the discrete forward map. The accumulator integrates
/// `dg/dt = λᵀ ∂N/∂θ` backwards, so it decreases by the quadrature of the
/// integrand over the step.
pub fn integrate_adjoint_segment<D: AdjointDynamics + ?Sized>(
    dynamics: &D,
    terminal: &AdjointState,
    step: usize,
    h: f64,
) -> Result<AdjointState> {
    let n = dynamics.state_dim();
    let w = DVector::from_vec(terminal.stacked());
    let j_end = dynamics.state_jacobian(step, step);
    let lhs = DMatrix::identity(n, n) - j_end.transpose() * (0.5 * h);
    let p = lhs
        .lu()
        .solve(&w)
        .ok_or(Error::AdjointDivergence { index: step })?;
    let j_start = dynamics.state_jacobian(step, step - 1);
    let v = &p + j_start.transpose() * &p * (0.5 * h);

    let mut out = terminal.clone();
    out.set_stacked(v.as_slice());
    let mut g = vec![0.0; dynamics.n_params()];
    dynamics.add_param_vjp(step, step - 1, p.as_slice(), &mut g);
    dynamics.add_param_vjp(step, step, p.as_slice(), &mut g);
    for (acc, gi) in out.grad.iter_mut().zip(&g) {
        *acc -= 0.5 * h * gi;
    }
    if !out.is_finite() {
        return Err(Error::AdjointDivergence { index: step - 1 });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn opts() -> TrapezoidalOptions {
        TrapezoidalOptions {
            tol: 1e-13,
            max_iter: 200,
        }
    }

    #[test]
    fn zero_dynamics_is_identity() {
        let x = [1.0, -2.0, 3.5];
        let y = trapezoidal_step(|_, _, o: &mut [f64]| o.fill(0.0), &x, 0.0, 0.1, &opts()).unwrap();
        assert_eq!(y, x.to_vec());
    }

    #[test]
    fn scalar_linear_step_matches_amplification_factor() {
        let (a, h) = (-3.0, 0.01);
        let y = trapezoidal_step(|x, _, o: &mut [f64]| o[0] = a * x[0], &[2.0], 0.0, h, &opts()).unwrap();
        let expected = 2.0 * (1.0 + a * h / 2.0) / (1.0 - a * h / 2.0);
        assert_relative_eq!(y[0], expected, max_relative = 1e-12);
    }

    #[test]
    fn harmonic_oscillator_error_quarters_when_h_halves() {
        let period = 2.0 * std::f64::consts::PI;
        let err = |h: f64| {
            let grid = TimeGrid::new(0.0, period, period / (period / h).round()).unwrap();
            let traj = integrate(
                |_, x, _, o| {
                    o[0] = x[1];
                    o[1] = -x[0];
                },
                &[1.0, 0.0],
                &grid,
                &[],
                &opts(),
            )
            .unwrap();
            let end = traj.last();
            ((end[0] - 1.0).powi(2) + end[1].powi(2)).sqrt()
        };
        let ratio = err(0.02) / err(0.01);
        assert!((3.5..=4.5).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn event_switches_dynamics_at_its_index() {
        let grid = TimeGrid::new(0.0, 0.2, 1e-3).unwrap();
        let ev = grid.exact_index(0.1).unwrap();
        let traj = integrate(
            |seg, _, _, o| o[0] = if seg == 0 { 1.0 } else { -1.0 },
            &[0.0],
            &grid,
            &[ev],
            &opts(),
        )
        .unwrap();
        let x = traj.component(0);
        let peak = (0..x.len()).max_by(|&a, &b| x[a].total_cmp(&x[b])).unwrap();
        assert_eq!(peak, 100);
        assert_relative_eq!(x[100], 0.1, epsilon = 1e-12);
    }

    #[test]
    fn grid_rejects_fractional_step_count() {
        assert!(TimeGrid::new(0.0, 1.0, 0.3).is_err());
        assert_eq!(TimeGrid::new(0.0, 10.0, 1e-3).unwrap().n, 10_000);
    }

    #[test]
    fn divergence_is_reported() {
        let r = trapezoidal_step(|x, _, o: &mut [f64]| o[0] = x[0].exp(), &[800.0], 0.0, 0.1, &opts());
        assert!(matches!(r, Err(Error::Divergence { .. })));
    }

    #[test]
    fn cap_exceeded_is_nonconvergence() {
        let o = TrapezoidalOptions { tol: 1e-10, max_iter: 3 };
        let r = trapezoidal_step(|x, _, out: &mut [f64]| out[0] = -50.0 * x[0], &[1.0], 0.0, 0.1, &o);
        assert!(matches!(r, Err(Error::NonConvergence { .. })));
    }

    struct Linear {
        a: f64,
        c: f64,
    }

    impl AdjointDynamics for Linear {
        fn state_dim(&self) -> usize {
            1
        }
        fn n_params(&self) -> usize {
            1
        }
        fn state_jacobian(&self, _: usize, _: usize) -> DMatrix<f64> {
            DMatrix::from_element(1, 1, self.a)
        }
        fn add_param_vjp(&self, _: usize, _: usize, w: &[f64], out: &mut [f64]) {
            out[0] += self.c * w[0];
        }
    }

    #[test]
    fn zero_adjoint_dynamics_leaves_state_unchanged() {
        let sys = Linear { a: 0.0, c: 0.0 };
        let s = AdjointState {
            mu: vec![1.5],
            lambda: vec![],
            grad: vec![0.25],
        };
        assert_eq!(integrate_adjoint_segment(&sys, &s, 1, 0.01).unwrap(), s);
    }

    #[test]
    fn scalar_adjoint_matches_closed_form() {
        // dλ/dt = -a λ backwards over one step of the trapezoidal transpose
        let (a, h) = (-2.0, 1e-3);
        let sys = Linear { a, c: 0.0 };
        let mut s = AdjointState {
            mu: vec![1.0],
            lambda: vec![],
            grad: vec![0.0],
        };
        for step in (1..=1000).rev() {
            s = integrate_adjoint_segment(&sys, &s, step, h).unwrap();
        }
        assert_relative_eq!(s.mu[0], (a * 1.0f64).exp(), max_relative = 1e-6);
        let amp = (1.0 + a * h / 2.0) / (1.0 - a * h / 2.0);
        assert_relative_eq!(s.mu[0], amp.powi(1000), max_relative = 1e-12);
    }

    #[test]
    fn constant_integrand_accumulates_linearly() {
        let sys = Linear { a: 0.0, c: 3.0 };
        let h = 0.01;
        let mut s = AdjointState {
            mu: vec![2.0],
            lambda: vec![],
            grad: vec![0.0],
        };
        for step in (1..=50).rev() {
            s = integrate_adjoint_segment(&sys, &s, step, h).unwrap();
        }
        assert_relative_eq!(s.grad[0], -h * 50.0 * 6.0, max_relative = 1e-12);
    }
}
