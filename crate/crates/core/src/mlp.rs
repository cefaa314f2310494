//! Fully-connected network used as the right-hand side of the external
//! neural ODE, with exact input and parameter Jacobians.
//!
//! Parameters are flattened layer by layer: the weight matrix of a layer in
//! row-major order (`out x in`), then its bias.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
}

/// Affine map `u = (v - offset) / scale`, applied per feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub offset: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Normalization {
    pub fn identity(n: usize) -> Self {
        Self {
            offset: vec![0.0; n],
            scale: vec![1.0; n],
        }
    }

    /// Mean and standard deviation of `samples` (rows of width `n`). Features
    /// with spread below `floor` get scale `floor`.
    pub fn fit<'a, I>(n: usize, samples: I, center: bool, floor: f64) -> Self
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mut count = 0usize;
        let mut mean = vec![0.0; n];
        let mut m2 = vec![0.0; n];
        for row in samples {
            count += 1;
            for k in 0..n {
                let d = row[k] - mean[k];
                mean[k] += d / count as f64;
                m2[k] += d * (row[k] - mean[k]);
            }
        }
        let scale = (0..n)
            .map(|k| {
                let var = if count > 0 { m2[k] / count as f64 } else { 0.0 };
                let spread = if center {
                    var.sqrt()
                } else {
                    (var + mean[k] * mean[k]).sqrt()
                };
                spread.max(floor)
            })
            .collect();
        Self {
            offset: if center { mean } else { vec![0.0; n] },
            scale,
        }
    }

    fn check(&self, n: usize, what: &str) -> Result<()> {
        if self.offset.len() != n || self.scale.len() != n {
            return Err(Error::Structural(format!("{what} normalization must have {n} entries")));
        }
        if self.scale.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Structural(format!("{what} normalization scales must be positive")));
        }
        Ok(())
    }
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone, Default)]
pub struct ForwardCache {
    /// Layer inputs; `acts[0]` is the normalized network input and
    /// `acts[l]` the tanh output of hidden layer `l`.
    acts: Vec<Vec<f64>>,
    /// De-normalized network output.
    pub output: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuralOdeModel {
    pub format_version: u32,
    /// Layer widths, input first. The input is `[x_ex; s_in]` and the output
    /// has the width of `x_ex`.
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub theta: Vec<f64>,
    pub input_norm: Normalization,
    pub output_norm: Normalization,
    /// Loss scale of the internal states.
    pub state_scale_in: Vec<f64>,
}

impl NeuralOdeModel {
    /// Glorot-uniform weights, zero biases, identity normalization.
    pub fn new(n_ex: usize, n_features: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        if n_ex == 0 {
            return Err(Error::Structural("surrogate needs at least one output".into()));
        }
        let mut widths = vec![n_ex + n_features];
        widths.extend_from_slice(hidden);
        widths.push(n_ex);
        if widths.contains(&0) {
            return Err(Error::Structural("layer widths must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut theta = Vec::with_capacity(param_count(&widths));
        for l in 0..widths.len() - 1 {
            let (fan_in, fan_out) = (widths[l], widths[l + 1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            theta.extend((0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)));
            theta.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Ok(Self {
            format_version: FORMAT_VERSION,
            input_norm: Normalization::identity(widths[0]),
            output_norm: Normalization::identity(n_ex),
            state_scale_in: Vec::new(),
            widths,
            activation: Activation::Tanh,
            theta,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Structural(format!(
                "unsupported model format version {}",
                self.format_version
            )));
        }
        if self.widths.len() < 2 || self.widths.contains(&0) {
            return Err(Error::Structural("model needs at least two positive widths".into()));
        }
        if self.theta.len() != param_count(&self.widths) {
            return Err(Error::Structural(format!(
                "theta has {} entries, widths need {}",
                self.theta.len(),
                param_count(&self.widths)
            )));
        }
        if self.n_ex() > self.n_inputs() {
            return Err(Error::Structural("output wider than the x_ex input block".into()));
        }
        self.input_norm.check(self.n_inputs(), "input")?;
        self.output_norm.check(self.n_ex(), "output")?;
        if self.state_scale_in.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Structural("state scales must be positive".into()));
        }
        Ok(())
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s)?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn n_params(&self) -> usize {
        self.theta.len()
    }

    pub fn n_inputs(&self) -> usize {
        self.widths[0]
    }

    pub fn n_ex(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn n_features(&self) -> usize {
        self.n_inputs() - self.n_ex()
    }

    /// Loss scale of `x_ex`: the input normalization of that block.
    pub fn state_scale_ex(&self) -> &[f64] {
        &self.input_norm.scale[..self.n_ex()]
    }

    fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    /// Offsets of `(W_l, b_l)` in θ.
    fn layer_offsets(&self, l: usize) -> (usize, usize) {
        let mut off = 0;
        for k in 0..l {
            off += self.widths[k] * self.widths[k + 1] + self.widths[k + 1];
        }
        (off, off + self.widths[l] * self.widths[l + 1])
    }

    fn check_input(&self, x_ex: &[f64], s_in: &[f64]) -> Result<()> {
        if x_ex.len() != self.n_ex() || s_in.len() != self.n_features() {
            return Err(Error::Structural(format!(
                "model expects {} + {} inputs, got {} + {}",
                self.n_ex(),
                self.n_features(),
                x_ex.len(),
                s_in.len()
            )));
        }
        Ok(())
    }

    /// Forward pass keeping the intermediates needed by the Jacobians.
    pub fn forward_cached(&self, x_ex: &[f64], s_in: &[f64]) -> Result<ForwardCache> {
        self.check_input(x_ex, s_in)?;
        let mut cache = ForwardCache::default();
        self.forward_into(x_ex, s_in, &mut cache);
        Ok(cache)
    }

    /// Unchecked forward pass reusing `cache`'s buffers.
    pub(crate) fn forward_into(&self, x_ex: &[f64], s_in: &[f64], cache: &mut ForwardCache) {
        let nl = self.n_layers();
        cache.acts.resize(nl, Vec::new());
        let input = &mut cache.acts[0];
        input.clear();
        let norm = &self.input_norm;
        input.extend(
            x_ex.iter()
                .chain(s_in)
                .enumerate()
                .map(|(k, v)| (v - norm.offset[k]) / norm.scale[k]),
        );
        for l in 0..nl {
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            let (w0, b0) = self.layer_offsets(l);
            let w = &self.theta[w0..b0];
            let b = &self.theta[b0..b0 + n_out];
            let a = &cache.acts[l];
            let mut z: Vec<f64> = (0..n_out)
                .map(|r| {
                    let row = &w[r * n_in..(r + 1) * n_in];
                    b[r] + row.iter().zip(a).map(|(wi, ai)| wi * ai).sum::<f64>()
                })
                .collect();
            if l + 1 < nl {
                z.iter_mut().for_each(|v| *v = v.tanh());
                cache.acts[l + 1] = z;
            } else {
                let out = &self.output_norm;
                cache.output = z
                    .iter()
                    .enumerate()
                    .map(|(k, v)| out.scale[k] * v + out.offset[k])
                    .collect();
            }
        }
    }

    /// `N_θ(x_ex, s_in)` in state-derivative units.
    pub fn forward(&self, x_ex: &[f64], s_in: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(x_ex, s_in)?.output)
    }

    /// Vector-Jacobian product through a cached pass: returns `wᵀ ∂N/∂input`
    /// (in de-normalized input units) and adds `wᵀ ∂N/∂θ` into `grad_theta`
    /// when given.
    pub fn backward(&self, cache: &ForwardCache, w: &[f64], grad_theta: Option<&mut [f64]>) -> Vec<f64> {
        let nl = self.n_layers();
        let mut delta: Vec<f64> = w
            .iter()
            .zip(&self.output_norm.scale)
            .map(|(wi, s)| wi * s)
            .collect();
        let mut grad_theta = grad_theta;
        for l in (0..nl).rev() {
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            let (w0, b0) = self.layer_offsets(l);
            let a = &cache.acts[l];
            if let Some(g) = grad_theta.as_deref_mut() {
                for r in 0..n_out {
                    let d = delta[r];
                    if d != 0.0 {
                        let row = &mut g[w0 + r * n_in..w0 + (r + 1) * n_in];
                        for (gi, ai) in row.iter_mut().zip(a) {
                            *gi += d * ai;
                        }
                    }
                    g[b0 + r] += d;
                }
            }
            let wmat = &self.theta[w0..b0];
            let mut prev = vec![0.0; n_in];
            for r in 0..n_out {
                let d = delta[r];
                if d != 0.0 {
                    for (p, wi) in prev.iter_mut().zip(&wmat[r * n_in..(r + 1) * n_in]) {
                        *p += d * wi;
                    }
                }
            }
            if l > 0 {
                for (p, ai) in prev.iter_mut().zip(a) {
                    *p *= 1.0 - ai * ai;
                }
            }
            delta = prev;
        }
        delta
            .iter()
            .zip(&self.input_norm.scale)
            .map(|(d, s)| d / s)
            .collect()
    }

    /// Jacobian of the output with respect to the full input `[x_ex; s_in]`
    /// from a cached pass (`n_ex x n_inputs`, row-major).
    pub fn input_jacobian_cached(&self, cache: &ForwardCache) -> Vec<f64> {
        let (n_out, n_in) = (self.n_ex(), self.n_inputs());
        let mut jac = Vec::with_capacity(n_out * n_in);
        let mut e = vec![0.0; n_out];
        for r in 0..n_out {
            e.fill(0.0);
            e[r] = 1.0;
            jac.extend(self.backward(cache, &e, None));
        }
        jac
    }

    /// `(∂N/∂x_ex, ∂N/∂s_in)` as row-major blocks.
    pub fn jacobian_input(&self, x_ex: &[f64], s_in: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let cache = self.forward_cached(x_ex, s_in)?;
        let full = self.input_jacobian_cached(&cache);
        let (n_out, n_ex, n_in) = (self.n_ex(), self.n_ex(), self.n_inputs());
        let mut jx = Vec::with_capacity(n_out * n_ex);
        let mut js = Vec::with_capacity(n_out * (n_in - n_ex));
        for r in 0..n_out {
            let row = &full[r * n_in..(r + 1) * n_in];
            jx.extend_from_slice(&row[..n_ex]);
            js.extend_from_slice(&row[n_ex..]);
        }
        Ok((jx, js))
    }

    /// `∂N/∂θ`, `n_ex x n_params` row-major.
    pub fn jacobian_params(&self, x_ex: &[f64], s_in: &[f64]) -> Result<Vec<f64>> {
        let cache = self.forward_cached(x_ex, s_in)?;
        let (n_out, p) = (self.n_ex(), self.n_params());
        let mut jac = vec![0.0; n_out * p];
        let mut e = vec![0.0; n_out];
        for r in 0..n_out {
            e.fill(0.0);
            e[r] = 1.0;
            self.backward(&cache, &e, Some(&mut jac[r * p..(r + 1) * p]));
        }
        Ok(jac)
    }
}

/// `Σ_l (w_l w_{l+1} + w_{l+1})`.
pub fn param_count(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}
