//! Parameterized building blocks.
//!
//! Layers only hold [`ParamId`]s; values live in a [`ParamStore`] so that a
//! single store can be shared read-only by several graphs.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// A parameterized function with a fixed parameter set.
pub trait Module {
    fn params(&self) -> Vec<ParamId>;
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("sized")
}

/// Square orthogonal matrix from Gram-Schmidt on a Gaussian draw.
pub fn orthogonal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    while rows.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        for r in &rows {
            let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|a| *a /= norm);
            rows.push(v);
        }
    }
    rows.concat()
}

/// Affine map `x W + b` on `[batch, in]` inputs.
#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl Dense {
    pub fn new(store: &mut ParamStore, name: &str, input_dim: usize, output_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (input_dim as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform(rng, &[input_dim, output_dim], bound));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[output_dim]));
        Self { weight, bias, input_dim, output_dim }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }
}

impl Module for Dense {
    fn params(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

/// Gated recurrent unit with reset/update/candidate gates (in that order
/// along the `3 * units` axis) and a zero initial state:
///
/// ```text
/// r = σ(x Wxr + bxr + h Whr + bhr)
/// z = σ(x Wxz + bxz + h Whz + bhz)
/// n = tanh(x Wxn + bxn + r ⊙ (h Whn + bhn))
/// h' = (1 - z) ⊙ n + z ⊙ h
/// ```
#[derive(Debug, Clone)]
pub struct Gru {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub b_input: ParamId,
    pub b_hidden: ParamId,
    pub input_dim: usize,
    pub units: usize,
}

impl Gru {
    pub fn new(store: &mut ParamStore, name: &str, input_dim: usize, units: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (input_dim as f64).sqrt();
        let w_input = store.add(format!("{name}.w_input"), uniform(rng, &[input_dim, 3 * units], bound));
        // one orthogonal block per gate, laid side by side
        let blocks: Vec<Vec<f64>> = (0..3).map(|_| orthogonal(rng, units)).collect();
        let mut wh = vec![0.0; units * 3 * units];
        for (gate, block) in blocks.iter().enumerate() {
            for i in 0..units {
                for j in 0..units {
                    wh[i * 3 * units + gate * units + j] = block[i * units + j];
                }
            }
        }
        let w_hidden = store.add(format!("{name}.w_hidden"), Tensor::new(&[units, 3 * units], wh).expect("sized"));
        let b_input = store.add(format!("{name}.b_input"), Tensor::zeros(&[3 * units]));
        let b_hidden = store.add(format!("{name}.b_hidden"), Tensor::zeros(&[3 * units]));
        Self { w_input, w_hidden, b_input, b_hidden, input_dim, units }
    }

    fn step(&self, g: &mut Graph, wh: Var, bh: Var, gi: Var, h: Var) -> Result<Var> {
        let u = self.units;
        let gh = g.matmul(h, wh)?;
        let gh = g.add_bias(gh, bh)?;
        let (gi_r, gh_r) = (g.slice(gi, 1, 0, u)?, g.slice(gh, 1, 0, u)?);
        let (gi_z, gh_z) = (g.slice(gi, 1, u, u)?, g.slice(gh, 1, u, u)?);
        let (gi_n, gh_n) = (g.slice(gi, 1, 2 * u, u)?, g.slice(gh, 1, 2 * u, u)?);
        let r = g.add(gi_r, gh_r)?;
        let r = g.sigmoid(r);
        let z = g.add(gi_z, gh_z)?;
        let z = g.sigmoid(z);
        let rn = g.mul(r, gh_n)?;
        let n = g.add(gi_n, rn)?;
        let n = g.tanh(n);
        let diff = g.sub(h, n)?;
        let zd = g.mul(z, diff)?;
        g.add(n, zd)
    }

    /// One recurrence step from state `h` (`[batch, units]`) on input `x`
    /// (`[batch, input_dim]`).
    pub fn cell(&self, g: &mut Graph, store: &ParamStore, x: Var, h: Var) -> Result<Var> {
        let wx = g.param(store, self.w_input);
        let wh = g.param(store, self.w_hidden);
        let bx = g.param(store, self.b_input);
        let bh = g.param(store, self.b_hidden);
        let gi = g.matmul(x, wx)?;
        let gi = g.add_bias(gi, bx)?;
        self.step(g, wh, bh, gi, h)
    }

    /// Runs over `xs`, one `[batch, input_dim]` tensor per time step.
    pub fn forward_steps(&self, g: &mut Graph, store: &ParamStore, xs: &[Var]) -> Result<Vec<Var>> {
        let wx = g.param(store, self.w_input);
        let wh = g.param(store, self.w_hidden);
        let bx = g.param(store, self.b_input);
        let bh = g.param(store, self.b_hidden);
        let mut outputs = Vec::with_capacity(xs.len());
        let Some(&first) = xs.first() else { return Ok(outputs) };
        let batch = g.shape(first)[0];
        let mut h = g.constant(Tensor::zeros(&[batch, self.units]));
        for &x in xs {
            let gi = g.matmul(x, wx)?;
            let gi = g.add_bias(gi, bx)?;
            h = self.step(g, wh, bh, gi, h)?;
            outputs.push(h);
        }
        Ok(outputs)
    }

    /// Runs over a `[T, input_dim]` sequence, returning `[T, units]`.
    pub fn forward_seq(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let wx = g.param(store, self.w_input);
        let wh = g.param(store, self.w_hidden);
        let bx = g.param(store, self.b_input);
        let bh = g.param(store, self.b_hidden);
        let steps = g.shape(x)[0];
        let gi_all = g.matmul(x, wx)?;
        let gi_all = g.add_bias(gi_all, bx)?;
        let mut h = g.constant(Tensor::zeros(&[1, self.units]));
        let mut outputs = Vec::with_capacity(steps);
        for t in 0..steps {
            let gi = g.slice(gi_all, 0, t, 1)?;
            h = self.step(g, wh, bh, gi, h)?;
            outputs.push(h);
        }
        g.concat(&outputs, 0)
    }
}

impl Module for Gru {
    fn params(&self) -> Vec<ParamId> {
        vec![self.w_input, self.w_hidden, self.b_input, self.b_hidden]
    }
}

/// Forward and time-reversed GRUs with concatenated outputs.
#[derive(Debug, Clone)]
pub struct BiGru {
    pub forward: Gru,
    pub backward: Gru,
}

impl BiGru {
    pub fn new(store: &mut ParamStore, name: &str, input_dim: usize, units: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            forward: Gru::new(store, &format!("{name}.fwd"), input_dim, units, rng),
            backward: Gru::new(store, &format!("{name}.bwd"), input_dim, units, rng),
        }
    }

    /// `[T, F]` to `[T, 2 * units]`.
    pub fn forward_seq(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let fwd = self.forward.forward_seq(g, store, x)?;
        let rev = g.flip(x, 0)?;
        let bwd = self.backward.forward_seq(g, store, rev)?;
        let bwd = g.flip(bwd, 0)?;
        g.concat(&[fwd, bwd], 1)
    }
}

impl Module for BiGru {
    fn params(&self) -> Vec<ParamId> {
        let mut p = self.forward.params();
        p.extend(self.backward.params());
        p
    }
}

/// Single-head scaled dot-product self-attention with learned projections.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub w_query: ParamId,
    pub w_key: ParamId,
    pub w_value: ParamId,
    pub dim: usize,
}

impl SelfAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        let w_query = store.add(format!("{name}.w_query"), uniform(rng, &[dim, dim], bound));
        let w_key = store.add(format!("{name}.w_key"), uniform(rng, &[dim, dim], bound));
        let w_value = store.add(format!("{name}.w_value"), uniform(rng, &[dim, dim], bound));
        Self { w_query, w_key, w_value, dim }
    }

    /// `[T, dim]` to `[T, dim]`; also returns the `[T, T]` attention weights.
    pub fn forward_seq(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<(Var, Var)> {
        let wq = g.param(store, self.w_query);
        let wk = g.param(store, self.w_key);
        let wv = g.param(store, self.w_value);
        let q = g.matmul(x, wq)?;
        let k = g.matmul(x, wk)?;
        let v = g.matmul(x, wv)?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / (self.dim as f64).sqrt());
        let weights = g.softmax(scores, 1)?;
        Ok((g.matmul(weights, v)?, weights))
    }

    /// Batched form over time steps given as `[batch, dim]` tensors. Returns
    /// the outputs per step and the `[batch, T]` weights of each query step.
    pub fn forward_steps(&self, g: &mut Graph, store: &ParamStore, xs: &[Var]) -> Result<(Vec<Var>, Vec<Var>)> {
        let wq = g.param(store, self.w_query);
        let wk = g.param(store, self.w_key);
        let wv = g.param(store, self.w_value);
        let mut qs = Vec::with_capacity(xs.len());
        let mut ks = Vec::with_capacity(xs.len());
        let mut vs = Vec::with_capacity(xs.len());
        for &x in xs {
            qs.push(g.matmul(x, wq)?);
            ks.push(g.matmul(x, wk)?);
            vs.push(g.matmul(x, wv)?);
        }
        let scale = 1.0 / (self.dim as f64).sqrt();
        let mut outputs = Vec::with_capacity(xs.len());
        let mut all_weights = Vec::with_capacity(xs.len());
        for &q in &qs {
            let mut cols = Vec::with_capacity(ks.len());
            for &k in &ks {
                let prod = g.mul(q, k)?;
                let dot = g.sum_axis(prod, 1)?;
                let batch = g.shape(dot)[0];
                cols.push(g.reshape(dot, &[batch, 1])?);
            }
            let scores = g.concat(&cols, 1)?;
            let scores = g.scale(scores, scale);
            let weights = g.softmax(scores, 1)?;
            let mut acc: Option<Var> = None;
            for (u, &v) in vs.iter().enumerate() {
                let w = g.slice(weights, 1, u, 1)?;
                let term = g.mul_col(v, w)?;
                acc = Some(match acc {
                    Some(a) => g.add(a, term)?,
                    None => term,
                });
            }
            outputs.push(acc.expect("at least one step"));
            all_weights.push(weights);
        }
        Ok((outputs, all_weights))
    }
}

impl Module for SelfAttention {
    fn params(&self) -> Vec<ParamId> {
        vec![self.w_query, self.w_key, self.w_value]
    }
}

/// Same-padded convolution on `[C, H, W]` inputs.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub filters: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        filters: usize,
        kernel: (usize, usize),
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = in_channels * kernel.0 * kernel.1;
        // He-uniform: the conv stack is followed by ReLU
        let bound = (6.0 / fan_in as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            uniform(rng, &[filters, in_channels, kernel.0, kernel.1], bound),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[filters]));
        Self { weight, bias, in_channels, filters }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d(x, w, b)
    }
}

impl Module for Conv2d {
    fn params(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

/// Convolution, ReLU and non-overlapping max pooling.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub pool: (usize, usize),
}

impl ConvBlock {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, store, x)?;
        let y = g.relu(y);
        g.max_pool2d(y, self.pool.0, self.pool.1)
    }
}

impl Module for ConvBlock {
    fn params(&self) -> Vec<ParamId> {
        self.conv.params()
    }
}
