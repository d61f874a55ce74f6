//! Define-by-run computation graph with reverse-mode gradients.
//!
//! Every op is evaluated eagerly when it is recorded; [`Graph::backward`]
//! then walks the tape in reverse. Nodes whose inputs are all constants are
//! never visited during the backward pass.

use crate::error::{AdError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{split_axis, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddBias(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { src: Var, axis: usize, start: usize },
    Transpose(Var),
    Permute { src: Var, axes: Vec<usize> },
    Reshape(Var),
    Flip { src: Var, axis: usize },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Abs(Var),
    Sqrt(Var),
    ClampMin(Var, f64),
    Softmax { src: Var, axis: usize },
    MaxReduce { src: Var, argmax: Vec<usize> },
    SumAxis { src: Var, axis: usize },
    Sum(Var),
    Mean(Var),
    Conv2d { input: Var, weight: Var, bias: Var, cols: Vec<f64>, geom: ConvGeom },
    MaxPool2d { src: Var, argmax: Vec<usize> },
    Bce { pred: Var, target: Var, eps: f64 },
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    channels: usize,
    height: usize,
    width: usize,
    filters: usize,
    kh: usize,
    kw: usize,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single-threaded tape. Build one per forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(Var, ParamId)>,
    grads: Option<Vec<Option<Tensor>>>,
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(AdError::Shape(msg))
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], v: Var, g: Tensor) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    // Row-major strides for A (m x k) and B (k x n), optionally viewed transposed.
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    // SAFETY: slices are sized m*k, k*n and m*n for the strides above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.all_finite(), "non-finite value produced by {:?}", op);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input that receives a gradient, readable with [`Graph::grad`].
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Loads a parameter. Frozen stores yield constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let trainable = !store.is_frozen();
        let v = self.push(store.value(id).clone(), Op::Leaf, trainable);
        if trainable {
            self.params.push((v, id));
        }
        v
    }

    /// Copy of `v` cut off from the tape.
    pub fn stop_gradient(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return shape_err(format!("matmul {:?} x {:?}", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return shape_err(format!("transpose needs 2-d, got {:?}", s));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&[c, r], out)?, Op::Transpose(a), rg))
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return shape_err(format!("{} {:?} vs {:?}", name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "div", |x, y| x / y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Div(a, b), rg))
    }

    /// Adds a vector along the last axis of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let n = *ta.shape().last().unwrap_or(&0);
        if tb.shape() != [n] {
            return shape_err(format!("bias {:?} for input {:?}", tb.shape(), ta.shape()));
        }
        let b = tb.data();
        let data = ta.data().iter().enumerate().map(|(i, &x)| x + b[i % n]).collect();
        let t = Tensor::new(ta.shape(), data)?;
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(t, Op::AddBias(a, bias), rg))
    }

    /// Scales each row of `a` (`[rows, cols]`) by the matching entry of `w` (`[rows, 1]`).
    pub fn mul_col(&mut self, a: Var, w: Var) -> Result<Var> {
        let (ta, tw) = (self.value(a), self.value(w));
        if ta.ndim() != 2 || tw.shape() != [ta.shape()[0], 1] {
            return shape_err(format!("mul_col {:?} by {:?}", ta.shape(), tw.shape()));
        }
        let cols = ta.shape()[1];
        let wd = tw.data();
        let data = ta.data().iter().enumerate().map(|(i, &x)| x * wd[i / cols]).collect();
        let t = Tensor::new(ta.shape(), data)?;
        let rg = self.rg(a) || self.rg(w);
        Ok(self.push(t, Op::MulCol(a, w), rg))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(ta.shape(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(t, op, rg)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.unary(a, Op::Scale(a, factor), |x| x * factor)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    /// Square root; inputs must be strictly positive for a finite gradient.
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        self.unary(a, Op::ClampMin(a, floor), |x| x.max(floor))
    }

    // ---- shape manipulation --------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = match parts.first() {
            Some(&p) => self.shape(p).to_vec(),
            None => return shape_err("concat of nothing".into()),
        };
        if axis >= first.len() {
            return shape_err(format!("concat axis {} for {:?}", axis, first));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return shape_err(format!("concat {:?} with {:?} on axis {}", first, s, axis));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(&shape, out)?, Op::Concat { parts: parts.to_vec(), axis }, rg))
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return shape_err(format!("slice {}..{} on axis {} of {:?}", start, start + len, axis, s));
        }
        let (outer, n, inner) = split_axis(&s, axis);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Slice { src: a, axis, start }, rg))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let mut seen = vec![false; s.len()];
        if axes.len() != s.len() || axes.iter().any(|&x| x >= s.len() || std::mem::replace(&mut seen[x], true)) {
            return shape_err(format!("permute {:?} of {:?}", axes, s));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&x| s[x]).collect();
        let out = permute_data(self.value(a).data(), &s, axes);
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::Permute { src: a, axes: axes.to_vec() }, rg))
    }

    /// Reverses the order of entries along `axis`.
    pub fn flip(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return shape_err(format!("flip axis {} of {:?}", axis, s));
        }
        let out = flip_data(self.value(a).data(), &s, axis);
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&s, out)?, Op::Flip { src: a, axis }, rg))
    }

    // ---- reductions -----------------------------------------------------

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return shape_err(format!("softmax axis {} of {:?}", axis, s));
        }
        let (outer, n, inner) = split_axis(&s, axis);
        let src = self.value(a).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| o * n * inner + k * inner + i;
                let max = (0..n).map(|k| src[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..n {
                    let e = (src[idx(k)] - max).exp();
                    out[idx(k)] = e;
                    z += e;
                }
                for k in 0..n {
                    out[idx(k)] /= z;
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&s, out)?, Op::Softmax { src: a, axis }, rg))
    }

    /// Maximum along `axis`, which is removed from the shape. Ties go to the first index.
    pub fn max_reduce(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || s[axis] == 0 {
            return shape_err(format!("max_reduce axis {} of {:?}", axis, s));
        }
        let (outer, n, inner) = split_axis(&s, axis);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = o * n * inner + i;
                for k in 1..n {
                    let idx = o * n * inner + k * inner + i;
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                out.push(src[best]);
                argmax.push(best);
            }
        }
        let mut shape = s;
        shape.remove(axis);
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MaxReduce { src: a, argmax }, rg))
    }

    /// Sum along `axis`, which is removed from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return shape_err(format!("sum_axis {} of {:?}", axis, s));
        }
        let (outer, n, inner) = split_axis(&s, axis);
        let src = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let base = o * n * inner + k * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut shape = s;
        shape.remove(axis);
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&shape, out)?, Op::SumAxis { src: a, axis }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(t, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let m = if v.is_empty() { 0.0 } else { v.sum() / v.len() as f64 };
        let rg = self.rg(a);
        self.push(Tensor::scalar(m), Op::Mean(a), rg)
    }

    // ---- fused layers ---------------------------------------------------

    /// Same-padded 2-d convolution of `input` `[C, H, W]` with `weight`
    /// `[F, C, kh, kw]` (odd kernel sizes) and `bias` `[F]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (si, sw, sb) = (self.shape(input), self.shape(weight), self.shape(bias));
        if si.len() != 3 || sw.len() != 4 || sw[1] != si[0] || sb != [sw[0]] || sw[2] % 2 == 0 || sw[3] % 2 == 0 {
            return shape_err(format!("conv2d input {:?} weight {:?} bias {:?}", si, sw, sb));
        }
        let geom = ConvGeom {
            channels: si[0],
            height: si[1],
            width: si[2],
            filters: sw[0],
            kh: sw[2],
            kw: sw[3],
        };
        let cols = im2col(self.value(input).data(), &geom);
        let hw = geom.height * geom.width;
        let ck = geom.channels * geom.kh * geom.kw;
        let mut out = vec![0.0; geom.filters * hw];
        let b = self.value(bias).data();
        for f in 0..geom.filters {
            out[f * hw..(f + 1) * hw].iter_mut().for_each(|v| *v = b[f]);
        }
        gemm(geom.filters, ck, hw, self.value(weight).data(), false, &cols, false, &mut out, 1.0);
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        let t = Tensor::new(&[geom.filters, geom.height, geom.width], out)?;
        Ok(self.push(t, Op::Conv2d { input, weight, bias, cols, geom }, rg))
    }

    /// Non-overlapping max pooling of `[C, H, W]` by `(ph, pw)`.
    pub fn max_pool2d(&mut self, a: Var, ph: usize, pw: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || ph == 0 || pw == 0 || s[1] % ph != 0 || s[2] % pw != 0 {
            return shape_err(format!("max_pool2d ({}, {}) of {:?}", ph, pw, s));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h / ph, w / pw);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(c * oh * ow);
        let mut argmax = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    let mut best = ch * h * w + y * ph * w + x * pw;
                    for dy in 0..ph {
                        for dx in 0..pw {
                            let idx = ch * h * w + (y * ph + dy) * w + x * pw + dx;
                            if src[idx] > src[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&[c, oh, ow], out)?, Op::MaxPool2d { src: a, argmax }, rg))
    }

    /// Mean binary cross-entropy with `pred` clamped to `[eps, 1 - eps]`.
    /// The target is treated as a constant.
    pub fn bce(&mut self, pred: Var, target: Var, eps: f64) -> Result<Var> {
        let (tp, tt) = (self.value(pred), self.value(target));
        if tp.shape() != tt.shape() {
            return shape_err(format!("bce {:?} vs {:?}", tp.shape(), tt.shape()));
        }
        let n = tp.len().max(1) as f64;
        let total: f64 = tp
            .data()
            .iter()
            .zip(tt.data())
            .map(|(&p, &y)| {
                let p = p.clamp(eps, 1.0 - eps);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum();
        let rg = self.rg(pred);
        Ok(self.push(Tensor::scalar(total / n), Op::Bce { pred, target, eps }, rg))
    }

    // ---- backward -------------------------------------------------------

    /// Backpropagates from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return shape_err(format!("backward from non-scalar {:?}", self.shape(loss)));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let seed_shape = self.shape(loss).to_vec();
        grads[loss.0] = Some(Tensor::full(&seed_shape, 1.0));
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.backward_node(i, &gout, &mut grads);
            }
            grads[i] = Some(gout);
        }
        self.grads = Some(grads);
        Ok(())
    }

    /// Gradient of the last backward pass with respect to `v`; zeros if `v`
    /// did not influence the loss.
    pub fn grad(&self, v: Var) -> Result<Tensor> {
        let grads = self
            .grads
            .as_ref()
            .ok_or_else(|| AdError::State("grad requested before backward".into()))?;
        Ok(grads[v.0].clone().unwrap_or_else(|| Tensor::zeros(self.shape(v))))
    }

    /// Parameter gradients of the last backward pass, in load order.
    pub fn param_grads(&self) -> Result<Vec<(ParamId, Tensor)>> {
        self.params.iter().map(|&(v, id)| Ok((id, self.grad(v)?))).collect()
    }

    fn backward_node(&self, i: usize, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let out = &nodes[i].value;
        let g = gout.data();
        let map = |t: &Tensor, f: &dyn Fn(usize, f64) -> f64| {
            let data = t.data().iter().enumerate().map(|(k, &x)| f(k, x)).collect();
            Tensor::new(t.shape(), data).expect("same shape")
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if nodes[a.0].requires_grad {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, false, val(*b).data(), true, &mut da, 0.0);
                    accumulate(grads, nodes, *a, Tensor::new(sa, da).unwrap());
                }
                if nodes[b.0].requires_grad {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, val(*a).data(), true, g, false, &mut db, 0.0);
                    accumulate(grads, nodes, *b, Tensor::new(sb, db).unwrap());
                }
            }
            Op::Add(a, b) => {
                accumulate(grads, nodes, *a, gout.clone());
                accumulate(grads, nodes, *b, gout.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, nodes, *a, gout.clone());
                accumulate(grads, nodes, *b, map(gout, &|_, x| -x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                accumulate(grads, nodes, *a, map(gout, &|k, x| x * vb[k]));
                accumulate(grads, nodes, *b, map(gout, &|k, x| x * va[k]));
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                accumulate(grads, nodes, *a, map(gout, &|k, x| x / vb[k]));
                accumulate(grads, nodes, *b, map(gout, &|k, x| -x * va[k] / (vb[k] * vb[k])));
            }
            Op::AddBias(a, bias) => {
                accumulate(grads, nodes, *a, gout.clone());
                if nodes[bias.0].requires_grad {
                    let n = val(*bias).len();
                    let mut db = vec![0.0; n];
                    for (k, &x) in g.iter().enumerate() {
                        db[k % n] += x;
                    }
                    accumulate(grads, nodes, *bias, Tensor::new(&[n], db).unwrap());
                }
            }
            Op::MulCol(a, w) => {
                let cols = val(*a).shape()[1];
                let (va, vw) = (val(*a).data(), val(*w).data());
                accumulate(grads, nodes, *a, map(gout, &|k, x| x * vw[k / cols]));
                if nodes[w.0].requires_grad {
                    let mut dw = vec![0.0; vw.len()];
                    for (k, &x) in g.iter().enumerate() {
                        dw[k / cols] += x * va[k];
                    }
                    accumulate(grads, nodes, *w, Tensor::new(val(*w).shape(), dw).unwrap());
                }
            }
            Op::Scale(a, f) => accumulate(grads, nodes, *a, map(gout, &|_, x| x * f)),
            Op::AddScalar(a) | Op::Reshape(a) => {
                let t = gout.clone().reshaped(val(*a).shape()).unwrap();
                accumulate(grads, nodes, *a, t);
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = split_axis(out.shape(), *axis);
                let total = out.shape()[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let chunk = val(p).shape()[*axis] * inner;
                    if nodes[p.0].requires_grad {
                        let mut d = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            let base = o * total + offset;
                            d.extend_from_slice(&g[base..base + chunk]);
                        }
                        accumulate(grads, nodes, p, Tensor::new(val(p).shape(), d).unwrap());
                    }
                    offset += chunk;
                }
            }
            Op::Slice { src, axis, start } => {
                let s = val(*src).shape();
                let (outer, n, inner) = split_axis(s, *axis);
                let len = out.shape()[*axis];
                let mut d = vec![0.0; val(*src).len()];
                for o in 0..outer {
                    let base = o * n * inner + start * inner;
                    d[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                accumulate(grads, nodes, *src, Tensor::new(s, d).unwrap());
            }
            Op::Transpose(a) => {
                let (r, c) = (out.shape()[0], out.shape()[1]);
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[j * r + i] = g[i * c + j];
                    }
                }
                accumulate(grads, nodes, *a, Tensor::new(val(*a).shape(), d).unwrap());
            }
            Op::Permute { src, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (k, &ax) in axes.iter().enumerate() {
                    inverse[ax] = k;
                }
                let d = permute_data(g, out.shape(), &inverse);
                accumulate(grads, nodes, *src, Tensor::new(val(*src).shape(), d).unwrap());
            }
            Op::Flip { src, axis } => {
                let d = flip_data(g, out.shape(), *axis);
                accumulate(grads, nodes, *src, Tensor::new(out.shape(), d).unwrap());
            }
            Op::Sigmoid(a) => {
                let y = out.data();
                accumulate(grads, nodes, *a, map(gout, &|k, x| x * y[k] * (1.0 - y[k])));
            }
            Op::Tanh(a) => {
                let y = out.data();
                accumulate(grads, nodes, *a, map(gout, &|k, x| x * (1.0 - y[k] * y[k])));
            }
            Op::Relu(a) => {
                let va = val(*a).data();
                accumulate(grads, nodes, *a, map(gout, &|k, x| if va[k] > 0.0 { x } else { 0.0 }));
            }
            Op::Abs(a) => {
                let va = val(*a).data();
                accumulate(grads, nodes, *a, map(gout, &|k, x| x * va[k].signum() * f64::from(va[k] != 0.0)));
            }
            Op::Sqrt(a) => {
                let y = out.data();
                accumulate(grads, nodes, *a, map(gout, &|k, x| 0.5 * x / y[k]));
            }
            Op::ClampMin(a, floor) => {
                let va = val(*a).data();
                accumulate(grads, nodes, *a, map(gout, &|k, x| if va[k] >= *floor { x } else { 0.0 }));
            }
            Op::Softmax { src, axis } => {
                let (outer, n, inner) = split_axis(out.shape(), *axis);
                let y = out.data();
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let idx = |k: usize| o * n * inner + k * inner + ii;
                        let dot: f64 = (0..n).map(|k| g[idx(k)] * y[idx(k)]).sum();
                        for k in 0..n {
                            d[idx(k)] = y[idx(k)] * (g[idx(k)] - dot);
                        }
                    }
                }
                accumulate(grads, nodes, *src, Tensor::new(out.shape(), d).unwrap());
            }
            Op::MaxReduce { src, argmax } | Op::MaxPool2d { src, argmax } => {
                let mut d = vec![0.0; val(*src).len()];
                for (k, &idx) in argmax.iter().enumerate() {
                    d[idx] += g[k];
                }
                accumulate(grads, nodes, *src, Tensor::new(val(*src).shape(), d).unwrap());
            }
            Op::SumAxis { src, axis } => {
                let s = val(*src).shape();
                let (outer, n, inner) = split_axis(s, *axis);
                let mut d = vec![0.0; val(*src).len()];
                for o in 0..outer {
                    for k in 0..n {
                        for ii in 0..inner {
                            d[o * n * inner + k * inner + ii] = g[o * inner + ii];
                        }
                    }
                }
                accumulate(grads, nodes, *src, Tensor::new(s, d).unwrap());
            }
            Op::Sum(a) => {
                accumulate(grads, nodes, *a, Tensor::full(val(*a).shape(), g[0]));
            }
            Op::Mean(a) => {
                let n = val(*a).len().max(1) as f64;
                accumulate(grads, nodes, *a, Tensor::full(val(*a).shape(), g[0] / n));
            }
            Op::Conv2d { input, weight, bias, cols, geom } => {
                let hw = geom.height * geom.width;
                let ck = geom.channels * geom.kh * geom.kw;
                if nodes[bias.0].requires_grad {
                    let db: Vec<f64> = (0..geom.filters).map(|f| g[f * hw..(f + 1) * hw].iter().sum()).collect();
                    accumulate(grads, nodes, *bias, Tensor::new(&[geom.filters], db).unwrap());
                }
                if nodes[weight.0].requires_grad {
                    let mut dw = vec![0.0; geom.filters * ck];
                    gemm(geom.filters, hw, ck, g, false, cols, true, &mut dw, 0.0);
                    accumulate(grads, nodes, *weight, Tensor::new(val(*weight).shape(), dw).unwrap());
                }
                if nodes[input.0].requires_grad {
                    let mut dcols = vec![0.0; ck * hw];
                    gemm(ck, geom.filters, hw, val(*weight).data(), true, g, false, &mut dcols, 0.0);
                    let d = col2im(&dcols, geom);
                    accumulate(grads, nodes, *input, Tensor::new(val(*input).shape(), d).unwrap());
                }
            }
            Op::Bce { pred, target, eps } => {
                let (p, y) = (val(*pred).data(), val(*target).data());
                let n = p.len().max(1) as f64;
                let scale = g[0] / n;
                let d = p
                    .iter()
                    .zip(y)
                    .map(|(&p, &y)| {
                        if p < *eps || p > 1.0 - eps {
                            0.0
                        } else {
                            scale * (-y / p + (1.0 - y) / (1.0 - p))
                        }
                    })
                    .collect();
                accumulate(grads, nodes, *pred, Tensor::new(val(*pred).shape(), d).unwrap());
            }
        }
    }
}

fn permute_data(src: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let nd = shape.len();
    let mut strides = vec![1; nd];
    for d in (0..nd.saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let out_strides: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
    let total = src.len();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; nd];
    let mut offset = 0usize;
    for _ in 0..total {
        out.push(src[offset]);
        // odometer increment over the output index
        for d in (0..nd).rev() {
            idx[d] += 1;
            offset += out_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= out_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

fn flip_data(src: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, n, inner) = split_axis(shape, axis);
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for k in 0..n {
            let from = o * n * inner + k * inner;
            let to = o * n * inner + (n - 1 - k) * inner;
            out[to..to + inner].copy_from_slice(&src[from..from + inner]);
        }
    }
    out
}

fn im2col(input: &[f64], geom: &ConvGeom) -> Vec<f64> {
    let (h, w) = (geom.height, geom.width);
    let (ph, pw) = (geom.kh / 2, geom.kw / 2);
    let hw = h * w;
    let mut cols = vec![0.0; geom.channels * geom.kh * geom.kw * hw];
    for c in 0..geom.channels {
        let plane = &input[c * hw..(c + 1) * hw];
        for ky in 0..geom.kh {
            for kx in 0..geom.kw {
                let row = (c * geom.kh + ky) * geom.kw + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - ph as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    let x_lo = pw.saturating_sub(kx);
                    let x_hi = (w + pw).saturating_sub(kx).min(w);
                    for x in x_lo..x_hi {
                        dst[y * w + x] = plane[sy * w + x + kx - pw];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], geom: &ConvGeom) -> Vec<f64> {
    let (h, w) = (geom.height, geom.width);
    let (ph, pw) = (geom.kh / 2, geom.kw / 2);
    let hw = h * w;
    let mut out = vec![0.0; geom.channels * hw];
    for c in 0..geom.channels {
        for ky in 0..geom.kh {
            for kx in 0..geom.kw {
                let row = (c * geom.kh + ky) * geom.kw + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - ph as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    let x_lo = pw.saturating_sub(kx);
                    let x_hi = (w + pw).saturating_sub(kx).min(w);
                    for x in x_lo..x_hi {
                        out[c * hw + sy * w + x + kx - pw] += src[y * w + x];
                    }
                }
            }
        }
    }
    out
}
