//! Reverse-mode differentiation over dense `f64` arrays.
//!
//! A [`Graph`] records every operation of one forward pass. Nodes are
//! addressed through copyable [`Var`] handles. After the forward pass a
//! single call to [`Graph::backward`] walks the record in reverse and
//! accumulates gradients on every node that depends on a parameter leaf.
//! The graph is then spent; the next forward pass builds a new one.
//!
//! All reductions run in index order so that repeated runs produce
//! bit-identical values and gradients.

mod check;

pub use check::{grad_check, GradCheckReport};

use crate::error::{Result, SdqError};
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule used by rounding nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoundGrad {
    /// Straight-through: the upstream gradient passes unchanged.
    Ste,
    /// The true almost-everywhere derivative of `round`.
    Zero,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MulScalar(Var, Var),
    AddBias(Var, Var),
    Linear(Var, Var),
    MatMul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
    },
    Tanh(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Recip(Var),
    Sqrt(Var),
    Clamp(Var, f64, f64),
    Round(Var, RoundGrad),
    QuantUnit(Var),
    StraightThrough(Var),
    Mix {
        hi: Var,
        lo: Var,
        c: Var,
    },
    Sum(Var),
    Mean(Var),
    SumSq(Var),
    L1(Var),
    MaxAbs(Var, usize),
    Variance(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Reshape(Var),
    Gather(Var, Vec<usize>),
    GlobalAvgPool(Var),
    Stack(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// One forward pass worth of recorded operations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    surrogate: bool,
    consumed: bool,
}

fn check_same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(SdqError::contract(format!(
            "{op}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Split a shape into `[rows, cols]` where `cols` is the last dimension.
fn rows_cols(t: &Tensor) -> (usize, usize) {
    let cols = t.shape().last().copied().unwrap_or(1).max(1);
    (t.len() / cols, cols)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose rounding nodes behave as the identity in the forward
    /// pass. Central differences taken on such a graph measure the
    /// straight-through surrogate rather than the staircase.
    pub fn surrogate() -> Self {
        Graph {
            surrogate: true,
            ..Self::default()
        }
    }

    pub fn is_surrogate(&self) -> bool {
        self.surrogate
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Differentiable leaf (a parameter or an input we want gradients for).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Copy of `v`'s current value as an untracked leaf.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated on `v` by the last backward pass; zeros if the
    /// node was not reached.
    pub fn grad(&self, v: Var) -> Tensor {
        let shape = self.nodes[v.0].value.shape().to_vec();
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => Tensor::new(g.clone(), shape).expect("grad shape"),
            None => Tensor::zeros(&shape),
        }
    }

    // ---------------------------------------------------------------- ops

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        check_same_shape(va, vb, "add")?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(data, va.shape().to_vec())?;
        let tr = self.tracked(a) || self.tracked(b);
        Ok(self.push(t, Op::Add(a, b), tr))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        check_same_shape(va, vb, "sub")?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let t = Tensor::new(data, va.shape().to_vec())?;
        let tr = self.tracked(a) || self.tracked(b);
        Ok(self.push(t, Op::Sub(a, b), tr))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        check_same_shape(va, vb, "mul")?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(data, va.shape().to_vec())?;
        let tr = self.tracked(a) || self.tracked(b);
        Ok(self.push(t, Op::Mul(a, b), tr))
    }

    /// `k * a` for a constant `k`.
    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let t = self.value(a).map(|v| v * k);
        let tr = self.tracked(a);
        self.push(t, Op::Scale(a, k), tr)
    }

    /// `a + k` for a constant `k`.
    pub fn add_const(&mut self, a: Var, k: f64) -> Var {
        let t = self.value(a).map(|v| v + k);
        let tr = self.tracked(a);
        self.push(t, Op::AddConst(a), tr)
    }

    /// `s * a` where `s` is a one-element tensor.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if !self.value(s).is_scalar() {
            return Err(SdqError::contract("mul_scalar: multiplier is not a scalar"));
        }
        let k = self.value(s).item();
        let t = self.value(a).map(|v| v * k);
        let tr = self.tracked(a) || self.tracked(s);
        Ok(self.push(t, Op::MulScalar(a, s), tr))
    }

    /// Adds `b[j]` along axis 1 of `x` (features of `[n, m]`, channels of
    /// `[n, c, h, w]`).
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(b));
        let shape = vx.shape();
        if shape.len() < 2 || shape[1] != vb.len() {
            return Err(SdqError::contract(format!(
                "add_bias: bias of length {} does not match axis 1 of {:?}",
                vb.len(),
                shape
            )));
        }
        let ch = shape[1];
        let inner: usize = shape[2..].iter().product();
        let mut data = vx.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v += vb.data()[(i / inner) % ch];
        }
        let t = Tensor::new(data, shape.to_vec())?;
        let tr = self.tracked(x) || self.tracked(b);
        Ok(self.push(t, Op::AddBias(x, b), tr))
    }

    /// `x · wᵀ` with `x: [n, in]` and `w: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        if vx.shape().len() != 2 || vw.shape().len() != 2 || vx.shape()[1] != vw.shape()[1] {
            return Err(SdqError::contract(format!(
                "linear: incompatible shapes {:?} and {:?}",
                vx.shape(),
                vw.shape()
            )));
        }
        let (n, k) = (vx.shape()[0], vx.shape()[1]);
        let m = vw.shape()[0];
        let (xd, wd) = (vx.data(), vw.data());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let xr = &xd[i * k..(i + 1) * k];
            for j in 0..m {
                let wr = &wd[j * k..(j + 1) * k];
                let mut acc = 0.0;
                for p in 0..k {
                    acc += xr[p] * wr[p];
                }
                out[i * m + j] = acc;
            }
        }
        let t = Tensor::new(out, vec![n, m])?;
        let tr = self.tracked(x) || self.tracked(w);
        Ok(self.push(t, Op::Linear(x, w), tr))
    }

    /// Plain matrix product of `[n, k]` and `[k, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().len() != 2 || vb.shape().len() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(SdqError::contract(format!(
                "matmul: incompatible shapes {:?} and {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let (n, k, m) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let out = matmul_raw(va.data(), vb.data(), n, k, m);
        let t = Tensor::new(out, vec![n, m])?;
        let tr = self.tracked(a) || self.tracked(b);
        Ok(self.push(t, Op::MatMul(a, b), tr))
    }

    /// Direct 2-D convolution, `x: [n, cin, h, w]`, `w: [cout, cin, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        let (xs, ws) = (vx.shape(), vw.shape());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] || stride == 0 {
            return Err(SdqError::contract(format!(
                "conv2d: incompatible shapes {xs:?} and {ws:?} (stride {stride})"
            )));
        }
        let geo = ConvGeometry::new(xs, ws, stride, pad)?;
        let out = conv_forward(vx.data(), vw.data(), &geo);
        let t = Tensor::new(out, vec![geo.n, geo.cout, geo.oh, geo.ow])?;
        let tr = self.tracked(x) || self.tracked(w);
        Ok(self.push(t, Op::Conv2d { x, w, stride, pad }, tr))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(a).map(f);
        let tr = self.tracked(a);
        self.push(t, op, tr)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |v| v.max(0.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, Op::Recip(a), |v| 1.0 / v)
    }

    /// Gradient passes where `lo <= x <= hi`, zero outside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), move |v| v.clamp(lo, hi))
    }

    /// Round half away from zero, with a selectable backward rule.
    pub fn round(&mut self, a: Var, rule: RoundGrad) -> Var {
        if self.surrogate {
            self.unary(a, Op::Round(a, rule), |v| v)
        } else {
            self.unary(a, Op::Round(a, rule), f64::round)
        }
    }

    /// `round(L·x)/L` where `L = levels[g]` for row group `g` of `x`.
    ///
    /// `levels` holds `2^b − 1` per group; rows of `x` are split into
    /// `levels.len()` equal contiguous groups. Backward is straight-through.
    pub fn quant_unit(&mut self, a: Var, levels: &[f64]) -> Result<Var> {
        let va = self.value(a);
        let rows = va.rows();
        if levels.is_empty() || !rows.is_multiple_of(levels.len()) {
            return Err(SdqError::contract(format!(
                "quant_unit: {} level groups do not divide {} rows",
                levels.len(),
                rows
            )));
        }
        let per_group = va.len() / levels.len();
        let surrogate = self.surrogate;
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                if surrogate {
                    x
                } else {
                    let l = levels[i / per_group];
                    (l * x).round() / l
                }
            })
            .collect();
        let t = Tensor::new(data, va.shape().to_vec())?;
        let tr = self.tracked(a);
        Ok(self.push(t, Op::QuantUnit(a), tr))
    }

    /// Forward value is `hard`; the gradient flows to `soft` instead.
    pub fn straight_through(&mut self, hard: Tensor, soft: Var) -> Result<Var> {
        check_same_shape(&hard, self.value(soft), "straight_through")?;
        let tr = self.tracked(soft);
        Ok(self.push(hard, Op::StraightThrough(soft), tr))
    }

    /// `c[g]·hi + (1 − c[g])·lo` per row group `g`; `c` has one entry per
    /// group and the rows of `hi` split into `c.len()` equal groups.
    pub fn mix(&mut self, hi: Var, lo: Var, c: Var) -> Result<Var> {
        let (vh, vl, vc) = (self.value(hi), self.value(lo), self.value(c));
        check_same_shape(vh, vl, "mix")?;
        let rows = vh.rows();
        if vc.is_empty() || rows % vc.len() != 0 {
            return Err(SdqError::contract(format!(
                "mix: {} choice groups do not divide {} rows",
                vc.len(),
                rows
            )));
        }
        let per_group = vh.len() / vc.len();
        let data = vh
            .data()
            .iter()
            .zip(vl.data())
            .enumerate()
            .map(|(i, (&h, &l))| {
                let ci = vc.data()[i / per_group];
                ci * h + (1.0 - ci) * l
            })
            .collect();
        let t = Tensor::new(data, vh.shape().to_vec())?;
        let tr = self.tracked(hi) || self.tracked(lo) || self.tracked(c);
        Ok(self.push(t, Op::Mix { hi, lo, c }, tr))
    }

    fn reduce(&mut self, a: Var, op: Op, v: f64) -> Var {
        let tr = self.tracked(a);
        self.push(Tensor::scalar(v), op, tr)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.reduce(a, Op::Sum(a), s)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let s = va.data().iter().sum::<f64>() / va.len() as f64;
        self.reduce(a, Op::Mean(a), s)
    }

    /// Squared L2 norm.
    pub fn sum_sq(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().map(|v| v * v).sum();
        self.reduce(a, Op::SumSq(a), s)
    }

    pub fn l1(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().map(|v| v.abs()).sum();
        self.reduce(a, Op::L1(a), s)
    }

    /// L2 norm, `sqrt(sum_sq)`.
    pub fn l2(&mut self, a: Var) -> Var {
        let sq = self.sum_sq(a);
        self.sqrt(sq)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    /// Largest absolute entry; the gradient goes to the first maximiser.
    pub fn max_abs(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut best = 0usize;
        let mut m = f64::NEG_INFINITY;
        for (i, v) in va.data().iter().enumerate() {
            if v.abs() > m {
                m = v.abs();
                best = i;
            }
        }
        self.reduce(a, Op::MaxAbs(a, best), m)
    }

    /// Population variance of all entries.
    pub fn variance(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let n = va.len() as f64;
        let m = va.data().iter().sum::<f64>() / n;
        let v = va.data().iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
        self.reduce(a, Op::Variance(a), v)
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let (r, c) = rows_cols(va);
        let mut out = va.data().to_vec();
        for i in 0..r {
            softmax_row(&mut out[i * c..(i + 1) * c]);
        }
        let t = Tensor::new(out, va.shape().to_vec()).expect("softmax shape");
        let tr = self.tracked(a);
        self.push(t, Op::Softmax(a), tr)
    }

    /// Log-softmax over the last dimension.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let (r, c) = rows_cols(va);
        let mut out = va.data().to_vec();
        for i in 0..r {
            log_softmax_row(&mut out[i * c..(i + 1) * c]);
        }
        let t = Tensor::new(out, va.shape().to_vec()).expect("log_softmax shape");
        let tr = self.tracked(a);
        self.push(t, Op::LogSoftmax(a), tr)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        let tr = self.tracked(a);
        Ok(self.push(t, Op::Reshape(a), tr))
    }

    /// Flat-index gather into a 1-D tensor.
    pub fn gather(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        let va = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= va.len()) {
            return Err(SdqError::contract(format!(
                "gather: index {bad} out of bounds for {} elements",
                va.len()
            )));
        }
        let data: Vec<f64> = idx.iter().map(|&i| va.data()[i]).collect();
        let t = Tensor::vector(data);
        let tr = self.tracked(a);
        Ok(self.push(t, Op::Gather(a, idx), tr))
    }

    /// Mean over the spatial axes of `[n, c, h, w]`, giving `[n, c]`.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let s = va.shape();
        if s.len() != 4 {
            return Err(SdqError::contract(format!(
                "global_avg_pool: expected 4-D input, got {s:?}"
            )));
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let mut out = vec![0.0; n * c];
        for (i, o) in out.iter_mut().enumerate() {
            let chunk = &va.data()[i * hw..(i + 1) * hw];
            *o = chunk.iter().sum::<f64>() / hw as f64;
        }
        let t = Tensor::new(out, vec![n, c])?;
        let tr = self.tracked(a);
        Ok(self.push(t, Op::GlobalAvgPool(a), tr))
    }

    /// Stacks one-element tensors into a vector.
    pub fn stack(&mut self, items: &[Var]) -> Result<Var> {
        let mut data = Vec::with_capacity(items.len());
        for &v in items {
            if !self.value(v).is_scalar() {
                return Err(SdqError::contract("stack: every item must be a scalar"));
            }
            data.push(self.value(v).item());
        }
        let tr = items.iter().any(|&v| self.tracked(v));
        Ok(self.push(Tensor::vector(data), Op::Stack(items.to_vec()), tr))
    }

    // ----------------------------------------------------------- backward

    /// Accumulates `d loss / d node` on every tracked ancestor of `loss`.
    ///
    /// A graph can be differentiated once; build a new one for the next
    /// forward pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(SdqError::contract("backward: graph already consumed"));
        }
        if !self.value(loss).is_scalar() {
            return Err(SdqError::contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = self.grads[id].take() else {
                continue;
            };
            if self.nodes[id].tracked {
                self.propagate(id, &g);
            }
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: &[f64]) {
        if !self.nodes[v.0].tracked {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => {
                for (a, d) in g.iter_mut().zip(delta) {
                    *a += d;
                }
            }
            slot @ None => *slot = Some(delta.to_vec()),
        }
    }

    fn propagate(&mut self, id: usize, g: &[f64]) {
        let op = self.nodes[id].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(a, g);
                self.accumulate(b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(a, g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                self.accumulate(b, &neg);
            }
            Op::Mul(a, b) => {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(self.value(b).data())
                    .map(|(g, y)| g * y)
                    .collect();
                let gb: Vec<f64> = g
                    .iter()
                    .zip(self.value(a).data())
                    .map(|(g, x)| g * x)
                    .collect();
                self.accumulate(a, &ga);
                self.accumulate(b, &gb);
            }
            Op::Scale(a, k) => {
                let ga: Vec<f64> = g.iter().map(|v| v * k).collect();
                self.accumulate(a, &ga);
            }
            Op::AddConst(a) => self.accumulate(a, g),
            Op::MulScalar(a, s) => {
                let k = self.value(s).item();
                let ga: Vec<f64> = g.iter().map(|v| v * k).collect();
                let gs: f64 = g.iter().zip(self.value(a).data()).map(|(g, x)| g * x).sum();
                self.accumulate(a, &ga);
                self.accumulate(s, &[gs]);
            }
            Op::AddBias(x, b) => {
                let shape = self.value(x).shape().to_vec();
                let ch = shape[1];
                let inner: usize = shape[2..].iter().product();
                let mut gb = vec![0.0; ch];
                for (i, v) in g.iter().enumerate() {
                    gb[(i / inner) % ch] += v;
                }
                self.accumulate(x, g);
                self.accumulate(b, &gb);
            }
            Op::Linear(x, w) => {
                let (vx, vw) = (self.value(x), self.value(w));
                let (n, k) = (vx.shape()[0], vx.shape()[1]);
                let m = vw.shape()[0];
                // dx = g · w  ([n,m]·[m,k]);  dw = gᵀ · x  ([m,n]·[n,k])
                let gx = matmul_raw(g, vw.data(), n, m, k);
                let mut gw = vec![0.0; m * k];
                for j in 0..m {
                    for i in 0..n {
                        let gij = g[i * m + j];
                        if gij == 0.0 {
                            continue;
                        }
                        let xr = &vx.data()[i * k..(i + 1) * k];
                        let row = &mut gw[j * k..(j + 1) * k];
                        for p in 0..k {
                            row[p] += gij * xr[p];
                        }
                    }
                }
                self.accumulate(x, &gx);
                self.accumulate(w, &gw);
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                let (n, k, m) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                let bt = transpose(vb.data(), k, m);
                let at = transpose(va.data(), n, k);
                let ga = matmul_raw(g, &bt, n, m, k);
                let gb = matmul_raw(&at, g, k, n, m);
                self.accumulate(a, &ga);
                self.accumulate(b, &gb);
            }
            Op::Conv2d { x, w, stride, pad } => {
                let (vx, vw) = (self.value(x), self.value(w));
                let geo = ConvGeometry::new(vx.shape(), vw.shape(), stride, pad)
                    .expect("validated in forward");
                let (gx, gw) = conv_backward(vx.data(), vw.data(), g, &geo);
                self.accumulate(x, &gx);
                self.accumulate(w, &gw);
            }
            Op::Tanh(a) => {
                let out = self.nodes[id].value.data();
                let ga: Vec<f64> = g.iter().zip(out).map(|(g, y)| g * (1.0 - y * y)).collect();
                self.accumulate(a, &ga);
            }
            Op::Relu(a) => {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(self.value(a).data())
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(a, &ga);
            }
            Op::Sigmoid(a) => {
                let out = self.nodes[id].value.data();
                let ga: Vec<f64> = g.iter().zip(out).map(|(g, y)| g * y * (1.0 - y)).collect();
                self.accumulate(a, &ga);
            }
            Op::Exp(a) => {
                let out = self.nodes[id].value.data();
                let ga: Vec<f64> = g.iter().zip(out).map(|(g, y)| g * y).collect();
                self.accumulate(a, &ga);
            }
            Op::Log(a) => {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(self.value(a).data())
                    .map(|(g, x)| g / x)
                    .collect();
                self.accumulate(a, &ga);
            }
            Op::Abs(a) => {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(self.value(a).data())
                    .map(|(g, x)| {
                        if *x > 0.0 {
                            *g
                        } else if *x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.accumulate(a, &ga);
            }
            Op::Recip(a) => {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(self.value(a).data())
                    .map(|(g, x)| -g / (x * x))
                    .collect();
                self.accumulate(a, &ga);
            }
            Op::Sqrt(a) => {
                let out = self.nodes[id].value.data();
                let ga: Vec<f64> = g.iter().zip(out).map(|(g, y)| g * 0.5 / y).collect();
                self.accumulate(a, &ga);
            }
            Op::Clamp(a, lo, hi) => {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(self.value(a).data())
                    .map(|(g, x)| if *x >= lo && *x <= hi { *g } else { 0.0 })
                    .collect();
                self.accumulate(a, &ga);
            }
            Op::Round(a, RoundGrad::Ste) | Op::QuantUnit(a) | Op::Reshape(a) => {
                self.accumulate(a, g);
            }
            Op::Round(_, RoundGrad::Zero) => {}
            Op::StraightThrough(soft) => self.accumulate(soft, g),
            Op::Mix { hi, lo, c } => {
                let vc = self.value(c).data().to_vec();
                let per_group = g.len() / vc.len();
                let (vh, vl) = (self.value(hi).data(), self.value(lo).data());
                let mut gh = vec![0.0; g.len()];
                let mut gl = vec![0.0; g.len()];
                let mut gc = vec![0.0; vc.len()];
                for i in 0..g.len() {
                    let grp = i / per_group;
                    gh[i] = g[i] * vc[grp];
                    gl[i] = g[i] * (1.0 - vc[grp]);
                    gc[grp] += g[i] * (vh[i] - vl[i]);
                }
                self.accumulate(hi, &gh);
                self.accumulate(lo, &gl);
                self.accumulate(c, &gc);
            }
            Op::Sum(a) => {
                let n = self.value(a).len();
                self.accumulate(a, &vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(a).len();
                self.accumulate(a, &vec![g[0] / n as f64; n]);
            }
            Op::SumSq(a) => {
                let ga: Vec<f64> = self.value(a).data().iter().map(|x| 2.0 * x * g[0]).collect();
                self.accumulate(a, &ga);
            }
            Op::L1(a) => {
                let ga: Vec<f64> = self
                    .value(a)
                    .data()
                    .iter()
                    .map(|x| {
                        if *x > 0.0 {
                            g[0]
                        } else if *x < 0.0 {
                            -g[0]
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.accumulate(a, &ga);
            }
            Op::MaxAbs(a, idx) => {
                let va = self.value(a);
                let mut ga = vec![0.0; va.len()];
                let x = va.data()[idx];
                ga[idx] = if x > 0.0 {
                    g[0]
                } else if x < 0.0 {
                    -g[0]
                } else {
                    0.0
                };
                self.accumulate(a, &ga);
            }
            Op::Variance(a) => {
                let va = self.value(a);
                let n = va.len() as f64;
                let m = va.data().iter().sum::<f64>() / n;
                let ga: Vec<f64> = va
                    .data()
                    .iter()
                    .map(|x| 2.0 * (x - m) / n * g[0])
                    .collect();
                self.accumulate(a, &ga);
            }
            Op::Softmax(a) => {
                let out = &self.nodes[id].value;
                let (r, c) = rows_cols(out);
                let mut ga = vec![0.0; g.len()];
                for i in 0..r {
                    let s = &out.data()[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let dot: f64 = s.iter().zip(gr).map(|(s, g)| s * g).sum();
                    for j in 0..c {
                        ga[i * c + j] = s[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(a, &ga);
            }
            Op::LogSoftmax(a) => {
                let out = &self.nodes[id].value;
                let (r, c) = rows_cols(out);
                let mut ga = vec![0.0; g.len()];
                for i in 0..r {
                    let ls = &out.data()[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let total: f64 = gr.iter().sum();
                    for j in 0..c {
                        ga[i * c + j] = gr[j] - ls[j].exp() * total;
                    }
                }
                self.accumulate(a, &ga);
            }
            Op::Gather(a, idx) => {
                let mut ga = vec![0.0; self.value(a).len()];
                for (k, &i) in idx.iter().enumerate() {
                    ga[i] += g[k];
                }
                self.accumulate(a, &ga);
            }
            Op::Stack(items) => {
                for (k, v) in items.into_iter().enumerate() {
                    self.accumulate(v, &[g[k]]);
                }
            }
            Op::GlobalAvgPool(a) => {
                let s = self.value(a).shape().to_vec();
                let hw = s[2] * s[3];
                let mut ga = vec![0.0; self.value(a).len()];
                for (i, v) in ga.iter_mut().enumerate() {
                    *v = g[i / hw] / hw as f64;
                }
                self.accumulate(a, &ga);
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_row(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

pub(crate) fn log_softmax_row(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
    let lz = m + z.ln();
    for v in row.iter_mut() {
        *v -= lz;
    }
}

fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            let orow = &mut out[i * m..(i + 1) * m];
            for j in 0..m {
                orow[j] += aip * brow[j];
            }
        }
    }
    out
}

fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

struct ConvGeometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeometry {
    fn new(xs: &[usize], ws: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (n, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, k) = (ws[0], ws[2]);
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(SdqError::contract(format!(
                "conv2d: kernel {k} larger than padded input {h}x{w}"
            )));
        }
        Ok(ConvGeometry {
            n,
            cin,
            h,
            w,
            cout,
            k,
            stride,
            pad,
            oh: (h + 2 * pad - k) / stride + 1,
            ow: (w + 2 * pad - k) / stride + 1,
        })
    }

    /// Input coordinate for output position `o` and kernel tap `t`.
    fn src(&self, o: usize, t: usize, limit: usize) -> Option<usize> {
        let p = (o * self.stride + t) as isize - self.pad as isize;
        (p >= 0 && (p as usize) < limit).then_some(p as usize)
    }
}

fn conv_forward(x: &[f64], w: &[f64], geo: &ConvGeometry) -> Vec<f64> {
    let ConvGeometry {
        n,
        cin,
        h,
        w: wd,
        cout,
        k,
        oh,
        ow,
        ..
    } = *geo;
    let mut out = vec![0.0; n * cout * oh * ow];
    for b in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..cin {
                        for ky in 0..k {
                            let Some(iy) = geo.src(oy, ky, h) else { continue };
                            for kx in 0..k {
                                let Some(ix) = geo.src(ox, kx, wd) else { continue };
                                acc += x[((b * cin + ci) * h + iy) * wd + ix]
                                    * w[((co * cin + ci) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[((b * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

fn conv_backward(x: &[f64], w: &[f64], g: &[f64], geo: &ConvGeometry) -> (Vec<f64>, Vec<f64>) {
    let ConvGeometry {
        n,
        cin,
        h,
        w: wd,
        cout,
        k,
        oh,
        ow,
        ..
    } = *geo;
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    for b in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let go = g[((b * cout + co) * oh + oy) * ow + ox];
                    if go == 0.0 {
                        continue;
                    }
                    for ci in 0..cin {
                        for ky in 0..k {
                            let Some(iy) = geo.src(oy, ky, h) else { continue };
                            for kx in 0..k {
                                let Some(ix) = geo.src(ox, kx, wd) else { continue };
                                let xi = ((b * cin + ci) * h + iy) * wd + ix;
                                let wi = ((co * cin + ci) * k + ky) * k + kx;
                                gx[xi] += go * w[wi];
                                gw[wi] += go * x[xi];
                            }
                        }
                    }
                }
            }
        }
    }
    (gx, gw)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).item(), 6.0);
        assert_eq!(g.grad(y).item(), 1.0);
    }

    #[test]
    fn identity_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(5.0));
        let y = g.sum(x);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).item(), 1.0);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let err = g.backward(x).unwrap_err();
        assert!(matches!(err, SdqError::Contract(_)));
    }

    #[test]
    fn tape_is_consumed_once() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let y = g.sum_sq(x);
        g.backward(y).unwrap();
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let c = g.scalar(4.0);
        let y = g.mul(x, c).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).item(), 4.0);
        assert_eq!(g.grad(c).item(), 0.0);
    }

    #[test]
    fn round_rules() {
        for (rule, expect) in [(RoundGrad::Ste, 1.0), (RoundGrad::Zero, 0.0)] {
            let mut g = Graph::new();
            let x = g.param(Tensor::vector(vec![0.4, 1.5, -2.5]));
            let r = g.round(x, rule);
            assert_eq!(g.value(r).data(), &[0.0, 2.0, -3.0]);
            let s = g.sum(r);
            g.backward(s).unwrap();
            assert!(g.grad(x).data().iter().all(|&v| v == expect));
        }
    }

    #[test]
    fn clamp_masks_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![-0.3, 0.4, 1.2]));
        let c = g.clamp(x, 0.0, 1.0);
        let s = g.sum(c);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn conv_output_shape() {
        let mut g = Graph::new();
        let x = g.param(Tensor::filled(&[2, 3, 8, 8], 1.0));
        let w = g.param(Tensor::filled(&[4, 3, 3, 3], 1.0));
        let y = g.conv2d(x, w, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[2, 4, 4, 4]);
        // interior output sees a full 3x3x3 window of ones
        assert_eq!(g.value(y).data()[5], 27.0);
    }

    #[test]
    fn straight_through_routes_to_soft() {
        let mut g = Graph::new();
        let s = g.param(Tensor::scalar(0.3));
        let sq = g.sum_sq(s);
        let st = g.straight_through(Tensor::scalar(1.0), sq).unwrap();
        assert_eq!(g.value(st).item(), 1.0);
        let l = g.scale(st, 2.0);
        g.backward(l).unwrap();
        assert!((g.grad(s).item() - 1.2).abs() < 1e-15);
    }
}
