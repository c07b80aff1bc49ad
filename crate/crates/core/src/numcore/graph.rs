//! Tape-based reverse-mode differentiation over 2-D batches.
//!
//! Every operation appends a node holding its forward value. [`Graph::backward`]
//! walks the tape in reverse insertion order, which is a valid reverse
//! topological order because a node can only reference earlier nodes.
//! Gradients arriving at a node from several consumers are summed.

use std::collections::BTreeMap;
use std::rc::Rc;

use super::tensor::Tensor;
use super::ParamId;
use crate::{Error, Result};

/// Lower clamp applied to probabilities inside the cross-entropy.
pub const PROB_FLOOR: f64 = 1e-12;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    OneMinus(Var),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    NormalizeRows(Var),
    Concat(Var, Var),
    AvgPool(Var, usize),
    Pick(Var, usize),
    Sum(Var),
    Mean(Var),
    CrossEntropy(Var, Rc<[usize]>),
    /// `x · M` forward, `g · Kᵀ` backward into `x`.
    Feedback(Var, Var, Rc<Tensor>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<ParamId, Var>,
    grads: Vec<Option<Vec<f64>>>,
}

fn dims2(t: &Tensor, ctx: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [n, m] => Ok((*n, *m)),
        [m] => Ok((1, *m)),
        s => Err(Error::dim(ctx, "a 1-D or 2-D tensor", format!("{s:?}"))),
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

/// Numerically stable softmax of one row, written into `out`.
pub fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// `a[n,k] · b[k,m]`, optionally accumulating into `out`.
fn matmul_into(a: &[f64], b: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `g[n,m] · b[k,m]ᵀ` accumulated into `out[n,k]`.
fn matmul_bt_into(g: &[f64], b: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    for i in 0..n {
        let grow = &g[i * m..(i + 1) * m];
        for p in 0..k {
            let brow = &b[p * m..(p + 1) * m];
            let mut s = 0.0;
            for (&gv, &bv) in grow.iter().zip(brow) {
                s += gv * bv;
            }
            out[i * k + p] += s;
        }
    }
}

/// `a[n,k]ᵀ · g[n,m]` accumulated into `out[k,m]`.
fn matmul_at_into(a: &[f64], g: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    for i in 0..n {
        let grow = &g[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * m..(p + 1) * m];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Input data or frozen values: no gradient is propagated into constants.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Registers a trainable parameter. Registering the same id twice returns
    /// the existing node so that gradients from every use accumulate.
    pub fn param(&mut self, id: ParamId, value: &Tensor) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(value.clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    pub fn param_var(&self, id: &ParamId) -> Option<Var> {
        self.params.get(id).copied()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = dims2(self.value(a), "matmul lhs")?;
        let (k2, m) = dims2(self.value(b), "matmul rhs")?;
        if self.value(b).shape().len() != 2 || k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("rhs [{k}, _]"),
                format!("{:?}", self.value(b).shape()),
            ));
        }
        let mut out = vec![0.0; n * m];
        matmul_into(self.value(a).data(), self.value(b).data(), n, k, m, &mut out);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::MatMul(a, b), needs))
    }

    /// Adds a `[m]` bias to every row of an `[n, m]` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (n, m) = dims2(self.value(a), "add_bias")?;
        if self.value(bias).numel() != m {
            return Err(Error::dim("add_bias", m, self.value(bias).numel()));
        }
        let mut out = self.value(a).data().to_vec();
        let b = self.value(bias).data();
        for row in out.chunks_mut(m) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let needs = self.needs(a) || self.needs(bias);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::AddBias(a, bias), needs))
    }

    fn same_shape(&self, a: Var, b: Var, ctx: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::dim(
                ctx,
                format!("{:?}", self.value(a).shape()),
                format!("{:?}", self.value(b).shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Add(a, b), needs))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul(a, b), needs))
    }

    /// Scales row `i` of `a[n, m]` by `col[i]`, where `col` is `[n, 1]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (n, m) = dims2(self.value(a), "mul_col")?;
        if self.value(col).numel() != n {
            return Err(Error::dim("mul_col", format!("[{n}, 1]"), self.value(col).numel()));
        }
        let c = self.value(col).data();
        let mut out = self.value(a).data().to_vec();
        for (row, &s) in out.chunks_mut(m).zip(c) {
            for o in row {
                *o *= s;
            }
        }
        let needs = self.needs(a) || self.needs(col);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::MulCol(a, col), needs))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x * c).collect())
            .expect("same shape");
        let needs = self.needs(a);
        self.push(out, Op::Scale(a, c), needs)
    }

    /// Multiplies every element of `a` by the single value held in `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::dim("scale_by", "scalar", self.value(s).numel()));
        }
        let c = self.value(s).data()[0];
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x * c).collect())?;
        let needs = self.needs(a) || self.needs(s);
        Ok(self.push(out, Op::ScaleBy(a, s), needs))
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| 1.0 - x).collect())
            .expect("same shape");
        let needs = self.needs(a);
        self.push(out, Op::OneMinus(a), needs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x.max(0.0)).collect())
            .expect("same shape");
        let needs = self.needs(a);
        self.push(out, Op::Relu(a), needs)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| sigmoid(x)).collect())
            .expect("same shape");
        let needs = self.needs(a);
        self.push(out, Op::Sigmoid(a), needs)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (n, m) = dims2(self.value(a), "softmax")?;
        let src = self.value(a).data();
        let mut out = vec![0.0; n * m];
        for (row, o) in src.chunks(m).zip(out.chunks_mut(m)) {
            softmax_row(row, o);
        }
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax(a), needs))
    }

    /// Divides each row by its sum.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (n, m) = dims2(self.value(a), "normalize_rows")?;
        let src = self.value(a).data();
        let mut out = vec![0.0; n * m];
        for (i, (row, o)) in src.chunks(m).zip(out.chunks_mut(m)).enumerate() {
            let s: f64 = row.iter().sum();
            if s == 0.0 || !s.is_finite() {
                return Err(Error::NonFinite(format!("row {i} sums to {s}")));
            }
            o.iter_mut().zip(row).for_each(|(o, r)| *o = r / s);
        }
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::NormalizeRows(a), needs))
    }

    /// Column-wise concatenation of `[n, p]` and `[n, q]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, p) = dims2(self.value(a), "concat lhs")?;
        let (n2, q) = dims2(self.value(b), "concat rhs")?;
        if n != n2 {
            return Err(Error::dim("concat rows", n, n2));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (p + q));
        for i in 0..n {
            out.extend_from_slice(&da[i * p..(i + 1) * p]);
            out.extend_from_slice(&db[i * q..(i + 1) * q]);
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![n, p + q], out)?, Op::Concat(a, b), needs))
    }

    /// Averages consecutive groups of `window` columns; the last group may be shorter.
    pub fn avg_pool(&mut self, a: Var, window: usize) -> Result<Var> {
        if window == 0 {
            return Err(Error::Contract("pool window must be positive".into()));
        }
        let (n, m) = dims2(self.value(a), "avg_pool")?;
        let out_m = m.div_ceil(window);
        let src = self.value(a).data();
        let mut out = vec![0.0; n * out_m];
        for i in 0..n {
            for j in 0..out_m {
                let lo = j * window;
                let hi = (lo + window).min(m);
                let s: f64 = src[i * m + lo..i * m + hi].iter().sum();
                out[i * out_m + j] = s / (hi - lo) as f64;
            }
        }
        let needs = self.needs(a);
        Ok(self.push(Tensor::new(vec![n, out_m], out)?, Op::AvgPool(a, window), needs))
    }

    /// Extracts flat element `k` as a `[1]` scalar.
    pub fn pick(&mut self, a: Var, k: usize) -> Result<Var> {
        let len = self.value(a).numel();
        let v = *self.value(a).data().get(k).ok_or(Error::Index {
            what: "pick",
            index: k,
            len,
        })?;
        let needs = self.needs(a);
        Ok(self.push(Tensor::scalar(v), Op::Pick(a, k), needs))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), needs)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::Mean(a), needs)
    }

    /// Batch-mean of `-ln(clamp(p[target], 1e-12, 1))` over rows of `probs`.
    pub fn cross_entropy(&mut self, probs: Var, targets: &[usize]) -> Result<Var> {
        let (n, c) = dims2(self.value(probs), "cross_entropy")?;
        if targets.len() != n {
            return Err(Error::dim("cross_entropy targets", n, targets.len()));
        }
        let p = self.value(probs).data();
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(Error::Index {
                    what: "class",
                    index: t,
                    len: c,
                });
            }
            loss -= p[i * c + t].clamp(PROB_FLOOR, 1.0).ln();
        }
        loss /= n as f64;
        let needs = self.needs(probs);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy(probs, targets.into()),
            needs,
        ))
    }

    /// Projection `x · M` whose backward pass routes the error through the
    /// fixed matrix `K` instead of `Mᵀ`. `K` must have the shape of `M`.
    pub fn feedback_matmul(&mut self, x: Var, m: Var, k: Rc<Tensor>) -> Result<Var> {
        if k.shape() != self.value(m).shape() {
            return Err(Error::dim(
                "feedback matrix",
                format!("{:?}", self.value(m).shape()),
                format!("{:?}", k.shape()),
            ));
        }
        let (n, kd) = dims2(self.value(x), "feedback lhs")?;
        let (k2, md) = dims2(self.value(m), "feedback rhs")?;
        if kd != k2 {
            return Err(Error::dim("feedback_matmul", kd, k2));
        }
        let mut out = vec![0.0; n * md];
        matmul_into(self.value(x).data(), self.value(m).data(), n, kd, md, &mut out);
        let needs = self.needs(x) || self.needs(m);
        Ok(self.push(Tensor::new(vec![n, md], out)?, Op::Feedback(x, m, k), needs))
    }

    /// Reverse pass from a scalar node. Clears gradients of any earlier pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.value(loss).is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of node {i}")));
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Constant | Op::Param => {}
            Op::MatMul(a, b) => {
                let (n, k) = dims2(self.value(*a), "matmul")?;
                let (_, m) = dims2(self.value(*b), "matmul")?;
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |s| matmul_bt_into(g, bv, n, k, m, s));
                acc(*b, &mut |s| matmul_at_into(av, g, n, k, m, s));
            }
            Op::Feedback(x, mv, k) => {
                let (n, kd) = dims2(self.value(*x), "feedback")?;
                let (_, md) = dims2(self.value(*mv), "feedback")?;
                let xv = self.value(*x).data();
                acc(*x, &mut |s| matmul_bt_into(g, k.data(), n, kd, md, s));
                acc(*mv, &mut |s| matmul_at_into(xv, g, n, kd, md, s));
            }
            Op::AddBias(a, b) => {
                let m = self.value(*b).numel();
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*b, &mut |s| {
                    for row in g.chunks(m) {
                        s.iter_mut().zip(row).for_each(|(s, g)| *s += g);
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * bv[i];
                    }
                });
                acc(*b, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * av[i];
                    }
                });
            }
            Op::MulCol(a, col) => {
                let (_, m) = dims2(self.value(*a), "mul_col")?;
                let (av, cv) = (self.value(*a).data(), self.value(*col).data());
                acc(*a, &mut |s| {
                    for (i, &c) in cv.iter().enumerate() {
                        for j in 0..m {
                            s[i * m + j] += g[i * m + j] * c;
                        }
                    }
                });
                acc(*col, &mut |s| {
                    for (i, si) in s.iter_mut().enumerate() {
                        for j in 0..m {
                            *si += g[i * m + j] * av[i * m + j];
                        }
                    }
                });
            }
            Op::Scale(a, c) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g * c));
            }
            Op::ScaleBy(a, sv) => {
                let c = self.value(*sv).data()[0];
                let av = self.value(*a).data();
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g * c));
                acc(*sv, &mut |s| {
                    s[0] += g.iter().zip(av).map(|(g, a)| g * a).sum::<f64>();
                });
            }
            Op::OneMinus(a) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s -= g));
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        if av[i] > 0.0 {
                            s[i] += g[i];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Softmax(a) => {
                let (_, m) = dims2(&node.value, "softmax")?;
                let y = node.value.data();
                acc(*a, &mut |s| {
                    for ((srow, yrow), grow) in s.chunks_mut(m).zip(y.chunks(m)).zip(g.chunks(m)) {
                        let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                        for j in 0..m {
                            srow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            Op::NormalizeRows(a) => {
                let (_, m) = dims2(&node.value, "normalize_rows")?;
                let (y, av) = (node.value.data(), self.value(*a).data());
                acc(*a, &mut |s| {
                    for (i, srow) in s.chunks_mut(m).enumerate() {
                        let (yrow, grow) = (&y[i * m..(i + 1) * m], &g[i * m..(i + 1) * m]);
                        let sum: f64 = av[i * m..(i + 1) * m].iter().sum();
                        let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                        for j in 0..m {
                            srow[j] += (grow[j] - dot) / sum;
                        }
                    }
                });
            }
            Op::Concat(a, b) => {
                let (n, p) = dims2(self.value(*a), "concat")?;
                let (_, q) = dims2(self.value(*b), "concat")?;
                acc(*a, &mut |s| {
                    for i in 0..n {
                        for j in 0..p {
                            s[i * p + j] += g[i * (p + q) + j];
                        }
                    }
                });
                acc(*b, &mut |s| {
                    for i in 0..n {
                        for j in 0..q {
                            s[i * q + j] += g[i * (p + q) + p + j];
                        }
                    }
                });
            }
            Op::AvgPool(a, window) => {
                let (n, m) = dims2(self.value(*a), "avg_pool")?;
                let out_m = m.div_ceil(*window);
                acc(*a, &mut |s| {
                    for i in 0..n {
                        for j in 0..out_m {
                            let lo = j * window;
                            let hi = (lo + window).min(m);
                            let share = g[i * out_m + j] / (hi - lo) as f64;
                            for e in &mut s[i * m + lo..i * m + hi] {
                                *e += share;
                            }
                        }
                    }
                });
            }
            Op::Pick(a, k) => {
                acc(*a, &mut |s| s[*k] += g[0]);
            }
            Op::Sum(a) => {
                acc(*a, &mut |s| s.iter_mut().for_each(|s| *s += g[0]));
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel() as f64;
                acc(*a, &mut |s| s.iter_mut().for_each(|s| *s += g[0] / n));
            }
            Op::CrossEntropy(p, targets) => {
                let (n, c) = dims2(self.value(*p), "cross_entropy")?;
                let pv = self.value(*p).data();
                acc(*p, &mut |s| {
                    for (i, &t) in targets.iter().enumerate() {
                        let q = pv[i * c + t];
                        if q > PROB_FLOOR && q <= 1.0 {
                            s[i * c + t] -= g[0] / (n as f64 * q);
                        }
                    }
                });
            }
        }
        Ok(())
    }

    /// Gradient of the last backward pass at `v`, if `v` was reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Registered parameters and their gradients; unreached parameters get zeros.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, Vec<f64>)> + '_ {
        self.params.iter().map(|(id, &v)| {
            let g = self
                .grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; self.value(v).numel()]);
            (*id, g)
        })
    }
}
