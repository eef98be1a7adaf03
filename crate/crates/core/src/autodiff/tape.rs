//! Reverse-mode tape.
//!
//! Every operation appends a node holding its forward value and whatever it
//! needs for the pullback. Complex tensors are real tensors whose trailing
//! axis has length 2 (re, im).

use std::sync::Arc;

use num_complex::Complex64;

use super::tensor::{gemm, Tensor};
use super::AutodiffError;
use crate::linalg::CMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { x: Var, w: Var },
    AddBias { x: Var, b: Var },
    MulBias { x: Var, g: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    Pow(Var, f64),
    Ln(Var),
    SumLast(Var),
    MeanAll(Var),
    MulRows { x: Var, s: Var },
    MulScalar { x: Var, s: Var },
    Reshape(Var),
    Gather { x: Var, src: Arc<[usize]>, sign: Option<Arc<[f64]>> },
    LayerNorm { x: Var, inv_std: Vec<f64> },
    BatchNorm { x: Var, inv_std: Vec<f64> },
    Bmm { a: Var, b: Var, batch: usize, n: usize, k: usize, p: usize },
    CBmm { a: Var, b: Var, batch: usize, n: usize, k: usize, p: usize },
    CSolve { a: Var, b: Var, batch: usize, n: usize, p: usize },
    SignSte(Var),
    BceLogits { z: Var, labels: Arc<[u8]> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by [`Var`].
#[derive(Debug)]
pub struct Grads {
    g: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.g.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.g.get_mut(v.0).and_then(|g| g.take())
    }
}

fn shape_err(node: &str, detail: String) -> AutodiffError {
    AutodiffError::Shape { node: node.into(), detail }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Constant leaf (no gradient is propagated into it).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that records a gradient, e.g. a model input whose gradient is
    /// chained into an upstream module.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var, AutodiffError> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if ws.len() != 2 || xs.last() != Some(&ws[0]) {
            return Err(shape_err("matmul", format!("{xs:?} x {ws:?}")));
        }
        let (k, n) = (ws[0], ws[1]);
        let rows = self.value(x).len() / k.max(1);
        let mut out = vec![0.0; rows * n];
        gemm(self.value(x).data(), false, self.value(w).data(), false, &mut out, rows, k, n, false);
        let mut shape = xs;
        *shape.last_mut().unwrap() = n;
        let ng = self.ng(x) || self.ng(w);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul { x, w }, ng))
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var, AutodiffError> {
        let n = self.value(x).last_dim();
        if self.value(b).len() != n {
            return Err(shape_err("add_bias", format!("{:?} + {:?}", self.shape(x), self.shape(b))));
        }
        let bv = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, bb) in row.iter_mut().zip(&bv) {
                *o += bb;
            }
        }
        let ng = self.ng(x) || self.ng(b);
        Ok(self.push(out, Op::AddBias { x, b }, ng))
    }

    pub fn mul_bias(&mut self, x: Var, g: Var) -> Result<Var, AutodiffError> {
        let n = self.value(x).last_dim();
        if self.value(g).len() != n {
            return Err(shape_err("mul_bias", format!("{:?} * {:?}", self.shape(x), self.shape(g))));
        }
        let gv = self.value(g).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, gg) in row.iter_mut().zip(&gv) {
                *o *= gg;
            }
        }
        let ng = self.ng(x) || self.ng(g);
        Ok(self.push(out, Op::MulBias { x, g }, ng))
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, AutodiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.len() != tb.len() {
            return Err(shape_err(name, format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x).map(|v| v * c);
        let ng = self.ng(x);
        self.push(t, Op::Scale(x, c), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(0.0));
        let ng = self.ng(x);
        self.push(t, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(sigmoid);
        let ng = self.ng(x);
        self.push(t, Op::Sigmoid(x), ng)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut t = self.value(x).clone();
        let n = t.last_dim();
        for row in t.data_mut().chunks_mut(n) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let ng = self.ng(x);
        self.push(t, Op::Softmax(x), ng)
    }

    pub fn pow(&mut self, x: Var, p: f64) -> Var {
        let t = self.value(x).map(|v| v.powf(p));
        let ng = self.ng(x);
        self.push(t, Op::Pow(x, p), ng)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::ln);
        let ng = self.ng(x);
        self.push(t, Op::Ln(x), ng)
    }

    /// Sum over the last axis; drops it (a 1-D input yields shape `[1]`).
    pub fn sum_last(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let n = tx.last_dim().max(1);
        let data: Vec<f64> = tx.data().chunks(n).map(|c| c.iter().sum()).collect();
        let mut shape = tx.shape().to_vec();
        shape.pop();
        if shape.is_empty() {
            shape.push(1);
        }
        let ng = self.ng(x);
        self.push(Tensor::new(shape, data).expect("sum_last shape"), Op::SumLast(x), ng)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let m = tx.sum() / tx.len().max(1) as f64;
        let ng = self.ng(x);
        self.push(Tensor::scalar(m), Op::MeanAll(x), ng)
    }

    /// `x[r, :] * s[r]` with `x` viewed as `[len(s), -1]`.
    pub fn mul_rows(&mut self, x: Var, s: Var) -> Result<Var, AutodiffError> {
        let (tx, ts) = (self.value(x), self.value(s));
        let rows = ts.len();
        if rows == 0 || tx.len() % rows != 0 {
            return Err(shape_err("mul_rows", format!("{:?} by {:?}", tx.shape(), ts.shape())));
        }
        let w = tx.len() / rows;
        let mut out = tx.clone();
        for (row, &sv) in out.data_mut().chunks_mut(w).zip(ts.data()) {
            row.iter_mut().for_each(|v| *v *= sv);
        }
        let ng = self.ng(x) || self.ng(s);
        Ok(self.push(out, Op::MulRows { x, s }, ng))
    }

    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var, AutodiffError> {
        if self.value(s).len() != 1 {
            return Err(shape_err("mul_scalar", format!("{:?}", self.shape(s))));
        }
        let sv = self.value(s).data()[0];
        let t = self.value(x).map(|v| v * sv);
        let ng = self.ng(x) || self.ng(s);
        Ok(self.push(t, Op::MulScalar { x, s }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, AutodiffError> {
        let t = self.value(x).clone().reshaped(shape)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    /// `out[i] = sign[i] * x[src[i]]`.
    pub fn gather(
        &mut self,
        x: Var,
        shape: Vec<usize>,
        src: Arc<[usize]>,
        sign: Option<Arc<[f64]>>,
    ) -> Result<Var, AutodiffError> {
        let n: usize = shape.iter().product();
        let xv = self.value(x).data();
        if src.len() != n || sign.as_ref().is_some_and(|s| s.len() != n) || src.iter().any(|&i| i >= xv.len()) {
            return Err(shape_err("gather", format!("{n} outputs from {} inputs", xv.len())));
        }
        let data: Vec<f64> = match &sign {
            Some(sg) => src.iter().zip(sg.iter()).map(|(&i, &s)| s * xv[i]).collect(),
            None => src.iter().map(|&i| xv[i]).collect(),
        };
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::Gather { x, src, sign }, ng))
    }

    /// Axis permutation (like `transpose` with an explicit order).
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var, AutodiffError> {
        let shape = self.shape(x).to_vec();
        if axes.len() != shape.len() {
            return Err(shape_err("permute", format!("{axes:?} on {shape:?}")));
        }
        let (out_shape, src) = permutation_index(&shape, axes);
        self.gather(x, out_shape, src.into(), None)
    }

    /// Normalizes the last axis to zero mean / unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let mut t = self.value(x).clone();
        let n = t.last_dim();
        let mut inv_std = Vec::with_capacity(t.rows());
        for row in t.data_mut().chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
            inv_std.push(inv);
        }
        let ng = self.ng(x);
        self.push(t, Op::LayerNorm { x, inv_std }, ng)
    }

    /// Normalizes each feature (last axis) over all rows using batch
    /// statistics (no affine). Returns the output and the per-feature batch
    /// mean and biased variance.
    pub fn batch_norm(&mut self, x: Var, eps: f64) -> (Var, Vec<f64>, Vec<f64>) {
        let mut t = self.value(x).clone();
        let n = t.last_dim();
        let rows = t.rows();
        let mut mean = vec![0.0; n];
        for row in t.data().chunks(n) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut var = vec![0.0; n];
        for row in t.data().chunks(n) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= rows as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        for row in t.data_mut().chunks_mut(n) {
            for ((v, m), i) in row.iter_mut().zip(&mean).zip(&inv_std) {
                *v = (*v - m) * i;
            }
        }
        let ng = self.ng(x);
        (self.push(t, Op::BatchNorm { x, inv_std }, ng), mean, var)
    }

    /// Batched real matmul `[B,n,k] x [B,k,p] -> [B,n,p]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(shape_err("bmm", format!("{sa:?} x {sb:?}")));
        }
        let (batch, n, k, p) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; batch * n * p];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            gemm(
                &av[i * n * k..(i + 1) * n * k],
                false,
                &bv[i * k * p..(i + 1) * k * p],
                false,
                &mut out[i * n * p..(i + 1) * n * p],
                n,
                k,
                p,
                false,
            );
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![batch, n, p], out)?, Op::Bmm { a, b, batch, n, k, p }, ng))
    }

    /// Batched complex matmul `[B,n,k,2] x [B,k,p,2] -> [B,n,p,2]`.
    pub fn cbmm(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 4 || sb.len() != 4 || sa[3] != 2 || sb[3] != 2 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(shape_err("cbmm", format!("{sa:?} x {sb:?}")));
        }
        let (batch, n, k, p) = (sa[0], sa[1], sa[2], sb[2]);
        let out = cbmm_raw(self.value(a).data(), false, self.value(b).data(), false, batch, n, k, p);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![batch, n, p, 2], out)?, Op::CBmm { a, b, batch, n, k, p }, ng))
    }

    /// Batched complex solve `X = A^{-1} B` for `A: [B,n,n,2]`, `B: [B,n,p,2]`.
    pub fn csolve(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 4 || sb.len() != 4 || sa[1] != sa[2] || sa[0] != sb[0] || sb[1] != sa[1] || sa[3] != 2 || sb[3] != 2 {
            return Err(shape_err("csolve", format!("{sa:?} \\ {sb:?}")));
        }
        let (batch, n, p) = (sa[0], sa[1], sb[2]);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; batch * n * p * 2];
        for i in 0..batch {
            let am = to_cmatrix(&av[i * n * n * 2..(i + 1) * n * n * 2], n, n);
            let bm = to_cmatrix(&bv[i * n * p * 2..(i + 1) * n * p * 2], n, p);
            let x = am.solve(&bm).map_err(|_| AutodiffError::Numerical("singular system in csolve".into()))?;
            write_cmatrix(&x, &mut out[i * n * p * 2..(i + 1) * n * p * 2]);
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![batch, n, p, 2], out)?, Op::CSolve { a, b, batch, n, p }, ng))
    }

    /// Sign quantizer with straight-through gradient.
    pub fn sign_ste(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| if v >= 0.0 { 1.0 } else { -1.0 });
        let ng = self.ng(x);
        self.push(t, Op::SignSte(x), ng)
    }

    /// Mean binary cross-entropy of LLRs `z` (positive favours bit 0)
    /// against `labels`, in nats.
    pub fn bce_logits(&mut self, z: Var, labels: Arc<[u8]>) -> Result<Var, AutodiffError> {
        let tz = self.value(z);
        if tz.len() != labels.len() {
            return Err(shape_err("bce", format!("{} llrs, {} labels", tz.len(), labels.len())));
        }
        let n = tz.len().max(1) as f64;
        let s: f64 = tz
            .data()
            .iter()
            .zip(labels.iter())
            .map(|(&l, &c)| if c != 0 { softplus(l) } else { softplus(-l) })
            .sum();
        let ng = self.ng(z);
        Ok(self.push(Tensor::scalar(s / n), Op::BceLogits { z, labels }, ng))
    }

    /// Reverse pass from a scalar.
    pub fn backward(&self, out: Var) -> Result<Grads, AutodiffError> {
        let seed = Tensor::filled(self.shape(out), 1.0);
        self.backward_with(out, seed)
    }

    /// Reverse pass seeded with an explicit output gradient.
    pub fn backward_with(&self, out: Var, seed: Tensor) -> Result<Grads, AutodiffError> {
        if seed.len() != self.value(out).len() {
            return Err(shape_err("backward", format!("seed {:?} for output {:?}", seed.shape(), self.shape(out))));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed.reshaped(self.shape(out).to_vec())?);
        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            self.pullback(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Grads { g: grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => {
                let shape = self.nodes[v.0].value.shape().to_vec();
                *slot = Some(g.reshaped(shape).expect("gradient size matches value"));
            }
        }
    }

    fn pullback(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<(), AutodiffError> {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { x, w } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (k, n) = (tw.shape()[0], tw.shape()[1]);
                let rows = tx.len() / k.max(1);
                if self.ng(*x) {
                    let mut dx = vec![0.0; rows * k];
                    gemm(g.data(), false, tw.data(), true, &mut dx, rows, n, k, false);
                    self.acc(grads, *x, Tensor::from_vec(dx));
                }
                if self.ng(*w) {
                    let mut dw = vec![0.0; k * n];
                    gemm(tx.data(), true, g.data(), false, &mut dw, k, rows, n, false);
                    self.acc(grads, *w, Tensor::from_vec(dw));
                }
            }
            Op::AddBias { x, b } => {
                self.acc(grads, *x, g.clone());
                if self.ng(*b) {
                    let n = g.last_dim();
                    let mut db = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.acc(grads, *b, Tensor::from_vec(db));
                }
            }
            Op::MulBias { x, g: gain } => {
                let n = g.last_dim();
                let gv = self.value(*gain).data();
                if self.ng(*x) {
                    let mut dx = g.clone();
                    for row in dx.data_mut().chunks_mut(n) {
                        for (d, s) in row.iter_mut().zip(gv) {
                            *d *= s;
                        }
                    }
                    self.acc(grads, *x, dx);
                }
                if self.ng(*gain) {
                    let mut dg = vec![0.0; n];
                    for (grow, xrow) in g.data().chunks(n).zip(self.value(*x).data().chunks(n)) {
                        for ((d, a), b) in dg.iter_mut().zip(grow).zip(xrow) {
                            *d += a * b;
                        }
                    }
                    self.acc(grads, *gain, Tensor::from_vec(dg));
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let d = g.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                    self.acc(grads, *a, Tensor::from_vec(d));
                }
                if self.ng(*b) {
                    let d = g.data().iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                    self.acc(grads, *b, Tensor::from_vec(d));
                }
            }
            Op::Scale(x, c) => self.acc(grads, *x, g.map(|v| v * c)),
            Op::Relu(x) => {
                let d = g.data().iter().zip(y.data()).map(|(gv, yv)| if *yv > 0.0 { *gv } else { 0.0 }).collect();
                self.acc(grads, *x, Tensor::from_vec(d));
            }
            Op::Sigmoid(x) => {
                let d = g.data().iter().zip(y.data()).map(|(gv, yv)| gv * yv * (1.0 - yv)).collect();
                self.acc(grads, *x, Tensor::from_vec(d));
            }
            Op::Softmax(x) => {
                let n = y.last_dim();
                let mut d = vec![0.0; y.len()];
                for ((drow, grow), yrow) in d.chunks_mut(n).zip(g.data().chunks(n)).zip(y.data().chunks(n)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for ((dv, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                        *dv = yv * (gv - dot);
                    }
                }
                self.acc(grads, *x, Tensor::from_vec(d));
            }
            Op::Pow(x, p) => {
                let tx = self.value(*x);
                let d = g.data().iter().zip(tx.data()).map(|(gv, xv)| gv * p * xv.powf(p - 1.0)).collect();
                self.acc(grads, *x, Tensor::from_vec(d));
            }
            Op::Ln(x) => {
                let tx = self.value(*x);
                let d = g.data().iter().zip(tx.data()).map(|(gv, xv)| gv / xv).collect();
                self.acc(grads, *x, Tensor::from_vec(d));
            }
            Op::SumLast(x) => {
                let tx = self.value(*x);
                let n = tx.last_dim().max(1);
                let mut d = vec![0.0; tx.len()];
                for (drow, gv) in d.chunks_mut(n).zip(g.data()) {
                    drow.iter_mut().for_each(|v| *v = *gv);
                }
                self.acc(grads, *x, Tensor::from_vec(d));
            }
            Op::MeanAll(x) => {
                let tx = self.value(*x);
                let v = g.data()[0] / tx.len().max(1) as f64;
                self.acc(grads, *x, Tensor::filled(&[tx.len()], v));
            }
            Op::MulRows { x, s } => {
                let (tx, ts) = (self.value(*x), self.value(*s));
                let w = tx.len() / ts.len();
                if self.ng(*x) {
                    let mut d = g.clone();
                    for (row, sv) in d.data_mut().chunks_mut(w).zip(ts.data()) {
                        row.iter_mut().for_each(|v| *v *= sv);
                    }
                    self.acc(grads, *x, d);
                }
                if self.ng(*s) {
                    let d = g
                        .data()
                        .chunks(w)
                        .zip(tx.data().chunks(w))
                        .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                        .collect();
                    self.acc(grads, *s, Tensor::from_vec(d));
                }
            }
            Op::MulScalar { x, s } => {
                let sv = self.value(*s).data()[0];
                if self.ng(*x) {
                    self.acc(grads, *x, g.map(|v| v * sv));
                }
                if self.ng(*s) {
                    let d: f64 = g.data().iter().zip(self.value(*x).data()).map(|(a, b)| a * b).sum();
                    self.acc(grads, *s, Tensor::scalar(d));
                }
            }
            Op::Reshape(x) => self.acc(grads, *x, g.clone()),
            Op::Gather { x, src, sign } => {
                let mut d = vec![0.0; self.value(*x).len()];
                match sign {
                    Some(sg) => {
                        for ((&i, &s), gv) in src.iter().zip(sg.iter()).zip(g.data()) {
                            d[i] += s * gv;
                        }
                    }
                    None => {
                        for (&i, gv) in src.iter().zip(g.data()) {
                            d[i] += gv;
                        }
                    }
                }
                self.acc(grads, *x, Tensor::from_vec(d));
            }
            Op::LayerNorm { x, inv_std } => {
                let n = y.last_dim();
                let mut d = vec![0.0; y.len()];
                for (((drow, grow), yrow), inv) in
                    d.chunks_mut(n).zip(g.data().chunks(n)).zip(y.data().chunks(n)).zip(inv_std)
                {
                    let mg = grow.iter().sum::<f64>() / n as f64;
                    let mgy = grow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for ((dv, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                        *dv = inv * (gv - mg - yv * mgy);
                    }
                }
                self.acc(grads, *x, Tensor::from_vec(d));
            }
            Op::BatchNorm { x, inv_std } => {
                let n = y.last_dim();
                let rows = y.rows() as f64;
                let mut mg = vec![0.0; n];
                let mut mgy = vec![0.0; n];
                for (grow, yrow) in g.data().chunks(n).zip(y.data().chunks(n)) {
                    for j in 0..n {
                        mg[j] += grow[j];
                        mgy[j] += grow[j] * yrow[j];
                    }
                }
                mg.iter_mut().for_each(|v| *v /= rows);
                mgy.iter_mut().for_each(|v| *v /= rows);
                let mut d = vec![0.0; y.len()];
                for ((drow, grow), yrow) in d.chunks_mut(n).zip(g.data().chunks(n)).zip(y.data().chunks(n)) {
                    for j in 0..n {
                        drow[j] = inv_std[j] * (grow[j] - mg[j] - yrow[j] * mgy[j]);
                    }
                }
                self.acc(grads, *x, Tensor::from_vec(d));
            }
            Op::Bmm { a, b, batch, n, k, p } => {
                let (batch, n, k, p) = (*batch, *n, *k, *p);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.ng(*a) {
                    let mut da = vec![0.0; batch * n * k];
                    for i in 0..batch {
                        gemm(
                            &g.data()[i * n * p..(i + 1) * n * p],
                            false,
                            &bv[i * k * p..(i + 1) * k * p],
                            true,
                            &mut da[i * n * k..(i + 1) * n * k],
                            n,
                            p,
                            k,
                            false,
                        );
                    }
                    self.acc(grads, *a, Tensor::from_vec(da));
                }
                if self.ng(*b) {
                    let mut db = vec![0.0; batch * k * p];
                    for i in 0..batch {
                        gemm(
                            &av[i * n * k..(i + 1) * n * k],
                            true,
                            &g.data()[i * n * p..(i + 1) * n * p],
                            false,
                            &mut db[i * k * p..(i + 1) * k * p],
                            k,
                            n,
                            p,
                            false,
                        );
                    }
                    self.acc(grads, *b, Tensor::from_vec(db));
                }
            }
            Op::CBmm { a, b, batch, n, k, p } => {
                let (batch, n, k, p) = (*batch, *n, *k, *p);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.ng(*a) {
                    // dA = G B^H
                    let da = cbmm_raw(g.data(), false, bv, true, batch, n, p, k);
                    self.acc(grads, *a, Tensor::from_vec(da));
                }
                if self.ng(*b) {
                    // dB = A^H G
                    let db = cbmm_raw(av, true, g.data(), false, batch, k, n, p);
                    self.acc(grads, *b, Tensor::from_vec(db));
                }
            }
            Op::CSolve { a, b, batch, n, p } => {
                let (batch, n, p) = (*batch, *n, *p);
                let av = self.value(*a).data();
                let xv = y.data();
                let mut gb = vec![0.0; batch * n * p * 2];
                for i in 0..batch {
                    let am = to_cmatrix(&av[i * n * n * 2..(i + 1) * n * n * 2], n, n);
                    let gx = to_cmatrix(&g.data()[i * n * p * 2..(i + 1) * n * p * 2], n, p);
                    let sol = am
                        .adjoint()
                        .solve(&gx)
                        .map_err(|_| AutodiffError::Numerical("singular system in csolve pullback".into()))?;
                    write_cmatrix(&sol, &mut gb[i * n * p * 2..(i + 1) * n * p * 2]);
                }
                if self.ng(*a) {
                    // dA = -dB X^H
                    let mut da = cbmm_raw(&gb, false, xv, true, batch, n, p, n);
                    da.iter_mut().for_each(|v| *v = -*v);
                    self.acc(grads, *a, Tensor::from_vec(da));
                }
                self.acc(grads, *b, Tensor::from_vec(gb));
            }
            Op::SignSte(x) => self.acc(grads, *x, g.clone()),
            Op::BceLogits { z, labels } => {
                let tz = self.value(*z);
                let scale = g.data()[0] / tz.len().max(1) as f64;
                let d = tz
                    .data()
                    .iter()
                    .zip(labels.iter())
                    .map(|(&l, &c)| scale * (sigmoid(l) - if c != 0 { 0.0 } else { 1.0 }))
                    .collect();
                self.acc(grads, *z, Tensor::from_vec(d));
            }
        }
        Ok(())
    }
}

/// Output shape and flat source index for an axis permutation.
pub fn permutation_index(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let nd = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut in_strides = vec![1usize; nd];
    for d in (0..nd.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let total: usize = shape.iter().product();
    let mut src = Vec::with_capacity(total);
    let mut idx = vec![0usize; nd];
    for _ in 0..total {
        src.push(idx.iter().zip(axes).map(|(&i, &a)| i * in_strides[a]).sum());
        for d in (0..nd).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out_shape, src)
}

/// Complex batched product with optional conjugate transposes of the
/// operands. `a` is `[B,n,k]` (or `[B,k,n]` when `adj_a`), `b` is `[B,k,p]`
/// (or `[B,p,k]` when `adj_b`), both with trailing (re, im).
#[allow(clippy::too_many_arguments)]
pub(crate) fn cbmm_raw(a: &[f64], adj_a: bool, b: &[f64], adj_b: bool, batch: usize, n: usize, k: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; batch * n * p * 2];
    for bi in 0..batch {
        let ab = &a[bi * n * k * 2..(bi + 1) * n * k * 2];
        let bb = &b[bi * k * p * 2..(bi + 1) * k * p * 2];
        let ob = &mut out[bi * n * p * 2..(bi + 1) * n * p * 2];
        for i in 0..n {
            for kk in 0..k {
                let (ar, ai) = if adj_a {
                    let o = (kk * n + i) * 2;
                    (ab[o], -ab[o + 1])
                } else {
                    let o = (i * k + kk) * 2;
                    (ab[o], ab[o + 1])
                };
                if ar == 0.0 && ai == 0.0 {
                    continue;
                }
                for j in 0..p {
                    let (br, bim) = if adj_b {
                        let o = (j * k + kk) * 2;
                        (bb[o], -bb[o + 1])
                    } else {
                        let o = (kk * p + j) * 2;
                        (bb[o], bb[o + 1])
                    };
                    let o = (i * p + j) * 2;
                    ob[o] += ar * br - ai * bim;
                    ob[o + 1] += ar * bim + ai * br;
                }
            }
        }
    }
    out
}

pub(crate) fn to_cmatrix(v: &[f64], rows: usize, cols: usize) -> CMatrix<f64> {
    CMatrix::from_fn(rows, cols, |r, c| {
        let o = (r * cols + c) * 2;
        Complex64::new(v[o], v[o + 1])
    })
}

pub(crate) fn write_cmatrix(m: &CMatrix<f64>, out: &mut [f64]) {
    for (i, z) in m.as_slice().iter().enumerate() {
        out[2 * i] = z.re;
        out[2 * i + 1] = z.im;
    }
}
