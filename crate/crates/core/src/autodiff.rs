//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every primitive as it is evaluated. Nodes only ever
//! reference earlier nodes, so the record is already in topological order and
//! [`Graph::backward`] is a single reverse sweep that visits each node once.
//! Graphs are cheap to build and are thrown away after each step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{matmul_at_into, matmul_bt_into, Tensor};

/// Variance floor used by batch normalization.
pub const BATCHNORM_EPS: f64 = 1e-5;

/// Probabilities fed to the Bernoulli log-likelihood are clamped to
/// `[BERNOULLI_CLAMP, 1 - BERNOULLI_CLAMP]`.
pub const BERNOULLI_CLAMP: f64 = 1e-7;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Softplus,
    Sigmoid,
    Relu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Softplus => softplus(x),
            Activation::Sigmoid => sigmoid(x),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative given the input `x` and the output `y = apply(x)`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Softplus => sigmoid(x),
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// `log(1 + exp(x))`, returning `x` itself once `x > 30`.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Batch statistics produced by a train-mode batch normalization node.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    /// Biased (1/N) batch variance.
    pub var: Vec<f64>,
    pub count: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Act(Var, Activation),
    Exp(Var),
    Ln(Var),
    Square(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        /// Train mode propagates through the batch statistics; eval mode
        /// treats them as constants.
        batch_stats: bool,
    },
    Sum(Var),
    SumRows(Var),
    BernoulliLogLik {
        probs: Var,
        target: Tensor,
    },
    LogSoftmax(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation. See the module docs.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[v.0]),
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
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

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    /// Adds a `[n]` row vector to every row of a `[batch, n]` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let av = self.value(a);
        let rv = self.value(row);
        let (_, n) = av.expect_matrix("add_row")?;
        if rv.shape() != [n] {
            return Err(Error::Shape {
                op: "add_row",
                lhs: av.shape().to_vec(),
                rhs: rv.shape().to_vec(),
            });
        }
        let mut data = av.data().to_vec();
        for chunk in data.chunks_exact_mut(n) {
            for (x, b) in chunk.iter_mut().zip(rv.data()) {
                *x += b;
            }
        }
        let value = Tensor::from_parts(av.shape().to_vec(), data);
        let ng = self.needs(a) || self.needs(row);
        Ok(self.push(value, Op::AddRow(a, row), ng))
    }

    /// `x · W + b` for `x: [batch, in]`, `W: [in, out]`, `b: [out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (_, xin) = self.value(x).expect_matrix("affine")?;
        let (win, _) = self.value(w).expect_matrix("affine")?;
        if xin != win {
            return Err(Error::Shape {
                op: "affine",
                lhs: self.value(x).shape().to_vec(),
                rhs: self.value(w).shape().to_vec(),
            });
        }
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        let ng = self.needs(a);
        self.push(value, Op::Scale(a, c), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        let ng = self.needs(a);
        self.push(value, Op::AddScalar(a), ng)
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Var {
        let value = self.value(a).map(|x| kind.apply(x));
        let ng = self.needs(a);
        self.push(value, Op::Act(a, kind), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        let ng = self.needs(a);
        self.push(value, Op::Exp(a), ng)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        let ng = self.needs(a);
        self.push(value, Op::Ln(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        let ng = self.needs(a);
        self.push(value, Op::Square(a), ng)
    }

    /// Sum of all entries, as a `[1]` scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let ng = self.needs(a);
        self.push(value, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Row sums of a `[batch, n]` matrix, giving a `[batch]` vector.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (r, _) = av.expect_matrix("sum_rows")?;
        let value = Tensor::from_parts(vec![r], av.row_sums());
        let ng = self.needs(a);
        Ok(self.push(value, Op::SumRows(a), ng))
    }

    /// Batch normalization using the statistics of the batch itself.
    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, BatchMoments)> {
        let (rows, d) = self.check_batchnorm(x, gamma, beta)?;
        if rows < 2 {
            return Err(Error::BatchTooSmall(rows));
        }
        let xv = self.value(x);
        let mean: Vec<f64> = xv.column_sums().into_iter().map(|s| s / rows as f64).collect();
        let mut var = vec![0.0; d];
        for row in xv.data().chunks_exact(d) {
            for j in 0..d {
                let c = row[j] - mean[j];
                var[j] += c * c;
            }
        }
        for v in &mut var {
            *v /= rows as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCHNORM_EPS).sqrt()).collect();
        let out = self.batchnorm_node(x, gamma, beta, &mean, inv_std, true);
        Ok((
            out,
            BatchMoments {
                mean,
                var,
                count: rows,
            },
        ))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
    ) -> Result<Var> {
        let (_, d) = self.check_batchnorm(x, gamma, beta)?;
        if mean.len() != d || var.len() != d {
            return Err(Error::Shape {
                op: "batchnorm",
                lhs: vec![d],
                rhs: vec![mean.len(), var.len()],
            });
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCHNORM_EPS).sqrt()).collect();
        Ok(self.batchnorm_node(x, gamma, beta, mean, inv_std, false))
    }

    fn check_batchnorm(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize)> {
        let (rows, d) = self.value(x).expect_matrix("batchnorm")?;
        for p in [gamma, beta] {
            if self.value(p).shape() != [d] {
                return Err(Error::Shape {
                    op: "batchnorm",
                    lhs: self.value(x).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
        }
        Ok((rows, d))
    }

    fn batchnorm_node(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: Vec<f64>,
        batch_stats: bool,
    ) -> Var {
        let xv = self.value(x);
        let d = mean.len();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = Vec::with_capacity(xv.len());
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks_exact(d) {
            for j in 0..d {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), out);
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            ng,
        )
    }

    /// Per-row Bernoulli log-likelihood `Σ_d t log p + (1-t) log(1-p)` with
    /// clamped probabilities. `target` must lie in `[0, 1]`.
    pub fn bernoulli_log_likelihood(&mut self, probs: Var, target: &Tensor) -> Result<Var> {
        let pv = self.value(probs);
        pv.expect_same_shape(target, "bernoulli_log_likelihood")?;
        let (r, d) = pv.expect_matrix("bernoulli_log_likelihood")?;
        if target.data().iter().any(|&t| !(0.0..=1.0).contains(&t)) {
            return Err(Error::Input("Bernoulli targets must lie in [0, 1]".into()));
        }
        let mut out = Vec::with_capacity(r);
        for (prow, trow) in pv.data().chunks_exact(d).zip(target.data().chunks_exact(d)) {
            let mut s = 0.0;
            for (&p, &t) in prow.iter().zip(trow) {
                let p = p.clamp(BERNOULLI_CLAMP, 1.0 - BERNOULLI_CLAMP);
                s += t * p.ln() + (1.0 - t) * (1.0 - p).ln();
            }
            out.push(s);
        }
        let value = Tensor::from_parts(vec![r], out);
        let ng = self.needs(probs);
        Ok(self.push(
            value,
            Op::BernoulliLogLik {
                probs,
                target: target.clone(),
            },
            ng,
        ))
    }

    /// Row-wise log-softmax of a `[batch, k]` matrix.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (_, k) = av.expect_matrix("log_softmax")?;
        let mut out = Vec::with_capacity(av.len());
        for row in av.data().chunks_exact(k) {
            let lse = crate::tensor::log_sum_exp(row)?;
            out.extend(row.iter().map(|x| x - lse));
        }
        let value = Tensor::from_parts(av.shape().to_vec(), out);
        let ng = self.needs(a);
        Ok(self.push(value, Op::LogSoftmax(a), ng))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lv.shape()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    matmul_bt_into(gd, bv.data(), &mut da, m, n, k);
                    self.accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * n];
                    matmul_at_into(av.data(), gd, &mut db, m, k, n);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::AddRow(a, row) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, gd.to_vec());
                }
                if self.needs(*row) {
                    self.accumulate(grads, *row, g.column_sums());
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, gd.to_vec());
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, gd.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, gd.to_vec());
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, gd.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.needs(*a) {
                    self.accumulate(grads, *a, gd.iter().zip(bv).map(|(g, b)| g * b).collect());
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, gd.iter().zip(av).map(|(g, a)| g * a).collect());
                }
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, gd.iter().map(|v| v * c).collect());
            }
            Op::AddScalar(a) => {
                self.accumulate(grads, *a, gd.to_vec());
            }
            Op::Act(a, kind) => {
                let x = self.value(*a).data();
                let y = node.value.data();
                let d = gd
                    .iter()
                    .zip(x.iter().zip(y))
                    .map(|(g, (&x, &y))| g * kind.derivative(x, y))
                    .collect();
                self.accumulate(grads, *a, d);
            }
            Op::Exp(a) => {
                let y = node.value.data();
                self.accumulate(grads, *a, gd.iter().zip(y).map(|(g, y)| g * y).collect());
            }
            Op::Ln(a) => {
                let x = self.value(*a).data();
                self.accumulate(grads, *a, gd.iter().zip(x).map(|(g, x)| g / x).collect());
            }
            Op::Square(a) => {
                let x = self.value(*a).data();
                self.accumulate(grads, *a, gd.iter().zip(x).map(|(g, x)| 2.0 * g * x).collect());
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let d = inv_std.len();
                let rows = gd.len() / d;
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for (grow, hrow) in gd.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                    for j in 0..d {
                        dgamma[j] += grow[j] * hrow[j];
                        dbeta[j] += grow[j];
                    }
                }
                if self.needs(*x) {
                    let mut dx = vec![0.0; gd.len()];
                    if *batch_stats {
                        // dxhat = g·γ; dx = inv_std/N · (N·dxhat − Σdxhat − xhat·Σ(dxhat·xhat))
                        let n = rows as f64;
                        for j in 0..d {
                            let sum_dxhat = dbeta[j] * gam[j];
                            let sum_dxhat_xhat = dgamma[j] * gam[j];
                            for i in 0..rows {
                                let dxhat = gd[i * d + j] * gam[j];
                                dx[i * d + j] = inv_std[j] / n
                                    * (n * dxhat - sum_dxhat - xhat[i * d + j] * sum_dxhat_xhat);
                            }
                        }
                    } else {
                        for i in 0..rows {
                            for j in 0..d {
                                dx[i * d + j] = gd[i * d + j] * gam[j] * inv_std[j];
                            }
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.needs(*gamma) {
                    self.accumulate(grads, *gamma, dgamma);
                }
                if self.needs(*beta) {
                    self.accumulate(grads, *beta, dbeta);
                }
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, vec![gd[0]; n]);
            }
            Op::SumRows(a) => {
                let av = self.value(*a);
                let c = av.cols();
                let mut d = Vec::with_capacity(av.len());
                for &gi in gd {
                    d.extend(std::iter::repeat_n(gi, c));
                }
                self.accumulate(grads, *a, d);
            }
            Op::BernoulliLogLik { probs, target } => {
                let pv = self.value(*probs);
                let c = pv.cols();
                let mut d = Vec::with_capacity(pv.len());
                for (i, (prow, trow)) in pv
                    .data()
                    .chunks_exact(c)
                    .zip(target.data().chunks_exact(c))
                    .enumerate()
                {
                    for (&p, &t) in prow.iter().zip(trow) {
                        if p <= BERNOULLI_CLAMP || p >= 1.0 - BERNOULLI_CLAMP {
                            d.push(0.0);
                        } else {
                            d.push(gd[i] * (t / p - (1.0 - t) / (1.0 - p)));
                        }
                    }
                }
                self.accumulate(grads, *probs, d);
            }
            Op::LogSoftmax(a) => {
                let y = node.value.data();
                let k = node.value.cols();
                let mut d = Vec::with_capacity(y.len());
                for (grow, yrow) in gd.chunks_exact(k).zip(y.chunks_exact(k)) {
                    let gsum: f64 = grow.iter().sum();
                    d.extend(grow.iter().zip(yrow).map(|(g, y)| g - y.exp() * gsum));
                }
                self.accumulate(grads, *a, d);
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Vec<f64>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(delta) {
                    *e += d;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::from_parts(self.value(v).shape().to_vec(), delta));
            }
        }
    }
}
