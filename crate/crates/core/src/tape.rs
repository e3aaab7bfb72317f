//! Reverse-mode gradient tape.
//!
//! A [`Tape`] borrows a [`ParameterSet`], records every primitive executed in
//! the forward pass, and replays them in reverse in [`Tape::backward`].
//! Parameters are read in place; each use of a parameter is its own leaf node,
//! so the backward pass accumulates exactly once per use into the matching
//! slot of a [`Gradients`] buffer.

use crate::error::{Error, Result};
use crate::kernels::{self, LayerNormCache};
use crate::params::{ParamId, ParameterSet};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Gradient buffers aligned with a [`ParameterSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(params: &ParameterSet) -> Self {
        Self {
            tensors: params.zeros_like(),
        }
    }

    pub fn zero(&mut self) {
        for t in &mut self.tensors {
            t.fill(0.0);
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id]
    }

    pub fn norm(&self, id: ParamId) -> f64 {
        self.tensors[id].sum_squares().sqrt()
    }
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Scale(Var, f64),
    MatMulNt(Var, Var),
    MatMul(Var, Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        cache: LayerNormCache,
    },
    Gelu(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    SelectRow(Var, usize),
}

#[derive(Debug)]
struct Node {
    // `None` for parameter leaves, whose value lives in the borrowed set.
    value: Option<Tensor>,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p ParameterSet,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParameterSet) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn params(&self) -> &'p ParameterSet {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.tensor(*id),
            _ => unreachable!("only parameter leaves borrow their value"),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let out = kernels::linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        Ok(self.push(out, Op::Linear { x, w, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Dimension(format!(
                "add of {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * c).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Scale(x, c))
    }

    /// `a · bᵀ` for matrices `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
        if tb.cols() != k {
            return Err(Error::Dimension(format!(
                "a·bᵀ with a {:?} and b {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let out = Tensor::new(
            vec![m, n],
            kernels::matmul_nt(ta.data(), tb.data(), m, n, k),
        )?;
        Ok(self.push(out, Op::MatMulNt(a, b)))
    }

    /// `a · b` for matrices `a: [m, k]`, `b: [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        if tb.rows() != k {
            return Err(Error::Dimension(format!(
                "a·b with a {:?} and b {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let out = Tensor::new(vec![m, n], kernels::matmul(ta.data(), tb.data(), m, n, k))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = kernels::softmax(self.value(x))?;
        Ok(self.push(out, Op::Softmax(x)))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = tx.cols();
        if d < 2 || tg.len() != d || tb.len() != d {
            return Err(Error::Dimension(format!(
                "layer norm of {:?} with gain {:?}, bias {:?}",
                tx.shape(),
                tg.shape(),
                tb.shape()
            )));
        }
        let (y, cache) = kernels::layer_norm_forward(tx.data(), tg.data(), tb.data(), d);
        let out = Tensor::new(tx.shape().to_vec(), y)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                cache,
            },
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = kernels::activation(self.value(x));
        self.push(out, Op::Gelu(x))
    }

    /// Row lookup `table[ids[i]]` for each `i`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (rows, d) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::Vocabulary { id, size: rows });
            }
            data.extend_from_slice(t.row(id));
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(Error::Dimension(
                    "concat of parts with different row counts".into(),
                ));
            }
            total += t.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn select_row(&mut self, x: Var, row: usize) -> Result<Var> {
        let t = self.value(x);
        if row >= t.rows() {
            return Err(Error::Dimension(format!("row {row} of {:?}", t.shape())));
        }
        let out = Tensor::new(vec![1, t.cols()], t.row(row).to_vec())?;
        Ok(self.push(out, Op::SelectRow(x, row)))
    }

    /// Propagates `seed · ∂output/∂·` back through the tape and accumulates the
    /// parameter adjoints into `grads`. `output` must be a single-value node.
    pub fn backward(&self, output: Var, seed: f64, grads: &mut Gradients) {
        let mut adj: Vec<Option<Vec<f64>>> = (0..=output.0).map(|_| None).collect();
        adj[output.0] = Some(vec![seed; self.value(output).len()]);

        for i in (0..=output.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Input | Op::Param(_) => {}
                Op::Linear { x, w, b } => {
                    let tw = self.value(*w);
                    let (d_out, d_in) = (tw.shape()[0], tw.shape()[1]);
                    let tx = self.value(*x);
                    if let Some(pid) = self.param_id(*w) {
                        kernels::linear_backward_weight(
                            &g,
                            tx.data(),
                            d_in,
                            d_out,
                            grads.tensors[pid].data_mut(),
                        );
                    } else {
                        let mut dw = vec![0.0; tw.len()];
                        kernels::linear_backward_weight(&g, tx.data(), d_in, d_out, &mut dw);
                        self.accumulate(&mut adj, grads, *w, dw);
                    }
                    if let Some(b) = b {
                        let mut db = vec![0.0; d_out];
                        for row in g.chunks_exact(d_out) {
                            for (acc, v) in db.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                        self.accumulate(&mut adj, grads, *b, db);
                    }
                    if self.needs_grad(*x) {
                        let dx =
                            kernels::linear_backward_input(&g, tw.data(), tx.rows(), d_in, d_out);
                        self.accumulate(&mut adj, grads, *x, dx);
                    }
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut adj, grads, *b, g.clone());
                    self.accumulate(&mut adj, grads, *a, g);
                }
                Op::Scale(x, c) => {
                    let dx = g.iter().map(|v| v * c).collect();
                    self.accumulate(&mut adj, grads, *x, dx);
                }
                Op::MatMulNt(a, b) => {
                    // c = a·bᵀ: da = dc·b, db = dcᵀ·a
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                    let da = kernels::matmul(&g, tb.data(), m, k, n);
                    let db = kernels::matmul_tn(&g, ta.data(), n, k, m);
                    self.accumulate(&mut adj, grads, *a, da);
                    self.accumulate(&mut adj, grads, *b, db);
                }
                Op::MatMul(a, b) => {
                    // c = a·b: da = dc·bᵀ, db = aᵀ·dc
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                    let da = kernels::matmul_nt(&g, tb.data(), m, k, n);
                    let db = kernels::matmul_tn(ta.data(), &g, k, n, m);
                    self.accumulate(&mut adj, grads, *a, da);
                    self.accumulate(&mut adj, grads, *b, db);
                }
                Op::Softmax(x) => {
                    let y = self.nodes[i].value.as_ref().expect("owned");
                    let dx = kernels::softmax_backward(&g, y.data(), y.cols());
                    self.accumulate(&mut adj, grads, *x, dx);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    cache,
                } => {
                    let tg = self.value(*gain);
                    let d = tg.len();
                    let mut dg = vec![0.0; d];
                    let mut dbias = vec![0.0; d];
                    let dx = kernels::layer_norm_backward(
                        &g,
                        tg.data(),
                        cache,
                        d,
                        Some(&mut dg),
                        Some(&mut dbias),
                    );
                    self.accumulate(&mut adj, grads, *gain, dg);
                    self.accumulate(&mut adj, grads, *bias, dbias);
                    self.accumulate(&mut adj, grads, *x, dx);
                }
                Op::Gelu(x) => {
                    let tx = self.value(*x);
                    let dx = g
                        .iter()
                        .zip(tx.data())
                        .map(|(gi, &xi)| gi * kernels::gelu_derivative(xi))
                        .collect();
                    self.accumulate(&mut adj, grads, *x, dx);
                }
                Op::Gather { table, ids } => {
                    let d = self.value(*table).cols();
                    if let Some(pid) = self.param_id(*table) {
                        let dst = grads.tensors[pid].data_mut();
                        for (r, &id) in ids.iter().enumerate() {
                            for (acc, v) in dst[id * d..(id + 1) * d]
                                .iter_mut()
                                .zip(&g[r * d..(r + 1) * d])
                            {
                                *acc += v;
                            }
                        }
                    } else {
                        let mut dt = vec![0.0; self.value(*table).len()];
                        for (r, &id) in ids.iter().enumerate() {
                            for (acc, v) in dt[id * d..(id + 1) * d]
                                .iter_mut()
                                .zip(&g[r * d..(r + 1) * d])
                            {
                                *acc += v;
                            }
                        }
                        self.accumulate(&mut adj, grads, *table, dt);
                    }
                }
                Op::ConcatCols(parts) => {
                    let rows = self.value(parts[0]).rows();
                    let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
                    let mut offset = 0;
                    for p in parts {
                        let c = self.value(*p).cols();
                        let mut dp = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            dp.extend_from_slice(&g[r * total + offset..r * total + offset + c]);
                        }
                        offset += c;
                        self.accumulate(&mut adj, grads, *p, dp);
                    }
                }
                Op::SelectRow(x, row) => {
                    let t = self.value(*x);
                    let c = t.cols();
                    let mut dx = vec![0.0; t.len()];
                    dx[row * c..(row + 1) * c].copy_from_slice(&g);
                    self.accumulate(&mut adj, grads, *x, dx);
                }
            }
        }
    }

    fn param_id(&self, v: Var) -> Option<ParamId> {
        match self.nodes[v.0].op {
            Op::Param(id) => Some(id),
            _ => None,
        }
    }

    fn needs_grad(&self, v: Var) -> bool {
        !matches!(self.nodes[v.0].op, Op::Input)
    }

    fn accumulate(&self, adj: &mut [Option<Vec<f64>>], grads: &mut Gradients, v: Var, g: Vec<f64>) {
        match self.nodes[v.0].op {
            Op::Input => {}
            Op::Param(id) => grads.tensors[id].add_assign(&g),
            _ => match &mut adj[v.0] {
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                slot @ None => *slot = Some(g),
            },
        }
    }
}
