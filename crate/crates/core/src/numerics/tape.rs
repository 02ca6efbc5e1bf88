//! Reverse-mode automatic differentiation over a closed set of primitives.
//!
//! A [`Tape`] evaluates eagerly: every primitive computes its value when it is
//! pushed, and records just enough to replay the chain rule backwards. The
//! primitive set is fixed: matmul, add, elementwise multiply, SiLU,
//! LayerNorm, column concatenation and sum-of-squares.

use std::borrow::Cow;
use std::collections::BTreeMap;

use super::tensor::{gemm, GemmOperand};
use super::{NumericsError, ParamStore, Tensor};

/// Variance floor used by [`Tape::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(String),
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Silu(Var),
    /// Keeps per-row `1/sqrt(var + eps)`; the normalized output is the node value.
    LayerNorm { input: Var, inv_std: Vec<f64> },
    Concat(Vec<Var>),
    SumSquares(Var),
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
}

/// Execution-ordered record of primitive applications.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node<'p>>,
}

/// Gradients of a scalar with respect to every recorded node.
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
    by_param: BTreeMap<String, Tensor>,
}

impl Gradients {
    /// Gradient for a named parameter (zeros if it did not influence the loss).
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.by_param.get(name)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.by_param
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor> {
        self.by_param
    }

    /// Gradient with respect to an arbitrary node, if it was reached.
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.by_node.get(var.0).and_then(Option::as_ref)
    }
}

fn shape_err(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> NumericsError {
    NumericsError::Shape {
        op,
        lhs: lhs.shape().to_vec(),
        rhs: rhs.shape().to_vec(),
    }
}

/// Strides that map an index of `lhs` onto a broadcast `rhs`.
///
/// `rhs` broadcasts when it is a single element, or has the same rank with
/// every extent either equal to `lhs` or `1`.
fn broadcast_strides(
    op: &'static str,
    lhs: &Tensor,
    rhs: &Tensor,
) -> Result<Option<Vec<usize>>, NumericsError> {
    if lhs.shape() == rhs.shape() {
        return Ok(None);
    }
    let ls = lhs.shape();
    let rs = rhs.shape();
    if rhs.numel() == 1 {
        return Ok(Some(vec![0; ls.len()]));
    }
    if ls.len() != rs.len() || ls.iter().zip(rs).any(|(&l, &r)| r != l && r != 1) {
        return Err(shape_err(op, lhs, rhs));
    }
    let mut strides = vec![0; rs.len()];
    let mut acc = 1;
    for ax in (0..rs.len()).rev() {
        strides[ax] = if rs[ax] == 1 { 0 } else { acc };
        acc *= rs[ax];
    }
    Ok(Some(strides))
}

/// Flat index into `rhs` for every flat index of `lhs`.
fn broadcast_index(shape: &[usize], strides: &[usize]) -> Vec<usize> {
    let numel: usize = shape.iter().product();
    let mut out = Vec::with_capacity(numel);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..numel {
        out.push(idx.iter().zip(strides).map(|(i, s)| i * s).sum());
        for ax in (0..shape.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
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

    fn push(&mut self, value: Cow<'p, Tensor>, op: Op) -> Result<Var, NumericsError> {
        if !value.all_finite() {
            return Err(NumericsError::NonFinite(op_name(&op)));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn input(&mut self, t: Tensor) -> Result<Var, NumericsError> {
        self.push(Cow::Owned(t), Op::Input)
    }

    pub fn param(&mut self, name: &str) -> Result<Var, NumericsError> {
        let t = self
            .params
            .get(name)
            .ok_or_else(|| NumericsError::UnknownParam(name.to_string()))?;
        self.push(Cow::Borrowed(t), Op::Param(name.to_string()))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(Cow::Owned(out), Op::MatMul(a, b))
    }

    /// `a + b`, with `b` broadcast onto the shape of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        self.push(Cow::Owned(out), Op::Add(a, b))
    }

    /// `a * b` elementwise, with `b` broadcast onto the shape of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        self.push(Cow::Owned(out), Op::Mul(a, b))
    }

    fn binary(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = match broadcast_strides(op, ta, tb)? {
            None => ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| f(x, y))
                .collect(),
            Some(strides) => {
                let idx = broadcast_index(ta.shape(), &strides);
                ta.data()
                    .iter()
                    .zip(idx)
                    .map(|(&x, j)| f(x, tb.data()[j]))
                    .collect()
            }
        };
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).map(|x| x * sigmoid(x));
        self.push(Cow::Owned(out), Op::Silu(a))
    }

    /// Normalizes each row (last axis) to zero mean and unit variance.
    ///
    /// No affine terms; compose with [`Tape::mul`] and [`Tape::add`].
    pub fn layer_norm(&mut self, a: Var) -> Result<Var, NumericsError> {
        let t = self.value(a);
        let c = t.last_dim();
        let rows = t.numel() / c;
        let mut out = Vec::with_capacity(t.numel());
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = t.row_slice(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            out.extend(row.iter().map(|x| (x - mean) * is));
            inv_std.push(is);
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        self.push(Cow::Owned(out), Op::LayerNorm { input: a, inv_std })
    }

    /// Concatenates rank-2 values along columns.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let refs: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let out = Tensor::hcat(&refs)?;
        self.push(Cow::Owned(out), Op::Concat(parts.to_vec()))
    }

    pub fn sum_squares(&mut self, a: Var) -> Result<Var, NumericsError> {
        let out = Tensor::scalar(self.value(a).sum_of_squares());
        self.push(Cow::Owned(out), Op::SumSquares(a))
    }

    /// Back-propagates from a scalar node, visiting nodes in exact reverse order.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        if self.value(loss).numel() != 1 {
            return Err(NumericsError::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input | Op::Param(_) => {}
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k) = ta.dims2("matmul")?;
                    let n = tb.last_dim();
                    let mut da = vec![0.0; m * k];
                    gemm(
                        m,
                        n,
                        k,
                        GemmOperand::plain(g.data(), n),
                        GemmOperand::transposed(tb.data(), n),
                        &mut da,
                        0.0,
                    );
                    let mut db = vec![0.0; k * n];
                    gemm(
                        k,
                        m,
                        n,
                        GemmOperand::transposed(ta.data(), k),
                        GemmOperand::plain(g.data(), n),
                        &mut db,
                        0.0,
                    );
                    accumulate(&mut grads, *a, Tensor::new(vec![m, k], da)?)?;
                    accumulate(&mut grads, *b, Tensor::new(vec![k, n], db)?)?;
                }
                Op::Add(a, b) => {
                    let tb = self.value(*b);
                    let gb = reduce_to(&g, self.value(*a), tb, |gi, _| gi)?;
                    accumulate(&mut grads, *b, gb)?;
                    accumulate(&mut grads, *a, g.clone())?;
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let gb = reduce_to(&g, ta, tb, |gi, ai| gi * ai)?;
                    let ga = match broadcast_strides("mul", ta, tb)? {
                        None => g.zip_mul(tb),
                        Some(strides) => {
                            let idx = broadcast_index(ta.shape(), &strides);
                            let data = g
                                .data()
                                .iter()
                                .zip(idx)
                                .map(|(&gi, j)| gi * tb.data()[j])
                                .collect();
                            Tensor::new(g.shape().to_vec(), data)?
                        }
                    };
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::Silu(a) => {
                    let ta = self.value(*a);
                    let data = ta
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&x, &gi)| {
                            let s = sigmoid(x);
                            gi * s * (1.0 + x * (1.0 - s))
                        })
                        .collect();
                    accumulate(&mut grads, *a, Tensor::new(ta.shape().to_vec(), data)?)?;
                }
                Op::LayerNorm { input, inv_std } => {
                    let y = &node.value;
                    let c = y.last_dim();
                    let mut dx = Vec::with_capacity(y.numel());
                    for (r, is) in inv_std.iter().enumerate() {
                        let yr = y.row_slice(r);
                        let gr = &g.data()[r * c..(r + 1) * c];
                        let mean_g = gr.iter().sum::<f64>() / c as f64;
                        let mean_gy =
                            gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        dx.extend(
                            gr.iter()
                                .zip(yr)
                                .map(|(gi, yi)| is * (gi - mean_g - yi * mean_gy)),
                        );
                    }
                    accumulate(&mut grads, *input, Tensor::new(y.shape().to_vec(), dx)?)?;
                }
                Op::Concat(parts) => {
                    let rows = g.shape()[0];
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).last_dim();
                        let mut data = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            data.extend_from_slice(&g.row_slice(r)[offset..offset + w]);
                        }
                        offset += w;
                        accumulate(&mut grads, p, Tensor::new(vec![rows, w], data)?)?;
                    }
                }
                Op::SumSquares(a) => {
                    let s = g.data()[0];
                    accumulate(&mut grads, *a, self.value(*a).scale(2.0 * s))?;
                }
            }
            grads[i] = Some(g);
        }

        let mut by_param = BTreeMap::new();
        for (node, g) in self.nodes.iter().zip(&grads) {
            if let Op::Param(name) = &node.op {
                let g = g.clone().unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                if let Some(prev) = by_param.get_mut(name) {
                    let sum = Tensor::add_same(prev, &g)?;
                    *prev = sum;
                } else {
                    by_param.insert(name.clone(), g);
                }
            }
        }
        for (name, p) in self.params.iter() {
            by_param
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(p.shape()));
        }
        if let Some((name, _)) = by_param.iter().find(|(_, g)| !g.all_finite()) {
            return Err(NumericsError::NonFiniteGradient(name.clone()));
        }
        Ok(Gradients {
            by_node: grads,
            by_param,
        })
    }
}

impl Tensor {
    fn zip_mul(&self, other: &Tensor) -> Tensor {
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a * b).collect();
        Tensor::new(self.shape().to_vec(), data).expect("same shape")
    }
}

/// Sums `f(g, lhs)` over the axes along which `rhs` was broadcast.
fn reduce_to(
    g: &Tensor,
    lhs: &Tensor,
    rhs: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor, NumericsError> {
    match broadcast_strides("reduce", lhs, rhs)? {
        None => {
            let data = g.data().iter().zip(lhs.data()).map(|(&a, &b)| f(a, b)).collect();
            Tensor::new(rhs.shape().to_vec(), data)
        }
        Some(strides) => {
            let idx = broadcast_index(lhs.shape(), &strides);
            let mut out = vec![0.0; rhs.numel()];
            for ((&gi, &li), j) in g.data().iter().zip(lhs.data()).zip(idx) {
                out[j] += f(gi, li);
            }
            Tensor::new(rhs.shape().to_vec(), out)
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<(), NumericsError> {
    match &mut grads[v.0] {
        Some(prev) => {
            for (p, x) in prev.data_mut().iter_mut().zip(g.data()) {
                *p += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
    Ok(())
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Input => "input",
        Op::Param(_) => "param",
        Op::MatMul(..) => "matmul",
        Op::Add(..) => "add",
        Op::Mul(..) => "mul",
        Op::Silu(_) => "silu",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Concat(_) => "concat",
        Op::SumSquares(_) => "sum_squares",
    }
}

/// A computation that can be replayed on a tape.
pub trait Graph {
    /// Records the computation on `tape` given already-recorded inputs.
    fn build(&self, tape: &mut Tape<'_>, inputs: &[Var]) -> Result<Var, NumericsError>;
}

/// Evaluates `graph` on `inputs` without keeping the tape.
pub fn forward(
    graph: &impl Graph,
    inputs: Vec<Tensor>,
    params: &ParamStore,
) -> Result<Tensor, NumericsError> {
    let mut tape = Tape::new(params);
    let vars = inputs
        .into_iter()
        .map(|t| tape.input(t))
        .collect::<Result<Vec<_>, _>>()?;
    let out = graph.build(&mut tape, &vars)?;
    Ok(tape.value(out).clone())
}

/// Evaluates a scalar-valued `graph` and returns its value with parameter gradients.
pub fn value_and_grad(
    graph: &impl Graph,
    inputs: Vec<Tensor>,
    params: &ParamStore,
) -> Result<(f64, BTreeMap<String, Tensor>), NumericsError> {
    let mut tape = Tape::new(params);
    let vars = inputs
        .into_iter()
        .map(|t| tape.input(t))
        .collect::<Result<Vec<_>, _>>()?;
    let out = graph.build(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    Ok((tape.value(out).data()[0], grads.into_params()))
}
