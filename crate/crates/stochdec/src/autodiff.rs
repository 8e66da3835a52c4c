//! Reverse-mode automatic differentiation over dense arrays.
//!
//! The [`Tape`] records operations eagerly: every op computes its forward
//! value when it is built, so `evaluate` is just a node-value lookup and
//! the reverse sweep walks the nodes in construction order (which is a
//! topological order by construction). Leaves are named and bound to
//! tensors up front; everything else is either a constant or derived.
//!
//! ```
//! use stochdec::autodiff::Tape;
//! use stochdec::tensor::Tensor;
//! use std::collections::BTreeMap;
//!
//! let mut bindings = BTreeMap::new();
//! bindings.insert("x".to_string(), Tensor::<f64>::scalar(3.0));
//! let tape = Tape::new(bindings);
//! let x = tape.leaf("x").unwrap();
//! let y = x.mul(x).unwrap();
//! assert_eq!(y.value().item().unwrap(), 9.0);
//! let grads = tape.gradient(y, &["x".to_string()]).unwrap();
//! assert_eq!(grads["x"].item().unwrap(), 6.0);
//! ```

use crate::error::{Error, Result};
use crate::tensor::{same_shape, Scalar, Tensor};
use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet, HashMap};

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf(String),
    Constant,
    StopGradient,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Concat(Vec<usize>),
    SliceCols(usize, usize, usize),
    Tanh(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Softplus(usize),
    Softmax(usize),
    LogSoftmax(usize),
    SumAll(usize),
    MeanAll(usize),
    SumLast(usize),
    Scale(usize, T),
    AddScalar(usize, T),
    EmbedGather { table: usize, ids: Vec<usize> },
    RowSelect { input: usize, cols: Vec<usize> },
}

struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
}

struct Inner<T> {
    nodes: Vec<Node<T>>,
    leaves: HashMap<String, usize>,
}

/// Eagerly evaluated computation graph at a single precision.
pub struct Tape<T: Scalar> {
    inner: RefCell<Inner<T>>,
    bindings: BTreeMap<String, Tensor<T>>,
    sg_replay: RefCell<Option<(Vec<Tensor<T>>, usize)>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    idx: usize,
}

impl<T: Scalar> Tape<T> {
    pub fn new(bindings: BTreeMap<String, Tensor<T>>) -> Self {
        Tape {
            inner: RefCell::new(Inner {
                nodes: Vec::new(),
                leaves: HashMap::new(),
            }),
            bindings,
            sg_replay: RefCell::new(None),
        }
    }

    /// A tape whose `stop_gradient` nodes take their forward values from
    /// `values` (in construction order) instead of recomputing them.
    ///
    /// Finite-difference checking uses this: the function actually
    /// differentiated by the blocked analytic sweep is the one where
    /// blocked subexpressions are frozen at their base-run values, so
    /// perturbed rebuilds must hold them fixed too.
    pub fn with_blocked_replay(bindings: BTreeMap<String, Tensor<T>>, values: Vec<Tensor<T>>) -> Self {
        let tape = Tape::new(bindings);
        *tape.sg_replay.borrow_mut() = Some((values, 0));
        tape
    }

    /// Forward values of every `stop_gradient` node, in construction
    /// order; feed these to [`Tape::with_blocked_replay`].
    pub fn blocked_values(&self) -> Vec<Tensor<T>> {
        self.inner
            .borrow()
            .nodes
            .iter()
            .filter(|n| matches!(n.op, Op::StopGradient))
            .map(|n| n.value.clone())
            .collect()
    }

    pub fn empty() -> Self {
        Tape::new(BTreeMap::new())
    }

    pub fn binding_names(&self) -> Vec<String> {
        self.bindings.keys().cloned().collect()
    }

    fn push(&self, op: Op<T>, value: Tensor<T>) -> Var<'_, T> {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node { op, value });
        Var {
            tape: self,
            idx: inner.nodes.len() - 1,
        }
    }

    /// Named trainable input, looked up in the bindings. Repeated calls
    /// with the same name return the same node so gradients accumulate
    /// in one place.
    pub fn leaf(&self, name: &str) -> Result<Var<'_, T>> {
        if let Some(&idx) = self.inner.borrow().leaves.get(name) {
            return Ok(Var { tape: self, idx });
        }
        let value = self
            .bindings
            .get(name)
            .cloned()
            .ok_or_else(|| Error::UnboundLeaf(name.to_string()))?;
        let var = self.push(Op::Leaf(name.to_string()), value);
        self.inner.borrow_mut().leaves.insert(name.to_string(), var.idx);
        Ok(var)
    }

    /// Non-trainable input (masks, noise draws, token constants).
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(Op::Constant, value)
    }

    pub fn scalar(&self, value: T) -> Var<'_, T> {
        self.constant(Tensor::scalar(value))
    }

    pub fn concat<'t>(&'t self, parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        if parts.is_empty() {
            return Err(Error::invalid("concat of zero tensors"));
        }
        let value = {
            let inner = self.inner.borrow();
            let tensors: Vec<&Tensor<T>> = parts.iter().map(|v| &inner.nodes[v.idx].value).collect();
            concat_forward(&tensors)?
        };
        Ok(self.push(Op::Concat(parts.iter().map(|v| v.idx).collect()), value))
    }

    /// Row-gather from an embedding table: `table` is `[vocab, dim]`,
    /// output is `[ids.len(), dim]`.
    pub fn embed<'t>(&'t self, table: Var<'t, T>, ids: &[usize]) -> Result<Var<'t, T>> {
        let value = {
            let inner = self.inner.borrow();
            let t = &inner.nodes[table.idx].value;
            if t.shape().len() != 2 {
                return Err(Error::shape("embed", format!("table must be 2-d, got {:?}", t.shape())));
            }
            let (vocab, dim) = (t.shape()[0], t.shape()[1]);
            let mut data = Vec::with_capacity(ids.len() * dim);
            for &id in ids {
                if id >= vocab {
                    return Err(Error::invalid(format!("embedding id {} out of range {}", id, vocab)));
                }
                data.extend_from_slice(&t.data()[id * dim..(id + 1) * dim]);
            }
            Tensor::new(vec![ids.len(), dim], data)?
        };
        Ok(self.push(
            Op::EmbedGather {
                table: table.idx,
                ids: ids.to_vec(),
            },
            value,
        ))
    }

    /// Per-row column pick: `input` is `[rows, d]`, `cols[r]` selects one
    /// entry per row; output is `[rows]`.
    pub fn row_select<'t>(&'t self, input: Var<'t, T>, cols: &[usize]) -> Result<Var<'t, T>> {
        let value = {
            let inner = self.inner.borrow();
            let x = &inner.nodes[input.idx].value;
            if x.shape().len() != 2 || x.shape()[0] != cols.len() {
                return Err(Error::shape(
                    "row_select",
                    format!("input {:?} vs {} row indices", x.shape(), cols.len()),
                ));
            }
            let d = x.shape()[1];
            let mut data = Vec::with_capacity(cols.len());
            for (r, &c) in cols.iter().enumerate() {
                if c >= d {
                    return Err(Error::invalid(format!("row_select column {} out of range {}", c, d)));
                }
                data.push(x.data()[r * d + c]);
            }
            Tensor::new(vec![cols.len()], data)?
        };
        Ok(self.push(
            Op::RowSelect {
                input: input.idx,
                cols: cols.to_vec(),
            },
            value,
        ))
    }

    fn value_of(&self, idx: usize) -> Tensor<T> {
        self.inner.borrow().nodes[idx].value.clone()
    }

    fn shape_of(&self, idx: usize) -> Vec<usize> {
        self.inner.borrow().nodes[idx].value.shape().to_vec()
    }

    /// Reverse sweep from a scalar root. Returns gradients for the named
    /// leaves; leaves not on any differentiable path get zero arrays.
    pub fn gradient(&self, root: Var<'_, T>, wrt: &[String]) -> Result<BTreeMap<String, Tensor<T>>> {
        let inner = self.inner.borrow();
        let nodes = &inner.nodes;
        if nodes[root.idx].value.numel() != 1 {
            return Err(Error::shape(
                "gradient",
                format!("root must be scalar, shape is {:?}", nodes[root.idx].value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        grads[root.idx] = Some(Tensor::full(nodes[root.idx].value.shape(), T::one()));

        for idx in (0..=root.idx).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &nodes[idx];
            match &node.op {
                Op::Leaf(_) | Op::Constant => {
                    grads[idx] = Some(g); // keep for collection
                }
                Op::StopGradient => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    accumulate(&mut grads, *a, matmul_nt(&g, bv)?);
                    accumulate(&mut grads, *b, matmul_tn(av, &g)?);
                }
                Op::Add(a, b) => {
                    let bshape = nodes[*b].value.shape().to_vec();
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, reduce_to_shape(&g, &bshape));
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.map(|v| -v));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    accumulate(&mut grads, *a, mul_grad(&g, bv, av.shape())?);
                    accumulate(&mut grads, *b, mul_grad(&g, av, bv.shape())?);
                }
                Op::Div(a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    let ga = zip_map(&g, bv, |g, b| g / b);
                    let gb_data: Vec<T> = g
                        .data()
                        .iter()
                        .zip(av.data())
                        .zip(bv.data())
                        .map(|((&g, &a), &b)| -g * a / (b * b))
                        .collect();
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, Tensor::new(bv.shape().to_vec(), gb_data)?);
                }
                Op::Concat(parts) => {
                    let rows = node.value.rows();
                    let total = node.value.last_dim();
                    let mut offset = 0;
                    for &p in parts {
                        let d = nodes[p].value.last_dim();
                        let mut pd = vec![T::zero(); rows * d];
                        for r in 0..rows {
                            pd[r * d..(r + 1) * d]
                                .copy_from_slice(&g.data()[r * total + offset..r * total + offset + d]);
                        }
                        accumulate(&mut grads, p, Tensor::new(nodes[p].value.shape().to_vec(), pd)?);
                        offset += d;
                    }
                }
                Op::SliceCols(a, start, end) => {
                    let av = &nodes[*a].value;
                    let (rows, d) = (av.rows(), av.last_dim());
                    let w = end - start;
                    let mut ad = vec![T::zero(); rows * d];
                    for r in 0..rows {
                        ad[r * d + start..r * d + end].copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                    }
                    accumulate(&mut grads, *a, Tensor::new(av.shape().to_vec(), ad)?);
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    accumulate(&mut grads, *a, zip_map(&g, y, |g, y| g * (T::one() - y * y)));
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    accumulate(&mut grads, *a, zip_map(&g, y, |g, y| g * y * (T::one() - y)));
                }
                Op::Exp(a) => {
                    let y = &node.value;
                    accumulate(&mut grads, *a, zip_map(&g, y, |g, y| g * y));
                }
                Op::Log(a) => {
                    let x = &nodes[*a].value;
                    accumulate(&mut grads, *a, zip_map(&g, x, |g, x| g / x));
                }
                Op::Softplus(a) => {
                    let x = &nodes[*a].value;
                    accumulate(&mut grads, *a, zip_map(&g, x, |g, x| g * sigmoid_scalar(x)));
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    accumulate(&mut grads, *a, softmax_grad(&g, y)?);
                }
                Op::LogSoftmax(a) => {
                    let y = &node.value;
                    accumulate(&mut grads, *a, log_softmax_grad(&g, y)?);
                }
                Op::SumAll(a) => {
                    let seed = g.item()?;
                    let shape = nodes[*a].value.shape().to_vec();
                    accumulate(&mut grads, *a, Tensor::full(&shape, seed));
                }
                Op::MeanAll(a) => {
                    let shape = nodes[*a].value.shape().to_vec();
                    let n = T::from_f64(nodes[*a].value.numel() as f64);
                    let seed = g.item()? / n;
                    accumulate(&mut grads, *a, Tensor::full(&shape, seed));
                }
                Op::SumLast(a) => {
                    let av = &nodes[*a].value;
                    let (rows, d) = (av.rows(), av.last_dim());
                    let mut ad = vec![T::zero(); rows * d];
                    for r in 0..rows {
                        let gv = g.data()[r];
                        for c in 0..d {
                            ad[r * d + c] = gv;
                        }
                    }
                    accumulate(&mut grads, *a, Tensor::new(av.shape().to_vec(), ad)?);
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    accumulate(&mut grads, *a, g.map(|v| v * c));
                }
                Op::AddScalar(a, _) => {
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::EmbedGather { table, ids } => {
                    let tshape = nodes[*table].value.shape().to_vec();
                    let dim = tshape[1];
                    let mut td = vec![T::zero(); tshape[0] * dim];
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..dim {
                            td[id * dim + c] = td[id * dim + c] + g.data()[r * dim + c];
                        }
                    }
                    accumulate(&mut grads, *table, Tensor::new(tshape, td)?);
                }
                Op::RowSelect { input, cols } => {
                    let xshape = nodes[*input].value.shape().to_vec();
                    let d = xshape[1];
                    let mut xd = vec![T::zero(); xshape[0] * d];
                    for (r, &c) in cols.iter().enumerate() {
                        xd[r * d + c] = g.data()[r];
                    }
                    accumulate(&mut grads, *input, Tensor::new(xshape, xd)?);
                }
            }
        }

        let mut out = BTreeMap::new();
        for name in wrt {
            match inner.leaves.get(name) {
                Some(&idx) => {
                    let g = grads[idx]
                        .clone()
                        .unwrap_or_else(|| Tensor::zeros(nodes[idx].value.shape()));
                    out.insert(name.clone(), g);
                }
                None => {
                    // leaf never touched by this graph: zero of the bound shape
                    let bound = self
                        .bindings
                        .get(name)
                        .ok_or_else(|| Error::UnboundLeaf(name.clone()))?;
                    out.insert(name.clone(), Tensor::zeros(bound.shape()));
                }
            }
        }
        Ok(out)
    }

    /// Gradients for every bound leaf name.
    pub fn gradient_all(&self, root: Var<'_, T>) -> Result<BTreeMap<String, Tensor<T>>> {
        let names = self.binding_names();
        self.gradient(root, &names)
    }

    /// Leaves with at least one path to `root` that does not cross a
    /// `stop_gradient` boundary.
    pub fn reachable_leaves(&self, root: Var<'_, T>) -> BTreeSet<String> {
        let inner = self.inner.borrow();
        let nodes = &inner.nodes;
        let mut mark = vec![false; nodes.len()];
        mark[root.idx] = true;
        let mut out = BTreeSet::new();
        for idx in (0..=root.idx).rev() {
            if !mark[idx] {
                continue;
            }
            match &nodes[idx].op {
                Op::Leaf(name) => {
                    out.insert(name.clone());
                }
                Op::Constant | Op::StopGradient => {}
                Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                    mark[*a] = true;
                    mark[*b] = true;
                }
                Op::Concat(parts) => parts.iter().for_each(|&p| mark[p] = true),
                Op::SliceCols(a, _, _)
                | Op::Tanh(a)
                | Op::Sigmoid(a)
                | Op::Exp(a)
                | Op::Log(a)
                | Op::Softplus(a)
                | Op::Softmax(a)
                | Op::LogSoftmax(a)
                | Op::SumAll(a)
                | Op::MeanAll(a)
                | Op::SumLast(a)
                | Op::Scale(a, _)
                | Op::AddScalar(a, _) => mark[*a] = true,
                Op::EmbedGather { table, .. } => mark[*table] = true,
                Op::RowSelect { input, .. } => mark[*input] = true,
            }
        }
        out
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], idx: usize, g: Tensor<T>) {
    match &mut grads[idx] {
        Some(existing) => {
            for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                *e = *e + *v;
            }
        }
        slot => *slot = Some(g),
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn value(&self) -> Tensor<T> {
        self.tape.value_of(self.idx)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.shape_of(self.idx)
    }

    pub fn matmul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        let value = {
            let inner = self.tape.inner.borrow();
            matmul_nn(&inner.nodes[self.idx].value, &inner.nodes[rhs.idx].value)?
        };
        Ok(self.tape.push(Op::MatMul(self.idx, rhs.idx), value))
    }

    /// Elementwise add; `rhs` may have a shape that is a trailing suffix
    /// of `self`'s shape (bias broadcast over leading batch dims).
    pub fn add(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        let value = {
            let inner = self.tape.inner.borrow();
            add_forward(&inner.nodes[self.idx].value, &inner.nodes[rhs.idx].value)?
        };
        Ok(self.tape.push(Op::Add(self.idx, rhs.idx), value))
    }

    pub fn sub(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        let value = {
            let inner = self.tape.inner.borrow();
            let (a, b) = (&inner.nodes[self.idx].value, &inner.nodes[rhs.idx].value);
            same_shape("sub", a, b)?;
            zip_map(a, b, |a, b| a - b)
        };
        Ok(self.tape.push(Op::Sub(self.idx, rhs.idx), value))
    }

    /// Elementwise multiply; one operand may have last dimension 1 with
    /// identical leading dims (column broadcast).
    pub fn mul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        let value = {
            let inner = self.tape.inner.borrow();
            mul_forward(&inner.nodes[self.idx].value, &inner.nodes[rhs.idx].value)?
        };
        Ok(self.tape.push(Op::Mul(self.idx, rhs.idx), value))
    }

    pub fn div(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        let value = {
            let inner = self.tape.inner.borrow();
            let (a, b) = (&inner.nodes[self.idx].value, &inner.nodes[rhs.idx].value);
            same_shape("div", a, b)?;
            zip_map(a, b, |a, b| a / b)
        };
        Ok(self.tape.push(Op::Div(self.idx, rhs.idx), value))
    }

    pub fn slice_cols(self, start: usize, end: usize) -> Result<Var<'t, T>> {
        let value = {
            let inner = self.tape.inner.borrow();
            let x = &inner.nodes[self.idx].value;
            let (rows, d) = (x.rows(), x.last_dim());
            if start >= end || end > d {
                return Err(Error::shape(
                    "slice_cols",
                    format!("range {}..{} on last dim {}", start, end, d),
                ));
            }
            let w = end - start;
            let mut data = Vec::with_capacity(rows * w);
            for r in 0..rows {
                data.extend_from_slice(&x.data()[r * d + start..r * d + end]);
            }
            let mut shape = x.shape().to_vec();
            *shape.last_mut().unwrap() = w;
            Tensor::new(shape, data)?
        };
        Ok(self.tape.push(Op::SliceCols(self.idx, start, end), value))
    }

    pub fn tanh(self) -> Var<'t, T> {
        let value = self.value().map(|v| v.tanh());
        self.tape.push(Op::Tanh(self.idx), value)
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        let value = self.value().map(sigmoid_scalar);
        self.tape.push(Op::Sigmoid(self.idx), value)
    }

    pub fn exp(self) -> Var<'t, T> {
        let value = self.value().map(|v| v.exp());
        self.tape.push(Op::Exp(self.idx), value)
    }

    pub fn log(self) -> Var<'t, T> {
        let value = self.value().map(|v| v.ln());
        self.tape.push(Op::Log(self.idx), value)
    }

    /// `log(1 + exp(x))` with the overflow-safe branch `x > 20 -> x`.
    pub fn softplus(self) -> Var<'t, T> {
        let value = self.value().map(softplus_scalar);
        self.tape.push(Op::Softplus(self.idx), value)
    }

    /// Softmax over the last axis, with max-subtraction.
    pub fn softmax(self) -> Var<'t, T> {
        let value = softmax_forward(&self.value());
        self.tape.push(Op::Softmax(self.idx), value)
    }

    /// Fused log-softmax over the last axis (never produces -inf from
    /// probability underflow the way `log(softmax(x))` can).
    pub fn log_softmax(self) -> Var<'t, T> {
        let value = log_softmax_forward(&self.value());
        self.tape.push(Op::LogSoftmax(self.idx), value)
    }

    pub fn sum_all(self) -> Var<'t, T> {
        let s = self.value().data().iter().fold(T::zero(), |acc, &v| acc + v);
        self.tape.push(Op::SumAll(self.idx), Tensor::scalar(s))
    }

    pub fn mean_all(self) -> Var<'t, T> {
        let v = self.value();
        let s = v.data().iter().fold(T::zero(), |acc, &x| acc + x);
        let n = T::from_f64(v.numel() as f64);
        self.tape.push(Op::MeanAll(self.idx), Tensor::scalar(s / n))
    }

    /// Sum over the last axis, dropping it.
    pub fn sum_last(self) -> Var<'t, T> {
        let x = self.value();
        let (rows, d) = (x.rows(), x.last_dim());
        let mut data = Vec::with_capacity(rows);
        for r in 0..rows {
            data.push(x.data()[r * d..(r + 1) * d].iter().fold(T::zero(), |a, &v| a + v));
        }
        let shape = x.shape()[..x.shape().len().saturating_sub(1)].to_vec();
        self.tape
            .push(Op::SumLast(self.idx), Tensor::new(shape, data).unwrap())
    }

    pub fn scale(self, c: T) -> Var<'t, T> {
        let value = self.value().map(|v| v * c);
        self.tape.push(Op::Scale(self.idx, c), value)
    }

    pub fn add_scalar(self, c: T) -> Var<'t, T> {
        let value = self.value().map(|v| v + c);
        self.tape.push(Op::AddScalar(self.idx, c), value)
    }

    pub fn square(self) -> Result<Var<'t, T>> {
        self.mul(self)
    }

    /// Identity forward; the reverse sweep propagates exactly zero into
    /// the wrapped subgraph.
    pub fn stop_gradient(self) -> Var<'t, T> {
        let mut replay = self.tape.sg_replay.borrow_mut();
        let value = match replay.as_mut() {
            Some((values, next)) => {
                let v = values
                    .get(*next)
                    .unwrap_or_else(|| panic!("blocked-value replay exhausted at node {}", *next))
                    .clone();
                assert_eq!(
                    v.shape(),
                    self.value().shape(),
                    "blocked-value replay shape mismatch"
                );
                *next += 1;
                v
            }
            None => self.value(),
        };
        drop(replay);
        self.tape.push(Op::StopGradient, value)
    }
}

// ---- forward kernels ----

fn matmul_nn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::shape(
            "matmul",
            format!("{:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a.data()[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b.data()[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + av * brow[j];
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// g [m,n] * b^T [n,k] -> [m,k]
fn matmul_nt<T: Scalar>(g: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n, k) = (g.shape()[0], g.shape()[1], b.shape()[0]);
    let mut out = vec![T::zero(); m * k];
    for i in 0..m {
        for p in 0..k {
            let brow = &b.data()[p * n..(p + 1) * n];
            let grow = &g.data()[i * n..(i + 1) * n];
            let mut acc = T::zero();
            for j in 0..n {
                acc = acc + grow[j] * brow[j];
            }
            out[i * k + p] = acc;
        }
    }
    Tensor::new(vec![m, k], out)
}

/// a^T [k,m] * g [m,n] -> [k,n]
fn matmul_tn<T: Scalar>(a: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], g.shape()[1]);
    let mut out = vec![T::zero(); k * n];
    for i in 0..m {
        for p in 0..k {
            let av = a.data()[i * k + p];
            if av == T::zero() {
                continue;
            }
            let grow = &g.data()[i * n..(i + 1) * n];
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + av * grow[j];
            }
        }
    }
    Tensor::new(vec![k, n], out)
}

fn add_forward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        return Ok(zip_map(a, b, |a, b| a + b));
    }
    // broadcast: b's shape must be a trailing suffix of a's
    if a.shape().len() > b.shape().len() && a.shape().ends_with(b.shape()) {
        let bn = b.numel();
        let mut out = a.clone();
        for chunk in out.data_mut().chunks_mut(bn) {
            for (o, &bv) in chunk.iter_mut().zip(b.data()) {
                *o = *o + bv;
            }
        }
        return Ok(out);
    }
    Err(Error::shape(
        "add",
        format!("operand shapes {:?} vs {:?}", a.shape(), b.shape()),
    ))
}

/// Sum `g` down to `shape` (which is a trailing suffix of g's shape).
fn reduce_to_shape<T: Scalar>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        return g.clone();
    }
    let mut out = Tensor::zeros(shape);
    let bn = out.numel();
    for chunk in g.data().chunks(bn) {
        for (o, &gv) in out.data_mut().iter_mut().zip(chunk) {
            *o = *o + gv;
        }
    }
    out
}

fn mul_forward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        return Ok(zip_map(a, b, |a, b| a * b));
    }
    let lead_eq = a.shape().len() == b.shape().len()
        && a.shape()[..a.shape().len() - 1] == b.shape()[..b.shape().len() - 1];
    if lead_eq && (a.last_dim() == 1 || b.last_dim() == 1) {
        let (wide, narrow) = if a.last_dim() == 1 { (b, a) } else { (a, b) };
        let d = wide.last_dim();
        let mut out = wide.clone();
        for (r, chunk) in out.data_mut().chunks_mut(d).enumerate() {
            let nv = narrow.data()[r];
            for o in chunk.iter_mut() {
                *o = *o * nv;
            }
        }
        return Ok(out);
    }
    Err(Error::shape(
        "mul",
        format!("operand shapes {:?} vs {:?}", a.shape(), b.shape()),
    ))
}

/// Gradient of a broadcast multiply w.r.t. the operand with shape
/// `target_shape`, given the incoming gradient and the other operand.
fn mul_grad<T: Scalar>(g: &Tensor<T>, other: &Tensor<T>, target_shape: &[usize]) -> Result<Tensor<T>> {
    let prod = mul_forward(g, other)?;
    if prod.shape() == target_shape {
        return Ok(prod);
    }
    // target is the narrow ([.., 1]) side: sum over the last axis
    let (rows, d) = (prod.rows(), prod.last_dim());
    let mut data = Vec::with_capacity(rows);
    for r in 0..rows {
        data.push(prod.data()[r * d..(r + 1) * d].iter().fold(T::zero(), |a, &v| a + v));
    }
    Tensor::new(target_shape.to_vec(), data)
}

fn concat_forward<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let rows = parts[0].rows();
    let lead = &parts[0].shape()[..parts[0].shape().len() - 1];
    for p in parts {
        if p.rows() != rows || &p.shape()[..p.shape().len() - 1] != lead {
            return Err(Error::shape(
                "concat",
                format!("incompatible shapes {:?}", parts.iter().map(|p| p.shape()).collect::<Vec<_>>()),
            ));
        }
    }
    let total: usize = parts.iter().map(|p| p.last_dim()).sum();
    let mut data = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for p in parts {
            let d = p.last_dim();
            data.extend_from_slice(&p.data()[r * d..(r + 1) * d]);
        }
    }
    let mut shape = lead.to_vec();
    shape.push(total);
    Tensor::new(shape, data)
}

fn softmax_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (rows, d) = (x.rows(), x.last_dim());
    let mut out = x.clone();
    for r in 0..rows {
        let row = &mut out.data_mut()[r * d..(r + 1) * d];
        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    out
}

fn log_softmax_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (rows, d) = (x.rows(), x.last_dim());
    let mut out = x.clone();
    for r in 0..rows {
        let row = &mut out.data_mut()[r * d..(r + 1) * d];
        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let lse = row
            .iter()
            .map(|&v| (v - max).exp())
            .fold(T::zero(), |a, v| a + v)
            .ln()
            + max;
        for v in row.iter_mut() {
            *v = *v - lse;
        }
    }
    out
}

fn softmax_grad<T: Scalar>(g: &Tensor<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
    let (rows, d) = (y.rows(), y.last_dim());
    let mut out = y.clone();
    for r in 0..rows {
        let yr = &y.data()[r * d..(r + 1) * d];
        let gr = &g.data()[r * d..(r + 1) * d];
        let dot = yr.iter().zip(gr).fold(T::zero(), |a, (&y, &g)| a + y * g);
        let orow = &mut out.data_mut()[r * d..(r + 1) * d];
        for c in 0..d {
            orow[c] = yr[c] * (gr[c] - dot);
        }
    }
    Ok(out)
}

fn log_softmax_grad<T: Scalar>(g: &Tensor<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
    let (rows, d) = (y.rows(), y.last_dim());
    let mut out = y.clone();
    for r in 0..rows {
        let yr = &y.data()[r * d..(r + 1) * d];
        let gr = &g.data()[r * d..(r + 1) * d];
        let gsum = gr.iter().fold(T::zero(), |a, &v| a + v);
        let orow = &mut out.data_mut()[r * d..(r + 1) * d];
        for c in 0..d {
            orow[c] = gr[c] - yr[c].exp() * gsum;
        }
    }
    Ok(out)
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&a, &b)| f(a, b)).collect();
    Tensor::new(a.shape().to_vec(), data).unwrap()
}

fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus_scalar<T: Scalar>(x: T) -> T {
    if x > T::from_f64(20.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}

// ---- gradient checking ----

/// Finite-difference comparison report.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_leaf: String,
    pub per_leaf: BTreeMap<String, f64>,
}

/// Compare reverse-mode gradients against central finite differences,
/// rebuilding the graph via `build` for each perturbed evaluation.
///
/// Leaves reachable only through `stop_gradient` are excluded: numeric
/// differences would see them while the analytic sweep, by contract,
/// does not.
pub fn check_gradients<F>(
    bindings: &BTreeMap<String, Tensor<f64>>,
    eps: f64,
    build: F,
) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&'a Tape<f64>) -> Result<Var<'a, f64>>,
{
    if eps <= 0.0 {
        return Err(Error::invalid(format!("eps must be positive, got {}", eps)));
    }
    let tape = Tape::new(bindings.clone());
    let root = build(&tape)?;
    if root.value().numel() != 1 {
        return Err(Error::shape(
            "check_gradients",
            format!("root must be scalar, shape is {:?}", root.shape()),
        ));
    }
    let included: Vec<String> = tape.reachable_leaves(root).into_iter().collect();
    let analytic = tape.gradient(root, &included)?;
    let blocked = tape.blocked_values();

    let eval_at = |b: &BTreeMap<String, Tensor<f64>>| -> Result<f64> {
        let tape = Tape::with_blocked_replay(b.clone(), blocked.clone());
        let root = build(&tape)?;
        root.value().item()
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_leaf: String::new(),
        per_leaf: BTreeMap::new(),
    };
    let mut perturbed = bindings.clone();
    for name in &included {
        let n = bindings[name].numel();
        let mut leaf_worst = 0.0f64;
        for i in 0..n {
            let orig = bindings[name].data()[i];
            perturbed.get_mut(name).unwrap().data_mut()[i] = orig + eps;
            let f_plus = eval_at(&perturbed)?;
            perturbed.get_mut(name).unwrap().data_mut()[i] = orig - eps;
            let f_minus = eval_at(&perturbed)?;
            perturbed.get_mut(name).unwrap().data_mut()[i] = orig;

            let numeric = (f_plus - f_minus) / (2.0 * eps);
            let a = analytic[name].data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > leaf_worst {
                leaf_worst = rel;
            }
        }
        report.per_leaf.insert(name.clone(), leaf_worst);
        if leaf_worst > report.max_rel_error {
            report.max_rel_error = leaf_worst;
            report.worst_leaf = name.clone();
        }
    }
    Ok(report)
}
