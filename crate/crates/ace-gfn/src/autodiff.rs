//! Reverse-mode automatic differentiation over a flat `f64` tape.
//!
//! The op set is exactly what the losses need: affine maps, (leaky) ReLU,
//! log-softmax, log-sum-exp, squares, sums, softplus, and linear combinations
//! of scalars. Parameters live in external flat vectors ("groups"); leaves
//! reference slices of them, and `backward` returns one gradient vector per
//! group. Nodes are created in topological order by construction, so the
//! backward pass is a single reverse sweep.

use crate::error::{AceError, Result};

/// Index of a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(u32);

#[derive(Debug)]
enum Op {
    /// Leaf bound to `groups[group][offset .. offset + len]`.
    Param { group: u32, offset: u32 },
    /// Constant leaf.
    Const,
    /// `y = W x (+ b)`, with `W` a `rows x cols` row-major node.
    Affine {
        w: NodeId,
        x: NodeId,
        b: Option<NodeId>,
        rows: u32,
        cols: u32,
    },
    /// Elementwise `max(x, slope * x)`; `slope = 0` is plain ReLU.
    LeakyRelu { x: NodeId, slope: f64 },
    /// Elementwise sum of equal-length nodes.
    AddN { xs: Vec<NodeId> },
    /// `y_i = x_i - logsumexp(x)`. Entries at the mask sentinel stay huge and
    /// negative and carry exactly zero probability.
    LogSoftmax { x: NodeId },
    /// Scalar `y = x[index]`.
    Select { x: NodeId, index: u32 },
    /// Scalar `y = bias + sum_i coeff_i * x_i` over scalar nodes; the bias is
    /// folded into the forward value and needs no backward bookkeeping.
    LinComb { terms: Vec<(f64, NodeId)> },
    /// Elementwise `x^2`.
    Square { x: NodeId },
    /// Elementwise `log(1 + e^x)`, evaluated in shifted form for large `x`.
    Softplus { x: NodeId },
    /// Scalar `log sum_i e^{x_i}`.
    LogSumExp { x: NodeId },
    /// Scalar `sum_i x_i`.
    Sum { x: NodeId },
    /// Scalar `||a - b||^2`.
    SumSqDiff { a: NodeId, b: NodeId },
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Param { .. } => "param",
        Op::Const => "const",
        Op::Affine { .. } => "affine",
        Op::LeakyRelu { .. } => "leaky_relu",
        Op::AddN { .. } => "add_n",
        Op::LogSoftmax { .. } => "log_softmax",
        Op::Select { .. } => "select",
        Op::LinComb { .. } => "lincomb",
        Op::Square { .. } => "square",
        Op::Softplus { .. } => "softplus",
        Op::LogSumExp { .. } => "log_sum_exp",
        Op::Sum { .. } => "sum",
        Op::SumSqDiff { .. } => "sum_sq_diff",
    }
}

struct Node {
    op: Op,
    off: u32,
    len: u32,
}

/// Dot product with four independent accumulators; the fixed association
/// order keeps results bit-reproducible while still vectorizing.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let ra = ca.remainder();
    let rb = cb.remainder();
    for (xa, xb) in ca.zip(cb) {
        acc[0] += xa[0] * xb[0];
        acc[1] += xa[1] * xb[1];
        acc[2] += xa[2] * xb[2];
        acc[3] += xa[3] * xb[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (xa, xb) in ra.iter().zip(rb.iter()) {
        s += xa * xb;
    }
    s
}

#[inline]
fn axpy(out: &mut [f64], a: f64, x: &[f64]) {
    debug_assert_eq!(out.len(), x.len());
    for (o, v) in out.iter_mut().zip(x.iter()) {
        *o += a * v;
    }
}

/// Ascending nonzero indices when at most half the entries are nonzero,
/// `None` otherwise. One-hot style feature vectors make most of an input
/// layer's multiplies vanish; a fixed ascending order keeps every pass over
/// the same vector summing identically.
pub(crate) fn sparse_profile(x: &[f64]) -> Option<Vec<u32>> {
    let cap = x.len() / 2;
    let mut idx = Vec::with_capacity(cap);
    for (i, &v) in x.iter().enumerate() {
        if v != 0.0 {
            if idx.len() == cap {
                return None;
            }
            idx.push(i as u32);
        }
    }
    Some(idx)
}

/// Dot product over the listed indices only.
#[inline]
pub(crate) fn dot_indexed(a: &[f64], x: &[f64], idx: &[u32]) -> f64 {
    let mut s = 0.0;
    for &i in idx {
        s += a[i as usize] * x[i as usize];
    }
    s
}

/// `out[i] += a * x[i]` over the listed indices only.
#[inline]
fn axpy_indexed(out: &mut [f64], a: f64, x: &[f64], idx: &[u32]) {
    for &i in idx {
        out[i as usize] += a * x[i as usize];
    }
}

/// Numerically stable `log(1 + e^x)`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Build-once, backward-once gradient tape over external parameter groups.
pub struct Tape<'p> {
    groups: Vec<&'p [f64]>,
    nodes: Vec<Node>,
    vals: Vec<f64>,
}

impl<'p> Tape<'p> {
    pub fn new(groups: Vec<&'p [f64]>) -> Self {
        Tape {
            groups,
            nodes: Vec::with_capacity(256),
            vals: Vec::with_capacity(4096),
        }
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        let node = &self.nodes[id.0 as usize];
        &self.vals[node.off as usize..(node.off + node.len) as usize]
    }

    /// Value of a length-1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        debug_assert_eq!(v.len(), 1);
        v[0]
    }

    fn push(&mut self, op: Op, values: impl FnOnce(&mut Vec<f64>)) -> NodeId {
        let off = self.vals.len() as u32;
        values(&mut self.vals);
        let len = self.vals.len() as u32 - off;
        self.nodes.push(Node { op, off, len });
        NodeId(self.nodes.len() as u32 - 1)
    }

    /// Leaf over `groups[group][offset .. offset + len]`.
    pub fn param(&mut self, group: usize, offset: usize, len: usize) -> NodeId {
        let src = &self.groups[group][offset..offset + len];
        let off = self.vals.len() as u32;
        self.vals.extend_from_slice(src);
        self.nodes.push(Node {
            op: Op::Param {
                group: group as u32,
                offset: offset as u32,
            },
            off,
            len: len as u32,
        });
        NodeId(self.nodes.len() as u32 - 1)
    }

    pub fn constant(&mut self, values: &[f64]) -> NodeId {
        let off = self.vals.len() as u32;
        self.vals.extend_from_slice(values);
        self.nodes.push(Node {
            op: Op::Const,
            off,
            len: values.len() as u32,
        });
        NodeId(self.nodes.len() as u32 - 1)
    }

    pub fn scalar_const(&mut self, v: f64) -> NodeId {
        self.constant(&[v])
    }

    pub fn affine(
        &mut self,
        w: NodeId,
        rows: usize,
        cols: usize,
        x: NodeId,
        b: Option<NodeId>,
    ) -> NodeId {
        assert_eq!(self.nodes[w.0 as usize].len as usize, rows * cols);
        assert_eq!(self.nodes[x.0 as usize].len as usize, cols);
        if let Some(b) = b {
            assert_eq!(self.nodes[b.0 as usize].len as usize, rows);
        }
        let (w_off, x_off) = (
            self.nodes[w.0 as usize].off as usize,
            self.nodes[x.0 as usize].off as usize,
        );
        let b_off = b.map(|b| self.nodes[b.0 as usize].off as usize);
        let off = self.vals.len();
        self.vals.resize(off + rows, 0.0);
        // Constant inputs are typically one-hot features: gradients never
        // reach them, and a sparse index walk beats a dense dot.
        let nz = match self.nodes[x.0 as usize].op {
            Op::Const => sparse_profile(&self.vals[x_off..x_off + cols]),
            _ => None,
        };
        let (head, tail) = self.vals.split_at_mut(off);
        let xv = &head[x_off..x_off + cols];
        for r in 0..rows {
            let row = &head[w_off + r * cols..w_off + (r + 1) * cols];
            let mut y = match &nz {
                Some(idx) => dot_indexed(row, xv, idx),
                None => dot(row, xv),
            };
            if let Some(bo) = b_off {
                y += head[bo + r];
            }
            tail[r] = y;
        }
        self.nodes.push(Node {
            op: Op::Affine {
                w,
                x,
                b,
                rows: rows as u32,
                cols: cols as u32,
            },
            off: off as u32,
            len: rows as u32,
        });
        NodeId(self.nodes.len() as u32 - 1)
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let (x_off, x_len) = {
            let n = &self.nodes[x.0 as usize];
            (n.off as usize, n.len as usize)
        };
        let off = self.vals.len();
        self.vals.resize(off + x_len, 0.0);
        let (head, tail) = self.vals.split_at_mut(off);
        for (o, &v) in tail.iter_mut().zip(&head[x_off..x_off + x_len]) {
            *o = if v > 0.0 { v } else { slope * v };
        }
        self.nodes.push(Node {
            op: Op::LeakyRelu { x, slope },
            off: off as u32,
            len: x_len as u32,
        });
        NodeId(self.nodes.len() as u32 - 1)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.leaky_relu(x, 0.0)
    }

    pub fn add_n(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty());
        let len = self.nodes[xs[0].0 as usize].len as usize;
        let off = self.vals.len();
        self.vals.resize(off + len, 0.0);
        let (head, tail) = self.vals.split_at_mut(off);
        for &x in xs {
            let n = &self.nodes[x.0 as usize];
            assert_eq!(n.len as usize, len);
            let src = &head[n.off as usize..n.off as usize + len];
            for (o, &v) in tail.iter_mut().zip(src) {
                *o += v;
            }
        }
        self.nodes.push(Node {
            op: Op::AddN { xs: xs.to_vec() },
            off: off as u32,
            len: len as u32,
        });
        NodeId(self.nodes.len() as u32 - 1)
    }

    pub fn log_softmax(&mut self, x: NodeId) -> NodeId {
        let (x_off, x_len) = {
            let n = &self.nodes[x.0 as usize];
            (n.off as usize, n.len as usize)
        };
        let off = self.vals.len();
        self.vals.resize(off + x_len, 0.0);
        let (head, tail) = self.vals.split_at_mut(off);
        let xv = &head[x_off..x_off + x_len];
        let m = xv.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = xv.iter().map(|&v| (v - m).exp()).sum();
        let lse = m + s.ln();
        for (o, &v) in tail.iter_mut().zip(xv) {
            *o = v - lse;
        }
        self.nodes.push(Node {
            op: Op::LogSoftmax { x },
            off: off as u32,
            len: x_len as u32,
        });
        NodeId(self.nodes.len() as u32 - 1)
    }

    pub fn select(&mut self, x: NodeId, index: usize) -> NodeId {
        let n = &self.nodes[x.0 as usize];
        assert!((index as u32) < n.len);
        let v = self.vals[n.off as usize + index];
        self.push(
            Op::Select {
                x,
                index: index as u32,
            },
            |vals| vals.push(v),
        )
    }

    pub fn lincomb(&mut self, terms: &[(f64, NodeId)], bias: f64) -> NodeId {
        let mut v = bias;
        for &(c, id) in terms {
            debug_assert_eq!(self.nodes[id.0 as usize].len, 1);
            v += c * self.vals[self.nodes[id.0 as usize].off as usize];
        }
        self.push(
            Op::LinComb {
                terms: terms.to_vec(),
            },
            |vals| vals.push(v),
        )
    }

    /// Mean of scalar nodes.
    pub fn mean(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty());
        let c = 1.0 / xs.len() as f64;
        let terms: Vec<(f64, NodeId)> = xs.iter().map(|&id| (c, id)).collect();
        self.lincomb(&terms, 0.0)
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let (x_off, x_len) = {
            let n = &self.nodes[x.0 as usize];
            (n.off as usize, n.len as usize)
        };
        let off = self.vals.len();
        self.vals.resize(off + x_len, 0.0);
        let (head, tail) = self.vals.split_at_mut(off);
        for (o, &v) in tail.iter_mut().zip(&head[x_off..x_off + x_len]) {
            *o = v * v;
        }
        self.nodes.push(Node {
            op: Op::Square { x },
            off: off as u32,
            len: x_len as u32,
        });
        NodeId(self.nodes.len() as u32 - 1)
    }

    pub fn softplus_node(&mut self, x: NodeId) -> NodeId {
        let (x_off, x_len) = {
            let n = &self.nodes[x.0 as usize];
            (n.off as usize, n.len as usize)
        };
        let off = self.vals.len();
        self.vals.resize(off + x_len, 0.0);
        let (head, tail) = self.vals.split_at_mut(off);
        for (o, &v) in tail.iter_mut().zip(&head[x_off..x_off + x_len]) {
            *o = softplus(v);
        }
        self.nodes.push(Node {
            op: Op::Softplus { x },
            off: off as u32,
            len: x_len as u32,
        });
        NodeId(self.nodes.len() as u32 - 1)
    }

    pub fn log_sum_exp(&mut self, x: NodeId) -> NodeId {
        let n = &self.nodes[x.0 as usize];
        let xv = &self.vals[n.off as usize..(n.off + n.len) as usize];
        let m = xv.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let v = if m.is_finite() {
            m + xv.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
        } else {
            m
        };
        self.push(Op::LogSumExp { x }, |vals| vals.push(v))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let n = &self.nodes[x.0 as usize];
        let v: f64 = self.vals[n.off as usize..(n.off + n.len) as usize]
            .iter()
            .sum();
        self.push(Op::Sum { x }, |vals| vals.push(v))
    }

    pub fn sum_sq_diff(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (a_off, a_len) = {
            let n = &self.nodes[a.0 as usize];
            (n.off as usize, n.len as usize)
        };
        let (b_off, b_len) = {
            let n = &self.nodes[b.0 as usize];
            (n.off as usize, n.len as usize)
        };
        assert_eq!(a_len, b_len);
        let mut v = 0.0;
        for i in 0..a_len {
            let d = self.vals[a_off + i] - self.vals[b_off + i];
            v += d * d;
        }
        self.push(Op::SumSqDiff { a, b }, |vals| vals.push(v))
    }

    /// Scalar root value, or a numerical-failure error naming the first op
    /// that produced a non-finite value.
    pub fn checked_scalar(&self, root: NodeId) -> Result<f64> {
        let v = self.scalar(root);
        if v.is_finite() {
            return Ok(v);
        }
        for node in &self.nodes {
            let vals = &self.vals[node.off as usize..(node.off + node.len) as usize];
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(AceError::NumericalFailure {
                    op: op_name(&node.op),
                });
            }
        }
        Err(AceError::NumericalFailure { op: "root" })
    }

    /// Reverse sweep from a scalar root; returns one gradient vector per
    /// parameter group.
    pub fn backward(&self, root: NodeId) -> Vec<Vec<f64>> {
        assert_eq!(self.nodes[root.0 as usize].len, 1, "root must be scalar");
        let mut adj = vec![0.0f64; self.vals.len()];
        adj[self.nodes[root.0 as usize].off as usize] = 1.0;
        let mut grads: Vec<Vec<f64>> = self.groups.iter().map(|g| vec![0.0; g.len()]).collect();

        for ni in (0..self.nodes.len()).rev() {
            let node = &self.nodes[ni];
            let off = node.off as usize;
            let len = node.len as usize;
            // Skip nodes whose adjoint is entirely zero.
            if adj[off..off + len].iter().all(|&g| g == 0.0) {
                continue;
            }
            match &node.op {
                Op::Const => {}
                Op::Param { group, offset } => {
                    let g = &mut grads[*group as usize];
                    let base = *offset as usize;
                    for i in 0..len {
                        g[base + i] += adj[off + i];
                    }
                }
                Op::Affine { w, x, b, rows, cols } => {
                    let rows = *rows as usize;
                    let cols = *cols as usize;
                    let w_off = self.nodes[w.0 as usize].off as usize;
                    let x_off = self.nodes[x.0 as usize].off as usize;
                    // Constant inputs take no gradient, and their zero
                    // entries contribute nothing to the weight gradient.
                    let x_is_const = matches!(self.nodes[x.0 as usize].op, Op::Const);
                    let nz = if x_is_const {
                        sparse_profile(&self.vals[x_off..x_off + cols])
                    } else {
                        None
                    };
                    // dW[r, :] += g[r] * x ; dx += g[r] * W[r, :] ; db += g
                    for r in 0..rows {
                        let g = adj[off + r];
                        if g == 0.0 {
                            continue;
                        }
                        let x_val = &self.vals[x_off..x_off + cols];
                        let w_adj = &mut adj[w_off + r * cols..w_off + (r + 1) * cols];
                        match &nz {
                            Some(idx) => axpy_indexed(w_adj, g, x_val, idx),
                            None => axpy(w_adj, g, x_val),
                        }
                        if !x_is_const {
                            let w_row =
                                &self.vals[w_off + r * cols..w_off + (r + 1) * cols];
                            axpy(&mut adj[x_off..x_off + cols], g, w_row);
                        }
                        if let Some(b) = b {
                            adj[self.nodes[b.0 as usize].off as usize + r] += g;
                        }
                    }
                }
                Op::LeakyRelu { x, slope } => {
                    let x_off = self.nodes[x.0 as usize].off as usize;
                    for i in 0..len {
                        let d = if self.vals[x_off + i] > 0.0 { 1.0 } else { *slope };
                        adj[x_off + i] += d * adj[off + i];
                    }
                }
                Op::AddN { xs } => {
                    for x in xs {
                        let x_off = self.nodes[x.0 as usize].off as usize;
                        for i in 0..len {
                            adj[x_off + i] += adj[off + i];
                        }
                    }
                }
                Op::LogSoftmax { x } => {
                    let x_off = self.nodes[x.0 as usize].off as usize;
                    let gsum: f64 = adj[off..off + len].iter().sum();
                    for i in 0..len {
                        let p = self.vals[off + i].exp();
                        adj[x_off + i] += adj[off + i] - p * gsum;
                    }
                }
                Op::Select { x, index } => {
                    let x_off = self.nodes[x.0 as usize].off as usize;
                    adj[x_off + *index as usize] += adj[off];
                }
                Op::LinComb { terms } => {
                    let g = adj[off];
                    for &(c, id) in terms {
                        adj[self.nodes[id.0 as usize].off as usize] += c * g;
                    }
                }
                Op::Square { x } => {
                    let x_off = self.nodes[x.0 as usize].off as usize;
                    for i in 0..len {
                        adj[x_off + i] += 2.0 * self.vals[x_off + i] * adj[off + i];
                    }
                }
                Op::Softplus { x } => {
                    let x_off = self.nodes[x.0 as usize].off as usize;
                    for i in 0..len {
                        adj[x_off + i] += sigmoid(self.vals[x_off + i]) * adj[off + i];
                    }
                }
                Op::LogSumExp { x } => {
                    let x_off = self.nodes[x.0 as usize].off as usize;
                    let x_len = self.nodes[x.0 as usize].len as usize;
                    let y = self.vals[off];
                    let g = adj[off];
                    if y.is_finite() {
                        for i in 0..x_len {
                            adj[x_off + i] += g * (self.vals[x_off + i] - y).exp();
                        }
                    }
                }
                Op::Sum { x } => {
                    let x_off = self.nodes[x.0 as usize].off as usize;
                    let x_len = self.nodes[x.0 as usize].len as usize;
                    let g = adj[off];
                    for i in 0..x_len {
                        adj[x_off + i] += g;
                    }
                }
                Op::SumSqDiff { a, b } => {
                    let a_off = self.nodes[a.0 as usize].off as usize;
                    let b_off = self.nodes[b.0 as usize].off as usize;
                    let n = self.nodes[a.0 as usize].len as usize;
                    let g = adj[off];
                    for i in 0..n {
                        let d = self.vals[a_off + i] - self.vals[b_off + i];
                        adj[a_off + i] += 2.0 * d * g;
                        adj[b_off + i] -= 2.0 * d * g;
                    }
                }
            }
        }
        grads
    }
}

/// Builds a scalar loss with `build`, checks it is finite, and returns the
/// loss with per-group gradients.
pub fn loss_and_grad<'p, F>(groups: Vec<&'p [f64]>, build: F) -> Result<(f64, Vec<Vec<f64>>)>
where
    F: FnOnce(&mut Tape<'p>) -> Result<NodeId>,
{
    let mut tape = Tape::new(groups);
    let root = build(&mut tape)?;
    let loss = tape.checked_scalar(root)?;
    let grads = tape.backward(root);
    Ok((loss, grads))
}
