use std::collections::HashMap;

use super::{gelu_grad_scalar, gelu_scalar, gemm, gemm_strided, softmax_in_place, Parameter, Tensor};
use crate::error::{contract, Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Gelu(Var),
    Softmax {
        x: Var,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    GatherEntries {
        x: Var,
        idx: Vec<usize>,
        col: usize,
    },
    MulRows {
        x: Var,
        s: Var,
    },
    ScatterAdd {
        base: Var,
        parts: Vec<(Var, Vec<usize>)>,
    },
    TopKMask {
        x: Var,
        kept: Vec<bool>,
    },
}

/// Reverse-mode tape. Nodes are stored in creation order, which is a
/// topological order, so backward is a single reverse sweep.
pub struct Graph {
    nodes: Vec<Node>,
    bound: HashMap<String, Var>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            bound: HashMap::new(),
            grad_enabled: true,
        }
    }

    /// A graph that never tracks gradients; parameters bind as constants.
    pub fn inference() -> Self {
        Graph {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad =
            self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad: requires_grad && self.grad_enabled,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Binds a parameter as a leaf. Binding the same name twice returns the
    /// same node, so shared use sums gradients.
    pub fn param(&mut self, p: &Parameter) -> Var {
        if let Some(&v) = self.bound.get(&p.name) {
            return v;
        }
        let v = self.leaf(p.value.clone(), p.requires_grad);
        self.bound.insert(p.name.clone(), v);
        v
    }

    pub fn bound(&self, name: &str) -> Option<Var> {
        self.bound.get(name).copied()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Adds gradients of every bound parameter into its `grad` buffer.
    pub fn accumulate_into<'a>(&self, params: impl IntoIterator<Item = &'a mut Parameter>) {
        for p in params {
            if let Some(g) = self.bound(&p.name).and_then(|v| self.grad(v)) {
                p.accumulate_grad(g);
            }
        }
    }

    // ---------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            0.0,
        );
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Dimension {
                op: "add",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let shape = ta.shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Add(a, b), &[a, b]))
    }

    /// `x[..., d] + bias[d]`, the only broadcast the engine supports.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let d = tx.last_dim();
        if tb.shape() != [d] {
            return Err(Error::Dimension {
                op: "add_bias",
                lhs: tx.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let b = tb.data();
        let data = tx
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().zip(b).map(|(v, c)| v + c))
            .collect();
        let shape = tx.shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Dimension {
                op: "mul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let shape = ta.shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * c).collect();
        let shape = t.shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Scale(x, c), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), &[x]))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| gelu_scalar(v)).collect();
        let shape = t.shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Gelu(x), &[x]))
    }

    /// Softmax along `axis`. `-inf` inputs get exactly zero probability.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        if axis >= shape.len() {
            return Err(contract(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let mut data = t.data().to_vec();
        let mut lane = vec![0.0; len];
        for o in 0..outer {
            for j in 0..inner {
                let base = o * len * inner + j;
                for (i, slot) in lane.iter_mut().enumerate() {
                    *slot = data[base + i * inner];
                }
                softmax_in_place(&mut lane)?;
                for (i, &p) in lane.iter().enumerate() {
                    data[base + i * inner] = p;
                }
            }
        }
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Softmax { x, len, inner },
            &[x],
        ))
    }

    /// Per-row normalization over the last axis with population variance.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.last_dim();
        if d < 2 {
            return Err(contract("layer_norm needs at least two features"));
        }
        for p in [gain, bias] {
            if self.value(p).shape() != [d] {
                return Err(Error::Dimension {
                    op: "layer_norm",
                    lhs: tx.shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = tx.rows();
        let mut xhat = vec![0.0; tx.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let shape = tx.shape().to_vec();
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| contract("concat of zero tensors"))?;
        let cols = self.value(*first).last_dim();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.shape().len() != 2 || t.last_dim() != cols {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    lhs: self.value(*first).shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        Ok(self.push(
            Tensor::new(vec![rows, cols], data)?,
            Op::ConcatRows(parts.to_vec()),
            parts,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| contract("concat of zero tensors"))?;
        let rows = self.value(*first).rows();
        let mut cols = 0;
        for &p in parts {
            let t = self.value(p);
            if t.shape().len() != 2 || t.rows() != rows {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    lhs: self.value(*first).shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            cols += t.last_dim();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        Ok(self.push(
            Tensor::new(vec![rows, cols], data)?,
            Op::ConcatCols(parts.to_vec()),
            parts,
        ))
    }

    /// Gathers rows of `table` (`[vocab, d]`).
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            return Err(contract("embedding table must be 2-D"));
        }
        let (vocab, d) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index {
                    what: "embedding table",
                    index: id,
                    bound: vocab,
                });
            }
            data.extend_from_slice(t.row(id));
        }
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], data)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if t.shape().len() != 2 || t.shape()[0] != labels.len() {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: t.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let c = t.last_dim();
        if c < 2 {
            return Err(contract("cross_entropy needs at least two classes"));
        }
        let b = labels.len();
        let mut probs = t.data().to_vec();
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            if label >= c {
                return Err(Error::Index {
                    what: "class labels",
                    index: label,
                    bound: c,
                });
            }
            let row = t.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss -= row[label] - max - lse;
            softmax_in_place(&mut probs[r * c..(r + 1) * c])?;
        }
        Ok(self.push(
            Tensor::scalar(loss / b as f64),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Multi-head scaled dot-product attention over `batch` sequences of
    /// length `seq`, stored as `[batch * seq, d]`. Keys whose `key_mask` entry
    /// is false get a `-inf` score.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        key_mask: &[bool],
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<Var> {
        let shape = self.value(q).shape().to_vec();
        for t in [k, v] {
            if self.value(t).shape() != shape.as_slice() {
                return Err(Error::Dimension {
                    op: "attention",
                    lhs: shape,
                    rhs: self.value(t).shape().to_vec(),
                });
            }
        }
        let d = *shape.last().unwrap_or(&0);
        if shape.len() != 2 || shape[0] != batch * seq || key_mask.len() != batch * seq {
            return Err(Error::Dimension {
                op: "attention",
                lhs: shape,
                rhs: vec![batch, seq],
            });
        }
        if heads == 0 || d % heads != 0 {
            return Err(contract(format!("{heads} heads do not divide width {d}")));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut out = vec![0.0; batch * seq * d];
        let mut probs = vec![0.0; batch * heads * seq * seq];
        for b in 0..batch {
            for h in 0..heads {
                let off = b * seq * d + h * dh;
                let p = &mut probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                // scores = Q_h K_h^T
                gemm_strided(seq, dh, seq, &qd[off..], d, 1, &kd[off..], 1, d, p, seq, 0.0);
                for i in 0..seq {
                    let row = &mut p[i * seq..(i + 1) * seq];
                    for (j, s) in row.iter_mut().enumerate() {
                        *s = if key_mask[b * seq + j] {
                            *s * scale
                        } else {
                            f64::NEG_INFINITY
                        };
                    }
                    softmax_in_place(row)?;
                }
                gemm_strided(seq, seq, dh, p, seq, 1, &vd[off..], d, 1, &mut out[off..], d, 0.0);
            }
        }
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            },
            &[q, k, v],
        ))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (rows, d) = (t.rows(), t.last_dim());
        let mut data = Vec::with_capacity(idx.len() * d);
        for &r in idx {
            if r >= rows {
                return Err(Error::Index {
                    what: "rows",
                    index: r,
                    bound: rows,
                });
            }
            data.extend_from_slice(t.row(r));
        }
        if idx.is_empty() {
            return Err(contract("gather of zero rows"));
        }
        Ok(self.push(
            Tensor::new(vec![idx.len(), d], data)?,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        ))
    }

    /// `out[r] = x[idx[r], col]`, shaped `[idx.len(), 1]`.
    pub fn gather_entries(&mut self, x: Var, idx: &[usize], col: usize) -> Result<Var> {
        let t = self.value(x);
        let (rows, d) = (t.rows(), t.last_dim());
        if col >= d {
            return Err(Error::Index {
                what: "columns",
                index: col,
                bound: d,
            });
        }
        if idx.is_empty() {
            return Err(contract("gather of zero entries"));
        }
        let mut data = Vec::with_capacity(idx.len());
        for &r in idx {
            if r >= rows {
                return Err(Error::Index {
                    what: "rows",
                    index: r,
                    bound: rows,
                });
            }
            data.push(t.data()[r * d + col]);
        }
        Ok(self.push(
            Tensor::new(vec![idx.len(), 1], data)?,
            Op::GatherEntries {
                x,
                idx: idx.to_vec(),
                col,
            },
            &[x],
        ))
    }

    /// Scales each row of `x` (`[R, d]`) by the matching entry of `s` (`[R, 1]`).
    pub fn mul_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = (self.value(x), self.value(s));
        let (rows, d) = (tx.rows(), tx.last_dim());
        if ts.shape() != [rows, 1] {
            return Err(Error::Dimension {
                op: "mul_rows",
                lhs: tx.shape().to_vec(),
                rhs: ts.shape().to_vec(),
            });
        }
        let sd = ts.data();
        let data = tx
            .data()
            .chunks(d)
            .zip(sd)
            .flat_map(|(row, &c)| row.iter().map(move |v| v * c))
            .collect();
        let shape = tx.shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::MulRows { x, s }, &[x, s]))
    }

    /// `base` plus each part's rows added at the listed row positions.
    pub fn scatter_add(&mut self, base: Var, parts: Vec<(Var, Vec<usize>)>) -> Result<Var> {
        let tb = self.value(base);
        let (rows, d) = (tb.rows(), tb.last_dim());
        let mut out = tb.data().to_vec();
        for (p, idx) in &parts {
            let tp = self.value(*p);
            if tp.last_dim() != d || tp.rows() != idx.len() {
                return Err(Error::Dimension {
                    op: "scatter_add",
                    lhs: tb.shape().to_vec(),
                    rhs: tp.shape().to_vec(),
                });
            }
            for (r, &dst) in idx.iter().enumerate() {
                if dst >= rows {
                    return Err(Error::Index {
                        what: "rows",
                        index: dst,
                        bound: rows,
                    });
                }
                for (o, v) in out[dst * d..(dst + 1) * d].iter_mut().zip(tp.row(r)) {
                    *o += v;
                }
            }
        }
        let mut inputs = vec![base];
        inputs.extend(parts.iter().map(|(p, _)| *p));
        let shape = tb.shape().to_vec();
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::ScatterAdd { base, parts },
            &inputs,
        ))
    }

    /// Keeps the `k` largest entries of every row (lowest index wins ties) and
    /// sets the rest to `-inf`.
    pub fn top_k_mask(&mut self, x: Var, k: usize) -> Result<Var> {
        let t = self.value(x);
        let n = t.last_dim();
        let mut out = t.data().to_vec();
        let mut kept = vec![false; out.len()];
        for r in 0..t.rows() {
            for i in crate::smoa::top_k_indices(t.row(r), k)? {
                kept[r * n + i] = true;
            }
        }
        for (o, &keep) in out.iter_mut().zip(&kept) {
            if !keep {
                *o = f64::NEG_INFINITY;
            }
        }
        let shape = t.shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::TopKMask { x, kept }, &[x]))
    }

    // ----------------------------------------------------------- backward

    fn add_grad(&mut self, v: Var, g: &[f64]) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(buf) => {
                for (b, x) in buf.iter_mut().zip(g) {
                    *b += x;
                }
            }
            None => node.grad = Some(g.to_vec()),
        }
    }

    /// Backpropagates from a scalar `loss`. Leaf gradients accumulate across
    /// calls; intermediate gradients are reset at the start of each call.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        for node in &mut self.nodes {
            if !matches!(node.op, Op::Leaf) {
                node.grad = None;
            }
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            self.backprop_node(i, &g)?;
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) -> Result<()> {
        // Move the op out so the node store can be borrowed freely; it is put
        // back unchanged at the end.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        let result = self.backprop_op(i, &op, g);
        self.nodes[i].op = op;
        result
    }

    fn backprop_op(&mut self, i: usize, op: &Op, g: &[f64]) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = self.value(*b).shape()[1];
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, false, self.value(*b).data(), true, &mut da, 0.0);
                    self.add_grad(*a, &da);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, self.value(*a).data(), true, g, false, &mut db, 0.0);
                    self.add_grad(*b, &db);
                }
            }
            Op::Add(a, b) => {
                self.add_grad(*a, g);
                self.add_grad(*b, g);
            }
            Op::AddBias(x, b) => {
                self.add_grad(*x, g);
                if self.needs(*b) {
                    let d = self.value(*b).numel();
                    let mut db = vec![0.0; d];
                    for row in g.chunks(d) {
                        for (acc, v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    self.add_grad(*b, &db);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(self.value(*b).data())
                        .map(|(x, y)| x * y)
                        .collect();
                    self.add_grad(*a, &da);
                }
                if self.needs(*b) {
                    let db: Vec<f64> = g
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(x, y)| x * y)
                        .collect();
                    self.add_grad(*b, &db);
                }
            }
            Op::Scale(x, c) => {
                let dx: Vec<f64> = g.iter().map(|v| v * c).collect();
                self.add_grad(*x, &dx);
            }
            Op::Sum(x) => {
                let dx = vec![g[0]; self.value(*x).numel()];
                self.add_grad(*x, &dx);
            }
            Op::Gelu(x) => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(gv, &xv)| gv * gelu_grad_scalar(xv))
                    .collect();
                self.add_grad(*x, &dx);
            }
            Op::Softmax { x, len, inner } => {
                let y = self.nodes[i].value.data();
                let mut dx = vec![0.0; y.len()];
                let outer = y.len() / (len * inner);
                for o in 0..outer {
                    for j in 0..*inner {
                        let base = o * len * inner + j;
                        let dot: f64 = (0..*len)
                            .map(|t| y[base + t * inner] * g[base + t * inner])
                            .sum();
                        for t in 0..*len {
                            let at = base + t * inner;
                            dx[at] = y[at] * (g[at] - dot);
                        }
                    }
                }
                self.add_grad(*x, &dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = self.value(*gain).numel();
                let gv = self.value(*gain).data().to_vec();
                if self.needs(*x) {
                    let mut dx = vec![0.0; xhat.len()];
                    for (r, &inv) in inv_std.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            sum_dh += dh;
                            sum_dh_h += dh * hr[j];
                        }
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            dx[r * d + j] =
                                inv / d as f64 * (d as f64 * dh - sum_dh - hr[j] * sum_dh_h);
                        }
                    }
                    self.add_grad(*x, &dx);
                }
                if self.needs(*gain) || self.needs(*bias) {
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += grow[j] * hrow[j];
                            db[j] += grow[j];
                        }
                    }
                    self.add_grad(*gain, &dg);
                    self.add_grad(*bias, &db);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    self.add_grad(p, &g[offset..offset + n]);
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = self.nodes[i].value.last_dim();
                let mut col = 0;
                for &p in parts {
                    let (rows, c) = (self.value(p).rows(), self.value(p).last_dim());
                    if self.needs(p) {
                        let mut dp = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            dp.extend_from_slice(&g[r * total + col..r * total + col + c]);
                        }
                        self.add_grad(p, &dp);
                    }
                    col += c;
                }
            }
            Op::Embedding { table, ids } => {
                if self.needs(*table) {
                    let t = self.value(*table);
                    let d = t.last_dim();
                    let mut dt = vec![0.0; t.numel()];
                    for (r, &id) in ids.iter().enumerate() {
                        for (acc, v) in dt[id * d..(id + 1) * d].iter_mut().zip(&g[r * d..]) {
                            *acc += v;
                        }
                    }
                    self.add_grad(*table, &dt);
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = self.value(*logits).last_dim();
                let scale = g[0] / labels.len() as f64;
                let mut dl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &label) in labels.iter().enumerate() {
                    dl[r * c + label] -= scale;
                }
                self.add_grad(*logits, &dl);
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            } => {
                let (batch, seq, heads) = (*batch, *seq, *heads);
                let d = self.value(*q).last_dim();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                );
                let mut dq = vec![0.0; qd.len()];
                let mut dk = vec![0.0; kd.len()];
                let mut dv = vec![0.0; vd.len()];
                let mut dp = vec![0.0; seq * seq];
                for b in 0..batch {
                    for h in 0..heads {
                        let off = b * seq * d + h * dh;
                        let p = &probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                        // dP = dO V^T
                        gemm_strided(seq, dh, seq, &g[off..], d, 1, &vd[off..], 1, d, &mut dp, seq, 0.0);
                        // dV += P^T dO
                        gemm_strided(seq, seq, dh, p, 1, seq, &g[off..], d, 1, &mut dv[off..], d, 1.0);
                        for r in 0..seq {
                            let pr = &p[r * seq..(r + 1) * seq];
                            let dr = &mut dp[r * seq..(r + 1) * seq];
                            let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                            for (dv_, &pv) in dr.iter_mut().zip(pr) {
                                *dv_ = pv * (*dv_ - dot) * scale;
                            }
                        }
                        // dQ += dS K, dK += dS^T Q
                        gemm_strided(seq, seq, dh, &dp, seq, 1, &kd[off..], d, 1, &mut dq[off..], d, 1.0);
                        gemm_strided(seq, seq, dh, &dp, 1, seq, &qd[off..], d, 1, &mut dk[off..], d, 1.0);
                    }
                }
                self.add_grad(*q, &dq);
                self.add_grad(*k, &dk);
                self.add_grad(*v, &dv);
            }
            Op::GatherRows { x, idx } => {
                if self.needs(*x) {
                    let t = self.value(*x);
                    let d = t.last_dim();
                    let mut dx = vec![0.0; t.numel()];
                    for (r, &src) in idx.iter().enumerate() {
                        for (acc, v) in dx[src * d..(src + 1) * d].iter_mut().zip(&g[r * d..]) {
                            *acc += v;
                        }
                    }
                    self.add_grad(*x, &dx);
                }
            }
            Op::GatherEntries { x, idx, col } => {
                if self.needs(*x) {
                    let t = self.value(*x);
                    let d = t.last_dim();
                    let mut dx = vec![0.0; t.numel()];
                    for (r, &src) in idx.iter().enumerate() {
                        dx[src * d + col] += g[r];
                    }
                    self.add_grad(*x, &dx);
                }
            }
            Op::MulRows { x, s } => {
                let d = self.value(*x).last_dim();
                if self.needs(*x) {
                    let sd = self.value(*s).data();
                    let dx: Vec<f64> = g
                        .chunks(d)
                        .zip(sd)
                        .flat_map(|(row, &c)| row.iter().map(move |v| v * c))
                        .collect();
                    self.add_grad(*x, &dx);
                }
                if self.needs(*s) {
                    let ds: Vec<f64> = g
                        .chunks(d)
                        .zip(self.value(*x).data().chunks(d))
                        .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                        .collect();
                    self.add_grad(*s, &ds);
                }
            }
            Op::ScatterAdd { base, parts } => {
                self.add_grad(*base, g);
                let d = self.value(*base).last_dim();
                for (p, idx) in parts {
                    if self.needs(*p) {
                        let mut dp = Vec::with_capacity(idx.len() * d);
                        for &dst in idx {
                            dp.extend_from_slice(&g[dst * d..(dst + 1) * d]);
                        }
                        self.add_grad(*p, &dp);
                    }
                }
            }
            Op::TopKMask { x, kept } => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(kept)
                    .map(|(&v, &keep)| if keep { v } else { 0.0 })
                    .collect();
                self.add_grad(*x, &dx);
            }
        }
        Ok(())
    }
}
