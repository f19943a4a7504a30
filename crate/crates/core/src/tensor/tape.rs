use crate::error::{fmt_shape, Error, Result};

use super::Tensor;

/// Epsilon inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        c: f64,
    },
    AddBias {
        x: usize,
        bias: usize,
    },
    Relu {
        x: usize,
    },
    Transpose {
        x: usize,
    },
    SliceCols {
        x: usize,
        start: usize,
        len: usize,
    },
    ConcatCols {
        parts: Vec<usize>,
    },
    GateRows {
        x: usize,
        keep: Vec<bool>,
    },
    MulMask {
        x: usize,
        mask: Vec<f64>,
    },
    MaskedSoftmax {
        x: usize,
        mask: Vec<bool>,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
    },
    Embed {
        table: usize,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        include: Vec<bool>,
        denom: f64,
    },
    Sum {
        x: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of primitive operations. Replaying it backward visits
/// each node exactly once, in reverse topological order (nodes only
/// reference earlier nodes).
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    spent: bool,
}

// row-major kernels; accumulation over the inner dimension is always in
// ascending index order, which keeps results bit-reproducible
fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let a_ip = a[i * k + p];
            let b_row = &b[p * n..(p + 1) * n];
            let c_row = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                c_row[j] += a_ip * b_row[j];
            }
        }
    }
    c
}

/// a[m,k] @ b[n,k]^T -> [m,n]
fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for p in 0..k {
                s += a_row[p] * b_row[p];
            }
            c[i * n + j] = s;
        }
    }
    c
}

/// a[k,m]^T @ b[k,n] -> [m,n]
fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let a_pi = a_row[i];
            let c_row = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                c_row[j] += a_pi * b_row[j];
            }
        }
    }
    c
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record an input tensor. The tape owns a copy.
    pub fn leaf(&mut self, t: &Tensor) -> TensorId {
        self.push(t.clone(), Op::Leaf)
    }

    pub fn leaf_owned(&mut self, t: Tensor) -> TensorId {
        self.push(t, Op::Leaf)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        self.nodes[id.0].value.data()
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Gradient of a node, available after [`Tape::backward`].
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad()
    }

    fn push(&mut self, value: Tensor, op: Op) -> TensorId {
        self.nodes.push(Node { value, op });
        TensorId(self.nodes.len() - 1)
    }

    fn dims2(&self, id: TensorId, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(id);
        if s.len() != 2 {
            return Err(Error::Shape {
                op,
                lhs: fmt_shape(s),
                rhs: "expected 2-D".into(),
            });
        }
        Ok((s[0], s[1]))
    }

    /// Standard matrix product a[m,k] @ b[k,n].
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, ka) = self.dims2(a, "matmul")?;
        let (kb, n) = self.dims2(b, "matmul")?;
        if ka != kb {
            return Err(Error::Shape {
                op: "matmul",
                lhs: fmt_shape(self.shape(a)),
                rhs: fmt_shape(self.shape(b)),
            });
        }
        let data = matmul_nn(self.data(a), self.data(b), m, ka, n);
        let value = Tensor::from_vec(vec![m, n], data)?;
        Ok(self.push(value, Op::MatMul { a: a.0, b: b.0 }))
    }

    fn binary_same_shape(
        &mut self,
        a: TensorId,
        b: TensorId,
        op_name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op: op_name,
                lhs: fmt_shape(self.shape(a)),
                rhs: fmt_shape(self.shape(b)),
            });
        }
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::from_vec(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, op))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape(a, b, "add", |x, y| x + y, Op::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape(a, b, "sub", |x, y| x - y, Op::Sub { a: a.0, b: b.0 })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape(a, b, "mul", |x, y| x * y, Op::Mul { a: a.0, b: b.0 })
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> TensorId {
        let data: Vec<f64> = self.data(x).iter().map(|&v| v * c).collect();
        let value = Tensor::from_vec(self.shape(x).to_vec(), data).unwrap();
        self.push(value, Op::Scale { x: x.0, c })
    }

    /// x[r,d] + bias[d], broadcast over rows.
    pub fn add_bias(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let (r, d) = self.dims2(x, "add_bias")?;
        if self.shape(bias) != [d] {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: fmt_shape(self.shape(x)),
                rhs: fmt_shape(self.shape(bias)),
            });
        }
        let xb = self.data(x);
        let bb = self.data(bias);
        let mut data = vec![0.0; r * d];
        for i in 0..r {
            for j in 0..d {
                data[i * d + j] = xb[i * d + j] + bb[j];
            }
        }
        let value = Tensor::from_vec(vec![r, d], data)?;
        Ok(self.push(value, Op::AddBias { x: x.0, bias: bias.0 }))
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let data: Vec<f64> = self.data(x).iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::from_vec(self.shape(x).to_vec(), data).unwrap();
        self.push(value, Op::Relu { x: x.0 })
    }

    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId> {
        let (r, c) = self.dims2(x, "transpose")?;
        let xd = self.data(x);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = xd[i * c + j];
            }
        }
        let value = Tensor::from_vec(vec![c, r], data)?;
        Ok(self.push(value, Op::Transpose { x: x.0 }))
    }

    /// Columns [start, start+len) of a 2-D tensor.
    pub fn slice_cols(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (r, c) = self.dims2(x, "slice_cols")?;
        if start + len > c || len == 0 {
            return Err(Error::IndexOutOfRange {
                what: "column slice",
                index: start + len,
                bound: c,
            });
        }
        let xd = self.data(x);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&xd[i * c + start..i * c + start + len]);
        }
        let value = Tensor::from_vec(vec![r, len], data)?;
        Ok(self.push(value, Op::SliceCols { x: x.0, start, len }))
    }

    /// Concatenate 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::validation("concat_cols: no inputs"));
        }
        let (r, _) = self.dims2(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (rp, cp) = self.dims2(p, "concat_cols")?;
            if rp != r {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: fmt_shape(self.shape(parts[0])),
                    rhs: fmt_shape(self.shape(p)),
                });
            }
            widths.push(cp);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                let pd = self.data(p);
                data.extend_from_slice(&pd[i * w..(i + 1) * w]);
            }
        }
        let value = Tensor::from_vec(vec![r, total], data)?;
        Ok(self.push(
            value,
            Op::ConcatCols {
                parts: parts.iter().map(|p| p.0).collect(),
            },
        ))
    }

    /// Zero out whole rows of a 2-D tensor where `keep` is false.
    pub fn gate_rows(&mut self, x: TensorId, keep: &[bool]) -> Result<TensorId> {
        let (r, c) = self.dims2(x, "gate_rows")?;
        if keep.len() != r {
            return Err(Error::Shape {
                op: "gate_rows",
                lhs: fmt_shape(self.shape(x)),
                rhs: format!("keep[{}]", keep.len()),
            });
        }
        let xd = self.data(x);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            if keep[i] {
                data[i * c..(i + 1) * c].copy_from_slice(&xd[i * c..(i + 1) * c]);
            }
        }
        let value = Tensor::from_vec(vec![r, c], data)?;
        Ok(self.push(
            value,
            Op::GateRows {
                x: x.0,
                keep: keep.to_vec(),
            },
        ))
    }

    /// Elementwise product with a constant mask (dropout).
    pub fn mul_mask(&mut self, x: TensorId, mask: Vec<f64>) -> Result<TensorId> {
        if mask.len() != self.data(x).len() {
            return Err(Error::Shape {
                op: "mul_mask",
                lhs: fmt_shape(self.shape(x)),
                rhs: format!("mask[{}]", mask.len()),
            });
        }
        let data: Vec<f64> = self.data(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::from_vec(self.shape(x).to_vec(), data)?;
        Ok(self.push(value, Op::MulMask { x: x.0, mask }))
    }

    /// Row-wise softmax over enabled keys only. Disabled positions are
    /// exactly zero. A fully-masked row yields all zeros; callers must not
    /// consume attention output for such rows.
    pub fn masked_softmax(&mut self, logits: TensorId, mask: &[bool]) -> Result<TensorId> {
        let (q, k) = self.dims2(logits, "masked_softmax")?;
        if mask.len() != q * k {
            return Err(Error::Shape {
                op: "masked_softmax",
                lhs: fmt_shape(self.shape(logits)),
                rhs: format!("mask[{}]", mask.len()),
            });
        }
        let xd = self.data(logits);
        let mut data = vec![0.0; q * k];
        for i in 0..q {
            let row = &xd[i * k..(i + 1) * k];
            let mrow = &mask[i * k..(i + 1) * k];
            let mut max = f64::NEG_INFINITY;
            for j in 0..k {
                if mrow[j] && row[j] > max {
                    max = row[j];
                }
            }
            if max == f64::NEG_INFINITY {
                continue; // fully masked row stays zero
            }
            let mut sum = 0.0;
            for j in 0..k {
                if mrow[j] {
                    let e = (row[j] - max).exp();
                    data[i * k + j] = e;
                    sum += e;
                }
            }
            for j in 0..k {
                if mrow[j] {
                    data[i * k + j] /= sum;
                }
            }
        }
        let value = Tensor::from_vec(vec![q, k], data)?;
        Ok(self.push(
            value,
            Op::MaskedSoftmax {
                x: logits.0,
                mask: mask.to_vec(),
            },
        ))
    }

    /// Layer normalization over the last dimension with affine gain/bias.
    /// Epsilon 1e-6 sits inside the square root.
    pub fn layer_norm(&mut self, x: TensorId, gain: TensorId, bias: TensorId) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::validation("layer_norm: 0-d input"))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: fmt_shape(&shape),
                rhs: format!("gain {} bias {}", fmt_shape(self.shape(gain)), fmt_shape(self.shape(bias))),
            });
        }
        let xd = self.data(x);
        let g = self.data(gain);
        let b = self.data(bias);
        let rows = xd.len() / d;
        let mut data = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for j in 0..d {
                data[r * d + j] = (row[j] - mean) * inv_std * g[j] + b[j];
            }
        }
        let value = Tensor::from_vec(shape, data)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
            },
        ))
    }

    /// Gather rows of an embedding table: out[i] = table[ids[i]].
    pub fn embed(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId> {
        let (v, d) = self.dims2(table, "embed")?;
        for &id in ids {
            if id >= v {
                return Err(Error::IndexOutOfRange {
                    what: "embedding",
                    index: id,
                    bound: v,
                });
            }
        }
        let td = self.data(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(&td[id * d..(id + 1) * d]);
        }
        let value = Tensor::from_vec(vec![ids.len(), d], data)?;
        Ok(self.push(
            value,
            Op::Embed {
                table: table.0,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Mean negative log-softmax probability of the targets over included
    /// positions. Positions with `include[i] == false` are excluded.
    pub fn cross_entropy(
        &mut self,
        logits: TensorId,
        targets: &[usize],
        include: &[bool],
    ) -> Result<TensorId> {
        let count = include.iter().filter(|&&b| b).count();
        if count == 0 {
            return Err(Error::validation("cross_entropy: no included positions"));
        }
        self.cross_entropy_with_denom(logits, targets, include, count as f64)
    }

    /// Sum (not mean) of negative log-probabilities over included positions.
    pub fn cross_entropy_sum(
        &mut self,
        logits: TensorId,
        targets: &[usize],
        include: &[bool],
    ) -> Result<TensorId> {
        self.cross_entropy_with_denom(logits, targets, include, 1.0)
    }

    fn cross_entropy_with_denom(
        &mut self,
        logits: TensorId,
        targets: &[usize],
        include: &[bool],
        denom: f64,
    ) -> Result<TensorId> {
        let (n, vocab) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != n || include.len() != n {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: fmt_shape(self.shape(logits)),
                rhs: format!("targets[{}] include[{}]", targets.len(), include.len()),
            });
        }
        for &t in targets {
            if t >= vocab {
                return Err(Error::IndexOutOfRange {
                    what: "target",
                    index: t,
                    bound: vocab,
                });
            }
        }
        let xd = self.data(logits);
        let mut total = 0.0;
        for i in 0..n {
            if !include[i] {
                continue;
            }
            let row = &xd[i * vocab..(i + 1) * vocab];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
            total -= row[targets[i]] - lse;
        }
        let value = Tensor::scalar(total / denom);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                include: include.to_vec(),
                denom,
            },
        ))
    }

    /// Sum of all elements.
    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let s = self.data(x).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { x: x.0 })
    }

    /// Reverse sweep from a scalar loss. Populates gradients on every
    /// reachable node; read them back with [`Tape::grad`]. A tape can be
    /// swept only once; re-tape to differentiate again.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.spent {
            return Err(Error::State("backward called twice without re-taping"));
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::validation(format!(
                "backward: loss must be scalar, got shape {}",
                fmt_shape(self.shape(loss))
            )));
        }
        self.spent = true;

        let n = self.nodes.len();
        let mut grads: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|node| vec![0.0; node.value.numel()])
            .collect();
        grads[loss.0][0] = 1.0;

        for i in (0..n).rev() {
            // steal this node's grad to satisfy the borrow checker,
            // restored after the match
            let g = std::mem::take(&mut grads[i]);
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::MatMul { a, b } => {
                    let (m, k) = {
                        let s = self.nodes[*a].value.shape();
                        (s[0], s[1])
                    };
                    let n_cols = self.nodes[*b].value.shape()[1];
                    let da = matmul_nt(&g, self.nodes[*b].value.data(), m, n_cols, k);
                    let db = matmul_tn(self.nodes[*a].value.data(), &g, k, m, n_cols);
                    accumulate(&mut grads[*a], &da);
                    accumulate(&mut grads[*b], &db);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads[*a], &g);
                    accumulate(&mut grads[*b], &g);
                }
                Op::Sub { a, b } => {
                    accumulate(&mut grads[*a], &g);
                    for (dst, &gv) in grads[*b].iter_mut().zip(&g) {
                        *dst -= gv;
                    }
                }
                Op::Mul { a, b } => {
                    let (ai, bi) = (*a, *b);
                    for j in 0..g.len() {
                        grads[ai][j] += g[j] * self.nodes[bi].value.data()[j];
                    }
                    for j in 0..g.len() {
                        grads[bi][j] += g[j] * self.nodes[ai].value.data()[j];
                    }
                }
                Op::Scale { x, c } => {
                    for (dst, &gv) in grads[*x].iter_mut().zip(&g) {
                        *dst += gv * c;
                    }
                }
                Op::AddBias { x, bias } => {
                    accumulate(&mut grads[*x], &g);
                    let d = self.nodes[*bias].value.numel();
                    let rows = g.len() / d;
                    for r in 0..rows {
                        for j in 0..d {
                            grads[*bias][j] += g[r * d + j];
                        }
                    }
                }
                Op::Relu { x } => {
                    let xd = self.nodes[*x].value.data();
                    for j in 0..g.len() {
                        if xd[j] > 0.0 {
                            grads[*x][j] += g[j];
                        }
                    }
                }
                Op::Transpose { x } => {
                    let s = self.nodes[i].value.shape();
                    let (r, c) = (s[0], s[1]);
                    for ii in 0..r {
                        for jj in 0..c {
                            grads[*x][jj * r + ii] += g[ii * c + jj];
                        }
                    }
                }
                Op::SliceCols { x, start, len } => {
                    let c = self.nodes[*x].value.shape()[1];
                    let rows = g.len() / len;
                    for r in 0..rows {
                        for j in 0..*len {
                            grads[*x][r * c + start + j] += g[r * len + j];
                        }
                    }
                }
                Op::ConcatCols { parts } => {
                    let total: usize = self.nodes[i].value.shape()[1];
                    let rows = self.nodes[i].value.shape()[0];
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.nodes[p].value.shape()[1];
                        for r in 0..rows {
                            for j in 0..w {
                                grads[p][r * w + j] += g[r * total + offset + j];
                            }
                        }
                        offset += w;
                    }
                }
                Op::GateRows { x, keep } => {
                    let c = self.nodes[*x].value.shape()[1];
                    for (r, &kept) in keep.iter().enumerate() {
                        if kept {
                            for j in 0..c {
                                grads[*x][r * c + j] += g[r * c + j];
                            }
                        }
                    }
                }
                Op::MulMask { x, mask } => {
                    for j in 0..g.len() {
                        grads[*x][j] += g[j] * mask[j];
                    }
                }
                Op::MaskedSoftmax { x, mask } => {
                    let out = self.nodes[i].value.data();
                    let s = self.nodes[i].value.shape();
                    let (q, k) = (s[0], s[1]);
                    for r in 0..q {
                        let row = &out[r * k..(r + 1) * k];
                        let grow = &g[r * k..(r + 1) * k];
                        let mrow = &mask[r * k..(r + 1) * k];
                        let mut dot = 0.0;
                        for j in 0..k {
                            if mrow[j] {
                                dot += grow[j] * row[j];
                            }
                        }
                        for j in 0..k {
                            if mrow[j] {
                                grads[*x][r * k + j] += row[j] * (grow[j] - dot);
                            }
                        }
                    }
                }
                Op::LayerNorm { x, gain, bias } => {
                    let xd = self.nodes[*x].value.data();
                    let gd = self.nodes[*gain].value.data();
                    let d = self.nodes[*gain].value.numel();
                    let rows = xd.len() / d;
                    for r in 0..rows {
                        let row = &xd[r * d..(r + 1) * d];
                        let grow = &g[r * d..(r + 1) * d];
                        let mean = row.iter().sum::<f64>() / d as f64;
                        let var =
                            row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv_std).collect();
                        let mut dxhat = vec![0.0; d];
                        for j in 0..d {
                            grads[*gain][j] += grow[j] * xhat[j];
                            grads[*bias][j] += grow[j];
                            dxhat[j] = grow[j] * gd[j];
                        }
                        let sum_dxhat: f64 = dxhat.iter().sum();
                        let sum_dxhat_xhat: f64 =
                            dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                        let df = d as f64;
                        for j in 0..d {
                            grads[*x][r * d + j] += inv_std / df
                                * (df * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                        }
                    }
                }
                Op::Embed { table, ids } => {
                    let d = self.nodes[*table].value.shape()[1];
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            grads[*table][id * d + j] += g[r * d + j];
                        }
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    include,
                    denom,
                } => {
                    let xd = self.nodes[*logits].value.data();
                    let vocab = self.nodes[*logits].value.shape()[1];
                    let scale = g[0] / denom;
                    for (r, (&t, &inc)) in targets.iter().zip(include).enumerate() {
                        if !inc {
                            continue;
                        }
                        let row = &xd[r * vocab..(r + 1) * vocab];
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
                        for j in 0..vocab {
                            let p = (row[j] - max).exp() / sum;
                            let indicator = if j == t { 1.0 } else { 0.0 };
                            grads[*logits][r * vocab + j] += scale * (p - indicator);
                        }
                    }
                }
                Op::Sum { x } => {
                    for dst in grads[*x].iter_mut() {
                        *dst += g[0];
                    }
                }
            }
            grads[i] = g;
        }

        for (node, grad) in self.nodes.iter_mut().zip(grads) {
            node.value.set_grad(grad);
        }
        Ok(())
    }
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = tape.leaf(&Tensor::from_vec(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.data(c), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_one_by_one() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::from_vec(vec![1, 1], vec![2.0]).unwrap());
        let b = tape.leaf(&Tensor::from_vec(vec![1, 1], vec![3.0]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.data(c), &[6.0]);
    }

    // naive textbook triple loop, independent of the kernels above
    fn matmul_oracle(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let (m, k, n) = (4, 5, 3);
        let a: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let ta = tape.leaf(&Tensor::from_vec(vec![m, k], a.clone()).unwrap());
        let tb = tape.leaf(&Tensor::from_vec(vec![k, n], b.clone()).unwrap());
        let tc = tape.matmul(ta, tb).unwrap();
        let expect = matmul_oracle(&a, &b, m, k, n);
        for (got, want) in tape.data(tc).iter().zip(&expect) {
            assert!(close(*got, *want, 1e-12), "{got} vs {want}");
        }
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::zeros(vec![2, 3]));
        let b = tape.leaf(&Tensor::zeros(vec![4, 2]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn masked_softmax_uniform() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(vec![1, 3], vec![0.0, 0.0, 0.0]).unwrap());
        let s = tape.masked_softmax(x, &[true, true, true]).unwrap();
        for &v in tape.data(s) {
            assert!(close(v, 1.0 / 3.0, 1e-15));
        }
    }

    #[test]
    fn masked_softmax_single_enabled_key() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(vec![1, 2], vec![5.0, -1000.0]).unwrap());
        let s = tape.masked_softmax(x, &[true, false]).unwrap();
        assert_eq!(tape.data(s), &[1.0, 0.0]);
    }

    #[test]
    fn masked_softmax_hand_computed() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let s = tape.masked_softmax(x, &[true, false, true]).unwrap();
        let denom = 1f64.exp() + 3f64.exp();
        assert!(close(tape.data(s)[0], 1f64.exp() / denom, 1e-12));
        assert_eq!(tape.data(s)[1], 0.0);
        assert!(close(tape.data(s)[2], 3f64.exp() / denom, 1e-12));
    }

    #[test]
    fn masked_softmax_fully_masked_row_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let s = tape.masked_softmax(x, &[false, false, true, true]).unwrap();
        assert_eq!(&tape.data(s)[..2], &[0.0, 0.0]);
        let r1: f64 = tape.data(s)[2..].iter().sum();
        assert!(close(r1, 1.0, 1e-12));
    }

    #[test]
    fn layer_norm_constant_input_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(vec![1, 4], vec![1.0; 4]).unwrap());
        let g = tape.leaf(&Tensor::filled(vec![4], 1.0));
        let b = tape.leaf(&Tensor::zeros(vec![4]));
        let y = tape.layer_norm(x, g, b).unwrap();
        for &v in tape.data(y) {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn layer_norm_unit_variance_fixed_point() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(vec![1, 2], vec![-1.0, 1.0]).unwrap());
        let g = tape.leaf(&Tensor::filled(vec![2], 1.0));
        let b = tape.leaf(&Tensor::zeros(vec![2]));
        let y = tape.layer_norm(x, g, b).unwrap();
        assert!(close(tape.data(y)[0], -1.0, 1e-6));
        assert!(close(tape.data(y)[1], 1.0, 1e-6));
    }

    #[test]
    fn layer_norm_affine_hand_computed() {
        // x=[0,2]: mean 1, var 1; xhat = ±1/sqrt(1+eps); y = 2*xhat + 1
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(vec![1, 2], vec![0.0, 2.0]).unwrap());
        let g = tape.leaf(&Tensor::filled(vec![2], 2.0));
        let b = tape.leaf(&Tensor::filled(vec![2], 1.0));
        let y = tape.layer_norm(x, g, b).unwrap();
        let xhat = 1.0 / (1.0f64 + LAYER_NORM_EPS).sqrt();
        assert!(close(tape.data(y)[0], 1.0 - 2.0 * xhat, 1e-12));
        assert!(close(tape.data(y)[1], 1.0 + 2.0 * xhat, 1e-12));
        assert!(close(tape.data(y)[0], -1.0, 1e-5));
        assert!(close(tape.data(y)[1], 3.0, 1e-5));
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut tape = Tape::new();
        let logits = tape.leaf(&Tensor::zeros(vec![2, 4]));
        let loss = tape.cross_entropy(logits, &[1, 3], &[true, true]).unwrap();
        assert!(close(tape.data(loss)[0], 4f64.ln(), 1e-12));
    }

    #[test]
    fn cross_entropy_near_certain_prediction() {
        let mut tape = Tape::new();
        let mut t = Tensor::zeros(vec![1, 4]);
        t.data_mut()[2] = 1000.0;
        let logits = tape.leaf(&t);
        let loss = tape.cross_entropy(logits, &[2], &[true]).unwrap();
        assert!(tape.data(loss)[0].abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_hand_computed_two_positions() {
        let rows = [vec![0.3, -0.7, 1.1], vec![-2.0, 0.5, 0.0]];
        let targets = [2usize, 1usize];
        // independent computation: softmax + log per position, then mean
        let mut expect = 0.0;
        for (row, &t) in rows.iter().zip(&targets) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
            expect -= row[t] - lse;
        }
        expect /= 2.0;

        let mut tape = Tape::new();
        let logits = tape.leaf(
            &Tensor::from_vec(vec![2, 3], rows.concat()).unwrap(),
        );
        let loss = tape.cross_entropy(logits, &targets, &[true, true]).unwrap();
        assert!(close(tape.data(loss)[0], expect, 1e-10));
    }

    #[test]
    fn cross_entropy_target_out_of_range() {
        let mut tape = Tape::new();
        let logits = tape.leaf(&Tensor::zeros(vec![1, 4]));
        assert!(matches!(
            tape.cross_entropy(logits, &[4], &[true]),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn cross_entropy_excludes_padding() {
        let mut tape = Tape::new();
        let mut t = Tensor::zeros(vec![2, 4]);
        t.data_mut()[4] = 50.0; // junk logits on the excluded row
        let logits = tape.leaf(&t);
        let loss = tape.cross_entropy(logits, &[0, 0], &[true, false]).unwrap();
        assert!(close(tape.data(loss)[0], 4f64.ln(), 1e-12));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap());
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_twice_is_a_state_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(3.0));
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::State(_))));
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(vec![2, 2]));
        assert!(tape.backward(x).is_err());
    }

    /// Central finite differences over a closure that rebuilds the tape.
    fn finite_diff_grads(
        f: &dyn Fn(&[Tensor]) -> f64,
        params: &[Tensor],
        step: f64,
    ) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        for p in 0..params.len() {
            let mut g = vec![0.0; params[p].numel()];
            for j in 0..params[p].numel() {
                let mut plus = params.to_vec();
                plus[p].data_mut()[j] += step;
                let mut minus = params.to_vec();
                minus[p].data_mut()[j] -= step;
                g[j] = (f(&plus) - f(&minus)) / (2.0 * step);
            }
            out.push(g);
        }
        out
    }

    fn assert_grads_close(analytic: &[f64], numeric: &[f64], name: &str) {
        for (j, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
            let denom = a.abs().max(n.abs()).max(1e-6);
            let rel = (a - n).abs() / denom;
            assert!(
                rel < 1e-3 || (a - n).abs() < 1e-6,
                "{name}[{j}]: analytic {a} vs numeric {n}"
            );
        }
    }

    #[test]
    fn gradcheck_composed_attention_like_function() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let t = 4;
        let d = 3;
        let x = Tensor::randn(vec![t, d], 0.5, &mut rng);
        let wq = Tensor::randn(vec![d, d], 0.5, &mut rng);
        let wk = Tensor::randn(vec![d, d], 0.5, &mut rng);
        let wv = Tensor::randn(vec![d, d], 0.5, &mut rng);
        let gain = Tensor::randn(vec![d], 0.3, &mut rng);
        let bias = Tensor::randn(vec![d], 0.3, &mut rng);
        let mask: Vec<bool> = (0..t)
            .flat_map(|q| (0..t).map(move |k| k <= q))
            .collect();

        let params = vec![x, wq, wk, wv, gain, bias];
        let run = |p: &[Tensor]| -> (Tape, Vec<TensorId>, TensorId) {
            let mut tape = Tape::new();
            let ids: Vec<TensorId> = p.iter().map(|t| tape.leaf(t)).collect();
            let q = tape.matmul(ids[0], ids[1]).unwrap();
            let k = tape.matmul(ids[0], ids[2]).unwrap();
            let v = tape.matmul(ids[0], ids[3]).unwrap();
            let kt = tape.transpose(k).unwrap();
            let scores = tape.matmul(q, kt).unwrap();
            let scores = tape.scale(scores, 1.0 / (3f64).sqrt());
            let attn = tape.masked_softmax(scores, &mask).unwrap();
            let ctx = tape.matmul(attn, v).unwrap();
            let normed = tape.layer_norm(ctx, ids[4], ids[5]).unwrap();
            let act = tape.relu(normed);
            let loss = tape.cross_entropy(act, &[0, 1, 2, 0], &[true, true, false, true]).unwrap();
            (tape, ids, loss)
        };

        let (mut tape, ids, loss) = run(&params);
        tape.backward(loss).unwrap();
        let numeric = finite_diff_grads(
            &|p: &[Tensor]| {
                let (tape, _, loss) = run(p);
                tape.data(loss)[0]
            },
            &params,
            1e-4,
        );
        for (i, name) in ["x", "wq", "wk", "wv", "gain", "bias"].iter().enumerate() {
            assert_grads_close(tape.grad(ids[i]).unwrap(), &numeric[i], name);
        }
    }

    #[test]
    fn gradcheck_slice_concat_gate_embed() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let table = Tensor::randn(vec![5, 4], 0.8, &mut rng);
        let w = Tensor::randn(vec![4, 3], 0.8, &mut rng);
        let params = vec![table, w];
        let ids_in = [0usize, 3, 1];

        let run = |p: &[Tensor]| -> (Tape, Vec<TensorId>, TensorId) {
            let mut tape = Tape::new();
            let leaf_ids: Vec<TensorId> = p.iter().map(|t| tape.leaf(t)).collect();
            let e = tape.embed(leaf_ids[0], &ids_in).unwrap();
            let left = tape.slice_cols(e, 0, 2).unwrap();
            let right = tape.slice_cols(e, 2, 2).unwrap();
            let both = tape.concat_cols(&[right, left]).unwrap();
            let gated = tape.gate_rows(both, &[true, false, true]).unwrap();
            let h = tape.matmul(gated, leaf_ids[1]).unwrap();
            let loss = tape.cross_entropy(h, &[2, 0, 1], &[true, true, true]).unwrap();
            (tape, leaf_ids, loss)
        };

        let (mut tape, leaf_ids, loss) = run(&params);
        tape.backward(loss).unwrap();
        let numeric = finite_diff_grads(
            &|p: &[Tensor]| {
                let (tape, _, loss) = run(p);
                tape.data(loss)[0]
            },
            &params,
            1e-4,
        );
        assert_grads_close(tape.grad(leaf_ids[0]).unwrap(), &numeric[0], "table");
        assert_grads_close(tape.grad(leaf_ids[1]).unwrap(), &numeric[1], "w");
    }

    #[test]
    fn unused_embedding_row_gets_zero_grad() {
        let mut tape = Tape::new();
        let table = tape.leaf(&Tensor::from_vec(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let e = tape.embed(table, &[0, 0]).unwrap();
        let loss = tape.sum(e);
        tape.backward(loss).unwrap();
        let g = tape.grad(table).unwrap();
        assert_eq!(&g[2..], &[0.0, 0.0, 0.0, 0.0]);
        assert_eq!(&g[..2], &[2.0, 2.0]);
    }

    #[test]
    fn determinism_same_inputs_bit_identical() {
        use rand::SeedableRng;
        let run = || {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
            let x = Tensor::randn(vec![6, 6], 1.0, &mut rng);
            let w = Tensor::randn(vec![6, 6], 1.0, &mut rng);
            let mut tape = Tape::new();
            let xi = tape.leaf(&x);
            let wi = tape.leaf(&w);
            let h = tape.matmul(xi, wi).unwrap();
            let mask: Vec<bool> = (0..36).map(|i| i % 3 != 1).collect();
            let s = tape.masked_softmax(h, &mask).unwrap();
            let loss = tape.cross_entropy(s, &[0, 1, 2, 3, 4, 5], &[true; 6]).unwrap();
            tape.backward(loss).unwrap();
            (
                tape.data(loss).to_vec(),
                tape.grad(xi).unwrap().to_vec(),
                tape.grad(wi).unwrap().to_vec(),
            )
        };
        let (l1, gx1, gw1) = run();
        let (l2, gx2, gw2) = run();
        assert_eq!(l1, l2);
        assert_eq!(gx1, gx2);
        assert_eq!(gw1, gw2);
    }
}

#[cfg(test)]
mod prop_tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn masked_softmax_rows_sum_to_one(
            q in 1usize..6,
            k in 1usize..6,
            seed in 0u64..1000,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let logits: Vec<f64> = (0..q * k).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let mut mask: Vec<bool> = (0..q * k).map(|_| rng.gen_bool(0.5)).collect();
            // guarantee at least one enabled key per row
            for r in 0..q {
                let j = rng.gen_range(0..k);
                mask[r * k + j] = true;
            }
            let mut tape = Tape::new();
            let x = tape.leaf(&Tensor::from_vec(vec![q, k], logits).unwrap());
            let s = tape.masked_softmax(x, &mask).unwrap();
            for r in 0..q {
                let row_sum: f64 = tape.data(s)[r * k..(r + 1) * k].iter().sum();
                prop_assert!((row_sum - 1.0).abs() < 1e-12);
                for j in 0..k {
                    if !mask[r * k + j] {
                        prop_assert_eq!(tape.data(s)[r * k + j], 0.0);
                    }
                }
            }
        }

        #[test]
        fn matmul_matches_oracle_on_random_shapes(
            m in 1usize..=16,
            k in 1usize..=16,
            n in 1usize..=16,
            seed in 0u64..1000,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let a: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let b: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let mut oracle = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    let mut s = 0.0;
                    for p in 0..k {
                        s += a[i * k + p] * b[p * n + j];
                    }
                    oracle[i * n + j] = s;
                }
            }
            let mut tape = Tape::new();
            let ta = tape.leaf(&Tensor::from_vec(vec![m, k], a).unwrap());
            let tb = tape.leaf(&Tensor::from_vec(vec![k, n], b).unwrap());
            let tc = tape.matmul(ta, tb).unwrap();
            for (got, want) in tape.data(tc).iter().zip(&oracle) {
                prop_assert!((got - want).abs() < 1e-12);
            }
        }
    }
}
