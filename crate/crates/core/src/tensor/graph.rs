use std::cell::RefCell;
use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{broadcast_shape, broadcast_strides, reduce_to_shape, Real, Tensor};

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Relu { x: NodeId },
    Sigmoid { x: NodeId },
    Scale { x: NodeId, c: T },
    Concat { parts: Vec<NodeId>, axis: usize },
    Narrow { x: NodeId, axis: usize, start: usize, len: usize },
    Transpose { x: NodeId },
    Reshape { x: NodeId },
    SoftmaxRows { x: NodeId, mask: Option<Rc<[bool]>> },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, mu: Vec<T>, inv_sigma: Vec<T> },
    Dropout { x: NodeId, keep: Rc<[bool]>, scale: T },
    Sum { x: NodeId },
    Gather { table: NodeId, ids: Rc<[usize]> },
    /// Max over each consecutive group of `group` rows, skipping invalid rows.
    /// `argmax[i*d + c]` is the winning source row for output element (i, c).
    MaxPoolRows { x: NodeId, argmax: Vec<Option<usize>> },
    /// Per-channel 1-d convolution with zero padding, same output length.
    DepthwiseConv { x: NodeId, w: NodeId },
    /// loss = logsumexp(unmasked logits) - logits[gold]
    CrossEntropy { logits: NodeId, mask: Option<Rc<[bool]>>, gold: usize },
    /// loss = max(e,0) - label*e + ln(1 + exp(-|e|))
    BinaryLogistic { e: NodeId, label: T },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

struct Inner<T> {
    nodes: Vec<Node<T>>,
    // Persistent per-node gradient buffers; repeated backward calls accumulate.
    grads: Vec<Option<Vec<T>>>,
}

/// Reverse-mode differentiation tape. Confined to one logical thread; values
/// are immutable once produced, only gradient buffers accumulate.
pub struct Graph<T> {
    inner: RefCell<Inner<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn stable_sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let z = x.exp();
        z / (T::one() + z)
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            inner: RefCell::new(Inner {
                nodes: Vec::new(),
                grads: Vec::new(),
            }),
        }
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        inner.grads.push(None);
        NodeId(inner.nodes.len() - 1)
    }

    /// Constant input; no gradient is tracked through it.
    pub fn leaf(&self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable input; `grad` will be populated by [`Graph::backward`].
    pub fn var(&self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self, id: NodeId) -> Tensor<T> {
        self.inner.borrow().nodes[id.0].value.clone()
    }

    pub fn shape(&self, id: NodeId) -> Vec<usize> {
        self.inner.borrow().nodes[id.0].value.shape().to_vec()
    }

    pub fn scalar_value(&self, id: NodeId) -> Result<T> {
        let inner = self.inner.borrow();
        let t = &inner.nodes[id.0].value;
        if t.numel() != 1 {
            return Err(Error::Contract(format!(
                "expected scalar, got shape {:?}",
                t.shape()
            )));
        }
        Ok(t.data()[0])
    }

    /// Accumulated gradient of a `requires_grad` node, if backward has reached it.
    pub fn grad(&self, id: NodeId) -> Option<Tensor<T>> {
        let inner = self.inner.borrow();
        let g = inner.grads[id.0].as_ref()?;
        Some(Tensor::new(inner.nodes[id.0].value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    // ── Forward ops ─────────────────────────────────────────────────────

    pub fn matmul(&self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (out, req) = {
            let inner = self.inner.borrow();
            let ta = &inner.nodes[a.0].value;
            let tb = &inner.nodes[b.0].value;
            if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
                return Err(Error::Shape {
                    op: "matmul",
                    lhs: ta.shape().to_vec(),
                    rhs: tb.shape().to_vec(),
                });
            }
            let (n, k) = (ta.shape()[0], ta.shape()[1]);
            let m = tb.shape()[1];
            let data = matmul_raw(ta.data(), tb.data(), n, k, m);
            (
                Tensor::new(vec![n, m], data)?,
                inner.nodes[a.0].requires_grad || inner.nodes[b.0].requires_grad,
            )
        };
        Ok(self.push(out, Op::Matmul { a, b }, req))
    }

    fn binary_elementwise(
        &self,
        op_name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Tensor<T>, bool)> {
        let inner = self.inner.borrow();
        let ta = &inner.nodes[a.0].value;
        let tb = &inner.nodes[b.0].value;
        let shape = broadcast_shape(op_name, ta.shape(), tb.shape())?;
        let req = inner.nodes[a.0].requires_grad || inner.nodes[b.0].requires_grad;
        if ta.shape() == tb.shape() {
            let data = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            return Ok((Tensor::new(shape, data)?, req));
        }
        let rank = shape.len();
        let sa = broadcast_strides(ta.shape(), rank);
        let sb = broadcast_strides(tb.shape(), rank);
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut coords = vec![0usize; rank];
        for flat in 0..numel {
            let mut rem = flat;
            for d in (0..rank).rev() {
                coords[d] = rem % shape[d];
                rem /= shape[d];
            }
            let (mut ia, mut ib) = (0usize, 0usize);
            for d in 0..rank {
                ia += coords[d] * sa[d];
                ib += coords[d] * sb[d];
            }
            data.push(f(ta.data()[ia], tb.data()[ib]));
        }
        Ok((Tensor::new(shape, data)?, req))
    }

    pub fn add(&self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (out, req) = self.binary_elementwise("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add { a, b }, req))
    }

    pub fn sub(&self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (out, req) = self.binary_elementwise("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub { a, b }, req))
    }

    pub fn mul(&self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (out, req) = self.binary_elementwise("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul { a, b }, req))
    }

    pub fn relu(&self, x: NodeId) -> Result<NodeId> {
        let (out, req) = {
            let inner = self.inner.borrow();
            let t = &inner.nodes[x.0].value;
            let data = t
                .data()
                .iter()
                .map(|&v| if v > T::zero() { v } else { T::zero() })
                .collect();
            (
                Tensor::new(t.shape().to_vec(), data)?,
                inner.nodes[x.0].requires_grad,
            )
        };
        Ok(self.push(out, Op::Relu { x }, req))
    }

    pub fn sigmoid(&self, x: NodeId) -> Result<NodeId> {
        let (out, req) = {
            let inner = self.inner.borrow();
            let t = &inner.nodes[x.0].value;
            let data = t.data().iter().map(|&v| stable_sigmoid(v)).collect();
            (
                Tensor::new(t.shape().to_vec(), data)?,
                inner.nodes[x.0].requires_grad,
            )
        };
        Ok(self.push(out, Op::Sigmoid { x }, req))
    }

    pub fn scale(&self, x: NodeId, c: T) -> Result<NodeId> {
        let (out, req) = {
            let inner = self.inner.borrow();
            let t = &inner.nodes[x.0].value;
            let data = t.data().iter().map(|&v| v * c).collect();
            (
                Tensor::new(t.shape().to_vec(), data)?,
                inner.nodes[x.0].requires_grad,
            )
        };
        Ok(self.push(out, Op::Scale { x, c }, req))
    }

    pub fn concat(&self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat of zero tensors".into()));
        }
        let (out, req) = {
            let inner = self.inner.borrow();
            let first = inner.nodes[parts[0].0].value.shape().to_vec();
            if axis >= first.len() {
                return Err(Error::Contract(format!(
                    "concat axis {axis} out of range for rank {}",
                    first.len()
                )));
            }
            let mut axis_total = 0usize;
            for p in parts {
                let s = inner.nodes[p.0].value.shape();
                if s.len() != first.len()
                    || s.iter()
                        .zip(&first)
                        .enumerate()
                        .any(|(d, (x, y))| d != axis && x != y)
                {
                    return Err(Error::Shape {
                        op: "concat",
                        lhs: first.clone(),
                        rhs: s.to_vec(),
                    });
                }
                axis_total += s[axis];
            }
            let mut shape = first.clone();
            shape[axis] = axis_total;
            let outer: usize = shape[..axis].iter().product();
            let tail: usize = shape[axis + 1..].iter().product();
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for o in 0..outer {
                for p in parts {
                    let t = &inner.nodes[p.0].value;
                    let chunk = t.shape()[axis] * tail;
                    data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            (
                Tensor::new(shape, data)?,
                parts.iter().any(|p| inner.nodes[p.0].requires_grad),
            )
        };
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            req,
        ))
    }

    pub fn narrow(&self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let (out, req) = {
            let inner = self.inner.borrow();
            let t = &inner.nodes[x.0].value;
            let shape = t.shape();
            if axis >= shape.len() || start + len > shape[axis] || len == 0 {
                return Err(Error::Index(format!(
                    "narrow [{start}, {start}+{len}) on axis {axis} of {shape:?}"
                )));
            }
            let outer: usize = shape[..axis].iter().product();
            let tail: usize = shape[axis + 1..].iter().product();
            let src_chunk = shape[axis] * tail;
            let mut data = Vec::with_capacity(outer * len * tail);
            for o in 0..outer {
                let base = o * src_chunk + start * tail;
                data.extend_from_slice(&t.data()[base..base + len * tail]);
            }
            let mut out_shape = shape.to_vec();
            out_shape[axis] = len;
            (
                Tensor::new(out_shape, data)?,
                inner.nodes[x.0].requires_grad,
            )
        };
        Ok(self.push(
            out,
            Op::Narrow {
                x,
                axis,
                start,
                len,
            },
            req,
        ))
    }

    pub fn transpose(&self, x: NodeId) -> Result<NodeId> {
        let (out, req) = {
            let inner = self.inner.borrow();
            let t = &inner.nodes[x.0].value;
            if t.rank() != 2 {
                return Err(Error::Contract(format!(
                    "transpose expects rank 2, got {:?}",
                    t.shape()
                )));
            }
            let (n, m) = (t.shape()[0], t.shape()[1]);
            (
                Tensor::new(vec![m, n], transpose_raw(t.data(), n, m))?,
                inner.nodes[x.0].requires_grad,
            )
        };
        Ok(self.push(out, Op::Transpose { x }, req))
    }

    pub fn reshape(&self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let (out, req) = {
            let inner = self.inner.borrow();
            let t = &inner.nodes[x.0].value;
            let n: usize = shape.iter().product();
            if n != t.numel() {
                return Err(Error::Shape {
                    op: "reshape",
                    lhs: t.shape().to_vec(),
                    rhs: shape.clone(),
                });
            }
            (
                Tensor::new(shape, t.data().to_vec())?,
                inner.nodes[x.0].requires_grad,
            )
        };
        Ok(self.push(out, Op::Reshape { x }, req))
    }

    /// Row softmax over the trailing axis with optional boolean mask. Masked
    /// positions come out exactly zero; each row must keep at least one
    /// unmasked position. `mask` may cover one row (broadcast) or all elements.
    pub fn softmax_masked(&self, x: NodeId, mask: Option<&[bool]>) -> Result<NodeId> {
        let (out, full_mask, req) = {
            let inner = self.inner.borrow();
            let t = &inner.nodes[x.0].value;
            let cols = *t.shape().last().ok_or_else(|| {
                Error::Contract("softmax_masked needs rank >= 1".into())
            })?;
            let rows = t.numel() / cols;
            let full_mask: Option<Rc<[bool]>> = match mask {
                None => None,
                Some(m) if m.len() == cols => {
                    Some(m.iter().cycle().take(rows * cols).copied().collect())
                }
                Some(m) if m.len() == rows * cols => Some(Rc::from(m)),
                Some(m) => {
                    return Err(Error::Mask(format!(
                        "mask length {} fits neither one row ({cols}) nor all elements ({})",
                        m.len(),
                        rows * cols
                    )))
                }
            };
            let mut data = vec![T::zero(); t.numel()];
            for r in 0..rows {
                let base = r * cols;
                let live = |c: usize| full_mask.as_ref().map_or(true, |m| m[base + c]);
                let mut max = T::neg_infinity();
                for c in 0..cols {
                    if live(c) && t.data()[base + c] > max {
                        max = t.data()[base + c];
                    }
                }
                if max == T::neg_infinity() {
                    return Err(Error::Mask(format!("row {r} is fully masked")));
                }
                let mut denom = T::zero();
                for c in 0..cols {
                    if live(c) {
                        let e = (t.data()[base + c] - max).exp();
                        data[base + c] = e;
                        denom = denom + e;
                    }
                }
                for c in 0..cols {
                    if live(c) {
                        data[base + c] = data[base + c] / denom;
                    }
                }
            }
            (
                Tensor::new(t.shape().to_vec(), data)?,
                full_mask,
                inner.nodes[x.0].requires_grad,
            )
        };
        Ok(self.push(
            out,
            Op::SoftmaxRows {
                x,
                mask: full_mask,
            },
            req,
        ))
    }

    /// Per-row normalization over the trailing axis, then `gain ⊙ xh + bias`.
    pub fn layer_norm(&self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let eps = T::from_f64(eps);
        let (out, mu, inv_sigma, req) = {
            let inner = self.inner.borrow();
            let t = &inner.nodes[x.0].value;
            let tg = &inner.nodes[gain.0].value;
            let tb = &inner.nodes[bias.0].value;
            let d = *t.shape().last().ok_or_else(|| {
                Error::Contract("layer_norm needs rank >= 1".into())
            })?;
            if tg.shape() != [d] || tb.shape() != [d] {
                return Err(Error::Shape {
                    op: "layer_norm",
                    lhs: t.shape().to_vec(),
                    rhs: tg.shape().to_vec(),
                });
            }
            let rows = t.numel() / d;
            let dt = T::from_f64(d as f64);
            let mut data = vec![T::zero(); t.numel()];
            let mut mu = Vec::with_capacity(rows);
            let mut inv_sigma = Vec::with_capacity(rows);
            for r in 0..rows {
                let row = &t.data()[r * d..(r + 1) * d];
                let mean = row.iter().fold(T::zero(), |s, &v| s + v) / dt;
                let var = row
                    .iter()
                    .fold(T::zero(), |s, &v| s + (v - mean) * (v - mean))
                    / dt;
                let is = T::one() / (var + eps).sqrt();
                for c in 0..d {
                    data[r * d + c] = tg.data()[c] * (row[c] - mean) * is + tb.data()[c];
                }
                mu.push(mean);
                inv_sigma.push(is);
            }
            let req = inner.nodes[x.0].requires_grad
                || inner.nodes[gain.0].requires_grad
                || inner.nodes[bias.0].requires_grad;
            (Tensor::new(t.shape().to_vec(), data)?, mu, inv_sigma, req)
        };
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mu,
                inv_sigma,
            },
            req,
        ))
    }

    /// Inverted dropout: zero with probability `p` at training time, scale
    /// survivors by 1/(1-p); identity at inference.
    pub fn dropout<R: Rng>(
        &self,
        x: NodeId,
        p: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!(
                "dropout probability must be in [0, 1), got {p}"
            )));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let scale = T::from_f64(1.0 / (1.0 - p));
        let (out, keep, req) = {
            let inner = self.inner.borrow();
            let t = &inner.nodes[x.0].value;
            let keep: Rc<[bool]> = (0..t.numel()).map(|_| rng.random::<f64>() >= p).collect();
            let data = t
                .data()
                .iter()
                .zip(keep.iter())
                .map(|(&v, &k)| if k { v * scale } else { T::zero() })
                .collect();
            (
                Tensor::new(t.shape().to_vec(), data)?,
                keep,
                inner.nodes[x.0].requires_grad,
            )
        };
        Ok(self.push(out, Op::Dropout { x, keep, scale }, req))
    }

    pub fn sum(&self, x: NodeId) -> Result<NodeId> {
        let (out, req) = {
            let inner = self.inner.borrow();
            let t = &inner.nodes[x.0].value;
            let s = t.data().iter().fold(T::zero(), |acc, &v| acc + v);
            (Tensor::scalar(s), inner.nodes[x.0].requires_grad)
        };
        Ok(self.push(out, Op::Sum { x }, req))
    }

    /// Row lookup: out[i] = table[ids[i]]. Backward scatter-adds into the table.
    pub fn gather(&self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        if ids.is_empty() {
            return Err(Error::Contract("gather of zero ids".into()));
        }
        let (out, req) = {
            let inner = self.inner.borrow();
            let t = &inner.nodes[table.0].value;
            if t.rank() != 2 {
                return Err(Error::Contract(format!(
                    "gather table must be rank 2, got {:?}",
                    t.shape()
                )));
            }
            let (v, d) = (t.shape()[0], t.shape()[1]);
            let mut data = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                if id >= v {
                    return Err(Error::Index(format!("gather id {id} >= table rows {v}")));
                }
                data.extend_from_slice(&t.data()[id * d..(id + 1) * d]);
            }
            (
                Tensor::new(vec![ids.len(), d], data)?,
                inner.nodes[table.0].requires_grad,
            )
        };
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: Rc::from(ids),
            },
            req,
        ))
    }

    /// Column-wise max over each consecutive group of `group` rows, skipping
    /// rows whose `valid` flag is false. A fully invalid group yields zeros.
    pub fn max_pool_rows(&self, x: NodeId, group: usize, valid: &[bool]) -> Result<NodeId> {
        let (out, argmax, req) = {
            let inner = self.inner.borrow();
            let t = &inner.nodes[x.0].value;
            if t.rank() != 2 || group == 0 || t.shape()[0] % group != 0 {
                return Err(Error::Contract(format!(
                    "max_pool_rows: {:?} rows not divisible into groups of {group}",
                    t.shape()
                )));
            }
            if valid.len() != t.shape()[0] {
                return Err(Error::Mask(format!(
                    "valid length {} != rows {}",
                    valid.len(),
                    t.shape()[0]
                )));
            }
            let d = t.shape()[1];
            let n = t.shape()[0] / group;
            let mut data = vec![T::zero(); n * d];
            let mut argmax = vec![None; n * d];
            for i in 0..n {
                for c in 0..d {
                    let mut best: Option<(usize, T)> = None;
                    for g in 0..group {
                        let row = i * group + g;
                        if !valid[row] {
                            continue;
                        }
                        let v = t.data()[row * d + c];
                        if best.map_or(true, |(_, bv)| v > bv) {
                            best = Some((row, v));
                        }
                    }
                    if let Some((row, v)) = best {
                        data[i * d + c] = v;
                        argmax[i * d + c] = Some(row);
                    }
                }
            }
            (
                Tensor::new(vec![n, d], data)?,
                argmax,
                inner.nodes[x.0].requires_grad,
            )
        };
        Ok(self.push(out, Op::MaxPoolRows { x, argmax }, req))
    }

    /// Depthwise 1-d convolution along the row axis with zero padding, output
    /// length preserved. `x` is n×d, `w` is kernel×d with odd kernel.
    pub fn depthwise_conv(&self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let (out, req) = {
            let inner = self.inner.borrow();
            let t = &inner.nodes[x.0].value;
            let tw = &inner.nodes[w.0].value;
            if t.rank() != 2 || tw.rank() != 2 || t.shape()[1] != tw.shape()[1] {
                return Err(Error::Shape {
                    op: "depthwise_conv",
                    lhs: t.shape().to_vec(),
                    rhs: tw.shape().to_vec(),
                });
            }
            let kernel = tw.shape()[0];
            if kernel % 2 == 0 {
                return Err(Error::Config(format!(
                    "depthwise kernel must be odd, got {kernel}"
                )));
            }
            let (n, d) = (t.shape()[0], t.shape()[1]);
            let pad = kernel / 2;
            let mut data = vec![T::zero(); n * d];
            for ti in 0..n {
                for j in 0..kernel {
                    let src = ti as isize + j as isize - pad as isize;
                    if src < 0 || src >= n as isize {
                        continue;
                    }
                    let src = src as usize;
                    for c in 0..d {
                        data[ti * d + c] =
                            data[ti * d + c] + tw.data()[j * d + c] * t.data()[src * d + c];
                    }
                }
            }
            (
                Tensor::new(vec![n, d], data)?,
                inner.nodes[x.0].requires_grad || inner.nodes[w.0].requires_grad,
            )
        };
        Ok(self.push(out, Op::DepthwiseConv { x, w }, req))
    }

    /// Stable cross entropy from logits: logsumexp(logits) - logits[gold],
    /// restricted to unmasked positions.
    pub fn cross_entropy(
        &self,
        logits: NodeId,
        mask: Option<&[bool]>,
        gold: usize,
    ) -> Result<NodeId> {
        let (out, mask_rc, req) = {
            let inner = self.inner.borrow();
            let t = &inner.nodes[logits.0].value;
            let k = t.numel();
            if gold >= k {
                return Err(Error::Index(format!("gold class {gold} >= {k}")));
            }
            let mask_rc: Option<Rc<[bool]>> = match mask {
                None => None,
                Some(m) if m.len() == k => Some(Rc::from(m)),
                Some(m) => {
                    return Err(Error::Mask(format!(
                        "mask length {} != logits length {k}",
                        m.len()
                    )))
                }
            };
            let live = |i: usize| mask_rc.as_ref().map_or(true, |m| m[i]);
            if !live(gold) {
                return Err(Error::Index(format!("gold class {gold} is masked")));
            }
            let mut max = T::neg_infinity();
            for i in 0..k {
                if live(i) && t.data()[i] > max {
                    max = t.data()[i];
                }
            }
            let mut denom = T::zero();
            for i in 0..k {
                if live(i) {
                    denom = denom + (t.data()[i] - max).exp();
                }
            }
            let loss = max + denom.ln() - t.data()[gold];
            (
                Tensor::scalar(loss),
                mask_rc,
                inner.nodes[logits.0].requires_grad,
            )
        };
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                mask: mask_rc,
                gold,
            },
            req,
        ))
    }

    /// Stable binary logistic loss on a raw score: label in {0, 1}.
    pub fn binary_logistic(&self, e: NodeId, label: u8) -> Result<NodeId> {
        if label > 1 {
            return Err(Error::Contract(format!("label must be 0 or 1, got {label}")));
        }
        let lbl = T::from_f64(label as f64);
        let (out, req) = {
            let inner = self.inner.borrow();
            let t = &inner.nodes[e.0].value;
            if t.numel() != 1 {
                return Err(Error::Contract(format!(
                    "binary_logistic expects scalar score, got {:?}",
                    t.shape()
                )));
            }
            let v = t.data()[0];
            let loss = v.max(T::zero()) - lbl * v + (T::one() + (-v.abs()).exp()).ln();
            (Tensor::scalar(loss), inner.nodes[e.0].requires_grad)
        };
        Ok(self.push(out, Op::BinaryLogistic { e, label: lbl }, req))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Each recorded op is visited exactly
    /// once in reverse order; per-node gradient buffers accumulate across
    /// repeated calls.
    pub fn backward(&self, loss: NodeId) -> Result<()> {
        let mut inner = self.inner.borrow_mut();
        if inner.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        if inner.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                inner.nodes[loss.0].value.shape()
            )));
        }
        // Transient flow buffers keep repeated backward calls independent.
        let n = inner.nodes.len();
        let mut flow: Vec<Option<Vec<T>>> = vec![None; n];
        flow[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            if !inner.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = flow[idx].take() else { continue };
            Self::propagate(&inner.nodes, &mut flow, idx, &g);
            // Persist into the node's accumulating grad buffer.
            let slot = &mut inner.grads[idx];
            match slot {
                Some(buf) => {
                    for (b, gi) in buf.iter_mut().zip(&g) {
                        *b = *b + *gi;
                    }
                }
                None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn accumulate(
        nodes: &[Node<T>],
        flow: &mut [Option<Vec<T>>],
        target: NodeId,
        contribution: &[T],
    ) {
        if !nodes[target.0].requires_grad {
            return;
        }
        match &mut flow[target.0] {
            Some(buf) => {
                for (b, c) in buf.iter_mut().zip(contribution) {
                    *b = *b + *c;
                }
            }
            slot @ None => *slot = Some(contribution.to_vec()),
        }
    }

    fn propagate(nodes: &[Node<T>], flow: &mut [Option<Vec<T>>], idx: usize, g: &[T]) {
        let out_shape = nodes[idx].value.shape().to_vec();
        match &nodes[idx].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let ta = &nodes[a.0].value;
                let tb = &nodes[b.0].value;
                let (n, k) = (ta.shape()[0], ta.shape()[1]);
                let m = tb.shape()[1];
                // dA = g · Bᵀ
                let bt = transpose_raw(tb.data(), k, m);
                let da = matmul_raw(g, &bt, n, m, k);
                Self::accumulate(nodes, flow, *a, &da);
                // dB = Aᵀ · g
                let at = transpose_raw(ta.data(), n, k);
                let db = matmul_raw(&at, g, k, n, m);
                Self::accumulate(nodes, flow, *b, &db);
            }
            Op::Add { a, b } => {
                let sa = nodes[a.0].value.shape();
                let sb = nodes[b.0].value.shape();
                Self::accumulate(nodes, flow, *a, &reduce_to_shape(g, &out_shape, sa));
                Self::accumulate(nodes, flow, *b, &reduce_to_shape(g, &out_shape, sb));
            }
            Op::Sub { a, b } => {
                let sa = nodes[a.0].value.shape();
                let sb = nodes[b.0].value.shape();
                Self::accumulate(nodes, flow, *a, &reduce_to_shape(g, &out_shape, sa));
                let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                Self::accumulate(nodes, flow, *b, &reduce_to_shape(&neg, &out_shape, sb));
            }
            Op::Mul { a, b } => {
                let rank = out_shape.len();
                let ta = &nodes[a.0].value;
                let tb = &nodes[b.0].value;
                let sa = broadcast_strides(ta.shape(), rank);
                let sb = broadcast_strides(tb.shape(), rank);
                let mut da = vec![T::zero(); g.len()];
                let mut db = vec![T::zero(); g.len()];
                let mut coords = vec![0usize; rank];
                for (flat, &gv) in g.iter().enumerate() {
                    let mut rem = flat;
                    for d in (0..rank).rev() {
                        coords[d] = rem % out_shape[d];
                        rem /= out_shape[d];
                    }
                    let (mut ia, mut ib) = (0usize, 0usize);
                    for d in 0..rank {
                        ia += coords[d] * sa[d];
                        ib += coords[d] * sb[d];
                    }
                    da[flat] = gv * tb.data()[ib];
                    db[flat] = gv * ta.data()[ia];
                }
                Self::accumulate(nodes, flow, *a, &reduce_to_shape(&da, &out_shape, ta.shape()));
                Self::accumulate(nodes, flow, *b, &reduce_to_shape(&db, &out_shape, tb.shape()));
            }
            Op::Relu { x } => {
                // Subgradient at exactly 0 is 0.
                let tx = &nodes[x.0].value;
                let dx: Vec<T> = g
                    .iter()
                    .zip(tx.data())
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                Self::accumulate(nodes, flow, *x, &dx);
            }
            Op::Sigmoid { x } => {
                let y = &nodes[idx].value;
                let dx: Vec<T> = g
                    .iter()
                    .zip(y.data())
                    .map(|(&gv, &yv)| gv * yv * (T::one() - yv))
                    .collect();
                Self::accumulate(nodes, flow, *x, &dx);
            }
            Op::Scale { x, c } => {
                let dx: Vec<T> = g.iter().map(|&gv| gv * *c).collect();
                Self::accumulate(nodes, flow, *x, &dx);
            }
            Op::Concat { parts, axis } => {
                let outer: usize = out_shape[..*axis].iter().product();
                let tail: usize = out_shape[*axis + 1..].iter().product();
                let out_chunk = out_shape[*axis] * tail;
                let mut offset = 0usize;
                for p in parts {
                    let s = nodes[p.0].value.shape();
                    let chunk = s[*axis] * tail;
                    let mut dp = Vec::with_capacity(outer * chunk);
                    for o in 0..outer {
                        let base = o * out_chunk + offset;
                        dp.extend_from_slice(&g[base..base + chunk]);
                    }
                    Self::accumulate(nodes, flow, *p, &dp);
                    offset += chunk;
                }
            }
            Op::Narrow {
                x,
                axis,
                start,
                len,
            } => {
                let sx = nodes[x.0].value.shape();
                let outer: usize = sx[..*axis].iter().product();
                let tail: usize = sx[*axis + 1..].iter().product();
                let src_chunk = sx[*axis] * tail;
                let mut dx = vec![T::zero(); nodes[x.0].value.numel()];
                for o in 0..outer {
                    let dst = o * src_chunk + start * tail;
                    let src = o * len * tail;
                    for i in 0..len * tail {
                        dx[dst + i] = g[src + i];
                    }
                }
                Self::accumulate(nodes, flow, *x, &dx);
            }
            Op::Transpose { x } => {
                let (n, m) = (out_shape[0], out_shape[1]);
                Self::accumulate(nodes, flow, *x, &transpose_raw(g, n, m));
            }
            Op::Reshape { x } => {
                Self::accumulate(nodes, flow, *x, g);
            }
            Op::SoftmaxRows { x, mask } => {
                let y = &nodes[idx].value;
                let cols = *out_shape.last().unwrap();
                let rows = y.numel() / cols;
                let mut dx = vec![T::zero(); y.numel()];
                for r in 0..rows {
                    let base = r * cols;
                    let live = |c: usize| mask.as_ref().map_or(true, |m| m[base + c]);
                    let mut dot = T::zero();
                    for c in 0..cols {
                        if live(c) {
                            dot = dot + g[base + c] * y.data()[base + c];
                        }
                    }
                    for c in 0..cols {
                        if live(c) {
                            dx[base + c] = y.data()[base + c] * (g[base + c] - dot);
                        }
                    }
                }
                Self::accumulate(nodes, flow, *x, &dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mu,
                inv_sigma,
            } => {
                let tx = &nodes[x.0].value;
                let tg = &nodes[gain.0].value;
                let d = *out_shape.last().unwrap();
                let rows = tx.numel() / d;
                let dt = T::from_f64(d as f64);
                let mut dx = vec![T::zero(); tx.numel()];
                let mut dgain = vec![T::zero(); d];
                let mut dbias = vec![T::zero(); d];
                for r in 0..rows {
                    let base = r * d;
                    let is = inv_sigma[r];
                    let mean = mu[r];
                    // dxh, plus its row means needed by the normalization term
                    let mut sum_dxh = T::zero();
                    let mut sum_dxh_xh = T::zero();
                    for c in 0..d {
                        let xh = (tx.data()[base + c] - mean) * is;
                        let dxh = g[base + c] * tg.data()[c];
                        sum_dxh = sum_dxh + dxh;
                        sum_dxh_xh = sum_dxh_xh + dxh * xh;
                        dgain[c] = dgain[c] + g[base + c] * xh;
                        dbias[c] = dbias[c] + g[base + c];
                    }
                    let mean_dxh = sum_dxh / dt;
                    let mean_dxh_xh = sum_dxh_xh / dt;
                    for c in 0..d {
                        let xh = (tx.data()[base + c] - mean) * is;
                        dx[base + c] = is * (g[base + c] * tg.data()[c] - mean_dxh - xh * mean_dxh_xh);
                    }
                }
                Self::accumulate(nodes, flow, *x, &dx);
                Self::accumulate(nodes, flow, *gain, &dgain);
                Self::accumulate(nodes, flow, *bias, &dbias);
            }
            Op::Dropout { x, keep, scale } => {
                let dx: Vec<T> = g
                    .iter()
                    .zip(keep.iter())
                    .map(|(&gv, &k)| if k { gv * *scale } else { T::zero() })
                    .collect();
                Self::accumulate(nodes, flow, *x, &dx);
            }
            Op::Sum { x } => {
                let dx = vec![g[0]; nodes[x.0].value.numel()];
                Self::accumulate(nodes, flow, *x, &dx);
            }
            Op::Gather { table, ids } => {
                let tt = &nodes[table.0].value;
                let d = tt.shape()[1];
                let mut dt = vec![T::zero(); tt.numel()];
                for (i, &id) in ids.iter().enumerate() {
                    for c in 0..d {
                        dt[id * d + c] = dt[id * d + c] + g[i * d + c];
                    }
                }
                Self::accumulate(nodes, flow, *table, &dt);
            }
            Op::MaxPoolRows { x, argmax } => {
                let tx = &nodes[x.0].value;
                let d = out_shape[1];
                let mut dx = vec![T::zero(); tx.numel()];
                for (o, am) in argmax.iter().enumerate() {
                    if let Some(row) = am {
                        let c = o % d;
                        dx[row * d + c] = dx[row * d + c] + g[o];
                    }
                }
                Self::accumulate(nodes, flow, *x, &dx);
            }
            Op::DepthwiseConv { x, w } => {
                let tx = &nodes[x.0].value;
                let tw = &nodes[w.0].value;
                let (n, d) = (tx.shape()[0], tx.shape()[1]);
                let kernel = tw.shape()[0];
                let pad = kernel / 2;
                let mut dx = vec![T::zero(); tx.numel()];
                let mut dw = vec![T::zero(); tw.numel()];
                for t in 0..n {
                    for j in 0..kernel {
                        let src = t as isize + j as isize - pad as isize;
                        if src < 0 || src >= n as isize {
                            continue;
                        }
                        let src = src as usize;
                        for c in 0..d {
                            dx[src * d + c] = dx[src * d + c] + tw.data()[j * d + c] * g[t * d + c];
                            dw[j * d + c] = dw[j * d + c] + tx.data()[src * d + c] * g[t * d + c];
                        }
                    }
                }
                Self::accumulate(nodes, flow, *x, &dx);
                Self::accumulate(nodes, flow, *w, &dw);
            }
            Op::CrossEntropy { logits, mask, gold } => {
                let tl = &nodes[logits.0].value;
                let k = tl.numel();
                let live = |i: usize| mask.as_ref().map_or(true, |m| m[i]);
                let mut max = T::neg_infinity();
                for i in 0..k {
                    if live(i) && tl.data()[i] > max {
                        max = tl.data()[i];
                    }
                }
                let mut denom = T::zero();
                for i in 0..k {
                    if live(i) {
                        denom = denom + (tl.data()[i] - max).exp();
                    }
                }
                let gs = g[0];
                let mut dl = vec![T::zero(); k];
                for i in 0..k {
                    if live(i) {
                        let p = (tl.data()[i] - max).exp() / denom;
                        let onehot = if i == *gold { T::one() } else { T::zero() };
                        dl[i] = gs * (p - onehot);
                    }
                }
                Self::accumulate(nodes, flow, *logits, &dl);
            }
            Op::BinaryLogistic { e, label } => {
                let v = nodes[e.0].value.data()[0];
                let de = vec![g[0] * (stable_sigmoid(v) - *label)];
                Self::accumulate(nodes, flow, *e, &de);
            }
        }
    }
}

pub(crate) fn matmul_raw<T: Real>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * m];
    for i in 0..n {
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            let orow = &mut out[i * m..(i + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose_raw<T: Real>(a: &[T], n: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = a[i * m + j];
        }
    }
    out
}
