//! Define-by-run reverse-mode differentiation.
//!
//! Every primitive appends one entry to the tape; entries only reference
//! earlier ids, so walking the tape backwards is a valid topological order.
//! Parameters enter as named leaves and receive their gradients in the
//! [`ParamStore`] when [`Tape::backward`] runs. Constants are leaves that
//! never receive gradients.

use std::collections::HashMap;

use super::kernels::{self, ConvGeom};
use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

/// Norms below this make a cosine similarity undefined; it is reported as 0.
pub const COSINE_EPS: f64 = 1e-12;
/// Probabilities are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` before the log.
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Max,
    Mean,
    Sum,
}

enum Op {
    Constant,
    Param(String),
    Linear { x: NodeId, w: NodeId, b: Option<NodeId> },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    ScaleRows { x: NodeId, s: NodeId },
    Relu(NodeId),
    Sigmoid(NodeId),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    Gather { x: NodeId, index: Vec<usize> },
    Stack(Vec<NodeId>),
    Reshape(NodeId),
    Transpose(NodeId),
    Segment { x: NodeId, groups: Vec<Vec<usize>>, op: Reduction, argmax: Vec<usize> },
    Softmax(NodeId),
    Cosine { a: NodeId, b: NodeId, degenerate: bool },
    Conv2d { x: NodeId, w: NodeId, b: Option<NodeId>, geom: ConvGeom, cols: Vec<f64> },
    MaxPool { x: NodeId, argmax: Vec<usize> },
    SumAll(NodeId),
    Bce { pred: NodeId, target: Tensor },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::Linear { .. } => "linear",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::ScaleRows { .. } => "scale_rows",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::Gather { .. } => "gather",
            Op::Stack(_) => "stack",
            Op::Reshape(_) => "reshape",
            Op::Transpose(_) => "transpose",
            Op::Segment { .. } => "segment_reduce",
            Op::Softmax(_) => "softmax",
            Op::Cosine { .. } => "cosine_similarity",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool { .. } => "max_pool",
            Op::SumAll(_) => "sum",
            Op::Bce { .. } => "binary_cross_entropy",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, NodeId>,
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn item(&self, id: NodeId) -> Result<f64> {
        self.value(id).item()
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        self.nodes.push(Node { value, op, requires_grad });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(value, Op::Constant, false)
    }

    /// Leaf for the named parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.params.get(name) {
            return Ok(id);
        }
        let value = store.value(name)?.clone();
        let id = self.push(value, Op::Param(name.to_string()), true)?;
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    /// `x W^T + b` for a vector `x` of shape `[in]` or a row batch `[rows, in]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.is_empty() || xs.len() > 2 || *xs.last().unwrap() != ws[1] {
            return Err(Error::shape("linear", format!("input {xs:?} against weight {ws:?}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(Error::shape(
                    "linear",
                    format!("bias {:?} against weight {ws:?}", self.shape(b)),
                ));
            }
        }
        let (rows, input, out) = (if xs.len() == 2 { xs[0] } else { 1 }, ws[1], ws[0]);
        let mut y = vec![0.0; rows * out];
        kernels::gemm(rows, input, out, 1.0, self.value(x).data(), false, self.value(w).data(), true, 0.0, &mut y);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in y.chunks_mut(out) {
                for (v, bv) in row.iter_mut().zip(bias) {
                    *v += bv;
                }
            }
        }
        let shape = if xs.len() == 2 { vec![rows, out] } else { vec![out] };
        let rg = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(Tensor::new(shape, y)?, Op::Linear { x, w, b }, rg)
    }

    /// Fully connected layer followed by `activation`.
    pub fn linear_map(&mut self, x: NodeId, w: NodeId, b: NodeId, activation: Activation) -> Result<NodeId> {
        let y = self.linear(x, w, Some(b))?;
        self.activate(y, activation)
    }

    pub fn activate(&mut self, x: NodeId, activation: Activation) -> Result<NodeId> {
        match activation {
            Activation::Identity => Ok(x),
            Activation::Relu => self.relu(x),
            Activation::Sigmoid => self.sigmoid(x),
        }
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        let rg = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let v = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.needs(a) || self.needs(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        let v = self.value(x).map(|e| e * factor);
        let rg = self.needs(x);
        self.push(v, Op::Scale(x, factor), rg)
    }

    /// Multiplies row `i` of `x` (`[rows, d]`) by `s[i]` (`[rows]`); a vector
    /// `x` (`[d]`) is multiplied by a one-element `s`.
    pub fn scale_rows(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let rows = if xs.len() == 2 { xs[0] } else { 1 };
        if xs.is_empty() || xs.len() > 2 || self.value(s).numel() != rows {
            return Err(Error::shape(
                "scale_rows",
                format!("rows {xs:?} against scales {:?}", self.shape(s)),
            ));
        }
        let width = *xs.last().unwrap();
        let scales = self.value(s).data();
        let mut data = self.value(x).data().to_vec();
        if width > 0 {
            for (row, &k) in data.chunks_mut(width).zip(scales) {
                row.iter_mut().for_each(|v| *v *= k);
            }
        }
        let rg = self.needs(x) || self.needs(s);
        self.push(Tensor::new(xs, data)?, Op::ScaleRows { x, s }, rg)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).map(|e| e.max(0.0));
        let rg = self.needs(x);
        self.push(v, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).map(sigmoid);
        let rg = self.needs(x);
        self.push(v, Op::Sigmoid(x), rg)
    }

    /// Concatenates along the last axis. Parts are vectors, or matrices with
    /// equal row counts.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = self.shape(parts[0]).to_vec();
        if first.is_empty() || first.len() > 2 {
            return Err(Error::shape("concat_cols", format!("unsupported part shape {first:?}")));
        }
        let rows = if first.len() == 2 { first[0] } else { 1 };
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || (s.len() == 2 && s[0] != rows) {
                return Err(Error::shape("concat_cols", format!("{first:?} vs {s:?}")));
            }
            total += s.last().unwrap();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let v = self.value(p);
                let w = v.last_dim();
                data.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
        }
        let shape = if first.len() == 2 { vec![rows, total] } else { vec![total] };
        let rg = parts.iter().any(|&p| self.needs(p));
        self.push(Tensor::new(shape, data)?, Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Stacks `[rows_k, d]` matrices vertically.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let width = self.shape(parts[0]).get(1).copied();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || Some(s[1]) != width {
                return Err(Error::shape("concat_rows", format!("part {s:?}, expected [_, {width:?}]")));
            }
            rows += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.needs(p));
        self.push(Tensor::new(vec![rows, width.unwrap()], data)?, Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Selects entries of the leading axis: rows of a matrix, elements of a vector.
    pub fn gather(&mut self, x: NodeId, index: &[usize]) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.is_empty() {
            return Err(Error::shape("gather", "cannot gather from a scalar"));
        }
        let stride: usize = xs[1..].iter().product();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(index.len() * stride);
        for &i in index {
            if i >= xs[0] {
                return Err(Error::shape("gather", format!("index {i} out of range for {xs:?}")));
            }
            data.extend_from_slice(&src[i * stride..(i + 1) * stride]);
        }
        let mut shape = xs.clone();
        shape[0] = index.len();
        let rg = self.needs(x);
        self.push(Tensor::new(shape, data)?, Op::Gather { x, index: index.to_vec() }, rg)
    }

    /// Row `i` of a matrix as a vector.
    pub fn row(&mut self, x: NodeId, i: usize) -> Result<NodeId> {
        let width = self.shape(x).get(1).copied().unwrap_or(0);
        let g = self.gather(x, &[i])?;
        self.reshape(g, &[width])
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::domain("stack", "nothing to stack"));
        }
        let inner = self.shape(parts[0]).to_vec();
        let mut data = Vec::new();
        for &p in parts {
            if self.shape(p) != inner.as_slice() {
                return Err(Error::shape("stack", format!("{inner:?} vs {:?}", self.shape(p))));
            }
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![parts.len()];
        shape.extend(inner);
        let rg = parts.iter().any(|&p| self.needs(p));
        self.push(Tensor::new(shape, data)?, Op::Stack(parts.to_vec()), rg)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(x).clone().reshape(shape)?;
        let rg = self.needs(x);
        self.push(v, Op::Reshape(x), rg)
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(Error::shape("transpose", format!("expected a matrix, got {xs:?}")));
        }
        let (r, c) = (xs[0], xs[1]);
        let src = self.value(x).data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.needs(x);
        self.push(Tensor::new(vec![c, r], data)?, Op::Transpose(x), rg)
    }

    /// Reduces the rows of `x` (`[rows, d]`) within each group, giving
    /// `[groups, d]`. An empty group yields a zero row. Max routes the
    /// gradient to the lowest-index maximizer.
    pub fn segment_reduce(&mut self, x: NodeId, groups: &[Vec<usize>], op: Reduction) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(Error::shape("segment_reduce", format!("expected a matrix, got {xs:?}")));
        }
        let (rows, d) = (xs[0], xs[1]);
        let src = self.value(x).data();
        let mut out = vec![0.0; groups.len() * d];
        let mut argmax = Vec::new();
        if op == Reduction::Max {
            argmax = vec![usize::MAX; groups.len() * d];
        }
        for (g, members) in groups.iter().enumerate() {
            if let Some(&bad) = members.iter().find(|&&r| r >= rows) {
                return Err(Error::shape("segment_reduce", format!("row {bad} out of range for {xs:?}")));
            }
            if members.is_empty() {
                continue;
            }
            let dst = &mut out[g * d..(g + 1) * d];
            match op {
                Reduction::Max => {
                    for c in 0..d {
                        let mut best = members[0];
                        for &r in &members[1..] {
                            if src[r * d + c] > src[best * d + c] {
                                best = r;
                            }
                        }
                        dst[c] = src[best * d + c];
                        argmax[g * d + c] = best;
                    }
                }
                Reduction::Sum | Reduction::Mean => {
                    for &r in members {
                        for c in 0..d {
                            dst[c] += src[r * d + c];
                        }
                    }
                    if op == Reduction::Mean {
                        let k = members.len() as f64;
                        dst.iter_mut().for_each(|v| *v /= k);
                    }
                }
            }
        }
        let rg = self.needs(x);
        let value = Tensor::new(vec![groups.len(), d], out)?;
        self.push(value, Op::Segment { x, groups: groups.to_vec(), op, argmax }, rg)
    }

    /// Element-wise reduction across a non-empty list of equal-length vectors.
    pub fn reduce(&mut self, op: Reduction, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(Error::domain("reduce", "empty input list"));
        }
        let d = self.shape(inputs[0]).iter().product::<usize>();
        let stacked = self.stack(inputs)?;
        let flat = self.reshape(stacked, &[inputs.len(), d])?;
        let all: Vec<usize> = (0..inputs.len()).collect();
        let r = self.segment_reduce(flat, &[all], op)?;
        let shape = self.shape(inputs[0]).to_vec();
        self.reshape(r, &shape)
    }

    /// Reduces all rows of a matrix into one vector.
    pub fn reduce_rows(&mut self, x: NodeId, op: Reduction) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || xs[0] == 0 {
            return Err(Error::domain("reduce_rows", format!("need a non-empty matrix, got {xs:?}")));
        }
        let all: Vec<usize> = (0..xs[0]).collect();
        let r = self.segment_reduce(x, &[all], op)?;
        self.reshape(r, &[xs[1]])
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let width = v.last_dim();
        if v.rank() == 0 || v.rank() > 2 || width == 0 {
            return Err(Error::domain("softmax", format!("need a non-empty vector or matrix, got {:?}", v.shape())));
        }
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(width) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for e in row.iter_mut() {
                *e = (*e - max).exp();
                total += *e;
            }
            row.iter_mut().for_each(|e| *e /= total);
        }
        let value = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.needs(x);
        self.push(value, Op::Softmax(x), rg)
    }

    /// Cosine similarity of two vectors as a scalar; 0 when either norm is
    /// below [`COSINE_EPS`].
    pub fn cosine(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("cosine_similarity", a, b)?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let na = va.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = vb.iter().map(|v| v * v).sum::<f64>().sqrt();
        let degenerate = na < COSINE_EPS || nb < COSINE_EPS;
        let c = if degenerate {
            0.0
        } else {
            let dot: f64 = va.iter().zip(vb).map(|(x, y)| x * y).sum();
            (dot / (na * nb)).clamp(-1.0, 1.0)
        };
        let rg = self.needs(a) || self.needs(b);
        self.push(Tensor::scalar(c), Op::Cosine { a, b, degenerate }, rg)
    }

    /// Cross-correlation of `x` (`[c_in, h, w]` or `[batch, c_in, h, w]`)
    /// with `kernels` (`[c_out, c_in, k, k]`) and an optional per-channel bias.
    pub fn conv2d(&mut self, x: NodeId, kernels: NodeId, bias: Option<NodeId>, stride: usize, padding: usize) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernels).to_vec();
        let batched = xs.len() == 4;
        if !(xs.len() == 3 || batched) || ks.len() != 4 || ks[2] != ks[3] {
            return Err(Error::shape("conv2d", format!("input {xs:?} with kernels {ks:?}")));
        }
        let (batch, c_in, h, w) = if batched { (xs[0], xs[1], xs[2], xs[3]) } else { (1, xs[0], xs[1], xs[2]) };
        let (c_out, k) = (ks[0], ks[2]);
        if ks[1] != c_in {
            return Err(Error::shape("conv2d", format!("input has {c_in} channels, kernels expect {}", ks[1])));
        }
        if stride == 0 {
            return Err(Error::domain("conv2d", "stride must be positive"));
        }
        if k > h + 2 * padding || k > w + 2 * padding {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {k}x{k} larger than padded input {}x{}", h + 2 * padding, w + 2 * padding),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [c_out] {
                return Err(Error::shape("conv2d", format!("bias {:?} for {c_out} output channels", self.shape(b))));
            }
        }
        let geom = ConvGeom {
            batch,
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            pad: padding,
            oh: (h + 2 * padding - k) / stride + 1,
            ow: (w + 2 * padding - k) / stride + 1,
        };
        let cols = kernels::im2col(self.value(x).data(), &geom);
        let pos = geom.positions();
        let mut flat = vec![0.0; c_out * batch * pos];
        kernels::gemm(c_out, geom.patch(), batch * pos, 1.0, self.value(kernels).data(), false, &cols, false, 0.0, &mut flat);
        // [c_out, batch * pos] -> [batch, c_out, pos]
        let mut out = vec![0.0; batch * c_out * pos];
        let bias_vals = bias.map(|b| self.value(b).data().to_vec());
        for o in 0..c_out {
            let add = bias_vals.as_ref().map_or(0.0, |b| b[o]);
            for bi in 0..batch {
                let src = &flat[o * batch * pos + bi * pos..o * batch * pos + (bi + 1) * pos];
                let dst = &mut out[(bi * c_out + o) * pos..(bi * c_out + o + 1) * pos];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s + add;
                }
            }
        }
        let shape = if batched { vec![batch, c_out, geom.oh, geom.ow] } else { vec![c_out, geom.oh, geom.ow] };
        let rg = self.needs(x) || self.needs(kernels) || bias.is_some_and(|b| self.needs(b));
        // Column buffers are only needed for the kernel gradient.
        let cols = if self.needs(kernels) { cols } else { Vec::new() };
        self.push(Tensor::new(shape, out)?, Op::Conv2d { x, w: kernels, b: bias, geom, cols }, rg)
    }

    /// Non-overlapping `size x size` max pooling over the last two axes.
    pub fn max_pool2d(&mut self, x: NodeId, size: usize) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 3 || size == 0 || xs[xs.len() - 1] < size || xs[xs.len() - 2] < size {
            return Err(Error::shape("max_pool", format!("window {size} on input {xs:?}")));
        }
        let (h, w) = (xs[xs.len() - 2], xs[xs.len() - 1]);
        let planes: usize = xs[..xs.len() - 2].iter().product();
        let (out, argmax) = kernels::max_pool(self.value(x).data(), planes, h, w, size);
        let mut shape = xs.clone();
        let n = shape.len();
        shape[n - 2] = h / size;
        shape[n - 1] = w / size;
        let rg = self.needs(x);
        self.push(Tensor::new(shape, out)?, Op::MaxPool { x, argmax }, rg)
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let total = self.value(x).data().iter().sum();
        let rg = self.needs(x);
        self.push(Tensor::scalar(total), Op::SumAll(x), rg)
    }

    /// Mean binary cross-entropy of probabilities `pred` against `target`,
    /// with clamping at [`BCE_CLAMP`]. Zero entries give a zero loss.
    pub fn bce(&mut self, pred: NodeId, target: Tensor) -> Result<NodeId> {
        let p = self.value(pred);
        if p.numel() != target.numel() {
            return Err(Error::shape(
                "binary_cross_entropy",
                format!("predictions {:?} vs targets {:?}", p.shape(), target.shape()),
            ));
        }
        let n = p.numel();
        let loss = if n == 0 {
            0.0
        } else {
            let total: f64 = p
                .data()
                .iter()
                .zip(target.data())
                .map(|(&y, &t)| {
                    let y = y.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                    t * y.ln() + (1.0 - t) * (1.0 - y).ln()
                })
                .sum();
            -total / n as f64
        };
        let rg = self.needs(pred);
        self.push(Tensor::scalar(loss), Op::Bce { pred, target }, rg)
    }

    /// Accumulates `d loss / d theta` into `params`.
    pub fn backward(&self, loss: NodeId, params: &mut ParamStore) -> Result<()> {
        self.backward_scaled(loss, params, 1.0)
    }

    /// As [`Tape::backward`], with the loss gradient seeded at `seed`
    /// (e.g. `1 / batch` for minibatch means).
    pub fn backward_scaled(&self, loss: NodeId, params: &mut ParamStore, seed: f64) -> Result<()> {
        let root = &self.nodes[loss.0].value;
        if root.numel() != 1 {
            return Err(Error::domain("backward", format!("loss must be a scalar, got shape {:?}", root.shape())));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(root.shape(), seed));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, g, &mut grads, params)?;
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
        if !self.needs(id) {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: Tensor, grads: &mut [Option<Tensor>], params: &mut ParamStore) -> Result<()> {
        let y = &node.value;
        match &node.op {
            Op::Constant => {}
            Op::Param(name) => params.accumulate(name, &g)?,
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (out, input) = (wv.shape()[0], wv.shape()[1]);
                let rows = xv.numel() / input.max(1);
                if self.needs(*x) {
                    let mut dx = vec![0.0; rows * input];
                    kernels::gemm(rows, out, input, 1.0, g.data(), false, wv.data(), false, 0.0, &mut dx);
                    self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0; out * input];
                    kernels::gemm(out, rows, input, 1.0, g.data(), true, xv.data(), false, 0.0, &mut dw);
                    self.accumulate(grads, *w, Tensor::new(vec![out, input], dw)?);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut db = vec![0.0; out];
                        if out > 0 {
                            for row in g.data().chunks(out) {
                                for (d, v) in db.iter_mut().zip(row) {
                                    *d += v;
                                }
                            }
                        }
                        self.accumulate(grads, *b, Tensor::vector(db));
                    }
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let d = g.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::new(va.shape().to_vec(), d)?);
                }
                if self.needs(*b) {
                    let d = g.data().iter().zip(va.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::new(vb.shape().to_vec(), d)?);
                }
            }
            Op::Scale(x, k) => self.accumulate(grads, *x, g.map(|v| v * k)),
            Op::ScaleRows { x, s } => {
                let (xv, sv) = (self.value(*x), self.value(*s));
                let width = xv.last_dim();
                if self.needs(*x) {
                    let mut dx = g.data().to_vec();
                    if width > 0 {
                        for (row, &k) in dx.chunks_mut(width).zip(sv.data()) {
                            row.iter_mut().for_each(|v| *v *= k);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
                }
                if self.needs(*s) {
                    let ds: Vec<f64> = if width == 0 {
                        vec![0.0; sv.numel()]
                    } else {
                        g.data()
                            .chunks(width)
                            .zip(xv.data().chunks(width))
                            .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                            .collect()
                    };
                    self.accumulate(grads, *s, Tensor::new(sv.shape().to_vec(), ds)?);
                }
            }
            Op::Relu(x) => {
                let d = g.data().iter().zip(y.data()).map(|(g, &o)| if o > 0.0 { *g } else { 0.0 }).collect();
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), d)?);
            }
            Op::Sigmoid(x) => {
                let d = g.data().iter().zip(y.data()).map(|(g, &o)| g * o * (1.0 - o)).collect();
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), d)?);
            }
            Op::ConcatCols(parts) => {
                let total = y.last_dim();
                let rows = y.numel() / total.max(1);
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let w = pv.last_dim();
                    if self.needs(p) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                        }
                        self.accumulate(grads, p, Tensor::new(pv.shape().to_vec(), d)?);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let n = pv.numel();
                    if self.needs(p) {
                        let d = g.data()[offset..offset + n].to_vec();
                        self.accumulate(grads, p, Tensor::new(pv.shape().to_vec(), d)?);
                    }
                    offset += n;
                }
            }
            Op::Gather { x, index } => {
                let xv = self.value(*x);
                let stride: usize = xv.shape()[1..].iter().product();
                let mut dx = Tensor::zeros(xv.shape());
                for (k, &i) in index.iter().enumerate() {
                    let src = &g.data()[k * stride..(k + 1) * stride];
                    for (d, s) in dx.data_mut()[i * stride..(i + 1) * stride].iter_mut().zip(src) {
                        *d += s;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Stack(parts) => {
                let n = g.numel() / parts.len();
                for (k, &p) in parts.iter().enumerate() {
                    if self.needs(p) {
                        let d = g.data()[k * n..(k + 1) * n].to_vec();
                        self.accumulate(grads, p, Tensor::new(self.shape(p).to_vec(), d)?);
                    }
                }
            }
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                self.accumulate(grads, *x, g.reshape(&shape)?);
            }
            Op::Transpose(x) => {
                let (r, c) = (y.shape()[0], y.shape()[1]);
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[j * r + i] = g.data()[i * c + j];
                    }
                }
                self.accumulate(grads, *x, Tensor::new(vec![c, r], d)?);
            }
            Op::Segment { x, groups, op, argmax } => {
                let xv = self.value(*x);
                let d = xv.shape()[1];
                let mut dx = Tensor::zeros(xv.shape());
                let dxd = dx.data_mut();
                for (gi, members) in groups.iter().enumerate() {
                    if members.is_empty() {
                        continue;
                    }
                    let gr = &g.data()[gi * d..(gi + 1) * d];
                    match op {
                        Reduction::Max => {
                            for c in 0..d {
                                dxd[argmax[gi * d + c] * d + c] += gr[c];
                            }
                        }
                        Reduction::Sum | Reduction::Mean => {
                            let k = if *op == Reduction::Mean { 1.0 / members.len() as f64 } else { 1.0 };
                            for &r in members {
                                for c in 0..d {
                                    dxd[r * d + c] += k * gr[c];
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Softmax(x) => {
                let width = y.last_dim();
                let mut d = vec![0.0; y.numel()];
                for ((dr, yr), gr) in d.chunks_mut(width).zip(y.data().chunks(width)).zip(g.data().chunks(width)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((dv, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *dv = yv * (gv - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), d)?);
            }
            Op::Cosine { a, b, degenerate } => {
                if *degenerate {
                    return Ok(());
                }
                let gs = g.data()[0];
                let c = y.data()[0];
                let (va, vb) = (self.value(*a), self.value(*b));
                let na = va.data().iter().map(|v| v * v).sum::<f64>().sqrt();
                let nb = vb.data().iter().map(|v| v * v).sum::<f64>().sqrt();
                let grad_of = |own: &Tensor, other: &Tensor, n_own: f64| -> Vec<f64> {
                    own.data()
                        .iter()
                        .zip(other.data())
                        .map(|(o, t)| gs * (t / (na * nb) - c * o / (n_own * n_own)))
                        .collect()
                };
                if self.needs(*a) {
                    self.accumulate(grads, *a, Tensor::new(va.shape().to_vec(), grad_of(va, vb, na))?);
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, Tensor::new(vb.shape().to_vec(), grad_of(vb, va, nb))?);
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let pos = geom.positions();
                let width = geom.batch * pos;
                // [batch, c_out, pos] -> [c_out, batch * pos]
                let mut gflat = vec![0.0; geom.c_out * width];
                for bi in 0..geom.batch {
                    for o in 0..geom.c_out {
                        let src = &g.data()[(bi * geom.c_out + o) * pos..(bi * geom.c_out + o + 1) * pos];
                        gflat[o * width + bi * pos..o * width + (bi + 1) * pos].copy_from_slice(src);
                    }
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0; geom.c_out * geom.patch()];
                    kernels::gemm(geom.c_out, width, geom.patch(), 1.0, &gflat, false, cols, true, 0.0, &mut dw);
                    self.accumulate(grads, *w, Tensor::new(self.shape(*w).to_vec(), dw)?);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let db = (0..geom.c_out).map(|o| gflat[o * width..(o + 1) * width].iter().sum()).collect();
                        self.accumulate(grads, *b, Tensor::vector(db));
                    }
                }
                if self.needs(*x) {
                    let mut dcols = vec![0.0; geom.patch() * width];
                    kernels::gemm(geom.patch(), geom.c_out, width, 1.0, self.value(*w).data(), true, &gflat, false, 0.0, &mut dcols);
                    let mut dx = Tensor::zeros(self.shape(*x));
                    kernels::col2im(&dcols, geom, dx.data_mut());
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = Tensor::zeros(self.shape(*x));
                for (gv, &i) in g.data().iter().zip(argmax) {
                    dx.data_mut()[i] += gv;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SumAll(x) => {
                let gs = g.data()[0];
                self.accumulate(grads, *x, Tensor::filled(self.shape(*x), gs));
            }
            Op::Bce { pred, target } => {
                let pv = self.value(*pred);
                let n = pv.numel() as f64;
                let gs = g.data()[0];
                let d = pv
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&p, &t)| {
                        if p < BCE_CLAMP || p > 1.0 - BCE_CLAMP {
                            0.0
                        } else {
                            -gs * (t / p - (1.0 - t) / (1.0 - p)) / n
                        }
                    })
                    .collect();
                self.accumulate(grads, *pred, Tensor::new(pv.shape().to_vec(), d)?);
            }
        }
        Ok(())
    }
}
