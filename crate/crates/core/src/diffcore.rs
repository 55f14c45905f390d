//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every primitive applied to its nodes. Node ids are
//! handed out in creation order, so the node list is already topologically
//! sorted and [`Graph::backward`] is a single reverse sweep. An untaped graph
//! ([`Graph::untaped`]) runs the exact same kernels but records nothing,
//! which is what finite-difference checks and plain inference use.

use crate::{Error, Result};

/// Row-major dense tensor of rank at most 4. Rank 0 is a scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.len() > 4 {
            return Err(Error::Shape(format!("rank {} exceeds 4", shape.len())));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::Shape(format!(
                "expected a scalar, shape is {:?}",
                self.shape
            ))),
        }
    }

    fn same_shape(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        Ok(())
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding so the output has the input's spatial size (odd kernels).
    Same,
    /// No padding; the output shrinks by `kernel - 1`.
    Valid,
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Constant,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    ScalarMul(NodeId, f64),
    AddScalar(NodeId),
    Relu(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    Abs(NodeId),
    SumAxis(NodeId, usize),
    SoftmaxAxis(NodeId, usize),
    WeightedSum(NodeId, usize, Vec<f64>),
    BroadcastAxis(NodeId, usize),
    MeanAll(NodeId),
    SumAll(NodeId),
    ShiftHorizontal(NodeId, isize),
    Correlation(NodeId, NodeId, usize),
    PadEdge(NodeId, usize),
    Stack(Vec<NodeId>),
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        padding: Padding,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A recording of primitive applications (the tape) together with the
/// forward values needed by the backward pass.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    recording: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
fn axis_extents(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Shape(format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct ConvDims {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    pad_y: usize,
    pad_x: usize,
}

impl ConvDims {
    fn new(input: &[usize], kernel: &[usize], padding: Padding) -> Result<Self> {
        let ([cin, h, w], [cout, kcin, kh, kw]) = (input, kernel) else {
            return Err(Error::Shape(format!(
                "conv2d expects input [C,H,W] and kernel [Cout,Cin,kh,kw], got {input:?} and {kernel:?}"
            )));
        };
        if cin != kcin {
            return Err(Error::Shape(format!(
                "conv2d: input has {cin} channels, kernel expects {kcin}"
            )));
        }
        let (ho, wo, pad_y, pad_x) = match padding {
            Padding::Same => {
                if kh % 2 == 0 || kw % 2 == 0 {
                    return Err(Error::Shape("same padding needs odd kernel sizes".into()));
                }
                (*h, *w, kh / 2, kw / 2)
            }
            Padding::Valid => {
                if kh > h || kw > w {
                    return Err(Error::Shape(format!(
                        "conv2d: kernel {kh}x{kw} larger than input {h}x{w}"
                    )));
                }
                (h - kh + 1, w - kw + 1, 0, 0)
            }
        };
        Ok(Self {
            cin: *cin,
            h: *h,
            w: *w,
            cout: *cout,
            kh: *kh,
            kw: *kw,
            ho,
            wo,
            pad_y,
            pad_x,
        })
    }

    /// Output column range whose input column `x + kx - pad_x` is in bounds.
    fn x_range(&self, kx: usize) -> (usize, usize) {
        let lo = self.pad_x.saturating_sub(kx);
        let hi = (self.w + self.pad_x).saturating_sub(kx).min(self.wo);
        (lo, hi.max(lo))
    }

    fn in_row(&self, y: usize, ky: usize) -> Option<usize> {
        let iy = (y + ky).checked_sub(self.pad_y)?;
        (iy < self.h).then_some(iy)
    }
}

fn conv2d_forward(input: &Tensor, kernel: &Tensor, d: &ConvDims) -> Vec<f64> {
    if d.pad_x == 0 && d.pad_y == 0 && d.kw == 3 {
        return conv2d_valid3(input, kernel, d);
    }
    let mut out = vec![0.0; d.cout * d.ho * d.wo];
    let (x_in, k) = (&input.data, &kernel.data);
    for co in 0..d.cout {
        let plane = &mut out[co * d.ho * d.wo..(co + 1) * d.ho * d.wo];
        for ci in 0..d.cin {
            for ky in 0..d.kh {
                for kx in 0..d.kw {
                    let wgt = k[((co * d.cin + ci) * d.kh + ky) * d.kw + kx];
                    if wgt == 0.0 {
                        continue;
                    }
                    let (lo, hi) = d.x_range(kx);
                    for y in 0..d.ho {
                        let Some(iy) = d.in_row(y, ky) else { continue };
                        let start = (ci * d.h + iy) * d.w + lo + kx - d.pad_x;
                        let src = &x_in[start..start + hi - lo];
                        let dst = &mut plane[y * d.wo + lo..y * d.wo + hi];
                        for (o, v) in dst.iter_mut().zip(src) {
                            *o += wgt * v;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Unpadded convolution with three-wide kernels, fusing the three taps of a
/// row into one pass over the output.
fn conv2d_valid3(input: &Tensor, kernel: &Tensor, d: &ConvDims) -> Vec<f64> {
    let mut out = vec![0.0; d.cout * d.ho * d.wo];
    let (x_in, k) = (&input.data, &kernel.data);
    let wo = d.wo;
    for co in 0..d.cout {
        let plane = &mut out[co * d.ho * wo..(co + 1) * d.ho * wo];
        for ci in 0..d.cin {
            for ky in 0..d.kh {
                let base = ((co * d.cin + ci) * d.kh + ky) * 3;
                let (k0, k1, k2) = (k[base], k[base + 1], k[base + 2]);
                for y in 0..d.ho {
                    let row = &x_in[(ci * d.h + y + ky) * d.w..][..wo + 2];
                    let dst = &mut plane[y * wo..][..wo];
                    for (((o, a), b), c) in dst.iter_mut().zip(&row[..wo]).zip(&row[1..]).zip(&row[2..]) {
                        *o += k0 * a + k1 * b + k2 * c;
                    }
                }
            }
        }
    }
    out
}

impl Graph {
    /// A graph that records a tape for [`Graph::backward`].
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// A graph that only evaluates; forward values are identical to a taped
    /// graph but nothing is kept for differentiation.
    pub fn untaped() -> Self {
        Self {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable input (requires grad when the graph records).
    pub fn input(&mut self, value: Tensor) -> NodeId {
        let requires_grad = self.recording;
        self.push_raw(value, Op::Input, requires_grad)
    }

    /// A value that is never differentiated.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_raw(value, Op::Constant, false)
    }

    /// Copies `a`'s value into a constant, cutting the gradient path.
    pub fn detach(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.node(a)?.value.clone();
        Ok(self.constant(v))
    }

    pub fn value(&self, id: NodeId) -> Result<&Tensor> {
        Ok(&self.node(id)?.value)
    }

    fn node(&self, id: NodeId) -> Result<&Node> {
        self.nodes.get(id.0).ok_or_else(|| {
            Error::State(format!("node {} has not been computed on this graph", id.0))
        })
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[NodeId]) -> NodeId {
        let requires_grad = self.recording && inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        let op = if requires_grad { op } else { Op::Constant };
        self.push_raw(value, op, requires_grad)
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (va, vb) = (&self.node(a)?.value, &self.node(b)?.value);
        va.same_shape(vb, name)?;
        let data = va
            .data
            .iter()
            .zip(&vb.data)
            .map(|(x, y)| f(*x, *y))
            .collect();
        Ok(Tensor {
            shape: va.shape.clone(),
            data,
        })
    }

    fn unary(&self, a: NodeId, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let va = &self.node(a)?.value;
        Ok(Tensor {
            shape: va.shape.clone(),
            data: va.data.iter().map(|x| f(*x)).collect(),
        })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.binary(a, b, "div", |x, y| x / y)?;
        Ok(self.push(v, Op::Div(a, b), &[a, b]))
    }

    pub fn scalar_mul(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        let v = self.unary(a, |x| x * s)?;
        Ok(self.push(v, Op::ScalarMul(a, s), &[a]))
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        let v = self.unary(a, |x| x + s)?;
        Ok(self.push(v, Op::AddScalar(a), &[a]))
    }

    /// Subgradient at exactly 0 is 0.
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.unary(a, |x| if x > 0.0 { x } else { 0.0 })?;
        Ok(self.push(v, Op::Relu(a), &[a]))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.unary(a, f64::tanh)?;
        Ok(self.push(v, Op::Tanh(a), &[a]))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.unary(a, sigmoid)?;
        Ok(self.push(v, Op::Sigmoid(a), &[a]))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.unary(a, f64::exp)?;
        Ok(self.push(v, Op::Exp(a), &[a]))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.unary(a, f64::ln)?;
        Ok(self.push(v, Op::Log(a), &[a]))
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.unary(a, f64::sqrt)?;
        Ok(self.push(v, Op::Sqrt(a), &[a]))
    }

    /// Subgradient at exactly 0 is 0.
    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.unary(a, f64::abs)?;
        Ok(self.push(v, Op::Abs(a), &[a]))
    }

    /// Sums out `axis`; the result drops that dimension.
    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let va = &self.node(a)?.value;
        let (outer, n, inner) = axis_extents(&va.shape, axis)?;
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let src = &va.data[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = va.shape.clone();
        shape.remove(axis);
        Ok(self.push(Tensor { shape, data }, Op::SumAxis(a, axis), &[a]))
    }

    pub fn softmax_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let va = &self.node(a)?.value;
        let (_, n, inner) = axis_extents(&va.shape, axis)?;
        let mut data = va.data.clone();
        if data.is_empty() {
            return Ok(self.push(va.clone(), Op::SoftmaxAxis(a, axis), &[a]));
        }
        let mut max = vec![f64::NEG_INFINITY; inner];
        let mut total = vec![0.0; inner];
        for block in data.chunks_exact_mut(n * inner) {
            max.fill(f64::NEG_INFINITY);
            total.fill(0.0);
            for row in block.chunks_exact(inner) {
                max.iter_mut().zip(row).for_each(|(m, v)| *m = m.max(*v));
            }
            for row in block.chunks_exact_mut(inner) {
                for ((v, m), t) in row.iter_mut().zip(&max).zip(total.iter_mut()) {
                    *v = (*v - m).exp();
                    *t += *v;
                }
            }
            for row in block.chunks_exact_mut(inner) {
                row.iter_mut().zip(&total).for_each(|(v, t)| *v /= t);
            }
        }
        let shape = va.shape.clone();
        Ok(self.push(Tensor { shape, data }, Op::SoftmaxAxis(a, axis), &[a]))
    }

    /// `sum_k weights[k] * a[.., k, ..]` along `axis`, dropping it.
    pub fn weighted_sum(&mut self, a: NodeId, axis: usize, weights: &[f64]) -> Result<NodeId> {
        let va = &self.node(a)?.value;
        let (outer, n, inner) = axis_extents(&va.shape, axis)?;
        if weights.len() != n {
            return Err(Error::Shape(format!(
                "weighted_sum: {} weights for axis of length {n}",
                weights.len()
            )));
        }
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for (k, wk) in weights.iter().enumerate() {
                let src = &va.data[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += wk * s;
                }
            }
        }
        let mut shape = va.shape.clone();
        shape.remove(axis);
        Ok(self.push(
            Tensor { shape, data },
            Op::WeightedSum(a, axis, weights.to_vec()),
            &[a],
        ))
    }

    /// Inserts a new axis of length `n` at `axis`, repeating the values.
    pub fn broadcast_axis(&mut self, a: NodeId, axis: usize, n: usize) -> Result<NodeId> {
        let va = &self.node(a)?.value;
        if axis > va.shape.len() || va.shape.len() >= 4 {
            return Err(Error::Shape(format!(
                "cannot broadcast shape {:?} at axis {axis}",
                va.shape
            )));
        }
        let outer: usize = va.shape[..axis].iter().product();
        let inner: usize = va.shape[axis..].iter().product();
        let mut data = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            let src = &va.data[o * inner..(o + 1) * inner];
            for _ in 0..n {
                data.extend_from_slice(src);
            }
        }
        let mut shape = va.shape.clone();
        shape.insert(axis, n);
        Ok(self.push(Tensor { shape, data }, Op::BroadcastAxis(a, axis), &[a]))
    }

    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId> {
        let va = &self.node(a)?.value;
        if va.data.is_empty() {
            return Err(Error::Shape("mean of an empty tensor".into()));
        }
        let v = va.data.iter().sum::<f64>() / va.data.len() as f64;
        Ok(self.push(Tensor::scalar(v), Op::MeanAll(a), &[a]))
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.node(a)?.value.data.iter().sum::<f64>();
        Ok(self.push(Tensor::scalar(v), Op::SumAll(a), &[a]))
    }

    /// `out[.., j] = a[.., clamp(j - d, 0, W - 1)]` along the last axis.
    pub fn shift_horizontal(&mut self, a: NodeId, d: isize) -> Result<NodeId> {
        let va = &self.node(a)?.value;
        let Some(&w) = va.shape.last() else {
            return Err(Error::Shape("shift_horizontal on a scalar".into()));
        };
        let mut data = vec![0.0; va.data.len()];
        for (dst, src) in data.chunks_exact_mut(w).zip(va.data.chunks_exact(w)) {
            for (j, v) in dst.iter_mut().enumerate() {
                *v = src[shift_source(j, d, w)];
            }
        }
        let shape = va.shape.clone();
        Ok(self.push(Tensor { shape, data }, Op::ShiftHorizontal(a, d), &[a]))
    }

    /// Horizontal correlation of two `[C,H,W]` tensors over shifts `0..D`:
    /// `out[d,i,j] = sum_c a[c,i,j] * b[c,i,clamp(j-d)]`, shape `[D,H,W]`.
    pub fn correlation(&mut self, a: NodeId, b: NodeId, max_disparity: usize) -> Result<NodeId> {
        let (va, vb) = (&self.node(a)?.value, &self.node(b)?.value);
        va.same_shape(vb, "correlation")?;
        if va.shape.len() != 3 || max_disparity == 0 {
            return Err(Error::Shape(format!(
                "correlation needs [C,H,W] inputs and D >= 1, got {:?} and D={max_disparity}",
                va.shape
            )));
        }
        let (c, h, w) = (va.shape[0], va.shape[1], va.shape[2]);
        let plane = h * w;
        let mut data = vec![0.0; max_disparity * plane];
        for (d, out) in data.chunks_exact_mut(plane).enumerate() {
            for ch in 0..c {
                let (pa, pb) = (&va.data[ch * plane..][..plane], &vb.data[ch * plane..][..plane]);
                for i in 0..h {
                    let (ra, rb) = (&pa[i * w..][..w], &pb[i * w..][..w]);
                    let ro = &mut out[i * w..][..w];
                    let k = d.min(w);
                    for (o, x) in ro[..k].iter_mut().zip(&ra[..k]) {
                        *o += x * rb[0];
                    }
                    for ((o, x), y) in ro[k..].iter_mut().zip(&ra[k..]).zip(&rb[..w - k]) {
                        *o += x * y;
                    }
                }
            }
        }
        let value = Tensor {
            shape: vec![max_disparity, h, w],
            data,
        };
        Ok(self.push(value, Op::Correlation(a, b, max_disparity), &[a, b]))
    }

    /// Pads the last two axes by `pad` on every side, replicating edge values.
    pub fn pad_edge(&mut self, a: NodeId, pad: usize) -> Result<NodeId> {
        let va = &self.node(a)?.value;
        let rank = va.shape.len();
        if rank < 2 {
            return Err(Error::Shape(format!(
                "pad_edge needs rank >= 2, got {:?}",
                va.shape
            )));
        }
        let (h, w) = (va.shape[rank - 2], va.shape[rank - 1]);
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        let planes = va.data.len() / (h * w);
        let mut data = Vec::with_capacity(planes * ph * pw);
        for p in 0..planes {
            let src = &va.data[p * h * w..(p + 1) * h * w];
            for y in 0..ph {
                let sy = edge_source(y, pad, h);
                for x in 0..pw {
                    data.push(src[sy * w + edge_source(x, pad, w)]);
                }
            }
        }
        let mut shape = va.shape.clone();
        shape[rank - 2] = ph;
        shape[rank - 1] = pw;
        Ok(self.push(Tensor { shape, data }, Op::PadEdge(a, pad), &[a]))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let Some(first) = parts.first() else {
            return Err(Error::Shape("stack of zero tensors".into()));
        };
        let shape0 = self.node(*first)?.value.shape.clone();
        if shape0.len() >= 4 {
            return Err(Error::Shape("stack would exceed rank 4".into()));
        }
        let mut data = Vec::with_capacity(parts.len() * shape0.iter().product::<usize>());
        for p in parts {
            let v = &self.node(*p)?.value;
            if v.shape != shape0 {
                return Err(Error::Shape(format!(
                    "stack: shapes {:?} and {:?} differ",
                    shape0, v.shape
                )));
            }
            data.extend_from_slice(&v.data);
        }
        let mut shape = shape0;
        shape.insert(0, parts.len());
        Ok(self.push(Tensor { shape, data }, Op::Stack(parts.to_vec()), parts))
    }

    /// Stride-1 cross-correlation of `[Cin,H,W]` with `[Cout,Cin,kh,kw]`.
    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, padding: Padding) -> Result<NodeId> {
        let (vi, vk) = (&self.node(input)?.value, &self.node(kernel)?.value);
        let dims = ConvDims::new(&vi.shape, &vk.shape, padding)?;
        let data = conv2d_forward(vi, vk, &dims);
        let value = Tensor {
            shape: vec![dims.cout, dims.ho, dims.wo],
            data,
        };
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                padding,
            },
            &[input, kernel],
        ))
    }

    /// One reverse sweep from a scalar `output`.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        let out = self.node(output)?;
        if out.value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar output, got shape {:?}",
                out.value.shape
            )));
        }
        if !self.recording {
            return Err(Error::State("graph was built without a tape".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);

        for id in (0..=output.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads)?;
            }
            grads[id] = Some(g);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let node = &self.nodes[i];
                match (&node.op, g) {
                    (Op::Input, Some(data)) => Some(Tensor {
                        shape: node.value.shape.clone(),
                        data,
                    }),
                    (Op::Input, None) if node.requires_grad => {
                        Some(Tensor::zeros(&node.value.shape))
                    }
                    _ => None,
                }
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let val = |id: NodeId| &self.nodes[id.0].value;
        let wants = |id: NodeId| self.nodes[id.0].requires_grad;
        let mut acc = |id: NodeId, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[id.0].requires_grad {
                return;
            }
            let slot = grads[id.0].get_or_insert_with(|| vec![0.0; self.nodes[id.0].value.len()]);
            f(slot);
        };
        let y = &node.value.data;

        match &node.op {
            Op::Input | Op::Constant => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s -= g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&val(*a).data, &val(*b).data);
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * vb[i];
                    }
                });
                acc(*b, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * va[i];
                    }
                });
            }
            Op::Div(a, b) => {
                let vb = &val(*b).data;
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] / vb[i];
                    }
                });
                acc(*b, &mut |s| {
                    for i in 0..s.len() {
                        s[i] -= g[i] * y[i] / vb[i];
                    }
                });
            }
            Op::ScalarMul(a, k) => acc(*a, &mut |s| {
                s.iter_mut().zip(g).for_each(|(s, g)| *s += g * k)
            }),
            Op::AddScalar(a) => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g)),
            Op::Relu(a) => {
                let x = &val(*a).data;
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        if x[i] > 0.0 {
                            s[i] += g[i];
                        }
                    }
                });
            }
            Op::Abs(a) => {
                let x = &val(*a).data;
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        if x[i] > 0.0 {
                            s[i] += g[i];
                        } else if x[i] < 0.0 {
                            s[i] -= g[i];
                        }
                    }
                });
            }
            Op::Tanh(a) => acc(*a, &mut |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * (1.0 - y[i] * y[i]);
                }
            }),
            Op::Sigmoid(a) => acc(*a, &mut |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            }),
            Op::Exp(a) => acc(*a, &mut |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * y[i];
                }
            }),
            Op::Log(a) => {
                let x = &val(*a).data;
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] / x[i];
                    }
                });
            }
            Op::Sqrt(a) => acc(*a, &mut |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * 0.5 / y[i];
                }
            }),
            Op::SumAxis(a, axis) => {
                let (outer, n, inner) = axis_extents(&val(*a).shape, *axis)?;
                acc(*a, &mut |s| {
                    for o in 0..outer {
                        for k in 0..n {
                            let dst = &mut s[(o * n + k) * inner..(o * n + k + 1) * inner];
                            for (d, gv) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                                *d += gv;
                            }
                        }
                    }
                });
            }
            Op::BroadcastAxis(a, axis) => {
                let (outer, n, inner) = axis_extents(&node.value.shape, *axis)?;
                acc(*a, &mut |s| {
                    for o in 0..outer {
                        for k in 0..n {
                            let src = &g[(o * n + k) * inner..(o * n + k + 1) * inner];
                            for (d, gv) in s[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                                *d += gv;
                            }
                        }
                    }
                });
            }
            Op::WeightedSum(a, axis, weights) => {
                let (outer, n, inner) = axis_extents(&val(*a).shape, *axis)?;
                acc(*a, &mut |s| {
                    for o in 0..outer {
                        for (k, wk) in weights.iter().enumerate().take(n) {
                            let dst = &mut s[(o * n + k) * inner..(o * n + k + 1) * inner];
                            for (d, gv) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                                *d += wk * gv;
                            }
                        }
                    }
                });
            }
            Op::SoftmaxAxis(a, axis) => {
                let (outer, n, inner) = axis_extents(&node.value.shape, *axis)?;
                acc(*a, &mut |s| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |k: usize| (o * n + k) * inner + i;
                            let dot: f64 = (0..n).map(|k| g[idx(k)] * y[idx(k)]).sum();
                            for k in 0..n {
                                s[idx(k)] += y[idx(k)] * (g[idx(k)] - dot);
                            }
                        }
                    }
                });
            }
            Op::MeanAll(a) => {
                let n = val(*a).len() as f64;
                acc(*a, &mut |s| s.iter_mut().for_each(|s| *s += g[0] / n));
            }
            Op::SumAll(a) => acc(*a, &mut |s| s.iter_mut().for_each(|s| *s += g[0])),
            Op::ShiftHorizontal(a, d) => {
                let w = *node.value.shape.last().expect("non-scalar");
                acc(*a, &mut |s| {
                    for (dst, src) in s.chunks_exact_mut(w).zip(g.chunks_exact(w)) {
                        for (j, gv) in src.iter().enumerate() {
                            dst[shift_source(j, *d, w)] += gv;
                        }
                    }
                });
            }
            Op::Correlation(a, b, dmax) => {
                let (va, vb) = (val(*a), val(*b));
                let (c, h, w) = (va.shape[0], va.shape[1], va.shape[2]);
                let plane = h * w;
                acc(*a, &mut |s| {
                    for d in 0..*dmax {
                        let gd = &g[d * plane..][..plane];
                        for ch in 0..c {
                            let pb = &vb.data[ch * plane..][..plane];
                            let sa = &mut s[ch * plane..][..plane];
                            for p in 0..plane {
                                let (i, j) = (p / w, p % w);
                                sa[p] += gd[p] * pb[i * w + shift_source(j, d as isize, w)];
                            }
                        }
                    }
                });
                acc(*b, &mut |s| {
                    for d in 0..*dmax {
                        let gd = &g[d * plane..][..plane];
                        for ch in 0..c {
                            let pa = &va.data[ch * plane..][..plane];
                            let sb = &mut s[ch * plane..][..plane];
                            for p in 0..plane {
                                let (i, j) = (p / w, p % w);
                                sb[i * w + shift_source(j, d as isize, w)] += gd[p] * pa[p];
                            }
                        }
                    }
                });
            }
            Op::PadEdge(a, pad) => {
                let shape = &val(*a).shape;
                let rank = shape.len();
                let (h, w) = (shape[rank - 2], shape[rank - 1]);
                let (ph, pw) = (h + 2 * pad, w + 2 * pad);
                acc(*a, &mut |s| {
                    for (p, gp) in g.chunks_exact(ph * pw).enumerate() {
                        let dst = &mut s[p * h * w..(p + 1) * h * w];
                        for y in 0..ph {
                            let sy = edge_source(y, *pad, h);
                            for x in 0..pw {
                                dst[sy * w + edge_source(x, *pad, w)] += gp[y * pw + x];
                            }
                        }
                    }
                });
            }
            Op::Stack(parts) => {
                let chunk = g.len() / parts.len();
                for (k, p) in parts.iter().enumerate() {
                    let src = &g[k * chunk..(k + 1) * chunk];
                    acc(*p, &mut |s| {
                        s.iter_mut().zip(src).for_each(|(s, g)| *s += g)
                    });
                }
            }
            Op::Conv2d {
                input,
                kernel,
                padding,
            } => {
                let (vi, vk) = (val(*input), val(*kernel));
                let d = ConvDims::new(&vi.shape, &vk.shape, *padding)?;
                if wants(*input) {
                    acc(*input, &mut |s| {
                        for co in 0..d.cout {
                            for ci in 0..d.cin {
                                for ky in 0..d.kh {
                                    for kx in 0..d.kw {
                                        let wgt =
                                            vk.data[((co * d.cin + ci) * d.kh + ky) * d.kw + kx];
                                        let (lo, hi) = d.x_range(kx);
                                        for yy in 0..d.ho {
                                            let Some(iy) = d.in_row(yy, ky) else { continue };
                                            let gr = &g[(co * d.ho + yy) * d.wo..];
                                            let dst = &mut s[(ci * d.h + iy) * d.w..];
                                            for x in lo..hi {
                                                dst[x + kx - d.pad_x] += wgt * gr[x];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    });
                }
                if wants(*kernel) {
                    acc(*kernel, &mut |s| {
                        for co in 0..d.cout {
                            for ci in 0..d.cin {
                                for ky in 0..d.kh {
                                    for kx in 0..d.kw {
                                        let (lo, hi) = d.x_range(kx);
                                        let mut total = 0.0;
                                        for yy in 0..d.ho {
                                            let Some(iy) = d.in_row(yy, ky) else { continue };
                                            let gr = &g[(co * d.ho + yy) * d.wo..];
                                            let src = &vi.data[(ci * d.h + iy) * d.w..];
                                            for x in lo..hi {
                                                total += gr[x] * src[x + kx - d.pad_x];
                                            }
                                        }
                                        s[((co * d.cin + ci) * d.kh + ky) * d.kw + kx] += total;
                                    }
                                }
                            }
                        }
                    });
                }
            }
        }
        Ok(())
    }
}

#[inline]
fn shift_source(j: usize, d: isize, w: usize) -> usize {
    (j as isize - d).clamp(0, w as isize - 1) as usize
}

#[inline]
fn edge_source(i: usize, pad: usize, n: usize) -> usize {
    i.saturating_sub(pad).min(n - 1)
}

/// Result of [`Graph::backward`]: gradients for every input node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to an input node. Inputs the output does not
    /// depend on get an all-zero gradient.
    pub fn wrt(&self, id: NodeId) -> Result<&Tensor> {
        self.grads
            .get(id.0)
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::State(format!("node {} is not a differentiable input", id.0)))
    }
}

/// Autodiff versus central differences over every component of every input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// `||ad - fd||_2 / ||fd||_2`, the denominator floored at 1e-12.
    pub relative: f64,
    /// Largest componentwise `|ad - fd|`.
    pub max_abs_error: f64,
    /// Largest componentwise `|fd|`.
    pub max_abs_grad: f64,
}

pub fn grad_check_stats<F>(f: F, inputs: &[Tensor], fd_step: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    if !(fd_step > 0.0) {
        return Err(Error::Config(format!(
            "fd_step must be positive, got {fd_step}"
        )));
    }
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &ids)?;
    let grads = g.backward(out)?;

    let eval = |probe: &[Tensor]| -> Result<f64> {
        let mut g = Graph::untaped();
        let ids: Vec<NodeId> = probe.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &ids)?;
        g.value(out)?.item()
    };

    let mut probe = inputs.to_vec();
    let (mut err2, mut fd2) = (0.0f64, 0.0f64);
    let (mut max_abs_error, mut max_abs_grad) = (0.0f64, 0.0f64);
    for (k, id) in ids.iter().enumerate() {
        let ad = grads.wrt(*id)?;
        for i in 0..inputs[k].len() {
            let x0 = inputs[k].data[i];
            probe[k].data[i] = x0 + fd_step;
            let up = eval(&probe)?;
            probe[k].data[i] = x0 - fd_step;
            let down = eval(&probe)?;
            probe[k].data[i] = x0;
            let fd = (up - down) / (2.0 * fd_step);
            let e = ad.data[i] - fd;
            err2 += e * e;
            fd2 += fd * fd;
            max_abs_error = max_abs_error.max(e.abs());
            max_abs_grad = max_abs_grad.max(fd.abs());
        }
    }
    Ok(GradCheck {
        relative: err2.sqrt() / fd2.sqrt().max(1e-12),
        max_abs_error,
        max_abs_grad,
    })
}

/// Relative error of autodiff against central differences for a
/// multi-input scalar function; see [`GradCheck::relative`].
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], fd_step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    Ok(grad_check_stats(f, inputs, fd_step)?.relative)
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<F>(f: F, input: &Tensor, fd_step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    grad_check_many(|g, ids| f(g, ids[0]), std::slice::from_ref(input), fd_step)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Values bounded away from 0 so kinks at the origin are never crossed.
    fn random_away_from_zero(shape: &[usize], seed: u64) -> Tensor {
        let mut x = random(shape, seed);
        for v in x.data_mut() {
            *v = v.signum() * (0.2 + v.abs());
        }
        x
    }

    #[test]
    fn add_values() {
        let mut g = Graph::new();
        let a = g.input(t(&[2], &[1.0, 2.0]));
        let b = g.input(t(&[2], &[3.0, 4.0]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).unwrap().data(), &[4.0, 6.0]);
    }

    #[test]
    fn shape_mismatch() {
        let mut g = Graph::new();
        let a = g.input(t(&[2], &[1.0, 2.0]));
        let b = g.input(t(&[3], &[1.0, 2.0, 3.0]));
        assert!(matches!(g.add(a, b), Err(Error::Shape(_))));
        assert!(matches!(g.sum_axis(a, 1), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(&[4]));
        let s = g.softmax_axis(a, 0).unwrap();
        assert_eq!(g.value(s).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn shift_clamps_at_left_edge() {
        let mut g = Graph::new();
        let a = g.input(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let s = g.shift_horizontal(a, 1).unwrap();
        assert_eq!(g.value(s).unwrap().data(), &[1.0, 1.0, 2.0]);
        let s = g.shift_horizontal(a, -1).unwrap();
        assert_eq!(g.value(s).unwrap().data(), &[2.0, 3.0, 3.0]);
    }

    #[test]
    fn pad_edge_replicates() {
        let mut g = Graph::new();
        let a = g.input(t(&[1, 2], &[1.0, 2.0]));
        let p = g.pad_edge(a, 1).unwrap();
        assert_eq!(g.value(p).unwrap().shape(), &[3, 4]);
        assert_eq!(
            g.value(p).unwrap().data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]
        );
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn mean_gradient() {
        let mut g = Graph::new();
        let x = g.input(random(&[5, 2], 1));
        let y = g.mean_all(x).unwrap();
        let grads = g.backward(y).unwrap();
        assert!(grads.wrt(x).unwrap().data().iter().all(|v| *v == 0.1));
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::new();
        let x = g.input(random(&[3], 2));
        assert!(matches!(g.backward(x), Err(Error::Shape(_))));
        let empty = Graph::new();
        assert!(matches!(empty.backward(x), Err(Error::State(_))));
        let mut u = Graph::untaped();
        let x = u.input(Tensor::scalar(1.0));
        assert!(matches!(u.backward(x), Err(Error::State(_))));
    }

    #[test]
    fn relu_at_zero_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[2]));
        let r = g.relu(x).unwrap();
        let s = g.sum_all(r).unwrap();
        assert_eq!(g.backward(s).unwrap().wrt(x).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn unused_input_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(2.0));
        let unused = g.input(t(&[2], &[1.0, 1.0]));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(unused).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(2.0));
        let d = g.detach(x).unwrap();
        let y = g.mul(x, d).unwrap();
        assert_eq!(g.backward(y).unwrap().wrt(x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn linear_function_is_exact() {
        let w = random(&[6], 3);
        let err = grad_check(
            |g, x| {
                let wn = g.constant(w.clone());
                let p = g.mul(x, wn)?;
                let s = g.sum_all(p)?;
                g.scalar_mul(s, 2.5)
            },
            &random(&[6], 4),
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn relu_away_from_kink() {
        let err = grad_check(
            |g, x| {
                let r = g.relu(x)?;
                let sq = g.mul(r, r)?;
                g.mean_all(sq)
            },
            &random_away_from_zero(&[4, 5], 5),
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    /// Every primitive against central differences on random inputs.
    #[test]
    fn primitives_match_finite_differences() {
        type Case = (
            &'static str,
            Box<dyn Fn(&mut Graph, NodeId) -> Result<NodeId>>,
            Tensor,
        );
        let other = random(&[2, 3, 4], 10);
        let o2 = other.clone();
        let o3 = other.clone();
        let o4 = other.clone();
        let cases: Vec<Case> = vec![
            (
                "add",
                Box::new(move |g, x| {
                    let c = g.constant(other.clone());
                    let y = g.add(x, c)?;
                    let y = g.mul(y, y)?;
                    g.mean_all(y)
                }),
                random(&[2, 3, 4], 11),
            ),
            (
                "sub",
                Box::new(move |g, x| {
                    let c = g.constant(o2.clone());
                    let y = g.sub(c, x)?;
                    let y = g.mul(y, y)?;
                    g.mean_all(y)
                }),
                random(&[2, 3, 4], 12),
            ),
            (
                "mul",
                Box::new(move |g, x| {
                    let c = g.constant(o3.clone());
                    let y = g.mul(x, c)?;
                    let y = g.mul(y, x)?;
                    g.sum_all(y)
                }),
                random(&[2, 3, 4], 13),
            ),
            (
                "div",
                Box::new(move |g, x| {
                    let c = g.constant(o4.clone());
                    let e = g.exp(x)?;
                    let y = g.div(c, e)?;
                    g.sum_all(y)
                }),
                random(&[2, 3, 4], 14),
            ),
            (
                "scalar_mul",
                Box::new(|g, x| {
                    let y = g.scalar_mul(x, -1.7)?;
                    let y = g.mul(y, y)?;
                    g.sum_all(y)
                }),
                random(&[3, 3], 15),
            ),
            (
                "add_scalar",
                Box::new(|g, x| {
                    let y = g.add_scalar(x, 0.3)?;
                    let y = g.mul(y, y)?;
                    g.sum_all(y)
                }),
                random(&[3, 3], 16),
            ),
            (
                "relu",
                Box::new(|g, x| {
                    let y = g.relu(x)?;
                    let y = g.mul(y, y)?;
                    g.sum_all(y)
                }),
                random_away_from_zero(&[3, 4], 17),
            ),
            (
                "abs",
                Box::new(|g, x| {
                    let y = g.abs(x)?;
                    let y = g.mul(y, y)?;
                    g.sum_all(y)
                }),
                random_away_from_zero(&[3, 4], 18),
            ),
            (
                "tanh",
                Box::new(|g, x| {
                    let y = g.tanh(x)?;
                    g.sum_all(y)
                }),
                random(&[3, 4], 19),
            ),
            (
                "sigmoid",
                Box::new(|g, x| {
                    let y = g.sigmoid(x)?;
                    let y = g.mul(y, y)?;
                    g.sum_all(y)
                }),
                random(&[3, 4], 20),
            ),
            (
                "exp",
                Box::new(|g, x| {
                    let y = g.exp(x)?;
                    g.mean_all(y)
                }),
                random(&[3, 4], 21),
            ),
            (
                "log",
                Box::new(|g, x| {
                    let e = g.exp(x)?;
                    let e = g.add_scalar(e, 0.5)?;
                    let y = g.log(e)?;
                    g.sum_all(y)
                }),
                random(&[3, 4], 22),
            ),
            (
                "sqrt",
                Box::new(|g, x| {
                    let e = g.exp(x)?;
                    let y = g.sqrt(e)?;
                    g.sum_all(y)
                }),
                random(&[3, 4], 23),
            ),
            (
                "sum_axis",
                Box::new(|g, x| {
                    let y = g.sum_axis(x, 1)?;
                    let y = g.mul(y, y)?;
                    g.sum_all(y)
                }),
                random(&[2, 3, 4], 24),
            ),
            (
                "softmax_axis",
                Box::new(|g, x| {
                    let y = g.softmax_axis(x, 1)?;
                    let w = g.weighted_sum(y, 1, &[0.0, 1.0, 2.0])?;
                    let w = g.mul(w, w)?;
                    g.sum_all(w)
                }),
                random(&[2, 3, 4], 25),
            ),
            (
                "weighted_sum",
                Box::new(|g, x| {
                    let y = g.weighted_sum(x, 2, &[0.5, -1.0, 2.0, 0.1])?;
                    let y = g.mul(y, y)?;
                    g.sum_all(y)
                }),
                random(&[2, 3, 4], 26),
            ),
            (
                "broadcast_axis",
                Box::new(|g, x| {
                    let y = g.broadcast_axis(x, 1, 3)?;
                    let s = g.shift_horizontal(y, 1)?;
                    let y = g.mul(y, s)?;
                    g.sum_all(y)
                }),
                random(&[2, 4], 27),
            ),
            (
                "shift_horizontal",
                Box::new(|g, x| {
                    let s = g.shift_horizontal(x, 2)?;
                    let y = g.mul(s, x)?;
                    g.sum_all(y)
                }),
                random(&[2, 5], 28),
            ),
            (
                "stack",
                Box::new(|g, x| {
                    let s = g.shift_horizontal(x, 1)?;
                    let st = g.stack(&[x, s])?;
                    let y = g.mul(st, st)?;
                    let y = g.sum_axis(y, 0)?;
                    let y = g.mul(y, y)?;
                    g.sum_all(y)
                }),
                random(&[2, 5], 29),
            ),
            (
                "pad_edge",
                Box::new(|g, x| {
                    let p = g.pad_edge(x, 2)?;
                    let y = g.mul(p, p)?;
                    let y = g.weighted_sum(y, 0, &[1.0, -0.5])?;
                    g.sum_all(y)
                }),
                random(&[2, 3, 4], 31),
            ),
            (
                "mean_all",
                Box::new(|g, x| {
                    let y = g.mul(x, x)?;
                    g.mean_all(y)
                }),
                random(&[4], 30),
            ),
        ];
        for (name, f, x) in cases {
            let err = grad_check(f, &x, 1e-3).unwrap();
            assert!(err < 1e-4, "{name}: {err}");
        }
    }

    #[test]
    fn conv2d_matches_finite_differences() {
        for padding in [Padding::Same, Padding::Valid] {
            let k = random(&[2, 1, 3, 3], 40);
            let err = grad_check(
                |g, x| {
                    let kn = g.constant(k.clone());
                    let c = g.conv2d(x, kn, padding)?;
                    g.mean_all(c)
                },
                &random(&[1, 8, 8], 41),
                1e-3,
            )
            .unwrap();
            assert!(err < 1e-4, "{padding:?}: {err}");
            // kernel gradient too, through a nonlinearity
            let x = random(&[2, 6, 7], 42);
            let err = grad_check_many(
                |g, ids| {
                    let c = g.conv2d(ids[0], ids[1], padding)?;
                    let t = g.tanh(c)?;
                    g.sum_all(t)
                },
                &[x, random(&[3, 2, 3, 3], 43)],
                1e-3,
            )
            .unwrap();
            assert!(err < 1e-4, "{padding:?}: {err}");
        }
    }

    #[test]
    fn correlation_matches_shift_mul_sum() {
        let (a, b) = (random(&[3, 4, 9], 70), random(&[3, 4, 9], 71));
        let mut g = Graph::new();
        let (ia, ib) = (g.input(a.clone()), g.input(b.clone()));
        let fused = g.correlation(ia, ib, 5).unwrap();
        let mut slices = Vec::new();
        for d in 0..5 {
            let s = g.shift_horizontal(ib, d).unwrap();
            let p = g.mul(ia, s).unwrap();
            slices.push(g.sum_axis(p, 0).unwrap());
        }
        let slow = g.stack(&slices).unwrap();
        let (f, s) = (g.value(fused).unwrap(), g.value(slow).unwrap());
        assert_eq!(f.shape(), s.shape());
        for (x, y) in f.data().iter().zip(s.data()) {
            assert!((x - y).abs() < 1e-14);
        }
        let err = grad_check_many(
            |g, ids| {
                let c = g.correlation(ids[0], ids[1], 5)?;
                let t = g.tanh(c)?;
                g.sum_all(t)
            },
            &[a, b],
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn valid_conv_on_zero_padded_input_matches_same() {
        let (x, k) = (random(&[2, 5, 7], 80), random(&[3, 2, 3, 3], 81));
        let mut padded = Tensor::zeros(&[2, 7, 9]);
        for c in 0..2 {
            for i in 0..5 {
                for j in 0..7 {
                    padded.data_mut()[(c * 7 + i + 1) * 9 + j + 1] = x.data()[(c * 5 + i) * 7 + j];
                }
            }
        }
        let mut g = Graph::new();
        let (ix, ip, ik) = (g.input(x), g.input(padded), g.constant(k));
        let same = g.conv2d(ix, ik, Padding::Same).unwrap();
        let valid = g.conv2d(ip, ik, Padding::Valid).unwrap();
        let (a, b) = (g.value(same).unwrap(), g.value(valid).unwrap());
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn grad_check_stats_see_truncation_error() {
        // central differences of x^3 overshoot 3x^2 by exactly h^2
        let x = t(&[3], &[0.5, -1.0, 2.0]);
        let h = 1e-2;
        let stats = grad_check_stats(
            |g, ids| {
                let sq = g.mul(ids[0], ids[0])?;
                let cube = g.mul(sq, ids[0])?;
                g.sum_all(cube)
            },
            std::slice::from_ref(&x),
            h,
        )
        .unwrap();
        assert!((stats.max_abs_error - h * h).abs() < 1e-9, "{stats:?}");
        assert!((stats.max_abs_grad - (12.0 + h * h)).abs() < 1e-9);
        let fd: Vec<f64> = [0.75, 3.0, 12.0].iter().map(|g| g + h * h).collect();
        let norm = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((stats.relative - (3.0f64).sqrt() * h * h / norm).abs() < 1e-9);
    }

    #[test]
    fn conv2d_known_values() {
        let mut g = Graph::new();
        let x = g.input(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let k = g.constant(t(&[1, 1, 1, 1], &[2.0]));
        let c = g.conv2d(x, k, Padding::Valid).unwrap();
        assert_eq!(g.value(c).unwrap().data(), &[2.0, 4.0, 6.0, 8.0]);
        let box3 = g.constant(Tensor::new(&[1, 1, 3, 3], vec![1.0; 9]).unwrap());
        let c = g.conv2d(x, box3, Padding::Same).unwrap();
        // zero padding: every output sees all four inputs
        assert_eq!(g.value(c).unwrap().data(), &[10.0; 4]);
    }

    #[test]
    fn softmax_conv_composition() {
        let k = random(&[4, 1, 3, 3], 50);
        let err = grad_check(
            |g, x| {
                let kn = g.constant(k.clone());
                let c = g.conv2d(x, kn, Padding::Same)?;
                let s = g.softmax_axis(c, 0)?;
                let d = g.weighted_sum(s, 0, &[0.0, 1.0, 2.0, 3.0])?;
                g.mean_all(d)
            },
            &random(&[1, 6, 6], 51),
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn backward_is_linear() {
        let x0 = random(&[3, 4], 60);
        let grad = |a: f64, b: f64| {
            let mut g = Graph::new();
            let x = g.input(x0.clone());
            let e = g.exp(x)?;
            let f = g.mean_all(e)?;
            let t = g.tanh(x)?;
            let h = g.sum_all(t)?;
            let fa = g.scalar_mul(f, a)?;
            let hb = g.scalar_mul(h, b)?;
            let y = g.add(fa, hb)?;
            Ok::<_, Error>(g.backward(y)?.wrt(x)?.clone())
        };
        let (gf, gh, mix) = (
            grad(1.0, 0.0).unwrap(),
            grad(0.0, 1.0).unwrap(),
            grad(2.0, -3.0).unwrap(),
        );
        for i in 0..x0.len() {
            let expect = 2.0 * gf.data()[i] - 3.0 * gh.data()[i];
            assert!((mix.data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn untaped_forward_is_identical() {
        let x0 = random(&[1, 6, 6], 70);
        let k = random(&[2, 1, 3, 3], 71);
        let run = |mut g: Graph| {
            let x = g.input(x0.clone());
            let kn = g.constant(k.clone());
            let c = g.conv2d(x, kn, Padding::Same).unwrap();
            let s = g.softmax_axis(c, 0).unwrap();
            g.value(s).unwrap().clone()
        };
        assert_eq!(run(Graph::new()), run(Graph::untaped()));
    }
}
