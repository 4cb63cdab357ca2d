//! Dense f32 tensors with reverse-mode automatic differentiation.
//!
//! Tensors are immutable after construction and form a DAG through the op
//! that produced them. `backward` walks the DAG in reverse topological order
//! and returns a gradient map keyed by node id. Just enough surface for the
//! codec: broadcast elementwise ops, matmul, conv2d, bilinear resampling,
//! reductions, and a straight-through rounding op.

mod conv;
pub mod detmath;
mod interp;

pub use interp::{bilinear_taps, sample_bilinear};

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{CodecError, Result};

static NEXT_ID: AtomicUsize = AtomicUsize::new(1);

fn fresh_id() -> usize {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnKind {
    Relu,
    Exp,
    Log,
    Sigmoid,
    Tanh,
    Sqrt,
    /// Round half away from zero; backward passes gradients through.
    SteRound,
    /// Clamp to [0, 1]; backward masks the saturated region.
    Clamp01,
}

#[allow(dead_code)] // op arguments are kept for completeness even when backward ignores them
enum Op {
    Leaf,
    Bin(BinKind, Tensor, Tensor),
    Un(UnKind, Tensor),
    /// out = a * x + b with scalar a, b.
    Affine(f32, f32, Tensor),
    Matmul(Tensor, Tensor),
    Conv2d {
        input: Tensor,
        kernel: Tensor,
        stride: usize,
        pad: usize,
    },
    SumAxes(Tensor, Vec<usize>),
    SumAll(Tensor),
    Reshape(Tensor),
    Concat(Vec<Tensor>, usize),
    SliceAxis {
        x: Tensor,
        axis: usize,
        start: usize,
        len: usize,
    },
    /// (C,H,W) -> (H*W, C)
    ChwToTokens(Tensor),
    /// (H*W, C) -> (C,H,W)
    TokensToChw(Tensor, usize, usize),
    Upsample2x(Tensor),
    Resize(Tensor, usize, usize),
    AvgPool2(Tensor),
    GridSample {
        grid: Tensor,
        coords: Vec<(f32, f32)>,
    },
    Warp {
        img: Tensor,
        flow: Tensor,
    },
}

struct Node {
    id: usize,
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    op: Op,
}

/// Handle to an immutable tensor value in the autodiff graph.
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

/// Gradients of a scalar loss keyed by tensor node id.
pub struct Gradients(HashMap<usize, Vec<f32>>);

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<&[f32]> {
        self.0.get(&t.id()).map(|v| v.as_slice())
    }

    pub fn take(&mut self, t: &Tensor) -> Option<Vec<f32>> {
        self.0.remove(&t.id())
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn bin_name(k: BinKind) -> &'static str {
    match k {
        BinKind::Add => "add",
        BinKind::Sub => "sub",
        BinKind::Mul => "mul",
        BinKind::Div => "div",
    }
}

/// Broadcast two shapes with trailing-dimension alignment.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        if da == db || da == 1 || db == 1 {
            out[i] = da.max(db);
        } else {
            return Err(CodecError::Shape(format!(
                "cannot broadcast {:?} with {:?}",
                a, b
            )));
        }
    }
    Ok(out)
}

fn strides_for(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Strides of `shape` viewed as `out_rank` dims, zeroed on broadcast axes.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let off = out_shape.len() - shape.len();
    let base = strides_for(shape);
    let mut s = vec![0usize; out_shape.len()];
    for i in 0..shape.len() {
        s[off + i] = if shape[i] == 1 { 0 } else { base[i] };
    }
    s
}

impl Tensor {
    fn from_node(shape: Vec<usize>, data: Vec<f32>, requires_grad: bool, op: Op) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Rc::new(Node {
            id: fresh_id(),
            shape,
            data,
            requires_grad,
            op,
        }))
    }

    pub fn from_vec(data: Vec<f32>, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != data.len() {
            return Err(CodecError::Shape(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor::from_node(shape.to_vec(), data, false, Op::Leaf))
    }

    pub fn from_slice(data: &[f32], shape: &[usize]) -> Result<Tensor> {
        Tensor::from_vec(data.to_vec(), shape)
    }

    pub fn scalar(v: f32) -> Tensor {
        Tensor::from_node(vec![1], vec![v], false, Op::Leaf)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::from_node(shape.to_vec(), vec![0.0; numel(shape)], false, Op::Leaf)
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Tensor::from_node(shape.to_vec(), vec![1.0; numel(shape)], false, Op::Leaf)
    }

    pub fn full(shape: &[usize], v: f32) -> Tensor {
        Tensor::from_node(shape.to_vec(), vec![v; numel(shape)], false, Op::Leaf)
    }

    /// Leaf that participates in `backward`.
    pub fn param(data: Vec<f32>, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != data.len() {
            return Err(CodecError::Shape(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor::from_node(shape.to_vec(), data, true, Op::Leaf))
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.0.data
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn item(&self) -> f32 {
        debug_assert_eq!(self.numel(), 1);
        self.0.data[0]
    }

    /// Break the graph: same data, fresh constant leaf.
    pub fn detach(&self) -> Tensor {
        Tensor::from_node(self.0.shape.clone(), self.0.data.clone(), false, Op::Leaf)
    }

    fn out(&self, shape: Vec<usize>, data: Vec<f32>, op: Op) -> Tensor {
        let rg = match &op {
            Op::Leaf => false,
            Op::Bin(_, a, b) => a.requires_any() || b.requires_any(),
            Op::Un(_, x)
            | Op::Affine(_, _, x)
            | Op::SumAxes(x, _)
            | Op::SumAll(x)
            | Op::Reshape(x)
            | Op::ChwToTokens(x)
            | Op::TokensToChw(x, _, _)
            | Op::Upsample2x(x)
            | Op::Resize(x, _, _)
            | Op::AvgPool2(x) => x.requires_any(),
            Op::SliceAxis { x, .. } => x.requires_any(),
            Op::Matmul(a, b) => a.requires_any() || b.requires_any(),
            Op::Conv2d { input, kernel, .. } => input.requires_any() || kernel.requires_any(),
            Op::Concat(xs, _) => xs.iter().any(|x| x.requires_any()),
            Op::GridSample { grid, .. } => grid.requires_any(),
            Op::Warp { img, flow } => img.requires_any() || flow.requires_any(),
        };
        let _ = self;
        Tensor::from_node(shape, data, rg, op)
    }

    fn requires_any(&self) -> bool {
        self.0.requires_grad || !matches!(self.0.op, Op::Leaf)
    }

    // ---- elementwise ----

    pub fn binary(&self, k: BinKind, other: &Tensor) -> Result<Tensor> {
        let shape = broadcast_shape(self.shape(), other.shape())?;
        let n = numel(&shape);
        let mut data = vec![0.0f32; n];
        if self.shape() == other.shape() {
            let a = self.data();
            let b = other.data();
            match k {
                BinKind::Add => {
                    for i in 0..n {
                        data[i] = a[i] + b[i];
                    }
                }
                BinKind::Sub => {
                    for i in 0..n {
                        data[i] = a[i] - b[i];
                    }
                }
                BinKind::Mul => {
                    for i in 0..n {
                        data[i] = a[i] * b[i];
                    }
                }
                BinKind::Div => {
                    for i in 0..n {
                        data[i] = a[i] / b[i];
                    }
                }
            }
        } else {
            let sa = broadcast_strides(self.shape(), &shape);
            let sb = broadcast_strides(other.shape(), &shape);
            let so = strides_for(&shape);
            let a = self.data();
            let b = other.data();
            for i in 0..n {
                let (mut ia, mut ib, mut rem) = (0usize, 0usize, i);
                for d in 0..shape.len() {
                    let idx = rem / so[d];
                    rem %= so[d];
                    ia += idx * sa[d];
                    ib += idx * sb[d];
                }
                data[i] = match k {
                    BinKind::Add => a[ia] + b[ib],
                    BinKind::Sub => a[ia] - b[ib],
                    BinKind::Mul => a[ia] * b[ib],
                    BinKind::Div => a[ia] / b[ib],
                };
            }
        }
        Ok(self.out(shape, data, Op::Bin(k, self.clone(), other.clone())))
    }

    pub fn add(&self, o: &Tensor) -> Result<Tensor> {
        self.binary(BinKind::Add, o)
    }
    pub fn sub(&self, o: &Tensor) -> Result<Tensor> {
        self.binary(BinKind::Sub, o)
    }
    pub fn mul(&self, o: &Tensor) -> Result<Tensor> {
        self.binary(BinKind::Mul, o)
    }
    pub fn div(&self, o: &Tensor) -> Result<Tensor> {
        self.binary(BinKind::Div, o)
    }

    pub fn unary(&self, k: UnKind) -> Tensor {
        let data: Vec<f32> = self
            .data()
            .iter()
            .map(|&x| match k {
                UnKind::Relu => x.max(0.0),
                UnKind::Exp => detmath::exp_det(x),
                UnKind::Log => detmath::ln_det(x),
                UnKind::Sigmoid => detmath::sigmoid_det(x),
                UnKind::Tanh => detmath::tanh_det(x),
                UnKind::Sqrt => x.sqrt(),
                UnKind::SteRound => round_half_away(x),
                UnKind::Clamp01 => x.clamp(0.0, 1.0),
            })
            .collect();
        self.out(self.shape().to_vec(), data, Op::Un(k, self.clone()))
    }

    pub fn relu(&self) -> Tensor {
        self.unary(UnKind::Relu)
    }
    pub fn exp(&self) -> Tensor {
        self.unary(UnKind::Exp)
    }
    pub fn log(&self) -> Tensor {
        self.unary(UnKind::Log)
    }
    pub fn sigmoid(&self) -> Tensor {
        self.unary(UnKind::Sigmoid)
    }
    pub fn tanh(&self) -> Tensor {
        self.unary(UnKind::Tanh)
    }
    pub fn sqrt(&self) -> Tensor {
        self.unary(UnKind::Sqrt)
    }
    /// Hard round in the forward pass, identity gradient in the backward.
    pub fn ste_round(&self) -> Tensor {
        self.unary(UnKind::SteRound)
    }
    pub fn clamp01(&self) -> Tensor {
        self.unary(UnKind::Clamp01)
    }

    pub fn affine(&self, a: f32, b: f32) -> Tensor {
        let data: Vec<f32> = self.data().iter().map(|&x| a * x + b).collect();
        self.out(self.shape().to_vec(), data, Op::Affine(a, b, self.clone()))
    }

    pub fn neg(&self) -> Tensor {
        self.affine(-1.0, 0.0)
    }

    pub fn scale(&self, a: f32) -> Tensor {
        self.affine(a, 0.0)
    }

    pub fn square(&self) -> Result<Tensor> {
        self.mul(self)
    }

    /// Element values without graph participation (e.g. softmax row max).
    pub fn floor_detached(&self) -> Tensor {
        let data: Vec<f32> = self.data().iter().map(|&x| x.floor()).collect();
        Tensor::from_node(self.shape().to_vec(), data, false, Op::Leaf)
    }

    // ---- reductions ----

    pub fn sum_all(&self) -> Tensor {
        let s: f32 = self.data().iter().sum();
        self.out(vec![1], vec![s], Op::SumAll(self.clone()))
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel() as f32;
        self.sum_all().affine(1.0 / n, 0.0)
    }

    /// Sum over `axes`, keeping reduced dims as size 1.
    pub fn sum_axes(&self, axes: &[usize]) -> Result<Tensor> {
        for &a in axes {
            if a >= self.shape().len() {
                return Err(CodecError::Shape(format!(
                    "axis {} out of range for shape {:?}",
                    a,
                    self.shape()
                )));
            }
        }
        let mut out_shape = self.shape().to_vec();
        for &a in axes {
            out_shape[a] = 1;
        }
        let so_in = strides_for(self.shape());
        let so_out = strides_for(&out_shape);
        let mut data = vec![0.0f32; numel(&out_shape)];
        let x = self.data();
        for i in 0..x.len() {
            let mut rem = i;
            let mut oi = 0usize;
            for d in 0..self.shape().len() {
                let idx = rem / so_in[d];
                rem %= so_in[d];
                if out_shape[d] != 1 {
                    oi += idx * so_out[d];
                }
            }
            data[oi] += x[i];
        }
        Ok(self.out(out_shape, data, Op::SumAxes(self.clone(), axes.to_vec())))
    }

    pub fn mean_axes(&self, axes: &[usize]) -> Result<Tensor> {
        let mut n = 1usize;
        for &a in axes {
            n *= self.shape()[a];
        }
        Ok(self.sum_axes(axes)?.affine(1.0 / n as f32, 0.0))
    }

    // ---- structure ----

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(CodecError::Shape(format!(
                "cannot reshape {:?} to {:?}",
                self.shape(),
                shape
            )));
        }
        Ok(self.out(shape.to_vec(), self.data().to_vec(), Op::Reshape(self.clone())))
    }

    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(CodecError::Shape("concat of zero tensors".into()));
        }
        let rank = parts[0].shape().len();
        if axis >= rank {
            return Err(CodecError::Shape(format!("concat axis {} out of range", axis)));
        }
        let mut out_shape = parts[0].shape().to_vec();
        let mut axis_total = 0usize;
        for p in parts {
            if p.shape().len() != rank {
                return Err(CodecError::Shape("concat rank mismatch".into()));
            }
            for d in 0..rank {
                if d != axis && p.shape()[d] != out_shape[d] {
                    return Err(CodecError::Shape(format!(
                        "concat shape mismatch: {:?} vs {:?}",
                        p.shape(),
                        out_shape
                    )));
                }
            }
            axis_total += p.shape()[axis];
        }
        out_shape[axis] = axis_total;
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let mut data = vec![0.0f32; numel(&out_shape)];
        for o in 0..outer {
            let mut written = 0usize;
            for p in parts {
                let pa = p.shape()[axis];
                let src = &p.data()[o * pa * inner..(o + 1) * pa * inner];
                let dst_start = o * axis_total * inner + written * inner;
                data[dst_start..dst_start + pa * inner].copy_from_slice(src);
                written += pa;
            }
        }
        let rg = parts.iter().any(|p| p.requires_any());
        Ok(Tensor::from_node(
            out_shape,
            data,
            rg,
            Op::Concat(parts.to_vec(), axis),
        ))
    }

    pub fn slice_axis(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let rank = self.shape().len();
        if axis >= rank || start + len > self.shape()[axis] {
            return Err(CodecError::Shape(format!(
                "slice [{}, {}) on axis {} of {:?}",
                start,
                start + len,
                axis,
                self.shape()
            )));
        }
        let mut out_shape = self.shape().to_vec();
        out_shape[axis] = len;
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let full = self.shape()[axis];
        let mut data = vec![0.0f32; numel(&out_shape)];
        for o in 0..outer {
            let src = &self.data()[(o * full + start) * inner..(o * full + start + len) * inner];
            data[o * len * inner..(o + 1) * len * inner].copy_from_slice(src);
        }
        Ok(self.out(
            out_shape,
            data,
            Op::SliceAxis {
                x: self.clone(),
                axis,
                start,
                len,
            },
        ))
    }

    /// 2-D transpose.
    pub fn transpose2d(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(CodecError::Shape(format!("transpose2d on {:?}", s)));
        }
        // (R,C) viewed as (R,C,1) tokens is exactly the transpose.
        self.reshape(&[s[0], s[1], 1])?.chw_to_tokens()?.reshape(&[s[1], s[0]])
    }

    /// (C,H,W) -> (H*W, C) token matrix.
    pub fn chw_to_tokens(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 3 {
            return Err(CodecError::Shape(format!("chw_to_tokens on {:?}", s)));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let mut data = vec![0.0f32; c * h * w];
        let x = self.data();
        for ch in 0..c {
            for p in 0..h * w {
                data[p * c + ch] = x[ch * h * w + p];
            }
        }
        Ok(self.out(vec![h * w, c], data, Op::ChwToTokens(self.clone())))
    }

    /// (H*W, C) -> (C,H,W).
    pub fn tokens_to_chw(&self, h: usize, w: usize) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 || s[0] != h * w {
            return Err(CodecError::Shape(format!(
                "tokens_to_chw {:?} for {}x{}",
                s, h, w
            )));
        }
        let c = s[1];
        let mut data = vec![0.0f32; c * h * w];
        let x = self.data();
        for p in 0..h * w {
            for ch in 0..c {
                data[ch * h * w + p] = x[p * c + ch];
            }
        }
        Ok(self.out(vec![c, h, w], data, Op::TokensToChw(self.clone(), h, w)))
    }

    // ---- linear algebra / conv ----

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(CodecError::Shape(format!(
                "matmul inner extents: {:?} x {:?}",
                sa, sb
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let a = self.data();
        let b = other.data();
        let mut data = vec![0.0f32; m * n];
        for i in 0..m {
            let orow = &mut data[i * n..(i + 1) * n];
            for kk in 0..k {
                let av = a[i * k + kk];
                let brow = &b[kk * n..(kk + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        Ok(self.out(vec![m, n], data, Op::Matmul(self.clone(), other.clone())))
    }

    pub fn conv2d(&self, kernel: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        let (out_shape, data) = conv::conv2d_forward(
            self.data(),
            self.shape(),
            kernel.data(),
            kernel.shape(),
            stride,
            pad,
        )?;
        Ok(self.out(
            out_shape,
            data,
            Op::Conv2d {
                input: self.clone(),
                kernel: kernel.clone(),
                stride,
                pad,
            },
        ))
    }

    /// Bilinear 2x upsample of (N,C,H,W) or (C,H,W), half-pixel alignment.
    pub fn upsample2x(&self) -> Result<Tensor> {
        let (out_shape, data) = conv::upsample2x_forward(self.data(), self.shape())?;
        Ok(self.out(out_shape, data, Op::Upsample2x(self.clone())))
    }

    /// Bilinear resize of (N,C,H,W) or (C,H,W) to any extents.
    pub fn resize_bilinear(&self, h: usize, w: usize) -> Result<Tensor> {
        let rank = self.shape().len();
        if (rank == 3 && self.shape()[1] == h && self.shape()[2] == w)
            || (rank == 4 && self.shape()[2] == h && self.shape()[3] == w)
        {
            return self.reshape(&self.shape().to_vec());
        }
        let (out_shape, data) = conv::resize_forward(self.data(), self.shape(), h, w)?;
        Ok(self.out(out_shape, data, Op::Resize(self.clone(), h, w)))
    }

    /// 2x2 mean pooling; spatial extents must be even.
    pub fn avg_pool2(&self) -> Result<Tensor> {
        let (out_shape, data) = conv::avgpool2_forward(self.data(), self.shape())?;
        Ok(self.out(out_shape, data, Op::AvgPool2(self.clone())))
    }

    /// Bilinear samples of a (C,H,W) grid at real (y, x) positions.
    ///
    /// Returns (C, len). Positions outside [0, H-1] x [0, W-1] are a
    /// CoordError. Gradients flow to the grid only; coordinates are fixed.
    pub fn interp_bilinear(&self, coords: &[(f32, f32)]) -> Result<Tensor> {
        let data = interp::sample_forward(self.data(), self.shape(), coords)?;
        let c = self.shape()[0];
        Ok(self.out(
            vec![c, coords.len()],
            data,
            Op::GridSample {
                grid: self.clone(),
                coords: coords.to_vec(),
            },
        ))
    }

    /// Warp (C,H,W) by a (2,H,W) flow (dy, dx), bilinear with edge clamp.
    /// Differentiable in both the image and the flow.
    pub fn warp_bilinear(&self, flow: &Tensor) -> Result<Tensor> {
        let data = interp::warp_forward(self.data(), self.shape(), flow.data(), flow.shape())?;
        Ok(self.out(
            self.shape().to_vec(),
            data,
            Op::Warp {
                img: self.clone(),
                flow: flow.clone(),
            },
        ))
    }

    pub fn has_nan(&self) -> bool {
        self.data().iter().any(|x| !x.is_finite())
    }
}

pub fn round_half_away(x: f32) -> f32 {
    // f32::round is round-half-away-from-zero.
    x.round()
}

/// Per-(n,c) plane normalization to zero mean, unit variance.
pub fn instance_norm(x: &Tensor, eps: f32) -> Result<Tensor> {
    let rank = x.shape().len();
    if rank != 3 && rank != 4 {
        return Err(CodecError::Shape(format!(
            "instance_norm expects CHW or NCHW, got {:?}",
            x.shape()
        )));
    }
    let axes: Vec<usize> = if rank == 4 { vec![2, 3] } else { vec![1, 2] };
    let mean = x.mean_axes(&axes)?;
    let centered = x.sub(&mean)?;
    let var = centered.square()?.mean_axes(&axes)?;
    let denom = var.affine(1.0, eps).sqrt();
    centered.div(&denom)
}

/// Row-wise softmax of a (rows, cols) matrix.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 2 {
        return Err(CodecError::Shape(format!("softmax_rows on {:?}", s)));
    }
    let (r, c) = (s[0], s[1]);
    // Shift by the detached row max for stability; gradient is unaffected.
    let mut mx = vec![f32::NEG_INFINITY; r];
    for i in 0..r {
        for j in 0..c {
            mx[i] = mx[i].max(x.data()[i * c + j]);
        }
    }
    let shift = Tensor::from_vec(mx, &[r, 1])?;
    let e = x.sub(&shift)?.exp();
    let denom = e.sum_axes(&[1])?;
    e.div(&denom)
}

// ---- backward ----

/// Reverse-mode gradients of a scalar loss for every requires_grad leaf.
pub fn backward(loss: &Tensor) -> Result<Gradients> {
    if loss.numel() != 1 {
        return Err(CodecError::Shape(format!(
            "backward requires a scalar loss, got shape {:?}",
            loss.shape()
        )));
    }
    // Topological order by iterative DFS.
    let mut order: Vec<Tensor> = Vec::new();
    let mut seen: HashMap<usize, ()> = HashMap::new();
    let mut stack: Vec<(Tensor, bool)> = vec![(loss.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if seen.contains_key(&t.id()) {
            continue;
        }
        seen.insert(t.id(), ());
        if !t.requires_any() {
            continue;
        }
        stack.push((t.clone(), true));
        let mut push = |x: &Tensor| {
            if !seen.contains_key(&x.id()) && x.requires_any() {
                stack.push((x.clone(), false));
            }
        };
        match &t.0.op {
            Op::Leaf => {}
            Op::Bin(_, a, b) | Op::Matmul(a, b) => {
                push(a);
                push(b);
            }
            Op::Un(_, x)
            | Op::Affine(_, _, x)
            | Op::SumAxes(x, _)
            | Op::SumAll(x)
            | Op::Reshape(x)
            | Op::ChwToTokens(x)
            | Op::TokensToChw(x, _, _)
            | Op::Upsample2x(x)
            | Op::Resize(x, _, _)
            | Op::AvgPool2(x) => push(x),
            Op::SliceAxis { x, .. } => push(x),
            Op::Conv2d { input, kernel, .. } => {
                push(input);
                push(kernel);
            }
            Op::Concat(xs, _) => {
                for x in xs {
                    push(x);
                }
            }
            Op::GridSample { grid, .. } => push(grid),
            Op::Warp { img, flow } => {
                push(img);
                push(flow);
            }
        }
    }

    let mut grads: HashMap<usize, Vec<f32>> = HashMap::new();
    grads.insert(loss.id(), vec![1.0]);

    let acc = RefCell::new(grads);
    let add_grad = |t: &Tensor, g: Vec<f32>| {
        debug_assert_eq!(g.len(), t.numel());
        let mut m = acc.borrow_mut();
        match m.get_mut(&t.id()) {
            Some(existing) => {
                for (e, gi) in existing.iter_mut().zip(g) {
                    *e += gi;
                }
            }
            None => {
                m.insert(t.id(), g);
            }
        }
    };

    for t in order.iter().rev() {
        let g = match acc.borrow().get(&t.id()) {
            Some(g) => g.clone(),
            None => continue,
        };
        match &t.0.op {
            Op::Leaf => {}
            Op::Bin(k, a, b) => {
                let (ga, gb) = bin_backward(*k, a, b, t, &g);
                if a.requires_any() {
                    add_grad(a, ga);
                }
                if b.requires_any() {
                    add_grad(b, gb);
                }
            }
            Op::Un(k, x) => {
                if x.requires_any() {
                    add_grad(x, un_backward(*k, x, t, &g));
                }
            }
            Op::Affine(s, _, x) => {
                if x.requires_any() {
                    add_grad(x, g.iter().map(|&gi| gi * s).collect());
                }
            }
            Op::SumAll(x) => {
                if x.requires_any() {
                    add_grad(x, vec![g[0]; x.numel()]);
                }
            }
            Op::SumAxes(x, _) => {
                if x.requires_any() {
                    let so_in = strides_for(x.shape());
                    let so_out = strides_for(t.shape());
                    let mut gx = vec![0.0f32; x.numel()];
                    for (i, gxi) in gx.iter_mut().enumerate() {
                        let mut rem = i;
                        let mut oi = 0usize;
                        for d in 0..x.shape().len() {
                            let idx = rem / so_in[d];
                            rem %= so_in[d];
                            if t.shape()[d] != 1 {
                                oi += idx * so_out[d];
                            }
                        }
                        *gxi = g[oi];
                    }
                    add_grad(x, gx);
                }
            }
            Op::Reshape(x) => {
                if x.requires_any() {
                    add_grad(x, g.clone());
                }
            }
            Op::Concat(xs, axis) => {
                let axis = *axis;
                let out_axis = t.shape()[axis];
                let outer: usize = t.shape()[..axis].iter().product();
                let inner: usize = t.shape()[axis + 1..].iter().product();
                let mut offset = 0usize;
                for x in xs {
                    let pa = x.shape()[axis];
                    if x.requires_any() {
                        let mut gx = vec![0.0f32; x.numel()];
                        for o in 0..outer {
                            let src = &g[(o * out_axis + offset) * inner
                                ..(o * out_axis + offset + pa) * inner];
                            gx[o * pa * inner..(o + 1) * pa * inner].copy_from_slice(src);
                        }
                        add_grad(x, gx);
                    }
                    offset += pa;
                }
            }
            Op::SliceAxis { x, axis, start, len } => {
                if x.requires_any() {
                    let outer: usize = x.shape()[..*axis].iter().product();
                    let inner: usize = x.shape()[*axis + 1..].iter().product();
                    let full = x.shape()[*axis];
                    let mut gx = vec![0.0f32; x.numel()];
                    for o in 0..outer {
                        let dst = &mut gx
                            [(o * full + start) * inner..(o * full + start + len) * inner];
                        dst.copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                    }
                    add_grad(x, gx);
                }
            }
            Op::ChwToTokens(x) => {
                if x.requires_any() {
                    let s = x.shape();
                    let (c, hw) = (s[0], s[1] * s[2]);
                    let mut gx = vec![0.0f32; x.numel()];
                    for ch in 0..c {
                        for p in 0..hw {
                            gx[ch * hw + p] = g[p * c + ch];
                        }
                    }
                    add_grad(x, gx);
                }
            }
            Op::TokensToChw(x, h, w) => {
                if x.requires_any() {
                    let c = x.shape()[1];
                    let hw = h * w;
                    let mut gx = vec![0.0f32; x.numel()];
                    for p in 0..hw {
                        for ch in 0..c {
                            gx[p * c + ch] = g[ch * hw + p];
                        }
                    }
                    add_grad(x, gx);
                }
            }
            Op::Matmul(a, b) => {
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                if a.requires_any() {
                    // dA[i][kk] = <g row i, B row kk>: contiguous dots.
                    let bd = b.data();
                    let mut ga = vec![0.0f32; m * k];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        let garow = &mut ga[i * k..(i + 1) * k];
                        for (kk, gav) in garow.iter_mut().enumerate() {
                            let brow = &bd[kk * n..(kk + 1) * n];
                            let mut acc = 0.0f32;
                            for (gv, bv) in grow.iter().zip(brow) {
                                acc += gv * bv;
                            }
                            *gav = acc;
                        }
                    }
                    add_grad(a, ga);
                }
                if b.requires_any() {
                    // dB row kk accumulates a[i][kk] * g row i.
                    let ad = a.data();
                    let mut gb = vec![0.0f32; k * n];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for kk in 0..k {
                            let av = ad[i * k + kk];
                            let gbrow = &mut gb[kk * n..(kk + 1) * n];
                            for (o, gv) in gbrow.iter_mut().zip(grow) {
                                *o += av * gv;
                            }
                        }
                    }
                    add_grad(b, gb);
                }
            }
            Op::Conv2d {
                input,
                kernel,
                stride,
                pad,
            } => {
                if input.requires_any() {
                    add_grad(
                        input,
                        conv::conv2d_backward_input(
                            &g,
                            t.shape(),
                            kernel.data(),
                            kernel.shape(),
                            input.shape(),
                            *stride,
                            *pad,
                        ),
                    );
                }
                if kernel.requires_any() {
                    add_grad(
                        kernel,
                        conv::conv2d_backward_kernel(
                            &g,
                            t.shape(),
                            input.data(),
                            input.shape(),
                            kernel.shape(),
                            *stride,
                            *pad,
                        ),
                    );
                }
            }
            Op::Upsample2x(x) => {
                if x.requires_any() {
                    add_grad(x, conv::upsample2x_backward(&g, t.shape(), x.shape()));
                }
            }
            Op::Resize(x, _, _) => {
                if x.requires_any() {
                    add_grad(x, conv::resize_backward(&g, t.shape(), x.shape()));
                }
            }
            Op::AvgPool2(x) => {
                if x.requires_any() {
                    add_grad(x, conv::avgpool2_backward(&g, t.shape(), x.shape()));
                }
            }
            Op::GridSample { grid, coords } => {
                if grid.requires_any() {
                    add_grad(grid, interp::sample_backward(&g, grid.shape(), coords));
                }
            }
            Op::Warp { img, flow } => {
                let (gi, gf) = interp::warp_backward(
                    &g,
                    img.data(),
                    img.shape(),
                    flow.data(),
                    flow.shape(),
                );
                if img.requires_any() {
                    add_grad(img, gi);
                }
                if flow.requires_any() {
                    add_grad(flow, gf);
                }
            }
        }
        // Free interior gradients once consumed.
        if !t.0.requires_grad {
            acc.borrow_mut().remove(&t.id());
        }
    }

    Ok(Gradients(acc.into_inner()))
}

fn bin_backward(k: BinKind, a: &Tensor, b: &Tensor, out: &Tensor, g: &[f32]) -> (Vec<f32>, Vec<f32>) {
    let _ = bin_name(k);
    let shape = out.shape();
    let n = g.len();
    let mut ga_full = vec![0.0f32; n];
    let mut gb_full = vec![0.0f32; n];
    let same = a.shape() == b.shape() && a.shape() == shape;
    let (ad, bd) = (a.data(), b.data());
    if same {
        for i in 0..n {
            match k {
                BinKind::Add => {
                    ga_full[i] = g[i];
                    gb_full[i] = g[i];
                }
                BinKind::Sub => {
                    ga_full[i] = g[i];
                    gb_full[i] = -g[i];
                }
                BinKind::Mul => {
                    ga_full[i] = g[i] * bd[i];
                    gb_full[i] = g[i] * ad[i];
                }
                BinKind::Div => {
                    ga_full[i] = g[i] / bd[i];
                    gb_full[i] = -g[i] * ad[i] / (bd[i] * bd[i]);
                }
            }
        }
        return (ga_full, gb_full);
    }
    let sa = broadcast_strides(a.shape(), shape);
    let sb = broadcast_strides(b.shape(), shape);
    let so = strides_for(shape);
    let mut ga = vec![0.0f32; a.numel()];
    let mut gb = vec![0.0f32; b.numel()];
    for i in 0..n {
        let (mut ia, mut ib, mut rem) = (0usize, 0usize, i);
        for d in 0..shape.len() {
            let idx = rem / so[d];
            rem %= so[d];
            ia += idx * sa[d];
            ib += idx * sb[d];
        }
        match k {
            BinKind::Add => {
                ga[ia] += g[i];
                gb[ib] += g[i];
            }
            BinKind::Sub => {
                ga[ia] += g[i];
                gb[ib] -= g[i];
            }
            BinKind::Mul => {
                ga[ia] += g[i] * bd[ib];
                gb[ib] += g[i] * ad[ia];
            }
            BinKind::Div => {
                ga[ia] += g[i] / bd[ib];
                gb[ib] += -g[i] * ad[ia] / (bd[ib] * bd[ib]);
            }
        }
    }
    (ga, gb)
}

fn un_backward(k: UnKind, x: &Tensor, out: &Tensor, g: &[f32]) -> Vec<f32> {
    let xd = x.data();
    let od = out.data();
    g.iter()
        .enumerate()
        .map(|(i, &gi)| match k {
            UnKind::Relu => {
                if xd[i] > 0.0 {
                    gi
                } else {
                    0.0
                }
            }
            UnKind::Exp => gi * od[i],
            UnKind::Log => gi / xd[i],
            UnKind::Sigmoid => gi * od[i] * (1.0 - od[i]),
            UnKind::Tanh => gi * (1.0 - od[i] * od[i]),
            UnKind::Sqrt => gi * 0.5 / od[i],
            UnKind::SteRound => gi,
            UnKind::Clamp01 => {
                if (0.0..=1.0).contains(&xd[i]) {
                    gi
                } else {
                    0.0
                }
            }
        })
        .collect()
}

#[cfg(test)]
mod tests;
