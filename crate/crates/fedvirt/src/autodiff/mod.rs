//! Recorded forward computation with reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only record of primitive applications. Values are
//! computed eagerly in 64-bit arithmetic; every reduction accumulates
//! left-to-right so replaying a record is bit-identical and independent of
//! the worker count.
//!
//! [`Graph::backward`] emits the adjoint pass *as further recorded
//! primitives*. Gradients are therefore themselves differentiable, which is
//! what lets gradient-matching distillation descend on pixels through a
//! gradient of a loss (a mixed second derivative) without any approximation.
//!
//! A graph and its tensors are confined to one worker at a time. Independent
//! graphs (different clients) may run in parallel.

mod kernels;

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use kernels::conv_out_extent;

/// Handle to a node in a [`Graph`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(u32);

impl Var {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddScalar(f64),
    Relu,
    Exp,
    Log,
    Recip,
    Rsqrt,
    Sqrt,
    Matmul,
    Transpose,
    Reshape,
    SumAll,
    MeanAll,
    FillLike,
    SumAxis0,
    SumAxis1,
    MeanAxis0,
    BroadcastCol,
    BroadcastRow,
    ChannelBroadcast,
    SumToChannel,
    GroupMeanBroadcast { groups: usize },
    Conv2d { stride: usize, pad: usize },
    Conv2dInputVjp { stride: usize, pad: usize },
    Conv2dWeightVjp { stride: usize, pad: usize },
    AvgPool2d { k: usize, s: usize },
    AvgPool2dVjp { k: usize, s: usize },
    ConcatRows,
    SliceRows { start: usize },
    EmbedRows { start: usize },
    GatherRows { idx: Arc<Vec<usize>> },
    ScatterRows { idx: Arc<Vec<usize>> },
    LogSoftmax,
    Shift2d { dx: isize, dy: isize },
    HResample { w: Arc<Vec<f64>>, adjoint: bool },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Relu => "relu",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Recip => "recip",
            Op::Rsqrt => "rsqrt",
            Op::Sqrt => "sqrt",
            Op::Matmul => "matmul",
            Op::Transpose => "transpose",
            Op::Reshape => "reshape",
            Op::SumAll => "sum_all",
            Op::MeanAll => "mean_all",
            Op::FillLike => "fill_like",
            Op::SumAxis0 => "sum_axis0",
            Op::SumAxis1 => "sum_axis1",
            Op::MeanAxis0 => "mean_axis0",
            Op::BroadcastCol => "broadcast_col",
            Op::BroadcastRow => "broadcast_row",
            Op::ChannelBroadcast => "channel_broadcast",
            Op::SumToChannel => "sum_to_channel",
            Op::GroupMeanBroadcast { .. } => "group_mean_broadcast",
            Op::Conv2d { .. } => "conv2d",
            Op::Conv2dInputVjp { .. } => "conv2d_input_vjp",
            Op::Conv2dWeightVjp { .. } => "conv2d_weight_vjp",
            Op::AvgPool2d { .. } => "avg_pool2d",
            Op::AvgPool2dVjp { .. } => "avg_pool2d_vjp",
            Op::ConcatRows => "concat_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::EmbedRows { .. } => "embed_rows",
            Op::GatherRows { .. } => "gather_rows",
            Op::ScatterRows { .. } => "scatter_rows",
            Op::LogSoftmax => "log_softmax",
            Op::Shift2d { .. } => "shift2d",
            Op::HResample { .. } => "hresample",
        }
    }
}

struct Node {
    op: Op,
    inputs: Vec<Var>,
    value: Tensor,
    needs_grad: bool,
}

/// Append-only computation record.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Registers an input tensor. Gradients are only tracked through leaves
    /// created with `requires_grad = true`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let id = Var(self.nodes.len() as u32);
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: vec![],
            value,
            needs_grad: requires_grad,
        });
        id
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.idx()].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.idx()].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.idx()].needs_grad
    }

    fn push(&mut self, op: Op, inputs: Vec<Var>, value: Tensor) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NumericOverflow { op: op.name() });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.idx()].needs_grad);
        let id = Var(self.nodes.len() as u32);
        self.nodes.push(Node {
            op,
            inputs,
            value,
            needs_grad,
        });
        Ok(id)
    }

    fn binary_same_shape(&mut self, op: Op, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.idx()].value, &self.nodes[b.idx()].value);
        if ta.shape() != tb.shape() {
            return Err(Error::shape(
                op.name(),
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_vec(ta.shape().to_vec(), data)?;
        self.push(op, vec![a, b], value)
    }

    fn unary(&mut self, op: Op, a: Var, f: impl Fn(f64) -> f64) -> Result<Var> {
        let ta = &self.nodes[a.idx()].value;
        let data: Vec<f64> = ta.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::from_vec(ta.shape().to_vec(), data)?;
        self.push(op, vec![a], value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(Op::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(Op::Mul, a, b, |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(Op::Scale(c), a, |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(Op::AddScalar(c), a, |x| x + c)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Relu, a, |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Exp, a, f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Log, a, f64::ln)
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Recip, a, |x| 1.0 / x)
    }

    pub fn rsqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Rsqrt, a, |x| 1.0 / x.sqrt())
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Sqrt, a, f64::sqrt)
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(
            self.nodes[a.idx()].value.data(),
            self.nodes[b.idx()].value.data(),
            m,
            k,
            n,
            &mut out,
        );
        let value = Tensor::from_vec(vec![m, n], out)?;
        self.push(Op::Matmul, vec![a, b], value)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 {
            return Err(Error::shape("transpose", format!("{:?}", sa)));
        }
        let mut out = vec![0.0; sa[0] * sa[1]];
        kernels::transpose2d(self.nodes[a.idx()].value.data(), sa[0], sa[1], &mut out);
        let value = Tensor::from_vec(vec![sa[1], sa[0]], out)?;
        self.push(Op::Transpose, vec![a], value)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ta = &self.nodes[a.idx()].value;
        let want: usize = shape.iter().product();
        if want != ta.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", ta.shape(), shape),
            ));
        }
        let value = Tensor::from_vec(shape.to_vec(), ta.data().to_vec())?;
        self.push(Op::Reshape, vec![a], value)
    }

    /// Sum of all elements, left-to-right, as a rank-0 tensor.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let mut acc = 0.0;
        for &v in self.nodes[a.idx()].value.data() {
            acc += v;
        }
        self.push(Op::SumAll, vec![a], Tensor::scalar(acc))
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.nodes[a.idx()].value.len();
        if n == 0 {
            return Err(Error::shape("mean_all", "empty tensor".to_string()));
        }
        let mut acc = 0.0;
        for &v in self.nodes[a.idx()].value.data() {
            acc += v;
        }
        self.push(Op::MeanAll, vec![a], Tensor::scalar(acc / n as f64))
    }

    /// Broadcasts a rank-0 tensor to `shape`.
    pub fn fill_like(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ta = &self.nodes[a.idx()].value;
        if ta.len() != 1 {
            return Err(Error::shape("fill_like", format!("{:?} is not scalar", ta.shape())));
        }
        let value = Tensor::full(shape, ta.item());
        self.push(Op::FillLike, vec![a], value)
    }

    /// `[n,d] -> [d]`, accumulating rows in ascending order.
    pub fn sum_axis0(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 {
            return Err(Error::shape("sum_axis0", format!("{:?}", sa)));
        }
        let (n, d) = (sa[0], sa[1]);
        let x = self.nodes[a.idx()].value.data();
        let mut out = vec![0.0; d];
        for i in 0..n {
            for j in 0..d {
                out[j] += x[i * d + j];
            }
        }
        let value = Tensor::from_vec(vec![d], out)?;
        self.push(Op::SumAxis0, vec![a], value)
    }

    pub fn mean_axis0(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 || sa[0] == 0 {
            return Err(Error::shape("mean_axis0", format!("{:?}", sa)));
        }
        let (n, d) = (sa[0], sa[1]);
        let x = self.nodes[a.idx()].value.data();
        let inv = 1.0 / n as f64;
        let mut out = vec![0.0; d];
        for i in 0..n {
            for j in 0..d {
                out[j] += x[i * d + j];
            }
        }
        for o in out.iter_mut() {
            *o *= inv;
        }
        let value = Tensor::from_vec(vec![d], out)?;
        self.push(Op::MeanAxis0, vec![a], value)
    }

    /// `[n,m] -> [n]`, accumulating columns in ascending order.
    pub fn sum_axis1(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 {
            return Err(Error::shape("sum_axis1", format!("{:?}", sa)));
        }
        let (n, m) = (sa[0], sa[1]);
        let x = self.nodes[a.idx()].value.data();
        let mut out = vec![0.0; n];
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for &v in &x[i * m..(i + 1) * m] {
                acc += v;
            }
            *o = acc;
        }
        let value = Tensor::from_vec(vec![n], out)?;
        self.push(Op::SumAxis1, vec![a], value)
    }

    /// `[n] -> [n,m]` replicating each entry across a row.
    pub fn broadcast_col(&mut self, a: Var, m: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 1 {
            return Err(Error::shape("broadcast_col", format!("{:?}", sa)));
        }
        let n = sa[0];
        let x = self.nodes[a.idx()].value.data();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            out[i * m..(i + 1) * m].fill(x[i]);
        }
        let value = Tensor::from_vec(vec![n, m], out)?;
        self.push(Op::BroadcastCol, vec![a], value)
    }

    /// `[d] -> [n,d]` replicating the vector as every row.
    pub fn broadcast_row(&mut self, a: Var, n: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 1 {
            return Err(Error::shape("broadcast_row", format!("{:?}", sa)));
        }
        let d = sa[0];
        let x = self.nodes[a.idx()].value.data();
        let mut out = Vec::with_capacity(n * d);
        for _ in 0..n {
            out.extend_from_slice(x);
        }
        let value = Tensor::from_vec(vec![n, d], out)?;
        self.push(Op::BroadcastRow, vec![a], value)
    }

    /// `[c] -> shape` where `shape[1] == c` (bias along the channel axis).
    pub fn channel_broadcast(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 1 || shape.len() < 2 || shape[1] != sa[0] {
            return Err(Error::shape(
                "channel_broadcast",
                format!("{:?} -> {:?}", sa, shape),
            ));
        }
        let c = sa[0];
        let n = shape[0];
        let rest: usize = shape[2..].iter().product();
        let x = self.nodes[a.idx()].value.data();
        let mut out = vec![0.0; n * c * rest];
        for i in 0..n {
            for (ci, &v) in x.iter().enumerate() {
                out[(i * c + ci) * rest..(i * c + ci + 1) * rest].fill(v);
            }
        }
        let value = Tensor::from_vec(shape.to_vec(), out)?;
        self.push(Op::ChannelBroadcast, vec![a], value)
    }

    /// Adjoint of [`Graph::channel_broadcast`]: sums every axis except axis 1.
    pub fn sum_to_channel(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() < 2 {
            return Err(Error::shape("sum_to_channel", format!("{:?}", sa)));
        }
        let (n, c) = (sa[0], sa[1]);
        let rest: usize = sa[2..].iter().product();
        let x = self.nodes[a.idx()].value.data();
        let mut out = vec![0.0; c];
        for i in 0..n {
            for (ci, o) in out.iter_mut().enumerate() {
                for &v in &x[(i * c + ci) * rest..(i * c + ci + 1) * rest] {
                    *o += v;
                }
            }
        }
        let value = Tensor::from_vec(vec![c], out)?;
        self.push(Op::SumToChannel, vec![a], value)
    }

    /// Per-(sample, channel-group) mean, broadcast back over the group.
    /// This is a symmetric projection, so it is its own adjoint.
    pub fn group_mean_broadcast(&mut self, a: Var, groups: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() < 2 || groups == 0 || sa[1] % groups != 0 {
            return Err(Error::shape(
                "group_mean_broadcast",
                format!("{:?} with {} groups", sa, groups),
            ));
        }
        let (n, c) = (sa[0], sa[1]);
        let rest: usize = sa[2..].iter().product();
        let gsize = (c / groups) * rest;
        let x = self.nodes[a.idx()].value.data();
        let mut out = vec![0.0; x.len()];
        let inv = 1.0 / gsize as f64;
        for i in 0..n {
            for g in 0..groups {
                let start = i * c * rest + g * gsize;
                let mut acc = 0.0;
                for &v in &x[start..start + gsize] {
                    acc += v;
                }
                out[start..start + gsize].fill(acc * inv);
            }
        }
        let value = Tensor::from_vec(sa, out)?;
        self.push(Op::GroupMeanBroadcast { groups }, vec![a], value)
    }

    /// 2-D convolution, zero padding: `[n,cin,h,w] * [cout,cin,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || stride == 0 {
            return Err(Error::shape("conv2d", format!("{:?} * {:?}", sx, sw)));
        }
        let (n, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::shape("conv2d", format!("kernel {:?} exceeds padded input {:?}", sw, sx)));
        }
        let ho = conv_out_extent(h, kh, stride, pad);
        let wo = conv_out_extent(wd, kw, stride, pad);
        let mut out = vec![0.0; n * cout * ho * wo];
        kernels::conv2d_forward(
            self.nodes[x.idx()].value.data(),
            n,
            cin,
            h,
            wd,
            self.nodes[w.idx()].value.data(),
            cout,
            kh,
            kw,
            stride,
            pad,
            &mut out,
        );
        let value = Tensor::from_vec(vec![n, cout, ho, wo], out)?;
        self.push(Op::Conv2d { stride, pad }, vec![x, w], value)
    }

    /// Adjoint of conv2d w.r.t. its input; `like_input` supplies the target shape.
    fn conv2d_input_vjp(&mut self, g: Var, w: Var, stride: usize, pad: usize, in_shape: &[usize]) -> Result<Var> {
        let sg = self.shape(g).to_vec();
        let sw = self.shape(w).to_vec();
        let (n, cout, ho, wo) = (sg[0], sg[1], sg[2], sg[3]);
        let (cin, kh, kw) = (sw[1], sw[2], sw[3]);
        let mut out = vec![0.0; in_shape.iter().product()];
        kernels::conv2d_input_vjp(
            self.nodes[g.idx()].value.data(),
            n,
            cout,
            ho,
            wo,
            self.nodes[w.idx()].value.data(),
            cin,
            kh,
            kw,
            stride,
            pad,
            in_shape[2],
            in_shape[3],
            &mut out,
        );
        let value = Tensor::from_vec(in_shape.to_vec(), out)?;
        self.push(Op::Conv2dInputVjp { stride, pad }, vec![g, w], value)
    }

    /// Adjoint of conv2d w.r.t. its kernel; `k_shape` supplies the target shape.
    fn conv2d_weight_vjp(&mut self, g: Var, x: Var, stride: usize, pad: usize, k_shape: &[usize]) -> Result<Var> {
        let sg = self.shape(g).to_vec();
        let sx = self.shape(x).to_vec();
        let (n, cout, ho, wo) = (sg[0], sg[1], sg[2], sg[3]);
        let (cin, h, wd) = (sx[1], sx[2], sx[3]);
        let (kh, kw) = (k_shape[2], k_shape[3]);
        let mut out = vec![0.0; k_shape.iter().product()];
        kernels::conv2d_weight_vjp(
            self.nodes[g.idx()].value.data(),
            n,
            cout,
            ho,
            wo,
            self.nodes[x.idx()].value.data(),
            cin,
            h,
            wd,
            kh,
            kw,
            stride,
            pad,
            &mut out,
        );
        let value = Tensor::from_vec(k_shape.to_vec(), out)?;
        self.push(Op::Conv2dWeightVjp { stride, pad }, vec![g, x], value)
    }

    pub fn avg_pool2d(&mut self, a: Var, k: usize, s: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 4 || k == 0 || s == 0 || sa[2] < k || sa[3] < k {
            return Err(Error::shape("avg_pool2d", format!("{:?} pool {}x{}", sa, k, k)));
        }
        let (n, c, h, w) = (sa[0], sa[1], sa[2], sa[3]);
        let ho = conv_out_extent(h, k, s, 0);
        let wo = conv_out_extent(w, k, s, 0);
        let mut out = vec![0.0; n * c * ho * wo];
        kernels::avgpool2d_forward(self.nodes[a.idx()].value.data(), n, c, h, w, k, s, &mut out);
        let value = Tensor::from_vec(vec![n, c, ho, wo], out)?;
        self.push(Op::AvgPool2d { k, s }, vec![a], value)
    }

    fn avg_pool2d_vjp(&mut self, g: Var, k: usize, s: usize, in_shape: &[usize]) -> Result<Var> {
        let sg = self.shape(g).to_vec();
        let (n, c, ho, wo) = (sg[0], sg[1], sg[2], sg[3]);
        let mut out = vec![0.0; in_shape.iter().product()];
        kernels::avgpool2d_vjp(
            self.nodes[g.idx()].value.data(),
            n,
            c,
            ho,
            wo,
            k,
            s,
            in_shape[2],
            in_shape[3],
            &mut out,
        );
        let value = Tensor::from_vec(in_shape.to_vec(), out)?;
        self.push(Op::AvgPool2dVjp { k, s }, vec![g], value)
    }

    /// Concatenation along axis 0. All inputs share the trailing shape.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_rows", "no inputs".to_string()));
        }
        let tail = self.shape(parts[0])[1..].to_vec();
        let mut n = 0;
        for &p in parts {
            let sp = self.shape(p);
            if sp.is_empty() || sp[1..] != tail[..] {
                return Err(Error::shape(
                    "concat_rows",
                    format!("trailing {:?} vs {:?}", &sp, tail),
                ));
            }
            n += sp[0];
        }
        let mut shape = vec![n];
        shape.extend_from_slice(&tail);
        let mut data = Vec::with_capacity(shape.iter().product());
        for &p in parts {
            data.extend_from_slice(self.nodes[p.idx()].value.data());
        }
        let value = Tensor::from_vec(shape, data)?;
        self.push(Op::ConcatRows, parts.to_vec(), value)
    }

    /// Rows `start..start+len` along axis 0.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.is_empty() || start + len > sa[0] {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {}..{} of {:?}", start, start + len, sa),
            ));
        }
        let value = self.nodes[a.idx()].value.slice_rows(start, len);
        self.push(Op::SliceRows { start }, vec![a], value)
    }

    /// Places `a` at row offset `start` inside `total` zero rows (adjoint of
    /// `slice_rows`).
    fn embed_rows(&mut self, a: Var, start: usize, total: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let mut shape = sa.clone();
        shape[0] = total;
        let row: usize = sa[1..].iter().product();
        let mut data = vec![0.0; total * row];
        data[start * row..(start + sa[0]) * row]
            .copy_from_slice(self.nodes[a.idx()].value.data());
        let value = Tensor::from_vec(shape, data)?;
        self.push(Op::EmbedRows { start }, vec![a], value)
    }

    /// `out[i] = a[i, idx[i]]` for a `[n,k]` input.
    pub fn gather_rows(&mut self, a: Var, idx: Arc<Vec<usize>>) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 || idx.len() != sa[0] {
            return Err(Error::shape(
                "gather_rows",
                format!("{:?} with {} indices", sa, idx.len()),
            ));
        }
        let k = sa[1];
        if let Some(&bad) = idx.iter().find(|&&i| i >= k) {
            return Err(Error::contract(format!(
                "gather_rows: index {} out of range [0,{})",
                bad, k
            )));
        }
        let x = self.nodes[a.idx()].value.data();
        let out: Vec<f64> = idx.iter().enumerate().map(|(i, &j)| x[i * k + j]).collect();
        let value = Tensor::from_vec(vec![sa[0]], out)?;
        self.push(Op::GatherRows { idx }, vec![a], value)
    }

    /// Adjoint of `gather_rows`: `out[i, idx[i]] = a[i]`, zeros elsewhere.
    fn scatter_rows(&mut self, a: Var, idx: Arc<Vec<usize>>, cols: usize) -> Result<Var> {
        let n = self.shape(a)[0];
        let x = self.nodes[a.idx()].value.data();
        let mut out = vec![0.0; n * cols];
        for (i, &j) in idx.iter().enumerate() {
            out[i * cols + j] = x[i];
        }
        let value = Tensor::from_vec(vec![n, cols], out)?;
        self.push(Op::ScatterRows { idx }, vec![a], value)
    }

    /// Row-wise log-softmax with max subtraction.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 || sa[1] == 0 {
            return Err(Error::shape("log_softmax", format!("{:?}", sa)));
        }
        let (n, k) = (sa[0], sa[1]);
        let x = self.nodes[a.idx()].value.data();
        let mut out = vec![0.0; n * k];
        for i in 0..n {
            let row = &x[i * k..(i + 1) * k];
            let mut m = f64::NEG_INFINITY;
            for &v in row {
                m = m.max(v);
            }
            let mut acc = 0.0;
            for &v in row {
                acc += (v - m).exp();
            }
            let lse = m + acc.ln();
            for (j, &v) in row.iter().enumerate() {
                out[i * k + j] = v - lse;
            }
        }
        let value = Tensor::from_vec(vec![n, k], out)?;
        self.push(Op::LogSoftmax, vec![a], value)
    }

    /// Integer translation with zero fill on `[n,c,h,w]`.
    pub fn shift2d(&mut self, a: Var, dx: isize, dy: isize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 4 {
            return Err(Error::shape("shift2d", format!("{:?}", sa)));
        }
        let (n, c, h, w) = (sa[0], sa[1], sa[2], sa[3]);
        let x = self.nodes[a.idx()].value.data();
        let mut out = vec![0.0; x.len()];
        for img in 0..n * c {
            let src = &x[img * h * w..(img + 1) * h * w];
            let dst = &mut out[img * h * w..(img + 1) * h * w];
            for y in 0..h as isize {
                let sy = y - dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for xx in 0..w as isize {
                    let sx = xx - dx;
                    if sx >= 0 && sx < w as isize {
                        dst[(y * w as isize + xx) as usize] = src[(sy * w as isize + sx) as usize];
                    }
                }
            }
        }
        let value = Tensor::from_vec(sa, out)?;
        self.push(Op::Shift2d { dx, dy }, vec![a], value)
    }

    /// Horizontal resampling by a fixed `[w_out, w_in]` weight matrix applied
    /// to the last axis of `[n,c,h,w]` (used by the differentiable augment).
    pub fn hresample(&mut self, a: Var, wmat: Arc<Vec<f64>>) -> Result<Var> {
        self.hresample_impl(a, wmat, false)
    }

    fn hresample_impl(&mut self, a: Var, wmat: Arc<Vec<f64>>, adjoint: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 4 || wmat.len() != sa[3] * sa[3] {
            return Err(Error::shape(
                "hresample",
                format!("{:?} with {} weights", sa, wmat.len()),
            ));
        }
        let (n, c, h, w) = (sa[0], sa[1], sa[2], sa[3]);
        let x = self.nodes[a.idx()].value.data();
        let mut out = vec![0.0; x.len()];
        for row in 0..n * c * h {
            let src = &x[row * w..(row + 1) * w];
            let dst = &mut out[row * w..(row + 1) * w];
            for (o, d) in dst.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (j, &s) in src.iter().enumerate() {
                    let wv = if adjoint { wmat[j * w + o] } else { wmat[o * w + j] };
                    acc += wv * s;
                }
                *d = acc;
            }
        }
        let value = Tensor::from_vec(sa, out)?;
        self.push(Op::HResample { w: wmat, adjoint }, vec![a], value)
    }

    /// Group normalization over `[n,c,...]` with per-channel affine, built
    /// from finer primitives so that all derivatives come from the recorded
    /// adjoints. Population statistics per (sample, group); `eps` guards the
    /// rsqrt when a group has zero variance.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("group_norm", format!("{:?}", shape)));
        }
        if self.shape(gamma) != [shape[1]] || self.shape(beta) != [shape[1]] {
            return Err(Error::shape(
                "group_norm",
                format!(
                    "affine {:?}/{:?} for {} channels",
                    self.shape(gamma),
                    self.shape(beta),
                    shape[1]
                ),
            ));
        }
        let mu = self.group_mean_broadcast(x, groups)?;
        let xc = self.sub(x, mu)?;
        let sq = self.mul(xc, xc)?;
        let var = self.group_mean_broadcast(sq, groups)?;
        let var_eps = self.add_scalar(var, eps)?;
        let inv = self.rsqrt(var_eps)?;
        let xhat = self.mul(xc, inv)?;
        let gb = self.channel_broadcast(gamma, &shape)?;
        let bb = self.channel_broadcast(beta, &shape)?;
        let scaled = self.mul(xhat, gb)?;
        self.add(scaled, bb)
    }

    /// L2-normalizes each row of `[n,d]`. A vanishing `eps` keeps zero rows
    /// finite (they map to zero) without perturbing rows of ordinary norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(Error::shape("l2_normalize_rows", format!("{:?}", shape)));
        }
        let sq = self.mul(x, x)?;
        let n2 = self.sum_axis1(sq)?;
        let n2e = self.add_scalar(n2, 1e-30)?;
        let inv = self.rsqrt(n2e)?;
        let invb = self.broadcast_col(inv, shape[1])?;
        self.mul(x, invb)
    }

    /// Adds a `[c]` bias along axis 1 of `x`.
    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let bb = self.channel_broadcast(b, &shape)?;
        self.add(x, bb)
    }

    /// Reverse-mode differentiation of a scalar `loss` with respect to the
    /// given leaves. The adjoint pass is recorded on the graph, so returned
    /// gradients are `Var`s that can themselves be differentiated.
    ///
    /// Leaves with no path to the loss receive zero gradients of their shape.
    pub fn backward(&mut self, loss: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        if self.nodes[loss.idx()].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n_at_start = self.nodes.len();
        // Ancestors of the loss that can carry gradient.
        let mut active = vec![false; n_at_start];
        if self.nodes[loss.idx()].needs_grad {
            let mut stack = vec![loss.idx()];
            active[loss.idx()] = true;
            while let Some(id) = stack.pop() {
                for inp in self.nodes[id].inputs.clone() {
                    let i = inp.idx();
                    if !active[i] && self.nodes[i].needs_grad {
                        active[i] = true;
                        stack.push(i);
                    }
                }
            }
        }
        let mut grads: Vec<Option<Var>> = vec![None; n_at_start];
        if active[loss.idx()] {
            let shape = self.shape(loss).to_vec();
            let one = self.constant(Tensor::full(&shape, 1.0));
            grads[loss.idx()] = Some(one);
        }
        for id in (0..=loss.idx()).rev() {
            if !active[id] {
                continue;
            }
            let Some(g) = grads[id] else { continue };
            if self.nodes[id].inputs.is_empty() {
                continue;
            }
            for (input, gv) in self.vjp(id, g)? {
                let slot = &mut grads[input.idx()];
                let combined = match slot.take() {
                    None => gv,
                    Some(prev) => self.add(prev, gv)?,
                };
                grads[input.idx()] = Some(combined);
            }
        }
        let mut out = Vec::with_capacity(wrt.len());
        for &w in wrt {
            let v = match grads.get(w.idx()).copied().flatten() {
                Some(g) => g,
                None => {
                    let z = Tensor::zeros(self.shape(w));
                    self.constant(z)
                }
            };
            out.push(v);
        }
        Ok(out)
    }

    /// Like [`Graph::backward`] but returns plain tensors.
    pub fn backward_values(&mut self, loss: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        let vars = self.backward(loss, wrt)?;
        Ok(vars.into_iter().map(|v| self.value(v).clone()).collect())
    }

    /// Emits the adjoint of node `id` given upstream gradient `g`. Returns
    /// (input, gradient contribution) pairs for inputs that track gradients.
    fn vjp(&mut self, id: usize, g: Var) -> Result<Vec<(Var, Var)>> {
        let op = self.nodes[id].op.clone();
        let inputs = self.nodes[id].inputs.clone();
        let out_var = Var(id as u32);
        let needs = |s: &Self, v: Var| s.nodes[v.idx()].needs_grad;
        let mut res: Vec<(Var, Var)> = Vec::with_capacity(2);
        match op {
            Op::Leaf => {}
            Op::Add => {
                for &inp in &inputs {
                    if needs(self, inp) {
                        res.push((inp, g));
                    }
                }
            }
            Op::Sub => {
                let (a, b) = (inputs[0], inputs[1]);
                if needs(self, a) {
                    res.push((a, g));
                }
                if needs(self, b) {
                    let ng = self.scale(g, -1.0)?;
                    res.push((b, ng));
                }
            }
            Op::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                if needs(self, a) {
                    let da = self.mul(g, b)?;
                    res.push((a, da));
                }
                if needs(self, b) {
                    let db = self.mul(g, a)?;
                    res.push((b, db));
                }
            }
            Op::Scale(c) => {
                let da = self.scale(g, c)?;
                res.push((inputs[0], da));
            }
            Op::AddScalar(_) => res.push((inputs[0], g)),
            Op::Relu => {
                // d relu/dx is 0 or 1 almost everywhere; the mask is a constant.
                let x = &self.nodes[inputs[0].idx()].value;
                let mask: Vec<f64> = x.data().iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
                let m = self.constant(Tensor::from_vec(x.shape().to_vec(), mask)?);
                let da = self.mul(g, m)?;
                res.push((inputs[0], da));
            }
            Op::Exp => {
                let da = self.mul(g, out_var)?;
                res.push((inputs[0], da));
            }
            Op::Log => {
                let r = self.recip(inputs[0])?;
                let da = self.mul(g, r)?;
                res.push((inputs[0], da));
            }
            Op::Recip => {
                let y2 = self.mul(out_var, out_var)?;
                let gy = self.mul(g, y2)?;
                let da = self.scale(gy, -1.0)?;
                res.push((inputs[0], da));
            }
            Op::Rsqrt => {
                let y2 = self.mul(out_var, out_var)?;
                let y3 = self.mul(y2, out_var)?;
                let gy = self.mul(g, y3)?;
                let da = self.scale(gy, -0.5)?;
                res.push((inputs[0], da));
            }
            Op::Sqrt => {
                let r = self.recip(out_var)?;
                let gy = self.mul(g, r)?;
                let da = self.scale(gy, 0.5)?;
                res.push((inputs[0], da));
            }
            Op::Matmul => {
                let (a, b) = (inputs[0], inputs[1]);
                if needs(self, a) {
                    let bt = self.transpose(b)?;
                    let da = self.matmul(g, bt)?;
                    res.push((a, da));
                }
                if needs(self, b) {
                    let at = self.transpose(a)?;
                    let db = self.matmul(at, g)?;
                    res.push((b, db));
                }
            }
            Op::Transpose => {
                let da = self.transpose(g)?;
                res.push((inputs[0], da));
            }
            Op::Reshape => {
                let shape = self.shape(inputs[0]).to_vec();
                let da = self.reshape(g, &shape)?;
                res.push((inputs[0], da));
            }
            Op::SumAll => {
                let shape = self.shape(inputs[0]).to_vec();
                let da = self.fill_like(g, &shape)?;
                res.push((inputs[0], da));
            }
            Op::MeanAll => {
                let shape = self.shape(inputs[0]).to_vec();
                let n: usize = shape.iter().product();
                let filled = self.fill_like(g, &shape)?;
                let da = self.scale(filled, 1.0 / n as f64)?;
                res.push((inputs[0], da));
            }
            Op::FillLike => {
                let da = self.sum_all(g)?;
                res.push((inputs[0], da));
            }
            Op::SumAxis0 => {
                let n = self.shape(inputs[0])[0];
                let da = self.broadcast_row(g, n)?;
                res.push((inputs[0], da));
            }
            Op::MeanAxis0 => {
                let n = self.shape(inputs[0])[0];
                let b = self.broadcast_row(g, n)?;
                let da = self.scale(b, 1.0 / n as f64)?;
                res.push((inputs[0], da));
            }
            Op::SumAxis1 => {
                let m = self.shape(inputs[0])[1];
                let da = self.broadcast_col(g, m)?;
                res.push((inputs[0], da));
            }
            Op::BroadcastCol => {
                let da = self.sum_axis1(g)?;
                res.push((inputs[0], da));
            }
            Op::BroadcastRow => {
                let da = self.sum_axis0(g)?;
                res.push((inputs[0], da));
            }
            Op::ChannelBroadcast => {
                let da = self.sum_to_channel(g)?;
                res.push((inputs[0], da));
            }
            Op::SumToChannel => {
                let shape = self.shape(inputs[0]).to_vec();
                let da = self.channel_broadcast(g, &shape)?;
                res.push((inputs[0], da));
            }
            Op::GroupMeanBroadcast { groups } => {
                let da = self.group_mean_broadcast(g, groups)?;
                res.push((inputs[0], da));
            }
            Op::Conv2d { stride, pad } => {
                let (x, w) = (inputs[0], inputs[1]);
                if needs(self, x) {
                    let shape = self.shape(x).to_vec();
                    let dx = self.conv2d_input_vjp(g, w, stride, pad, &shape)?;
                    res.push((x, dx));
                }
                if needs(self, w) {
                    let shape = self.shape(w).to_vec();
                    let dw = self.conv2d_weight_vjp(g, x, stride, pad, &shape)?;
                    res.push((w, dw));
                }
            }
            Op::Conv2dInputVjp { stride, pad } => {
                // node = C_x^T(gprev, w); upstream g is input-shaped.
                let (gprev, w) = (inputs[0], inputs[1]);
                if needs(self, gprev) {
                    let dg = self.conv2d(g, w, stride, pad)?;
                    res.push((gprev, dg));
                }
                if needs(self, w) {
                    let shape = self.shape(w).to_vec();
                    let dw = self.conv2d_weight_vjp(gprev, g, stride, pad, &shape)?;
                    res.push((w, dw));
                }
            }
            Op::Conv2dWeightVjp { stride, pad } => {
                // node = C_w^T(gout, x); upstream g is kernel-shaped.
                let (gout, x) = (inputs[0], inputs[1]);
                if needs(self, gout) {
                    let dg = self.conv2d(x, g, stride, pad)?;
                    res.push((gout, dg));
                }
                if needs(self, x) {
                    let shape = self.shape(x).to_vec();
                    let dx = self.conv2d_input_vjp(gout, g, stride, pad, &shape)?;
                    res.push((x, dx));
                }
            }
            Op::AvgPool2d { k, s } => {
                let shape = self.shape(inputs[0]).to_vec();
                let da = self.avg_pool2d_vjp(g, k, s, &shape)?;
                res.push((inputs[0], da));
            }
            Op::AvgPool2dVjp { k, s } => {
                let da = self.avg_pool2d(g, k, s)?;
                res.push((inputs[0], da));
            }
            Op::ConcatRows => {
                let mut start = 0;
                for &inp in &inputs {
                    let rows = self.shape(inp)[0];
                    if needs(self, inp) {
                        let da = self.slice_rows(g, start, rows)?;
                        res.push((inp, da));
                    }
                    start += rows;
                }
            }
            Op::SliceRows { start } => {
                let total = self.shape(inputs[0])[0];
                let da = self.embed_rows(g, start, total)?;
                res.push((inputs[0], da));
            }
            Op::EmbedRows { start } => {
                let len = self.shape(inputs[0])[0];
                let da = self.slice_rows(g, start, len)?;
                res.push((inputs[0], da));
            }
            Op::GatherRows { idx } => {
                let cols = self.shape(inputs[0])[1];
                let da = self.scatter_rows(g, idx, cols)?;
                res.push((inputs[0], da));
            }
            Op::ScatterRows { idx } => {
                let da = self.gather_rows(g, idx)?;
                res.push((inputs[0], da));
            }
            Op::LogSoftmax => {
                // dx = g - softmax(x) * rowsum(g); softmax(x) = exp(output).
                let k = self.shape(out_var)[1];
                let sm = self.exp(out_var)?;
                let srow = self.sum_axis1(g)?;
                let sb = self.broadcast_col(srow, k)?;
                let corr = self.mul(sm, sb)?;
                let da = self.sub(g, corr)?;
                res.push((inputs[0], da));
            }
            Op::Shift2d { dx, dy } => {
                let da = self.shift2d(g, -dx, -dy)?;
                res.push((inputs[0], da));
            }
            Op::HResample { w, adjoint } => {
                let da = self.hresample_impl(g, w, !adjoint)?;
                res.push((inputs[0], da));
            }
        }
        Ok(res)
    }
}

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tol
    }
}

/// Compares `backward` gradients of a scalar-valued function against central
/// finite differences `(f(x+h) - f(x-h)) / 2h`, coordinate by coordinate.
///
/// Relative error uses `max(|analytic|, |fd|, 1)` as the denominator, so
/// near-zero coordinates are compared absolutely.
pub fn grad_check<F>(f: F, points: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let loss = f(&mut g, &vars)?;
        if g.value(loss).len() != 1 {
            return Err(Error::contract("grad_check: function must be scalar-valued".to_string()));
        }
        Ok(g.value(loss).item())
    };

    let analytic: Vec<Tensor> = {
        let mut g = Graph::new();
        let vars: Vec<Var> = points.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let loss = f(&mut g, &vars)?;
        g.backward_values(loss, &vars)?
    };

    let mut max_rel = 0.0f64;
    let mut coords = 0;
    let mut work: Vec<Tensor> = points.to_vec();
    for (ti, point) in points.iter().enumerate() {
        for ci in 0..point.len() {
            let orig = point.data()[ci];
            work[ti].data_mut()[ci] = orig + h;
            let fp = eval(&work)?;
            work[ti].data_mut()[ci] = orig - h;
            let fm = eval(&work)?;
            work[ti].data_mut()[ci] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let a = analytic[ti].data()[ci];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1.0);
            if rel > max_rel {
                max_rel = rel;
            }
            coords += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        coords_checked: coords,
        tol,
    })
}

#[cfg(test)]
mod tests;
