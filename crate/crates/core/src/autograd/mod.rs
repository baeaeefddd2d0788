//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive in execution order, so the tape is
//! already topologically sorted; [`Graph::backward`] walks it once in reverse.
//! Graphs are cheap and single-owner: build one per sample and drop it after
//! the gradients are read.

mod kernels;

use std::fmt;

use kernels::{
    broadcast_shape, broadcast_strides, col2im, for_each_broadcast, im2col, linear_taps, resize_planes,
    resize_planes_adjoint, split_axis, ConvGeom, Tap,
};

use crate::error::{Error, Result};
use crate::tensor::{numel, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Every differentiable primitive the networks are built from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Primitive {
    MatMul,
    Conv2d,
    Upsample2x,
    ResizeBilinear,
    AvgPool2x,
    LeakyRelu,
    Sigmoid,
    Add,
    Sub,
    Mul,
    Div,
    AddScalar,
    MulScalar,
    Sum,
    Mean,
    SumAxis,
    ChannelMean,
    ChannelStd,
    Concat,
    Reshape,
    Slice,
    L2Normalize,
    LogSoftmax,
    Norm,
    Sqrt,
    Square,
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Primitive::MatMul => "matmul",
            Primitive::Conv2d => "conv2d",
            Primitive::Upsample2x => "upsample2x",
            Primitive::ResizeBilinear => "resize_bilinear",
            Primitive::AvgPool2x => "avg_pool2x",
            Primitive::LeakyRelu => "leaky_relu",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Div => "div",
            Primitive::AddScalar => "add_scalar",
            Primitive::MulScalar => "mul_scalar",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::SumAxis => "sum_axis",
            Primitive::ChannelMean => "channel_mean",
            Primitive::ChannelStd => "channel_std",
            Primitive::Concat => "concat",
            Primitive::Reshape => "reshape",
            Primitive::Slice => "slice",
            Primitive::L2Normalize => "l2_normalize",
            Primitive::LogSoftmax => "log_softmax",
            Primitive::Norm => "norm",
            Primitive::Sqrt => "sqrt",
            Primitive::Square => "square",
        };
        f.write_str(name)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Upsample2x(Var),
    ResizeBilinear {
        x: Var,
        rows: Vec<Tap>,
        cols: Vec<Tap>,
    },
    AvgPool2x(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    ChannelMean(Var),
    ChannelStd(Var),
    Concat(Vec<Var>, usize),
    Reshape(Var),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    L2Normalize(Var, f64),
    LogSoftmax(Var),
    Norm(Var),
    Sqrt(Var),
    Square(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to the leaves that required them.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, delta: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(delta).for_each(|(a, d)| *a += d),
        None => *slot = Some(delta),
    }
}

fn unary_shape<T: Scalar>(op: &'static str, t: &Tensor<T>, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::shape(
            op,
            format!("expected rank {rank}, got shape {:?}", t.shape()),
        ));
    }
    Ok(())
}

/// Sums `g` (shaped `out`) down to the broadcast source shape `src`.
fn reduce_to<T: Scalar>(g: &[T], out: &[usize], src: &[usize]) -> Vec<T> {
    if out == src {
        return g.to_vec();
    }
    let mut acc = vec![T::zero(); numel(src)];
    let s = broadcast_strides(src, out);
    let zero = vec![0; out.len()];
    for_each_broadcast(out, &s, &zero, |i, ia, _| acc[ia] += g[i]);
    acc
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        self.leaf(t.clone(), true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.leaf(t.clone(), false)
    }

    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn record(&mut self, value: Tensor<T>, op: Op, inputs: &[Var]) -> Var {
        let rg = self.any_grad(inputs);
        self.push(value, op, rg)
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            T::zero(),
            &mut out,
            (n as isize, 1),
        );
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.record(value, Op::MatMul(a, b), &[a, b]))
    }

    /// Convolution of `x: [N, C, H, W]` with `w: [O, C, kh, kw]` and optional bias `[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::shape(
                "conv2d",
                format!("input {sx:?} incompatible with kernel {sw:?}"),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [sw[0]] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?} for {} output channels", self.shape(b), sw[0]),
                ));
            }
        }
        if stride == 0 || sx[2] + 2 * pad < sw[2] || sx[3] + 2 * pad < sw[3] {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {sw:?} stride {stride} pad {pad} does not fit input {sx:?}"),
            ));
        }
        let geom = ConvGeom {
            c: sx[1],
            h: sx[2],
            w: sx[3],
            o: sw[0],
            kh: sw[2],
            kw: sw[3],
            stride,
            pad,
            ho: (sx[2] + 2 * pad - sw[2]) / stride + 1,
            wo: (sx[3] + 2 * pad - sw[3]) / stride + 1,
        };
        let n = sx[0];
        let (patch, area) = (geom.patch(), geom.out_area());
        let xin = self.value(x).data();
        let kern = self.value(w).data();
        let bias = b.map(|b| self.value(b).data());
        let mut out = vec![T::zero(); n * geom.o * area];
        let mut cols = if geom.is_pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); patch * area]
        };
        let plane = geom.c * geom.h * geom.w;
        for s in 0..n {
            let xs = &xin[s * plane..(s + 1) * plane];
            let cm: &[T] = if geom.is_pointwise() {
                xs
            } else {
                im2col(xs, &geom, &mut cols);
                &cols
            };
            let dst = &mut out[s * geom.o * area..(s + 1) * geom.o * area];
            if let Some(bias) = bias {
                for (o, row) in dst.chunks_mut(area).enumerate() {
                    row.fill(bias[o]);
                }
            }
            T::gemm(
                geom.o,
                patch,
                area,
                T::one(),
                kern,
                (patch as isize, 1),
                cm,
                (area as isize, 1),
                if bias.is_some() { T::one() } else { T::zero() },
                dst,
                (area as isize, 1),
            );
        }
        let value = Tensor::new(vec![n, geom.o, geom.ho, geom.wo], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.record(value, Op::Conv2d { x, w, b, stride, pad }, &inputs))
    }

    // ---- resampling -----------------------------------------------------

    /// Nearest-neighbour 2x upsampling of the last two axes.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::shape("upsample2x", format!("rank too small: {s:?}")));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let planes = numel(&s) / (h * w);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(planes * 4 * h * w);
        for p in 0..planes {
            for y in 0..2 * h {
                let row = &src[p * h * w + (y / 2) * w..p * h * w + (y / 2 + 1) * w];
                for &v in row {
                    out.push(v);
                    out.push(v);
                }
            }
        }
        let mut shape = s.clone();
        let r = shape.len();
        shape[r - 2] *= 2;
        shape[r - 1] *= 2;
        let value = Tensor::new(shape, out)?;
        Ok(self.record(value, Op::Upsample2x(x), &[x]))
    }

    /// Bilinear resampling of the last two axes to `(oh, ow)`, half-pixel centres.
    pub fn resize_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || oh == 0 || ow == 0 {
            return Err(Error::shape(
                "resize_bilinear",
                format!("cannot resize {s:?} to {oh}x{ow}"),
            ));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let planes = numel(&s) / (h * w);
        let rows = linear_taps(h, oh);
        let cols = linear_taps(w, ow);
        let out = resize_planes(self.value(x).data(), planes, (h, w), &rows, &cols);
        let mut shape = s.clone();
        let r = shape.len();
        shape[r - 2] = oh;
        shape[r - 1] = ow;
        let value = Tensor::new(shape, out)?;
        Ok(self.record(value, Op::ResizeBilinear { x, rows, cols }, &[x]))
    }

    /// Bilinear 2x upsampling; a convenience over [`Graph::resize_bilinear`].
    pub fn upsample2x_bilinear(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::shape("upsample2x", format!("rank too small: {s:?}")));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        self.resize_bilinear(x, 2 * h, 2 * w)
    }

    /// 2x2 mean pooling with stride 2 over the last two axes.
    pub fn avg_pool2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || !s[s.len() - 2].is_multiple_of(2) || !s[s.len() - 1].is_multiple_of(2) {
            return Err(Error::shape(
                "avg_pool2x",
                format!("spatial extents of {s:?} must be even"),
            ));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let (oh, ow) = (h / 2, w / 2);
        let planes = numel(&s) / (h * w);
        let src = self.value(x).data();
        let quarter = T::of(0.25);
        let mut out = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let base = p * h * w;
            for y in 0..oh {
                for xx in 0..ow {
                    let i = base + 2 * y * w + 2 * xx;
                    out.push((src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * quarter);
                }
            }
        }
        let mut shape = s.clone();
        let r = shape.len();
        shape[r - 2] = oh;
        shape[r - 1] = ow;
        let value = Tensor::new(shape, out)?;
        Ok(self.record(value, Op::AvgPool2x(x), &[x]))
    }

    // ---- elementwise ----------------------------------------------------

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::of(slope);
        let value = self.value(x).map(|&v| if v > T::zero() { v } else { v * s });
        self.record(value, Op::LeakyRelu(x, slope), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|&v| T::one() / (T::one() + (-v).exp()));
        self.record(value, Op::Sigmoid(x), &[x])
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|&v| v.sqrt());
        self.record(value, Op::Sqrt(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|&v| v * v);
        self.record(value, Op::Square(x), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = T::of(c);
        let value = self.value(x).map(|&v| v + c);
        self.record(value, Op::AddScalar(x), &[x])
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Var {
        let k = T::of(c);
        let value = self.value(x).map(|&v| v * k);
        self.record(value, Op::MulScalar(x, c), &[x])
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out = broadcast_shape(&sa, &sb)
            .ok_or_else(|| Error::shape(name, format!("cannot broadcast {sa:?} with {sb:?}")))?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let data = if sa == sb {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut data = vec![T::zero(); numel(&out)];
            let (ta, tb) = (broadcast_strides(&sa, &out), broadcast_strides(&sb, &out));
            for_each_broadcast(&out, &ta, &tb, |i, ia, ib| data[i] = f(da[ia], db[ib]));
            data
        };
        let value = Tensor::new(out, data)?;
        Ok(self.record(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.record(value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).mean());
        self.record(value, Op::Mean(x), &[x])
    }

    /// Sum over one axis, keeping it with extent 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::shape("sum_axis", format!("axis {axis} for {s:?}")));
        }
        let (outer, mid, inner) = split_axis(&s, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for m in 0..mid {
                let row = &src[(o * mid + m) * inner..(o * mid + m + 1) * inner];
                for (d, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d += v;
                }
            }
        }
        let mut shape = s;
        shape[axis] = 1;
        let value = Tensor::new(shape, out)?;
        Ok(self.record(value, Op::SumAxis(x, axis), &[x]))
    }

    fn channel_planes(&self, name: &'static str, x: Var) -> Result<(Vec<usize>, usize)> {
        let s = self.shape(x).to_vec();
        unary_shape(name, self.value(x), 4)?;
        Ok((s.clone(), s[2] * s[3]))
    }

    /// Per-(sample, channel) spatial mean of `[N, C, H, W]`, shaped `[N, C, 1, 1]`.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let (s, area) = self.channel_planes("channel_mean", x)?;
        let inv = T::of(1.0 / area as f64);
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(area)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::new(vec![s[0], s[1], 1, 1], out)?;
        Ok(self.record(value, Op::ChannelMean(x), &[x]))
    }

    /// Per-(sample, channel) biased standard deviation `sqrt(var + eps)`.
    pub fn channel_std(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (s, area) = self.channel_planes("channel_std", x)?;
        let inv = T::of(1.0 / area as f64);
        let e = T::of(eps);
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(area)
            .map(|p| {
                let mu = p.iter().copied().sum::<T>() * inv;
                let var = p.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv;
                (var + e).sqrt()
            })
            .collect();
        let value = Tensor::new(vec![s[0], s[1], 1, 1], out)?;
        Ok(self.record(value, Op::ChannelStd(x), &[x]))
    }

    /// Per-channel `(mean, std)` pair used by instance normalisation.
    pub fn instance_stats(&mut self, x: Var, eps: f64) -> Result<(Var, Var)> {
        Ok((self.channel_mean(x)?, self.channel_std(x, eps)?))
    }

    // ---- structure ------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape.to_vec())?;
        Ok(self.record(value, Op::Reshape(x), &[x]))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::shape(
                "slice",
                format!("range {start}..{} on axis {axis} of {s:?}", start + len),
            ));
        }
        let (outer, mid, inner) = split_axis(&s, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * mid + start) * inner..(o * mid + start + len) * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let value = Tensor::new(shape, out)?;
        Ok(self.record(value, Op::Slice { x, axis, start }, &[x]))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {base:?}")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape(
                    "concat",
                    format!("{s:?} does not match {base:?} off axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let m = self.shape(v)[axis];
                out.extend_from_slice(&self.value(v).data()[o * m * inner..(o + 1) * m * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        Ok(self.record(value, Op::Concat(xs.to_vec(), axis), xs))
    }

    /// Scales every vector along the last axis to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() {
            return Err(Error::shape("l2_normalize", "rank-0 input"));
        }
        let d = s[s.len() - 1];
        let e = T::of(eps);
        let mut out = Vec::with_capacity(numel(&s));
        for row in self.value(x).data().chunks(d) {
            let n = (row.iter().map(|&v| v * v).sum::<T>() + e).sqrt();
            out.extend(row.iter().map(|&v| v / n));
        }
        let value = Tensor::new(s, out)?;
        Ok(self.record(value, Op::L2Normalize(x, eps), &[x]))
    }

    /// `x - log(sum(exp(x)))` along the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() {
            return Err(Error::shape("log_softmax", "rank-0 input"));
        }
        let d = s[s.len() - 1];
        let mut out = Vec::with_capacity(numel(&s));
        for row in self.value(x).data().chunks(d) {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            out.extend(row.iter().map(|&v| v - lse));
        }
        let value = Tensor::new(s, out)?;
        Ok(self.record(value, Op::LogSoftmax(x), &[x]))
    }

    /// Euclidean norm along the last axis, which is kept with extent 1. The
    /// subgradient at the origin is taken as zero.
    pub fn norm(&mut self, x: Var) -> Result<Var> {
        let mut s = self.shape(x).to_vec();
        let Some(&d) = s.last() else {
            return Err(Error::shape("norm", "rank-0 input"));
        };
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(d)
            .map(|r| r.iter().map(|&v| v * v).sum::<T>().sqrt())
            .collect();
        *s.last_mut().unwrap() = 1;
        let value = Tensor::new(s, out)?;
        Ok(self.record(value, Op::Norm(x), &[x]))
    }

    // ---- composites -----------------------------------------------------

    /// `x @ w + b` for `x: [M, K]`, `w: [K, N]`, `b: [N]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    // ---- backward -------------------------------------------------------

    /// Gradients of the scalar `loss` with respect to every leaf that requires one.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let node = &self.nodes[i];
                match (&node.op, g) {
                    (Op::Leaf, Some(g)) if node.requires_grad => {
                        Some(Tensor::new(node.value.shape().to_vec(), g).expect("gradient shape"))
                    }
                    _ => None,
                }
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        g,
                        (n as isize, 1),
                        vb.data(),
                        (1, n as isize),
                        T::zero(),
                        &mut da,
                        (k as isize, 1),
                    );
                    accumulate(&mut grads[a.0], da);
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        va.data(),
                        (1, k as isize),
                        g,
                        (n as isize, 1),
                        T::zero(),
                        &mut db,
                        (n as isize, 1),
                    );
                    accumulate(&mut grads[b.0], db);
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => self.conv_backward(out, g, (*x, *w, *b), (*stride, *pad), grads),
            Op::Upsample2x(x) => {
                let s = self.shape(*x);
                let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                let planes = numel(s) / (h * w);
                let mut dx = vec![T::zero(); numel(s)];
                for p in 0..planes {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dx[p * h * w + (y / 2) * w + xx / 2] += g[p * 4 * h * w + y * 2 * w + xx];
                        }
                    }
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::ResizeBilinear { x, rows, cols } => {
                let s = self.shape(*x);
                let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                let planes = numel(s) / (h * w);
                let dx = resize_planes_adjoint(g, planes, (h, w), rows, cols);
                accumulate(&mut grads[x.0], dx);
            }
            Op::AvgPool2x(x) => {
                let s = self.shape(*x);
                let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                let (oh, ow) = (h / 2, w / 2);
                let planes = numel(s) / (h * w);
                let quarter = T::of(0.25);
                let mut dx = vec![T::zero(); numel(s)];
                for p in 0..planes {
                    for y in 0..h {
                        for xx in 0..w {
                            dx[p * h * w + y * w + xx] = g[p * oh * ow + (y / 2) * ow + xx / 2] * quarter;
                        }
                    }
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::LeakyRelu(x, slope) => {
                let s = T::of(*slope);
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gi)| if v > T::zero() { gi } else { gi * s })
                    .collect();
                accumulate(&mut grads[x.0], dx);
            }
            Op::Sigmoid(x) => {
                let dx = out
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&y, &gi)| gi * y * (T::one() - y))
                    .collect();
                accumulate(&mut grads[x.0], dx);
            }
            Op::Sqrt(x) => {
                let two = T::of(2.0);
                let dx = out.data().iter().zip(g).map(|(&y, &gi)| gi / (two * y)).collect();
                accumulate(&mut grads[x.0], dx);
            }
            Op::Square(x) => {
                let two = T::of(2.0);
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gi)| two * v * gi)
                    .collect();
                accumulate(&mut grads[x.0], dx);
            }
            Op::AddScalar(x) | Op::Reshape(x) => accumulate(&mut grads[x.0], g.to_vec()),
            Op::MulScalar(x, c) => {
                let k = T::of(*c);
                accumulate(&mut grads[x.0], g.iter().map(|&v| v * k).collect());
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let neg = matches!(node.op, Op::Sub(..));
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], reduce_to(g, out.shape(), self.shape(*a)));
                }
                if self.wants(*b) {
                    let mut db = reduce_to(g, out.shape(), self.shape(*b));
                    if neg {
                        db.iter_mut().for_each(|v| *v = -*v);
                    }
                    accumulate(&mut grads[b.0], db);
                }
            }
            Op::Mul(a, b) | Op::Div(a, b) => self.product_backward(node, g, *a, *b, grads),
            Op::Sum(x) => accumulate(&mut grads[x.0], vec![g[0]; self.value(*x).len()]),
            Op::Mean(x) => {
                let n = self.value(*x).len();
                accumulate(&mut grads[x.0], vec![g[0] / T::of(n as f64); n]);
            }
            Op::SumAxis(x, axis) => {
                let s = self.shape(*x);
                let (outer, mid, inner) = split_axis(s, *axis);
                let mut dx = Vec::with_capacity(numel(s));
                for o in 0..outer {
                    for _ in 0..mid {
                        dx.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::ChannelMean(x) => {
                let s = self.shape(*x);
                let area = s[2] * s[3];
                let inv = T::of(1.0 / area as f64);
                let dx = g.iter().flat_map(|&gi| std::iter::repeat_n(gi * inv, area)).collect();
                accumulate(&mut grads[x.0], dx);
            }
            Op::ChannelStd(x) => {
                let s = self.shape(*x);
                let area = s[2] * s[3];
                let inv = T::of(1.0 / area as f64);
                let mut dx = Vec::with_capacity(numel(s));
                for (p, plane) in self.value(*x).data().chunks(area).enumerate() {
                    let mu = plane.iter().copied().sum::<T>() * inv;
                    let k = g[p] * inv / out.data()[p];
                    dx.extend(plane.iter().map(|&v| (v - mu) * k));
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = split_axis(out.shape(), *axis);
                let mut offset = 0;
                for v in xs {
                    let m = self.shape(*v)[*axis];
                    if self.wants(*v) {
                        let mut dv = Vec::with_capacity(outer * m * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            dv.extend_from_slice(&g[base..base + m * inner]);
                        }
                        accumulate(&mut grads[v.0], dv);
                    }
                    offset += m;
                }
            }
            Op::Slice { x, axis, start } => {
                let s = self.shape(*x);
                let (outer, mid, inner) = split_axis(s, *axis);
                let len = out.shape()[*axis];
                let mut dx = vec![T::zero(); numel(s)];
                for o in 0..outer {
                    let dst = (o * mid + start) * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::L2Normalize(x, eps) => {
                let d = *out.shape().last().unwrap();
                let e = T::of(*eps);
                let mut dx = Vec::with_capacity(out.len());
                for ((xr, yr), gr) in self
                    .value(*x)
                    .data()
                    .chunks(d)
                    .zip(out.data().chunks(d))
                    .zip(g.chunks(d))
                {
                    let n = (xr.iter().map(|&v| v * v).sum::<T>() + e).sqrt();
                    let dot: T = yr.iter().zip(gr).map(|(&y, &gi)| y * gi).sum();
                    dx.extend(yr.iter().zip(gr).map(|(&y, &gi)| (gi - y * dot) / n));
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::Norm(x) => {
                let xv = self.value(*x);
                let d = *xv.shape().last().unwrap();
                let mut dx = Vec::with_capacity(xv.len());
                for ((xr, &n), &gi) in xv.data().chunks(d).zip(out.data()).zip(g) {
                    if n == T::zero() {
                        dx.extend(std::iter::repeat_n(T::zero(), d));
                    } else {
                        dx.extend(xr.iter().map(|&v| gi * v / n));
                    }
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::LogSoftmax(x) => {
                let d = *out.shape().last().unwrap();
                let mut dx = Vec::with_capacity(out.len());
                for (yr, gr) in out.data().chunks(d).zip(g.chunks(d)) {
                    let total: T = gr.iter().copied().sum();
                    dx.extend(yr.iter().zip(gr).map(|(&y, &gi)| gi - y.exp() * total));
                }
                accumulate(&mut grads[x.0], dx);
            }
        }
    }

    fn product_backward(&self, node: &Node<T>, g: &[T], a: Var, b: Var, grads: &mut [Option<Vec<T>>]) {
        let div = matches!(node.op, Op::Div(..));
        let out = node.value.shape();
        let (va, vb) = (self.value(a), self.value(b));
        let (ta, tb) = (broadcast_strides(va.shape(), out), broadcast_strides(vb.shape(), out));
        let (da, db) = (va.data(), vb.data());
        if self.wants(a) {
            let mut ga = vec![T::zero(); va.len()];
            for_each_broadcast(out, &ta, &tb, |i, ia, ib| {
                ga[ia] += if div { g[i] / db[ib] } else { g[i] * db[ib] };
            });
            accumulate(&mut grads[a.0], ga);
        }
        if self.wants(b) {
            let mut gb = vec![T::zero(); vb.len()];
            for_each_broadcast(out, &ta, &tb, |i, ia, ib| {
                gb[ib] += if div {
                    -g[i] * da[ia] / (db[ib] * db[ib])
                } else {
                    g[i] * da[ia]
                };
            });
            accumulate(&mut grads[b.0], gb);
        }
    }

    fn conv_backward(
        &self,
        out: &Tensor<T>,
        g: &[T],
        (x, w, b): (Var, Var, Option<Var>),
        (stride, pad): (usize, usize),
        grads: &mut [Option<Vec<T>>],
    ) {
        let (sx, sw) = (self.shape(x), self.shape(w));
        let geom = ConvGeom {
            c: sx[1],
            h: sx[2],
            w: sx[3],
            o: sw[0],
            kh: sw[2],
            kw: sw[3],
            stride,
            pad,
            ho: out.shape()[2],
            wo: out.shape()[3],
        };
        let n = sx[0];
        let (patch, area) = (geom.patch(), geom.out_area());
        let plane = geom.c * geom.h * geom.w;
        let xin = self.value(x).data();
        let kern = self.value(w).data();

        if let Some(b) = b {
            if self.wants(b) {
                let mut db = vec![T::zero(); geom.o];
                for s in 0..n {
                    for (o, row) in g[s * geom.o * area..(s + 1) * geom.o * area].chunks(area).enumerate() {
                        db[o] += row.iter().copied().sum::<T>();
                    }
                }
                accumulate(&mut grads[b.0], db);
            }
        }

        let want_w = self.wants(w);
        let want_x = self.wants(x);
        let mut dw = if want_w {
            vec![T::zero(); geom.o * patch]
        } else {
            Vec::new()
        };
        let mut dx = if want_x { vec![T::zero(); n * plane] } else { Vec::new() };
        let mut cols = vec![T::zero(); if geom.is_pointwise() { 0 } else { patch * area }];
        let mut dcols = vec![
            T::zero();
            if want_x && !geom.is_pointwise() {
                patch * area
            } else {
                0
            }
        ];
        for s in 0..n {
            let gs = &g[s * geom.o * area..(s + 1) * geom.o * area];
            let xs = &xin[s * plane..(s + 1) * plane];
            if want_w {
                let cm: &[T] = if geom.is_pointwise() {
                    xs
                } else {
                    im2col(xs, &geom, &mut cols);
                    &cols
                };
                T::gemm(
                    geom.o,
                    area,
                    patch,
                    T::one(),
                    gs,
                    (area as isize, 1),
                    cm,
                    (1, area as isize),
                    T::one(),
                    &mut dw,
                    (patch as isize, 1),
                );
            }
            if want_x {
                let dxs = &mut dx[s * plane..(s + 1) * plane];
                if geom.is_pointwise() {
                    T::gemm(
                        patch,
                        geom.o,
                        area,
                        T::one(),
                        kern,
                        (1, patch as isize),
                        gs,
                        (area as isize, 1),
                        T::zero(),
                        dxs,
                        (area as isize, 1),
                    );
                } else {
                    T::gemm(
                        patch,
                        geom.o,
                        area,
                        T::one(),
                        kern,
                        (1, patch as isize),
                        gs,
                        (area as isize, 1),
                        T::zero(),
                        &mut dcols,
                        (area as isize, 1),
                    );
                    col2im(&dcols, &geom, dxs);
                }
            }
        }
        if want_w {
            accumulate(&mut grads[w.0], dw);
        }
        if want_x {
            accumulate(&mut grads[x.0], dx);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_output_shape() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(&Tensor::zeros(vec![1, 3, 64, 64]));
        let w = g.constant(&Tensor::zeros(vec![8, 3, 3, 3]));
        let y = g.conv2d(x, w, None, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 8, 32, 32]);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(&Tensor::zeros(vec![1, 4, 8, 8]));
        let w = g.constant(&Tensor::zeros(vec![8, 3, 3, 3]));
        let err = g.conv2d(x, w, None, 1, 1).unwrap_err().to_string();
        assert!(err.contains("[1, 4, 8, 8]") && err.contains("[8, 3, 3, 3]"), "{err}");
    }

    #[test]
    fn leaky_relu_negative_branch() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(&t(&[3], &[-1.0, 0.0, 2.0]));
        let y = g.leaky_relu(x, 0.2);
        assert_eq!(g.value(y).data(), &[-0.2, 0.0, 2.0]);
    }

    #[test]
    fn leaky_relu_subgradient_at_zero_uses_slope() {
        let mut g = Graph::<f64>::new();
        let x = g.param(&t(&[1], &[0.0]));
        let y = g.leaky_relu(x, 0.2);
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.2]);
    }

    #[test]
    fn nearest_upsample_replicates_blocks() {
        let mut g = Graph::<f32>::new();
        let src: Vec<f32> = (0..16).map(|v| v as f32).collect();
        let x = g.constant(&Tensor::new(vec![4, 4], src).unwrap());
        let y = g.upsample2x(x).unwrap();
        let out = g.value(y);
        assert_eq!(out.shape(), &[8, 8]);
        for yy in 0..8 {
            for xx in 0..8 {
                assert_eq!(out.data()[yy * 8 + xx], ((yy / 2) * 4 + xx / 2) as f32);
            }
        }
    }

    #[test]
    fn mean_squared_error_at_target_has_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let data = t(&[2, 3], &[0.1, -0.4, 2.0, 3.0, 0.0, 1.5]);
        let x = g.param(&data);
        let target = g.constant(&data);
        let d = g.sub(x, target).unwrap();
        let sq = g.square(d);
        let l = g.mean(sq);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_sum_gradient_is_constant() {
        let mut g = Graph::<f64>::new();
        let x = g.param(&t(&[2, 2, 2], &[1.0, -2.0, 3.0, 0.5, 7.0, 8.0, -1.0, 0.0]));
        let y = g.mul_scalar(x, 2.0);
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.param(&t(&[2], &[1.0, 2.0]));
        let y = g.square(x);
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(&t(&[2], &[1.0, 2.0]));
        let c = g.constant(&t(&[2], &[3.0, 4.0]));
        let y = g.mul(x, c).unwrap();
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(&Tensor::full(vec![1, 2, 3, 3], 1.0));
        let b = g.param(&t(&[1, 2, 1, 1], &[0.5, -0.5]));
        let y = g.add(x, b).unwrap();
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(b).unwrap().data(), &[9.0, 9.0]);
    }

    #[test]
    fn shared_input_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.param(&t(&[1], &[3.0]));
        let y = g.mul(x, x).unwrap();
        let z = g.add(y, x).unwrap();
        let l = g.sum(z);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[7.0]);
    }

    fn reference_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Vec<f64> {
        let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (o, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; n * o * ho * wo];
        for s in 0..n {
            for oc in 0..o {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ic in 0..c {
                            for i in 0..kh {
                                for j in 0..kw {
                                    let iy = (oy * stride + i) as isize - pad as isize;
                                    let ix = (ox * stride + j) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x.data()[((s * c + ic) * h + iy as usize) * wd + ix as usize]
                                            * w.data()[((oc * c + ic) * kh + i) * kw + j];
                                    }
                                }
                            }
                        }
                        out[((s * o + oc) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_nested_loop_reference() {
        let mut rng = crate::rng::rng_fork(5, 5);
        for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 2), (1, 2, 5)] {
            let x = crate::rng::normal_tensor::<f64, _>(&mut rng, vec![2, 3, 5, 5], 1.0);
            let w = crate::rng::normal_tensor::<f64, _>(&mut rng, vec![4, 3, k, k], 1.0);
            let mut g = Graph::new();
            let (xv, wv) = (g.constant(&x), g.constant(&w));
            let y = g.conv2d(xv, wv, None, stride, pad).unwrap();
            let want = reference_conv(&x, &w, stride, pad);
            for (a, b) in g.value(y).data().iter().zip(&want) {
                assert!((a - b).abs() <= 1e-12, "stride {stride} pad {pad}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn log_softmax_rows_exponentiate_to_one() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(&Tensor::new(vec![2, 3], vec![1000.0, 1001.0, 999.0, -3.0, 0.0, 2.0]).unwrap());
        let y = g.log_softmax(x).unwrap();
        for row in g.value(y).data().chunks(3) {
            let s: f64 = row.iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn norm_is_homogeneous_with_zero_subgradient_at_origin() {
        let mut g = Graph::<f64>::new();
        let x = g.param(&Tensor::new(vec![2, 2], vec![3.0, 4.0, 0.0, 0.0]).unwrap());
        let n = g.norm(x).unwrap();
        assert_eq!(g.value(n).data(), [5.0, 0.0]);
        let loss = g.sum(n);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), [0.6, 0.8, 0.0, 0.0]);
    }
}
