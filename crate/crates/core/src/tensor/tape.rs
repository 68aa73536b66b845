use std::cell::{Cell, Ref, RefCell};

use super::conv::{self, ConvGeom};
use super::{broadcast_shape, Shape, Tensor, EPS};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryOp {
    Relu,
    LeakyRelu(f32),
    Tanh,
    Sigmoid,
    Exp,
    Log,
    Sqrt,
    Abs,
    Square,
    Scale(f32),
    AddScalar(f32),
    ClampMin(f32),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ReduceOp {
    Sum,
    Mean,
    ChannelSum,
    ChannelMean,
    SpatialSum,
    SpatialMean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Height,
    Width,
}

/// Symmetry of a half-kernel used by [`Tape::filter1d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Parity {
    /// `y[i] = k0 x[i] + sum_t k_t (x[i+t] + x[i-t])`
    Even,
    /// `y[i] = sum_t k_t (x[i+t] - x[i-t])`, `k0` unused.
    Odd,
}

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<f32>,
    },
    Binary {
        op: BinaryOp,
        a: Var,
        b: Var,
    },
    Unary {
        op: UnaryOp,
        x: Var,
    },
    Reduce {
        op: ReduceOp,
        x: Var,
    },
    Up2 {
        x: Var,
    },
    Down2 {
        x: Var,
    },
    Concat {
        xs: Vec<Var>,
    },
    InstanceNorm {
        x: Var,
        inv_std: Vec<f32>,
    },
    Filter1d {
        x: Var,
        taps: Vec<f32>,
        axis: Axis,
        parity: Parity,
    },
    Gather {
        x: Var,
        indices: Vec<Vec<usize>>,
    },
    Contrastive {
        pos: Var,
        neg: Var,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum TapeState {
    Recording,
    Consumed,
}

/// Ordered record of executed operations. One tape serves one backward pass.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    state: Cell<TapeState>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` when `v` received none.
    pub fn get_or_zeros(&self, v: Var, shape: Shape) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

fn accumulate(slot: &mut Option<Vec<f32>>, contrib: Vec<f32>) {
    match slot {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contrib) {
                *e += c;
            }
        }
        None => *slot = Some(contrib),
    }
}

/// Sum `g` (shaped `out`) down to `target` over broadcast axes.
fn reduce_to(g: &[f32], out: Shape, target: Shape) -> Vec<f32> {
    if out == target {
        return g.to_vec();
    }
    let mut acc = vec![0.0f64; target.numel()];
    let ts = target.strides();
    let [n, c, h, w] = out.0;
    let map = |i: usize, ax: usize| if target.0[ax] == 1 { 0 } else { i };
    let mut idx = 0;
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                let base = map(b, 0) * ts[0] + map(ch, 1) * ts[1] + map(y, 2) * ts[2];
                for x in 0..w {
                    acc[base + map(x, 3)] += g[idx] as f64;
                    idx += 1;
                }
            }
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}

fn broadcast_index(shape: Shape, out: Shape) -> impl Fn(usize, usize, usize, usize) -> usize {
    let s = shape.strides();
    let keep = [
        shape.0[0] != 1 || out.0[0] == 1,
        shape.0[1] != 1 || out.0[1] == 1,
        shape.0[2] != 1 || out.0[2] == 1,
        shape.0[3] != 1 || out.0[3] == 1,
    ];
    move |b, c, y, x| {
        (if keep[0] { b * s[0] } else { 0 })
            + (if keep[1] { c * s[1] } else { 0 })
            + (if keep[2] { y * s[2] } else { 0 })
            + (if keep[3] { x } else { 0 })
    }
}

fn binary_map(a: &Tensor, b: &Tensor, out: Shape, f: impl Fn(f32, f32) -> f32) -> Vec<f32> {
    if a.shape() == out && b.shape() == out {
        return a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
    }
    let ia = broadcast_index(a.shape(), out);
    let ib = broadcast_index(b.shape(), out);
    let (ad, bd) = (a.data(), b.data());
    let mut v = Vec::with_capacity(out.numel());
    let [n, c, h, w] = out.0;
    for bb in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    v.push(f(ad[ia(bb, ch, y, x)], bd[ib(bb, ch, y, x)]));
                }
            }
        }
    }
    v
}

fn clamp_index(i: isize, len: usize) -> usize {
    i.clamp(0, len as isize - 1) as usize
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            state: Cell::new(TapeState::Recording),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn node(&self, v: Var) -> Ref<'_, Node> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0])
    }

    fn rg(&self, vs: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vs.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// Records a leaf. Gradients are produced only for leaves with `requires_grad`.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Same value as `v`, cut off from the gradient graph.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v);
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.node(v).value.clone()
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.node(v).value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Which side of its kink every input element of a relu, leaky relu,
    /// abs or clamp sits on. Two evaluations with equal signatures lie in the
    /// same smooth piece of the recorded function.
    pub fn kink_signature(&self) -> Vec<bool> {
        let nodes = self.nodes.borrow();
        let mut sig = Vec::new();
        for node in nodes.iter() {
            if let Op::Unary { op, x } = node.op {
                let at = match op {
                    UnaryOp::Relu | UnaryOp::LeakyRelu(_) | UnaryOp::Abs => 0.0,
                    UnaryOp::ClampMin(c) => c,
                    _ => continue,
                };
                sig.extend(nodes[x.0].value.data().iter().map(|&v| v > at));
            }
        }
        sig
    }

    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        if stride == 0 {
            return Err(Error::Parameter("conv2d stride must be positive".into()));
        }
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = b.map(|b| self.value(b));
        let [n, c, h, wd] = xv.shape().0;
        let [oc, ic, kh, kw] = wv.shape().0;
        if ic != c {
            return Err(Error::dim("conv2d", "channel", ic, c));
        }
        if let Some(bv) = &bv {
            if bv.len() != oc {
                return Err(Error::dim("conv2d", "bias", oc, bv.len()));
            }
        }
        if h + 2 * pad < kh {
            return Err(Error::dim(
                "conv2d",
                "height",
                format!(">= {kh}"),
                h + 2 * pad,
            ));
        }
        if wd + 2 * pad < kw {
            return Err(Error::dim(
                "conv2d",
                "width",
                format!(">= {kw}"),
                wd + 2 * pad,
            ));
        }
        let geom = ConvGeom {
            n,
            c,
            h,
            w: wd,
            out_c: oc,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (wd + 2 * pad - kw) / stride + 1,
        };
        let (out, cols) = conv::forward(&geom, xv.data(), wv.data(), bv.as_ref().map(|t| t.data()));
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        let value = Tensor::from_parts(Shape::new(n, oc, geom.oh, geom.ow), out);
        let cols = if rg { cols } else { Vec::new() };
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
            rg,
        ))
    }

    pub fn binary(&self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let out = broadcast_shape(op_name(op), av.shape(), bv.shape())?;
        let data = match op {
            BinaryOp::Add => binary_map(&av, &bv, out, |x, y| x + y),
            BinaryOp::Sub => binary_map(&av, &bv, out, |x, y| x - y),
            BinaryOp::Mul => binary_map(&av, &bv, out, |x, y| x * y),
            BinaryOp::Div => binary_map(&av, &bv, out, |x, y| x / (y + EPS)),
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(out, data), Op::Binary { op, a, b }, rg))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    /// `a / (b + EPS)`
    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn unary(&self, op: UnaryOp, x: Var) -> Var {
        let xv = self.value(x);
        let f: Box<dyn Fn(f32) -> f32> = match op {
            UnaryOp::Relu => Box::new(|v: f32| v.max(0.0)),
            UnaryOp::LeakyRelu(s) => Box::new(move |v: f32| if v > 0.0 { v } else { s * v }),
            UnaryOp::Tanh => Box::new(f32::tanh),
            UnaryOp::Sigmoid => Box::new(sigmoid),
            UnaryOp::Exp => Box::new(f32::exp),
            UnaryOp::Log => Box::new(|v: f32| (v + EPS).ln()),
            UnaryOp::Sqrt => Box::new(|v: f32| v.max(0.0).sqrt()),
            UnaryOp::Abs => Box::new(f32::abs),
            UnaryOp::Square => Box::new(|v: f32| v * v),
            UnaryOp::Scale(c) => Box::new(move |v: f32| v * c),
            UnaryOp::AddScalar(c) => Box::new(move |v: f32| v + c),
            UnaryOp::ClampMin(c) => Box::new(move |v: f32| v.max(c)),
        };
        let value = xv.map(f);
        let rg = self.rg(&[x]);
        self.push(value, Op::Unary { op, x }, rg)
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(UnaryOp::Relu, x)
    }

    pub fn leaky_relu(&self, x: Var, slope: f32) -> Var {
        self.unary(UnaryOp::LeakyRelu(slope), x)
    }

    pub fn tanh(&self, x: Var) -> Var {
        self.unary(UnaryOp::Tanh, x)
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(UnaryOp::Sigmoid, x)
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary(UnaryOp::Exp, x)
    }

    /// `ln(x + EPS)`
    pub fn log(&self, x: Var) -> Var {
        self.unary(UnaryOp::Log, x)
    }

    /// Exact `sqrt(max(x, 0))`; the derivative uses `0.5 / (sqrt(x) + EPS)`.
    pub fn sqrt(&self, x: Var) -> Var {
        self.unary(UnaryOp::Sqrt, x)
    }

    pub fn abs(&self, x: Var) -> Var {
        self.unary(UnaryOp::Abs, x)
    }

    pub fn square(&self, x: Var) -> Var {
        self.unary(UnaryOp::Square, x)
    }

    pub fn scale(&self, x: Var, c: f32) -> Var {
        self.unary(UnaryOp::Scale(c), x)
    }

    pub fn add_scalar(&self, x: Var, c: f32) -> Var {
        self.unary(UnaryOp::AddScalar(c), x)
    }

    pub fn clamp_min(&self, x: Var, c: f32) -> Var {
        self.unary(UnaryOp::ClampMin(c), x)
    }

    pub fn reduce(&self, op: ReduceOp, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape();
        let [n, c, h, w] = shape.0;
        let empty = match op {
            ReduceOp::Sum | ReduceOp::Mean => shape.numel() == 0,
            ReduceOp::ChannelSum | ReduceOp::ChannelMean => c == 0,
            ReduceOp::SpatialSum | ReduceOp::SpatialMean => h * w == 0,
        };
        if empty {
            return Err(Error::dim(reduce_name(op), "reduced", "non-empty", shape));
        }
        let d = xv.data();
        let (out_shape, data) = match op {
            ReduceOp::Sum | ReduceOp::Mean => {
                let s: f64 = d.iter().map(|&v| v as f64).sum();
                let s = if op == ReduceOp::Mean {
                    s / d.len() as f64
                } else {
                    s
                };
                (Shape::SCALAR, vec![s as f32])
            }
            ReduceOp::ChannelSum | ReduceOp::ChannelMean => {
                let p = h * w;
                let mut acc = vec![0.0f64; n * p];
                for b in 0..n {
                    for ch in 0..c {
                        let src = &d[(b * c + ch) * p..(b * c + ch + 1) * p];
                        for (a, &v) in acc[b * p..(b + 1) * p].iter_mut().zip(src) {
                            *a += v as f64;
                        }
                    }
                }
                let div = if op == ReduceOp::ChannelMean {
                    c as f64
                } else {
                    1.0
                };
                (
                    Shape::new(n, 1, h, w),
                    acc.into_iter().map(|v| (v / div) as f32).collect(),
                )
            }
            ReduceOp::SpatialSum | ReduceOp::SpatialMean => {
                let p = h * w;
                let div = if op == ReduceOp::SpatialMean {
                    p as f64
                } else {
                    1.0
                };
                let data = d
                    .chunks(p)
                    .map(|pl| (pl.iter().map(|&v| v as f64).sum::<f64>() / div) as f32)
                    .collect();
                (Shape::new(n, c, 1, 1), data)
            }
        };
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            Op::Reduce { op, x },
            rg,
        ))
    }

    pub fn sum(&self, x: Var) -> Result<Var> {
        self.reduce(ReduceOp::Sum, x)
    }

    pub fn mean(&self, x: Var) -> Result<Var> {
        self.reduce(ReduceOp::Mean, x)
    }

    pub fn channel_sum(&self, x: Var) -> Result<Var> {
        self.reduce(ReduceOp::ChannelSum, x)
    }

    pub fn channel_mean(&self, x: Var) -> Result<Var> {
        self.reduce(ReduceOp::ChannelMean, x)
    }

    pub fn spatial_mean(&self, x: Var) -> Result<Var> {
        self.reduce(ReduceOp::SpatialMean, x)
    }

    pub fn spatial_sum(&self, x: Var) -> Result<Var> {
        self.reduce(ReduceOp::SpatialSum, x)
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn up2(&self, x: Var) -> Var {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape().0;
        let out = Shape::new(n, c, 2 * h, 2 * w);
        let d = xv.data();
        let mut data = Vec::with_capacity(out.numel());
        for pl in 0..n * c {
            let src = &d[pl * h * w..(pl + 1) * h * w];
            for y in 0..2 * h {
                let row = &src[(y / 2) * w..(y / 2 + 1) * w];
                for x in 0..2 * w {
                    data.push(row[x / 2]);
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::from_parts(out, data), Op::Up2 { x }, rg)
    }

    /// Nearest-neighbour 2x downsampling (keeps the top-left sample of each 2x2 block).
    pub fn down2(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape().0;
        if h % 2 != 0 {
            return Err(Error::dim("down2", "height", "even", h));
        }
        if w % 2 != 0 {
            return Err(Error::dim("down2", "width", "even", w));
        }
        let out = Shape::new(n, c, h / 2, w / 2);
        let d = xv.data();
        let mut data = Vec::with_capacity(out.numel());
        for pl in 0..n * c {
            for y in 0..h / 2 {
                for x in 0..w / 2 {
                    data.push(d[pl * h * w + 2 * y * w + 2 * x]);
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(out, data), Op::Down2 { x }, rg))
    }

    /// Concatenation along the channel axis.
    pub fn concat(&self, xs: &[Var]) -> Result<Var> {
        let vals: Vec<Tensor> = xs.iter().map(|&v| self.value(v)).collect();
        let first = vals
            .first()
            .ok_or_else(|| Error::Parameter("concat of zero tensors".into()))?
            .shape();
        for v in &vals {
            let s = v.shape();
            if s.n() != first.n() {
                return Err(Error::dim("concat", "batch", first.n(), s.n()));
            }
            if s.h() != first.h() || s.w() != first.w() {
                return Err(Error::dim("concat", "spatial", first, s));
            }
        }
        let c: usize = vals.iter().map(|v| v.shape().c()).sum();
        let out = Shape::new(first.n(), c, first.h(), first.w());
        let mut data = Vec::with_capacity(out.numel());
        for b in 0..first.n() {
            for v in &vals {
                let stride = v.shape().c() * v.shape().plane();
                data.extend_from_slice(&v.data()[b * stride..(b + 1) * stride]);
            }
        }
        let rg = self.rg(xs);
        Ok(self.push(
            Tensor::from_parts(out, data),
            Op::Concat { xs: xs.to_vec() },
            rg,
        ))
    }

    /// Per-(batch, channel) normalization to zero mean and unit variance (no affine).
    pub fn instance_norm(&self, x: Var, eps: f32) -> Result<Var> {
        let xv = self.value(x);
        let p = xv.shape().plane();
        if p == 0 {
            return Err(Error::dim(
                "instance_norm",
                "spatial",
                "non-empty",
                xv.shape(),
            ));
        }
        let mut data = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(xv.len() / p);
        for pl in xv.data().chunks(p) {
            let mean = pl.iter().map(|&v| v as f64).sum::<f64>() / p as f64;
            let var = pl.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / p as f64;
            let is = 1.0 / (var + eps as f64).sqrt();
            inv_std.push(is as f32);
            data.extend(pl.iter().map(|&v| ((v as f64 - mean) * is) as f32));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(xv.shape(), data),
            Op::InstanceNorm { x, inv_std },
            rg,
        ))
    }

    /// One-dimensional filter along `axis` with replicate borders.
    /// `taps[0]` is the centre tap, `taps[t]` the tap at offset `t`.
    pub fn filter1d(&self, x: Var, taps: &[f32], axis: Axis, parity: Parity) -> Result<Var> {
        if taps.is_empty() {
            return Err(Error::Parameter("filter1d needs at least one tap".into()));
        }
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape().0;
        let d = xv.data();
        let mut out = vec![0.0f32; xv.len()];
        let r = taps.len() - 1;
        for pl in 0..n * c {
            let src = &d[pl * h * w..(pl + 1) * h * w];
            let dst = &mut out[pl * h * w..(pl + 1) * h * w];
            for y in 0..h {
                for xx in 0..w {
                    let at = |off: isize| match axis {
                        Axis::Height => src[clamp_index(y as isize + off, h) * w + xx],
                        Axis::Width => src[y * w + clamp_index(xx as isize + off, w)],
                    };
                    let mut acc = match parity {
                        Parity::Even => taps[0] * at(0),
                        Parity::Odd => 0.0,
                    };
                    for (t, &k) in taps.iter().enumerate().take(r + 1).skip(1) {
                        let t = t as isize;
                        acc += match parity {
                            Parity::Even => k * (at(t) + at(-t)),
                            Parity::Odd => k * (at(t) - at(-t)),
                        };
                    }
                    dst[y * w + xx] = acc;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(xv.shape(), out),
            Op::Filter1d {
                x,
                taps: taps.to_vec(),
                axis,
                parity,
            },
            rg,
        ))
    }

    /// Picks spatial locations of a (B,1,H,W) map into a (B,1,1,K) row per batch item.
    pub fn gather(&self, x: Var, indices: &[Vec<usize>]) -> Result<Var> {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape().0;
        if c != 1 {
            return Err(Error::dim("gather", "channel", 1, c));
        }
        if indices.len() != n {
            return Err(Error::dim("gather", "batch", n, indices.len()));
        }
        let k = indices.first().map_or(0, |v| v.len());
        let mut data = Vec::with_capacity(n * k);
        for (b, idx) in indices.iter().enumerate() {
            if idx.len() != k {
                return Err(Error::dim("gather", "index", k, idx.len()));
            }
            for &i in idx {
                if i >= h * w {
                    return Err(Error::dim("gather", "index", format!("< {}", h * w), i));
                }
                data.push(xv.data()[b * h * w + i]);
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(Shape::new(n, 1, 1, k), data),
            Op::Gather {
                x,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Mean InfoNCE cross-entropy. `pos` is (B,1,1,K): one positive logit per row;
    /// `neg` is (B,1,1,M): the negatives shared by every row of the same batch item.
    /// Row loss: `logsumexp(pos_l, neg_1..neg_M) - pos_l`.
    pub fn contrastive(&self, pos: Var, neg: Var) -> Result<Var> {
        let (pv, nv) = (self.value(pos), self.value(neg));
        let (ps, ns) = (pv.shape(), nv.shape());
        if ps.n() != ns.n() {
            return Err(Error::dim("contrastive", "batch", ps.n(), ns.n()));
        }
        let rows = ps.numel();
        if rows == 0 {
            return Err(Error::dim("contrastive", "positive", "non-empty", ps));
        }
        let (k, m) = (ps.numel() / ps.n(), ns.numel() / ns.n());
        let mut total = 0.0f64;
        for b in 0..ps.n() {
            let negs = &nv.data()[b * m..(b + 1) * m];
            for &p in &pv.data()[b * k..(b + 1) * k] {
                total += row_lse(p as f64, negs) - p as f64;
            }
        }
        let rg = self.rg(&[pos, neg]);
        Ok(self.push(
            Tensor::scalar((total / rows as f64) as f32),
            Op::Contrastive { pos, neg },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`. A tape supports exactly one backward.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.state.get() == TapeState::Consumed {
            return Err(Error::State(
                "backward called twice on a consumed tape".into(),
            ));
        }
        let nodes = self.nodes.borrow();
        let loss_shape = nodes
            .get(loss.0)
            .ok_or_else(|| Error::Contract("loss is not on this tape".into()))?
            .value
            .shape();
        if !loss_shape.is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {loss_shape}"
            )));
        }
        self.state.set(TapeState::Consumed);

        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(id);
            let Some(g) = upper[0].as_ref() else { continue };
            backprop_node(&nodes, node, g, lower);
        }
        Ok(Gradients {
            grads: grads
                .into_iter()
                .enumerate()
                .map(|(i, g)| g.map(|g| Tensor::from_parts(nodes[i].value.shape(), g)))
                .collect(),
        })
    }
}

fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn row_lse(p: f64, negs: &[f32]) -> f64 {
    let mx = negs.iter().fold(p, |a, &v| a.max(v as f64));
    let s: f64 = (p - mx).exp() + negs.iter().map(|&v| (v as f64 - mx).exp()).sum::<f64>();
    mx + s.ln()
}

fn op_name(op: BinaryOp) -> &'static str {
    match op {
        BinaryOp::Add => "add",
        BinaryOp::Sub => "sub",
        BinaryOp::Mul => "mul",
        BinaryOp::Div => "div",
    }
}

fn reduce_name(op: ReduceOp) -> &'static str {
    match op {
        ReduceOp::Sum => "sum",
        ReduceOp::Mean => "mean",
        ReduceOp::ChannelSum => "channel_sum",
        ReduceOp::ChannelMean => "channel_mean",
        ReduceOp::SpatialSum => "spatial_sum",
        ReduceOp::SpatialMean => "spatial_mean",
    }
}

fn backprop_node(nodes: &[Node], node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
    let rg = |v: Var| nodes[v.0].requires_grad;
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf => {}
        Op::Conv2d {
            x,
            w,
            b,
            geom,
            cols,
        } => {
            let want = (rg(*x), rg(*w), b.is_some_and(rg));
            let out = conv::backward(geom, g, val(*w).data(), cols, want);
            if let Some(dx) = out.dx {
                accumulate(&mut grads[x.0], dx);
            }
            if let Some(dw) = out.dw {
                accumulate(&mut grads[w.0], dw);
            }
            if let (Some(b), Some(db)) = (b, out.db) {
                accumulate(&mut grads[b.0], db);
            }
        }
        Op::Binary { op, a, b } => {
            let out = node.value.shape();
            let (av, bv) = (val(*a), val(*b));
            if rg(*a) {
                let full = match op {
                    BinaryOp::Add | BinaryOp::Sub => g.to_vec(),
                    BinaryOp::Mul => mul_broadcast(g, bv, out, |gi, y| gi * y),
                    BinaryOp::Div => mul_broadcast(g, bv, out, |gi, y| gi / (y + EPS)),
                };
                accumulate(&mut grads[a.0], reduce_to(&full, out, av.shape()));
            }
            if rg(*b) {
                let full = match op {
                    BinaryOp::Add => g.to_vec(),
                    BinaryOp::Sub => g.iter().map(|v| -v).collect(),
                    BinaryOp::Mul => mul_broadcast(g, av, out, |gi, x| gi * x),
                    BinaryOp::Div => {
                        let ia = broadcast_index(av.shape(), out);
                        let ib = broadcast_index(bv.shape(), out);
                        let [n, c, h, w] = out.0;
                        let mut v = Vec::with_capacity(out.numel());
                        let mut i = 0;
                        for bb in 0..n {
                            for ch in 0..c {
                                for y in 0..h {
                                    for xx in 0..w {
                                        let x = av.data()[ia(bb, ch, y, xx)];
                                        let d = bv.data()[ib(bb, ch, y, xx)] + EPS;
                                        v.push(-g[i] * x / (d * d));
                                        i += 1;
                                    }
                                }
                            }
                        }
                        v
                    }
                };
                accumulate(&mut grads[b.0], reduce_to(&full, out, bv.shape()));
            }
        }
        Op::Unary { op, x } => {
            let xd = val(*x).data();
            let yd = node.value.data();
            let dx: Vec<f32> = match *op {
                UnaryOp::Relu => zip3(g, xd, yd, |g, x, _| if x > 0.0 { g } else { 0.0 }),
                UnaryOp::LeakyRelu(s) => zip3(g, xd, yd, |g, x, _| if x > 0.0 { g } else { s * g }),
                UnaryOp::Tanh => zip3(g, xd, yd, |g, _, y| g * (1.0 - y * y)),
                UnaryOp::Sigmoid => zip3(g, xd, yd, |g, _, y| g * y * (1.0 - y)),
                UnaryOp::Exp => zip3(g, xd, yd, |g, _, y| g * y),
                UnaryOp::Log => zip3(g, xd, yd, |g, x, _| g / (x + EPS)),
                UnaryOp::Sqrt => zip3(g, xd, yd, |g, _, y| g * 0.5 / (y + EPS)),
                UnaryOp::Abs => zip3(g, xd, yd, |g, x, _| {
                    if x > 0.0 {
                        g
                    } else if x < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                }),
                UnaryOp::Square => zip3(g, xd, yd, |g, x, _| 2.0 * g * x),
                UnaryOp::Scale(c) => g.iter().map(|&v| v * c).collect(),
                UnaryOp::AddScalar(_) => g.to_vec(),
                UnaryOp::ClampMin(c) => zip3(g, xd, yd, |g, x, _| if x > c { g } else { 0.0 }),
            };
            accumulate(&mut grads[x.0], dx);
        }
        Op::Reduce { op, x } => {
            let shape = val(*x).shape();
            let [n, c, h, w] = shape.0;
            let p = h * w;
            let dx: Vec<f32> = match op {
                ReduceOp::Sum => vec![g[0]; shape.numel()],
                ReduceOp::Mean => vec![g[0] / shape.numel() as f32; shape.numel()],
                ReduceOp::ChannelSum | ReduceOp::ChannelMean => {
                    let div = if *op == ReduceOp::ChannelMean {
                        c as f32
                    } else {
                        1.0
                    };
                    let mut v = Vec::with_capacity(shape.numel());
                    for b in 0..n {
                        for _ in 0..c {
                            v.extend(g[b * p..(b + 1) * p].iter().map(|&gi| gi / div));
                        }
                    }
                    v
                }
                ReduceOp::SpatialSum | ReduceOp::SpatialMean => {
                    let div = if *op == ReduceOp::SpatialMean {
                        p as f32
                    } else {
                        1.0
                    };
                    g.iter()
                        .flat_map(|&gi| std::iter::repeat_n(gi / div, p))
                        .collect()
                }
            };
            accumulate(&mut grads[x.0], dx);
        }
        Op::Up2 { x } => {
            let [n, c, h, w] = val(*x).shape().0;
            let mut dx = vec![0.0f32; n * c * h * w];
            for pl in 0..n * c {
                let src = &g[pl * 4 * h * w..(pl + 1) * 4 * h * w];
                let dst = &mut dx[pl * h * w..(pl + 1) * h * w];
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
                    }
                }
            }
            accumulate(&mut grads[x.0], dx);
        }
        Op::Down2 { x } => {
            let [n, c, h, w] = val(*x).shape().0;
            let mut dx = vec![0.0f32; n * c * h * w];
            let (oh, ow) = (h / 2, w / 2);
            for pl in 0..n * c {
                for y in 0..oh {
                    for xx in 0..ow {
                        dx[pl * h * w + 2 * y * w + 2 * xx] = g[pl * oh * ow + y * ow + xx];
                    }
                }
            }
            accumulate(&mut grads[x.0], dx);
        }
        Op::Concat { xs } => {
            let out = node.value.shape();
            let stride_out = out.c() * out.plane();
            let mut offset = 0;
            for &v in xs {
                let s = val(v).shape();
                let stride = s.c() * s.plane();
                if rg(v) {
                    let mut dx = Vec::with_capacity(s.numel());
                    for b in 0..out.n() {
                        let start = b * stride_out + offset;
                        dx.extend_from_slice(&g[start..start + stride]);
                    }
                    accumulate(&mut grads[v.0], dx);
                }
                offset += stride;
            }
        }
        Op::InstanceNorm { x, inv_std } => {
            let p = node.value.shape().plane();
            let y = node.value.data();
            let mut dx = Vec::with_capacity(y.len());
            for (pl, &is) in inv_std.iter().enumerate() {
                let gs = &g[pl * p..(pl + 1) * p];
                let ys = &y[pl * p..(pl + 1) * p];
                let mg = gs.iter().map(|&v| v as f64).sum::<f64>() / p as f64;
                let mgy = gs
                    .iter()
                    .zip(ys)
                    .map(|(&a, &b)| a as f64 * b as f64)
                    .sum::<f64>()
                    / p as f64;
                dx.extend(
                    gs.iter()
                        .zip(ys)
                        .map(|(&gi, &yi)| (is as f64 * (gi as f64 - mg - yi as f64 * mgy)) as f32),
                );
            }
            accumulate(&mut grads[x.0], dx);
        }
        Op::Filter1d {
            x,
            taps,
            axis,
            parity,
        } => {
            let [n, c, h, w] = val(*x).shape().0;
            let mut dx = vec![0.0f32; n * c * h * w];
            for pl in 0..n * c {
                let gs = &g[pl * h * w..(pl + 1) * h * w];
                let dst = &mut dx[pl * h * w..(pl + 1) * h * w];
                for y in 0..h {
                    for xx in 0..w {
                        let gi = gs[y * w + xx];
                        let at = |off: isize| match axis {
                            Axis::Height => clamp_index(y as isize + off, h) * w + xx,
                            Axis::Width => y * w + clamp_index(xx as isize + off, w),
                        };
                        if *parity == Parity::Even {
                            dst[at(0)] += taps[0] * gi;
                        }
                        for (t, &k) in taps.iter().enumerate().skip(1) {
                            let t = t as isize;
                            dst[at(t)] += k * gi;
                            dst[at(-t)] += match parity {
                                Parity::Even => k * gi,
                                Parity::Odd => -k * gi,
                            };
                        }
                    }
                }
            }
            accumulate(&mut grads[x.0], dx);
        }
        Op::Gather { x, indices } => {
            let s = val(*x).shape();
            let p = s.plane();
            let k = indices.first().map_or(0, |v| v.len());
            let mut dx = vec![0.0f32; s.numel()];
            for (b, idx) in indices.iter().enumerate() {
                for (j, &i) in idx.iter().enumerate() {
                    dx[b * p + i] += g[b * k + j];
                }
            }
            accumulate(&mut grads[x.0], dx);
        }
        Op::Contrastive { pos, neg } => {
            let (pv, nv) = (val(*pos), val(*neg));
            let bs = pv.shape().n();
            let rows = pv.len();
            let (k, m) = (rows / bs, nv.len() / bs);
            let scale = g[0] as f64 / rows as f64;
            let mut dp = vec![0.0f32; pv.len()];
            let mut dn = vec![0.0f64; nv.len()];
            for b in 0..bs {
                let negs = &nv.data()[b * m..(b + 1) * m];
                for l in 0..k {
                    let p = pv.data()[b * k + l] as f64;
                    let lse = row_lse(p, negs);
                    dp[b * k + l] = (((p - lse).exp() - 1.0) * scale) as f32;
                    for (j, &nn) in negs.iter().enumerate() {
                        dn[b * m + j] += (nn as f64 - lse).exp() * scale;
                    }
                }
            }
            if rg(*pos) {
                accumulate(&mut grads[pos.0], dp);
            }
            if rg(*neg) {
                accumulate(
                    &mut grads[neg.0],
                    dn.into_iter().map(|v| v as f32).collect(),
                );
            }
        }
    }
}

fn zip3(g: &[f32], x: &[f32], y: &[f32], f: impl Fn(f32, f32, f32) -> f32) -> Vec<f32> {
    g.iter()
        .zip(x)
        .zip(y)
        .map(|((&g, &x), &y)| f(g, x, y))
        .collect()
}

fn mul_broadcast(g: &[f32], other: &Tensor, out: Shape, f: impl Fn(f32, f32) -> f32) -> Vec<f32> {
    if other.shape() == out {
        return g.iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect();
    }
    let io = broadcast_index(other.shape(), out);
    let [n, c, h, w] = out.0;
    let mut v = Vec::with_capacity(out.numel());
    let mut i = 0;
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    v.push(f(g[i], other.data()[io(b, ch, y, x)]));
                    i += 1;
                }
            }
        }
    }
    v
}
