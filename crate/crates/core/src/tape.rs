//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value and enough
//! bookkeeping to propagate gradients. A node requires a gradient when any of
//! its inputs does; nodes that do not are never visited by [`Tape::backward`],
//! so frozen sub-networks cost only their forward pass.

use crate::error::{Error, Result};
use crate::gemm;
use crate::tensor::Tensor;

/// Lower clamp applied to predictions inside the binary cross-entropy.
pub const BCE_EPS: f64 = 1e-7;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    AvgPool2 {
        input: Var,
    },
    Upsample2 {
        input: Var,
    },
    ConcatChannels {
        a: Var,
        b: Var,
    },
    MaskChannels {
        image: Var,
        mask: Var,
    },
    Relu {
        input: Var,
    },
    Sigmoid {
        input: Var,
    },
    Exp {
        input: Var,
    },
    Log {
        input: Var,
        floor: f64,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: f64,
    },
    AddScalar {
        input: Var,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Reshape {
        input: Var,
    },
    GlobalAvgPool {
        input: Var,
    },
    LogSoftmax {
        input: Var,
    },
    Sum {
        input: Var,
    },
    Mean {
        input: Var,
    },
    Bce {
        pred: Var,
        target: Var,
    },
    Pick {
        input: Var,
        indices: Vec<usize>,
    },
    SelectRows {
        input: Var,
        rows: Vec<usize>,
    },
    ClassMean {
        input: Var,
        labels: Vec<usize>,
        counts: Vec<usize>,
    },
    PairwiseEuclidean {
        query: Var,
        proto: Var,
    },
    PairwiseCosine {
        query: Var,
        proto: Var,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2 { .. } => "max_pool2d",
            Op::AvgPool2 { .. } => "avg_pool2d",
            Op::Upsample2 { .. } => "upsample_nearest",
            Op::ConcatChannels { .. } => "concat_channels",
            Op::MaskChannels { .. } => "mask_channels",
            Op::Relu { .. } => "relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Exp { .. } => "exp",
            Op::Log { .. } => "log",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::Linear { .. } => "linear",
            Op::Reshape { .. } => "reshape",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Bce { .. } => "bce_loss",
            Op::Pick { .. } => "pick",
            Op::SelectRows { .. } => "select_rows",
            Op::ClassMean { .. } => "class_mean",
            Op::PairwiseEuclidean { .. } => "euclidean_distance",
            Op::PairwiseCosine { .. } => "cosine_distance",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

fn dims4(op: &'static str, t: &Tensor) -> Result<[usize; 4]> {
    match *t.shape() {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(Error::InvalidShape {
            op,
            shape: t.shape().to_vec(),
            reason: "expected rank 4 [N,C,H,W]".into(),
        }),
    }
}

fn dims2(op: &'static str, t: &Tensor) -> Result<[usize; 2]> {
    match *t.shape() {
        [r, c] => Ok([r, c]),
        _ => Err(Error::InvalidShape {
            op,
            shape: t.shape().to_vec(),
            reason: "expected rank 2".into(),
        }),
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Unfolds one `[C,H,W]` image into a `[C*kh*kw, OH*OW]` patch matrix.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    cols: &mut [f64],
) {
    let n = oh * ow;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = &mut cols[((ci * kh + ki) * kw + kj) * n..][..n];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let out = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &x[(ci * h + iy as usize) * w..][..w];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        *o = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the image.
#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    dx: &mut [f64],
) {
    let n = oh * ow;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = &cols[((ci * kh + ki) * kw + kj) * n..][..n];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut dx[(ci * h + iy as usize) * w..][..w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += row[oy * ow + ox];
                        }
                    }
                }
            }
        }
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

    /// Records an input tensor. It participates in differentiation iff
    /// `tensor.requires_grad` is set.
    pub fn leaf(&mut self, mut tensor: Tensor) -> Var {
        let requires_grad = tensor.requires_grad;
        tensor.grad = None;
        self.push(tensor, Op::Leaf, requires_grad)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass w.r.t. `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shape(v).to_vec(), g.clone()).expect("grad shape matches value"))
    }

    /// Clears gradients so the tape can be differentiated again.
    pub fn zero_grad(&mut self) {
        self.grads.clear();
        self.consumed = false;
    }

    /// Names of the recorded operations in execution order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(value.numel(), value.shape().iter().product::<usize>());
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(&mut self, input: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[input]);
        self.push(out, op, rg)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let x = self.value(input);
        let k = self.value(kernel);
        let [n, c, h, w] = dims4("conv2d", x)?;
        let [f, kc, kh, kw] = dims4("conv2d", k)?;
        if kc != c {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: x.shape().to_vec(),
                right: k.shape().to_vec(),
            });
        }
        if self.shape(bias) != [f] {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                left: k.shape().to_vec(),
                right: self.shape(bias).to_vec(),
            });
        }
        if stride == 0 || kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: x.shape().to_vec(),
                right: k.shape().to_vec(),
            });
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        let patch = c * kh * kw;
        let npix = oh * ow;
        let pointwise = kh == 1 && kw == 1 && stride == 1 && padding == 0;

        let xd = x.data();
        let kd = k.data();
        let bd = self.value(bias).data();
        let mut out = vec![0.0; n * f * npix];
        let mut cols = if pointwise {
            Vec::new()
        } else {
            vec![0.0; patch * npix]
        };
        for b in 0..n {
            let img = &xd[b * c * h * w..(b + 1) * c * h * w];
            let dst = &mut out[b * f * npix..(b + 1) * f * npix];
            for (fi, row) in dst.chunks_exact_mut(npix).enumerate() {
                row.fill(bd[fi]);
            }
            if pointwise {
                gemm::nn(f, patch, npix, kd, img, dst);
            } else {
                im2col(img, c, h, w, kh, kw, stride, padding, oh, ow, &mut cols);
                gemm::nn(f, patch, npix, kd, &cols, dst);
            }
        }
        let out = Tensor::new(vec![n, f, oh, ow], out)?;
        let rg = self.rg(&[input, kernel, bias]);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
            rg,
        ))
    }

    /// 2×2 max pooling with stride 2.
    pub fn max_pool2d(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let [n, c, h, w] = dims4("max_pool2d", x)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::InvalidShape {
                op: "max_pool2d",
                shape: x.shape().to_vec(),
                reason: "spatial extents must be even".into(),
            });
        }
        let (oh, ow) = (h / 2, w / 2);
        let xd = x.data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let out = Tensor::new(vec![n, c, oh, ow], out)?;
        let rg = self.rg(&[input]);
        Ok(self.push(out, Op::MaxPool2 { input, argmax }, rg))
    }

    /// 2×2 average pooling with stride 2.
    pub fn avg_pool2d(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let [n, c, h, w] = dims4("avg_pool2d", x)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::InvalidShape {
                op: "avg_pool2d",
                shape: x.shape().to_vec(),
                reason: "spatial extents must be even".into(),
            });
        }
        let (oh, ow) = (h / 2, w / 2);
        let xd = x.data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let i = base + 2 * oy * w + 2 * ox;
                    out.push(0.25 * (xd[i] + xd[i + 1] + xd[i + w] + xd[i + w + 1]));
                }
            }
        }
        let out = Tensor::new(vec![n, c, oh, ow], out)?;
        let rg = self.rg(&[input]);
        Ok(self.push(out, Op::AvgPool2 { input }, rg))
    }

    /// Nearest-neighbour upsampling by a factor of 2.
    pub fn upsample_nearest(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let [n, c, h, w] = dims4("upsample_nearest", x)?;
        let (oh, ow) = (2 * h, 2 * w);
        let xd = x.data();
        let mut out = vec![0.0; n * c * oh * ow];
        for plane in 0..n * c {
            let src = &xd[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for y in 0..oh {
                let srow = &src[(y / 2) * w..(y / 2 + 1) * w];
                for (xo, o) in dst[y * ow..(y + 1) * ow].iter_mut().enumerate() {
                    *o = srow[xo / 2];
                }
            }
        }
        let out = Tensor::new(vec![n, c, oh, ow], out)?;
        let rg = self.rg(&[input]);
        Ok(self.push(out, Op::Upsample2 { input }, rg))
    }

    /// Concatenates two `[N,C,H,W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let [n, ca, h, w] = dims4("concat_channels", ta)?;
        let [nb, cb, hb, wb] = dims4("concat_channels", tb)?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * (ca + cb) * plane);
        for i in 0..n {
            out.extend_from_slice(&ta.data()[i * ca * plane..(i + 1) * ca * plane]);
            out.extend_from_slice(&tb.data()[i * cb * plane..(i + 1) * cb * plane]);
        }
        let out = Tensor::new(vec![n, ca + cb, h, w], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::ConcatChannels { a, b }, rg))
    }

    /// Multiplies every channel of `image` `[N,C,H,W]` by `mask` `[N,1,H,W]`.
    pub fn mask_channels(&mut self, image: Var, mask: Var) -> Result<Var> {
        let (ti, tm) = (self.value(image), self.value(mask));
        let [n, c, h, w] = dims4("mask_channels", ti)?;
        if tm.shape() != [n, 1, h, w] {
            return Err(Error::ShapeMismatch {
                op: "mask_channels",
                left: ti.shape().to_vec(),
                right: tm.shape().to_vec(),
            });
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(ti.numel());
        for i in 0..n {
            let m = &tm.data()[i * plane..(i + 1) * plane];
            for ch in 0..c {
                let src = &ti.data()[(i * c + ch) * plane..][..plane];
                out.extend(src.iter().zip(m).map(|(x, m)| x * m));
            }
        }
        let out = Tensor::new(ti.shape().to_vec(), out)?;
        let rg = self.rg(&[image, mask]);
        Ok(self.push(out, Op::MaskChannels { image, mask }, rg))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.unary(input, Op::Relu { input }, |v| v.max(0.0))
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.unary(input, Op::Sigmoid { input }, sigmoid)
    }

    pub fn exp(&mut self, input: Var) -> Var {
        self.unary(input, Op::Exp { input }, f64::exp)
    }

    /// Natural logarithm of `max(x, floor)`.
    pub fn log(&mut self, input: Var, floor: f64) -> Var {
        self.unary(input, Op::Log { input, floor }, |v| v.max(floor).ln())
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        self.unary(input, Op::Scale { input, factor }, |v| v * factor)
    }

    pub fn add_scalar(&mut self, input: Var, offset: f64) -> Var {
        self.unary(input, Op::AddScalar { input }, |v| v + offset)
    }

    pub fn neg(&mut self, input: Var) -> Var {
        self.scale(input, -1.0)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add { a, b }, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub { a, b }, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul { a, b }, |x, y| x * y)
    }

    /// `input [B,in] · weightᵀ [in,out] + bias [out]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let x = self.value(input);
        let wt = self.value(weight);
        let [rows, fan_in] = dims2("linear", x)?;
        let [fan_out, w_in] = dims2("linear", wt)?;
        if w_in != fan_in {
            return Err(Error::ShapeMismatch {
                op: "linear",
                left: x.shape().to_vec(),
                right: wt.shape().to_vec(),
            });
        }
        let bt = self.value(bias);
        if bt.shape() != [fan_out] {
            return Err(Error::ShapeMismatch {
                op: "linear bias",
                left: wt.shape().to_vec(),
                right: bt.shape().to_vec(),
            });
        }
        let mut out: Vec<f64> = (0..rows).flat_map(|_| bt.data().iter().copied()).collect();
        gemm::nt(rows, fan_in, fan_out, x.data(), wt.data(), &mut out);
        let out = Tensor::new(vec![rows, fan_out], out)?;
        let rg = self.rg(&[input, weight, bias]);
        Ok(self.push(
            out,
            Op::Linear {
                input,
                weight,
                bias,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(input).clone().with_requires_grad(false);
        let out = out.reshape(shape.to_vec())?;
        let rg = self.rg(&[input]);
        Ok(self.push(out, Op::Reshape { input }, rg))
    }

    /// `[N,C,H,W]` → `[N,C*H*W]`.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let shape = self.shape(input);
        let n = shape[0];
        let rest = shape[1..].iter().product();
        self.reshape(input, &[n, rest])
    }

    /// `[N,C,H,W]` → `[N,C]` spatial mean.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let [n, c, h, w] = dims4("global_avg_pool", x)?;
        let plane = h * w;
        let out = x
            .data()
            .chunks_exact(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        let out = Tensor::new(vec![n, c], out)?;
        let rg = self.rg(&[input]);
        Ok(self.push(out, Op::GlobalAvgPool { input }, rg))
    }

    /// Row-wise log-softmax over the last axis (a vector is one row).
    pub fn log_softmax(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let cols = *x.shape().last().expect("non-empty shape");
        let mut out = Vec::with_capacity(x.numel());
        for row in x.data().chunks_exact(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|v| v - lse));
        }
        let out = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.rg(&[input]);
        Ok(self.push(out, Op::LogSoftmax { input }, rg))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).data().iter().sum();
        let rg = self.rg(&[input]);
        self.push(Tensor::scalar(s), Op::Sum { input }, rg)
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let s = x.data().iter().sum::<f64>() / x.numel() as f64;
        let rg = self.rg(&[input]);
        self.push(Tensor::scalar(s), Op::Mean { input }, rg)
    }

    /// Mean binary cross-entropy with predictions clamped to
    /// `[BCE_EPS, 1 - BCE_EPS]`.
    pub fn bce_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, y) = (self.value(pred), self.value(target));
        same_shape("bce_loss", p, y)?;
        let total: f64 = p
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &y)| {
                let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum();
        let loss = total / p.numel() as f64;
        let rg = self.rg(&[pred, target]);
        Ok(self.push(Tensor::scalar(loss), Op::Bce { pred, target }, rg))
    }

    /// Picks `input[r, indices[r]]` from a `[R,C]` tensor.
    pub fn pick(&mut self, input: Var, indices: &[usize]) -> Result<Var> {
        let x = self.value(input);
        let [rows, cols] = dims2("pick", x)?;
        if indices.len() != rows {
            return Err(Error::ShapeMismatch {
                op: "pick",
                left: x.shape().to_vec(),
                right: vec![indices.len()],
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= cols) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: cols,
            });
        }
        let out = indices
            .iter()
            .enumerate()
            .map(|(r, &i)| x.data()[r * cols + i])
            .collect();
        let out = Tensor::new(vec![rows], out)?;
        let rg = self.rg(&[input]);
        Ok(self.push(
            out,
            Op::Pick {
                input,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Gathers rows of a `[R,D]` tensor.
    pub fn select_rows(&mut self, input: Var, rows: &[usize]) -> Result<Var> {
        let x = self.value(input);
        let [r, d] = dims2("select_rows", x)?;
        if rows.is_empty() || rows.iter().any(|&i| i >= r) {
            return Err(Error::InvalidShape {
                op: "select_rows",
                shape: x.shape().to_vec(),
                reason: format!("row selection {rows:?} out of range"),
            });
        }
        let mut out = Vec::with_capacity(rows.len() * d);
        for &i in rows {
            out.extend_from_slice(x.row(i));
        }
        let out = Tensor::new(vec![rows.len(), d], out)?;
        let rg = self.rg(&[input]);
        Ok(self.push(
            out,
            Op::SelectRows {
                input,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Per-class row means of a `[R,D]` tensor; `labels[r]` in `0..classes`.
    pub fn class_mean(&mut self, input: Var, labels: &[usize], classes: usize) -> Result<Var> {
        let x = self.value(input);
        let [r, d] = dims2("class_mean", x)?;
        if labels.len() != r {
            return Err(Error::ShapeMismatch {
                op: "class_mean",
                left: x.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        let mut counts = vec![0usize; classes];
        for &l in labels {
            if l >= classes {
                return Err(Error::LabelOutOfRange { label: l, classes });
            }
            counts[l] += 1;
        }
        if let Some(missing) = counts.iter().position(|&c| c == 0) {
            return Err(Error::Sampling(format!(
                "class {missing} has no support embeddings"
            )));
        }
        let mut out = vec![0.0; classes * d];
        for (row, &l) in labels.iter().enumerate() {
            for (o, v) in out[l * d..(l + 1) * d].iter_mut().zip(x.row(row)) {
                *o += v;
            }
        }
        for (l, &cnt) in counts.iter().enumerate() {
            for o in &mut out[l * d..(l + 1) * d] {
                *o /= cnt as f64;
            }
        }
        let out = Tensor::new(vec![classes, d], out)?;
        let rg = self.rg(&[input]);
        Ok(self.push(
            out,
            Op::ClassMean {
                input,
                labels: labels.to_vec(),
                counts,
            },
            rg,
        ))
    }

    fn pairwise_dims(&self, op: &'static str, query: Var, proto: Var) -> Result<[usize; 3]> {
        let [q, d] = dims2(op, self.value(query))?;
        let [k, dp] = dims2(op, self.value(proto))?;
        if d != dp {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape(query).to_vec(),
                right: self.shape(proto).to_vec(),
            });
        }
        Ok([q, k, d])
    }

    /// `[Q,D] × [K,D]` → `[Q,K]` Euclidean distances.
    pub fn euclidean_distance(&mut self, query: Var, proto: Var) -> Result<Var> {
        let [nq, nk, _] = self.pairwise_dims("euclidean_distance", query, proto)?;
        let (tq, tp) = (self.value(query), self.value(proto));
        let mut out = Vec::with_capacity(nq * nk);
        for i in 0..nq {
            for j in 0..nk {
                let s: f64 = tq
                    .row(i)
                    .iter()
                    .zip(tp.row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                out.push(s.sqrt());
            }
        }
        let out = Tensor::new(vec![nq, nk], out)?;
        let rg = self.rg(&[query, proto]);
        Ok(self.push(out, Op::PairwiseEuclidean { query, proto }, rg))
    }

    /// `[Q,D] × [K,D]` → `[Q,K]` of `1 - cos(q, p)`.
    pub fn cosine_distance(&mut self, query: Var, proto: Var) -> Result<Var> {
        let [nq, nk, _] = self.pairwise_dims("cosine_distance", query, proto)?;
        let (tq, tp) = (self.value(query), self.value(proto));
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let qn: Vec<f64> = (0..nq).map(|i| norm(tq.row(i))).collect();
        let pn: Vec<f64> = (0..nk).map(|j| norm(tp.row(j))).collect();
        if let Some(&bad) = qn.iter().chain(&pn).find(|&&n| n <= 1e-12) {
            return Err(Error::DegenerateNorm(bad));
        }
        let mut out = Vec::with_capacity(nq * nk);
        for (i, qi) in qn.iter().enumerate() {
            for (j, pj) in pn.iter().enumerate() {
                let dot: f64 = tq.row(i).iter().zip(tp.row(j)).map(|(a, b)| a * b).sum();
                out.push(1.0 - dot / (qi * pj));
            }
        }
        let out = Tensor::new(vec![nq, nk], out)?;
        let rg = self.rg(&[query, proto]);
        Ok(self.push(out, Op::PairwiseCosine { query, proto }, rg))
    }

    /// Propagates d`loss`/d(node) to every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        self.consumed = true;
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        grads.clear();
        grads.resize(nodes.len(), None);
        if !nodes[loss.0].requires_grad {
            return Ok(());
        }
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop(nodes, grads, node, &g);
            grads[i] = Some(g);
        }
        Ok(())
    }
}

/// Adds `f`'s contribution into the gradient slot of `v` if it needs one.
fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
    f(slot);
}

fn backprop(nodes: &[Node], grads: &mut [Option<Vec<f64>>], node: &Node, g: &[f64]) {
    let val = |v: Var| &nodes[v.0].value;
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        &Op::Conv2d {
            input,
            kernel,
            bias,
            stride,
            padding,
        } => {
            let x = val(input);
            let k = val(kernel);
            let [n, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
            let [f, _, kh, kw] = [k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]];
            let [oh, ow] = [out.shape()[2], out.shape()[3]];
            let npix = oh * ow;
            let patch = c * kh * kw;
            let pointwise = kh == 1 && kw == 1 && stride == 1 && padding == 0;
            let img_len = c * h * w;

            accumulate(nodes, grads, bias, |db| {
                for b in 0..n {
                    for (fi, row) in g[b * f * npix..(b + 1) * f * npix]
                        .chunks_exact(npix)
                        .enumerate()
                    {
                        db[fi] += row.iter().sum::<f64>();
                    }
                }
            });
            accumulate(nodes, grads, kernel, |dk| {
                let mut cols = vec![0.0; if pointwise { 0 } else { patch * npix }];
                for b in 0..n {
                    let img = &x.data()[b * img_len..(b + 1) * img_len];
                    let gb = &g[b * f * npix..(b + 1) * f * npix];
                    if pointwise {
                        gemm::nt(f, npix, patch, gb, img, dk);
                    } else {
                        im2col(img, c, h, w, kh, kw, stride, padding, oh, ow, &mut cols);
                        gemm::nt(f, npix, patch, gb, &cols, dk);
                    }
                }
            });
            accumulate(nodes, grads, input, |dx| {
                let mut dcols = vec![0.0; patch * npix];
                for b in 0..n {
                    let gb = &g[b * f * npix..(b + 1) * f * npix];
                    let dimg = &mut dx[b * img_len..(b + 1) * img_len];
                    if pointwise {
                        gemm::tn(patch, f, npix, k.data(), gb, dimg);
                    } else {
                        dcols.fill(0.0);
                        gemm::tn(patch, f, npix, k.data(), gb, &mut dcols);
                        col2im(&dcols, c, h, w, kh, kw, stride, padding, oh, ow, dimg);
                    }
                }
            });
        }
        Op::MaxPool2 { input, argmax } => {
            accumulate(nodes, grads, *input, |dx| {
                for (&src, gv) in argmax.iter().zip(g) {
                    dx[src] += gv;
                }
            });
        }
        &Op::AvgPool2 { input } => {
            let s = val(input).shape();
            let (h, w) = (s[2], s[3]);
            let (oh, ow) = (h / 2, w / 2);
            accumulate(nodes, grads, input, |dx| {
                for plane in 0..s[0] * s[1] {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = 0.25 * g[(plane * oh + oy) * ow + ox];
                            let i = plane * h * w + 2 * oy * w + 2 * ox;
                            dx[i] += gv;
                            dx[i + 1] += gv;
                            dx[i + w] += gv;
                            dx[i + w + 1] += gv;
                        }
                    }
                }
            });
        }
        &Op::Upsample2 { input } => {
            let s = val(input).shape();
            let (h, w) = (s[2], s[3]);
            let ow = 2 * w;
            accumulate(nodes, grads, input, |dx| {
                for plane in 0..s[0] * s[1] {
                    let gp = &g[plane * 4 * h * w..(plane + 1) * 4 * h * w];
                    for y in 0..2 * h {
                        for xo in 0..ow {
                            dx[plane * h * w + (y / 2) * w + xo / 2] += gp[y * ow + xo];
                        }
                    }
                }
            });
        }
        &Op::ConcatChannels { a, b } => {
            let (sa, sb) = (val(a).shape(), val(b).shape());
            let plane = sa[2] * sa[3];
            let (la, lb) = (sa[1] * plane, sb[1] * plane);
            accumulate(nodes, grads, a, |da| {
                for i in 0..sa[0] {
                    let src = &g[i * (la + lb)..i * (la + lb) + la];
                    for (d, s) in da[i * la..(i + 1) * la].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            });
            accumulate(nodes, grads, b, |db| {
                for i in 0..sa[0] {
                    let src = &g[i * (la + lb) + la..(i + 1) * (la + lb)];
                    for (d, s) in db[i * lb..(i + 1) * lb].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            });
        }
        &Op::MaskChannels { image, mask } => {
            let (ti, tm) = (val(image), val(mask));
            let s = ti.shape();
            let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
            accumulate(nodes, grads, image, |di| {
                for i in 0..n {
                    let m = &tm.data()[i * plane..(i + 1) * plane];
                    for ch in 0..c {
                        let off = (i * c + ch) * plane;
                        for p in 0..plane {
                            di[off + p] += g[off + p] * m[p];
                        }
                    }
                }
            });
            accumulate(nodes, grads, mask, |dm| {
                for i in 0..n {
                    for ch in 0..c {
                        let off = (i * c + ch) * plane;
                        for p in 0..plane {
                            dm[i * plane + p] += g[off + p] * ti.data()[off + p];
                        }
                    }
                }
            });
        }
        &Op::Relu { input } => {
            let x = val(input).data();
            accumulate(nodes, grads, input, |dx| {
                for i in 0..dx.len() {
                    if x[i] > 0.0 {
                        dx[i] += g[i];
                    }
                }
            });
        }
        &Op::Sigmoid { input } => {
            let y = out.data();
            accumulate(nodes, grads, input, |dx| {
                for i in 0..dx.len() {
                    dx[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            });
        }
        &Op::Exp { input } => {
            let y = out.data();
            accumulate(nodes, grads, input, |dx| {
                for i in 0..dx.len() {
                    dx[i] += g[i] * y[i];
                }
            });
        }
        &Op::Log { input, floor } => {
            let x = val(input).data();
            accumulate(nodes, grads, input, |dx| {
                for i in 0..dx.len() {
                    if x[i] > floor {
                        dx[i] += g[i] / x[i];
                    }
                }
            });
        }
        &Op::Add { a, b } => {
            accumulate(nodes, grads, a, |da| da.iter_mut().zip(g).for_each(|(d, v)| *d += v));
            accumulate(nodes, grads, b, |db| db.iter_mut().zip(g).for_each(|(d, v)| *d += v));
        }
        &Op::Sub { a, b } => {
            accumulate(nodes, grads, a, |da| da.iter_mut().zip(g).for_each(|(d, v)| *d += v));
            accumulate(nodes, grads, b, |db| db.iter_mut().zip(g).for_each(|(d, v)| *d -= v));
        }
        &Op::Mul { a, b } => {
            let (xa, xb) = (val(a).data(), val(b).data());
            accumulate(nodes, grads, a, |da| {
                for i in 0..da.len() {
                    da[i] += g[i] * xb[i];
                }
            });
            accumulate(nodes, grads, b, |db| {
                for i in 0..db.len() {
                    db[i] += g[i] * xa[i];
                }
            });
        }
        &Op::Scale { input, factor } => {
            accumulate(nodes, grads, input, |dx| {
                dx.iter_mut().zip(g).for_each(|(d, v)| *d += v * factor)
            });
        }
        &Op::AddScalar { input } | &Op::Reshape { input } => {
            accumulate(nodes, grads, input, |dx| {
                dx.iter_mut().zip(g).for_each(|(d, v)| *d += v)
            });
        }
        &Op::Linear {
            input,
            weight,
            bias,
        } => {
            let x = val(input);
            let wt = val(weight);
            let (rows, fan_in) = (x.shape()[0], x.shape()[1]);
            let fan_out = wt.shape()[0];
            accumulate(nodes, grads, bias, |db| {
                for row in g.chunks_exact(fan_out) {
                    db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
            });
            accumulate(nodes, grads, weight, |dw| {
                gemm::tn(fan_out, rows, fan_in, g, x.data(), dw);
            });
            accumulate(nodes, grads, input, |dx| {
                gemm::nn(rows, fan_out, fan_in, g, wt.data(), dx);
            });
        }
        &Op::GlobalAvgPool { input } => {
            let s = val(input).shape();
            let plane = s[2] * s[3];
            accumulate(nodes, grads, input, |dx| {
                for (p, chunk) in dx.chunks_exact_mut(plane).enumerate() {
                    let gv = g[p] / plane as f64;
                    chunk.iter_mut().for_each(|d| *d += gv);
                }
            });
        }
        &Op::LogSoftmax { input } => {
            let cols = *out.shape().last().unwrap();
            accumulate(nodes, grads, input, |dx| {
                for ((drow, grow), yrow) in dx
                    .chunks_exact_mut(cols)
                    .zip(g.chunks_exact(cols))
                    .zip(out.data().chunks_exact(cols))
                {
                    let gsum: f64 = grow.iter().sum();
                    for j in 0..cols {
                        drow[j] += grow[j] - yrow[j].exp() * gsum;
                    }
                }
            });
        }
        &Op::Sum { input } => {
            accumulate(nodes, grads, input, |dx| dx.iter_mut().for_each(|d| *d += g[0]));
        }
        &Op::Mean { input } => {
            let n = val(input).numel() as f64;
            accumulate(nodes, grads, input, |dx| {
                dx.iter_mut().for_each(|d| *d += g[0] / n)
            });
        }
        &Op::Bce { pred, target } => {
            let (p, y) = (val(pred).data(), val(target).data());
            let n = p.len() as f64;
            accumulate(nodes, grads, pred, |dp| {
                for i in 0..p.len() {
                    if p[i] < BCE_EPS || p[i] > 1.0 - BCE_EPS {
                        continue;
                    }
                    dp[i] += g[0] * (-y[i] / p[i] + (1.0 - y[i]) / (1.0 - p[i])) / n;
                }
            });
            accumulate(nodes, grads, target, |dy| {
                for i in 0..p.len() {
                    let pc = p[i].clamp(BCE_EPS, 1.0 - BCE_EPS);
                    dy[i] -= g[0] * (pc.ln() - (1.0 - pc).ln()) / n;
                }
            });
        }
        Op::Pick { input, indices } => {
            let cols = val(*input).shape()[1];
            accumulate(nodes, grads, *input, |dx| {
                for (r, &i) in indices.iter().enumerate() {
                    dx[r * cols + i] += g[r];
                }
            });
        }
        Op::SelectRows { input, rows } => {
            let d = val(*input).shape()[1];
            accumulate(nodes, grads, *input, |dx| {
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..d {
                        dx[r * d + j] += g[k * d + j];
                    }
                }
            });
        }
        Op::ClassMean {
            input,
            labels,
            counts,
        } => {
            let d = val(*input).shape()[1];
            accumulate(nodes, grads, *input, |dx| {
                for (r, &l) in labels.iter().enumerate() {
                    let inv = 1.0 / counts[l] as f64;
                    for j in 0..d {
                        dx[r * d + j] += g[l * d + j] * inv;
                    }
                }
            });
        }
        &Op::PairwiseEuclidean { query, proto } => {
            let (tq, tp) = (val(query), val(proto));
            let (nq, d) = (tq.shape()[0], tq.shape()[1]);
            let nk = tp.shape()[0];
            let dist = out.data();
            // coef[i,j] = g / d, zero where the distance vanishes
            let coef: Vec<f64> = (0..nq * nk)
                .map(|ij| if dist[ij] > 0.0 { g[ij] / dist[ij] } else { 0.0 })
                .collect();
            accumulate(nodes, grads, query, |dq| {
                for i in 0..nq {
                    for j in 0..nk {
                        let cf = coef[i * nk + j];
                        for t in 0..d {
                            dq[i * d + t] += cf * (tq.row(i)[t] - tp.row(j)[t]);
                        }
                    }
                }
            });
            accumulate(nodes, grads, proto, |dp| {
                for i in 0..nq {
                    for j in 0..nk {
                        let cf = coef[i * nk + j];
                        for t in 0..d {
                            dp[j * d + t] -= cf * (tq.row(i)[t] - tp.row(j)[t]);
                        }
                    }
                }
            });
        }
        &Op::PairwiseCosine { query, proto } => {
            let (tq, tp) = (val(query), val(proto));
            let (nq, d) = (tq.shape()[0], tq.shape()[1]);
            let nk = tp.shape()[0];
            let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let qn: Vec<f64> = (0..nq).map(|i| norm(tq.row(i))).collect();
            let pn: Vec<f64> = (0..nk).map(|j| norm(tp.row(j))).collect();
            let sim = |i: usize, j: usize| 1.0 - out.data()[i * nk + j];
            // d(1 - s)/dq = -(p / (|q||p|) - s q / |q|^2)
            accumulate(nodes, grads, query, |dq| {
                for i in 0..nq {
                    for j in 0..nk {
                        let gv = g[i * nk + j];
                        let s = sim(i, j);
                        let a = 1.0 / (qn[i] * pn[j]);
                        let b = s / (qn[i] * qn[i]);
                        for t in 0..d {
                            dq[i * d + t] -= gv * (a * tp.row(j)[t] - b * tq.row(i)[t]);
                        }
                    }
                }
            });
            accumulate(nodes, grads, proto, |dp| {
                for i in 0..nq {
                    for j in 0..nk {
                        let gv = g[i * nk + j];
                        let s = sim(i, j);
                        let a = 1.0 / (qn[i] * pn[j]);
                        let b = s / (pn[j] * pn[j]);
                        for t in 0..d {
                            dp[j * d + t] -= gv * (a * tq.row(i)[t] - b * tp.row(j)[t]);
                        }
                    }
                }
            });
        }
    }
}
