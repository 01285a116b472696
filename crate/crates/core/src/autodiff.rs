//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its output value and enough metadata to
//! run its vector-Jacobian product. Nodes are appended in execution order,
//! so walking the tape backwards is a valid topological order.

use std::sync::Arc;

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, CtError, Result};
use crate::tensor::{gemm, Real, Shape, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Batch statistics produced by a training-mode normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Clone, Copy, Debug)]
struct AxisTap {
    i0: usize,
    i1: usize,
    w0: f64,
    w1: f64,
}

fn axis_taps(in_len: usize, out_len: usize) -> Vec<AxisTap> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let l = src - i0 as f64;
            AxisTap { i0, i1, w0: 1.0 - l, w1: l }
        })
        .collect()
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MixRows {
        e: Var,
        weights: Arc<[T]>,
    },
    Gather {
        src: Var,
        index: Arc<[u32]>,
    },
    ToColumns {
        x: Var,
    },
    BatchNorm {
        x: Var,
        mean: Vec<T>,
        sigma: Vec<T>,
        eps: T,
        batch_stats: bool,
    },
    ChannelAffine {
        x: Var,
        gamma: Var,
        beta: Var,
    },
    Modulate {
        x: Var,
        gamma: Var,
        beta: Var,
    },
    LeakyRelu {
        x: Var,
        slope: T,
    },
    Resize {
        x: Var,
    },
    Concat {
        parts: Vec<Var>,
    },
    Select {
        parts: Vec<Var>,
        choice: Arc<[u8]>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: T,
    },
    Sum {
        x: Var,
    },
    Softmax {
        x: Var,
    },
    Precomputed {
        x: Var,
        grad: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Operation tape. One graph per forward/backward pass.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, oh: usize, ow: usize) -> Vec<T> {
    let p = oh * ow;
    let mut cols = vec![T::zero(); c * k * k * p];
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(cols: &[T], dx: &mut [T], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, oh: usize, ow: usize) {
    let p = oh * ow;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = ci * h * w + iy as usize * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dx[base + ix as usize] = dx[base + ix as usize] + src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Bilinear resampling with half-pixel centers on a raw N×C×H×W buffer.
pub fn resize_bilinear_raw<T: Real>(x: &[T], s: Shape, oh: usize, ow: usize) -> Vec<T> {
    if (oh, ow) == (s.h, s.w) {
        return x.to_vec();
    }
    let ty = axis_taps(s.h, oh);
    let tx = axis_taps(s.w, ow);
    let mut out = Vec::with_capacity(s.n * s.c * oh * ow);
    for plane in x.chunks_exact(s.h * s.w) {
        for a in &ty {
            let r0 = &plane[a.i0 * s.w..(a.i0 + 1) * s.w];
            let r1 = &plane[a.i1 * s.w..(a.i1 + 1) * s.w];
            let (wy0, wy1) = (T::of(a.w0), T::of(a.w1));
            for b in &tx {
                let (wx0, wx1) = (T::of(b.w0), T::of(b.w1));
                let top = wx0 * r0[b.i0] + wx1 * r0[b.i1];
                let bot = wx0 * r1[b.i0] + wx1 * r1[b.i1];
                out.push(wy0 * top + wy1 * bot);
            }
        }
    }
    out
}

fn leaky<T: Real>(v: T, slope: T) -> T {
    if v >= T::zero() {
        v
    } else {
        v * slope
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Constant leaf.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a node after [`Graph::backward`]; zeros when the
    /// node was never reached.
    pub fn grad(&self, v: Var) -> Tensor<T> {
        let node = &self.nodes[v.0];
        match &node.grad {
            Some(g) => Tensor::from_vec(node.value.shape(), g.clone()).expect("grad shape"),
            None => Tensor::zeros(node.value.shape()),
        }
    }

    // ---------------------------------------------------------------- ops

    /// Cross-correlation with zero padding. `w` is `OutC×InC×k×k`, `b` is `OutC×1×1×1`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if ws.c != xs.c || ws.h != ws.w || stride == 0 {
            return Err(shape_err("conv2d", xs, ws));
        }
        if let Some(b) = b {
            let bs = self.shape(b);
            if bs.numel() != ws.n {
                return Err(shape_err("conv2d bias", ws, bs));
            }
        }
        let k = ws.h;
        if xs.h + 2 * pad < k || xs.w + 2 * pad < k {
            return Err(shape_err("conv2d", xs, ws));
        }
        let oh = (xs.h + 2 * pad - k) / stride + 1;
        let ow = (xs.w + 2 * pad - k) / stride + 1;
        let os = Shape::new(xs.n, ws.n, oh, ow);
        let p = oh * ow;
        let mut out = vec![T::zero(); os.numel()];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let ck = xs.c * k * k;
            let direct = k == 1 && stride == 1 && pad == 0;
            for n in 0..xs.n {
                let xn = &xv[n * xs.c * xs.plane()..(n + 1) * xs.c * xs.plane()];
                let on = &mut out[n * ws.n * p..(n + 1) * ws.n * p];
                if direct {
                    gemm(false, false, ws.n, p, ck, wv, xn, on, false);
                } else {
                    let cols = im2col(xn, xs.c, xs.h, xs.w, k, stride, pad, oh, ow);
                    gemm(false, false, ws.n, p, ck, wv, &cols, on, false);
                }
                if let Some(b) = b {
                    let bv = self.value(b).data();
                    for (oc, row) in on.chunks_exact_mut(p).enumerate() {
                        let bb = bv[oc];
                        row.iter_mut().for_each(|v| *v = *v + bb);
                    }
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(Tensor::from_vec(os, out)?, Op::Conv2d { x, w, b, stride, pad }, &inputs))
    }

    /// `y = x·wᵀ + b` for `x: N×D×1×1`, `w: M×D×1×1`, `b: M×1×1×1`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.h != 1 || xs.w != 1 || ws.h != 1 || ws.w != 1 || xs.c != ws.c {
            return Err(shape_err("linear", xs, ws));
        }
        let (n, d, m) = (xs.n, xs.c, ws.n);
        let mut out = vec![T::zero(); n * m];
        gemm(false, true, n, m, d, self.value(x).data(), self.value(w).data(), &mut out, false);
        if let Some(b) = b {
            let bv = self.value(b).data();
            if bv.len() != m {
                return Err(shape_err("linear bias", ws, self.shape(b)));
            }
            for row in out.chunks_exact_mut(m) {
                row.iter_mut().zip(bv).for_each(|(o, &bb)| *o = *o + bb);
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(Tensor::from_vec(Shape::matrix(n, m), out)?, Op::Linear { x, w, b }, &inputs))
    }

    /// Rows `weights · e` for a constant `M×K` weight matrix and `e: K×D×1×1`.
    pub fn mix_rows(&mut self, e: Var, weights: Arc<[T]>, rows: usize) -> Result<Var> {
        let es = self.shape(e);
        if es.h != 1 || es.w != 1 || weights.len() != rows * es.n {
            return Err(shape_err("mix_rows", es, (rows, weights.len())));
        }
        let mut out = vec![T::zero(); rows * es.c];
        gemm(false, false, rows, es.c, es.n, &weights, self.value(e).data(), &mut out, false);
        Ok(self.push(Tensor::from_vec(Shape::matrix(rows, es.c), out)?, Op::MixRows { e, weights }, &[e]))
    }

    /// Scatters rows of `src: M×C×1×1` to an `N×C×H×W` map, `index[(n·H+y)·W+x]` naming the row.
    pub fn gather_columns(&mut self, src: Var, index: Arc<[u32]>, n: usize, h: usize, w: usize) -> Result<Var> {
        let ss = self.shape(src);
        if ss.h != 1 || ss.w != 1 || index.len() != n * h * w {
            return Err(shape_err("gather_columns", ss, (n, h, w)));
        }
        if index.iter().any(|&i| i as usize >= ss.n) {
            return Err(CtError::InvalidArgument("gather index out of range".into()));
        }
        let c = ss.c;
        let os = Shape::new(n, c, h, w);
        let sv = self.value(src).data();
        let mut out = vec![T::zero(); os.numel()];
        let plane = h * w;
        for ni in 0..n {
            for p in 0..plane {
                let row = index[ni * plane + p] as usize;
                for ci in 0..c {
                    out[(ni * c + ci) * plane + p] = sv[row * c + ci];
                }
            }
        }
        Ok(self.push(Tensor::from_vec(os, out)?, Op::Gather { src, index }, &[src]))
    }

    /// Reorders `N×C×H×W` into one row per pixel: `(N·H·W)×C×1×1`.
    pub fn to_columns(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let xv = self.value(x).data();
        let plane = s.plane();
        let mut out = vec![T::zero(); s.numel()];
        for n in 0..s.n {
            for c in 0..s.c {
                for p in 0..plane {
                    out[(n * plane + p) * s.c + c] = xv[(n * s.c + c) * plane + p];
                }
            }
        }
        Ok(self.push(
            Tensor::from_vec(Shape::matrix(s.n * plane, s.c), out)?,
            Op::ToColumns { x },
            &[x],
        ))
    }

    /// Per-channel normalization `(x - mu) / (sigma + eps)`.
    ///
    /// With `running = None` the batch statistics over `(N, H, W)` are used and
    /// returned; otherwise the supplied `(mean, var)` are used as constants.
    pub fn batch_norm(&mut self, x: Var, eps: T, running: Option<(&[T], &[T])>) -> Result<(Var, Option<BatchStats<T>>)> {
        let s = self.shape(x);
        let plane = s.plane();
        let count = s.n * plane;
        if count == 0 {
            return Err(CtError::InvalidArgument("batch_norm over an empty batch".into()));
        }
        let xv = self.value(x).data();
        let (mean, var, batch_stats) = match running {
            Some((m, v)) => {
                if m.len() != s.c || v.len() != s.c {
                    return Err(shape_err("batch_norm stats", s, m.len()));
                }
                (m.to_vec(), v.to_vec(), false)
            }
            None => {
                let (m, v) = channel_stats(xv, s);
                (m, v, true)
            }
        };
        let sigma: Vec<T> = var.iter().map(|v| v.max(T::zero()).sqrt()).collect();
        let mut out = vec![T::zero(); s.numel()];
        for n in 0..s.n {
            for c in 0..s.c {
                let inv = T::one() / (sigma[c] + eps);
                let base = (n * s.c + c) * plane;
                for i in base..base + plane {
                    out[i] = (xv[i] - mean[c]) * inv;
                }
            }
        }
        let stats = batch_stats.then(|| BatchStats {
            mean: mean.clone(),
            var: var.clone(),
        });
        let v = self.push(
            Tensor::from_vec(s, out)?,
            Op::BatchNorm {
                x,
                mean,
                sigma,
                eps,
                batch_stats,
            },
            &[x],
        );
        Ok((v, stats))
    }

    /// `x·gamma[c] + beta[c]` with `gamma, beta: C×1×1×1`.
    pub fn channel_affine(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let s = self.shape(x);
        if self.shape(gamma).numel() != s.c || self.shape(beta).numel() != s.c {
            return Err(shape_err("channel_affine", s, self.shape(gamma)));
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let plane = s.plane();
        let out: Vec<T> = xv
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = (i / plane) % s.c;
                v * g[c] + b[c]
            })
            .collect();
        Ok(self.push(Tensor::from_vec(s, out)?, Op::ChannelAffine { x, gamma, beta }, &[x, gamma, beta]))
    }

    /// Element-wise `x ⊙ gamma + beta`, all three of identical shape.
    pub fn modulate(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let s = self.shape(x);
        if self.shape(gamma) != s || self.shape(beta) != s {
            return Err(shape_err("modulate", s, self.shape(gamma)));
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let out: Vec<T> = xv.iter().zip(g).zip(b).map(|((&v, &g), &b)| v * g + b).collect();
        Ok(self.push(Tensor::from_vec(s, out)?, Op::Modulate { x, gamma, beta }, &[x, gamma, beta]))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Result<Var> {
        let out = self.value(x).map(|v| leaky(v, slope));
        Ok(self.push(out, Op::LeakyRelu { x, slope }, &[x]))
    }

    /// Bilinear resampling, half-pixel centers, no corner alignment.
    pub fn resize_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        if oh == 0 || ow == 0 {
            return Err(CtError::InvalidArgument(format!("resize to zero size {oh}×{ow}")));
        }
        let s = self.shape(x);
        let out = resize_bilinear_raw(self.value(x).data(), s, oh, ow);
        Ok(self.push(Tensor::from_vec(Shape::new(s.n, s.c, oh, ow), out)?, Op::Resize { x }, &[x]))
    }

    /// Channel concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| CtError::InvalidArgument("empty concat".into()))?);
        let mut c = 0;
        for &p in parts {
            let s = self.shape(p);
            if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
                return Err(shape_err("concat", first, s));
            }
            c += s.c;
        }
        let os = Shape::new(first.n, c, first.h, first.w);
        let mut out = Vec::with_capacity(os.numel());
        for n in 0..first.n {
            for &p in parts {
                let t = self.value(p);
                let len = t.shape().c * t.shape().plane();
                out.extend_from_slice(&t.data()[n * len..(n + 1) * len]);
            }
        }
        Ok(self.push(Tensor::from_vec(os, out)?, Op::Concat { parts: parts.to_vec() }, parts))
    }

    /// Per-pixel selection among equal-shaped tensors; `choice[(n·H+y)·W+x]` is the part index.
    pub fn select(&mut self, parts: &[Var], choice: Arc<[u8]>) -> Result<Var> {
        let s = self.shape(*parts.first().ok_or_else(|| CtError::InvalidArgument("empty select".into()))?);
        for &p in parts {
            if self.shape(p) != s {
                return Err(shape_err("select", s, self.shape(p)));
            }
        }
        if choice.len() != s.n * s.plane() || choice.iter().any(|&c| c as usize >= parts.len()) {
            return Err(CtError::InvalidArgument("select choice map does not match".into()));
        }
        let plane = s.plane();
        let mut out = vec![T::zero(); s.numel()];
        for n in 0..s.n {
            for p in 0..plane {
                let src = self.value(parts[choice[n * plane + p] as usize]).data();
                for c in 0..s.c {
                    let i = (n * s.c + c) * plane + p;
                    out[i] = src[i];
                }
            }
        }
        Ok(self.push(
            Tensor::from_vec(s, out)?,
            Op::Select {
                parts: parts.to_vec(),
                choice,
            },
            parts,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.shape(a);
        if self.shape(b) != s {
            return Err(shape_err("add", s, self.shape(b)));
        }
        let out: Vec<T> = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        Ok(self.push(Tensor::from_vec(s, out)?, Op::Add { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.shape(a);
        if self.shape(b) != s {
            return Err(shape_err("mul", s, self.shape(b)));
        }
        let out: Vec<T> = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        Ok(self.push(Tensor::from_vec(s, out)?, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let out = self.value(x).map(|v| v * c);
        Ok(self.push(out, Op::Scale { x, c }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).sum();
        Ok(self.push(Tensor::scalar(v), Op::Sum { x }, &[x]))
    }

    /// Softmax along the channel axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let xv = self.value(x).data();
        let plane = s.plane();
        let mut out = vec![T::zero(); s.numel()];
        let mut buf = vec![T::zero(); s.c];
        for n in 0..s.n {
            for p in 0..plane {
                for c in 0..s.c {
                    buf[c] = xv[(n * s.c + c) * plane + p];
                }
                softmax_in_place(&mut buf);
                for c in 0..s.c {
                    out[(n * s.c + c) * plane + p] = buf[c];
                }
            }
        }
        Ok(self.push(Tensor::from_vec(s, out)?, Op::Softmax { x }, &[x]))
    }

    /// Scalar node whose value and gradient w.r.t. `x` were computed by the caller.
    pub fn precomputed(&mut self, x: Var, value: T, grad: Vec<T>) -> Result<Var> {
        if grad.len() != self.shape(x).numel() {
            return Err(shape_err("precomputed", self.shape(x), grad.len()));
        }
        if !value.is_finite() {
            return Err(CtError::NonFinite("loss value".into()));
        }
        Ok(self.push(Tensor::scalar(value), Op::Precomputed { x, grad }, &[x]))
    }

    // ----------------------------------------------------------- backward

    /// Reverse sweep from a scalar node.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].value.numel() != 1 {
            return Err(CtError::InvalidArgument(format!(
                "backward from non-scalar {:?}",
                self.shape(root)
            )));
        }
        if !self.nodes[root.0].value.item().is_finite() {
            return Err(CtError::NonFinite("loss".into()));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[root.0].grad = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = node.grad.take() else { continue };
            backprop(before, &node.op, &node.value, &g);
            node.grad = Some(g);
        }
        Ok(())
    }
}

fn softmax_in_place<T: Real>(buf: &mut [T]) {
    let m = buf.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for v in buf.iter_mut() {
        *v = (*v - m).exp();
        z = z + *v;
    }
    for v in buf.iter_mut() {
        *v = *v / z;
    }
}

/// Softmax of a vector; max-shifted for stability.
pub fn softmax<T: Real>(x: &[T]) -> Vec<T> {
    let mut out = x.to_vec();
    softmax_in_place(&mut out);
    out
}

/// Population mean and variance per channel over `(N, H, W)`.
pub fn channel_stats<T: Real>(xv: &[T], s: Shape) -> (Vec<T>, Vec<T>) {
    let plane = s.plane();
    let count = T::of((s.n * plane) as f64);
    let mut mean = vec![T::zero(); s.c];
    let mut var = vec![T::zero(); s.c];
    for c in 0..s.c {
        let mut acc = T::zero();
        for n in 0..s.n {
            let base = (n * s.c + c) * plane;
            acc = acc + xv[base..base + plane].iter().copied().sum::<T>();
        }
        mean[c] = acc / count;
        let mut sq = T::zero();
        for n in 0..s.n {
            let base = (n * s.c + c) * plane;
            sq = sq
                + xv[base..base + plane]
                    .iter()
                    .map(|&v| (v - mean[c]) * (v - mean[c]))
                    .sum::<T>();
        }
        var[c] = sq / count;
    }
    (mean, var)
}

fn accumulate<T: Real>(nodes: &mut [Node<T>], v: Var, contrib: &[T]) {
    let node = &mut nodes[v.0];
    if !node.requires_grad {
        return;
    }
    match &mut node.grad {
        Some(g) => g.iter_mut().zip(contrib).for_each(|(a, &b)| *a = *a + b),
        None => node.grad = Some(contrib.to_vec()),
    }
}

fn backprop<T: Real>(nodes: &mut [Node<T>], op: &Op<T>, out: &Tensor<T>, g: &[T]) {
    let needs = |nodes: &[Node<T>], v: Var| nodes[v.0].requires_grad;
    match op {
        Op::Leaf => {}
        Op::Conv2d { x, w, b, stride, pad } => {
            let xs = nodes[x.0].value.shape();
            let ws = nodes[w.0].value.shape();
            let os = out.shape();
            let (k, p) = (ws.h, os.plane());
            let ck = xs.c * k * k;
            let direct = k == 1 && *stride == 1 && *pad == 0;
            let want_x = needs(nodes, *x);
            let want_w = needs(nodes, *w);
            let mut dw = vec![T::zero(); ws.numel()];
            let mut dx = vec![T::zero(); if want_x { xs.numel() } else { 0 }];
            let mut dcols = vec![T::zero(); if want_x && !direct { ck * p } else { 0 }];
            {
                let xv = nodes[x.0].value.data();
                let wv = nodes[w.0].value.data();
                let xlen = xs.c * xs.plane();
                for n in 0..xs.n {
                    let gn = &g[n * ws.n * p..(n + 1) * ws.n * p];
                    let xn = &xv[n * xlen..(n + 1) * xlen];
                    if direct {
                        if want_w {
                            gemm(false, true, ws.n, ck, p, gn, xn, &mut dw, true);
                        }
                        if want_x {
                            gemm(true, false, ck, p, ws.n, wv, gn, &mut dx[n * xlen..(n + 1) * xlen], true);
                        }
                    } else {
                        if want_w {
                            let cols = im2col(xn, xs.c, xs.h, xs.w, k, *stride, *pad, os.h, os.w);
                            gemm(false, true, ws.n, ck, p, gn, &cols, &mut dw, true);
                        }
                        if want_x {
                            gemm(true, false, ck, p, ws.n, wv, gn, &mut dcols, false);
                            col2im(&dcols, &mut dx[n * xlen..(n + 1) * xlen], xs.c, xs.h, xs.w, k, *stride, *pad, os.h, os.w);
                        }
                    }
                }
            }
            if let Some(b) = b {
                if needs(nodes, *b) {
                    let mut db = vec![T::zero(); ws.n];
                    for n in 0..xs.n {
                        for (oc, d) in db.iter_mut().enumerate() {
                            let base = (n * ws.n + oc) * p;
                            *d = *d + g[base..base + p].iter().copied().sum::<T>();
                        }
                    }
                    accumulate(nodes, *b, &db);
                }
            }
            if want_w {
                accumulate(nodes, *w, &dw);
            }
            if want_x {
                accumulate(nodes, *x, &dx);
            }
        }
        Op::Linear { x, w, b } => {
            let xs = nodes[x.0].value.shape();
            let ws = nodes[w.0].value.shape();
            let (n, d, m) = (xs.n, xs.c, ws.n);
            if needs(nodes, *x) {
                let mut dx = vec![T::zero(); n * d];
                gemm(false, false, n, d, m, g, nodes[w.0].value.data(), &mut dx, false);
                accumulate(nodes, *x, &dx);
            }
            if needs(nodes, *w) {
                let mut dw = vec![T::zero(); m * d];
                gemm(true, false, m, d, n, g, nodes[x.0].value.data(), &mut dw, false);
                accumulate(nodes, *w, &dw);
            }
            if let Some(b) = b {
                if needs(nodes, *b) {
                    let mut db = vec![T::zero(); m];
                    for row in g.chunks_exact(m) {
                        db.iter_mut().zip(row).for_each(|(a, &v)| *a = *a + v);
                    }
                    accumulate(nodes, *b, &db);
                }
            }
        }
        Op::MixRows { e, weights } => {
            if needs(nodes, *e) {
                let es = nodes[e.0].value.shape();
                let rows = weights.len() / es.n;
                let mut de = vec![T::zero(); es.numel()];
                gemm(true, false, es.n, es.c, rows, weights, g, &mut de, false);
                accumulate(nodes, *e, &de);
            }
        }
        Op::Gather { src, index } => {
            if needs(nodes, *src) {
                let ss = nodes[src.0].value.shape();
                let os = out.shape();
                let plane = os.plane();
                let c = ss.c;
                let mut ds = vec![T::zero(); ss.numel()];
                for ni in 0..os.n {
                    for p in 0..plane {
                        let row = index[ni * plane + p] as usize;
                        for ci in 0..c {
                            ds[row * c + ci] = ds[row * c + ci] + g[(ni * c + ci) * plane + p];
                        }
                    }
                }
                accumulate(nodes, *src, &ds);
            }
        }
        Op::ToColumns { x } => {
            if needs(nodes, *x) {
                let s = nodes[x.0].value.shape();
                let plane = s.plane();
                let mut dx = vec![T::zero(); s.numel()];
                for n in 0..s.n {
                    for c in 0..s.c {
                        for p in 0..plane {
                            dx[(n * s.c + c) * plane + p] = g[(n * plane + p) * s.c + c];
                        }
                    }
                }
                accumulate(nodes, *x, &dx);
            }
        }
        Op::BatchNorm {
            x,
            mean,
            sigma,
            eps,
            batch_stats,
        } => {
            if !needs(nodes, *x) {
                return;
            }
            let s = nodes[x.0].value.shape();
            let plane = s.plane();
            let xv = nodes[x.0].value.data();
            let mut dx = vec![T::zero(); s.numel()];
            let count = T::of((s.n * plane) as f64);
            for c in 0..s.c {
                let sc = sigma[c] + *eps;
                if !*batch_stats {
                    for n in 0..s.n {
                        let base = (n * s.c + c) * plane;
                        for i in base..base + plane {
                            dx[i] = g[i] / sc;
                        }
                    }
                    continue;
                }
                let mut sum_d = T::zero();
                let mut sum_dc = T::zero();
                for n in 0..s.n {
                    let base = (n * s.c + c) * plane;
                    for i in base..base + plane {
                        sum_d = sum_d + g[i];
                        sum_dc = sum_dc + g[i] * (xv[i] - mean[c]);
                    }
                }
                let mean_d = sum_d / count;
                let coef = if sigma[c] > T::zero() {
                    sum_dc / (count * sigma[c] * sc * sc)
                } else {
                    T::zero()
                };
                for n in 0..s.n {
                    let base = (n * s.c + c) * plane;
                    for i in base..base + plane {
                        dx[i] = (g[i] - mean_d) / sc - coef * (xv[i] - mean[c]);
                    }
                }
            }
            accumulate(nodes, *x, &dx);
        }
        Op::ChannelAffine { x, gamma, beta } => {
            let s = nodes[x.0].value.shape();
            let plane = s.plane();
            if needs(nodes, *x) {
                let gv = nodes[gamma.0].value.data();
                let dx: Vec<T> = g
                    .iter()
                    .enumerate()
                    .map(|(i, &d)| d * gv[(i / plane) % s.c])
                    .collect();
                accumulate(nodes, *x, &dx);
            }
            let xv = nodes[x.0].value.data();
            let mut dg = vec![T::zero(); s.c];
            let mut db = vec![T::zero(); s.c];
            for (i, &d) in g.iter().enumerate() {
                let c = (i / plane) % s.c;
                dg[c] = dg[c] + d * xv[i];
                db[c] = db[c] + d;
            }
            accumulate(nodes, *gamma, &dg);
            accumulate(nodes, *beta, &db);
        }
        Op::Modulate { x, gamma, beta } => {
            if needs(nodes, *x) {
                let dx: Vec<T> = g.iter().zip(nodes[gamma.0].value.data()).map(|(&d, &gm)| d * gm).collect();
                accumulate(nodes, *x, &dx);
            }
            if needs(nodes, *gamma) {
                let dg: Vec<T> = g.iter().zip(nodes[x.0].value.data()).map(|(&d, &xv)| d * xv).collect();
                accumulate(nodes, *gamma, &dg);
            }
            accumulate(nodes, *beta, g);
        }
        Op::LeakyRelu { x, slope } => {
            if needs(nodes, *x) {
                let dx: Vec<T> = g
                    .iter()
                    .zip(nodes[x.0].value.data())
                    .map(|(&d, &v)| if v >= T::zero() { d } else { d * *slope })
                    .collect();
                accumulate(nodes, *x, &dx);
            }
        }
        Op::Resize { x } => {
            if !needs(nodes, *x) {
                return;
            }
            let s = nodes[x.0].value.shape();
            let os = out.shape();
            if (os.h, os.w) == (s.h, s.w) {
                accumulate(nodes, *x, g);
                return;
            }
            let ty = axis_taps(s.h, os.h);
            let tx = axis_taps(s.w, os.w);
            let mut dx = vec![T::zero(); s.numel()];
            for (pi, gp) in g.chunks_exact(os.plane()).enumerate() {
                let dp = &mut dx[pi * s.plane()..(pi + 1) * s.plane()];
                for (oy, a) in ty.iter().enumerate() {
                    for (ox, b) in tx.iter().enumerate() {
                        let d = gp[oy * os.w + ox];
                        let (wy0, wy1, wx0, wx1) = (T::of(a.w0), T::of(a.w1), T::of(b.w0), T::of(b.w1));
                        dp[a.i0 * s.w + b.i0] = dp[a.i0 * s.w + b.i0] + d * wy0 * wx0;
                        dp[a.i0 * s.w + b.i1] = dp[a.i0 * s.w + b.i1] + d * wy0 * wx1;
                        dp[a.i1 * s.w + b.i0] = dp[a.i1 * s.w + b.i0] + d * wy1 * wx0;
                        dp[a.i1 * s.w + b.i1] = dp[a.i1 * s.w + b.i1] + d * wy1 * wx1;
                    }
                }
            }
            accumulate(nodes, *x, &dx);
        }
        Op::Concat { parts } => {
            let os = out.shape();
            let mut offset = 0;
            for &p in parts {
                let ps = nodes[p.0].value.shape();
                let len = ps.c * ps.plane();
                if needs(nodes, p) {
                    let mut dp = Vec::with_capacity(ps.numel());
                    for n in 0..os.n {
                        let start = n * os.c * os.plane() + offset;
                        dp.extend_from_slice(&g[start..start + len]);
                    }
                    accumulate(nodes, p, &dp);
                }
                offset += len;
            }
        }
        Op::Select { parts, choice } => {
            let s = out.shape();
            let plane = s.plane();
            for (k, &p) in parts.iter().enumerate() {
                if !needs(nodes, p) {
                    continue;
                }
                let mut dp = vec![T::zero(); s.numel()];
                for n in 0..s.n {
                    for px in 0..plane {
                        if choice[n * plane + px] as usize == k {
                            for c in 0..s.c {
                                let i = (n * s.c + c) * plane + px;
                                dp[i] = g[i];
                            }
                        }
                    }
                }
                accumulate(nodes, p, &dp);
            }
        }
        Op::Add { a, b } => {
            accumulate(nodes, *a, g);
            accumulate(nodes, *b, g);
        }
        Op::Mul { a, b } => {
            let da: Vec<T> = g.iter().zip(nodes[b.0].value.data()).map(|(&d, &v)| d * v).collect();
            let db: Vec<T> = g.iter().zip(nodes[a.0].value.data()).map(|(&d, &v)| d * v).collect();
            accumulate(nodes, *a, &da);
            accumulate(nodes, *b, &db);
        }
        Op::Scale { x, c } => {
            let dx: Vec<T> = g.iter().map(|&d| d * *c).collect();
            accumulate(nodes, *x, &dx);
        }
        Op::Sum { x } => {
            let n = nodes[x.0].value.numel();
            accumulate(nodes, *x, &vec![g[0]; n]);
        }
        Op::Softmax { x } => {
            let s = out.shape();
            let plane = s.plane();
            let y = out.data();
            let mut dx = vec![T::zero(); s.numel()];
            for n in 0..s.n {
                for p in 0..plane {
                    let idx = |c: usize| (n * s.c + c) * plane + p;
                    let dot: T = (0..s.c).map(|c| g[idx(c)] * y[idx(c)]).sum();
                    for c in 0..s.c {
                        dx[idx(c)] = y[idx(c)] * (g[idx(c)] - dot);
                    }
                }
            }
            accumulate(nodes, *x, &dx);
        }
        Op::Precomputed { x, grad } => {
            let dx: Vec<T> = grad.iter().map(|&v| v * g[0]).collect();
            accumulate(nodes, *x, &dx);
        }
    }
}

pub const GRAD_CHECK_FLOOR: f64 = 1e-8;
pub const GRAD_CHECK_STEPS: usize = 4;

/// Outcome of a finite-difference gradient comparison.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// `(parameter index, element index)` of the worst entry.
    pub worst: (usize, usize),
    /// Analytic and numeric values at the worst entry.
    pub worst_values: (f64, f64),
    pub checked: usize,
}

/// Compares analytic gradients of a scalar computation against central
/// differences in 64-bit arithmetic.
///
/// `f` builds the computation from the parameter leaves it is given. With
/// `sample = Some(k)`, at most `k` elements per parameter are probed.
///
/// The numeric gradient is the fourth-order central stencil
/// `(8(f(x+h) − f(x−h)) − (f(x+2h) − f(x−2h))) / 12h`, evaluated at the steps
/// `h, h/10, …` ([`GRAD_CHECK_STEPS`] of them). The error of an entry is
/// `|a − n| / max(|a| + |n|, GRAD_CHECK_FLOOR)` at the step where it is
/// smallest. No single step serves every entry of a piecewise smooth
/// objective: roundoff (about `1e-16·|f| / h`) swamps near-zero gradients at
/// small steps, and leaky-ReLU kinks within `2h` bias large ones. A wrong
/// analytic gradient disagrees at every step.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], h: f64, sample: Option<usize>) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.param(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out).item();
        if !v.is_finite() {
            return Err(CtError::NonFinite("grad_check objective".into()));
        }
        Ok(v)
    };

    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    if !g.value(out).item().is_finite() {
        return Err(CtError::NonFinite("grad_check objective".into()));
    }
    g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| g.grad(v)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(0x67C4_EC4D);
    let mut work = params.to_vec();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: (0, 0),
        worst_values: (0.0, 0.0),
        checked: 0,
    };
    for pi in 0..params.len() {
        let len = params[pi].numel();
        let idx: Vec<usize> = match sample {
            Some(k) if k < len => sample_indices(&mut rng, len, k).into_vec(),
            _ => (0..len).collect(),
        };
        for i in idx {
            let orig = work[pi].data()[i];
            let a = analytic[pi].data()[i];
            let (mut rel, mut numeric) = (f64::INFINITY, f64::NAN);
            let mut step = h;
            for _ in 0..GRAD_CHECK_STEPS {
                let mut at = |d: f64| {
                    work[pi].data_mut()[i] = orig + d;
                    eval(&work)
                };
                let near = at(step)? - at(-step)?;
                let far = at(2.0 * step)? - at(-2.0 * step)?;
                let n = (8.0 * near - far) / (12.0 * step);
                let r = (a - n).abs() / (a.abs() + n.abs()).max(GRAD_CHECK_FLOOR);
                if r < rel {
                    (rel, numeric) = (r, n);
                }
                step /= 10.0;
            }
            work[pi].data_mut()[i] = orig;
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (pi, i);
                report.worst_values = (a, numeric);
            }
        }
    }
    Ok(report)
}
