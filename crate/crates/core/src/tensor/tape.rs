//! Define-by-run reverse-mode automatic differentiation.
//!
//! Every operation appends a node to the tape; node ids are handed out in
//! recording order, so the tape is topologically sorted by construction and
//! `backward` walks it in exact reverse order. Nodes whose inputs do not
//! require gradients are never visited on the way back.

use super::kernels::{self, ConvGeom};
use super::{check_finite, numel_of, Tensor};
use crate::error::{contract_err, dim_err, Result};

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
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul { a: Var, b: Var, ta: bool, tb: bool, m: usize, k: usize, n: usize },
    Reshape(Var),
    SwapLast2 { x: Var, outer: usize, rows: usize, cols: usize },
    Narrow { x: Var, outer: usize, dim: usize, inner: usize, start: usize, len: usize },
    Concat { parts: Vec<(Var, usize)>, outer: usize, inner: usize },
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    AddBias { x: Var, b: Var, outer: usize, dim: usize, inner: usize },
    AddBatchChannel { x: Var, e: Var, batch: usize, channels: usize, inner: usize },
    Upsample2x { x: Var, planes: usize, h: usize, w: usize },
    AvgPool2x { x: Var, planes: usize, h: usize, w: usize },
    GroupNorm { x: Var, gain: Var, bias: Var, batch: usize, channels: usize, groups: usize, spatial: usize, mean: Vec<f64>, inv_std: Vec<f64> },
    Softmax { x: Var, outer: usize, dim: usize, inner: usize },
    Silu(Var),
    Gelu(Var),
    Tanh(Var),
    Exp(Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of operations for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

pub const GROUP_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool, name: &str) -> Result<Var> {
        check_finite(&value, name)?;
        debug_assert_eq!(numel_of(&shape), value.len());
        self.nodes.push(Node { shape, value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Record a leaf. Gradients flow to it iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node { shape: t.shape().to_vec(), value: t.data().to_vec(), op: Op::Leaf, needs_grad: t.requires_grad() });
        Var(self.nodes.len() - 1)
    }

    /// Record a constant (never differentiated).
    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        if numel_of(shape) != data.len() {
            return dim_err(format!("constant of shape {shape:?} with {} values", data.len()));
        }
        self.push(shape.to_vec(), data, Op::Leaf, false, "constant")
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape values are finite and shaped")
    }

    /// Gradient of the last `backward` call with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return dim_err(format!("{what}: shapes {:?} and {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let ng = self.ng(a) || self.ng(b);
        self.push(self.shape(a).to_vec(), v, Op::Add(a, b), ng, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        let ng = self.ng(a) || self.ng(b);
        self.push(self.shape(a).to_vec(), v, Op::Sub(a, b), ng, "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let ng = self.ng(a) || self.ng(b);
        self.push(self.shape(a).to_vec(), v, Op::Mul(a, b), ng, "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).iter().map(|x| x * c).collect();
        let ng = self.ng(a);
        self.push(self.shape(a).to_vec(), v, Op::Scale(a, c), ng, "scale")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).iter().map(|x| x + c).collect();
        let ng = self.ng(a);
        self.push(self.shape(a).to_vec(), v, Op::AddScalar(a), ng, "add_scalar")
    }

    /// Matrix product of rank-2 values.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) · op(b)` where `op` optionally transposes a rank-2 value.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let (ar, ac) = match self.shape(a) {
            [r, c] => (*r, *c),
            s => return dim_err(format!("matmul: left operand has shape {s:?}")),
        };
        let (br, bc) = match self.shape(b) {
            [r, c] => (*r, *c),
            s => return dim_err(format!("matmul: right operand has shape {s:?}")),
        };
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return dim_err(format!("matmul: inner extents {k} and {k2}"));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, 1.0, self.value(a), ta, self.value(b), tb, 0.0, &mut out);
        let ng = self.ng(a) || self.ng(b);
        self.push(vec![m, n], out, Op::MatMul { a, b, ta, tb, m, k, n }, ng, "matmul")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel_of(shape) != self.value(x).len() || shape.iter().any(|&d| d == 0) {
            return dim_err(format!("reshape {:?} to {shape:?}", self.shape(x)));
        }
        let v = self.value(x).to_vec();
        let ng = self.ng(x);
        self.push(shape.to_vec(), v, Op::Reshape(x), ng, "reshape")
    }

    /// Swap the last two axes of a rank ≥ 2 value.
    pub fn swap_last2(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return dim_err(format!("swap_last2 on shape {shape:?}"));
        }
        let rows = shape[shape.len() - 2];
        let cols = shape[shape.len() - 1];
        let outer = numel_of(&shape[..shape.len() - 2]);
        let src = self.value(x);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            let s = &src[o * rows * cols..][..rows * cols];
            let d = &mut out[o * rows * cols..][..rows * cols];
            for i in 0..rows {
                for j in 0..cols {
                    d[j * rows + i] = s[i * cols + j];
                }
            }
        }
        let mut new_shape = shape.clone();
        let n = new_shape.len();
        new_shape.swap(n - 1, n - 2);
        let ng = self.ng(x);
        self.push(new_shape, out, Op::SwapLast2 { x, outer, rows, cols }, ng, "swap_last2")
    }

    /// Rank-2 transpose.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 2 {
            return dim_err(format!("transpose on shape {:?}", self.shape(x)));
        }
        self.swap_last2(x)
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return dim_err(format!("narrow axis {axis} [{start}, {}) of shape {shape:?}", start + len));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let src = self.value(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * dim + start) * inner..][..len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let ng = self.ng(x);
        self.push(new_shape, out, Op::Narrow { x, outer, dim, inner, start, len }, ng, "narrow")
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return dim_err("concat of nothing");
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return dim_err(format!("concat axis {axis} for shape {base:?}"));
        }
        let mut total = 0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return dim_err(format!("concat: shape {s:?} incompatible with {base:?} on axis {axis}"));
            }
            widths.push((p, s[axis]));
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &(p, w) in &widths {
                out.extend_from_slice(&self.value(p)[o * w * inner..][..w * inner]);
            }
        }
        let mut new_shape = base;
        new_shape[axis] = total;
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(new_shape, out, Op::Concat { parts: widths, outer, inner }, ng, "concat")
    }

    /// 2-D cross-correlation. `x` is `[C, H, W]` or `[B, C, H, W]`, `w` is `[C', C, k, k]` with odd `k`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (batch, c, h, wd, rank3) = match xs.as_slice() {
            [c, h, w] => (1, *c, *h, *w, true),
            [b, c, h, w] => (*b, *c, *h, *w, false),
            s => return dim_err(format!("conv2d input shape {s:?}")),
        };
        let (co, k) = match self.shape(w) {
            [co, ci, k1, k2] if *ci == c && k1 == k2 => (*co, *k1),
            s => return dim_err(format!("conv2d kernel shape {s:?} for {c} input channels")),
        };
        if k % 2 == 0 {
            return dim_err(format!("conv2d kernel size {k} must be odd"));
        }
        if stride == 0 {
            return dim_err("conv2d stride 0");
        }
        let span_h = h + 2 * padding;
        let span_w = wd + 2 * padding;
        if span_h < k || span_w < k || (span_h - k) % stride != 0 || (span_w - k) % stride != 0 {
            return dim_err(format!(
                "conv2d output extent not integral: H={h}, W={wd}, k={k}, stride={stride}, padding={padding}"
            ));
        }
        let geom = ConvGeom {
            batch,
            in_channels: c,
            height: h,
            width: wd,
            out_channels: co,
            kernel: k,
            stride,
            padding,
            out_height: (span_h - k) / stride + 1,
            out_width: (span_w - k) / stride + 1,
        };
        let out = kernels::conv2d_forward(self.value(x), self.value(w), &geom);
        let shape = if rank3 {
            vec![co, geom.out_height, geom.out_width]
        } else {
            vec![batch, co, geom.out_height, geom.out_width]
        };
        let ng = self.ng(x) || self.ng(w);
        self.push(shape, out, Op::Conv2d { x, w, geom }, ng, "conv2d")
    }

    /// Add a 1-D bias broadcast along `axis`.
    pub fn add_bias(&mut self, x: Var, b: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || self.shape(b) != [shape[axis]] {
            return dim_err(format!("bias {:?} on axis {axis} of {shape:?}", self.shape(b)));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let bias = self.value(b);
        let mut out = self.value(x).to_vec();
        for o in 0..outer {
            for (d, bv) in bias.iter().enumerate() {
                out[(o * dim + d) * inner..][..inner].iter_mut().for_each(|v| *v += bv);
            }
        }
        let ng = self.ng(x) || self.ng(b);
        self.push(shape, out, Op::AddBias { x, b, outer, dim, inner }, ng, "add_bias")
    }

    /// Add a per-sample, per-channel offset `e: [B, C]` to `x: [B, C, ...]`.
    pub fn add_batch_channel(&mut self, x: Var, e: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || self.shape(e) != [shape[0], shape[1]] {
            return dim_err(format!("per-sample channel offset {:?} for {shape:?}", self.shape(e)));
        }
        let (batch, channels) = (shape[0], shape[1]);
        let inner = numel_of(&shape[2..]);
        let ev = self.value(e);
        let mut out = self.value(x).to_vec();
        for (bc, off) in ev.iter().enumerate() {
            out[bc * inner..][..inner].iter_mut().for_each(|v| *v += off);
        }
        let ng = self.ng(x) || self.ng(e);
        self.push(shape, out, Op::AddBatchChannel { x, e, batch, channels, inner }, ng, "add_batch_channel")
    }

    /// Nearest-neighbour 2× upsampling of the last two axes.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 3 {
            return dim_err(format!("upsample2x on shape {shape:?}"));
        }
        let n = shape.len();
        let (h, w) = (shape[n - 2], shape[n - 1]);
        let planes = numel_of(&shape[..n - 2]);
        let src = self.value(x);
        let mut out = vec![0.0; planes * 4 * h * w];
        for p in 0..planes {
            let s = &src[p * h * w..][..h * w];
            let d = &mut out[p * 4 * h * w..][..4 * h * w];
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    d[y * 2 * w + xx] = s[(y / 2) * w + xx / 2];
                }
            }
        }
        let mut new_shape = shape;
        new_shape[n - 2] = 2 * h;
        new_shape[n - 1] = 2 * w;
        let ng = self.ng(x);
        self.push(new_shape, out, Op::Upsample2x { x, planes, h, w }, ng, "upsample2x")
    }

    /// 2×2 average pooling of the last two axes; both extents must be even.
    pub fn avg_pool2x(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = shape.len();
        if n < 3 || shape[n - 2] % 2 != 0 || shape[n - 1] % 2 != 0 {
            return dim_err(format!("avg_pool2x on shape {shape:?}"));
        }
        let (h, w) = (shape[n - 2] / 2, shape[n - 1] / 2);
        let planes = numel_of(&shape[..n - 2]);
        let src = self.value(x);
        let mut out = vec![0.0; planes * h * w];
        for p in 0..planes {
            let s = &src[p * 4 * h * w..][..4 * h * w];
            let d = &mut out[p * h * w..][..h * w];
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    d[(y / 2) * w + xx / 2] += 0.25 * s[y * 2 * w + xx];
                }
            }
        }
        let mut new_shape = shape;
        new_shape[n - 2] = h;
        new_shape[n - 1] = w;
        let ng = self.ng(x);
        self.push(new_shape, out, Op::AvgPool2x { x, planes, h, w }, ng, "avg_pool2x")
    }

    /// Group normalization over `[C, H, W]` or `[B, C, H, W]` with per-channel affine.
    pub fn group_norm(&mut self, x: Var, groups: usize, gain: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (batch, channels, spatial) = match shape.as_slice() {
            [c, h, w] => (1, *c, h * w),
            [b, c, h, w] => (*b, *c, h * w),
            s => return dim_err(format!("group_norm input shape {s:?}")),
        };
        if groups == 0 || channels % groups != 0 {
            return dim_err(format!("group_norm: {channels} channels not divisible into {groups} groups"));
        }
        if self.shape(gain) != [channels] || self.shape(bias) != [channels] {
            return dim_err(format!("group_norm affine shapes {:?}/{:?}", self.shape(gain), self.shape(bias)));
        }
        let cpg = channels / groups;
        let gsize = cpg * spatial;
        let src = self.value(x);
        let gv = self.value(gain);
        let bv = self.value(bias);
        let mut out = vec![0.0; src.len()];
        let mut means = Vec::with_capacity(batch * groups);
        let mut inv_stds = Vec::with_capacity(batch * groups);
        for b in 0..batch {
            for g in 0..groups {
                let off = (b * channels + g * cpg) * spatial;
                let seg = &src[off..off + gsize];
                let mean = seg.iter().sum::<f64>() / gsize as f64;
                let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / gsize as f64;
                let inv = 1.0 / (var + GROUP_NORM_EPS).sqrt();
                for cc in 0..cpg {
                    let ch = g * cpg + cc;
                    for s in 0..spatial {
                        let i = off + cc * spatial + s;
                        out[i] = (src[i] - mean) * inv * gv[ch] + bv[ch];
                    }
                }
                means.push(mean);
                inv_stds.push(inv);
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        let op = Op::GroupNorm { x, gain, bias, batch, channels, groups, spatial, mean: means, inv_std: inv_stds };
        self.push(shape, out, op, ng, "group_norm")
    }

    /// Softmax along `axis`, stabilized by subtracting the running max.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return dim_err(format!("softmax axis {axis} for shape {shape:?}"));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let out = softmax_values(self.value(x), outer, dim, inner);
        let ng = self.ng(x);
        self.push(shape, out, Op::Softmax { x, outer, dim, inner }, ng, "softmax")
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).iter().map(|&a| a * sigmoid(a)).collect();
        let ng = self.ng(x);
        self.push(self.shape(x).to_vec(), v, Op::Silu(x), ng, "silu")
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).iter().map(|&a| 0.5 * a * (1.0 + (GELU_C * (a + 0.044715 * a * a * a)).tanh())).collect();
        let ng = self.ng(x);
        self.push(self.shape(x).to_vec(), v, Op::Gelu(x), ng, "gelu")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).iter().map(|a| a.tanh()).collect();
        let ng = self.ng(x);
        self.push(self.shape(x).to_vec(), v, Op::Tanh(x), ng, "tanh")
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).iter().map(|a| a.exp()).collect();
        let ng = self.ng(x);
        self.push(self.shape(x).to_vec(), v, Op::Exp(x), ng, "exp")
    }

    /// Sum of all entries as a one-element value.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().sum();
        let ng = self.ng(x);
        self.push(vec![1], vec![s], Op::Sum(x), ng, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let ng = self.ng(x);
        self.push(vec![1], vec![m], Op::Mean(x), ng, "mean")
    }

    /// Mean squared error between equally shaped values.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean(sq)
    }

    /// `x · wᵀ (+ b)` for `x: [N, d_in]`, `w: [d_out, d_in]`, `b: [d_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul_t(x, false, w, true)?;
        match b {
            Some(b) => self.add_bias(y, b, 1),
            None => Ok(y),
        }
    }

    /// Reverse pass from a one-element `loss`. Afterwards every gradient-requiring
    /// leaf has `grad(leaf) = ∂loss/∂leaf` (zeros when unreachable).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return contract_err(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss)));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if self.ng(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(gout);
                continue;
            }
            self.propagate(i, &gout, &mut grads);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.needs_grad && grads[i].is_none() {
                grads[i] = Some(vec![0.0; node.value.len()]);
            }
        }
        self.grads = grads;
        Ok(())
    }

    /// Copy the gradient of `v` into a tensor's grad buffer (additively).
    pub fn write_grad(&self, v: Var, t: &mut Tensor) -> Result<()> {
        match self.grad(v) {
            Some(g) => t.accumulate_grad(g),
            None => contract_err("no gradient recorded for this value"),
        }
    }

    fn propagate(&self, i: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, g: Vec<f64>| {
            if !self.ng(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(buf) => buf.iter_mut().zip(&g).for_each(|(b, x)| *b += x),
                slot @ None => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, gout.to_vec());
                acc(*b, gout.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, gout.to_vec());
                acc(*b, gout.iter().map(|g| -g).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    acc(*a, gout.iter().zip(bv).map(|(g, y)| g * y).collect());
                }
                if self.ng(*b) {
                    acc(*b, gout.iter().zip(av).map(|(g, x)| g * x).collect());
                }
            }
            Op::Scale(a, c) => acc(*a, gout.iter().map(|g| g * c).collect()),
            Op::AddScalar(a) => acc(*a, gout.to_vec()),
            Op::MatMul { a, b, ta, tb, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let mut ga = vec![0.0; m * k];
                    if *ta {
                        // stored k×m: dA = op(B) · dCᵀ
                        kernels::gemm(k, n, m, 1.0, bv, *tb, gout, true, 0.0, &mut ga);
                    } else {
                        kernels::gemm(m, n, k, 1.0, gout, false, bv, !*tb, 0.0, &mut ga);
                    }
                    acc(*a, ga);
                }
                if self.ng(*b) {
                    let mut gb = vec![0.0; k * n];
                    if *tb {
                        // stored n×k: dB = dCᵀ · op(A)
                        kernels::gemm(n, m, k, 1.0, gout, true, av, *ta, 0.0, &mut gb);
                    } else {
                        kernels::gemm(k, m, n, 1.0, av, !*ta, gout, false, 0.0, &mut gb);
                    }
                    acc(*b, gb);
                }
            }
            Op::Reshape(x) => acc(*x, gout.to_vec()),
            Op::SwapLast2 { x, outer, rows, cols } => {
                // output is cols×rows per slab; undo the swap
                let (r, c) = (*rows, *cols);
                let mut g = vec![0.0; gout.len()];
                for o in 0..*outer {
                    let s = &gout[o * r * c..][..r * c];
                    let d = &mut g[o * r * c..][..r * c];
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] = s[j * r + i];
                        }
                    }
                }
                acc(*x, g);
            }
            Op::Narrow { x, outer, dim, inner, start, len } => {
                let mut g = vec![0.0; outer * dim * inner];
                for o in 0..*outer {
                    g[(o * dim + start) * inner..][..len * inner].copy_from_slice(&gout[o * len * inner..][..len * inner]);
                }
                acc(*x, g);
            }
            Op::Concat { parts, outer, inner } => {
                let total: usize = parts.iter().map(|(_, w)| w).sum();
                let mut offset = 0;
                for &(p, w) in parts {
                    if self.ng(p) {
                        let mut g = Vec::with_capacity(outer * w * inner);
                        for o in 0..*outer {
                            g.extend_from_slice(&gout[(o * total + offset) * inner..][..w * inner]);
                        }
                        acc(p, g);
                    }
                    offset += w;
                }
            }
            Op::Conv2d { x, w, geom } => {
                let (dx, dw) =
                    kernels::conv2d_backward(self.value(*x), self.value(*w), gout, geom, self.ng(*x), self.ng(*w));
                if let Some(dx) = dx {
                    acc(*x, dx);
                }
                if let Some(dw) = dw {
                    acc(*w, dw);
                }
            }
            Op::AddBias { x, b, outer, dim, inner } => {
                acc(*x, gout.to_vec());
                if self.ng(*b) {
                    let mut gb = vec![0.0; *dim];
                    for o in 0..*outer {
                        for (d, slot) in gb.iter_mut().enumerate() {
                            *slot += gout[(o * dim + d) * inner..][..*inner].iter().sum::<f64>();
                        }
                    }
                    acc(*b, gb);
                }
            }
            Op::AddBatchChannel { x, e, batch, channels, inner } => {
                acc(*x, gout.to_vec());
                if self.ng(*e) {
                    let ge = (0..batch * channels).map(|bc| gout[bc * inner..][..*inner].iter().sum()).collect();
                    acc(*e, ge);
                }
            }
            Op::Upsample2x { x, planes, h, w } => {
                let (h, w) = (*h, *w);
                let mut g = vec![0.0; planes * h * w];
                for p in 0..*planes {
                    let s = &gout[p * 4 * h * w..][..4 * h * w];
                    let d = &mut g[p * h * w..][..h * w];
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            d[(y / 2) * w + xx / 2] += s[y * 2 * w + xx];
                        }
                    }
                }
                acc(*x, g);
            }
            Op::AvgPool2x { x, planes, h, w } => {
                let (h, w) = (*h, *w);
                let mut g = vec![0.0; planes * 4 * h * w];
                for p in 0..*planes {
                    let s = &gout[p * h * w..][..h * w];
                    let d = &mut g[p * 4 * h * w..][..4 * h * w];
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            d[y * 2 * w + xx] = 0.25 * s[(y / 2) * w + xx / 2];
                        }
                    }
                }
                acc(*x, g);
            }
            Op::GroupNorm { x, gain, bias, batch, channels, groups, spatial, mean, inv_std } => {
                let (channels, spatial, groups) = (*channels, *spatial, *groups);
                let cpg = channels / groups;
                let gsize = (cpg * spatial) as f64;
                let src = self.value(*x);
                let gv = self.value(*gain);
                let mut dx = vec![0.0; src.len()];
                let mut dgain = vec![0.0; channels];
                let mut dbias = vec![0.0; channels];
                for b in 0..*batch {
                    for g in 0..groups {
                        let gi = b * groups + g;
                        let (mu, inv) = (mean[gi], inv_std[gi]);
                        let off = (b * channels + g * cpg) * spatial;
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for cc in 0..cpg {
                            let ch = g * cpg + cc;
                            for s in 0..spatial {
                                let idx = off + cc * spatial + s;
                                let xhat = (src[idx] - mu) * inv;
                                let dy = gout[idx];
                                dgain[ch] += dy * xhat;
                                dbias[ch] += dy;
                                let dxhat = dy * gv[ch];
                                sum_dxhat += dxhat;
                                sum_dxhat_xhat += dxhat * xhat;
                            }
                        }
                        let m1 = sum_dxhat / gsize;
                        let m2 = sum_dxhat_xhat / gsize;
                        for cc in 0..cpg {
                            let ch = g * cpg + cc;
                            for s in 0..spatial {
                                let idx = off + cc * spatial + s;
                                let xhat = (src[idx] - mu) * inv;
                                let dxhat = gout[idx] * gv[ch];
                                dx[idx] = inv * (dxhat - m1 - xhat * m2);
                            }
                        }
                    }
                }
                acc(*x, dx);
                acc(*gain, dgain);
                acc(*bias, dbias);
            }
            Op::Softmax { x, outer, dim, inner } => {
                let y = &node.value;
                let mut g = vec![0.0; y.len()];
                for o in 0..*outer {
                    for j in 0..*inner {
                        let base = o * dim * inner + j;
                        let dot: f64 = (0..*dim).map(|d| gout[base + d * inner] * y[base + d * inner]).sum();
                        for d in 0..*dim {
                            let idx = base + d * inner;
                            g[idx] = y[idx] * (gout[idx] - dot);
                        }
                    }
                }
                acc(*x, g);
            }
            Op::Silu(x) => {
                let g = gout
                    .iter()
                    .zip(self.value(*x))
                    .map(|(g, &a)| {
                        let s = sigmoid(a);
                        g * (s + a * s * (1.0 - s))
                    })
                    .collect();
                acc(*x, g);
            }
            Op::Gelu(x) => {
                let g = gout
                    .iter()
                    .zip(self.value(*x))
                    .map(|(g, &a)| {
                        let t = (GELU_C * (a + 0.044715 * a * a * a)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * a * a);
                        g * (0.5 * (1.0 + t) + 0.5 * a * dt)
                    })
                    .collect();
                acc(*x, g);
            }
            Op::Tanh(x) => {
                let g = gout.iter().zip(&node.value).map(|(g, t)| g * (1.0 - t * t)).collect();
                acc(*x, g);
            }
            Op::Exp(x) => {
                let g = gout.iter().zip(&node.value).map(|(g, e)| g * e).collect();
                acc(*x, g);
            }
            Op::Sum(x) => acc(*x, vec![gout[0]; self.value(*x).len()]),
            Op::Mean(x) => {
                let n = self.value(*x).len();
                acc(*x, vec![gout[0] / n as f64; n]);
            }
        }
    }
}

/// Softmax over the middle extent of an `[outer, dim, inner]` layout.
pub fn softmax_values(src: &[f64], outer: usize, dim: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for j in 0..inner {
            let base = o * dim * inner + j;
            let max = (0..dim).map(|d| src[base + d * inner]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for d in 0..dim {
                let e = (src[base + d * inner] - max).exp();
                out[base + d * inner] = e;
                total += e;
            }
            for d in 0..dim {
                out[base + d * inner] /= total;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    fn leaf(t: &mut Tape, shape: &[usize], data: Vec<f64>, grad: bool) -> Var {
        let mut x = Tensor::new(shape.to_vec(), data).unwrap();
        x.set_requires_grad(grad);
        t.leaf(&x)
    }

    #[test]
    fn matmul_identity_and_annihilator() {
        let mut t = Tape::new();
        let i2 = leaf(&mut t, &[2, 2], vec![1., 0., 0., 1.], false);
        let a = leaf(&mut t, &[2, 2], vec![1., 2., 3., 4.], false);
        let z = leaf(&mut t, &[2, 3], vec![0.; 6], false);
        let p = t.matmul(i2, a).unwrap();
        assert_eq!(t.value(p), &[1., 2., 3., 4.]);
        let q = t.matmul(i2, z).unwrap();
        assert_eq!(t.value(q), &[0.; 6]);
        assert_eq!(t.shape(q), &[2, 3]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut t = Tape::new();
        let a = leaf(&mut t, &[2, 3], vec![0.; 6], false);
        let b = leaf(&mut t, &[2, 3], vec![0.; 6], false);
        assert!(matches!(t.matmul(a, b), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn conv_identity_and_summation_kernels() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[1, 3, 3], (0..9).map(f64::from).collect(), false);
        let k = leaf(&mut t, &[1, 1, 1, 1], vec![1.0], false);
        let y = t.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(t.value(y), t.value(x));

        let ones = leaf(&mut t, &[1, 4, 4], vec![1.0; 16], false);
        let k3 = leaf(&mut t, &[1, 1, 3, 3], vec![1.0; 9], false);
        let s = t.conv2d(ones, k3, 1, 0).unwrap();
        assert_eq!(t.shape(s), &[1, 2, 2]);
        assert_eq!(t.value(s), &[9.0; 4]);
    }

    #[test]
    fn conv_rejects_non_integral_extent_and_even_kernel() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[1, 4, 4], vec![0.0; 16], false);
        let k = leaf(&mut t, &[1, 1, 3, 3], vec![0.0; 9], false);
        assert!(t.conv2d(x, k, 2, 0).is_err());
        let k2 = leaf(&mut t, &[1, 1, 2, 2], vec![0.0; 4], false);
        assert!(t.conv2d(x, k2, 1, 0).is_err());
    }

    #[test]
    fn softmax_examples() {
        let mut t = Tape::new();
        let a = leaf(&mut t, &[3], vec![0., 0., 0.], false);
        let s = t.softmax(a, 0).unwrap();
        for v in t.value(s) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let b = leaf(&mut t, &[2], vec![1000., 1000.], false);
        let s = t.softmax(b, 0).unwrap();
        assert_eq!(t.value(s), &[0.5, 0.5]);
        let c = leaf(&mut t, &[2], vec![0., 3f64.ln()], false);
        let s = t.softmax(c, 0).unwrap();
        assert!((t.value(s)[0] - 0.25).abs() < 1e-15);
        assert!((t.value(s)[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_along_inner_axis_sums_to_one() {
        let mut r = Stream::new(5);
        let mut t = Tape::new();
        let a = leaf(&mut t, &[2, 3, 4], r.normal_vec(24), false);
        let s = t.softmax(a, 1).unwrap();
        let v = t.value(s);
        for o in 0..2 {
            for j in 0..4 {
                let tot: f64 = (0..3).map(|d| v[o * 12 + d * 4 + j]).sum();
                assert!((tot - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn group_norm_constant_input_and_zero_gain() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[4, 2, 2], vec![3.0; 16], false);
        let g1 = leaf(&mut t, &[4], vec![1.0; 4], false);
        let b0 = leaf(&mut t, &[4], vec![0.0; 4], false);
        let y = t.group_norm(x, 2, g1, b0).unwrap();
        assert!(t.value(y).iter().all(|v| *v == 0.0));

        let xr = leaf(&mut t, &[4, 2, 2], (0..16).map(|i| f64::from(i).sin()).collect(), false);
        let g0 = leaf(&mut t, &[4], vec![0.0; 4], false);
        let bb = leaf(&mut t, &[4], vec![0.7; 4], false);
        let y = t.group_norm(xr, 2, g0, bb).unwrap();
        assert!(t.value(y).iter().all(|v| *v == 0.7));

        assert!(t.group_norm(xr, 3, g1, b0).is_err());
    }

    #[test]
    fn group_norm_normalizes_each_group() {
        let mut r = Stream::new(1);
        let mut t = Tape::new();
        let x = leaf(&mut t, &[2, 4, 3, 3], r.normal_vec(72).iter().map(|v| 5.0 + 3.0 * v).collect(), false);
        let g = leaf(&mut t, &[4], vec![1.0; 4], false);
        let b = leaf(&mut t, &[4], vec![0.0; 4], false);
        let y = t.group_norm(x, 2, g, b).unwrap();
        let v = t.value(y);
        for chunk in v.chunks(18) {
            let m = chunk.iter().sum::<f64>() / 18.0;
            let var = chunk.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 18.0;
            assert!(m.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn backward_sum_and_square() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[2, 3], vec![0.5; 6], true);
        let s = t.sum(x).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0; 6]);

        let mut t = Tape::new();
        let x = leaf(&mut t, &[1], vec![3.0], true);
        let y = t.mul(x, x).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[2], vec![1.0, 2.0], true);
        let y = t.scale(x, 2.0).unwrap();
        assert!(matches!(t.backward(y), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn fan_out_doubles_gradient() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[3], vec![1.0, -2.0, 0.5], true);
        let once = t.sum(x).unwrap();
        t.backward(once).unwrap();
        let single = t.grad(x).unwrap().to_vec();

        let mut t = Tape::new();
        let x = leaf(&mut t, &[3], vec![1.0, -2.0, 0.5], true);
        let twice = t.add(x, x).unwrap();
        let s = t.sum(twice).unwrap();
        t.backward(s).unwrap();
        let double = t.grad(x).unwrap();
        for (d, s) in double.iter().zip(&single) {
            assert_eq!(*d, 2.0 * s);
        }
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut t = Tape::new();
        let w = leaf(&mut t, &[2], vec![1.0, 2.0], false);
        let x = leaf(&mut t, &[2], vec![3.0, 4.0], true);
        let p = t.mul(w, x).unwrap();
        let s = t.sum(p).unwrap();
        t.backward(s).unwrap();
        assert!(t.grad(w).is_none());
        assert_eq!(t.grad(x).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn unreachable_leaf_gets_zero_gradient() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[2], vec![1.0, 2.0], true);
        let unused = leaf(&mut t, &[3], vec![1.0; 3], true);
        let s = t.sum(x).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(unused).unwrap(), &[0.0; 3]);
    }

    #[test]
    fn non_finite_results_are_rejected() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[1], vec![1000.0], false);
        assert!(matches!(t.exp(x), Err(crate::Error::Numeric(_))));
    }

    #[test]
    fn narrow_concat_roundtrip() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[2, 5, 3], (0..30).map(f64::from).collect(), false);
        let a = t.narrow(x, 1, 0, 2).unwrap();
        let b = t.narrow(x, 1, 2, 3).unwrap();
        let c = t.concat(&[a, b], 1).unwrap();
        assert_eq!(t.value(c), t.value(x));
        assert!(t.narrow(x, 1, 4, 2).is_err());
    }
}
