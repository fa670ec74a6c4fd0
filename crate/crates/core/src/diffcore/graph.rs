use std::collections::HashMap;

use crate::error::{Error, Result};

use super::gemm::gemm;
use super::param::{GradBuffer, ParamId, ParamStore};
use super::tensor::{split_shape, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a single-image 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

/// Per-axis interpolation table: source indices and the weight of the upper one.
#[derive(Clone, Debug)]
struct AxisPlan {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

impl AxisPlan {
    /// Half-pixel-centre mapping (`align_corners = false`), clamped at the low edge.
    fn new(input: usize, output: usize) -> Self {
        let scale = input as f64 / output as f64;
        let mut plan = AxisPlan {
            lo: Vec::with_capacity(output),
            hi: Vec::with_capacity(output),
            frac: Vec::with_capacity(output),
        };
        for d in 0..output {
            let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            plan.lo.push(lo);
            plan.hi.push(hi);
            plan.frac.push(src - lo as f64);
        }
        plan
    }
}

enum Op {
    Input,
    Param,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { x: Var, rows: usize, cols: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias { x: Var, bias: Var, cols: usize },
    Affine { x: Var, scale: f64 },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax { x: Var, outer: usize, n: usize, inner: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, cols: Vec<f64> },
    Resize { x: Var, channels: usize, in_h: usize, in_w: usize, rows: AxisPlan, cols: AxisPlan },
    Concat { parts: Vec<(Var, usize)>, outer: usize, inner: usize },
    Narrow { x: Var, outer: usize, n: usize, inner: usize, start: usize, len: usize },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    NormalizeSum { x: Var, total: f64 },
    CrossEntropy { logits: Var, probs: Vec<f64>, targets: Vec<usize>, outer: usize, n: usize, inner: usize },
    FaultySquare(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Dynamic tape of one forward pass.
///
/// Every primitive evaluates eagerly, checks its output for NaN/Inf and
/// records enough state to propagate gradients in [`Graph::backward`].
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn grad_flag(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Leaf that receives a gradient.
    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Input, true, "input")
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Input, false, "constant")
    }

    /// Copy of `v` with the gradient path cut.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    /// Leaf bound to a store parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let v = self.push(store.value(id).clone(), Op::Param, true, "param")?;
        self.params.insert(id, v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, self.value(a).data(), false, self.value(b).data(), false, 0.0, &mut out);
        let flag = self.grad_flag(&[a, b]);
        self.push(Tensor::new(&[m, n], out)?, Op::MatMul { a, b, m, k, n }, flag, "matmul")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::dim("transpose", format!("expected 2-D, got {s:?}")));
        }
        let (rows, cols) = (s[0], s[1]);
        let src = self.value(x).data();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = src[r * cols + c];
            }
        }
        let flag = self.grad_flag(&[x]);
        self.push(Tensor::new(&[cols, rows], out)?, Op::Transpose { x, rows, cols }, flag, "transpose")
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape(), data).expect("shape checked")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        let flag = self.grad_flag(&[a, b]);
        self.push(out, Op::Add(a, b), flag, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        let flag = self.grad_flag(&[a, b]);
        self.push(out, Op::Sub(a, b), flag, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        let flag = self.grad_flag(&[a, b]);
        self.push(out, Op::Mul(a, b), flag, "mul")
    }

    /// `x[m, n] + bias[n]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(Error::dim("add_row_bias", format!("{sx:?} + {sb:?}")));
        }
        let cols = sx[1];
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(cols) {
            row.iter_mut().zip(&b).for_each(|(v, bv)| *v += bv);
        }
        let flag = self.grad_flag(&[x, bias]);
        self.push(out, Op::AddRowBias { x, bias, cols }, flag, "add_row_bias")
    }

    /// `scale * x + shift` with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let out = self.value(x).map(|v| scale * v + shift);
        let flag = self.grad_flag(&[x]);
        self.push(out, Op::Affine { x, scale }, flag, "affine")
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Result<Var> {
        self.affine(x, scale, 0.0)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(0.0));
        let flag = self.grad_flag(&[x]);
        self.push(out, Op::Relu(x), flag, "relu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(stable_sigmoid);
        let flag = self.grad_flag(&[x]);
        self.push(out, Op::Sigmoid(x), flag, "sigmoid")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::tanh);
        let flag = self.grad_flag(&[x]);
        self.push(out, Op::Tanh(x), flag, "tanh")
    }

    /// Softmax along `axis`, max-shifted.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("softmax", format!("axis {axis} for shape {shape:?}")));
        }
        let (outer, n, inner) = split_shape(&shape, axis);
        let mut out = self.value(x).clone();
        softmax_in_place(out.data_mut(), outer, n, inner);
        let flag = self.grad_flag(&[x]);
        self.push(out, Op::Softmax { x, outer, n, inner }, flag, "softmax")
    }

    /// Normalises the last axis to zero mean and unit variance, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::dim("layer_norm", "scalar input"))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::dim(
                "layer_norm",
                format!("last axis {d}, gain {:?}, bias {:?}", self.shape(gain), self.shape(bias)),
            ));
        }
        let rows = self.value(x).len() / d;
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let src = self.value(x).data();
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let xh = (row[j] - mean) * is;
                xhat[r * d + j] = xh;
                out[r * d + j] = g[j] * xh + b[j];
            }
        }
        let flag = self.grad_flag(&[x, gain, bias]);
        self.push(
            Tensor::new(&shape, out)?,
            Op::LayerNorm { x, gain, bias, xhat, inv_std },
            flag,
            "layer_norm",
        )
    }

    /// Convolution of one `[C, H, W]` image with `w: [O, C, kh, kw]` and optional `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 4 || sx[0] != sw[1] {
            return Err(Error::dim("conv2d", format!("input {sx:?}, weight {sw:?}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [sw[0]] {
                return Err(Error::dim("conv2d", format!("bias {:?} for {} outputs", self.shape(b), sw[0])));
            }
        }
        if spec.stride == 0 {
            return Err(Error::Contract("conv2d stride must be positive".into()));
        }
        let (c_in, h, wd) = (sx[0], sx[1], sx[2]);
        let (c_out, kh, kw) = (sw[0], sw[2], sw[3]);
        if h + 2 * spec.padding < kh || wd + 2 * spec.padding < kw {
            return Err(Error::dim("conv2d", format!("kernel {kh}x{kw} larger than padded input {h}x{wd}")));
        }
        let geom = ConvGeom {
            c_in,
            h,
            w: wd,
            c_out,
            kh,
            kw,
            stride: spec.stride,
            pad: spec.padding,
            ho: (h + 2 * spec.padding - kh) / spec.stride + 1,
            wo: (wd + 2 * spec.padding - kw) / spec.stride + 1,
        };
        let cols = im2col(self.value(x).data(), &geom);
        let p = geom.ho * geom.wo;
        let ckk = c_in * kh * kw;
        let mut out = vec![0.0; c_out * p];
        if let Some(b) = b {
            for (o, bv) in self.value(b).data().iter().enumerate() {
                out[o * p..(o + 1) * p].fill(*bv);
            }
        }
        gemm(c_out, ckk, p, 1.0, self.value(w).data(), false, &cols, false, 1.0, &mut out);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let flag = self.grad_flag(&inputs);
        self.push(
            Tensor::new(&[c_out, geom.ho, geom.wo], out)?,
            Op::Conv2d { x, w, b, geom, cols: if flag { cols } else { Vec::new() } },
            flag,
            "conv2d",
        )
    }

    /// Bilinear resize of `[C, H, W]` to `[C, out_h, out_w]`, half-pixel centres.
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || out_h == 0 || out_w == 0 {
            return Err(Error::dim("resize_bilinear", format!("{s:?} -> {out_h}x{out_w}")));
        }
        let (channels, in_h, in_w) = (s[0], s[1], s[2]);
        let rows = AxisPlan::new(in_h, out_h);
        let cols = AxisPlan::new(in_w, out_w);
        let out = resize_forward(self.value(x).data(), channels, in_h, in_w, &rows, &cols);
        let flag = self.grad_flag(&[x]);
        self.push(
            Tensor::new(&[channels, out_h, out_w], out)?,
            Op::Resize { x, channels, in_h, in_w, rows, cols },
            flag,
            "resize_bilinear",
        )
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::dim("concat", "no inputs"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::dim("concat", format!("axis {axis} for shape {first:?}")));
        }
        let mut total = 0;
        let mut extents = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim("concat", format!("{s:?} vs {first:?} on axis {axis}")));
            }
            total += s[axis];
            extents.push((p, s[axis]));
        }
        let (outer, _, inner) = split_shape(&first, axis);
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &(p, n) in &extents {
                let chunk = n * inner;
                out.extend_from_slice(&self.value(p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let flag = self.grad_flag(parts);
        self.push(Tensor::new(&out_shape, out)?, Op::Concat { parts: extents, outer, inner }, flag, "concat")
    }

    /// `len` consecutive entries along `axis`, starting at `start`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::dim("narrow", format!("{shape:?} axis {axis} [{start}, {})", start + len)));
        }
        let (outer, n, inner) = split_shape(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let flag = self.grad_flag(&[x]);
        self.push(Tensor::new(&out_shape, out)?, Op::Narrow { x, outer, n, inner, start, len }, flag, "narrow")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let flag = self.grad_flag(&[x]);
        self.push(out, Op::Reshape(x), flag, "reshape")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        let flag = self.grad_flag(&[x]);
        self.push(out, Op::Sum(x), flag, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let out = Tensor::scalar(v.sum() / v.len() as f64);
        let flag = self.grad_flag(&[x]);
        self.push(out, Op::Mean(x), flag, "mean")
    }

    /// `x / sum(x)`.
    pub fn normalize_sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).sum();
        let out = self.value(x).map(|v| v / total);
        let flag = self.grad_flag(&[x]);
        self.push(out, Op::NormalizeSum { x, total }, flag, "normalize_sum")
    }

    /// Mean over positions of `-log softmax(logits)[target]` with classes along `axis`.
    ///
    /// `targets` holds one class index per position, positions ordered as the
    /// logits with `axis` removed.
    pub fn cross_entropy(&mut self, logits: Var, axis: usize, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("cross_entropy", format!("axis {axis} for shape {shape:?}")));
        }
        let (outer, n, inner) = split_shape(&shape, axis);
        if targets.len() != outer * inner {
            return Err(Error::dim(
                "cross_entropy",
                format!("{} targets for {} positions", targets.len(), outer * inner),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::Contract(format!("class index {bad} out of range for {n} classes")));
        }
        let src = self.value(logits).data();
        let mut probs = src.to_vec();
        softmax_in_place(&mut probs, outer, n, inner);
        let mut total = 0.0;
        for o in 0..outer {
            for i in 0..inner {
                let t = targets[o * inner + i];
                let base = o * n * inner + i;
                let max = (0..n).map(|c| src[base + c * inner]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..n).map(|c| (src[base + c * inner] - max).exp()).sum::<f64>().ln();
                total += lse - src[base + t * inner];
            }
        }
        let count = (outer * inner) as f64;
        let flag = self.grad_flag(&[logits]);
        self.push(
            Tensor::scalar(total / count),
            Op::CrossEntropy { logits, probs, targets: targets.to_vec(), outer, n, inner },
            flag,
            "cross_entropy",
        )
    }

    /// `x²` whose recorded gradient is deliberately wrong (`3x`). Negative control for gradient checking.
    #[doc(hidden)]
    pub fn faulty_square(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v * v);
        let flag = self.grad_flag(&[x]);
        self.push(out, Op::FaultySquare(x), flag, "faulty_square")
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.backward_scaled(loss, 1.0)
    }

    /// Reverse pass seeded with `seed` instead of 1.
    pub fn backward_scaled(&self, loss: Var, seed: f64) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![seed]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Input | Op::Param) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
        }
        let params = self.params.iter().map(|(&id, &v)| (id, v)).collect();
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        match op {
            Op::Input | Op::Param => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                self.acc(grads, *a, |ga| gemm(m, n, k, 1.0, g, false, val(*b), true, 1.0, ga));
                self.acc(grads, *b, |gb| gemm(k, m, n, 1.0, val(*a), true, g, false, 1.0, gb));
            }
            Op::Transpose { x, rows, cols } => {
                let (rows, cols) = (*rows, *cols);
                self.acc(grads, *x, |gx| {
                    for r in 0..rows {
                        for c in 0..cols {
                            gx[r * cols + c] += g[c * rows + r];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |ga| add_into(ga, g));
                self.acc(grads, *b, |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |ga| add_into(ga, g));
                self.acc(grads, *b, |gb| gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s));
            }
            Op::Mul(a, b) => {
                self.acc(grads, *a, |ga| {
                    for ((d, s), y) in ga.iter_mut().zip(g).zip(val(*b)) {
                        *d += s * y;
                    }
                });
                self.acc(grads, *b, |gb| {
                    for ((d, s), x) in gb.iter_mut().zip(g).zip(val(*a)) {
                        *d += s * x;
                    }
                });
            }
            Op::AddRowBias { x, bias, cols } => {
                self.acc(grads, *x, |gx| add_into(gx, g));
                self.acc(grads, *bias, |gb| {
                    for row in g.chunks(*cols) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Affine { x, scale } => {
                self.acc(grads, *x, |gx| gx.iter_mut().zip(g).for_each(|(d, s)| *d += scale * s));
            }
            Op::Relu(x) => {
                self.acc(grads, *x, |gx| {
                    for ((d, s), xv) in gx.iter_mut().zip(g).zip(val(*x)) {
                        if *xv > 0.0 {
                            *d += s;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                self.acc(grads, *x, |gx| {
                    for ((d, s), y) in gx.iter_mut().zip(g).zip(out.data()) {
                        *d += s * y * (1.0 - y);
                    }
                });
            }
            Op::Tanh(x) => {
                self.acc(grads, *x, |gx| {
                    for ((d, s), y) in gx.iter_mut().zip(g).zip(out.data()) {
                        *d += s * (1.0 - y * y);
                    }
                });
            }
            Op::Softmax { x, outer, n, inner } => {
                let (outer, n, inner) = (*outer, *n, *inner);
                let y = out.data();
                self.acc(grads, *x, |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * n * inner + i;
                            let dot: f64 = (0..n).map(|c| g[base + c * inner] * y[base + c * inner]).sum();
                            for c in 0..n {
                                let j = base + c * inner;
                                gx[j] += y[j] * (g[j] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let d = self.nodes[gain.0].value.len();
                let gain_v = val(*gain);
                self.acc(grads, *gain, |gg| {
                    for (row_g, row_x) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += row_g[j] * row_x[j];
                        }
                    }
                });
                self.acc(grads, *bias, |gb| {
                    for row in g.chunks(d) {
                        add_into(gb, row);
                    }
                });
                self.acc(grads, *x, |gx| {
                    let mut dxhat = vec![0.0; d];
                    for (r, is) in inv_std.iter().enumerate() {
                        let rg = &g[r * d..(r + 1) * d];
                        let rx = &xhat[r * d..(r + 1) * d];
                        let mut sum = 0.0;
                        let mut sum_x = 0.0;
                        for j in 0..d {
                            dxhat[j] = rg[j] * gain_v[j];
                            sum += dxhat[j];
                            sum_x += dxhat[j] * rx[j];
                        }
                        let inv_d = 1.0 / d as f64;
                        for j in 0..d {
                            gx[r * d + j] += is * (dxhat[j] - inv_d * sum - rx[j] * inv_d * sum_x);
                        }
                    }
                });
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let p = geom.ho * geom.wo;
                let ckk = geom.c_in * geom.kh * geom.kw;
                self.acc(grads, *w, |gw| gemm(geom.c_out, p, ckk, 1.0, g, false, cols, true, 1.0, gw));
                if let Some(b) = b {
                    self.acc(grads, *b, |gb| {
                        for (o, d) in gb.iter_mut().enumerate() {
                            *d += g[o * p..(o + 1) * p].iter().sum::<f64>();
                        }
                    });
                }
                if self.nodes[x.0].needs_grad {
                    let mut dcols = vec![0.0; ckk * p];
                    gemm(ckk, geom.c_out, p, 1.0, val(*w), true, g, false, 0.0, &mut dcols);
                    self.acc(grads, *x, |gx| col2im(&dcols, geom, gx));
                }
            }
            Op::Resize { x, channels, in_h, in_w, rows, cols } => {
                let (oh, ow) = (rows.lo.len(), cols.lo.len());
                let (ih, iw) = (*in_h, *in_w);
                self.acc(grads, *x, |gx| {
                    for c in 0..*channels {
                        let src = &mut gx[c * ih * iw..(c + 1) * ih * iw];
                        let gc = &g[c * oh * ow..(c + 1) * oh * ow];
                        for oy in 0..oh {
                            let (y0, y1, ly) = (rows.lo[oy], rows.hi[oy], rows.frac[oy]);
                            for ox in 0..ow {
                                let (x0, x1, lx) = (cols.lo[ox], cols.hi[ox], cols.frac[ox]);
                                let gv = gc[oy * ow + ox];
                                let top = gv * (1.0 - ly);
                                let bot = gv * ly;
                                src[y0 * iw + x0] += top * (1.0 - lx);
                                src[y0 * iw + x1] += top * lx;
                                src[y1 * iw + x0] += bot * (1.0 - lx);
                                src[y1 * iw + x1] += bot * lx;
                            }
                        }
                    }
                });
            }
            Op::Concat { parts, outer, inner } => {
                let total: usize = parts.iter().map(|(_, n)| n).sum();
                let mut offset = 0;
                for &(p, n) in parts {
                    self.acc(grads, p, |gp| {
                        for o in 0..*outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + n) * inner];
                            add_into(&mut gp[o * n * inner..(o + 1) * n * inner], src);
                        }
                    });
                    offset += n;
                }
            }
            Op::Narrow { x, outer, n, inner, start, len } => {
                self.acc(grads, *x, |gx| {
                    for o in 0..*outer {
                        let dst = o * n * inner + start * inner;
                        let src = o * len * inner;
                        add_into(&mut gx[dst..dst + len * inner], &g[src..src + len * inner]);
                    }
                });
            }
            Op::Reshape(x) => self.acc(grads, *x, |gx| add_into(gx, g)),
            Op::Sum(x) => self.acc(grads, *x, |gx| gx.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(x) => {
                let scale = g[0] / self.nodes[x.0].value.len() as f64;
                self.acc(grads, *x, |gx| gx.iter_mut().for_each(|d| *d += scale));
            }
            Op::NormalizeSum { x, total } => {
                let y = out.data();
                let dot: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                self.acc(grads, *x, |gx| {
                    for (d, gv) in gx.iter_mut().zip(g) {
                        *d += (gv - dot) / total;
                    }
                });
            }
            Op::CrossEntropy { logits, probs, targets, outer, n, inner } => {
                let scale = g[0] / (outer * inner) as f64;
                self.acc(grads, *logits, |gl| {
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let t = targets[o * inner + i];
                            let base = o * n * inner + i;
                            for c in 0..*n {
                                let j = base + c * inner;
                                let onehot = if c == t { 1.0 } else { 0.0 };
                                gl[j] += scale * (probs[j] - onehot);
                            }
                        }
                    }
                });
            }
            Op::FaultySquare(x) => {
                self.acc(grads, *x, |gx| {
                    for ((d, s), xv) in gx.iter_mut().zip(g).zip(val(*x)) {
                        *d += 3.0 * xv * s;
                    }
                });
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return;
        }
        let buf = grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]);
        f(buf);
    }
}

/// Result of a reverse pass: gradients of every leaf that needed one.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient with respect to a leaf (input or parameter) variable.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn to_buffer(&self, num_params: usize) -> GradBuffer {
        let mut buf = GradBuffer::new(num_params);
        let mut params = self.params.clone();
        params.sort_by_key(|(id, _)| *id);
        for (id, v) in params {
            if let Some(g) = self.wrt(v) {
                buf.add(id, g);
            }
        }
        buf
    }

    /// Adds every parameter gradient into the store's grad slots.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(id, v) in &self.params {
            if let Some(g) = self.wrt(v) {
                let dst = &mut store.get_mut(id).grad;
                dst.data_mut().iter_mut().zip(g).for_each(|(d, s)| *d += s);
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

pub fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_in_place(data: &mut [f64], outer: usize, n: usize, inner: usize) {
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let max = (0..n).map(|c| data[base + c * inner]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for c in 0..n {
                let e = (data[base + c * inner] - max).exp();
                data[base + c * inner] = e;
                sum += e;
            }
            for c in 0..n {
                data[base + c * inner] /= sum;
            }
        }
    }
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = g.ho * g.wo;
    let mut cols = vec![0.0; g.c_in * g.kh * g.kw * p];
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = ((c * g.kh + i) * g.kw + j) * p;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let dst = &mut cols[row + oy * g.wo..row + (oy + 1) * g.wo];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + j) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let p = g.ho * g.wo;
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = ((c * g.kh + i) * g.kw + j) * p;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &cols[row + oy * g.wo..row + (oy + 1) * g.wo];
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, s) in src.iter().enumerate() {
                        let ix = (ox * g.stride + j) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += s;
                        }
                    }
                }
            }
        }
    }
}

fn resize_forward(x: &[f64], channels: usize, ih: usize, iw: usize, rows: &AxisPlan, cols: &AxisPlan) -> Vec<f64> {
    let (oh, ow) = (rows.lo.len(), cols.lo.len());
    let mut out = vec![0.0; channels * oh * ow];
    for c in 0..channels {
        let src = &x[c * ih * iw..(c + 1) * ih * iw];
        let dst = &mut out[c * oh * ow..(c + 1) * oh * ow];
        for oy in 0..oh {
            let (y0, y1, ly) = (rows.lo[oy], rows.hi[oy], rows.frac[oy]);
            for ox in 0..ow {
                let (x0, x1, lx) = (cols.lo[ox], cols.hi[ox], cols.frac[ox]);
                let a = src[y0 * iw + x0];
                let b = src[y0 * iw + x1];
                let c2 = src[y1 * iw + x0];
                let d = src[y1 * iw + x1];
                // lerp form keeps constant inputs exact
                let top = a + lx * (b - a);
                let bot = c2 + lx * (d - c2);
                dst[oy * ow + ox] = top + ly * (bot - top);
            }
        }
    }
    out
}

/// Plain bilinear resize of a `[C, H, W]` tensor, no graph involved.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 3 || out_h == 0 || out_w == 0 {
        return Err(Error::dim("resize_bilinear", format!("{s:?} -> {out_h}x{out_w}")));
    }
    let rows = AxisPlan::new(s[1], out_h);
    let cols = AxisPlan::new(s[2], out_w);
    Tensor::new(&[s[0], out_h, out_w], resize_forward(x.data(), s[0], s[1], s[2], &rows, &cols))
}
