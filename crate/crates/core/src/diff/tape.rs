use super::conv::{self, ConvGeom, Padding};
use super::tensor::Tensor;
use crate::error::{NeatError, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddBias(Var, Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Softmax { x: Var, axis: usize },
    LogSumExp(Var),
    Gather(Var, Vec<usize>),
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Upsample2x(Var),
    AvgPool(Var, usize),
    ChannelMean(Var),
    ChannelStd(Var),
    InstanceNorm(Var, f64),
    L2Norm(Var),
    L2NormalizeRows(Var),
    Concat(Vec<Var>),
    Crop { x: Var, top: usize, left: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::AddBias(..) => "add_bias",
            Op::Relu(..) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Softplus(..) => "softplus",
            Op::Clamp(..) => "clamp",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Softmax { .. } => "softmax",
            Op::LogSumExp(..) => "logsumexp",
            Op::Gather(..) => "gather",
            Op::Conv2d { .. } => "conv2d",
            Op::Upsample2x(..) => "upsample2x",
            Op::AvgPool(..) => "avg_pool",
            Op::ChannelMean(..) => "channel_mean",
            Op::ChannelStd(..) => "channel_std",
            Op::InstanceNorm(..) => "instance_norm",
            Op::L2Norm(..) => "l2_norm",
            Op::L2NormalizeRows(..) => "l2_normalize_rows",
            Op::Concat(..) => "concat",
            Op::Crop { .. } => "crop",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Tensor::new(self.shapes[v.0].clone(), g.clone()).ok()
    }

    /// Gradient data, or zeros when nothing flowed into `v`.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

/// Reverse-mode recording of a computation. One tape per logical thread.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(NeatError::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn chw(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(NeatError::shape(op, format!("expected [C,H,W], got {:?}", t.shape()))),
    }
}

fn matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(NeatError::shape(op, format!("expected a matrix, got {:?}", t.shape()))),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Copy of `v` cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.nodes[x.0].value.map(f);
        self.push(value, op, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        check_same("add", va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        check_same("sub", va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        check_same("mul", va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        self.unary(x, Op::Scale(x, k), |v| v * k)
    }

    pub fn add_scalar(&mut self, x: Var, k: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + k)
    }

    /// `x[r, c] + b[c]` for a matrix `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (rows, cols) = matrix("add_bias", &self.nodes[x.0].value)?;
        let vb = &self.nodes[b.0].value;
        if vb.len() != cols {
            return Err(NeatError::shape(
                "add_bias",
                format!("bias {:?} for {} columns", vb.shape(), cols),
            ));
        }
        let bias = vb.data();
        let mut data = self.nodes[x.0].value.data().to_vec();
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] += bias[c];
            }
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(value, Op::AddBias(x, b), &[x, b]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(x, Op::LeakyRelu(x, slope), |v| if v > 0.0 { v } else { slope * v })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softplus(x), softplus)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Op::Clamp(x, lo, hi), |v| v.clamp(lo, hi))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix("matmul", &self.nodes[a.0].value)?;
        let (k2, n) = matrix("matmul", &self.nodes[b.0].value)?;
        if k != k2 {
            return Err(NeatError::shape(
                "matmul",
                format!("[{m},{k}] x [{k2},{n}]"),
            ));
        }
        let mut out = vec![0.0; m * n];
        conv::gemm(
            m,
            k,
            n,
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            &mut out,
            false,
        );
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = matrix("transpose", &self.nodes[x.0].value)?;
        let src = self.nodes[x.0].value.data();
        let mut out = vec![0.0; r * c];
        transpose_into(src, r, c, &mut out, |d, s| *d = s);
        let value = Tensor::new(vec![c, r], out)?;
        Ok(self.push(value, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[x.0].value.clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        if axis >= v.shape().len() {
            return Err(NeatError::shape(
                "softmax",
                format!("axis {axis} for shape {:?}", v.shape()),
            ));
        }
        let (outer, n, inner) = split_axis(v.shape(), axis);
        let src = v.data();
        let mut out = vec![0.0; src.len()];
        if inner == 1 && n > 0 {
            for (row, dst) in src.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for (d, &x) in dst.iter_mut().zip(row) {
                    *d = (x - max).exp();
                    total += *d;
                }
                dst.iter_mut().for_each(|d| *d /= total);
            }
            let value = Tensor::new(v.shape().to_vec(), out)?;
            return Ok(self.push(value, Op::Softmax { x, axis }, &[x]));
        }
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| src[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..n {
                    let e = (src[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    out[idx(j)] /= total;
                }
            }
        }
        let value = Tensor::new(v.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Softmax { x, axis }, &[x]))
    }

    /// `log(sum(exp(x)))` over every element.
    pub fn logsumexp(&mut self, x: Var) -> Var {
        let src = self.nodes[x.0].value.data();
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let s = max + src.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        self.push(Tensor::scalar(s), Op::LogSumExp(x), &[x])
    }

    /// Flat-index selection into a 1-D result.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let src = self.nodes[x.0].value.data();
        if let Some(&bad) = indices.iter().find(|&&i| i >= src.len()) {
            return Err(NeatError::shape(
                "gather",
                format!("index {bad} out of {} elements", src.len()),
            ));
        }
        let out = indices.iter().map(|&i| src[i]).collect();
        Ok(self.push(
            Tensor::from_vec(out),
            Op::Gather(x, indices.to_vec()),
            &[x],
        ))
    }

    /// Same-size (odd kernel) or strided convolution of a `[C,H,W]` map.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let (c, h, wd) = chw("conv2d", &self.nodes[x.0].value)?;
        let ws = self.nodes[w.0].value.shape().to_vec();
        let [co, ci, kh, kw] = ws[..] else {
            return Err(NeatError::shape("conv2d", format!("weight {ws:?}")));
        };
        if ci != c || kh != kw || kh % 2 == 0 || stride == 0 {
            return Err(NeatError::shape(
                "conv2d",
                format!("input [{c},{h},{wd}] with weight {ws:?}, stride {stride}"),
            ));
        }
        if let Some(b) = b {
            if self.nodes[b.0].value.len() != co {
                return Err(NeatError::shape(
                    "conv2d",
                    format!("bias {:?} for {co} outputs", self.nodes[b.0].value.shape()),
                ));
            }
        }
        let geom = ConvGeom {
            in_channels: c,
            height: h,
            width: wd,
            kernel: kh,
            stride,
            pad: kh / 2,
            padding,
        };
        if h + 2 * geom.pad < kh || wd + 2 * geom.pad < kh {
            return Err(NeatError::shape("conv2d", format!("input {h}x{wd} too small")));
        }
        let y = conv::conv2d_forward(
            self.nodes[x.0].value.data(),
            self.nodes[w.0].value.data(),
            b.map(|b| self.nodes[b.0].value.data()),
            co,
            &geom,
        );
        let value = Tensor::new(vec![co, geom.out_height(), geom.out_width()], y)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, &inputs))
    }

    /// Nearest-neighbour ×2 upsampling of a `[C,H,W]` map.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = chw("upsample2x", &self.nodes[x.0].value)?;
        let src = self.nodes[x.0].value.data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![0.0; c * h2 * w2];
        for ch in 0..c {
            for y in 0..h2 {
                for xx in 0..w2 {
                    out[(ch * h2 + y) * w2 + xx] = src[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        let value = Tensor::new(vec![c, h2, w2], out)?;
        Ok(self.push(value, Op::Upsample2x(x), &[x]))
    }

    /// Non-overlapping `k×k` average pooling; H and W must be multiples of `k`.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let (c, h, w) = chw("avg_pool", &self.nodes[x.0].value)?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(NeatError::shape(
                "avg_pool",
                format!("{h}x{w} not divisible by {k}"),
            ));
        }
        let src = self.nodes[x.0].value.data();
        let (ho, wo) = (h / k, w / k);
        let norm = 1.0 / (k * k) as f64;
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    out[(ch * ho + y / k) * wo + xx / k] += src[(ch * h + y) * w + xx] * norm;
                }
            }
        }
        let value = Tensor::new(vec![c, ho, wo], out)?;
        Ok(self.push(value, Op::AvgPool(x, k), &[x]))
    }

    /// Per-channel spatial mean of `[C,H,W]` → `[C]`.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = chw("channel_mean", &self.nodes[x.0].value)?;
        let src = self.nodes[x.0].value.data();
        let n = (h * w) as f64;
        let out = src.chunks(h * w).take(c).map(|p| p.iter().sum::<f64>() / n).collect();
        Ok(self.push(Tensor::from_vec(out), Op::ChannelMean(x), &[x]))
    }

    /// Per-channel spatial standard deviation `sqrt(var + eps)` → `[C]`.
    pub fn channel_std(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (_, h, w) = chw("channel_std", &self.nodes[x.0].value)?;
        let src = self.nodes[x.0].value.data();
        let out = src
            .chunks(h * w)
            .map(|p| {
                let (_, var) = mean_var(p);
                (var + eps).sqrt()
            })
            .collect();
        Ok(self.push(Tensor::from_vec(out), Op::ChannelStd(x), &[x]))
    }

    /// Per-channel standardisation `(x - mean) / sqrt(var + eps)`.
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (c, h, w) = chw("instance_norm", &self.nodes[x.0].value)?;
        let src = self.nodes[x.0].value.data();
        let mut out = Vec::with_capacity(src.len());
        for p in src.chunks(h * w) {
            let (mean, var) = mean_var(p);
            let inv = 1.0 / (var + eps).sqrt();
            out.extend(p.iter().map(|v| (v - mean) * inv));
        }
        let value = Tensor::new(vec![c, h, w], out)?;
        Ok(self.push(value, Op::InstanceNorm(x, eps), &[x]))
    }

    /// Euclidean norm of all elements → scalar.
    pub fn l2_norm(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].value.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        self.push(Tensor::scalar(n), Op::L2Norm(x), &[x])
    }

    /// Normalise every row of a matrix to unit Euclidean length.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = matrix("l2_normalize_rows", &self.nodes[x.0].value)?;
        let src = self.nodes[x.0].value.data();
        let mut out = Vec::with_capacity(r * c);
        for row in src.chunks(c) {
            let n = row_norm(row);
            out.extend(row.iter().map(|v| v / n));
        }
        let value = Tensor::new(vec![r, c], out)?;
        Ok(self.push(value, Op::L2NormalizeRows(x), &[x]))
    }

    /// Concatenate along the leading axis; trailing dimensions must agree.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(first) = xs.first() else {
            return Err(NeatError::invalid("concat of zero inputs"));
        };
        let tail = self.nodes[first.0].value.shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for v in xs {
            let t = &self.nodes[v.0].value;
            if t.shape().is_empty() || t.shape()[1..] != tail[..] {
                return Err(NeatError::shape(
                    "concat",
                    format!("{:?} vs trailing {:?}", t.shape(), tail),
                ));
            }
            lead += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Concat(xs.to_vec()), xs))
    }

    /// Spatial crop `[C, top..top+h, left..left+w]`.
    pub fn crop(&mut self, x: Var, top: usize, left: usize, h: usize, w: usize) -> Result<Var> {
        let (c, hh, ww) = chw("crop", &self.nodes[x.0].value)?;
        if top + h > hh || left + w > ww || h == 0 || w == 0 {
            return Err(NeatError::shape(
                "crop",
                format!("{h}x{w} at ({top},{left}) from {hh}x{ww}"),
            ));
        }
        let src = self.nodes[x.0].value.data();
        let mut out = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for y in top..top + h {
                let base = (ch * hh + y) * ww;
                out.extend_from_slice(&src[base + left..base + left + w]);
            }
        }
        let value = Tensor::new(vec![c, h, w], out)?;
        Ok(self.push(value, Op::Crop { x, top, left }, &[x]))
    }

    /// First node whose value contains a NaN or infinity, by op name.
    pub fn check_finite(&self) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.value.all_finite() {
                return Err(NeatError::NonFinite(format!(
                    "op `{}` (node {i})",
                    node.op.name()
                )));
            }
        }
        Ok(())
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let n = self.nodes[loss.0].value.len();
        if n != 1 {
            return Err(NeatError::invalid(format!(
                "backward from a non-scalar with {n} elements"
            )));
        }
        self.backward_seeded(loss, Tensor::scalar(1.0))
    }

    /// Reverse pass with an explicit upstream gradient for `out`.
    pub fn backward_seeded(&self, out: Var, seed: Tensor) -> Result<Grads> {
        let out_shape = self.nodes[out.0].value.shape();
        if seed.len() != self.nodes[out.0].value.len() {
            return Err(NeatError::invalid(format!(
                "backward seed {:?} for output {:?}",
                seed.shape(),
                out_shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; out.0 + 1];
        grads[out.0] = Some(seed.into_data());
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes[..=out.0]
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Grads { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(vec![0.0; self.nodes[v.0].value.len()]);
        }
        f(slot.as_mut().unwrap());
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |d| add_into(d, g));
                self.accumulate(grads, *b, |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |d| add_into(d, g));
                self.accumulate(grads, *b, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                self.accumulate(grads, *a, |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * vb[k];
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * va[k];
                    }
                });
            }
            Op::Scale(x, k) => {
                self.accumulate(grads, *x, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += k * g));
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                self.accumulate(grads, *x, |d| add_into(d, g));
            }
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, |d| add_into(d, g));
                let cols = self.nodes[b.0].value.len();
                self.accumulate(grads, *b, |d| {
                    for row in g.chunks(cols) {
                        add_into(d, row);
                    }
                });
            }
            Op::Relu(x) => {
                let vx = val(*x);
                self.accumulate(grads, *x, |d| {
                    for k in 0..d.len() {
                        if vx[k] > 0.0 {
                            d[k] += g[k];
                        }
                    }
                });
            }
            Op::LeakyRelu(x, slope) => {
                let vx = val(*x);
                self.accumulate(grads, *x, |d| {
                    for k in 0..d.len() {
                        d[k] += if vx[k] > 0.0 { g[k] } else { slope * g[k] };
                    }
                });
            }
            Op::Sigmoid(x) => {
                self.accumulate(grads, *x, |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * out[k] * (1.0 - out[k]);
                    }
                });
            }
            Op::Tanh(x) => {
                self.accumulate(grads, *x, |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * (1.0 - out[k] * out[k]);
                    }
                });
            }
            Op::Softplus(x) => {
                let vx = val(*x);
                self.accumulate(grads, *x, |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * sigmoid(vx[k]);
                    }
                });
            }
            Op::Clamp(x, lo, hi) => {
                let vx = val(*x);
                self.accumulate(grads, *x, |d| {
                    for k in 0..d.len() {
                        if vx[k] >= *lo && vx[k] <= *hi {
                            d[k] += g[k];
                        }
                    }
                });
            }
            Op::Sum(x) => {
                self.accumulate(grads, *x, |d| d.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.len() as f64;
                self.accumulate(grads, *x, |d| d.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a.0].value.shape()[0], self.nodes[a.0].value.shape()[1]);
                let n = self.nodes[b.0].value.shape()[1];
                let (va, vb) = (val(*a), val(*b));
                // dA = G B^T, dB = A^T G
                self.accumulate(grads, *a, |d| conv::gemm_bt(m, n, k, g, vb, d, true));
                self.accumulate(grads, *b, |d| conv::gemm_at(k, m, n, va, g, d, true));
            }
            Op::Transpose(x) => {
                let (r, c) = (self.nodes[x.0].value.shape()[0], self.nodes[x.0].value.shape()[1]);
                self.accumulate(grads, *x, |d| transpose_into(g, c, r, d, |d, s| *d += s));
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                self.accumulate(grads, *x, |d| {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let idx = |j: usize| (o * n + j) * inner + ii;
                            let dot: f64 = (0..n).map(|j| g[idx(j)] * out[idx(j)]).sum();
                            for j in 0..n {
                                d[idx(j)] += out[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSumExp(x) => {
                let vx = val(*x);
                let s = out[0];
                self.accumulate(grads, *x, |d| {
                    for k in 0..d.len() {
                        d[k] += g[0] * (vx[k] - s).exp();
                    }
                });
            }
            Op::Gather(x, idx) => {
                self.accumulate(grads, *x, |d| {
                    for (k, &src) in idx.iter().enumerate() {
                        d[src] += g[k];
                    }
                });
            }
            Op::Conv2d { x, w, b, geom } => {
                let co = self.nodes[w.0].value.shape()[0];
                let kdim = geom.col_rows();
                let n = geom.out_height() * geom.out_width();
                let vx = val(*x);
                let vw = val(*w);
                if let Some(b) = b {
                    self.accumulate(grads, *b, |d| {
                        for (o, chunk) in g.chunks(n).enumerate() {
                            d[o] += chunk.iter().sum::<f64>();
                        }
                    });
                }
                if self.nodes[w.0].requires_grad {
                    self.accumulate(grads, *w, |d| {
                        if geom.is_pointwise() {
                            conv::gemm_bt(co, n, kdim, g, vx, d, true);
                        } else {
                            let cols = conv::im2col(vx, geom);
                            conv::gemm_bt(co, n, kdim, g, &cols, d, true);
                        }
                    });
                }
                if self.nodes[x.0].requires_grad {
                    self.accumulate(grads, *x, |d| {
                        if geom.is_pointwise() {
                            conv::gemm_at(kdim, co, n, vw, g, d, true);
                        } else {
                            let mut dcols = vec![0.0; kdim * n];
                            conv::gemm_at(kdim, co, n, vw, g, &mut dcols, false);
                            conv::col2im(&dcols, geom, d);
                        }
                    });
                }
            }
            Op::Upsample2x(x) => {
                let s = self.nodes[x.0].value.shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                let (h2, w2) = (2 * h, 2 * w);
                self.accumulate(grads, *x, |d| {
                    for ch in 0..c {
                        for y in 0..h2 {
                            for xx in 0..w2 {
                                d[(ch * h + y / 2) * w + xx / 2] += g[(ch * h2 + y) * w2 + xx];
                            }
                        }
                    }
                });
            }
            Op::AvgPool(x, k) => {
                let s = self.nodes[x.0].value.shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                let (ho, wo) = (h / k, w / k);
                let norm = 1.0 / (k * k) as f64;
                self.accumulate(grads, *x, |d| {
                    for ch in 0..c {
                        for y in 0..h {
                            for xx in 0..w {
                                d[(ch * h + y) * w + xx] += g[(ch * ho + y / k) * wo + xx / k] * norm;
                            }
                        }
                    }
                });
            }
            Op::ChannelMean(x) => {
                let s = self.nodes[x.0].value.shape();
                let plane = s[1] * s[2];
                self.accumulate(grads, *x, |d| {
                    for (ch, p) in d.chunks_mut(plane).enumerate() {
                        let gg = g[ch] / plane as f64;
                        p.iter_mut().for_each(|v| *v += gg);
                    }
                });
            }
            Op::ChannelStd(x) => {
                let s = self.nodes[x.0].value.shape();
                let plane = s[1] * s[2];
                let vx = val(*x);
                self.accumulate(grads, *x, |d| {
                    for (ch, (dp, xp)) in d.chunks_mut(plane).zip(vx.chunks(plane)).enumerate() {
                        let (mean, _) = mean_var(xp);
                        let k = g[ch] / (plane as f64 * out[ch]);
                        for (dv, xv) in dp.iter_mut().zip(xp) {
                            *dv += k * (xv - mean);
                        }
                    }
                });
            }
            Op::InstanceNorm(x, eps) => {
                let s = self.nodes[x.0].value.shape();
                let plane = s[1] * s[2];
                let vx = val(*x);
                self.accumulate(grads, *x, |d| {
                    for ch in 0..s[0] {
                        let r = ch * plane..(ch + 1) * plane;
                        let (_, var) = mean_var(&vx[r.clone()]);
                        let inv = 1.0 / (var + eps).sqrt();
                        let (gp, yp) = (&g[r.clone()], &out[r.clone()]);
                        let gmean = gp.iter().sum::<f64>() / plane as f64;
                        let gy = gp.iter().zip(yp).map(|(a, b)| a * b).sum::<f64>() / plane as f64;
                        for (k, dv) in d[r].iter_mut().enumerate() {
                            *dv += inv * (gp[k] - gmean - yp[k] * gy);
                        }
                    }
                });
            }
            Op::L2Norm(x) => {
                let vx = val(*x);
                let n = out[0];
                if n > 0.0 {
                    self.accumulate(grads, *x, |d| {
                        for k in 0..d.len() {
                            d[k] += g[0] * vx[k] / n;
                        }
                    });
                }
            }
            Op::L2NormalizeRows(x) => {
                let vx = val(*x);
                let c = node.value.shape()[1];
                self.accumulate(grads, *x, |d| {
                    for (r, drow) in d.chunks_mut(c).enumerate() {
                        let span = r * c..(r + 1) * c;
                        let n = row_norm(&vx[span.clone()]);
                        let (y, gr) = (&out[span.clone()], &g[span]);
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for k in 0..c {
                            drow[k] += (gr[k] - y[k] * dot) / n;
                        }
                    }
                });
            }
            Op::Concat(xs) => {
                let mut offset = 0;
                for v in xs {
                    let len = self.nodes[v.0].value.len();
                    self.accumulate(grads, *v, |d| add_into(d, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::Crop { x, top, left } => {
                let s = self.nodes[x.0].value.shape();
                let (ww, hh) = (s[2], s[1]);
                let os = node.value.shape();
                let (c, h, w) = (os[0], os[1], os[2]);
                self.accumulate(grads, *x, |d| {
                    for ch in 0..c {
                        for y in 0..h {
                            let dst = (ch * hh + top + y) * ww + left;
                            let src = (ch * h + y) * w;
                            add_into(&mut d[dst..dst + w], &g[src..src + w]);
                        }
                    }
                });
            }
        }
    }
}

fn add_into(d: &mut [f64], g: &[f64]) {
    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn mean_var(p: &[f64]) -> (f64, f64) {
    let n = p.len() as f64;
    let mean = p.iter().sum::<f64>() / n;
    let var = p.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

fn row_norm(row: &[f64]) -> f64 {
    row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12)
}

/// Tiled `dst[j, i] (op)= src[i, j]` for an `[r, c]` source; tiling keeps
/// large transposes cache-friendly.
fn transpose_into(src: &[f64], r: usize, c: usize, dst: &mut [f64], op: impl Fn(&mut f64, f64)) {
    const TILE: usize = 32;
    for i0 in (0..r).step_by(TILE) {
        for j0 in (0..c).step_by(TILE) {
            for i in i0..(i0 + TILE).min(r) {
                for j in j0..(j0 + TILE).min(c) {
                    op(&mut dst[j * r + i], src[i * c + j]);
                }
            }
        }
    }
}
