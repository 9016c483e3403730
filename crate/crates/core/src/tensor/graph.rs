use std::collections::BTreeMap;

use super::conv::{conv_backward, conv_forward, gemm, ConvGeom};
use super::{Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Eval,
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operator kinds, exposed for diagnostics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Conv2d,
    BatchNorm,
    Relu,
    Add,
    MaxPool,
    AvgPool,
    Upsample,
    GlobalAvgPool,
    Linear,
    Softmax,
    LogSoftmax,
    MatMul,
    Elementwise,
    Reduce,
    Layout,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, batch_stats: bool },
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Abs(Var),
    Square(Var),
    SmoothL1(Var),
    LogClamp(Var, f64),
    Sum(Var),
    MaxPool { x: Var, argmax: Vec<usize> },
    AvgPool { x: Var, k: usize },
    Upsample { x: Var, f: usize },
    GlobalAvgPool(Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Softmax(Var),
    LogSoftmax(Var),
    MatMul(Var, Var),
    NchwToRows(Var),
    GatherRows { x: Var, rows: Vec<usize> },
    Reshape(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batchnorm",
            Op::Relu(_) => "relu",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Abs(_) => "abs",
            Op::Square(_) => "square",
            Op::SmoothL1(_) => "smooth_l1",
            Op::LogClamp(..) => "log_clamp",
            Op::Sum(_) => "sum",
            Op::MaxPool { .. } => "maxpool",
            Op::AvgPool { .. } => "avgpool",
            Op::Upsample { .. } => "upsample",
            Op::GlobalAvgPool(_) => "global_avgpool",
            Op::Linear { .. } => "linear",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::MatMul(..) => "matmul",
            Op::NchwToRows(_) => "nchw_to_rows",
            Op::GatherRows { .. } => "gather_rows",
            Op::Reshape(_) => "reshape",
        }
    }

    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::Relu(_) => OpKind::Relu,
            Op::Add(..) => OpKind::Add,
            Op::MaxPool { .. } => OpKind::MaxPool,
            Op::AvgPool { .. } => OpKind::AvgPool,
            Op::Upsample { .. } => OpKind::Upsample,
            Op::GlobalAvgPool(_) => OpKind::GlobalAvgPool,
            Op::Linear { .. } => OpKind::Linear,
            Op::Softmax(_) => OpKind::Softmax,
            Op::LogSoftmax(_) => OpKind::LogSoftmax,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Sum(_) => OpKind::Reduce,
            Op::NchwToRows(_) | Op::GatherRows { .. } | Op::Reshape(_) => OpKind::Layout,
            _ => OpKind::Elementwise,
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Batch statistics observed by a train-mode BatchNorm.
#[derive(Clone, Debug, PartialEq)]
pub struct BnBatchStats {
    pub prefix: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Parameter gradients keyed by parameter name.
pub type Gradients = BTreeMap<String, Vec<f64>>;

/// A single forward/backward tape.
pub struct Graph {
    mode: Mode,
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
    bn_stats: Vec<BnBatchStats>,
    grads: Option<Vec<Option<Vec<f64>>>>,
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::Shape { op, detail }
}

impl Graph {
    pub fn new(mode: Mode) -> Self {
        Self { mode, nodes: Vec::new(), params: BTreeMap::new(), bn_stats: Vec::new(), grads: None }
    }

    pub fn mode(&self) -> Mode {
        self.mode
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

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Gradient of the last `backward` loss w.r.t. `v`, if it was tracked.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.as_ref()?.get(v.0)?.as_deref()
    }

    pub fn bn_stats(&self) -> &[BnBatchStats] {
        &self.bn_stats
    }

    /// Non-differentiable input.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, false)
    }

    /// Differentiable leaf not bound to a parameter name.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, true)
    }

    /// Binds a named parameter. Registering the same name twice returns the
    /// first node.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.push_leaf(t.clone(), self.mode == Mode::Train);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn param_vars(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    fn push_leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Result<Var> {
        let id = self.nodes.len();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { node: id, op: op.name() });
        }
        let requires_grad = self.mode == Mode::Train && self.inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        let value = Tensor::new(shape, data)?;
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(id))
    }

    fn inputs(&self, op: &Op) -> Vec<Var> {
        match *op {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![x, w];
                v.extend(b);
                v
            }
            Op::BatchNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::Linear { x, w, b } => {
                let mut v = vec![x, w];
                v.extend(b);
                v
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![a, b],
            Op::Relu(x)
            | Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Abs(x)
            | Op::Square(x)
            | Op::SmoothL1(x)
            | Op::LogClamp(x, _)
            | Op::Sum(x)
            | Op::GlobalAvgPool(x)
            | Op::Softmax(x)
            | Op::LogSoftmax(x)
            | Op::NchwToRows(x)
            | Op::Reshape(x) => vec![x],
            Op::MaxPool { x, .. } | Op::AvgPool { x, .. } | Op::Upsample { x, .. } | Op::GatherRows { x, .. } => {
                vec![x]
            }
        }
    }

    fn nchw(&self, v: Var, op: &'static str) -> Result<[usize; 4]> {
        match *self.shape(v) {
            [n, c, h, w] => Ok([n, c, h, w]),
            ref s => Err(shape_err(op, format!("expected NCHW input, got {s:?}"))),
        }
    }

    fn matrix(&self, v: Var, op: &'static str) -> Result<[usize; 2]> {
        match *self.shape(v) {
            [r, c] => Ok([r, c]),
            ref s => Err(shape_err(op, format!("expected a matrix, got {s:?}"))),
        }
    }

    // ---- ops --------------------------------------------------------------

    /// 2-D convolution with "same"-style padding `pad`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let [n, c_in, h, wd] = self.nchw(x, "conv2d")?;
        let [c_out, wc_in, k, k2] = self.nchw(w, "conv2d")?;
        if wc_in != c_in || k != k2 {
            return Err(shape_err(
                "conv2d",
                format!("input {:?} incompatible with weight {:?}", self.shape(x), self.shape(w)),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(shape_err("conv2d", format!("bias {:?} for {c_out} outputs", self.shape(b))));
            }
        }
        if stride == 0 {
            return Err(shape_err("conv2d", "stride must be positive".into()));
        }
        let geom = ConvGeom::new(c_in, h, wd, c_out, k, stride, pad)
            .ok_or_else(|| shape_err("conv2d", format!("kernel {k} larger than padded input {h}x{wd}")))?;
        let out = conv_forward(
            &geom,
            n,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        self.push(vec![n, c_out, geom.h_out, geom.w_out], out, Op::Conv2d { x, w, b, geom })
    }

    /// BatchNorm over NCHW. In train mode normalizes with (biased) batch
    /// statistics and records them under `prefix`; in eval mode uses the
    /// supplied running statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
        prefix: &str,
    ) -> Result<Var> {
        let [n, c, h, w] = self.nchw(x, "batchnorm")?;
        for (name, len) in [
            ("gamma", self.value(gamma).numel()),
            ("beta", self.value(beta).numel()),
            ("running_mean", running_mean.len()),
            ("running_var", running_var.len()),
        ] {
            if len != c {
                return Err(shape_err("batchnorm", format!("{prefix}: {name} has {len} entries for {c} channels")));
            }
        }
        let hw = h * w;
        let m = (n * hw) as f64;
        let xd = self.value(x).data();
        let batch_stats = self.mode == Mode::Train;
        let (mean, var) = if batch_stats {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut s = 0.0;
                for b in 0..n {
                    s += xd[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().sum::<f64>();
                }
                let mu = s / m;
                let mut ss = 0.0;
                for b in 0..n {
                    ss += xd[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
                }
                mean[ch] = mu;
                var[ch] = ss / m;
            }
            (mean, var)
        } else {
            (running_mean.to_vec(), running_var.to_vec())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                for i in base..base + hw {
                    let xh = (xd[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        if batch_stats {
            self.bn_stats.push(BnBatchStats { prefix: prefix.to_string(), mean, var });
        }
        self.push(vec![n, c, h, w], out, Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = t.data().iter().map(|v| v.max(0.0)).collect();
        self.push(t.shape().to_vec(), out, Op::Relu(x))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, op.name())?;
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| f(*x, *y)).collect();
        self.push(self.shape(a).to_vec(), out, op)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let t = self.value(x);
        let out = t.data().iter().map(|v| f(*v)).collect();
        self.push(t.shape().to_vec(), out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        self.unary(x, Op::Scale(x, k), |v| v * k)
    }

    pub fn add_scalar(&mut self, x: Var, k: f64) -> Result<Var> {
        self.unary(x, Op::AddScalar(x), |v| v + k)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Abs(x), f64::abs)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    /// Elementwise smooth-L1 (Huber with threshold 1).
    pub fn smooth_l1(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::SmoothL1(x), |v| if v.abs() < 1.0 { 0.5 * v * v } else { v.abs() - 0.5 })
    }

    /// `ln(max(x, eps))`.
    pub fn log_clamp(&mut self, x: Var, eps: f64) -> Result<Var> {
        self.unary(x, Op::LogClamp(x, eps), |v| v.max(eps).ln())
    }

    /// Sum of all entries, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(vec![1], vec![s], Op::Sum(x))
    }

    /// Non-overlapping max pooling with window = stride = `k`.
    pub fn max_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let [n, c, h, w] = self.nchw(x, "maxpool")?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(shape_err("maxpool", format!("{h}x{w} not divisible by window {k}")));
        }
        let (ho, wo) = (h / k, w / k);
        let xd = self.value(x).data();
        let mut out = vec![0.0; n * c * ho * wo];
        let mut argmax = vec![0; out.len()];
        for p in 0..n * c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut arg = 0;
                    for dy in 0..k {
                        for dx in 0..k {
                            let i = (p * h + oy * k + dy) * w + ox * k + dx;
                            if xd[i] > best {
                                best = xd[i];
                                arg = i;
                            }
                        }
                    }
                    let o = (p * ho + oy) * wo + ox;
                    out[o] = best;
                    argmax[o] = arg;
                }
            }
        }
        self.push(vec![n, c, ho, wo], out, Op::MaxPool { x, argmax })
    }

    /// Non-overlapping average pooling with window = stride = `k`.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let [n, c, h, w] = self.nchw(x, "avgpool")?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(shape_err("avgpool", format!("{h}x{w} not divisible by window {k}")));
        }
        let (ho, wo) = (h / k, w / k);
        let xd = self.value(x).data();
        let mut out = vec![0.0; n * c * ho * wo];
        let inv = 1.0 / (k * k) as f64;
        for p in 0..n * c {
            for y in 0..h {
                for xx in 0..w {
                    out[(p * ho + y / k) * wo + xx / k] += xd[(p * h + y) * w + xx] * inv;
                }
            }
        }
        self.push(vec![n, c, ho, wo], out, Op::AvgPool { x, k })
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample(&mut self, x: Var, f: usize) -> Result<Var> {
        let [n, c, h, w] = self.nchw(x, "upsample")?;
        if f == 0 {
            return Err(shape_err("upsample", "factor must be positive".into()));
        }
        let (ho, wo) = (h * f, w * f);
        let xd = self.value(x).data();
        let mut out = vec![0.0; n * c * ho * wo];
        for p in 0..n * c {
            for y in 0..ho {
                for xx in 0..wo {
                    out[(p * ho + y) * wo + xx] = xd[(p * h + y / f) * w + xx / f];
                }
            }
        }
        self.push(vec![n, c, ho, wo], out, Op::Upsample { x, f })
    }

    /// `[n, c, h, w] -> [n, c]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.nchw(x, "global_avgpool")?;
        let hw = h * w;
        let xd = self.value(x).data();
        let out = (0..n * c).map(|p| xd[p * hw..(p + 1) * hw].iter().sum::<f64>() / hw as f64).collect();
        self.push(vec![n, c], out, Op::GlobalAvgPool(x))
    }

    /// `x [n, in] · wᵀ [in, out] + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let [n, d_in] = self.matrix(x, "linear")?;
        let [d_out, w_in] = self.matrix(w, "linear")?;
        if w_in != d_in {
            return Err(shape_err("linear", format!("input {:?} vs weight {:?}", self.shape(x), self.shape(w))));
        }
        if let Some(b) = b {
            if self.shape(b) != [d_out] {
                return Err(shape_err("linear", format!("bias {:?} for {d_out} outputs", self.shape(b))));
            }
        }
        let mut out = vec![0.0; n * d_out];
        gemm(n, d_in, d_out, self.value(x).data(), d_in as isize, 1, self.value(w).data(), 1, d_in as isize, 0.0, &mut out);
        if let Some(b) = b {
            let bd = self.value(b).data();
            for row in out.chunks_mut(d_out) {
                row.iter_mut().zip(bd).for_each(|(o, bv)| *o += bv);
            }
        }
        self.push(vec![n, d_out], out, Op::Linear { x, w, b })
    }

    /// Row-wise softmax of a matrix.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let [r, c] = self.matrix(x, "softmax")?;
        let xd = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..c {
                let e = (row[j] - m).exp();
                out[i * c + j] = e;
                z += e;
            }
            out[i * c..(i + 1) * c].iter_mut().for_each(|v| *v /= z);
        }
        self.push(vec![r, c], out, Op::Softmax(x))
    }

    /// Row-wise log-softmax of a matrix.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let [r, c] = self.matrix(x, "log_softmax")?;
        let xd = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for j in 0..c {
                out[i * c + j] = row[j] - lse;
            }
        }
        self.push(vec![r, c], out, Op::LogSoftmax(x))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let [m, k] = self.matrix(a, "matmul")?;
        let [k2, n] = self.matrix(b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", format!("{:?} x {:?}", self.shape(a), self.shape(b))));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), k as isize, 1, self.value(b).data(), n as isize, 1, 0.0, &mut out);
        self.push(vec![m, n], out, Op::MatMul(a, b))
    }

    /// `[n, c, h, w] -> [n·h·w, c]`; row index is `(b·h + y)·w + x`.
    pub fn nchw_to_rows(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.nchw(x, "nchw_to_rows")?;
        let hw = h * w;
        let xd = self.value(x).data();
        let mut out = vec![0.0; xd.len()];
        for b in 0..n {
            for ch in 0..c {
                for p in 0..hw {
                    out[(b * hw + p) * c + ch] = xd[(b * c + ch) * hw + p];
                }
            }
        }
        self.push(vec![n * hw, c], out, Op::NchwToRows(x))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let [r, c] = self.matrix(x, "gather_rows")?;
        if rows.is_empty() {
            return Err(shape_err("gather_rows", "empty row selection".into()));
        }
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(shape_err("gather_rows", format!("row {bad} out of {r}")));
        }
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            out.extend_from_slice(&xd[i * c..(i + 1) * c]);
        }
        self.push(vec![rows.len(), c], out, Op::GatherRows { x, rows: rows.to_vec() })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).numel() {
            return Err(shape_err("reshape", format!("{:?} -> {shape:?}", self.shape(x))));
        }
        let data = self.value(x).data().to_vec();
        self.push(shape.to_vec(), data, Op::Reshape(x))
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse pass from a scalar `loss`. Returns gradients for every bound
    /// parameter (zeros when the parameter does not reach the loss).
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.mode != Mode::Train {
            return Err(TensorError::Usage("backward requires a train-mode forward".into()));
        }
        if loss.0 >= self.nodes.len() {
            return Err(TensorError::Usage("backward called before forward produced the loss".into()));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::Usage(format!(
                "loss must be a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(gy) = grads[id].take() else { continue };
            if self.nodes[id].requires_grad {
                self.backprop_node(id, &gy, &mut grads);
            }
            grads[id] = Some(gy);
        }
        let mut out = Gradients::new();
        for (name, v) in &self.params {
            let g = grads[v.0].clone().unwrap_or_else(|| vec![0.0; self.nodes[v.0].value.numel()]);
            out.insert(name.clone(), g);
        }
        self.grads = Some(grads);
        Ok(out)
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var) -> Option<Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        Some(grads[v.0].take().unwrap_or_else(|| vec![0.0; self.nodes[v.0].value.numel()]))
    }

    fn backprop_node(&self, id: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let y = node.value.data();
        macro_rules! unary_rule {
            ($x:expr, |$xv:ident, $yv:ident, $g:ident| $e:expr) => {{
                let x = $x;
                if let Some(mut gx) = self.acc(grads, x) {
                    let xd = self.value(x).data();
                    for i in 0..gx.len() {
                        let ($xv, $yv, $g) = (xd[i], y[i], gy[i]);
                        gx[i] += $e;
                    }
                    grads[x.0] = Some(gx);
                }
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let n = self.shape(*x)[0];
                let mut gx = self.acc(grads, *x);
                let mut gw = self.acc(grads, *w);
                let mut gb = b.and_then(|b| self.acc(grads, b));
                conv_backward(
                    geom,
                    n,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    gy,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                if let Some(g) = gx {
                    grads[x.0] = Some(g);
                }
                if let Some(g) = gw {
                    grads[w.0] = Some(g);
                }
                if let (Some(b), Some(g)) = (b, gb) {
                    grads[b.0] = Some(g);
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let [n, c, h, w] = [node.value.shape()[0], node.value.shape()[1], node.value.shape()[2], node.value.shape()[3]];
                let hw = h * w;
                let m = (n * hw) as f64;
                let gam = self.value(*gamma).data();
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        for i in base..base + hw {
                            sum_dy[ch] += gy[i];
                            sum_dy_xhat[ch] += gy[i] * xhat[i];
                        }
                    }
                }
                if let Some(mut gg) = self.acc(grads, *gamma) {
                    gg.iter_mut().zip(&sum_dy_xhat).for_each(|(g, s)| *g += s);
                    grads[gamma.0] = Some(gg);
                }
                if let Some(mut gb) = self.acc(grads, *beta) {
                    gb.iter_mut().zip(&sum_dy).for_each(|(g, s)| *g += s);
                    grads[beta.0] = Some(gb);
                }
                if let Some(mut gx) = self.acc(grads, *x) {
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * hw;
                            let k = gam[ch] * inv_std[ch];
                            if *batch_stats {
                                let mean_dy = sum_dy[ch] / m;
                                let mean_dy_xhat = sum_dy_xhat[ch] / m;
                                for i in base..base + hw {
                                    gx[i] += k * (gy[i] - mean_dy - xhat[i] * mean_dy_xhat);
                                }
                            } else {
                                for i in base..base + hw {
                                    gx[i] += k * gy[i];
                                }
                            }
                        }
                    }
                    grads[x.0] = Some(gx);
                }
            }
            Op::Relu(x) => unary_rule!(*x, |xv, _y, g| if xv > 0.0 { g } else { 0.0 }),
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if let Some(mut ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(gy).for_each(|(g, d)| *g += d);
                    grads[a.0] = Some(ga);
                }
                if let Some(mut gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(gy).for_each(|(g, d)| *g += sign * d);
                    grads[b.0] = Some(gb);
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if let Some(mut ga) = self.acc(grads, *a) {
                    for i in 0..ga.len() {
                        ga[i] += gy[i] * bd[i];
                    }
                    grads[a.0] = Some(ga);
                }
                if let Some(mut gb) = self.acc(grads, *b) {
                    for i in 0..gb.len() {
                        gb[i] += gy[i] * ad[i];
                    }
                    grads[b.0] = Some(gb);
                }
            }
            Op::Scale(x, k) => {
                let k = *k;
                unary_rule!(*x, |_x, _y, g| g * k)
            }
            Op::AddScalar(x) => unary_rule!(*x, |_x, _y, g| g),
            Op::Abs(x) => unary_rule!(*x, |xv, _y, g| if xv > 0.0 {
                g
            } else if xv < 0.0 {
                -g
            } else {
                0.0
            }),
            Op::Square(x) => unary_rule!(*x, |xv, _y, g| 2.0 * xv * g),
            Op::SmoothL1(x) => unary_rule!(*x, |xv, _y, g| if xv.abs() < 1.0 { xv * g } else { xv.signum() * g }),
            Op::LogClamp(x, eps) => {
                let eps = *eps;
                unary_rule!(*x, |xv, _y, g| if xv > eps { g / xv } else { 0.0 })
            }
            Op::Sum(x) => {
                if let Some(mut gx) = self.acc(grads, *x) {
                    gx.iter_mut().for_each(|g| *g += gy[0]);
                    grads[x.0] = Some(gx);
                }
            }
            Op::MaxPool { x, argmax, .. } => {
                if let Some(mut gx) = self.acc(grads, *x) {
                    for (o, &i) in argmax.iter().enumerate() {
                        gx[i] += gy[o];
                    }
                    grads[x.0] = Some(gx);
                }
            }
            Op::AvgPool { x, k } => {
                if let Some(mut gx) = self.acc(grads, *x) {
                    let [n, c, h, w] = self.nchw(*x, "avgpool").expect("validated");
                    let (ho, wo) = (h / k, w / k);
                    let inv = 1.0 / (k * k) as f64;
                    for p in 0..n * c {
                        for yy in 0..h {
                            for xx in 0..w {
                                gx[(p * h + yy) * w + xx] += gy[(p * ho + yy / k) * wo + xx / k] * inv;
                            }
                        }
                    }
                    grads[x.0] = Some(gx);
                }
            }
            Op::Upsample { x, f } => {
                if let Some(mut gx) = self.acc(grads, *x) {
                    let [n, c, h, w] = self.nchw(*x, "upsample").expect("validated");
                    let (ho, wo) = (h * f, w * f);
                    for p in 0..n * c {
                        for yy in 0..ho {
                            for xx in 0..wo {
                                gx[(p * h + yy / f) * w + xx / f] += gy[(p * ho + yy) * wo + xx];
                            }
                        }
                    }
                    grads[x.0] = Some(gx);
                }
            }
            Op::GlobalAvgPool(x) => {
                if let Some(mut gx) = self.acc(grads, *x) {
                    let [_, _, h, w] = self.nchw(*x, "global_avgpool").expect("validated");
                    let hw = h * w;
                    for (p, g) in gy.iter().enumerate() {
                        gx[p * hw..(p + 1) * hw].iter_mut().for_each(|v| *v += g / hw as f64);
                    }
                    grads[x.0] = Some(gx);
                }
            }
            Op::Linear { x, w, b } => {
                let [n, d_in] = self.matrix(*x, "linear").expect("validated");
                let d_out = self.shape(*w)[0];
                if let Some(mut gx) = self.acc(grads, *x) {
                    // gx[n, in] += gy[n, out] · w[out, in]
                    gemm(n, d_out, d_in, gy, d_out as isize, 1, self.value(*w).data(), d_in as isize, 1, 1.0, &mut gx);
                    grads[x.0] = Some(gx);
                }
                if let Some(mut gw) = self.acc(grads, *w) {
                    // gw[out, in] += gyᵀ[out, n] · x[n, in]
                    gemm(d_out, n, d_in, gy, 1, d_out as isize, self.value(*x).data(), d_in as isize, 1, 1.0, &mut gw);
                    grads[w.0] = Some(gw);
                }
                if let Some(b) = b {
                    if let Some(mut gb) = self.acc(grads, *b) {
                        for row in gy.chunks(d_out) {
                            gb.iter_mut().zip(row).for_each(|(g, d)| *g += d);
                        }
                        grads[b.0] = Some(gb);
                    }
                }
            }
            Op::Softmax(x) => {
                if let Some(mut gx) = self.acc(grads, *x) {
                    let c = node.value.shape()[1];
                    for (i, (yr, gr)) in y.chunks(c).zip(gy.chunks(c)).enumerate() {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gx[i * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                    grads[x.0] = Some(gx);
                }
            }
            Op::LogSoftmax(x) => {
                if let Some(mut gx) = self.acc(grads, *x) {
                    let c = node.value.shape()[1];
                    for (i, (yr, gr)) in y.chunks(c).zip(gy.chunks(c)).enumerate() {
                        let s: f64 = gr.iter().sum();
                        for j in 0..c {
                            gx[i * c + j] += gr[j] - yr[j].exp() * s;
                        }
                    }
                    grads[x.0] = Some(gx);
                }
            }
            Op::MatMul(a, b) => {
                let [m, k] = self.matrix(*a, "matmul").expect("validated");
                let n = self.shape(*b)[1];
                if let Some(mut ga) = self.acc(grads, *a) {
                    // ga[m, k] += gy[m, n] · bᵀ[n, k]
                    gemm(m, n, k, gy, n as isize, 1, self.value(*b).data(), 1, n as isize, 1.0, &mut ga);
                    grads[a.0] = Some(ga);
                }
                if let Some(mut gb) = self.acc(grads, *b) {
                    // gb[k, n] += aᵀ[k, m] · gy[m, n]
                    gemm(k, m, n, self.value(*a).data(), 1, k as isize, gy, n as isize, 1, 1.0, &mut gb);
                    grads[b.0] = Some(gb);
                }
            }
            Op::NchwToRows(x) => {
                if let Some(mut gx) = self.acc(grads, *x) {
                    let [n, c, h, w] = self.nchw(*x, "nchw_to_rows").expect("validated");
                    let hw = h * w;
                    for b in 0..n {
                        for ch in 0..c {
                            for p in 0..hw {
                                gx[(b * c + ch) * hw + p] += gy[(b * hw + p) * c + ch];
                            }
                        }
                    }
                    grads[x.0] = Some(gx);
                }
            }
            Op::GatherRows { x, rows } => {
                if let Some(mut gx) = self.acc(grads, *x) {
                    let c = self.shape(*x)[1];
                    for (o, &i) in rows.iter().enumerate() {
                        for j in 0..c {
                            gx[i * c + j] += gy[o * c + j];
                        }
                    }
                    grads[x.0] = Some(gx);
                }
            }
            Op::Reshape(x) => unary_rule!(*x, |_x, _y, g| g),
        }
    }
}
