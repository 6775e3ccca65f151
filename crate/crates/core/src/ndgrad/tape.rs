//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its value and, while tracing, the
//! information needed to propagate gradients. Nodes are only ever appended,
//! so parents always precede children and a reverse sweep over the node list
//! is a valid topological order.

use super::kernels;
use super::tensor::{split_axis, Precision, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Replicate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub pad_mode: PadMode,
}

/// Batch-norm statistics source.
#[derive(Clone, Debug)]
pub enum NormStats<'a> {
    /// Per-batch statistics (training).
    Batch,
    /// Fixed mean/variance (evaluation with running averages).
    Fixed { mean: &'a [f64], var: &'a [f64] },
}

pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
struct ConvPlan {
    batch: usize,
    in_ch: usize,
    out_ch: usize,
    rows: usize,
    positions: usize,
    /// For each (row, position): flat offset into one input image, or `u32::MAX` for zero padding.
    index: Vec<u32>,
}

impl ConvPlan {
    fn gather(&self, image: &[f64], cols: &mut [f64]) {
        for (c, &ix) in cols.iter_mut().zip(&self.index) {
            *c = if ix == u32::MAX { 0.0 } else { image[ix as usize] };
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    StopGradient,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Power(Var, f64),
    Sqrt(Var),
    ClampMin(Var, f64),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        plan: ConvPlan,
    },
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Embedding {
        table: Var,
        indices: Vec<usize>,
    },
    L2Normalize {
        x: Var,
        axis: usize,
        norms: Vec<f64>,
        floor: f64,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::StopGradient => "stop_gradient",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddScalar(..) => "add_scalar",
            Op::MulScalar(..) => "scalar_mul",
            Op::Relu(..) => "relu",
            Op::Gelu(..) => "gelu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Power(..) => "power",
            Op::Sqrt(..) => "sqrt",
            Op::ClampMin(..) => "clamp_min",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Conv2d { .. } => "conv2d",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumAxis(..) => "sum_axis",
            Op::MeanAxis(..) => "mean_axis",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(..) => "reshape",
            Op::Permute(..) => "permute",
            Op::Embedding { .. } => "embedding",
            Op::L2Normalize { .. } => "l2_normalize",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    precision: Precision,
    tracing: bool,
    check_finite: bool,
    freed: bool,
    detach_mode: DetachMode,
}

/// Optional bookkeeping for [`Tape::stop_gradient`] outputs, used to
/// differentiate numerically with the detached values held fixed.
#[derive(Debug, Clone, Default)]
enum DetachMode {
    #[default]
    Off,
    Capture(Vec<Tensor>),
    Replay(std::collections::VecDeque<Tensor>),
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new(Precision::F32)
    }
}

impl Tape {
    pub fn new(precision: Precision) -> Self {
        Tape {
            nodes: Vec::new(),
            precision,
            tracing: true,
            check_finite: cfg!(debug_assertions),
            freed: false,
            detach_mode: DetachMode::Off,
        }
    }

    /// A tape that records values only; `backward` is unavailable.
    pub fn inference(precision: Precision) -> Self {
        Tape {
            tracing: false,
            ..Tape::new(precision)
        }
    }

    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn is_tracing(&self) -> bool {
        self.tracing
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

    /// Name of the primitive that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let value = value.rounded(self.precision);
        let requires_grad = requires_grad && self.tracing;
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn check(&self, op: &'static str, vs: &[Var]) -> Result<()> {
        if self.check_finite && vs.iter().any(|v| !self.nodes[v.0].value.all_finite()) {
            return Err(Error::NonFinite { op });
        }
        Ok(())
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let mut v = self.nodes[x.0].value.clone();
        match &mut self.detach_mode {
            DetachMode::Off => {}
            DetachMode::Capture(seen) => seen.push(v.clone()),
            DetachMode::Replay(queue) => {
                if let Some(r) = queue.pop_front() {
                    assert_eq!(r.shape(), v.shape(), "replayed detached value has the wrong shape");
                    v = r;
                }
            }
        }
        self.push(v, Op::StopGradient, false)
    }

    /// Records the value of every subsequent `stop_gradient` output.
    pub fn capture_detached(&mut self) {
        self.detach_mode = DetachMode::Capture(Vec::new());
    }

    /// Values recorded since [`Tape::capture_detached`], in call order.
    pub fn detached_values(&self) -> &[Tensor] {
        match &self.detach_mode {
            DetachMode::Capture(seen) => seen,
            _ => &[],
        }
    }

    /// Makes subsequent `stop_gradient` calls return `values` in order
    /// instead of their inputs, so the detached branch acts as a true
    /// constant under parameter perturbation.
    pub fn replay_detached(&mut self, values: Vec<Tensor>) {
        self.detach_mode = DetachMode::Replay(values.into());
    }

    // ---- linear algebra -------------------------------------------------

    /// `a: [..., m, k]` times `b: [k, n]` (shared) or `b: [..., k, n]` (same batch dims).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check("matmul", &[a, b])?;
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: ash.clone(),
            rhs: bsh.clone(),
        };
        if ash.len() < 2 || bsh.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (k2, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let batch_shape = &ash[..ash.len() - 2];
        let batch: usize = batch_shape.iter().product();
        let shared_b = bsh.len() == 2;
        if !shared_b && &bsh[..bsh.len() - 2] != batch_shape {
            return Err(mismatch());
        }
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut out = vec![0.0; batch * m * n];
        if shared_b {
            kernels::gemm_acc(ad, bd, &mut out, batch * m, k, n);
        } else {
            for i in 0..batch {
                kernels::gemm_acc(
                    &ad[i * m * k..(i + 1) * m * k],
                    &bd[i * k * n..(i + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let mut shape = batch_shape.to_vec();
        shape.extend([m, n]);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MatMul(a, b), rg))
    }

    // ---- elementwise binary with trailing broadcast ----------------------

    fn broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok(sa.to_vec());
        }
        let (na, nb) = (self.value(a).numel(), self.value(b).numel());
        let (big, small) = if na > nb || (na == nb && sa.len() >= sb.len()) {
            (sa, sb)
        } else {
            (sb, sa)
        };
        let lead = small.iter().take_while(|&&d| d == 1).count();
        let stripped = &small[lead..];
        if big.ends_with(stripped) {
            Ok(big.to_vec())
        } else {
            Err(Error::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.check(name, &[a, b])?;
        let shape = self.broadcast(name, a, b)?;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let n: usize = shape.iter().product();
        let (na, nb) = (ad.len(), bd.len());
        let out = if na == n && nb == n {
            ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
        } else {
            (0..n).map(|i| f(ad[i % na], bd[i % nb])).collect()
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, out), op, rg))
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

    // ---- elementwise unary ----------------------------------------------

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        self.check(name, &[x])?;
        let v = self.value(x).map(f);
        let rg = self.rg(&[x]);
        Ok(self.push(v, op, rg))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", x, |v| v + c, Op::AddScalar(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary("scalar_mul", x, |v| v * c, Op::MulScalar(x, c))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary("gelu", x, kernels::gelu, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, kernels::sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, f64::tanh, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary("log", x, f64::ln, Op::Log(x))
    }

    pub fn powf(&mut self, x: Var, p: f64) -> Result<Var> {
        self.unary("power", x, |v| v.powf(p), Op::Power(x, p))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary("sqrt", x, f64::sqrt, Op::Sqrt(x))
    }

    pub fn clamp_min(&mut self, x: Var, min: f64) -> Result<Var> {
        self.unary("clamp_min", x, |v| v.max(min), Op::ClampMin(x, min))
    }

    // ---- normalizations -------------------------------------------------

    /// Softmax over the last axis. `mask` is added to the logits before
    /// normalization and broadcasts over leading axes; `-inf` entries
    /// receive zero probability.
    pub fn softmax(&mut self, x: Var, mask: Option<&Tensor>) -> Result<Var> {
        self.check("softmax", &[x])?;
        let shape = self.shape(x).to_vec();
        let w = *shape.last().ok_or_else(|| Error::invalid("softmax", "scalar input"))?;
        if let Some(m) = mask {
            let ok = m.shape().last() == Some(&w) && shape.ends_with(m.shape());
            if !ok {
                return Err(Error::ShapeMismatch {
                    op: "softmax",
                    lhs: shape,
                    rhs: m.shape().to_vec(),
                });
            }
        }
        let mut out = vec![0.0; self.value(x).numel()];
        kernels::softmax_rows(self.value(x).data(), w, mask.map(|m| m.data()), &mut out);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax(x), rg))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        self.check("log_softmax", &[x])?;
        let shape = self.shape(x).to_vec();
        let w = *shape.last().ok_or_else(|| Error::invalid("log_softmax", "scalar input"))?;
        let mut out = vec![0.0; self.value(x).numel()];
        kernels::log_softmax_rows(self.value(x).data(), w, &mut out);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::LogSoftmax(x), rg))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta` of that width.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        self.check("layer_norm", &[x, gamma, beta])?;
        let shape = self.shape(x).to_vec();
        let w = *shape.last().ok_or_else(|| Error::invalid("layer_norm", "scalar input"))?;
        for p in [gamma, beta] {
            if self.shape(p) != [w] {
                return Err(Error::ShapeMismatch {
                    op: "layer_norm",
                    lhs: shape.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let xd = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xd.len() / w;
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let xr = &xd[r * w..(r + 1) * w];
            let mean = xr.iter().sum::<f64>() / w as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
            let is = 1.0 / (var + NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..w {
                let h = (xr[j] - mean) * is;
                xhat[r * w + j] = h;
                out[r * w + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        };
        Ok(self.push(Tensor::from_parts(shape, out), op, rg))
    }

    /// Batch normalization of the last axis over all leading positions.
    /// Returns the output and the statistics used (mean, biased variance).
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_>,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        self.check("batch_norm", &[x, gamma, beta])?;
        let shape = self.shape(x).to_vec();
        let w = *shape.last().ok_or_else(|| Error::invalid("batch_norm", "scalar input"))?;
        for p in [gamma, beta] {
            if self.shape(p) != [w] {
                return Err(Error::ShapeMismatch {
                    op: "batch_norm",
                    lhs: shape.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let xd = self.value(x).data();
        let rows = xd.len() / w;
        let (mean, var, batch_stats) = match stats {
            NormStats::Batch => {
                let mut mean = vec![0.0; w];
                let mut var = vec![0.0; w];
                for r in xd.chunks(w) {
                    for (m, v) in mean.iter_mut().zip(r) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= rows as f64);
                for r in xd.chunks(w) {
                    for j in 0..w {
                        let d = r[j] - mean[j];
                        var[j] += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v /= rows as f64);
                (mean, var, true)
            }
            NormStats::Fixed { mean, var } => {
                if mean.len() != w || var.len() != w {
                    return Err(Error::invalid("batch_norm", "running statistics width"));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for (i, (&xv, (h, o))) in xd.iter().zip(xhat.iter_mut().zip(out.iter_mut())).enumerate() {
            let j = i % w;
            *h = (xv - mean[j]) * inv_std[j];
            *o = *h * g[j] + b[j];
        }
        let rg = self.rg(&[x, gamma, beta]);
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats,
        };
        let v = self.push(Tensor::from_parts(shape, out), op, rg);
        Ok((v, mean, var))
    }

    /// Divides every slice along `axis` by `max(‖slice‖₂, floor)`.
    pub fn l2_normalize(&mut self, x: Var, axis: usize, floor: f64) -> Result<Var> {
        self.check("l2_normalize", &[x])?;
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid("l2_normalize", format!("axis {axis} for shape {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let xd = self.value(x).data();
        let mut norms = vec![0.0; outer * inner];
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let s: f64 = (0..len).map(|a| xd[base + a * inner].powi(2)).sum();
                let nrm = s.sqrt();
                norms[o * inner + i] = nrm;
                let den = nrm.max(floor);
                for a in 0..len {
                    out[base + a * inner] = xd[base + a * inner] / den;
                }
            }
        }
        let rg = self.rg(&[x]);
        let op = Op::L2Normalize {
            x,
            axis,
            norms,
            floor,
        };
        Ok(self.push(Tensor::from_parts(shape, out), op, rg))
    }

    // ---- convolution ----------------------------------------------------

    /// 2-D convolution. `x: [B, C, H, W]`, `w: [O, C, KH, KW]`, `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let mut ins = vec![x, w];
        ins.extend(b);
        self.check("conv2d", &ins)?;
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let mismatch = || Error::ShapeMismatch {
            op: "conv2d",
            lhs: xs.clone(),
            rhs: ws.clone(),
        };
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || spec.stride == 0 {
            return Err(mismatch());
        }
        let (bn, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, kh, kw) = (ws[0], ws[2], ws[3]);
        if h + 2 * spec.padding < kh || wd + 2 * spec.padding < kw {
            return Err(mismatch());
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d",
                    lhs: vec![o],
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let oh = (h + 2 * spec.padding - kh) / spec.stride + 1;
        let ow = (wd + 2 * spec.padding - kw) / spec.stride + 1;
        let rows = c * kh * kw;
        let positions = oh * ow;
        let mut index = Vec::with_capacity(rows * positions);
        for ci in 0..c {
            for ky in 0..kh {
                for kx in 0..kw {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                            let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                            let inside = iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd;
                            let off = match (inside, spec.pad_mode) {
                                (true, _) => Some((iy as usize, ix as usize)),
                                (false, PadMode::Zero) => None,
                                (false, PadMode::Replicate) => Some((
                                    iy.clamp(0, h as isize - 1) as usize,
                                    ix.clamp(0, wd as isize - 1) as usize,
                                )),
                            };
                            index.push(off.map_or(u32::MAX, |(yy, xx)| (ci * h * wd + yy * wd + xx) as u32));
                        }
                    }
                }
            }
        }
        let plan = ConvPlan {
            batch: bn,
            in_ch: c,
            out_ch: o,
            rows,
            positions,
            index,
        };
        let xd = self.value(x).data();
        let wdta = self.value(w).data();
        let img = c * h * wd;
        let mut cols = vec![0.0; rows * positions];
        let mut out = vec![0.0; bn * o * positions];
        for bi in 0..bn {
            plan.gather(&xd[bi * img..(bi + 1) * img], &mut cols);
            let dst = &mut out[bi * o * positions..(bi + 1) * o * positions];
            if let Some(b) = b {
                let bd = self.value(b).data();
                for (oc, chunk) in dst.chunks_mut(positions).enumerate() {
                    chunk.fill(bd[oc]);
                }
            }
            kernels::gemm_acc(wdta, &cols, dst, o, rows, positions);
        }
        let rg = self.rg(&ins);
        Ok(self.push(
            Tensor::from_parts(vec![bn, o, oh, ow], out),
            Op::Conv2d { x, w, b, plan },
            rg,
        ))
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check("sum", &[x])?;
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.check("mean", &[x])?;
        let t = self.value(x);
        let s = t.sum() / t.numel() as f64;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Mean(x), rg))
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let name = if mean { "mean_axis" } else { "sum_axis" };
        self.check(name, &[x])?;
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(name, format!("axis {axis} for shape {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let xd = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let src = &xd[(o * len + a) * inner..(o * len + a + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        if mean {
            out.iter_mut().for_each(|v| *v /= len as f64);
        }
        let mut oshape = shape.clone();
        oshape.remove(axis);
        let rg = self.rg(&[x]);
        let op = if mean { Op::MeanAxis(x, axis) } else { Op::SumAxis(x, axis) };
        Ok(self.push(Tensor::from_parts(oshape, out), op, rg))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    // ---- structural -----------------------------------------------------

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        self.check("concat", xs)?;
        let first = self
            .shape(*xs.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::invalid("concat", format!("axis {axis} for shape {first:?}")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let same = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !same {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis];
                let d = self.value(v).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.rg(xs);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Concat(xs.to_vec(), axis), rg))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.check("slice", &[x])?;
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(Error::invalid(
                "slice",
                format!("range {start}..{end} on axis {axis} of {shape:?}"),
            ));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            out.extend_from_slice(&d[(o * len + start) * inner..(o * len + end) * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = end - start;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(oshape, out), Op::Slice { x, axis, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        let valid = perm.len() == shape.len()
            && perm.iter().all(|&p| p < seen.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(Error::invalid("permute", format!("{perm:?} for shape {shape:?}")));
        }
        let out = kernels::permute(self.value(x).data(), &shape, perm);
        let oshape = perm.iter().map(|&p| shape[p]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(oshape, out), Op::Permute(x, perm.to_vec()), rg))
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, x: Var, a0: usize, a1: usize) -> Result<Var> {
        let n = self.shape(x).len();
        if a0 >= n || a1 >= n {
            return Err(Error::invalid("transpose", format!("axes {a0},{a1} for rank {n}")));
        }
        let mut perm: Vec<usize> = (0..n).collect();
        perm.swap(a0, a1);
        self.permute(x, &perm)
    }

    /// Rows of `table: [n, d]` selected by `indices` (with `index_shape`), giving `index_shape + [d]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize], index_shape: &[usize]) -> Result<Var> {
        self.check("embedding", &[table])?;
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 || index_shape.iter().product::<usize>() != indices.len() {
            return Err(Error::ShapeMismatch {
                op: "embedding",
                lhs: ts,
                rhs: index_shape.to_vec(),
            });
        }
        let (n, d) = (ts[0], ts[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::invalid("embedding", format!("index {bad} >= table size {n}")));
        }
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        let mut shape = index_shape.to_vec();
        shape.push(d);
        let rg = self.rg(&[table]);
        let op = Op::Embedding {
            table,
            indices: indices.to_vec(),
        };
        Ok(self.push(Tensor::from_parts(shape, out), op, rg))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a scalar `root`. Releases the recorded graph, so a
    /// second call on the same tape fails with [`Error::TapeFreed`].
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        if self.freed {
            return Err(Error::TapeFreed);
        }
        if !self.tracing {
            return Err(Error::invalid("backward", "tape was built without tracing"));
        }
        let root_val = self.value(root);
        if root_val.numel() != 1 {
            return Err(Error::NonScalarRoot {
                shape: root_val.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        let precision = self.precision;
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        self.freed = true;
        for n in &mut self.nodes {
            n.op = Op::Leaf;
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.filter(|_| n.requires_grad).map(|mut g| {
                    precision.round_slice(&mut g);
                    Tensor::from_parts(n.value.shape().to_vec(), g)
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let out = nodes[i].value.data();
        let mut acc = |v: Var, contrib: Vec<f64>| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let mut contrib = contrib;
            self.precision.round_slice(&mut contrib);
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(&contrib) {
                        *e += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        // Sum a full-size contribution down to a broadcast operand of `n` elements.
        let reduce = |full: Vec<f64>, n: usize| -> Vec<f64> {
            if full.len() == n {
                return full;
            }
            let mut r = vec![0.0; n];
            for (k, v) in full.iter().enumerate() {
                r[k % n] += v;
            }
            r
        };
        match &nodes[i].op {
            Op::Leaf | Op::StopGradient => {}
            Op::MatMul(a, b) => {
                let (ash, bsh) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
                let n = bsh[bsh.len() - 1];
                let batch = nodes[a.0].value.numel() / (m * k);
                let (ad, bd) = (val(*a), val(*b));
                if nodes[a.0].requires_grad {
                    let mut ga = vec![0.0; ad.len()];
                    if bsh.len() == 2 {
                        kernels::gemm_bt_acc(g, bd, &mut ga, batch * m, n, k);
                    } else {
                        for t in 0..batch {
                            kernels::gemm_bt_acc(
                                &g[t * m * n..(t + 1) * m * n],
                                &bd[t * k * n..(t + 1) * k * n],
                                &mut ga[t * m * k..(t + 1) * m * k],
                                m,
                                n,
                                k,
                            );
                        }
                    }
                    acc(*a, ga);
                }
                if nodes[b.0].requires_grad {
                    let mut gb = vec![0.0; bd.len()];
                    if bsh.len() == 2 {
                        kernels::gemm_at_acc(ad, g, &mut gb, k, batch * m, n);
                    } else {
                        for t in 0..batch {
                            kernels::gemm_at_acc(
                                &ad[t * m * k..(t + 1) * m * k],
                                &g[t * m * n..(t + 1) * m * n],
                                &mut gb[t * k * n..(t + 1) * k * n],
                                k,
                                m,
                                n,
                            );
                        }
                    }
                    acc(*b, gb);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(nodes[i].op, Op::Sub(..)) { -1.0 } else { 1.0 };
                acc(*a, reduce(g.to_vec(), val(*a).len()));
                acc(*b, reduce(g.iter().map(|x| sign * x).collect(), val(*b).len()));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a), val(*b));
                let (na, nb) = (ad.len(), bd.len());
                if nodes[a.0].requires_grad {
                    acc(*a, reduce(g.iter().enumerate().map(|(k, x)| x * bd[k % nb]).collect(), na));
                }
                if nodes[b.0].requires_grad {
                    acc(*b, reduce(g.iter().enumerate().map(|(k, x)| x * ad[k % na]).collect(), nb));
                }
            }
            Op::Div(a, b) => {
                let (ad, bd) = (val(*a), val(*b));
                let (na, nb) = (ad.len(), bd.len());
                if nodes[a.0].requires_grad {
                    acc(*a, reduce(g.iter().enumerate().map(|(k, x)| x / bd[k % nb]).collect(), na));
                }
                if nodes[b.0].requires_grad {
                    let gb = g
                        .iter()
                        .enumerate()
                        .map(|(k, x)| {
                            let bv = bd[k % nb];
                            -x * ad[k % na] / (bv * bv)
                        })
                        .collect();
                    acc(*b, reduce(gb, nb));
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::MulScalar(x, c) => acc(*x, g.iter().map(|v| v * c).collect()),
            Op::Relu(x) => acc(
                *x,
                g.iter().zip(val(*x)).map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 }).collect(),
            ),
            Op::Gelu(x) => acc(
                *x,
                g.iter().zip(val(*x)).map(|(gv, xv)| gv * kernels::gelu_grad(*xv)).collect(),
            ),
            Op::Sigmoid(x) => acc(*x, g.iter().zip(out).map(|(gv, y)| gv * y * (1.0 - y)).collect()),
            Op::Tanh(x) => acc(*x, g.iter().zip(out).map(|(gv, y)| gv * (1.0 - y * y)).collect()),
            Op::Exp(x) => acc(*x, g.iter().zip(out).map(|(gv, y)| gv * y).collect()),
            Op::Log(x) => acc(*x, g.iter().zip(val(*x)).map(|(gv, xv)| gv / xv).collect()),
            Op::Power(x, p) => acc(
                *x,
                g.iter().zip(val(*x)).map(|(gv, xv)| gv * p * xv.powf(p - 1.0)).collect(),
            ),
            Op::Sqrt(x) => acc(*x, g.iter().zip(out).map(|(gv, y)| gv * 0.5 / y).collect()),
            Op::ClampMin(x, m) => acc(
                *x,
                g.iter().zip(val(*x)).map(|(gv, xv)| if xv > m { *gv } else { 0.0 }).collect(),
            ),
            Op::Softmax(x) => {
                let w = *nodes[i].value.shape().last().unwrap();
                let mut gx = vec![0.0; g.len()];
                for ((gr, yr), dr) in g.chunks(w).zip(out.chunks(w)).zip(gx.chunks_mut(w)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..w {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(*x, gx);
            }
            Op::LogSoftmax(x) => {
                let w = *nodes[i].value.shape().last().unwrap();
                let mut gx = vec![0.0; g.len()];
                for ((gr, yr), dr) in g.chunks(w).zip(out.chunks(w)).zip(gx.chunks_mut(w)) {
                    let s: f64 = gr.iter().sum();
                    for j in 0..w {
                        dr[j] = gr[j] - yr[j].exp() * s;
                    }
                }
                acc(*x, gx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let w = val(*gamma).len();
                let gam = val(*gamma);
                let mut gg = vec![0.0; w];
                let mut gbeta = vec![0.0; w];
                let mut gx = vec![0.0; g.len()];
                for r in 0..g.len() / w {
                    let gr = &g[r * w..(r + 1) * w];
                    let hr = &xhat[r * w..(r + 1) * w];
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for j in 0..w {
                        gg[j] += gr[j] * hr[j];
                        gbeta[j] += gr[j];
                        let dh = gr[j] * gam[j];
                        s1 += dh;
                        s2 += dh * hr[j];
                    }
                    let is = inv_std[r];
                    for j in 0..w {
                        let dh = gr[j] * gam[j];
                        gx[r * w + j] = is / w as f64 * (w as f64 * dh - s1 - hr[j] * s2);
                    }
                }
                acc(*x, gx);
                acc(*gamma, gg);
                acc(*beta, gbeta);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let w = val(*gamma).len();
                let gam = val(*gamma);
                let rows = g.len() / w;
                let mut gg = vec![0.0; w];
                let mut gbeta = vec![0.0; w];
                for (k, (gv, h)) in g.iter().zip(xhat).enumerate() {
                    gg[k % w] += gv * h;
                    gbeta[k % w] += gv;
                }
                let gx = if *batch_stats {
                    // Column sums of dxhat and dxhat*xhat are gamma*gbeta and gamma*gg.
                    g.iter()
                        .zip(xhat)
                        .enumerate()
                        .map(|(k, (gv, h))| {
                            let j = k % w;
                            let dh = gv * gam[j];
                            inv_std[j] / rows as f64
                                * (rows as f64 * dh - gam[j] * gbeta[j] - h * gam[j] * gg[j])
                        })
                        .collect()
                } else {
                    g.iter()
                        .enumerate()
                        .map(|(k, gv)| gv * gam[k % w] * inv_std[k % w])
                        .collect()
                };
                acc(*x, gx);
                acc(*gamma, gg);
                acc(*beta, gbeta);
            }
            Op::L2Normalize {
                x,
                axis,
                norms,
                floor,
            } => {
                let shape = nodes[i].value.shape();
                let (outer, len, inner) = split_axis(shape, *axis);
                let mut gx = vec![0.0; g.len()];
                for o in 0..outer {
                    for t in 0..inner {
                        let base = o * len * inner + t;
                        let nrm = norms[o * inner + t];
                        if nrm > *floor {
                            let dot: f64 =
                                (0..len).map(|a| out[base + a * inner] * g[base + a * inner]).sum();
                            for a in 0..len {
                                let k = base + a * inner;
                                gx[k] = (g[k] - out[k] * dot) / nrm;
                            }
                        } else {
                            for a in 0..len {
                                let k = base + a * inner;
                                gx[k] = g[k] / floor;
                            }
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::Conv2d { x, w, b, plan } => {
                let (xd, wd) = (val(*x), val(*w));
                let img = xd.len() / plan.batch;
                let per_out = plan.out_ch * plan.positions;
                let mut cols = vec![0.0; plan.rows * plan.positions];
                let mut dcols = vec![0.0; plan.rows * plan.positions];
                let mut gw = vec![0.0; wd.len()];
                let mut gx = vec![0.0; xd.len()];
                let need_x = nodes[x.0].requires_grad;
                let need_w = nodes[w.0].requires_grad;
                for bi in 0..plan.batch {
                    let gout = &g[bi * per_out..(bi + 1) * per_out];
                    if need_w {
                        plan.gather(&xd[bi * img..(bi + 1) * img], &mut cols);
                        kernels::gemm_bt_acc(gout, &cols, &mut gw, plan.out_ch, plan.positions, plan.rows);
                    }
                    if need_x {
                        dcols.fill(0.0);
                        kernels::gemm_at_acc(wd, gout, &mut dcols, plan.rows, plan.out_ch, plan.positions);
                        let gimg = &mut gx[bi * img..(bi + 1) * img];
                        for (&ix, &dc) in plan.index.iter().zip(&dcols) {
                            if ix != u32::MAX {
                                gimg[ix as usize] += dc;
                            }
                        }
                    }
                }
                debug_assert_eq!(img % plan.in_ch, 0);
                acc(*x, gx);
                acc(*w, gw);
                if let Some(b) = b {
                    let mut gb = vec![0.0; plan.out_ch];
                    for chunk in g.chunks(plan.positions).enumerate() {
                        gb[chunk.0 % plan.out_ch] += chunk.1.iter().sum::<f64>();
                    }
                    acc(*b, gb);
                }
            }
            Op::Sum(x) => acc(*x, vec![g[0]; val(*x).len()]),
            Op::Mean(x) => {
                let n = val(*x).len();
                acc(*x, vec![g[0] / n as f64; n]);
            }
            Op::SumAxis(x, axis) | Op::MeanAxis(x, axis) => {
                let (outer, len, inner) = split_axis(nodes[x.0].value.shape(), *axis);
                let scale = if matches!(nodes[i].op, Op::MeanAxis(..)) { 1.0 / len as f64 } else { 1.0 };
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for a in 0..len {
                        for t in 0..inner {
                            gx[(o * len + a) * inner + t] = g[o * inner + t] * scale;
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::Concat(xs, axis) => {
                let shape = nodes[i].value.shape();
                let (outer, total, inner) = split_axis(shape, *axis);
                let mut offset = 0;
                for v in xs {
                    let len = nodes[v.0].value.shape()[*axis];
                    if nodes[v.0].requires_grad {
                        let mut gx = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let s = (o * total + offset) * inner;
                            gx.extend_from_slice(&g[s..s + len * inner]);
                        }
                        acc(*v, gx);
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = nodes[x.0].value.shape();
                let (outer, len, inner) = split_axis(xs, *axis);
                let w = nodes[i].value.shape()[*axis];
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    let dst = (o * len + start) * inner;
                    gx[dst..dst + w * inner].copy_from_slice(&g[o * w * inner..(o + 1) * w * inner]);
                }
                acc(*x, gx);
            }
            Op::Permute(x, perm) => {
                let mut inv = vec![0; perm.len()];
                for (k, &p) in perm.iter().enumerate() {
                    inv[p] = k;
                }
                acc(*x, kernels::permute(g, nodes[i].value.shape(), &inv));
            }
            Op::Embedding { table, indices } => {
                let d = nodes[table.0].value.shape()[1];
                let mut gt = vec![0.0; val(*table).len()];
                for (r, &ix) in indices.iter().enumerate() {
                    for j in 0..d {
                        gt[ix * d + j] += g[r * d + j];
                    }
                }
                acc(*table, gt);
            }
        }
        Ok(())
    }
}
