use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Soft-rounding stretch constants (lower, upper) used by learned rounding.
pub const SOFT_ROUND_GAMMA: f64 = -0.1;
pub const SOFT_ROUND_ZETA: f64 = 1.1;

/// |d| below this contributes nothing to an Lp sum (and no gradient).
pub(crate) const LP_EPS: f64 = 1e-12;

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Reshape(Var),
    Relu(Var),
    Sigmoid(Var),
    Softmax {
        x: Var,
        outer: usize,
        dim: usize,
        inner: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    LpSum {
        a: Var,
        b: Var,
        p: f64,
    },
    FakeQuant {
        x: Var,
        scale: Var,
        /// per element: channel index and clip state (-1 low, 0 inside, 1 high)
        chan: Vec<u32>,
        state: Vec<i8>,
        zero: Vec<f64>,
        qmin: f64,
        qmax: f64,
    },
    SoftRoundWeight {
        v: Var,
        inside: Vec<bool>,
        scale: Vec<f64>,
        per_channel: usize,
    },
    RoundingReg {
        v: Var,
        beta: f64,
    },
    Select {
        mask: Vec<bool>,
        a: Var,
        b: Var,
    },
    AnchorRows {
        x: Var,
        anchors: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    SmoothL1 {
        pred: Var,
        target: Vec<f64>,
        weights: Vec<f64>,
        beta: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Tape of recorded ops. Nodes are appended in execution order, so the tape
/// is already topologically sorted; `backward` walks it in reverse once.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn soft_round_h(v: f64) -> f64 {
    let s = 1.0 / (1.0 + (-v).exp());
    (s * (SOFT_ROUND_ZETA - SOFT_ROUND_GAMMA) + SOFT_ROUND_GAMMA).clamp(0.0, 1.0)
}

/// d h / d v, zero where the stretched sigmoid is clipped.
fn soft_round_dh(v: f64) -> f64 {
    let s = 1.0 / (1.0 + (-v).exp());
    let raw = s * (SOFT_ROUND_ZETA - SOFT_ROUND_GAMMA) + SOFT_ROUND_GAMMA;
    if raw <= 0.0 || raw >= 1.0 {
        0.0
    } else {
        s * (1.0 - s) * (SOFT_ROUND_ZETA - SOFT_ROUND_GAMMA)
    }
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient buffer on `backward`.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Gradient of the last `backward` w.r.t. a parameter leaf. Parameters
    /// unreachable from the loss get zeros; constants get `None`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        if !node.needs_grad || !matches!(node.op, Op::Leaf) {
            return None;
        }
        let shape = node.value.shape().to_vec();
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => Some(Tensor::from_parts(shape, g.clone())),
            None => Some(Tensor::zeros(&shape)),
        }
    }

    fn check_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() {
            return Err(Error::shape(op, "rank", sa.len(), sb.len()));
        }
        for (i, (x, y)) in sa.iter().zip(sb).enumerate() {
            if x != y {
                return Err(Error::shape(op, format!("axis {i}"), *x, *y));
            }
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x).map(f);
        let ng = self.requires_grad(x);
        self.push(value, op, ng)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 4 {
            return Err(Error::shape("conv2d", "input rank", 4, xs.len()));
        }
        if ws.len() != 4 {
            return Err(Error::shape("conv2d", "weight rank", 4, ws.len()));
        }
        if xs[1] != ws[1] {
            return Err(Error::shape("conv2d", "input channels", ws[1], xs[1]));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        if xs[2] + 2 * pad < ws[2] || xs[3] + 2 * pad < ws[3] {
            return Err(Error::shape("conv2d", "spatial extent", ws[2], xs[2] + 2 * pad));
        }
        if let Some(b) = b {
            let bs = self.shape(b);
            if bs.len() != 1 || bs[0] != ws[0] {
                return Err(Error::shape("conv2d", "bias length", ws[0], bs.iter().product()));
            }
        }
        let geom = ConvGeom {
            batch: xs[0],
            in_ch: xs[1],
            in_h: xs[2],
            in_w: xs[3],
            out_ch: ws[0],
            k_h: ws[2],
            k_w: ws[3],
            stride,
            pad,
        };
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let shape = vec![geom.batch, geom.out_ch, geom.out_h(), geom.out_w()];
        let ng = self.requires_grad(x) || self.requires_grad(w) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(Tensor::from_parts(shape, out), Op::Conv2d { x, w, b, geom }, ng))
    }

    /// `x [N, in] · wᵀ [in, out] + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 2 || ws.len() != 2 {
            return Err(Error::shape("linear", "rank", 2, xs.len().max(ws.len())));
        }
        if xs[1] != ws[1] {
            return Err(Error::shape("linear", "in features", ws[1], xs[1]));
        }
        let (n, k, m) = (xs[0], xs[1], ws[0]);
        let mut out = vec![0.0; n * m];
        kernels::gemm(n, k, m, self.value(x).data(), false, self.value(w).data(), true, 0.0, &mut out);
        if let Some(b) = b {
            let bd = self.value(b).data();
            if bd.len() != m {
                return Err(Error::shape("linear", "bias length", m, bd.len()));
            }
            for row in out.chunks_mut(m) {
                row.iter_mut().zip(bd).for_each(|(o, b)| *o += b);
            }
        }
        let ng = self.requires_grad(x) || self.requires_grad(w) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::Linear { x, w, b }, ng))
    }

    fn binary(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.check_same(op_name, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        let ng = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(value, op, ng))
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

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| c * x, Op::Scale(a, c))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let ng = self.requires_grad(a);
        Ok(self.push(value, Op::Reshape(a), ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::AxisOutOfRange {
                op: "softmax",
                axis,
                rank: shape.len(),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let dim = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |d: usize| (o * dim + d) * inner + i;
                let mx = (0..dim).map(|d| src[at(d)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for d in 0..dim {
                    let e = (src[at(d)] - mx).exp();
                    out[at(d)] = e;
                    z += e;
                }
                for d in 0..dim {
                    out[at(d)] /= z;
                }
            }
        }
        let ng = self.requires_grad(x);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Softmax { x, outer, dim, inner },
            ng,
        ))
    }

    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("max_pool2d", "rank", 4, s.len()));
        }
        if k == 0 || stride == 0 || s[2] < k || s[3] < k {
            return Err(Error::InvalidArgument(format!(
                "max_pool2d window {k} stride {stride} on {}x{}",
                s[2], s[3]
            )));
        }
        let (out, argmax, oh, ow) = kernels::max_pool2d_forward(self.value(x).data(), s[0] * s[1], s[2], s[3], k, stride);
        let ng = self.requires_grad(x);
        Ok(self.push(
            Tensor::from_parts(vec![s[0], s[1], oh, ow], out),
            Op::MaxPool { x, argmax },
            ng,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.requires_grad(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let ng = self.requires_grad(x);
        self.push(Tensor::scalar(s), Op::Mean(x), ng)
    }

    /// Un-rooted Lp distance `Σ |a − b|^p`.
    pub fn lp_sum(&mut self, a: Var, b: Var, p: f64) -> Result<Var> {
        self.check_same("lp_sum", a, b)?;
        if !(p >= 1.0) {
            return Err(Error::InvalidArgument(format!("lp_sum requires p >= 1, got {p}")));
        }
        let s = crate::quant::lp_sum_slices(self.value(a).data(), self.value(b).data(), p);
        let ng = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Tensor::scalar(s), Op::LpSum { a, b, p }, ng))
    }

    /// Fake quantization with a straight-through estimator. `scale` holds one
    /// value (per-tensor, `axis = None`) or one per channel along `axis`.
    pub fn fake_quant(
        &mut self,
        x: Var,
        scale: Var,
        zero: &[f64],
        qmin: f64,
        qmax: f64,
        axis: Option<usize>,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (dim, inner) = match axis {
            None => (1, 1),
            Some(a) if a < shape.len() => (shape[a], shape[a + 1..].iter().product()),
            Some(a) => {
                return Err(Error::AxisOutOfRange {
                    op: "fake_quant",
                    axis: a,
                    rank: shape.len(),
                })
            }
        };
        let sc = self.value(scale).data();
        if sc.len() != dim || zero.len() != dim {
            return Err(Error::shape("fake_quant", "scale channels", dim, sc.len()));
        }
        if let Some(i) = sc.iter().position(|&s| !(s > 0.0)) {
            return Err(Error::InvalidArgument(format!("fake_quant scale[{i}] = {} must be > 0", sc[i])));
        }
        let src = self.value(x).data();
        let n = src.len();
        let mut out = Vec::with_capacity(n);
        let mut chan = Vec::with_capacity(n);
        let mut state = Vec::with_capacity(n);
        for (i, &v) in src.iter().enumerate() {
            let c = if dim == 1 { 0 } else { (i / inner) % dim };
            let (s, z) = (sc[c], zero[c]);
            let q = (v / s).round_ties_even() + z;
            let (qc, st) = if q < qmin {
                (qmin, -1)
            } else if q > qmax {
                (qmax, 1)
            } else {
                (q, 0)
            };
            out.push((qc - z) * s);
            chan.push(c as u32);
            state.push(st);
        }
        let ng = self.requires_grad(x) || self.requires_grad(scale);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::FakeQuant {
                x,
                scale,
                chan,
                state,
                zero: zero.to_vec(),
                qmin,
                qmax,
            },
            ng,
        ))
    }

    /// Weight quantized with learned rounding:
    /// `s·(clip(base + h(v) + z, n, m) − z)` where `base = floor(w/s)` and
    /// channels run along axis 0.
    #[allow(clippy::too_many_arguments)]
    pub fn soft_round_weight(
        &mut self,
        v: Var,
        base: &[f64],
        scale: &[f64],
        zero: &[f64],
        qmin: f64,
        qmax: f64,
        hard: bool,
    ) -> Result<Var> {
        let shape = self.shape(v).to_vec();
        let n = base.len();
        if self.value(v).numel() != n {
            return Err(Error::shape("soft_round_weight", "numel", n, self.value(v).numel()));
        }
        let channels = shape[0];
        if scale.len() != channels || zero.len() != channels {
            return Err(Error::shape("soft_round_weight", "channels", channels, scale.len()));
        }
        let per_channel = n / channels;
        let vd = self.value(v).data();
        let mut out = Vec::with_capacity(n);
        let mut inside = Vec::with_capacity(n);
        for i in 0..n {
            let c = i / per_channel;
            let h = soft_round_h(vd[i]);
            let h = if hard { if h >= 0.5 { 1.0 } else { 0.0 } } else { h };
            let q = base[i] + h + zero[c];
            let qc = q.clamp(qmin, qmax);
            inside.push(!hard && q >= qmin && q <= qmax);
            out.push((qc - zero[c]) * scale[c]);
        }
        let ng = self.requires_grad(v) && !hard;
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::SoftRoundWeight {
                v,
                inside,
                scale: scale.to_vec(),
                per_channel,
            },
            ng,
        ))
    }

    /// `Σ (1 − |2h(v) − 1|^β)`.
    pub fn rounding_reg(&mut self, v: Var, beta: f64) -> Var {
        let s = self
            .value(v)
            .data()
            .iter()
            .map(|&x| 1.0 - (2.0 * soft_round_h(x) - 1.0).abs().powf(beta))
            .sum();
        let ng = self.requires_grad(v);
        self.push(Tensor::scalar(s), Op::RoundingReg { v, beta }, ng)
    }

    /// Elementwise `mask ? a : b`.
    pub fn select(&mut self, mask: Vec<bool>, a: Var, b: Var) -> Result<Var> {
        self.check_same("select", a, b)?;
        if mask.len() != self.value(a).numel() {
            return Err(Error::shape("select", "mask length", self.value(a).numel(), mask.len()));
        }
        let data = mask
            .iter()
            .zip(self.value(a).data().iter().zip(self.value(b).data()))
            .map(|(&m, (&x, &y))| if m { x } else { y })
            .collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        let ng = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(value, Op::Select { mask, a, b }, ng))
    }

    /// Rearranges a head map `[N, A·C, H, W]` into anchor rows
    /// `[N·H·W·A, C]` ordered (image, row, col, anchor).
    pub fn anchor_rows(&mut self, x: Var, anchors: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || anchors == 0 || s[1] % anchors != 0 {
            return Err(Error::shape("anchor_rows", "channels", anchors, s.get(1).copied().unwrap_or(0)));
        }
        let (n, ch, h, w) = (s[0], s[1], s[2], s[3]);
        let c = ch / anchors;
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for (i, o) in out.iter_mut().enumerate() {
            *o = src[anchor_row_source(i, n, anchors, c, h, w)];
        }
        let ng = self.requires_grad(x);
        Ok(self.push(
            Tensor::from_parts(vec![n * h * w * anchors, c], out),
            Op::AnchorRows { x, anchors },
            ng,
        ))
    }

    /// `Σ_r weight_r · (−ln softmax(logits_r)[target_r])` over rows of `[R, C]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>, weights: Vec<f64>) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || targets.len() != s[0] || weights.len() != s[0] {
            return Err(Error::shape("cross_entropy", "rows", s[0], targets.len()));
        }
        let c = s[1];
        if let Some(t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::InvalidArgument(format!("cross_entropy target {t} >= {c} classes")));
        }
        let src = self.value(logits).data();
        let mut probs = vec![0.0; src.len()];
        let mut loss = 0.0;
        for r in 0..s[0] {
            let row = &src[r * c..(r + 1) * c];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            for j in 0..c {
                probs[r * c + j] = (row[j] - mx).exp() / z;
            }
            loss += weights[r] * (z.ln() + mx - row[targets[r]]);
        }
        let ng = self.requires_grad(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            },
            ng,
        ))
    }

    /// `Σ_r weight_r · Σ_j huber_β(pred_rj − target_rj)`.
    pub fn smooth_l1(&mut self, pred: Var, target: Vec<f64>, weights: Vec<f64>, beta: f64) -> Result<Var> {
        let s = self.shape(pred).to_vec();
        if s.len() != 2 || target.len() != s[0] * s[1] || weights.len() != s[0] {
            return Err(Error::shape("smooth_l1", "rows", s[0], weights.len()));
        }
        let c = s[1];
        let p = self.value(pred).data();
        let mut loss = 0.0;
        for r in 0..s[0] {
            if weights[r] == 0.0 {
                continue;
            }
            let mut row = 0.0;
            for j in 0..c {
                let d = (p[r * c + j] - target[r * c + j]).abs();
                row += if d < beta { 0.5 * d * d / beta } else { d - 0.5 * beta };
            }
            loss += weights[r] * row;
        }
        let ng = self.requires_grad(pred);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SmoothL1 {
                pred,
                target,
                weights,
                beta,
            },
            ng,
        ))
    }

    fn accumulate(&mut self, v: Var, g: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let buf = self.grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        g(buf);
    }

    /// Reverse-mode sweep from a scalar loss. Gradients from previous calls
    /// are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let numel = self.value(loss).numel();
        if numel != 1 {
            return Err(Error::NonScalarLoss(numel));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].needs_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(dout) = self.grads[i].take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backward_op(i, &op, &dout);
            self.nodes[i].op = op;
        }
        Ok(())
    }

    fn backward_op(&mut self, i: usize, op: &Op, dout: &[f64]) {
        match op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let need = (
                    self.requires_grad(*x),
                    self.requires_grad(*w),
                    b.is_some_and(|b| self.requires_grad(b)),
                );
                let g = kernels::conv2d_backward(self.value(*x).data(), self.value(*w).data(), dout, geom, need);
                if let Some(dx) = g.dx {
                    self.accumulate(*x, |buf| add_into(buf, &dx));
                }
                if let Some(dw) = g.dw {
                    self.accumulate(*w, |buf| add_into(buf, &dw));
                }
                if let (Some(b), Some(db)) = (b, g.db) {
                    self.accumulate(*b, |buf| add_into(buf, &db));
                }
            }
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x).to_vec();
                let m = self.shape(*w)[0];
                let (n, k) = (xs[0], xs[1]);
                if self.requires_grad(*x) {
                    let mut dx = vec![0.0; n * k];
                    kernels::gemm(n, m, k, dout, false, self.value(*w).data(), false, 0.0, &mut dx);
                    self.accumulate(*x, |buf| add_into(buf, &dx));
                }
                if self.requires_grad(*w) {
                    let mut dw = vec![0.0; m * k];
                    kernels::gemm(m, n, k, dout, true, self.value(*x).data(), false, 0.0, &mut dw);
                    self.accumulate(*w, |buf| add_into(buf, &dw));
                }
                if let Some(b) = b {
                    let mut db = vec![0.0; m];
                    for row in dout.chunks(m) {
                        add_into(&mut db, row);
                    }
                    self.accumulate(*b, |buf| add_into(buf, &db));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(*a, |buf| add_into(buf, dout));
                self.accumulate(*b, |buf| add_into(buf, dout));
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, |buf| add_into(buf, dout));
                self.accumulate(*b, |buf| buf.iter_mut().zip(dout).for_each(|(g, d)| *g -= d));
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data().to_vec();
                let bv = self.value(*b).data().to_vec();
                self.accumulate(*a, |buf| {
                    for ((g, d), y) in buf.iter_mut().zip(dout).zip(&bv) {
                        *g += d * y;
                    }
                });
                self.accumulate(*b, |buf| {
                    for ((g, d), x) in buf.iter_mut().zip(dout).zip(&av) {
                        *g += d * x;
                    }
                });
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(*a, |buf| buf.iter_mut().zip(dout).for_each(|(g, d)| *g += c * d));
            }
            Op::Reshape(a) => self.accumulate(*a, |buf| add_into(buf, dout)),
            Op::Relu(x) => {
                let xv = self.value(*x).data().to_vec();
                self.accumulate(*x, |buf| {
                    for ((g, d), v) in buf.iter_mut().zip(dout).zip(&xv) {
                        if *v > 0.0 {
                            *g += d;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = self.nodes[i].value.data().to_vec();
                self.accumulate(*x, |buf| {
                    for ((g, d), y) in buf.iter_mut().zip(dout).zip(&y) {
                        *g += d * y * (1.0 - y);
                    }
                });
            }
            Op::Softmax { x, outer, dim, inner } => {
                let y = self.nodes[i].value.data().to_vec();
                let (outer, dim, inner) = (*outer, *dim, *inner);
                self.accumulate(*x, |buf| {
                    for o in 0..outer {
                        for k in 0..inner {
                            let at = |d: usize| (o * dim + d) * inner + k;
                            let dot: f64 = (0..dim).map(|d| dout[at(d)] * y[at(d)]).sum();
                            for d in 0..dim {
                                buf[at(d)] += y[at(d)] * (dout[at(d)] - dot);
                            }
                        }
                    }
                });
            }
            Op::MaxPool { x, argmax } => {
                self.accumulate(*x, |buf| {
                    for (d, &src) in dout.iter().zip(argmax) {
                        buf[src] += d;
                    }
                });
            }
            Op::Sum(x) => {
                let d = dout[0];
                self.accumulate(*x, |buf| buf.iter_mut().for_each(|g| *g += d));
            }
            Op::Mean(x) => {
                let d = dout[0] / self.value(*x).numel() as f64;
                self.accumulate(*x, |buf| buf.iter_mut().for_each(|g| *g += d));
            }
            Op::LpSum { a, b, p } => {
                let p = *p;
                let d0 = dout[0];
                let grad: Vec<f64> = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(self.value(*b).data())
                    .map(|(x, y)| d0 * crate::quant::lp_grad(x - y, p))
                    .collect();
                self.accumulate(*a, |buf| add_into(buf, &grad));
                self.accumulate(*b, |buf| buf.iter_mut().zip(&grad).for_each(|(g, d)| *g -= d));
            }
            Op::FakeQuant {
                x,
                scale,
                chan,
                state,
                zero,
                qmin,
                qmax,
            } => {
                self.accumulate(*x, |buf| {
                    for ((g, d), st) in buf.iter_mut().zip(dout).zip(state) {
                        if *st == 0 {
                            *g += d;
                        }
                    }
                });
                if self.requires_grad(*scale) {
                    let sc = self.value(*scale).data().to_vec();
                    let xv = self.value(*x).data();
                    let mut ds = vec![0.0; sc.len()];
                    for (k, (&v, d)) in xv.iter().zip(dout).enumerate() {
                        let c = chan[k] as usize;
                        let local = match state[k] {
                            -1 => qmin - zero[c],
                            1 => qmax - zero[c],
                            _ => {
                                let t = v / sc[c];
                                t.round_ties_even() - t
                            }
                        };
                        ds[c] += d * local;
                    }
                    self.accumulate(*scale, |buf| add_into(buf, &ds));
                }
            }
            Op::SoftRoundWeight {
                v,
                inside,
                scale,
                per_channel,
            } => {
                let vv = self.value(*v).data().to_vec();
                let per_channel = *per_channel;
                self.accumulate(*v, |buf| {
                    for (k, g) in buf.iter_mut().enumerate() {
                        if inside[k] {
                            *g += dout[k] * scale[k / per_channel] * soft_round_dh(vv[k]);
                        }
                    }
                });
            }
            Op::RoundingReg { v, beta } => {
                let beta = *beta;
                let d0 = dout[0];
                let vv = self.value(*v).data().to_vec();
                self.accumulate(*v, |buf| {
                    for (g, &x) in buf.iter_mut().zip(&vv) {
                        let u = 2.0 * soft_round_h(x) - 1.0;
                        if u == 0.0 {
                            continue;
                        }
                        // d/dv [1 − |u|^β] = −β|u|^(β−1)·sign(u)·2·h'(v)
                        let du = -beta * u.abs().powf(beta - 1.0) * u.signum() * 2.0 * soft_round_dh(x);
                        *g += d0 * du;
                    }
                });
            }
            Op::Select { mask, a, b } => {
                self.accumulate(*a, |buf| {
                    for ((g, d), m) in buf.iter_mut().zip(dout).zip(mask) {
                        if *m {
                            *g += d;
                        }
                    }
                });
                self.accumulate(*b, |buf| {
                    for ((g, d), m) in buf.iter_mut().zip(dout).zip(mask) {
                        if !*m {
                            *g += d;
                        }
                    }
                });
            }
            Op::AnchorRows { x, anchors } => {
                let s = self.shape(*x).to_vec();
                let (n, h, w) = (s[0], s[2], s[3]);
                let c = s[1] / anchors;
                let anchors = *anchors;
                self.accumulate(*x, |buf| {
                    for (k, d) in dout.iter().enumerate() {
                        buf[anchor_row_source(k, n, anchors, c, h, w)] += d;
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let c = self.shape(*logits)[1];
                let d0 = dout[0];
                self.accumulate(*logits, |buf| {
                    for (r, (&t, &wt)) in targets.iter().zip(weights).enumerate() {
                        if wt == 0.0 {
                            continue;
                        }
                        for j in 0..c {
                            let ind = if j == t { 1.0 } else { 0.0 };
                            buf[r * c + j] += d0 * wt * (probs[r * c + j] - ind);
                        }
                    }
                });
            }
            Op::SmoothL1 {
                pred,
                target,
                weights,
                beta,
            } => {
                let c = self.shape(*pred)[1];
                let d0 = dout[0];
                let beta = *beta;
                let p = self.value(*pred).data().to_vec();
                self.accumulate(*pred, |buf| {
                    for (r, &wt) in weights.iter().enumerate() {
                        if wt == 0.0 {
                            continue;
                        }
                        for j in 0..c {
                            let k = r * c + j;
                            let d = p[k] - target[k];
                            let g = if d.abs() < beta { d / beta } else { d.signum() };
                            buf[k] += d0 * wt * g;
                        }
                    }
                });
            }
        }
    }
}

fn add_into(buf: &mut [f64], src: &[f64]) {
    buf.iter_mut().zip(src).for_each(|(g, s)| *g += s);
}

/// Flat NCHW index feeding anchor row element `k`.
fn anchor_row_source(k: usize, _n: usize, anchors: usize, c: usize, h: usize, w: usize) -> usize {
    let j = k % c;
    let row = k / c;
    let a = row % anchors;
    let cell = row / anchors;
    let xo = cell % w;
    let y = (cell / w) % h;
    let img = cell / (w * h);
    ((img * anchors * c + a * c + j) * h + y) * w + xo
}
