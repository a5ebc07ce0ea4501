//! Uniform affine fake quantization, Lp reconstruction metrics and scale
//! search.

mod rounding;

pub use rounding::{floor_codes, rounding_regularizer, soft_round, RoundingSchedule, RoundingVars};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Smallest admissible scale; used for constant-zero channels.
pub const SCALE_EPS: f64 = 1e-8;

/// Default number of candidates in a scale grid search.
pub const GRID_POINTS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerTensor,
    /// One scale per slice of axis 0 (output channel of an OIHW weight).
    PerChannel,
}

/// Per-tensor or per-channel affine quantizer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineQuantizer {
    pub granularity: Granularity,
    pub bits: u32,
    pub signed: bool,
    #[serde(rename = "s")]
    pub scale: Vec<f64>,
    #[serde(rename = "z")]
    pub zero_point: Vec<i64>,
}

/// Integer range `[n, m]` for a bit width and signedness.
pub fn qrange(bits: u32, signed: bool) -> (i64, i64) {
    if signed {
        (-(1i64 << (bits - 1)), (1i64 << (bits - 1)) - 1)
    } else {
        (0, (1i64 << bits) - 1)
    }
}

/// `(clip(round(x/s) + z, n, m) − z)·s` with round-half-to-even.
#[inline]
pub fn quantize_value(x: f64, s: f64, z: i64, n: i64, m: i64) -> f64 {
    let q = ((x / s).round_ties_even() + z as f64).clamp(n as f64, m as f64);
    (q - z as f64) * s
}

fn channel_slices(x: &Tensor, g: Granularity) -> Vec<&[f64]> {
    match g {
        Granularity::PerTensor => vec![x.data()],
        Granularity::PerChannel => {
            let c = x.shape()[0].max(1);
            x.data().chunks(x.numel() / c).collect()
        }
    }
}

impl AffineQuantizer {
    fn validate_bits(bits: u32) -> Result<()> {
        if !(2..=48).contains(&bits) {
            return Err(Error::InvalidArgument(format!("bit width {bits} outside [2, 48]")));
        }
        Ok(())
    }

    /// Min-Max calibration: the grid spans the observed range exactly.
    ///
    /// A constant channel has its range widened to include zero; a constant
    /// zero channel gets `SCALE_EPS`.
    pub fn init_minmax(x: &Tensor, bits: u32, signed: bool, granularity: Granularity) -> Result<Self> {
        Self::validate_bits(bits)?;
        if x.numel() == 0 {
            return Err(Error::Empty("init_minmax input".into()));
        }
        let (n, m) = qrange(bits, signed);
        let mut scale = Vec::new();
        let mut zero_point = Vec::new();
        for ch in channel_slices(x, granularity) {
            let mut lo = ch.iter().copied().fold(f64::INFINITY, f64::min);
            let mut hi = ch.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if hi - lo < SCALE_EPS {
                lo = lo.min(0.0);
                hi = hi.max(0.0);
            }
            let s = ((hi - lo) / (m - n) as f64).max(SCALE_EPS);
            scale.push(s);
            zero_point.push(zero_for(lo, s, n, m));
        }
        Ok(AffineQuantizer {
            granularity,
            bits,
            signed,
            scale,
            zero_point,
        })
    }

    /// Signed symmetric quantizer (`z = 0`) with `s = max|x| / m` per channel.
    pub fn init_symmetric(x: &Tensor, bits: u32, granularity: Granularity) -> Result<Self> {
        Self::validate_bits(bits)?;
        if x.numel() == 0 {
            return Err(Error::Empty("init_symmetric input".into()));
        }
        let (_, m) = qrange(bits, true);
        let scale: Vec<f64> = channel_slices(x, granularity)
            .iter()
            .map(|ch| (ch.iter().fold(0.0f64, |a, v| a.max(v.abs())) / m as f64).max(SCALE_EPS))
            .collect();
        let zero_point = vec![0; scale.len()];
        Ok(AffineQuantizer {
            granularity,
            bits,
            signed: true,
            scale,
            zero_point,
        })
    }

    pub fn qmin(&self) -> i64 {
        qrange(self.bits, self.signed).0
    }

    pub fn qmax(&self) -> i64 {
        qrange(self.bits, self.signed).1
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    pub fn is_symmetric(&self) -> bool {
        self.signed && self.zero_point.iter().all(|&z| z == 0)
    }

    /// Checks the structural invariants (positive scales, z inside `[n, m]`).
    pub fn validate(&self) -> Result<()> {
        Self::validate_bits(self.bits)?;
        if self.scale.is_empty() || self.scale.len() != self.zero_point.len() {
            return Err(Error::InvalidArgument("quantizer scale/zero-point length mismatch".into()));
        }
        let (n, m) = (self.qmin(), self.qmax());
        for (c, (&s, &z)) in self.scale.iter().zip(&self.zero_point).enumerate() {
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::InvalidArgument(format!("channel {c}: scale {s} must be positive")));
            }
            if z < n || z > m {
                return Err(Error::InvalidArgument(format!("channel {c}: zero-point {z} outside [{n}, {m}]")));
            }
        }
        Ok(())
    }

    /// Replaces the scale of one channel. Asymmetric quantizers re-derive
    /// the zero point so that `observed_min` stays representable.
    pub fn set_scale(&mut self, channel: usize, s: f64, observed_min: f64) {
        self.scale[channel] = s;
        if !self.is_symmetric() {
            self.zero_point[channel] = zero_for(observed_min, s, self.qmin(), self.qmax());
        }
    }

    fn zero_f64(&self) -> Vec<f64> {
        self.zero_point.iter().map(|&z| z as f64).collect()
    }

    fn channel_of(&self, x: &Tensor) -> impl Fn(usize) -> usize {
        let per = match self.granularity {
            Granularity::PerTensor => usize::MAX,
            Granularity::PerChannel => x.numel() / x.shape()[0].max(1),
        };
        move |i| if per == usize::MAX { 0 } else { i / per }
    }

    /// Dequantized value of every element.
    pub fn fake_quantize(&self, x: &Tensor) -> Tensor {
        let (n, m) = (self.qmin(), self.qmax());
        let ch = self.channel_of(x);
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = ch(i);
                quantize_value(v, self.scale[c], self.zero_point[c], n, m)
            })
            .collect();
        Tensor::from_parts(x.shape().to_vec(), data)
    }

    /// Integer codes `clip(round(x/s) + z, n, m)`.
    pub fn quantize_int(&self, x: &Tensor) -> Vec<i64> {
        let (n, m) = (self.qmin(), self.qmax());
        let ch = self.channel_of(x);
        x.data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = ch(i);
                ((v / self.scale[c]).round_ties_even() as i64 + self.zero_point[c]).clamp(n, m)
            })
            .collect()
    }

    /// `(q − z)·s` for integer codes laid out like `shape`.
    pub fn dequantize_int(&self, codes: &[i64], shape: &[usize]) -> Tensor {
        let per = match self.granularity {
            Granularity::PerTensor => codes.len(),
            Granularity::PerChannel => codes.len() / shape[0].max(1),
        };
        let data = codes
            .iter()
            .enumerate()
            .map(|(i, &q)| {
                let c = if self.granularity == Granularity::PerTensor { 0 } else { i / per };
                (q - self.zero_point[c]) as f64 * self.scale[c]
            })
            .collect();
        Tensor::from_parts(shape.to_vec(), data)
    }

    /// Records a differentiable fake-quant node. Pass `scale` as a graph
    /// parameter to optimize it, otherwise a constant is created.
    pub fn apply(&self, g: &mut Graph, x: Var, scale: Option<Var>) -> Result<Var> {
        let scale = match scale {
            Some(s) => s,
            None => g.constant(Tensor::from_parts(vec![self.scale.len()], self.scale.clone())),
        };
        let axis = match self.granularity {
            Granularity::PerTensor => None,
            Granularity::PerChannel => Some(0),
        };
        g.fake_quant(x, scale, &self.zero_f64(), self.qmin() as f64, self.qmax() as f64, axis)
    }

    /// Splits `x − x^q` into clipping and rounding parts.
    pub fn perturbation(&self, x: &Tensor) -> PerturbationReport {
        let (n, m) = (self.qmin(), self.qmax());
        let ch = self.channel_of(x);
        let len = x.numel();
        let mut dr = Vec::with_capacity(len);
        let mut dc = Vec::with_capacity(len);
        let mut dp = Vec::with_capacity(len);
        let mut clipped = 0usize;
        for (i, &v) in x.data().iter().enumerate() {
            let c = ch(i);
            let (s, z) = (self.scale[c], self.zero_point[c]);
            let r = (v / s).round_ties_even() + z as f64;
            let xq = quantize_value(v, s, z, n, m);
            if r < n as f64 || r > m as f64 {
                clipped += 1;
                // nearest representable endpoint
                let edge = (r.clamp(n as f64, m as f64) - z as f64) * s;
                dc.push(v - edge);
                dr.push(0.0);
            } else {
                dc.push(0.0);
                dr.push(v - xq);
            }
            dp.push(v - xq);
        }
        let shape = x.shape().to_vec();
        PerturbationReport {
            delta_round: Tensor::from_parts(shape.clone(), dr),
            delta_clip: Tensor::from_parts(shape.clone(), dc),
            delta_total: Tensor::from_parts(shape, dp),
            fraction_clipped: if len == 0 { 0.0 } else { clipped as f64 / len as f64 },
        }
    }
}

fn zero_for(lo: f64, s: f64, n: i64, m: i64) -> i64 {
    let z = (n as f64 - lo / s).round_ties_even();
    if z.is_finite() {
        (z as i64).clamp(n, m)
    } else if z > 0.0 {
        m
    } else {
        n
    }
}

/// Decomposition of the quantization error of one tensor.
#[derive(Debug, Clone)]
pub struct PerturbationReport {
    pub delta_round: Tensor,
    pub delta_clip: Tensor,
    pub delta_total: Tensor,
    pub fraction_clipped: f64,
}

/// `|d|^p` evaluated as `exp(p·ln|d|)`, zero below `LP_EPS`.
#[inline]
pub fn lp_pow(d: f64, p: f64) -> f64 {
    let a = d.abs();
    if a < crate::tensor::LP_EPS {
        0.0
    } else if p == 1.0 {
        a
    } else if p == 2.0 {
        a * a
    } else {
        (p * a.ln()).exp()
    }
}

/// Derivative of `|d|^p` w.r.t. `d`, zero at the kink.
#[inline]
pub fn lp_grad(d: f64, p: f64) -> f64 {
    let a = d.abs();
    if a < crate::tensor::LP_EPS {
        0.0
    } else if p == 1.0 {
        d.signum()
    } else {
        p * ((p - 1.0) * a.ln()).exp() * d.signum()
    }
}

pub fn lp_sum_slices(a: &[f64], b: &[f64], p: f64) -> f64 {
    a.iter().zip(b).map(|(x, y)| lp_pow(x - y, p)).sum()
}

/// Rooted Lp distance `(Σ|O − O^q|^p)^(1/p)`.
pub fn lp_loss(o: &Tensor, oq: &Tensor, p: f64) -> Result<f64> {
    if !(p >= 1.0) {
        return Err(Error::InvalidArgument(format!("lp_loss requires p >= 1, got {p}")));
    }
    if o.shape() != oq.shape() {
        return Err(Error::shape("lp_loss", "numel", o.numel(), oq.numel()));
    }
    Ok(lp_sum_slices(o.data(), oq.data(), p).powf(1.0 / p))
}

/// Un-rooted form with the same argmin; this is what optimization minimizes.
pub fn lp_loss_unrooted(o: &Tensor, oq: &Tensor, p: f64) -> Result<f64> {
    if !(p >= 1.0) {
        return Err(Error::InvalidArgument(format!("lp_loss requires p >= 1, got {p}")));
    }
    if o.shape() != oq.shape() {
        return Err(Error::shape("lp_loss", "numel", o.numel(), oq.numel()));
    }
    Ok(lp_sum_slices(o.data(), oq.data(), p))
}

/// Cosine similarity of two flattened buffers (1 when both are zero).
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 && nb == 0.0 {
        1.0
    } else if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Reconstruction metric minimized by a scale search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "p")]
pub enum Metric {
    Lp(f64),
    /// 1 − cosine similarity.
    Cosine,
}

impl Metric {
    pub fn loss(&self, o: &[f64], oq: &[f64]) -> f64 {
        match *self {
            Metric::Lp(p) => lp_sum_slices(o, oq, p),
            Metric::Cosine => 1.0 - cosine_similarity(o, oq),
        }
    }
}

/// Linear grid `s_max·(0.01 … 1.00)`.
pub fn scale_candidates(s_max: f64, count: usize) -> Vec<f64> {
    if count <= 1 {
        return vec![s_max];
    }
    (0..count)
        .map(|k| s_max * (0.01 + 0.99 * k as f64 / (count - 1) as f64))
        .collect()
}

/// Index of the smallest loss; ties go to the later (larger-scale) entry.
pub fn argmin_prefer_last(losses: &[f64]) -> usize {
    let mut best = 0;
    for (i, &l) in losses.iter().enumerate() {
        if l <= losses[best] {
            best = i;
        }
    }
    best
}

/// Exhaustive grid search of each channel's scale against the tensor itself.
/// The grid is bounded above by the Min-Max (or symmetric absmax) scale of
/// `init`. Returns the tuned quantizer and the per-channel loss curves.
pub fn grid_search_local(x: &Tensor, init: &AffineQuantizer, metric: Metric, points: usize) -> (AffineQuantizer, Vec<Vec<f64>>) {
    let mut q = init.clone();
    let (n, m) = (q.qmin(), q.qmax());
    let mut curves = Vec::new();
    for (c, ch) in channel_slices(x, init.granularity).into_iter().enumerate() {
        let lo = ch.iter().copied().fold(f64::INFINITY, f64::min);
        let cands = scale_candidates(init.scale[c], points);
        let mut probe = q.clone();
        let mut buf = vec![0.0; ch.len()];
        let losses: Vec<f64> = cands
            .iter()
            .map(|&s| {
                probe.set_scale(c, s, lo);
                let z = probe.zero_point[c];
                for (b, &v) in buf.iter_mut().zip(ch) {
                    *b = quantize_value(v, s, z, n, m);
                }
                metric.loss(ch, &buf)
            })
            .collect();
        let best = argmin_prefer_last(&losses);
        q.set_scale(c, cands[best], lo);
        curves.push(losses);
    }
    (q, curves)
}
