//! Learned up/down rounding of weights with a soft relaxation.

use serde::{Deserialize, Serialize};

use super::AffineQuantizer;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var, SOFT_ROUND_GAMMA, SOFT_ROUND_ZETA};

/// Stretched, clipped sigmoid `h(v) ∈ [0, 1]`.
pub fn soft_round(v: f64) -> f64 {
    let s = 1.0 / (1.0 + (-v).exp());
    (s * (SOFT_ROUND_ZETA - SOFT_ROUND_GAMMA) + SOFT_ROUND_GAMMA).clamp(0.0, 1.0)
}

/// Annealing of the rounding regularizer over the optimization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundingSchedule {
    pub warmup: f64,
    pub beta_start: f64,
    pub beta_end: f64,
    pub lambda: f64,
}

impl Default for RoundingSchedule {
    fn default() -> Self {
        RoundingSchedule {
            warmup: 0.4,
            beta_start: 20.0,
            beta_end: 2.0,
            lambda: 0.01,
        }
    }
}

impl RoundingSchedule {
    fn check(progress: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&progress) {
            return Err(Error::InvalidArgument(format!("progress {progress} outside [0, 1]")));
        }
        Ok(())
    }

    /// Regularizer weight: exactly zero during warmup.
    pub fn weight(&self, progress: f64) -> Result<f64> {
        Self::check(progress)?;
        Ok(if progress < self.warmup { 0.0 } else { self.lambda })
    }

    /// β decays linearly from `beta_start` to `beta_end` after warmup.
    pub fn beta(&self, progress: f64) -> Result<f64> {
        Self::check(progress)?;
        if progress < self.warmup || self.warmup >= 1.0 {
            return Ok(self.beta_start);
        }
        let rel = (progress - self.warmup) / (1.0 - self.warmup);
        Ok(self.beta_start + (self.beta_end - self.beta_start) * rel)
    }
}

/// Per-weight rounding variables for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundingVars {
    pub v: Tensor,
    pub frozen: bool,
}

/// `floor(w / s)` per output channel.
pub fn floor_codes(w: &Tensor, q: &AffineQuantizer) -> Vec<f64> {
    let per = w.numel() / q.channels();
    w.data()
        .iter()
        .enumerate()
        .map(|(i, &x)| (x / q.scale[if q.channels() == 1 { 0 } else { i / per }]).floor())
        .collect()
}

impl RoundingVars {
    /// Initializes `v` so that `h(v)` equals the fractional part of `w/s`,
    /// i.e. the soft weight starts at the FP weight.
    pub fn init(w: &Tensor, q: &AffineQuantizer) -> Self {
        let floors = floor_codes(w, q);
        let per = w.numel() / q.channels();
        let span = SOFT_ROUND_ZETA - SOFT_ROUND_GAMMA;
        let data = w
            .data()
            .iter()
            .zip(&floors)
            .enumerate()
            .map(|(i, (&x, &f))| {
                let c = if q.channels() == 1 { 0 } else { i / per };
                let rest = x / q.scale[c] - f;
                let sig = ((rest - SOFT_ROUND_GAMMA) / span).clamp(1e-6, 1.0 - 1e-6);
                (sig / (1.0 - sig)).ln()
            })
            .collect();
        RoundingVars {
            v: Tensor::from_parts(w.shape().to_vec(), data),
            frozen: false,
        }
    }

    /// Current rounding offsets; hardened to {0, 1} once frozen.
    pub fn h(&self) -> Tensor {
        self.v.map(|v| {
            let h = soft_round(v);
            if self.frozen {
                if h >= 0.5 {
                    1.0
                } else {
                    0.0
                }
            } else {
                h
            }
        })
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Weight after rounding with the current offsets.
    pub fn quantized_weight(&self, w: &Tensor, q: &AffineQuantizer) -> Tensor {
        let floors = floor_codes(w, q);
        let per = w.numel() / q.channels();
        let (n, m) = (q.qmin() as f64, q.qmax() as f64);
        let h = self.h();
        let data = floors
            .iter()
            .zip(h.data())
            .enumerate()
            .map(|(i, (&f, &hv))| {
                let c = if q.channels() == 1 { 0 } else { i / per };
                let z = q.zero_point[c] as f64;
                ((f + hv + z).clamp(n, m) - z) * q.scale[c]
            })
            .collect();
        Tensor::from_parts(w.shape().to_vec(), data)
    }

    /// Records the soft-rounded weight on a graph with `v` as `v_var`.
    pub fn apply(&self, g: &mut Graph, v_var: Var, w: &Tensor, q: &AffineQuantizer) -> Result<Var> {
        let base = floor_codes(w, q);
        let zero: Vec<f64> = q.zero_point.iter().map(|&z| z as f64).collect();
        g.soft_round_weight(v_var, &base, &q.scale, &zero, q.qmin() as f64, q.qmax() as f64, self.frozen)
    }
}

/// Value of the rounding regularizer `λ(progress)·Σ(1 − |2h(v) − 1|^β)`.
pub fn rounding_regularizer(v: &Tensor, progress: f64, schedule: &RoundingSchedule) -> Result<f64> {
    let w = schedule.weight(progress)?;
    let beta = schedule.beta(progress)?;
    Ok(w * v
        .data()
        .iter()
        .map(|&x| 1.0 - (2.0 * soft_round(x) - 1.0).abs().powf(beta))
        .sum::<f64>())
}
