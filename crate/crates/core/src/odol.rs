//! Label-free output loss between a full-precision and a quantized
//! detector: per-anchor classification distance over all anchors plus a
//! weighted localization distance over positive boxes picked from the FP
//! pass.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::toydet::{iou, nms, BBox, DetectionOutput};

const KL_CLAMP: f64 = 1e-8;
const NORM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClsFn {
    Mse,
    Kl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LocFn {
    L1,
    Iou,
}

impl LocFn {
    pub fn default_alpha(self) -> f64 {
        match self {
            LocFn::L1 => 0.1,
            LocFn::Iou => 0.001,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ODOLConfig {
    pub cls_fn: ClsFn,
    pub loc_fn: LocFn,
    pub alpha: f64,
    pub score_threshold: f64,
    pub top_k: usize,
    pub nms_threshold: f64,
}

impl ODOLConfig {
    /// Defaults for the given loss pair, with the matching `alpha`.
    pub fn new(cls_fn: ClsFn, loc_fn: LocFn) -> Self {
        ODOLConfig {
            cls_fn,
            loc_fn,
            alpha: loc_fn.default_alpha(),
            score_threshold: 0.05,
            top_k: 100,
            nms_threshold: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::InvalidArgument(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.score_threshold > 0.0 && self.score_threshold < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "score threshold must lie in (0, 1), got {}",
                self.score_threshold
            )));
        }
        if self.top_k == 0 {
            return Err(Error::InvalidArgument("top_k must be at least 1".into()));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        let c = match self.cls_fn {
            ClsFn::Mse => "mse",
            ClsFn::Kl => "kl",
        };
        let l = match self.loc_fn {
            LocFn::L1 => "l1",
            LocFn::Iou => "iou",
        };
        format!("{c}+{l}")
    }
}

impl Default for ODOLConfig {
    fn default() -> Self {
        ODOLConfig::new(ClsFn::Kl, LocFn::L1)
    }
}

/// Positive anchors of one image, ascending.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositiveSet {
    pub anchors: Vec<usize>,
}

impl PositiveSet {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn indicator(&self, n: usize) -> Vec<bool> {
        let mut out = vec![false; n];
        for &i in &self.anchors {
            out[i] = true;
        }
        out
    }
}

/// Score threshold, then top-k by score, then class-agnostic NMS on the
/// decoded FP boxes.
pub fn select_positive_boxes(fp: &DetectionOutput, cfg: &ODOLConfig) -> PositiveSet {
    let mut cand: Vec<(usize, f64)> = (0..fp.num_anchors())
        .map(|i| (i, fp.best_class(i).1))
        .filter(|&(_, s)| s >= cfg.score_threshold)
        .collect();
    cand.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    cand.truncate(cfg.top_k);
    let boxes: Vec<BBox> = cand.iter().map(|&(i, _)| fp.boxes[i]).collect();
    let scores: Vec<f64> = cand.iter().map(|&(_, s)| s).collect();
    let mut anchors: Vec<usize> = nms(&boxes, &scores, cfg.nms_threshold)
        .into_iter()
        .map(|k| cand[k].0)
        .collect();
    anchors.sort_unstable();
    PositiveSet { anchors }
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > NORM_TOL || p.iter().any(|v| !(*v >= -NORM_TOL)) {
        return Err(Error::InvalidArgument(format!("{what} is not a probability vector (sum {s})")));
    }
    Ok(())
}

fn clamp_normalize(p: &[f64]) -> Vec<f64> {
    let c: Vec<f64> = p.iter().map(|v| v.clamp(KL_CLAMP, 1.0)).collect();
    let s: f64 = c.iter().sum();
    c.into_iter().map(|v| v / s).collect()
}

/// Classification distance between the FP probabilities `c` and the
/// quantized ones `cq` of one anchor.
pub fn cls_loss(c: &[f64], cq: &[f64], f: ClsFn) -> Result<f64> {
    if c.len() != cq.len() || c.is_empty() {
        return Err(Error::shape("cls_loss", "classes", c.len(), cq.len()));
    }
    check_distribution(c, "reference probabilities")?;
    check_distribution(cq, "quantized probabilities")?;
    Ok(match f {
        ClsFn::Mse => c.iter().zip(cq).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / c.len() as f64,
        ClsFn::Kl => {
            let (a, b) = (clamp_normalize(c), clamp_normalize(cq));
            a.iter().zip(&b).map(|(x, y)| x * (x / y).ln()).sum::<f64>().max(0.0)
        }
    })
}

/// Localization distance between two decoded boxes.
pub fn loc_loss(l: &BBox, lq: &BBox, f: LocFn) -> f64 {
    match f {
        LocFn::L1 => {
            l.coords()
                .iter()
                .zip(lq.coords())
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / 4.0
        }
        LocFn::Iou => 1.0 - iou(l, lq),
    }
}

/// An output loss with its two normalized terms:
/// `odol = cls_term + alpha · loc_term`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct OdolValue {
    pub odol: f64,
    pub cls_term: f64,
    pub loc_term: f64,
}

/// Output loss of one image.
pub fn odol(fp: &DetectionOutput, q: &DetectionOutput, positives: &PositiveSet, cfg: &ODOLConfig) -> Result<OdolValue> {
    let n = fp.num_anchors();
    if q.num_anchors() != n || q.num_classes != fp.num_classes {
        return Err(Error::shape("odol", "anchors", n, q.num_anchors()));
    }
    if n == 0 {
        return Err(Error::Empty("detection output".into()));
    }
    let mut cls = 0.0;
    for i in 0..n {
        cls += cls_loss(fp.prob_row(i), q.prob_row(i), cfg.cls_fn)?;
    }
    let mut loc = 0.0;
    for &i in &positives.anchors {
        if i >= n {
            return Err(Error::InvalidArgument(format!("positive anchor {i} out of range {n}")));
        }
        loc += loc_loss(&fp.boxes[i], &q.boxes[i], cfg.loc_fn);
    }
    let cls_term = cls / n as f64;
    let loc_term = loc / n as f64;
    Ok(OdolValue {
        odol: cls_term + cfg.alpha * loc_term,
        cls_term,
        loc_term,
    })
}

/// Uniform average of [`odol`] over a batch of images.
pub fn odol_batch(
    fp: &[DetectionOutput],
    q: &[DetectionOutput],
    positives: &[PositiveSet],
    cfg: &ODOLConfig,
) -> Result<OdolValue> {
    if fp.len() != q.len() || fp.len() != positives.len() {
        return Err(Error::shape("odol_batch", "images", fp.len(), q.len()));
    }
    if fp.is_empty() {
        return Err(Error::Empty("odol batch".into()));
    }
    let mut acc = OdolValue::default();
    for ((a, b), p) in fp.iter().zip(q).zip(positives) {
        let v = odol(a, b, p, cfg)?;
        acc.odol += v.odol;
        acc.cls_term += v.cls_term;
        acc.loc_term += v.loc_term;
    }
    let n = fp.len() as f64;
    Ok(OdolValue {
        odol: acc.odol / n,
        cls_term: acc.cls_term / n,
        loc_term: acc.loc_term / n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OdolTraceRow {
    pub block_id: String,
    pub p: f64,
    pub odol: f64,
    pub cls_term: f64,
    pub loc_term: f64,
}

pub fn write_odol_trace<W: Write>(out: W, rows: &[OdolTraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::InvalidArgument(format!("csv: {e}")))?;
    }
    w.flush().map_err(|e| Error::InvalidArgument(format!("csv: {e}")))?;
    Ok(())
}
