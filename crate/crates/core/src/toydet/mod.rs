//! Desk-scale anchor-based single-stage detector and its post-processing.

mod boxes;
mod map;
mod model;
mod nms;

pub use boxes::{decode_box, decode_boxes, encode_box, encode_boxes, iou, BBox, Detection};
pub use map::{average_precision, coco_thresholds, evaluate_map, MapReport};
pub use model::{ConvLayer, FpHooks, Head, HeadVars, LayerHooks, ToyDetector, Unit, UnitKind};
pub use nms::nms;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::AffineQuantizer;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyDetectorConfig {
    pub input_size: usize,
    pub in_channels: usize,
    pub stem_channels: usize,
    /// Output channels of each residual stage; stage `i` has stride `8·2^i`.
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub neck_channels: usize,
    /// Anchor side lengths as multiples of the level stride (one aspect ratio).
    pub anchor_scales: Vec<f64>,
    pub num_classes: usize,
}

impl Default for ToyDetectorConfig {
    fn default() -> Self {
        ToyDetectorConfig {
            input_size: 64,
            in_channels: 3,
            stem_channels: 16,
            stage_channels: vec![24, 48],
            blocks_per_stage: 2,
            neck_channels: 32,
            anchor_scales: vec![1.25, 1.6, 2.0],
            num_classes: 3,
        }
    }
}

impl ToyDetectorConfig {
    pub fn strides(&self) -> Vec<usize> {
        (0..self.stage_channels.len()).map(|i| 8 << i).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.len() < 2 {
            return Err(Error::InvalidArgument("detector needs at least two feature levels".into()));
        }
        if self.blocks_per_stage == 0 || self.anchor_scales.is_empty() || self.num_classes == 0 {
            return Err(Error::InvalidArgument("empty stage, anchor or class configuration".into()));
        }
        for s in self.strides() {
            if self.input_size % s != 0 {
                return Err(Error::InvalidArgument(format!(
                    "stride {s} does not divide input size {}",
                    self.input_size
                )));
            }
        }
        Ok(())
    }

    pub fn anchors_per_image(&self) -> usize {
        self.strides()
            .iter()
            .map(|s| (self.input_size / s).pow(2) * self.anchor_scales.len())
            .sum()
    }
}

/// Anchors per level in (row, col, anchor) order.
pub fn generate_anchors(config: &ToyDetectorConfig) -> Vec<Vec<BBox>> {
    config
        .strides()
        .into_iter()
        .map(|stride| {
            let cells = config.input_size / stride;
            let mut level = Vec::with_capacity(cells * cells * config.anchor_scales.len());
            for y in 0..cells {
                for x in 0..cells {
                    let cx = (x as f64 + 0.5) * stride as f64;
                    let cy = (y as f64 + 0.5) * stride as f64;
                    for &s in &config.anchor_scales {
                        let side = s * stride as f64;
                        level.push(BBox::from_center(cx, cy, side, side));
                    }
                }
            }
            level
        })
        .collect()
}

/// A labeled box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    #[serde(flatten)]
    pub bbox: BBox,
    pub class_id: usize,
}

/// Ground truth of one image.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub boxes: Vec<GtBox>,
}

/// Per-anchor network output of one image. Class index 0 of each
/// probability row is background; class `k` lives at index `k + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionOutput {
    pub num_classes: usize,
    /// `N × (K + 1)` softmax probabilities.
    pub probs: Vec<f64>,
    /// `N × 4` raw offsets.
    pub offsets: Vec<f64>,
    /// Decoded, image-clipped boxes.
    pub boxes: Vec<BBox>,
}

impl DetectionOutput {
    pub fn num_anchors(&self) -> usize {
        self.boxes.len()
    }

    pub fn prob_row(&self, i: usize) -> &[f64] {
        let k = self.num_classes + 1;
        &self.probs[i * k..(i + 1) * k]
    }

    /// Highest-scoring foreground class of anchor `i`; ties go to the lower class.
    pub fn best_class(&self, i: usize) -> (usize, f64) {
        let row = self.prob_row(i);
        let mut best = (0, row[1]);
        for (k, &p) in row.iter().enumerate().skip(2) {
            if p > best.1 {
                best = (k - 1, p);
            }
        }
        best
    }
}

/// Post-processing settings used for evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PostprocessConfig {
    pub score_threshold: f64,
    pub nms_threshold: f64,
    pub max_detections: usize,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        PostprocessConfig {
            score_threshold: 0.05,
            nms_threshold: 0.5,
            max_detections: 100,
        }
    }
}

/// Best-class scoring, score filtering, per-class NMS and a global cap.
pub fn postprocess(out: &DetectionOutput, cfg: &PostprocessConfig) -> Vec<Detection> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); out.num_classes];
    for i in 0..out.num_anchors() {
        let (c, s) = out.best_class(i);
        if s >= cfg.score_threshold {
            by_class[c].push(i);
        }
    }
    let mut dets = Vec::new();
    for (c, idx) in by_class.iter().enumerate() {
        let boxes: Vec<BBox> = idx.iter().map(|&i| out.boxes[i]).collect();
        let scores: Vec<f64> = idx.iter().map(|&i| out.best_class(i).1).collect();
        for k in nms(&boxes, &scores, cfg.nms_threshold) {
            dets.push((idx[k], Detection {
                bbox: boxes[k],
                class_id: c,
                score: scores[k],
            }));
        }
    }
    dets.sort_by(|a, b| b.1.score.total_cmp(&a.1.score).then(a.0.cmp(&b.0)));
    dets.truncate(cfg.max_detections);
    dets.into_iter().map(|(_, d)| d).collect()
}

/// Quantizers attached to named weights (conv layer names) and activation
/// points.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttachedQuantizers {
    pub weights: BTreeMap<String, AffineQuantizer>,
    pub acts: BTreeMap<String, AffineQuantizer>,
}

impl AttachedQuantizers {
    pub fn is_empty(&self) -> bool {
        self.weights.is_empty() && self.acts.is_empty()
    }
}

/// Fake-quantizes attached weights and activations during a forward pass.
pub struct QuantHooks<'a> {
    pub quant: &'a AttachedQuantizers,
}

impl LayerHooks for QuantHooks<'_> {
    fn weight(&mut self, g: &mut Graph, layer: &ConvLayer) -> Result<Var> {
        let w = match self.quant.weights.get(&layer.name) {
            Some(q) => q.fake_quantize(&layer.weight),
            None => layer.weight.clone(),
        };
        Ok(g.constant(w))
    }

    fn activation(&mut self, g: &mut Graph, point: &str, x: Var) -> Result<Var> {
        match self.quant.acts.get(point) {
            Some(q) => q.apply(g, x, None),
            None => Ok(x),
        }
    }
}

/// A detector together with the quantizers that simulate its integer
/// execution.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub model: ToyDetector,
    pub quant: AttachedQuantizers,
}

impl QuantizedModel {
    pub fn fp(model: ToyDetector) -> Self {
        QuantizedModel {
            model,
            quant: AttachedQuantizers::default(),
        }
    }

    pub fn forward(&self, images: &Tensor) -> Result<Vec<DetectionOutput>> {
        self.model.forward(images, &mut QuantHooks { quant: &self.quant })
    }
}

/// Stacks CHW images into an NCHW batch.
pub fn stack_images(images: &[&Tensor]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::Empty("image batch".into()))?;
    let mut shape = vec![images.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(first.numel() * images.len());
    for im in images {
        if im.shape() != first.shape() {
            return Err(Error::shape("stack_images", "image numel", first.numel(), im.numel()));
        }
        data.extend_from_slice(im.data());
    }
    Tensor::new(&shape, data)
}

/// Runs `model` over images in fixed-size chunks.
pub fn run_batched(model: &QuantizedModel, images: &[Tensor], chunk: usize) -> Result<Vec<DetectionOutput>> {
    let mut outs = Vec::with_capacity(images.len());
    for part in images.chunks(chunk.max(1)) {
        let refs: Vec<&Tensor> = part.iter().collect();
        outs.extend(model.forward(&stack_images(&refs)?)?);
    }
    Ok(outs)
}

/// Detections for every image, then mAP against `gts` at IoU 0.5.
pub fn evaluate_model(model: &QuantizedModel, images: &[Tensor], gts: &[GroundTruth]) -> Result<f64> {
    let outs = run_batched(model, images, 32)?;
    let pp = PostprocessConfig::default();
    let dets: Vec<Vec<Detection>> = outs.iter().map(|o| postprocess(o, &pp)).collect();
    Ok(evaluate_map(&dets, gts, &[0.5], model.model.config.num_classes)?.map)
}
