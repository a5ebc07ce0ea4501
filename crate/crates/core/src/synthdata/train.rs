//! Supervised training of the toy detector.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Adam, AdamConfig, Graph, Tensor, Var};
use crate::toydet::{encode_box, generate_anchors, iou, stack_images, BBox, ConvLayer, GroundTruth, LayerHooks, ToyDetector};

use super::LabeledSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Anchors with IoU at least this against a box are positives.
    pub positive_iou: f64,
    pub smooth_l1_beta: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 16,
            lr: 2e-3,
            seed: 0,
            positive_iou: 0.5,
            smooth_l1_beta: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    /// Mean per-batch loss of every epoch.
    pub epoch_loss: Vec<f64>,
}

/// Classification target (0 = background) and box regression target of
/// every anchor of one image.
pub(crate) struct AnchorTargets {
    pub classes: Vec<usize>,
    pub offsets: Vec<f64>,
}

/// IoU ≥ `pos_iou` makes an anchor positive for its best box; each box's own
/// best anchor is positive as well so that no object goes unassigned.
pub(crate) fn assign_anchors(anchors: &[BBox], gt: &GroundTruth, pos_iou: f64) -> AnchorTargets {
    let n = anchors.len();
    let mut classes = vec![0; n];
    let mut offsets = vec![0.0; n * 4];
    let mut best_gt: Vec<Option<(usize, f64)>> = vec![None; n];
    for (i, a) in anchors.iter().enumerate() {
        for (j, b) in gt.boxes.iter().enumerate() {
            let v = iou(a, &b.bbox);
            if v >= pos_iou && best_gt[i].map_or(true, |(_, bv)| v > bv) {
                best_gt[i] = Some((j, v));
            }
        }
    }
    for (j, b) in gt.boxes.iter().enumerate() {
        let mut best = (0, f64::NEG_INFINITY);
        for (i, a) in anchors.iter().enumerate() {
            let v = iou(a, &b.bbox);
            if v > best.1 {
                best = (i, v);
            }
        }
        if best.1 > 0.0 {
            best_gt[best.0] = Some((j, f64::INFINITY));
        }
    }
    for (i, m) in best_gt.iter().enumerate() {
        if let Some((j, _)) = m {
            let b = &gt.boxes[*j];
            classes[i] = b.class_id + 1;
            offsets[i * 4..i * 4 + 4].copy_from_slice(&encode_box(&b.bbox, &anchors[i]));
        }
    }
    AnchorTargets { classes, offsets }
}

struct ParamHooks {
    vars: BTreeMap<String, (Var, Var)>,
}

impl LayerHooks for ParamHooks {
    fn weight(&mut self, _g: &mut Graph, layer: &ConvLayer) -> Result<Var> {
        self.vars
            .get(&layer.name)
            .map(|v| v.0)
            .ok_or_else(|| Error::UnknownLayer(layer.name.clone()))
    }

    fn bias(&mut self, _g: &mut Graph, layer: &ConvLayer) -> Result<Var> {
        self.vars
            .get(&layer.name)
            .map(|v| v.1)
            .ok_or_else(|| Error::UnknownLayer(layer.name.clone()))
    }
}

/// Trains `model` in place with Adam on summed anchor cross-entropy plus
/// smooth-L1 on positive offsets, normalized by the positive count. Weights
/// are rounded to f32 at the end so that a saved model evaluates
/// identically after loading.
pub fn train_toy(model: &mut ToyDetector, data: &LabeledSet, cfg: &TrainConfig) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    let mut report = TrainReport {
        steps: 0,
        epoch_loss: Vec::new(),
    };
    if cfg.epochs == 0 {
        return Ok(report);
    }
    let levels = generate_anchors(&model.config);
    let anchors: Vec<BBox> = levels.iter().flatten().copied().collect();
    let targets: Vec<AnchorTargets> = data
        .groundtruth
        .iter()
        .map(|gt| assign_anchors(&anchors, gt, cfg.positive_iou))
        .collect();
    let a = model.config.anchor_scales.len();
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let mut g = Graph::new();
            let mut hooks = ParamHooks { vars: BTreeMap::new() };
            for l in model.conv_layers() {
                let w = g.param(l.weight.clone());
                let b = g.param(l.bias.clone());
                hooks.vars.insert(l.name.clone(), (w, b));
            }
            let imgs: Vec<&Tensor> = chunk.iter().map(|&i| &data.images[i]).collect();
            let x = g.constant(stack_images(&imgs)?);
            let head = model.forward_graph(&mut g, x, &mut hooks)?;

            let mut terms = Vec::new();
            let mut num_pos = 0usize;
            let mut level_start = 0;
            for (li, &(cls, bx)) in head.levels.iter().enumerate() {
                let per_image = levels[li].len();
                let cls_rows = g.anchor_rows(cls, a)?;
                let box_rows = g.anchor_rows(bx, a)?;
                let mut tc = Vec::with_capacity(chunk.len() * per_image);
                let mut to = Vec::with_capacity(chunk.len() * per_image * 4);
                let mut pw = Vec::with_capacity(chunk.len() * per_image);
                for &i in chunk {
                    let t = &targets[i];
                    let span = level_start..level_start + per_image;
                    tc.extend_from_slice(&t.classes[span.clone()]);
                    to.extend_from_slice(&t.offsets[span.start * 4..span.end * 4]);
                    pw.extend(t.classes[span].iter().map(|&c| if c > 0 { 1.0 } else { 0.0 }));
                }
                num_pos += pw.iter().filter(|&&w| w > 0.0).count();
                let ones = vec![1.0; tc.len()];
                terms.push(g.cross_entropy(cls_rows, tc, ones)?);
                terms.push(g.smooth_l1(box_rows, to, pw, cfg.smooth_l1_beta)?);
                level_start += per_image;
            }
            let mut loss = terms[0];
            for &t in &terms[1..] {
                loss = g.add(loss, t)?;
            }
            let loss = g.scale(loss, 1.0 / num_pos.max(1) as f64);
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Diverged(format!("training loss {value} at epoch {epoch}")));
            }
            g.backward(loss)?;

            let names: Vec<String> = hooks.vars.keys().cloned().collect();
            let mut grads = Vec::with_capacity(names.len() * 2);
            for n in &names {
                let (w, b) = hooks.vars[n];
                grads.push(g.grad(w).expect("param has grad"));
                grads.push(g.grad(b).expect("param has grad"));
            }
            let mut layers: BTreeMap<String, &mut ConvLayer> =
                model.conv_layers_mut().into_iter().map(|l| (l.name.clone(), l)).collect();
            let mut params: Vec<&mut Tensor> = Vec::with_capacity(grads.len());
            for l in layers.values_mut() {
                let l: &mut ConvLayer = l;
                params.push(&mut l.weight);
                params.push(&mut l.bias);
            }
            let grad_refs: Vec<&Tensor> = grads.iter().collect();
            opt.step(&mut params, &grad_refs)?;
            total += value;
            batches += 1;
            report.steps += 1;
        }
        let mean = total / batches as f64;
        log::debug!("epoch {epoch}: loss {mean:.4}");
        report.epoch_loss.push(mean);
    }
    for l in model.conv_layers_mut() {
        l.weight = l.weight.map(|v| v as f32 as f64);
        l.bias = l.bias.map(|v| v as f32 as f64);
    }
    Ok(report)
}
