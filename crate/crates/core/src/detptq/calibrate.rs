//! Per-block calibration: activation scale search, Lp selection through the
//! output loss, and block reconstruction.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::blocks::{block_loss, capture_point, stack, BlockData, BlockSpec, OptHooks, EVAL_CHUNK};
use super::{DetPtqConfig, Mode};
use crate::error::{Error, Result};
use crate::odol::{odol_batch, OdolValue, PositiveSet, ODOLConfig};
use crate::quant::{grid_search_local, AffineQuantizer, Granularity, Metric, RoundingVars, SCALE_EPS};
use crate::tensor::{Adam, AdamConfig, Graph, Tensor, Var};
use crate::toydet::{AttachedQuantizers, DetectionOutput, QuantHooks, ToyDetector};

/// How activation scales of a block are chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ActObjective {
    /// Observed range, no search.
    MinMax,
    /// Sequential per-point grid search of the local metric.
    Grid(Metric),
    /// Adam on the block-output Lp loss from Min-Max initialization.
    Adam { p: f64 },
}

/// Activation quantizers chosen for one block.
#[derive(Debug, Clone, PartialEq)]
pub struct ActScales {
    pub quantizers: BTreeMap<String, AffineQuantizer>,
    pub warnings: Vec<String>,
}

fn with_acts(base: &AttachedQuantizers, acts: &BTreeMap<String, AffineQuantizer>) -> AttachedQuantizers {
    let mut q = base.clone();
    q.acts.extend(acts.iter().map(|(k, v)| (k.clone(), v.clone())));
    q
}

fn stream_seed(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Distinct RNG stream per (block, p, phase) so that equal settings reuse
/// identical minibatches.
fn rng_for(cfg: &DetPtqConfig, block: &BlockSpec, p: f64, phase: u64) -> ChaCha8Rng {
    let p_key = (p * 1000.0).round() as u64;
    stream_seed(cfg.seed, (block.unit as u64) << 40 | p_key << 8 | phase)
}

/// Chooses activation scales for every point of `block`. Weights are taken
/// from `base` (full precision unless attached there).
pub fn optimize_act_scales(
    model: &ToyDetector,
    block: &BlockSpec,
    data: &BlockData,
    base: &AttachedQuantizers,
    act_bits: u32,
    objective: ActObjective,
    cfg: &DetPtqConfig,
) -> Result<ActScales> {
    if data.is_empty() {
        return Err(Error::Empty("calibration inputs".into()));
    }
    let mut acts = BTreeMap::new();
    let mut mins = BTreeMap::new();
    for point in &block.act_points {
        let x = capture_point(model, block, &data.inputs, &with_acts(base, &acts), point)?;
        let init = AffineQuantizer::init_minmax(&x, act_bits, false, Granularity::PerTensor)?;
        let q = match objective {
            ActObjective::Grid(metric) => grid_search_local(&x, &init, metric, cfg.grid_points).0,
            ActObjective::MinMax | ActObjective::Adam { .. } => init,
        };
        mins.insert(point.clone(), x.min());
        acts.insert(point.clone(), q);
    }
    let ActObjective::Adam { p } = objective else {
        return Ok(ActScales {
            quantizers: acts,
            warnings: Vec::new(),
        });
    };
    let mut rng = rng_for(cfg, block, p, 0);
    let run = adam_act_scales(model, block, data, base, &acts, &mins, p, cfg, &mut rng);
    let fallback = |why: String| -> Result<ActScales> {
        let grid = optimize_act_scales(model, block, data, base, act_bits, ActObjective::Grid(Metric::Lp(p)), cfg)?;
        let warning = format!("{}: scale optimization for p={p} {why}; using grid search", block.name);
        log::warn!("{warning}");
        Ok(ActScales {
            quantizers: grid.quantizers,
            warnings: vec![warning],
        })
    };
    match run {
        Ok(tuned) => {
            let init_loss = block_loss(model, block, data, &with_acts(base, &acts), p)?;
            let tuned_loss = block_loss(model, block, data, &with_acts(base, &tuned), p)?;
            if !tuned_loss.is_finite() {
                return fallback(format!("ended at non-finite loss {tuned_loss}"));
            }
            Ok(ActScales {
                quantizers: if tuned_loss <= init_loss { tuned } else { acts },
                warnings: Vec::new(),
            })
        }
        Err(Error::Diverged(msg)) => fallback(msg),
        Err(e) => Err(e),
    }
}

#[allow(clippy::too_many_arguments)]
fn adam_act_scales(
    model: &ToyDetector,
    block: &BlockSpec,
    data: &BlockData,
    base: &AttachedQuantizers,
    init: &BTreeMap<String, AffineQuantizer>,
    mins: &BTreeMap<String, f64>,
    p: f64,
    cfg: &DetPtqConfig,
    rng: &mut ChaCha8Rng,
) -> Result<BTreeMap<String, AffineQuantizer>> {
    let mut acts = init.clone();
    let mut scales: Vec<Tensor> = acts
        .values()
        .map(|q| Tensor::from_vec(q.scale.clone()).expect("finite scale"))
        .collect();
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.act_lr));
    let batch = cfg.batch_size.min(data.len()).max(1);
    for it in 0..cfg.select_iters {
        let idx = sample(rng, data.len(), batch).into_vec();
        let mut g = Graph::new();
        let x = g.constant(stack(&data.inputs, &idx)?);
        let target = g.constant(stack(&data.targets, &idx)?);
        let vars: Vec<Var> = scales.iter().map(|s| g.param(s.clone())).collect();
        let mut hooks = OptHooks {
            quant: base,
            weights: BTreeMap::new(),
            acts: acts.iter().zip(&vars).map(|((k, q), &v)| (k.clone(), (v, q))).collect(),
            drop: None,
        };
        let y = model.unit_forward(&mut g, block.unit, x, &mut hooks)?;
        let loss = g.lp_sum(y, target, p)?;
        let loss = g.scale(loss, 1.0 / batch as f64);
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Diverged(format!("loss {value} at iteration {it}")));
        }
        g.backward(loss)?;
        let grads: Vec<Tensor> = vars.iter().map(|&v| g.grad(v).expect("scale is a parameter")).collect();
        let mut params: Vec<&mut Tensor> = scales.iter_mut().collect();
        opt.step(&mut params, &grads.iter().collect::<Vec<_>>())?;
        for ((name, q), s) in acts.iter_mut().zip(&mut scales) {
            let v = s.data()[0].max(SCALE_EPS);
            s.data_mut()[0] = v;
            q.set_scale(0, v, mins[name]);
        }
    }
    Ok(acts)
}

/// Per-image FP reference used to score candidates with the output loss.
#[derive(Debug, Clone)]
pub struct OdolReference {
    /// Calibration image indices the output loss is evaluated on.
    pub images: Vec<usize>,
    pub fp_outputs: Vec<DetectionOutput>,
    pub positives: Vec<PositiveSet>,
}

/// Outputs of the detector on `images` when units before `start` are taken
/// from `prefix` (per unit, per calibration image).
pub(crate) fn suffix_outputs(
    model: &ToyDetector,
    quant: &AttachedQuantizers,
    images: &[Tensor],
    prefix: &[Vec<Tensor>],
    start: usize,
    subset: &[usize],
) -> Result<Vec<DetectionOutput>> {
    let mut outs = Vec::with_capacity(subset.len());
    for chunk in subset.chunks(EVAL_CHUNK) {
        let mut g = Graph::new();
        let img = g.constant(stack(images, chunk)?);
        let mut known = Vec::with_capacity(start);
        for cache in &prefix[..start] {
            known.push(Some(g.constant(stack(cache, chunk)?)));
        }
        let mut hooks = QuantHooks { quant };
        let units = model.forward_units(&mut g, img, known, start, &mut hooks)?;
        let feats: Vec<Var> = model.head.features.iter().map(|&f| units[f]).collect();
        let head = model.head_forward(&mut g, &feats, &mut hooks)?;
        outs.extend(model.detection_outputs(&g, &head)?);
    }
    Ok(outs)
}

/// Output-loss score of one candidate `p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub p: f64,
    pub odol: f64,
    pub cls_term: f64,
    pub loc_term: f64,
    /// Block-output `Σ|O − O^q|^p` per image at the chosen scales.
    pub lp_loss: f64,
    #[serde(skip)]
    pub seconds: f64,
}

/// Result of choosing `p` for one block.
#[derive(Debug, Clone)]
pub struct Selection {
    pub p_star: f64,
    pub candidates: Vec<CandidateRecord>,
    /// Activation scales found for `p_star`.
    pub scales: ActScales,
}

/// Scores every `p` of the grid: activation scales are optimized with the
/// block's weights left full precision, the partially quantized network is
/// run to the head, and the output loss against the FP pass is recorded.
/// The smallest loss wins; ties go to the smaller `p`.
#[allow(clippy::too_many_arguments)]
pub fn select_p(
    model: &ToyDetector,
    block: &BlockSpec,
    data: &BlockData,
    base: &AttachedQuantizers,
    act_bits: u32,
    images: &[Tensor],
    prefix: &[Vec<Tensor>],
    reference: &OdolReference,
    cfg: &DetPtqConfig,
) -> Result<Selection> {
    let odol_cfg: &ODOLConfig = &cfg.odol;
    let mut candidates = Vec::with_capacity(cfg.pgrid.len());
    let mut found: Vec<ActScales> = Vec::with_capacity(cfg.pgrid.len());
    for &p in &cfg.pgrid {
        let t0 = Instant::now();
        let objective = match cfg.mode {
            Mode::Simple => ActObjective::Grid(Metric::Lp(p)),
            Mode::Advanced => ActObjective::Adam { p },
        };
        let scales = optimize_act_scales(model, block, data, base, act_bits, objective, cfg)?;
        let quant = with_acts(base, &scales.quantizers);
        let lp_loss = block_loss(model, block, data, &quant, p)?;
        let outs = suffix_outputs(model, &quant, images, prefix, block.unit, &reference.images)?;
        let v: OdolValue = odol_batch(&reference.fp_outputs, &outs, &reference.positives, odol_cfg)?;
        candidates.push(CandidateRecord {
            p,
            odol: v.odol,
            cls_term: v.cls_term,
            loc_term: v.loc_term,
            lp_loss,
            seconds: t0.elapsed().as_secs_f64(),
        });
        found.push(scales);
    }
    let mut best: Option<usize> = None;
    for (i, c) in candidates.iter().enumerate() {
        if !c.odol.is_finite() {
            continue;
        }
        match best {
            Some(b) if c.odol >= candidates[b].odol - 1e-12 => {}
            _ => best = Some(i),
        }
    }
    let Some(best) = best else {
        let diag: Vec<String> = candidates.iter().map(|c| format!("p={}: {}", c.p, c.odol)).collect();
        return Err(Error::Diverged(format!(
            "{}: no finite output loss ({})",
            block.name,
            diag.join(", ")
        )));
    };
    Ok(Selection {
        p_star: candidates[best].p,
        candidates,
        scales: found.swap_remove(best),
    })
}

/// Per-channel symmetric weight quantizers for the block's layers.
pub(crate) fn weight_quantizers(
    model: &ToyDetector,
    block: &BlockSpec,
    bits: u32,
    search: bool,
    cfg: &DetPtqConfig,
) -> Result<BTreeMap<String, AffineQuantizer>> {
    let mut out = BTreeMap::new();
    for name in &block.layers {
        let layer = model.layer(name).ok_or_else(|| Error::UnknownLayer(name.clone()))?;
        let init = AffineQuantizer::init_symmetric(&layer.weight, bits, Granularity::PerChannel)?;
        let q = if search {
            grid_search_local(&layer.weight, &init, Metric::Lp(2.0), cfg.grid_points).0
        } else {
            init
        };
        out.insert(name.clone(), q);
    }
    Ok(out)
}

/// Outcome of reconstructing one block.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub acts: BTreeMap<String, AffineQuantizer>,
    /// Weights after learned rounding (advanced mode only), already on the
    /// quantization grid.
    pub rounded_weights: BTreeMap<String, Tensor>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub iterations: usize,
}

/// Advanced reconstruction: activation scales and rounding variables of the
/// block are optimized jointly on `Σ|O − O^q|^p` plus the annealed rounding
/// regularizer. `base` must already carry the block's weight quantizers.
pub fn reconstruct_block(
    model: &ToyDetector,
    block: &BlockSpec,
    data: &BlockData,
    base: &AttachedQuantizers,
    init: &BTreeMap<String, AffineQuantizer>,
    p: f64,
    cfg: &DetPtqConfig,
) -> Result<Reconstruction> {
    let minmax = optimize_act_scales(model, block, data, base, act_bits_of(init), ActObjective::MinMax, cfg)?;
    let initial_loss = block_loss(model, block, data, &with_acts(base, &minmax.quantizers), p)?;
    let start_loss = block_loss(model, block, data, &with_acts(base, init), p)?;

    let mut acts = init.clone();
    let mut mins = BTreeMap::new();
    for point in &block.act_points {
        let x = capture_point(model, block, &data.inputs, &with_acts(base, &minmax.quantizers), point)?;
        mins.insert(point.clone(), x.min());
    }
    let mut layers = Vec::new();
    for name in &block.layers {
        let layer = model.layer(name).ok_or_else(|| Error::UnknownLayer(name.clone()))?;
        let q = base
            .weights
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("{name} has no weight quantizer")))?;
        layers.push((layer, q, RoundingVars::init(&layer.weight, q)));
    }
    let mut scales: Vec<Tensor> = acts
        .values()
        .map(|q| Tensor::from_vec(q.scale.clone()).expect("finite scale"))
        .collect();
    let mut opt_s = Adam::new(AdamConfig::with_lr(cfg.act_lr));
    let mut opt_v = Adam::new(AdamConfig::with_lr(cfg.rounding_lr));
    let mut rng = rng_for(cfg, block, p, 1);
    let mut drop_rng = rng_for(cfg, block, p, 2);
    let batch = cfg.batch_size.min(data.len()).max(1);
    let iters = cfg.recon_iters;
    for it in 0..iters {
        let progress = it as f64 / iters as f64;
        let idx = sample(&mut rng, data.len(), batch).into_vec();
        let mut g = Graph::new();
        let x = g.constant(stack(&data.inputs, &idx)?);
        let target = g.constant(stack(&data.targets, &idx)?);
        let svars: Vec<Var> = scales.iter().map(|s| g.param(s.clone())).collect();
        let mut vvars = Vec::with_capacity(layers.len());
        let mut weights = BTreeMap::new();
        for (layer, q, r) in &layers {
            let v = g.param(r.v.clone());
            weights.insert(layer.name.clone(), r.apply(&mut g, v, &layer.weight, q)?);
            vvars.push(v);
        }
        let mut hooks = OptHooks {
            quant: base,
            weights,
            acts: acts.iter().zip(&svars).map(|((k, q), &v)| (k.clone(), (v, q))).collect(),
            drop: cfg.qdrop.map(|prob| (prob, &mut drop_rng)),
        };
        let y = model.unit_forward(&mut g, block.unit, x, &mut hooks)?;
        let rec = g.lp_sum(y, target, p)?;
        let mut loss = g.scale(rec, 1.0 / batch as f64);
        let weight = cfg.rounding.weight(progress)?;
        if weight > 0.0 {
            let beta = cfg.rounding.beta(progress)?;
            for &v in &vvars {
                let r = g.rounding_reg(v, beta);
                let r = g.scale(r, weight);
                loss = g.add(loss, r)?;
            }
        }
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Diverged(format!(
                "{}: reconstruction loss {value} at iteration {it} (p={p})",
                block.name
            )));
        }
        g.backward(loss)?;
        let sg: Vec<Tensor> = svars.iter().map(|&v| g.grad(v).expect("param")).collect();
        let vg: Vec<Tensor> = vvars.iter().map(|&v| g.grad(v).expect("param")).collect();
        let mut sp: Vec<&mut Tensor> = scales.iter_mut().collect();
        opt_s.step(&mut sp, &sg.iter().collect::<Vec<_>>())?;
        let mut vp: Vec<&mut Tensor> = layers.iter_mut().map(|(_, _, r)| &mut r.v).collect();
        opt_v.step(&mut vp, &vg.iter().collect::<Vec<_>>())?;
        for ((name, q), s) in acts.iter_mut().zip(&mut scales) {
            let v = s.data()[0].max(SCALE_EPS);
            s.data_mut()[0] = v;
            q.set_scale(0, v, mins[name]);
        }
    }

    let mut rounded = BTreeMap::new();
    for (layer, q, r) in &mut layers {
        r.freeze();
        rounded.insert(layer.name.clone(), r.quantized_weight(&layer.weight, q));
    }
    let mut tuned_model = model.clone();
    for l in tuned_model.conv_layers_mut() {
        if let Some(w) = rounded.get(&l.name) {
            l.weight = w.clone();
        }
    }
    let tuned_loss = block_loss(&tuned_model, block, data, &with_acts(base, &acts), p)?;
    if !tuned_loss.is_finite() {
        return Err(Error::Diverged(format!("{}: final loss {tuned_loss}", block.name)));
    }
    // keep whichever state scores best on the whole calibration set
    let mut best = (tuned_loss, acts, rounded);
    if start_loss < best.0 {
        best = (start_loss, init.clone(), BTreeMap::new());
    }
    if initial_loss < best.0 {
        best = (initial_loss, minmax.quantizers, BTreeMap::new());
    }
    Ok(Reconstruction {
        acts: best.1,
        rounded_weights: best.2,
        initial_loss,
        final_loss: best.0,
        iterations: iters,
    })
}

fn act_bits_of(acts: &BTreeMap<String, AffineQuantizer>) -> u32 {
    acts.values().next().map_or(8, |q| q.bits)
}
