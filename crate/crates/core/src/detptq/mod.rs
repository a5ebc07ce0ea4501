//! Block-wise post-training quantization driver with per-block Lp selection
//! through the output loss, in a grid-search (simple) or learned-rounding
//! (advanced) flavour, plus fixed-metric baselines.

mod blocks;
mod calibrate;

pub use blocks::{partition_blocks, BlockData, BlockSpec};
pub use calibrate::{
    optimize_act_scales, reconstruct_block, select_p, ActObjective, ActScales, CandidateRecord, OdolReference,
    Reconstruction, Selection,
};

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::odol::{select_positive_boxes, ODOLConfig};
use crate::quant::{Metric, RoundingSchedule, GRID_POINTS};
use crate::synthdata::{CalibrationSet, LabeledSet};
use crate::tensor::Tensor;
use crate::toydet::{evaluate_model, AttachedQuantizers, QuantizedModel, ToyDetector};

pub(crate) use blocks::unit_outputs;
pub(crate) use calibrate::suffix_outputs;
use calibrate::weight_quantizers;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Grid-searched scales, round-to-nearest weights.
    Simple,
    /// Adam-tuned activation scales with learned weight rounding.
    Advanced,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simple" => Ok(Mode::Simple),
            "advanced" => Ok(Mode::Advanced),
            _ => Err(Error::InvalidArgument(format!("unknown mode '{s}' (simple, advanced)"))),
        }
    }
}

/// How activation scales are chosen: per-block adaptive `p`, or a fixed
/// metric for every block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ScaleMethod {
    Adaptive,
    MinMax,
    Mse,
    Cosine,
    Lp(f64),
}

impl ScaleMethod {
    /// Fixed reconstruction exponent, if the method has one.
    fn fixed_p(self) -> Option<f64> {
        match self {
            ScaleMethod::Adaptive => None,
            ScaleMethod::Lp(p) => Some(p),
            ScaleMethod::MinMax | ScaleMethod::Mse | ScaleMethod::Cosine => Some(2.0),
        }
    }
}

impl fmt::Display for ScaleMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScaleMethod::Adaptive => write!(f, "adaptive"),
            ScaleMethod::MinMax => write!(f, "minmax"),
            ScaleMethod::Mse => write!(f, "mse"),
            ScaleMethod::Cosine => write!(f, "cosine"),
            ScaleMethod::Lp(p) => write!(f, "lp:{p}"),
        }
    }
}

impl FromStr for ScaleMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adaptive" => Ok(ScaleMethod::Adaptive),
            "minmax" => Ok(ScaleMethod::MinMax),
            "mse" => Ok(ScaleMethod::Mse),
            "cosine" => Ok(ScaleMethod::Cosine),
            _ => match s.strip_prefix("lp:").map(str::parse::<f64>) {
                Some(Ok(p)) if p >= 1.0 && p.is_finite() => Ok(ScaleMethod::Lp(p)),
                _ => Err(Error::InvalidArgument(format!(
                    "unknown metric '{s}' (adaptive, minmax, mse, cosine, lp:<p ≥ 1>)"
                ))),
            },
        }
    }
}

impl TryFrom<String> for ScaleMethod {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ScaleMethod> for String {
    fn from(m: ScaleMethod) -> String {
        m.to_string()
    }
}

pub fn default_pgrid() -> Vec<f64> {
    vec![1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 4.5]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetPtqConfig {
    pub weight_bits: u32,
    pub act_bits: u32,
    pub mode: Mode,
    pub metric: ScaleMethod,
    pub odol: ODOLConfig,
    pub pgrid: Vec<f64>,
    /// Adam iterations of the activation-scale search.
    pub select_iters: usize,
    /// Adam iterations of advanced reconstruction.
    pub recon_iters: usize,
    pub act_lr: f64,
    pub rounding_lr: f64,
    pub batch_size: usize,
    pub rounding: RoundingSchedule,
    /// Probability of keeping an activation element unquantized during
    /// advanced reconstruction.
    pub qdrop: Option<f64>,
    /// Bit width of the input layer's weights and activation.
    pub first_layer_bits: Option<u32>,
    /// Number of calibration images used for the output loss.
    pub odol_subset: Option<usize>,
    pub grid_points: usize,
    pub seed: u64,
}

impl Default for DetPtqConfig {
    fn default() -> Self {
        DetPtqConfig {
            weight_bits: 4,
            act_bits: 4,
            mode: Mode::Advanced,
            metric: ScaleMethod::Adaptive,
            odol: ODOLConfig::default(),
            pgrid: default_pgrid(),
            select_iters: 500,
            recon_iters: 1000,
            act_lr: 3e-4,
            rounding_lr: 3e-3,
            batch_size: 8,
            rounding: RoundingSchedule::default(),
            qdrop: Some(0.5),
            first_layer_bits: Some(8),
            odol_subset: None,
            grid_points: GRID_POINTS,
            seed: 0,
        }
    }
}

impl DetPtqConfig {
    pub fn validate(&self) -> Result<()> {
        for b in [self.weight_bits, self.act_bits].into_iter().chain(self.first_layer_bits) {
            if !(2..=16).contains(&b) {
                return Err(Error::InvalidArgument(format!("bit width {b} outside 2..=16")));
            }
        }
        if self.pgrid.is_empty() {
            return Err(Error::InvalidArgument("empty p grid".into()));
        }
        if self.pgrid.iter().any(|&p| !(p >= 1.0 && p.is_finite())) || self.pgrid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument(format!(
                "p grid must be strictly increasing values ≥ 1, got {:?}",
                self.pgrid
            )));
        }
        if let ScaleMethod::Lp(p) = self.metric {
            if !(p >= 1.0) {
                return Err(Error::InvalidArgument(format!("p must be ≥ 1, got {p}")));
            }
        }
        if let Some(q) = self.qdrop {
            if !(0.0..1.0).contains(&q) {
                return Err(Error::InvalidArgument(format!("qdrop probability {q} outside [0, 1)")));
            }
        }
        if self.batch_size == 0 || self.grid_points == 0 {
            return Err(Error::InvalidArgument("batch size and grid points must be positive".into()));
        }
        self.odol.validate()
    }

    fn bits_for(&self, block: &BlockSpec) -> (u32, u32) {
        match (block.source, self.first_layer_bits) {
            (None, Some(b)) => (b, b),
            _ => (self.weight_bits, self.act_bits),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockReport {
    pub block_id: String,
    pub layers: Vec<String>,
    pub weight_bits: u32,
    pub act_bits: u32,
    /// Selected exponent (adaptive runs only).
    pub p_star: Option<f64>,
    /// Exponent of the reconstruction objective.
    pub p: Option<f64>,
    pub candidates: Vec<CandidateRecord>,
    pub act_scales: BTreeMap<String, f64>,
    /// Block-output loss at Min-Max activation scales.
    pub initial_lp_loss: Option<f64>,
    pub final_lp_loss: Option<f64>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizationReport {
    pub tool_version: String,
    pub config: DetPtqConfig,
    pub seed: u64,
    pub calibration_images: usize,
    pub blocks: Vec<BlockReport>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub map_fp: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub map_q: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub perf_loss: Option<f64>,
    /// Best activation scale per probed layer from labeled sweeps.
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub ideal_scales: BTreeMap<String, f64>,
}

impl QuantizationReport {
    /// Fills in the labeled validation numbers.
    pub fn attach_validation(&mut self, map_fp: f64, map_q: f64) {
        self.map_fp = Some(map_fp);
        self.map_q = Some(map_q);
        self.perf_loss = Some(map_fp - map_q);
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// One row of the per-candidate trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub block_id: String,
    pub p: f64,
    pub odol: f64,
    pub cls_term: f64,
    pub loc_term: f64,
    pub final_lp_loss: f64,
    pub seconds: f64,
}

pub fn write_trace<W: Write>(out: W, rows: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::InvalidArgument(format!("csv: {e}")))?;
    }
    w.flush().map_err(|e| Error::InvalidArgument(format!("csv: {e}")))?;
    Ok(())
}

/// Everything produced by one quantization run.
#[derive(Debug, Clone)]
pub struct QuantizationRun {
    pub model: QuantizedModel,
    pub report: QuantizationReport,
    pub trace: Vec<TraceRow>,
    pub seconds: f64,
}

/// Quantizes `model` block by block using only unlabeled calibration images.
///
/// FP outputs of every block are cached once. Each block is then calibrated
/// on the output of the already-quantized prefix: in adaptive runs `p` is
/// chosen by the output loss of the partially quantized network, after
/// which the block is reconstructed with that `p` and its quantized output
/// becomes the next block's input.
pub fn quantize_network(model: &ToyDetector, calib: &CalibrationSet, cfg: &DetPtqConfig) -> Result<QuantizationRun> {
    quantize_with_cache(model, calib, cfg).map(|(run, _)| run)
}

/// [`quantize_network`] that also returns the quantized output of every
/// unit as it was cached during calibration.
fn quantize_with_cache(
    model: &ToyDetector,
    calib: &CalibrationSet,
    cfg: &DetPtqConfig,
) -> Result<(QuantizationRun, Vec<Vec<Tensor>>)> {
    cfg.validate()?;
    if calib.is_empty() {
        return Err(Error::Empty("calibration set".into()));
    }
    let t0 = Instant::now();
    let blocks = partition_blocks(model)?;
    let images = &calib.images;
    let n_units = model.units.len();

    let mut fp_units: Vec<Vec<Tensor>> = Vec::with_capacity(n_units);
    for b in &blocks {
        let input = match b.source {
            None => images,
            Some(s) => &fp_units[s],
        };
        let out = unit_outputs(model, b.unit, input, &AttachedQuantizers::default())?;
        fp_units.push(out);
    }

    let reference = if cfg.metric == ScaleMethod::Adaptive {
        let count = cfg.odol_subset.unwrap_or(images.len()).clamp(1, images.len());
        let subset: Vec<usize> = (0..count).collect();
        let fp_outputs = suffix_outputs(model, &AttachedQuantizers::default(), images, &fp_units, n_units, &subset)?;
        let positives = fp_outputs.iter().map(|o| select_positive_boxes(o, &cfg.odol)).collect();
        Some(OdolReference {
            images: subset,
            fp_outputs,
            positives,
        })
    } else {
        None
    };

    let mut qm = QuantizedModel::fp(model.clone());
    let mut q_units: Vec<Vec<Tensor>> = Vec::with_capacity(n_units);
    let mut reports = Vec::with_capacity(blocks.len());
    let mut trace = Vec::new();

    for b in &blocks {
        let (wbits, abits) = cfg.bits_for(b);
        let data = BlockData {
            inputs: b.source.map_or_else(|| images.clone(), |s| q_units[s].clone()),
            fp_inputs: b.source.map_or_else(|| images.clone(), |s| fp_units[s].clone()),
            targets: fp_units[b.unit].clone(),
        };
        let mut warnings = Vec::new();
        let mut candidates = Vec::new();
        let mut selected = None;
        let p = match (cfg.metric, &reference) {
            (ScaleMethod::Adaptive, Some(r)) => {
                let sel = select_p(&qm.model, b, &data, &qm.quant, abits, images, &q_units, r, cfg)?;
                warnings.extend(sel.scales.warnings.iter().cloned());
                candidates = sel.candidates.clone();
                let p = sel.p_star;
                selected = Some(sel);
                p
            }
            (m, _) => m.fixed_p().expect("fixed metric"),
        };

        let search_weights = cfg.metric != ScaleMethod::MinMax;
        let wq = weight_quantizers(&qm.model, b, wbits, search_weights, cfg)?;
        let mut base = qm.quant.clone();
        base.weights.extend(wq.iter().map(|(k, v)| (k.clone(), v.clone())));

        let (acts, rounded, initial, final_loss) = match cfg.mode {
            Mode::Simple => {
                let objective = match cfg.metric {
                    ScaleMethod::MinMax => ActObjective::MinMax,
                    ScaleMethod::Cosine => ActObjective::Grid(Metric::Cosine),
                    _ => ActObjective::Grid(Metric::Lp(p)),
                };
                let s = optimize_act_scales(&qm.model, b, &data, &base, abits, objective, cfg)?;
                warnings.extend(s.warnings);
                (s.quantizers, BTreeMap::new(), None, None)
            }
            Mode::Advanced => {
                let init = match (selected.take(), cfg.metric) {
                    (Some(sel), _) => sel.scales.quantizers,
                    (None, ScaleMethod::MinMax) => {
                        optimize_act_scales(&qm.model, b, &data, &qm.quant, abits, ActObjective::MinMax, cfg)?.quantizers
                    }
                    (None, ScaleMethod::Cosine) => {
                        optimize_act_scales(&qm.model, b, &data, &qm.quant, abits, ActObjective::Grid(Metric::Cosine), cfg)?
                            .quantizers
                    }
                    (None, _) => {
                        let s = optimize_act_scales(&qm.model, b, &data, &qm.quant, abits, ActObjective::Adam { p }, cfg)?;
                        warnings.extend(s.warnings);
                        s.quantizers
                    }
                };
                let r = reconstruct_block(&qm.model, b, &data, &base, &init, p, cfg)?;
                (r.acts, r.rounded_weights, Some(r.initial_loss), Some(r.final_loss))
            }
        };

        for l in qm.model.conv_layers_mut() {
            if let Some(w) = rounded.get(&l.name) {
                l.weight = w.clone();
            }
        }
        qm.quant.weights.extend(wq);
        let act_scales = acts.iter().map(|(k, q)| (k.clone(), q.scale[0])).collect();
        qm.quant.acts.extend(acts);
        let out = unit_outputs(&qm.model, b.unit, &data.inputs, &qm.quant)?;
        q_units.push(out);

        for c in &candidates {
            trace.push(TraceRow {
                block_id: b.name.clone(),
                p: c.p,
                odol: c.odol,
                cls_term: c.cls_term,
                loc_term: c.loc_term,
                final_lp_loss: c.lp_loss,
                seconds: c.seconds,
            });
        }
        log::info!("block {} done (p = {p})", b.name);
        reports.push(BlockReport {
            block_id: b.name.clone(),
            layers: b.layers.clone(),
            weight_bits: wbits,
            act_bits: abits,
            p_star: (cfg.metric == ScaleMethod::Adaptive).then_some(p),
            p: (cfg.metric != ScaleMethod::MinMax && cfg.metric != ScaleMethod::Cosine || cfg.mode == Mode::Advanced)
                .then_some(p),
            candidates,
            act_scales,
            initial_lp_loss: initial,
            final_lp_loss: final_loss,
            warnings,
        });
    }

    let report = QuantizationReport {
        tool_version: crate::VERSION.to_string(),
        config: cfg.clone(),
        seed: cfg.seed,
        calibration_images: images.len(),
        blocks: reports,
        map_fp: None,
        map_q: None,
        perf_loss: None,
        ideal_scales: BTreeMap::new(),
    };
    let run = QuantizationRun {
        model: qm,
        report,
        trace,
        seconds: t0.elapsed().as_secs_f64(),
    };
    Ok((run, q_units))
}

/// Fixed-metric pipeline: identical to [`quantize_network`] with `p`
/// selection disabled.
pub fn baseline_quantize(
    model: &ToyDetector,
    calib: &CalibrationSet,
    metric: ScaleMethod,
    mode: Mode,
    cfg: &DetPtqConfig,
) -> Result<QuantizationRun> {
    if metric == ScaleMethod::Adaptive {
        return Err(Error::InvalidArgument("baseline needs a fixed metric".into()));
    }
    let cfg = DetPtqConfig {
        metric,
        mode,
        ..cfg.clone()
    };
    quantize_network(model, calib, &cfg)
}

/// `mAP^fp − mAP^q` at IoU 0.5 on a labeled validation set.
pub fn performance_loss(fp: &ToyDetector, quantized: &QuantizedModel, val: &LabeledSet) -> Result<f64> {
    if val.is_empty() {
        return Err(Error::Empty("validation set".into()));
    }
    let map_fp = evaluate_model(&QuantizedModel::fp(fp.clone()), &val.images, &val.groundtruth)?;
    let map_q = evaluate_model(quantized, &val.images, &val.groundtruth)?;
    Ok(map_fp - map_q)
}
