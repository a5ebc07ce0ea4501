//! Single-layer activation quantization studies: which metric picks the
//! best scale for a layer, and how reconstruction losses, the output loss
//! and the labeled performance loss vary along a scale sweep.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::detptq::{suffix_outputs, unit_outputs};
use crate::error::{Error, Result};
use crate::odol::{odol_batch, select_positive_boxes, ClsFn, LocFn, ODOLConfig};
use crate::quant::{argmin_prefer_last, grid_search_local, lp_sum_slices, scale_candidates, AffineQuantizer, Granularity, Metric};
use crate::synthdata::{CalibrationSet, LabeledSet};
use crate::tensor::{Graph, Tensor, Var};
use crate::toydet::{
    evaluate_map, postprocess, AttachedQuantizers, Detection, DetectionOutput, LayerHooks, PostprocessConfig,
    ToyDetector,
};

/// Scale-selection rule compared by [`probe_layer`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ProbeMetric {
    MinMax,
    Lp(f64),
}

impl fmt::Display for ProbeMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProbeMetric::MinMax => write!(f, "minmax"),
            ProbeMetric::Lp(p) => write!(f, "l{p}"),
        }
    }
}

impl FromStr for ProbeMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        if lower == "minmax" {
            return Ok(ProbeMetric::MinMax);
        }
        let num = lower.strip_prefix("lp:").or_else(|| lower.strip_prefix('l'));
        match num.map(str::parse::<f64>) {
            Some(Ok(p)) if p >= 1.0 && p.is_finite() => Ok(ProbeMetric::Lp(p)),
            _ => Err(Error::InvalidArgument(format!("unknown probe metric '{s}' (minmax, l1, l2.5, lp:3, ...)"))),
        }
    }
}

impl TryFrom<String> for ProbeMetric {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ProbeMetric> for String {
    fn from(m: ProbeMetric) -> String {
        m.to_string()
    }
}

pub fn default_probe_metrics() -> Vec<ProbeMetric> {
    vec![
        ProbeMetric::MinMax,
        ProbeMetric::Lp(1.0),
        ProbeMetric::Lp(2.0),
        ProbeMetric::Lp(3.0),
        ProbeMetric::Lp(4.0),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub layer: String,
    pub metric: String,
    pub s: f64,
    pub perf_loss: f64,
}

/// Captures the values reaching one activation point.
struct Capture<'a> {
    point: &'a str,
    values: Vec<f64>,
}

impl LayerHooks for Capture<'_> {
    fn activation(&mut self, g: &mut Graph, point: &str, x: Var) -> Result<Var> {
        if point == self.point {
            self.values.extend_from_slice(g.value(x).data());
        }
        Ok(x)
    }
}

/// Unit outputs of the FP network for every image, plus the FP values at
/// `point` concatenated over images.
struct LayerContext {
    unit: usize,
    units: Vec<Vec<Tensor>>,
    activation: Tensor,
}

fn layer_context(model: &ToyDetector, images: &[Tensor], point: &str) -> Result<LayerContext> {
    let unit = model
        .unit_of_act(point)
        .ok_or_else(|| Error::UnknownLayer(format!("{point} (known: {})", model.act_points().join(", "))))?;
    let none = AttachedQuantizers::default();
    let mut units: Vec<Vec<Tensor>> = Vec::with_capacity(model.units.len());
    for (i, u) in model.units.iter().enumerate() {
        let input = match u.source {
            None => images,
            Some(s) => &units[s],
        };
        units.push(unit_outputs(model, i, input, &none)?);
    }
    let input = match model.units[unit].source {
        None => images,
        Some(s) => &units[s],
    };
    let mut cap = Capture {
        point,
        values: Vec::new(),
    };
    for chunk in input.chunks(16) {
        let refs: Vec<&Tensor> = chunk.iter().collect();
        let mut g = Graph::new();
        let x = g.constant(crate::toydet::stack_images(&refs)?);
        model.unit_forward(&mut g, unit, x, &mut cap)?;
    }
    Ok(LayerContext {
        unit,
        units,
        activation: Tensor::from_vec(cap.values)?,
    })
}

fn only(point: &str, q: AffineQuantizer) -> AttachedQuantizers {
    let mut a = AttachedQuantizers::default();
    a.acts.insert(point.to_string(), q);
    a
}

fn outputs_with(
    model: &ToyDetector,
    ctx: &LayerContext,
    images: &[Tensor],
    quant: &AttachedQuantizers,
) -> Result<Vec<DetectionOutput>> {
    let all: Vec<usize> = (0..images.len()).collect();
    suffix_outputs(model, quant, images, &ctx.units, ctx.unit, &all)
}

fn map_of(model: &ToyDetector, outs: &[DetectionOutput], val: &LabeledSet) -> Result<f64> {
    let pp = PostprocessConfig::default();
    let dets: Vec<Vec<Detection>> = outs.iter().map(|o| postprocess(o, &pp)).collect();
    Ok(evaluate_map(&dets, &val.groundtruth, &[0.5], model.config.num_classes)?.map)
}

/// Quantizes only the activation at `point` with the scale each metric
/// picks on the calibration images and reports the resulting performance
/// loss on `val`.
pub fn probe_layer(
    model: &ToyDetector,
    calib: &CalibrationSet,
    val: &LabeledSet,
    point: &str,
    bits: u32,
    metrics: &[ProbeMetric],
    grid_points: usize,
) -> Result<Vec<ProbeRow>> {
    if val.is_empty() || calib.is_empty() {
        return Err(Error::Empty("probe data".into()));
    }
    let cal = layer_context(model, &calib.images, point)?;
    let vctx = layer_context(model, &val.images, point)?;
    let fp_outs = outputs_with(model, &vctx, &val.images, &AttachedQuantizers::default())?;
    let map_fp = map_of(model, &fp_outs, val)?;
    let init = AffineQuantizer::init_minmax(&cal.activation, bits, false, Granularity::PerTensor)?;
    let mut rows = Vec::with_capacity(metrics.len());
    for &m in metrics {
        let q = match m {
            ProbeMetric::MinMax => init.clone(),
            ProbeMetric::Lp(p) => grid_search_local(&cal.activation, &init, Metric::Lp(p), grid_points).0,
        };
        let s = q.scale[0];
        let outs = outputs_with(model, &vctx, &val.images, &only(point, q))?;
        rows.push(ProbeRow {
            layer: point.to_string(),
            metric: m.to_string(),
            s,
            perf_loss: map_fp - map_of(model, &outs, val)?,
        });
    }
    Ok(rows)
}

/// Writes probe rows as `layer,metric,s,perf_loss`.
pub fn write_probe_csv<W: std::io::Write>(out: W, rows: &[ProbeRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::InvalidArgument(format!("csv: {e}")))?;
    }
    w.flush().map_err(|e| Error::InvalidArgument(format!("csv: {e}")))?;
    Ok(())
}

/// Label of each output-loss variant in sweep order.
pub const ODOL_VARIANTS: [(ClsFn, LocFn); 4] = [
    (ClsFn::Kl, LocFn::L1),
    (ClsFn::Mse, LocFn::L1),
    (ClsFn::Kl, LocFn::Iou),
    (ClsFn::Mse, LocFn::Iou),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    /// `s / s_max`.
    pub ratio: f64,
    pub s: f64,
    /// Local `Σ|x − x^q|^p` per grid exponent.
    pub lp: Vec<f64>,
    /// Output loss per [`ODOL_VARIANTS`] entry.
    pub odol: Vec<f64>,
    pub perf_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleSweep {
    pub layer: String,
    pub bits: u32,
    pub s_max: f64,
    pub pgrid: Vec<f64>,
    pub points: Vec<SweepPoint>,
}

fn argmin_column(points: &[SweepPoint], f: impl Fn(&SweepPoint) -> f64) -> usize {
    argmin_prefer_last(&points.iter().map(f).collect::<Vec<_>>())
}

impl ScaleSweep {
    /// Index minimizing the performance loss.
    pub fn ideal_index(&self) -> usize {
        argmin_column(&self.points, |p| p.perf_loss)
    }

    /// Index minimizing output-loss variant `v`.
    pub fn odol_index(&self, v: usize) -> usize {
        argmin_column(&self.points, |p| p.odol[v])
    }

    /// Index minimizing the local loss of grid exponent `p`.
    pub fn lp_index(&self, p: f64) -> Option<usize> {
        let k = self.pgrid.iter().position(|&x| x == p)?;
        Some(argmin_column(&self.points, |pt| pt.lp[k]))
    }

    /// CSV with raw columns followed by the same columns divided by their
    /// largest absolute value over the sweep.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut names = vec!["s_ratio".to_string(), "s".to_string()];
        let lp_names: Vec<String> = self.pgrid.iter().map(|p| format!("lp_{p}")).collect();
        let odol_names: Vec<String> = ODOL_VARIANTS
            .iter()
            .map(|&(c, l)| format!("odol_{}", ODOLConfig::new(c, l).label().replace('+', "_")))
            .collect();
        let mut value_names = lp_names;
        value_names.extend(odol_names);
        value_names.push("perf_loss".into());
        names.extend(value_names.iter().cloned());
        names.extend(value_names.iter().map(|n| format!("norm_{n}")));
        let csv_err = |e: csv::Error| Error::InvalidArgument(format!("csv: {e}"));
        w.write_record(&names).map_err(csv_err)?;

        let rows: Vec<Vec<f64>> = self
            .points
            .iter()
            .map(|p| {
                let mut r = p.lp.clone();
                r.extend(&p.odol);
                r.push(p.perf_loss);
                r
            })
            .collect();
        let width = value_names.len();
        let peak: Vec<f64> = (0..width)
            .map(|c| rows.iter().map(|r| r[c].abs()).fold(0.0, f64::max))
            .collect();
        for (p, r) in self.points.iter().zip(&rows) {
            let mut rec = vec![p.ratio.to_string(), p.s.to_string()];
            rec.extend(r.iter().map(|v| v.to_string()));
            rec.extend(r.iter().zip(&peak).map(|(v, m)| if *m > 0.0 { v / m } else { 0.0 }.to_string()));
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::InvalidArgument(format!("csv: {e}")))?;
        Ok(())
    }
}

/// Sweeps the activation scale of `point` from `0.01·s_max` to `s_max`
/// (`s_max` from Min-Max on the calibration images). Output losses use the
/// calibration images only; `val` is used for the performance-loss column.
#[allow(clippy::too_many_arguments)]
pub fn scale_sweep(
    model: &ToyDetector,
    calib: &CalibrationSet,
    val: &LabeledSet,
    point: &str,
    bits: u32,
    points: usize,
    pgrid: &[f64],
    odol_base: &ODOLConfig,
) -> Result<ScaleSweep> {
    if val.is_empty() || calib.is_empty() {
        return Err(Error::Empty("sweep data".into()));
    }
    let cal = layer_context(model, &calib.images, point)?;
    let vctx = layer_context(model, &val.images, point)?;
    let cal_fp = outputs_with(model, &cal, &calib.images, &AttachedQuantizers::default())?;
    let val_fp = outputs_with(model, &vctx, &val.images, &AttachedQuantizers::default())?;
    let map_fp = map_of(model, &val_fp, val)?;
    let variants: Vec<ODOLConfig> = ODOL_VARIANTS
        .iter()
        .map(|&(c, l)| ODOLConfig {
            cls_fn: c,
            loc_fn: l,
            alpha: l.default_alpha(),
            ..odol_base.clone()
        })
        .collect();
    let positives: Vec<_> = cal_fp.iter().map(|o| select_positive_boxes(o, odol_base)).collect();

    let init = AffineQuantizer::init_minmax(&cal.activation, bits, false, Granularity::PerTensor)?;
    let s_max = init.scale[0];
    let lo = cal.activation.min();
    let mut rows = Vec::with_capacity(points);
    for s in scale_candidates(s_max, points) {
        let mut q = init.clone();
        q.set_scale(0, s, lo);
        let xq = q.fake_quantize(&cal.activation);
        let lp = pgrid
            .iter()
            .map(|&p| lp_sum_slices(cal.activation.data(), xq.data(), p))
            .collect();
        let quant = only(point, q);
        let cal_q = outputs_with(model, &cal, &calib.images, &quant)?;
        let odol = variants
            .iter()
            .map(|v| odol_batch(&cal_fp, &cal_q, &positives, v).map(|o| o.odol))
            .collect::<Result<Vec<_>>>()?;
        let val_q = outputs_with(model, &vctx, &val.images, &quant)?;
        rows.push(SweepPoint {
            ratio: s / s_max,
            s,
            lp,
            odol,
            perf_loss: map_fp - map_of(model, &val_q, val)?,
        });
    }
    Ok(ScaleSweep {
        layer: point.to_string(),
        bits,
        s_max,
        pgrid: pgrid.to_vec(),
        points: rows,
    })
}
