//! Reconstruction units, per-image activation caches and the graph hooks
//! used while calibrating one block.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::AffineQuantizer;
use crate::tensor::{Graph, Tensor, Var};
use crate::toydet::{stack_images, AttachedQuantizers, ConvLayer, LayerHooks, QuantHooks, ToyDetector, UnitKind};

/// Images per forward pass when evaluating caches and losses.
pub(crate) const EVAL_CHUNK: usize = 16;

/// One reconstruction unit: a residual block, the stem, or a single neck
/// layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub name: String,
    /// Index of the backing unit in the model.
    pub unit: usize,
    /// Unit whose output feeds this block; `None` for the image.
    pub source: Option<usize>,
    pub layers: Vec<String>,
    pub act_points: Vec<String>,
}

/// Splits the quantizable part of `model` into blocks in execution order.
/// Head layers are never part of a block.
pub fn partition_blocks(model: &ToyDetector) -> Result<Vec<BlockSpec>> {
    model
        .units
        .iter()
        .enumerate()
        .map(|(i, u)| {
            let expected = match u.kind {
                UnitKind::Stem { .. } | UnitKind::Neck => 1..=1,
                UnitKind::Residual => 2..=3,
            };
            if !expected.contains(&u.convs.len()) {
                return Err(Error::UnknownLayer(format!(
                    "unit {} ({:?}) with {} convolutions",
                    u.name,
                    u.kind,
                    u.convs.len()
                )));
            }
            Ok(BlockSpec {
                name: u.name.clone(),
                unit: i,
                source: u.source,
                layers: u.convs.iter().map(|c| c.name.clone()).collect(),
                act_points: u.act_points().into_iter().map(String::from).collect(),
            })
        })
        .collect()
}

/// Calibration tensors of one block, one entry per image.
#[derive(Debug, Clone)]
pub struct BlockData {
    /// Block input produced by the already-quantized prefix.
    pub inputs: Vec<Tensor>,
    /// Block input of the full-precision network.
    pub fp_inputs: Vec<Tensor>,
    /// Full-precision block output from full-precision inputs.
    pub targets: Vec<Tensor>,
}

impl BlockData {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

pub(crate) fn stack(items: &[Tensor], idx: &[usize]) -> Result<Tensor> {
    let refs: Vec<&Tensor> = idx.iter().map(|&i| &items[i]).collect();
    stack_images(&refs)
}

pub(crate) fn unstack(t: &Tensor) -> Vec<Tensor> {
    let n = t.shape()[0];
    let inner: Vec<usize> = t.shape()[1..].to_vec();
    (0..n)
        .map(|i| t.slice_outer(i, i + 1).reshape(&inner).expect("same numel"))
        .collect()
}

/// Runs one unit on a stacked batch.
pub(crate) fn run_unit(model: &ToyDetector, unit: usize, input: Tensor, hooks: &mut dyn LayerHooks) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(input);
    let y = model.unit_forward(&mut g, unit, x, hooks)?;
    Ok(g.value(y).clone())
}

/// Unit output for every image, evaluated in fixed chunks.
pub(crate) fn unit_outputs(model: &ToyDetector, unit: usize, inputs: &[Tensor], quant: &AttachedQuantizers) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(inputs.len());
    let idx: Vec<usize> = (0..inputs.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let y = run_unit(model, unit, stack(inputs, chunk)?, &mut QuantHooks { quant })?;
        out.extend(unstack(&y));
    }
    Ok(out)
}

/// `Σ_images Σ|O − O^q|^p / images` of the block under `quant`.
pub(crate) fn block_loss(
    model: &ToyDetector,
    block: &BlockSpec,
    data: &BlockData,
    quant: &AttachedQuantizers,
    p: f64,
) -> Result<f64> {
    let outs = unit_outputs(model, block.unit, &data.inputs, quant)?;
    let mut total = 0.0;
    for (o, t) in outs.iter().zip(&data.targets) {
        total += crate::quant::lp_sum_slices(t.data(), o.data(), p);
    }
    Ok(total / data.len().max(1) as f64)
}

/// Records the pre-quantization value of one activation point while
/// applying every attached quantizer.
pub(crate) struct CaptureHooks<'a> {
    pub quant: &'a AttachedQuantizers,
    pub point: &'a str,
    pub captured: Vec<f64>,
}

impl LayerHooks for CaptureHooks<'_> {
    fn weight(&mut self, g: &mut Graph, layer: &ConvLayer) -> Result<Var> {
        QuantHooks { quant: self.quant }.weight(g, layer)
    }

    fn activation(&mut self, g: &mut Graph, point: &str, x: Var) -> Result<Var> {
        if point == self.point {
            self.captured.extend_from_slice(g.value(x).data());
        }
        QuantHooks { quant: self.quant }.activation(g, point, x)
    }
}

/// All values reaching `point` over the block's calibration inputs.
pub(crate) fn capture_point(
    model: &ToyDetector,
    block: &BlockSpec,
    inputs: &[Tensor],
    quant: &AttachedQuantizers,
    point: &str,
) -> Result<Tensor> {
    let mut hooks = CaptureHooks {
        quant,
        point,
        captured: Vec::new(),
    };
    let idx: Vec<usize> = (0..inputs.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        run_unit(model, block.unit, stack(inputs, chunk)?, &mut hooks)?;
    }
    Tensor::from_vec(hooks.captured)
}

/// Hooks for gradient-based calibration: selected weights and activation
/// scales come from graph variables, everything else from `quant`.
pub(crate) struct OptHooks<'a> {
    pub quant: &'a AttachedQuantizers,
    pub weights: BTreeMap<String, Var>,
    pub acts: BTreeMap<String, (Var, &'a AffineQuantizer)>,
    /// Probability of keeping an activation element full precision.
    pub drop: Option<(f64, &'a mut ChaCha8Rng)>,
}

impl LayerHooks for OptHooks<'_> {
    fn weight(&mut self, g: &mut Graph, layer: &ConvLayer) -> Result<Var> {
        match self.weights.get(&layer.name) {
            Some(&v) => Ok(v),
            None => QuantHooks { quant: self.quant }.weight(g, layer),
        }
    }

    fn activation(&mut self, g: &mut Graph, point: &str, x: Var) -> Result<Var> {
        let Some(&(scale, q)) = self.acts.get(point) else {
            return QuantHooks { quant: self.quant }.activation(g, point, x);
        };
        let xq = q.apply(g, x, Some(scale))?;
        match self.drop.as_mut() {
            Some((prob, rng)) => {
                let n = g.value(x).numel();
                let mask: Vec<bool> = (0..n).map(|_| rng.gen::<f64>() < *prob).collect();
                g.select(mask, x, xq)
            }
            None => Ok(xq),
        }
    }
}
