use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::boxes::{decode_boxes, BBox};
use super::{generate_anchors, DetectionOutput, ToyDetectorConfig};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Convolution with bias. Weights are OIHW.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub name: String,
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub pad: usize,
}

impl ConvLayer {
    pub fn he_init(name: &str, cin: usize, cout: usize, k: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = (cin * k * k) as f64;
        let std = (2.0 / fan_in).sqrt();
        let data = (0..cout * cin * k * k).map(|_| std * normal(rng)).collect();
        ConvLayer {
            name: name.to_string(),
            weight: Tensor::from_parts(vec![cout, cin, k, k], data),
            bias: Tensor::zeros(&[cout]),
            stride,
            pad: k / 2,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen::<f64>().max(1e-300);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitKind {
    /// conv → relu → act → optional 2×2 max-pool
    Stem { pool: bool },
    /// conv1 → relu → act; conv2 + shortcut → relu → act
    Residual,
    /// conv → relu → act
    Neck,
}

/// A node of the backbone/neck graph. `source` is the producing unit
/// (`None` = the input image).
#[derive(Debug, Clone, PartialEq)]
pub struct Unit {
    pub name: String,
    pub kind: UnitKind,
    pub source: Option<usize>,
    pub convs: Vec<ConvLayer>,
}

impl Unit {
    /// Activation quantization points, in execution order. Each is named
    /// after the conv whose post-activation output it quantizes.
    pub fn act_points(&self) -> Vec<&str> {
        match self.kind {
            UnitKind::Stem { .. } | UnitKind::Neck => vec![self.convs[0].name.as_str()],
            UnitKind::Residual => vec![self.convs[0].name.as_str(), self.convs[1].name.as_str()],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.kind {
            UnitKind::Stem { .. } | UnitKind::Neck => self.convs.len() == 1,
            UnitKind::Residual => self.convs.len() == 2 || self.convs.len() == 3,
        };
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "unit {} of kind {:?} has {} convs",
                self.name,
                self.kind,
                self.convs.len()
            )));
        }
        Ok(())
    }
}

/// Shared classification and box heads applied to every feature level.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    /// Producing unit of each level's feature map.
    pub features: Vec<usize>,
    pub cls: ConvLayer,
    pub bbox: ConvLayer,
}

/// Where the forward pass asks for weights and inserts activation
/// fake-quantization. The default hooks run the plain FP network.
pub trait LayerHooks {
    fn weight(&mut self, g: &mut Graph, layer: &ConvLayer) -> Result<Var> {
        Ok(g.constant(layer.weight.clone()))
    }

    fn bias(&mut self, g: &mut Graph, layer: &ConvLayer) -> Result<Var> {
        Ok(g.constant(layer.bias.clone()))
    }

    fn activation(&mut self, _g: &mut Graph, _point: &str, x: Var) -> Result<Var> {
        Ok(x)
    }
}

/// Full-precision execution.
pub struct FpHooks;

impl LayerHooks for FpHooks {}

/// Head outputs per level: class logits `[N, A·(K+1), H, W]` and box
/// offsets `[N, A·4, H, W]`.
pub struct HeadVars {
    pub levels: Vec<(Var, Var)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDetector {
    pub config: ToyDetectorConfig,
    pub units: Vec<Unit>,
    pub head: Head,
}

impl ToyDetector {
    /// Builds the default layout for `config` with He-initialized weights.
    pub fn new(config: ToyDetectorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut units = Vec::new();
        units.push(Unit {
            name: "stem".into(),
            kind: UnitKind::Stem { pool: true },
            source: None,
            convs: vec![ConvLayer::he_init("stem.conv", config.in_channels, config.stem_channels, 3, 2, &mut rng)],
        });
        let mut cin = config.stem_channels;
        let mut stage_outputs = Vec::new();
        for (si, &cout) in config.stage_channels.iter().enumerate() {
            for bi in 0..config.blocks_per_stage {
                let name = format!("layer{}.{}", si + 1, bi);
                let stride = if bi == 0 { 2 } else { 1 };
                let mut convs = vec![
                    ConvLayer::he_init(&format!("{name}.conv1"), cin, cout, 3, stride, &mut rng),
                    ConvLayer::he_init(&format!("{name}.conv2"), cout, cout, 3, 1, &mut rng),
                ];
                if stride != 1 || cin != cout {
                    convs.push(ConvLayer::he_init(&format!("{name}.downsample"), cin, cout, 1, stride, &mut rng));
                }
                let source = Some(units.len() - 1);
                units.push(Unit {
                    name,
                    kind: UnitKind::Residual,
                    source,
                    convs,
                });
                cin = cout;
            }
            stage_outputs.push((units.len() - 1, cout));
        }
        let mut features = Vec::new();
        for (li, &(src, ch)) in stage_outputs.iter().enumerate() {
            let name = format!("neck.p{}", li + 3);
            units.push(Unit {
                name: name.clone(),
                kind: UnitKind::Neck,
                source: Some(src),
                convs: vec![ConvLayer::he_init(&format!("{name}.conv"), ch, config.neck_channels, 3, 1, &mut rng)],
            });
            features.push(units.len() - 1);
        }
        let a = config.anchor_scales.len();
        let k = config.num_classes + 1;
        let mut cls = ConvLayer::he_init("head.cls", config.neck_channels, a * k, 3, 1, &mut rng);
        let mut bbox = ConvLayer::he_init("head.box", config.neck_channels, a * 4, 3, 1, &mut rng);
        cls.weight = cls.weight.map(|w| 0.1 * w);
        bbox.weight = bbox.weight.map(|w| 0.1 * w);
        // background prior ≈ 0.97
        for ai in 0..a {
            cls.bias.data_mut()[ai * k] = 3.5 + (config.num_classes as f64).ln();
        }
        let model = ToyDetector {
            config,
            units,
            head: Head { features, cls, bbox },
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, u) in self.units.iter().enumerate() {
            u.validate()?;
            if u.source.is_some_and(|s| s >= i) {
                return Err(Error::InvalidArgument(format!("unit {} consumes a later unit", u.name)));
            }
        }
        if self.head.features.iter().any(|&f| f >= self.units.len()) {
            return Err(Error::InvalidArgument("head consumes an unknown unit".into()));
        }
        Ok(())
    }

    pub fn unit_index(&self, name: &str) -> Option<usize> {
        self.units.iter().position(|u| u.name == name)
    }

    /// All conv layers (backbone, neck, then head) in execution order.
    pub fn conv_layers(&self) -> Vec<&ConvLayer> {
        self.units
            .iter()
            .flat_map(|u| u.convs.iter())
            .chain([&self.head.cls, &self.head.bbox])
            .collect()
    }

    pub fn conv_layers_mut(&mut self) -> Vec<&mut ConvLayer> {
        self.units
            .iter_mut()
            .flat_map(|u| u.convs.iter_mut())
            .chain([&mut self.head.cls, &mut self.head.bbox])
            .collect()
    }

    pub fn layer(&self, name: &str) -> Option<&ConvLayer> {
        self.conv_layers().into_iter().find(|l| l.name == name)
    }

    /// Every activation quantization point in execution order.
    pub fn act_points(&self) -> Vec<String> {
        self.units
            .iter()
            .flat_map(|u| u.act_points().into_iter().map(String::from))
            .collect()
    }

    /// Unit that owns an activation point.
    pub fn unit_of_act(&self, point: &str) -> Option<usize> {
        self.units.iter().position(|u| u.act_points().contains(&point))
    }

    fn conv(&self, g: &mut Graph, layer: &ConvLayer, x: Var, hooks: &mut dyn LayerHooks) -> Result<Var> {
        let w = hooks.weight(g, layer)?;
        let b = hooks.bias(g, layer)?;
        g.conv2d(x, w, Some(b), layer.stride, layer.pad)
    }

    /// Runs one unit on its input.
    pub fn unit_forward(&self, g: &mut Graph, idx: usize, x: Var, hooks: &mut dyn LayerHooks) -> Result<Var> {
        let u = &self.units[idx];
        match u.kind {
            UnitKind::Stem { pool } => {
                let y = self.conv(g, &u.convs[0], x, hooks)?;
                let y = g.relu(y);
                let y = hooks.activation(g, &u.convs[0].name, y)?;
                if pool {
                    g.max_pool2d(y, 2, 2)
                } else {
                    Ok(y)
                }
            }
            UnitKind::Neck => {
                let y = self.conv(g, &u.convs[0], x, hooks)?;
                let y = g.relu(y);
                hooks.activation(g, &u.convs[0].name, y)
            }
            UnitKind::Residual => {
                let h = self.conv(g, &u.convs[0], x, hooks)?;
                let h = g.relu(h);
                let h = hooks.activation(g, &u.convs[0].name, h)?;
                let y = self.conv(g, &u.convs[1], h, hooks)?;
                let sc = match u.convs.get(2) {
                    Some(ds) => self.conv(g, ds, x, hooks)?,
                    None => x,
                };
                let y = g.add(y, sc)?;
                let y = g.relu(y);
                hooks.activation(g, &u.convs[1].name, y)
            }
        }
    }

    /// Applies the shared heads to the given per-level features.
    pub fn head_forward(&self, g: &mut Graph, feats: &[Var], hooks: &mut dyn LayerHooks) -> Result<HeadVars> {
        let mut levels = Vec::with_capacity(feats.len());
        for &f in feats {
            let c = self.conv(g, &self.head.cls, f, hooks)?;
            let b = self.conv(g, &self.head.bbox, f, hooks)?;
            levels.push((c, b));
        }
        Ok(HeadVars { levels })
    }

    /// Runs units `start..` given already-computed outputs for every unit
    /// before `start` (entries may be `None` only if nothing downstream
    /// needs them). Returns all unit outputs.
    pub fn forward_units(
        &self,
        g: &mut Graph,
        image: Var,
        mut known: Vec<Option<Var>>,
        start: usize,
        hooks: &mut dyn LayerHooks,
    ) -> Result<Vec<Var>> {
        known.resize(self.units.len(), None);
        for i in start..self.units.len() {
            let input = match self.units[i].source {
                None => image,
                Some(s) => known[s].ok_or_else(|| Error::InvalidArgument(format!("unit {s} output missing")))?,
            };
            known[i] = Some(self.unit_forward(g, i, input, hooks)?);
        }
        known
            .into_iter()
            .enumerate()
            .map(|(i, v)| v.ok_or_else(|| Error::InvalidArgument(format!("unit {i} output missing"))))
            .collect()
    }

    /// Full network on a graph.
    pub fn forward_graph(&self, g: &mut Graph, images: Var, hooks: &mut dyn LayerHooks) -> Result<HeadVars> {
        let s = g.shape(images).to_vec();
        let size = self.config.input_size;
        if s.len() != 4 || s[1] != self.config.in_channels || s[2] != size || s[3] != size {
            return Err(Error::shape(
                "ToyDetector::forward",
                "image extent",
                self.config.in_channels * size * size,
                s.iter().skip(1).product(),
            ));
        }
        let outs = self.forward_units(g, images, Vec::new(), 0, hooks)?;
        let feats: Vec<Var> = self.head.features.iter().map(|&f| outs[f]).collect();
        self.head_forward(g, &feats, hooks)
    }

    /// Full forward pass producing one [`DetectionOutput`] per image.
    pub fn forward(&self, images: &Tensor, hooks: &mut dyn LayerHooks) -> Result<Vec<DetectionOutput>> {
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let head = self.forward_graph(&mut g, x, hooks)?;
        self.detection_outputs(&g, &head)
    }

    pub fn anchors(&self) -> Vec<BBox> {
        generate_anchors(&self.config).into_iter().flatten().collect()
    }

    /// Softmax probabilities and decoded boxes per image, flattened
    /// level-major then (row, col, anchor).
    pub fn detection_outputs(&self, g: &Graph, head: &HeadVars) -> Result<Vec<DetectionOutput>> {
        let a = self.config.anchor_scales.len();
        let kp1 = self.config.num_classes + 1;
        let batch = g.shape(head.levels[0].0)[0];
        let anchors = self.anchors();
        let mut outs: Vec<DetectionOutput> = (0..batch)
            .map(|_| DetectionOutput {
                num_classes: self.config.num_classes,
                probs: Vec::with_capacity(anchors.len() * kp1),
                offsets: Vec::with_capacity(anchors.len() * 4),
                boxes: Vec::new(),
            })
            .collect();
        for &(cls, bx) in &head.levels {
            let cs = g.shape(cls).to_vec();
            let (h, w) = (cs[2], cs[3]);
            let cv = g.value(cls).data();
            let bv = g.value(bx).data();
            for (n, out) in outs.iter_mut().enumerate() {
                for y in 0..h {
                    for x in 0..w {
                        for ai in 0..a {
                            let at = |ch: usize, chans: usize| ((n * chans + ch) * h + y) * w + x;
                            let logits: Vec<f64> = (0..kp1).map(|c| cv[at(ai * kp1 + c, a * kp1)]).collect();
                            let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                            let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
                            out.probs.extend(logits.iter().map(|l| (l - mx).exp() / z));
                            out.offsets.extend((0..4).map(|c| bv[at(ai * 4 + c, a * 4)]));
                        }
                    }
                }
            }
        }
        let size = self.config.input_size as f64;
        for out in &mut outs {
            out.boxes = decode_boxes(&out.offsets, &anchors, size)?;
        }
        Ok(outs)
    }
}
