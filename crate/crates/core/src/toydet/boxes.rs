use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in image pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// Clips to `[0, w] × [0, h]`, keeping a strictly positive extent.
    pub fn clip(&self, w: f64, h: f64) -> BBox {
        const MIN_EXTENT: f64 = 1e-3;
        let x1 = self.x1.clamp(0.0, w - MIN_EXTENT);
        let y1 = self.y1.clamp(0.0, h - MIN_EXTENT);
        let x2 = self.x2.clamp(x1 + MIN_EXTENT, w);
        let y2 = self.y2.clamp(y1 + MIN_EXTENT, h);
        BBox { x1, y1, x2, y2 }
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// A scored, classified box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(flatten)]
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

/// Largest log-scale delta accepted when decoding (`exp` stays bounded).
const MAX_LOG_DELTA: f64 = 4.135; // ln(1000 / 16)

/// Center/size offsets `(dx, dy, dw, dh)` of `gt` relative to `anchor`.
pub fn encode_box(gt: &BBox, anchor: &BBox) -> [f64; 4] {
    let (cx, cy) = gt.center();
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    [
        (cx - ax) / aw,
        (cy - ay) / ah,
        (gt.width() / aw).ln(),
        (gt.height() / ah).ln(),
    ]
}

/// Inverse of [`encode_box`] (without clipping).
pub fn decode_box(offsets: &[f64], anchor: &BBox) -> Result<BBox> {
    if offsets.len() != 4 {
        return Err(Error::shape("decode_box", "offsets", 4, offsets.len()));
    }
    if offsets.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("box offsets".into()));
    }
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let cx = ax + offsets[0] * aw;
    let cy = ay + offsets[1] * ah;
    let w = aw * offsets[2].min(MAX_LOG_DELTA).exp();
    let h = ah * offsets[3].min(MAX_LOG_DELTA).exp();
    Ok(BBox::from_center(cx, cy, w, h))
}

/// Decodes an `N×4` offset buffer against `anchors`, clipping to the image.
pub fn decode_boxes(offsets: &[f64], anchors: &[BBox], image_size: f64) -> Result<Vec<BBox>> {
    if offsets.len() != anchors.len() * 4 {
        return Err(Error::shape("decode_boxes", "offsets", anchors.len() * 4, offsets.len()));
    }
    offsets
        .chunks(4)
        .zip(anchors)
        .map(|(o, a)| decode_box(o, a).map(|b| b.clip(image_size, image_size)))
        .collect()
}

pub fn encode_boxes(gts: &[BBox], anchors: &[BBox]) -> Result<Vec<f64>> {
    if gts.len() != anchors.len() {
        return Err(Error::shape("encode_boxes", "pairs", anchors.len(), gts.len()));
    }
    Ok(gts.iter().zip(anchors).flat_map(|(g, a)| encode_box(g, a)).collect())
}
