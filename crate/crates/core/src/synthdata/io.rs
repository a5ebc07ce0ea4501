//! Dataset directory layout:
//!
//! ```text
//! <dir>/dataset.json        manifest {format_version, count, canvas, images[], provenance?}
//! <dir>/images/000000.ppm   binary P6, 8-bit RGB
//! <dir>/annotations.jsonl   {image_id, boxes:[{x1,y1,x2,y2,class_id}]} per line
//! ```

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CalibrationSet, LabeledSet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::toydet::{GroundTruth, GtBox};

pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct DatasetManifest {
    format_version: u32,
    count: usize,
    canvas: usize,
    images: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<serde_json::Value>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationLine {
    image_id: usize,
    boxes: Vec<GtBox>,
}

fn write_ppm(path: &Path, canvas: usize, chw: &Tensor) -> Result<()> {
    let mut buf = format!("P6\n{canvas} {canvas}\n255\n").into_bytes();
    let plane = canvas * canvas;
    let d = chw.data();
    for i in 0..plane {
        for c in 0..3 {
            buf.push((d[c * plane + i] * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Format {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    // header: magic, width, height, maxval separated by whitespace
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated PPM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).to_string());
    }
    pos += 1;
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(bad("expected binary P6 with maxval 255"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    let body = bytes.get(pos..pos + 3 * w * h).ok_or_else(|| bad("truncated pixel data"))?;
    let plane = w * h;
    let mut data = vec![0.0; 3 * plane];
    for i in 0..plane {
        for c in 0..3 {
            data[c * plane + i] = body[3 * i + c] as f64 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

pub fn save_dataset(dir: &Path, set: &LabeledSet) -> Result<()> {
    save_dataset_with(dir, set, None)
}

/// Like [`save_dataset`], recording `provenance` (generator settings) in the
/// manifest.
pub fn save_dataset_with(dir: &Path, set: &LabeledSet, provenance: Option<serde_json::Value>) -> Result<()> {
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let canvas = set.images.first().map_or(0, |t| t.shape()[2]);
    let mut names = Vec::with_capacity(set.len());
    for (i, im) in set.images.iter().enumerate() {
        let name = format!("images/{i:06}.ppm");
        write_ppm(&dir.join(&name), canvas, im)?;
        names.push(name);
    }
    let ann_path = dir.join("annotations.jsonl");
    let mut f = fs::File::create(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
    for (i, gt) in set.groundtruth.iter().enumerate() {
        let line = serde_json::to_string(&AnnotationLine {
            image_id: i,
            boxes: gt.boxes.clone(),
        })?;
        writeln!(f, "{line}").map_err(|e| Error::io(&ann_path, e))?;
    }
    let manifest = DatasetManifest {
        format_version: DATASET_VERSION,
        count: set.len(),
        canvas,
        images: names,
        provenance,
    };
    let mpath = dir.join("dataset.json");
    fs::write(&mpath, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&mpath, e))
}

fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let mpath = dir.join("dataset.json");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let m: DatasetManifest = serde_json::from_str(&text)?;
    if m.format_version != DATASET_VERSION {
        return Err(Error::Version {
            found: m.format_version,
            expected: DATASET_VERSION,
        });
    }
    if m.images.len() != m.count {
        return Err(Error::Format {
            path: mpath,
            msg: format!("count {} but {} image entries", m.count, m.images.len()),
        });
    }
    Ok(m)
}

/// Reads at most `limit` images and nothing else; annotation files are
/// never opened.
pub fn load_calibration_images(dir: &Path, limit: Option<usize>) -> Result<CalibrationSet> {
    let m = read_manifest(dir)?;
    let n = limit.unwrap_or(m.count).min(m.count);
    let images = m.images[..n].iter().map(|name| read_ppm(&dir.join(name))).collect::<Result<_>>()?;
    Ok(CalibrationSet { images })
}

pub fn load_dataset(dir: &Path) -> Result<LabeledSet> {
    let m = read_manifest(dir)?;
    let images: Vec<Tensor> = m.images.iter().map(|name| read_ppm(&dir.join(name))).collect::<Result<_>>()?;
    let ann_path = dir.join("annotations.jsonl");
    let f = fs::File::open(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
    let mut groundtruth = vec![GroundTruth::default(); m.count];
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(&ann_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let a: AnnotationLine = serde_json::from_str(&line)?;
        let slot = groundtruth.get_mut(a.image_id).ok_or_else(|| Error::Format {
            path: ann_path.clone(),
            msg: format!("image_id {} out of range", a.image_id),
        })?;
        slot.boxes = a.boxes;
    }
    Ok(LabeledSet { images, groundtruth })
}
