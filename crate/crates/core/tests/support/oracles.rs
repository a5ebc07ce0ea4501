//! Independent reference implementations: NMS, AP staircases, box coding,
//! scale grid search, convolution and pooling.

use detquant::quant::{grid_search_local, AffineQuantizer, Granularity, Metric};
use detquant::tensor::kernels::{conv2d_forward, max_pool2d_forward, ConvGeom};
use detquant::tensor::Tensor;
use detquant::toydet::{
    coco_thresholds, decode_box, encode_box, evaluate_map, iou, nms, BBox, Detection, GroundTruth, GtBox,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_box(rng: &mut ChaCha8Rng, extent: f64) -> BBox {
    let x1 = rng.gen_range(0.0..extent * 0.8);
    let y1 = rng.gen_range(0.0..extent * 0.8);
    let w = rng.gen_range(1.0..extent * 0.4);
    let h = rng.gen_range(1.0..extent * 0.4);
    BBox::new(x1, y1, x1 + w, y1 + h)
}

/// Repeatedly takes the best remaining box (lowest index on equal scores)
/// and discards everything overlapping it by more than the threshold.
pub fn nms_reference(boxes: &[BBox], scores: &[f64], thr: f64) -> Vec<usize> {
    let mut alive = vec![true; boxes.len()];
    let mut keep = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..boxes.len() {
            if alive[i] && best.is_none_or(|b| scores[i] > scores[b]) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        keep.push(b);
        alive[b] = false;
        for j in 0..boxes.len() {
            if alive[j] && iou(&boxes[b], &boxes[j]) > thr {
                alive[j] = false;
            }
        }
    }
    keep
}

/// Number of random instances (up to 50 boxes each) where NMS disagrees
/// with the reference.
pub fn nms_mismatches(instances: usize) -> usize {
    let mut bad = 0;
    for k in 0..instances as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(0x4e45 << 32 | k);
        let n = rng.gen_range(0..=50);
        let boxes: Vec<BBox> = (0..n).map(|_| random_box(&mut rng, 64.0)).collect();
        // coarse scores so equal-score ties occur
        let scores: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..20) as f64) / 20.0).collect();
        let thr = rng.gen_range(0.1..0.9);
        if nms(&boxes, &scores, thr) != nms_reference(&boxes, &scores, thr) {
            bad += 1;
        }
    }
    bad
}

fn gt(boxes: &[(BBox, usize)]) -> GroundTruth {
    GroundTruth {
        boxes: boxes.iter().map(|&(bbox, class_id)| GtBox { bbox, class_id }).collect(),
    }
}

fn det(bbox: BBox, class_id: usize, score: f64) -> Detection {
    Detection { bbox, class_id, score }
}

pub struct Staircase {
    pub name: &'static str,
    pub got: f64,
    pub want: f64,
}

/// Crafted detection lists whose AP follows from the 101-point interpolated
/// precision-recall staircase by hand.
pub fn map_staircases() -> Vec<Staircase> {
    let a = BBox::new(0.0, 0.0, 10.0, 10.0);
    let b = BBox::new(20.0, 20.0, 30.0, 30.0);
    let c = BBox::new(40.0, 0.0, 50.0, 10.0);
    let miss = BBox::new(50.0, 50.0, 60.0, 60.0);
    let at50 = [0.5];
    let eval = |dets: Vec<Vec<Detection>>, gts: Vec<GroundTruth>, thr: &[f64]| {
        evaluate_map(&dets, &gts, thr, 3).unwrap().map
    };
    vec![
        // recall .5 .5 1, precision 1 .5 2/3: 51 points at 1, 50 at 2/3
        Staircase {
            name: "tp-fp-tp",
            got: eval(
                vec![vec![det(a, 0, 0.9), det(miss, 0, 0.8), det(b, 0, 0.7)]],
                vec![gt(&[(a, 0), (b, 0)])],
                &at50,
            ),
            want: (51.0 + 50.0 * 2.0 / 3.0) / 101.0,
        },
        // envelope 1/2 everywhere
        Staircase {
            name: "fp-first",
            got: eval(vec![vec![det(miss, 0, 0.9), det(a, 0, 0.5)]], vec![gt(&[(a, 0)])], &at50),
            want: 0.5,
        },
        // recall stops at 2/3: points 0.00..0.66 at precision 1
        Staircase {
            name: "missed-gt",
            got: eval(
                vec![vec![det(a, 0, 0.9), det(b, 0, 0.8), det(miss, 0, 0.7)]],
                vec![gt(&[(a, 0), (b, 0), (c, 0)])],
                &at50,
            ),
            want: 67.0 / 101.0,
        },
        // two images, two leading false positives: envelope 1/2
        Staircase {
            name: "two-images",
            got: eval(
                vec![
                    vec![det(miss, 0, 0.95), det(a, 0, 0.6)],
                    vec![det(miss, 0, 0.9), det(b, 0, 0.5)],
                ],
                vec![gt(&[(a, 0)]), gt(&[(b, 0)])],
                &at50,
            ),
            want: 0.5,
        },
        // the duplicate cannot reuse the consumed ground truth
        Staircase {
            name: "duplicate",
            got: eval(vec![vec![det(a, 0, 0.9), det(a, 0, 0.8)]], vec![gt(&[(a, 0)])], &at50),
            want: 1.0,
        },
        // class 0 perfect, class 2 fp-first: mean of 1 and 1/2
        Staircase {
            name: "class-mean",
            got: eval(
                vec![vec![det(a, 0, 0.9), det(miss, 2, 0.9), det(b, 2, 0.4)]],
                vec![gt(&[(a, 0), (b, 2)])],
                &at50,
            ),
            want: 0.75,
        },
        // IoU 0.62 counts at 0.50, 0.55 and 0.60 of the ten thresholds
        Staircase {
            name: "coco-thresholds",
            got: eval(
                vec![vec![det(BBox::new(0.0, 0.0, 10.0, 6.2), 1, 0.9)]],
                vec![gt(&[(a, 1)])],
                &coco_thresholds(),
            ),
            want: 0.3,
        },
    ]
}

pub fn decode_encode_max_error(pairs: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(0xdec0de);
    let mut worst: f64 = 0.0;
    for _ in 0..pairs {
        let anchor = random_box(&mut rng, 64.0);
        let g = random_box(&mut rng, 64.0);
        let back = decode_box(&encode_box(&g, &anchor), &anchor).unwrap();
        for (x, y) in back.coords().iter().zip(g.coords()) {
            worst = worst.max((x - y).abs());
        }
    }
    worst
}

pub fn exhaustive_scale(ch: &[f64], s_max: f64, signed: bool, symmetric: bool, bits: u32, p: f64) -> usize {
    let (n, m) = if signed {
        (-(1i64 << (bits - 1)) as f64, ((1i64 << (bits - 1)) - 1) as f64)
    } else {
        (0.0, ((1i64 << bits) - 1) as f64)
    };
    let lo = ch.iter().copied().fold(f64::INFINITY, f64::min);
    let mut best = (0usize, f64::INFINITY);
    for k in 0..100 {
        let s = s_max * (0.01 + 0.99 * k as f64 / 99.0);
        let z = if symmetric { 0.0 } else { (n - lo / s).round_ties_even().clamp(n, m) };
        let loss: f64 = ch
            .iter()
            .map(|&v| {
                let q = ((v / s).round_ties_even() + z).clamp(n, m);
                let d = (v - (q - z) * s).abs();
                if d < 1e-12 {
                    0.0
                } else {
                    d.powf(p)
                }
            })
            .sum();
        if loss <= best.1 {
            best = (k, loss);
        }
    }
    best.0
}

/// Number of random tensors whose searched scale differs from the
/// exhaustive 100-point sweep, over per-tensor activations and per-channel
/// weights.
pub fn grid_search_mismatches(trials: usize) -> usize {
    let mut bad = 0;
    for k in 0..trials as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(0x9e1d << 32 | k);
        let p = [1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 4.5][rng.gen_range(0..8)];
        let bits = rng.gen_range(2..=6);
        let weights = rng.gen_bool(0.5);
        let shape = if weights { vec![3, 2, 3, 3] } else { vec![2, 4, 5, 5] };
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| {
                let v: f64 = rng.gen_range(-1.0..1.0);
                if weights {
                    v * v.abs()
                } else {
                    (v * 3.0).max(0.0) * rng.gen_range(0.0..1.0)
                }
            })
            .collect();
        let x = Tensor::new(&shape, data).unwrap();
        let (init, gran) = if weights {
            (AffineQuantizer::init_symmetric(&x, bits, Granularity::PerChannel).unwrap(), Granularity::PerChannel)
        } else {
            (AffineQuantizer::init_minmax(&x, bits, false, Granularity::PerTensor).unwrap(), Granularity::PerTensor)
        };
        let (tuned, _) = grid_search_local(&x, &init, Metric::Lp(p), 100);
        let slices: Vec<&[f64]> = match gran {
            Granularity::PerTensor => vec![x.data()],
            Granularity::PerChannel => x.data().chunks(n / shape[0]).collect(),
        };
        for (c, ch) in slices.iter().enumerate() {
            let idx = exhaustive_scale(ch, init.scale[c], init.signed, weights, bits, p);
            let want = init.scale[c] * (0.01 + 0.99 * idx as f64 / 99.0);
            if tuned.scale[c] != want {
                bad += 1;
            }
        }
    }
    bad
}

/// Direct seven-loop convolution with zero padding.
pub fn conv_reference(x: &[f64], w: &[f64], b: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut out = vec![0.0; g.batch * g.out_ch * oh * ow];
    for n in 0..g.batch {
        for o in 0..g.out_ch {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b[o]);
                    for c in 0..g.in_ch {
                        for i in 0..g.k_h {
                            for j in 0..g.k_w {
                                let iy = (y * g.stride + i) as isize - g.pad as isize;
                                let ix = (xo * g.stride + j) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= g.in_h as isize || ix >= g.in_w as isize {
                                    continue;
                                }
                                let xv = x[((n * g.in_ch + c) * g.in_h + iy as usize) * g.in_w + ix as usize];
                                let wv = w[((o * g.in_ch + c) * g.k_h + i) * g.k_w + j];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((n * g.out_ch + o) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    out
}

/// Largest deviation between the conv kernel and the loop nest.
pub fn conv_max_error(trials: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for k in 0..trials as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(0xc0 << 32 | k);
        let kk = rng.gen_range(1..=3);
        let geom = ConvGeom {
            batch: rng.gen_range(1..=2),
            in_ch: rng.gen_range(1..=4),
            in_h: rng.gen_range(kk..=9),
            in_w: rng.gen_range(kk..=9),
            out_ch: rng.gen_range(1..=4),
            k_h: kk,
            k_w: kk,
            stride: rng.gen_range(1..=2),
            pad: rng.gen_range(0..=1),
        };
        let x: Vec<f64> = (0..geom.batch * geom.in_ch * geom.in_h * geom.in_w)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let w: Vec<f64> = (0..geom.out_ch * geom.in_ch * kk * kk).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..geom.out_ch).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let got = conv2d_forward(&x, &w, Some(&b), &geom);
        let want = conv_reference(&x, &w, Some(&b), &geom);
        for (a, b) in got.iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}

/// Random 1×1×4×4 inputs pooled with k = 2, stride 2 against a window scan.
pub fn maxpool_mismatches(trials: usize) -> usize {
    let mut bad = 0;
    for k in 0..trials as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(0x9001 << 32 | k);
        let x: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (out, _, oh, ow) = max_pool2d_forward(&x, 1, 4, 4, 2, 2);
        let mut want = Vec::new();
        for wy in 0..2 {
            for wx in 0..2 {
                let m = [(0, 0), (0, 1), (1, 0), (1, 1)]
                    .iter()
                    .map(|&(i, j)| x[(2 * wy + i) * 4 + 2 * wx + j])
                    .fold(f64::NEG_INFINITY, f64::max);
                want.push(m);
            }
        }
        if (oh, ow) != (2, 2) || out != want {
            bad += 1;
        }
    }
    bad
}
