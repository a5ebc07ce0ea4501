//! Central finite-difference checks for every differentiable graph op.

use detquant::tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Var>;

/// One randomized instance: inputs, which of them are differentiated, and
/// the op under test. The scalar objective is `Σ proj ⊙ op(inputs)`.
pub struct Case {
    pub inputs: Vec<Tensor>,
    pub wrt: Vec<bool>,
    pub build: Build,
    proj: Option<Tensor>,
}

impl Case {
    fn new(inputs: Vec<Tensor>, wrt: Vec<bool>, build: Build) -> Self {
        Case {
            inputs,
            wrt,
            build,
            proj: None,
        }
    }

    fn objective(&self, g: &mut Graph, vars: &[Var]) -> Var {
        let out = (self.build)(g, vars);
        match &self.proj {
            Some(p) if p.numel() > 1 => {
                let c = g.constant(p.clone());
                let m = g.mul(out, c).unwrap();
                g.sum(m)
            }
            Some(p) => g.scale(out, p.data()[0]),
            None => out,
        }
    }

    fn eval(&self, inputs: &[Tensor]) -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs
            .iter()
            .zip(&self.wrt)
            .map(|(t, &w)| if w { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        let l = self.objective(&mut g, &vars);
        g.value(l).item()
    }

    /// Worst norm-wise relative error over the differentiated inputs.
    pub fn max_rel_error(&mut self, rng: &mut ChaCha8Rng) -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = self.inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = (self.build)(&mut g, &vars);
        let shape = g.shape(out).to_vec();
        let n: usize = shape.iter().product();
        self.proj = Some(Tensor::new(&shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap());

        let mut g = Graph::new();
        let vars: Vec<Var> = self
            .inputs
            .iter()
            .zip(&self.wrt)
            .map(|(t, &w)| if w { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        let l = self.objective(&mut g, &vars);
        g.backward(l).unwrap();

        let mut worst: f64 = 0.0;
        for (i, &w) in self.wrt.iter().enumerate() {
            if !w {
                continue;
            }
            let analytic = g.grad(vars[i]).unwrap();
            let mut numeric = vec![0.0; analytic.numel()];
            let mut probe = self.inputs.clone();
            for (j, slot) in numeric.iter_mut().enumerate() {
                let x0 = self.inputs[i].data()[j];
                probe[i].data_mut()[j] = x0 + STEP;
                let up = self.eval(&probe);
                probe[i].data_mut()[j] = x0 - STEP;
                let down = self.eval(&probe);
                probe[i].data_mut()[j] = x0;
                *slot = (up - down) / (2.0 * STEP);
            }
            worst = worst.max(rel_error(analytic.data(), &numeric));
        }
        worst
    }
}

/// Norm-wise relative error. Gradients with norm below 1e-6 are compared
/// against that floor instead, since central differences of an O(1)
/// objective carry roundoff near 1e-11.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-6)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Uniform values kept at least `gap` away from zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], hi: f64, gap: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(gap..hi);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

fn small_shape(rng: &mut ChaCha8Rng) -> Vec<usize> {
    let rank = rng.gen_range(1..=3);
    (0..rank).map(|_| rng.gen_range(1..=4)).collect()
}

pub const OPS: [&str; 21] = [
    "conv2d",
    "linear",
    "add",
    "sub",
    "mul",
    "scale",
    "reshape",
    "relu",
    "sigmoid",
    "softmax",
    "max_pool2d",
    "sum",
    "mean",
    "lp_sum",
    "soft_round_weight",
    "rounding_reg",
    "select",
    "anchor_rows",
    "cross_entropy",
    "smooth_l1",
    "composed",
];

pub fn make_case(op: &str, rng: &mut ChaCha8Rng) -> Case {
    match op {
        "conv2d" => {
            let n = rng.gen_range(1..=2);
            let cin = rng.gen_range(1..=3);
            let cout = rng.gen_range(1..=3);
            let k = rng.gen_range(1..=3);
            let pad = rng.gen_range(0..=1);
            let stride = rng.gen_range(1..=2);
            let h = rng.gen_range(k.max(2)..=6);
            let w = rng.gen_range(k.max(2)..=6);
            let bias = rng.gen_bool(0.7);
            let mut inputs = vec![
                uniform(rng, &[n, cin, h, w], -1.0, 1.0),
                uniform(rng, &[cout, cin, k, k], -1.0, 1.0),
            ];
            if bias {
                inputs.push(uniform(rng, &[cout], -1.0, 1.0));
            }
            let wrt = vec![true; inputs.len()];
            Case::new(
                inputs,
                wrt,
                Box::new(move |g, v| g.conv2d(v[0], v[1], v.get(2).copied(), stride, pad).unwrap()),
            )
        }
        "linear" => {
            let (n, k, m) = (rng.gen_range(1..=4), rng.gen_range(1..=5), rng.gen_range(1..=4));
            let inputs = vec![
                uniform(rng, &[n, k], -1.0, 1.0),
                uniform(rng, &[m, k], -1.0, 1.0),
                uniform(rng, &[m], -1.0, 1.0),
            ];
            Case::new(inputs, vec![true; 3], Box::new(|g, v| g.linear(v[0], v[1], Some(v[2])).unwrap()))
        }
        "add" | "sub" | "mul" => {
            let s = small_shape(rng);
            let inputs = vec![uniform(rng, &s, -2.0, 2.0), uniform(rng, &s, -2.0, 2.0)];
            let build: Build = match op {
                "add" => Box::new(|g, v| g.add(v[0], v[1]).unwrap()),
                "sub" => Box::new(|g, v| g.sub(v[0], v[1]).unwrap()),
                _ => Box::new(|g, v| g.mul(v[0], v[1]).unwrap()),
            };
            Case::new(inputs, vec![true; 2], build)
        }
        "scale" => {
            let c = rng.gen_range(-3.0..3.0);
            let s = small_shape(rng);
            Case::new(vec![uniform(rng, &s, -2.0, 2.0)], vec![true], Box::new(move |g, v| g.scale(v[0], c)))
        }
        "reshape" => {
            let (a, b) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
            Case::new(
                vec![uniform(rng, &[a, b], -2.0, 2.0)],
                vec![true],
                Box::new(move |g, v| {
                    let r = g.reshape(v[0], &[b, a]).unwrap();
                    g.mul(r, r).unwrap()
                }),
            )
        }
        "relu" => {
            let s = small_shape(rng);
            Case::new(vec![away_from_zero(rng, &s, 2.0, 1e-3)], vec![true], Box::new(|g, v| g.relu(v[0])))
        }
        "sigmoid" => {
            let s = small_shape(rng);
            Case::new(vec![uniform(rng, &s, -4.0, 4.0)], vec![true], Box::new(|g, v| g.sigmoid(v[0])))
        }
        "softmax" => {
            let s = small_shape(rng);
            let axis = rng.gen_range(0..s.len());
            Case::new(
                vec![uniform(rng, &s, -3.0, 3.0)],
                vec![true],
                Box::new(move |g, v| g.softmax(v[0], axis).unwrap()),
            )
        }
        "max_pool2d" => {
            let k = rng.gen_range(1..=3);
            let stride = rng.gen_range(1..=2);
            let (n, c) = (rng.gen_range(1..=2), rng.gen_range(1..=2));
            let (h, w) = (rng.gen_range(k..=6), rng.gen_range(k..=6));
            let total = n * c * h * w;
            // distinct values so the argmax is stable under the probe step
            let mut vals: Vec<f64> = (0..total).map(|i| i as f64 * 0.1 + rng.gen_range(0.0..0.05)).collect();
            for i in (1..total).rev() {
                vals.swap(i, rng.gen_range(0..=i));
            }
            Case::new(
                vec![Tensor::new(&[n, c, h, w], vals).unwrap()],
                vec![true],
                Box::new(move |g, v| g.max_pool2d(v[0], k, stride).unwrap()),
            )
        }
        "sum" | "mean" => {
            let s = small_shape(rng);
            let build: Build = if op == "sum" {
                Box::new(|g, v| g.sum(v[0]))
            } else {
                Box::new(|g, v| g.mean(v[0]))
            };
            Case::new(vec![uniform(rng, &s, -2.0, 2.0)], vec![true], build)
        }
        "lp_sum" => {
            let s = small_shape(rng);
            let p = rng.gen_range(1.0..4.5);
            let a = uniform(rng, &s, -2.0, 2.0);
            let d = away_from_zero(rng, &s, 1.5, 1e-2);
            let b = Tensor::new(&s, a.data().iter().zip(d.data()).map(|(x, y)| x - y).collect()).unwrap();
            Case::new(vec![a, b], vec![true; 2], Box::new(move |g, v| g.lp_sum(v[0], v[1], p).unwrap()))
        }
        "soft_round_weight" => {
            let bits = rng.gen_range(3..=6);
            let (qmin, qmax) = (-(1i64 << (bits - 1)), (1i64 << (bits - 1)) - 1);
            let co = rng.gen_range(1..=3);
            let per = rng.gen_range(1..=6);
            let scale: Vec<f64> = (0..co).map(|_| rng.gen_range(0.05..1.0)).collect();
            let zero: Vec<f64> = (0..co).map(|_| rng.gen_range(-1..=1) as f64).collect();
            // keep base + h + z strictly inside the grid for every h in [0, 1]
            let base: Vec<f64> = (0..co * per)
                .map(|i| {
                    let z = zero[i / per] as i64;
                    rng.gen_range(qmin + 1 - z..=qmax - 2 - z) as f64
                })
                .collect();
            let v = uniform(rng, &[co, per], -2.0, 2.0);
            Case::new(
                vec![v],
                vec![true],
                Box::new(move |g, vars| {
                    g.soft_round_weight(vars[0], &base, &scale, &zero, qmin as f64, qmax as f64, false)
                        .unwrap()
                }),
            )
        }
        "rounding_reg" => {
            let s = small_shape(rng);
            let beta = rng.gen_range(2.0..20.0);
            Case::new(
                vec![away_from_zero(rng, &s, 2.0, 0.05)],
                vec![true],
                Box::new(move |g, v| g.rounding_reg(v[0], beta)),
            )
        }
        "select" => {
            let s = small_shape(rng);
            let n: usize = s.iter().product();
            let mask: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
            let inputs = vec![uniform(rng, &s, -2.0, 2.0), uniform(rng, &s, -2.0, 2.0)];
            Case::new(
                inputs,
                vec![true; 2],
                Box::new(move |g, v| {
                    let sq = g.mul(v[1], v[1]).unwrap();
                    g.select(mask.clone(), v[0], sq).unwrap()
                }),
            )
        }
        "anchor_rows" => {
            let a = rng.gen_range(1..=3);
            let c = rng.gen_range(1..=3);
            let (n, h, w) = (rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=3));
            Case::new(
                vec![uniform(rng, &[n, a * c, h, w], -2.0, 2.0)],
                vec![true],
                Box::new(move |g, v| g.anchor_rows(v[0], a).unwrap()),
            )
        }
        "cross_entropy" => {
            let (r, c) = (rng.gen_range(1..=6), rng.gen_range(2..=4));
            let targets: Vec<usize> = (0..r).map(|_| rng.gen_range(0..c)).collect();
            let weights: Vec<f64> = (0..r).map(|_| rng.gen_range(0.0..2.0)).collect();
            Case::new(
                vec![uniform(rng, &[r, c], -3.0, 3.0)],
                vec![true],
                Box::new(move |g, v| g.cross_entropy(v[0], targets.clone(), weights.clone()).unwrap()),
            )
        }
        "smooth_l1" => {
            let r = rng.gen_range(1..=6);
            let beta = rng.gen_range(0.05..1.0);
            let pred = uniform(rng, &[r, 4], -2.0, 2.0);
            // offsets stay clear of the |d| = beta seam
            let target: Vec<f64> = pred
                .data()
                .iter()
                .map(|&p| loop {
                    let t = p + rng.gen_range(-2.0..2.0);
                    if ((p - t).abs() - beta).abs() > 1e-3 {
                        break t;
                    }
                })
                .collect();
            let weights: Vec<f64> = (0..r).map(|_| if rng.gen_bool(0.3) { 0.0 } else { rng.gen_range(0.1..2.0) }).collect();
            Case::new(
                vec![pred],
                vec![true],
                Box::new(move |g, v| g.smooth_l1(v[0], target.clone(), weights.clone(), beta).unwrap()),
            )
        }
        "composed" => {
            // conv -> relu -> conv -> anchor rows -> classification + box loss
            let (a, c) = (2, 3);
            let h = rng.gen_range(3..=5);
            let x = uniform(rng, &[1, 2, h, h], -1.0, 1.0);
            let w1 = uniform(rng, &[3, 2, 3, 3], -0.5, 0.5);
            let b1 = uniform(rng, &[3], 0.2, 0.5);
            let w2 = uniform(rng, &[a * (c + 4), 3, 1, 1], -0.5, 0.5);
            let rows = h * h * a;
            let targets: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..c)).collect();
            let box_t: Vec<f64> = (0..rows * 4).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let pos: Vec<f64> = (0..rows).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
            Case::new(
                vec![x, w1, b1, w2],
                vec![false, true, true, true],
                Box::new(move |g, v| {
                    let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 1).unwrap();
                    let y = g.relu(y);
                    let y = g.conv2d(y, v[3], None, 1, 0).unwrap();
                    let r = g.anchor_rows(y, a).unwrap();
                    let r = g.reshape(r, &[rows * (c + 4)]).unwrap();
                    // split columns with selects against zero constants
                    let zero = g.constant(Tensor::zeros(&[rows * (c + 4)]));
                    let cls_mask: Vec<bool> = (0..rows * (c + 4)).map(|i| i % (c + 4) < c).collect();
                    let cls = g.select(cls_mask.clone(), r, zero).unwrap();
                    let reg = g.select(cls_mask.iter().map(|m| !m).collect(), r, zero).unwrap();
                    let cls = g.reshape(cls, &[rows, c + 4]).unwrap();
                    let reg = g.reshape(reg, &[rows, c + 4]).unwrap();
                    let ce = g.cross_entropy(cls, targets.clone(), vec![1.0; rows]).unwrap();
                    let mut t = vec![0.0; rows * (c + 4)];
                    for i in 0..rows {
                        for j in 0..4 {
                            t[i * (c + 4) + c + j] = box_t[i * 4 + j];
                        }
                    }
                    let sl = g.smooth_l1(reg, t, pos.clone(), 0.1).unwrap();
                    g.add(ce, sl).unwrap()
                }),
            )
        }
        other => panic!("no generator for {other}"),
    }
}

#[derive(Debug, Clone)]
pub struct OpReport {
    pub op: &'static str,
    pub cases: usize,
    pub max_rel: f64,
}

pub fn check_op(op: &'static str, cases: usize) -> OpReport {
    let idx = OPS.iter().position(|&o| o == op).expect("known op") as u64;
    let mut max_rel: f64 = 0.0;
    for k in 0..cases as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(idx << 32 | k);
        let mut case = make_case(op, &mut rng);
        max_rel = max_rel.max(case.max_rel_error(&mut rng));
    }
    OpReport { op, cases, max_rel }
}

/// Compares the fake-quant backward pass with the straight-through rule:
/// `∂/∂x = 1` inside the grid and 0 outside, `∂/∂s = round(x/s) − x/s`
/// inside and `n − z` / `m − z` when clipped. Returns the largest absolute
/// deviation over all cases.
pub fn ste_max_error(cases: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for k in 0..cases as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(0x57e << 32 | k);
        let bits = rng.gen_range(2..=8u32);
        let signed = rng.gen_bool(0.5);
        let (qmin, qmax) = if signed {
            (-(1i64 << (bits - 1)), (1i64 << (bits - 1)) - 1)
        } else {
            (0, (1i64 << bits) - 1)
        };
        let per_channel = rng.gen_bool(0.5);
        let shape = vec![rng.gen_range(1..=4), rng.gen_range(1..=3), rng.gen_range(1..=5)];
        let chans = if per_channel { shape[0] } else { 1 };
        let inner: usize = shape[1..].iter().product();
        let scale: Vec<f64> = (0..chans).map(|_| rng.gen_range(0.02..0.5)).collect();
        let zero: Vec<f64> = (0..chans)
            .map(|_| if signed { 0.0 } else { rng.gen_range(qmin..=qmax) as f64 })
            .collect();
        let x = uniform(&mut rng, &shape, -3.0, 3.0);
        let dout = uniform(&mut rng, &shape, -1.0, 1.0);

        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let sv = g.param(Tensor::new(&[chans], scale.clone()).unwrap());
        let axis = if per_channel { Some(0) } else { None };
        let y = g.fake_quant(xv, sv, &zero, qmin as f64, qmax as f64, axis).unwrap();
        let d = g.constant(dout.clone());
        let m = g.mul(y, d).unwrap();
        let l = g.sum(m);
        g.backward(l).unwrap();
        let gx = g.grad(xv).unwrap();
        let gs = g.grad(sv).unwrap();

        let mut want_s = vec![0.0; chans];
        for (i, (&v, &dv)) in x.data().iter().zip(dout.data()).enumerate() {
            let c = if per_channel { i / inner } else { 0 };
            let t = v / scale[c];
            let q = t.round_ties_even() + zero[c];
            let (dx, ds) = if q < qmin as f64 {
                (0.0, qmin as f64 - zero[c])
            } else if q > qmax as f64 {
                (0.0, qmax as f64 - zero[c])
            } else {
                (1.0, t.round_ties_even() - t)
            };
            worst = worst.max((gx.data()[i] - dv * dx).abs());
            want_s[c] += dv * ds;
        }
        for (a, b) in gs.data().iter().zip(&want_s) {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}
