//! Quantizer invariants shared by the property tests and the acceptance run.

use detquant::quant::{grid_search_local, AffineQuantizer, Granularity, Metric};
use detquant::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Idempotence, range, grid membership and the Δp = Δc + Δr split.
pub fn check_invariants(x: &Tensor, q: &AffineQuantizer) -> Result<(), String> {
    let xq = q.fake_quantize(x);
    let again = q.fake_quantize(&xq);
    if again.data() != xq.data() {
        return Err("fake_quantize is not idempotent".into());
    }
    let (n, m) = (q.qmin() as f64, q.qmax() as f64);
    let per = match q.granularity {
        Granularity::PerTensor => x.numel(),
        Granularity::PerChannel => x.numel() / x.shape()[0],
    };
    let rep = q.perturbation(x);
    for (i, (&v, &vq)) in x.data().iter().zip(xq.data()).enumerate() {
        let c = i / per;
        let (s, z) = (q.scale[c], q.zero_point[c] as f64);
        if vq < s * (n - z) || vq > s * (m - z) {
            return Err(format!("element {i}: {vq} outside [{}, {}]", s * (n - z), s * (m - z)));
        }
        let code = vq / s + z;
        if (code - code.round()).abs() > 1e-9 {
            return Err(format!("element {i}: code {code} is off the grid"));
        }
        let (dr, dc, dp) = (rep.delta_round.data()[i], rep.delta_clip.data()[i], rep.delta_total.data()[i]);
        if (dp - (dc + dr)).abs() > 1e-12 {
            return Err(format!("element {i}: Δp {dp} != Δc {dc} + Δr {dr}"));
        }
        if (dp - (v - vq)).abs() > 1e-12 {
            return Err(format!("element {i}: Δp {dp} != x - x^q {}", v - vq));
        }
        let inside = ((v / s).round_ties_even() + z) >= n && ((v / s).round_ties_even() + z) <= m;
        if inside && dc != 0.0 {
            return Err(format!("element {i}: in-range value has clipping error {dc}"));
        }
    }
    Ok(())
}

/// Random quantizer and tensor for the seeded invariant sweep.
pub fn random_instance(rng: &mut ChaCha8Rng) -> (Tensor, AffineQuantizer) {
    let shape = vec![rng.gen_range(1..=4), rng.gen_range(1..=8)];
    let n: usize = shape.iter().product();
    let spread = rng.gen_range(0.01..10.0);
    let x = Tensor::new(&shape, (0..n).map(|_| rng.gen_range(-spread..spread)).collect()).unwrap();
    let bits = rng.gen_range(2..=8);
    let mut q = if rng.gen_bool(0.5) {
        AffineQuantizer::init_symmetric(&x, bits, Granularity::PerChannel).unwrap()
    } else {
        AffineQuantizer::init_minmax(&x, bits, false, Granularity::PerTensor).unwrap()
    };
    // shrink scales so clipping happens
    let shrink = rng.gen_range(0.2..1.0);
    let lo = x.min();
    for c in 0..q.channels() {
        let s = q.scale[c] * shrink;
        q.set_scale(c, s, lo);
    }
    (x, q)
}

pub fn invariant_failures(cases: usize) -> Vec<String> {
    let mut out = Vec::new();
    for k in 0..cases as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(0x9a9 << 32 | k);
        let (x, q) = random_instance(&mut rng);
        if let Err(e) = check_invariants(&x, &q) {
            out.push(format!("case {k}: {e}"));
        }
    }
    out
}

/// Zero-mean Laplace samples with scale `b` (inverse CDF).
pub fn laplace(rng: &mut ChaCha8Rng, n: usize, b: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.gen_range(-0.5..0.5);
            -b * u.signum() * (1.0 - 2.0 * u.abs()).ln()
        })
        .collect()
}

pub const P_GRID: [f64; 8] = [1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 4.5];

/// Optimal 4-bit scale for each p on a Laplace tensor; also checks that no
/// searched scale exceeds the Min-Max one.
pub fn laplace_scales(seed: u64) -> (Vec<f64>, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::from_vec(laplace(&mut rng, 4096, 1.0)).unwrap();
    let init = AffineQuantizer::init_minmax(&x, 4, true, Granularity::PerTensor).unwrap();
    let scales = P_GRID
        .iter()
        .map(|&p| grid_search_local(&x, &init, Metric::Lp(p), 100).0.scale[0])
        .collect();
    (scales, init.scale[0])
}

/// Seeds whose optimal scale decreases somewhere along P.
pub fn monotonicity_violations(seeds: u64) -> Vec<(u64, Vec<f64>)> {
    (0..seeds)
        .map(laplace_scales)
        .enumerate()
        .filter(|(_, (s, s_max))| s.windows(2).any(|w| w[1] < w[0]) || s.iter().any(|v| v > s_max))
        .map(|(i, (s, _))| (i as u64, s))
        .collect()
}
