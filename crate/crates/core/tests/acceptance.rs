//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.
//!
//! The toy-scale experiments (4-10) share one trained detector, a 500-image
//! validation set and three 64-image calibration sets.

mod support;

use std::fs;
use std::process::ExitCode;
use std::time::Instant;

use detquant::detptq::{quantize_network, DetPtqConfig, Mode, QuantizationRun, ScaleMethod};
use detquant::experiments::{default_probe_metrics, probe_layer, scale_sweep, write_probe_csv, ODOL_VARIANTS};
use detquant::odol::ODOLConfig;
use detquant::quant::GRID_POINTS;
use detquant::synthdata::{
    generate_dataset, load_calibration_images, load_model, save_dataset, save_model, train_toy, CalibrationSet,
    LabeledSet, SceneSpec, TrainConfig,
};
use detquant::tensor::Tensor;
use detquant::toydet::{evaluate_model, QuantizedModel, ToyDetector, ToyDetectorConfig};
use detquant::Result;

use support::{gradcheck, oracles, qprops};

const SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

struct Bench {
    model: ToyDetector,
    val: LabeledSet,
    map_fp: f64,
}

impl Bench {
    fn calib(&self, seed: u64) -> CalibrationSet {
        generate_dataset(&SceneSpec::default(), 64, 100 + seed).unwrap().calibration(64)
    }

    fn map(&self, qm: &QuantizedModel) -> f64 {
        evaluate_model(qm, &self.val.images, &self.val.groundtruth).unwrap()
    }
}

fn bench() -> Bench {
    let spec = SceneSpec::default();
    let train = generate_dataset(&spec, 2000, 1).unwrap();
    let mut model = ToyDetector::new(ToyDetectorConfig::default(), 0).unwrap();
    train_toy(&mut model, &train, &TrainConfig::default()).unwrap();
    // go through the container like a trained checkpoint would
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("toy.dqm");
    save_model(&path, &model).unwrap();
    let model = load_model(&path).unwrap();
    let val = generate_dataset(&spec, 500, 999).unwrap();
    let map_fp = evaluate_model(&QuantizedModel::fp(model.clone()), &val.images, &val.groundtruth).unwrap();
    Bench { model, val, map_fp }
}

fn w4a4(metric: ScaleMethod, odol: ODOLConfig, seed: u64) -> DetPtqConfig {
    DetPtqConfig {
        metric,
        odol,
        seed,
        ..DetPtqConfig::default()
    }
}

fn gradients() -> Outcome {
    let mut worst = ("", 0.0f64);
    for op in gradcheck::OPS {
        let r = gradcheck::check_op(op, 100);
        if r.max_rel > worst.1 {
            worst = (op, r.max_rel);
        }
    }
    let ste = gradcheck::ste_max_error(100);
    outcome(
        worst.1 < gradcheck::TOL && ste < 1e-10,
        format!(
            "{} ops x 100 cases, worst rel err {:.2e} ({}), STE err {ste:.1e}",
            gradcheck::OPS.len(),
            worst.1,
            worst.0
        ),
    )
}

fn oracle_suite() -> Outcome {
    let nms = oracles::nms_mismatches(1000);
    let stairs = oracles::map_staircases();
    let bad_stairs: Vec<&str> = stairs
        .iter()
        .filter(|s| (s.got - s.want).abs() >= 1e-12)
        .map(|s| s.name)
        .collect();
    let dec = oracles::decode_encode_max_error(10_000);
    let grid = oracles::grid_search_mismatches(500);
    let conv = oracles::conv_max_error(200);
    let pool = oracles::maxpool_mismatches(200);
    outcome(
        nms == 0 && stairs.len() >= 5 && bad_stairs.is_empty() && dec < 1e-6 && grid == 0 && conv < 1e-12 && pool == 0,
        format!(
            "nms mismatches {nms}/1000, AP staircases {}/{} exact {bad_stairs:?}, decode-encode {dec:.1e}, \
             grid vs exhaustive {grid}/500, conv {conv:.1e}, maxpool {pool}",
            stairs.len() - bad_stairs.len(),
            stairs.len()
        ),
    )
}

fn quantizer_props() -> Outcome {
    let inv = qprops::invariant_failures(2000);
    let mono = qprops::monotonicity_violations(10);
    let first = inv.first().cloned().unwrap_or_default();
    outcome(
        inv.is_empty() && mono.is_empty(),
        format!(
            "invariant failures {}/2000 {first}, Laplace s*(p) non-decreasing on {}/10 seeds",
            inv.len(),
            10 - mono.len()
        ),
    )
}

fn near_lossless(b: &Bench) -> Outcome {
    let cfg = DetPtqConfig {
        weight_bits: 8,
        act_bits: 8,
        mode: Mode::Simple,
        metric: ScaleMethod::Mse,
        ..DetPtqConfig::default()
    };
    let run = quantize_network(&b.model, &b.calib(0), &cfg).unwrap();
    let q = b.map(&run.model);
    outcome(
        b.map_fp - q <= 0.01,
        format!("FP {:.4}, W8A8 {q:.4}, drop {:.4}", b.map_fp, b.map_fp - q),
    )
}

/// Final mAP of every W4A4 run: fixed L2 and the four output-loss variants
/// of adaptive selection, per seed.
struct W4A4Table {
    fixed: Vec<f64>,
    variants: Vec<Vec<f64>>,
    labels: Vec<String>,
    seed0_report: String,
}

fn w4a4_table(b: &Bench) -> W4A4Table {
    let mut t = W4A4Table {
        fixed: Vec::new(),
        variants: vec![Vec::new(); ODOL_VARIANTS.len()],
        labels: ODOL_VARIANTS.iter().map(|&(c, l)| ODOLConfig::new(c, l).label()).collect(),
        seed0_report: String::new(),
    };
    for seed in SEEDS {
        let calib = b.calib(seed);
        let run = quantize_network(&b.model, &calib, &w4a4(ScaleMethod::Lp(2.0), ODOLConfig::default(), seed)).unwrap();
        t.fixed.push(b.map(&run.model));
        for (v, &(c, l)) in ODOL_VARIANTS.iter().enumerate() {
            let mut run = quantize_network(&b.model, &calib, &w4a4(ScaleMethod::Adaptive, ODOLConfig::new(c, l), seed)).unwrap();
            let q = b.map(&run.model);
            if v == 0 && seed == 0 {
                run.report.attach_validation(b.map_fp, q);
                t.seed0_report = run.report.to_json().unwrap();
            }
            t.variants[v].push(q);
            eprintln!("  seed {seed} {}: {q:.4} (fixed L2 {:.4})", t.labels[v], t.fixed[t.fixed.len() - 1]);
        }
    }
    t
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn fmt_maps(v: &[f64]) -> String {
    v.iter().map(|m| format!("{m:.4}")).collect::<Vec<_>>().join("/")
}

fn adaptive_benefit(t: &W4A4Table) -> Outcome {
    let ours = &t.variants[0];
    let wins = ours.iter().zip(&t.fixed).filter(|(a, f)| a >= f).count();
    outcome(
        wins >= 2 && mean(ours) >= mean(&t.fixed),
        format!(
            "adaptive {} (mean {:.4}) vs fixed L2 {} (mean {:.4}), adaptive >= fixed on {wins}/3 seeds",
            fmt_maps(ours),
            mean(ours),
            fmt_maps(&t.fixed),
            mean(&t.fixed)
        ),
    )
}

fn ablation(t: &W4A4Table) -> Outcome {
    let ours = mean(&t.variants[0]);
    let others: Vec<String> = t
        .labels
        .iter()
        .zip(&t.variants)
        .skip(1)
        .map(|(l, v)| format!("{l} {:.4}", mean(v)))
        .collect();
    outcome(
        t.variants[1..].iter().all(|v| ours >= mean(v)),
        format!("mean mAP {} {ours:.4}; {}", t.labels[0], others.join(", ")),
    )
}

fn layer_dependent_p(b: &Bench) -> Outcome {
    let calib = b.calib(0);
    let mut rows = Vec::new();
    let mut best = Vec::new();
    for point in b.model.act_points() {
        let r = probe_layer(&b.model, &calib, &b.val, &point, 4, &default_probe_metrics(), GRID_POINTS).unwrap();
        let top = r
            .iter()
            .min_by(|x, y| x.perf_loss.total_cmp(&y.perf_loss))
            .unwrap()
            .metric
            .clone();
        best.push(format!("{point}:{top}"));
        rows.extend(r);
    }
    let mut csv = Vec::new();
    write_probe_csv(&mut csv, &rows).unwrap();
    let header = String::from_utf8(csv).unwrap().lines().next().unwrap_or_default().to_string();
    let cols: Vec<&str> = header.split(',').collect();
    let has_cols = ["metric", "s", "perf_loss"].iter().all(|c| cols.contains(c));
    let mut distinct: Vec<&str> = best.iter().map(|s| s.rsplit(':').next().unwrap()).collect();
    distinct.sort();
    distinct.dedup();
    outcome(
        has_cols && distinct.len() >= 2,
        format!("best metric per layer [{}], CSV header '{header}'", best.join(" ")),
    )
}

fn odol_tracks_perf(b: &Bench) -> Outcome {
    let calib = b.calib(0);
    let points = b.model.act_points();
    let (mut close, mut beats) = (0, 0);
    let mut gaps = Vec::new();
    for point in &points {
        let sw = scale_sweep(&b.model, &calib, &b.val, point, 4, GRID_POINTS, &qprops::P_GRID, &ODOLConfig::default())
            .unwrap();
        let ideal = sw.points[sw.ideal_index()].perf_loss;
        let odol = sw.points[sw.odol_index(0)].perf_loss;
        let mse = sw.points[sw.lp_index(2.0).unwrap()].perf_loss;
        close += usize::from(odol - ideal <= 0.02);
        beats += usize::from(odol <= mse);
        gaps.push(format!("{:.3}", odol - ideal));
    }
    let n = points.len();
    outcome(
        n >= 5 && close * 5 >= n * 4 && beats * 2 > n,
        format!(
            "{n} layers: within 0.02 of ideal on {close}, ODOL <= MSE minimizer on {beats}; gaps [{}]",
            gaps.join(" ")
        ),
    )
}

fn determinism(b: &Bench, t: &W4A4Table) -> Outcome {
    let (c, l) = ODOL_VARIANTS[0];
    let mut run = quantize_network(&b.model, &b.calib(0), &w4a4(ScaleMethod::Adaptive, ODOLConfig::new(c, l), 0)).unwrap();
    let q = b.map(&run.model);
    run.report.attach_validation(b.map_fp, q);
    let again = run.report.to_json().unwrap();
    outcome(
        again == t.seed0_report,
        format!("seed-0 report JSON {} bytes, identical: {}", again.len(), again == t.seed0_report),
    )
}

fn label_free(b: &Bench) -> Outcome {
    // the entry point accepts nothing but the FP model, bare images and a config
    let entry: fn(&ToyDetector, &CalibrationSet, &DetPtqConfig) -> Result<QuantizationRun> = quantize_network;
    let CalibrationSet { images } = CalibrationSet { images: Vec::new() };
    let _: Vec<Tensor> = images;

    let dir = tempfile::tempdir().unwrap();
    let set = generate_dataset(&SceneSpec::default(), 16, 300).unwrap();
    save_dataset(dir.path(), &set).unwrap();
    let cfg = DetPtqConfig {
        mode: Mode::Simple,
        ..DetPtqConfig::default()
    };
    let before = entry(&b.model, &load_calibration_images(dir.path(), None).unwrap(), &cfg).unwrap();
    let ann = dir.path().join("annotations.jsonl");
    fs::remove_file(&ann).unwrap();
    let after = entry(&b.model, &load_calibration_images(dir.path(), None).unwrap(), &cfg).unwrap();
    let same = before.model == after.model && before.report.to_json().unwrap() == after.report.to_json().unwrap();
    outcome(
        same && !ann.exists(),
        format!("signature takes no labels; result unchanged after deleting annotations: {same}"),
    )
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |id: u32, name: &str, t: Instant, o: Outcome| {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        failed += usize::from(!o.pass);
        println!("{tag} [{id}] {name} ({:.0}s): {}", t.elapsed().as_secs_f64(), o.detail);
    };

    let t = Instant::now();
    report(1, "gradient suite", t, gradients());
    let t = Instant::now();
    report(2, "oracle suite", t, oracle_suite());
    let t = Instant::now();
    report(3, "quantizer properties", t, quantizer_props());

    let t = Instant::now();
    let b = bench();
    eprintln!("trained toy detector in {:.0}s, FP mAP {:.4}", t.elapsed().as_secs_f64(), b.map_fp);
    if b.map_fp < 0.6 {
        eprintln!("warning: FP detector is weak, toy-scale results are not meaningful");
    }

    let t = Instant::now();
    report(4, "near-lossless W8A8", t, near_lossless(&b));
    let t = Instant::now();
    let table = w4a4_table(&b);
    report(5, "adaptive p vs fixed L2", t, adaptive_benefit(&table));
    let t = Instant::now();
    report(6, "layer-dependent best metric", t, layer_dependent_p(&b));
    let t = Instant::now();
    report(7, "output loss tracks performance loss", t, odol_tracks_perf(&b));
    let t = Instant::now();
    report(8, "output-loss ablation", t, ablation(&table));
    let t = Instant::now();
    report(9, "determinism", t, determinism(&b, &table));
    let t = Instant::now();
    report(10, "label-freeness", t, label_free(&b));

    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
