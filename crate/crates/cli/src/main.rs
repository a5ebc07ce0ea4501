use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use detquant::detptq::{quantize_network, write_trace, DetPtqConfig, Mode, ScaleMethod};
use detquant::experiments::{default_probe_metrics, probe_layer, scale_sweep, write_probe_csv, ProbeMetric};
use detquant::odol::{ClsFn, LocFn, ODOLConfig};
use detquant::quant::{RoundingSchedule, GRID_POINTS};
use detquant::synthdata::{
    generate_dataset, load_calibration_images, load_dataset, load_model, load_quantized, save_dataset_with,
    save_model, save_quantized, train_toy, SceneSpec, TrainConfig,
};
use detquant::toydet::{
    coco_thresholds, evaluate_map, postprocess, run_batched, Detection, PostprocessConfig, QuantizedModel,
    ToyDetector, ToyDetectorConfig,
};
use detquant::{Error, Result, VERSION};

#[derive(Parser, Debug)]
#[command(name = "detquant", version, about = "Post-training quantization of a toy anchor-based detector")]
struct Cli {
    /// Upper bound on worker threads. The pipeline currently runs on one.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Directory for outputs whose path is not given explicitly.
    #[arg(long, global = true, env = "DETQUANT_OUT_DIR", default_value = "out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic shapes dataset.
    GenData(GenDataArgs),
    /// Train the toy detector on a generated dataset.
    Train(TrainArgs),
    /// Quantize a trained model using unlabeled calibration images.
    Quantize(QuantizeArgs),
    /// Evaluate a (quantized) model on a labeled dataset.
    Eval(EvalArgs),
    /// Quantize one activation under several scale metrics.
    ProbeLayer(ProbeArgs),
    /// Sweep one activation scale and record reconstruction, output and
    /// performance losses.
    ScaleSweep(SweepArgs),
}

#[derive(Args, Debug, Serialize)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    canvas: usize,
    #[arg(long, default_value_t = 5)]
    max_shapes: usize,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Output model file [default: <out-dir>/model.dqm].
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 2e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Labeled dataset for a post-training mAP check.
    #[arg(long)]
    val: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct QuantizeArgs {
    #[arg(long)]
    model: PathBuf,
    /// Dataset directory; only its images are read.
    #[arg(long)]
    calib: PathBuf,
    #[arg(long, default_value_t = 64)]
    calib_count: usize,
    /// Output directory [default: <out-dir>].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Weight/activation bits, e.g. 4/4.
    #[arg(long, default_value = "4/4", value_parser = parse_bits)]
    bits: (u32, u32),
    #[arg(long, default_value = "advanced", value_parser = parse_mode)]
    mode: Mode,
    /// adaptive, minmax, mse, cosine or lp:<p>.
    #[arg(long, default_value = "adaptive", value_parser = parse_metric)]
    metric: ScaleMethod,
    #[arg(long, default_value = "kl", value_parser = parse_cls)]
    cls_fn: ClsFn,
    #[arg(long, default_value = "l1", value_parser = parse_loc)]
    loc_fn: LocFn,
    /// Localization weight [default: 0.1 for l1, 0.001 for iou].
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, default_value_t = 0.05)]
    theta: f64,
    #[arg(long, default_value_t = 100)]
    top_k: usize,
    #[arg(long, default_value_t = 0.5)]
    nms: f64,
    /// Comma-separated candidate exponents.
    #[arg(long, value_delimiter = ',', default_value = "1,1.5,2,2.5,3,3.5,4,4.5")]
    pgrid: Vec<f64>,
    #[arg(long, default_value_t = 500)]
    select_iters: usize,
    #[arg(long, default_value_t = 1000)]
    recon_iters: usize,
    #[arg(long, default_value_t = 3e-4)]
    lr: f64,
    #[arg(long, default_value_t = 3e-3)]
    rounding_lr: f64,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    /// Keep-FP probability for activation dropping during reconstruction;
    /// 0 disables it.
    #[arg(long, default_value_t = 0.5)]
    qdrop: f64,
    /// Calibration images used for the output loss.
    #[arg(long)]
    odol_subset: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Labeled dataset for reporting mAP after quantization.
    #[arg(long)]
    val: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Write mAP JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write per-image detections as JSON lines.
    #[arg(long)]
    detections: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct ProbeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    calib: PathBuf,
    #[arg(long, default_value_t = 64)]
    calib_count: usize,
    #[arg(long)]
    val: PathBuf,
    /// Activation point(s), comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    layer: Vec<String>,
    #[arg(long, default_value_t = 4)]
    bits: u32,
    #[arg(long, value_delimiter = ',', value_parser = parse_probe_metric)]
    metrics: Vec<ProbeMetric>,
    /// Output CSV [default: <out-dir>/probe.csv].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct SweepArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    calib: PathBuf,
    #[arg(long, default_value_t = 64)]
    calib_count: usize,
    #[arg(long)]
    val: PathBuf,
    #[arg(long)]
    layer: String,
    #[arg(long, default_value_t = 4)]
    bits: u32,
    #[arg(long, default_value_t = GRID_POINTS)]
    points: usize,
    #[arg(long, value_delimiter = ',', default_value = "1,1.5,2,2.5,3,3.5,4,4.5")]
    pgrid: Vec<f64>,
    /// Output CSV [default: <out-dir>/sweep_<layer>.csv].
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_bits(s: &str) -> std::result::Result<(u32, u32), String> {
    let (w, a) = s.split_once('/').ok_or("expected W/A, e.g. 4/4")?;
    let w = w.trim().parse().map_err(|_| format!("bad weight bits '{w}'"))?;
    let a = a.trim().parse().map_err(|_| format!("bad activation bits '{a}'"))?;
    Ok((w, a))
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_metric(s: &str) -> std::result::Result<ScaleMethod, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_probe_metric(s: &str) -> std::result::Result<ProbeMetric, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_cls(s: &str) -> std::result::Result<ClsFn, String> {
    match s.to_ascii_lowercase().as_str() {
        "kl" => Ok(ClsFn::Kl),
        "mse" => Ok(ClsFn::Mse),
        _ => Err(format!("unknown classification loss '{s}' (kl, mse)")),
    }
}

fn parse_loc(s: &str) -> std::result::Result<LocFn, String> {
    match s.to_ascii_lowercase().as_str() {
        "l1" => Ok(LocFn::L1),
        "iou" => Ok(LocFn::Iou),
        _ => Err(format!("unknown localization loss '{s}' (l1, iou)")),
    }
}

/// Provenance header shared by every JSON and CSV artifact.
#[derive(Serialize)]
struct Provenance<'a, C: Serialize> {
    tool_version: &'a str,
    command: &'a str,
    seed: Option<u64>,
    config: &'a C,
}

#[derive(Serialize)]
struct Artifact<'a, C: Serialize, R: Serialize> {
    #[serde(flatten)]
    provenance: Provenance<'a, C>,
    result: R,
}

fn provenance<'a, C: Serialize>(command: &'a str, seed: Option<u64>, config: &'a C) -> Provenance<'a, C> {
    Provenance {
        tool_version: VERSION,
        command,
        seed,
        config,
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_json<C: Serialize, R: Serialize>(path: &Path, prov: Provenance<'_, C>, result: R) -> Result<()> {
    let text = serde_json::to_string_pretty(&Artifact {
        provenance: prov,
        result,
    })?;
    write_file(path, format!("{text}\n").as_bytes())
}

/// CSV body preceded by a `# {provenance}` comment line.
fn write_csv<C: Serialize>(path: &Path, prov: Provenance<'_, C>, body: Vec<u8>) -> Result<()> {
    let mut out = format!("# {}\n", serde_json::to_string(&prov)?).into_bytes();
    out.extend(body);
    write_file(path, &out)
}

fn cmd_gen_data(a: &GenDataArgs) -> Result<()> {
    let spec = SceneSpec {
        canvas: a.canvas,
        max_shapes: a.max_shapes,
        ..SceneSpec::default()
    };
    let set = generate_dataset(&spec, a.count, a.seed)?;
    let prov = serde_json::to_value(provenance("gen-data", Some(a.seed), &(a, &spec)))?;
    save_dataset_with(&a.out, &set, Some(prov))?;
    eprintln!("wrote {} images to {}", set.len(), a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    model: PathBuf,
    epoch_loss: Vec<f64>,
    steps: usize,
    val_map50: Option<f64>,
}

fn cmd_train(a: &TrainArgs, out_dir: &Path) -> Result<()> {
    let data = load_dataset(&a.data)?;
    let mut model = ToyDetector::new(ToyDetectorConfig::default(), a.seed)?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let report = train_toy(&mut model, &data, &cfg)?;
    let out = a.out.clone().unwrap_or_else(|| out_dir.join("model.dqm"));
    save_model(&out, &model)?;
    let val_map50 = match &a.val {
        Some(v) => {
            let val = load_dataset(v)?;
            Some(detquant::toydet::evaluate_model(&QuantizedModel::fp(model), &val.images, &val.groundtruth)?)
        }
        None => None,
    };
    let summary = TrainSummary {
        model: out.clone(),
        epoch_loss: report.epoch_loss,
        steps: report.steps,
        val_map50,
    };
    write_json(&out.with_extension("train.json"), provenance("train", Some(a.seed), &(a, &cfg)), &summary)?;
    if let Some(m) = val_map50 {
        eprintln!("validation mAP@0.5 = {m:.4}");
    }
    Ok(())
}

fn quantize_config(a: &QuantizeArgs) -> DetPtqConfig {
    DetPtqConfig {
        weight_bits: a.bits.0,
        act_bits: a.bits.1,
        mode: a.mode,
        metric: a.metric,
        odol: ODOLConfig {
            cls_fn: a.cls_fn,
            loc_fn: a.loc_fn,
            alpha: a.alpha.unwrap_or(a.loc_fn.default_alpha()),
            score_threshold: a.theta,
            top_k: a.top_k,
            nms_threshold: a.nms,
        },
        pgrid: a.pgrid.clone(),
        select_iters: a.select_iters,
        recon_iters: a.recon_iters,
        act_lr: a.lr,
        rounding_lr: a.rounding_lr,
        batch_size: a.batch_size,
        rounding: RoundingSchedule::default(),
        qdrop: (a.qdrop > 0.0).then_some(a.qdrop),
        first_layer_bits: Some(8),
        odol_subset: a.odol_subset,
        grid_points: GRID_POINTS,
        seed: a.seed,
    }
}

fn cmd_quantize(a: &QuantizeArgs, out_dir: &Path) -> Result<()> {
    let cfg = quantize_config(a);
    cfg.validate()?;
    let model = load_model(&a.model)?;
    let calib = load_calibration_images(&a.calib, Some(a.calib_count))?;
    let run = quantize_network(&model, &calib, &cfg)?;
    let mut report = run.report;
    if let Some(v) = &a.val {
        let val = load_dataset(v)?;
        let fp = detquant::toydet::evaluate_model(&QuantizedModel::fp(model.clone()), &val.images, &val.groundtruth)?;
        let q = detquant::toydet::evaluate_model(&run.model, &val.images, &val.groundtruth)?;
        report.attach_validation(fp, q);
        eprintln!("mAP@0.5: fp {fp:.4}, quantized {q:.4}");
    }
    let out = a.out.clone().unwrap_or_else(|| out_dir.to_path_buf());
    save_quantized(&out.join("quantized.dqm"), &run.model)?;
    let prov = || provenance("quantize", Some(a.seed), a);
    write_json(&out.join("report.json"), prov(), &report)?;
    let mut trace = Vec::new();
    write_trace(&mut trace, &run.trace)?;
    write_csv(&out.join("trace.csv"), prov(), trace)?;
    eprintln!("quantized in {:.1}s; outputs in {}", run.seconds, out.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalResult {
    images: usize,
    map50: f64,
    map50_95: f64,
    per_class_ap50: Vec<Option<f64>>,
    quantized: bool,
}

#[derive(Serialize)]
struct DetectionLine<'a> {
    image_id: usize,
    detections: &'a [Detection],
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let model = load_quantized(&a.model)?;
    let data = load_dataset(&a.data)?;
    let outs = run_batched(&model, &data.images, 32)?;
    let pp = PostprocessConfig::default();
    let dets: Vec<Vec<Detection>> = outs.iter().map(|o| postprocess(o, &pp)).collect();
    let k = model.model.config.num_classes;
    let m50 = evaluate_map(&dets, &data.groundtruth, &[0.5], k)?;
    let coco = evaluate_map(&dets, &data.groundtruth, &coco_thresholds(), k)?;
    let result = EvalResult {
        images: data.len(),
        map50: m50.map,
        map50_95: coco.map,
        per_class_ap50: m50.per_class,
        quantized: !model.quant.is_empty(),
    };
    if let Some(path) = &a.detections {
        let mut buf = Vec::new();
        for (i, d) in dets.iter().enumerate() {
            serde_json::to_writer(&mut buf, &DetectionLine {
                image_id: i,
                detections: d,
            })?;
            buf.push(b'\n');
        }
        write_file(path, &buf)?;
    }
    match &a.out {
        Some(path) => write_json(path, provenance("eval", None, a), &result),
        None => {
            let text = serde_json::to_string_pretty(&Artifact {
                provenance: provenance("eval", None, a),
                result: &result,
            })?;
            let _ = writeln!(std::io::stdout(), "{text}");
            Ok(())
        }
    }
}

fn cmd_probe(a: &ProbeArgs, out_dir: &Path) -> Result<()> {
    let model = load_model(&a.model)?;
    let calib = load_calibration_images(&a.calib, Some(a.calib_count))?;
    let val = load_dataset(&a.val)?;
    let metrics = if a.metrics.is_empty() {
        default_probe_metrics()
    } else {
        a.metrics.clone()
    };
    let mut rows = Vec::new();
    for layer in &a.layer {
        rows.extend(probe_layer(&model, &calib, &val, layer, a.bits, &metrics, GRID_POINTS)?);
    }
    let mut body = Vec::new();
    write_probe_csv(&mut body, &rows)?;
    let out = a.out.clone().unwrap_or_else(|| out_dir.join("probe.csv"));
    write_csv(&out, provenance("probe-layer", None, a), body)
}

fn cmd_sweep(a: &SweepArgs, out_dir: &Path) -> Result<()> {
    let model = load_model(&a.model)?;
    let calib = load_calibration_images(&a.calib, Some(a.calib_count))?;
    let val = load_dataset(&a.val)?;
    let sweep = scale_sweep(&model, &calib, &val, &a.layer, a.bits, a.points, &a.pgrid, &ODOLConfig::default())?;
    let mut body = Vec::new();
    sweep.write_csv(&mut body)?;
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| out_dir.join(format!("sweep_{}.csv", a.layer)));
    write_csv(&out, provenance("scale-sweep", None, a), body)
}

fn run(cli: &Cli) -> Result<()> {
    if cli.threads == 0 {
        return Err(Error::InvalidArgument("--threads must be at least 1".into()));
    }
    match &cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a, &cli.out_dir),
        Command::Quantize(a) => cmd_quantize(a, &cli.out_dir),
        Command::Eval(a) => cmd_eval(a),
        Command::ProbeLayer(a) => cmd_probe(a, &cli.out_dir),
        Command::ScaleSweep(a) => cmd_sweep(a, &cli.out_dir),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::debug!("{e:?}");
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
