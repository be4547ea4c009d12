//! `aotree`: synthesize corpora, train And-Or tree shape models, detect and
//! evaluate.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 solver non-convergence.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aotree::dataset::{DatasetManifest, Split};
use aotree::eval::{
    curve_svg, evaluate_file, fppi_recall, pr_curve, write_curve_csv, ClassMetrics, DetectionFile, DetectionRecord,
    ImageDetections, MetricsReport,
};
use aotree::geometry::EdgeMap;
use aotree::inference::{detect, DetectConfig};
use aotree::learning::{train_with_observer, training_samples, TrainConfig};
use aotree::model::AndOrModel;
use aotree::synth::{generate, CorpusSpec};
use aotree::Error;
use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde_json::json;

#[derive(Parser, Debug)]
#[command(name = "aotree", version, about = "And-Or tree contour shape models")]
struct Cli {
    /// Worker threads for parallel sections (default: available cores).
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Log filter, e.g. `info` or `aotree=debug`. `RUST_LOG` also works.
    #[arg(long, global = true)]
    log_level: Option<String>,

    /// Print default configurations of every subcommand as JSON and exit.
    #[arg(long)]
    config_schema: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Builtin {
    Toy,
    ThreeClass,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus and its manifest.
    Synth {
        /// Corpus spec JSON; see `--config-schema`.
        #[arg(long, conflicts_with = "builtin")]
        spec: Option<PathBuf>,
        #[arg(long, value_enum)]
        builtin: Option<Builtin>,
        /// Overrides the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one class's model from a manifest.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        class: String,
        /// Training config JSON; missing fields take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        max_iters: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Directory receiving one model file per outer iteration.
        #[arg(long)]
        snapshots: Option<PathBuf>,
        /// Per-iteration objective trace (CSV).
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Run a model over edge maps.
    Detect {
        #[arg(long)]
        model: PathBuf,
        /// Class label written into the output.
        #[arg(long, default_value = "object")]
        class: String,
        /// Edge-map files to scan.
        #[arg(long = "edge-map", num_args = 1.., required_unless_present = "manifest")]
        edge_maps: Vec<PathBuf>,
        /// Scan every image of a manifest split instead.
        #[arg(long, conflicts_with = "edge_maps")]
        manifest: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Detection config JSON; missing fields take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Window stride as a fraction of the window size.
        #[arg(long)]
        stride: Option<f64>,
        #[arg(long)]
        scales: Option<usize>,
        #[arg(long)]
        nms: Option<f64>,
        /// Include per-part assignments.
        #[arg(long)]
        latent: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score detection files against a manifest.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long = "detections", num_args = 1.., required = true)]
        detections: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        /// Metrics JSON; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Directory receiving PR and FPPI curves (CSV and SVG) per class.
        #[arg(long)]
        curves: Option<PathBuf>,
    },
    /// Summarize a model, manifest, detection or edge-map file.
    Inspect { path: PathBuf },
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

enum Failure {
    Usage(String),
    Data(String),
    NonConvergence(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidConfig(_) => Failure::Usage(e.to_string()),
            Error::NonConvergence(_) => Failure::NonConvergence(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

type Outcome = Result<(), Failure>;

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: line {}: {e}", path.display(), e.line())))
}

fn write_text(path: &Path, text: &str) -> Outcome {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Failure::Data(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, text).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

/// Writes to standard output, treating a closed pipe as success.
fn emit(text: &str) -> Outcome {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Failure::Data(format!("stdout: {e}"))),
        _ => Ok(()),
    }
}

fn schema() -> serde_json::Value {
    json!({
        "synth": CorpusSpec::toy(0),
        "train": TrainConfig::default(),
        "detect": DetectConfig::default(),
    })
}

fn run_synth(spec: Option<PathBuf>, builtin: Option<Builtin>, seed: Option<u64>, out: &Path) -> Outcome {
    let mut spec = match (spec, builtin) {
        (Some(p), _) => CorpusSpec::load(&p)?,
        (None, Some(Builtin::ThreeClass)) => CorpusSpec::three_class(0),
        (None, _) => CorpusSpec::toy(0),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    log::info!("corpus spec: {}", serde_json::to_string(&spec).unwrap_or_default());
    let m = generate(&spec, out)?;
    eprintln!("wrote {} images and {}", m.items.len(), out.join("manifest.json").display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_train(
    manifest: &Path,
    class: &str,
    config: Option<PathBuf>,
    seed: Option<u64>,
    max_iters: Option<usize>,
    out: &Path,
    snapshots: Option<PathBuf>,
    trace: Option<PathBuf>,
) -> Outcome {
    let mut cfg: TrainConfig = match config {
        Some(p) => read_json(&p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(n) = max_iters {
        cfg.max_outer_iters = n;
    }
    cfg.validate()?;
    log::info!("train config: {}", serde_json::to_string(&cfg).unwrap_or_default());
    let manifest = DatasetManifest::load(manifest)?;
    let samples = training_samples(&manifest, class, &cfg)?;
    if let Some(dir) = &snapshots {
        std::fs::create_dir_all(dir).map_err(|e| Failure::Data(format!("{}: {e}", dir.display())))?;
    }
    let mut snapshot_err = None;
    let output = train_with_observer(samples, &cfg, &mut |snap| {
        log::debug!(
            "iteration {}: objective {:.6} leaves {:?}",
            snap.iteration,
            snap.record.objective,
            snap.record.leaves
        );
        if let Some(dir) = &snapshots {
            if let Err(e) = snap.model.save(&dir.join(format!("iter_{:02}.json", snap.iteration))) {
                snapshot_err.get_or_insert(e);
            }
        }
    })?;
    if let Some(e) = snapshot_err {
        return Err(e.into());
    }
    output.model.save(out)?;
    if let Some(p) = trace {
        output.trace.save_csv(&p)?;
    }
    eprintln!(
        "trained {class}: {} outer iterations, converged {}, model {}",
        output.trace.rows.len(),
        output.trace.converged,
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_detect(
    model: &Path,
    class: String,
    edge_maps: Vec<PathBuf>,
    manifest: Option<PathBuf>,
    split: SplitArg,
    config: Option<PathBuf>,
    stride: Option<f64>,
    scales: Option<usize>,
    nms: Option<f64>,
    latent: bool,
    out: &Path,
) -> Outcome {
    let mut cfg: DetectConfig = match config {
        Some(p) => read_json(&p)?,
        None => DetectConfig::default(),
    };
    if let Some(s) = stride {
        cfg.scales.stride_fraction = s;
    }
    if let Some(n) = scales {
        cfg.scales.num_scales = n;
    }
    if let Some(t) = nms {
        cfg.nms_iou = t;
    }
    cfg.scales.validate()?;
    if !(0.0..=1.0).contains(&cfg.nms_iou) {
        return Err(Failure::Usage("nms must lie in [0, 1]".into()));
    }
    log::info!("detect config: {}", serde_json::to_string(&cfg).unwrap_or_default());
    let model = AndOrModel::load(model)?;
    let inputs: Vec<(String, PathBuf)> = match manifest {
        Some(p) => {
            let m = DatasetManifest::load(&p)?;
            m.items_in(split.into()).map(|(_, it)| (it.path.clone(), m.resolve(it))).collect()
        }
        None => edge_maps.into_iter().map(|p| (p.display().to_string(), p)).collect(),
    };
    let mut images = Vec::new();
    for (name, path) in inputs {
        let map = EdgeMap::load(&path)?;
        let dets = detect(&map, &model, &cfg);
        log::debug!("{name}: {} detections", dets.len());
        images.push(ImageDetections {
            path: name,
            detections: dets.iter().map(|d| DetectionRecord::from_detection(d, latent)).collect(),
        });
    }
    DetectionFile::new(class, images).save(out)?;
    Ok(())
}

fn run_eval(
    manifest: &Path,
    detections: Vec<PathBuf>,
    split: SplitArg,
    iou: f64,
    out: Option<PathBuf>,
    curves: Option<PathBuf>,
) -> Outcome {
    if !(0.0..1.0).contains(&iou) {
        return Err(Failure::Usage("iou must lie in [0, 1)".into()));
    }
    let manifest = DatasetManifest::load(manifest)?;
    let mut classes = Vec::new();
    for path in detections {
        let file = DetectionFile::load(&path)?;
        let eval = evaluate_file(&manifest, split.into(), &file, iou)?;
        if let Some(dir) = &curves {
            let pr = pr_curve(&eval)?;
            let mut csv = Vec::new();
            write_curve_csv(&pr.points, &mut csv).map_err(|e| Failure::Data(e.to_string()))?;
            write_text(&dir.join(format!("{}_curve.csv", file.class)), &String::from_utf8_lossy(&csv))?;
            let pr_xy: Vec<(f64, f64)> = pr.points.iter().map(|p| (p.recall, p.precision)).collect();
            let title = format!("{} PR (AP {:.3})", file.class, pr.ap);
            write_text(&dir.join(format!("{}_pr.svg", file.class)), &curve_svg(&title, "recall", "precision", 1.0, &pr_xy))?;
            let fr = fppi_recall(&eval);
            let x_max = fr.iter().map(|p| p.0).fold(1.0, f64::max);
            let title = format!("{} recall vs FPPI", file.class);
            write_text(&dir.join(format!("{}_fppi.svg", file.class)), &curve_svg(&title, "FPPI", "recall", x_max, &fr))?;
        }
        classes.push(ClassMetrics::from_evaluation(&file.class, &eval)?);
    }
    let report = MetricsReport::new(iou, classes).to_json_string();
    match out {
        Some(p) => write_text(&p, &report),
        None => emit(&report),
    }
}

fn run_inspect(path: &Path) -> Outcome {
    let value: serde_json::Value = read_json(path)?;
    let format = value.get("format").and_then(|f| f.as_str()).unwrap_or("");
    let summary = match format {
        aotree::model::MODEL_FORMAT => {
            let m = AndOrModel::load(path)?;
            let leaves: Vec<usize> = (0..aotree::model::NUM_OR_NODES).map(|i| m.num_active(i)).collect();
            json!({
                "kind": "model",
                "max_leaves": m.max_leaves(),
                "base_window": m.config.base_window,
                "active_leaves": leaves,
                "dim": m.layout().dim(),
                "weight_norm": m.weights().iter().map(|v| v * v).sum::<f64>().sqrt(),
            })
        }
        aotree::dataset::MANIFEST_FORMAT => {
            let m = DatasetManifest::load(path)?;
            let per_class: Vec<serde_json::Value> = m
                .classes
                .iter()
                .map(|c| {
                    let count = |label, split| {
                        m.items.iter().filter(|it| &it.class == c && it.label == label && it.split == split).count()
                    };
                    use aotree::model::Label::{Negative, Positive};
                    json!({
                        "class": c,
                        "train_pos": count(Positive, Split::Train),
                        "train_neg": count(Negative, Split::Train),
                        "test_pos": count(Positive, Split::Test),
                        "test_neg": count(Negative, Split::Test),
                    })
                })
                .collect();
            json!({ "kind": "manifest", "items": m.items.len(), "classes": per_class })
        }
        aotree::eval::DETECTIONS_FORMAT => {
            let f = DetectionFile::load(path)?;
            let total: usize = f.images.iter().map(|im| im.detections.len()).sum();
            let best = f.images.iter().flat_map(|im| &im.detections).map(|d| d.score).fold(f64::NEG_INFINITY, f64::max);
            json!({ "kind": "detections", "class": f.class, "images": f.images.len(), "detections": total, "best_score": best })
        }
        _ if value.get("polylines").is_some() => {
            let m = EdgeMap::load(path)?;
            let length: f64 = m.polylines.iter().map(|p| p.length()).sum();
            json!({ "kind": "edge_map", "width": m.width, "height": m.height, "polylines": m.polylines.len(), "total_length": length })
        }
        _ => return Err(Failure::Data(format!("{}: unrecognized file kind", path.display()))),
    };
    emit(&format!("{}\n", serde_json::to_string_pretty(&summary).unwrap_or_default()))
}

fn dispatch(command: Command) -> Outcome {
    match command {
        Command::Synth { spec, builtin, seed, out } => run_synth(spec, builtin, seed, &out),
        Command::Train { manifest, class, config, seed, max_iters, out, snapshots, trace } => {
            run_train(&manifest, &class, config, seed, max_iters, &out, snapshots, trace)
        }
        Command::Detect { model, class, edge_maps, manifest, split, config, stride, scales, nms, latent, out } => {
            run_detect(&model, class, edge_maps, manifest, split, config, stride, scales, nms, latent, &out)
        }
        Command::Eval { manifest, detections, split, iou, out, curves } => {
            run_eval(&manifest, detections, split, iou, out, curves)
        }
        Command::Inspect { path } => run_inspect(&path),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let mut logger = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"));
    if let Some(level) = &cli.log_level {
        logger.parse_filters(level);
    }
    logger.init();

    if let Some(n) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot set up {n} workers: {e}");
            return ExitCode::from(1);
        }
    }
    if cli.config_schema {
        let text = format!("{}\n", serde_json::to_string_pretty(&schema()).unwrap_or_default());
        return match emit(&text) {
            Ok(()) => ExitCode::SUCCESS,
            Err(_) => ExitCode::from(2),
        };
    }
    let Some(command) = cli.command else {
        eprintln!("error: a subcommand is required (see --help)");
        return ExitCode::from(1);
    };
    match dispatch(command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::NonConvergence(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}
