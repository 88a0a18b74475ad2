use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use dunet_core::blocks::BlockKind;
use dunet_core::codec::{pts::read_pts, LandmarkSet};
use dunet_core::data::{generate, load_manifest, load_pts_dataset, save_dataset, Sample, SynthConfig};
use dunet_core::engine::gradcheck::{check_all_ops, check_op, CheckReport, GradCheckConfig, OP_NAMES};
use dunet_core::eval::{
    ced, coherence_probe, evaluate, evaluate_predictions, EvalReport, NmeMode, Predictor, DEFAULT_FAILURE_CUTOFF,
};
use dunet_core::topology::{
    build_model, check_model, export_dot, full_check_model, model_check_config, ModelConfig, TopologyKind,
    TopologySpec,
};
use dunet_core::trainer::{load_checkpoint, save_checkpoint, TrainConfig, Trainer};
use dunet_core::transform::sample_transforms;
use dunet_core::{Error, Result};

/// Stacked dense U-Nets for heatmap landmark localisation.
#[derive(Parser)]
#[command(name = "dunet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parameter count, size and FLOPs of a model, optionally as DOT.
    Inspect(InspectArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Render a synthetic face dataset.
    GenData(GenDataArgs),
    Train(TrainArgs),
    /// NME of a checkpoint or of stored predictions on a dataset.
    Eval(EvalArgs),
    /// Cumulative error distribution of per-sample errors.
    Ced(CedArgs),
    /// Discrepancy between predicting on transformed images and
    /// transforming predictions.
    ProbeCoherence(ProbeArgs),
}

#[derive(Args)]
struct InspectArgs {
    /// Model or topology spec as JSON.
    #[arg(long, required_unless_present = "all")]
    topology: Option<PathBuf>,
    /// Summarise every topology kind at the given width instead.
    #[arg(long, conflicts_with = "topology")]
    all: bool,
    #[arg(long, default_value_t = 128)]
    width: usize,
    #[arg(long, default_value_t = 2)]
    stacks: usize,
    /// Write the scale DAG in Graphviz format here.
    #[arg(long)]
    dot: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, conflicts_with = "full", value_parser = clap::builder::PossibleValuesParser::new(OP_NAMES))]
    op: Option<String>,
    /// Every op plus a two-stack SAT3-CAB model with deformable layers.
    #[arg(long)]
    full: bool,
    #[arg(long, default_value_t = 1e-3)]
    tolerance: f64,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 250)]
    count: usize,
    #[arg(long, default_value_t = 5)]
    landmarks: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.0)]
    occluders: f64,
    /// Image side length.
    #[arg(long, default_value_t = 128)]
    size: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Training config as JSON; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset manifest, a directory holding one, or a directory of
    /// images with `.pts` files.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// JSON-lines training log.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Continue from this checkpoint; its config wins over `--config`.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, required_unless_present = "predictions")]
    checkpoint: Option<PathBuf>,
    /// Directory of `<sample id>.pts` predictions, used instead of a model.
    #[arg(long, conflicts_with = "checkpoint")]
    predictions: Option<PathBuf>,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "bbox_diagonal")]
    nme_mode: NmeMode,
    /// Also write one per-sample error per line here.
    #[arg(long)]
    errors: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum CurveFormat {
    Csv,
    Svg,
}

#[derive(Args)]
struct CedArgs {
    /// One error per line, or an `eval` JSON report.
    #[arg(long)]
    errors: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Defaults to the extension of `--out`.
    #[arg(long)]
    format: Option<CurveFormat>,
    #[arg(long, default_value_t = 0.08)]
    max_threshold: f64,
    #[arg(long, default_value_t = 80)]
    bins: usize,
    #[arg(long, default_value_t = DEFAULT_FAILURE_CUTOFF)]
    failure_cutoff: f64,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Seed of the random transforms, one per sample.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            emit_error("usage", &e.to_string());
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::Inspect(a) => inspect(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ced(a) => ced_cmd(a),
        Command::ProbeCoherence(a) => probe(a),
    };
    match result {
        Ok(v) => {
            let text = serde_json::to_string_pretty(&v).expect("serialisable report");
            // A closed pipe (`dunet ... | head`) is not a failure.
            let _ = writeln!(std::io::stdout().lock(), "{text}");
            ExitCode::SUCCESS
        }
        Err(Failure { code, message }) => {
            emit_error(code, &message);
            ExitCode::FAILURE
        }
    }
}

struct Failure {
    code: &'static str,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: e.code(),
            message: e.to_string(),
        }
    }
}

type CmdResult = std::result::Result<Value, Failure>;

fn emit_error(code: &str, message: &str) {
    let e = json!({ "error": { "code": code, "message": message.trim_end() } });
    eprintln!("{e}");
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Accepts a full model config or a bare topology spec.
fn read_model(path: &Path) -> Result<ModelConfig> {
    let v: Value = read_json(path)?;
    if v.get("topology").is_some() {
        return Ok(serde_json::from_value(v)?);
    }
    let topology: TopologySpec = serde_json::from_value(v)?;
    Ok(ModelConfig {
        input_size: 2 * topology.input_resolution,
        topology,
        n_stacks: 1,
        n_landmarks: 68,
        deformable: false,
    })
}

fn load_dataset(path: &Path, size: usize) -> Result<Vec<Sample>> {
    let manifest = path.join("manifest.json");
    if path.is_dir() && manifest.is_file() {
        load_manifest(&manifest)
    } else if path.is_dir() {
        load_pts_dataset(path, size)
    } else {
        load_manifest(path)
    }
}

fn inspect(a: InspectArgs) -> CmdResult {
    if a.all {
        let mut rows = Vec::new();
        let mut kinds: Vec<(TopologyKind, usize)> = TopologyKind::ALL
            .iter()
            .map(|&k| (k, if matches!(k, TopologyKind::Sat2 | TopologyKind::Sat3) { 3 } else { 4 }))
            .collect();
        kinds.push((TopologyKind::Hourglass, 3));
        for (kind, down) in kinds {
            let cfg = ModelConfig {
                topology: TopologySpec::new(kind, down, a.width, BlockKind::Cab),
                n_stacks: a.stacks,
                n_landmarks: 68,
                deformable: false,
                input_size: 128,
            };
            rows.push(serde_json::to_value(build_model(&cfg)?.summary()?).map_err(Error::from)?);
        }
        return Ok(Value::Array(rows));
    }
    let path = a.topology.expect("clap requires --topology without --all");
    let model = build_model(&read_model(&path)?)?;
    let mut summary = serde_json::to_value(model.summary()?).map_err(Error::from)?;
    summary["deepest_resolution"] = json!(model.dag.deepest_resolution());
    if let Some(dot) = a.dot {
        fs::write(&dot, export_dot(&model.dag)).map_err(|e| Error::io(&dot, e))?;
        summary["dot"] = json!(dot);
    }
    Ok(summary)
}

fn gradcheck(a: GradcheckArgs) -> CmdResult {
    let cfg = GradCheckConfig::default();
    let mut reports: Vec<CheckReport> = match &a.op {
        Some(op) => vec![check_op(op, &cfg)?],
        None => check_all_ops(&cfg)?,
    };
    if a.full {
        reports.push(check_model(&full_check_model(), 2, &model_check_config())?);
    }
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    if let Some(bad) = reports.iter().find(|r| !r.passes(a.tolerance)) {
        return Err(Failure {
            code: "gradcheck",
            message: format!("{}: max relative error {:e} >= {:e}", bad.name, bad.max_rel_error, a.tolerance),
        });
    }
    Ok(json!({ "passed": true, "tolerance": a.tolerance, "max_rel_error": worst, "checks": reports }))
}

fn gen_data(a: GenDataArgs) -> CmdResult {
    let cfg = SynthConfig {
        n_landmarks: a.landmarks,
        seed: a.seed,
        occluder_prob: a.occluders,
        image_size: a.size,
        ..SynthConfig::default()
    };
    let samples = generate(&cfg, a.count)?;
    let manifest = save_dataset(&a.out, &samples)?;
    Ok(json!({
        "out": a.out,
        "samples": manifest.samples.len(),
        "landmarks": manifest.n_landmarks,
        "image_size": manifest.image_size,
    }))
}

fn train(a: TrainArgs) -> CmdResult {
    let mut trainer = match &a.resume {
        Some(p) => load_checkpoint(p)?,
        None => {
            let cfg: TrainConfig = match &a.config {
                Some(p) => read_json(p)?,
                None => TrainConfig::default(),
            };
            Trainer::new(cfg)?
        }
    };
    let data = load_dataset(&a.data, trainer.config.model.input_size)?;
    if data.is_empty() {
        return Err(Error::config("training set is empty").into());
    }
    let mut log = match &a.log {
        Some(p) => {
            let f = fs::OpenOptions::new()
                .create(true)
                .append(a.resume.is_some())
                .write(true)
                .truncate(a.resume.is_none())
                .open(p)
                .map_err(|e| Error::io(p, e))?;
            Some(BufWriter::new(f))
        }
        None => None,
    };
    let reports = trainer.fit(&data, log.as_mut().map(|w| w as &mut dyn Write))?;
    if let (Some(w), Some(p)) = (log.as_mut(), &a.log) {
        w.flush().map_err(|e| Error::io(p, e))?;
    }
    save_checkpoint(&trainer, &a.out)?;
    Ok(json!({
        "checkpoint": a.out,
        "steps": trainer.step,
        "samples": data.len(),
        "final": reports.last(),
    }))
}

fn read_predictions(dir: &Path, samples: &[Sample]) -> Result<Vec<LandmarkSet>> {
    samples
        .iter()
        .map(|s| Ok(LandmarkSet::new(read_pts(&dir.join(format!("{}.pts", s.id)))?)))
        .collect()
}

fn eval(a: EvalArgs) -> CmdResult {
    let report: EvalReport = match (&a.checkpoint, &a.predictions) {
        (Some(ckpt), _) => {
            let t = load_checkpoint(ckpt)?;
            let data = load_dataset(&a.dataset, t.config.model.input_size)?;
            evaluate(&Predictor::new(&t.model, &t.params), &data, &t.config.codec, a.nme_mode)?
        }
        (None, Some(dir)) => {
            let data = load_dataset(&a.dataset, 128)?;
            evaluate_predictions(&read_predictions(dir, &data)?, &data, a.nme_mode)?
        }
        (None, None) => unreachable!("clap requires one source"),
    };
    if let Some(p) = &a.errors {
        let text: String = report.per_sample.iter().map(|(_, e)| format!("{e}\n")).collect();
        fs::write(p, text).map_err(|e| Error::io(p, e))?;
    }
    Ok(serde_json::to_value(report).map_err(Error::from)?)
}

fn read_errors(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if let Ok(report) = serde_json::from_str::<EvalReport>(&text) {
        return Ok(report.per_sample.into_iter().map(|(_, e)| e).collect());
    }
    let source = path.display().to_string();
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim().parse::<f64>().map_err(|e| Error::Parse {
                path: source.clone(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

fn ced_cmd(a: CedArgs) -> CmdResult {
    let format = match a.format {
        Some(f) => f,
        None => match a.out.extension().and_then(|e| e.to_str()) {
            Some("svg") => CurveFormat::Svg,
            Some("csv") => CurveFormat::Csv,
            _ => return Err(Error::config("cannot tell the curve format from --out; pass --format").into()),
        },
    };
    let errors = read_errors(&a.errors)?;
    let curve = ced(&errors, a.max_threshold, a.bins, a.failure_cutoff)?;
    let body = match format {
        CurveFormat::Csv => curve.to_csv(),
        CurveFormat::Svg => curve.to_svg(),
    };
    fs::write(&a.out, body).map_err(|e| Error::io(&a.out, e))?;
    Ok(json!({
        "out": a.out,
        "samples": errors.len(),
        "auc": curve.auc,
        "failure_cutoff": curve.failure_cutoff,
        "failure_rate": curve.failure_rate,
    }))
}

fn probe(a: ProbeArgs) -> CmdResult {
    let t = load_checkpoint(&a.checkpoint)?;
    let data = load_dataset(&a.dataset, t.config.model.input_size)?;
    let transforms = sample_transforms(a.seed, data.len(), &t.config.augment, t.flip_pairs(), t.config.model.input_size);
    let report = coherence_probe(&Predictor::new(&t.model, &t.params), &data, &transforms, &t.config.codec)?;
    Ok(serde_json::to_value(report).map_err(Error::from)?)
}
