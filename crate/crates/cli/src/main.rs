//! `pbmr`: convert, synthesize, train, evaluate, predict and plot.
//!
//! Exit status is 0 on success, 1 for invalid input or flags and 2 when a
//! valid job fails while running.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::builder::{PossibleValuesParser, TypedValueParser};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use pbmr::imageize::normalize;
use pbmr::ingest::{generate_synthetic, Dataset, SynthSpec};
use pbmr::metrics::{MetricsReport, Summary};
use pbmr::model::{load_checkpoint, write_tensor_file, ArchConfig, ArchKind};
use pbmr::optim::{OptimizerConfig, OptimizerKind};
use pbmr::plot::{render_comparison, render_curves};
use pbmr::trainer::{input_signature, predict, train, write_run, LossKind, RunReport, TrainConfig, REPORT_FILE};

#[derive(Parser, Debug)]
#[command(name = "pbmr", version, about = "Sensor time series as images, regressed with a small CNN")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Forward-fill and normalize a dataset; dump the images and fill counts.
    Convert(ConvertArgs),
    /// Write a seeded synthetic dataset.
    Synth(SynthArgs),
    /// Cross-validated training; writes report.json, checkpoints and curves.
    Train(TrainArgs),
    /// Score a checkpoint on a labelled dataset.
    Eval(EvalArgs),
    /// Predict targets with a checkpoint.
    Predict(PredictArgs),
    /// Render curves from one or more run directories.
    Plot(PlotArgs),
}

#[derive(Args, Debug)]
struct ConvertArgs {
    /// Dataset directory (manifest.json, samples.csv).
    #[arg(long)]
    data: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Copies of the normalized plane per image.
    #[arg(long, default_value_t = 1)]
    channels: usize,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 7)]
    sensors: usize,
    #[arg(long, default_value_t = 214)]
    time_steps: usize,
    #[arg(long, default_value_t = 2000)]
    samples: usize,
    /// Share of cells dropped, in [0, 1).
    #[arg(long, default_value_t = 0.0)]
    missing_rate: f64,
    /// Reading noise in normalized units; target noise is ten times this.
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, env = "PBMR_SEED", default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory with targets.csv.
    #[arg(long)]
    data: PathBuf,
    /// Network size.
    #[arg(
        long,
        default_value = "tiny",
        value_parser = PossibleValuesParser::new(["tiny", "small", "resmini"]).map(|s| s.parse::<ArchKind>().unwrap())
    )]
    arch: ArchKind,
    /// Update rule.
    #[arg(
        long,
        default_value = "sgd",
        value_parser = PossibleValuesParser::new(["sgd", "adam", "lars"]).map(|s| s.parse::<OptimizerKind>().unwrap())
    )]
    optimizer: OptimizerKind,
    /// Learning rate.
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// SGD momentum.
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    /// L2 weight decay.
    #[arg(long, default_value_t = 0.0)]
    weight_decay: f64,
    /// LARS trust coefficient.
    #[arg(long, default_value_t = 1e-3)]
    trust_coefficient: f64,
    /// Samples per training step.
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = 1000)]
    epochs: usize,
    /// Cross-validation folds.
    #[arg(long, default_value_t = 5)]
    folds: usize,
    /// Training loss.
    #[arg(
        long,
        default_value = "mse",
        value_parser = PossibleValuesParser::new(["mse", "l1"]).map(|s| s.parse::<LossKind>().unwrap())
    )]
    loss: LossKind,
    /// Copies of the normalized plane fed as input channels.
    #[arg(long, default_value_t = 1)]
    channels: usize,
    /// Seeds initialization, folds and batch order.
    #[arg(long, env = "PBMR_SEED", default_value_t = 0)]
    seed: u64,
    /// Folds trained concurrently [default: folds, capped at available cores].
    #[arg(long)]
    jobs: Option<usize>,
    /// Skip the linear-regression and mean-predictor baselines.
    #[arg(long)]
    no_baselines: bool,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint base path, e.g. runs/a/fold_0.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory with targets.csv.
    #[arg(long)]
    data: PathBuf,
    /// Also write the result as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    /// Checkpoint base path, e.g. runs/a/fold_0.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// CSV with columns sample_id,prediction.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PlotArgs {
    /// Run directories; more than one overlays their fold-mean curves.
    #[arg(long = "run", required = true)]
    runs: Vec<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug)]
enum Failure {
    User(String),
    Runtime(String),
}

impl From<pbmr::Error> for Failure {
    fn from(e: pbmr::Error) -> Self {
        if e.is_user_error() {
            Failure::User(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn write_file(path: &Path, contents: &str) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, contents).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn to_json(value: &impl Serialize) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("plain data serializes");
    s.push('\n');
    s
}

fn convert(args: ConvertArgs) -> CliResult {
    let raw = Dataset::load_dir(&args.data)?;
    let data = raw.filled()?;
    let mut images = Vec::with_capacity(data.frames.len());
    for frame in &data.frames {
        let img = normalize(frame, &data.manifest, args.channels)?;
        images.push((frame.sample_id.as_str(), img.shape(), img.data().iter().map(|&v| v as f32).collect::<Vec<f32>>()));
    }
    let tensors: Vec<(&str, &[usize], &[f32])> = images.iter().map(|(id, s, d)| (*id, &s[..], d.as_slice())).collect();
    std::fs::create_dir_all(&args.out).map_err(|e| Failure::Runtime(format!("{}: {e}", args.out.display())))?;
    let sig = input_signature(&data.manifest, args.channels);
    write_tensor_file(&args.out.join("images"), None, Some(&sig), &tensors)?;

    let mut summary = String::from("sensor,filled_cells\n");
    let mut total = 0;
    for (i, sensor) in raw.manifest.sensors.iter().enumerate() {
        let n: usize = raw.frames.iter().map(|f| f.row_missing(i).iter().filter(|&&m| m).count()).sum();
        total += n;
        summary.push_str(&format!("{},{n}\n", sensor.name));
    }
    write_file(&args.out.join("fill_summary.csv"), &summary)?;
    println!("converted {} samples, filled {total} cells", data.frames.len());
    Ok(())
}

fn synth(args: SynthArgs) -> CliResult {
    let spec = SynthSpec {
        sensors: args.sensors,
        time_steps: args.time_steps,
        samples: args.samples,
        missing_rate: args.missing_rate,
        noise: args.noise,
    };
    let s = generate_synthetic(&spec, args.seed)?;
    s.dataset.write_dir(&args.out)?;
    println!("wrote {} samples to {}", spec.samples, args.out.display());
    Ok(())
}

fn train_cmd(args: TrainArgs) -> CliResult {
    let data = Dataset::load_dir(&args.data)?.filled()?;
    let config = TrainConfig {
        batch_size: args.batch_size,
        epochs: args.epochs,
        loss: args.loss,
        folds: args.folds,
        seed: args.seed,
        channels: args.channels,
        optimizer: OptimizerConfig {
            lr: args.lr,
            momentum: args.momentum,
            weight_decay: args.weight_decay,
            trust_coefficient: args.trust_coefficient,
            ..OptimizerConfig::new(args.optimizer)
        },
        arch: ArchConfig::preset(args.arch, args.channels),
        baselines: !args.no_baselines,
    };
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let jobs = args.jobs.unwrap_or(args.folds.min(cores));
    if jobs == 0 {
        return Err(Failure::User("--jobs must be at least 1".into()));
    }
    let out = train(&data, &config, jobs)?;
    write_run(&args.out, &data, &config, jobs, &out)?;
    let s = out.report.summary;
    let r2 = s.r2.map_or("undefined".to_string(), |v| format!("{v:.4}"));
    println!("cv mae {:.4}  rmse {:.4}  r2 {r2}", s.mae, s.rmse);
    if let Some(b) = out.report.baselines {
        println!(
            "baselines: mean-predictor mae {:.4}, linear regression mae {:.4}",
            b.mean_predictor_mae, b.linreg_mae
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalReport<'a> {
    checkpoint: &'a Path,
    data: &'a Path,
    samples: usize,
    metrics: Summary,
}

fn eval(args: EvalArgs) -> CliResult {
    let data = Dataset::load_dir(&args.data)?;
    let targets = data
        .targets()
        .ok_or_else(|| Failure::User(format!("{} lacks a target for some samples", args.data.display())))?;
    let (net, sig) = load_checkpoint(&args.checkpoint)?;
    let pred: Vec<f64> = predict(&net, &data.frames, &data.manifest, sig.as_ref())?
        .into_iter()
        .map(|(_, p)| p)
        .collect();
    let report = EvalReport {
        checkpoint: &args.checkpoint,
        data: &args.data,
        samples: targets.len(),
        metrics: Summary::evaluate(&pred, &targets)?,
    };
    let text = to_json(&report);
    print!("{text}");
    if let Some(out) = &args.out {
        write_file(out, &text)?;
    }
    Ok(())
}

fn predict_cmd(args: PredictArgs) -> CliResult {
    let data = Dataset::load_dir(&args.data)?;
    let (net, sig) = load_checkpoint(&args.checkpoint)?;
    let rows = predict(&net, &data.frames, &data.manifest, sig.as_ref())?;
    let mut csv = String::from("sample_id,prediction\n");
    for (id, p) in &rows {
        csv.push_str(&format!("{id},{p:?}\n"));
    }
    write_file(&args.out, &csv)
}

fn read_run(dir: &Path) -> CliResult<MetricsReport> {
    let path = dir.join(REPORT_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Failure::User(format!("{}: {e}", path.display())))?;
    let report: RunReport =
        serde_json::from_str(&text).map_err(|e| Failure::User(format!("{}: {e}", path.display())))?;
    Ok(report.metrics())
}

fn plot(args: PlotArgs) -> CliResult {
    let written = if let [run] = args.runs.as_slice() {
        render_curves(&read_run(run)?, &args.out)?
    } else {
        let runs = args
            .runs
            .iter()
            .map(|dir| {
                let label = dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
                read_run(dir).map(|r| (label, r))
            })
            .collect::<CliResult<Vec<_>>>()?;
        render_comparison(&runs, &args.out)?
    };
    for path in written {
        println!("{}", path.display());
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Convert(a) => convert(a),
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict_cmd(a),
        Command::Plot(a) => plot(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::User(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
