mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;
use vdyn_core::coefficients::CoefficientBounds;
use vdyn_core::datagen::{pure_pursuit_drive, Dataset};
use vdyn_core::dynamics::Coef;
use vdyn_core::evaluation::{coefficient_report, open_loop_report, CoefficientReport, OpenLoopReport};
use vdyn_core::mpc::race;
use vdyn_core::pinn::{train, tune, Checkpoint, Estimator, ModelKind, TrainError, Variant};
use vdyn_core::Error;

use config::{resolve_track, RunConfig};

#[derive(Parser)]
#[command(name = "vdyn", version, about = "Vehicle dynamics identification and MPC racing")]
struct Cli {
    /// JSON run configuration; defaults apply to anything it omits.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Drive the simulator and write the training and test CSVs.
    Generate,
    /// Train one model on the training CSV.
    Train {
        /// ddm, dpm-gt, dpm-plus20 or dpm-minus20.
        #[arg(long, default_value = "ddm")]
        model: Variant,
        /// Overrides train.epochs.
        #[arg(long)]
        epochs: Option<usize>,
        /// Checkpoint path (default: <checkpoint_dir>/<model>.json).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Random hyperparameter search.
    Tune {
        /// Number of trials.
        #[arg(long, default_value_t = 20)]
        budget: usize,
        /// ddm, dpm-gt, dpm-plus20 or dpm-minus20.
        #[arg(long, default_value = "ddm")]
        model: Variant,
    },
    /// Open-loop metrics and mean coefficients on the test CSV.
    Eval {
        /// Checkpoint file, or `gt` for the simulator's true coefficients.
        #[arg(long)]
        checkpoint: String,
        /// Rollout horizon for ADE/FDE; overrides eval.horizon_ms.
        #[arg(long)]
        horizon_ms: Option<f64>,
        /// Dataset to evaluate on (default: the configured test CSV).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Closed-loop race on the simulator.
    Race {
        /// Checkpoint file, or `gt` for the simulator's true coefficients.
        #[arg(long)]
        checkpoint: String,
        /// Overrides race.laps.
        #[arg(long)]
        laps: Option<usize>,
        /// `track1`, `track2` or a track JSON file.
        #[arg(long)]
        track: Option<String>,
    },
    /// Print the fully resolved configuration.
    PrintConfig,
}

enum Failure {
    Config(String),
    Data(String),
    Diverged(String),
    RaceAbort(String),
    Other(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Other(_) => 1,
            Failure::Config(_) => 2,
            Failure::Data(_) => 3,
            Failure::Diverged(_) => 4,
            Failure::RaceAbort(_) => 5,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Data(m) | Failure::Diverged(m) | Failure::RaceAbort(m) | Failure::Other(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::InvalidValue { .. } => Failure::Config(msg),
            Error::CsvSchema { .. }
            | Error::CsvNan { .. }
            | Error::CsvNonMonotone { .. }
            | Error::InsufficientData(_)
            | Error::Generation { .. }
            | Error::Checkpoint(_)
            | Error::Io { .. }
            | Error::Json { .. } => Failure::Data(msg),
            Error::Divergence { .. } => Failure::Diverged(msg),
            Error::RaceAbort { .. } => Failure::RaceAbort(msg),
            _ => Failure::Other(msg),
        }
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(|e| Failure::Config(e.to_string()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.resolve_seeds();
    Ok(cfg)
}

fn run(cli: Cli) -> Outcome {
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::Generate => {
            validate(&cfg)?;
            generate(&cfg)
        }
        Command::Train { model, epochs, out } => {
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            validate(&cfg)?;
            train_cmd(&cfg, model, out)
        }
        Command::Tune { budget, model } => {
            validate(&cfg)?;
            tune_cmd(&cfg, budget, model)
        }
        Command::Eval {
            checkpoint,
            horizon_ms,
            data,
        } => {
            if let Some(h) = horizon_ms {
                cfg.eval.horizon_ms = h;
            }
            validate(&cfg)?;
            eval_cmd(&cfg, &checkpoint, data)
        }
        Command::Race { checkpoint, laps, track } => {
            if let Some(l) = laps {
                cfg.race.laps = l;
            }
            if let Some(t) = track {
                cfg.race_track = t;
            }
            validate(&cfg)?;
            race_cmd(&cfg, &checkpoint)
        }
        Command::PrintConfig => {
            validate(&cfg)?;
            println!("{}", cfg.to_json());
            Ok(())
        }
    }
}

fn validate(cfg: &RunConfig) -> Outcome {
    cfg.validate().map_err(Failure::Config)
}

fn bounds(cfg: &RunConfig) -> Result<CoefficientBounds, Failure> {
    cfg.bounds().map_err(|e| Failure::Config(format!("bounds: {e}")))
}

fn ensure_parent(path: &Path) -> Outcome {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Failure::Data(format!("{}: {e}", dir.display())))?;
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Outcome {
    ensure_parent(path)?;
    std::fs::write(path, text).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Outcome {
    write_text(path, &serde_json::to_string_pretty(value).expect("report serialises"))
}

fn generate(cfg: &RunConfig) -> Outcome {
    let jobs = [
        ("train", &cfg.data.train_track, &cfg.data.train_drive, cfg.data.train_rows, &cfg.paths.train_data),
        ("test", &cfg.data.test_track, &cfg.data.test_drive, cfg.data.test_rows, &cfg.paths.test_data),
    ];
    for (label, track, drive, rows, path) in jobs {
        let track = resolve_track(track)?;
        let full = pure_pursuit_drive(&track, &cfg.vehicle, &cfg.ground_truth, drive)?;
        if full.len() < rows {
            return Err(Failure::Data(format!(
                "{label} run produced {} rows, fewer than the {rows} requested",
                full.len()
            )));
        }
        let data = full.tail(rows);
        ensure_parent(path)?;
        data.save_csv(path)?;
        println!("{label}: {} rows -> {}", data.len(), path.display());
    }
    Ok(())
}

fn model_kind(cfg: &RunConfig, variant: Variant) -> Result<ModelKind, Failure> {
    Ok(ModelKind::new(variant, cfg.ground_truth[Coef::Iz])?)
}

fn train_cmd(cfg: &RunConfig, variant: Variant, out: Option<PathBuf>) -> Outcome {
    let data = Dataset::load_csv(&cfg.paths.train_data)?;
    let kind = model_kind(cfg, variant)?;
    let bounds = bounds(cfg)?;
    let out = out.unwrap_or_else(|| cfg.paths.checkpoint_dir.join(format!("{}.json", variant.name())));
    let report_path = cfg.paths.report_dir.join(format!("train-{}.json", variant.name()));
    match train(&data, &cfg.train, &bounds, kind, &cfg.vehicle) {
        Ok((model, report)) => {
            ensure_parent(&out)?;
            Checkpoint::new(Estimator::Network(Box::new(model)), Some(cfg.train.clone())).save(&out)?;
            write_json(&report_path, &report)?;
            println!(
                "{}: best validation loss {:.4e} at epoch {} -> {}",
                variant.name(),
                report.best_validation_loss,
                report.best_epoch,
                out.display()
            );
            Ok(())
        }
        Err(TrainError::Invalid(e)) => Err(e.into()),
        Err(TrainError::Diverged {
            epoch,
            reason,
            last_finite,
            report,
        }) => {
            let path = out.with_extension("last-finite.json");
            ensure_parent(&path)?;
            Checkpoint::new(Estimator::Network(last_finite), Some(cfg.train.clone())).save(&path)?;
            write_json(&report_path, &report)?;
            Err(Failure::Diverged(format!(
                "training diverged in epoch {epoch}: {reason}; last finite model saved to {}",
                path.display()
            )))
        }
    }
}

fn tune_cmd(cfg: &RunConfig, budget: usize, variant: Variant) -> Outcome {
    let data = Dataset::load_csv(&cfg.paths.train_data)?;
    let kind = model_kind(cfg, variant)?;
    let bounds = bounds(cfg)?;
    let result = tune(&data, &cfg.train, &cfg.search, budget, cfg.seed, &bounds, kind, &cfg.vehicle)?;
    let trials = cfg.paths.report_dir.join(format!("tune-{}.csv", variant.name()));
    ensure_parent(&trials)?;
    result.save_trials_csv(&trials)?;
    let best = cfg.paths.report_dir.join(format!("tune-{}-best.json", variant.name()));
    write_json(&best, &result.best)?;
    let t = &result.trials[result.best_trial];
    println!(
        "best trial {} of {}: validation loss {:.4e}; config -> {}",
        result.best_trial,
        result.trials.len(),
        t.validation_loss.unwrap_or(f64::NAN),
        best.display()
    );
    Ok(())
}

fn load_estimator(cfg: &RunConfig, spec: &str) -> Result<Estimator, Failure> {
    if spec == "gt" {
        return Ok(Estimator::fixed(cfg.ground_truth));
    }
    Ok(Checkpoint::load(spec)?.estimator)
}

#[derive(Serialize)]
struct EvalReport {
    open_loop: OpenLoopReport,
    coefficients: CoefficientReport,
}

fn eval_cmd(cfg: &RunConfig, checkpoint: &str, data: Option<PathBuf>) -> Outcome {
    let est = load_estimator(cfg, checkpoint)?;
    let path = data.unwrap_or_else(|| cfg.paths.test_data.clone());
    let data = Dataset::load_csv(&path)?;
    let bounds = bounds(cfg)?;
    let open_loop = open_loop_report(&est, &cfg.vehicle, &data, cfg.eval.horizon_ms / 1000.0)?;
    let coefficients = coefficient_report(&est, &data, &bounds, Some(&cfg.ground_truth))?;
    let m = &open_loop.one_step;
    let h = &open_loop.horizon;
    println!("model {} on {} ({} windows)", est.name(), path.display(), m.samples);
    println!(
        "one-step RMSE  v_x {:.4e}  v_y {:.4e}  omega {:.4e}",
        m.rmse.v_x, m.rmse.v_y, m.rmse.omega
    );
    println!(
        "one-step max   v_x {:.4e}  v_y {:.4e}  omega {:.4e}",
        m.eps_max.v_x, m.eps_max.v_y, m.eps_max.omega
    );
    println!(
        "{:.0} ms rollout  ADE {:.4e}  FDE {:.4e}  ({} starts, {} skipped, {} failed)",
        h.horizon_s * 1000.0,
        h.ade,
        h.fde,
        h.starts,
        h.skipped,
        h.failed
    );
    print!("{}", coefficients.table());
    let out = cfg.paths.report_dir.join(format!("eval-{}.json", est.name()));
    write_json(&out, &EvalReport { open_loop, coefficients })
}

fn race_cmd(cfg: &RunConfig, checkpoint: &str) -> Outcome {
    let est = load_estimator(cfg, checkpoint)?;
    let track = resolve_track(&cfg.race_track)?;
    let report = race(&track, &est, &cfg.vehicle, &cfg.ground_truth, &cfg.mpc, &cfg.race)?;
    let stem = cfg.paths.report_dir.join(format!("race-{}", est.name()));
    write_text(&stem.with_extension("json"), &report.summary_json())?;
    write_text(&stem.with_extension("csv"), &report.trace_csv())?;
    println!("{}", report.summary_json());
    match report.abort_reason {
        None => Ok(()),
        Some(reason) => Err(Failure::RaceAbort(format!(
            "race aborted at t = {:.2} s: {reason}",
            report.elapsed
        ))),
    }
}
