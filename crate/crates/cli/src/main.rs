use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cloudkd::pipeline::{
    cmd_benchmark, cmd_distill, cmd_evaluate, cmd_export_logits, cmd_predict, cmd_prepare, cmd_train_teacher,
    PrepareSource, RunConfig, TrainSummary,
};
use cloudkd::Result;

/// Compact cloud-segmentation U-Nets distilled from large teachers.
#[derive(Parser, Debug)]
#[command(name = "cloudkd", version)]
struct Cli {
    /// Flat `key = value` run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory (default: `output_dir` from the config, else `run`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build dataset splits under `<out>/data`.
    Prepare(PrepareArgs),
    /// Train the teacher architecture with plain cross-entropy.
    TrainTeacher,
    /// Write teacher logits for the training split.
    ExportLogits,
    /// Train the student against labels and teacher logits.
    Distill,
    /// Tiled inference on the test split.
    Predict,
    /// Score predictions against test masks.
    Evaluate,
    /// Time student inference on the test split.
    Benchmark,
}

#[derive(Args, Debug)]
struct PrepareArgs {
    /// Generate the bundled synthetic train/test splits.
    #[arg(long, conflicts_with = "raw")]
    synthetic: bool,
    /// Directory of `<id>.cbsk` images with matching `<id>.cmsk` masks.
    #[arg(long, required_unless_present = "synthetic")]
    raw: Option<PathBuf>,
    /// Split name for raw input.
    #[arg(long, default_value = "train")]
    split: String,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let fallback = cli.out.clone().unwrap_or_else(|| PathBuf::from("run"));
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path, fallback)?,
        None => RunConfig::new(fallback),
    };
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.finish()?;
    Ok(cfg)
}

fn report_training(what: &str, s: &TrainSummary) {
    let last = s.history.epochs.last().expect("at least one epoch");
    let best = s.history.best().expect("at least one epoch");
    println!(
        "{what}: {} parameters, {} epochs, final loss {:.6}, best val JI {:.4} at epoch {}",
        s.param_count,
        s.history.epochs.len(),
        last.total_loss,
        best.val_ji,
        s.best_epoch
    );
    println!("weights: {}", s.weights.display());
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Prepare(args) => {
            let source = match &args.raw {
                Some(dir) => PrepareSource::Raw(dir.clone()),
                None => PrepareSource::Synthetic { seed: cfg.seed },
            };
            for d in cmd_prepare(&source, &cfg.output_dir, &args.split)? {
                println!("{}: {} patches", d.root.display(), d.ids.len());
            }
        }
        Command::TrainTeacher => report_training("teacher", &cmd_train_teacher(&cfg)?),
        Command::ExportLogits => println!("logits: {}", cmd_export_logits(&cfg)?.display()),
        Command::Distill => report_training("student", &cmd_distill(&cfg)?),
        Command::Predict => {
            let written = cmd_predict(&cfg)?;
            println!("{} masks in {}", written.len(), cfg.predictions_dir().display());
        }
        Command::Evaluate => {
            let summary = cmd_evaluate(&cfg)?;
            for (class, ji) in &summary.pooled {
                println!("class {class}: pooled JI {ji:.4}");
            }
            println!("reports: {}", cfg.reports_dir().display());
        }
        Command::Benchmark => {
            let r = cmd_benchmark(&cfg)?;
            println!(
                "{} parameters, {:.2} patches/s, median scene latency {:.2} ms",
                r.param_count, r.patches_per_sec, r.median_latency_ms
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
