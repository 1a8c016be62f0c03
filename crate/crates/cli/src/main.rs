use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use sqtrain::checkpoint::{export_quantized, load_checkpoint, load_model, ModelFile};
use sqtrain::config::TrainConfig;
use sqtrain::data::{Dataset, DatasetKind, Split};
use sqtrain::inspect::inspect_network;
use sqtrain::partition::{Granularity, ProbabilityKind};
use sqtrain::quant::QuantKind;
use sqtrain::run::{
    ablation_table, default_cell_rank, load_data, run_ablation, run_training, AblationGrid, Progress,
};
use sqtrain::schedule::ScheduleMode;
use sqtrain::trainer::{evaluate, EvalWeights, PartitionMode, Scheme};
use sqtrain::Error;

/// Train, evaluate, export and inspect stochastic-quantization runs.
#[derive(Parser)]
#[command(name = "sqtrain", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the staged training loop described by a config file.
    Train(TrainArgs),
    /// Print top-1 error and mean loss of a checkpoint or export as JSON.
    Eval(EvalArgs),
    /// Write the quantized codes and scales of a checkpoint.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Print per-row quantization errors and selection probabilities as JSON.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Quantizer to analyse with; defaults to the run's own (twn for fwn runs).
        #[arg(long)]
        quantizer: Option<QuantKind>,
    },
    /// Train every cell of a granularity x partition x probability x schedule grid.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    scheme: Option<String>,
    #[arg(long)]
    schedule: Option<String>,
    #[arg(long)]
    iters_per_stage: Option<String>,
    #[arg(long)]
    data_dir: Option<String>,
    #[arg(long)]
    out_dir: Option<String>,
    /// Any config key, as `key=value`; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Overrides {
    fn apply(&self, config: &mut TrainConfig) -> sqtrain::Result<()> {
        let named = [
            ("seed", self.seed.map(|s| s.to_string())),
            ("scheme", self.scheme.clone()),
            ("schedule", self.schedule.clone()),
            ("iters_per_stage", self.iters_per_stage.clone()),
            ("data_dir", self.data_dir.clone()),
            ("out_dir", self.out_dir.clone()),
        ];
        for (key, value) in named {
            if let Some(v) = value {
                config.set(key, &v)?;
            }
        }
        for pair in &self.set {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{pair}` is not key=value")))?;
            config.set(k.trim(), v.trim())?;
        }
        config.validate()
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
    /// Suppress per-stage progress on standard error.
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Evaluate on a different dataset than the one the model was trained on.
    #[arg(long)]
    dataset: Option<DatasetKind>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long, value_delimiter = ',')]
    granularities: Option<Vec<Granularity>>,
    #[arg(long, value_delimiter = ',')]
    partition_modes: Option<Vec<PartitionMode>>,
    #[arg(long, value_delimiter = ',')]
    prob_fns: Option<Vec<ProbabilityKind>>,
    #[arg(long, value_delimiter = ',')]
    schedules: Option<Vec<ScheduleMode>>,
}

fn load_config(path: &Path, overrides: &Overrides) -> sqtrain::Result<TrainConfig> {
    let mut config = TrainConfig::load(path)?;
    overrides.apply(&mut config)?;
    Ok(config)
}

fn train(args: &TrainArgs) -> sqtrain::Result<()> {
    let config = load_config(&args.config, &args.overrides)?;
    let quiet = args.quiet;
    let summary = run_training(&config, |p| {
        if let (Progress::StageDone(s), false) = (p, quiet) {
            eprintln!(
                "stage {} (r = {}) done at iteration {}: test error {:.2}%",
                s.stage,
                s.ratio,
                s.iteration,
                100.0 * s.test_error
            );
        }
    })?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn eval_split(config: &TrainConfig, args: &EvalArgs) -> sqtrain::Result<Dataset> {
    let mut config = config.clone();
    if let Some(kind) = args.dataset {
        config.dataset = kind;
    }
    if let Some(dir) = &args.data_dir {
        config.data_dir = dir.clone();
    }
    let (train, test) = load_data(&config)?;
    Ok(match args.split {
        Split::Train => train,
        Split::Test => test,
    })
}

fn eval(args: &EvalArgs) -> sqtrain::Result<()> {
    let (config, mut net, weights) = match load_model(&args.checkpoint)? {
        ModelFile::Checkpoint(c) => {
            let scheme = c.config.scheme;
            (c.config, c.trainer.net, EvalWeights::Quantize(scheme))
        }
        ModelFile::Export(m) => (m.config, m.net, EvalWeights::AsStored),
    };
    let data = eval_split(&config, args)?;
    let r = evaluate(&mut net, &data, weights)?;
    let out = json!({
        "top1_error": r.top1_error,
        "mean_loss": r.mean_loss,
        "samples": data.len(),
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn export(checkpoint: &Path, out: &Path) -> sqtrain::Result<()> {
    let c = load_checkpoint(checkpoint)?;
    export_quantized(out, &c.config, &c.trainer.net)
}

fn inspect(checkpoint: &Path, quantizer: Option<QuantKind>) -> sqtrain::Result<()> {
    let c = load_checkpoint(checkpoint)?;
    let kind = quantizer
        .or(c.config.scheme.quant_kind())
        .unwrap_or(QuantKind::Twn);
    let report = inspect_network(&c.trainer.net, kind)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn ablate(args: &AblateArgs) -> sqtrain::Result<()> {
    let config = load_config(&args.config, &args.overrides)?;
    if config.scheme == Scheme::Fwn {
        return Err(Error::Config("key `scheme`: ablation needs a quantizer".into()));
    }
    let full = AblationGrid::full();
    let grid = AblationGrid {
        granularities: args.granularities.clone().unwrap_or(full.granularities),
        partition_modes: args.partition_modes.clone().unwrap_or(full.partition_modes),
        prob_fns: args.prob_fns.clone().unwrap_or(full.prob_fns),
        schedules: args.schedules.clone().unwrap_or(full.schedules),
    };
    let (train, test) = load_data(&config)?;
    let total = grid.cells().len();
    let mut done = 0;
    let results = run_ablation(&config, &grid, &train, &test, |r| {
        done += 1;
        let err = r.test_error.map_or_else(|| "diverged".into(), |e| format!("{:.2}%", 100.0 * e));
        eprintln!("[{done}/{total}] {}: {err}", r.cell.name());
    })?;
    print!("{}", ablation_table(&results));
    if let Some(rank) = default_cell_rank(&results) {
        println!("\ndefault cell rank: {rank} of {}", results.len());
    }
    Ok(())
}

/// 0 success, 1 other failures, 2 config or usage, 3 I/O, 4 bad file
/// format or corrupted file, 5 divergence.
fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        Error::Io(_) => 3,
        Error::Format(_) | Error::Corruption(_) | Error::Json(_) => 4,
        Error::Diverged { .. } => 5,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(args) => train(args),
        Command::Eval(args) => eval(args),
        Command::Export { checkpoint, out } => export(checkpoint, out),
        Command::Inspect {
            checkpoint,
            quantizer,
        } => inspect(checkpoint, *quantizer),
        Command::Ablate(args) => ablate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
