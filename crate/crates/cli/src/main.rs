use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use uast_cli::experiment::{parse_policy, run_experiment, ExperimentConfig};
use uast_core::{gen_synthetic, write_csv, Shift, SyntheticConfig, SyntheticKind};

#[derive(Parser)]
#[command(
    name = "uast",
    about = "Uncertainty-aware self-training on synthetic and CSV datasets",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the self-training pipeline for every configured seed.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a labeled CSV split.
    Eval(EvalArgs),
    /// Generate a synthetic domain-shift dataset as three CSV files.
    Gen(GenArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the selection policy: variance|confidence|none.
    #[arg(long)]
    selection: Option<String>,
    /// Run only this seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the number of self-training rounds.
    #[arg(long)]
    rounds: Option<usize>,
    /// Run the seeds on parallel threads.
    #[arg(long)]
    parallel_seeds: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Labeled CSV file to score.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct GenArgs {
    /// two_moons | blobs
    #[arg(long)]
    kind: String,
    #[arg(long, default_value_t = 500)]
    n_source: usize,
    #[arg(long, default_value_t = 500)]
    n_target: usize,
    /// Held-out labeled target rows (defaults to n_target).
    #[arg(long)]
    n_test: Option<usize>,
    /// Rotation of the target domain, degrees about the origin.
    #[arg(long)]
    rotation: Option<f64>,
    /// Translation of the target domain: comma-separated reals.
    #[arg(long)]
    translate: Option<String>,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    /// Feature dimension (blobs only).
    #[arg(long)]
    dims: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for labeled.csv, unlabeled.csv, test.csv.
    #[arg(long)]
    out: PathBuf,
}

fn main() {
    env_logger::Builder::from_env(
        env_logger::Env::new().filter_or("UAST_LOG", "error"),
    )
    .format_timestamp(None)
    .init();

    if let Err(err) = run(Cli::parse()) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train(args) => train(args),
        Command::Eval(args) => eval(args),
        Command::Gen(args) => gen(args),
    }
}

fn train(args: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(policy) = &args.selection {
        cfg.round.selection = parse_policy(policy)?;
    }
    if let Some(seed) = args.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(rounds) = args.rounds {
        if rounds == 0 {
            bail!("--rounds must be at least 1");
        }
        cfg.round.rounds = rounds;
    }
    cfg.validate()?;

    let summaries = run_experiment(&cfg, args.parallel_seeds)?;
    for s in &summaries {
        println!(
            "seed {}: stage1 source {:.4}, stage1 target {:.4}, final target {:.4} -> {}",
            s.seed,
            s.stage1_source_accuracy,
            s.stage1_target_accuracy,
            s.final_target_accuracy,
            s.output_dir.display()
        );
    }
    Ok(())
}

fn eval(args: EvalArgs) -> anyhow::Result<()> {
    let report = uast_cli::experiment::eval_report(&args.checkpoint, &args.data)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn gen(args: GenArgs) -> anyhow::Result<()> {
    let kind = match args.kind.as_str() {
        "two_moons" => SyntheticKind::TwoMoons,
        "blobs" => SyntheticKind::Blobs,
        other => bail!("unknown dataset kind `{other}` (expected two_moons|blobs)"),
    };
    let shift = match (args.rotation, &args.translate) {
        (Some(_), Some(_)) => bail!("--rotation and --translate are mutually exclusive"),
        (Some(deg), None) => Shift::RotationDegrees(deg),
        (None, Some(text)) => {
            let parts: Result<Vec<f64>, _> =
                text.split(',').map(|p| p.trim().parse::<f64>()).collect();
            Shift::Translation(parts.context("parsing --translate vector")?)
        }
        (None, None) => Shift::RotationDegrees(0.0),
    };
    let cfg = SyntheticConfig {
        kind,
        n_source: args.n_source,
        n_target: args.n_target,
        n_test: args.n_test,
        shift,
        noise: args.noise,
        dims: args.dims,
        seed: args.seed,
    };
    let data = gen_synthetic(&cfg)?;
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    write_csv(
        &args.out.join("labeled.csv"),
        &data.source.features,
        &data.source.labels,
    )?;
    write_csv(
        &args.out.join("unlabeled.csv"),
        &data.target.features,
        &data.target.labels,
    )?;
    write_csv(&args.out.join("test.csv"), &data.test.features, &data.test.labels)?;
    println!(
        "wrote {} ({} labeled, {} unlabeled, {} test rows)",
        args.out.display(),
        data.source.len(),
        data.target.len(),
        data.test.len()
    );
    Ok(())
}
