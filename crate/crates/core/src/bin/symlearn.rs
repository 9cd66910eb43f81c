use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use symlearn::data::{load_idx, Variant};
use symlearn::error::{Error, Result};
use symlearn::experiment::{
    evaluate_with_transform, prepare_variant, run_experiment, run_suite, write_compare_csv, write_prepared, DataPaths,
    ExperimentConfig, SuiteConfig, TestTransform, VariantConfig,
};
use symlearn::fsutil::atomic_write_json;
use symlearn::symmetry::{group_by_name, invariant_basis, reynolds_operator};
use symlearn::training::load_checkpoint;

/// Learn which symmetries an image dataset has.
#[derive(Parser, Debug)]
#[command(name = "symlearn", version, about)]
struct Cli {
    /// Seed overriding the config: the run seed for `train`, the variant
    /// seed for `prepare` and `compare`, the transform seed for `eval`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Export a group's orbit basis (and optionally its Reynolds matrix) as JSON.
    Group(GroupArgs),
    /// Materialize a dataset variant as IDX files plus a manifest.
    Prepare(PrepareArgs),
    /// Train one model per seed; writes checkpoint, trajectory and summary.
    Train(TrainArgs),
    /// Score a checkpoint on an IDX dataset, optionally transformed.
    Eval(EvalArgs),
    /// Run a models x variants x seeds suite and write an aggregate CSV.
    Compare(CompareArgs),
}

#[derive(Args, Debug)]
struct GroupArgs {
    /// rot90, flip or identity.
    #[arg(long)]
    name: String,
    /// Side of the square grid.
    #[arg(long)]
    n: usize,
    /// Write here instead of stdout.
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// Include the dense Reynolds matrix.
    #[arg(long)]
    reynolds: bool,
}

#[derive(Args, Debug)]
struct PrepareArgs {
    /// JSON file with `data`, `variant` and `output_dir`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    variant: Option<Variant>,
    /// One transform per training image instead of one per class.
    #[arg(long)]
    per_image: bool,
    #[arg(long, env = "SYMLEARN_DATA_DIR")]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, env = "SYMLEARN_DATA_DIR")]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    train_subset: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// IDX image file.
    #[arg(long)]
    images: PathBuf,
    /// IDX label file.
    #[arg(long)]
    labels: PathBuf,
    /// none, rot90 or flip: each image gets an independent random element.
    #[arg(long, default_value = "none")]
    transform: String,
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, env = "SYMLEARN_DATA_DIR")]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Aggregate CSV path; defaults to `<output_dir>/compare.csv`.
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Serialize)]
struct GroupExport {
    name: String,
    dim: usize,
    orbit_sizes: Vec<usize>,
    basis: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    reynolds: Option<Vec<Vec<f64>>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PrepareConfig {
    #[serde(default)]
    data: DataPaths,
    variant: VariantConfig,
    #[serde(default)]
    output_dir: Option<PathBuf>,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::NonFinite { .. } => 4,
        Error::Io { .. } | Error::Idx { .. } | Error::Json(_) | Error::Csv(_) | Error::Checkpoint(_) | Error::Data(_) => 3,
        _ => 2,
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        // A closed reader (e.g. `| head`) is not an error of ours.
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::io(Path::new("<stdout>"), e)),
        _ => Ok(()),
    }
}

fn cmd_group(args: GroupArgs) -> Result<()> {
    let group = group_by_name(&args.name, args.n)?;
    let basis = invariant_basis(&group)?;
    let export = GroupExport {
        name: args.name,
        dim: group.dim(),
        orbit_sizes: basis.orbit_sizes().to_vec(),
        basis: basis.vectors().to_nested(),
        reynolds: if args.reynolds {
            Some(reynolds_operator(&group)?.matrix().to_nested())
        } else {
            None
        },
    };
    match args.output {
        Some(path) => atomic_write_json(&path, &export),
        None => print_json(&export),
    }
}

fn cmd_prepare(args: PrepareArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str::<PrepareConfig>(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => PrepareConfig {
            data: DataPaths::default(),
            variant: VariantConfig::new(
                args.variant
                    .ok_or_else(|| Error::Config("give --variant or --config".into()))?,
                0,
            ),
            output_dir: None,
        },
    };
    if let Some(v) = args.variant {
        cfg.variant.variant = v;
    }
    if args.per_image {
        cfg.variant.per_image = true;
    }
    if let Some(s) = seed {
        cfg.variant.seed = s;
    }
    if args.data_dir.is_some() {
        cfg.data.dir = args.data_dir;
    }
    let root = args
        .output_dir
        .or(cfg.output_dir)
        .unwrap_or_else(|| PathBuf::from("prepared"));
    let prepared = prepare_variant(&cfg.data.load_train()?, &cfg.data.load_test()?, &cfg.variant)?;
    let dir = root.join(cfg.variant.variant.to_string());
    write_prepared(&prepared, &dir)?;
    eprintln!(
        "wrote {} train / {} test images to {}",
        prepared.manifest.train_count,
        prepared.manifest.test_count,
        dir.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg = ExperimentConfig::from_file(&args.config)?;
    if let Some(s) = seed {
        cfg.seeds = vec![s];
    }
    if args.data_dir.is_some() {
        cfg.data.dir = args.data_dir;
    }
    if let Some(dir) = args.output_dir {
        cfg.output_dir = dir;
    }
    if let Some(e) = args.max_epochs {
        cfg.training.max_epochs = e;
    }
    if args.train_subset.is_some() {
        cfg.train_subset = args.train_subset;
    }
    for outcome in run_experiment(&cfg)? {
        let s = outcome.summary(&cfg);
        eprintln!(
            "seed {}: test accuracy {:.4} after {} epochs (best {}){}",
            s.seed,
            s.test_accuracy,
            s.epochs_run,
            s.best_epoch,
            s.final_pi.map(|p| format!(", pi {p:.4?}")).unwrap_or_default()
        );
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs, seed: Option<u64>) -> Result<()> {
    let transform = TestTransform::parse(&args.transform)?;
    let model = load_checkpoint(&args.checkpoint)?;
    let data = load_idx(&args.images, &args.labels)?;
    let report = evaluate_with_transform(&model, &data, transform, seed.unwrap_or(0))?;
    if let Some(path) = &args.output {
        atomic_write_json(path, &report)?;
    }
    print_json(&report)
}

fn cmd_compare(args: CompareArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg = SuiteConfig::from_file(&args.config)?;
    if args.data_dir.is_some() {
        cfg.data.dir = args.data_dir;
    }
    if let Some(dir) = args.output_dir {
        cfg.output_dir = dir;
    }
    if let Some(s) = seed {
        for v in &mut cfg.variants {
            v.seed = s;
        }
    }
    let result = run_suite(&cfg)?;
    let out: &Path = &args.output.unwrap_or_else(|| cfg.output_dir.join("compare.csv"));
    write_compare_csv(&result.rows, out)?;
    for row in result.rows.iter().filter(|r| r.error.is_some()) {
        eprintln!(
            "failed: {} on {} seed {}: {}",
            row.model,
            row.variant,
            row.seed,
            row.error.as_deref().unwrap_or_default()
        );
    }
    if result.failures > 0 {
        return Err(Error::Precondition(format!("{} runs failed", result.failures)));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Group(a) => cmd_group(a),
        Command::Prepare(a) => cmd_prepare(a, cli.seed),
        Command::Train(a) => cmd_train(a, cli.seed),
        Command::Eval(a) => cmd_eval(a, cli.seed),
        Command::Compare(a) => cmd_compare(a, cli.seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
