use std::path::PathBuf;
use std::process::ExitCode;

use amyparc::voxelgrid::Connectivity;
use amyparc_cli::{
    cmd_eval, cmd_features, cmd_gen, cmd_parcellate, cmd_pipeline, cmd_train, with_threads, CliError, Context,
    Overrides, RunConfig,
};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "amyparc", version, about = "Connectivity-based parcellation from streamline-cluster features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; absent keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Smoothing kernel width.
    #[arg(long, global = true)]
    sigma: Option<f64>,
    /// Number of streamline clusters per phantom subject.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Number of parcels.
    #[arg(long, global = true)]
    n: Option<usize>,
    #[arg(long, global = true)]
    lambda: Option<f64>,
    /// Joint-training batch size.
    #[arg(long, global = true)]
    batch: Option<usize>,
    #[arg(long, global = true)]
    guard_fraction: Option<f64>,
    #[arg(long, global = true)]
    no_guard: bool,
    /// Voxel adjacency for dilation and spatial continuity.
    #[arg(long, global = true, value_parser = parse_connectivity)]
    connectivity: Option<Connectivity>,
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// No progress lines on stdout.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom cohort.
    Gen,
    /// Extract feature files from subject files.
    Features {
        #[arg(required = true)]
        subjects: Vec<PathBuf>,
    },
    /// Train a model on feature files.
    Train {
        #[arg(required = true)]
        features: Vec<PathBuf>,
    },
    /// Label feature files with a trained model.
    Parcellate {
        #[arg(long)]
        model: PathBuf,
        #[arg(required = true)]
        features: Vec<PathBuf>,
    },
    /// Score parcellations.
    Eval {
        /// Subject files with ground-truth regions.
        #[arg(long, num_args = 1..)]
        truth: Vec<PathBuf>,
        /// Reference label field in parcellation format.
        #[arg(long)]
        atlas: Option<PathBuf>,
        #[arg(required = true)]
        parcellations: Vec<PathBuf>,
    },
    /// Run every stage on a generated cohort.
    Pipeline {
        /// Reuse the subject files already under <out>/subjects.
        #[arg(long)]
        skip_gen: bool,
    },
}

fn parse_connectivity(s: &str) -> Result<Connectivity, String> {
    let v: u8 = s.parse().map_err(|_| format!("expected 6 or 26, got {s}"))?;
    Connectivity::try_from(v).map_err(|e| e.to_string())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let c = &cli.common;
    let mut config = match &c.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    Overrides {
        seed: c.seed,
        sigma: c.sigma,
        k: c.k,
        n: c.n,
        lambda: c.lambda,
        batch: c.batch,
        guard_fraction: c.guard_fraction,
        no_guard: c.no_guard,
        connectivity: c.connectivity,
    }
    .apply(&mut config);
    let ctx = Context::new(config, c.quiet)?;
    let out = &c.out;
    with_threads(c.threads, || match &cli.command {
        Command::Gen => cmd_gen(&ctx, out).map(|_| ()),
        Command::Features { subjects } => cmd_features(&ctx, subjects, out).map(|_| ()),
        Command::Train { features } => cmd_train(&ctx, features, out).map(|_| ()),
        Command::Parcellate { model, features } => cmd_parcellate(&ctx, model, features, out).map(|_| ()),
        Command::Eval { truth, atlas, parcellations } => cmd_eval(&ctx, parcellations, truth, atlas.as_deref(), out).map(|_| ()),
        Command::Pipeline { skip_gen } => cmd_pipeline(&ctx, out, *skip_gen).map(|record| {
            if !ctx.quiet {
                for s in &record.stages {
                    println!("{:<10} {:>8.2} s", s.stage, s.seconds);
                }
            }
        }),
    })?
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
