use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use patchlab_cli::commands::{self, EvalInput, ExtractArgs, HistogramArgs, Task};
use patchlab_cli::config::RunConfigFile;
use patchlab_cli::CliError;

#[derive(Parser)]
#[command(name = "patchlab", version, about = "Train, extract, evaluate and analyse local patch descriptors")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a descriptor network (config file plus flag overrides)
    Train(TrainArgs),
    /// Compute descriptors for every patch of a container
    Extract(ExtractCli),
    /// Verification / matching / retrieval metrics
    Evaluate(EvaluateCli),
    /// Gradient-geometry analyses, written as CSV
    Analyze {
        #[command(subcommand)]
        mode: AnalyzeCmd,
    },
    /// Run the oracle suite; exit 1 naming any failing property
    Verify {
        /// Deliberately break one gradient to check the suite (norm-inner-sign)
        #[arg(long, value_name = "FAULT")]
        inject_fault: Option<String>,
    },
    /// Write a synthetic dataset in the UBC patch container format
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        identities: usize,
        #[arg(long, default_value_t = 3)]
        patches_per_identity: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// TOML run config; built-in defaults (listed below) when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides train.seed
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides train.epochs
    #[arg(long)]
    epochs: Option<usize>,
    /// Overrides train.batch_identities
    #[arg(long)]
    batch_identities: Option<usize>,
    /// Overrides train.learning_rate
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Overrides train.scale (1/4, 1/2, 1)
    #[arg(long)]
    scale: Option<String>,
    /// Overrides train.norm (frn, bn, in)
    #[arg(long)]
    norm: Option<String>,
    /// Overrides loss.variant (hybrid, pure-s, pure-d, loss-a, loss-b)
    #[arg(long)]
    loss: Option<String>,
    /// Overrides loss.gamma_reg
    #[arg(long)]
    gamma_reg: Option<f64>,
    /// Overrides loss.alpha
    #[arg(long)]
    alpha: Option<f64>,
    /// UBC container directory; sets data.source = "ubc"
    #[arg(long)]
    data: Option<PathBuf>,
    /// Overrides data.identities (synthetic data)
    #[arg(long)]
    identities: Option<usize>,
    /// Overrides output.dir
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides output.precision (32 or 64)
    #[arg(long)]
    precision: Option<u32>,
    /// Continue from the state files in the output directory
    #[arg(long)]
    resume: bool,
    /// Print the resolved config and exit
    #[arg(long)]
    print_config: bool,
}

#[derive(Args)]
struct ExtractCli {
    #[arg(long)]
    checkpoint: PathBuf,
    /// UBC container directory
    #[arg(long)]
    patches: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Expected scale; a mismatch with the checkpoint is a census error
    #[arg(long)]
    scale: Option<String>,
    /// Expected normalization scheme
    #[arg(long)]
    norm: Option<String>,
    #[arg(long, default_value_t = 32)]
    precision: u32,
}

#[derive(Args)]
struct EvaluateCli {
    /// Descriptor file written by `extract`
    #[arg(long, conflicts_with_all = ["checkpoint", "patches"])]
    descriptors: Option<PathBuf>,
    #[arg(long, requires = "patches")]
    checkpoint: Option<PathBuf>,
    #[arg(long, requires = "checkpoint")]
    patches: Option<PathBuf>,
    /// verification, matching, retrieval or all
    #[arg(long, default_value = "all")]
    task: String,
    /// Also write the metrics CSV here
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    precision: u32,
}

#[derive(Subcommand)]
enum AnalyzeCmd {
    /// g_s, g_d and g_H per alpha over theta in (0, pi]
    Curves {
        /// Comma-separated alphas
        #[arg(long, default_value = "0,0.5,1,2,4,16")]
        alphas: String,
        #[arg(long, default_value_t = 512)]
        resolution: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Histogram of mined positive and negative angles
    Histogram {
        #[arg(long)]
        checkpoint: PathBuf,
        /// UBC container; synthetic data when omitted
        #[arg(long)]
        patches: Option<PathBuf>,
        /// Synthetic identities when no container is given
        #[arg(long, default_value_t = 2000)]
        identities: usize,
        #[arg(long, default_value_t = 100)]
        batches: usize,
        #[arg(long, default_value_t = 128)]
        batch_identities: usize,
        #[arg(long, default_value_t = 36)]
        bins: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parallel/orthogonal gradient audit over random pairs
    Decompose {
        #[arg(long, default_value_t = 1000)]
        pairs: usize,
        #[arg(long, default_value_t = 128)]
        dim: usize,
        #[arg(long, default_value_t = 2.0)]
        alpha: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn resolve_train(a: &TrainArgs) -> Result<RunConfigFile, CliError> {
    let mut c = match &a.config {
        Some(p) => RunConfigFile::load(p)?,
        None => RunConfigFile::default(),
    };
    if let Some(v) = a.seed {
        c.train.seed = v;
    }
    if let Some(v) = a.epochs {
        c.train.epochs = v;
    }
    if let Some(v) = a.batch_identities {
        c.train.batch_identities = v;
    }
    if let Some(v) = a.learning_rate {
        c.train.learning_rate = v;
    }
    if let Some(v) = &a.scale {
        c.train.scale = v.clone();
    }
    if let Some(v) = &a.norm {
        c.train.norm = v.clone();
    }
    if let Some(v) = &a.loss {
        c.loss.variant = v.clone();
    }
    if let Some(v) = a.gamma_reg {
        c.loss.gamma_reg = v;
    }
    if let Some(v) = a.alpha {
        c.loss.alpha = v;
    }
    if let Some(v) = &a.data {
        c.data.source = "ubc".into();
        c.data.path = Some(v.clone());
    }
    if let Some(v) = a.identities {
        c.data.identities = v;
    }
    if let Some(v) = &a.out {
        c.output.dir = v.clone();
    }
    if let Some(v) = a.precision {
        c.output.precision = v;
    }
    // Re-validate the merged result.
    RunConfigFile::parse(&c.to_toml())
}

fn run(cli: Cli) -> Result<String, CliError> {
    match cli.cmd {
        Cmd::Train(a) => {
            let cfg = resolve_train(&a)?;
            if a.print_config {
                return Ok(cfg.to_toml());
            }
            commands::train_cmd(&cfg, a.resume)
        }
        Cmd::Extract(a) => commands::extract_cmd(&ExtractArgs {
            checkpoint: &a.checkpoint,
            patches: &a.patches,
            out: &a.out,
            scale: a.scale.as_deref(),
            norm: a.norm.as_deref(),
            precision: a.precision,
        }),
        Cmd::Evaluate(a) => {
            let task = Task::parse(&a.task)?;
            let input = match (&a.descriptors, &a.checkpoint, &a.patches) {
                (Some(d), _, _) => EvalInput::Descriptors(d),
                (None, Some(c), Some(p)) => EvalInput::Network {
                    checkpoint: c,
                    patches: p,
                    precision: a.precision,
                },
                _ => return Err(CliError::Config("give --descriptors or --checkpoint with --patches".into())),
            };
            commands::evaluate_cmd(input, task, a.out.as_deref())
        }
        Cmd::Analyze { mode } => match mode {
            AnalyzeCmd::Curves { alphas, resolution, out } => commands::curves_cmd(&alphas, resolution, out.as_deref()),
            AnalyzeCmd::Histogram {
                checkpoint,
                patches,
                identities,
                batches,
                batch_identities,
                bins,
                seed,
                out,
            } => commands::histogram_cmd(&HistogramArgs {
                checkpoint: &checkpoint,
                patches: patches.as_deref(),
                identities,
                batches,
                batch_identities,
                bins,
                seed,
                out: out.as_deref(),
            }),
            AnalyzeCmd::Decompose { pairs, dim, alpha, seed } => commands::decompose_cmd(pairs, dim, alpha, seed),
        },
        Cmd::Verify { inject_fault } => commands::verify_cmd(inject_fault.as_deref()),
        Cmd::Generate {
            out,
            identities,
            patches_per_identity,
            seed,
        } => commands::generate_cmd(&out, identities, patches_per_identity, seed),
    }
}

fn main() -> ExitCode {
    let defaults = format!(
        "Config keys and their defaults:\n\n{}\nOptional keys: train.grad_clip (unset: no clipping), \
         train.stop_after_step (unset: run all epochs), data.path (required when data.source = \"ubc\").",
        RunConfigFile::default().to_toml()
    );
    let matches = Cli::command()
        .mut_subcommand("train", |c| c.after_help(defaults))
        .get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
