use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cdl_cli::commands;
use cdl_cli::{CliError, Overrides, RunConfig, RunConfigFile};

#[derive(Parser)]
#[command(name = "cdl", version, about = "Cross-domain weakly-supervised video anomaly detection")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Hyperparameter profile: open-set, cross-domain or cross-domain-small-batch.
    #[arg(long, global = true)]
    profile: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Continue training from this checkpoint.
    #[arg(long, global = true)]
    resume: Option<PathBuf>,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic two-stream corpus.
    Synth {
        /// Corpus spec (TOML, or JSON by extension).
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Train both heads: step 0, then the CDL steps.
    Train,
    /// Frame-level AUC/AP of a checkpoint's main head.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Test manifest; defaults to paths.test.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Soft pseudo-labels of a checkpoint on an external corpus.
    PseudoLabel {
        #[arg(long)]
        checkpoint: PathBuf,
        /// External manifest; defaults to paths.external.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Uncertainty CDFs, correlation series and plots of a training run.
    Diagnose {
        /// Run directory holding train.jsonl and checkpoints/.
        #[arg(long)]
        run: PathBuf,
    },
}

fn resolve(g: &Global) -> Result<RunConfig, CliError> {
    let file = match &g.config {
        Some(p) if !p.exists() => {
            return Err(CliError::Config(format!("config file {} does not exist", p.display())))
        }
        Some(p) => RunConfigFile::load(p)?,
        None => RunConfigFile::default(),
    };
    RunConfig::resolve(
        file,
        &Overrides {
            profile: g.profile.clone(),
            seed: g.seed,
            workers: g.workers,
            out: g.out.clone(),
        },
    )
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = resolve(&cli.global)?;
    if cli.global.resume.is_some() && !matches!(cli.command, Command::Train) {
        return Err(CliError::Config("--resume only applies to `train`".into()));
    }
    match cli.command {
        Command::Synth { spec } => {
            let spec = spec
                .map(|p| commands::read_synth_spec(&p))
                .transpose()?
                .map(|mut s| {
                    if let Some(seed) = cli.global.seed {
                        s.seed = seed;
                    }
                    s
                });
            let report = commands::synth(&cfg, spec)?;
            println!("wrote {} videos to {} (corpus {})", report.n_videos, cfg.out_dir().display(), report.corpus_hash);
        }
        Command::Train => {
            let outcome = commands::train(&cfg, cli.global.resume.as_deref())?;
            println!("trained through CDL step {}", outcome.state.cdl_step);
            if let Some(m) = outcome.metrics {
                println!("test AUC {:.4} AP {:.4}", m.auc, m.ap);
            }
        }
        Command::Eval { checkpoint, manifest } => {
            let m = commands::eval(&cfg, &checkpoint, manifest.as_deref())?;
            println!("AUC {:.4} AP {:.4} over {} frames", m.auc, m.ap, m.n_frames);
        }
        Command::PseudoLabel { checkpoint, manifest } => {
            let r = commands::pseudo_label(&cfg, &checkpoint, manifest.as_deref())?;
            println!("labeled {} videos", r.main.labels.len());
        }
        Command::Diagnose { run } => {
            let r = commands::diagnose(&cfg, &run)?;
            for f in &r.files {
                println!("wrote {}", f.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
