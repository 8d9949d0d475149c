//! `metagait` command-line tool.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use metagait::data::Condition;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

/// Environment variable holding the log filter, e.g. `METAGAIT_LOG=debug`.
const LOG_ENV: &str = "METAGAIT_LOG";

#[derive(Debug, Parser)]
#[command(name = "metagait", version, about = "Silhouette gait recognition with meta attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides `output_dir`.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write metrics and checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<usize>,
        /// Batch sampling seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        init_checkpoint: Option<PathBuf>,
    },
    /// Cross-view rank-1 and mAP on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        gallery_seqs: Option<usize>,
    },
    /// Finite-difference gradient checks of every op and block.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write the configured synthetic dataset as PNG frames.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Target directory; defaults to `<output_dir>/dataset`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Export attention coefficients and pooling weights of one sequence.
    DumpAttention {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        id: Option<usize>,
        #[arg(long)]
        condition: Option<Condition>,
        #[arg(long)]
        seq: Option<usize>,
        #[arg(long)]
        view: Option<u32>,
    },
}

fn load(common: &Common, apply: impl FnOnce(&mut RunConfig) -> CliResult<()>) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(dir) = &common.output_dir {
        cfg.output_dir = dir.clone();
    }
    apply(&mut cfg)?;
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train {
            common,
            steps,
            seed,
            init_checkpoint,
        } => {
            let cfg = load(&common, |c| {
                if let Some(s) = steps {
                    c.train.steps = s;
                }
                if let Some(s) = seed {
                    c.train.seed = s;
                }
                if init_checkpoint.is_some() {
                    c.train.init_checkpoint = init_checkpoint;
                }
                Ok(())
            })?;
            let path = commands::train(&cfg)?;
            println!("trained {} steps, final checkpoint {}", cfg.train.steps, path.display());
        }
        Command::Eval {
            common,
            checkpoint,
            gallery_seqs,
        } => {
            let cfg = load(&common, |c| {
                if checkpoint.is_some() {
                    c.eval.checkpoint = checkpoint;
                }
                if let Some(g) = gallery_seqs {
                    c.eval.gallery_seqs = g;
                }
                Ok(())
            })?;
            let report = commands::eval(&cfg)?;
            for line in commands::eval_lines(&report) {
                println!("{line}");
            }
        }
        Command::Gradcheck { common, seed } => {
            let cfg = load(&common, |c| {
                if let Some(s) = seed {
                    c.gradcheck.seed = s;
                }
                Ok(())
            })?;
            let results = commands::gradcheck(&cfg)?;
            let mut failed = 0;
            for r in &results {
                let verdict = if r.passed() { "ok" } else { "FAIL" };
                println!("{:<28} max rel error {:.3e} ({} probes) {verdict}", r.name, r.max_rel_error, r.probes);
                failed += usize::from(!r.passed());
            }
            if failed > 0 {
                return Err(CliError::GradCheckFailed(failed));
            }
        }
        Command::Synth { common, out, seed } => {
            let cfg = load(&common, |c| {
                if let (Some(s), Some(g)) = (seed, c.data.synthetic.as_mut()) {
                    g.seed = s;
                }
                Ok(())
            })?;
            let out = out.unwrap_or_else(|| cfg.output_dir.join("dataset"));
            commands::synth(&cfg, &out)?;
            println!("wrote {}", out.display());
        }
        Command::DumpAttention {
            common,
            checkpoint,
            id,
            condition,
            seq,
            view,
        } => {
            let cfg = load(&common, |c| {
                let d = &mut c.dump;
                d.checkpoint = checkpoint.or(d.checkpoint.take());
                d.id = id.or(d.id);
                d.condition = condition.or(d.condition);
                d.seq = seq.or(d.seq);
                d.view = view.or(d.view);
                Ok(())
            })?;
            for p in commands::dump_attention(&cfg)? {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
