use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cpig::harness::{self, CheckpointTask, Family, GRAD_CHECK_THRESHOLD};
use cpig::Error;

#[derive(Parser, Debug)]
#[command(name = "cpig", version, about = "Intention-guided consistency-policy multi-agent training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// JSON configuration; defaults apply to every missing key.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted overrides such as `trainer.seed=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Debug)]
struct CheckpointArgs {
    /// Trainer checkpoint (`final.cpig`).
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 20)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train and write config, manifest, metrics and checkpoints to `--out`.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint with mask 1 and print a JSON summary.
    Eval {
        #[command(flatten)]
        ckpt: CheckpointArgs,
    },
    /// Write per-step intention embeddings of evaluation episodes as CSV.
    ExportEmbeddings {
        #[command(flatten)]
        ckpt: CheckpointArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write evaluation trajectories as JSON lines.
    ExportTrajectories {
        #[command(flatten)]
        ckpt: CheckpointArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render return and coverage curves from a metrics CSV as SVG.
    Plot {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic gradients with central finite differences.
    GradCheck {
        #[arg(long, default_value_t = 20)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corrupt one family's analytic gradient (self-test of the checker).
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

const EXIT_CONFIG: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_CHECK: u8 = 3;

fn exit_for(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => EXIT_CONFIG,
        Error::Training { source, .. } if matches!(**source, Error::Config { .. }) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

fn run_checkpoint(ckpt: &CheckpointArgs, task: CheckpointTask, out: Option<&PathBuf>) -> Result<(), Error> {
    let res = harness::run_checkpoint(&ckpt.checkpoint, task, ckpt.episodes, ckpt.seed)?;
    if let (Some(path), Some(text)) = (out, res.export.as_ref()) {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, text)?;
    }
    let summary = serde_json::json!({
        "episodes": res.eval.returns.len(),
        "return_mean": res.eval.mean,
        "return_std": res.eval.std,
        "coverage": res.eval.coverage,
        "success_rate": res.eval.success_rate,
        "returns": res.eval.returns,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn run(cli: Cli) -> Result<u8, Error> {
    match cli.command {
        Command::Train { cfg, out } => {
            let config = harness::load_config(cfg.config.as_deref(), &cfg.overrides)?;
            let metrics = harness::train_into(&config, &out)?;
            if let Some(r) = metrics.final_row() {
                println!("step {} return {:.4} +- {:.4} coverage {:.4}", r.step, r.return_mean, r.return_std, r.coverage);
            }
            println!("run written to {}", out.display());
        }
        Command::Eval { ckpt } => run_checkpoint(&ckpt, CheckpointTask::Evaluate, None)?,
        Command::ExportEmbeddings { ckpt, out } => run_checkpoint(&ckpt, CheckpointTask::Embeddings, Some(&out))?,
        Command::ExportTrajectories { ckpt, out } => run_checkpoint(&ckpt, CheckpointTask::Trajectories, Some(&out))?,
        Command::Plot { metrics, out } => {
            for p in harness::plot_into(&metrics, &out)? {
                println!("{}", p.display());
            }
        }
        Command::GradCheck { cases, seed, inject_fault } => {
            let fault = match inject_fault.as_deref() {
                None => None,
                Some(name) => Some(Family::parse(name).ok_or_else(|| Error::Config {
                    key: "inject-fault".into(),
                    message: format!("unknown network family `{name}`"),
                })?),
            };
            let report = harness::grad_check(cases, seed, fault)?;
            print!("{report}");
            if !report.passed(GRAD_CHECK_THRESHOLD) {
                eprintln!("gradient check failed: max relative error {:.3e} >= {GRAD_CHECK_THRESHOLD:e}", report.max_rel());
                return Ok(EXIT_CHECK);
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_for(&e))
        }
    }
}
