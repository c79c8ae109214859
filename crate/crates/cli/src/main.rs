//! `tlora` command-line entry point.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tlora::adapters::AdapterKind;
use tlora::config::ExperimentConfig;
use tlora::diffusion::Condition;
use tlora::runner;
use tlora::Error;

#[derive(Parser)]
#[command(name = "tlora", version, about = "Timestep-dependent LoRA on a toy conditional DDPM")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the base denoiser on the ring prior.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attach adapters to a base checkpoint and train them on the concept set.
    Finetune {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw samples with the ancestral sampler.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Condition tokens such as `c3` or `V*+c3`; repeatable.
        #[arg(long = "condition", value_parser = parse_condition, default_value = "V*+c0")]
        conditions: Vec<Condition>,
        #[arg(long, default_value_t = 256)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Evaluate every adapter mask at this timestep instead of the current one.
        #[arg(long)]
        mask_timestep: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Singular spectra and effective ranks of each adapter's `B`.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Rank summary path; defaults to `<out stem>.ranks.csv`.
        #[arg(long)]
        ranks: Option<PathBuf>,
        #[arg(long)]
        with_a: bool,
    },
    /// Concept fidelity and context alignment.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 256)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient check per adapter kind.
    Gradcheck {
        /// Kinds to check; all when omitted.
        #[arg(long = "kind", value_parser = parse_kind)]
        kinds: Vec<AdapterKind>,
        #[arg(long = "lambda", default_value_t = 0.3)]
        lambda_reg: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

const GRAD_TOLERANCE: f64 = 1e-6;

fn parse_condition(s: &str) -> Result<Condition, String> {
    Condition::parse(s).map_err(|e| e.to_string())
}

fn parse_kind(s: &str) -> Result<AdapterKind, String> {
    AdapterKind::parse(s).map_err(|e| e.to_string())
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config { .. } | Error::Json(_) => 2,
        Error::Numerical(_) | Error::Decomposition(_) => 3,
        _ => 1,
    }
}

fn load_config(path: &Path) -> tlora::Result<ExperimentConfig> {
    let cfg = ExperimentConfig::load(path)?;
    for w in cfg.validate()? {
        eprintln!("warning: {w}");
    }
    Ok(cfg)
}

fn run(cli: Cli) -> tlora::Result<u8> {
    match cli.command {
        Command::Pretrain { config, out } => {
            let cfg = load_config(&config)?;
            let res = runner::run_pretrain(&cfg, &out)?;
            let tail = &res.losses[res.losses.len().saturating_sub(1000)..];
            let mean = tail.iter().sum::<f64>() / tail.len().max(1) as f64;
            println!(
                "pretrained {} steps, final mean loss {mean:.5}; wrote {} and {}",
                res.losses.len(),
                out.display(),
                res.loss_csv.display()
            );
        }
        Command::Finetune { base, config, out } => {
            let cfg = load_config(&config)?;
            let res = runner::run_finetune(&base, &cfg, &out)?;
            println!(
                "fine-tuned {} for {} steps; wrote {}, {} and {}",
                cfg.adapter.kind.as_str(),
                res.report.steps.len(),
                out.display(),
                res.metrics_csv.display(),
                res.trace_csv.display()
            );
        }
        Command::Sample {
            checkpoint,
            conditions,
            n,
            seed,
            mask_timestep,
            out,
        } => {
            let points = runner::run_sample(&checkpoint, &conditions, n, seed, mask_timestep, &out)?;
            println!("wrote {} samples to {}", points.len(), out.display());
        }
        Command::Analyze {
            checkpoint,
            out,
            ranks,
            with_a,
        } => {
            let ranks = ranks.unwrap_or_else(|| runner::sibling(&out, "ranks"));
            for r in runner::run_analyze(&checkpoint, with_a, &out, &ranks)? {
                println!("{}: effective rank {} of {}", r.layer, r.effective_rank, r.rank);
            }
        }
        Command::Evaluate {
            checkpoint,
            n,
            seed,
            out,
        } => {
            let r = runner::run_evaluate(&checkpoint, n, seed, &out)?;
            println!(
                "concept_fidelity {:.6} context_alignment {:.6}",
                r.concept_fidelity, r.context_alignment
            );
        }
        Command::Gradcheck {
            kinds,
            lambda_reg,
            seed,
        } => {
            let kinds = if kinds.is_empty() {
                AdapterKind::ALL.to_vec()
            } else {
                kinds
            };
            let mut worst = 0.0f64;
            for run in runner::run_gradcheck(&kinds, lambda_reg, seed)? {
                let e = run.report.max_rel_error();
                worst = worst.max(e);
                let verdict = if e <= GRAD_TOLERANCE { "ok" } else { "FAIL" };
                println!("{:<16} max relative error {e:.3e} {verdict}", run.kind.as_str());
            }
            if worst > GRAD_TOLERANCE {
                eprintln!("error: gradient error {worst:.3e} exceeds {GRAD_TOLERANCE:e}");
                return Ok(3);
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
