use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bbdm::commands::{self, EXIT_OK};
use bbdm::config::Config;
use bbdm::process::reverse_mean;
use bbdm::Error;

#[derive(Parser)]
#[command(name = "bbdm", version, about = "Brownian bridge diffusion for paired toy translation tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the built-in invariant suites and print a pass/fail table.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Also write the table to this directory as verify.txt.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a noise predictor.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run with the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Sample from a trained checkpoint.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Number of conditioning rows (n_samples).
        #[arg(long)]
        n: Option<usize>,
        /// Sampling grid size (sample_steps).
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        eta: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate sample files against a reference dataset or samples file.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long = "samples", required = true, num_args = 1..)]
        samples: Vec<PathBuf>,
        #[arg(long)]
        reference: PathBuf,
        /// Samples per conditioning input (diversity_k).
        #[arg(long)]
        k: Option<usize>,
        /// Write the report to this directory as eval.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the schedule table for (timesteps, scale).
    Info {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        timesteps: Option<usize>,
        #[arg(long)]
        scale: Option<f64>,
    },
}

fn config(common: &Common, extra: &[(&str, Option<String>)]) -> Result<Config, Error> {
    let mut overrides = common.overrides.clone();
    for (k, v) in extra {
        if let Some(v) = v {
            overrides.push(format!("{k}={v}"));
        }
    }
    commands::load_config(common.config.as_deref(), &overrides)
}

fn save(dir: &Path, name: &str, text: &str) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let p = dir.join(name);
    fs::write(&p, text).map_err(|e| Error::Io { path: p, source: e })
}

fn run(cli: Cli) -> Result<i32, Error> {
    match cli.command {
        Command::Verify { common, out } => {
            let cfg = config(&common, &[])?;
            let report = commands::cmd_verify(&cfg, reverse_mean);
            let table = report.table();
            print!("{table}");
            if let Some(dir) = out {
                save(&dir, "verify.txt", &table)?;
            }
            Ok(commands::verify_exit_code(&report))
        }
        Command::Train {
            common,
            out,
            resume,
        } => {
            let cfg = config(&common, &[])?;
            let outcome = commands::cmd_train(&cfg, &out, resume.as_deref())?;
            let last = outcome.records.last();
            println!(
                "trained {} steps; final loss {}; checkpoint {}; metrics {}",
                outcome.records.len(),
                last.map_or("n/a".to_string(), |r| r.loss.to_string()),
                outcome.checkpoint.display(),
                outcome.metrics.display()
            );
            Ok(EXIT_OK)
        }
        Command::Sample {
            common,
            checkpoint,
            out,
            n,
            steps,
            eta,
            seed,
        } => {
            let cfg = config(
                &common,
                &[
                    ("n_samples", n.map(|v| v.to_string())),
                    ("sample_steps", steps.map(|v| v.to_string())),
                    ("eta", eta.map(|v| v.to_string())),
                    ("seed", seed.map(|v| v.to_string())),
                ],
            )?;
            let outcome = commands::cmd_sample(&cfg, &checkpoint, &out)?;
            println!("wrote {} samples to {}", outcome.rows, outcome.samples.display());
            Ok(EXIT_OK)
        }
        Command::Eval {
            common,
            samples,
            reference,
            k,
            out,
        } => {
            let cfg = config(&common, &[("diversity_k", k.map(|v| v.to_string()))])?;
            let report = commands::cmd_eval(&cfg, &samples, &reference)?;
            print!("{report}");
            if let Some(dir) = out {
                save(&dir, "eval.csv", &report)?;
            }
            Ok(EXIT_OK)
        }
        Command::Info {
            common,
            timesteps,
            scale,
        } => {
            let cfg = config(
                &common,
                &[
                    ("timesteps", timesteps.map(|v| v.to_string())),
                    ("scale", scale.map(|v| v.to_string())),
                ],
            )?;
            print!("{}", commands::cmd_info(cfg.train.timesteps, cfg.train.scale)?);
            Ok(EXIT_OK)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e) as u8)
        }
    }
}
