//! Experiment CLI: seeded multi-run training, method comparison, the EMA
//! drift probe, and stream generation.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use clbench::error::Error;
use clbench::harness::{
    compare_methods, comparison_csv, load_config, load_stream, read_checkpoint, resolve_out_dir,
    run_drift_probe, run_experiment, summary_json, ExperimentConfig,
};
use clbench::scenario::export_csv;

#[derive(Parser)]
#[command(name = "clbench", version, about = "Class-incremental learning benchmark runner")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one experiment config over its seed list.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's seed list.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run several configs and tabulate ACC/BWT side by side.
    Compare {
        #[arg(long, value_delimiter = ',', required = true)]
        configs: Vec<PathBuf>,
        /// Require shared stream + seeds and report pairwise win counts.
        #[arg(long)]
        paired: bool,
    },
    /// Re-run the EMA drift probe on a saved checkpoint.
    ProbeDrift {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Generate a stream and write it as CSV.
    GenStream {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Parse(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Usage text (or the help/version output) plus exit 1 on bad
            // flags; help and version requests stay successful.
            let is_help = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            return if is_help {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            };
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn dispatch(cli: Cli) -> clbench::Result<ExitCode> {
    match cli.cmd {
        Cmd::Run { config, seeds, out } => {
            let mut cfg: ExperimentConfig = load_config(&config)?;
            if let Some(seeds) = seeds {
                cfg.seeds = seeds;
            }
            if let Some(out) = out {
                cfg.out_dir = Some(out);
            }
            cfg.validate()?;
            let record = run_experiment(&cfg)?;
            for sr in &record.seed_results {
                match sr.bwt {
                    Some(b) => println!("seed {}: acc {:.4} bwt {:.4}", sr.seed, sr.acc, b),
                    None => println!("seed {}: acc {:.4} bwt n/a", sr.seed, sr.acc),
                }
            }
            for (seed, msg) in &record.failed_seeds {
                eprintln!("seed {seed} failed: {msg}");
            }
            println!("{}", summary_json(&record));
            if let Some(dir) = &cfg.out_dir {
                println!("results written to {}", resolve_out_dir(dir).display());
            }
            if record.is_failure() {
                eprintln!("error: every seed failed");
                return Ok(ExitCode::from(2));
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Compare { configs, paired } => {
            let parsed: Vec<ExperimentConfig> = configs
                .iter()
                .map(|p| load_config(p))
                .collect::<clbench::Result<_>>()?;
            for cfg in &parsed {
                cfg.validate()?;
            }
            let cmp = compare_methods(&parsed, paired)?;
            print!("{}", comparison_csv(&cmp));
            if let Some(wins) = &cmp.wins {
                let n = cmp.rows.len();
                for a in 0..n {
                    for b in 0..n {
                        if a != b {
                            println!(
                                "wins {} over {}: {}/{}",
                                cmp.rows[a].method,
                                cmp.rows[b].method,
                                wins[a][b],
                                cmp.records[a].seed_results.len()
                            );
                        }
                    }
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::ProbeDrift { config, checkpoint } => {
            let cfg = load_config(&config)?;
            cfg.validate()?;
            let stream = load_stream(&cfg)?;
            let mut cp = read_checkpoint(&checkpoint)?;
            if cp.fingerprint != cfg.fingerprint() {
                eprintln!(
                    "note: checkpoint fingerprint {} differs from config fingerprint {}",
                    cp.fingerprint,
                    cfg.fingerprint()
                );
            }
            let (last, buffered) =
                run_drift_probe(&cfg, &stream, &mut cp.model, &cp.buffer, cp.seed)?;
            println!("variant,task,acc_before,acc_after");
            for (variant, report) in [("last_task", &last), ("buffer_balanced", &buffered)] {
                for (t, (b, a)) in report.acc_before.iter().zip(&report.acc_after).enumerate() {
                    println!("{variant},{},{b},{a}", t + 1);
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::GenStream { config, out } => {
            let cfg = load_config(&config)?;
            let stream = load_stream(&cfg)?;
            let out = resolve_out_dir(&out);
            if let Some(parent) = out.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent)?;
                }
            }
            let mut file = std::fs::File::create(&out)?;
            export_csv(&stream, &mut file)?;
            println!(
                "wrote {} tasks, {} classes to {}",
                stream.num_tasks(),
                stream.num_classes,
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}
