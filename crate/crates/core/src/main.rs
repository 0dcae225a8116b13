use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use entprop::experiment::{self, resolve_output, ExperimentConfig};
use entprop::Error;

/// Entropy-routed dual-BN training, baselines and robustness evaluation.
#[derive(Parser)]
#[command(name = "entprop", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the configured method and evaluate the result.
    Train { config: PathBuf },
    /// Evaluate a checkpoint on the data and suite of a config.
    Eval { checkpoint: PathBuf, config: PathBuf },
    /// Train entprop over a grid of k and n.
    Sweep {
        config: PathBuf,
        #[arg(long, num_args = 1.., value_delimiter = ',')]
        k: Vec<f64>,
        #[arg(long, num_args = 1.., value_delimiter = ',')]
        n: Vec<usize>,
    },
    /// Compare finished runs.
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
}

fn load(path: &PathBuf) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path).with_context(|| format!("reading config {}", path.display()))
}

fn pct(v: Option<f64>) -> String {
    v.map(|x| format!("{:.2}", 100.0 * x)).unwrap_or_else(|| "-".into())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train { config } => {
            let cfg = load(&config)?;
            let o = experiment::train(&cfg)?;
            let s = &o.summary;
            println!(
                "{}: SA {} RA {} H_score {} (cost {:.3}N measured, {:.3}N nominal) -> {}",
                s.method.as_deref().unwrap_or("?"),
                pct(Some(s.sa)),
                pct(s.ra),
                pct(s.h_score),
                s.measured_cost.unwrap_or(f64::NAN),
                s.theoretical_cost.unwrap_or(f64::NAN),
                o.dir.display()
            );
        }
        Cmd::Eval { checkpoint, config } => {
            let cfg = load(&config)?;
            let (dir, s) = experiment::eval_checkpoint(&checkpoint, &cfg)?;
            println!(
                "SA {} RA {} H_score {} PGD {} -> {}",
                pct(Some(s.sa)),
                pct(s.ra),
                pct(s.h_score),
                pct(s.pgd20),
                dir.join("summary.json").display()
            );
        }
        Cmd::Sweep { config, k, n } => {
            let cfg = load(&config)?;
            let rows = experiment::sweep(&cfg, &k, &n)?;
            print!("{}", experiment::sweep_csv(&rows));
        }
        Cmd::Report { dirs, out } => {
            let out = resolve_output(&out);
            let rows = experiment::report(&dirs, &out)?;
            print!("{}", experiment::report_text(&rows));
        }
    }
    Ok(())
}

/// 1 for problems with the inputs, 2 for failures during a run.
fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::InvalidArgument(_) | Error::Format(_) | Error::Version { .. } | Error::Json(_)) => 1,
        Some(Error::Io(io)) if io.kind() == std::io::ErrorKind::NotFound => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
