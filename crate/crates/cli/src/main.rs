use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use diversefl_cli::{cmd_bound, cmd_capacity, cmd_run, cmd_sweep, render_bound_table, CliError};

/// Federated learning simulator with enclave-guided fault filtering.
#[derive(Parser)]
#[command(name = "diversefl", version, about, long_about = None)]
struct Cli {
    /// Worker threads; defaults to the number of CPUs
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, env = "DIVERSEFL_OUT_DIR", default_value = "out")]
        out: PathBuf,
        /// Overrides the master seed in the config
        #[arg(long)]
        seed: Option<u64>,
        /// Anomalous rounds tolerated before exiting with status 3
        #[arg(long, default_value_t = 0)]
        max_anomalies: usize,
    },
    /// Run one experiment per value of a config field
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Dotted field path, e.g. `f` or `lr.initial`
        #[arg(long)]
        axis: String,
        /// Comma separated values
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<String>,
        #[arg(long, env = "DIVERSEFL_OUT_DIR", default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 0)]
        max_anomalies: usize,
    },
    /// Print the convergence bound over a parameter grid
    Bound {
        #[arg(long)]
        config: PathBuf,
    },
    /// Clients one enclave can serve per round
    Capacity {
        /// Client round time in milliseconds
        #[arg(long)]
        client_ms: f64,
        /// Enclave time per client in milliseconds
        #[arg(long)]
        enclave_ms: f64,
    },
}

fn execute(cli: Cli) -> Result<ExitCode, CliError> {
    if let Some(workers) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global()
            .map_err(|e| CliError::Usage(format!("--workers: {e}")))?;
    }
    match cli.command {
        Command::Run {
            config,
            out,
            seed,
            max_anomalies,
        } => {
            let output = cmd_run(&config, &out, seed)?;
            let s = &output.summary;
            println!(
                "{}: final accuracy {}, precision {}, recall {}, {} anomalous rounds",
                s.rule.name(),
                s.final_accuracy.map_or("n/a".into(), |a| format!("{a:.4}")),
                s.mean_precision.map_or("n/a".into(), |a| format!("{a:.4}")),
                s.mean_recall.map_or("n/a".into(), |a| format!("{a:.4}")),
                s.anomaly_rounds.len()
            );
            println!("artifacts in {}", out.display());
            Ok(anomaly_status(s.anomaly_rounds.len(), max_anomalies))
        }
        Command::Sweep {
            config,
            axis,
            values,
            out,
            seed,
            max_anomalies,
        } => {
            let points = cmd_sweep(&config, &axis, &values, &out, seed)?;
            let mut worst = 0;
            for p in &points {
                let s = &p.output.summary;
                worst = worst.max(s.anomaly_rounds.len());
                println!(
                    "{axis}={} {}: final accuracy {}",
                    p.value,
                    p.rule.name(),
                    s.final_accuracy.map_or("n/a".into(), |a| format!("{a:.4}"))
                );
            }
            println!("comparison in {}", out.join(diversefl_cli::COMPARISON_CSV).display());
            Ok(anomaly_status(worst, max_anomalies))
        }
        Command::Bound { config } => {
            let rows = cmd_bound(&config)?;
            print!("{}", render_bound_table(&rows));
            Ok(ExitCode::SUCCESS)
        }
        Command::Capacity { client_ms, enclave_ms } => {
            let (clients, warning) = cmd_capacity(client_ms, enclave_ms)?;
            println!("{clients}");
            if let Some(w) = warning {
                eprintln!("{w}");
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn anomaly_status(count: usize, allowed: usize) -> ExitCode {
    if count > allowed {
        eprintln!("{count} anomalous rounds (allowed {allowed})");
        ExitCode::from(3)
    } else {
        ExitCode::SUCCESS
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
