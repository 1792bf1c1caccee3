use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sfbs::config::{config_schema, load_config};
use sfbs::experiment::{certify, exit_code_for, reproduce_52, run_experiment, EXIT_CERTIFICATE, EXIT_OK};

/// Solver and experiment runner for monotone inclusions and composite
/// minimization via relaxed, perturbed stochastic forward-backward
/// iterations, with runtime convergence auditors.
#[derive(Parser)]
#[command(name = "sfbs", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute every seeded run of an experiment and write traces plus a
    /// summary report.
    Run { config: PathBuf },
    /// Evaluate the admissibility certificates without running.
    Certify { config: PathBuf },
    /// Run the growing-batch empirical-gradient construction and emit its
    /// bias/variance decay series with fitted log-log slopes.
    #[command(name = "reproduce-52")]
    Reproduce52 { config: PathBuf },
    /// Print the configuration schema as JSON.
    ExportSchema,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Run { config } => match load_config(&config).and_then(|c| run_experiment(&c)) {
            Ok(outcome) => {
                println!("{}", outcome.message);
                println!("summary: {}", outcome.summary_path.display());
                outcome.exit_code
            }
            Err(e) => {
                eprintln!("error: {e}");
                exit_code_for(&e)
            }
        },
        Command::Certify { config } => match load_config(&config).and_then(|c| certify(&c)) {
            Ok(cert) => {
                for clause in &cert.clauses {
                    let mark = if clause.pass { "pass" } else { "FAIL" };
                    let horizon = clause
                        .checked_up_to
                        .map(|n| format!(" [checked up to n = {n}]"))
                        .unwrap_or_default();
                    let witness = clause
                        .witness_n
                        .map(|n| format!(" [witness n = {n}]"))
                        .unwrap_or_default();
                    println!("{mark}  {}: {}{horizon}{witness}", clause.name, clause.detail);
                }
                if cert.pass {
                    println!("certificate: pass");
                    EXIT_OK
                } else {
                    println!("certificate: FAIL");
                    EXIT_CERTIFICATE
                }
            }
            Err(e) => {
                eprintln!("error: {e}");
                exit_code_for(&e)
            }
        },
        Command::Reproduce52 { config } => {
            match load_config(&config).and_then(|c| reproduce_52(&c)) {
                Ok(summary) => {
                    println!(
                        "lambda*bias^2 log-log slope: {:.4}",
                        summary.lambda_bias_sq_slope
                    );
                    println!("variance log-log slope: {:.4}", summary.variance_slope);
                    println!(
                        "sqrt(lambda)*bias partial-sum tail fraction: {:.4}",
                        summary.sqrt_lambda_bias_tail_fraction
                    );
                    println!("series: {}", summary.bias_series_file);
                    EXIT_OK
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    exit_code_for(&e)
                }
            }
        }
        Command::ExportSchema => {
            println!(
                "{}",
                serde_json::to_string_pretty(&config_schema()).expect("schema serializes")
            );
            EXIT_OK
        }
    };
    ExitCode::from(code as u8)
}
