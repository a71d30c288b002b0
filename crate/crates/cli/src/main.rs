use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nncsl_cli::config::{resolve, ConfigError, Overrides};
use nncsl_cli::run::{format_table, output_root, report, run_experiment};
use nncsl_core::Method;

#[derive(Parser)]
#[command(name = "nncsl", version, about = "Run continual semi-supervised learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured method and seed and write the outputs.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Replaces the configured methods; repeatable.
        #[arg(long = "method", value_parser = parse_method)]
        methods: Vec<Method>,
        /// Replaces the configured seeds; repeatable.
        #[arg(long = "seed")]
        seeds: Vec<u64>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long)]
        dump_embeddings: bool,
    },
    /// Print the resolved config or list every violation.
    Validate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "method", value_parser = parse_method)]
        methods: Vec<Method>,
    },
    /// Re-aggregate the per-seed summaries of an existing run directory.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

fn parse_method(s: &str) -> Result<Method, String> {
    Method::parse(s).ok_or_else(|| {
        let names: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
        format!("unknown method {s:?}; expected one of {}", names.join(", "))
    })
}

fn print_violations(v: &[ConfigError]) {
    for e in v {
        eprintln!("error: {e}");
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Run {
            config,
            methods,
            seeds,
            output_dir,
            dump_embeddings,
        } => {
            let overrides = Overrides {
                methods,
                seeds,
                output_dir,
                dump_embeddings,
            };
            let resolved = match resolve(&config, &overrides) {
                Ok(r) => r,
                Err(v) => {
                    print_violations(&v);
                    return ExitCode::from(1);
                }
            };
            let root = output_root(&resolved);
            match run_experiment(&resolved, &root) {
                Ok(out) => {
                    print!("{}", format_table(&out.methods));
                    println!("outputs: {}", out.run_dir.display());
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(e.exit_code() as u8)
                }
            }
        }
        Command::Validate { config, methods } => {
            let overrides = Overrides {
                methods,
                ..Overrides::default()
            };
            match resolve(&config, &overrides) {
                Ok(r) => {
                    let mut v = serde_json::to_value(&r.config).expect("config serializes");
                    v["config_hash"] = r.hash.into();
                    println!("OK");
                    println!("{}", serde_json::to_string_pretty(&v).expect("json"));
                    ExitCode::SUCCESS
                }
                Err(v) => {
                    print_violations(&v);
                    ExitCode::from(1)
                }
            }
        }
        Command::Report { dir } => match report(&dir) {
            Ok(rows) => {
                print!("{}", format_table(&rows));
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(e.exit_code() as u8)
            }
        },
    }
}
