use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use apts::config::RunConfig;
use apts::{data, experiment, selftest};

/// Environment variable capping the number of worker threads.
const THREADS_ENV: &str = "APTS_THREADS";

#[derive(Parser)]
#[command(name = "apts", version, about = "Data-parallel APTS training harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train with a config file; trailing `--key value` pairs override it.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
        overrides: Vec<String>,
    },
    /// Run the built-in invariant checks.
    Selftest,
    /// Write tiny IDX files usable with `dataset = mnist`.
    GenFixtures {
        #[arg(long, default_value = "fixtures")]
        dir: PathBuf,
        #[arg(long, default_value_t = 200)]
        train: usize,
        #[arg(long, default_value_t = 50)]
        test: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn apply_overrides(cfg: &mut RunConfig, args: &[String]) -> Result<()> {
    let mut it = args.iter();
    while let Some(flag) = it.next() {
        let Some(key) = flag.strip_prefix("--") else {
            bail!("expected `--key value`, got {flag:?}");
        };
        let (key, value) = match key.split_once('=') {
            Some((k, v)) => (k.to_owned(), v.to_owned()),
            None => {
                let v = it.next().with_context(|| format!("missing value for --{key}"))?;
                (key.to_owned(), v.clone())
            }
        };
        cfg.set(&key.replace('-', "_"), &value)?;
    }
    Ok(())
}

fn train(config: Option<PathBuf>, overrides: &[String]) -> Result<()> {
    let mut cfg = match &config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            RunConfig::parse(&text).with_context(|| format!("in {}", path.display()))?
        }
        None => RunConfig::default(),
    };
    apply_overrides(&mut cfg, overrides)?;
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.parse().with_context(|| format!("{THREADS_ENV}={v:?} is not a count"))?;
        cfg.apts.threads = Some(n);
    }
    let summary = experiment::run_experiment(&cfg)?;
    println!(
        "{} rows, {} syncs, final train loss {}, final validation accuracy {}",
        summary.rows, summary.total_syncs, summary.final_train_loss, summary.final_val_accuracy
    );
    println!("metrics: {}", cfg.output.display());
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train { config, overrides } => train(config, &overrides).map(|_| true),
        Command::Selftest => {
            let checks = selftest::run_all();
            let mut ok = true;
            for c in &checks {
                println!("{} {:<32} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                ok &= c.passed;
            }
            Ok(ok)
        }
        Command::GenFixtures { dir, train, test, seed } => {
            data::write_fixtures(&dir, train, test, seed)?;
            println!("wrote {} ({train} train, {test} test)", dir.display());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
