//! `clusterguard`: run experiment matrices, certify robustness bounds,
//! summarize result directories and check the medoid approximation.
//!
//! Exit codes: 0 success, 1 runtime failure (including failed cells or
//! violated bounds), 2 usage error.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use clusterguard_core::aggregators::AggregatorSpec;
use clusterguard_core::experiment::{output_root, run_matrix, summarize, ExperimentConfig};
use clusterguard_core::robustness::{approx_check, certify, InstanceGenerator, InstanceKind};

#[derive(Parser)]
#[command(name = "clusterguard", version, about = "Byzantine-robust aggregation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment matrix and write per-cell logs and result tables.
    Run {
        /// TOML config; omitted keys take the default matrix.
        #[arg(short, long)]
        config: Option<PathBuf>,
        /// Override a config key, e.g. `--set training.rounds=50 --set seeds=[0,1]`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Output root (default: config `output`, then $CLUSTERGUARD_OUT, then ./results).
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// Replace results of an earlier run with the same name.
        #[arg(long)]
        force: bool,
        /// Worker threads (default: all cores).
        #[arg(long)]
        threads: Option<usize>,
        /// Print the resolved config and exit without running.
        #[arg(long)]
        dry_run: bool,
    },
    /// Measure robustness criteria on random instances against closed-form bounds.
    Certify {
        /// Rules to measure (comma separated or repeated).
        #[arg(long = "rule", required = true, value_delimiter = ',', value_parser = parse_rule)]
        rules: Vec<AggregatorSpec>,
        /// Rule whose bounds are checked (default: the measured rule).
        #[arg(long, value_parser = parse_rule)]
        against: Option<AggregatorSpec>,
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long, default_value_t = 2)]
        f: usize,
        #[arg(long, default_value_t = 3)]
        d: usize,
        #[arg(long, default_value_t = 500)]
        trials: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Instance family: gaussian, far, near, tight, ring or mixed.
        #[arg(long, default_value = "mixed", value_parser = parse_kind)]
        kind: InstanceKind,
        /// Upper end of the ζ criterion's δ range (default f/n).
        #[arg(long)]
        delta_max: Option<f64>,
        /// Write the report here instead of stdout.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Summarize a result directory into a worst-case ranking and accuracy series.
    Summarize {
        /// Directory written by `run` (the one holding manifest.json).
        dir: PathBuf,
    },
    /// Compare medoid clustering with the exact optimum on random instances.
    ApproxCheck {
        #[arg(long, default_value_t = 1000)]
        trials: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 12)]
        n_max: usize,
        #[arg(long, default_value_t = 4)]
        d_max: usize,
    },
}

fn parse_rule(s: &str) -> Result<AggregatorSpec, String> {
    s.parse().map_err(|e: clusterguard_core::Error| e.to_string())
}

fn parse_kind(s: &str) -> Result<InstanceKind, String> {
    s.parse().map_err(|e: clusterguard_core::Error| e.to_string())
}

/// `Ok(true)` when everything succeeded, `Ok(false)` when the command ran
/// but found failures.
fn execute(cmd: Command) -> Result<bool> {
    match cmd {
        Command::Run {
            config,
            overrides,
            out,
            force,
            threads,
            dry_run,
        } => {
            let cfg = ExperimentConfig::load(config.as_deref(), &overrides)?;
            if dry_run {
                print!("{}", cfg.to_toml()?);
                return Ok(true);
            }
            if let Some(t) = threads {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(t)
                    .build_global()
                    .context("configuring the thread pool")?;
            }
            let root = output_root(out.as_deref(), &cfg);
            eprintln!("running {} cells into {}", cfg.plan().len(), root.join(&cfg.name).display());
            let outcome = run_matrix(&cfg, &root, force)?;
            print!("{}", outcome.table.worst_tsv());
            let failed: Vec<_> = outcome.failures().collect();
            for (cell, message) in &failed {
                eprintln!("cell {} failed: {message}", cell.id());
            }
            eprintln!("results in {}", outcome.dir.display());
            Ok(failed.is_empty())
        }
        Command::Certify {
            rules,
            against,
            n,
            f,
            d,
            trials,
            seed,
            kind,
            delta_max,
            out,
        } => {
            let generator = InstanceGenerator::new(n, f, d, kind)?;
            let mut report = String::new();
            let mut ok = true;
            for rule in &rules {
                let target = against.as_ref().unwrap_or(rule);
                let c = certify(rule, target, &generator, trials, seed, delta_max)?;
                ok &= c.all_passed();
                report.push_str(&c.to_text());
            }
            match out {
                Some(path) => std::fs::write(&path, &report).with_context(|| format!("writing {}", path.display()))?,
                None => std::io::stdout().write_all(report.as_bytes())?,
            }
            Ok(ok)
        }
        Command::Summarize { dir } => {
            let s = summarize(&dir)?;
            print!("{}", s.table.ranking_tsv());
            for p in &s.problems {
                eprintln!("skipped: {p}");
            }
            eprintln!("wrote {}", dir.join("summary").display());
            Ok(s.problems.is_empty())
        }
        Command::ApproxCheck {
            trials,
            seed,
            n_max,
            d_max,
        } => {
            let r = approx_check(trials, seed, n_max, d_max)?;
            println!(
                "{} instances, worst ratio center {:.6} mean {:.6}, {} violations",
                r.instances,
                r.worst_ratio[0],
                r.worst_ratio[1],
                r.violations.len()
            );
            for v in &r.violations {
                println!("violation: {v}");
            }
            Ok(r.passed())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            // bad configs and parameters are usage errors
            use clusterguard_core::Error as E;
            let usage = e.downcast_ref::<E>().is_some_and(|e| {
                matches!(
                    e,
                    E::Config(_) | E::InvalidParameter(_) | E::InvalidOutlierBudget { .. } | E::EnumerationCapExceeded { .. }
                )
            });
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}
