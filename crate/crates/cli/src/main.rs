//! `fedhybrid`: run, sweep and report federated poisoning experiments.

mod config;
mod report;
mod store;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Mutex;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use rayon::prelude::*;

use fedhybrid::scenarios::run_experiment;

use config::{Cell, Config};

#[derive(Parser)]
#[command(name = "fedhybrid", version, about = "Deterministic federated-learning poisoning simulator")]
struct Cli {
    /// Replace the configured seed list with this single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override a config value, e.g. `scenario.ratio=0.3`. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output directory (default: `output` from the config under $FEDHYBRID_OUTPUT or `results`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the scenario of a config once per seed.
    Run { config: PathBuf },
    /// Run the attack x defense x ratio x seed grid; finished cells are skipped.
    Sweep {
        config: PathBuf,
        /// Comma-separated attacker ratios, replacing `sweep.ratios`.
        #[arg(long, value_delimiter = ',')]
        ratios: Vec<f64>,
    },
    /// Collect finished cells under a directory into CSV files.
    Report { dir: PathBuf },
    /// Print the default configuration.
    Defaults,
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    if let Some(n) = cli.workers {
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global()?;
    }
    match &cli.command {
        Command::Run { config } => {
            let cfg = load(&cli, config)?;
            let cells = cfg.run_cells();
            execute(&cfg, &cells, &output_dir(&cli, &cfg))
        }
        Command::Sweep { config, ratios } => {
            let cfg = load(&cli, config)?;
            let cells = cfg.cells(ratios);
            for c in &cells {
                cfg.experiment(c).validate().with_context(|| format!("cell {c:?}"))?;
            }
            execute(&cfg, &cells, &output_dir(&cli, &cfg))
        }
        Command::Report { dir } => {
            let out = report::report(dir)?;
            print!("{}", out.table);
            for (a, d) in &out.missing {
                println!("missing: {a} x {d}");
            }
            println!("{} rows, {} files under {}", out.rows, out.files.len(), dir.join("report").display());
            Ok(())
        }
        Command::Defaults => {
            print!("{}", Config::default().to_toml()?);
            Ok(())
        }
    }
}

fn load(cli: &Cli, path: &Path) -> Result<Config> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seeds=[{seed}]"));
    }
    Config::load(&text, &overrides).with_context(|| format!("in {}", path.display()))
}

fn output_dir(cli: &Cli, cfg: &Config) -> PathBuf {
    if let Some(out) = &cli.out {
        return out.clone();
    }
    let root = PathBuf::from(std::env::var("FEDHYBRID_OUTPUT").unwrap_or_else(|_| "results".into()));
    match &cfg.output {
        Some(o) => root.join(o),
        None => root,
    }
}

/// Run every unfinished cell and write all impacts to `sweep.csv`.
fn execute(cfg: &Config, cells: &[Cell], out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let skipped = Mutex::new(0usize);
    let results: Vec<Result<(Cell, f64)>> = cells
        .par_iter()
        .map(|cell| {
            let resolved = cfg.for_cell(cell);
            let hash = resolved.hash()?;
            let dir = store::cell_dir(out, cell);
            if store::finished_hash(&dir).as_deref() == Some(hash.as_str()) {
                *skipped.lock().expect("counter") += 1;
                let row = store::read_summary(&dir.join(store::SUMMARY))?;
                return Ok((cell.clone(), row.first().map_or(f64::NAN, |r| r.impact)));
            }
            let report = run_experiment(&cfg.experiment(cell)).with_context(|| format!("cell {cell:?}"))?;
            store::write_cell(&dir, &report, &hash, &resolved.to_toml()?)?;
            eprintln!(
                "{} / {} / ratio {} / seed {}: impact {:.4}",
                cell.attack, cell.defense, cell.ratio, cell.seed, report.impact
            );
            Ok((cell.clone(), report.impact))
        })
        .collect();

    let mut w = csv::Writer::from_path(out.join("sweep.csv"))?;
    w.write_record(["ratio", "attack", "defense", "seed", "impact"])?;
    let mut first_err = None;
    for r in results {
        match r {
            Ok((c, impact)) => w.write_record([
                c.ratio.to_string(),
                c.attack.clone(),
                c.defense.name().to_string(),
                c.seed.to_string(),
                impact.to_string(),
            ])?,
            Err(e) => {
                eprintln!("error: {e:#}");
                first_err.get_or_insert(e);
            }
        }
    }
    w.flush()?;
    let skipped = skipped.into_inner().expect("counter");
    println!("{} cells ({} already finished) under {}", cells.len(), skipped, out.display());
    match first_err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}
