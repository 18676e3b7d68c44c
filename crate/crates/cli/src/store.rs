//! On-disk layout of one experiment cell.
//!
//! Each cell gets its own directory holding `rounds.jsonl`, `summary.csv`
//! and `manifest.json`. The manifest is written last, so its presence
//! marks a finished cell.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use fedhybrid::federation::RoundRecord;
use fedhybrid::scenarios::ImpactReport;

use crate::config::Cell;

pub const MANIFEST: &str = "manifest.json";
pub const ROUNDS: &str = "rounds.jsonl";
pub const SUMMARY: &str = "summary.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub attack: String,
    pub defense: String,
    pub ratio: f64,
    pub seed: u64,
    pub psi_window: usize,
    pub psi_clean: f64,
    pub psi_attacked: f64,
    pub impact: f64,
}

impl From<&ImpactReport> for SummaryRow {
    fn from(r: &ImpactReport) -> Self {
        Self {
            attack: r.attack.clone(),
            defense: r.defense.clone(),
            ratio: r.ratio,
            seed: r.seed,
            psi_window: r.psi_window,
            psi_clean: r.psi_clean,
            psi_attacked: r.psi_attacked,
            impact: r.impact,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Timings {
    pub clean_seconds: f64,
    pub attacked_seconds: f64,
    pub mean_aggregation_seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub code_version: String,
    pub attack: String,
    pub defense: String,
    pub ratio: f64,
    pub seed: u64,
    /// How the reported accuracy statistic is formed.
    pub psi: String,
    pub impact: f64,
    pub timings: Timings,
    /// Resolved configuration of this cell in canonical TOML.
    pub config: String,
}

#[derive(Serialize)]
struct TaggedRecord<'a> {
    run: &'a str,
    #[serde(flatten)]
    record: &'a RoundRecord,
}

/// Directory name for a cell: readable and filesystem safe.
pub fn cell_dir(root: &Path, cell: &Cell) -> PathBuf {
    root.join(format!(
        "{}__{}__ratio{:.3}__seed{}",
        slug(&cell.attack),
        slug(cell.defense.name()),
        cell.ratio,
        cell.seed
    ))
}

pub fn slug(name: &str) -> String {
    name.replace(" + ", "+")
        .replace(" / ", "~")
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "+~-_.".contains(c) { c } else { '_' })
        .collect()
}

/// Hash stored in a finished cell, if any.
pub fn finished_hash(dir: &Path) -> Option<String> {
    let text = fs::read_to_string(dir.join(MANIFEST)).ok()?;
    let m: Manifest = serde_json::from_str(&text).ok()?;
    Some(m.config_hash)
}

pub fn write_cell(dir: &Path, report: &ImpactReport, hash: &str, config_toml: &str) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    // A stale manifest must not vouch for the files being rewritten.
    let _ = fs::remove_file(dir.join(MANIFEST));

    let mut rounds = BufWriter::new(File::create(dir.join(ROUNDS))?);
    for (run, trace) in [("clean", &report.clean), ("attacked", &report.attacked)] {
        for record in &trace.records {
            check_finite(record)?;
            serde_json::to_writer(&mut rounds, &TaggedRecord { run, record })?;
            rounds.write_all(b"\n")?;
            rounds.flush()?;
        }
    }
    drop(rounds);

    let mut csv = csv::Writer::from_path(dir.join(SUMMARY))?;
    csv.serialize(SummaryRow::from(report))?;
    csv.flush()?;

    let agg: Vec<f64> = report.attacked.records.iter().map(|r| r.aggregation_time).collect();
    let manifest = Manifest {
        config_hash: hash.to_string(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        attack: report.attack.clone(),
        defense: report.defense.clone(),
        ratio: report.ratio,
        seed: report.seed,
        psi: format!("mean test accuracy over the final {} rounds", report.psi_window),
        impact: report.impact,
        timings: Timings {
            clean_seconds: report.clean.records.iter().map(|r| r.wall_time).sum(),
            attacked_seconds: report.attacked.records.iter().map(|r| r.wall_time).sum(),
            mean_aggregation_seconds: agg.iter().sum::<f64>() / agg.len().max(1) as f64,
        },
        config: config_toml.to_string(),
    };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

fn check_finite(r: &RoundRecord) -> Result<()> {
    let mut values = vec![r.test_accuracy, r.test_risk, r.update_norm];
    values.extend(r.diagnostics.values());
    if values.iter().any(|v| !v.is_finite()) {
        bail!("round {} of {} produced a non-finite value", r.round, r.defense);
    }
    Ok(())
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let rows = rdr.deserialize().collect::<Result<Vec<SummaryRow>, _>>()?;
    Ok(rows)
}
