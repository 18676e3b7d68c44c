//! Aggregation of finished cells into plot-ready CSV files.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use serde::Serialize;

use fedhybrid::scenarios::median_of;

use crate::store::{self, SummaryRow};

#[derive(Debug, Serialize)]
struct CurvePoint {
    ratio: f64,
    seeds: usize,
    median_impact: f64,
    min_impact: f64,
    max_impact: f64,
}

pub struct ReportOutcome {
    pub rows: usize,
    pub files: Vec<PathBuf>,
    pub missing: Vec<(String, String)>,
    pub table: String,
}

/// Every `summary.csv` below `dir`, skipping the report output itself.
fn summaries(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            if path.file_name().is_some_and(|n| n == "report") {
                continue;
            }
            summaries(&path, out)?;
        } else if path.file_name().is_some_and(|n| n == store::SUMMARY) && path.with_file_name(store::MANIFEST).exists() {
            out.push(path);
        }
    }
    Ok(())
}

pub fn report(dir: &Path) -> Result<ReportOutcome> {
    if !dir.is_dir() {
        bail!("no results: {} is not a directory", dir.display());
    }
    let mut paths = Vec::new();
    summaries(dir, &mut paths)?;
    paths.sort();
    let mut rows = Vec::new();
    for p in &paths {
        rows.extend(store::read_summary(p)?);
    }
    if rows.is_empty() {
        bail!("no results under {}", dir.display());
    }
    rows.sort_by(|a, b| {
        (&a.attack, &a.defense, a.ratio, a.seed)
            .partial_cmp(&(&b.attack, &b.defense, b.ratio, b.seed))
            .expect("finite ratios")
    });

    let out_dir = dir.join("report");
    let cells_dir = out_dir.join("cells");
    fs::create_dir_all(&cells_dir)?;
    let master = out_dir.join("master.csv");
    let mut w = csv::Writer::from_path(&master)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    let mut files = vec![master];

    let mut groups: BTreeMap<(String, String), Vec<&SummaryRow>> = BTreeMap::new();
    for r in &rows {
        groups.entry((r.attack.clone(), r.defense.clone())).or_default().push(r);
    }
    let mut table = format!("{:<16} {:<12} {:>6} {:>5} {:>10}\n", "attack", "defense", "ratio", "seeds", "impact");
    for ((attack, defense), members) in &groups {
        let mut by_ratio: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
        for r in members {
            by_ratio.entry(r.ratio.to_bits()).or_default().push(r.impact);
        }
        let path = cells_dir.join(format!("{}__{}.csv", store::slug(attack), store::slug(defense)));
        let mut w = csv::Writer::from_path(&path)?;
        let mut points: Vec<CurvePoint> = by_ratio
            .into_iter()
            .map(|(bits, v)| CurvePoint {
                ratio: f64::from_bits(bits),
                seeds: v.len(),
                median_impact: median_of(&v),
                min_impact: v.iter().copied().fold(f64::INFINITY, f64::min),
                max_impact: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            })
            .collect();
        points.sort_by(|a, b| a.ratio.total_cmp(&b.ratio));
        for p in &points {
            w.serialize(p)?;
            table.push_str(&format!(
                "{:<16} {:<12} {:>6.3} {:>5} {:>10.4}\n",
                attack, defense, p.ratio, p.seeds, p.median_impact
            ));
        }
        w.flush()?;
        files.push(path);
    }

    let attacks: BTreeSet<&String> = groups.keys().map(|(a, _)| a).collect();
    let defenses: BTreeSet<&String> = groups.keys().map(|(_, d)| d).collect();
    let mut missing = Vec::new();
    for a in &attacks {
        for d in &defenses {
            if !groups.contains_key(&((*a).clone(), (*d).clone())) {
                missing.push(((*a).clone(), (*d).clone()));
            }
        }
    }
    Ok(ReportOutcome { rows: rows.len(), files, missing, table })
}
