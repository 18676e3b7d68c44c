//! Experiment configuration: TOML with sections, strict keys, dotted
//! `key=value` overrides and a canonical form used for hashing.

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use fedhybrid::attacks::AttackParams;
use fedhybrid::defenses::{DefenseKind, DefenseParams};
use fedhybrid::federation::RoundConfig;
use fedhybrid::scenarios::{ExperimentSpec, ModelConfig, TaskConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Scenario {
    /// `"none"`, one attack, `"X + Y"` or `"X / Y"`.
    pub attack: String,
    pub defense: DefenseKind,
    pub ratio: f64,
    pub rounds: usize,
    pub psi_window: usize,
    pub assumed_attackers: Option<usize>,
    pub allow_majority: bool,
}

impl Default for Scenario {
    fn default() -> Self {
        let e = ExperimentSpec::default();
        Self {
            attack: e.attack,
            defense: e.defense,
            ratio: e.ratio,
            rounds: e.rounds,
            psi_window: e.psi_window,
            assumed_attackers: e.assumed_attackers,
            allow_majority: e.allow_majority,
        }
    }
}

/// Grid axes for `sweep`; an empty list falls back to the scenario value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Sweep {
    pub attacks: Vec<String>,
    pub defenses: Vec<DefenseKind>,
    pub ratios: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub seeds: Vec<u64>,
    /// Output directory; relative paths resolve against the output root.
    pub output: Option<String>,
    pub scenario: Scenario,
    pub task: TaskConfig,
    pub model: ModelConfig,
    pub federation: RoundConfig,
    pub attack_params: AttackParams,
    pub defense_params: DefenseParams,
    pub sweep: Sweep,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seeds: vec![0],
            output: None,
            scenario: Scenario::default(),
            task: TaskConfig::default(),
            model: ModelConfig::default(),
            federation: RoundConfig::default(),
            attack_params: AttackParams::default(),
            defense_params: DefenseParams::default(),
            sweep: Sweep::default(),
        }
    }
}

/// One grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub attack: String,
    pub defense: DefenseKind,
    pub ratio: f64,
    pub seed: u64,
}

impl Config {
    /// Parse `text`, apply `overrides` (`a.b=value`) and check every key.
    pub fn load(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: Table = text.parse().map_err(|e: toml::de::Error| anyhow!("config: {e}"))?;
        let schema = schema();
        check_keys(&doc, &schema, "", Some(text))?;
        for item in overrides {
            let (path, value) = parse_override(item)?;
            let mut single = Table::new();
            insert_path(&mut single, &path, value.clone())?;
            check_keys(&single, &schema, "", None)?;
            insert_path(&mut doc, &path, value)?;
        }
        let cfg: Config = Value::Table(doc).try_into().map_err(|e: toml::de::Error| anyhow!("config: {e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            bail!("config: `seeds` must list at least one seed");
        }
        for cell in self.cells(&[]) {
            self.experiment(&cell)
                .validate()
                .with_context(|| format!("config: cell {} / {} / ratio {}", cell.attack, cell.defense, cell.ratio))?;
        }
        Ok(())
    }

    pub fn experiment(&self, cell: &Cell) -> ExperimentSpec {
        ExperimentSpec {
            task: self.task.clone(),
            model: self.model.clone(),
            federation: self.federation,
            rounds: self.scenario.rounds,
            ratio: cell.ratio,
            attack: cell.attack.clone(),
            attack_params: self.attack_params,
            defense: cell.defense,
            defense_params: self.defense_params.clone(),
            assumed_attackers: self.scenario.assumed_attackers,
            seed: cell.seed,
            psi_window: self.scenario.psi_window,
            allow_majority: self.scenario.allow_majority,
        }
    }

    /// Sweep grid (attack x defense x ratio x seed); `ratios` overrides the
    /// configured axis when non-empty.
    pub fn cells(&self, ratios: &[f64]) -> Vec<Cell> {
        let or = |v: &[String], d: &String| if v.is_empty() { vec![d.clone()] } else { v.to_vec() };
        let attacks = or(&self.sweep.attacks, &self.scenario.attack);
        let defenses = if self.sweep.defenses.is_empty() { vec![self.scenario.defense] } else { self.sweep.defenses.clone() };
        let ratios = if !ratios.is_empty() {
            ratios.to_vec()
        } else if !self.sweep.ratios.is_empty() {
            self.sweep.ratios.clone()
        } else {
            vec![self.scenario.ratio]
        };
        let mut out = Vec::new();
        for attack in &attacks {
            for &defense in &defenses {
                for &ratio in &ratios {
                    for &seed in &self.seeds {
                        out.push(Cell { attack: attack.clone(), defense, ratio, seed });
                    }
                }
            }
        }
        out
    }

    /// The single-run cells (scenario values, every seed).
    pub fn run_cells(&self) -> Vec<Cell> {
        self.seeds
            .iter()
            .map(|&seed| Cell {
                attack: self.scenario.attack.clone(),
                defense: self.scenario.defense,
                ratio: self.scenario.ratio,
                seed,
            })
            .collect()
    }

    /// Fully resolved configuration of one cell.
    pub fn for_cell(&self, cell: &Cell) -> Config {
        let mut c = self.clone();
        c.seeds = vec![cell.seed];
        c.scenario.attack = cell.attack.clone();
        c.scenario.defense = cell.defense;
        c.scenario.ratio = cell.ratio;
        c.sweep = Sweep::default();
        c
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).context("serializing config")
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }
}

/// Default config with every optional key present, as a key tree.
fn schema() -> Table {
    let mut c = Config {
        output: Some(String::new()),
        ..Config::default()
    };
    c.scenario.assumed_attackers = Some(0);
    c.attack_params.nt_pgd_steps = Some(0);
    c.defense_params.multikrum_c = Some(0);
    c.defense_params.hybrid_attackers = Some(0);
    match Value::try_from(c).expect("default config serializes") {
        Value::Table(t) => t,
        _ => unreachable!("config serializes to a table"),
    }
}

fn check_keys(doc: &Table, schema: &Table, prefix: &str, text: Option<&str>) -> Result<()> {
    for (key, value) in doc {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        match schema.get(key) {
            None => {
                let nearest = schema
                    .keys()
                    .map(|k| (strsim::levenshtein(key, k), k))
                    .min()
                    .map(|(_, k)| k.clone())
                    .unwrap_or_default();
                let at = text.and_then(|t| line_of(t, prefix, key)).map(|l| format!(" (line {l})")).unwrap_or_default();
                let full = if prefix.is_empty() { nearest } else { format!("{prefix}.{nearest}") };
                bail!("config: unknown key `{path}`{at}; did you mean `{full}`?");
            }
            Some(Value::Table(sub)) => match value {
                Value::Table(inner) => check_keys(inner, sub, &path, text)?,
                _ => bail!("config: `{path}` must be a table"),
            },
            Some(_) => {}
        }
    }
    Ok(())
}

/// Line (1-based) where `key` is assigned inside table `section`.
fn line_of(text: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(header) = line.strip_prefix('[') {
            current = header.trim_end_matches(']').trim().to_string();
            continue;
        }
        if let Some((lhs, _)) = line.split_once('=') {
            let lhs = lhs.trim().trim_matches('"');
            let (sec, name) = match lhs.rsplit_once('.') {
                Some((s, n)) if current.is_empty() => (s.to_string(), n),
                Some((s, n)) => (format!("{current}.{s}"), n),
                None => (current.clone(), lhs),
            };
            if sec == section && name == key {
                return Some(i + 1);
            }
        }
    }
    None
}

fn parse_override(item: &str) -> Result<(Vec<String>, Value)> {
    let (path, raw) = item
        .split_once('=')
        .ok_or_else(|| anyhow!("override `{item}` must look like key=value"))?;
    let path: Vec<String> = path.trim().split('.').map(str::to_string).collect();
    if path.iter().any(|p| p.is_empty()) {
        bail!("override `{item}` has an empty key segment");
    }
    // TOML literal if it parses, bare string otherwise.
    let value = format!("v = {}", raw.trim())
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.trim().to_string()));
    Ok((path, value))
}

fn insert_path(doc: &mut Table, path: &[String], value: Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut table = doc;
    for p in parents {
        let entry = table.entry(p.clone()).or_insert_with(|| Value::Table(Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| anyhow!("override: `{p}` is not a table"))?;
    }
    table.insert(last.clone(), value);
    Ok(())
}
