//! Experiment orchestration: paired clean/attacked runs and the attack
//! impact metric `I = |psi_clean - psi_attacked|`, where `psi` is the mean
//! test accuracy over a trailing window of rounds.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attacks::{build_plan, AttackParams, AttackPlan};
use crate::data::{partition_dirichlet, BlobTask};
use crate::defenses::{Aggregator, DefenseKind, DefenseParams, RoundInfo};
use crate::error::{Error, Result};
use crate::federation::{ClientUpdate, Federation, RoundConfig, RoundRecord};
use crate::model::{Batch, ModelKind, ModelSpec};
use crate::numerics::{Rng, WeightVector};

/// Synthetic classification task and its split across clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub test_per_class: usize,
    pub spread: f64,
    pub clients: usize,
    pub alpha: f64,
    /// Size of the server-side reference set.
    pub ref_size: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            dim: 32,
            per_class: 600,
            test_per_class: 200,
            spread: 1.0,
            clients: 30,
            alpha: 0.5,
            ref_size: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Hidden width, used by `mlp1` only.
    pub hidden_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::SoftmaxRegression,
            hidden_dim: 32,
        }
    }
}

impl ModelConfig {
    pub fn spec(&self, input_dim: usize, classes: usize) -> ModelSpec {
        match self.kind {
            ModelKind::SoftmaxRegression => ModelSpec::softmax(input_dim, classes),
            ModelKind::Mlp1 => ModelSpec::mlp(input_dim, self.hidden_dim, classes),
        }
    }
}

/// One experiment cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSpec {
    pub task: TaskConfig,
    pub model: ModelConfig,
    pub federation: RoundConfig,
    pub rounds: usize,
    /// Poisoning ratio `A / M`.
    pub ratio: f64,
    /// `"none"`, a single attack, `"X + Y"` (groups) or `"X / Y"` (alternation).
    pub attack: String,
    pub attack_params: AttackParams,
    pub defense: DefenseKind,
    pub defense_params: DefenseParams,
    /// Attacker count given to informed rules; `None` passes the true count.
    pub assumed_attackers: Option<usize>,
    pub seed: u64,
    /// Trailing rounds averaged into the accuracy score.
    pub psi_window: usize,
    /// Permit attacker majorities (`ratio > 0.5`).
    pub allow_majority: bool,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            task: TaskConfig::default(),
            model: ModelConfig::default(),
            federation: RoundConfig::default(),
            rounds: 50,
            ratio: 0.0,
            attack: "none".into(),
            attack_params: AttackParams::default(),
            defense: DefenseKind::FedAvg,
            defense_params: DefenseParams::default(),
            assumed_attackers: None,
            seed: 0,
            psi_window: 10,
            allow_majority: false,
        }
    }
}

impl ExperimentSpec {
    pub fn attackers(&self) -> usize {
        (self.ratio * self.task.clients as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(0.0..=1.0).contains(&self.ratio) {
            return bad(format!("ratio must lie in [0, 1], got {}", self.ratio));
        }
        if self.ratio > 0.5 && !self.allow_majority {
            return bad(format!("ratio {} exceeds 0.5; set allow_majority to run it", self.ratio));
        }
        if self.rounds == 0 || self.psi_window == 0 {
            return bad("rounds and psi_window must be >= 1".into());
        }
        if self.task.clients == 0 {
            return bad("need at least one client".into());
        }
        self.federation.validate()?;
        self.attack_params.validate()?;
        self.defense_params.validate()?;
        build_plan(&self.attack, self.attackers())?;
        Ok(())
    }
}

/// Data, partition and initial weights shared by the paired runs.
#[derive(Debug, Clone)]
pub struct Setup {
    pub spec: ModelSpec,
    pub shards: Vec<Batch>,
    pub reference: Batch,
    pub test: Batch,
    pub w0: WeightVector,
    pub attackers: Vec<usize>,
}

pub fn build_setup(exp: &ExperimentSpec) -> Result<Setup> {
    let t = &exp.task;
    let mut data_rng = Rng::substream(exp.seed, "data");
    let blobs = BlobTask::new(&mut data_rng, t.classes, t.dim, t.spread)?;
    let train = blobs.sample(&mut data_rng, t.per_class, "train")?;
    let test = blobs.sample(&mut Rng::substream(exp.seed, "test"), t.test_per_class, "test")?;
    let part = partition_dirichlet(&mut Rng::substream(exp.seed, "partition"), &train, t.clients, t.alpha, t.ref_size)?;
    let spec = exp.model.spec(t.dim, t.classes);
    let w0 = spec.init_weights(&mut Rng::substream(exp.seed, "init"));
    let mut attackers = Rng::substream(exp.seed, "attackers").sample_indices(t.clients, exp.attackers());
    attackers.sort_unstable();
    Ok(Setup {
        spec,
        shards: part.client_indices.iter().map(|ix| train.select(ix)).collect(),
        reference: train.select(&part.reference_indices),
        test: test.data,
        w0,
        attackers,
    })
}

/// Accuracy trace and per-round records of a single run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub accuracy: Vec<f64>,
    pub records: Vec<RoundRecord>,
}

impl RunTrace {
    pub fn psi(&self, window: usize) -> f64 {
        let n = self.accuracy.len();
        let w = window.min(n).max(1);
        self.accuracy[n - w..].iter().sum::<f64>() / w as f64
    }
}

/// Run `exp.rounds` rounds; `attacked = false` makes every client honest.
pub fn run_trace(exp: &ExperimentSpec, setup: &Setup, attacked: bool) -> Result<RunTrace> {
    let a = setup.attackers.len();
    let (attackers, plan) = if attacked && a > 0 {
        (setup.attackers.clone(), build_plan(&exp.attack, a)?)
    } else {
        (Vec::new(), AttackPlan::none())
    };
    let mut fed = Federation::new(
        setup.spec,
        exp.federation,
        setup.w0.clone(),
        setup.shards.clone(),
        attackers,
        exp.attack_params,
        setup.reference.clone(),
        setup.test.clone(),
        exp.rounds,
        exp.seed,
    )?;
    let known = exp.assumed_attackers.unwrap_or(a);
    let mut rule = Aggregator::new(exp.defense, exp.defense_params.clone(), known, exp.task.clients);
    let mut records = Vec::with_capacity(exp.rounds);
    for _ in 0..exp.rounds {
        records.push(fed.run_round(&mut rule, &plan)?);
    }
    Ok(RunTrace {
        accuracy: records.iter().map(|r| r.test_accuracy).collect(),
        records,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpactReport {
    pub attack: String,
    pub defense: String,
    pub ratio: f64,
    pub seed: u64,
    pub psi_window: usize,
    pub psi_clean: f64,
    pub psi_attacked: f64,
    pub impact: f64,
    pub clean: RunTrace,
    pub attacked: RunTrace,
}

fn report(exp: &ExperimentSpec, clean: RunTrace, attacked: RunTrace) -> ImpactReport {
    let psi_clean = clean.psi(exp.psi_window);
    let psi_attacked = attacked.psi(exp.psi_window);
    ImpactReport {
        attack: exp.attack.clone(),
        defense: exp.defense.name().to_string(),
        ratio: exp.ratio,
        seed: exp.seed,
        psi_window: exp.psi_window,
        psi_clean,
        psi_attacked,
        impact: (psi_clean - psi_attacked).abs(),
        clean,
        attacked,
    }
}

/// Paired clean and attacked runs sharing data, partition, initial weights
/// and every benign client's random stream.
pub fn run_experiment(exp: &ExperimentSpec) -> Result<ImpactReport> {
    exp.validate()?;
    let setup = build_setup(exp)?;
    let clean = run_trace(exp, &setup, false)?;
    let attacked = if setup.attackers.is_empty() {
        clean.clone()
    } else {
        run_trace(exp, &setup, true)?
    };
    Ok(report(exp, clean, attacked))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct S1Report {
    pub reports: Vec<ImpactReport>,
    pub mean_impact: f64,
}

/// Each listed attack separately against the same defense and seed; the
/// clean run is shared.
pub fn run_s1(exp: &ExperimentSpec, attacks: &[&str]) -> Result<S1Report> {
    if attacks.is_empty() {
        return Err(Error::InvalidParameter("S-1 needs at least one attack".into()));
    }
    exp.validate()?;
    let setup = build_setup(exp)?;
    let clean = run_trace(exp, &setup, false)?;
    let mut reports = Vec::with_capacity(attacks.len());
    for attack in attacks {
        let cell = ExperimentSpec {
            attack: attack.to_string(),
            ..exp.clone()
        };
        cell.validate()?;
        let attacked = if setup.attackers.is_empty() {
            clean.clone()
        } else {
            run_trace(&cell, &setup, true)?
        };
        reports.push(report(&cell, clean.clone(), attacked));
    }
    let mean_impact = reports.iter().map(|r| r.impact).sum::<f64>() / reports.len() as f64;
    Ok(S1Report { reports, mean_impact })
}

/// Two attacker groups, each bound to one algorithm (`"X + Y"`).
pub fn run_s2(exp: &ExperimentSpec) -> Result<ImpactReport> {
    if !exp.attack.contains('+') {
        return Err(Error::Config(format!("S-2 expects `X + Y`, got `{}`", exp.attack)));
    }
    run_experiment(exp)
}

/// All attackers alternate between algorithms round by round (`"X / Y"`).
pub fn run_s3(exp: &ExperimentSpec) -> Result<ImpactReport> {
    if !exp.attack.contains('/') {
        return Err(Error::Config(format!("S-3 expects `X / Y`, got `{}`", exp.attack)));
    }
    run_experiment(exp)
}

/// Median over any non-empty slice.
pub fn median_of(values: &[f64]) -> f64 {
    crate::defenses::median_value(&mut values.to_vec())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimingSpec {
    pub clients: usize,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub classes: usize,
    pub rounds: usize,
    pub defenses: Vec<DefenseKind>,
    pub seed: u64,
}

impl Default for TimingSpec {
    fn default() -> Self {
        Self {
            clients: 30,
            input_dim: 32,
            hidden_dim: 300,
            classes: 10,
            rounds: 20,
            defenses: DefenseKind::ALL.to_vec(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseTiming {
    pub defense: DefenseKind,
    /// Median seconds per aggregation call.
    pub median_seconds: f64,
}

/// Median wall time per aggregation call on synthetic updates of an MLP
/// sized model. Informed rules assume the hybrid default attacker count.
pub fn time_defenses(spec: &TimingSpec) -> Result<Vec<DefenseTiming>> {
    let model = ModelSpec::mlp(spec.input_dim, spec.hidden_dim, spec.classes);
    let d = model.dim();
    let mut rng = Rng::substream(spec.seed, "timing");
    let task = BlobTask::new(&mut rng, spec.classes, spec.input_dim, 1.0)?;
    let reference = task.sample(&mut rng, 10, "reference")?.data;
    let w = model.init_weights(&mut rng);
    let cfg = RoundConfig::default();
    let assumed = (spec.clients / 2).saturating_sub(1);
    let rounds: Vec<Vec<ClientUpdate>> = (0..spec.rounds)
        .map(|_| {
            let centre = rng.gaussian_vector(d, 0.01);
            (0..spec.clients)
                .map(|i| ClientUpdate {
                    client_id: i,
                    delta: centre.add(&rng.gaussian_vector(d, 0.01)),
                    sample_count: 1,
                })
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(spec.defenses.len());
    for &kind in &spec.defenses {
        let mut rule = Aggregator::new(kind, DefenseParams::default(), assumed, spec.clients);
        let mut times = Vec::with_capacity(spec.rounds);
        for (k, updates) in rounds.iter().enumerate() {
            let info = RoundInfo {
                spec: &model,
                cfg: &cfg,
                w: &w,
                reference: &reference,
                round: k,
                total_rounds: spec.rounds,
                seed: spec.seed,
            };
            let start = Instant::now();
            rule.aggregate(updates, &info)?;
            times.push(start.elapsed().as_secs_f64());
        }
        out.push(DefenseTiming {
            defense: kind,
            median_seconds: median_of(&times),
        });
    }
    Ok(out)
}
