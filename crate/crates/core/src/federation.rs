//! Round engine: broadcast, local SGD, poisoned-update injection,
//! aggregation and the global step.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attacks::{self, AttackParams, AttackPlan, AttackState, AttackerData};
use crate::defenses::{Aggregator, RoundInfo};
use crate::error::{Error, Result};
use crate::model::{accuracy, grad, risk, Batch, ModelSpec};
use crate::numerics::{Rng, WeightVector};

/// Local training and global step hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoundConfig {
    /// Local SGD steps per round.
    pub local_steps: usize,
    /// Mini-batch size; 0 means full batch.
    pub batch_size: usize,
    pub lr: f64,
    pub global_lr: f64,
    pub momentum_beta: f64,
}

impl Default for RoundConfig {
    fn default() -> Self {
        Self {
            local_steps: 5,
            batch_size: 32,
            lr: 0.05,
            global_lr: 1.0,
            momentum_beta: 0.9,
        }
    }
}

impl RoundConfig {
    pub fn validate(&self) -> Result<()> {
        if self.local_steps == 0 {
            return Err(Error::InvalidParameter("local_steps must be >= 1".into()));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidParameter(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if !(self.global_lr > 0.0) || !self.global_lr.is_finite() {
            return Err(Error::InvalidParameter(format!("global_lr must be > 0, got {}", self.global_lr)));
        }
        if !(0.0..1.0).contains(&self.momentum_beta) {
            return Err(Error::InvalidParameter(format!(
                "momentum_beta must lie in [0, 1), got {}",
                self.momentum_beta
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub delta: WeightVector,
    pub sample_count: usize,
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub shard: Batch,
    pub momentum: WeightVector,
    pub rng: Rng,
}

impl ClientState {
    pub fn new(id: usize, shard: Batch, dim: usize, seed: u64) -> Self {
        Self {
            id,
            shard,
            momentum: WeightVector::zeros(dim),
            rng: Rng::substream(seed, &format!("client/{id}")),
        }
    }
}

/// Draw one mini-batch; batches larger than the data are drawn with replacement.
fn minibatch(data: &Batch, batch_size: usize, rng: &mut Rng) -> Option<Batch> {
    if batch_size == 0 {
        return None;
    }
    let n = data.len();
    let idx = if batch_size <= n {
        rng.sample_indices(n, batch_size)
    } else {
        (0..batch_size).map(|_| rng.index(n)).collect()
    };
    Some(data.select(&idx))
}

/// Run `cfg.local_steps` SGD steps from `w` and return `w - w_local`.
pub fn local_sgd(spec: &ModelSpec, w: &WeightVector, data: &Batch, cfg: &RoundConfig, rng: &mut Rng) -> Result<WeightVector> {
    if data.is_empty() {
        return Err(Error::EmptyEvaluationSet);
    }
    let mut local = w.clone();
    for _ in 0..cfg.local_steps {
        let g = match minibatch(data, cfg.batch_size, rng) {
            Some(b) => grad(spec, &local, &b)?,
            None => grad(spec, &local, data)?,
        };
        local.axpy(-cfg.lr, &g);
    }
    Ok(w.sub(&local))
}

/// Honest update of one client; also advances its momentum
/// `m <- (1 - beta) delta + beta m`.
pub fn local_update(spec: &ModelSpec, client: &mut ClientState, w_global: &WeightVector, cfg: &RoundConfig) -> Result<ClientUpdate> {
    let delta = local_sgd(spec, w_global, &client.shard, cfg, &mut client.rng)?;
    advance_momentum(&mut client.momentum, &delta, cfg.momentum_beta);
    Ok(ClientUpdate {
        client_id: client.id,
        delta,
        sample_count: client.shard.len(),
    })
}

pub fn advance_momentum(m: &mut WeightVector, delta: &WeightVector, beta: f64) {
    for (mi, di) in m.iter_mut().zip(delta.iter()) {
        *mi = (1.0 - beta) * di + beta * *mi;
    }
}

/// Unweighted mean of the deltas.
pub fn fedavg(updates: &[ClientUpdate]) -> Result<WeightVector> {
    crate::numerics::mean(updates.iter().map(|u| &u.delta))
}

/// Mean weighted by sample counts.
pub fn fedavg_weighted(updates: &[ClientUpdate]) -> Result<WeightVector> {
    let first = updates.first().ok_or(Error::NoUpdates)?;
    let total: usize = updates.iter().map(|u| u.sample_count).sum();
    if total == 0 {
        return fedavg(updates);
    }
    let mut out = WeightVector::zeros(first.delta.len());
    for u in updates {
        if u.delta.len() != out.len() {
            return Err(Error::DimensionMismatch {
                expected: out.len(),
                got: u.delta.len(),
            });
        }
        out.axpy(u.sample_count as f64 / total as f64, &u.delta);
    }
    Ok(out)
}

/// Per-round telemetry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    /// Attack algorithms active this round, one per attacker group.
    pub attacks: Vec<String>,
    pub defense: String,
    /// Rule picked by a hybrid selector, if any.
    pub chosen: Option<String>,
    pub accepted_ids: Option<Vec<usize>>,
    pub fallback: Option<String>,
    pub test_accuracy: f64,
    pub test_risk: f64,
    pub update_norm: f64,
    pub diagnostics: BTreeMap<String, f64>,
    /// Seconds spent in this round. Not part of the reproducible output.
    #[serde(skip)]
    pub wall_time: f64,
    /// Seconds spent inside the aggregation rule.
    #[serde(skip)]
    pub aggregation_time: f64,
}

/// Complete simulation state for one run.
#[derive(Debug, Clone)]
pub struct Federation {
    pub spec: ModelSpec,
    pub cfg: RoundConfig,
    pub w: WeightVector,
    pub clients: Vec<ClientState>,
    /// Sorted attacker ids.
    pub attackers: Vec<usize>,
    pub attacker_data: AttackerData,
    pub attack_params: AttackParams,
    pub reference: Batch,
    pub test: Batch,
    pub round: usize,
    pub total_rounds: usize,
    pub seed: u64,
    attack_state: AttackState,
}

impl Federation {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        spec: ModelSpec,
        cfg: RoundConfig,
        w0: WeightVector,
        shards: Vec<Batch>,
        mut attackers: Vec<usize>,
        attack_params: AttackParams,
        reference: Batch,
        test: Batch,
        total_rounds: usize,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if w0.len() != spec.dim() {
            return Err(Error::DimensionMismatch {
                expected: spec.dim(),
                got: w0.len(),
            });
        }
        if shards.is_empty() {
            return Err(Error::NoUpdates);
        }
        attackers.sort_unstable();
        attackers.dedup();
        if let Some(&bad) = attackers.iter().find(|&&a| a >= shards.len()) {
            return Err(Error::InvalidParameter(format!("attacker id {bad} out of range")));
        }
        let attacker_data = AttackerData::from_shards(
            attackers.iter().map(|&a| &shards[a]),
            spec.input_dim,
            &mut Rng::substream(seed, "attacker-data"),
        );
        let dim = spec.dim();
        let clients = shards
            .into_iter()
            .enumerate()
            .map(|(id, shard)| ClientState::new(id, shard, dim, seed))
            .collect();
        Ok(Self {
            spec,
            cfg,
            w: w0,
            clients,
            attackers,
            attacker_data,
            attack_params,
            reference,
            test,
            round: 0,
            total_rounds,
            seed,
            attack_state: AttackState::new(dim),
        })
    }

    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn is_attacker(&self, id: usize) -> bool {
        self.attackers.binary_search(&id).is_ok()
    }

    /// Honest updates of every benign client, ascending id.
    pub fn benign_updates(&mut self) -> Result<Vec<ClientUpdate>> {
        let (spec, cfg, w) = (&self.spec, &self.cfg, &self.w);
        let attackers = &self.attackers;
        self.clients
            .iter_mut()
            .filter(|c| attackers.binary_search(&c.id).is_err())
            .map(|c| local_update(spec, c, w, cfg))
            .collect()
    }

    /// Poisoned updates for the current round, ascending id.
    pub fn poisoned_updates(&mut self, benign: &[ClientUpdate], plan: &AttackPlan) -> Result<(Vec<ClientUpdate>, Vec<String>)> {
        if self.attackers.is_empty() {
            return Ok((Vec::new(), Vec::new()));
        }
        let benign_momenta: Vec<WeightVector> = benign
            .iter()
            .map(|u| self.clients[u.client_id].momentum.clone())
            .collect();
        let mut out = Vec::with_capacity(self.attackers.len());
        let mut names = Vec::new();
        for (g, group) in plan.groups.iter().enumerate() {
            let ids: Vec<usize> = group.attackers.iter().map(|&slot| self.attackers[slot]).collect();
            if ids.is_empty() {
                continue;
            }
            let kind = group.attack_at(self.round);
            names.push(kind.name().to_string());
            let mut rng = Rng::substream(self.seed, &format!("attack/{}/{g}", self.round));
            let ctx = attacks::AttackContext {
                round: self.round,
                spec: &self.spec,
                cfg: &self.cfg,
                w_global: &self.w,
                benign_updates: benign,
                benign_momenta: &benign_momenta,
                attacker_ids: &ids,
                num_clients: self.clients.len(),
                data: &self.attacker_data,
            };
            out.extend(attacks::craft(kind, &ctx, &self.attack_params, &mut self.attack_state, &mut rng)?);
        }
        self.attack_state.finish_round(&benign_momenta, &out, self.cfg.momentum_beta);
        out.sort_by_key(|u| u.client_id);
        if out.len() != self.attackers.len() {
            return Err(Error::InvalidParameter(format!(
                "attack plan covers {} of {} attackers",
                out.len(),
                self.attackers.len()
            )));
        }
        for u in &out {
            u.delta.ensure_finite("poisoned update")?;
        }
        Ok((out, names))
    }

    pub fn run_round(&mut self, rule: &mut Aggregator, plan: &AttackPlan) -> Result<RoundRecord> {
        let start = Instant::now();
        let benign = self.benign_updates()?;
        let (poisoned, attack_names) = self.poisoned_updates(&benign, plan)?;
        let mut updates = benign;
        updates.extend(poisoned);
        updates.sort_by_key(|u| u.client_id);

        let info = RoundInfo {
            spec: &self.spec,
            cfg: &self.cfg,
            w: &self.w,
            reference: &self.reference,
            round: self.round,
            total_rounds: self.total_rounds,
            seed: self.seed,
        };
        let agg_start = Instant::now();
        let outcome = rule.aggregate(&updates, &info)?;
        let aggregation_time = agg_start.elapsed().as_secs_f64();
        outcome.delta.ensure_finite("aggregate")?;
        self.w.axpy(-self.cfg.global_lr, &outcome.delta);
        self.w.ensure_finite("global weights")?;

        let record = RoundRecord {
            round: self.round,
            attacks: attack_names,
            defense: rule.name().to_string(),
            chosen: outcome.chosen,
            accepted_ids: outcome.accepted_ids,
            fallback: outcome.fallback,
            test_accuracy: accuracy(&self.spec, &self.w, &self.test)?,
            test_risk: risk(&self.spec, &self.w, &self.test)?,
            update_norm: outcome.delta.norm(),
            diagnostics: outcome.diagnostics,
            wall_time: start.elapsed().as_secs_f64(),
            aggregation_time,
        };
        self.round += 1;
        Ok(record)
    }
}
