//! Poisoning algorithms. Every attacker has full knowledge of the round: the
//! benign updates and momenta, the global weights and the pooled attacker data.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{flip_labels, Dataset};
use crate::error::{Error, Result};
use crate::federation::{advance_momentum, local_sgd, ClientUpdate, RoundConfig};
use crate::model::{accuracy, Batch, ModelSpec};
use crate::numerics::{mean, Rng, WeightVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AttackKind {
    #[serde(rename = "IPM")]
    Ipm,
    #[serde(rename = "MinMax")]
    MinMax,
    #[serde(rename = "ROP")]
    Rop,
    #[serde(rename = "SF")]
    SignFlip,
    #[serde(rename = "NT")]
    Neurotoxin,
    #[serde(rename = "TrapSetter")]
    TrapSetter,
}

impl AttackKind {
    pub const ALL: [AttackKind; 6] = [
        AttackKind::Ipm,
        AttackKind::MinMax,
        AttackKind::Rop,
        AttackKind::SignFlip,
        AttackKind::Neurotoxin,
        AttackKind::TrapSetter,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Ipm => "IPM",
            AttackKind::MinMax => "MinMax",
            AttackKind::Rop => "ROP",
            AttackKind::SignFlip => "SF",
            AttackKind::Neurotoxin => "NT",
            AttackKind::TrapSetter => "TrapSetter",
        }
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttackKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .trim()
            .chars()
            .filter(|c| !matches!(c, '-' | '_' | ' '))
            .collect::<String>()
            .to_ascii_lowercase();
        Ok(match key.as_str() {
            "ipm" => AttackKind::Ipm,
            "minmax" => AttackKind::MinMax,
            "rop" => AttackKind::Rop,
            "sf" | "signflip" => AttackKind::SignFlip,
            "nt" | "neurotoxin" => AttackKind::Neurotoxin,
            "trapsetter" => AttackKind::TrapSetter,
            _ => return Err(Error::Config(format!("unknown attack `{}`", s.trim()))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrapSetterParams {
    pub zeta_low: f64,
    pub zeta_high: f64,
    /// Radius bounds, as multiples of the mean benign update norm.
    pub radius_low: f64,
    pub radius_high: f64,
    /// Grid step as a fraction of the sampled radius.
    pub grid_step: f64,
    pub noise_scale: f64,
}

impl Default for TrapSetterParams {
    fn default() -> Self {
        Self {
            zeta_low: 0.8,
            zeta_high: 1.2,
            radius_low: 0.5,
            radius_high: 2.0,
            grid_step: 0.5,
            noise_scale: 1.0,
        }
    }
}

impl TrapSetterParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.zeta_low > 0.0
            && self.zeta_low <= self.zeta_high
            && self.radius_low > 0.0
            && self.radius_low <= self.radius_high
            && self.grid_step > 0.0
            && self.grid_step <= 2.0
            && self.noise_scale > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("invalid trapsetter parameters {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackParams {
    pub ipm_epsilon: f64,
    pub sf_scale: f64,
    pub rop_lambda: f64,
    /// Angle between the crafted update and the reference momentum, radians.
    pub rop_angle: f64,
    pub nt_omega: f64,
    /// PGD steps; `None` uses the local step count.
    pub nt_pgd_steps: Option<usize>,
    pub nt_source: usize,
    pub nt_target: usize,
    pub trapsetter: TrapSetterParams,
}

impl Default for AttackParams {
    fn default() -> Self {
        Self {
            ipm_epsilon: 1.0,
            sf_scale: 4.0,
            rop_lambda: 0.5,
            rop_angle: PI / 3.0,
            nt_omega: 0.95,
            nt_pgd_steps: None,
            nt_source: 0,
            nt_target: 1,
            trapsetter: TrapSetterParams::default(),
        }
    }
}

impl AttackParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(self.ipm_epsilon >= 0.0) {
            return bad(format!("ipm_epsilon must be >= 0, got {}", self.ipm_epsilon));
        }
        if !(self.sf_scale > 0.0) {
            return bad(format!("sf_scale must be > 0, got {}", self.sf_scale));
        }
        if !(self.rop_lambda > 0.0 && self.rop_lambda < 1.0) {
            return bad(format!("rop_lambda must lie in (0, 1), got {}", self.rop_lambda));
        }
        if !(self.rop_angle >= 0.0 && self.rop_angle < 2.0 * PI) {
            return bad(format!("rop_angle must lie in [0, 2pi), got {}", self.rop_angle));
        }
        if !(self.nt_omega > 0.0 && self.nt_omega <= 1.0) {
            return bad(format!("nt_omega must lie in (0, 1], got {}", self.nt_omega));
        }
        if self.nt_source == self.nt_target {
            return bad("nt_source and nt_target must differ".into());
        }
        self.trapsetter.validate()
    }
}

/// Pooled attacker data, split 80/20 into training and validation parts.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackerData {
    pub train: Batch,
    pub val: Batch,
}

impl AttackerData {
    pub fn from_shards<'a>(shards: impl IntoIterator<Item = &'a Batch>, input_dim: usize, rng: &mut Rng) -> Self {
        let mut pooled = Batch::empty(input_dim);
        for s in shards {
            pooled.extend(s);
        }
        let mut order: Vec<usize> = (0..pooled.len()).collect();
        rng.shuffle(&mut order);
        let cut = (pooled.len() * 4).div_ceil(5);
        let train = pooled.select(&order[..cut]);
        // A single pooled example serves both purposes.
        let val = if cut == pooled.len() {
            train.clone()
        } else {
            pooled.select(&order[cut..])
        };
        Self { train, val }
    }
}

/// Everything an attacker group sees in one round.
pub struct AttackContext<'a> {
    pub round: usize,
    pub spec: &'a ModelSpec,
    pub cfg: &'a RoundConfig,
    pub w_global: &'a WeightVector,
    pub benign_updates: &'a [ClientUpdate],
    pub benign_momenta: &'a [WeightVector],
    /// Ids of the attackers in this group.
    pub attacker_ids: &'a [usize],
    pub num_clients: usize,
    pub data: &'a AttackerData,
}

impl AttackContext<'_> {
    fn benign_mean(&self) -> Result<WeightVector> {
        mean(self.benign_updates.iter().map(|u| &u.delta))
            .map_err(|_| Error::InsufficientBenign { needed: 1, got: 0 })
    }

    fn mean_benign_norm(&self) -> Option<f64> {
        let b = self.benign_updates.len();
        (b > 0).then(|| self.benign_updates.iter().map(|u| u.delta.norm()).sum::<f64>() / b as f64)
    }

    fn emit(&self, deltas: Vec<WeightVector>) -> Vec<ClientUpdate> {
        let per = self.data.train.len() / self.attacker_ids.len().max(1);
        self.attacker_ids
            .iter()
            .zip(deltas)
            .map(|(&id, delta)| ClientUpdate {
                client_id: id,
                delta,
                sample_count: per,
            })
            .collect()
    }
}

/// Cross-round attacker memory.
#[derive(Debug, Clone)]
pub struct AttackState {
    /// Benign aggregate momentum of the previous round.
    pub prev_benign_momentum: WeightVector,
    /// Momentum of each attacker's own submissions.
    pub attacker_momenta: BTreeMap<usize, WeightVector>,
}

impl AttackState {
    pub fn new(dim: usize) -> Self {
        Self {
            prev_benign_momentum: WeightVector::zeros(dim),
            attacker_momenta: BTreeMap::new(),
        }
    }

    pub fn finish_round(&mut self, benign_momenta: &[WeightVector], submitted: &[ClientUpdate], beta: f64) {
        if let Ok(m) = mean(benign_momenta.iter()) {
            self.prev_benign_momentum = m;
        }
        for u in submitted {
            let dim = u.delta.len();
            let m = self
                .attacker_momenta
                .entry(u.client_id)
                .or_insert_with(|| WeightVector::zeros(dim));
            advance_momentum(m, &u.delta, beta);
        }
    }
}

/// `-(epsilon / B) * sum_b delta_b`.
pub fn ipm(benign: &[ClientUpdate], epsilon: f64) -> Result<WeightVector> {
    let m = mean(benign.iter().map(|u| &u.delta)).map_err(|_| Error::InsufficientBenign { needed: 1, got: 0 })?;
    Ok(m.scaled(-epsilon))
}

fn max_distance_to(point: &WeightVector, benign: &[ClientUpdate]) -> f64 {
    benign.iter().map(|u| point.distance(&u.delta)).fold(0.0, f64::max)
}

/// Benign mean plus the largest perturbation `gamma * p` whose farthest
/// benign neighbour is no farther than the benign diameter. `direction`
/// defaults to the negated normalised benign mean.
pub fn min_max(benign: &[ClientUpdate], direction: Option<&WeightVector>) -> Result<WeightVector> {
    if benign.len() < 2 {
        return Err(Error::InsufficientBenign {
            needed: 2,
            got: benign.len(),
        });
    }
    let centre = mean(benign.iter().map(|u| &u.delta))?;
    let p = match direction {
        Some(d) => match d.normalized() {
            Some(p) => p,
            None => return Ok(centre),
        },
        None => match centre.normalized() {
            Some(p) => p.scaled(-1.0),
            None => return Ok(centre),
        },
    };
    let mut diameter = 0.0f64;
    for (i, a) in benign.iter().enumerate() {
        for b in &benign[i + 1..] {
            diameter = diameter.max(a.delta.distance(&b.delta));
        }
    }
    let candidate = |gamma: f64| {
        let mut c = centre.clone();
        c.axpy(gamma, &p);
        c
    };
    let mut gamma = 10.0;
    let mut step = gamma / 2.0;
    let mut best = 0.0;
    for _ in 0..30 {
        if max_distance_to(&candidate(gamma), benign) <= diameter {
            best = gamma;
            gamma += step;
        } else {
            gamma -= step;
        }
        step /= 2.0;
    }
    Ok(candidate(best))
}

/// Unit vector orthogonal to `reference` from a Gaussian draw.
fn orthogonal_direction(reference: &WeightVector, rng: &mut Rng) -> WeightVector {
    let dim = reference.len();
    loop {
        let mut g = rng.gaussian_vector(dim, 1.0);
        if let Some(r) = reference.normalized() {
            let proj = g.dot(&r);
            g.axpy(-proj, &r);
        }
        if let Some(u) = g.normalized() {
            return u;
        }
    }
}

/// Reference-vector orthogonal perturbation: a direction at angle `angle` to
/// `lambda * prev + (1 - lambda) * current`, scaled to `scale`.
pub fn rop(prev: &WeightVector, current: &WeightVector, lambda: f64, angle: f64, scale: f64, rng: &mut Rng) -> WeightVector {
    let mut reference = prev.scaled(lambda);
    reference.axpy(1.0 - lambda, current);
    let rho = orthogonal_direction(&reference, rng);
    match reference.normalized() {
        Some(r) => {
            let mut out = rho.scaled(angle.sin());
            out.axpy(angle.cos(), &r);
            out.scaled(scale)
        }
        None => rho.scaled(scale),
    }
}

pub fn sign_flip(honest: &WeightVector, scale: f64) -> WeightVector {
    honest.scaled(-scale)
}

/// Coordinates holding the `ceil(omega * d)` smallest magnitudes of `reference`
/// (ties by index).
pub fn neurotoxin_mask(reference: &WeightVector, omega: f64) -> Vec<bool> {
    let d = reference.len();
    let keep = ((omega * d as f64).ceil() as usize).min(d);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| reference[a].abs().total_cmp(&reference[b].abs()).then(a.cmp(&b)));
    let mut mask = vec![false; d];
    for &i in &order[..keep] {
        mask[i] = true;
    }
    mask
}

/// Projected SGD on poisoned data: off-mask coordinates of the running delta
/// are zeroed after every step.
pub fn neurotoxin(
    spec: &ModelSpec,
    w: &WeightVector,
    poisoned: &Batch,
    cfg: &RoundConfig,
    mask: &[bool],
    steps: usize,
    rng: &mut Rng,
) -> Result<WeightVector> {
    let step_cfg = RoundConfig { local_steps: 1, ..*cfg };
    let mut local = w.clone();
    for _ in 0..steps {
        let step = local_sgd(spec, &local, poisoned, &step_cfg, rng)?;
        for (i, s) in step.iter().enumerate() {
            local[i] = if mask[i] { local[i] - s } else { w[i] };
        }
    }
    Ok(w.sub(&local))
}

/// Result of the two-direction grid search.
#[derive(Debug, Clone, PartialEq)]
pub struct Trap {
    pub weight: WeightVector,
    pub kappa: (f64, f64),
    pub objective: f64,
    pub evaluated: usize,
}

/// Grid values `-r, -r + step, ..., r`.
pub fn trap_grid(r: f64, step: f64) -> Vec<f64> {
    let n = ((2.0 * r / step) + 1e-9).floor() as usize;
    (0..=n).map(|i| -r + i as f64 * step).collect()
}

/// Minimise `objective` over `w_tilde + k1 p1 + k2 p2` on the grid, skipping
/// points farther than `r` from `w_tilde`. Ties keep the first point in scan
/// order (ascending `k1`, then `k2`).
pub fn trap_search(
    w_tilde: &WeightVector,
    p1: &WeightVector,
    p2: &WeightVector,
    r: f64,
    step: f64,
    mut objective: impl FnMut(&WeightVector) -> Result<f64>,
) -> Result<Trap> {
    if !(r > 0.0) || !(step > 0.0) || step > 2.0 * r {
        return Err(Error::InvalidParameter(format!("trap search needs r > 0 and 0 < step <= 2r (r = {r}, step = {step})")));
    }
    let cos = p1.dot(p2);
    let grid = trap_grid(r, step);
    let mut best: Option<Trap> = None;
    let mut evaluated = 0;
    for &k1 in &grid {
        for &k2 in &grid {
            let dist = (k1 * k1 + k2 * k2 + 2.0 * k1 * k2 * cos).max(0.0).sqrt();
            if dist > r * (1.0 + 1e-12) {
                continue;
            }
            let mut cand = w_tilde.clone();
            cand.axpy(k1, p1);
            cand.axpy(k2, p2);
            let value = objective(&cand)?;
            evaluated += 1;
            if best.as_ref().is_none_or(|b| value < b.objective) {
                best = Some(Trap {
                    weight: cand,
                    kappa: (k1, k2),
                    objective: value,
                    evaluated: 0,
                });
            }
        }
    }
    let mut trap = best.ok_or_else(|| Error::InvalidParameter("no feasible grid point".into()))?;
    trap.evaluated = evaluated;
    Ok(trap)
}

/// Per-attacker intermediate values of the trap attack.
#[derive(Debug, Clone)]
pub struct TrapCraft {
    pub w_tilde: WeightVector,
    pub trap: Trap,
    pub zeta: f64,
    pub radius: f64,
    pub delta: WeightVector,
}

/// `(zeta / A) [M (w - w_hat) - (B / zeta) (w - w_tilde)]`.
pub fn trapsetter_update(w: &WeightVector, w_hat: &WeightVector, w_tilde: &WeightVector, zeta: f64, a: usize, b: usize, m: usize) -> WeightVector {
    let mut out = w.sub(w_hat).scaled(m as f64);
    out.axpy(-(b as f64) / zeta, &w.sub(w_tilde));
    out.scaled(zeta / a as f64)
}

pub fn trapsetter_detailed(ctx: &AttackContext<'_>, params: &TrapSetterParams, rng: &mut Rng) -> Result<Vec<TrapCraft>> {
    params.validate()?;
    let a = ctx.attacker_ids.len();
    let b = ctx.benign_updates.len();
    let m = ctx.num_clients;
    let w = ctx.w_global;
    let mut out = Vec::with_capacity(a);
    for _ in 0..a {
        let honest = local_sgd(ctx.spec, w, &ctx.data.train, ctx.cfg, rng)?;
        let w_tilde = w.sub(&honest);
        let zeta = rng.uniform_range(params.zeta_low, params.zeta_high);
        let scale = ctx.mean_benign_norm().unwrap_or_else(|| honest.norm());
        let radius = rng.uniform_range(params.radius_low, params.radius_high) * scale;
        let p2 = loop {
            if let Some(p) = rng.gaussian_vector(w.len(), params.noise_scale).normalized() {
                break p;
            }
        };
        let p1 = match honest.normalized() {
            Some(h) => h.scaled(-1.0),
            None => loop {
                if let Some(p) = rng.gaussian_vector(w.len(), 1.0).normalized() {
                    break p;
                }
            },
        };
        let trap = if radius > 0.0 {
            trap_search(&w_tilde, &p1, &p2, radius, params.grid_step * radius, |cand| {
                accuracy(ctx.spec, cand, &ctx.data.val)
            })?
        } else {
            Trap {
                weight: w_tilde.clone(),
                kappa: (0.0, 0.0),
                objective: accuracy(ctx.spec, &w_tilde, &ctx.data.val)?,
                evaluated: 1,
            }
        };
        let delta = trapsetter_update(w, &trap.weight, &w_tilde, zeta, a, b, m);
        out.push(TrapCraft {
            w_tilde,
            trap,
            zeta,
            radius,
            delta,
        });
    }
    Ok(out)
}

/// Poisoned updates of one attacker group for one round.
pub fn craft(kind: AttackKind, ctx: &AttackContext<'_>, params: &AttackParams, state: &mut AttackState, rng: &mut Rng) -> Result<Vec<ClientUpdate>> {
    params.validate()?;
    let a = ctx.attacker_ids.len();
    let deltas = match kind {
        AttackKind::Ipm => vec![ipm(ctx.benign_updates, params.ipm_epsilon)?; a],
        AttackKind::MinMax => vec![min_max(ctx.benign_updates, None)?; a],
        AttackKind::Rop => {
            // Mean momentum over every client, attackers contributing the
            // momentum of their previous submissions.
            let dim = ctx.w_global.len();
            let zero = WeightVector::zeros(dim);
            let all = ctx
                .benign_momenta
                .iter()
                .chain(ctx.attacker_ids.iter().map(|id| state.attacker_momenta.get(id).unwrap_or(&zero)));
            let current = mean(all)?;
            let scale = ctx
                .mean_benign_norm()
                .ok_or(Error::InsufficientBenign { needed: 1, got: 0 })?;
            let v = rop(&state.prev_benign_momentum, &current, params.rop_lambda, params.rop_angle, scale, rng);
            vec![v; a]
        }
        AttackKind::SignFlip => (0..a)
            .map(|_| local_sgd(ctx.spec, ctx.w_global, &ctx.data.train, ctx.cfg, rng).map(|h| sign_flip(&h, params.sf_scale)))
            .collect::<Result<_>>()?,
        AttackKind::Neurotoxin => {
            let reference = ctx.benign_mean()?;
            let mask = neurotoxin_mask(&reference, params.nt_omega);
            let pool = Dataset {
                name: "attacker".into(),
                num_classes: ctx.spec.num_classes,
                data: ctx.data.train.clone(),
            };
            let poisoned = flip_labels(&pool, params.nt_source, params.nt_target)?;
            let steps = params.nt_pgd_steps.unwrap_or(ctx.cfg.local_steps);
            (0..a)
                .map(|_| neurotoxin(ctx.spec, ctx.w_global, &poisoned, ctx.cfg, &mask, steps, rng))
                .collect::<Result<_>>()?
        }
        AttackKind::TrapSetter => trapsetter_detailed(ctx, &params.trapsetter, rng)?
            .into_iter()
            .map(|t| t.delta)
            .collect(),
    };
    Ok(ctx.emit(deltas))
}

/// A set of attackers bound to a per-round schedule of algorithms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackGroup {
    /// Positions in the sorted attacker id list.
    pub attackers: Vec<usize>,
    pub schedule: Vec<AttackKind>,
}

impl AttackGroup {
    pub fn attack_at(&self, round: usize) -> AttackKind {
        self.schedule[round % self.schedule.len()]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackPlan {
    pub groups: Vec<AttackGroup>,
}

impl AttackPlan {
    pub fn none() -> Self {
        Self { groups: Vec::new() }
    }

    pub fn single(kind: AttackKind, attackers: usize) -> Self {
        Self {
            groups: vec![AttackGroup {
                attackers: (0..attackers).collect(),
                schedule: vec![kind],
            }],
        }
    }

    /// Algorithms active in `round`, one per non-empty group.
    pub fn attacks_at(&self, round: usize) -> Vec<AttackKind> {
        self.groups
            .iter()
            .filter(|g| !g.attackers.is_empty())
            .map(|g| g.attack_at(round))
            .collect()
    }
}

/// Parse a scenario description for `attackers` attackers:
/// `"X"` is a single attack, `"X + Y"` splits the attackers into two fixed
/// groups (first group takes the odd one out), `"X / Y"` makes every attacker
/// alternate between the algorithms round by round. `"none"` is the empty plan.
pub fn build_plan(desc: &str, attackers: usize) -> Result<AttackPlan> {
    let desc = desc.trim();
    if desc.is_empty() || desc.eq_ignore_ascii_case("none") {
        return Ok(AttackPlan::none());
    }
    let parse_all = |sep: char| -> Result<Vec<AttackKind>> { desc.split(sep).map(str::parse).collect() };
    if desc.contains('+') && desc.contains('/') {
        return Err(Error::Config(format!("cannot mix `+` and `/` in attack `{desc}`")));
    }
    if desc.contains('+') {
        let kinds = parse_all('+')?;
        let n = kinds.len();
        let base = attackers / n;
        let extra = attackers % n;
        let mut start = 0;
        let groups = kinds
            .into_iter()
            .enumerate()
            .map(|(i, k)| {
                let size = base + usize::from(i < extra);
                let g = AttackGroup {
                    attackers: (start..start + size).collect(),
                    schedule: vec![k],
                };
                start += size;
                g
            })
            .collect();
        return Ok(AttackPlan { groups });
    }
    let schedule = parse_all('/')?;
    Ok(AttackPlan {
        groups: vec![AttackGroup {
            attackers: (0..attackers).collect(),
            schedule,
        }],
    })
}
