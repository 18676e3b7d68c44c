//! Aggregation rules, from plain averaging to the two hybrid schemes.
//!
//! Every rule first orders the submitted updates by ascending client id, so
//! outputs do not depend on submission order and all ties resolve toward the
//! lowest id.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::{local_sgd, ClientUpdate, RoundConfig};
use crate::model::{risk, Batch, ModelSpec};
use crate::numerics::{
    dct2, density_cluster, largest_cluster, top_right_singular_vector, DistanceMatrix, Rng, WeightVector,
    DEFAULT_POWER_ITERS, DEFAULT_POWER_TOL,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DefenseKind {
    FedAvg,
    Median,
    TrimmedMean,
    Krum,
    MultiKrum,
    #[serde(rename = "CC")]
    CenteredClipping,
    DnC,
    SignGuard,
    FreqFed,
    Balance,
    #[serde(rename = "Hybrid-R")]
    HybridR,
    #[serde(rename = "Hybrid-NR")]
    HybridNR,
}

impl DefenseKind {
    pub const ALL: [DefenseKind; 12] = [
        DefenseKind::FedAvg,
        DefenseKind::Median,
        DefenseKind::TrimmedMean,
        DefenseKind::Krum,
        DefenseKind::MultiKrum,
        DefenseKind::CenteredClipping,
        DefenseKind::DnC,
        DefenseKind::SignGuard,
        DefenseKind::FreqFed,
        DefenseKind::Balance,
        DefenseKind::HybridR,
        DefenseKind::HybridNR,
    ];

    /// Default constituents of both hybrids, in tie-break order.
    pub const HYBRID_SET: [DefenseKind; 6] = [
        DefenseKind::CenteredClipping,
        DefenseKind::SignGuard,
        DefenseKind::FreqFed,
        DefenseKind::DnC,
        DefenseKind::TrimmedMean,
        DefenseKind::MultiKrum,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DefenseKind::FedAvg => "FedAvg",
            DefenseKind::Median => "Median",
            DefenseKind::TrimmedMean => "TrimmedMean",
            DefenseKind::Krum => "Krum",
            DefenseKind::MultiKrum => "MultiKrum",
            DefenseKind::CenteredClipping => "CC",
            DefenseKind::DnC => "DnC",
            DefenseKind::SignGuard => "SignGuard",
            DefenseKind::FreqFed => "FreqFed",
            DefenseKind::Balance => "Balance",
            DefenseKind::HybridR => "Hybrid-R",
            DefenseKind::HybridNR => "Hybrid-NR",
        }
    }

    /// Rules that consume the attacker count.
    pub fn is_informed(self) -> bool {
        matches!(
            self,
            DefenseKind::TrimmedMean | DefenseKind::Krum | DefenseKind::MultiKrum | DefenseKind::DnC
        )
    }

    pub fn is_hybrid(self) -> bool {
        matches!(self, DefenseKind::HybridR | DefenseKind::HybridNR)
    }
}

impl fmt::Display for DefenseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DefenseKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .trim()
            .chars()
            .filter(|c| !matches!(c, '-' | '_' | ' '))
            .collect::<String>()
            .to_ascii_lowercase();
        Ok(match key.as_str() {
            "fedavg" | "mean" => DefenseKind::FedAvg,
            "median" => DefenseKind::Median,
            "trimmedmean" | "tm" => DefenseKind::TrimmedMean,
            "krum" => DefenseKind::Krum,
            "multikrum" => DefenseKind::MultiKrum,
            "cc" | "centeredclipping" => DefenseKind::CenteredClipping,
            "dnc" => DefenseKind::DnC,
            "signguard" => DefenseKind::SignGuard,
            "freqfed" => DefenseKind::FreqFed,
            "balance" => DefenseKind::Balance,
            "hybridr" => DefenseKind::HybridR,
            "hybridnr" => DefenseKind::HybridNR,
            _ => return Err(Error::Config(format!("unknown defense `{}`", s.trim()))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DefenseParams {
    pub cc_radius: f64,
    pub dnc_subsample: usize,
    pub dnc_filter: f64,
    pub signguard_low: f64,
    pub signguard_high: f64,
    pub signguard_coords: usize,
    /// Fraction of leading DCT coefficients kept by FreqFed.
    pub freqfed_keep: f64,
    pub balance_phi: f64,
    pub balance_kappa: f64,
    /// Multi-Krum selection count; `None` means `M - A`.
    pub multikrum_c: Option<usize>,
    pub hybrid_set: Vec<DefenseKind>,
    /// Attacker count assumed by informed rules inside a hybrid; `None`
    /// means the pessimistic `floor(M / 2) - 1`.
    pub hybrid_attackers: Option<usize>,
}

impl Default for DefenseParams {
    fn default() -> Self {
        Self {
            cc_radius: 10.0,
            dnc_subsample: 5000,
            dnc_filter: 1.0,
            signguard_low: 0.1,
            signguard_high: 3.0,
            signguard_coords: 1000,
            freqfed_keep: 0.5,
            balance_phi: 1.0,
            balance_kappa: 1.0,
            multikrum_c: None,
            hybrid_set: DefenseKind::HYBRID_SET.to_vec(),
            hybrid_attackers: None,
        }
    }
}

impl DefenseParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(self.cc_radius > 0.0) {
            return bad(format!("cc_radius must be > 0, got {}", self.cc_radius));
        }
        if self.dnc_subsample == 0 || !(self.dnc_filter >= 0.0) {
            return bad("dnc_subsample must be >= 1 and dnc_filter >= 0".into());
        }
        if !(self.signguard_low >= 0.0 && self.signguard_low <= 1.0 && self.signguard_high >= 1.0) {
            return bad("signguard bounds must satisfy low <= 1 <= high".into());
        }
        if self.signguard_coords == 0 {
            return bad("signguard_coords must be >= 1".into());
        }
        if !(self.freqfed_keep > 0.0 && self.freqfed_keep <= 1.0) {
            return bad(format!("freqfed_keep must lie in (0, 1], got {}", self.freqfed_keep));
        }
        if !(self.balance_phi > 0.0 && self.balance_kappa > 0.0) {
            return bad("balance_phi and balance_kappa must be > 0".into());
        }
        if self.hybrid_set.is_empty() || self.hybrid_set.iter().any(|k| k.is_hybrid()) {
            return bad("hybrid_set must be non-empty and may not contain hybrids".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationOutcome {
    pub delta: WeightVector,
    /// Clients whose updates entered the aggregate, when the rule selects.
    pub accepted_ids: Option<Vec<usize>>,
    pub diagnostics: BTreeMap<String, f64>,
    /// Constituent(s) picked by a hybrid.
    pub chosen: Option<String>,
    /// Set when the rule fell back to its documented default.
    pub fallback: Option<String>,
}

impl AggregationOutcome {
    fn plain(delta: WeightVector) -> Self {
        Self {
            delta,
            accepted_ids: None,
            diagnostics: BTreeMap::new(),
            chosen: None,
            fallback: None,
        }
    }

    fn selected(delta: WeightVector, ids: Vec<usize>) -> Self {
        Self {
            accepted_ids: Some(ids),
            ..Self::plain(delta)
        }
    }
}

/// Side information for one aggregation call.
#[derive(Debug, Clone, Copy)]
pub struct RoundInfo<'a> {
    pub spec: &'a ModelSpec,
    pub cfg: &'a RoundConfig,
    pub w: &'a WeightVector,
    pub reference: &'a Batch,
    pub round: usize,
    pub total_rounds: usize,
    pub seed: u64,
}

/// Updates ordered by client id, after checking dimensions and finiteness.
fn canonical(updates: &[ClientUpdate]) -> Result<Vec<&ClientUpdate>> {
    let first = updates.first().ok_or(Error::NoUpdates)?;
    let d = first.delta.len();
    let mut out: Vec<&ClientUpdate> = updates.iter().collect();
    for u in &out {
        if u.delta.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: u.delta.len(),
            });
        }
        u.delta.ensure_finite("client update")?;
    }
    out.sort_by_key(|u| u.client_id);
    Ok(out)
}

/// Mean in the given order.
fn mean_of(ups: &[&ClientUpdate]) -> WeightVector {
    let mut out = WeightVector::zeros(ups[0].delta.len());
    for u in ups {
        out.axpy(1.0, &u.delta);
    }
    out.scale_in_place(1.0 / ups.len() as f64);
    out
}

fn mean_of_ids(ups: &[&ClientUpdate], keep: &[usize]) -> WeightVector {
    let chosen: Vec<&ClientUpdate> = keep.iter().map(|&i| ups[i]).collect();
    mean_of(&chosen)
}

pub fn fedavg(updates: &[ClientUpdate]) -> Result<AggregationOutcome> {
    let ups = canonical(updates)?;
    Ok(AggregationOutcome::plain(mean_of(&ups)))
}

/// Median of a slice; the mean of the two middle values for even lengths.
pub fn median_value(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

pub fn median(updates: &[ClientUpdate]) -> Result<AggregationOutcome> {
    let ups = canonical(updates)?;
    let d = ups[0].delta.len();
    let mut col = vec![0.0; ups.len()];
    let delta = (0..d)
        .map(|j| {
            for (c, u) in col.iter_mut().zip(&ups) {
                *c = u.delta[j];
            }
            median_value(&mut col)
        })
        .collect();
    Ok(AggregationOutcome::plain(delta))
}

/// Per coordinate, drop the `a` largest and `a` smallest values and average
/// the rest (summed in ascending order).
pub fn trimmed_mean(updates: &[ClientUpdate], a: usize) -> Result<AggregationOutcome> {
    let ups = canonical(updates)?;
    let m = ups.len();
    if m < 2 * a + 1 {
        return Err(Error::TrimExceedsPopulation { clients: m, attackers: a });
    }
    let d = ups[0].delta.len();
    let mut col = vec![0.0; m];
    let delta = (0..d)
        .map(|j| {
            for (c, u) in col.iter_mut().zip(&ups) {
                *c = u.delta[j];
            }
            col.sort_by(f64::total_cmp);
            let kept = &col[a..m - a];
            kept.iter().sum::<f64>() / kept.len() as f64
        })
        .collect();
    Ok(AggregationOutcome::plain(delta))
}

fn squared_distances(ups: &[&ClientUpdate]) -> Vec<Vec<f64>> {
    let n = ups.len();
    let mut d2 = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let v = ups[i].delta.distance_sq(&ups[j].delta);
            d2[i][j] = v;
            d2[j][i] = v;
        }
    }
    d2
}

/// Sum of squared distances from each pool member to its `k` nearest other
/// pool members.
fn krum_scores(d2: &[Vec<f64>], pool: &[usize], k: usize) -> Vec<f64> {
    pool.iter()
        .map(|&i| {
            let mut ds: Vec<f64> = pool.iter().filter(|&&j| j != i).map(|&j| d2[i][j]).collect();
            ds.sort_by(f64::total_cmp);
            ds.iter().take(k).sum()
        })
        .collect()
}

fn argmin_first(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s < scores[best] {
            best = i;
        }
    }
    best
}

fn check_krum(m: usize, a: usize) -> Result<usize> {
    if m < a + 3 {
        return Err(Error::KrumUndefined { clients: m, attackers: a });
    }
    Ok(m - a - 2)
}

/// The single update with the smallest sum of squared distances to its
/// `M - A - 2` nearest neighbours.
pub fn krum(updates: &[ClientUpdate], a: usize) -> Result<AggregationOutcome> {
    let ups = canonical(updates)?;
    let k = check_krum(ups.len(), a)?;
    let d2 = squared_distances(&ups);
    let pool: Vec<usize> = (0..ups.len()).collect();
    let scores = krum_scores(&d2, &pool, k);
    let best = argmin_first(&scores);
    let mut out = AggregationOutcome::selected(ups[best].delta.clone(), vec![ups[best].client_id]);
    out.diagnostics.insert("score".into(), scores[best]);
    Ok(out)
}

/// Krum applied `c` times, each pick leaving the pool; scores are recomputed
/// on the remaining pool with `min(M - A - 2, |pool| - 1)` neighbours. The
/// output is the mean of the picks in ascending id order.
pub fn multi_krum(updates: &[ClientUpdate], a: usize, c: usize) -> Result<AggregationOutcome> {
    let ups = canonical(updates)?;
    let m = ups.len();
    let k = check_krum(m, a)?;
    if c == 0 || c > m - a {
        return Err(Error::InvalidParameter(format!("multi-krum needs 1 <= c <= M - A (c = {c}, M = {m}, A = {a})")));
    }
    let d2 = squared_distances(&ups);
    let mut pool: Vec<usize> = (0..m).collect();
    let mut picked = Vec::with_capacity(c);
    for _ in 0..c {
        let scores = krum_scores(&d2, &pool, k.min(pool.len() - 1));
        let best = argmin_first(&scores);
        picked.push(pool.remove(best));
    }
    picked.sort_unstable();
    let delta = mean_of_ids(&ups, &picked);
    Ok(AggregationOutcome::selected(delta, picked.iter().map(|&i| ups[i].client_id).collect()))
}

/// `center + min(1, rho / |v - center|) (v - center)`.
pub fn clip(v: &WeightVector, center: &WeightVector, rho: f64) -> WeightVector {
    let diff = v.sub(center);
    let n = diff.norm();
    if n <= rho {
        return v.clone();
    }
    let mut out = center.clone();
    out.axpy(rho / n, &diff);
    out
}

/// Mean of the updates clipped to radius `rho` around `center`; also returns
/// the clipped vectors in id order.
pub fn centered_clipping(updates: &[ClientUpdate], center: &WeightVector, rho: f64) -> Result<(AggregationOutcome, Vec<WeightVector>)> {
    let ups = canonical(updates)?;
    if center.len() != ups[0].delta.len() {
        return Err(Error::DimensionMismatch {
            expected: ups[0].delta.len(),
            got: center.len(),
        });
    }
    if !(rho > 0.0) {
        return Err(Error::InvalidParameter(format!("clipping radius must be > 0, got {rho}")));
    }
    let clipped: Vec<WeightVector> = ups.iter().map(|u| clip(&u.delta, center, rho)).collect();
    let mut delta = WeightVector::zeros(center.len());
    for c in &clipped {
        delta.axpy(1.0, c);
    }
    delta.scale_in_place(1.0 / clipped.len() as f64);
    let mut out = AggregationOutcome::plain(delta);
    let n_clipped = ups.iter().filter(|u| u.delta.distance(center) > rho).count();
    out.diagnostics.insert("clipped".into(), n_clipped as f64);
    Ok((out, clipped))
}

/// Squared projections of the centred rows onto their top right singular
/// vector; `None` when the centred matrix is zero.
pub fn dnc_scores(rows: &[WeightVector]) -> Result<Option<Vec<f64>>> {
    let mu = crate::numerics::mean(rows.iter())?;
    let centred: Vec<WeightVector> = rows.iter().map(|r| r.sub(&mu)).collect();
    match top_right_singular_vector(&centred, DEFAULT_POWER_ITERS, DEFAULT_POWER_TOL) {
        Ok(v) => Ok(Some(centred.iter().map(|r| r.dot(&v).powi(2)).collect())),
        Err(Error::DegenerateMatrix) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Spectral outlier filter on `s` sampled coordinates; keeps the
/// `M - ceil(c * A)` lowest-scoring clients.
pub fn dnc(updates: &[ClientUpdate], a: usize, s: usize, c: f64, rng: &mut Rng) -> Result<AggregationOutcome> {
    let ups = canonical(updates)?;
    let m = ups.len();
    let removed = (c * a as f64).ceil() as usize;
    if removed >= m {
        return Err(Error::TrimExceedsPopulation { clients: m, attackers: a });
    }
    let d = ups[0].delta.len();
    let mut coords = rng.sample_indices(d, s.min(d));
    coords.sort_unstable();
    let rows: Vec<WeightVector> = ups.iter().map(|u| coords.iter().map(|&j| u.delta[j]).collect()).collect();
    let Some(scores) = dnc_scores(&rows)? else {
        let mut out = AggregationOutcome::selected(mean_of(&ups), ups.iter().map(|u| u.client_id).collect());
        out.fallback = Some("degenerate spectrum: all clients accepted".into());
        return Ok(out);
    };
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&x, &y| scores[x].total_cmp(&scores[y]).then(x.cmp(&y)));
    let mut keep = order[..m - removed].to_vec();
    keep.sort_unstable();
    let delta = mean_of_ids(&ups, &keep);
    let mut out = AggregationOutcome::selected(delta, keep.iter().map(|&i| ups[i].client_id).collect());
    out.diagnostics.insert("max_score".into(), scores.iter().cloned().fold(0.0, f64::max));
    Ok(out)
}

/// Fractions of positive, negative and zero entries over `coords`.
pub fn sign_features(v: &WeightVector, coords: &[usize]) -> [f64; 3] {
    let (mut pos, mut neg, mut zero) = (0usize, 0usize, 0usize);
    for &j in coords {
        match v[j].partial_cmp(&0.0) {
            Some(std::cmp::Ordering::Greater) => pos += 1,
            Some(std::cmp::Ordering::Less) => neg += 1,
            _ => zero += 1,
        }
    }
    let n = coords.len() as f64;
    [pos as f64 / n, neg as f64 / n, zero as f64 / n]
}

fn dist3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Two-means over sign features, seeded with the farthest pair. Returns the
/// members of the larger cluster (ties: the cluster holding index 0), or
/// everyone when the clusters are not separated by more than
/// `max(0.05, 3 * rms spread)`.
pub fn sign_majority(features: &[[f64; 3]]) -> Vec<usize> {
    let n = features.len();
    let all: Vec<usize> = (0..n).collect();
    if n < 2 {
        return all;
    }
    let (mut fi, mut fj, mut far) = (0, 0, -1.0);
    for i in 0..n {
        for j in i + 1..n {
            let d = dist3(&features[i], &features[j]);
            if d > far {
                (fi, fj, far) = (i, j, d);
            }
        }
    }
    if far <= 0.0 {
        return all;
    }
    let mut centers = [features[fi], features[fj]];
    let mut assign = vec![0usize; n];
    for _ in 0..100 {
        let next: Vec<usize> = features
            .iter()
            .map(|f| usize::from(dist3(f, &centers[1]) < dist3(f, &centers[0])))
            .collect();
        let changed = next != assign;
        assign = next;
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<&[f64; 3]> = features.iter().zip(&assign).filter(|(_, &a)| a == c).map(|(f, _)| f).collect();
            if !members.is_empty() {
                for k in 0..3 {
                    center[k] = members.iter().map(|f| f[k]).sum::<f64>() / members.len() as f64;
                }
            }
        }
        if !changed {
            break;
        }
    }
    let rms = (features
        .iter()
        .zip(&assign)
        .map(|(f, &a)| dist3(f, &centers[a]).powi(2))
        .sum::<f64>()
        / n as f64)
        .sqrt();
    if dist3(&centers[0], &centers[1]) <= f64::max(0.05, 3.0 * rms) {
        return all;
    }
    let size0 = assign.iter().filter(|&&a| a == 0).count();
    let majority = if size0 * 2 > n {
        0
    } else if size0 * 2 < n {
        1
    } else {
        assign[0]
    };
    all.into_iter().filter(|&i| assign[i] == majority).collect()
}

/// Norm gate intersected with the sign-statistics majority cluster.
pub fn signguard(updates: &[ClientUpdate], low: f64, high: f64, coords: usize, rng: &mut Rng) -> Result<AggregationOutcome> {
    let ups = canonical(updates)?;
    let d = ups[0].delta.len();
    let norms: Vec<f64> = ups.iter().map(|u| u.delta.norm()).collect();
    let med = median_value(&mut norms.clone());
    let s1: Vec<usize> = (0..ups.len())
        .filter(|&i| norms[i] >= low * med && norms[i] <= high * med)
        .collect();
    let mut sample = rng.sample_indices(d, coords.min(d));
    sample.sort_unstable();
    let features: Vec<[f64; 3]> = ups.iter().map(|u| sign_features(&u.delta, &sample)).collect();
    let s2 = sign_majority(&features);
    let both: Vec<usize> = s1.iter().copied().filter(|i| s2.contains(i)).collect();
    let (keep, fallback) = if both.is_empty() {
        (s1, Some("empty intersection: norm-gated set used".to_string()))
    } else {
        (both, None)
    };
    let delta = mean_of_ids(&ups, &keep);
    let mut out = AggregationOutcome::selected(delta, keep.iter().map(|&i| ups[i].client_id).collect());
    out.fallback = fallback;
    out.diagnostics.insert("norm_gate".into(), out.accepted_ids.as_ref().map_or(0, |v| v.len()) as f64);
    Ok(out)
}

/// Low-pass DCT fingerprints clustered by cosine distance; the largest
/// cluster is averaged. `min_cluster_size` is `floor(n / 2) + 1`.
pub fn freqfed(updates: &[ClientUpdate], keep: f64) -> Result<AggregationOutcome> {
    let ups = canonical(updates)?;
    let n = ups.len();
    if n == 1 {
        return Ok(AggregationOutcome::selected(ups[0].delta.clone(), vec![ups[0].client_id]));
    }
    let d = ups[0].delta.len();
    let cut = ((keep * d as f64).ceil() as usize).clamp(1, d);
    let fingerprints: Vec<WeightVector> = ups
        .iter()
        .map(|u| dct2(&u.delta).map(|c| WeightVector::from(&c[..cut])))
        .collect::<Result<_>>()?;
    let dist = DistanceMatrix::cosine(&fingerprints);
    let mcs = n / 2 + 1;
    let labels = density_cluster(&dist, mcs.max(2))?;
    let (keep_idx, fallback) = match largest_cluster(&labels) {
        Some(members) => (members, None),
        None => ((0..n).collect(), Some("no cluster: all clients accepted".to_string())),
    };
    let delta = mean_of_ids(&ups, &keep_idx);
    let mut out = AggregationOutcome::selected(delta, keep_idx.iter().map(|&i| ups[i].client_id).collect());
    out.fallback = fallback;
    let clusters = labels.iter().flatten().max().map_or(0, |m| m + 1);
    out.diagnostics.insert("clusters".into(), clusters as f64);
    Ok(out)
}

/// Acceptance radius `phi * exp(-kappa * k / K) * |ref|`.
pub fn balance_threshold(reference_norm: f64, phi: f64, kappa: f64, round: usize, total_rounds: usize) -> f64 {
    let lambda = if total_rounds == 0 { 0.0 } else { round as f64 / total_rounds as f64 };
    phi * (-kappa * lambda).exp() * reference_norm
}

/// Accept updates within the threshold of a reference update; averages the
/// accepted ones, or returns the reference itself when none pass.
pub fn balance(updates: &[ClientUpdate], reference: &WeightVector, threshold: f64) -> Result<AggregationOutcome> {
    let ups = canonical(updates)?;
    let keep: Vec<usize> = (0..ups.len())
        .filter(|&i| reference.distance(&ups[i].delta) <= threshold)
        .collect();
    let mut out = if keep.is_empty() {
        let mut o = AggregationOutcome::selected(reference.clone(), Vec::new());
        o.fallback = Some("no client accepted: reference update used".into());
        o
    } else {
        AggregationOutcome::selected(mean_of_ids(&ups, &keep), keep.iter().map(|&i| ups[i].client_id).collect())
    };
    out.diagnostics.insert("threshold".into(), threshold);
    Ok(out)
}

/// A configured rule with its cross-round state.
#[derive(Debug, Clone)]
pub struct Aggregator {
    pub kind: DefenseKind,
    pub params: DefenseParams,
    /// Attacker count given to informed rules.
    pub attackers: usize,
    pub clients: usize,
    cc_center: Option<WeightVector>,
    members: Vec<Aggregator>,
}

impl Aggregator {
    pub fn new(kind: DefenseKind, params: DefenseParams, attackers: usize, clients: usize) -> Self {
        let members = if kind.is_hybrid() {
            let assumed = params.hybrid_attackers.unwrap_or((clients / 2).saturating_sub(1));
            params
                .hybrid_set
                .iter()
                .map(|&k| Aggregator::new(k, params.clone(), assumed, clients))
                .collect()
        } else {
            Vec::new()
        };
        Self {
            kind,
            params,
            attackers,
            clients,
            cc_center: None,
            members,
        }
    }

    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    pub fn members(&self) -> &[Aggregator] {
        &self.members
    }

    fn rng(&self, info: &RoundInfo<'_>) -> Rng {
        Rng::substream(info.seed, &format!("defense/{}/{}", self.kind.name(), info.round))
    }

    pub fn aggregate(&mut self, updates: &[ClientUpdate], info: &RoundInfo<'_>) -> Result<AggregationOutcome> {
        let p = &self.params;
        let a = self.attackers;
        match self.kind {
            DefenseKind::FedAvg => fedavg(updates),
            DefenseKind::Median => median(updates),
            DefenseKind::TrimmedMean => trimmed_mean(updates, a),
            DefenseKind::Krum => krum(updates, a),
            DefenseKind::MultiKrum => {
                let m = updates.len();
                multi_krum(updates, a, p.multikrum_c.unwrap_or(m.saturating_sub(a)))
            }
            DefenseKind::CenteredClipping => {
                let d = updates.first().ok_or(Error::NoUpdates)?.delta.len();
                let center = self.cc_center.clone().unwrap_or_else(|| WeightVector::zeros(d));
                let (out, _) = centered_clipping(updates, &center, p.cc_radius)?;
                self.cc_center = Some(out.delta.clone());
                Ok(out)
            }
            DefenseKind::DnC => dnc(updates, a, p.dnc_subsample, p.dnc_filter, &mut self.rng(info)),
            DefenseKind::SignGuard => signguard(updates, p.signguard_low, p.signguard_high, p.signguard_coords, &mut self.rng(info)),
            DefenseKind::FreqFed => freqfed(updates, p.freqfed_keep),
            DefenseKind::Balance => {
                if info.reference.is_empty() {
                    return Err(Error::EmptyEvaluationSet);
                }
                let reference = local_sgd(info.spec, info.w, info.reference, info.cfg, &mut self.rng(info))?;
                let thr = balance_threshold(reference.norm(), p.balance_phi, p.balance_kappa, info.round, info.total_rounds);
                balance(updates, &reference, thr)
            }
            DefenseKind::HybridR => self.hybrid_r(updates, info),
            DefenseKind::HybridNR => self.hybrid_nr(updates, info),
        }
    }

    /// Candidate with the lowest reference risk after the global step; ties
    /// go to the first constituent in set order.
    fn hybrid_r(&mut self, updates: &[ClientUpdate], info: &RoundInfo<'_>) -> Result<AggregationOutcome> {
        if info.reference.is_empty() {
            return Err(Error::EmptyEvaluationSet);
        }
        let mut best: Option<(f64, AggregationOutcome, &'static str)> = None;
        let mut diagnostics = BTreeMap::new();
        let mut failures = Vec::new();
        for member in &mut self.members {
            let out = match member.aggregate(updates, info) {
                Ok(o) => o,
                Err(e) => {
                    failures.push(format!("{}: {e}", member.name()));
                    continue;
                }
            };
            let mut next = info.w.clone();
            next.axpy(-info.cfg.global_lr, &out.delta);
            let r = risk(info.spec, &next, info.reference)?;
            diagnostics.insert(format!("risk/{}", member.name()), r);
            if best.as_ref().is_none_or(|(br, _, _)| r < *br) {
                best = Some((r, out, member.name()));
            }
        }
        let (_, mut out, name) = best.ok_or_else(|| Error::NoViableDefense(failures.join("; ")))?;
        out.chosen = Some(name.to_string());
        out.diagnostics = diagnostics;
        if !failures.is_empty() {
            out.fallback = Some(format!("skipped {}", failures.join("; ")));
        }
        Ok(out)
    }

    /// Every constituent aggregates; FreqFed then aggregates their outputs.
    fn hybrid_nr(&mut self, updates: &[ClientUpdate], info: &RoundInfo<'_>) -> Result<AggregationOutcome> {
        let mut stage1 = Vec::new();
        let mut names = Vec::new();
        let mut failures = Vec::new();
        for member in &mut self.members {
            match member.aggregate(updates, info) {
                Ok(o) => {
                    stage1.push(ClientUpdate {
                        client_id: stage1.len(),
                        delta: o.delta,
                        sample_count: 1,
                    });
                    names.push(member.name());
                }
                Err(e) => failures.push(format!("{}: {e}", member.name())),
            }
        }
        if stage1.is_empty() {
            return Err(Error::NoViableDefense(failures.join("; ")));
        }
        let inner = freqfed(&stage1, self.params.freqfed_keep)?;
        let chosen: Vec<&str> = inner
            .accepted_ids
            .as_ref()
            .map(|ids| ids.iter().map(|&i| names[i]).collect())
            .unwrap_or_default();
        let mut out = AggregationOutcome::plain(inner.delta);
        out.chosen = Some(chosen.join(","));
        out.diagnostics.insert("constituents".into(), stage1.len() as f64);
        out.diagnostics.insert("accepted_constituents".into(), chosen.len() as f64);
        let mut notes: Vec<String> = inner.fallback.into_iter().collect();
        if !failures.is_empty() {
            notes.push(format!("skipped {}", failures.join("; ")));
        }
        if !notes.is_empty() {
            out.fallback = Some(notes.join("; "));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn upd(id: usize, v: &[f64]) -> ClientUpdate {
        ClientUpdate {
            client_id: id,
            delta: WeightVector::from(v),
            sample_count: 1,
        }
    }

    fn ups1(values: &[f64]) -> Vec<ClientUpdate> {
        values.iter().enumerate().map(|(i, &v)| upd(i, &[v])).collect()
    }

    fn random_updates(rng: &mut Rng, m: usize, d: usize) -> Vec<ClientUpdate> {
        (0..m)
            .map(|i| ClientUpdate {
                client_id: i,
                delta: rng.gaussian_vector(d, 1.0),
                sample_count: 1,
            })
            .collect()
    }

    #[test]
    fn median_examples() {
        assert_eq!(median(&ups1(&[1.0, 2.0, 100.0])).unwrap().delta[0], 2.0);
        assert_eq!(median(&ups1(&[1.0, 3.0])).unwrap().delta[0], 2.0);
        assert!(matches!(median(&[]), Err(Error::NoUpdates)));
        let mut rng = Rng::new(1);
        let ups = random_updates(&mut rng, 30, 4);
        let got = median(&ups).unwrap().delta;
        for j in 0..4 {
            let mut col: Vec<f64> = ups.iter().map(|u| u.delta[j]).collect();
            col.sort_by(|a, b| a.partial_cmp(b).unwrap());
            assert_eq!(got[j], (col[14] + col[15]) / 2.0);
        }
    }

    #[test]
    fn trimmed_mean_examples() {
        assert_eq!(trimmed_mean(&ups1(&[5.0, 1.0, 3.0, 2.0, 4.0]), 1).unwrap().delta[0], 3.0);
        let mut rng = Rng::new(2);
        let ups = random_updates(&mut rng, 7, 3);
        let a = trimmed_mean(&ups, 0).unwrap().delta;
        let b = fedavg(&ups).unwrap().delta;
        assert!(a.distance(&b) < 1e-12);
        assert!(matches!(trimmed_mean(&ups1(&[1.0, 2.0]), 1), Err(Error::TrimExceedsPopulation { .. })));

        let mut ups = random_updates(&mut rng, 10, 3);
        for u in ups.iter_mut().take(3) {
            u.delta = WeightVector::from(vec![1e6; 3]);
        }
        let out = trimmed_mean(&ups, 3).unwrap().delta;
        for j in 0..3 {
            let benign: Vec<f64> = ups[3..].iter().map(|u| u.delta[j]).collect();
            let lo = benign.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = benign.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(out[j] >= lo && out[j] <= hi);
        }
    }

    #[test]
    fn krum_examples() {
        let out = krum(&ups1(&[0.0, 0.1, 0.2, 10.0]), 1).unwrap();
        assert_eq!(out.accepted_ids, Some(vec![0]));
        assert!((out.diagnostics["score"] - 0.01).abs() < 1e-15);
        let same = ups1(&[3.0; 5]);
        assert_eq!(krum(&same, 1).unwrap().accepted_ids, Some(vec![0]));
        assert!(matches!(krum(&ups1(&[1.0, 2.0, 3.0]), 1), Err(Error::KrumUndefined { .. })));
        let mut rng = Rng::new(4);
        for a in 1..4 {
            let mut ups = random_updates(&mut rng, 9, 3);
            ups[5].delta = WeightVector::from(vec![1e3; 3]);
            assert_ne!(krum(&ups, a).unwrap().accepted_ids, Some(vec![5]));
        }
    }

    #[test]
    fn multi_krum_reductions() {
        let mut rng = Rng::new(5);
        let ups = random_updates(&mut rng, 7, 3);
        let one = multi_krum(&ups, 2, 1).unwrap();
        assert_eq!(one.accepted_ids, krum(&ups, 2).unwrap().accepted_ids);
        let all = multi_krum(&ups, 0, 7).unwrap();
        assert!(all.delta.distance(&fedavg(&ups).unwrap().delta) < 1e-12);
        assert!(multi_krum(&ups, 2, 6).is_err());
    }

    #[test]
    fn multi_krum_fixture() {
        // 1-D values {0, 1, 3, 7, 20}, A = 1 -> 2 neighbours.
        // Round 1 scores: 0:1+9=10, 1:1+4=5, 3:4+9=13, 7:16+36=52, 20:169+289=458 -> pick id 1.
        // Round 2 pool {0,3,7,20}: 0:9+49=58, 3:9+16=25, 7:16+49=65, 20:169+289=458 -> pick id 2.
        let out = multi_krum(&ups1(&[0.0, 1.0, 3.0, 7.0, 20.0]), 1, 2).unwrap();
        assert_eq!(out.accepted_ids, Some(vec![1, 2]));
        assert_eq!(out.delta[0], 2.0);
    }

    #[test]
    fn clipping_contract() {
        let zero = WeightVector::zeros(2);
        let (out, clipped) = centered_clipping(&[upd(0, &[3.0, 0.0])], &zero, 1.0).unwrap();
        assert_eq!(clipped[0].clone().into_inner(), vec![1.0, 0.0]);
        assert_eq!(out.delta.into_inner(), vec![1.0, 0.0]);
        let small = vec![upd(0, &[0.1, 0.2]), upd(1, &[-0.3, 0.0])];
        let (out, _) = centered_clipping(&small, &zero, 10.0).unwrap();
        assert!(out.delta.distance(&fedavg(&small).unwrap().delta) < 1e-15);
        let mut rng = Rng::new(6);
        let center = rng.gaussian_vector(4, 1.0);
        let ups: Vec<ClientUpdate> = (0..20).map(|i| ClientUpdate { client_id: i, delta: rng.gaussian_vector(4, 1e3), sample_count: 1 }).collect();
        let (_, clipped) = centered_clipping(&ups, &center, 0.5).unwrap();
        for c in clipped {
            assert!(c.distance(&center) <= 0.5 + 1e-12);
        }
    }

    #[test]
    fn dnc_behaviour() {
        let mut rng = Rng::new(7);
        let ups = random_updates(&mut rng, 10, 6);
        let out = dnc(&ups, 0, 100, 1.0, &mut Rng::new(0)).unwrap();
        assert_eq!(out.accepted_ids.unwrap().len(), 10);
        for seed in 0..50 {
            let mut rng = Rng::new(seed);
            let mut ups = random_updates(&mut rng, 10, 6);
            for u in &mut ups {
                u.delta.scale_in_place(0.01);
            }
            ups[3].delta = rng.gaussian_vector(6, 1.0).normalized().unwrap().scaled(1.0);
            let out = dnc(&ups, 1, 6, 1.0, &mut rng).unwrap();
            assert!(!out.accepted_ids.unwrap().contains(&3), "seed {seed}");
        }
    }

    #[test]
    fn dnc_scores_translation_invariant() {
        let mut rng = Rng::new(8);
        let rows: Vec<WeightVector> = (0..6).map(|_| rng.gaussian_vector(4, 1.0)).collect();
        let shift = rng.gaussian_vector(4, 5.0);
        let shifted: Vec<WeightVector> = rows.iter().map(|r| r.add(&shift)).collect();
        let a = dnc_scores(&rows).unwrap().unwrap();
        let b = dnc_scores(&shifted).unwrap().unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
        assert!(dnc_scores(&vec![WeightVector::from(vec![1.0, 2.0]); 3]).unwrap().is_none());
    }

    #[test]
    fn signguard_behaviour() {
        let mut rng = Rng::new(9);
        let ups = random_updates(&mut rng, 10, 2000);
        let out = signguard(&ups, 0.1, 3.0, 1000, &mut Rng::new(1)).unwrap();
        assert_eq!(out.accepted_ids.unwrap().len(), 10);

        let mut ups = random_updates(&mut rng, 10, 2000);
        ups[4].delta.scale_in_place(100.0);
        let out = signguard(&ups, 0.1, 3.0, 1000, &mut Rng::new(1)).unwrap();
        assert!(!out.accepted_ids.unwrap().contains(&4));
    }

    #[test]
    fn signguard_separates_sign_flippers() {
        for seed in 0..20 {
            let mut rng = Rng::new(seed);
            let bias = WeightVector::from(vec![0.5; 500]);
            let mut ups: Vec<ClientUpdate> = (0..10)
                .map(|i| ClientUpdate { client_id: i, delta: rng.gaussian_vector(500, 1.0).add(&bias), sample_count: 1 })
                .collect();
            let attackers: Vec<usize> = rng.sample_indices(10, 3);
            for &a in &attackers {
                ups[a].delta.scale_in_place(-1.0);
            }
            let accepted = signguard(&ups, 0.1, 3.0, 1000, &mut rng).unwrap().accepted_ids.unwrap();
            for a in attackers {
                assert!(!accepted.contains(&a), "seed {seed}");
            }
            assert_eq!(accepted.len(), 7);
        }
    }

    #[test]
    fn freqfed_behaviour() {
        let same = vec![upd(0, &[1.0, 2.0, 3.0]); 5]
            .into_iter()
            .enumerate()
            .map(|(i, mut u)| {
                u.client_id = i;
                u
            })
            .collect::<Vec<_>>();
        let out = freqfed(&same, 0.5).unwrap();
        assert_eq!(out.delta.into_inner(), vec![1.0, 2.0, 3.0]);

        let mut rng = Rng::new(10);
        let base = rng.gaussian_vector(16, 1.0);
        let mut ups: Vec<ClientUpdate> = (0..10)
            .map(|i| ClientUpdate { client_id: i, delta: base.add(&rng.gaussian_vector(16, 0.01)), sample_count: 1 })
            .collect();
        for u in ups.iter_mut().take(3) {
            u.delta = base.scaled(-2.0);
        }
        let out = freqfed(&ups, 0.5).unwrap();
        let ids = out.accepted_ids.clone().unwrap();
        assert_eq!(ids, (3..10).collect::<Vec<_>>());
        let refs: Vec<&ClientUpdate> = ups[3..].iter().collect();
        assert!(out.delta.distance(&mean_of(&refs)) < 1e-12);
        let single = freqfed(&ups[..1], 0.5).unwrap();
        assert_eq!(single.delta, ups[0].delta);
    }

    #[test]
    fn balance_examples() {
        let reference = WeightVector::from(vec![2.0, 0.0]);
        let thr = balance_threshold(reference.norm(), 1.0, 1.0, 0, 10);
        assert_eq!(thr, 2.0);
        let ups = vec![upd(0, &[2.0, 1.0]), upd(1, &[2.0, 3.0]), upd(2, &[2.0, 0.0])];
        let out = balance(&ups, &reference, thr).unwrap();
        assert_eq!(out.accepted_ids, Some(vec![0, 2]));
        let end = balance_threshold(reference.norm(), 1.0, 1.0, 10, 10);
        assert!((end - thr * (-1.0f64).exp()).abs() < 1e-15);
        let out = balance(&[upd(0, &[100.0, 0.0])], &reference, thr).unwrap();
        assert_eq!(out.delta, reference);
        assert!(out.fallback.is_some());
    }

    #[test]
    fn permutation_equivariance() {
        let mut rng = Rng::new(11);
        let ups = random_updates(&mut rng, 9, 5);
        let mut shuffled = ups.clone();
        rng.shuffle(&mut shuffled);
        let pairs: Vec<(AggregationOutcome, AggregationOutcome)> = vec![
            (median(&ups).unwrap(), median(&shuffled).unwrap()),
            (trimmed_mean(&ups, 2).unwrap(), trimmed_mean(&shuffled, 2).unwrap()),
            (krum(&ups, 2).unwrap(), krum(&shuffled, 2).unwrap()),
            (multi_krum(&ups, 2, 4).unwrap(), multi_krum(&shuffled, 2, 4).unwrap()),
            (freqfed(&ups, 0.5).unwrap(), freqfed(&shuffled, 0.5).unwrap()),
            (dnc(&ups, 2, 5, 1.0, &mut Rng::new(1)).unwrap(), dnc(&shuffled, 2, 5, 1.0, &mut Rng::new(1)).unwrap()),
            (signguard(&ups, 0.1, 3.0, 5, &mut Rng::new(1)).unwrap(), signguard(&shuffled, 0.1, 3.0, 5, &mut Rng::new(1)).unwrap()),
        ];
        for (a, b) in pairs {
            assert_eq!(a, b);
        }
    }

    fn info_fixture() -> (ModelSpec, RoundConfig, WeightVector, Batch) {
        let mut rng = Rng::new(12);
        let spec = ModelSpec::softmax(3, 3);
        let inputs = (0..30 * 3).map(|_| rng.gaussian()).collect();
        let labels = (0..30).map(|i| i % 3).collect();
        let batch = Batch::new(inputs, labels, 3).unwrap();
        let w = spec.init_weights(&mut rng);
        (spec, RoundConfig::default(), w, batch)
    }

    #[test]
    fn hybrid_r_reductions_and_selection() {
        let (spec, cfg, w, reference) = info_fixture();
        let info = RoundInfo { spec: &spec, cfg: &cfg, w: &w, reference: &reference, round: 0, total_rounds: 10, seed: 0 };
        let mut rng = Rng::new(13);
        let ups: Vec<ClientUpdate> = (0..10)
            .map(|i| ClientUpdate { client_id: i, delta: rng.gaussian_vector(spec.dim(), 0.1), sample_count: 1 })
            .collect();

        let params = DefenseParams { hybrid_set: vec![DefenseKind::FedAvg], ..Default::default() };
        let mut single = Aggregator::new(DefenseKind::HybridR, params, 0, 10);
        assert_eq!(single.aggregate(&ups, &info).unwrap().delta, fedavg(&ups).unwrap().delta);

        for seed in 0..20 {
            let mut rng = Rng::new(seed);
            let mut ups: Vec<ClientUpdate> = (0..10)
                .map(|i| ClientUpdate { client_id: i, delta: rng.gaussian_vector(spec.dim(), 0.1), sample_count: 1 })
                .collect();
            // A uniform shift would leave softmax outputs unchanged; use a random direction.
            let poison = rng.gaussian_vector(spec.dim(), 1.0).normalized().unwrap().scaled(1e6);
            for u in ups.iter_mut().take(4) {
                u.delta = poison.clone();
            }
            let params = DefenseParams { hybrid_set: vec![DefenseKind::FedAvg, DefenseKind::Median], ..Default::default() };
            let mut h = Aggregator::new(DefenseKind::HybridR, params, 0, 10);
            let out = h.aggregate(&ups, &info).unwrap();
            assert_eq!(out.chosen.as_deref(), Some("Median"));
            assert!(out.diagnostics["risk/Median"] < out.diagnostics["risk/FedAvg"]);
        }
    }

    #[test]
    fn hybrid_nr_agreement_and_passthrough() {
        let (spec, cfg, w, reference) = info_fixture();
        let info = RoundInfo { spec: &spec, cfg: &cfg, w: &w, reference: &reference, round: 0, total_rounds: 10, seed: 0 };
        let same: Vec<ClientUpdate> = (0..10).map(|i| ClientUpdate { client_id: i, delta: WeightVector::from(vec![0.5; spec.dim()]), sample_count: 1 }).collect();
        let mut h = Aggregator::new(DefenseKind::HybridNR, DefenseParams::default(), 0, 10);
        let out = h.aggregate(&same, &info).unwrap();
        for x in out.delta.iter() {
            assert!((x - 0.5).abs() < 1e-12);
        }
        let params = DefenseParams { hybrid_set: vec![DefenseKind::Median], ..Default::default() };
        let mut h = Aggregator::new(DefenseKind::HybridNR, params, 0, 10);
        assert_eq!(h.aggregate(&same, &info).unwrap().delta, median(&same).unwrap().delta);
    }

    #[test]
    fn hybrid_nr_stage_two_excludes_hijacked_candidate() {
        let mut rng = Rng::new(14);
        let base = rng.gaussian_vector(12, 1.0);
        let mut candidates: Vec<ClientUpdate> = (0..5)
            .map(|i| ClientUpdate { client_id: i, delta: base.add(&rng.gaussian_vector(12, 1e-3)), sample_count: 1 })
            .collect();
        candidates.push(ClientUpdate { client_id: 5, delta: WeightVector::from(vec![1e6; 12]), sample_count: 1 });
        let out = freqfed(&candidates, 0.5).unwrap();
        assert_eq!(out.accepted_ids, Some(vec![0, 1, 2, 3, 4]));
    }

    #[test]
    fn names_round_trip() {
        for k in DefenseKind::ALL {
            assert_eq!(k.name().parse::<DefenseKind>().unwrap(), k);
            let json = serde_json::to_string(&k).unwrap();
            assert_eq!(json, format!("\"{}\"", k.name()));
        }
        assert!(matches!("defence".parse::<DefenseKind>(), Err(Error::Config(_))));
    }
}
