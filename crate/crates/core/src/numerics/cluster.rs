//! Pairwise distances and a reduced HDBSCAN.
//!
//! The clustering builds mutual-reachability distances with
//! `k = min_cluster_size - 1`, takes their minimum spanning tree and walks the
//! single-linkage hierarchy top down. Edges of equal weight (to a relative
//! 1e-9) are cut together, so ties never depend on point order. A cluster
//! whose cut leaves two or more components of at least `min_cluster_size` points splits; with exactly one
//! such component it sheds the rest and continues; with none it is a leaf.
//! Within a chain of single-component cuts the leaf is the component that
//! follows the sharpest relative drop in cut level: points peeled off above
//! that drop sit outside the cluster's density and become noise, points shed
//! below it stay members. Points shed by the first cut of the full set are
//! always noise.

use serde::{Deserialize, Serialize};

use super::WeightVector;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Euclidean,
    Cosine,
}

/// Symmetric, zero-diagonal matrix of pairwise distances.
#[derive(Debug, Clone)]
pub struct DistanceMatrix {
    n: usize,
    entries: Vec<f64>,
    metric: Metric,
}

impl DistanceMatrix {
    pub fn euclidean(points: &[WeightVector]) -> Self {
        Self::build(points, Metric::Euclidean, |a, b| a.distance(b))
    }

    /// `1 - cos(a, b)`, in `[0, 2]`. A zero vector is at distance 1 from any
    /// other vector and 0 from another zero vector.
    pub fn cosine(points: &[WeightVector]) -> Self {
        Self::build(points, Metric::Cosine, |a, b| {
            let (na, nb) = (a.norm(), b.norm());
            if na == 0.0 && nb == 0.0 {
                0.0
            } else {
                (1.0 - a.cosine_similarity(b)).clamp(0.0, 2.0)
            }
        })
    }

    fn build(points: &[WeightVector], metric: Metric, f: impl Fn(&WeightVector, &WeightVector) -> f64) -> Self {
        let n = points.len();
        let mut entries = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let d = f(&points[i], &points[j]);
                entries[i * n + j] = d;
                entries[j * n + i] = d;
            }
        }
        Self { n, entries, metric }
    }

    /// Validates symmetry (within 1e-12), zero diagonal and nonnegativity.
    pub fn from_entries(n: usize, entries: Vec<f64>, metric: Metric) -> Result<Self> {
        if entries.len() != n * n {
            return Err(Error::DimensionMismatch {
                expected: n * n,
                got: entries.len(),
            });
        }
        for i in 0..n {
            if entries[i * n + i] != 0.0 {
                return Err(Error::InvalidParameter("nonzero diagonal".into()));
            }
            for j in 0..n {
                let d = entries[i * n + j];
                if !d.is_finite() || d < 0.0 {
                    return Err(Error::InvalidParameter(format!("bad distance at ({i}, {j})")));
                }
                if (d - entries[j * n + i]).abs() > 1e-12 {
                    return Err(Error::InvalidParameter(format!("asymmetric at ({i}, {j})")));
                }
            }
        }
        Ok(Self { n, entries, metric })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }
}

/// Cluster label per point; `None` marks noise. Labels are numbered in order
/// of each cluster's smallest member index.
pub fn density_cluster(dist: &DistanceMatrix, min_cluster_size: usize) -> Result<Vec<Option<usize>>> {
    if min_cluster_size < 2 {
        return Err(Error::InvalidParameter("min_cluster_size must be >= 2".into()));
    }
    let n = dist.len();
    if n < min_cluster_size {
        return Ok(vec![Some(0); n]);
    }

    let k = min_cluster_size - 1;
    let core: Vec<f64> = (0..n)
        .map(|i| {
            let mut d: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| dist.get(i, j)).collect();
            d.sort_by(f64::total_cmp);
            d[k - 1]
        })
        .collect();
    let reach = |i: usize, j: usize| dist.get(i, j).max(core[i]).max(core[j]);

    let mst = prim_mst(n, reach);
    let mut leaves = Vec::new();
    condense((0..n).collect(), None, &mst, min_cluster_size, &mut leaves);

    let mut labels = vec![None; n];
    for leaf in &mut leaves {
        leaf.sort_unstable();
    }
    leaves.sort_by_key(|l| l[0]);
    for (label, leaf) in leaves.iter().enumerate() {
        for &p in leaf {
            labels[p] = Some(label);
        }
    }
    Ok(labels)
}

/// Members of the largest cluster; ties go to the cluster with the smaller label.
pub fn largest_cluster(labels: &[Option<usize>]) -> Option<Vec<usize>> {
    let count = labels.iter().flatten().max().map(|m| m + 1)?;
    let mut sizes = vec![0usize; count];
    for l in labels.iter().flatten() {
        sizes[*l] += 1;
    }
    let best = (0..count).max_by(|&a, &b| sizes[a].cmp(&sizes[b]).then(b.cmp(&a)))?;
    Some(
        labels
            .iter()
            .enumerate()
            .filter(|(_, l)| **l == Some(best))
            .map(|(i, _)| i)
            .collect(),
    )
}

struct Edge {
    a: usize,
    b: usize,
    w: f64,
}

fn prim_mst(n: usize, weight: impl Fn(usize, usize) -> f64) -> Vec<Edge> {
    let mut in_tree = vec![false; n];
    let mut best = vec![f64::INFINITY; n];
    let mut parent = vec![0usize; n];
    let mut edges = Vec::with_capacity(n.saturating_sub(1));
    in_tree[0] = true;
    for j in 1..n {
        best[j] = weight(0, j);
    }
    for _ in 1..n {
        let next = (0..n)
            .filter(|&j| !in_tree[j])
            .min_by(|&a, &b| best[a].total_cmp(&best[b]).then(a.cmp(&b)))
            .expect("remaining vertex");
        in_tree[next] = true;
        edges.push(Edge {
            a: parent[next],
            b: next,
            w: best[next],
        });
        for j in 0..n {
            if !in_tree[j] {
                let w = weight(next, j);
                if w < best[j] {
                    best[j] = w;
                    parent[j] = next;
                }
            }
        }
    }
    edges
}

/// Cut level of `current`'s heaviest edges and the surviving components of
/// at least `min_size` points.
fn cut_top(current: &[usize], mst: &[Edge], min_size: usize) -> (f64, Vec<Vec<usize>>) {
    let member = |p: usize| current.binary_search(&p).is_ok();
    let inner: Vec<&Edge> = mst.iter().filter(|e| member(e.a) && member(e.b)).collect();
    let level = inner.iter().map(|e| e.w).fold(f64::NEG_INFINITY, f64::max);
    // Weights within a relative 1e-9 of the top level count as equal, so
    // rounding noise in the distances cannot stagger a simultaneous cut.
    let cut = level - 1e-9 * level.abs();
    let kept: Vec<&Edge> = inner.into_iter().filter(|e| e.w < cut).collect();
    let children = components(current, &kept)
        .into_iter()
        .filter(|c| c.len() >= min_size)
        .collect();
    (level, children)
}

/// Follows `start` down while each cut leaves a single qualifying component.
/// `birth` is the level it was split off at (`None` for the full set, whose
/// first-cut casualties are always noise).
fn condense(start: Vec<usize>, birth: Option<f64>, mst: &[Edge], min_size: usize, leaves: &mut Vec<Vec<usize>>) {
    let mut chain = vec![start];
    let mut levels: Vec<f64> = birth.into_iter().collect();
    loop {
        let current = chain.last().unwrap();
        if current.len() < 2 {
            break;
        }
        let (level, mut children) = cut_top(current, mst, min_size);
        levels.push(level);
        match children.len() {
            0 => break,
            1 => chain.push(children.pop().unwrap()),
            _ => {
                for child in children {
                    condense(child, Some(level), mst, min_size, leaves);
                }
                return;
            }
        }
    }
    if birth.is_none() && chain.len() == 1 {
        leaves.push(chain.pop().unwrap());
        return;
    }
    // `levels[j]` opens chain entry `j - offset`; the leaf is the entry that
    // follows the sharpest relative drop in level.
    let offset = usize::from(birth.is_none());
    let gap = |i: usize| {
        let (above, below) = (levels[i - offset], levels[i - offset + 1]);
        if below > 0.0 {
            above / below
        } else if above > 0.0 {
            f64::INFINITY
        } else {
            1.0
        }
    };
    let mut best = offset;
    for i in offset..chain.len() {
        if gap(i) > gap(best) {
            best = i;
        }
    }
    leaves.push(chain.swap_remove(best));
}

/// Connected components of `nodes` (sorted) under `edges`; each sorted.
fn components(nodes: &[usize], edges: &[&Edge]) -> Vec<Vec<usize>> {
    let idx = |p: usize| nodes.binary_search(&p).unwrap();
    let mut parent: Vec<usize> = (0..nodes.len()).collect();
    fn find(parent: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while parent[r] != r {
            r = parent[r];
        }
        let mut c = x;
        while parent[c] != r {
            let next = parent[c];
            parent[c] = r;
            c = next;
        }
        r
    }
    for e in edges {
        let (ra, rb) = (find(&mut parent, idx(e.a)), find(&mut parent, idx(e.b)));
        if ra != rb {
            parent[ra.max(rb)] = ra.min(rb);
        }
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut slot = vec![usize::MAX; nodes.len()];
    for i in 0..nodes.len() {
        let r = find(&mut parent, i);
        if slot[r] == usize::MAX {
            slot[r] = groups.len();
            groups.push(Vec::new());
        }
        groups[slot[r]].push(nodes[i]);
    }
    groups
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn line(points: &[f64]) -> DistanceMatrix {
        let pts: Vec<WeightVector> = points.iter().map(|&x| WeightVector::from(vec![x])).collect();
        DistanceMatrix::euclidean(&pts)
    }

    fn partition(labels: &[Option<usize>]) -> Vec<Vec<usize>> {
        let mut groups: Vec<Vec<usize>> = Vec::new();
        let max = labels.iter().flatten().max().map_or(0, |m| m + 1);
        for l in 0..max {
            groups.push(
                labels
                    .iter()
                    .enumerate()
                    .filter(|(_, x)| **x == Some(l))
                    .map(|(i, _)| i)
                    .collect(),
            );
        }
        groups
    }

    #[test]
    fn distance_matrix_properties() {
        let pts = vec![
            WeightVector::from(vec![1.0, 0.0]),
            WeightVector::from(vec![0.0, 1.0]),
            WeightVector::from(vec![-2.0, 0.0]),
            WeightVector::zeros(2),
        ];
        let c = DistanceMatrix::cosine(&pts);
        assert!((c.get(0, 1) - 1.0).abs() < 1e-12);
        assert!((c.get(0, 2) - 2.0).abs() < 1e-12);
        assert!((c.get(0, 3) - 1.0).abs() < 1e-12);
        let e = DistanceMatrix::euclidean(&pts);
        assert!((e.get(0, 2) - 3.0).abs() < 1e-12);
        for i in 0..4 {
            assert_eq!(e.get(i, i), 0.0);
        }
        assert!(DistanceMatrix::from_entries(2, vec![0.0, 1.0, 2.0, 0.0], Metric::Euclidean).is_err());
    }

    #[test]
    fn two_separated_blobs() {
        let mut entries = vec![0.0; 100];
        for i in 0..10 {
            for j in 0..10 {
                if (i < 5) != (j < 5) {
                    entries[i * 10 + j] = 10.0;
                }
            }
        }
        let d = DistanceMatrix::from_entries(10, entries, Metric::Euclidean).unwrap();
        let labels = density_cluster(&d, 3).unwrap();
        assert_eq!(partition(&labels), vec![vec![0, 1, 2, 3, 4], vec![5, 6, 7, 8, 9]]);
    }

    #[test]
    fn uniform_distances_form_one_cluster() {
        for n in [4usize, 7, 10] {
            let mut entries = vec![1.5; n * n];
            for i in 0..n {
                entries[i * n + i] = 0.0;
            }
            let d = DistanceMatrix::from_entries(n, entries, Metric::Euclidean).unwrap();
            let labels = density_cluster(&d, n / 2 + 1).unwrap();
            assert!(labels.iter().all(|l| *l == Some(0)));
        }
    }

    #[test]
    fn line_fixture() {
        // Hand-traced: core distances (k = 2) are
        // [.2, .1, .1, .2, .2, .1, .2, 19.9]; the MST has edges
        // .1, .2 x4, 9.7 (group bridge) and 19.9 (to the far point). Cutting
        // 19.9 sheds point 7, cutting 9.7 splits {0..3} / {4..6}, and both
        // halves dissolve into sub-3 pieces below .2.
        let d = line(&[0.0, 0.1, 0.2, 0.3, 10.0, 10.1, 10.2, 30.0]);
        let labels = density_cluster(&d, 3).unwrap();
        assert_eq!(
            labels,
            vec![Some(0), Some(0), Some(0), Some(0), Some(1), Some(1), Some(1), None]
        );
    }

    #[test]
    fn stragglers_peeled_off_one_by_one_are_noise() {
        // The far points have core distances near 50-75 and leave singly
        // before the tight group starts to shed at ~0.5.
        let d = line(&[0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 50.0, 60.0, 75.0]);
        let labels = density_cluster(&d, 6).unwrap();
        let mut expect = vec![Some(0); 7];
        expect.extend([None, None, None]);
        assert_eq!(labels, expect);
    }

    #[test]
    fn degenerate_small_input_passes_through() {
        let d = line(&[0.0, 5.0]);
        assert_eq!(density_cluster(&d, 3).unwrap(), vec![Some(0), Some(0)]);
        assert!(density_cluster(&d, 1).is_err());
    }

    #[test]
    fn largest_cluster_tie_break() {
        let labels = vec![Some(1), Some(0), None, Some(1), Some(0)];
        assert_eq!(largest_cluster(&labels).unwrap(), vec![1, 4]);
        assert!(largest_cluster(&[None, None]).is_none());
    }

    proptest! {
        #[test]
        fn relabeling_invariance(xs in prop::collection::vec(-20.0f64..20.0, 4..14), seed in 0u64..1000, mcs in 2usize..5) {
            prop_assume!(xs.len() >= mcs);
            let d = line(&xs);
            let base = partition(&density_cluster(&d, mcs).unwrap());
            let mut perm: Vec<usize> = (0..xs.len()).collect();
            crate::numerics::Rng::new(seed).shuffle(&mut perm);
            let permuted: Vec<f64> = perm.iter().map(|&i| xs[i]).collect();
            let labels = density_cluster(&line(&permuted), mcs).unwrap();
            let mut mapped: Vec<Vec<usize>> = partition(&labels)
                .into_iter()
                .map(|g| { let mut v: Vec<usize> = g.into_iter().map(|i| perm[i]).collect(); v.sort(); v })
                .collect();
            mapped.sort();
            let mut base = base;
            base.sort();
            prop_assert_eq!(mapped, base);
        }
    }
}
