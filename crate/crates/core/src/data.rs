//! Datasets, non-IID client partitioning and label poisoning.

use std::ops::Deref;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Batch;
use crate::numerics::{sample_dirichlet, Rng};

/// Distance of every blob center from the origin.
pub const CENTER_SCALE: f64 = 4.0;

/// Retry budget for drawing label proportions that leave no client empty.
pub const PARTITION_RETRIES: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub num_classes: usize,
    pub data: Batch,
}

impl Deref for Dataset {
    type Target = Batch;
    fn deref(&self) -> &Batch {
        &self.data
    }
}

impl Dataset {
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            num_classes: self.num_classes,
            data: self.data.select(indices),
        }
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

/// Gaussian blob generator with fixed class centers, so train and test sets
/// can be drawn from the same distribution.
#[derive(Debug, Clone)]
pub struct BlobTask {
    pub classes: usize,
    pub dim: usize,
    pub spread: f64,
    centers: Vec<Vec<f64>>,
}

impl BlobTask {
    /// Centers sit on the scaled standard simplex `CENTER_SCALE * e_c` when
    /// `dim >= classes`; otherwise they are random directions of the same norm.
    pub fn new(rng: &mut Rng, classes: usize, dim: usize, spread: f64) -> Result<Self> {
        if classes < 2 || dim == 0 || !(spread > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "blobs need classes >= 2, dim >= 1, spread > 0 (got {classes}, {dim}, {spread})"
            )));
        }
        let centers = (0..classes)
            .map(|c| {
                if dim >= classes {
                    let mut v = vec![0.0; dim];
                    v[c] = CENTER_SCALE;
                    v
                } else {
                    let g = rng.gaussian_vector(dim, 1.0);
                    let n = g.norm().max(f64::MIN_POSITIVE);
                    g.iter().map(|x| CENTER_SCALE * x / n).collect()
                }
            })
            .collect();
        Ok(Self {
            classes,
            dim,
            spread,
            centers,
        })
    }

    /// `per_class` examples of every class, class-major order.
    pub fn sample(&self, rng: &mut Rng, per_class: usize, name: &str) -> Result<Dataset> {
        if per_class == 0 {
            return Err(Error::InvalidParameter("per_class must be >= 1".into()));
        }
        let n = per_class * self.classes;
        let mut inputs = Vec::with_capacity(n * self.dim);
        let mut labels = Vec::with_capacity(n);
        for (c, center) in self.centers.iter().enumerate() {
            for _ in 0..per_class {
                inputs.extend(center.iter().map(|m| m + self.spread * rng.gaussian()));
                labels.push(c);
            }
        }
        Ok(Dataset {
            name: name.to_string(),
            num_classes: self.classes,
            data: Batch::new(inputs, labels, self.dim)?,
        })
    }
}

pub fn synth_blobs(rng: &mut Rng, classes: usize, dim: usize, per_class: usize, spread: f64) -> Result<Dataset> {
    BlobTask::new(rng, classes, dim, spread)?.sample(rng, per_class, "blobs")
}

/// Disjoint client shards plus a server-side reference holdout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub client_indices: Vec<Vec<usize>>,
    pub reference_indices: Vec<usize>,
}

/// Reference set first (uniform without replacement), then every class is
/// split across the `m` clients in Dirichlet(alpha) proportions. Proportions
/// are redrawn until every client holds at least one example.
pub fn partition_dirichlet(rng: &mut Rng, ds: &Dataset, m: usize, alpha: f64, ref_size: usize) -> Result<Partition> {
    let n = ds.len();
    if m == 0 {
        return Err(Error::InvalidParameter("need at least one client".into()));
    }
    if ref_size >= n {
        return Err(Error::InfeasiblePartition(format!(
            "reference size {ref_size} leaves no data for clients (N = {n})"
        )));
    }
    if !(alpha > 0.0) {
        return Err(Error::InvalidConcentration(alpha));
    }
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let mut reference_indices = order[..ref_size].to_vec();
    reference_indices.sort_unstable();
    let mut remaining = order[ref_size..].to_vec();
    remaining.sort_unstable();

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes];
    for i in remaining {
        by_class[ds.labels[i]].push(i);
    }
    for members in &mut by_class {
        rng.shuffle(members);
    }

    for _ in 0..PARTITION_RETRIES {
        let mut shards: Vec<Vec<usize>> = vec![Vec::new(); m];
        for members in &by_class {
            if members.is_empty() {
                continue;
            }
            let p = sample_dirichlet(rng, alpha, m)?;
            let total = members.len() as f64;
            let mut cum = 0.0;
            let mut start = 0usize;
            for (client, share) in p.iter().enumerate() {
                cum += share;
                let end = if client + 1 == m {
                    members.len()
                } else {
                    ((cum * total).round() as usize).clamp(start, members.len())
                };
                shards[client].extend_from_slice(&members[start..end]);
                start = end;
            }
        }
        if shards.iter().all(|s| !s.is_empty()) {
            for s in &mut shards {
                s.sort_unstable();
            }
            return Ok(Partition {
                client_indices: shards,
                reference_indices,
            });
        }
    }
    Err(Error::InfeasiblePartition(format!(
        "some client stayed empty after {PARTITION_RETRIES} draws (m = {m}, alpha = {alpha})"
    )))
}

/// Relabel every `source` example as `target`.
pub fn flip_labels(ds: &Dataset, source: usize, target: usize) -> Result<Dataset> {
    for class in [source, target] {
        if class >= ds.num_classes {
            return Err(Error::InvalidClass {
                class,
                num_classes: ds.num_classes,
            });
        }
    }
    if source == target {
        return Err(Error::InvalidParameter("source and target classes must differ".into()));
    }
    let mut out = ds.clone();
    for l in &mut out.data.labels {
        if *l == source {
            *l = target;
        }
    }
    Ok(out)
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn idx_err(name: &str, message: String) -> Error {
    Error::Parse {
        source_name: name.to_string(),
        message,
    }
}

fn read_u32(bytes: &[u8], offset: usize, name: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| {
            idx_err(
                name,
                format!(
                    "expected 4 header bytes at offset {offset}, only {} available",
                    bytes.len().saturating_sub(offset)
                ),
            )
        })
}

/// Parse an IDX3 (unsigned byte) image file; pixels are scaled to `[0, 1]`.
/// Returns `(count, rows * cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8], name: &str) -> Result<(usize, usize, Vec<f64>)> {
    let magic = read_u32(bytes, 0, name)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(idx_err(
            name,
            format!("bad magic number 0x{magic:08x} at offset 0, expected 0x{IDX_IMAGES_MAGIC:08x}"),
        ));
    }
    let count = read_u32(bytes, 4, name)? as usize;
    let rows = read_u32(bytes, 8, name)? as usize;
    let cols = read_u32(bytes, 12, name)? as usize;
    let need = count * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(idx_err(
            name,
            format!(
                "truncated pixel data at offset 16: expected {need} bytes, {} available",
                body.len()
            ),
        ));
    }
    let pixels = body[..need].iter().map(|&b| b as f64 / 255.0).collect();
    Ok((count, rows * cols, pixels))
}

pub fn parse_idx_labels(bytes: &[u8], name: &str) -> Result<Vec<usize>> {
    let magic = read_u32(bytes, 0, name)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(idx_err(
            name,
            format!("bad magic number 0x{magic:08x} at offset 0, expected 0x{IDX_LABELS_MAGIC:08x}"),
        ));
    }
    let count = read_u32(bytes, 4, name)? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(idx_err(
            name,
            format!(
                "truncated label data at offset 8: expected {count} bytes, {} available",
                body.len()
            ),
        ));
    }
    Ok(body[..count].iter().map(|&b| b as usize).collect())
}

/// Load an IDX image/label file pair (e.g. Fashion-MNIST).
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let img_name = images.display().to_string();
    let (count, input_dim, pixels) = parse_idx_images(&std::fs::read(images)?, &img_name)?;
    let lbl = parse_idx_labels(&std::fs::read(labels)?, &labels.display().to_string())?;
    if lbl.len() != count {
        return Err(idx_err(
            &img_name,
            format!("image count {count} does not match label count {}", lbl.len()),
        ));
    }
    let num_classes = lbl.iter().max().map_or(0, |m| m + 1).max(2);
    Ok(Dataset {
        name: img_name,
        num_classes,
        data: Batch::new(pixels, lbl, input_dim)?,
    })
}

/// Parse a headered CSV whose `label` column (or last column when none is
/// named so) holds integer classes; every other column is z-scored.
pub fn parse_csv(text: &str, name: &str) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| idx_err(name, format!("line 1: {e}")))?
        .clone();
    let width = headers.len();
    if width < 2 {
        return Err(idx_err(name, "line 1: need at least one feature and a label column".into()));
    }
    let label_col = headers.iter().position(|h| h == "label").unwrap_or(width - 1);
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); width - 1];
    let mut labels = Vec::new();
    for (row_no, record) in reader.records().enumerate() {
        let line = row_no + 2;
        let record = record.map_err(|e| idx_err(name, format!("line {line}: {e}")))?;
        if record.len() != width {
            return Err(idx_err(
                name,
                format!("line {line}: expected {width} fields, found {}", record.len()),
            ));
        }
        let mut feature = 0;
        for (c, field) in record.iter().enumerate() {
            if c == label_col {
                let l: usize = field
                    .parse()
                    .map_err(|_| idx_err(name, format!("line {line}: label `{field}` is not a class index")))?;
                labels.push(l);
            } else {
                let v: f64 = field
                    .parse()
                    .map_err(|_| idx_err(name, format!("line {line}, column {}: `{field}` is not numeric", c + 1)))?;
                if !v.is_finite() {
                    return Err(idx_err(name, format!("line {line}, column {}: non-finite value", c + 1)));
                }
                columns[feature].push(v);
                feature += 1;
            }
        }
    }
    if labels.is_empty() {
        return Err(idx_err(name, "no data rows".into()));
    }
    for col in &mut columns {
        let n = col.len() as f64;
        let mean = col.iter().sum::<f64>() / n;
        let std = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        for v in col.iter_mut() {
            *v = if std > 0.0 { (*v - mean) / std } else { 0.0 };
        }
    }
    let input_dim = columns.len();
    let mut inputs = Vec::with_capacity(labels.len() * input_dim);
    for r in 0..labels.len() {
        inputs.extend(columns.iter().map(|c| c[r]));
    }
    let num_classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
    Ok(Dataset {
        name: name.to_string(),
        num_classes,
        data: Batch::new(inputs, labels, input_dim)?,
    })
}

pub fn load_csv(path: &Path) -> Result<Dataset> {
    parse_csv(&std::fs::read_to_string(path)?, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{accuracy, grad, ModelSpec};
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

    fn entropy(hist: &[usize]) -> f64 {
        let total: usize = hist.iter().sum();
        hist.iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / total as f64;
                -p * p.ln()
            })
            .sum()
    }

    fn blobs10(seed: u64) -> Dataset {
        synth_blobs(&mut Rng::new(seed), 10, 12, 60, 1.0).unwrap()
    }

    #[test]
    fn blobs_are_deterministic_and_balanced() {
        let a = synth_blobs(&mut Rng::new(5), 2, 2, 50, 1.0).unwrap();
        let b = synth_blobs(&mut Rng::new(5), 2, 2, 50, 1.0).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        assert_eq!(a.class_histogram(), vec![50, 50]);
        assert!(synth_blobs(&mut Rng::new(5), 1, 2, 50, 1.0).is_err());
    }

    #[test]
    fn tight_blobs_are_learnable() {
        let ds = synth_blobs(&mut Rng::new(1), 4, 6, 20, 1e-6).unwrap();
        let spec = ModelSpec::softmax(6, 4);
        let mut w = crate::numerics::WeightVector::zeros(spec.dim());
        for _ in 0..200 {
            let g = grad(&spec, &w, &ds).unwrap();
            w.axpy(-0.5, &g);
        }
        assert_eq!(accuracy(&spec, &w, &ds).unwrap(), 1.0);
    }

    #[test]
    fn reference_set_size_and_disjointness() {
        let ds = blobs10(2);
        let p = partition_dirichlet(&mut Rng::new(3), &ds, 10, 0.5, 100).unwrap();
        assert_eq!(p.reference_indices.len(), 100);
        let mut seen = vec![false; ds.len()];
        for &i in p.client_indices.iter().flatten().chain(&p.reference_indices) {
            assert!(!seen[i], "index {i} used twice");
            seen[i] = true;
        }
        assert!(p.client_indices.iter().all(|s| !s.is_empty()));
        assert_eq!(seen.iter().filter(|&&s| s).count(), ds.len());
    }

    #[test]
    fn iid_limit_matches_global_histogram() {
        let ds = blobs10(4);
        let mut worst = 0.0f64;
        let mut acc = vec![vec![0.0; 10]; 10];
        let seeds = 100;
        for seed in 0..seeds {
            let p = partition_dirichlet(&mut Rng::new(seed), &ds, 10, 1e6, 0).unwrap();
            for (c, shard) in p.client_indices.iter().enumerate() {
                let hist = ds.subset(shard).class_histogram();
                for k in 0..10 {
                    acc[c][k] += hist[k] as f64 / shard.len() as f64 / seeds as f64;
                }
            }
        }
        for row in &acc {
            for v in row {
                worst = worst.max((v - 0.1).abs());
            }
        }
        assert!(worst < 0.05, "worst deviation {worst}");
    }

    #[test]
    fn small_alpha_lowers_label_entropy() {
        let ds = blobs10(6);
        let mean_entropy = |alpha: f64| {
            let p = partition_dirichlet(&mut Rng::new(9), &ds, 10, alpha, 0).unwrap();
            p.client_indices
                .iter()
                .map(|s| entropy(&ds.subset(s).class_histogram()))
                .sum::<f64>()
                / 10.0
        };
        assert!(mean_entropy(0.1) < mean_entropy(1e6));
    }

    #[test]
    fn partition_errors() {
        let ds = blobs10(1);
        assert!(matches!(
            partition_dirichlet(&mut Rng::new(0), &ds, 5, 0.5, ds.len()),
            Err(Error::InfeasiblePartition(_))
        ));
        // More clients than examples can never fill every shard.
        let tiny = synth_blobs(&mut Rng::new(0), 2, 2, 2, 1.0).unwrap();
        assert!(matches!(
            partition_dirichlet(&mut Rng::new(0), &tiny, 10, 0.5, 0),
            Err(Error::InfeasiblePartition(_))
        ));
    }

    #[test]
    fn partition_reproducible() {
        let ds = blobs10(2);
        let a = partition_dirichlet(&mut Rng::new(1), &ds, 7, 0.3, 20).unwrap();
        let b = partition_dirichlet(&mut Rng::new(1), &ds, 7, 0.3, 20).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn label_flipping() {
        let ds = blobs10(3);
        let before = ds.class_histogram();
        let flipped = flip_labels(&ds, 0, 1).unwrap();
        let after = flipped.class_histogram();
        assert_eq!(after[1], before[1] + before[0]);
        assert_eq!(after[0], 0);
        assert_eq!(flipped.inputs, ds.inputs);
        // Idempotent.
        assert_eq!(flip_labels(&flipped, 0, 1).unwrap(), flipped);
        // No source examples: unchanged.
        assert_eq!(flip_labels(&flipped, 0, 2).unwrap(), flipped);
        // All source.
        let only0 = ds.subset(&(0..60).collect::<Vec<_>>());
        assert!(flip_labels(&only0, 0, 4).unwrap().labels.iter().all(|&l| l == 4));
        assert!(flip_labels(&ds, 0, 10).is_err());
        assert!(flip_labels(&ds, 3, 3).is_err());
    }

    /// Four 2x2 images with pixels 0, 51, 102, 255 and labels 3, 1, 4, 1;
    /// hex dump of the image file:
    /// `00 00 08 03 | 00 00 00 04 | 00 00 00 02 | 00 00 00 02 | <16 pixel bytes>`.
    fn idx_fixture() -> (Vec<u8>, Vec<u8>) {
        let mut img = vec![0, 0, 8, 3, 0, 0, 0, 4, 0, 0, 0, 2, 0, 0, 0, 2];
        img.extend_from_slice(&[0, 51, 102, 255, 255, 102, 51, 0, 0, 0, 0, 0, 255, 255, 255, 255]);
        let lbl = vec![0, 0, 8, 1, 0, 0, 0, 4, 3, 1, 4, 1];
        (img, lbl)
    }

    #[test]
    fn idx_fixture_parses() {
        let (img, lbl) = idx_fixture();
        let (count, dim, px) = parse_idx_images(&img, "img").unwrap();
        assert_eq!((count, dim), (4, 4));
        assert_eq!(&px[..4], &[0.0, 0.2, 0.4, 1.0]);
        assert_eq!(&px[12..], &[1.0; 4]);
        assert_eq!(parse_idx_labels(&lbl, "lbl").unwrap(), vec![3, 1, 4, 1]);

        let dir = std::env::temp_dir().join(format!("fedhybrid-idx-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        std::fs::write(dir.join("img"), &img).unwrap();
        std::fs::write(dir.join("lbl"), &lbl).unwrap();
        let ds = load_idx(&dir.join("img"), &dir.join("lbl")).unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.num_classes, 5);
        std::fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn idx_errors() {
        let (img, lbl) = idx_fixture();
        let err = parse_idx_images(&img[..20], "img").unwrap_err().to_string();
        assert!(err.contains("expected 16 bytes, 4 available"), "{err}");
        let mut bad = img.clone();
        bad[3] = 9;
        assert!(parse_idx_images(&bad, "img").unwrap_err().to_string().contains("magic"));
        assert!(parse_idx_labels(&lbl[..6], "lbl").unwrap_err().to_string().contains("offset 4"));
        assert!(parse_idx_labels(&img, "lbl").is_err());
    }

    #[test]
    fn csv_zscore() {
        let text = "a,b,c,label\n1,10,5,0\n2,20,5,1\n3,30,5,2\n4,40,5,1\n";
        let ds = parse_csv(text, "t.csv").unwrap();
        assert_eq!(ds.input_dim, 3);
        assert_eq!(ds.labels, vec![0, 1, 2, 1]);
        for c in 0..3 {
            let mean: f64 = (0..4).map(|r| ds.row(r)[c]).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-9);
        }
        assert!((ds.row(0)[0] - ds.row(0)[1]).abs() < 1e-12);
        assert_eq!(ds.row(2)[2], 0.0);
    }

    #[test]
    fn csv_errors_name_the_line() {
        let err = parse_csv("a,label\n1,0\n2\n", "t.csv").unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
        let err = parse_csv("a,label\n1,0\nx,1\n", "t.csv").unwrap_err().to_string();
        assert!(err.contains("line 3") && err.contains("column 1"), "{err}");
    }

    proptest! {
        #[test]
        fn partition_is_sub_partition(seed in 0u64..200, m in 1usize..12, alpha in 0.05f64..5.0) {
            let ds = blobs10(seed);
            if let Ok(p) = partition_dirichlet(&mut Rng::new(seed), &ds, m, alpha, 30) {
                let mut all: Vec<usize> = p.client_indices.iter().flatten().chain(&p.reference_indices).cloned().collect();
                let len = all.len();
                all.sort_unstable();
                all.dedup();
                prop_assert_eq!(all.len(), len);
                prop_assert!(len <= ds.len());
                prop_assert!(p.client_indices.iter().all(|s| !s.is_empty()));
            }
        }
    }
}
