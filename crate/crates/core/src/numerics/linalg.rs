//! Dominant right singular vector by power iteration on the Gram matrix.

use super::WeightVector;
use crate::error::{Error, Result};

pub const DEFAULT_POWER_ITERS: usize = 100;
pub const DEFAULT_POWER_TOL: f64 = 1e-9;

/// `G v = X^T (X v)` without forming `G`.
fn gram_apply(rows: &[WeightVector], v: &[f64]) -> WeightVector {
    let mut out = WeightVector::zeros(v.len());
    for row in rows {
        let proj: f64 = row.iter().zip(v).map(|(a, b)| a * b).sum();
        if proj != 0.0 {
            out.axpy(proj, row);
        }
    }
    out
}

/// Unit vector maximising `sum_i <row_i, v>^2`.
///
/// Starts from `e_0`, falling back to `e_{d-1}` and then to the first
/// coordinate axis with nonzero column mass when the start is orthogonal to
/// the row space. The sign is fixed so that the first entry whose magnitude
/// exceeds `1e-12 * max|v|` is positive.
pub fn top_right_singular_vector(
    rows: &[WeightVector],
    iters: usize,
    tol: f64,
) -> Result<WeightVector> {
    let first = rows.first().ok_or(Error::EmptyVector)?;
    let dim = first.len();
    if dim == 0 {
        return Err(Error::EmptyVector);
    }
    for r in rows {
        if r.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: r.len(),
            });
        }
    }

    let axis = |j: usize| {
        let mut e = WeightVector::zeros(dim);
        e[j] = 1.0;
        e
    };
    let mut starts = vec![0, dim - 1];
    if let Some(j) = (0..dim).find(|&j| rows.iter().any(|r| r[j] != 0.0)) {
        starts.push(j);
    }

    let mut v = None;
    for j in starts {
        let z = gram_apply(rows, &axis(j));
        if let Some(unit) = z.normalized() {
            v = Some(unit);
            break;
        }
    }
    let mut v = v.ok_or(Error::DegenerateMatrix)?;

    for _ in 0..iters {
        let next = match gram_apply(rows, &v).normalized() {
            Some(n) => n,
            None => break,
        };
        let delta = next.distance(&v);
        v = next;
        if delta < tol {
            break;
        }
    }

    let max_abs = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if let Some(&lead) = v.iter().find(|x| x.abs() > 1e-12 * max_abs) {
        if lead < 0.0 {
            v.scale_in_place(-1.0);
        }
    }
    Ok(v)
}
