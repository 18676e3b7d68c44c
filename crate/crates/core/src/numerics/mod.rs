//! Deterministic numerical kernels shared by every other module.

mod cluster;
mod dct;
mod linalg;
mod rng;
mod sampling;
mod vector;

pub use cluster::{density_cluster, largest_cluster, DistanceMatrix, Metric};
pub use dct::{dct2, idct2};
pub use linalg::{top_right_singular_vector, DEFAULT_POWER_ITERS, DEFAULT_POWER_TOL};
pub use rng::{fnv1a64, Rng};
pub use sampling::sample_dirichlet;
pub use vector::{mean, WeightVector};
