//! Seeded k-means with k-means++ initialization.

use crate::error::{Error, Result};
use crate::par;
use rand::prelude::*;
use rand_pcg::Pcg64Mcg;
use serde::{Deserialize, Serialize};

/// Fitted centroids for feature clustering.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ClusterModel {
    /// Row-major `k x dim`.
    pub centroids: Vec<f64>,
    pub k: usize,
    pub dim: usize,
    pub feature_backend_id: String,
    pub seed: u64,
}

impl ClusterModel {
    /// Index of the nearest centroid (Euclidean); ties break to the lower index.
    pub fn assign(&self, v: &[f32]) -> usize {
        debug_assert_eq!(v.len(), self.dim);
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for c in 0..self.k {
            let row = &self.centroids[c * self.dim..(c + 1) * self.dim];
            let mut d = 0.0f64;
            for (a, b) in row.iter().zip(v) {
                let diff = a - *b as f64;
                d += diff * diff;
            }
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        best
    }
}

fn sq_dist(a: &[f64], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - *y as f64;
            d * d
        })
        .sum()
}

/// Lloyd iterations with k-means++ seeding on `points` (row-major `n x dim`).
///
/// Deterministic for a fixed seed. Errors when fewer than `k` distinct
/// points exist or a duplicate centroid survives fitting.
pub fn kmeans_fit(
    points: &[f32],
    dim: usize,
    k: usize,
    seed: u64,
    max_iters: usize,
    backend_id: &str,
) -> Result<ClusterModel> {
    let n = points.len() / dim;
    if k < 2 {
        return Err(Error::InvalidArgument {
            arg: "k",
            reason: "need at least 2 clusters".into(),
        });
    }
    // Count distinct vectors, bounded effort: bitwise comparison.
    let mut distinct: Vec<&[f32]> = Vec::new();
    for i in 0..n {
        let v = &points[i * dim..(i + 1) * dim];
        if !distinct.iter().any(|d| d == &v) {
            distinct.push(v);
            if distinct.len() > k {
                break;
            }
        }
    }
    if distinct.len() < k {
        return Err(Error::Dataset(format!(
            "only {} distinct feature vectors available; reduce K below {k}",
            distinct.len()
        )));
    }

    let mut rng = Pcg64Mcg::seed_from_u64(seed);
    // k-means++ seeding.
    let mut centroids = vec![0.0f64; k * dim];
    let first = rng.random_range(0..n);
    for d in 0..dim {
        centroids[d] = points[first * dim + d] as f64;
    }
    let mut min_d2: Vec<f64> = (0..n)
        .map(|i| sq_dist(&centroids[0..dim], &points[i * dim..(i + 1) * dim]))
        .collect();
    for c in 1..k {
        let total: f64 = min_d2.iter().sum();
        let chosen = if total <= 0.0 {
            // All remaining points coincide with a centroid; pick any distinct one.
            (0..n)
                .find(|&i| min_d2[i] > 0.0)
                .unwrap_or_else(|| rng.random_range(0..n))
        } else {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d2) in min_d2.iter().enumerate() {
                target -= d2;
                if target <= 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        };
        for d in 0..dim {
            centroids[c * dim + d] = points[chosen * dim + d] as f64;
        }
        for i in 0..n {
            let d2 = sq_dist(&centroids[c * dim..(c + 1) * dim], &points[i * dim..(i + 1) * dim]);
            if d2 < min_d2[i] {
                min_d2[i] = d2;
            }
        }
    }

    let mut assignment = vec![0usize; n];
    for _iter in 0..max_iters {
        // Assignment step (parallel, order-stable).
        let model = ClusterModel {
            centroids: centroids.clone(),
            k,
            dim,
            feature_backend_id: backend_id.to_string(),
            seed,
        };
        let new_assignment = par::map_indices(n, |i| model.assign(&points[i * dim..(i + 1) * dim]));

        // Update step, sequential accumulation for determinism.
        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &a) in new_assignment.iter().enumerate() {
            counts[a] += 1;
            for d in 0..dim {
                sums[a * dim + d] += points[i * dim + d] as f64;
            }
        }
        // Re-seat empty clusters on the point farthest from its centroid.
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = sq_dist(
                            &centroids[new_assignment[a] * dim..(new_assignment[a] + 1) * dim],
                            &points[a * dim..(a + 1) * dim],
                        );
                        let db = sq_dist(
                            &centroids[new_assignment[b] * dim..(new_assignment[b] + 1) * dim],
                            &points[b * dim..(b + 1) * dim],
                        );
                        da.partial_cmp(&db).unwrap_or(std::cmp::Ordering::Equal)
                    })
                    .unwrap();
                for d in 0..dim {
                    sums[c * dim + d] = points[far * dim + d] as f64;
                }
                counts[c] = 1;
            }
        }
        let mut changed = false;
        for c in 0..k {
            for d in 0..dim {
                let v = sums[c * dim + d] / counts[c] as f64;
                if (v - centroids[c * dim + d]).abs() > 1e-12 {
                    changed = true;
                }
                centroids[c * dim + d] = v;
            }
        }
        let converged_assignment = new_assignment == assignment;
        assignment = new_assignment;
        if !changed && converged_assignment {
            break;
        }
    }

    // Pairwise distinct centroids are part of the model contract.
    for a in 0..k {
        for b in a + 1..k {
            let d: f64 = (0..dim)
                .map(|i| (centroids[a * dim + i] - centroids[b * dim + i]).powi(2))
                .sum();
            if d < 1e-18 {
                return Err(Error::Numeric(format!(
                    "degenerate duplicate centroids {a} and {b}; reduce K"
                )));
            }
        }
    }

    Ok(ClusterModel {
        centroids,
        k,
        dim,
        feature_backend_id: backend_id.to_string(),
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs() -> Vec<f32> {
        let mut rng = Pcg64Mcg::seed_from_u64(42);
        let centers = [[0.0f32, 0.0], [5.0, 5.0], [0.0, 5.0]];
        let mut points = Vec::new();
        for _ in 0..300 {
            let c = centers[rng.random_range(0..3)];
            points.push(c[0] + rng.random::<f32>() * 0.2);
            points.push(c[1] + rng.random::<f32>() * 0.2);
        }
        points
    }

    #[test]
    fn recovers_well_separated_blobs() {
        let points = blobs();
        let model = kmeans_fit(&points, 2, 3, 7, 100, "test").unwrap();
        // Each fitted centroid lies near one true center.
        let centers = [[0.0f64, 0.0], [5.0, 5.0], [0.0, 5.0]];
        for c in 0..3 {
            let row = &model.centroids[c * 2..c * 2 + 2];
            let best = centers
                .iter()
                .map(|t| ((row[0] - t[0]).powi(2) + (row[1] - t[1]).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min);
            assert!(best < 0.3, "centroid {c} off by {best}");
        }
    }

    #[test]
    fn same_seed_same_centroids() {
        let points = blobs();
        let a = kmeans_fit(&points, 2, 3, 9, 100, "test").unwrap();
        let b = kmeans_fit(&points, 2, 3, 9, 100, "test").unwrap();
        assert_eq!(a.centroids, b.centroids);
    }

    #[test]
    fn too_few_distinct_points_errors() {
        let points = vec![1.0f32, 2.0, 1.0, 2.0, 1.0, 2.0];
        let err = kmeans_fit(&points, 2, 2, 1, 10, "test").unwrap_err();
        assert!(err.to_string().contains("reduce K"));
    }

    #[test]
    fn assignment_tie_breaks_to_lower_index() {
        let model = ClusterModel {
            centroids: vec![0.0, 0.0, 2.0, 0.0],
            k: 2,
            dim: 2,
            feature_backend_id: "test".into(),
            seed: 0,
        };
        // Equidistant to both centroids.
        assert_eq!(model.assign(&[1.0, 0.0]), 0);
    }
}
