//! Class-conditional global appearance model: per-class mean feature
//! descriptors, Gaussian fits and averaged Mahalanobis scoring.

pub mod linalg;

use crate::backends::FeatureMap;
use crate::compmap::CompositionMap;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Per-class mean feature vectors of one image (part classes only; class 0
/// is background and never contributes).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GlobalDescriptor {
    /// Row-major `k x dim`; rows of absent classes are zero.
    pub vectors: Vec<f64>,
    pub present: Vec<bool>,
    pub k: usize,
    pub dim: usize,
}

impl GlobalDescriptor {
    pub fn class_vector(&self, part: usize) -> &[f64] {
        &self.vectors[part * self.dim..(part + 1) * self.dim]
    }
}

/// Gaussian fit of one part class across the training corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassGaussian {
    pub mu: Vec<f64>,
    /// Row-major `dim x dim`, after regularization.
    pub sigma: Vec<f64>,
    pub sigma_inv: Vec<f64>,
    /// Largest Mahalanobis distance among the training descriptors.
    pub d_max: f64,
    pub n_support: usize,
}

/// Mean teacher-feature vector per part class of `c` (downsampled to the
/// feature resolution by nearest neighbor).
pub fn compute_descriptor(f_t: &FeatureMap, c: &CompositionMap) -> Result<GlobalDescriptor> {
    let k = c.num_parts();
    let dim = f_t.channels;
    let aligned = c.resize_nearest(f_t.height, f_t.width);
    if aligned.len() != f_t.height * f_t.width {
        return Err(Error::Shape("composition map does not align with features".into()));
    }
    let mut sums = vec![0.0f64; k * dim];
    let mut counts = vec![0usize; k];
    for (p, &cls) in aligned.classes.iter().enumerate() {
        if cls == 0 {
            continue;
        }
        let part = cls as usize - 1;
        let v = f_t.vector(p / f_t.width, p % f_t.width);
        for d in 0..dim {
            sums[part * dim + d] += v[d] as f64;
        }
        counts[part] += 1;
    }
    let present: Vec<bool> = counts.iter().map(|&c| c > 0).collect();
    for part in 0..k {
        if counts[part] > 0 {
            for d in 0..dim {
                sums[part * dim + d] /= counts[part] as f64;
            }
        }
    }
    if sums.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite descriptor".into()));
    }
    Ok(GlobalDescriptor {
        vectors: sums,
        present,
        k,
        dim,
    })
}

fn mahalanobis(delta: &[f64], sigma_inv: &[f64], dim: usize) -> f64 {
    let mut q = 0.0f64;
    for i in 0..dim {
        let mut acc = 0.0;
        for j in 0..dim {
            acc += sigma_inv[i * dim + j] * delta[j];
        }
        q += delta[i] * acc;
    }
    q.max(0.0).sqrt()
}

/// Fit one Gaussian per part class over the training descriptors.
///
/// Unbiased covariance, regularized by `eps * I` with
/// `eps = max(1e-3 * mean(diag(sigma)), 1e-8)`; Cholesky inversion with a
/// pseudo-inverse fallback (warned). Every class needs at least two
/// supporting samples.
pub fn fit_gaussians(descriptors: &[GlobalDescriptor]) -> Result<Vec<ClassGaussian>> {
    fit_gaussians_regularized(descriptors, 1e-3)
}

/// [`fit_gaussians`] with an explicit relative regularization scale.
pub fn fit_gaussians_regularized(
    descriptors: &[GlobalDescriptor],
    eps_scale: f64,
) -> Result<Vec<ClassGaussian>> {
    if descriptors.is_empty() {
        return Err(Error::InvalidArgument {
            arg: "descriptors",
            reason: "empty training set".into(),
        });
    }
    let k = descriptors[0].k;
    let dim = descriptors[0].dim;
    let mut out = Vec::with_capacity(k);
    for part in 0..k {
        let samples: Vec<&[f64]> = descriptors
            .iter()
            .filter(|d| d.present[part])
            .map(|d| d.class_vector(part))
            .collect();
        let n = samples.len();
        if n < 2 {
            return Err(Error::Dataset(format!(
                "class {} has {n} supporting samples; need at least 2",
                part + 1
            )));
        }
        let mut mu = vec![0.0f64; dim];
        for s in &samples {
            for d in 0..dim {
                mu[d] += s[d];
            }
        }
        for m in &mut mu {
            *m /= n as f64;
        }
        let mut sigma = vec![0.0f64; dim * dim];
        for s in &samples {
            for i in 0..dim {
                let di = s[i] - mu[i];
                for j in 0..dim {
                    sigma[i * dim + j] += di * (s[j] - mu[j]);
                }
            }
        }
        for v in &mut sigma {
            *v /= (n - 1) as f64;
        }
        let mean_diag: f64 = (0..dim).map(|i| sigma[i * dim + i]).sum::<f64>() / dim as f64;
        let eps = (eps_scale * mean_diag).max(1e-8);
        for i in 0..dim {
            sigma[i * dim + i] += eps;
        }
        let sigma_inv = match linalg::spd_inverse(&sigma, dim) {
            Some(inv) => inv,
            None => {
                eprintln!("warning: class {} covariance singular after regularization; using pseudo-inverse", part + 1);
                linalg::sym_pseudo_inverse(&sigma, dim)
            }
        };
        let mut d_max = 0.0f64;
        for s in &samples {
            let delta: Vec<f64> = s.iter().zip(&mu).map(|(a, b)| a - b).collect();
            d_max = d_max.max(mahalanobis(&delta, &sigma_inv, dim));
        }
        out.push(ClassGaussian {
            mu,
            sigma,
            sigma_inv,
            d_max,
            n_support: n,
        });
    }
    Ok(out)
}

/// Average Mahalanobis distance over the K part classes.
///
/// A class absent from the descriptor contributes its training `d_max`
/// instead of a distance (a missing component must not reduce the average).
pub fn mahalanobis_score(g: &GlobalDescriptor, gaussians: &[ClassGaussian]) -> Result<f64> {
    if g.k != gaussians.len() {
        return Err(Error::Shape(format!(
            "descriptor has {} classes, model has {}",
            g.k,
            gaussians.len()
        )));
    }
    let mut total = 0.0f64;
    for part in 0..g.k {
        let gauss = &gaussians[part];
        let d = if g.present[part] {
            let v = g.class_vector(part);
            let delta: Vec<f64> = v.iter().zip(&gauss.mu).map(|(a, b)| a - b).collect();
            mahalanobis(&delta, &gauss.sigma_inv, g.dim)
        } else {
            gauss.d_max
        };
        total += d;
    }
    let score = total / g.k as f64;
    if !score.is_finite() {
        return Err(Error::Numeric("non-finite global score".into()));
    }
    Ok(score)
}

/// Serialized global model: JSON-of-arrays, keyed per class.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GlobalModel {
    pub k: usize,
    pub dim: usize,
    pub backend_id: String,
    pub gaussians: Vec<ClassGaussian>,
}

impl GlobalModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Serialization(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_pcg::Pcg64Mcg;

    fn feature_map(h: usize, w: usize, dim: usize, data: Vec<f32>) -> FeatureMap {
        FeatureMap::new(h, w, dim, data, (h, w), "test").unwrap()
    }

    #[test]
    fn constant_features_make_constant_descriptors() {
        let dim = 3;
        let fm = feature_map(4, 4, dim, [0.5f32, -1.0, 2.0].repeat(16));
        let mut c = CompositionMap::zeros(4, 4, 3);
        c.set(0, 0, 1);
        c.set(1, 1, 2);
        c.set(2, 2, 2);
        let g = compute_descriptor(&fm, &c).unwrap();
        assert!(g.present[0] && g.present[1]);
        for part in 0..2 {
            let v = g.class_vector(part);
            assert!((v[0] - 0.5).abs() < 1e-9);
            assert!((v[1] + 1.0).abs() < 1e-9);
            assert!((v[2] - 2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn two_pixel_class_means_average() {
        let mut data = vec![0.0f32; 4 * 2];
        data[0] = 1.0; // pixel (0,0), channel 0
        data[2] = 3.0; // pixel (0,1), channel 0
        let fm = feature_map(2, 2, 2, data);
        let c = CompositionMap::new(2, 2, vec![1, 1, 0, 0], 2).unwrap();
        let g = compute_descriptor(&fm, &c).unwrap();
        assert!((g.class_vector(0)[0] - 2.0).abs() < 1e-12);
        assert!((g.class_vector(0)[1] - 0.0).abs() < 1e-12);
    }

    #[test]
    fn descriptor_matches_brute_force_accumulation() {
        let mut rng = Pcg64Mcg::seed_from_u64(9);
        let (h, w, dim, k) = (8, 8, 4, 3);
        let data: Vec<f32> = (0..h * w * dim).map(|_| rng.random::<f32>() * 2.0 - 1.0).collect();
        let fm = feature_map(h, w, dim, data.clone());
        let classes: Vec<u16> = (0..h * w).map(|_| rng.random_range(0..(k + 1) as u16)).collect();
        let c = CompositionMap::new(h, w, classes.clone(), k + 1).unwrap();
        let g = compute_descriptor(&fm, &c).unwrap();
        for part in 0..k {
            let mut sum = vec![0.0f64; dim];
            let mut n = 0.0;
            for p in 0..h * w {
                if classes[p] as usize == part + 1 {
                    for d in 0..dim {
                        sum[d] += data[p * dim + d] as f64;
                    }
                    n += 1.0;
                }
            }
            for d in 0..dim {
                let want = if n > 0.0 { sum[d] / n } else { 0.0 };
                assert!((g.class_vector(part)[d] - want).abs() < 1e-10);
            }
        }
    }

    fn descriptor(k: usize, dim: usize, values: Vec<f64>) -> GlobalDescriptor {
        GlobalDescriptor {
            present: vec![true; k],
            vectors: values,
            k,
            dim,
        }
    }

    #[test]
    fn one_dim_closed_form_mean_and_variance() {
        let d1 = descriptor(1, 1, vec![0.0]);
        let d2 = descriptor(1, 1, vec![2.0]);
        let g = fit_gaussians(&[d1, d2]).unwrap();
        assert!((g[0].mu[0] - 1.0).abs() < 1e-12);
        // Unbiased variance of {0, 2} is 2... no: ((0-1)^2 + (2-1)^2) / (2-1) = 2.
        let eps = (1e-3 * 2.0f64).max(1e-8);
        assert!((g[0].sigma[0] - (2.0 + eps)).abs() < 1e-12);
    }

    #[test]
    fn identical_descriptors_regularize_to_eps() {
        let samples: Vec<GlobalDescriptor> = (0..4).map(|_| descriptor(1, 2, vec![3.0, -1.0])).collect();
        let g = fit_gaussians(&samples).unwrap();
        assert!((g[0].sigma[0] - 1e-8).abs() < 1e-15);
        assert_eq!(g[0].d_max, 0.0);
    }

    #[test]
    fn absent_class_everywhere_is_an_error() {
        let mut d = descriptor(2, 1, vec![1.0, 0.0]);
        d.present[1] = false;
        let err = fit_gaussians(&[d.clone(), d]).unwrap_err();
        assert!(err.to_string().contains("class 2"));
    }

    #[test]
    fn euclidean_case_gives_known_distance() {
        // K=1, sigma = I (D=2), displacement (3,4) -> distance 5.
        let gauss = ClassGaussian {
            mu: vec![0.0, 0.0],
            sigma: vec![1.0, 0.0, 0.0, 1.0],
            sigma_inv: vec![1.0, 0.0, 0.0, 1.0],
            d_max: 1.0,
            n_support: 10,
        };
        let g = descriptor(1, 2, vec![3.0, 4.0]);
        let s = mahalanobis_score(&g, &[gauss]).unwrap();
        assert!((s - 5.0).abs() < 1e-12);
    }

    #[test]
    fn score_is_zero_at_the_mean_and_dmax_when_absent() {
        let mut rng = Pcg64Mcg::seed_from_u64(70);
        let samples: Vec<GlobalDescriptor> = (0..30)
            .map(|_| descriptor(2, 3, (0..6).map(|_| rng.random::<f64>()).collect()))
            .collect();
        let gaussians = fit_gaussians(&samples).unwrap();
        let mu_desc = GlobalDescriptor {
            present: vec![true; 2],
            vectors: gaussians.iter().flat_map(|g| g.mu.clone()).collect(),
            k: 2,
            dim: 3,
        };
        assert!(mahalanobis_score(&mu_desc, &gaussians).unwrap() < 1e-12);

        let mut absent = mu_desc.clone();
        absent.present[1] = false;
        let s = mahalanobis_score(&absent, &gaussians).unwrap();
        assert!((s - gaussians[1].d_max / 2.0).abs() < 1e-12);
    }

    #[test]
    fn training_distances_bounded_by_dmax() {
        let mut rng = Pcg64Mcg::seed_from_u64(71);
        let samples: Vec<GlobalDescriptor> = (0..40)
            .map(|_| descriptor(1, 4, (0..4).map(|_| rng.random::<f64>() * 3.0).collect()))
            .collect();
        let gaussians = fit_gaussians(&samples).unwrap();
        for s in &samples {
            let delta: Vec<f64> = s.class_vector(0).iter().zip(&gaussians[0].mu).map(|(a, b)| a - b).collect();
            let d = mahalanobis(&delta, &gaussians[0].sigma_inv, 4);
            assert!(d <= gaussians[0].d_max + 1e-12);
        }
    }

    #[test]
    fn affine_invariance_of_distances() {
        let mut rng = Pcg64Mcg::seed_from_u64(72);
        let dim = 3;
        let samples: Vec<Vec<f64>> = (0..50)
            .map(|_| (0..dim).map(|_| rng.random::<f64>() * 2.0).collect())
            .collect();
        let t = vec![1.0, 0.3, 0.0, 0.0, 2.0, 0.5, 0.2, 0.0, 1.5]; // invertible
        let apply = |v: &[f64]| -> Vec<f64> {
            (0..dim)
                .map(|i| (0..dim).map(|j| t[i * dim + j] * v[j]).sum())
                .collect()
        };
        let descs: Vec<GlobalDescriptor> = samples.iter().map(|s| descriptor(1, dim, s.clone())).collect();
        let descs_t: Vec<GlobalDescriptor> = samples.iter().map(|s| descriptor(1, dim, apply(s))).collect();
        // Invariance is a property of the Mahalanobis form itself, so the
        // scale-relative regularization is turned off (floor stays).
        let g = fit_gaussians_regularized(&descs, 0.0).unwrap();
        let gt = fit_gaussians_regularized(&descs_t, 0.0).unwrap();
        let probe: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() * 2.0).collect();
        let s1 = mahalanobis_score(&descriptor(1, dim, probe.clone()), &g).unwrap();
        let s2 = mahalanobis_score(&descriptor(1, dim, apply(&probe)), &gt).unwrap();
        assert!((s1 - s2).abs() <= 1e-6 * s1.max(1.0), "{s1} vs {s2}");
    }

    #[test]
    fn global_model_json_round_trip() {
        let model = GlobalModel {
            k: 1,
            dim: 2,
            backend_id: "stub".into(),
            gaussians: vec![ClassGaussian {
                mu: vec![0.5, 0.25],
                sigma: vec![1.0, 0.0, 0.0, 1.0],
                sigma_inv: vec![1.0, 0.0, 0.0, 1.0],
                d_max: 1.75,
                n_support: 12,
            }],
        };
        let dir = std::env::temp_dir().join("salad_global_model");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.gauss");
        model.save(&path).unwrap();
        let loaded = GlobalModel::load(&path).unwrap();
        assert_eq!(loaded.gaussians[0].mu, model.gaussians[0].mu);
        assert_eq!(loaded.gaussians[0].d_max, model.gaussians[0].d_max);
    }
}
