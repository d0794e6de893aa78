//! Unsupervised composition-map generation.
//!
//! Per training image: corner queries estimate the background, features
//! inside the foreground are clustered into K part classes to make a rough
//! map, and mask proposals are classified by their majority cluster to form
//! the pseudo-label. A segmentation network distilled from the pseudo-labels
//! (see [`crate::segmenter`]) predicts the final composition maps.

use crate::backends::{
    extract_features, query_mask_at_points, BackendConfig, FeatureMap, MaskProposal,
};
use crate::cluster::{kmeans_fit, ClusterModel};
use crate::compmap::CompositionMap;
use crate::dataset::ImageSample;
use crate::error::{Error, Result};
use rand::prelude::*;
use rand_pcg::Pcg64Mcg;

/// Uniform subsampling bound for cluster fitting.
pub const DEFAULT_MAX_CLUSTER_SAMPLES: usize = 100_000;

/// Complement of the corner-query background estimate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForegroundMask {
    pub height: usize,
    pub width: usize,
    pub mask: Vec<bool>,
}

impl ForegroundMask {
    pub fn foreground_area(&self) -> usize {
        self.mask.iter().filter(|v| **v).count()
    }
}

/// Background = union of corner-point region masks; foreground = complement.
///
/// A full-frame background produces an empty foreground with a warning; the
/// image is then treated as all-background downstream.
pub fn compute_foreground_mask(image: &ImageSample, config: &BackendConfig) -> Result<ForegroundMask> {
    let (h, w) = (image.pixels.height, image.pixels.width);
    let corners = [(0, 0), (w - 1, 0), (0, h - 1), (w - 1, h - 1)];
    let background = query_mask_at_points(image, &corners, config)?;
    let mask: Vec<bool> = background.mask.iter().map(|v| !v).collect();
    let fg = ForegroundMask { height: h, width: w, mask };
    if fg.foreground_area() == 0 {
        eprintln!(
            "warning: empty foreground for {} (corner queries covered the whole frame)",
            image.source_path.display()
        );
    }
    Ok(fg)
}

/// Seeded per-image pixel selection for cluster fitting: background pixels
/// are excluded and at most `max_samples` foreground pixels are drawn
/// uniformly across images (proportional per-image quotas).
pub fn plan_cluster_samples(fg_masks: &[ForegroundMask], seed: u64, max_samples: usize) -> Vec<Vec<usize>> {
    let counts: Vec<usize> = fg_masks.iter().map(|m| m.foreground_area()).collect();
    let total: usize = counts.iter().sum();
    let mut rng = Pcg64Mcg::seed_from_u64(seed ^ 0x0c1a_57e2_u64);
    let mut plan = Vec::with_capacity(fg_masks.len());
    for (img_idx, fg) in fg_masks.iter().enumerate() {
        if counts[img_idx] == 0 {
            plan.push(Vec::new());
            continue;
        }
        let quota = if total <= max_samples {
            counts[img_idx]
        } else {
            ((max_samples as f64 * counts[img_idx] as f64 / total as f64).round() as usize).max(1)
        };
        let fg_indices: Vec<usize> = fg
            .mask
            .iter()
            .enumerate()
            .filter_map(|(p, &m)| m.then_some(p))
            .collect();
        let chosen: Vec<usize> = if quota >= fg_indices.len() {
            fg_indices
        } else {
            let mut idx = fg_indices;
            // Partial Fisher-Yates: the first `quota` entries are a uniform draw.
            for i in 0..quota {
                let j = rng.random_range(i..idx.len());
                idx.swap(i, j);
            }
            idx.truncate(quota);
            idx.sort_unstable();
            idx
        };
        plan.push(chosen);
    }
    plan
}

/// Gather the planned foreground feature vectors of one image into `points`.
pub fn gather_planned_points(features: &FeatureMap, fg: &ForegroundMask, chosen: &[usize], points: &mut Vec<f32>) {
    let aligned = features.resize_bilinear(fg.height, fg.width);
    for &p in chosen {
        points.extend_from_slice(aligned.vector(p / fg.width, p % fg.width));
    }
}

/// Fit the K-cluster feature model on foreground vectors across the corpus.
///
/// Background vectors never enter the fit. At most `max_samples` foreground
/// vectors participate, drawn uniformly across images with a seeded choice.
pub fn fit_cluster_model(
    train_features: &[FeatureMap],
    fg_masks: &[ForegroundMask],
    k: usize,
    seed: u64,
    max_samples: usize,
) -> Result<ClusterModel> {
    if train_features.len() != fg_masks.len() || train_features.is_empty() {
        return Err(Error::InvalidArgument {
            arg: "train_features",
            reason: "need matching, non-empty feature and foreground lists".into(),
        });
    }
    let dim = train_features[0].channels;
    let backend_id = train_features[0].backend_id.clone();

    let total: usize = fg_masks.iter().map(|m| m.foreground_area()).sum();
    if total < k {
        return Err(Error::Dataset(format!(
            "{total} foreground vectors across the corpus; reduce K below {k}"
        )));
    }

    let plan = plan_cluster_samples(fg_masks, seed, max_samples);
    let mut points: Vec<f32> = Vec::new();
    for ((features, fg), chosen) in train_features.iter().zip(fg_masks).zip(&plan) {
        gather_planned_points(features, fg, chosen, &mut points);
    }
    kmeans_fit(&points, dim, k, seed, 100, &backend_id)
}

/// Rough composition map from nearest-centroid assignment.
///
/// Features are resized to the foreground resolution first; background
/// pixels map to class 0, foreground pixels to `1 + nearest centroid`.
pub fn assign_feature_clusters(
    features: &FeatureMap,
    fg: &ForegroundMask,
    model: &ClusterModel,
) -> Result<CompositionMap> {
    if features.channels != model.dim {
        return Err(Error::Shape(format!(
            "feature dim {} does not match centroid dim {}",
            features.channels, model.dim
        )));
    }
    if features.backend_id != model.feature_backend_id {
        return Err(Error::Config(format!(
            "feature backend {} does not match cluster model backend {}",
            features.backend_id, model.feature_backend_id
        )));
    }
    let aligned = features.resize_bilinear(fg.height, fg.width);
    let mut classes = vec![0u16; fg.height * fg.width];
    for (p, &is_fg) in fg.mask.iter().enumerate() {
        if is_fg {
            let v = aligned.vector(p / fg.width, p % fg.width);
            classes[p] = (1 + model.assign(v)) as u16;
        }
    }
    CompositionMap::new(fg.height, fg.width, classes, model.k + 1)
}

/// Classify mask proposals by their majority cluster to build the
/// pseudo-label.
///
/// Proposals paint in descending area order so finer masks overwrite
/// coarser ones; a proposal with a strict background majority paints
/// background; uncovered pixels keep their rough-map class.
pub fn classify_mask_proposals(c_feat: &CompositionMap, proposals: &[MaskProposal]) -> Result<CompositionMap> {
    let mut out = c_feat.clone();
    let mut order: Vec<(usize, usize)> =
        proposals.iter().enumerate().map(|(i, p)| (i, p.area())).collect();
    order.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    for (idx, _area) in order {
        let proposal = &proposals[idx];
        if proposal.mask.len() != c_feat.len() {
            return Err(Error::Shape("proposal size does not match composition map".into()));
        }
        let mut hist = vec![0usize; c_feat.num_classes];
        let mut covered = 0usize;
        for (p, &m) in proposal.mask.iter().enumerate() {
            if m {
                hist[c_feat.classes[p] as usize] += 1;
                covered += 1;
            }
        }
        let class = if hist[0] * 2 > covered {
            0u16
        } else {
            // Majority part class, ties to the lower index.
            let mut best = 1usize;
            for c in 2..c_feat.num_classes {
                if hist[c] > hist[best] {
                    best = c;
                }
            }
            best as u16
        };
        for (p, &m) in proposal.mask.iter().enumerate() {
            if m {
                out.classes[p] = class;
            }
        }
    }
    Ok(out)
}

/// Full pseudo-label for one image: foreground, rough map, classified
/// proposals.
pub fn generate_pseudo_label(
    image: &ImageSample,
    config: &BackendConfig,
    model: &ClusterModel,
    grid_n: usize,
) -> Result<CompositionMap> {
    let fg = compute_foreground_mask(image, config)?;
    let features = extract_features(image, config)?;
    let c_feat = assign_feature_clusters(&features, &fg, model)?;
    let proposals = crate::backends::propose_masks_grid(image, grid_n, config)?;
    classify_mask_proposals(&c_feat, &proposals)
}
