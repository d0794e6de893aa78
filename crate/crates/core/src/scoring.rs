//! Branch score extraction, validation calibration, z-score fusion, the
//! combined localization map, and the evaluation metrics (image AUROC and
//! AUsPRO).

use crate::compmap::{AnomalyMap, ValueRange};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

pub const SIGMA_FLOOR: f64 = 1e-8;
pub const DEFAULT_FPR_LIMIT: f64 = 0.05;
pub const MAX_SPRO_THRESHOLDS: usize = 5_000;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct BranchStats {
    pub mu: f64,
    pub sigma: f64,
}

/// Min/max of the validation anomaly maps, for localization normalization.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LocExtrema {
    pub a_min: f64,
    pub a_max: f64,
    pub c_min: f64,
    pub c_max: f64,
}

/// Validation statistics for the three branches.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ScoreStats {
    pub appearance: BranchStats,
    pub composition: BranchStats,
    pub global: BranchStats,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loc: Option<LocExtrema>,
    /// Hash of the validation manifest these statistics came from.
    #[serde(default)]
    pub source: String,
    /// Standard deviation convention, recorded for reproducibility.
    pub std_convention: String,
}

/// Per-image fused scores.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FusionResult {
    pub as_a: f64,
    pub as_c: f64,
    pub as_g: f64,
    pub z_a: f64,
    pub z_c: f64,
    pub z_g: f64,
    pub total: f64,
}

/// Raw branch scores: maxima of the two maps plus the global score.
pub fn branch_scores(a_a: &AnomalyMap, a_c: &AnomalyMap, s_g: f64) -> Result<(f64, f64, f64)> {
    if a_a.scores.is_empty() || a_c.scores.is_empty() {
        return Err(Error::InvalidArgument {
            arg: "anomaly_map",
            reason: "empty map has no maximum".into(),
        });
    }
    if !s_g.is_finite() {
        return Err(Error::Numeric("global score not finite".into()));
    }
    Ok((a_a.max(), a_c.max(), s_g))
}

fn moments(values: &[f64]) -> BranchStats {
    let n = values.len() as f64;
    let mu = values.iter().sum::<f64>() / n;
    // Population convention (N divisor).
    let var = values.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    let sigma = var.sqrt();
    if sigma < SIGMA_FLOOR {
        eprintln!("warning: validation score spread below floor; sigma clamped to {SIGMA_FLOOR}");
    }
    BranchStats {
        mu,
        sigma: sigma.max(SIGMA_FLOOR),
    }
}

/// Per-branch mean and population standard deviation over the validation
/// scores, sigma floored at 1e-8.
pub fn calibrate(validation_scores: &[(f64, f64, f64)]) -> Result<ScoreStats> {
    if validation_scores.len() < 2 {
        return Err(Error::Dataset(format!(
            "calibration needs at least 2 validation samples, got {}",
            validation_scores.len()
        )));
    }
    let a: Vec<f64> = validation_scores.iter().map(|s| s.0).collect();
    let c: Vec<f64> = validation_scores.iter().map(|s| s.1).collect();
    let g: Vec<f64> = validation_scores.iter().map(|s| s.2).collect();
    Ok(ScoreStats {
        appearance: moments(&a),
        composition: moments(&c),
        global: moments(&g),
        loc: None,
        source: String::new(),
        std_convention: "population".into(),
    })
}

/// Pool per-pixel extrema of the validation maps for the combined
/// localization map.
pub fn localization_extrema(a_maps: &[AnomalyMap], c_maps: &[AnomalyMap]) -> Result<LocExtrema> {
    let pool = |maps: &[AnomalyMap]| -> Result<(f64, f64)> {
        if maps.is_empty() {
            return Err(Error::Dataset("no validation maps for localization extrema".into()));
        }
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for m in maps {
            for &v in &m.scores {
                lo = lo.min(v as f64);
                hi = hi.max(v as f64);
            }
        }
        Ok((lo, hi))
    };
    let (a_min, a_max) = pool(a_maps)?;
    let (c_min, c_max) = pool(c_maps)?;
    Ok(LocExtrema {
        a_min,
        a_max,
        c_min,
        c_max,
    })
}

/// Final anomaly score: sum of per-branch z-scores.
pub fn fuse(scores: (f64, f64, f64), stats: &ScoreStats) -> FusionResult {
    let (as_a, as_c, as_g) = scores;
    let z_a = (as_a - stats.appearance.mu) / stats.appearance.sigma;
    let z_c = (as_c - stats.composition.mu) / stats.composition.sigma;
    let z_g = (as_g - stats.global.mu) / stats.global.sigma;
    FusionResult {
        as_a,
        as_c,
        as_g,
        z_a,
        z_c,
        z_g,
        total: z_a + z_c + z_g,
    }
}

/// Pixelwise sum of the two maps after min-max normalization with the
/// validation extrema.
pub fn combined_localization_map(a_a: &AnomalyMap, a_c: &AnomalyMap, loc: &LocExtrema) -> Result<AnomalyMap> {
    if a_a.height != a_c.height || a_a.width != a_c.width {
        return Err(Error::Shape("localization maps differ in shape".into()));
    }
    let a_range = (a_a_range(loc)).max(SIGMA_FLOOR);
    let c_range = (loc.c_max - loc.c_min).max(SIGMA_FLOOR);
    let scores: Vec<f32> = a_a
        .scores
        .iter()
        .zip(&a_c.scores)
        .map(|(&a, &c)| {
            let na = (a as f64 - loc.a_min) / a_range;
            let nc = (c as f64 - loc.c_min) / c_range;
            (na + nc) as f32
        })
        .collect();
    AnomalyMap::new(a_a.height, a_a.width, scores, ValueRange::Unbounded)
}

fn a_a_range(loc: &LocExtrema) -> f64 {
    loc.a_max - loc.a_min
}

/// Image-level AUROC via midrank Mann-Whitney. Requires both classes.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape("scores and labels length mismatch".into()));
    }
    let n_pos = labels.iter().filter(|l| **l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidArgument {
            arg: "labels",
            reason: "AUROC needs both positive and negative samples".into(),
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("non-finite score in AUROC input".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0usize;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Midrank over the tie group [i, j], 1-based ranks.
        let midrank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let auc = (rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos as f64 * n_neg as f64);
    Ok(auc)
}

/// One annotated defect region with its saturation area in pixels.
#[derive(Debug, Clone)]
pub struct GtRegion {
    pub mask: Vec<bool>,
    pub saturation_area: f64,
}

/// Saturated per-region overlap integrated over the false-positive rate.
///
/// For each threshold, sPRO of a region is `min(1, overlap / saturation)`;
/// the curve of mean sPRO against the false-positive rate on good pixels is
/// integrated over `[0, fpr_limit]` and normalized by the limit. Thresholds
/// sweep the sorted distinct score set, subsampled to `max_thresholds`.
pub fn auspro(
    maps: &[AnomalyMap],
    regions_per_image: &[Vec<GtRegion>],
    fpr_limit: f64,
    max_thresholds: usize,
) -> Result<f64> {
    if maps.len() != regions_per_image.len() {
        return Err(Error::Shape("one region list per map required".into()));
    }
    if !(fpr_limit > 0.0 && fpr_limit <= 1.0) {
        return Err(Error::InvalidArgument {
            arg: "fpr_limit",
            reason: format!("must be in (0, 1], got {fpr_limit}"),
        });
    }
    let n_regions: usize = regions_per_image.iter().map(|r| r.len()).sum();
    if n_regions == 0 {
        return Err(Error::Dataset("no anomalous regions to evaluate".into()));
    }
    for regions in regions_per_image {
        for r in regions {
            if r.saturation_area <= 0.0 || r.saturation_area.is_nan() {
                return Err(Error::Dataset("region with non-positive saturation area".into()));
            }
        }
    }

    // Sorted (descending) score arrays: per region, and pooled good pixels.
    let mut region_scores: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n_regions);
    let mut good_scores: Vec<f64> = Vec::new();
    let mut all_scores: Vec<f64> = Vec::new();
    for (map, regions) in maps.iter().zip(regions_per_image) {
        let hw = map.scores.len();
        let mut in_any = vec![false; hw];
        for r in regions {
            if r.mask.len() != hw {
                return Err(Error::Shape("region mask does not match map size".into()));
            }
            let scores: Vec<f64> = r
                .mask
                .iter()
                .enumerate()
                .filter(|(_, &m)| m)
                .map(|(p, _)| map.scores[p] as f64)
                .collect();
            for (p, &m) in r.mask.iter().enumerate() {
                if m {
                    in_any[p] = true;
                }
            }
            region_scores.push((sorted_desc(scores), r.saturation_area));
        }
        for (p, &m) in in_any.iter().enumerate() {
            if !m {
                good_scores.push(map.scores[p] as f64);
            }
        }
        all_scores.extend(map.scores.iter().map(|&v| v as f64));
    }
    if good_scores.is_empty() {
        return Err(Error::Dataset("no good pixels to measure the false-positive rate".into()));
    }
    let good_sorted = sorted_desc(good_scores);
    let n_good = good_sorted.len() as f64;

    // Distinct thresholds, descending, subsampled evenly.
    let mut distinct = sorted_desc(all_scores);
    distinct.dedup();
    let thresholds: Vec<f64> = if distinct.len() <= max_thresholds {
        distinct
    } else {
        let step = distinct.len() as f64 / max_thresholds as f64;
        (0..max_thresholds)
            .map(|i| distinct[(i as f64 * step) as usize])
            .collect()
    };

    // Curve from (fpr 0, spro 0) downward through the thresholds.
    let mut points: Vec<(f64, f64)> = vec![(0.0, 0.0)];
    for &t in &thresholds {
        let fp = count_ge(&good_sorted, t) as f64;
        let fpr = fp / n_good;
        let mut spro_sum = 0.0f64;
        for (scores, saturation) in &region_scores {
            let overlap = count_ge(scores, t) as f64;
            spro_sum += (overlap / saturation).min(1.0);
        }
        points.push((fpr, spro_sum / n_regions as f64));
    }
    if points.last().map(|p| p.0 < 1.0).unwrap_or(true) {
        // Thresholding below the minimum marks everything positive.
        let mut spro_sum = 0.0f64;
        for (scores, saturation) in &region_scores {
            spro_sum += (scores.len() as f64 / saturation).min(1.0);
        }
        points.push((1.0, spro_sum / n_regions as f64));
    }

    Ok(integrate_to_limit(&points, fpr_limit) / fpr_limit)
}

fn sorted_desc(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(|a, b| b.partial_cmp(a).unwrap());
    v
}

/// Count of entries >= t in a descending-sorted array.
fn count_ge(sorted: &[f64], t: f64) -> usize {
    sorted.partition_point(|&v| v >= t)
}

/// Step integral of the operating-point curve up to `limit` on the x axis.
///
/// The curve holds each operating point's value until the next point is
/// reached (no interpolated credit between operating points), so a constant
/// prediction integrates to exactly zero.
fn integrate_to_limit(points: &[(f64, f64)], limit: f64) -> f64 {
    let mut area = 0.0f64;
    for w in points.windows(2) {
        let (x0, y0) = w[0];
        let (x1, _y1) = w[1];
        if x1 <= x0 {
            continue;
        }
        if x0 >= limit {
            break;
        }
        area += (x1.min(limit) - x0) * y0;
        if x1 >= limit {
            break;
        }
    }
    area
}
