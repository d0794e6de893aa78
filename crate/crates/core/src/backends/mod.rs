//! Pluggable perception backends: dense feature extraction and
//! class-agnostic mask proposal.
//!
//! Two first-class implementations ship with the pipeline: deterministic
//! stub backends computed from local color statistics (no external assets),
//! and precomputed adapters that read per-image feature maps / mask stacks
//! dumped by real pretrained backbones. A missing asset is always an
//! explicit error, never a silent fallback.

pub mod precomputed;
pub mod stub;

use crate::compmap::mask_iou;
use crate::dataset::ImageSample;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Dense per-pixel features, pixel-major `[y][x][d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
    pub source_resolution: (usize, usize),
    pub backend_id: String,
}

impl FeatureMap {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f32>,
        source_resolution: (usize, usize),
        backend_id: impl Into<String>,
    ) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Shape("feature map dims must be positive".into()));
        }
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "feature data length {} for {height}x{width}x{channels}",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("non-finite feature values".into()));
        }
        Ok(FeatureMap {
            height,
            width,
            channels,
            data,
            source_resolution,
            backend_id: backend_id.into(),
        })
    }

    #[inline]
    pub fn vector(&self, y: usize, x: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// Bilinear resize of the per-pixel feature vectors.
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> FeatureMap {
        if out_h == self.height && out_w == self.width {
            return self.clone();
        }
        let d = self.channels;
        let mut data = vec![0.0f32; out_h * out_w * d];
        let sy = self.height as f32 / out_h as f32;
        let sx = self.width as f32 / out_w as f32;
        for oy in 0..out_h {
            let fy = ((oy as f32 + 0.5) * sy - 0.5).clamp(0.0, self.height as f32 - 1.0);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = fy - y0 as f32;
            for ox in 0..out_w {
                let fx = ((ox as f32 + 0.5) * sx - 0.5).clamp(0.0, self.width as f32 - 1.0);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = fx - x0 as f32;
                let out = &mut data[(oy * out_w + ox) * d..(oy * out_w + ox + 1) * d];
                let v00 = self.vector(y0, x0);
                let v01 = self.vector(y0, x1);
                let v10 = self.vector(y1, x0);
                let v11 = self.vector(y1, x1);
                for c in 0..d {
                    let top = v00[c] * (1.0 - wx) + v01[c] * wx;
                    let bot = v10[c] * (1.0 - wx) + v11[c] * wx;
                    out[c] = top * (1.0 - wy) + bot * wy;
                }
            }
        }
        FeatureMap {
            height: out_h,
            width: out_w,
            channels: d,
            data,
            source_resolution: self.source_resolution,
            backend_id: self.backend_id.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskOrigin {
    GridPoint,
    CornerQuery,
}

/// One class-agnostic region proposal.
#[derive(Debug, Clone)]
pub struct MaskProposal {
    pub height: usize,
    pub width: usize,
    pub mask: Vec<bool>,
    pub quality: f64,
    pub origin: MaskOrigin,
}

impl MaskProposal {
    pub fn new(height: usize, width: usize, mask: Vec<bool>, quality: f64, origin: MaskOrigin) -> Result<Self> {
        if mask.len() != height * width {
            return Err(Error::Shape("mask proposal size mismatch".into()));
        }
        if !mask.iter().any(|v| *v) {
            return Err(Error::Shape("mask proposal is empty".into()));
        }
        if !quality.is_finite() {
            return Err(Error::Numeric("mask proposal quality not finite".into()));
        }
        Ok(MaskProposal {
            height,
            width,
            mask,
            quality,
            origin,
        })
    }

    pub fn area(&self) -> usize {
        self.mask.iter().filter(|v| **v).count()
    }
}

/// Drop any proposal with IoU > 0.9 against a higher-quality kept proposal.
/// Ties in quality keep the earlier proposal.
pub fn dedup_proposals(mut proposals: Vec<MaskProposal>) -> Vec<MaskProposal> {
    let mut order: Vec<usize> = (0..proposals.len()).collect();
    order.sort_by(|&a, &b| {
        proposals[b]
            .quality
            .partial_cmp(&proposals[a].quality)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<MaskProposal> = Vec::new();
    for idx in order {
        let cand = &proposals[idx];
        let dup = kept.iter().any(|k| mask_iou(&k.mask, &cand.mask) > 0.9);
        if !dup {
            kept.push(std::mem::replace(
                &mut proposals[idx],
                MaskProposal {
                    height: 0,
                    width: 0,
                    mask: Vec::new(),
                    quality: 0.0,
                    origin: MaskOrigin::GridPoint,
                },
            ));
        }
    }
    kept
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BackendSpec {
    pub id: String,
    #[serde(default)]
    pub params: BTreeMap<String, String>,
}

impl BackendSpec {
    pub fn stub() -> Self {
        BackendSpec {
            id: "stub".into(),
            params: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BackendConfig {
    pub feature_backend: BackendSpec,
    pub mask_backend: BackendSpec,
    pub seed: u64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            feature_backend: BackendSpec::stub(),
            mask_backend: BackendSpec::stub(),
            seed: 0,
        }
    }
}

pub trait FeatureBackend: Send + Sync {
    fn id(&self) -> &str;
    fn extract(&self, image: &ImageSample) -> Result<FeatureMap>;
}

pub trait MaskBackend: Send + Sync {
    fn id(&self) -> &str;
    fn propose_grid(&self, image: &ImageSample, grid_n: usize) -> Result<Vec<MaskProposal>>;
    fn query_points(&self, image: &ImageSample, points: &[(usize, usize)]) -> Result<MaskProposal>;
}

/// Instantiate the feature backend named in the config.
pub fn create_feature_backend(config: &BackendConfig) -> Result<Box<dyn FeatureBackend>> {
    let spec = &config.feature_backend;
    match spec.id.as_str() {
        "stub" => Ok(Box::new(stub::StubFeatureBackend::new(config.seed))),
        "precomputed" => Ok(Box::new(precomputed::PrecomputedFeatureBackend::from_params(&spec.params)?)),
        other => Err(Error::UnknownBackend(other.to_string())),
    }
}

/// Instantiate the mask backend named in the config.
pub fn create_mask_backend(config: &BackendConfig) -> Result<Box<dyn MaskBackend>> {
    let spec = &config.mask_backend;
    match spec.id.as_str() {
        "stub" => Ok(Box::new(stub::StubMaskBackend::new())),
        "precomputed" => Ok(Box::new(precomputed::PrecomputedMaskBackend::from_params(&spec.params)?)),
        other => Err(Error::UnknownBackend(other.to_string())),
    }
}

/// Extract dense features for one image with the configured backend.
pub fn extract_features(image: &ImageSample, config: &BackendConfig) -> Result<FeatureMap> {
    create_feature_backend(config)?.extract(image)
}

/// Grid-prompted mask proposals, deduplicated.
pub fn propose_masks_grid(image: &ImageSample, grid_n: usize, config: &BackendConfig) -> Result<Vec<MaskProposal>> {
    if grid_n < 1 {
        return Err(Error::InvalidArgument {
            arg: "grid_n",
            reason: "must be at least 1".into(),
        });
    }
    create_mask_backend(config)?.propose_grid(image, grid_n)
}

/// Union of the region masks at the given pixel coordinates.
pub fn query_mask_at_points(
    image: &ImageSample,
    points: &[(usize, usize)],
    config: &BackendConfig,
) -> Result<MaskProposal> {
    if points.is_empty() {
        return Err(Error::InvalidArgument {
            arg: "points",
            reason: "point list is empty".into(),
        });
    }
    let (h, w) = (image.pixels.height, image.pixels.width);
    for &(x, y) in points {
        if x >= w || y >= h {
            return Err(Error::InvalidArgument {
                arg: "points",
                reason: format!("point ({x}, {y}) outside {w}x{h} frame"),
            });
        }
    }
    create_mask_backend(config)?.query_points(image, points)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn proposal(mask: Vec<bool>, quality: f64) -> MaskProposal {
        MaskProposal::new(2, 2, mask, quality, MaskOrigin::GridPoint).unwrap()
    }

    #[test]
    fn identical_proposals_deduplicate_to_one() {
        let a = proposal(vec![true, true, false, false], 0.5);
        let b = proposal(vec![true, true, false, false], 0.4);
        let kept = dedup_proposals(vec![a, b]);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].quality, 0.5);
    }

    #[test]
    fn disjoint_proposals_survive() {
        let a = proposal(vec![true, false, false, false], 0.5);
        let b = proposal(vec![false, false, false, true], 0.9);
        let kept = dedup_proposals(vec![a, b]);
        assert_eq!(kept.len(), 2);
        // Higher quality first.
        assert_eq!(kept[0].quality, 0.9);
    }

    #[test]
    fn empty_proposal_rejected() {
        assert!(MaskProposal::new(2, 2, vec![false; 4], 1.0, MaskOrigin::GridPoint).is_err());
    }

    #[test]
    fn unknown_backend_id_is_a_config_error() {
        let mut config = BackendConfig::default();
        config.feature_backend.id = "resnet".into();
        let img = ImageSample::from_image(
            crate::imaging::ImageRgb::filled(8, 8, [0.5; 3]),
            crate::dataset::Split::Train,
            crate::dataset::SampleLabel::Good,
        );
        assert!(matches!(
            extract_features(&img, &config),
            Err(Error::UnknownBackend(_))
        ));
    }
}
