//! Deterministic stub backends computed from local color statistics.
//!
//! The feature stub emits, per pixel: 3x3-blurred RGB, gradient magnitude,
//! normalized position and two fixed random texture responses. Blurred color
//! dominates the vector scale so that visually distinct parts stay linearly
//! separable under clustering, while the texture channels respond to local
//! patterns a small learned student cannot extrapolate.
//!
//! The mask stub labels connected regions of locally uniform color; a grid
//! or point query returns the region containing the query pixel.

use super::{FeatureBackend, FeatureMap, MaskBackend, MaskOrigin, MaskProposal};
use crate::dataset::ImageSample;
use crate::error::{Error, Result};
use crate::imaging::{box_blur3, gradient_magnitude, ImageRgb};
use rand::prelude::*;
use rand_pcg::Pcg64Mcg;

pub const STUB_FEATURE_CHANNELS: usize = 8;
const GRAD_WEIGHT: f32 = 0.25;
const POS_WEIGHT: f32 = 0.05;
const TEX_WEIGHT: f32 = 0.15;
const TEX_KERNEL: usize = 9;
/// Max RGB distance between 4-neighbors considered "locally uniform".
const REGION_TOL: f32 = 0.08;

pub struct StubFeatureBackend {
    seed: u64,
    tex_filters: Vec<Vec<f32>>,
}

impl StubFeatureBackend {
    pub fn new(seed: u64) -> Self {
        let mut rng = Pcg64Mcg::seed_from_u64(seed ^ 0x0005_a1ad_fea7);
        let scale = 1.0 / (TEX_KERNEL as f32);
        let tex_filters = (0..2)
            .map(|_| {
                (0..TEX_KERNEL * TEX_KERNEL)
                    .map(|_| (rng.random::<f32>() * 2.0 - 1.0) * scale)
                    .collect()
            })
            .collect();
        StubFeatureBackend { seed, tex_filters }
    }
}

impl FeatureBackend for StubFeatureBackend {
    fn id(&self) -> &str {
        "stub"
    }

    fn extract(&self, image: &ImageSample) -> Result<FeatureMap> {
        let img = &image.pixels;
        let (h, w) = (img.height, img.width);
        let blurred = box_blur3(img);
        let grad = gradient_magnitude(img);
        let gray = img.to_gray();
        let half = (TEX_KERNEL / 2) as i64;

        let mut data = vec![0.0f32; h * w * STUB_FEATURE_CHANNELS];
        for y in 0..h {
            for x in 0..w {
                let out = &mut data
                    [(y * w + x) * STUB_FEATURE_CHANNELS..(y * w + x + 1) * STUB_FEATURE_CHANNELS];
                let rgb = blurred.get(y, x);
                out[0] = rgb[0];
                out[1] = rgb[1];
                out[2] = rgb[2];
                out[3] = grad[y * w + x] * GRAD_WEIGHT;
                out[4] = (x as f32 / w.max(1) as f32) * POS_WEIGHT;
                out[5] = (y as f32 / h.max(1) as f32) * POS_WEIGHT;
                for (f, filter) in self.tex_filters.iter().enumerate() {
                    let mut acc = 0.0f32;
                    for ky in 0..TEX_KERNEL {
                        let sy = (y as i64 + ky as i64 - half).clamp(0, h as i64 - 1) as usize;
                        for kx in 0..TEX_KERNEL {
                            let sx = (x as i64 + kx as i64 - half).clamp(0, w as i64 - 1) as usize;
                            acc += filter[ky * TEX_KERNEL + kx] * gray[sy * w + sx];
                        }
                    }
                    out[6 + f] = acc.tanh() * TEX_WEIGHT;
                }
            }
        }
        let mut fm = FeatureMap::new(h, w, STUB_FEATURE_CHANNELS, data, (h, w), "stub")?;
        fm.backend_id = format!("stub:{}", self.seed);
        Ok(fm)
    }
}

/// Connected-component labeling of locally uniform color: 4-neighbors join
/// one region when their RGB distance is at most [`REGION_TOL`].
pub fn uniform_color_regions(img: &ImageRgb) -> (Vec<u32>, usize) {
    let (h, w) = (img.height, img.width);
    let mut labels = vec![u32::MAX; h * w];
    let mut next = 0u32;
    let mut stack: Vec<usize> = Vec::new();
    for start in 0..h * w {
        if labels[start] != u32::MAX {
            continue;
        }
        labels[start] = next;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (py, px) = (p / w, p % w);
            let pc = img.get(py, px);
            let mut visit = |q: usize| {
                if labels[q] != u32::MAX {
                    return;
                }
                let (qy, qx) = (q / w, q % w);
                let qc = img.get(qy, qx);
                let d2 = (pc[0] - qc[0]).powi(2) + (pc[1] - qc[1]).powi(2) + (pc[2] - qc[2]).powi(2);
                if d2 <= REGION_TOL * REGION_TOL {
                    labels[q] = next;
                    stack.push(q);
                }
            };
            if px > 0 {
                visit(p - 1);
            }
            if px + 1 < w {
                visit(p + 1);
            }
            if py > 0 {
                visit(p - w);
            }
            if py + 1 < h {
                visit(p + w);
            }
        }
        next += 1;
    }
    (labels, next as usize)
}

pub struct StubMaskBackend;

impl StubMaskBackend {
    pub fn new() -> Self {
        StubMaskBackend
    }
}

impl Default for StubMaskBackend {
    fn default() -> Self {
        Self::new()
    }
}

fn region_proposal(
    img: &ImageRgb,
    labels: &[u32],
    label: u32,
    origin: MaskOrigin,
) -> Result<MaskProposal> {
    let (h, w) = (img.height, img.width);
    let mask: Vec<bool> = labels.iter().map(|&l| l == label).collect();
    // Quality: color uniformity of the region.
    let mut mean = [0.0f64; 3];
    let mut count = 0.0f64;
    for (p, &m) in mask.iter().enumerate() {
        if m {
            let rgb = img.get(p / w, p % w);
            for c in 0..3 {
                mean[c] += rgb[c] as f64;
            }
            count += 1.0;
        }
    }
    for c in &mut mean {
        *c /= count.max(1.0);
    }
    let mut var = 0.0f64;
    for (p, &m) in mask.iter().enumerate() {
        if m {
            let rgb = img.get(p / w, p % w);
            for c in 0..3 {
                var += (rgb[c] as f64 - mean[c]).powi(2);
            }
        }
    }
    var /= count.max(1.0);
    MaskProposal::new(h, w, mask, 1.0 / (1.0 + 100.0 * var), origin)
}

impl MaskBackend for StubMaskBackend {
    fn id(&self) -> &str {
        "stub"
    }

    fn propose_grid(&self, image: &ImageSample, grid_n: usize) -> Result<Vec<MaskProposal>> {
        let img = &image.pixels;
        let (h, w) = (img.height, img.width);
        let (labels, _) = uniform_color_regions(img);
        let mut seen: Vec<u32> = Vec::new();
        let mut proposals = Vec::new();
        for gy in 0..grid_n {
            let y = ((gy as f64 + 0.5) * h as f64 / grid_n as f64).floor() as usize;
            for gx in 0..grid_n {
                let x = ((gx as f64 + 0.5) * w as f64 / grid_n as f64).floor() as usize;
                let label = labels[y.min(h - 1) * w + x.min(w - 1)];
                if seen.contains(&label) {
                    continue;
                }
                seen.push(label);
                proposals.push(region_proposal(img, &labels, label, MaskOrigin::GridPoint)?);
            }
        }
        Ok(super::dedup_proposals(proposals))
    }

    fn query_points(&self, image: &ImageSample, points: &[(usize, usize)]) -> Result<MaskProposal> {
        let img = &image.pixels;
        let (h, w) = (img.height, img.width);
        let (labels, _) = uniform_color_regions(img);
        let mut union = vec![false; h * w];
        for &(x, y) in points {
            let label = labels[y * w + x];
            for (p, &l) in labels.iter().enumerate() {
                if l == label {
                    union[p] = true;
                }
            }
        }
        MaskProposal::new(h, w, union, 1.0, MaskOrigin::CornerQuery)
            .map_err(|_| Error::Dataset("corner query produced an empty mask".into()))
    }
}
