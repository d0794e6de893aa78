//! Procedural toy dataset in the same directory convention as the real
//! benchmark: parts with known shapes, colors and nominal positions, plus
//! logical anomalies (missing / extra / misplaced part) and structural
//! anomalies (noise patches), with region ground truth, saturation config
//! and constructed composition maps.

use crate::compmap::{save_composition_map, save_mask, CompositionMap};
use crate::dataset::{load_dataset_index, DatasetIndex, DatasetLayout, DefectConfig};
use crate::error::{Error, Result};
use crate::imaging::ImageRgb;
use rand::prelude::*;
use rand_pcg::Pcg64Mcg;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyShape {
    Circle,
    Square,
    Triangle,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyPart {
    pub shape: ToyShape,
    pub color: [f32; 3],
    /// Nominal center in pixels (y, x).
    pub center: (f64, f64),
    /// Radius / half-side in pixels.
    pub size: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToySpec {
    pub canvas: usize,
    pub background: [f32; 3],
    pub parts: Vec<ToyPart>,
    pub train: usize,
    pub validation: usize,
    pub test_good: usize,
    pub test_logical: usize,
    pub test_structural: usize,
    /// Uniform per-image position jitter (pixels, per axis).
    pub position_jitter: f64,
    /// Uniform per-image, per-part color jitter (per channel).
    pub color_jitter: f32,
    /// Uniform per-pixel noise amplitude.
    pub pixel_noise: f32,
    /// Displacement of a misplaced part (pixels).
    pub misplace_offset: f64,
    /// Side of the structural noise patch (pixels).
    pub noise_patch: usize,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec {
            canvas: 256,
            background: [0.08, 0.08, 0.10],
            parts: vec![
                ToyPart {
                    shape: ToyShape::Circle,
                    color: [0.85, 0.20, 0.18],
                    center: (72.0, 80.0),
                    size: 22.0,
                },
                ToyPart {
                    shape: ToyShape::Square,
                    color: [0.20, 0.75, 0.25],
                    center: (72.0, 176.0),
                    size: 20.0,
                },
                ToyPart {
                    shape: ToyShape::Triangle,
                    color: [0.22, 0.32, 0.88],
                    center: (172.0, 80.0),
                    size: 26.0,
                },
                ToyPart {
                    shape: ToyShape::Circle,
                    color: [0.88, 0.78, 0.20],
                    center: (172.0, 176.0),
                    size: 15.0,
                },
            ],
            train: 200,
            validation: 20,
            test_good: 50,
            test_logical: 50,
            test_structural: 50,
            position_jitter: 6.0,
            color_jitter: 0.015,
            pixel_noise: 0.01,
            misplace_offset: 26.0,
            noise_patch: 32,
            seed: 0,
        }
    }
}

impl ToySpec {
    pub fn load(path: &Path) -> Result<ToySpec> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Serialization(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

fn shape_mask(part: &ToyPart, center: (f64, f64), canvas: usize) -> Vec<bool> {
    let mut mask = vec![false; canvas * canvas];
    let (cy, cx) = center;
    let s = part.size;
    for y in 0..canvas {
        for x in 0..canvas {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            let inside = match part.shape {
                ToyShape::Circle => dy * dy + dx * dx <= s * s,
                ToyShape::Square => dy.abs() <= s && dx.abs() <= s,
                // Upward isoceles triangle inscribed in the 2s x 2s box.
                ToyShape::Triangle => {
                    dy >= -s && dy <= s && dx.abs() <= (dy + s) / 2.0
                }
            };
            if inside {
                mask[y * canvas + x] = true;
            }
        }
    }
    mask
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LogicalKind {
    Missing,
    Extra,
    Misplaced,
}

struct RenderedImage {
    image: ImageRgb,
    composition: CompositionMap,
    /// Ground-truth region (anomalous images only).
    region: Option<Vec<bool>>,
}

fn render(spec: &ToySpec, rng: &mut Pcg64Mcg, logical: Option<LogicalKind>, structural: bool) -> RenderedImage {
    let canvas = spec.canvas;
    let mut image = ImageRgb::filled(canvas, canvas, spec.background);
    let mut classes = vec![0u16; canvas * canvas];

    // Per-image part placements.
    let jitter = |rng: &mut Pcg64Mcg| -> f64 { (rng.random::<f64>() * 2.0 - 1.0) * spec.position_jitter };
    let mut centers: Vec<(f64, f64)> = Vec::new();
    let mut colors: Vec<[f32; 3]> = Vec::new();
    for part in &spec.parts {
        centers.push((part.center.0 + jitter(rng), part.center.1 + jitter(rng)));
        let mut c = part.color;
        for ch in &mut c {
            *ch = (*ch + (rng.random::<f32>() * 2.0 - 1.0) * spec.color_jitter).clamp(0.0, 1.0);
        }
        colors.push(c);
    }

    let target_part = rng.random_range(0..spec.parts.len());
    let angle = rng.random::<f64>() * std::f64::consts::TAU;
    let offset = (spec.misplace_offset * angle.sin(), spec.misplace_offset * angle.cos());
    let mut region: Option<Vec<bool>> = None;

    // Resolve the placement edits the logical anomaly makes.
    let mut draw_plan: Vec<(usize, (f64, f64))> = (0..spec.parts.len()).map(|i| (i, centers[i])).collect();
    match logical {
        Some(LogicalKind::Missing) => {
            draw_plan.retain(|(i, _)| *i != target_part);
            // The region marks where the part should have been.
            region = Some(shape_mask(&spec.parts[target_part], centers[target_part], canvas));
        }
        Some(LogicalKind::Extra) => {
            let extra_center = clamp_center(
                (centers[target_part].0 + offset.0, centers[target_part].1 + offset.1),
                spec.parts[target_part].size,
                canvas,
            );
            draw_plan.push((target_part, extra_center));
            region = Some(shape_mask(&spec.parts[target_part], extra_center, canvas));
        }
        Some(LogicalKind::Misplaced) => {
            let new_center = clamp_center(
                (centers[target_part].0 + offset.0, centers[target_part].1 + offset.1),
                spec.parts[target_part].size,
                canvas,
            );
            for entry in &mut draw_plan {
                if entry.0 == target_part {
                    entry.1 = new_center;
                }
            }
            // All plausible solutions: where it is and where it belongs.
            let mut union = shape_mask(&spec.parts[target_part], centers[target_part], canvas);
            for (u, v) in union.iter_mut().zip(shape_mask(&spec.parts[target_part], new_center, canvas)) {
                *u |= v;
            }
            region = Some(union);
        }
        None => {}
    }

    for (part_idx, center) in draw_plan {
        let mask = shape_mask(&spec.parts[part_idx], center, canvas);
        let color = colors[part_idx];
        for (p, &m) in mask.iter().enumerate() {
            if m {
                image.data[p * 3..p * 3 + 3].copy_from_slice(&color);
                classes[p] = (part_idx + 1) as u16;
            }
        }
    }

    if structural {
        let side = spec.noise_patch.min(canvas);
        let y0 = rng.random_range(0..canvas - side);
        let x0 = rng.random_range(0..canvas - side);
        let mut mask = vec![false; canvas * canvas];
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                image.set(y, x, [rng.random::<f32>(), rng.random::<f32>(), rng.random::<f32>()]);
                mask[y * canvas + x] = true;
            }
        }
        // Composition semantics unchanged: the noise only corrupts appearance.
        region = Some(mask);
    }

    if spec.pixel_noise > 0.0 {
        for v in &mut image.data {
            *v = (*v + (rng.random::<f32>() * 2.0 - 1.0) * spec.pixel_noise).clamp(0.0, 1.0);
        }
    }

    RenderedImage {
        image,
        composition: CompositionMap {
            height: canvas,
            width: canvas,
            classes,
            num_classes: spec.parts.len() + 1,
        },
        region,
    }
}

fn clamp_center(center: (f64, f64), size: f64, canvas: usize) -> (f64, f64) {
    let margin = size + 2.0;
    (
        center.0.clamp(margin, canvas as f64 - margin),
        center.1.clamp(margin, canvas as f64 - margin),
    )
}

fn image_rng(seed: u64, split: u64, idx: usize) -> Pcg64Mcg {
    Pcg64Mcg::seed_from_u64(seed ^ (split << 48) ^ (idx as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Write the dataset and return its index.
pub fn generate_toy_dataset(spec: &ToySpec, out_root: &Path) -> Result<DatasetIndex> {
    if spec.parts.is_empty() {
        return Err(Error::InvalidArgument {
            arg: "spec",
            reason: "toy spec needs at least one part".into(),
        });
    }
    if spec.train == 0 {
        return Err(Error::InvalidArgument {
            arg: "spec",
            reason: "toy spec needs a non-empty train split".into(),
        });
    }
    let root = out_root;
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;

    let write = |dir: &str, idx: usize, rendered: &RenderedImage| -> Result<()> {
        let img_path = root.join(dir).join(format!("{idx:03}.png"));
        if let Some(parent) = img_path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        rendered.image.save(&img_path)?;
        let comp_path = root.join("composition_gt").join(dir).join(format!("{idx:03}.png"));
        save_composition_map(&rendered.composition, &comp_path, Some(spec.seed))?;
        Ok(())
    };

    for i in 0..spec.train {
        let mut rng = image_rng(spec.seed, 1, i);
        write("train/good", i, &render(spec, &mut rng, None, false))?;
    }
    for i in 0..spec.validation {
        let mut rng = image_rng(spec.seed, 2, i);
        write("validation/good", i, &render(spec, &mut rng, None, false))?;
    }
    for i in 0..spec.test_good {
        let mut rng = image_rng(spec.seed, 3, i);
        write("test/good", i, &render(spec, &mut rng, None, false))?;
    }
    let kinds = [LogicalKind::Missing, LogicalKind::Extra, LogicalKind::Misplaced];
    for i in 0..spec.test_logical {
        let mut rng = image_rng(spec.seed, 4, i);
        let rendered = render(spec, &mut rng, Some(kinds[i % kinds.len()]), false);
        write("test/logical_anomalies", i, &rendered)?;
        let region = rendered.region.as_ref().expect("logical anomaly has a region");
        save_mask(
            region,
            spec.canvas,
            spec.canvas,
            &root
                .join("ground_truth/logical_anomalies")
                .join(format!("{i:03}"))
                .join("000.png"),
        )?;
    }
    for i in 0..spec.test_structural {
        let mut rng = image_rng(spec.seed, 5, i);
        let rendered = render(spec, &mut rng, None, true);
        write("test/structural_anomalies", i, &rendered)?;
        let region = rendered.region.as_ref().expect("structural anomaly has a region");
        save_mask(
            region,
            spec.canvas,
            spec.canvas,
            &root
                .join("ground_truth/structural_anomalies")
                .join(format!("{i:03}"))
                .join("000.png"),
        )?;
    }

    let defects = vec![
        DefectConfig {
            defect_name: "logical_anomalies".into(),
            pixel_value: 255,
            saturation_threshold: 1.0,
            relative_saturation: true,
        },
        DefectConfig {
            defect_name: "structural_anomalies".into(),
            pixel_value: 255,
            saturation_threshold: 1.0,
            relative_saturation: true,
        },
    ];
    let cfg_path = root.join("defects_config.json");
    let text = serde_json::to_string_pretty(&defects).map_err(|e| Error::Serialization(e.to_string()))?;
    std::fs::write(&cfg_path, text).map_err(|e| Error::io(&cfg_path, e))?;

    load_dataset_index(root, DatasetLayout::Loco)
}

/// Constructed composition ground truth for an indexed sample, read back
/// from the `composition_gt` mirror.
pub fn toy_composition_gt(index: &DatasetIndex, record: &crate::dataset::SampleRecord) -> Result<CompositionMap> {
    let rel = record
        .path
        .strip_prefix(&index.root)
        .map_err(|_| Error::Dataset("sample path outside dataset root".into()))?;
    crate::compmap::load_composition_map(&index.root.join("composition_gt").join(rel))
}
