//! Composition maps, anomaly maps and their persistence.
//!
//! A composition map assigns every pixel a component class index; class 0 is
//! background and classes `1..=K` are object parts. Maps persist as 8-bit
//! single-channel PNGs whose pixel values are the class indices, with a
//! per-directory `meta.json` sidecar recording the class count.

use crate::error::{Error, Result};
use crate::imaging::resize_nearest;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompositionMap {
    pub height: usize,
    pub width: usize,
    /// Per-pixel class index, row-major. Values are in `0..num_classes`.
    pub classes: Vec<u16>,
    /// K + 1: background plus K part classes.
    pub num_classes: usize,
}

impl CompositionMap {
    /// Build a validated map. Every value must be below `num_classes`.
    pub fn new(height: usize, width: usize, classes: Vec<u16>, num_classes: usize) -> Result<Self> {
        if classes.len() != height * width {
            return Err(Error::Shape(format!(
                "composition map has {} values for {}x{}",
                classes.len(),
                height,
                width
            )));
        }
        if num_classes < 1 {
            return Err(Error::InvalidArgument {
                arg: "num_classes",
                reason: "must be at least 1".into(),
            });
        }
        if let Some(v) = classes.iter().find(|v| **v as usize >= num_classes) {
            return Err(Error::Shape(format!(
                "class value {v} out of range for num_classes {num_classes}"
            )));
        }
        Ok(CompositionMap {
            height,
            width,
            classes,
            num_classes,
        })
    }

    pub fn zeros(height: usize, width: usize, num_classes: usize) -> Self {
        CompositionMap {
            height,
            width,
            classes: vec![0; height * width],
            num_classes,
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u16 {
        self.classes[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: u16) {
        self.classes[y * self.width + x] = v;
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// Number of part classes K (excluding background).
    pub fn num_parts(&self) -> usize {
        self.num_classes - 1
    }

    /// Pixel counts per class.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0usize; self.num_classes];
        for &c in &self.classes {
            hist[c as usize] += 1;
        }
        hist
    }

    /// Nearest-neighbor resample; class maps are never interpolated.
    pub fn resize_nearest(&self, out_h: usize, out_w: usize) -> CompositionMap {
        CompositionMap {
            height: out_h,
            width: out_w,
            classes: resize_nearest(&self.classes, self.height, self.width, out_h, out_w),
            num_classes: self.num_classes,
        }
    }

    /// One-hot encoding as `num_classes` channel planes of length `h*w`.
    pub fn one_hot(&self) -> Vec<f32> {
        let hw = self.len();
        let mut out = vec![0.0f32; self.num_classes * hw];
        for (p, &c) in self.classes.iter().enumerate() {
            out[c as usize * hw + p] = 1.0;
        }
        out
    }

    /// Count of pixels whose class differs from `other`.
    pub fn diff_count(&self, other: &CompositionMap) -> usize {
        self.classes
            .iter()
            .zip(&other.classes)
            .filter(|(a, b)| a != b)
            .count()
    }
}

/// Declared value range of an anomaly map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ValueRange {
    /// Values in `[0, 1]` (composition branch output).
    Unit,
    /// Nonnegative, no upper bound (appearance branch output).
    NonNegative,
    /// No declared bounds (normalized sums).
    Unbounded,
}

/// A per-pixel anomaly score map.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyMap {
    pub height: usize,
    pub width: usize,
    pub scores: Vec<f32>,
    pub value_range: ValueRange,
}

impl AnomalyMap {
    pub fn new(height: usize, width: usize, scores: Vec<f32>, value_range: ValueRange) -> Result<Self> {
        if scores.len() != height * width {
            return Err(Error::Shape(format!(
                "anomaly map has {} values for {}x{}",
                scores.len(),
                height,
                width
            )));
        }
        let ok = match value_range {
            ValueRange::Unit => scores.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)),
            ValueRange::NonNegative => scores.iter().all(|v| v.is_finite() && *v >= 0.0),
            ValueRange::Unbounded => scores.iter().all(|v| v.is_finite()),
        };
        if !ok {
            return Err(Error::Numeric(
                "anomaly map values outside declared range or non-finite".into(),
            ));
        }
        Ok(AnomalyMap {
            height,
            width,
            scores,
            value_range,
        })
    }

    pub fn max(&self) -> f64 {
        self.scores.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CompmapMeta {
    pub num_classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub pipeline_version: String,
}

fn meta_path(map_path: &Path) -> std::path::PathBuf {
    map_path.parent().unwrap_or_else(|| Path::new(".")).join("meta.json")
}

/// Save a composition map as an 8-bit single-channel PNG whose values are
/// the class indices, recording `num_classes` in the directory `meta.json`.
///
/// Every map in one directory must share the same class count.
pub fn save_composition_map(map: &CompositionMap, path: &Path, seed: Option<u64>) -> Result<()> {
    if map.num_classes > 256 || map.classes.iter().any(|&v| v > 255) {
        return Err(Error::Serialization(format!(
            "class values exceed 8-bit range (num_classes = {})",
            map.num_classes
        )));
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut img = image::GrayImage::new(map.width as u32, map.height as u32);
    for y in 0..map.height {
        for x in 0..map.width {
            img.put_pixel(x as u32, y as u32, image::Luma([map.get(y, x) as u8]));
        }
    }
    img.save(path).map_err(|e| Error::image(path, e))?;

    let mpath = meta_path(path);
    let meta = CompmapMeta {
        num_classes: map.num_classes,
        seed,
        pipeline_version: crate::PIPELINE_VERSION.to_string(),
    };
    if mpath.exists() {
        let existing = read_meta(&mpath)?;
        if existing.num_classes != meta.num_classes {
            return Err(Error::Serialization(format!(
                "directory meta.json has num_classes {} but map has {}",
                existing.num_classes, meta.num_classes
            )));
        }
    } else {
        let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::json(&mpath, e))?;
        std::fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
    }
    Ok(())
}

fn read_meta(path: &Path) -> Result<CompmapMeta> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Load a composition map saved by [`save_composition_map`].
pub fn load_composition_map(path: &Path) -> Result<CompositionMap> {
    let meta = read_meta(&meta_path(path))?;
    let img = image::open(path).map_err(|e| Error::image(path, e))?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let classes: Vec<u16> = img.pixels().map(|p| p.0[0] as u16).collect();
    CompositionMap::new(h, w, classes, meta.num_classes)
        .map_err(|e| Error::corrupt(path, format!("invalid class data: {e}")))
}

/// Save a boolean mask as a black/white PNG.
pub fn save_mask(mask: &[bool], h: usize, w: usize, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = if mask[y * w + x] { 255 } else { 0 };
            img.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    img.save(path).map_err(|e| Error::image(path, e))
}

/// Load a mask PNG; any nonzero pixel is true.
pub fn load_mask(path: &Path) -> Result<(Vec<bool>, usize, usize)> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((img.pixels().map(|p| p.0[0] > 0).collect(), h, w))
}

/// Intersection-over-union of two boolean masks.
pub fn mask_iou(a: &[bool], b: &[bool]) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (x, y) in a.iter().zip(b) {
        if *x && *y {
            inter += 1;
        }
        if *x || *y {
            union += 1;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_pcg::Pcg64Mcg;

    fn temp_dir(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("salad_compmap_{name}"));
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn round_trip_is_identity() {
        let mut rng = Pcg64Mcg::seed_from_u64(11);
        let classes: Vec<u16> = (0..64 * 64).map(|_| rng.random_range(0..7u16)).collect();
        let map = CompositionMap::new(64, 64, classes, 7).unwrap();
        let dir = temp_dir("roundtrip");
        let path = dir.join("m.png");
        save_composition_map(&map, &path, Some(3)).unwrap();
        let back = load_composition_map(&path).unwrap();
        assert_eq!(map, back);
    }

    #[test]
    fn oversized_class_value_rejected_on_save() {
        let mut map = CompositionMap::zeros(4, 4, 301);
        map.set(1, 1, 300);
        let dir = temp_dir("oversize");
        let err = save_composition_map(&map, &dir.join("m.png"), None).unwrap_err();
        assert!(matches!(err, Error::Serialization(_)));
    }

    #[test]
    fn all_background_map_keeps_num_classes_from_meta() {
        let map = CompositionMap::zeros(16, 16, 5);
        let dir = temp_dir("background");
        let path = dir.join("bg.png");
        save_composition_map(&map, &path, None).unwrap();
        let back = load_composition_map(&path).unwrap();
        assert_eq!(back.num_classes, 5);
        assert!(back.classes.iter().all(|&c| c == 0));
    }

    #[test]
    fn out_of_range_class_rejected_at_construction() {
        let err = CompositionMap::new(2, 2, vec![0, 1, 2, 3], 3).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn one_hot_sums_to_one_per_pixel() {
        let map = CompositionMap::new(2, 3, vec![0, 1, 2, 2, 1, 0], 3).unwrap();
        let oh = map.one_hot();
        for p in 0..6 {
            let s: f32 = (0..3).map(|c| oh[c * 6 + p]).sum();
            assert_eq!(s, 1.0);
        }
    }

    #[test]
    fn anomaly_map_range_contract_enforced() {
        assert!(AnomalyMap::new(2, 2, vec![0.0, 0.5, 1.0, 0.25], ValueRange::Unit).is_ok());
        assert!(AnomalyMap::new(2, 2, vec![0.0, 1.5, 0.0, 0.0], ValueRange::Unit).is_err());
        assert!(AnomalyMap::new(2, 2, vec![0.0, 1.5, 0.0, f32::NAN], ValueRange::NonNegative).is_err());
        assert!(AnomalyMap::new(2, 2, vec![0.0, 7.5, 0.0, 0.0], ValueRange::NonNegative).is_ok());
    }
}
