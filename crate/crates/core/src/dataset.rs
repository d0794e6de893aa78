//! Dataset indexing in the MVTec LOCO directory convention.
//!
//! Layout (`loco`):
//! `<root>/<category>/{train,validation,test}/good/*.png`,
//! `test/{logical_anomalies,structural_anomalies}/*.png`, and optional
//! `ground_truth/<defect>/<image>/*.png` region masks plus a per-category
//! `defects_config.json` carrying saturation areas.

use crate::error::{Error, Result};
use crate::imaging::ImageRgb;
use rand::prelude::*;
use rand_pcg::Pcg64Mcg;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleLabel {
    Good,
    LogicalAnomaly,
    StructuralAnomaly,
    Unknown,
}

/// An image loaded at the working resolution.
#[derive(Debug, Clone)]
pub struct ImageSample {
    pub pixels: ImageRgb,
    pub source_path: PathBuf,
    pub split: Split,
    pub label: SampleLabel,
}

impl ImageSample {
    pub fn from_image(pixels: ImageRgb, split: Split, label: SampleLabel) -> Self {
        ImageSample {
            pixels,
            source_path: PathBuf::new(),
            split,
            label,
        }
    }
}

/// One indexed file on disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub path: PathBuf,
    pub split: Split,
    pub label: SampleLabel,
}

impl SampleRecord {
    pub fn stem(&self) -> String {
        self.path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }

    pub fn load(&self) -> Result<ImageSample> {
        Ok(ImageSample {
            pixels: ImageRgb::load(&self.path)?,
            source_path: self.path.clone(),
            split: self.split,
            label: self.label,
        })
    }
}

/// Saturation configuration entry, one per defect type.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DefectConfig {
    pub defect_name: String,
    pub pixel_value: u8,
    pub saturation_threshold: f64,
    pub relative_saturation: bool,
}

/// Ground-truth region masks for one test image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthRecord {
    /// One mask file per annotated region.
    pub region_paths: Vec<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetLayout {
    Loco,
    Flat,
}

/// Index of one category's files. Paths are sorted lexicographically so the
/// index is a pure function of the directory tree.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub category: String,
    pub train: Vec<SampleRecord>,
    pub validation: Vec<SampleRecord>,
    pub test: Vec<SampleRecord>,
    /// Keyed by `<defect_dir>/<image_stem>`.
    pub ground_truth: BTreeMap<String, GroundTruthRecord>,
    pub defects_config: Vec<DefectConfig>,
    /// Seed recorded when a validation split was carved from train.
    pub carve_seed: Option<u64>,
}

impl DatasetIndex {
    pub fn has_ground_truth(&self) -> bool {
        !self.ground_truth.is_empty() && !self.defects_config.is_empty()
    }

    pub fn ground_truth_for(&self, record: &SampleRecord) -> Option<&GroundTruthRecord> {
        let defect_dir = match record.label {
            SampleLabel::LogicalAnomaly => "logical_anomalies",
            SampleLabel::StructuralAnomaly => "structural_anomalies",
            _ => return None,
        };
        self.ground_truth.get(&format!("{defect_dir}/{}", record.stem()))
    }
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if !path.is_file() {
            continue;
        }
        match path.extension().and_then(|e| e.to_str()) {
            Some("png") | Some("PNG") | Some("jpg") | Some("jpeg") => out.push(path),
            _ => {}
        }
    }
    out.sort();
    Ok(out)
}

fn records(paths: Vec<PathBuf>, split: Split, label: SampleLabel) -> Vec<SampleRecord> {
    paths
        .into_iter()
        .map(|path| SampleRecord { path, split, label })
        .collect()
}

/// Build the index for a category root.
///
/// `loco` expects the MVTec LOCO convention; `flat` treats every image
/// directly under `root` as a training-split good sample.
pub fn load_dataset_index(root: &Path, layout: DatasetLayout) -> Result<DatasetIndex> {
    if !root.is_dir() {
        return Err(Error::Config(format!("dataset root {} does not exist", root.display())));
    }
    let category = root
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "category".to_string());

    let mut index = DatasetIndex {
        root: root.to_path_buf(),
        category,
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
        ground_truth: BTreeMap::new(),
        defects_config: Vec::new(),
        carve_seed: None,
    };

    match layout {
        DatasetLayout::Flat => {
            index.train = records(list_images(root)?, Split::Train, SampleLabel::Good);
        }
        DatasetLayout::Loco => {
            for (split_dir, split) in [("train", Split::Train), ("validation", Split::Validation)] {
                let dir = root.join(split_dir).join("good");
                if !dir.is_dir() {
                    return Err(Error::MissingSplit {
                        split: split_dir.to_string(),
                        root: root.to_path_buf(),
                    });
                }
                let recs = records(list_images(&dir)?, split, SampleLabel::Good);
                match split {
                    Split::Train => index.train = recs,
                    Split::Validation => index.validation = recs,
                    Split::Test => unreachable!(),
                }
            }
            let test_root = root.join("test");
            if !test_root.is_dir() {
                return Err(Error::MissingSplit {
                    split: "test".to_string(),
                    root: root.to_path_buf(),
                });
            }
            for (sub, label) in [
                ("good", SampleLabel::Good),
                ("logical_anomalies", SampleLabel::LogicalAnomaly),
                ("structural_anomalies", SampleLabel::StructuralAnomaly),
            ] {
                let dir = test_root.join(sub);
                if dir.is_dir() {
                    index.test.extend(records(list_images(&dir)?, Split::Test, label));
                }
            }
            index.test.sort_by(|a, b| a.path.cmp(&b.path));

            let gt_root = root.join("ground_truth");
            if gt_root.is_dir() {
                for defect_dir in ["logical_anomalies", "structural_anomalies"] {
                    let dir = gt_root.join(defect_dir);
                    if !dir.is_dir() {
                        continue;
                    }
                    let mut subdirs: Vec<PathBuf> = std::fs::read_dir(&dir)
                        .map_err(|e| Error::io(&dir, e))?
                        .filter_map(|e| e.ok().map(|e| e.path()))
                        .filter(|p| p.is_dir())
                        .collect();
                    subdirs.sort();
                    for image_dir in subdirs {
                        let stem = image_dir
                            .file_name()
                            .map(|s| s.to_string_lossy().into_owned())
                            .unwrap_or_default();
                        let region_paths = list_images(&image_dir)?;
                        if !region_paths.is_empty() {
                            index
                                .ground_truth
                                .insert(format!("{defect_dir}/{stem}"), GroundTruthRecord { region_paths });
                        }
                    }
                }
            }
            let cfg_path = root.join("defects_config.json");
            if cfg_path.is_file() {
                let text = std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
                index.defects_config =
                    serde_json::from_str(&text).map_err(|e| Error::json(&cfg_path, e))?;
            }
        }
    }

    if index.train.is_empty() {
        return Err(Error::Dataset(format!(
            "train split under {} is empty",
            root.display()
        )));
    }
    Ok(index)
}

/// Carve a validation split out of the training set with a seeded shuffle.
///
/// Validation receives `ceil(fraction * N)` samples; the two partitions are
/// disjoint and exhaustive, and the seed is recorded on both indexes.
pub fn carve_validation_split(
    index: &DatasetIndex,
    fraction: f64,
    seed: u64,
) -> Result<(DatasetIndex, DatasetIndex)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument {
            arg: "fraction",
            reason: format!("must be in (0, 1), got {fraction}"),
        });
    }
    if index.train.is_empty() {
        return Err(Error::Dataset("cannot carve validation from empty train split".into()));
    }
    let n = index.train.len();
    let n_val = ((fraction * n as f64).ceil() as usize).min(n);
    if n_val == n {
        eprintln!(
            "warning: validation carve takes all {n} training samples (fraction {fraction})"
        );
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = Pcg64Mcg::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let mut val_records: Vec<SampleRecord> = order[..n_val]
        .iter()
        .map(|&i| {
            let mut r = index.train[i].clone();
            r.split = Split::Validation;
            r
        })
        .collect();
    val_records.sort_by(|a, b| a.path.cmp(&b.path));
    let mut train_records: Vec<SampleRecord> =
        order[n_val..].iter().map(|&i| index.train[i].clone()).collect();
    train_records.sort_by(|a, b| a.path.cmp(&b.path));

    let mut train_index = index.clone();
    train_index.train = train_records;
    train_index.carve_seed = Some(seed);
    let mut val_index = index.clone();
    val_index.train = Vec::new();
    val_index.validation = val_records;
    val_index.carve_seed = Some(seed);
    Ok((train_index, val_index))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_png(path: &Path) {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        ImageRgb::filled(8, 8, [0.5, 0.5, 0.5]).save(path).unwrap();
    }

    fn toy_root(name: &str, with_validation: bool) -> PathBuf {
        let root = std::env::temp_dir().join(format!("salad_dataset_{name}")).join("cat");
        let _ = std::fs::remove_dir_all(&root);
        for i in 0..3 {
            write_png(&root.join(format!("train/good/{i:03}.png")));
        }
        if with_validation {
            write_png(&root.join("validation/good/000.png"));
        }
        write_png(&root.join("test/good/000.png"));
        write_png(&root.join("test/logical_anomalies/000.png"));
        root
    }

    #[test]
    fn toy_root_counts_and_ordering() {
        let root = toy_root("counts", true);
        let index = load_dataset_index(&root, DatasetLayout::Loco).unwrap();
        assert_eq!(index.train.len(), 3);
        assert_eq!(index.validation.len(), 1);
        assert_eq!(index.test.len(), 2);
        let mut sorted = index.train.clone();
        sorted.sort_by(|a, b| a.path.cmp(&b.path));
        assert_eq!(index.train, sorted);
        // Pure function of the tree.
        let again = load_dataset_index(&root, DatasetLayout::Loco).unwrap();
        assert_eq!(index.train, again.train);
        assert_eq!(index.test, again.test);
    }

    #[test]
    fn missing_validation_split_is_fatal_under_loco() {
        let root = toy_root("noval", false);
        let err = load_dataset_index(&root, DatasetLayout::Loco).unwrap_err();
        match err {
            Error::MissingSplit { split, .. } => assert_eq!(split, "validation"),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn missing_root_is_fatal() {
        let err = load_dataset_index(Path::new("/nonexistent/salad"), DatasetLayout::Loco).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn carve_is_deterministic_and_partitions() {
        let root = std::env::temp_dir().join("salad_dataset_carve").join("cat");
        let _ = std::fs::remove_dir_all(&root);
        for i in 0..100 {
            write_png(&root.join(format!("{i:03}.png")));
        }
        let index = load_dataset_index(&root, DatasetLayout::Flat).unwrap();
        let (train_a, val_a) = carve_validation_split(&index, 0.10, 42).unwrap();
        assert_eq!(train_a.train.len(), 90);
        assert_eq!(val_a.validation.len(), 10);

        let (train_b, val_b) = carve_validation_split(&index, 0.10, 42).unwrap();
        assert_eq!(train_a.train, train_b.train);
        assert_eq!(val_a.validation, val_b.validation);

        // Disjoint and exhaustive.
        let mut all: Vec<&PathBuf> = train_a.train.iter().map(|r| &r.path).collect();
        all.extend(val_a.validation.iter().map(|r| &r.path));
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 100);
    }

    #[test]
    fn carve_single_sample_goes_to_validation() {
        let root = std::env::temp_dir().join("salad_dataset_single").join("cat");
        let _ = std::fs::remove_dir_all(&root);
        write_png(&root.join("only.png"));
        let index = load_dataset_index(&root, DatasetLayout::Flat).unwrap();
        let (train, val) = carve_validation_split(&index, 0.10, 1).unwrap();
        assert_eq!(train.train.len(), 0);
        assert_eq!(val.validation.len(), 1);
    }

    #[test]
    fn carve_rejects_bad_fraction() {
        let root = toy_root("badfrac", true);
        let index = load_dataset_index(&root, DatasetLayout::Loco).unwrap();
        assert!(carve_validation_split(&index, 0.0, 1).is_err());
        assert!(carve_validation_split(&index, 1.0, 1).is_err());
    }
}
