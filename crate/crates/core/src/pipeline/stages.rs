//! Stage sequencing: gen-maps, the three branch trainings, calibration,
//! evaluation and single-image inference. Each stage writes a manifest with
//! its config hash and input hashes; a rerun with unchanged inputs is
//! skipped as up-to-date.

use super::config::RunConfig;
use super::{fnv1a64, hash_file};
use crate::appearance::{train_appearance, AppearanceModelState, Teacher};
use crate::compgen;
use crate::compmap::{load_composition_map, load_mask, save_composition_map, AnomalyMap, CompositionMap};
use crate::composition::{composition_anomaly_map, train_composition_branch, CompDiscModel, CompReconModel};
use crate::dataset::{
    carve_validation_split, load_dataset_index, DatasetIndex, ImageSample, SampleLabel, SampleRecord,
};
use crate::error::{Error, Result};
use crate::global::{compute_descriptor, fit_gaussians, mahalanobis_score, GlobalModel};
use crate::par;
use crate::scoring::{
    auroc, auspro, branch_scores, calibrate, combined_localization_map, fuse, localization_extrema,
    FusionResult, GtRegion, ScoreStats, MAX_SPRO_THRESHOLDS,
};
use crate::segmenter::{train_component_segmenter, SegmenterModel};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    GenMaps,
    TrainAppearance,
    TrainComposition,
    TrainGlobal,
    Calibrate,
    Eval,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::GenMaps => "gen-maps",
            Stage::TrainAppearance => "train-appearance",
            Stage::TrainComposition => "train-composition",
            Stage::TrainGlobal => "train-global",
            Stage::Calibrate => "calibrate",
            Stage::Eval => "eval",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub category: String,
    pub skipped: bool,
    pub wall_seconds: f64,
    pub outputs: Vec<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StageManifest {
    stage: String,
    category: String,
    pipeline_version: String,
    seed: u64,
    config_hash: u64,
    input_hashes: BTreeMap<String, u64>,
    outputs: Vec<PathBuf>,
    wall_seconds: f64,
}

// Artifact locations under the workdir.
pub fn compmaps_dir(config: &RunConfig, split: &str) -> PathBuf {
    config.workdir.join("compmaps").join(&config.category).join(split)
}
/// Cache location of one sample's composition map, mirroring the sample's
/// path relative to the category root (test subfolders share stems).
pub fn cached_map_path(config: &RunConfig, record: &SampleRecord) -> PathBuf {
    let rel = record
        .path
        .strip_prefix(config.category_root())
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|_| PathBuf::from(format!("{}.png", record.stem())));
    config
        .workdir
        .join("compmaps")
        .join(&config.category)
        .join(rel.with_extension("png"))
}
pub fn segmenter_ckpt(config: &RunConfig) -> PathBuf {
    config.workdir.join("segmenter").join(format!("{}.ckpt", config.category))
}
pub fn cluster_model_path(config: &RunConfig) -> PathBuf {
    config.workdir.join("segmenter").join(format!("{}.cluster.json", config.category))
}
pub fn recon_ckpt(config: &RunConfig) -> PathBuf {
    config.workdir.join("compbranch").join(format!("{}.recon.ckpt", config.category))
}
pub fn disc_ckpt(config: &RunConfig) -> PathBuf {
    config.workdir.join("compbranch").join(format!("{}.disc.ckpt", config.category))
}
pub fn appearance_ckpt(config: &RunConfig) -> PathBuf {
    config.workdir.join("appearance").join(format!("{}.ckpt", config.category))
}
pub fn global_model_path(config: &RunConfig) -> PathBuf {
    config.workdir.join("global").join(format!("{}.gauss", config.category))
}
pub fn stats_path(config: &RunConfig) -> PathBuf {
    config.workdir.join("calibration").join(format!("{}.stats.json", config.category))
}
pub fn eval_report_path(config: &RunConfig) -> PathBuf {
    config.workdir.join("reports").join(format!("{}.eval.json", config.category))
}
pub fn scores_csv_path(config: &RunConfig) -> PathBuf {
    config.workdir.join("reports").join(format!("{}.scores.csv", config.category))
}
fn manifest_path(config: &RunConfig, stage: Stage) -> PathBuf {
    config
        .workdir
        .join("manifests")
        .join(format!("{}.{}.json", stage.name(), config.category))
}

struct WorkdirLock {
    path: PathBuf,
}

impl WorkdirLock {
    fn acquire(workdir: &Path) -> Result<Self> {
        std::fs::create_dir_all(workdir).map_err(|e| Error::io(workdir, e))?;
        let path = workdir.join(".lock");
        match std::fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(WorkdirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(path)),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for WorkdirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

fn require_artifact(path: &Path, artifact: &str, produced_by: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact {
            artifact: format!("{artifact} ({})", path.display()),
            stage: produced_by.to_string(),
        })
    }
}

fn hash_many(paths: &[PathBuf]) -> Result<BTreeMap<String, u64>> {
    let mut out = BTreeMap::new();
    for p in paths {
        out.insert(p.to_string_lossy().into_owned(), hash_file(p)?);
    }
    Ok(out)
}

fn dataset_input_hashes(index: &DatasetIndex) -> Result<BTreeMap<String, u64>> {
    let mut paths: Vec<PathBuf> = Vec::new();
    for r in index.train.iter().chain(&index.validation).chain(&index.test) {
        paths.push(r.path.clone());
    }
    hash_many(&paths)
}

/// Train/validation split the pipeline actually uses: the indexed
/// validation split when present, otherwise a seeded carve from train.
fn effective_splits(config: &RunConfig) -> Result<(DatasetIndex, Vec<SampleRecord>, Vec<SampleRecord>)> {
    let index = load_dataset_index(&config.category_root(), config.layout)?;
    if index.validation.is_empty() {
        let (train_idx, val_idx) = carve_validation_split(&index, config.validation_fraction, config.seed)?;
        let train = train_idx.train.clone();
        let validation = val_idx.validation.clone();
        Ok((index, train, validation))
    } else {
        let train = index.train.clone();
        let validation = index.validation.clone();
        Ok((index, train, validation))
    }
}

fn load_images(records: &[SampleRecord]) -> Result<Vec<ImageSample>> {
    let results: Vec<Result<ImageSample>> = par::map(records.to_vec(), |r| r.load());
    results.into_iter().collect()
}

fn up_to_date(config: &RunConfig, stage: Stage, inputs: &BTreeMap<String, u64>, outputs: &[PathBuf]) -> bool {
    let mpath = manifest_path(config, stage);
    let Ok(text) = std::fs::read_to_string(&mpath) else {
        return false;
    };
    let Ok(manifest) = serde_json::from_str::<StageManifest>(&text) else {
        return false;
    };
    manifest.config_hash == config.config_hash()
        && manifest.input_hashes == *inputs
        && outputs.iter().all(|p| p.exists())
}

fn write_manifest(
    config: &RunConfig,
    stage: Stage,
    inputs: BTreeMap<String, u64>,
    outputs: Vec<PathBuf>,
    wall_seconds: f64,
) -> Result<()> {
    let manifest = StageManifest {
        stage: stage.name().to_string(),
        category: config.category.clone(),
        pipeline_version: crate::PIPELINE_VERSION.to_string(),
        seed: config.seed,
        config_hash: config.config_hash(),
        input_hashes: inputs,
        outputs,
        wall_seconds,
    };
    let path = manifest_path(config, stage);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Serialization(e.to_string()))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Execute one stage, idempotent for unchanged inputs.
pub fn run_stage(config: &RunConfig, stage: Stage) -> Result<StageReport> {
    let _lock = WorkdirLock::acquire(&config.workdir)?;
    let start = Instant::now();
    let (inputs, outputs) = stage_io(config, stage)?;
    if up_to_date(config, stage, &inputs, &outputs) {
        eprintln!("{}: up-to-date, skipped", stage.name());
        return Ok(StageReport {
            stage: stage.name().to_string(),
            category: config.category.clone(),
            skipped: true,
            wall_seconds: 0.0,
            outputs,
        });
    }
    match stage {
        Stage::GenMaps => stage_gen_maps(config)?,
        Stage::TrainAppearance => stage_train_appearance(config)?,
        Stage::TrainComposition => stage_train_composition(config)?,
        Stage::TrainGlobal => stage_train_global(config)?,
        Stage::Calibrate => stage_calibrate(config)?,
        Stage::Eval => {
            stage_eval(config)?;
        }
    }
    let wall = start.elapsed().as_secs_f64();
    write_manifest(config, stage, inputs, outputs.clone(), wall)?;
    Ok(StageReport {
        stage: stage.name().to_string(),
        category: config.category.clone(),
        skipped: false,
        wall_seconds: wall,
        outputs,
    })
}

/// Input hashes and expected outputs per stage; also enforces upstream
/// artifact presence.
fn stage_io(config: &RunConfig, stage: Stage) -> Result<(BTreeMap<String, u64>, Vec<PathBuf>)> {
    match stage {
        Stage::GenMaps => {
            let (index, _, _) = effective_splits(config)?;
            let inputs = dataset_input_hashes(&index)?;
            let outputs = vec![segmenter_ckpt(config), cluster_model_path(config)];
            Ok((inputs, outputs))
        }
        Stage::TrainAppearance => {
            let (index, _, _) = effective_splits(config)?;
            let inputs = dataset_input_hashes(&index)?;
            Ok((inputs, vec![appearance_ckpt(config)]))
        }
        Stage::TrainComposition | Stage::TrainGlobal => {
            let (_, train, _) = effective_splits(config)?;
            let paths: Vec<PathBuf> = train.iter().map(|r| cached_map_path(config, r)).collect();
            for p in &paths {
                if !p.exists() {
                    return Err(Error::MissingArtifact {
                        artifact: format!("composition-map cache ({})", p.display()),
                        stage: "gen-maps".into(),
                    });
                }
            }
            let outputs = if stage == Stage::TrainComposition {
                vec![recon_ckpt(config), disc_ckpt(config)]
            } else {
                vec![global_model_path(config)]
            };
            Ok((hash_many(&paths)?, outputs))
        }
        Stage::Calibrate => {
            require_artifact(&appearance_ckpt(config), "appearance checkpoint", "train --branch appearance")?;
            require_artifact(&segmenter_ckpt(config), "segmenter checkpoint", "gen-maps")?;
            require_artifact(&recon_ckpt(config), "composition reconstruction checkpoint", "train --branch composition")?;
            require_artifact(&disc_ckpt(config), "composition discriminator checkpoint", "train --branch composition")?;
            require_artifact(&global_model_path(config), "global Gaussian model", "train --branch global")?;
            let artifacts = vec![
                appearance_ckpt(config),
                segmenter_ckpt(config),
                recon_ckpt(config),
                disc_ckpt(config),
                global_model_path(config),
            ];
            let mut inputs = hash_many(&artifacts)?;
            let (_, _, validation) = effective_splits(config)?;
            let val_paths: Vec<PathBuf> = validation.iter().map(|r| r.path.clone()).collect();
            inputs.extend(hash_many(&val_paths)?);
            Ok((inputs, vec![stats_path(config)]))
        }
        Stage::Eval => {
            require_artifact(&stats_path(config), "calibration statistics", "calibrate")?;
            let artifacts = vec![
                appearance_ckpt(config),
                segmenter_ckpt(config),
                recon_ckpt(config),
                disc_ckpt(config),
                global_model_path(config),
                stats_path(config),
            ];
            for a in &artifacts[..5] {
                require_artifact(a, "model artifact", "train")?;
            }
            let mut inputs = hash_many(&artifacts)?;
            let (index, _, _) = effective_splits(config)?;
            let mut paths: Vec<PathBuf> = index.test.iter().map(|r| r.path.clone()).collect();
            for gt in index.ground_truth.values() {
                paths.extend(gt.region_paths.iter().cloned());
            }
            inputs.extend(hash_many(&paths)?);
            Ok((inputs, vec![eval_report_path(config), scores_csv_path(config)]))
        }
    }
}

fn stage_gen_maps(config: &RunConfig) -> Result<()> {
    let (index, train, validation) = effective_splits(config)?;
    let train_images = load_images(&train)?;

    // Foregrounds first; the sampling plan needs every foreground area.
    let fgs: Vec<_> = {
        let results: Vec<Result<_>> = par::map(train_images.iter().collect(), |img| {
            compgen::compute_foreground_mask(img, &config.backend)
        });
        results.into_iter().collect::<Result<Vec<_>>>()?
    };
    let plan = compgen::plan_cluster_samples(&fgs, config.seed, config.max_cluster_samples);

    // Gather planned foreground feature vectors image by image.
    let gathered: Vec<Result<Vec<f32>>> = par::map((0..train_images.len()).collect(), |i| {
        let features = crate::backends::extract_features(&train_images[i], &config.backend)?;
        let mut points = Vec::new();
        compgen::gather_planned_points(&features, &fgs[i], &plan[i], &mut points);
        Ok(points)
    });
    let mut points: Vec<f32> = Vec::new();
    let mut dim = 0usize;
    let mut backend_id = String::new();
    for (i, g) in gathered.into_iter().enumerate() {
        let g = g?;
        if i == 0 {
            let f = crate::backends::extract_features(&train_images[0], &config.backend)?;
            dim = f.channels;
            backend_id = f.backend_id;
        }
        points.extend(g);
    }
    let cluster_model = crate::cluster::kmeans_fit(&points, dim, config.k, config.seed, 100, &backend_id)?;
    drop(points);

    // Pseudo-labels for the training split.
    let pseudo: Vec<CompositionMap> = {
        let results: Vec<Result<CompositionMap>> = par::map(train_images.iter().collect(), |img| {
            compgen::generate_pseudo_label(img, &config.backend, &cluster_model, config.grid_n)
        });
        results.into_iter().collect::<Result<Vec<_>>>()?
    };
    let pseudo_dir = compmaps_dir(config, "pseudo");
    for (record, map) in train.iter().zip(&pseudo) {
        save_composition_map(map, &pseudo_dir.join(format!("{}.png", record.stem())), Some(config.seed))?;
    }

    // Distill into the component segmenter.
    let images_rgb: Vec<_> = train_images.iter().map(|s| s.pixels.clone()).collect();
    let model = train_component_segmenter(&images_rgb, &pseudo, &config.segmenter)?;
    model.save(&segmenter_ckpt(config))?;
    {
        let path = cluster_model_path(config);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let text =
            serde_json::to_string_pretty(&cluster_model).map_err(|e| Error::Serialization(e.to_string()))?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    drop(pseudo);
    drop(fgs);

    // Final composition maps for every split.
    let mut jobs: Vec<SampleRecord> = Vec::new();
    jobs.extend(train.iter().cloned());
    jobs.extend(validation.iter().cloned());
    jobs.extend(index.test.iter().cloned());
    drop(train_images);
    let inferred: Vec<Result<(SampleRecord, CompositionMap)>> = par::map(jobs, |record| {
        let sample = record.load()?;
        let map = model
            .infer(&sample.pixels)
            .map_err(|e| Error::Dataset(format!("{}: {e}", record.path.display())))?;
        Ok((record, map))
    });
    for item in inferred {
        let (record, map) = item?;
        save_composition_map(&map, &cached_map_path(config, &record), Some(config.seed))?;
    }
    Ok(())
}

fn stage_train_appearance(config: &RunConfig) -> Result<()> {
    let (_, train, _) = effective_splits(config)?;
    let train_images = load_images(&train)?;
    let state = train_appearance(&train_images, &config.appearance, &config.backend)?;
    state.save(&appearance_ckpt(config))
}

fn load_cached_maps(config: &RunConfig, records: &[SampleRecord]) -> Result<Vec<CompositionMap>> {
    let paths: Vec<PathBuf> = records.iter().map(|r| cached_map_path(config, r)).collect();
    for p in &paths {
        if !p.exists() {
            return Err(Error::MissingArtifact {
                artifact: format!("composition-map cache ({})", p.display()),
                stage: "gen-maps".into(),
            });
        }
    }
    let results: Vec<Result<CompositionMap>> = par::map(paths, |p| load_composition_map(&p));
    results.into_iter().collect()
}

fn stage_train_composition(config: &RunConfig) -> Result<()> {
    let (_, train, _) = effective_splits(config)?;
    let maps = load_cached_maps(config, &train)?;
    let (recon, disc) = train_composition_branch(&maps, &config.composition)?;
    recon.save(&recon_ckpt(config))?;
    disc.save(&disc_ckpt(config))
}

fn stage_train_global(config: &RunConfig) -> Result<()> {
    let (_, train, _) = effective_splits(config)?;
    let maps = load_cached_maps(config, &train)?;
    let teacher = Teacher::new(config.backend.clone());
    let descriptors: Vec<_> = {
        let jobs: Vec<(SampleRecord, CompositionMap)> = train.iter().cloned().zip(maps).collect();
        let results: Vec<Result<_>> = par::map(jobs, |(record, map)| {
            let sample = record.load()?;
            let (f_t, _) = teacher.features(&sample)?;
            compute_descriptor(&f_t, &map)
        });
        results.into_iter().collect::<Result<Vec<_>>>()?
    };
    let gaussians = fit_gaussians(&descriptors)?;
    let model = GlobalModel {
        k: config.k,
        dim: descriptors[0].dim,
        backend_id: config.backend.feature_backend.id.clone(),
        gaussians,
    };
    model.save(&global_model_path(config))
}

/// All trained artifacts, loaded for inference.
pub struct LoadedPipeline {
    pub segmenter: SegmenterModel,
    pub recon: CompReconModel,
    pub disc: CompDiscModel,
    pub appearance: AppearanceModelState,
    pub global: GlobalModel,
}

/// Per-image raw scores and maps.
pub struct ImageScores {
    pub a_a: AnomalyMap,
    pub a_c: AnomalyMap,
    pub s_g: f64,
    pub composition: CompositionMap,
    pub raw: (f64, f64, f64),
}

impl LoadedPipeline {
    pub fn load(config: &RunConfig) -> Result<Self> {
        require_artifact(&segmenter_ckpt(config), "segmenter checkpoint", "gen-maps")?;
        require_artifact(&appearance_ckpt(config), "appearance checkpoint", "train --branch appearance")?;
        require_artifact(&recon_ckpt(config), "composition reconstruction checkpoint", "train --branch composition")?;
        require_artifact(&disc_ckpt(config), "composition discriminator checkpoint", "train --branch composition")?;
        require_artifact(&global_model_path(config), "global Gaussian model", "train --branch global")?;
        Ok(LoadedPipeline {
            segmenter: SegmenterModel::load(&segmenter_ckpt(config))?,
            recon: CompReconModel::load(&recon_ckpt(config))?,
            disc: CompDiscModel::load(&disc_ckpt(config))?,
            appearance: AppearanceModelState::load(&appearance_ckpt(config))?,
            global: GlobalModel::load(&global_model_path(config))?,
        })
    }

    /// Run all three branches on one image.
    pub fn score_image(&self, sample: &ImageSample) -> Result<ImageScores> {
        let (a_a, f_t) = self.appearance.anomaly_map(sample)?;
        let composition = self.segmenter.infer(&sample.pixels)?;
        let a_c = composition_anomaly_map(&self.recon, &self.disc, &composition)?;
        let descriptor = compute_descriptor(&f_t, &composition)?;
        let s_g = mahalanobis_score(&descriptor, &self.global.gaussians)?;
        let raw = branch_scores(&a_a, &a_c, s_g)?;
        Ok(ImageScores {
            a_a,
            a_c,
            s_g,
            composition,
            raw,
        })
    }
}

fn stage_calibrate(config: &RunConfig) -> Result<()> {
    let (_, _, validation) = effective_splits(config)?;
    let pipeline = LoadedPipeline::load(config)?;
    let scored: Vec<Result<ImageScores>> = par::map(validation, |record| {
        let sample = record.load()?;
        pipeline.score_image(&sample)
    });
    let scored = scored.into_iter().collect::<Result<Vec<_>>>()?;
    let raw: Vec<(f64, f64, f64)> = scored.iter().map(|s| s.raw).collect();
    let mut stats = calibrate(&raw)?;
    let a_maps: Vec<AnomalyMap> = scored.iter().map(|s| s.a_a.clone()).collect();
    let c_maps: Vec<AnomalyMap> = scored.iter().map(|s| s.a_c.clone()).collect();
    stats.loc = Some(localization_extrema(&a_maps, &c_maps)?);
    let artifact_hashes = [
        hash_file(&appearance_ckpt(config))?,
        hash_file(&segmenter_ckpt(config))?,
        hash_file(&recon_ckpt(config))?,
        hash_file(&disc_ckpt(config))?,
        hash_file(&global_model_path(config))?,
    ];
    stats.source = format!("{:016x}", fnv1a64(format!("{artifact_hashes:?}").as_bytes()));

    let path = stats_path(config);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(&stats).map_err(|e| Error::Serialization(e.to_string()))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub category: String,
    pub pipeline_version: String,
    pub seed: u64,
    pub n_test: usize,
    pub n_good: usize,
    pub n_logical: usize,
    pub n_structural: usize,
    pub disabled_branches: Vec<String>,
    pub auroc_overall: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auroc_logical: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auroc_structural: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auspro: Option<f64>,
}

fn fused_total(fusion: &FusionResult, disabled: &[String]) -> f64 {
    let mut total = 0.0;
    if !disabled.iter().any(|b| b == "appearance") {
        total += fusion.z_a;
    }
    if !disabled.iter().any(|b| b == "composition") {
        total += fusion.z_c;
    }
    if !disabled.iter().any(|b| b == "global") {
        total += fusion.z_g;
    }
    total
}

fn gt_regions_for(
    index: &DatasetIndex,
    record: &SampleRecord,
    map_h: usize,
    map_w: usize,
) -> Result<Vec<GtRegion>> {
    let Some(gt) = index.ground_truth_for(record) else {
        return Err(Error::Dataset(format!(
            "no ground-truth regions for {}",
            record.path.display()
        )));
    };
    if index.defects_config.is_empty() {
        return Err(Error::Dataset("ground truth present but defects_config.json is missing".into()));
    }
    let defect_dir = match record.label {
        SampleLabel::LogicalAnomaly => "logical_anomalies",
        SampleLabel::StructuralAnomaly => "structural_anomalies",
        _ => unreachable!("gt regions only for anomalous records"),
    };
    let defect = index
        .defects_config
        .iter()
        .find(|d| d.defect_name == defect_dir)
        .unwrap_or(&index.defects_config[0]);
    let mut out = Vec::new();
    for path in &gt.region_paths {
        let (mask, h, w) = load_mask(path)?;
        let mask = if h == map_h && w == map_w {
            mask
        } else {
            crate::imaging::resize_nearest(&mask, h, w, map_h, map_w)
        };
        let area = mask.iter().filter(|v| **v).count() as f64;
        if area == 0.0 {
            continue;
        }
        let saturation_area = if defect.relative_saturation {
            (defect.saturation_threshold * area).max(1.0)
        } else {
            defect.saturation_threshold.max(1.0)
        };
        out.push(GtRegion {
            mask,
            saturation_area,
        });
    }
    Ok(out)
}

pub fn stage_eval(config: &RunConfig) -> Result<EvalReport> {
    let (index, _, _) = effective_splits(config)?;
    if index.test.is_empty() {
        return Err(Error::Dataset("empty test split".into()));
    }
    let pipeline = LoadedPipeline::load(config)?;
    let stats: ScoreStats = {
        let path = stats_path(config);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?
    };
    let loc = stats
        .loc
        .ok_or_else(|| Error::Dataset("calibration statistics lack localization extrema".into()))?;

    let scored: Vec<Result<(SampleRecord, ImageScores)>> = par::map(index.test.clone(), |record| {
        let sample = record.load()?;
        let scores = pipeline.score_image(&sample)?;
        Ok((record, scores))
    });
    let scored = scored.into_iter().collect::<Result<Vec<_>>>()?;

    let mut totals = Vec::with_capacity(scored.len());
    let mut labels = Vec::with_capacity(scored.len());
    let mut csv = String::from("path,label,as_a,as_c,as_g,z_a,z_c,z_g,total\n");
    let mut combined_maps = Vec::with_capacity(scored.len());
    for (record, scores) in &scored {
        let fusion = fuse(scores.raw, &stats);
        let total = fused_total(&fusion, &config.disabled_branches);
        totals.push(total);
        labels.push(record.label);
        combined_maps.push(combined_localization_map(&scores.a_a, &scores.a_c, &loc)?);
        let label = match record.label {
            SampleLabel::Good => "good",
            SampleLabel::LogicalAnomaly => "logical_anomaly",
            SampleLabel::StructuralAnomaly => "structural_anomaly",
            SampleLabel::Unknown => "unknown",
        };
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            record.path.display(),
            label,
            fusion.as_a,
            fusion.as_c,
            fusion.as_g,
            fusion.z_a,
            fusion.z_c,
            fusion.z_g,
            total
        ));
    }

    let subset_auroc = |want: Option<SampleLabel>| -> Result<Option<f64>> {
        let mut s = Vec::new();
        let mut l = Vec::new();
        for (i, &label) in labels.iter().enumerate() {
            match label {
                SampleLabel::Good => {
                    s.push(totals[i]);
                    l.push(false);
                }
                other => {
                    if want.is_none() || want == Some(other) {
                        s.push(totals[i]);
                        l.push(true);
                    }
                }
            }
        }
        if l.iter().any(|&x| x) && l.iter().any(|&x| !x) {
            Ok(Some(auroc(&s, &l)?))
        } else {
            Ok(None)
        }
    };

    let auroc_overall = subset_auroc(None)?.ok_or_else(|| {
        Error::Dataset("overall AUROC needs both good and anomalous test samples".into())
    })?;
    let auroc_logical = subset_auroc(Some(SampleLabel::LogicalAnomaly))?;
    let auroc_structural = subset_auroc(Some(SampleLabel::StructuralAnomaly))?;

    let auspro_value = if index.has_ground_truth() {
        let mut regions_per_image = Vec::with_capacity(scored.len());
        for ((record, _), map) in scored.iter().zip(&combined_maps) {
            let regions = match record.label {
                SampleLabel::Good => Vec::new(),
                _ => gt_regions_for(&index, record, map.height, map.width)?,
            };
            regions_per_image.push(regions);
        }
        Some(auspro(&combined_maps, &regions_per_image, config.fpr_limit, MAX_SPRO_THRESHOLDS)?)
    } else {
        None
    };

    let report = EvalReport {
        category: config.category.clone(),
        pipeline_version: crate::PIPELINE_VERSION.to_string(),
        seed: config.seed,
        n_test: scored.len(),
        n_good: labels.iter().filter(|l| **l == SampleLabel::Good).count(),
        n_logical: labels.iter().filter(|l| **l == SampleLabel::LogicalAnomaly).count(),
        n_structural: labels
            .iter()
            .filter(|l| **l == SampleLabel::StructuralAnomaly)
            .count(),
        disabled_branches: config.disabled_branches.clone(),
        auroc_overall,
        auroc_logical,
        auroc_structural,
        auspro: auspro_value,
    };

    let report_path = eval_report_path(config);
    if let Some(parent) = report_path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(&report).map_err(|e| Error::Serialization(e.to_string()))?;
    std::fs::write(&report_path, text).map_err(|e| Error::io(&report_path, e))?;
    std::fs::write(scores_csv_path(config), csv).map_err(|e| Error::io(scores_csv_path(config), e))?;
    Ok(report)
}

/// Score one image and write its maps and scores to `out_dir`.
pub fn infer_image(config: &RunConfig, image_path: &Path, out_dir: &Path) -> Result<FusionResult> {
    let pipeline = LoadedPipeline::load(config)?;
    let stats: ScoreStats = {
        let path = stats_path(config);
        require_artifact(&path, "calibration statistics", "calibrate")?;
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?
    };
    let sample = ImageSample {
        pixels: crate::imaging::ImageRgb::load(image_path)?,
        source_path: image_path.to_path_buf(),
        split: crate::dataset::Split::Test,
        label: SampleLabel::Unknown,
    };
    let scores = pipeline.score_image(&sample)?;
    let fusion = fuse(scores.raw, &stats);

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    save_composition_map(&scores.composition, &out_dir.join("composition.png"), Some(config.seed))?;
    write_gray_visualization(&scores.a_c.scores, scores.a_c.height, scores.a_c.width, &out_dir.join("anomaly_composition.png"))?;
    let a_max = scores.a_a.max().max(1e-12);
    let a_norm: Vec<f32> = scores.a_a.scores.iter().map(|&v| (v as f64 / a_max) as f32).collect();
    write_gray_visualization(&a_norm, scores.a_a.height, scores.a_a.width, &out_dir.join("anomaly_appearance.png"))?;
    if let Some(loc) = &stats.loc {
        let combined = combined_localization_map(&scores.a_a, &scores.a_c, loc)?;
        let c_max = combined.max().max(1e-12);
        let c_norm: Vec<f32> = combined.scores.iter().map(|&v| (v as f64 / c_max) as f32).collect();
        write_gray_visualization(&c_norm, combined.height, combined.width, &out_dir.join("anomaly_combined.png"))?;
    }
    let scores_json = serde_json::json!({
        "image": image_path.to_string_lossy(),
        "as_a": fusion.as_a,
        "as_c": fusion.as_c,
        "as_g": fusion.as_g,
        "z_a": fusion.z_a,
        "z_c": fusion.z_c,
        "z_g": fusion.z_g,
        "total": fusion.total,
    });
    let path = out_dir.join("scores.json");
    std::fs::write(&path, serde_json::to_string_pretty(&scores_json).unwrap())
        .map_err(|e| Error::io(&path, e))?;
    Ok(fusion)
}

fn write_gray_visualization(values: &[f32], h: usize, w: usize, path: &Path) -> Result<()> {
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = (values[y * w + x].clamp(0.0, 1.0) * 255.0).round() as u8;
            img.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    img.save(path).map_err(|e| Error::image(path, e))
}
