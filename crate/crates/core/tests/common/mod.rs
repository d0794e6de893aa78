//! Shared toy-pipeline fixture for the acceptance criteria that need full
//! runs. The main benchmark run executes once and is shared between
//! criteria 4 and 5.

use salad_core::compmap::{load_composition_map, CompositionMap};
use salad_core::dataset::SampleLabel;
use salad_core::pipeline::stages::{cached_map_path, run_stage, stage_eval, EvalReport, Stage};
use salad_core::pipeline::RunConfig;
use salad_core::segmenter::{train_component_segmenter, SegmenterConfig};
use salad_core::toy::{generate_toy_dataset, toy_composition_gt, ToySpec};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

pub struct ToyRun {
    pub config: RunConfig,
    pub index: salad_core::dataset::DatasetIndex,
    pub report_full: EvalReport,
    pub report_ablated: EvalReport,
    pub wall_seconds: f64,
}

fn fresh_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("salad_acceptance_{name}"));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).expect("create temp dir");
    dir
}

/// Desk-scale run configuration: stub backends, shortened schedules, all
/// iteration budgets well under the 5,000-per-branch cap.
pub fn desk_config(dataset_root: &Path, workdir: &Path, seed: u64) -> RunConfig {
    let mut config = RunConfig {
        category: "toy".into(),
        dataset_root: dataset_root.to_path_buf(),
        workdir: workdir.to_path_buf(),
        k: 4,
        ..Default::default()
    };
    config.set("seed", &seed.to_string()).unwrap();
    config.segmenter.epochs = 12;
    config.segmenter.base_width = 12;
    config.segmenter.downsample = 4;
    config.segmenter.learning_rate = 1e-3;
    config.composition.iterations = 1800;
    config.composition.learning_rate = 2e-3;
    config.composition.batch_size = 2;
    config.composition.base_width = 16;
    config.composition.downsample = 8;
    config.appearance.iterations = 1000;
    config.appearance.learning_rate = 1e-3;
    config.appearance.batch_size = 2;
    config.appearance.base_width = 12;
    config
}

fn run_all_stages(config: &RunConfig) {
    for stage in [
        Stage::GenMaps,
        Stage::TrainAppearance,
        Stage::TrainComposition,
        Stage::TrainGlobal,
        Stage::Calibrate,
    ] {
        run_stage(config, stage).unwrap_or_else(|e| panic!("stage {:?} failed: {e}", stage));
    }
}

static TOY_RUN: OnceLock<ToyRun> = OnceLock::new();

/// Benchmark fixture: 200 train / 20 validation / 50 good + 50 logical +
/// 50 structural test images.
pub fn toy_run() -> &'static ToyRun {
    TOY_RUN.get_or_init(|| {
        let data_root = fresh_dir("bench_data");
        let workdir = fresh_dir("bench_work");
        let spec = ToySpec {
            seed: 5,
            ..Default::default()
        };
        let start = Instant::now();
        let index = generate_toy_dataset(&spec, &data_root.join("toy")).expect("toy dataset");
        let config = desk_config(&data_root, &workdir, 7);
        run_all_stages(&config);
        let report_full = stage_eval(&config).expect("eval");

        // Ablation hook: identical pipeline, composition branch excluded
        // from fusion.
        let mut ablated = config.clone();
        ablated.disabled_branches = vec!["composition".into()];
        let report_ablated = stage_eval(&ablated).expect("ablated eval");
        let wall_seconds = start.elapsed().as_secs_f64();

        ToyRun {
            config,
            index,
            report_full,
            report_ablated,
            wall_seconds,
        }
    })
}

/// Mean per-class IoU between inferred maps and constructed truth, with the
/// cluster-to-part permutation resolved by exhaustive matching (cluster
/// indices are arbitrary).
fn mean_per_class_iou(pairs: &[(CompositionMap, CompositionMap)], k: usize) -> f64 {
    // Pool per-(pred, truth) class intersection/union over the corpus.
    let mut inter = vec![0usize; k * k];
    let mut pred_area = vec![0usize; k];
    let mut truth_area = vec![0usize; k];
    for (pred, truth) in pairs {
        assert_eq!(pred.len(), truth.len());
        for (p, (&a, &b)) in pred.classes.iter().zip(&truth.classes).enumerate() {
            let _ = p;
            if a > 0 {
                pred_area[a as usize - 1] += 1;
            }
            if b > 0 {
                truth_area[b as usize - 1] += 1;
            }
            if a > 0 && b > 0 {
                inter[(a as usize - 1) * k + (b as usize - 1)] += 1;
            }
        }
    }
    // Best assignment over all permutations (K is small).
    let mut perm: Vec<usize> = (0..k).collect();
    let mut best = 0.0f64;
    permute(&mut perm, 0, &mut |perm| {
        let mut total = 0.0;
        for (pred_c, &truth_c) in perm.iter().enumerate() {
            let i = inter[pred_c * k + truth_c] as f64;
            let u = (pred_area[pred_c] + truth_area[truth_c]) as f64 - i;
            total += if u > 0.0 { i / u } else { 0.0 };
        }
        best = best.max(total / k as f64);
    });
    best
}

fn permute(perm: &mut Vec<usize>, i: usize, visit: &mut impl FnMut(&[usize])) {
    if i == perm.len() {
        visit(perm);
        return;
    }
    for j in i..perm.len() {
        perm.swap(i, j);
        permute(perm, i + 1, visit);
        perm.swap(i, j);
    }
}

pub fn criterion_4_impl(run: &ToyRun) {
    // Final inferred maps vs constructed ground truth on held-out good
    // test images.
    let good_records: Vec<_> = run
        .index
        .test
        .iter()
        .filter(|r| r.label == SampleLabel::Good)
        .cloned()
        .collect();
    assert!(!good_records.is_empty());
    let pairs: Vec<(CompositionMap, CompositionMap)> = good_records
        .iter()
        .map(|r| {
            let pred = load_composition_map(&cached_map_path(&run.config, r)).expect("cached map");
            let truth = toy_composition_gt(&run.index, r).expect("constructed truth");
            (pred, truth)
        })
        .collect();
    let iou = mean_per_class_iou(&pairs, run.config.k);
    assert!(iou >= 0.8, "mean per-class IoU {iou:.3} below 0.8");

    // Distillation denoises: train on deliberately corrupted pseudo-labels;
    // the model's output must carry strictly fewer mislabeled pixels than
    // the corrupted labels themselves.
    let train_records = &run.index.train[..50.min(run.index.train.len())];
    let images: Vec<_> = train_records
        .iter()
        .map(|r| r.load().expect("load").pixels)
        .collect();
    let truths: Vec<CompositionMap> = train_records
        .iter()
        .map(|r| toy_composition_gt(&run.index, r).expect("truth"))
        .collect();
    // Corrupt every other pseudo-label: flip one part's class and paint a
    // large wrong-class rectangle at an index-dependent position. The
    // corruption must exceed the desk-scale model's boundary-quantization
    // floor for the comparison to be meaningful.
    let mut corrupted = truths.clone();
    let mut corrupted_errors = 0usize;
    for (i, map) in corrupted.iter_mut().enumerate() {
        if i % 2 != 0 {
            continue;
        }
        let truth = &truths[i];
        let from = 1 + (i / 2) as u16 % run.config.k as u16;
        let to = 1 + (from as usize % run.config.k) as u16;
        for c in map.classes.iter_mut() {
            if *c == from {
                *c = to;
            }
        }
        let side = 72usize;
        let y0 = 20 + (i * 17) % (map.height - side - 40);
        let x0 = 20 + (i * 29) % (map.width - side - 40);
        let wrong = 1 + ((i / 2 + 1) % run.config.k) as u16;
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                map.set(y, x, wrong);
            }
        }
        corrupted_errors += map.diff_count(truth);
    }
    assert!(corrupted_errors > 0);
    let seg_config = SegmenterConfig {
        epochs: 12,
        learning_rate: 1e-3,
        batch_size: 8,
        base_width: 12,
        downsample: 4,
        seed: 11,
        ..Default::default()
    };
    let model = train_component_segmenter(&images, &corrupted, &seg_config).expect("distillation train");
    let mut inferred_errors = 0usize;
    for (img, truth) in images.iter().zip(&truths) {
        let pred = model.infer(img).expect("infer");
        inferred_errors += pred.diff_count(truth);
    }
    assert!(
        inferred_errors < corrupted_errors,
        "distillation did not denoise: inferred {inferred_errors} vs corrupted {corrupted_errors}"
    );

    println!(
        "ACCEPTANCE criterion 4 (composition-map pipeline): PASS (mean IoU {iou:.3}, distillation {inferred_errors} < {corrupted_errors} mislabeled px)"
    );
}

pub fn criterion_5_impl(run: &ToyRun) {
    let full = &run.report_full;
    let ablated = &run.report_ablated;
    let logical = full.auroc_logical.expect("logical subset present");
    let ablated_logical = ablated.auroc_logical.expect("logical subset present");
    assert!(
        full.auroc_overall >= 0.90,
        "overall AUROC {:.4} below 0.90",
        full.auroc_overall
    );
    assert!(logical >= 0.85, "logical AUROC {logical:.4} below 0.85");
    assert!(
        ablated_logical < logical,
        "dropping the composition branch did not lower logical AUROC ({ablated_logical:.4} vs {logical:.4})"
    );
    assert!(
        run.wall_seconds <= 1800.0,
        "toy benchmark took {:.0}s (> 30 min)",
        run.wall_seconds
    );
    println!(
        "ACCEPTANCE criterion 5 (end-to-end toy benchmark): PASS (overall {:.4}, logical {:.4}, structural {:?}, w/o composition logical {:.4}, {:.0}s)",
        full.auroc_overall, logical, full.auroc_structural, ablated_logical, run.wall_seconds
    );
}

pub fn criterion_7_impl() {
    // Two full (small) pipeline runs with identical seeds; composition
    // maps, synthetic samples and eval reports must be byte-identical.
    let data_root = fresh_dir("det_data");
    let mut spec = ToySpec {
        train: 30,
        validation: 6,
        test_good: 6,
        test_logical: 6,
        test_structural: 6,
        seed: 21,
        ..Default::default()
    };
    // Larger parts keep every class learnable at this tiny training budget.
    spec.parts[1].size = 22.0;
    spec.parts[3].size = 21.0;
    let index = generate_toy_dataset(&spec, &data_root.join("toy")).expect("toy dataset");

    let mut reports = Vec::new();
    let mut workdirs = Vec::new();
    for run_idx in 0..2 {
        let workdir = fresh_dir(&format!("det_work_{run_idx}"));
        let mut config = desk_config(&data_root, &workdir, 13);
        config.segmenter.epochs = 15;
        config.segmenter.learning_rate = 3e-3;
        config.segmenter.batch_size = 2;
        config.composition.iterations = 120;
        config.appearance.iterations = 120;
        run_all_stages(&config);
        let _ = stage_eval(&config).expect("eval");
        workdirs.push(workdir);
        reports.push(config);
    }

    // Byte-identical composition-map cache.
    let mut compared = 0usize;
    for record in index.train.iter().chain(&index.test) {
        let a = cached_map_path(&reports[0], record);
        let b = cached_map_path(&reports[1], record);
        if a.exists() {
            assert_eq!(
                std::fs::read(&a).unwrap(),
                std::fs::read(&b).unwrap(),
                "composition map differs: {}",
                a.display()
            );
            compared += 1;
        }
    }
    assert!(compared > 20, "compared only {compared} cached maps");

    // Byte-identical eval report and score CSV.
    for name in ["reports/toy.eval.json", "reports/toy.scores.csv"] {
        let a = std::fs::read(workdirs[0].join(name)).unwrap();
        let b = std::fs::read(workdirs[1].join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between runs");
    }

    // Byte-identical synthetic samples for matching seeds.
    let maps: Vec<CompositionMap> = index.train[..6]
        .iter()
        .map(|r| toy_composition_gt(&index, r).unwrap())
        .collect();
    for seed in 0..50u64 {
        let a = salad_core::simulate::sample_training_example(&maps[0], &maps, Some(0), seed).unwrap();
        let b = salad_core::simulate::sample_training_example(&maps[0], &maps, Some(0), seed).unwrap();
        assert_eq!(a.kind, b.kind);
        assert_eq!(a.augmented.classes, b.augmented.classes);
        assert_eq!(a.gt_mask, b.gt_mask);
    }

    // The determinism contract extends to masks on disk.
    let dir_a = fresh_dir("det_sim_a");
    let dir_b = fresh_dir("det_sim_b");
    for (dir, _) in [(&dir_a, 0), (&dir_b, 1)] {
        let s = salad_core::simulate::simulate_structural(&maps[0], 99).unwrap();
        salad_core::compmap::save_composition_map(&s.augmented, &dir.join("aug.png"), Some(99)).unwrap();
        salad_core::compmap::save_mask(&s.gt_mask, s.augmented.height, s.augmented.width, &dir.join("gt.png"))
            .unwrap();
    }
    for name in ["aug.png", "gt.png"] {
        assert_eq!(
            std::fs::read(dir_a.join(name)).unwrap(),
            std::fs::read(dir_b.join(name)).unwrap()
        );
    }

    println!("ACCEPTANCE criterion 7 (determinism): PASS ({compared} maps, reports and synthetic samples byte-identical)");
}
