//! Parallel-vs-sequential comparison for the data-parallel inner loops:
//! batch feature extraction, synthetic sample generation, mask generation
//! and batched network forward passes. The parallel path is what the
//! pipeline uses when the `parallel` feature (default) is on; the `_seq`
//! baselines always run sequentially in the same build.

use criterion::{criterion_group, criterion_main, Criterion};
use salad_core::backends::{extract_features, BackendConfig};
use salad_core::compmap::CompositionMap;
use salad_core::dataset::ImageSample;
use salad_core::imaging::ImageRgb;
use salad_core::nn::{ParamSet, Tensor, UNet, UNetConfig};
use salad_core::perlin::perlin_mask;
use salad_core::simulate::sample_training_example;
use salad_core::{par, toy};
use std::hint::black_box;

fn toy_images(n: usize) -> Vec<ImageSample> {
    let spec = toy::ToySpec {
        train: n,
        validation: 0,
        test_good: 0,
        test_logical: 0,
        test_structural: 0,
        ..Default::default()
    };
    let dir = std::env::temp_dir().join("salad_bench_toy");
    let _ = std::fs::remove_dir_all(&dir);
    let index = toy::generate_toy_dataset(&spec, &dir).expect("toy dataset");
    index.train.iter().map(|r| r.load().expect("load")).collect()
}

fn toy_maps(n: usize) -> Vec<CompositionMap> {
    let mut maps = Vec::new();
    for i in 0..n {
        let mut m = CompositionMap::zeros(256, 256, 4);
        for y in 40 + i..110 + i {
            for x in 40..110 {
                m.set(y, x, 1);
            }
        }
        for y in 140..210 {
            for x in 120 + i..200 + i {
                m.set(y, x, 2);
            }
        }
        maps.push(m);
    }
    maps
}

fn bench_feature_extraction(c: &mut Criterion) {
    let images = toy_images(8);
    let config = BackendConfig::default();
    let mut group = c.benchmark_group("feature_extraction_batch8");
    group.sample_size(10);
    group.bench_function("parallel", |b| {
        b.iter(|| {
            let out = par::map(images.iter().collect::<Vec<_>>(), |img| {
                extract_features(img, &config).unwrap()
            });
            black_box(out.len())
        })
    });
    group.bench_function("sequential", |b| {
        b.iter(|| {
            let out = par::map_seq(images.iter().collect::<Vec<_>>(), |img| {
                extract_features(img, &config).unwrap()
            });
            black_box(out.len())
        })
    });
    group.finish();
}

fn bench_simulator(c: &mut Criterion) {
    let maps = toy_maps(4);
    let mut group = c.benchmark_group("synthetic_samples_batch32");
    group.sample_size(10);
    group.bench_function("parallel", |b| {
        b.iter(|| {
            let out = par::map_indices(32, |i| {
                sample_training_example(&maps[i % maps.len()], &maps, Some(i % maps.len()), i as u64)
                    .unwrap()
                    .gt_area()
            });
            black_box(out)
        })
    });
    group.bench_function("sequential", |b| {
        b.iter(|| {
            let out = par::map_seq_indices(32, |i| {
                sample_training_example(&maps[i % maps.len()], &maps, Some(i % maps.len()), i as u64)
                    .unwrap()
                    .gt_area()
            });
            black_box(out)
        })
    });
    group.finish();
}

fn bench_perlin(c: &mut Criterion) {
    let mut group = c.benchmark_group("perlin_masks_batch64");
    group.sample_size(10);
    group.bench_function("parallel", |b| {
        b.iter(|| {
            let out = par::map_indices(64, |i| perlin_mask(256, 256, i as u64).len());
            black_box(out)
        })
    });
    group.bench_function("sequential", |b| {
        b.iter(|| {
            let out = par::map_seq_indices(64, |i| perlin_mask(256, 256, i as u64).len());
            black_box(out)
        })
    });
    group.finish();
}

fn bench_unet_forward(c: &mut Criterion) {
    let mut params = ParamSet::with_seed(1);
    let net = UNet::new(
        &mut params,
        "bench",
        UNetConfig {
            in_channels: 5,
            out_channels: 5,
            base_width: 16,
        },
    );
    let inputs: Vec<Tensor> = (0..8).map(|_| Tensor::zeros(5, 64, 64)).collect();
    let mut group = c.benchmark_group("unet_forward_batch8");
    group.sample_size(10);
    group.bench_function("parallel", |b| {
        b.iter(|| {
            let out = par::map(inputs.clone(), |x| net.infer(&params, x).data[0]);
            black_box(out)
        })
    });
    group.bench_function("sequential", |b| {
        b.iter(|| {
            let out = par::map_seq(inputs.clone(), |x| net.infer(&params, x).data[0]);
            black_box(out)
        })
    });
    group.finish();
}

fn bench_image_resize(c: &mut Criterion) {
    let images: Vec<ImageRgb> = (0..8).map(|i| ImageRgb::filled(512, 512, [i as f32 / 8.0; 3])).collect();
    let mut group = c.benchmark_group("bilinear_resize_batch8");
    group.sample_size(10);
    group.bench_function("parallel", |b| {
        b.iter(|| {
            let out = par::map(images.clone(), |img| img.resize_bilinear(256, 256).data[0]);
            black_box(out)
        })
    });
    group.bench_function("sequential", |b| {
        b.iter(|| {
            let out = par::map_seq(images.clone(), |img| img.resize_bilinear(256, 256).data[0]);
            black_box(out)
        })
    });
    group.finish();
}

criterion_group!(
    benches,
    bench_feature_extraction,
    bench_simulator,
    bench_perlin,
    bench_unet_forward,
    bench_image_resize
);
criterion_main!(benches);
