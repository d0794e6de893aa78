//! Local appearance branch: a frozen teacher feature mapper, a student that
//! reconstructs both the teacher output and the autoencoder output, and an
//! autoencoder that reconstructs the teacher output through a spatial
//! bottleneck. The anomaly map is the mean of the two channel-averaged
//! squared-difference maps.
//!
//! The branch is swappable: anything producing a finite anomaly map plus a
//! dense teacher feature map satisfies the pipeline contract.

use crate::backends::{create_feature_backend, BackendConfig, FeatureMap};
use crate::compmap::{AnomalyMap, ValueRange};
use crate::dataset::ImageSample;
use crate::error::{Error, Result};
use crate::imaging::resize_bilinear_plane;
use crate::losses::mse_with_grad;
use crate::nn::conv::Conv2d;
use crate::nn::ops::{avgpool, maxpool2, maxpool2_backward, relu, relu_backward, upsample2, upsample2_backward};
use crate::nn::{load_checkpoint, save_checkpoint, Adam, GradSet, LrSchedule, ParamSet, Tensor};
use crate::par;
use crate::segmenter::image_to_tensor;
use rand::prelude::*;
use rand_pcg::Pcg64Mcg;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Teacher (and branch-internal) spatial resolution.
pub const TEACHER_RES: usize = 64;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AppearanceConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub decay_fraction: f64,
    pub decay_factor: f64,
    pub batch_size: usize,
    pub base_width: usize,
    pub seed: u64,
}

impl Default for AppearanceConfig {
    fn default() -> Self {
        AppearanceConfig {
            iterations: 70_000,
            learning_rate: 1e-4,
            decay_fraction: 0.9,
            decay_factor: 0.1,
            batch_size: 1,
            base_width: 32,
            seed: 0,
        }
    }
}

/// Frozen teacher: the configured perception backend resized to the branch
/// resolution. Carries no trainable parameters.
pub struct Teacher {
    backend_config: BackendConfig,
}

impl Teacher {
    pub fn new(backend_config: BackendConfig) -> Self {
        Teacher { backend_config }
    }

    /// Teacher features as both the dense map (for the global branch) and
    /// the channel-major tensor (for the branch losses).
    pub fn features(&self, image: &ImageSample) -> Result<(FeatureMap, Tensor)> {
        let backend = create_feature_backend(&self.backend_config)?;
        let raw = backend.extract(image)?;
        let fm = raw.resize_bilinear(TEACHER_RES, TEACHER_RES);
        let d = fm.channels;
        let hw = TEACHER_RES * TEACHER_RES;
        let mut t = Tensor::zeros(d, TEACHER_RES, TEACHER_RES);
        for p in 0..hw {
            for c in 0..d {
                t.data[c * hw + p] = fm.data[p * d + c];
            }
        }
        Ok((fm, t))
    }
}

#[derive(Debug)]
enum Layer {
    Conv(Conv2d),
    Relu,
    Pool,
    Up,
}

enum LayerCache {
    Conv(Tensor),
    Relu(Tensor),
    Pool(Vec<u32>, usize, usize, usize),
    Up,
}

/// Plain sequential conv net used for the student and the autoencoder.
#[derive(Debug)]
struct ConvStack {
    layers: Vec<Layer>,
}

impl ConvStack {
    fn forward(&self, params: &ParamSet, mut x: Tensor) -> (Tensor, Vec<LayerCache>) {
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            match layer {
                Layer::Conv(conv) => {
                    let y = conv.forward(params, &x);
                    caches.push(LayerCache::Conv(x));
                    x = y;
                }
                Layer::Relu => {
                    x = relu(&x);
                    caches.push(LayerCache::Relu(x.clone()));
                }
                Layer::Pool => {
                    let (c, h, w) = (x.c, x.h, x.w);
                    let (y, idx) = maxpool2(&x);
                    caches.push(LayerCache::Pool(idx, c, h, w));
                    x = y;
                }
                Layer::Up => {
                    x = upsample2(&x);
                    caches.push(LayerCache::Up);
                }
            }
        }
        (x, caches)
    }

    fn backward(&self, params: &ParamSet, caches: &[LayerCache], mut dy: Tensor, grads: &mut GradSet) -> Tensor {
        for (layer, cache) in self.layers.iter().zip(caches).rev() {
            dy = match (layer, cache) {
                (Layer::Conv(conv), LayerCache::Conv(x)) => conv.backward(params, x, &dy, grads),
                (Layer::Relu, LayerCache::Relu(y)) => relu_backward(&dy, y),
                (Layer::Pool, LayerCache::Pool(idx, c, h, w)) => maxpool2_backward(&dy, idx, *c, *h, *w),
                (Layer::Up, LayerCache::Up) => upsample2_backward(&dy),
                _ => unreachable!("layer/cache mismatch"),
            };
        }
        dy
    }

    fn infer(&self, params: &ParamSet, x: Tensor) -> Tensor {
        self.forward(params, x).0
    }
}

fn build_student(params: &mut ParamSet, width: usize, channels: usize) -> ConvStack {
    ConvStack {
        layers: vec![
            Layer::Conv(Conv2d::new(params, "student.c0", 3, width, 3)),
            Layer::Relu,
            Layer::Conv(Conv2d::new(params, "student.c1", width, width, 3)),
            Layer::Relu,
            Layer::Conv(Conv2d::new(params, "student.c2", width, width, 3)),
            Layer::Relu,
            Layer::Conv(Conv2d::new(params, "student.head", width, 2 * channels, 1)),
        ],
    }
}

fn build_autoencoder(params: &mut ParamSet, width: usize, channels: usize) -> ConvStack {
    ConvStack {
        layers: vec![
            Layer::Conv(Conv2d::new(params, "ae.e0", 3, width, 3)),
            Layer::Relu,
            Layer::Pool,
            Layer::Conv(Conv2d::new(params, "ae.e1", width, width, 3)),
            Layer::Relu,
            Layer::Pool,
            Layer::Conv(Conv2d::new(params, "ae.e2", width, width, 3)),
            Layer::Relu,
            Layer::Pool,
            Layer::Conv(Conv2d::new(params, "ae.b", width, width, 3)),
            Layer::Relu,
            Layer::Up,
            Layer::Conv(Conv2d::new(params, "ae.d0", width, width, 3)),
            Layer::Relu,
            Layer::Up,
            Layer::Conv(Conv2d::new(params, "ae.d1", width, width, 3)),
            Layer::Relu,
            Layer::Up,
            Layer::Conv(Conv2d::new(params, "ae.d2", width, width, 3)),
            Layer::Relu,
            Layer::Conv(Conv2d::new(params, "ae.head", width, channels, 1)),
        ],
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AppearanceManifest {
    pub config: AppearanceConfig,
    pub backend_config: BackendConfig,
    pub channels: usize,
    pub decay_at: usize,
    pub loss_curve: Vec<f64>,
}

/// Trained branch state. The teacher stays frozen; the parameter set holds
/// the student and autoencoder weights (student output channel count is
/// teacher channels + autoencoder channels).
pub struct AppearanceModelState {
    pub teacher: Teacher,
    student: ConvStack,
    ae: ConvStack,
    pub params: ParamSet,
    pub manifest: AppearanceManifest,
}

fn branch_input(image: &ImageSample) -> Tensor {
    let t = image_to_tensor(&image.pixels);
    let factor = t.h / TEACHER_RES;
    if factor > 1 {
        avgpool(&t, factor)
    } else {
        t
    }
}

/// Train the student and autoencoder against the frozen teacher.
pub fn train_appearance(
    images: &[ImageSample],
    config: &AppearanceConfig,
    backend_config: &BackendConfig,
) -> Result<AppearanceModelState> {
    if images.is_empty() {
        return Err(Error::InvalidArgument {
            arg: "images",
            reason: "empty anomaly-free corpus".into(),
        });
    }
    let teacher = Teacher::new(backend_config.clone());
    // Teacher features are frozen; compute them once.
    let teacher_maps: Vec<Tensor> = {
        let results: Vec<Result<Tensor>> =
            par::map(images.iter().collect(), |img| Ok(teacher.features(img)?.1));
        results.into_iter().collect::<Result<Vec<_>>>()?
    };
    let inputs: Vec<Tensor> = par::map(images.iter().collect(), branch_input);
    let channels = teacher_maps[0].c;

    let mut params = ParamSet::with_seed(config.seed.wrapping_add(7));
    let student = build_student(&mut params, config.base_width, channels);
    let ae = build_autoencoder(&mut params, config.base_width, channels);
    let mut opt = Adam::plain(&params, config.learning_rate);
    let schedule = LrSchedule::step_decay(config.iterations, config.decay_fraction, config.decay_factor);
    let mut rng = Pcg64Mcg::seed_from_u64(config.seed ^ 0xae0f);

    let n = images.len();
    let curve_buckets = 10usize;
    let mut loss_curve = vec![0.0f64; curve_buckets];
    let mut curve_counts = vec![0usize; curve_buckets];

    for iter in 0..config.iterations {
        let batch: Vec<usize> = (0..config.batch_size).map(|_| rng.random_range(0..n)).collect();
        let results: Vec<(f64, GradSet)> = par::map(batch, |i| {
            let f_t = &teacher_maps[i];
            let hw = f_t.h * f_t.w;
            let (student_out, student_cache) = student.forward(&params, inputs[i].clone());
            let (f_a, ae_cache) = ae.forward(&params, inputs[i].clone());

            let s_t = Tensor::from_data(channels, f_t.h, f_t.w, student_out.data[..channels * hw].to_vec());
            let s_a = Tensor::from_data(channels, f_t.h, f_t.w, student_out.data[channels * hw..].to_vec());

            // Student imitates the teacher; AE reconstructs the teacher;
            // the student's second head tracks the (detached) AE output.
            let (l_st, d_st) = mse_with_grad(&s_t, f_t);
            let (l_ae, d_ae) = mse_with_grad(&f_a, f_t);
            let (l_sa, d_sa) = mse_with_grad(&s_a, &f_a);

            let mut d_student = Tensor::zeros(2 * channels, f_t.h, f_t.w);
            d_student.data[..channels * hw].copy_from_slice(&d_st.data);
            d_student.data[channels * hw..].copy_from_slice(&d_sa.data);

            let mut grads = GradSet::zeros_like(&params);
            student.backward(&params, &student_cache, d_student, &mut grads);
            ae.backward(&params, &ae_cache, d_ae, &mut grads);
            (l_st + l_ae + l_sa, grads)
        });

        let mut total = GradSet::zeros_like(&params);
        let mut loss_sum = 0.0;
        for (loss, g) in &results {
            loss_sum += loss;
            total.add(g);
        }
        let mean_loss = loss_sum / config.batch_size as f64;
        if !mean_loss.is_finite() {
            return Err(Error::Divergence(format!("appearance loss non-finite at iteration {iter}")));
        }
        total.scale(1.0 / config.batch_size as f32);
        opt.step(&mut params, &total, schedule.scale_at(iter));

        let bucket = (iter * curve_buckets / config.iterations).min(curve_buckets - 1);
        loss_curve[bucket] += mean_loss;
        curve_counts[bucket] += 1;
    }
    for (l, &c) in loss_curve.iter_mut().zip(&curve_counts) {
        if c > 0 {
            *l /= c as f64;
        }
    }

    Ok(AppearanceModelState {
        teacher,
        student,
        ae,
        params,
        manifest: AppearanceManifest {
            config: config.clone(),
            backend_config: backend_config.clone(),
            channels,
            decay_at: schedule.decay_at,
            loss_curve,
        },
    })
}

impl AppearanceModelState {
    /// Anomaly map plus the teacher features (reused by the global branch).
    ///
    /// The map is the mean of the student-teacher and student-autoencoder
    /// channel-averaged squared differences, upsampled to image resolution.
    pub fn anomaly_map(&self, image: &ImageSample) -> Result<(AnomalyMap, FeatureMap)> {
        let (f_t_map, f_t) = self.teacher.features(image)?;
        let channels = self.manifest.channels;
        let hw = f_t.h * f_t.w;
        let input = branch_input(image);
        let student_out = self.student.infer(&self.params, input.clone());
        let f_a = self.ae.infer(&self.params, input);

        let mut scores = vec![0.0f32; hw];
        for p in 0..hw {
            let mut st = 0.0f32;
            let mut ae = 0.0f32;
            for c in 0..channels {
                let dt = f_t.data[c * hw + p] - student_out.data[c * hw + p];
                st += dt * dt;
                let da = f_a.data[c * hw + p] - student_out.data[(channels + c) * hw + p];
                ae += da * da;
            }
            scores[p] = 0.5 * (st + ae) / channels as f32;
        }
        let up = resize_bilinear_plane(&scores, f_t.h, f_t.w, image.pixels.height, image.pixels.width);
        let map = AnomalyMap::new(image.pixels.height, image.pixels.width, up, ValueRange::NonNegative)?;
        Ok((map, f_t_map))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let manifest = serde_json::to_value(&self.manifest).map_err(|e| Error::Serialization(e.to_string()))?;
        save_checkpoint(path, &manifest, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (manifest, params) = load_checkpoint(path)?;
        let manifest: AppearanceManifest =
            serde_json::from_value(manifest).map_err(|e| Error::corrupt(path, e.to_string()))?;
        let mut shadow = ParamSet::with_seed(0);
        let student = build_student(&mut shadow, manifest.config.base_width, manifest.channels);
        let ae = build_autoencoder(&mut shadow, manifest.config.base_width, manifest.channels);
        if shadow.params.len() != params.params.len() {
            return Err(Error::corrupt(path, "parameter count mismatch"));
        }
        Ok(AppearanceModelState {
            teacher: Teacher::new(manifest.backend_config.clone()),
            student,
            ae,
            params,
            manifest,
        })
    }
}
