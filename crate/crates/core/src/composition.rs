//! Discriminative composition branch: a reconstruction network restores
//! anomaly-free composition maps and a discrimination network predicts the
//! anomaly map from the pair.
//!
//! Training feeds synthetically augmented maps through the reconstruction
//! network (focal + dice against the clean map) and trains the discriminator
//! on the concatenated one-hot pair against the synthetic ground truth
//! (weighted binary focal + L1). At inference the clean map `C` itself is
//! the input; the only inference entry point takes `C` alone.

use crate::compmap::{AnomalyMap, CompositionMap, ValueRange};
use crate::error::{Error, Result};
use crate::imaging::resize_bilinear_plane;
use crate::losses;
use crate::nn::ops::concat;
use crate::nn::{load_checkpoint, save_checkpoint, Adam, GradSet, LrSchedule, ParamSet, Tensor, UNet, UNetConfig};
use crate::par;
use crate::simulate::{sample_training_example, SyntheticSample};
use rand::prelude::*;
use rand_pcg::Pcg64Mcg;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const DEFAULT_FOCAL_GAMMA: f64 = 2.0;
pub const DEFAULT_DISC_ALPHA: f64 = 5.0;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CompositionConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub decay_fraction: f64,
    pub decay_factor: f64,
    pub batch_size: usize,
    /// Weight on the focal term of the discriminator loss.
    pub alpha: f64,
    pub gamma: f64,
    pub base_width: usize,
    /// Integer factor between map resolution and network resolution.
    pub downsample: usize,
    /// Feed the discriminator softmax probabilities instead of the argmax
    /// one-hot reconstruction.
    pub soft_disc_input: bool,
    pub seed: u64,
}

impl Default for CompositionConfig {
    fn default() -> Self {
        CompositionConfig {
            iterations: 70_000,
            learning_rate: 1e-5,
            decay_fraction: 0.9,
            decay_factor: 0.1,
            batch_size: 1,
            alpha: DEFAULT_DISC_ALPHA,
            gamma: DEFAULT_FOCAL_GAMMA,
            base_width: 64,
            downsample: 1,
            soft_disc_input: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompositionManifest {
    pub config: CompositionConfig,
    pub num_classes: usize,
    pub role: String,
    pub decay_at: usize,
    /// Mean loss over each tenth of training.
    pub loss_curve: Vec<f64>,
}

/// Composition reconstruction network (one-hot map in, class logits out).
#[derive(Debug)]
pub struct CompReconModel {
    pub net: UNet,
    pub params: ParamSet,
    pub manifest: CompositionManifest,
}

/// Composition discrimination network (concatenated one-hot pair in, one
/// anomaly probability channel out).
#[derive(Debug)]
pub struct CompDiscModel {
    pub net: UNet,
    pub params: ParamSet,
    pub manifest: CompositionManifest,
}

/// Reconstruction loss: focal (on softmax probabilities) plus dice.
pub fn recon_loss(target: &[u16], logits: &[f64], c: usize, hw: usize) -> Result<f64> {
    Ok(recon_loss_with_grad(target, logits, c, hw)?.0)
}

/// Loss and dL/dlogits.
pub fn recon_loss_with_grad(target: &[u16], logits: &[f64], c: usize, hw: usize) -> Result<(f64, Vec<f64>)> {
    let probs = losses::softmax_channels(logits, c, hw);
    let (lf, gf) = losses::focal_multiclass_with_grad(&probs, c, hw, target, DEFAULT_FOCAL_GAMMA)?;
    let (ld, gd) = losses::dice_loss_with_grad(&probs, c, hw, target)?;
    let dprobs: Vec<f64> = gf.iter().zip(&gd).map(|(a, b)| a + b).collect();
    let dlogits = losses::softmax_grad_chain(&probs, &dprobs, c, hw);
    Ok((lf + ld, dlogits))
}

/// Discriminator loss: `alpha * focal_binary + L1`.
pub fn disc_loss(gt_mask: &[bool], pred: &[f64], alpha: f64) -> Result<f64> {
    Ok(disc_loss_with_grad(gt_mask, pred, alpha)?.0)
}

pub fn disc_loss_with_grad(gt_mask: &[bool], pred: &[f64], alpha: f64) -> Result<(f64, Vec<f64>)> {
    if pred.iter().any(|v| !v.is_finite() || !(0.0..=1.0).contains(v)) {
        return Err(Error::Numeric("discriminator predictions outside [0, 1]".into()));
    }
    let (lf, gf) = losses::focal_binary_with_grad(pred, gt_mask, DEFAULT_FOCAL_GAMMA)?;
    let target: Vec<f64> = gt_mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let (l1, g1) = losses::l1_loss_with_grad(pred, &target);
    let grad: Vec<f64> = gf.iter().zip(&g1).map(|(a, b)| alpha * a + b).collect();
    Ok((alpha * lf + l1, grad))
}

fn one_hot_tensor(map: &CompositionMap) -> Tensor {
    Tensor::from_data(map.num_classes, map.height, map.width, map.one_hot())
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

fn net_resolution(map: &CompositionMap, downsample: usize) -> CompositionMap {
    if downsample > 1 {
        map.resize_nearest(map.height / downsample, map.width / downsample)
    } else {
        map.clone()
    }
}

impl CompReconModel {
    /// Restore the anomaly-free composition; returns the argmax map at input
    /// resolution and the softmax probabilities at network resolution.
    pub fn reconstruct(&self, c_in: &CompositionMap) -> Result<(CompositionMap, Tensor)> {
        if c_in.num_classes != self.manifest.num_classes {
            return Err(Error::Shape(format!(
                "map has {} classes, model expects {}",
                c_in.num_classes, self.manifest.num_classes
            )));
        }
        let ds = self.manifest.config.downsample;
        let c_net = net_resolution(c_in, ds);
        let logits = self.net.infer(&self.params, one_hot_tensor(&c_net));
        logits.assert_finite("reconstruction logits")?;
        let (c, h, w) = (logits.c, logits.h, logits.w);
        let hw = h * w;
        let logits64: Vec<f64> = logits.data.iter().map(|v| *v as f64).collect();
        let probs64 = losses::softmax_channels(&logits64, c, hw);
        let probs = Tensor::from_data(c, h, w, probs64.iter().map(|v| *v as f32).collect());
        let mut classes = vec![0u16; hw];
        for p in 0..hw {
            let mut best = 0usize;
            let mut best_v = probs.data[p];
            for ch in 1..c {
                if probs.data[ch * hw + p] > best_v {
                    best_v = probs.data[ch * hw + p];
                    best = ch;
                }
            }
            classes[p] = best as u16;
        }
        let rec_net = CompositionMap::new(h, w, classes, c)?;
        let rec = if ds > 1 {
            rec_net.resize_nearest(c_in.height, c_in.width)
        } else {
            rec_net
        };
        Ok((rec, probs))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let manifest = serde_json::to_value(&self.manifest).map_err(|e| Error::Serialization(e.to_string()))?;
        save_checkpoint(path, &manifest, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (manifest, params) = load_checkpoint(path)?;
        let manifest: CompositionManifest =
            serde_json::from_value(manifest).map_err(|e| Error::corrupt(path, e.to_string()))?;
        let net = build_recon_net(&mut ParamSet::with_seed(0), manifest.num_classes, manifest.config.base_width);
        Ok(CompReconModel { net, params, manifest })
    }
}

impl CompDiscModel {
    /// Anomaly map from the input map and its reconstruction.
    pub fn discriminate(&self, c_in: &CompositionMap, c_rec: &CompositionMap) -> Result<AnomalyMap> {
        if c_in.height != c_rec.height || c_in.width != c_rec.width || c_in.num_classes != c_rec.num_classes {
            return Err(Error::Shape("input and reconstruction shapes differ".into()));
        }
        let ds = self.manifest.config.downsample;
        let a = one_hot_tensor(&net_resolution(c_in, ds));
        let b = one_hot_tensor(&net_resolution(c_rec, ds));
        self.discriminate_tensors(&a, &b, c_in.height, c_in.width)
    }

    fn discriminate_tensors(&self, in_onehot: &Tensor, rec_onehot: &Tensor, out_h: usize, out_w: usize) -> Result<AnomalyMap> {
        let x = concat(in_onehot, rec_onehot);
        let logit = self.net.infer(&self.params, x);
        logit.assert_finite("discriminator logits")?;
        let probs: Vec<f32> = logit.data.iter().map(|&v| sigmoid(v)).collect();
        let up = resize_bilinear_plane(&probs, logit.h, logit.w, out_h, out_w);
        // Bilinear interpolation of values in [0,1] stays in [0,1].
        AnomalyMap::new(out_h, out_w, up, ValueRange::Unit)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let manifest = serde_json::to_value(&self.manifest).map_err(|e| Error::Serialization(e.to_string()))?;
        save_checkpoint(path, &manifest, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (manifest, params) = load_checkpoint(path)?;
        let manifest: CompositionManifest =
            serde_json::from_value(manifest).map_err(|e| Error::corrupt(path, e.to_string()))?;
        let net = build_disc_net(&mut ParamSet::with_seed(0), manifest.num_classes, manifest.config.base_width);
        Ok(CompDiscModel { net, params, manifest })
    }
}

/// Inference entry point for the whole branch: takes only the composition
/// map `C`, reconstructs, then discriminates.
pub fn composition_anomaly_map(
    recon: &CompReconModel,
    disc: &CompDiscModel,
    c: &CompositionMap,
) -> Result<AnomalyMap> {
    let (c_rec, _probs) = recon.reconstruct(c)?;
    disc.discriminate(c, &c_rec)
}

fn build_recon_net(params: &mut ParamSet, num_classes: usize, base_width: usize) -> UNet {
    UNet::new(
        params,
        "comp_recon",
        UNetConfig {
            in_channels: num_classes,
            out_channels: num_classes,
            base_width,
        },
    )
}

fn build_disc_net(params: &mut ParamSet, num_classes: usize, base_width: usize) -> UNet {
    UNet::new(
        params,
        "comp_disc",
        UNetConfig {
            in_channels: 2 * num_classes,
            out_channels: 1,
            base_width,
        },
    )
}

/// Joint training loop for both networks.
pub fn train_composition_branch(
    compmaps: &[CompositionMap],
    config: &CompositionConfig,
) -> Result<(CompReconModel, CompDiscModel)> {
    if compmaps.is_empty() {
        return Err(Error::InvalidArgument {
            arg: "compmaps",
            reason: "empty training corpus".into(),
        });
    }
    let num_classes = compmaps[0].num_classes;
    if compmaps.iter().any(|m| m.num_classes != num_classes) {
        return Err(Error::InvalidArgument {
            arg: "compmaps",
            reason: "inconsistent class counts".into(),
        });
    }

    let mut recon_params = ParamSet::with_seed(config.seed.wrapping_add(1));
    let recon_net = build_recon_net(&mut recon_params, num_classes, config.base_width);
    let mut disc_params = ParamSet::with_seed(config.seed.wrapping_add(2));
    let disc_net = build_disc_net(&mut disc_params, num_classes, config.base_width);

    let mut recon_opt = Adam::plain(&recon_params, config.learning_rate);
    let mut disc_opt = Adam::plain(&disc_params, config.learning_rate);
    let schedule = LrSchedule::step_decay(config.iterations, config.decay_fraction, config.decay_factor);

    let mut rng = Pcg64Mcg::seed_from_u64(config.seed ^ 0xc0b4);
    let n = compmaps.len();
    let curve_buckets = 10usize;
    let mut loss_curve = vec![0.0f64; curve_buckets];
    let mut curve_counts = vec![0usize; curve_buckets];

    struct SampleResult {
        rloss: f64,
        dloss: f64,
        rgrads: GradSet,
        dgrads: GradSet,
    }

    for iter in 0..config.iterations {
        let batch: Vec<(usize, u64)> = (0..config.batch_size)
            .map(|_| (rng.random_range(0..n), rng.random::<u64>()))
            .collect();

        let results: Vec<Result<SampleResult>> = par::map(batch, |(idx, sample_seed)| {
            let source = &compmaps[idx];
            let synth: SyntheticSample = sample_training_example(source, compmaps, Some(idx), sample_seed)?;
            let ds = config.downsample;
            let c_a = net_resolution(&synth.augmented, ds);
            let c_clean = net_resolution(source, ds);
            let gt = if ds > 1 {
                crate::imaging::resize_nearest(&synth.gt_mask, source.height, source.width, c_a.height, c_a.width)
            } else {
                synth.gt_mask.clone()
            };

            // Reconstruction pass.
            let x_rec = one_hot_tensor(&c_a);
            let (rec_logits, rec_cache) = recon_net.forward(&recon_params, x_rec);
            let hw = rec_logits.h * rec_logits.w;
            let logits64: Vec<f64> = rec_logits.data.iter().map(|v| *v as f64).collect();
            let (rloss, dlogits64) = recon_loss_with_grad(&c_clean.classes, &logits64, num_classes, hw)?;
            if !rloss.is_finite() {
                return Err(Error::Divergence("reconstruction loss non-finite".into()));
            }
            let dlogits = Tensor::from_data(
                rec_logits.c,
                rec_logits.h,
                rec_logits.w,
                dlogits64.iter().map(|v| *v as f32).collect(),
            );
            let mut rgrads = GradSet::zeros_like(&recon_params);
            recon_net.backward(&recon_params, &rec_cache, &dlogits, &mut rgrads);

            // Discriminator input: one-hot augmented map with the argmax
            // one-hot reconstruction (or softmax probabilities).
            let probs64 = losses::softmax_channels(&logits64, num_classes, hw);
            let rec_input = if config.soft_disc_input {
                Tensor::from_data(
                    num_classes,
                    rec_logits.h,
                    rec_logits.w,
                    probs64.iter().map(|v| *v as f32).collect(),
                )
            } else {
                let mut onehot = vec![0.0f32; num_classes * hw];
                for p in 0..hw {
                    let mut best = 0usize;
                    let mut best_v = probs64[p];
                    for ch in 1..num_classes {
                        if probs64[ch * hw + p] > best_v {
                            best_v = probs64[ch * hw + p];
                            best = ch;
                        }
                    }
                    onehot[best * hw + p] = 1.0;
                }
                Tensor::from_data(num_classes, rec_logits.h, rec_logits.w, onehot)
            };
            let x_disc = concat(&one_hot_tensor(&c_a), &rec_input);
            let (disc_logit, disc_cache) = disc_net.forward(&disc_params, x_disc);
            let pred: Vec<f64> = disc_logit.data.iter().map(|&v| sigmoid(v) as f64).collect();
            let (dloss, dpred) = disc_loss_with_grad(&gt, &pred, config.alpha)?;
            if !dloss.is_finite() {
                return Err(Error::Divergence("discriminator loss non-finite".into()));
            }
            let dlogit = Tensor::from_data(
                1,
                disc_logit.h,
                disc_logit.w,
                dpred
                    .iter()
                    .zip(&pred)
                    .map(|(g, p)| (g * p * (1.0 - p)) as f32)
                    .collect(),
            );
            let mut dgrads = GradSet::zeros_like(&disc_params);
            disc_net.backward(&disc_params, &disc_cache, &dlogit, &mut dgrads);

            Ok(SampleResult {
                rloss,
                dloss,
                rgrads,
                dgrads,
            })
        });

        let mut rtotal = GradSet::zeros_like(&recon_params);
        let mut dtotal = GradSet::zeros_like(&disc_params);
        let mut loss_sum = 0.0;
        for r in results {
            let r = r?;
            rtotal.add(&r.rgrads);
            dtotal.add(&r.dgrads);
            loss_sum += r.rloss + r.dloss;
        }
        let scale = 1.0 / config.batch_size as f32;
        rtotal.scale(scale);
        dtotal.scale(scale);
        let lr_scale = schedule.scale_at(iter);
        recon_opt.step(&mut recon_params, &rtotal, lr_scale);
        disc_opt.step(&mut disc_params, &dtotal, lr_scale);

        let bucket = (iter * curve_buckets / config.iterations).min(curve_buckets - 1);
        loss_curve[bucket] += loss_sum / config.batch_size as f64;
        curve_counts[bucket] += 1;
    }
    for (l, &c) in loss_curve.iter_mut().zip(&curve_counts) {
        if c > 0 {
            *l /= c as f64;
        }
    }

    let manifest = |role: &str| CompositionManifest {
        config: config.clone(),
        num_classes,
        role: role.to_string(),
        decay_at: schedule.decay_at,
        loss_curve: loss_curve.clone(),
    };
    Ok((
        CompReconModel {
            net: recon_net,
            params: recon_params,
            manifest: manifest("recon"),
        },
        CompDiscModel {
            net: disc_net,
            params: disc_params,
            manifest: manifest("disc"),
        },
    ))
}
