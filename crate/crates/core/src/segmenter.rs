//! Component segmentation model: distills pseudo-labels into a U-shaped
//! network that predicts composition maps directly from images.

use crate::compmap::CompositionMap;
use crate::error::{Error, Result};
use crate::imaging::ImageRgb;
use crate::losses::cross_entropy_with_grad;
use crate::nn::ops::avgpool;
use crate::nn::{load_checkpoint, save_checkpoint, Adam, GradSet, ParamSet, Tensor, UNet, UNetConfig};
use crate::par;
use rand::prelude::*;
use rand_pcg::Pcg64Mcg;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SegmenterConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub base_width: usize,
    /// Integer factor by which the network operates below map resolution.
    pub downsample: usize,
    pub seed: u64,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        SegmenterConfig {
            epochs: 15,
            learning_rate: 5e-4,
            batch_size: 8,
            weight_decay: 1e-2,
            base_width: 32,
            downsample: 1,
            seed: 0,
        }
    }
}

/// Training record written into the checkpoint manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmenterManifest {
    pub config: SegmenterConfig,
    pub num_classes: usize,
    pub optimizer: String,
    pub epoch_mean_loss: Vec<f64>,
}

#[derive(Debug)]
pub struct SegmenterModel {
    pub net: UNet,
    pub params: ParamSet,
    pub manifest: SegmenterManifest,
}

pub fn image_to_tensor(img: &ImageRgb) -> Tensor {
    let (h, w) = (img.height, img.width);
    let mut t = Tensor::zeros(3, h, w);
    for p in 0..h * w {
        for c in 0..3 {
            t.data[c * h * w + p] = img.data[p * 3 + c];
        }
    }
    t
}

fn prepare_input(img: &ImageRgb, downsample: usize) -> Tensor {
    let t = image_to_tensor(img);
    if downsample > 1 {
        avgpool(&t, downsample)
    } else {
        t
    }
}

/// Train the (K+1)-way component segmenter with AdamW and cross-entropy.
pub fn train_component_segmenter(
    images: &[ImageRgb],
    pseudo_labels: &[CompositionMap],
    config: &SegmenterConfig,
) -> Result<SegmenterModel> {
    if images.is_empty() || images.len() != pseudo_labels.len() {
        return Err(Error::InvalidArgument {
            arg: "images",
            reason: "need a non-empty corpus with matching labels".into(),
        });
    }
    let num_classes = pseudo_labels[0].num_classes;
    if pseudo_labels.iter().any(|l| l.num_classes != num_classes) {
        return Err(Error::InvalidArgument {
            arg: "pseudo_labels",
            reason: "inconsistent class counts across the corpus".into(),
        });
    }

    let inputs: Vec<Tensor> = par::map(
        images.iter().collect(),
        |img| prepare_input(img, config.downsample),
    );
    let targets: Vec<Vec<u16>> = pseudo_labels
        .iter()
        .map(|l| {
            let net_h = l.height / config.downsample;
            let net_w = l.width / config.downsample;
            l.resize_nearest(net_h, net_w).classes
        })
        .collect();

    let mut params = ParamSet::with_seed(config.seed);
    let net = UNet::new(
        &mut params,
        "segmenter",
        UNetConfig {
            in_channels: 3,
            out_channels: num_classes,
            base_width: config.base_width,
        },
    );
    let mut opt = Adam::adamw(&params, config.learning_rate, config.weight_decay);
    let mut rng = Pcg64Mcg::seed_from_u64(config.seed ^ 0x5e6);

    let n = inputs.len();
    let mut epoch_mean_loss = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;
        for batch in order.chunks(config.batch_size) {
            let results: Vec<(f64, GradSet)> = par::map(batch.to_vec(), |i| {
                let (logits, cache) = net.forward(&params, inputs[i].clone());
                let (loss, dlogits) = cross_entropy_with_grad(&logits, &targets[i]);
                let mut grads = GradSet::zeros_like(&params);
                net.backward(&params, &cache, &dlogits, &mut grads);
                (loss, grads)
            });
            let mut total = GradSet::zeros_like(&params);
            let mut loss_sum = 0.0;
            for (loss, g) in &results {
                loss_sum += loss;
                total.add(g);
            }
            let batch_loss = loss_sum / batch.len() as f64;
            if !batch_loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "segmenter loss non-finite at epoch {epoch}"
                )));
            }
            total.scale(1.0 / batch.len() as f32);
            opt.step(&mut params, &total, 1.0);
            epoch_loss += batch_loss;
            batches += 1;
        }
        epoch_mean_loss.push(epoch_loss / batches.max(1) as f64);
    }

    if config.epochs >= 2 {
        let first = epoch_mean_loss[0];
        let last = *epoch_mean_loss.last().unwrap();
        if last >= first {
            eprintln!("warning: segmenter loss did not decrease ({first:.4} -> {last:.4})");
        }
    }

    Ok(SegmenterModel {
        net,
        params,
        manifest: SegmenterManifest {
            config: config.clone(),
            num_classes,
            optimizer: "adamw".into(),
            epoch_mean_loss,
        },
    })
}

impl SegmenterModel {
    /// Per-pixel argmax over the K+1 logits, at map resolution.
    pub fn infer(&self, image: &ImageRgb) -> Result<CompositionMap> {
        let ds = self.manifest.config.downsample;
        let input = prepare_input(image, ds);
        let logits = self.net.infer(&self.params, input);
        logits.assert_finite("segmenter logits")?;
        let (c, h, w) = (logits.c, logits.h, logits.w);
        let hw = h * w;
        let mut classes = vec![0u16; hw];
        for p in 0..hw {
            let mut best = 0usize;
            let mut best_v = logits.data[p];
            for ch in 1..c {
                let v = logits.data[ch * hw + p];
                if v > best_v {
                    best_v = v;
                    best = ch;
                }
            }
            classes[p] = best as u16;
        }
        let map = CompositionMap::new(h, w, classes, c)?;
        Ok(if ds > 1 {
            map.resize_nearest(image.height, image.width)
        } else {
            map
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let manifest = serde_json::to_value(&self.manifest).map_err(|e| Error::Serialization(e.to_string()))?;
        save_checkpoint(path, &manifest, &self.params)
    }

    pub fn load(path: &Path) -> Result<SegmenterModel> {
        let (manifest, params) = load_checkpoint(path)?;
        let manifest: SegmenterManifest =
            serde_json::from_value(manifest).map_err(|e| Error::corrupt(path, e.to_string()))?;
        let mut shadow = ParamSet::with_seed(0);
        let net = UNet::new(
            &mut shadow,
            "segmenter",
            UNetConfig {
                in_channels: 3,
                out_channels: manifest.num_classes,
                base_width: manifest.config.base_width,
            },
        );
        if shadow.params.len() != params.params.len() {
            return Err(Error::corrupt(path, "parameter count mismatch"));
        }
        Ok(SegmenterModel { net, params, manifest })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Tiny corpus: color position encodes the class; the net must overfit.
    fn tiny_corpus(n: usize) -> (Vec<ImageRgb>, Vec<CompositionMap>) {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let mut img = ImageRgb::filled(32, 32, [0.1, 0.1, 0.1]);
            let mut map = CompositionMap::zeros(32, 32, 2);
            let off = (i % 4) * 2;
            for y in 8 + off..20 + off {
                for x in 8..24 {
                    img.set(y, x, [0.9, 0.3, 0.2]);
                    map.set(y, x, 1);
                }
            }
            images.push(img);
            labels.push(map);
        }
        (images, labels)
    }

    #[test]
    fn training_reduces_loss_and_infers_labels() {
        let (images, labels) = tiny_corpus(8);
        let config = SegmenterConfig {
            epochs: 12,
            learning_rate: 2e-3,
            batch_size: 4,
            base_width: 4,
            downsample: 1,
            seed: 7,
            ..Default::default()
        };
        let model = train_component_segmenter(&images, &labels, &config).unwrap();
        let losses = &model.manifest.epoch_mean_loss;
        assert!(losses.last().unwrap() < &losses[0], "loss {losses:?}");

        let inferred = model.infer(&images[0]).unwrap();
        let agree = inferred
            .classes
            .iter()
            .zip(&labels[0].classes)
            .filter(|(a, b)| a == b)
            .count();
        assert!(agree as f64 / 1024.0 > 0.95, "agreement {agree}/1024");

        // Determinism of inference.
        let again = model.infer(&images[0]).unwrap();
        assert_eq!(inferred, again);
    }

    #[test]
    fn checkpoint_round_trip_preserves_inference() {
        let (images, labels) = tiny_corpus(4);
        let config = SegmenterConfig {
            epochs: 3,
            learning_rate: 1e-3,
            batch_size: 4,
            base_width: 4,
            downsample: 1,
            seed: 3,
            ..Default::default()
        };
        let model = train_component_segmenter(&images, &labels, &config).unwrap();
        let dir = std::env::temp_dir().join("salad_segmenter_ckpt");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("seg.ckpt");
        model.save(&path).unwrap();
        let loaded = SegmenterModel::load(&path).unwrap();
        assert_eq!(model.infer(&images[1]).unwrap(), loaded.infer(&images[1]).unwrap());
        assert_eq!(loaded.manifest.config, config);
    }

    #[test]
    fn default_config_carries_cited_hyperparameters() {
        let d = SegmenterConfig::default();
        assert_eq!(d.epochs, 15);
        assert_eq!(d.learning_rate, 5e-4);
        assert_eq!(d.batch_size, 8);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let err = train_component_segmenter(&[], &[], &SegmenterConfig::default()).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument { .. }));
    }
}
