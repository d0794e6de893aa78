//! Segmentation and regression losses with analytic gradients.
//!
//! Everything here computes in f64 so gradients can be validated against
//! central finite differences tightly; the training loops convert from and
//! to f32 tensors at the boundary.

use crate::error::{Error, Result};
use crate::nn::Tensor;

pub const PROB_CLAMP: f64 = 1e-7;
pub const DICE_EPS: f64 = 1.0;

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite values in {what}")))
    }
}

/// Channel softmax over `[c][hw]` logits, computed in f64.
pub fn softmax_channels(logits: &[f64], c: usize, hw: usize) -> Vec<f64> {
    let mut probs = vec![0.0f64; c * hw];
    for p in 0..hw {
        let mut maxv = f64::NEG_INFINITY;
        for ch in 0..c {
            maxv = maxv.max(logits[ch * hw + p]);
        }
        let mut denom = 0.0;
        for ch in 0..c {
            let e = (logits[ch * hw + p] - maxv).exp();
            probs[ch * hw + p] = e;
            denom += e;
        }
        for ch in 0..c {
            probs[ch * hw + p] /= denom;
        }
    }
    probs
}

/// Multiclass focal loss on channel probabilities.
///
/// `mean over pixels of -(1 - p_t)^gamma * ln(p_t)` where `p_t` is the
/// probability of the true class, clamped below at 1e-7. `gamma = 0`
/// recovers cross-entropy.
pub fn focal_multiclass(probs: &[f64], c: usize, hw: usize, target: &[u16], gamma: f64) -> Result<f64> {
    Ok(focal_multiclass_with_grad(probs, c, hw, target, gamma)?.0)
}

/// Loss plus dL/dprobs (same layout as `probs`).
pub fn focal_multiclass_with_grad(
    probs: &[f64],
    c: usize,
    hw: usize,
    target: &[u16],
    gamma: f64,
) -> Result<(f64, Vec<f64>)> {
    assert_eq!(probs.len(), c * hw);
    assert_eq!(target.len(), hw);
    check_finite(probs, "focal loss input")?;
    let mut loss = 0.0;
    let mut grad = vec![0.0f64; c * hw];
    let n = hw as f64;
    for p in 0..hw {
        let t = target[p] as usize;
        debug_assert!(t < c);
        let pt_raw = probs[t * hw + p];
        let pt = pt_raw.max(PROB_CLAMP);
        let one_m = 1.0 - pt;
        loss += -one_m.powf(gamma) * pt.ln();
        if pt_raw > PROB_CLAMP {
            // d/dp [-(1-p)^g ln p] = g (1-p)^{g-1} ln p - (1-p)^g / p
            let d = if gamma == 0.0 {
                -1.0 / pt
            } else {
                gamma * one_m.powf(gamma - 1.0) * pt.ln() - one_m.powf(gamma) / pt
            };
            grad[t * hw + p] = d / n;
        }
    }
    Ok((loss / n, grad))
}

/// Binary focal loss on per-pixel probabilities against a boolean mask.
pub fn focal_binary(pred: &[f64], target: &[bool], gamma: f64) -> Result<f64> {
    Ok(focal_binary_with_grad(pred, target, gamma)?.0)
}

pub fn focal_binary_with_grad(pred: &[f64], target: &[bool], gamma: f64) -> Result<(f64, Vec<f64>)> {
    assert_eq!(pred.len(), target.len());
    check_finite(pred, "binary focal loss input")?;
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0f64; pred.len()];
    for (i, (&p, &t)) in pred.iter().zip(target).enumerate() {
        let pt_raw = if t { p } else { 1.0 - p };
        let pt = pt_raw.max(PROB_CLAMP);
        let one_m = 1.0 - pt;
        loss += -one_m.powf(gamma) * pt.ln();
        if pt_raw > PROB_CLAMP {
            let d = if gamma == 0.0 {
                -1.0 / pt
            } else {
                gamma * one_m.powf(gamma - 1.0) * pt.ln() - one_m.powf(gamma) / pt
            };
            // dpt/dp = +1 for positives, -1 for negatives.
            grad[i] = if t { d } else { -d } / n;
        }
    }
    Ok((loss / n, grad))
}

/// Dice loss: `1 - mean over classes of (2*sum(p*t) + eps) / (sum(p) + sum(t) + eps)`
/// with `eps = 1.0`.
pub fn dice_loss(probs: &[f64], c: usize, hw: usize, target: &[u16]) -> Result<f64> {
    Ok(dice_loss_with_grad(probs, c, hw, target)?.0)
}

pub fn dice_loss_with_grad(probs: &[f64], c: usize, hw: usize, target: &[u16]) -> Result<(f64, Vec<f64>)> {
    assert_eq!(probs.len(), c * hw);
    assert_eq!(target.len(), hw);
    check_finite(probs, "dice loss input")?;
    let mut loss = 1.0;
    let mut grad = vec![0.0f64; c * hw];
    for ch in 0..c {
        let plane = &probs[ch * hw..(ch + 1) * hw];
        let mut inter = 0.0;
        let mut psum = 0.0;
        let mut tsum = 0.0;
        for (&pv, &t) in plane.iter().zip(target) {
            psum += pv;
            if t as usize == ch {
                tsum += 1.0;
                inter += pv;
            }
        }
        let num = 2.0 * inter + DICE_EPS;
        let den = psum + tsum + DICE_EPS;
        loss -= num / den / c as f64;
        for (p, &t) in target.iter().enumerate() {
            let tv = if t as usize == ch { 1.0 } else { 0.0 };
            // d/dp [num/den] = (2 t den - num) / den^2
            grad[ch * hw + p] = -((2.0 * tv * den - num) / (den * den)) / c as f64;
        }
    }
    Ok((loss, grad))
}

/// Mean absolute error.
pub fn l1_loss(pred: &[f64], target: &[f64]) -> f64 {
    l1_loss_with_grad(pred, target).0
}

pub fn l1_loss_with_grad(pred: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0f64; pred.len()];
    for (i, (&p, &t)) in pred.iter().zip(target).enumerate() {
        let d = p - t;
        loss += d.abs();
        grad[i] = d.signum() / n;
    }
    (loss / n, grad)
}

/// Chain dL/dprobs through a channel softmax to dL/dlogits.
pub fn softmax_grad_chain(probs: &[f64], dprobs: &[f64], c: usize, hw: usize) -> Vec<f64> {
    let mut dlogits = vec![0.0f64; c * hw];
    for p in 0..hw {
        let mut dot = 0.0;
        for ch in 0..c {
            dot += dprobs[ch * hw + p] * probs[ch * hw + p];
        }
        for ch in 0..c {
            let pv = probs[ch * hw + p];
            dlogits[ch * hw + p] = pv * (dprobs[ch * hw + p] - dot);
        }
    }
    dlogits
}

/// Cross-entropy on raw logits with dL/dlogits, for the segmentation model.
pub fn cross_entropy_with_grad(logits: &Tensor, target: &[u16]) -> (f64, Tensor) {
    let (c, hw) = (logits.c, logits.h * logits.w);
    assert_eq!(target.len(), hw);
    let logits64: Vec<f64> = logits.data.iter().map(|v| *v as f64).collect();
    let probs = softmax_channels(&logits64, c, hw);
    let n = hw as f64;
    let mut loss = 0.0;
    let mut dlogits = Tensor::zeros(c, logits.h, logits.w);
    for p in 0..hw {
        let t = target[p] as usize;
        loss += -probs[t * hw + p].max(PROB_CLAMP).ln();
        for ch in 0..c {
            let ind = if ch == t { 1.0 } else { 0.0 };
            dlogits.data[ch * hw + p] = ((probs[ch * hw + p] - ind) / n) as f32;
        }
    }
    (loss / n, dlogits)
}

/// Mean squared error with gradient w.r.t. `pred`, in f32 for training loops.
pub fn mse_with_grad(pred: &Tensor, target: &Tensor) -> (f64, Tensor) {
    assert_eq!(pred.data.len(), target.data.len());
    let n = pred.data.len() as f64;
    let mut loss = 0.0f64;
    let mut grad = Tensor::zeros(pred.c, pred.h, pred.w);
    for i in 0..pred.data.len() {
        let d = pred.data[i] as f64 - target.data[i] as f64;
        loss += d * d;
        grad.data[i] = (2.0 * d / n) as f32;
    }
    (loss / n, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_pcg::Pcg64Mcg;

    fn random_probs(rng: &mut Pcg64Mcg, c: usize, hw: usize) -> Vec<f64> {
        let logits: Vec<f64> = (0..c * hw).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        softmax_channels(&logits, c, hw)
    }

    #[test]
    fn focal_gamma_zero_equals_cross_entropy() {
        let mut rng = Pcg64Mcg::seed_from_u64(31);
        let (c, hw) = (4, 25);
        let probs = random_probs(&mut rng, c, hw);
        let target: Vec<u16> = (0..hw).map(|_| rng.random_range(0..c as u16)).collect();
        let focal = focal_multiclass(&probs, c, hw, &target, 0.0).unwrap();
        let ce: f64 = target
            .iter()
            .enumerate()
            .map(|(p, &t)| -probs[t as usize * hw + p].ln())
            .sum::<f64>()
            / hw as f64;
        assert!((focal - ce).abs() <= 1e-6 * ce.abs());
    }

    #[test]
    fn focal_closed_form_single_pixel() {
        // p_t = 0.5, gamma = 2 -> 0.25 * ln 2.
        let probs = vec![0.5, 0.5];
        let loss = focal_multiclass(&probs, 2, 1, &[0], 2.0).unwrap();
        assert!((loss - 0.25 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn focal_perfect_prediction_is_zero() {
        let mut probs = vec![0.0; 2 * 4];
        for p in 0..4 {
            probs[p] = 1.0;
        }
        let loss = focal_multiclass(&probs, 2, 4, &[0, 0, 0, 0], 2.0).unwrap();
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn focal_rejects_non_finite() {
        let probs = vec![f64::NAN, 0.5];
        assert!(focal_multiclass(&probs, 2, 1, &[0], 2.0).is_err());
    }

    #[test]
    fn dice_perfect_prediction_near_zero() {
        let hw = 256 * 256 / 64;
        let target: Vec<u16> = (0..hw).map(|p| (p % 3) as u16).collect();
        let mut probs = vec![0.0f64; 3 * hw];
        for (p, &t) in target.iter().enumerate() {
            probs[t as usize * hw + p] = 1.0;
        }
        let loss = dice_loss(&probs, 3, hw, &target).unwrap();
        assert!(loss <= 1e-3, "dice {loss}");
    }

    #[test]
    fn dice_disjoint_prediction_approaches_one() {
        // Prediction puts everything on class 1, target is all class 0.
        let hw = 256 * 256;
        let target = vec![0u16; hw];
        let mut probs = vec![0.0f64; 2 * hw];
        for p in 0..hw {
            probs[hw + p] = 1.0;
        }
        let loss = dice_loss(&probs, 2, hw, &target).unwrap();
        assert!(loss >= 0.99, "dice {loss}");
    }

    #[test]
    fn dice_matches_brute_force_formula() {
        let mut rng = Pcg64Mcg::seed_from_u64(77);
        let (c, hw) = (3, 40);
        let probs = random_probs(&mut rng, c, hw);
        let target: Vec<u16> = (0..hw).map(|_| rng.random_range(0..c as u16)).collect();
        let loss = dice_loss(&probs, c, hw, &target).unwrap();
        // Independent accumulation, per class.
        let mut acc = 0.0;
        for ch in 0..c {
            let mut inter = 0.0;
            let mut psum = 0.0;
            let mut tsum = 0.0;
            for p in 0..hw {
                let t = if target[p] as usize == ch { 1.0 } else { 0.0 };
                inter += probs[ch * hw + p] * t;
                psum += probs[ch * hw + p];
                tsum += t;
            }
            acc += (2.0 * inter + 1.0) / (psum + tsum + 1.0);
        }
        let want = 1.0 - acc / c as f64;
        assert!((loss - want).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = Pcg64Mcg::seed_from_u64(13);
        let (c, hw) = (3, 16);
        let probs = random_probs(&mut rng, c, hw);
        let target: Vec<u16> = (0..hw).map(|_| rng.random_range(0..c as u16)).collect();
        let h = 1e-6;

        let (_, gf) = focal_multiclass_with_grad(&probs, c, hw, &target, 2.0).unwrap();
        let (_, gd) = dice_loss_with_grad(&probs, c, hw, &target).unwrap();
        for idx in [0usize, 7, 19, 33, 47] {
            let mut plus = probs.clone();
            plus[idx] += h;
            let mut minus = probs.clone();
            minus[idx] -= h;
            let fd_f = (focal_multiclass(&plus, c, hw, &target, 2.0).unwrap()
                - focal_multiclass(&minus, c, hw, &target, 2.0).unwrap())
                / (2.0 * h);
            assert!((fd_f - gf[idx]).abs() <= 1e-6 * (1.0 + gf[idx].abs()), "focal idx {idx}");
            let fd_d = (dice_loss(&plus, c, hw, &target).unwrap()
                - dice_loss(&minus, c, hw, &target).unwrap())
                / (2.0 * h);
            assert!((fd_d - gd[idx]).abs() <= 1e-6 * (1.0 + gd[idx].abs()), "dice idx {idx}");
        }

        let pred: Vec<f64> = (0..hw).map(|_| rng.random::<f64>() * 0.98 + 0.01).collect();
        let mask: Vec<bool> = (0..hw).map(|_| rng.random_bool(0.3)).collect();
        let (_, gb) = focal_binary_with_grad(&pred, &mask, 2.0).unwrap();
        for idx in [0usize, 5, 11] {
            let mut plus = pred.clone();
            plus[idx] += h;
            let mut minus = pred.clone();
            minus[idx] -= h;
            let fd = (focal_binary(&plus, &mask, 2.0).unwrap() - focal_binary(&minus, &mask, 2.0).unwrap())
                / (2.0 * h);
            assert!((fd - gb[idx]).abs() <= 1e-6 * (1.0 + gb[idx].abs()), "binary focal idx {idx}");
        }
    }

    #[test]
    fn l1_gradient_is_sign_over_n() {
        let pred = vec![0.3, 0.9, 0.1];
        let target = vec![0.5, 0.2, 0.1];
        let (loss, grad) = l1_loss_with_grad(&pred, &target);
        assert!((loss - (0.2 + 0.7 + 0.0) / 3.0).abs() < 1e-12);
        assert_eq!(grad[0], -1.0 / 3.0);
        assert_eq!(grad[1], 1.0 / 3.0);
    }
}
