//! Seeded fractal gradient noise for anomaly mask generation.
//!
//! Classic 2-D Perlin noise on a lattice whose per-axis period is `2^p`
//! with `p` drawn uniformly from 1..=5 per axis, min-max normalized to
//! `[0, 1]` and binarized at 0.5.

use rand::prelude::*;
use rand_pcg::Pcg64Mcg;

fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

/// Raw Perlin noise field with the given per-axis periods.
pub fn perlin_noise(height: usize, width: usize, period_y: usize, period_x: usize, rng: &mut Pcg64Mcg) -> Vec<f64> {
    let (gy, gx) = (period_y + 1, period_x + 1);
    // Unit gradient per lattice node.
    let gradients: Vec<(f64, f64)> = (0..gy * gx)
        .map(|_| {
            let angle = rng.random::<f64>() * std::f64::consts::TAU;
            (angle.cos(), angle.sin())
        })
        .collect();

    let cell_h = height as f64 / period_y as f64;
    let cell_w = width as f64 / period_x as f64;
    let mut out = vec![0.0f64; height * width];
    for y in 0..height {
        let fy = y as f64 / cell_h;
        let y0 = (fy.floor() as usize).min(period_y - 1);
        let ty = fy - y0 as f64;
        let uy = fade(ty);
        for x in 0..width {
            let fx = x as f64 / cell_w;
            let x0 = (fx.floor() as usize).min(period_x - 1);
            let tx = fx - x0 as f64;
            let ux = fade(tx);

            let dot = |ny: usize, nx: usize| -> f64 {
                let g = gradients[ny * gx + nx];
                let dy = fy - ny as f64;
                let dx = fx - nx as f64;
                g.0 * dx + g.1 * dy
            };
            let n00 = dot(y0, x0);
            let n01 = dot(y0, x0 + 1);
            let n10 = dot(y0 + 1, x0);
            let n11 = dot(y0 + 1, x0 + 1);
            let top = n00 * (1.0 - ux) + n01 * ux;
            let bot = n10 * (1.0 - ux) + n11 * ux;
            out[y * width + x] = top * (1.0 - uy) + bot * uy;
        }
    }
    out
}

/// Binary anomaly-shaped mask. Periods `2^p`, `p ~ U{1..5}` per axis; the
/// noise is min-max normalized to `[0, 1]` and thresholded at 0.5.
pub fn perlin_mask(height: usize, width: usize, seed: u64) -> Vec<bool> {
    assert!(height > 0 && width > 0, "mask dims must be positive");
    let mut rng = Pcg64Mcg::seed_from_u64(seed);
    let py = 1usize << rng.random_range(1..=5u32);
    let px = 1usize << rng.random_range(1..=5u32);
    let noise = perlin_noise(height, width, py, px, &mut rng);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in &noise {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let range = (hi - lo).max(1e-12);
    noise.iter().map(|&v| (v - lo) / range > 0.5).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_is_deterministic_per_seed() {
        let a = perlin_mask(64, 64, 123);
        let b = perlin_mask(64, 64, 123);
        assert_eq!(a, b);
        let c = perlin_mask(64, 64, 124);
        assert_ne!(a, c);
    }

    #[test]
    fn degenerate_one_pixel_mask_does_not_crash() {
        let m = perlin_mask(1, 1, 5);
        assert_eq!(m.len(), 1);
    }

    #[test]
    fn coverage_is_moderate_on_average() {
        // Smaller version of the acceptance sweep: mean coverage of the
        // binarized mask stays in a broad central band.
        let mut total = 0.0;
        let n = 200;
        for seed in 0..n {
            let m = perlin_mask(128, 128, seed);
            total += m.iter().filter(|v| **v).count() as f64 / (128.0 * 128.0);
        }
        let mean = total / n as f64;
        assert!(mean > 0.2 && mean < 0.8, "mean coverage {mean}");
    }
}
