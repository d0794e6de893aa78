//! RGB image container, loading and resizing.
//!
//! Images are resized to the working resolution with bilinear interpolation;
//! maps of class indices must never be interpolated and use the nearest
//! neighbor helpers here instead.

use crate::error::{Error, Result};
use crate::WORKING_RES;
use std::path::Path;

/// An RGB image with row-major `[y][x][c]` layout and values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRgb {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl ImageRgb {
    pub fn new(height: usize, width: usize) -> Self {
        ImageRgb {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut img = ImageRgb::new(height, width);
        for p in 0..height * width {
            img.data[p * 3..p * 3 + 3].copy_from_slice(&rgb);
        }
        img
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn is_finite_unit(&self) -> bool {
        self.data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v))
    }

    /// Grayscale view, mean of the three channels.
    pub fn to_gray(&self) -> Vec<f32> {
        (0..self.height * self.width)
            .map(|p| (self.data[p * 3] + self.data[p * 3 + 1] + self.data[p * 3 + 2]) / 3.0)
            .collect()
    }

    /// Bilinear resize. Aligns pixel centers, the usual image convention.
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> ImageRgb {
        if out_h == self.height && out_w == self.width {
            return self.clone();
        }
        let mut out = ImageRgb::new(out_h, out_w);
        let sy = self.height as f32 / out_h as f32;
        let sx = self.width as f32 / out_w as f32;
        for oy in 0..out_h {
            let fy = ((oy as f32 + 0.5) * sy - 0.5).clamp(0.0, self.height as f32 - 1.0);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = fy - y0 as f32;
            for ox in 0..out_w {
                let fx = ((ox as f32 + 0.5) * sx - 0.5).clamp(0.0, self.width as f32 - 1.0);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = fx - x0 as f32;
                let mut rgb = [0.0f32; 3];
                for c in 0..3 {
                    let a = self.data[(y0 * self.width + x0) * 3 + c];
                    let b = self.data[(y0 * self.width + x1) * 3 + c];
                    let d = self.data[(y1 * self.width + x0) * 3 + c];
                    let e = self.data[(y1 * self.width + x1) * 3 + c];
                    let top = a * (1.0 - wx) + b * wx;
                    let bot = d * (1.0 - wx) + e * wx;
                    rgb[c] = top * (1.0 - wy) + bot * wy;
                }
                out.set(oy, ox, rgb);
            }
        }
        out
    }

    /// Load a PNG/able image from disk, resized to the working resolution.
    pub fn load(path: &Path) -> Result<ImageRgb> {
        let img = image::open(path).map_err(|e| Error::image(path, e))?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = ImageRgb::new(h, w);
        for (i, px) in img.pixels().enumerate() {
            out.data[i * 3] = px.0[0] as f32 / 255.0;
            out.data[i * 3 + 1] = px.0[1] as f32 / 255.0;
            out.data[i * 3 + 2] = px.0[2] as f32 / 255.0;
        }
        if h != WORKING_RES || w != WORKING_RES {
            out = out.resize_bilinear(WORKING_RES, WORKING_RES);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = image::RgbImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                let rgb = self.get(y, x);
                let px = [
                    (rgb[0].clamp(0.0, 1.0) * 255.0).round() as u8,
                    (rgb[1].clamp(0.0, 1.0) * 255.0).round() as u8,
                    (rgb[2].clamp(0.0, 1.0) * 255.0).round() as u8,
                ];
                buf.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        buf.save(path).map_err(|e| Error::image(path, e))
    }
}

/// 3x3 box blur per channel, edge-clamped.
pub fn box_blur3(img: &ImageRgb) -> ImageRgb {
    let (h, w) = (img.height, img.width);
    let mut out = ImageRgb::new(h, w);
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f32; 3];
            let mut n = 0.0f32;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                    let xx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                    let rgb = img.get(yy, xx);
                    for c in 0..3 {
                        acc[c] += rgb[c];
                    }
                    n += 1.0;
                }
            }
            out.set(y, x, [acc[0] / n, acc[1] / n, acc[2] / n]);
        }
    }
    out
}

/// Central-difference gradient magnitude of the grayscale image.
pub fn gradient_magnitude(img: &ImageRgb) -> Vec<f32> {
    let (h, w) = (img.height, img.width);
    let gray = img.to_gray();
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let xm = x.saturating_sub(1);
            let xp = (x + 1).min(w - 1);
            let ym = y.saturating_sub(1);
            let yp = (y + 1).min(h - 1);
            let gx = (gray[y * w + xp] - gray[y * w + xm]) * 0.5;
            let gy = (gray[yp * w + x] - gray[ym * w + x]) * 0.5;
            out[y * w + x] = (gx * gx + gy * gy).sqrt();
        }
    }
    out
}

/// Nearest-neighbor resize for integer-valued maps (class indices, masks).
pub fn resize_nearest<T: Copy>(src: &[T], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let sy = ((oy as f64 + 0.5) * h as f64 / out_h as f64).floor() as usize;
        let sy = sy.min(h - 1);
        for ox in 0..out_w {
            let sx = ((ox as f64 + 0.5) * w as f64 / out_w as f64).floor() as usize;
            let sx = sx.min(w - 1);
            out.push(src[sy * w + sx]);
        }
    }
    out
}

/// Bilinear resize for a single scalar channel in f32.
pub fn resize_bilinear_plane(src: &[f32], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    if out_h == h && out_w == w {
        return src.to_vec();
    }
    let mut out = vec![0.0f32; out_h * out_w];
    let sy = h as f32 / out_h as f32;
    let sx = w as f32 / out_w as f32;
    for oy in 0..out_h {
        let fy = ((oy as f32 + 0.5) * sy - 0.5).clamp(0.0, h as f32 - 1.0);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f32;
        for ox in 0..out_w {
            let fx = ((ox as f32 + 0.5) * sx - 0.5).clamp(0.0, w as f32 - 1.0);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f32;
            let top = src[y0 * w + x0] * (1.0 - wx) + src[y0 * w + x1] * wx;
            let bot = src[y1 * w + x0] * (1.0 - wx) + src[y1 * w + x1] * wx;
            out[oy * out_w + ox] = top * (1.0 - wy) + bot * wy;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_resize_preserves_constant_images() {
        let img = ImageRgb::filled(16, 16, [0.25, 0.5, 0.75]);
        let up = img.resize_bilinear(64, 64);
        for y in 0..64 {
            for x in 0..64 {
                let rgb = up.get(y, x);
                assert!((rgb[0] - 0.25).abs() < 1e-6);
                assert!((rgb[2] - 0.75).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn nearest_resize_never_invents_values() {
        let src: Vec<u16> = vec![0, 1, 2, 3];
        let out = resize_nearest(&src, 2, 2, 7, 7);
        assert!(out.iter().all(|v| *v <= 3));
        assert_eq!(out[0], 0);
        assert_eq!(out[48], 3);
    }

    #[test]
    fn gradient_is_zero_on_flat_images() {
        let img = ImageRgb::filled(8, 8, [0.4, 0.4, 0.4]);
        assert!(gradient_magnitude(&img).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn load_resizes_to_working_resolution() {
        let dir = std::env::temp_dir().join("salad_imaging_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("small.png");
        ImageRgb::filled(33, 41, [1.0, 0.0, 0.0]).save(&path).unwrap();
        let loaded = ImageRgb::load(&path).unwrap();
        assert_eq!(loaded.height, WORKING_RES);
        assert_eq!(loaded.width, WORKING_RES);
        assert!(loaded.is_finite_unit());
    }
}
