//! 2-D convolution with im2col and hand-written backprop.

use super::tensor::{matmul_acc, matmul_nt_acc, matmul_tn_acc, GradSet, ParamSet, Tensor};

/// Same-padding convolution with odd square kernels (1x1 or 3x3 here).
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_c: usize,
    pub out_c: usize,
    pub ksize: usize,
    pub weight_id: usize,
    pub bias_id: usize,
}

impl Conv2d {
    /// Register a conv layer with He initialization.
    pub fn new(params: &mut ParamSet, name: &str, in_c: usize, out_c: usize, ksize: usize) -> Self {
        assert!(ksize % 2 == 1, "only odd kernels supported");
        let fan_in = in_c * ksize * ksize;
        let std = (2.0 / fan_in as f32).sqrt();
        let weight_id = params.register_normal(&format!("{name}.weight"), out_c * fan_in, std);
        let bias_id = params.register_zeros(&format!("{name}.bias"), out_c);
        Conv2d {
            in_c,
            out_c,
            ksize,
            weight_id,
            bias_id,
        }
    }

    fn im2col(&self, x: &Tensor) -> Vec<f32> {
        let (h, w) = (x.h, x.w);
        let k = self.ksize;
        let pad = (k / 2) as i64;
        let hw = h * w;
        let mut cols = vec![0.0f32; self.in_c * k * k * hw];
        for c in 0..self.in_c {
            let plane = x.plane(c);
            for ky in 0..k {
                let dy = ky as i64 - pad;
                for kx in 0..k {
                    let dx = kx as i64 - pad;
                    let row = &mut cols[((c * k + ky) * k + kx) * hw..((c * k + ky) * k + kx + 1) * hw];
                    for y in 0..h {
                        let sy = y as i64 + dy;
                        if sy < 0 || sy >= h as i64 {
                            continue;
                        }
                        let sy = sy as usize;
                        let x_lo = (-dx).max(0) as usize;
                        let x_hi = ((w as i64 - dx).min(w as i64)) as usize;
                        if x_lo >= x_hi {
                            continue;
                        }
                        let src_lo = (x_lo as i64 + dx) as usize;
                        let n = x_hi - x_lo;
                        row[y * w + x_lo..y * w + x_lo + n]
                            .copy_from_slice(&plane[sy * w + src_lo..sy * w + src_lo + n]);
                    }
                }
            }
        }
        cols
    }

    fn col2im_acc(&self, dcols: &[f32], h: usize, w: usize, dx: &mut Tensor) {
        let k = self.ksize;
        let pad = (k / 2) as i64;
        let hw = h * w;
        for c in 0..self.in_c {
            let base = c * h * w;
            for ky in 0..k {
                let dy = ky as i64 - pad;
                for kx in 0..k {
                    let dx_off = kx as i64 - pad;
                    let row = &dcols[((c * k + ky) * k + kx) * hw..((c * k + ky) * k + kx + 1) * hw];
                    for y in 0..h {
                        let sy = y as i64 + dy;
                        if sy < 0 || sy >= h as i64 {
                            continue;
                        }
                        let sy = sy as usize;
                        let x_lo = (-dx_off).max(0) as usize;
                        let x_hi = ((w as i64 - dx_off).min(w as i64)) as usize;
                        for xx in x_lo..x_hi {
                            let sx = (xx as i64 + dx_off) as usize;
                            dx.data[base + sy * w + sx] += row[y * w + xx];
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, params: &ParamSet, x: &Tensor) -> Tensor {
        assert_eq!(x.c, self.in_c, "conv input channel mismatch");
        let (h, w) = (x.h, x.w);
        let hw = h * w;
        let weight = &params.params[self.weight_id].data;
        let bias = &params.params[self.bias_id].data;
        let mut out = Tensor::zeros(self.out_c, h, w);
        for oc in 0..self.out_c {
            out.data[oc * hw..(oc + 1) * hw].fill(bias[oc]);
        }
        if self.ksize == 1 {
            matmul_acc(weight, &x.data, &mut out.data, self.out_c, self.in_c, hw);
        } else {
            let cols = self.im2col(x);
            matmul_acc(weight, &cols, &mut out.data, self.out_c, self.in_c * self.ksize * self.ksize, hw);
        }
        out
    }

    /// Backward pass: accumulates weight/bias grads, returns dL/dx.
    pub fn backward(&self, params: &ParamSet, x: &Tensor, dy: &Tensor, grads: &mut GradSet) -> Tensor {
        let (h, w) = (x.h, x.w);
        let hw = h * w;
        let ck2 = self.in_c * self.ksize * self.ksize;
        let weight = &params.params[self.weight_id].data;

        // Bias grads: row sums of dy.
        {
            let gb = &mut grads.grads[self.bias_id];
            for oc in 0..self.out_c {
                let mut acc = 0.0f32;
                for v in &dy.data[oc * hw..(oc + 1) * hw] {
                    acc += v;
                }
                gb[oc] += acc;
            }
        }

        let mut dx = Tensor::zeros(self.in_c, h, w);
        if self.ksize == 1 {
            matmul_nt_acc(&dy.data, &x.data, &mut grads.grads[self.weight_id], self.out_c, hw, self.in_c);
            matmul_tn_acc(weight, &dy.data, &mut dx.data, self.out_c, self.in_c, hw);
        } else {
            let cols = self.im2col(x);
            matmul_nt_acc(&dy.data, &cols, &mut grads.grads[self.weight_id], self.out_c, hw, ck2);
            let mut dcols = vec![0.0f32; ck2 * hw];
            matmul_tn_acc(weight, &dy.data, &mut dcols, self.out_c, ck2, hw);
            self.col2im_acc(&dcols, h, w, &mut dx);
        }
        dx
    }
}
