//! Pointwise and spatial ops used between conv layers.

use super::tensor::Tensor;

pub fn relu(x: &Tensor) -> Tensor {
    Tensor {
        c: x.c,
        h: x.h,
        w: x.w,
        data: x.data.iter().map(|v| v.max(0.0)).collect(),
    }
}

/// dL/dx given dL/dy and the relu *output* y.
pub fn relu_backward(dy: &Tensor, y: &Tensor) -> Tensor {
    Tensor {
        c: dy.c,
        h: dy.h,
        w: dy.w,
        data: dy
            .data
            .iter()
            .zip(&y.data)
            .map(|(d, v)| if *v > 0.0 { *d } else { 0.0 })
            .collect(),
    }
}

/// 2x2 max pooling with stride 2. Requires even spatial dims.
pub fn maxpool2(x: &Tensor) -> (Tensor, Vec<u32>) {
    assert!(
        x.h.is_multiple_of(2) && x.w.is_multiple_of(2),
        "maxpool2 needs even dims, got {}x{}",
        x.h,
        x.w
    );
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut out = Tensor::zeros(x.c, oh, ow);
    let mut argmax = vec![0u32; x.c * oh * ow];
    for c in 0..x.c {
        let plane = x.plane(c);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f32::NEG_INFINITY;
                let mut best_idx = 0usize;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let idx = (oy * 2 + dy) * x.w + ox * 2 + dx;
                        if plane[idx] > best {
                            best = plane[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.data[c * oh * ow + oy * ow + ox] = best;
                argmax[c * oh * ow + oy * ow + ox] = (c * x.h * x.w + best_idx) as u32;
            }
        }
    }
    (out, argmax)
}

pub fn maxpool2_backward(dy: &Tensor, argmax: &[u32], in_c: usize, in_h: usize, in_w: usize) -> Tensor {
    let mut dx = Tensor::zeros(in_c, in_h, in_w);
    for (d, &idx) in dy.data.iter().zip(argmax) {
        dx.data[idx as usize] += d;
    }
    dx
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample2(x: &Tensor) -> Tensor {
    let (oh, ow) = (x.h * 2, x.w * 2);
    let mut out = Tensor::zeros(x.c, oh, ow);
    for c in 0..x.c {
        let plane = x.plane(c);
        let oplane = &mut out.data[c * oh * ow..(c + 1) * oh * ow];
        for oy in 0..oh {
            let sy = oy / 2;
            for ox in 0..ow {
                oplane[oy * ow + ox] = plane[sy * x.w + ox / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward(dy: &Tensor) -> Tensor {
    let (ih, iw) = (dy.h / 2, dy.w / 2);
    let mut dx = Tensor::zeros(dy.c, ih, iw);
    for c in 0..dy.c {
        let dplane = dy.plane(c);
        let xplane = &mut dx.data[c * ih * iw..(c + 1) * ih * iw];
        for oy in 0..dy.h {
            for ox in 0..dy.w {
                xplane[(oy / 2) * iw + ox / 2] += dplane[oy * dy.w + ox];
            }
        }
    }
    dx
}

/// Channel concatenation `[a; b]`.
pub fn concat(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!((a.h, a.w), (b.h, b.w), "concat spatial mismatch");
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor {
        c: a.c + b.c,
        h: a.h,
        w: a.w,
        data,
    }
}

/// Split gradient of a concat back into the two inputs.
pub fn concat_backward(dy: &Tensor, c_a: usize) -> (Tensor, Tensor) {
    let hw = dy.h * dy.w;
    let da = Tensor::from_data(c_a, dy.h, dy.w, dy.data[..c_a * hw].to_vec());
    let db = Tensor::from_data(dy.c - c_a, dy.h, dy.w, dy.data[c_a * hw..].to_vec());
    (da, db)
}

/// Average pooling by an integer factor, used to downsample network inputs.
pub fn avgpool(x: &Tensor, factor: usize) -> Tensor {
    assert!(x.h.is_multiple_of(factor) && x.w.is_multiple_of(factor));
    let (oh, ow) = (x.h / factor, x.w / factor);
    let norm = 1.0 / (factor * factor) as f32;
    let mut out = Tensor::zeros(x.c, oh, ow);
    for c in 0..x.c {
        let plane = x.plane(c);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0f32;
                for dy in 0..factor {
                    for dx in 0..factor {
                        acc += plane[(oy * factor + dy) * x.w + ox * factor + dx];
                    }
                }
                out.data[c * oh * ow + oy * ow + ox] = acc * norm;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maxpool_roundtrip_routes_gradient_to_argmax() {
        let x = Tensor::from_data(1, 2, 2, vec![1.0, 4.0, 2.0, 3.0]);
        let (y, idx) = maxpool2(&x);
        assert_eq!(y.data, vec![4.0]);
        let dy = Tensor::from_data(1, 1, 1, vec![7.0]);
        let dx = maxpool2_backward(&dy, &idx, 1, 2, 2);
        assert_eq!(dx.data, vec![0.0, 7.0, 0.0, 0.0]);
    }

    #[test]
    fn upsample_backward_sums_children() {
        let x = Tensor::from_data(1, 1, 1, vec![3.0]);
        let y = upsample2(&x);
        assert_eq!(y.data, vec![3.0; 4]);
        let dy = Tensor::from_data(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let dx = upsample2_backward(&dy);
        assert_eq!(dx.data, vec![10.0]);
    }

    #[test]
    fn concat_splits_back() {
        let a = Tensor::from_data(1, 1, 2, vec![1.0, 2.0]);
        let b = Tensor::from_data(2, 1, 2, vec![3.0, 4.0, 5.0, 6.0]);
        let cat = concat(&a, &b);
        assert_eq!(cat.c, 3);
        let (da, db) = concat_backward(&cat, 1);
        assert_eq!(da.data, a.data);
        assert_eq!(db.data, b.data);
    }

    #[test]
    fn avgpool_means_blocks() {
        let x = Tensor::from_data(1, 2, 2, vec![1.0, 2.0, 3.0, 6.0]);
        let y = avgpool(&x, 2);
        assert_eq!(y.data, vec![3.0]);
    }
}
