//! CHW tensors, parameter storage and the matmul kernels behind conv.

use rand::prelude::*;
use rand_pcg::Pcg64Mcg;

/// A single-sample feature tensor in channel-major CHW layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Tensor {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn from_data(c: usize, h: usize, w: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), c * h * w, "tensor data length mismatch");
        Tensor { c, h, w, data }
    }

    #[inline]
    pub fn plane(&self, c: usize) -> &[f32] {
        &self.data[c * self.h * self.w..(c + 1) * self.h * self.w]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn assert_finite(&self, what: &str) -> crate::Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(crate::Error::Numeric(format!("non-finite values in {what}")))
        }
    }
}

/// One learnable tensor plus its shape tag (documentation only; storage is
/// flat).
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub data: Vec<f32>,
}

/// All parameters of a model, addressed by index.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    pub params: Vec<Param>,
    rng: Option<Pcg64Mcg>,
}

impl ParamSet {
    pub fn with_seed(seed: u64) -> Self {
        ParamSet {
            params: Vec::new(),
            rng: Some(Pcg64Mcg::seed_from_u64(seed)),
        }
    }

    /// Register a tensor initialized from N(0, std^2) via Box-Muller.
    pub fn register_normal(&mut self, name: &str, len: usize, std: f32) -> usize {
        let rng = self.rng.as_mut().expect("ParamSet built without seed");
        let mut data = Vec::with_capacity(len);
        while data.len() < len {
            let u1: f64 = rng.random::<f64>().max(1e-12);
            let u2: f64 = rng.random();
            let r = (-2.0 * u1.ln()).sqrt();
            let theta = 2.0 * std::f64::consts::PI * u2;
            data.push((r * theta.cos()) as f32 * std);
            if data.len() < len {
                data.push((r * theta.sin()) as f32 * std);
            }
        }
        self.params.push(Param {
            name: name.to_string(),
            data,
        });
        self.params.len() - 1
    }

    pub fn register_zeros(&mut self, name: &str, len: usize) -> usize {
        self.params.push(Param {
            name: name.to_string(),
            data: vec![0.0; len],
        });
        self.params.len() - 1
    }

    pub fn total_len(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }
}

/// Gradient buffers mirroring a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct GradSet {
    pub grads: Vec<Vec<f32>>,
}

impl GradSet {
    pub fn zeros_like(params: &ParamSet) -> Self {
        GradSet {
            grads: params.params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
        }
    }

    /// Accumulate another gradient set into this one.
    pub fn add(&mut self, other: &GradSet) {
        for (dst, src) in self.grads.iter_mut().zip(&other.grads) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }

    pub fn scale(&mut self, factor: f32) {
        for g in &mut self.grads {
            for v in g.iter_mut() {
                *v *= factor;
            }
        }
    }
}

/// `out[m,n] = a[m,k] * b[k,n]`, row-major, accumulating into `out`.
pub fn matmul_acc(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// `out[m,p] = a[m,n] * b[p,n]^T`, accumulating.
pub fn matmul_nt_acc(a: &[f32], b: &[f32], out: &mut [f32], m: usize, n: usize, p: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), p * n);
    debug_assert_eq!(out.len(), m * p);
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for q in 0..p {
            let brow = &b[q * n..(q + 1) * n];
            let mut acc = 0.0f32;
            for j in 0..n {
                acc += arow[j] * brow[j];
            }
            out[i * p + q] += acc;
        }
    }
}

/// `out[k,n] = a[m,k]^T * b[m,n]`, accumulating.
pub fn matmul_tn_acc(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (q, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[q * n..(q + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree_with_naive() {
        let mut rng = Pcg64Mcg::seed_from_u64(5);
        let (m, k, n) = (4, 5, 6);
        let a: Vec<f32> = (0..m * k).map(|_| rng.random::<f32>() - 0.5).collect();
        let b: Vec<f32> = (0..k * n).map(|_| rng.random::<f32>() - 0.5).collect();

        let mut out = vec![0.0; m * n];
        matmul_acc(&a, &b, &mut out, m, k, n);
        for i in 0..m {
            for j in 0..n {
                let want: f32 = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
                assert!((out[i * n + j] - want).abs() < 1e-5);
            }
        }

        // c[m,p] = a[m,k] * d[p,k]^T
        let p = 3;
        let d: Vec<f32> = (0..p * k).map(|_| rng.random::<f32>() - 0.5).collect();
        let mut out_nt = vec![0.0; m * p];
        matmul_nt_acc(&a, &d, &mut out_nt, m, k, p);
        for i in 0..m {
            for q in 0..p {
                let want: f32 = (0..k).map(|j| a[i * k + j] * d[q * k + j]).sum();
                assert!((out_nt[i * p + q] - want).abs() < 1e-5);
            }
        }

        // e[k,n] = a[m,k]^T * f[m,n]
        let f: Vec<f32> = (0..m * n).map(|_| rng.random::<f32>() - 0.5).collect();
        let mut out_tn = vec![0.0; k * n];
        matmul_tn_acc(&a, &f, &mut out_tn, m, k, n);
        for q in 0..k {
            for j in 0..n {
                let want: f32 = (0..m).map(|i| a[i * k + q] * f[i * n + j]).sum();
                assert!((out_tn[q * n + j] - want).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn normal_init_is_seeded_and_reproducible() {
        let mut a = ParamSet::with_seed(9);
        let mut b = ParamSet::with_seed(9);
        let ia = a.register_normal("w", 1000, 0.1);
        let ib = b.register_normal("w", 1000, 0.1);
        assert_eq!(a.params[ia].data, b.params[ib].data);
        let mean: f32 = a.params[ia].data.iter().sum::<f32>() / 1000.0;
        assert!(mean.abs() < 0.02);
    }
}
