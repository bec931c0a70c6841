//! Convolution and resampling primitives with explicit backward passes.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::FeatureMap;

/// Variance offset of the output normalization.
pub const NORM_EPS: f64 = 1e-5;

/// Square-kernel 2-D convolution with zero padding `kernel / 2`, optionally
/// followed by a per-sample normalization over all output values (group norm
/// with one group) and a per-channel affine map.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// `out_channels × (in_channels · kernel²)`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    /// Normalization scale and shift; both empty when the layer has no norm.
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

/// Gradient buffers matching a [`Conv2d`].
#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl ConvGrad {
    pub fn zeros_like(conv: &Conv2d) -> Self {
        Self {
            weight: vec![0.0; conv.weight.len()],
            bias: vec![0.0; conv.bias.len()],
            gamma: vec![0.0; conv.gamma.len()],
            beta: vec![0.0; conv.beta.len()],
        }
    }

    pub fn add_scaled(&mut self, other: &ConvGrad, scale: f64) {
        for (a, b) in self.params_mut().into_iter().zip(other.params()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    pub fn params(&self) -> [&Vec<f64>; 4] {
        [&self.weight, &self.bias, &self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [&mut self.weight, &mut self.bias, &mut self.gamma, &mut self.beta]
    }
}

/// Forward activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ConvCache {
    cols: Vec<f64>,
    in_shape: (usize, usize, usize),
    out_hw: (usize, usize),
    /// Normalized pre-affine output and its inverse std, when normalized.
    norm: Option<(Vec<f64>, f64)>,
}

impl Conv2d {
    /// He-normal weights, zero bias.
    pub fn init<R: Rng + ?Sized>(
        rng: &mut R,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            weight: (0..out_channels * in_channels * kernel * kernel)
                .map(|_| normal.sample(rng))
                .collect(),
            bias: vec![0.0; out_channels],
            gamma: Vec::new(),
            beta: Vec::new(),
        }
    }

    /// Adds the output normalization with unit scale and zero shift.
    pub fn with_norm(mut self) -> Self {
        self.gamma = vec![1.0; self.out_channels];
        self.beta = vec![0.0; self.out_channels];
        self
    }

    pub fn has_norm(&self) -> bool {
        !self.gamma.is_empty()
    }

    pub fn params(&self) -> [&Vec<f64>; 4] {
        [&self.weight, &self.bias, &self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [&mut self.weight, &mut self.bias, &mut self.gamma, &mut self.beta]
    }

    fn pad(&self) -> usize {
        self.kernel / 2
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let p = self.pad();
        (
            (h + 2 * p - self.kernel) / self.stride + 1,
            (w + 2 * p - self.kernel) / self.stride + 1,
        )
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn im2col(&self, x: &FeatureMap) -> (Vec<f64>, usize, usize) {
        let (c, h, w) = x.shape();
        let (ho, wo) = self.output_hw(h, w);
        let k = self.kernel;
        let pad = self.pad() as isize;
        let n = ho * wo;
        let mut cols = vec![0.0; self.patch_len() * n];
        let src = x.data();
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for oy in 0..ho {
                        let iy = (oy * self.stride) as isize + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = ci * h * w + iy as usize * w;
                        for ox in 0..wo {
                            let ix = (ox * self.stride) as isize + kx as isize - pad;
                            if ix >= 0 && ix < w as isize {
                                dst[oy * wo + ox] = src[base + ix as usize];
                            }
                        }
                    }
                }
            }
        }
        (cols, ho, wo)
    }

    fn col2im(&self, cols: &[f64], in_shape: (usize, usize, usize), out_hw: (usize, usize)) -> Vec<f64> {
        let (c, h, w) = in_shape;
        let (ho, wo) = out_hw;
        let k = self.kernel;
        let pad = self.pad() as isize;
        let n = ho * wo;
        let mut out = vec![0.0; c * h * w];
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &cols[row * n..(row + 1) * n];
                    for oy in 0..ho {
                        let iy = (oy * self.stride) as isize + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = ci * h * w + iy as usize * w;
                        for ox in 0..wo {
                            let ix = (ox * self.stride) as isize + kx as isize - pad;
                            if ix >= 0 && ix < w as isize {
                                out[base + ix as usize] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn forward(&self, x: &FeatureMap, layer_id: u8) -> (FeatureMap, ConvCache) {
        assert_eq!(x.channels(), self.in_channels, "conv input channels");
        let (cols, ho, wo) = self.im2col(x);
        let n = ho * wo;
        let kk = self.patch_len();
        let mut out = vec![0.0; self.out_channels * n];
        for (o, b) in self.bias.iter().enumerate() {
            out[o * n..(o + 1) * n].iter_mut().for_each(|v| *v = *b);
        }
        // out (O×N) += W (O×K) · cols (K×N)
        unsafe {
            matrixmultiply::dgemm(
                self.out_channels,
                kk,
                n,
                1.0,
                self.weight.as_ptr(),
                kk as isize,
                1,
                cols.as_ptr(),
                n as isize,
                1,
                1.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        let norm = self.has_norm().then(|| {
            let len = out.len() as f64;
            let mean = out.iter().sum::<f64>() / len;
            let var = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / len;
            let inv = 1.0 / (var + NORM_EPS).sqrt();
            let xhat: Vec<f64> = out.iter().map(|v| (v - mean) * inv).collect();
            for o in 0..self.out_channels {
                for (y, xh) in out[o * n..(o + 1) * n].iter_mut().zip(&xhat[o * n..(o + 1) * n]) {
                    *y = self.gamma[o] * xh + self.beta[o];
                }
            }
            (xhat, inv)
        });
        let y = FeatureMap::from_vec(out, self.out_channels, ho, wo, layer_id).expect("finite convolution output");
        (
            y,
            ConvCache {
                cols,
                in_shape: x.shape(),
                out_hw: (ho, wo),
                norm,
            },
        )
    }

    /// Accumulates parameter gradients into `grad` and, when requested,
    /// returns the gradient with respect to the input.
    pub fn backward(
        &self,
        cache: &ConvCache,
        grad_out: &FeatureMap,
        grad: &mut ConvGrad,
        need_input: bool,
    ) -> Option<FeatureMap> {
        let n = cache.out_hw.0 * cache.out_hw.1;
        let kk = self.patch_len();
        let normalized;
        let dy = match &cache.norm {
            None => grad_out.data(),
            Some((xhat, inv)) => {
                let g = grad_out.data();
                let mut dxhat = vec![0.0; g.len()];
                for o in 0..self.out_channels {
                    for i in o * n..(o + 1) * n {
                        grad.gamma[o] += g[i] * xhat[i];
                        grad.beta[o] += g[i];
                        dxhat[i] = g[i] * self.gamma[o];
                    }
                }
                let len = g.len() as f64;
                let mean_d = dxhat.iter().sum::<f64>() / len;
                let mean_dx = dxhat.iter().zip(xhat).map(|(d, x)| d * x).sum::<f64>() / len;
                normalized = dxhat
                    .iter()
                    .zip(xhat)
                    .map(|(d, x)| inv * (d - mean_d - x * mean_dx))
                    .collect::<Vec<f64>>();
                &normalized[..]
            }
        };
        for o in 0..self.out_channels {
            grad.bias[o] += dy[o * n..(o + 1) * n].iter().sum::<f64>();
        }
        // dW (O×K) += dY (O×N) · colsᵀ (N×K)
        unsafe {
            matrixmultiply::dgemm(
                self.out_channels,
                n,
                kk,
                1.0,
                dy.as_ptr(),
                n as isize,
                1,
                cache.cols.as_ptr(),
                1,
                n as isize,
                1.0,
                grad.weight.as_mut_ptr(),
                kk as isize,
                1,
            );
        }
        if !need_input {
            return None;
        }
        // dcols (K×N) = Wᵀ (K×O) · dY (O×N)
        let mut dcols = vec![0.0; kk * n];
        unsafe {
            matrixmultiply::dgemm(
                kk,
                self.out_channels,
                n,
                1.0,
                self.weight.as_ptr(),
                1,
                kk as isize,
                dy.as_ptr(),
                n as isize,
                1,
                0.0,
                dcols.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        let (c, h, w) = cache.in_shape;
        let dx = self.col2im(&dcols, cache.in_shape, cache.out_hw);
        Some(FeatureMap::from_vec(dx, c, h, w, 0).expect("finite input gradient"))
    }
}

pub fn relu_inplace(f: &mut FeatureMap) {
    f.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Zeroes gradient entries where the ReLU output was not positive.
pub fn relu_backward_inplace(output: &FeatureMap, grad: &mut FeatureMap) {
    for (g, &y) in grad.data_mut().iter_mut().zip(output.data()) {
        if y <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Per-axis taps of a half-pixel-centred bilinear resize.
#[derive(Clone, Debug)]
struct Taps {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

fn taps(src: usize, dst: usize) -> Taps {
    let scale = src as f64 / dst as f64;
    let mut t = Taps {
        lo: Vec::with_capacity(dst),
        hi: Vec::with_capacity(dst),
        frac: Vec::with_capacity(dst),
    };
    for d in 0..dst {
        let s = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
        let lo = (s.floor() as usize).min(src - 1);
        let hi = (lo + 1).min(src - 1);
        t.lo.push(lo);
        t.hi.push(hi);
        t.frac.push(s - lo as f64);
    }
    t
}

/// Bilinear resize (half-pixel centres, edge clamping).
pub fn bilinear_resize(x: &FeatureMap, out_h: usize, out_w: usize) -> FeatureMap {
    let (c, h, w) = x.shape();
    let ty = taps(h, out_h);
    let tx = taps(w, out_w);
    let mut out = vec![0.0; c * out_h * out_w];
    for ch in 0..c {
        let src = x.channel(ch);
        let dst = &mut out[ch * out_h * out_w..(ch + 1) * out_h * out_w];
        for oy in 0..out_h {
            let (y0, y1, fy) = (ty.lo[oy], ty.hi[oy], ty.frac[oy]);
            for ox in 0..out_w {
                let (x0, x1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                dst[oy * out_w + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    FeatureMap::from_vec(out, c, out_h, out_w, x.layer_id).expect("finite resize")
}

/// Adjoint of [`bilinear_resize`].
pub fn bilinear_resize_backward(grad_out: &FeatureMap, in_h: usize, in_w: usize) -> FeatureMap {
    let (c, out_h, out_w) = grad_out.shape();
    let ty = taps(in_h, out_h);
    let tx = taps(in_w, out_w);
    let mut out = vec![0.0; c * in_h * in_w];
    for ch in 0..c {
        let g = grad_out.channel(ch);
        let dst = &mut out[ch * in_h * in_w..(ch + 1) * in_h * in_w];
        for oy in 0..out_h {
            let (y0, y1, fy) = (ty.lo[oy], ty.hi[oy], ty.frac[oy]);
            for ox in 0..out_w {
                let (x0, x1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
                let v = g[oy * out_w + ox];
                dst[y0 * in_w + x0] += v * (1.0 - fy) * (1.0 - fx);
                dst[y0 * in_w + x1] += v * (1.0 - fy) * fx;
                dst[y1 * in_w + x0] += v * fy * (1.0 - fx);
                dst[y1 * in_w + x1] += v * fy * fx;
            }
        }
    }
    FeatureMap::from_vec(out, c, in_h, in_w, grad_out.layer_id).expect("finite resize gradient")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap {
        FeatureMap::from_vec((0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect(), c, h, w, 0).unwrap()
    }

    fn dot(a: &FeatureMap, b: &FeatureMap) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    /// Direct-loop convolution used as an independent reference.
    fn naive_conv(conv: &Conv2d, x: &FeatureMap) -> FeatureMap {
        let (c, h, w) = x.shape();
        let (ho, wo) = conv.output_hw(h, w);
        let k = conv.kernel;
        let pad = (k / 2) as isize;
        let mut out = FeatureMap::zeros(conv.out_channels, ho, wo, 0);
        for o in 0..conv.out_channels {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = conv.bias[o];
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * conv.stride) as isize + ky as isize - pad;
                                let ix = (ox * conv.stride) as isize + kx as isize - pad;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                    acc += conv.weight[((o * c + ci) * k + ky) * k + kx]
                                        * x.get(ci, iy as usize, ix as usize);
                                }
                            }
                        }
                    }
                    out.set(o, oy, ox, acc);
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for stride in [1, 2] {
            let mut conv = Conv2d::init(&mut rng, 3, 4, 3, stride);
            conv.bias = vec![0.1, -0.2, 0.3, 0.0];
            let x = random_map(&mut rng, 3, 7, 6);
            let (y, _) = conv.forward(&x, 1);
            let r = naive_conv(&conv, &x);
            assert_eq!(y.shape(), r.shape());
            for (a, b) in y.data().iter().zip(r.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = Conv2d::init(&mut rng, 2, 3, 3, 2);
        let x = random_map(&mut rng, 2, 5, 5);
        let (y, cache) = conv.forward(&x, 1);
        let gy = random_map(&mut rng, y.channels(), y.height(), y.width());
        let mut grad = ConvGrad::zeros_like(&conv);
        let gx = conv.backward(&cache, &gy, &mut grad, true).unwrap();
        // <gy, d/dx conv(x)·v> == <gx, v> for the linear part
        let v = random_map(&mut rng, 2, 5, 5);
        let zero_bias = Conv2d {
            bias: vec![0.0; 3],
            ..conv.clone()
        };
        let (yv, _) = zero_bias.forward(&v, 1);
        assert!((dot(&gy, &yv) - dot(&gx, &v)).abs() < 1e-10);

        // parameter gradient via finite differences on a weight entry
        let loss = |c: &Conv2d| dot(&c.forward(&x, 1).0, &gy);
        for i in [0, 7, 20, conv.weight.len() - 1] {
            let mut p = conv.clone();
            p.weight[i] += 1e-6;
            let mut m = conv.clone();
            m.weight[i] -= 1e-6;
            let fd = (loss(&p) - loss(&m)) / 2e-6;
            assert!((fd - grad.weight[i]).abs() < 1e-6);
        }
        let fd_bias: f64 = gy.channel(1).iter().sum();
        assert!((fd_bias - grad.bias[1]).abs() < 1e-12);
    }

    #[test]
    fn normalized_conv_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut conv = Conv2d::init(&mut rng, 2, 3, 3, 1).with_norm();
        conv.gamma = vec![0.7, 1.3, -0.4];
        conv.beta = vec![0.1, -0.2, 0.3];
        conv.bias = vec![0.05, -0.1, 0.2];
        let x = random_map(&mut rng, 2, 4, 4);
        let (y, cache) = conv.forward(&x, 1);
        let gy = random_map(&mut rng, y.channels(), y.height(), y.width());
        let mut grad = ConvGrad::zeros_like(&conv);
        let gx = conv.backward(&cache, &gy, &mut grad, true).unwrap();
        let loss = |c: &Conv2d, x: &FeatureMap| dot(&c.forward(x, 1).0, &gy);
        let h = 1e-6;
        for t in 0..4 {
            for i in 0..conv.params()[t].len() {
                let mut p = conv.clone();
                p.params_mut()[t][i] += h;
                let mut m = conv.clone();
                m.params_mut()[t][i] -= h;
                let fd = (loss(&p, &x) - loss(&m, &x)) / (2.0 * h);
                assert!(
                    (fd - grad.params()[t][i]).abs() < 1e-6,
                    "param {t}[{i}]: {fd} vs {}",
                    grad.params()[t][i]
                );
            }
        }
        for i in 0..x.data().len() {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            let fd = (loss(&conv, &p) - loss(&conv, &m)) / (2.0 * h);
            assert!((fd - gx.data()[i]).abs() < 1e-6);
        }
        // normalized output has zero mean and unit variance before the affine map
        let plain = Conv2d {
            gamma: vec![1.0; 3],
            beta: vec![0.0; 3],
            ..conv.clone()
        };
        let z = plain.forward(&x, 1).0;
        let len = z.data().len() as f64;
        let mean = z.data().iter().sum::<f64>() / len;
        let var = z.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / len;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-3);
    }

    #[test]
    fn bilinear_identity_and_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_map(&mut rng, 2, 4, 5);
        assert_eq!(bilinear_resize(&x, 4, 5), x);
        let k = FeatureMap::from_vec(vec![3.0; 4], 1, 2, 2, 0).unwrap();
        assert!(bilinear_resize(&k, 8, 8)
            .data()
            .iter()
            .all(|&v| (v - 3.0).abs() < 1e-12));
    }

    #[test]
    fn bilinear_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_map(&mut rng, 2, 3, 4);
        let gy = random_map(&mut rng, 2, 12, 16);
        let y = bilinear_resize(&x, 12, 16);
        let gx = bilinear_resize_backward(&gy, 3, 4);
        assert!((dot(&y, &gy) - dot(&x, &gx)).abs() < 1e-10);
    }
}
