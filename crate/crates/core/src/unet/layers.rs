//! Convolution, normalization and resampling layers with hand-written
//! backward passes. All layers process the batch one sample at a time, so
//! eval-mode results never depend on batch composition.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::gemm::{gemm, Mat};
use super::tensor::Tensor;

/// Output pixels per im2col block; caps the column buffer for large scenes.
const COL_BLOCK_PIXELS: usize = 8192;

pub const BN_MOMENTUM: f32 = 0.1;
pub const BN_EPSILON: f32 = 1e-5;

/// A trainable tensor and its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
}

impl Param {
    fn new(name: String, shape: Vec<usize>, value: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![0.0; value.len()];
        Self {
            name,
            shape,
            value,
            grad,
        }
    }

    fn kaiming(name: String, shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let n = shape.iter().product();
        let value = (0..n).map(|_| normal.sample(rng) as f32).collect();
        Self::new(name, shape, value)
    }

    fn filled(name: String, len: usize, v: f32) -> Self {
        Self::new(name, vec![len], vec![v; len])
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Stride-1 convolution with `k`×`k` kernels (k ∈ {1, 3}) and zero "same" padding.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub weight: Param,
    pub bias: Param,
}

impl Conv2d {
    pub fn new(prefix: &str, in_ch: usize, out_ch: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        assert!(kernel == 1 || kernel == 3);
        let fan_in = in_ch * kernel * kernel;
        Self {
            in_ch,
            out_ch,
            kernel,
            weight: Param::kaiming(
                format!("{prefix}.weight"),
                vec![out_ch, in_ch, kernel, kernel],
                fan_in,
                rng,
            ),
            bias: Param::filled(format!("{prefix}.bias"), out_ch, 0.0),
        }
    }

    fn taps(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn rows_per_block(width: usize) -> usize {
        (COL_BLOCK_PIXELS / width).max(1)
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        debug_assert_eq!(x.channels, self.in_ch);
        let (h, w) = (x.height, x.width);
        let hw = h * w;
        let mut out = Tensor::zeros(x.batch, self.out_ch, h, w);
        let mut col = Vec::new();
        for n in 0..x.batch {
            let src = x.sample(n);
            let dst = out.sample_mut(n);
            for (co, plane) in dst.chunks_exact_mut(hw).enumerate() {
                plane.fill(self.bias.value[co]);
            }
            let wmat = Mat::row_major(&self.weight.value, self.out_ch, self.taps());
            if self.kernel == 1 {
                gemm(wmat, Mat::row_major(src, self.in_ch, hw), 1.0, dst, hw);
                continue;
            }
            let rows = Self::rows_per_block(w);
            for y0 in (0..h).step_by(rows) {
                let y1 = (y0 + rows).min(h);
                let p = (y1 - y0) * w;
                im2col3(src, self.in_ch, h, w, y0, y1, &mut col);
                gemm(wmat, Mat::row_major(&col, self.taps(), p), 1.0, &mut dst[y0 * w..], hw);
            }
        }
        out
    }

    /// Accumulates parameter gradients; returns the input gradient when
    /// `need_input_grad`.
    pub fn backward(&mut self, x: &Tensor, dy: &Tensor, need_input_grad: bool) -> Option<Tensor> {
        let (h, w) = (x.height, x.width);
        let hw = h * w;
        let taps = self.taps();
        let mut dx = need_input_grad.then(|| Tensor::zeros(x.batch, self.in_ch, h, w));
        let mut col = Vec::new();
        let mut dcol = Vec::new();
        for n in 0..x.batch {
            let src = x.sample(n);
            let g = dy.sample(n);
            for (co, plane) in g.chunks_exact(hw).enumerate() {
                self.bias.grad[co] += plane.iter().sum::<f32>();
            }
            if self.kernel == 1 {
                gemm(
                    Mat::row_major(g, self.out_ch, hw),
                    Mat::row_major(src, self.in_ch, hw).t(),
                    1.0,
                    &mut self.weight.grad,
                    taps,
                );
                if let Some(dx) = dx.as_mut() {
                    gemm(
                        Mat::row_major(&self.weight.value, self.out_ch, taps).t(),
                        Mat::row_major(g, self.out_ch, hw),
                        0.0,
                        dx.sample_mut(n),
                        hw,
                    );
                }
                continue;
            }
            let rows = Self::rows_per_block(w);
            for y0 in (0..h).step_by(rows) {
                let y1 = (y0 + rows).min(h);
                let p = (y1 - y0) * w;
                let g_block = Mat::strided(&g[y0 * w..], self.out_ch, p, hw);
                im2col3(src, self.in_ch, h, w, y0, y1, &mut col);
                gemm(
                    g_block,
                    Mat::row_major(&col, taps, p).t(),
                    1.0,
                    &mut self.weight.grad,
                    taps,
                );
                if let Some(dx) = dx.as_mut() {
                    dcol.resize(taps * p, 0.0);
                    gemm(
                        Mat::row_major(&self.weight.value, self.out_ch, taps).t(),
                        g_block,
                        0.0,
                        &mut dcol,
                        p,
                    );
                    col2im3_add(&dcol, self.in_ch, h, w, y0, y1, dx.sample_mut(n));
                }
            }
        }
        dx
    }
}

/// Column matrix for output rows `y0..y1`: row `ci*9 + ky*3 + kx`, column
/// `(y - y0) * w + x` holds `src[ci, y + ky - 1, x + kx - 1]` (zero outside).
fn im2col3(src: &[f32], ch: usize, h: usize, w: usize, y0: usize, y1: usize, col: &mut Vec<f32>) {
    let p = (y1 - y0) * w;
    col.clear();
    col.resize(ch * 9 * p, 0.0);
    for ci in 0..ch {
        let plane = &src[ci * h * w..(ci + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[((ci * 9) + ky * 3 + kx) * p..][..p];
                for y in y0..y1 {
                    let dst = &mut row[(y - y0) * w..(y - y0 + 1) * w];
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s = &plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => dst[1..].copy_from_slice(&s[..w - 1]),
                        1 => dst.copy_from_slice(s),
                        _ => dst[..w - 1].copy_from_slice(&s[1..]),
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col3`]: scatters column gradients back onto the input.
fn col2im3_add(dcol: &[f32], ch: usize, h: usize, w: usize, y0: usize, y1: usize, dx: &mut [f32]) {
    let p = (y1 - y0) * w;
    for ci in 0..ch {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &dcol[((ci * 9) + ky * 3 + kx) * p..][..p];
                for y in y0..y1 {
                    let g = &row[(y - y0) * w..(y - y0 + 1) * w];
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let d = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => d[..w - 1].iter_mut().zip(&g[1..]).for_each(|(a, b)| *a += b),
                        1 => d.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                        _ => d[1..].iter_mut().zip(&g[..w - 1]).for_each(|(a, b)| *a += b),
                    }
                }
            }
        }
    }
}

/// Per-channel batch normalization with running statistics for eval mode.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub channels: usize,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
}

/// Saved batch statistics for the backward pass.
#[derive(Debug)]
pub struct BnCache {
    xhat: Tensor,
    inv_std: Vec<f32>,
    mean: Vec<f32>,
    unbiased_var: Vec<f32>,
}

impl BatchNorm2d {
    pub fn new(prefix: &str, channels: usize) -> Self {
        Self {
            channels,
            gamma: Param::filled(format!("{prefix}.weight"), channels, 1.0),
            beta: Param::filled(format!("{prefix}.bias"), channels, 0.0),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    pub fn forward_eval(&self, x: &mut Tensor) {
        let hw = x.plane_len();
        for n in 0..x.batch {
            for (c, plane) in x.sample_mut(n).chunks_exact_mut(hw).enumerate() {
                let inv = 1.0 / (self.running_var[c] + BN_EPSILON).sqrt();
                let scale = self.gamma.value[c] * inv;
                let shift = self.beta.value[c] - self.running_mean[c] * scale;
                plane.iter_mut().for_each(|v| *v = *v * scale + shift);
            }
        }
    }

    /// Normalizes with batch statistics. Running statistics are updated
    /// separately through [`BatchNorm2d::update_running`].
    pub fn forward_train(&self, x: &mut Tensor) -> BnCache {
        let hw = x.plane_len();
        let count = (x.batch * hw) as f64;
        let mut mean = vec![0f32; self.channels];
        let mut var = vec![0f32; self.channels];
        let mut unbiased_var = vec![0f32; self.channels];
        let mut inv_std = vec![0f32; self.channels];
        for c in 0..self.channels {
            let xs: &Tensor = x;
            let planes = || (0..xs.batch).flat_map(move |n| xs.sample(n)[c * hw..(c + 1) * hw].iter());
            let s: f64 = planes().map(|&v| v as f64).sum();
            let m = s / count;
            let sq: f64 = planes().map(|&v| (v as f64 - m).powi(2)).sum();
            let v = sq / count;
            mean[c] = m as f32;
            var[c] = v as f32;
            unbiased_var[c] = if count > 1.0 { (sq / (count - 1.0)) as f32 } else { v as f32 };
            inv_std[c] = (1.0 / (v + BN_EPSILON as f64).sqrt()) as f32;
        }
        for n in 0..x.batch {
            for (c, plane) in x.sample_mut(n).chunks_exact_mut(hw).enumerate() {
                plane.iter_mut().for_each(|v| *v = (*v - mean[c]) * inv_std[c]);
            }
        }
        let xhat = x.clone();
        for n in 0..x.batch {
            for (c, plane) in x.sample_mut(n).chunks_exact_mut(hw).enumerate() {
                let (g, b) = (self.gamma.value[c], self.beta.value[c]);
                plane.iter_mut().for_each(|v| *v = *v * g + b);
            }
        }
        BnCache {
            xhat,
            inv_std,
            mean,
            unbiased_var,
        }
    }

    pub fn update_running(&mut self, cache: &BnCache) {
        for c in 0..self.channels {
            self.running_mean[c] = (1.0 - BN_MOMENTUM) * self.running_mean[c] + BN_MOMENTUM * cache.mean[c];
            self.running_var[c] =
                (1.0 - BN_MOMENTUM) * self.running_var[c] + BN_MOMENTUM * cache.unbiased_var[c];
        }
    }

    /// In-place: `dy` becomes the input gradient.
    pub fn backward(&mut self, cache: &BnCache, dy: &mut Tensor) {
        let hw = dy.plane_len();
        let count = (dy.batch * hw) as f64;
        for c in 0..self.channels {
            let mut sum_dy = 0f64;
            let mut sum_dy_xhat = 0f64;
            for n in 0..dy.batch {
                let g = &dy.sample(n)[c * hw..(c + 1) * hw];
                let xh = &cache.xhat.sample(n)[c * hw..(c + 1) * hw];
                for (&gv, &xv) in g.iter().zip(xh) {
                    sum_dy += gv as f64;
                    sum_dy_xhat += (gv * xv) as f64;
                }
            }
            self.gamma.grad[c] += sum_dy_xhat as f32;
            self.beta.grad[c] += sum_dy as f32;
            let gamma = self.gamma.value[c];
            let k = gamma * cache.inv_std[c];
            let mean_dy = (sum_dy / count) as f32;
            let mean_dy_xhat = (sum_dy_xhat / count) as f32;
            for n in 0..dy.batch {
                let xh = &cache.xhat.sample(n)[c * hw..(c + 1) * hw];
                let g = &mut dy.sample_mut(n)[c * hw..(c + 1) * hw];
                for (gv, &xv) in g.iter_mut().zip(xh) {
                    *gv = k * (*gv - mean_dy - xv * mean_dy_xhat);
                }
            }
        }
    }
}

pub fn relu_inplace(x: &mut Tensor) {
    x.data.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Masks `dy` by the positive entries of the ReLU output.
pub fn relu_backward(out: &Tensor, dy: &mut Tensor) {
    for (g, &o) in dy.data.iter_mut().zip(&out.data) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

/// 2×2 max pooling with stride 2. Returns the pooled tensor and the winning
/// offset (0..4) inside each window; ties keep the first offset.
pub fn max_pool2(x: &Tensor) -> (Tensor, Vec<u8>) {
    let (h, w) = (x.height / 2, x.width / 2);
    let mut out = Tensor::zeros(x.batch, x.channels, h, w);
    let mut arg = vec![0u8; out.data.len()];
    let iw = x.width;
    for n in 0..x.batch {
        for c in 0..x.channels {
            let src = &x.sample(n)[c * x.plane_len()..(c + 1) * x.plane_len()];
            let base = (n * x.channels + c) * h * w;
            for y in 0..h {
                for xx in 0..w {
                    let i0 = 2 * y * iw + 2 * xx;
                    let cand = [src[i0], src[i0 + 1], src[i0 + iw], src[i0 + iw + 1]];
                    let mut best = 0;
                    for k in 1..4 {
                        if cand[k] > cand[best] {
                            best = k;
                        }
                    }
                    out.data[base + y * w + xx] = cand[best];
                    arg[base + y * w + xx] = best as u8;
                }
            }
        }
    }
    (out, arg)
}

pub fn max_pool2_backward(dy: &Tensor, arg: &[u8], in_h: usize, in_w: usize) -> Tensor {
    let mut dx = Tensor::zeros(dy.batch, dy.channels, in_h, in_w);
    let (h, w) = (dy.height, dy.width);
    for nc in 0..dy.batch * dy.channels {
        let g = &dy.data[nc * h * w..(nc + 1) * h * w];
        let a = &arg[nc * h * w..(nc + 1) * h * w];
        let d = &mut dx.data[nc * in_h * in_w..(nc + 1) * in_h * in_w];
        for y in 0..h {
            for x in 0..w {
                let k = a[y * w + x] as usize;
                d[(2 * y + k / 2) * in_w + 2 * x + k % 2] += g[y * w + x];
            }
        }
    }
    dx
}

/// 2×2 transposed convolution with stride 2; weight layout `[in, out, 2, 2]`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2x2 {
    pub in_ch: usize,
    pub out_ch: usize,
    pub weight: Param,
    pub bias: Param,
}

impl ConvTranspose2x2 {
    pub fn new(prefix: &str, in_ch: usize, out_ch: usize, rng: &mut impl Rng) -> Self {
        Self {
            in_ch,
            out_ch,
            weight: Param::kaiming(format!("{prefix}.weight"), vec![in_ch, out_ch, 2, 2], in_ch, rng),
            bias: Param::filled(format!("{prefix}.bias"), out_ch, 0.0),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let (h, w) = (x.height, x.width);
        let hw = h * w;
        let rows = self.out_ch * 4;
        let mut out = Tensor::zeros(x.batch, self.out_ch, 2 * h, 2 * w);
        let mut tmp = vec![0f32; rows * hw];
        let wmat = Mat::row_major(&self.weight.value, self.in_ch, rows).t();
        for n in 0..x.batch {
            gemm(wmat, Mat::row_major(x.sample(n), self.in_ch, hw), 0.0, &mut tmp, hw);
            let dst = out.sample_mut(n);
            for co in 0..self.out_ch {
                let b = self.bias.value[co];
                let plane = &mut dst[co * 4 * hw..(co + 1) * 4 * hw];
                for k in 0..4 {
                    let (dy, dx) = (k / 2, k % 2);
                    let t = &tmp[(co * 4 + k) * hw..(co * 4 + k + 1) * hw];
                    for y in 0..h {
                        let orow = &mut plane[(2 * y + dy) * 2 * w..(2 * y + dy + 1) * 2 * w];
                        for x in 0..w {
                            orow[2 * x + dx] = t[y * w + x] + b;
                        }
                    }
                }
            }
        }
        out
    }

    pub fn backward(&mut self, x: &Tensor, dy: &Tensor) -> Tensor {
        let (h, w) = (x.height, x.width);
        let hw = h * w;
        let rows = self.out_ch * 4;
        let mut dx = Tensor::zeros(x.batch, self.in_ch, h, w);
        let mut gathered = vec![0f32; rows * hw];
        for n in 0..x.batch {
            let g = dy.sample(n);
            for co in 0..self.out_ch {
                let plane = &g[co * 4 * hw..(co + 1) * 4 * hw];
                self.bias.grad[co] += plane.iter().sum::<f32>();
                for k in 0..4 {
                    let (ky, kx) = (k / 2, k % 2);
                    let t = &mut gathered[(co * 4 + k) * hw..(co * 4 + k + 1) * hw];
                    for y in 0..h {
                        let grow = &plane[(2 * y + ky) * 2 * w..(2 * y + ky + 1) * 2 * w];
                        for x in 0..w {
                            t[y * w + x] = grow[2 * x + kx];
                        }
                    }
                }
            }
            gemm(
                Mat::row_major(x.sample(n), self.in_ch, hw),
                Mat::row_major(&gathered, rows, hw).t(),
                1.0,
                &mut self.weight.grad,
                rows,
            );
            gemm(
                Mat::row_major(&self.weight.value, self.in_ch, rows),
                Mat::row_major(&gathered, rows, hw),
                0.0,
                dx.sample_mut(n),
                hw,
            );
        }
        dx
    }
}
