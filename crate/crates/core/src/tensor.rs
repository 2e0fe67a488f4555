//! Dense tensor primitives: convolution, pooling, bilinear resizing,
//! normalization and activations.
//!
//! All feature maps are rank-3 `(channels, height, width)` with row-major f32
//! storage. Inner accumulations run in f64 and are cast back to f32 once, so
//! results are deterministic and insensitive to accumulation length. Every
//! operation is a pure function: same inputs give bit-identical outputs.

use crate::error::{Error, Result};
use crate::weights::ConvWeights;

/// Rank-3 feature map, channel-major, row-major within each channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Tensor {
    /// Build a tensor from raw data. Dimensions must be >= 1, the data length
    /// must equal `channels * height * width`, and all values must be finite.
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::config(format!(
                "tensor dimensions must be >= 1, got {channels}x{height}x{width}"
            )));
        }
        let expect = channels * height * width;
        if data.len() != expect {
            return Err(Error::config(format!(
                "tensor data length {} does not match {channels}x{height}x{width} = {expect}",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::config("tensor contains non-finite values"));
        }
        Ok(Tensor { channels, height, width, data })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Tensor { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Tensor { channels, height, width, data: vec![value; channels * height * width] }
    }

    /// Build a tensor by evaluating `f(c, y, x)` at every position.
    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Tensor { channels, height, width, data }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    /// Pixels per channel.
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.idx(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let i = self.idx(c, y, x);
        self.data[i] = v;
    }

    /// Row-major slice of one channel.
    pub fn channel(&self, c: usize) -> &[f32] {
        &self.data[c * self.pixels()..(c + 1) * self.pixels()]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Top-left crop to `(height, width)`.
    pub fn crop(&self, height: usize, width: usize) -> Result<Tensor> {
        if height == 0 || width == 0 || height > self.height || width > self.width {
            return Err(Error::config(format!(
                "invalid crop {}x{} of {}x{}",
                height, width, self.height, self.width
            )));
        }
        Ok(Tensor::from_fn(self.channels, height, width, |c, y, x| self.at(c, y, x)))
    }

    /// Elementwise sum; shapes must match.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(Error::config(format!(
                "add shape mismatch: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Tensor { channels: self.channels, height: self.height, width: self.width, data })
    }
}

/// Output spatial size of a convolution: `floor((in + 2*pad - kernel)/stride) + 1`.
pub(crate) fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Single output element of a cross-correlation, zero padding.
///
/// Accumulation order is pinned: kernel rows, kernel columns, then input
/// channels, with the bias added last. Both the dense and the masked
/// convolution paths go through this function, which is what makes them
/// bit-identical at computed positions.
#[inline]
pub(crate) fn conv_at(
    input: &Tensor,
    w: &ConvWeights,
    oc: usize,
    oy: usize,
    ox: usize,
    stride: usize,
    padding: usize,
) -> f32 {
    let (kh, kw) = (w.kernel_h, w.kernel_w);
    let (ih, iw) = (input.height(), input.width());
    let cin = w.in_channels;
    let mut acc = 0.0f64;
    for ky in 0..kh {
        let iy = (oy * stride + ky) as isize - padding as isize;
        if iy < 0 || iy >= ih as isize {
            continue;
        }
        let iy = iy as usize;
        for kx in 0..kw {
            let ix = (ox * stride + kx) as isize - padding as isize;
            if ix < 0 || ix >= iw as isize {
                continue;
            }
            let ix = ix as usize;
            for ic in 0..cin {
                let v = input.at(ic, iy, ix) as f64;
                let k = w.weight_at(oc, ic, ky, kx) as f64;
                acc += v * k;
            }
        }
    }
    (acc + w.bias[oc] as f64) as f32
}

/// Dense 2-D cross-correlation with bias, zero padding, stride 1 or 2.
pub fn conv2d(input: &Tensor, w: &ConvWeights, stride: usize, padding: usize) -> Result<Tensor> {
    if input.channels() != w.in_channels {
        return Err(Error::config(format!(
            "conv expects {} input channels, tensor has {}",
            w.in_channels,
            input.channels()
        )));
    }
    if !(stride == 1 || stride == 2) {
        return Err(Error::config(format!("conv stride must be 1 or 2, got {stride}")));
    }
    let oh = conv_out_dim(input.height(), w.kernel_h, stride, padding)
        .ok_or_else(|| Error::config("conv kernel exceeds padded input height"))?;
    let ow = conv_out_dim(input.width(), w.kernel_w, stride, padding)
        .ok_or_else(|| Error::config("conv kernel exceeds padded input width"))?;
    let mut out = Tensor::zeros(w.out_channels, oh, ow);
    for oc in 0..w.out_channels {
        for oy in 0..oh {
            for ox in 0..ow {
                out.set(oc, oy, ox, conv_at(input, w, oc, oy, ox, stride, padding));
            }
        }
    }
    debug_assert!(out.all_finite());
    Ok(out)
}

/// 2x2 non-overlapping average pooling. Odd trailing rows/columns are handled
/// by edge replication, so the output is `ceil(H/2) x ceil(W/2)` and D
/// consecutive poolings stay defined for any input.
pub fn avg_pool2(input: &Tensor) -> Tensor {
    let (c, h, w) = input.shape();
    let oh = h.div_ceil(2);
    let ow = w.div_ceil(2);
    let mut out = Tensor::zeros(c, oh, ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0f64;
                for dy in 0..2 {
                    let iy = (2 * oy + dy).min(h - 1);
                    for dx in 0..2 {
                        let ix = (2 * ox + dx).min(w - 1);
                        acc += input.at(ch, iy, ix) as f64;
                    }
                }
                out.set(ch, oy, ox, (acc / 4.0) as f32);
            }
        }
    }
    debug_assert!(out.all_finite());
    out
}

/// Bilinear resize to an arbitrary target size, align-corners = false:
/// source coordinate of output x is `(x + 0.5) * in/out - 0.5`, clamped to
/// the source extent.
pub fn bilinear_resize(input: &Tensor, target_h: usize, target_w: usize) -> Result<Tensor> {
    if target_h == 0 || target_w == 0 {
        return Err(Error::config("resize target must be >= 1"));
    }
    let (c, h, w) = input.shape();
    let scale_y = h as f64 / target_h as f64;
    let scale_x = w as f64 / target_w as f64;
    let mut out = Tensor::zeros(c, target_h, target_w);
    for oy in 0..target_h {
        let sy = ((oy as f64 + 0.5) * scale_y - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for ox in 0..target_w {
            let sx = ((ox as f64 + 0.5) * scale_x - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            for ch in 0..c {
                let v00 = input.at(ch, y0, x0) as f64;
                let v01 = input.at(ch, y0, x1) as f64;
                let v10 = input.at(ch, y1, x0) as f64;
                let v11 = input.at(ch, y1, x1) as f64;
                let top = v00 * (1.0 - fx) + v01 * fx;
                let bot = v10 * (1.0 - fx) + v11 * fx;
                out.set(ch, oy, ox, (top * (1.0 - fy) + bot * fy) as f32);
            }
        }
    }
    debug_assert!(out.all_finite());
    Ok(out)
}

/// Bilinear 2x upsampling (align-corners = false).
pub fn bilinear_upsample2(input: &Tensor) -> Tensor {
    bilinear_resize(input, input.height() * 2, input.width() * 2)
        .expect("2x target is always valid")
}

/// Inference-mode batch normalization: `(x - mean)/sqrt(var + eps) * gamma + beta`
/// per channel.
pub fn batchnorm_infer(
    input: &Tensor,
    mean: &[f32],
    var: &[f32],
    gamma: &[f32],
    beta: &[f32],
    eps: f32,
) -> Result<Tensor> {
    let c = input.channels();
    for (name, p) in [("mean", mean), ("var", var), ("gamma", gamma), ("beta", beta)] {
        if p.len() != c {
            return Err(Error::config(format!(
                "batchnorm {name} has {} entries, tensor has {c} channels",
                p.len()
            )));
        }
    }
    for (ch, &v) in var.iter().enumerate() {
        if v < 0.0 {
            return Err(Error::config(format!("batchnorm var[{ch}] is negative")));
        }
        if (v as f64 + eps as f64) <= 0.0 {
            return Err(Error::config(format!("batchnorm var[{ch}] + eps is not positive")));
        }
    }
    let mut out = input.clone();
    let px = input.pixels();
    for ch in 0..c {
        let m = mean[ch] as f64;
        let denom = (var[ch] as f64 + eps as f64).sqrt();
        let g = gamma[ch] as f64;
        let b = beta[ch] as f64;
        for v in &mut out.data_mut()[ch * px..(ch + 1) * px] {
            *v = (((*v as f64) - m) / denom * g + b) as f32;
        }
    }
    debug_assert!(out.all_finite());
    Ok(out)
}

/// Pointwise `max(0, x)`.
pub fn relu(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    for v in out.data_mut() {
        *v = v.max(0.0);
    }
    out
}

/// Per-pixel softmax over one pixel's channel column, max-subtracted.
#[inline]
pub(crate) fn softmax_pixel(input: &Tensor, y: usize, x: usize, out: &mut [f32]) {
    let c = input.channels();
    debug_assert_eq!(out.len(), c);
    let mut max = f32::NEG_INFINITY;
    for ch in 0..c {
        max = max.max(input.at(ch, y, x));
    }
    let mut sum = 0.0f64;
    for (ch, slot) in out.iter_mut().enumerate() {
        let e = ((input.at(ch, y, x) - max) as f64).exp();
        *slot = e as f32;
        sum += e;
    }
    for v in out.iter_mut() {
        *v = (*v as f64 / sum) as f32;
    }
}

/// Per-pixel softmax over the channel axis.
pub fn softmax_channels(input: &Tensor) -> Tensor {
    let (c, h, w) = input.shape();
    let mut out = Tensor::zeros(c, h, w);
    let mut col = vec![0.0f32; c];
    for y in 0..h {
        for x in 0..w {
            softmax_pixel(input, y, x, &mut col);
            for (ch, &p) in col.iter().enumerate() {
                out.set(ch, y, x, p);
            }
        }
    }
    debug_assert!(out.all_finite());
    out
}
