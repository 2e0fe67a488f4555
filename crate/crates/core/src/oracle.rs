//! Independent brute-force reference implementations.
//!
//! These deliberately share no code with the production operations: different
//! loop structure, explicit padding handling, direct weight evaluation. They
//! exist solely to check the fast paths and are used by the verification
//! command and the test suites.

use crate::error::{Error, Result};
use crate::masked::Mask;
use crate::tensor::Tensor;
use crate::weights::ConvWeights;

/// Six-nested-loop cross-correlation with zero padding, f64 accumulation,
/// loop order: output channel, output row, output column, input channel,
/// kernel row, kernel column.
pub fn conv2d_reference(
    input: &Tensor,
    w: &ConvWeights,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    if input.channels() != w.in_channels {
        return Err(Error::config("reference conv channel mismatch"));
    }
    let padded_h = input.height() + 2 * padding;
    let padded_w = input.width() + 2 * padding;
    if padded_h < w.kernel_h || padded_w < w.kernel_w {
        return Err(Error::config("reference conv kernel exceeds padded input"));
    }
    let oh = (padded_h - w.kernel_h) / stride + 1;
    let ow = (padded_w - w.kernel_w) / stride + 1;
    let mut out = Tensor::zeros(w.out_channels, oh, ow);
    for oc in 0..w.out_channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = w.bias[oc] as f64;
                for ic in 0..w.in_channels {
                    for ky in 0..w.kernel_h {
                        for kx in 0..w.kernel_w {
                            let iy = oy as isize * stride as isize + ky as isize
                                - padding as isize;
                            let ix = ox as isize * stride as isize + kx as isize
                                - padding as isize;
                            let v = if iy >= 0
                                && iy < input.height() as isize
                                && ix >= 0
                                && ix < input.width() as isize
                            {
                                input.at(ic, iy as usize, ix as usize) as f64
                            } else {
                                0.0
                            };
                            acc += v * w.weight_at(oc, ic, ky, kx) as f64;
                        }
                    }
                }
                out.set(oc, oy, ox, acc as f32);
            }
        }
    }
    Ok(out)
}

/// 2x2 average pooling by explicit edge replication: the input is padded to
/// even dimensions by repeating the last row/column, then averaged.
pub fn avg_pool2_reference(input: &Tensor) -> Tensor {
    let (c, h, w) = input.shape();
    let ph = h + h % 2;
    let pw = w + w % 2;
    let padded = Tensor::from_fn(c, ph, pw, |ch, y, x| input.at(ch, y.min(h - 1), x.min(w - 1)));
    Tensor::from_fn(c, ph / 2, pw / 2, |ch, y, x| {
        let s = padded.at(ch, 2 * y, 2 * x) as f64
            + padded.at(ch, 2 * y, 2 * x + 1) as f64
            + padded.at(ch, 2 * y + 1, 2 * x) as f64
            + padded.at(ch, 2 * y + 1, 2 * x + 1) as f64;
        (s / 4.0) as f32
    })
}

/// Direct-summation neighborhood interpolation: for every skipped pixel,
/// iterate the full square window, drop out-of-bounds neighbors and the
/// center, evaluate `exp(-lambda^2 * d^2)` per pair, and divide.
pub fn interpolate_reference(f_out: &Tensor, mask: &Mask, radius: usize, lambda: f32) -> Tensor {
    let (c, h, w) = f_out.shape();
    assert_eq!(mask.dims(), (h, w));
    let r = radius as isize;
    Tensor::from_fn(c, h, w, |ch, y, x| {
        if mask.computed(y, x) {
            return f_out.at(ch, y, x);
        }
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        for sy in y as isize - r..=y as isize + r {
            for sx in x as isize - r..=x as isize + r {
                if sy == y as isize && sx == x as isize {
                    continue;
                }
                if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                    continue;
                }
                let dy = (sy - y as isize) as f64;
                let dx = (sx - x as isize) as f64;
                let wgt = (-(lambda as f64) * (lambda as f64) * (dy * dy + dx * dx)).exp();
                num += wgt * f_out.at(ch, sy as usize, sx as usize) as f64;
                den += wgt;
            }
        }
        if den == 0.0 {
            0.0
        } else {
            (num / den) as f32
        }
    })
}

/// Elementwise carry selection: fresh value where the mask computes, previous
/// value where it skips.
pub fn carry_select_reference(prev: &Tensor, fresh: &Tensor, mask: &Mask) -> Tensor {
    let (c, h, w) = fresh.shape();
    assert_eq!(prev.shape(), fresh.shape());
    assert_eq!(mask.dims(), (h, w));
    Tensor::from_fn(c, h, w, |ch, y, x| {
        if mask.computed(y, x) {
            fresh.at(ch, y, x)
        } else {
            prev.at(ch, y, x)
        }
    })
}
