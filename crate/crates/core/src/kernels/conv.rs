//! Direct convolutions with zero padding.
//!
//! Every output element is reduced in a fixed (channel, kernel offset) order and
//! accumulated in `f64`, so results do not depend on how output channels are
//! scheduled across threads.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn out_extent(op: &'static str, axis: &str, n: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::invalid(op, "stride must be positive"));
    }
    if n + 2 * pad < k {
        return Err(Error::shape(op, axis, format!(">= {}", k - 2 * pad), n));
    }
    Ok((n + 2 * pad - k) / stride + 1)
}

fn check_common(
    op: &'static str,
    input: &Tensor,
    weights: &Tensor,
    bias: Option<&Tensor>,
    spatial: usize,
) -> Result<(usize, usize)> {
    input.expect_rank(op, 1 + spatial)?;
    if weights.rank() != 2 + spatial {
        return Err(Error::shape(op, "weight rank", 2 + spatial, weights.rank()));
    }
    let (co, ci) = (weights.dim(0), weights.dim(1));
    if ci != input.dim(0) {
        return Err(Error::shape(op, "input channels (axis 0)", ci, input.dim(0)));
    }
    let k = weights.dim(2);
    for a in 0..spatial {
        if weights.dim(2 + a) != k {
            return Err(Error::shape(op, format!("kernel axis {}", 2 + a), k, weights.dim(2 + a)));
        }
    }
    if k % 2 == 0 {
        return Err(Error::invalid(op, format!("kernel size must be odd, got {k}")));
    }
    if let Some(b) = bias {
        b.expect_shape(op, &[co])?;
    }
    Ok((co, k))
}

/// 1D convolution over a C×L input with C'×C×k weights, stride 1.
pub fn conv1d(input: &Tensor, weights: &Tensor, bias: Option<&Tensor>, padding: usize) -> Result<Tensor> {
    const OP: &str = "conv1d";
    let (co, k) = check_common(OP, input, weights, bias, 1)?;
    let (ci, l) = (input.dim(0), input.dim(1));
    let lo = out_extent(OP, "length (axis 1)", l, k, 1, padding)?;
    let x = input.data();
    let wt = weights.data();
    let mut out = vec![0.0f32; co * lo];
    out.par_chunks_mut(lo).enumerate().for_each(|(o, row)| {
        let b = bias.map_or(0.0, |b| f64::from(b.data()[o]));
        for (ox, dst) in row.iter_mut().enumerate() {
            let mut acc = b;
            for c in 0..ci {
                for kx in 0..k {
                    let ix = (ox + kx) as isize - padding as isize;
                    if ix < 0 || ix >= l as isize {
                        continue;
                    }
                    acc += f64::from(wt[(o * ci + c) * k + kx]) * f64::from(x[c * l + ix as usize]);
                }
            }
            *dst = acc as f32;
        }
    });
    Tensor::from_vec(&[co, lo], out)
}

/// 2D convolution over a C×H×W input with C'×C×k×k weights.
pub fn conv2d(
    input: &Tensor,
    weights: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    const OP: &str = "conv2d";
    let (co, k) = check_common(OP, input, weights, bias, 2)?;
    let (ci, h, w) = (input.dim(0), input.dim(1), input.dim(2));
    let ho = out_extent(OP, "height (axis 1)", h, k, stride, padding)?;
    let wo = out_extent(OP, "width (axis 2)", w, k, stride, padding)?;
    let x = input.data();
    let wt = weights.data();
    let mut out = vec![0.0f32; co * ho * wo];
    out.par_chunks_mut(ho * wo).enumerate().for_each(|(o, plane)| {
        let b = bias.map_or(0.0, |b| f64::from(b.data()[o]));
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = b;
                for c in 0..ci {
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let wrow = ((o * ci + c) * k + ky) * k;
                        let xrow = (c * h + iy as usize) * w;
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += f64::from(wt[wrow + kx]) * f64::from(x[xrow + ix as usize]);
                        }
                    }
                }
                plane[oy * wo + ox] = acc as f32;
            }
        }
    });
    Tensor::from_vec(&[co, ho, wo], out)
}

/// 3D convolution over a C×D×H×W input with C'×C×k×k×k weights.
pub fn conv3d(
    input: &Tensor,
    weights: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    const OP: &str = "conv3d";
    let (co, k) = check_common(OP, input, weights, bias, 3)?;
    let (ci, d, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let dout = out_extent(OP, "depth (axis 1)", d, k, stride, padding)?;
    let ho = out_extent(OP, "height (axis 2)", h, k, stride, padding)?;
    let wo = out_extent(OP, "width (axis 3)", w, k, stride, padding)?;
    let x = input.data();
    let wt = weights.data();
    let plane = ho * wo;
    let mut out = vec![0.0f32; co * dout * plane];
    // One work item per (output channel, output depth slice).
    out.par_chunks_mut(plane).enumerate().for_each(|(job, slice)| {
        let (o, oz) = (job / dout, job % dout);
        let b = bias.map_or(0.0, |b| f64::from(b.data()[o]));
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = b;
                for c in 0..ci {
                    for kz in 0..k {
                        let iz = (oz * stride + kz) as isize - padding as isize;
                        if iz < 0 || iz >= d as isize {
                            continue;
                        }
                        for ky in 0..k {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let wrow = (((o * ci + c) * k + kz) * k + ky) * k;
                            let xrow = ((c * d + iz as usize) * h + iy as usize) * w;
                            for kx in 0..k {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += f64::from(wt[wrow + kx]) * f64::from(x[xrow + ix as usize]);
                            }
                        }
                    }
                }
                slice[oy * wo + ox] = acc as f32;
            }
        }
    });
    Tensor::from_vec(&[co, dout, ho, wo], out)
}
