//! Bilinear sampling and resampling.
//!
//! Sample coordinates are in continuous *index* units: `(x, y) = (j, i)` lands
//! exactly on element `[.., i, j]`. Callers working with half-integer pixel
//! centers subtract 0.5 before sampling.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Slack allowed past the outermost sample row/column before a lookup counts
/// as out of bounds; absorbs rounding in projected coordinates.
const BOUNDS_SLACK: f64 = 1e-4;

#[derive(Clone, Copy, Debug)]
struct Tap {
    i0: usize,
    i1: usize,
    frac: f64,
}

fn tap(pos: f64, n: usize) -> Option<Tap> {
    if !pos.is_finite() || pos < -BOUNDS_SLACK || pos > (n - 1) as f64 + BOUNDS_SLACK {
        return None;
    }
    let pos = pos.clamp(0.0, (n - 1) as f64);
    let i0 = (pos.floor() as usize).min(n.saturating_sub(2));
    let i1 = (i0 + 1).min(n - 1);
    Some(Tap {
        i0,
        i1,
        frac: pos - i0 as f64,
    })
}

/// Samples every channel of a C×H×W map at one location. Writes zeros and
/// returns `false` when the location is out of bounds.
pub fn sample_into(input: &Tensor, x: f64, y: f64, out: &mut [f32]) -> bool {
    let (c, h, w) = (input.dim(0), input.dim(1), input.dim(2));
    debug_assert_eq!(out.len(), c);
    let (Some(tx), Some(ty)) = (tap(x, w), tap(y, h)) else {
        out.iter_mut().for_each(|v| *v = 0.0);
        return false;
    };
    let data = input.data();
    let plane = h * w;
    let (w00, w01) = ((1.0 - ty.frac) * (1.0 - tx.frac), (1.0 - ty.frac) * tx.frac);
    let (w10, w11) = (ty.frac * (1.0 - tx.frac), ty.frac * tx.frac);
    for (ch, dst) in out.iter_mut().enumerate() {
        let base = ch * plane;
        let v00 = f64::from(data[base + ty.i0 * w + tx.i0]);
        let v01 = f64::from(data[base + ty.i0 * w + tx.i1]);
        let v10 = f64::from(data[base + ty.i1 * w + tx.i0]);
        let v11 = f64::from(data[base + ty.i1 * w + tx.i1]);
        *dst = (w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11) as f32;
    }
    true
}

/// Samples a C×H×W map at a 2×H'×W' coordinate grid (channel 0 = x, 1 = y).
/// Returns the C×H'×W' result and a row-major H'×W' validity mask.
pub fn bilinear_sample(input: &Tensor, coords: &Tensor) -> Result<(Tensor, Vec<bool>)> {
    input.expect_rank("bilinear_sample", 3)?;
    coords.expect_rank("bilinear_sample", 3)?;
    if coords.dim(0) != 2 {
        return Err(Error::shape("bilinear_sample", "coords axis 0", 2, coords.dim(0)));
    }
    let c = input.dim(0);
    let (ho, wo) = (coords.dim(1), coords.dim(2));
    let n = ho * wo;
    let mut out = vec![0.0f32; c * n];
    let mut mask = vec![false; n];
    let mut buf = vec![0.0f32; c];
    for p in 0..n {
        let x = f64::from(coords.data()[p]);
        let y = f64::from(coords.data()[n + p]);
        mask[p] = sample_into(input, x, y, &mut buf);
        for ch in 0..c {
            out[ch * n + p] = buf[ch];
        }
    }
    Ok((Tensor::from_vec(&[c, ho, wo], out)?, mask))
}

fn upsample_taps(n: usize) -> Vec<Tap> {
    (0..2 * n)
        .map(|i| {
            let src = ((i as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            Tap {
                i0,
                i1,
                frac: src - i0 as f64,
            }
        })
        .collect()
}

/// Doubles height and width with half-pixel-center (align-corners-false)
/// bilinear interpolation.
pub fn bilinear_upsample_x2(input: &Tensor) -> Result<Tensor> {
    input.expect_rank("bilinear_upsample_x2", 3)?;
    let (c, h, w) = (input.dim(0), input.dim(1), input.dim(2));
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let (h2, w2) = (2 * h, 2 * w);
    let src = input.data();
    let mut out = vec![0.0f32; c * h2 * w2];
    for ch in 0..c {
        let s = &src[ch * h * w..(ch + 1) * h * w];
        for (i, a) in ty.iter().enumerate() {
            for (j, b) in tx.iter().enumerate() {
                let top = (1.0 - b.frac) * f64::from(s[a.i0 * w + b.i0]) + b.frac * f64::from(s[a.i0 * w + b.i1]);
                let bot = (1.0 - b.frac) * f64::from(s[a.i1 * w + b.i0]) + b.frac * f64::from(s[a.i1 * w + b.i1]);
                out[(ch * h2 + i) * w2 + j] = ((1.0 - a.frac) * top + a.frac * bot) as f32;
            }
        }
    }
    Tensor::from_vec(&[c, h2, w2], out)
}

/// Doubles D, H and W of a C×D×H×W volume (align-corners-false trilinear).
pub fn trilinear_upsample_x2(input: &Tensor) -> Result<Tensor> {
    input.expect_rank("trilinear_upsample_x2", 4)?;
    let (c, d, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let (tz, ty, tx) = (upsample_taps(d), upsample_taps(h), upsample_taps(w));
    let (d2, h2, w2) = (2 * d, 2 * h, 2 * w);
    let src = input.data();
    let mut out = vec![0.0f32; c * d2 * h2 * w2];
    let at = |ch: usize, z: usize, y: usize, x: usize| f64::from(src[((ch * d + z) * h + y) * w + x]);
    for ch in 0..c {
        for (k, a) in tz.iter().enumerate() {
            for (i, b) in ty.iter().enumerate() {
                for (j, e) in tx.iter().enumerate() {
                    let lerp_x = |z: usize, y: usize| (1.0 - e.frac) * at(ch, z, y, e.i0) + e.frac * at(ch, z, y, e.i1);
                    let lerp_y = |z: usize| (1.0 - b.frac) * lerp_x(z, b.i0) + b.frac * lerp_x(z, b.i1);
                    let v = (1.0 - a.frac) * lerp_y(a.i0) + a.frac * lerp_y(a.i1);
                    out[((ch * d2 + k) * h2 + i) * w2 + j] = v as f32;
                }
            }
        }
    }
    Tensor::from_vec(&[c, d2, h2, w2], out)
}

/// 2×2 box average; H and W must be even.
pub fn avg_pool_x2(input: &Tensor) -> Result<Tensor> {
    input.expect_rank("avg_pool_x2", 3)?;
    let (c, h, w) = (input.dim(0), input.dim(1), input.dim(2));
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid("avg_pool_x2", format!("extents {h}x{w} must be even")));
    }
    let (ho, wo) = (h / 2, w / 2);
    let s = input.data();
    let out = Tensor::from_fn(&[c, ho, wo], |idx| {
        let (ch, rest) = (idx / (ho * wo), idx % (ho * wo));
        let (i, j) = (rest / wo, rest % wo);
        let base = ch * h * w;
        let sum = f64::from(s[base + 2 * i * w + 2 * j])
            + f64::from(s[base + 2 * i * w + 2 * j + 1])
            + f64::from(s[base + (2 * i + 1) * w + 2 * j])
            + f64::from(s[base + (2 * i + 1) * w + 2 * j + 1]);
        (sum * 0.25) as f32
    });
    Ok(out)
}
