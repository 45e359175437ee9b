//! Image and depth metrics and the staged training objective (forward only).

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::geometry::DepthMap;
use crate::tensor::Tensor;

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    b.expect_shape(op, a.shape())?;
    if a.is_empty() {
        return Err(Error::invalid(op, "empty image"));
    }
    Ok(())
}

pub fn mse(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    same_shape("mse", pred, gt)?;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(a, b)| (f64::from(*a) - f64::from(*b)).powi(2))
        .sum();
    Ok(sum / pred.len() as f64)
}

/// PSNR in dB for images in [0, 1], capped for identical images.
pub fn psnr(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let m = mse(pred, gt)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP))
}

/// Normalized 1D Gaussian taps; the 2D window is their outer product.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size).map(|k| (-(k as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Window edge used for an `h`×`w` image: 11, or the largest odd size that
/// fits when the image is smaller.
pub fn ssim_window_size(h: usize, w: usize) -> usize {
    let m = h.min(w).min(SSIM_WINDOW);
    if m % 2 == 0 {
        m - 1
    } else {
        m
    }
}

/// Single-scale SSIM over all fully contained windows, averaged over
/// channels. Accepts C×H×W or H×W.
pub fn ssim(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    same_shape("ssim", pred, gt)?;
    let (c, h, w) = match pred.rank() {
        2 => (1, pred.dim(0), pred.dim(1)),
        3 => (pred.dim(0), pred.dim(1), pred.dim(2)),
        r => return Err(Error::shape("ssim", "rank", "2 or 3", r)),
    };
    let size = ssim_window_size(h, w);
    let g = gaussian_window(size, SSIM_SIGMA);
    let plane = h * w;
    let mut total = 0.0f64;
    for ch in 0..c {
        let x = &pred.data()[ch * plane..(ch + 1) * plane];
        let y = &gt.data()[ch * plane..(ch + 1) * plane];
        let mut sum = 0.0f64;
        let mut count = 0usize;
        for i0 in 0..=h - size {
            for j0 in 0..=w - size {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for a in 0..size {
                    for b in 0..size {
                        let wt = g[a] * g[b];
                        let p = (i0 + a) * w + j0 + b;
                        let (xv, yv) = (f64::from(x[p]), f64::from(y[p]));
                        mx += wt * xv;
                        my += wt * yv;
                        sxx += wt * xv * xv;
                        syy += wt * yv * yv;
                        sxy += wt * xv * yv;
                    }
                }
                let (vx, vy, cxy) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                let num = (2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2);
                let den = (mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2);
                sum += num / den;
                count += 1;
            }
        }
        total += sum / count as f64;
    }
    Ok(total / c as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub beta_s: f64,
    pub beta_p: f64,
    /// One weight per stage, coarse first.
    pub gamma: Vec<f64>,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            beta_s: 0.1,
            beta_p: 0.05,
            gamma: vec![0.5, 1.0],
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.beta_s, self.beta_p].into_iter().chain(self.gamma.iter().copied());
        if all.clone().any(|v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::invalid("loss weights", "weights must be finite and nonnegative"));
        }
        Ok(())
    }
}

/// Feature-space distance between a render and its reference.
pub trait PerceptualLoss {
    fn distance(&self, pred: &Tensor, gt: &Tensor) -> Result<f64>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageLoss {
    pub pixel: f64,
    pub structure: f64,
    pub feature: f64,
    /// γ · (pixel + β_s·structure + β_p·feature).
    pub weighted: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub stages: Vec<StageLoss>,
}

/// Combines precomputed per-term values with the weights.
pub fn combine_loss(terms: &[(f64, f64, f64)], weights: &LossWeights) -> Result<LossBreakdown> {
    weights.validate()?;
    if terms.len() != weights.gamma.len() {
        return Err(Error::shape("total_loss", "stage count", weights.gamma.len(), terms.len()));
    }
    let stages: Vec<StageLoss> = terms
        .iter()
        .zip(&weights.gamma)
        .map(|(&(pixel, structure, feature), &g)| StageLoss {
            pixel,
            structure,
            feature,
            weighted: g * (pixel + weights.beta_s * structure + weights.beta_p * feature),
        })
        .collect();
    Ok(LossBreakdown {
        total: stages.iter().map(|s| s.weighted).sum(),
        stages,
    })
}

/// Staged objective: pixel MSE, 1 − SSIM and an optional perceptual term
/// (zero when absent), weighted per stage.
pub fn total_loss(
    renders: &[&Tensor],
    targets: &[&Tensor],
    weights: &LossWeights,
    perceptual: Option<&dyn PerceptualLoss>,
) -> Result<LossBreakdown> {
    if renders.len() != targets.len() {
        return Err(Error::shape("total_loss", "target count", renders.len(), targets.len()));
    }
    let terms = renders
        .iter()
        .zip(targets)
        .map(|(r, t)| {
            let feature = match perceptual {
                Some(p) => p.distance(r, t)?,
                None => 0.0,
            };
            Ok((mse(r, t)?, 1.0 - ssim(r, t)?, feature))
        })
        .collect::<Result<Vec<_>>>()?;
    combine_loss(&terms, weights)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthMetrics {
    /// Mean absolute error in millimeters.
    pub abs_err: f64,
    pub acc_2: f64,
    pub acc_10: f64,
    pub valid_pixels: usize,
}

/// Errors over pixels valid in both maps and in `mask`; depth values are
/// converted to millimeters with `mm_per_unit`.
pub fn depth_metrics(pred: &DepthMap, gt: &DepthMap, mask: Option<&[bool]>, mm_per_unit: f64) -> Result<DepthMetrics> {
    const OP: &str = "depth_metrics";
    gt.values.expect_shape(OP, pred.values.shape())?;
    if let Some(m) = mask {
        if m.len() != pred.values.len() {
            return Err(Error::shape(OP, "mask length", pred.values.len(), m.len()));
        }
    }
    let (mut sum, mut n, mut a2, mut a10) = (0.0f64, 0usize, 0usize, 0usize);
    for p in 0..pred.values.len() {
        if !(pred.valid[p] && gt.valid[p] && mask.is_none_or(|m| m[p])) {
            continue;
        }
        let err = (f64::from(pred.values.data()[p]) - f64::from(gt.values.data()[p])).abs() * mm_per_unit;
        sum += err;
        n += 1;
        a2 += usize::from(err < 2.0);
        a10 += usize::from(err < 10.0);
    }
    if n == 0 {
        return Err(Error::invalid(OP, "no valid pixels"));
    }
    Ok(DepthMetrics {
        abs_err: sum / n as f64,
        acc_2: a2 as f64 / n as f64,
        acc_10: a10 as f64 / n as f64,
        valid_pixels: n,
    })
}

impl DepthMetrics {
    pub fn to_report(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "abs_err_mm = {}", self.abs_err);
        let _ = writeln!(s, "acc_2mm = {}", self.acc_2);
        let _ = writeln!(s, "acc_10mm = {}", self.acc_10);
        let _ = writeln!(s, "valid_pixels = {}", self.valid_pixels);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_examples() {
        let a = Tensor::full(&[3, 4, 4], 0.3);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let b = a.map(|v| v + 0.1);
        assert!((mse(&b, &a).unwrap() - 0.01).abs() < 1e-8);
        assert!((psnr(&b, &a).unwrap() - 20.0).abs() < 1e-5);
    }

    #[test]
    fn ssim_identity_and_anticorrelation() {
        let x = Tensor::from_fn(&[3, 16, 16], |i| ((i * 7919) % 13) as f32 / 12.0);
        assert_eq!(ssim(&x, &x).unwrap(), 1.0);
        let bin = Tensor::from_fn(&[1, 12, 12], |i| ((i / 3 + i / 12) % 2) as f32);
        let inv = bin.map(|v| 1.0 - v);
        assert!(ssim(&bin, &inv).unwrap() < 0.0);
    }

    #[test]
    fn window_shrinks_for_small_images() {
        assert_eq!(ssim_window_size(128, 160), 11);
        assert_eq!(ssim_window_size(8, 8), 7);
        assert_eq!(ssim_window_size(5, 9), 5);
    }

    #[test]
    fn loss_examples() {
        let a = Tensor::full(&[3, 12, 12], 0.4);
        let w = LossWeights::default();
        assert_eq!(total_loss(&[&a, &a], &[&a, &a], &w, None).unwrap().total, 0.0);
        let single = LossWeights {
            beta_s: 0.0,
            beta_p: 0.0,
            gamma: vec![1.0],
        };
        let b = a.map(|v| v + 0.1);
        assert!((total_loss(&[&b], &[&a], &single, None).unwrap().total - 0.01).abs() < 1e-8);
        assert!(total_loss(&[&b], &[&a], &w, None).is_err());
    }

    #[test]
    fn depth_examples() {
        let gt = DepthMap::all_valid(Tensor::full(&[3, 3], 500.0)).unwrap();
        let m = depth_metrics(&gt, &gt, None, 1.0).unwrap();
        assert_eq!((m.abs_err, m.acc_2, m.acc_10), (0.0, 1.0, 1.0));
        let off = DepthMap::all_valid(Tensor::full(&[3, 3], 505.0)).unwrap();
        let m = depth_metrics(&off, &gt, None, 1.0).unwrap();
        assert_eq!((m.abs_err, m.acc_2, m.acc_10), (5.0, 0.0, 1.0));
        assert!(depth_metrics(&off, &gt, Some(&[false; 9]), 1.0).is_err());
    }
}
