//! Plane-sweep geometry: depth hypotheses, plane-induced homographies,
//! feature warping, back-projection and ray-direction channels.

use nalgebra::{Matrix3, Vector3};

use crate::camera::PinholeCamera;
use crate::error::{Error, Result};
use crate::kernels::sample_into;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HypothesisSpacing {
    UniformDepth,
    UniformInverseDepth,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageTag {
    Coarse,
    Fine,
}

/// Depth planes shared by every pixel of a stage, strictly increasing.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthHypotheses {
    pub values: Vec<f32>,
    pub stage: StageTag,
}

impl DepthHypotheses {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Broadcasts the planes to a D×H×W per-pixel field.
    pub fn to_field(&self, height: usize, width: usize) -> Tensor {
        let plane = height * width;
        Tensor::from_fn(&[self.values.len(), height, width], |i| self.values[i / plane])
    }

    /// Width of the hypothesis interval containing `depth` (end intervals
    /// outside the range).
    pub fn local_spacing(&self, depth: f32) -> f32 {
        let v = &self.values;
        let k = v.partition_point(|&h| h <= depth).clamp(1, v.len() - 1);
        v[k] - v[k - 1]
    }
}

/// Per-pixel depths with a validity mask, row-major H×W.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub values: Tensor,
    pub valid: Vec<bool>,
}

impl DepthMap {
    pub fn new(values: Tensor, valid: Vec<bool>) -> Result<Self> {
        values.expect_rank("depth_map", 2)?;
        if valid.len() != values.len() {
            return Err(Error::shape("depth_map", "mask length", values.len(), valid.len()));
        }
        Ok(DepthMap { values, valid })
    }

    pub fn all_valid(values: Tensor) -> Result<Self> {
        let n = values.len();
        Self::new(values, vec![true; n])
    }

    pub fn height(&self) -> usize {
        self.values.dim(0)
    }

    pub fn width(&self) -> usize {
        self.values.dim(1)
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Row-major H×W world points.
#[derive(Clone, Debug, PartialEq)]
pub struct PointMap {
    pub height: usize,
    pub width: usize,
    pub points: Vec<Vector3<f64>>,
}

fn check_count(op: &'static str, count: usize) -> Result<()> {
    if count < 2 {
        return Err(Error::invalid(op, format!("need at least 2 hypotheses, got {count}")));
    }
    Ok(())
}

fn linspace(lo: f64, hi: f64, count: usize) -> impl Iterator<Item = f64> {
    let step = (hi - lo) / (count - 1) as f64;
    (0..count).map(move |k| if k + 1 == count { hi } else { lo + step * k as f64 })
}

/// Global hypotheses spanning the camera's depth range.
pub fn sample_depth_hypotheses(
    camera: &PinholeCamera,
    count: usize,
    spacing: HypothesisSpacing,
) -> Result<DepthHypotheses> {
    check_count("sample_depth_hypotheses", count)?;
    let (lo, hi) = (camera.depth_min, camera.depth_max);
    let values = match spacing {
        HypothesisSpacing::UniformDepth => linspace(lo, hi, count).map(|d| d as f32).collect(),
        HypothesisSpacing::UniformInverseDepth => linspace(1.0 / lo, 1.0 / hi, count)
            .enumerate()
            .map(|(k, inv)| match k {
                0 => lo as f32,
                k if k + 1 == count => hi as f32,
                _ => (1.0 / inv) as f32,
            })
            .collect(),
    };
    Ok(DepthHypotheses {
        values,
        stage: StageTag::Coarse,
    })
}

/// Per-pixel hypotheses spanning `[center − radius, center + radius]`, clamped
/// to the camera range. Returns a D×H×W field.
pub fn sample_fine_hypotheses(
    camera: &PinholeCamera,
    count: usize,
    center: Option<&DepthMap>,
    radius: &Tensor,
) -> Result<Tensor> {
    const OP: &str = "sample_fine_hypotheses";
    check_count(OP, count)?;
    let center = center.ok_or_else(|| Error::invalid(OP, "fine stage requires a coarse depth map as center"))?;
    let (h, w) = (center.height(), center.width());
    radius.expect_shape(OP, &[h, w])?;
    let (dmin, dmax) = (camera.depth_min, camera.depth_max);
    let plane = h * w;
    let mut out = vec![0.0f32; count * plane];
    for p in 0..plane {
        let r = f64::from(radius.data()[p]);
        if !(r > 0.0) {
            return Err(Error::invalid(OP, format!("radius must be positive, got {r}")));
        }
        let c = f64::from(center.values.data()[p]).clamp(dmin, dmax);
        let lo = (c - r).max(dmin);
        let hi = (c + r).min(dmax);
        for (k, d) in linspace(lo, hi, count).enumerate() {
            out[k * plane + p] = d as f32;
        }
    }
    Tensor::from_vec(&[count, h, w], out)
}

/// Relative pose taking target-camera coordinates to source-camera coordinates.
fn relative_pose(src: &PinholeCamera, tgt: &PinholeCamera) -> (Matrix3<f64>, Vector3<f64>) {
    let r_rel = src.r * tgt.r.transpose();
    let t_rel = src.t - r_rel * tgt.t;
    (r_rel, t_rel)
}

/// Homography mapping target image coordinates to source image coordinates
/// for points on the target's fronto-parallel plane `z = depth`.
pub fn homography_for_plane(src: &PinholeCamera, tgt: &PinholeCamera, depth: f64) -> Result<Matrix3<f64>> {
    if !(depth > 0.0) {
        return Err(Error::invalid("homography_for_plane", format!("depth must be positive, got {depth}")));
    }
    let (r_rel, t_rel) = relative_pose(src, tgt);
    let k_tgt_inv = tgt
        .k
        .try_inverse()
        .ok_or_else(|| Error::invalid("homography_for_plane", "singular target intrinsics"))?;
    let n = Vector3::z();
    Ok(src.k * (r_rel + t_rel * n.transpose() / depth) * k_tgt_inv)
}

/// Samples a C×Hs×Ws source map at homography-mapped target pixel centers.
pub fn warp_feature(feature: &Tensor, homography: &Matrix3<f64>, out_h: usize, out_w: usize) -> Result<(Tensor, Vec<bool>)> {
    feature.expect_rank("warp_feature", 3)?;
    Ok(warp_with(feature, out_h, out_w, |x, y| {
        let p = homography * Vector3::new(x, y, 1.0);
        (p.z > 0.0).then(|| (p.x / p.z, p.y / p.z))
    }))
}

/// Like [`warp_feature`] with a separate plane depth per target pixel
/// (`depths` is H×W in target camera depth).
pub fn warp_feature_at_depths(
    feature: &Tensor,
    src: &PinholeCamera,
    tgt: &PinholeCamera,
    depths: &[f32],
    out_h: usize,
    out_w: usize,
) -> Result<(Tensor, Vec<bool>)> {
    feature.expect_rank("warp_feature_at_depths", 3)?;
    if depths.len() != out_h * out_w {
        return Err(Error::shape("warp_feature_at_depths", "depth count", out_h * out_w, depths.len()));
    }
    let (r_rel, t_rel) = relative_pose(src, tgt);
    let a = src.k * r_rel * tgt.k_inv();
    let b = src.k * t_rel;
    Ok(warp_with(feature, out_h, out_w, |x, y| {
        let j = (x - 0.5) as usize;
        let i = (y - 0.5) as usize;
        let d = f64::from(depths[i * out_w + j]);
        if !(d > 0.0) {
            return None;
        }
        let p = a * Vector3::new(x, y, 1.0) + b / d;
        (p.z > 0.0).then(|| (p.x / p.z, p.y / p.z))
    }))
}

/// Shared warp loop: `map` takes a target pixel center and returns the source
/// image coordinate (pixel-center convention) or `None` when it has none.
fn warp_with(
    feature: &Tensor,
    out_h: usize,
    out_w: usize,
    map: impl Fn(f64, f64) -> Option<(f64, f64)>,
) -> (Tensor, Vec<bool>) {
    let c = feature.dim(0);
    let plane = out_h * out_w;
    let mut out = vec![0.0f32; c * plane];
    let mut mask = vec![false; plane];
    let mut buf = vec![0.0f32; c];
    for i in 0..out_h {
        for j in 0..out_w {
            let p = i * out_w + j;
            let Some((sx, sy)) = map(j as f64 + 0.5, i as f64 + 0.5) else {
                continue;
            };
            if sample_into(feature, sx - 0.5, sy - 0.5, &mut buf) {
                mask[p] = true;
                for ch in 0..c {
                    out[ch * plane + p] = buf[ch];
                }
            }
        }
    }
    (Tensor::from_vec(&[c, out_h, out_w], out).expect("sized above"), mask)
}

/// Lifts every pixel center to a world point at its depth.
pub fn backproject_depth(depth: &DepthMap, camera: &PinholeCamera) -> PointMap {
    let (h, w) = (depth.height(), depth.width());
    let k_inv = camera.k_inv();
    let r_t = camera.r.transpose();
    let points = (0..h * w)
        .map(|p| {
            let (i, j) = (p / w, p % w);
            let d = f64::from(depth.values.data()[p]);
            let ray = k_inv * Vector3::new(j as f64 + 0.5, i as f64 + 0.5, 1.0);
            r_t * (ray * d - camera.t)
        })
        .collect();
    PointMap {
        height: h,
        width: w,
        points,
    }
}

/// Four channels per pixel: unit target ray minus unit source ray (world
/// frame, both aimed at the pixel's 3D point), then their dot product.
pub fn ray_direction_features(tgt: &PinholeCamera, src: &PinholeCamera, points: &PointMap) -> Result<Tensor> {
    let (ct, cs) = (tgt.center(), src.center());
    let plane = points.height * points.width;
    let mut out = vec![0.0f32; 4 * plane];
    for (p, x) in points.points.iter().enumerate() {
        let (a, b) = (x - ct, x - cs);
        let (na, nb) = (a.norm(), b.norm());
        if !(na > 0.0 && nb > 0.0) {
            return Err(Error::invalid("ray_direction_features", "degenerate ray through a camera center"));
        }
        let (a, b) = (a / na, b / nb);
        let diff = a - b;
        out[p] = diff.x as f32;
        out[plane + p] = diff.y as f32;
        out[2 * plane + p] = diff.z as f32;
        out[3 * plane + p] = a.dot(&b) as f32;
    }
    Tensor::from_vec(&[4, points.height, points.width], out)
}
