//! Tile-based Gaussian splatting with analytic color/opacity gradients.
//!
//! All per-pixel math runs in f64. A Gaussian touches a pixel only when the
//! pixel center lies inside its 3σ box, so the tile size never changes which
//! Gaussians a pixel sees or in what order.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Quaternion, UnitQuaternion, Vector3};
use rayon::prelude::*;

use crate::camera::PinholeCamera;
use crate::error::{Error, Result};
use crate::gaussians::GaussianCloud;
use crate::tensor::Tensor;

pub const NEAR_PLANE: f64 = 0.01;
pub const LOW_PASS: f64 = 0.3;
pub const TRANSMITTANCE_EPS: f64 = 1e-4;
pub const DEFAULT_TILE: usize = 16;

/// `R diag(s)² Rᵀ` for quaternion `(w, x, y, z)`.
pub fn covariance3d(scale: [f64; 3], rotation: [f64; 4]) -> Matrix3<f64> {
    let q = UnitQuaternion::from_quaternion(Quaternion::new(rotation[0], rotation[1], rotation[2], rotation[3]));
    let r = q.to_rotation_matrix().into_inner();
    let s2 = Matrix3::from_diagonal(&Vector3::new(scale[0] * scale[0], scale[1] * scale[1], scale[2] * scale[2]));
    r * s2 * r.transpose()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedGaussian {
    pub index: usize,
    /// Continuous image coordinates (pixel centers at half-integers).
    pub mean2d: [f64; 2],
    pub cov2d: Matrix2<f64>,
    pub conic: Matrix2<f64>,
    pub depth: f64,
    pub color: [f64; 3],
    pub alpha: f64,
    /// Inclusive pixel ranges `(col0, col1, row0, row1)` whose centers fall
    /// inside the 3σ box; `None` when the box misses the image.
    pub pixels: Option<(usize, usize, usize, usize)>,
}

/// Screen-space mean, covariance (with low-pass floor) and view depth, or
/// `None` when the mean is not in front of the near plane.
pub fn project_gaussian(mean: &Vector3<f64>, cov3d: &Matrix3<f64>, camera: &PinholeCamera) -> Option<([f64; 2], Matrix2<f64>, f64)> {
    let p = camera.world_to_camera(mean);
    if !(p.z > NEAR_PLANE) {
        return None;
    }
    let k = &camera.k;
    let (fx, s, fy) = (k[(0, 0)], k[(0, 1)], k[(1, 1)]);
    let z = p.z;
    let x = (fx * p.x + s * p.y) / z + k[(0, 2)];
    let y = fy * p.y / z + k[(1, 2)];
    let j = Matrix2x3::new(
        fx / z,
        s / z,
        -(fx * p.x + s * p.y) / (z * z),
        0.0,
        fy / z,
        -fy * p.y / (z * z),
    );
    let w = camera.r;
    let cov = j * w * cov3d * w.transpose() * j.transpose();
    let cov = 0.5 * (cov + cov.transpose()) + Matrix2::identity() * LOW_PASS;
    Some(([x, y], cov, z))
}

fn pixel_range(center: f64, radius: f64, n: usize) -> Option<(usize, usize)> {
    let lo = (center - radius - 0.5).ceil().max(0.0);
    let hi = (center + radius - 0.5).floor().min(n as f64 - 1.0);
    (lo <= hi).then_some((lo as usize, hi as usize))
}

fn check_cloud(cloud: &GaussianCloud) -> Result<()> {
    cloud.check_shapes()?;
    if !cloud.is_finite() {
        return Err(Error::NonFinite {
            op: "rasterize",
            what: "Gaussian attributes".into(),
        });
    }
    Ok(())
}

/// Projects every Gaussian and returns the survivors sorted front to back,
/// ties broken by index.
pub fn project_cloud(cloud: &GaussianCloud, camera: &PinholeCamera) -> Vec<ProjectedGaussian> {
    let mut out: Vec<ProjectedGaussian> = (0..cloud.len())
        .into_par_iter()
        .filter_map(|i| {
            let f = |t: &Tensor, w: usize, k: usize| f64::from(t.data()[i * w + k]);
            let mean = Vector3::new(f(&cloud.centers, 3, 0), f(&cloud.centers, 3, 1), f(&cloud.centers, 3, 2));
            let scale = [f(&cloud.scales, 3, 0), f(&cloud.scales, 3, 1), f(&cloud.scales, 3, 2)];
            let rot = [0, 1, 2, 3].map(|k| f(&cloud.rotations, 4, k));
            let (mean2d, cov2d, depth) = project_gaussian(&mean, &covariance3d(scale, rot), camera)?;
            let conic = cov2d.try_inverse()?;
            let (a, b, c) = (cov2d[(0, 0)], cov2d[(0, 1)], cov2d[(1, 1)]);
            let mid = 0.5 * (a + c);
            let lambda_max = mid + (0.25 * (a - c) * (a - c) + b * b).sqrt();
            let radius = 3.0 * lambda_max.sqrt();
            let pixels = match (
                pixel_range(mean2d[0], radius, camera.width),
                pixel_range(mean2d[1], radius, camera.height),
            ) {
                (Some((c0, c1)), Some((r0, r1))) => Some((c0, c1, r0, r1)),
                _ => None,
            };
            Some(ProjectedGaussian {
                index: i,
                mean2d,
                cov2d,
                conic,
                depth,
                color: [0, 1, 2].map(|k| f(&cloud.colors, 3, k)),
                alpha: f64::from(cloud.opacities.data()[i]),
                pixels,
            })
        })
        .collect();
    out.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));
    out
}

impl ProjectedGaussian {
    fn covers(&self, i: usize, j: usize) -> bool {
        matches!(self.pixels, Some((c0, c1, r0, r1)) if (c0..=c1).contains(&j) && (r0..=r1).contains(&i))
    }

    /// Opacity-weighted footprint `α · exp(−½ Δᵀ Σ⁻¹ Δ)` at a pixel center.
    pub fn weight_at(&self, i: usize, j: usize) -> f64 {
        self.footprint(i, j) * self.alpha
    }

    fn footprint(&self, i: usize, j: usize) -> f64 {
        let dx = j as f64 + 0.5 - self.mean2d[0];
        let dy = i as f64 + 0.5 - self.mean2d[1];
        let q = &self.conic;
        let power = q[(0, 0)] * dx * dx + 2.0 * q[(0, 1)] * dx * dy + q[(1, 1)] * dy * dy;
        (-0.5 * power).exp()
    }
}

/// Front-to-back compositing of the Gaussians covering one pixel. Calls
/// `visit(gaussian, g, transmittance_before)` for every contribution.
fn composite_pixel<'a>(
    list: impl Iterator<Item = &'a ProjectedGaussian>,
    i: usize,
    j: usize,
    mut visit: impl FnMut(&'a ProjectedGaussian, f64, f64),
) -> f64 {
    let mut t = 1.0f64;
    for g in list {
        if !g.covers(i, j) {
            continue;
        }
        let gi = g.weight_at(i, j);
        visit(g, gi, t);
        t *= 1.0 - gi;
        if t < TRANSMITTANCE_EPS {
            break;
        }
    }
    t
}

/// Indices into `sorted` of the Gaussians whose box overlaps each tile.
fn bin_tiles(sorted: &[ProjectedGaussian], width: usize, height: usize, tile: usize) -> Vec<Vec<usize>> {
    let (tx, ty) = (width.div_ceil(tile), height.div_ceil(tile));
    let mut bins = vec![Vec::new(); tx * ty];
    for (k, g) in sorted.iter().enumerate() {
        if let Some((c0, c1, r0, r1)) = g.pixels {
            for by in r0 / tile..=r1 / tile {
                for bx in c0 / tile..=c1 / tile {
                    bins[by * tx + bx].push(k);
                }
            }
        }
    }
    bins
}

/// f64 render: (3×H×W color, H×W accumulated alpha), row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderF64 {
    pub color: Vec<f64>,
    pub alpha: Vec<f64>,
}

pub fn render_f64(cloud: &GaussianCloud, camera: &PinholeCamera, tile: usize) -> Result<RenderF64> {
    check_cloud(cloud)?;
    if tile == 0 {
        return Err(Error::invalid("rasterize", "tile size must be positive"));
    }
    let (w, h) = (camera.width, camera.height);
    let sorted = project_cloud(cloud, camera);
    let bins = bin_tiles(&sorted, w, h, tile);
    let tiles_x = w.div_ceil(tile);
    let rendered: Vec<Vec<(usize, [f64; 3], f64)>> = bins
        .par_iter()
        .enumerate()
        .map(|(b, list)| {
            let (r0, c0) = ((b / tiles_x) * tile, (b % tiles_x) * tile);
            let mut px = Vec::with_capacity(tile * tile);
            for i in r0..(r0 + tile).min(h) {
                for j in c0..(c0 + tile).min(w) {
                    let mut c = [0.0f64; 3];
                    let t = composite_pixel(list.iter().map(|&k| &sorted[k]), i, j, |g, gi, t| {
                        for ch in 0..3 {
                            c[ch] += g.color[ch] * gi * t;
                        }
                    });
                    px.push((i * w + j, c, 1.0 - t));
                }
            }
            px
        })
        .collect();
    let plane = h * w;
    let mut color = vec![0.0f64; 3 * plane];
    let mut alpha = vec![0.0f64; plane];
    for (p, c, a) in rendered.into_iter().flatten() {
        for ch in 0..3 {
            color[ch * plane + p] = c[ch];
        }
        alpha[p] = a;
    }
    Ok(RenderF64 { color, alpha })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedImage {
    /// 3×H×W.
    pub color: Tensor,
    /// H×W.
    pub alpha: Tensor,
}

pub fn rasterize_tiled(cloud: &GaussianCloud, camera: &PinholeCamera, tile: usize) -> Result<RenderedImage> {
    let r = render_f64(cloud, camera, tile)?;
    let (h, w) = (camera.height, camera.width);
    Ok(RenderedImage {
        color: Tensor::from_vec(&[3, h, w], r.color.iter().map(|&v| (v as f32).clamp(0.0, 1.0)).collect())?,
        alpha: Tensor::from_vec(&[h, w], r.alpha.iter().map(|&v| (v as f32).clamp(0.0, 1.0)).collect())?,
    })
}

pub fn rasterize(cloud: &GaussianCloud, camera: &PinholeCamera) -> Result<RenderedImage> {
    rasterize_tiled(cloud, camera, DEFAULT_TILE)
}

/// Gradients of `Σ upstream · color` with respect to per-Gaussian colors
/// (M×3) and opacities (M).
pub fn rasterize_backward_color_opacity(
    cloud: &GaussianCloud,
    camera: &PinholeCamera,
    upstream: &Tensor,
) -> Result<(Tensor, Tensor)> {
    check_cloud(cloud)?;
    let (h, w) = (camera.height, camera.width);
    upstream.expect_shape("rasterize_backward", &[3, h, w])?;
    let sorted = project_cloud(cloud, camera);
    let plane = h * w;
    let m = cloud.len();
    // Per-row partial sums keep the reduction order fixed.
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..h)
        .into_par_iter()
        .map(|i| {
            let mut dc = vec![0.0f64; 3 * m];
            let mut da = vec![0.0f64; m];
            let mut hits: Vec<(&ProjectedGaussian, f64, f64)> = Vec::new();
            for j in 0..w {
                let p = i * w + j;
                let up = [0, 1, 2].map(|ch| f64::from(upstream.data()[ch * plane + p]));
                if up.iter().all(|&u| u == 0.0) {
                    continue;
                }
                hits.clear();
                composite_pixel(sorted.iter(), i, j, |g, gi, t| hits.push((g, gi, t)));
                // suffix[ch] = Σ_{later} c g Π(1 − g) between, per channel.
                let mut suffix = [0.0f64; 3];
                for &(g, gi, t) in hits.iter().rev() {
                    let mut dg = 0.0;
                    for ch in 0..3 {
                        dc[3 * g.index + ch] += up[ch] * gi * t;
                        dg += up[ch] * t * (g.color[ch] - suffix[ch]);
                        suffix[ch] = g.color[ch] * gi + (1.0 - gi) * suffix[ch];
                    }
                    da[g.index] += dg * g.footprint(i, j);
                }
            }
            (dc, da)
        })
        .collect();
    let mut dc = vec![0.0f64; 3 * m];
    let mut da = vec![0.0f64; m];
    for (rc, ra) in rows {
        dc.iter_mut().zip(rc).for_each(|(a, b)| *a += b);
        da.iter_mut().zip(ra).for_each(|(a, b)| *a += b);
    }
    Ok((
        Tensor::from_vec(&[m, 3], dc.into_iter().map(|v| v as f32).collect())?,
        Tensor::from_vec(&[m], da.into_iter().map(|v| v as f32).collect())?,
    ))
}
