//! Central finite differences for checking analytic gradients.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;

use crate::camera::PinholeCamera;
use crate::gaussians::GaussianCloud;
use crate::raster::{rasterize_backward_color_opacity, render_f64, DEFAULT_TILE};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Estimates ∂f/∂x element by element with central differences.
///
/// Perturbed values are rounded to `f32`; the quotient divides by the step
/// actually taken, `(x+eps) - (x-eps)` after rounding, rather than `2·eps`.
pub fn finite_difference_probe(f: impl Fn(&Tensor) -> f64, x: &Tensor, eps: f32) -> Tensor {
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x.data()[i];
        let hi = orig + eps;
        let lo = orig - eps;
        probe.data_mut()[i] = hi;
        let f_hi = f(&probe);
        probe.data_mut()[i] = lo;
        let f_lo = f(&probe);
        probe.data_mut()[i] = orig;
        let step = f64::from(hi) - f64::from(lo);
        grad.push(((f_hi - f_lo) / step) as f32);
    }
    Tensor::from_vec(x.shape(), grad).expect("same shape as x")
}

/// Largest |a−b| / max(|a|, |b|, floor) over paired entries.
pub fn max_relative_error(analytic: &[f32], numeric: &[f32], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| {
            let (a, n) = (f64::from(a), f64::from(n));
            (a - n).abs() / a.abs().max(n.abs()).max(floor)
        })
        .fold(0.0, f64::max)
}

/// Relative-error tolerance of the rasterizer gradient suite.
pub const GRADCHECK_TOLERANCE: f64 = 1e-3;
pub const GRADCHECK_EPS: f32 = 1e-3;
/// Gradients smaller than this are compared absolutely.
const GRADCHECK_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckCase {
    pub gaussians: usize,
    pub color_error: f64,
    pub opacity_error: f64,
}

impl GradcheckCase {
    pub fn passed(&self) -> bool {
        self.color_error < GRADCHECK_TOLERANCE && self.opacity_error < GRADCHECK_TOLERANCE
    }
}

pub fn gradcheck_camera() -> PinholeCamera {
    PinholeCamera::simple(30.0, 24, 20, Matrix3::identity(), Vector3::zeros(), (0.5, 20.0)).expect("valid camera")
}

/// Random cloud in front of [`gradcheck_camera`], opacities in [0.05, 0.8].
pub fn random_cloud(rng: &SeededRng, name: &str, m: usize) -> GaussianCloud {
    let mut r = rng.stream(name);
    let mut centers = Vec::with_capacity(3 * m);
    let mut scales = Vec::with_capacity(3 * m);
    let mut rotations = Vec::with_capacity(4 * m);
    for _ in 0..m {
        let z: f32 = r.gen_range(3.0..6.0);
        centers.extend([r.gen_range(-0.3..0.3) * z, r.gen_range(-0.25..0.25) * z, z]);
        scales.extend((0..3).map(|_| r.gen_range(0.05f32..0.3)));
        let mut q: Vec<f32> = (0..4).map(|_| r.gen_range(-1.0f32..1.0)).collect();
        q[0] += 1.5;
        let n = q.iter().map(|v| v * v).sum::<f32>().sqrt();
        rotations.extend(q.iter().map(|v| v / n));
    }
    GaussianCloud {
        centers: Tensor::from_vec(&[m, 3], centers).expect("sized"),
        scales: Tensor::from_vec(&[m, 3], scales).expect("sized"),
        rotations: Tensor::from_vec(&[m, 4], rotations).expect("sized"),
        opacities: Tensor::from_fn(&[m], |_| r.gen_range(0.05..0.8)),
        colors: Tensor::from_fn(&[m, 3], |_| r.gen_range(0.0..1.0)),
    }
}

/// `Σ upstream · color` rendered in f64.
pub fn weighted_render_loss(cloud: &GaussianCloud, camera: &PinholeCamera, upstream: &Tensor) -> f64 {
    let img = render_f64(cloud, camera, DEFAULT_TILE).expect("finite cloud");
    img.color.iter().zip(upstream.data()).map(|(c, u)| c * f64::from(*u)).sum()
}

/// Compares analytic color/opacity gradients with central differences on one
/// random cloud of `m` Gaussians and a random upstream image.
pub fn rasterizer_gradcheck_case(seed: u64, m: usize) -> GradcheckCase {
    let rng = SeededRng::new(seed);
    let cloud = random_cloud(&rng, &format!("cloud{m}"), m);
    let cam = gradcheck_camera();
    let upstream = rng.uniform(&format!("upstream{m}"), &[3, cam.height, cam.width], 1.0);
    let (dc, da) = rasterize_backward_color_opacity(&cloud, &cam, &upstream).expect("finite cloud");
    let num_c = finite_difference_probe(
        |c| {
            let probe = GaussianCloud { colors: c.clone(), ..cloud.clone() };
            weighted_render_loss(&probe, &cam, &upstream)
        },
        &cloud.colors,
        GRADCHECK_EPS,
    );
    let num_a = finite_difference_probe(
        |a| {
            let probe = GaussianCloud { opacities: a.clone(), ..cloud.clone() };
            weighted_render_loss(&probe, &cam, &upstream)
        },
        &cloud.opacities,
        GRADCHECK_EPS,
    );
    GradcheckCase {
        gaussians: m,
        color_error: max_relative_error(dc.data(), num_c.data(), GRADCHECK_FLOOR),
        opacity_error: max_relative_error(da.data(), num_a.data(), GRADCHECK_FLOOR),
    }
}

/// The full suite: cloud sizes 1, 2, 4, 8, 16 and 32.
pub fn rasterizer_gradcheck(seed: u64) -> Vec<GradcheckCase> {
    [1, 2, 4, 8, 16, 32].iter().map(|&m| rasterizer_gradcheck_case(seed, m)).collect()
}
