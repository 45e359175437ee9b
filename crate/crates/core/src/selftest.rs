//! Built-in oracle checks, one group per module, run by `gsmvs selftest`.

use nalgebra::{Matrix3, Vector3};

use crate::camera::{look_at, PinholeCamera};
use crate::cda::{
    cross_dimensional_attention, AttentionWeights, CdaDims, CombinedFeature, GaussianFeature, PerViewPixelFeatures, COMBINED_WIDTH,
};
use crate::config::PipelineConfig;
use crate::cost_volume::{regress_depth, to_probability};
use crate::error::Result;
use crate::fpn::{cga_attention, cga_modulate, cga_pool};
use crate::gaussians::{apply_modulation, csf_fuse, CsfWeights, GaussianCloud};
use crate::geometry::{backproject_depth, homography_for_plane, warp_feature, DepthMap};
use crate::gradcheck::rasterizer_gradcheck;
use crate::kernels::{bilinear_sample, conv2d, sigmoid, softmax_axis, softplus};
use crate::metrics::{combine_loss, psnr, ssim, LossWeights};
use crate::pipeline::run_pipeline;
use crate::raster::rasterize;
use crate::rng::SeededRng;
use crate::synth::{generate_synthetic_scene, SceneKind, SynthSpec};
use crate::tensor::Tensor;
use crate::weights::WeightStore;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub module: &'static str,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(module: &'static str, name: &'static str, outcome: Result<(bool, String)>) -> Check {
    let (passed, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
    Check { module, name, passed, detail }
}

fn max_abs(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| f64::from((x - y).abs())).fold(0.0, f64::max)
}

fn kernel_checks(rng: &SeededRng) -> Vec<Check> {
    const M: &str = "kernels";
    let conv = || {
        let x = rng.uniform("conv.x", &[2, 5, 5], 1.0);
        let w = rng.uniform("conv.w", &[3, 2, 3, 3], 1.0);
        let b = rng.uniform("conv.b", &[3], 1.0);
        let y = conv2d(&x, &w, Some(&b), 1, 1)?;
        let mut worst = 0.0f64;
        for o in 0..3 {
            for i in 0..5 {
                for j in 0..5 {
                    let mut acc = f64::from(b.data()[o]);
                    for c in 0..2 {
                        for ki in 0..3 {
                            for kj in 0..3 {
                                let (yi, xj) = (i as isize + ki as isize - 1, j as isize + kj as isize - 1);
                                if (0..5).contains(&yi) && (0..5).contains(&xj) {
                                    acc += f64::from(w.at(&[o, c, ki, kj])) * f64::from(x.at(&[c, yi as usize, xj as usize]));
                                }
                            }
                        }
                    }
                    worst = worst.max((acc - f64::from(y.at(&[o, i, j]))).abs());
                }
            }
        }
        Ok((worst < 1e-6, format!("max error {worst:.2e}")))
    };
    let softmax = || {
        let x = rng.uniform("softmax.x", &[4, 6], 3.0);
        let y = softmax_axis(&x, 1)?;
        let mut worst = 0.0f64;
        for r in 0..4 {
            let row = &x.data()[r * 6..(r + 1) * 6];
            let total: f64 = row.iter().map(|v| f64::from(*v).exp()).sum();
            for k in 0..6 {
                worst = worst.max((f64::from(row[k]).exp() / total - f64::from(y.at(&[r, k]))).abs());
            }
        }
        Ok((worst < 1e-6, format!("max error {worst:.2e}")))
    };
    let bilinear = || {
        let f = rng.uniform("bilinear.f", &[1, 4, 4], 1.0);
        let coords = Tensor::from_vec(&[2, 1, 1], vec![1.25, 2.5])?;
        let (s, mask) = bilinear_sample(&f, &coords)?;
        let v = |i: usize, j: usize| f64::from(f.at(&[0, i, j]));
        let expect = 0.5 * (0.75 * v(2, 1) + 0.25 * v(2, 2)) + 0.5 * (0.75 * v(3, 1) + 0.25 * v(3, 2));
        let err = (expect - f64::from(s.data()[0])).abs();
        Ok((mask[0] && err < 1e-6, format!("error {err:.2e}")))
    };
    let activations = || {
        let ok = sigmoid(0.0) == 0.5 && (softplus(0.0) - std::f32::consts::LN_2).abs() < 1e-7;
        Ok((ok, format!("sigmoid(0) = {}, softplus(0) = {}", sigmoid(0.0), softplus(0.0))))
    };
    vec![
        check(M, "conv2d matches loop oracle", conv()),
        check(M, "softmax matches exp/sum oracle", softmax()),
        check(M, "bilinear matches formula", bilinear()),
        check(M, "activation fixed points", activations()),
    ]
}

fn test_camera(eye: Vector3<f64>) -> Result<PinholeCamera> {
    let (r, t) = look_at(eye, Vector3::new(0.0, 0.0, 5.0), Vector3::y());
    PinholeCamera::simple(40.0, 32, 24, r, t, (2.0, 8.0))
}

fn geometry_checks() -> Vec<Check> {
    const M: &str = "geometry";
    let round_trip = || {
        let cam = test_camera(Vector3::new(0.4, -0.2, -0.5))?;
        let mut worst = 0.0f64;
        for (x, y, d) in [(3.3, 4.1, 2.5), (17.0, 11.5, 5.0), (30.9, 22.2, 7.5)] {
            let (u, v, z) = cam.project(&cam.unproject(x, y, d));
            worst = worst.max((u - x).abs()).max((v - y).abs()).max((z - d).abs());
        }
        Ok((worst < 1e-4, format!("max error {worst:.2e} px")))
    };
    let identity = || {
        let cam = test_camera(Vector3::zeros())?;
        let h = homography_for_plane(&cam, &cam, 4.0)?;
        let err = (h - Matrix3::identity()).amax();
        let f = Tensor::from_fn(&[2, 24, 32], |i| (i % 17) as f32);
        let (out, mask) = warp_feature(&f, &h, 24, 32)?;
        let ok = err < 1e-12 && mask.iter().all(|&m| m) && out.max_abs_diff(&f) < 1e-5;
        Ok((ok, format!("homography error {err:.2e}")))
    };
    let backproject = || {
        let cam = test_camera(Vector3::new(0.3, 0.1, -1.0))?;
        let depth = DepthMap::all_valid(Tensor::full(&[24, 32], 4.0))?;
        let points = backproject_depth(&depth, &cam);
        let worst = points
            .points
            .iter()
            .map(|p| (cam.world_to_camera(p).z - 4.0).abs())
            .fold(0.0, f64::max);
        Ok((worst < 1e-9, format!("max depth error {worst:.2e}")))
    };
    vec![
        check(M, "project after unproject", round_trip()),
        check(M, "identity homography passthrough", identity()),
        check(M, "back-projection lies on the depth plane", backproject()),
    ]
}

fn fpn_checks(rng: &SeededRng) -> Vec<Check> {
    const M: &str = "fpn-cga";
    let pool = || {
        let f = rng.uniform("cga.f", &[2, 4, 5], 1.0);
        let (th, tw) = cga_pool(&f)?;
        let mut worst = 0.0f64;
        for c in 0..2 {
            for i in 0..4 {
                let m: f64 = (0..5).map(|j| f64::from(f.at(&[c, i, j]))).sum::<f64>() / 5.0;
                worst = worst.max((m - f64::from(th.at(&[c, i, 0]))).abs());
            }
            for j in 0..5 {
                let m: f64 = (0..4).map(|i| f64::from(f.at(&[c, i, j]))).sum::<f64>() / 4.0;
                worst = worst.max((m - f64::from(tw.at(&[c, 0, j]))).abs());
            }
        }
        Ok((worst < 1e-6, format!("max error {worst:.2e}")))
    };
    let quarter = || {
        let f = rng.uniform("cga.g", &[3, 4, 6], 1.0);
        let (th, tw) = cga_pool(&f)?;
        let maps = cga_attention(&th, &tw, &Tensor::zeros(&[3, 3, 3]), &Tensor::zeros(&[3]))?;
        let out = cga_modulate(&f, &maps)?;
        let exact = out.data().iter().zip(f.data()).all(|(o, x)| *o == x * 0.25);
        Ok((exact, "zero weights scale by 1/4".into()))
    };
    vec![
        check(M, "directional pooling means", pool()),
        check(M, "zero-weight attention quarters features", quarter()),
    ]
}

fn cost_volume_checks(rng: &SeededRng) -> Vec<Check> {
    const M: &str = "cost-volume-depth";
    let outcome = || {
        let logits = rng.uniform("prob.logits", &[8, 3, 4], 4.0);
        let prob = to_probability(&logits, 0.7)?;
        let hyps = Tensor::from_fn(&[8, 3, 4], |i| 2.0 + (i / 12) as f32 * 0.5);
        let depth = regress_depth(&prob, &hyps)?;
        let mut worst = 0.0f64;
        for p in 0..12 {
            let s: f64 = (0..8).map(|d| f64::from(prob.values.data()[d * 12 + p])).sum();
            worst = worst.max((s - 1.0).abs());
        }
        let hull = depth.values.data().iter().all(|&d| (2.0..=5.5).contains(&d));
        Ok((worst < 1e-5 && hull, format!("max slice-sum error {worst:.2e}")))
    };
    vec![check(M, "probabilities sum to one, depth in hull", outcome())]
}

fn cda_checks(rng: &SeededRng) -> Vec<Check> {
    const M: &str = "cda-descriptor";
    let outcome = || {
        let (p, n, c) = (6, 3, 9);
        let mut store = WeightStore::new();
        AttentionWeights::init(&mut store, rng, "st", c, CdaDims::default());
        let w = AttentionWeights::load(&store, "st", c, CdaDims::default())?;
        let combined = CombinedFeature {
            values: rng.uniform("cda.fc", &[p, COMBINED_WIDTH], 1.0),
        };
        let values = rng.uniform("cda.tokens", &[p, n, c], 1.0);
        let mask: Vec<bool> = (0..p * n).map(|i| i % 4 != 1).collect();
        let base = cross_dimensional_attention(&combined, &PerViewPixelFeatures::new(values.clone(), mask.clone())?, &w)?;
        let order = [2usize, 0, 1];
        let mut pv = Vec::with_capacity(values.len());
        let mut pm = Vec::with_capacity(mask.len());
        for px in 0..p {
            for &v in &order {
                pv.extend_from_slice(&values.data()[(px * n + v) * c..(px * n + v + 1) * c]);
                pm.push(mask[px * n + v]);
            }
        }
        let permuted = cross_dimensional_attention(&combined, &PerViewPixelFeatures::new(Tensor::from_vec(&[p, n, c], pv)?, pm)?, &w)?;
        let diff = max_abs(base.features.values.data(), permuted.features.values.data());
        let sums = (0..p)
            .map(|px| (base.weights.data()[px * n..(px + 1) * n].iter().map(|&a| f64::from(a)).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max);
        Ok((diff < 1e-6 && sums < 1e-6, format!("permutation diff {diff:.2e}, weight-sum error {sums:.2e}")))
    };
    vec![check(M, "weights normalized, view-permutation invariant", outcome())]
}

fn gaussian_checks(rng: &SeededRng) -> Vec<Check> {
    const M: &str = "gaussian-decode-csf";
    let outcome = || {
        let dg = COMBINED_WIDTH;
        let mut store = WeightStore::new();
        CsfWeights::init(&mut store, rng, dg);
        let csf = CsfWeights::load(&store, dg)?;
        let coarse = GaussianFeature { values: rng.uniform("csf.c", &[4, dg], 1.0) };
        let fine = GaussianFeature { values: rng.uniform("csf.f", &[16, dg], 1.0) };
        let modulation = csf_fuse(&coarse, (2, 2), &fine, (4, 4), &csf)?;
        let m = 16;
        let cloud = GaussianCloud {
            centers: rng.uniform("cloud.x", &[m, 3], 1.0),
            scales: Tensor::full(&[m, 3], 0.1),
            rotations: Tensor::from_fn(&[m, 4], |i| if i % 4 == 0 { 1.0 } else { 0.0 }),
            opacities: Tensor::from_fn(&[m], |i| 0.05 + 0.05 * i as f32),
            colors: Tensor::full(&[m, 3], 0.5),
        };
        let out = apply_modulation(&cloud, &modulation)?;
        Ok((out == cloud, "zero-init fusion leaves the cloud bit-identical".into()))
    };
    vec![check(M, "identity modulation at init", outcome())]
}

fn raster_checks(seed: u64) -> Vec<Check> {
    const M: &str = "rasterizer";
    let single = || {
        let cam = PinholeCamera::simple(20.0, 9, 9, Matrix3::identity(), Vector3::zeros(), (0.5, 10.0))?;
        let cloud = GaussianCloud {
            centers: Tensor::from_vec(&[1, 3], vec![0.0, 0.0, 4.0])?,
            scales: Tensor::full(&[1, 3], 0.2),
            rotations: Tensor::from_vec(&[1, 4], vec![1.0, 0.0, 0.0, 0.0])?,
            opacities: Tensor::from_vec(&[1], vec![0.9])?,
            colors: Tensor::full(&[1, 3], 1.0),
        };
        let img = rasterize(&cloud, &cam)?;
        // Mean sits at (4.5, 4.5), the center of pixel (4, 4).
        let v = img.color.at(&[0, 4, 4]);
        Ok(((v - 0.9).abs() < 1e-6, format!("center value {v}")))
    };
    let grads = || {
        let cases = rasterizer_gradcheck(seed);
        let worst = cases.iter().map(|c| c.color_error.max(c.opacity_error)).fold(0.0, f64::max);
        Ok((cases.iter().all(|c| c.passed()), format!("max relative error {worst:.2e} over {} clouds", cases.len())))
    };
    vec![
        check(M, "single Gaussian peak", single()),
        check(M, "analytic gradients match finite differences", grads()),
    ]
}

fn metric_checks(rng: &SeededRng) -> Vec<Check> {
    const M: &str = "loss-metrics";
    let image = || {
        let x = rng.uniform("ssim.x", &[3, 16, 16], 0.4).map(|v| v + 0.5);
        let shifted = x.map(|v| v + 0.1);
        let p = psnr(&shifted, &x)?;
        let s = ssim(&x, &x)?;
        Ok(((p - 20.0).abs() < 1e-4 && s == 1.0, format!("psnr {p:.4} dB, ssim(x, x) = {s}")))
    };
    let loss = || {
        let terms = [(0.02, 0.3, 0.7), (0.01, 0.2, 0.4)];
        let b = combine_loss(&terms, &LossWeights::default())?;
        let expect = 0.5 * (0.02 + 0.1 * 0.3 + 0.05 * 0.7) + (0.01 + 0.1 * 0.2 + 0.05 * 0.4);
        let err = (b.total - expect).abs();
        Ok((err < 1e-12, format!("error {err:.2e}")))
    };
    vec![
        check(M, "PSNR of a 0.1 offset and SSIM identity", image()),
        check(M, "staged loss weighted sum", loss()),
    ]
}

fn pipeline_checks(seed: u64) -> Vec<Check> {
    const M: &str = "pipeline-cli";
    let outcome = || {
        let mut spec = SynthSpec::new(SceneKind::Plane, 3, seed);
        spec.height = 32;
        spec.width = 40;
        let scene = generate_synthetic_scene(&spec)?;
        let out = run_pipeline(&scene, &PipelineConfig::photometric(), None)?;
        out.fine.cloud.validate()?;
        let shapes = out.render.color.shape() == [3, 32, 40] && out.coarse.depth.values.shape() == [16, 20];
        let finite = out.render.color.is_finite() && out.fine.depth.values.is_finite();
        Ok((shapes && finite, format!("{} Gaussians rendered", out.fine.cloud.len())))
    };
    vec![check(M, "weight-free pipeline on a small plane", outcome())]
}

/// Every module's checks, in pipeline order.
pub fn run_all(seed: u64) -> Vec<Check> {
    let rng = SeededRng::new(seed);
    [
        kernel_checks(&rng),
        geometry_checks(),
        fpn_checks(&rng),
        cost_volume_checks(&rng),
        cda_checks(&rng),
        gaussian_checks(&rng),
        raster_checks(seed),
        metric_checks(&rng),
        pipeline_checks(seed),
    ]
    .concat()
}
