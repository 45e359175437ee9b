//! Two-stage coarse-to-fine orchestration.

use std::fmt::Write as _;

use crate::camera::PinholeCamera;
use crate::cda::{assemble_view_features, cda_forward, fit_camera, CdaWeights, GaussianFeature, PerViewPixelFeatures, EXTRA_CHANNELS};
use crate::config::{FeatureMode, PipelineConfig};
use crate::cost_volume::{
    build_cost_volume, depth_validity, regress_depth, regularize, sample_voxel_features, to_probability, RegularizeMode,
    RegularizerWeights,
};
use crate::error::{Error, Result};
use crate::fpn::{cga_fuse_pyramid, extract_pyramid, FpnWeights};
use crate::gaussians::{apply_modulation, csf_fuse, decode_params, photometric_cloud, CsfWeights, GaussianCloud, HeadWeights};
use crate::geometry::{backproject_depth, sample_depth_hypotheses, sample_fine_hypotheses, DepthHypotheses, DepthMap};
use crate::kernels::{avg_pool_x2, bilinear_upsample_x2};
use crate::metrics::{depth_metrics, mse, psnr, ssim, total_loss, DepthMetrics, LossBreakdown};
use crate::raster::{rasterize_tiled, RenderedImage};
use crate::rng::SeededRng;
use crate::scene::SceneBundle;
use crate::tensor::Tensor;
use crate::weights::WeightStore;

/// Environment variable capping the worker count (0 = one per core).
pub const THREADS_ENV: &str = "C3GS_THREADS";

pub fn threads_from_env() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::invalid("threads", format!("{THREADS_ENV} must be a non-negative integer, got '{v}'"))),
        Err(_) => Ok(0),
    }
}

/// Runs `f` on a dedicated pool with `threads` workers (0 = automatic).
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::invalid("threads", e.to_string()))?;
    Ok(pool.install(f))
}

/// Token width of the view features at each stage.
fn token_widths(config: &PipelineConfig) -> (usize, usize) {
    (config.fpn.coarse + EXTRA_CHANNELS, config.fpn.fine + EXTRA_CHANNELS)
}

/// Seeded initialization of every learned tensor the pipeline reads.
pub fn init_model_weights(config: &PipelineConfig) -> WeightStore {
    let rng = SeededRng::new(config.seed);
    let mut store = WeightStore::new();
    let (tc, tf) = token_widths(config);
    FpnWeights::init(&mut store, &rng, config.fpn);
    RegularizerWeights::init(&mut store, &rng, "cost.coarse", config.fpn.coarse);
    RegularizerWeights::init(&mut store, &rng, "cost.fine", config.fpn.fine);
    CdaWeights::init(&mut store, &rng, "cda.coarse", tc, config.cda);
    CdaWeights::init(&mut store, &rng, "cda.fine", tf, config.cda);
    HeadWeights::init(&mut store, &rng, config.cda.output);
    CsfWeights::init(&mut store, &rng, config.cda.output);
    store
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    pub fpn: FpnWeights,
    pub cost_coarse: RegularizerWeights,
    pub cost_fine: RegularizerWeights,
    pub cda_coarse: CdaWeights,
    pub cda_fine: CdaWeights,
    pub heads: HeadWeights,
    pub csf: CsfWeights,
}

impl ModelWeights {
    pub fn load(store: &WeightStore, config: &PipelineConfig) -> Result<Self> {
        let (tc, tf) = token_widths(config);
        Ok(ModelWeights {
            fpn: FpnWeights::load(store, config.fpn)?,
            cost_coarse: RegularizerWeights::load(store, "cost.coarse", config.fpn.coarse)?,
            cost_fine: RegularizerWeights::load(store, "cost.fine", config.fpn.fine)?,
            cda_coarse: CdaWeights::load(store, "cda.coarse", tc, config.cda)?,
            cda_fine: CdaWeights::load(store, "cda.fine", tf, config.cda)?,
            heads: HeadWeights::load(store, config.cda.output)?,
            csf: CsfWeights::load(store, config.cda.output)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageOutput {
    pub camera: PinholeCamera,
    pub depth: DepthMap,
    pub cloud: GaussianCloud,
    /// Gaussian features (learned mode only).
    pub features: Option<GaussianFeature>,
    /// HW×N attention weights (learned mode only).
    pub attention: Option<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalMetrics {
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub mse: Option<f64>,
    pub loss: Option<LossBreakdown>,
    pub depth: Option<DepthMetrics>,
    /// Fraction of valid pixels whose depth is within 1% of ground truth.
    pub depth_within_1pct: Option<f64>,
}

impl EvalMetrics {
    pub fn to_report(&self) -> String {
        let mut s = String::new();
        let opt = |s: &mut String, k: &str, v: Option<f64>| {
            if let Some(v) = v {
                let _ = writeln!(s, "{k} = {v}");
            }
        };
        opt(&mut s, "psnr_db", self.psnr);
        opt(&mut s, "ssim", self.ssim);
        opt(&mut s, "mse", self.mse);
        if let Some(l) = &self.loss {
            let _ = writeln!(s, "loss_total = {}", l.total);
            for (name, st) in ["coarse", "fine"].iter().zip(&l.stages) {
                let _ = writeln!(s, "loss_{name}_pixel = {}", st.pixel);
                let _ = writeln!(s, "loss_{name}_structure = {}", st.structure);
                let _ = writeln!(s, "loss_{name}_feature = {}", st.feature);
            }
        }
        if let Some(d) = &self.depth {
            s.push_str(&d.to_report());
        }
        opt(&mut s, "depth_within_1pct", self.depth_within_1pct);
        s
    }

    /// One JSON object per evaluated view.
    pub fn to_json_line(&self, view: &str) -> String {
        let mut obj = serde_json::Map::new();
        obj.insert("view".into(), view.into());
        let mut put = |k: &str, v: Option<f64>| {
            if let Some(v) = v {
                obj.insert(k.into(), serde_json::json!(v));
            }
        };
        put("psnr_db", self.psnr);
        put("ssim", self.ssim);
        put("mse", self.mse);
        put("loss_total", self.loss.as_ref().map(|l| l.total));
        put("abs_err_mm", self.depth.as_ref().map(|d| d.abs_err));
        put("acc_2mm", self.depth.as_ref().map(|d| d.acc_2));
        put("acc_10mm", self.depth.as_ref().map(|d| d.acc_10));
        put("depth_within_1pct", self.depth_within_1pct);
        serde_json::Value::Object(obj).to_string()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineOutput {
    pub coarse: StageOutput,
    pub fine: StageOutput,
    /// Fine cloud after opacity modulation, rendered at the target camera.
    pub render: RenderedImage,
    /// Coarse cloud rendered at half resolution, for the staged loss.
    pub coarse_render: RenderedImage,
    pub metrics: Option<EvalMetrics>,
}

struct StageFeatures {
    coarse: Vec<Tensor>,
    fine: Vec<Tensor>,
}

fn stage_features(bundle: &SceneBundle, config: &PipelineConfig, weights: Option<&ModelWeights>) -> Result<StageFeatures> {
    match (config.mode, weights) {
        (FeatureMode::Photometric, _) => Ok(StageFeatures {
            coarse: bundle.source_images.iter().map(avg_pool_x2).collect::<Result<_>>()?,
            fine: bundle.source_images.clone(),
        }),
        (FeatureMode::Learned, Some(w)) => {
            let per_view = bundle
                .source_images
                .iter()
                .map(|img| {
                    let pyr = extract_pyramid(img, &w.fpn)?;
                    let fused = cga_fuse_pyramid(&pyr, &w.fpn)?;
                    Ok((bilinear_upsample_x2(pyr.coarse())?, bilinear_upsample_x2(&fused)?))
                })
                .collect::<Result<Vec<_>>>()?;
            let (coarse, fine) = per_view.into_iter().unzip();
            Ok(StageFeatures { coarse, fine })
        }
        (FeatureMode::Learned, None) => Err(Error::invalid("pipeline", "learned mode needs model weights")),
    }
}

fn upsample_depth(coarse: &DepthMap) -> Result<DepthMap> {
    let (h, w) = (coarse.height(), coarse.width());
    let up = bilinear_upsample_x2(&coarse.values.clone().reshape(&[1, h, w])?)?.reshape(&[2 * h, 2 * w])?;
    let valid = (0..4 * h * w).map(|p| coarse.valid[(p / (2 * w) / 2) * w + (p % (2 * w)) / 2]).collect();
    DepthMap::new(up, valid)
}

/// Mean sampled RGB over the views that observed each pixel.
fn mean_view_colors(tokens: &PerViewPixelFeatures) -> Result<Tensor> {
    let (m, n, width) = (tokens.pixels(), tokens.views(), tokens.token_width());
    let c = width - EXTRA_CHANNELS;
    let mut out = vec![0.0f32; m * 3];
    for p in 0..m {
        let any = (0..n).any(|v| tokens.mask[p * n + v]);
        let mut acc = [0.0f64; 3];
        let mut count = 0usize;
        for v in 0..n {
            if any && !tokens.mask[p * n + v] {
                continue;
            }
            let tok = &tokens.values.data()[(p * n + v) * width..(p * n + v + 1) * width];
            for ch in 0..3 {
                acc[ch] += f64::from(tok[c + ch]);
            }
            count += 1;
        }
        for ch in 0..3 {
            out[p * 3 + ch] = (acc[ch] / count as f64) as f32;
        }
    }
    Tensor::from_vec(&[m, 3], out)
}

struct DepthStage {
    depth: DepthMap,
    tokens: PerViewPixelFeatures,
    voxels: crate::cost_volume::VoxelFeatureMap,
}

#[allow(clippy::too_many_arguments)]
fn depth_stage(
    stage: &'static str,
    camera: &PinholeCamera,
    bundle: &SceneBundle,
    features: &[Tensor],
    hypotheses: &Tensor,
    regularizer: Option<&RegularizerWeights>,
    temperature: f32,
    config: &PipelineConfig,
) -> Result<DepthStage> {
    let sources = features
        .iter()
        .zip(&bundle.sources)
        .map(|(f, c)| fit_camera(c, f.dim(1), f.dim(2)))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.in_stage(stage, "camera-geometry"))?;
    let volume = build_cost_volume(camera, &sources, features, hypotheses).map_err(|e| e.in_stage(stage, "cost-volume"))?;
    let mode = match regularizer {
        Some(w) => RegularizeMode::Learned(w),
        None => RegularizeMode::Bypass {
            radius: config.bypass_radius,
        },
    };
    let reg = regularize(&volume, mode).map_err(|e| e.in_stage(stage, "cost-volume"))?;
    let prob = to_probability(&reg.logits, temperature).map_err(|e| e.in_stage(stage, "cost-volume"))?;
    let mut depth = regress_depth(&prob, hypotheses).map_err(|e| e.in_stage(stage, "cost-volume"))?;
    depth.valid = depth_validity(&volume, &depth);
    let voxels = sample_voxel_features(&reg.voxels, hypotheses, &depth).map_err(|e| e.in_stage(stage, "cost-volume"))?;
    let tokens = assemble_view_features(camera, &bundle.sources, features, &bundle.source_images, &depth)
        .map_err(|e| e.in_stage(stage, "cda"))?;
    Ok(DepthStage { depth, tokens, voxels })
}

fn stage_cloud(
    stage: &'static str,
    camera: &PinholeCamera,
    ds: &DepthStage,
    config: &PipelineConfig,
    cda: Option<(&CdaWeights, &HeadWeights)>,
) -> Result<(GaussianCloud, Option<GaussianFeature>, Option<Tensor>)> {
    let points = backproject_depth(&ds.depth, camera);
    match cda {
        None => {
            let colors = mean_view_colors(&ds.tokens).map_err(|e| e.in_stage(stage, "gaussian-decode"))?;
            let cloud = photometric_cloud(
                &points,
                &ds.depth.values,
                camera.focal().0,
                &colors,
                config.photometric_opacity,
                config.photometric_scale,
            )
            .map_err(|e| e.in_stage(stage, "gaussian-decode"))?;
            Ok((cloud, None, None))
        }
        Some((cda, heads)) => {
            let att = cda_forward(&ds.tokens, &ds.voxels, cda).map_err(|e| e.in_stage(stage, "cda"))?;
            let cloud = decode_params(&att.features, &points, heads).map_err(|e| e.in_stage(stage, "gaussian-decode"))?;
            Ok((cloud, Some(att.features), Some(att.weights)))
        }
    }
}

pub fn run_pipeline(bundle: &SceneBundle, config: &PipelineConfig, weights: Option<&ModelWeights>) -> Result<PipelineOutput> {
    bundle.validate()?;
    config.validate()?;
    let target = &bundle.target;
    if target.height % 2 != 0 || target.width % 2 != 0 {
        return Err(Error::invalid("pipeline", "target extents must be even"));
    }
    let learned = match config.mode {
        FeatureMode::Learned => Some(weights.ok_or_else(|| Error::invalid("pipeline", "learned mode needs model weights"))?),
        FeatureMode::Photometric => None,
    };
    let temperature = match config.mode {
        FeatureMode::Learned => config.temperature,
        FeatureMode::Photometric => config.photometric_temperature,
    };
    let feats = stage_features(bundle, config, learned).map_err(|e| e.in_stage("coarse", "fpn-cga"))?;

    // Coarse stage at half resolution over the full depth range.
    let cam_c = target.scaled(0.5)?;
    let hyp_c: DepthHypotheses = sample_depth_hypotheses(&cam_c, config.coarse_hypotheses, config.spacing)?;
    let field_c = hyp_c.to_field(cam_c.height, cam_c.width);
    let ds_c = depth_stage("coarse", &cam_c, bundle, &feats.coarse, &field_c, learned.map(|w| &w.cost_coarse), temperature, config)?;
    let (cloud_c, feat_c, att_c) = stage_cloud("coarse", &cam_c, &ds_c, config, learned.map(|w| (&w.cda_coarse, &w.heads)))?;

    // Fine stage at full resolution around the upsampled coarse depth.
    let center = upsample_depth(&ds_c.depth)?;
    let radius = center.values.map(|d| config.fine_radius_factor * hyp_c.local_spacing(d));
    let field_f = sample_fine_hypotheses(target, config.fine_hypotheses, Some(&center), &radius)
        .map_err(|e| e.in_stage("fine", "camera-geometry"))?;
    let ds_f = depth_stage("fine", target, bundle, &feats.fine, &field_f, learned.map(|w| &w.cost_fine), temperature, config)?;
    let (mut cloud_f, feat_f, att_f) = stage_cloud("fine", target, &ds_f, config, learned.map(|w| (&w.cda_fine, &w.heads)))?;

    if let (Some(w), Some(fc), Some(ff)) = (learned, &feat_c, &feat_f) {
        let modulation = csf_fuse(fc, (cam_c.height, cam_c.width), ff, (target.height, target.width), &w.csf)
            .map_err(|e| e.in_stage("fine", "csf"))?;
        cloud_f = apply_modulation(&cloud_f, &modulation).map_err(|e| e.in_stage("fine", "csf"))?;
    }

    let render = rasterize_tiled(&cloud_f, target, config.tile_size).map_err(|e| e.in_stage("fine", "rasterizer"))?;
    let coarse_render = rasterize_tiled(&cloud_c, &cam_c, config.tile_size).map_err(|e| e.in_stage("coarse", "rasterizer"))?;
    let metrics = evaluate(bundle, config, &ds_f.depth, &render, &coarse_render)?;
    Ok(PipelineOutput {
        coarse: StageOutput {
            camera: cam_c,
            depth: ds_c.depth,
            cloud: cloud_c,
            features: feat_c,
            attention: att_c,
        },
        fine: StageOutput {
            camera: target.clone(),
            depth: ds_f.depth,
            cloud: cloud_f,
            features: feat_f,
            attention: att_f,
        },
        render,
        coarse_render,
        metrics,
    })
}

fn evaluate(
    bundle: &SceneBundle,
    config: &PipelineConfig,
    depth: &DepthMap,
    render: &RenderedImage,
    coarse_render: &RenderedImage,
) -> Result<Option<EvalMetrics>> {
    if bundle.target_image.is_none() && bundle.target_depth.is_none() {
        return Ok(None);
    }
    let mut m = EvalMetrics {
        psnr: None,
        ssim: None,
        mse: None,
        loss: None,
        depth: None,
        depth_within_1pct: None,
    };
    if let Some(gt) = &bundle.target_image {
        m.psnr = Some(psnr(&render.color, gt)?);
        m.ssim = Some(ssim(&render.color, gt)?);
        m.mse = Some(mse(&render.color, gt)?);
        let gt_c = avg_pool_x2(gt)?;
        m.loss = Some(total_loss(&[&coarse_render.color, &render.color], &[&gt_c, gt], &config.loss, None)?);
    }
    if let Some(gt) = &bundle.target_depth {
        m.depth = Some(depth_metrics(depth, gt, None, config.mm_per_unit)?);
        let (mut ok, mut n) = (0usize, 0usize);
        for p in 0..depth.values.len() {
            if depth.valid[p] && gt.valid[p] {
                let (d, g) = (depth.values.data()[p], gt.values.data()[p]);
                n += 1;
                ok += usize::from((d - g).abs() <= 0.01 * g);
            }
        }
        m.depth_within_1pct = (n > 0).then(|| ok as f64 / n as f64);
    }
    Ok(Some(m))
}
