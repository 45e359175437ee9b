//! Cross-dimensional attention: per-pixel view tokens, view-axis aggregation,
//! fusion with voxel features and attention over the view tokens.

use rayon::prelude::*;

use crate::camera::PinholeCamera;
use crate::cost_volume::{VoxelFeatureMap, VOXEL_CHANNELS};
use crate::error::{Error, Result};
use crate::geometry::{backproject_depth, ray_direction_features, DepthMap};
use crate::kernels::{relu, sample_into, Linear};
use crate::rng::SeededRng;
use crate::tensor::Tensor;
use crate::weights::WeightStore;

/// RGB plus ray-direction channels appended to every view token.
pub const EXTRA_CHANNELS: usize = 7;
pub const AGGREGATED_WIDTH: usize = 16;
pub const COMBINED_WIDTH: usize = AGGREGATED_WIDTH + VOXEL_CHANNELS;

/// HW×N×(C+7) view tokens: `[features | rgb | ray]`, with an HW×N mask of
/// views that actually observed the pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct PerViewPixelFeatures {
    pub values: Tensor,
    pub mask: Vec<bool>,
}

impl PerViewPixelFeatures {
    pub fn new(values: Tensor, mask: Vec<bool>) -> Result<Self> {
        values.expect_rank("view features", 3)?;
        if mask.len() != values.dim(0) * values.dim(1) {
            return Err(Error::shape("view features", "mask length", values.dim(0) * values.dim(1), mask.len()));
        }
        Ok(PerViewPixelFeatures { values, mask })
    }

    pub fn pixels(&self) -> usize {
        self.values.dim(0)
    }

    pub fn views(&self) -> usize {
        self.values.dim(1)
    }

    pub fn token_width(&self) -> usize {
        self.values.dim(2)
    }

    fn token(&self, p: usize, v: usize) -> &[f32] {
        let c = self.token_width();
        let start = (p * self.views() + v) * c;
        &self.values.data()[start..start + c]
    }

    /// Views that count for pixel `p`; all of them when none observed it.
    fn active(&self, p: usize) -> Vec<bool> {
        let n = self.views();
        let m = &self.mask[p * n..(p + 1) * n];
        if m.iter().any(|&b| b) {
            m.to_vec()
        } else {
            vec![true; n]
        }
    }
}

/// HW×16.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregatedFeature {
    pub values: Tensor,
}

/// HW×24, aggregated columns first, voxel columns last.
#[derive(Clone, Debug, PartialEq)]
pub struct CombinedFeature {
    pub values: Tensor,
}

/// HW×Dg.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianFeature {
    pub values: Tensor,
}

/// Camera describing a `h`×`w` rendition of the image `cam` was calibrated for.
pub fn fit_camera(cam: &PinholeCamera, h: usize, w: usize) -> Result<PinholeCamera> {
    if (cam.height, cam.width) == (h, w) {
        return Ok(cam.clone());
    }
    let scaled = cam.scaled(h as f64 / cam.height as f64)?;
    if (scaled.height, scaled.width) != (h, w) {
        return Err(Error::shape(
            "fit_camera",
            "map extents",
            format!("{}x{} scaled", cam.height, cam.width),
            format!("{h}x{w}"),
        ));
    }
    Ok(scaled)
}

/// Back-projects each target pixel at its depth, samples every source view's
/// feature map and image there, and appends the ray-direction channels.
pub fn assemble_view_features(
    target: &PinholeCamera,
    sources: &[PinholeCamera],
    features: &[Tensor],
    images: &[Tensor],
    depth: &DepthMap,
) -> Result<PerViewPixelFeatures> {
    const OP: &str = "assemble_view_features";
    let n = sources.len();
    if n == 0 {
        return Err(Error::invalid(OP, "no source views"));
    }
    if features.len() != n || images.len() != n {
        return Err(Error::shape(OP, "per-view inputs", n, features.len().min(images.len())));
    }
    let c = features[0].dim(0);
    for f in features {
        f.expect_rank(OP, 3)?;
        if f.dim(0) != c {
            return Err(Error::shape(OP, "feature channels (axis 0)", c, f.dim(0)));
        }
    }
    for im in images {
        im.expect_rank(OP, 3)?;
        if im.dim(0) != 3 {
            return Err(Error::shape(OP, "image channels (axis 0)", 3, im.dim(0)));
        }
    }
    let (h, w) = (depth.height(), depth.width());
    let target = fit_camera(target, h, w)?;
    let points = backproject_depth(depth, &target);
    let width = c + EXTRA_CHANNELS;
    let plane = h * w;
    let mut values = vec![0.0f32; plane * n * width];
    let mut mask = vec![false; plane * n];

    for v in 0..n {
        let fcam = fit_camera(&sources[v], features[v].dim(1), features[v].dim(2))?;
        let icam = fit_camera(&sources[v], images[v].dim(1), images[v].dim(2))?;
        let rays = ray_direction_features(&target, &sources[v], &points)?;
        let per_pixel: Vec<(Vec<f32>, bool)> = points
            .points
            .par_iter()
            .enumerate()
            .map(|(p, x)| {
                let mut token = vec![0.0f32; width];
                let (fx, fy, fz) = fcam.project(x);
                let (ix, iy, iz) = icam.project(x);
                let ok_f = fz > 0.0 && sample_into(&features[v], fx - 0.5, fy - 0.5, &mut token[..c]);
                let ok_i = iz > 0.0 && sample_into(&images[v], ix - 0.5, iy - 0.5, &mut token[c..c + 3]);
                if !ok_f {
                    token[..c].iter_mut().for_each(|t| *t = 0.0);
                }
                if !ok_i {
                    token[c..c + 3].iter_mut().for_each(|t| *t = 0.0);
                }
                for k in 0..4 {
                    token[c + 3 + k] = rays.data()[k * plane + p];
                }
                (token, ok_f && ok_i)
            })
            .collect();
        for (p, (token, ok)) in per_pixel.into_iter().enumerate() {
            let start = (p * n + v) * width;
            values[start..start + width].copy_from_slice(&token);
            mask[p * n + v] = ok;
        }
    }
    PerViewPixelFeatures::new(Tensor::from_vec(&[plane, n, width], values)?, mask)
}

/// Per-token encoder-decoder along the view axis (all kernels of size one),
/// masked mean over views, then a 16→16 projection.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewUnetWeights {
    pub enc: Linear,
    pub mid: Linear,
    pub dec: Linear,
    pub proj: Linear,
}

impl ViewUnetWeights {
    const LAYERS: [(&'static str, usize, usize); 3] = [("mid", 16, 32), ("dec", 32, 16), ("proj", 16, 16)];

    pub fn init(store: &mut WeightStore, rng: &SeededRng, prefix: &str, token_width: usize) {
        Linear::init(store, rng, &format!("{prefix}.unet.enc"), token_width, 16, true);
        for (name, i, o) in Self::LAYERS {
            Linear::init(store, rng, &format!("{prefix}.unet.{name}"), i, o, true);
        }
    }

    pub fn load(store: &WeightStore, prefix: &str, token_width: usize) -> Result<Self> {
        let get = |name: &str, i, o| Linear::load(store, &format!("{prefix}.unet.{name}"), i, o, true);
        Ok(ViewUnetWeights {
            enc: get("enc", token_width, 16)?,
            mid: get("mid", 16, 32)?,
            dec: get("dec", 32, 16)?,
            proj: get("proj", 16, AGGREGATED_WIDTH)?,
        })
    }

    fn token_forward(&self, x: &[f32]) -> Vec<f32> {
        let e: Vec<f32> = self.enc.forward_row_vec(x).into_iter().map(relu).collect();
        let m: Vec<f32> = self.mid.forward_row_vec(&e).into_iter().map(relu).collect();
        let mut u = self.dec.forward_row_vec(&m);
        u.iter_mut().zip(&e).for_each(|(a, b)| *a += b);
        u
    }
}

pub fn view_unet_aggregate(tokens: &PerViewPixelFeatures, weights: &ViewUnetWeights) -> Result<AggregatedFeature> {
    const OP: &str = "view_unet_aggregate";
    if tokens.views() == 0 {
        return Err(Error::invalid(OP, "no view tokens"));
    }
    if weights.enc.in_width() != tokens.token_width() {
        return Err(Error::shape(OP, "token width (axis 2)", weights.enc.in_width(), tokens.token_width()));
    }
    let n = tokens.views();
    let rows: Vec<Vec<f32>> = (0..tokens.pixels())
        .into_par_iter()
        .map(|p| {
            let active = tokens.active(p);
            let per_view: Vec<Vec<f32>> = (0..n).filter(|&v| active[v]).map(|v| weights.token_forward(tokens.token(p, v))).collect();
            // Summing in sorted order makes the pooled value independent of view order.
            let pooled: Vec<f32> = (0..16)
                .map(|k| {
                    let mut col: Vec<f32> = per_view.iter().map(|u| u[k]).collect();
                    col.sort_by(f32::total_cmp);
                    (col.iter().map(|&x| f64::from(x)).sum::<f64>() / col.len() as f64) as f32
                })
                .collect();
            weights.proj.forward_row_vec(&pooled)
        })
        .collect();
    Ok(AggregatedFeature {
        values: Tensor::from_vec(&[tokens.pixels(), AGGREGATED_WIDTH], rows.concat())?,
    })
}

pub fn fuse_combined(aggregated: &AggregatedFeature, voxels: &VoxelFeatureMap) -> Result<CombinedFeature> {
    aggregated.values.expect_shape("fuse_combined", &[aggregated.values.dim(0), AGGREGATED_WIDTH])?;
    voxels.values.expect_shape("fuse_combined", &[aggregated.values.dim(0), VOXEL_CHANNELS])?;
    Ok(CombinedFeature {
        values: Tensor::concat_columns(&[&aggregated.values, &voxels.values])?,
    })
}

/// Single-head attention with the combined feature as the query and the view
/// tokens as keys and values.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    /// Projection of the query feature added to the output; identity when
    /// the output width equals the combined width.
    pub residual: Option<Linear>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CdaDims {
    pub attention: usize,
    pub output: usize,
}

impl Default for CdaDims {
    fn default() -> Self {
        CdaDims {
            attention: 16,
            output: COMBINED_WIDTH,
        }
    }
}

impl AttentionWeights {
    pub fn init(store: &mut WeightStore, rng: &SeededRng, prefix: &str, token_width: usize, dims: CdaDims) {
        let d = dims.attention;
        Linear::init(store, rng, &format!("{prefix}.attn.q"), COMBINED_WIDTH, d, false);
        Linear::init(store, rng, &format!("{prefix}.attn.k"), token_width, d, false);
        Linear::init(store, rng, &format!("{prefix}.attn.v"), token_width, d, true);
        Linear::init(store, rng, &format!("{prefix}.attn.o"), d, dims.output, true);
        if dims.output != COMBINED_WIDTH {
            Linear::init(store, rng, &format!("{prefix}.attn.residual"), COMBINED_WIDTH, dims.output, false);
        }
    }

    pub fn load(store: &WeightStore, prefix: &str, token_width: usize, dims: CdaDims) -> Result<Self> {
        let d = dims.attention;
        let get = |name: &str, i, o, bias| Linear::load(store, &format!("{prefix}.attn.{name}"), i, o, bias);
        Ok(AttentionWeights {
            q: get("q", COMBINED_WIDTH, d, false)?,
            k: get("k", token_width, d, false)?,
            v: get("v", token_width, d, true)?,
            o: get("o", d, dims.output, true)?,
            residual: if dims.output == COMBINED_WIDTH {
                None
            } else {
                Some(get("residual", COMBINED_WIDTH, dims.output, false)?)
            },
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionOutput {
    pub features: GaussianFeature,
    /// HW×N; zero for masked views.
    pub weights: Tensor,
}

pub fn cross_dimensional_attention(
    combined: &CombinedFeature,
    tokens: &PerViewPixelFeatures,
    weights: &AttentionWeights,
) -> Result<AttentionOutput> {
    const OP: &str = "cross_dimensional_attention";
    let n = tokens.views();
    if n == 0 {
        return Err(Error::invalid(OP, "no view tokens"));
    }
    combined.values.expect_shape(OP, &[tokens.pixels(), COMBINED_WIDTH])?;
    if weights.k.in_width() != tokens.token_width() {
        return Err(Error::shape(OP, "token width (axis 2)", weights.k.in_width(), tokens.token_width()));
    }
    let d = weights.q.out_width();
    let dg = weights.o.out_width();
    if weights.residual.is_none() && dg != COMBINED_WIDTH {
        return Err(Error::invalid(OP, "output width differs from query width without a residual projection"));
    }
    let scale = 1.0 / (d as f64).sqrt();
    let rows: Vec<(Vec<f32>, Vec<f32>)> = (0..tokens.pixels())
        .into_par_iter()
        .map(|p| {
            let fc = &combined.values.data()[p * COMBINED_WIDTH..(p + 1) * COMBINED_WIDTH];
            let q = weights.q.forward_row_vec(fc);
            let active = tokens.active(p);
            let mut scores = vec![f64::NEG_INFINITY; n];
            let mut vals = Vec::with_capacity(n);
            for v in 0..n {
                let x = tokens.token(p, v);
                vals.push(weights.v.forward_row_vec(x));
                if active[v] {
                    let k = weights.k.forward_row_vec(x);
                    let dot: f64 = q.iter().zip(&k).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum();
                    scores[v] = dot * scale;
                }
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            let alpha: Vec<f64> = exps.iter().map(|e| e / total).collect();
            let mut mixed = vec![0.0f32; d];
            for (c, m) in mixed.iter_mut().enumerate() {
                let acc: f64 = (0..n).map(|v| alpha[v] * f64::from(vals[v][c])).sum();
                *m = acc as f32;
            }
            let mut out = weights.o.forward_row_vec(&mixed);
            match &weights.residual {
                None => out.iter_mut().zip(fc).for_each(|(o, f)| *o += f),
                Some(r) => out.iter_mut().zip(r.forward_row_vec(fc)).for_each(|(o, f)| *o += f),
            }
            (out, alpha.iter().map(|&a| a as f32).collect())
        })
        .collect();
    let (feat, attn): (Vec<Vec<f32>>, Vec<Vec<f32>>) = rows.into_iter().unzip();
    Ok(AttentionOutput {
        features: GaussianFeature {
            values: Tensor::from_vec(&[tokens.pixels(), dg], feat.concat())?,
        },
        weights: Tensor::from_vec(&[tokens.pixels(), n], attn.concat())?,
    })
}

/// Both learned CDA blocks for one stage, stored under `cda.{stage}`.
#[derive(Clone, Debug, PartialEq)]
pub struct CdaWeights {
    pub unet: ViewUnetWeights,
    pub attention: AttentionWeights,
}

impl CdaWeights {
    pub fn init(store: &mut WeightStore, rng: &SeededRng, prefix: &str, token_width: usize, dims: CdaDims) {
        ViewUnetWeights::init(store, rng, prefix, token_width);
        AttentionWeights::init(store, rng, prefix, token_width, dims);
    }

    pub fn load(store: &WeightStore, prefix: &str, token_width: usize, dims: CdaDims) -> Result<Self> {
        Ok(CdaWeights {
            unet: ViewUnetWeights::load(store, prefix, token_width)?,
            attention: AttentionWeights::load(store, prefix, token_width, dims)?,
        })
    }
}

/// Aggregate, fuse with voxel features and attend: F_u → F_c → F_g.
pub fn cda_forward(
    tokens: &PerViewPixelFeatures,
    voxels: &VoxelFeatureMap,
    weights: &CdaWeights,
) -> Result<AttentionOutput> {
    let agg = view_unet_aggregate(tokens, &weights.unet)?;
    let combined = fuse_combined(&agg, voxels)?;
    cross_dimensional_attention(&combined, tokens, &weights.attention)
}
