//! Plane-sweep cost volume, regularization, soft-argmax depth and per-pixel
//! voxel features.

use rayon::prelude::*;

use crate::camera::PinholeCamera;
use crate::error::{Error, Result};
use crate::geometry::{warp_feature_at_depths, DepthMap};
use crate::kernels::{conv3d, relu, softmax_axis, trilinear_upsample_x2};
use crate::rng::SeededRng;
use crate::tensor::Tensor;
use crate::weights::WeightStore;

/// Width of the per-pixel voxel feature.
pub const VOXEL_CHANNELS: usize = 8;

/// Added to the negated cost of voxels seen by fewer than two views in
/// bypass mode, so they lose to every well-observed hypothesis.
pub const UNDER_OBSERVED_PENALTY: f32 = 1.0;

#[derive(Clone, Debug)]
pub struct CostVolume {
    /// G×D×H×W per-channel variance across views.
    pub values: Tensor,
    /// D×H×W hypothesis depth for every voxel.
    pub hypotheses: Tensor,
    /// D×H×W number of source views that observed each voxel.
    pub view_counts: Vec<u8>,
    pub camera: PinholeCamera,
}

impl CostVolume {
    pub fn depth_count(&self) -> usize {
        self.hypotheses.dim(0)
    }

    pub fn height(&self) -> usize {
        self.hypotheses.dim(1)
    }

    pub fn width(&self) -> usize {
        self.hypotheses.dim(2)
    }
}

/// D×H×W, nonnegative, sums to one along D.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityVolume {
    pub values: Tensor,
}

/// HW×8 pixel-major voxel features.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelFeatureMap {
    pub values: Tensor,
}

/// Where per-pixel voxel features are read from.
#[derive(Clone, Debug)]
pub enum VoxelSource {
    /// The regularizer's 8-channel penultimate volume, 8×D×H×W.
    Hidden(Tensor),
    /// Negated matching cost, D×H×W (bypass mode).
    NegatedCost(Tensor),
}

#[derive(Clone, Debug)]
pub struct Regularized {
    pub logits: Tensor,
    pub voxels: VoxelSource,
}

/// Warps every source feature map into the target frustum at each hypothesis
/// and aggregates across views by per-channel variance.
///
/// Voxels observed by a single view get variance 0; voxels observed by none
/// get cost 0. Both are recorded in `view_counts`.
pub fn build_cost_volume(
    target: &PinholeCamera,
    sources: &[PinholeCamera],
    features: &[Tensor],
    hypotheses: &Tensor,
) -> Result<CostVolume> {
    const OP: &str = "build_cost_volume";
    if sources.len() < 2 {
        return Err(Error::invalid(OP, format!("need at least 2 source views, got {}", sources.len())));
    }
    if features.len() != sources.len() {
        return Err(Error::shape(OP, "feature count", sources.len(), features.len()));
    }
    features[0].expect_rank(OP, 3)?;
    for f in features {
        f.expect_shape(OP, features[0].shape())?;
    }
    hypotheses.expect_rank(OP, 3)?;
    let (d, h, w) = (hypotheses.dim(0), hypotheses.dim(1), hypotheses.dim(2));
    if (target.height, target.width) != (h, w) {
        return Err(Error::shape(OP, "hypothesis extents", format!("{}x{}", target.height, target.width), format!("{h}x{w}")));
    }
    let g = features[0].dim(0);
    let plane = h * w;

    let slices: Vec<(Vec<f32>, Vec<u8>)> = (0..d)
        .into_par_iter()
        .map(|k| {
            let depths = &hypotheses.data()[k * plane..(k + 1) * plane];
            let warped: Vec<(Tensor, Vec<bool>)> = sources
                .iter()
                .zip(features)
                .map(|(src, f)| warp_feature_at_depths(f, src, target, depths, h, w))
                .collect::<Result<_>>()?;
            let mut cost = vec![0.0f32; g * plane];
            let mut counts = vec![0u8; plane];
            for p in 0..plane {
                let n = warped.iter().filter(|(_, m)| m[p]).count();
                counts[p] = n as u8;
                if n == 0 {
                    continue;
                }
                for ch in 0..g {
                    let idx = ch * plane + p;
                    let mut sum = 0.0f64;
                    for (t, m) in &warped {
                        if m[p] {
                            sum += f64::from(t.data()[idx]);
                        }
                    }
                    let mean = sum / n as f64;
                    let mut var = 0.0f64;
                    for (t, m) in &warped {
                        if m[p] {
                            let dv = f64::from(t.data()[idx]) - mean;
                            var += dv * dv;
                        }
                    }
                    cost[idx] = (var / n as f64) as f32;
                }
            }
            Ok((cost, counts))
        })
        .collect::<Result<_>>()?;

    let mut values = vec![0.0f32; g * d * plane];
    let mut view_counts = vec![0u8; d * plane];
    for (k, (cost, counts)) in slices.into_iter().enumerate() {
        for ch in 0..g {
            values[(ch * d + k) * plane..(ch * d + k + 1) * plane].copy_from_slice(&cost[ch * plane..(ch + 1) * plane]);
        }
        view_counts[k * plane..(k + 1) * plane].copy_from_slice(&counts);
    }
    Ok(CostVolume {
        values: Tensor::from_vec(&[g, d, h, w], values)?,
        hypotheses: hypotheses.clone(),
        view_counts,
        camera: target.clone(),
    })
}

#[derive(Clone, Debug, PartialEq)]
struct Conv3dLayer {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
}

impl Conv3dLayer {
    fn load(store: &WeightStore, prefix: &str, cout: usize, cin: usize, stride: usize) -> Result<Self> {
        Ok(Conv3dLayer {
            weight: store.get(&format!("{prefix}.weight"), &[cout, cin, 3, 3, 3])?.clone(),
            bias: store.get(&format!("{prefix}.bias"), &[cout])?.clone(),
            stride,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv3d(x, &self.weight, Some(&self.bias), self.stride, 1)
    }
}

/// Two-scale 3D encoder-decoder: G→8 (full) → 16 (half) → 16 → upsample →
/// 8 (+skip) → 1 logit channel.
#[derive(Clone, Debug, PartialEq)]
pub struct RegularizerWeights {
    pub in_channels: usize,
    layers: [Conv3dLayer; 5],
}

impl RegularizerWeights {
    const NAMES: [&'static str; 5] = ["conv0", "conv1", "conv2", "conv3", "prob"];

    fn shapes(g: usize) -> [(usize, usize, usize); 5] {
        [(8, g, 1), (16, 8, 2), (16, 16, 1), (8, 16, 1), (1, 8, 1)]
    }

    pub fn init(store: &mut WeightStore, rng: &SeededRng, prefix: &str, in_channels: usize) {
        for (name, (cout, cin, _)) in Self::NAMES.iter().zip(Self::shapes(in_channels)) {
            store.init_layer(rng, &format!("{prefix}.{name}"), &[cout, cin, 3, 3, 3], cin * 27);
        }
    }

    pub fn load(store: &WeightStore, prefix: &str, in_channels: usize) -> Result<Self> {
        let mut layers = Vec::with_capacity(5);
        for (name, (cout, cin, stride)) in Self::NAMES.iter().zip(Self::shapes(in_channels)) {
            layers.push(Conv3dLayer::load(store, &format!("{prefix}.{name}"), cout, cin, stride)?);
        }
        Ok(RegularizerWeights {
            in_channels,
            layers: layers.try_into().expect("five layers"),
        })
    }
}

pub enum RegularizeMode<'a> {
    Learned(&'a RegularizerWeights),
    /// Weight-free: channel-mean cost box-filtered over a `(2r+1)²` window
    /// in each hypothesis slice, negated.
    Bypass { radius: usize },
}

/// Mean of each H×W slice over the in-bounds part of a `(2r+1)²` window.
fn box_filter_slices(values: &[f32], d: usize, h: usize, w: usize, radius: usize) -> Vec<f32> {
    if radius == 0 {
        return values.to_vec();
    }
    let plane = h * w;
    let mut out = vec![0.0f32; values.len()];
    out.par_chunks_mut(plane).enumerate().for_each(|(k, dst)| {
        let src = &values[k * plane..(k + 1) * plane];
        for i in 0..h {
            let (i0, i1) = (i.saturating_sub(radius), (i + radius).min(h - 1));
            for j in 0..w {
                let (j0, j1) = (j.saturating_sub(radius), (j + radius).min(w - 1));
                let mut sum = 0.0f64;
                for ii in i0..=i1 {
                    for jj in j0..=j1 {
                        sum += f64::from(src[ii * w + jj]);
                    }
                }
                dst[i * w + j] = (sum / ((i1 - i0 + 1) * (j1 - j0 + 1)) as f64) as f32;
            }
        }
    });
    debug_assert_eq!(out.len(), d * plane);
    out
}

/// Turns the cost volume into D×H×W depth logits.
pub fn regularize(volume: &CostVolume, mode: RegularizeMode<'_>) -> Result<Regularized> {
    let (g, d, h, w) = (
        volume.values.dim(0),
        volume.values.dim(1),
        volume.values.dim(2),
        volume.values.dim(3),
    );
    match mode {
        RegularizeMode::Bypass { radius } => {
            let vox = d * h * w;
            let mut mean = vec![0.0f32; vox];
            for (v, dst) in mean.iter_mut().enumerate() {
                let sum: f64 = (0..g).map(|ch| f64::from(volume.values.data()[ch * vox + v])).sum();
                *dst = (sum / g as f64) as f32;
            }
            let neg: Vec<f32> = box_filter_slices(&mean, d, h, w, radius).into_iter().map(|c| -c).collect();
            let logits: Vec<f32> = neg
                .iter()
                .zip(&volume.view_counts)
                .map(|(&c, &n)| if n < 2 { c - UNDER_OBSERVED_PENALTY } else { c })
                .collect();
            Ok(Regularized {
                logits: Tensor::from_vec(&[d, h, w], logits)?,
                voxels: VoxelSource::NegatedCost(Tensor::from_vec(&[d, h, w], neg)?),
            })
        }
        RegularizeMode::Learned(weights) => {
            const OP: &str = "regularize";
            if weights.in_channels != g {
                return Err(Error::shape(OP, "cost channels (axis 0)", weights.in_channels, g));
            }
            if d % 2 != 0 || h % 2 != 0 || w % 2 != 0 {
                return Err(Error::invalid(OP, format!("learned mode needs even extents, got {d}x{h}x{w}")));
            }
            let l = &weights.layers;
            let c0 = l[0].forward(&volume.values)?.map(relu);
            let c1 = l[1].forward(&c0)?.map(relu);
            let c2 = l[2].forward(&c1)?.map(relu);
            let up = trilinear_upsample_x2(&c2)?;
            let hidden = l[3].forward(&up)?.add(&c0)?.map(relu);
            let logits = l[4].forward(&hidden)?.reshape(&[d, h, w])?;
            Ok(Regularized {
                logits,
                voxels: VoxelSource::Hidden(hidden),
            })
        }
    }
}

/// Softmax along D of `logits / temperature`.
pub fn to_probability(logits: &Tensor, temperature: f32) -> Result<ProbabilityVolume> {
    logits.expect_rank("to_probability", 3)?;
    if !(temperature > 0.0) {
        return Err(Error::invalid("to_probability", format!("temperature must be positive, got {temperature}")));
    }
    let scaled = logits.map(|v| v / temperature);
    Ok(ProbabilityVolume {
        values: softmax_axis(&scaled, 0)?,
    })
}

/// Soft-argmax: probability-weighted mean of the hypothesis depths,
/// normalized by the slice mass so the result stays inside the hull.
pub fn regress_depth(prob: &ProbabilityVolume, hypotheses: &Tensor) -> Result<DepthMap> {
    hypotheses.expect_shape("regress_depth", prob.values.shape())?;
    let (d, h, w) = (hypotheses.dim(0), hypotheses.dim(1), hypotheses.dim(2));
    let plane = h * w;
    let (p, hy) = (prob.values.data(), hypotheses.data());
    let depth = Tensor::from_fn(&[h, w], |px| {
        let (mut num, mut mass) = (0.0f64, 0.0f64);
        for k in 0..d {
            let pk = f64::from(p[k * plane + px]);
            num += pk * f64::from(hy[k * plane + px]);
            mass += pk;
        }
        (num / mass) as f32
    });
    DepthMap::all_valid(depth)
}

/// A pixel's depth is trusted when at least two views observed the
/// hypothesis nearest to it.
pub fn depth_validity(volume: &CostVolume, depth: &DepthMap) -> Vec<bool> {
    let (d, plane) = (volume.depth_count(), volume.height() * volume.width());
    (0..plane)
        .map(|p| {
            let z = depth.values.data()[p];
            let k = (0..d)
                .min_by(|&a, &b| {
                    let da = (volume.hypotheses.data()[a * plane + p] - z).abs();
                    let db = (volume.hypotheses.data()[b * plane + p] - z).abs();
                    da.total_cmp(&db)
                })
                .expect("at least one hypothesis");
            volume.view_counts[k * plane + p] >= 2
        })
        .collect()
}

/// Continuous hypothesis index of `depth` among one pixel's increasing
/// hypotheses, clamped to the end bins.
pub fn continuous_index(hyps: impl Fn(usize) -> f32, count: usize, depth: f32) -> f64 {
    if depth <= hyps(0) {
        return 0.0;
    }
    if depth >= hyps(count - 1) {
        return (count - 1) as f64;
    }
    let mut k = 0;
    while k + 2 < count && hyps(k + 1) <= depth {
        k += 1;
    }
    let (a, b) = (f64::from(hyps(k)), f64::from(hyps(k + 1)));
    k as f64 + (f64::from(depth) - a) / (b - a)
}

fn interp_along_d(volume: &[f32], d: usize, plane: usize, p: usize, idx: f64) -> f32 {
    let idx = idx.clamp(0.0, (d - 1) as f64);
    let k0 = (idx.floor() as usize).min(d.saturating_sub(2));
    let k1 = (k0 + 1).min(d - 1);
    let t = idx - k0 as f64;
    ((1.0 - t) * f64::from(volume[k0 * plane + p]) + t * f64::from(volume[k1 * plane + p])) as f32
}

/// Reads 8 values per pixel at the regressed depth's position along D.
///
/// With the learned regularizer these are its 8 hidden channels interpolated
/// at the continuous index; in bypass mode they are the negated cost sampled
/// at offsets −3.5 … +3.5 bins around it.
pub fn sample_voxel_features(voxels: &VoxelSource, hypotheses: &Tensor, depth: &DepthMap) -> Result<VoxelFeatureMap> {
    const OP: &str = "sample_voxel_features";
    hypotheses.expect_rank(OP, 3)?;
    let (d, h, w) = (hypotheses.dim(0), hypotheses.dim(1), hypotheses.dim(2));
    depth.values.expect_shape(OP, &[h, w])?;
    let plane = h * w;
    let hy = hypotheses.data();
    let mut out = vec![0.0f32; plane * VOXEL_CHANNELS];
    for p in 0..plane {
        let idx = continuous_index(|k| hy[k * plane + p], d, depth.values.data()[p]);
        let row = &mut out[p * VOXEL_CHANNELS..(p + 1) * VOXEL_CHANNELS];
        match voxels {
            VoxelSource::Hidden(vol) => {
                vol.expect_shape(OP, &[VOXEL_CHANNELS, d, h, w])?;
                for (ch, dst) in row.iter_mut().enumerate() {
                    *dst = interp_along_d(vol.slab(ch), d, plane, p, idx);
                }
            }
            VoxelSource::NegatedCost(vol) => {
                vol.expect_shape(OP, &[d, h, w])?;
                for (k, dst) in row.iter_mut().enumerate() {
                    let offset = k as f64 - (VOXEL_CHANNELS as f64 - 1.0) / 2.0;
                    *dst = interp_along_d(vol.data(), d, plane, p, idx + offset);
                }
            }
        }
    }
    Ok(VoxelFeatureMap {
        values: Tensor::from_vec(&[plane, VOXEL_CHANNELS], out)?,
    })
}
