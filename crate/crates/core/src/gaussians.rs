//! Pixel-aligned Gaussian clouds: attribute heads, cross-scale opacity
//! modulation and the GC01 / text exports.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::cda::GaussianFeature;
use crate::error::{Error, Result};
use crate::geometry::PointMap;
use crate::kernels::{bilinear_upsample_x2, Mlp, MlpSpec, OutputActivation};
use crate::rng::SeededRng;
use crate::tensor::Tensor;
use crate::weights::WeightStore;

pub const ALPHA_MIN: f32 = 1e-6;
pub const ALPHA_MAX: f32 = 1.0 - 1e-6;
pub const SCALE_MIN: f32 = 1e-5;
pub const HEAD_HIDDEN: usize = 32;
pub const GC01_MAGIC: &[u8; 4] = b"GC01";

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianCloud {
    /// M×3 world-space means.
    pub centers: Tensor,
    /// M×3 per-axis standard deviations.
    pub scales: Tensor,
    /// M×4 unit quaternions `(w, x, y, z)`.
    pub rotations: Tensor,
    /// M opacities.
    pub opacities: Tensor,
    /// M×3 RGB.
    pub colors: Tensor,
}

impl GaussianCloud {
    pub fn empty() -> Self {
        GaussianCloud {
            centers: Tensor::zeros(&[0, 3]),
            scales: Tensor::zeros(&[0, 3]),
            rotations: Tensor::zeros(&[0, 4]),
            opacities: Tensor::zeros(&[0]),
            colors: Tensor::zeros(&[0, 3]),
        }
    }

    pub fn len(&self) -> usize {
        self.opacities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn check_shapes(&self) -> Result<()> {
        const OP: &str = "gaussian cloud";
        let m = self.len();
        self.opacities.expect_shape(OP, &[m])?;
        self.centers.expect_shape(OP, &[m, 3])?;
        self.scales.expect_shape(OP, &[m, 3])?;
        self.rotations.expect_shape(OP, &[m, 4])?;
        self.colors.expect_shape(OP, &[m, 3])
    }

    pub fn is_finite(&self) -> bool {
        [&self.centers, &self.scales, &self.rotations, &self.opacities, &self.colors]
            .iter()
            .all(|t| t.is_finite())
    }

    /// Checks every range and norm invariant; returns the first violation.
    pub fn validate(&self) -> Result<()> {
        self.check_shapes()?;
        if !self.is_finite() {
            return Err(Error::NonFinite {
                op: "gaussian cloud",
                what: "attributes".into(),
            });
        }
        let bad = |msg: String| Err(Error::invalid("gaussian cloud", msg));
        for i in 0..self.len() {
            let q = &self.rotations.data()[4 * i..4 * i + 4];
            let norm = q.iter().map(|v| f64::from(*v).powi(2)).sum::<f64>().sqrt();
            if (norm - 1.0).abs() >= 1e-5 {
                return bad(format!("rotation {i} has norm {norm}"));
            }
            if self.scales.data()[3 * i..3 * i + 3].iter().any(|&s| !(s > 0.0)) {
                return bad(format!("scale {i} is not positive"));
            }
            let a = self.opacities.data()[i];
            if !(a > 0.0 && a < 1.0) {
                return bad(format!("opacity {i} = {a} outside (0, 1)"));
            }
            if self.colors.data()[3 * i..3 * i + 3].iter().any(|&c| !(0.0..=1.0).contains(&c)) {
                return bad(format!("color {i} outside [0, 1]"));
            }
        }
        Ok(())
    }

    /// Keeps the Gaussians whose index is in `keep`, in that order.
    pub fn select(&self, keep: &[usize]) -> GaussianCloud {
        let pick = |t: &Tensor, w: usize| {
            let data = keep.iter().flat_map(|&i| t.data()[i * w..(i + 1) * w].iter().copied()).collect();
            let shape: Vec<usize> = if w == 1 { vec![keep.len()] } else { vec![keep.len(), w] };
            Tensor::from_vec(&shape, data).expect("sized from keep")
        };
        GaussianCloud {
            centers: pick(&self.centers, 3),
            scales: pick(&self.scales, 3),
            rotations: pick(&self.rotations, 4),
            opacities: pick(&self.opacities, 1),
            colors: pick(&self.colors, 3),
        }
    }

    /// Binary export: magic, u32 count, then 14 little-endian f32 per Gaussian.
    pub fn to_gc01(&self) -> Vec<u8> {
        let mut out = GC01_MAGIC.to_vec();
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for i in 0..self.len() {
            let fields = [
                &self.centers.data()[3 * i..3 * i + 3],
                &self.scales.data()[3 * i..3 * i + 3],
                &self.rotations.data()[4 * i..4 * i + 4],
                &self.opacities.data()[i..i + 1],
                &self.colors.data()[3 * i..3 * i + 3],
            ];
            for v in fields.iter().flat_map(|f| f.iter()) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_gc01(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.get(..4) != Some(GC01_MAGIC.as_slice()) {
            return Err(Error::format(path, "magic", "expected GC01"));
        }
        let count = bytes
            .get(4..8)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
            .ok_or_else(|| Error::format(path, "count", "truncated"))?;
        let body = &bytes[8..];
        if body.len() != count * 14 * 4 {
            return Err(Error::format(
                path,
                "records",
                format!("expected {} bytes for {count} Gaussians, found {}", count * 56, body.len()),
            ));
        }
        let vals: Vec<f32> = body.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let column = |start: usize, w: usize| -> Vec<f32> {
            (0..count).flat_map(|i| vals[i * 14 + start..i * 14 + start + w].iter().copied()).collect()
        };
        Ok(GaussianCloud {
            centers: Tensor::from_vec(&[count, 3], column(0, 3))?,
            scales: Tensor::from_vec(&[count, 3], column(3, 3))?,
            rotations: Tensor::from_vec(&[count, 4], column(6, 4))?,
            opacities: Tensor::from_vec(&[count], column(10, 1))?,
            colors: Tensor::from_vec(&[count, 3], column(11, 3))?,
        })
    }

    pub fn save_gc01(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_gc01()).map_err(|e| Error::io(path, e))
    }

    pub fn load_gc01(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_gc01(&bytes, path)
    }

    /// ASCII PLY for inspection in point-cloud viewers.
    pub fn to_ply_text(&self) -> String {
        let mut s = String::from("ply\nformat ascii 1.0\n");
        let _ = writeln!(s, "element vertex {}", self.len());
        for name in ["x", "y", "z", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3", "opacity", "red", "green", "blue"] {
            let _ = writeln!(s, "property float {name}");
        }
        s.push_str("end_header\n");
        for i in 0..self.len() {
            let row: Vec<String> = self.centers.data()[3 * i..3 * i + 3]
                .iter()
                .chain(&self.scales.data()[3 * i..3 * i + 3])
                .chain(&self.rotations.data()[4 * i..4 * i + 4])
                .chain(&self.opacities.data()[i..i + 1])
                .chain(&self.colors.data()[3 * i..3 * i + 3])
                .map(|v| v.to_string())
                .collect();
            s.push_str(&row.join(" "));
            s.push('\n');
        }
        s
    }
}

/// Flips the quaternion so its first nonzero component is positive.
pub fn canonicalize_quaternion(q: &mut [f32]) {
    if let Some(&first) = q.iter().find(|&&v| v != 0.0) {
        if first < 0.0 {
            q.iter_mut().for_each(|v| *v = -*v);
        }
    }
}

/// Diagonal of the axis-aligned box around the points.
pub fn scene_diagonal(points: &PointMap) -> f32 {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in &points.points {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    if points.points.is_empty() {
        return 0.0;
    }
    (0..3).map(|a| (hi[a] - lo[a]).powi(2)).sum::<f64>().sqrt() as f32
}

fn centers_tensor(points: &PointMap) -> Tensor {
    let data = points.points.iter().flat_map(|p| [p.x as f32, p.y as f32, p.z as f32]).collect();
    Tensor::from_vec(&[points.points.len(), 3], data).expect("three per point")
}

/// The four attribute heads, shared by both stages.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadWeights {
    pub scale: Mlp,
    pub rotation: Mlp,
    pub opacity: Mlp,
    pub color: Mlp,
}

impl HeadWeights {
    fn specs(dg: usize) -> [(&'static str, MlpSpec); 4] {
        let spec = |out, act| MlpSpec::new(&[dg, HEAD_HIDDEN, out], act);
        [
            ("heads.scale", spec(3, OutputActivation::Softplus)),
            ("heads.rotation", spec(4, OutputActivation::None)),
            ("heads.opacity", spec(1, OutputActivation::Sigmoid)),
            ("heads.color", spec(3, OutputActivation::Sigmoid)),
        ]
    }

    pub fn init(store: &mut WeightStore, rng: &SeededRng, dg: usize) {
        for (prefix, spec) in Self::specs(dg) {
            Mlp::init(store, rng, prefix, &spec);
        }
        // Start the rotation head at the identity quaternion.
        if let Some(b) = store.get_mut("heads.rotation.layer1.bias") {
            b.data_mut()[0] = 1.0;
        }
    }

    pub fn load(store: &WeightStore, dg: usize) -> Result<Self> {
        let [s, r, o, c] = Self::specs(dg);
        Ok(HeadWeights {
            scale: Mlp::load(store, s.0, s.1)?,
            rotation: Mlp::load(store, r.0, r.1)?,
            opacity: Mlp::load(store, o.0, o.1)?,
            color: Mlp::load(store, c.0, c.1)?,
        })
    }
}

/// Runs the heads on every feature row and places each Gaussian at its
/// back-projected pixel.
pub fn decode_params(features: &GaussianFeature, centers: &PointMap, heads: &HeadWeights) -> Result<GaussianCloud> {
    const OP: &str = "decode_params";
    let m = centers.points.len();
    let dg = heads.scale.spec.input_width();
    features.values.expect_shape(OP, &[m, dg])?;
    let diag = scene_diagonal(centers).max(SCALE_MIN);
    let rows: Vec<[f32; 11]> = (0..m)
        .into_par_iter()
        .map(|i| {
            let x = &features.values.data()[i * dg..(i + 1) * dg];
            let s = heads.scale.forward_row(x)?;
            let mut r = heads.rotation.forward_row(x)?;
            crate::kernels::l2_normalize(&mut r).map_err(|_| Error::invalid(OP, format!("rotation head output {i} is zero")))?;
            canonicalize_quaternion(&mut r);
            let a = heads.opacity.forward_row(x)?[0].clamp(ALPHA_MIN, ALPHA_MAX);
            let c = heads.color.forward_row(x)?;
            let mut row = [0.0f32; 11];
            for k in 0..3 {
                row[k] = s[k].clamp(SCALE_MIN, diag);
                row[7 + k] = c[k].clamp(0.0, 1.0);
            }
            row[3..7].copy_from_slice(&r);
            row[10] = a;
            Ok(row)
        })
        .collect::<Result<_>>()?;
    let col = |start: usize, w: usize| -> Vec<f32> { rows.iter().flat_map(|r| r[start..start + w].iter().copied()).collect() };
    Ok(GaussianCloud {
        centers: centers_tensor(centers),
        scales: Tensor::from_vec(&[m, 3], col(0, 3))?,
        rotations: Tensor::from_vec(&[m, 4], col(3, 4))?,
        opacities: Tensor::from_vec(&[m], col(10, 1))?,
        colors: Tensor::from_vec(&[m, 3], col(7, 3))?,
    })
}

/// Weight-free Gaussians: given colors, fixed opacity and isotropic scale of
/// `scale_px` pixels at each center's depth.
pub fn photometric_cloud(
    centers: &PointMap,
    depths: &Tensor,
    focal: f64,
    colors: &Tensor,
    opacity: f32,
    scale_px: f32,
) -> Result<GaussianCloud> {
    const OP: &str = "photometric_cloud";
    let m = centers.points.len();
    colors.expect_shape(OP, &[m, 3])?;
    if depths.len() != m {
        return Err(Error::shape(OP, "depth count", m, depths.len()));
    }
    let scales = depths
        .data()
        .iter()
        .flat_map(|&d| [(f64::from(scale_px) * f64::from(d) / focal).max(f64::from(SCALE_MIN)) as f32; 3])
        .collect();
    Ok(GaussianCloud {
        centers: centers_tensor(centers),
        scales: Tensor::from_vec(&[m, 3], scales)?,
        rotations: Tensor::from_fn(&[m, 4], |i| if i % 4 == 0 { 1.0 } else { 0.0 }),
        opacities: Tensor::full(&[m], opacity.clamp(ALPHA_MIN, ALPHA_MAX)),
        colors: colors.map(|c| c.clamp(0.0, 1.0)),
    })
}

/// Per-Gaussian opacity multiplier in (0, 2).
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleModulation {
    pub w: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CsfWeights {
    pub mlp: Mlp,
}

impl CsfWeights {
    pub const PREFIX: &'static str = "csf.mlp";

    fn spec(dg: usize) -> MlpSpec {
        MlpSpec::new(&[2 * dg, HEAD_HIDDEN, 1], OutputActivation::ScaledSigmoid)
    }

    /// Random hidden layer, zero output layer: starts as the identity modulation.
    pub fn init(store: &mut WeightStore, rng: &SeededRng, dg: usize) {
        Mlp::init(store, rng, Self::PREFIX, &Self::spec(dg));
        for name in ["weight", "bias"] {
            if let Some(t) = store.get_mut(&format!("{}.layer1.{name}", Self::PREFIX)) {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    pub fn load(store: &WeightStore, dg: usize) -> Result<Self> {
        Ok(CsfWeights {
            mlp: Mlp::load(store, Self::PREFIX, Self::spec(dg))?,
        })
    }
}

/// Upsamples the coarse features to the fine grid, concatenates channelwise
/// and predicts one modulation weight per fine pixel.
pub fn csf_fuse(
    coarse: &GaussianFeature,
    coarse_hw: (usize, usize),
    fine: &GaussianFeature,
    fine_hw: (usize, usize),
    weights: &CsfWeights,
) -> Result<ScaleModulation> {
    const OP: &str = "csf_fuse";
    if fine_hw != (2 * coarse_hw.0, 2 * coarse_hw.1) {
        return Err(Error::shape(
            OP,
            "fine grid",
            format!("{}x{}", 2 * coarse_hw.0, 2 * coarse_hw.1),
            format!("{}x{}", fine_hw.0, fine_hw.1),
        ));
    }
    let dg = coarse.values.dim(1);
    coarse.values.expect_shape(OP, &[coarse_hw.0 * coarse_hw.1, dg])?;
    fine.values.expect_shape(OP, &[fine_hw.0 * fine_hw.1, dg])?;
    let up = bilinear_upsample_x2(&coarse.values.rows_to_map(coarse_hw.0, coarse_hw.1)?)?.map_to_rows()?;
    let cat = Tensor::concat_columns(&[&up, &fine.values])?;
    let w = crate::kernels::mlp_forward(&weights.mlp, &cat)?;
    Ok(ScaleModulation {
        w: w.reshape(&[fine_hw.0 * fine_hw.1])?,
    })
}

/// Scales opacities by `w`; every other attribute is passed through untouched.
pub fn apply_modulation(cloud: &GaussianCloud, modulation: &ScaleModulation) -> Result<GaussianCloud> {
    modulation.w.expect_shape("apply_modulation", &[cloud.len()])?;
    let opacities = cloud
        .opacities
        .zip_map(&modulation.w, |a, w| (a * w).clamp(ALPHA_MIN, ALPHA_MAX))?;
    Ok(GaussianCloud {
        opacities,
        ..cloud.clone()
    })
}
