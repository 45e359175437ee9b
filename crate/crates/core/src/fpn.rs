//! Two-level feature pyramid and coordinate-guided attention.
//!
//! The encoder produces a coarse level at 1/4 and a fine level at 1/2 of the
//! input resolution. Coordinate-guided attention pools the fine level along
//! each spatial axis, mixes the pooled profiles with one 1D convolution, and
//! modulates the fine level with the resulting per-row and per-column gates
//! before the upsampled coarse level is added.

use crate::error::{Error, Result};
use crate::kernels::{bilinear_upsample_x2, conv1d, conv2d, relu, sigmoid};
use crate::rng::SeededRng;
use crate::tensor::Tensor;
use crate::weights::WeightStore;

/// Levels ordered coarse to fine; each finer level doubles H and W.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
}

impl FeaturePyramid {
    pub fn coarse(&self) -> &Tensor {
        &self.levels[0]
    }

    pub fn fine(&self) -> &Tensor {
        &self.levels[1]
    }
}

/// Per-row gates `A_h` (C×H×1) and per-column gates `A_w` (C×1×W).
#[derive(Clone, Debug, PartialEq)]
pub struct CgaAttentionMaps {
    pub a_h: Tensor,
    pub a_w: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2dLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
}

impl Conv2dLayer {
    fn load(store: &WeightStore, prefix: &str, cout: usize, cin: usize, k: usize, stride: usize) -> Result<Self> {
        Ok(Conv2dLayer {
            weight: store.get(&format!("{prefix}.weight"), &[cout, cin, k, k])?.clone(),
            bias: store.get(&format!("{prefix}.bias"), &[cout])?.clone(),
            stride,
        })
    }

    fn init(store: &mut WeightStore, rng: &SeededRng, prefix: &str, cout: usize, cin: usize, k: usize) {
        store.init_layer(rng, prefix, &[cout, cin, k, k], cin * k * k);
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let k = self.weight.dim(2);
        conv2d(x, &self.weight, Some(&self.bias), self.stride, k / 2)
    }

    fn forward_relu(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward(x)?.map(relu))
    }
}

/// Channel widths of the coarse and fine pyramid levels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FpnWidths {
    pub coarse: usize,
    pub fine: usize,
}

impl Default for FpnWidths {
    fn default() -> Self {
        FpnWidths { coarse: 16, fine: 8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FpnWeights {
    pub widths: FpnWidths,
    /// Full → 1/2 resolution trunk.
    enc_fine: [Conv2dLayer; 2],
    /// 1/2 → 1/4 resolution trunk.
    enc_coarse: [Conv2dLayer; 2],
    lateral_coarse: Conv2dLayer,
    lateral_fine: Conv2dLayer,
    /// 1×1 projection of the coarse level to the fine width before fusion.
    top_down: Conv2dLayer,
    /// Conv1D weights C×C×3 and bias over the concatenated pooled profiles.
    pub cga_weight: Tensor,
    pub cga_bias: Tensor,
}

pub const CGA_KERNEL: usize = 3;

impl FpnWeights {
    pub fn init(store: &mut WeightStore, rng: &SeededRng, widths: FpnWidths) {
        let (c0, c1) = (widths.coarse, widths.fine);
        Conv2dLayer::init(store, rng, "fpn.enc_fine.conv0", c1, 3, 3);
        Conv2dLayer::init(store, rng, "fpn.enc_fine.conv1", c1, c1, 3);
        Conv2dLayer::init(store, rng, "fpn.enc_coarse.conv0", c0, c1, 3);
        Conv2dLayer::init(store, rng, "fpn.enc_coarse.conv1", c0, c0, 3);
        Conv2dLayer::init(store, rng, "fpn.lateral_coarse", c0, c0, 1);
        Conv2dLayer::init(store, rng, "fpn.lateral_fine", c1, c1, 1);
        Conv2dLayer::init(store, rng, "fpn.top_down", c1, c0, 1);
        store.init_layer(rng, "cga.conv1d", &[c1, c1, CGA_KERNEL], c1 * CGA_KERNEL);
    }

    pub fn load(store: &WeightStore, widths: FpnWidths) -> Result<Self> {
        let (c0, c1) = (widths.coarse, widths.fine);
        Ok(FpnWeights {
            widths,
            enc_fine: [
                Conv2dLayer::load(store, "fpn.enc_fine.conv0", c1, 3, 3, 2)?,
                Conv2dLayer::load(store, "fpn.enc_fine.conv1", c1, c1, 3, 1)?,
            ],
            enc_coarse: [
                Conv2dLayer::load(store, "fpn.enc_coarse.conv0", c0, c1, 3, 2)?,
                Conv2dLayer::load(store, "fpn.enc_coarse.conv1", c0, c0, 3, 1)?,
            ],
            lateral_coarse: Conv2dLayer::load(store, "fpn.lateral_coarse", c0, c0, 1, 1)?,
            lateral_fine: Conv2dLayer::load(store, "fpn.lateral_fine", c1, c1, 1, 1)?,
            top_down: Conv2dLayer::load(store, "fpn.top_down", c1, c0, 1, 1)?,
            cga_weight: store.get("cga.conv1d.weight", &[c1, c1, CGA_KERNEL])?.clone(),
            cga_bias: store.get("cga.conv1d.bias", &[c1])?.clone(),
        })
    }
}

/// Runs the strided encoder and lateral convolutions on a 3×H×W image.
pub fn extract_pyramid(image: &Tensor, weights: &FpnWeights) -> Result<FeaturePyramid> {
    image.expect_rank("extract_pyramid", 3)?;
    if image.dim(0) != 3 {
        return Err(Error::shape("extract_pyramid", "axis 0 (channels)", 3, image.dim(0)));
    }
    let (h, w) = (image.dim(1), image.dim(2));
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::invalid("extract_pyramid", format!("extents {h}x{w} must be divisible by 4")));
    }
    let e1 = weights.enc_fine[0].forward_relu(image)?;
    let e1 = weights.enc_fine[1].forward_relu(&e1)?;
    let e0 = weights.enc_coarse[0].forward_relu(&e1)?;
    let e0 = weights.enc_coarse[1].forward_relu(&e0)?;
    Ok(FeaturePyramid {
        levels: vec![weights.lateral_coarse.forward(&e0)?, weights.lateral_fine.forward(&e1)?],
    })
}

/// Mean over width (`T_h`, C×H×1) and over height (`T_w`, C×1×W).
pub fn cga_pool(f: &Tensor) -> Result<(Tensor, Tensor)> {
    f.expect_rank("cga_pool", 3)?;
    let (c, h, w) = (f.dim(0), f.dim(1), f.dim(2));
    let mut th = vec![0.0f32; c * h];
    let mut tw = vec![0.0f32; c * w];
    for ch in 0..c {
        let s = f.slab(ch);
        for i in 0..h {
            let sum: f64 = s[i * w..(i + 1) * w].iter().map(|&v| f64::from(v)).sum();
            th[ch * h + i] = (sum / w as f64) as f32;
        }
        for j in 0..w {
            let sum: f64 = (0..h).map(|i| f64::from(s[i * w + j])).sum();
            tw[ch * w + j] = (sum / h as f64) as f32;
        }
    }
    Ok((Tensor::from_vec(&[c, h, 1], th)?, Tensor::from_vec(&[c, 1, w], tw)?))
}

/// Concatenates the pooled profiles along the spatial axis, applies the
/// Conv1D and a sigmoid, and splits the result back into row/column gates.
pub fn cga_attention(t_h: &Tensor, t_w: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<CgaAttentionMaps> {
    const OP: &str = "cga_attention";
    t_h.expect_rank(OP, 3)?;
    t_w.expect_rank(OP, 3)?;
    let (c, h, w) = (t_h.dim(0), t_h.dim(1), t_w.dim(2));
    t_h.expect_shape(OP, &[c, h, 1])?;
    t_w.expect_shape(OP, &[c, 1, w])?;
    if weight.rank() != 3 || weight.dim(0) != c || weight.dim(1) != c {
        return Err(Error::shape(OP, "conv weight", format!("[{c}, {c}, k]"), format!("{:?}", weight.shape())));
    }
    let mut cat = Vec::with_capacity(c * (h + w));
    for ch in 0..c {
        cat.extend_from_slice(t_h.slab(ch));
        cat.extend_from_slice(t_w.slab(ch));
    }
    let cat = Tensor::from_vec(&[c, h + w], cat)?;
    let k = weight.dim(2);
    let attn = conv1d(&cat, weight, Some(bias), k / 2)?.map(sigmoid);
    let mut a_h = Vec::with_capacity(c * h);
    let mut a_w = Vec::with_capacity(c * w);
    for ch in 0..c {
        let row = attn.slab(ch);
        a_h.extend_from_slice(&row[..h]);
        a_w.extend_from_slice(&row[h..]);
    }
    Ok(CgaAttentionMaps {
        a_h: Tensor::from_vec(&[c, h, 1], a_h)?,
        a_w: Tensor::from_vec(&[c, 1, w], a_w)?,
    })
}

/// `A_h ⊙ A_w ⊙ F` with broadcasting.
pub fn cga_modulate(f: &Tensor, maps: &CgaAttentionMaps) -> Result<Tensor> {
    f.expect_rank("cga_modulate", 3)?;
    let (c, h, w) = (f.dim(0), f.dim(1), f.dim(2));
    maps.a_h.expect_shape("cga_modulate", &[c, h, 1])?;
    maps.a_w.expect_shape("cga_modulate", &[c, 1, w])?;
    let (ah, aw) = (maps.a_h.data(), maps.a_w.data());
    Ok(Tensor::from_fn(&[c, h, w], |idx| {
        let (ch, i, j) = (idx / (h * w), (idx / w) % h, idx % w);
        ah[ch * h + i] * aw[ch * w + j] * f.data()[idx]
    }))
}

/// `upsample(F_coarse) + F_fine_modulated`.
pub fn cga_fuse_levels(coarse: &Tensor, fine_modulated: &Tensor) -> Result<Tensor> {
    coarse.expect_rank("cga_fuse_levels", 3)?;
    let up = bilinear_upsample_x2(coarse)?;
    fine_modulated.expect_shape("cga_fuse_levels", up.shape())?;
    up.add(fine_modulated)
}

/// Full attention path on a pyramid: modulate the fine level and add the
/// projected, upsampled coarse level. Returns the fused fine-level features.
pub fn cga_fuse_pyramid(pyramid: &FeaturePyramid, weights: &FpnWeights) -> Result<Tensor> {
    let fine = pyramid.fine();
    let (t_h, t_w) = cga_pool(fine)?;
    let maps = cga_attention(&t_h, &t_w, &weights.cga_weight, &weights.cga_bias)?;
    let modulated = cga_modulate(fine, &maps)?;
    let coarse = weights.top_down.forward(pyramid.coarse())?;
    cga_fuse_levels(&coarse, &modulated)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_constant_and_ramp() {
        let (th, tw) = cga_pool(&Tensor::full(&[2, 3, 4], 1.5)).unwrap();
        assert!(th.data().iter().chain(tw.data()).all(|&v| v == 1.5));
        let ramp = Tensor::from_fn(&[1, 2, 3], |i| (i % 3) as f32);
        let (th, tw) = cga_pool(&ramp).unwrap();
        assert_eq!(th.data(), &[1.0, 1.0]);
        assert_eq!(tw.data(), &[0.0, 1.0, 2.0]);
    }

    #[test]
    fn zero_conv_gives_half_gates_and_quarter_scale() {
        let f = Tensor::from_fn(&[3, 4, 6], |i| (i as f32 * 0.71).sin());
        let (th, tw) = cga_pool(&f).unwrap();
        let maps = cga_attention(&th, &tw, &Tensor::zeros(&[3, 3, 3]), &Tensor::zeros(&[3])).unwrap();
        assert!(maps.a_h.data().iter().chain(maps.a_w.data()).all(|&v| v == 0.5));
        let out = cga_modulate(&f, &maps).unwrap();
        for (o, i) in out.data().iter().zip(f.data()) {
            assert_eq!(*o, 0.25 * i);
        }
    }

    #[test]
    fn ones_gates_passthrough() {
        let f = Tensor::from_fn(&[2, 3, 3], |i| i as f32);
        let maps = CgaAttentionMaps {
            a_h: Tensor::full(&[2, 3, 1], 1.0),
            a_w: Tensor::full(&[2, 1, 3], 1.0),
        };
        assert_eq!(cga_modulate(&f, &maps).unwrap(), f);
    }

    #[test]
    fn fuse_constants_and_zero_coarse() {
        let out = cga_fuse_levels(&Tensor::full(&[2, 2, 3], 0.5), &Tensor::full(&[2, 4, 6], 2.0)).unwrap();
        assert!(out.data().iter().all(|&v| v == 2.5));
        let fine = Tensor::from_fn(&[1, 4, 4], |i| i as f32);
        assert_eq!(cga_fuse_levels(&Tensor::zeros(&[1, 2, 2]), &fine).unwrap(), fine);
        assert!(cga_fuse_levels(&Tensor::zeros(&[1, 2, 2]), &Tensor::zeros(&[1, 4, 5])).is_err());
    }

    #[test]
    fn pyramid_shapes_and_zero_image() {
        let mut store = WeightStore::new();
        FpnWeights::init(&mut store, &SeededRng::new(5), FpnWidths::default());
        let weights = FpnWeights::load(&store, FpnWidths::default()).unwrap();
        let pyr = extract_pyramid(&Tensor::zeros(&[3, 16, 24]), &weights).unwrap();
        assert_eq!(pyr.coarse().shape(), &[16, 4, 6]);
        assert_eq!(pyr.fine().shape(), &[8, 8, 12]);
        assert!(pyr.levels.iter().all(|l| l.data().iter().all(|&v| v == 0.0)));
        assert!(extract_pyramid(&Tensor::zeros(&[3, 18, 24]), &weights).is_err());
        let fused = cga_fuse_pyramid(&pyr, &weights).unwrap();
        assert_eq!(fused.shape(), &[8, 8, 12]);
    }

    #[test]
    fn attention_channel_mismatch() {
        let (th, tw) = cga_pool(&Tensor::zeros(&[2, 3, 3])).unwrap();
        assert!(cga_attention(&th, &tw, &Tensor::zeros(&[3, 3, 3]), &Tensor::zeros(&[3])).is_err());
    }
}
