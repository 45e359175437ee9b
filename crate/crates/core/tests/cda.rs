mod common;

use common::*;
use gsmvs::cda::{
    assemble_view_features, cross_dimensional_attention, fuse_combined, view_unet_aggregate, AttentionWeights, CdaDims,
    CombinedFeature, PerViewPixelFeatures, ViewUnetWeights, AGGREGATED_WIDTH, COMBINED_WIDTH, EXTRA_CHANNELS,
};
use gsmvs::cost_volume::{VoxelFeatureMap, VOXEL_CHANNELS};
use gsmvs::geometry::DepthMap;
use gsmvs::kernels::Linear;
use gsmvs::rng::SeededRng;
use gsmvs::synth::{generate_synthetic_scene, SceneKind, SynthSpec};
use gsmvs::tensor::Tensor;
use gsmvs::weights::WeightStore;
use proptest::prelude::*;
use rand::seq::SliceRandom;

fn small_scene(kind: SceneKind, sources: usize, seed: u64) -> gsmvs::scene::SceneBundle {
    let mut spec = SynthSpec::new(kind, sources, seed);
    spec.height = 48;
    spec.width = 64;
    generate_synthetic_scene(&spec).unwrap()
}

fn linear_ref(l: &Linear, x: &[f64]) -> Vec<f64> {
    let (out, inp) = (l.weight.dim(0), l.weight.dim(1));
    (0..out)
        .map(|o| {
            l.bias.as_ref().map_or(0.0, |b| f64::from(b.data()[o]))
                + (0..inp).map(|i| f64::from(l.weight.at(&[o, i])) * x[i]).sum::<f64>()
        })
        .collect()
}

fn token_rows(t: &PerViewPixelFeatures, p: usize) -> Vec<Vec<f64>> {
    let (n, c) = (t.views(), t.token_width());
    (0..n).map(|v| t.values.data()[(p * n + v) * c..(p * n + v + 1) * c].iter().map(|&x| f64::from(x)).collect()).collect()
}

fn unet(seed: u64, width: usize) -> ViewUnetWeights {
    let mut store = WeightStore::new();
    ViewUnetWeights::init(&mut store, &SeededRng::new(seed), "cda.t", width);
    ViewUnetWeights::load(&store, "cda.t", width).unwrap()
}

fn attention(seed: u64, width: usize, dims: CdaDims) -> AttentionWeights {
    let mut store = WeightStore::new();
    AttentionWeights::init(&mut store, &SeededRng::new(seed), "cda.t", width, dims);
    AttentionWeights::load(&store, "cda.t", width, dims).unwrap()
}

fn random_tokens(seed: u64, p: usize, n: usize, c: usize, masked: bool) -> PerViewPixelFeatures {
    let mut r = rng(seed);
    let values = random_tensor(&mut r, &[p, n, c], 2.0);
    let mask = (0..p * n).map(|i| !masked || rand::Rng::gen_bool(&mut r, 0.6) || i % n == 0).collect();
    PerViewPixelFeatures::new(values, mask).unwrap()
}

fn permute(t: &PerViewPixelFeatures, order: &[usize]) -> PerViewPixelFeatures {
    let (p, n, c) = (t.pixels(), t.views(), t.token_width());
    let mut values = Vec::new();
    let mut mask = Vec::new();
    for px in 0..p {
        for &v in order {
            values.extend_from_slice(&t.values.data()[(px * n + v) * c..(px * n + v + 1) * c]);
            mask.push(t.mask[px * n + v]);
        }
    }
    PerViewPixelFeatures::new(Tensor::from_vec(&[p, n, c], values).unwrap(), mask).unwrap()
}

#[test]
fn target_as_only_source_reproduces_target_image() {
    let scene = small_scene(SceneKind::Sphere, 2, 1);
    let img = scene.target_image.clone().unwrap();
    let depth = scene.target_depth.clone().unwrap();
    let t = assemble_view_features(&scene.target, &[scene.target.clone()], &[img.clone()], &[img.clone()], &depth).unwrap();
    let plane = 48 * 64;
    assert_eq!(t.values.shape(), &[plane, 1, 3 + EXTRA_CHANNELS]);
    for p in 0..plane {
        let row = &t.values.data()[p * 10..(p + 1) * 10];
        for c in 0..3 {
            assert!((row[3 + c] - img.data()[c * plane + p]).abs() < 1e-4);
        }
        assert_eq!(&row[6..9], &[0.0, 0.0, 0.0]);
        assert!((row[9] - 1.0).abs() < 1e-6);
    }
}

fn cross_view_rgb_spread(scene: &gsmvs::scene::SceneBundle, depth: &DepthMap) -> (f64, f64) {
    let t = assemble_view_features(&scene.target, &scene.sources, &scene.source_images, &scene.source_images, depth).unwrap();
    let (n, c) = (t.views(), t.token_width());
    let (mut dev, mut var, mut count) = (0.0f64, 0.0f64, 0usize);
    for p in 0..t.pixels() {
        if !(0..n).all(|v| t.mask[p * n + v]) {
            continue;
        }
        for ch in 0..3 {
            let vals: Vec<f64> = (0..n).map(|v| f64::from(t.values.data()[(p * n + v) * c + 3 + ch])).collect();
            let m = vals.iter().sum::<f64>() / n as f64;
            dev += vals.iter().map(|x| (x - m).abs()).sum::<f64>() / n as f64;
            var += vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64;
            count += 1;
        }
    }
    (dev / count as f64, var / count as f64)
}

#[test]
fn plane_views_agree_at_true_depth_and_disagree_when_shifted() {
    let scene = small_scene(SceneKind::Plane, 3, 4);
    let gt = scene.target_depth.clone().unwrap();
    let (dev, var) = cross_view_rgb_spread(&scene, &gt);
    assert!(dev < 2e-2, "mean cross-view deviation {dev}");
    let spacing = ((scene.target.depth_max - scene.target.depth_min) / 63.0) as f32;
    let shifted = DepthMap::all_valid(gt.values.map(|z| z + spacing)).unwrap();
    let (_, var_shifted) = cross_view_rgb_spread(&scene, &shifted);
    assert!(var_shifted > var, "{var_shifted} <= {var}");
}

#[test]
fn unet_zero_input_zero_bias_gives_zero() {
    let mut w = unet(1, 10);
    for l in [&mut w.enc, &mut w.mid, &mut w.dec, &mut w.proj] {
        l.bias = l.bias.as_ref().map(|b| Tensor::zeros(b.shape()));
    }
    let t = PerViewPixelFeatures::new(Tensor::zeros(&[4, 3, 10]), vec![true; 12]).unwrap();
    let out = view_unet_aggregate(&t, &w).unwrap();
    assert!(out.values.data().iter().all(|&v| v == 0.0));
}

#[test]
fn unet_matches_composed_oracle() {
    let w = unet(2, 12);
    let t = random_tokens(3, 7, 3, 12, true);
    let out = view_unet_aggregate(&t, &w).unwrap();
    let relu = |v: Vec<f64>| v.into_iter().map(|x| x.max(0.0)).collect::<Vec<_>>();
    for p in 0..7 {
        let rows = token_rows(&t, p);
        let active: Vec<usize> = (0..3).filter(|&v| t.mask[p * 3 + v]).collect();
        let mut pooled = vec![0.0; 16];
        for &v in &active {
            let e = relu(linear_ref(&w.enc, &rows[v]));
            let m = relu(linear_ref(&w.mid, &e));
            let u = linear_ref(&w.dec, &m);
            for k in 0..16 {
                pooled[k] += (u[k] + e[k]) / active.len() as f64;
            }
        }
        let e = linear_ref(&w.proj, &pooled);
        for k in 0..AGGREGATED_WIDTH {
            assert!((f64::from(out.values.at(&[p, k])) - e[k]).abs() < 1e-5);
        }
    }
}

#[test]
fn attention_matches_scalar_oracle() {
    for dims in [CdaDims::default(), CdaDims { attention: 8, output: 12 }] {
        let w = attention(4, 11, dims);
        let t = random_tokens(5, 6, 4, 11, true);
        let mut r = rng(6);
        let combined = CombinedFeature { values: random_tensor(&mut r, &[6, COMBINED_WIDTH], 1.5) };
        let out = cross_dimensional_attention(&combined, &t, &w).unwrap();
        for p in 0..6 {
            let fc: Vec<f64> = combined.values.data()[p * COMBINED_WIDTH..(p + 1) * COMBINED_WIDTH].iter().map(|&x| f64::from(x)).collect();
            let q = linear_ref(&w.q, &fc);
            let rows = token_rows(&t, p);
            let active: Vec<usize> = (0..4).filter(|&v| t.mask[p * 4 + v]).collect();
            let scores: Vec<f64> = active
                .iter()
                .map(|&v| q.iter().zip(linear_ref(&w.k, &rows[v])).map(|(a, b)| a * b).sum::<f64>() / (dims.attention as f64).sqrt())
                .collect();
            let alpha = softmax_ref(&scores);
            let mut mixed = vec![0.0; dims.attention];
            for (a, &v) in alpha.iter().zip(&active) {
                for (m, x) in mixed.iter_mut().zip(linear_ref(&w.v, &rows[v])) {
                    *m += a * x;
                }
            }
            let mut expect = linear_ref(&w.o, &mixed);
            let res = match &w.residual {
                Some(l) => linear_ref(l, &fc),
                None => fc.clone(),
            };
            expect.iter_mut().zip(res).for_each(|(e, x)| *e += x);
            for (k, e) in expect.iter().enumerate() {
                assert!((f64::from(out.features.values.at(&[p, k])) - e).abs() < 1e-5);
            }
            for (a, &v) in alpha.iter().zip(&active) {
                assert!((f64::from(out.weights.at(&[p, v])) - a).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn stage_shapes() {
    let t = random_tokens(7, 9, 3, 15, false);
    let agg = view_unet_aggregate(&t, &unet(1, 15)).unwrap();
    assert_eq!(agg.values.shape(), &[9, AGGREGATED_WIDTH]);
    let vox = VoxelFeatureMap { values: Tensor::zeros(&[9, VOXEL_CHANNELS]) };
    let comb = fuse_combined(&agg, &vox).unwrap();
    assert_eq!(comb.values.shape(), &[9, 24]);
    assert_eq!(&comb.values.data()[..16], &agg.values.data()[..16]);
    let out = cross_dimensional_attention(&comb, &t, &attention(2, 15, CdaDims::default())).unwrap();
    assert_eq!(out.features.values.shape(), &[9, 24]);
    assert_eq!(out.weights.shape(), &[9, 3]);
    assert!(view_unet_aggregate(&t, &unet(1, 14)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn attention_weights_normalized_and_permutation_invariant(
        seed in any::<u64>(), n in 1usize..6, p in 1usize..10, masked in any::<bool>(), wide in any::<bool>()
    ) {
        let dims = if wide { CdaDims::default() } else { CdaDims { attention: 6, output: 20 } };
        let w = attention(seed, 9, dims);
        let t = random_tokens(seed ^ 1, p, n, 9, masked);
        let mut r = rng(seed ^ 2);
        let combined = CombinedFeature { values: random_tensor(&mut r, &[p, COMBINED_WIDTH], 2.0) };
        let out = cross_dimensional_attention(&combined, &t, &w).unwrap();
        for px in 0..p {
            let row = &out.weights.data()[px * n..(px + 1) * n];
            prop_assert!(row.iter().all(|&a| a >= 0.0));
            prop_assert!((row.iter().map(|&a| f64::from(a)).sum::<f64>() - 1.0).abs() <= 1e-6);
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut r);
        let perm = cross_dimensional_attention(&combined, &permute(&t, &order), &w).unwrap();
        prop_assert!(perm.features.values.max_abs_diff(&out.features.values) <= 1e-6);
        for px in 0..p {
            for (slot, &v) in order.iter().enumerate() {
                prop_assert!((perm.weights.data()[px * n + slot] - out.weights.data()[px * n + v]).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn unet_is_exactly_permutation_invariant(seed in any::<u64>(), n in 1usize..6, p in 1usize..8) {
        let w = unet(seed, 10);
        let t = random_tokens(seed ^ 3, p, n, 10, true);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng(seed));
        let a = view_unet_aggregate(&t, &w).unwrap();
        let b = view_unet_aggregate(&permute(&t, &order), &w).unwrap();
        prop_assert!(a.values == b.values);
    }
}
