mod common;

use common::*;
use gsmvs::fpn::{
    cga_attention, cga_fuse_levels, cga_modulate, cga_pool, extract_pyramid, CgaAttentionMaps, FpnWeights, FpnWidths,
};
use gsmvs::pipeline::with_threads;
use gsmvs::rng::SeededRng;
use gsmvs::tensor::Tensor;
use gsmvs::weights::WeightStore;
use proptest::prelude::*;

fn weights(seed: u64, widths: FpnWidths) -> FpnWeights {
    let mut store = WeightStore::new();
    FpnWeights::init(&mut store, &SeededRng::new(seed), widths);
    FpnWeights::load(&store, widths).unwrap()
}

fn tensor3(c: usize, h: usize, w: usize, bound: f32) -> impl Strategy<Value = Tensor> {
    proptest::collection::vec(-bound..bound, c * h * w).prop_map(move |v| Tensor::from_vec(&[c, h, w], v).unwrap())
}

#[test]
fn pool_random_2x4x5_matches_means() {
    let mut r = rng(1);
    let f = random_tensor(&mut r, &[2, 4, 5], 2.0);
    let (th, tw) = cga_pool(&f).unwrap();
    for c in 0..2 {
        for i in 0..4 {
            let m = (0..5).map(|j| f64::from(f.at(&[c, i, j]))).sum::<f64>() / 5.0;
            assert!((f64::from(th.at(&[c, i, 0])) - m).abs() < 1e-6);
        }
        for j in 0..5 {
            let m = (0..4).map(|i| f64::from(f.at(&[c, i, j]))).sum::<f64>() / 4.0;
            assert!((f64::from(tw.at(&[c, 0, j])) - m).abs() < 1e-6);
        }
    }
}

#[test]
fn attention_matches_concat_conv_sigmoid_split() {
    let mut r = rng(2);
    let (c, h, w) = (3, 5, 4);
    let f = random_tensor(&mut r, &[c, h, w], 2.0);
    let weight = random_tensor(&mut r, &[c, c, 3], 1.0);
    let bias = random_tensor(&mut r, &[c], 1.0);
    let (th, tw) = cga_pool(&f).unwrap();
    let maps = cga_attention(&th, &tw, &weight, &bias).unwrap();
    let mut cat = Vec::new();
    for ch in 0..c {
        cat.extend((0..h).map(|i| th.at(&[ch, i, 0])));
        cat.extend((0..w).map(|j| tw.at(&[ch, 0, j])));
    }
    let logits = conv1d_ref(&Tensor::from_vec(&[c, h + w], cat).unwrap(), &weight, Some(&bias), 1);
    for ch in 0..c {
        for i in 0..h {
            let e = sigmoid_ref(logits[ch * (h + w) + i]);
            assert!(rel_err(f64::from(maps.a_h.at(&[ch, i, 0])), e, 1e-12) < 1e-6);
        }
        for j in 0..w {
            let e = sigmoid_ref(logits[ch * (h + w) + h + j]);
            assert!(rel_err(f64::from(maps.a_w.at(&[ch, 0, j])), e, 1e-12) < 1e-6);
        }
    }
}

#[test]
fn modulate_matches_triple_loop() {
    let mut r = rng(3);
    let f = random_tensor(&mut r, &[2, 3, 4], 2.0);
    let maps = CgaAttentionMaps { a_h: random_tensor(&mut r, &[2, 3, 1], 1.0), a_w: random_tensor(&mut r, &[2, 1, 4], 1.0) };
    let out = cga_modulate(&f, &maps).unwrap();
    for c in 0..2 {
        for i in 0..3 {
            for j in 0..4 {
                let e = f64::from(maps.a_h.at(&[c, i, 0])) * f64::from(maps.a_w.at(&[c, 0, j])) * f64::from(f.at(&[c, i, j]));
                assert!((f64::from(out.at(&[c, i, j])) - e).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn fuse_levels_constant_and_zero_coarse() {
    let out = cga_fuse_levels(&Tensor::full(&[2, 3, 4], 1.25), &Tensor::full(&[2, 6, 8], -0.5)).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.75));
    let mut r = rng(4);
    let fine = random_tensor(&mut r, &[2, 6, 8], 1.0);
    assert_eq!(cga_fuse_levels(&Tensor::zeros(&[2, 3, 4]), &fine).unwrap(), fine);
}

#[test]
fn pyramid_shapes_and_zero_image() {
    let widths = FpnWidths::default();
    let w = weights(5, widths);
    let pyr = extract_pyramid(&Tensor::zeros(&[3, 16, 24]), &w).unwrap();
    assert_eq!(pyr.coarse().shape(), &[widths.coarse, 4, 6]);
    assert_eq!(pyr.fine().shape(), &[widths.fine, 8, 12]);
    assert!(pyr.levels.iter().all(|l| l.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn pyramid_is_deterministic_across_threads() {
    let w = weights(6, FpnWidths::default());
    let mut r = rng(6);
    let img = Tensor::from_fn(&[3, 32, 40], |_| rand::Rng::gen_range(&mut r, 0.0..1.0));
    let a = with_threads(1, || extract_pyramid(&img, &w).unwrap()).unwrap();
    let b = with_threads(3, || extract_pyramid(&img, &w).unwrap()).unwrap();
    let c = extract_pyramid(&img, &weights(6, FpnWidths::default())).unwrap();
    assert!(a == b && a == c);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn broadcast_means_recover_global_mean(f in (1usize..4, 1usize..9, 1usize..9).prop_flat_map(|(c, h, w)| tensor3(c, h, w, 5.0))) {
        let (th, tw) = cga_pool(&f).unwrap();
        let (c, h, w) = (f.dim(0), f.dim(1), f.dim(2));
        for ch in 0..c {
            let global = f.slab(ch).iter().map(|&v| f64::from(v)).sum::<f64>() / (h * w) as f64;
            let from_rows = th.slab(ch).iter().map(|&v| f64::from(v)).sum::<f64>() / h as f64;
            let from_cols = tw.slab(ch).iter().map(|&v| f64::from(v)).sum::<f64>() / w as f64;
            prop_assert!((from_rows - global).abs() <= 1e-6 * global.abs().max(1.0));
            prop_assert!((from_cols - global).abs() <= 1e-6 * global.abs().max(1.0));
        }
    }

    #[test]
    fn gates_in_open_unit_interval(
        (f, weight, bias) in (1usize..4, 1usize..7, 1usize..7).prop_flat_map(|(c, h, w)| (
            tensor3(c, h, w, 1e3),
            tensor3(c, c, 3, 1e3),
            proptest::collection::vec(-1e3f32..1e3, c).prop_map(move |v| Tensor::from_vec(&[c], v).unwrap()),
        ))
    ) {
        let (th, tw) = cga_pool(&f).unwrap();
        let maps = cga_attention(&th, &tw, &weight, &bias).unwrap();
        prop_assert!(maps.a_h.data().iter().chain(maps.a_w.data()).all(|&a| a > 0.0 && a < 1.0));
    }

    #[test]
    fn modulation_is_positively_homogeneous(
        f in (1usize..3, 1usize..6, 1usize..6).prop_flat_map(|(c, h, w)| tensor3(c, h, w, 3.0)),
        k in 0.0f32..8.0,
    ) {
        let (c, h, w) = (f.dim(0), f.dim(1), f.dim(2));
        let (th, tw) = cga_pool(&f).unwrap();
        let maps = cga_attention(&th, &tw, &Tensor::full(&[c, c, 3], 0.3), &Tensor::zeros(&[c])).unwrap();
        let base = cga_modulate(&f, &maps).unwrap();
        let scaled = cga_modulate(&f.map(|v| v * k), &maps).unwrap();
        for (s, b) in scaled.data().iter().zip(base.data()) {
            prop_assert!((f64::from(*s) - f64::from(k) * f64::from(*b)).abs() <= 1e-5 * (1.0 + f64::from(k * b.abs())));
        }
        prop_assert_eq!(base.shape(), &[c, h, w]);
    }
}
