mod common;

use common::*;
use gsmvs::kernels::{
    bilinear_sample, bilinear_upsample_x2, conv1d, conv2d, conv3d, mlp_forward, softmax_axis, Mlp, MlpSpec, OutputActivation,
};
use gsmvs::pipeline::with_threads;
use gsmvs::rng::SeededRng;
use gsmvs::tensor::Tensor;
use gsmvs::weights::WeightStore;
use proptest::prelude::*;
use rand::Rng;

fn tensor_strategy(shape: Vec<usize>, bound: f32) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    proptest::collection::vec(-bound..bound, n).prop_map(move |v| Tensor::from_vec(&shape, v).unwrap())
}

#[test]
fn conv2d_random_2x5x5_matches_loops() {
    let mut r = rng(1);
    let x = random_tensor(&mut r, &[2, 5, 5], 1.0);
    let w = random_tensor(&mut r, &[3, 2, 3, 3], 1.0);
    let b = random_tensor(&mut r, &[3], 1.0);
    let y = conv2d(&x, &w, Some(&b), 1, 1).unwrap();
    assert!(max_rel(y.data(), &conv2d_ref(&x, &w, Some(&b), 1, 1), 1e-12) < 1e-6);
}

#[test]
fn conv3d_random_2x4x4x4_matches_loops() {
    let mut r = rng(2);
    let x = random_tensor(&mut r, &[2, 4, 4, 4], 1.0);
    let w = random_tensor(&mut r, &[2, 2, 3, 3, 3], 1.0);
    for stride in [1, 2] {
        let y = conv3d(&x, &w, None, stride, 1).unwrap();
        assert!(max_rel(y.data(), &conv3d_ref(&x, &w, None, stride, 1), 1e-12) < 1e-6);
    }
}

#[test]
fn conv1d_random_matches_loops() {
    let mut r = rng(3);
    let x = random_tensor(&mut r, &[4, 9], 1.0);
    let w = random_tensor(&mut r, &[4, 4, 3], 1.0);
    let y = conv1d(&x, &w, None, 1).unwrap();
    assert!(max_rel(y.data(), &conv1d_ref(&x, &w, None, 1), 1e-12) < 1e-6);
}

#[test]
fn upsample_random_1x3x3_matches_formula() {
    let mut r = rng(4);
    let f = random_tensor(&mut r, &[1, 3, 3], 1.0);
    let up = bilinear_upsample_x2(&f).unwrap();
    assert_eq!(up.shape(), &[1, 6, 6]);
    assert!(max_rel(up.data(), &upsample_ref(&f), 1e-12) < 1e-6);
}

#[test]
fn mlp_two_layers_matches_matrix_math() {
    let spec = MlpSpec::new(&[5, 7, 3], OutputActivation::Sigmoid);
    let mut store = WeightStore::new();
    Mlp::init(&mut store, &SeededRng::new(8), "m", &spec);
    let mlp = Mlp::load(&store, "m", spec).unwrap();
    let mut r = rng(5);
    let x = random_tensor(&mut r, &[6, 5], 2.0);
    let y = mlp_forward(&mlp, &x).unwrap();
    let w0 = store.get_any("m.layer0.weight").unwrap();
    let b0 = store.get_any("m.layer0.bias").unwrap();
    let w1 = store.get_any("m.layer1.weight").unwrap();
    let b1 = store.get_any("m.layer1.bias").unwrap();
    for row in 0..6 {
        let hidden: Vec<f64> = (0..7)
            .map(|o| {
                let s = f64::from(b0.data()[o]) + (0..5).map(|i| f64::from(w0.at(&[o, i])) * f64::from(x.at(&[row, i]))).sum::<f64>();
                s.max(0.0)
            })
            .collect();
        for o in 0..3 {
            let s = f64::from(b1.data()[o]) + (0..7).map(|i| f64::from(w1.at(&[o, i])) * hidden[i]).sum::<f64>();
            assert!(rel_err(f64::from(y.at(&[row, o])), sigmoid_ref(s), 1e-12) < 1e-5);
        }
    }
}

#[test]
fn kernels_are_thread_count_independent() {
    let mut r = rng(6);
    let x = random_tensor(&mut r, &[3, 6, 7, 7], 1.0);
    let w = random_tensor(&mut r, &[4, 3, 3, 3, 3], 1.0);
    let x2 = random_tensor(&mut r, &[3, 20, 20], 1.0);
    let w2 = random_tensor(&mut r, &[5, 3, 3, 3], 1.0);
    let run = || (conv3d(&x, &w, None, 1, 1).unwrap(), conv2d(&x2, &w2, None, 2, 1).unwrap(), softmax_axis(&x, 1).unwrap());
    let a = with_threads(1, run).unwrap();
    let b = with_threads(4, run).unwrap();
    assert!(a == b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv2d_matches_oracle(
        (x, w, stride, pad) in (1usize..4, 1usize..4, prop_oneof![Just(1usize), Just(3), Just(5)])
            .prop_flat_map(|(ci, co, k)| (
                (k..9usize, k..9usize).prop_flat_map(move |(h, w)| tensor_strategy(vec![ci, h, w], 2.0)),
                tensor_strategy(vec![co, ci, k, k], 1.0),
                1usize..3,
                0..=k / 2,
            ))
    ) {
        let y = conv2d(&x, &w, None, stride, pad).unwrap();
        prop_assert!(max_rel(y.data(), &conv2d_ref(&x, &w, None, stride, pad), 1e-12) < 1e-6);
    }

    #[test]
    fn conv3d_matches_oracle(
        (x, w) in (1usize..3, 1usize..3).prop_flat_map(|(ci, co)| (
            (1usize..8, 1usize..8, 1usize..8).prop_flat_map(move |(d, h, w)| tensor_strategy(vec![ci, d, h, w], 2.0)),
            tensor_strategy(vec![co, ci, 3, 3, 3], 1.0),
        ))
    ) {
        let y = conv3d(&x, &w, None, 1, 1).unwrap();
        prop_assert!(max_rel(y.data(), &conv3d_ref(&x, &w, None, 1, 1), 1e-12) < 1e-6);
    }

    #[test]
    fn softmax_slices_sum_to_one_and_ignore_shifts(
        (x, axis, shift) in (1usize..4, 1usize..6, 1usize..5)
            .prop_flat_map(|(a, b, c)| (tensor_strategy(vec![a, b, c], 40.0), 0usize..3, -50.0f32..50.0))
    ) {
        let y = softmax_axis(&x, axis).unwrap();
        let shape = x.shape().to_vec();
        let stride: usize = shape[axis + 1..].iter().product();
        for start in (0..x.len()).filter(|s| (s / stride) % shape[axis] == 0) {
            let s: f64 = (0..shape[axis]).map(|k| f64::from(y.data()[start + k * stride])).sum();
            prop_assert!((s - 1.0).abs() <= 1e-6);
        }
        let shifted = softmax_axis(&x.map(|v| v + shift), axis).unwrap();
        prop_assert!(max_abs(y.data(), shifted.data()) <= 1e-6);
    }

    #[test]
    fn bilinear_exact_on_lattice_and_linear_between(
        (f, i, j) in (2usize..7, 2usize..7).prop_flat_map(|(h, w)| (tensor_strategy(vec![1, h, w], 3.0), 0..h - 1, 0..w - 1))
    ) {
        let coords = Tensor::from_vec(
            &[2, 1, 3],
            vec![j as f32, j as f32 + 0.5, j as f32, i as f32, i as f32, i as f32 + 0.5],
        ).unwrap();
        let (s, mask) = bilinear_sample(&f, &coords).unwrap();
        prop_assert!(mask.iter().all(|&m| m));
        prop_assert_eq!(s.data()[0], f.at(&[0, i, j]));
        let mid_x = 0.5 * (f64::from(f.at(&[0, i, j])) + f64::from(f.at(&[0, i, j + 1])));
        let mid_y = 0.5 * (f64::from(f.at(&[0, i, j])) + f64::from(f.at(&[0, i + 1, j])));
        prop_assert!((f64::from(s.data()[1]) - mid_x).abs() <= 1e-6);
        prop_assert!((f64::from(s.data()[2]) - mid_y).abs() <= 1e-6);
    }
}

#[test]
fn bilinear_random_coords_match_formula() {
    let mut r = rng(7);
    let f = random_tensor(&mut r, &[3, 5, 6], 1.0);
    let n = 40;
    let mut coords = Vec::new();
    for _ in 0..n {
        coords.push(r.gen_range(-0.9..5.9f32));
    }
    for _ in 0..n {
        coords.push(r.gen_range(-0.9..4.9f32));
    }
    let (s, mask) = bilinear_sample(&f, &Tensor::from_vec(&[2, 1, n], coords.clone()).unwrap()).unwrap();
    for p in 0..n {
        for c in 0..3 {
            let oracle = bilinear_ref(&f, c, f64::from(coords[p]), f64::from(coords[n + p]));
            assert_eq!(oracle.is_some(), mask[p]);
            assert!((f64::from(s.data()[c * n + p]) - oracle.unwrap_or(0.0)).abs() < 1e-6);
        }
    }
}
