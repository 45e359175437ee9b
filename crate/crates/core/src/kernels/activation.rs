use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn sigmoid(x: f32) -> f32 {
    let x = f64::from(x);
    let v = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    // Rounding to f32 would otherwise reach 0 or 1 for |x| beyond ~17.
    (v as f32).clamp(f32::from_bits(1), 1.0 - f32::EPSILON / 2.0)
}

pub fn softplus(x: f32) -> f32 {
    let x = f64::from(x);
    (x.max(0.0) + (-x.abs()).exp().ln_1p()) as f32
}

/// 2·sigmoid(x): range (0, 2), exactly 1 at x = 0.
pub fn scaled_sigmoid_2(x: f32) -> f32 {
    2.0 * sigmoid(x)
}

pub fn relu(x: f32) -> f32 {
    x.max(0.0)
}

/// Scales `v` in place to unit Euclidean norm. Errors on the zero vector.
pub fn l2_normalize(v: &mut [f32]) -> Result<()> {
    let norm = v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
    if !(norm > 1e-12) {
        return Err(Error::invalid("l2_normalize", "cannot normalize a zero vector"));
    }
    for x in v.iter_mut() {
        *x = (f64::from(*x) / norm) as f32;
    }
    Ok(())
}

/// Softmax along `axis`, computed per slice in `f64` with max subtraction.
pub fn softmax_axis(input: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= input.rank() {
        return Err(Error::invalid(
            "softmax_axis",
            format!("axis {axis} out of range for rank {}", input.rank()),
        ));
    }
    let shape = input.shape();
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let x = input.data();
    let mut out = vec![0.0f32; x.len()];
    let mut buf = vec![0.0f64; n];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * n + k) * inner + i;
            let max = (0..n).map(|k| f64::from(x[idx(k)])).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (k, b) in buf.iter_mut().enumerate() {
                *b = (f64::from(x[idx(k)]) - max).exp();
                sum += *b;
            }
            for (k, b) in buf.iter().enumerate() {
                out[idx(k)] = (b / sum) as f32;
            }
        }
    }
    Tensor::from_vec(shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms_at_zero() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((softplus(0.0) - std::f32::consts::LN_2).abs() < 1e-7);
        assert_eq!(scaled_sigmoid_2(0.0), 1.0);
    }

    #[test]
    fn closed_forms_at_unit_inputs() {
        for x in [-1.0f64, 0.0, 1.0] {
            let s = 1.0 / (1.0 + (-x).exp());
            assert!((f64::from(sigmoid(x as f32)) - s).abs() < 1e-6);
            assert!((f64::from(softplus(x as f32)) - (1.0 + x.exp()).ln()).abs() < 1e-6);
            assert!((f64::from(scaled_sigmoid_2(x as f32)) - 2.0 * s).abs() < 1e-6);
        }
    }

    #[test]
    fn extremes_stay_finite() {
        assert!(sigmoid(-1000.0) > 0.0 && sigmoid(-1000.0) < 1e-30);
        assert!(sigmoid(1000.0) < 1.0 && sigmoid(1000.0) > 1.0 - 1e-7);
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0);
    }

    #[test]
    fn normalize_3_4() {
        let mut v = [3.0, 4.0];
        l2_normalize(&mut v).unwrap();
        assert!((v[0] - 0.6).abs() < 1e-7 && (v[1] - 0.8).abs() < 1e-7);
        assert!(l2_normalize(&mut [0.0, 0.0]).is_err());
    }

    #[test]
    fn softmax_small_cases() {
        let t = Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap();
        assert_eq!(softmax_axis(&t, 0).unwrap().data(), &[0.5, 0.5]);
        let t = Tensor::from_vec(&[2], vec![0.0, 3f32.ln()]).unwrap();
        let p = softmax_axis(&t, 0).unwrap();
        assert!((p.data()[0] - 0.25).abs() < 1e-7 && (p.data()[1] - 0.75).abs() < 1e-7);
    }

    #[test]
    fn softmax_middle_axis_sums_to_one() {
        let t = Tensor::from_fn(&[2, 5, 3], |i| ((i * 7) % 11) as f32 - 4.0);
        let p = softmax_axis(&t, 1).unwrap();
        for a in 0..2 {
            for c in 0..3 {
                let s: f32 = (0..5).map(|k| p.at(&[a, k, c])).sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }
}
