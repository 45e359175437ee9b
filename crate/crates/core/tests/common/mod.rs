//! Scalar brute-force references shared by the integration tests. Everything
//! here is written from the defining formulas with plain loops and `f64`,
//! independent of the library kernels it is compared against.
#![allow(dead_code)]

use gsmvs::camera::{look_at, PinholeCamera};
use gsmvs::tensor::Tensor;
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(r: &mut ChaCha8Rng, shape: &[usize], bound: f32) -> Tensor {
    Tensor::from_fn(shape, |_| r.gen_range(-bound..bound))
}

/// |a − b| / max(|b|, floor).
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / b.abs().max(floor)
}

pub fn max_rel(actual: &[f32], oracle: &[f64], floor: f64) -> f64 {
    assert_eq!(actual.len(), oracle.len(), "length mismatch");
    actual.iter().zip(oracle).map(|(&a, &b)| rel_err(f64::from(a), b, floor)).fold(0.0, f64::max)
}

pub fn max_abs(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (f64::from(*x) - f64::from(*y)).abs()).fold(0.0, f64::max)
}

pub fn conv1d_ref(x: &Tensor, w: &Tensor, b: Option<&Tensor>, pad: usize) -> Vec<f64> {
    let (ci, l) = (x.dim(0), x.dim(1));
    let (co, k) = (w.dim(0), w.dim(2));
    let lo = l + 2 * pad - k + 1;
    let mut out = vec![0.0; co * lo];
    for o in 0..co {
        for t in 0..lo {
            let mut acc = b.map_or(0.0, |b| f64::from(b.data()[o]));
            for c in 0..ci {
                for kk in 0..k {
                    let s = t as isize + kk as isize - pad as isize;
                    if s >= 0 && (s as usize) < l {
                        acc += f64::from(w.at(&[o, c, kk])) * f64::from(x.at(&[c, s as usize]));
                    }
                }
            }
            out[o * lo + t] = acc;
        }
    }
    out
}

pub fn conv2d_ref(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Vec<f64> {
    let (ci, h, wd) = (x.dim(0), x.dim(1), x.dim(2));
    let (co, k) = (w.dim(0), w.dim(2));
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; co * ho * wo];
    for o in 0..co {
        for i in 0..ho {
            for j in 0..wo {
                let mut acc = b.map_or(0.0, |b| f64::from(b.data()[o]));
                for c in 0..ci {
                    for ki in 0..k {
                        for kj in 0..k {
                            let y = (i * stride + ki) as isize - pad as isize;
                            let xx = (j * stride + kj) as isize - pad as isize;
                            if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < wd {
                                acc += f64::from(w.at(&[o, c, ki, kj])) * f64::from(x.at(&[c, y as usize, xx as usize]));
                            }
                        }
                    }
                }
                out[(o * ho + i) * wo + j] = acc;
            }
        }
    }
    out
}

pub fn conv3d_ref(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Vec<f64> {
    let (ci, d, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (co, k) = (w.dim(0), w.dim(2));
    let ext = |n: usize| (n + 2 * pad - k) / stride + 1;
    let (dd, ho, wo) = (ext(d), ext(h), ext(wd));
    let mut out = vec![0.0; co * dd * ho * wo];
    let inside = |v: isize, n: usize| v >= 0 && (v as usize) < n;
    for o in 0..co {
        for z in 0..dd {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = b.map_or(0.0, |b| f64::from(b.data()[o]));
                    for c in 0..ci {
                        for kz in 0..k {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let zz = (z * stride + kz) as isize - pad as isize;
                                    let y = (i * stride + ki) as isize - pad as isize;
                                    let xx = (j * stride + kj) as isize - pad as isize;
                                    if inside(zz, d) && inside(y, h) && inside(xx, wd) {
                                        acc += f64::from(w.at(&[o, c, kz, ki, kj]))
                                            * f64::from(x.at(&[c, zz as usize, y as usize, xx as usize]));
                                    }
                                }
                            }
                        }
                    }
                    out[((o * dd + z) * ho + i) * wo + j] = acc;
                }
            }
        }
    }
    out
}

/// Bilinear value of channel `c` at index-space `(x, y)`, or `None` outside
/// `[0, W−1] × [0, H−1]`.
pub fn bilinear_ref(f: &Tensor, c: usize, x: f64, y: f64) -> Option<f64> {
    let (h, w) = (f.dim(1), f.dim(2));
    if !(0.0..=(w - 1) as f64).contains(&x) || !(0.0..=(h - 1) as f64).contains(&y) {
        return None;
    }
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let v = |i: usize, j: usize| f64::from(f.at(&[c, i, j]));
    Some((1.0 - fy) * ((1.0 - fx) * v(y0, x0) + fx * v(y0, x1)) + fy * ((1.0 - fx) * v(y1, x0) + fx * v(y1, x1)))
}

/// Half-pixel-center ×2 upsampling of one channel, computed per output pixel
/// by mapping its center back into the input and clamping at the borders.
pub fn upsample_ref(f: &Tensor) -> Vec<f64> {
    let (c, h, w) = (f.dim(0), f.dim(1), f.dim(2));
    let src = |o: usize, n: usize| ((o as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (n - 1) as f64);
    let mut out = Vec::with_capacity(4 * c * h * w);
    for ch in 0..c {
        for i in 0..2 * h {
            for j in 0..2 * w {
                out.push(bilinear_ref(f, ch, src(j, w), src(i, h)).expect("clamped inside"));
            }
        }
    }
    out
}

pub fn softmax_ref(x: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = x.iter().map(|v| v.exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn sigmoid_ref(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Windowed SSIM for one channel from explicit weighted sums over each valid
/// `size`×`size` window of a Gaussian kernel with the given sigma.
pub fn ssim_channel_ref(a: &[f64], b: &[f64], h: usize, w: usize, size: usize, sigma: f64) -> f64 {
    let half = (size / 2) as f64;
    let raw: Vec<f64> = (0..size).map(|k| (-((k as f64 - half).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = raw.iter().sum();
    let g: Vec<f64> = raw.iter().map(|v| v / norm).collect();
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    let mut count = 0;
    for i in 0..=h - size {
        for j in 0..=w - size {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for u in 0..size {
                for v in 0..size {
                    let wt = g[u] * g[v];
                    let (x, y) = (a[(i + u) * w + j + v], b[(i + u) * w + j + v]);
                    ma += wt * x;
                    mb += wt * y;
                    saa += wt * x * x;
                    sbb += wt * y * y;
                    sab += wt * x * y;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    total / count as f64
}

pub fn camera_looking_at(eye: Vector3<f64>, aim: Vector3<f64>, f: f64, w: usize, h: usize) -> PinholeCamera {
    let (r, t) = look_at(eye, aim, Vector3::y());
    PinholeCamera::simple(f, w, h, r, t, (2.0, 9.0)).expect("valid camera")
}

/// Random camera near the origin looking roughly down +z.
pub fn random_camera(r: &mut ChaCha8Rng, w: usize, h: usize) -> PinholeCamera {
    let eye = Vector3::new(r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..0.5));
    let aim = Vector3::new(r.gen_range(-0.5..0.5), r.gen_range(-0.5..0.5), 5.0);
    let f = r.gen_range(0.6..1.4) * w as f64;
    let (rot, t) = look_at(eye, aim, Vector3::y());
    let k = Matrix3::new(f, r.gen_range(-0.5..0.5), w as f64 / 2.0 + r.gen_range(-2.0..2.0), 0.0, f * r.gen_range(0.9..1.1), h as f64 / 2.0 + r.gen_range(-2.0..2.0), 0.0, 0.0, 1.0);
    PinholeCamera::new(k, rot, t, w, h, 2.0, 9.0).expect("valid camera")
}

/// Bitwise byte-for-byte file comparison.
pub fn same_bytes(a: &std::path::Path, b: &std::path::Path) -> bool {
    std::fs::read(a).expect("readable") == std::fs::read(b).expect("readable")
}
