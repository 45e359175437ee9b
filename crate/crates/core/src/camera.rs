//! Pinhole cameras and the MVSNet-style camera text format.
//!
//! Pixel `(row i, col j)` has its center at continuous image coordinates
//! `(j + 0.5, i + 0.5)`; `K` maps camera-frame points to those coordinates.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct PinholeCamera {
    /// Intrinsics, pixels.
    pub k: Matrix3<f64>,
    /// World-to-camera rotation.
    pub r: Matrix3<f64>,
    /// World-to-camera translation.
    pub t: Vector3<f64>,
    pub width: usize,
    pub height: usize,
    pub depth_min: f64,
    pub depth_max: f64,
}

impl PinholeCamera {
    pub fn new(
        k: Matrix3<f64>,
        r: Matrix3<f64>,
        t: Vector3<f64>,
        width: usize,
        height: usize,
        depth_min: f64,
        depth_max: f64,
    ) -> Result<Self> {
        let cam = PinholeCamera {
            k,
            r,
            t,
            width,
            height,
            depth_min,
            depth_max,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera with focal length `f`, principal point at the image center and
    /// the given world-to-camera pose.
    pub fn simple(
        f: f64,
        width: usize,
        height: usize,
        r: Matrix3<f64>,
        t: Vector3<f64>,
        depth_range: (f64, f64),
    ) -> Result<Self> {
        let k = Matrix3::new(f, 0.0, width as f64 / 2.0, 0.0, f, height as f64 / 2.0, 0.0, 0.0, 1.0);
        Self::new(k, r, t, width, height, depth_range.0, depth_range.1)
    }

    pub fn validate(&self) -> Result<()> {
        const OP: &str = "camera";
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid(OP, "image extents must be positive"));
        }
        let k = &self.k;
        if k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 {
            return Err(Error::invalid(OP, "intrinsics must be upper-triangular"));
        }
        if !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0) || (k[(2, 2)] - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(OP, "intrinsics need positive focal lengths and K[2][2] = 1"));
        }
        let rtr = self.r.transpose() * self.r;
        if (rtr - Matrix3::identity()).amax() > 1e-5 || (self.r.determinant() - 1.0).abs() > 1e-5 {
            return Err(Error::invalid(OP, "rotation is not orthonormal with det 1"));
        }
        if !(self.depth_min > 0.0 && self.depth_min < self.depth_max) {
            return Err(Error::invalid(
                OP,
                format!("need 0 < depth_min < depth_max, got {} .. {}", self.depth_min, self.depth_max),
            ));
        }
        let all_finite = k.iter().chain(self.r.iter()).chain(self.t.iter()).all(|v| v.is_finite());
        if !all_finite || !self.depth_max.is_finite() {
            return Err(Error::NonFinite {
                op: OP,
                what: "camera parameters".into(),
            });
        }
        Ok(())
    }

    pub fn k_inv(&self) -> Matrix3<f64> {
        // Upper-triangular with positive diagonal, always invertible.
        self.k.try_inverse().expect("validated intrinsics are invertible")
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.r.transpose() * self.t)
    }

    pub fn focal(&self) -> (f64, f64) {
        (self.k[(0, 0)], self.k[(1, 1)])
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.r * p + self.t
    }

    /// Projects a world point to continuous image coordinates and camera depth.
    pub fn project(&self, p: &Vector3<f64>) -> (f64, f64, f64) {
        let q = self.k * self.world_to_camera(p);
        (q.x / q.z, q.y / q.z, q.z)
    }

    /// World point at camera depth `depth` along the ray through image
    /// coordinates `(x, y)`.
    pub fn unproject(&self, x: f64, y: f64, depth: f64) -> Vector3<f64> {
        let ray = self.k_inv() * Vector3::new(x, y, 1.0);
        self.r.transpose() * (ray * depth - self.t)
    }

    /// Same pose, intrinsics rescaled for an image `factor` times the size.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        let width = (self.width as f64 * factor).round() as usize;
        let height = (self.height as f64 * factor).round() as usize;
        let mut k = self.k;
        for c in 0..3 {
            k[(0, c)] *= factor;
            k[(1, c)] *= factor;
        }
        Self::new(k, self.r, self.t, width, height, self.depth_min, self.depth_max)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("extrinsic\n");
        for i in 0..3 {
            let _ = writeln!(s, "{} {} {} {}", self.r[(i, 0)], self.r[(i, 1)], self.r[(i, 2)], self.t[i]);
        }
        s.push_str("0 0 0 1\n\nintrinsic\n");
        for i in 0..3 {
            let _ = writeln!(s, "{} {} {}", self.k[(i, 0)], self.k[(i, 1)], self.k[(i, 2)]);
        }
        let _ = writeln!(s, "\n{} {}", self.depth_min, self.depth_max);
        s
    }

    /// Parses the camera text format; image extents come from the paired image.
    pub fn from_text(text: &str, width: usize, height: usize, path: &Path) -> Result<Self> {
        let tokens: Vec<&str> = text.split_whitespace().collect();
        let mut pos = 0;
        let keyword = |word: &str, pos: &mut usize| -> Result<()> {
            match tokens.get(*pos) {
                Some(&t) if t == word => {
                    *pos += 1;
                    Ok(())
                }
                other => Err(Error::format(path, word, format!("expected '{word}', found {other:?}"))),
            }
        };
        let floats = |field: &str, n: usize, pos: &mut usize| -> Result<Vec<f64>> {
            let mut out = Vec::with_capacity(n);
            for i in 0..n {
                let tok = tokens
                    .get(*pos)
                    .ok_or_else(|| Error::format(path, field, format!("missing value {i}")))?;
                let v = tok
                    .parse::<f64>()
                    .map_err(|_| Error::format(path, field, format!("cannot parse '{tok}'")))?;
                out.push(v);
                *pos += 1;
            }
            Ok(out)
        };
        keyword("extrinsic", &mut pos)?;
        let ext = floats("extrinsic", 16, &mut pos)?;
        if ext[12..] != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::format(path, "extrinsic", "last row must be 0 0 0 1"));
        }
        keyword("intrinsic", &mut pos)?;
        let intr = floats("intrinsic", 9, &mut pos)?;
        let range = floats("depth range", 2, &mut pos)?;
        if pos != tokens.len() {
            return Err(Error::format(path, "depth range", "unexpected trailing values"));
        }
        let r = Matrix3::new(ext[0], ext[1], ext[2], ext[4], ext[5], ext[6], ext[8], ext[9], ext[10]);
        let t = Vector3::new(ext[3], ext[7], ext[11]);
        let k = Matrix3::from_row_slice(&intr);
        Self::new(k, r, t, width, height, range[0], range[1])
            .map_err(|e| Error::format(path, "camera", e.to_string()))
    }

    pub fn load(path: &Path, width: usize, height: usize) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, width, height, path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// World-to-camera rotation and translation for a camera at `eye` looking at
/// `target`, with image +y pointing roughly along world `down`.
pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, down: Vector3<f64>) -> (Matrix3<f64>, Vector3<f64>) {
    let z = (target - eye).normalize();
    let x = down.cross(&z).normalize();
    let y = z.cross(&x);
    let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
    let t = -(r * eye);
    (r, t)
}
