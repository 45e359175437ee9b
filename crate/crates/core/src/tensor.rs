//! Dense row-major `f32` tensors.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        assert!(!shape.is_empty(), "tensor rank must be at least 1");
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::invalid("tensor", "rank must be at least 1"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("tensor", "data length", n, data.len()));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Builds a tensor by evaluating `f` at every flat index.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f32) -> Self {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(f).collect()).expect("shape checked")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.is_empty() {
            return Err(Error::shape(
                "reshape",
                "element count",
                self.data.len(),
                format!("{shape:?}"),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut off = 0;
        for (i, (&ix, &d)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < d, "index {ix} out of bounds for axis {i} of extent {d}");
            off = off * d + ix;
        }
        off
    }

    pub fn at(&self, index: &[usize]) -> f32 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f32) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        self.expect_shape("zip_map", other.shape())?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// Returns an error naming the first axis that disagrees with `expected`.
    pub fn expect_shape(&self, op: &'static str, expected: &[usize]) -> Result<()> {
        if self.shape.len() != expected.len() {
            return Err(Error::shape(
                op,
                "rank",
                expected.len(),
                self.shape.len(),
            ));
        }
        for (axis, (&got, &want)) in self.shape.iter().zip(expected).enumerate() {
            if got != want {
                return Err(Error::shape(op, format!("axis {axis}"), want, got));
            }
        }
        Ok(())
    }

    pub fn expect_rank(&self, op: &'static str, rank: usize) -> Result<()> {
        if self.shape.len() != rank {
            return Err(Error::shape(op, "rank", rank, self.shape.len()));
        }
        Ok(())
    }

    /// Contiguous slice of the leading axis, e.g. one channel of a C×H×W map.
    pub fn slab(&self, i: usize) -> &[f32] {
        let stride: usize = self.shape[1..].iter().product();
        &self.data[i * stride..(i + 1) * stride]
    }

    pub fn slab_mut(&mut self, i: usize) -> &mut [f32] {
        let stride: usize = self.shape[1..].iter().product();
        &mut self.data[i * stride..(i + 1) * stride]
    }

    /// Concatenates rank-2 tensors of equal row count along the column axis.
    pub fn concat_columns(parts: &[&Tensor]) -> Result<Tensor> {
        let rows = parts
            .first()
            .ok_or_else(|| Error::invalid("concat_columns", "no inputs"))?
            .dim(0);
        for p in parts {
            p.expect_rank("concat_columns", 2)?;
            if p.dim(0) != rows {
                return Err(Error::shape("concat_columns", "axis 0", rows, p.dim(0)));
            }
        }
        let width: usize = parts.iter().map(|p| p.dim(1)).sum();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for p in parts {
                let w = p.dim(1);
                data.extend_from_slice(&p.data[r * w..(r + 1) * w]);
            }
        }
        Tensor::from_vec(&[rows, width], data)
    }

    /// Columns `start..end` of a rank-2 tensor.
    pub fn columns(&self, start: usize, end: usize) -> Result<Tensor> {
        self.expect_rank("columns", 2)?;
        let (rows, w) = (self.dim(0), self.dim(1));
        if start >= end || end > w {
            return Err(Error::invalid(
                "columns",
                format!("range {start}..{end} outside width {w}"),
            ));
        }
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&self.data[r * w + start..r * w + end]);
        }
        Tensor::from_vec(&[rows, end - start], data)
    }

    /// Converts an HW×C pixel-major matrix into a C×H×W map.
    pub fn rows_to_map(&self, h: usize, w: usize) -> Result<Tensor> {
        self.expect_rank("rows_to_map", 2)?;
        if self.dim(0) != h * w {
            return Err(Error::shape("rows_to_map", "axis 0", h * w, self.dim(0)));
        }
        let c = self.dim(1);
        let mut out = vec![0.0; c * h * w];
        for p in 0..h * w {
            for ch in 0..c {
                out[ch * h * w + p] = self.data[p * c + ch];
            }
        }
        Tensor::from_vec(&[c, h, w], out)
    }

    /// Converts a C×H×W map into an HW×C pixel-major matrix.
    pub fn map_to_rows(&self) -> Result<Tensor> {
        self.expect_rank("map_to_rows", 3)?;
        let (c, h, w) = (self.dim(0), self.dim(1), self.dim(2));
        let mut out = vec![0.0; c * h * w];
        for ch in 0..c {
            for p in 0..h * w {
                out[p * c + ch] = self.data[ch * h * w + p];
            }
        }
        Tensor::from_vec(&[h * w, c], out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_lengths() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::from_vec(&[], vec![1.0]).is_err());
        assert_eq!(Tensor::from_vec(&[0, 3], vec![]).unwrap().len(), 0);
    }

    #[test]
    fn row_major_indexing() {
        let t = Tensor::from_fn(&[2, 3, 4], |i| i as f32);
        assert_eq!(t.at(&[1, 2, 3]), 23.0);
        assert_eq!(t.at(&[0, 1, 0]), 4.0);
    }

    #[test]
    fn rows_map_round_trip() {
        let t = Tensor::from_fn(&[3, 2, 5], |i| i as f32 * 0.5);
        let rows = t.map_to_rows().unwrap();
        assert_eq!(rows.shape(), &[10, 3]);
        assert_eq!(rows.at(&[7, 2]), t.at(&[2, 1, 2]));
        assert_eq!(rows.rows_to_map(2, 5).unwrap(), t);
    }

    #[test]
    fn concat_then_slice() {
        let a = Tensor::from_fn(&[4, 2], |i| i as f32);
        let b = Tensor::from_fn(&[4, 3], |i| -(i as f32));
        let c = Tensor::concat_columns(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[4, 5]);
        assert_eq!(c.columns(0, 2).unwrap(), a);
        assert_eq!(c.columns(2, 5).unwrap(), b);
    }

    #[test]
    fn expect_shape_names_axis() {
        let t = Tensor::zeros(&[2, 3]);
        let err = t.expect_shape("op", &[2, 4]).unwrap_err().to_string();
        assert!(err.contains("axis 1"), "{err}");
    }
}
