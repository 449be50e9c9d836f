//! Dense 4-D tensors in (batch, channel, height, width) order.

use std::fmt;

use crate::error::{Error, Result};
use crate::rng::Rng;

pub type Dims = [usize; 4];

/// Row-major 4-D array of `f64`. Every dimension is at least one.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    dims: Dims,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.dims)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(dims: Dims, data: Vec<f64>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::invalid(format!("zero-sized dimension in {dims:?}")));
        }
        let len: usize = dims.iter().product();
        if len != data.len() {
            return Err(Error::shape("Tensor::new", &dims, &[data.len()]));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Dims) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn full(dims: Dims, value: f64) -> Self {
        assert!(dims.iter().all(|&d| d > 0), "zero-sized dimension in {dims:?}");
        Self {
            dims,
            data: vec![value; dims.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full([1, 1, 1, 1], value)
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut([usize; 4]) -> f64) -> Self {
        let mut t = Self::zeros(dims);
        let mut i = 0;
        for b in 0..dims[0] {
            for c in 0..dims[1] {
                for y in 0..dims[2] {
                    for x in 0..dims[3] {
                        t.data[i] = f([b, c, y, x]);
                        i += 1;
                    }
                }
            }
        }
        t
    }

    /// I.i.d. normal entries with the given standard deviation.
    pub fn randn(dims: Dims, std: f64, rng: &mut Rng) -> Self {
        let mut t = Self::zeros(dims);
        t.data.iter_mut().for_each(|v| *v = std * rng.normal());
        t
    }

    pub fn rand_uniform(dims: Dims, lo: f64, hi: f64, rng: &mut Rng) -> Self {
        let mut t = Self::zeros(dims);
        t.data.iter_mut().for_each(|v| *v = rng.uniform_in(lo, hi));
        t
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    pub fn channels(&self) -> usize {
        self.dims[1]
    }

    pub fn height(&self) -> usize {
        self.dims[2]
    }

    pub fn width(&self) -> usize {
        self.dims[3]
    }

    pub fn plane_len(&self) -> usize {
        self.dims[2] * self.dims[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        ((b * self.dims[1] + c) * self.dims[2] + y) * self.dims[3] + x
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(b, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, y: usize, x: usize, v: f64) {
        let i = self.index(b, c, y, x);
        self.data[i] = v;
    }

    /// Value at signed spatial coordinates, zero outside the map.
    #[inline]
    pub fn at_padded(&self, b: usize, c: usize, y: isize, x: isize) -> f64 {
        if y < 0 || x < 0 || y >= self.dims[2] as isize || x >= self.dims[3] as isize {
            0.0
        } else {
            self.at(b, c, y as usize, x as usize)
        }
    }

    /// The H×W plane of one (batch, channel) pair.
    pub fn plane(&self, b: usize, c: usize) -> &[f64] {
        let n = self.plane_len();
        let start = (b * self.dims[1] + c) * n;
        &self.data[start..start + n]
    }

    pub fn plane_mut(&mut self, b: usize, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        let start = (b * self.dims[1] + c) * n;
        &mut self.data[start..start + n]
    }

    /// The (C, H, W) block of one batch element.
    pub fn item(&self, b: usize) -> &[f64] {
        let n = self.dims[1] * self.plane_len();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn reshape(self, dims: Dims) -> Result<Self> {
        Self::new(dims, self.data)
    }

    pub fn same_dims(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::shape(op, &self.dims, &other.dims));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_dims(other, "zip_map")?;
        Ok(Tensor {
            dims: self.dims,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.same_dims(other, "add_assign")?;
        self.data.iter_mut().zip(&other.data).for_each(|(a, &b)| *a += b);
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.len() as f64
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.same_dims(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.same_dims(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Channels `[start, end)` as a new tensor.
    pub fn slice_channels(&self, start: usize, end: usize) -> Result<Tensor> {
        if start >= end || end > self.dims[1] {
            return Err(Error::invalid(format!(
                "channel range {start}..{end} out of 0..{}",
                self.dims[1]
            )));
        }
        let [nb, _, h, w] = self.dims;
        let mut out = Tensor::zeros([nb, end - start, h, w]);
        let block = (end - start) * h * w;
        for b in 0..nb {
            let src = self.index(b, start, 0, 0);
            out.data[b * block..(b + 1) * block].copy_from_slice(&self.data[src..src + block]);
        }
        Ok(out)
    }

    /// Batch elements `[start, end)` as a new tensor.
    pub fn slice_batch(&self, start: usize, end: usize) -> Result<Tensor> {
        if start >= end || end > self.dims[0] {
            return Err(Error::invalid(format!(
                "batch range {start}..{end} out of 0..{}",
                self.dims[0]
            )));
        }
        let block = self.dims[1] * self.plane_len();
        let mut dims = self.dims;
        dims[0] = end - start;
        Tensor::new(dims, self.data[start * block..end * block].to_vec())
    }

    /// Stack tensors with identical (C, H, W) along the batch axis.
    pub fn stack_batch(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("stack_batch of an empty list"))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        let mut nb = 0;
        for t in items {
            if t.dims[1..] != first.dims[1..] {
                return Err(Error::shape("stack_batch", &first.dims, &t.dims));
            }
            nb += t.dims[0];
            data.extend_from_slice(&t.data);
        }
        let mut dims = first.dims;
        dims[0] = nb;
        Tensor::new(dims, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_length_and_zero_dims() {
        assert!(Tensor::new([1, 1, 2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new([1, 0, 2, 2], vec![]).is_err());
        assert!(Tensor::new([1, 1, 2, 2], vec![0.0; 4]).is_ok());
    }

    #[test]
    fn row_major_indexing() {
        let t = Tensor::from_fn([2, 3, 4, 5], |[b, c, y, x]| (b * 1000 + c * 100 + y * 10 + x) as f64);
        assert_eq!(t.at(1, 2, 3, 4), 1234.0);
        assert_eq!(t.data()[t.index(1, 2, 3, 4)], 1234.0);
        assert_eq!(t.plane(1, 2)[3 * 5 + 4], 1234.0);
        assert_eq!(t.at_padded(0, 0, -1, 0), 0.0);
        assert_eq!(t.at_padded(0, 0, 4, 0), 0.0);
    }

    #[test]
    fn slicing_and_stacking() {
        let t = Tensor::from_fn([2, 3, 2, 2], |[b, c, y, x]| (b * 12 + c * 4 + y * 2 + x) as f64);
        let s = t.slice_channels(1, 3).unwrap();
        assert_eq!(s.dims(), [2, 2, 2, 2]);
        assert_eq!(s.at(1, 0, 1, 1), t.at(1, 1, 1, 1));
        let parts = [t.slice_batch(0, 1).unwrap(), t.slice_batch(1, 2).unwrap()];
        assert_eq!(Tensor::stack_batch(&parts).unwrap(), t);
    }
}
