//! Dense 4-D tensors in `(batch, channels, height, width)` row-major layout.

use std::fmt;
use std::ops::{Index, IndexMut};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Tensor dimensions `(n, c, h, w)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Dims { n, c, h, w }
    }

    /// Dims of a batch of `n` flat vectors of length `len`.
    pub const fn vector(n: usize, len: usize) -> Self {
        Dims::new(n, 1, 1, len)
    }

    pub const fn scalar() -> Self {
        Dims::new(1, 1, 1, 1)
    }

    pub const fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub const fn as_array(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    #[inline]
    pub const fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Dims,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(dims: Dims) -> Self {
        Tensor {
            dims,
            data: vec![0.0; dims.len()],
        }
    }

    pub fn filled(dims: Dims, value: f64) -> Self {
        Tensor {
            dims,
            data: vec![value; dims.len()],
        }
    }

    pub fn from_vec(dims: Dims, data: Vec<f64>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::shape(
                "Tensor::from_vec",
                format!("{} values for {dims}", dims.len()),
                data.len(),
            ));
        }
        Ok(Tensor { dims, data })
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            dims: Dims::scalar(),
            data: vec![value],
        }
    }

    /// A single flat vector, dims `1x1x1xlen`.
    pub fn vector(values: &[f64]) -> Self {
        Tensor {
            dims: Dims::vector(1, values.len()),
            data: values.to_vec(),
        }
    }

    /// A row-major matrix stored as dims `1x1xrowsxcols`.
    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Tensor::from_vec(Dims::new(1, 1, rows, cols), values)
    }

    pub fn randn(dims: Dims, std_dev: f64, rng: &mut impl Rng) -> Self {
        let data = (0..dims.len())
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std_dev
            })
            .collect();
        Tensor { dims, data }
    }

    pub fn uniform(dims: Dims, low: f64, high: f64, rng: &mut impl Rng) -> Self {
        let data = (0..dims.len()).map(|_| rng.random_range(low..high)).collect();
        Tensor { dims, data }
    }

    pub fn dims(&self) -> Dims {
        self.dims
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

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(self, dims: Dims) -> Result<Self> {
        if dims.len() != self.data.len() {
            return Err(Error::shape("Tensor::reshape", self.dims, dims));
        }
        Ok(Tensor {
            dims,
            data: self.data,
        })
    }

    /// The `(item, channel)` plane as a slice of `h*w` values.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let p = self.dims.plane();
        let start = (n * self.dims.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let p = self.dims.plane();
        let start = (n * self.dims.c + c) * p;
        &mut self.data[start..start + p]
    }

    /// Batch item `n` as a standalone `1xcxhxw` tensor.
    pub fn item(&self, n: usize) -> Tensor {
        let d = self.dims;
        let stride = d.c * d.plane();
        Tensor {
            dims: Dims::new(1, d.c, d.h, d.w),
            data: self.data[n * stride..(n + 1) * stride].to_vec(),
        }
    }

    /// Concatenates tensors with identical `c, h, w` along the batch axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::Contract("cannot stack zero tensors".into()))?;
        let d = first.dims;
        let mut data = Vec::with_capacity(items.iter().map(Tensor::len).sum());
        let mut n = 0;
        for t in items {
            let td = t.dims;
            if (td.c, td.h, td.w) != (d.c, d.h, d.w) {
                return Err(Error::shape("Tensor::stack", d, td));
            }
            n += td.n;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            dims: Dims::new(n, d.c, d.h, d.w),
            data,
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.expect_dims("Tensor::add_assign", other.dims)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn expect_dims(&self, op: &'static str, expected: Dims) -> Result<()> {
        if self.dims != expected {
            return Err(Error::shape(op, expected, self.dims));
        }
        Ok(())
    }
}

impl Index<[usize; 4]> for Tensor {
    type Output = f64;

    fn index(&self, [n, c, y, x]: [usize; 4]) -> &f64 {
        &self.data[self.dims.offset(n, c, y, x)]
    }
}

impl IndexMut<[usize; 4]> for Tensor {
    fn index_mut(&mut self, [n, c, y, x]: [usize; 4]) -> &mut f64 {
        let o = self.dims.offset(n, c, y, x);
        &mut self.data[o]
    }
}
