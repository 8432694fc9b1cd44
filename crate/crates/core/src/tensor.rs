//! Dense real tensors for feature maps and kernels.
//!
//! Layouts are row-major. A feature map `Tensor3` of dims `(W, H, C)` stores
//! element `(w, h, c)` at `(w * H + h) * C + c`, so channel fibers are
//! contiguous. A kernel `Tensor4` of dims `(W1, H1, C0, C2)` stores
//! `(w1, h1, c0, c2)` at `((w1 * H1 + h1) * C0 + c0) * C2 + c2`.

use std::ops::{Deref, DerefMut};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Feature map of dims `(width, height, channels)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    dims: (usize, usize, usize),
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(w: usize, h: usize, c: usize) -> Self {
        Self {
            dims: (w, h, c),
            data: vec![0.0; w * h * c],
        }
    }

    pub fn from_vec(dims: (usize, usize, usize), data: Vec<f64>) -> Result<Self> {
        let expected = dims.0 * dims.1 * dims.2;
        if data.len() != expected {
            return Err(Error::shape(format!(
                "Tensor3 {:?} needs {} elements, got {}",
                dims,
                expected,
                data.len()
            )));
        }
        check_finite(&data)?;
        Ok(Self { dims, data })
    }

    pub fn from_fn(
        dims: (usize, usize, usize),
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut t = Self::zeros(dims.0, dims.1, dims.2);
        for w in 0..dims.0 {
            for h in 0..dims.1 {
                for c in 0..dims.2 {
                    t.set(w, h, c, f(w, h, c));
                }
            }
        }
        t
    }

    /// Standard-normal entries.
    pub fn random<R: Rng + ?Sized>(dims: (usize, usize, usize), rng: &mut R) -> Self {
        let n = dims.0 * dims.1 * dims.2;
        Self {
            dims,
            data: (0..n).map(|_| rng.sample(StandardNormal)).collect(),
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn width(&self) -> usize {
        self.dims.0
    }

    pub fn height(&self) -> usize {
        self.dims.1
    }

    pub fn channels(&self) -> usize {
        self.dims.2
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn offset(&self, w: usize, h: usize, c: usize) -> usize {
        (w * self.dims.1 + h) * self.dims.2 + c
    }

    #[inline]
    pub fn get(&self, w: usize, h: usize, c: usize) -> f64 {
        self.data[self.offset(w, h, c)]
    }

    #[inline]
    pub fn set(&mut self, w: usize, h: usize, c: usize, v: f64) {
        let i = self.offset(w, h, c);
        self.data[i] = v;
    }

    /// All channels at spatial site `(w, h)`.
    #[inline]
    pub fn pixel(&self, w: usize, h: usize) -> &[f64] {
        let start = self.offset(w, h, 0);
        &self.data[start..start + self.dims.2]
    }

    #[inline]
    pub fn pixel_mut(&mut self, w: usize, h: usize) -> &mut [f64] {
        let start = self.offset(w, h, 0);
        let c = self.dims.2;
        &mut self.data[start..start + c]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise inner product with a tensor of identical dims.
    pub fn dot(&self, other: &Tensor3) -> Result<f64> {
        if self.dims != other.dims {
            return Err(Error::shape(format!(
                "dot of {:?} with {:?}",
                self.dims, other.dims
            )));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    /// Copy with channels zero-padded (or truncated) to `channels`.
    pub fn with_channels(&self, channels: usize) -> Tensor3 {
        let (w, h, c) = self.dims;
        let keep = c.min(channels);
        let mut out = Tensor3::zeros(w, h, channels);
        for i in 0..w {
            for j in 0..h {
                out.pixel_mut(i, j)[..keep].copy_from_slice(&self.pixel(i, j)[..keep]);
            }
        }
        out
    }
}

/// Kernel tensor of dims `(W1, H1, C0, C2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    dims: (usize, usize, usize, usize),
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(dims: (usize, usize, usize, usize)) -> Self {
        Self {
            dims,
            data: vec![0.0; dims.0 * dims.1 * dims.2 * dims.3],
        }
    }

    pub fn from_vec(dims: (usize, usize, usize, usize), data: Vec<f64>) -> Result<Self> {
        let expected = dims.0 * dims.1 * dims.2 * dims.3;
        if data.len() != expected {
            return Err(Error::shape(format!(
                "Tensor4 {:?} needs {} elements, got {}",
                dims,
                expected,
                data.len()
            )));
        }
        check_finite(&data)?;
        Ok(Self { dims, data })
    }

    pub fn from_fn(
        dims: (usize, usize, usize, usize),
        mut f: impl FnMut(usize, usize, usize, usize) -> f64,
    ) -> Self {
        let mut t = Self::zeros(dims);
        for a in 0..dims.0 {
            for b in 0..dims.1 {
                for c in 0..dims.2 {
                    for d in 0..dims.3 {
                        t.set(a, b, c, d, f(a, b, c, d));
                    }
                }
            }
        }
        t
    }

    pub fn random<R: Rng + ?Sized>(dims: (usize, usize, usize, usize), rng: &mut R) -> Self {
        let n = dims.0 * dims.1 * dims.2 * dims.3;
        Self {
            dims,
            data: (0..n).map(|_| rng.sample(StandardNormal)).collect(),
        }
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn offset(&self, w1: usize, h1: usize, c0: usize, c2: usize) -> usize {
        ((w1 * self.dims.1 + h1) * self.dims.2 + c0) * self.dims.3 + c2
    }

    #[inline]
    pub fn get(&self, w1: usize, h1: usize, c0: usize, c2: usize) -> f64 {
        self.data[self.offset(w1, h1, c0, c2)]
    }

    #[inline]
    pub fn set(&mut self, w1: usize, h1: usize, c0: usize, c2: usize, v: f64) {
        let i = self.offset(w1, h1, c0, c2);
        self.data[i] = v;
    }

    /// The `C0 x C2` channel slice at kernel tap `(w1, h1)`, row-major.
    #[inline]
    pub fn tap(&self, w1: usize, h1: usize) -> &[f64] {
        let start = self.offset(w1, h1, 0, 0);
        &self.data[start..start + self.dims.2 * self.dims.3]
    }

    /// The `n x n` sub-block with top-left corner `(c0, c2)` at tap `(w1, h1)`.
    /// Entries past the channel extent read as zero.
    pub fn block(&self, w1: usize, h1: usize, c0: usize, c2: usize, n: usize) -> Matrix {
        let mut m = Matrix::zeros(n, n);
        for a in 0..n {
            for b in 0..n {
                if c0 + a < self.dims.2 && c2 + b < self.dims.3 {
                    m.set(a, b, self.get(w1, h1, c0 + a, c2 + b));
                }
            }
        }
        m
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copy resized along both channel axes, zero-filling new entries.
    pub fn with_channels(&self, c0: usize, c2: usize) -> Tensor4 {
        let (w1, h1, old0, old2) = self.dims;
        let mut out = Tensor4::zeros((w1, h1, c0, c2));
        for a in 0..w1 {
            for b in 0..h1 {
                for i in 0..old0.min(c0) {
                    for j in 0..old2.min(c2) {
                        out.set(a, b, i, j, self.get(a, b, i, j));
                    }
                }
            }
        }
        out
    }
}

/// Where a fiber was cut from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FiberOrigin {
    pub spatial: (usize, usize),
    pub start: usize,
}

/// A 1-D run of values along one tensor axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Fiber {
    values: Vec<f64>,
    origin: Option<FiberOrigin>,
}

impl Fiber {
    pub fn new(values: Vec<f64>) -> Self {
        Self {
            values,
            origin: None,
        }
    }

    pub fn origin(&self) -> Option<FiberOrigin> {
        self.origin
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }
}

impl From<Vec<f64>> for Fiber {
    fn from(values: Vec<f64>) -> Self {
        Fiber::new(values)
    }
}

impl Deref for Fiber {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.values
    }
}

impl DerefMut for Fiber {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
}

/// Small dense real matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::shape("ragged matrix rows"));
        }
        Ok(Self {
            rows: r,
            cols: c,
            data: rows.concat(),
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.set(i, j, f(i, j));
            }
        }
        m
    }

    pub fn random<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        Self::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::shape(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(Matrix::from_fn(self.rows, other.cols, |i, j| {
            (0..self.cols).map(|k| self.get(i, k) * other.get(k, j)).sum()
        }))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        if (self.rows, self.cols) != (other.rows, other.cols) {
            return Err(Error::shape("matrix difference of unequal dims"));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        })
    }
}

/// `x(w, h, start..start + len)` as a contiguous fiber.
pub fn slice_channels(x: &Tensor3, spatial: (usize, usize), range: (usize, usize)) -> Result<Fiber> {
    let (w, h) = spatial;
    let (start, len) = range;
    let (width, height, channels) = x.dims();
    if w >= width || h >= height || start + len > channels {
        return Err(Error::Index(format!(
            "slice ({w}, {h}, {start}..{}) of tensor {:?}",
            start + len,
            x.dims()
        )));
    }
    let pixel = x.pixel(w, h);
    Ok(Fiber {
        values: pixel[start..start + len].to_vec(),
        origin: Some(FiberOrigin { spatial, start }),
    })
}

/// Inverse of [`slice_channels`]: writes `fiber` back at `spatial`, starting at
/// channel `start`.
pub fn scatter_channels(
    x: &mut Tensor3,
    spatial: (usize, usize),
    start: usize,
    fiber: &[f64],
) -> Result<()> {
    let (w, h) = spatial;
    let (width, height, channels) = x.dims();
    if w >= width || h >= height || start + fiber.len() > channels {
        return Err(Error::Index(format!(
            "scatter ({w}, {h}, {start}..{}) into tensor {:?}",
            start + fiber.len(),
            x.dims()
        )));
    }
    x.pixel_mut(w, h)[start..start + fiber.len()].copy_from_slice(fiber);
    Ok(())
}

/// Frobenius inner product `sum_ij a_ij * b_ij`.
pub fn frobenius_inner(a: &Matrix, b: &Matrix) -> Result<f64> {
    if (a.rows, a.cols) != (b.rows, b.cols) {
        return Err(Error::shape(format!(
            "frobenius inner of {}x{} with {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum())
}

fn check_finite(data: &[f64]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::Contract(format!("non-finite value at element {i}"))),
        None => Ok(()),
    }
}
