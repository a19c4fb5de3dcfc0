//! Complex multidimensional arrays and centered unitary 2D Fourier transforms.
//!
//! Arrays are stored row-major. The last two axes are always spatial
//! (row, col); any leading axes (usually a single coil axis) index
//! independent 2D slices.

use std::cell::RefCell;
use std::ops::{Add, AddAssign, Mul, Sub, SubAssign};
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(len)
        } else {
            p.plan_fft_forward(len)
        }
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComplexArray {
    shape: Vec<usize>,
    data: Vec<Complex64>,
}

impl ComplexArray {
    pub fn new(shape: Vec<usize>, data: Vec<Complex64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.is_empty() {
            return Err(Error::InvalidInput("array rank must be at least 1".into()));
        }
        if data.len() != expected {
            return Err(Error::InvalidInput(format!(
                "data length {} does not match shape {:?} (expected {})",
                data.len(),
                shape,
                expected
            )));
        }
        Ok(ComplexArray { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        ComplexArray {
            shape: shape.to_vec(),
            data: vec![Complex64::new(0.0, 0.0); n],
        }
    }

    pub fn from_real(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(
            shape.to_vec(),
            values.iter().map(|&v| Complex64::new(v, 0.0)).collect(),
        )
    }

    /// Builds a 2D array from a closure over (row, col).
    pub fn from_fn2(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Complex64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        ComplexArray {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Complex64> {
        self.data
    }

    /// (rows, cols) of the trailing spatial axes.
    pub fn spatial(&self) -> (usize, usize) {
        match self.shape.len() {
            0 => (0, 0),
            1 => (1, self.shape[0]),
            n => (self.shape[n - 2], self.shape[n - 1]),
        }
    }

    /// Number of independent 2D slices (product of the leading axes).
    pub fn n_slices(&self) -> usize {
        let (r, c) = self.spatial();
        if r * c == 0 {
            0
        } else {
            self.data.len() / (r * c)
        }
    }

    pub fn slice(&self, index: usize) -> &[Complex64] {
        let (r, c) = self.spatial();
        &self.data[index * r * c..(index + 1) * r * c]
    }

    pub fn slice_mut(&mut self, index: usize) -> &mut [Complex64] {
        let (r, c) = self.spatial();
        &mut self.data[index * r * c..(index + 1) * r * c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(&shape, &self.shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.re.is_finite() && v.im.is_finite())
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("{what} contains non-finite values")))
        }
    }

    pub fn check_same_shape(&self, other: &ComplexArray) -> Result<()> {
        if self.shape != other.shape {
            Err(Error::shape(&self.shape, &other.shape))
        } else {
            Ok(())
        }
    }

    pub fn norm_sqr(&self) -> f64 {
        self.data.iter().map(|v| v.norm_sqr()).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    /// Sum of conj(self_i) * other_i.
    pub fn inner(&self, other: &ComplexArray) -> Result<Complex64> {
        self.check_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.conj() * b)
            .sum())
    }

    pub fn scale(&self, a: f64) -> ComplexArray {
        self.map(|v| v * a)
    }

    pub fn scale_complex(&self, a: Complex64) -> ComplexArray {
        self.map(|v| v * a)
    }

    pub fn map(&self, f: impl Fn(Complex64) -> Complex64) -> ComplexArray {
        ComplexArray {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// self += a * x
    pub fn axpy(&mut self, a: f64, x: &ComplexArray) {
        assert_eq!(self.shape, x.shape, "axpy shape mismatch");
        for (s, v) in self.data.iter_mut().zip(&x.data) {
            *s += v * a;
        }
    }

    pub fn abs(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.norm()).collect()
    }

    pub fn max_abs_diff(&self, other: &ComplexArray) -> f64 {
        assert_eq!(self.shape, other.shape, "shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    /// Rounds every component to single precision, i.e. the exact values a
    /// CXT1 write/read cycle reproduces.
    pub fn quantize_f32(&self) -> ComplexArray {
        self.map(|v| Complex64::new(v.re as f32 as f64, v.im as f32 as f64))
    }

    /// Centered unitary 2D DFT applied per leading index.
    pub fn fft2c(&self) -> Result<ComplexArray> {
        self.check_transform_input()?;
        Ok(transform2c(self, false))
    }

    /// Inverse of [`ComplexArray::fft2c`].
    pub fn ifft2c(&self) -> Result<ComplexArray> {
        self.check_transform_input()?;
        Ok(transform2c(self, true))
    }

    fn check_transform_input(&self) -> Result<()> {
        let (r, c) = self.spatial();
        if self.rank() < 2 || r < 2 || c < 2 {
            return Err(Error::InvalidInput(format!(
                "centered FFT needs two spatial axes of extent >= 2, got {:?}",
                self.shape
            )));
        }
        self.check_finite("FFT input")
    }
}

impl Add<&ComplexArray> for &ComplexArray {
    type Output = ComplexArray;
    fn add(self, rhs: &ComplexArray) -> ComplexArray {
        assert_eq!(self.shape, rhs.shape, "add shape mismatch");
        ComplexArray {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a + b).collect(),
        }
    }
}

impl Sub<&ComplexArray> for &ComplexArray {
    type Output = ComplexArray;
    fn sub(self, rhs: &ComplexArray) -> ComplexArray {
        assert_eq!(self.shape, rhs.shape, "sub shape mismatch");
        ComplexArray {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a - b).collect(),
        }
    }
}

impl AddAssign<&ComplexArray> for ComplexArray {
    fn add_assign(&mut self, rhs: &ComplexArray) {
        assert_eq!(self.shape, rhs.shape, "add shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += b;
        }
    }
}

impl SubAssign<&ComplexArray> for ComplexArray {
    fn sub_assign(&mut self, rhs: &ComplexArray) {
        assert_eq!(self.shape, rhs.shape, "sub shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a -= b;
        }
    }
}

impl Mul<f64> for &ComplexArray {
    type Output = ComplexArray;
    fn mul(self, rhs: f64) -> ComplexArray {
        self.scale(rhs)
    }
}

fn transform2c(input: &ComplexArray, inverse: bool) -> ComplexArray {
    let (rows, cols) = input.spatial();
    let row_fft = plan(cols, inverse);
    let col_fft = plan(rows, inverse);
    let scratch_len = row_fft
        .get_inplace_scratch_len()
        .max(col_fft.get_inplace_scratch_len());
    let mut scratch = vec![Complex64::new(0.0, 0.0); scratch_len];
    let mut buf = vec![Complex64::new(0.0, 0.0); rows * cols];
    let mut column = vec![Complex64::new(0.0, 0.0); rows];
    let scale = 1.0 / ((rows * cols) as f64).sqrt();
    let (hr, hc) = (rows / 2, cols / 2);

    let mut out = ComplexArray::zeros(input.shape());
    for s in 0..input.n_slices() {
        let src = input.slice(s);
        // ifftshift: centre index floor(N/2) moves to 0
        for r in 0..rows {
            let sr = (r + hr) % rows;
            for c in 0..cols {
                buf[r * cols + c] = src[sr * cols + (c + hc) % cols];
            }
        }
        for row in buf.chunks_exact_mut(cols) {
            row_fft.process_with_scratch(row, &mut scratch);
        }
        for c in 0..cols {
            for r in 0..rows {
                column[r] = buf[r * cols + c];
            }
            col_fft.process_with_scratch(&mut column, &mut scratch);
            for r in 0..rows {
                buf[r * cols + c] = column[r];
            }
        }
        // fftshift: index 0 moves to floor(N/2)
        let dst = out.slice_mut(s);
        for r in 0..rows {
            let dr = (r + hr) % rows;
            for c in 0..cols {
                dst[dr * cols + (c + hc) % cols] = buf[r * cols + c] * scale;
            }
        }
    }
    out
}

/// Real-valued 2D image (magnitudes, metric inputs, exports).
#[derive(Clone, Debug, PartialEq)]
pub struct RealImage {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl RealImage {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidInput(format!(
                "image data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(RealImage { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        RealImage {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        RealImage { rows, cols, data }
    }

    /// Magnitude of a 2D complex array.
    pub fn magnitude(x: &ComplexArray) -> Result<Self> {
        if x.rank() != 2 {
            return Err(Error::InvalidInput(format!(
                "magnitude expects a 2D array, got shape {:?}",
                x.shape()
            )));
        }
        let (r, c) = x.spatial();
        RealImage::new(r, c, x.abs())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> RealImage {
        RealImage {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}
