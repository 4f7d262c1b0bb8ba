use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Numeric width of a run.
///
/// `f64` is the verification width: every tape op checks its output for
/// NaN/Inf and finite-difference oracles are meaningful. `f32` is the
/// training width.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Sum
    + Send
    + Sync
    + 'static
{
    /// Bytes per value in binary files.
    const BYTES: usize;
    /// Whether tapes of this width reject non-finite op outputs.
    const VERIFY: bool;

    /// Guard used by `l2_normalize` when no explicit epsilon is given.
    fn norm_eps() -> Self;

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("finite cast")
    }

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// Strided `c = alpha·a·b + beta·c` for this width.
    #[doc(hidden)]
    fn gemm_kernel(alpha: Self, a: &[Self], la: MatLayout, b: &[Self], lb: MatLayout, beta: Self, c: &mut [Self]);
}

impl Real for f32 {
    const BYTES: usize = 4;
    const VERIFY: bool = false;

    fn norm_eps() -> Self {
        1e-8
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn gemm_kernel(alpha: Self, a: &[Self], la: MatLayout, b: &[Self], lb: MatLayout, beta: Self, c: &mut [Self]) {
        check_layouts(a.len(), la, b.len(), lb, c.len());
        // SAFETY: check_layouts bounds every strided access within the slices.
        unsafe {
            matrixmultiply::sgemm(
                la.rows,
                la.cols,
                lb.cols,
                alpha,
                a.as_ptr(),
                la.rs as isize,
                la.cs as isize,
                b.as_ptr(),
                lb.rs as isize,
                lb.cs as isize,
                beta,
                c.as_mut_ptr(),
                lb.cols as isize,
                1,
            );
        }
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

impl Real for f64 {
    const BYTES: usize = 8;
    const VERIFY: bool = true;

    fn norm_eps() -> Self {
        1e-12
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn gemm_kernel(alpha: Self, a: &[Self], la: MatLayout, b: &[Self], lb: MatLayout, beta: Self, c: &mut [Self]) {
        check_layouts(a.len(), la, b.len(), lb, c.len());
        // SAFETY: check_layouts bounds every strided access within the slices.
        unsafe {
            matrixmultiply::dgemm(
                la.rows,
                la.cols,
                lb.cols,
                alpha,
                a.as_ptr(),
                la.rs as isize,
                la.cs as isize,
                b.as_ptr(),
                lb.rs as isize,
                lb.cs as isize,
                beta,
                c.as_mut_ptr(),
                lb.cols as isize,
                1,
            );
        }
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}

/// Dense row-major array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::invalid(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<T>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), values.iter().map(|&v| T::lit(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::invalid(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.f64()).unwrap_or_else(U::nan))
                .collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.f64()).collect()
    }
}

/// Strided matrix view description: `(rows, cols, row_stride, col_stride)`.
#[derive(Clone, Copy, Debug)]
#[doc(hidden)]
pub struct MatLayout {
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl MatLayout {
    pub fn row_major(rows: usize, cols: usize) -> Self {
        MatLayout {
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    /// Same storage read as its transpose.
    pub fn t(self) -> Self {
        MatLayout {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

fn extent(l: MatLayout) -> usize {
    if l.rows == 0 || l.cols == 0 {
        0
    } else {
        (l.rows - 1) * l.rs + (l.cols - 1) * l.cs + 1
    }
}

fn check_layouts(a: usize, la: MatLayout, b: usize, lb: MatLayout, c: usize) {
    assert_eq!(la.cols, lb.rows, "inner dimensions differ");
    assert!(extent(la) <= a && extent(lb) <= b, "operand layout exceeds its slice");
    assert!(la.rows * lb.cols <= c, "output slice too short");
}

/// `c = alpha * a·b + beta * c`, with `c` row-major `a.rows × b.cols`.
pub(crate) fn gemm<T: Real>(alpha: T, a: &[T], la: MatLayout, b: &[T], lb: MatLayout, beta: T, c: &mut [T]) {
    T::gemm_kernel(alpha, a, la, b, lb, beta, c)
}
