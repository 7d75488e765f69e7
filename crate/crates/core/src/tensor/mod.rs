//! Dense tensors and their deterministic primitive operations.
//!
//! Values are stored row-major (last index fastest). Storage is always `f64`;
//! a tensor tagged [`DType::F32`] has every element rounded to single precision
//! after each operation and serializes as `f32`.
//!
//! Every public operation checks its output for NaN/Inf and fails rather than
//! returning a non-finite tensor.

mod conv;

pub use conv::{col2im, conv2d, conv2d_backward, im2col, ConvGeometry};

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{invalid, Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum DType {
    F32,
    #[default]
    F64,
}

impl DType {
    #[inline]
    pub fn round(self, x: f64) -> f64 {
        match self {
            DType::F32 => x as f32 as f64,
            DType::F64 => x,
        }
    }

    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    /// Default group-membership floor for this precision.
    pub fn membership_eps(self) -> f64 {
        match self {
            DType::F32 => 1e-6,
            DType::F64 => 1e-12,
        }
    }
}

pub const MAX_RANK: usize = 4;

/// Ordered list of positive extents, rank 0 to 4.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.len() > MAX_RANK {
            return Err(Error::InvalidShape {
                dims: dims.to_vec(),
                reason: "rank above 4",
            });
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidShape {
                dims: dims.to_vec(),
                reason: "zero-element shape",
            });
        }
        let mut count: u64 = 1;
        for &d in dims {
            count = count.checked_mul(d as u64).ok_or(Error::InvalidShape {
                dims: dims.to_vec(),
                reason: "element count overflows u64",
            })?;
        }
        if usize::try_from(count).is_err() {
            return Err(Error::InvalidShape {
                dims: dims.to_vec(),
                reason: "element count exceeds address space",
            });
        }
        Ok(Self(dims.to_vec()))
    }

    pub fn scalar() -> Self {
        Self(Vec::new())
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Converts a flat offset into a multi-index.
    pub fn unravel(&self, mut offset: usize) -> Vec<usize> {
        let mut idx = vec![0; self.0.len()];
        for (slot, &d) in idx.iter_mut().zip(&self.0).rev() {
            *slot = offset % d;
            offset /= d;
        }
        idx
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    dtype: DType,
    shape: Shape,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("dtype", &self.dtype)
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    /// Builds an F64 tensor.
    pub fn from_vec(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        Self::from_vec_dtype(dims, data, DType::F64)
    }

    pub fn from_vec_dtype(dims: &[usize], data: Vec<f64>, dtype: DType) -> Result<Self> {
        let shape = Shape::new(dims)?;
        Self::from_shape(shape, data, dtype, "from_vec")
    }

    fn from_shape(shape: Shape, mut data: Vec<f64>, dtype: DType, op: &'static str) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::ShapeMismatch {
                op,
                left: shape.dims().to_vec(),
                right: vec![data.len()],
            });
        }
        if dtype == DType::F32 {
            data.iter_mut().for_each(|x| *x = DType::F32.round(*x));
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                op,
                index: shape.unravel(pos),
            });
        }
        Ok(Self { dtype, shape, data })
    }

    /// Output constructor shared by all ops: rounds to dtype and rejects NaN/Inf.
    fn produce(&self, shape: Shape, data: Vec<f64>, op: &'static str) -> Result<Self> {
        Self::from_shape(shape, data, self.dtype, op)
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Self::from_shape(Shape::scalar(), vec![value], DType::F64, "scalar")
    }

    pub fn full(dims: &[usize], value: f64, dtype: DType) -> Result<Self> {
        if !value.is_finite() {
            return Err(invalid("full: non-finite fill value"));
        }
        let shape = Shape::new(dims)?;
        let n = shape.numel();
        Self::from_shape(shape, vec![value; n], dtype, "full")
    }

    pub fn zeros(dims: &[usize], dtype: DType) -> Result<Self> {
        Self::full(dims, 0.0, dtype)
    }

    /// All-ones tensor; the identity of the Hadamard group.
    pub fn ones(dims: &[usize], dtype: DType) -> Result<Self> {
        Self::full(dims, 1.0, dtype)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            dtype: self.dtype,
            shape: self.shape.clone(),
            data: vec![0.0; self.data.len()],
        }
    }

    /// I.i.d. normal samples in row-major order.
    pub fn gaussian(dims: &[usize], mean: f64, stddev: f64, dtype: DType, rng: &mut Rng) -> Result<Self> {
        if !mean.is_finite() || !stddev.is_finite() {
            return Err(invalid("gaussian: non-finite mean or stddev"));
        }
        if stddev <= 0.0 {
            return Err(invalid("gaussian: stddev must be positive"));
        }
        let shape = Shape::new(dims)?;
        let data = (0..shape.numel()).map(|_| rng.normal(mean, stddev)).collect();
        Self::from_shape(shape, data, dtype, "gaussian")
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(invalid("item: tensor has more than one element"));
        }
        Ok(self.data[0])
    }

    pub fn to_dtype(&self, dtype: DType) -> Self {
        let mut out = self.clone();
        out.dtype = dtype;
        if dtype == DType::F32 {
            out.data.iter_mut().for_each(|x| *x = DType::F32.round(*x));
        }
        out
    }

    fn check_same(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                left: self.dims().to_vec(),
                right: other.dims().to_vec(),
            });
        }
        if self.dtype != other.dtype {
            return Err(Error::DTypeMismatch { op });
        }
        Ok(())
    }

    fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_same(other, op)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        self.produce(self.shape.clone(), data, op)
    }

    fn map(&self, op: &'static str, f: impl Fn(f64) -> f64) -> Result<Self> {
        let data = self.data.iter().map(|&a| f(a)).collect();
        self.produce(self.shape.clone(), data, op)
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Result<Self> {
        if !s.is_finite() {
            return Err(invalid("scale: non-finite factor"));
        }
        self.map("scale", |a| a * s)
    }

    /// Elementwise product, the group operation.
    pub fn hadamard(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    /// Elementwise quotient. Fails on any zero divisor.
    pub fn div(&self, other: &Tensor) -> Result<Self> {
        self.check_same(other, "div")?;
        if let Some(pos) = other.data.iter().position(|&b| b == 0.0) {
            return Err(Error::Domain {
                op: "div",
                index: self.shape.unravel(pos),
                value: 0.0,
            });
        }
        self.zip_with(other, "div", |a, b| a / b)
    }

    pub fn map_exp(&self) -> Result<Self> {
        self.map("map_exp", libm::exp)
    }

    /// Elementwise `1/x`; every `|x|` must exceed `eps`.
    pub fn reciprocal_eps(&self, eps: f64) -> Result<Self> {
        if let Some(pos) = self.data.iter().position(|x| x.abs() <= eps) {
            return Err(Error::Domain {
                op: "reciprocal",
                index: self.shape.unravel(pos),
                value: self.data[pos],
            });
        }
        self.map("reciprocal", |a| 1.0 / a)
    }

    /// Elementwise `1/x` with the dtype's default membership floor.
    pub fn reciprocal(&self) -> Result<Self> {
        self.reciprocal_eps(self.dtype.membership_eps())
    }

    pub fn map_ln(&self) -> Result<Self> {
        if let Some(pos) = self.data.iter().position(|&x| x <= 0.0) {
            return Err(Error::Domain {
                op: "map_ln",
                index: self.shape.unravel(pos),
                value: self.data[pos],
            });
        }
        self.map("map_ln", libm::log)
    }

    pub fn relu(&self) -> Result<Self> {
        self.map("relu", |a| if a > 0.0 { a } else { 0.0 })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, &x| acc + x)
    }

    fn matrix_dims(&self, op: &'static str) -> Result<(usize, usize)> {
        match *self.dims() {
            [r, c] => Ok((r, c)),
            _ => Err(Error::InvalidShape {
                dims: self.dims().to_vec(),
                reason: match op {
                    "matmul" => "matmul expects rank-2 operands",
                    _ => "expected a matrix",
                },
            }),
        }
    }

    /// Matrix product. Each output entry accumulates left to right over the
    /// contraction index starting from zero, with no fused multiply-add.
    pub fn matmul(&self, other: &Tensor) -> Result<Self> {
        let (n, r) = self.matrix_dims("matmul")?;
        let (r2, m) = other.matrix_dims("matmul")?;
        if r != r2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.dims().to_vec(),
                right: other.dims().to_vec(),
            });
        }
        if self.dtype != other.dtype {
            return Err(Error::DTypeMismatch { op: "matmul" });
        }
        let mut out = vec![0.0; n * m];
        // i-p-j loop order keeps each out[i, j] summed in ascending p.
        for i in 0..n {
            let row = &mut out[i * m..(i + 1) * m];
            let a_row = &self.data[i * r..(i + 1) * r];
            for (p, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[p * m..(p + 1) * m];
                for (o, &b) in row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        self.produce(Shape(vec![n, m]), out, "matmul")
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.matrix_dims("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        self.produce(Shape(vec![c, r]), out, "transpose")
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.dims().to_vec(),
                right: dims.to_vec(),
            });
        }
        Ok(Self {
            dtype: self.dtype,
            shape,
            data: self.data.clone(),
        })
    }

    /// `(C_out, C_in, k, k)` kernel to its `(C_out, C_in·k²)` matrix view.
    pub fn flatten_kernel(&self) -> Result<Self> {
        match *self.dims() {
            [c_out, c_in, kh, kw] => self.reshape(&[c_out, c_in * kh * kw]),
            _ => Err(Error::InvalidShape {
                dims: self.dims().to_vec(),
                reason: "flatten_kernel expects a rank-4 kernel",
            }),
        }
    }

    pub fn unflatten_kernel(&self, kernel_dims: &[usize]) -> Result<Self> {
        match (self.dims(), kernel_dims) {
            (&[rows, cols], &[c_out, c_in, kh, kw]) if rows == c_out && cols == c_in * kh * kw => {
                self.reshape(kernel_dims)
            }
            _ => Err(Error::ShapeMismatch {
                op: "unflatten_kernel",
                left: self.dims().to_vec(),
                right: kernel_dims.to_vec(),
            }),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        libm::sqrt(self.data.iter().fold(0.0, |acc, &x| acc + x * x))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |acc: f64, &x| acc.max(x.abs()))
    }

    /// True iff `|a_i - b_i| <= atol + rtol * |b_i|` everywhere.
    pub fn allclose(&self, other: &Tensor, rtol: f64, atol: f64) -> Result<bool> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "allclose",
                left: self.dims().to_vec(),
                right: other.dims().to_vec(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .all(|(&a, &b)| (a - b).abs() <= atol + rtol * b.abs()))
    }

    /// Largest `|a_i - b_i|`.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.check_same(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |acc: f64, (&a, &b)| acc.max((a - b).abs())))
    }

    /// Largest `|a_i - b_i| / |b_i|` over entries with nonzero `b_i`.
    pub fn max_rel_diff(&self, other: &Tensor) -> Result<f64> {
        self.check_same(other, "max_rel_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .filter(|(_, &b)| b != 0.0)
            .fold(0.0, |acc: f64, (&a, &b)| acc.max(((a - b) / b).abs())))
    }

    /// Bitwise equality of shape, dtype and every element.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.dtype == other.dtype
            && self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Row-major offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        index
            .iter()
            .zip(self.dims())
            .fold(0, |acc, (&i, &d)| acc * d + i)
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    /// Copy with one element replaced; used by finite-difference probes.
    pub fn with_value(&self, flat: usize, value: f64) -> Result<Self> {
        let mut data = self.data.clone();
        data[flat] = value;
        self.produce(self.shape.clone(), data, "with_value")
    }

    /// Rows `rows` of a matrix-leading tensor (first axis slice).
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let dims = self.dims();
        if dims.is_empty() {
            return Err(invalid("select_rows on a scalar"));
        }
        let stride: usize = dims[1..].iter().product();
        let mut data = Vec::with_capacity(rows.len() * stride);
        for &r in rows {
            if r >= dims[0] {
                return Err(invalid("select_rows: row out of range"));
            }
            data.extend_from_slice(&self.data[r * stride..(r + 1) * stride]);
        }
        let mut new_dims = dims.to_vec();
        new_dims[0] = rows.len();
        self.produce(Shape::new(&new_dims)?, data, "select_rows")
    }

    /// Elementwise combination with a caller-supplied rule, rounding and
    /// finiteness checks included. Used by the tape for less common VJPs.
    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.zip_with(other, op, f)
    }

    pub fn map_values(&self, op: &'static str, f: impl Fn(f64) -> f64) -> Result<Self> {
        self.map(op, f)
    }
}
