//! Dense row-major tensors and the hand-differentiated kernels the networks
//! are assembled from.
//!
//! Image batches use the channels-last layout `[N, H, W, C]`. Every kernel
//! comes with an explicit backward pass; [`grad_check`] compares those
//! against central finite differences.

mod activation;
mod conv;
mod dense;
mod gradcheck;
mod init;
mod linalg;
mod params;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};
use std::sync::atomic::{AtomicBool, Ordering};

use num_traits::{Float, FromPrimitive};

use crate::error::{Error, Result};

pub use activation::{relu, relu_backward, sigmoid, sigmoid_backward};
pub use conv::{
    conv2d, conv2d_backward, deconv2d, deconv2d_backward, ConvGrads, ConvSpec, Padding,
};
pub use dense::{dense, dense_backward, DenseGrads};
pub use gradcheck::{grad_check, objective, projected, Objective};
pub use init::{glorot_limit, uniform};
pub use params::{Param, ParamStore};

/// Storage precision of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Precision {
    Single,
    Double,
}

impl Precision {
    pub fn as_str(self) -> &'static str {
        match self {
            Precision::Single => "single",
            Precision::Double => "double",
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" | "f32" => Ok(Precision::Single),
            "double" | "f64" => Ok(Precision::Double),
            other => Err(Error::Config(format!("unknown precision `{other}`"))),
        }
    }
}

/// Scalar types a [`Tensor`] can hold.
pub trait Element:
    Float
    + FromPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    const PRECISION: Precision;

    /// `C <- alpha * A B + beta * C` over strided row/column layouts.
    ///
    /// # Safety
    /// Pointers and strides must describe in-bounds matrices of the given size.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn from_f64_lossy(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("f64 converts to every float type")
    }

    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("float converts to f64")
    }
}

impl Element for f32 {
    const PRECISION: Precision = Precision::Single;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Element for f64 {
    const PRECISION: Precision = Precision::Double;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

static CHECKED: AtomicBool = AtomicBool::new(true);

/// Toggle checked mode, in which kernels reject NaN/Inf in their outputs.
/// Enabled by default.
pub fn set_checked_mode(enabled: bool) {
    CHECKED.store(enabled, Ordering::Relaxed);
}

pub fn checked_mode() -> bool {
    CHECKED.load(Ordering::Relaxed)
}

/// A dense n-dimensional array in row-major order.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("element", &std::any::type_name::<T>())
            .field("len", &self.data.len())
            .finish()
    }
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        validate_shape(&shape)?;
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {shape:?} needs {expected} elements, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        validate_shape(&shape).expect("tensor dimensions must be positive");
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![value; len],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        validate_shape(&shape).expect("tensor dimensions must be positive");
        let len = shape.iter().product();
        Self {
            shape,
            data: (0..len).map(&mut f).collect(),
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
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

    pub fn precision(&self) -> Precision {
        T::PRECISION
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

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        validate_shape(&shape)?;
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_shape(other, op)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: T) {
        for a in &mut self.data {
            *a *= factor;
        }
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        self.expect_same_shape(other, "dot")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b))
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &x| acc + x)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &x| acc.max(x.abs()))
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&x| U::from_f64_lossy(x.as_f64()))
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Fails with [`Error::NonFinite`] if any element is NaN or infinite.
    pub fn check_finite(&self, op: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(op.to_string()))
        }
    }

    /// Applies the checked-mode policy to a freshly produced tensor.
    pub(crate) fn checked(self, op: &str) -> Result<Self> {
        if checked_mode() {
            self.check_finite(op)?;
        }
        Ok(self)
    }

    pub(crate) fn expect_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(())
    }

    pub(crate) fn expect_shape(&self, expected: &[usize], op: &'static str) -> Result<()> {
        if self.shape != expected {
            return Err(Error::shape(
                op,
                format!("expected {expected:?}, got {:?}", self.shape),
            ));
        }
        Ok(())
    }

    pub(crate) fn expect_rank(&self, rank: usize, op: &'static str) -> Result<()> {
        if self.shape.len() != rank {
            return Err(Error::shape(
                op,
                format!("expected rank {rank}, got shape {:?}", self.shape),
            ));
        }
        Ok(())
    }
}

fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::shape(
            "shape",
            format!("dimensions must be positive, got {shape:?}"),
        ));
    }
    Ok(())
}
