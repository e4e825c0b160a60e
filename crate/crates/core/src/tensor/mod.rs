//! Dense row-major tensors, the forward kernels a ViT needs, and a
//! reverse-mode computation record.

pub mod kernels;
pub mod tape;

use std::fmt::Debug;
use std::hash::Hasher;

use num_traits::{Float, FromPrimitive};

use crate::error::{shape_err, Error, Result};

pub use kernels::{gelu, layer_norm, matmul, softmax, LN_EPS};
pub use tape::{ComputationRecord, Gradients, KlDirection, Var};

/// Numeric precision of a tensor's elements.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Single,
    Double,
}

/// Element type of a [`Tensor`]. Implemented for `f32` (training) and `f64`
/// (oracle and gradient checks).
pub trait Real:
    Float + FromPrimitive + Default + Debug + Send + Sync + std::iter::Sum + 'static
{
    const PRECISION: Precision;

    fn erf(self) -> Self;

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("representable literal")
    }

    fn to_f64_lossless(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {
    const PRECISION: Precision = Precision::Single;
    fn erf(self) -> Self {
        libm::erff(self)
    }
}

impl Real for f64 {
    const PRECISION: Precision = Precision::Double;
    fn erf(self) -> Self {
        libm::erf(self)
    }
}

/// Dense n-dimensional array. `shape` may be empty for a scalar.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        const SHOWN: usize = 8;
        let head: Vec<_> = self.data.iter().take(SHOWN).collect();
        write!(f, "Tensor{:?} {:?}", self.shape, head)?;
        if self.data.len() > SHOWN {
            write!(f, "..")?;
        }
        Ok(())
    }
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Contract(format!("zero dimension in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err("tensor::new", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    /// Construct without checking; callers guarantee `product(shape) == data.len()`.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(v: T) -> Self {
        Self::from_parts(Vec::new(), vec![v])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Self::from_parts(shape.to_vec(), (0..n).map(&mut f).collect())
    }

    /// Build from `f64` values, rounding to the element type.
    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), data.iter().map(|&v| T::lit(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    pub fn precision(&self) -> Precision {
        T::PRECISION
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data
                .iter()
                .map(|v| U::from_f64(v.to_f64_lossless()).unwrap_or(U::nan()))
                .collect(),
        )
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(shape_err(op, &self.shape, &other.shape));
        }
        Ok(Self::from_parts(
            self.shape.clone(),
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|v| v * c)
    }

    /// `self += c * other`, elementwise.
    pub fn axpy(&mut self, c: T, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err("axpy", &self.shape, &other.shape));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + c * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        Ok(self.sub(other)?.max_abs())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Order-sensitive hash of the shape and the exact bit pattern of every element.
    pub fn checksum(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for &d in &self.shape {
            h.write_usize(d);
        }
        for v in &self.data {
            h.write_u64(v.to_f64_lossless().to_bits());
        }
        h.finish()
    }

    /// Row `i` of a tensor viewed as `[shape[0], rest]`.
    pub fn row(&self, i: usize) -> Result<Tensor<T>> {
        let rows = *self.shape.first().ok_or_else(|| Error::Contract("row() on scalar".into()))?;
        if i >= rows {
            return Err(Error::Contract(format!("row {i} out of range {rows}")));
        }
        let width = self.data.len() / rows;
        let shape = if self.shape.len() == 1 {
            Vec::new()
        } else {
            self.shape[1..].to_vec()
        };
        Ok(Self::from_parts(shape, self.data[i * width..(i + 1) * width].to_vec()))
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Contract("stack of zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(shape_err("stack", &first.shape, &t.shape));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self::from_parts(shape, data))
    }
}
