//! Dense row-major tensors with a define-by-run gradient tape.
//!
//! [`Tensor`] is an immutable value with shared storage. Differentiable
//! computation goes through [`Tape`], which records every operation applied
//! to its [`Var`] handles and replays them in reverse for [`Tape::backward`].
//!
//! Storage is generic over [`Scalar`]: training runs in `f32`, gradient
//! checks in `f64`.

pub mod io;
pub mod kernels;
mod store;
mod tape;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};
use std::sync::Arc;

use rand::Rng;

pub use store::{NamedTensors, ParamVars};
pub use tape::{Gradients, Tape, Var};

use crate::error::{Error, Result};

/// Floating-point element type.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + Debug
    + Display
    + Default
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Send
    + Sync
    + 'static
{
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable in every Scalar")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Contract(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim("tensor", &shape, &[data.len()]));
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Result<Self> {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self::new(shape, vec![value; numel])
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: Arc::new(vec![value]),
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, f: impl FnMut(usize) -> T) -> Result<Self> {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self::new(shape, (0..numel).map(f).collect())
    }

    pub fn identity(n: usize) -> Result<Self> {
        Self::from_fn(
            [n, n],
            |i| if i / n == i % n { T::one() } else { T::zero() },
        )
    }

    // Shapes built internally from already-valid tensors skip re-validation.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data: Arc::new(data),
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable access; copies the storage first if it is shared.
    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    /// True when both tensors view the same storage.
    pub fn shares_storage(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.data, &other.data)
    }

    pub fn item(&self) -> Result<T> {
        if self.len() != 1 {
            return Err(Error::Contract(format!(
                "item() needs a single element, shape is {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn at(&self, index: &[usize]) -> T {
        let strides = kernels::strides(&self.shape);
        let offset: usize = index.iter().zip(&strides).map(|(i, s)| i * s).sum();
        self.data[offset]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::dim("reshape", &self.shape, &shape));
        }
        Ok(Self {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_parts(
            self.shape.clone(),
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        )
    }

    /// Rows `start..end` along the first axis.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        if self.rank() == 0 || start >= end || end > self.shape[0] {
            return Err(Error::Contract(format!(
                "row slice {start}..{end} out of range for shape {:?}",
                self.shape
            )));
        }
        let row: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Self::from_parts(
            shape,
            self.data[start * row..end * row].to_vec(),
        ))
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k, n) = matmul_dims(&self.shape, &other.shape)?;
        let mut out = vec![T::zero(); m * n];
        kernels::mm_nn(&self.data, &other.data, &mut out, m, k, n);
        Ok(Self::from_parts(vec![m, n], out))
    }

    pub fn softmax(&self, axis: usize) -> Result<Self> {
        check_axis(&self.shape, axis, "softmax")?;
        check_no_nan(self.data(), "softmax")?;
        Ok(Self::from_parts(
            self.shape.clone(),
            kernels::softmax_axis(&self.data, &self.shape, axis),
        ))
    }

    pub fn layer_norm(&self, gain: &Self, bias: &Self, epsilon: f64) -> Result<Self> {
        let width = check_layer_norm(&self.shape, gain.shape(), bias.shape())?;
        let (out, _, _) = layer_norm_forward(&self.data, &gain.data, &bias.data, width, epsilon);
        Ok(Self::from_parts(self.shape.clone(), out))
    }

    /// Inverted dropout: survivors are scaled by 1/(1−p); identity when not
    /// training.
    pub fn dropout(&self, p: f64, training: bool, rng: &mut impl Rng) -> Result<Self> {
        match dropout_scales::<T>(self.len(), p, training, rng)? {
            None => Ok(self.clone()),
            Some(scales) => Ok(Self::from_parts(
                self.shape.clone(),
                self.data
                    .iter()
                    .zip(&scales)
                    .map(|(&v, &s)| v * s)
                    .collect(),
            )),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::dim("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a - b).abs().as_f64())
            .fold(0.0, f64::max))
    }
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
        return Err(Error::dim("matmul", a, b));
    }
    Ok((a[0], a[1], b[1]))
}

pub(crate) fn check_axis(shape: &[usize], axis: usize, op: &'static str) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::Contract(format!(
            "{op}: axis {axis} out of range for shape {shape:?}"
        )));
    }
    Ok(())
}

pub(crate) fn check_no_nan<T: Scalar>(data: &[T], op: &str) -> Result<()> {
    if data.iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric(format!("{op} received NaN input")));
    }
    Ok(())
}

pub(crate) fn check_layer_norm(x: &[usize], gain: &[usize], bias: &[usize]) -> Result<usize> {
    let width = *x
        .last()
        .ok_or_else(|| Error::Contract("layer_norm on a rank-0 tensor".into()))?;
    if gain != [width] {
        return Err(Error::dim("layer_norm gain", x, gain));
    }
    if bias != [width] {
        return Err(Error::dim("layer_norm bias", x, bias));
    }
    Ok(width)
}

/// Returns (output, normalized input, per-row 1/σ).
pub(crate) fn layer_norm_forward<T: Scalar>(
    x: &[T],
    gain: &[T],
    bias: &[T],
    width: usize,
    epsilon: f64,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let n = T::of(width as f64);
    let eps = T::of(epsilon);
    let mut out = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(x.len() / width);
    for (r, row) in x.chunks(width).enumerate() {
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv = T::one() / (var + eps).sqrt();
        inv_std.push(inv);
        for (j, &v) in row.iter().enumerate() {
            let idx = r * width + j;
            xhat[idx] = (v - mean) * inv;
            out[idx] = xhat[idx] * gain[j] + bias[j];
        }
    }
    (out, xhat, inv_std)
}

/// Per-element multipliers for inverted dropout, or `None` when the op is
/// the identity.
pub(crate) fn dropout_scales<T: Scalar>(
    len: usize,
    p: f64,
    training: bool,
    rng: &mut impl Rng,
) -> Result<Option<Vec<T>>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!(
            "dropout probability must be in [0, 1), got {p}"
        )));
    }
    if !training || p == 0.0 {
        return Ok(None);
    }
    let keep = T::of(1.0 / (1.0 - p));
    Ok(Some(
        (0..len)
            .map(|_| {
                if rng.random::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::<f32>::new([2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new([0, 3], vec![]).is_err());
    }

    #[test]
    fn matmul_identity_and_zero() {
        let a = Tensor::<f64>::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(a.matmul(&Tensor::identity(2).unwrap()).unwrap(), a);

        let z = Tensor::<f64>::zeros([3, 4]).unwrap();
        let b = random(&[4, 2], 1);
        assert_eq!(z.matmul(&b).unwrap(), Tensor::zeros([3, 2]).unwrap());
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = random(&[3, 4], 2);
        let b = random(&[4, 5], 3);
        let c = a.matmul(&b).unwrap();
        for i in 0..3 {
            for j in 0..5 {
                let mut expect = 0.0;
                for p in 0..4 {
                    expect += a.at(&[i, p]) * b.at(&[p, j]);
                }
                assert_abs_diff_eq!(c.at(&[i, j]), expect, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = random(&[2, 3], 0).matmul(&random(&[2, 3], 1)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn softmax_examples() {
        let c = Tensor::<f64>::full([3], 2.5).unwrap().softmax(0).unwrap();
        for &v in c.data() {
            assert_abs_diff_eq!(v, 1.0 / 3.0, epsilon = 1e-12);
        }
        let s = Tensor::<f64>::new([2], vec![0.0, 3f64.ln()])
            .unwrap()
            .softmax(0)
            .unwrap();
        assert_abs_diff_eq!(s.data()[0], 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(s.data()[1], 0.75, epsilon = 1e-12);

        let x = random(&[4, 6], 9);
        let shifted = x.map(|v| v + 17.0);
        assert!(
            x.softmax(1)
                .unwrap()
                .max_abs_diff(&shifted.softmax(1).unwrap())
                .unwrap()
                < 1e-6
        );
    }

    #[test]
    fn softmax_along_inner_axis() {
        let x = random(&[2, 3, 4], 5);
        let s = x.softmax(1).unwrap();
        for a in 0..2 {
            for c in 0..4 {
                let total: f64 = (0..3).map(|b| s.at(&[a, b, c])).sum();
                assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn softmax_rejects_nan() {
        let x = Tensor::<f32>::new([2], vec![f32::NAN, 0.0]).unwrap();
        assert!(matches!(x.softmax(0), Err(Error::Numeric(_))));
        assert!(x.softmax(1).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let ones = Tensor::<f64>::ones([4]).unwrap();
        let zeros = Tensor::<f64>::zeros([4]).unwrap();
        let c = Tensor::<f64>::full([2, 4], 3.0).unwrap();
        let out = c.layer_norm(&ones, &zeros, 1e-5).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));

        let g = Tensor::<f64>::ones([2]).unwrap();
        let b = Tensor::<f64>::zeros([2]).unwrap();
        let r = Tensor::<f64>::new([2], vec![1.0, -1.0]).unwrap();
        let out = r.layer_norm(&g, &b, 1e-12).unwrap();
        assert_abs_diff_eq!(out.data()[0], 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(out.data()[1], -1.0, epsilon = 1e-9);
    }

    #[test]
    fn layer_norm_matches_direct_formula() {
        let x = random(&[3, 5], 11);
        let gain = random(&[5], 12);
        let bias = random(&[5], 13);
        let eps = 1e-6;
        let out = x.layer_norm(&gain, &bias, eps).unwrap();
        for r in 0..3 {
            let row: Vec<f64> = (0..5).map(|j| x.at(&[r, j])).collect();
            let mean = row.iter().sum::<f64>() / 5.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
            for j in 0..5 {
                let expect = (row[j] - mean) / (var + eps).sqrt() * gain.data()[j] + bias.data()[j];
                assert_abs_diff_eq!(out.at(&[r, j]), expect, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn dropout_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random(&[10, 10], 4);
        assert_eq!(x.dropout(0.0, true, &mut rng).unwrap(), x);
        assert_eq!(x.dropout(0.5, false, &mut rng).unwrap(), x);
        assert!(matches!(
            x.dropout(1.0, true, &mut rng),
            Err(Error::Config(_))
        ));
        assert!(x.dropout(-0.1, false, &mut rng).is_err());
    }

    #[test]
    fn dropout_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = Tensor::<f64>::from_fn([100, 100], |i| 1.0 + i as f64 * 1e-4).unwrap();
        let y = x.dropout(0.1, true, &mut rng).unwrap();
        let zeros = y.data().iter().filter(|&&v| v == 0.0).count();
        let frac = zeros as f64 / y.len() as f64;
        assert!((frac - 0.1).abs() <= 0.02, "zero fraction {frac}");
        for (&a, &b) in x.data().iter().zip(y.data()) {
            if b != 0.0 {
                assert_abs_diff_eq!(b, a / 0.9, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn reshape_shares_storage() {
        let x = random(&[2, 6], 1);
        let y = x.reshape([3, 4]).unwrap();
        assert!(x.shares_storage(&y));
        assert!(x.reshape([5]).is_err());
    }
}
