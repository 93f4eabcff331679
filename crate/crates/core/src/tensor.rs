//! Dense row-major tensors and the numeric kernels used by the transformer.
//!
//! Storage is reference counted so cloning a tensor (for example when a
//! parameter is placed on a [`Tape`](crate::autograd::Tape)) does not copy the
//! buffer. Mutation goes through [`Tensor::data_mut`], which copies on write
//! when the buffer is shared.

use std::fmt::Debug;
use std::iter::Sum;
use std::sync::Arc;

use num_traits::Float;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Floating point element type. Training and inference run in `f32`;
/// gradient checks instantiate the same code with `f64`.
pub trait Scalar: Float + Sum + Debug + Default + Send + Sync + 'static {
    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn of_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn of_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} holds {expected} elements but {actual} were supplied")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("invalid shape {0:?}: every dimension must be positive")]
    InvalidShape(Vec<usize>),
    #[error("{0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.iter().any(|&d| d == 0) {
        return Err(TensorError::InvalidShape(shape.to_vec()));
    }
    Ok(shape.iter().product())
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected = check_shape(&shape)?;
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn full(shape: Vec<usize>, value: T) -> Result<Self> {
        let n = check_shape(&shape)?;
        Ok(Self {
            shape,
            data: Arc::new(vec![value; n]),
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: Vec<usize>) -> Result<Self> {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: Arc::new(vec![value]),
        }
    }

    pub fn eye(n: usize) -> Result<Self> {
        let mut t = Self::zeros(vec![n, n])?;
        let d = t.data_mut();
        for i in 0..n {
            d[i * n + i] = T::one();
        }
        Ok(t)
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> T) -> Result<Self> {
        let n = check_shape(&shape)?;
        Ok(Self {
            shape,
            data: Arc::new((0..n).map(&mut f).collect()),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// First element; the value of a scalar tensor.
    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        let n = check_shape(&shape)?;
        if n != self.numel() {
            return Err(TensorError::Dimension {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape,
            });
        }
        Ok(Self {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    /// Interprets the tensor as a matrix: rank 2 as-is, rank 1 as a single row.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            [c] => Ok((1, *c)),
            _ => Err(TensorError::Contract(format!(
                "expected a matrix, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// Length of the last axis and the number of rows along it.
    pub fn last_axis(&self) -> (usize, usize) {
        let n = self.shape.last().copied().unwrap_or(1);
        (self.numel() / n, n)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|v| U::of_f64(v.as_f64())).collect()),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(TensorError::Dimension {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: Arc::new(
                self.data
                    .iter()
                    .zip(other.data.iter())
                    .map(|(&a, &b)| f(a, b))
                    .collect(),
            ),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose2(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let src = self.data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Self::new(vec![c, r], out)
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }
}

/// Work threshold (multiply-adds) above which matrix kernels split rows across threads.
const PAR_THRESHOLD: usize = 1 << 16;

fn for_each_row<T: Scalar>(out: &mut [T], cols: usize, work: usize, f: impl Fn(usize, &mut [T]) + Sync + Send) {
    if work >= PAR_THRESHOLD {
        out.par_chunks_mut(cols)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
    } else {
        out.chunks_mut(cols).enumerate().for_each(|(i, row)| f(i, row));
    }
}

/// `a[m×k] · b[k×n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(TensorError::Dimension {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); m * n];
    for_each_row(&mut out, n, m * k * n, |i, row| {
        for (p, &av) in ad[i * k..(i + 1) * k].iter().enumerate() {
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    });
    Tensor::new(vec![m, n], out)
}

/// `a[m×k] · b[n×k]ᵀ`; the layout used by linear layers with `[out × in]` weights.
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (n, k2) = b.dims2()?;
    if k != k2 {
        return Err(TensorError::Dimension {
            op: "matmul_nt",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); m * n];
    for_each_row(&mut out, n, m * k * n, |i, row| {
        let arow = &ad[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            let brow = &bd[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc = acc + x * y;
            }
            *o = acc;
        }
    });
    Tensor::new(vec![m, n], out)
}

/// `a[k×m]ᵀ · b[k×n]`.
pub fn matmul_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, m) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(TensorError::Dimension {
            op: "matmul_tn",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); m * n];
    for_each_row(&mut out, n, m * k * n, |i, row| {
        for p in 0..k {
            let av = ad[p * m + i];
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    });
    Tensor::new(vec![m, n], out)
}

/// Softmax along `axis`, with the per-slice maximum subtracted first.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank().max(1) {
        return Err(TensorError::Contract(format!(
            "softmax axis {axis} out of range for shape {:?}",
            x.shape
        )));
    }
    let shape = if x.rank() == 0 { vec![1] } else { x.shape.clone() };
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let max = (0..len).map(|j| src[idx(j)]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for j in 0..len {
                let e = (src[idx(j)] - max).exp();
                out[idx(j)] = e;
                total = total + e;
            }
            for j in 0..len {
                out[idx(j)] = out[idx(j)] / total;
            }
        }
    }
    Tensor::new(x.shape.clone(), out)
}

/// Row softmax over the last axis.
pub fn softmax_last<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (_, n) = x.last_axis();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(n) {
        softmax_row(row);
    }
    Tensor {
        shape: x.shape.clone(),
        data: Arc::new(out),
    }
}

pub(crate) fn softmax_row<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Normalized values and reciprocal standard deviations, kept for the backward pass.
pub(crate) struct LayerNormStats<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub(crate) fn layer_norm_stats<T: Scalar>(x: &Tensor<T>, eps: T) -> Result<LayerNormStats<T>> {
    let (rows, n) = x.last_axis();
    if x.rank() == 0 || n < 2 {
        return Err(TensorError::Dimension {
            op: "layer_norm",
            lhs: x.shape.clone(),
            rhs: vec![n],
        });
    }
    let nf = T::of_f64(n as f64);
    let mut xhat = vec![T::zero(); x.numel()];
    let mut rstd = Vec::with_capacity(rows);
    for (row, out) in x.data().chunks(n).zip(xhat.chunks_mut(n)) {
        let mean = row.iter().copied().sum::<T>() / nf;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
        let r = T::one() / (var + eps).sqrt();
        for (o, &v) in out.iter_mut().zip(row) {
            *o = (v - mean) * r;
        }
        rstd.push(r);
    }
    Ok(LayerNormStats { xhat, rstd })
}

pub(crate) fn check_affine<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<()> {
    let (_, n) = x.last_axis();
    for p in [gamma, beta] {
        if p.numel() != n || p.rank() != 1 {
            return Err(TensorError::Dimension {
                op: "layer_norm",
                lhs: x.shape.clone(),
                rhs: p.shape.clone(),
            });
        }
    }
    Ok(())
}

/// Layer normalization over the last axis with biased variance, followed by
/// the affine map `gamma * x̂ + beta`.
pub fn layer_norm<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    check_affine(x, gamma, beta)?;
    let stats = layer_norm_stats(x, eps)?;
    let (_, n) = x.last_axis();
    let (g, b) = (gamma.data(), beta.data());
    let mut out = stats.xhat;
    for row in out.chunks_mut(n) {
        for ((v, &gv), &bv) in row.iter_mut().zip(g).zip(b) {
            *v = *v * gv + bv;
        }
    }
    Tensor::new(x.shape.clone(), out)
}

/// Which GELU formula to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeluKind {
    /// `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`
    #[default]
    Tanh,
    /// `x·Φ(x)` with Φ from `erf`.
    Erf,
}

const GELU_COEF: f64 = 0.044715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

pub(crate) fn gelu_scalar<T: Scalar>(x: T, kind: GeluKind) -> T {
    let half = T::of_f64(0.5);
    match kind {
        GeluKind::Tanh => {
            let u = T::of_f64(SQRT_2_OVER_PI) * (x + T::of_f64(GELU_COEF) * x * x * x);
            half * x * (T::one() + u.tanh())
        }
        GeluKind::Erf => {
            let xf = x.as_f64();
            T::of_f64(0.5 * xf * (1.0 + libm::erf(xf / std::f64::consts::SQRT_2)))
        }
    }
}

pub(crate) fn gelu_derivative<T: Scalar>(x: T, kind: GeluKind) -> T {
    match kind {
        GeluKind::Tanh => {
            let c = T::of_f64(SQRT_2_OVER_PI);
            let a = T::of_f64(GELU_COEF);
            let half = T::of_f64(0.5);
            let t = (c * (x + a * x * x * x)).tanh();
            half * (T::one() + t)
                + half * x * (T::one() - t * t) * c * (T::one() + T::of_f64(3.0) * a * x * x)
        }
        GeluKind::Erf => {
            let xf = x.as_f64();
            let cdf = 0.5 * (1.0 + libm::erf(xf / std::f64::consts::SQRT_2));
            let pdf = (-0.5 * xf * xf).exp() / (2.0 * std::f64::consts::PI).sqrt();
            T::of_f64(cdf + xf * pdf)
        }
    }
}

pub fn gelu<T: Scalar>(x: &Tensor<T>, kind: GeluKind) -> Tensor<T> {
    x.map(|v| gelu_scalar(v, kind))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(matches!(
            Tensor::<f32>::new(vec![2, 2], vec![0.0; 3]),
            Err(TensorError::DataLength { .. })
        ));
        assert!(matches!(Tensor::<f32>::zeros(vec![2, 0]), Err(TensorError::InvalidShape(_))));
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let m = t(&[3, 3], &[1., -2., 3., 0.5, 5., 6., 7., 8., -9.]);
        let i3 = Tensor::eye(3).unwrap();
        assert_eq!(matmul(&i3, &m).unwrap(), m);

        let a = t(&[2, 2], &[1., 2., 3., 4.]);
        let b = t(&[2, 1], &[5., 6.]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[17., 39.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = t(&[2, 3], &[0.; 6]);
        let b = t(&[2, 2], &[0.; 4]);
        let err = matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn nt_and_tn_agree_with_explicit_transpose() {
        let a = Tensor::<f64>::from_fn(vec![4, 3], |i| (i as f64 * 0.37).sin()).unwrap();
        let b = Tensor::<f64>::from_fn(vec![5, 3], |i| (i as f64 * 0.91).cos()).unwrap();
        let direct = matmul(&a, &b.transpose2().unwrap()).unwrap();
        assert_eq!(matmul_nt(&a, &b).unwrap(), direct);
        let c = Tensor::<f64>::from_fn(vec![4, 5], |i| i as f64 - 7.0).unwrap();
        let direct = matmul(&a.transpose2().unwrap(), &c).unwrap();
        assert!(matmul_tn(&a, &c).unwrap().max_abs_diff(&direct) < 1e-12);
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&t(&[2], &[0., 0.]), 0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax(&t(&[2], &[1000., 1000.]), 0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);

        // Reference: e^k / (e + e^2 + e^3) evaluated directly.
        let e = std::f64::consts::E;
        let z = e + e * e + e * e * e;
        let expect = [e / z, e * e / z, e * e * e / z];
        let s = softmax(&t(&[3], &[1., 2., 3.]), 0).unwrap();
        for (a, b) in s.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn softmax_along_first_axis() {
        let x = t(&[2, 3], &[0., 1., 2., 0., 1., 2.]);
        let s = softmax(&x, 0).unwrap();
        assert!(s.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
        assert!(softmax(&x, 2).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let g = Tensor::ones(vec![3]).unwrap();
        let b = Tensor::zeros(vec![3]).unwrap();
        let eps = LAYER_NORM_EPS;
        let y = layer_norm(&t(&[3], &[4., 4., 4.]), &g, &b, eps).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let y = layer_norm(&t(&[3], &[1., 2., 3.]), &g, &b, eps).unwrap();
        let mean = y.sum() / 3.0;
        let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-5);
        assert!((var - 1.0).abs() < 1e-4);

        let g1 = Tensor::ones(vec![1]).unwrap();
        let b1 = Tensor::zeros(vec![1]).unwrap();
        assert!(matches!(
            layer_norm(&t(&[2, 1], &[1., 2.]), &g1, &b1, eps),
            Err(TensorError::Dimension { .. })
        ));
    }

    #[test]
    fn gelu_examples() {
        for kind in [GeluKind::Tanh, GeluKind::Erf] {
            assert_eq!(gelu_scalar(0.0f64, kind), 0.0);
            assert!((gelu_scalar(10.0f64, kind) - 10.0).abs() < 1e-12);
            assert!(gelu_scalar(-10.0f64, kind).abs() < 1e-12);
        }
        // Φ(1) = 0.841344746068542948585232545632...
        let exact = 0.841_344_746_068_542_9;
        assert!((gelu_scalar(1.0f64, GeluKind::Erf) - exact).abs() < 1e-6);
        // tanh form: 0.5·(1 + tanh(√(2/π)·1.044715))
        let tanh_ref = 0.5 * (1.0 + (SQRT_2_OVER_PI * 1.044715f64).tanh());
        assert!((gelu_scalar(1.0f64, GeluKind::Tanh) - tanh_ref).abs() < 1e-12);
        assert!((gelu_scalar(1.0f64, GeluKind::Tanh) - exact).abs() < 1e-3);
    }

    #[test]
    fn gelu_derivative_matches_difference_quotient() {
        for kind in [GeluKind::Tanh, GeluKind::Erf] {
            for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
                let h = 1e-5;
                let fd = (gelu_scalar(x + h, kind) - gelu_scalar(x - h, kind)) / (2.0 * h);
                assert!((gelu_derivative(x, kind) - fd).abs() < 1e-8, "{kind:?} {x}");
            }
        }
    }

    proptest! {
        #[test]
        fn softmax_is_a_distribution(rows in 1usize..5, cols in 1usize..7, seed in any::<u64>()) {
            let x = Tensor::<f64>::from_fn(vec![rows, cols], |i| {
                let h = (i as u64 + 1).wrapping_mul(seed | 1).rotate_left(17);
                (h % 2001) as f64 / 50.0 - 20.0
            }).unwrap();
            let s = softmax_last(&x);
            for row in s.data().chunks(cols) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                prop_assert!(row.iter().all(|&v| v > 0.0 && v <= 1.0));
            }
            prop_assert_eq!(softmax(&x, 1).unwrap(), s);
        }

        #[test]
        fn layer_norm_moments(vals in proptest::collection::vec(-50.0f64..50.0, 2..32)) {
            let n = vals.len();
            let spread = vals.iter().cloned().fold(f64::MIN, f64::max) - vals.iter().cloned().fold(f64::MAX, f64::min);
            prop_assume!(spread > 1e-2);
            let x = Tensor::new(vec![n], vals).unwrap();
            let y = layer_norm(&x, &Tensor::ones(vec![n]).unwrap(), &Tensor::zeros(vec![n]).unwrap(), LAYER_NORM_EPS).unwrap();
            let mean = y.sum() / n as f64;
            let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            prop_assert!(mean.abs() < 1e-5);
            prop_assert!((var - 1.0).abs() < 1e-4);
        }

        #[test]
        fn identity_is_associative_bitwise(m in 1usize..5, k in 1usize..5, n in 1usize..5, seed in any::<u32>()) {
            let gen = |salt: u32| move |i: usize| ((i as f64 + 1.3) * (seed as f64 + salt as f64 + 0.7)).sin();
            let a = Tensor::<f64>::from_fn(vec![m, k], gen(1)).unwrap();
            let b = Tensor::<f64>::from_fn(vec![k, n], gen(2)).unwrap();
            let i = Tensor::eye(k).unwrap();
            let ab = matmul(&a, &b).unwrap();
            let left = matmul(&matmul(&a, &i).unwrap(), &b).unwrap();
            let right = matmul(&a, &matmul(&i, &b).unwrap()).unwrap();
            prop_assert_eq!(left.data(), ab.data());
            prop_assert_eq!(right.data(), ab.data());
        }
    }
}
