//! Dense row-major tensors.
//!
//! Storage is a flat `Vec` in row-major order with no views or strides;
//! every operation returns a fresh tensor. Operations that can produce
//! floating-point values check the result and fail with
//! [`Error::NonFinite`] instead of propagating NaN or infinity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{Precision, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() {
        return Err(Error::InvalidTensor(
            "rank-0 tensors are not supported".into(),
        ));
    }
    if shape.contains(&0) {
        return Err(Error::InvalidTensor(format!(
            "dimension sizes must be positive, got {shape:?}"
        )));
    }
    Ok(())
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        check_shape(&shape)?;
        if numel(&shape) != data.len() {
            return Err(Error::InvalidTensor(format!(
                "shape {shape:?} holds {} elements but {} were given",
                numel(&shape),
                data.len()
            )));
        }
        Tensor { shape, data }.finite("new")
    }

    /// # Panics
    /// If `shape` is empty or contains a zero.
    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        check_shape(&shape).expect("invalid shape");
        let data = vec![value; numel(&shape)];
        Tensor { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::ZERO)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::ONE)
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, f: impl FnMut(usize) -> T) -> Result<Self> {
        let shape = shape.into();
        check_shape(&shape)?;
        let data = (0..numel(&shape)).map(f).collect();
        Tensor { shape, data }.finite("from_fn")
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros([n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::ONE;
        }
        t
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

    /// Raw mutable access. Callers are responsible for keeping elements finite.
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn precision(&self) -> Precision {
        T::PRECISION
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub(crate) fn finite(self, op: &'static str) -> Result<Self> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(self)
        } else {
            Err(Error::NonFinite { op })
        }
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        self.clone().into_reshape(shape)
    }

    pub fn into_reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        check_shape(&shape)?;
        if numel(&shape) != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        Ok(Tensor {
            shape,
            data: self.data,
        })
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank {
            return Err(Error::shape("permute", &self.shape, axes));
        }
        for &a in axes {
            if a >= rank || seen[a] {
                return Err(Error::shape("permute", &self.shape, axes));
            }
            seen[a] = true;
        }
        let in_strides = strides(&self.shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let moved_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let mut data = Vec::with_capacity(self.data.len());
        let mut index = vec![0usize; rank];
        let mut offset = 0usize;
        for _ in 0..self.data.len() {
            data.push(self.data[offset]);
            // odometer increment over the output index
            for ax in (0..rank).rev() {
                index[ax] += 1;
                offset += moved_strides[ax];
                if index[ax] < out_shape[ax] {
                    break;
                }
                offset -= moved_strides[ax] * out_shape[ax];
                index[ax] = 0;
            }
        }
        Ok(Tensor {
            shape: out_shape,
            data,
        })
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Self> {
        let rank = self.rank();
        if rank < 2 {
            return Err(Error::Axis {
                op: "transpose",
                axis: 1,
                rank,
            });
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(&axes)
    }

    /// Batched matrix product `[..., m, k] x [..., k, n] -> [..., m, n]`.
    /// Batch dimensions must match exactly.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (a, b) = (&self.shape, &other.shape);
        if a.len() < 2 || a.len() != b.len() || a[..a.len() - 2] != b[..b.len() - 2] {
            return Err(Error::shape("matmul", a, b));
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
        if k != k2 {
            return Err(Error::shape("matmul", a, b));
        }
        let batch: usize = a[..a.len() - 2].iter().product();
        let mut out = vec![T::ZERO; batch * m * n];
        for bi in 0..batch {
            matmul_kernel(
                &self.data[bi * m * k..(bi + 1) * m * k],
                &other.data[bi * k * n..(bi + 1) * k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = a[..a.len() - 2].to_vec();
        shape.extend([m, n]);
        Tensor { shape, data: out }.finite("matmul")
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor {
            shape: self.shape.clone(),
            data,
        }
        .finite(op)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |x, y| x + y)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "mul", |x, y| x * y)
    }

    pub fn map(&self, op: &'static str, f: impl Fn(T) -> T) -> Result<Self> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
        .finite(op)
    }

    pub fn scale(&self, s: T) -> Result<Self> {
        self.map("scale", |x| x * s)
    }

    /// Adds a `[D]` row to every slice along the last axis.
    pub fn add_row(&self, row: &Self) -> Result<Self> {
        let d = self.last_dim();
        if row.shape != [d] {
            return Err(Error::shape("add_row", &self.shape, &row.shape));
        }
        let mut data = self.data.clone();
        for chunk in data.chunks_exact_mut(d) {
            for (x, &r) in chunk.iter_mut().zip(&row.data) {
                *x += r;
            }
        }
        Tensor {
            shape: self.shape.clone(),
            data,
        }
        .finite("add_row")
    }

    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_f64(self.data.len() as f64)
    }

    pub fn min(&self) -> T {
        self.data.iter().copied().fold(self.data[0], T::min)
    }

    pub fn max(&self) -> T {
        self.data.iter().copied().fold(self.data[0], T::max)
    }

    pub fn min_max(&self) -> (T, T) {
        (self.min(), self.max())
    }

    /// Sums over every axis except the last, giving a `[D]` tensor.
    pub fn sum_rows(&self) -> Self {
        let d = self.last_dim();
        let mut out = vec![T::ZERO; d];
        for chunk in self.data.chunks_exact(d) {
            for (o, &x) in out.iter_mut().zip(chunk) {
                *o += x;
            }
        }
        Tensor {
            shape: vec![d],
            data: out,
        }
    }

    /// Reduces along `axis`, removing it. A rank-1 input yields shape `[1]`.
    pub fn sum_axis(&self, axis: usize) -> Result<Self> {
        let (outer, len, inner) = self.axis_split("sum_axis", axis)?;
        let mut out = vec![T::ZERO; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] += self.data[base + i];
                }
            }
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Tensor { shape, data: out }.finite("sum_axis")
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Self> {
        let len = T::from_f64(self.shape.get(axis).copied().unwrap_or(1) as f64);
        self.sum_axis(axis)?.map("mean_axis", |x| x / len)
    }

    fn axis_split(&self, op: &'static str, axis: usize) -> Result<(usize, usize, usize)> {
        if axis >= self.rank() {
            return Err(Error::Axis {
                op,
                axis,
                rank: self.rank(),
            });
        }
        let outer = self.shape[..axis].iter().product();
        let inner = self.shape[axis + 1..].iter().product();
        Ok((outer, self.shape[axis], inner))
    }

    /// Numerically stable softmax along `axis` (max-subtracted).
    pub fn softmax(&self, axis: usize) -> Result<Self> {
        let (outer, len, inner) = self.axis_split("softmax", axis)?;
        let mut data = self.data.clone();
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                let mut max = data[at(0)];
                for a in 1..len {
                    max = max.max(data[at(a)]);
                }
                let mut total = T::ZERO;
                for a in 0..len {
                    let e = (data[at(a)] - max).exp();
                    data[at(a)] = e;
                    total += e;
                }
                for a in 0..len {
                    data[at(a)] = data[at(a)] / total;
                }
            }
        }
        Tensor {
            shape: self.shape.clone(),
            data,
        }
        .finite("softmax")
    }

    /// Layer normalization over the last axis followed by the affine map.
    pub fn layernorm(&self, gamma: &Self, beta: &Self, eps: f64) -> Result<Self> {
        Ok(self.layernorm_parts(gamma, beta, eps)?.0)
    }

    /// Returns `(output, normalized, mean, inv_std)`; the last two have one
    /// entry per row.
    pub(crate) fn layernorm_parts(
        &self,
        gamma: &Self,
        beta: &Self,
        eps: f64,
    ) -> Result<(Self, Self, Vec<T>, Vec<T>)> {
        if eps.is_nan() || eps <= 0.0 {
            return Err(Error::Config(format!(
                "layernorm eps must be > 0, got {eps}"
            )));
        }
        let d = self.last_dim();
        if gamma.shape != [d] || beta.shape != [d] {
            return Err(Error::shape("layernorm", &self.shape, &gamma.shape));
        }
        let rows = self.data.len() / d;
        let inv_d = T::from_f64(1.0 / d as f64);
        let eps = T::from_f64(eps);
        let mut normed = Vec::with_capacity(self.data.len());
        let mut out = Vec::with_capacity(self.data.len());
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for row in self.data.chunks_exact(d) {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() * inv_d;
            let rstd = T::ONE / (var + eps).sqrt();
            for (j, &x) in row.iter().enumerate() {
                let n = (x - mean) * rstd;
                normed.push(n);
                out.push(n * gamma.data[j] + beta.data[j]);
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let shape = self.shape.clone();
        Ok((
            Tensor {
                shape: shape.clone(),
                data: out,
            }
            .finite("layernorm")?,
            Tensor {
                shape,
                data: normed,
            }
            .finite("layernorm")?,
            means,
            rstds,
        ))
    }

    /// Exact GELU, `x * Phi(x)`.
    pub fn gelu(&self) -> Result<Self> {
        self.map("gelu", gelu)
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

#[inline]
fn matmul_kernel<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
// 1 / sqrt(2 pi)
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal CDF.
#[inline]
pub fn normal_cdf<T: Scalar>(x: T) -> T {
    T::from_f64(0.5) * (T::ONE + (x * T::from_f64(FRAC_1_SQRT_2)).erf())
}

/// Standard normal density.
#[inline]
pub fn normal_pdf<T: Scalar>(x: T) -> T {
    T::from_f64(INV_SQRT_2PI) * (T::from_f64(-0.5) * x * x).exp()
}

#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    x * normal_cdf(x)
}

/// d/dx of [`gelu`]: `Phi(x) + x * phi(x)`.
#[inline]
pub fn gelu_derivative<T: Scalar>(x: T) -> T {
    normal_cdf(x) + x * normal_pdf(x)
}
