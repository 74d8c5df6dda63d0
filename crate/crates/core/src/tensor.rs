//! Dense row-major tensors and the primitive operations the rest of the crate builds on.
//!
//! Tensors own contiguous storage; there are no strided views, so every reshape or
//! permutation produces a fresh buffer.

use std::fmt;

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;

/// Extents of a tensor. Never empty, every extent at least one.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Shape(pub(crate) Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.is_empty() {
            return Err(Error::InvalidShape("shape must have at least one axis".into()));
        }
        if let Some(pos) = dims.iter().position(|&d| d == 0) {
            return Err(Error::InvalidShape(format!(
                "extent at axis {pos} is zero in {dims:?}"
            )));
        }
        Ok(Shape(dims))
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

    /// `(outer, len, inner)` split around `axis`.
    pub(crate) fn split_at_axis(&self, axis: usize) -> (usize, usize, usize) {
        let outer = self.0[..axis].iter().product();
        let inner = self.0[axis + 1..].iter().product();
        (outer, self.0[axis], inner)
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

/// Dense n-dimensional array of reals.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?}[{} elements]", self.shape, self.data.len())
        }
    }
}

impl<T: Scalar> Tensor<T> {
    /// Builds a tensor, validating extents and finiteness.
    pub fn new(dims: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != data.len() {
            return Err(Error::InvalidShape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                shape.numel(),
                data.len()
            )));
        }
        let t = Tensor { shape, data };
        t.check_finite("Tensor::new")?;
        Ok(t)
    }

    /// Internal constructor for buffers whose length is known to match.
    pub(crate) fn from_parts(shape: Shape, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(dims: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(dims, T::zero())
    }

    pub fn full(dims: impl Into<Vec<usize>>, value: T) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let n = shape.numel();
        Ok(Tensor {
            shape,
            data: vec![value; n],
        })
    }

    pub fn from_fn(dims: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let data = (0..shape.numel()).map(&mut f).collect();
        let t = Tensor { shape, data };
        t.check_finite("Tensor::from_fn")?;
        Ok(t)
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Shape(vec![1]),
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Result<Self> {
        Self::from_fn([n, n], |k| if k / n == k % n { T::one() } else { T::zero() })
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn rank(&self) -> usize {
        self.shape.rank()
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

    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Element at a multi-index.
    pub fn at(&self, idx: &[usize]) -> T {
        assert_eq!(idx.len(), self.rank(), "index rank");
        let mut flat = 0;
        for (&i, &d) in idx.iter().zip(self.dims()) {
            assert!(i < d, "index {i} out of bounds for extent {d}");
            flat = flat * d + i;
        }
        self.data[flat]
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    pub fn reshape(self, dims: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != self.len() {
            return shape_err(
                "reshape",
                format!("cannot reshape {:?} into {:?}", self.shape, shape),
            );
        }
        Ok(Tensor {
            shape,
            data: self.data,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|x| U::from_f64_lossy(x.to_f64_lossy()))
                .collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Result<Self> {
        let out = Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        };
        out.check_finite("map")?;
        Ok(out)
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return shape_err(op, format!("{:?} vs {:?}", self.shape, other.shape));
        }
        let out = Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        };
        out.check_finite(op)?;
        Ok(out)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn relu(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| x.max(T::zero())).collect(),
        }
    }

    pub fn sum_all(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &x| acc + x)
    }

    fn check_axis(&self, axis: usize, op: &'static str) -> Result<()> {
        if axis >= self.rank() {
            return shape_err(op, format!("axis {axis} out of range for rank {}", self.rank()));
        }
        Ok(())
    }

    /// Sums along `axis`, removing it. A rank-1 input reduces to shape `[1]`.
    pub fn reduce_sum(&self, axis: usize) -> Result<Self> {
        self.check_axis(axis, "reduce_sum")?;
        let t = self.sum_axis(axis);
        t.check_finite("reduce_sum")?;
        Ok(t)
    }

    /// [`Tensor::reduce_sum`] without the axis and finiteness checks.
    pub(crate) fn sum_axis(&self, axis: usize) -> Self {
        let (outer, len, inner) = self.shape.split_at_axis(axis);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let src = &self.data[(o * len + k) * inner..(o * len + k + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = *d + s;
                }
            }
        }
        let mut dims: Vec<usize> = self.dims().to_vec();
        dims.remove(axis);
        if dims.is_empty() {
            dims.push(1);
        }
        Tensor::from_parts(Shape(dims), out)
    }

    /// Exponent-normalizes along `axis` with max subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Self> {
        self.check_axis(axis, "softmax")?;
        let (outer, len, inner) = self.shape.split_at_axis(axis);
        let mut out = self.data.clone();
        if inner == 1 {
            for row in out.chunks_exact_mut(len) {
                softmax_in_place(row);
            }
        } else {
            let mut buf = vec![T::zero(); len];
            for o in 0..outer {
                for i in 0..inner {
                    for k in 0..len {
                        buf[k] = out[(o * len + k) * inner + i];
                    }
                    softmax_in_place(&mut buf);
                    for k in 0..len {
                        out[(o * len + k) * inner + i] = buf[k];
                    }
                }
            }
        }
        let t = Tensor::from_parts(self.shape.clone(), out);
        t.check_finite("softmax")?;
        Ok(t)
    }

    /// 2-D matrix product.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 {
            return shape_err(
                "matmul",
                format!("expected rank-2 operands, got {:?} and {:?}", self.shape, other.shape),
            );
        }
        let (m, k) = (self.dims()[0], self.dims()[1]);
        let (k2, n) = (other.dims()[0], other.dims()[1]);
        if k != k2 {
            return shape_err("matmul", format!("inner dims {k} vs {k2}"));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_into(&self.data, &other.data, &mut out, m, k, n);
        let t = Tensor::from_parts(Shape(vec![m, n]), out);
        t.check_finite("matmul")?;
        Ok(t)
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Result<Self> {
        if self.rank() != 2 {
            return shape_err("transpose", format!("expected rank 2, got {:?}", self.shape));
        }
        self.permute(&[1, 0])
    }

    /// General axis permutation: output axis `k` is input axis `perm[k]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return shape_err("permute", format!("{perm:?} is not a permutation of rank {rank}"));
        }
        let dims: Vec<usize> = perm.iter().map(|&p| self.dims()[p]).collect();
        let data = permute_data(&self.data, self.dims(), perm);
        Ok(Tensor::from_parts(Shape(dims), data))
    }

    /// Largest absolute elementwise difference; panics on shape mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape");
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }
}

/// Row softmax with max subtraction; shared by every code path that normalizes.
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum = sum + *x;
    }
    for x in row.iter_mut() {
        *x = *x / sum;
    }
}

/// `out[m×n] = a[m×k] · b[k×n]`, accumulating over `k` in ascending order.
pub fn matmul_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        row.iter_mut().for_each(|x| *x = T::zero());
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + aip * bv;
            }
        }
    }
}

pub(crate) fn permute_data<T: Copy>(data: &[T], dims: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = dims.len();
    let mut in_strides = vec![1usize; rank];
    for k in (0..rank.saturating_sub(1)).rev() {
        in_strides[k] = in_strides[k + 1] * dims[k + 1];
    }
    let out_dims: Vec<usize> = perm.iter().map(|&p| dims[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for k in (0..rank).rev() {
            idx[k] += 1;
            offset += strides[k];
            if idx[k] < out_dims[k] {
                break;
            }
            offset -= strides[k] * out_dims[k];
            idx[k] = 0;
        }
    }
    out
}

/// Inverse of a permutation.
pub(crate) fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (k, &p) in perm.iter().enumerate() {
        inv[p] = k;
    }
    inv
}
