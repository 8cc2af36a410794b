//! Dense row-major tensors and the raw (non-differentiable) kernels the
//! autodiff layer is built from.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Contiguous row-major n-dimensional array.
///
/// The buffer is reference counted: `clone` and `reshape` share storage, and
/// writes go through [`Tensor::data_mut`], which copies only when shared.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    strides
}

/// Trailing-dimension broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::Broadcast {
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside the broadcast shape `out` (0 on broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<isize> {
    let pad = out.len() - shape.len();
    let own = contiguous_strides(shape);
    (0..out.len())
        .map(|d| {
            if d < pad || shape[d - pad] == 1 {
                0
            } else {
                own[d - pad] as isize
            }
        })
        .collect()
}

/// Visits every index of `dims` in row-major order, passing the running
/// offsets into two strided operands.
fn walk2(dims: &[usize], sa: &[isize], sb: &[isize], mut f: impl FnMut(usize, isize, isize)) {
    let total = numel(dims);
    if total == 0 {
        return;
    }
    if dims.is_empty() {
        f(0, 0, 0);
        return;
    }
    let last = dims.len() - 1;
    let inner = dims[last];
    let (ia, ib) = (sa[last], sb[last]);
    let mut idx = vec![0usize; last];
    let (mut oa, mut ob) = (0isize, 0isize);
    let mut flat = 0usize;
    loop {
        let (mut pa, mut pb) = (oa, ob);
        for _ in 0..inner {
            f(flat, pa, pb);
            flat += 1;
            pa += ia;
            pb += ib;
        }
        // odometer over the outer axes
        let mut d = last;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < dims[d] {
                break;
            }
            oa -= sa[d] * dims[d] as isize;
            ob -= sb[d] * dims[d] as isize;
            idx[d] = 0;
        }
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let expected = numel(&shape);
        if expected != data.len() {
            return Err(Error::ElementCount {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Self {
            shape,
            data: Arc::new(vec![value; n]),
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self::full(Vec::new(), value)
    }

    /// Builds a tensor from its flat (row-major) index.
    pub fn from_fn(shape: impl Into<Vec<usize>>, f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let data = (0..numel(&shape)).map(f).collect();
        Self {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::of(v)).collect())
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

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn strides(&self) -> Vec<usize> {
        contiguous_strides(&self.shape)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable view of the buffer; copies first if the storage is shared.
    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data.to_vec()
    }

    pub fn into_vec(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    /// True when both tensors share the same storage allocation.
    pub fn shares_storage(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.data, &other.data)
    }

    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(Error::invalid(
                "item",
                format!("tensor of shape {:?} is not a scalar", self.shape),
            ));
        }
        Ok(self.data[0])
    }

    pub fn at(&self, index: &[usize]) -> T {
        debug_assert_eq!(index.len(), self.rank());
        let offset: usize = index
            .iter()
            .zip(self.strides())
            .map(|(i, s)| i * s)
            .sum();
        self.data[offset]
    }

    /// Same buffer under a new shape.
    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != self.numel() {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        Ok(Self {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, mut f: impl FnMut(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape("zip_map", &self.shape, &other.shape));
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Self {
            shape: self.shape.clone(),
            data: Arc::new(data),
        })
    }

    /// Elementwise combination under trailing-dimension broadcasting.
    pub fn broadcast_zip(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape == other.shape {
            return self.zip_map(other, f);
        }
        let out_shape = broadcast_shape(&self.shape, &other.shape)?;
        let (a, b) = (self.data(), other.data());
        let mut out = Vec::with_capacity(numel(&out_shape));
        if other.numel() == 1 && out_shape == self.shape {
            let s = b[0];
            out.extend(a.iter().map(|&x| f(x, s)));
        } else if self.numel() == 1 && out_shape == other.shape {
            let s = a[0];
            out.extend(b.iter().map(|&y| f(s, y)));
        } else {
            let sa = broadcast_strides(&self.shape, &out_shape);
            let sb = broadcast_strides(&other.shape, &out_shape);
            walk2(&out_shape, &sa, &sb, |_, oa, ob| {
                out.push(f(a[oa as usize], b[ob as usize]))
            });
        }
        Tensor::new(out_shape, out)
    }

    /// Sums a broadcast result back down to `shape` (the adjoint of broadcasting).
    pub fn sum_to_shape(&self, shape: &[usize]) -> Result<Self> {
        if self.shape == shape {
            return Ok(self.clone());
        }
        let out_shape = broadcast_shape(shape, &self.shape)?;
        if out_shape != self.shape {
            return Err(Error::shape("sum_to_shape", &self.shape, shape));
        }
        let mut out = vec![T::zero(); numel(shape)];
        let so = broadcast_strides(shape, &self.shape);
        let own: Vec<isize> = self.strides().iter().map(|&s| s as isize).collect();
        let src = self.data();
        walk2(&self.shape, &own, &so, |_, oi, oo| out[oo as usize] += src[oi as usize]);
        Tensor::new(shape.to_vec(), out)
    }

    /// Reduces the listed axes with `+`, keeping them as size-1 axes.
    pub fn sum_axes_keepdim(&self, axes: &[usize]) -> Result<Self> {
        let mut target = self.shape.clone();
        for &a in axes {
            if a >= self.rank() {
                return Err(Error::InvalidAxis {
                    op: "sum",
                    axis: a,
                    rank: self.rank(),
                });
            }
            target[a] = 1;
        }
        self.sum_to_shape(&target)
    }

    /// Materializes the axis permutation `axes` (output axis i = input axis axes[i]).
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        if axes.len() != self.rank() {
            return Err(Error::invalid(
                "permute",
                format!("{} axes for rank {}", axes.len(), self.rank()),
            ));
        }
        let mut seen = vec![false; axes.len()];
        for &a in axes {
            if a >= axes.len() || seen[a] {
                return Err(Error::invalid("permute", format!("invalid axes {axes:?}")));
            }
            seen[a] = true;
        }
        let strides = self.strides();
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let src_strides: Vec<isize> = axes.iter().map(|&a| strides[a] as isize).collect();
        let zeros = vec![0isize; axes.len()];
        let src = self.data();
        let mut out = Vec::with_capacity(self.numel());
        walk2(&out_shape, &src_strides, &zeros, |_, o, _| out.push(src[o as usize]));
        Tensor::new(out_shape, out)
    }

    /// Batched matrix product over the last two axes, optionally treating
    /// either operand as transposed. Batch axes broadcast.
    pub fn matmul_t(&self, trans_a: bool, other: &Self, trans_b: bool) -> Result<Self> {
        if self.rank() < 2 || other.rank() < 2 {
            return Err(Error::shape("matmul", &self.shape, &other.shape));
        }
        let (ra, rb) = (self.rank(), other.rank());
        let (am, ak) = (self.shape[ra - 2], self.shape[ra - 1]);
        let (bk, bn) = (other.shape[rb - 2], other.shape[rb - 1]);
        let (m, k) = if trans_a { (ak, am) } else { (am, ak) };
        let (k2, n) = if trans_b { (bn, bk) } else { (bk, bn) };
        if k != k2 {
            return Err(Error::shape("matmul", &self.shape, &other.shape));
        }
        let batch = broadcast_shape(&self.shape[..ra - 2], &other.shape[..rb - 2])?;
        let nb = numel(&batch);
        let mut out_shape = batch.clone();
        out_shape.extend([m, n]);
        let mut out = vec![T::zero(); nb * m * n];
        // matrix-local strides (row, col) of op(A) and op(B)
        let (rsa, csa) = if trans_a { (1, ak as isize) } else { (ak as isize, 1) };
        let (rsb, csb) = if trans_b { (1, bn as isize) } else { (bn as isize, 1) };
        let a = self.data();
        let b = other.data();

        // A single tall GEMM covers the common "tokens @ weight" case.
        if rb == 2 && !trans_a && nb > 0 {
            let rows = nb * m;
            if self.numel() == rows * k {
                unsafe {
                    T::gemm(
                        rows,
                        k,
                        n,
                        T::one(),
                        a.as_ptr(),
                        k as isize,
                        1,
                        b.as_ptr(),
                        rsb,
                        csb,
                        T::zero(),
                        out.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
                return Tensor::new(out_shape, out);
            }
        }

        let mut a_batch = self.shape[..ra - 2].to_vec();
        a_batch.extend([1, 1]);
        let mut b_batch = other.shape[..rb - 2].to_vec();
        b_batch.extend([1, 1]);
        let mut full_batch = batch.clone();
        full_batch.extend([1, 1]);
        let sa = broadcast_strides(&a_batch, &full_batch);
        let sb = broadcast_strides(&b_batch, &full_batch);
        let (mat_a, mat_b) = ((am * ak) as isize, (bk * bn) as isize);
        let sa: Vec<isize> = sa[..batch.len()].iter().map(|&s| s * mat_a).collect();
        let sb: Vec<isize> = sb[..batch.len()].iter().map(|&s| s * mat_b).collect();
        let mut offsets = Vec::with_capacity(nb);
        walk2(&batch, &sa, &sb, |_, oa, ob| offsets.push((oa as usize, ob as usize)));
        for (i, (oa, ob)) in offsets.into_iter().enumerate() {
            unsafe {
                T::gemm(
                    m,
                    k,
                    n,
                    T::one(),
                    a.as_ptr().add(oa),
                    rsa,
                    csa,
                    b.as_ptr().add(ob),
                    rsb,
                    csb,
                    T::zero(),
                    out.as_mut_ptr().add(i * m * n),
                    n as isize,
                    1,
                );
            }
        }
        Tensor::new(out_shape, out)
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        self.matmul_t(false, other, false)
    }

    pub fn sum_all(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        if self.shape != other.shape {
            return Err(Error::shape("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Converts the element type (e.g. f32 parameters into an f64 check).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| U::of(v.as_f64())).collect()),
        }
    }
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor<{}>{:?} [", std::any::type_name::<T>(), self.shape)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v:?}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}
