//! Dense row-major tensors and the handful of kernels the rest of the crate
//! is built on: reshaping, axis permutation, pairwise contraction and the
//! Khatri-Rao product. Matrix factorizations live in [`linalg`].

mod linalg;

use rand::Rng;

use crate::error::{Error, Result};

pub use linalg::{solve_least_squares, truncated_svd, SvdResult};

/// Row-major multidimensional array of `f64` (last index fastest).
#[derive(Clone, Debug, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn checked_numel(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::shape("tensor must have at least one axis"));
    }
    if shape.contains(&0) {
        return Err(Error::shape(format!("zero extent in shape {shape:?}")));
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::shape(format!("shape {shape:?} overflows")))
}

pub(crate) fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

impl DenseTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n = checked_numel(&shape)?;
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let n = checked_numel(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        })
    }

    /// Builds a tensor by evaluating `f` at every multi-index in row-major order.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Result<Self> {
        let n = checked_numel(shape)?;
        let mut data = Vec::with_capacity(n);
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..n {
            data.push(f(&idx));
            for ax in (0..shape.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Uniform draw in `[lo, hi)` for every element.
    pub fn random_uniform<R: Rng + ?Sized>(
        shape: &[usize],
        lo: f64,
        hi: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let n = checked_numel(shape)?;
        let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn eye(n: usize) -> Result<Self> {
        Self::from_fn(&[n, n], |i| if i[0] == i[1] { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn order(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn strides(&self) -> Vec<usize> {
        row_major_strides(&self.shape)
    }

    fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        for (ax, (&i, &d)) in idx.iter().zip(&self.shape).enumerate() {
            debug_assert!(i < d, "index {i} out of bounds for axis {ax}");
            off = off * d + i;
        }
        off
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: f64) {
        let off = self.offset(idx);
        self.data[off] = value;
    }

    /// Number of rows of a 2-d tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Number of columns of a 2-d tensor.
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.sq_norm().sqrt()
    }

    pub fn scale(&self, alpha: f64) -> DenseTensor {
        DenseTensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * alpha).collect(),
        }
    }

    pub fn sub(&self, other: &DenseTensor) -> Result<DenseTensor> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "cannot subtract {:?} from {:?}",
                other.shape, self.shape
            )));
        }
        Ok(DenseTensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        })
    }

    /// `‖self − other‖_F`
    pub fn distance(&self, other: &DenseTensor) -> Result<f64> {
        Ok(self.sub(other)?.frobenius_norm())
    }

    pub fn reshape(&self, new_shape: &[usize]) -> Result<DenseTensor> {
        self.clone().into_reshape(new_shape)
    }

    /// Relabels the shape without touching the data.
    pub fn into_reshape(mut self, new_shape: &[usize]) -> Result<DenseTensor> {
        let n = checked_numel(new_shape)?;
        if n != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {new_shape:?}",
                self.shape
            )));
        }
        self.shape = new_shape.to_vec();
        Ok(self)
    }

    /// Reorders axes so that output axis `j` is input axis `axes[j]`.
    pub fn permute(&self, axes: &[usize]) -> Result<DenseTensor> {
        let m = self.order();
        let mut seen = vec![false; m];
        if axes.len() != m
            || axes
                .iter()
                .any(|&a| a >= m || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::shape(format!(
                "{axes:?} is not a permutation of 0..{m}"
            )));
        }
        let in_strides = self.strides();
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let gather: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let mut data = Vec::with_capacity(self.data.len());
        let mut idx = vec![0usize; m];
        let mut src = 0usize;
        for _ in 0..self.data.len() {
            data.push(self.data[src]);
            for ax in (0..m).rev() {
                idx[ax] += 1;
                src += gather[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                src -= gather[ax] * out_shape[ax];
                idx[ax] = 0;
            }
        }
        Ok(DenseTensor {
            shape: out_shape,
            data,
        })
    }

    /// 2-d transpose.
    pub fn transpose(&self) -> Result<DenseTensor> {
        if self.order() != 2 {
            return Err(Error::shape("transpose needs a 2-d tensor"));
        }
        self.permute(&[1, 0])
    }

    /// 2-d matrix product.
    pub fn matmul(&self, other: &DenseTensor) -> Result<DenseTensor> {
        if self.order() != 2 || other.order() != 2 || self.cols() != other.rows() {
            return Err(Error::shape(format!(
                "cannot multiply {:?} by {:?}",
                self.shape, other.shape
            )));
        }
        let (m, k, n) = (self.rows(), self.cols(), other.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[p * n..(p + 1) * n];
                for (o, b) in row.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        DenseTensor::new(vec![m, n], out)
    }

    /// Copy of column `j` of a 2-d tensor.
    pub fn column(&self, j: usize) -> Vec<f64> {
        let c = self.cols();
        (0..self.rows()).map(|i| self.data[i * c + j]).collect()
    }
}

/// Sums over paired axes of `a` and `b`. The result carries the free axes of
/// `a` followed by the free axes of `b`; contracting every axis gives a `[1]`
/// tensor holding the scalar.
pub fn contract(
    a: &DenseTensor,
    b: &DenseTensor,
    axes_a: &[usize],
    axes_b: &[usize],
) -> Result<DenseTensor> {
    if axes_a.len() != axes_b.len() {
        return Err(Error::shape("contraction axis lists differ in length"));
    }
    let check = |t: &DenseTensor, axes: &[usize]| -> Result<()> {
        let mut seen = vec![false; t.order()];
        for &ax in axes {
            if ax >= t.order() || std::mem::replace(&mut seen[ax], true) {
                return Err(Error::shape(format!(
                    "bad contraction axes {axes:?} for {:?}",
                    t.shape
                )));
            }
        }
        Ok(())
    };
    check(a, axes_a)?;
    check(b, axes_b)?;
    for (&x, &y) in axes_a.iter().zip(axes_b) {
        if a.shape[x] != b.shape[y] {
            return Err(Error::shape(format!(
                "axis {x} of {:?} does not match axis {y} of {:?}",
                a.shape, b.shape
            )));
        }
    }
    let free_a: Vec<usize> = (0..a.order()).filter(|ax| !axes_a.contains(ax)).collect();
    let free_b: Vec<usize> = (0..b.order()).filter(|ax| !axes_b.contains(ax)).collect();
    let k: usize = axes_a.iter().map(|&ax| a.shape[ax]).product();
    let fa: usize = free_a.iter().map(|&ax| a.shape[ax]).product();
    let fb: usize = free_b.iter().map(|&ax| b.shape[ax]).product();

    let perm_a: Vec<usize> = free_a.iter().chain(axes_a).copied().collect();
    let perm_b: Vec<usize> = axes_b.iter().chain(&free_b).copied().collect();
    let am = a.permute(&perm_a)?.into_reshape(&[fa, k])?;
    let bm = b.permute(&perm_b)?.into_reshape(&[k, fb])?;
    let prod = am.matmul(&bm)?;

    let mut out_shape: Vec<usize> = free_a.iter().map(|&ax| a.shape[ax]).collect();
    out_shape.extend(free_b.iter().map(|&ax| b.shape[ax]));
    if out_shape.is_empty() {
        out_shape.push(1);
    }
    prod.into_reshape(&out_shape)
}

/// Column-wise Kronecker product. Row index of the first matrix varies
/// slowest, so `[a; b] ⊙ [c; d] = [ac; ad; bc; bd]`.
pub fn khatri_rao(mats: &[&DenseTensor]) -> Result<DenseTensor> {
    let first = mats
        .first()
        .ok_or_else(|| Error::shape("khatri_rao needs at least one matrix"))?;
    if mats.iter().any(|m| m.order() != 2) {
        return Err(Error::shape("khatri_rao inputs must be 2-d"));
    }
    let r = first.cols();
    if let Some(bad) = mats.iter().find(|m| m.cols() != r) {
        return Err(Error::shape(format!(
            "khatri_rao column mismatch: {r} vs {}",
            bad.cols()
        )));
    }
    let mut acc = (*first).clone();
    for m in &mats[1..] {
        let (ra, rb) = (acc.rows(), m.rows());
        let mut data = vec![0.0; ra * rb * r];
        for i in 0..ra {
            for j in 0..rb {
                let row = (i * rb + j) * r;
                for c in 0..r {
                    data[row + c] = acc.data[i * r + c] * m.data[j * r + c];
                }
            }
        }
        acc = DenseTensor::new(vec![ra * rb, r], data)?;
    }
    Ok(acc)
}
