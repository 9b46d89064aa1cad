//! Dense float64 tensors in row-major order.
//!
//! This is the value type shared by the autodiff graph and the plain
//! (non-recorded) evaluation paths used for sampling and inversion.

use crate::error::{FunnelError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length must match shape product"
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn full(shape: Vec<usize>, v: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![v; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() requires a scalar tensor");
        self.data[0]
    }

    /// Size of the last axis; 1 for a true scalar.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    /// Number of rows when the tensor is viewed as [rows, last_dim].
    pub fn row_count(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.data.len() / self.last_dim()
        }
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.data.len(),
            "reshape must preserve element count"
        );
        Tensor { shape, data: self.data.clone() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape, other.shape, "zip requires equal shapes");
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.zip(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        self.zip(other, |a, b| a * b)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Matrix product of [r, k] and [k, c].
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let (r, k) = (self.shape[0], self.shape[1]);
        let (k2, c) = (other.shape[0], other.shape[1]);
        assert_eq!(k, k2, "matmul inner dimensions must agree");
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let arow = &self.data[i * k..(i + 1) * k];
            let orow = &mut out[i * c..(i + 1) * c];
            for (l, &a) in arow.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[l * c..(l + 1) * c];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Tensor::matrix(r, c, out)
    }

    /// self^T * other, for [k, r]^T x [k, c].
    pub fn matmul_tn(&self, other: &Tensor) -> Tensor {
        let (k, r) = (self.shape[0], self.shape[1]);
        let (k2, c) = (other.shape[0], other.shape[1]);
        assert_eq!(k, k2, "matmul_tn inner dimensions must agree");
        let mut out = vec![0.0; r * c];
        for l in 0..k {
            let arow = &self.data[l * r..(l + 1) * r];
            let brow = &other.data[l * c..(l + 1) * c];
            for (i, &a) in arow.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let orow = &mut out[i * c..(i + 1) * c];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Tensor::matrix(r, c, out)
    }

    /// self * other^T, for [r, k] x [c, k]^T.
    pub fn matmul_nt(&self, other: &Tensor) -> Tensor {
        let (r, k) = (self.shape[0], self.shape[1]);
        let (c, k2) = (other.shape[0], other.shape[1]);
        assert_eq!(k, k2, "matmul_nt inner dimensions must agree");
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let arow = &self.data[i * k..(i + 1) * k];
            for j in 0..c {
                let brow = &other.data[j * k..(j + 1) * k];
                out[i * c + j] = arow.iter().zip(brow).map(|(&a, &b)| a * b).sum();
            }
        }
        Tensor::matrix(r, c, out)
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::matrix(c, r, out)
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self) -> Tensor {
        let d = self.last_dim();
        let mut out = self.data.clone();
        for row in out.chunks_mut(d) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        Tensor { shape: self.shape.clone(), data: out }
    }

    /// Slice of the last axis: columns [start, start+len).
    pub fn slice_last(&self, start: usize, len: usize) -> Tensor {
        let d = self.last_dim();
        assert!(start + len <= d, "slice_last out of range");
        let rows = self.row_count();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&self.data[r * d + start..r * d + start + len]);
        }
        let mut shape = self.shape.clone();
        *shape.last_mut().unwrap() = len;
        Tensor { shape, data }
    }

    /// Concatenation along the last axis; all operands must share row count.
    pub fn concat_last(parts: &[&Tensor]) -> Tensor {
        assert!(!parts.is_empty());
        let rows = parts[0].row_count();
        let total: usize = parts.iter().map(|p| p.last_dim()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                assert_eq!(p.row_count(), rows, "concat_last row counts must agree");
                let d = p.last_dim();
                data.extend_from_slice(&p.data[r * d..(r + 1) * d]);
            }
        }
        let mut shape = parts[0].shape.clone();
        *shape.last_mut().unwrap() = total;
        Tensor { shape, data }
    }

    /// Per-row gather along the last axis. An index of -1 yields 0.
    pub fn gather_last(&self, indices: &[i64]) -> Tensor {
        let d = self.last_dim();
        let rows = self.row_count();
        let mut data = Vec::with_capacity(rows * indices.len());
        for r in 0..rows {
            let row = &self.data[r * d..(r + 1) * d];
            for &ix in indices {
                if ix < 0 {
                    data.push(0.0);
                } else {
                    data.push(row[ix as usize]);
                }
            }
        }
        let mut shape = self.shape.clone();
        *shape.last_mut().unwrap() = indices.len();
        Tensor { shape, data }
    }

    pub fn softplus(x: f64) -> f64 {
        // numerically stable ln(1 + e^x)
        if x > 30.0 {
            x
        } else if x < -30.0 {
            x.exp()
        } else {
            x.exp().ln_1p()
        }
    }

    pub fn sigmoid(x: f64) -> f64 {
        if x >= 0.0 {
            1.0 / (1.0 + (-x).exp())
        } else {
            let e = x.exp();
            e / (1.0 + e)
        }
    }
}

/// Solve L y = b for unit-diagonal lower-triangular L.
pub fn solve_unit_lower(l: &Tensor, b: &[f64]) -> Vec<f64> {
    let n = l.shape[0];
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for j in 0..i {
            s -= l.data[i * n + j] * y[j];
        }
        y[i] = s;
    }
    y
}

/// Solve U x = b for upper-triangular U with nonzero diagonal.
pub fn solve_upper(u: &Tensor, b: &[f64]) -> Result<Vec<f64>> {
    let n = u.shape[0];
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = b[i];
        for j in i + 1..n {
            s -= u.data[i * n + j] * x[j];
        }
        let d = u.data[i * n + i];
        if d == 0.0 {
            return Err(FunnelError::Domain("singular upper-triangular matrix".into()));
        }
        x[i] = s / d;
    }
    Ok(x)
}

/// LU factorization with partial pivoting for small dense matrices.
/// Returns (lu, perm, sign) where lu packs L (unit diag) and U.
pub fn lu_factor(a: &Tensor) -> Result<(Tensor, Vec<usize>, f64)> {
    let n = a.shape[0];
    let mut lu = a.clone();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut sign = 1.0;
    for k in 0..n {
        let mut p = k;
        let mut best = lu.data[k * n + k].abs();
        for i in k + 1..n {
            let v = lu.data[i * n + k].abs();
            if v > best {
                best = v;
                p = i;
            }
        }
        if best == 0.0 {
            return Err(FunnelError::Domain("singular matrix in LU factorization".into()));
        }
        if p != k {
            for j in 0..n {
                lu.data.swap(k * n + j, p * n + j);
            }
            perm.swap(k, p);
            sign = -sign;
        }
        let pivot = lu.data[k * n + k];
        for i in k + 1..n {
            let f = lu.data[i * n + k] / pivot;
            lu.data[i * n + k] = f;
            for j in k + 1..n {
                lu.data[i * n + j] -= f * lu.data[k * n + j];
            }
        }
    }
    Ok((lu, perm, sign))
}

/// Solve A x = b using a packed LU factorization from [`lu_factor`].
pub fn lu_solve(lu: &Tensor, perm: &[usize], b: &[f64]) -> Vec<f64> {
    let n = lu.shape[0];
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[perm[i]];
        for j in 0..i {
            s -= lu.data[i * n + j] * y[j];
        }
        y[i] = s;
    }
    for i in (0..n).rev() {
        let mut s = y[i];
        for j in i + 1..n {
            s -= lu.data[i * n + j] * y[j];
        }
        y[i] = s / lu.data[i * n + i];
    }
    y
}

/// log|det A| and sign via LU with partial pivoting.
pub fn log_abs_det(a: &Tensor) -> Result<(f64, f64)> {
    let n = a.shape[0];
    let (lu, _, mut sign) = lu_factor(a)?;
    let mut ld = 0.0;
    for i in 0..n {
        let d = lu.data[i * n + i];
        ld += d.abs().ln();
        if d < 0.0 {
            sign = -sign;
        }
    }
    Ok((ld, sign))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let i = Tensor::eye(2);
        assert_eq!(a.matmul(&i).data, a.data);
    }

    #[test]
    fn matmul_transposed_variants_agree() {
        let a = Tensor::matrix(3, 2, vec![1.0, -2.0, 0.5, 4.0, 3.0, 1.0]);
        let b = Tensor::matrix(2, 4, vec![2.0, 1.0, 0.0, -1.0, 3.0, 0.5, 1.0, 2.0]);
        let ab = a.matmul(&b);
        assert_eq!(a.transpose().matmul_tn(&b).data, ab.data);
        assert_eq!(a.matmul_nt(&b.transpose()).data, ab.data);
    }

    #[test]
    fn softmax_symmetry() {
        let t = Tensor::vector(vec![0.0, 0.0, 0.0]).softmax_last();
        for v in t.data {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softplus_at_zero() {
        assert!((Tensor::softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn slice_concat_roundtrip() {
        let t = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let a = t.slice_last(0, 1);
        let b = t.slice_last(1, 2);
        assert_eq!(Tensor::concat_last(&[&a, &b]).data, t.data);
    }

    #[test]
    fn gather_with_padding() {
        let t = Tensor::matrix(1, 3, vec![10.0, 20.0, 30.0]);
        let g = t.gather_last(&[2, -1, 0]);
        assert_eq!(g.data, vec![30.0, 0.0, 10.0]);
    }

    #[test]
    fn lu_solve_recovers() {
        let a = Tensor::matrix(3, 3, vec![4.0, 1.0, 2.0, 1.0, 3.0, 0.5, 2.0, 0.5, 5.0]);
        let x = vec![1.0, -2.0, 0.5];
        let b: Vec<f64> = (0..3)
            .map(|i| (0..3).map(|j| a.data[i * 3 + j] * x[j]).sum())
            .collect();
        let (lu, perm, _) = lu_factor(&a).unwrap();
        let got = lu_solve(&lu, &perm, &b);
        for (g, e) in got.iter().zip(&x) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn log_abs_det_diagonal() {
        let a = Tensor::matrix(2, 2, vec![2.0, 0.0, 0.0, -0.5]);
        let (ld, sign) = log_abs_det(&a).unwrap();
        assert!(ld.abs() < 1e-14);
        assert_eq!(sign, -1.0);
    }
}
