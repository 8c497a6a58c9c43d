//! Dense row-major f64 tensors and the small amount of direct linear
//! algebra (Cholesky, triangular solves) the rest of the crate builds on.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Dense tensor: shape plus row-major 64-bit values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != values.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} wants {} values, got {}",
                shape,
                expect,
                values.len()
            )));
        }
        Ok(Tensor { shape, values })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], values: vec![v] }
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Tensor { shape: vec![values.len()], values }
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], values)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape, values: vec![0.0; n] }
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Tensor { shape: other.shape.clone(), values: vec![0.0; other.values.len()] }
    }

    pub fn identity(n: usize) -> Self {
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            values[i * n + i] = 1.0;
        }
        Tensor { shape: vec![n, n], values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// A length-one tensor broadcasts against anything elementwise.
    pub fn is_scalar(&self) -> bool {
        self.values.len() == 1
    }

    pub fn scalar_value(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.values[0]
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols() + j]
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Dense matrix-matrix / matrix-vector product on flat storage.
/// `a` is m x k; `b` is either k x n (result m x n) or a k-vector (result m-vector).
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if !a.is_matrix() {
        return Err(Error::ShapeMismatch("matmul lhs must be a matrix".into()));
    }
    let (m, k) = (a.rows(), a.cols());
    match b.shape.len() {
        1 => {
            if b.len() != k {
                return Err(Error::ShapeMismatch(format!(
                    "matmul: lhs cols {} vs vector len {}",
                    k,
                    b.len()
                )));
            }
            let mut out = vec![0.0; m];
            for i in 0..m {
                let row = &a.values[i * k..(i + 1) * k];
                let mut acc = 0.0;
                for (av, bv) in row.iter().zip(b.values.iter()) {
                    acc += av * bv;
                }
                out[i] = acc;
            }
            Ok(Tensor::vector(out))
        }
        2 => {
            if b.rows() != k {
                return Err(Error::ShapeMismatch(format!(
                    "matmul: {}x{} times {}x{}",
                    m,
                    k,
                    b.rows(),
                    b.cols()
                )));
            }
            let n = b.cols();
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for l in 0..k {
                    let av = a.values[i * k + l];
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &b.values[l * n..(l + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for (o, bv) in orow.iter_mut().zip(brow.iter()) {
                        *o += av * bv;
                    }
                }
            }
            Tensor::matrix(m, n, out)
        }
        _ => Err(Error::ShapeMismatch("matmul rhs must be vector or matrix".into())),
    }
}

/// In-place lower Cholesky of a symmetric matrix stored row-major.
/// Returns the failing pivot index on a non-positive pivot.
fn cholesky_raw(n: usize, a: &mut [f64]) -> std::result::Result<(), usize> {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(j);
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    // zero the upper triangle so the factor is exactly lower triangular
    for i in 0..n {
        for j in (i + 1)..n {
            a[i * n + j] = 0.0;
        }
    }
    Ok(())
}

/// Lower Cholesky factor of a symmetric positive-definite matrix.
///
/// On a failed pivot, adds jitter `1e-8 * mean(diag)` to the diagonal once
/// and retries before signalling `NotPositiveDefinite`.
pub fn cholesky(a: &Tensor) -> Result<Tensor> {
    if !a.is_matrix() || a.rows() != a.cols() {
        return Err(Error::ShapeMismatch("cholesky needs a square matrix".into()));
    }
    let n = a.rows();
    // symmetrize so the factorization (and its adjoint) treat both triangles
    let mut sym = a.values.clone();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a.values[i * n + j] + a.values[j * n + i]);
            sym[i * n + j] = v;
            sym[j * n + i] = v;
        }
    }
    let mut work = sym.clone();
    match cholesky_raw(n, &mut work) {
        Ok(()) => return Tensor::matrix(n, n, work),
        Err(_) => {}
    }
    let mean_diag = (0..n).map(|i| a.values[i * n + i]).sum::<f64>() / n as f64;
    let jitter = 1e-8 * mean_diag;
    work.copy_from_slice(&sym);
    for i in 0..n {
        work[i * n + i] += jitter;
    }
    match cholesky_raw(n, &mut work) {
        Ok(()) => Tensor::matrix(n, n, work),
        Err(pivot) => Err(Error::NotPositiveDefinite { pivot }),
    }
}

/// Solve L x = b for lower-triangular L.
pub fn solve_lower(l: &Tensor, b: &[f64]) -> Result<Vec<f64>> {
    let n = l.rows();
    if b.len() != n {
        return Err(Error::ShapeMismatch(format!("solve_lower: {} vs {}", n, b.len())));
    }
    let mut x = b.to_vec();
    for i in 0..n {
        let mut s = x[i];
        for k in 0..i {
            s -= l.values[i * n + k] * x[k];
        }
        x[i] = s / l.values[i * n + i];
    }
    Ok(x)
}

/// Solve L^T x = b for lower-triangular L.
pub fn solve_lower_transpose(l: &Tensor, b: &[f64]) -> Result<Vec<f64>> {
    let n = l.rows();
    if b.len() != n {
        return Err(Error::ShapeMismatch(format!("solve_lower_transpose: {} vs {}", n, b.len())));
    }
    let mut x = b.to_vec();
    for i in (0..n).rev() {
        let mut s = x[i];
        for k in (i + 1)..n {
            s -= l.values[k * n + i] * x[k];
        }
        x[i] = s / l.values[i * n + i];
    }
    Ok(x)
}

/// Solve A x = b through an already-computed lower Cholesky factor of A.
pub fn solve_spd(l: &Tensor, b: &[f64]) -> Result<Vec<f64>> {
    let y = solve_lower(l, b)?;
    solve_lower_transpose(l, &y)
}

/// log det A = 2 * sum log diag(L) for A = L L^T.
pub fn log_det_from_factor(l: &Tensor) -> f64 {
    let n = l.rows();
    2.0 * (0..n).map(|i| l.values[i * n + i].ln()).sum::<f64>()
}
