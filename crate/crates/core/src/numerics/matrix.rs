//! Dense row-major matrix with deterministic reductions.
//!
//! Every reduction fixes its summation order (inner index ascending) so that
//! repeated runs on the same inputs are bit-identical. There is no BLAS
//! backing on purpose: the sizes in this crate are desk-scale and the
//! reproducibility contract is worth more than throughput here.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense N x d matrix of finite `f64` values, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl DataMatrix {
    /// Builds a matrix from row-major values. Rejects empty shapes,
    /// mismatched lengths and non-finite entries.
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::shape(
                "DataMatrix::new",
                format!("shape {rows}x{cols} must be at least 1x1"),
            ));
        }
        if values.len() != rows * cols {
            return Err(Error::shape(
                "DataMatrix::new",
                format!(
                    "{} values provided for a {rows}x{cols} matrix",
                    values.len()
                ),
            ));
        }
        let m = DataMatrix { rows, cols, values };
        m.check_finite("DataMatrix::new")?;
        Ok(m)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "zero-sized matrix");
        DataMatrix {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = DataMatrix::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::shape("DataMatrix::from_rows", "no rows".to_string()));
        }
        let cols = rows[0].len();
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::shape(
                    "DataMatrix::from_rows",
                    format!("row {i} has {} entries, expected {cols}", r.len()),
                ));
            }
        }
        DataMatrix::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.values[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.values[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn transpose(&self) -> DataMatrix {
        let mut out = DataMatrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(c, r, self.get(r, c));
            }
        }
        out
    }

    /// Stacks `self` on top of `other` (column counts must match).
    pub fn vstack(&self, other: &DataMatrix) -> Result<DataMatrix> {
        if self.cols != other.cols {
            return Err(Error::shape(
                "DataMatrix::vstack",
                format!("{} vs {} columns", self.cols, other.cols),
            ));
        }
        let mut values = self.values.clone();
        values.extend_from_slice(&other.values);
        DataMatrix::new(self.rows + other.rows, self.cols, values)
    }

    /// New matrix containing the selected rows, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Result<DataMatrix> {
        if indices.is_empty() {
            return Err(Error::shape("DataMatrix::select_rows", "no rows selected"));
        }
        let mut values = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            if i >= self.rows {
                return Err(Error::shape(
                    "DataMatrix::select_rows",
                    format!("row index {i} out of {} rows", self.rows),
                ));
            }
            values.extend_from_slice(self.row(i));
        }
        DataMatrix::new(indices.len(), self.cols, values)
    }

    pub fn scale(&self, factor: f64) -> DataMatrix {
        let values = self.values.iter().map(|v| v * factor).collect();
        DataMatrix {
            rows: self.rows,
            cols: self.cols,
            values,
        }
    }

    pub fn add(&self, other: &DataMatrix) -> Result<DataMatrix> {
        self.zip_with(other, "DataMatrix::add", |a, b| a + b)
    }

    pub fn sub(&self, other: &DataMatrix) -> Result<DataMatrix> {
        self.zip_with(other, "DataMatrix::sub", |a, b| a - b)
    }

    fn zip_with(
        &self,
        other: &DataMatrix,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<DataMatrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::shape(
                op,
                format!(
                    "{}x{} vs {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            ));
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(DataMatrix {
            rows: self.rows,
            cols: self.cols,
            values,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite {
                context: context.to_string(),
            })
        }
    }
}

/// Standard matrix product with the inner summation index ascending, so the
/// result is bit-reproducible across runs.
pub fn matmul(a: &DataMatrix, b: &DataMatrix) -> Result<DataMatrix> {
    if a.cols() != b.rows() {
        return Err(Error::shape(
            "matmul",
            format!(
                "{}x{} times {}x{}",
                a.rows(),
                a.cols(),
                b.rows(),
                b.cols()
            ),
        ));
    }
    let mut out = DataMatrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut acc = 0.0;
            for k in 0..a.cols() {
                acc += a.get(i, k) * b.get(k, j);
            }
            out.set(i, j, acc);
        }
    }
    Ok(out)
}

/// Row-wise `softmax(temperature * row)` with per-row max subtraction for
/// overflow safety. Every output row sums to 1.
pub fn row_softmax(m: &DataMatrix, temperature: f64) -> Result<DataMatrix> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Parameter {
            name: "temperature",
            detail: format!("must be a positive finite real, got {temperature}"),
        });
    }
    let mut out = DataMatrix::zeros(m.rows(), m.cols());
    for r in 0..m.rows() {
        let scaled: Vec<f64> = m.row(r).iter().map(|v| v * temperature).collect();
        let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        let row = out.row_mut(r);
        for (c, s) in scaled.iter().enumerate() {
            let e = (s - max).exp();
            row[c] = e;
            sum += e;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(out)
}

/// Square root of the sum of squared entries.
pub fn frobenius_norm(m: &DataMatrix) -> f64 {
    let mut acc = 0.0;
    for v in m.values() {
        acc += v * v;
    }
    acc.sqrt()
}

/// `||W * W^T - I||_F` with `I` the rows x rows identity. Zero exactly when
/// the rows of `W` are orthonormal.
pub fn orthogonality_residual(w: &DataMatrix) -> f64 {
    let k = w.rows();
    let mut acc = 0.0;
    for i in 0..k {
        for j in 0..k {
            let mut dot = 0.0;
            for c in 0..w.cols() {
                dot += w.get(i, c) * w.get(j, c);
            }
            let target = if i == j { 1.0 } else { 0.0 };
            let diff = dot - target;
            acc += diff * diff;
        }
    }
    acc.sqrt()
}

/// Central-difference gradient of a scalar function: entry `(r, c)` is
/// `(f(x + h e_rc) - f(x - h e_rc)) / (2 h)`.
pub fn finite_diff_grad(
    f: &mut dyn FnMut(&DataMatrix) -> f64,
    at: &DataMatrix,
    h: f64,
) -> Result<DataMatrix> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::Parameter {
            name: "h",
            detail: format!("step must be positive and finite, got {h}"),
        });
    }
    let mut grad = DataMatrix::zeros(at.rows(), at.cols());
    let mut probe = at.clone();
    for r in 0..at.rows() {
        for c in 0..at.cols() {
            let orig = at.get(r, c);
            probe.set(r, c, orig + h);
            let plus = f(&probe);
            probe.set(r, c, orig - h);
            let minus = f(&probe);
            probe.set(r, c, orig);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("finite_diff_grad evaluation at entry ({r}, {c})"),
                });
            }
            grad.set(r, c, (plus - minus) / (2.0 * h));
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_identity_returns_input() {
        let a = DataMatrix::new(3, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]).unwrap();
        let i = DataMatrix::identity(3);
        assert_eq!(matmul(&i, &a).unwrap(), a);
    }

    #[test]
    fn matmul_hand_checked_2x2() {
        let a = DataMatrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = DataMatrix::new(2, 1, vec![1.0, 1.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.values(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle_exactly() {
        let mut rng = crate::numerics::SeededRng::new(11);
        let a = rng.normal_matrix(5, 4);
        let b = rng.normal_matrix(4, 3);
        let fast = matmul(&a, &b).unwrap();
        // Independent reference: accumulate in the same ascending inner order.
        for i in 0..5 {
            for j in 0..3 {
                let mut acc = 0.0f64;
                for k in 0..4 {
                    acc += a.get(i, k) * b.get(k, j);
                }
                assert_eq!(fast.get(i, j), acc, "entry ({i},{j})");
            }
        }
    }

    #[test]
    fn matmul_rejects_dimension_mismatch() {
        let a = DataMatrix::zeros(2, 3);
        let b = DataMatrix::zeros(2, 3);
        assert!(matches!(matmul(&a, &b), Err(Error::Shape { .. })));
    }

    #[test]
    fn softmax_uniform_row() {
        let m = DataMatrix::new(1, 3, vec![0.0, 0.0, 0.0]).unwrap();
        for t in [0.1, 1.0, 57.0] {
            let s = row_softmax(&m, t).unwrap();
            for c in 0..3 {
                assert!(approx(s.get(0, c), 1.0 / 3.0, 1e-15));
            }
        }
    }

    #[test]
    fn softmax_direct_evaluation() {
        let m = DataMatrix::new(1, 2, vec![1.0, 0.0]).unwrap();
        let s = row_softmax(&m, 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!(approx(s.get(0, 0), e / (e + 1.0), 1e-15));
        assert!(approx(s.get(0, 1), 1.0 / (e + 1.0), 1e-15));
    }

    #[test]
    fn softmax_saturates_at_high_temperature() {
        let m = DataMatrix::new(1, 2, vec![10.0, 0.0]).unwrap();
        let s = row_softmax(&m, 100.0).unwrap();
        assert!(s.get(0, 0) > 1.0 - 1e-12);
    }

    #[test]
    fn softmax_rejects_non_positive_temperature() {
        let m = DataMatrix::zeros(1, 2);
        assert!(matches!(
            row_softmax(&m, 0.0),
            Err(Error::Parameter { .. })
        ));
        assert!(matches!(
            row_softmax(&m, -1.0),
            Err(Error::Parameter { .. })
        ));
    }

    #[test]
    fn frobenius_known_values() {
        assert_eq!(frobenius_norm(&DataMatrix::zeros(3, 2)), 0.0);
        assert!(approx(
            frobenius_norm(&DataMatrix::identity(2)),
            2.0f64.sqrt(),
            1e-15
        ));
        let m = DataMatrix::new(1, 2, vec![3.0, 4.0]).unwrap();
        assert_eq!(frobenius_norm(&m), 5.0);
    }

    #[test]
    fn orthogonality_residual_of_rotation_is_zero() {
        let theta = 0.7f64;
        let w = DataMatrix::new(
            2,
            2,
            vec![theta.cos(), -theta.sin(), theta.sin(), theta.cos()],
        )
        .unwrap();
        assert!(orthogonality_residual(&w) < 1e-10);
    }

    #[test]
    fn orthogonality_residual_scaled_identity() {
        let w = DataMatrix::identity(2).scale(2.0);
        assert!(approx(
            orthogonality_residual(&w),
            3.0 * 2.0f64.sqrt(),
            1e-12
        ));
    }

    #[test]
    fn orthogonality_residual_matches_definition_expansion() {
        let mut rng = crate::numerics::SeededRng::new(5);
        let w = rng.normal_matrix(3, 5);
        // Brute-force expansion of ||W W^T - I||_F.
        let wt = w.transpose();
        let gram = matmul(&w, &wt).unwrap();
        let diff = gram.sub(&DataMatrix::identity(3)).unwrap();
        assert!(approx(
            orthogonality_residual(&w),
            frobenius_norm(&diff),
            1e-12
        ));
    }

    #[test]
    fn finite_diff_on_sum_of_squares() {
        let at = DataMatrix::new(1, 2, vec![1.0, 2.0]).unwrap();
        let grad = finite_diff_grad(
            &mut |m| m.values().iter().map(|v| v * v).sum(),
            &at,
            1e-5,
        )
        .unwrap();
        assert!(approx(grad.get(0, 0), 2.0, 1e-8));
        assert!(approx(grad.get(0, 1), 4.0, 1e-8));
    }

    #[test]
    fn finite_diff_on_constant_is_zero() {
        let at = DataMatrix::new(2, 2, vec![1.0, -1.0, 0.5, 2.0]).unwrap();
        let grad = finite_diff_grad(&mut |_| 42.0, &at, 1e-5).unwrap();
        assert!(grad.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn finite_diff_reports_non_finite_evaluations() {
        let at = DataMatrix::new(1, 1, vec![0.0]).unwrap();
        let err = finite_diff_grad(&mut |m| 1.0 / m.get(0, 0), &at, 0.0);
        assert!(err.is_err());
        let err = finite_diff_grad(&mut |_| f64::NAN, &at, 1e-5);
        assert!(matches!(err, Err(Error::NonFinite { .. })));
    }

    #[test]
    fn constructor_rejects_bad_input() {
        assert!(DataMatrix::new(0, 2, vec![]).is_err());
        assert!(DataMatrix::new(1, 2, vec![1.0]).is_err());
        assert!(DataMatrix::new(1, 2, vec![1.0, f64::NAN]).is_err());
    }
}
