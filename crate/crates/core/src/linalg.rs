//! Dense `f32` vector and matrix types with 64-bit accumulating kernels.
//!
//! Every reduction sums left to right in `f64`, so results depend only on the
//! inputs and never on vector length or thread count.

use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// A non-empty vector of finite `f32` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vec32 {
    values: Vec<f32>,
}

impl Vec32 {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("vector"));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(pos));
        }
        Ok(Self { values })
    }

    /// Builds a vector from `f64` values, rounding each to `f32`.
    pub fn from_f64(values: &[f64]) -> Result<Self> {
        Self::new(values.iter().map(|&v| v as f32).collect())
    }

    pub fn zeros(dim: usize) -> Self {
        assert!(dim > 0, "Vec32 must have positive dimension");
        Self {
            values: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.values
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.values
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }

    pub fn norm(&self) -> f64 {
        norm_slice(&self.values)
    }

    /// `self - other`, elementwise in `f32`.
    pub fn sub(&self, other: &Vec32) -> Result<Vec32> {
        check_dim(self.dim(), other.dim())?;
        Ok(Vec32 {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a - b)
                .collect(),
        })
    }
}

impl Deref for Vec32 {
    type Target = [f32];

    fn deref(&self) -> &[f32] {
        &self.values
    }
}

impl TryFrom<Vec<f32>> for Vec32 {
    type Error = Error;

    fn try_from(values: Vec<f32>) -> Result<Self> {
        Vec32::new(values)
    }
}

/// Row-major matrix of finite `f32` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat32 {
    rows: usize,
    cols: usize,
    values: Vec<f32>,
}

impl Mat32 {
    pub fn new(rows: usize, cols: usize, values: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Empty("matrix"));
        }
        check_dim(rows * cols, values.len())?;
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(pos));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn from_f64(rows: usize, cols: usize, values: &[f64]) -> Result<Self> {
        Self::new(rows, cols, values.iter().map(|&v| v as f32).collect())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "Mat32 must have positive shape");
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.values[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.values[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.values
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }

    /// `self · x` accumulated in `f64`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.cols, x.len())?;
        Ok((0..self.rows)
            .map(|r| {
                self.row(r)
                    .iter()
                    .zip(x)
                    .fold(0.0f64, |acc, (&w, &v)| acc + w as f64 * v)
            })
            .collect())
    }

    pub fn transpose(&self) -> Mat32 {
        let mut values = Vec::with_capacity(self.values.len());
        for c in 0..self.cols {
            for r in 0..self.rows {
                values.push(self.get(r, c));
            }
        }
        Mat32 {
            rows: self.cols,
            cols: self.rows,
            values,
        }
    }

    pub fn is_symmetric(&self) -> bool {
        self.rows == self.cols
            && (0..self.rows).all(|r| (0..r).all(|c| self.get(r, c) == self.get(c, r)))
    }
}

/// Inner product `Σ aᵢbᵢ`.
pub fn dot(a: &Vec32, b: &Vec32) -> Result<f64> {
    check_dim(a.dim(), b.dim())?;
    Ok(dot_slice(a, b))
}

/// `a / ‖a‖₂`.
pub fn l2_normalize(a: &Vec32) -> Result<Vec32> {
    let n = a.norm();
    if n == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Vec32::new(a.iter().map(|&v| (v as f64 / n) as f32).collect())
}

/// `Σ (aᵢ - bᵢ)²`.
pub fn squared_l2_distance(a: &Vec32, b: &Vec32) -> Result<f64> {
    check_dim(a.dim(), b.dim())?;
    Ok(sq_dist_slice(a, b))
}

pub(crate) fn dot_slice(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .fold(0.0f64, |acc, (&x, &y)| acc + x as f64 * y as f64)
}

pub(crate) fn sq_dist_slice(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(0.0f64, |acc, (&x, &y)| {
        let d = x as f64 - y as f64;
        acc + d * d
    })
}

pub(crate) fn norm_slice(a: &[f32]) -> f64 {
    dot_slice(a, a).sqrt()
}

pub(crate) fn dot_f64(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

/// Cosine of the angle between two `f64` vectors; 0 when either is zero.
pub(crate) fn cosine_f64(a: &[f64], b: &[f64]) -> f64 {
    let na = dot_f64(a, a).sqrt();
    let nb = dot_f64(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot_f64(a, b) / (na * nb)
    }
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    use super::*;
    use crate::rng::Rng;

    fn v(xs: &[f32]) -> Vec32 {
        Vec32::new(xs.to_vec()).unwrap()
    }

    fn random_vec(rng: &mut Rng, d: usize) -> Vec32 {
        Vec32::new((0..d).map(|_| rng.normal() as f32).collect()).unwrap()
    }

    #[test]
    fn dot_examples() {
        assert_eq!(dot(&v(&[1.0, 0.0, 0.0]), &v(&[1.0, 0.0, 0.0])).unwrap(), 1.0);
        assert_eq!(dot(&v(&[1.0, 2.0]), &v(&[3.0, 4.0])).unwrap(), 11.0);
    }

    #[test]
    fn dot_matches_naive_summation() {
        let mut rng = Rng::new(11);
        let a = random_vec(&mut rng, 16);
        let b = random_vec(&mut rng, 16);
        let mut naive = 0.0f64;
        for i in 0..16 {
            naive += (a[i] as f64) * (b[i] as f64);
        }
        assert_relative_eq!(dot(&a, &b).unwrap(), naive, max_relative = 1e-6);
    }

    #[test]
    fn dot_dimension_mismatch() {
        assert!(matches!(
            dot(&v(&[1.0]), &v(&[1.0, 2.0])),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn normalize_examples() {
        let n = l2_normalize(&v(&[3.0, 4.0])).unwrap();
        assert_relative_eq!(n[0], 0.6, epsilon = 1e-7);
        assert_relative_eq!(n[1], 0.8, epsilon = 1e-7);
        let unit = v(&[0.0, 1.0, 0.0]);
        assert_eq!(l2_normalize(&unit).unwrap(), unit);
        assert!(matches!(l2_normalize(&v(&[0.0, 0.0])), Err(Error::ZeroNorm)));
    }

    #[test]
    fn distance_examples() {
        let a = v(&[1.5, -2.0]);
        assert_eq!(squared_l2_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(squared_l2_distance(&v(&[0.0, 0.0]), &v(&[3.0, 4.0])).unwrap(), 25.0);
    }

    #[test]
    fn distance_matches_expansion() {
        let mut rng = Rng::new(5);
        let a = random_vec(&mut rng, 32);
        let b = random_vec(&mut rng, 32);
        let expanded = dot(&a, &a).unwrap() - 2.0 * dot(&a, &b).unwrap() + dot(&b, &b).unwrap();
        assert_relative_eq!(squared_l2_distance(&a, &b).unwrap(), expanded, max_relative = 1e-5);
    }

    #[test]
    fn rejects_non_finite() {
        assert!(matches!(Vec32::new(vec![1.0, f32::NAN]), Err(Error::NonFinite(1))));
        assert!(Vec32::new(vec![]).is_err());
        assert!(Mat32::new(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn matvec_and_transpose() {
        let m = Mat32::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(m.matvec(&[1.0, 0.0, -1.0]).unwrap(), vec![-2.0, -2.0]);
        let t = m.transpose();
        assert_eq!(t.shape(), (3, 2));
        assert_eq!(t.get(2, 1), 6.0);
    }

    fn finite_vec(d: usize) -> impl Strategy<Value = Vec<f32>> {
        prop::collection::vec(-100.0f32..100.0, d)
    }

    proptest! {
        #[test]
        fn dot_is_symmetric(a in finite_vec(12), b in finite_vec(12)) {
            let (a, b) = (v(&a), v(&b));
            prop_assert_eq!(dot(&a, &b).unwrap(), dot(&b, &a).unwrap());
        }

        #[test]
        fn distance_is_nonnegative_and_zero_iff_equal(a in finite_vec(8), b in finite_vec(8)) {
            let (a, b) = (v(&a), v(&b));
            let d = squared_l2_distance(&a, &b).unwrap();
            prop_assert!(d >= 0.0);
            prop_assert_eq!(d == 0.0, a == b);
        }

        #[test]
        fn normalize_is_idempotent(a in finite_vec(6)) {
            let a = v(&a);
            prop_assume!(a.norm() > 1e-3);
            let once = l2_normalize(&a).unwrap();
            prop_assert!((once.norm() - 1.0).abs() < 1e-6);
            let twice = l2_normalize(&once).unwrap();
            for (x, y) in once.iter().zip(twice.iter()) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }
    }
}
