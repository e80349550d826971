//! Small dense SPD matrices and multivariate Gaussian evaluations.
//!
//! The data space is low-dimensional (D = 2 by default), so a plain
//! row-major `Vec<f64>` with an explicit Cholesky factorization covers
//! everything the mixture world needs: log densities, score terms, and
//! component sampling.

// triangular solves read most clearly with explicit index loops
#![allow(clippy::needless_range_loop)]

use alloc::vec;
use alloc::vec::Vec;

use libm::{log, sqrt};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::{Error, Result};

/// Symmetric positive-definite matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl SpdMatrix {
    pub fn from_rows(dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != dim * dim {
            return Err(Error::ShapeMismatch {
                expected: dim * dim,
                got: data.len(),
            });
        }
        for i in 0..dim {
            for j in 0..i {
                if (data[i * dim + j] - data[j * dim + i]).abs() > 1e-12 {
                    return Err(Error::InvalidParameter("matrix is not symmetric".into()));
                }
            }
        }
        Ok(Self { dim, data })
    }

    /// sigma^2 * I
    pub fn isotropic(dim: usize, sigma: f64) -> Self {
        let mut data = vec![0.0; dim * dim];
        for i in 0..dim {
            data[i * dim + i] = sigma * sigma;
        }
        Self { dim, data }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    /// The variance-preserving diffusion map: abar * Sigma + (1 - abar) * I.
    pub fn diffuse(&self, abar: f64) -> SpdMatrix {
        let mut data: Vec<f64> = self.data.iter().map(|v| abar * v).collect();
        for i in 0..self.dim {
            data[i * self.dim + i] += 1.0 - abar;
        }
        SpdMatrix {
            dim: self.dim,
            data,
        }
    }

    /// Lower-triangular Cholesky factor; fails if not positive definite.
    pub fn cholesky(&self) -> Result<Cholesky> {
        let n = self.dim;
        let mut l = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let mut s = self.get(i, j);
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                if i == j {
                    if s <= 0.0 {
                        return Err(Error::NotPositiveDefinite);
                    }
                    l[i * n + j] = sqrt(s);
                } else {
                    l[i * n + j] = s / l[j * n + j];
                }
            }
        }
        Ok(Cholesky { dim: n, l })
    }
}

/// Cached Cholesky factor of an SPD matrix.
#[derive(Debug, Clone)]
pub struct Cholesky {
    dim: usize,
    l: Vec<f64>,
}

impl Cholesky {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// ln det(Sigma) = 2 sum ln L_ii
    pub fn log_det(&self) -> f64 {
        (0..self.dim)
            .map(|i| 2.0 * log(self.l[i * self.dim + i]))
            .sum()
    }

    /// Solve Sigma x = b via the two triangular solves.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim;
        debug_assert_eq!(b.len(), n);
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= self.l[i * n + k] * y[k];
            }
            y[i] = s / self.l[i * n + i];
        }
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= self.l[k * n + i] * x[k];
            }
            x[i] = s / self.l[i * n + i];
        }
        x
    }

    /// Quadratic form (x - mu)^T Sigma^{-1} (x - mu).
    pub fn mahalanobis_sq(&self, x: &[f64], mu: &[f64]) -> f64 {
        let diff: Vec<f64> = x.iter().zip(mu).map(|(a, b)| a - b).collect();
        let sol = self.solve(&diff);
        diff.iter().zip(&sol).map(|(a, b)| a * b).sum()
    }

    /// Gaussian log density at x.
    pub fn log_pdf(&self, x: &[f64], mu: &[f64]) -> f64 {
        let d = self.dim as f64;
        -0.5 * (d * log(2.0 * core::f64::consts::PI) + self.log_det() + self.mahalanobis_sq(x, mu))
    }

    /// Gradient of the log density with respect to x: -Sigma^{-1}(x - mu).
    pub fn score(&self, x: &[f64], mu: &[f64]) -> Vec<f64> {
        let diff: Vec<f64> = x.iter().zip(mu).map(|(a, b)| a - b).collect();
        self.solve(&diff).into_iter().map(|v| -v).collect()
    }

    /// Draw mu + L xi with xi standard normal.
    pub fn sample<R: Rng>(&self, mu: &[f64], rng: &mut R) -> Vec<f64> {
        let n = self.dim;
        let xi: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let mut out = mu.to_vec();
        for i in 0..n {
            for k in 0..=i {
                out[i] += self.l[i * n + k] * xi[k];
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use libm::fabs;

    #[test]
    fn isotropic_log_pdf_matches_formula() {
        let cov = SpdMatrix::isotropic(2, 1.0);
        let chol = cov.cholesky().unwrap();
        let lp = chol.log_pdf(&[0.0, 0.0], &[0.0, 0.0]);
        assert!(fabs(lp - (-log(2.0 * core::f64::consts::PI))) < 1e-14);
    }

    #[test]
    fn cholesky_solves_general_spd() {
        let cov = SpdMatrix::from_rows(2, vec![2.0, 0.6, 0.6, 1.0]).unwrap();
        let chol = cov.cholesky().unwrap();
        let x = chol.solve(&[1.0, 2.0]);
        // verify Sigma x = b
        let b0 = 2.0 * x[0] + 0.6 * x[1];
        let b1 = 0.6 * x[0] + 1.0 * x[1];
        assert!(fabs(b0 - 1.0) < 1e-12 && fabs(b1 - 2.0) < 1e-12);
        assert!(fabs(chol.log_det() - log(2.0 * 1.0 - 0.36)) < 1e-12);
    }

    #[test]
    fn non_spd_rejected() {
        let m = SpdMatrix::from_rows(2, vec![1.0, 2.0, 2.0, 1.0]).unwrap();
        assert_eq!(m.cholesky().unwrap_err(), Error::NotPositiveDefinite);
    }

    #[test]
    fn diffuse_endpoints() {
        let cov = SpdMatrix::isotropic(2, 0.5);
        let same = cov.diffuse(1.0);
        assert_eq!(same, cov);
        let unit = cov.diffuse(0.0);
        assert_eq!(unit, SpdMatrix::isotropic(2, 1.0));
        // abar = 0.25 with sigma = 1: 0.25 + 0.75 = 1
        let cov = SpdMatrix::isotropic(3, 1.0);
        assert_eq!(cov.diffuse(0.25), SpdMatrix::isotropic(3, 1.0));
    }

    #[test]
    fn score_is_negative_solve() {
        let cov = SpdMatrix::isotropic(2, 1.0);
        let chol = cov.cholesky().unwrap();
        let s = chol.score(&[1.5, -2.0], &[0.0, 0.0]);
        assert!(fabs(s[0] + 1.5) < 1e-14 && fabs(s[1] - 2.0) < 1e-14);
    }
}
