//! Orthonormal 2-D DCT-II and its inverse (DCT-III) on square blocks.
//!
//! The transform is a dense basis multiplication, `Y = C X Cᵀ` forward and
//! `X = Cᵀ Y C` inverse, accumulated in `f64`. Bases are built once per size
//! and shared through a process-wide cache.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, OnceLock, RwLock};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Orthonormal DCT-II basis of size `p`: `C[k][n] = s_k cos(π (2n+1) k / 2p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DctBasis {
    size: usize,
    // Row-major, C[k][n] at k * size + n.
    c: Vec<f64>,
}

impl DctBasis {
    pub fn new(size: usize) -> Result<Self> {
        if size == 0 {
            return Err(Error::InvalidPatchSize(0));
        }
        let p = size as f64;
        let mut c = Vec::with_capacity(size * size);
        for k in 0..size {
            let s = if k == 0 { (1.0 / p).sqrt() } else { (2.0 / p).sqrt() };
            for n in 0..size {
                c.push(s * (PI * (2 * n + 1) as f64 * k as f64 / (2.0 * p)).cos());
            }
        }
        Ok(Self { size, c })
    }

    /// Shared basis for `size`, built on first use.
    pub fn cached(size: usize) -> Result<Arc<DctBasis>> {
        static CACHE: OnceLock<RwLock<HashMap<usize, Arc<DctBasis>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(Default::default);
        if let Some(b) = cache.read().unwrap().get(&size) {
            return Ok(Arc::clone(b));
        }
        let basis = Arc::new(DctBasis::new(size)?);
        let mut w = cache.write().unwrap();
        Ok(Arc::clone(w.entry(size).or_insert(basis)))
    }

    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn coeff(&self, k: usize, n: usize) -> f64 {
        self.c[k * self.size + n]
    }

    pub fn matrix(&self) -> Matrix<f64> {
        Matrix::from_vec(self.size, self.size, self.c.clone()).unwrap()
    }

    fn check(&self, block: &Matrix<f64>) -> Result<()> {
        if !block.is_square() {
            return Err(Error::DimensionMismatch(format!(
                "DCT needs a square block, got {}x{}",
                block.rows(),
                block.cols()
            )));
        }
        if block.rows() != self.size {
            return Err(Error::DimensionMismatch(format!(
                "block side {} does not match basis size {}",
                block.rows(),
                self.size
            )));
        }
        Ok(())
    }

    /// `C X Cᵀ`.
    pub fn forward(&self, x: &Matrix<f64>) -> Result<Matrix<f64>> {
        self.check(x)?;
        let p = self.size;
        let xs = x.as_slice();
        // t = C X
        let mut t = vec![0.0; p * p];
        for k in 0..p {
            for j in 0..p {
                let mut acc = 0.0;
                for i in 0..p {
                    acc += self.c[k * p + i] * xs[i * p + j];
                }
                t[k * p + j] = acc;
            }
        }
        // y = t Cᵀ
        let mut y = vec![0.0; p * p];
        for k in 0..p {
            for l in 0..p {
                let mut acc = 0.0;
                for j in 0..p {
                    acc += t[k * p + j] * self.c[l * p + j];
                }
                y[k * p + l] = acc;
            }
        }
        Matrix::from_vec(p, p, y)
    }

    /// `Cᵀ Y C`.
    pub fn inverse(&self, y: &Matrix<f64>) -> Result<Matrix<f64>> {
        self.check(y)?;
        let p = self.size;
        let ys = y.as_slice();
        // t = Cᵀ Y
        let mut t = vec![0.0; p * p];
        for n in 0..p {
            for l in 0..p {
                let mut acc = 0.0;
                for k in 0..p {
                    acc += self.c[k * p + n] * ys[k * p + l];
                }
                t[n * p + l] = acc;
            }
        }
        // x = t C
        let mut x = vec![0.0; p * p];
        for n in 0..p {
            for m in 0..p {
                let mut acc = 0.0;
                for l in 0..p {
                    acc += t[n * p + l] * self.c[l * p + m];
                }
                x[n * p + m] = acc;
            }
        }
        Matrix::from_vec(p, p, x)
    }
}

/// Forward orthonormal 2-D DCT-II of a square block.
pub fn dct2(block: &Matrix<f64>) -> Result<Matrix<f64>> {
    if !block.is_square() || block.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "DCT needs a non-empty square block, got {}x{}",
            block.rows(),
            block.cols()
        )));
    }
    DctBasis::cached(block.rows())?.forward(block)
}

/// Inverse of [`dct2`].
pub fn idct2(coeffs: &Matrix<f64>) -> Result<Matrix<f64>> {
    if !coeffs.is_square() || coeffs.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "IDCT needs a non-empty square block, got {}x{}",
            coeffs.rows(),
            coeffs.cols()
        )));
    }
    DctBasis::cached(coeffs.rows())?.inverse(coeffs)
}
