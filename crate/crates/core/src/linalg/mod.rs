//! Dense row-major matrices and a one-sided Jacobi SVD.

mod matrix;
mod svd;

pub use matrix::Matrix;
pub use svd::{svd, Svd};

/// Arithmetic precision used by the simulator.
///
/// `F32Emulated` rounds every elementary result to the nearest binary32
/// value while still carrying it in an `f64`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F64,
    F32Emulated,
}

impl Precision {
    #[inline]
    pub fn round(self, x: f64) -> f64 {
        match self {
            Precision::F64 => x,
            Precision::F32Emulated => x as f32 as f64,
        }
    }

    pub fn round_matrix(self, m: &Matrix) -> Matrix {
        match self {
            Precision::F64 => m.clone(),
            Precision::F32Emulated => m.map(|x| x as f32 as f64),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Precision::F64 => "f64",
            Precision::F32Emulated => "f32",
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "f64" | "64" => Ok(Precision::F64),
            "f32" | "32" => Ok(Precision::F32Emulated),
            other => crate::error::invalid(format!("unknown precision `{other}`")),
        }
    }
}

pub fn matmul(a: &Matrix, b: &Matrix) -> crate::Result<Matrix> {
    a.matmul(b)
}

pub fn frobenius_norm(a: &Matrix) -> f64 {
    a.frobenius_norm()
}

/// Columns `lo..hi` of the factorization scaled by the square roots of the
/// corresponding singular values, as `(U_k diag(sqrt s_k), diag(sqrt s_k) V_k^T)`.
pub fn truncate(svd: &Svd, lo: usize, hi: usize) -> crate::Result<(Matrix, Matrix)> {
    svd.truncate(lo, hi)
}
