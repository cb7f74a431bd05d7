//! Circular convolution and correlation, plus dense doubly block circulant
//! (dbc) matrices used as oracles at small sizes.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::spectral::{side_length, Fft2};
use crate::{LabError, Result};

/// Default side-length cap for [`materialize_dbc`].
pub const DEFAULT_DBC_CAP: usize = 16;

/// A real `n×n` kernel stored as its row-major vectorization.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel {
    n: usize,
    k: Vec<f64>,
}

impl Kernel {
    pub fn from_vec(k: Vec<f64>) -> Result<Self> {
        let n = side_length(k.len())?;
        Ok(Kernel { n, k })
    }

    /// Kernel from a dense `n×n` matrix, `k = vec(K)` row-major.
    pub fn from_matrix(m: &DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() || m.nrows() == 0 {
            return Err(LabError::shape("kernel matrix must be square and nonempty"));
        }
        let n = m.nrows();
        let k = (0..n * n).map(|i| m[(i / n, i % n)]).collect();
        Ok(Kernel { n, k })
    }

    /// Unit impulse at `(l, m)`.
    pub fn delta(n: usize, l: usize, m: usize) -> Result<Self> {
        if l >= n || m >= n {
            return Err(LabError::invalid("delta position out of range"));
        }
        let mut k = vec![0.0; n * n];
        k[l * n + m] = 1.0;
        Ok(Kernel { n, k })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.k
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        let n = self.n;
        DMatrix::from_fn(n, n, |r, c| self.k[r * n + c])
    }

    pub fn flipped(&self) -> Kernel {
        Kernel {
            n: self.n,
            k: flip_kernel(&self.k).expect("kernel length is square"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DbcVariant {
    Convolution,
    Correlation,
}

/// Dense `n²×n²` operator equal to circular convolution (or correlation)
/// with a fixed kernel.
#[derive(Clone, Debug)]
pub struct DbcMatrix {
    pub variant: DbcVariant,
    pub matrix: DMatrix<f64>,
}

/// Dense dbc matrix with the default cap.
pub fn materialize_dbc(k: &Kernel, variant: DbcVariant) -> Result<DbcMatrix> {
    materialize_dbc_capped(k, variant, DEFAULT_DBC_CAP)
}

/// Entry `[(R·n+r), (C·n+c)]` is `K[(R−C) mod n, (r−c) mod n]` for
/// convolution and `K[(C−R) mod n, (c−r) mod n]` for correlation.
pub fn materialize_dbc_capped(k: &Kernel, variant: DbcVariant, cap: usize) -> Result<DbcMatrix> {
    let n = k.n;
    if n > cap {
        return Err(LabError::CapExceeded { n, cap });
    }
    let at = |a: usize, b: usize| k.k[(a % n) * n + (b % n)];
    let matrix = DMatrix::from_fn(n * n, n * n, |row, col| {
        let (rb, r) = (row / n, row % n);
        let (cb, c) = (col / n, col % n);
        match variant {
            DbcVariant::Convolution => at(rb + n - cb, r + n - c),
            DbcVariant::Correlation => at(cb + n - rb, c + n - r),
        }
    });
    Ok(DbcMatrix { variant, matrix })
}

fn check_pair(x: &[f64], k: &[f64]) -> Result<usize> {
    if x.len() != k.len() {
        return Err(LabError::shape(format!(
            "image length {} vs kernel length {}",
            x.len(),
            k.len()
        )));
    }
    side_length(x.len())
}

/// `(X ⊛ K)_{i,j} = Σ X_{m,l}·K_{i−m, j−l}` with indices mod n, via FFT.
pub fn circ_conv(x: &[f64], k: &[f64]) -> Result<Vec<f64>> {
    let n = check_pair(x, k)?;
    let fft = Fft2::new(n)?;
    Ok(circ_conv_with(&fft, x, k))
}

pub(crate) fn circ_conv_with(fft: &Fft2, x: &[f64], k: &[f64]) -> Vec<f64> {
    let n = fft.n() as f64;
    let xs = fft.forward_real(x);
    let ks = fft.forward_real(k);
    let prod: Vec<Complex64> = xs.iter().zip(&ks).map(|(a, b)| a * b * n).collect();
    fft.inverse_real(&prod)
}

/// `out_{i,j} = Σ X_{i+m, j+l}·K_{m,l}`, the convention of most deep
/// learning frameworks. Equal to convolution with the flipped kernel.
pub fn circ_corr(x: &[f64], k: &[f64]) -> Result<Vec<f64>> {
    let n = check_pair(x, k)?;
    let fft = Fft2::new(n)?;
    let kf = flip_kernel(k)?;
    Ok(circ_conv_with(&fft, x, &kf))
}

/// 180° rotation about the origin: `(l, m) → ((n−l) mod n, (n−m) mod n)`.
pub fn flip_kernel(k: &[f64]) -> Result<Vec<f64>> {
    let n = side_length(k.len())?;
    let mut out = vec![0.0; n * n];
    for l in 0..n {
        for m in 0..n {
            out[((n - l) % n) * n + (n - m) % n] = k[l * n + m];
        }
    }
    Ok(out)
}

/// `n·|Qk|`, indexed by frequency and left unsorted.
pub fn dbc_singular_values(k: &[f64]) -> Result<Vec<f64>> {
    let n = side_length(k.len())?;
    let fft = Fft2::new(n)?;
    Ok(fft
        .forward_real(k)
        .iter()
        .map(|c| c.norm() * n as f64)
        .collect())
}
