//! Vec-2D discrete Fourier transform and frequency bookkeeping.
//!
//! Images are stored row-major, so pixel `(l, m)` of an `n×n` image lives at
//! `l*n + m`. The transform of a vectorized image is `Q·x` with
//! `Q = (1/n)·(F ⊗ F)`, which is unitary. Frequency `(mu, nu)` sits at
//! index `j = n*mu + nu` in the spectrum.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::{LabError, Result};

/// Largest side length for which [`dft_matrix`] builds a dense `Q` by default.
pub const DEFAULT_DFT_CAP: usize = 64;

/// A vertical/horizontal frequency pair together with its flat index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FreqIndex {
    pub j: usize,
    pub mu: usize,
    pub nu: usize,
    pub n: usize,
}

impl FreqIndex {
    /// Recover `(mu, nu)` from a flat index.
    pub fn from_flat(j: usize, n: usize) -> Result<Self> {
        if n == 0 || j >= n * n {
            return Err(LabError::invalid(format!(
                "flat index {j} out of range for n={n}"
            )));
        }
        Ok(FreqIndex {
            j,
            mu: j / n,
            nu: j % n,
            n,
        })
    }

    /// The mirrored frequency `((n-mu) mod n, (n-nu) mod n)`.
    pub fn symm(&self) -> FreqIndex {
        symm_index(*self)
    }

    pub fn is_self_symmetric(&self) -> bool {
        self.symm().j == self.j
    }

    /// Smaller of `j` and `symm(j)`; names the pair both belong to.
    pub fn canonical(&self) -> usize {
        self.j.min(self.symm().j)
    }
}

/// Build a [`FreqIndex`] for `(mu, nu)` on an `n×n` grid.
pub fn freq_index(mu: usize, nu: usize, n: usize) -> Result<FreqIndex> {
    if mu >= n || nu >= n {
        return Err(LabError::invalid(format!(
            "frequency ({mu},{nu}) out of range for n={n}"
        )));
    }
    Ok(FreqIndex {
        j: n * mu + nu,
        mu,
        nu,
        n,
    })
}

pub fn symm_index(f: FreqIndex) -> FreqIndex {
    let n = f.n;
    let mu = (n - f.mu) % n;
    let nu = (n - f.nu) % n;
    FreqIndex {
        j: n * mu + nu,
        mu,
        nu,
        n,
    }
}

/// Flat index of the mirror partner of `j`.
pub fn symm_flat(j: usize, n: usize) -> usize {
    let (mu, nu) = (j / n, j % n);
    ((n - mu) % n) * n + (n - nu) % n
}

/// Side length `n` of a vector with `n²` entries.
pub fn side_length(len: usize) -> Result<usize> {
    let n = (len as f64).sqrt().round() as usize;
    if n == 0 || n * n != len {
        return Err(LabError::shape(format!(
            "length {len} is not a nonzero perfect square"
        )));
    }
    Ok(n)
}

/// Vec-2D Fourier coefficients of an `n×n` image.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    n: usize,
    coeffs: Vec<Complex64>,
}

impl Spectrum {
    pub fn new(n: usize, coeffs: Vec<Complex64>) -> Result<Self> {
        if n == 0 || coeffs.len() != n * n {
            return Err(LabError::shape(format!(
                "spectrum of length {} does not match n={n}",
                coeffs.len()
            )));
        }
        Ok(Spectrum { n, coeffs })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn coeffs(&self) -> &[Complex64] {
        &self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<Complex64> {
        self.coeffs
    }

    pub fn at(&self, f: FreqIndex) -> Complex64 {
        self.coeffs[f.j]
    }

    pub fn magnitudes(&self) -> Vec<f64> {
        self.coeffs.iter().map(|c| c.norm()).collect()
    }

    pub fn power(&self) -> Vec<f64> {
        self.coeffs.iter().map(|c| c.norm_sqr()).collect()
    }

    /// Phases in `(-π, π]`.
    pub fn phases(&self) -> Vec<f64> {
        self.coeffs.iter().map(|c| c.arg()).collect()
    }

    /// Largest `|c[symm(j)] - conj(c[j])|` over all `j`.
    pub fn symmetry_error(&self) -> f64 {
        let n = self.n;
        (0..n * n)
            .map(|j| (self.coeffs[symm_flat(j, n)] - self.coeffs[j].conj()).norm())
            .fold(0.0, f64::max)
    }

    /// True when the spectrum is that of a real image, within `tol`.
    pub fn is_conjugate_symmetric(&self, tol: f64) -> bool {
        self.symmetry_error() <= tol
    }
}

/// Dense `Q = (1/n)·(F ⊗ F)` with the default size cap.
pub fn dft_matrix(n: usize) -> Result<DMatrix<Complex64>> {
    dft_matrix_capped(n, DEFAULT_DFT_CAP)
}

/// Dense `Q` for `n ≤ cap`. Memory grows as `n⁴`.
pub fn dft_matrix_capped(n: usize, cap: usize) -> Result<DMatrix<Complex64>> {
    if n == 0 {
        return Err(LabError::invalid("dft_matrix needs n >= 1"));
    }
    if n > cap {
        return Err(LabError::CapExceeded { n, cap });
    }
    let w = |k: usize| Complex64::from_polar(1.0, -2.0 * PI * ((k % n) as f64) / n as f64);
    let scale = 1.0 / n as f64;
    let nn = n * n;
    Ok(DMatrix::from_fn(nn, nn, |r, c| {
        let (mu, nu) = (r / n, r % n);
        let (l, m) = (c / n, c % n);
        w(mu * l + nu * m) * scale
    }))
}

/// Reusable row/column FFT plans for one side length.
///
/// Cheap to clone and safe to share between threads.
#[derive(Clone)]
pub struct Fft2 {
    n: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Fft2 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fft2").field("n", &self.n).finish()
    }
}

impl Fft2 {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(LabError::invalid("FFT size must be positive"));
        }
        let mut planner = FftPlanner::new();
        Ok(Fft2 {
            n,
            fwd: planner.plan_fft_forward(n),
            inv: planner.plan_fft_inverse(n),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    fn run(&self, plan: &Arc<dyn Fft<f64>>, buf: &mut [Complex64]) {
        let n = self.n;
        // rows, then columns through a transpose
        plan.process(buf);
        transpose_in_place(buf, n);
        plan.process(buf);
        transpose_in_place(buf, n);
        let scale = 1.0 / n as f64;
        for v in buf.iter_mut() {
            *v *= scale;
        }
    }

    /// In-place `buf ← Q·buf`.
    pub fn forward_in_place(&self, buf: &mut [Complex64]) {
        debug_assert_eq!(buf.len(), self.n * self.n);
        self.run(&self.fwd, buf);
    }

    /// In-place `buf ← Q⁻¹·buf`.
    pub fn inverse_in_place(&self, buf: &mut [Complex64]) {
        debug_assert_eq!(buf.len(), self.n * self.n);
        self.run(&self.inv, buf);
    }

    /// `Q·x` for a real vector.
    pub fn forward_real(&self, x: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.forward_in_place(&mut buf);
        buf
    }

    /// Real part of `Q⁻¹·s`.
    pub fn inverse_real(&self, s: &[Complex64]) -> Vec<f64> {
        let mut buf = s.to_vec();
        self.inverse_in_place(&mut buf);
        buf.into_iter().map(|c| c.re).collect()
    }
}

fn transpose_in_place(buf: &mut [Complex64], n: usize) {
    for r in 0..n {
        for c in (r + 1)..n {
            buf.swap(r * n + c, c * n + r);
        }
    }
}

/// `Q·x` for a real vectorized image, via FFT.
pub fn vec2d_dft(x: &[f64]) -> Result<Spectrum> {
    let n = side_length(x.len())?;
    let coeffs = Fft2::new(n)?.forward_real(x);
    Spectrum::new(n, coeffs)
}

/// `Q·x` for a complex vectorized image, via FFT.
pub fn vec2d_dft_complex(x: &[Complex64]) -> Result<Spectrum> {
    let n = side_length(x.len())?;
    let mut buf = x.to_vec();
    Fft2::new(n)?.forward_in_place(&mut buf);
    Spectrum::new(n, buf)
}

/// `Q⁻¹·s`, i.e. `Q^{*T}·s`.
pub fn inv_vec2d_dft(s: &Spectrum) -> Result<Vec<Complex64>> {
    let mut buf = s.coeffs.clone();
    Fft2::new(s.n)?.inverse_in_place(&mut buf);
    Ok(buf)
}

/// Wrap an angle to `(-π, π]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let mut t = theta % (2.0 * PI);
    if t <= -PI {
        t += 2.0 * PI;
    } else if t > PI {
        t -= 2.0 * PI;
    }
    t
}
