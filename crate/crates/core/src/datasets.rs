//! Datasets, correlation statistics and the SVD structure of the
//! input-output map.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::spectral::{freq_index, side_length, symm_flat, Fft2};
use crate::{LabError, Result};

const MAGIC: &[u8; 4] = b"LCDS";
const FORMAT_VERSION: u32 = 1;

/// Side-length cap for [`SigmaXx::dense`].
pub const SIGMA_XX_DENSE_CAP: usize = 64;

/// Two singular values closer than this are treated as tied.
pub const TIE_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Vec<f64>,
    pub class: usize,
}

/// Labelled `n×n` images over `p` classes. Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    n: usize,
    p: usize,
    samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(n: usize, p: usize, samples: Vec<Sample>) -> Result<Self> {
        if n == 0 {
            return Err(LabError::invalid("image side length must be positive"));
        }
        if p == 0 {
            return Err(LabError::invalid("class count p must be positive"));
        }
        if samples.is_empty() {
            return Err(LabError::invalid("dataset has no samples"));
        }
        let mut counts = vec![0usize; p];
        for (i, s) in samples.iter().enumerate() {
            if s.image.len() != n * n {
                return Err(LabError::shape(format!(
                    "sample {i} has {} pixels, expected {}",
                    s.image.len(),
                    n * n
                )));
            }
            if s.class >= p {
                return Err(LabError::invalid(format!(
                    "sample {i} has class {} but p={p}",
                    s.class
                )));
            }
            counts[s.class] += 1;
        }
        if let Some(c) = counts.iter().position(|&c| c == 0) {
            return Err(LabError::invalid(format!("class {c} has no samples")));
        }
        Ok(Dataset { n, p, samples })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.p];
        for s in &self.samples {
            counts[s.class] += 1;
        }
        counts
    }

    pub fn is_balanced(&self) -> bool {
        let c = self.class_counts();
        c.iter().all(|&v| v == c[0])
    }

    /// One-hot label of sample `i`.
    pub fn label(&self, i: usize) -> Vec<f64> {
        one_hot(self.samples[i].class, self.p)
    }

    pub fn class_means(&self) -> Vec<Vec<f64>> {
        let counts = self.class_counts();
        let mut means = vec![vec![0.0; self.n * self.n]; self.p];
        for s in &self.samples {
            for (m, v) in means[s.class].iter_mut().zip(&s.image) {
                *m += v;
            }
        }
        for (m, &c) in means.iter_mut().zip(&counts) {
            m.iter_mut().for_each(|v| *v /= c as f64);
        }
        means
    }

    /// Stratified split: within each class a seeded shuffle, then the first
    /// `round(frac·count)` samples go to the first part.
    pub fn shuffle_split(&self, frac: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..=1.0).contains(&frac) {
            return Err(LabError::invalid("split fraction must lie in [0, 1]"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = Vec::new();
        let mut b = Vec::new();
        for c in 0..self.p {
            let mut idx: Vec<usize> = (0..self.len()).filter(|&i| self.samples[i].class == c).collect();
            idx.shuffle(&mut rng);
            let cut = (frac * idx.len() as f64).round() as usize;
            a.extend(idx[..cut].iter().map(|&i| self.samples[i].clone()));
            b.extend(idx[cut..].iter().map(|&i| self.samples[i].clone()));
        }
        Ok((Dataset::new(self.n, self.p, a)?, Dataset::new(self.n, self.p, b)?))
    }
}

pub fn one_hot(class: usize, p: usize) -> Vec<f64> {
    let mut y = vec![0.0; p];
    y[class] = 1.0;
    y
}

/// One 2D cosine `b·cos(2π(μl + νm)/n + δ)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineComponent {
    pub mu: usize,
    pub nu: usize,
    pub amplitude: f64,
    #[serde(default)]
    pub phase: f64,
}

impl CosineComponent {
    pub fn new(mu: usize, nu: usize, amplitude: f64, phase: f64) -> Self {
        CosineComponent { mu, nu, amplitude, phase }
    }
}

/// Per-class lists of cosine components on an `n×n` grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineSpec {
    pub n: usize,
    pub classes: Vec<Vec<CosineComponent>>,
    #[serde(default = "default_true")]
    pub disjoint: bool,
}

fn default_true() -> bool {
    true
}

impl CosineSpec {
    /// Frequencies of class `c` together with their mirror partners, as flat
    /// indices.
    pub fn symm_support(&self, c: usize) -> BTreeSet<usize> {
        let n = self.n;
        let mut out = BTreeSet::new();
        for comp in &self.classes[c] {
            let j = comp.mu * n + comp.nu;
            out.insert(j);
            out.insert(symm_flat(j, n));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(LabError::invalid("cosine spec needs n >= 1"));
        }
        if self.classes.is_empty() {
            return Err(LabError::invalid("cosine spec has no classes"));
        }
        for (c, comps) in self.classes.iter().enumerate() {
            if comps.is_empty() {
                return Err(LabError::invalid(format!("class {c} has no components")));
            }
            for comp in comps {
                freq_index(comp.mu, comp.nu, self.n)?;
                if !comp.amplitude.is_finite() || !comp.phase.is_finite() {
                    return Err(LabError::invalid("non-finite amplitude or phase"));
                }
            }
        }
        if self.disjoint {
            let mut seen: Vec<(usize, usize)> = Vec::new();
            for (c, comps) in self.classes.iter().enumerate() {
                let mut own = BTreeSet::new();
                for comp in comps {
                    let j = comp.mu * self.n + comp.nu;
                    let canon = j.min(symm_flat(j, self.n));
                    if !own.insert(canon) {
                        return Err(LabError::Overlap(format!(
                            "class {c} lists frequency ({},{}) twice",
                            comp.mu, comp.nu
                        )));
                    }
                    if let Some(&(_, other)) = seen.iter().find(|(k, _)| *k == canon) {
                        return Err(LabError::Overlap(format!(
                            "frequency ({},{}) appears in classes {other} and {c}",
                            comp.mu, comp.nu
                        )));
                    }
                }
                seen.extend(own.into_iter().map(|k| (k, c)));
            }
        }
        Ok(())
    }

    /// Image of class `c`.
    pub fn render(&self, c: usize) -> Vec<f64> {
        let n = self.n;
        let mut x = vec![0.0; n * n];
        for comp in &self.classes[c] {
            for l in 0..n {
                for m in 0..n {
                    let arg = 2.0 * PI * ((comp.mu * l + comp.nu * m) % n) as f64 / n as f64;
                    x[l * n + m] += comp.amplitude * (arg + comp.phase).cos();
                }
            }
        }
        x
    }
}

/// One image per class, each a single cosine.
pub fn gen_pure_cosines(spec: &CosineSpec) -> Result<Dataset> {
    if let Some(c) = spec.classes.iter().position(|v| v.len() != 1) {
        return Err(LabError::invalid(format!(
            "pure cosines need exactly one frequency per class (class {c})"
        )));
    }
    gen_sums_of_cosines(spec)
}

/// One image per class, each a sum of cosines.
pub fn gen_sums_of_cosines(spec: &CosineSpec) -> Result<Dataset> {
    spec.validate()?;
    let samples = (0..spec.classes.len())
        .map(|c| Sample { image: spec.render(c), class: c })
        .collect();
    Dataset::new(spec.n, spec.classes.len(), samples)
}

/// Names of the shape classes, in class order.
pub const SHAPE_NAMES: [&str; 4] = ["circle", "octagon", "square", "star"];

/// Filled circle, regular octagon, square and five-pointed star, value 1 on
/// a 0 background, centred, outer diameter 0.7·n.
pub fn gen_geometric_shapes(n: usize) -> Result<Dataset> {
    if n < 16 {
        return Err(LabError::invalid(format!("shapes need n >= 16, got {n}")));
    }
    let c = (n as f64 - 1.0) / 2.0;
    let r = 0.35 * n as f64;
    let oct_a = r * (PI / 8.0).cos();
    let half = r / 2f64.sqrt();
    let inner = r * 0.381966;
    let star: Vec<(f64, f64)> = (0..10)
        .map(|k| {
            let ang = PI / 2.0 + k as f64 * PI / 5.0;
            let rr = if k % 2 == 0 { r } else { inner };
            (rr * ang.cos(), rr * ang.sin())
        })
        .collect();

    let tests: [&dyn Fn(f64, f64) -> bool; 4] = [
        &|x, y| x * x + y * y <= r * r,
        &|x, y| x.abs() <= oct_a && y.abs() <= oct_a && x.abs() + y.abs() <= oct_a * 2f64.sqrt(),
        &|x, y| x.abs() <= half && y.abs() <= half,
        &|x, y| point_in_polygon(x, y, &star),
    ];
    let samples = tests
        .iter()
        .enumerate()
        .map(|(class, inside)| {
            let mut image = vec![0.0; n * n];
            for l in 0..n {
                for m in 0..n {
                    let (x, y) = (m as f64 - c, c - l as f64);
                    if inside(x, y) {
                        image[l * n + m] = 1.0;
                    }
                }
            }
            Sample { image, class }
        })
        .collect();
    Dataset::new(n, 4, samples)
}

fn point_in_polygon(x: f64, y: f64, poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// `⟨y xᵀ⟩` over all samples, a `p×n²` matrix.
pub fn sigma_yx(d: &Dataset) -> DMatrix<f64> {
    let nn = d.n * d.n;
    let mut m = DMatrix::zeros(d.p, nn);
    let inv = 1.0 / d.len() as f64;
    for s in &d.samples {
        for (i, v) in s.image.iter().enumerate() {
            m[(s.class, i)] += v * inv;
        }
    }
    m
}

/// `Σ^xx = ⟨x xᵀ⟩` kept in operator form.
#[derive(Clone, Debug)]
pub struct SigmaXx {
    n: usize,
    images: Vec<Vec<f64>>,
}

pub fn sigma_xx(d: &Dataset) -> SigmaXx {
    SigmaXx {
        n: d.n,
        images: d.samples.iter().map(|s| s.image.clone()).collect(),
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl SigmaXx {
    pub fn n(&self) -> usize {
        self.n
    }

    /// `Σ^xx·v`.
    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.n * self.n {
            return Err(LabError::shape("vector length does not match n²"));
        }
        let inv = 1.0 / self.images.len() as f64;
        let mut out = vec![0.0; v.len()];
        for x in &self.images {
            let c = dot(x, v) * inv;
            out.iter_mut().zip(x).for_each(|(o, xi)| *o += c * xi);
        }
        Ok(out)
    }

    /// `Vᵀ Σ^xx V` for the given orthonormal vectors.
    pub fn project(&self, vs: &[Vec<f64>]) -> DMatrix<f64> {
        let k = vs.len();
        let inv = 1.0 / self.images.len() as f64;
        let mut m = DMatrix::zeros(k, k);
        for x in &self.images {
            let c: Vec<f64> = vs.iter().map(|v| dot(v, x)).collect();
            for a in 0..k {
                for b in 0..k {
                    m[(a, b)] += c[a] * c[b] * inv;
                }
            }
        }
        m
    }

    /// Dense `n²×n²` matrix, only for `n ≤ 64`.
    pub fn dense(&self) -> Result<DMatrix<f64>> {
        if self.n > SIGMA_XX_DENSE_CAP {
            return Err(LabError::CapExceeded { n: self.n, cap: SIGMA_XX_DENSE_CAP });
        }
        let nn = self.n * self.n;
        let inv = 1.0 / self.images.len() as f64;
        let mut m = DMatrix::zeros(nn, nn);
        for x in &self.images {
            let v = DVector::from_column_slice(x);
            m.ger(inv, &v, &v, 1.0);
        }
        Ok(m)
    }
}

/// SVD of `Σ^yx` plus the diagonal of `Σ^xx` in the right singular basis.
#[derive(Clone, Debug)]
pub struct SvdStructure {
    pub n: usize,
    /// `p×p`, column `α` pairs with `phi[α]`.
    pub u: DMatrix<f64>,
    /// Descending.
    pub s: Vec<f64>,
    pub phi: Vec<Vec<f64>>,
    pub sigma_xx_diag: Vec<f64>,
    /// Largest off-diagonal magnitude of `Vᵀ Σ^xx V`.
    pub residual: f64,
    /// Mode pairs whose singular values differ by less than [`TIE_TOL`].
    pub near_ties: Vec<(usize, usize)>,
}

impl SvdStructure {
    pub fn p(&self) -> usize {
        self.s.len()
    }

    /// `M^(α) = s_α·U[:,α]·φ^αᵀ`.
    pub fn mode(&self, alpha: usize) -> DMatrix<f64> {
        let u = self.u.column(alpha);
        let phi = DVector::from_column_slice(&self.phi[alpha]);
        &u * phi.transpose() * self.s[alpha]
    }

    /// `Σ_α M^(α)`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let nn = self.n * self.n;
        (0..self.p()).fold(DMatrix::zeros(self.u.nrows(), nn), |acc, a| acc + self.mode(a))
    }

    /// `p×n²` matrix whose rows are `φ^α`.
    pub fn phi_matrix(&self) -> DMatrix<f64> {
        let nn = self.n * self.n;
        DMatrix::from_fn(self.p(), nn, |a, i| self.phi[a][i])
    }
}

/// SVD of `Σ^yx` with the sign fixed so that the first entry of largest
/// magnitude in each `φ^α` is positive.
pub fn svd_structure(syx: &DMatrix<f64>, sxx: &SigmaXx) -> Result<SvdStructure> {
    let p = syx.nrows();
    let nn = syx.ncols();
    let n = side_length(nn)?;
    if n != sxx.n {
        return Err(LabError::shape("Σ^yx and Σ^xx disagree on n"));
    }
    if p == 0 || p > nn {
        return Err(LabError::shape(format!("need 1 <= p <= n², got p={p}")));
    }
    let svd = syx
        .clone()
        .try_svd(true, true, 1e-15, 10_000)
        .ok_or_else(|| LabError::Numerical("SVD did not converge".into()))?;
    let u_raw = svd.u.ok_or_else(|| LabError::Numerical("SVD returned no U".into()))?;
    let vt = svd.v_t.ok_or_else(|| LabError::Numerical("SVD returned no V".into()))?;
    let sv = svd.singular_values;

    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));

    let mut u = DMatrix::zeros(p, p);
    let mut s = Vec::with_capacity(p);
    let mut phi = Vec::with_capacity(p);
    for (dst, &src) in order.iter().enumerate() {
        let mut v: Vec<f64> = vt.row(src).iter().copied().collect();
        let mut col: Vec<f64> = u_raw.column(src).iter().copied().collect();
        let max = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let lead = v.iter().find(|x| x.abs() >= max * (1.0 - 1e-9)).copied().unwrap_or(0.0);
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
            col.iter_mut().for_each(|x| *x = -*x);
        }
        for (r, c) in col.into_iter().enumerate() {
            u[(r, dst)] = c;
        }
        s.push(sv[src].max(0.0));
        phi.push(v);
    }

    let proj = sxx.project(&phi);
    let sigma_xx_diag = (0..p).map(|a| proj[(a, a)]).collect();
    let mut residual = 0.0f64;
    for a in 0..p {
        for b in 0..p {
            if a != b {
                residual = residual.max(proj[(a, b)].abs());
            }
        }
    }
    let mut near_ties = Vec::new();
    for a in 0..p {
        for b in (a + 1)..p {
            if (s[a] - s[b]).abs() < TIE_TOL {
                near_ties.push((a, b));
            }
        }
    }
    Ok(SvdStructure { n, u, s, phi, sigma_xx_diag, residual, near_ties })
}

/// Convenience: statistics and SVD straight from a dataset.
pub fn dataset_svd(d: &Dataset) -> Result<SvdStructure> {
    svd_structure(&sigma_yx(d), &sigma_xx(d))
}

/// SVD of a disjoint-frequency cosine dataset with tied modes resolved.
///
/// Within a group of (near) equal singular values the SVD basis is
/// arbitrary. The class rows of `Σ^yx` are orthogonal here, so each tied
/// group is rebuilt from them and ordered by frequency set.
pub fn cosine_svd(d: &Dataset, spec: &CosineSpec) -> Result<(SvdStructure, ModeFrequencies)> {
    let syx = sigma_yx(d);
    let sxx = sigma_xx(d);
    let mut svd = svd_structure(&syx, &sxx)?;
    let p = svd.p();
    if !svd.near_ties.is_empty() {
        let mut group: Vec<usize> = (0..p).collect();
        for &(a, b) in &svd.near_ties {
            let (ga, gb) = (group[a], group[b]);
            let keep = ga.min(gb);
            group.iter_mut().filter(|g| **g == ga || **g == gb).for_each(|g| *g = keep);
        }
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (a, &g) in group.iter().enumerate() {
            groups.entry(g).or_default().push(a);
        }
        for slots in groups.values().filter(|v| v.len() > 1) {
            let mut classes: Vec<usize> = (0..p)
                .filter(|&c| slots.iter().map(|&a| svd.u[(c, a)].powi(2)).sum::<f64>() > 0.5)
                .collect();
            if classes.len() != slots.len() {
                return Err(LabError::Numerical("tied modes do not map onto classes".into()));
            }
            classes.sort_by_key(|&c| spec.symm_support(c));
            for (&slot, &c) in slots.iter().zip(&classes) {
                let row: Vec<f64> = syx.row(c).iter().copied().collect();
                let norm = dot(&row, &row).sqrt();
                let max = row.iter().fold(0.0f64, |m, x| m.max(x.abs()));
                let lead = row.iter().find(|x| x.abs() >= max * (1.0 - 1e-9)).copied().unwrap_or(1.0);
                let sign = if lead < 0.0 { -1.0 } else { 1.0 };
                svd.phi[slot] = row.iter().map(|v| sign * v / norm).collect();
                svd.s[slot] = norm;
                svd.u.column_mut(slot).fill(0.0);
                svd.u[(c, slot)] = sign;
            }
        }
        let proj = sxx.project(&svd.phi);
        svd.sigma_xx_diag = (0..p).map(|a| proj[(a, a)]).collect();
        svd.residual = (0..p * p)
            .filter(|k| k / p != k % p)
            .map(|k| proj[(k / p, k % p)].abs())
            .fold(0.0, f64::max);
    }
    let modes = ModeFrequencies::new(&svd, spec)?;
    Ok((svd, modes))
}

/// `⟨ŷ xᵀ⟩` from paired predictions and inputs.
pub fn sigma_yhat_x(preds: &[Vec<f64>], inputs: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    if preds.len() != inputs.len() || preds.is_empty() {
        return Err(LabError::shape(format!(
            "{} predictions vs {} inputs",
            preds.len(),
            inputs.len()
        )));
    }
    let p = preds[0].len();
    let nn = inputs[0].len();
    let inv = 1.0 / preds.len() as f64;
    let mut m = DMatrix::zeros(p, nn);
    for (y, x) in preds.iter().zip(inputs) {
        if y.len() != p || x.len() != nn {
            return Err(LabError::shape("ragged predictions or inputs"));
        }
        let yv = DVector::from_column_slice(y);
        let xv = DVector::from_column_slice(x);
        m.ger(inv, &yv, &xv, 1.0);
    }
    Ok(m)
}

/// `A = Uᵀ Σ^ŷx V` restricted to the first `p` columns of `V`.
#[derive(Clone, Debug)]
pub struct EffectiveA {
    pub a: DMatrix<f64>,
    /// Frobenius norm of `Uᵀ Σ^ŷx` outside the span of the `φ^α`.
    pub spillover: f64,
}

impl EffectiveA {
    pub fn diag(&self) -> Vec<f64> {
        (0..self.a.nrows()).map(|i| self.a[(i, i)]).collect()
    }

    pub fn offdiag_max(&self) -> f64 {
        let p = self.a.nrows();
        let mut m = 0.0f64;
        for i in 0..p {
            for j in 0..p {
                if i != j {
                    m = m.max(self.a[(i, j)].abs());
                }
            }
        }
        m
    }
}

pub fn effective_a(syhx: &DMatrix<f64>, svd: &SvdStructure) -> Result<EffectiveA> {
    let p = svd.p();
    if syhx.nrows() != p || syhx.ncols() != svd.n * svd.n {
        return Err(LabError::shape(format!(
            "Σ^ŷx is {}×{}, expected {}×{}",
            syhx.nrows(),
            syhx.ncols(),
            p,
            svd.n * svd.n
        )));
    }
    let phi = svd.phi_matrix();
    let ut = svd.u.transpose() * syhx;
    let a = &ut * phi.transpose();
    let spill = ut - &a * &phi;
    Ok(EffectiveA { a, spillover: spill.norm() })
}

/// Write the binary dataset format.
///
/// Layout, little endian: magic `LCDS`, `u32` version, `u32` n, `u32` p,
/// `u64` sample count, all images as `f64` row-major, then one `u16` label
/// per sample.
pub fn save_dataset(d: &Dataset, path: &Path) -> Result<()> {
    let nn = d.n * d.n;
    let mut buf = Vec::with_capacity(24 + d.len() * (nn * 8 + 2));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(d.n as u32).to_le_bytes());
    buf.extend_from_slice(&(d.p as u32).to_le_bytes());
    buf.extend_from_slice(&(d.len() as u64).to_le_bytes());
    for s in &d.samples {
        for v in &s.image {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    for s in &d.samples {
        let c = u16::try_from(s.class).map_err(|_| LabError::invalid("class index exceeds u16"))?;
        buf.extend_from_slice(&c.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    let bad = |reason: &str| LabError::Format { path: path.to_path_buf(), reason: reason.to_string() };
    if bytes.len() < 24 {
        return Err(bad("file shorter than header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(bad("bad magic"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != FORMAT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let n = u32_at(8) as usize;
    let p = u32_at(12) as usize;
    let count = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    if n == 0 {
        return Err(bad("n = 0"));
    }
    if p == 0 {
        return Err(bad("p = 0"));
    }
    let nn = n * n;
    let want = count
        .checked_mul(nn * 8 + 2)
        .and_then(|v| v.checked_add(24))
        .ok_or_else(|| bad("size overflow"))?;
    if bytes.len() < want {
        return Err(bad("truncated payload"));
    }
    if bytes.len() > want {
        return Err(bad("trailing bytes after payload"));
    }
    let label_off = 24 + count * nn * 8;
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let base = 24 + i * nn * 8;
        let image = (0..nn)
            .map(|k| f64::from_le_bytes(bytes[base + 8 * k..base + 8 * k + 8].try_into().unwrap()))
            .collect();
        let o = label_off + 2 * i;
        let class = u16::from_le_bytes([bytes[o], bytes[o + 1]]) as usize;
        if class >= p {
            return Err(bad(&format!("sample {i} has class {class} >= p={p}")));
        }
        samples.push(Sample { image, class });
    }
    Dataset::new(n, p, samples).map_err(|e| bad(&e.to_string()))
}

/// CSV export: header `class,x0,…`, then one row per sample.
pub fn write_dataset_csv(d: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["class".to_string()];
    header.extend((0..d.n * d.n).map(|i| format!("x{i}")));
    w.write_record(&header)?;
    for s in &d.samples {
        let mut row = vec![s.class.to_string()];
        row.extend(s.image.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Which class each SVD mode belongs to, and the frequencies it occupies,
/// for cosine datasets with disjoint class spectra.
#[derive(Clone, Debug)]
pub struct ModeFrequencies {
    pub n: usize,
    /// Spec class behind mode `α`.
    pub class_of_mode: Vec<usize>,
    /// `σ_symm^(α)` as sorted flat indices.
    pub support: Vec<Vec<usize>>,
    /// Modes whose singular values are tied with another mode.
    pub tied: Vec<bool>,
}

impl ModeFrequencies {
    /// Match modes to classes by where `Qφ^α` puts its energy. Each mode must
    /// sit inside exactly one class support.
    pub fn new(svd: &SvdStructure, spec: &CosineSpec) -> Result<Self> {
        spec.validate()?;
        if !spec.disjoint {
            return Err(LabError::Overlap("mode frequencies need a disjoint spec".into()));
        }
        let p = svd.p();
        if spec.classes.len() != p || spec.n != svd.n {
            return Err(LabError::shape("spec does not match the SVD structure"));
        }
        let fft = Fft2::new(svd.n)?;
        let supports: Vec<BTreeSet<usize>> = (0..p).map(|c| spec.symm_support(c)).collect();
        let mut class_of_mode = vec![usize::MAX; p];
        let mut used = vec![false; p];
        for (a, phi) in svd.phi.iter().enumerate() {
            let pw: Vec<f64> = fft.forward_real(phi).iter().map(|c| c.norm_sqr()).collect();
            let total: f64 = pw.iter().sum();
            let (best, frac) = supports
                .iter()
                .enumerate()
                .map(|(c, sup)| (c, sup.iter().map(|&j| pw[j]).sum::<f64>() / total))
                .max_by(|x, y| x.1.total_cmp(&y.1))
                .unwrap();
            if frac < 1.0 - 1e-6 || used[best] {
                return Err(LabError::Overlap(format!(
                    "mode {a} is not confined to a single class spectrum"
                )));
            }
            used[best] = true;
            class_of_mode[a] = best;
        }
        let mut tied = vec![false; p];
        for &(a, b) in &svd.near_ties {
            tied[a] = true;
            tied[b] = true;
        }
        let support = class_of_mode
            .iter()
            .map(|&c| supports[c].iter().copied().collect())
            .collect();
        Ok(ModeFrequencies { n: svd.n, class_of_mode, support, tied })
    }

    pub fn p(&self) -> usize {
        self.support.len()
    }

    /// Union of all mode supports.
    pub fn all_support(&self) -> BTreeSet<usize> {
        self.support.iter().flatten().copied().collect()
    }
}
