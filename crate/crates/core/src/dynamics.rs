//! Closed-form trajectories, the reduced winner-takes-all equations for the
//! kernel spectrum, and diagnostics on trained networks.

use std::collections::BTreeSet;

use num_complex::Complex64;
use serde::Serialize;

use crate::datasets::{CosineSpec, ModeFrequencies, SvdStructure};
use crate::models::{CnnState, LossMode, Network, PreparedDataset};
use crate::spectral::{symm_flat, wrap_angle, Fft2, FreqIndex};
use crate::{LabError, Result};

/// Parameters of one sigmoidal mode trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ModePrediction {
    pub alpha: usize,
    pub s: f64,
    pub d: f64,
    pub a0: f64,
    /// Learning rate under the `½Σ` loss.
    pub lambda: f64,
    pub n: usize,
}

impl ModePrediction {
    fn validate(&self) -> Result<()> {
        if !(self.a0 > 0.0) {
            return Err(LabError::invalid(format!("a0 must be positive, got {}", self.a0)));
        }
        if !(self.s > 0.0) || !(self.d > 0.0) || !(self.lambda >= 0.0) || self.n == 0 {
            return Err(LabError::invalid("mode prediction needs s, d > 0, λ >= 0, n >= 1"));
        }
        Ok(())
    }

    /// Exponent rate `2·n·λ·d·s`.
    pub fn rate(&self) -> f64 {
        2.0 * self.n as f64 * self.lambda * self.d * self.s
    }

    pub fn effective_lambda(&self) -> f64 {
        self.n as f64 * self.d * self.lambda
    }
}

/// `s·e^{rt} / (e^{rt} − 1 + s/a0)`, evaluated in an overflow-free form.
pub fn sigmoid(s: f64, a0: f64, rate: f64, t: f64) -> f64 {
    s / (1.0 + (s / a0 - 1.0) * (-rate * t).exp())
}

pub fn analytic_trajectory(m: &ModePrediction, t: &[f64]) -> Result<Vec<f64>> {
    m.validate()?;
    let r = m.rate();
    Ok(t.iter().map(|&ti| sigmoid(m.s, m.a0, r, ti)).collect())
}

/// FCNN sigmoid: rate `2·λ·s`, no `n` or `d`.
pub fn fcnn_analytic_trajectory(s: f64, a0: f64, lambda: f64, t: &[f64]) -> Result<Vec<f64>> {
    let m = ModePrediction { alpha: 0, s, d: 1.0, a0, lambda, n: 1 };
    analytic_trajectory(&m, t)
}

/// Exact time to go from `ε` to `s − ε` along the sigmoid.
pub fn learning_time(m: &ModePrediction, eps: f64) -> Result<f64> {
    m.validate()?;
    if !(eps > 0.0 && eps < m.s / 2.0) {
        return Err(LabError::invalid("ε must lie in (0, s/2)"));
    }
    Ok(((m.s - eps) * (m.s - eps) / (eps * eps)).ln() / m.rate())
}

/// Order-of-magnitude learning time `1/(s·λ_eff)` with `λ_eff = n·d·λ`.
pub fn learning_time_approx(m: &ModePrediction) -> f64 {
    1.0 / (m.s * m.effective_lambda())
}

/// Time at which the sigmoid reaches `s/2`.
pub fn half_rise_time(m: &ModePrediction) -> Result<f64> {
    m.validate()?;
    if m.a0 >= m.s / 2.0 {
        return Ok(0.0);
    }
    Ok((m.s / m.a0 - 1.0).ln() / m.rate())
}

/// Mismatch factor for a mode made of a single frequency pair: 1 for the
/// constant image, `1/√2` otherwise.
pub fn d_factor(freqs: &[FreqIndex]) -> Result<f64> {
    let canon: BTreeSet<usize> = freqs.iter().map(|f| f.canonical()).collect();
    if canon.len() != 1 {
        return Err(LabError::invalid(format!(
            "d is only defined for single-frequency modes, got {} frequencies",
            canon.len()
        )));
    }
    let f = freqs[0];
    if f.j == 0 {
        Ok(1.0)
    } else if f.is_self_symmetric() {
        Err(LabError::invalid(format!(
            "frequency ({},{}) is its own mirror; d is undefined",
            f.mu, f.nu
        )))
    } else {
        Ok(std::f64::consts::FRAC_1_SQRT_2)
    }
}

/// `d_α` from a mode's `σ_symm` support.
pub fn mode_d_factor(modes: &ModeFrequencies, alpha: usize) -> Result<f64> {
    let n = modes.n;
    let freqs = modes.support[alpha]
        .iter()
        .map(|&j| FreqIndex::from_flat(j, n))
        .collect::<Result<Vec<_>>>()?;
    d_factor(&freqs)
}

/// Output of [`wta_integrate`].
#[derive(Clone, Debug, Serialize)]
pub struct WtaTrajectory {
    pub steps: Vec<u64>,
    /// Flat indices whose `|Qk_j|²` is tracked.
    pub indices: Vec<usize>,
    /// `|Qk_j|²` per record, aligned with `indices`.
    pub power: Vec<Vec<f64>>,
    /// `a_α` per record.
    pub a: Vec<Vec<f64>>,
}

/// The reduced system `d|Qk_j|²/dt = 2nλ|Qk_j|²|Qφ^α_j|(s_α − a_α)` with
/// `a_α = n·Σ̄^xx_α·Σ_{j∈σ_symm(α)} |Qk_j|²·|Qφ^α_j|`.
#[derive(Clone, Debug)]
pub struct WtaSystem {
    n: usize,
    lambda: f64,
    s: Vec<f64>,
    sigma_bar: Vec<f64>,
    /// Per mode: `(position in state, |Qφ^α_j|)`.
    terms: Vec<Vec<(usize, f64)>>,
    pub indices: Vec<usize>,
}

impl WtaSystem {
    pub fn new(svd: &SvdStructure, spec: &CosineSpec, lambda: f64) -> Result<Self> {
        let modes = ModeFrequencies::new(svd, spec)?;
        let fft = Fft2::new(svd.n)?;
        let indices: Vec<usize> = modes.all_support().into_iter().collect();
        let pos = |j: usize| indices.binary_search(&j).expect("support index");
        let terms = (0..svd.p())
            .map(|a| {
                let ph = fft.forward_real(&svd.phi[a]);
                modes.support[a].iter().map(|&j| (pos(j), ph[j].norm())).collect()
            })
            .collect();
        Ok(WtaSystem {
            n: svd.n,
            lambda,
            s: svd.s.clone(),
            sigma_bar: svd.sigma_xx_diag.clone(),
            terms,
            indices,
        })
    }

    pub fn a(&self, q: &[f64]) -> Vec<f64> {
        self.terms
            .iter()
            .enumerate()
            .map(|(a, t)| {
                self.n as f64 * self.sigma_bar[a] * t.iter().map(|&(i, ph)| q[i] * ph).sum::<f64>()
            })
            .collect()
    }

    pub fn derivative(&self, q: &[f64]) -> Vec<f64> {
        let a = self.a(q);
        let mut dq = vec![0.0; q.len()];
        for (alpha, t) in self.terms.iter().enumerate() {
            for &(i, ph) in t {
                dq[i] = 2.0 * self.n as f64 * self.lambda * q[i] * ph * (self.s[alpha] - a[alpha]);
            }
        }
        dq
    }
}

/// Forward-Euler integration with a step of one sample.
///
/// `k_power0` is the full `n²` vector of `|Qk|²` at `t = 0`. Records every
/// `record_every` steps and at the end.
pub fn wta_integrate(
    svd: &SvdStructure,
    spec: &CosineSpec,
    k_power0: &[f64],
    lambda: f64,
    steps: u64,
    record_every: u64,
) -> Result<WtaTrajectory> {
    if k_power0.len() != svd.n * svd.n {
        return Err(LabError::shape("initial spectrum must have n² entries"));
    }
    if record_every == 0 {
        return Err(LabError::invalid("record_every must be at least 1"));
    }
    let sys = WtaSystem::new(svd, spec, lambda)?;
    let mut q: Vec<f64> = sys.indices.iter().map(|&j| k_power0[j]).collect();
    if let Some(i) = q.iter().position(|&v| !(v > 0.0)) {
        return Err(LabError::invalid(format!(
            "initial power at frequency {} must be positive",
            sys.indices[i]
        )));
    }
    let mut out = WtaTrajectory {
        steps: vec![0],
        indices: sys.indices.clone(),
        power: vec![q.clone()],
        a: vec![sys.a(&q)],
    };
    for t in 1..=steps {
        let dq = sys.derivative(&q);
        q.iter_mut().zip(&dq).for_each(|(v, d)| *v += d);
        if t % record_every == 0 || t == steps {
            out.steps.push(t);
            out.power.push(q.clone());
            out.a.push(sys.a(&q));
        }
    }
    Ok(out)
}

/// `W̄ = UᵀWQ⁻¹`, one complex row per mode.
pub fn w_bar(state: &CnnState, svd: &SvdStructure) -> Result<Vec<Vec<Complex64>>> {
    state.validate()?;
    if state.n != svd.n || state.p != svd.p() {
        return Err(LabError::shape("state does not match the SVD structure"));
    }
    let fft = Fft2::new(state.n)?;
    let utw = svd.u.transpose() * &state.w;
    Ok((0..state.p)
        .map(|a| {
            let row: Vec<f64> = utw.row(a).iter().copied().collect();
            // r·Q⁻¹ = conj(Q·r) for a real row r
            fft.forward_real(&row).into_iter().map(|c| c.conj()).collect()
        })
        .collect())
}

/// Phases of `Qφ^α`, `Qk` and row `α` of `W̄`.
#[derive(Clone, Debug, Serialize)]
pub struct PhaseVectors {
    pub delta_phi: Vec<f64>,
    pub delta_k: Vec<f64>,
    pub delta_w: Vec<f64>,
}

pub fn phase_vectors(state: &CnnState, svd: &SvdStructure, alpha: usize) -> Result<PhaseVectors> {
    let fft = Fft2::new(state.n)?;
    let wb = w_bar(state, svd)?;
    Ok(PhaseVectors {
        delta_phi: fft.forward_real(&svd.phi[alpha]).iter().map(|c| c.arg()).collect(),
        delta_k: fft.forward_real(&state.kernel).iter().map(|c| c.arg()).collect(),
        delta_w: wb[alpha].iter().map(|c| c.arg()).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Balance {
    pub alpha: usize,
    pub j: usize,
    /// `||W̄_{α,j}| − |Qk_j|| / |W̄_{α,j}|`, or `None` when `|W̄_{α,j}| < 1e-12`.
    pub value: Option<f64>,
}

/// Balancedness on every `(α, j)` with `j ∈ σ_symm(α)`.
pub fn balancedness_metric(state: &CnnState, svd: &SvdStructure, modes: &ModeFrequencies) -> Result<Vec<Balance>> {
    let wb = w_bar(state, svd)?;
    let ks = Fft2::new(state.n)?.forward_real(&state.kernel);
    let mut out = Vec::new();
    for (alpha, sup) in modes.support.iter().enumerate() {
        for &j in sup {
            let w = wb[alpha][j].norm();
            let value = (w >= 1e-12).then(|| (w - ks[j].norm()).abs() / w);
            out.push(Balance { alpha, j, value });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct RankedFreq {
    pub j: usize,
    pub phi_mag: f64,
    pub kernel_mag: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ModeFrequencyReport {
    pub alpha: usize,
    /// Frequencies where `|Qφ^α|` is within tolerance of its maximum.
    pub dominant: Vec<usize>,
    /// The mode's frequencies ranked by `|Qφ^α|`, at most 16 entries.
    pub ranked: Vec<RankedFreq>,
    /// Frequency of the mode with the largest `|Qk|`.
    pub kernel_winner: usize,
    pub winner_is_dominant: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct DominantFrequencyReport {
    pub modes: Vec<ModeFrequencyReport>,
    /// Fraction of `Σ|Qk|²` outside the union of dominant sets.
    pub energy_outside: f64,
    /// Number of coefficients counted by `top_fraction`.
    pub top_m: usize,
    /// Fraction of `Σ|Qk|²` in the `top_m` largest coefficients.
    pub top_fraction: f64,
    /// `(n² − PR)/(n² − 1)` with participation ratio `PR`; 0 for a flat
    /// spectrum, 1 for a single coefficient.
    pub sparsity: f64,
    /// Fraction of kernel energy on the dominant union.
    pub overlap: f64,
    /// Overlap expected from a flat spectrum.
    pub overlap_chance: f64,
}

/// Relative tolerance used to call a `|Qφ|` coefficient dominant.
pub const DOMINANT_TOL: f64 = 1e-6;

/// Compare the kernel spectrum with the spectra of the singular vectors.
///
/// A mode's frequencies are those where `|Qφ^α|` exceeds `1e-9` of its
/// maximum; `top_share` sets `top_m = ceil(top_share·n²)`.
pub fn dominant_frequency_report(state: &CnnState, svd: &SvdStructure, tol: f64, top_share: f64) -> Result<DominantFrequencyReport> {
    state.validate()?;
    if state.n != svd.n {
        return Err(LabError::shape("state does not match the SVD structure"));
    }
    let nn = state.n * state.n;
    let fft = Fft2::new(state.n)?;
    let kmag: Vec<f64> = fft.forward_real(&state.kernel).iter().map(|c| c.norm()).collect();
    let power: Vec<f64> = kmag.iter().map(|v| v * v).collect();
    let total: f64 = power.iter().sum();

    let mut union = BTreeSet::new();
    let mut modes = Vec::new();
    for (alpha, phi) in svd.phi.iter().enumerate() {
        let pm: Vec<f64> = fft.forward_real(phi).iter().map(|c| c.norm()).collect();
        let max = pm.iter().cloned().fold(0.0, f64::max);
        let dominant: Vec<usize> = (0..nn).filter(|&j| pm[j] >= (1.0 - tol) * max).collect();
        union.extend(dominant.iter().copied());
        let mut support: Vec<usize> = (0..nn).filter(|&j| pm[j] > 1e-9 * max).collect();
        support.sort_by(|&a, &b| pm[b].total_cmp(&pm[a]).then(a.cmp(&b)));
        let kernel_winner = *support
            .iter()
            .max_by(|&&a, &&b| kmag[a].total_cmp(&kmag[b]).then(b.cmp(&a)))
            .unwrap_or(&0);
        let winner_is_dominant =
            dominant.contains(&kernel_winner) || dominant.contains(&symm_flat(kernel_winner, state.n));
        let ranked = support
            .iter()
            .take(16)
            .map(|&j| RankedFreq { j, phi_mag: pm[j], kernel_mag: kmag[j] })
            .collect();
        modes.push(ModeFrequencyReport { alpha, dominant, ranked, kernel_winner, winner_is_dominant });
    }

    let inside: f64 = union.iter().map(|&j| power[j]).sum();
    let mut sorted = power.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let top_m = ((top_share * nn as f64).ceil() as usize).clamp(1, nn);
    let top: f64 = sorted[..top_m].iter().sum();
    let sq: f64 = power.iter().map(|v| v * v).sum();
    let (overlap, top_fraction, sparsity) = if total > 0.0 {
        let pr = total * total / sq;
        let sparsity = if nn > 1 { (nn as f64 - pr) / (nn as f64 - 1.0) } else { 0.0 };
        (inside / total, top / total, sparsity)
    } else {
        (0.0, 0.0, 0.0)
    };
    Ok(DominantFrequencyReport {
        modes,
        energy_outside: 1.0 - overlap,
        top_m,
        top_fraction,
        sparsity,
        overlap,
        overlap_chance: union.len() as f64 / nn as f64,
    })
}

/// Tolerances for [`verify_minimal_norm`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct MinNormTolerances {
    /// Relative error allowed on `s_α`.
    pub s_rel: f64,
    /// Radians, wrap-aware.
    pub phase: f64,
    /// Off-support `|W̄|` limit as a multiple of `‖W‖_F`.
    pub offsupport: f64,
    /// Dataset loss (`½Σ` form) above which the check does not apply.
    pub converged_loss: f64,
    /// Phases are compared only where `|Qk_j|²` is at least this fraction of
    /// the mode's largest `|Qk_j|²`.
    pub phase_floor: f64,
}

impl Default for MinNormTolerances {
    fn default() -> Self {
        MinNormTolerances { s_rel: 0.05, phase: 0.05, offsupport: 1e-3, converged_loss: 1e-4, phase_floor: 1e-2 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Pass,
    Fail,
    NotApplicable,
}

#[derive(Clone, Debug, Serialize)]
pub struct MinNormReport {
    pub verdict: Verdict,
    pub tolerances: MinNormTolerances,
    pub dataset_loss: f64,
    /// `n·Σ̄_α·Σ|Qφ^α_j|·|Qk_j|² / s_α` per mode.
    pub s_ratio: Vec<f64>,
    pub s_ok: bool,
    /// Largest wrapped `|δ_k + δ_w + δ_φ|` per mode on the phase support.
    pub phase_error: Vec<f64>,
    pub phase_ok: bool,
    pub offsupport_max: f64,
    pub offsupport_limit: f64,
    pub offsupport_ok: bool,
}

/// Check that a trained CNN sits at the minimal-norm solution.
///
/// `data` must carry mode frequencies.
pub fn verify_minimal_norm(state: &CnnState, data: &PreparedDataset, tol: &MinNormTolerances) -> Result<MinNormReport> {
    let modes = data
        .modes
        .as_ref()
        .ok_or_else(|| LabError::invalid("minimal-norm check needs a disjoint-frequency dataset"))?;
    let svd = &data.svd;
    let preds = state.predict_all(data);
    let dataset_loss = preds
        .iter()
        .zip(&data.labels)
        .map(|(yh, y)| crate::models::mse_loss(y, yh, LossMode::Theory))
        .sum::<Result<f64>>()?
        / data.len() as f64;

    let fft = Fft2::new(state.n)?;
    let ks = fft.forward_real(&state.kernel);
    let wb = w_bar(state, svd)?;
    let nf = state.n as f64;

    let mut s_ratio = Vec::new();
    let mut phase_error = Vec::new();
    let mut offsupport_max = 0.0f64;
    for (alpha, sup) in modes.support.iter().enumerate() {
        let ph = fft.forward_real(&svd.phi[alpha]);
        let lhs: f64 = sup.iter().map(|&j| ph[j].norm() * ks[j].norm_sqr()).sum::<f64>() * nf * svd.sigma_xx_diag[alpha];
        s_ratio.push(lhs / svd.s[alpha]);
        let kmax = sup.iter().map(|&j| ks[j].norm_sqr()).fold(0.0, f64::max);
        let err = sup
            .iter()
            .filter(|&&j| ks[j].norm_sqr() >= tol.phase_floor * kmax && kmax > 0.0)
            .map(|&j| wrap_angle(ks[j].arg() + wb[alpha][j].arg() + ph[j].arg()).abs())
            .fold(0.0, f64::max);
        phase_error.push(err);
        let on: BTreeSet<usize> = sup.iter().copied().collect();
        for (j, c) in wb[alpha].iter().enumerate() {
            if !on.contains(&j) {
                offsupport_max = offsupport_max.max(c.norm());
            }
        }
    }
    let offsupport_limit = tol.offsupport * state.w.norm();
    let s_ok = s_ratio.iter().all(|r| (r - 1.0).abs() <= tol.s_rel);
    let phase_ok = phase_error.iter().all(|&e| e <= tol.phase);
    let offsupport_ok = offsupport_max <= offsupport_limit;
    let verdict = if !(dataset_loss <= tol.converged_loss) {
        Verdict::NotApplicable
    } else if s_ok && phase_ok && offsupport_ok {
        Verdict::Pass
    } else {
        Verdict::Fail
    };
    Ok(MinNormReport {
        verdict,
        tolerances: *tol,
        dataset_loss,
        s_ratio,
        s_ok,
        phase_error,
        phase_ok,
        offsupport_max,
        offsupport_limit,
        offsupport_ok,
    })
}

/// A minimal-norm CNN built directly: per mode, all kernel power on the
/// dominant frequency pair with `|Qk_j|²` chosen so that the mode is learnt
/// exactly, zero kernel phase, and `W̄` balanced and phase matched.
pub fn minimal_norm_witness(svd: &SvdStructure, spec: &CosineSpec) -> Result<CnnState> {
    let modes = ModeFrequencies::new(svd, spec)?;
    let n = svd.n;
    let p = svd.p();
    let fft = Fft2::new(n)?;
    let mut kspec = vec![Complex64::new(0.0, 0.0); n * n];
    let mut rows = nalgebra::DMatrix::zeros(p, n * n);
    for alpha in 0..p {
        let ph = fft.forward_real(&svd.phi[alpha]);
        let max = modes.support[alpha].iter().map(|&j| ph[j].norm()).fold(0.0, f64::max);
        let dom: Vec<usize> = modes.support[alpha]
            .iter()
            .copied()
            .filter(|&j| ph[j].norm() >= (1.0 - DOMINANT_TOL) * max)
            .collect();
        let sum_phi: f64 = dom.iter().map(|&j| ph[j].norm()).sum();
        let mag2 = svd.s[alpha] / (n as f64 * svd.sigma_xx_diag[alpha] * sum_phi);
        let mut wbar = vec![Complex64::new(0.0, 0.0); n * n];
        for &j in &dom {
            kspec[j] = Complex64::new(mag2.sqrt(), 0.0);
            wbar[j] = Complex64::from_polar(mag2.sqrt(), -ph[j].arg());
        }
        let conj: Vec<Complex64> = wbar.iter().map(|c| c.conj()).collect();
        for (i, v) in fft.inverse_real(&conj).into_iter().enumerate() {
            rows[(alpha, i)] = v;
        }
    }
    Ok(CnnState { n, p, kernel: fft.inverse_real(&kspec), w: &svd.u * rows, step: 0 })
}
