//! Two-layer linear CNN `ŷ = W·dbc(K)·x`, the fully connected baseline
//! `ŷ = W²·W¹·x`, their gradients and the per-sample SGD trainer.

use std::collections::VecDeque;
use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datasets::{one_hot, CosineSpec, Dataset, ModeFrequencies, SvdStructure};
use crate::spectral::Fft2;
use crate::{LabError, Result};

/// Training aborts once a per-sample loss exceeds this.
pub const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    /// `½·Σ(y−ŷ)²`
    #[default]
    Theory,
    /// `(1/p)·Σ(y−ŷ)²`
    Framework,
}

impl LossMode {
    /// Factor on `(ŷ − y)` in `∂L/∂ŷ`.
    pub fn grad_scale(self, p: usize) -> f64 {
        match self {
            LossMode::Theory => 1.0,
            LossMode::Framework => 2.0 / p as f64,
        }
    }
}

/// Learning rate that gives the same updates under the `½Σ` loss.
pub fn theory_lambda(lambda: f64, mode: LossMode, p: usize) -> f64 {
    lambda * mode.grad_scale(p)
}

pub fn mse_loss(y: &[f64], yhat: &[f64], mode: LossMode) -> Result<f64> {
    if y.len() != yhat.len() {
        return Err(LabError::shape("label and prediction lengths differ"));
    }
    Ok(loss_unchecked(y, yhat, mode))
}

fn loss_unchecked(y: &[f64], yhat: &[f64], mode: LossMode) -> f64 {
    let sq: f64 = y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum();
    match mode {
        LossMode::Theory => 0.5 * sq,
        LossMode::Framework => sq / y.len() as f64,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingPolicy {
    /// Independent uniform draw of a sample per update.
    UniformRandom,
    /// Fresh random permutation of the samples each epoch.
    #[default]
    EpochShuffle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda: f64,
    #[serde(default)]
    pub loss: LossMode,
    pub updates: u64,
    #[serde(default)]
    pub sampling: SamplingPolicy,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_record_every")]
    pub record_every: u64,
    #[serde(default = "default_loss_window")]
    pub loss_window: usize,
    /// Flat frequency indices whose `|Qk_j|²` is logged.
    #[serde(default)]
    pub spectrum_indices: Vec<usize>,
}

fn default_record_every() -> u64 {
    10
}

fn default_loss_window() -> usize {
    50
}

impl TrainConfig {
    pub fn new(lambda: f64, updates: u64) -> Self {
        TrainConfig {
            lambda,
            loss: LossMode::Theory,
            updates,
            sampling: SamplingPolicy::EpochShuffle,
            seed: 0,
            record_every: default_record_every(),
            loss_window: default_loss_window(),
            spectrum_indices: Vec::new(),
        }
    }

    /// `λ = 0` is accepted and yields a frozen run.
    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(LabError::Config(format!("learning rate {} is not usable", self.lambda)));
        }
        if self.record_every == 0 {
            return Err(LabError::Config("record_every must be at least 1".into()));
        }
        if self.loss_window == 0 {
            return Err(LabError::Config("loss_window must be at least 1".into()));
        }
        Ok(())
    }
}

/// Kernel `k` and dense layer `W` of the linear CNN.
#[derive(Clone, Debug, PartialEq)]
pub struct CnnState {
    pub n: usize,
    pub p: usize,
    pub kernel: Vec<f64>,
    /// `p×n²`
    pub w: DMatrix<f64>,
    pub step: u64,
}

impl CnnState {
    pub fn zeros(n: usize, p: usize) -> Self {
        CnnState { n, p, kernel: vec![0.0; n * n], w: DMatrix::zeros(p, n * n), step: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        let nn = self.n * self.n;
        if self.kernel.len() != nn || self.w.nrows() != self.p || self.w.ncols() != nn {
            return Err(LabError::shape("CNN state dimensions are inconsistent"));
        }
        Ok(())
    }
}

/// Weights of the linear FCNN with `n²` hidden units.
#[derive(Clone, Debug, PartialEq)]
pub struct FcnnState {
    pub n: usize,
    pub p: usize,
    /// `n²×n²`
    pub w1: DMatrix<f64>,
    /// `p×n²`
    pub w2: DMatrix<f64>,
    pub step: u64,
}

impl FcnnState {
    pub fn zeros(n: usize, p: usize) -> Self {
        let nn = n * n;
        FcnnState { n, p, w1: DMatrix::zeros(nn, nn), w2: DMatrix::zeros(p, nn), step: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        let nn = self.n * self.n;
        if self.w1.shape() != (nn, nn) || self.w2.shape() != (self.p, nn) {
            return Err(LabError::shape("FCNN state dimensions are inconsistent"));
        }
        Ok(())
    }
}

fn check_x(n: usize, x: &[f64]) -> Result<()> {
    if x.len() != n * n {
        return Err(LabError::shape(format!("input has {} entries, expected {}", x.len(), n * n)));
    }
    Ok(())
}

fn check_y(p: usize, y: &[f64]) -> Result<()> {
    if y.len() != p {
        return Err(LabError::shape(format!("label has {} entries, expected {p}", y.len())));
    }
    Ok(())
}

fn conv_spectra(fft: &Fft2, xs: &[Complex64], ks: &[Complex64]) -> Vec<f64> {
    let n = fft.n() as f64;
    let prod: Vec<Complex64> = xs.iter().zip(ks).map(|(a, b)| a * b * n).collect();
    fft.inverse_real(&prod)
}

/// Returns `(ŷ, h)` with `h = vec(X ⊛ K)` and `ŷ = W·h`.
pub fn cnn_forward(state: &CnnState, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    state.validate()?;
    check_x(state.n, x)?;
    let fft = Fft2::new(state.n)?;
    let h = conv_spectra(&fft, &fft.forward_real(x), &fft.forward_real(&state.kernel));
    let yhat = (&state.w * DVector::from_column_slice(&h)).as_slice().to_vec();
    Ok((yhat, h))
}

#[derive(Clone, Debug)]
pub struct CnnGrads {
    pub dk: Vec<f64>,
    pub dw: DMatrix<f64>,
}

/// `∂L/∂W = e·hᵀ` and `∂L/∂k = dbc(X_flip)·Wᵀe` with `e = ∂L/∂ŷ`.
pub fn cnn_gradients(state: &CnnState, x: &[f64], y: &[f64], mode: LossMode) -> Result<CnnGrads> {
    state.validate()?;
    check_x(state.n, x)?;
    check_y(state.p, y)?;
    let fft = Fft2::new(state.n)?;
    let xs = fft.forward_real(x);
    let ks = fft.forward_real(&state.kernel);
    let (dk, dw, _) = cnn_grads_inner(&fft, state, &xs, &ks, y, mode);
    Ok(CnnGrads { dk, dw })
}

fn cnn_grads_inner(
    fft: &Fft2,
    state: &CnnState,
    xs: &[Complex64],
    ks: &[Complex64],
    y: &[f64],
    mode: LossMode,
) -> (Vec<f64>, DMatrix<f64>, f64) {
    let n = fft.n() as f64;
    let h = DVector::from_vec(conv_spectra(fft, xs, ks));
    let yhat = &state.w * &h;
    let loss = loss_unchecked(y, yhat.as_slice(), mode);
    let scale = mode.grad_scale(state.p);
    let e = DVector::from_iterator(state.p, yhat.iter().zip(y).map(|(a, b)| scale * (a - b)));
    let g = state.w.tr_mul(&e);
    let gs = fft.forward_real(g.as_slice());
    // dbc(X_flip)·g in the Fourier domain: Q(flip x) = conj(Qx) for real x
    let prod: Vec<Complex64> = xs.iter().zip(&gs).map(|(a, b)| a.conj() * b * n).collect();
    let dk = fft.inverse_real(&prod);
    let dw = &e * h.transpose();
    (dk, dw, loss)
}

/// Returns `(ŷ, h)` with `h = W¹x`, `ŷ = W²h`.
pub fn fcnn_forward(state: &FcnnState, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    state.validate()?;
    check_x(state.n, x)?;
    let h = &state.w1 * DVector::from_column_slice(x);
    let yhat = &state.w2 * &h;
    Ok((yhat.as_slice().to_vec(), h.as_slice().to_vec()))
}

#[derive(Clone, Debug)]
pub struct FcnnGrads {
    pub dw1: DMatrix<f64>,
    pub dw2: DMatrix<f64>,
}

pub fn fcnn_gradients(state: &FcnnState, x: &[f64], y: &[f64], mode: LossMode) -> Result<FcnnGrads> {
    state.validate()?;
    check_x(state.n, x)?;
    check_y(state.p, y)?;
    let xv = DVector::from_column_slice(x);
    let h = &state.w1 * &xv;
    let yhat = &state.w2 * &h;
    let scale = mode.grad_scale(state.p);
    let e = DVector::from_iterator(state.p, yhat.iter().zip(y).map(|(a, b)| scale * (a - b)));
    let dw2 = &e * h.transpose();
    let dw1 = state.w2.tr_mul(&e) * xv.transpose();
    Ok(FcnnGrads { dw1, dw2 })
}

/// Dataset with image spectra and `Φx` projections cached for training.
#[derive(Clone, Debug)]
pub struct PreparedDataset {
    pub n: usize,
    pub p: usize,
    pub images: Vec<Vec<f64>>,
    pub labels: Vec<Vec<f64>>,
    pub spectra: Vec<Vec<Complex64>>,
    pub fft: Fft2,
    pub svd: SvdStructure,
    /// `Φ·x_s` per sample, used for the effective `A`.
    pub phi_x: Vec<Vec<f64>>,
    pub modes: Option<ModeFrequencies>,
}

impl PreparedDataset {
    pub fn new(d: &Dataset, svd: &SvdStructure, modes: Option<ModeFrequencies>) -> Result<Self> {
        if svd.n != d.n() || svd.p() != d.p() {
            return Err(LabError::shape("SVD structure does not match the dataset"));
        }
        let fft = Fft2::new(d.n())?;
        let images: Vec<Vec<f64>> = d.samples().iter().map(|s| s.image.clone()).collect();
        let labels = d.samples().iter().map(|s| one_hot(s.class, d.p())).collect();
        let spectra = images.iter().map(|x| fft.forward_real(x)).collect();
        let phi_x = images
            .iter()
            .map(|x| svd.phi.iter().map(|phi| phi.iter().zip(x).map(|(a, b)| a * b).sum()).collect())
            .collect();
        Ok(PreparedDataset {
            n: d.n(),
            p: d.p(),
            images,
            labels,
            spectra,
            fft,
            svd: svd.clone(),
            phi_x,
            modes,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Effective `A = Uᵀ·⟨ŷ (Φx)ᵀ⟩` from predictions on every sample.
    pub fn effective_a(&self, preds: &[Vec<f64>]) -> DMatrix<f64> {
        let p = self.p;
        let mut m = DMatrix::zeros(p, p);
        let inv = 1.0 / self.len() as f64;
        for (y, px) in preds.iter().zip(&self.phi_x) {
            for a in 0..p {
                for b in 0..p {
                    m[(a, b)] += y[a] * px[b] * inv;
                }
            }
        }
        self.svd.u.transpose() * m
    }
}

/// Common surface of the two network types for the trainer.
pub trait Network {
    fn step(&self) -> u64;
    fn predict_all(&self, data: &PreparedDataset) -> Vec<Vec<f64>>;
    /// One simultaneous update of all parameters on sample `i`; returns the
    /// loss before the update.
    fn sgd_step(&mut self, data: &PreparedDataset, i: usize, lambda: f64, mode: LossMode) -> f64;
    /// `|Qk_j|²` at the given indices, if the network has a kernel.
    fn kernel_power(&self, data: &PreparedDataset, indices: &[usize]) -> Vec<f64>;
    /// Balancedness values keyed by `(α, j)`, if defined for this network.
    fn balancedness(&self, data: &PreparedDataset) -> Vec<((usize, usize), Option<f64>)>;
}

impl Network for CnnState {
    fn step(&self) -> u64 {
        self.step
    }

    fn predict_all(&self, data: &PreparedDataset) -> Vec<Vec<f64>> {
        let ks = data.fft.forward_real(&self.kernel);
        data.spectra
            .iter()
            .map(|xs| {
                let h = DVector::from_vec(conv_spectra(&data.fft, xs, &ks));
                (&self.w * h).as_slice().to_vec()
            })
            .collect()
    }

    fn sgd_step(&mut self, data: &PreparedDataset, i: usize, lambda: f64, mode: LossMode) -> f64 {
        let ks = data.fft.forward_real(&self.kernel);
        let (dk, dw, loss) = cnn_grads_inner(&data.fft, self, &data.spectra[i], &ks, &data.labels[i], mode);
        self.w -= dw * lambda;
        self.kernel.iter_mut().zip(&dk).for_each(|(k, g)| *k -= lambda * g);
        self.step += 1;
        loss
    }

    fn kernel_power(&self, data: &PreparedDataset, indices: &[usize]) -> Vec<f64> {
        if indices.is_empty() {
            return Vec::new();
        }
        let ks = data.fft.forward_real(&self.kernel);
        indices.iter().map(|&j| ks[j].norm_sqr()).collect()
    }

    fn balancedness(&self, data: &PreparedDataset) -> Vec<((usize, usize), Option<f64>)> {
        match &data.modes {
            Some(modes) => crate::dynamics::balancedness_metric(self, &data.svd, modes)
                .map(|v| v.into_iter().map(|b| ((b.alpha, b.j), b.value)).collect())
                .unwrap_or_default(),
            None => Vec::new(),
        }
    }
}

impl Network for FcnnState {
    fn step(&self) -> u64 {
        self.step
    }

    fn predict_all(&self, data: &PreparedDataset) -> Vec<Vec<f64>> {
        let m = &self.w2 * &self.w1;
        data.images
            .iter()
            .map(|x| (&m * DVector::from_column_slice(x)).as_slice().to_vec())
            .collect()
    }

    fn sgd_step(&mut self, data: &PreparedDataset, i: usize, lambda: f64, mode: LossMode) -> f64 {
        let xv = DVector::from_column_slice(&data.images[i]);
        let h = &self.w1 * &xv;
        let yhat = &self.w2 * &h;
        let y = &data.labels[i];
        let loss = loss_unchecked(y, yhat.as_slice(), mode);
        let scale = mode.grad_scale(self.p);
        let e = DVector::from_iterator(self.p, yhat.iter().zip(y).map(|(a, b)| scale * (a - b)));
        let back = self.w2.tr_mul(&e);
        self.w2.ger(-lambda, &e, &h, 1.0);
        self.w1.ger(-lambda, &back, &xv, 1.0);
        self.step += 1;
        loss
    }

    fn kernel_power(&self, _data: &PreparedDataset, _indices: &[usize]) -> Vec<f64> {
        Vec::new()
    }

    fn balancedness(&self, _data: &PreparedDataset) -> Vec<((usize, usize), Option<f64>)> {
        Vec::new()
    }
}

/// One logged point of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub step: u64,
    /// Mean per-sample loss over the recent window (dataset loss at step 0).
    pub loss: f64,
    /// Mean loss over the full dataset at this step.
    pub dataset_loss: f64,
    /// Effective `A`, row-major `p×p`.
    pub a: Vec<f64>,
    pub offdiag_max: f64,
    pub spectrum: Vec<f64>,
    pub balancedness: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryLog {
    pub p: usize,
    pub spectrum_indices: Vec<usize>,
    pub balance_keys: Vec<(usize, usize)>,
    pub records: Vec<Record>,
}

impl TrajectoryLog {
    pub fn steps(&self) -> Vec<u64> {
        self.records.iter().map(|r| r.step).collect()
    }

    /// `a_α` over the run.
    pub fn a_diag(&self, alpha: usize) -> Vec<f64> {
        self.records.iter().map(|r| r.a[alpha * self.p + alpha]).collect()
    }

    pub fn column_names(&self) -> Vec<String> {
        let mut cols = vec!["loss".to_string(), "dataset_loss".to_string()];
        cols.extend((0..self.p).map(|a| format!("a_{a}")));
        cols.push("offdiag_max".into());
        cols.extend(self.spectrum_indices.iter().map(|j| format!("k2_{j}")));
        cols.extend(self.balance_keys.iter().map(|(a, j)| format!("bal_{a}_{j}")));
        cols
    }

    /// Values in [`column_names`](Self::column_names) order; undefined
    /// balancedness entries become NaN.
    pub fn row_values(&self, r: &Record) -> Vec<f64> {
        let mut v = vec![r.loss, r.dataset_loss];
        v.extend((0..self.p).map(|a| r.a[a * self.p + a]));
        v.push(r.offdiag_max);
        v.extend(&r.spectrum);
        v.extend(r.balancedness.iter().map(|b| b.unwrap_or(f64::NAN)));
        v
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["step".to_string()];
        header.extend(self.column_names());
        out.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![r.step.to_string()];
            row.extend(self.row_values(r).iter().map(|v| if v.is_nan() { String::new() } else { v.to_string() }));
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(fs::File::create(path)?)
    }
}

struct Sampler {
    policy: SamplingPolicy,
    rng: ChaCha8Rng,
    len: usize,
    order: Vec<usize>,
    pos: usize,
}

impl Sampler {
    fn new(policy: SamplingPolicy, seed: u64, len: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Sampler { policy, rng, len, order: (0..len).collect(), pos: len }
    }

    fn next(&mut self) -> usize {
        match self.policy {
            SamplingPolicy::UniformRandom => self.rng.random_range(0..self.len),
            SamplingPolicy::EpochShuffle => {
                if self.pos == self.len {
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            }
        }
    }
}

fn init_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    rng
}

fn record<N: Network>(net: &N, data: &PreparedDataset, cfg: &TrainConfig, window: Option<f64>) -> Record {
    let preds = net.predict_all(data);
    let dataset_loss = preds
        .iter()
        .zip(&data.labels)
        .map(|(yh, y)| loss_unchecked(y, yh, cfg.loss))
        .sum::<f64>()
        / data.len() as f64;
    let a = data.effective_a(&preds);
    let p = data.p;
    let mut offdiag_max = 0.0f64;
    for i in 0..p {
        for j in 0..p {
            if i != j {
                offdiag_max = offdiag_max.max(a[(i, j)].abs());
            }
        }
    }
    let a_vec = (0..p * p).map(|k| a[(k / p, k % p)]).collect();
    Record {
        step: net.step(),
        loss: window.unwrap_or(dataset_loss),
        dataset_loss,
        a: a_vec,
        offdiag_max,
        spectrum: net.kernel_power(data, &cfg.spectrum_indices),
        balancedness: net.balancedness(data).into_iter().map(|(_, v)| v).collect(),
    }
}

/// Per-sample gradient descent on any [`Network`].
///
/// Deterministic for a given `cfg.seed`. The sample order comes from its own
/// random stream, so networks sharing a seed see the same sequence.
pub fn train<N: Network>(net: &mut N, data: &PreparedDataset, cfg: &TrainConfig) -> Result<TrajectoryLog> {
    cfg.validate()?;
    if let Some(&j) = cfg.spectrum_indices.iter().find(|&&j| j >= data.n * data.n) {
        return Err(LabError::Config(format!("spectrum index {j} out of range")));
    }
    let balance_keys = net.balancedness(data).into_iter().map(|(k, _)| k).collect();
    let mut log = TrajectoryLog {
        p: data.p,
        spectrum_indices: cfg.spectrum_indices.clone(),
        balance_keys,
        records: vec![record(net, data, cfg, None)],
    };
    let mut sampler = Sampler::new(cfg.sampling, cfg.seed, data.len());
    let mut window: VecDeque<f64> = VecDeque::with_capacity(cfg.loss_window);
    for u in 1..=cfg.updates {
        let i = sampler.next();
        let loss = net.sgd_step(data, i, cfg.lambda, cfg.loss);
        if !loss.is_finite() || loss > DIVERGENCE_LOSS {
            return Err(LabError::Divergence { step: net.step(), loss });
        }
        if window.len() == cfg.loss_window {
            window.pop_front();
        }
        window.push_back(loss);
        if u % cfg.record_every == 0 || u == cfg.updates {
            let mean = window.iter().sum::<f64>() / window.len() as f64;
            log.records.push(record(net, data, cfg, Some(mean)));
        }
    }
    Ok(log)
}

/// SGD on the linear CNN.
pub fn sgd_train(state: &mut CnnState, data: &PreparedDataset, cfg: &TrainConfig) -> Result<TrajectoryLog> {
    state.validate()?;
    if state.n != data.n || state.p != data.p {
        return Err(LabError::shape("state does not match the dataset"));
    }
    train(state, data, cfg)
}

/// SGD on the linear FCNN.
pub fn fcnn_train(state: &mut FcnnState, data: &PreparedDataset, cfg: &TrainConfig) -> Result<TrajectoryLog> {
    state.validate()?;
    if state.n != data.n || state.p != data.p {
        return Err(LabError::shape("state does not match the dataset"));
    }
    train(state, data, cfg)
}

fn normal(sigma: f64) -> Result<Normal<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(LabError::invalid(format!("init sigma must be positive, got {sigma}")));
    }
    Normal::new(0.0, sigma).map_err(|e| LabError::invalid(e.to_string()))
}

/// All entries of `k` and `W` drawn i.i.d. from `N(0, σ²)`.
pub fn init_random(n: usize, p: usize, sigma: f64, seed: u64) -> Result<CnnState> {
    let dist = normal(sigma)?;
    let mut rng = init_rng(seed);
    let kernel = (0..n * n).map(|_| dist.sample(&mut rng)).collect();
    let w = DMatrix::from_fn(p, n * n, |_, _| dist.sample(&mut rng));
    Ok(CnnState { n, p, kernel, w, step: 0 })
}

/// All entries of `W¹` and `W²` drawn i.i.d. from `N(0, σ²)`.
pub fn fcnn_init_random(n: usize, p: usize, sigma: f64, seed: u64) -> Result<FcnnState> {
    let dist = normal(sigma)?;
    let mut rng = init_rng(seed);
    let nn = n * n;
    let w1 = DMatrix::from_fn(nn, nn, |_, _| dist.sample(&mut rng));
    let w2 = DMatrix::from_fn(p, nn, |_, _| dist.sample(&mut rng));
    Ok(FcnnState { n, p, w1, w2, step: 0 })
}

/// Random small kernel with `W = U·W̄·Q`, where row `α` of `W̄` has
/// magnitude `|Qk|` on the frequencies of mode `α`, phase
/// `−(δ_φ + δ_k)`, and is zero elsewhere. The effective `A` is diagonal.
pub fn init_aligned_balanced(svd: &SvdStructure, spec: &CosineSpec, sigma: f64, seed: u64) -> Result<CnnState> {
    let modes = ModeFrequencies::new(svd, spec)?;
    let n = svd.n;
    let p = svd.p();
    let dist = normal(sigma)?;
    let mut rng = init_rng(seed);
    let kernel: Vec<f64> = (0..n * n).map(|_| dist.sample(&mut rng)).collect();
    let fft = Fft2::new(n)?;
    let ks = fft.forward_real(&kernel);
    let mut rows = DMatrix::zeros(p, n * n);
    for a in 0..p {
        let ph = fft.forward_real(&svd.phi[a]);
        let mut wbar = vec![Complex64::new(0.0, 0.0); n * n];
        for &j in &modes.support[a] {
            wbar[j] = Complex64::from_polar(ks[j].norm(), -(ph[j].arg() + ks[j].arg()));
        }
        // row r of UᵀW satisfies W̄_α = conj(Q·r)
        let conj: Vec<Complex64> = wbar.iter().map(|c| c.conj()).collect();
        let r = fft.inverse_real(&conj);
        for (i, v) in r.into_iter().enumerate() {
            rows[(a, i)] = v;
        }
    }
    Ok(CnnState { n, p, kernel, w: &svd.u * rows, step: 0 })
}

/// FCNN counterpart of the aligned init: `W¹` rows `α < p` are `c_α·φ^αᵀ`,
/// `W²` columns `α < p` are `c_α·U[:,α]`, with `c_α = √(A_α / Σ̄^xx_α)`, so
/// the effective `A` starts at `diag(a_init)`.
pub fn fcnn_init_aligned(svd: &SvdStructure, a_init: &[f64]) -> Result<FcnnState> {
    let p = svd.p();
    if a_init.len() != p {
        return Err(LabError::shape("a_init length must equal p"));
    }
    let mut st = FcnnState::zeros(svd.n, p);
    for a in 0..p {
        if !(a_init[a] > 0.0) || !(svd.sigma_xx_diag[a] > 0.0) {
            return Err(LabError::invalid(format!("mode {a} needs positive A_init and Σ̄^xx")));
        }
        let c = (a_init[a] / svd.sigma_xx_diag[a]).sqrt();
        for (i, v) in svd.phi[a].iter().enumerate() {
            st.w1[(a, i)] = c * v;
        }
        for r in 0..p {
            st.w2[(r, a)] = c * svd.u[(r, a)];
        }
    }
    Ok(st)
}

/// Saved network of either kind.
#[derive(Clone, Debug, PartialEq)]
pub enum Checkpoint {
    Cnn(CnnState),
    Fcnn(FcnnState),
}

const CK_MAGIC: &[u8; 4] = b"LCCK";
const CK_VERSION: u32 = 1;

/// Layout, little endian: magic `LCCK`, `u32` version, `u8` kind (0 CNN,
/// 1 FCNN), `u32` n, `u32` p, `u64` step, then `f64` arrays row-major:
/// `k` and `W` for the CNN, `W¹` and `W²` for the FCNN.
pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CK_MAGIC);
    buf.extend_from_slice(&CK_VERSION.to_le_bytes());
    let (kind, n, p, step) = match ck {
        Checkpoint::Cnn(s) => (0u8, s.n, s.p, s.step),
        Checkpoint::Fcnn(s) => (1u8, s.n, s.p, s.step),
    };
    buf.push(kind);
    buf.extend_from_slice(&(n as u32).to_le_bytes());
    buf.extend_from_slice(&(p as u32).to_le_bytes());
    buf.extend_from_slice(&step.to_le_bytes());
    let mut put = |m: &DMatrix<f64>| {
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                buf.extend_from_slice(&m[(r, c)].to_le_bytes());
            }
        }
    };
    match ck {
        Checkpoint::Cnn(s) => {
            put(&DMatrix::from_row_slice(1, s.kernel.len(), &s.kernel));
            put(&s.w);
        }
        Checkpoint::Fcnn(s) => {
            put(&s.w1);
            put(&s.w2);
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    let bad = |reason: &str| LabError::Format { path: path.to_path_buf(), reason: reason.to_string() };
    const HDR: usize = 25;
    if bytes.len() < HDR || &bytes[0..4] != CK_MAGIC {
        return Err(bad("not a checkpoint"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    if u32_at(4) != CK_VERSION {
        return Err(bad("unsupported version"));
    }
    let kind = bytes[8];
    let n = u32_at(9) as usize;
    let p = u32_at(13) as usize;
    let step = u64::from_le_bytes(bytes[17..25].try_into().unwrap());
    if n == 0 || p == 0 {
        return Err(bad("zero dimension"));
    }
    let nn = n * n;
    let count = match kind {
        0 => nn + p * nn,
        1 => nn * nn + p * nn,
        _ => return Err(bad("unknown network kind")),
    };
    if bytes.len() != HDR + 8 * count {
        return Err(bad("payload length does not match header"));
    }
    let vals: Vec<f64> = bytes[HDR..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(match kind {
        0 => Checkpoint::Cnn(CnnState {
            n,
            p,
            kernel: vals[..nn].to_vec(),
            w: DMatrix::from_row_slice(p, nn, &vals[nn..]),
            step,
        }),
        _ => Checkpoint::Fcnn(FcnnState {
            n,
            p,
            w1: DMatrix::from_row_slice(nn, nn, &vals[..nn * nn]),
            w2: DMatrix::from_row_slice(p, nn, &vals[nn * nn..]),
            step,
        }),
    })
}

/// Deterministic content digest of a CNN state, for reproducibility checks.
pub fn state_digest(state: &CnnState) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for v in state.kernel.iter().chain(state.w.iter()) {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}
