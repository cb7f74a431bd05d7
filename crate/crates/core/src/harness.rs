//! Experiment configs, multi-trial runs, aggregation, persistence and
//! figure output.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datasets::{
    cosine_svd, dataset_svd, gen_geometric_shapes, gen_pure_cosines, gen_sums_of_cosines, load_dataset, CosineComponent,
    CosineSpec, Dataset, ModeFrequencies, SvdStructure,
};
use crate::dynamics::{analytic_trajectory, fcnn_analytic_trajectory, mode_d_factor, ModePrediction};
use crate::models::{
    fcnn_init_aligned, fcnn_init_random, fcnn_train, init_aligned_balanced, init_random, save_checkpoint,
    sgd_train, theory_lambda, Checkpoint, CnnState, LossMode, Network, PreparedDataset, SamplingPolicy,
    TrainConfig, TrajectoryLog,
};
use crate::spectral::Fft2;
use crate::{LabError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetSource {
    PureCosines(CosineSpec),
    SumsOfCosines(CosineSpec),
    GeometricShapes { n: usize },
    File { path: PathBuf },
}

impl DatasetSource {
    pub fn build(&self) -> Result<(Dataset, Option<CosineSpec>)> {
        Ok(match self {
            DatasetSource::PureCosines(spec) => (gen_pure_cosines(spec)?, Some(spec.clone())),
            DatasetSource::SumsOfCosines(spec) => (gen_sums_of_cosines(spec)?, Some(spec.clone())),
            DatasetSource::GeometricShapes { n } => (gen_geometric_shapes(*n)?, None),
            DatasetSource::File { path } => (load_dataset(path)?, None),
        })
    }

    fn default_record_every(&self, n: usize) -> u64 {
        match self {
            DatasetSource::File { .. } => 500,
            _ if n <= 16 => 10,
            _ => 100,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    #[default]
    Cnn,
    Fcnn,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum InitSpec {
    Random { sigma: f64 },
    AlignedBalanced { sigma: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSection {
    pub lambda: f64,
    #[serde(default)]
    pub loss: LossMode,
    pub updates: u64,
    #[serde(default)]
    pub sampling: SamplingPolicy,
    /// Defaults to 10 for n ≤ 16, 100 for larger generated data, 500 for files.
    #[serde(default)]
    pub record_every: Option<u64>,
    #[serde(default = "default_window")]
    pub loss_window: usize,
    /// FCNN learning rate; defaults to `n·λ`.
    #[serde(default)]
    pub lambda_fc: Option<f64>,
    /// `|Qk_j|²` indices to log; chosen from the dataset when absent.
    #[serde(default)]
    pub spectrum_indices: Option<Vec<usize>>,
}

fn default_window() -> usize {
    50
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialSpec {
    pub count: usize,
    #[serde(default)]
    pub base_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputSpec {
    #[serde(default)]
    pub dir: Option<PathBuf>,
    #[serde(default = "default_true")]
    pub theory_overlay: bool,
    #[serde(default = "default_true")]
    pub checkpoints: bool,
}

fn default_true() -> bool {
    true
}

impl Default for OutputSpec {
    fn default() -> Self {
        OutputSpec { dir: None, theory_overlay: true, checkpoints: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub model: ModelKind,
    pub dataset: DatasetSource,
    pub train: TrainSection,
    pub init: InitSpec,
    pub trials: TrialSpec,
    #[serde(default)]
    pub outputs: OutputSpec,
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(s).map_err(|e| LabError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| LabError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials.count == 0 {
            return Err(LabError::Config("at least one trial is required".into()));
        }
        let t = &self.train;
        if !t.lambda.is_finite() || t.lambda < 0.0 {
            return Err(LabError::Config(format!("learning rate {} is not usable", t.lambda)));
        }
        if let Some(l) = t.lambda_fc {
            if !l.is_finite() || l < 0.0 {
                return Err(LabError::Config(format!("FCNN learning rate {l} is not usable")));
            }
        }
        if t.record_every == Some(0) || t.loss_window == 0 {
            return Err(LabError::Config("record_every and loss_window must be positive".into()));
        }
        let sigma = match self.init {
            InitSpec::Random { sigma } | InitSpec::AlignedBalanced { sigma } => sigma,
        };
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(LabError::Config(format!("init sigma {sigma} must be positive")));
        }
        if matches!(self.init, InitSpec::AlignedBalanced { .. })
            && !matches!(self.dataset, DatasetSource::PureCosines(_) | DatasetSource::SumsOfCosines(_))
        {
            return Err(LabError::Config("aligned-balanced init needs a cosine dataset".into()));
        }
        Ok(())
    }

    /// Seed of trial `i`.
    /// Record cadence, falling back to a size-dependent default.
    pub fn record_every(&self, n: usize) -> u64 {
        self.train.record_every.unwrap_or_else(|| self.dataset.default_record_every(n))
    }

    pub fn seed(&self, trial: usize) -> u64 {
        self.trials.base_seed.wrapping_add(trial as u64)
    }
}

fn pure16_spec() -> CosineSpec {
    CosineSpec {
        n: 16,
        classes: vec![
            vec![CosineComponent::new(0, 0, 1.5, 0.0)],
            vec![CosineComponent::new(5, 2, 1.0, 0.0)],
            vec![CosineComponent::new(1, 7, 0.5, 0.0)],
            vec![CosineComponent::new(0, 4, 0.2, 0.0)],
        ],
        disjoint: true,
    }
}

fn sums64_spec() -> CosineSpec {
    CosineSpec {
        n: 64,
        classes: vec![
            vec![CosineComponent::new(1, 2, 0.5, 0.0), CosineComponent::new(3, 1, 0.25, 0.7)],
            vec![CosineComponent::new(2, 5, 0.3, -0.4), CosineComponent::new(4, 3, 0.12, 1.1)],
        ],
        disjoint: true,
    }
}

/// Bundled configurations, in listing order.
pub fn presets() -> Vec<ExperimentConfig> {
    let sums64_train = TrainSection {
        lambda: 1e-4,
        loss: LossMode::Framework,
        updates: 600,
        sampling: SamplingPolicy::EpochShuffle,
        record_every: Some(10),
        loss_window: 50,
        lambda_fc: None,
        spectrum_indices: None,
    };
    vec![
        ExperimentConfig {
            name: "pure-cosines-n16".into(),
            model: ModelKind::Both,
            dataset: DatasetSource::PureCosines(pure16_spec()),
            train: TrainSection {
                lambda: 1.0 / 2000.0,
                loss: LossMode::Framework,
                updates: 8000,
                sampling: SamplingPolicy::EpochShuffle,
                record_every: Some(10),
                loss_window: 50,
                lambda_fc: None,
                spectrum_indices: None,
            },
            init: InitSpec::AlignedBalanced { sigma: 1e-5 },
            trials: TrialSpec { count: 10, base_seed: 0 },
            outputs: OutputSpec::default(),
        },
        ExperimentConfig {
            name: "sums-of-cosines-n64".into(),
            model: ModelKind::Cnn,
            dataset: DatasetSource::SumsOfCosines(sums64_spec()),
            train: sums64_train.clone(),
            init: InitSpec::Random { sigma: 1e-5 },
            trials: TrialSpec { count: 10, base_seed: 0 },
            outputs: OutputSpec::default(),
        },
        ExperimentConfig {
            name: "sums-of-cosines-n64-aligned".into(),
            model: ModelKind::Cnn,
            dataset: DatasetSource::SumsOfCosines(sums64_spec()),
            train: sums64_train,
            init: InitSpec::AlignedBalanced { sigma: 1e-5 },
            trials: TrialSpec { count: 10, base_seed: 0 },
            outputs: OutputSpec::default(),
        },
        ExperimentConfig {
            name: "geometric-shapes-n64".into(),
            model: ModelKind::Cnn,
            dataset: DatasetSource::GeometricShapes { n: 64 },
            train: TrainSection {
                lambda: 1.0 / 20000.0,
                loss: LossMode::Framework,
                updates: 60000,
                sampling: SamplingPolicy::EpochShuffle,
                record_every: Some(100),
                loss_window: 50,
                lambda_fc: None,
                spectrum_indices: None,
            },
            init: InitSpec::Random { sigma: 1e-5 },
            trials: TrialSpec { count: 10, base_seed: 0 },
            outputs: OutputSpec::default(),
        },
    ]
}

pub fn preset(name: &str) -> Option<ExperimentConfig> {
    presets().into_iter().find(|p| p.name == name)
}

/// Mean and population standard deviation of every logged column across
/// trials, per record point.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregateResult {
    pub steps: Vec<u64>,
    pub columns: Vec<String>,
    pub mean: Vec<Vec<f64>>,
    pub std: Vec<Vec<f64>>,
    pub trials: usize,
}

impl AggregateResult {
    pub fn from_logs(logs: &[&TrajectoryLog]) -> Result<Self> {
        let first = logs.first().ok_or_else(|| LabError::invalid("no trajectories to aggregate"))?;
        let steps = first.steps();
        let columns = first.column_names();
        for l in logs {
            if l.steps() != steps || l.column_names() != columns {
                return Err(LabError::GridMismatch("trials were recorded on different grids".into()));
            }
        }
        let mut mean = Vec::with_capacity(steps.len());
        let mut std = Vec::with_capacity(steps.len());
        for r in 0..steps.len() {
            let rows: Vec<Vec<f64>> = logs.iter().map(|l| l.row_values(&l.records[r])).collect();
            let (m, s): (Vec<f64>, Vec<f64>) = (0..columns.len())
                .map(|c| {
                    let vals: Vec<f64> = rows.iter().map(|row| row[c]).filter(|v| !v.is_nan()).collect();
                    mean_std(&vals)
                })
                .unzip();
            mean.push(m);
            std.push(s);
        }
        Ok(AggregateResult { steps, columns, mean, std, trials: logs.len() })
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn mean_of(&self, name: &str) -> Option<Vec<f64>> {
        let c = self.column_index(name)?;
        Some(self.mean.iter().map(|r| r[c]).collect())
    }

    pub fn std_of(&self, name: &str) -> Option<Vec<f64>> {
        let c = self.column_index(name)?;
        Some(self.std.iter().map(|r| r[c]).collect())
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["step".to_string()];
        for c in &self.columns {
            header.push(format!("{c}_mean"));
            header.push(format!("{c}_std"));
        }
        out.write_record(&header)?;
        for (i, step) in self.steps.iter().enumerate() {
            let mut row = vec![step.to_string()];
            for c in 0..self.columns.len() {
                row.push(fmt_num(self.mean[i][c]));
                row.push(fmt_num(self.std[i][c]));
            }
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }
}

fn fmt_num(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        v.to_string()
    }
}

/// Mean and population std; NaN for an empty slice.
pub fn mean_std(vals: &[f64]) -> (f64, f64) {
    if vals.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = vals.len() as f64;
    let m = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Closed-form `a_α(t)` on a record grid, averaged over per-trial curves.
#[derive(Clone, Debug, PartialEq)]
pub struct TheoryCurves {
    pub steps: Vec<u64>,
    /// `curves[α][i]`; NaN where no prediction exists for the mode.
    pub curves: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct DivergedTrial {
    pub seed: u64,
    pub step: u64,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct ModelRun {
    pub seeds: Vec<u64>,
    pub logs: Vec<TrajectoryLog>,
    pub diverged: Vec<DivergedTrial>,
    pub aggregate: AggregateResult,
    pub theory: Option<TheoryCurves>,
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub svd: SvdStructure,
    pub modes: Option<ModeFrequencies>,
    pub cnn: Option<ModelRun>,
    pub fcnn: Option<ModelRun>,
    /// Final CNN states of the surviving trials, aligned with `cnn.seeds`.
    pub cnn_finals: Vec<CnnState>,
    /// Content hash of the written artifacts, when persisted.
    pub content_hash: Option<String>,
}

impl ExperimentResult {
    pub fn prepared(&self) -> Result<PreparedDataset> {
        let (d, _) = self.config.dataset.build()?;
        PreparedDataset::new(&d, &self.svd, self.modes.clone())
    }
}

fn default_spectrum_indices(svd: &SvdStructure, modes: Option<&ModeFrequencies>) -> Result<Vec<usize>> {
    if let Some(m) = modes {
        return Ok(m.all_support().into_iter().collect());
    }
    let fft = Fft2::new(svd.n)?;
    let mut idx: Vec<usize> = svd
        .phi
        .iter()
        .map(|phi| {
            let pm: Vec<f64> = fft.forward_real(phi).iter().map(|c| c.norm()).collect();
            (0..pm.len()).max_by(|&a, &b| pm[a].total_cmp(&pm[b]).then(b.cmp(&a))).unwrap_or(0)
        })
        .collect();
    idx.sort_unstable();
    idx.dedup();
    Ok(idx)
}

enum TrialOut<S> {
    Done { log: TrajectoryLog, state: S },
    Diverged(DivergedTrial),
}

fn collect<S>(seeds: &[u64], outs: Vec<Result<TrialOut<S>>>) -> Result<(Vec<u64>, Vec<TrajectoryLog>, Vec<S>, Vec<DivergedTrial>)> {
    let mut kept = Vec::new();
    let mut logs = Vec::new();
    let mut states = Vec::new();
    let mut diverged = Vec::new();
    for (seed, out) in seeds.iter().zip(outs) {
        match out? {
            TrialOut::Done { log, state } => {
                kept.push(*seed);
                logs.push(log);
                states.push(state);
            }
            TrialOut::Diverged(d) => {
                eprintln!("warning: trial with seed {} diverged at step {} (loss {})", d.seed, d.step, d.loss);
                diverged.push(d);
            }
        }
    }
    if logs.is_empty() {
        let d = &diverged[0];
        return Err(LabError::Divergence { step: d.step, loss: d.loss });
    }
    Ok((kept, logs, states, diverged))
}

fn divergence_or<S>(seed: u64, r: Result<(TrajectoryLog, S)>) -> Result<TrialOut<S>> {
    match r {
        Ok((log, state)) => Ok(TrialOut::Done { log, state }),
        Err(LabError::Divergence { step, loss }) => Ok(TrialOut::Diverged(DivergedTrial { seed, step, loss })),
        Err(e) => Err(e),
    }
}

/// Initial CNN state of the trial with the given seed.
pub fn cnn_initial_state(cfg: &ExperimentConfig, svd: &SvdStructure, spec: Option<&CosineSpec>, seed: u64) -> Result<CnnState> {
    match cfg.init {
        InitSpec::Random { sigma } => init_random(svd.n, svd.p(), sigma, seed),
        InitSpec::AlignedBalanced { sigma } => {
            let spec = spec.ok_or_else(|| LabError::Config("aligned init needs a cosine spec".into()))?;
            init_aligned_balanced(svd, spec, sigma, seed)
        }
    }
}

/// SVD of a dataset, plus the mode frequencies when it is a disjoint cosine
/// dataset.
pub fn dataset_structure(d: &Dataset, spec: Option<&CosineSpec>) -> Result<(SvdStructure, Option<ModeFrequencies>)> {
    match spec {
        Some(s) if s.disjoint => cosine_svd(d, s).map(|(svd, m)| (svd, Some(m))),
        _ => Ok((dataset_svd(d)?, None)),
    }
}

/// Run every trial of an experiment, aggregate, and persist artifacts when
/// `config.outputs.dir` is set.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let (dataset, spec) = cfg.dataset.build()?;
    let (svd, modes) = dataset_structure(&dataset, spec.as_ref())?;
    let data = PreparedDataset::new(&dataset, &svd, modes.clone())?;
    let n = dataset.n();
    let p = dataset.p();
    let t = &cfg.train;
    let spectrum_indices = match &t.spectrum_indices {
        Some(v) => v.clone(),
        None => default_spectrum_indices(&svd, modes.as_ref())?,
    };
    let record_every = cfg.record_every(n);
    let train_cfg = |lambda: f64, seed: u64, spectrum: Vec<usize>| TrainConfig {
        lambda,
        loss: t.loss,
        updates: t.updates,
        sampling: t.sampling,
        seed,
        record_every,
        loss_window: t.loss_window,
        spectrum_indices: spectrum,
    };
    let seeds: Vec<u64> = (0..cfg.trials.count).map(|i| cfg.seed(i)).collect();
    let lambda_fc = t.lambda_fc.unwrap_or(match cfg.model {
        ModelKind::Both => n as f64 * t.lambda,
        _ => t.lambda,
    });

    let mut cnn = None;
    let mut cnn_finals = Vec::new();
    if cfg.model != ModelKind::Fcnn {
        let outs: Vec<Result<TrialOut<CnnState>>> = seeds
            .par_iter()
            .map(|&seed| {
                let mut st = cnn_initial_state(cfg, &svd, spec.as_ref(), seed)?;
                let r = sgd_train(&mut st, &data, &train_cfg(t.lambda, seed, spectrum_indices.clone())).map(|l| (l, st));
                divergence_or(seed, r)
            })
            .collect();
        let (kept, logs, states, diverged) = collect(&seeds, outs)?;
        let aggregate = AggregateResult::from_logs(&logs.iter().collect::<Vec<_>>())?;
        let theory = if cfg.outputs.theory_overlay {
            cnn_theory(&logs, &svd, modes.as_ref(), theory_lambda(t.lambda, t.loss, p), n)
        } else {
            None
        };
        cnn_finals = states;
        cnn = Some(ModelRun { seeds: kept, logs, diverged, aggregate, theory });
    }

    let mut fcnn = None;
    if cfg.model != ModelKind::Cnn {
        let outs: Vec<Result<TrialOut<()>>> = seeds
            .par_iter()
            .map(|&seed| {
                let mut st = match cfg.init {
                    InitSpec::Random { sigma } => fcnn_init_random(n, p, sigma, seed)?,
                    InitSpec::AlignedBalanced { .. } => {
                        let c = cnn_initial_state(cfg, &svd, spec.as_ref(), seed)?;
                        let a = data.effective_a(&c.predict_all(&data));
                        let diag: Vec<f64> = (0..p).map(|i| a[(i, i)]).collect();
                        fcnn_init_aligned(&svd, &diag)?
                    }
                };
                let r = fcnn_train(&mut st, &data, &train_cfg(lambda_fc, seed, Vec::new())).map(|l| (l, ()));
                divergence_or(seed, r)
            })
            .collect();
        let (kept, logs, _, diverged) = collect(&seeds, outs)?;
        let aggregate = AggregateResult::from_logs(&logs.iter().collect::<Vec<_>>())?;
        let theory = if cfg.outputs.theory_overlay {
            fcnn_theory(&logs, &svd, theory_lambda(lambda_fc, t.loss, p))
        } else {
            None
        };
        fcnn = Some(ModelRun { seeds: kept, logs, diverged, aggregate, theory });
    }

    let mut result = ExperimentResult { config: cfg.clone(), svd, modes, cnn, fcnn, cnn_finals, content_hash: None };
    if let Some(dir) = &cfg.outputs.dir {
        result.content_hash = Some(persist(&result, dir)?);
    }
    Ok(result)
}

fn as_f64(steps: &[u64]) -> Vec<f64> {
    steps.iter().map(|&s| s as f64).collect()
}

fn average_curves(per_trial: Vec<Vec<Vec<f64>>>, p: usize, len: usize) -> Vec<Vec<f64>> {
    (0..p)
        .map(|a| {
            (0..len)
                .map(|i| {
                    let v: Vec<f64> = per_trial.iter().map(|c| c[a][i]).collect();
                    mean_std(&v).0
                })
                .collect()
        })
        .collect()
}

fn cnn_theory(logs: &[TrajectoryLog], svd: &SvdStructure, modes: Option<&ModeFrequencies>, lambda: f64, n: usize) -> Option<TheoryCurves> {
    let modes = modes?;
    let steps = logs[0].steps();
    let t = as_f64(&steps);
    let p = svd.p();
    let per_trial: Vec<Vec<Vec<f64>>> = logs
        .iter()
        .map(|log| {
            (0..p)
                .map(|a| {
                    let a0 = log.a_diag(a)[0];
                    mode_d_factor(modes, a)
                        .and_then(|d| analytic_trajectory(&ModePrediction { alpha: a, s: svd.s[a], d, a0, lambda, n }, &t))
                        .unwrap_or_else(|_| vec![f64::NAN; t.len()])
                })
                .collect()
        })
        .collect();
    Some(TheoryCurves { curves: average_curves(per_trial, p, t.len()), steps })
}

fn fcnn_theory(logs: &[TrajectoryLog], svd: &SvdStructure, lambda: f64) -> Option<TheoryCurves> {
    let steps = logs[0].steps();
    let t = as_f64(&steps);
    let p = svd.p();
    let per_trial: Vec<Vec<Vec<f64>>> = logs
        .iter()
        .map(|log| {
            (0..p)
                .map(|a| {
                    fcnn_analytic_trajectory(svd.s[a], log.a_diag(a)[0], lambda, &t)
                        .unwrap_or_else(|_| vec![f64::NAN; t.len()])
                })
                .collect()
        })
        .collect();
    Some(TheoryCurves { curves: average_curves(per_trial, p, t.len()), steps })
}

/// Theory curves as CSV with columns `step`, `cnn_a_i`, `fcnn_a_i`.
pub fn write_theory_csv<W: std::io::Write>(out: W, cnn: Option<&TheoryCurves>, fcnn: Option<&TheoryCurves>) -> Result<()> {
    let base = cnn
        .or(fcnn)
        .ok_or_else(|| LabError::invalid("no theory curves to write"))?;
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["step".to_string()];
    let mut cols: Vec<&Vec<f64>> = Vec::new();
    for (tag, tc) in [("cnn", cnn), ("fcnn", fcnn)] {
        if let Some(tc) = tc {
            for (a, c) in tc.curves.iter().enumerate() {
                header.push(format!("{tag}_a_{a}"));
                cols.push(c);
            }
        }
    }
    w.write_record(&header)?;
    for (i, s) in base.steps.iter().enumerate() {
        let mut row = vec![s.to_string()];
        row.extend(cols.iter().map(|c| fmt_num(c[i])));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct Manifest<'a> {
    name: &'a str,
    config: serde_json::Value,
    config_toml: String,
    seeds: Vec<u64>,
    diverged: Vec<serde_json::Value>,
    files: Vec<(String, String)>,
    content_hash: String,
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn persist(r: &ExperimentResult, dir: &Path) -> Result<String> {
    fs::create_dir_all(dir)?;
    let mut files: Vec<String> = Vec::new();
    let mut diverged = Vec::new();
    for (tag, run) in [("cnn", &r.cnn), ("fcnn", &r.fcnn)] {
        let Some(run) = run else { continue };
        for (seed, log) in run.seeds.iter().zip(&run.logs) {
            let name = format!("{tag}_seed{seed}.csv");
            log.save_csv(&dir.join(&name))?;
            files.push(name);
        }
        let name = format!("{tag}_aggregate.csv");
        run.aggregate.write_csv(fs::File::create(dir.join(&name))?)?;
        files.push(name);
        diverged.extend(run.diverged.iter().map(|d| {
            serde_json::json!({ "model": tag, "seed": d.seed, "step": d.step, "loss": d.loss })
        }));
    }
    if r.config.outputs.checkpoints {
        if let Some(run) = &r.cnn {
            for (seed, st) in run.seeds.iter().zip(&r.cnn_finals) {
                let name = format!("cnn_seed{seed}.ck");
                save_checkpoint(&Checkpoint::Cnn(st.clone()), &dir.join(&name))?;
                files.push(name);
            }
        }
    }
    let cnn_t = r.cnn.as_ref().and_then(|m| m.theory.as_ref());
    let fcnn_t = r.fcnn.as_ref().and_then(|m| m.theory.as_ref());
    if cnn_t.is_some() || fcnn_t.is_some() {
        write_theory_csv(fs::File::create(dir.join("theory.csv"))?, cnn_t, fcnn_t)?;
        files.push("theory.csv".into());
    }
    files.sort();
    let mut hashes = Vec::new();
    let mut outer = Sha256::new();
    // The output location is not part of the experiment's identity.
    let mut cfg = r.config.clone();
    cfg.outputs.dir = None;
    let config_toml = cfg.to_toml_string()?;
    outer.update(config_toml.as_bytes());
    for f in &files {
        let h = sha_hex(&fs::read(dir.join(f))?);
        outer.update(f.as_bytes());
        outer.update(h.as_bytes());
        hashes.push((f.clone(), h));
    }
    let content_hash = hex::encode(outer.finalize());
    let seeds = (0..r.config.trials.count).map(|i| r.config.seed(i)).collect();
    let manifest = Manifest {
        name: &r.config.name,
        config: serde_json::to_value(&cfg)?,
        config_toml,
        seeds,
        diverged,
        files: hashes,
        content_hash: content_hash.clone(),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(content_hash)
}

/// First time a series reaches `level`, linearly interpolated between
/// record points.
pub fn crossing_time(steps: &[u64], values: &[f64], level: f64) -> Option<f64> {
    let i = values.iter().position(|&v| v >= level)?;
    if i == 0 {
        return Some(steps[0] as f64);
    }
    let (t0, t1) = (steps[i - 1] as f64, steps[i] as f64);
    let (v0, v1) = (values[i - 1], values[i]);
    Some(t0 + (level - v0) / (v1 - v0) * (t1 - t0))
}

#[derive(Clone, Debug, Serialize)]
pub struct ModeDeviation {
    pub alpha: usize,
    pub s: f64,
    /// `max_t |a_sim − a_theory| / s_α`.
    pub max_rel_dev: f64,
    pub half_rise_sim: Option<f64>,
    pub half_rise_theory: Option<f64>,
    /// Simulation minus theory, in samples.
    pub half_rise_diff: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct DeviationReport {
    pub modes: Vec<ModeDeviation>,
}

impl DeviationReport {
    pub fn max_dev(&self) -> f64 {
        self.modes.iter().map(|m| m.max_rel_dev).fold(0.0, f64::max)
    }
}

/// Compare mean simulated `a_α` with theory curves on the same grid.
pub fn compare_to_theory(result: &AggregateResult, theory: &TheoryCurves, s: &[f64]) -> Result<DeviationReport> {
    if result.steps != theory.steps {
        return Err(LabError::GridMismatch(format!(
            "simulation has {} record points, theory has {}",
            result.steps.len(),
            theory.steps.len()
        )));
    }
    let mut modes = Vec::new();
    for (alpha, curve) in theory.curves.iter().enumerate() {
        let sim = result
            .mean_of(&format!("a_{alpha}"))
            .ok_or_else(|| LabError::GridMismatch(format!("no column a_{alpha}")))?;
        let s_a = s[alpha];
        let max_rel_dev = sim.iter().zip(curve).map(|(a, b)| (a - b).abs() / s_a).fold(0.0, f64::max);
        let hs = crossing_time(&result.steps, &sim, s_a / 2.0);
        let ht = crossing_time(&theory.steps, curve, s_a / 2.0);
        let diff = hs.zip(ht).map(|(a, b)| a - b);
        modes.push(ModeDeviation { alpha, s: s_a, max_rel_dev, half_rise_sim: hs, half_rise_theory: ht, half_rise_diff: diff });
    }
    Ok(DeviationReport { modes })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FigureKind {
    ATrajectories,
    Spectrum,
    Loss,
}

impl std::str::FromStr for FigureKind {
    type Err = LabError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "a-trajectories" => Ok(FigureKind::ATrajectories),
            "spectrum" => Ok(FigureKind::Spectrum),
            "loss" => Ok(FigureKind::Loss),
            other => Err(LabError::invalid(format!("unknown figure kind '{other}'"))),
        }
    }
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"];

struct Plot {
    w: f64,
    h: f64,
    margin: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
    body: String,
}

impl Plot {
    fn new(x_max: f64, y_min: f64, y_max: f64) -> Self {
        let y_max = if y_max > y_min { y_max } else { y_min + 1.0 };
        Plot { w: 640.0, h: 400.0, margin: 50.0, x_max: x_max.max(1.0), y_min, y_max, body: String::new() }
    }

    fn px(&self, x: f64) -> f64 {
        self.margin + x / self.x_max * (self.w - 2.0 * self.margin)
    }

    fn py(&self, y: f64) -> f64 {
        let y = y.clamp(self.y_min, self.y_max);
        self.h - self.margin - (y - self.y_min) / (self.y_max - self.y_min) * (self.h - 2.0 * self.margin)
    }

    fn line(&mut self, xs: &[f64], ys: &[f64], color: &str, dashed: bool) {
        let pts: Vec<String> = xs
            .iter()
            .zip(ys)
            .filter(|(_, y)| y.is_finite())
            .map(|(&x, &y)| format!("{:.2},{:.2}", self.px(x), self.py(y)))
            .collect();
        if pts.len() < 2 {
            return;
        }
        let dash = if dashed { " stroke-dasharray=\"6,4\"" } else { "" };
        let _ = writeln!(
            self.body,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"{dash} points=\"{}\"/>",
            pts.join(" ")
        );
    }

    fn band(&mut self, xs: &[f64], lo: &[f64], hi: &[f64], color: &str) {
        let mut pts: Vec<String> = Vec::new();
        for (i, &x) in xs.iter().enumerate() {
            if lo[i].is_finite() {
                pts.push(format!("{:.2},{:.2}", self.px(x), self.py(hi[i])));
            }
        }
        for (i, &x) in xs.iter().enumerate().rev() {
            if lo[i].is_finite() {
                pts.push(format!("{:.2},{:.2}", self.px(x), self.py(lo[i])));
            }
        }
        if pts.len() < 3 {
            return;
        }
        let _ = writeln!(self.body, "<polygon fill=\"{color}\" fill-opacity=\"0.2\" stroke=\"none\" points=\"{}\"/>", pts.join(" "));
    }

    fn hguide(&mut self, y: f64, color: &str) {
        let (x0, x1, yy) = (self.px(0.0), self.px(self.x_max), self.py(y));
        let _ = writeln!(self.body, "<line x1=\"{x0:.2}\" y1=\"{yy:.2}\" x2=\"{x1:.2}\" y2=\"{yy:.2}\" stroke=\"{color}\" stroke-dasharray=\"2,3\"/>");
    }

    fn vguide(&mut self, x: f64) {
        let (xx, y0, y1) = (self.px(x), self.py(self.y_min), self.py(self.y_max));
        let _ = writeln!(self.body, "<line x1=\"{xx:.2}\" y1=\"{y0:.2}\" x2=\"{xx:.2}\" y2=\"{y1:.2}\" stroke=\"#888\" stroke-dasharray=\"2,3\"/>");
    }

    fn finish(self, title: &str, xlabel: &str, ylabel: &str) -> String {
        let (w, h, m) = (self.w, self.h, self.margin);
        let mut s = String::new();
        let _ = writeln!(s, "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">");
        let _ = writeln!(s, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>");
        let _ = writeln!(s, "<text x=\"{:.1}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{title}</text>", w / 2.0);
        let _ = writeln!(s, "<line x1=\"{m}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>", h - m, w - m, h - m);
        let _ = writeln!(s, "<line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{:.1}\" stroke=\"black\"/>", h - m);
        for i in 0..=4 {
            let fx = i as f64 / 4.0;
            let xv = fx * self.x_max;
            let yv = self.y_min + fx * (self.y_max - self.y_min);
            let px = m + fx * (w - 2.0 * m);
            let py = h - m - fx * (h - 2.0 * m);
            let _ = writeln!(s, "<text x=\"{px:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"10\">{}</text>", h - m + 14.0, fmt_tick(xv));
            let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" font-size=\"10\">{}</text>", m - 4.0, py + 3.0, fmt_tick(yv));
        }
        let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"12\">{xlabel}</text>", w / 2.0, h - 10.0);
        let _ = writeln!(s, "<text x=\"14\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 14 {:.1})\">{ylabel}</text>", h / 2.0, h / 2.0);
        s.push_str(&self.body);
        s.push_str("</svg>\n");
        s
    }
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1e4 || v.abs() < 1e-2 {
        format!("{v:.1e}")
    } else {
        format!("{v:.2}")
    }
}

fn finite_max(vals: impl Iterator<Item = f64>) -> f64 {
    vals.filter(|v| v.is_finite()).fold(0.0, f64::max)
}

/// Render one panel as SVG text. Output is deterministic.
///
/// `s` supplies the horizontal guides for `a-trajectories`.
pub fn render_figure(agg: &AggregateResult, theory: Option<&TheoryCurves>, s: &[f64], kind: FigureKind) -> Result<String> {
    let xs = as_f64(&agg.steps);
    let x_max = xs.last().copied().unwrap_or(1.0);
    let series = |prefix: &str| -> Vec<(String, Vec<f64>, Vec<f64>)> {
        agg.columns
            .iter()
            .filter(|c| c.starts_with(prefix))
            .map(|c| (c.clone(), agg.mean_of(c).unwrap(), agg.std_of(c).unwrap()))
            .collect()
    };
    let (cols, title, ylabel) = match kind {
        FigureKind::ATrajectories => (series("a_"), "effective singular values", "a"),
        FigureKind::Spectrum => (series("k2_"), "kernel spectrum", "|Qk|^2"),
        FigureKind::Loss => (
            ["loss", "dataset_loss"]
                .iter()
                .filter_map(|c| Some((c.to_string(), agg.mean_of(c)?, agg.std_of(c)?)))
                .collect(),
            "loss",
            "loss",
        ),
    };
    if cols.is_empty() {
        return Err(LabError::invalid("nothing to plot for this figure kind"));
    }
    let mut y_max = finite_max(cols.iter().flat_map(|(_, m, sd)| m.iter().zip(sd).map(|(a, b)| a + b)));
    if kind == FigureKind::ATrajectories {
        y_max = y_max.max(finite_max(s.iter().copied()));
    }
    let mut plot = Plot::new(x_max, 0.0, y_max * 1.05);
    for (i, (_, m, sd)) in cols.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let lo: Vec<f64> = m.iter().zip(sd).map(|(a, b)| a - b).collect();
        let hi: Vec<f64> = m.iter().zip(sd).map(|(a, b)| a + b).collect();
        plot.band(&xs, &lo, &hi, color);
        plot.line(&xs, m, color, false);
    }
    if kind == FigureKind::ATrajectories {
        for (i, &sv) in s.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            plot.hguide(sv, color);
            if let Some(m) = cols.get(i).map(|c| &c.1) {
                if let Some(t) = crossing_time(&agg.steps, m, sv / 2.0) {
                    plot.vguide(t);
                }
            }
        }
        if let Some(th) = theory {
            for (i, c) in th.curves.iter().enumerate() {
                plot.line(&as_f64(&th.steps), c, PALETTE[i % PALETTE.len()], true);
            }
        }
    }
    Ok(plot.finish(title, "samples", ylabel))
}

pub fn emit_figures(agg: &AggregateResult, theory: Option<&TheoryCurves>, s: &[f64], kind: FigureKind, path: &Path) -> Result<()> {
    fs::write(path, render_figure(agg, theory, s, kind)?)?;
    Ok(())
}

/// Read back an aggregate CSV written by [`AggregateResult::write_csv`].
pub fn read_aggregate_csv(path: &Path) -> Result<AggregateResult> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(|s| s.to_string()).collect();
    if header.first().map(String::as_str) != Some("step") || header.len() % 2 != 1 {
        return Err(LabError::Format { path: path.to_path_buf(), reason: "not an aggregate CSV".into() });
    }
    let columns: Vec<String> = header[1..]
        .chunks(2)
        .map(|c| c[0].trim_end_matches("_mean").to_string())
        .collect();
    let parse = |s: &str| if s.is_empty() { Ok(f64::NAN) } else { s.parse::<f64>() };
    let bad = |e: String| LabError::Format { path: path.to_path_buf(), reason: e };
    let mut steps = Vec::new();
    let mut mean = Vec::new();
    let mut std = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        steps.push(rec[0].parse::<u64>().map_err(|e| bad(e.to_string()))?);
        let vals: Vec<f64> = rec.iter().skip(1).map(parse).collect::<std::result::Result<_, _>>().map_err(|e| bad(e.to_string()))?;
        mean.push(vals.iter().step_by(2).copied().collect());
        std.push(vals.iter().skip(1).step_by(2).copied().collect());
    }
    Ok(AggregateResult { steps, columns, mean, std, trials: 0 })
}

/// Read theory curves written to `theory.csv` for one model tag.
pub fn read_theory_csv(path: &Path, tag: &str) -> Result<Option<TheoryCurves>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(|s| s.to_string()).collect();
    let idx: Vec<usize> = (0..header.len()).filter(|&i| header[i].starts_with(&format!("{tag}_a_"))).collect();
    if idx.is_empty() {
        return Ok(None);
    }
    let mut steps = Vec::new();
    let mut curves = vec![Vec::new(); idx.len()];
    for rec in r.records() {
        let rec = rec?;
        steps.push(rec[0].parse::<u64>().map_err(|e| LabError::Format { path: path.to_path_buf(), reason: e.to_string() })?);
        for (k, &i) in idx.iter().enumerate() {
            curves[k].push(rec[i].parse::<f64>().unwrap_or(f64::NAN));
        }
    }
    Ok(Some(TheoryCurves { steps, curves }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_round_trip_through_toml() {
        for p in presets() {
            let s = p.to_toml_string().unwrap();
            let back = ExperimentConfig::from_toml_str(&s).unwrap();
            assert_eq!(back, p, "{s}");
        }
    }

    #[test]
    fn config_validation() {
        let mut c = preset("pure-cosines-n16").unwrap();
        c.trials.count = 0;
        assert!(c.validate().is_err());
        let mut c = preset("geometric-shapes-n64").unwrap();
        c.init = InitSpec::AlignedBalanced { sigma: 1e-5 };
        assert!(c.validate().is_err());
        assert!(ExperimentConfig::from_toml_str("name = 3").is_err());
    }

    #[test]
    fn crossing_interpolates() {
        let t = crossing_time(&[0, 10, 20], &[0.0, 1.0, 3.0], 2.0).unwrap();
        assert!((t - 15.0).abs() < 1e-12);
        assert!(crossing_time(&[0, 10], &[0.0, 1.0], 2.0).is_none());
    }

    #[test]
    fn mean_std_population() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
    }

    #[test]
    fn unknown_figure_kind() {
        assert!("heatmap".parse::<FigureKind>().is_err());
        assert_eq!("loss".parse::<FigureKind>().unwrap(), FigureKind::Loss);
    }
}
