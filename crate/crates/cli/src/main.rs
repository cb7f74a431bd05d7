use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use lcnn::datasets::{cosine_svd, save_dataset, write_dataset_csv};
use lcnn::dynamics::{
    analytic_trajectory, dominant_frequency_report, fcnn_analytic_trajectory, half_rise_time, learning_time,
    mode_d_factor, verify_minimal_norm, MinNormTolerances, ModePrediction, Verdict, DOMINANT_TOL,
};
use lcnn::harness::{
    cnn_initial_state, compare_to_theory, dataset_structure, emit_figures, preset, presets, read_aggregate_csv, read_theory_csv,
    run_experiment, write_theory_csv, ExperimentConfig, FigureKind, ModelKind, TheoryCurves,
};
use lcnn::models::{load_checkpoint, theory_lambda, Checkpoint, Network, PreparedDataset};
use lcnn::LabError;

#[derive(Parser)]
#[command(name = "lcnn", version, about = "Learning dynamics of linear CNNs")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the dataset of an experiment to a file.
    Gen {
        #[command(flatten)]
        src: Source,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Bin)]
        format: Format,
    },
    /// Run an experiment and write trajectories, aggregates and a manifest.
    Train {
        #[command(flatten)]
        src: Source,
        /// Output directory; overrides the config.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        updates: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Emit closed-form trajectories for a disjoint-frequency experiment.
    Theory {
        #[command(flatten)]
        src: Source,
        /// Initial a_α for every mode; defaults to the initial state of the first trial.
        #[arg(long)]
        a0: Option<f64>,
        /// Learning-time threshold ε.
        #[arg(long, default_value_t = 1e-2)]
        eps: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a CNN checkpoint against the minimal-norm solution and report dominant frequencies.
    Verify {
        #[command(flatten)]
        src: Source,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        s_rel: f64,
        #[arg(long, default_value_t = 0.05)]
        phase: f64,
        #[arg(long, default_value_t = 1e-3)]
        offsupport: f64,
        #[arg(long, default_value_t = 1e-4)]
        converged_loss: f64,
        #[arg(long, default_value_t = 0.1)]
        top_share: f64,
    },
    /// Render an SVG figure from a training output directory.
    Fig {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, value_enum, default_value_t = Model::Cnn)]
        model: Model,
        #[arg(long, default_value = "a-trajectories")]
        kind: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// List bundled experiment presets.
    Presets {
        /// Print the full TOML of one preset.
        #[arg(long)]
        show: Option<String>,
    },
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct Source {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Bin,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum Model {
    Cnn,
    Fcnn,
}

impl Model {
    fn tag(self) -> &'static str {
        match self {
            Model::Cnn => "cnn",
            Model::Fcnn => "fcnn",
        }
    }
}

enum Failure {
    Lab(LabError),
    Verification(String),
}

impl From<LabError> for Failure {
    fn from(e: LabError) -> Self {
        Failure::Lab(e)
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Lab(e.into())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Lab(e.into())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Lab(e @ LabError::Divergence { .. })) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Lab(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Verification(msg)) => {
            eprintln!("verification failed: {msg}");
            ExitCode::from(3)
        }
    }
}

fn load_config(src: &Source) -> Result<ExperimentConfig, LabError> {
    match (&src.config, &src.preset) {
        (Some(path), _) => ExperimentConfig::from_path(path),
        (None, Some(name)) => preset(name).ok_or_else(|| {
            let names: Vec<String> = presets().into_iter().map(|p| p.name).collect();
            LabError::Config(format!("unknown preset {name:?}; available: {}", names.join(", ")))
        }),
        (None, None) => Err(LabError::Config("either --config or --preset is required".into())),
    }
}

fn print_json(v: &serde_json::Value) -> Result<(), Failure> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run(cmd: Cmd) -> Result<(), Failure> {
    match cmd {
        Cmd::Gen { src, out, format } => {
            let cfg = load_config(&src)?;
            let (d, _) = cfg.dataset.build()?;
            match format {
                Format::Bin => save_dataset(&d, &out)?,
                Format::Csv => write_dataset_csv(&d, &out)?,
            }
            eprintln!("wrote {} samples (n={}, p={}) to {}", d.len(), d.n(), d.p(), out.display());
            Ok(())
        }
        Cmd::Train { src, out, trials, updates, seed } => {
            let mut cfg = load_config(&src)?;
            if out.is_some() {
                cfg.outputs.dir = out;
            }
            if let Some(t) = trials {
                cfg.trials.count = t;
            }
            if let Some(u) = updates {
                cfg.train.updates = u;
            }
            if let Some(s) = seed {
                cfg.trials.base_seed = s;
            }
            let r = run_experiment(&cfg)?;
            let mut models = serde_json::Map::new();
            for (tag, run) in [("cnn", &r.cnn), ("fcnn", &r.fcnn)] {
                let Some(run) = run else { continue };
                let final_a: Vec<f64> = (0..r.svd.p())
                    .map(|a| run.aggregate.mean_of(&format!("a_{a}")).and_then(|v| v.last().copied()).unwrap_or(f64::NAN))
                    .collect();
                let deviation = match &run.theory {
                    Some(t) => Some(compare_to_theory(&run.aggregate, t, &r.svd.s)?),
                    None => None,
                };
                models.insert(
                    tag.into(),
                    json!({
                        "seeds": run.seeds,
                        "diverged": run.diverged.iter().map(|d| json!({"seed": d.seed, "step": d.step, "loss": d.loss})).collect::<Vec<_>>(),
                        "final_a": final_a,
                        "theory_deviation": deviation,
                    }),
                );
            }
            print_json(&json!({
                "name": r.config.name,
                "s": r.svd.s,
                "models": models,
                "output_dir": r.config.outputs.dir,
                "content_hash": r.content_hash,
            }))
        }
        Cmd::Theory { src, a0, eps, out } => theory(&load_config(&src)?, a0, eps, out.as_deref()),
        Cmd::Verify { src, checkpoint, s_rel, phase, offsupport, converged_loss, top_share } => {
            let cfg = load_config(&src)?;
            let state = match load_checkpoint(&checkpoint)? {
                Checkpoint::Cnn(s) => s,
                Checkpoint::Fcnn(_) => {
                    return Err(LabError::Invalid("verification needs a CNN checkpoint".into()).into());
                }
            };
            let (d, spec) = cfg.dataset.build()?;
            let (svd, modes) = dataset_structure(&d, spec.as_ref())?;
            let dominant = dominant_frequency_report(&state, &svd, DOMINANT_TOL, top_share)?;
            let min_norm = match modes {
                Some(m) => {
                    let data = PreparedDataset::new(&d, &svd, Some(m))?;
                    let tol = MinNormTolerances { s_rel, phase, offsupport, converged_loss, ..Default::default() };
                    Some(verify_minimal_norm(&state, &data, &tol)?)
                }
                None => None,
            };
            print_json(&json!({
                "checkpoint": checkpoint,
                "step": state.step,
                "minimal_norm": min_norm,
                "dominant_frequencies": dominant,
            }))?;
            match min_norm {
                Some(r) if r.verdict == Verdict::Fail => Err(Failure::Verification(format!(
                    "s check {}, phase check {}, off-support check {}",
                    r.s_ok, r.phase_ok, r.offsupport_ok
                ))),
                _ => Ok(()),
            }
        }
        Cmd::Fig { dir, model, kind, out } => {
            let kind: FigureKind = kind.parse()?;
            let agg = read_aggregate_csv(&dir.join(format!("{}_aggregate.csv", model.tag())))?;
            let theory_path = dir.join("theory.csv");
            let theory = if theory_path.exists() { read_theory_csv(&theory_path, model.tag())? } else { None };
            let s = manifest_singular_values(&dir)?;
            emit_figures(&agg, theory.as_ref(), &s, kind, &out)?;
            eprintln!("wrote {}", out.display());
            Ok(())
        }
        Cmd::Presets { show } => {
            match show {
                Some(name) => {
                    let cfg = load_config(&Source { config: None, preset: Some(name) })?;
                    print!("{}", cfg.to_toml_string()?);
                }
                None => {
                    for p in presets() {
                        println!("{}", p.name);
                    }
                }
            }
            Ok(())
        }
    }
}

/// Singular values of the dataset recorded in an output directory's manifest.
fn manifest_singular_values(dir: &Path) -> Result<Vec<f64>, Failure> {
    let text = std::fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: serde_json::Value = serde_json::from_str(&text)?;
    let toml = manifest["config_toml"]
        .as_str()
        .ok_or_else(|| LabError::Config("manifest has no config_toml".into()))?;
    let cfg = ExperimentConfig::from_toml_str(toml)?;
    let (d, spec) = cfg.dataset.build()?;
    Ok(dataset_structure(&d, spec.as_ref())?.0.s)
}

fn theory(cfg: &ExperimentConfig, a0: Option<f64>, eps: f64, out: Option<&Path>) -> Result<(), Failure> {
    cfg.validate()?;
    let (d, spec) = cfg.dataset.build()?;
    let spec = spec
        .filter(|s| s.disjoint)
        .ok_or_else(|| LabError::Config("closed-form curves need a disjoint cosine dataset".into()))?;
    let (svd, modes) = cosine_svd(&d, &spec)?;
    let (n, p) = (d.n(), d.p());
    let a0: Vec<f64> = match a0 {
        Some(v) => vec![v; p],
        None => {
            let data = PreparedDataset::new(&d, &svd, Some(modes.clone()))?;
            let st = cnn_initial_state(cfg, &svd, Some(&spec), cfg.seed(0))?;
            let a = data.effective_a(&st.predict_all(&data));
            (0..p).map(|i| a[(i, i)]).collect()
        }
    };
    let every = cfg.record_every(n);
    let mut steps: Vec<u64> = (0..=cfg.train.updates).step_by(every as usize).collect();
    if steps.last() != Some(&cfg.train.updates) {
        steps.push(cfg.train.updates);
    }
    let t: Vec<f64> = steps.iter().map(|&s| s as f64).collect();
    let lambda = theory_lambda(cfg.train.lambda, cfg.train.loss, p);
    let lambda_fc = theory_lambda(
        cfg.train.lambda_fc.unwrap_or(match cfg.model {
            ModelKind::Both => n as f64 * cfg.train.lambda,
            _ => cfg.train.lambda,
        }),
        cfg.train.loss,
        p,
    );
    let mut cnn = Vec::new();
    let mut fcnn = Vec::new();
    let mut summary = Vec::new();
    for a in 0..p {
        let dfac = mode_d_factor(&modes, a)?;
        let m = ModePrediction { alpha: a, s: svd.s[a], d: dfac, a0: a0[a], lambda, n };
        cnn.push(analytic_trajectory(&m, &t)?);
        fcnn.push(fcnn_analytic_trajectory(svd.s[a], a0[a], lambda_fc, &t)?);
        summary.push(json!({
            "alpha": a,
            "s": m.s,
            "d": dfac,
            "a0": m.a0,
            "rate": m.rate(),
            "half_rise": half_rise_time(&m).ok(),
            "learning_time": learning_time(&m, eps).ok(),
        }));
    }
    let cnn_t = (cfg.model != ModelKind::Fcnn).then(|| TheoryCurves { steps: steps.clone(), curves: cnn });
    let fcnn_t = (cfg.model != ModelKind::Cnn).then(|| TheoryCurves { steps: steps.clone(), curves: fcnn });
    match out {
        Some(path) => {
            write_theory_csv(std::fs::File::create(path)?, cnn_t.as_ref(), fcnn_t.as_ref())?;
            eprintln!("wrote {}", path.display());
        }
        None => write_theory_csv(std::io::stdout().lock(), cnn_t.as_ref(), fcnn_t.as_ref())?,
    }
    eprintln!("{}", serde_json::to_string_pretty(&json!({ "modes": summary }))?);
    Ok(())
}
