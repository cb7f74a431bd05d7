use std::fs;
use std::path::Path;

use lcnn::datasets::{CosineComponent, CosineSpec};
use lcnn::harness::{
    compare_to_theory, emit_figures, mean_std, preset, presets, read_aggregate_csv, read_theory_csv, render_figure,
    run_experiment, AggregateResult, DatasetSource, ExperimentConfig, FigureKind, InitSpec, ModelKind, OutputSpec,
    TheoryCurves, TrainSection, TrialSpec,
};
use lcnn::models::{LossMode, SamplingPolicy, TrajectoryLog};
use lcnn::LabError;

fn small(lambda: f64, trials: usize, model: ModelKind) -> ExperimentConfig {
    ExperimentConfig {
        name: "small".into(),
        model,
        dataset: DatasetSource::PureCosines(CosineSpec {
            n: 6,
            classes: vec![
                vec![CosineComponent::new(0, 0, 1.0, 0.0)],
                vec![CosineComponent::new(1, 2, 0.6, 0.0)],
                vec![CosineComponent::new(2, 0, 0.3, 0.0)],
            ],
            disjoint: true,
        }),
        train: TrainSection {
            lambda,
            loss: LossMode::Framework,
            updates: 600,
            sampling: SamplingPolicy::EpochShuffle,
            record_every: Some(20),
            loss_window: 50,
            lambda_fc: None,
            spectrum_indices: None,
        },
        init: InitSpec::AlignedBalanced { sigma: 1e-3 },
        trials: TrialSpec { count: trials, base_seed: 11 },
        outputs: OutputSpec::default(),
    }
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn zero_rate_single_trial_is_flat() {
    let r = run_experiment(&small(0.0, 1, ModelKind::Cnn)).unwrap();
    let run = r.cnn.unwrap();
    assert_eq!(run.aggregate.trials, 1);
    for c in 0..run.aggregate.columns.len() {
        let first = run.aggregate.mean[0][c];
        for (m, s) in run.aggregate.mean.iter().zip(&run.aggregate.std) {
            assert_eq!(s[c], 0.0);
            if !first.is_nan() && run.aggregate.columns[c] != "loss" {
                assert_eq!(m[c], first, "column {}", run.aggregate.columns[c]);
            }
        }
    }
}

#[test]
fn rerun_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut cfg = small(0.01, 3, ModelKind::Both);
    cfg.outputs.dir = Some(a.path().to_path_buf());
    let ra = run_experiment(&cfg).unwrap();
    cfg.outputs.dir = Some(b.path().to_path_buf());
    let rb = run_experiment(&cfg).unwrap();
    assert!(ra.content_hash.is_some());
    assert_eq!(ra.content_hash, rb.content_hash);
    let (fa, fb) = (read_dir_sorted(a.path()), read_dir_sorted(b.path()));
    assert_eq!(fa, fb);
    let names: Vec<&str> = fa.iter().map(|(n, _)| n.as_str()).collect();
    for want in ["cnn_aggregate.csv", "fcnn_aggregate.csv", "theory.csv", "manifest.json", "cnn_seed11.ck"] {
        assert!(names.contains(&want), "{names:?}");
    }
}

#[test]
fn seed_changes_results() {
    let r1 = run_experiment(&small(0.01, 1, ModelKind::Cnn)).unwrap();
    let mut cfg = small(0.01, 1, ModelKind::Cnn);
    cfg.trials.base_seed = 12;
    let r2 = run_experiment(&cfg).unwrap();
    assert_ne!(r1.cnn.unwrap().aggregate.mean, r2.cnn.unwrap().aggregate.mean);
}

#[test]
fn aggregate_matches_per_trial_logs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(0.01, 4, ModelKind::Cnn);
    cfg.outputs.dir = Some(dir.path().to_path_buf());
    let r = run_experiment(&cfg).unwrap();
    let run = r.cnn.unwrap();
    let agg = read_aggregate_csv(&dir.path().join("cnn_aggregate.csv")).unwrap();
    assert_eq!(agg.steps, run.aggregate.steps);
    assert_eq!(agg.columns, run.aggregate.columns);

    // recompute from the per-trial CSV files
    let tables: Vec<Vec<Vec<f64>>> = run
        .seeds
        .iter()
        .map(|s| {
            let mut rd = csv::Reader::from_path(dir.path().join(format!("cnn_seed{s}.csv"))).unwrap();
            rd.records()
                .map(|rec| rec.unwrap().iter().skip(1).map(|v| v.parse::<f64>().unwrap_or(f64::NAN)).collect())
                .collect()
        })
        .collect();
    for i in 0..agg.steps.len() {
        for c in 0..agg.columns.len() {
            let vals: Vec<f64> = tables.iter().map(|t| t[i][c]).collect();
            let (m, s) = mean_std(&vals);
            let (am, as_) = (agg.mean[i][c], agg.std[i][c]);
            if m.is_nan() {
                assert!(am.is_nan());
                continue;
            }
            assert!((m - am).abs() <= 1e-12 * m.abs().max(1e-300), "{} {m} {am}", agg.columns[c]);
            assert!((s - as_).abs() <= 1e-9 * s.max(1e-12));
        }
    }

    let theory = read_theory_csv(&dir.path().join("theory.csv"), "cnn").unwrap().unwrap();
    assert_eq!(theory.steps, agg.steps);
    let mine = run.theory.as_ref().unwrap();
    assert!(mine.curves.iter().flatten().all(|v| v.is_finite()));
    assert_eq!(&theory, mine);
    assert!(read_theory_csv(&dir.path().join("theory.csv"), "fcnn").unwrap().is_none());
}

#[test]
fn grid_mismatch_is_reported() {
    let r = run_experiment(&small(0.01, 1, ModelKind::Cnn)).unwrap();
    let run = r.cnn.unwrap();
    let t = run.theory.unwrap();
    let short = TheoryCurves { steps: t.steps[..3].to_vec(), curves: t.curves.iter().map(|c| c[..3].to_vec()).collect() };
    assert!(matches!(compare_to_theory(&run.aggregate, &short, &r.svd.s), Err(LabError::GridMismatch(_))));
    let rep = compare_to_theory(&run.aggregate, &t, &r.svd.s).unwrap();
    assert_eq!(rep.modes.len(), 3);
}

#[test]
fn figures_are_deterministic_svg() {
    let r = run_experiment(&small(0.01, 2, ModelKind::Cnn)).unwrap();
    let run = r.cnn.unwrap();
    for kind in [FigureKind::ATrajectories, FigureKind::Spectrum, FigureKind::Loss] {
        let a = render_figure(&run.aggregate, run.theory.as_ref(), &r.svd.s, kind).unwrap();
        let b = render_figure(&run.aggregate, run.theory.as_ref(), &r.svd.s, kind).unwrap();
        assert_eq!(a, b);
        assert!(a.starts_with("<svg") && a.trim_end().ends_with("</svg>"));
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.svg");
    emit_figures(&run.aggregate, run.theory.as_ref(), &r.svd.s, FigureKind::ATrajectories, &path).unwrap();
    assert!(fs::read_to_string(&path).unwrap().contains("<polyline"));
}

#[test]
fn presets_parse_and_validate() {
    let all = presets();
    assert!(all.len() >= 3);
    for p in &all {
        p.validate().unwrap();
        let back = ExperimentConfig::from_toml_str(&p.to_toml_string().unwrap()).unwrap();
        assert_eq!(&back, p);
    }
    assert!(preset("pure-cosines-n16").is_some());
    assert!(preset("no-such-preset").is_none());
}

#[test]
fn config_from_toml_text() {
    let text = r#"
name = "tiny"
model = "cnn"

[dataset]
kind = "pure-cosines"
n = 4
classes = [[{ mu = 0, nu = 0, amplitude = 1.0, phase = 0.0 }], [{ mu = 1, nu = 1, amplitude = 0.5, phase = 0.0 }]]

[train]
lambda = 0.01
updates = 40

[init]
kind = "random"
sigma = 0.001

[trials]
count = 2
"#;
    let cfg = ExperimentConfig::from_toml_str(text).unwrap();
    assert_eq!(cfg.train.loss, LossMode::Theory);
    assert_eq!(cfg.record_every(4), 10);
    let r = run_experiment(&cfg).unwrap();
    assert_eq!(r.cnn.unwrap().seeds, vec![0, 1]);
    assert!(r.fcnn.is_none());
    assert!(ExperimentConfig::from_toml_str(&text.replace("count = 2", "count = 0")).is_err());
}

#[test]
fn aggregate_rejects_mismatched_logs() {
    let r = run_experiment(&small(0.01, 1, ModelKind::Cnn)).unwrap();
    let log: TrajectoryLog = r.cnn.unwrap().logs.remove(0);
    let mut shorter = log.clone();
    shorter.records.pop();
    assert!(AggregateResult::from_logs(&[&log, &shorter]).is_err());
    assert!(AggregateResult::from_logs(&[]).is_err());
}
