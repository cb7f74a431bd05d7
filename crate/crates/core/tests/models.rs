use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lcnn::convops::{materialize_dbc, DbcVariant, Kernel};
use lcnn::datasets::{dataset_svd, gen_pure_cosines, gen_sums_of_cosines, CosineComponent, CosineSpec, ModeFrequencies};
use lcnn::dynamics::{balancedness_metric, mode_d_factor};
use lcnn::models::{
    cnn_forward, cnn_gradients, fcnn_forward, fcnn_gradients, fcnn_init_aligned, fcnn_init_random, fcnn_train,
    init_aligned_balanced, init_random, load_checkpoint, mse_loss, save_checkpoint, sgd_train, state_digest,
    Checkpoint, CnnState, FcnnState, LossMode, Network, PreparedDataset, SamplingPolicy, TrainConfig,
};
use lcnn::spectral::vec2d_dft;

fn pure16() -> CosineSpec {
    let pairs = [(0, 0, 1.5), (5, 2, 1.0), (1, 7, 0.5), (0, 4, 0.2)];
    CosineSpec {
        n: 16,
        classes: pairs.iter().map(|&(mu, nu, b)| vec![CosineComponent::new(mu, nu, b, 0.0)]).collect(),
        disjoint: true,
    }
}

fn prepared(spec: &CosineSpec) -> PreparedDataset {
    let d = gen_sums_of_cosines(spec).unwrap();
    let svd = dataset_svd(&d).unwrap();
    let modes = ModeFrequencies::new(&svd, spec).unwrap();
    PreparedDataset::new(&d, &svd, Some(modes)).unwrap()
}

fn rand_vec(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn random_cnn(rng: &mut ChaCha8Rng, n: usize, p: usize) -> CnnState {
    let w = DMatrix::from_vec(p, n * n, rand_vec(rng, p * n * n));
    CnnState { n, p, kernel: rand_vec(rng, n * n), w, step: 0 }
}

fn random_fcnn(rng: &mut ChaCha8Rng, n: usize, p: usize) -> FcnnState {
    let nn = n * n;
    let w1 = DMatrix::from_vec(nn, nn, rand_vec(rng, nn * nn)) / (nn as f64).sqrt();
    let w2 = DMatrix::from_vec(p, nn, rand_vec(rng, p * nn));
    FcnnState { n, p, w1, w2, step: 0 }
}

/// Loss through the dense block-circulant matrix, a route independent of the FFT.
fn dense_loss(st: &CnnState, x: &[f64], y: &[f64], mode: LossMode) -> f64 {
    let dbc = materialize_dbc(&Kernel::from_vec(st.kernel.clone()).unwrap(), DbcVariant::Convolution).unwrap().matrix;
    let yhat = &st.w * (dbc * DVector::from_column_slice(x));
    mse_loss(y, yhat.as_slice(), mode).unwrap()
}

fn central_diff(params: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let h = 1e-6;
    let mut p = params.to_vec();
    (0..p.len())
        .map(|i| {
            let o = p[i];
            p[i] = o + h;
            let up = f(&p);
            p[i] = o - h;
            let down = f(&p);
            p[i] = o;
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn worst_rel(fd: &[f64], analytic: &[f64]) -> f64 {
    let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    fd.iter()
        .zip(analytic)
        .map(|(a, b)| (a - b).abs() / a.abs().max(1e-4 * scale))
        .fold(0.0, f64::max)
}

#[test]
fn loss_examples() {
    let y = [1.0, 0.0, 0.0, 0.0];
    assert_eq!(mse_loss(&y, &y, LossMode::Theory).unwrap(), 0.0);
    assert_eq!(mse_loss(&y, &[0.0; 4], LossMode::Theory).unwrap(), 0.5);
    assert_eq!(mse_loss(&y, &[0.0; 4], LossMode::Framework).unwrap(), 0.25);
    assert!(mse_loss(&y, &[0.0; 3], LossMode::Theory).is_err());
}

#[test]
fn forward_trivial_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_vec(&mut rng, 36);
    let mut st = random_cnn(&mut rng, 6, 3);
    st.w.fill(0.0);
    assert!(cnn_forward(&st, &x).unwrap().0.iter().all(|&v| v == 0.0));

    let mut st = random_cnn(&mut rng, 6, 3);
    st.kernel = Kernel::delta(6, 0, 0).unwrap().as_slice().to_vec();
    let (yhat, h) = cnn_forward(&st, &x).unwrap();
    let want = &st.w * DVector::from_column_slice(&x);
    assert!(h.iter().zip(&x).all(|(a, b)| (a - b).abs() < 1e-12));
    assert!(yhat.iter().zip(want.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
    assert!(cnn_forward(&st, &x[..35]).is_err());

    let mut f = random_fcnn(&mut rng, 4, 2);
    f.w1 = DMatrix::identity(16, 16);
    let x = rand_vec(&mut rng, 16);
    let want = &f.w2 * DVector::from_column_slice(&x);
    let (yhat, _) = fcnn_forward(&f, &x).unwrap();
    assert!(yhat.iter().zip(want.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
}

#[test]
fn gradients_vanish_at_target_and_without_readout() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let st = random_cnn(&mut rng, 6, 3);
    let x = rand_vec(&mut rng, 36);
    let (yhat, _) = cnn_forward(&st, &x).unwrap();
    let g = cnn_gradients(&st, &x, &yhat, LossMode::Theory).unwrap();
    assert!(g.dk.iter().all(|v| v.abs() < 1e-12));
    assert!(g.dw.amax() < 1e-12);

    let mut z = st.clone();
    z.w.fill(0.0);
    let g = cnn_gradients(&z, &x, &[1.0, 0.0, 0.0], LossMode::Theory).unwrap();
    assert!(g.dk.iter().all(|&v| v == 0.0));
}

#[test]
fn gradient_finite_differences_many_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for inst in 0..120 {
        let n = [4, 6, 8][inst % 3];
        let p = 2 + inst % 2;
        let mode = if inst % 4 < 2 { LossMode::Theory } else { LossMode::Framework };
        let st = random_cnn(&mut rng, n, p);
        let x = rand_vec(&mut rng, n * n);
        let y = rand_vec(&mut rng, p);
        let g = cnn_gradients(&st, &x, &y, mode).unwrap();
        let fd_k = central_diff(&st.kernel, |k| dense_loss(&CnnState { kernel: k.to_vec(), ..st.clone() }, &x, &y, mode));
        let fd_w = central_diff(st.w.as_slice(), |w| {
            dense_loss(&CnnState { w: DMatrix::from_column_slice(p, n * n, w), ..st.clone() }, &x, &y, mode)
        });
        worst = worst.max(worst_rel(&fd_k, &g.dk)).max(worst_rel(&fd_w, g.dw.as_slice()));
    }
    assert!(worst < 1e-5, "worst relative error {worst}");
}

#[test]
fn fcnn_gradient_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for inst in 0..100 {
        let n = [2, 3, 4][inst % 3];
        let p = 2 + inst % 3;
        let mode = if inst % 2 == 0 { LossMode::Theory } else { LossMode::Framework };
        let f = random_fcnn(&mut rng, n, p);
        let nn = n * n;
        let x = rand_vec(&mut rng, nn);
        let y = rand_vec(&mut rng, p);
        let loss = |w1: &DMatrix<f64>, w2: &DMatrix<f64>| {
            let yhat = w2 * (w1 * DVector::from_column_slice(&x));
            mse_loss(&y, yhat.as_slice(), mode).unwrap()
        };
        let g = fcnn_gradients(&f, &x, &y, mode).unwrap();
        let fd1 = central_diff(f.w1.as_slice(), |w| loss(&DMatrix::from_column_slice(nn, nn, w), &f.w2));
        let fd2 = central_diff(f.w2.as_slice(), |w| loss(&f.w1, &DMatrix::from_column_slice(p, nn, w)));
        worst = worst.max(worst_rel(&fd1, g.dw1.as_slice())).max(worst_rel(&fd2, g.dw2.as_slice()));
    }
    assert!(worst < 1e-5, "worst relative error {worst}");
}

#[test]
fn zero_learning_rate_keeps_state() {
    let data = prepared(&pure16());
    let mut st = init_random(16, 4, 1e-3, 9).unwrap();
    let before = st.clone();
    let mut cfg = TrainConfig::new(0.0, 200);
    cfg.record_every = 50;
    let log = sgd_train(&mut st, &data, &cfg).unwrap();
    assert_eq!(st.kernel, before.kernel);
    assert_eq!(st.w, before.w);
    assert_eq!(st.step, 200);
    let first = &log.records[0];
    for r in &log.records {
        assert_eq!(r.a, first.a);
        assert_eq!(r.dataset_loss, first.dataset_loss);
    }
    assert_eq!(log.steps(), vec![0, 50, 100, 150, 200]);
}

#[test]
fn training_is_bit_reproducible() {
    let data = prepared(&pure16());
    let run = || {
        let mut st = init_random(16, 4, 1e-3, 21).unwrap();
        let mut cfg = TrainConfig::new(1e-3, 500);
        cfg.seed = 21;
        cfg.sampling = SamplingPolicy::UniformRandom;
        cfg.spectrum_indices = vec![0, 5 * 16 + 2];
        let log = sgd_train(&mut st, &data, &cfg).unwrap();
        let mut csv = Vec::new();
        log.write_csv(&mut csv).unwrap();
        (state_digest(&st), csv)
    };
    let (d1, c1) = run();
    let (d2, c2) = run();
    assert_eq!(d1, d2);
    assert_eq!(c1, c2);
    let header = String::from_utf8(c1).unwrap();
    assert!(header.starts_with("step,loss,dataset_loss,a_0,a_1,a_2,a_3,offdiag_max,k2_0,k2_82,bal_"));
}

#[test]
fn random_init_properties() {
    let a = init_random(16, 4, 1e-5, 7).unwrap();
    let b = init_random(16, 4, 1e-5, 7).unwrap();
    let c = init_random(16, 4, 1e-5, 8).unwrap();
    assert_eq!(state_digest(&a), state_digest(&b));
    assert_ne!(state_digest(&a), state_digest(&c));
    let std = (a.kernel.iter().chain(a.w.iter()).map(|v| v * v).sum::<f64>() / (256.0 * 5.0)).sqrt();
    assert!((std / 1e-5 - 1.0).abs() < 0.1, "sample std {std}");

    let data = prepared(&pure16());
    let am = data.effective_a(&a.predict_all(&data));
    let s0 = data.svd.s[0];
    for i in 0..4 {
        assert!(am[(i, i)].abs() < 1e-6 * s0);
    }
    let f1 = fcnn_init_random(4, 2, 1e-5, 3).unwrap();
    let f2 = fcnn_init_random(4, 2, 1e-5, 3).unwrap();
    assert_eq!(f1, f2);
}

#[test]
fn aligned_init_is_diagonal_balanced_and_matches_formula() {
    let spec = pure16();
    let data = prepared(&spec);
    let modes = data.modes.clone().unwrap();
    for seed in 0..5 {
        let st = init_aligned_balanced(&data.svd, &spec, 1e-3, seed).unwrap();
        let a = data.effective_a(&st.predict_all(&data));
        let ks = vec2d_dft(&st.kernel).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    assert!(a[(i, j)].abs() < 1e-10);
                }
            }
            let d = mode_d_factor(&modes, i).unwrap();
            let jf = modes.support[i][0];
            let want = 16.0 / d * ks.coeffs()[jf].norm_sqr() * data.svd.sigma_xx_diag[i];
            assert!((a[(i, i)] - want).abs() <= 1e-10 * want.max(1e-300) + 1e-18, "mode {i}: {} vs {want}", a[(i, i)]);
            assert!(a[(i, i)] > 0.0);
        }
        for b in balancedness_metric(&st, &data.svd, &modes).unwrap() {
            assert!(b.value.unwrap() < 1e-10);
        }
    }
}

#[test]
fn aligned_init_rejects_overlapping_spectra() {
    let mut spec = pure16();
    spec.disjoint = false;
    spec.classes[2] = vec![CosineComponent::new(5, 2, 0.5, 0.0)];
    let d = gen_sums_of_cosines(&spec).unwrap();
    let svd = dataset_svd(&d).unwrap();
    assert!(init_aligned_balanced(&svd, &spec, 1e-3, 0).is_err());
}

#[test]
fn fcnn_aligned_init_reproduces_requested_a() {
    let data = prepared(&pure16());
    let target = [1e-3, 2e-4, 5e-5, 1e-6];
    let f = fcnn_init_aligned(&data.svd, &target).unwrap();
    let a = data.effective_a(&f.predict_all(&data));
    for i in 0..4 {
        for j in 0..4 {
            let want = if i == j { target[i] } else { 0.0 };
            assert!((a[(i, j)] - want).abs() < 1e-12 * target[0].max(1.0));
        }
    }
}

#[test]
fn windowed_loss_trends_down() {
    let spec = pure16();
    let data = prepared(&spec);
    let mut st = init_aligned_balanced(&data.svd, &spec, 1e-5, 0).unwrap();
    let mut cfg = TrainConfig::new(1.0 / 2000.0, 8000);
    cfg.loss = LossMode::Framework;
    cfg.record_every = 52;
    cfg.loss_window = 52;
    let log = sgd_train(&mut st, &data, &cfg).unwrap();
    let losses: Vec<f64> = log.records.iter().map(|r| r.loss).collect();
    let start = losses.iter().position(|&l| l < 0.98 * losses[1]).unwrap();
    for w in losses[start..].windows(2) {
        assert!(w[1] <= 1.05 * w[0] + 1e-12, "{} -> {}", w[0], w[1]);
    }
}

#[test]
fn fcnn_training_learns_all_modes() {
    let spec = pure16();
    let data = prepared(&spec);
    let mut f = fcnn_init_random(16, 4, 1e-3, 1).unwrap();
    let mut cfg = TrainConfig::new(16.0 / 2000.0, 8000);
    cfg.loss = LossMode::Framework;
    cfg.record_every = 1000;
    let log = fcnn_train(&mut f, &data, &cfg).unwrap();
    let last = log.records.last().unwrap();
    for a in 0..4 {
        assert!((last.a[a * 4 + a] / data.svd.s[a] - 1.0).abs() < 0.02);
    }
    assert!(log.balance_keys.is_empty());
}

#[test]
fn divergence_is_reported() {
    let data = prepared(&pure16());
    let mut st = init_random(16, 4, 0.5, 0).unwrap();
    let cfg = TrainConfig::new(1.0, 2000);
    assert!(matches!(sgd_train(&mut st, &data, &cfg), Err(lcnn::LabError::Divergence { .. })));
}

#[test]
fn checkpoint_round_trip_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut c = random_cnn(&mut rng, 5, 3);
    c.step = 1234;
    let f = random_fcnn(&mut rng, 3, 2);
    for ck in [Checkpoint::Cnn(c), Checkpoint::Fcnn(f)] {
        let path = dir.path().join("x.ck");
        save_checkpoint(&ck, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), ck);
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.pop();
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
    let path = dir.path().join("junk.ck");
    std::fs::write(&path, b"not a checkpoint at all, definitely").unwrap();
    assert!(load_checkpoint(&path).is_err());
}

#[test]
fn config_validation() {
    assert!(TrainConfig::new(-1.0, 10).validate().is_err());
    assert!(TrainConfig::new(f64::NAN, 10).validate().is_err());
    let mut cfg = TrainConfig::new(1e-3, 10);
    cfg.record_every = 0;
    assert!(cfg.validate().is_err());
    assert!(TrainConfig::new(1e-3, 10).validate().is_ok());
    let bad = CnnState { n: 4, p: 2, kernel: vec![0.0; 15], w: DMatrix::zeros(2, 16), step: 0 };
    assert!(bad.validate().is_err());
}

#[test]
fn pure_cosine_dataset_prepares_without_modes() {
    let d = gen_pure_cosines(&pure16()).unwrap();
    let svd = dataset_svd(&d).unwrap();
    let data = PreparedDataset::new(&d, &svd, None).unwrap();
    let st = init_random(16, 4, 1e-3, 0).unwrap();
    assert!(st.balancedness(&data).is_empty());
    assert_eq!(st.kernel_power(&data, &[0, 1]).len(), 2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn cnn_forward_matches_dense(n in 1usize..=8, p in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let st = random_cnn(&mut rng, n, p);
        let x = rand_vec(&mut rng, n * n);
        let (yhat, h) = cnn_forward(&st, &x).unwrap();
        let dbc = materialize_dbc(&Kernel::from_vec(st.kernel.clone()).unwrap(), DbcVariant::Convolution).unwrap().matrix;
        let hd = dbc * DVector::from_column_slice(&x);
        let yd = &st.w * &hd;
        prop_assert!(h.iter().zip(hd.iter()).all(|(a, b)| (a - b).abs() < 1e-10));
        prop_assert!(yhat.iter().zip(yd.iter()).all(|(a, b)| (a - b).abs() < 1e-10));
    }

    #[test]
    fn framework_gradients_are_scaled_theory_gradients(n in 2usize..=6, p in 2usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let st = random_cnn(&mut rng, n, p);
        let x = rand_vec(&mut rng, n * n);
        let y = rand_vec(&mut rng, p);
        let t = cnn_gradients(&st, &x, &y, LossMode::Theory).unwrap();
        let f = cnn_gradients(&st, &x, &y, LossMode::Framework).unwrap();
        let c = 2.0 / p as f64;
        prop_assert!(t.dk.iter().zip(&f.dk).all(|(a, b)| (a * c - b).abs() < 1e-10 * (1.0 + a.abs())));
        prop_assert!((t.dw * c - f.dw).amax() < 1e-10);
    }
}
