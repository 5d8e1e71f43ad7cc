use super::*;
use crate::decomp::{KnownEnergy, ModelKind, WParam};
use crate::systems::{generate, AnalyticSystem, Trajectory};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn dataset(n: usize, dt: f64, samples: usize, count: usize, x: impl Fn(usize, f64) -> Vec<f64>) -> TrajectoryDataset {
    let times: Vec<f64> = (0..samples).map(|i| i as f64 * dt).collect();
    let trajectories = (0..count)
        .map(|k| Trajectory { times: times.clone(), states: times.iter().map(|&t| x(k, t)).collect() })
        .collect();
    TrajectoryDataset { schema_version: 1, system: "synthetic".into(), n, noise_sigma: 0.0, seed: 0, freq: 1.0 / dt, trajectories }
}

fn pendulum_true() -> DecompModel {
    let w = Tensor::matrix(2, 2, vec![0.0, 1.0, -1.0, -0.35]);
    DecompModel::known_h_constant(KnownEnergy::Pendulum { g: 9.81 }, w).unwrap()
}

fn pendulum_data(freq: f64) -> TrajectoryDataset {
    let sys = AnalyticSystem::pendulum();
    generate(&sys, &sys.sample_ics(3, 21), 2.0, freq, 0.0, 0).unwrap()
}

fn one_window(steps: usize) -> Batch {
    Batch { steps, windows: vec![Window { traj: 0, start: 0 }] }
}

#[test]
fn linear_test_functions_annihilate_constant_data() {
    let times: Vec<f64> = (0..21).map(|i| 0.3 + 0.05 * i as f64).collect();
    let op = WindowOperator::new(&times, 4, |k, t| 1.0 + k as f64 * t, |k, _| k as f64).unwrap();
    let x = Tensor::from_rows(&vec![vec![1.5, -2.0]; 21]);
    let r = op.residuals(&x, &Tensor::zeros(&[21, 2]));
    assert!(r.max_abs() < 1e-12, "{}", r.max_abs());
}

#[test]
fn unit_test_function_integrates_unit_field() {
    let times: Vec<f64> = (0..31).map(|i| 0.1 * i as f64).collect();
    let op = WindowOperator::new(&times, 1, |_, _| 1.0, |_, _| 0.0).unwrap();
    let x = Tensor::from_rows(&times.iter().map(|&t| vec![t]).collect::<Vec<_>>());
    let r = op.residuals(&x, &Tensor::filled(&[31, 1], 1.0));
    assert!(r.max_abs() < 1e-12);
}

#[test]
fn gaussian_basis_on_constant_data_has_second_order_quadrature_error() {
    let err = |l: usize| {
        let times: Vec<f64> = (0..=l).map(|i| i as f64 / l as f64).collect();
        let op = TestBasis::default().operator(&times).unwrap();
        let x = Tensor::from_rows(&vec![vec![1.0]; l + 1]);
        op.residuals(&x, &Tensor::zeros(&[l + 1, 1])).max_abs()
    };
    let (a, b) = (err(50), err(100));
    assert!(a < 1e-2 && a / b >= 3.5, "{a} {b}");
}

#[test]
fn pendulum_weak_loss_with_true_field_converges() {
    let m = pendulum_true();
    let loss = |freq: f64, steps: usize| {
        let ds = pendulum_data(freq);
        let batch = tiled_batch(&ds, steps).unwrap();
        let mut tape = Tape::new();
        let vars = m.bind(&mut tape, false);
        let l = weak_loss(&m, &vars, &mut tape, &ds, &batch, &TestBasis::default()).unwrap();
        tape.value(l).item()
    };
    let (a, b) = (loss(100.0, 50), loss(200.0, 100));
    assert!(a < 1e-6, "{a}");
    assert!(a / b >= 3.5, "{a} {b}");
}

#[test]
fn residuals_are_linear_for_linear_fields() {
    let w = Tensor::matrix(2, 2, vec![0.1, 1.0, -1.0, -0.2]);
    let m = DecompModel::known_h_constant(KnownEnergy::Quadratic { n: 2 }, w).unwrap();
    let times: Vec<f64> = (0..41).map(|i| 0.025 * i as f64).collect();
    let x1: Vec<Vec<f64>> = times.iter().map(|t| vec![t.sin(), t * t]).collect();
    let x2: Vec<Vec<f64>> = times.iter().map(|t| vec![1.0 - t, (2.0 * t).cos()]).collect();
    let (a, b) = (0.7, -1.9);
    let mix: Vec<Vec<f64>> = x1.iter().zip(&x2).map(|(p, q)| vec![a * p[0] + b * q[0], a * p[1] + b * q[1]]).collect();
    let basis = TestBasis::default();
    let r1 = weak_residuals(&m, &times, &x1, &basis).unwrap();
    let r2 = weak_residuals(&m, &times, &x2, &basis).unwrap();
    let rm = weak_residuals(&m, &times, &mix, &basis).unwrap();
    let want = r1.zip_map(&r2, |p, q| a * p + b * q);
    assert!(rm.zip_map(&want, |p, q| p - q).max_abs() < 1e-12);
}

#[test]
fn batched_weak_loss_matches_per_window_residuals() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let m = DecompModel::new(ModelKind::GhnnLocalStable, 2, &[8], &mut r).unwrap();
    let ds = pendulum_data(20.0);
    let batch = sample_batch(&ds, &BatchSpec { batch_size: 7, steps: 10 }, &mut r).unwrap();
    let basis = TestBasis { k: 12, gamma: 10.0 };
    let mut tape = Tape::new();
    let vars = m.bind(&mut tape, false);
    let got = weak_loss(&m, &vars, &mut tape, &ds, &batch, &basis).unwrap();
    let got = tape.value(got).item();
    let mut want = 0.0;
    for w in &batch.windows {
        let tr = &ds.trajectories[w.traj];
        let res = weak_residuals(&m, &tr.times[w.start..=w.start + 10], &tr.states[w.start..=w.start + 10], &basis).unwrap();
        want += res.data().iter().map(|v| v * v).sum::<f64>();
    }
    want /= (7 * 12) as f64;
    assert!((got - want).abs() <= 1e-12 * want.max(1.0), "{got} {want}");
}

#[test]
fn derivative_estimates_are_exact_for_quadratics() {
    let times: Vec<f64> = (0..9).map(|i| 0.5 + 0.25 * i as f64).collect();
    let states: Vec<Vec<f64>> = times.iter().map(|&t| vec![t, t * t]).collect();
    let d = estimate_derivatives(&times, &states).unwrap();
    for (t, v) in times.iter().zip(&d) {
        assert!((v[0] - 1.0).abs() < 1e-12 && (v[1] - 2.0 * t).abs() < 1e-12, "{t}: {v:?}");
    }
}

#[test]
fn derivative_loss_weights_window_samples() {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let m = DecompModel::new(ModelKind::Fcnn, 2, &[8], &mut r).unwrap();
    let ds = pendulum_data(20.0);
    let ctx = LossContext::new(&ds, LossKind::Deriv).unwrap();
    let batch = Batch { steps: 4, windows: vec![Window { traj: 0, start: 0 }, Window { traj: 0, start: 2 }] };
    let mut tape = Tape::new();
    let vars = m.bind(&mut tape, false);
    let got = derivative_loss(&m, &vars, &mut tape, &ctx, &batch).unwrap();
    let got = tape.value(got).item();
    let d = ctx.derivatives.as_ref().unwrap();
    let mut want = 0.0;
    for w in &batch.windows {
        for j in 0..=4 {
            let i = w.start + j;
            let f = m.eval_field(&ds.trajectories[0].states[i]).unwrap();
            want += (f[0] - d[0][i][0]).powi(2) + (f[1] - d[0][i][1]).powi(2);
        }
    }
    want /= 10.0;
    assert!((got - want).abs() < 1e-12 * want.max(1.0));
}

#[test]
fn state_loss_with_true_field_is_rk4_error_only() {
    let m = pendulum_true();
    let ds = pendulum_data(20.0);
    let batch = tiled_batch(&ds, 10).unwrap();
    let mut tape = Tape::new();
    let vars = m.bind(&mut tape, false);
    let l = state_loss(&m, &vars, &mut tape, &ds, &batch, 4).unwrap();
    let l = tape.value(l).item();
    assert!(l < 1e-10, "{l}");
}

#[test]
fn flux_prior_vanishes_at_nominal_rate() {
    let sys = AnalyticSystem::pendulum();
    let m = pendulum_true();
    let ds = pendulum_data(20.0);
    let ctx = LossContext::new(&ds, LossKind::Weak).unwrap().with_nominal_rate(|x| sys.energy_rate_true(x).unwrap());
    let batch = tiled_batch(&ds, 10).unwrap();
    let base = objective_value(&m, &LossContext::new(&ds, LossKind::Weak).unwrap(), &batch, &LossConfig::default()).unwrap();
    let with = objective_value(&m, &ctx, &batch, &LossConfig::default()).unwrap();
    assert!((with - base).abs() < 1e-20, "{with} {base}");
    let shifted = LossContext::new(&ds, LossKind::Weak).unwrap().with_nominal_rate(|x| sys.energy_rate_true(x).unwrap() + 0.5);
    let off = objective_value(&m, &shifted, &batch, &LossConfig::default()).unwrap();
    assert!((off - base - 0.25).abs() < 1e-9, "{off} {base}");
}

fn fd_check(m: &DecompModel, ctx: &LossContext, batch: &Batch, cfg: &LossConfig) {
    let (_, g) = objective_and_grad(m, ctx, batch, cfg).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (p, gp) in g.iter().enumerate() {
        for i in 0..gp.numel() {
            let mut plus = m.clone();
            plus.params_mut()[p].data_mut()[i] += h;
            let mut minus = m.clone();
            minus.params_mut()[p].data_mut()[i] -= h;
            let fd = (objective_value(&plus, ctx, batch, cfg).unwrap() - objective_value(&minus, ctx, batch, cfg).unwrap()) / (2.0 * h);
            let an = gp.data()[i];
            worst = worst.max((fd - an).abs() / an.abs().max(fd.abs()).max(1e-3));
        }
    }
    assert!(worst < 1e-4, "{} {}: {worst}", m.kind, cfg.kind);
}

#[test]
fn loss_gradients_match_finite_differences() {
    let mut r = ChaCha8Rng::seed_from_u64(9);
    let ds = pendulum_data(10.0);
    let batch = sample_batch(&ds, &BatchSpec { batch_size: 3, steps: 4 }, &mut r).unwrap();
    for kind in LossKind::ALL {
        let ctx = LossContext::new(&ds, kind).unwrap();
        let cfg = LossConfig { basis: TestBasis { k: 6, gamma: 10.0 }, substeps: 2, ..LossConfig::new(kind) };
        for mk in [ModelKind::GhnnGlobalStable, ModelKind::GhnnFluxPrior, ModelKind::Fcnn] {
            let m = DecompModel::new(mk, 2, &[6], &mut r).unwrap();
            fd_check(&m, &ctx, &batch, &cfg);
        }
    }
}

#[test]
fn flux_prior_gradient_matches_finite_differences() {
    let sys = AnalyticSystem::pendulum();
    let mut r = ChaCha8Rng::seed_from_u64(10);
    let ds = pendulum_data(10.0);
    let ctx = LossContext::new(&ds, LossKind::Weak).unwrap().with_nominal_rate(|x| sys.energy_rate_true(x).unwrap());
    let batch = sample_batch(&ds, &BatchSpec { batch_size: 2, steps: 4 }, &mut r).unwrap();
    let cfg = LossConfig { basis: TestBasis { k: 5, gamma: 10.0 }, ..LossConfig::default() };
    let m = DecompModel::new(ModelKind::GhnnFluxPrior, 2, &[6], &mut r).unwrap();
    fd_check(&m, &ctx, &batch, &cfg);
}

#[test]
fn sampled_windows_fit_inside_trajectories() {
    let ds = dataset(1, 0.1, 12, 3, |k, t| vec![k as f64 + t]);
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let spec = BatchSpec { batch_size: 500, steps: 11 };
    let b = sample_batch(&ds, &spec, &mut r).unwrap();
    assert!(b.windows.iter().all(|w| w.start == 0 && w.traj < 3));
    assert_eq!(batches_per_epoch(&ds, &BatchSpec { batch_size: 2, steps: 5 }), 11);
    let tiles = tiled_batch(&ds, 5).unwrap();
    assert_eq!(tiles.windows.len(), 6);
}

#[test]
fn error_cases() {
    let short = dataset(1, 0.1, 2, 1, |_, t| vec![t]);
    assert!(matches!(LossContext::new(&short, LossKind::Deriv), Err(LossError::TooShort { len: 2, need: 3, .. })));
    let ds = dataset(1, 0.1, 20, 1, |_, t| vec![t]);
    let mut r = ChaCha8Rng::seed_from_u64(2);
    assert!(matches!(sample_batch(&ds, &BatchSpec { batch_size: 4, steps: 0 }, &mut r), Err(LossError::Config(_))));
    assert!(matches!(sample_batch(&ds, &BatchSpec { batch_size: 4, steps: 20 }, &mut r), Err(LossError::TooShort { .. })));

    let w = Tensor::matrix(1, 1, vec![1.0]);
    let mut m = DecompModel::known_h_constant(KnownEnergy::Quadratic { n: 1 }, w).unwrap();
    let mut bad = ds.clone();
    bad.trajectories[0].states[13][0] = f64::INFINITY;
    let batch = Batch { steps: 4, windows: vec![Window { traj: 0, start: 0 }, Window { traj: 0, start: 10 }] };
    let ctx = LossContext::new(&bad, LossKind::Weak).unwrap();
    assert_eq!(objective_value(&m, &ctx, &batch, &LossConfig::default()), Err(LossError::NonFinite { window: 1 }));
    if let Some(WParam::Constant(t)) = m.w.as_mut() {
        t.data_mut()[0] = f64::NAN;
    }
    let ctx = LossContext::new(&ds, LossKind::Weak).unwrap();
    assert_eq!(objective_value(&m, &ctx, &one_window(4), &LossConfig::default()), Err(LossError::NonFinite { window: 0 }));
    assert!(matches!(
        weak_residuals(&m, &[0.0, 0.1, 0.3], &[vec![0.0], vec![0.0], vec![0.0]], &TestBasis::default()),
        Err(LossError::Config(_))
    ));
}

#[test]
fn loss_kind_names_round_trip() {
    for k in LossKind::ALL {
        assert_eq!(k.name().parse::<LossKind>().unwrap(), k);
    }
    assert!("mse".parse::<LossKind>().is_err());
}
