use super::*;
use crate::decomp::KnownEnergy;

fn pendulum_true() -> DecompModel {
    let w = Tensor::matrix(2, 2, vec![0.0, 1.0, -1.0, -0.35]);
    DecompModel::known_h_constant(KnownEnergy::Pendulum { g: 9.81 }, w).unwrap()
}

fn small(n_ics: usize, horizon: f64) -> EvalConfig {
    EvalConfig { n_ics, horizon, n_pts: horizon as usize, seed: 3, ..EvalConfig::default() }
}

#[test]
fn true_field_has_negligible_errors() {
    let sys = AnalyticSystem::pendulum();
    let r = evaluate(&pendulum_true(), &sys, "truth", &small(5, 20.0)).unwrap();
    assert!(r.state_error.unwrap().mean < 1e-4, "{:?}", r.state_error);
    assert!(r.derivative_error.mean < 1e-12);
    assert!(!r.diverged && r.per_ic.len() == 5);
}

#[test]
fn zero_model_derivative_error_is_mean_field_norm() {
    let sys = AnalyticSystem::pendulum();
    let zero = DecompModel::known_h_constant(KnownEnergy::Pendulum { g: 9.81 }, Tensor::zeros(&[2, 2])).unwrap();
    let cfg = small(4, 10.0);
    let r = evaluate(&zero, &sys, "zero", &cfg).unwrap();
    let mut grid = vec![0.0];
    grid.extend(cfg.times());
    let mut want = Vec::new();
    for ic in sys.sample_ics(4, cfg.seed) {
        let xs = sys.simulate(&ic, &grid, &cfg.integration).unwrap();
        let s: f64 = xs[1..].iter().map(|x| sys.eval_true(x).unwrap().iter().map(|v| v * v).sum::<f64>().sqrt()).sum();
        want.push(s / cfg.n_pts as f64);
    }
    let want = Stat::of(&want).unwrap();
    assert!((r.derivative_error.mean - want.mean).abs() < 1e-12);
    assert!((r.derivative_error.std - want.std).abs() < 1e-12);
}

#[test]
fn divergent_trajectories_are_flagged_and_excluded() {
    let sys = AnalyticSystem::pendulum();
    let blow = DecompModel::known_h_constant(KnownEnergy::Quadratic { n: 2 }, Tensor::matrix(2, 2, vec![5.0, 0.0, 0.0, 5.0])).unwrap();
    let r = evaluate(&blow, &sys, "blow", &small(3, 20.0)).unwrap();
    assert!(r.diverged);
    assert_eq!(r.divergent_count, 3);
    assert!(r.state_error.is_none());
    assert!(r.per_ic.iter().all(|p| p.divergence.is_some() && p.state_error.is_none()));
    assert!(r.state_cell().starts_with("Diverged"));
    assert!(r.derivative_error.mean.is_finite());
}

#[test]
fn statistics_ignore_enumeration_order() {
    let xs = [0.3, 1.7, 0.2, 5.0, 2.2];
    let mut ys = xs;
    ys.reverse();
    let (a, b) = (Stat::of(&xs).unwrap(), Stat::of(&ys).unwrap());
    assert!((a.mean - b.mean).abs() < 1e-15 && (a.std - b.std).abs() < 1e-15);
    assert_eq!(Stat::of(&[2.0]).unwrap().std, 0.0);
    assert!(Stat::of(&[]).is_none());
}

#[test]
fn chaotic_systems_can_skip_state_error() {
    let sys = AnalyticSystem::lorenz();
    let zero = DecompModel::known_h_constant(KnownEnergy::Quadratic { n: 3 }, Tensor::zeros(&[3, 3])).unwrap();
    let cfg = EvalConfig { derivative_only: true, ..small(2, 5.0) };
    let r = evaluate(&zero, &sys, "zero", &cfg).unwrap();
    assert!(r.state_error.is_none() && !r.diverged);
    assert_eq!(r.state_cell(), "n/a");
}

#[test]
fn dimension_mismatch_is_rejected() {
    let sys = AnalyticSystem::lorenz();
    assert!(matches!(evaluate(&pendulum_true(), &sys, "p", &small(1, 1.0)), Err(EvalError::Dimension { model: 2, system: 3 })));
}

#[test]
fn report_json_and_table() {
    let sys = AnalyticSystem::pendulum();
    let r = evaluate(&pendulum_true(), &sys, "truth", &small(2, 4.0)).unwrap();
    let back: MetricsReport = serde_json::from_str(&r.to_json()).unwrap();
    assert_eq!(back, r);
    let t = r.to_table();
    let lines: Vec<&str> = t.lines().collect();
    assert!(lines[0].starts_with("Model") && lines[0].contains("State Error") && lines[0].contains("Derivative Error"));
    assert_eq!(lines.len(), 3);
    let with_time = table(&[Row { train_time: Some(12.34), ..Row::from_report("w".into(), &r) }], true);
    assert!(with_time.contains("Train Time (s)") && with_time.contains("12.3"));
}

fn constant_nbody(np: usize, damping: f64) -> DecompModel {
    let n = 4 * np;
    let h = 2 * np;
    let mut w = Tensor::zeros(&[n, n]);
    for i in 0..h {
        w.data_mut()[i * n + h + i] = 1.0;
        w.data_mut()[(h + i) * n + i] = -1.0;
        w.data_mut()[(h + i) * n + h + i] = damping;
    }
    DecompModel::known_h_constant(KnownEnergy::NBody { particles: np }, w).unwrap()
}

#[test]
fn conservative_model_has_zero_flux() {
    let m = constant_nbody(3, 0.0);
    let x: Vec<f64> = (0..12).map(|i| (i as f64 * 0.7).sin()).collect();
    let r = flux_report(&m, &x).unwrap();
    assert!(r.particles.iter().all(|p| p.flux == 0.0));
    assert_eq!(r.energy_rate, 0.0);
}

#[test]
fn particle_fluxes_sum_to_energy_rate() {
    let m = constant_nbody(3, -0.4);
    for k in 0..20 {
        let x: Vec<f64> = (0..12).map(|i| ((i * 7 + k) as f64 * 0.37).cos() * 1.5).collect();
        let r = flux_report(&m, &x).unwrap();
        assert!((r.flux_sum() - r.energy_rate).abs() <= 1e-12 * r.energy_rate.abs().max(1.0));
        assert!(r.particles.iter().all(|p| p.flux <= 0.0));
    }
}

#[test]
fn aligned_velocity_gives_positive_flux_and_power() {
    let m = constant_nbody(1, 0.5);
    let (px, py) = (0.8, -0.3);
    let f = force_field(px, py);
    let x = vec![px, py, 0.1 * f[0], 0.1 * f[1]];
    let p = &flux_report(&m, &x).unwrap().particles[0];
    assert!(p.flux > 0.0 && p.field_power > 0.0);
    let agree = flux_sign_agreement(&m, &[x]).unwrap();
    assert_eq!(agree.considered, 0);
    let csv = flux_report(&m, &[px, py, f[0], f[1]]).unwrap().to_csv();
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn flux_report_rejects_wrong_models() {
    assert!(matches!(flux_report(&pendulum_true(), &[0.0, 0.0]), Err(EvalError::Layout { .. })));
    let mut r = rand::rng();
    let g = DecompModel::new(ModelKind::GhnnConserved, 4, &[4], &mut r).unwrap();
    assert!(matches!(flux_report(&g, &[0.0; 4]), Err(EvalError::WrongVariant(ModelKind::GhnnConserved))));
}
