//! ODE integration: fixed-step RK4 (numeric and on the tape) and adaptive
//! Dormand–Prince 5(4) with PI step control and dense output.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdError, Tape, Tensor, Var};
use crate::decomp::{DecompError, DecompModel, ModelVars};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Rk4,
    Dopri45,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegrationConfig {
    pub method: Method,
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
    /// Fixed step for RK4; the grid spacing when absent.
    pub dt: Option<f64>,
}

impl Default for IntegrationConfig {
    fn default() -> Self {
        Self::dopri(1e-6, 1e-12)
    }
}

impl IntegrationConfig {
    pub fn dopri(rtol: f64, atol: f64) -> Self {
        Self { method: Method::Dopri45, rtol, atol, max_steps: 500_000, dt: None }
    }

    pub fn rk4(dt: Option<f64>) -> Self {
        Self { method: Method::Rk4, rtol: 1e-6, atol: 1e-12, max_steps: 10_000_000, dt }
    }

    pub fn validate(&self) -> Result<(), OdeError> {
        let bad = |m: &str| Err(OdeError::Config(m.to_string()));
        if !(self.rtol > 0.0) || !(self.atol > 0.0) {
            return bad("rtol and atol must be positive");
        }
        if let Some(dt) = self.dt {
            if !(dt > 0.0) {
                return bad("dt must be positive");
            }
        }
        if self.max_steps == 0 {
            return bad("max_steps must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DivergenceCause {
    StepUnderflow,
    MaxSteps,
    BlowUp,
    NonFinite,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OdeError {
    #[error("integration diverged at t = {t} ({cause:?})")]
    Diverged { t: f64, cause: DivergenceCause },
    #[error("time grid must be strictly increasing")]
    InvalidGrid,
    #[error("invalid integrator configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] DecompError),
}

impl From<AdError> for OdeError {
    fn from(e: AdError) -> Self {
        OdeError::Model(e.into())
    }
}

impl OdeError {
    pub fn is_divergence(&self) -> bool {
        matches!(self, OdeError::Diverged { .. })
    }
}

/// States larger than this in magnitude count as a finite-time blow-up.
pub const BLOW_UP: f64 = 1e8;
pub const MIN_STEP: f64 = 1e-12;

/// Counters from one adaptive integration.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepStats {
    pub accepted: usize,
    pub rejected: usize,
    pub evaluations: usize,
    /// Sum of accepted step sizes.
    pub step_sum: f64,
    /// Sum over accepted steps of the max-norm of the embedded error estimate.
    pub error_sum: f64,
}

impl StepStats {
    pub fn mean_step(&self) -> f64 {
        self.step_sum / self.accepted.max(1) as f64
    }

    pub fn mean_error(&self) -> f64 {
        self.error_sum / self.accepted.max(1) as f64
    }
}

fn check_grid(ts: &[f64]) -> Result<(), OdeError> {
    if ts.is_empty() || ts.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(OdeError::InvalidGrid);
    }
    Ok(())
}

fn bad_state(t: f64, y: &[f64]) -> Option<OdeError> {
    if y.iter().any(|v| !v.is_finite()) {
        Some(OdeError::Diverged { t, cause: DivergenceCause::NonFinite })
    } else if y.iter().any(|v| v.abs() > BLOW_UP) {
        Some(OdeError::Diverged { t, cause: DivergenceCause::BlowUp })
    } else {
        None
    }
}

/// Integrates the autonomous system `ẋ = f(x)` and returns `x(tᵢ)` for
/// every entry of `ts`, starting from `x0` at `ts[0]`.
pub fn integrate<F>(f: F, x0: &[f64], ts: &[f64], cfg: &IntegrationConfig) -> Result<Vec<Vec<f64>>, OdeError>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>, OdeError>,
{
    integrate_with_stats(f, x0, ts, cfg).map(|(x, _)| x)
}

pub fn integrate_with_stats<F>(
    f: F,
    x0: &[f64],
    ts: &[f64],
    cfg: &IntegrationConfig,
) -> Result<(Vec<Vec<f64>>, StepStats), OdeError>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>, OdeError>,
{
    cfg.validate()?;
    check_grid(ts)?;
    match cfg.method {
        Method::Rk4 => rk4(f, x0, ts, cfg),
        Method::Dopri45 => dopri45(f, x0, ts, cfg),
    }
}

fn axpy(y: &[f64], h: f64, terms: &[(f64, &[f64])]) -> Vec<f64> {
    let mut out = y.to_vec();
    for &(c, k) in terms {
        if c != 0.0 {
            for (o, v) in out.iter_mut().zip(k) {
                *o += h * c * v;
            }
        }
    }
    out
}

fn substeps(span: f64, dt: f64) -> usize {
    ((span / dt) - 1e-9).ceil().max(1.0) as usize
}

fn rk4<F>(mut f: F, x0: &[f64], ts: &[f64], cfg: &IntegrationConfig) -> Result<(Vec<Vec<f64>>, StepStats), OdeError>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>, OdeError>,
{
    let mut stats = StepStats::default();
    let mut out = vec![x0.to_vec()];
    let mut y = x0.to_vec();
    for w in ts.windows(2) {
        let span = w[1] - w[0];
        let m = substeps(span, cfg.dt.unwrap_or(span));
        let h = span / m as f64;
        for s in 0..m {
            if stats.accepted >= cfg.max_steps {
                return Err(OdeError::Diverged { t: w[0] + s as f64 * h, cause: DivergenceCause::MaxSteps });
            }
            let k1 = f(&y)?;
            let k2 = f(&axpy(&y, h, &[(0.5, &k1)]))?;
            let k3 = f(&axpy(&y, h, &[(0.5, &k2)]))?;
            let k4 = f(&axpy(&y, h, &[(1.0, &k3)]))?;
            y = axpy(&y, h, &[(1.0 / 6.0, &k1), (1.0 / 3.0, &k2), (1.0 / 3.0, &k3), (1.0 / 6.0, &k4)]);
            stats.accepted += 1;
            stats.evaluations += 4;
            stats.step_sum += h;
            if let Some(e) = bad_state(w[0] + (s + 1) as f64 * h, &y) {
                return Err(e);
            }
        }
        out.push(y.clone());
    }
    Ok((out, stats))
}

mod dp {
    pub const A: [[f64; 6]; 7] = [
        [0.0; 6],
        [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
        [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
        [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
        [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
        [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
    ];
    /// Fifth-order minus embedded fourth-order weights.
    pub const E: [f64; 7] = [
        71.0 / 57600.0,
        0.0,
        -71.0 / 16695.0,
        71.0 / 1920.0,
        -17253.0 / 339200.0,
        22.0 / 525.0,
        -1.0 / 40.0,
    ];
    /// Dense-output weights.
    pub const D: [f64; 7] = [
        -12715105075.0 / 11282082432.0,
        0.0,
        87487479700.0 / 32700410799.0,
        -10690763975.0 / 1880347072.0,
        701980252875.0 / 199316789632.0,
        -1453857185.0 / 822651844.0,
        69997945.0 / 29380423.0,
    ];

    pub const SAFETY: f64 = 0.9;
    pub const FAC_MIN: f64 = 0.2;
    pub const FAC_MAX: f64 = 10.0;
    pub const BETA: f64 = 0.04;
    pub const ALPHA: f64 = 0.2 - 0.75 * BETA;
}

fn rms_norm(v: &[f64], y: &[f64], ynew: &[f64], rtol: f64, atol: f64) -> f64 {
    let s: f64 = v
        .iter()
        .zip(y.iter().zip(ynew))
        .map(|(e, (a, b))| {
            let sc = atol + rtol * a.abs().max(b.abs());
            (e / sc).powi(2)
        })
        .sum();
    (s / v.len().max(1) as f64).sqrt()
}

fn initial_step<F>(f: &mut F, y: &[f64], k1: &[f64], span: f64, cfg: &IntegrationConfig) -> Result<f64, OdeError>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>, OdeError>,
{
    let sc: Vec<f64> = y.iter().map(|v| cfg.atol + cfg.rtol * v.abs()).collect();
    let norm = |v: &[f64]| (v.iter().zip(&sc).map(|(a, s)| (a / s).powi(2)).sum::<f64>() / v.len().max(1) as f64).sqrt();
    let (d0, d1) = (norm(y), norm(k1));
    let mut h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    h0 = h0.min(span);
    let y1 = axpy(y, h0, &[(1.0, k1)]);
    let k2 = f(&y1)?;
    let diff: Vec<f64> = k2.iter().zip(k1).map(|(a, b)| a - b).collect();
    let d2 = norm(&diff) / h0;
    let h1 = if d1.max(d2) <= 1e-15 { (h0 * 1e-3).max(1e-6) } else { (0.01 / d1.max(d2)).powf(0.2) };
    Ok((100.0 * h0).min(h1).min(span))
}

fn dopri45<F>(mut f: F, x0: &[f64], ts: &[f64], cfg: &IntegrationConfig) -> Result<(Vec<Vec<f64>>, StepStats), OdeError>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>, OdeError>,
{
    let t_end = *ts.last().unwrap();
    let mut stats = StepStats::default();
    let mut out = vec![x0.to_vec()];
    if ts.len() == 1 {
        return Ok((out, stats));
    }
    let n = x0.len();
    let mut t = ts[0];
    let mut y = x0.to_vec();
    let mut k1 = f(&y)?;
    stats.evaluations += 1;
    let mut h = initial_step(&mut f, &y, &k1, t_end - t, cfg)?;
    stats.evaluations += 1;
    let mut fac_old = 1e-4_f64;
    let mut next = 1;
    let mut reject_streak = false;
    while next < ts.len() {
        if stats.accepted + stats.rejected >= cfg.max_steps {
            return Err(OdeError::Diverged { t, cause: DivergenceCause::MaxSteps });
        }
        if h < MIN_STEP {
            return Err(OdeError::Diverged { t, cause: DivergenceCause::StepUnderflow });
        }
        let last = t + h >= t_end - 1e-12 * t_end.abs().max(1.0);
        if last {
            h = t_end - t;
        }
        let mut k = vec![k1.clone()];
        for s in 1..6 {
            let terms: Vec<(f64, &[f64])> = (0..s).map(|j| (dp::A[s][j], k[j].as_slice())).collect();
            let ys = axpy(&y, h, &terms);
            k.push(f(&ys)?);
        }
        stats.evaluations += 5;
        let terms: Vec<(f64, &[f64])> = (0..6).map(|j| (dp::A[6][j], k[j].as_slice())).collect();
        let ynew = axpy(&y, h, &terms);
        let k7 = f(&ynew)?;
        stats.evaluations += 1;
        k.push(k7);
        let mut est = vec![0.0; n];
        for (s, ks) in k.iter().enumerate() {
            let e = dp::E[s];
            if e != 0.0 {
                for (o, v) in est.iter_mut().zip(ks) {
                    *o += h * e * v;
                }
            }
        }
        let k7 = &k[6];
        let err = rms_norm(&est, &y, &ynew, cfg.rtol, cfg.atol);
        if !err.is_finite() || ynew.iter().any(|v| !v.is_finite()) {
            stats.rejected += 1;
            h *= dp::FAC_MIN;
            reject_streak = true;
            continue;
        }
        let fac11 = err.powf(dp::ALPHA);
        if err <= 1.0 {
            let fac = (fac11 / fac_old.powf(dp::BETA)) / dp::SAFETY;
            let fac = fac.clamp(1.0 / dp::FAC_MAX, 1.0 / dp::FAC_MIN);
            let mut hnew = h / fac;
            fac_old = err.max(1e-4);
            let ydiff: Vec<f64> = ynew.iter().zip(&y).map(|(a, b)| a - b).collect();
            let t_new = if last { t_end } else { t + h };
            while next < ts.len() && ts[next] <= t_new {
                let theta = (ts[next] - t) / h;
                let th1 = 1.0 - theta;
                let mut yi = vec![0.0; n];
                for i in 0..n {
                    let r2 = ydiff[i];
                    let r3 = h * k[0][i] - r2;
                    let r4 = r2 - h * k7[i] - r3;
                    let r5 = h * (0..7).filter(|&s| dp::D[s] != 0.0).map(|s| dp::D[s] * k[s][i]).sum::<f64>();
                    yi[i] = y[i] + theta * (r2 + th1 * (r3 + theta * (r4 + th1 * r5)));
                }
                if ts[next] == t_new {
                    yi.clone_from(&ynew);
                }
                out.push(yi);
                next += 1;
            }
            stats.accepted += 1;
            stats.step_sum += h;
            stats.error_sum += est.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            t = t_new;
            y = ynew;
            k1 = k7.clone();
            if let Some(e) = bad_state(t, &y) {
                return Err(e);
            }
            if reject_streak {
                hnew = hnew.min(h);
            }
            reject_streak = false;
            h = hnew;
        } else {
            stats.rejected += 1;
            h /= (fac11 / dp::SAFETY).min(1.0 / dp::FAC_MIN);
            reject_streak = true;
        }
    }
    Ok((out, stats))
}

/// Integrates a batch of initial conditions of the same system as one
/// stacked state, falling back to one-at-a-time integration when the
/// batch fails so a single divergent trajectory does not poison the rest.
pub fn integrate_many<F>(
    f_batch: F,
    x0s: &[Vec<f64>],
    ts: &[f64],
    cfg: &IntegrationConfig,
) -> Vec<Result<Vec<Vec<f64>>, OdeError>>
where
    F: Fn(&Tensor) -> Result<Tensor, OdeError>,
{
    if x0s.is_empty() {
        return Vec::new();
    }
    let n = x0s[0].len();
    let b = x0s.len();
    let stacked: Vec<f64> = x0s.iter().flatten().copied().collect();
    let batch = integrate(|y| Ok(f_batch(&Tensor::matrix(b, n, y.to_vec()))?.into_data()), &stacked, ts, cfg);
    match batch {
        Ok(traj) => (0..b)
            .map(|i| Ok(traj.iter().map(|row| row[i * n..(i + 1) * n].to_vec()).collect()))
            .collect(),
        Err(_) if b > 1 => x0s
            .iter()
            .map(|x0| integrate(|y| Ok(f_batch(&Tensor::matrix(1, n, y.to_vec()))?.into_data()), x0, ts, cfg))
            .collect(),
        Err(e) => vec![Err(e)],
    }
}

/// An autonomous vector field evaluated row-wise on a batch of states.
pub trait VectorField: Sync {
    fn dim(&self) -> usize;
    fn eval_rows(&self, x: &Tensor) -> Result<Tensor, OdeError>;
}

impl VectorField for DecompModel {
    fn dim(&self) -> usize {
        self.n
    }

    fn eval_rows(&self, x: &Tensor) -> Result<Tensor, OdeError> {
        Ok(self.eval_batch(x)?)
    }
}

/// Numeric trajectories of a vector field from several initial conditions.
pub fn integrate_model(
    m: &dyn VectorField,
    x0s: &[Vec<f64>],
    ts: &[f64],
    cfg: &IntegrationConfig,
) -> Vec<Result<Vec<Vec<f64>>, OdeError>> {
    integrate_many(|x| m.eval_rows(x), x0s, ts, cfg)
}

/// RK4 on the tape for a batch of initial conditions `x0` (`B×n`), so that
/// every state depends differentiably on whatever `f` closes over. Returns
/// the recorded state at each grid time, starting with `x0` itself.
pub fn integrate_diff_with<F>(
    tape: &mut Tape,
    mut f: F,
    x0: Var,
    ts: &[f64],
    cfg: &IntegrationConfig,
) -> Result<Vec<Var>, OdeError>
where
    F: FnMut(&mut Tape, Var) -> Result<Var, OdeError>,
{
    if cfg.method != Method::Rk4 {
        return Err(OdeError::Config("differentiable integration requires rk4".into()));
    }
    cfg.validate()?;
    if ts.len() <= 1 {
        return Ok(vec![x0]);
    }
    check_grid(ts)?;
    let mut out = vec![x0];
    let mut y = x0;
    for w in ts.windows(2) {
        let span = w[1] - w[0];
        let m = substeps(span, cfg.dt.unwrap_or(span));
        let h = span / m as f64;
        for s in 0..m {
            let k1 = f(tape, y)?;
            let a = tape.scale(k1, 0.5 * h)?;
            let y2 = tape.add(y, a)?;
            let k2 = f(tape, y2)?;
            let a = tape.scale(k2, 0.5 * h)?;
            let y3 = tape.add(y, a)?;
            let k3 = f(tape, y3)?;
            let a = tape.scale(k3, h)?;
            let y4 = tape.add(y, a)?;
            let k4 = f(tape, y4)?;
            let k23 = tape.add(k2, k3)?;
            let k23 = tape.scale(k23, 2.0)?;
            let k14 = tape.add(k1, k4)?;
            let inc = tape.add(k14, k23)?;
            let inc = tape.scale(inc, h / 6.0)?;
            y = tape.add(y, inc)?;
            if let Some(e) = bad_state(w[0] + (s + 1) as f64 * h, tape.value(y).data()) {
                return Err(e);
            }
        }
        out.push(y);
    }
    Ok(out)
}

/// [`integrate_diff_with`] for a model whose parameters are bound as `vars`.
pub fn integrate_diff(
    m: &DecompModel,
    vars: &ModelVars,
    tape: &mut Tape,
    x0: Var,
    ts: &[f64],
    cfg: &IntegrationConfig,
) -> Result<Vec<Var>, OdeError> {
    integrate_diff_with(tape, |t, x| Ok(m.record_field(vars, t, x)?), x0, ts, cfg)
}
