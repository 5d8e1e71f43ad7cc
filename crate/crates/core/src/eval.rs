//! Trajectory and derivative error metrics against an analytic system,
//! aligned-column reports, and per-particle energy flux summaries.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::decomp::{DecompError, DecompModel, ModelKind};
use crate::odeint::{integrate, IntegrationConfig, OdeError, VectorField};
use crate::systems::{force_field, particle_indices, particle_power, AnalyticSystem, SystemError};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("model dimension {model} does not match system dimension {system}")]
    Dimension { model: usize, system: usize },
    #[error("reference trajectory {ic} failed: {source}")]
    Reference { ic: usize, source: SystemError },
    #[error(transparent)]
    Model(#[from] DecompError),
    #[error(transparent)]
    Ode(#[from] OdeError),
    #[error(transparent)]
    System(#[from] SystemError),
    #[error("flux report needs a known-H model, got {0}")]
    WrongVariant(ModelKind),
    #[error("state of length {len} is not a {particles}-particle layout")]
    Layout { len: usize, particles: usize },
    #[error("invalid evaluation settings: {0}")]
    Config(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub n_ics: usize,
    pub horizon: f64,
    pub n_pts: usize,
    pub seed: u64,
    pub integration: IntegrationConfig,
    /// Skip trajectory comparison (used for chaotic systems).
    pub derivative_only: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_ics: 50,
            horizon: 200.0,
            n_pts: 200,
            seed: 0,
            integration: IntegrationConfig::default(),
            derivative_only: false,
        }
    }
}

impl EvalConfig {
    /// Evaluation grid `tᵢ = i·horizon/n_pts` for `i = 1..=n_pts`.
    pub fn times(&self) -> Vec<f64> {
        (1..=self.n_pts).map(|i| i as f64 * self.horizon / self.n_pts as f64).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl Stat {
    /// Mean and population standard deviation; `None` when empty.
    pub fn of(xs: &[f64]) -> Option<Stat> {
        if xs.is_empty() {
            return None;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Some(Stat { mean, std: var.sqrt(), count: xs.len() })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IcRecord {
    pub index: usize,
    pub ic: Vec<f64>,
    pub state_error: Option<f64>,
    pub derivative_error: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub divergence: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub system: String,
    pub model: String,
    pub state_error: Option<Stat>,
    pub derivative_error: Stat,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_time: Option<f64>,
    pub diverged: bool,
    pub divergent_count: usize,
    pub per_ic: Vec<IcRecord>,
}

fn mean_norm_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let s: f64 = a
        .iter()
        .zip(b)
        .map(|(p, q)| p.iter().zip(q).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
        .sum();
    s / a.len() as f64
}

/// Integrates the system and the model from shared initial conditions and
/// compares trajectories and vector fields along the reference states.
pub fn evaluate(model: &dyn VectorField, sys: &AnalyticSystem, name: &str, cfg: &EvalConfig) -> Result<MetricsReport, EvalError> {
    if model.dim() != sys.dim() {
        return Err(EvalError::Dimension { model: model.dim(), system: sys.dim() });
    }
    if cfg.n_ics == 0 || cfg.n_pts == 0 || !(cfg.horizon > 0.0) {
        return Err(EvalError::Config("need n_ics ≥ 1, n_pts ≥ 1 and a positive horizon".into()));
    }
    cfg.integration.validate()?;
    let ics = sys.sample_ics(cfg.n_ics, cfg.seed);
    let mut grid = vec![0.0];
    grid.extend(cfg.times());
    let per_ic: Vec<IcRecord> = ics
        .par_iter()
        .enumerate()
        .map(|(index, ic)| -> Result<IcRecord, EvalError> {
            let truth = sys.simulate(ic, &grid, &cfg.integration).map_err(|source| EvalError::Reference { ic: index, source })?;
            let truth = &truth[1..];
            let xs = Tensor::from_rows(truth);
            let f_true = sys.eval_rows(&xs)?;
            let f_model = model.eval_rows(&xs)?;
            let derivative_error = mean_norm_diff(&tensor_rows(&f_true), &tensor_rows(&f_model));
            let (state_error, divergence) = if cfg.derivative_only {
                (None, None)
            } else {
                let f = |x: &[f64]| Ok(model.eval_rows(&Tensor::matrix(1, x.len(), x.to_vec()))?.into_data());
                match integrate(f, ic, &grid, &cfg.integration) {
                    Ok(pred) => (Some(mean_norm_diff(truth, &pred[1..])), None),
                    Err(e) if e.is_divergence() => (None, Some(e.to_string())),
                    Err(e) => return Err(e.into()),
                }
            };
            Ok(IcRecord { index, ic: ic.clone(), state_error, derivative_error, divergence })
        })
        .collect::<Result<_, _>>()?;
    let divergent_count = per_ic.iter().filter(|r| r.divergence.is_some()).count();
    let states: Vec<f64> = per_ic.iter().filter_map(|r| r.state_error).collect();
    let derivs: Vec<f64> = per_ic.iter().map(|r| r.derivative_error).collect();
    Ok(MetricsReport {
        schema_version: REPORT_SCHEMA_VERSION,
        system: sys.name().to_string(),
        model: name.to_string(),
        state_error: Stat::of(&states),
        derivative_error: Stat::of(&derivs).expect("at least one initial condition"),
        train_time: None,
        diverged: divergent_count > 0,
        divergent_count,
        per_ic,
    })
}

fn tensor_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn fmt_stat(s: Option<Stat>) -> String {
    match s {
        Some(s) => format!("{:.4} ± {:.4}", s.mean, s.std),
        None => "n/a".into(),
    }
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// State error cell: the statistic over finite ICs, flagged when any
    /// IC diverged.
    pub fn state_cell(&self) -> String {
        match (self.state_error, self.divergent_count) {
            (None, 0) => "n/a".into(),
            (None, k) => format!("Diverged ({k}/{})", self.per_ic.len()),
            (s, 0) => fmt_stat(s),
            (s, k) => format!("{} [diverged {k}/{}]", fmt_stat(s), self.per_ic.len()),
        }
    }

    pub fn to_table(&self) -> String {
        table(&[Row::from_report(self.model.clone(), self)], false)
    }
}

/// One line of a comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub label: String,
    pub state: String,
    pub derivative: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_time: Option<f64>,
}

impl Row {
    pub fn from_report(label: String, r: &MetricsReport) -> Self {
        Row { label, state: r.state_cell(), derivative: fmt_stat(Some(r.derivative_error)), train_time: r.train_time }
    }
}

/// Aligned text table with columns State Error, Derivative Error and,
/// when requested, Train Time.
pub fn table(rows: &[Row], with_time: bool) -> String {
    let mut head = vec!["Model".to_string(), "State Error".into(), "Derivative Error".into()];
    if with_time {
        head.push("Train Time (s)".into());
    }
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut c = vec![r.label.clone(), r.state.clone(), r.derivative.clone()];
            if with_time {
                c.push(r.train_time.map_or("n/a".into(), |t| format!("{t:.1}")));
            }
            c
        })
        .collect();
    let widths: Vec<usize> = (0..head.len())
        .map(|j| cells.iter().map(|c| c[j].chars().count()).chain([head[j].chars().count()]).max().unwrap())
        .collect();
    let line = |c: &[String]| {
        let mut s = String::new();
        for (j, v) in c.iter().enumerate() {
            let pad = widths[j] - v.chars().count();
            let _ = write!(s, "{}{}", v, " ".repeat(pad));
            if j + 1 < c.len() {
                s.push_str("  ");
            }
        }
        s.trim_end().to_string() + "\n"
    };
    let mut out = line(&head);
    out.push_str(&(widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  ") + "\n"));
    for c in &cells {
        out.push_str(&line(c));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParticleFlux {
    pub particle: usize,
    pub position: [f64; 2],
    pub velocity: [f64; 2],
    pub field: [f64; 2],
    /// Sum of the particle's four state-variable flux entries.
    pub flux: f64,
    /// `⟨F(position), velocity⟩` under the analytic field.
    pub field_power: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FluxReport {
    pub schema_version: u32,
    pub particles: Vec<ParticleFlux>,
    pub energy_rate: f64,
}

impl FluxReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("flux report serializes")
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("particle,x,y,vx,vy,fx,fy,flux,field_power\n");
        for p in &self.particles {
            let _ = writeln!(
                s,
                "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
                p.particle, p.position[0], p.position[1], p.velocity[0], p.velocity[1], p.field[0], p.field[1], p.flux, p.field_power
            );
        }
        s
    }

    pub fn flux_sum(&self) -> f64 {
        self.particles.iter().map(|p| p.flux).sum()
    }
}

fn particle_count(model: &DecompModel, x: &[f64]) -> Result<usize, EvalError> {
    if model.kind != ModelKind::KnownH {
        return Err(EvalError::WrongVariant(model.kind));
    }
    if x.len() != model.n || x.len() % 4 != 0 || x.is_empty() {
        return Err(EvalError::Layout { len: x.len(), particles: model.n / 4 });
    }
    Ok(x.len() / 4)
}

/// Per-particle energy flux at state `x` of a known-H N-body model.
pub fn flux_report(model: &DecompModel, x: &[f64]) -> Result<FluxReport, EvalError> {
    let np = particle_count(model, x)?;
    let per_state = model.flux_per_state(x)?;
    let particles = (0..np)
        .map(|i| {
            let [px, py, vx, vy] = particle_indices(np, i);
            ParticleFlux {
                particle: i,
                position: [x[px], x[py]],
                velocity: [x[vx], x[vy]],
                field: force_field(x[px], x[py]),
                flux: per_state[px] + per_state[py] + per_state[vx] + per_state[vy],
                field_power: particle_power(x, np, i),
            }
        })
        .collect();
    Ok(FluxReport { schema_version: REPORT_SCHEMA_VERSION, particles, energy_rate: model.energy_rate(x)? })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignAgreement {
    pub threshold: f64,
    pub considered: usize,
    pub agreeing: usize,
}

impl SignAgreement {
    pub fn fraction(&self) -> f64 {
        if self.considered == 0 {
            return 0.0;
        }
        self.agreeing as f64 / self.considered as f64
    }
}

/// Sign agreement between model flux and `⟨F, v⟩` over every particle of
/// every snapshot whose `|flux|` exceeds the 25th percentile.
pub fn flux_sign_agreement(model: &DecompModel, snapshots: &[Vec<f64>]) -> Result<SignAgreement, EvalError> {
    let mut pairs = Vec::new();
    for x in snapshots {
        for p in flux_report(model, x)?.particles {
            pairs.push((p.flux, p.field_power));
        }
    }
    if pairs.is_empty() {
        return Err(EvalError::Config("no snapshots".into()));
    }
    let mut mags: Vec<f64> = pairs.iter().map(|p| p.0.abs()).collect();
    mags.sort_by(f64::total_cmp);
    let threshold = mags[(mags.len() - 1) / 4];
    let kept: Vec<_> = pairs.iter().filter(|p| p.0.abs() > threshold).collect();
    let agreeing = kept.iter().filter(|p| p.0.signum() == p.1.signum()).count();
    Ok(SignAgreement { threshold, considered: kept.len(), agreeing })
}

#[cfg(test)]
mod tests;
