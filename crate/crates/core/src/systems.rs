//! Benchmark dynamical systems with analytic generalized Hamiltonian
//! decompositions, and noisy trajectory datasets sampled from them.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::decomp::KnownEnergy;
use crate::odeint::{integrate, IntegrationConfig, OdeError, VectorField};

pub const DATASET_SCHEMA_VERSION: u32 = 1;
pub const GRAVITY: f64 = 9.81;
pub const DAMPING: f64 = 0.35;

#[derive(Debug, Error)]
pub enum SystemError {
    #[error("particles {0} and {1} coincide")]
    Singular(usize, usize),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Ode(#[from] OdeError),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed dataset: {0}")]
    Format(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase")]
pub enum AnalyticSystem {
    Pendulum { g: f64 },
    Duffing,
    Lorenz63 { sigma: f64, rho: f64, beta: f64 },
    /// Unit-mass planar bodies with `G = 1` in the rotational field
    /// `sinc(r)(y, −x)`; state `[x₁, y₁, …, x_N, y_N, u₁, v₁, …, u_N, v_N]`.
    NBody { particles: usize, field: bool },
}

impl fmt::Display for AnalyticSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AnalyticSystem {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "pendulum" => Ok(Self::pendulum()),
            "duffing" => Ok(AnalyticSystem::Duffing),
            "lorenz63" | "lorenz" => Ok(Self::lorenz()),
            "nbody" => Ok(Self::nbody(12)),
            _ => Err(format!("unknown system '{s}' (expected pendulum, duffing, lorenz63 or nbody)")),
        }
    }
}

/// Unnormalized `sin(r)/r`.
pub fn sinc(r: f64) -> f64 {
    if r.abs() < 1e-8 {
        1.0 - r * r / 6.0
    } else {
        r.sin() / r
    }
}

impl AnalyticSystem {
    pub fn pendulum() -> Self {
        AnalyticSystem::Pendulum { g: GRAVITY }
    }

    pub fn lorenz() -> Self {
        AnalyticSystem::Lorenz63 { sigma: 10.0, rho: 28.0, beta: 8.0 / 3.0 }
    }

    pub fn nbody(particles: usize) -> Self {
        AnalyticSystem::NBody { particles, field: true }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AnalyticSystem::Pendulum { .. } => "pendulum",
            AnalyticSystem::Duffing => "duffing",
            AnalyticSystem::Lorenz63 { .. } => "lorenz63",
            AnalyticSystem::NBody { .. } => "nbody",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            AnalyticSystem::Pendulum { .. } | AnalyticSystem::Duffing => 2,
            AnalyticSystem::Lorenz63 { .. } => 3,
            AnalyticSystem::NBody { particles, .. } => 4 * particles,
        }
    }

    pub fn is_chaotic(&self) -> bool {
        matches!(self, AnalyticSystem::Lorenz63 { .. })
    }

    fn check(&self, x: &[f64]) -> Result<(), SystemError> {
        if x.len() != self.dim() {
            return Err(SystemError::Dimension { expected: self.dim(), got: x.len() });
        }
        Ok(())
    }

    pub fn eval_true(&self, x: &[f64]) -> Result<Vec<f64>, SystemError> {
        self.check(x)?;
        Ok(match *self {
            AnalyticSystem::Pendulum { g } => vec![x[1], -g * x[0].sin() - DAMPING * x[1]],
            AnalyticSystem::Duffing => vec![x[1], x[0] - x[0].powi(3) - DAMPING * x[1]],
            AnalyticSystem::Lorenz63 { sigma, rho, beta } => vec![
                sigma * (x[1] - x[0]),
                x[0] * (rho - x[2]) - x[1],
                x[0] * x[1] - beta * x[2],
            ],
            AnalyticSystem::NBody { particles, field } => {
                let np = particles;
                let mut out = vec![0.0; 4 * np];
                out[..2 * np].copy_from_slice(&x[2 * np..]);
                for i in 0..np {
                    let (xi, yi) = (x[2 * i], x[2 * i + 1]);
                    let mut a = [0.0, 0.0];
                    for j in (0..np).filter(|&j| j != i) {
                        let dx = x[2 * j] - xi;
                        let dy = x[2 * j + 1] - yi;
                        let r2 = dx * dx + dy * dy;
                        if r2 == 0.0 {
                            return Err(SystemError::Singular(i.min(j), i.max(j)));
                        }
                        let inv = r2.powf(-1.5);
                        a[0] += dx * inv;
                        a[1] += dy * inv;
                    }
                    if field {
                        let f = force_field(xi, yi);
                        a[0] += f[0];
                        a[1] += f[1];
                    }
                    out[2 * np + 2 * i] = a[0];
                    out[2 * np + 2 * i + 1] = a[1];
                }
                out
            }
        })
    }

    pub fn known_energy(&self) -> KnownEnergy {
        match *self {
            AnalyticSystem::Pendulum { g } => KnownEnergy::Pendulum { g },
            AnalyticSystem::Duffing => KnownEnergy::Duffing,
            AnalyticSystem::Lorenz63 { sigma, rho, .. } => KnownEnergy::Lorenz { sigma, rho },
            AnalyticSystem::NBody { particles, .. } => KnownEnergy::NBody { particles },
        }
    }

    pub fn true_energy(&self, x: &[f64]) -> Result<f64, SystemError> {
        self.check(x)?;
        Ok(match *self {
            AnalyticSystem::Pendulum { g } => g * (1.0 - x[0].cos()) + 0.5 * x[1] * x[1],
            AnalyticSystem::Duffing => 0.25 * x[0].powi(4) - 0.5 * x[0] * x[0] + 0.5 * x[1] * x[1],
            AnalyticSystem::Lorenz63 { sigma, rho, .. } => {
                -0.5 * (rho / sigma) * x[0] * x[0] + 0.5 * (x[1] * x[1] + x[2] * x[2])
            }
            AnalyticSystem::NBody { particles, .. } => {
                let np = particles;
                let mut pot = 0.0;
                for i in 0..np {
                    for j in i + 1..np {
                        let r = (x[2 * j] - x[2 * i]).hypot(x[2 * j + 1] - x[2 * i + 1]);
                        if r == 0.0 {
                            return Err(SystemError::Singular(i, j));
                        }
                        pot -= 1.0 / r;
                    }
                }
                pot + 0.5 * x[2 * np..].iter().map(|v| v * v).sum::<f64>()
            }
        })
    }

    /// Analytic `∇H`.
    pub fn grad_h_true(&self, x: &[f64]) -> Result<Vec<f64>, SystemError> {
        self.check(x)?;
        Ok(match *self {
            AnalyticSystem::Pendulum { g } => vec![g * x[0].sin(), x[1]],
            AnalyticSystem::Duffing => vec![x[0].powi(3) - x[0], x[1]],
            AnalyticSystem::Lorenz63 { sigma, rho, .. } => vec![-rho / sigma * x[0], x[1], x[2]],
            AnalyticSystem::NBody { particles, .. } => {
                let np = particles;
                let mut g = vec![0.0; 4 * np];
                for i in 0..np {
                    for j in (0..np).filter(|&j| j != i) {
                        let dx = x[2 * j] - x[2 * i];
                        let dy = x[2 * j + 1] - x[2 * i + 1];
                        let r2 = dx * dx + dy * dy;
                        if r2 == 0.0 {
                            return Err(SystemError::Singular(i.min(j), i.max(j)));
                        }
                        let inv = r2.powf(-1.5);
                        g[2 * i] -= dx * inv;
                        g[2 * i + 1] -= dy * inv;
                    }
                }
                g[2 * np..].copy_from_slice(&x[2 * np..]);
                g
            }
        })
    }

    /// Analytic skew-symmetric part `J(x)`, where a closed form is known.
    pub fn j_true(&self, x: &[f64]) -> Option<Tensor> {
        match *self {
            AnalyticSystem::Pendulum { .. } | AnalyticSystem::Duffing => {
                Some(Tensor::matrix(2, 2, vec![0.0, 1.0, -1.0, 0.0]))
            }
            AnalyticSystem::Lorenz63 { sigma, .. } => Some(Tensor::matrix(
                3,
                3,
                vec![0.0, sigma, 0.0, -sigma, 0.0, -x[0], 0.0, x[0], 0.0],
            )),
            AnalyticSystem::NBody { .. } => None,
        }
    }

    /// Analytic symmetric part `R(x)`, where a closed form is known.
    pub fn r_true(&self, _x: &[f64]) -> Option<Tensor> {
        match *self {
            AnalyticSystem::Pendulum { .. } | AnalyticSystem::Duffing => {
                Some(Tensor::matrix(2, 2, vec![0.0, 0.0, 0.0, -DAMPING]))
            }
            AnalyticSystem::Lorenz63 { sigma, rho, beta } => Some(Tensor::matrix(
                3,
                3,
                vec![sigma * sigma / rho, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -beta],
            )),
            AnalyticSystem::NBody { .. } => None,
        }
    }

    /// `(J + R)∇H` from the analytic decomposition.
    pub fn decomposed_field(&self, x: &[f64]) -> Option<Vec<f64>> {
        let j = self.j_true(x)?;
        let r = self.r_true(x)?;
        let g = self.grad_h_true(x).ok()?;
        let n = self.dim();
        Some((0..n).map(|i| (0..n).map(|k| (j.get2(i, k) + r.get2(i, k)) * g[k]).sum()).collect())
    }

    /// Analytic energy rate `∇HᵀR∇H`; for the n-body system the power
    /// injected by the external field, `Σᵢ ⟨Fᵢ, vᵢ⟩`.
    pub fn energy_rate_true(&self, x: &[f64]) -> Result<f64, SystemError> {
        self.check(x)?;
        Ok(match *self {
            AnalyticSystem::Pendulum { .. } | AnalyticSystem::Duffing => -DAMPING * x[1] * x[1],
            AnalyticSystem::Lorenz63 { rho, beta, .. } => rho * x[0] * x[0] - x[1] * x[1] - beta * x[2] * x[2],
            AnalyticSystem::NBody { particles, field } => {
                if !field {
                    0.0
                } else {
                    (0..particles).map(|i| particle_power(x, particles, i)).sum()
                }
            }
        })
    }

    /// Uniform initial-condition box per system; n-body uses its own sampler.
    pub fn ic_region(&self) -> Vec<(f64, f64)> {
        use std::f64::consts::PI;
        match self {
            AnalyticSystem::Pendulum { .. } => vec![(-PI, PI), (-2.0, 2.0)],
            AnalyticSystem::Duffing => vec![(-2.0, 2.0), (-2.0, 2.0)],
            AnalyticSystem::Lorenz63 { .. } => vec![(-15.0, 15.0), (-15.0, 15.0), (10.0, 40.0)],
            AnalyticSystem::NBody { particles, .. } => vec![(f64::NAN, f64::NAN); 4 * particles],
        }
    }

    pub fn sample_ic(&self, rng: &mut impl Rng) -> Vec<f64> {
        match self {
            AnalyticSystem::NBody { particles, .. } => {
                let mut x: Vec<f64> = (0..2 * particles).map(|_| rng.sample(StandardNormal)).collect();
                x.resize(4 * particles, 0.0);
                x
            }
            _ => self.ic_region().into_iter().map(|(lo, hi)| rng.random_range(lo..hi)).collect(),
        }
    }

    pub fn sample_ics(&self, count: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count).map(|_| self.sample_ic(&mut rng)).collect()
    }

    /// Noiseless trajectory sampled on `ts`.
    pub fn simulate(&self, x0: &[f64], ts: &[f64], cfg: &IntegrationConfig) -> Result<Vec<Vec<f64>>, SystemError> {
        self.check(x0)?;
        integrate(
            |x| self.eval_true(x).map_err(|e| OdeError::Config(format!("true field: {e}"))),
            x0,
            ts,
            cfg,
        )
        .map_err(Into::into)
    }
}

impl VectorField for AnalyticSystem {
    fn dim(&self) -> usize {
        AnalyticSystem::dim(self)
    }

    fn eval_rows(&self, x: &Tensor) -> Result<Tensor, OdeError> {
        let n = AnalyticSystem::dim(self);
        let mut out = Vec::with_capacity(x.numel());
        for r in 0..x.rows() {
            out.extend(self.eval_true(x.row(r)).map_err(|e| OdeError::Config(format!("true field: {e}")))?);
        }
        Ok(Tensor::matrix(x.rows(), n, out))
    }
}

/// `sinc(r)(y, −x)` at a position.
pub fn force_field(x: f64, y: f64) -> [f64; 2] {
    let s = sinc(x.hypot(y));
    [s * y, -s * x]
}

/// `⟨F(xᵢ), vᵢ⟩` for particle `i`.
pub fn particle_power(x: &[f64], particles: usize, i: usize) -> f64 {
    let f = force_field(x[2 * i], x[2 * i + 1]);
    f[0] * x[2 * particles + 2 * i] + f[1] * x[2 * particles + 2 * i + 1]
}

/// State indices `{xᵢ, yᵢ, uᵢ, vᵢ}` belonging to particle `i`.
pub fn particle_indices(particles: usize, i: usize) -> [usize; 4] {
    [2 * i, 2 * i + 1, 2 * particles + 2 * i, 2 * particles + 2 * i + 1]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dt(&self) -> f64 {
        self.times[1] - self.times[0]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryDataset {
    pub schema_version: u32,
    pub system: String,
    pub n: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    pub freq: f64,
    pub trajectories: Vec<Trajectory>,
}

/// Relative spacing deviation tolerated before a grid counts as non-uniform.
const UNIFORM_TOL: f64 = 1e-6;

impl TrajectoryDataset {
    pub fn validate(&self) -> Result<(), SystemError> {
        let bad = |m: String| Err(SystemError::Format(m));
        if self.schema_version != DATASET_SCHEMA_VERSION {
            return bad(format!("unsupported schema_version {}", self.schema_version));
        }
        if self.trajectories.is_empty() {
            return bad("no trajectories".into());
        }
        for (k, tr) in self.trajectories.iter().enumerate() {
            if tr.times.len() != tr.states.len() || tr.times.len() < 2 {
                return bad(format!("trajectory {k}: needs ≥ 2 samples with matching times"));
            }
            if tr.states.iter().any(|s| s.len() != self.n) {
                return bad(format!("trajectory {k}: state width differs from n = {}", self.n));
            }
            let dt = tr.dt();
            if !(dt > 0.0) || tr.times.windows(2).any(|w| ((w[1] - w[0]) - dt).abs() > UNIFORM_TOL * dt.max(1.0)) {
                return bad(format!("trajectory {k}: times must be uniform and increasing"));
            }
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        self.trajectories[0].dt()
    }

    pub fn total_samples(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    pub fn analytic_system(&self) -> Option<AnalyticSystem> {
        match self.system.as_str() {
            "nbody" => Some(AnalyticSystem::nbody(self.n / 4)),
            s => s.parse().ok(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("dataset serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, SystemError> {
        let ds: Self = serde_json::from_str(s).map_err(|e| SystemError::Format(e.to_string()))?;
        ds.validate()?;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<(), SystemError> {
        fs::write(path, self.to_json()).map_err(|source| SystemError::Io { path: path.into(), source })
    }

    pub fn load(path: &Path) -> Result<Self, SystemError> {
        let s = fs::read_to_string(path).map_err(|source| SystemError::Io { path: path.into(), source })?;
        Self::from_json(&s)
    }

    /// One CSV per trajectory, `{stem}_{k}.csv` with header `t,x1..xn`.
    pub fn write_csv(&self, dir: &Path, stem: &str) -> Result<Vec<PathBuf>, SystemError> {
        std::fs::create_dir_all(dir).map_err(|source| SystemError::Io { path: dir.to_path_buf(), source })?;
        let mut paths = Vec::new();
        for (k, tr) in self.trajectories.iter().enumerate() {
            let path = dir.join(format!("{stem}_{k}.csv"));
            let io = |e: csv::Error| SystemError::Io { path: path.clone(), source: e.into() };
            let mut w = csv::Writer::from_path(&path).map_err(io)?;
            let mut header = vec!["t".to_string()];
            header.extend((1..=self.n).map(|i| format!("x{i}")));
            w.write_record(&header).map_err(io)?;
            for (t, s) in tr.times.iter().zip(&tr.states) {
                let mut rec = vec![t.to_string()];
                rec.extend(s.iter().map(f64::to_string));
                w.write_record(&rec).map_err(io)?;
            }
            w.flush().map_err(|source| SystemError::Io { path: path.clone(), source })?;
            paths.push(path);
        }
        Ok(paths)
    }
}

/// Uniform sampling grid `tᵢ = i·duration/samples`, `i < samples`.
pub fn sample_times(duration: f64, samples: usize) -> Vec<f64> {
    let dt = duration / samples as f64;
    (0..samples).map(|i| i as f64 * dt).collect()
}

/// Simulates every initial condition on a uniform grid of `samples` points
/// over `duration` and adds iid Gaussian noise of standard deviation
/// `noise_sigma`. Trajectory `k` draws its noise from stream `k` of `seed`.
pub fn generate_samples(
    sys: &AnalyticSystem,
    ics: &[Vec<f64>],
    duration: f64,
    samples: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<TrajectoryDataset, SystemError> {
    if samples < 2 || !(duration > 0.0) {
        return Err(SystemError::InvalidArgument("need at least 2 samples over a positive duration".into()));
    }
    if !(noise_sigma >= 0.0) {
        return Err(SystemError::InvalidArgument("noise_sigma must be nonnegative".into()));
    }
    let ts = sample_times(duration, samples);
    let cfg = IntegrationConfig::default();
    let noise = Normal::new(0.0, noise_sigma).map_err(|e| SystemError::InvalidArgument(e.to_string()))?;
    let mut trajectories = Vec::with_capacity(ics.len());
    for (k, x0) in ics.iter().enumerate() {
        let mut states = sys.simulate(x0, &ts, &cfg)?;
        if noise_sigma > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            for s in &mut states {
                for v in s.iter_mut() {
                    *v += noise.sample(&mut rng);
                }
            }
        }
        trajectories.push(Trajectory { times: ts.clone(), states });
    }
    Ok(TrajectoryDataset {
        schema_version: DATASET_SCHEMA_VERSION,
        system: sys.name().to_string(),
        n: sys.dim(),
        noise_sigma,
        seed,
        freq: samples as f64 / duration,
        trajectories,
    })
}

/// [`generate_samples`] with `duration·freq` samples.
pub fn generate(
    sys: &AnalyticSystem,
    ics: &[Vec<f64>],
    duration: f64,
    freq: f64,
    noise_sigma: f64,
    seed: u64,
) -> Result<TrajectoryDataset, SystemError> {
    let samples = (duration * freq).round();
    if !(samples >= 2.0) {
        return Err(SystemError::InvalidArgument("freq·duration must be at least 2".into()));
    }
    generate_samples(sys, ics, duration, samples as usize, noise_sigma, seed)
}
