//! Training objectives: weak-form residuals against Gaussian test
//! functions, derivative regression on finite-difference estimates, and
//! state regression through a differentiable RK4 rollout, plus the soft
//! energy-flux prior and the finite-difference curl penalty.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdError, Tape, Tensor, Var};
use crate::decomp::{DecompError, DecompModel, ModelVars, Parts};
use crate::odeint::{integrate_diff, IntegrationConfig, OdeError, VectorField};
use crate::systems::TrajectoryDataset;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error(transparent)]
    Model(#[from] DecompError),
    #[error(transparent)]
    Ode(#[from] OdeError),
    #[error("non-finite model output in window {window}")]
    NonFinite { window: usize },
    #[error("trajectory {traj} has {len} samples, window needs {need}")]
    TooShort { traj: usize, len: usize, need: usize },
    #[error("nominal energy rate series does not match the states ({expected} vs {got})")]
    Misaligned { expected: usize, got: usize },
    #[error("invalid loss configuration: {0}")]
    Config(String),
}

impl From<AdError> for LossError {
    fn from(e: AdError) -> Self {
        LossError::Model(e.into())
    }
}

type Res<T> = Result<T, LossError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Weak,
    Deriv,
    State,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [LossKind::Weak, LossKind::Deriv, LossKind::State];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Weak => "weak",
            LossKind::Deriv => "deriv",
            LossKind::State => "state",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown loss '{s}' (expected weak, deriv or state)"))
    }
}

/// Gaussian radial basis `ψ_k(t) = exp(−γ(t − c_k)²)` with `K` centers
/// spread evenly over each window, endpoints included.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestBasis {
    pub k: usize,
    pub gamma: f64,
}

impl Default for TestBasis {
    fn default() -> Self {
        TestBasis { k: 200, gamma: 10.0 }
    }
}

impl TestBasis {
    pub fn centers(&self, t0: f64, t1: f64) -> Vec<f64> {
        let k = self.k.max(2);
        (0..k).map(|i| t0 + (t1 - t0) * i as f64 / (k - 1) as f64).collect()
    }

    pub fn psi(&self, c: f64, t: f64) -> f64 {
        (-self.gamma * (t - c).powi(2)).exp()
    }

    pub fn psi_dot(&self, c: f64, t: f64) -> f64 {
        -2.0 * self.gamma * (t - c) * self.psi(c, t)
    }

    /// Quadrature operator for a window sampled at `times`.
    pub fn operator(&self, times: &[f64]) -> Res<WindowOperator> {
        if self.k < 2 {
            return Err(LossError::Config("test basis needs K ≥ 2".into()));
        }
        let c = self.centers(times[0], *times.last().unwrap());
        WindowOperator::new(times, self.k, |k, t| self.psi(c[k], t), |k, t| self.psi_dot(c[k], t))
    }
}

/// Discrete weak form on a window of `l + 1` samples. For data `X` and
/// field values `F` (both `(l+1)×n`) the residuals are `M·X − P·F` where
/// `M` carries the boundary term minus the trapezoid-weighted `ψ̇` and `P`
/// the trapezoid-weighted `ψ`.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowOperator {
    pub m: Tensor,
    pub p: Tensor,
}

impl WindowOperator {
    pub fn new(
        times: &[f64],
        k: usize,
        psi: impl Fn(usize, f64) -> f64,
        psi_dot: impl Fn(usize, f64) -> f64,
    ) -> Res<Self> {
        let l1 = times.len();
        if l1 < 2 {
            return Err(LossError::Config("window needs at least two samples".into()));
        }
        let w = trapezoid_weights(times);
        let mut m = vec![0.0; k * l1];
        let mut p = vec![0.0; k * l1];
        for q in 0..k {
            for (j, &t) in times.iter().enumerate() {
                m[q * l1 + j] = -w[j] * psi_dot(q, t);
                p[q * l1 + j] = w[j] * psi(q, t);
            }
            m[q * l1 + l1 - 1] += psi(q, times[l1 - 1]);
            m[q * l1] -= psi(q, times[0]);
        }
        Ok(WindowOperator { m: Tensor::matrix(k, l1, m), p: Tensor::matrix(k, l1, p) })
    }

    pub fn k(&self) -> usize {
        self.m.rows()
    }

    /// Residuals `M·X − P·F` (`K×n`) for one window.
    pub fn residuals(&self, x: &Tensor, f: &Tensor) -> Tensor {
        let (k, l1, n) = (self.k(), self.m.cols(), x.cols());
        let mx = crate::autodiff::gemm(k, l1, n, self.m.data(), x.data());
        let pf = crate::autodiff::gemm(k, l1, n, self.p.data(), f.data());
        Tensor::matrix(k, n, mx.iter().zip(&pf).map(|(a, b)| a - b).collect())
    }
}

pub fn trapezoid_weights(times: &[f64]) -> Vec<f64> {
    let l1 = times.len();
    let mut w = vec![0.0; l1];
    for j in 0..l1 - 1 {
        let h = times[j + 1] - times[j];
        w[j] += 0.5 * h;
        w[j + 1] += 0.5 * h;
    }
    w
}

/// Weak-form residuals (`K×n`) of a vector field on one window of data.
pub fn weak_residuals(f: &dyn VectorField, times: &[f64], states: &[Vec<f64>], basis: &TestBasis) -> Res<Tensor> {
    let n = f.dim();
    if states.iter().any(|s| s.len() != n) || states.len() != times.len() {
        return Err(AdError::Dimension { expected: n, got: states.first().map_or(0, Vec::len) }.into());
    }
    check_uniform(times)?;
    let x = Tensor::from_rows(states);
    let fx = f.eval_rows(&x)?;
    Ok(basis.operator(times)?.residuals(&x, &fx))
}

fn check_uniform(times: &[f64]) -> Res<()> {
    let dt = times[1] - times[0];
    if !(dt > 0.0) || times.windows(2).any(|w| ((w[1] - w[0]) - dt).abs() > 1e-6 * dt.max(1.0)) {
        return Err(LossError::Config("weak form needs uniformly spaced times".into()));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSpec {
    pub batch_size: usize,
    /// Window length `l` in steps; windows hold `l + 1` samples.
    pub steps: usize,
}

impl Default for BatchSpec {
    fn default() -> Self {
        BatchSpec { batch_size: 120, steps: 50 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub traj: usize,
    pub start: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub steps: usize,
    pub windows: Vec<Window>,
}

fn check_lengths(ds: &TrajectoryDataset, steps: usize) -> Res<()> {
    if steps == 0 {
        return Err(LossError::Config("windows need at least one step".into()));
    }
    for (k, tr) in ds.trajectories.iter().enumerate() {
        if tr.len() < steps + 1 {
            return Err(LossError::TooShort { traj: k, len: tr.len(), need: steps + 1 });
        }
    }
    Ok(())
}

/// Draws windows with uniformly random trajectory and start index.
pub fn sample_batch(ds: &TrajectoryDataset, spec: &BatchSpec, rng: &mut impl Rng) -> Res<Batch> {
    check_lengths(ds, spec.steps)?;
    if spec.batch_size == 0 {
        return Err(LossError::Config("batch_size must be positive".into()));
    }
    let m = ds.trajectories.len();
    let windows = (0..spec.batch_size)
        .map(|_| {
            let traj = rng.random_range(0..m);
            let start = rng.random_range(0..=ds.trajectories[traj].len() - spec.steps - 1);
            Window { traj, start }
        })
        .collect();
    Ok(Batch { steps: spec.steps, windows })
}

/// Deterministic windows tiling every trajectory with stride `steps`.
pub fn tiled_batch(ds: &TrajectoryDataset, steps: usize) -> Res<Batch> {
    check_lengths(ds, steps)?;
    let mut windows = Vec::new();
    for (traj, tr) in ds.trajectories.iter().enumerate() {
        let mut start = 0;
        while start + steps < tr.len() {
            windows.push(Window { traj, start });
            start += steps;
        }
    }
    Ok(Batch { steps, windows })
}

/// Number of random batches forming one epoch: `⌈Σ(Tᵢ − l) / batch_size⌉`.
pub fn batches_per_epoch(ds: &TrajectoryDataset, spec: &BatchSpec) -> usize {
    let total: usize = ds.trajectories.iter().map(|t| t.len().saturating_sub(spec.steps)).sum();
    total.div_ceil(spec.batch_size.max(1)).max(1)
}

/// Finite-difference state derivatives: central in the interior and
/// second-order one-sided at both ends. Needs at least three samples.
pub fn estimate_derivatives(times: &[f64], states: &[Vec<f64>]) -> Res<Vec<Vec<f64>>> {
    let t = states.len();
    if t < 3 || times.len() != t {
        return Err(LossError::TooShort { traj: 0, len: t, need: 3 });
    }
    check_uniform(times)?;
    let h = times[1] - times[0];
    let n = states[0].len();
    let mut out = vec![vec![0.0; n]; t];
    for d in 0..n {
        out[0][d] = (-3.0 * states[0][d] + 4.0 * states[1][d] - states[2][d]) / (2.0 * h);
        out[t - 1][d] = (3.0 * states[t - 1][d] - 4.0 * states[t - 2][d] + states[t - 3][d]) / (2.0 * h);
        for i in 1..t - 1 {
            out[i][d] = (states[i + 1][d] - states[i - 1][d]) / (2.0 * h);
        }
    }
    Ok(out)
}

pub fn estimate_dataset_derivatives(ds: &TrajectoryDataset) -> Res<Vec<Vec<Vec<f64>>>> {
    ds.trajectories
        .iter()
        .enumerate()
        .map(|(k, tr)| {
            estimate_derivatives(&tr.times, &tr.states).map_err(|e| match e {
                LossError::TooShort { len, need, .. } => LossError::TooShort { traj: k, len, need },
                e => e,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub kind: LossKind,
    pub basis: TestBasis,
    /// RK4 sub-steps per sample interval for state regression.
    pub substeps: usize,
    /// Weight of the energy-flux prior; it applies only when nominal
    /// rates are supplied.
    pub flux_weight: f64,
    pub curl_weight: f64,
    pub curl_step: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { kind: LossKind::Weak, basis: TestBasis::default(), substeps: 4, flux_weight: 1.0, curl_weight: 0.0, curl_step: 1e-4 }
    }
}

impl LossConfig {
    pub fn new(kind: LossKind) -> Self {
        LossConfig { kind, ..Self::default() }
    }
}

/// Dataset together with quantities precomputed once per training run.
pub struct LossContext<'a> {
    pub ds: &'a TrajectoryDataset,
    pub derivatives: Option<Vec<Vec<Vec<f64>>>>,
    /// Nominal energy rate at every sample of every trajectory.
    pub hdot_nom: Option<Vec<Vec<f64>>>,
    weak: RefCell<WeakCache>,
}

/// Window operator, its Gram matrix `PᵀP` and per-window data terms,
/// memoized across batches drawn from the same dataset.
#[derive(Default)]
struct WeakCache {
    key: Option<(usize, TestBasis)>,
    op: Option<Rc<WindowOperator>>,
    gram: Option<Rc<Tensor>>,
    data: Vec<Vec<Option<Rc<DataTerm>>>>,
}

/// For `D = M·X`: `‖D‖²` and `PᵀD` (`(l+1)×n`).
struct DataTerm {
    norm2: f64,
    projected: Box<[f64]>,
}

impl WeakCache {
    fn prepare(&mut self, ds: &TrajectoryDataset, steps: usize, basis: &TestBasis) -> Res<(Rc<WindowOperator>, Rc<Tensor>)> {
        if self.key != Some((steps, *basis)) {
            let op = basis.operator(&window_times(ds, steps))?;
            let pt = op.p.transpose();
            let l1 = steps + 1;
            self.gram = Some(Rc::new(Tensor::matrix(l1, l1, crate::autodiff::gemm(l1, op.k(), l1, pt.data(), op.p.data()))));
            self.op = Some(Rc::new(op));
            self.data = ds.trajectories.iter().map(|t| vec![None; t.len()]).collect();
            self.key = Some((steps, *basis));
        }
        Ok((self.op.clone().unwrap(), self.gram.clone().unwrap()))
    }

    fn data_term(&mut self, ds: &TrajectoryDataset, op: &WindowOperator, w: Window, steps: usize) -> Rc<DataTerm> {
        let slot = &mut self.data[w.traj][w.start];
        slot.get_or_insert_with(|| {
            let n = ds.n;
            let (k, l1) = (op.k(), steps + 1);
            let mut x = Vec::with_capacity(l1 * n);
            for s in &ds.trajectories[w.traj].states[w.start..=w.start + steps] {
                x.extend_from_slice(s);
            }
            let d = crate::autodiff::gemm(k, l1, n, op.m.data(), &x);
            let pt = op.p.transpose();
            Rc::new(DataTerm {
                norm2: d.iter().map(|v| v * v).sum(),
                projected: crate::autodiff::gemm(l1, k, n, pt.data(), &d).into_boxed_slice(),
            })
        })
        .clone()
    }
}

impl<'a> LossContext<'a> {
    pub fn new(ds: &'a TrajectoryDataset, kind: LossKind) -> Res<Self> {
        let derivatives = if kind == LossKind::Deriv { Some(estimate_dataset_derivatives(ds)?) } else { None };
        Ok(LossContext { ds, derivatives, hdot_nom: None, weak: RefCell::default() })
    }

    pub fn with_nominal_rate(mut self, f: impl Fn(&[f64]) -> f64) -> Self {
        self.hdot_nom = Some(self.ds.trajectories.iter().map(|t| t.states.iter().map(|s| f(s)).collect()).collect());
        self
    }
}

/// Distinct samples covered by a batch and the row of each window sample.
struct Coverage {
    /// `(traj, index)` of each unique state, in first-seen order.
    states: Vec<(usize, usize)>,
    /// Row in `states` of sample `j` of window `b`, laid out `j·B + b`.
    gather: Vec<usize>,
    /// Number of window samples mapped to each unique state.
    counts: Vec<usize>,
}

fn coverage(ds: &TrajectoryDataset, batch: &Batch) -> Coverage {
    let mut slot: Vec<Vec<usize>> = ds.trajectories.iter().map(|t| vec![usize::MAX; t.len()]).collect();
    let mut states = Vec::new();
    let mut counts = Vec::new();
    let b = batch.windows.len();
    let mut gather = vec![0; (batch.steps + 1) * b];
    for j in 0..=batch.steps {
        for (w, win) in batch.windows.iter().enumerate() {
            let idx = win.start + j;
            let s = &mut slot[win.traj][idx];
            if *s == usize::MAX {
                *s = states.len();
                states.push((win.traj, idx));
                counts.push(0);
            }
            counts[*s] += 1;
            gather[j * b + w] = *s;
        }
    }
    Coverage { states, gather, counts }
}

fn state_matrix(ds: &TrajectoryDataset, rows: &[(usize, usize)]) -> Tensor {
    let n = ds.n;
    let mut data = Vec::with_capacity(rows.len() * n);
    for &(t, i) in rows {
        data.extend_from_slice(&ds.trajectories[t].states[i]);
    }
    Tensor::matrix(rows.len(), n, data)
}

fn window_times(ds: &TrajectoryDataset, steps: usize) -> Vec<f64> {
    let dt = ds.dt();
    (0..=steps).map(|j| j as f64 * dt).collect()
}

fn first_bad_window(values: &Tensor, cov: &Coverage, b: usize) -> Option<usize> {
    let n = values.cols();
    let bad: Vec<bool> = (0..values.rows()).map(|r| values.data()[r * n..(r + 1) * n].iter().any(|v| !v.is_finite())).collect();
    cov.gather.iter().position(|&r| bad[r]).map(|p| p % b)
}

/// Mean over windows and test functions of `‖r_k‖²`.
pub fn weak_loss(
    m: &DecompModel,
    vars: &ModelVars,
    tape: &mut Tape,
    ds: &TrajectoryDataset,
    batch: &Batch,
    basis: &TestBasis,
) -> Res<Var> {
    let cov = coverage(ds, batch);
    let x = tape.constant(state_matrix(ds, &cov.states));
    let parts = m.record_parts(vars, tape, x)?;
    weak_from_parts(tape, ds, batch, basis, &cov, &parts, &RefCell::default())
}

fn weak_from_parts(
    tape: &mut Tape,
    ds: &TrajectoryDataset,
    batch: &Batch,
    basis: &TestBasis,
    cov: &Coverage,
    parts: &Parts,
    cache: &RefCell<WeakCache>,
) -> Res<Var> {
    let n = ds.n;
    let b = batch.windows.len();
    let l1 = batch.steps + 1;
    if let Some(w) = first_bad_window(tape.value(parts.field), cov, b) {
        return Err(LossError::NonFinite { window: w });
    }
    // Σ_w ‖D_w − P·F_w‖² expanded as Σ‖D_w‖² − 2Σ⟨PᵀD_w, F_w⟩ + Σ⟨F_w, PᵀP·F_w⟩,
    // with the cross term accumulated onto the unique states.
    let mut cache = cache.borrow_mut();
    let (op, gram) = cache.prepare(ds, batch.steps, basis)?;
    let k = op.k();
    let mut norm2 = 0.0;
    let mut cross = vec![0.0; cov.states.len() * n];
    for (wi, &w) in batch.windows.iter().enumerate() {
        let term = cache.data_term(ds, &op, w, batch.steps);
        norm2 += term.norm2;
        for j in 0..l1 {
            let row = cov.gather[j * b + wi];
            for (c, v) in cross[row * n..(row + 1) * n].iter_mut().zip(&term.projected[j * n..(j + 1) * n]) {
                *c += v;
            }
        }
    }
    let cross = tape.constant(Tensor::matrix(cov.states.len(), n, cross));
    let lin = tape.dot(parts.field, cross)?;
    let f = tape.gather_rows(parts.field, cov.gather.clone().into())?;
    let f = tape.reshape(f, &[l1, b * n])?;
    let g = tape.constant((*gram).clone());
    let gf = tape.matmul(g, f)?;
    let quad = tape.dot(f, gf)?;
    let lin = tape.scale(lin, -2.0)?;
    let s = tape.add(quad, lin)?;
    let c = tape.scalar(norm2);
    let s = tape.add(s, c)?;
    Ok(tape.scale(s, 1.0 / (b * k) as f64)?)
}

/// Mean over window samples of `‖f(xⱼ) − ẋⱼ‖²` against finite-difference
/// derivative estimates.
pub fn derivative_loss(
    m: &DecompModel,
    vars: &ModelVars,
    tape: &mut Tape,
    ctx: &LossContext,
    batch: &Batch,
) -> Res<Var> {
    let cov = coverage(ctx.ds, batch);
    let x = tape.constant(state_matrix(ctx.ds, &cov.states));
    let parts = m.record_parts(vars, tape, x)?;
    derivative_from_parts(tape, ctx, batch, &cov, &parts)
}

fn derivative_from_parts(tape: &mut Tape, ctx: &LossContext, batch: &Batch, cov: &Coverage, parts: &Parts) -> Res<Var> {
    let derivs = ctx.derivatives.as_ref().ok_or_else(|| LossError::Config("derivative estimates missing".into()))?;
    let b = batch.windows.len();
    if let Some(w) = first_bad_window(tape.value(parts.field), cov, b) {
        return Err(LossError::NonFinite { window: w });
    }
    let n = ctx.ds.n;
    let mut target = Vec::with_capacity(cov.states.len() * n);
    for &(t, i) in &cov.states {
        target.extend_from_slice(&derivs[t][i]);
    }
    let total: usize = cov.counts.iter().sum();
    let weights: Vec<f64> = cov.counts.iter().map(|&c| c as f64 / total as f64).collect();
    let target = tape.constant(Tensor::matrix(cov.states.len(), n, target));
    let d = tape.sub(parts.field, target)?;
    let sq = tape.square(d)?;
    let per = tape.row_sums(sq)?;
    let w = tape.constant(Tensor::matrix(cov.states.len(), 1, weights));
    Ok(tape.dot(per, w)?)
}

/// Mean over windows and steps of the squared distance between an RK4
/// rollout from each window's first sample and the window's data.
pub fn state_loss(
    m: &DecompModel,
    vars: &ModelVars,
    tape: &mut Tape,
    ds: &TrajectoryDataset,
    batch: &Batch,
    substeps: usize,
) -> Res<Var> {
    let b = batch.windows.len();
    if batch.steps == 0 {
        return Err(LossError::Config("state regression needs windows of at least one step".into()));
    }
    let ts = window_times(ds, batch.steps);
    let starts: Vec<(usize, usize)> = batch.windows.iter().map(|w| (w.traj, w.start)).collect();
    let x0 = tape.constant(state_matrix(ds, &starts));
    let cfg = IntegrationConfig::rk4(Some(ds.dt() / substeps.max(1) as f64));
    let xs = integrate_diff(m, vars, tape, x0, &ts, &cfg).map_err(|e| match e {
        OdeError::Diverged { .. } => LossError::Ode(e),
        e => e.into(),
    })?;
    let mut terms = Vec::with_capacity(batch.steps);
    for (j, &xj) in xs.iter().enumerate().skip(1) {
        let rows: Vec<(usize, usize)> = batch.windows.iter().map(|w| (w.traj, w.start + j)).collect();
        let target = tape.constant(state_matrix(ds, &rows));
        let d = tape.sub(xj, target)?;
        let sq = tape.square(d)?;
        terms.push(tape.sum(sq)?);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok(tape.scale(total, 1.0 / (b * batch.steps) as f64)?)
}

/// `λ · mean((∇HᵀR∇H − Ḣ_nom)²)` over the rows of `parts`.
pub fn flux_prior_penalty(
    m: &DecompModel,
    tape: &mut Tape,
    parts: &Parts,
    hdot_nom: &[f64],
    weight: f64,
) -> Res<Var> {
    if weight == 0.0 {
        return Ok(tape.scalar(0.0));
    }
    let rate = m.rate_from_parts(tape, parts)?;
    let rows = tape.shape(rate)[0];
    if rows != hdot_nom.len() {
        return Err(LossError::Misaligned { expected: rows, got: hdot_nom.len() });
    }
    let nom = tape.constant(Tensor::matrix(rows, 1, hdot_nom.to_vec()));
    let d = tape.sub(rate, nom)?;
    let sq = tape.square(d)?;
    let mean = tape.mean(sq)?;
    Ok(tape.scale(mean, weight)?)
}

/// Full training objective for one batch: the configured loss plus any
/// active priors.
pub fn objective(
    m: &DecompModel,
    vars: &ModelVars,
    tape: &mut Tape,
    ctx: &LossContext,
    batch: &Batch,
    cfg: &LossConfig,
) -> Res<Var> {
    let ds = ctx.ds;
    let needs_parts = cfg.kind != LossKind::State || (ctx.hdot_nom.is_some() && cfg.flux_weight != 0.0);
    let cov = coverage(ds, batch);
    let mut parts = None;
    if needs_parts {
        let x = tape.constant(state_matrix(ds, &cov.states));
        parts = Some(m.record_parts(vars, tape, x)?);
    }
    let mut loss = match cfg.kind {
        LossKind::Weak => weak_from_parts(tape, ds, batch, &cfg.basis, &cov, parts.as_ref().unwrap(), &ctx.weak)?,
        LossKind::Deriv => derivative_from_parts(tape, ctx, batch, &cov, parts.as_ref().unwrap())?,
        LossKind::State => state_loss(m, vars, tape, ds, batch, cfg.substeps)?,
    };
    if let (Some(nom), Some(p)) = (&ctx.hdot_nom, &parts) {
        if cfg.flux_weight != 0.0 {
            let series: Vec<f64> = cov.states.iter().map(|&(t, i)| nom[t][i]).collect();
            let pen = flux_prior_penalty(m, tape, p, &series, cfg.flux_weight)?;
            loss = tape.add(loss, pen)?;
        }
    }
    if cfg.curl_weight != 0.0 {
        let x = state_matrix(ds, &cov.states);
        let pen = m.curl_penalty(vars, tape, &x, cfg.curl_step)?;
        let pen = tape.scale(pen, cfg.curl_weight)?;
        loss = tape.add(loss, pen)?;
    }
    Ok(loss)
}

/// Numeric value of [`objective`].
pub fn objective_value(m: &DecompModel, ctx: &LossContext, batch: &Batch, cfg: &LossConfig) -> Res<f64> {
    let mut tape = Tape::new();
    let vars = m.bind(&mut tape, false);
    let l = objective(m, &vars, &mut tape, ctx, batch, cfg)?;
    Ok(tape.value(l).item())
}

/// Objective value and its gradient with respect to every parameter, in
/// the order of [`DecompModel::params`].
pub fn objective_and_grad(
    m: &DecompModel,
    ctx: &LossContext,
    batch: &Batch,
    cfg: &LossConfig,
) -> Res<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let vars = m.bind(&mut tape, true);
    let l = objective(m, &vars, &mut tape, ctx, batch, cfg)?;
    let v = tape.value(l).item();
    if !v.is_finite() {
        return Err(LossError::NonFinite { window: 0 });
    }
    let g = tape.grad(l, vars.all())?;
    Ok((v, g))
}

#[cfg(test)]
mod tests;
