//! Adam with coupled L2 weight decay, the minibatch training loop,
//! validation-based selection among ensemble members, and checkpoints.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{AdError, Tensor};
use crate::decomp::{DecompError, DecompModel, KnownEnergy, ModelKind};
use crate::losses::{
    batches_per_epoch, objective_and_grad, objective_value, sample_batch, tiled_batch, Batch, BatchSpec, LossConfig,
    LossContext, LossError, LossKind,
};
use crate::systems::TrajectoryDataset;

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("parameter {index}: shape {param:?} does not match gradient {grad:?}")]
    ShapeMismatch { index: usize, param: Vec<usize>, grad: Vec<usize> },
    #[error("{0} parameters but {1} gradients")]
    Count(usize, usize),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] DecompError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("every ensemble member diverged: {0}")]
    AllDiverged(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("checkpoint format: {0}")]
    Format(String),
}

impl From<AdError> for TrainError {
    fn from(e: AdError) -> Self {
        TrainError::Model(e.into())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, weight_decay: 1e-4, betas: (0.9, 0.999), eps: 1e-8 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

/// One Adam update with bias correction; `grad + wd·θ` feeds the moments.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[Tensor], state: &mut AdamState, cfg: &AdamConfig) -> Result<(), TrainError> {
    if params.len() != grads.len() {
        return Err(TrainError::Count(params.len(), grads.len()));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(TrainError::ShapeMismatch { index: i, param: p.shape().to_vec(), grad: g.shape().to_vec() });
        }
    }
    if state.m.is_empty() {
        state.m = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
        state.v = state.m.clone();
    } else if state.m.len() != grads.len() {
        return Err(TrainError::Count(state.m.len(), grads.len()));
    }
    state.step += 1;
    let (b1, b2) = cfg.betas;
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let th = p.data_mut();
        for k in 0..th.len() {
            let gk = g[k] + cfg.weight_decay * th[k];
            m[k] = b1 * m[k] + (1.0 - b1) * gk;
            v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
            th[k] -= cfg.lr * (m[k] / c1) / ((v[k] / c2).sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Architecture of the models an ensemble is drawn from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub hidden: Vec<usize>,
    /// Energy for the known-H variant.
    #[serde(default)]
    pub known: Option<KnownEnergy>,
}

impl ModelSpec {
    pub fn new(kind: ModelKind, hidden: &[usize]) -> Self {
        ModelSpec { kind, hidden: hidden.to_vec(), known: None }
    }

    pub fn build(&self, n: usize, rng: &mut impl Rng) -> Result<DecompModel, TrainError> {
        if self.kind == ModelKind::KnownH {
            let e = self.known.clone().ok_or_else(|| TrainError::Config("known-h needs a known energy".into()))?;
            if e.dim() != n {
                return Err(TrainError::Config(format!("known energy has dimension {}, data has {n}", e.dim())));
            }
            return Ok(DecompModel::known_h(e, &self.hidden, rng));
        }
        Ok(DecompModel::new(self.kind, n, &self.hidden, rng)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub epochs: usize,
    pub batch: BatchSpec,
    pub loss: LossConfig,
    pub ensemble_count: usize,
    pub seed: u64,
    /// States probed for `Ḣ < 0` at each validation pass of globally
    /// stable models.
    pub stability_probes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adam: AdamConfig::default(),
            epochs: 300,
            batch: BatchSpec::default(),
            loss: LossConfig::default(),
            ensemble_count: 3,
            seed: 0,
            stability_probes: 64,
        }
    }
}

impl TrainConfig {
    pub fn for_loss(kind: LossKind) -> Self {
        let steps = if kind == LossKind::State { 10 } else { 50 };
        TrainConfig { batch: BatchSpec { steps, ..BatchSpec::default() }, loss: LossConfig::new(kind), ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if !(self.adam.lr > 0.0) {
            return bad("lr must be positive");
        }
        if self.ensemble_count == 0 {
            return bad("ensemble_count must be at least 1");
        }
        if self.batch.batch_size == 0 || self.batch.steps == 0 {
            return bad("batch size and batch steps must be positive");
        }
        if !(self.adam.weight_decay >= 0.0) || !(self.adam.eps > 0.0) {
            return bad("weight_decay must be nonnegative and eps positive");
        }
        let (b1, b2) = self.adam.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return bad("betas must lie in [0, 1)");
        }
        if self.loss.basis.k < 2 || !(self.loss.basis.gamma > 0.0) {
            return bad("test basis needs K ≥ 2 and a positive shape");
        }
        if self.loss.substeps == 0 {
            return bad("state regression needs at least one sub-step");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Seconds since the member started training.
    pub wall_time: f64,
    /// Probed states with `Ḣ ≥ 0`; always zero for globally stable models.
    pub stability_violations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub seed: u64,
    pub member: usize,
    pub epochs: usize,
    pub loss: LossKind,
    pub system: String,
    pub final_train_loss: Option<f64>,
    pub final_val_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub model_kind: ModelKind,
    pub hidden: Vec<usize>,
    pub param_count: usize,
    pub model: DecompModel,
    pub meta: TrainMeta,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, TrainError> {
        let c: Checkpoint = serde_json::from_str(s).map_err(|e| TrainError::Format(e.to_string()))?;
        if c.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(TrainError::Format(format!("unsupported schema_version {}", c.schema_version)));
        }
        if c.model.param_count() != c.param_count || c.model.kind != c.model_kind {
            return Err(TrainError::Format("model does not match its header".into()));
        }
        Ok(c)
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        std::fs::write(path, self.to_json()).map_err(|source| TrainError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let s = std::fs::read_to_string(path).map_err(|source| TrainError::Io { path: path.display().to_string(), source })?;
        Self::from_json(&s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemberResult {
    pub member: usize,
    pub model: DecompModel,
    pub history: Vec<EpochRecord>,
    pub initial_val_loss: f64,
    /// Why the member stopped early, if it did.
    pub failure: Option<String>,
    pub train_time: f64,
}

impl MemberResult {
    pub fn final_val_loss(&self) -> f64 {
        self.history.last().map_or(self.initial_val_loss, |r| r.val_loss)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub selected: usize,
    pub members: Vec<MemberResult>,
}

impl TrainOutcome {
    pub fn history(&self) -> &[EpochRecord] {
        &self.members[self.selected].history
    }

    pub fn train_time(&self) -> f64 {
        self.members.iter().map(|m| m.train_time).sum()
    }

    /// `epoch,train_loss,val_loss,wall_time` for the selected member.
    pub fn history_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,wall_time\n");
        for r in self.history() {
            s.push_str(&format!("{},{:e},{:e},{:.6}\n", r.epoch, r.train_loss, r.val_loss, r.wall_time));
        }
        s
    }
}

fn member_rng(seed: u64, member: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(member as u64 + 1);
    r
}

/// Validation windows: `steps` clipped to the shortest validation trajectory.
pub fn validation_batch(val: &TrajectoryDataset, steps: usize) -> Result<Batch, TrainError> {
    let shortest = val.trajectories.iter().map(|t| t.len()).min().unwrap_or(0);
    if shortest < 3 {
        return Err(TrainError::Config("validation trajectories need at least 3 samples".into()));
    }
    Ok(tiled_batch(val, steps.min(shortest - 1))?)
}

fn contexts<'a>(
    ds: &'a TrajectoryDataset,
    val: &'a TrajectoryDataset,
    cfg: &TrainConfig,
    nominal: Option<&(dyn Fn(&[f64]) -> f64 + Sync)>,
) -> Result<(LossContext<'a>, LossContext<'a>), TrainError> {
    let mut c = LossContext::new(ds, cfg.loss.kind)?;
    let mut v = LossContext::new(val, cfg.loss.kind)?;
    if let Some(f) = nominal {
        c = c.with_nominal_rate(f);
        v = v.with_nominal_rate(f);
    }
    Ok((c, v))
}

fn stability_violations(m: &DecompModel, ds: &TrajectoryDataset, probes: usize, rng: &mut ChaCha8Rng) -> usize {
    if m.kind != ModelKind::GhnnGlobalStable || probes == 0 {
        return 0;
    }
    let mut lo = vec![f64::INFINITY; ds.n];
    let mut hi = vec![f64::NEG_INFINITY; ds.n];
    for s in ds.trajectories.iter().flat_map(|t| &t.states) {
        for d in 0..ds.n {
            lo[d] = lo[d].min(s[d]);
            hi[d] = hi[d].max(s[d]);
        }
    }
    let data: Vec<f64> = (0..probes)
        .flat_map(|_| (0..ds.n).map(|d| 2.0 * lo[d] - hi[d] + 3.0 * (hi[d] - lo[d]) * rng.random::<f64>()).collect::<Vec<_>>())
        .collect();
    match m.energy_rate_batch(&Tensor::matrix(probes, ds.n, data)) {
        Ok(r) => r.iter().filter(|v| !(**v < 0.0)).count(),
        Err(_) => probes,
    }
}

/// Trains one model in place. Steps whose loss or gradient is non-finite
/// stop the member and are reported through [`MemberResult::failure`].
pub fn train_member(
    model: DecompModel,
    member: usize,
    ctx: &LossContext,
    val_ctx: &LossContext,
    cfg: &TrainConfig,
) -> Result<MemberResult, TrainError> {
    cfg.validate()?;
    let mut rng = member_rng(cfg.seed, member);
    let mut probe_rng = member_rng(cfg.seed ^ 0x5eed, member);
    train_member_with(model, member, ctx, val_ctx, cfg, &mut rng, &mut probe_rng)
}

fn train_member_with(
    mut model: DecompModel,
    member: usize,
    ctx: &LossContext,
    val_ctx: &LossContext,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    probe_rng: &mut ChaCha8Rng,
) -> Result<MemberResult, TrainError> {
    let start = Instant::now();
    let val_batch = validation_batch(val_ctx.ds, cfg.batch.steps)?;
    let initial_val_loss = objective_value(&model, val_ctx, &val_batch, &cfg.loss).unwrap_or(f64::NAN);
    let per_epoch = batches_per_epoch(ctx.ds, &cfg.batch);
    let mut adam = AdamState::default();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut failure = None;
    'epochs: for epoch in 1..=cfg.epochs {
        let mut total = 0.0;
        for _ in 0..per_epoch {
            let batch = sample_batch(ctx.ds, &cfg.batch, rng)?;
            let (loss, grads) = match objective_and_grad(&model, ctx, &batch, &cfg.loss) {
                Ok(v) => v,
                Err(e @ (LossError::NonFinite { .. } | LossError::Ode(_))) => {
                    failure = Some(format!("epoch {epoch}: {e}"));
                    break 'epochs;
                }
                Err(e) => return Err(e.into()),
            };
            if grads.iter().any(|g| !g.is_finite()) {
                failure = Some(format!("epoch {epoch}: non-finite gradient"));
                break 'epochs;
            }
            adam_step(&mut model.params_mut(), &grads, &mut adam, &cfg.adam)?;
            total += loss;
        }
        let val_loss = match objective_value(&model, val_ctx, &val_batch, &cfg.loss) {
            Ok(v) if v.is_finite() => v,
            Ok(_) | Err(LossError::NonFinite { .. } | LossError::Ode(_)) => {
                failure = Some(format!("epoch {epoch}: non-finite validation loss"));
                break;
            }
            Err(e) => return Err(e.into()),
        };
        history.push(EpochRecord {
            epoch,
            train_loss: total / per_epoch as f64,
            val_loss,
            wall_time: start.elapsed().as_secs_f64(),
            stability_violations: stability_violations(&model, ctx.ds, cfg.stability_probes, probe_rng),
        });
    }
    Ok(MemberResult { member, model, history, initial_val_loss, failure, train_time: start.elapsed().as_secs_f64() })
}

/// Trains `cfg.ensemble_count` independently initialized members in
/// parallel and keeps the one with the lowest final validation loss.
/// `nominal` supplies `Ḣ_nom(x)` for the flux prior.
pub fn train(
    spec: &ModelSpec,
    ds: &TrajectoryDataset,
    val: &TrajectoryDataset,
    cfg: &TrainConfig,
    nominal: Option<&(dyn Fn(&[f64]) -> f64 + Sync)>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if ds.n != val.n || ds.system != val.system {
        return Err(TrainError::Config(format!(
            "validation data ({}, n = {}) does not match training data ({}, n = {})",
            val.system, val.n, ds.system, ds.n
        )));
    }
    spec.build(ds.n, &mut member_rng(cfg.seed, 0))?;
    let members: Vec<MemberResult> = (0..cfg.ensemble_count)
        .into_par_iter()
        .map(|k| {
            let mut rng = member_rng(cfg.seed, k);
            let mut probe_rng = member_rng(cfg.seed ^ 0x5eed, k);
            let model = spec.build(ds.n, &mut rng)?;
            let (c, v) = contexts(ds, val, cfg, nominal)?;
            train_member_with(model, k, &c, &v, cfg, &mut rng, &mut probe_rng)
        })
        .collect::<Result<_, _>>()?;
    let selected = members
        .iter()
        .filter(|m| m.failure.is_none() && m.final_val_loss().is_finite())
        .min_by(|a, b| a.final_val_loss().total_cmp(&b.final_val_loss()))
        .or_else(|| members.iter().filter(|m| m.final_val_loss().is_finite()).min_by(|a, b| a.final_val_loss().total_cmp(&b.final_val_loss())))
        .map(|m| m.member)
        .ok_or_else(|| TrainError::AllDiverged(members.iter().filter_map(|m| m.failure.clone()).collect::<Vec<_>>().join("; ")))?;
    let m = &members[selected];
    let best = Checkpoint {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        model_kind: m.model.kind,
        hidden: spec.hidden.clone(),
        param_count: m.model.param_count(),
        model: m.model.clone(),
        meta: TrainMeta {
            seed: cfg.seed,
            member: selected,
            epochs: m.history.len(),
            loss: cfg.loss.kind,
            system: ds.system.clone(),
            final_train_loss: m.history.last().map(|r| r.train_loss),
            final_val_loss: m.final_val_loss(),
        },
    };
    Ok(TrainOutcome { best, selected, members })
}
