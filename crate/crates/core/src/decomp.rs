//! Generalized Hamiltonian vector fields `f(x) = (J(x) + R(x))∇H(x)`.
//!
//! Every model is evaluated on batches of states laid out as rows. The
//! `record_*` methods put the computation on a caller-owned tape so losses
//! can differentiate through `∇H` and `∇²N_v∇H` with respect to the
//! parameters; the plain methods are numeric conveniences built on them.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{hvp_on_tape, input_gradient, AdError, Tape, Tensor, Var};
use crate::fields::{ConcaveField, ConcaveVars, HParam, HVariant, Mlp, MlpVars};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecompError {
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error("{op} is not available for {kind} models")]
    Unsupported { op: &'static str, kind: ModelKind },
    #[error("invalid model configuration: {0}")]
    Config(String),
}

type Res<T> = Result<T, DecompError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    #[serde(rename = "ghnn-global")]
    GhnnGlobalStable,
    #[serde(rename = "ghnn-local")]
    GhnnLocalStable,
    GhnnConserved,
    #[serde(rename = "ghnn-flux")]
    GhnnFluxPrior,
    KnownH,
    Fcnn,
    Hnn,
}

impl ModelKind {
    pub const ALL: [ModelKind; 7] = [
        ModelKind::GhnnGlobalStable,
        ModelKind::GhnnLocalStable,
        ModelKind::GhnnConserved,
        ModelKind::GhnnFluxPrior,
        ModelKind::KnownH,
        ModelKind::Fcnn,
        ModelKind::Hnn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::GhnnGlobalStable => "ghnn-global",
            ModelKind::GhnnLocalStable => "ghnn-local",
            ModelKind::GhnnConserved => "ghnn-conserved",
            ModelKind::GhnnFluxPrior => "ghnn-flux",
            ModelKind::KnownH => "known-h",
            ModelKind::Fcnn => "fcnn",
            ModelKind::Hnn => "hnn",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown model '{s}'"))
    }
}

/// Closed-form energies used as known `H` or analytic oracles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum KnownEnergy {
    /// `½‖x‖²`
    Quadratic { n: usize },
    /// `g(1 − cos x₁) + x₂²/2`
    Pendulum { g: f64 },
    /// `x₁⁴/4 − x₁²/2 + x₂²/2`
    Duffing,
    /// `−(ρ/σ)x₁²/2 + (x₂² + x₃²)/2`
    Lorenz { sigma: f64, rho: f64 },
    /// Planar gravitational energy of unit masses, state `[positions, velocities]`.
    NBody { particles: usize },
}

impl KnownEnergy {
    pub fn dim(&self) -> usize {
        match self {
            KnownEnergy::Quadratic { n } => *n,
            KnownEnergy::Pendulum { .. } | KnownEnergy::Duffing => 2,
            KnownEnergy::Lorenz { .. } => 3,
            KnownEnergy::NBody { particles } => 4 * particles,
        }
    }

    pub fn record(&self, tape: &mut Tape, x: Var) -> Result<Var, AdError> {
        let col = |tape: &mut Tape, i: usize| tape.slice(x, i, 1);
        match *self {
            KnownEnergy::Quadratic { .. } => {
                let s = tape.square(x)?;
                let r = tape.row_sums(s)?;
                tape.scale(r, 0.5)
            }
            KnownEnergy::Pendulum { g } => {
                let q = col(tape, 0)?;
                let p = col(tape, 1)?;
                let c = tape.cos(q)?;
                let c = tape.scale(c, -g)?;
                let gv = tape.scalar(g);
                let pot = tape.add(c, gv)?;
                let p2 = tape.square(p)?;
                let kin = tape.scale(p2, 0.5)?;
                tape.add(pot, kin)
            }
            KnownEnergy::Duffing => {
                let q = col(tape, 0)?;
                let p = col(tape, 1)?;
                let q2 = tape.square(q)?;
                let q4 = tape.square(q2)?;
                let a = tape.scale(q4, 0.25)?;
                let b = tape.scale(q2, -0.5)?;
                let p2 = tape.square(p)?;
                let c = tape.scale(p2, 0.5)?;
                let ab = tape.add(a, b)?;
                tape.add(ab, c)
            }
            KnownEnergy::Lorenz { sigma, rho } => {
                let x1 = col(tape, 0)?;
                let rest = tape.slice(x, 1, 2)?;
                let a = tape.square(x1)?;
                let a = tape.scale(a, -0.5 * rho / sigma)?;
                let b = tape.square(rest)?;
                let b = tape.row_sums(b)?;
                let b = tape.scale(b, 0.5)?;
                tape.add(a, b)
            }
            KnownEnergy::NBody { particles } => {
                let np = particles;
                let pos = tape.slice(x, 0, 2 * np)?;
                let vel = tape.slice(x, 2 * np, 2 * np)?;
                let pairs = np * (np - 1) / 2;
                let mut diff = vec![0.0; 2 * np * 2 * pairs];
                let mut fold = vec![0.0; 2 * pairs * pairs];
                let mut p = 0;
                for i in 0..np {
                    for j in i + 1..np {
                        for d in 0..2 {
                            diff[(2 * j + d) * 2 * pairs + 2 * p + d] = 1.0;
                            diff[(2 * i + d) * 2 * pairs + 2 * p + d] = -1.0;
                            fold[(2 * p + d) * pairs + p] = 1.0;
                        }
                        p += 1;
                    }
                }
                let dm = tape.constant(Tensor::matrix(2 * np, 2 * pairs, diff));
                let fm = tape.constant(Tensor::matrix(2 * pairs, pairs, fold));
                let d = tape.matmul(pos, dm)?;
                let d2 = tape.square(d)?;
                let r2 = tape.matmul(d2, fm)?;
                let inv = tape.powf(r2, -0.5)?;
                let pot = tape.row_sums(inv)?;
                let pot = tape.neg(pot)?;
                let v2 = tape.square(vel)?;
                let kin = tape.row_sums(v2)?;
                let kin = tape.scale(kin, 0.5)?;
                tape.add(pot, kin)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "kebab-case")]
pub enum Energy {
    Learned(HParam),
    Known(KnownEnergy),
}

/// One strict-upper-triangle entry of a learned skew matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SkewEntry {
    /// A learnable constant (the only admissible entry when n = 2).
    Constant(Tensor),
    /// `g_ij(x∖{xᵢ,xⱼ})`
    Net(Mlp),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum JParam {
    LearnedSkew { pairs: Vec<(usize, usize)>, entries: Vec<SkewEntry> },
    CanonicalSymplectic,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "kebab-case")]
pub enum RParam {
    /// `R∇H := ∇N_D`
    GradPotential(Mlp),
    /// `R∇H := ∇²N_v ∇H` with `N_v` concave.
    ConcaveHvp(ConcaveField),
    Zero,
    /// `J` and `R` are the skew and symmetric parts of `W`.
    FromW,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "kebab-case")]
pub enum WParam {
    /// Network with `n²` outputs read row-major as an `n×n` matrix.
    Net(Mlp),
    Constant(Tensor),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompModel {
    pub kind: ModelKind,
    pub n: usize,
    pub energy: Option<Energy>,
    pub j: JParam,
    pub r: RParam,
    pub w: Option<WParam>,
    pub net: Option<Mlp>,
}

#[derive(Clone, Debug)]
enum SkewVars {
    Constant(Var),
    Net(MlpVars),
}

#[derive(Clone, Debug)]
enum RVars {
    Grad(MlpVars),
    Concave(ConcaveVars),
    None,
}

/// Model parameters bound onto a particular tape.
#[derive(Clone, Debug)]
pub struct ModelVars {
    h: Option<MlpVars>,
    skew: Vec<SkewVars>,
    r: RVars,
    w: Option<MlpVars>,
    w_const: Option<Var>,
    net: Option<MlpVars>,
    all: Vec<Var>,
}

impl ModelVars {
    /// All bound parameters, in the order of [`DecompModel::params`].
    pub fn all(&self) -> &[Var] {
        &self.all
    }
}

/// Recorded quantities for one batch.
#[derive(Clone, Copy, Debug)]
pub struct Parts {
    pub grad_h: Option<Var>,
    pub j_grad_h: Option<Var>,
    pub r_grad_h: Option<Var>,
    pub field: Var,
}

fn widths(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut w = vec![input];
    w.extend_from_slice(hidden);
    w.push(output);
    w
}

fn learned_skew(n: usize, hidden: &[usize], rng: &mut impl Rng) -> JParam {
    let mut pairs = Vec::new();
    let mut entries = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            pairs.push((i, j));
            entries.push(if n == 2 {
                SkewEntry::Constant(Tensor::matrix(1, 1, vec![rng.random_range(-1.0..1.0)]))
            } else {
                SkewEntry::Net(Mlp::new(&widths(n - 2, hidden, 1), rng))
            });
        }
    }
    JParam::LearnedSkew { pairs, entries }
}

/// Constant matrices that turn `W` stored as `B×n²` into `W∇H` or `Wᵀ∇H`.
fn w_selectors(n: usize, transpose: bool) -> (Tensor, Tensor) {
    let nn = n * n;
    let mut tile = vec![0.0; n * nn];
    let mut fold = vec![0.0; nn * n];
    for i in 0..n {
        for j in 0..n {
            let k = if transpose { j * n + i } else { i * n + j };
            tile[j * nn + k] = 1.0;
            fold[k * n + i] = 1.0;
        }
    }
    (Tensor::matrix(n, nn, tile), Tensor::matrix(nn, n, fold))
}

fn canonical_transpose(n: usize) -> Tensor {
    let h = n / 2;
    let mut m = vec![0.0; n * n];
    // J = [[0, I], [−I, 0]] and the row layout needs Jᵀ.
    for i in 0..h {
        m[(h + i) * n + i] = 1.0;
        m[i * n + h + i] = -1.0;
    }
    Tensor::matrix(n, n, m)
}

impl DecompModel {
    /// Builds a randomly initialized model of the given kind. `hidden` is
    /// shared by every internal network.
    pub fn new(kind: ModelKind, n: usize, hidden: &[usize], rng: &mut impl Rng) -> Res<Self> {
        if n < 2 && kind != ModelKind::Fcnn {
            return Err(DecompError::Config(format!("{kind} needs n ≥ 2, got {n}")));
        }
        let h = |v: HVariant, rng: &mut _| Some(Energy::Learned(HParam::new(v, n, hidden, rng)));
        let base = DecompModel {
            kind,
            n,
            energy: None,
            j: JParam::None,
            r: RParam::Zero,
            w: None,
            net: None,
        };
        Ok(match kind {
            ModelKind::GhnnGlobalStable | ModelKind::GhnnLocalStable => {
                let v = if kind == ModelKind::GhnnGlobalStable {
                    HVariant::GlobalStable
                } else {
                    HVariant::LocalStable
                };
                let energy = h(v, rng);
                let j = learned_skew(n, hidden, rng);
                let r = RParam::ConcaveHvp(ConcaveField::new(n, hidden, rng));
                DecompModel { energy, j, r, ..base }
            }
            ModelKind::GhnnConserved => {
                let energy = h(HVariant::Plain, rng);
                DecompModel { energy, j: learned_skew(n, hidden, rng), ..base }
            }
            ModelKind::GhnnFluxPrior => {
                let energy = h(HVariant::Plain, rng);
                let j = learned_skew(n, hidden, rng);
                let r = RParam::GradPotential(Mlp::new(&widths(n, hidden, 1), rng));
                DecompModel { energy, j, r, ..base }
            }
            ModelKind::Hnn => {
                if n % 2 != 0 {
                    return Err(DecompError::Config(format!("hnn needs an even state dimension, got {n}")));
                }
                DecompModel { energy: h(HVariant::Plain, rng), j: JParam::CanonicalSymplectic, ..base }
            }
            ModelKind::Fcnn => DecompModel { net: Some(Mlp::new(&widths(n, hidden, n), rng)), ..base },
            ModelKind::KnownH => {
                return Err(DecompError::Config("known-h models need an energy; use DecompModel::known_h".into()))
            }
        })
    }

    /// `f = W(x)∇H(x)` with a known energy and a learned `W`.
    pub fn known_h(energy: KnownEnergy, hidden: &[usize], rng: &mut impl Rng) -> Self {
        let n = energy.dim();
        DecompModel {
            kind: ModelKind::KnownH,
            n,
            energy: Some(Energy::Known(energy)),
            j: JParam::None,
            r: RParam::FromW,
            w: Some(WParam::Net(Mlp::new(&widths(n, hidden, n * n), rng))),
            net: None,
        }
    }

    /// `f = W∇H` with a fixed matrix `W = J + R`.
    pub fn known_h_constant(energy: KnownEnergy, w: Tensor) -> Res<Self> {
        let n = energy.dim();
        if w.shape() != [n, n] {
            return Err(DecompError::Config(format!("W must be {n}×{n}")));
        }
        Ok(DecompModel {
            kind: ModelKind::KnownH,
            n,
            energy: Some(Energy::Known(energy)),
            j: JParam::None,
            r: RParam::FromW,
            w: Some(WParam::Constant(w)),
            net: None,
        })
    }

    pub fn hparam(&self) -> Option<&HParam> {
        match &self.energy {
            Some(Energy::Learned(h)) => Some(h),
            _ => None,
        }
    }

    pub fn hparam_mut(&mut self) -> Option<&mut HParam> {
        match &mut self.energy {
            Some(Energy::Learned(h)) => Some(h),
            _ => None,
        }
    }

    pub fn has_energy(&self) -> bool {
        self.energy.is_some()
    }

    /// Trainable tensors in binding order.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        if let Some(Energy::Learned(h)) = &self.energy {
            out.extend(h.net.params());
        }
        if let JParam::LearnedSkew { entries, .. } = &self.j {
            for e in entries {
                match e {
                    SkewEntry::Constant(c) => out.push(c),
                    SkewEntry::Net(m) => out.extend(m.params()),
                }
            }
        }
        match &self.r {
            RParam::GradPotential(m) => out.extend(m.params()),
            RParam::ConcaveHvp(c) => out.extend(c.params()),
            RParam::Zero | RParam::FromW => {}
        }
        if let Some(WParam::Net(m)) = &self.w {
            out.extend(m.params());
        }
        if let Some(m) = &self.net {
            out.extend(m.params());
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        if let Some(Energy::Learned(h)) = &mut self.energy {
            out.extend(h.net.params_mut());
        }
        if let JParam::LearnedSkew { entries, .. } = &mut self.j {
            for e in entries {
                match e {
                    SkewEntry::Constant(c) => out.push(c),
                    SkewEntry::Net(m) => out.extend(m.params_mut()),
                }
            }
        }
        match &mut self.r {
            RParam::GradPotential(m) => out.extend(m.params_mut()),
            RParam::ConcaveHvp(c) => out.extend(c.params_mut()),
            RParam::Zero | RParam::FromW => {}
        }
        if let Some(WParam::Net(m)) = &mut self.w {
            out.extend(m.params_mut());
        }
        if let Some(m) = &mut self.net {
            out.extend(m.params_mut());
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    /// Puts the parameters on `tape`, as leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ModelVars {
        let put = |tape: &mut Tape, t: &Tensor| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
        let mut all = Vec::new();
        let h = self.hparam().map(|h| {
            let v = h.net.bind(tape, trainable);
            all.extend(v.all());
            v
        });
        let mut skew = Vec::new();
        if let JParam::LearnedSkew { entries, .. } = &self.j {
            for e in entries {
                skew.push(match e {
                    SkewEntry::Constant(c) => {
                        let v = put(tape, c);
                        all.push(v);
                        SkewVars::Constant(v)
                    }
                    SkewEntry::Net(m) => {
                        let v = m.bind(tape, trainable);
                        all.extend(v.all());
                        SkewVars::Net(v)
                    }
                });
            }
        }
        let r = match &self.r {
            RParam::GradPotential(m) => {
                let v = m.bind(tape, trainable);
                all.extend(v.all());
                RVars::Grad(v)
            }
            RParam::ConcaveHvp(c) => {
                let v = c.bind(tape, trainable);
                all.extend(v.all());
                RVars::Concave(v)
            }
            RParam::Zero | RParam::FromW => RVars::None,
        };
        let (w, w_const) = match &self.w {
            Some(WParam::Net(m)) => {
                let v = m.bind(tape, trainable);
                all.extend(v.all());
                (Some(v), None)
            }
            Some(WParam::Constant(t)) => (None, Some(tape.constant(t.transpose()))),
            None => (None, None),
        };
        let net = self.net.as_ref().map(|m| {
            let v = m.bind(tape, trainable);
            all.extend(v.all());
            v
        });
        ModelVars { h, skew, r, w, w_const, net, all }
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Res<usize> {
        let s = tape.shape(x);
        if s.len() != 2 || s[1] != self.n {
            return Err(AdError::Dimension { expected: self.n, got: *s.last().unwrap_or(&0) }.into());
        }
        Ok(s[0])
    }

    /// `H` for each row of `x`, as a column.
    pub fn record_energy(&self, vars: &ModelVars, tape: &mut Tape, x: Var) -> Res<Var> {
        self.check_input(tape, x)?;
        match &self.energy {
            Some(Energy::Learned(h)) => Ok(h.forward(vars.h.as_ref().unwrap(), tape, x)?),
            Some(Energy::Known(k)) => Ok(k.record(tape, x)?),
            None => Err(DecompError::Unsupported { op: "energy", kind: self.kind }),
        }
    }

    pub fn record_grad_h(&self, vars: &ModelVars, tape: &mut Tape, x: Var) -> Res<Var> {
        let h = self.record_energy(vars, tape, x)?;
        Ok(input_gradient(tape, h, x)?)
    }

    fn record_j(&self, vars: &ModelVars, tape: &mut Tape, x: Var, gh: Var) -> Res<Option<Var>> {
        let n = self.n;
        let b = tape.shape(x)[0];
        match &self.j {
            JParam::None => Ok(None),
            JParam::CanonicalSymplectic => {
                let jt = tape.constant(canonical_transpose(n));
                Ok(Some(tape.matmul(gh, jt)?))
            }
            JParam::LearnedSkew { pairs, entries } => {
                let np = pairs.len();
                let mut cols = Vec::with_capacity(np);
                let mut ones = None;
                for ((&(i, j), e), sv) in pairs.iter().zip(entries).zip(&vars.skew) {
                    let g = match (e, sv) {
                        (SkewEntry::Constant(_), SkewVars::Constant(c)) => {
                            let o = *ones.get_or_insert_with(|| tape.constant(Tensor::filled(&[b, 1], 1.0)));
                            tape.matmul(o, *c)?
                        }
                        (SkewEntry::Net(m), SkewVars::Net(mv)) => {
                            let mut sel = vec![0.0; n * (n - 2)];
                            for (c, d) in (0..n).filter(|&d| d != i && d != j).enumerate() {
                                sel[d * (n - 2) + c] = 1.0;
                            }
                            let s = tape.constant(Tensor::matrix(n, n - 2, sel));
                            let xr = tape.matmul(x, s)?;
                            m.forward(mv, tape, xr)?
                        }
                        _ => unreachable!("skew vars bound from a different model"),
                    };
                    cols.push(g);
                }
                let g = tape.concat(&cols)?;
                let mut si = vec![0.0; n * np];
                let mut sj = vec![0.0; n * np];
                let mut ei = vec![0.0; np * n];
                let mut ej = vec![0.0; np * n];
                for (p, &(i, j)) in pairs.iter().enumerate() {
                    si[i * np + p] = 1.0;
                    sj[j * np + p] = 1.0;
                    ei[p * n + i] = 1.0;
                    ej[p * n + j] = 1.0;
                }
                let si = tape.constant(Tensor::matrix(n, np, si));
                let sj = tape.constant(Tensor::matrix(n, np, sj));
                let ei = tape.constant(Tensor::matrix(np, n, ei));
                let ej = tape.constant(Tensor::matrix(np, n, ej));
                // (J∇H)ᵢ += gᵢⱼ ∂ⱼH and (J∇H)ⱼ −= gᵢⱼ ∂ᵢH
                let dj = tape.matmul(gh, sj)?;
                let di = tape.matmul(gh, si)?;
                let a = tape.mul(g, dj)?;
                let a = tape.matmul(a, ei)?;
                let c = tape.mul(g, di)?;
                let c = tape.matmul(c, ej)?;
                Ok(Some(tape.sub(a, c)?))
            }
        }
    }

    fn record_w_products(&self, vars: &ModelVars, tape: &mut Tape, x: Var, gh: Var) -> Res<(Var, Var)> {
        if let Some(wt) = vars.w_const {
            let w = tape.transpose(wt)?;
            let wg = tape.matmul(gh, wt)?;
            let wtg = tape.matmul(gh, w)?;
            return Ok((wg, wtg));
        }
        let n = self.n;
        let Some(WParam::Net(m)) = &self.w else {
            return Err(DecompError::Config("known-h model without W".into()));
        };
        let w = m.forward(vars.w.as_ref().unwrap(), tape, x)?;
        let mut out = [None, None];
        for (slot, transpose) in out.iter_mut().zip([false, true]) {
            let (tile, fold) = w_selectors(n, transpose);
            let tile = tape.constant(tile);
            let fold = tape.constant(fold);
            let g = tape.matmul(gh, tile)?;
            let p = tape.mul(w, g)?;
            *slot = Some(tape.matmul(p, fold)?);
        }
        Ok((out[0].unwrap(), out[1].unwrap()))
    }

    fn record_r(&self, vars: &ModelVars, tape: &mut Tape, x: Var, gh: Var) -> Res<Option<Var>> {
        match (&self.r, &vars.r) {
            (RParam::GradPotential(m), RVars::Grad(mv)) => {
                let d = m.forward(mv, tape, x)?;
                Ok(Some(input_gradient(tape, d, x)?))
            }
            (RParam::ConcaveHvp(c), RVars::Concave(cv)) => {
                let v = c.forward(cv, tape, x)?;
                let gv = input_gradient(tape, v, x)?;
                Ok(Some(hvp_on_tape(tape, x, gv, gh)?))
            }
            _ => Ok(None),
        }
    }

    /// Records `∇H`, `J∇H`, `R∇H` (where defined) and the vector field.
    pub fn record_parts(&self, vars: &ModelVars, tape: &mut Tape, x: Var) -> Res<Parts> {
        self.check_input(tape, x)?;
        if self.kind == ModelKind::Fcnn {
            let net = self.net.as_ref().expect("fcnn without net");
            let field = net.forward(vars.net.as_ref().unwrap(), tape, x)?;
            return Ok(Parts { grad_h: None, j_grad_h: None, r_grad_h: None, field });
        }
        let gh = self.record_grad_h(vars, tape, x)?;
        if matches!(self.r, RParam::FromW) {
            let (wg, wtg) = self.record_w_products(vars, tape, x, gh)?;
            let j = tape.sub(wg, wtg)?;
            let j = tape.scale(j, 0.5)?;
            let r = tape.add(wg, wtg)?;
            let r = tape.scale(r, 0.5)?;
            return Ok(Parts { grad_h: Some(gh), j_grad_h: Some(j), r_grad_h: Some(r), field: wg });
        }
        let j = self.record_j(vars, tape, x, gh)?;
        let r = self.record_r(vars, tape, x, gh)?;
        let field = match (j, r) {
            (Some(a), Some(b)) => tape.add(a, b)?,
            (Some(a), None) => a,
            (None, Some(b)) => b,
            (None, None) => {
                let z = tape.constant(Tensor::zeros(tape.shape(x)));
                tape.mul(gh, z)?
            }
        };
        Ok(Parts { grad_h: Some(gh), j_grad_h: j, r_grad_h: r, field })
    }

    pub fn record_field(&self, vars: &ModelVars, tape: &mut Tape, x: Var) -> Res<Var> {
        Ok(self.record_parts(vars, tape, x)?.field)
    }

    /// `∇Hᵀ R ∇H` per row, as a column.
    pub fn record_energy_rate(&self, vars: &ModelVars, tape: &mut Tape, x: Var) -> Res<Var> {
        let parts = self.record_parts(vars, tape, x)?;
        self.rate_from_parts(tape, &parts)
    }

    pub fn rate_from_parts(&self, tape: &mut Tape, parts: &Parts) -> Res<Var> {
        let Some(gh) = parts.grad_h else {
            return Err(DecompError::Unsupported { op: "energy_rate", kind: self.kind });
        };
        match parts.r_grad_h {
            Some(r) => {
                let p = tape.mul(gh, r)?;
                Ok(tape.row_sums(p)?)
            }
            None => {
                let z = tape.constant(Tensor::zeros(&[tape.shape(gh)[0], 1]));
                Ok(z)
            }
        }
    }

    /// Evaluates `what` on a numeric batch with parameters as constants.
    fn numeric<T>(&self, x: &Tensor, what: impl FnOnce(&Self, &mut Tape, Parts) -> Res<T>) -> Res<T> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let parts = self.record_parts(&vars, &mut tape, xv)?;
        what(self, &mut tape, parts)
    }

    fn row(&self, x: &[f64]) -> Res<Tensor> {
        if x.len() != self.n {
            return Err(AdError::Dimension { expected: self.n, got: x.len() }.into());
        }
        Ok(Tensor::matrix(1, self.n, x.to_vec()))
    }

    /// Vector field on a `B×n` batch.
    pub fn eval_batch(&self, x: &Tensor) -> Res<Tensor> {
        self.numeric(x, |_, t, p| Ok(t.value(p.field).clone()))
    }

    pub fn eval_field(&self, x: &[f64]) -> Res<Vec<f64>> {
        Ok(self.eval_batch(&self.row(x)?)?.into_data())
    }

    pub fn energy_batch(&self, x: &Tensor) -> Res<Vec<f64>> {
        if !self.has_energy() {
            return Err(DecompError::Unsupported { op: "energy", kind: self.kind });
        }
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let h = self.record_energy(&vars, &mut tape, xv)?;
        Ok(tape.value(h).data().to_vec())
    }

    pub fn energy(&self, x: &[f64]) -> Res<f64> {
        Ok(self.energy_batch(&self.row(x)?)?[0])
    }

    pub fn energy_rate_batch(&self, x: &Tensor) -> Res<Vec<f64>> {
        if !self.has_energy() {
            return Err(DecompError::Unsupported { op: "energy_rate", kind: self.kind });
        }
        self.numeric(x, |m, t, p| {
            let r = m.rate_from_parts(t, &p)?;
            Ok(t.value(r).data().to_vec())
        })
    }

    pub fn energy_rate(&self, x: &[f64]) -> Res<f64> {
        Ok(self.energy_rate_batch(&self.row(x)?)?[0])
    }

    /// `∇H ⊙ R∇H`.
    pub fn flux_per_state(&self, x: &[f64]) -> Res<Vec<f64>> {
        if !self.has_energy() {
            return Err(DecompError::Unsupported { op: "flux_per_state", kind: self.kind });
        }
        let n = self.n;
        self.numeric(&self.row(x)?, |_, t, p| {
            let gh = t.value(p.grad_h.unwrap()).clone();
            Ok(match p.r_grad_h {
                Some(r) => gh.zip_map(t.value(r), |a, b| a * b).into_data(),
                None => vec![0.0; n],
            })
        })
    }

    pub fn grad_h(&self, x: &[f64]) -> Res<Vec<f64>> {
        self.numeric_part(x, "grad_h", |p| p.grad_h)
    }

    /// `J(x)∇H(x)`, zero when the model has no skew part.
    pub fn j_part(&self, x: &[f64]) -> Res<Vec<f64>> {
        self.numeric_part(x, "j_part", |p| p.j_grad_h)
    }

    /// `R(x)∇H(x)`, zero when the model has no dissipative part.
    pub fn r_part(&self, x: &[f64]) -> Res<Vec<f64>> {
        self.numeric_part(x, "r_part", |p| p.r_grad_h)
    }

    fn numeric_part(&self, x: &[f64], op: &'static str, pick: impl FnOnce(&Parts) -> Option<Var>) -> Res<Vec<f64>> {
        if !self.has_energy() {
            return Err(DecompError::Unsupported { op, kind: self.kind });
        }
        let n = self.n;
        self.numeric(&self.row(x)?, |_, t, p| {
            Ok(pick(&p).map(|v| t.value(v).data().to_vec()).unwrap_or_else(|| vec![0.0; n]))
        })
    }

    /// `J(x)` assembled explicitly, for inspection.
    pub fn j_matrix(&self, x: &[f64]) -> Res<Tensor> {
        let n = self.n;
        let mut m = Tensor::zeros(&[n, n]);
        match &self.j {
            JParam::None if !matches!(self.r, RParam::FromW) => {}
            JParam::CanonicalSymplectic => m = canonical_transpose(n).transpose(),
            JParam::LearnedSkew { pairs, entries } => {
                for (&(i, j), e) in pairs.iter().zip(entries) {
                    let g = match e {
                        SkewEntry::Constant(c) => c.item(),
                        SkewEntry::Net(net) => {
                            let xr: Vec<f64> = (0..n).filter(|&d| d != i && d != j).map(|d| x[d]).collect();
                            net.eval(&xr)?[0]
                        }
                    };
                    m.data_mut()[i * n + j] = g;
                    m.data_mut()[j * n + i] = -g;
                }
            }
            _ => {
                let w = self.w_matrix(x)?;
                for i in 0..n {
                    for j in 0..n {
                        m.data_mut()[i * n + j] = 0.5 * (w.get2(i, j) - w.get2(j, i));
                    }
                }
            }
        }
        Ok(m)
    }

    /// `W(x)` for known-h models.
    pub fn w_matrix(&self, x: &[f64]) -> Res<Tensor> {
        match &self.w {
            Some(WParam::Constant(t)) => Ok(t.clone()),
            Some(WParam::Net(m)) => Ok(Tensor::matrix(self.n, self.n, m.eval(x)?)),
            None => Err(DecompError::Unsupported { op: "w_matrix", kind: self.kind }),
        }
    }

    /// Central-difference `∇·(J∇H)`.
    pub fn divergence_check(&self, x: &[f64], h: f64) -> Res<f64> {
        fd_divergence(|p| self.j_part(p), x, h)
    }

    /// Central-difference antisymmetric Jacobian part of `x ↦ R(x)∇H(x)`.
    pub fn curl_check(&self, x: &[f64], h: f64) -> Res<Tensor> {
        fd_curl(|p| self.r_part(p), x, h)
    }

    /// Mean squared finite-difference curl of `R∇H` over the rows of `x`
    /// and all index pairs `i < j`, recorded on the tape.
    pub fn curl_penalty(&self, vars: &ModelVars, tape: &mut Tape, x: &Tensor, h: f64) -> Res<Var> {
        let n = self.n;
        let b = x.rows();
        if n < 2 || matches!(self.r, RParam::Zero) {
            return Ok(tape.scalar(0.0));
        }
        let mut stacked = Vec::with_capacity(2 * n * b * n);
        for d in 0..n {
            for s in [1.0, -1.0] {
                for r in 0..b {
                    let mut row = x.row(r).to_vec();
                    row[d] += s * h;
                    stacked.extend(row);
                }
            }
        }
        let xs = tape.constant(Tensor::matrix(2 * n * b, n, stacked));
        let parts = self.record_parts(vars, tape, xs)?;
        let Some(f) = parts.r_grad_h else {
            return Ok(tape.scalar(0.0));
        };
        let mut jac = Vec::with_capacity(n);
        for d in 0..n {
            let plus: Rc<[usize]> = (0..b).map(|r| 2 * d * b + r).collect();
            let minus: Rc<[usize]> = (0..b).map(|r| (2 * d + 1) * b + r).collect();
            let fp = tape.gather_rows(f, plus)?;
            let fm = tape.gather_rows(f, minus)?;
            let df = tape.sub(fp, fm)?;
            jac.push(tape.scale(df, 0.5 / h)?);
        }
        let mut terms = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                let a = tape.slice(jac[i], j, 1)?;
                let c = tape.slice(jac[j], i, 1)?;
                let curl = tape.sub(a, c)?;
                terms.push(tape.square(curl)?);
            }
        }
        let all = tape.concat(&terms)?;
        Ok(tape.mean(all)?)
    }
}

/// Central-difference divergence of a vector field.
pub fn fd_divergence<E>(f: impl Fn(&[f64]) -> Result<Vec<f64>, E>, x: &[f64], h: f64) -> Result<f64, E> {
    let mut div = 0.0;
    let mut p = x.to_vec();
    for i in 0..x.len() {
        p[i] = x[i] + h;
        let fp = f(&p)?[i];
        p[i] = x[i] - h;
        let fm = f(&p)?[i];
        p[i] = x[i];
        div += (fp - fm) / (2.0 * h);
    }
    Ok(div)
}

/// Central-difference `C_ij = ∂ᵢf_j − ∂ⱼf_i`.
pub fn fd_curl<E>(f: impl Fn(&[f64]) -> Result<Vec<f64>, E>, x: &[f64], h: f64) -> Result<Tensor, E> {
    let n = x.len();
    let mut jac = vec![vec![0.0; n]; n];
    let mut p = x.to_vec();
    for i in 0..n {
        p[i] = x[i] + h;
        let fp = f(&p)?;
        p[i] = x[i] - h;
        let fm = f(&p)?;
        p[i] = x[i];
        for j in 0..n {
            jac[i][j] = (fp[j] - fm[j]) / (2.0 * h);
        }
    }
    let mut c = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            c.data_mut()[i * n + j] = jac[i][j] - jac[j][i];
        }
    }
    Ok(c)
}
