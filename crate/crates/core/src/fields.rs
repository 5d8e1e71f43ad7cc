//! Parameterized scalar and vector fields: softplus MLPs, input-concave
//! networks, and the energy parameterizations with stability guarantees.

use crate::autodiff::{check_dim, AdError, ScalarField, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use crate::autodiff::rehu;

pub const DEFAULT_EPSILON: f64 = 1e-3;
pub const DEFAULT_REHU_DELTA: f64 = 1.0;

/// Uniform fan-in initialization `U(-1/√fan_in, 1/√fan_in)`.
fn init_uniform(rng: &mut impl Rng, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::matrix(rows, cols, data)
}

/// Multilayer perceptron with softplus hidden activations and an affine
/// output layer. Weights are stored `in × out`, biases `1 × out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    widths: Vec<usize>,
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
}

/// MLP parameters bound onto a tape.
#[derive(Clone, Debug)]
pub struct MlpVars {
    weights: Vec<Var>,
    biases: Vec<Var>,
}

impl MlpVars {
    /// Vars in the same order as [`Mlp::params`].
    pub fn all(&self) -> Vec<Var> {
        self.weights.iter().zip(&self.biases).flat_map(|(&w, &b)| [w, b]).collect()
    }
}

impl Mlp {
    /// `widths = [input, hidden…, output]`; requires at least two entries.
    pub fn new(widths: &[usize], rng: &mut impl Rng) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in widths.windows(2) {
            weights.push(init_uniform(rng, w[0], w[1], w[0]));
            biases.push(init_uniform(rng, 1, w[1], w[0]));
        }
        Self { widths: widths.to_vec(), weights, biases }
    }

    pub fn from_parts(weights: Vec<Tensor>, biases: Vec<Tensor>) -> Result<Self, AdError> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(AdError::InvalidArgument("weights and biases must pair up".into()));
        }
        let mut widths = vec![weights[0].rows()];
        for (w, b) in weights.iter().zip(&biases) {
            if w.rank() != 2 || w.rows() != *widths.last().unwrap() || b.shape() != [1, w.cols()] {
                return Err(AdError::InvalidArgument("inconsistent layer shapes".into()));
            }
            widths.push(w.cols());
        }
        Ok(Self { widths, weights, biases })
    }

    /// Same architecture with every weight and bias zero.
    pub fn zeroed(widths: &[usize]) -> Self {
        let weights = widths.windows(2).map(|w| Tensor::zeros(&[w[0], w[1]])).collect();
        let biases = widths.windows(2).map(|w| Tensor::zeros(&[1, w[1]])).collect();
        Self { widths: widths.to_vec(), weights, biases }
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn weights(&self) -> &[Tensor] {
        &self.weights
    }

    pub fn biases(&self) -> &[Tensor] {
        &self.biases
    }

    /// Parameters in binding order: w₁, b₁, w₂, b₂, …
    pub fn params(&self) -> Vec<&Tensor> {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| [w, b]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.weights.iter_mut().zip(self.biases.iter_mut()).flat_map(|(w, b)| [w, b]).collect()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> MlpVars {
        let mut put = |t: &Tensor| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            weights.push(put(w));
            biases.push(put(b));
        }
        MlpVars { weights, biases }
    }

    /// Forward pass on a batch of rows.
    pub fn forward(&self, vars: &MlpVars, tape: &mut Tape, x: Var) -> Result<Var, AdError> {
        let shape = tape.shape(x);
        if shape.len() != 2 || shape[1] != self.input_width() {
            return Err(AdError::Dimension {
                expected: self.input_width(),
                got: *shape.last().unwrap_or(&0),
            });
        }
        let last = vars.weights.len() - 1;
        let mut h = x;
        for (k, (&w, &b)) in vars.weights.iter().zip(&vars.biases).enumerate() {
            h = tape.matmul(h, w)?;
            h = tape.add_row(h, b)?;
            if k < last {
                h = tape.softplus(h)?;
            }
        }
        Ok(h)
    }

    /// Evaluates a single input, returning the output vector.
    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>, AdError> {
        check_dim(self.input_width(), x.len())?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let xv = tape.constant(Tensor::matrix(1, x.len(), x.to_vec()));
        let y = self.forward(&vars, &mut tape, xv)?;
        Ok(tape.value(y).data().to_vec())
    }
}

impl ScalarField for Mlp {
    fn input_dim(&self) -> usize {
        self.input_width()
    }

    fn record(&self, tape: &mut Tape, x: Var) -> Result<Var, AdError> {
        let vars = self.bind(tape, false);
        self.forward(&vars, tape, x)
    }
}

/// Scalar MLP evaluation `(W_k ∘ σ ∘ … ∘ W₁)(x)`.
pub fn mlp_eval(f: &Mlp, x: &[f64]) -> Result<f64, AdError> {
    if f.output_width() != 1 {
        return Err(AdError::Dimension { expected: 1, got: f.output_width() });
    }
    Ok(f.eval(x)?[0])
}

/// Negated input-convex network: a concave map ℝⁿ → ℝ.
///
/// `z₁ = σ(x·A₀ + b₀)`, `z_{k+1} = σ(z_k·softplus(U_k) + x·A_k + b_k)`, output
/// `-(z_L·softplus(U_L) + x·A_L + b_L)`. Softplus is convex and nondecreasing
/// and the z-path weights are strictly positive, so the inner network is
/// convex in `x`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConcaveField {
    input: usize,
    hidden: Vec<usize>,
    /// Raw z-path weights, passed through softplus before use.
    z_weights: Vec<Tensor>,
    x_weights: Vec<Tensor>,
    biases: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct ConcaveVars {
    z_weights: Vec<Var>,
    x_weights: Vec<Var>,
    biases: Vec<Var>,
}

impl ConcaveVars {
    /// Vars in the same order as [`ConcaveField::params`].
    pub fn all(&self) -> Vec<Var> {
        self.z_weights.iter().chain(&self.x_weights).chain(&self.biases).copied().collect()
    }
}

impl ConcaveField {
    pub fn new(input: usize, hidden: &[usize], rng: &mut impl Rng) -> Self {
        assert!(!hidden.is_empty(), "concave field needs a hidden layer");
        let mut outs = hidden.to_vec();
        outs.push(1);
        let x_weights = outs.iter().map(|&o| init_uniform(rng, input, o, input)).collect();
        let biases = outs.iter().map(|&o| init_uniform(rng, 1, o, input)).collect();
        // Raw values around -2 give positive z-weights of order 0.1.
        let z_weights = outs
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                let data = (0..w[0] * w[1]).map(|_| rng.random_range(-bound..bound) - 2.0).collect();
                Tensor::matrix(w[0], w[1], data)
            })
            .collect();
        Self { input, hidden: hidden.to_vec(), z_weights, x_weights, biases }
    }

    pub fn hidden(&self) -> &[usize] {
        &self.hidden
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.z_weights.iter().chain(&self.x_weights).chain(&self.biases).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.z_weights
            .iter_mut()
            .chain(self.x_weights.iter_mut())
            .chain(self.biases.iter_mut())
            .collect()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ConcaveVars {
        let mut put = |t: &Tensor| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
        ConcaveVars {
            z_weights: self.z_weights.iter().map(&mut put).collect(),
            x_weights: self.x_weights.iter().map(&mut put).collect(),
            biases: self.biases.iter().map(&mut put).collect(),
        }
    }

    pub fn forward(&self, vars: &ConcaveVars, tape: &mut Tape, x: Var) -> Result<Var, AdError> {
        let shape = tape.shape(x);
        if shape.len() != 2 || shape[1] != self.input {
            return Err(AdError::Dimension { expected: self.input, got: *shape.last().unwrap_or(&0) });
        }
        let layers = vars.x_weights.len();
        let mut z: Option<Var> = None;
        for k in 0..layers {
            let mut pre = tape.matmul(x, vars.x_weights[k])?;
            if let Some(zk) = z {
                let u = tape.softplus(vars.z_weights[k - 1])?;
                let zu = tape.matmul(zk, u)?;
                pre = tape.add(pre, zu)?;
            }
            pre = tape.add_row(pre, vars.biases[k])?;
            z = Some(if k + 1 < layers { tape.softplus(pre)? } else { pre });
        }
        tape.neg(z.unwrap())
    }
}

impl ScalarField for ConcaveField {
    fn input_dim(&self) -> usize {
        self.input
    }

    fn record(&self, tape: &mut Tape, x: Var) -> Result<Var, AdError> {
        let vars = self.bind(tape, false);
        self.forward(&vars, tape, x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum HVariant {
    /// `ReHU(N(x) − N(0)) + ε‖x‖²`: positive definite and radially unbounded.
    GlobalStable,
    /// `σ(N(x)) − σ(N(0)) + ε‖x‖²` with σ = softplus.
    LocalStable,
    /// `N(x)` unconstrained.
    Plain,
}

/// Energy parameterization built on an inner scalar MLP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HParam {
    pub variant: HVariant,
    pub net: Mlp,
    pub epsilon: f64,
    pub rehu_delta: f64,
}

impl HParam {
    pub fn new(variant: HVariant, input: usize, hidden: &[usize], rng: &mut impl Rng) -> Self {
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(1);
        Self {
            variant,
            net: Mlp::new(&widths, rng),
            epsilon: DEFAULT_EPSILON,
            rehu_delta: DEFAULT_REHU_DELTA,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_width()
    }

    /// Records `H` for a batch `x` given the network's bound parameters.
    pub fn forward(&self, vars: &MlpVars, tape: &mut Tape, x: Var) -> Result<Var, AdError> {
        let nx = self.net.forward(vars, tape, x)?;
        if self.variant == HVariant::Plain {
            return Ok(nx);
        }
        let origin = tape.constant(Tensor::zeros(&[1, self.input_dim()]));
        let n0 = self.net.forward(vars, tape, origin)?;
        let shaped = match self.variant {
            HVariant::GlobalStable => {
                let d = tape.sub(nx, n0)?;
                tape.rehu(d, self.rehu_delta)?
            }
            HVariant::LocalStable => {
                let a = tape.softplus(nx)?;
                let b = tape.softplus(n0)?;
                tape.sub(a, b)?
            }
            HVariant::Plain => unreachable!(),
        };
        let sq = tape.square(x)?;
        let r2 = tape.row_sums(sq)?;
        let quad = tape.scale(r2, self.epsilon)?;
        tape.add(shaped, quad)
    }

    pub fn h_eval(&self, x: &[f64]) -> Result<f64, AdError> {
        self.evaluate(x)
    }

    pub fn h_grad(&self, x: &[f64]) -> Result<Vec<f64>, AdError> {
        self.gradient(x)
    }
}

impl ScalarField for HParam {
    fn input_dim(&self) -> usize {
        self.net.input_width()
    }

    fn record(&self, tape: &mut Tape, x: Var) -> Result<Var, AdError> {
        let vars = self.net.bind(tape, false);
        self.forward(&vars, tape, x)
    }
}
