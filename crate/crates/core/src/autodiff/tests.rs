use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(a.iter().map(|y| y * y).sum::<f64>().sqrt());
    num / den.max(1e-8)
}

/// Central finite-difference gradient of a scalar function of several inputs.
fn fd_grad(f: &dyn Fn(&[Tensor]) -> f64, inputs: &[Tensor], h: f64) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for k in 0..inputs.len() {
        let mut g = vec![0.0; inputs[k].numel()];
        for j in 0..g.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[j] -= h;
            g[j] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

type Build = fn(&mut Tape, &[Var]) -> Result<Var, AdError>;

struct Case {
    name: &'static str,
    shapes: Vec<Vec<usize>>,
    positive: bool,
    build: Build,
}

fn cases() -> Vec<Case> {
    fn c(name: &'static str, shapes: Vec<Vec<usize>>, positive: bool, build: Build) -> Case {
        Case { name, shapes, positive, build }
    }
    vec![
        c("add", vec![vec![2, 3], vec![2, 3]], false, |t, v| t.add(v[0], v[1])),
        c("add_scalar", vec![vec![2, 3], vec![]], false, |t, v| t.add(v[0], v[1])),
        c("sub", vec![vec![4], vec![4]], false, |t, v| t.sub(v[0], v[1])),
        c("sub_scalar", vec![vec![], vec![3]], false, |t, v| t.sub(v[0], v[1])),
        c("mul", vec![vec![3, 2], vec![3, 2]], false, |t, v| t.mul(v[0], v[1])),
        c("mul_scalar", vec![vec![3, 2], vec![1, 1]], false, |t, v| t.mul(v[0], v[1])),
        c("scale", vec![vec![5]], false, |t, v| t.scale(v[0], -1.7)),
        c("neg", vec![vec![5]], false, |t, v| t.neg(v[0])),
        c("matvec", vec![vec![3, 4], vec![4]], false, |t, v| t.matvec(v[0], v[1])),
        c("matmul", vec![vec![3, 4], vec![4, 2]], false, |t, v| t.matmul(v[0], v[1])),
        c("dot", vec![vec![2, 3], vec![2, 3]], false, |t, v| t.dot(v[0], v[1])),
        c("sum", vec![vec![3, 3]], false, |t, v| t.sum(v[0])),
        c("sin", vec![vec![4]], false, |t, v| t.sin(v[0])),
        c("cos", vec![vec![4]], false, |t, v| t.cos(v[0])),
        c("exp", vec![vec![4]], false, |t, v| t.exp(v[0])),
        c("log", vec![vec![4]], true, |t, v| t.log(v[0])),
        c("tanh", vec![vec![4]], false, |t, v| t.tanh(v[0])),
        c("softplus", vec![vec![4]], false, |t, v| t.softplus(v[0])),
        c("sigmoid", vec![vec![4]], false, |t, v| t.sigmoid(v[0])),
        c("square", vec![vec![4]], false, |t, v| t.square(v[0])),
        c("power", vec![vec![4]], true, |t, v| t.powf(v[0], -1.5)),
        c("max", vec![vec![6], vec![6]], false, |t, v| t.max(v[0], v[1])),
        c("concat", vec![vec![2, 2], vec![2, 3]], false, |t, v| t.concat(&[v[0], v[1]])),
        c("slice", vec![vec![3, 5]], false, |t, v| t.slice(v[0], 1, 3)),
        c("transpose", vec![vec![2, 3]], false, |t, v| t.transpose(v[0])),
        c("reshape", vec![vec![2, 3]], false, |t, v| t.reshape(v[0], &[3, 2])),
        c("add_row", vec![vec![3, 2], vec![1, 2]], false, |t, v| t.add_row(v[0], v[1])),
        c("sum_rows", vec![vec![3, 2]], false, |t, v| t.sum_rows(v[0])),
        c("gather_rows", vec![vec![3, 2]], false, |t, v| t.gather_rows(v[0], vec![2, 0, 2, 1].into())),
        c("rehu", vec![vec![6]], false, |t, v| t.rehu(v[0], 1.0)),
    ]
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], positive: bool) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| if positive { rng.random_range(0.5..2.0) } else { rng.random_range(-2.0..2.0) })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// Scalar loss `Σ w ⊙ op(inputs)` evaluated on a fresh tape.
fn weighted(case: &Case, inputs: &[Tensor], weights: &Tensor) -> f64 {
    let mut t = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
    let y = (case.build)(&mut t, &vars).unwrap();
    let w = t.constant(weights.clone());
    let l = t.dot(y, w).unwrap();
    t.value(l).item()
}

#[test]
fn primitive_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in cases() {
        let mut worst = 0.0_f64;
        for _ in 0..100 {
            let inputs: Vec<Tensor> =
                case.shapes.iter().map(|s| random_tensor(&mut rng, s, case.positive)).collect();
            let mut t = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|x| t.leaf(x.clone())).collect();
            let y = (case.build)(&mut t, &vars).unwrap();
            let weights = random_tensor(&mut rng, t.shape(y), false);
            let w = t.constant(weights.clone());
            let l = t.dot(y, w).unwrap();
            let ad = t.grad(l, &vars).unwrap();
            let fd = fd_grad(&|xs| weighted(&case, xs, &weights), &inputs, 1e-5);
            for (a, f) in ad.iter().zip(&fd) {
                worst = worst.max(rel_err(a.data(), f));
            }
        }
        assert!(worst < 1e-6, "{}: relative error {worst:e}", case.name);
    }
}

#[test]
fn nested_gradients_match_finite_differences_of_first_order() {
    // Second-order: d/dx of ‖∇ₓ g(x)‖² for composed expressions g.
    let builds: Vec<Build> = vec![
        |t, v| {
            let a = t.sin(v[0])?;
            let b = t.softplus(a)?;
            let c = t.mul(b, v[0])?;
            t.sum(c)
        },
        |t, v| {
            let a = t.tanh(v[0])?;
            let b = t.exp(a)?;
            let c = t.square(b)?;
            t.dot(c, v[0])
        },
        |t, v| {
            let m = t.reshape(v[0], &[2, 2])?;
            let mm = t.matmul(m, m)?;
            let s = t.sigmoid(mm)?;
            let c = t.cos(s)?;
            t.sum(c)
        },
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let first_order = |b: Build, x: &Tensor| -> Vec<f64> {
        let mut t = Tape::new();
        let xv = t.leaf(x.clone());
        let y = b(&mut t, &[xv]).unwrap();
        t.grad(y, &[xv]).unwrap().remove(0).into_data()
    };
    for b in builds {
        for _ in 0..20 {
            let x = random_tensor(&mut rng, &[4], false);
            let mut t = Tape::new();
            let xv = t.leaf(x.clone());
            let y = b(&mut t, &[xv]).unwrap();
            let g = t.grad_graph(y, &[xv], &[]).unwrap()[0];
            let gg = t.dot(g, g).unwrap();
            let ad = t.grad(gg, &[xv]).unwrap().remove(0);
            let fd = fd_grad(
                &|xs| {
                    let g = first_order(b, &xs[0]);
                    g.iter().map(|v| v * v).sum()
                },
                &[x.clone()],
                1e-5,
            );
            let e = rel_err(ad.data(), &fd[0]);
            assert!(e < 1e-4, "nested relative error {e:e}");
        }
    }
}

#[test]
fn record_examples() {
    let mut t = Tape::new();
    let z = t.scalar(0.0);
    let sp = t.record(Primitive::Softplus, &[z]).unwrap();
    assert!((t.value(sp).item() - std::f64::consts::LN_2).abs() < 1e-15);

    let a = t.constant(Tensor::vector(&[1.0, 2.0]));
    let b = t.constant(Tensor::vector(&[3.0, 4.0]));
    let d = t.record(Primitive::Dot, &[a, b]).unwrap();
    assert_eq!(t.value(d).item(), 11.0);

    let i3 = t.constant(Tensor::identity(3));
    let v = t.constant(Tensor::vector(&[0.3, -1.0, 2.5]));
    let mv = t.record(Primitive::MatVec, &[i3, v]).unwrap();
    assert_eq!(t.value(mv).data(), &[0.3, -1.0, 2.5]);
}

#[test]
fn shape_errors_name_op_and_shapes() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[2, 3]));
    let err = t.matmul(a, b).unwrap_err();
    assert_eq!(err.to_string(), "shape mismatch in matmul: [2×3], [2×3]");
    let v = t.constant(Tensor::zeros(&[4]));
    assert!(matches!(t.add(a, v), Err(AdError::ShapeMismatch { op: "add", .. })));
    assert!(matches!(t.record(Primitive::Add, &[a]), Err(AdError::Arity { .. })));
}

#[test]
fn backward_examples() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::scalar(3.0));
    let y = t.square(x).unwrap();
    assert_eq!(t.grad(y, &[x]).unwrap()[0].item(), 6.0);

    let x = t.leaf(Tensor::scalar(0.0));
    let y = t.sin(x).unwrap();
    assert_eq!(t.grad(y, &[x]).unwrap()[0].item(), 1.0);
}

#[test]
fn squared_gradient_norm_of_quadratic_form() {
    // ‖∇(½xᵀAx)‖² = ‖Ax‖², gradient 2AᵀAx = (8, 2) at A = diag(2, 1), x = (1, 1).
    let mut t = Tape::new();
    let a = t.constant(Tensor::matrix(2, 2, vec![2.0, 0.0, 0.0, 1.0]));
    let x = t.leaf(Tensor::vector(&[1.0, 1.0]));
    let ax = t.matvec(a, x).unwrap();
    let q = t.dot(x, ax).unwrap();
    let q = t.scale(q, 0.5).unwrap();
    let g = t.grad_graph(q, &[x], &[]).unwrap()[0];
    let n2 = t.dot(g, g).unwrap();
    let gg = t.grad(n2, &[x]).unwrap().remove(0);
    assert!((gg.data()[0] - 8.0).abs() < 1e-12 && (gg.data()[1] - 2.0).abs() < 1e-12);

    let ad = gg.into_data();
    let f = |xs: &[Tensor]| {
        let (x0, x1) = (xs[0].data()[0], xs[0].data()[1]);
        (2.0 * x0).powi(2) + x1.powi(2)
    };
    let fd = fd_grad(&f, &[Tensor::vector(&[1.0, 1.0])], 1e-5);
    assert!(rel_err(&ad, &fd[0]) < 1e-8);
}

#[test]
fn backward_errors() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::vector(&[1.0, 2.0]));
    assert!(matches!(t.grad(x, &[x]), Err(AdError::NonScalarRoot { .. })));
    let mut other = Tape::new();
    let foreign = other.leaf(Tensor::scalar(1.0));
    let s = t.sum(x).unwrap();
    assert!(matches!(t.grad(s, &[foreign]), Err(AdError::ForeignNode { .. })));
}

#[test]
fn numeric_grad_leaves_tape_unchanged() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::vector(&[0.2, 0.4]));
    let y = t.tanh(x).unwrap();
    let s = t.sum(y).unwrap();
    let before = t.len();
    t.grad(s, &[x]).unwrap();
    assert_eq!(t.len(), before);
}

#[test]
fn unrelated_wrt_gets_zero_gradient() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::vector(&[1.0, 2.0]));
    let z = t.leaf(Tensor::matrix(1, 2, vec![3.0, 4.0]));
    let s = t.sum(x).unwrap();
    let g = t.grad(s, &[x, z]).unwrap();
    assert_eq!(g[0].data(), &[1.0, 1.0]);
    assert_eq!(g[1].data(), &[0.0, 0.0]);
    assert_eq!(g[1].shape(), &[1, 2]);
}

struct Quadratic;
impl ScalarField for Quadratic {
    fn input_dim(&self) -> usize {
        3
    }
    fn record(&self, t: &mut Tape, x: Var) -> Result<Var, AdError> {
        let s = t.square(x)?;
        let r = t.row_sums(s)?;
        t.scale(r, 0.5)
    }
}

struct CubicProduct;
impl ScalarField for CubicProduct {
    fn input_dim(&self) -> usize {
        2
    }
    fn record(&self, t: &mut Tape, x: Var) -> Result<Var, AdError> {
        let x1 = t.slice(x, 0, 1)?;
        let x2 = t.slice(x, 1, 1)?;
        let sq = t.square(x1)?;
        t.mul(sq, x2)
    }
}

/// Two-layer softplus network with fixed random weights.
struct SmallNet {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
}
impl ScalarField for SmallNet {
    fn input_dim(&self) -> usize {
        self.w1.rows()
    }
    fn record(&self, t: &mut Tape, x: Var) -> Result<Var, AdError> {
        let w1 = t.constant(self.w1.clone());
        let b1 = t.constant(self.b1.clone());
        let w2 = t.constant(self.w2.clone());
        let h = t.matmul(x, w1)?;
        let h = t.add_row(h, b1)?;
        let h = t.softplus(h)?;
        t.matmul(h, w2)
    }
}

#[test]
fn hvp_examples() {
    let v = [0.3, -0.7, 1.1];
    let r = hvp(&Quadratic, &[1.0, 2.0, 3.0], &v).unwrap();
    assert!(rel_err(&r, &v) < 1e-14);

    let r = hvp(&CubicProduct, &[1.0, 1.0], &[1.0, 0.0]).unwrap();
    assert!((r[0] - 2.0).abs() < 1e-14 && (r[1] - 2.0).abs() < 1e-14);

    assert!(matches!(hvp(&CubicProduct, &[1.0], &[1.0, 0.0]), Err(AdError::Dimension { .. })));
}

#[test]
fn hvp_matches_finite_difference_of_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let n = 3;
        let net = SmallNet {
            w1: random_tensor(&mut rng, &[n, 8], false),
            b1: random_tensor(&mut rng, &[1, 8], false),
            w2: random_tensor(&mut rng, &[8, 1], false),
        };
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ad = hvp(&net, &x, &v).unwrap();
        let h = 1e-4;
        let xp: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a + h * b).collect();
        let xm: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a - h * b).collect();
        let gp = net.gradient(&xp).unwrap();
        let gm = net.gradient(&xm).unwrap();
        let fd: Vec<f64> = gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * h)).collect();
        assert!(rel_err(&ad, &fd) < 1e-5);
    }
}

#[test]
fn replay_is_bit_identical() {
    let run = || {
        let net = SmallNet {
            w1: Tensor::matrix(2, 3, vec![0.1, -0.4, 0.7, 1.2, 0.3, -0.8]),
            b1: Tensor::matrix(1, 3, vec![0.05, -0.1, 0.2]),
            w2: Tensor::matrix(3, 1, vec![0.9, -1.1, 0.4]),
        };
        let g = net.gradient(&[0.3, -0.2]).unwrap();
        let h = hvp(&net, &[0.3, -0.2], &[1.0, 2.0]).unwrap();
        (g, h)
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(a.1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.1.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}
