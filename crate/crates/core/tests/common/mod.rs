//! Oracle harnesses shared by the suite tests and the acceptance report.
#![allow(dead_code)]

use std::rc::Rc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use eqdistill::fixed_point::{
    implicit_grad, solve_anderson, solve_naive, unrolled_forward, Solver, SolverConfig, StepFn,
    UnrollMode,
};
use eqdistill::model::{GetConfig, ImageDims, Model, ModelConfig};
use eqdistill::teacher::{heun_sample, MixtureSpec, NoiseSchedule};
use eqdistill::tensor::finite_difference_grad;
use eqdistill::{Graph, Result, Tensor, Var};

/// Central-difference step for the 64-bit gradient checks.
pub const FD_STEP: f64 = 1e-5;
/// Largest accepted relative gradient error.
pub const GRAD_TOL: f64 = 1e-4;
/// Per-element bound for the primitive checks.
pub const ELEMENT_TOL: f64 = 1e-5;
/// Magnitude below which elementwise errors are measured absolutely.
pub const ELEMENT_FLOOR: f64 = 1e-4;

pub fn normal_tensor(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// `||a - b|| / max(||a||, ||b||)`, zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

type Body = Rc<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

/// Largest `|a_i - b_i| / max(|a_i|, |b_i|, floor)`.
pub fn elementwise_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// One differentiable function with sampled inputs.
pub struct Case {
    pub inputs: Vec<Tensor<f64>>,
    pub body: Body,
}

impl Case {
    fn new(
        inputs: Vec<Tensor<f64>>,
        body: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static,
    ) -> Self {
        Case {
            inputs,
            body: Rc::new(body),
        }
    }
}

/// `sum(weights * body(inputs))`, the scalar every check differentiates.
fn probe(case: &Case, inputs: &[Tensor<f64>], weights: &Tensor<f64>) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = (case.body)(&mut g, &vars)?;
    let w = g.constant(weights.clone());
    let prod = g.mul(out, w)?;
    let s = g.sum(prod)?;
    Ok(g.value(s).item())
}

/// Worst errors between reverse-mode and central-difference gradients over
/// all inputs of `case`: norm-wise relative and elementwise relative.
pub fn check_case(case: &Case, rng: &mut ChaCha8Rng) -> Result<(f64, f64)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = (case.body)(&mut g, &vars)?;
    let weights = normal_tensor(g.value(out).shape(), 1.0, rng);
    let w = g.constant(weights.clone());
    let prod = g.mul(out, w)?;
    let s = g.sum(prod)?;
    g.backward(s)?;
    let (mut worst, mut worst_elem) = (0.0f64, 0.0f64);
    for (i, &v) in vars.iter().enumerate() {
        let analytic = g
            .grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(case.inputs[i].shape()));
        let mut xs = case.inputs.clone();
        let numeric = finite_difference_grad(
            |x| {
                xs[i] = x.clone();
                probe(case, &xs, &weights)
            },
            &case.inputs[i],
            FD_STEP,
        )?;
        worst = worst.max(rel_err(analytic.data(), numeric.data()));
        worst_elem = worst_elem.max(elementwise_err(
            analytic.data(),
            numeric.data(),
            ELEMENT_FLOOR,
        ));
    }
    Ok((worst, worst_elem))
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.gen_range(lo..=hi)
}

/// Broadcastable partner shapes for a `[r, c]` left operand.
fn partner(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match rng.gen_range(0..4) {
        0 => vec![r, c],
        1 => vec![c],
        2 => vec![r, 1],
        _ => vec![1, c],
    }
}

/// Names of the primitives covered by [`primitive_case`].
pub const PRIMITIVES: [&str; 16] = [
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "linear",
    "gelu",
    "abs",
    "sum",
    "mean",
    "reshape",
    "gather",
    "layer_norm",
    "softmax",
    "attention",
    "checkpoint",
];

/// Random inputs and body for one primitive.
pub fn primitive_case(name: &str, rng: &mut ChaCha8Rng) -> Case {
    let (r, c) = (dim(rng, 1, 5), dim(rng, 1, 6));
    match name {
        "add" | "mul" => {
            let a = normal_tensor(&[r, c], 1.0, rng);
            let b = normal_tensor(&partner(r, c, rng), 1.0, rng);
            if name == "add" {
                Case::new(vec![a, b], |g, v| g.add(v[0], v[1]))
            } else {
                Case::new(vec![a, b], |g, v| g.mul(v[0], v[1]))
            }
        }
        "sub" => {
            let a = normal_tensor(&[r, c], 1.0, rng);
            let b = normal_tensor(&[r, c], 1.0, rng);
            Case::new(vec![a, b], |g, v| g.sub(v[0], v[1]))
        }
        "scale" => {
            let k: f64 = rng.gen_range(-3.0..3.0);
            Case::new(vec![normal_tensor(&[r, c], 1.0, rng)], move |g, v| {
                g.scale(v[0], k)
            })
        }
        "matmul" => {
            let (k, n) = (dim(rng, 1, 6), dim(rng, 1, 6));
            let a = if rng.gen_bool(0.5) {
                normal_tensor(&[r, k], 1.0, rng)
            } else {
                normal_tensor(&[dim(rng, 1, 3), r, k], 1.0, rng)
            };
            let b = normal_tensor(&[k, n], 1.0, rng);
            Case::new(vec![a, b], |g, v| g.matmul(v[0], v[1]))
        }
        "linear" => {
            let n = dim(rng, 1, 6);
            let x = normal_tensor(&[r, c], 1.0, rng);
            let w = normal_tensor(&[c, n], 1.0, rng);
            let b = normal_tensor(&[n], 1.0, rng);
            Case::new(vec![x, w, b], |g, v| g.linear(v[0], v[1], v[2]))
        }
        "gelu" => Case::new(vec![normal_tensor(&[r, c], 2.0, rng)], |g, v| g.gelu(v[0])),
        "abs" => {
            // Kept away from the kink at zero.
            let data = (0..r * c)
                .map(|_| {
                    let m: f64 = rng.gen_range(0.1..2.0);
                    if rng.gen_bool(0.5) {
                        m
                    } else {
                        -m
                    }
                })
                .collect();
            let x = Tensor::new(&[r, c], data).unwrap();
            Case::new(vec![x], |g, v| g.abs(v[0]))
        }
        "sum" => Case::new(vec![normal_tensor(&[r, c], 1.0, rng)], |g, v| g.sum(v[0])),
        "mean" => Case::new(vec![normal_tensor(&[r, c], 1.0, rng)], |g, v| g.mean(v[0])),
        "reshape" => Case::new(vec![normal_tensor(&[r, c], 1.0, rng)], move |g, v| {
            let y = g.reshape(v[0], &[c, r])?;
            g.gelu(y)
        }),
        "gather" => {
            let m = dim(rng, 1, 12);
            let index: Rc<[usize]> = (0..m).map(|_| rng.gen_range(0..r * c)).collect();
            Case::new(vec![normal_tensor(&[r, c], 1.0, rng)], move |g, v| {
                g.gather(v[0], index.clone(), &[m])
            })
        }
        "layer_norm" => {
            // Two features normalize to +-1, leaving an eps-sized gradient
            // that central differences cannot resolve.
            let d = dim(rng, 3, 6);
            let x = normal_tensor(&[r, d], 1.0, rng);
            let gamma = normal_tensor(&[d], 1.0, rng);
            let beta = normal_tensor(&[d], 1.0, rng);
            Case::new(vec![x, gamma, beta], |g, v| {
                g.layer_norm(v[0], v[1], v[2], 1e-6)
            })
        }
        "softmax" => Case::new(vec![normal_tensor(&[r, c], 2.0, rng)], |g, v| {
            g.softmax(v[0])
        }),
        "attention" => {
            let heads = dim(rng, 1, 2);
            let d = heads * dim(rng, 1, 3);
            let qkv = normal_tensor(&[dim(rng, 1, 2), dim(rng, 1, 4), 3 * d], 1.0, rng);
            Case::new(vec![qkv], move |g, v| g.attention(v[0], heads))
        }
        "checkpoint" => {
            let n = dim(rng, 2, 5);
            let x = normal_tensor(&[r, c], 1.0, rng);
            let w = normal_tensor(&[c, n], 1.0, rng);
            let b = normal_tensor(&[n], 1.0, rng);
            Case::new(vec![x, w, b], |g, v| {
                let seg: eqdistill::tensor::Segment<f64> = Rc::new(|g, ins| {
                    let y = g.linear(ins[0], ins[1], ins[2])?;
                    let y = g.gelu(y)?;
                    g.softmax(y)
                });
                g.checkpoint(v, seg)
            })
        }
        other => panic!("unknown primitive {other}"),
    }
}

/// Outcome of the gradient suite for one subject.
#[derive(Clone, Debug)]
pub struct GradOutcome {
    pub name: String,
    pub trials: usize,
    pub worst: f64,
    /// Elementwise worst case; only measured for primitives.
    pub worst_elem: f64,
}

pub fn primitive_suite(trials: usize, seed: u64) -> Result<Vec<GradOutcome>> {
    let mut out = Vec::new();
    for (p, name) in PRIMITIVES.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (p as u64) << 32);
        let (mut worst, mut worst_elem) = (0.0f64, 0.0f64);
        for _ in 0..trials {
            let case = primitive_case(name, &mut rng);
            let (w, e) = check_case(&case, &mut rng)?;
            worst = worst.max(w);
            worst_elem = worst_elem.max(e);
        }
        out.push(GradOutcome {
            name: name.to_string(),
            trials,
            worst,
            worst_elem,
        });
    }
    Ok(out)
}

/// D = 8 over 4x4x1 images with 2x2 patches, so N = 4 tokens.
pub fn grad_micro_config(classes: usize) -> GetConfig {
    GetConfig {
        image: ImageDims::new(4, 4, 1),
        patch: 2,
        width: 8,
        injection_depth: 1,
        equilibrium_depth: 1,
        expansion: 2,
        heads: 2,
        n_classes: classes,
        iterations: 2,
    }
}

/// Worst relative error of the whole-model gradient (every learned tensor)
/// for one randomly perturbed micro GET, unrolling `k` steps in `mode`.
pub fn model_trial(seed: u64, k: usize, mode: UnrollMode) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = if seed % 2 == 0 { 0 } else { 3 };
    let cfg = ModelConfig::Get(grad_micro_config(classes));
    let mut model = Model::<f64>::init(cfg, seed)?;
    // The default init zeroes the decoder, which would hide every other
    // gradient, so all learned weights are perturbed.
    for i in 0..model.params.len() {
        if model.params.is_learned(i) {
            let t = &mut model.params.tensors_mut()[i];
            for v in t.data_mut() {
                *v += 0.3 * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    let batch = 2;
    let noise = normal_tensor(&[batch, 4, 4, 1], 1.0, &mut rng);
    let labels: Option<Vec<usize>> = (classes > 0).then(|| vec![0, 2]);
    let weights = normal_tensor(&[batch, 4, 4, 1], 1.0, &mut rng);

    let value = |m: &Model<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let vars = m.params.register_frozen(&mut g);
        let out = m.forward(&mut g, &vars, &noise, labels.as_deref(), k, mode)?;
        let w = g.constant(weights.clone());
        let p = g.mul(out, w)?;
        let s = g.sum(p)?;
        Ok(g.value(s).item())
    };

    let mut g = Graph::new();
    let vars = model.params.register(&mut g);
    let out = model.forward(&mut g, &vars, &noise, labels.as_deref(), k, mode)?;
    let w = g.constant(weights.clone());
    let p = g.mul(out, w)?;
    let s = g.sum(p)?;
    g.backward(s)?;

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for i in 0..model.params.len() {
        if !model.params.is_learned(i) {
            continue;
        }
        let shape = model.params.tensors()[i].shape().to_vec();
        let a = g
            .grad(vars.vars()[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&shape));
        let mut probe = model.clone();
        let n = finite_difference_grad(
            |x| {
                probe.params.tensors_mut()[i] = x.clone();
                value(&probe)
            },
            &model.params.tensors()[i],
            FD_STEP,
        )?;
        analytic.extend_from_slice(a.data());
        numeric.extend_from_slice(n.data());
    }
    Ok(rel_err(&analytic, &numeric))
}

/// Alternates plain and checkpointed unrolls over `trials` seeds.
pub fn model_suite(trials: usize, seed: u64) -> Result<GradOutcome> {
    let mut worst = 0.0f64;
    for t in 0..trials {
        let mode = if t % 2 == 0 {
            UnrollMode::Plain
        } else {
            UnrollMode::Checkpointed
        };
        worst = worst.max(model_trial(seed + t as u64, 2, mode)?);
    }
    Ok(GradOutcome {
        name: "micro GET end to end".into(),
        trials,
        worst,
        worst_elem: f64::NAN,
    })
}

/// `z -> z W + b` on row vectors, with `W` scaled to a spectral norm `rho`.
pub struct AffineMap {
    pub w: Tensor<f64>,
    pub b: Tensor<f64>,
    pub rho: f64,
}

impl AffineMap {
    pub fn random(n: usize, rho: f64, rng: &mut ChaCha8Rng) -> Self {
        let g = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let top = g.singular_values().max();
        let w = g * (rho / top);
        let data: Vec<f64> = (0..n * n).map(|i| w[(i / n, i % n)]).collect();
        AffineMap {
            w: Tensor::new(&[n, n], data).unwrap(),
            b: normal_tensor(&[1, n], 1.0, rng),
            rho,
        }
    }

    pub fn dim(&self) -> usize {
        self.b.numel()
    }

    pub fn apply(&self, z: &Tensor<f64>) -> Result<Tensor<f64>> {
        z.matmul(&self.w)?.add(&self.b)
    }

    /// Exact gradients of `u . z*` with respect to `(W, b)` from the linear
    /// solve `z* = b (I - W)^-1`.
    pub fn exact_grads(&self, u: &Tensor<f64>) -> (Vec<f64>, Vec<f64>) {
        let n = self.dim();
        let w = DMatrix::from_row_slice(n, n, self.w.data());
        let a = DMatrix::identity(n, n) - w;
        let inv = a.try_inverse().expect("contractive map");
        let b = DMatrix::from_row_slice(1, n, self.b.data());
        let z = &b * &inv;
        let uu = DMatrix::from_row_slice(n, 1, u.data());
        let gb = &inv * uu;
        let gw = (0..n * n).map(|i| z[(0, i / n)] * gb[(i % n, 0)]).collect();
        (gw, gb.iter().copied().collect())
    }
}

fn affine_step() -> StepFn<f64> {
    Rc::new(|g, z, ins| {
        let y = g.matmul(z, ins[0])?;
        g.add(y, ins[1])
    })
}

/// Gradients of `u . z_K` after `steps` unrolled iterations from zero.
pub fn unrolled_grads(map: &AffineMap, u: &Tensor<f64>, steps: usize) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let w = g.param(map.w.clone());
    let b = g.param(map.b.clone());
    let z0 = g.constant(Tensor::zeros(&[1, map.dim()]));
    let z = unrolled_forward(&mut g, affine_step(), z0, &[w, b], steps, UnrollMode::Plain)?;
    g.backward_with(z, u.clone())?;
    let mut out = g.grad(w).unwrap().data().to_vec();
    out.extend_from_slice(g.grad(b).unwrap().data());
    Ok(out)
}

pub fn implicit_grads(map: &AffineMap, u: &Tensor<f64>) -> Result<Vec<f64>> {
    let cfg = SolverConfig {
        max_iters: 2000,
        tol: 1e-13,
        ..SolverConfig::default()
    };
    let z0 = Tensor::zeros(&[1, map.dim()]);
    let fwd = solve_anderson(|z| map.apply(z), &z0, &cfg)?;
    let body = |g: &mut Graph<f64>, z: Var, ins: &[Var]| -> Result<Var> {
        let y = g.matmul(z, ins[0])?;
        g.add(y, ins[1])
    };
    let r = implicit_grad(
        &body,
        &fwd.z_star,
        &[map.w.clone(), map.b.clone()],
        u,
        &cfg,
        Solver::Anderson,
    )?;
    let mut out = r.inputs[0].data().to_vec();
    out.extend_from_slice(r.inputs[1].data());
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct AffineOutcome {
    pub rho: f64,
    pub dim: usize,
    /// Implicit vs unrolled relative gradient error.
    pub implicit_vs_unrolled: f64,
    /// Implicit vs the linear-solve oracle.
    pub implicit_vs_exact: f64,
    pub naive_iters: usize,
    pub anderson_iters: usize,
    pub both_converged: bool,
}

/// Spectral norms drawn from this range keep 200 unrolled steps converged
/// to below 1e-14.
pub const RHO_RANGE: (f64, f64) = (0.3, 0.85);

pub fn affine_suite(maps: usize, seed: u64) -> Result<Vec<AffineOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let solve_cfg = SolverConfig {
        max_iters: 5000,
        tol: 1e-10,
        ..SolverConfig::default()
    };
    let mut out = Vec::with_capacity(maps);
    for _ in 0..maps {
        let n = rng.gen_range(3..=12);
        let rho = rng.gen_range(RHO_RANGE.0..RHO_RANGE.1);
        let map = AffineMap::random(n, rho, &mut rng);
        let u = normal_tensor(&[1, n], 1.0, &mut rng);
        let implicit = implicit_grads(&map, &u)?;
        let unrolled = unrolled_grads(&map, &u, 200)?;
        let (gw, gb) = map.exact_grads(&u);
        let exact: Vec<f64> = gw.into_iter().chain(gb).collect();
        let z0 = Tensor::zeros(&[1, n]);
        let naive = solve_naive(|z| map.apply(z), &z0, &solve_cfg)?;
        let anderson = solve_anderson(|z| map.apply(z), &z0, &solve_cfg)?;
        out.push(AffineOutcome {
            rho,
            dim: n,
            implicit_vs_unrolled: rel_err(&implicit, &unrolled),
            implicit_vs_exact: rel_err(&implicit, &exact),
            naive_iters: naive.n_iters,
            anderson_iters: anderson.n_iters,
            both_converged: naive.converged && anderson.converged,
        });
    }
    Ok(out)
}

/// Largest relative error of Heun against the exact flow of a zero-mean
/// unit Gaussian, `x(0) = x(T) / sqrt(1 + T^2)`, over a fixed set of unit
/// noises.
pub fn heun_unit_gaussian_error(n_steps: usize) -> Result<f64> {
    let d = 16;
    let spec = MixtureSpec {
        dims: ImageDims::new(4, 4, 1),
        weights: vec![1.0],
        means: vec![vec![0.0; d]],
        std: 1.0,
        labels: None,
    };
    let schedule = NoiseSchedule::with_steps(n_steps);
    let t = schedule.sigma_max;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let e: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let x = heun_sample(&e, &spec, &schedule)?;
    Ok(e.iter()
        .zip(&x)
        .map(|(&ei, &xi)| {
            let exact = ei * t / (1.0 + t * t).sqrt();
            ((xi - exact) / exact).abs()
        })
        .fold(0.0, f64::max))
}

/// Least-squares slope of `-log2(error)` against `log2(N)`.
pub fn convergence_order(steps: &[usize], errors: &[f64]) -> f64 {
    let xs: Vec<f64> = steps.iter().map(|&n| (n as f64).log2()).collect();
    let ys: Vec<f64> = errors.iter().map(|e| -e.log2()).collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}
