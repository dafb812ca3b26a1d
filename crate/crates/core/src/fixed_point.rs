//! Fixed-point solvers for `z* = f(z*)` and the two ways of differentiating
//! through them: unrolling a fixed number of iterations on the graph, and the
//! implicit (adjoint) gradient at the equilibrium.

use std::fmt::Write as _;
use std::rc::Rc;

use nalgebra::{DMatrix, DVector};

use crate::error::{dim_err, Error, Result};
use crate::tensor::{Graph, Scalar, Segment, Tensor, Var};

/// Floor added to `||z||` in the relative residual.
pub const RESIDUAL_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct SolverConfig {
    pub max_iters: usize,
    /// Relative-residual tolerance.
    pub tol: f64,
    /// Anderson history length `m`; 0 degenerates to damped iteration.
    pub anderson_memory: usize,
    /// Anderson damping `beta` in (0, 1].
    pub anderson_damping: f64,
    /// Tikhonov term for the Anderson normal equations, relative to their
    /// largest diagonal entry.
    pub anderson_regularization: f64,
    /// Iterations differentiated through by [`unrolled_forward`].
    pub unroll_steps: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_iters: 100,
            tol: 1e-6,
            anderson_memory: 5,
            anderson_damping: 1.0,
            anderson_regularization: 1e-10,
            unroll_steps: 6,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be positive".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Config(format!(
                "tol must be positive, got {}",
                self.tol
            )));
        }
        if self.anderson_memory > self.max_iters {
            return Err(Error::Config(format!(
                "anderson memory {} exceeds max_iters {}",
                self.anderson_memory, self.max_iters
            )));
        }
        if !(self.anderson_damping > 0.0 && self.anderson_damping <= 1.0) {
            return Err(Error::Config(format!(
                "anderson damping must lie in (0, 1], got {}",
                self.anderson_damping
            )));
        }
        if self.unroll_steps == 0 {
            return Err(Error::Config("unroll_steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-iteration record of a solve.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Diagnostics {
    pub residuals: Vec<f64>,
    /// Iterations where the Anderson least-squares system was singular and a
    /// damped plain step was taken instead.
    pub fallback_iters: Vec<usize>,
}

impl Diagnostics {
    /// `iteration,residual,fallback` rows with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,residual,fallback\n");
        for (i, r) in self.residuals.iter().enumerate() {
            let fb = self.fallback_iters.contains(&i) as u8;
            let _ = writeln!(out, "{i},{r:e},{fb}");
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct FixedPointResult<T: Scalar> {
    pub z_star: Tensor<T>,
    /// `||f(z*) - z*|| / (||z*|| + 1e-8)`.
    pub residual: f64,
    /// Number of evaluations of `f`.
    pub n_iters: usize,
    pub converged: bool,
    pub diagnostics: Diagnostics,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Solver {
    Naive,
    Anderson,
}

pub fn relative_residual<T: Scalar>(fz: &Tensor<T>, z: &Tensor<T>) -> f64 {
    let diff: f64 = fz
        .data()
        .iter()
        .zip(z.data())
        .map(|(&a, &b)| (a - b).as_f64().powi(2))
        .sum();
    let norm: f64 = z.data().iter().map(|&v| v.as_f64().powi(2)).sum();
    diff.sqrt() / (norm.sqrt() + RESIDUAL_FLOOR)
}

fn evaluate<T: Scalar>(
    f: &mut impl FnMut(&Tensor<T>) -> Result<Tensor<T>>,
    z: &Tensor<T>,
    iteration: usize,
) -> Result<Tensor<T>> {
    let fz = f(z)?;
    if fz.shape() != z.shape() {
        return Err(dim_err(format!(
            "fixed-point map changed shape {:?} -> {:?}",
            z.shape(),
            fz.shape()
        )));
    }
    if !fz.is_finite() {
        return Err(Error::Divergence {
            iteration,
            detail: "non-finite iterate".into(),
        });
    }
    Ok(fz)
}

/// Plain iteration `z <- f(z)`.
pub fn solve_naive<T: Scalar>(
    mut f: impl FnMut(&Tensor<T>) -> Result<Tensor<T>>,
    z0: &Tensor<T>,
    cfg: &SolverConfig,
) -> Result<FixedPointResult<T>> {
    cfg.validate()?;
    let mut z = z0.clone();
    let mut diagnostics = Diagnostics::default();
    for k in 0..cfg.max_iters {
        let fz = evaluate(&mut f, &z, k)?;
        let residual = relative_residual(&fz, &z);
        diagnostics.residuals.push(residual);
        if residual <= cfg.tol || k + 1 == cfg.max_iters {
            return Ok(FixedPointResult {
                z_star: z,
                residual,
                n_iters: k + 1,
                converged: residual <= cfg.tol,
                diagnostics,
            });
        }
        z = fz;
    }
    unreachable!("loop returns on its last iteration")
}

/// Anderson acceleration with history `m`, damping `beta` and regularized
/// least-squares mixing.
pub fn solve_anderson<T: Scalar>(
    mut f: impl FnMut(&Tensor<T>) -> Result<Tensor<T>>,
    z0: &Tensor<T>,
    cfg: &SolverConfig,
) -> Result<FixedPointResult<T>> {
    cfg.validate()?;
    let m = cfg.anderson_memory;
    let beta = cfg.anderson_damping;
    let n = z0.numel();
    let mut x: Vec<f64> = z0.data().iter().map(|v| v.as_f64()).collect();
    let mut hist_x: Vec<Vec<f64>> = Vec::with_capacity(m + 1);
    let mut hist_g: Vec<Vec<f64>> = Vec::with_capacity(m + 1);
    let mut diagnostics = Diagnostics::default();
    let to_tensor = |v: &[f64]| Tensor::new(z0.shape(), v.iter().map(|&a| T::of(a)).collect());

    for k in 0..cfg.max_iters {
        let xt = to_tensor(&x)?;
        let gt = evaluate(&mut f, &xt, k)?;
        let residual = relative_residual(&gt, &xt);
        diagnostics.residuals.push(residual);
        if residual <= cfg.tol || k + 1 == cfg.max_iters {
            return Ok(FixedPointResult {
                z_star: xt,
                residual,
                n_iters: k + 1,
                converged: residual <= cfg.tol,
                diagnostics,
            });
        }
        let g: Vec<f64> = gt.data().iter().map(|v| v.as_f64()).collect();
        if m == 0 {
            x = damped(&x, &g, beta);
            continue;
        }
        if hist_x.len() == m + 1 {
            hist_x.remove(0);
            hist_g.remove(0);
        }
        hist_x.push(x.clone());
        hist_g.push(g.clone());
        if hist_x.len() < 2 {
            x = damped(&x, &g, beta);
            continue;
        }
        match anderson_mix(&hist_x, &hist_g, n, cfg.anderson_regularization) {
            Some(gamma) => {
                let cols = gamma.len();
                let mut next = vec![0.0; n];
                for i in 0..n {
                    let mut xi = x[i];
                    let mut gi = g[i];
                    for c in 0..cols {
                        xi -= gamma[c] * (hist_x[c + 1][i] - hist_x[c][i]);
                        gi -= gamma[c] * (hist_g[c + 1][i] - hist_g[c][i]);
                    }
                    next[i] = (1.0 - beta) * xi + beta * gi;
                }
                x = next;
            }
            None => {
                diagnostics.fallback_iters.push(k);
                x = damped(&x, &g, beta);
            }
        }
    }
    unreachable!("loop returns on its last iteration")
}

fn damped(x: &[f64], g: &[f64], beta: f64) -> Vec<f64> {
    x.iter()
        .zip(g)
        .map(|(&a, &b)| (1.0 - beta) * a + beta * b)
        .collect()
}

/// Solves `min || r_k - dR gamma ||` through regularized normal equations.
fn anderson_mix(hist_x: &[Vec<f64>], hist_g: &[Vec<f64>], n: usize, reg: f64) -> Option<Vec<f64>> {
    let cols = hist_x.len() - 1;
    let resid = |j: usize, i: usize| hist_g[j][i] - hist_x[j][i];
    let mut dr = DMatrix::<f64>::zeros(n, cols);
    for c in 0..cols {
        for i in 0..n {
            dr[(i, c)] = resid(c + 1, i) - resid(c, i);
        }
    }
    let r_k = DVector::from_fn(n, |i, _| resid(cols, i));
    let mut normal = dr.transpose() * &dr;
    let scale = (0..cols).map(|c| normal[(c, c)]).fold(0.0, f64::max);
    if !(scale > 0.0) || !scale.is_finite() {
        return None;
    }
    for c in 0..cols {
        normal[(c, c)] += reg * scale;
    }
    let rhs = dr.transpose() * r_k;
    let gamma = normal.cholesky()?.solve(&rhs);
    gamma
        .iter()
        .all(|v| v.is_finite())
        .then(|| gamma.iter().copied().collect())
}

/// One differentiable application of the equilibrium map: receives the graph,
/// the current state and the extra inputs (parameters, injections).
pub type StepFn<T> = Rc<dyn Fn(&mut Graph<T>, Var, &[Var]) -> Result<Var>>;

/// How [`unrolled_forward`] keeps activations for the backward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum UnrollMode {
    /// Every step's activations stay on the graph.
    #[default]
    Plain,
    /// The whole unroll is one checkpointed segment whose steps are themselves
    /// checkpointed, so resident activations do not grow with the step count.
    Checkpointed,
}

/// Applies `step` exactly `steps` times starting from `z0`, recorded on `g`.
pub fn unrolled_forward<T: Scalar>(
    g: &mut Graph<T>,
    step: StepFn<T>,
    z0: Var,
    inputs: &[Var],
    steps: usize,
    mode: UnrollMode,
) -> Result<Var> {
    if steps == 0 {
        return Err(Error::Contract("unroll needs at least one step".into()));
    }
    match mode {
        UnrollMode::Plain => {
            let mut z = z0;
            for _ in 0..steps {
                z = step(g, z, inputs)?;
            }
            Ok(z)
        }
        UnrollMode::Checkpointed => {
            let one_step: Segment<T> = {
                let step = step.clone();
                Rc::new(move |g, ins| step(g, ins[0], &ins[1..]))
            };
            let whole: Segment<T> = Rc::new(move |g, ins| {
                let mut z = ins[0];
                let mut args = ins.to_vec();
                for _ in 0..steps {
                    args[0] = z;
                    z = g.checkpoint(&args, one_step.clone())?;
                }
                Ok(z)
            });
            let mut args = Vec::with_capacity(inputs.len() + 1);
            args.push(z0);
            args.extend_from_slice(inputs);
            g.checkpoint(&args, whole)
        }
    }
}

#[derive(Clone, Debug)]
pub struct ImplicitGrad<T: Scalar> {
    /// `v^T df/d(input)` for each input, in the order given.
    pub inputs: Vec<Tensor<T>>,
    /// Solution `v` of `v = upstream + (df/dz)^T v`.
    pub adjoint: Tensor<T>,
    pub adjoint_residual: f64,
    pub adjoint_iters: usize,
}

/// Gradient of `upstream . z*` with respect to the inputs of `f`, through the
/// equilibrium condition rather than through solver iterations.
///
/// The adjoint system is solved by iterating the vector-Jacobian product of
/// `f` at `z_star`; no Jacobian is materialized.
pub fn implicit_grad<T: Scalar>(
    f: &dyn Fn(&mut Graph<T>, Var, &[Var]) -> Result<Var>,
    z_star: &Tensor<T>,
    inputs: &[Tensor<T>],
    upstream: &Tensor<T>,
    cfg: &SolverConfig,
    solver: Solver,
) -> Result<ImplicitGrad<T>> {
    if upstream.shape() != z_star.shape() {
        return Err(dim_err(format!(
            "upstream {:?} does not match z* {:?}",
            upstream.shape(),
            z_star.shape()
        )));
    }
    let mut g = Graph::new();
    let z = g.param(z_star.clone());
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, z, &vars)?;
    let forward_residual = relative_residual(g.value(out), z_star);
    if forward_residual > cfg.tol {
        return Err(Error::Contract(format!(
            "z* is not a fixed point: residual {forward_residual:e} > tol {:e}",
            cfg.tol
        )));
    }

    let vjp_map = |v: &Tensor<T>| -> Result<Tensor<T>> {
        g.backward_with(out, v.clone())?;
        let jv = g
            .grad(z)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(z_star.shape()));
        upstream.add(&jv)
    };
    let v0 = Tensor::zeros(z_star.shape());
    let adj = match solver {
        Solver::Naive => solve_naive(vjp_map, &v0, cfg)?,
        Solver::Anderson => solve_anderson(vjp_map, &v0, cfg)?,
    };
    if !adj.converged {
        return Err(Error::AdjointNotConverged {
            residual: adj.residual,
            iterations: adj.n_iters,
        });
    }
    g.backward_with(out, adj.z_star.clone())?;
    let grads = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            g.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();
    Ok(ImplicitGrad {
        inputs: grads,
        adjoint: adj.z_star,
        adjoint_residual: adj.residual,
        adjoint_iters: adj.n_iters,
    })
}
