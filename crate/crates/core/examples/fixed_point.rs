//! Solves `z = tanh(z W + u)` for a random contraction with plain iteration
//! and with Anderson acceleration, printing both residual traces.
//!
//! `cargo run --release --example fixed_point -- [dim] [scale]`

use eqdistill::fixed_point::{solve_anderson, solve_naive, SolverConfig};
use eqdistill::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn main() -> eqdistill::Result<()> {
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().map_or(64, |s| s.parse().expect("dim"));
    let scale: f64 = args.next().map_or(0.9, |s| s.parse().expect("scale"));

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut normal = |len: usize, s: f64| -> Vec<f64> {
        (0..len)
            .map(|_| s * rng.sample::<f64, _>(StandardNormal))
            .collect()
    };
    let w = Tensor::from_f64(&[n, n], &normal(n * n, scale / (n as f64).sqrt()))?;
    let u = Tensor::from_f64(&[1, n], &normal(n, 1.0))?;
    let f = |z: &Tensor<f64>| -> eqdistill::Result<Tensor<f64>> {
        Ok(z.matmul(&w)?.add(&u)?.map(f64::tanh))
    };

    let cfg = SolverConfig {
        max_iters: 500,
        tol: 1e-10,
        ..SolverConfig::default()
    };
    let z0 = Tensor::zeros(&[1, n]);
    let naive = solve_naive(f, &z0, &cfg)?;
    let anderson = solve_anderson(f, &z0, &cfg)?;
    for (name, r) in [("naive", &naive), ("anderson", &anderson)] {
        println!(
            "{name:>8}: {} iterations, residual {:.2e}, converged {}",
            r.n_iters, r.residual, r.converged
        );
    }
    println!("\niteration   naive       anderson");
    let rows = naive.n_iters.max(anderson.n_iters);
    for i in (0..rows).step_by((rows / 15).max(1)) {
        let cell = |r: &[f64]| r.get(i).map_or("-".to_string(), |v| format!("{v:.3e}"));
        println!(
            "{i:>9}   {:<10}  {}",
            cell(&naive.diagnostics.residuals),
            cell(&anderson.diagnostics.residuals)
        );
    }
    let gap = anderson.z_star.sub(&naive.z_star)?.max_abs();
    println!("\nmax |z_anderson - z_naive| = {gap:.2e}");
    Ok(())
}
