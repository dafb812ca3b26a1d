//! Samples noise/image pairs from the toy mixture teacher, writes them to a
//! pairs file and shows how the Heun step count trades NFE for accuracy.
//!
//! `cargo run --release --example teacher_pairs -- [count] [out.pairs]`

use std::time::Instant;

use eqdistill::teacher::{
    generate_pairs, heun_sample, nfe_count, read_pairs_header, MixtureSpec, NoiseSchedule,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn main() -> eqdistill::Result<()> {
    let mut args = std::env::args().skip(1);
    let count: usize = args.next().map_or(2000, |s| s.parse().expect("count"));
    let out = args.next().unwrap_or_else(|| "toy.pairs".into());

    let spec = MixtureSpec::default_toy();
    let schedule = NoiseSchedule::default();
    println!(
        "teacher: {} components over {} pixels, {} steps ({} NFE per sample)",
        spec.len(),
        spec.dim(),
        schedule.n_steps,
        nfe_count(schedule.n_steps)
    );

    let t0 = Instant::now();
    generate_pairs(
        &spec,
        &schedule,
        count,
        0,
        false,
        std::path::Path::new(&out),
    )?;
    let header = read_pairs_header(std::path::Path::new(&out))?;
    println!(
        "wrote {} pairs to {out} in {:.2}s ({:?})",
        header.count,
        t0.elapsed().as_secs_f64(),
        header.dims
    );

    // Step-count sweep against a fine-grid reference from the same noise.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let e: Vec<f64> = (0..spec.dim())
        .map(|_| rng.sample(StandardNormal))
        .collect();
    let reference = heun_sample(&e, &spec, &NoiseSchedule::with_steps(512))?;
    let nearest = spec.nearest_component(&reference);
    println!("\nreference sample lands on component {nearest}");
    println!("steps  NFE   max |x_N - x_ref|");
    for n in [4, 9, 18, 36, 72] {
        let x = heun_sample(&e, &spec, &NoiseSchedule::with_steps(n))?;
        let err = x
            .iter()
            .zip(&reference)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        println!("{n:>5}  {:>3}   {err:.3e}", nfe_count(n));
    }
    Ok(())
}
