//! Distills the toy mixture teacher into a micro GET for a few hundred steps
//! and prints the loss curve and the held-out L1 before and after.
//!
//! `cargo run --release --example train_micro -- [steps] [pairs]`

use std::time::Instant;

use eqdistill::distill::{run_steps, TrainConfig, TrainState};
use eqdistill::eval::l1_fidelity;
use eqdistill::fixed_point::UnrollMode;
use eqdistill::model::{GetConfig, ModelConfig};
use eqdistill::teacher::{generate_dataset, MixtureSpec, NoiseSchedule};

fn main() -> eqdistill::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: u64 = args.next().map_or(300, |s| s.parse().expect("steps"));
    let pairs: usize = args.next().map_or(4096, |s| s.parse().expect("pairs"));

    let spec = MixtureSpec::default_toy();
    let schedule = NoiseSchedule::default();
    let t0 = Instant::now();
    let data = generate_dataset(&spec, &schedule, pairs, 0, false)?;
    let heldout = generate_dataset(&spec, &schedule, 512, 1, false)?;
    println!("{pairs} pairs in {:.2}s", t0.elapsed().as_secs_f64());

    let config = ModelConfig::Get(GetConfig::micro());
    let cfg = TrainConfig {
        batch_size: 64,
        iterations: steps,
        unroll: UnrollMode::Plain,
        ..TrainConfig::default()
    };
    let mut state = TrainState::<f32>::new(config, &cfg, data.len())?;
    println!(
        "untrained l1: {:.4}",
        l1_fidelity(&state.model, &heldout, 6)?
    );

    let t0 = Instant::now();
    run_steps(&mut state, &data, &cfg, steps, |_, s| {
        if s.iteration % 50 == 0 || s.iteration == 1 {
            println!(
                "step {:>5}  loss {:.4}  |grad| {:.3}",
                s.iteration, s.loss, s.grad_norm
            );
        }
        Ok(())
    })?;
    let secs = t0.elapsed().as_secs_f64();
    println!("{:.1} ms/step", 1e3 * secs / steps as f64);
    println!(
        "trained l1 (raw weights): {:.4}",
        l1_fidelity(&state.model, &heldout, 6)?
    );
    Ok(())
}
