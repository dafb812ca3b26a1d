//! Trains a micro GET briefly, then evaluates held-out L1, sliced
//! Wasserstein distance and throughput as the equilibrium step count K varies.
//!
//! `cargo run --release --example k_sweep -- [steps]`

use eqdistill::distill::{run_steps, TrainConfig, TrainState};
use eqdistill::eval::{generate_batched, l1_fidelity, sliced_wasserstein, throughput, EVAL_BATCH};
use eqdistill::model::{GetConfig, ModelConfig};
use eqdistill::teacher::{generate_dataset, MixtureSpec, NoiseSchedule};

fn main() -> eqdistill::Result<()> {
    let steps: u64 = std::env::args()
        .nth(1)
        .map_or(500, |s| s.parse().expect("steps"));

    let spec = MixtureSpec::default_toy();
    let schedule = NoiseSchedule::default();
    let data = generate_dataset(&spec, &schedule, 8192, 0, false)?;
    let held = generate_dataset(&spec, &schedule, 1024, 1, false)?;
    let (a, b) = (held.slice(0, 512), held.slice(512, 1024));
    let widen = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
    let floor = sliced_wasserstein(&widen(&a.images), &widen(&b.images), spec.dim(), 64, 0)?;

    let cfg = TrainConfig {
        batch_size: 64,
        iterations: steps,
        ..TrainConfig::default()
    };
    let mut state = TrainState::<f32>::new(ModelConfig::Get(GetConfig::micro()), &cfg, data.len())?;
    run_steps(&mut state, &data, &cfg, steps, |_, s| {
        if s.iteration % 100 == 0 {
            println!("step {:>5}  loss {:.4}", s.iteration, s.loss);
        }
        Ok(())
    })?;

    println!("\nteacher-vs-teacher SW floor {floor:.4}");
    println!(" K   l1      SW      samples/s");
    for k in [1, 2, 4, 6, 8, 12] {
        let l1 = l1_fidelity(&state.model, &held, k)?;
        let out = generate_batched(&state.model, &a.noises, None, k, EVAL_BATCH)?;
        let sw = sliced_wasserstein(&out, &widen(&b.images), spec.dim(), 64, 0)?;
        let tp = throughput(&state.model, k, 32, 5)?;
        println!("{k:>2}   {l1:.4}  {sw:.4}  {:.0}", tp.samples_per_second);
    }
    Ok(())
}
