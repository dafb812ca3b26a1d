//! Analytic diffusion teacher.
//!
//! The data distribution is an isotropic Gaussian mixture, so the denoiser
//! `D(x; sigma)` is an exact posterior mean. Samples come from integrating the
//! probability-flow ODE `dx/dt = (x - D(x; t)) / t` with Heun's method on a
//! Karras grid, which makes the noise-to-image map deterministic.

mod mixture;
mod pairs;
mod sampler;

pub use mixture::MixtureSpec;
pub use pairs::{
    generate_dataset, generate_pairs, generate_range, generate_record, read_header,
    read_pairs_header, record_rng, worker_count, PairDataset, PairRecord, PairsHeader, PAIRS_MAGIC,
    PAIRS_VERSION,
};
pub use sampler::{heun_sample, karras_sigma_steps, nfe_count, pf_ode_rhs, NoiseSchedule};

/// Analytic denoiser `D(x; sigma)` of `spec`.
pub fn gmm_denoiser(x: &[f64], sigma: f64, spec: &MixtureSpec) -> crate::Result<Vec<f64>> {
    spec.denoise(x, sigma)
}
