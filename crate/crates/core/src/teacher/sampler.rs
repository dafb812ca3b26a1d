use super::mixture::MixtureSpec;
use crate::error::{Error, Result};

/// Karras noise grid parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    /// Integration steps `N`.
    pub n_steps: usize,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule {
            sigma_min: 0.002,
            sigma_max: 80.0,
            rho: 7.0,
            n_steps: 18,
        }
    }
}

impl NoiseSchedule {
    pub fn with_steps(n_steps: usize) -> Self {
        NoiseSchedule {
            n_steps,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max && self.sigma_max.is_finite())
        {
            return Err(Error::Config(format!(
                "need 0 < sigma_min < sigma_max, got {} and {}",
                self.sigma_min, self.sigma_max
            )));
        }
        if !(self.rho > 0.0) {
            return Err(Error::Config(format!(
                "rho must be positive, got {}",
                self.rho
            )));
        }
        if self.n_steps == 0 {
            return Err(Error::Config("the sampler needs at least one step".into()));
        }
        Ok(())
    }
}

/// `N + 1` decreasing noise levels from `sigma_max` to `sigma_min`, then 0.
pub fn karras_sigma_steps(s: &NoiseSchedule) -> Result<Vec<f64>> {
    s.validate()?;
    let n = s.n_steps;
    if n == 1 {
        return Ok(vec![s.sigma_max, 0.0]);
    }
    let (hi, lo) = (s.sigma_max.powf(1.0 / s.rho), s.sigma_min.powf(1.0 / s.rho));
    let mut out: Vec<f64> = (0..n)
        .map(|i| (hi + i as f64 / (n - 1) as f64 * (lo - hi)).powf(s.rho))
        .collect();
    out[0] = s.sigma_max;
    out[n - 1] = s.sigma_min;
    out.push(0.0);
    Ok(out)
}

/// Teacher evaluations for `n` Heun steps with an Euler last step.
pub fn nfe_count(n: usize) -> usize {
    2 * n.max(1) - 1
}

/// `dx/dt = (x - D(x; t)) / t`.
pub fn pf_ode_rhs(x: &[f64], t: f64, spec: &MixtureSpec) -> Result<Vec<f64>> {
    if !(t > 0.0) {
        return Err(Error::Domain(format!(
            "the flow is defined for t > 0, got {t}"
        )));
    }
    let d = spec.denoise(x, t)?;
    Ok(x.iter().zip(&d).map(|(&a, &b)| (a - b) / t).collect())
}

/// Integrates the flow from `sigma_max * e_unit` down to `t = 0` with Heun's
/// method; the last step, which ends at 0, is a plain Euler step.
pub fn heun_sample(
    e_unit: &[f64],
    spec: &MixtureSpec,
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    let sigmas = karras_sigma_steps(schedule)?;
    let mut x: Vec<f64> = e_unit.iter().map(|&e| e * schedule.sigma_max).collect();
    for (i, w) in sigmas.windows(2).enumerate() {
        let (t, t_next) = (w[0], w[1]);
        let h = t_next - t;
        let d = pf_ode_rhs(&x, t, spec)?;
        let euler: Vec<f64> = x.iter().zip(&d).map(|(&a, &b)| a + h * b).collect();
        x = if t_next > 0.0 {
            let d2 = pf_ode_rhs(&euler, t_next, spec)?;
            x.iter()
                .zip(d.iter().zip(&d2))
                .map(|(&a, (&b, &c))| a + 0.5 * h * (b + c))
                .collect()
        } else {
            euler
        };
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                iteration: i,
                detail: "non-finite sampler state".into(),
            });
        }
    }
    Ok(x)
}
