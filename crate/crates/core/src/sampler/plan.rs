use crate::error::{ensure, Result};

/// Sampling options for the slice-wise volume sampler.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub num_steps: usize,
    /// Every `ddpm_every`-th sub-step is an ancestral (DDPM) step.
    pub ddpm_every: usize,
    /// Start step when starting from the noised prior.
    pub t_prime: usize,
    pub eta: f64,
    /// Share the starting noise across all slices.
    pub fix_latents: bool,
    /// Run a second branch from independent noise and average after the first step.
    pub dual_noise: bool,
    /// Share the per-step noise across all slices.
    pub fix_step_noise: bool,
    /// Start from the noised denoised prior; otherwise from pure noise at `T`.
    pub use_prior: bool,
    pub seed_a: u64,
    pub seed_b: u64,
    pub seed_z: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            num_steps: 25,
            ddpm_every: 5,
            t_prime: 500,
            eta: 0.0,
            fix_latents: true,
            dual_noise: true,
            fix_step_noise: true,
            use_prior: true,
            seed_a: 0,
            seed_b: 1,
            seed_z: 2,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, total_steps: usize) -> Result<()> {
        ensure!(
            self.num_steps >= 1 && self.num_steps <= self.t_prime && self.t_prime <= total_steps,
            Argument,
            "need 1 <= num_steps ({}) <= t_prime ({}) <= T ({total_steps})",
            self.num_steps,
            self.t_prime
        );
        ensure!(self.ddpm_every >= 1, Argument, "ddpm_every must be at least 1");
        ensure!(
            (0.0..=1.0).contains(&self.eta),
            Argument,
            "eta must lie in [0, 1], got {}",
            self.eta
        );
        Ok(())
    }

    /// Step the reverse chain starts from.
    pub fn start_step(&self, total_steps: usize) -> usize {
        if self.use_prior {
            self.t_prime
        } else {
            total_steps
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepKind {
    Ddim,
    Ddpm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubStep {
    /// 1-based position from the start of sampling.
    pub index: usize,
    pub t: usize,
    pub t_prev: usize,
    pub kind: StepKind,
}

/// `num_steps` descending timesteps strided uniformly over `[1, start]`.
pub fn plan_substeps(num_steps: usize, start: usize, ddpm_every: usize) -> Result<Vec<SubStep>> {
    ensure!(
        num_steps >= 1 && num_steps <= start,
        Argument,
        "cannot take {num_steps} steps from t = {start}"
    );
    ensure!(ddpm_every >= 1, Argument, "ddpm_every must be at least 1");
    let ts: Vec<usize> = (0..num_steps).map(|i| start - i * start / num_steps).collect();
    Ok(ts
        .iter()
        .enumerate()
        .map(|(i, &t)| SubStep {
            index: i + 1,
            t,
            t_prev: ts.get(i + 1).copied().unwrap_or(0),
            kind: if (i + 1) % ddpm_every == 0 {
                StepKind::Ddpm
            } else {
                StepKind::Ddim
            },
        })
        .collect())
}
