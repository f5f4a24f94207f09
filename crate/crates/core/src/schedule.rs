//! Diffusion-process mathematics: the variance schedule, forward noising and
//! the tractable reverse posterior `q(x_{t-1} | x_t, x_0)`.
//!
//! Step indices are 1-based (`1..=T`). Index 0 is the clean image, with the
//! convention `alpha_bar_0 = 1`, so `beta_tilde_1 = 0`.

use std::str::FromStr;

use crate::error::{ensure, Error, Result};
use crate::grid::Grid;

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Linear,
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            other => Err(Error::Config(format!("unknown schedule kind '{other}'"))),
        }
    }
}

/// Precomputed `beta`, `alpha`, `alpha_bar` and posterior-variance sequences.
///
/// All quantities are computed once at construction in double precision and
/// never change afterwards.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    beta_tildes: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        build_schedule(
            ScheduleKind::Linear,
            DEFAULT_STEPS,
            DEFAULT_BETA_START,
            DEFAULT_BETA_END,
        )
        .expect("default schedule is valid")
    }
}

pub fn build_schedule(
    kind: ScheduleKind,
    steps: usize,
    beta_start: f64,
    beta_end: f64,
) -> Result<NoiseSchedule> {
    ensure!(steps >= 1, Config, "schedule needs at least one step");
    ensure!(
        beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0,
        Config,
        "betas must satisfy 0 < beta_start <= beta_end < 1 (got {beta_start}, {beta_end})"
    );

    let betas: Vec<f64> = match kind {
        ScheduleKind::Linear => {
            if steps == 1 {
                vec![beta_start]
            } else {
                let span = beta_end - beta_start;
                (0..steps)
                    .map(|i| beta_start + span * i as f64 / (steps - 1) as f64)
                    .collect()
            }
        }
    };
    NoiseSchedule::from_betas(betas)
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        ensure!(!betas.is_empty(), Config, "empty beta sequence");
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Config(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let beta_tildes = (0..betas.len())
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bars[i - 1] };
                betas[i] * (1.0 - prev) / (1.0 - alpha_bars[i])
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
            beta_tildes,
        })
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `alpha_bar_t`, with `alpha_bar_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn beta_tilde(&self, t: usize) -> f64 {
        self.beta_tildes[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn beta_tildes(&self) -> &[f64] {
        &self.beta_tildes
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        ensure!(
            (1..=self.steps()).contains(&t),
            Argument,
            "step {t} outside 1..={}",
            self.steps()
        );
        Ok(())
    }

    /// One forward transition: `sqrt(1 - beta_t) x_prev + sqrt(beta_t) noise`.
    pub fn forward_step(&self, x_prev: &Grid, t: usize, noise: &Grid) -> Result<Grid> {
        self.check_step(t)?;
        let beta = self.beta(t);
        x_prev.axpby((1.0 - beta).sqrt(), noise, beta.sqrt())
    }

    /// Closed-form noising to step `t`:
    /// `sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`.
    pub fn q_sample(&self, x0: &Grid, t: usize, eps: &Grid) -> Result<Grid> {
        self.check_step(t)?;
        let ab = self.alpha_bar(t);
        x0.axpby(ab.sqrt(), eps, (1.0 - ab).sqrt())
    }

    /// Mean and variance of the true posterior `q(x_{t-1} | x_t, x0)`.
    pub fn posterior_params(&self, x0: &Grid, x_t: &Grid, t: usize) -> Result<(Grid, f64)> {
        self.check_step(t)?;
        let alpha = self.alpha(t);
        let ab = self.alpha_bar(t);
        let ab_prev = self.alpha_bar(t - 1);
        let denom = 1.0 - ab;
        let c_xt = alpha.sqrt() * (1.0 - ab_prev) / denom;
        let c_x0 = ab_prev.sqrt() * (1.0 - alpha) / denom;
        let mean = x_t.axpby(c_xt, x0, c_x0)?;
        Ok((mean, self.beta_tilde(t)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_degenerate() {
        let s = build_schedule(ScheduleKind::Linear, 1, 0.5, 0.5).unwrap();
        assert_eq!(s.betas(), &[0.5]);
        assert_eq!(s.alpha(1), 0.5);
        assert_eq!(s.alpha_bars(), &[0.5]);
        assert_eq!(s.beta_tildes(), &[0.0]);
    }

    #[test]
    fn two_step_products() {
        let s = build_schedule(ScheduleKind::Linear, 2, 0.1, 0.2).unwrap();
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2) - 0.72).abs() < 1e-15);
        assert!((s.beta_tilde(2) - 0.0714286).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(matches!(
            build_schedule(ScheduleKind::Linear, 0, 0.1, 0.2),
            Err(Error::Config(_))
        ));
        assert!(build_schedule(ScheduleKind::Linear, 10, 0.0, 0.2).is_err());
        assert!(build_schedule(ScheduleKind::Linear, 10, 0.3, 0.2).is_err());
        assert!(build_schedule(ScheduleKind::Linear, 10, 0.1, 1.0).is_err());
        assert!("cosine".parse::<ScheduleKind>().is_err());
    }

    #[test]
    fn default_schedule_invariants() {
        let s = NoiseSchedule::default();
        assert_eq!(s.steps(), 1000);
        assert_eq!(s.beta(1), 1e-4);
        assert!((s.beta(1000) - 0.02).abs() < 1e-15);
        let mut product = 1.0;
        for t in 1..=s.steps() {
            product *= 1.0 - s.beta(t);
            assert!(((s.alpha_bar(t) - product) / product).abs() < 1e-12);
            if t >= 2 {
                assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
                let ratio = s.alpha_bar(t) / s.alpha_bar(t - 1);
                assert!((ratio - s.alpha(t)).abs() < 1e-12);
                assert!(s.beta_tilde(t) > 0.0 && s.beta_tilde(t) <= s.beta(t));
            }
        }
        assert_eq!(s.beta_tilde(1), 0.0);
    }

    #[test]
    fn forward_step_examples() {
        let s = build_schedule(ScheduleKind::Linear, 2, 0.1, 0.2).unwrap();
        let x = Grid::from_vec(2, 1, vec![1.0, -3.0]).unwrap();
        let zero = Grid::zeros(2, 1);
        let out = s.forward_step(&x, 2, &zero).unwrap();
        assert_eq!(out.as_slice(), &[0.8f64.sqrt(), -3.0 * 0.8f64.sqrt()]);

        let ones = Grid::filled(2, 1, 1.0);
        let out = s.forward_step(&zero, 2, &ones).unwrap();
        for v in out.as_slice() {
            assert!((v - 0.4472136).abs() < 1e-7);
        }
        assert!(s
            .forward_step(&x, 1, &Grid::zeros(3, 1))
            .is_err_and(|e| matches!(e, Error::Argument(_))));
    }

    #[test]
    fn q_sample_examples() {
        let s = build_schedule(ScheduleKind::Linear, 2, 0.1, 0.2).unwrap();
        let ones = Grid::filled(3, 3, 1.0);
        let out = s.q_sample(&ones, 2, &ones).unwrap();
        for v in out.as_slice() {
            assert!((v - 1.377679).abs() < 1e-6);
        }
        let out = s.q_sample(&ones, 2, &Grid::zeros(3, 3)).unwrap();
        assert!((out.as_slice()[0] - 0.72f64.sqrt()).abs() < 1e-12);

        let tiny = build_schedule(ScheduleKind::Linear, 4, 1e-8, 1e-8).unwrap();
        let x0 = Grid::filled(2, 2, 2.5);
        assert!(tiny.q_sample(&x0, 1, &ones).is_err());
        let out = tiny.q_sample(&x0, 1, &Grid::filled(2, 2, 1.0)).unwrap();
        for v in out.as_slice() {
            assert!((v - 2.5).abs() < 1e-3);
        }
    }

    #[test]
    fn posterior_examples() {
        let s = build_schedule(ScheduleKind::Linear, 2, 0.1, 0.2).unwrap();
        let x0 = Grid::filled(1, 1, 1.0);
        let xt = Grid::filled(1, 1, 1.377679);
        let (mean, var) = s.posterior_params(&x0, &xt, 2).unwrap();
        assert!((mean.as_slice()[0] - 1.11772).abs() < 1e-4);
        assert!((var - 0.0714286).abs() < 1e-6);

        let x0 = Grid::from_vec(2, 1, vec![0.3, -1.2]).unwrap();
        let xt = Grid::from_vec(2, 1, vec![5.0, 7.0]).unwrap();
        let (mean, var) = s.posterior_params(&x0, &xt, 1).unwrap();
        assert_eq!(mean, x0);
        assert_eq!(var, 0.0);

        assert!(matches!(
            s.posterior_params(&x0, &xt, 0),
            Err(Error::Argument(_))
        ));
    }
}
