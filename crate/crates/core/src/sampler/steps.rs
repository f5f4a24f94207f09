//! Single reverse-process updates.

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::Result;
use crate::grid::Grid;
use crate::predictor::PredictorOutput;
use crate::schedule::NoiseSchedule;

/// Floor applied to `beta_tilde` before taking its logarithm (`beta_tilde_1 = 0`).
pub const LOG_VARIANCE_FLOOR: f64 = 1e-20;

/// Counters for numerical repairs made while sampling.
#[derive(Debug, Default)]
pub struct StepDiagnostics {
    sqrt_clamps: AtomicUsize,
}

impl StepDiagnostics {
    pub fn sqrt_clamps(&self) -> usize {
        self.sqrt_clamps.load(Ordering::Relaxed)
    }
}

/// `mu_theta`: the reverse mean implied by a noise estimate.
pub fn mean_from_eps(schedule: &NoiseSchedule, x_t: &Grid, t: usize, eps_hat: &Grid) -> Result<Grid> {
    schedule.check_step(t)?;
    let alpha = schedule.alpha(t);
    let coef = (1.0 - alpha) / (1.0 - schedule.alpha_bar(t)).sqrt();
    let inv = 1.0 / alpha.sqrt();
    x_t.zip_map(eps_hat, |x, e| inv * (x - coef * e))
}

/// Log-space interpolation between the posterior floor and `beta`.
pub fn interpolated_log_variance(v: f64, beta: f64, beta_tilde: f64) -> f64 {
    v * beta.ln() + (1.0 - v) * beta_tilde.max(LOG_VARIANCE_FLOOR).ln()
}

/// Learned standard deviation: `sigma^2 = exp(v log beta_t + (1 - v) log beta_tilde_t)`.
pub fn sigma_from_v(schedule: &NoiseSchedule, v: &Grid, t: usize) -> Result<Grid> {
    schedule.check_step(t)?;
    let (beta, beta_tilde) = (schedule.beta(t), schedule.beta_tilde(t));
    Ok(v.map(|v| (0.5 * interpolated_log_variance(v, beta, beta_tilde)).exp()))
}

/// `(alpha, beta, beta_tilde)` of the transition `t -> t_prev`.
///
/// For adjacent steps these are the schedule's own values. For a strided
/// jump they are the values of the respaced chain that keeps the marginals
/// at `t` and `t_prev` unchanged.
pub fn transition(schedule: &NoiseSchedule, t: usize, t_prev: usize) -> (f64, f64, f64) {
    if t_prev + 1 == t {
        return (schedule.alpha(t), schedule.beta(t), schedule.beta_tilde(t));
    }
    let ab = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar(t_prev);
    let alpha = ab / ab_prev;
    let beta = 1.0 - alpha;
    (alpha, beta, beta * (1.0 - ab_prev) / (1.0 - ab))
}

/// Ancestral step `x_{t_prev} = mu + sigma z`; the step to 0 adds no noise.
pub fn ddpm_step(
    schedule: &NoiseSchedule,
    x_t: &Grid,
    out: &PredictorOutput,
    t: usize,
    t_prev: usize,
    z: &Grid,
) -> Result<Grid> {
    check_pair(schedule, t, t_prev)?;
    x_t.check_shape(&out.eps, "ddpm step eps")?;
    x_t.check_shape(&out.v, "ddpm step v")?;
    x_t.check_shape(z, "ddpm step noise")?;
    let (alpha, beta, beta_tilde) = transition(schedule, t, t_prev);
    let coef = (1.0 - alpha) / (1.0 - schedule.alpha_bar(t)).sqrt();
    let inv = 1.0 / alpha.sqrt();
    let mean = x_t.zip_map(&out.eps, |x, e| inv * (x - coef * e))?;
    if t_prev == 0 {
        return Ok(mean);
    }
    let data = mean
        .as_slice()
        .iter()
        .zip(out.v.as_slice())
        .zip(z.as_slice())
        .map(|((m, v), z)| m + (0.5 * interpolated_log_variance(*v, beta, beta_tilde)).exp() * z)
        .collect();
    Grid::from_vec(x_t.width(), x_t.height(), data)
}

/// Implicit step through the predicted clean image.
#[allow(clippy::too_many_arguments)]
pub fn ddim_step(
    schedule: &NoiseSchedule,
    x_t: &Grid,
    out: &PredictorOutput,
    t: usize,
    t_prev: usize,
    eta: f64,
    z: &Grid,
    diagnostics: &StepDiagnostics,
) -> Result<Grid> {
    check_pair(schedule, t, t_prev)?;
    x_t.check_shape(&out.eps, "ddim step eps")?;
    x_t.check_shape(z, "ddim step noise")?;
    let ab = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar(t_prev);
    let sigma = ddim_sigma(schedule, t, t_prev, eta);
    let mut dir2 = 1.0 - ab_prev - sigma * sigma;
    if dir2 < 0.0 {
        diagnostics.sqrt_clamps.fetch_add(1, Ordering::Relaxed);
        dir2 = 0.0;
    }
    let (sab, s1ab) = (ab.sqrt(), (1.0 - ab).sqrt());
    let (sab_prev, dir) = (ab_prev.sqrt(), dir2.sqrt());
    let data = x_t
        .as_slice()
        .iter()
        .zip(out.eps.as_slice())
        .zip(z.as_slice())
        .map(|((x, e), z)| {
            let x0 = (x - s1ab * e) / sab;
            sab_prev * x0 + dir * e + sigma * z
        })
        .collect();
    Grid::from_vec(x_t.width(), x_t.height(), data)
}

/// DDIM noise scale for `t -> t_prev` at stochasticity `eta`.
pub fn ddim_sigma(schedule: &NoiseSchedule, t: usize, t_prev: usize, eta: f64) -> f64 {
    let ab = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar(t_prev);
    let a = ((1.0 - ab_prev) / (1.0 - ab)).max(0.0).sqrt();
    let b = (1.0 - ab / ab_prev).max(0.0).sqrt();
    eta * a * b
}

fn check_pair(schedule: &NoiseSchedule, t: usize, t_prev: usize) -> Result<()> {
    schedule.check_step(t)?;
    crate::error::ensure!(
        t_prev < t,
        Argument,
        "reverse step needs t_prev < t (got {t} -> {t_prev})"
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::oracle_eps;
    use crate::rng;
    use crate::schedule::{build_schedule, ScheduleKind};

    fn two_step() -> NoiseSchedule {
        build_schedule(ScheduleKind::Linear, 2, 0.1, 0.2).unwrap()
    }

    fn output(eps: Grid) -> PredictorOutput {
        let v = Grid::zeros(eps.width(), eps.height());
        PredictorOutput { eps, v }
    }

    #[test]
    fn mean_examples() {
        let s = two_step();
        let x = Grid::filled(1, 1, 1.377679);
        let m = mean_from_eps(&s, &x, 2, &Grid::filled(1, 1, 1.0)).unwrap();
        assert!((m.as_slice()[0] - 1.11772).abs() < 1e-4);
        let m = mean_from_eps(&s, &x, 2, &Grid::zeros(1, 1)).unwrap();
        assert_eq!(m.as_slice()[0], 1.377679 / 0.8f64.sqrt());
        assert!(mean_from_eps(&s, &x, 2, &Grid::zeros(2, 1)).is_err());
    }

    #[test]
    fn mean_matches_posterior_for_true_noise() {
        let s = NoiseSchedule::default();
        let mut r = rng::stream(3, 0);
        for t in [2, 7, 150, 999, 1000] {
            let x0 = rng::normal_grid(&mut r, 4, 4);
            let eps = rng::normal_grid(&mut r, 4, 4);
            let xt = s.q_sample(&x0, t, &eps).unwrap();
            let (mu_q, _) = s.posterior_params(&x0, &xt, t).unwrap();
            let mu = mean_from_eps(&s, &xt, t, &eps).unwrap();
            for (a, b) in mu.as_slice().iter().zip(mu_q.as_slice()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn sigma_endpoints_and_midpoint() {
        let s = two_step();
        let one = sigma_from_v(&s, &Grid::filled(1, 1, 1.0), 2).unwrap();
        assert!((one.as_slice()[0].powi(2) - 0.2).abs() < 1e-12);
        let zero = sigma_from_v(&s, &Grid::zeros(1, 1), 2).unwrap();
        assert!((zero.as_slice()[0].powi(2) - s.beta_tilde(2)).abs() < 1e-12);
        let half = sigma_from_v(&s, &Grid::filled(1, 1, 0.5), 2).unwrap();
        assert!((half.as_slice()[0].powi(2) - 0.119523).abs() < 1e-6);
        // t = 1 uses the floor instead of failing
        let first = sigma_from_v(&s, &Grid::zeros(1, 1), 1).unwrap();
        assert!(first.as_slice()[0].is_finite());
    }

    #[test]
    fn ddpm_step_noise_handling() {
        let s = NoiseSchedule::default();
        let mut r = rng::stream(4, 0);
        let x = rng::normal_grid(&mut r, 3, 3);
        let out = PredictorOutput {
            eps: rng::normal_grid(&mut r, 3, 3),
            v: rng::normal_grid(&mut r, 3, 3),
        };
        let z = rng::normal_grid(&mut r, 3, 3);
        let mu = mean_from_eps(&s, &x, 40, &out.eps).unwrap();
        assert_eq!(ddpm_step(&s, &x, &out, 40, 39, &Grid::zeros(3, 3)).unwrap(), mu);
        let noisy = ddpm_step(&s, &x, &out, 40, 39, &z).unwrap();
        let sigma = sigma_from_v(&s, &out.v, 40).unwrap();
        for i in 0..9 {
            let expected = mu.as_slice()[i] + sigma.as_slice()[i] * z.as_slice()[i];
            assert!((noisy.as_slice()[i] - expected).abs() < 1e-12);
        }
        let mu1 = mean_from_eps(&s, &x, 1, &out.eps).unwrap();
        assert_eq!(ddpm_step(&s, &x, &out, 1, 0, &z).unwrap(), mu1);
        // strided final step is noise-free as well
        let a = ddpm_step(&s, &x, &out, 20, 0, &z).unwrap();
        let b = ddpm_step(&s, &x, &out, 20, 0, &Grid::zeros(3, 3)).unwrap();
        assert_eq!(a, b);
        assert!(ddpm_step(&s, &x, &out, 5, 5, &z).is_err());
    }

    #[test]
    fn strided_ddpm_equals_ddim_with_unit_eta() {
        let s = NoiseSchedule::default();
        let mut r = rng::stream(5, 0);
        let x = rng::normal_grid(&mut r, 2, 2);
        let out = output(rng::normal_grid(&mut r, 2, 2));
        let z = rng::normal_grid(&mut r, 2, 2);
        let diag = StepDiagnostics::default();
        let a = ddpm_step(&s, &x, &out, 480, 460, &z).unwrap();
        let b = ddim_step(&s, &x, &out, 480, 460, 1.0, &z, &diag).unwrap();
        for (p, q) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((p - q).abs() < 1e-9, "{p} vs {q}");
        }
    }

    #[test]
    fn ddim_examples() {
        let s = NoiseSchedule::default();
        let diag = StepDiagnostics::default();
        let c = 0.8;
        let mut r = rng::stream(6, 0);
        let x = rng::normal_grid(&mut r, 4, 4);
        let out = oracle_eps(&s, &x, 500, c, 1e-12).unwrap();
        let z = rng::normal_grid(&mut r, 4, 4);
        let x0 = ddim_step(&s, &x, &out, 500, 0, 0.0, &z, &diag).unwrap();
        assert!(x0.as_slice().iter().all(|v| (v - c).abs() < 1e-9));

        let a = ddim_step(&s, &x, &out, 500, 480, 0.0, &z, &diag).unwrap();
        let b = ddim_step(&s, &x, &out, 500, 480, 0.0, &Grid::zeros(4, 4), &diag).unwrap();
        assert_eq!(a, b);
        assert_eq!(diag.sqrt_clamps(), 0);

        for t in 2..=s.steps() {
            let sigma = ddim_sigma(&s, t, t - 1, 1.0);
            assert!((sigma * sigma - s.beta_tilde(t)).abs() < 1e-9);
        }
    }
}
