//! Exact noise predictor for Gaussian data.
//!
//! If every pixel of `x0` is an independent `Normal(mu0, s0^2)` draw, the
//! posterior mean `E[eps | x_t]` is available in closed form, which makes
//! this an exact reference model for sampler tests.

use std::sync::Arc;

use super::{check_window, DoseContext, Predictor, PredictorOutput};
use crate::error::{ensure, Result};
use crate::grid::Grid;
use crate::schedule::NoiseSchedule;
use crate::volume::SliceWindow;

/// `E[eps | x_t]` for `x0 ~ Normal(mu0, s0^2)` per element; `v` is zero.
pub fn oracle_eps(schedule: &NoiseSchedule, x_t: &Grid, t: usize, mu0: f64, s0: f64) -> Result<PredictorOutput> {
    schedule.check_step(t)?;
    ensure!(s0 > 0.0, Argument, "oracle prior std must be positive, got {s0}");
    let ab = schedule.alpha_bar(t);
    let sab = ab.sqrt();
    let s2 = s0 * s0;
    let gain = sab * s2 / (ab * s2 + 1.0 - ab);
    let sigma = (1.0 - ab).sqrt();
    let eps = x_t.map(|x| {
        let m = mu0 + gain * (x - sab * mu0);
        (x - sab * m) / sigma
    });
    Ok(PredictorOutput {
        v: Grid::zeros(x_t.width(), x_t.height()),
        eps,
    })
}

/// [`oracle_eps`] behind the [`Predictor`] interface; ignores the window and dose.
#[derive(Debug, Clone)]
pub struct GaussianOracle {
    pub schedule: Arc<NoiseSchedule>,
    pub mu0: f64,
    pub s0: f64,
    pub n_slices: usize,
}

impl GaussianOracle {
    pub fn new(schedule: Arc<NoiseSchedule>, mu0: f64, s0: f64) -> Self {
        Self {
            schedule,
            mu0,
            s0,
            n_slices: 1,
        }
    }
}

impl Predictor for GaussianOracle {
    fn window_slices(&self) -> usize {
        self.n_slices
    }

    fn predict(
        &self,
        x_t: &Grid,
        window: &SliceWindow,
        t: usize,
        _dose: &DoseContext,
    ) -> Result<PredictorOutput> {
        check_window(x_t, window)?;
        oracle_eps(&self.schedule, x_t, t, self.mu0, self.s0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::schedule::{build_schedule, ScheduleKind};

    fn two_step() -> NoiseSchedule {
        build_schedule(ScheduleKind::Linear, 2, 0.1, 0.2).unwrap()
    }

    #[test]
    fn hand_evaluated_example() {
        let out = oracle_eps(&two_step(), &Grid::filled(1, 1, 1.0), 2, 0.0, 1.0).unwrap();
        assert!((out.eps.as_slice()[0] - 0.529150).abs() < 1e-6);
        assert_eq!(out.v.as_slice(), &[0.0]);
    }

    #[test]
    fn point_mass_limit() {
        let s = two_step();
        let x = Grid::from_vec(3, 1, vec![-1.0, 0.2, 2.0]).unwrap();
        let out = oracle_eps(&s, &x, 2, 0.7, 1e-9).unwrap();
        for (e, xv) in out.eps.as_slice().iter().zip(x.as_slice()) {
            let expected = (xv - 0.72f64.sqrt() * 0.7) / 0.28f64.sqrt();
            assert!((e - expected).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_at_scaled_mean() {
        let s = NoiseSchedule::default();
        for t in [1, 10, 500, 1000] {
            let x = Grid::filled(2, 2, s.alpha_bar(t).sqrt() * 0.4);
            let out = oracle_eps(&s, &x, t, 0.4, 0.3).unwrap();
            assert!(out.eps.as_slice().iter().all(|e| e.abs() < 1e-12));
        }
        assert!(oracle_eps(&s, &Grid::zeros(1, 1), 5, 0.0, 0.0).is_err());
    }

    #[test]
    fn matches_monte_carlo_regression() {
        // Regress eps on x_t over 1e6 joint draws; for Gaussian data the
        // conditional mean is linear, so the least-squares slope/intercept
        // give E[eps | x_t] exactly in the limit.
        let s = two_step();
        let (mu0, s0, t) = (0.0, 1.0, 2);
        let n = 1_000_000;
        let mut r = rng::stream(42, 0);
        let x0 = rng::normal_vec(&mut r, n);
        let eps = rng::normal_vec(&mut r, n);
        let ab = s.alpha_bar(t);
        let xt: Vec<f64> = x0
            .iter()
            .zip(&eps)
            .map(|(x, e)| ab.sqrt() * (mu0 + s0 * x) + (1.0 - ab).sqrt() * e)
            .collect();
        let mx = xt.iter().sum::<f64>() / n as f64;
        let me = eps.iter().sum::<f64>() / n as f64;
        let cov: f64 = xt.iter().zip(&eps).map(|(x, e)| (x - mx) * (e - me)).sum();
        let var: f64 = xt.iter().map(|x| (x - mx).powi(2)).sum();
        let slope = cov / var;
        let intercept = me - slope * mx;
        let predicted = intercept + slope * 1.0;
        let exact = oracle_eps(&s, &Grid::filled(1, 1, 1.0), t, mu0, s0).unwrap().eps.as_slice()[0];
        assert!((predicted - exact).abs() < 5e-3, "{predicted} vs {exact}");
    }
}
