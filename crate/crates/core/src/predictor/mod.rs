//! Epsilon-and-variance predictors.
//!
//! A predictor sees the noisy slice `x_t`, the 2.5D conditioning window from
//! the low-count volume, the step index and the dose, and returns a per-pixel
//! noise estimate plus the variance interpolation coefficient `v`.

use std::collections::BTreeMap;
use std::sync::Mutex;

use crate::error::{ensure, Result};
use crate::grid::Grid;
use crate::volume::SliceWindow;

pub mod checkpoint;
pub mod embedding;
pub mod network;
pub mod oracle;

pub use embedding::{embed_condition, encode_condition, sinusoidal_encoding, EmbeddingMode, EMBED_DIM};
pub use network::{Conditioning, EpsilonNet, TinyUNet, UNetConfig};
pub use oracle::{oracle_eps, GaussianOracle};

/// Predicted noise and variance coefficient for one slice.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorOutput {
    pub eps: Grid,
    pub v: Grid,
}

/// Injected dose of the low-count input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DoseContext {
    pub dose_bq: f64,
    pub count_fraction: f64,
}

impl DoseContext {
    pub fn new(dose_bq: f64, count_fraction: f64) -> Result<Self> {
        ensure!(
            dose_bq.is_finite() && dose_bq > 0.0,
            Argument,
            "dose must be positive, got {dose_bq}"
        );
        ensure!(
            count_fraction > 0.0 && count_fraction <= 1.0,
            Argument,
            "count fraction must lie in (0, 1], got {count_fraction}"
        );
        Ok(Self {
            dose_bq,
            count_fraction,
        })
    }
}

impl From<crate::volume::DoseInfo> for DoseContext {
    fn from(d: crate::volume::DoseInfo) -> Self {
        Self {
            dose_bq: d.dose_bq,
            count_fraction: d.count_fraction,
        }
    }
}

/// One element of a batched prediction call.
#[derive(Debug, Clone, Copy)]
pub struct PredictRequest<'a> {
    pub x_t: &'a Grid,
    pub window: &'a SliceWindow,
    pub t: usize,
    pub dose: &'a DoseContext,
}

pub trait Predictor: Send + Sync {
    /// Width `n` of the conditioning window this predictor expects.
    fn window_slices(&self) -> usize;

    /// Multiplier from activity units to the predictor's working units.
    fn data_scale(&self) -> f64 {
        1.0
    }

    fn predict(
        &self,
        x_t: &Grid,
        window: &SliceWindow,
        t: usize,
        dose: &DoseContext,
    ) -> Result<PredictorOutput>;

    fn predict_batch(&self, batch: &[PredictRequest<'_>]) -> Result<Vec<PredictorOutput>> {
        batch
            .iter()
            .map(|r| self.predict(r.x_t, r.window, r.t, r.dose))
            .collect()
    }
}

pub(crate) fn check_window(x_t: &Grid, window: &SliceWindow) -> Result<()> {
    ensure!(
        x_t.width() == window.width() && x_t.height() == window.height(),
        Argument,
        "x_t is {}x{} but the window is {}x{}",
        x_t.width(),
        x_t.height(),
        window.width(),
        window.height()
    );
    Ok(())
}

/// Wraps a predictor and counts evaluations per window center slice.
pub struct CountingPredictor<'a> {
    inner: &'a dyn Predictor,
    counts: Mutex<BTreeMap<usize, usize>>,
}

impl<'a> CountingPredictor<'a> {
    pub fn new(inner: &'a dyn Predictor) -> Self {
        Self {
            inner,
            counts: Mutex::new(BTreeMap::new()),
        }
    }

    /// Evaluations keyed by the center slice of the conditioning window.
    pub fn counts(&self) -> BTreeMap<usize, usize> {
        self.counts.lock().expect("counter lock").clone()
    }

    pub fn total(&self) -> usize {
        self.counts().values().sum()
    }
}

impl Predictor for CountingPredictor<'_> {
    fn window_slices(&self) -> usize {
        self.inner.window_slices()
    }

    fn data_scale(&self) -> f64 {
        self.inner.data_scale()
    }

    fn predict(
        &self,
        x_t: &Grid,
        window: &SliceWindow,
        t: usize,
        dose: &DoseContext,
    ) -> Result<PredictorOutput> {
        *self
            .counts
            .lock()
            .expect("counter lock")
            .entry(window.center())
            .or_default() += 1;
        self.inner.predict(x_t, window, t, dose)
    }
}
