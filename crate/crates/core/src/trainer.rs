//! Training loop for the diffusion predictor.
//!
//! Each example pairs a full-count slice with the degraded window around it.
//! The slice is noised to a random step, the network predicts the noise and
//! the variance coefficient, and the parameters move along the gradient of
//! `loss_simple + lambda_vlb * loss_vlb` with Adam.

use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use rand::Rng as _;
use rayon::prelude::*;

use crate::error::{ensure, Error, Result};
use crate::grid::Grid;
use crate::predictor::{DoseContext, EmbeddingMode, EpsilonNet, PredictorOutput};
use crate::rng::{self, Rng};
use crate::sampler::{interpolated_log_variance, mean_from_eps};
use crate::schedule::NoiseSchedule;
use crate::volume::{degrade_counts, extract_window, SliceWindow, Volume3D, FRACTION_LADDER};

pub const LOG_HEADER: &str = "step,loss_simple,loss_vlb,total,wall_ms";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub lambda_vlb: f64,
    pub n_slices: usize,
    pub fractions: Vec<f64>,
    pub seed: u64,
    pub base_width: usize,
    pub embedding: EmbeddingMode,
    pub use_dose: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            steps: 500,
            lr: 1e-4,
            lambda_vlb: 1e-3,
            n_slices: 31,
            fractions: FRACTION_LADDER.to_vec(),
            seed: 0,
            base_width: 16,
            embedding: EmbeddingMode::Paper,
            use_dose: true,
        }
    }
}

impl TrainConfig {
    /// A zero learning rate is accepted and leaves the parameters untouched.
    pub fn validate(&self) -> Result<()> {
        ensure!(self.batch_size >= 1, Config, "batch size must be at least 1");
        ensure!(
            self.lr.is_finite() && self.lr >= 0.0,
            Config,
            "learning rate must be finite and non-negative, got {}",
            self.lr
        );
        ensure!(
            self.lambda_vlb.is_finite() && self.lambda_vlb >= 0.0,
            Config,
            "lambda_vlb must be non-negative, got {}",
            self.lambda_vlb
        );
        ensure!(
            self.n_slices % 2 == 1,
            Config,
            "n_slices must be odd, got {}",
            self.n_slices
        );
        ensure!(self.base_width >= 1, Config, "base width must be at least 1");
        ensure!(!self.fractions.is_empty(), Config, "fraction ladder is empty");
        for &f in &self.fractions {
            ensure!(
                f > 0.0 && f <= 1.0,
                Config,
                "fraction {f} outside (0, 1]"
            );
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub loss_simple: f64,
    pub loss_vlb: f64,
    pub total: f64,
}

impl LossReport {
    pub fn new(loss_simple: f64, loss_vlb: f64, lambda_vlb: f64) -> Self {
        Self {
            loss_simple,
            loss_vlb,
            total: loss_simple + lambda_vlb * loss_vlb,
        }
    }

    fn is_finite(&self) -> bool {
        self.loss_simple.is_finite() && self.loss_vlb.is_finite() && self.total.is_finite()
    }
}

// ---------------------------------------------------------------- dataset

/// A full-count volume and its degraded copies, one per fraction.
#[derive(Debug, Clone)]
pub struct VolumePair {
    pub full: Volume3D,
    pub degraded: Vec<Volume3D>,
}

#[derive(Debug, Clone, Default)]
pub struct PairedDataset {
    pairs: Vec<VolumePair>,
}

impl PairedDataset {
    pub fn new(pairs: Vec<VolumePair>) -> Result<Self> {
        for (i, p) in pairs.iter().enumerate() {
            ensure!(
                !p.degraded.is_empty(),
                Config,
                "pair {i} has no degraded volumes"
            );
            for d in &p.degraded {
                p.full.check_shape(d, "degraded volume")?;
            }
        }
        Ok(Self { pairs })
    }

    /// Degrade every volume at every fraction; volume `i` uses seed `seed + i`.
    pub fn simulate(full: Vec<Volume3D>, fractions: &[f64], seed: u64) -> Result<Self> {
        let pairs = full
            .into_iter()
            .enumerate()
            .map(|(i, vol)| {
                let degraded = fractions
                    .iter()
                    .enumerate()
                    .map(|(k, &f)| degrade_counts(&vol, f, seed.wrapping_add((i * fractions.len() + k) as u64)))
                    .collect::<Result<Vec<_>>>()?;
                Ok(VolumePair { full: vol, degraded })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(pairs)
    }

    pub fn pairs(&self) -> &[VolumePair] {
        &self.pairs
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Scale that maps the brightest full-count voxel to 1.
    pub fn data_scale(&self) -> Result<f64> {
        let peak = self
            .pairs
            .iter()
            .flat_map(|p| p.full.data())
            .fold(0.0f32, |m, &v| m.max(v));
        ensure!(peak > 0.0, Config, "training volumes are all zero");
        Ok(1.0 / peak as f64)
    }
}

/// One training example in activity units.
#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub x0: Grid,
    pub window: SliceWindow,
    pub dose: DoseContext,
}

/// Uniformly pick a pair, a degraded copy and a slice.
pub fn sample_training_pair(dataset: &PairedDataset, n_slices: usize, rng: &mut Rng) -> Result<TrainingPair> {
    ensure!(!dataset.is_empty(), Config, "training dataset is empty");
    let pair = &dataset.pairs[rng.random_range(0..dataset.pairs.len())];
    let noisy = &pair.degraded[rng.random_range(0..pair.degraded.len())];
    let s = rng.random_range(0..pair.full.slices());
    Ok(TrainingPair {
        x0: pair.full.slice_grid(s, 1.0),
        window: extract_window(noisy, s, n_slices)?,
        dose: DoseContext::from(noisy.dose()),
    })
}

// ------------------------------------------------------------------- loss

/// Loss value and its gradient with respect to the two output channels.
#[derive(Debug, Clone)]
pub struct LossGradient {
    pub report: LossReport,
    pub d_eps: Vec<f64>,
    pub d_v: Vec<f64>,
}

/// Loss of a prediction `out` made at `x_t = q_sample(x0, t, eps)`.
///
/// The variance term is the per-element KL divergence from the true
/// posterior to `Normal(mu_theta, sigma^2)` with `mu_theta` treated as a
/// constant. At `t = 1` the posterior variance is zero and the term is 0.
pub fn loss_terms(
    schedule: &NoiseSchedule,
    x0: &Grid,
    x_t: &Grid,
    t: usize,
    eps: &Grid,
    out: &PredictorOutput,
    lambda_vlb: f64,
) -> Result<LossGradient> {
    x0.check_shape(eps, "noise")?;
    x0.check_shape(&out.eps, "predicted noise")?;
    let n = x0.len() as f64;
    let mut simple = 0.0;
    let d_eps: Vec<f64> = out
        .eps
        .as_slice()
        .iter()
        .zip(eps.as_slice())
        .map(|(p, e)| {
            simple += (p - e) * (p - e);
            2.0 * (p - e) / n
        })
        .collect();
    simple /= n;

    let mut d_v = vec![0.0; x0.len()];
    let mut vlb = 0.0;
    let beta_tilde = schedule.beta_tilde(t);
    if t >= 2 {
        let beta = schedule.beta(t);
        let (mu_q, _) = schedule.posterior_params(x0, x_t, t)?;
        let mu = mean_from_eps(schedule, x_t, t, &out.eps)?;
        let log_bt = beta_tilde.ln();
        let dl_dv = beta.ln() - log_bt;
        for i in 0..x0.len() {
            let log_var = interpolated_log_variance(out.v.as_slice()[i], beta, beta_tilde);
            let d = mu_q.as_slice()[i] - mu.as_slice()[i];
            let ratio = (beta_tilde + d * d) * (-log_var).exp();
            vlb += 0.5 * (log_var - log_bt + ratio - 1.0);
            d_v[i] = lambda_vlb * 0.5 * (1.0 - ratio) * dl_dv / n;
        }
        vlb = (vlb / n).max(0.0);
    }
    Ok(LossGradient {
        report: LossReport::new(simple, vlb, lambda_vlb),
        d_eps,
        d_v,
    })
}

/// Noise `x0`, run the model and return the loss with output gradients.
#[allow(clippy::too_many_arguments)]
pub fn compute_loss(
    model: &EpsilonNet,
    schedule: &NoiseSchedule,
    x0: &Grid,
    window: &SliceWindow,
    dose: &DoseContext,
    t: usize,
    eps: &Grid,
    lambda_vlb: f64,
) -> Result<LossReport> {
    let x_t = schedule.q_sample(x0, t, eps)?;
    let (out, _) = model.forward_trace(&x_t, window, t, dose)?;
    Ok(loss_terms(schedule, x0, &x_t, t, eps, &out, lambda_vlb)?.report)
}

// -------------------------------------------------------------- optimizer

/// Bias-corrected Adam.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl Adam {
    pub fn new(num_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
        }
    }
}

// ----------------------------------------------------------------- step

/// A training example with its drawn step and noise.
#[derive(Debug, Clone)]
pub struct BatchItem {
    pub pair: TrainingPair,
    pub t: usize,
    pub eps: Grid,
}

/// Draw a batch: a pair, a uniform step and a standard-normal grid per item.
pub fn draw_batch(
    dataset: &PairedDataset,
    schedule: &NoiseSchedule,
    n_slices: usize,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<Vec<BatchItem>> {
    (0..batch_size)
        .map(|_| {
            let pair = sample_training_pair(dataset, n_slices, rng)?;
            let t = rng.random_range(1..=schedule.steps());
            let eps = rng::normal_grid(rng, pair.x0.width(), pair.x0.height());
            Ok(BatchItem { pair, t, eps })
        })
        .collect()
}

/// Batch-averaged loss and parameter gradient, in model units.
pub fn batch_gradient(
    model: &EpsilonNet,
    schedule: &NoiseSchedule,
    batch: &[BatchItem],
    lambda_vlb: f64,
) -> Result<(LossReport, Vec<f64>)> {
    ensure!(!batch.is_empty(), Argument, "empty training batch");
    let scale = model.data_scale;
    let per_item: Vec<(LossReport, Vec<f64>)> = batch
        .par_iter()
        .map(|item| {
            let x0 = item.pair.x0.map(|v| v * scale);
            let window = item.pair.window.scaled(scale);
            let x_t = schedule.q_sample(&x0, item.t, &item.eps)?;
            let (out, trace) = model.forward_trace(&x_t, &window, item.t, &item.pair.dose)?;
            let lg = loss_terms(schedule, &x0, &x_t, item.t, &item.eps, &out, lambda_vlb)?;
            let mut grads = vec![0.0; model.net.num_params()];
            model.backward(&trace, &lg.d_eps, &lg.d_v, &mut grads);
            Ok((lg.report, grads))
        })
        .collect::<Result<_>>()?;

    let k = batch.len() as f64;
    let mut grads = vec![0.0; model.net.num_params()];
    let (mut simple, mut vlb) = (0.0, 0.0);
    for (report, g) in &per_item {
        simple += report.loss_simple;
        vlb += report.loss_vlb;
        for (a, b) in grads.iter_mut().zip(g) {
            *a += b / k;
        }
    }
    Ok((LossReport::new(simple / k, vlb / k, lambda_vlb), grads))
}

/// One optimizer update; the report holds the pre-update losses.
pub fn train_step(
    model: &mut EpsilonNet,
    optimizer: &mut Adam,
    schedule: &NoiseSchedule,
    batch: &[BatchItem],
    lambda_vlb: f64,
    step: usize,
) -> Result<LossReport> {
    ensure!(
        optimizer.lr.is_finite() && optimizer.lr >= 0.0,
        Config,
        "learning rate must be finite and non-negative, got {}",
        optimizer.lr
    );
    let (report, grads) = batch_gradient(model, schedule, batch, lambda_vlb)?;
    if !report.is_finite() || grads.iter().any(|g| !g.is_finite()) {
        let ts: Vec<usize> = batch.iter().map(|b| b.t).collect();
        return Err(Error::Training {
            step,
            message: format!(
                "non-finite loss (simple={}, vlb={}) at t={ts:?}",
                report.loss_simple, report.loss_vlb
            ),
        });
    }
    if optimizer.lr > 0.0 {
        optimizer.step(model.net.params_mut(), &grads);
    }
    Ok(report)
}

// --------------------------------------------------------------- trainer

/// Owns the model, optimizer and random stream of one training run.
pub struct Trainer {
    pub model: EpsilonNet,
    pub optimizer: Adam,
    pub schedule: Arc<NoiseSchedule>,
    pub config: TrainConfig,
    rng: Rng,
    step: usize,
}

impl Trainer {
    /// Fresh model sized for `dataset`, initialized from `config.seed`.
    pub fn new(config: TrainConfig, schedule: Arc<NoiseSchedule>, dataset: &PairedDataset) -> Result<Self> {
        config.validate()?;
        ensure!(!dataset.is_empty(), Config, "training dataset is empty");
        let conditioning = crate::predictor::Conditioning {
            n_slices: config.n_slices,
            mode: config.embedding,
            use_dose: config.use_dose,
        };
        let model = EpsilonNet::new(conditioning, config.base_width, dataset.data_scale()?, config.seed);
        Self::with_model(config, schedule, model)
    }

    pub fn with_model(config: TrainConfig, schedule: Arc<NoiseSchedule>, model: EpsilonNet) -> Result<Self> {
        config.validate()?;
        ensure!(
            model.conditioning.n_slices == config.n_slices,
            Config,
            "model expects {} slices, config has {}",
            model.conditioning.n_slices,
            config.n_slices
        );
        Ok(Self {
            optimizer: Adam::new(model.net.num_params(), config.lr),
            rng: rng::stream(config.seed, 1),
            step: 0,
            model,
            schedule,
            config,
        })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn step(&mut self, dataset: &PairedDataset) -> Result<LossReport> {
        let batch = draw_batch(
            dataset,
            &self.schedule,
            self.config.n_slices,
            self.config.batch_size,
            &mut self.rng,
        )?;
        self.step += 1;
        train_step(
            &mut self.model,
            &mut self.optimizer,
            &self.schedule,
            &batch,
            self.config.lambda_vlb,
            self.step,
        )
    }

    /// Run the configured number of steps, writing CSV rows to `log` if given.
    pub fn run(&mut self, dataset: &PairedDataset, mut log: Option<&mut dyn Write>) -> Result<Vec<LossReport>> {
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{LOG_HEADER}")?;
        }
        let start = Instant::now();
        let mut reports = Vec::with_capacity(self.config.steps);
        for _ in 0..self.config.steps {
            let r = self.step(dataset)?;
            if let Some(w) = log.as_deref_mut() {
                writeln!(
                    w,
                    "{},{},{},{},{}",
                    self.step,
                    r.loss_simple,
                    r.loss_vlb,
                    r.total,
                    start.elapsed().as_millis()
                )?;
            }
            reports.push(r);
        }
        Ok(reports)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::{Conditioning, TinyUNet, UNetConfig};
    use crate::volume::{generate_phantom, PhantomSpec, DEFAULT_DOSE_BQ};

    fn small_dataset(slices: usize) -> PairedDataset {
        let vol = generate_phantom(1, 16, slices, &PhantomSpec::default()).unwrap();
        PairedDataset::simulate(vec![vol], &[0.1, 0.5], 7).unwrap()
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            steps: 3,
            lr: 1e-3,
            n_slices: 3,
            base_width: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { lr: -1e-4, ..TrainConfig::default() },
            TrainConfig { lambda_vlb: -1.0, ..TrainConfig::default() },
            TrainConfig { fractions: vec![0.5, 1.2], ..TrainConfig::default() },
            TrainConfig { fractions: vec![], ..TrainConfig::default() },
            TrainConfig { n_slices: 4, ..TrainConfig::default() },
        ];
        for c in bad {
            assert_eq!(c.validate().unwrap_err().kind(), "config", "{c:?}");
        }
        assert!(TrainConfig { lr: 0.0, ..TrainConfig::default() }.validate().is_ok());
    }

    #[test]
    fn singleton_dataset_always_returns_its_slice() {
        let vol = generate_phantom(2, 8, 8, &PhantomSpec::default()).unwrap();
        let one = Volume3D::new(8, 8, 1, vol.slice_data(3).to_vec(), vol.voxel_size_mm, DEFAULT_DOSE_BQ, 1.0).unwrap();
        let ds = PairedDataset::simulate(vec![one.clone()], &[0.25], 3).unwrap();
        let mut r = rng::stream(0, 0);
        for _ in 0..20 {
            let p = sample_training_pair(&ds, 1, &mut r).unwrap();
            assert_eq!(p.x0, one.slice_grid(0, 1.0));
            assert_eq!(p.window.indices(), &[0]);
            assert_eq!(p.dose.dose_bq, 0.25 * DEFAULT_DOSE_BQ);
            assert_eq!(p.dose.count_fraction, 0.25);
        }
        let empty = PairedDataset::default();
        assert_eq!(sample_training_pair(&empty, 1, &mut r).unwrap_err().kind(), "config");
    }

    #[test]
    fn slice_indices_are_uniform() {
        let ds = small_dataset(16);
        let mut r = rng::stream(9, 0);
        let mut counts = [0usize; 16];
        let draws = 100_000;
        for _ in 0..draws {
            counts[sample_training_pair(&ds, 1, &mut r).unwrap().window.center()] += 1;
        }
        let expected = draws as f64 / 16.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // upper 1% point of chi-square with 15 degrees of freedom
        assert!(chi2 < 30.578, "chi2 = {chi2}");
    }

    #[test]
    fn loss_examples() {
        let s = NoiseSchedule::default();
        let mut r = rng::stream(1, 0);
        let x0 = rng::normal_grid(&mut r, 8, 8);
        let eps = rng::normal_grid(&mut r, 8, 8);
        let x_t = s.q_sample(&x0, 300, &eps).unwrap();

        let perfect = PredictorOutput { eps: eps.clone(), v: Grid::zeros(8, 8) };
        let lg = loss_terms(&s, &x0, &x_t, 300, &eps, &perfect, 1e-3).unwrap();
        assert_eq!(lg.report.loss_simple, 0.0);
        assert!(lg.report.loss_vlb.abs() < 1e-9);

        let big = rng::normal_grid(&mut r, 400, 250);
        let zero = PredictorOutput { eps: Grid::zeros(400, 250), v: Grid::zeros(400, 250) };
        let lg = loss_terms(&s, &big, &big, 10, &big, &zero, 0.0).unwrap();
        let se = (2.0f64 / 1e5).sqrt();
        assert!((lg.report.loss_simple - 1.0).abs() < 3.0 * se);
        assert!(lg.d_v.iter().all(|&d| d == 0.0));

        let first = loss_terms(&s, &x0, &x_t, 1, &eps, &perfect, 1.0).unwrap();
        assert_eq!(first.report.loss_vlb, 0.0);
    }

    #[test]
    fn loss_is_permutation_invariant() {
        let s = NoiseSchedule::default();
        let mut r = rng::stream(2, 0);
        let x0 = Grid::zeros(4, 4);
        let eps = rng::normal_grid(&mut r, 4, 4);
        let pred = rng::normal_grid(&mut r, 4, 4);
        let report = |e: &Grid, p: &Grid| {
            let out = PredictorOutput { eps: p.clone(), v: Grid::zeros(4, 4) };
            loss_terms(&s, &x0, &x0, 5, e, &out, 0.0).unwrap().report.loss_simple
        };
        let perm: Vec<usize> = (0..16).map(|i| (i * 7 + 3) % 16).collect();
        let shuffle = |g: &Grid| Grid::from_vec(4, 4, perm.iter().map(|&i| g.as_slice()[i]).collect()).unwrap();
        assert!((report(&eps, &pred) - report(&shuffle(&eps), &shuffle(&pred))).abs() < 1e-15);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let ds = small_dataset(8);
        let config = TrainConfig { lr: 0.0, ..small_config() };
        let mut trainer = Trainer::new(config, Arc::new(NoiseSchedule::default()), &ds).unwrap();
        let before = trainer.model.net.params().to_vec();
        trainer.run(&ds, None).unwrap();
        assert_eq!(trainer.model.net.params(), &before[..]);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = small_dataset(8);
        let run = || {
            let mut t = Trainer::new(small_config(), Arc::new(NoiseSchedule::default()), &ds).unwrap();
            let mut log = Vec::new();
            let reports = t.run(&ds, Some(&mut log)).unwrap();
            (t.model.net.params().to_vec(), reports, log)
        };
        let (pa, ra, log) = run();
        let (pb, rb, _) = run();
        assert_eq!(pa, pb);
        assert_eq!(ra, rb);
        let text = String::from_utf8(log).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], LOG_HEADER);
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("1,"));
    }

    #[test]
    fn zero_lambda_leaves_variance_head_without_gradient() {
        let ds = small_dataset(8);
        let schedule = NoiseSchedule::default();
        let cond = Conditioning { n_slices: 3, ..Conditioning::default() };
        let mut model = EpsilonNet::new(cond, 4, ds.data_scale().unwrap(), 0);
        model.net = TinyUNet::random(*model.net.config(), 3);
        let mut r = rng::stream(4, 0);
        let batch = draw_batch(&ds, &schedule, 3, 3, &mut r).unwrap();
        let (_, grads) = batch_gradient(&model, &schedule, &batch, 0.0).unwrap();
        for i in model.net.head_channel_params(1) {
            assert_eq!(grads[i], 0.0);
        }
        let (_, grads) = batch_gradient(&model, &schedule, &batch, 1e-3).unwrap();
        assert!(model.net.head_channel_params(1).iter().any(|&i| grads[i] != 0.0));
    }

    #[test]
    fn total_loss_gradient_matches_finite_differences() {
        let schedule = NoiseSchedule::default();
        let ds = small_dataset(8);
        let cond = Conditioning { n_slices: 1, ..Conditioning::default() };
        let mut model = EpsilonNet::new(cond, 2, ds.data_scale().unwrap(), 0);
        model.net = TinyUNet::random(UNetConfig::new(2, 2, 2, crate::predictor::EMBED_DIM), 21);
        let mut r = rng::stream(5, 0);
        let mut batch = draw_batch(&ds, &schedule, 1, 2, &mut r).unwrap();
        batch[0].t = 40;
        batch[1].t = 700;
        let lambda = 0.5;
        let (_, grads) = batch_gradient(&model, &schedule, &batch, lambda).unwrap();

        // The variance term treats mu_theta as a constant, so the finite
        // difference freezes it at the unperturbed prediction.
        let frozen: Vec<Grid> = batch
            .iter()
            .map(|b| {
                let x0 = b.pair.x0.map(|v| v * model.data_scale);
                let x_t = schedule.q_sample(&x0, b.t, &b.eps).unwrap();
                model.forward_trace(&x_t, &b.pair.window.scaled(model.data_scale), b.t, &b.pair.dose).unwrap().0.eps
            })
            .collect();
        let loss = |m: &EpsilonNet| -> f64 {
            let mut total = 0.0;
            for (b, eps_frozen) in batch.iter().zip(&frozen) {
                let x0 = b.pair.x0.map(|v| v * m.data_scale);
                let x_t = schedule.q_sample(&x0, b.t, &b.eps).unwrap();
                let (out, _) = m.forward_trace(&x_t, &b.pair.window.scaled(m.data_scale), b.t, &b.pair.dose).unwrap();
                let simple = loss_terms(&schedule, &x0, &x_t, b.t, &b.eps, &out, 0.0).unwrap().report.loss_simple;
                let stopped = PredictorOutput { eps: eps_frozen.clone(), v: out.v };
                let vlb = loss_terms(&schedule, &x0, &x_t, b.t, &b.eps, &stopped, 0.0).unwrap().report.loss_vlb;
                total += simple + lambda * vlb;
            }
            total / batch.len() as f64
        };
        let shifted = |i: usize, d: f64| {
            let mut m = model.clone();
            m.net.params_mut()[i] += d;
            loss(&m)
        };
        let mut worst = 0.0f64;
        for i in 0..model.net.num_params() {
            let fd = crate::nn::five_point(|d| shifted(i, d), 1e-4);
            let denom = grads[i].abs().max(fd.abs()).max(1e-6);
            worst = worst.max((grads[i] - fd).abs() / denom);
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }
}
