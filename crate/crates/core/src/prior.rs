//! Denoised-prior providers.
//!
//! The sampler starts its reverse chain from a denoised estimate of the
//! low-count volume. Two backends provide it: a small dose-conditioned
//! network that regresses the full-count slice from the degraded window, and
//! a deterministic Gaussian blur.

use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;

use crate::error::{ensure, Error, Result};
use crate::grid::Grid;
use crate::predictor::checkpoint::{Checkpoint, CheckpointHeader, ModelKind};
use crate::predictor::{Conditioning, DoseContext, TinyUNet, UNetConfig, EMBED_DIM};
use crate::rng;
use crate::trainer::{sample_training_pair, Adam, PairedDataset, TrainConfig, TrainingPair};
use crate::volume::{extract_window, SliceWindow, Volume3D};

pub const PRIOR_LOG_HEADER: &str = "step,mse,wall_ms";

/// Default blur width: twice the largest voxel dimension.
pub fn default_sigma_mm(vol: &Volume3D) -> f64 {
    2.0 * vol.voxel_size_mm.iter().cloned().fold(0.0, f64::max)
}

// -------------------------------------------------------------- smoothing

/// Index into `0..n` after half-sample symmetric reflection.
fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|k| (-0.5 * (k as f64 / sigma).powi(2)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Convolve along one axis of a `[slices][height][width]` array.
fn blur_axis(data: &[f64], dims: [usize; 3], axis: usize, kernel: &[f64]) -> Vec<f64> {
    let [w, h, s] = dims;
    let (len, stride) = match axis {
        0 => (w, 1),
        1 => (h, w),
        _ => (s, w * h),
    };
    let radius = (kernel.len() / 2) as isize;
    let mut out = vec![0.0; data.len()];
    for (idx, o) in out.iter_mut().enumerate() {
        let pos = (idx / stride) % len;
        let base = idx - pos * stride;
        *o = kernel
            .iter()
            .enumerate()
            .map(|(k, wk)| wk * data[base + reflect(pos as isize + k as isize - radius, len) * stride])
            .sum();
    }
    out
}

/// Separable Gaussian blur with per-axis widths in millimetres.
///
/// The boundary is a half-sample reflection, which keeps constant volumes
/// unchanged and conserves total activity.
pub fn smooth_prior(vol: &Volume3D, sigma_mm: f64) -> Result<Volume3D> {
    ensure!(
        sigma_mm.is_finite() && sigma_mm > 0.0,
        Argument,
        "smoothing sigma must be positive, got {sigma_mm}"
    );
    let dims = [vol.width(), vol.height(), vol.slices()];
    let mut data: Vec<f64> = vol.data().iter().map(|&v| v as f64).collect();
    for axis in 0..3 {
        let kernel = gaussian_kernel(sigma_mm / vol.voxel_size_mm[axis]);
        data = blur_axis(&data, dims, axis, &kernel);
    }
    vol.with_data(data.into_iter().map(|v| v.max(0.0) as f32).collect())
}

// ---------------------------------------------------------- trained prior

/// Residual denoiser: predicts a correction to the window's center slice.
#[derive(Debug, Clone)]
pub struct PriorNet {
    pub net: TinyUNet,
    pub conditioning: Conditioning,
    pub data_scale: f64,
}

impl PriorNet {
    pub fn new(conditioning: Conditioning, base_width: usize, data_scale: f64, seed: u64) -> Self {
        let config = UNetConfig::new(conditioning.n_slices, 1, base_width, EMBED_DIM);
        Self {
            net: TinyUNet::new(config, seed),
            conditioning,
            data_scale,
        }
    }

    fn encoding(&self, dose: &DoseContext) -> Vec<f64> {
        self.conditioning.encode(0.0, dose, self.net.config().emb_dim)
    }

    fn check(&self, window: &SliceWindow) -> Result<()> {
        ensure!(
            window.n() == self.conditioning.n_slices,
            Argument,
            "window has {} slices, prior expects {}",
            window.n(),
            self.conditioning.n_slices
        );
        Ok(())
    }

    /// Denoised center slice of a window already in model units.
    pub fn predict(&self, window: &SliceWindow, dose: &DoseContext) -> Result<Grid> {
        self.check(window)?;
        let out = self
            .net
            .forward(window.stack(), window.height(), window.width(), &self.encoding(dose))?;
        let data = window.center_channel().iter().zip(&out).map(|(c, r)| c + r).collect();
        Grid::from_vec(window.width(), window.height(), data)
    }

    /// Mean squared error against `target` and its parameter gradient.
    fn loss_gradient(&self, window: &SliceWindow, dose: &DoseContext, target: &Grid) -> Result<(f64, Vec<f64>)> {
        self.check(window)?;
        let trace = self
            .net
            .forward_trace(window.stack(), window.height(), window.width(), &self.encoding(dose))?;
        let n = target.len() as f64;
        let mut mse = 0.0;
        let d_out: Vec<f64> = window
            .center_channel()
            .iter()
            .zip(&trace.output)
            .zip(target.as_slice())
            .map(|((c, r), y)| {
                let e = c + r - y;
                mse += e * e;
                2.0 * e / n
            })
            .collect();
        let mut grads = vec![0.0; self.net.num_params()];
        self.net.backward(&trace, &d_out, &mut grads);
        Ok((mse / n, grads))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            kind: ModelKind::Prior,
            header: CheckpointHeader {
                unet: *self.net.config(),
                conditioning: self.conditioning,
                data_scale: self.data_scale,
            },
            params: self.net.params().to_vec(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ensure!(
            ckpt.kind == ModelKind::Prior,
            Format,
            "checkpoint holds a {:?}, not a prior denoiser",
            ckpt.kind
        );
        Ok(Self {
            net: ckpt.network()?,
            conditioning: ckpt.header.conditioning,
            data_scale: ckpt.header.data_scale,
        })
    }
}

/// Supervised regression of the full-count slice; uses `batch_size`, `steps`,
/// `lr`, `n_slices`, `seed`, `base_width` and the conditioning fields of `config`.
pub fn train_denoiser(dataset: &PairedDataset, config: &TrainConfig, mut log: Option<&mut dyn Write>) -> Result<PriorNet> {
    config.validate()?;
    ensure!(!dataset.is_empty(), Config, "training dataset is empty");
    let conditioning = Conditioning {
        n_slices: config.n_slices,
        mode: config.embedding,
        use_dose: config.use_dose,
    };
    let mut model = PriorNet::new(conditioning, config.base_width, dataset.data_scale()?, config.seed);
    let mut optimizer = Adam::new(model.net.num_params(), config.lr);
    let mut r = rng::stream(config.seed, 2);
    if let Some(w) = log.as_deref_mut() {
        writeln!(w, "{PRIOR_LOG_HEADER}")?;
    }
    let start = Instant::now();
    for step in 1..=config.steps {
        let batch = (0..config.batch_size)
            .map(|_| sample_training_pair(dataset, config.n_slices, &mut r))
            .collect::<Result<Vec<_>>>()?;
        let (mse, grads) = prior_batch_gradient(&model, &batch)?;
        if !mse.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Training {
                step,
                message: format!("non-finite prior loss {mse}"),
            });
        }
        if config.lr > 0.0 {
            optimizer.step(model.net.params_mut(), &grads);
        }
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{step},{mse},{}", start.elapsed().as_millis())?;
        }
    }
    Ok(model)
}

fn prior_batch_gradient(model: &PriorNet, batch: &[TrainingPair]) -> Result<(f64, Vec<f64>)> {
    let scale = model.data_scale;
    let items: Vec<(f64, Vec<f64>)> = batch
        .par_iter()
        .map(|p| model.loss_gradient(&p.window.scaled(scale), &p.dose, &p.x0.map(|v| v * scale)))
        .collect::<Result<_>>()?;
    let k = batch.len() as f64;
    let mut grads = vec![0.0; model.net.num_params()];
    let mut mse = 0.0;
    for (m, g) in &items {
        mse += m / k;
        for (a, b) in grads.iter_mut().zip(g) {
            *a += b / k;
        }
    }
    Ok((mse, grads))
}

// ---------------------------------------------------------------- backend

#[derive(Debug, Clone)]
pub enum PriorBackend {
    Trained(PriorNet),
    Smoothing { sigma_mm: f64 },
}

impl PriorBackend {
    pub fn kind(&self) -> &'static str {
        match self {
            PriorBackend::Trained(_) => "trained",
            PriorBackend::Smoothing { .. } => "smoothing",
        }
    }
}

/// Apply a prior backend to a whole volume, conditioned on the volume's own dose.
pub fn denoise(backend: &PriorBackend, vol: &Volume3D) -> Result<Volume3D> {
    match backend {
        PriorBackend::Smoothing { sigma_mm } => smooth_prior(vol, *sigma_mm),
        PriorBackend::Trained(model) => {
            model.net.check_spatial(vol.height(), vol.width())?;
            let dose = DoseContext::from(vol.dose());
            let scale = model.data_scale;
            let slices: Vec<Vec<f32>> = (0..vol.slices())
                .into_par_iter()
                .map(|s| {
                    let window = extract_window(vol, s, model.conditioning.n_slices)?.scaled(scale);
                    let out = model.predict(&window, &dose)?;
                    Ok(out.as_slice().iter().map(|v| (v / scale).max(0.0) as f32).collect())
                })
                .collect::<Result<_>>()?;
            vol.with_data(slices.concat())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{degrade_counts, generate_phantom, PhantomSpec, DEFAULT_DOSE_BQ, DEFAULT_VOXEL_SIZE_MM};

    fn volume(w: usize, s: usize, data: Vec<f32>) -> Volume3D {
        Volume3D::new(w, w, s, data, DEFAULT_VOXEL_SIZE_MM, DEFAULT_DOSE_BQ, 1.0).unwrap()
    }

    #[test]
    fn reflection_indices() {
        let got: Vec<usize> = (-4..8).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 0, 1, 2, 3, 3, 2, 1, 0]);
        assert_eq!(reflect(-1, 1), 0);
    }

    #[test]
    fn constant_volume_is_unchanged() {
        let vol = volume(8, 5, vec![3.5; 320]);
        let out = smooth_prior(&vol, 6.0).unwrap();
        assert!(out.data().iter().all(|&v| ((v - 3.5) / 3.5).abs() < 1e-6));
    }

    #[test]
    fn total_activity_is_preserved() {
        let vol = generate_phantom(0, 32, 16, &PhantomSpec::default()).unwrap();
        let out = smooth_prior(&vol, default_sigma_mm(&vol)).unwrap();
        let rel = (out.total_activity() - vol.total_activity()) / vol.total_activity();
        assert!(rel.abs() < 1e-3, "relative change {rel}");
        assert_eq!(out.dose(), vol.dose());
    }

    #[test]
    fn impulse_response_peaks_at_impulse() {
        let (w, s) = (15, 9);
        let mut data = vec![0.0f32; w * w * s];
        let center = 4 * w * w + 7 * w + 7;
        data[center] = 1.0;
        let out = smooth_prior(&volume(w, s, data), 3.0).unwrap();
        let argmax = out
            .data()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(argmax, center);
        // the x profile through the impulse follows the normalized kernel
        let sigma_x = 3.0 / DEFAULT_VOXEL_SIZE_MM[0];
        let kx = gaussian_kernel(sigma_x);
        let row: Vec<f32> = (0..w).map(|x| out.data()[4 * w * w + 7 * w + x]).collect();
        let r = kx.len() / 2;
        for d in 1..=3 {
            let ratio = row[7 + d] / row[7];
            assert!((ratio as f64 - kx[r + d] / kx[r]).abs() < 1e-5);
            assert_eq!(row[7 + d], row[7 - d]);
        }
        assert!(smooth_prior(&volume(w, s, vec![0.0; w * w * s]), 0.0).is_err());
    }

    #[test]
    fn smoothing_backend_delegates() {
        let vol = generate_phantom(3, 16, 8, &PhantomSpec::default()).unwrap();
        let backend = PriorBackend::Smoothing { sigma_mm: 4.0 };
        assert_eq!(denoise(&backend, &vol).unwrap().data(), smooth_prior(&vol, 4.0).unwrap().data());
    }

    fn tiny_config(lr: f64) -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            steps: 4,
            lr,
            n_slices: 3,
            base_width: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn trained_backend_contracts() {
        let vol = generate_phantom(4, 16, 8, &PhantomSpec::default()).unwrap();
        let ds = PairedDataset::simulate(vec![vol.clone()], &[0.1], 1).unwrap();

        let frozen = train_denoiser(&ds, &tiny_config(0.0), None).unwrap();
        let init = PriorNet::new(frozen.conditioning, 4, frozen.data_scale, 0);
        assert_eq!(frozen.net.params(), init.net.params());

        let a = train_denoiser(&ds, &tiny_config(1e-3), None).unwrap();
        let b = train_denoiser(&ds, &tiny_config(1e-3), None).unwrap();
        assert_eq!(a.net.params(), b.net.params());

        let noisy = degrade_counts(&vol, 0.1, 9).unwrap();
        let backend = PriorBackend::Trained(a.clone());
        let out = denoise(&backend, &noisy).unwrap();
        assert!(out.same_shape(&noisy));
        assert_eq!(out.dose(), noisy.dose());
        assert!(out.data().iter().all(|&v| v >= 0.0));
        assert_eq!(out.data(), denoise(&backend, &noisy).unwrap().data());

        let odd = generate_phantom(4, 10, 8, &PhantomSpec::default()).unwrap();
        assert_eq!(denoise(&backend, &odd).unwrap_err().kind(), "argument");

        let bytes = a.to_checkpoint().to_bytes().unwrap();
        let back = PriorNet::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back.conditioning, a.conditioning);
        assert!(crate::predictor::EpsilonNet::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).is_err());
    }
}
