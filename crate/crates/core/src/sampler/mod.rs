//! Slice-wise reverse diffusion over a volume.
//!
//! Each axial slice is sampled independently, conditioned on its window of
//! neighbouring low-count slices. With the default configuration the chain
//! starts from the denoised prior noised to `t_prime`, mixes implicit and
//! ancestral steps, and shares its random draws across slices so that
//! neighbouring slices receive identical noise.

mod plan;
mod steps;

pub use plan::{plan_substeps, SamplerConfig, StepKind, SubStep};
pub use steps::{
    ddim_sigma, ddim_step, ddpm_step, interpolated_log_variance, mean_from_eps, sigma_from_v, transition,
    StepDiagnostics, LOG_VARIANCE_FLOOR,
};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::predictor::{DoseContext, Predictor, PredictorOutput};
use crate::rng;
use crate::schedule::NoiseSchedule;
use crate::volume::{extract_window, SliceWindow, Volume3D};

const STREAM_A: u64 = 0;
const STREAM_Z: u64 = 2;

/// Random draws consumed by one slice's reverse chain.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSet {
    pub eps_a: Grid,
    pub eps_b: Grid,
    /// One noise grid per sub-step.
    pub z: Vec<Grid>,
}

impl LatentSet {
    /// Draws for `slice`; `None` yields the shared set used when latents are fixed.
    ///
    /// The two starting grids come from `seed_a` and `seed_b` on the same
    /// stream, so equal seeds give identical branches.
    pub fn generate(config: &SamplerConfig, width: usize, height: usize, substeps: usize, slice: Option<usize>) -> Self {
        let id = |base: u64| slice.map_or(base, |s| 3 * (s as u64 + 1) + base);
        let start_id = |base| if config.fix_latents { base } else { id(base) };
        let mut ra = rng::stream(config.seed_a, start_id(STREAM_A));
        let mut rb = rng::stream(config.seed_b, start_id(STREAM_A));
        let z_id = if config.fix_step_noise { STREAM_Z } else { id(STREAM_Z) };
        let mut rz = rng::stream(config.seed_z, z_id);
        Self {
            eps_a: rng::normal_grid(&mut ra, width, height),
            eps_b: rng::normal_grid(&mut rb, width, height),
            z: (0..substeps).map(|_| rng::normal_grid(&mut rz, width, height)).collect(),
        }
    }
}

/// Outcome of sampling a volume.
#[derive(Debug, Clone)]
pub struct SampleOutcome {
    pub volume: Volume3D,
    /// DDIM direction terms whose squared coefficient went negative and was clamped.
    pub sqrt_clamps: usize,
}

/// Reverse chain for one slice, in model units.
///
/// `prior` is required when the configuration starts from the prior and is
/// ignored otherwise. Non-finite states are reported with the slice index
/// and 1-based sub-step.
#[allow(clippy::too_many_arguments)]
pub fn sample_slice(
    schedule: &NoiseSchedule,
    model: &dyn Predictor,
    window: &SliceWindow,
    prior: Option<&Grid>,
    dose: &DoseContext,
    config: &SamplerConfig,
    latents: &LatentSet,
    diagnostics: &StepDiagnostics,
) -> Result<Grid> {
    let slice = window.center();
    let start = config.start_step(schedule.steps());
    let plan = plan_substeps(config.num_steps, start, config.ddpm_every)?;
    crate::error::ensure!(
        latents.z.len() >= plan.len(),
        Argument,
        "latent set holds {} noise grids, plan needs {}",
        latents.z.len(),
        plan.len()
    );
    let (mut x_a, x_b) = if config.use_prior {
        let prior = prior.ok_or_else(|| Error::Argument("sampling from the prior needs a prior slice".into()))?;
        (
            schedule.q_sample(prior, start, &latents.eps_a)?,
            schedule.q_sample(prior, start, &latents.eps_b)?,
        )
    } else {
        (latents.eps_a.clone(), latents.eps_b.clone())
    };
    let fail = |substep: usize, message: String| Error::Sampling {
        slice,
        substep,
        message,
    };

    for (i, step) in plan.iter().enumerate() {
        let z = &latents.z[i];
        let advance = |x: &Grid| -> Result<Grid> {
            let out = model.predict(x, window, step.t, dose)?;
            apply_step(schedule, x, &out, step, config.eta, z, diagnostics)
        };
        let mut next = advance(&x_a)?;
        if i == 0 && config.dual_noise {
            let other = advance(&x_b)?;
            next = next.zip_map(&other, |a, b| (a + b) / 2.0)?;
        }
        if !next.is_finite() {
            return Err(fail(
                step.index,
                format!("non-finite state after step t={} -> {}", step.t, step.t_prev),
            ));
        }
        x_a = next;
    }
    Ok(x_a)
}

fn apply_step(
    schedule: &NoiseSchedule,
    x: &Grid,
    out: &PredictorOutput,
    step: &SubStep,
    eta: f64,
    z: &Grid,
    diagnostics: &StepDiagnostics,
) -> Result<Grid> {
    match step.kind {
        StepKind::Ddpm => ddpm_step(schedule, x, out, step.t, step.t_prev, z),
        StepKind::Ddim => ddim_step(schedule, x, out, step.t, step.t_prev, eta, z, diagnostics),
    }
}

/// Sample every slice of `noisy`.
///
/// The output carries the metadata of `noisy`, is clamped at zero and is
/// converted back from model units.
pub fn sample_volume(
    schedule: &NoiseSchedule,
    model: &dyn Predictor,
    noisy: &Volume3D,
    prior: Option<&Volume3D>,
    dose: &DoseContext,
    config: &SamplerConfig,
) -> Result<SampleOutcome> {
    config.validate(schedule.steps())?;
    if config.use_prior {
        let prior = prior.ok_or_else(|| Error::Argument("sampling from the prior needs a prior volume".into()))?;
        noisy.check_shape(prior, "prior")?;
    }
    let scale = model.data_scale();
    crate::error::ensure!(
        scale.is_finite() && scale > 0.0,
        Argument,
        "model data scale must be positive, got {scale}"
    );
    let (w, h) = (noisy.width(), noisy.height());
    let n = model.window_slices();
    let shared = (config.fix_latents && config.fix_step_noise)
        .then(|| LatentSet::generate(config, w, h, config.num_steps, None));
    let diagnostics = StepDiagnostics::default();

    let slices: Vec<Vec<f32>> = (0..noisy.slices())
        .into_par_iter()
        .map(|s| {
            let window = extract_window(noisy, s, n)?.scaled(scale);
            let prior_slice = prior.filter(|_| config.use_prior).map(|p| p.slice_grid(s, scale));
            let own;
            let latents = match &shared {
                Some(l) => l,
                None => {
                    own = LatentSet::generate(config, w, h, config.num_steps, Some(s));
                    &own
                }
            };
            let x = sample_slice(
                schedule,
                model,
                &window,
                prior_slice.as_ref(),
                dose,
                config,
                latents,
                &diagnostics,
            )?;
            Ok(x.as_slice().iter().map(|v| (v / scale).max(0.0) as f32).collect())
        })
        .collect::<Result<_>>()?;

    Ok(SampleOutcome {
        volume: noisy.with_data(slices.concat())?,
        sqrt_clamps: diagnostics.sqrt_clamps(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::{CountingPredictor, GaussianOracle};
    use crate::volume::DEFAULT_VOXEL_SIZE_MM;
    use std::sync::Arc;

    fn flat(width: usize, slices: usize, value: f32) -> Volume3D {
        Volume3D::new(
            width,
            width,
            slices,
            vec![value; width * width * slices],
            DEFAULT_VOXEL_SIZE_MM,
            1e6,
            0.1,
        )
        .unwrap()
    }

    fn oracle() -> GaussianOracle {
        GaussianOracle::new(Arc::new(NoiseSchedule::default()), 0.5, 0.2)
    }

    fn dose() -> DoseContext {
        DoseContext::new(1e6, 0.1).unwrap()
    }

    #[test]
    fn evaluation_count_per_slice() {
        let s = NoiseSchedule::default();
        let o = oracle();
        let counter = CountingPredictor::new(&o);
        let vol = flat(4, 3, 0.5);
        sample_volume(&s, &counter, &vol, Some(&vol), &dose(), &SamplerConfig::default()).unwrap();
        assert!(counter.counts().values().all(|&c| c == 26));
        assert_eq!(counter.counts().len(), 3);

        let counter = CountingPredictor::new(&o);
        let single = SamplerConfig {
            dual_noise: false,
            ..SamplerConfig::default()
        };
        sample_volume(&s, &counter, &vol, Some(&vol), &dose(), &single).unwrap();
        assert!(counter.counts().values().all(|&c| c == 25));
    }

    #[test]
    fn equal_branch_seeds_match_single_branch() {
        let s = NoiseSchedule::default();
        let vol = flat(4, 2, 0.4);
        let dual = SamplerConfig {
            seed_b: 0,
            ..SamplerConfig::default()
        };
        let single = SamplerConfig {
            dual_noise: false,
            ..dual.clone()
        };
        let a = sample_volume(&s, &oracle(), &vol, Some(&vol), &dose(), &dual).unwrap();
        let b = sample_volume(&s, &oracle(), &vol, Some(&vol), &dose(), &single).unwrap();
        assert_eq!(a.volume.data(), b.volume.data());
    }

    #[test]
    fn fixed_latents_give_identical_slices() {
        let s = NoiseSchedule::default();
        let vol = flat(4, 3, 0.5);
        let out = sample_volume(&s, &oracle(), &vol, Some(&vol), &dose(), &SamplerConfig::default()).unwrap();
        assert_eq!(out.volume.slice_data(0), out.volume.slice_data(2));
        let free = SamplerConfig {
            fix_latents: false,
            fix_step_noise: false,
            ..SamplerConfig::default()
        };
        let out = sample_volume(&s, &oracle(), &vol, Some(&vol), &dose(), &free).unwrap();
        assert_ne!(out.volume.slice_data(0), out.volume.slice_data(2));
    }

    #[test]
    fn output_keeps_metadata_and_is_nonnegative() {
        let s = NoiseSchedule::default();
        let o = GaussianOracle::new(Arc::new(NoiseSchedule::default()), 0.0, 1.0);
        let vol = flat(4, 2, 0.0);
        let out = sample_volume(&s, &o, &vol, Some(&vol), &dose(), &SamplerConfig::default()).unwrap();
        assert!(out.volume.data().iter().all(|&v| v >= 0.0));
        assert_eq!(out.volume.dose(), vol.dose());
        assert_eq!(out.volume.voxel_size_mm, vol.voxel_size_mm);
    }

    #[test]
    fn missing_prior_is_rejected() {
        let s = NoiseSchedule::default();
        let vol = flat(4, 2, 0.5);
        let err = sample_volume(&s, &oracle(), &vol, None, &dose(), &SamplerConfig::default()).unwrap_err();
        assert_eq!(err.kind(), "argument");
        let no_prior = SamplerConfig {
            use_prior: false,
            ..SamplerConfig::default()
        };
        assert!(sample_volume(&s, &oracle(), &vol, None, &dose(), &no_prior).is_ok());
    }

    struct Exploding;

    impl Predictor for Exploding {
        fn window_slices(&self) -> usize {
            1
        }

        fn predict(&self, x_t: &Grid, _: &SliceWindow, t: usize, _: &DoseContext) -> Result<PredictorOutput> {
            let value = if t <= 300 { f64::NAN } else { 0.0 };
            Ok(PredictorOutput {
                eps: Grid::filled(x_t.width(), x_t.height(), value),
                v: Grid::zeros(x_t.width(), x_t.height()),
            })
        }
    }

    #[test]
    fn non_finite_state_names_slice_and_substep() {
        let s = NoiseSchedule::default();
        let vol = flat(4, 3, 0.5);
        match sample_volume(&s, &Exploding, &vol, Some(&vol), &dose(), &SamplerConfig::default()) {
            Err(Error::Sampling { substep, slice, .. }) => {
                assert_eq!(substep, 11);
                assert!(slice < 3);
            }
            other => panic!("expected a sampling error, got {other:?}"),
        }
    }
}
