//! Command-line surface.
//!
//! Every command writes its outputs plus a `manifest.json` holding the full
//! argument set, the seeds and SHA-256 digests of the files read and written.
//! Failures print one line, `error kind=<kind> message="<text>"`, to stderr
//! and exit nonzero.
//!
//! Options can also come from a flat config file (`--config path`) holding
//! `key = value` lines, where keys are long flag names. Later lines override
//! earlier ones and flags given on the command line override the file.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use clap::{Args, CommandFactory, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{ensure, Error, Result};
use crate::metrics::{evaluate, mask_black, write_metrics_csv, MetricsRow};
use crate::predictor::checkpoint::Checkpoint;
use crate::predictor::{DoseContext, EmbeddingMode, EpsilonNet};
use crate::prior::{default_sigma_mm, denoise, train_denoiser, PriorBackend, PriorNet};
use crate::sampler::{sample_volume, SamplerConfig};
use crate::schedule::NoiseSchedule;
use crate::trainer::{PairedDataset, TrainConfig, Trainer};
use crate::volume::{
    degrade_counts, generate_phantom, read_volume, slice_to_pgm, volume_paths, write_volume, PhantomSpec, Volume3D,
    FRACTION_LADDER,
};

#[derive(Debug, Parser)]
#[command(name = "ddpet3d", version, about = "Dose-aware conditional diffusion for 3D low-count PET denoising")]
#[command(args_override_self = true)]
pub struct Cli {
    /// Worker threads for slice-parallel work.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Flat `key = value` file of default options.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic activity phantom.
    Phantom(PhantomArgs),
    /// Simulate a reduced count level by Poisson thinning.
    Degrade(DegradeArgs),
    /// Train the diffusion predictor.
    Train(TrainArgs),
    /// Train the denoised-prior network.
    TrainPrior(TrainArgs),
    /// Denoise a low-count volume.
    Sample(SampleArgs),
    /// Compare a volume against a reference.
    Eval(EvalArgs),
    /// Sample and evaluate every ablation variant across a fraction ladder.
    Ablate(AblateArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Phantom(_) => "phantom",
            Command::Degrade(_) => "degrade",
            Command::Train(_) => "train",
            Command::TrainPrior(_) => "train-prior",
            Command::Sample(_) => "sample",
            Command::Eval(_) => "eval",
            Command::Ablate(_) => "ablate",
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PhantomArgs {
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 32)]
    pub width: usize,
    #[arg(long, default_value_t = 24)]
    pub slices: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "phantom")]
    pub name: String,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DegradeArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub fraction: f64,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "degraded")]
    pub name: String,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    /// Full-count training volumes (comma separated or repeated).
    #[arg(long, required = true, value_delimiter = ',')]
    pub input: Vec<PathBuf>,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 500)]
    pub steps: usize,
    #[arg(long, default_value_t = 4)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub lambda_vlb: f64,
    #[arg(long, default_value_t = 31)]
    pub n_slices: usize,
    #[arg(long, value_delimiter = ',', default_values_t = FRACTION_LADDER.to_vec())]
    pub fractions: Vec<f64>,
    #[arg(long, default_value_t = 16)]
    pub base_width: usize,
    /// Dose encoding: `paper` or `fraction`.
    #[arg(long, default_value = "paper")]
    pub embedding: String,
    /// Train without the dose term in the embedding.
    #[arg(long)]
    pub no_dose: bool,
    #[arg(long)]
    pub out: PathBuf,
}

impl TrainArgs {
    pub fn train_config(&self) -> Result<TrainConfig> {
        let config = TrainConfig {
            batch_size: self.batch_size,
            steps: self.steps,
            lr: self.lr,
            lambda_vlb: self.lambda_vlb,
            n_slices: self.n_slices,
            fractions: self.fractions.clone(),
            seed: self.seed,
            base_width: self.base_width,
            embedding: EmbeddingMode::from_str(&self.embedding)?,
            use_dose: !self.no_dose,
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SamplerArgs {
    #[arg(long)]
    pub seed: u64,
    /// Number of reverse sub-steps.
    #[arg(long, default_value_t = 25)]
    pub steps: usize,
    #[arg(long, default_value_t = 5)]
    pub ddpm_every: usize,
    #[arg(long, default_value_t = 500)]
    pub t_prime: usize,
    #[arg(long, default_value_t = 0.0)]
    pub eta: f64,
    /// Start from pure noise instead of the noised prior.
    #[arg(long)]
    pub no_prior: bool,
    /// Draw starting and step noise independently per slice.
    #[arg(long)]
    pub no_fix_eps: bool,
    /// Use a single starting noise variable.
    #[arg(long)]
    pub single_eps: bool,
}

impl SamplerArgs {
    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            num_steps: self.steps,
            ddpm_every: self.ddpm_every,
            t_prime: self.t_prime,
            eta: self.eta,
            fix_latents: !self.no_fix_eps,
            dual_noise: !self.single_eps,
            fix_step_noise: !self.no_fix_eps,
            use_prior: !self.no_prior,
            ..sampler_seeds(self.seed)
        }
    }
}

/// Sampler defaults with the three noise seeds derived from one seed.
pub fn sampler_seeds(seed: u64) -> SamplerConfig {
    SamplerConfig {
        seed_a: seed,
        seed_b: seed.wrapping_add(1),
        seed_z: seed.wrapping_add(2),
        ..SamplerConfig::default()
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SampleArgs {
    /// Low-count input volume.
    #[arg(long)]
    pub input: PathBuf,
    /// Diffusion predictor checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    /// Prior network checkpoint; without it the prior is a Gaussian blur.
    #[arg(long)]
    pub prior: Option<PathBuf>,
    /// Blur width for the smoothing prior (default: twice the largest voxel size).
    #[arg(long)]
    pub prior_sigma_mm: Option<f64>,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    /// Also write 8-bit graymaps of every output slice.
    #[arg(long)]
    pub pgm: bool,
    /// Ground truth used to window the graymaps.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "sampled")]
    pub name: String,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub reference: PathBuf,
    /// Volume to evaluate.
    #[arg(long)]
    pub input: PathBuf,
    /// Row label (default: the input file stem).
    #[arg(long)]
    pub volume_id: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct AblateArgs {
    /// Full-count ground-truth volume.
    #[arg(long)]
    pub reference: PathBuf,
    /// Directory with `model.ckpt`, optional `prior.ckpt` and variant checkpoints.
    #[arg(long)]
    pub model_dir: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = Variant::all().iter().map(|v| v.to_string()).collect::<Vec<_>>())]
    pub variants: Vec<String>,
    #[arg(long, value_delimiter = ',', default_values_t = FRACTION_LADDER.to_vec())]
    pub fractions: Vec<f64>,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[arg(long)]
    pub prior_sigma_mm: Option<f64>,
    /// Training steps for variant models missing from the model directory.
    #[arg(long, default_value_t = 500)]
    pub train_steps: usize,
    /// Number of phantoms in the corpus used to train missing variant models.
    #[arg(long, default_value_t = 4)]
    pub train_volumes: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub train_lr: f64,
    #[arg(long)]
    pub out: PathBuf,
}

// ----------------------------------------------------------------- variants

/// An ablation variant: a model choice plus sampler toggles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Variant {
    Default,
    NoPrior,
    NoFixEps,
    SingleEps,
    NoDose,
    Slices(usize),
}

impl Variant {
    pub fn all() -> Vec<Variant> {
        let mut v = vec![
            Variant::Default,
            Variant::NoPrior,
            Variant::NoFixEps,
            Variant::SingleEps,
            Variant::NoDose,
        ];
        v.extend([1, 9, 21, 31, 41].map(Variant::Slices));
        v
    }

    pub fn apply(&self, base: &SamplerConfig) -> SamplerConfig {
        let mut c = base.clone();
        match self {
            Variant::NoPrior => c.use_prior = false,
            Variant::NoFixEps => {
                c.fix_latents = false;
                c.fix_step_noise = false;
            }
            Variant::SingleEps => c.dual_noise = false,
            _ => {}
        }
        c
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Default => write!(f, "default"),
            Variant::NoPrior => write!(f, "no-prior"),
            Variant::NoFixEps => write!(f, "no-fix-eps"),
            Variant::SingleEps => write!(f, "single-eps"),
            Variant::NoDose => write!(f, "no-dose"),
            Variant::Slices(n) => write!(f, "n{n}"),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "default" => Variant::Default,
            "no-prior" => Variant::NoPrior,
            "no-fix-eps" => Variant::NoFixEps,
            "single-eps" => Variant::SingleEps,
            "no-dose" => Variant::NoDose,
            other => {
                let n = other
                    .strip_prefix('n')
                    .and_then(|n| n.parse::<usize>().ok())
                    .ok_or_else(|| Error::Config(format!("unknown ablation variant {other:?}")))?;
                ensure!(n % 2 == 1, Config, "variant {other}: window width must be odd");
                Variant::Slices(n)
            }
        })
    }
}

/// Models and prior shared by an ablation sweep.
pub struct AblationModels {
    pub base: EpsilonNet,
    pub no_dose: Option<EpsilonNet>,
    /// Models keyed by window width, for the `n` variants.
    pub by_slices: BTreeMap<usize, EpsilonNet>,
    pub prior: PriorBackend,
}

impl AblationModels {
    fn model_for(&self, variant: Variant) -> Result<&EpsilonNet> {
        match variant {
            Variant::NoDose => self
                .no_dose
                .as_ref()
                .ok_or_else(|| Error::Config("no model for the no-dose variant".into())),
            Variant::Slices(n) if n != self.base.conditioning.n_slices => self
                .by_slices
                .get(&n)
                .ok_or_else(|| Error::Config(format!("no model for window width {n}"))),
            _ => Ok(&self.base),
        }
    }
}

/// Degrade `reference` across `fractions`, then sample and evaluate each variant.
///
/// Rows labelled `input` hold the metrics of the degraded inputs themselves.
/// Fraction `k` of the ladder is degraded with seed `seed + k`.
pub fn run_ablation(
    schedule: &NoiseSchedule,
    reference: &Volume3D,
    models: &AblationModels,
    variants: &[Variant],
    fractions: &[f64],
    base: &SamplerConfig,
    seed: u64,
) -> Result<Vec<MetricsRow>> {
    for &v in variants {
        if let Variant::Slices(n) = v {
            ensure!(
                n < 2 * reference.slices(),
                Config,
                "variant {v} needs at least {} slices, volume has {}",
                n / 2 + 1,
                reference.slices()
            );
        }
        models.model_for(v)?;
    }
    let mut rows = Vec::new();
    for (k, &f) in fractions.iter().enumerate() {
        let noisy = degrade_counts(reference, f, seed.wrapping_add(k as u64))?;
        rows.push(MetricsRow {
            volume_id: "input".into(),
            fraction: f,
            report: evaluate(reference, &noisy)?,
        });
        let prior = denoise(&models.prior, &noisy)?;
        let dose = DoseContext::from(noisy.dose());
        for &v in variants {
            let config = v.apply(base);
            let model = models.model_for(v)?;
            let out = sample_volume(schedule, model, &noisy, Some(&prior), &dose, &config)?;
            rows.push(MetricsRow {
                volume_id: v.to_string(),
                fraction: f,
                report: evaluate(reference, &out.volume)?,
            });
        }
    }
    Ok(rows)
}

// ---------------------------------------------------------------- config

/// Parse `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("config line {}: expected `key = value`", i + 1)))?;
        let key = k.trim().replace('_', "-");
        ensure!(!key.is_empty(), Config, "config line {}: empty key", i + 1);
        out.retain(|(existing, _)| *existing != key);
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("config key {key}: expected a boolean, got {value:?}"))),
    }
}

/// Expand `--config` into flags placed right after the subcommand name.
fn expand_config(args: Vec<String>) -> Result<Vec<String>> {
    let mut path = None;
    for (i, a) in args.iter().enumerate() {
        if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        } else if a == "--config" {
            path = args.get(i + 1).cloned();
        }
    }
    let Some(path) = path else { return Ok(args) };
    let text = fs::read_to_string(&path).map_err(|e| Error::Config(format!("cannot read config {path}: {e}")))?;
    let entries = parse_config(&text)?;

    let command = Cli::command();
    let Some((pos, sub)) = args
        .iter()
        .enumerate()
        .skip(1)
        .find_map(|(i, a)| command.find_subcommand(a).map(|s| (i, s.clone())))
    else {
        return Ok(args);
    };
    let mut injected = Vec::new();
    for (key, value) in entries {
        ensure!(key != "config", Config, "config files cannot include other config files");
        let arg = sub
            .get_arguments()
            .chain(command.get_arguments())
            .find(|a| a.get_long() == Some(key.as_str()))
            .ok_or_else(|| Error::Config(format!("unknown config key {key:?} for command {}", sub.get_name())))?;
        if arg.get_action().takes_values() {
            injected.push(format!("--{key}={value}"));
        } else if parse_bool(&key, &value)? {
            injected.push(format!("--{key}"));
        }
    }
    let mut out = args[..=pos].to_vec();
    out.extend(injected);
    out.extend_from_slice(&args[pos + 1..]);
    Ok(out)
}

// --------------------------------------------------------------- manifest

#[derive(Debug, Serialize)]
struct FileDigest {
    path: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest {
    command: String,
    version: &'static str,
    digest: &'static str,
    threads: Option<usize>,
    config: serde_json::Value,
    seeds: BTreeMap<String, u64>,
    inputs: Vec<FileDigest>,
    outputs: Vec<FileDigest>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

fn digests(paths: &[PathBuf]) -> Result<Vec<FileDigest>> {
    paths
        .iter()
        .map(|p| {
            Ok(FileDigest {
                path: p.display().to_string(),
                sha256: sha256_file(p)?,
            })
        })
        .collect()
}

/// Both files of an on-disk volume.
fn volume_files(path: &Path) -> Vec<PathBuf> {
    let (h, r) = volume_paths(path);
    vec![h, r]
}

struct RunRecord {
    seeds: BTreeMap<String, u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl RunRecord {
    fn new() -> Self {
        Self {
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    fn seed(mut self, name: &str, value: u64) -> Self {
        self.seeds.insert(name.into(), value);
        self
    }
}

fn write_manifest(out: &Path, command: &str, threads: Option<usize>, config: &impl Serialize, rec: RunRecord) -> Result<()> {
    let manifest = Manifest {
        command: command.into(),
        version: env!("CARGO_PKG_VERSION"),
        digest: "sha256 over file bytes",
        threads,
        config: serde_json::to_value(config).map_err(|e| Error::Format(format!("config echo: {e}")))?,
        seeds: rec.seeds,
        inputs: digests(&rec.inputs)?,
        outputs: digests(&rec.outputs)?,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    fs::write(out.join("manifest.json"), text + "\n")?;
    Ok(())
}

// --------------------------------------------------------------- commands

fn prepare_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Argument(format!("cannot create output directory {}: {e}", dir.display())))
}

fn load_volume(path: &Path) -> Result<Volume3D> {
    let (header, _) = volume_paths(path);
    ensure!(header.exists(), Argument, "missing volume file {}", header.display());
    read_volume(path)
}

fn load_model(path: &Path) -> Result<EpsilonNet> {
    ensure!(path.exists(), Argument, "missing model checkpoint {}", path.display());
    EpsilonNet::from_checkpoint(&Checkpoint::load(path)?)
}

fn load_prior(path: &Path) -> Result<PriorNet> {
    ensure!(path.exists(), Argument, "missing prior checkpoint {}", path.display());
    PriorNet::from_checkpoint(&Checkpoint::load(path)?)
}

fn cmd_phantom(a: &PhantomArgs, threads: Option<usize>) -> Result<()> {
    prepare_out(&a.out)?;
    let vol = generate_phantom(a.seed, a.width, a.slices, &PhantomSpec::default())?;
    let stem = a.out.join(&a.name);
    write_volume(&vol, &stem)?;
    let mut rec = RunRecord::new().seed("phantom", a.seed);
    rec.outputs = volume_files(&stem);
    write_manifest(&a.out, "phantom", threads, a, rec)?;
    println!("phantom {}x{}x{} total_activity={:.6e}", vol.width(), vol.height(), vol.slices(), vol.total_activity());
    Ok(())
}

fn cmd_degrade(a: &DegradeArgs, threads: Option<usize>) -> Result<()> {
    let vol = load_volume(&a.input)?;
    let out = degrade_counts(&vol, a.fraction, a.seed)?;
    prepare_out(&a.out)?;
    let stem = a.out.join(&a.name);
    write_volume(&out, &stem)?;
    let mut rec = RunRecord::new().seed("degrade", a.seed);
    rec.inputs = volume_files(&a.input);
    rec.outputs = volume_files(&stem);
    write_manifest(&a.out, "degrade", threads, a, rec)?;
    println!("degraded fraction={} count_fraction={} dose_bq={:.6e}", a.fraction, out.count_fraction, out.dose_bq);
    Ok(())
}

fn training_set(a: &TrainArgs) -> Result<(PairedDataset, Vec<PathBuf>)> {
    let mut vols = Vec::new();
    let mut inputs = Vec::new();
    for p in &a.input {
        vols.push(load_volume(p)?);
        inputs.extend(volume_files(p));
    }
    Ok((PairedDataset::simulate(vols, &a.fractions, a.seed)?, inputs))
}

fn cmd_train(a: &TrainArgs, threads: Option<usize>) -> Result<()> {
    let config = a.train_config()?;
    let (dataset, inputs) = training_set(a)?;
    prepare_out(&a.out)?;
    let mut trainer = Trainer::new(config, Arc::new(NoiseSchedule::default()), &dataset)?;
    let log_path = a.out.join("train_log.csv");
    let mut log = fs::File::create(&log_path)?;
    let reports = trainer.run(&dataset, Some(&mut log))?;
    let ckpt = a.out.join("model.ckpt");
    trainer.model.to_checkpoint().save(&ckpt)?;
    let mut rec = RunRecord::new().seed("train", a.seed);
    rec.inputs = inputs;
    rec.outputs = vec![ckpt, log_path];
    write_manifest(&a.out, "train", threads, a, rec)?;
    if let (Some(first), Some(last)) = (reports.first(), reports.last()) {
        println!("trained steps={} loss_simple first={:.6} last={:.6}", reports.len(), first.loss_simple, last.loss_simple);
    }
    Ok(())
}

fn cmd_train_prior(a: &TrainArgs, threads: Option<usize>) -> Result<()> {
    let config = a.train_config()?;
    let (dataset, inputs) = training_set(a)?;
    prepare_out(&a.out)?;
    let log_path = a.out.join("prior_log.csv");
    let mut log = fs::File::create(&log_path)?;
    let model = train_denoiser(&dataset, &config, Some(&mut log))?;
    let ckpt = a.out.join("prior.ckpt");
    model.to_checkpoint().save(&ckpt)?;
    let mut rec = RunRecord::new().seed("train", a.seed);
    rec.inputs = inputs;
    rec.outputs = vec![ckpt, log_path];
    write_manifest(&a.out, "train-prior", threads, a, rec)?;
    println!("trained prior steps={}", config.steps);
    Ok(())
}

fn prior_backend(prior: Option<&Path>, sigma_mm: Option<f64>, vol: &Volume3D) -> Result<PriorBackend> {
    Ok(match prior {
        Some(p) => PriorBackend::Trained(load_prior(p)?),
        None => PriorBackend::Smoothing {
            sigma_mm: sigma_mm.unwrap_or_else(|| default_sigma_mm(vol)),
        },
    })
}

fn cmd_sample(a: &SampleArgs, threads: Option<usize>) -> Result<()> {
    let noisy = load_volume(&a.input)?;
    let model = load_model(&a.model)?;
    let config = a.sampler.sampler_config();
    let schedule = NoiseSchedule::default();
    config.validate(schedule.steps())?;
    let backend = prior_backend(a.prior.as_deref(), a.prior_sigma_mm, &noisy)?;
    let prior = if config.use_prior { Some(denoise(&backend, &noisy)?) } else { None };
    let dose = DoseContext::from(noisy.dose());
    let outcome = sample_volume(&schedule, &model, &noisy, prior.as_ref(), &dose, &config)?;

    prepare_out(&a.out)?;
    let stem = a.out.join(&a.name);
    write_volume(&outcome.volume, &stem)?;
    let mut rec = RunRecord::new()
        .seed("eps_a", config.seed_a)
        .seed("eps_b", config.seed_b)
        .seed("step_noise", config.seed_z);
    rec.inputs = volume_files(&a.input);
    rec.inputs.push(a.model.clone());
    if let Some(p) = &a.prior {
        rec.inputs.push(p.clone());
    }
    rec.outputs = volume_files(&stem);
    if let Some(prior) = &prior {
        let prior_stem = a.out.join(format!("{}_prior", a.name));
        write_volume(prior, &prior_stem)?;
        rec.outputs.extend(volume_files(&prior_stem));
    }
    if a.pgm {
        let hi = match &a.reference {
            Some(r) => {
                let reference = load_volume(r)?;
                let mask = mask_black(&reference)?;
                reference
                    .data()
                    .iter()
                    .zip(mask.as_slice())
                    .filter(|(_, k)| **k)
                    .fold(0.0f64, |m, (v, _)| m.max(*v as f64))
            }
            None => outcome.volume.data().iter().fold(0.0f64, |m, v| m.max(*v as f64)),
        };
        let dir = a.out.join(format!("{}_pgm", a.name));
        fs::create_dir_all(&dir)?;
        for z in 0..outcome.volume.slices() {
            let p = dir.join(format!("slice_{z:03}.pgm"));
            fs::write(&p, slice_to_pgm(&outcome.volume, z, 0.0, hi))?;
            rec.outputs.push(p);
        }
    }
    write_manifest(&a.out, "sample", threads, a, rec)?;
    let activity = match &prior {
        Some(p) => format!("{:.6}", crate::metrics::activity_error(p, &outcome.volume)?),
        None => "n/a".into(),
    };
    println!(
        "sampled slices={} activity_error_vs_prior={activity} sqrt_clamps={}",
        outcome.volume.slices(),
        outcome.sqrt_clamps
    );
    Ok(())
}

fn cmd_eval(a: &EvalArgs, threads: Option<usize>) -> Result<()> {
    let reference = load_volume(&a.reference)?;
    let test = load_volume(&a.input)?;
    let report = evaluate(&reference, &test)?;
    let id = a.volume_id.clone().unwrap_or_else(|| {
        let (h, _) = volume_paths(&a.input);
        h.file_name()
            .map(|n| n.to_string_lossy().trim_end_matches(".vol.json").to_string())
            .unwrap_or_else(|| "volume".into())
    });
    let rows = vec![MetricsRow {
        volume_id: id,
        fraction: test.count_fraction,
        report,
    }];
    prepare_out(&a.out)?;
    let csv = a.out.join("metrics.csv");
    let mut f = fs::File::create(&csv)?;
    write_metrics_csv(&mut f, &rows)?;
    let mut rec = RunRecord::new();
    rec.inputs = volume_files(&a.reference);
    rec.inputs.extend(volume_files(&a.input));
    rec.outputs = vec![csv];
    write_manifest(&a.out, "eval", threads, a, rec)?;
    let r = &rows[0].report;
    println!(
        "psnr_db={:.6} nrmse={:.6} ssim={:.6} z_tv={:.6} activity_ratio={:.6} mask_voxels={}",
        r.psnr, r.nrmse, r.ssim, r.z_tv, r.activity_ratio, r.mask_voxels
    );
    Ok(())
}

fn cmd_ablate(a: &AblateArgs, threads: Option<usize>) -> Result<()> {
    let variants = a
        .variants
        .iter()
        .map(|v| v.parse())
        .collect::<Result<Vec<Variant>>>()?;
    let reference = load_volume(&a.reference)?;
    let base_path = a.model_dir.join("model.ckpt");
    let base = load_model(&base_path)?;
    let mut rec = RunRecord::new().seed("ablate", a.sampler.seed);
    rec.inputs = volume_files(&a.reference);
    rec.inputs.push(base_path);
    let prior_path = a.model_dir.join("prior.ckpt");
    let prior = if prior_path.exists() {
        rec.inputs.push(prior_path.clone());
        PriorBackend::Trained(load_prior(&prior_path)?)
    } else {
        prior_backend(None, a.prior_sigma_mm, &reference)?
    };
    prepare_out(&a.out)?;

    // Variant models come from the model directory when present, otherwise
    // they are trained on a phantom corpus shaped like the reference.
    let mut corpus: Option<PairedDataset> = None;
    let mut variant_model = |file: &str, n_slices: usize, use_dose: bool| -> Result<EpsilonNet> {
        let path = a.model_dir.join(file);
        if path.exists() {
            rec.inputs.push(path.clone());
            return load_model(&path);
        }
        if corpus.is_none() {
            let vols = (0..a.train_volumes)
                .map(|i| {
                    generate_phantom(
                        a.sampler.seed.wrapping_add(1000 + i as u64),
                        reference.width(),
                        reference.slices(),
                        &PhantomSpec::default(),
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            corpus = Some(PairedDataset::simulate(vols, &a.fractions, a.sampler.seed)?);
        }
        let dataset = corpus.as_ref().expect("corpus built above");
        let config = TrainConfig {
            steps: a.train_steps,
            lr: a.train_lr,
            n_slices,
            use_dose,
            base_width: base.net.config().base_width,
            embedding: base.conditioning.mode,
            seed: a.sampler.seed,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(config, Arc::new(NoiseSchedule::default()), dataset)?;
        trainer.run(dataset, None)?;
        let out = a.out.join(file);
        trainer.model.to_checkpoint().save(&out)?;
        rec.outputs.push(out);
        Ok(trainer.model)
    };
    let mut by_slices = BTreeMap::new();
    let mut no_dose = None;
    for v in &variants {
        match *v {
            Variant::NoDose if no_dose.is_none() => {
                no_dose = Some(variant_model("model_nodose.ckpt", base.conditioning.n_slices, false)?);
            }
            Variant::Slices(n) if n != base.conditioning.n_slices && !by_slices.contains_key(&n) => {
                ensure!(
                    n < 2 * reference.slices(),
                    Config,
                    "variant {v} needs at least {} slices, volume has {}",
                    n / 2 + 1,
                    reference.slices()
                );
                by_slices.insert(n, variant_model(&format!("model_n{n}.ckpt"), n, true)?);
            }
            _ => {}
        }
    }
    let models = AblationModels {
        base,
        no_dose,
        by_slices,
        prior,
    };
    let base_config = a.sampler.sampler_config();
    let rows = run_ablation(
        &NoiseSchedule::default(),
        &reference,
        &models,
        &variants,
        &a.fractions,
        &base_config,
        a.sampler.seed,
    )?;
    let csv = a.out.join("ablation.csv");
    let mut f = fs::File::create(&csv)?;
    write_metrics_csv(&mut f, &rows)?;
    rec.outputs.push(csv);
    write_manifest(&a.out, "ablate", threads, a, rec)?;
    println!("ablation rows={}", rows.len());
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    let t = cli.threads;
    match &cli.command {
        Command::Phantom(a) => cmd_phantom(a, t),
        Command::Degrade(a) => cmd_degrade(a, t),
        Command::Train(a) => cmd_train(a, t),
        Command::TrainPrior(a) => cmd_train_prior(a, t),
        Command::Sample(a) => cmd_sample(a, t),
        Command::Eval(a) => cmd_eval(a, t),
        Command::Ablate(a) => cmd_ablate(a, t),
    }
}

/// One-line machine-readable error.
pub fn format_error(kind: &str, message: &str) -> String {
    let escaped = message
        .replace('\\', "\\\\")
        .replace('"', "\\\"")
        .replace('\n', "\\n");
    format!("error kind={kind} message=\"{escaped}\"")
}

/// Run the CLI on `args` (including the program name); returns the exit code.
pub fn run(args: Vec<OsString>) -> i32 {
    let args: Vec<String> = args.into_iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let args = match expand_config(args) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("{}", format_error(e.kind(), &e.to_string()));
            return 2;
        }
    };
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            let text = e.to_string();
            let summary = text
                .lines()
                .take_while(|l| !l.starts_with("Usage:") && !l.starts_with("For more information"))
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .collect::<Vec<_>>()
                .join(" ");
            let summary = summary.strip_prefix("error: ").unwrap_or(&summary);
            eprintln!("{}", format_error("usage", summary));
            return 2;
        }
    };
    let result = match cli.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Argument(format!("cannot build a {n}-thread pool: {e}")))
            .and_then(|pool| pool.install(|| dispatch(&cli))),
        None => dispatch(&cli),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", format_error(e.kind(), &format!("{}: {e}", cli.command.name())));
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_parsing() {
        let text = "# comment\nseed = 3\n\nsteps=10\nseed = 4\nno_prior = true\n";
        let entries = parse_config(text).unwrap();
        assert_eq!(
            entries,
            vec![
                ("steps".to_string(), "10".to_string()),
                ("seed".to_string(), "4".to_string()),
                ("no-prior".to_string(), "true".to_string()),
            ]
        );
        assert_eq!(parse_config("seed 3").unwrap_err().kind(), "config");
    }

    #[test]
    fn variants_round_trip() {
        for v in Variant::all() {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        }
        assert!("n4".parse::<Variant>().is_err());
        assert!("bogus".parse::<Variant>().is_err());
        let base = SamplerConfig::default();
        assert!(!Variant::NoPrior.apply(&base).use_prior);
        let free = Variant::NoFixEps.apply(&base);
        assert!(!free.fix_latents && !free.fix_step_noise);
        assert!(!Variant::SingleEps.apply(&base).dual_noise);
        assert_eq!(Variant::Slices(9).apply(&base), base);
    }

    #[test]
    fn error_lines_are_single_line() {
        let line = format_error("format", "bad \"x\"\nsecond");
        assert_eq!(line.lines().count(), 1);
        assert_eq!(line, "error kind=format message=\"bad \\\"x\\\"\\nsecond\"");
    }

    #[test]
    fn config_flags_are_injected_after_the_subcommand() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.cfg");
        fs::write(&cfg, "seed = 1\nwidth = 16\nseed = 5\n").unwrap();
        let args: Vec<String> = ["ddpet3d", "phantom", "--config", cfg.to_str().unwrap(), "--out", "x", "--width", "8"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let expanded = expand_config(args).unwrap();
        let cli = Cli::try_parse_from(&expanded).unwrap();
        match cli.command {
            Command::Phantom(p) => {
                assert_eq!(p.seed, 5);
                assert_eq!(p.width, 8);
            }
            other => panic!("unexpected command {other:?}"),
        }
        fs::write(&cfg, "bogus = 1\n").unwrap();
        let args: Vec<String> = ["ddpet3d", "phantom", "--config", cfg.to_str().unwrap()]
            .iter()
            .map(|s| s.to_string())
            .collect();
        assert_eq!(expand_config(args).unwrap_err().kind(), "config");
    }
}
