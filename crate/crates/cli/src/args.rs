//! Command-line flags and their application on top of a config file.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gradmix::runner::{Augmentation, DataSource, FileSet, Objective, RunConfig, Scorer, DATA_DIR_ENV};
use serde::de::{value::StrDeserializer, IntoDeserializer};
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Parser)]
#[command(name = "gradmix", version, about = "Open-set recognition with contrastive learning and GradMix")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one encoder per trial and save checkpoints.
    Train(TrainArgs),
    /// Open-set detection: known test classes against held-out classes.
    EvalOsr(EvalArgs),
    /// Out-of-distribution detection against a second dataset or noise.
    EvalOod(OodArgs),
    /// Accuracy under synthetic corruptions.
    EvalCorrupt(CorruptArgs),
    /// Linear probe on frozen features.
    Probe(ProbeArgs),
    /// Write attribution maps and activated-area fractions.
    ExportMaps(ExportArgs),
    /// Print a saved report as tables and re-run its consistency audits.
    Report(ReportArgs),
}

/// Flags shared by every command that builds or loads a run.
#[derive(Debug, Args)]
pub struct RunArgs {
    /// TOML run config; explicit flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base directory for relative dataset paths.
    #[arg(long, env = DATA_DIR_ENV)]
    pub data_dir: Option<PathBuf>,
    /// Output directory for checkpoints and reports.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: Overrides,
}

/// One flag per config field. Unset flags keep the file (or default) value.
#[derive(Debug, Default, Args)]
pub struct Overrides {
    #[arg(long)]
    pub objective: Option<Objective>,
    #[arg(long)]
    pub augmentation: Option<Augmentation>,
    #[arg(long)]
    pub theta: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub ce_weight: Option<f64>,
    #[arg(long)]
    pub temperature: Option<f64>,
    /// as-printed or standard.
    #[arg(long)]
    pub denominator: Option<String>,
    #[arg(long)]
    pub gamma_min: Option<f64>,
    #[arg(long)]
    pub gamma_max: Option<f64>,
    /// per-batch or per-epoch.
    #[arg(long)]
    pub attribution_refresh: Option<String>,
    /// grad-cam or layer-cam.
    #[arg(long)]
    pub cam_method: Option<String>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr_max: Option<f64>,
    #[arg(long)]
    pub lr_min: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub mix_alpha: Option<f64>,
    #[arg(long)]
    pub cutout_size: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// mnist, svhn, cifar10, cifar+10, cifar+50, tinyimagenet or K+U.
    #[arg(long)]
    pub protocol: Option<gradmix::data::Protocol>,
    #[arg(long)]
    pub trial: Option<usize>,
    /// Encoder input side in pixels.
    #[arg(long)]
    pub resolution: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub widths: Option<Vec<usize>>,
    #[arg(long)]
    pub blocks_per_stage: Option<usize>,
    #[arg(long)]
    pub embedding_dim: Option<usize>,
    /// Tapped stage blocks, e.g. conv4_2,conv5_2.
    #[arg(long, value_delimiter = ',')]
    pub taps: Option<Vec<String>>,
    #[arg(long)]
    pub synthetic_classes: Option<usize>,
    #[arg(long)]
    pub train_per_class: Option<usize>,
    #[arg(long)]
    pub test_per_class: Option<usize>,
    #[arg(long)]
    pub data_seed: Option<u64>,
    /// Switch to file data: idx, cifar-binary or cifar100-binary.
    #[arg(long, requires_all = ["train_images", "test_images"])]
    pub data_format: Option<gradmix::data::DatasetFormat>,
    #[arg(long, requires = "data_format")]
    pub train_images: Option<PathBuf>,
    #[arg(long, requires = "data_format")]
    pub train_labels: Option<PathBuf>,
    #[arg(long, requires = "data_format")]
    pub test_images: Option<PathBuf>,
    #[arg(long, requires = "data_format")]
    pub test_labels: Option<PathBuf>,
}

/// Parse a kebab-case enum through its serde names.
fn kebab<'de, T: Deserialize<'de>>(flag: &str, value: &'de str) -> Result<T, CliError> {
    let de: StrDeserializer<'de, serde::de::value::Error> = value.into_deserializer();
    T::deserialize(de).map_err(|e| CliError::Usage(format!("--{flag}: {e}")))
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) -> Result<(), CliError> {
        set(&mut cfg.objective, self.objective);
        set(&mut cfg.augmentation, self.augmentation);
        set(&mut cfg.theta, self.theta);
        set(&mut cfg.lambda, self.lambda);
        set(&mut cfg.ce_weight, self.ce_weight);
        set(&mut cfg.temperature, self.temperature);
        if let Some(d) = &self.denominator {
            cfg.denominator = kebab("denominator", d)?;
        }
        set(&mut cfg.gamma_range.0, self.gamma_min);
        set(&mut cfg.gamma_range.1, self.gamma_max);
        if let Some(r) = &self.attribution_refresh {
            cfg.attribution_refresh = kebab("attribution-refresh", r)?;
        }
        if let Some(m) = &self.cam_method {
            cfg.cam_method = kebab("cam-method", m)?;
        }
        set(&mut cfg.k, self.k);
        set(&mut cfg.epochs, self.epochs);
        set(&mut cfg.batch_size, self.batch_size);
        set(&mut cfg.lr_max, self.lr_max);
        set(&mut cfg.lr_min, self.lr_min);
        set(&mut cfg.seed, self.seed);
        set(&mut cfg.mix_alpha, self.mix_alpha);
        set(&mut cfg.cutout_size, self.cutout_size);
        set(&mut cfg.checkpoint_every, self.checkpoint_every);
        set(&mut cfg.protocol, self.protocol);
        set(&mut cfg.trial, self.trial);

        let enc = &mut cfg.encoder;
        set(&mut enc.input_resolution, self.resolution);
        set(&mut enc.input_channels, self.channels);
        set(&mut enc.stage_widths, self.widths.clone());
        set(&mut enc.blocks_per_stage, self.blocks_per_stage);
        set(&mut enc.embedding_dim, self.embedding_dim);
        set(&mut enc.tap_names, self.taps.as_ref().map(|t| t.iter().filter(|n| !n.is_empty()).cloned().collect()));

        if let Some(format) = self.data_format {
            let file_set = |images: &Option<PathBuf>, labels: &Option<PathBuf>| FileSet {
                images: images.clone().unwrap_or_default(),
                labels: labels.clone(),
            };
            cfg.data = DataSource::Files {
                format,
                train: file_set(&self.train_images, &self.train_labels),
                test: file_set(&self.test_images, &self.test_labels),
                unknown: None,
            };
        }
        let synthetic = [self.synthetic_classes, self.train_per_class, self.test_per_class].iter().any(Option::is_some)
            || self.data_seed.is_some();
        match &mut cfg.data {
            DataSource::Synthetic { classes, train_per_class, test_per_class, seed } => {
                set(classes, self.synthetic_classes);
                set(train_per_class, self.train_per_class);
                set(test_per_class, self.test_per_class);
                set(seed, self.data_seed);
            }
            DataSource::Files { .. } if synthetic => {
                return Err(CliError::Usage("synthetic data flags given but the data source is files".into()));
            }
            DataSource::Files { .. } => {}
        }
        Ok(())
    }
}

impl RunArgs {
    /// Config file (or defaults) with flags applied, validated.
    pub fn config(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        self.overrides.apply(&mut cfg)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct TrialArgs {
    /// Run trials 0..N instead of the single configured trial.
    #[arg(long)]
    pub trials: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub trials: TrialArgs,
}

/// Checkpoint input. Without one, an encoder is trained first.
#[derive(Debug, Args)]
pub struct SourceArgs {
    /// Checkpoint to evaluate; repeat for several trials. The run config
    /// stored in the checkpoint defines the data split.
    #[arg(long)]
    pub checkpoint: Vec<PathBuf>,
    #[command(flatten)]
    pub trials: TrialArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub source: SourceArgs,
    #[arg(long, default_value = "knn")]
    pub scorer: Scorer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OodSource {
    /// Dataset files given by the --ood-* flags.
    Files,
    /// Uniform noise images.
    Noise,
}

#[derive(Debug, Args)]
pub struct OodArgs {
    #[command(flatten)]
    pub eval: EvalArgs,
    #[arg(long, value_enum, default_value = "noise")]
    pub ood_source: OodSource,
    #[arg(long)]
    pub ood_format: Option<gradmix::data::DatasetFormat>,
    #[arg(long)]
    pub ood_images: Option<PathBuf>,
    #[arg(long)]
    pub ood_labels: Option<PathBuf>,
    /// Number of noise images.
    #[arg(long, default_value_t = 256)]
    pub ood_count: usize,
}

#[derive(Debug, Args)]
pub struct CorruptArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub source: SourceArgs,
    /// Corruption types; all available when omitted.
    #[arg(long, value_delimiter = ',')]
    pub corruptions: Vec<gradmix::data::CorruptionKind>,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub source: SourceArgs,
    #[arg(long, default_value_t = 100)]
    pub probe_epochs: usize,
    #[arg(long, default_value_t = 1e-2)]
    pub probe_lr: f64,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub source: SourceArgs,
    /// Layers to export; the configured taps when omitted.
    #[arg(long, value_delimiter = ',')]
    pub layers: Vec<String>,
    /// Number of known-class test images to export.
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    /// Activated-area thresholds; log-spaced over [1e-5, 1e-3] when omitted.
    #[arg(long, value_delimiter = ',')]
    pub thresholds: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Report JSON written by another command.
    pub input: PathBuf,
}
