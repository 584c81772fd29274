//! Run configuration, loaded from TOML with kebab-case keys.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attribution::CamMethod;
use crate::augment::ViewConfig;
use crate::data::{
    class_order, default_blob_specs, load_dataset, make_split, open_set_blob_specs, synth_blobs, DatasetFormat,
    ImageDataset, Protocol, SourceData, Split, SplitProtocol, TRIALS,
};
use crate::encoder::{EncoderConfig, HeadMode};
use crate::error::{Error, Result};
use crate::losses::{Denominator, LossWeights, GAMMA_MAX, GAMMA_MIN};

/// Environment variable holding the default data directory.
pub const DATA_DIR_ENV: &str = "GRADMIX_DATA_DIR";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Objective {
    #[serde(rename = "ce")]
    Ce,
    #[serde(rename = "ce+ssl")]
    CeSsl,
    #[serde(rename = "supcon")]
    SupCon,
    #[serde(rename = "supcon+ssl")]
    SupConSsl,
    #[default]
    #[serde(rename = "supcon+ssl+gradmix")]
    SupConSslMix,
    #[serde(rename = "ssl-only")]
    SslOnly,
}

impl Objective {
    pub const ALL: [Objective; 6] = [
        Objective::Ce,
        Objective::CeSsl,
        Objective::SupCon,
        Objective::SupConSsl,
        Objective::SupConSslMix,
        Objective::SslOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Objective::Ce => "ce",
            Objective::CeSsl => "ce+ssl",
            Objective::SupCon => "supcon",
            Objective::SupConSsl => "supcon+ssl",
            Objective::SupConSslMix => "supcon+ssl+gradmix",
            Objective::SslOnly => "ssl-only",
        }
    }

    pub fn uses_classifier(self) -> bool {
        matches!(self, Objective::Ce | Objective::CeSsl)
    }

    /// Whether a mixed batch enters the loss.
    pub fn mixes(self) -> bool {
        self == Objective::SupConSslMix
    }
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Objective::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown objective {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Augmentation {
    None,
    Mixup,
    Cutmix,
    Cutout,
    #[default]
    Gradmix,
}

impl std::str::FromStr for Augmentation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => Augmentation::None,
            "mixup" => Augmentation::Mixup,
            "cutmix" => Augmentation::Cutmix,
            "cutout" => Augmentation::Cutout,
            "gradmix" => Augmentation::Gradmix,
            other => return Err(Error::Config(format!("unknown augmentation {other:?}"))),
        })
    }
}

/// When GradMix recomputes its attribution maps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttributionRefresh {
    /// From the current weights on the current views, every batch.
    #[default]
    PerBatch,
    /// Once per epoch on the un-augmented training images.
    PerEpoch,
}

/// Where images come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSource {
    /// Colored blobs on a line of color and position. For single-source
    /// protocols the drawn unknown classes sit between known classes.
    #[serde(rename_all = "kebab-case")]
    Synthetic { classes: usize, train_per_class: usize, test_per_class: usize, seed: u64 },
    /// Dataset files; relative paths resolve against the data directory.
    #[serde(rename_all = "kebab-case")]
    Files {
        format: DatasetFormat,
        train: FileSet,
        test: FileSet,
        /// Second source for cross-dataset protocols.
        #[serde(default)]
        unknown: Option<FilePair>,
    },
}

/// Image file plus, for IDX, its label file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct FileSet {
    pub images: PathBuf,
    #[serde(default)]
    pub labels: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct FilePair {
    pub format: DatasetFormat,
    pub train: FileSet,
    pub test: FileSet,
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic { classes: 3, train_per_class: 48, test_per_class: 32, seed: 7 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default, deny_unknown_fields)]
pub struct RunConfig {
    pub objective: Objective,
    pub augmentation: Augmentation,
    pub encoder: EncoderConfig,
    /// Supervised contrastive weight.
    pub theta: f64,
    /// Self-supervised weight.
    pub lambda: f64,
    pub ce_weight: f64,
    pub temperature: f64,
    pub denominator: Denominator,
    /// Bounds of the per-batch mask ratio draw.
    pub gamma_range: (f64, f64),
    pub attribution_refresh: AttributionRefresh,
    pub cam_method: CamMethod,
    /// Neighbours per class in the kNN scorer.
    pub k: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub seed: u64,
    /// Beta parameter of mixup and cutmix.
    pub mix_alpha: f64,
    pub cutout_size: usize,
    pub views: ViewConfig,
    /// Save a checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    pub protocol: Protocol,
    pub trial: usize,
    pub data: DataSource,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            objective: Objective::default(),
            augmentation: Augmentation::default(),
            encoder: EncoderConfig::tiny(),
            theta: 1.0,
            lambda: 1.0,
            ce_weight: 1.0,
            temperature: crate::losses::DEFAULT_TEMPERATURE,
            denominator: Denominator::default(),
            gamma_range: (GAMMA_MIN, GAMMA_MAX),
            attribution_refresh: AttributionRefresh::default(),
            cam_method: CamMethod::default(),
            k: 3,
            epochs: 10,
            batch_size: 64,
            lr_max: 1e-3,
            lr_min: 5.12e-5,
            seed: 0,
            mix_alpha: 1.0,
            cutout_size: 8,
            views: ViewConfig::default(),
            checkpoint_every: 0,
            protocol: Protocol::Custom { known: 2, unknown: 1 },
            trial: 0,
            data: DataSource::default(),
        }
    }
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(msg()))
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn weights(&self) -> LossWeights {
        let (theta, lambda) = match self.objective {
            Objective::SupCon => (self.theta, 0.0),
            Objective::SslOnly => (0.0, self.lambda),
            Objective::Ce => (0.0, 0.0),
            _ => (self.theta, self.lambda),
        };
        LossWeights { theta, lambda, gamma: self.gamma_range.0, ce_weight: self.ce_weight }
    }

    /// Encoder config with the head the objective needs.
    pub fn encoder_config(&self) -> EncoderConfig {
        let mut enc = self.encoder.clone();
        if self.objective.uses_classifier() {
            enc.head_mode = HeadMode::ProjectionClassifier;
            enc.class_count = self.protocol.known();
        }
        enc
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder_config().validate()?;
        let (lo, hi) = self.gamma_range;
        check(GAMMA_MIN <= lo && lo <= hi && hi <= GAMMA_MAX, || {
            format!("gamma-range ({lo}, {hi}) must lie within [{GAMMA_MIN}, {GAMMA_MAX}]")
        })?;
        check(self.temperature > 0.0 && self.temperature.is_finite(), || {
            format!("temperature must be positive, got {}", self.temperature)
        })?;
        for (name, v) in [("theta", self.theta), ("lambda", self.lambda), ("ce-weight", self.ce_weight)] {
            check(v >= 0.0 && v.is_finite(), || format!("{name} must be nonnegative, got {v}"))?;
        }
        check(self.k >= 1, || "k must be at least 1".into())?;
        check(self.epochs >= 1, || "epochs must be at least 1".into())?;
        check(self.batch_size >= 2, || format!("batch-size must be at least 2, got {}", self.batch_size))?;
        check(self.lr_min > 0.0 && self.lr_min <= self.lr_max && self.lr_max.is_finite(), || {
            format!("need 0 < lr-min ≤ lr-max, got {} and {}", self.lr_min, self.lr_max)
        })?;
        check(self.mix_alpha > 0.0, || format!("mix-alpha must be positive, got {}", self.mix_alpha))?;
        check(self.trial < TRIALS, || format!("trial must be below {TRIALS}, got {}", self.trial))?;
        check(self.protocol.known() >= 2, || "at least 2 known classes are needed".into())?;
        let mixing = self.augmentation != Augmentation::None;
        check(mixing == self.objective.mixes(), || {
            format!(
                "objective {} does not combine with augmentation {:?}; mixing augmentations go with supcon+ssl+gradmix",
                self.objective, self.augmentation
            )
        })?;
        if self.objective.mixes() {
            check(self.lambda > 0.0, || "the mixing objective needs lambda > 0".into())?;
        }
        if self.augmentation == Augmentation::Gradmix {
            check(!self.encoder.tap_names.is_empty(), || "gradmix needs at least one tap name".into())?;
        }
        if self.augmentation == Augmentation::Cutout {
            let s = self.encoder.input_resolution;
            check((1..=s).contains(&self.cutout_size), || format!("cutout-size must be in 1..={s}"))?;
        }
        if self.objective == Objective::SslOnly {
            check(self.lambda > 0.0, || "ssl-only needs lambda > 0".into())?;
        }
        if let DataSource::Synthetic { classes, train_per_class, test_per_class, .. } = self.data {
            check(classes >= self.protocol.known() + self.protocol.unknown(), || {
                format!("synthetic source has {classes} classes, protocol {} needs more", self.protocol)
            })?;
            check(train_per_class >= self.k && test_per_class >= 1, || {
                "synthetic source needs ≥ k training and ≥ 1 test samples per class".into()
            })?;
        }
        Ok(())
    }
}

fn resolve(path: &Path, base: Option<&Path>) -> PathBuf {
    match base {
        Some(b) if path.is_relative() => b.join(path),
        _ => path.to_path_buf(),
    }
}

fn load_set(set: &FileSet, format: DatasetFormat, base: Option<&Path>) -> Result<ImageDataset> {
    let labels = set.labels.as_ref().map(|l| resolve(l, base));
    load_dataset(&resolve(&set.images, base), labels.as_deref(), format)
}

fn data_base(data_dir: Option<&Path>) -> Option<PathBuf> {
    data_dir.map(Path::to_path_buf).or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
}

/// Load one dataset file conformed to the encoder of `cfg`. Relative paths
/// resolve against `data_dir`, then the data directory variable.
pub fn load_files(
    cfg: &RunConfig,
    set: &FileSet,
    format: DatasetFormat,
    data_dir: Option<&Path>,
) -> Result<ImageDataset> {
    let enc = &cfg.encoder;
    load_set(set, format, data_base(data_dir).as_deref())?.conform(enc.input_channels, enc.input_resolution)
}

/// Load the source data and draw the configured split. Images are conformed
/// to the encoder's channels and resolution.
pub fn load_split(cfg: &RunConfig, data_dir: Option<&Path>) -> Result<Split> {
    let base_dir = data_base(data_dir);
    let base = base_dir.as_deref();
    let enc = &cfg.encoder;
    let conform = |ds: ImageDataset| ds.conform(enc.input_channels, enc.input_resolution);
    let split = SplitProtocol { protocol: cfg.protocol, trial: cfg.trial };
    let (source, other) = match &cfg.data {
        DataSource::Synthetic { classes, train_per_class, test_per_class, seed } => {
            let p = cfg.protocol;
            let specs = if p.cross_source() || p.known() + p.unknown() > *classes {
                default_blob_specs(*classes)
            } else {
                let order = class_order(*classes, split, cfg.seed);
                let (known, rest) = order.split_at(p.known());
                open_set_blob_specs(*classes, known, &rest[..p.unknown()])
            };
            let side = enc.input_resolution;
            let train = synth_blobs(&specs, side, *train_per_class, *seed)?;
            let test = synth_blobs(&specs, side, *test_per_class, seed.wrapping_add(1))?;
            (SourceData { train: conform(train)?, test: conform(test)? }, None)
        }
        DataSource::Files { format, train, test, unknown } => {
            let source = SourceData {
                train: conform(load_set(train, *format, base)?)?,
                test: conform(load_set(test, *format, base)?)?,
            };
            let other = match unknown {
                Some(p) => Some(SourceData {
                    train: conform(load_set(&p.train, p.format, base)?)?,
                    test: conform(load_set(&p.test, p.format, base)?)?,
                }),
                None => None,
            };
            (source, other)
        }
    };
    make_split(&source, other.as_ref(), split, cfg.seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_round_trips() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let cfg = RunConfig::from_toml("objective = \"supcon+ssl\"\naugmentation = \"none\"\nepochs = 3\n").unwrap();
        assert_eq!(cfg.objective, Objective::SupConSsl);
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.k, 3);
        cfg.validate().unwrap();
        assert!(RunConfig::from_toml("no-such-key = 1").is_err());
    }

    #[test]
    fn invalid_combinations_are_rejected() {
        let bad = |f: fn(&mut RunConfig)| {
            let mut c = RunConfig::default();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.encoder.tap_names.clear()));
        assert!(bad(|c| c.gamma_range = (0.05, 0.5)));
        assert!(bad(|c| c.gamma_range = (0.4, 0.3)));
        assert!(bad(|c| c.objective = Objective::SupCon));
        assert!(bad(|c| c.temperature = 0.0));
        assert!(bad(|c| c.k = 0));
        assert!(bad(|c| c.batch_size = 1));
        assert!(bad(|c| c.lr_min = 2e-3));
        assert!(bad(|c| c.trial = 5));
        assert!(bad(|c| c.theta = -1.0));
    }

    #[test]
    fn objective_weights() {
        let mut c = RunConfig { theta: 2.0, lambda: 3.0, ..RunConfig::default() };
        c.objective = Objective::SupCon;
        assert_eq!((c.weights().theta, c.weights().lambda), (2.0, 0.0));
        c.objective = Objective::SslOnly;
        assert_eq!((c.weights().theta, c.weights().lambda), (0.0, 3.0));
        c.objective = Objective::Ce;
        assert!(c.encoder_config().has_classifier());
        assert_eq!(c.encoder_config().class_count, 2);
    }

    #[test]
    fn synthetic_split_shapes() {
        let mut cfg = RunConfig::default();
        cfg.encoder.input_resolution = 16;
        let split = load_split(&cfg, None).unwrap();
        assert_eq!(split.train_known.len(), 96);
        assert_eq!(split.test_known.len(), 64);
        assert_eq!(split.test_unknown.len(), 32);
        assert_eq!(split.train_known.images.shape(), &[96, 3, 16, 16]);
        assert_eq!(split.manifest.known_classes.len(), 2);
    }
}
