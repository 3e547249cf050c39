use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ini::Ini;

use crate::data::{parse, parse_list, PkBatchSpec, SyntheticDatasetSpec};
use crate::error::{Error, Result};
use crate::gap::Tap;
use crate::model::{Direction, ModelConfig, TrainSchedule};
use crate::norm::{NormConfig, NormKind};

/// Backbone and head normalization kinds of one ablation row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NormSetup {
    pub name: String,
    pub backbone: NormKind,
    pub head: NormKind,
}

const NAMED: [(&str, NormKind, NormKind); 8] = [
    ("baseline", NormKind::Bn, NormKind::Bn),
    ("shared-backbone", NormKind::MbnShared, NormKind::Bn),
    ("shared-head", NormKind::Bn, NormKind::MbnShared),
    ("shared-both", NormKind::MbnShared, NormKind::MbnShared),
    ("specific-backbone", NormKind::MbnSpecific, NormKind::Bn),
    ("specific-head", NormKind::Bn, NormKind::MbnSpecific),
    ("specific-both", NormKind::MbnSpecific, NormKind::MbnSpecific),
    ("mixed", NormKind::MbnShared, NormKind::MbnSpecific),
];

impl NormSetup {
    /// Named rows, or a custom pair: the row name when one matches, else
    /// `<backbone>+<head>`.
    pub fn new(backbone: NormKind, head: NormKind) -> Self {
        let name = NAMED
            .iter()
            .find(|(_, b, h)| *b == backbone && *h == head)
            .map_or_else(|| format!("{backbone}+{head}"), |(n, _, _)| n.to_string());
        Self { name, backbone, head }
    }

    pub fn all_named() -> Vec<Self> {
        NAMED.iter().map(|&(_, b, h)| Self::new(b, h)).collect()
    }
}

impl FromStr for NormSetup {
    type Err = Error;

    /// Accepts a row name or `<backbone>+<head>` kinds.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(&(_, b, h)) = NAMED.iter().find(|(n, _, _)| *n == s) {
            return Ok(Self::new(b, h));
        }
        match s.split_once('+') {
            Some((b, h)) => Ok(Self::new(b.trim().parse()?, h.trim().parse()?)),
            None => Err(Error::Config(format!("unknown norm configuration `{s}`"))),
        }
    }
}

impl fmt::Display for NormSetup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

/// Everything an experiment needs, loadable from an ini-style file.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: SyntheticDatasetSpec,
    /// Template for every run; norm kinds, class count and init seed are
    /// filled in per run.
    pub model: ModelConfig,
    pub schedule: TrainSchedule,
    pub sampler: PkBatchSpec,
    pub test_fraction: f64,
    pub direction: Direction,
    pub setups: Vec<NormSetup>,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub gap: GapSettings,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GapSettings {
    pub batches: usize,
    pub bins: usize,
    pub tap: Tap,
    /// Analyze this checkpoint instead of fresh models.
    pub checkpoint: Option<PathBuf>,
}

impl Default for GapSettings {
    fn default() -> Self {
        Self {
            batches: 3,
            bins: 50,
            tap: Tap::PreAffine,
            checkpoint: None,
        }
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let dataset = SyntheticDatasetSpec::default();
        Self {
            model: ModelConfig {
                num_classes: dataset.num_identities,
                ..Default::default()
            },
            dataset,
            schedule: TrainSchedule::default(),
            sampler: PkBatchSpec::default(),
            test_fraction: 0.25,
            direction: Direction::InfraredToVisible,
            setups: ["baseline", "shared-both", "specific-both", "mixed"]
                .iter()
                .map(|s| s.parse().expect("named row"))
                .collect(),
            seeds: vec![0, 1, 2, 3, 4],
            out_dir: PathBuf::from("runs"),
            gap: GapSettings::default(),
        }
    }
}

/// Command-line overrides layered over a config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seeds: Vec<u64>,
    pub out_dir: Option<PathBuf>,
    pub norm_backbone: Option<NormKind>,
    pub norm_head: Option<NormKind>,
    pub dataset_seed: Option<u64>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let ini = Ini::load_from_file(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_ini(&ini)
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_ini(&ini)
    }

    fn from_ini(ini: &Ini) -> Result<Self> {
        let mut cfg = Self::default();
        for (section, props) in ini.iter() {
            let section = section.unwrap_or("");
            for (key, value) in props.iter() {
                cfg.set(section, key, value)
                    .map_err(|e| Error::Config(format!("[{section}] {key} = {value}: {e}")))?;
            }
        }
        cfg.model.num_classes = cfg.dataset.num_identities;
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let d = &mut self.dataset;
        let m = &mut self.model;
        let s = &mut self.schedule;
        match (section, key) {
            ("dataset", "num_identities") => d.num_identities = parse(value)?,
            ("dataset", "images_per_identity_per_modality") => {
                d.images_per_identity_per_modality = parse(value)?
            }
            ("dataset", "latent_dim") => d.latent_dim = parse(value)?,
            ("dataset", "channels") => d.image_dims.0 = parse(value)?,
            ("dataset", "height") => d.image_dims.1 = parse(value)?,
            ("dataset", "width") => d.image_dims.2 = parse(value)?,
            ("dataset", "modality_offset_scale") => d.modality_offset_scale = parse(value)?,
            ("dataset", "intra_class_noise") => d.intra_class_noise = parse(value)?,
            ("dataset", "seed") => d.rng_seed = parse(value)?,
            ("model", "widths") => m.widths = parse_list(value)?,
            ("model", "embedding_dim") => m.embedding_dim = parse(value)?,
            ("model", "norm_eps") => m.norm_eps = parse(value)?,
            ("model", "norm_momentum") => m.norm_momentum = parse(value)?,
            ("model", "loss") => m.loss.kind = value.parse()?,
            ("model", "triplet_margin") => m.loss.triplet_margin = parse(value)?,
            ("model", "circle_margin") => m.loss.circle_margin = parse(value)?,
            ("model", "circle_scale") => m.loss.circle_scale = parse(value)?,
            ("model", "configurations") => {
                self.setups = value.split(',').map(str::parse).collect::<Result<_>>()?
            }
            ("schedule", "epochs") => s.total_epochs = parse(value)?,
            ("schedule", "warmup_epochs") => s.warmup_epochs = parse(value)?,
            ("schedule", "base_lr") => s.base_lr = parse(value)?,
            ("schedule", "weight_decay") => s.weight_decay = parse(value)?,
            ("schedule", "decay") => s.decay = parse_decay(value)?,
            ("sampler", "p") => self.sampler.p = parse(value)?,
            ("sampler", "k") => self.sampler.k = parse(value)?,
            ("sampler", "test_fraction") => self.test_fraction = parse(value)?,
            ("experiment", "seeds") => self.seeds = parse_list(value)?,
            ("experiment", "out") => self.out_dir = PathBuf::from(value),
            ("experiment", "direction") => {
                self.direction = match value.trim() {
                    "I->V" | "infrared_to_visible" => Direction::InfraredToVisible,
                    "V->I" | "visible_to_infrared" => Direction::VisibleToInfrared,
                    other => return Err(Error::Config(format!("unknown direction `{other}`"))),
                }
            }
            ("gap", "batches") => self.gap.batches = parse(value)?,
            ("gap", "bins") => self.gap.bins = parse(value)?,
            ("gap", "tap") => {
                self.gap.tap = match value.trim() {
                    "pre" | "pre_affine" => Tap::PreAffine,
                    "post" | "post_affine" => Tap::PostAffine,
                    other => return Err(Error::Config(format!("unknown tap `{other}`"))),
                }
            }
            ("gap", "checkpoint") => self.gap.checkpoint = Some(PathBuf::from(value)),
            _ => return Err(Error::Config("unknown key".into())),
        }
        Ok(())
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if !o.seeds.is_empty() {
            self.seeds = o.seeds.clone();
        }
        if let Some(dir) = &o.out_dir {
            self.out_dir = dir.clone();
        }
        if let Some(seed) = o.dataset_seed {
            self.dataset.rng_seed = seed;
        }
        if o.norm_backbone.is_some() || o.norm_head.is_some() {
            self.setups = vec![NormSetup::new(
                o.norm_backbone.unwrap_or(NormKind::Bn),
                o.norm_head.unwrap_or(NormKind::Bn),
            )];
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.sampler.validate()?;
        self.schedule.validate()?;
        NormConfig::new(NormKind::Bn)
            .with_eps(self.model.norm_eps)
            .with_momentum(self.model.norm_momentum)
            .validate()?;
        self.model.loss.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.setups.is_empty() {
            return Err(Error::Config("at least one norm configuration is required".into()));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config("test_fraction must lie in (0, 1)".into()));
        }
        if self.gap.batches == 0 || self.gap.bins == 0 {
            return Err(Error::Config("gap batches and bins must be >= 1".into()));
        }
        self.model_config(&self.setups[0], 0).validate()
    }

    /// The model of one run.
    pub fn model_config(&self, setup: &NormSetup, seed: u64) -> ModelConfig {
        let (c, h, w) = self.dataset.image_dims;
        ModelConfig {
            in_channels: c,
            input_hw: (h, w),
            backbone_norm: setup.backbone,
            head_norm: setup.head,
            num_classes: self.dataset.num_identities,
            init_seed: seed,
            ..self.model.clone()
        }
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.out_dir.join("dataset")
    }
}

fn parse_decay(value: &str) -> Result<Vec<(usize, f64)>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|item| {
            let (epoch, factor) = item
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("decay entry `{item}` is not epoch:factor")))?;
            Ok((parse(epoch)?, parse(factor)?))
        })
        .collect()
}
