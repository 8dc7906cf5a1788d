use std::path::PathBuf;

use crate::data::{PhantomConfig, ANISOTROPIC_SPACING};
use crate::error::{Error, Result};
use crate::metrics::{parse_regions, Region};
use crate::model::config::{parse, parse_pairs};
use crate::model::{FusionMode, ModelConfig};

use super::adam::AdamSettings;

pub const DEFAULT_REGIONS: &str = "ET:4;TC:3,4;WT:2,3,4";

/// Everything a training, evaluation or ablation run needs, read from flat
/// `key = value` text.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub phantom: PhantomConfig,
    /// Number of phantoms to synthesize when no manifest is given.
    pub samples: usize,
    pub manifest: Option<PathBuf>,
    /// Z-score the foreground of every modality before use.
    pub normalize: bool,
    pub adam: AdamSettings,
    pub steps: usize,
    pub batch_size: usize,
    /// `1` trains and evaluates on every sample.
    pub folds: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub modes: Vec<FusionMode>,
    pub regions: Vec<Region>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            phantom: PhantomConfig::default(),
            samples: 4,
            manifest: None,
            normalize: true,
            adam: AdamSettings::default(),
            steps: 100,
            batch_size: 1,
            folds: 1,
            seed: 0,
            out_dir: PathBuf::from("out"),
            modes: vec![
                FusionMode::Early,
                FusionMode::Middle,
                FusionMode::Hybrid,
                FusionMode::HybridStar,
            ],
            regions: parse_regions(DEFAULT_REGIONS).expect("default regions parse"),
        }
    }
}

fn parse_spacing(value: &str) -> Result<[f32; 3]> {
    if value == "anisotropic" {
        return Ok(ANISOTROPIC_SPACING);
    }
    let parts: Vec<f32> = value
        .split('x')
        .map(|p| parse("spacing", p))
        .collect::<Result<_>>()?;
    match parts[..] {
        [s] => Ok([s; 3]),
        [a, b, c] => Ok([a, b, c]),
        _ => Err(Error::Config(format!(
            "spacing `{value}` must be S, AxBxC or `anisotropic`"
        ))),
    }
}

fn parse_range(key: &str, value: &str) -> Result<(f64, f64)> {
    match value.split_once(',') {
        Some((a, b)) => Ok((parse(key, a)?, parse(key, b)?)),
        None => Err(Error::Config(format!(
            "`{key}` expects `lo,hi`, got `{value}`"
        ))),
    }
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (key, value) in parse_pairs(text)? {
            cfg.apply(&key, &value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        if key == "seed" {
            self.seed = parse(key, value)?;
            return Ok(());
        }
        if self.model.apply(key, value)? {
            return Ok(());
        }
        match key {
            "samples" => self.samples = parse(key, value)?,
            "manifest" => self.manifest = Some(PathBuf::from(value)),
            "normalize" => self.normalize = parse(key, value)?,
            "noise_sigma" => self.phantom.noise_sigma = parse(key, value)?,
            "spacing" => self.phantom.spacing = parse_spacing(value)?,
            "tissue_scale" => self.phantom.tissue_scale = parse_range(key, value)?,
            "lesion_scale" => self.phantom.lesion_scale = parse_range(key, value)?,
            "shell_ratio" => self.phantom.shell_ratio = parse_range(key, value)?,
            "learning_rate" => self.adam.learning_rate = parse(key, value)?,
            "beta1" => self.adam.beta1 = parse(key, value)?,
            "beta2" => self.adam.beta2 = parse(key, value)?,
            "adam_eps" => self.adam.eps = parse(key, value)?,
            "weight_decay" => self.adam.weight_decay = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "folds" => self.folds = parse(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "modes" => {
                self.modes = value
                    .split(';')
                    .map(str::trim)
                    .filter(|m| !m.is_empty())
                    .map(str::parse)
                    .collect::<Result<_>>()?
            }
            "regions" => self.regions = parse_regions(value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Phantom settings with the shape fields taken from the model and the
    /// seed derived from the run seed.
    pub fn phantom_config(&self) -> PhantomConfig {
        PhantomConfig {
            modalities: self.model.modalities,
            extents: self.model.extents,
            num_classes: self.model.num_classes,
            seed: crate::seed::derive_seed(self.seed, "data"),
            ..self.phantom.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        self.model.validate()?;
        if self.manifest.is_none() {
            self.phantom_config().validate()?;
        }
        self.adam.validate()?;
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if self.samples == 0 {
            return fail("samples must be at least 1".into());
        }
        if self.folds == 0 {
            return fail("folds must be at least 1".into());
        }
        if self.manifest.is_none() && self.folds > self.samples {
            return fail(format!(
                "{} folds need at least as many samples, got {}",
                self.folds, self.samples
            ));
        }
        if self.modes.is_empty() {
            return fail("modes must list at least one fusion mode".into());
        }
        for r in &self.regions {
            if let Some(c) = r
                .classes
                .iter()
                .find(|&&c| c as usize >= self.model.num_classes)
            {
                return fail(format!("region `{}` references unknown class {c}", r.name));
            }
        }
        Ok(())
    }
}
