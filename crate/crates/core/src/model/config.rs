use std::fmt;
use std::str::FromStr;

use super::fusion::{make_fusion_spec, FusionSpec};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum FusionMode {
    /// All modalities stacked into a single encoder.
    Early,
    /// One encoder per modality.
    Middle,
    /// One all-modality encoder plus one encoder per modality.
    Hybrid,
    /// One all-modality encoder plus one leave-one-out encoder per modality.
    HybridStar,
    /// Explicit encoder inputs, as 0-based modality index subsets.
    Custom(Vec<Vec<usize>>),
}

impl FusionMode {
    pub fn name(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FusionMode::Early => write!(f, "early"),
            FusionMode::Middle => write!(f, "middle"),
            FusionMode::Hybrid => write!(f, "hybrid"),
            FusionMode::HybridStar => write!(f, "hybrid_star"),
            FusionMode::Custom(sets) => {
                let sets: Vec<String> = sets
                    .iter()
                    .map(|s| {
                        s.iter()
                            .map(|m| m.to_string())
                            .collect::<Vec<_>>()
                            .join(",")
                    })
                    .collect();
                write!(f, "custom:{}", sets.join("/"))
            }
        }
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    /// `early`, `middle`, `hybrid`, `hybrid_star`, or `custom:0,1/0/1` where
    /// `/` separates encoders and `,` separates modality indices.
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "early" => Ok(FusionMode::Early),
            "middle" => Ok(FusionMode::Middle),
            "hybrid" => Ok(FusionMode::Hybrid),
            "hybrid_star" | "hybrid*" => Ok(FusionMode::HybridStar),
            other => {
                let Some(body) = other.strip_prefix("custom:") else {
                    return Err(Error::Config(format!("unknown fusion mode `{other}`")));
                };
                let sets = body
                    .split('/')
                    .map(|set| {
                        set.split(',')
                            .map(|m| {
                                m.trim()
                                    .parse::<usize>()
                                    .map_err(|_| Error::Config(format!("bad modality index `{m}`")))
                            })
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(FusionMode::Custom(sets))
            }
        }
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub modalities: usize,
    pub fusion: FusionMode,
    pub num_classes: usize,
    pub extents: [usize; 3],
    /// Channels after the first encoder conv; doubles at each downsampling.
    pub base_width: usize,
    /// Encoder output channels at 1/8 scale.
    pub encoder_channels: usize,
    /// Transformer embedding width.
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub instance_norm: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            modalities: 4,
            fusion: FusionMode::Hybrid,
            num_classes: 5,
            extents: [32, 32, 32],
            base_width: 8,
            encoder_channels: 16,
            embed_dim: 48,
            layers: 4,
            heads: 4,
            mlp_ratio: 4,
            instance_norm: true,
            seed: 0,
        }
    }
}

pub const NORM_EPS: f64 = 1e-5;

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.modalities == 0 {
            return fail("modalities must be at least 1".into());
        }
        if self.num_classes < 2 {
            return fail("num_classes must be at least 2".into());
        }
        if self.extents.iter().any(|&e| e == 0 || e % 16 != 0) {
            return fail(format!(
                "extents {:?} must be positive multiples of 16",
                self.extents
            ));
        }
        if self.base_width == 0
            || self.encoder_channels == 0
            || self.embed_dim == 0
            || self.mlp_ratio == 0
        {
            return fail("widths must be positive".into());
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return fail(format!(
                "embed_dim {} must be divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        self.fusion_spec().map(|_| ())
    }

    pub fn fusion_spec(&self) -> Result<FusionSpec> {
        make_fusion_spec(&self.fusion, self.modalities)
    }

    /// Token grid extents (input / 16).
    pub fn token_grid(&self) -> [usize; 3] {
        self.extents.map(|e| e / 16)
    }

    pub fn tokens_per_encoder(&self) -> usize {
        self.token_grid().iter().product()
    }

    pub fn voxels(&self) -> usize {
        self.extents.iter().product()
    }

    /// `key = value` pairs in a fixed order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("modalities", self.modalities.to_string()),
            ("fusion", self.fusion.to_string()),
            ("num_classes", self.num_classes.to_string()),
            ("extents", format_extents(self.extents)),
            ("base_width", self.base_width.to_string()),
            ("encoder_channels", self.encoder_channels.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("layers", self.layers.to_string()),
            ("heads", self.heads.to_string()),
            ("mlp_ratio", self.mlp_ratio.to_string()),
            ("instance_norm", self.instance_norm.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    /// Applies one `key = value` setting. Returns `Ok(false)` for keys that are
    /// not model fields.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "modalities" => self.modalities = parse(key, value)?,
            "fusion" => self.fusion = value.parse()?,
            "num_classes" => self.num_classes = parse(key, value)?,
            "extents" => self.extents = parse_extents(value)?,
            "base_width" => self.base_width = parse(key, value)?,
            "encoder_channels" => self.encoder_channels = parse(key, value)?,
            "embed_dim" => self.embed_dim = parse(key, value)?,
            "layers" => self.layers = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "mlp_ratio" => self.mlp_ratio = parse(key, value)?,
            "instance_norm" => self.instance_norm = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_text(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for (key, value) in parse_pairs(text)? {
            if !cfg.apply(&key, &value)? {
                return Err(Error::Config(format!("unknown model key `{key}`")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub(crate) fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

pub fn format_extents(e: [usize; 3]) -> String {
    format!("{}x{}x{}", e[0], e[1], e[2])
}

/// `32` (cubic) or `32x32x16`.
pub fn parse_extents(value: &str) -> Result<[usize; 3]> {
    let parts: Vec<usize> = value
        .split('x')
        .map(|p| parse("extents", p))
        .collect::<Result<_>>()?;
    match parts[..] {
        [e] => Ok([e; 3]),
        [a, b, c] => Ok([a, b, c]),
        _ => Err(Error::Config(format!(
            "extents `{value}` must be N or WxHxD"
        ))),
    }
}

/// Flat `key = value` lines; `#` starts a comment; duplicate keys are errors.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {}: expected `key = value`",
                lineno + 1
            )));
        };
        let key = k.trim().to_string();
        if out.iter().any(|(seen, _)| *seen == key) {
            return Err(Error::Config(format!(
                "line {}: duplicate key `{key}`",
                lineno + 1
            )));
        }
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}
