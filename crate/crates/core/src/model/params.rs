use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{Element, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Uniform(f64),
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Encoder block names in forward order.
pub(crate) const ENCODER_BLOCKS: [&str; 6] =
    ["stage1", "down1", "stage2", "down2", "stage3", "down3"];

/// Channel widths `(in, out, stride)` of each encoder block.
pub(crate) fn encoder_block_dims(cfg: &ModelConfig, cin: usize) -> [(usize, usize, usize); 6] {
    let b = cfg.base_width;
    [
        (cin, b, 1),
        (b, 2 * b, 2),
        (2 * b, 2 * b, 1),
        (2 * b, 4 * b, 2),
        (4 * b, 4 * b, 1),
        (4 * b, cfg.encoder_channels, 2),
    ]
}

/// Decoder stages from coarse to fine: `(name suffix, in, out)`; the output of
/// stage `s` is concatenated with the skip features of width `out`.
pub(crate) fn decoder_stage_dims(cfg: &ModelConfig) -> [(usize, usize, usize); 3] {
    let b = cfg.base_width;
    [
        (3, cfg.encoder_channels, 4 * b),
        (2, 4 * b, 2 * b),
        (1, 2 * b, b),
    ]
}

struct Specs<'a> {
    cfg: &'a ModelConfig,
    out: Vec<ParamSpec>,
}

impl Specs<'_> {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) {
        self.out.push(ParamSpec { name, shape, init });
    }

    fn norm(&mut self, prefix: &str, c: usize) {
        self.push(format!("{prefix}.gamma"), vec![c], Init::Ones);
        self.push(format!("{prefix}.beta"), vec![c], Init::Zeros);
    }

    fn conv(&mut self, prefix: &str, cin: usize, cout: usize, k: usize, norm: bool) {
        let fan_in = (cin * k * k * k) as f64;
        self.push(
            format!("{prefix}.w"),
            vec![cout, cin, k, k, k],
            Init::Uniform((6.0 / fan_in).sqrt()),
        );
        self.push(format!("{prefix}.b"), vec![cout], Init::Zeros);
        if norm && self.cfg.instance_norm {
            self.norm(prefix, cout);
        }
    }

    fn deconv(&mut self, prefix: &str, cin: usize, cout: usize) {
        // k = stride = 2: every output voxel sees exactly one tap per input channel
        let fan_in = cin as f64;
        self.push(
            format!("{prefix}.w"),
            vec![cin, cout, 2, 2, 2],
            Init::Uniform((3.0 / fan_in).sqrt()),
        );
        self.push(format!("{prefix}.b"), vec![cout], Init::Zeros);
    }

    fn linear(&mut self, prefix: &str, din: usize, dout: usize) {
        let bound = (3.0 / din as f64).sqrt();
        self.push(format!("{prefix}.w"), vec![dout, din], Init::Uniform(bound));
        self.push(format!("{prefix}.b"), vec![dout], Init::Zeros);
    }
}

/// Every parameter of the model in construction order.
pub fn param_specs(cfg: &ModelConfig) -> Result<Vec<ParamSpec>> {
    cfg.validate()?;
    let spec = cfg.fusion_spec()?;
    let e = spec.num_encoders();
    let c = cfg.embed_dim;
    let k = cfg.encoder_channels;
    let mut s = Specs {
        cfg,
        out: Vec::new(),
    };

    for (j, inputs) in spec.encoder_inputs.iter().enumerate() {
        for (name, (cin, cout, _)) in ENCODER_BLOCKS
            .iter()
            .zip(encoder_block_dims(cfg, inputs.len()))
        {
            s.conv(&format!("enc{j}.{name}"), cin, cout, 3, true);
        }
    }

    s.linear("embed", 8 * k, c);
    let m = e * cfg.tokens_per_encoder();
    s.push("embed.pos".into(), vec![m, c], Init::Uniform(0.02));

    for l in 0..cfg.layers {
        s.norm(&format!("tf{l}.ln1"), c);
        for proj in ["q", "k", "v", "o"] {
            s.linear(&format!("tf{l}.attn.{proj}"), c, c);
        }
        s.norm(&format!("tf{l}.ln2"), c);
        s.linear(&format!("tf{l}.mlp.fc1"), c, cfg.mlp_ratio * c);
        s.linear(&format!("tf{l}.mlp.fc2"), cfg.mlp_ratio * c, c);
    }

    s.deconv("dec.up0", e * c, e * c);
    s.conv("dec.map", e * c, k, 3, true);
    for (stage, cin, cout) in decoder_stage_dims(cfg) {
        s.deconv(&format!("dec.up{stage}"), cin, cout);
        s.conv(&format!("dec.fuse{stage}"), cout + e * cout, cout, 3, true);
    }
    let fan_in = cfg.base_width as f64;
    s.push(
        "head.w".into(),
        vec![cfg.num_classes, cfg.base_width, 1, 1, 1],
        Init::Uniform((3.0 / fan_in).sqrt()),
    );
    s.push("head.b".into(), vec![cfg.num_classes], Init::Zeros);
    Ok(s.out)
}

/// Named parameter tensors in construction order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T: Element> {
    tensors: IndexMap<String, Tensor<T>>,
}

impl<T: Element> ModelParams<T> {
    /// Seeded initialization; values are drawn at `f32` in construction order
    /// so every precision starts from the same point.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut tensors = IndexMap::new();
        for spec in param_specs(cfg)? {
            let t = match spec.init {
                Init::Zeros => Tensor::zeros(&spec.shape),
                Init::Ones => Tensor::full(&spec.shape, T::one()),
                Init::Uniform(bound) => {
                    let bound = bound as f32;
                    Tensor::from_fn(&spec.shape, |_| {
                        T::from_f64(rng.gen_range(-bound..=bound) as f64)
                    })
                }
            };
            tensors.insert(spec.name, t);
        }
        Ok(Self { tensors })
    }

    pub fn from_tensors(tensors: IndexMap<String, Tensor<T>>) -> Self {
        Self { tensors }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn cast<U: Element>(&self) -> ModelParams<U> {
        ModelParams {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Records every tensor as a differentiable leaf on `g`.
    pub fn bind(&self, g: &mut Graph<T>) -> BoundParams {
        BoundParams {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), g.param(v.clone())))
                .collect(),
        }
    }
}

/// Exact number of scalar parameters.
pub fn count_parameters<T: Element>(params: &ModelParams<T>) -> usize {
    params.iter().map(|(_, t)| t.numel()).sum()
}

/// Graph handles for a parameter set.
pub struct BoundParams {
    vars: IndexMap<String, Var>,
}

impl BoundParams {
    /// Pairs names with handles already recorded on a graph.
    pub fn from_vars(names: impl IntoIterator<Item = String>, vars: &[Var]) -> Self {
        Self {
            vars: names.into_iter().zip(vars.iter().copied()).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn has(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}
