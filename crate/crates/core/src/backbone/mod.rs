//! Trainable noise predictor: a two-stage U-Net with self- and cross-attention
//! at its two coarsest resolutions, a lookup-table text encoder, and versioned
//! parameter storage.

mod checkpoint;
pub mod text;
mod unet;

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, FORMAT_VERSION, MAGIC};
pub use text::{tokenize, TextEmbedding, TokenSequence};

use crate::attention::AttentionMaskSet;
use crate::codec::LatentMap;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::tensor::Tensor;

/// Architecture hyper-parameters. Stored inside checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Latent channels (3·f² for the space-to-depth codec).
    pub in_channels: usize,
    /// Channels at full latent resolution; coarser stages use twice this.
    pub base_width: usize,
    pub text_dim: usize,
    pub time_dim: usize,
    pub groups: usize,
    pub vocab_size: usize,
    pub max_tokens: usize,
}

/// Named size presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Test-sized network (base width 8).
    Tiny,
    /// Default desk-scale network (base width 32).
    #[default]
    Small,
    /// Base width 64.
    Medium,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Preset::Tiny),
            "small" => Ok(Preset::Small),
            "medium" => Ok(Preset::Medium),
            other => Err(Error::invalid(format!("unknown backbone preset `{other}`"))),
        }
    }
}

impl BackboneConfig {
    pub fn preset(preset: Preset, in_channels: usize) -> Self {
        let base = match preset {
            Preset::Tiny => 8,
            Preset::Small => 32,
            Preset::Medium => 64,
        };
        Self {
            in_channels,
            base_width: base,
            text_dim: base,
            time_dim: 4 * base,
            groups: 8,
            vocab_size: text::VOCAB_SIZE as usize,
            max_tokens: text::MAX_TOKENS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let b = self.base_width;
        if self.groups == 0 || !b.is_multiple_of(self.groups) {
            return Err(Error::invalid(format!(
                "base width {b} must be a positive multiple of {} groups",
                self.groups
            )));
        }
        if self.in_channels == 0 || self.text_dim == 0 || self.time_dim < 2 || self.vocab_size < 2 {
            return Err(Error::invalid("backbone dimensions must be positive"));
        }
        Ok(())
    }

    /// Attention feature grids for a latent of the given size.
    pub fn attention_sides(&self, height: usize, width: usize) -> Vec<(usize, usize)> {
        vec![(height / 2, width / 2), (height / 4, width / 4)]
    }

    /// Checks that a latent can pass through both downsampling stages.
    pub fn check_latent(&self, latent: &LatentMap) -> Result<()> {
        if latent.channels() != self.in_channels {
            return Err(Error::shape(
                &[self.in_channels, latent.height(), latent.width()],
                &latent.shape(),
            ));
        }
        if !latent.height().is_multiple_of(4) || !latent.width().is_multiple_of(4) || latent.height() == 0 || latent.width() == 0 {
            return Err(Error::invalid(format!(
                "latent {}x{} must be a non-empty multiple of 4 on both sides",
                latent.height(),
                latent.width()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum Init {
    /// `N(0, gain² / fan_in)`.
    Normal { fan_in: usize, gain: f64 },
    Zeros,
    Ones,
}

/// Named parameter arrays plus the architecture they belong to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    config: BackboneConfig,
    /// Number of finetuning iterations applied since initialisation.
    pub finetune_iters: u64,
    tensors: BTreeMap<String, Tensor>,
}

impl ParameterSet {
    /// Deterministic initialisation from `seed`.
    pub fn init(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (name, shape, init) in unet::parameter_layout(&config) {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Normal { fan_in, gain } => {
                    let std = gain / (fan_in as f64).sqrt();
                    (0..n)
                        .map(|_| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            z * std
                        })
                        .collect()
                }
            };
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        Ok(Self {
            config,
            finetune_iters: 0,
            tensors,
        })
    }

    pub(crate) fn from_parts(
        config: BackboneConfig,
        finetune_iters: u64,
        tensors: BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        config.validate()?;
        let layout = unet::parameter_layout(&config);
        if layout.len() != tensors.len() {
            return Err(Error::Corrupt(format!(
                "expected {} arrays, found {}",
                layout.len(),
                tensors.len()
            )));
        }
        for (name, shape, _) in &layout {
            match tensors.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Corrupt(format!(
                        "array `{name}` has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::Corrupt(format!("missing array `{name}`"))),
            }
        }
        let ps = Self {
            config,
            finetune_iters,
            tensors,
        };
        if !ps.is_finite() {
            return Err(Error::Corrupt("non-finite parameter values".into()));
        }
        Ok(ps)
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }
}

/// Pluggable denoiser: the toy U-Net is the reference implementation, a
/// pretrained latent diffusion model can slot in behind the same surface.
pub trait NoisePredictor: Send + Sync {
    fn encode_text(&self, tokens: &TokenSequence) -> Result<TextEmbedding>;

    fn predict_noise(
        &self,
        x_t: &LatentMap,
        text: &TextEmbedding,
        t: usize,
        masks: Option<&AttentionMaskSet>,
    ) -> Result<LatentMap>;

    /// Feature grids at which the predictor runs attention.
    fn attention_sides(&self, latent_height: usize, latent_width: usize) -> Vec<(usize, usize)>;
}

/// Input text for a forward pass: either raw tokens (gradients flow into the
/// embedding table) or a precomputed embedding.
#[derive(Debug, Clone, Copy)]
pub enum TextInput<'a> {
    Tokens(&'a TokenSequence),
    Embedding(&'a TextEmbedding),
}

/// The U-Net without weights; forward passes borrow a [`ParameterSet`].
#[derive(Debug, Clone, Copy)]
pub struct Backbone {
    config: BackboneConfig,
}

impl Backbone {
    pub fn new(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// Records a forward pass on `graph` and returns the noise prediction
    /// node (shape `[C, H, W]`).
    pub fn forward<'p>(
        &self,
        graph: &mut Graph<'p>,
        params: &'p ParameterSet,
        x_t: &LatentMap,
        text: TextInput<'_>,
        t: usize,
        masks: Option<&AttentionMaskSet>,
    ) -> Result<crate::graph::Var> {
        if params.config != self.config {
            return Err(Error::invalid("parameter set belongs to a different backbone config"));
        }
        self.config.check_latent(x_t)?;
        unet::forward(&self.config, graph, params, x_t, text, t, masks)
    }

    pub fn encode_text(&self, tokens: &TokenSequence, params: &ParameterSet) -> Result<TextEmbedding> {
        let mut g = Graph::new(false);
        let v = unet::text_features(&self.config, &mut g, params, tokens)?;
        TextEmbedding::new(g.value(v).clone())
    }

    pub fn predict_noise(
        &self,
        params: &ParameterSet,
        x_t: &LatentMap,
        text: TextInput<'_>,
        t: usize,
        masks: Option<&AttentionMaskSet>,
    ) -> Result<LatentMap> {
        let mut g = Graph::new(false);
        let out = self.forward(&mut g, params, x_t, text, t, masks)?;
        let [c, h, w] = x_t.shape();
        LatentMap::new(c, h, w, g.value(out).data().to_vec())
    }
}

/// A backbone bound to an immutable parameter snapshot.
#[derive(Debug, Clone)]
pub struct DiffusionModel {
    backbone: Backbone,
    params: Arc<ParameterSet>,
}

impl DiffusionModel {
    pub fn new(params: Arc<ParameterSet>) -> Result<Self> {
        Ok(Self {
            backbone: Backbone::new(*params.config())?,
            params,
        })
    }

    pub fn params(&self) -> &Arc<ParameterSet> {
        &self.params
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }
}

impl NoisePredictor for DiffusionModel {
    fn encode_text(&self, tokens: &TokenSequence) -> Result<TextEmbedding> {
        self.backbone.encode_text(tokens, &self.params)
    }

    fn predict_noise(
        &self,
        x_t: &LatentMap,
        text: &TextEmbedding,
        t: usize,
        masks: Option<&AttentionMaskSet>,
    ) -> Result<LatentMap> {
        self.backbone
            .predict_noise(&self.params, x_t, TextInput::Embedding(text), t, masks)
    }

    fn attention_sides(&self, latent_height: usize, latent_width: usize) -> Vec<(usize, usize)> {
        self.backbone.config.attention_sides(latent_height, latent_width)
    }
}
