//! Model assembly: visual encoder (spatial backbone + temporal block +
//! transformer), text encoder, shallow/deep text decoders, projection
//! heads, beam-search generation, and grouped checkpoint I/O.
//!
//! Every parameter belongs to exactly one named [`ParamGroup`]; partial
//! checkpoint transfer and freezing operate on those groups.

mod backbone;
mod checkpoint;
mod generate;
mod stacks;

pub use backbone::{BackboneNet, ResidualNet, TinyConvNet};
pub use checkpoint::{
    load_checkpoint, read_checkpoint_meta, save_checkpoint, CheckpointError, CheckpointMeta,
    LoadReport,
};
pub use generate::{generate, greedy_rollout, GenerateParams};
pub use stacks::{
    frames_from_fn, ones_mask, TextDecoder, TextEncoder, TextRep, VideoRep, VisualEncoder,
};

use crate::tensor::{ParamGroup, ParamStore};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backbone {
    TinyConv,
    Residual18,
}

/// One temporal-block stage: 1-D convolution over time (same padding),
/// batch norm, ReLU, then an optional kernel-2 stride-2 max-pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemporalStage {
    pub kernel: usize,
    pub stride: usize,
    pub pool: bool,
}

impl TemporalStage {
    pub fn pooled(kernel: usize) -> TemporalStage {
        TemporalStage {
            kernel,
            stride: 1,
            pool: true,
        }
    }

    pub fn plain(kernel: usize) -> TemporalStage {
        TemporalStage {
            kernel,
            stride: 1,
            pool: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VisualEncoderConfig {
    pub backbone: Backbone,
    /// Channel width of the first residual stage; 64 reproduces the
    /// standard 18-layer residual network, smaller keeps tests fast.
    pub residual_width: usize,
    pub temporal_stages: Vec<TemporalStage>,
    pub encoder_layers: usize,
    pub hidden_dim: usize,
    pub ff_dim: usize,
    pub heads: usize,
    pub dropout: f64,
    pub max_positions: usize,
}

impl Default for VisualEncoderConfig {
    fn default() -> Self {
        VisualEncoderConfig {
            backbone: Backbone::TinyConv,
            residual_width: 16,
            temporal_stages: vec![TemporalStage::pooled(5), TemporalStage::pooled(5)],
            encoder_layers: 2,
            hidden_dim: 64,
            ff_dim: 256,
            heads: 4,
            dropout: 0.1,
            max_positions: 512,
        }
    }
}

impl VisualEncoderConfig {
    /// Downsampling factor of the temporal block: 2^(number of pool stages).
    pub fn pool_factor(&self) -> usize {
        1 << self.temporal_stages.iter().filter(|s| s.pool).count()
    }

    /// Temporal length after the block: each pool stage maps `t` to
    /// `ceil(t / 2)`, which composes to `ceil(t / pool_factor)`.
    pub fn out_len(&self, t: usize) -> usize {
        self.temporal_stages
            .iter()
            .fold(t, |t, s| if s.pool { t.div_ceil(2) } else { t })
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.hidden_dim == 0 || self.ff_dim == 0 {
            return Err(ModelError::Config("hidden_dim and ff_dim must be positive".into()));
        }
        if self.heads == 0 || !self.hidden_dim.is_multiple_of(self.heads) {
            return Err(ModelError::Config(format!(
                "hidden_dim {} must divide across {} heads",
                self.hidden_dim, self.heads
            )));
        }
        for s in &self.temporal_stages {
            if s.stride != 1 {
                return Err(ModelError::Config(
                    "temporal conv stride must be 1; use pool stages to downsample".into(),
                ));
            }
            if s.kernel == 0 || s.kernel % 2 == 0 {
                return Err(ModelError::Config(format!(
                    "temporal kernel must be odd and positive, got {}",
                    s.kernel
                )));
            }
        }
        Ok(())
    }
}

/// Decoder depths: the shallow 3-layer and deep 12-layer stacks used by
/// the method presets. Other depths are allowed for toy configs.
pub const SHALLOW_DECODER_LAYERS: usize = 3;
pub const DEEP_DECODER_LAYERS: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderChoice {
    Shallow,
    Deep,
}

impl DecoderChoice {
    pub fn group(&self) -> ParamGroup {
        match self {
            DecoderChoice::Shallow => ParamGroup::DecoderShallow,
            DecoderChoice::Deep => ParamGroup::DecoderDeep,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TextInit {
    Random,
    /// Map groups from an existing checkpoint file into the fresh model;
    /// the group list is config data, so any external weight source that
    /// was converted to the checkpoint format can seed the text stack.
    PretrainedMultilingualCheckpoint {
        checkpoint: PathBuf,
        groups: Vec<ParamGroup>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextStackConfig {
    pub encoder_layers: usize,
    pub shallow_layers: usize,
    pub deep_layers: usize,
    pub hidden_dim: usize,
    pub ff_dim: usize,
    pub heads: usize,
    pub dropout: f64,
    pub max_positions: usize,
    pub init: TextInit,
}

impl Default for TextStackConfig {
    fn default() -> Self {
        TextStackConfig {
            encoder_layers: 2,
            shallow_layers: SHALLOW_DECODER_LAYERS,
            deep_layers: DEEP_DECODER_LAYERS,
            hidden_dim: 64,
            ff_dim: 256,
            heads: 4,
            dropout: 0.1,
            max_positions: 512,
            init: TextInit::Random,
        }
    }
}

impl TextStackConfig {
    pub fn decoder_layers(&self, choice: DecoderChoice) -> usize {
        match choice {
            DecoderChoice::Shallow => self.shallow_layers,
            DecoderChoice::Deep => self.deep_layers,
        }
    }

    pub fn validate(&self, visual: &VisualEncoderConfig) -> Result<(), ModelError> {
        if self.hidden_dim != visual.hidden_dim {
            return Err(ModelError::Config(format!(
                "text hidden_dim {} must match visual hidden_dim {}",
                self.hidden_dim, visual.hidden_dim
            )));
        }
        if self.heads == 0 || !self.hidden_dim.is_multiple_of(self.heads) {
            return Err(ModelError::Config(format!(
                "hidden_dim {} must divide across {} heads",
                self.hidden_dim, self.heads
            )));
        }
        if self.shallow_layers == 0 || self.deep_layers == 0 {
            return Err(ModelError::Config("decoder layer counts must be positive".into()));
        }
        Ok(())
    }
}

/// The full parameter set: both encoders, both decoders, and the two
/// contrastive projection heads, all registered in one [`ParamStore`].
pub struct ModelBundle {
    pub store: ParamStore,
    pub visual: VisualEncoder,
    pub text_encoder: TextEncoder,
    pub decoder_shallow: TextDecoder,
    pub decoder_deep: TextDecoder,
    pub proj_visual: crate::nn::Linear,
    pub proj_text: crate::nn::Linear,
    pub vcfg: VisualEncoderConfig,
    pub tcfg: TextStackConfig,
    pub vocab_size: usize,
}

impl ModelBundle {
    /// Build every group in a fixed order from a seeded init stream, so a
    /// given `(configs, vocab, seed)` always produces identical fresh
    /// parameters — groups later overwritten by a checkpoint load do not
    /// disturb the init of the others.
    pub fn build(
        vcfg: VisualEncoderConfig,
        tcfg: TextStackConfig,
        vocab_size: usize,
        seed: u64,
    ) -> Result<ModelBundle, ModelError> {
        vcfg.validate()?;
        tcfg.validate(&vcfg)?;
        if vocab_size == 0 {
            return Err(ModelError::Config("vocab_size must be positive".into()));
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let visual = VisualEncoder::new(&mut store, &mut rng, &vcfg);
        let text_encoder = TextEncoder::new(&mut store, &mut rng, &tcfg, vocab_size);
        let decoder_shallow = TextDecoder::new(
            &mut store,
            &mut rng,
            ParamGroup::DecoderShallow,
            &tcfg,
            tcfg.shallow_layers,
            vocab_size,
        );
        let decoder_deep = TextDecoder::new(
            &mut store,
            &mut rng,
            ParamGroup::DecoderDeep,
            &tcfg,
            tcfg.deep_layers,
            vocab_size,
        );
        let d = vcfg.hidden_dim;
        let proj_visual = crate::nn::Linear::new(
            &mut store,
            &mut rng,
            "proj_visual/head",
            ParamGroup::ProjVisual,
            d,
            d,
            true,
        );
        let proj_text = crate::nn::Linear::new(
            &mut store,
            &mut rng,
            "proj_text/head",
            ParamGroup::ProjText,
            d,
            d,
            true,
        );

        let bundle = ModelBundle {
            store,
            visual,
            text_encoder,
            decoder_shallow,
            decoder_deep,
            proj_visual,
            proj_text,
            vcfg,
            tcfg,
            vocab_size,
        };
        bundle.assert_group_partition();

        if let TextInit::PretrainedMultilingualCheckpoint { checkpoint, groups } =
            bundle.tcfg.init.clone()
        {
            let mut bundle = bundle;
            load_checkpoint(&mut bundle.store, &checkpoint, &groups)?;
            return Ok(bundle);
        }
        Ok(bundle)
    }

    pub fn decoder(&self, choice: DecoderChoice) -> &TextDecoder {
        match choice {
            DecoderChoice::Shallow => &self.decoder_shallow,
            DecoderChoice::Deep => &self.decoder_deep,
        }
    }

    /// Every parameter carries exactly one group, every group is
    /// populated, and parameter names are prefixed by their group name.
    fn assert_group_partition(&self) {
        for group in ParamGroup::ALL {
            assert!(
                self.store.iter().any(|(_, p)| p.group == group),
                "group {} has no parameters",
                group.as_str()
            );
        }
        for (_, p) in self.store.iter() {
            assert!(
                p.name.starts_with(p.group.as_str()),
                "parameter {} not under its group prefix {}",
                p.name,
                p.group.as_str()
            );
        }
    }
}
