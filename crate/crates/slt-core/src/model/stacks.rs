//! Sequence encoders and decoders over the tape. Padding is handled with
//! per-position feature masking plus additive attention biases, so valid
//! positions are unaffected by how much padding a batch carries.

use super::{BackboneNet, ModelError, TextStackConfig, VisualEncoderConfig};
use crate::nn::{
    causal_bias, channel_mask, feature_mask, padding_bias, pool_mask, BatchNorm, Conv1d,
    Embedding, EncoderLayer, DecoderLayer, LayerNorm, Linear, PosEmbedding,
};
use crate::tensor::{Fwd, NodeId, ParamGroup, ParamStore};
use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;

/// Frame-level features after the visual stack, plus the summary token.
pub struct VideoRep {
    /// `[B, T', D]`, zeroed at padded positions.
    pub features: NodeId,
    /// `[B][T']` validity mask after temporal pooling.
    pub mask: Vec<Vec<f64>>,
    /// `[B, D]` transformer output at the prepended summary position.
    pub summary: NodeId,
}

/// Token-level features after the text encoder, plus the language summary.
pub struct TextRep {
    pub token_features: NodeId,
    pub mask: Vec<Vec<f64>>,
    pub summary: NodeId,
}

struct TemporalStageNet {
    conv: Conv1d,
    bn: BatchNorm,
    pool: bool,
}

pub struct VisualEncoder {
    backbone: BackboneNet,
    temporal: Vec<TemporalStageNet>,
    summary_token: crate::tensor::ParamId,
    pos: PosEmbedding,
    layers: Vec<EncoderLayer>,
    final_ln: LayerNorm,
}

impl VisualEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &VisualEncoderConfig) -> Self {
        let backbone = BackboneNet::new(store, rng, cfg);
        let mut temporal = Vec::new();
        let d = cfg.hidden_dim;
        for (i, stage) in cfg.temporal_stages.iter().enumerate() {
            temporal.push(TemporalStageNet {
                conv: Conv1d::new(
                    store,
                    rng,
                    &format!("temporal_block/stage{i}/conv"),
                    ParamGroup::TemporalBlock,
                    d,
                    d,
                    stage.kernel,
                    true,
                ),
                bn: BatchNorm::new(
                    store,
                    &format!("temporal_block/stage{i}/bn"),
                    ParamGroup::TemporalBlock,
                    d,
                ),
                pool: stage.pool,
            });
        }
        let group = ParamGroup::VisualTransformer;
        let summary_token = store.add(
            "visual_transformer/summary_token",
            group,
            crate::nn::uniform(&[1, 1, d], 0.02, rng),
            true,
        );
        let pos = PosEmbedding::new(store, rng, "visual_transformer", group, cfg.max_positions, d);
        let layers = (0..cfg.encoder_layers)
            .map(|i| {
                EncoderLayer::new(
                    store,
                    rng,
                    &format!("visual_transformer/layer{i}"),
                    group,
                    d,
                    cfg.heads,
                    cfg.ff_dim,
                    cfg.dropout,
                )
            })
            .collect();
        let final_ln = LayerNorm::new(store, "visual_transformer/final_ln", group, d);
        VisualEncoder {
            backbone,
            temporal,
            summary_token,
            pos,
            layers,
            final_ln,
        }
    }

    /// `frames` is `[B, T, 3, H, W]` in [0, 1]; `mask[b][t]` marks real
    /// frames. Returns pooled frame features, the pooled mask, and the
    /// summary vector.
    pub fn forward(
        &self,
        f: &mut Fwd,
        frames: &ArrayD<f64>,
        mask: &[Vec<f64>],
    ) -> Result<VideoRep, ModelError> {
        let shape = frames.shape().to_vec();
        if shape.len() != 5 || shape[2] != 3 {
            return Err(ModelError::Shape(format!(
                "expected frames [B, T, 3, H, W], got {shape:?}"
            )));
        }
        let (b, t) = (shape[0], shape[1]);
        if mask.len() != b || mask.iter().any(|m| m.len() != t) {
            return Err(ModelError::Shape(format!(
                "frame mask does not match batch {b} x time {t}"
            )));
        }

        let x = f.g.constant(frames.clone());
        let x = f.g.reshape(x, &[b * t, 3, shape[3], shape[4]]);
        let x = self.backbone.forward(f, x);
        let d = f.g.shape(x)[1];
        let x = f.g.reshape(x, &[b, t, d]);
        // Zero features at padded frames so later stages see exactly the
        // zeros that same-padding convolution assumes past the boundary.
        let mut x = f.g.mul_const(x, &feature_mask(mask));

        let mut mask: Vec<Vec<f64>> = mask.to_vec();
        x = f.g.permute(x, &[0, 2, 1]); // [B, D, T]
        for stage in &self.temporal {
            x = stage.conv.forward(f, x);
            x = stage.bn.forward(f, x);
            x = f.g.relu(x);
            x = f.g.mul_const(x, &channel_mask(&mask));
            if stage.pool {
                // Post-ReLU activations are non-negative, so zeroed padding
                // can never win a max-pool window over a valid frame.
                x = f.g.maxpool1d_ceil(x);
                mask = pool_mask(&mask);
                x = f.g.mul_const(x, &channel_mask(&mask));
            }
        }
        let x = f.g.permute(x, &[0, 2, 1]); // [B, T', D]
        let t_out = mask[0].len();

        let summary = f.p(self.summary_token);
        let summary = f.g.tile0(summary, b);
        let x = f.g.concat(1, &[summary, x]);
        let x = self.pos.forward(f, x);

        let full_mask: Vec<Vec<f64>> = mask
            .iter()
            .map(|m| {
                let mut row = Vec::with_capacity(1 + t_out);
                row.push(1.0);
                row.extend(m);
                row
            })
            .collect();
        let bias = padding_bias(&full_mask, 1 + t_out);
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(f, h, Some(&bias));
        }
        let h = self.final_ln.forward(f, h);

        let summary = f.g.slice_axis(h, 1, 0, 1);
        let summary = f.g.reshape(summary, &[b, d]);
        let features = f.g.slice_axis(h, 1, 1, 1 + t_out);
        let features = f.g.mul_const(features, &feature_mask(&mask));
        Ok(VideoRep {
            features,
            mask,
            summary,
        })
    }
}

pub struct TextEncoder {
    embed: Embedding,
    summary_token: crate::tensor::ParamId,
    pos: PosEmbedding,
    layers: Vec<EncoderLayer>,
    final_ln: LayerNorm,
}

impl TextEncoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        cfg: &TextStackConfig,
        vocab: usize,
    ) -> Self {
        let group = ParamGroup::TextEncoder;
        let d = cfg.hidden_dim;
        let embed = Embedding::new(store, rng, "text_encoder/embed", group, vocab, d);
        let summary_token = store.add(
            "text_encoder/summary_token",
            group,
            crate::nn::uniform(&[1, 1, d], 0.02, rng),
            true,
        );
        let pos = PosEmbedding::new(store, rng, "text_encoder", group, cfg.max_positions, d);
        let layers = (0..cfg.encoder_layers)
            .map(|i| {
                EncoderLayer::new(
                    store,
                    rng,
                    &format!("text_encoder/layer{i}"),
                    group,
                    d,
                    cfg.heads,
                    cfg.ff_dim,
                    cfg.dropout,
                )
            })
            .collect();
        let final_ln = LayerNorm::new(store, "text_encoder/final_ln", group, d);
        TextEncoder {
            embed,
            summary_token,
            pos,
            layers,
            final_ln,
        }
    }

    /// `ids` is a padded `[B][U]` id matrix with matching mask.
    pub fn forward(
        &self,
        f: &mut Fwd,
        ids: &[Vec<usize>],
        mask: &[Vec<f64>],
    ) -> Result<TextRep, ModelError> {
        let b = ids.len();
        if b == 0 {
            return Err(ModelError::Shape("empty batch".into()));
        }
        let u = ids[0].len();
        if u == 0 || ids.iter().any(|r| r.len() != u) {
            return Err(ModelError::Shape("token rows must be non-empty and equal length".into()));
        }
        if mask.len() != b || mask.iter().any(|m| m.len() != u) {
            return Err(ModelError::Shape("token mask does not match ids".into()));
        }

        let flat: Vec<usize> = ids.iter().flatten().copied().collect();
        let x = self.embed.forward(f, &flat, &[b, u]);
        let x = f.g.mul_const(x, &feature_mask(mask));
        let d = f.g.shape(x)[2];

        let summary = f.p(self.summary_token);
        let summary = f.g.tile0(summary, b);
        let x = f.g.concat(1, &[summary, x]);
        let x = self.pos.forward(f, x);

        let full_mask: Vec<Vec<f64>> = mask
            .iter()
            .map(|m| {
                let mut row = Vec::with_capacity(1 + u);
                row.push(1.0);
                row.extend(m);
                row
            })
            .collect();
        let bias = padding_bias(&full_mask, 1 + u);
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(f, h, Some(&bias));
        }
        let h = self.final_ln.forward(f, h);

        let summary = f.g.slice_axis(h, 1, 0, 1);
        let summary = f.g.reshape(summary, &[b, d]);
        let token_features = f.g.slice_axis(h, 1, 1, 1 + u);
        let token_features = f.g.mul_const(token_features, &feature_mask(mask));
        Ok(TextRep {
            token_features,
            mask: mask.to_vec(),
            summary,
        })
    }
}

pub struct TextDecoder {
    embed: Embedding,
    pos: PosEmbedding,
    layers: Vec<DecoderLayer>,
    final_ln: LayerNorm,
    out: Linear,
}

impl TextDecoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        group: ParamGroup,
        cfg: &TextStackConfig,
        num_layers: usize,
        vocab: usize,
    ) -> Self {
        let prefix = group.as_str();
        let d = cfg.hidden_dim;
        let embed = Embedding::new(store, rng, &format!("{prefix}/embed"), group, vocab, d);
        let pos = PosEmbedding::new(store, rng, prefix, group, cfg.max_positions, d);
        let layers = (0..num_layers)
            .map(|i| {
                DecoderLayer::new(
                    store,
                    rng,
                    &format!("{prefix}/layer{i}"),
                    group,
                    d,
                    cfg.heads,
                    cfg.ff_dim,
                    cfg.dropout,
                )
            })
            .collect();
        let final_ln = LayerNorm::new(store, &format!("{prefix}/final_ln"), group, d);
        let out = Linear::new(store, rng, &format!("{prefix}/out"), group, d, vocab, true);
        TextDecoder {
            embed,
            pos,
            layers,
            final_ln,
            out,
        }
    }

    /// Causal decode: `input_ids [B][U]` (already shifted right), memory
    /// features `[B, T', D]` with mask. Returns `[B, U, V]` logits.
    pub fn forward(
        &self,
        f: &mut Fwd,
        input_ids: &[Vec<usize>],
        input_mask: &[Vec<f64>],
        memory: NodeId,
        memory_mask: &[Vec<f64>],
    ) -> Result<NodeId, ModelError> {
        let b = input_ids.len();
        if b == 0 {
            return Err(ModelError::Shape("empty batch".into()));
        }
        let u = input_ids[0].len();
        if u == 0 || input_ids.iter().any(|r| r.len() != u) {
            return Err(ModelError::Shape("target rows must be non-empty and equal length".into()));
        }
        if input_mask.len() != b || input_mask.iter().any(|m| m.len() != u) {
            return Err(ModelError::Shape("target mask does not match ids".into()));
        }
        let mem_shape = f.g.shape(memory).to_vec();
        if mem_shape.len() != 3 || mem_shape[0] != b {
            return Err(ModelError::Shape(format!(
                "memory must be [B, T', D] with B={b}, got {mem_shape:?}"
            )));
        }
        if memory_mask.len() != b || memory_mask.iter().any(|m| m.len() != mem_shape[1]) {
            return Err(ModelError::Shape("memory mask does not match memory".into()));
        }
        if memory_mask.iter().any(|m| m.iter().all(|&v| v == 0.0)) {
            return Err(ModelError::Shape(
                "memory mask has a sample with no valid positions".into(),
            ));
        }

        let flat: Vec<usize> = input_ids.iter().flatten().copied().collect();
        let x = self.embed.forward(f, &flat, &[b, u]);
        let x = self.pos.forward(f, x);

        let self_bias = causal_bias(input_mask);
        let cross_bias = padding_bias(memory_mask, u);
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(f, h, memory, &self_bias, Some(&cross_bias));
        }
        let h = self.final_ln.forward(f, h);
        Ok(self.out.forward(f, h))
    }

    /// Decode from raw memory values (used at generation time, where the
    /// encoder has already run in a previous graph).
    pub fn forward_from_values(
        &self,
        f: &mut Fwd,
        input_ids: &[Vec<usize>],
        input_mask: &[Vec<f64>],
        memory: &ArrayD<f64>,
        memory_mask: &[Vec<f64>],
    ) -> Result<NodeId, ModelError> {
        let node = f.g.constant(memory.clone());
        self.forward(f, input_ids, input_mask, node, memory_mask)
    }
}

/// Validity mask of all ones for unpadded sequences.
pub fn ones_mask(b: usize, l: usize) -> Vec<Vec<f64>> {
    vec![vec![1.0; l]; b]
}

/// Convenience for tests: a `[B, T, 3, H, W]` frame tensor from a flat
/// closure.
pub fn frames_from_fn(
    b: usize,
    t: usize,
    h: usize,
    w: usize,
    f: impl Fn(usize, usize, usize, usize, usize) -> f64,
) -> ArrayD<f64> {
    let mut out = ArrayD::zeros(IxDyn(&[b, t, 3, h, w]));
    for bi in 0..b {
        for ti in 0..t {
            for c in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        out[[bi, ti, c, y, x]] = f(bi, ti, c, y, x);
                    }
                }
            }
        }
    }
    out
}
