//! Wires the loss terms to the model: builds the graph for a whole
//! training step from a batch and an [`ObjectiveSpec`].

use super::losses;
use super::{LossTerm, ObjectiveError, ObjectiveSpec};
use crate::corpus::{extract_pseudo_gloss, Batch, CorpusError, Language};
use crate::corpus::{BOS_ID, EOS_ID, MASK_ID, PAD_ID};
use crate::model::{DecoderChoice, ModelBundle, TextDecoder, TextEncoder, VideoRep, VisualEncoder};
use crate::nn::Linear;
use crate::tensor::{CtcTarget, Fwd, NodeId, ParamGroup, ParamStore};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// Reserved blank id in the pseudo-gloss vocabulary.
pub const GLOSS_BLANK: usize = 0;

/// Pseudo-gloss label vocabulary. Id 0 is the alignment blank; real
/// labels start at 1, in sorted order for build determinism.
#[derive(Debug, Clone)]
pub struct GlossVocab {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl GlossVocab {
    /// Collect the pseudo-gloss vocabulary of a sentence set.
    pub fn from_sentences<'a>(
        language: Language,
        sentences: impl IntoIterator<Item = &'a str>,
    ) -> Result<GlossVocab, CorpusError> {
        let mut set = std::collections::BTreeSet::new();
        for s in sentences {
            set.extend(extract_pseudo_gloss(language, s)?);
        }
        Ok(GlossVocab::from_tokens(set))
    }

    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> GlossVocab {
        let set: std::collections::BTreeSet<String> = tokens.into_iter().collect();
        let tokens: Vec<String> = set.into_iter().collect();
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i + 1))
            .collect();
        GlossVocab { tokens, index }
    }

    /// Vocabulary size including the blank.
    pub fn size(&self) -> usize {
        self.tokens.len() + 1
    }

    /// Map gloss tokens to label ids. Tokens outside the vocabulary
    /// (unseen at build time) are dropped rather than mapped to a catch-all,
    /// since a wrong forced label would actively misalign the frames.
    pub fn encode(&self, gloss: &[String]) -> Vec<usize> {
        gloss
            .iter()
            .filter_map(|t| self.index.get(t).copied())
            .collect()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        if id == GLOSS_BLANK {
            return Some("<blank>");
        }
        self.tokens.get(id - 1).map(|s| s.as_str())
    }

    /// Encode each batch sample's gloss annotation; samples without one
    /// fall back to extracting pseudo-glosses from the sentence.
    pub fn encode_batch(
        &self,
        batch: &Batch,
        language: Language,
    ) -> Result<Vec<Vec<usize>>, CorpusError> {
        let mut out = Vec::with_capacity(batch.size());
        for (gloss, sentence) in batch.glosses.iter().zip(&batch.sentences) {
            let tokens = match gloss {
                Some(g) => g.clone(),
                None => extract_pseudo_gloss(language, sentence)?,
            };
            out.push(self.encode(&tokens));
        }
        Ok(out)
    }
}

/// Extra heads an objective needs beyond the shared model, living in the
/// projection groups so no transfer recipe carries them forward.
pub struct ObjectiveRig {
    pub spec: ObjectiveSpec,
    /// Per-frame classifier over the pseudo-gloss vocabulary (only built
    /// when the spec aligns to pseudo-glosses).
    pub gloss_head: Option<Linear>,
}

impl ObjectiveRig {
    pub fn new(
        store: &mut ParamStore,
        spec: ObjectiveSpec,
        hidden_dim: usize,
        gloss_vocab: Option<&GlossVocab>,
        seed: u64,
    ) -> Result<ObjectiveRig, ObjectiveError> {
        spec.validate()?;
        let gloss_head = if spec.has_term(LossTerm::PseudoGlossAlign) {
            let vocab = gloss_vocab.ok_or_else(|| {
                ObjectiveError::Config(
                    "pseudo-gloss alignment needs a gloss vocabulary".into(),
                )
            })?;
            if vocab.size() < 2 {
                return Err(ObjectiveError::Config(
                    "gloss vocabulary has no labels besides the blank".into(),
                ));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x676c_6f73_735f_6864);
            Some(Linear::new(
                store,
                &mut rng,
                "proj_visual/gloss_head",
                ParamGroup::ProjVisual,
                hidden_dim,
                vocab.size(),
                true,
            ))
        } else {
            None
        };
        Ok(ObjectiveRig { spec, gloss_head })
    }
}

/// Replace `ceil(ratio * len)` positions of each row with the mask token.
/// Only real token positions (never the padding tail) are candidates.
/// Returns the masked rows and the chosen positions per row.
pub fn mask_tokens(
    tokens: &[Vec<usize>],
    lens: &[usize],
    ratio: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
    assert!(ratio > 0.0 && ratio < 1.0, "mask ratio must lie in (0, 1)");
    let mut masked = tokens.to_vec();
    let mut positions = Vec::with_capacity(tokens.len());
    for (row, &len) in masked.iter_mut().zip(lens) {
        assert!(len >= 1 && len <= row.len(), "invalid token length");
        let k = ((ratio * len as f64).ceil() as usize).clamp(1, len);
        let mut chosen: Vec<usize> = rand::seq::index::sample(rng, len, k).into_vec();
        chosen.sort_unstable();
        for &p in &chosen {
            row[p] = MASK_ID;
        }
        positions.push(chosen);
    }
    (masked, positions)
}

/// Teacher-forced decoder views of a token batch: inputs shifted right
/// behind BOS, labels ending in EOS, flattened weights marking the real
/// positions.
pub struct ShiftedBatch {
    pub input_ids: Vec<Vec<usize>>,
    pub input_mask: Vec<Vec<f64>>,
    /// Row-major `[B * (U_max + 1)]` label ids (PAD at ignored slots).
    pub labels: Vec<usize>,
    /// Matching per-position loss weights (1 at real slots, 0 at padding).
    pub weights: Vec<f64>,
}

pub fn shifted_targets(tokens: &[Vec<usize>], lens: &[usize]) -> ShiftedBatch {
    let b = tokens.len();
    assert!(b > 0, "empty batch");
    let u = tokens[0].len();
    let l = u + 1;
    let mut input_ids = Vec::with_capacity(b);
    let mut input_mask = Vec::with_capacity(b);
    let mut labels = Vec::with_capacity(b * l);
    let mut weights = Vec::with_capacity(b * l);
    for (row, &len) in tokens.iter().zip(lens) {
        assert_eq!(row.len(), u, "ragged token rows");
        assert!(len >= 1 && len <= u, "invalid token length");
        let mut inp = Vec::with_capacity(l);
        inp.push(BOS_ID);
        inp.extend_from_slice(row);
        input_ids.push(inp);
        let mut m = vec![0.0; l];
        for w in m.iter_mut().take(len + 1) {
            *w = 1.0;
        }
        input_mask.push(m.clone());
        for pos in 0..l {
            if pos < len {
                labels.push(row[pos]);
            } else if pos == len {
                labels.push(EOS_ID);
            } else {
                labels.push(PAD_ID);
            }
            weights.push(m[pos]);
        }
    }
    ShiftedBatch {
        input_ids,
        input_mask,
        labels,
        weights,
    }
}

/// Autoregressive label-smoothed cross-entropy of a decoder over video
/// memory. Used by the lightweight-translation term and by every
/// fine-tuning stage.
pub fn translation_loss(
    f: &mut Fwd,
    decoder: &TextDecoder,
    video: &VideoRep,
    tokens: &[Vec<usize>],
    lens: &[usize],
    eps: f64,
) -> Result<NodeId, ObjectiveError> {
    let shifted = shifted_targets(tokens, lens);
    let logits = decoder.forward(
        f,
        &shifted.input_ids,
        &shifted.input_mask,
        video.features,
        &video.mask,
    )?;
    let shape = f.g.shape(logits).to_vec();
    let flat = f.g.reshape(logits, &[shape[0] * shape[1], shape[2]]);
    Ok(f.g
        .cross_entropy_label_smooth(flat, &shifted.labels, &shifted.weights, eps))
}

fn masked_sentence_loss(
    f: &mut Fwd,
    text_encoder: &TextEncoder,
    decoder: &TextDecoder,
    batch: &Batch,
    ratio: f64,
) -> Result<NodeId, ObjectiveError> {
    let mut mask_rng = f.rng.clone();
    f.rng.gen::<u64>(); // advance so dropout draws differ from the masking draws
    let (masked, _) = mask_tokens(&batch.tokens, &batch.token_lens, ratio, &mut mask_rng);
    let encoded = text_encoder.forward(f, &masked, &batch.token_mask)?;
    let shifted = shifted_targets(&batch.tokens, &batch.token_lens);
    let logits = decoder.forward(
        f,
        &shifted.input_ids,
        &shifted.input_mask,
        encoded.token_features,
        &encoded.mask,
    )?;
    let shape = f.g.shape(logits).to_vec();
    let flat = f.g.reshape(logits, &[shape[0] * shape[1], shape[2]]);
    Ok(f.g
        .cross_entropy_label_smooth(flat, &shifted.labels, &shifted.weights, 0.0))
}

fn pseudo_gloss_loss(
    f: &mut Fwd,
    head: &Linear,
    video: &VideoRep,
    gloss_ids: &[Vec<usize>],
) -> Result<NodeId, ObjectiveError> {
    let b = video.mask.len();
    assert_eq!(gloss_ids.len(), b, "gloss rows must match the batch");
    let tprime = f.g.shape(video.features)[1];
    let logits = head.forward(f, video.features); // [B, T', Vg]
    let vg = f.g.shape(logits)[2];
    let mut per_sample = Vec::with_capacity(b);
    for (bi, labels) in gloss_ids.iter().enumerate() {
        let valid = video.mask[bi].iter().filter(|&&v| v == 1.0).count();
        let row = f.g.slice_axis(logits, 0, bi, bi + 1);
        let row = f.g.reshape(row, &[tprime, vg]);
        let row = f.g.slice_axis(row, 0, 0, valid);
        let log_probs = f.g.log_softmax_last(row);
        let target = CtcTarget {
            labels: labels.clone(),
            blank: GLOSS_BLANK,
        };
        let loss = f.g.ctc_loss(log_probs, &target)?;
        per_sample.push(f.g.reshape(loss, &[1]));
    }
    let all = f.g.concat(0, &per_sample);
    Ok(f.g.mean_all(all))
}

/// Everything the trainer reads off one forward pass.
pub struct ObjectiveNodes {
    pub total: NodeId,
    /// Scalar node per spec term, in spec order.
    pub per_term: Vec<(LossTerm, NodeId)>,
    /// Set when the adjacent-frame term had no valid anchor anywhere in
    /// the batch (sequences shorter than gap + 1).
    pub adjacent_degenerate: bool,
}

/// Build the loss graph for one batch. `gloss_ids` is required exactly
/// when the spec contains the pseudo-gloss term. `decoder` is whichever
/// decoder the current stage trains (the translation and masked-sentence
/// terms route through it).
#[allow(clippy::too_many_arguments)]
pub fn objective_forward(
    f: &mut Fwd,
    visual: &VisualEncoder,
    text_encoder: &TextEncoder,
    decoder: &TextDecoder,
    proj_visual: &Linear,
    proj_text: &Linear,
    rig: &ObjectiveRig,
    batch: &Batch,
    gloss_ids: Option<&[Vec<usize>]>,
) -> Result<ObjectiveNodes, ObjectiveError> {
    let spec = &rig.spec;
    spec.validate()?;

    let needs_video = spec.terms.iter().any(|&(t, _)| t != LossTerm::MaskedSentence);
    let needs_text = spec.has_term(LossTerm::ClipContrastive) || spec.has_term(LossTerm::CicoContrastive);

    let video = if needs_video {
        Some(visual.forward(f, &batch.frames, &batch.frame_mask)?)
    } else {
        None
    };
    let text = if needs_text {
        Some(text_encoder.forward(f, &batch.tokens, &batch.token_mask)?)
    } else {
        None
    };

    let mut per_term = Vec::with_capacity(spec.terms.len());
    let mut weighted = Vec::with_capacity(spec.terms.len());
    let mut adjacent_degenerate = false;

    for &(term, weight) in &spec.terms {
        let node = match term {
            LossTerm::ClipContrastive => {
                let v = video.as_ref().unwrap();
                let t = text.as_ref().unwrap();
                let vp = proj_visual.forward(f, v.summary);
                let tp = proj_text.forward(f, t.summary);
                losses::clip_contrastive(&mut f.g, vp, tp, spec.temperature)?
            }
            LossTerm::MaskedSentence => {
                masked_sentence_loss(f, text_encoder, decoder, batch, spec.mask_ratio)?
            }
            LossTerm::AdjacentFrame => {
                let v = video.as_ref().unwrap();
                let (node, degenerate) = adjacent_frame_batch(f, v, spec);
                adjacent_degenerate = degenerate;
                node
            }
            LossTerm::PseudoGlossAlign => {
                let v = video.as_ref().unwrap();
                let head = rig.gloss_head.as_ref().ok_or_else(|| {
                    ObjectiveError::Config("rig was built without a gloss head".into())
                })?;
                let ids = gloss_ids.ok_or_else(|| {
                    ObjectiveError::Config("pseudo-gloss term needs encoded gloss ids".into())
                })?;
                pseudo_gloss_loss(f, head, v, ids)?
            }
            LossTerm::LightTranslation => {
                let v = video.as_ref().unwrap();
                translation_loss(
                    f,
                    decoder,
                    v,
                    &batch.tokens,
                    &batch.token_lens,
                    spec.label_smoothing,
                )?
            }
            LossTerm::CicoContrastive => {
                let v = video.as_ref().unwrap();
                let t = text.as_ref().unwrap();
                let vp = proj_visual.forward(f, v.features);
                let tp = proj_text.forward(f, t.token_features);
                losses::cico_contrastive(
                    &mut f.g,
                    vp,
                    &v.mask,
                    tp,
                    &t.mask,
                    spec.temperature,
                    spec.cico_aggregation,
                )?
            }
        };
        per_term.push((term, node));
        weighted.push((node, weight));
    }

    let total = losses::combine(&mut f.g, &weighted);
    let value = f.g.scalar(total);
    if !value.is_finite() {
        return Err(ObjectiveError::Numerical(format!(
            "objective evaluated to {value}"
        )));
    }
    Ok(ObjectiveNodes {
        total,
        per_term,
        adjacent_degenerate,
    })
}

/// Adjacent-frame term over a batch: hinges from every sample's valid
/// anchors, averaged per sample and then across samples that had any.
fn adjacent_frame_batch(f: &mut Fwd, video: &VideoRep, spec: &ObjectiveSpec) -> (NodeId, bool) {
    let b = video.mask.len();
    let shape = f.g.shape(video.features).to_vec();
    let (tprime, d) = (shape[1], shape[2]);
    let mut per_sample = Vec::new();
    for bi in 0..b {
        let valid = video.mask[bi].iter().filter(|&&v| v == 1.0).count();
        let feats = f.g.slice_axis(video.features, 0, bi, bi + 1);
        let feats = f.g.reshape(feats, &[tprime, d]);
        let mut rng = spec.sample_negatives.then(|| {
            let mut r = f.rng.clone();
            f.rng.gen::<u64>();
            r.set_stream(bi as u64 + 1);
            r
        });
        if let Some(node) = losses::adjacent_frame_contrastive(
            &mut f.g,
            feats,
            valid,
            spec.margin,
            spec.gap,
            rng.as_mut(),
        ) {
            per_sample.push(f.g.reshape(node, &[1]));
        }
    }
    if per_sample.is_empty() {
        let zero = f.g.constant(ArrayD::zeros(IxDyn(&[])));
        return (zero, true);
    }
    let all = f.g.concat(0, &per_sample);
    (f.g.mean_all(all), false)
}

/// Per-step numbers the trainer logs.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub loss: f64,
    pub per_term: Vec<(LossTerm, f64)>,
    pub adjacent_degenerate: bool,
}

/// Run one full forward (and, when training, backward) pass over a batch.
/// Gradients accumulate into the bundle's parameter store; the caller
/// owns zeroing, clipping and the optimizer step.
pub fn training_step(
    bundle: &mut ModelBundle,
    rig: &ObjectiveRig,
    batch: &Batch,
    gloss_ids: Option<&[Vec<usize>]>,
    decoder: DecoderChoice,
    train: bool,
    seed: u64,
) -> Result<StepOutput, ObjectiveError> {
    let ModelBundle {
        store,
        visual,
        text_encoder,
        decoder_shallow,
        decoder_deep,
        proj_visual,
        proj_text,
        ..
    } = bundle;
    let decoder = match decoder {
        DecoderChoice::Shallow => &*decoder_shallow,
        DecoderChoice::Deep => &*decoder_deep,
    };
    let mut f = Fwd::new(store, train, ChaCha8Rng::seed_from_u64(seed));
    let nodes = objective_forward(
        &mut f,
        visual,
        text_encoder,
        decoder,
        proj_visual,
        proj_text,
        rig,
        batch,
        gloss_ids,
    )?;
    if train {
        f.g.backward(nodes.total, f.store);
    }
    Ok(StepOutput {
        loss: f.g.scalar(nodes.total),
        per_term: nodes
            .per_term
            .iter()
            .map(|&(t, n)| (t, f.g.scalar(n)))
            .collect(),
        adjacent_degenerate: nodes.adjacent_degenerate,
    })
}
