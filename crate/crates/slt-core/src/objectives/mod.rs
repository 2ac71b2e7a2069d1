//! Pretraining and fine-tuning losses, composable into weighted
//! multi-task objectives. Five presets name the strategy recipes the
//! trainer compares; each is just an [`ObjectiveSpec`] value.

mod losses;
mod rig;

pub use losses::{
    adjacent_frame_contrastive, cico_contrastive, clip_contrastive, combine, symmetric_infonce,
};
pub use rig::{
    mask_tokens, objective_forward, shifted_targets, training_step, translation_loss, GlossVocab,
    ObjectiveNodes, ObjectiveRig, ShiftedBatch, StepOutput, GLOSS_BLANK,
};

use crate::model::ModelError;
use crate::tensor::LossError;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("contrastive batch needs at least 2 samples, got {0}")]
    DegenerateBatch(usize),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("invalid objective: {0}")]
    Config(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// One loss term in a multi-task objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTerm {
    /// Symmetric InfoNCE between video and text summary vectors.
    ClipContrastive,
    /// Reconstruct the sentence from a partially masked encoding.
    MaskedSentence,
    /// Triplet hinge pulling neighbouring frames together and frames one
    /// gap apart.
    AdjacentFrame,
    /// Monotonic alignment of per-frame logits to pseudo-gloss labels.
    PseudoGlossAlign,
    /// Label-smoothed translation through the stage's active decoder.
    LightTranslation,
    /// Fine-grained (per-frame x per-token) cross-lingual contrastive.
    CicoContrastive,
}

impl LossTerm {
    pub const ALL: [LossTerm; 6] = [
        LossTerm::ClipContrastive,
        LossTerm::MaskedSentence,
        LossTerm::AdjacentFrame,
        LossTerm::PseudoGlossAlign,
        LossTerm::LightTranslation,
        LossTerm::CicoContrastive,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            LossTerm::ClipContrastive => "clip_contrastive",
            LossTerm::MaskedSentence => "masked_sentence",
            LossTerm::AdjacentFrame => "adjacent_frame",
            LossTerm::PseudoGlossAlign => "pseudo_gloss_align",
            LossTerm::LightTranslation => "light_translation",
            LossTerm::CicoContrastive => "cico_contrastive",
        }
    }
}

/// How the fine-grained contrastive loss pools a frame-by-token cosine
/// matrix into one similarity per sample pair.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CicoAgg {
    /// For each valid position, take the best match in the other sequence,
    /// then average; done in both directions and averaged again.
    #[default]
    MeanOfMax,
    /// The single best cosine over all valid frame/token pairs.
    MaxOfMax,
}

impl CicoAgg {
    pub fn as_str(&self) -> &'static str {
        match self {
            CicoAgg::MeanOfMax => "mean_of_max",
            CicoAgg::MaxOfMax => "max_of_max",
        }
    }
}

/// A weighted set of loss terms plus the knobs they share.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveSpec {
    pub terms: Vec<(LossTerm, f64)>,
    /// Contrastive temperature.
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// Fraction of token positions replaced by the mask token.
    #[serde(default = "default_mask_ratio")]
    pub mask_ratio: f64,
    /// Triplet margin for the adjacent-frame term.
    #[serde(default = "default_margin")]
    pub margin: f64,
    /// Negative offset (in pooled feature steps) for the adjacent-frame
    /// term.
    #[serde(default = "default_gap")]
    pub gap: usize,
    /// Label smoothing for translation-style cross-entropy.
    #[serde(default = "default_label_smoothing")]
    pub label_smoothing: f64,
    /// Draw the adjacent-frame negative uniformly from offsets >= gap
    /// instead of always taking exactly gap.
    #[serde(default)]
    pub sample_negatives: bool,
    /// Pooling scheme for the fine-grained contrastive term.
    #[serde(default)]
    pub cico_aggregation: CicoAgg,
}

fn default_temperature() -> f64 {
    0.07
}
fn default_mask_ratio() -> f64 {
    0.15
}
fn default_margin() -> f64 {
    0.5
}
fn default_gap() -> usize {
    16
}
fn default_label_smoothing() -> f64 {
    0.2
}

impl ObjectiveSpec {
    pub fn new(terms: Vec<(LossTerm, f64)>) -> ObjectiveSpec {
        ObjectiveSpec {
            terms,
            temperature: default_temperature(),
            mask_ratio: default_mask_ratio(),
            margin: default_margin(),
            gap: default_gap(),
            label_smoothing: default_label_smoothing(),
            sample_negatives: false,
            cico_aggregation: CicoAgg::default(),
        }
    }

    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if self.terms.is_empty() {
            return Err(ObjectiveError::Config("no loss terms".into()));
        }
        for &(term, w) in &self.terms {
            if !w.is_finite() || w < 0.0 {
                return Err(ObjectiveError::Config(format!(
                    "weight for {} must be finite and non-negative, got {w}",
                    term.as_str()
                )));
            }
        }
        if !self.terms.iter().any(|&(_, w)| w > 0.0) {
            return Err(ObjectiveError::Config(
                "at least one term needs a positive weight".into(),
            ));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(ObjectiveError::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(ObjectiveError::Config(format!(
                "mask_ratio must lie in (0, 1), got {}",
                self.mask_ratio
            )));
        }
        if !(self.margin.is_finite() && self.margin > 0.0) {
            return Err(ObjectiveError::Config(format!(
                "margin must be positive, got {}",
                self.margin
            )));
        }
        if self.gap == 0 {
            return Err(ObjectiveError::Config("gap must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(ObjectiveError::Config(format!(
                "label_smoothing must lie in [0, 1), got {}",
                self.label_smoothing
            )));
        }
        Ok(())
    }

    pub fn has_term(&self, term: LossTerm) -> bool {
        self.terms.iter().any(|&(t, _)| t == term)
    }

    /// Append a term (used when a recipe adds a loss for fine-tuning).
    pub fn with_term(mut self, term: LossTerm, weight: f64) -> ObjectiveSpec {
        self.terms.push((term, weight));
        self
    }
}

/// The five pretraining strategies under comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PresetName {
    GfsltVlp,
    Signcl,
    Sign2gptPg,
    FlaLlm,
    C2rl,
}

impl PresetName {
    pub const ALL: [PresetName; 5] = [
        PresetName::GfsltVlp,
        PresetName::Signcl,
        PresetName::Sign2gptPg,
        PresetName::FlaLlm,
        PresetName::C2rl,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            PresetName::GfsltVlp => "gfslt_vlp",
            PresetName::Signcl => "signcl",
            PresetName::Sign2gptPg => "sign2gpt_pg",
            PresetName::FlaLlm => "fla_llm",
            PresetName::C2rl => "c2rl",
        }
    }

    pub fn parse(s: &str) -> Option<PresetName> {
        PresetName::ALL.iter().copied().find(|p| p.as_str() == s)
    }

    /// The pretraining objective this strategy uses.
    pub fn objective(&self) -> ObjectiveSpec {
        let terms = match self {
            PresetName::GfsltVlp => vec![
                (LossTerm::ClipContrastive, 1.0),
                (LossTerm::MaskedSentence, 1.0),
            ],
            PresetName::Signcl => vec![
                (LossTerm::ClipContrastive, 1.0),
                (LossTerm::MaskedSentence, 1.0),
                (LossTerm::AdjacentFrame, 1.0),
            ],
            PresetName::Sign2gptPg => vec![(LossTerm::PseudoGlossAlign, 1.0)],
            PresetName::FlaLlm => vec![(LossTerm::LightTranslation, 1.0)],
            PresetName::C2rl => vec![
                (LossTerm::CicoContrastive, 1.0),
                (LossTerm::LightTranslation, 1.0),
            ],
        };
        ObjectiveSpec::new(terms)
    }

    /// Whether the strategy keeps its contrastive regularizer while
    /// fine-tuning for translation (the adjacent-frame recipe does).
    pub fn finetune_adds_adjacent(&self) -> bool {
        matches!(self, PresetName::Signcl)
    }
}

impl std::fmt::Display for PresetName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}
