//! Translation metrics from scratch: corpus BLEU-1..4 and ROUGE-L under
//! named convention profiles, plus an audit that scores one corpus under
//! several profiles and reports the gaps.
//!
//! Scoring conventions (segmentation, punctuation appending, smoothing,
//! casing) change BLEU by whole points, which is exactly why they are
//! reified here as [`MetricProfile`] values instead of living as implicit
//! defaults.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricError {
    #[error("candidate/reference counts differ: {candidates} vs {references}")]
    LengthMismatch { candidates: usize, references: usize },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("audit needs at least 2 profiles, got {0}")]
    TooFewProfiles(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segmentation {
    Word,
    Character,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Casing {
    Preserve,
    Lowercase,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Smoothing {
    /// Any zero n-gram precision zeroes every BLEU-k with k >= n.
    None,
    /// Zero precisions become 1/(2^k * denominator), k counting smoothed
    /// orders from 1. This is the family of "method 2"-style fallbacks that
    /// makes library scores drift apart.
    ExpDecay,
    /// Zero numerators are replaced by 0.1 before dividing.
    AddEpsilon,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricProfile {
    pub name: String,
    pub segmentation: Segmentation,
    /// Appended to every non-empty candidate AND reference before
    /// segmentation (both sides: appending to one side only would be a
    /// different, broken convention).
    pub punctuation_append: Option<String>,
    pub casing: Casing,
    pub smoothing: Smoothing,
    pub bleu_max_n: usize,
}

impl MetricProfile {
    /// Word tokens, " ." appended, no smoothing: the legacy convention that
    /// inflates scores via an always-correct trailing token.
    pub fn phoenix_legacy() -> Self {
        MetricProfile {
            name: "phoenix-legacy".into(),
            segmentation: Segmentation::Word,
            punctuation_append: Some(" .".into()),
            casing: Casing::Preserve,
            smoothing: Smoothing::None,
            bleu_max_n: 4,
        }
    }

    /// Character tokens, no append, no smoothing.
    pub fn csl_char() -> Self {
        MetricProfile {
            name: "csl-char".into(),
            segmentation: Segmentation::Character,
            punctuation_append: None,
            casing: Casing::Preserve,
            smoothing: Smoothing::None,
            bleu_max_n: 4,
        }
    }

    /// Word tokens, no append, exponential-decay smoothing of zero counts.
    pub fn sacre_like() -> Self {
        MetricProfile {
            name: "sacre-like".into(),
            segmentation: Segmentation::Word,
            punctuation_append: None,
            casing: Casing::Preserve,
            smoothing: Smoothing::ExpDecay,
            bleu_max_n: 4,
        }
    }

    /// Word tokens with nothing else: the no-append counterpart used as the
    /// audit baseline against `phoenix-legacy`.
    pub fn word_plain() -> Self {
        MetricProfile {
            name: "word-plain".into(),
            segmentation: Segmentation::Word,
            punctuation_append: None,
            casing: Casing::Preserve,
            smoothing: Smoothing::None,
            bleu_max_n: 4,
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "phoenix-legacy" => Some(Self::phoenix_legacy()),
            "csl-char" => Some(Self::csl_char()),
            "sacre-like" => Some(Self::sacre_like()),
            "word-plain" => Some(Self::word_plain()),
            _ => None,
        }
    }

    pub fn preset_names() -> [&'static str; 4] {
        ["phoenix-legacy", "csl-char", "sacre-like", "word-plain"]
    }
}

/// Casing, then optional punctuation append (non-empty text only), then
/// segmentation. Character mode splits into Unicode codepoints and drops
/// whitespace.
pub fn apply_profile(text: &str, profile: &MetricProfile) -> Vec<String> {
    let cased = match profile.casing {
        Casing::Preserve => text.to_string(),
        Casing::Lowercase => text.to_lowercase(),
    };
    let appended = match &profile.punctuation_append {
        Some(suffix) if !cased.trim().is_empty() => format!("{cased}{suffix}"),
        _ => cased,
    };
    match profile.segmentation {
        Segmentation::Word => appended.split_whitespace().map(str::to_owned).collect(),
        Segmentation::Character => appended
            .chars()
            .filter(|c| !c.is_whitespace())
            .map(String::from)
            .collect(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BleuReport {
    /// `bleu[k-1]` is BLEU-k on the 0..100 scale.
    pub bleu: Vec<f64>,
    /// Modified n-gram precisions after smoothing, `precisions[n-1]` for n-grams.
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
    pub candidate_len: usize,
    pub reference_len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreReport {
    pub profile: String,
    pub corpus_size: usize,
    pub bleu: Vec<f64>,
    pub rouge_l: f64,
}

fn validate(cands: &[String], refs: &[String]) -> Result<(), MetricError> {
    if cands.len() != refs.len() {
        return Err(MetricError::LengthMismatch {
            candidates: cands.len(),
            references: refs.len(),
        });
    }
    if cands.is_empty() {
        return Err(MetricError::EmptyCorpus);
    }
    Ok(())
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts: HashMap<&[String], usize> = HashMap::new();
    if tokens.len() >= n {
        for i in 0..=tokens.len() - n {
            *counts.entry(&tokens[i..i + n]).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU with per-sentence clipping and brevity penalty
/// `min(1, e^(1 - r/c))` over corpus token counts.
pub fn bleu(
    cands: &[String],
    refs: &[String],
    profile: &MetricProfile,
) -> Result<BleuReport, MetricError> {
    validate(cands, refs)?;
    let max_n = profile.bleu_max_n;
    let cand_tokens: Vec<Vec<String>> = cands.iter().map(|c| apply_profile(c, profile)).collect();
    let ref_tokens: Vec<Vec<String>> = refs.iter().map(|r| apply_profile(r, profile)).collect();

    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    for (c, r) in cand_tokens.iter().zip(&ref_tokens) {
        for n in 1..=max_n {
            let cc = ngram_counts(c, n);
            let rc = ngram_counts(r, n);
            totals[n - 1] += c.len().saturating_sub(n - 1);
            for (gram, &count) in &cc {
                matches[n - 1] += count.min(rc.get(gram).copied().unwrap_or(0));
            }
        }
    }

    let candidate_len: usize = cand_tokens.iter().map(Vec::len).sum();
    let reference_len: usize = ref_tokens.iter().map(Vec::len).sum();
    if candidate_len == 0 {
        return Ok(BleuReport {
            bleu: vec![0.0; max_n],
            precisions: vec![0.0; max_n],
            brevity_penalty: 0.0,
            candidate_len,
            reference_len,
        });
    }
    let bp = 1.0f64.min((1.0 - reference_len as f64 / candidate_len as f64).exp());

    let mut precisions = vec![0.0f64; max_n];
    let mut smoothed_orders = 0u32;
    for n in 0..max_n {
        precisions[n] = if totals[n] == 0 {
            0.0
        } else if matches[n] == 0 {
            match profile.smoothing {
                Smoothing::None => 0.0,
                Smoothing::ExpDecay => {
                    smoothed_orders += 1;
                    1.0 / (2f64.powi(smoothed_orders as i32) * totals[n] as f64)
                }
                Smoothing::AddEpsilon => 0.1 / totals[n] as f64,
            }
        } else {
            matches[n] as f64 / totals[n] as f64
        };
    }

    let bleu = (1..=max_n)
        .map(|k| {
            if precisions[..k].contains(&0.0) {
                0.0
            } else {
                let log_sum: f64 = precisions[..k].iter().map(|&p| p.ln()).sum();
                100.0 * bp * (log_sum / k as f64).exp()
            }
        })
        .collect();

    Ok(BleuReport {
        bleu,
        precisions,
        brevity_penalty: bp,
        candidate_len,
        reference_len,
    })
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for ai in a {
        for (j, bj) in b.iter().enumerate() {
            cur[j + 1] = if ai == bj {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Mean per-pair LCS F-score on the 0..100 scale:
/// `F = (1 + b^2) P R / (R + b^2 P)`, 0 when the LCS is empty.
pub fn rouge_l(
    cands: &[String],
    refs: &[String],
    profile: &MetricProfile,
    beta: f64,
) -> Result<f64, MetricError> {
    validate(cands, refs)?;
    let mut sum = 0.0;
    for (c, r) in cands.iter().zip(refs) {
        let ct = apply_profile(c, profile);
        let rt = apply_profile(r, profile);
        let l = lcs_len(&ct, &rt) as f64;
        if l == 0.0 {
            continue;
        }
        let p = l / ct.len() as f64;
        let rec = l / rt.len() as f64;
        sum += (1.0 + beta * beta) * p * rec / (rec + beta * beta * p);
    }
    Ok(100.0 * sum / cands.len() as f64)
}

pub const ROUGE_BETA: f64 = 1.2;

/// BLEU-1..max plus ROUGE-L under one profile.
pub fn score_corpus(
    cands: &[String],
    refs: &[String],
    profile: &MetricProfile,
) -> Result<ScoreReport, MetricError> {
    let b = bleu(cands, refs, profile)?;
    let r = rouge_l(cands, refs, profile, ROUGE_BETA)?;
    Ok(ScoreReport {
        profile: profile.name.clone(),
        corpus_size: cands.len(),
        bleu: b.bleu,
        rouge_l: r,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditDelta {
    pub profile_a: String,
    pub profile_b: String,
    /// `bleu_delta[k-1]` is BLEU-k(a) - BLEU-k(b).
    pub bleu_delta: Vec<f64>,
    pub rouge_delta: f64,
    /// True when |BLEU-4 delta| exceeds the audit threshold.
    pub flagged: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditReport {
    pub reports: Vec<ScoreReport>,
    pub deltas: Vec<AuditDelta>,
    pub threshold: f64,
}

pub const AUDIT_BLEU4_THRESHOLD: f64 = 0.5;

/// Score one corpus under every profile and compare all pairs. A pair is
/// flagged when its BLEU-4 gap exceeds `threshold` in magnitude.
pub fn audit(
    cands: &[String],
    refs: &[String],
    profiles: &[MetricProfile],
    threshold: f64,
) -> Result<AuditReport, MetricError> {
    if profiles.len() < 2 {
        return Err(MetricError::TooFewProfiles(profiles.len()));
    }
    let reports: Vec<ScoreReport> = profiles
        .iter()
        .map(|p| score_corpus(cands, refs, p))
        .collect::<Result<_, _>>()?;
    let mut deltas = Vec::new();
    for i in 0..reports.len() {
        for j in i + 1..reports.len() {
            let (a, b) = (&reports[i], &reports[j]);
            let n = a.bleu.len().min(b.bleu.len());
            let bleu_delta: Vec<f64> = (0..n).map(|k| a.bleu[k] - b.bleu[k]).collect();
            let b4 = bleu_delta.get(3).copied().unwrap_or(0.0);
            deltas.push(AuditDelta {
                profile_a: a.profile.clone(),
                profile_b: b.profile.clone(),
                bleu_delta,
                rouge_delta: a.rouge_l - b.rouge_l,
                flagged: b4.abs() > threshold,
            });
        }
    }
    Ok(AuditReport {
        reports,
        deltas,
        threshold,
    })
}
