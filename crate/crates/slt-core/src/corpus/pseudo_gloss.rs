//! Pseudo-gloss extraction: reduce a spoken-language sentence to an ordered
//! sequence of upper-cased content-word lemmas, per language.

use super::{CorpusError, Language};
use std::collections::BTreeMap;

pub trait PseudoGlossTagger: Send + Sync {
    /// Ordered content tokens of `sentence`, lemmatized and upper-cased.
    /// Duplicates are kept; order follows the sentence.
    fn tag(&self, sentence: &str) -> Vec<String>;
}

/// Maps every token to itself (upper-cased). Used for the synthetic corpus,
/// whose sentences are already gloss-like.
pub struct IdentityTagger;

impl PseudoGlossTagger for IdentityTagger {
    fn tag(&self, sentence: &str) -> Vec<String> {
        sentence
            .split_whitespace()
            .map(|t| t.to_uppercase())
            .collect()
    }
}

/// Function words dropped by the German tagger: articles, pronouns,
/// copulas/auxiliaries, prepositions, conjunctions.
const GERMAN_STOP: &[&str] = &[
    "der", "die", "das", "den", "dem", "des", "ein", "eine", "einen", "einem", "einer", "eines",
    "ist", "sind", "war", "waren", "wird", "werden", "wurde", "wurden", "hat", "haben", "hatte",
    "hatten", "sein", "bin", "bist", "seid", "ich", "du", "er", "sie", "es", "wir", "ihr", "mich",
    "dich", "sich", "uns", "euch", "mir", "dir", "ihm", "ihnen", "und", "oder", "aber", "denn",
    "dass", "weil", "wenn", "als", "wie", "in", "im", "an", "am", "auf", "aus", "bei", "beim",
    "mit", "nach", "von", "vom", "vor", "zu", "zum", "zur", "über", "unter", "durch", "für",
    "gegen", "ohne", "um", "bis", "seit", "man", "auch", "noch", "nur", "schon", "doch", "ja",
    "nein",
];

/// Irregular lemma table; inflected forms not listed here pass through
/// unchanged. A stand-in for a real lemmatizer, sufficient for toy corpora.
const GERMAN_LEMMA: &[(&str, &str)] = &[
    ("geht", "gehen"),
    ("gehst", "gehen"),
    ("ging", "gehen"),
    ("kommt", "kommen"),
    ("kam", "kommen"),
    ("regnet", "regnen"),
    ("schneit", "schneien"),
    ("scheint", "scheinen"),
    ("wehte", "wehen"),
    ("weht", "wehen"),
    ("bleibt", "bleiben"),
    ("steigt", "steigen"),
    ("sinkt", "sinken"),
    ("zeigt", "zeigen"),
    ("wolken", "wolke"),
    ("temperaturen", "temperatur"),
    ("grade", "grad"),
    ("tage", "tag"),
    ("nächte", "nacht"),
];

pub struct GermanTagger {
    lemma: BTreeMap<&'static str, &'static str>,
}

impl GermanTagger {
    pub fn new() -> GermanTagger {
        GermanTagger {
            lemma: GERMAN_LEMMA.iter().copied().collect(),
        }
    }
}

impl Default for GermanTagger {
    fn default() -> Self {
        Self::new()
    }
}

impl PseudoGlossTagger for GermanTagger {
    fn tag(&self, sentence: &str) -> Vec<String> {
        sentence
            .split_whitespace()
            .map(|t| t.trim_matches(|c: char| c.is_ascii_punctuation()))
            .filter(|t| !t.is_empty())
            .map(|t| t.to_lowercase())
            .filter(|t| !GERMAN_STOP.contains(&t.as_str()))
            .map(|t| self.lemma.get(t.as_str()).map_or(t.clone(), |l| l.to_string()))
            .map(|t| t.to_uppercase())
            .collect()
    }
}

/// Grammatical particles and high-frequency function characters dropped by
/// the Chinese tagger.
const CHINESE_STOP: &[char] = &[
    '的', '了', '着', '是', '在', '和', '与', '或', '吗', '呢', '吧', '啊', '把', '被', '对',
    '从', '向', '我', '你', '他', '她', '它', '们', '这', '那', '之', '也', '都', '就', '很',
];

pub struct ChineseTagger;

impl PseudoGlossTagger for ChineseTagger {
    fn tag(&self, sentence: &str) -> Vec<String> {
        sentence
            .chars()
            .filter(|c| !c.is_whitespace() && !c.is_ascii_punctuation())
            .filter(|c| !matches!(c, '。' | '，' | '？' | '！' | '、' | '：' | '；'))
            .filter(|c| !CHINESE_STOP.contains(c))
            .map(|c| c.to_uppercase().to_string())
            .collect()
    }
}

/// Language-keyed tagger lookup. The default registry covers all supported
/// corpus languages; an empty or partial registry reports
/// [`CorpusError::UnsupportedLanguage`] for anything missing.
pub struct TaggerRegistry {
    taggers: BTreeMap<&'static str, Box<dyn PseudoGlossTagger>>,
}

impl TaggerRegistry {
    pub fn empty() -> TaggerRegistry {
        TaggerRegistry {
            taggers: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, language: Language, tagger: Box<dyn PseudoGlossTagger>) {
        self.taggers.insert(language.as_str(), tagger);
    }

    pub fn get(&self, language: Language) -> Result<&dyn PseudoGlossTagger, CorpusError> {
        self.taggers
            .get(language.as_str())
            .map(|b| b.as_ref())
            .ok_or_else(|| CorpusError::UnsupportedLanguage(language.to_string()))
    }

    pub fn extract(&self, language: Language, sentence: &str) -> Result<Vec<String>, CorpusError> {
        Ok(self.get(language)?.tag(sentence))
    }
}

pub fn default_registry() -> TaggerRegistry {
    let mut reg = TaggerRegistry::empty();
    reg.register(Language::German, Box::new(GermanTagger::new()));
    reg.register(Language::Chinese, Box::new(ChineseTagger));
    reg.register(Language::Synthetic, Box::new(IdentityTagger));
    reg
}
