use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const MASK_ID: usize = 3;
pub const UNK_ID: usize = 4;

const SPECIALS: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<mask>", "<unk>"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokSegmentation {
    Word,
    Character,
    /// Vocabulary supplied from an external file; encoding is greedy
    /// longest-match against that vocabulary.
    SubwordExternal,
}

/// Bidirectional token/id mapping with fixed special ids at 0..=4.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tokenizer {
    vocab: Vec<String>,
    index: BTreeMap<String, usize>,
    pub segmentation: TokSegmentation,
}

fn segment(text: &str, segmentation: TokSegmentation) -> Vec<String> {
    match segmentation {
        TokSegmentation::Word => text.split_whitespace().map(str::to_owned).collect(),
        TokSegmentation::Character => text
            .chars()
            .filter(|c| !c.is_whitespace())
            .map(String::from)
            .collect(),
        TokSegmentation::SubwordExternal => {
            // Greedy longest-match happens against the vocabulary in
            // `encode`; pre-segmentation just splits on whitespace.
            text.split_whitespace().map(str::to_owned).collect()
        }
    }
}

impl Tokenizer {
    fn from_tokens<I: IntoIterator<Item = String>>(
        tokens: I,
        segmentation: TokSegmentation,
    ) -> Tokenizer {
        let mut vocab: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let uniq: BTreeSet<String> = tokens
            .into_iter()
            .filter(|t| !SPECIALS.contains(&t.as_str()))
            .collect();
        vocab.extend(uniq);
        let index = vocab
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Tokenizer {
            vocab,
            index,
            segmentation,
        }
    }

    /// Build a vocabulary from a corpus. Token order is sorted, so the
    /// mapping depends only on the token set, not on sentence order.
    pub fn from_corpus<'a, I: IntoIterator<Item = &'a str>>(
        sentences: I,
        segmentation: TokSegmentation,
    ) -> Tokenizer {
        let tokens = sentences
            .into_iter()
            .flat_map(|s| segment(s, segmentation))
            .collect::<Vec<_>>();
        Tokenizer::from_tokens(tokens, segmentation)
    }

    /// Build from an externally supplied vocabulary list (one token per
    /// entry), e.g. a subword inventory produced by another tool.
    pub fn from_vocab_list(tokens: Vec<String>) -> Tokenizer {
        Tokenizer::from_tokens(tokens, TokSegmentation::SubwordExternal)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.vocab[id]
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Encode without specials; out-of-vocabulary tokens map to `<unk>`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        match self.segmentation {
            TokSegmentation::SubwordExternal => self.encode_subword(text),
            seg => segment(text, seg)
                .iter()
                .map(|t| self.index.get(t).copied().unwrap_or(UNK_ID))
                .collect(),
        }
    }

    fn encode_subword(&self, text: &str) -> Vec<usize> {
        let mut out = Vec::new();
        for word in text.split_whitespace() {
            let mut rest = word;
            while !rest.is_empty() {
                let mut matched = None;
                // Longest vocabulary entry that prefixes the remainder.
                for end in (1..=rest.len()).rev() {
                    if !rest.is_char_boundary(end) {
                        continue;
                    }
                    if let Some(&id) = self.index.get(&rest[..end]) {
                        matched = Some((id, end));
                        break;
                    }
                }
                match matched {
                    Some((id, end)) => {
                        out.push(id);
                        rest = &rest[end..];
                    }
                    None => {
                        out.push(UNK_ID);
                        let skip = rest.chars().next().map_or(0, char::len_utf8);
                        rest = &rest[skip..];
                    }
                }
            }
        }
        out
    }

    /// Decode, skipping special ids. Word and subword tokens join with
    /// spaces; character tokens concatenate.
    pub fn decode(&self, ids: &[usize]) -> String {
        let toks: Vec<&str> = ids
            .iter()
            .filter(|&&i| i >= SPECIALS.len() && i < self.vocab.len())
            .map(|&i| self.vocab[i].as_str())
            .collect();
        match self.segmentation {
            TokSegmentation::Character => toks.concat(),
            _ => toks.join(" "),
        }
    }
}
