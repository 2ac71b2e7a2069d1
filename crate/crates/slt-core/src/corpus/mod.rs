//! Video-sentence corpora: manifest I/O, frame decoding, tokenization,
//! pseudo-gloss extraction, batching, and a deterministic toy generator.
//!
//! Manifest format (UTF-8, line-oriented, tab-separated):
//!
//! ```text
//! #slt-manifest v1
//! #name toy
//! #language synthetic
//! #frame-format image-dir
//! id<TAB>split<TAB>frames_path<TAB>sentence[<TAB>gloss tokens]
//! ```
//!
//! `frames_path` is relative to the manifest's directory and points at either
//! a directory of zero-padded `%06d.png` frames or a packed container file.

mod batch;
mod pseudo_gloss;
mod tokenizer;
mod toy;

pub use batch::{
    epoch_batches, make_batch, sample_frame_indices, Batch, LoadedSample, SamplingPolicy, Strategy,
};
pub use pseudo_gloss::{
    default_registry, ChineseTagger, GermanTagger, IdentityTagger, PseudoGlossTagger,
    TaggerRegistry,
};
pub use tokenizer::{TokSegmentation, Tokenizer, BOS_ID, EOS_ID, MASK_ID, PAD_ID, UNK_ID};
pub use toy::{gen_toy_corpus, ToyConfig};

use crate::par;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("duplicate sample id {0:?}")]
    DuplicateId(String),
    #[error("split {0} has no samples")]
    MissingSplit(Split),
    #[error("missing frame data for ids: {}", ids.join(", "))]
    MissingFrames { ids: Vec<String> },
    #[error("no pseudo-gloss tagger registered for language {0}")]
    UnsupportedLanguage(String),
    #[error("invalid corpus configuration: {0}")]
    ConfigError(String),
    #[error("frame decode error on {path}: {msg}")]
    Decode { path: PathBuf, msg: String },
}

pub(crate) fn io_err(path: &Path, source: std::io::Error) -> CorpusError {
    CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        Split::ALL.into_iter().find(|x| x.as_str() == s)
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Language {
    German,
    Chinese,
    Synthetic,
}

impl Language {
    pub fn as_str(&self) -> &'static str {
        match self {
            Language::German => "german",
            Language::Chinese => "chinese",
            Language::Synthetic => "synthetic",
        }
    }

    pub fn parse(s: &str) -> Option<Language> {
        [Language::German, Language::Chinese, Language::Synthetic]
            .into_iter()
            .find(|x| x.as_str() == s)
    }
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FrameFormat {
    ImageDir,
    PackedVideo,
}

impl FrameFormat {
    pub fn as_str(&self) -> &'static str {
        match self {
            FrameFormat::ImageDir => "image-dir",
            FrameFormat::PackedVideo => "packed-video",
        }
    }

    pub fn parse(s: &str) -> Option<FrameFormat> {
        [FrameFormat::ImageDir, FrameFormat::PackedVideo]
            .into_iter()
            .find(|x| x.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    /// Relative to the manifest's directory.
    pub frames_path: PathBuf,
    pub sentence: String,
    pub gloss: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusManifest {
    pub name: String,
    pub language: Language,
    pub frame_format: FrameFormat,
    pub entries: Vec<ManifestEntry>,
    /// Directory holding the manifest file; frame paths resolve against it.
    pub root: PathBuf,
}

impl CorpusManifest {
    pub fn split_entries(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.frames_path)
    }
}

const MANIFEST_HEADER: &str = "#slt-manifest v1";

/// Parse and validate a manifest: unique ids, non-empty sentences, all three
/// splits populated, every referenced frame path present on disk.
pub fn load_manifest(path: &Path) -> Result<CorpusManifest, CorpusError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut lines = text.lines().enumerate();

    let (_, first) = lines.next().ok_or(CorpusError::Parse {
        line: 1,
        msg: "empty file".into(),
    })?;
    if first != MANIFEST_HEADER {
        return Err(CorpusError::Parse {
            line: 1,
            msg: format!("expected header {MANIFEST_HEADER:?}, got {first:?}"),
        });
    }

    let mut name = None;
    let mut language = None;
    let mut frame_format = None;
    let mut entries: Vec<ManifestEntry> = Vec::new();
    let mut seen_ids = BTreeSet::new();

    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            let (key, value) = rest.split_once(' ').ok_or(CorpusError::Parse {
                line: lineno,
                msg: format!("malformed header line {line:?}"),
            })?;
            match key {
                "name" => name = Some(value.to_string()),
                "language" => {
                    language = Some(Language::parse(value).ok_or(CorpusError::Parse {
                        line: lineno,
                        msg: format!("unknown language {value:?}"),
                    })?)
                }
                "frame-format" => {
                    frame_format = Some(FrameFormat::parse(value).ok_or(CorpusError::Parse {
                        line: lineno,
                        msg: format!("unknown frame format {value:?}"),
                    })?)
                }
                other => {
                    return Err(CorpusError::Parse {
                        line: lineno,
                        msg: format!("unknown header key {other:?}"),
                    })
                }
            }
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 && fields.len() != 5 {
            return Err(CorpusError::Parse {
                line: lineno,
                msg: format!("expected 4 or 5 tab-separated fields, got {}", fields.len()),
            });
        }
        let id = fields[0].to_string();
        if !seen_ids.insert(id.clone()) {
            return Err(CorpusError::DuplicateId(id));
        }
        let split = Split::parse(fields[1]).ok_or(CorpusError::Parse {
            line: lineno,
            msg: format!("unknown split {:?}", fields[1]),
        })?;
        let sentence = fields[3].to_string();
        if sentence.trim().is_empty() {
            return Err(CorpusError::Parse {
                line: lineno,
                msg: format!("empty sentence for id {id:?}"),
            });
        }
        let gloss = fields.get(4).map(|g| {
            g.split_whitespace()
                .map(str::to_owned)
                .collect::<Vec<String>>()
        });
        entries.push(ManifestEntry {
            id,
            split,
            frames_path: PathBuf::from(fields[2]),
            sentence,
            gloss,
        });
    }

    let manifest = CorpusManifest {
        name: name.unwrap_or_default(),
        language: language.ok_or(CorpusError::Parse {
            line: 0,
            msg: "missing #language header".into(),
        })?,
        frame_format: frame_format.ok_or(CorpusError::Parse {
            line: 0,
            msg: "missing #frame-format header".into(),
        })?,
        entries,
        root,
    };

    for split in Split::ALL {
        if manifest.split_entries(split).is_empty() {
            return Err(CorpusError::MissingSplit(split));
        }
    }
    let missing: Vec<String> = manifest
        .entries
        .iter()
        .filter(|e| !manifest.resolve(e).exists())
        .map(|e| e.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(CorpusError::MissingFrames { ids: missing });
    }
    Ok(manifest)
}

/// Serialize a manifest. `load_manifest(save_manifest(m))` is structurally
/// equal to `m`, and re-saving a loaded manifest is byte-identical.
pub fn save_manifest(manifest: &CorpusManifest, path: &Path) -> Result<(), CorpusError> {
    let mut out = String::new();
    out.push_str(MANIFEST_HEADER);
    out.push('\n');
    out.push_str(&format!("#name {}\n", manifest.name));
    out.push_str(&format!("#language {}\n", manifest.language));
    out.push_str(&format!("#frame-format {}\n", manifest.frame_format.as_str()));
    for e in &manifest.entries {
        assert!(
            !e.sentence.contains('\t') && !e.sentence.contains('\n'),
            "sentence for {} contains tab or newline",
            e.id
        );
        out.push_str(&format!(
            "{}\t{}\t{}\t{}",
            e.id,
            e.split,
            e.frames_path.display(),
            e.sentence
        ));
        if let Some(gloss) = &e.gloss {
            out.push('\t');
            out.push_str(&gloss.join(" "));
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}

/// A decoded frame sequence: `t` RGB frames of `h * w` pixels, packed as
/// `[t][h][w][3]` bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameSeq {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl FrameSeq {
    pub fn frame(&self, i: usize) -> &[u8] {
        let stride = self.h * self.w * 3;
        &self.data[i * stride..(i + 1) * stride]
    }
}

/// Pluggable frame decoding per manifest `frame_format`.
pub trait FrameDecoder: Send + Sync {
    fn decode(&self, path: &Path) -> Result<FrameSeq, CorpusError>;
}

/// Reads `000000.png`, `000001.png`, ... from a directory.
pub struct ImageDirDecoder;

impl FrameDecoder for ImageDirDecoder {
    fn decode(&self, path: &Path) -> Result<FrameSeq, CorpusError> {
        let mut frames = Vec::new();
        let mut names: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| io_err(path, e))?
            .filter_map(|d| d.ok().map(|d| d.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "png"))
            .collect();
        names.sort();
        if names.is_empty() {
            return Err(CorpusError::Decode {
                path: path.to_path_buf(),
                msg: "no png frames".into(),
            });
        }
        let mut dims = None;
        for name in &names {
            let img = image::open(name)
                .map_err(|e| CorpusError::Decode {
                    path: name.clone(),
                    msg: e.to_string(),
                })?
                .to_rgb8();
            let (w, h) = (img.width() as usize, img.height() as usize);
            match dims {
                None => dims = Some((h, w)),
                Some(d) if d != (h, w) => {
                    return Err(CorpusError::Decode {
                        path: name.clone(),
                        msg: format!("frame size {h}x{w} differs from first frame {d:?}"),
                    })
                }
                _ => {}
            }
            frames.extend_from_slice(img.as_raw());
        }
        let (h, w) = dims.unwrap();
        Ok(FrameSeq {
            t: names.len(),
            h,
            w,
            data: frames,
        })
    }
}

const PACK_MAGIC: &[u8; 8] = b"SLTPACK1";

/// Single-file container: magic, then little-endian u32 t/h/w, then raw RGB.
pub struct PackedDecoder;

impl FrameDecoder for PackedDecoder {
    fn decode(&self, path: &Path) -> Result<FrameSeq, CorpusError> {
        let mut file = fs::File::open(path).map_err(|e| io_err(path, e))?;
        let mut magic = [0u8; 8];
        file.read_exact(&mut magic).map_err(|e| io_err(path, e))?;
        if &magic != PACK_MAGIC {
            return Err(CorpusError::Decode {
                path: path.to_path_buf(),
                msg: "bad magic".into(),
            });
        }
        let mut dims = [0u8; 12];
        file.read_exact(&mut dims).map_err(|e| io_err(path, e))?;
        let t = u32::from_le_bytes(dims[0..4].try_into().unwrap()) as usize;
        let h = u32::from_le_bytes(dims[4..8].try_into().unwrap()) as usize;
        let w = u32::from_le_bytes(dims[8..12].try_into().unwrap()) as usize;
        let mut data = Vec::new();
        file.read_to_end(&mut data).map_err(|e| io_err(path, e))?;
        if data.len() != t * h * w * 3 {
            return Err(CorpusError::Decode {
                path: path.to_path_buf(),
                msg: format!("payload {} bytes, expected {}", data.len(), t * h * w * 3),
            });
        }
        Ok(FrameSeq { t, h, w, data })
    }
}

pub fn write_packed(path: &Path, seq: &FrameSeq) -> Result<(), CorpusError> {
    let mut out = fs::File::create(path).map_err(|e| io_err(path, e))?;
    out.write_all(PACK_MAGIC).map_err(|e| io_err(path, e))?;
    for v in [seq.t as u32, seq.h as u32, seq.w as u32] {
        out.write_all(&v.to_le_bytes()).map_err(|e| io_err(path, e))?;
    }
    out.write_all(&seq.data).map_err(|e| io_err(path, e))
}

pub fn decoder_for(format: FrameFormat) -> Box<dyn FrameDecoder> {
    match format {
        FrameFormat::ImageDir => Box::new(ImageDirDecoder),
        FrameFormat::PackedVideo => Box::new(PackedDecoder),
    }
}

/// Ordered content-word lemmas of `sentence` under the default tagger for
/// `language`, upper-cased, duplicates kept.
pub fn extract_pseudo_gloss(
    language: Language,
    sentence: &str,
) -> Result<Vec<String>, CorpusError> {
    default_registry().extract(language, sentence)
}

/// Decode every sample of one split into memory. Decoding runs across the
/// worker pool; output order follows the manifest, so the result is
/// independent of thread count.
pub fn load_split(
    manifest: &CorpusManifest,
    split: Split,
) -> Result<Vec<LoadedSample>, CorpusError> {
    let decoder = decoder_for(manifest.frame_format);
    let entries = manifest.split_entries(split);
    let decoded: Vec<Result<FrameSeq, CorpusError>> = par::map_indexed(entries.len(), |i| {
        decoder.decode(&manifest.resolve(entries[i]))
    });
    let mut out = Vec::with_capacity(entries.len());
    for (entry, frames) in entries.iter().zip(decoded) {
        out.push(LoadedSample {
            id: entry.id.clone(),
            frames: frames?,
            sentence: entry.sentence.clone(),
            gloss: entry.gloss.clone(),
        });
    }
    Ok(out)
}
