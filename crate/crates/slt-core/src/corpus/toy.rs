//! Synthetic corpus generator. Each sample renders a sequence of sign
//! glyphs (one colored block per sign, position and color keyed by sign id)
//! with small per-frame jitter; the reference sentence lists the sign tokens
//! in reverse order, so translation is a learnable but non-trivial mapping.

use super::{
    save_manifest, write_packed, CorpusError, CorpusManifest, FrameFormat, FrameSeq, Language,
    ManifestEntry, Split,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fs;
use std::path::PathBuf;

#[derive(Debug, Clone)]
pub struct ToyConfig {
    pub num_signs: usize,
    pub num_sentences: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
    pub frames_per_sign: usize,
    pub frame_size: usize,
    pub frame_format: FrameFormat,
    pub out_dir: PathBuf,
}

impl ToyConfig {
    pub fn new(out_dir: PathBuf) -> ToyConfig {
        ToyConfig {
            num_signs: 10,
            num_sentences: 200,
            min_len: 2,
            max_len: 5,
            seed: 7,
            frames_per_sign: 4,
            frame_size: 16,
            frame_format: FrameFormat::ImageDir,
            out_dir,
        }
    }

    fn validate(&self) -> Result<(), CorpusError> {
        if !(2..=256).contains(&self.num_signs) {
            return Err(CorpusError::ConfigError(format!(
                "num_signs must be in 2..=256, got {}",
                self.num_signs
            )));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(CorpusError::ConfigError(format!(
                "need 1 <= min_len <= max_len, got {}..{}",
                self.min_len, self.max_len
            )));
        }
        if self.max_len * self.frames_per_sign > 300 {
            return Err(CorpusError::ConfigError(format!(
                "max_len * frames_per_sign = {} exceeds the 300-frame budget",
                self.max_len * self.frames_per_sign
            )));
        }
        if self.num_sentences < 3 {
            return Err(CorpusError::ConfigError(
                "need at least 3 sentences to populate train/dev/test".into(),
            ));
        }
        if self.frame_size < 8 {
            return Err(CorpusError::ConfigError("frame_size must be >= 8".into()));
        }
        Ok(())
    }
}

/// Block color for a sign: position encodes `sign % 16`, color encodes
/// `sign / 16`, so up to 256 signs stay visually distinct.
fn sign_color(sign: usize) -> [u8; 3] {
    let k = sign / 16;
    let mut c = [
        100 + 155 * ((k >> 1) & 1) as u8,
        100 + 155 * ((k >> 2) & 1) as u8,
        100 + 155 * (k & 1) as u8,
    ];
    if k & 8 != 0 {
        for v in &mut c {
            *v = (*v as u32 * 6 / 10) as u8;
        }
    }
    c
}

fn render_frame(sign: usize, size: usize, dx: i32, dy: i32, bright: i32) -> Vec<u8> {
    let mut px = vec![0u8; size * size * 3];
    for y in 0..size {
        for x in 0..size {
            let o = (y * size + x) * 3;
            px[o] = 30;
            px[o + 1] = 30;
            px[o + 2] = 40;
        }
    }
    let cell = size / 4;
    let bx = (sign % 16) % 4;
    let by = (sign % 16) / 4;
    let color = sign_color(sign);
    for yy in 0..cell {
        for xx in 0..cell {
            let y = (by * cell) as i32 + yy as i32 + dy;
            let x = (bx * cell) as i32 + xx as i32 + dx;
            if y < 0 || x < 0 || y >= size as i32 || x >= size as i32 {
                continue;
            }
            let o = (y as usize * size + x as usize) * 3;
            for c in 0..3 {
                px[o + c] = (color[c] as i32 + bright).clamp(0, 255) as u8;
            }
        }
    }
    px
}

fn render_sample(signs: &[usize], cfg: &ToyConfig, rng: &mut ChaCha8Rng) -> FrameSeq {
    let size = cfg.frame_size;
    let mut data = Vec::with_capacity(signs.len() * cfg.frames_per_sign * size * size * 3);
    for &sign in signs {
        for _ in 0..cfg.frames_per_sign {
            let dx = rng.gen_range(-1..=1);
            let dy = rng.gen_range(-1..=1);
            let bright = rng.gen_range(-10..=10);
            data.extend(render_frame(sign, size, dx, dy, bright));
        }
    }
    FrameSeq {
        t: signs.len() * cfg.frames_per_sign,
        h: size,
        w: size,
        data,
    }
}

fn write_image_dir(dir: &PathBuf, seq: &FrameSeq) -> Result<(), CorpusError> {
    fs::create_dir_all(dir).map_err(|e| super::io_err(dir, e))?;
    for i in 0..seq.t {
        let img = image::RgbImage::from_raw(seq.w as u32, seq.h as u32, seq.frame(i).to_vec())
            .expect("frame buffer matches dimensions");
        let path = dir.join(format!("{i:06}.png"));
        img.save(&path).map_err(|e| CorpusError::Decode {
            path,
            msg: e.to_string(),
        })?;
    }
    Ok(())
}

/// Generate a complete on-disk toy corpus and return its manifest. The
/// output (frames, sentence text, split assignment) is a pure function of
/// the config, so regeneration with the same config is byte-identical.
pub fn gen_toy_corpus(cfg: &ToyConfig) -> Result<CorpusManifest, CorpusError> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| super::io_err(&cfg.out_dir, e))?;

    // Sign sequences: uniform lengths, uniform signs, no adjacent repeats.
    let mut seq_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sequences = Vec::with_capacity(cfg.num_sentences);
    for _ in 0..cfg.num_sentences {
        let len = seq_rng.gen_range(cfg.min_len..=cfg.max_len);
        let mut signs: Vec<usize> = Vec::with_capacity(len);
        for i in 0..len {
            let s = if i == 0 {
                seq_rng.gen_range(0..cfg.num_signs)
            } else {
                let r = seq_rng.gen_range(0..cfg.num_signs - 1);
                if r >= signs[i - 1] {
                    r + 1
                } else {
                    r
                }
            };
            signs.push(s);
        }
        sequences.push(signs);
    }

    // 80/10/10 split by seeded shuffle; every split gets at least one sample.
    let n = cfg.num_sentences;
    let mut order: Vec<usize> = (0..n).collect();
    let mut split_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    use rand::seq::SliceRandom;
    order.shuffle(&mut split_rng);
    let dev_n = (n / 10).max(1);
    let test_n = (n / 10).max(1);
    let mut split_of = vec![Split::Train; n];
    for &i in order.iter().take(dev_n) {
        split_of[i] = Split::Dev;
    }
    for &i in order.iter().skip(dev_n).take(test_n) {
        split_of[i] = Split::Test;
    }

    let mut entries = Vec::with_capacity(n);
    for (idx, signs) in sequences.iter().enumerate() {
        let id = format!("toy{idx:06}");
        let mut jitter_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (idx as u64).wrapping_mul(0x2545_f491_4f6c_dd1d));
        let seq = render_sample(signs, cfg, &mut jitter_rng);
        let frames_path = match cfg.frame_format {
            FrameFormat::ImageDir => {
                let rel = PathBuf::from("frames").join(&id);
                write_image_dir(&cfg.out_dir.join(&rel), &seq)?;
                rel
            }
            FrameFormat::PackedVideo => {
                let frames_dir = cfg.out_dir.join("frames");
                fs::create_dir_all(&frames_dir).map_err(|e| super::io_err(&frames_dir, e))?;
                let rel = PathBuf::from("frames").join(format!("{id}.pack"));
                write_packed(&cfg.out_dir.join(&rel), &seq)?;
                rel
            }
        };
        let gloss: Vec<String> = signs.iter().map(|s| format!("SIGN{s}")).collect();
        let sentence = gloss.iter().rev().cloned().collect::<Vec<_>>().join(" ");
        entries.push(ManifestEntry {
            id,
            split: split_of[idx],
            frames_path,
            sentence,
            gloss: Some(gloss),
        });
    }

    let manifest = CorpusManifest {
        name: "toy".into(),
        language: Language::Synthetic,
        frame_format: cfg.frame_format,
        entries,
        root: cfg.out_dir.clone(),
    };
    save_manifest(&manifest, &cfg.out_dir.join("manifest.tsv"))?;
    Ok(manifest)
}
