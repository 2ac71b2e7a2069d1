use super::{CorpusError, FrameSeq};
use crate::corpus::tokenizer::{Tokenizer, PAD_ID};
use ndarray::ArrayD;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Keep all frames up to `max_frames`; above that, draw `max_frames`
    /// indices without replacement and sort them.
    RandomCap,
    /// Keep a uniform stride of frames so that `ceil(keep_ratio * t)`
    /// survive, then apply the cap.
    UniformSubsample,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingPolicy {
    pub strategy: Strategy,
    pub max_frames: usize,
    pub keep_ratio: f64,
}

impl Default for SamplingPolicy {
    fn default() -> Self {
        SamplingPolicy {
            strategy: Strategy::RandomCap,
            max_frames: 300,
            keep_ratio: 1.0,
        }
    }
}

impl SamplingPolicy {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.max_frames == 0 {
            return Err(CorpusError::ConfigError("max_frames must be positive".into()));
        }
        if !(self.keep_ratio > 0.0 && self.keep_ratio <= 1.0) {
            return Err(CorpusError::ConfigError(format!(
                "keep_ratio must be in (0, 1], got {}",
                self.keep_ratio
            )));
        }
        Ok(())
    }
}

fn random_cap(t: usize, max: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if t <= max {
        return (0..t).collect();
    }
    let mut picked = rand::seq::index::sample(rng, t, max).into_vec();
    picked.sort_unstable();
    picked
}

/// Frame indices to keep for a sequence of length `t`. Indices are strictly
/// increasing; the result is a pure function of `(policy, t, rng state)`.
pub fn sample_frame_indices(t: usize, policy: &SamplingPolicy, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match policy.strategy {
        Strategy::RandomCap => random_cap(t, policy.max_frames, rng),
        Strategy::UniformSubsample => {
            let keep = (policy.keep_ratio * t as f64).ceil() as usize;
            let keep = keep.clamp(1, t);
            // i-th kept frame sits at floor(i * t / keep); for t=8, ratio
            // 0.5 this selects {0, 2, 4, 6}.
            let stride: Vec<usize> = (0..keep).map(|i| i * t / keep).collect();
            let capped = random_cap(stride.len(), policy.max_frames, rng);
            capped.into_iter().map(|i| stride[i]).collect()
        }
    }
}

/// One decoded sample held in memory.
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub id: String,
    pub frames: FrameSeq,
    pub sentence: String,
    pub gloss: Option<Vec<String>>,
}

/// A padded model-ready batch. Frame tensors are `[B, T_max, 3, H, W]` in
/// [0, 1], with zero frames past each true length; masks hold 1.0 at valid
/// positions.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<String>,
    pub frames: ArrayD<f64>,
    pub frame_mask: Vec<Vec<f64>>,
    pub frame_lens: Vec<usize>,
    /// Sentence token ids (no specials), padded with the pad id.
    pub tokens: Vec<Vec<usize>>,
    pub token_mask: Vec<Vec<f64>>,
    pub token_lens: Vec<usize>,
    pub sentences: Vec<String>,
    pub glosses: Vec<Option<Vec<String>>>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.ids.len()
    }

    pub fn t_max(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn u_max(&self) -> usize {
        self.tokens.first().map_or(0, Vec::len)
    }
}

/// Assemble a batch from decoded samples. Frame sampling for sample `i`
/// draws from a stream seeded by `(seed, i)`, so content depends only on
/// the inputs and `seed`, never on worker count or call order.
pub fn make_batch(
    samples: &[&LoadedSample],
    tokenizer: &Tokenizer,
    policy: &SamplingPolicy,
    seed: u64,
) -> Result<Batch, CorpusError> {
    policy.validate()?;
    if samples.is_empty() {
        return Err(CorpusError::ConfigError("empty batch".into()));
    }
    let h = samples[0].frames.h;
    let w = samples[0].frames.w;
    for s in samples {
        if s.frames.h != h || s.frames.w != w {
            return Err(CorpusError::ConfigError(format!(
                "frame size mismatch in batch: {}x{} vs {h}x{w} (id {})",
                s.frames.h, s.frames.w, s.id
            )));
        }
        if s.frames.t == 0 {
            return Err(CorpusError::ConfigError(format!(
                "sample {} has no frames",
                s.id
            )));
        }
    }

    let picked: Vec<Vec<usize>> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            sample_frame_indices(s.frames.t, policy, &mut rng)
        })
        .collect();
    let frame_lens: Vec<usize> = picked.iter().map(Vec::len).collect();
    let t_max = *frame_lens.iter().max().unwrap();
    let b = samples.len();

    let mut frames = ArrayD::zeros(ndarray::IxDyn(&[b, t_max, 3, h, w]));
    for (bi, (s, idxs)) in samples.iter().zip(&picked).enumerate() {
        for (ti, &fi) in idxs.iter().enumerate() {
            let src = s.frames.frame(fi);
            for y in 0..h {
                for x in 0..w {
                    for c in 0..3 {
                        frames[[bi, ti, c, y, x]] =
                            f64::from(src[(y * w + x) * 3 + c]) / 255.0;
                    }
                }
            }
        }
    }
    let frame_mask: Vec<Vec<f64>> = frame_lens
        .iter()
        .map(|&l| (0..t_max).map(|t| if t < l { 1.0 } else { 0.0 }).collect())
        .collect();

    let encoded: Vec<Vec<usize>> = samples.iter().map(|s| tokenizer.encode(&s.sentence)).collect();
    let token_lens: Vec<usize> = encoded.iter().map(Vec::len).collect();
    let u_max = *token_lens.iter().max().unwrap();
    let tokens: Vec<Vec<usize>> = encoded
        .iter()
        .map(|ids| {
            let mut row = ids.clone();
            row.resize(u_max, PAD_ID);
            row
        })
        .collect();
    let token_mask: Vec<Vec<f64>> = token_lens
        .iter()
        .map(|&l| (0..u_max).map(|u| if u < l { 1.0 } else { 0.0 }).collect())
        .collect();

    Ok(Batch {
        ids: samples.iter().map(|s| s.id.clone()).collect(),
        frames,
        frame_mask,
        frame_lens,
        tokens,
        token_mask,
        token_lens,
        sentences: samples.iter().map(|s| s.sentence.clone()).collect(),
        glosses: samples.iter().map(|s| s.gloss.clone()).collect(),
    })
}

/// Shuffled index batches for one epoch: a pure function of
/// `(n, batch_size, seed, epoch)`. The final short batch is kept.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    assert!(batch_size > 0, "batch_size must be positive");
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5851_f42d_4c95_7f2d * epoch as u64));
    use rand::seq::SliceRandom;
    order.shuffle(&mut rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}
