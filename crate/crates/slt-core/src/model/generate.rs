//! Autoregressive decoding: beam search with length-normalized scoring;
//! beam 1 degenerates to greedy argmax rollout.

use super::TextDecoder;
use crate::corpus::{BOS_ID, EOS_ID};
use crate::tensor::{Fwd, ParamStore};
use ndarray::ArrayD;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy)]
pub struct GenerateParams {
    pub beam: usize,
    pub max_len: usize,
}

impl Default for GenerateParams {
    fn default() -> Self {
        GenerateParams {
            beam: 4,
            max_len: 30,
        }
    }
}

#[derive(Clone)]
struct Beam {
    ids: Vec<usize>,
    logp: f64,
    finished: bool,
}

impl Beam {
    /// Length-normalized score over generated tokens (excluding bos).
    fn score(&self) -> f64 {
        let gen = (self.ids.len() - 1).max(1) as f64;
        self.logp / gen
    }
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|&v| v - lse).collect()
}

/// Next-token log-probabilities for each prefix, evaluated in one batched
/// eval-mode pass.
fn step_logprobs(
    store: &mut ParamStore,
    decoder: &TextDecoder,
    prefixes: &[&[usize]],
    memory: &ArrayD<f64>,
    memory_mask: &[f64],
) -> Vec<Vec<f64>> {
    let n = prefixes.len();
    let u = prefixes.iter().map(|p| p.len()).max().unwrap();
    // Left-align prefixes; all current prefixes share a length because
    // finished beams do not step, but padding keeps this general.
    let ids: Vec<Vec<usize>> = prefixes
        .iter()
        .map(|p| {
            let mut row = p.to_vec();
            row.resize(u, EOS_ID);
            row
        })
        .collect();
    let mask: Vec<Vec<f64>> = prefixes
        .iter()
        .map(|p| (0..u).map(|i| if i < p.len() { 1.0 } else { 0.0 }).collect())
        .collect();

    let mem_shape = memory.shape().to_vec();
    let tiled = memory
        .broadcast(ndarray::IxDyn(&[n, mem_shape[1], mem_shape[2]]))
        .expect("memory is [1, T, D]")
        .to_owned();
    let mem_mask: Vec<Vec<f64>> = (0..n).map(|_| memory_mask.to_vec()).collect();

    let mut f = Fwd::new(store, false, ChaCha8Rng::seed_from_u64(0));
    let logits = decoder
        .forward_from_values(&mut f, &ids, &mask, &tiled, &mem_mask)
        .expect("generation shapes are internally consistent");
    let values = f.g.value(logits);
    let v = values.shape()[2];
    prefixes
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let last = p.len() - 1;
            let row: Vec<f64> = (0..v).map(|k| values[[i, last, k]]).collect();
            log_softmax_row(&row)
        })
        .collect()
}

/// Beam-search decode for a single sample. `memory` is `[1, T', D]` from
/// the visual encoder (values, not graph nodes); returns generated token
/// ids without bos/eos. Deterministic: score ties break toward the lower
/// token id.
pub fn generate(
    store: &mut ParamStore,
    decoder: &TextDecoder,
    memory: &ArrayD<f64>,
    memory_mask: &[f64],
    params: &GenerateParams,
) -> Vec<usize> {
    assert!(params.beam >= 1 && params.max_len >= 1);
    let mut beams = vec![Beam {
        ids: vec![BOS_ID],
        logp: 0.0,
        finished: false,
    }];

    for _ in 0..params.max_len {
        let live: Vec<usize> = (0..beams.len()).filter(|&i| !beams[i].finished).collect();
        if live.is_empty() {
            break;
        }
        let prefixes: Vec<&[usize]> = live.iter().map(|&i| beams[i].ids.as_slice()).collect();
        let logprobs = step_logprobs(store, decoder, &prefixes, memory, memory_mask);

        // Candidates: every finished beam survives unchanged; every live
        // beam expands over the vocabulary.
        let mut cands: Vec<(Beam, usize)> = beams
            .iter()
            .filter(|b| b.finished)
            .map(|b| (b.clone(), usize::MAX))
            .collect();
        for (slot, &bi) in live.iter().enumerate() {
            for (tok, &lp) in logprobs[slot].iter().enumerate() {
                let mut ids = beams[bi].ids.clone();
                ids.push(tok);
                cands.push((
                    Beam {
                        ids,
                        logp: beams[bi].logp + lp,
                        finished: tok == EOS_ID,
                    },
                    tok,
                ));
            }
        }
        cands.sort_by(|(a, ta), (b, tb)| {
            b.score()
                .partial_cmp(&a.score())
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(ta.cmp(tb))
        });
        cands.truncate(params.beam);
        beams = cands.into_iter().map(|(b, _)| b).collect();
    }

    let best = beams
        .iter()
        .max_by(|a, b| {
            a.score()
                .partial_cmp(&b.score())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
        .expect("at least one beam");
    best.ids
        .iter()
        .copied()
        .filter(|&t| t != BOS_ID && t != EOS_ID)
        .collect()
}

/// Reference greedy decoder: plain argmax rollout, first-max tie-breaking.
/// `generate` with beam 1 must agree with this exactly.
pub fn greedy_rollout(
    store: &mut ParamStore,
    decoder: &TextDecoder,
    memory: &ArrayD<f64>,
    memory_mask: &[f64],
    max_len: usize,
) -> Vec<usize> {
    let mut ids = vec![BOS_ID];
    for _ in 0..max_len {
        let lp = step_logprobs(store, decoder, &[ids.as_slice()], memory, memory_mask);
        let row = &lp[0];
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        if best == EOS_ID {
            break;
        }
        ids.push(best);
    }
    ids.into_iter().filter(|&t| t != BOS_ID).collect()
}
