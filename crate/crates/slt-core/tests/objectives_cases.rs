//! Hand-oracle checks for the loss terms: closed-form losses on crafted
//! inputs, masking/shifting helpers, and the losses wired through a small
//! model.

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slt_core::corpus::{Batch, Language, BOS_ID, EOS_ID, MASK_ID, PAD_ID};
use slt_core::model::{frames_from_fn, DecoderChoice, ModelBundle, TextStackConfig, VisualEncoderConfig};
use slt_core::objectives::{
    adjacent_frame_contrastive, cico_contrastive, clip_contrastive, combine, mask_tokens,
    objective_forward, shifted_targets, training_step, translation_loss, CicoAgg, GlossVocab,
    LossTerm, ObjectiveError, ObjectiveRig, ObjectiveSpec, PresetName, GLOSS_BLANK,
};
use slt_core::tensor::{Fwd, Graph, LossError, NodeId, ParamGroup};

fn arr2(rows: &[&[f64]]) -> ArrayD<f64> {
    let r = rows.len();
    let c = rows[0].len();
    let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
    ArrayD::from_shape_vec(IxDyn(&[r, c]), flat).unwrap()
}

fn arr3(shape: [usize; 3], flat: Vec<f64>) -> ArrayD<f64> {
    ArrayD::from_shape_vec(IxDyn(&shape), flat).unwrap()
}

fn eval_clip(video: ArrayD<f64>, text: ArrayD<f64>, tau: f64) -> Result<f64, ObjectiveError> {
    let mut g = Graph::new(false);
    let v = g.constant(video);
    let t = g.constant(text);
    let loss = clip_contrastive(&mut g, v, t, tau)?;
    Ok(g.scalar(loss))
}

// Straight-line reimplementation of symmetric InfoNCE used as the oracle.
fn ce_to(logits: &[f64], target: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
    lse - logits[target]
}

fn infonce_oracle(sim: &[Vec<f64>], tau: f64) -> f64 {
    let n = sim.len();
    let mut total = 0.0;
    for i in 0..n {
        let row: Vec<f64> = (0..n).map(|j| sim[i][j] / tau).collect();
        let col: Vec<f64> = (0..n).map(|j| sim[j][i] / tau).collect();
        total += ce_to(&row, i) + ce_to(&col, i);
    }
    total / (2.0 * n as f64)
}

#[test]
fn clip_identical_summaries_cost_log_n() {
    let row: &[f64] = &[0.3, -1.2, 2.0];
    let m = arr2(&[row, row, row, row]);
    let loss = eval_clip(m.clone(), m, 0.07).unwrap();
    assert!((loss - 4.0f64.ln()).abs() < 1e-9, "loss {loss}");
}

#[test]
fn clip_orthonormal_pairs_sharp_temperature_vanishes() {
    let v = arr2(&[&[1.0, 0.0], &[0.0, 1.0]]);
    let loss = eval_clip(v.clone(), v, 0.01).unwrap();
    assert!(loss >= 0.0 && loss < 1e-8, "loss {loss}");
}

#[test]
fn clip_swapping_modalities_is_symmetric() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut random = |n: usize, d: usize| {
        let flat: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.5..1.5)).collect();
        ArrayD::from_shape_vec(IxDyn(&[n, d]), flat).unwrap()
    };
    let v = random(5, 3);
    let t = random(5, 3);
    let a = eval_clip(v.clone(), t.clone(), 0.07).unwrap();
    let b = eval_clip(t, v, 0.07).unwrap();
    assert!((a - b).abs() < 1e-12, "{a} vs {b}");
}

#[test]
fn clip_invariant_to_common_rescaling() {
    let v = arr2(&[&[0.4, -0.2, 0.9], &[1.0, 0.5, -0.3], &[-0.7, 0.1, 0.2]]);
    let t = arr2(&[&[0.1, 0.8, -0.5], &[-0.4, 0.2, 0.6], &[0.9, -0.9, 0.3]]);
    let base = eval_clip(v.clone(), t.clone(), 0.07).unwrap();
    let scaled = eval_clip(v.mapv(|x| x * 10.0), t.mapv(|x| x * 10.0), 0.07).unwrap();
    assert!((base - scaled).abs() < 1e-6, "{base} vs {scaled}");
    let one_side = eval_clip(v.mapv(|x| x * 10.0), t, 0.07).unwrap();
    assert!((base - one_side).abs() < 1e-6, "{base} vs {one_side}");
}

#[test]
fn clip_matches_handrolled_infonce() {
    let v = arr2(&[&[0.4, -0.2], &[1.0, 0.5], &[-0.7, 0.1]]);
    let t = arr2(&[&[0.1, 0.8], &[-0.4, 0.2], &[0.9, -0.9]]);
    let norm = |m: &ArrayD<f64>, i: usize| -> Vec<f64> {
        let row: Vec<f64> = (0..2).map(|j| m[[i, j]]).collect();
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        row.iter().map(|x| x / n).collect()
    };
    let mut sim = vec![vec![0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let a = norm(&v, i);
            let b = norm(&t, j);
            sim[i][j] = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        }
    }
    let expect = infonce_oracle(&sim, 0.07);
    let got = eval_clip(v, t, 0.07).unwrap();
    assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
}

#[test]
fn clip_rejects_single_sample() {
    let v = arr2(&[&[1.0, 0.0]]);
    match eval_clip(v.clone(), v, 0.07) {
        Err(ObjectiveError::DegenerateBatch(1)) => {}
        other => panic!("expected DegenerateBatch(1), got {other:?}"),
    }
}

#[test]
fn clip_rejects_zero_norm_summary() {
    let v = arr2(&[&[1.0, 0.0], &[0.0, 0.0]]);
    let t = arr2(&[&[1.0, 0.0], &[0.0, 1.0]]);
    match eval_clip(v, t, 0.07) {
        Err(ObjectiveError::Numerical(msg)) => assert!(msg.contains("row 1"), "{msg}"),
        other => panic!("expected Numerical, got {other:?}"),
    }
}

fn eval_adjacent(
    feats: ArrayD<f64>,
    valid: usize,
    margin: f64,
    gap: usize,
) -> Option<f64> {
    let mut g = Graph::new(false);
    let f = g.constant(feats);
    adjacent_frame_contrastive(&mut g, f, valid, margin, gap, None).map(|n| g.scalar(n))
}

#[test]
fn adjacent_identical_features_cost_margin() {
    let row: &[f64] = &[0.6, 0.8];
    let feats = arr2(&[row, row, row, row, row]);
    let loss = eval_adjacent(feats, 5, 0.5, 2).unwrap();
    assert!((loss - 0.5).abs() < 1e-12, "loss {loss}");
}

#[test]
fn adjacent_satisfied_margin_is_zero() {
    // Anchor and positive coincide; the negative sits at distance 2.
    let feats = arr2(&[&[1.0, 0.0], &[1.0, 0.0], &[-1.0, 0.0]]);
    let loss = eval_adjacent(feats, 3, 0.5, 2).unwrap();
    assert_eq!(loss, 0.0);
}

#[test]
fn adjacent_three_frame_hand_oracle() {
    // Unit vectors at angles 0, ~53.13 and 90 degrees. Single anchor:
    // d_pos = |f0 - f1| = sqrt(0.8), d_neg = |f0 - f2| = sqrt(2), so the
    // hinge is sqrt(0.8) - sqrt(2) + 0.75.
    let feats = arr2(&[&[1.0, 0.0], &[0.6, 0.8], &[0.0, 1.0]]);
    let expect = 0.8f64.sqrt() - 2.0f64.sqrt() + 0.75;
    let loss = eval_adjacent(feats, 3, 0.75, 2).unwrap();
    assert!((loss - expect).abs() < 1e-9, "{loss} vs {expect}");
}

#[test]
fn adjacent_too_short_sequence_is_degenerate() {
    let feats = arr2(&[&[1.0, 0.0], &[0.0, 1.0]]);
    assert!(eval_adjacent(feats, 2, 0.5, 2).is_none());
}

#[test]
fn adjacent_rotation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let flat: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let feats = ArrayD::from_shape_vec(IxDyn(&[6, 2]), flat.clone()).unwrap();
    let theta: f64 = 0.73;
    let rotated: Vec<f64> = flat
        .chunks(2)
        .flat_map(|p| {
            [
                theta.cos() * p[0] - theta.sin() * p[1],
                theta.sin() * p[0] + theta.cos() * p[1],
            ]
        })
        .collect();
    let rot = ArrayD::from_shape_vec(IxDyn(&[6, 2]), rotated).unwrap();
    let a = eval_adjacent(feats, 6, 0.5, 2).unwrap();
    let b = eval_adjacent(rot, 6, 0.5, 2).unwrap();
    assert!((a - b).abs() < 1e-5, "{a} vs {b}");
}

#[test]
fn adjacent_sampling_with_single_candidate_matches_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let flat: Vec<f64> = (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let feats = ArrayD::from_shape_vec(IxDyn(&[5, 2]), flat).unwrap();
    // gap = 4 on a 5-frame sequence leaves one anchor and one candidate
    // negative, so the sampled and fixed choices must coincide.
    let det = eval_adjacent(feats.clone(), 5, 0.5, 4).unwrap();
    let mut g = Graph::new(false);
    let f = g.constant(feats);
    let mut srng = ChaCha8Rng::seed_from_u64(123);
    let node = adjacent_frame_contrastive(&mut g, f, 5, 0.5, 4, Some(&mut srng)).unwrap();
    assert_eq!(g.scalar(node), det);
}

fn ones(b: usize, l: usize) -> Vec<Vec<f64>> {
    vec![vec![1.0; l]; b]
}

fn eval_cico_agg(
    video: ArrayD<f64>,
    vmask: &[Vec<f64>],
    text: ArrayD<f64>,
    tmask: &[Vec<f64>],
    tau: f64,
    agg: CicoAgg,
) -> Result<f64, ObjectiveError> {
    let mut g = Graph::new(false);
    let v = g.constant(video);
    let t = g.constant(text);
    let loss = cico_contrastive(&mut g, v, vmask, t, tmask, tau, agg)?;
    Ok(g.scalar(loss))
}

fn eval_cico(
    video: ArrayD<f64>,
    vmask: &[Vec<f64>],
    text: ArrayD<f64>,
    tmask: &[Vec<f64>],
    tau: f64,
) -> Result<f64, ObjectiveError> {
    eval_cico_agg(video, vmask, text, tmask, tau, CicoAgg::MeanOfMax)
}

#[test]
fn cico_single_step_sequences_reduce_to_summary_loss() {
    let v = arr2(&[&[0.4, -0.2, 0.9], &[1.0, 0.5, -0.3], &[-0.7, 0.1, 0.2]]);
    let t = arr2(&[&[0.1, 0.8, -0.5], &[-0.4, 0.2, 0.6], &[0.9, -0.9, 0.3]]);
    let clip = eval_clip(v.clone(), t.clone(), 0.07).unwrap();
    let v3 = v.into_shape_with_order(IxDyn(&[3, 1, 3])).unwrap();
    let t3 = t.into_shape_with_order(IxDyn(&[3, 1, 3])).unwrap();
    let cico = eval_cico(v3, &ones(3, 1), t3, &ones(3, 1), 0.07).unwrap();
    assert!((clip - cico).abs() < 1e-7, "{clip} vs {cico}");
}

// Loop-based oracle: normalized cosines, per-pair mean-of-max in both
// directions, then the same InfoNCE as the summary loss.
fn cico_oracle(
    video: &[Vec<Vec<f64>>],
    vmask: &[Vec<f64>],
    text: &[Vec<Vec<f64>>],
    tmask: &[Vec<f64>],
    tau: f64,
) -> f64 {
    let n = video.len();
    let unit = |v: &[f64]| -> Vec<f64> {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / norm.max(1e-300)).collect()
    };
    let mut sim = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let mut vt = 0.0;
            let mut frames = 0.0;
            for (ti, f) in video[i].iter().enumerate() {
                if vmask[i][ti] == 0.0 {
                    continue;
                }
                let fu = unit(f);
                let best = text[j]
                    .iter()
                    .enumerate()
                    .filter(|(ui, _)| tmask[j][*ui] == 1.0)
                    .map(|(_, w)| {
                        let wu = unit(w);
                        fu.iter().zip(&wu).map(|(a, b)| a * b).sum::<f64>()
                    })
                    .fold(f64::NEG_INFINITY, f64::max);
                vt += best;
                frames += 1.0;
            }
            let mut tv = 0.0;
            let mut tokens = 0.0;
            for (ui, w) in text[j].iter().enumerate() {
                if tmask[j][ui] == 0.0 {
                    continue;
                }
                let wu = unit(w);
                let best = video[i]
                    .iter()
                    .enumerate()
                    .filter(|(ti, _)| vmask[i][*ti] == 1.0)
                    .map(|(_, f)| {
                        let fu = unit(f);
                        wu.iter().zip(&fu).map(|(a, b)| a * b).sum::<f64>()
                    })
                    .fold(f64::NEG_INFINITY, f64::max);
                tv += best;
                tokens += 1.0;
            }
            sim[i][j] = 0.5 * (vt / frames + tv / tokens);
        }
    }
    infonce_oracle(&sim, tau)
}

#[test]
fn cico_two_sample_brute_force_oracle() {
    let video = vec![
        vec![vec![1.0, 0.2], vec![-0.4, 0.9]],
        vec![vec![0.3, -0.8], vec![0.7, 0.6]],
    ];
    let text = vec![
        vec![vec![0.9, 0.1], vec![0.2, -0.5]],
        vec![vec![-0.6, 0.4], vec![0.5, 0.5]],
    ];
    let vmask = ones(2, 2);
    let tmask = ones(2, 2);
    let expect = cico_oracle(&video, &vmask, &text, &tmask, 0.07);

    let vflat: Vec<f64> = video.iter().flatten().flatten().copied().collect();
    let tflat: Vec<f64> = text.iter().flatten().flatten().copied().collect();
    let got = eval_cico(
        arr3([2, 2, 2], vflat),
        &vmask,
        arr3([2, 2, 2], tflat),
        &tmask,
        0.07,
    )
    .unwrap();
    assert!((got - expect).abs() < 1e-6, "{got} vs {expect}");
}

#[test]
fn cico_brute_force_oracle_with_padding() {
    let vmask = vec![vec![1.0, 1.0, 0.0], vec![1.0, 1.0, 1.0]];
    let tmask = vec![vec![1.0, 1.0, 1.0], vec![1.0, 1.0, 0.0]];
    let video = vec![
        vec![vec![1.0, 0.2], vec![-0.4, 0.9], vec![9.0, 9.0]],
        vec![vec![0.3, -0.8], vec![0.7, 0.6], vec![-0.2, 0.1]],
    ];
    let text = vec![
        vec![vec![0.9, 0.1], vec![0.2, -0.5], vec![0.4, 0.4]],
        vec![vec![-0.6, 0.4], vec![0.5, 0.5], vec![7.0, -7.0]],
    ];
    let expect = cico_oracle(&video, &vmask, &text, &tmask, 0.07);
    let vflat: Vec<f64> = video.iter().flatten().flatten().copied().collect();
    let tflat: Vec<f64> = text.iter().flatten().flatten().copied().collect();
    let got = eval_cico(
        arr3([2, 3, 2], vflat),
        &vmask,
        arr3([2, 3, 2], tflat),
        &tmask,
        0.07,
    )
    .unwrap();
    assert!((got - expect).abs() < 1e-6, "{got} vs {expect}");
}

#[test]
fn cico_ignores_pad_content() {
    let vmask = vec![vec![1.0, 1.0, 0.0], vec![1.0, 1.0, 1.0]];
    let tmask = vec![vec![1.0, 1.0, 1.0], vec![1.0, 1.0, 0.0]];
    let mut video: Vec<f64> = vec![
        1.0, 0.2, -0.4, 0.9, 9.0, 9.0, // sample 0, slot 2 padded
        0.3, -0.8, 0.7, 0.6, -0.2, 0.1,
    ];
    let mut text: Vec<f64> = vec![
        0.9, 0.1, 0.2, -0.5, 0.4, 0.4, //
        -0.6, 0.4, 0.5, 0.5, 7.0, -7.0, // sample 1, slot 2 padded
    ];
    let a = eval_cico(
        arr3([2, 3, 2], video.clone()),
        &vmask,
        arr3([2, 3, 2], text.clone()),
        &tmask,
        0.07,
    )
    .unwrap();
    // Overwrite the padded slots with entirely different garbage.
    video[4] = -123.0;
    video[5] = 0.004;
    text[10] = 55.5;
    text[11] = 55.5;
    let b = eval_cico(
        arr3([2, 3, 2], video),
        &vmask,
        arr3([2, 3, 2], text),
        &tmask,
        0.07,
    )
    .unwrap();
    assert!((a - b).abs() < 1e-12, "{a} vs {b}");
}

#[test]
fn cico_rejects_single_sample() {
    let v = arr3([1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]);
    match eval_cico(v.clone(), &ones(1, 2), v, &ones(1, 2), 0.07) {
        Err(ObjectiveError::DegenerateBatch(1)) => {}
        other => panic!("expected DegenerateBatch(1), got {other:?}"),
    }
}

#[test]
fn cico_rejects_fully_padded_sample() {
    let v = arr3([2, 2, 2], vec![1.0; 8]);
    let bad = vec![vec![1.0, 1.0], vec![0.0, 0.0]];
    match eval_cico(v.clone(), &bad, v, &ones(2, 2), 0.07) {
        Err(ObjectiveError::Numerical(msg)) => assert!(msg.contains("no valid frames"), "{msg}"),
        other => panic!("expected Numerical, got {other:?}"),
    }
}

#[test]
fn cico_max_of_max_matches_pairwise_maximum_oracle() {
    let vmask = vec![vec![1.0, 1.0, 0.0], vec![1.0, 1.0, 1.0]];
    let tmask = vec![vec![1.0, 1.0, 1.0], vec![1.0, 1.0, 0.0]];
    let video = vec![
        vec![vec![1.0, 0.2], vec![-0.4, 0.9], vec![9.0, 9.0]],
        vec![vec![0.3, -0.8], vec![0.7, 0.6], vec![-0.2, 0.1]],
    ];
    let text = vec![
        vec![vec![0.9, 0.1], vec![0.2, -0.5], vec![0.4, 0.4]],
        vec![vec![-0.6, 0.4], vec![0.5, 0.5], vec![7.0, -7.0]],
    ];
    let unit = |v: &[f64]| -> Vec<f64> {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / norm).collect()
    };
    let mut sim = vec![vec![0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            let mut best = f64::NEG_INFINITY;
            for (t, f) in video[i].iter().enumerate() {
                if vmask[i][t] == 0.0 {
                    continue;
                }
                for (u, w) in text[j].iter().enumerate() {
                    if tmask[j][u] == 0.0 {
                        continue;
                    }
                    let fu = unit(f);
                    let wu = unit(w);
                    let cos: f64 = fu.iter().zip(&wu).map(|(a, b)| a * b).sum();
                    best = best.max(cos);
                }
            }
            sim[i][j] = best;
        }
    }
    let expect = infonce_oracle(&sim, 0.07);

    let vflat: Vec<f64> = video.iter().flatten().flatten().copied().collect();
    let tflat: Vec<f64> = text.iter().flatten().flatten().copied().collect();
    let got = eval_cico_agg(
        arr3([2, 3, 2], vflat),
        &vmask,
        arr3([2, 3, 2], tflat),
        &tmask,
        0.07,
        CicoAgg::MaxOfMax,
    )
    .unwrap();
    assert!((got - expect).abs() < 1e-6, "{got} vs {expect}");
}

#[test]
fn cico_max_of_max_also_reduces_to_summary_loss_on_single_steps() {
    let v = arr2(&[&[0.4, -0.2, 0.9], &[1.0, 0.5, -0.3], &[-0.7, 0.1, 0.2]]);
    let t = arr2(&[&[0.1, 0.8, -0.5], &[-0.4, 0.2, 0.6], &[0.9, -0.9, 0.3]]);
    let clip = eval_clip(v.clone(), t.clone(), 0.07).unwrap();
    let v3 = v.into_shape_with_order(IxDyn(&[3, 1, 3])).unwrap();
    let t3 = t.into_shape_with_order(IxDyn(&[3, 1, 3])).unwrap();
    let cico = eval_cico_agg(v3, &ones(3, 1), t3, &ones(3, 1), 0.07, CicoAgg::MaxOfMax).unwrap();
    assert!((clip - cico).abs() < 1e-7, "{clip} vs {cico}");
}

#[test]
fn combine_weighted_sum() {
    let mut g = Graph::new(false);
    let a = g.scalar_const(1.25);
    let b = g.scalar_const(0.75);
    let single = combine(&mut g, &[(a, 1.0)]);
    assert_eq!(g.scalar(single), 1.25);
    let drop_b = combine(&mut g, &[(a, 1.0), (b, 0.0)]);
    assert_eq!(g.scalar(drop_b), 1.25);
    let avg = combine(&mut g, &[(a, 0.5), (b, 0.5)]);
    assert!((g.scalar(avg) - 1.0).abs() < 1e-7);
}

#[test]
fn mask_short_sentence_still_masks_one_position() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (masked, pos) = mask_tokens(&[vec![7, PAD_ID]], &[1], 0.15, &mut rng);
    assert_eq!(pos, vec![vec![0]]);
    assert_eq!(masked, vec![vec![MASK_ID, PAD_ID]]);
}

#[test]
fn mask_count_is_ceiling_of_ratio() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let tokens = vec![vec![5, 6, 7, 8, 9, 10, 11], vec![5; 7]];
    let lens = vec![7, 4];
    let (masked, pos) = mask_tokens(&tokens, &lens, 0.15, &mut rng);
    // ceil(0.15 * 7) = 2, ceil(0.15 * 4) = 1.
    assert_eq!(pos[0].len(), 2);
    assert_eq!(pos[1].len(), 1);
    for (b, row) in masked.iter().enumerate() {
        for (i, (&m, &orig)) in row.iter().zip(&tokens[b]).enumerate() {
            if pos[b].contains(&i) {
                assert!(i < lens[b]);
                assert_eq!(m, MASK_ID);
            } else {
                assert_eq!(m, orig);
            }
        }
    }
}

#[test]
fn mask_positions_deterministic_for_seed() {
    let tokens = vec![vec![5, 6, 7, 8, 9, 10, 11, 12]];
    let lens = vec![8];
    let mut r1 = ChaCha8Rng::seed_from_u64(42);
    let mut r2 = ChaCha8Rng::seed_from_u64(42);
    assert_eq!(
        mask_tokens(&tokens, &lens, 0.3, &mut r1),
        mask_tokens(&tokens, &lens, 0.3, &mut r2)
    );
}

#[test]
fn shifted_targets_hand_case() {
    let tokens = vec![vec![5, 6, 7], vec![8, 9, PAD_ID]];
    let out = shifted_targets(&tokens, &[3, 2]);
    assert_eq!(
        out.input_ids,
        vec![vec![BOS_ID, 5, 6, 7], vec![BOS_ID, 8, 9, PAD_ID]]
    );
    assert_eq!(
        out.input_mask,
        vec![vec![1.0, 1.0, 1.0, 1.0], vec![1.0, 1.0, 1.0, 0.0]]
    );
    assert_eq!(out.labels, vec![5, 6, 7, EOS_ID, 8, 9, EOS_ID, PAD_ID]);
    assert_eq!(out.weights, vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0]);
}

#[test]
fn preset_recipes_match_strategy_table() {
    use LossTerm::*;
    let expect: &[(PresetName, &[LossTerm])] = &[
        (PresetName::GfsltVlp, &[ClipContrastive, MaskedSentence]),
        (
            PresetName::Signcl,
            &[ClipContrastive, MaskedSentence, AdjacentFrame],
        ),
        (PresetName::Sign2gptPg, &[PseudoGlossAlign]),
        (PresetName::FlaLlm, &[LightTranslation]),
        (PresetName::C2rl, &[CicoContrastive, LightTranslation]),
    ];
    for &(preset, terms) in expect {
        let spec = preset.objective();
        spec.validate().unwrap();
        let got: Vec<LossTerm> = spec.terms.iter().map(|&(t, _)| t).collect();
        assert_eq!(got, terms, "{preset}");
        assert!(spec.terms.iter().all(|&(_, w)| w == 1.0));
        assert_eq!(spec.temperature, 0.07);
        assert_eq!(spec.mask_ratio, 0.15);
        assert_eq!(spec.margin, 0.5);
        assert_eq!(spec.gap, 16);
        assert_eq!(spec.label_smoothing, 0.2);
        assert_eq!(PresetName::parse(preset.as_str()), Some(preset));
        assert_eq!(
            preset.finetune_adds_adjacent(),
            preset == PresetName::Signcl
        );
    }
    assert_eq!(PresetName::parse("nope"), None);
}

#[test]
fn objective_spec_validation_rejects_bad_knobs() {
    let ok = ObjectiveSpec::new(vec![(LossTerm::ClipContrastive, 1.0)]);
    ok.validate().unwrap();
    let empty = ObjectiveSpec::new(vec![]);
    assert!(empty.validate().is_err());
    let all_zero = ObjectiveSpec::new(vec![(LossTerm::ClipContrastive, 0.0)]);
    assert!(all_zero.validate().is_err());
    let negative = ObjectiveSpec::new(vec![(LossTerm::ClipContrastive, -1.0)]);
    assert!(negative.validate().is_err());
    let mut bad_tau = ok.clone();
    bad_tau.temperature = 0.0;
    assert!(bad_tau.validate().is_err());
    let mut bad_ratio = ok.clone();
    bad_ratio.mask_ratio = 1.0;
    assert!(bad_ratio.validate().is_err());
    let mut bad_eps = ok.clone();
    bad_eps.label_smoothing = 1.0;
    assert!(bad_eps.validate().is_err());
    let mut bad_gap = ok;
    bad_gap.gap = 0;
    assert!(bad_gap.validate().is_err());
}

// ---- integration through a small model ----

const VOCAB: usize = 20;

fn small_bundle(seed: u64) -> ModelBundle {
    let vcfg = VisualEncoderConfig {
        hidden_dim: 16,
        ff_dim: 32,
        heads: 2,
        encoder_layers: 1,
        dropout: 0.0,
        max_positions: 64,
        ..VisualEncoderConfig::default()
    };
    let tcfg = TextStackConfig {
        encoder_layers: 1,
        shallow_layers: 1,
        deep_layers: 1,
        hidden_dim: 16,
        ff_dim: 32,
        heads: 2,
        dropout: 0.0,
        max_positions: 64,
        ..TextStackConfig::default()
    };
    ModelBundle::build(vcfg, tcfg, VOCAB, seed).unwrap()
}

/// Fully valid batch: `b` samples of `t` frames, token rows padded to the
/// longest length.
fn toy_batch(b: usize, t: usize, lens: &[usize]) -> Batch {
    assert_eq!(lens.len(), b);
    let frames = frames_from_fn(b, t, 8, 8, |bi, ti, c, y, x| {
        ((bi * 31 + ti * 7 + c * 3 + y + x) % 17) as f64 / 16.0
    });
    let u = *lens.iter().max().unwrap();
    let mut tokens = Vec::new();
    let mut token_mask = Vec::new();
    for (bi, &len) in lens.iter().enumerate() {
        let mut row = vec![PAD_ID; u];
        let mut mask = vec![0.0; u];
        for j in 0..len {
            row[j] = 5 + (bi + 2 * j) % (VOCAB - 5);
            mask[j] = 1.0;
        }
        tokens.push(row);
        token_mask.push(mask);
    }
    Batch {
        ids: (0..b).map(|i| format!("s{i}")).collect(),
        frames,
        frame_mask: ones(b, t),
        frame_lens: vec![t; b],
        tokens,
        token_mask,
        token_lens: lens.to_vec(),
        sentences: vec![String::new(); b],
        glosses: vec![None; b],
    }
}

fn zero_param(bundle: &mut ModelBundle, name: &str) {
    let id = bundle
        .store
        .lookup(name)
        .unwrap_or_else(|| panic!("missing param {name}"));
    bundle.store.value_mut(id).fill(0.0);
}

fn forward_loss(
    bundle: &mut ModelBundle,
    spec: ObjectiveSpec,
    batch: &Batch,
    gloss_vocab: Option<&GlossVocab>,
    gloss_ids: Option<&[Vec<usize>]>,
) -> Result<(f64, bool), ObjectiveError> {
    let rig = ObjectiveRig::new(&mut bundle.store, spec, 16, gloss_vocab, 5)?;
    let out = training_step(bundle, &rig, batch, gloss_ids, DecoderChoice::Shallow, false, 77)?;
    Ok((out.loss, out.adjacent_degenerate))
}

#[test]
fn translation_uniform_logits_cost_log_vocab() {
    let mut bundle = small_bundle(1);
    zero_param(&mut bundle, "decoder_shallow/out/w");
    zero_param(&mut bundle, "decoder_shallow/out/b");
    let batch = toy_batch(2, 8, &[3, 2]);
    for eps in [0.0, 0.2, 0.5] {
        let ModelBundle {
            store,
            visual,
            decoder_shallow,
            ..
        } = &mut bundle;
        let mut f = Fwd::new(store, false, ChaCha8Rng::seed_from_u64(0));
        let video = visual.forward(&mut f, &batch.frames, &batch.frame_mask).unwrap();
        let loss = translation_loss(
            &mut f,
            decoder_shallow,
            &video,
            &batch.tokens,
            &batch.token_lens,
            eps,
        )
        .unwrap();
        let v = f.g.scalar(loss);
        let expect = (VOCAB as f64).ln();
        assert!((v - expect).abs() < 1e-9, "eps {eps}: {v} vs {expect}");
    }
}

#[test]
fn masked_sentence_uniform_logits_cost_log_vocab() {
    let mut bundle = small_bundle(2);
    zero_param(&mut bundle, "decoder_shallow/out/w");
    zero_param(&mut bundle, "decoder_shallow/out/b");
    let batch = toy_batch(2, 8, &[4, 2]);
    let spec = ObjectiveSpec::new(vec![(LossTerm::MaskedSentence, 1.0)]);
    let (loss, _) = forward_loss(&mut bundle, spec, &batch, None, None).unwrap();
    let expect = (VOCAB as f64).ln();
    assert!((loss - expect).abs() < 1e-9, "{loss} vs {expect}");
}

#[test]
fn pseudo_gloss_uniform_head_matches_path_enumeration() {
    let mut bundle = small_bundle(3);
    let batch = toy_batch(2, 8, &[2, 2]); // 8 frames pool to T' = 2
    let vocab = GlossVocab::from_tokens(["SIGN0".to_string()]);
    assert_eq!(vocab.size(), 2);
    let spec = ObjectiveSpec::new(vec![(LossTerm::PseudoGlossAlign, 1.0)]);
    let rig = ObjectiveRig::new(&mut bundle.store, spec, 16, Some(&vocab), 5).unwrap();
    zero_param(&mut bundle, "proj_visual/gloss_head/w");
    zero_param(&mut bundle, "proj_visual/gloss_head/b");
    let ids = vec![vec![1], vec![1]];
    let out = training_step(&mut bundle, &rig, &batch, Some(&ids), DecoderChoice::Shallow, false, 7).unwrap();
    // Uniform two-symbol logits over two frames: of the four equally
    // likely frame labelings, three ((A,A), (A,blank), (blank,A)) collapse
    // to the single label, so the loss is -ln(3/4).
    let expect = -(0.75f64).ln();
    assert!((out.loss - expect).abs() < 1e-9, "{} vs {expect}", out.loss);
}

#[test]
fn pseudo_gloss_overlong_labels_error() {
    let mut bundle = small_bundle(4);
    let batch = toy_batch(2, 8, &[2, 2]);
    let vocab = GlossVocab::from_tokens(["SIGN0".to_string()]);
    let spec = ObjectiveSpec::new(vec![(LossTerm::PseudoGlossAlign, 1.0)]);
    let rig = ObjectiveRig::new(&mut bundle.store, spec, 16, Some(&vocab), 5).unwrap();
    // Two identical labels need three frames (label, blank, label); only
    // two are available after pooling.
    let ids = vec![vec![1, 1], vec![1]];
    match training_step(&mut bundle, &rig, &batch, Some(&ids), DecoderChoice::Shallow, false, 7) {
        Err(ObjectiveError::Loss(LossError::Length { input: 2, target: 2 })) => {}
        other => panic!("expected length error, got {other:?}"),
    }
}

#[test]
fn multi_task_step_produces_finite_gradients() {
    let mut bundle = small_bundle(5);
    let batch = toy_batch(3, 12, &[4, 3, 2]); // T' = 3 leaves anchors for gap 2
    let vocab = GlossVocab::from_tokens(["SIGN0".to_string(), "SIGN1".to_string()]);
    let mut spec = ObjectiveSpec::new(
        LossTerm::ALL.iter().map(|&t| (t, 1.0)).collect(),
    );
    spec.gap = 2;
    let rig = ObjectiveRig::new(&mut bundle.store, spec, 16, Some(&vocab), 5).unwrap();
    let ids = vec![vec![1], vec![2], vec![1]];
    let out = training_step(&mut bundle, &rig, &batch, Some(&ids), DecoderChoice::Shallow, true, 99).unwrap();
    assert!(out.loss.is_finite());
    assert_eq!(out.per_term.len(), 6);
    assert!(!out.adjacent_degenerate);
    for (term, v) in &out.per_term {
        assert!(v.is_finite(), "{} is {v}", term.as_str());
    }
    for (_, p) in bundle.store.iter() {
        assert!(
            p.grad.iter().all(|g| g.is_finite()),
            "non-finite grad in {}",
            p.name
        );
    }
    // Every group except the unused deep decoder must receive gradient.
    for group in ParamGroup::ALL {
        let touched = bundle
            .store
            .iter()
            .filter(|(_, p)| p.group == group && p.trainable)
            .any(|(_, p)| p.grad.iter().any(|&g| g != 0.0));
        if group == ParamGroup::DecoderDeep {
            assert!(!touched, "deep decoder should be untouched in pretraining");
        } else {
            assert!(touched, "no gradient reached {}", group.as_str());
        }
    }
}

#[test]
fn training_step_deterministic_for_seed() {
    let preset = PresetName::GfsltVlp.objective();
    let batch = toy_batch(2, 8, &[3, 3]);

    let run = |seed: u64| -> (f64, Vec<f64>) {
        let mut bundle = small_bundle(6);
        let rig = ObjectiveRig::new(&mut bundle.store, preset.clone(), 16, None, 5).unwrap();
        let out = training_step(&mut bundle, &rig, &batch, None, DecoderChoice::Shallow, true, seed).unwrap();
        let some_grad = bundle
            .store
            .lookup("text_encoder/embed/table")
            .map(|id| bundle.store.get(id).grad.iter().copied().collect())
            .unwrap();
        (out.loss, some_grad)
    };
    let (l1, g1) = run(1234);
    let (l2, g2) = run(1234);
    assert_eq!(l1, l2);
    assert_eq!(g1, g2);
    let (l3, _) = run(4321);
    assert_ne!(l1, l3, "different step seeds should mask differently");
}

#[test]
fn adjacent_term_flags_degenerate_short_batch() {
    let mut bundle = small_bundle(7);
    let batch = toy_batch(2, 8, &[3, 2]); // T' = 2 < gap 16 + 1
    let spec = PresetName::Signcl.objective();
    let (loss, degenerate) = forward_loss(&mut bundle, spec.clone(), &batch, None, None).unwrap();
    assert!(degenerate);
    assert!(loss.is_finite());
    // The flagged term must contribute exactly zero.
    let rig = ObjectiveRig::new(&mut bundle.store, spec, 16, None, 5).unwrap();
    let out = training_step(&mut bundle, &rig, &batch, None, DecoderChoice::Shallow, false, 77).unwrap();
    let adjacent = out
        .per_term
        .iter()
        .find(|(t, _)| *t == LossTerm::AdjacentFrame)
        .unwrap();
    assert_eq!(adjacent.1, 0.0);
}

#[test]
fn rig_requires_gloss_vocabulary() {
    let mut bundle = small_bundle(8);
    let spec = ObjectiveSpec::new(vec![(LossTerm::PseudoGlossAlign, 1.0)]);
    match ObjectiveRig::new(&mut bundle.store, spec, 16, None, 5) {
        Err(ObjectiveError::Config(msg)) => assert!(msg.contains("gloss vocabulary"), "{msg}"),
        other => panic!("expected Config error, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn objective_forward_requires_gloss_ids() {
    let mut bundle = small_bundle(9);
    let batch = toy_batch(2, 8, &[2, 2]);
    let vocab = GlossVocab::from_tokens(["SIGN0".to_string()]);
    let spec = ObjectiveSpec::new(vec![(LossTerm::PseudoGlossAlign, 1.0)]);
    let rig = ObjectiveRig::new(&mut bundle.store, spec, 16, Some(&vocab), 5).unwrap();
    match training_step(&mut bundle, &rig, &batch, None, DecoderChoice::Shallow, false, 7) {
        Err(ObjectiveError::Config(msg)) => assert!(msg.contains("gloss ids"), "{msg}"),
        other => panic!("expected Config error, got {other:?}"),
    }
}

#[test]
fn gloss_vocab_builds_sorted_and_encodes() {
    let vocab = GlossVocab::from_sentences(
        Language::German,
        ["der himmel ist heute sehr bewölkt", "himmel und regen"],
    )
    .unwrap();
    // Labels sorted, blank reserved at 0.
    assert_eq!(vocab.size(), 6);
    assert_eq!(vocab.token(GLOSS_BLANK), Some("<blank>"));
    assert_eq!(vocab.token(1), Some("BEWÖLKT"));
    assert_eq!(vocab.token(2), Some("HEUTE"));
    assert_eq!(vocab.token(3), Some("HIMMEL"));
    assert_eq!(vocab.token(4), Some("REGEN"));
    assert_eq!(vocab.token(5), Some("SEHR"));
    assert_eq!(
        vocab.encode(&["HIMMEL".to_string(), "REGEN".to_string()]),
        vec![3, 4]
    );
    // Unknown labels drop out instead of forcing a wrong alignment.
    assert_eq!(
        vocab.encode(&["HIMMEL".to_string(), "SCHNEE".to_string()]),
        vec![3]
    );
}

#[test]
fn gloss_vocab_encodes_batches_from_annotations_or_sentences() {
    let vocab = GlossVocab::from_tokens(["SIGN1".to_string(), "SIGN2".to_string()]);
    let mut batch = toy_batch(2, 8, &[2, 2]);
    batch.glosses[0] = Some(vec!["SIGN2".to_string(), "SIGN1".to_string()]);
    batch.sentences[1] = "SIGN1 SIGN2".to_string();
    let ids = vocab.encode_batch(&batch, Language::Synthetic).unwrap();
    assert_eq!(ids, vec![vec![2, 1], vec![1, 2]]);
}

#[test]
fn loss_nodes_are_copy_ids() {
    // NodeId is a plain index; keep that assumption visible.
    fn takes_copy<T: Copy>(_: T) {}
    let mut g = Graph::new(false);
    let n: NodeId = g.scalar_const(0.0);
    takes_copy(n);
}
