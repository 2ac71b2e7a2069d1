//! Invariance and bound properties of the loss terms on random inputs.

use ndarray::{ArrayD, IxDyn};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use slt_core::corpus::MASK_ID;
use slt_core::objectives::{
    adjacent_frame_contrastive, cico_contrastive, clip_contrastive, combine, mask_tokens, CicoAgg,
};
use slt_core::tensor::Graph;

fn mat(n: usize, d: usize, flat: &[f64]) -> ArrayD<f64> {
    ArrayD::from_shape_vec(IxDyn(&[n, d]), flat[..n * d].to_vec()).unwrap()
}

fn finite_row(len: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-3.0f64..3.0, len)
}

/// Rows that stay clearly away from zero norm.
fn unit_ish(n: usize, d: usize) -> impl Strategy<Value = Vec<f64>> {
    finite_row(n * d).prop_map(move |mut flat| {
        for r in 0..n {
            let row = &mut flat[r * d..(r + 1) * d];
            let norm: f64 = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 0.2 {
                row[0] += 1.0;
            }
        }
        flat
    })
}

fn eval_clip(v: ArrayD<f64>, t: ArrayD<f64>, tau: f64) -> f64 {
    let mut g = Graph::new(false);
    let vn = g.constant(v);
    let tn = g.constant(t);
    let loss = clip_contrastive(&mut g, vn, tn, tau).unwrap();
    g.scalar(loss)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn clip_bounded_below_and_log_n_on_identical(
        n in 2usize..6,
        d in 2usize..5,
        row in finite_row(8),
        other in unit_ish(5, 4),
    ) {
        // Non-degenerate single row tiled over the batch.
        let mut r = row[..d].to_vec();
        if r.iter().map(|x| x * x).sum::<f64>().sqrt() < 0.2 {
            r[0] += 1.0;
        }
        let tiled: Vec<f64> = std::iter::repeat(r).take(n).flatten().collect();
        let same = mat(n, d, &tiled);
        let loss = eval_clip(same.clone(), same.clone(), 0.07);
        prop_assert!((loss - (n as f64).ln()).abs() < 1e-9);

        let v = mat(n, d, &{
            let mut o = Vec::new();
            for r in 0..n { o.extend_from_slice(&other[(r % 5) * 4..(r % 5) * 4 + d]); }
            o
        });
        let any = eval_clip(v, same, 0.07);
        prop_assert!(any >= -1e-12, "loss {any} dipped below zero");
        prop_assert!(any.is_finite());
    }

    #[test]
    fn clip_invariant_under_positive_rescaling(
        flat_v in unit_ish(4, 3),
        flat_t in unit_ish(4, 3),
        scale_v in 0.05f64..20.0,
        scale_t in 0.05f64..20.0,
    ) {
        let v = mat(4, 3, &flat_v);
        let t = mat(4, 3, &flat_t);
        let base = eval_clip(v.clone(), t.clone(), 0.07);
        let scaled = eval_clip(v.mapv(|x| x * scale_v), t.mapv(|x| x * scale_t), 0.07);
        prop_assert!((base - scaled).abs() < 1e-6, "{base} vs {scaled}");
    }

    #[test]
    fn adjacent_invariant_under_rotation(
        flat in finite_row(12),
        theta in 0.0f64..std::f64::consts::TAU,
        gap in 1usize..4,
        margin in 0.1f64..1.5,
    ) {
        let rotate = |p: &[f64]| {
            [
                theta.cos() * p[0] - theta.sin() * p[1],
                theta.sin() * p[0] + theta.cos() * p[1],
            ]
        };
        let feats = mat(6, 2, &flat);
        let rot_flat: Vec<f64> = flat.chunks(2).flat_map(|p| rotate(p)).collect();
        let rot = mat(6, 2, &rot_flat);
        let mut g = Graph::new(false);
        let a = g.constant(feats);
        let b = g.constant(rot);
        let la = adjacent_frame_contrastive(&mut g, a, 6, margin, gap, None).unwrap();
        let lb = adjacent_frame_contrastive(&mut g, b, 6, margin, gap, None).unwrap();
        let (la, lb) = (g.scalar(la), g.scalar(lb));
        prop_assert!(la >= 0.0 && la <= margin + 2.0 + 1e-9);
        prop_assert!((la - lb).abs() < 1e-5, "{la} vs {lb}");
    }

    #[test]
    fn cico_finite_and_padding_blind(
        flat_v in unit_ish(6, 2),
        flat_t in unit_ish(6, 2),
        garbage in -50.0f64..50.0,
    ) {
        // 2 samples x 3 slots x 2 dims; last slot of each sample padded.
        let vmask = vec![vec![1.0, 1.0, 0.0]; 2];
        let tmask = vec![vec![1.0, 1.0, 0.0]; 2];
        let shape = IxDyn(&[2, 3, 2]);
        for agg in [CicoAgg::MeanOfMax, CicoAgg::MaxOfMax] {
            let v = ArrayD::from_shape_vec(shape.clone(), flat_v.clone()).unwrap();
            let t = ArrayD::from_shape_vec(shape.clone(), flat_t.clone()).unwrap();
            let mut g = Graph::new(false);
            let (vn, tn) = (g.constant(v), g.constant(t));
            let base = cico_contrastive(&mut g, vn, &vmask, tn, &tmask, 0.07, agg).unwrap();
            let base = g.scalar(base);
            prop_assert!(base.is_finite() && base >= -1e-12);

            let mut v2 = flat_v.clone();
            let mut t2 = flat_t.clone();
            for slot in [4, 5, 10, 11] {
                v2[slot] = garbage;
                t2[slot] = -garbage;
            }
            let v2 = ArrayD::from_shape_vec(shape.clone(), v2).unwrap();
            let t2 = ArrayD::from_shape_vec(shape.clone(), t2).unwrap();
            let mut g = Graph::new(false);
            let (vn, tn) = (g.constant(v2), g.constant(t2));
            let moved = cico_contrastive(&mut g, vn, &vmask, tn, &tmask, 0.07, agg).unwrap();
            prop_assert!((g.scalar(moved) - base).abs() < 1e-12);
        }
    }

    #[test]
    fn combine_is_linear_in_the_weights(
        values in proptest::collection::vec(-4.0f64..4.0, 1..5),
        weights in proptest::collection::vec(0.0f64..3.0, 5),
        k in 0.0f64..5.0,
    ) {
        let mut g = Graph::new(false);
        let terms: Vec<_> = values
            .iter()
            .zip(&weights)
            .map(|(&v, &w)| (g.scalar_const(v), w))
            .collect();
        let base = combine(&mut g, &terms);
        let scaled_terms: Vec<_> = terms.iter().map(|&(n, w)| (n, w * k)).collect();
        let scaled = combine(&mut g, &scaled_terms);
        let (base, scaled) = (g.scalar(base), g.scalar(scaled));
        prop_assert!((scaled - k * base).abs() < 1e-9 * (1.0 + base.abs() * k));
    }

    #[test]
    fn mask_tokens_obeys_ceil_count_and_touches_only_real_positions(
        lens in proptest::collection::vec(1usize..9, 1..4),
        ratio in 0.05f64..0.95,
        seed in 0u64..1000,
    ) {
        let u = *lens.iter().max().unwrap();
        let tokens: Vec<Vec<usize>> = lens
            .iter()
            .map(|&len| (0..u).map(|j| if j < len { 5 + j } else { 0 }).collect())
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (masked, positions) = mask_tokens(&tokens, &lens, ratio, &mut rng);
        for (b, pos) in positions.iter().enumerate() {
            let len = lens[b];
            let expect = ((ratio * len as f64).ceil() as usize).clamp(1, len);
            prop_assert_eq!(pos.len(), expect);
            let mut sorted = pos.clone();
            sorted.dedup();
            prop_assert_eq!(sorted.len(), pos.len(), "duplicate mask positions");
            for &p in pos {
                prop_assert!(p < len);
                prop_assert_eq!(masked[b][p], MASK_ID);
            }
            for j in 0..u {
                if !pos.contains(&j) {
                    prop_assert_eq!(masked[b][j], tokens[b][j]);
                }
            }
        }
        // Same seed, same choices.
        let mut rng2 = ChaCha8Rng::seed_from_u64(seed);
        let again = mask_tokens(&tokens, &lens, ratio, &mut rng2);
        prop_assert_eq!(again, (masked, positions));
    }
}
