//! Property tests for the metric implementations.

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use slt_core::metrics::{bleu, rouge_l, MetricProfile};

const VOCAB: [&str; 6] = ["a", "b", "c", "d", "e", "f"];
const ALT_VOCAB: [&str; 6] = ["u", "v", "w", "x", "y", "z"];

fn sentence() -> impl Strategy<Value = String> {
    prop::collection::vec(0..VOCAB.len(), 1..=8)
        .prop_map(|ids| ids.iter().map(|&i| VOCAB[i]).collect::<Vec<_>>().join(" "))
}

fn corpus() -> impl Strategy<Value = (Vec<String>, Vec<String>)> {
    prop::collection::vec((sentence(), sentence()), 1..=5)
        .prop_map(|pairs| pairs.into_iter().unzip())
}

/// Clipped 4-gram matches of a corpus, counted independently.
fn count_4gram_matches(cands: &[String], refs: &[String]) -> (usize, usize) {
    let mut matches = 0;
    let mut total = 0;
    for (c, r) in cands.iter().zip(refs) {
        let ct: Vec<&str> = c.split_whitespace().collect();
        let rt: Vec<&str> = r.split_whitespace().collect();
        total += ct.len().saturating_sub(3);
        if ct.len() >= 4 {
            let mut seen: Vec<&[&str]> = Vec::new();
            for i in 0..=ct.len() - 4 {
                let g = &ct[i..i + 4];
                if seen.contains(&g) {
                    continue;
                }
                seen.push(g);
                let in_c = (0..=ct.len() - 4).filter(|&j| &ct[j..j + 4] == g).count();
                let in_r = if rt.len() >= 4 {
                    (0..=rt.len() - 4).filter(|&j| &rt[j..j + 4] == g).count()
                } else {
                    0
                };
                matches += in_c.min(in_r);
            }
        }
    }
    (matches, total)
}

proptest! {
    #[test]
    fn pair_order_does_not_change_scores((cands, refs) in corpus(), seed in any::<u64>()) {
        let profile = MetricProfile::word_plain();
        let before = bleu(&cands, &refs, &profile).unwrap();
        let rouge_before = rouge_l(&cands, &refs, &profile, 1.2).unwrap();

        let mut order: Vec<usize> = (0..cands.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let cands2: Vec<String> = order.iter().map(|&i| cands[i].clone()).collect();
        let refs2: Vec<String> = order.iter().map(|&i| refs[i].clone()).collect();

        let after = bleu(&cands2, &refs2, &profile).unwrap();
        let rouge_after = rouge_l(&cands2, &refs2, &profile, 1.2).unwrap();
        for n in 0..4 {
            prop_assert!((before.bleu[n] - after.bleu[n]).abs() < 1e-12);
        }
        prop_assert!((rouge_before - rouge_after).abs() < 1e-9);
    }

    #[test]
    fn scores_stay_in_range((cands, refs) in corpus()) {
        for name in MetricProfile::preset_names() {
            let profile = MetricProfile::by_name(name).unwrap();
            let report = bleu(&cands, &refs, &profile).unwrap();
            for b in &report.bleu {
                prop_assert!((0.0..=100.0 + 1e-9).contains(b), "{name}: {b}");
            }
            let r = rouge_l(&cands, &refs, &profile, 1.2).unwrap();
            prop_assert!((0.0..=100.0 + 1e-9).contains(&r));
        }
    }

    /// Appending a pair with no common 4-grams cannot raise the clipped
    /// 4-gram precision, and a zero BLEU-4 stays zero without smoothing.
    /// (The full BLEU-4 score is NOT monotone here: the brevity penalty and
    /// the lower-order precisions can rise and outweigh the p4 drop.)
    #[test]
    fn zero_overlap_pair_cannot_raise_clipped_p4(
        (cands, refs) in corpus(),
        extra in prop::collection::vec(0..VOCAB.len(), 4..=8),
    ) {
        let profile = MetricProfile::word_plain();
        let before = bleu(&cands, &refs, &profile).unwrap();
        let (m_before, t_before) = count_4gram_matches(&cands, &refs);

        // kill every candidate 4-gram by rewriting each 4th reference token
        // into a disjoint vocabulary
        let cand_extra = extra.iter().map(|&i| VOCAB[i]).collect::<Vec<_>>().join(" ");
        let ref_extra = extra
            .iter()
            .enumerate()
            .map(|(pos, &i)| if pos % 4 == 3 { ALT_VOCAB[i] } else { VOCAB[i] })
            .collect::<Vec<_>>()
            .join(" ");

        let mut cands2 = cands.clone();
        let mut refs2 = refs.clone();
        cands2.push(cand_extra);
        refs2.push(ref_extra);

        let (m_extra, _) = count_4gram_matches(&cands2[cands.len()..], &refs2[refs.len()..]);
        prop_assert_eq!(m_extra, 0, "constructed pair must have zero 4-gram overlap");

        let after = bleu(&cands2, &refs2, &profile).unwrap();
        let (m_after, t_after) = count_4gram_matches(&cands2, &refs2);
        prop_assert_eq!(m_after, m_before, "clipped matches must not grow");
        prop_assert!(t_after >= t_before);

        let p4_before = if t_before == 0 { 0.0 } else { m_before as f64 / t_before as f64 };
        let p4_after = if t_after == 0 { 0.0 } else { m_after as f64 / t_after as f64 };
        prop_assert!(p4_after <= p4_before + 1e-12);
        prop_assert!((after.precisions[3] - p4_after).abs() < 1e-12);

        if before.bleu[3] == 0.0 {
            prop_assert_eq!(after.bleu[3], 0.0);
        }
    }
}
