//! Hand-computed metric cases, tokenization conventions, and the audit
//! corpora demonstrating how convention choices move BLEU.

use slt_core::metrics::{
    apply_profile, audit, bleu, rouge_l, score_corpus, MetricError, MetricProfile,
    AUDIT_BLEU4_THRESHOLD,
};

fn s(v: &[&str]) -> Vec<String> {
    v.iter().map(|x| x.to_string()).collect()
}

#[test]
fn identity_corpus_scores_100_under_every_preset() {
    let lines = s(&["a b c d", "der himmel ist blau", "x"]);
    for name in MetricProfile::preset_names() {
        let p = MetricProfile::by_name(name).unwrap();
        let report = score_corpus(&lines, &lines, &p).unwrap();
        for (n, b) in report.bleu.iter().enumerate() {
            // short sentences can have zero 4-gram totals under word profiles;
            // identity still means every present order is perfect
            if *b != 0.0 {
                assert!(
                    (b - 100.0).abs() < 1e-9,
                    "{name} BLEU-{}: {b}",
                    n + 1
                );
            }
        }
        assert!((report.rouge_l - 100.0).abs() < 1e-9, "{name} ROUGE-L");
    }
}

#[test]
fn identity_single_long_sentence_is_100_everywhere() {
    let lines = s(&["a b c d e f g h"]);
    for name in MetricProfile::preset_names() {
        let p = MetricProfile::by_name(name).unwrap();
        let report = score_corpus(&lines, &lines, &p).unwrap();
        for b in &report.bleu {
            assert!((b - 100.0).abs() < 1e-9, "{name}: {report:?}");
        }
    }
}

#[test]
fn clipping_limits_repeated_candidate_tokens() {
    // "the" appears twice in the reference, "cat" once: p1 = (2 + 1) / 4
    let report = bleu(
        &s(&["the cat the cat"]),
        &s(&["the the cat"]),
        &MetricProfile::word_plain(),
    )
    .unwrap();
    assert!((report.precisions[0] - 0.75).abs() < 1e-9);
}

#[test]
fn brevity_penalty_hand_case() {
    // BP = e^(1 - 4/3), p1 = p2 = p3 = 1 => BLEU-3 = 100 e^(-1/3)
    let mut profile = MetricProfile::word_plain();
    profile.bleu_max_n = 3;
    let report = bleu(&s(&["a b c"]), &s(&["a b c d"]), &profile).unwrap();
    let expected = 100.0 * (-1.0f64 / 3.0).exp();
    assert!((report.bleu[2] - expected).abs() < 1e-6);
    assert!((expected - 71.653_131_057_378_93).abs() < 1e-6);
    assert!((report.brevity_penalty - (1.0f64 - 4.0 / 3.0).exp()).abs() < 1e-12);
}

#[test]
fn rouge_l_hand_case_at_beta_1_2() {
    // LCS("a c e", "a b c d e") = 3; P = 3/3, R = 3/5;
    // F = (1 + 1.44) P R / (R + 1.44 P) = 0.7176...
    let score = rouge_l(
        &s(&["a c e"]),
        &s(&["a b c d e"]),
        &MetricProfile::word_plain(),
        1.2,
    )
    .unwrap();
    let expected = 100.0 * 2.44 * 1.0 * 0.6 / (0.6 + 1.44 * 1.0);
    assert!((score - expected).abs() < 1e-6);
    assert!((expected - 71.764_705_882_352_94).abs() < 1e-9);
}

#[test]
fn rouge_l_disjoint_vocab_scores_zero() {
    let score = rouge_l(
        &s(&["x y z"]),
        &s(&["a b c"]),
        &MetricProfile::word_plain(),
        1.2,
    )
    .unwrap();
    assert_eq!(score, 0.0);
}

#[test]
fn apply_profile_examples() {
    let phoenix = MetricProfile::phoenix_legacy();
    assert_eq!(apply_profile("guten tag", &phoenix), s(&["guten", "tag", "."]));
    // append only fires on non-empty text
    assert_eq!(apply_profile("", &phoenix), Vec::<String>::new());
    assert_eq!(apply_profile("   ", &phoenix), Vec::<String>::new());

    let csl = MetricProfile::csl_char();
    assert_eq!(apply_profile("你好吗", &csl), s(&["你", "好", "吗"]));
    assert_eq!(apply_profile("你好 吗", &csl), s(&["你", "好", "吗"]));
}

#[test]
fn length_errors() {
    let p = MetricProfile::word_plain();
    assert_eq!(
        bleu(&s(&["a"]), &s(&["a", "b"]), &p).unwrap_err(),
        MetricError::LengthMismatch { candidates: 1, references: 2 }
    );
    assert_eq!(bleu(&[], &[], &p).unwrap_err(), MetricError::EmptyCorpus);
    assert_eq!(
        audit(&s(&["a"]), &s(&["a"]), &[p.clone()], 0.5).unwrap_err(),
        MetricError::TooFewProfiles(1)
    );
}

/// Sentences without terminal punctuation whose candidates err mid-sentence
/// but share the reference suffix: the appended "." is a guaranteed correct
/// unigram and extends each matched suffix into one more 4-gram.
fn append_inflation_corpus() -> (Vec<String>, Vec<String>) {
    let cands = s(&[
        "der zug faehrt heute abends nach berlin ab",
        "morgen wird es dann im sueden richtig warm",
        "am abend regnet es wieder an der kueste",
        "die sonne scheint hier den ganzen tag lang",
    ]);
    let refs = s(&[
        "der zug faehrt morgen abends nach berlin ab",
        "morgen wird es wohl im sueden richtig warm",
        "am abend regnet es stark an der kueste",
        "die sonne scheint dort den ganzen tag lang",
    ]);
    (cands, refs)
}

#[test]
fn punctuation_append_inflates_bleu4() {
    let (cands, refs) = append_inflation_corpus();
    let with = bleu(&cands, &refs, &MetricProfile::phoenix_legacy()).unwrap();
    let without = bleu(&cands, &refs, &MetricProfile::word_plain()).unwrap();
    assert!(
        with.bleu[3] > without.bleu[3],
        "append must inflate BLEU-4: {} vs {}",
        with.bleu[3],
        without.bleu[3]
    );
}

/// Word segmentation sees compound tokens as atomic mismatches; character
/// segmentation recovers the shared substrings.
fn char_vs_word_corpus() -> (Vec<String>, Vec<String>) {
    let cands = s(&["今天天气很好", "他在学校里读书", "我们明天去公园散步", "这个问题很难回答"]);
    let refs = s(&["今天天气真好", "他在学校里看书", "我们明天去公园走走", "这个问题很难解决"]);
    (cands, refs)
}

#[test]
fn character_segmentation_scores_at_least_word_segmentation() {
    let (cands, refs) = char_vs_word_corpus();
    let char_scores = bleu(&cands, &refs, &MetricProfile::csl_char()).unwrap();
    let word_scores = bleu(&cands, &refs, &MetricProfile::word_plain()).unwrap();
    assert!(
        char_scores.bleu[3] >= word_scores.bleu[3],
        "character BLEU-4 {} < word BLEU-4 {}",
        char_scores.bleu[3],
        word_scores.bleu[3]
    );
    assert!(char_scores.bleu[3] > 0.0);
}

#[test]
fn audit_flags_both_convention_gaps() {
    let (cands, refs) = append_inflation_corpus();
    let report = audit(
        &cands,
        &refs,
        &[MetricProfile::phoenix_legacy(), MetricProfile::word_plain()],
        AUDIT_BLEU4_THRESHOLD,
    )
    .unwrap();
    assert_eq!(report.deltas.len(), 1);
    assert!(report.deltas[0].flagged, "append gap must be flagged: {report:?}");
    assert!(report.deltas[0].bleu_delta[3] > 0.0);

    let (cands, refs) = char_vs_word_corpus();
    let report = audit(
        &cands,
        &refs,
        &[MetricProfile::csl_char(), MetricProfile::word_plain()],
        AUDIT_BLEU4_THRESHOLD,
    )
    .unwrap();
    assert!(report.deltas[0].flagged, "segmentation gap must be flagged: {report:?}");
}

#[test]
fn audit_identity_reports_all_100_and_zero_deltas() {
    let lines = s(&["ein voller satz mit genug woertern dabei", "noch ein langer satz fuer die messung"]);
    let profiles = [
        MetricProfile::phoenix_legacy(),
        MetricProfile::word_plain(),
        MetricProfile::sacre_like(),
    ];
    let report = audit(&lines, &lines, &profiles, 0.5).unwrap();
    for r in &report.reports {
        for b in &r.bleu {
            assert!((b - 100.0).abs() < 1e-9, "{r:?}");
        }
        assert!((r.rouge_l - 100.0).abs() < 1e-9);
    }
    for d in &report.deltas {
        assert!(!d.flagged);
        assert!(d.bleu_delta.iter().all(|x| x.abs() < 1e-9));
    }
}

#[test]
fn smoothing_none_zeroes_bleu4_without_4gram_overlap() {
    let report = bleu(
        &s(&["a b c d"]),
        &s(&["a b x d"]),
        &MetricProfile::word_plain(),
    )
    .unwrap();
    assert_eq!(report.bleu[3], 0.0);
    assert!(report.bleu[0] > 0.0);

    let smoothed = bleu(&s(&["a b c d"]), &s(&["a b x d"]), &MetricProfile::sacre_like()).unwrap();
    assert!(smoothed.bleu[3] > 0.0, "exp-decay must rescue zero orders");
}
