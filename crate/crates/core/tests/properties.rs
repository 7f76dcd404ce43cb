use std::collections::BTreeMap;

use phq_core::corpus::{apportion, generate_synthetic, load_corpus, save_corpus, split_counts};
use phq_core::labeling::vote;
use phq_core::metrics::{bleu, classification_scores, fleiss_kappa_iou, rouge_l, rouge_n, ClassificationMode};
use phq_core::phq_items::{total_score, Degree};
use phq_core::phqcot::{emit_phqcot, parse_response};
use phq_core::summarizer::serialize_tokens;
use phq_core::{build_summary, parse_summary, severity_from_total, Assessment, Cause, PhqItem, SeverityLevel, Speaker, Utterance};
use proptest::prelude::*;

const CAUSES: [&str; 6] = [
    "work stress",
    "the loss of their job",
    "lack of family support",
    "their current financial problems",
    "ongoing struggles with PTSD",
    "a recent breakup",
];

fn level() -> impl Strategy<Value = SeverityLevel> {
    (0u8..4).prop_map(|v| SeverityLevel::new(v).unwrap())
}

fn item_scores() -> impl Strategy<Value = BTreeMap<PhqItem, u8>> {
    proptest::collection::vec(0u8..4, 8).prop_map(|v| PhqItem::SYMPTOMS.iter().copied().zip(v).collect())
}

fn words() -> impl Strategy<Value = String> {
    proptest::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "sleep", "tired"]), 0..12).prop_map(|w| w.join(" "))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn summaries_round_trip(
        history in any::<bool>(),
        picks in proptest::collection::vec(proptest::option::of(0usize..5), 8),
        causes in proptest::sample::subsequence(CAUSES.to_vec(), 0..4),
        severity in level(),
    ) {
        let assessments: Vec<Assessment> = PhqItem::SYMPTOMS
            .iter()
            .zip(&picks)
            .filter_map(|(&item, p)| p.map(|d| Assessment { item, degree: Degree::ALL[d] }))
            .collect();
        let s = build_summary(history, assessments, causes.into_iter().map(Cause::new).collect(), severity).unwrap();
        let back = parse_summary(&s.rendered_text).unwrap();
        prop_assert_eq!(back, s);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn vote_ignores_ballot_order(
        ballots in proptest::collection::vec(proptest::collection::vec(0usize..9, 6), 1..6),
        rot in 0usize..6,
    ) {
        let dialogue: Vec<Utterance> = (0..6)
            .map(|i| Utterance { index: i, speaker: if i % 3 == 0 { Speaker::Interviewer } else { Speaker::Participant }, text: format!("u{i}"), start_time: 0.0, stop_time: 1.0 })
            .collect();
        let ballots: Vec<Vec<PhqItem>> = ballots.iter().map(|b| b.iter().map(|&c| PhqItem::from_class_index(c).unwrap()).collect()).collect();
        let mut rotated = ballots.clone();
        let k = rot % rotated.len();
        rotated.rotate_left(k);
        rotated.reverse();
        prop_assert_eq!(vote(&dialogue, &ballots), vote(&dialogue, &rotated));
    }

    #[test]
    fn serialized_spans_are_ordered_and_in_bounds(n in 1usize..12, max in 5usize..80) {
        let dialogue: Vec<Utterance> = (0..n)
            .map(|i| Utterance { index: i, speaker: Speaker::Participant, text: "word ".repeat(1 + i % 4).trim().to_string(), start_time: 0.0, stop_time: 1.0 })
            .collect();
        let labels = vec![PhqItem::None; n];
        let st = serialize_tokens(&dialogue, &labels, max).unwrap();
        prop_assert!(st.tokens.len() <= max);
        prop_assert_eq!(st.spans.len(), n - st.first_utterance);
        for w in st.spans.windows(2) {
            prop_assert!(w[0].1 < w[1].0);
        }
        for &(a, b) in &st.spans {
            prop_assert!(a < b && b <= st.tokens.len());
        }
    }

    #[test]
    fn rouge_f_is_symmetric_and_bounded(a in words(), b in words(), n in 1usize..3) {
        prop_assert!((rouge_n(&a, &b, n) - rouge_n(&b, &a, n)).abs() < 1e-12);
        prop_assert!((rouge_l(&a, &b) - rouge_l(&b, &a)).abs() < 1e-12);
        for v in [rouge_n(&a, &b, n), rouge_l(&a, &b), bleu(&a, &b)] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert_eq!(rouge_n(&a, &a, n), 1.0);
        prop_assert_eq!(rouge_l(&a, &a), 1.0);
    }

    #[test]
    fn classification_ignores_sample_order(pairs in proptest::collection::vec((0u8..4, 0u8..4), 1..30), shift in 0usize..30) {
        let pred: Vec<SeverityLevel> = pairs.iter().map(|p| SeverityLevel::new(p.0).unwrap()).collect();
        let gold: Vec<SeverityLevel> = pairs.iter().map(|p| SeverityLevel::new(p.1).unwrap()).collect();
        let k = shift % pairs.len();
        let (mut p2, mut g2) = (pred.clone(), gold.clone());
        p2.rotate_left(k);
        g2.rotate_left(k);
        for mode in [ClassificationMode::Binary, ClassificationMode::PerClass] {
            let a = classification_scores(&pred, &gold, mode).unwrap();
            let b = classification_scores(&p2, &g2, mode).unwrap();
            prop_assert!((a.macro_f1 - b.macro_f1).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a.macro_f1));
        }
    }

    #[test]
    fn fleiss_ignores_rater_order(
        spans in proptest::collection::vec(proptest::collection::vec(words(), 3), 2..6),
        k in 0usize..3,
    ) {
        // annotations[subject][rater]
        let mut swapped = spans.clone();
        for row in &mut swapped {
            row.rotate_left(k);
        }
        let a = fleiss_kappa_iou(&spans, 0.5);
        let b = fleiss_kappa_iou(&swapped, 0.5);
        match (a, b) {
            (Ok(a), Ok(b)) => prop_assert!((a.kappa - b.kappa).abs() < 1e-12),
            (Err(_), Err(_)) => {}
            (a, b) => prop_assert!(false, "{:?} vs {:?}", a.is_ok(), b.is_ok()),
        }
    }

    #[test]
    fn phqcot_answers_round_trip(scores in item_scores(), claim in proptest::option::of(level()), quote in "[a-z ]{0,20}") {
        let evidence: BTreeMap<PhqItem, Vec<String>> = [(PhqItem::SleepingDisorder, vec![quote.clone()])].into();
        let text = emit_phqcot(&scores, &evidence, "The participant primarily experiences mild sleep issues.", claim);
        let r = parse_response(&text).unwrap();
        prop_assert_eq!(&r.item_scores, &scores);
        prop_assert_eq!(&r.evidence[&PhqItem::SleepingDisorder], &vec![quote]);
        let total = total_score(&scores).unwrap();
        prop_assert_eq!(r.total, total);
        let sev = severity_from_total(total as u32).unwrap();
        prop_assert_eq!(r.severity, sev);
        prop_assert_eq!(r.discrepancy, claim.is_some_and(|c| c != sev));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn synthetic_corpora_are_consistent(seed in any::<u64>(), count in 4usize..24) {
        let c = generate_synthetic(count, seed).unwrap();
        c.validate().unwrap();
        prop_assert_eq!(split_counts(&c), apportion(count));
        for s in c.samples() {
            let scores = s.truth.item_scores.as_ref().unwrap();
            prop_assert_eq!(severity_from_total(total_score(scores).unwrap() as u32).unwrap(), s.truth.severity);
            let parsed = parse_summary(&s.truth.summary.rendered_text).unwrap();
            prop_assert!(parsed.same_structure(&s.truth.summary));
        }
    }
}

#[test]
fn severity_is_monotone_in_the_total() {
    let levels: Vec<u8> = (0..=24).map(|t| severity_from_total(t).unwrap().value()).collect();
    assert!(levels.windows(2).all(|w| w[0] <= w[1]));
    assert!(severity_from_total(25).is_err());
}

#[test]
fn corpus_round_trips_through_disk() {
    let c = generate_synthetic(10, 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_corpus(&c, dir.path()).unwrap();
    let back = load_corpus(dir.path()).unwrap();
    assert_eq!(split_counts(&back), split_counts(&c));
    for (a, b) in c.samples().zip(back.samples()) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.dialogue.iter().map(|u| &u.text).collect::<Vec<_>>(), b.dialogue.iter().map(|u| &u.text).collect::<Vec<_>>());
        assert_eq!(a.truth.severity, b.truth.severity);
        assert_eq!(a.truth.summary.rendered_text, b.truth.summary.rendered_text);
        let (fa, fb) = (&a.acoustic.as_ref().unwrap().frames, &b.acoustic.as_ref().unwrap().frames);
        assert_eq!(fa.dim(), fb.dim());
        assert!(fa.iter().zip(fb.iter()).all(|(x, y)| (x - y).abs() < 1e-9));
    }
}
