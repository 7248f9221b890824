use proptest::prelude::*;
use storyvae_core::corpus::{synth_corpus, Story, SynthConfig};
use storyvae_core::negatives::*;
use storyvae_core::rng;

fn delexicalized_story() -> Story {
    Story::from_texts(&[
        "[NEUTRAL] knew the solution to a problem",
        "he told people the solution",
        "the people thought [NEUTRAL] was smart",
        "[NEUTRAL] agreed with them",
        "[NEUTRAL] went on to achieve",
    ])
}

fn corpus() -> Vec<Story> {
    synth_corpus(&SynthConfig { n_docs: 100, ..SynthConfig::default() }).unwrap()
}

fn multiset(s: &Story) -> Vec<Vec<String>> {
    let mut v = s.sentences.clone();
    v.sort();
    v
}

#[test]
fn scripted_repeat_substitute_negate_on_problem_solution_story() {
    let script = [
        RuleApplication::SubstituteWord { sentence: 1, position: 2, replacement: "animals".into() },
        RuleApplication::RepeatSentence { sentence: 1, times: 2 },
        RuleApplication::Negate { sentence: 6 },
    ];
    let out = apply_all(&delexicalized_story(), &script, &NegationCues::default()).unwrap();
    let text = out.render();
    assert!(text.contains("he told animals the solution he told animals the solution he told animals the solution"));
    assert!(!text.contains("people the solution"));
    assert!(text.ends_with("[NEUTRAL] did not go on to achieve"));
    assert_eq!(out.sentences.len(), 7);
}

#[test]
fn reorder_preserves_sentence_multiset() {
    let cfg = NegativeConfig { rules: vec![RuleKind::Reorder], ..NegativeConfig::default() };
    let pool = SubstitutionPool::default();
    for (i, story) in corpus().iter().enumerate() {
        let neg = make_negative(story, &pool, &cfg, &mut rng::indexed_stream(1, "r", i as u64)).unwrap();
        assert_eq!(multiset(&neg.story), multiset(story));
        assert_ne!(neg.story, *story);
    }
}

#[test]
fn rule_specific_invariants() {
    let corpus = corpus();
    let pool = SubstitutionPool::from_corpus(&corpus, &NegativeConfig::default());
    for kind in [RuleKind::Repeat, RuleKind::Substitute] {
        let cfg = NegativeConfig { rules: vec![kind], ..NegativeConfig::default() };
        for (i, story) in corpus.iter().enumerate() {
            let neg = make_negative(story, &pool, &cfg, &mut rng::indexed_stream(2, "k", i as u64)).unwrap();
            match kind {
                RuleKind::Repeat => assert!(neg.story.n_tokens() > story.n_tokens()),
                _ => assert_eq!(neg.story.sentences.len(), story.sentences.len()),
            }
        }
    }
}

#[test]
fn discourse_dataset_is_interleaved_balanced_and_deterministic() {
    let corpus = corpus();
    let cfg = NegativeConfig::default();
    let a = build_discourse_dataset(&corpus, 5, &cfg).unwrap();
    let b = build_discourse_dataset(&corpus, 5, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 2 * corpus.len());
    for (pair, original) in a.chunks(2).zip(&corpus) {
        assert_eq!(pair[0].label, 1.0);
        assert!(pair[0].is_original());
        assert_eq!(&pair[0].story, original);
        assert_eq!(pair[1].label, 0.0);
        assert!(!pair[1].applied_rules.is_empty());
        assert_ne!(pair[1].story, pair[0].story);
    }
}

#[test]
fn empty_corpus_is_rejected() {
    assert!(build_discourse_dataset(&[], 0, &NegativeConfig::default()).is_err());
}

#[test]
fn rule_count_stays_within_bounds() {
    let corpus = corpus();
    let cfg = NegativeConfig::default();
    for item in build_discourse_dataset(&corpus, 9, &cfg).unwrap().iter().filter(|l| !l.is_original()) {
        let n = item.applied_rules.len();
        assert!((1..=2).contains(&n));
        let mut kinds: Vec<_> = item.applied_rules.iter().map(RuleApplication::kind).collect();
        kinds.dedup();
        assert_eq!(kinds.len(), n);
    }
}

proptest! {
    #[test]
    fn copula_negation_is_an_involution(
        subject in "[a-z]{1,6}",
        aux in prop::sample::select(vec!["is", "was", "are", "were", "can", "will"]),
        rest in prop::collection::vec("[a-z]{1,6}", 1..5),
    ) {
        prop_assume!(rest.iter().all(|w| w != "not" && w != "did"));
        let cues = NegationCues::default();
        let mut sentence = vec![subject, aux.to_string()];
        sentence.extend(rest);
        prop_assume!(!cues.auxiliaries.contains(&sentence[0]));
        let twice = cues.negate(&cues.negate(&sentence));
        prop_assert_eq!(twice, sentence);
    }

    #[test]
    fn every_negative_differs_from_its_source(seed in 0u64..10_000) {
        let corpus = corpus();
        let pool = SubstitutionPool::from_corpus(&corpus, &NegativeConfig::default());
        let story = &corpus[(seed % 100) as usize];
        let neg = make_negative(story, &pool, &NegativeConfig::default(), &mut rng::stream(seed, "p")).unwrap();
        prop_assert_ne!(&neg.story, story);
        prop_assert_eq!(neg.label, 0.0);
    }
}
