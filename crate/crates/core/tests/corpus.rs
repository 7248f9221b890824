use proptest::prelude::*;
use storyvae_core::corpus::*;
use storyvae_core::Error;

#[test]
fn dataset_round_trips_through_jsonl() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("stories.jsonl");
    let corpus = synth_corpus(&SynthConfig { n_docs: 12, seed: 4, ..SynthConfig::default() }).unwrap();
    save_dataset(&path, &corpus).unwrap();
    assert_eq!(load_dataset(&path).unwrap(), corpus);
}

#[test]
fn malformed_line_reports_its_number() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.jsonl");
    std::fs::write(&path, "{\"sentences\": [\"a b\"]}\n\n{\"sentences\": 3}\n").unwrap();
    match load_dataset(&path) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected a parse error, got {other:?}"),
    }
    std::fs::write(&path, "\n  \n").unwrap();
    assert!(matches!(load_dataset(&path), Err(Error::EmptyDataset)));
    assert!(matches!(load_dataset(&dir.path().join("missing.jsonl")), Err(Error::Io { .. })));
}

#[test]
fn empty_sentences_are_rejected_on_load() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.jsonl");
    std::fs::write(&path, "{\"sentences\": [\"a b\", \"  \"]}\n").unwrap();
    assert!(matches!(load_dataset(&path), Err(Error::Parse { line: 1, .. })));
    std::fs::write(&path, "{\"sentences\": [\"a [SEP] b\"]}\n").unwrap();
    assert!(matches!(load_dataset(&path), Err(Error::Parse { line: 1, .. })));
}

#[test]
fn vocab_round_trips_and_maps_unknowns() {
    let corpus = vec![Story::from_texts(&["the cat sat", "the dog ran"])];
    let vocab = build_vocab(&corpus, 100).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vocab.tsv");
    vocab.save(&path).unwrap();
    let back = Vocab::load(&path).unwrap();
    assert_eq!(back, vocab);
    assert_eq!(back.id("zebra"), UNK);
    assert_eq!(back.token(back.id("the")), "the");
    assert_eq!(back.id("[SEP]"), SEP);

    vocab.save_with_header(&path, &["config_hash abc".into()]).unwrap();
    assert!(std::fs::read_to_string(&path).unwrap().starts_with("# config_hash abc\n0\t"));
    assert_eq!(Vocab::load(&path).unwrap(), vocab);
}

#[test]
fn vocab_is_capped_by_frequency() {
    let corpus = vec![Story::from_texts(&["b a a c c c", "a c"])];
    let vocab = build_vocab(&corpus, RESERVED.len() + 2).unwrap();
    assert_eq!(vocab.len(), RESERVED.len() + 2);
    assert!(vocab.get("c").is_some() && vocab.get("a").is_some());
    assert!(vocab.get("b").is_none());
}

#[test]
fn name_lexicon_loads_and_delexicalizes() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("names.txt");
    std::fs::write(&path, "# names\nAlice FEMALE\nbob male\nsam NEUTRAL\n").unwrap();
    let lex = NameLexicon::load(&path).unwrap();
    assert_eq!(lex.len(), 3);
    assert_eq!(delexicalize("Alice met Bob and Sam", &lex).unwrap(), "[FEMALE] met [MALE] and [NEUTRAL]");

    std::fs::write(&path, "alice WOMAN\n").unwrap();
    assert!(matches!(NameLexicon::load(&path), Err(Error::Parse { line: 1, .. })));
    assert!(delexicalize("anything", &NameLexicon::new(Vec::new())).is_err());
}

#[test]
fn delex_tokens_survive_tokenization_and_encoding() {
    let s = Story::from_texts(&["[NEUTRAL] went Home"]);
    assert_eq!(s.sentences[0], vec!["[NEUTRAL]", "went", "home"]);
    let vocab = build_vocab(std::slice::from_ref(&s), 50).unwrap();
    let e = encode_story(&s, &vocab, 10).unwrap();
    assert_eq!(e.encoder_ids[1], NEUTRAL);
}

#[test]
fn stats_count_documents_and_words() {
    let corpus = vec![Story::from_texts(&["a b", "c"]), Story::from_texts(&["d e f"])];
    assert_eq!(corpus_stats(&corpus), CorpusStats { docs: 2, tokens: 6 });
}

#[test]
fn synthetic_corpus_is_seeded_and_labeled() {
    let cfg = SynthConfig { n_docs: 20, seed: 7, ..SynthConfig::default() };
    let a = synth_corpus(&cfg).unwrap();
    assert_eq!(a, synth_corpus(&cfg).unwrap());
    assert_ne!(a, synth_corpus(&SynthConfig { seed: 8, ..cfg.clone() }).unwrap());
    assert!(a.iter().all(|s| s.topic.is_some_and(|t| t < 2)));
    assert!(a.iter().all(|s| s.sentences.len() == cfg.sents_per_doc));
    assert!(a.iter().flat_map(|s| &s.sentences).all(|w| (cfg.min_words..=cfg.max_words).contains(&w.len())));
}

fn word() -> impl Strategy<Value = String> {
    "[a-z]{1,5}"
}

proptest! {
    #[test]
    fn encode_then_decode_is_identity_without_truncation(
        sentences in prop::collection::vec(prop::collection::vec(word(), 1..5), 1..4),
    ) {
        let story = Story::new(sentences);
        let vocab = build_vocab(std::slice::from_ref(&story), 200).unwrap();
        let max_len = story.n_tokens() + story.sentences.len() + 2;
        let e = encode_story(&story, &vocab, max_len).unwrap();
        prop_assert_eq!(decode_ids(&e.decoder_target_ids, &vocab), story);
        prop_assert_eq!(e.target_tokens(), e.pad_mask.iter().filter(|&&m| m).count());
    }

    #[test]
    fn truncated_encodings_keep_their_shape(
        sentences in prop::collection::vec(prop::collection::vec(word(), 1..8), 1..6),
        max_len in 4usize..20,
    ) {
        let story = Story::new(sentences);
        let vocab = build_vocab(std::slice::from_ref(&story), 200).unwrap();
        let e = encode_story(&story, &vocab, max_len).unwrap();
        prop_assert_eq!(e.encoder_ids.len(), max_len);
        prop_assert_eq!(e.decoder_input_ids.len(), max_len);
        prop_assert_eq!(e.decoder_target_ids.len(), max_len);
        prop_assert_eq!(e.decoder_input_ids[0], BOS);
        prop_assert_eq!(e.decoder_target_ids[e.real_len() - 1], EOS);
        prop_assert_eq!(&e.decoder_input_ids[1..e.real_len()], &e.decoder_target_ids[..e.real_len() - 1]);
    }
}
