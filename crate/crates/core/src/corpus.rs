//! Word-level tokenization, story encoding, dataset I/O, delexicalization and
//! the synthetic topic corpus.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use log::info;
use rand::seq::IndexedRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, io_err, Error, Result};
use crate::rng;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const BOS: usize = 4;
pub const EOS: usize = 5;
pub const MALE: usize = 6;
pub const FEMALE: usize = 7;
pub const NEUTRAL: usize = 8;

/// Reserved tokens, in id order.
pub const RESERVED: [&str; 9] = [
    "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[BOS]", "[EOS]", "[MALE]", "[FEMALE]", "[NEUTRAL]",
];

pub const DELEX_TOKENS: [&str; 3] = ["[MALE]", "[FEMALE]", "[NEUTRAL]"];

pub fn is_reserved(token: &str) -> bool {
    RESERVED.contains(&token)
}

pub fn is_delex(token: &str) -> bool {
    DELEX_TOKENS.contains(&token)
}

/// Lowercasing whitespace tokenizer. Bracketed reserved tokens keep their
/// canonical upper-case spelling.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            let upper = w.to_uppercase();
            if is_reserved(&upper) {
                upper
            } else {
                w.to_lowercase()
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Story {
    pub sentences: Vec<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topic: Option<usize>,
}

impl Story {
    pub fn new(sentences: Vec<Vec<String>>) -> Self {
        Story {
            sentences,
            topic: None,
        }
    }

    pub fn from_texts<S: AsRef<str>>(sentences: &[S]) -> Self {
        Story::new(sentences.iter().map(|s| tokenize(s.as_ref())).collect())
    }

    pub fn with_topic(mut self, topic: usize) -> Self {
        self.topic = Some(topic);
        self
    }

    pub fn n_tokens(&self) -> usize {
        self.sentences.iter().map(Vec::len).sum()
    }

    pub fn words(&self) -> impl Iterator<Item = &String> {
        self.sentences.iter().flatten()
    }

    /// All words in order, sentence boundaries dropped.
    pub fn flat_words(&self) -> Vec<String> {
        self.words().cloned().collect()
    }

    /// Sentences joined by single spaces.
    pub fn render(&self) -> String {
        self.sentences
            .iter()
            .map(|s| s.join(" "))
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.sentences.is_empty() || self.n_tokens() == 0 {
            return Err("story has no tokens".into());
        }
        if let Some(i) = self.sentences.iter().position(Vec::is_empty) {
            return Err(format!("sentence {i} is empty"));
        }
        if let Some(bad) = self.words().find(|w| is_reserved(w) && !is_delex(w)) {
            return Err(format!("reserved token {bad} inside story text"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return invalid(format!("duplicate vocabulary entry {t}"));
            }
        }
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*r) {
                return invalid(format!("reserved token {r} must have id {i}"));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or("[UNK]")
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Writes `id<TAB>token` lines.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.save_with_header(path, &[])
    }

    /// Like [`Vocab::save`], with leading `# ` comment lines.
    pub fn save_with_header(&self, path: &Path, comments: &[String]) -> Result<()> {
        let mut out: String = comments.iter().map(|c| format!("# {c}\n")).collect();
        for (i, t) in self.tokens.iter().enumerate() {
            out.push_str(&format!("{i}\t{t}\n"));
        }
        fs::write(path, out).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut tokens = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.starts_with('#') {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                message,
            };
            let (id, tok) = line
                .split_once('\t')
                .ok_or_else(|| parse_err("expected id<TAB>token".into()))?;
            let id: usize = id.parse().map_err(|e| parse_err(format!("bad id: {e}")))?;
            if id != tokens.len() {
                return Err(parse_err(format!("expected id {}, found {id}", tokens.len())));
            }
            tokens.push(tok.to_string());
        }
        Vocab::from_tokens(tokens)
    }
}

/// Keeps the `max_size - RESERVED.len()` most frequent words, ties broken
/// lexicographically. `max_size` counts the reserved entries.
pub fn build_vocab(corpus: &[Story], max_size: usize) -> Result<Vocab> {
    if corpus.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if max_size <= RESERVED.len() {
        return invalid(format!("max_size must exceed the {} reserved tokens", RESERVED.len()));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for w in corpus.iter().flat_map(Story::words) {
        if !is_reserved(w) {
            *counts.entry(w.as_str()).or_default() += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let tokens = RESERVED
        .iter()
        .map(|s| s.to_string())
        .chain(ranked.into_iter().take(max_size - RESERVED.len()).map(|(w, _)| w.to_string()))
        .collect();
    Vocab::from_tokens(tokens)
}

/// Fixed-length encoder/decoder views of one story.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedStory {
    pub encoder_ids: Vec<usize>,
    pub decoder_input_ids: Vec<usize>,
    pub decoder_target_ids: Vec<usize>,
    /// `true` at real (non-pad) positions.
    pub pad_mask: Vec<bool>,
}

impl EncodedStory {
    /// Number of non-pad positions.
    pub fn real_len(&self) -> usize {
        self.pad_mask.iter().filter(|&&m| m).count()
    }

    /// Tokens scored by the reconstruction loss ([SEP] and [EOS] included).
    pub fn target_tokens(&self) -> usize {
        self.real_len()
    }
}

/// `[SEP]` after every sentence; truncation keeps a trailing `[SEP]` before
/// `[EOS]`; padded with `[PAD]` to `max_len`.
pub fn encode_story(story: &Story, vocab: &Vocab, max_len: usize) -> Result<EncodedStory> {
    if max_len < 4 {
        return invalid(format!("max_len must be at least 4, got {max_len}"));
    }
    if story.n_tokens() == 0 {
        return invalid("cannot encode an empty story");
    }
    let mut body: Vec<usize> = Vec::with_capacity(story.n_tokens() + story.sentences.len());
    for sentence in story.sentences.iter().filter(|s| !s.is_empty()) {
        body.extend(sentence.iter().map(|w| vocab.id(w)));
        body.push(SEP);
    }
    if body.len() + 1 > max_len {
        body.truncate(max_len - 1);
        if let Some(last) = body.last_mut() {
            *last = SEP;
        }
    }
    let real = body.len() + 1;
    let pad = |mut v: Vec<usize>| {
        v.resize(max_len, PAD);
        v
    };
    let encoder_ids = pad(std::iter::once(CLS).chain(body.iter().copied()).collect());
    let decoder_input_ids = pad(std::iter::once(BOS).chain(body.iter().copied()).collect());
    let decoder_target_ids = pad(body.iter().copied().chain(std::iter::once(EOS)).collect());
    let pad_mask = (0..max_len).map(|i| i < real).collect();
    Ok(EncodedStory {
        encoder_ids,
        decoder_input_ids,
        decoder_target_ids,
        pad_mask,
    })
}

/// Inverse of the encoding conventions: splits on `[SEP]`, stops at `[EOS]`,
/// skips `[PAD]`/`[BOS]`/`[CLS]`. A trailing unterminated sentence is kept.
pub fn decode_ids(ids: &[usize], vocab: &Vocab) -> Story {
    let mut sentences = Vec::new();
    let mut current = Vec::new();
    for &id in ids {
        match id {
            EOS => break,
            PAD | BOS | CLS => {}
            SEP => {
                if !current.is_empty() {
                    sentences.push(std::mem::take(&mut current));
                }
            }
            _ => current.push(vocab.token(id).to_string()),
        }
    }
    if !current.is_empty() {
        sentences.push(current);
    }
    Story::new(sentences)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Gender {
    Male,
    Female,
    Neutral,
}

impl Gender {
    pub fn token(self) -> &'static str {
        match self {
            Gender::Male => "[MALE]",
            Gender::Female => "[FEMALE]",
            Gender::Neutral => "[NEUTRAL]",
        }
    }
}

/// Lower-cased name to delexicalization tag.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NameLexicon {
    names: HashMap<String, Gender>,
}

impl NameLexicon {
    pub fn new<I: IntoIterator<Item = (String, Gender)>>(entries: I) -> Self {
        NameLexicon {
            names: entries
                .into_iter()
                .map(|(n, g)| (n.to_lowercase(), g))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Lines of `name TAG` with TAG one of MALE, FEMALE, NEUTRAL; `#` starts
    /// a comment.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut names = HashMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(name), Some(tag), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: n + 1,
                    message: "expected `name TAG`".into(),
                });
            };
            let gender = match tag.to_uppercase().as_str() {
                "MALE" => Gender::Male,
                "FEMALE" => Gender::Female,
                "NEUTRAL" => Gender::Neutral,
                other => {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        line: n + 1,
                        message: format!("unknown tag {other}"),
                    })
                }
            };
            names.insert(name.to_lowercase(), gender);
        }
        Ok(NameLexicon { names })
    }
}

/// Replaces every lexicon name by its tag; other tokens pass through.
pub fn delexicalize(text: &str, lexicon: &NameLexicon) -> Result<String> {
    if lexicon.is_empty() {
        return invalid("name lexicon is empty");
    }
    Ok(text
        .split_whitespace()
        .map(|w| match lexicon.names.get(&w.to_lowercase()) {
            Some(g) => g.token(),
            None => w,
        })
        .collect::<Vec<_>>()
        .join(" "))
}

#[derive(Deserialize)]
struct DatasetLine {
    sentences: Vec<String>,
    #[serde(default)]
    topic: Option<usize>,
}

#[derive(Serialize)]
struct DatasetLineOut {
    sentences: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    topic: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CorpusStats {
    pub docs: usize,
    pub tokens: usize,
}

pub fn corpus_stats(corpus: &[Story]) -> CorpusStats {
    CorpusStats {
        docs: corpus.len(),
        tokens: corpus.iter().map(Story::n_tokens).sum(),
    }
}

/// Reads JSON lines of `{"sentences": [...], "topic": optional int}`.
/// Blank lines are skipped.
pub fn load_dataset(path: &Path) -> Result<Vec<Story>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut stories = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message,
        };
        let parsed: DatasetLine =
            serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        let mut story = Story::from_texts(&parsed.sentences);
        story.topic = parsed.topic;
        story.validate().map_err(parse_err)?;
        stories.push(story);
    }
    if stories.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let stats = corpus_stats(&stories);
    info!("loaded {} stories ({} tokens) from {}", stats.docs, stats.tokens, path.display());
    Ok(stories)
}

pub fn save_dataset(path: &Path, stories: &[Story]) -> Result<()> {
    let mut out = Vec::new();
    for s in stories {
        let line = DatasetLineOut {
            sentences: s.sentences.iter().map(|w| w.join(" ")).collect(),
            topic: s.topic,
        };
        serde_json::to_writer(&mut out, &line)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&out).map_err(io_err(path))
}

/// Generator parameters for the synthetic topic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_docs: usize,
    pub n_topics: usize,
    pub vocab_per_topic: usize,
    pub sents_per_doc: usize,
    /// Inclusive range of words per sentence.
    pub min_words: usize,
    pub max_words: usize,
    /// Probability that a word is drawn from the story's topic vocabulary.
    pub topic_word_prob: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            n_docs: 200,
            n_topics: 2,
            vocab_per_topic: 20,
            sents_per_doc: 5,
            min_words: 5,
            max_words: 7,
            topic_word_prob: 0.8,
        }
    }
}

const TOPIC_STEMS: [&str; 12] = [
    "sea", "farm", "city", "space", "school", "forest", "music", "food", "war", "sport", "shop",
    "snow",
];

/// Function words shared by every topic.
pub const SHARED_WORDS: [&str; 12] = [
    "the", "a", "and", "then", "he", "she", "was", "to", "it", "of", "in", "with",
];

impl SynthConfig {
    /// Words that belong to topic `k` only.
    pub fn topic_vocabulary(&self, k: usize) -> Vec<String> {
        let stem = match TOPIC_STEMS.get(k) {
            Some(s) => s.to_string(),
            None => format!("topic{k}"),
        };
        (0..self.vocab_per_topic).map(|j| format!("{stem}{j}")).collect()
    }
}

/// Stories drawn from one dominant topic each: every word comes from the
/// topic vocabulary with `topic_word_prob`, else from [`SHARED_WORDS`].
pub fn synth_corpus(cfg: &SynthConfig) -> Result<Vec<Story>> {
    if cfg.n_topics < 2 {
        return invalid("synthetic corpus needs at least 2 topics");
    }
    if cfg.vocab_per_topic == 0 || cfg.sents_per_doc == 0 || cfg.min_words == 0 {
        return invalid("synthetic corpus sizes must be positive");
    }
    if cfg.min_words > cfg.max_words || !(0.0..=1.0).contains(&cfg.topic_word_prob) {
        return invalid("bad word-count range or topic word probability");
    }
    let vocabularies: Vec<Vec<String>> = (0..cfg.n_topics).map(|k| cfg.topic_vocabulary(k)).collect();
    let mut r = rng::stream(cfg.seed, "synth");
    let mut stories = Vec::with_capacity(cfg.n_docs);
    for _ in 0..cfg.n_docs {
        let topic = r.random_range(0..cfg.n_topics);
        let sentences = (0..cfg.sents_per_doc)
            .map(|_| {
                let len = r.random_range(cfg.min_words..=cfg.max_words);
                (0..len)
                    .map(|_| {
                        if r.random_bool(cfg.topic_word_prob) {
                            vocabularies[topic].choose(&mut r).cloned().unwrap_or_default()
                        } else {
                            SHARED_WORDS.choose(&mut r).map(|s| s.to_string()).unwrap_or_default()
                        }
                    })
                    .collect()
            })
            .collect();
        stories.push(Story::new(sentences).with_topic(topic));
    }
    Ok(stories)
}
