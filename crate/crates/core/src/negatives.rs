//! Negative stories built from repeat, substitute, reorder and negate rules,
//! and the interleaved original/negative discourse dataset.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::{is_reserved, Story};
use crate::error::{invalid, io_err, Error, Result};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RuleKind {
    Repeat,
    Substitute,
    Reorder,
    Negate,
}

impl RuleKind {
    pub const ALL: [RuleKind; 4] = [RuleKind::Repeat, RuleKind::Substitute, RuleKind::Reorder, RuleKind::Negate];
}

/// One concrete, replayable edit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum RuleApplication {
    RepeatSentence { sentence: usize, times: usize },
    RepeatNgram { sentence: usize, start: usize, n: usize, times: usize },
    SubstituteWord { sentence: usize, position: usize, replacement: String },
    SubstituteSentence { sentence: usize, replacement: Vec<String> },
    /// Removes sentence `from` and reinserts it so that it ends up at index `to`.
    Reorder { from: usize, to: usize },
    Negate { sentence: usize },
}

impl RuleApplication {
    pub fn kind(&self) -> RuleKind {
        match self {
            RuleApplication::RepeatSentence { .. } | RuleApplication::RepeatNgram { .. } => RuleKind::Repeat,
            RuleApplication::SubstituteWord { .. } | RuleApplication::SubstituteSentence { .. } => {
                RuleKind::Substitute
            }
            RuleApplication::Reorder { .. } => RuleKind::Reorder,
            RuleApplication::Negate { .. } => RuleKind::Negate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledStory {
    pub story: Story,
    pub label: f64,
    pub applied_rules: Vec<RuleApplication>,
}

impl LabeledStory {
    pub fn original(story: Story) -> Self {
        LabeledStory {
            story,
            label: 1.0,
            applied_rules: Vec::new(),
        }
    }

    pub fn is_original(&self) -> bool {
        self.applied_rules.is_empty()
    }
}

/// Cue words for toggling negation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NegationCues {
    /// Auxiliaries and copulas that take a following "not".
    pub auxiliaries: Vec<String>,
    /// Past-tense verb to base form, for the "did not" rewrite.
    pub past_verbs: HashMap<String, String>,
}

impl Default for NegationCues {
    fn default() -> Self {
        let aux = [
            "is", "was", "are", "were", "am", "do", "does", "did", "can", "could", "will", "would",
            "should", "must", "may", "might",
        ];
        let verbs = [
            ("went", "go"), ("told", "tell"), ("knew", "know"), ("agreed", "agree"),
            ("thought", "think"), ("ran", "run"), ("saw", "see"), ("made", "make"),
            ("took", "take"), ("came", "come"), ("got", "get"), ("found", "find"),
            ("gave", "give"), ("said", "say"), ("felt", "feel"), ("decided", "decide"),
            ("wanted", "want"), ("liked", "like"), ("loved", "love"), ("played", "play"),
            ("walked", "walk"), ("looked", "look"), ("bought", "buy"), ("ate", "eat"),
            ("left", "leave"), ("had", "have"), ("tried", "try"), ("asked", "ask"),
        ];
        NegationCues {
            auxiliaries: aux.iter().map(|s| s.to_string()).collect(),
            past_verbs: verbs.iter().map(|(p, b)| (p.to_string(), b.to_string())).collect(),
        }
    }
}

impl NegationCues {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn base_to_past(&self, base: &str) -> Option<&str> {
        // smallest past form for a deterministic answer when several map to one base
        self.past_verbs
            .iter()
            .filter(|(_, b)| b.as_str() == base)
            .map(|(p, _)| p.as_str())
            .min()
    }

    /// Toggles negation on one sentence. In order: "did not <base>" becomes the
    /// past form (or loses "did not" if the base is unknown); "not" after the
    /// first auxiliary is removed or inserted; the first known past-tense verb
    /// becomes "did not <base>"; otherwise "did not" follows the first token.
    /// Applying it twice restores the sentence, except where the input already
    /// contained an affirmative "did <base>".
    pub fn negate(&self, sentence: &[String]) -> Vec<String> {
        let mut s = sentence.to_vec();
        if let Some(i) = (0..s.len().saturating_sub(1)).find(|&i| s[i] == "did" && s[i + 1] == "not") {
            match s.get(i + 2).and_then(|b| self.base_to_past(b)) {
                Some(past) => {
                    let past = past.to_string();
                    s.splice(i..i + 3, [past]);
                }
                None => {
                    s.drain(i..i + 2);
                }
            }
            return s;
        }
        if let Some(i) = s.iter().position(|w| self.auxiliaries.contains(w)) {
            if s.get(i + 1).map(String::as_str) == Some("not") {
                s.remove(i + 1);
            } else {
                s.insert(i + 1, "not".into());
            }
            return s;
        }
        if let Some((i, base)) = s
            .iter()
            .enumerate()
            .find_map(|(i, w)| self.past_verbs.get(w).map(|b| (i, b.clone())))
        {
            s.splice(i..i + 1, ["did".to_string(), "not".to_string(), base]);
            return s;
        }
        let at = 1.min(s.len());
        s.splice(at..at, ["did".to_string(), "not".to_string()]);
        s
    }
}

pub const DEFAULT_STOPWORDS: [&str; 44] = [
    "the", "a", "an", "and", "or", "but", "then", "so", "he", "she", "it", "they", "we", "i",
    "you", "him", "her", "his", "them", "their", "was", "were", "is", "are", "be", "been", "to",
    "of", "in", "on", "at", "for", "with", "by", "from", "that", "this", "not", "did", "do", ".",
    ",", "!", "?",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegativeConfig {
    pub min_rules: usize,
    pub max_rules: usize,
    /// Rules that may be sampled.
    pub rules: Vec<RuleKind>,
    pub cues: NegationCues,
    pub stopwords: Vec<String>,
    /// Sampling attempts before giving up on producing a changed story.
    pub max_attempts: usize,
}

impl Default for NegativeConfig {
    fn default() -> Self {
        NegativeConfig {
            min_rules: 1,
            max_rules: 2,
            rules: RuleKind::ALL.to_vec(),
            cues: NegationCues::default(),
            stopwords: DEFAULT_STOPWORDS.iter().map(|s| s.to_string()).collect(),
            max_attempts: 32,
        }
    }
}

impl NegativeConfig {
    pub fn is_content(&self, w: &str) -> bool {
        !is_reserved(w) && !self.stopwords.iter().any(|s| s == w)
    }
}

/// Corpus material for substitutions.
#[derive(Debug, Clone, Default)]
pub struct SubstitutionPool {
    /// Content-word occurrences (frequency weighted).
    pub words: Vec<String>,
    pub sentences: Vec<Vec<String>>,
}

impl SubstitutionPool {
    pub fn from_corpus(corpus: &[Story], cfg: &NegativeConfig) -> Self {
        SubstitutionPool {
            words: corpus
                .iter()
                .flat_map(Story::words)
                .filter(|w| cfg.is_content(w))
                .cloned()
                .collect(),
            sentences: corpus
                .iter()
                .flat_map(|s| s.sentences.iter())
                .filter(|s| !s.is_empty())
                .cloned()
                .collect(),
        }
    }
}

fn check_sentence(story: &Story, i: usize) -> Result<()> {
    if i >= story.sentences.len() {
        return invalid(format!("sentence {i} out of range ({} sentences)", story.sentences.len()));
    }
    Ok(())
}

/// Applies one edit; used for sampled and scripted sequences alike.
pub fn apply(story: &Story, rule: &RuleApplication, cues: &NegationCues) -> Result<Story> {
    let mut out = story.clone();
    match rule {
        RuleApplication::RepeatSentence { sentence, times } => {
            check_sentence(story, *sentence)?;
            let copy = story.sentences[*sentence].clone();
            for _ in 0..*times {
                out.sentences.insert(sentence + 1, copy.clone());
            }
        }
        RuleApplication::RepeatNgram { sentence, start, n, times } => {
            check_sentence(story, *sentence)?;
            let s = &story.sentences[*sentence];
            if *n == 0 || start + n > s.len() {
                return invalid("n-gram out of range");
            }
            let gram = s[*start..start + n].to_vec();
            let at = start + n;
            let target = &mut out.sentences[*sentence];
            for _ in 0..*times {
                target.splice(at..at, gram.iter().cloned());
            }
        }
        RuleApplication::SubstituteWord { sentence, position, replacement } => {
            check_sentence(story, *sentence)?;
            let slot = out.sentences[*sentence]
                .get_mut(*position)
                .ok_or_else(|| Error::Invalid(format!("word {position} out of range")))?;
            *slot = replacement.clone();
        }
        RuleApplication::SubstituteSentence { sentence, replacement } => {
            check_sentence(story, *sentence)?;
            out.sentences[*sentence] = replacement.clone();
        }
        RuleApplication::Reorder { from, to } => {
            check_sentence(story, *from)?;
            check_sentence(story, *to)?;
            let moved = out.sentences.remove(*from);
            out.sentences.insert(*to, moved);
        }
        RuleApplication::Negate { sentence } => {
            check_sentence(story, *sentence)?;
            out.sentences[*sentence] = cues.negate(&story.sentences[*sentence]);
        }
    }
    Ok(out)
}

pub fn apply_all(story: &Story, rules: &[RuleApplication], cues: &NegationCues) -> Result<Story> {
    rules.iter().try_fold(story.clone(), |s, r| apply(&s, r, cues))
}

fn eligible(kind: RuleKind, story: &Story, pool: &SubstitutionPool, cfg: &NegativeConfig) -> bool {
    let has_tokens = story.n_tokens() > 0;
    match kind {
        RuleKind::Repeat | RuleKind::Negate => has_tokens,
        RuleKind::Reorder => story.sentences.len() >= 2,
        RuleKind::Substitute => {
            let word_ok = !pool.words.is_empty() && story.words().any(|w| cfg.is_content(w));
            word_ok || !pool.sentences.is_empty()
        }
    }
}

fn sample_application(
    kind: RuleKind,
    story: &Story,
    pool: &SubstitutionPool,
    cfg: &NegativeConfig,
    r: &mut Rng,
) -> Option<RuleApplication> {
    let n_sent = story.sentences.len();
    let non_empty: Vec<usize> = (0..n_sent).filter(|&i| !story.sentences[i].is_empty()).collect();
    match kind {
        RuleKind::Repeat => {
            let times = r.random_range(1..=2);
            let ngram_sents: Vec<usize> = (0..n_sent).filter(|&i| story.sentences[i].len() >= 2).collect();
            if !ngram_sents.is_empty() && r.random_bool(0.5) {
                let sentence = *ngram_sents.choose(r)?;
                let len = story.sentences[sentence].len();
                let n = r.random_range(2..=len.min(4));
                let start = r.random_range(0..=len - n);
                Some(RuleApplication::RepeatNgram { sentence, start, n, times })
            } else {
                Some(RuleApplication::RepeatSentence { sentence: *non_empty.choose(r)?, times })
            }
        }
        RuleKind::Substitute => {
            let slots: Vec<(usize, usize)> = story
                .sentences
                .iter()
                .enumerate()
                .flat_map(|(i, s)| s.iter().enumerate().filter(|(_, w)| cfg.is_content(w)).map(move |(j, _)| (i, j)))
                .collect();
            let word_ok = !slots.is_empty() && !pool.words.is_empty();
            if word_ok && (pool.sentences.is_empty() || r.random_bool(0.5)) {
                let (sentence, position) = *slots.choose(r)?;
                let current = &story.sentences[sentence][position];
                let replacement = pool.words.choose(r)?.clone();
                (&replacement != current).then_some(RuleApplication::SubstituteWord {
                    sentence,
                    position,
                    replacement,
                })
            } else {
                let sentence = r.random_range(0..n_sent);
                let replacement = pool.sentences.choose(r)?.clone();
                (replacement != story.sentences[sentence])
                    .then_some(RuleApplication::SubstituteSentence { sentence, replacement })
            }
        }
        RuleKind::Reorder => {
            let from = r.random_range(0..n_sent);
            let mut to = r.random_range(0..n_sent - 1);
            if to >= from {
                to += 1;
            }
            Some(RuleApplication::Reorder { from, to })
        }
        RuleKind::Negate => Some(RuleApplication::Negate { sentence: *non_empty.choose(r)? }),
    }
}

/// Samples between `min_rules` and `max_rules` distinct eligible rules, in
/// random order, and applies them. Resamples until the result differs.
pub fn make_negative(
    story: &Story,
    pool: &SubstitutionPool,
    cfg: &NegativeConfig,
    r: &mut Rng,
) -> Result<LabeledStory> {
    if cfg.min_rules == 0 || cfg.min_rules > cfg.max_rules {
        return invalid("need 1 <= min_rules <= max_rules");
    }
    let mut kinds: Vec<RuleKind> = cfg.rules.clone();
    kinds.dedup();
    kinds.retain(|&k| eligible(k, story, pool, cfg));
    if kinds.is_empty() || kinds.len() < cfg.min_rules {
        return Err(Error::NoApplicableRule);
    }
    let max = cfg.max_rules.min(kinds.len());
    for _ in 0..cfg.max_attempts {
        let size = r.random_range(cfg.min_rules..=max);
        kinds.shuffle(r);
        let mut current = story.clone();
        let mut applied = Vec::with_capacity(size);
        for &kind in &kinds[..size] {
            if let Some(app) = sample_application(kind, &current, pool, cfg, r) {
                current = apply(&current, &app, &cfg.cues)?;
                applied.push(app);
            }
        }
        if !applied.is_empty() && current != *story {
            return Ok(LabeledStory {
                story: current,
                label: 0.0,
                applied_rules: applied,
            });
        }
    }
    Err(Error::NoApplicableRule)
}

/// `[original_0, negative_0, original_1, negative_1, ...]`; story `i` draws
/// from its own stream derived from `seed`.
pub fn build_discourse_dataset(corpus: &[Story], seed: u64, cfg: &NegativeConfig) -> Result<Vec<LabeledStory>> {
    if corpus.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let pool = SubstitutionPool::from_corpus(corpus, cfg);
    let mut out = Vec::with_capacity(2 * corpus.len());
    for (i, story) in corpus.iter().enumerate() {
        let mut r = rng::indexed_stream(seed, "negatives", i as u64);
        let negative = make_negative(story, &pool, cfg, &mut r)?;
        out.push(LabeledStory::original(story.clone()));
        out.push(negative);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(text: &str) -> Vec<String> {
        crate::corpus::tokenize(text)
    }

    #[test]
    fn copula_negation_toggles() {
        let cues = NegationCues::default();
        let once = cues.negate(&s("she was happy"));
        assert_eq!(once, s("she was not happy"));
        assert_eq!(cues.negate(&once), s("she was happy"));
    }

    #[test]
    fn past_verb_negation_uses_did_not() {
        let cues = NegationCues::default();
        let once = cues.negate(&s("[NEUTRAL] went on to achieve"));
        assert_eq!(once, s("[NEUTRAL] did not go on to achieve"));
        assert_eq!(cues.negate(&once), s("[NEUTRAL] went on to achieve"));
    }

    #[test]
    fn fallback_negation_inserts_after_first_token() {
        let cues = NegationCues::default();
        let once = cues.negate(&s("tom smiles"));
        assert_eq!(once, s("tom did not smiles"));
        assert_eq!(cues.negate(&once), s("tom smiles"));
    }

    #[test]
    fn reorder_on_single_sentence_has_no_rule() {
        let story = Story::from_texts(&["one two three"]);
        let cfg = NegativeConfig {
            rules: vec![RuleKind::Reorder],
            ..NegativeConfig::default()
        };
        let pool = SubstitutionPool::default();
        let err = make_negative(&story, &pool, &cfg, &mut rng::stream(0, "t")).unwrap_err();
        assert!(matches!(err, Error::NoApplicableRule));
        assert_eq!(err.to_string(), "no applicable rule");
    }

    #[test]
    fn ngram_repeat_inserts_after_itself() {
        let story = Story::from_texts(&["a b c d"]);
        let out = apply(
            &story,
            &RuleApplication::RepeatNgram { sentence: 0, start: 1, n: 2, times: 2 },
            &NegationCues::default(),
        )
        .unwrap();
        assert_eq!(out.sentences[0], s("a b c b c b c d"));
    }
}
