//! LDA by collapsed Gibbs sampling, fold-in inference of per-story topic
//! distributions, and NPMI coherence for choosing the topic count.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use log::warn;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::{is_reserved, Story};
use crate::error::{invalid, io_err, Error, Result};
use crate::rng::{self, Rng};

pub const DEFAULT_MAX_VOCAB: usize = 50_000;
pub const DEFAULT_BETA: f64 = 0.01;
pub const FOLD_IN_SWEEPS: usize = 20;
pub const FOLD_IN_AVERAGED: usize = 5;

/// Word list used by the topic model; independent of the network [`crate::corpus::Vocab`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct LdaVocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for LdaVocab {
    fn from(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        LdaVocab { words, index }
    }
}

impl From<LdaVocab> for Vec<String> {
    fn from(v: LdaVocab) -> Self {
        v.words
    }
}

impl LdaVocab {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    /// In-vocabulary word ids of a story, in order.
    pub fn doc_ids(&self, story: &Story) -> Vec<usize> {
        story.words().filter_map(|w| self.id(w)).collect()
    }
}

/// Drops reserved tokens and words found in more than half of the documents,
/// then keeps the `max_vocab` most frequent (ties lexicographic).
pub fn lda_vocab_filter(corpus: &[Story], max_vocab: usize) -> Result<LdaVocab> {
    if corpus.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut df: HashMap<&str, usize> = HashMap::new();
    let mut tf: HashMap<&str, usize> = HashMap::new();
    for story in corpus {
        let mut seen = HashSet::new();
        for w in story.words().filter(|w| !is_reserved(w)) {
            *tf.entry(w).or_default() += 1;
            if seen.insert(w.as_str()) {
                *df.entry(w).or_default() += 1;
            }
        }
    }
    let n_docs = corpus.len();
    // df / D > 1/2  <=>  2 df > D
    let mut kept: Vec<(&str, usize)> = tf
        .into_iter()
        .filter(|(w, _)| 2 * df[w] <= n_docs)
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    kept.truncate(max_vocab);
    if kept.is_empty() {
        return invalid("every token was filtered out of the LDA vocabulary");
    }
    Ok(LdaVocab::from(kept.into_iter().map(|(w, _)| w.to_string()).collect::<Vec<_>>()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LdaConfig {
    pub k: usize,
    pub iters: usize,
    pub seed: u64,
    /// Defaults to 50/K.
    pub alpha: Option<f64>,
    pub beta: f64,
    pub max_vocab: usize,
}

impl Default for LdaConfig {
    fn default() -> Self {
        LdaConfig {
            k: 2,
            iters: 200,
            seed: 0,
            alpha: None,
            beta: DEFAULT_BETA,
            max_vocab: DEFAULT_MAX_VOCAB,
        }
    }
}

impl LdaConfig {
    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or(50.0 / self.k as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicDistribution {
    pub probs: Vec<f64>,
}

impl TopicDistribution {
    pub fn uniform(k: usize) -> Self {
        TopicDistribution {
            probs: vec![1.0 / k as f64; k],
        }
    }

    pub fn k(&self) -> usize {
        self.probs.len()
    }

    /// Index of the largest probability; lowest index on ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    xs.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicModel {
    pub k: usize,
    pub alpha: f64,
    pub beta: f64,
    pub vocab: LdaVocab,
    /// K x V.
    pub topic_word_counts: Vec<Vec<u32>>,
    pub topic_totals: Vec<u32>,
    /// D x K, aligned with the fitted corpus. Not persisted.
    #[serde(skip)]
    pub doc_topic_counts: Vec<Vec<u32>>,
    #[serde(skip)]
    pub assignments: Vec<Vec<usize>>,
    #[serde(skip)]
    pub docs: Vec<Vec<usize>>,
}

impl TopicModel {
    pub fn v(&self) -> usize {
        self.vocab.len()
    }

    pub fn total_assigned(&self) -> u64 {
        self.topic_totals.iter().map(|&c| c as u64).sum()
    }

    /// Recomputes every count table from the assignments.
    pub fn check_counts(&self) -> std::result::Result<(), String> {
        let (k, v) = (self.k, self.v());
        let mut tw = vec![vec![0u32; v]; k];
        let mut totals = vec![0u32; k];
        for (d, (doc, z)) in self.docs.iter().zip(&self.assignments).enumerate() {
            if doc.len() != z.len() {
                return Err(format!("doc {d}: {} tokens, {} assignments", doc.len(), z.len()));
            }
            let mut dt = vec![0u32; k];
            for (&w, &t) in doc.iter().zip(z) {
                tw[t][w] += 1;
                totals[t] += 1;
                dt[t] += 1;
            }
            if dt != self.doc_topic_counts[d] {
                return Err(format!("doc {d}: doc-topic counts disagree with assignments"));
            }
            if dt.iter().sum::<u32>() as usize != doc.len() {
                return Err(format!("doc {d}: counts do not sum to document length"));
            }
        }
        if tw != self.topic_word_counts {
            return Err("topic-word counts disagree with assignments".into());
        }
        if totals != self.topic_totals {
            return Err("topic totals disagree with assignments".into());
        }
        Ok(())
    }

    /// Smoothed topic mixture of fitted document `d`.
    pub fn doc_distribution(&self, d: usize) -> TopicDistribution {
        smoothed(&self.doc_topic_counts[d], self.alpha)
    }

    /// Top `n` word ids of topic `k` by count, ties to lower id.
    pub fn top_words(&self, k: usize, n: usize) -> Vec<usize> {
        let mut ids: Vec<usize> = (0..self.v()).collect();
        ids.sort_by(|&a, &b| self.topic_word_counts[k][b].cmp(&self.topic_word_counts[k][a]).then(a.cmp(&b)));
        ids.truncate(n);
        ids
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        fs::write(path, json).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let model: TopicModel = serde_json::from_str(&text)?;
        if model.topic_word_counts.len() != model.k
            || model.topic_word_counts.iter().any(|r| r.len() != model.vocab.len())
        {
            return invalid("topic model tables do not match K x V");
        }
        Ok(model)
    }

    fn sample_topic(
        &self,
        w: usize,
        doc_counts: &[u32],
        weights: &mut [f64],
        r: &mut Rng,
    ) -> usize {
        let vbeta = self.v() as f64 * self.beta;
        let mut total = 0.0;
        for (t, wt) in weights.iter_mut().enumerate() {
            total += (doc_counts[t] as f64 + self.alpha)
                * (self.topic_word_counts[t][w] as f64 + self.beta)
                / (self.topic_totals[t] as f64 + vbeta);
            *wt = total;
        }
        let u = r.random::<f64>() * total;
        weights.iter().position(|&c| u < c).unwrap_or(self.k - 1)
    }
}

fn smoothed(counts: &[u32], alpha: f64) -> TopicDistribution {
    let k = counts.len() as f64;
    let n: f64 = counts.iter().map(|&c| c as f64).sum();
    TopicDistribution {
        probs: counts.iter().map(|&c| (c as f64 + alpha) / (n + k * alpha)).collect(),
    }
}

pub fn fit_lda(corpus: &[Story], cfg: &LdaConfig) -> Result<TopicModel> {
    fit_lda_observed(corpus, cfg, |_, _| {})
}

/// [`fit_lda`] with a callback after every sweep (sweep index from 1).
pub fn fit_lda_observed(
    corpus: &[Story],
    cfg: &LdaConfig,
    mut on_sweep: impl FnMut(usize, &TopicModel),
) -> Result<TopicModel> {
    if cfg.k == 0 || cfg.iters == 0 {
        return invalid("LDA needs K >= 1 and iters >= 1");
    }
    if !(cfg.alpha() > 0.0 && cfg.beta > 0.0) {
        return invalid("LDA hyperparameters must be positive");
    }
    let vocab = lda_vocab_filter(corpus, cfg.max_vocab)?;
    let docs: Vec<Vec<usize>> = corpus.iter().map(|s| vocab.doc_ids(s)).collect();
    let skipped = docs.iter().filter(|d| d.is_empty()).count();
    if skipped > 0 {
        warn!("{skipped} documents have no LDA-vocabulary tokens and are skipped");
    }
    let (k, v) = (cfg.k, vocab.len());
    let mut r = rng::stream(cfg.seed, "lda");
    let mut model = TopicModel {
        k,
        alpha: cfg.alpha(),
        beta: cfg.beta,
        vocab,
        topic_word_counts: vec![vec![0; v]; k],
        topic_totals: vec![0; k],
        doc_topic_counts: vec![vec![0; k]; docs.len()],
        assignments: Vec::with_capacity(docs.len()),
        docs: Vec::new(),
    };
    for (d, doc) in docs.iter().enumerate() {
        let z: Vec<usize> = doc.iter().map(|_| r.random_range(0..k)).collect();
        for (&w, &t) in doc.iter().zip(&z) {
            model.topic_word_counts[t][w] += 1;
            model.topic_totals[t] += 1;
            model.doc_topic_counts[d][t] += 1;
        }
        model.assignments.push(z);
    }
    model.docs = docs;
    let mut weights = vec![0.0; k];
    for sweep in 1..=cfg.iters {
        for d in 0..model.docs.len() {
            for i in 0..model.docs[d].len() {
                let w = model.docs[d][i];
                let old = model.assignments[d][i];
                model.topic_word_counts[old][w] -= 1;
                model.topic_totals[old] -= 1;
                model.doc_topic_counts[d][old] -= 1;
                let doc_counts = std::mem::take(&mut model.doc_topic_counts[d]);
                let new = model.sample_topic(w, &doc_counts, &mut weights, &mut r);
                model.doc_topic_counts[d] = doc_counts;
                model.topic_word_counts[new][w] += 1;
                model.topic_totals[new] += 1;
                model.doc_topic_counts[d][new] += 1;
                model.assignments[d][i] = new;
            }
        }
        on_sweep(sweep, &model);
    }
    Ok(model)
}

/// Fold-in Gibbs with the topic-word table fixed: [`FOLD_IN_SWEEPS`] sweeps,
/// the smoothed mixture averaged over the last [`FOLD_IN_AVERAGED`].
pub fn infer_topics(model: &TopicModel, doc: &Story, r: &mut Rng) -> TopicDistribution {
    let ids = model.vocab.doc_ids(doc);
    if ids.is_empty() {
        warn!("document has no LDA-vocabulary tokens; returning a uniform topic distribution");
        return TopicDistribution::uniform(model.k);
    }
    let k = model.k;
    let mut z: Vec<usize> = ids.iter().map(|_| r.random_range(0..k)).collect();
    let mut counts = vec![0u32; k];
    for &t in &z {
        counts[t] += 1;
    }
    let mut weights = vec![0.0; k];
    let mut acc = vec![0.0; k];
    for sweep in 0..FOLD_IN_SWEEPS {
        for (i, &w) in ids.iter().enumerate() {
            counts[z[i]] -= 1;
            z[i] = model.sample_topic(w, &counts, &mut weights, r);
            counts[z[i]] += 1;
        }
        if sweep >= FOLD_IN_SWEEPS - FOLD_IN_AVERAGED {
            for (a, p) in acc.iter_mut().zip(smoothed(&counts, model.alpha).probs) {
                *a += p;
            }
        }
    }
    TopicDistribution {
        probs: acc.into_iter().map(|a| a / FOLD_IN_AVERAGED as f64).collect(),
    }
}

/// Q(T) for every story, each from its own derived stream.
pub fn infer_corpus(model: &TopicModel, corpus: &[Story], seed: u64) -> Vec<TopicDistribution> {
    corpus
        .iter()
        .enumerate()
        .map(|(i, s)| infer_topics(model, s, &mut rng::indexed_stream(seed, "infer", i as u64)))
        .collect()
}

/// NPMI from document frequencies with +1 smoothing on every count:
/// p(x) = (df(x) + 1) / (D + 1).
pub fn npmi(n_docs: usize, df_a: usize, df_b: usize, df_ab: usize) -> f64 {
    let denom = n_docs as f64 + 1.0;
    let p_ab = (df_ab as f64 + 1.0) / denom;
    let p_a = (df_a as f64 + 1.0) / denom;
    let p_b = (df_b as f64 + 1.0) / denom;
    if p_ab >= 1.0 {
        return 1.0;
    }
    (p_ab.ln() - (p_a * p_b).ln()) / -p_ab.ln()
}

/// Document sets of each word, for co-occurrence counting.
pub struct DocFrequencies {
    n_docs: usize,
    docs_of: HashMap<String, HashSet<usize>>,
}

impl DocFrequencies {
    pub fn new(corpus: &[Story]) -> Self {
        let mut docs_of: HashMap<String, HashSet<usize>> = HashMap::new();
        for (d, s) in corpus.iter().enumerate() {
            for w in s.words() {
                docs_of.entry(w.clone()).or_default().insert(d);
            }
        }
        DocFrequencies {
            n_docs: corpus.len(),
            docs_of,
        }
    }

    pub fn df(&self, w: &str) -> usize {
        self.docs_of.get(w).map_or(0, HashSet::len)
    }

    pub fn co_df(&self, a: &str, b: &str) -> usize {
        match (self.docs_of.get(a), self.docs_of.get(b)) {
            (Some(x), Some(y)) => x.intersection(y).count(),
            _ => 0,
        }
    }

    pub fn npmi(&self, a: &str, b: &str) -> f64 {
        npmi(self.n_docs, self.df(a), self.df(b), self.co_df(a, b))
    }
}

/// Mean over topics of the mean pairwise NPMI among each topic's top words.
pub fn coherence_npmi(model: &TopicModel, corpus: &[Story], top_n: usize) -> Result<f64> {
    if top_n < 2 {
        return invalid("coherence needs top_n >= 2");
    }
    if corpus.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let freqs = DocFrequencies::new(corpus);
    let mut total = 0.0;
    for k in 0..model.k {
        let top = model.top_words(k, top_n);
        let mut sum = 0.0;
        let mut pairs = 0usize;
        for i in 0..top.len() {
            for j in i + 1..top.len() {
                sum += freqs.npmi(model.vocab.word(top[i]), model.vocab.word(top[j]));
                pairs += 1;
            }
        }
        total += if pairs > 0 { sum / pairs as f64 } else { 0.0 };
    }
    Ok(total / model.k as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KSelection {
    pub best_k: usize,
    /// (K, coherence) per candidate, in candidate order.
    pub scores: Vec<(usize, f64)>,
}

/// Fits one model per candidate K and keeps the most coherent; earlier
/// candidates win ties.
pub fn select_k(corpus: &[Story], candidates: &[usize], base: &LdaConfig, top_n: usize) -> Result<KSelection> {
    if candidates.is_empty() {
        return invalid("select_k needs at least one candidate K");
    }
    let mut scores = Vec::with_capacity(candidates.len());
    for &k in candidates {
        let cfg = LdaConfig {
            k,
            alpha: None,
            ..base.clone()
        };
        let model = fit_lda(corpus, &cfg)?;
        scores.push((k, coherence_npmi(&model, corpus, top_n)?));
    }
    let best = scores
        .iter()
        .fold(scores[0], |best, &s| if s.1 > best.1 { s } else { best });
    Ok(KSelection {
        best_k: best.0,
        scores,
    })
}

/// Cluster purity of fitted documents (by argmax topic) against their labels.
/// Unlabeled and skipped documents are ignored.
pub fn topic_purity(model: &TopicModel, corpus: &[Story]) -> Result<f64> {
    let mut table: HashMap<(usize, usize), usize> = HashMap::new();
    let mut n = 0usize;
    for (d, s) in corpus.iter().enumerate() {
        let (Some(label), Some(doc)) = (s.topic, model.docs.get(d)) else {
            continue;
        };
        if doc.is_empty() {
            continue;
        }
        let cluster = model.doc_distribution(d).argmax();
        *table.entry((cluster, label)).or_default() += 1;
        n += 1;
    }
    if n == 0 {
        return invalid("no labeled fitted documents");
    }
    let mut best: HashMap<usize, usize> = HashMap::new();
    for (&(cluster, _), &c) in &table {
        let e = best.entry(cluster).or_default();
        *e = (*e).max(c);
    }
    Ok(best.values().sum::<usize>() as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn docs(texts: &[&str]) -> Vec<Story> {
        texts.iter().map(|t| Story::from_texts(&[*t])).collect()
    }

    #[test]
    fn vocab_filter_document_frequency_boundary() {
        let corpus = docs(&["a b", "a c", "a b", "a d"]);
        let v = lda_vocab_filter(&corpus, 100).unwrap();
        assert!(!v.contains("a"));
        assert!(v.contains("b"));
        assert!(v.contains("c"));
    }

    #[test]
    fn vocab_filter_excludes_reserved_and_errors_when_empty() {
        let corpus = docs(&["[MALE] x", "[MALE] y", "z"]);
        let v = lda_vocab_filter(&corpus, 100).unwrap();
        assert!(!v.contains("[MALE]"));
        assert!(lda_vocab_filter(&docs(&["a", "a"]), 10).is_err());
    }

    #[test]
    fn single_topic_gives_certain_distribution() {
        let corpus = docs(&["a b", "c d", "e f"]);
        let cfg = LdaConfig { k: 1, iters: 3, ..LdaConfig::default() };
        let m = fit_lda(&corpus, &cfg).unwrap();
        let q = infer_topics(&m, &corpus[0], &mut rng::stream(0, "t"));
        assert_eq!(q.probs, vec![1.0]);
    }

    #[test]
    fn npmi_bounds() {
        assert!((npmi(10, 3, 3, 3) - 1.0).abs() < 1e-12);
        assert!(npmi(2, 1, 1, 0) < 0.0);
    }

    #[test]
    fn persisted_model_round_trips() {
        let corpus = docs(&["a b", "c d", "e f", "a c"]);
        let m = fit_lda(&corpus, &LdaConfig { iters: 5, ..LdaConfig::default() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("lda.json");
        m.save(&p).unwrap();
        let back = TopicModel::load(&p).unwrap();
        assert_eq!(back.topic_word_counts, m.topic_word_counts);
        assert_eq!(back.vocab, m.vocab);
        assert_eq!(back.alpha, m.alpha);
    }
}
