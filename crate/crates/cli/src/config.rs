//! Run configuration: TOML file, `STORYVAE_*` environment overrides and
//! command-line flags, merged in that order over built-in defaults.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use storyvae_core::corpus::{SynthConfig, RESERVED};
use storyvae_core::eval::{ProbeConfig, SweepConfig, AU_THRESHOLD, DEFAULT_SELF_BLEU_CAP};
use storyvae_core::model::{Injection, ModelConfig};
use storyvae_core::negatives::{NegationCues, NegativeConfig, RuleKind};
use storyvae_core::topics::{LdaConfig, DEFAULT_BETA, DEFAULT_MAX_VOCAB};
use storyvae_core::training::{LossWeights, TrainConfig};
use storyvae_numerics::GRAD_TOLERANCE;
use toml::{Table, Value};

use crate::Failure;

pub const ENV_PREFIX: &str = "STORYVAE_";

const SECTIONS: [&str; 10] = ["grad_check", "negatives", "paths", "synth", "data", "lda", "model", "train", "eval", "probe"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads for the sweep.
    pub jobs: usize,
    pub out: PathBuf,
    pub paths: Paths,
    pub synth: SynthSection,
    pub data: DataSection,
    pub lda: LdaSection,
    pub negatives: NegativesSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub probe: ProbeSection,
    pub grad_check: GradCheckSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            jobs: 1,
            out: PathBuf::from("run"),
            paths: Paths::default(),
            synth: SynthSection::default(),
            data: DataSection::default(),
            lda: LdaSection::default(),
            negatives: NegativesSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
            probe: ProbeSection::default(),
            grad_check: GradCheckSection::default(),
        }
    }
}

/// Inputs and outputs. Unset entries live in the output directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub topics: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// JSON negation cue list; built-in cues when unset.
    pub cues: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub n_docs: usize,
    pub n_topics: usize,
    pub vocab_per_topic: usize,
    pub sents_per_doc: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub topic_word_prob: f64,
    /// Share of the stories written to the test split.
    pub test_fraction: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        let s = SynthConfig::default();
        SynthSection {
            n_docs: s.n_docs,
            n_topics: s.n_topics,
            vocab_per_topic: s.vocab_per_topic,
            sents_per_doc: s.sents_per_doc,
            min_words: s.min_words,
            max_words: s.max_words,
            topic_word_prob: s.topic_word_prob,
            test_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Token cap per story, [SEP]/[EOS] included.
    pub max_len: usize,
    /// Vocabulary size, reserved tokens included.
    pub vocab_size: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            max_len: 100,
            vocab_size: 5000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LdaSection {
    pub k: usize,
    /// When non-empty, K is chosen from these by NPMI coherence.
    pub candidates: Vec<usize>,
    pub iters: usize,
    pub alpha: Option<f64>,
    pub beta: f64,
    pub max_vocab: usize,
    /// Top words per topic for coherence.
    pub top_n: usize,
}

impl Default for LdaSection {
    fn default() -> Self {
        LdaSection {
            k: 2,
            candidates: Vec::new(),
            iters: 200,
            alpha: None,
            beta: DEFAULT_BETA,
            max_vocab: DEFAULT_MAX_VOCAB,
            top_n: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NegativesSection {
    pub min_rules: usize,
    pub max_rules: usize,
    pub rules: Vec<RuleKind>,
    pub max_attempts: usize,
}

impl Default for NegativesSection {
    fn default() -> Self {
        let n = NegativeConfig::default();
        NegativesSection {
            min_rules: n.min_rules,
            max_rules: n.max_rules,
            rules: n.rules,
            max_attempts: n.max_attempts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub latent_dim: usize,
    pub injection: Injection,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection {
            d_model: m.d_model,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            ff_dim: m.ff_dim,
            latent_dim: m.latent_dim,
            injection: m.injection,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub c_target: f64,
    pub clip_norm: Option<f64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            epochs: t.epochs,
            lr: t.lr,
            batch_size: t.batch_size,
            alpha: t.weights.alpha,
            beta: t.weights.beta,
            gamma: t.weights.gamma,
            c_target: t.weights.c,
            clip_norm: t.clip_norm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Importance samples per story.
    pub k: usize,
    pub au_threshold: f64,
    /// Prior samples for `generate`, `eval` and each sweep cell.
    pub n_samples: usize,
    /// Nucleus mass for `generate` and `eval`.
    pub p: f64,
    pub p_start: f64,
    pub p_end: f64,
    pub step: f64,
    pub max_tokens: usize,
    pub self_bleu_cap: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        let s = SweepConfig::default();
        EvalSection {
            k: 500,
            au_threshold: AU_THRESHOLD,
            n_samples: s.n,
            p: 0.9,
            p_start: s.p_start,
            p_end: s.p_end,
            step: s.step,
            max_tokens: s.max_tokens,
            self_bleu_cap: DEFAULT_SELF_BLEU_CAP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub train_fraction: f64,
}

impl Default for ProbeSection {
    fn default() -> Self {
        let p = ProbeConfig::default();
        ProbeSection {
            hidden: p.hidden,
            epochs: p.epochs,
            lr: p.lr,
            batch_size: p.batch_size,
            train_fraction: p.train_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckSection {
    pub seeds: u64,
    pub eps: f64,
    /// Probed entries per parameter tensor of the composed objective.
    pub per_tensor: usize,
    /// Largest accepted relative error.
    pub tolerance: f64,
}

impl Default for GradCheckSection {
    fn default() -> Self {
        GradCheckSection {
            seeds: 20,
            eps: 1e-5,
            per_tensor: 2,
            tolerance: GRAD_TOLERANCE,
        }
    }
}

fn config_error(field: &str, message: impl Into<String>) -> Failure {
    Failure::Config {
        field: field.to_string(),
        message: message.into(),
    }
}

fn require(ok: bool, field: &str, message: &str) -> Result<(), Failure> {
    if ok {
        Ok(())
    } else {
        Err(config_error(field, message))
    }
}

fn fraction(x: f64) -> bool {
    x > 0.0 && x < 1.0
}

impl RunConfig {
    /// Defaults, then `file`, then `env` (`STORYVAE_SECTION_KEY` or
    /// `STORYVAE_KEY` for top-level keys), then `flags` as dotted keys.
    pub fn resolve(
        file: Option<&Path>,
        env: impl IntoIterator<Item = (String, String)>,
        flags: &[(&str, Value)],
    ) -> Result<RunConfig, Failure> {
        let mut table = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| config_error("--config", format!("{}: {e}", path.display())))?;
                text.parse::<Table>()
                    .map_err(|e| config_error("--config", format!("{}: {e}", path.display())))?
            }
            None => Table::new(),
        };
        let mut env: Vec<(String, String)> = env.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
        env.sort();
        for (key, raw) in env {
            let dotted = env_key(&key[ENV_PREFIX.len()..]);
            set_dotted(&mut table, &dotted, parse_env_value(&raw)).map_err(|m| config_error(&key, m))?;
        }
        for (dotted, value) in flags {
            set_dotted(&mut table, dotted, value.clone()).map_err(|m| config_error(dotted, m))?;
        }
        let cfg: RunConfig = serde_path_to_error::deserialize(Value::Table(table)).map_err(|e| {
            let field = e.path().to_string();
            config_error(&field, e.into_inner().message())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), Failure> {
        require(self.jobs >= 1, "jobs", "must be at least 1")?;

        let s = &self.synth;
        require(s.n_docs >= 2, "synth.n_docs", "must be at least 2")?;
        require(s.n_topics >= 1, "synth.n_topics", "must be at least 1")?;
        require(s.vocab_per_topic >= 1, "synth.vocab_per_topic", "must be at least 1")?;
        require(s.sents_per_doc >= 1, "synth.sents_per_doc", "must be at least 1")?;
        require(s.min_words >= 1, "synth.min_words", "must be at least 1")?;
        require(s.max_words >= s.min_words, "synth.max_words", "must be at least synth.min_words")?;
        require((0.0..=1.0).contains(&s.topic_word_prob), "synth.topic_word_prob", "must lie in [0, 1]")?;
        require(fraction(s.test_fraction), "synth.test_fraction", "must lie in (0, 1)")?;

        require(self.data.max_len >= 4, "data.max_len", "must be at least 4")?;
        require(self.data.vocab_size > RESERVED.len(), "data.vocab_size", "must exceed the reserved tokens")?;

        let l = &self.lda;
        require(l.k >= 1, "lda.k", "must be at least 1")?;
        require(l.candidates.iter().all(|&k| k >= 1), "lda.candidates", "every K must be at least 1")?;
        require(l.iters >= 1, "lda.iters", "must be at least 1")?;
        require(l.alpha.is_none_or(|a| a > 0.0), "lda.alpha", "must be positive")?;
        require(l.beta > 0.0, "lda.beta", "must be positive")?;
        require(l.max_vocab >= 1, "lda.max_vocab", "must be at least 1")?;
        require(l.top_n >= 2, "lda.top_n", "must be at least 2")?;

        let n = &self.negatives;
        require(n.min_rules >= 1, "negatives.min_rules", "must be at least 1")?;
        require(n.max_rules >= n.min_rules, "negatives.max_rules", "must be at least negatives.min_rules")?;
        require(!n.rules.is_empty(), "negatives.rules", "must name at least one rule")?;
        require(n.max_attempts >= 1, "negatives.max_attempts", "must be at least 1")?;

        self.model_config(self.data.vocab_size, self.lda.k)
            .validate()
            .map_err(|e| config_error(dotted_field(&e.to_string()).unwrap_or("model"), e.to_string()))?;

        let t = &self.train;
        require(t.epochs >= 1, "train.epochs", "must be at least 1")?;
        require(t.lr > 0.0 && t.lr.is_finite(), "train.lr", "must be positive")?;
        require(t.batch_size >= 1, "train.batch_size", "must be at least 1")?;
        for (name, w) in [("alpha", t.alpha), ("beta", t.beta), ("gamma", t.gamma), ("c_target", t.c_target)] {
            require(w >= 0.0 && w.is_finite(), &format!("train.{name}"), "must be finite and non-negative")?;
        }
        require(t.clip_norm.is_none_or(|c| c > 0.0), "train.clip_norm", "must be positive")?;

        let e = &self.eval;
        require(e.k >= 1, "eval.k", "must be at least 1")?;
        require(e.au_threshold >= 0.0, "eval.au_threshold", "must be non-negative")?;
        require(e.n_samples >= 2, "eval.n_samples", "must be at least 2")?;
        require(e.p > 0.0 && e.p <= 1.0, "eval.p", "must lie in (0, 1]")?;
        require(e.max_tokens >= 1, "eval.max_tokens", "must be at least 1")?;
        require(e.self_bleu_cap >= 2, "eval.self_bleu_cap", "must be at least 2")?;
        self.sweep_config().grid().map_err(|err| config_error("eval.p_start", err.to_string()))?;

        let p = &self.probe;
        require(p.hidden >= 1, "probe.hidden", "must be at least 1")?;
        require(p.epochs >= 1, "probe.epochs", "must be at least 1")?;
        require(p.lr > 0.0, "probe.lr", "must be positive")?;
        require(p.batch_size >= 1, "probe.batch_size", "must be at least 1")?;
        require(fraction(p.train_fraction), "probe.train_fraction", "must lie in (0, 1)")?;

        let g = &self.grad_check;
        require(g.seeds >= 1, "grad_check.seeds", "must be at least 1")?;
        require((1e-6..=1e-3).contains(&g.eps), "grad_check.eps", "must lie in [1e-6, 1e-3]")?;
        require(g.tolerance > 0.0, "grad_check.tolerance", "must be positive")?;
        require(g.per_tensor >= 1, "grad_check.per_tensor", "must be at least 1")?;
        Ok(())
    }

    /// SHA-256 over the canonical JSON of everything that can change an
    /// artifact. `jobs` and `out` are left out.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        let obj = v.as_object_mut().expect("config is an object");
        obj.remove("jobs");
        obj.remove("out");
        let digest = Sha256::digest(v.to_string().as_bytes());
        let mut hex = String::with_capacity(16);
        for b in &digest[..8] {
            let _ = write!(hex, "{b:02x}");
        }
        hex
    }

    pub fn synth_config(&self, seed: u64) -> SynthConfig {
        let s = &self.synth;
        SynthConfig {
            seed,
            n_docs: s.n_docs,
            n_topics: s.n_topics,
            vocab_per_topic: s.vocab_per_topic,
            sents_per_doc: s.sents_per_doc,
            min_words: s.min_words,
            max_words: s.max_words,
            topic_word_prob: s.topic_word_prob,
        }
    }

    pub fn lda_config(&self, k: usize, seed: u64) -> LdaConfig {
        let l = &self.lda;
        LdaConfig {
            k,
            iters: l.iters,
            seed,
            alpha: l.alpha,
            beta: l.beta,
            max_vocab: l.max_vocab,
        }
    }

    pub fn negative_config(&self, cues: NegationCues) -> NegativeConfig {
        let n = &self.negatives;
        NegativeConfig {
            min_rules: n.min_rules,
            max_rules: n.max_rules,
            rules: n.rules.clone(),
            cues,
            max_attempts: n.max_attempts,
            ..NegativeConfig::default()
        }
    }

    pub fn model_config(&self, vocab_size: usize, n_topics: usize) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            vocab_size,
            d_model: m.d_model,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            ff_dim: m.ff_dim,
            latent_dim: m.latent_dim,
            injection: m.injection,
            max_len: self.data.max_len,
            n_topics,
        }
    }

    pub fn weights(&self) -> LossWeights {
        let t = &self.train;
        LossWeights {
            alpha: t.alpha,
            beta: t.beta,
            gamma: t.gamma,
            c: t.c_target,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            lr: t.lr,
            batch_size: t.batch_size,
            seed,
            weights: self.weights(),
            clip_norm: t.clip_norm,
        }
    }

    pub fn sweep_config(&self) -> SweepConfig {
        let e = &self.eval;
        SweepConfig {
            p_start: e.p_start,
            p_end: e.p_end,
            step: e.step,
            n: e.n_samples,
            seed: self.seed,
            max_tokens: e.max_tokens,
            self_bleu_cap: e.self_bleu_cap,
            jobs: self.jobs,
        }
    }

    pub fn probe_config(&self) -> ProbeConfig {
        let p = &self.probe;
        ProbeConfig {
            hidden: p.hidden,
            epochs: p.epochs,
            lr: p.lr,
            batch_size: p.batch_size,
            train_fraction: p.train_fraction,
        }
    }
}

/// `TRAIN_BATCH_SIZE` -> `train.batch_size`, `SEED` -> `seed`.
fn env_key(rest: &str) -> String {
    let lower = rest.to_ascii_lowercase();
    for section in SECTIONS {
        if let Some(key) = lower.strip_prefix(section).and_then(|k| k.strip_prefix('_')) {
            return format!("{section}.{key}");
        }
    }
    lower
}

/// TOML literal when it parses as one, otherwise a bare string.
fn parse_env_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_dotted(table: &mut Table, dotted: &str, value: Value) -> Result<(), String> {
    match dotted.split_once('.') {
        None => {
            table.insert(dotted.to_string(), value);
            Ok(())
        }
        Some((section, key)) => {
            let entry = table.entry(section.to_string()).or_insert_with(|| Value::Table(Table::new()));
            match entry {
                Value::Table(t) => {
                    t.insert(key.to_string(), value);
                    Ok(())
                }
                _ => Err(format!("{section} is not a section")),
            }
        }
    }
}

/// First `section.field` token in a message, if any.
fn dotted_field(message: &str) -> Option<&str> {
    message
        .split(|c: char| !(c.is_ascii_alphanumeric() || c == '_' || c == '.'))
        .find(|w| w.starts_with("model.") && w.len() > "model.".len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn env_keys_map_to_sections() {
        assert_eq!(env_key("TRAIN_BATCH_SIZE"), "train.batch_size");
        assert_eq!(env_key("GRAD_CHECK_SEEDS"), "grad_check.seeds");
        assert_eq!(env_key("SEED"), "seed");
        assert_eq!(parse_env_value("3"), Value::Integer(3));
        assert_eq!(parse_env_value("memory"), Value::String("memory".into()));
    }

    #[test]
    fn flags_beat_env_beat_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "seed = 1\n[train]\nepochs = 3\nalpha = 0.5\ngamma = 0.25\n").unwrap();
        let e = env(&[("STORYVAE_TRAIN_ALPHA", "0.75"), ("STORYVAE_TRAIN_GAMMA", "2.0"), ("OTHER", "x")]);
        let cfg = RunConfig::resolve(Some(&path), e, &[("train.gamma", Value::Float(4.0))]).unwrap();
        assert_eq!(cfg.seed, 1);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.alpha, 0.75);
        assert_eq!(cfg.train.gamma, 4.0);
        assert_eq!(cfg.train.beta, 1.0);
    }

    #[test]
    fn errors_name_the_field() {
        let field = |flags: &[(&str, Value)]| match RunConfig::resolve(None, Vec::new(), flags) {
            Err(Failure::Config { field, .. }) => field,
            other => panic!("expected a config error, got {other:?}"),
        };
        assert_eq!(field(&[("train.epochs", Value::String("many".into()))]), "train.epochs");
        assert_eq!(field(&[("train.alpha", Value::Float(-1.0))]), "train.alpha");
        assert_eq!(field(&[("model.n_heads", Value::Integer(3))]), "model.d_model");
        assert_eq!(field(&[("eval.p", Value::Float(1.5))]), "eval.p");
        assert!(field(&[("train.epochz", Value::Integer(1))]).starts_with("train"));
    }

    #[test]
    fn hash_ignores_jobs_and_out() {
        let a = RunConfig::default();
        let b = RunConfig {
            jobs: 4,
            out: "elsewhere".into(),
            ..RunConfig::default()
        };
        let c = RunConfig {
            seed: 9,
            ..RunConfig::default()
        };
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 16);
    }
}
