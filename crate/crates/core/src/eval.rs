//! Evaluation: importance-weighted perplexity, active units, repetition,
//! BLEU-based quality and diversity, top-p generation and sweeps, topic
//! probes and discourse separation.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt::Write as _;

use log::info;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use storyvae_numerics::{log_sum_exp, Adam, Graph, Tensor};

use crate::corpus::{decode_ids, EncodedStory, Story, Vocab, BOS, EOS, PAD};
use crate::error::{invalid, Error, Result};
use crate::model::{standard_normal, PosteriorParams, VaeModel};
use crate::rng::{self, Rng};
use crate::training::recon_loss;

pub const BLEU_EPS: f64 = 1e-9;
pub const BLEU_ORDER: usize = 4;
pub const DEFAULT_SELF_BLEU_CAP: usize = 200;
pub const AU_THRESHOLD: f64 = 0.01;

/// `log((1/k) sum exp(w_i))`, shifted by the max so that k equal weights
/// return that weight exactly.
pub fn log_mean_exp(log_weights: &[f64]) -> f64 {
    let m = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = log_weights.iter().map(|w| (w - m).exp()).sum();
    m + (s / log_weights.len() as f64).ln()
}

fn log_normal_std(z: &[f64]) -> f64 {
    -0.5 * z.iter().map(|x| x * x + (2.0 * PI).ln()).sum::<f64>()
}

fn log_normal_diag(z: &[f64], p: &PosteriorParams) -> f64 {
    -0.5 * z
        .iter()
        .zip(&p.mu)
        .zip(&p.log_var)
        .map(|((x, m), lv)| (x - m).powi(2) / lv.exp() + lv + (2.0 * PI).ln())
        .sum::<f64>()
}

fn content_seed(seed: u64, story: &EncodedStory) -> u64 {
    let key: String = story.encoder_ids.iter().map(|i| format!("{i},")).collect();
    rng::derive_seed(seed, &key)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IwPplReport {
    pub ppl: f64,
    pub k: usize,
    /// Per-story `log p(x)` estimate.
    pub log_px: Vec<f64>,
    pub tokens: usize,
}

/// Importance-weighted `log p(x)` of one story with `k` posterior samples.
/// Noise is seeded from the story's content, so the estimate does not depend
/// on dataset order or batching.
pub fn iw_log_px(model: &VaeModel, story: &EncodedStory, k: usize, seed: u64, chunk: usize) -> Result<f64> {
    if k == 0 {
        return invalid("iw_ppl needs k >= 1");
    }
    let post = model.encode(story)?;
    let l = model.config().latent_dim;
    let mut r = rng::stream(content_seed(seed, story), "iw");
    let zs: Vec<Vec<f64>> = (0..k)
        .map(|_| {
            let eps = standard_normal(l, &mut r);
            post.mu
                .iter()
                .zip(&post.log_var)
                .zip(&eps)
                .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
                .collect()
        })
        .collect();
    let len = story.real_len();
    let ids = &story.decoder_input_ids[..len];
    let targets = &story.decoder_target_ids[..len];
    let mask = &story.pad_mask[..len];
    let mut log_w = Vec::with_capacity(k);
    for group in zs.chunks(chunk.max(1)) {
        let refs: Vec<&[f64]> = group.iter().map(Vec::as_slice).collect();
        let rep_ids: Vec<usize> = std::iter::repeat_n(ids, group.len()).flatten().copied().collect();
        let logits = model.decode_logits_batch(&refs, &rep_ids, len)?;
        let v = logits.last_dim();
        for (j, z) in group.iter().enumerate() {
            let row = Tensor::new(logits.data[j * len * v..(j + 1) * len * v].to_vec(), &[len, v])?;
            let log_pxz = -recon_loss(&row, targets, mask)?;
            log_w.push(log_pxz + log_normal_std(z) - log_normal_diag(z, &post));
        }
    }
    Ok(log_mean_exp(&log_w))
}

/// `exp(-sum log p(x) / sum tokens)`, tokens counting [SEP] and [EOS] but
/// not [BOS] or [PAD].
pub fn iw_ppl(model: &VaeModel, stories: &[EncodedStory], k: usize, seed: u64) -> Result<IwPplReport> {
    if k == 0 {
        return invalid("iw_ppl needs k >= 1");
    }
    if stories.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let log_px = stories
        .iter()
        .map(|s| iw_log_px(model, s, k, seed, 64))
        .collect::<Result<Vec<_>>>()?;
    let tokens: usize = stories.iter().map(EncodedStory::target_tokens).sum();
    Ok(IwPplReport {
        ppl: (-log_px.iter().sum::<f64>() / tokens as f64).exp(),
        k,
        log_px,
        tokens,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActiveUnitsReport {
    pub variances: Vec<f64>,
    pub threshold: f64,
    pub active: usize,
}

impl ActiveUnitsReport {
    pub fn csv(&self) -> String {
        let mut out = String::from("dim,A_u,active\n");
        for (d, v) in self.variances.iter().enumerate() {
            let _ = writeln!(out, "{d},{v},{}", u8::from(*v > self.threshold));
        }
        out
    }
}

/// Per-dimension sample variance (N - 1) of posterior means, by Welford's
/// streaming update.
pub fn active_units_from_means<'a, I>(means: I, threshold: f64) -> Result<ActiveUnitsReport>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut n = 0usize;
    let mut mean: Vec<f64> = Vec::new();
    let mut m2: Vec<f64> = Vec::new();
    for x in means {
        if n == 0 {
            mean = vec![0.0; x.len()];
            m2 = vec![0.0; x.len()];
        } else if x.len() != mean.len() {
            return invalid("posterior means differ in dimension");
        }
        n += 1;
        for (i, &xi) in x.iter().enumerate() {
            let delta = xi - mean[i];
            mean[i] += delta / n as f64;
            m2[i] += delta * (xi - mean[i]);
        }
    }
    if n < 2 {
        return invalid("active units need at least two stories");
    }
    let variances: Vec<f64> = m2.iter().map(|s| s / (n - 1) as f64).collect();
    let active = variances.iter().filter(|&&v| v > threshold).count();
    Ok(ActiveUnitsReport {
        variances,
        threshold,
        active,
    })
}

pub fn posterior_means(model: &VaeModel, stories: &[EncodedStory]) -> Result<Vec<PosteriorParams>> {
    let mut out = Vec::with_capacity(stories.len());
    for chunk in stories.chunks(32) {
        let refs: Vec<&EncodedStory> = chunk.iter().collect();
        out.extend(model.encode_batch(&refs)?);
    }
    Ok(out)
}

pub fn active_units(model: &VaeModel, stories: &[EncodedStory], threshold: f64) -> Result<ActiveUnitsReport> {
    let post = posterior_means(model, stories)?;
    active_units_from_means(post.iter().map(|p| p.mu.as_slice()), threshold)
}

/// Fraction of n-grams that repeat an earlier one: `1 - unique / total`.
pub fn seq_rep_n<T: Eq + std::hash::Hash>(tokens: &[T], n: usize) -> Result<f64> {
    if n == 0 || tokens.len() < n {
        return invalid("sequence shorter than n");
    }
    let grams: Vec<&[T]> = tokens.windows(n).collect();
    let unique: std::collections::HashSet<&[T]> = grams.iter().copied().collect();
    Ok((grams.len() - unique.len()) as f64 / grams.len() as f64)
}

type Counts<'a> = HashMap<&'a [String], usize>;

fn ngram_counts(tokens: &[String], n: usize) -> Counts<'_> {
    let mut c = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *c.entry(g).or_insert(0) += 1;
        }
    }
    c
}

fn closest_ref_len(hyp_len: usize, lens: impl Iterator<Item = usize>) -> usize {
    lens.min_by_key(|&r| (r.abs_diff(hyp_len), r)).unwrap_or(0)
}

/// BLEU from clipped counts per order, total counts per order, hypothesis and
/// reference lengths. Zero clipped counts are replaced by `BLEU_EPS`.
fn bleu_from_counts(clipped: &[usize; BLEU_ORDER], totals: &[usize; BLEU_ORDER], hyp_len: usize, ref_len: usize) -> f64 {
    if hyp_len == 0 {
        return 0.0;
    }
    let log_p: f64 = (0..BLEU_ORDER)
        .map(|i| {
            let num = if clipped[i] > 0 { clipped[i] as f64 } else { BLEU_EPS };
            (num / totals[i].max(1) as f64).ln()
        })
        .sum::<f64>()
        / BLEU_ORDER as f64;
    let bp = if hyp_len > ref_len { 1.0 } else { (1.0 - ref_len as f64 / hyp_len as f64).exp() };
    bp * log_p.exp()
}

/// Precomputed reference statistics: per n-gram the largest count in any
/// single reference, and the reference lengths.
pub struct ReferenceSet<'a> {
    max_counts: Vec<Counts<'a>>,
    lens: Vec<usize>,
}

impl<'a> ReferenceSet<'a> {
    pub fn new(refs: &'a [Vec<String>]) -> Self {
        let mut max_counts: Vec<Counts<'a>> = vec![HashMap::new(); BLEU_ORDER];
        for r in refs {
            for (n, slot) in max_counts.iter_mut().enumerate() {
                for (g, c) in ngram_counts(r, n + 1) {
                    let e = slot.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
        }
        ReferenceSet {
            max_counts,
            lens: refs.iter().map(Vec::len).collect(),
        }
    }

    pub fn bleu(&self, hyp: &[String]) -> f64 {
        let mut clipped = [0; BLEU_ORDER];
        let mut totals = [0; BLEU_ORDER];
        for n in 0..BLEU_ORDER {
            for (g, c) in ngram_counts(hyp, n + 1) {
                totals[n] += c;
                clipped[n] += c.min(self.max_counts[n].get(g).copied().unwrap_or(0));
            }
        }
        let r = closest_ref_len(hyp.len(), self.lens.iter().copied());
        bleu_from_counts(&clipped, &totals, hyp.len(), r)
    }
}

/// Sentence BLEU-4 against several references, uniform weights, brevity
/// penalty against the closest reference length (shorter on ties).
pub fn bleu(hyp: &[String], refs: &[Vec<String>]) -> f64 {
    ReferenceSet::new(refs).bleu(hyp)
}

/// Mean over hypotheses of BLEU against the whole reference set.
pub fn corpus_bleu(hyps: &[Vec<String>], refs: &[Vec<String>]) -> Result<f64> {
    if hyps.is_empty() || refs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let set = ReferenceSet::new(refs);
    Ok(hyps.iter().map(|h| set.bleu(h)).sum::<f64>() / hyps.len() as f64)
}

/// Mean over the first `cap` hypotheses of BLEU against all the others in
/// that subset.
pub fn self_bleu(hyps: &[Vec<String>], cap: usize) -> Result<f64> {
    let hyps = &hyps[..hyps.len().min(cap)];
    if hyps.len() < 2 {
        return invalid("self-BLEU needs at least two hypotheses");
    }
    // per n-gram: the two largest per-story counts with the owner of the first
    let mut top: Vec<HashMap<&[String], (usize, usize, usize)>> = vec![HashMap::new(); BLEU_ORDER];
    let counts: Vec<Vec<Counts<'_>>> = hyps
        .iter()
        .map(|h| (1..=BLEU_ORDER).map(|n| ngram_counts(h, n)).collect())
        .collect();
    for (i, per_order) in counts.iter().enumerate() {
        for (n, c) in per_order.iter().enumerate() {
            for (&g, &k) in c {
                let e = top[n].entry(g).or_insert((0, usize::MAX, 0));
                if k > e.0 {
                    *e = (k, i, e.0);
                } else if k > e.2 {
                    e.2 = k;
                }
            }
        }
    }
    let mut total = 0.0;
    for (i, h) in hyps.iter().enumerate() {
        let mut clipped = [0; BLEU_ORDER];
        let mut totals = [0; BLEU_ORDER];
        for n in 0..BLEU_ORDER {
            for (&g, &k) in &counts[i][n] {
                totals[n] += k;
                let (first, owner, second) = top[n][g];
                let others = if owner == i { second } else { first };
                clipped[n] += k.min(others);
            }
        }
        let r = closest_ref_len(
            h.len(),
            hyps.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, o)| o.len()),
        );
        total += bleu_from_counts(&clipped, &totals, h.len(), r);
    }
    Ok(total / hyps.len() as f64)
}

/// Smallest set of most probable tokens (ties by lower id) with mass >= `p`,
/// renormalized.
pub fn nucleus(probs: &[f64], p: f64) -> Result<Vec<(usize, f64)>> {
    if !(p > 0.0 && p <= 1.0) {
        return invalid(format!("top-p needs p in (0, 1], got {p}"));
    }
    if probs.is_empty() {
        return invalid("empty distribution");
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut kept = Vec::new();
    let mut mass = 0.0;
    for &i in &order {
        kept.push(i);
        mass += probs[i];
        if mass >= p {
            break;
        }
    }
    if p >= 1.0 {
        kept = order;
        mass = probs.iter().sum();
    }
    Ok(kept.into_iter().map(|i| (i, probs[i] / mass)).collect())
}

pub fn top_p_sample(probs: &[f64], p: f64, r: &mut Rng) -> Result<usize> {
    let kept = nucleus(probs, p)?;
    let u: f64 = r.random();
    let mut acc = 0.0;
    for &(i, q) in &kept {
        acc += q;
        if u < acc {
            return Ok(i);
        }
    }
    Ok(kept.last().map(|&(i, _)| i).unwrap_or(0))
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(row);
    row.iter().map(|x| (x - lse).exp()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generated {
    /// Sampled tokens after [BOS], including [EOS] when reached.
    pub ids: Vec<usize>,
    pub ended: bool,
    pub story: Story,
}

/// Top-p decoding from [BOS] for each latent; sample `i` draws from
/// `rngs[i]`. Stops at [EOS] or after `max_tokens` tokens.
pub fn generate_batch(
    model: &VaeModel,
    vocab: &Vocab,
    zs: &[Vec<f64>],
    p: f64,
    max_tokens: usize,
    rngs: &mut [Rng],
) -> Result<Vec<Generated>> {
    if zs.len() != rngs.len() {
        return invalid("one rng per latent required");
    }
    let limit = max_tokens.min(model.config().max_len);
    let mut seqs: Vec<Vec<usize>> = vec![vec![BOS]; zs.len()];
    let mut done = vec![false; zs.len()];
    for _ in 0..limit {
        let active: Vec<usize> = (0..zs.len()).filter(|&i| !done[i]).collect();
        if active.is_empty() {
            break;
        }
        let t = seqs[active[0]].len();
        let refs: Vec<&[f64]> = active.iter().map(|&i| zs[i].as_slice()).collect();
        let ids: Vec<usize> = active.iter().flat_map(|&i| seqs[i].iter().copied()).collect();
        let logits = model.decode_logits_batch(&refs, &ids, t)?;
        let v = logits.last_dim();
        for (row, &i) in active.iter().enumerate() {
            let last = &logits.data[(row * t + t - 1) * v..(row * t + t) * v];
            let mut probs = softmax(last);
            probs[PAD] = 0.0;
            probs[BOS] = 0.0;
            let tok = top_p_sample(&probs, p, &mut rngs[i])?;
            seqs[i].push(tok);
            if tok == EOS {
                done[i] = true;
            }
        }
    }
    Ok(seqs
        .into_iter()
        .zip(done)
        .map(|(s, ended)| {
            let ids = s[1..].to_vec();
            let story = decode_ids(&ids, vocab);
            Generated { ids, ended, story }
        })
        .collect())
}

pub fn generate(model: &VaeModel, vocab: &Vocab, z: &[f64], p: f64, max_tokens: usize, r: &mut Rng) -> Result<Generated> {
    let mut rs = [r.clone()];
    let out = generate_batch(model, vocab, &[z.to_vec()], p, max_tokens, &mut rs)?;
    *r = rs[0].clone();
    Ok(out.into_iter().next().expect("one latent in, one story out"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub p_start: f64,
    pub p_end: f64,
    pub step: f64,
    pub n: usize,
    pub seed: u64,
    pub max_tokens: usize,
    pub self_bleu_cap: usize,
    /// Worker threads over p cells.
    pub jobs: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            p_start: 0.4,
            p_end: 1.0,
            step: 0.02,
            n: 500,
            seed: 0,
            max_tokens: 100,
            self_bleu_cap: DEFAULT_SELF_BLEU_CAP,
            jobs: 1,
        }
    }
}

impl SweepConfig {
    pub fn grid(&self) -> Result<Vec<f64>> {
        if !(self.step > 0.0) || self.p_start > self.p_end || !(self.p_start > 0.0) || self.p_end > 1.0 {
            return invalid("sweep grid needs 0 < p_start <= p_end <= 1 and step > 0");
        }
        let count = ((self.p_end - self.p_start) / self.step + 1e-9).floor() as usize + 1;
        Ok((0..count).map(|i| (self.p_start + i as f64 * self.step).min(self.p_end)).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub p: f64,
    pub corpus_bleu: f64,
    pub self_bleu: f64,
    pub seq_rep_4: f64,
    pub n_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub self_bleu_cap: usize,
    pub seed: u64,
}

impl SweepReport {
    pub const CSV_HEADER: &'static str = "p,corpus_bleu,neg_corpus_bleu,self_bleu,seq_rep_4,n,config_hash,seed";

    pub fn csv(&self, config_hash: &str) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:.2},{},{},{},{},{},{config_hash},{}",
                r.p, r.corpus_bleu, -r.corpus_bleu, r.self_bleu, r.seq_rep_4, r.n_samples, self.seed
            );
        }
        out
    }
}

/// Mean seq-rep-n over stories long enough to have an n-gram.
pub fn mean_seq_rep(stories: &[Vec<String>], n: usize) -> f64 {
    let vals: Vec<f64> = stories.iter().filter_map(|s| seq_rep_n(s, n).ok()).collect();
    if vals.is_empty() {
        0.0
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

/// Generates `n` stories per p from one fixed set of prior latents and scores
/// them against `references`.
pub fn qd_sweep(model: &VaeModel, vocab: &Vocab, references: &[Story], cfg: &SweepConfig) -> Result<SweepReport> {
    if cfg.n < 2 {
        return invalid("sweep needs n >= 2");
    }
    if references.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let grid = cfg.grid()?;
    let mut zr = rng::stream(cfg.seed, "sweep-z");
    let zs: Vec<Vec<f64>> = (0..cfg.n).map(|_| model.sample_prior(&mut zr).z).collect();
    let refs: Vec<Vec<String>> = references.iter().map(Story::flat_words).collect();
    let ref_set = ReferenceSet::new(&refs);
    let cell = |index: usize, p: f64| -> Result<SweepRow> {
        let cell_seed = rng::derive_indexed(cfg.seed, "sweep-cell", index as u64);
        let mut rngs: Vec<Rng> = (0..cfg.n).map(|i| rng::indexed_stream(cell_seed, "sample", i as u64)).collect();
        let generated = generate_batch(model, vocab, &zs, p, cfg.max_tokens, &mut rngs)?;
        let hyps: Vec<Vec<String>> = generated.iter().map(|g| g.story.flat_words()).collect();
        let row = SweepRow {
            p,
            corpus_bleu: hyps.iter().map(|h| ref_set.bleu(h)).sum::<f64>() / hyps.len() as f64,
            self_bleu: self_bleu(&hyps, cfg.self_bleu_cap)?,
            seq_rep_4: mean_seq_rep(&hyps, 4),
            n_samples: cfg.n,
        };
        info!("p={p:.2}: corpus-bleu {:.4} self-bleu {:.4} seq-rep-4 {:.4}", row.corpus_bleu, row.self_bleu, row.seq_rep_4);
        Ok(row)
    };
    let jobs = cfg.jobs.clamp(1, grid.len());
    let mut slots: Vec<Option<Result<SweepRow>>> = (0..grid.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let cell = &cell;
        let grid = &grid;
        let handles: Vec<_> = (0..jobs)
            .map(|w| {
                scope.spawn(move || {
                    (w..grid.len())
                        .step_by(jobs)
                        .map(|i| (i, cell(i, grid[i])))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("sweep worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    let rows = slots
        .into_iter()
        .map(|r| r.expect("every cell is assigned to a worker"))
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepReport {
        rows,
        self_bleu_cap: cfg.self_bleu_cap,
        seed: cfg.seed,
    })
}

fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return invalid("spearman needs two equal-length series of length >= 2");
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (vx * vy).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeInput {
    Mu,
    Z,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub train_fraction: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            hidden: 64,
            epochs: 100,
            lr: 1e-3,
            batch_size: 32,
            train_fraction: 0.8,
        }
    }
}

/// Held-out accuracy of a one-hidden-layer classifier trained on fixed
/// features. The split and all training noise come from `seed`.
pub fn probe_accuracy(features: &[Vec<f64>], labels: &[usize], cfg: &ProbeConfig, seed: u64) -> Result<f64> {
    if features.len() != labels.len() || features.len() < 2 {
        return invalid("probe needs matching features and labels");
    }
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let distinct: std::collections::HashSet<usize> = labels.iter().copied().collect();
    if distinct.len() < 2 {
        return invalid("probe needs at least two classes");
    }
    let dim = features[0].len();
    let mut r = rng::stream(seed, "probe");
    let mut order: Vec<usize> = (0..features.len()).collect();
    order.shuffle(&mut r);
    let n_train = ((features.len() as f64 * cfg.train_fraction).round() as usize).clamp(1, features.len() - 1);
    let (train, test) = order.split_at(n_train);
    let mut params = vec![
        Tensor::randn(&[dim, cfg.hidden], (1.0 / dim as f64).sqrt(), &mut r),
        Tensor::zeros(&[cfg.hidden]),
        Tensor::randn(&[cfg.hidden, n_classes], (1.0 / cfg.hidden as f64).sqrt(), &mut r),
        Tensor::zeros(&[n_classes]),
    ];
    let forward = |g: &mut Graph, params: &[Tensor], idx: &[usize], trainable: bool| -> Result<_> {
        let x = Tensor::new(idx.iter().flat_map(|&i| features[i].iter().copied()).collect(), &[idx.len(), dim])?;
        let x = g.constant(x);
        let vars: Vec<_> = params
            .iter()
            .map(|t| if trainable { g.param(t) } else { g.constant(t.clone()) })
            .collect();
        let h = g.matmul(x, vars[0])?;
        let h = g.add(h, vars[1])?;
        let h = g.relu(h)?;
        let o = g.matmul(h, vars[2])?;
        let o = g.add(o, vars[3])?;
        Ok((o, vars))
    };
    let mut opt = Adam::new(cfg.lr);
    let mut shuffled = train.to_vec();
    for _ in 0..cfg.epochs {
        shuffled.shuffle(&mut r);
        for batch in shuffled.chunks(cfg.batch_size.max(1)) {
            let mut g = Graph::new();
            let (logits, vars) = forward(&mut g, &params, batch, true)?;
            let lp = g.log_softmax(logits)?;
            let targets: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let picked = g.gather_last(lp, &targets)?;
            let mean = g.mean(picked)?;
            let loss = g.neg(mean)?;
            g.backward(loss)?;
            let grads: Vec<Option<Vec<f64>>> = vars.iter().map(|&v| g.grad(v).map(<[f64]>::to_vec)).collect();
            opt.step(&mut params, &grads);
        }
    }
    let mut g = Graph::new();
    let (logits, _) = forward(&mut g, &params, test, false)?;
    let out = g.value(logits);
    let correct = out
        .data
        .chunks(n_classes)
        .zip(test)
        .filter(|(row, &i)| crate::topics::argmax(row) == labels[i])
        .count();
    Ok(correct as f64 / test.len() as f64)
}

/// Frozen-encoder features for the probe: `mu`, or one posterior sample per
/// story drawn with `seed`.
pub fn probe_features(model: &VaeModel, stories: &[EncodedStory], input: ProbeInput, seed: u64) -> Result<Vec<Vec<f64>>> {
    let post = posterior_means(model, stories)?;
    let mut r = rng::stream(seed, "probe-z");
    Ok(post
        .into_iter()
        .map(|p| match input {
            ProbeInput::Mu => p.mu,
            ProbeInput::Z => {
                let eps = standard_normal(p.mu.len(), &mut r);
                p.mu.iter()
                    .zip(&p.log_var)
                    .zip(&eps)
                    .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
                    .collect()
            }
        })
        .collect())
}

pub fn probe_topic_accuracy(
    model: &VaeModel,
    stories: &[EncodedStory],
    labels: &[usize],
    input: ProbeInput,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<f64> {
    let features = probe_features(model, stories, input, seed)?;
    probe_accuracy(&features, labels, cfg, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscourseSeparation {
    pub mean_original: f64,
    pub mean_negative: f64,
}

impl DiscourseSeparation {
    pub fn gap(&self) -> f64 {
        self.mean_original - self.mean_negative
    }
}

/// Mean discourse score at `z = mu` for each class.
pub fn discourse_separation(model: &VaeModel, labeled: &[(EncodedStory, f64)]) -> Result<DiscourseSeparation> {
    let mut sums = [0.0f64; 2];
    let mut counts = [0usize; 2];
    for chunk in labeled.chunks(32) {
        let refs: Vec<&EncodedStory> = chunk.iter().map(|(s, _)| s).collect();
        let post = model.encode_batch(&refs)?;
        let zs: Vec<&[f64]> = post.iter().map(|p| p.mu.as_slice()).collect();
        let scores = model.discourse_scores(&zs)?;
        for ((_, label), s) in chunk.iter().zip(scores) {
            let c = usize::from(*label >= 0.5);
            sums[c] += s;
            counts[c] += 1;
        }
    }
    if counts.contains(&0) {
        return invalid("discourse separation needs both original and negative stories");
    }
    Ok(DiscourseSeparation {
        mean_original: sums[1] / counts[1] as f64,
        mean_negative: sums[0] / counts[0] as f64,
    })
}

/// Reconstruction check: greedy decoding from `mu` for each story.
pub fn greedy_reconstructions(model: &VaeModel, vocab: &Vocab, stories: &[EncodedStory], max_tokens: usize) -> Result<Vec<Generated>> {
    let post = posterior_means(model, stories)?;
    let zs: Vec<Vec<f64>> = post.into_iter().map(|p| p.mu).collect();
    let mut rngs: Vec<Rng> = (0..zs.len()).map(|i| rng::indexed_stream(0, "greedy", i as u64)).collect();
    generate_batch(model, vocab, &zs, 1e-9, max_tokens, &mut rngs)
}
