//! Loss terms, the weighted multi-task objective with a KL target, and the
//! Adam training loop.

use std::fmt;

use log::{info, warn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use storyvae_numerics::{log_sum_exp, Adam, Graph, Tensor, Var};

use crate::corpus::{encode_story, EncodedStory, Story, Vocab};
use crate::error::{invalid, Error, Result};
use crate::model::{standard_normal, Bound, PosteriorParams, TokenBatch, VaeModel};
use crate::negatives::{build_discourse_dataset, NegativeConfig};
use crate::rng;
use crate::topics::{infer_corpus, TopicModel};

pub const Q_FLOOR: f64 = 1e-8;
pub const SCORE_CLAMP: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// KL target in nats.
    pub c: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            c: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.gamma, self.c];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return invalid(format!("loss weights must be finite and non-negative: {self:?}"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub kl: f64,
    pub topic: f64,
    pub discourse: f64,
    pub total: f64,
}

impl fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "recon {:.4} kl {:.4} topic {:.4} discourse {:.4} total {:.4}",
            self.recon, self.kl, self.topic, self.discourse, self.total
        )
    }
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str = "epoch,recon,kl,topic,discourse,total";

    pub fn csv_row(&self, epoch: usize) -> String {
        format!(
            "{epoch},{},{},{},{},{}",
            self.recon, self.kl, self.topic, self.discourse, self.total
        )
    }

    fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("recon", self.recon),
            ("kl", self.kl),
            ("topic", self.topic),
            ("discourse", self.discourse),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// Per-story summed token NLL over non-pad positions, averaged over the batch.
/// `logits` is `[B, T, V]` or `[T, V]`; targets and mask are `B * T` long.
pub fn recon_loss(logits: &Tensor, target_ids: &[usize], pad_mask: &[bool]) -> Result<f64> {
    let v = logits.last_dim();
    let rows = logits.len() / v.max(1);
    if target_ids.len() != rows || pad_mask.len() != rows {
        return invalid(format!("{rows} logit rows but {} targets / {} mask entries", target_ids.len(), pad_mask.len()));
    }
    if !pad_mask.iter().any(|&m| m) {
        return invalid("every position is padding");
    }
    let batch = if logits.ndim() == 3 { logits.shape[0] } else { 1 };
    let mut total = 0.0;
    for (r, row) in logits.data.chunks(v).enumerate() {
        if pad_mask[r] {
            total += log_sum_exp(row) - row[target_ids[r]];
        }
    }
    Ok(total / batch as f64)
}

/// Closed-form KL(q || N(0, I)) of one posterior.
pub fn kl_single(p: &PosteriorParams) -> f64 {
    0.5 * p
        .mu
        .iter()
        .zip(&p.log_var)
        .map(|(m, lv)| m * m + lv.exp() - 1.0 - lv)
        .sum::<f64>()
}

/// Batch mean of [`kl_single`].
pub fn kl_loss(params: &[PosteriorParams]) -> f64 {
    params.iter().map(kl_single).sum::<f64>() / params.len().max(1) as f64
}

/// KL(P || Q) with Q floored at [`Q_FLOOR`].
pub fn topic_loss(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return invalid(format!("topic count mismatch: P has {}, Q has {}", p.len(), q.len()));
    }
    let mut clamped = false;
    let kl = p
        .iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| {
            if qi < Q_FLOOR {
                clamped = true;
            }
            pi * (pi.ln() - qi.max(Q_FLOOR).ln())
        })
        .sum();
    if clamped {
        warn!("topic loss: Q has entries below {Q_FLOOR}; clamped");
    }
    Ok(kl)
}

/// Binary cross entropy with the score clamped into `[1e-8, 1 - 1e-8]`.
pub fn discourse_loss(score: f64, label: f64) -> f64 {
    let s = score.clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP);
    -label * s.ln() - (1.0 - label) * (1.0 - s).ln()
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub recon: f64,
    pub kl: f64,
    pub topic: f64,
    pub discourse: f64,
}

/// `recon + beta * |kl - C| + alpha * topic + gamma * discourse`.
pub fn total_loss(parts: LossParts, w: &LossWeights) -> LossBreakdown {
    LossBreakdown {
        recon: parts.recon,
        kl: parts.kl,
        topic: parts.topic,
        discourse: parts.discourse,
        total: parts.recon + w.beta * (parts.kl - w.c).abs() + w.alpha * parts.topic + w.gamma * parts.discourse,
    }
}

/// Graph form of [`recon_loss`] over `logits [B, T, V]`.
pub fn recon_graph(g: &mut Graph, logits: Var, targets: &[usize], pad_mask: &[bool]) -> Result<Var> {
    let batch = g.shape(logits)[0];
    let lp = g.log_softmax(logits)?;
    let picked = g.gather_last(lp, targets)?;
    let shape = g.shape(picked).to_vec();
    let mask = g.constant(Tensor::new(pad_mask.iter().map(|&m| f64::from(u8::from(m))).collect(), &shape)?);
    let masked = g.mul(picked, mask)?;
    let s = g.sum(masked)?;
    Ok(g.scale(s, -1.0 / batch as f64)?)
}

/// Graph form of [`kl_loss`] over `mu, log_var [B, L]`.
pub fn kl_graph(g: &mut Graph, mu: Var, log_var: Var) -> Result<Var> {
    let batch = g.shape(mu)[0];
    let mu2 = g.mul(mu, mu)?;
    let var = g.exp(log_var)?;
    let a = g.add(mu2, var)?;
    let a = g.sub(a, log_var)?;
    let a = g.add_scalar(a, -1.0)?;
    let s = g.sum(a)?;
    Ok(g.scale(s, 0.5 / batch as f64)?)
}

/// Batch mean of KL(softmax(logits) || Q) with `q [B, K]` constant.
pub fn topic_graph(g: &mut Graph, logits: Var, q: &Tensor) -> Result<Var> {
    let batch = g.shape(logits)[0];
    let p = g.softmax(logits)?;
    let logp = g.log_softmax(logits)?;
    let logq = g.constant(Tensor::new(q.data.iter().map(|x| x.max(Q_FLOOR).ln()).collect(), &q.shape)?);
    let diff = g.sub(logp, logq)?;
    let terms = g.mul(p, diff)?;
    let s = g.sum(terms)?;
    Ok(g.scale(s, 1.0 / batch as f64)?)
}

/// Mean clamped BCE of `sigmoid(logits)` against `labels`.
pub fn discourse_graph(g: &mut Graph, logits: Var, labels: &[f64]) -> Result<Var> {
    let n = labels.len();
    let logits = g.reshape(logits, &[n])?;
    let s = g.sigmoid(logits)?;
    let s = g.clamp(s, SCORE_CLAMP, 1.0 - SCORE_CLAMP)?;
    let log_s = g.log(s)?;
    let one_minus = g.scale(s, -1.0)?;
    let one_minus = g.add_scalar(one_minus, 1.0)?;
    let log_1ms = g.log(one_minus)?;
    let y = g.constant(Tensor::vector(labels.to_vec()));
    let not_y = g.constant(Tensor::vector(labels.iter().map(|l| 1.0 - l).collect()));
    let a = g.mul(log_s, y)?;
    let b = g.mul(log_1ms, not_y)?;
    let ll = g.add(a, b)?;
    let s = g.sum(ll)?;
    Ok(g.scale(s, -1.0 / n as f64)?)
}

/// Encoded stories with optional topic targets and paired negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingData {
    pub stories: Vec<EncodedStory>,
    /// Q(T) per story.
    pub topics: Option<Vec<Vec<f64>>>,
    pub discourse: Option<DiscourseData>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscourseData {
    /// One negative per story, same order.
    pub negatives: Vec<EncodedStory>,
    pub original_labels: Vec<f64>,
    pub negative_labels: Vec<f64>,
}

impl TrainingData {
    pub fn new(stories: Vec<EncodedStory>) -> Result<Self> {
        if stories.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(TrainingData {
            stories,
            topics: None,
            discourse: None,
        })
    }

    /// Encodes `corpus`, infers Q(T) with `topic_model`, and pairs each story
    /// with one negative when `negatives` is given.
    pub fn build(
        corpus: &[Story],
        vocab: &Vocab,
        max_len: usize,
        topic_model: Option<&TopicModel>,
        negatives: Option<&NegativeConfig>,
        seed: u64,
    ) -> Result<Self> {
        let encode = |s: &Story| encode_story(s, vocab, max_len);
        let mut data = TrainingData::new(corpus.iter().map(encode).collect::<Result<_>>()?)?;
        if let Some(tm) = topic_model {
            data.topics = Some(infer_corpus(tm, corpus, rng::derive_seed(seed, "topics")).into_iter().map(|q| q.probs).collect());
        }
        if let Some(cfg) = negatives {
            let labeled = build_discourse_dataset(corpus, rng::derive_seed(seed, "negatives"), cfg)?;
            let negatives = labeled
                .iter()
                .filter(|l| !l.is_original())
                .map(|l| encode(&l.story))
                .collect::<Result<Vec<_>>>()?;
            data.discourse = Some(DiscourseData {
                original_labels: vec![1.0; negatives.len()],
                negative_labels: vec![0.0; negatives.len()],
                negatives,
            });
        }
        Ok(data)
    }

    pub fn len(&self) -> usize {
        self.stories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stories.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> TrainingData {
        TrainingData {
            stories: idx.iter().map(|&i| self.stories[i].clone()).collect(),
            topics: self.topics.as_ref().map(|t| idx.iter().map(|&i| t[i].clone()).collect()),
            discourse: self.discourse.as_ref().map(|d| DiscourseData {
                negatives: idx.iter().map(|&i| d.negatives[i].clone()).collect(),
                original_labels: idx.iter().map(|&i| d.original_labels[i]).collect(),
                negative_labels: idx.iter().map(|&i| d.negative_labels[i]).collect(),
            }),
        }
    }

    pub fn total_target_tokens(&self) -> usize {
        self.stories.iter().map(EncodedStory::target_tokens).sum()
    }
}

/// Latent noise for one batch: originals and negatives use separate streams
/// so dropping the discourse term leaves the other terms unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNoise {
    pub originals: Vec<f64>,
    pub negatives: Vec<f64>,
}

impl BatchNoise {
    pub fn sample(seed: u64, step: u64, batch: usize, latent_dim: usize) -> Self {
        BatchNoise {
            originals: standard_normal(batch * latent_dim, &mut rng::indexed_stream(seed, "noise", step)),
            negatives: standard_normal(batch * latent_dim, &mut rng::indexed_stream(seed, "noise-neg", step)),
        }
    }

    pub fn zeros(batch: usize, latent_dim: usize) -> Self {
        BatchNoise {
            originals: vec![0.0; batch * latent_dim],
            negatives: vec![0.0; batch * latent_dim],
        }
    }
}

fn term<T>(name: &'static str, epoch: usize, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Numerics(storyvae_numerics::NumericsError::NonFinite { .. }) => Error::NonFiniteLoss { term: name, epoch },
        other => other,
    })
}

fn reparam_graph(g: &mut Graph, mu: Var, log_var: Var, eps: &[f64]) -> Result<Var> {
    let shape = g.shape(mu).to_vec();
    let half = g.scale(log_var, 0.5)?;
    let std = g.exp(half)?;
    let e = g.constant(Tensor::new(eps.to_vec(), &shape)?);
    let noise = g.mul(std, e)?;
    Ok(g.add(mu, noise)?)
}

/// Builds the weighted objective for the stories `idx` on graph `g`.
/// Returns the scalar total and the term values.
pub fn objective_graph(
    model: &VaeModel,
    g: &mut Graph,
    p: &Bound,
    data: &TrainingData,
    idx: &[usize],
    w: &LossWeights,
    noise: &BatchNoise,
    epoch: usize,
) -> Result<(Var, LossBreakdown)> {
    let l = model.config().latent_dim;
    let stories: Vec<&EncodedStory> = idx.iter().map(|&i| &data.stories[i]).collect();
    let batch = TokenBatch::new(&stories)?;
    let eps = noise
        .originals
        .get(..idx.len() * l)
        .ok_or_else(|| Error::Invalid("noise shorter than the batch".into()))?;

    let (mu, log_var) = term("recon", epoch, model.encode_graph(g, p, &batch))?;
    let z = term("recon", epoch, reparam_graph(g, mu, log_var, eps))?;
    let logits = term("recon", epoch, model.decode_graph(g, p, z, &batch.decoder_input_ids, batch.batch, batch.len))?;
    let recon = term("recon", epoch, recon_graph(g, logits, &batch.decoder_target_ids, &batch.pad_mask))?;
    let kl = term("kl", epoch, kl_graph(g, mu, log_var))?;
    let kl_gap = term("kl", epoch, g.add_scalar(kl, -w.c).map_err(Error::from))?;
    let kl_abs = term("kl", epoch, g.abs(kl_gap).map_err(Error::from))?;
    let kl_term = g.scale(kl_abs, w.beta)?;
    let mut total = g.add(recon, kl_term)?;

    let mut parts = LossParts {
        recon: g.value(recon).item(),
        kl: g.value(kl).item(),
        ..LossParts::default()
    };

    if let Some(topics) = &data.topics {
        let k = model.config().n_topics;
        let q: Vec<f64> = idx.iter().flat_map(|&i| topics[i].iter().copied()).collect();
        if q.len() != idx.len() * k {
            return invalid(format!("topic targets must have {k} entries per story"));
        }
        let q = Tensor::new(q, &[idx.len(), k])?;
        let tl = term("topic", epoch, model.topic_graph(g, p, z))?;
        let topic = term("topic", epoch, topic_graph(g, tl, &q))?;
        parts.topic = g.value(topic).item();
        let weighted = g.scale(topic, w.alpha)?;
        total = g.add(total, weighted)?;
    } else if w.alpha > 0.0 {
        return invalid("alpha > 0 needs topic targets");
    }

    if w.gamma > 0.0 {
        let Some(disc) = &data.discourse else {
            return invalid("gamma > 0 needs negative samples");
        };
        let negs: Vec<&EncodedStory> = idx.iter().map(|&i| &disc.negatives[i]).collect();
        let nb = TokenBatch::new(&negs)?;
        let eps_neg = noise
            .negatives
            .get(..idx.len() * l)
            .ok_or_else(|| Error::Invalid("noise shorter than the batch".into()))?;
        let (nmu, nlv) = term("discourse", epoch, model.encode_graph(g, p, &nb))?;
        let nz = term("discourse", epoch, reparam_graph(g, nmu, nlv, eps_neg))?;
        let all_z = g.concat(&[z, nz], 0)?;
        let logits = term("discourse", epoch, model.discourse_graph(g, p, all_z))?;
        let labels: Vec<f64> = idx
            .iter()
            .map(|&i| disc.original_labels[i])
            .chain(idx.iter().map(|&i| disc.negative_labels[i]))
            .collect();
        let d = term("discourse", epoch, discourse_graph(g, logits, &labels))?;
        parts.discourse = g.value(d).item();
        let weighted = g.scale(d, w.gamma)?;
        total = g.add(total, weighted)?;
    }

    let breakdown = total_loss(parts, w);
    if let Some(name) = breakdown.first_non_finite() {
        return Err(Error::NonFiniteLoss { term: name, epoch });
    }
    Ok((total, breakdown))
}

/// Term values for one batch without gradients.
pub fn batch_loss(model: &VaeModel, data: &TrainingData, idx: &[usize], w: &LossWeights, noise: &BatchNoise) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let p = model.bind_frozen(&mut g);
    Ok(objective_graph(model, &mut g, &p, data, idx, w, noise, 0)?.1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub weights: LossWeights,
    /// Rescale the joint gradient to at most this L2 norm.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            lr: 1e-3,
            batch_size: 16,
            seed: 0,
            weights: LossWeights::default(),
            clip_norm: None,
        }
    }
}

fn weighted_mean(acc: &mut LossBreakdown, b: &LossBreakdown, weight: f64) {
    acc.recon += weight * b.recon;
    acc.kl += weight * b.kl;
    acc.topic += weight * b.topic;
    acc.discourse += weight * b.discourse;
    acc.total += weight * b.total;
}

/// Scales all gradients by `max / norm` when their joint L2 norm exceeds
/// `max`. Returns the norm before scaling.
pub fn clip_grad_norm(grads: &mut [Option<Vec<f64>>], max: f64) -> f64 {
    let norm = grads.iter().flatten().flat_map(|g| g.iter()).map(|x| x * x).sum::<f64>().sqrt();
    if norm > max {
        let s = max / norm;
        grads.iter_mut().flatten().for_each(|g| g.iter_mut().for_each(|x| *x *= s));
    }
    norm
}

pub fn train(model: &mut VaeModel, data: &TrainingData, cfg: &TrainConfig) -> Result<Vec<LossBreakdown>> {
    train_observed(model, data, cfg, |_, _| {})
}

/// Adam over shuffled mini-batches, one latent sample per story per step.
/// Returns the per-epoch batch-size-weighted mean of each term.
pub fn train_observed(
    model: &mut VaeModel,
    data: &TrainingData,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &LossBreakdown),
) -> Result<Vec<LossBreakdown>> {
    cfg.weights.validate()?;
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return invalid("batch_size and lr must be positive");
    }
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let l = model.config().latent_dim;
    let mut opt = Adam::new(cfg.lr);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut shuffle = rng::stream(cfg.seed, "shuffle");
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle);
        let mut acc = LossBreakdown::default();
        for idx in order.chunks(cfg.batch_size) {
            let noise = BatchNoise::sample(cfg.seed, step, idx.len(), l);
            let mut g = Graph::new();
            let p = model.bind(&mut g);
            let (total, parts) = objective_graph(model, &mut g, &p, data, idx, &cfg.weights, &noise, epoch)?;
            g.backward(total)?;
            let mut grads: Vec<Option<Vec<f64>>> = p.vars.iter().map(|&v| g.grad(v).map(<[f64]>::to_vec)).collect();
            if let Some(max) = cfg.clip_norm {
                clip_grad_norm(&mut grads, max);
            }
            opt.step(model.params_mut().tensors_mut(), &grads);
            if model.params().tensors().iter().any(|t| !t.is_finite()) {
                return Err(Error::NonFiniteLoss { term: "parameters", epoch });
            }
            weighted_mean(&mut acc, &parts, idx.len() as f64 / data.len() as f64);
            step += 1;
        }
        info!("epoch {epoch}: {acc}");
        on_epoch(epoch, &acc);
        history.push(acc);
    }
    Ok(history)
}

/// How the latent is chosen when scoring held-out data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentMode {
    /// `z = mu`.
    Mean,
    /// One posterior sample per story from the given seed.
    Sample(u64),
}

/// Dataset-level term values (story-weighted means).
pub fn evaluate(model: &VaeModel, data: &TrainingData, w: &LossWeights, mode: LatentMode, batch_size: usize) -> Result<LossBreakdown> {
    let l = model.config().latent_dim;
    let mut acc = LossBreakdown::default();
    let order: Vec<usize> = (0..data.len()).collect();
    for (step, idx) in order.chunks(batch_size.max(1)).enumerate() {
        let noise = match mode {
            LatentMode::Mean => BatchNoise::zeros(idx.len(), l),
            LatentMode::Sample(seed) => BatchNoise::sample(rng::derive_seed(seed, "evaluate"), step as u64, idx.len(), l),
        };
        let b = batch_loss(model, data, idx, w, &noise)?;
        weighted_mean(&mut acc, &b, idx.len() as f64 / data.len() as f64);
    }
    Ok(acc)
}

/// Reconstruction NLL per target token with `z = mu`.
pub fn recon_per_token(model: &VaeModel, data: &TrainingData) -> Result<f64> {
    let w = LossWeights {
        alpha: 0.0,
        beta: 0.0,
        gamma: 0.0,
        c: 0.0,
    };
    let plain = TrainingData {
        topics: None,
        discourse: None,
        ..data.clone()
    };
    let b = evaluate(model, &plain, &w, LatentMode::Mean, 32)?;
    Ok(b.recon * data.len() as f64 / data.total_target_tokens() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankMetric {
    /// Validation total under each point's own weights.
    Total,
    /// Validation reconstruction only.
    Recon,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub weights: LossWeights,
    pub score: f64,
    pub validation: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub best: LossWeights,
    pub rows: Vec<GridRow>,
}

/// Trains a fresh model per grid point and keeps the lowest validation
/// score; earlier points win ties.
pub fn grid_search(
    base_model: &VaeModel,
    train_data: &TrainingData,
    valid_data: &TrainingData,
    grid: &[LossWeights],
    cfg: &TrainConfig,
    metric: RankMetric,
) -> Result<GridResult> {
    if grid.is_empty() {
        return invalid("grid search needs at least one point");
    }
    let mut rows = Vec::with_capacity(grid.len());
    for w in grid {
        let mut model = base_model.clone();
        let point = TrainConfig { weights: *w, ..cfg.clone() };
        train(&mut model, train_data, &point)?;
        let validation = evaluate(&model, valid_data, w, LatentMode::Sample(cfg.seed), cfg.batch_size)?;
        let score = match metric {
            RankMetric::Total => validation.total,
            RankMetric::Recon => validation.recon,
        };
        info!("grid point {w:?}: score {score:.4}");
        rows.push(GridRow { weights: *w, score, validation });
    }
    let best = rows
        .iter()
        .fold(&rows[0], |best, r| if r.score < best.score { r } else { best })
        .weights;
    Ok(GridResult { best, rows })
}

/// Max relative gradient error of the full objective with respect to every
/// parameter tensor, probing up to `per_tensor` entries of each.
pub fn grad_check_objective(
    model: &VaeModel,
    data: &TrainingData,
    w: &LossWeights,
    noise: &BatchNoise,
    eps: f64,
    per_tensor: usize,
    seed: u64,
) -> Result<f64> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut pick = rng::stream(seed, "gradcheck");
    let mut worst = 0.0f64;
    for (ti, t) in model.params().tensors().iter().enumerate() {
        let mut entries: Vec<usize> = (0..t.len()).collect();
        entries.shuffle(&mut pick);
        entries.truncate(per_tensor);
        let f = |g: &mut Graph, x: Var| -> storyvae_numerics::Result<Var> {
            let mut p = model.bind_frozen(g);
            p.vars[ti] = x;
            objective_graph(model, g, &p, data, &idx, w, noise, 0)
                .map(|(total, _)| total)
                .map_err(|e| match e {
                    Error::Numerics(n) => n,
                    other => storyvae_numerics::NumericsError::Invalid {
                        op: "objective",
                        detail: other.to_string(),
                    },
                })
        };
        let err = storyvae_numerics::grad_check_entries_scaled(f, t, eps, &entries)?;
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_identities() {
        let p = |mu: f64, lv: f64| PosteriorParams { mu: vec![mu], log_var: vec![lv] };
        assert_eq!(kl_single(&p(0.0, 0.0)), 0.0);
        assert_eq!(kl_single(&p(1.0, 0.0)), 0.5);
        assert!((kl_single(&p(0.0, 1.0)) - 0.5 * (std::f64::consts::E - 2.0)).abs() < 1e-12);
    }

    #[test]
    fn topic_loss_cases() {
        assert_eq!(topic_loss(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert!((topic_loss(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - 2f64.ln()).abs() < 1e-12);
        let big = topic_loss(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
        assert!(big.is_finite() && big > 5.0);
        assert!(topic_loss(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn discourse_loss_cases() {
        assert!((discourse_loss(0.5, 1.0) - 2f64.ln()).abs() < 1e-12);
        assert!(discourse_loss(1.0, 1.0) < 1e-7);
        assert!((discourse_loss(0.75, 0.0) + 0.25f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn total_loss_arithmetic() {
        let w = LossWeights { alpha: 0.5, beta: 1.0, gamma: 0.0, c: 6.0 };
        let b = total_loss(LossParts { recon: 10.0, kl: 8.0, topic: 2.0, discourse: 3.0 }, &w);
        assert_eq!(b.total, 13.0);
        let plain = LossWeights { alpha: 0.0, beta: 1.0, gamma: 0.0, c: 4.0 };
        let b = total_loss(LossParts { recon: 7.5, kl: 4.0, topic: 9.0, discourse: 9.0 }, &plain);
        assert_eq!(b.total, 7.5);
    }

    #[test]
    fn recon_uniform_logits() {
        let (t, v) = (5, 7);
        let logits = Tensor::zeros(&[1, t, v]);
        let loss = recon_loss(&logits, &[1; 5], &[true; 5]).unwrap();
        assert!((loss - t as f64 * (v as f64).ln()).abs() < 1e-12);
        assert!(recon_loss(&logits, &[1; 5], &[false; 5]).is_err());
    }
}
