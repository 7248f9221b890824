//! Transformer VAE: bidirectional encoder pooled at [CLS] into a diagonal
//! Gaussian posterior, causal decoder conditioned on `z` by prepending or by
//! per-layer memory slots, and linear topic and discourse heads on `z`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use storyvae_numerics::{attention_block, AttentionMask, Graph, Tensor, Var};

use crate::corpus::EncodedStory;
use crate::error::{invalid, io_err, Error, Result};
use crate::rng::{self, Rng};
use crate::topics::TopicDistribution;

pub const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Injection {
    Prepend,
    Memory,
}

impl FromStr for Injection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "prepend" => Ok(Injection::Prepend),
            "memory" => Ok(Injection::Memory),
            other => invalid(format!("unknown injection {other:?} (expected prepend or memory)")),
        }
    }
}

impl fmt::Display for Injection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Injection::Prepend => "prepend",
            Injection::Memory => "memory",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub latent_dim: usize,
    pub injection: Injection,
    pub max_len: usize,
    pub n_topics: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 64,
            d_model: 64,
            n_layers: 2,
            n_heads: 2,
            ff_dim: 128,
            latent_dim: 16,
            injection: Injection::Prepend,
            max_len: 100,
            n_topics: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("ff_dim", self.ff_dim),
            ("latent_dim", self.latent_dim),
            ("max_len", self.max_len),
            ("n_topics", self.n_topics),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return invalid(format!("model.{name} must be positive"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return invalid(format!(
                "model.d_model ({}) must be divisible by model.n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorParams {
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentVector {
    pub z: Vec<f64>,
}

/// `z = mu + exp(log_var / 2) * eps`.
pub fn reparameterize(params: &PosteriorParams, eps: &[f64]) -> Result<LatentVector> {
    if eps.len() != params.mu.len() || params.log_var.len() != params.mu.len() {
        return invalid("reparameterize: mu, log_var and eps lengths differ");
    }
    Ok(LatentVector {
        z: params
            .mu
            .iter()
            .zip(&params.log_var)
            .zip(eps)
            .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
            .collect(),
    })
}

pub fn standard_normal(n: usize, r: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(r)).collect()
}

/// Ordered named tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    fn push(&mut self, name: String, t: Tensor) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.tensors[i])
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gain: usize,
    bias: usize,
}

#[derive(Debug, Clone, Copy)]
struct Block {
    ln1: Norm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: Norm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Debug, Clone)]
struct Layout {
    enc_tok: usize,
    enc_pos: usize,
    enc_blocks: Vec<Block>,
    enc_ln: Norm,
    mu: Linear,
    log_var: Linear,
    dec_tok: usize,
    dec_pos: usize,
    dec_blocks: Vec<Block>,
    dec_ln: Norm,
    out: Linear,
    z_proj: Option<Linear>,
    memory: Option<(Linear, Linear)>,
    topic: Linear,
    disc: Linear,
}

struct Builder<'a> {
    store: ParamStore,
    rng: &'a mut Rng,
}

impl Builder<'_> {
    fn normal(&mut self, name: String, shape: &[usize]) -> usize {
        let t = Tensor::randn(shape, INIT_STD, self.rng);
        self.store.push(name, t)
    }

    fn filled(&mut self, name: String, shape: &[usize], value: f64) -> usize {
        self.store.push(name, Tensor::full(shape, value))
    }

    fn linear(&mut self, name: &str, d_in: usize, d_out: usize) -> Linear {
        Linear {
            w: self.normal(format!("{name}.w"), &[d_in, d_out]),
            b: self.filled(format!("{name}.b"), &[d_out], 0.0),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            gain: self.filled(format!("{name}.gain"), &[d], 1.0),
            bias: self.filled(format!("{name}.bias"), &[d], 0.0),
        }
    }

    fn block(&mut self, name: &str, d: usize, ff: usize) -> Block {
        Block {
            ln1: self.norm(&format!("{name}.ln1"), d),
            q: self.linear(&format!("{name}.q"), d, d),
            k: self.linear(&format!("{name}.k"), d, d),
            v: self.linear(&format!("{name}.v"), d, d),
            o: self.linear(&format!("{name}.o"), d, d),
            ln2: self.norm(&format!("{name}.ln2"), d),
            ff1: self.linear(&format!("{name}.ff1"), d, ff),
            ff2: self.linear(&format!("{name}.ff2"), ff, d),
        }
    }
}

fn build(cfg: &ModelConfig, r: &mut Rng) -> (ParamStore, Layout) {
    let (d, v, l) = (cfg.d_model, cfg.vocab_size, cfg.latent_dim);
    let mut b = Builder {
        store: ParamStore::default(),
        rng: r,
    };
    let enc_tok = b.normal("enc.tok".into(), &[v, d]);
    let enc_pos = b.normal("enc.pos".into(), &[cfg.max_len, d]);
    let enc_blocks = (0..cfg.n_layers).map(|i| b.block(&format!("enc.{i}"), d, cfg.ff_dim)).collect();
    let enc_ln = b.norm("enc.ln", d);
    let mu = b.linear("enc.mu", d, l);
    let log_var = b.linear("enc.log_var", d, l);
    let dec_positions = cfg.max_len + usize::from(cfg.injection == Injection::Prepend);
    let dec_tok = b.normal("dec.tok".into(), &[v, d]);
    let dec_pos = b.normal("dec.pos".into(), &[dec_positions, d]);
    let dec_blocks = (0..cfg.n_layers).map(|i| b.block(&format!("dec.{i}"), d, cfg.ff_dim)).collect();
    let dec_ln = b.norm("dec.ln", d);
    let out = b.linear("dec.out", d, v);
    let (z_proj, memory) = match cfg.injection {
        Injection::Prepend => (Some(b.linear("dec.z_proj", l, d)), None),
        Injection::Memory => (
            None,
            Some((b.linear("dec.mem1", l, d), b.linear("dec.mem2", d, cfg.n_layers * 2 * d))),
        ),
    };
    let topic = b.linear("head.topic", l, cfg.n_topics);
    let disc = b.linear("head.disc", l, 1);
    let layout = Layout {
        enc_tok,
        enc_pos,
        enc_blocks,
        enc_ln,
        mu,
        log_var,
        dec_tok,
        dec_pos,
        dec_blocks,
        dec_ln,
        out,
        z_proj,
        memory,
        topic,
        disc,
    };
    (b.store, layout)
}

/// Parameters inserted into one graph, indexed like the [`ParamStore`].
pub struct Bound {
    pub vars: Vec<Var>,
}

impl Bound {
    fn at(&self, i: usize) -> Var {
        self.vars[i]
    }
}

/// Token ids of a batch, trimmed to the longest real length.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub batch: usize,
    pub len: usize,
    pub encoder_ids: Vec<usize>,
    pub decoder_input_ids: Vec<usize>,
    pub decoder_target_ids: Vec<usize>,
    pub pad_mask: Vec<bool>,
}

impl TokenBatch {
    pub fn new(stories: &[&EncodedStory]) -> Result<Self> {
        if stories.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let len = stories.iter().map(|s| s.real_len()).max().unwrap_or(0);
        if len == 0 {
            return invalid("batch has no real tokens");
        }
        let take = |f: fn(&EncodedStory) -> &Vec<usize>| -> Vec<usize> {
            stories.iter().flat_map(|s| f(s)[..len].iter().copied()).collect()
        };
        Ok(TokenBatch {
            batch: stories.len(),
            len,
            encoder_ids: take(|s| &s.encoder_ids),
            decoder_input_ids: take(|s| &s.decoder_input_ids),
            decoder_target_ids: take(|s| &s.decoder_target_ids),
            pad_mask: stories.iter().flat_map(|s| s.pad_mask[..len].iter().copied()).collect(),
        })
    }

    /// Non-pad tokens per row.
    pub fn real_lengths(&self) -> Vec<usize> {
        self.pad_mask
            .chunks(self.len)
            .map(|row| row.iter().filter(|&&m| m).count())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeModel {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
    seed: u64,
}

impl PartialEq for Layout {
    fn eq(&self, _: &Self) -> bool {
        // derived entirely from the config
        true
    }
}

impl VaeModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, "init");
        let (params, layout) = build(&config, &mut r);
        Ok(VaeModel {
            config,
            params,
            layout,
            seed,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Inserts every parameter as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self.params.tensors.iter().map(|t| g.param(t)).collect(),
        }
    }

    /// Inserts every parameter as a constant.
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self.params.tensors.iter().map(|t| g.constant(t.clone())).collect(),
        }
    }

    fn linear(g: &mut Graph, p: &Bound, x: Var, l: Linear) -> Result<Var> {
        let y = g.matmul(x, p.at(l.w))?;
        Ok(g.add(y, p.at(l.b))?)
    }

    fn norm(g: &mut Graph, p: &Bound, x: Var, n: Norm) -> Result<Var> {
        let y = g.layer_norm(x, LN_EPS)?;
        let y = g.mul(y, p.at(n.gain))?;
        Ok(g.add(y, p.at(n.bias))?)
    }

    fn split_heads(&self, g: &mut Graph, x: Var, batch: usize, len: usize) -> Result<Var> {
        let (h, dh) = (self.config.n_heads, self.config.head_dim());
        let x = g.reshape(x, &[batch, len, h, dh])?;
        Ok(g.permute(x, &[0, 2, 1, 3])?)
    }

    /// Pre-norm transformer block over `x [B, T, d]`. `memory` holds extra
    /// key/value rows `[B, M, d]` visible to every query.
    fn block(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        blk: &Block,
        mask: &AttentionMask,
        memory: Option<(Var, Var)>,
    ) -> Result<Var> {
        let (batch, len, d) = {
            let s = g.shape(x);
            (s[0], s[1], s[2])
        };
        let h = Self::norm(g, p, x, blk.ln1)?;
        let q = Self::linear(g, p, h, blk.q)?;
        let mut k = Self::linear(g, p, h, blk.k)?;
        let mut v = Self::linear(g, p, h, blk.v)?;
        let mut keys = len;
        if let Some((mk, mv)) = memory {
            k = g.concat(&[mk, k], 1)?;
            v = g.concat(&[mv, v], 1)?;
            keys += g.shape(mk)[1];
        }
        let q = self.split_heads(g, q, batch, len)?;
        let k = self.split_heads(g, k, batch, keys)?;
        let v = self.split_heads(g, v, batch, keys)?;
        let att = attention_block(g, q, k, v, mask)?;
        let att = g.permute(att, &[0, 2, 1, 3])?;
        let att = g.reshape(att, &[batch, len, d])?;
        let att = Self::linear(g, p, att, blk.o)?;
        let x = g.add(x, att)?;
        let h = Self::norm(g, p, x, blk.ln2)?;
        let h = Self::linear(g, p, h, blk.ff1)?;
        let h = g.gelu(h)?;
        let h = Self::linear(g, p, h, blk.ff2)?;
        Ok(g.add(x, h)?)
    }

    fn positions(&self, g: &mut Graph, p: &Bound, table: usize, len: usize) -> Result<Var> {
        Ok(g.slice(p.at(table), 0, 0, len)?)
    }

    /// Posterior parameters `(mu, log_var)`, each `[B, latent_dim]`.
    pub fn encode_graph(&self, g: &mut Graph, p: &Bound, batch: &TokenBatch) -> Result<(Var, Var)> {
        let (b, t) = (batch.batch, batch.len);
        if t > self.config.max_len {
            return invalid(format!("sequence length {t} exceeds max_len {}", self.config.max_len));
        }
        let tok = g.embedding(p.at(self.layout.enc_tok), &batch.encoder_ids, &[b, t])?;
        let pos = self.positions(g, p, self.layout.enc_pos, t)?;
        let mut x = g.add(tok, pos)?;
        let mask = AttentionMask::bidirectional().with_padding(batch.pad_mask.clone());
        for blk in &self.layout.enc_blocks {
            x = self.block(g, p, x, blk, &mask, None)?;
        }
        let cls = g.slice(x, 1, 0, 1)?;
        let cls = g.reshape(cls, &[b, self.config.d_model])?;
        let cls = Self::norm(g, p, cls, self.layout.enc_ln)?;
        let mu = Self::linear(g, p, cls, self.layout.mu)?;
        let log_var = Self::linear(g, p, cls, self.layout.log_var)?;
        Ok((mu, log_var))
    }

    /// Logits `[B, T, V]` for decoder inputs `ids [B, T]` given `z [B, latent_dim]`.
    pub fn decode_graph(&self, g: &mut Graph, p: &Bound, z: Var, ids: &[usize], batch: usize, len: usize) -> Result<Var> {
        if len > self.config.max_len {
            return invalid(format!("sequence length {len} exceeds max_len {}", self.config.max_len));
        }
        let d = self.config.d_model;
        let tok = g.embedding(p.at(self.layout.dec_tok), ids, &[batch, len])?;
        let mask = AttentionMask::causal();
        let mut memories = Vec::new();
        let mut x = match self.config.injection {
            Injection::Prepend => {
                let proj = self.layout.z_proj.expect("prepend layout has a projection");
                let zp = Self::linear(g, p, z, proj)?;
                let zp = g.reshape(zp, &[batch, 1, d])?;
                let x = g.concat(&[zp, tok], 1)?;
                let pos = self.positions(g, p, self.layout.dec_pos, len + 1)?;
                g.add(x, pos)?
            }
            Injection::Memory => {
                let (m1, m2) = self.layout.memory.expect("memory layout has an MLP");
                let h = Self::linear(g, p, z, m1)?;
                let h = g.tanh(h)?;
                let slots = Self::linear(g, p, h, m2)?;
                let slots = g.reshape(slots, &[batch, 1, self.config.n_layers * 2 * d])?;
                for layer in 0..self.config.n_layers {
                    let mk = g.slice(slots, 2, 2 * layer * d, d)?;
                    let mv = g.slice(slots, 2, (2 * layer + 1) * d, d)?;
                    memories.push((mk, mv));
                }
                let pos = self.positions(g, p, self.layout.dec_pos, len)?;
                g.add(tok, pos)?
            }
        };
        for (i, blk) in self.layout.dec_blocks.iter().enumerate() {
            x = self.block(g, p, x, blk, &mask, memories.get(i).copied())?;
        }
        if self.config.injection == Injection::Prepend {
            x = g.slice(x, 1, 1, len)?;
        }
        let x = Self::norm(g, p, x, self.layout.dec_ln)?;
        Self::linear(g, p, x, self.layout.out)
    }

    /// Topic logits `[B, K]`.
    pub fn topic_graph(&self, g: &mut Graph, p: &Bound, z: Var) -> Result<Var> {
        Self::linear(g, p, z, self.layout.topic)
    }

    /// Discourse logits `[B, 1]`.
    pub fn discourse_graph(&self, g: &mut Graph, p: &Bound, z: Var) -> Result<Var> {
        Self::linear(g, p, z, self.layout.disc)
    }

    /// Number of attended key slots added per decoder layer.
    pub fn extra_slots_per_layer(&self) -> usize {
        usize::from(self.config.injection == Injection::Memory)
    }

    /// Internal decoder sequence length for `t` input tokens.
    pub fn decoder_internal_len(&self, t: usize) -> usize {
        t + usize::from(self.config.injection == Injection::Prepend)
    }

    pub fn encode(&self, story: &EncodedStory) -> Result<PosteriorParams> {
        Ok(self.encode_batch(&[story])?.remove(0))
    }

    pub fn encode_batch(&self, stories: &[&EncodedStory]) -> Result<Vec<PosteriorParams>> {
        let batch = TokenBatch::new(stories)?;
        let mut g = Graph::new();
        let p = self.bind_frozen(&mut g);
        let (mu, lv) = self.encode_graph(&mut g, &p, &batch)?;
        let l = self.config.latent_dim;
        Ok(g.data(mu)
            .chunks(l)
            .zip(g.data(lv).chunks(l))
            .map(|(m, v)| PosteriorParams {
                mu: m.to_vec(),
                log_var: v.to_vec(),
            })
            .collect())
    }

    fn latent_tensor(&self, zs: &[&[f64]]) -> Result<Tensor> {
        let l = self.config.latent_dim;
        if zs.iter().any(|z| z.len() != l) {
            return invalid(format!("latent vectors must have length {l}"));
        }
        Ok(Tensor::new(zs.concat(), &[zs.len(), l])?)
    }

    /// Logits `[T, V]` of one sequence.
    pub fn decode_logits(&self, z: &[f64], decoder_input_ids: &[usize]) -> Result<Tensor> {
        let t = decoder_input_ids.len();
        let logits = self.decode_logits_batch(&[z], decoder_input_ids, t)?;
        Ok(Tensor::new(logits.data, &[t, self.config.vocab_size])?)
    }

    /// Logits `[B, T, V]` for `B` latents sharing length `T`.
    pub fn decode_logits_batch(&self, zs: &[&[f64]], ids: &[usize], len: usize) -> Result<Tensor> {
        if len == 0 || ids.len() != zs.len() * len {
            return invalid("decoder ids do not match batch x length");
        }
        let mut g = Graph::new();
        let p = self.bind_frozen(&mut g);
        let z = g.constant(self.latent_tensor(zs)?);
        let logits = self.decode_graph(&mut g, &p, z, ids, zs.len(), len)?;
        Ok(g.value(logits).clone())
    }

    pub fn topic_head(&self, z: &[f64]) -> Result<TopicDistribution> {
        let mut g = Graph::new();
        let p = self.bind_frozen(&mut g);
        let zv = g.constant(self.latent_tensor(&[z])?);
        let logits = self.topic_graph(&mut g, &p, zv)?;
        let probs = g.softmax(logits)?;
        Ok(TopicDistribution {
            probs: g.data(probs).to_vec(),
        })
    }

    pub fn discourse_head(&self, z: &[f64]) -> Result<f64> {
        Ok(self.discourse_scores(&[z])?[0])
    }

    pub fn discourse_scores(&self, zs: &[&[f64]]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = self.bind_frozen(&mut g);
        let zv = g.constant(self.latent_tensor(zs)?);
        let logits = self.discourse_graph(&mut g, &p, zv)?;
        let s = g.sigmoid(logits)?;
        Ok(g.data(s).to_vec())
    }

    pub fn sample_prior(&self, r: &mut Rng) -> LatentVector {
        LatentVector {
            z: standard_normal(self.config.latent_dim, r),
        }
    }

    pub fn save(&self, path: &Path, provenance: Provenance) -> Result<()> {
        let ckpt = Checkpoint {
            config: self.config.clone(),
            init_seed: self.seed,
            provenance,
            params: self
                .params
                .names
                .iter()
                .cloned()
                .zip(self.params.tensors.iter().map(|t| t.clone().with_grad(false)))
                .collect(),
        };
        let json = serde_json::to_string(&ckpt)?;
        fs::write(path, json).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<(Self, Provenance)> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        let mut model = VaeModel::new(ckpt.config, ckpt.init_seed)?;
        if ckpt.params.len() != model.params.len() {
            return invalid(format!(
                "checkpoint has {} tensors, model expects {}",
                ckpt.params.len(),
                model.params.len()
            ));
        }
        for (name, slot) in model.params.names.iter().zip(model.params.tensors.iter_mut()) {
            let t = ckpt
                .params
                .get(name)
                .ok_or_else(|| Error::Invalid(format!("checkpoint is missing {name}")))?;
            if t.shape != slot.shape {
                return invalid(format!("{name}: checkpoint shape {:?}, expected {:?}", t.shape, slot.shape));
            }
            *slot = t.clone();
        }
        Ok((model, ckpt.provenance))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: Option<u64>,
    pub config_hash: Option<String>,
    pub epochs: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    config: ModelConfig,
    init_seed: u64,
    provenance: Provenance,
    params: BTreeMap<String, Tensor>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(injection: Injection) -> VaeModel {
        let cfg = ModelConfig {
            vocab_size: 12,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            ff_dim: 16,
            latent_dim: 3,
            injection,
            max_len: 10,
            n_topics: 2,
        };
        VaeModel::new(cfg, 1).unwrap()
    }

    #[test]
    fn config_validation() {
        let bad = ModelConfig { d_model: 10, n_heads: 3, ..ModelConfig::default() };
        assert!(bad.validate().unwrap_err().to_string().contains("n_heads"));
        assert!(ModelConfig { latent_dim: 0, ..ModelConfig::default() }.validate().is_err());
    }

    #[test]
    fn injection_parses() {
        assert_eq!("memory".parse::<Injection>().unwrap(), Injection::Memory);
        assert!("prefix".parse::<Injection>().is_err());
    }

    #[test]
    fn reparameterize_cases() {
        let p = PosteriorParams { mu: vec![1.0, -2.0], log_var: vec![0.0, 0.0] };
        assert_eq!(reparameterize(&p, &[0.0, 0.0]).unwrap().z, p.mu);
        assert_eq!(reparameterize(&p, &[0.5, 0.25]).unwrap().z, vec![1.5, -1.75]);
        assert!(reparameterize(&p, &[0.0]).is_err());
    }

    #[test]
    fn layouts_differ_by_injection() {
        assert!(tiny(Injection::Prepend).params().get("dec.z_proj.w").is_some());
        let m = tiny(Injection::Memory);
        assert!(m.params().get("dec.mem2.w").is_some());
        assert_eq!(m.params().get("dec.pos").unwrap().shape, vec![10, 8]);
        assert_eq!(tiny(Injection::Prepend).params().get("dec.pos").unwrap().shape, vec![11, 8]);
    }

    #[test]
    fn decode_shapes() {
        for inj in [Injection::Prepend, Injection::Memory] {
            let m = tiny(inj);
            let logits = m.decode_logits(&[0.1, 0.2, 0.3], &[4, 9, 10, 3]).unwrap();
            assert_eq!(logits.shape, vec![4, 12]);
        }
    }
}
