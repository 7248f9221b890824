use crate::error::{shape_err, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Additive score for disallowed keys; `exp` of it underflows to exactly 0.
pub const MASKED_SCORE: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum MaskKind {
    Causal,
    Bidirectional,
}

/// Which keys each query may attend to.
///
/// With `S` keys and `T` queries the first `S - T` keys are a prefix every
/// query sees (memory slots); under `Causal`, query `t` additionally sees keys
/// up to `S - T + t`. `key_padding[b * S + s] == false` hides key `s` of
/// batch row `b` regardless of kind.
#[derive(Debug, Clone)]
pub struct AttentionMask {
    pub kind: MaskKind,
    pub key_padding: Option<Vec<bool>>,
}

impl AttentionMask {
    pub fn causal() -> Self {
        AttentionMask {
            kind: MaskKind::Causal,
            key_padding: None,
        }
    }

    pub fn bidirectional() -> Self {
        AttentionMask {
            kind: MaskKind::Bidirectional,
            key_padding: None,
        }
    }

    pub fn with_padding(mut self, key_padding: Vec<bool>) -> Self {
        self.key_padding = Some(key_padding);
        self
    }

    /// Additive mask of shape `[batch, heads, t, s]`.
    pub fn scores_bias(&self, batch: usize, heads: usize, t: usize, s: usize) -> Result<Tensor> {
        if s < t && self.kind == MaskKind::Causal {
            return shape_err("attention", format!("causal mask needs keys >= queries, got {s} < {t}"));
        }
        if let Some(p) = &self.key_padding {
            if p.len() != batch * s {
                return shape_err("attention", format!("padding mask has {} entries, need {}", p.len(), batch * s));
            }
        }
        let offset = s.saturating_sub(t);
        let mut bias = Vec::with_capacity(batch * heads * t * s);
        for b in 0..batch {
            for _ in 0..heads {
                for q in 0..t {
                    for k in 0..s {
                        let causal_ok = self.kind == MaskKind::Bidirectional || k <= q + offset;
                        let pad_ok = self.key_padding.as_ref().is_none_or(|p| p[b * s + k]);
                        bias.push(if causal_ok && pad_ok { 0.0 } else { MASKED_SCORE });
                    }
                }
            }
        }
        Tensor::new(bias, &[batch, heads, t, s])
    }
}

/// Scaled dot-product attention. `q` is `[B, H, T, dh]`, `k` and `v` are
/// `[B, H, S, dh]`; returns `[B, H, T, dh]`.
pub fn attention_block(g: &mut Graph, q: Var, k: Var, v: Var, mask: &AttentionMask) -> Result<Var> {
    let sq = g.shape(q).to_vec();
    let sk = g.shape(k).to_vec();
    let sv = g.shape(v).to_vec();
    if sq.len() != 4 || sk.len() != 4 || sv != sk {
        return shape_err("attention", format!("q {sq:?}, k {sk:?}, v {sv:?}"));
    }
    if sq[0] != sk[0] || sq[1] != sk[1] || sq[3] != sk[3] {
        return shape_err("attention", format!("q {sq:?} incompatible with k {sk:?}"));
    }
    let (batch, heads, t, dh) = (sq[0], sq[1], sq[2], sq[3]);
    let s = sk[2];
    let scores = g.matmul_bt(q, k)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
    let bias = g.constant(mask.scores_bias(batch, heads, t, s)?);
    let scores = g.add(scores, bias)?;
    let probs = g.softmax(scores)?;
    g.matmul(probs, v)
}
