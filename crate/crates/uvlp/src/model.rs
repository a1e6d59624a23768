//! The shared transformer trunk: masked multi-head self-attention,
//! post-norm residual blocks, and the tied LM output head.
//!
//! One stack serves both objectives; the only thing that changes between
//! them is the attention mask threaded into every layer's softmax. Scores
//! for disallowed key columns are excluded from normalization entirely, so
//! their attention weight is exactly 0.0 and information provably cannot
//! cross the mask.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use std::error::Error;
use std::fmt;

use crate::embed::{EmbedDims, EmbeddingTables, InputSequence, RegionPositional, LN_EPS};
use crate::mask::AttentionMask;
use crate::tensor::{Binding, NodeId, ParamId, ParamStore, Tape, TensorError};

/// An inconsistent hyperparameter combination.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid model config: {}", self.0)
    }
}

impl Error for ConfigError {}

/// Architecture and input-geometry hyperparameters. Serialized into
/// checkpoints; two checkpoints are compatible exactly when these match.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Transformer layer count L.
    pub layers: usize,
    /// Hidden size d.
    pub d: usize,
    /// Attention heads per layer.
    pub heads: usize,
    /// Feed-forward inner width.
    pub ffn: usize,
    /// Token vocabulary size.
    pub vocab: usize,
    /// Region feature width d_in.
    pub d_in: usize,
    /// Class-distribution length l.
    pub classes: usize,
    /// Region count N.
    pub n: usize,
    /// Text window length T.
    pub t: usize,
    /// Longest sequence the position table covers; at least N+T+3.
    pub max_u: usize,
    /// Train-time dropout rate (0 disables; always disabled at inference).
    pub dropout: f64,
    /// Whether visual-block columns receive global position rows.
    pub region_positional: RegionPositional,
    /// Whether detector class probabilities enter the region embedding.
    /// Disabled only for the region-label-as-pretext ablation arm, where
    /// the class signal is predicted instead of fed in.
    #[serde(default = "default_class_input")]
    pub class_input: bool,
}

fn default_class_input() -> bool {
    true
}

impl ModelConfig {
    /// Desk-scale defaults sized for the default grammar; `vocab` must
    /// still be set from the actual vocabulary.
    pub fn desk(vocab: usize) -> ModelConfig {
        ModelConfig {
            layers: 2,
            d: 64,
            heads: 4,
            ffn: 256,
            vocab,
            d_in: 32,
            classes: 16,
            n: 8,
            t: 20,
            max_u: 8 + 20 + 3,
            dropout: 0.0,
            region_positional: RegionPositional::None,
            class_input: true,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 || self.d % 2 != 0 {
            return Err(ConfigError(format!(
                "d={} must be even and divisible by heads={}",
                self.d, self.heads
            )));
        }
        if self.ffn < self.d {
            return Err(ConfigError(format!(
                "ffn={} must be at least d={}",
                self.ffn, self.d
            )));
        }
        if self.max_u < self.n + self.t + 3 {
            return Err(ConfigError(format!(
                "max_u={} shorter than N+T+3={}",
                self.max_u,
                self.n + self.t + 3
            )));
        }
        Ok(())
    }

    pub fn embed_dims(&self) -> EmbedDims {
        EmbedDims {
            d: self.d,
            d_in: self.d_in,
            l: self.classes,
            vocab: self.vocab,
            max_u: self.max_u,
        }
    }
}

/// Parameter ids of one transformer layer: QKV and output projections
/// (no biases), the feed-forward pair, and the two post-norm layer norms.
#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub ffn_w1: ParamId,
    pub ffn_b1: ParamId,
    pub ffn_w2: ParamId,
    pub ffn_b2: ParamId,
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
}

impl LayerWeights {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        layer: usize,
        d: usize,
        ffn: usize,
    ) -> LayerWeights {
        let std = 0.02;
        let name = |part: &str| format!("layer{layer}.{part}");
        LayerWeights {
            w_q: store.add_normal(&name("w_q"), vec![d, d], std, rng),
            w_k: store.add_normal(&name("w_k"), vec![d, d], std, rng),
            w_v: store.add_normal(&name("w_v"), vec![d, d], std, rng),
            w_o: store.add_normal(&name("w_o"), vec![d, d], std, rng),
            ffn_w1: store.add_normal(&name("ffn_w1"), vec![ffn, d], std, rng),
            ffn_b1: store.add_zeros(&name("ffn_b1"), vec![ffn]),
            ffn_w2: store.add_normal(&name("ffn_w2"), vec![d, ffn], std, rng),
            ffn_b2: store.add_zeros(&name("ffn_b2"), vec![d]),
            ln1_gain: store.add_ones(&name("ln1.gain"), vec![d]),
            ln1_bias: store.add_zeros(&name("ln1.bias"), vec![d]),
            ln2_gain: store.add_ones(&name("ln2.gain"), vec![d]),
            ln2_bias: store.add_zeros(&name("ln2.bias"), vec![d]),
        }
    }
}

/// Tied LM head: dense d→d + gelu + layer norm, then projection through the
/// transposed token table plus a per-token output bias.
#[derive(Debug, Clone)]
pub struct LmHead {
    pub dense_w: ParamId,
    pub dense_b: ParamId,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
    pub out_bias: ParamId,
}

impl LmHead {
    pub fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, d: usize, vocab: usize) -> LmHead {
        LmHead {
            dense_w: store.add_normal("lm_head.dense_w", vec![d, d], 0.02, rng),
            dense_b: store.add_zeros("lm_head.dense_b", vec![d]),
            ln_gain: store.add_ones("lm_head.ln.gain", vec![d]),
            ln_bias: store.add_zeros("lm_head.ln.bias", vec![d]),
            out_bias: store.add_zeros("lm_head.out_bias", vec![vocab]),
        }
    }
}

/// Source of train-time dropout masks. `Inference` disables dropout
/// regardless of the configured rate.
pub enum DropoutMode<'a> {
    Inference,
    Train(&'a mut ChaCha8Rng),
}

impl DropoutMode<'_> {
    fn apply(
        &mut self,
        tape: &mut Tape,
        x: NodeId,
        rate: f64,
    ) -> Result<NodeId, TensorError> {
        match self {
            DropoutMode::Inference => Ok(x),
            DropoutMode::Train(rng) => {
                if rate == 0.0 {
                    return Ok(x);
                }
                let n = tape.value(x).len();
                let keep_prob = 1.0 - rate;
                let keep: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < keep_prob).collect();
                tape.dropout(x, keep, keep_prob)
            }
        }
    }
}

/// Multi-head masked self-attention over a d×U sequence. Returns the d×U
/// output and the per-head U×U attention matrices (query rows, key
/// columns).
pub fn masked_self_attention(
    tape: &mut Tape,
    bind: &Binding,
    h: NodeId,
    mask: &AttentionMask,
    weights: &LayerWeights,
    heads: usize,
) -> Result<(NodeId, Vec<NodeId>), TensorError> {
    let (d, u) = {
        let s = tape.shape(h);
        (s[0], s[1])
    };
    debug_assert_eq!(mask.u(), u, "mask size must match sequence length");
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let q = tape.matmul(bind[weights.w_q], h)?;
    let k = tape.matmul(bind[weights.w_k], h)?;
    let v = tape.matmul(bind[weights.w_v], h)?;

    let mut contexts = Vec::with_capacity(heads);
    let mut attentions = Vec::with_capacity(heads);
    for head in 0..heads {
        let qh = tape.slice_rows(q, head * dh, dh)?;
        let kh = tape.slice_rows(k, head * dh, dh)?;
        let vh = tape.slice_rows(v, head * dh, dh)?;
        let qt = tape.transpose(qh);
        let scores = tape.matmul(qt, kh)?;
        let scaled = tape.scale(scores, scale);
        let attn = tape.masked_softmax(scaled, mask.flat())?;
        let attn_t = tape.transpose(attn);
        let ctx = tape.matmul(vh, attn_t)?;
        contexts.push(ctx);
        attentions.push(attn);
    }
    let ctx = tape.concat_rows(&contexts)?;
    let out = tape.matmul(bind[weights.w_o], ctx)?;
    Ok((out, attentions))
}

/// One post-norm block: H' = LN(H + Attn(H)); out = LN(H' + FFN(H')) with
/// FFN = W₂·gelu(W₁x + b₁) + b₂.
pub fn transformer_block(
    tape: &mut Tape,
    bind: &Binding,
    h: NodeId,
    mask: &AttentionMask,
    weights: &LayerWeights,
    heads: usize,
    dropout_rate: f64,
    mode: &mut DropoutMode,
) -> Result<(NodeId, Vec<NodeId>), TensorError> {
    let (attn, attentions) = masked_self_attention(tape, bind, h, mask, weights, heads)?;
    let attn = mode.apply(tape, attn, dropout_rate)?;
    let res1 = tape.add(h, attn)?;
    let h1 = tape.layer_norm(res1, bind[weights.ln1_gain], bind[weights.ln1_bias], LN_EPS)?;

    let pre = tape.matmul(bind[weights.ffn_w1], h1)?;
    let pre = tape.add_bias(pre, bind[weights.ffn_b1])?;
    let act = tape.gelu(pre);
    let post = tape.matmul(bind[weights.ffn_w2], act)?;
    let post = tape.add_bias(post, bind[weights.ffn_b2])?;
    let post = mode.apply(tape, post, dropout_rate)?;
    let res2 = tape.add(h1, post)?;
    let h2 = tape.layer_norm(res2, bind[weights.ln2_gain], bind[weights.ln2_bias], LN_EPS)?;
    Ok((h2, attentions))
}

/// Everything the forward pass produced: the final hidden state and every
/// layer's per-head attention matrices (for invariant checks and
/// inspection).
pub struct ForwardTrace {
    pub h_final: NodeId,
    /// `attentions[layer][head]` is a U×U node.
    pub attentions: Vec<Vec<NodeId>>,
}

/// Runs the L-layer trunk over an assembled input under one mask.
pub fn forward(
    tape: &mut Tape,
    bind: &Binding,
    input: &InputSequence,
    mask: &AttentionMask,
    layers: &[LayerWeights],
    config: &ModelConfig,
    mode: &mut DropoutMode,
) -> Result<ForwardTrace, TensorError> {
    let mut h = input.h0;
    let mut attentions = Vec::with_capacity(layers.len());
    for weights in layers {
        let (next, attn) = transformer_block(
            tape,
            bind,
            h,
            mask,
            weights,
            config.heads,
            config.dropout,
            mode,
        )?;
        h = next;
        attentions.push(attn);
    }
    Ok(ForwardTrace {
        h_final: h,
        attentions,
    })
}

/// Projects the selected columns of H^L to vocabulary logits
/// (vocab×|positions|, one column per selected position) through the tied
/// head.
pub fn lm_logits(
    tape: &mut Tape,
    bind: &Binding,
    h_final: NodeId,
    positions: &[usize],
    head: &LmHead,
    tables: &EmbeddingTables,
) -> Result<NodeId, TensorError> {
    let cols = tape.select_cols(h_final, positions)?;
    let dense = tape.matmul(bind[head.dense_w], cols)?;
    let dense = tape.add_bias(dense, bind[head.dense_b])?;
    let act = tape.gelu(dense);
    let normed = tape.layer_norm(act, bind[head.ln_gain], bind[head.ln_bias], LN_EPS)?;
    let tied = tape.matmul(bind[tables.token], normed)?;
    tape.add_bias(tied, bind[head.out_bias])
}
