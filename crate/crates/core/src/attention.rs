//! Multi-head self- and cross-attention with optional attention links, and
//! the position-wise feed-forward block.
//!
//! Per head `i` the attention logits are `(x_q W_Q^i)(x_k W_K^i)ᵀ`, one row
//! per query position. A link adds `λ · L_prev` to those logits before the
//! softmax, where `L_prev` is the matching head's logits from the layer
//! below. Masking happens after the sum. The record a layer leaves behind
//! holds its own logits only, so a link never reaches further than one
//! layer down.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{AttentionParams, FfnParams};
use crate::tensor::{Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttnKind {
    #[serde(rename = "self")]
    SelfAttn,
    Cross,
}

/// `batch` sequences padded to `len`; activations are `[batch * len, width]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeqBatch {
    pub batch: usize,
    pub len: usize,
}

impl SeqBatch {
    pub fn new(batch: usize, len: usize) -> Self {
        Self { batch, len }
    }

    pub fn rows(&self) -> usize {
        self.batch * self.len
    }
}

/// One layer's attention for a batch: logits and probabilities, both
/// `[batch * heads, q_len, k_len]`.
#[derive(Clone, Debug)]
pub struct AttentionRecord<'g> {
    pub layer: usize,
    pub kind: AttnKind,
    pub causal: bool,
    pub batch: usize,
    pub heads: usize,
    pub q_len: usize,
    pub k_len: usize,
    /// Scaled pre-softmax logits of this layer alone (no link term, no mask).
    pub logits: Var<'g>,
    pub probs: Var<'g>,
}

impl AttentionRecord<'_> {
    fn matrix(t: &Tensor, q_len: usize, k_len: usize, slot: usize) -> Vec<Vec<f64>> {
        let base = slot * q_len * k_len;
        (0..q_len)
            .map(|r| t.data()[base + r * k_len..base + (r + 1) * k_len].to_vec())
            .collect()
    }

    /// Attention matrix of sequence `b`, head `head`; rows are queries.
    pub fn probs_matrix(&self, b: usize, head: usize) -> Vec<Vec<f64>> {
        Self::matrix(&self.probs.value(), self.q_len, self.k_len, b * self.heads + head)
    }

    pub fn logits_matrix(&self, b: usize, head: usize) -> Vec<Vec<f64>> {
        Self::matrix(&self.logits.value(), self.q_len, self.k_len, b * self.heads + head)
    }
}

/// Shared settings for one attention call.
#[derive(Clone, Copy, Debug)]
pub struct AttnSpec<'a> {
    pub heads: usize,
    /// Multiply logits by `1/sqrt(head_dim)`.
    pub scale: bool,
    pub causal: bool,
    /// `[batch * k_len]` flags; `false` marks padding keys.
    pub key_valid: Option<&'a [bool]>,
}

/// The extra logits a linked layer adds, and their weight.
#[derive(Clone, Copy, Debug)]
pub struct LinkInput<'g> {
    pub logits: Var<'g>,
    pub lambda: f64,
}

impl<'g> LinkInput<'g> {
    /// Link to the cached logits of the previous layer's record.
    pub fn from_record(prev: &AttentionRecord<'g>, lambda: f64) -> Self {
        Self {
            logits: prev.logits,
            lambda,
        }
    }

    /// The same link with the previous logits replaced by zeros.
    pub fn zeroed(self) -> Self {
        let g = self.logits.graph();
        Self {
            logits: g.constant(Tensor::zeros(&self.logits.shape())),
            lambda: self.lambda,
        }
    }
}

/// `[B*T, h*dh] -> [B*h, T, dh]`.
pub fn split_heads<'g>(x: Var<'g>, seq: SeqBatch, heads: usize) -> Result<Var<'g>> {
    let width = x.shape()[1];
    if !width.is_multiple_of(heads) {
        return Err(Error::invalid(format!("width {width} not divisible by {heads} heads")));
    }
    let dh = width / heads;
    x.reshape(&[seq.batch, seq.len, heads, dh])?
        .swap_axes12()?
        .reshape(&[seq.batch * heads, seq.len, dh])
}

/// `[B*h, T, dh] -> [B*T, h*dh]`.
pub fn merge_heads<'g>(x: Var<'g>, seq: SeqBatch, heads: usize) -> Result<Var<'g>> {
    let dh = x.shape()[2];
    x.reshape(&[seq.batch, heads, seq.len, dh])?
        .swap_axes12()?
        .reshape(&[seq.rows(), heads * dh])
}

/// `x Wᵀ` split into heads.
pub fn project_heads<'g>(x: Var<'g>, seq: SeqBatch, w: Var<'g>, heads: usize) -> Result<Var<'g>> {
    if x.shape()[0] != seq.rows() {
        return Err(Error::Shape {
            op: "project_heads",
            lhs: x.shape(),
            rhs: vec![seq.batch, seq.len],
        });
    }
    split_heads(x.matmul_t(w)?, seq, heads)
}

/// Per-head logits from already-projected queries and keys.
pub fn logits_from_heads<'g>(q: Var<'g>, k: Var<'g>, scale: bool) -> Result<Var<'g>> {
    let l = q.matmul_t(k)?;
    if scale {
        let dh = q.shape()[2] as f64;
        Ok(l.scale(1.0 / dh.sqrt()))
    } else {
        Ok(l)
    }
}

/// Per-head logits `(x_q W_Q^i)(x_k W_K^i)ᵀ`, `[B*h, Tq, Tk]`.
#[allow(clippy::too_many_arguments)]
pub fn head_logits<'g>(
    x_q: Var<'g>,
    q_seq: SeqBatch,
    x_k: Var<'g>,
    k_seq: SeqBatch,
    w_q: Var<'g>,
    w_k: Var<'g>,
    heads: usize,
    scale: bool,
) -> Result<Var<'g>> {
    let q = project_heads(x_q, q_seq, w_q, heads)?;
    let k = project_heads(x_k, k_seq, w_k, heads)?;
    logits_from_heads(q, k, scale)
}

/// Expands key-padding and causal constraints to one flag per logit.
/// `None` when nothing is masked.
pub fn attention_mask(
    batch: usize,
    heads: usize,
    q_len: usize,
    k_len: usize,
    key_valid: Option<&[bool]>,
    causal: bool,
) -> Result<Option<Vec<bool>>> {
    if let Some(kv) = key_valid {
        if kv.len() != batch * k_len {
            return Err(Error::Shape {
                op: "attention_mask",
                lhs: vec![kv.len()],
                rhs: vec![batch, k_len],
            });
        }
    }
    let any_pad = key_valid.is_some_and(|kv| kv.iter().any(|v| !v));
    if !any_pad && !causal {
        return Ok(None);
    }
    let mut mask = Vec::with_capacity(batch * heads * q_len * k_len);
    for b in 0..batch {
        for _ in 0..heads {
            for q in 0..q_len {
                for k in 0..k_len {
                    let valid = key_valid.is_none_or(|kv| kv[b * k_len + k]);
                    mask.push(valid && (!causal || k <= q));
                }
            }
        }
    }
    Ok(Some(mask))
}

#[allow(clippy::too_many_arguments)]
fn attend<'g>(
    q: Var<'g>,
    k: Var<'g>,
    v: Var<'g>,
    w_o: Var<'g>,
    q_seq: SeqBatch,
    k_len: usize,
    link: Option<LinkInput<'g>>,
    spec: &AttnSpec<'_>,
    layer: usize,
    kind: AttnKind,
) -> Result<(Var<'g>, AttentionRecord<'g>)> {
    let own = logits_from_heads(q, k, spec.scale)?;
    let total = match link {
        None => own,
        Some(LinkInput { logits, lambda }) => {
            if !lambda.is_finite() {
                return Err(Error::invalid(format!("link scale {lambda} is not finite")));
            }
            if logits.shape() != own.shape() {
                return Err(Error::Shape {
                    op: "attention link",
                    lhs: own.shape(),
                    rhs: logits.shape(),
                });
            }
            own.add_scaled(logits, lambda)?
        }
    };
    let mask = attention_mask(
        q_seq.batch,
        spec.heads,
        q_seq.len,
        k_len,
        spec.key_valid,
        spec.causal,
    )?;
    let probs = total.softmax_rows(mask.as_deref())?;
    let ctx = merge_heads(probs.matmul(v)?, q_seq, spec.heads)?;
    let y = ctx.matmul_t(w_o)?;
    let record = AttentionRecord {
        layer,
        kind,
        causal: spec.causal,
        batch: q_seq.batch,
        heads: spec.heads,
        q_len: q_seq.len,
        k_len,
        logits: own,
        probs,
    };
    Ok((y, record))
}

/// Self-attention over `x: [B*T, d]`, optionally linked. Returns the
/// `[B*T, d]` output and this layer's record.
pub fn linked_self_attention<'g>(
    x: Var<'g>,
    seq: SeqBatch,
    p: &AttentionParams<Var<'g>>,
    link: Option<LinkInput<'g>>,
    layer: usize,
    spec: &AttnSpec<'_>,
) -> Result<(Var<'g>, AttentionRecord<'g>)> {
    let q = project_heads(x, seq, p.w_q, spec.heads)?;
    let k = project_heads(x, seq, p.w_k, spec.heads)?;
    let v = project_heads(x, seq, p.w_v, spec.heads)?;
    attend(q, k, v, p.w_o, seq, seq.len, link, spec, layer, AttnKind::SelfAttn)
}

/// Keys and values a decoder layer attends to, already split into heads.
#[derive(Clone, Copy, Debug)]
pub struct CrossMemory<'g> {
    pub keys: Var<'g>,
    pub values: Var<'g>,
    pub src_len: usize,
}

impl<'g> CrossMemory<'g> {
    /// Projects encoder output `[B*S, d]` with one layer's key/value weights.
    pub fn project(
        memory: Var<'g>,
        src: SeqBatch,
        p: &AttentionParams<Var<'g>>,
        heads: usize,
    ) -> Result<Self> {
        Ok(Self {
            keys: project_heads(memory, src, p.w_k, heads)?,
            values: project_heads(memory, src, p.w_v, heads)?,
            src_len: src.len,
        })
    }
}

/// Cross-attention from decoder states `x: [B*T, d]` to encoder memory,
/// optionally linked. `spec.causal` is ignored.
pub fn linked_cross_attention<'g>(
    x: Var<'g>,
    tgt: SeqBatch,
    memory: &CrossMemory<'g>,
    p: &AttentionParams<Var<'g>>,
    link: Option<LinkInput<'g>>,
    layer: usize,
    spec: &AttnSpec<'_>,
) -> Result<(Var<'g>, AttentionRecord<'g>)> {
    let q = project_heads(x, tgt, p.w_q, spec.heads)?;
    let spec = AttnSpec {
        causal: false,
        ..*spec
    };
    attend(
        q,
        memory.keys,
        memory.values,
        p.w_o,
        tgt,
        memory.src_len,
        link,
        &spec,
        layer,
        AttnKind::Cross,
    )
}

/// `ReLU(x W_1ᵀ + b_1) W_2ᵀ + b_2` over rows of `x`.
pub fn ffn<'g>(x: Var<'g>, p: &FfnParams<Var<'g>>) -> Result<Var<'g>> {
    ffn_with_dropout::<rand_chacha::ChaCha8Rng>(x, p, 0.0, None)
}

/// [`ffn`] with dropout on the hidden activations when `rng` is given.
pub fn ffn_with_dropout<'g, R: Rng>(
    x: Var<'g>,
    p: &FfnParams<Var<'g>>,
    rate: f64,
    rng: Option<&mut R>,
) -> Result<Var<'g>> {
    let mut h = x.matmul_t(p.w1)?.add_row(p.b1)?.relu();
    if let Some(rng) = rng {
        h = h.dropout(rate, rng)?;
    }
    h.matmul_t(p.w2)?.add_row(p.b2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;

    fn attn_params<'g>(g: &'g Graph, d: usize, fill: impl Fn(usize) -> f64) -> AttentionParams<Var<'g>> {
        let mk = |off: usize| g.param(Tensor::from_fn(&[d, d], |i| fill(i + off)));
        AttentionParams {
            w_q: mk(0),
            w_k: mk(1000),
            w_v: mk(2000),
            w_o: mk(3000),
        }
    }

    #[test]
    fn one_hot_identity_logits_are_cooccurrence() {
        let g = Graph::new();
        // three positions over a 3-symbol alphabet: tokens 0, 2, 0
        let x = g.constant(Tensor::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0],
            vec![1.0, 0.0, 0.0],
        ]).unwrap());
        let eye = g.constant(Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
        let seq = SeqBatch::new(1, 3);
        let l = head_logits(x, seq, x, seq, eye, eye, 1, false).unwrap().value();
        assert_eq!(l.shape(), &[1, 3, 3]);
        assert_eq!(l.data(), &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn zero_key_weights_give_zero_logits() {
        let g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[4, 4], |i| (i as f64).sin()));
        let wq = g.constant(Tensor::from_fn(&[4, 4], |i| i as f64 * 0.1));
        let wk = g.constant(Tensor::zeros(&[4, 4]));
        let seq = SeqBatch::new(1, 4);
        let l = head_logits(x, seq, x, seq, wq, wk, 2, true).unwrap().value();
        assert!(l.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_lambda_is_bitwise_vanilla() {
        let g = Graph::new();
        let d = 4;
        let seq = SeqBatch::new(1, 3);
        let x = g.constant(Tensor::from_fn(&[3, d], |i| ((i * 7) as f64).cos()));
        let p = attn_params(&g, d, |i| ((i * 13) as f64).sin() * 0.5);
        let spec = AttnSpec {
            heads: 2,
            scale: true,
            causal: true,
            key_valid: None,
        };
        let (vanilla, _) = linked_self_attention(x, seq, &p, None, 1, &spec).unwrap();
        let prev = g.constant(Tensor::from_fn(&[2, 3, 3], |i| i as f64 - 4.0));
        let link = LinkInput {
            logits: prev,
            lambda: 0.0,
        };
        let (linked, rec) = linked_self_attention(x, seq, &p, Some(link), 1, &spec).unwrap();
        assert_eq!(vanilla.value().data(), linked.value().data());
        // causal: nothing above the diagonal
        let m = rec.probs_matrix(0, 1);
        assert_eq!(m[0][1], 0.0);
        assert_eq!(m[1][2], 0.0);
    }

    #[test]
    fn link_rejects_bad_shape_and_lambda() {
        let g = Graph::new();
        let seq = SeqBatch::new(1, 3);
        let x = g.constant(Tensor::from_fn(&[3, 4], |i| i as f64 * 0.1));
        let p = attn_params(&g, 4, |i| (i as f64).cos());
        let spec = AttnSpec {
            heads: 2,
            scale: true,
            causal: false,
            key_valid: None,
        };
        let bad = LinkInput {
            logits: g.constant(Tensor::zeros(&[2, 3, 2])),
            lambda: 1.0,
        };
        assert!(linked_self_attention(x, seq, &p, Some(bad), 1, &spec).is_err());
        let nan = LinkInput {
            logits: g.constant(Tensor::zeros(&[2, 3, 3])),
            lambda: f64::NAN,
        };
        assert!(linked_self_attention(x, seq, &p, Some(nan), 1, &spec).is_err());
    }

    #[test]
    fn single_source_position_attends_fully() {
        let g = Graph::new();
        let d = 4;
        let mem = g.constant(Tensor::from_fn(&[1, d], |i| i as f64));
        let x = g.constant(Tensor::from_fn(&[3, d], |i| (i as f64).sin()));
        let p = attn_params(&g, d, |i| ((i * 3) as f64).cos());
        let src = SeqBatch::new(1, 1);
        let memory = CrossMemory::project(mem, src, &p, 2).unwrap();
        let spec = AttnSpec {
            heads: 2,
            scale: true,
            causal: false,
            key_valid: None,
        };
        let link = LinkInput {
            logits: g.constant(Tensor::full(&[2, 3, 1], 5.0)),
            lambda: 1.0,
        };
        let (_, rec) =
            linked_cross_attention(x, SeqBatch::new(1, 3), &memory, &p, Some(link), 0, &spec)
                .unwrap();
        assert!(rec.probs.value().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn ffn_zero_weights_and_dead_relu() {
        let g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[2, 3], |i| i as f64 - 2.0));
        let p = FfnParams {
            w1: g.param(Tensor::zeros(&[4, 3])),
            b1: g.param(Tensor::full(&[4], -1.0)),
            w2: g.param(Tensor::zeros(&[3, 4])),
            b2: g.param(Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap()),
        };
        let y = ffn(x, &p).unwrap().value();
        assert_eq!(y.data(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
    }

    #[test]
    fn padding_keys_masked() {
        let mask = attention_mask(2, 1, 2, 3, Some(&[true, true, false, true, false, false]), false)
            .unwrap()
            .unwrap();
        assert_eq!(
            mask,
            vec![true, true, false, true, true, false, true, false, false, true, false, false]
        );
        assert!(attention_mask(1, 2, 2, 2, None, false).unwrap().is_none());
    }
}
