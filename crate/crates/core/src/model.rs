//! Encoder-decoder assembly: embeddings, sinusoidal positions, post-norm
//! residual sublayers, link wiring per [`LinkPlacement`], output projection.
//!
//! [`LinkPlacement`]: crate::config::LinkPlacement

use rand_chacha::ChaCha8Rng;

use crate::attention::{
    head_logits, linked_cross_attention, linked_self_attention, logits_from_heads,
    project_heads, AttentionRecord, AttnSpec, CrossMemory, LinkInput, SeqBatch,
};
use crate::attention::ffn_with_dropout;
use crate::config::{LinkSource, ModelConfig};
use crate::data::PAD;
use crate::error::{Error, Result};
use crate::params::{AttentionParams, Params};
use crate::tensor::{Graph, Tensor, Var};

/// How a pass runs: dropout stream (train mode) and the zero-link override.
#[derive(Default)]
pub struct Pass<'r> {
    dropout_rng: Option<&'r mut ChaCha8Rng>,
    zero_link: bool,
}

impl<'r> Pass<'r> {
    /// Deterministic, no dropout.
    pub fn eval() -> Self {
        Self::default()
    }

    /// Dropout drawn from `rng`.
    pub fn train(rng: &'r mut ChaCha8Rng) -> Self {
        Self {
            dropout_rng: Some(rng),
            zero_link: false,
        }
    }

    /// Replace every link term with zeros while keeping the link wiring.
    pub fn with_zero_link(mut self) -> Self {
        self.zero_link = true;
        self
    }

    fn dropout<'g>(&mut self, x: Var<'g>, rate: f64) -> Result<Var<'g>> {
        match self.dropout_rng.as_deref_mut() {
            Some(rng) if rate > 0.0 => x.dropout(rate, rng),
            _ => Ok(x),
        }
    }
}

/// Sinusoidal encoding: `sin(pos / 10000^(2i/d))` at even columns `2i`,
/// `cos` of the same angle at `2i + 1`.
pub fn positional_encoding(len: usize, d: usize) -> Tensor {
    Tensor::from_fn(&[len, d], |flat| {
        let (pos, col) = (flat / d, flat % d);
        let pair = (col / 2) * 2;
        let angle = pos as f64 / 10000f64.powf(pair as f64 / d as f64);
        if col % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Right-pads sequences with `PAD`. Returns flat ids, the batch shape and
/// per-position validity flags.
pub fn pad_batch(seqs: &[Vec<usize>]) -> Result<(Vec<usize>, SeqBatch, Vec<bool>)> {
    if seqs.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if let Some(i) = seqs.iter().position(Vec::is_empty) {
        return Err(Error::invalid(format!("sequence {i} in batch is empty")));
    }
    let len = seqs.iter().map(Vec::len).max().unwrap();
    let mut ids = Vec::with_capacity(seqs.len() * len);
    let mut valid = Vec::with_capacity(seqs.len() * len);
    for s in seqs {
        ids.extend_from_slice(s);
        valid.extend(std::iter::repeat_n(true, s.len()));
        ids.extend(std::iter::repeat_n(PAD, len - s.len()));
        valid.extend(std::iter::repeat_n(false, len - s.len()));
    }
    Ok((ids, SeqBatch::new(seqs.len(), len), valid))
}

fn check_ids(seqs: &[Vec<usize>], vocab: usize, max_len: usize, side: &str) -> Result<()> {
    for (i, s) in seqs.iter().enumerate() {
        if s.len() > max_len {
            return Err(Error::invalid(format!(
                "{side} sequence {i} has length {} > max_len {max_len}",
                s.len()
            )));
        }
        if let Some(&bad) = s.iter().find(|&&t| t >= vocab) {
            return Err(Error::invalid(format!(
                "{side} sequence {i} has id {bad} outside vocabulary of {vocab}"
            )));
        }
    }
    Ok(())
}

fn embed<'g>(table: Var<'g>, ids: &[usize], seq: SeqBatch, d: usize) -> Result<Var<'g>> {
    let g = table.graph();
    let pe = positional_encoding(seq.len, d);
    let mut pos = Vec::with_capacity(seq.rows() * d);
    for _ in 0..seq.batch {
        pos.extend_from_slice(pe.data());
    }
    let pos = g.constant(Tensor::new(vec![seq.rows(), d], pos)?);
    table
        .gather_rows(ids)?
        .scale((d as f64).sqrt())
        .add(pos)
}

/// Encoder output plus everything the decoder needs from it.
pub struct Encoded<'g> {
    pub src: SeqBatch,
    pub key_valid: Vec<bool>,
    /// Final encoder states, `[B*S, d]`.
    pub memory: Var<'g>,
    /// Per decoder layer, that layer's key/value projections of `memory`.
    pub cross: Vec<CrossMemory<'g>>,
    pub records: Vec<AttentionRecord<'g>>,
}

pub struct Forward<'g> {
    /// `[B*T, tgt_vocab]`.
    pub logits: Var<'g>,
    pub tgt: SeqBatch,
    pub tgt_valid: Vec<bool>,
    pub encoder_records: Vec<AttentionRecord<'g>>,
    pub decoder_self_records: Vec<AttentionRecord<'g>>,
    pub cross_records: Vec<AttentionRecord<'g>>,
}

fn self_link<'g>(
    cfg: &ModelConfig,
    x: Var<'g>,
    seq: SeqBatch,
    prev_record: Option<&AttentionRecord<'g>>,
    prev_params: Option<&AttentionParams<Var<'g>>>,
    zero: bool,
) -> Result<Option<LinkInput<'g>>> {
    let (Some(rec), Some(pp)) = (prev_record, prev_params) else {
        return Ok(None);
    };
    let link = match cfg.link_source {
        LinkSource::Cached => LinkInput::from_record(rec, cfg.link_scale),
        LinkSource::Reprojected => LinkInput {
            logits: head_logits(x, seq, x, seq, pp.w_q, pp.w_k, cfg.heads, cfg.scale_logits)?,
            lambda: cfg.link_scale,
        },
    };
    Ok(Some(if zero { link.zeroed() } else { link }))
}

/// Runs the encoder stack over source id sequences.
pub fn encode<'g>(
    p: &Params<Var<'g>>,
    cfg: &ModelConfig,
    src: &[Vec<usize>],
    pass: &mut Pass<'_>,
) -> Result<Encoded<'g>> {
    cfg.validate()?;
    check_ids(src, cfg.src_vocab, cfg.max_len, "source")?;
    let (ids, seq, key_valid) = pad_batch(src)?;
    let mut x = embed(p.src_embed, &ids, seq, cfg.d)?;
    let mut records: Vec<AttentionRecord<'g>> = Vec::with_capacity(p.encoder.len());
    for (n, layer) in p.encoder.iter().enumerate() {
        let linked = cfg.link_placement.encoder() && n > 0;
        let link = if linked {
            self_link(
                cfg,
                x,
                seq,
                records.last(),
                Some(&p.encoder[n - 1].self_attn),
                pass.zero_link,
            )?
        } else {
            None
        };
        let spec = AttnSpec {
            heads: cfg.heads,
            scale: cfg.scale_logits,
            causal: false,
            key_valid: Some(&key_valid),
        };
        let (a, rec) = linked_self_attention(x, seq, &layer.self_attn, link, n, &spec)?;
        records.push(rec);
        let a = pass.dropout(a, cfg.dropout)?;
        x = x.add(a)?.layer_norm(layer.norm1.gain, layer.norm1.bias)?;
        let rate = cfg.dropout;
        let f = ffn_with_dropout(x, &layer.ffn, rate, pass.dropout_rng.as_deref_mut())?;
        x = x.add(f)?.layer_norm(layer.norm2.gain, layer.norm2.bias)?;
    }
    let cross = p
        .decoder
        .iter()
        .map(|l| CrossMemory::project(x, seq, &l.cross_attn, cfg.heads))
        .collect::<Result<_>>()?;
    Ok(Encoded {
        src: seq,
        key_valid,
        memory: x,
        cross,
        records,
    })
}

/// Runs the decoder over teacher-forced target inputs (each starting with
/// `BOS`) against an encoded batch.
pub fn decode<'g>(
    p: &Params<Var<'g>>,
    cfg: &ModelConfig,
    enc: &Encoded<'g>,
    tgt_in: &[Vec<usize>],
    pass: &mut Pass<'_>,
) -> Result<Forward<'g>> {
    check_ids(tgt_in, cfg.tgt_vocab, cfg.max_len, "target")?;
    if tgt_in.len() != enc.src.batch {
        return Err(Error::invalid(format!(
            "{} target sequences for {} sources",
            tgt_in.len(),
            enc.src.batch
        )));
    }
    let (ids, seq, tgt_valid) = pad_batch(tgt_in)?;
    let mut x = embed(p.tgt_embed, &ids, seq, cfg.d)?;
    let linked = cfg.link_placement.decoder();
    let mut self_records: Vec<AttentionRecord<'g>> = Vec::with_capacity(p.decoder.len());
    let mut cross_records: Vec<AttentionRecord<'g>> = Vec::with_capacity(p.decoder.len());
    for (n, layer) in p.decoder.iter().enumerate() {
        let has_prev = linked && n > 0;

        // Target padding sits after every real position, so the causal mask
        // already keeps real queries off padded keys.
        let spec = AttnSpec {
            heads: cfg.heads,
            scale: cfg.scale_logits,
            causal: true,
            key_valid: None,
        };
        let link = if has_prev {
            self_link(
                cfg,
                x,
                seq,
                self_records.last(),
                Some(&p.decoder[n - 1].self_attn),
                pass.zero_link,
            )?
        } else {
            None
        };
        let (a, rec) = linked_self_attention(x, seq, &layer.self_attn, link, n, &spec)?;
        self_records.push(rec);
        let a = pass.dropout(a, cfg.dropout)?;
        x = x.add(a)?.layer_norm(layer.norm1.gain, layer.norm1.bias)?;

        let spec = AttnSpec {
            heads: cfg.heads,
            scale: cfg.scale_logits,
            causal: false,
            key_valid: Some(&enc.key_valid),
        };
        let link = if has_prev {
            let l = match cfg.link_source {
                LinkSource::Cached => LinkInput::from_record(&cross_records[n - 1], cfg.link_scale),
                LinkSource::Reprojected => {
                    let q = project_heads(x, seq, p.decoder[n - 1].cross_attn.w_q, cfg.heads)?;
                    LinkInput {
                        logits: logits_from_heads(q, enc.cross[n - 1].keys, cfg.scale_logits)?,
                        lambda: cfg.link_scale,
                    }
                }
            };
            Some(if pass.zero_link { l.zeroed() } else { l })
        } else {
            None
        };
        let (a, rec) =
            linked_cross_attention(x, seq, &enc.cross[n], &layer.cross_attn, link, n, &spec)?;
        cross_records.push(rec);
        let a = pass.dropout(a, cfg.dropout)?;
        x = x.add(a)?.layer_norm(layer.norm2.gain, layer.norm2.bias)?;

        let rate = cfg.dropout;
        let f = ffn_with_dropout(x, &layer.ffn, rate, pass.dropout_rng.as_deref_mut())?;
        x = x.add(f)?.layer_norm(layer.norm3.gain, layer.norm3.bias)?;
    }
    let logits = x.matmul_t(p.out_proj)?;
    Ok(Forward {
        logits,
        tgt: seq,
        tgt_valid,
        encoder_records: enc.records.clone(),
        decoder_self_records: self_records,
        cross_records,
    })
}

/// [`encode`] then [`decode`].
pub fn forward<'g>(
    p: &Params<Var<'g>>,
    cfg: &ModelConfig,
    src: &[Vec<usize>],
    tgt_in: &[Vec<usize>],
    pass: &mut Pass<'_>,
) -> Result<Forward<'g>> {
    let enc = encode(p, cfg, src, pass)?;
    decode(p, cfg, &enc, tgt_in, pass)
}

/// Eval-mode logits for one pair as an owned `[T, tgt_vocab]` tensor.
pub fn eval_logits(
    params: &crate::params::ModelParams,
    cfg: &ModelConfig,
    src: &[usize],
    tgt_in: &[usize],
) -> Result<Tensor> {
    let g = Graph::new();
    let p = params.bind_frozen(&g);
    let out = forward(&p, cfg, &[src.to_vec()], &[tgt_in.to_vec()], &mut Pass::eval())?;
    let v = out.logits.value();
    Ok((*v).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::LinkPlacement;
    use crate::params::ModelParams;

    #[test]
    fn positional_row_zero() {
        let pe = positional_encoding(3, 6);
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!((pe.at(&[1, 2]) - (1.0 / 10000f64.powf(2.0 / 6.0)).sin()).abs() < 1e-15);
        assert!((pe.at(&[2, 1]) - 2.0f64.cos()).abs() < 1e-15);
    }

    #[test]
    fn length_one_source_attends_to_itself() {
        let cfg = ModelConfig::toy(8, 2, 2, 12).with_placement(LinkPlacement::Both);
        let params = ModelParams::init(&cfg, 1).unwrap();
        let g = Graph::new();
        let p = params.bind_frozen(&g);
        let enc = encode(&p, &cfg, &[vec![5]], &mut Pass::eval()).unwrap();
        for rec in &enc.records {
            assert_eq!(rec.probs.value().data(), &[1.0, 1.0]);
        }
    }

    #[test]
    fn rejects_bad_ids_and_lengths() {
        let cfg = ModelConfig::toy(8, 2, 1, 12);
        let params = ModelParams::init(&cfg, 1).unwrap();
        let g = Graph::new();
        let p = params.bind_frozen(&g);
        assert!(encode(&p, &cfg, &[vec![12]], &mut Pass::eval()).is_err());
        assert!(encode(&p, &cfg, &[vec![4; 65]], &mut Pass::eval()).is_err());
        assert!(encode(&p, &cfg, &[vec![]], &mut Pass::eval()).is_err());
    }

    #[test]
    fn eval_is_deterministic() {
        let mut cfg = ModelConfig::toy(8, 2, 2, 12).with_placement(LinkPlacement::Both);
        cfg.dropout = 0.3;
        let params = ModelParams::init(&cfg, 3).unwrap();
        let a = eval_logits(&params, &cfg, &[4, 5, 6], &[2, 7, 8]).unwrap();
        let b = eval_logits(&params, &cfg, &[4, 5, 6], &[2, 7, 8]).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn padding_does_not_change_real_positions() {
        let cfg = ModelConfig::toy(8, 2, 2, 12).with_placement(LinkPlacement::Both);
        let params = ModelParams::init(&cfg, 4).unwrap();
        let alone = eval_logits(&params, &cfg, &[4, 5], &[2, 9]).unwrap();
        let g = Graph::new();
        let p = params.bind_frozen(&g);
        let out = forward(
            &p,
            &cfg,
            &[vec![4, 5], vec![6, 7, 8, 9]],
            &[vec![2, 9], vec![2, 5, 5, 5]],
            &mut Pass::eval(),
        )
        .unwrap();
        let batched = out.logits.value();
        let v = cfg.tgt_vocab;
        for t in 0..2 {
            for j in 0..v {
                let a = alone.at(&[t, j]);
                let b = batched.at(&[t, j]);
                assert!((a - b).abs() < 1e-12, "t={t} j={j}: {a} vs {b}");
            }
        }
    }
}
