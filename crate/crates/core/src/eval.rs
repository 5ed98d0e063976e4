//! Greedy decoding, corpus BLEU, attention entropy and attention dumps.

use std::collections::HashMap;
use std::fs;
use std::hash::Hash;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionRecord, AttnKind};
use crate::config::ModelConfig;
use crate::data::{Corpus, Sentence, Vocab, BOS, EOS};
use crate::error::{Error, Result};
use crate::model::{decode, encode, forward, Pass};
use crate::params::ModelParams;
use crate::tensor::Graph;
use crate::train::{argmax, source_ids};

/// Sentences decoded together per graph.
const DECODE_BATCH: usize = 64;

/// Greedy decoding of one source (model ids, normally ending in `EOS`).
/// Returns at most `max_len` tokens, without `BOS`/`EOS`.
pub fn greedy_decode(params: &ModelParams, cfg: &ModelConfig, src_ids: &[usize], max_len: usize) -> Result<Vec<usize>> {
    Ok(greedy_decode_batch(params, cfg, &[src_ids.to_vec()], max_len)?.remove(0))
}

/// [`greedy_decode`] for many sources; same output as one at a time.
pub fn greedy_decode_batch(
    params: &ModelParams,
    cfg: &ModelConfig,
    srcs: &[Vec<usize>],
    max_len: usize,
) -> Result<Vec<Vec<usize>>> {
    if max_len == 0 {
        return Err(Error::invalid("max_len must be at least 1"));
    }
    // Decoder input is BOS plus the generated prefix.
    let steps = max_len.min(cfg.max_len.saturating_sub(1)).max(1);
    let mut out = Vec::with_capacity(srcs.len());
    for chunk in srcs.chunks(DECODE_BATCH) {
        let g = Graph::new();
        let p = params.bind_frozen(&g);
        let enc = encode(&p, cfg, chunk, &mut Pass::eval())?;
        let mut prefixes: Vec<Vec<usize>> = vec![vec![BOS]; chunk.len()];
        let mut done = vec![false; chunk.len()];
        for _ in 0..steps {
            if done.iter().all(|&d| d) {
                break;
            }
            let f = decode(&p, cfg, &enc, &prefixes, &mut Pass::eval())?;
            let logits = f.logits.value();
            let t = f.tgt.len;
            for (b, prefix) in prefixes.iter_mut().enumerate() {
                let next = if done[b] { EOS } else { argmax(logits.row(b * t + t - 1)) };
                done[b] |= next == EOS;
                prefix.push(next);
            }
        }
        for prefix in prefixes {
            out.push(prefix[1..].iter().copied().take_while(|&t| t != EOS).collect());
        }
    }
    Ok(out)
}

/// Tokenized source → tokenized hypothesis.
pub fn translate(
    params: &ModelParams,
    cfg: &ModelConfig,
    src_vocab: &Vocab,
    tgt_vocab: &Vocab,
    sentences: &[Sentence],
    max_len: usize,
) -> Result<Vec<Sentence>> {
    let srcs: Vec<Vec<usize>> = sentences.iter().map(|s| source_ids(s, src_vocab)).collect();
    Ok(greedy_decode_batch(params, cfg, &srcs, max_len)?
        .iter()
        .map(|ids| tgt_vocab.decode(ids))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BleuBreakdown {
    /// Modified n-gram precisions, n = 1..=4.
    pub precisions: [f64; 4],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
    /// Clipped matches and hypothesis n-gram totals per order.
    pub matches: [usize; 4],
    pub totals: [usize; 4],
    pub score: f64,
}

#[derive(Serialize)]
struct BleuReport {
    p1: f64,
    p2: f64,
    p3: f64,
    p4: f64,
    bp: f64,
    score: f64,
}

impl BleuBreakdown {
    /// `{p1, p2, p3, p4, bp, score}`.
    pub fn report_json(&self) -> serde_json::Value {
        let [p1, p2, p3, p4] = self.precisions;
        serde_json::to_value(BleuReport {
            p1,
            p2,
            p3,
            p4,
            bp: self.brevity_penalty,
            score: self.score,
        })
        .expect("plain struct")
    }
}

fn ngram_counts<T: Eq + Hash>(s: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if s.len() >= n {
        for w in s.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU with one reference per hypothesis, no smoothing, in [0, 1].
/// An order with no hypothesis n-grams has precision 0.
pub fn corpus_bleu<T: Eq + Hash>(hypotheses: &[Vec<T>], references: &[Vec<T>]) -> Result<BleuBreakdown> {
    if hypotheses.is_empty() {
        return Err(Error::invalid("BLEU needs at least one sentence"));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::invalid(format!(
            "{} hypotheses but {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut c, mut r) = (0, 0);
    for (h, rf) in hypotheses.iter().zip(references) {
        c += h.len();
        r += rf.len();
        for n in 1..=4 {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(rf, n);
            for (g, k) in &hc {
                matches[n - 1] += (*k).min(rc.get(g).copied().unwrap_or(0));
                totals[n - 1] += k;
            }
        }
    }
    let mut precisions = [0.0; 4];
    for n in 0..4 {
        if totals[n] > 0 {
            precisions[n] = matches[n] as f64 / totals[n] as f64;
        }
    }
    let bp = if c == 0 {
        0.0
    } else if c < r {
        (1.0 - r as f64 / c as f64).exp()
    } else {
        1.0
    };
    let score = if precisions.contains(&0.0) {
        0.0
    } else {
        bp * (precisions.iter().map(|p| p.ln()).sum::<f64>() / 4.0).exp()
    };
    Ok(BleuBreakdown {
        precisions,
        brevity_penalty: bp,
        hyp_len: c,
        ref_len: r,
        matches,
        totals,
        score,
    })
}

/// Which stack an attention map came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stack {
    Encoder,
    Decoder,
}

/// One head's attention matrix for one sentence, trimmed to real positions.
/// Rows are queries. Causal maps keep their zero upper triangle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    pub stack: Stack,
    pub kind: AttnKind,
    #[serde(rename = "index")]
    pub layer: usize,
    pub head: usize,
    pub causal: bool,
    pub matrix: Vec<Vec<f64>>,
}

impl AttentionMap {
    /// Number of columns row `i` may attend to.
    pub fn row_support(&self, i: usize) -> usize {
        if self.causal {
            i + 1
        } else {
            self.matrix[i].len()
        }
    }
}

fn trim(
    rec: &AttentionRecord<'_>,
    stack: Stack,
    b: usize,
    q_real: usize,
    k_real: usize,
    out: &mut Vec<AttentionMap>,
) {
    for head in 0..rec.heads {
        let m = rec.probs_matrix(b, head);
        out.push(AttentionMap {
            stack,
            kind: rec.kind,
            layer: rec.layer,
            head,
            causal: rec.causal,
            matrix: m[..q_real].iter().map(|row| row[..k_real].to_vec()).collect(),
        });
    }
}

/// Teacher-forced attention maps for each pair, one `Vec` per sentence.
/// Sources get `EOS` appended; target queries are `BOS` plus the reference.
pub fn collect_attention(
    params: &ModelParams,
    cfg: &ModelConfig,
    pairs: &[(Vec<usize>, Vec<usize>)],
) -> Result<Vec<Vec<AttentionMap>>> {
    let mut all = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(DECODE_BATCH) {
        let src: Vec<Vec<usize>> = chunk.iter().map(|(s, _)| s.clone()).collect();
        let tgt: Vec<Vec<usize>> = chunk.iter().map(|(_, t)| t.clone()).collect();
        let g = Graph::new();
        let p = params.bind_frozen(&g);
        let f = forward(&p, cfg, &src, &tgt, &mut Pass::eval())?;
        for b in 0..chunk.len() {
            let (s, t) = (src[b].len(), tgt[b].len());
            let mut maps = Vec::new();
            for rec in &f.encoder_records {
                trim(rec, Stack::Encoder, b, s, s, &mut maps);
            }
            for (sr, cr) in f.decoder_self_records.iter().zip(&f.cross_records) {
                trim(sr, Stack::Decoder, b, t, t, &mut maps);
                trim(cr, Stack::Decoder, b, t, s, &mut maps);
            }
            all.push(maps);
        }
    }
    Ok(all)
}

/// Token pairs in model ids, ready for [`collect_attention`].
pub fn attention_inputs(corpus: &Corpus, src_vocab: &Vocab, tgt_vocab: &Vocab) -> Vec<(Vec<usize>, Vec<usize>)> {
    corpus
        .pairs
        .iter()
        .map(|(s, t)| {
            let mut tgt = vec![BOS];
            tgt.extend(tgt_vocab.encode(t));
            (source_ids(s, src_vocab), tgt)
        })
        .collect()
}

/// Shannon entropy over `log(support)`; `None` when the support is one column.
pub fn normalized_row_entropy(row: &[f64], support: usize) -> Option<f64> {
    if support <= 1 {
        return None;
    }
    let h: f64 = row[..support]
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum();
    Some((h / (support as f64).ln()).clamp(0.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyEntry {
    pub stack: Stack,
    pub kind: AttnKind,
    pub layer: usize,
    pub head: usize,
    /// Mean over sentences of the per-sentence mean row entropy.
    pub mean_normalized_entropy: f64,
    pub rows: usize,
    /// Rows with a single admissible column, counted as entropy 1.
    pub trivial_rows: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    pub sentences: usize,
    pub entries: Vec<EntropyEntry>,
}

impl EntropyReport {
    /// Mean over entries matching `stack` and `kind`.
    pub fn mean(&self, stack: Stack, kind: AttnKind) -> Option<f64> {
        let v: Vec<f64> = self
            .entries
            .iter()
            .filter(|e| e.stack == stack && e.kind == kind)
            .map(|e| e.mean_normalized_entropy)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn trivial_rows(&self) -> usize {
        self.entries.iter().map(|e| e.trivial_rows).sum()
    }
}

/// Normalized attention entropy per (stack, kind, layer, head), from the
/// per-sentence maps of [`collect_attention`].
pub fn attention_entropy(sentences: &[Vec<AttentionMap>]) -> Result<EntropyReport> {
    if sentences.iter().all(|s| s.is_empty()) {
        return Err(Error::invalid("no attention maps to summarize"));
    }
    type Key = (Stack, u8, usize, usize);
    let kind_key = |k: AttnKind| match k {
        AttnKind::SelfAttn => 0u8,
        AttnKind::Cross => 1,
    };
    let mut acc: std::collections::BTreeMap<Key, (AttnKind, f64, usize, usize, usize)> = Default::default();
    for maps in sentences {
        for m in maps {
            let mut sum = 0.0;
            let mut trivial = 0;
            for (i, row) in m.matrix.iter().enumerate() {
                match normalized_row_entropy(row, m.row_support(i)) {
                    Some(h) => sum += h,
                    None => {
                        sum += 1.0;
                        trivial += 1;
                    }
                }
            }
            let rows = m.matrix.len();
            let e = acc
                .entry((m.stack, kind_key(m.kind), m.layer, m.head))
                .or_insert((m.kind, 0.0, 0, 0, 0));
            e.1 += sum / rows as f64;
            e.2 += 1;
            e.3 += rows;
            e.4 += trivial;
        }
    }
    let entries = acc
        .into_iter()
        .map(|((stack, _, layer, head), (kind, s, n, rows, trivial))| EntropyEntry {
            stack,
            kind,
            layer,
            head,
            mean_normalized_entropy: s / n as f64,
            rows,
            trivial_rows: trivial,
        })
        .collect();
    Ok(EntropyReport {
        sentences: sentences.len(),
        entries,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionDump {
    pub model: ModelConfig,
    pub tokens_src: Vec<String>,
    pub tokens_tgt: Vec<String>,
    pub layers: Vec<AttentionMap>,
}

impl AttentionDump {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }
}

/// Writes every attention matrix of one teacher-forced pair as JSON.
/// `tokens_src` ends with `<eos>`, `tokens_tgt` starts with `<bos>`.
pub fn dump_attention(
    params: &ModelParams,
    cfg: &ModelConfig,
    src_vocab: &Vocab,
    tgt_vocab: &Vocab,
    pair: &(Sentence, Sentence),
    path: &Path,
) -> Result<AttentionDump> {
    let corpus = Corpus::new(vec![pair.clone()], "dump")?;
    let inputs = attention_inputs(&corpus, src_vocab, tgt_vocab);
    let layers = collect_attention(params, cfg, &inputs)?.remove(0);
    let (s, t) = &inputs[0];
    let dump = AttentionDump {
        model: cfg.clone(),
        tokens_src: src_vocab.decode(s),
        tokens_tgt: tgt_vocab.decode(t),
        layers,
    };
    fs::write(path, serde_json::to_string_pretty(&dump)?).map_err(|e| Error::io(path, e))?;
    Ok(dump)
}
