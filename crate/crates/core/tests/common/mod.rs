//! Independent reference implementations and helpers shared by the
//! integration tests. Everything here is written with plain loops over
//! `Vec`s and does not call into the library's numeric code.

#![allow(dead_code)]

use std::collections::HashMap;

use attnlink::data::PAD;
use attnlink::model::{forward, Pass};
use attnlink::train::label_smoothed_xent;
use attnlink::{Graph, ModelConfig, ModelParams, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_mat(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

pub fn to_tensor(m: &Mat) -> Tensor {
    Tensor::from_rows(m).unwrap()
}

pub fn to_mat(t: &Tensor) -> Mat {
    let [r, c] = t.shape() else { panic!("not 2-D: {:?}", t.shape()) };
    (0..*r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

fn softmax_masked(row: &[f64], allowed: &[bool]) -> Vec<f64> {
    let max = row
        .iter()
        .zip(allowed)
        .filter(|(_, &a)| a)
        .map(|(v, _)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row
        .iter()
        .zip(allowed)
        .map(|(v, &a)| if a { (v - max).exp() } else { 0.0 })
        .collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Multi-head attention for one sequence, written as the textbook sums.
/// Weights: `w_q`, `w_k`, `w_v` are `[h*dh, d_x]` (head `h` owns rows
/// `h*dh..`), `w_o` is `[d, h*dv]`. `prev[h]` is the previous layer's
/// `[q, k]` logits for head `h`. Returns the output rows and each head's
/// own (unlinked) logits.
#[allow(clippy::too_many_arguments)]
pub fn oracle_attention(
    xq: &Mat,
    xk: &Mat,
    w_q: &Mat,
    w_k: &Mat,
    w_v: &Mat,
    w_o: &Mat,
    heads: usize,
    prev: Option<(&[Mat], f64)>,
    causal: bool,
    key_valid: Option<&[bool]>,
    scale: bool,
) -> (Mat, Vec<Mat>) {
    let (tq, tk) = (xq.len(), xk.len());
    let dqk = w_q.len() / heads;
    let dv = w_v.len() / heads;
    let dx = xq[0].len();
    let proj = |x: &Mat, w: &Mat, h: usize, dh: usize| -> Mat {
        x.iter()
            .map(|row| {
                (0..dh)
                    .map(|r| (0..dx).map(|c| row[c] * w[h * dh + r][c]).sum())
                    .collect()
            })
            .collect()
    };
    let mut concat = vec![vec![0.0; heads * dv]; tq];
    let mut own_logits = Vec::new();
    for h in 0..heads {
        let q = proj(xq, w_q, h, dqk);
        let k = proj(xk, w_k, h, dqk);
        let v = proj(xk, w_v, h, dv);
        let s = if scale { 1.0 / (dqk as f64).sqrt() } else { 1.0 };
        let mut own = vec![vec![0.0; tk]; tq];
        for i in 0..tq {
            for j in 0..tk {
                own[i][j] = s * (0..dqk).map(|r| q[i][r] * k[j][r]).sum::<f64>();
            }
        }
        for i in 0..tq {
            let mut total = own[i].clone();
            if let Some((p, lambda)) = prev {
                for j in 0..tk {
                    total[j] += lambda * p[h][i][j];
                }
            }
            let allowed: Vec<bool> = (0..tk)
                .map(|j| key_valid.is_none_or(|kv| kv[j]) && (!causal || j <= i))
                .collect();
            let pr = softmax_masked(&total, &allowed);
            for r in 0..dv {
                concat[i][h * dv + r] = (0..tk).map(|j| pr[j] * v[j][r]).sum();
            }
        }
        own_logits.push(own);
    }
    let d = w_o.len();
    let out = concat
        .iter()
        .map(|c| (0..d).map(|o| (0..c.len()).map(|r| c[r] * w_o[o][r]).sum()).collect())
        .collect();
    (out, own_logits)
}

/// `W2 · relu(W1 x + b1) + b2` per row.
pub fn oracle_ffn(x: &Mat, w1: &Mat, b1: &[f64], w2: &Mat, b2: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            let hidden: Vec<f64> = (0..w1.len())
                .map(|k| (b1[k] + (0..row.len()).map(|c| w1[k][c] * row[c]).sum::<f64>()).max(0.0))
                .collect();
            (0..w2.len())
                .map(|o| b2[o] + (0..hidden.len()).map(|k| w2[o][k] * hidden[k]).sum::<f64>())
                .collect()
        })
        .collect()
}

pub fn oracle_layer_norm(x: &Mat, gain: &[f64], bias: &[f64], eps: f64) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(i, v)| gain[i] * (v - mean) / (var + eps).sqrt() + bias[i])
                .collect()
        })
        .collect()
}

/// Corpus BLEU by direct enumeration: every hypothesis n-gram is counted by
/// scanning, and clipped against a scan of the reference.
pub fn oracle_bleu(hyps: &[Vec<String>], refs: &[Vec<String>]) -> (f64, [f64; 4], f64) {
    let mut num = [0usize; 4];
    let mut den = [0usize; 4];
    let (mut c, mut r) = (0usize, 0usize);
    for (h, rf) in hyps.iter().zip(refs) {
        c += h.len();
        r += rf.len();
        for n in 1..=4usize {
            if h.len() < n {
                continue;
            }
            let grams: Vec<&[String]> = h.windows(n).collect();
            let mut seen: Vec<&[String]> = Vec::new();
            for g in &grams {
                den[n - 1] += 1;
                if seen.contains(g) {
                    continue;
                }
                seen.push(g);
                let in_h = grams.iter().filter(|x| *x == g).count();
                let in_r = if rf.len() >= n {
                    rf.windows(n).filter(|x| x == g).count()
                } else {
                    0
                };
                num[n - 1] += in_h.min(in_r);
            }
        }
    }
    let mut p = [0.0; 4];
    for n in 0..4 {
        p[n] = if den[n] == 0 { 0.0 } else { num[n] as f64 / den[n] as f64 };
    }
    let bp = if c == 0 {
        0.0
    } else if c < r {
        (1.0 - r as f64 / c as f64).exp()
    } else {
        1.0
    };
    let score = if p.contains(&0.0) {
        0.0
    } else {
        bp * ((p[0].ln() + p[1].ln() + p[2].ln() + p[3].ln()) / 4.0).exp()
    };
    (score, p, bp)
}

/// Random corpus over a small alphabet so n-grams repeat.
pub fn random_corpus(rng: &mut ChaCha8Rng, max_sents: usize, max_len: usize) -> (Vec<Vec<String>>, Vec<Vec<String>>) {
    let n = rng.random_range(1..=max_sents);
    let sent = |rng: &mut ChaCha8Rng| -> Vec<String> {
        let len = rng.random_range(0..=max_len);
        (0..len).map(|_| format!("t{}", rng.random_range(0..4))).collect()
    };
    let hyps = (0..n).map(|_| sent(rng)).collect();
    let refs = (0..n).map(|_| sent(rng)).collect();
    (hyps, refs)
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

pub const REL_FLOOR: f64 = 1e-6;

/// Eval-mode label-smoothed loss of a fixed batch.
pub fn model_loss(params: &ModelParams, cfg: &ModelConfig, src: &[Vec<usize>], tgt_in: &[Vec<usize>], targets: &[usize]) -> f64 {
    let g = Graph::new();
    let p = params.bind_frozen(&g);
    let f = forward(&p, cfg, src, tgt_in, &mut Pass::eval()).unwrap();
    label_smoothed_xent(f.logits, targets, PAD, 0.1).unwrap().value().item()
}

pub fn model_grads(params: &ModelParams, cfg: &ModelConfig, src: &[Vec<usize>], tgt_in: &[Vec<usize>], targets: &[usize]) -> ModelParams {
    let g = Graph::new();
    let p = params.bind(&g);
    let f = forward(&p, cfg, src, tgt_in, &mut Pass::eval()).unwrap();
    let loss = label_smoothed_xent(f.logits, targets, PAD, 0.1).unwrap();
    g.backward(loss).unwrap();
    p.grads()
}

/// Worst relative error over every scalar parameter, central differences.
pub fn full_model_gradcheck(cfg: &ModelConfig, seed: u64, len: usize, step: f64) -> (f64, String, usize) {
    let params = ModelParams::init(cfg, seed).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    let seq = |r: &mut ChaCha8Rng, vocab: usize| -> Vec<usize> { (0..len).map(|_| r.random_range(4..vocab)).collect() };
    let src = vec![seq(&mut r, cfg.src_vocab), seq(&mut r, cfg.src_vocab)];
    let tgt_in = vec![seq(&mut r, cfg.tgt_vocab), seq(&mut r, cfg.tgt_vocab)];
    let targets: Vec<usize> = (0..2 * len).map(|_| r.random_range(4..cfg.tgt_vocab)).collect();

    let grads = model_grads(&params, cfg, &src, &tgt_in, &targets);
    let analytic: HashMap<String, Vec<f64>> = grads
        .named()
        .into_iter()
        .map(|(n, t)| (n, t.data().to_vec()))
        .collect();
    let mut worst = (0.0, String::new(), 0usize);
    let mut probe = params.clone();
    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    let mut checked = 0;
    for (slot, name) in names.iter().enumerate() {
        let a = &analytic[name];
        for (i, &ai) in a.iter().enumerate() {
            let orig = params.named()[slot].1.data()[i];
            set_param(&mut probe, slot, i, orig + step);
            let up = model_loss(&probe, cfg, &src, &tgt_in, &targets);
            set_param(&mut probe, slot, i, orig - step);
            let down = model_loss(&probe, cfg, &src, &tgt_in, &targets);
            set_param(&mut probe, slot, i, orig);
            let numeric = (up - down) / (2.0 * step);
            let e = rel_err(ai, numeric, REL_FLOOR);
            if e > worst.0 {
                worst = (e, format!("{name}[{i}] analytic {ai} numeric {numeric}"), 0);
            }
            checked += 1;
        }
    }
    worst.2 = checked;
    worst
}

pub fn set_param(p: &mut ModelParams, slot: usize, i: usize, v: f64) {
    p.named_mut()[slot].1.data_mut()[i] = v;
}
