// One linked self-attention layer by hand: the previous layer's logits are
// scaled and added before the softmax. Prints both attention matrices for
// a few link scales.
//
//   cargo run --example attention_link -- [lambda]

use attnlink::attention::{linked_self_attention, AttnSpec, LinkInput, SeqBatch};
use attnlink::params::AttentionParams;
use attnlink::{Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn show(title: &str, rows: &[Vec<f64>]) {
    println!("{title}");
    for r in rows {
        let cells: Vec<String> = r.iter().map(|v| format!("{v:6.3}")).collect();
        println!("  [{}]", cells.join(" "));
    }
}

/// Returns the largest change in layer-two attention caused by the link.
pub fn run(args: &[String]) -> attnlink::Result<f64> {
    let lambda: f64 = args.first().and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let (len, d, heads) = (5, 8, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let g = Graph::new();
    let mut w = |rows, cols| g.constant(Tensor::uniform(&[rows, cols], 0.6, &mut rng));
    let layer1 = AttentionParams { w_q: w(d, d), w_k: w(d, d), w_v: w(d, d), w_o: w(d, d) };
    let layer2 = AttentionParams { w_q: w(d, d), w_k: w(d, d), w_v: w(d, d), w_o: w(d, d) };
    let x = w(len, d);

    let seq = SeqBatch::new(1, len);
    let spec = AttnSpec { heads, scale: true, causal: true, key_valid: None };
    let (h1, rec1) = linked_self_attention(x, seq, &layer1, None, 0, &spec)?;
    let h = x.add(h1)?;
    let (_, plain) = linked_self_attention(h, seq, &layer2, None, 1, &spec)?;
    let link = LinkInput::from_record(&rec1, lambda);
    let (_, linked) = linked_self_attention(h, seq, &layer2, Some(link), 1, &spec)?;

    show("layer 1, head 0", &rec1.probs_matrix(0, 0));
    show("layer 2, head 0, no link", &plain.probs_matrix(0, 0));
    show(&format!("layer 2, head 0, link scale {lambda}"), &linked.probs_matrix(0, 0));
    let gap = plain.probs.value().max_abs_diff(&linked.probs.value());
    println!("largest change in attention weight: {gap:.4}");
    Ok(gap)
}

#[allow(dead_code)]
fn main() -> attnlink::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    run(&args).map(|_| ())
}
