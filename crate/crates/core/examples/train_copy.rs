// Train a small model on the copy task and report held-out accuracy and
// BLEU.
//
//   cargo run --release --example train_copy -- [vanilla|linked] [n_pairs] [epochs]

use attnlink::data::{build_vocab, gen_toy_task, TaskKind, ToyTask};
use attnlink::eval::{corpus_bleu, translate};
use attnlink::train::{evaluate_examples, prepare, train, TrainConfig, TrainOptions};
use attnlink::{LinkPlacement, ModelConfig};

/// Returns (held-out token accuracy, held-out BLEU).
pub fn run(args: &[String]) -> attnlink::Result<(f64, f64)> {
    let placement = match args.first().map(String::as_str) {
        Some("linked") => LinkPlacement::Both,
        _ => LinkPlacement::None,
    };
    let n_pairs: usize = args.get(1).map_or(Ok(10_000), |s| s.parse()).map_err(|_| attnlink::Error::invalid("n_pairs"))?;
    let epochs: usize = args.get(2).map_or(Ok(10), |s| s.parse()).map_err(|_| attnlink::Error::invalid("epochs"))?;
    let held = (n_pairs / 20).clamp(1, 500);

    let task = ToyTask {
        kind: TaskKind::Copy,
        n_pairs: n_pairs + held,
        min_len: 5,
        max_len: 15,
        vocab_size: 32,
        seed: 11,
    };
    let (corpus, test) = gen_toy_task(&task)?.split_tail(held)?;
    let (sv, tv) = build_vocab(&corpus, 64)?;

    let mut model = ModelConfig::toy(64, 4, 2, sv.len()).with_placement(placement);
    model.tgt_vocab = tv.len();
    let cfg = TrainConfig {
        base_lr: 1e-3,
        warmup_steps: 400,
        max_tokens: 512,
        max_epochs: epochs,
        seed: 1,
        ..TrainConfig::default()
    };
    let out = train(&model, &cfg, &corpus, &sv, &tv, TrainOptions {
        verbose: true,
        ..Default::default()
    })?;

    let stats = evaluate_examples(&out.params, &model, &prepare(&test, &sv, &tv), 0.0, cfg.max_tokens)?;
    let acc = stats.correct as f64 / stats.tokens as f64;
    println!("held-out token accuracy {acc:.4}");

    let sources: Vec<_> = test.pairs.iter().map(|(s, _)| s.clone()).collect();
    let refs: Vec<_> = test.pairs.iter().map(|(_, t)| t.clone()).collect();
    let hyps = translate(&out.params, &model, &sv, &tv, &sources, 32)?;
    let bleu = corpus_bleu(&hyps, &refs)?.score;
    println!("held-out BLEU {bleu:.4}");
    Ok((acc, bleu))
}

#[allow(dead_code)]
fn main() -> attnlink::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    run(&args).map(|_| ())
}
