// Vanilla against linked on a small mapped-shuffle corpus (500 training
// pairs), scored by held-out BLEU.
//
//   cargo run --release --example low_resource -- [seed] [epochs]

use attnlink::data::{build_vocab, gen_toy_task, TaskKind, ToyTask};
use attnlink::eval::{corpus_bleu, translate};
use attnlink::train::{train, TrainConfig, TrainOptions};
use attnlink::{LinkPlacement, ModelConfig};

/// Returns (vanilla BLEU, linked BLEU).
pub fn run(args: &[String]) -> attnlink::Result<(f64, f64)> {
    let seed: u64 = args.first().and_then(|s| s.parse().ok()).unwrap_or(0);
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(60);
    let task = ToyTask {
        kind: TaskKind::mapped_shuffle(),
        n_pairs: 700,
        min_len: 5,
        max_len: 15,
        vocab_size: 32,
        seed: 100 + seed,
    };
    let (corpus, test) = gen_toy_task(&task)?.split_tail(200)?;
    let (sv, tv) = build_vocab(&corpus, 64)?;
    let sources: Vec<_> = test.pairs.iter().map(|p| p.0.clone()).collect();
    let refs: Vec<_> = test.pairs.iter().map(|p| p.1.clone()).collect();

    let mut scores = [0.0; 2];
    for (slot, placement) in [LinkPlacement::None, LinkPlacement::Both].into_iter().enumerate() {
        let mut model = ModelConfig::toy(64, 4, 2, sv.len()).with_placement(placement);
        model.tgt_vocab = tv.len();
        model.dropout = 0.1;
        let cfg = TrainConfig {
            base_lr: 1e-3,
            warmup_steps: 100,
            max_tokens: 512,
            max_epochs: epochs,
            seed,
            ..TrainConfig::default()
        };
        let out = train(&model, &cfg, &corpus, &sv, &tv, TrainOptions::default())?;
        let hyps = translate(&out.params, &model, &sv, &tv, &sources, 32)?;
        scores[slot] = corpus_bleu(&hyps, &refs)?.score;
        println!("{placement:?}: BLEU {:.4}", scores[slot]);
    }
    Ok((scores[0], scores[1]))
}

#[allow(dead_code)]
fn main() -> attnlink::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    run(&args).map(|_| ())
}
