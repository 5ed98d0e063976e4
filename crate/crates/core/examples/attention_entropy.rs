// Normalized attention entropy per layer and head for a model trained
// briefly on the reverse task, plus a JSON dump of one sentence's maps.
//
//   cargo run --release --example attention_entropy -- [epochs] [dump.json]

use attnlink::attention::AttnKind;
use attnlink::data::{build_vocab, gen_toy_task, TaskKind, ToyTask};
use attnlink::eval::{attention_entropy, attention_inputs, collect_attention, dump_attention, EntropyReport, Stack};
use attnlink::train::{train, TrainConfig, TrainOptions};
use attnlink::{LinkPlacement, ModelConfig};

pub fn run(args: &[String]) -> attnlink::Result<EntropyReport> {
    let epochs = args.first().and_then(|s| s.parse().ok()).unwrap_or(8);
    let task = ToyTask { kind: TaskKind::Reverse, n_pairs: 2100, min_len: 4, max_len: 10, vocab_size: 16, seed: 2 };
    let (corpus, test) = gen_toy_task(&task)?.split_tail(100)?;
    let (sv, tv) = build_vocab(&corpus, 64)?;
    let mut model = ModelConfig::toy(32, 4, 2, sv.len()).with_placement(LinkPlacement::Both);
    model.tgt_vocab = tv.len();
    let cfg = TrainConfig { base_lr: 2e-3, warmup_steps: 100, max_tokens: 512, max_epochs: epochs, ..TrainConfig::default() };
    let out = train(&model, &cfg, &corpus, &sv, &tv, TrainOptions::default())?;

    let maps = collect_attention(&out.params, &model, &attention_inputs(&test, &sv, &tv))?;
    let report = attention_entropy(&maps)?;
    for e in &report.entries {
        println!("{:?} {:?} layer {} head {}: {:.4}", e.stack, e.kind, e.layer, e.head, e.mean_normalized_entropy);
    }
    for (stack, kind) in [
        (Stack::Encoder, AttnKind::SelfAttn),
        (Stack::Decoder, AttnKind::SelfAttn),
        (Stack::Decoder, AttnKind::Cross),
    ] {
        println!("mean {stack:?} {kind:?}: {:.4}", report.mean(stack, kind).unwrap_or(f64::NAN));
    }
    println!("{} single-key rows counted as entropy 1", report.trivial_rows());

    if let Some(path) = args.get(1) {
        let dump = dump_attention(&out.params, &model, &sv, &tv, &test.pairs[0], path.as_ref())?;
        println!("wrote {} maps for `{}` to {path}", dump.layers.len(), test.pairs[0].0.join(" "));
    }
    Ok(report)
}

#[allow(dead_code)]
fn main() -> attnlink::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    run(&args).map(|_| ())
}
