// Generate a synthetic parallel corpus, write and reload it as TSV, build
// vocabularies, subsample, and pack token-budgeted batches.
//
//   cargo run --example data_pipeline -- [copy|reverse|mapped_shuffle] [n_pairs]

use attnlink::data::{build_vocab, gen_toy_task, load_parallel_tsv, subsample, TaskKind, ToyTask};
use attnlink::train::{make_batches, prepare};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Returns the number of batches packed from the subsample.
pub fn run(args: &[String]) -> attnlink::Result<usize> {
    let kind = TaskKind::parse(args.first().map_or("mapped_shuffle", String::as_str))?;
    let n_pairs = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let task = ToyTask { kind, n_pairs, min_len: 3, max_len: 12, vocab_size: 20, seed: 5 };
    let corpus = gen_toy_task(&task)?;
    for (s, t) in corpus.pairs.iter().take(3) {
        println!("{}  ->  {}", s.join(" "), t.join(" "));
    }

    let dir = std::env::temp_dir().join(format!("attnlink-data-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| attnlink::Error::io(&dir, e))?;
    let path = dir.join("corpus.tsv");
    corpus.write_tsv(&path)?;
    let reloaded = load_parallel_tsv(&path)?;
    assert_eq!(reloaded.pairs, corpus.pairs);
    std::fs::remove_dir_all(&dir).map_err(|e| attnlink::Error::io(&dir, e))?;
    println!("{} pairs round-tripped through {}", reloaded.len(), path.display());

    let (sv, tv) = build_vocab(&corpus, 64)?;
    println!("vocab sizes: source {}, target {}", sv.len(), tv.len());

    let small = subsample(&corpus, n_pairs / 4, 1)?;
    let examples = prepare(&small, &sv, &tv);
    let batches = make_batches(&examples, 256, &mut ChaCha8Rng::seed_from_u64(0));
    let sizes: Vec<usize> = batches.iter().map(Vec::len).collect();
    println!("{} examples in {} batches, sizes {:?}", examples.len(), batches.len(), sizes);
    Ok(batches.len())
}

#[allow(dead_code)]
fn main() -> attnlink::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    run(&args).map(|_| ())
}
