// With the link scale at 0 a linked model computes exactly what the plain
// model computes; at scale 1 it does not.
//
//   cargo run --example lemma1 -- [encoder|decoder|both] [seed]

use attnlink::theory::{lemma1_witness, Lemma1Report};
use attnlink::{LinkPlacement, ModelConfig};

pub fn run(args: &[String]) -> attnlink::Result<Lemma1Report> {
    let placement = match args.first().map(String::as_str) {
        Some("encoder") => LinkPlacement::Encoder,
        Some("decoder") => LinkPlacement::Decoder,
        _ => LinkPlacement::Both,
    };
    let seed = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let cfg = ModelConfig::toy(16, 4, 3, 24).with_placement(placement);
    let r = lemma1_witness(&cfg, seed, 8)?;
    println!("{placement:?} links, {} random inputs", r.n_inputs);
    println!("  scale 0 vs plain      max |diff| {:e}", r.lambda0_max_diff);
    println!("  zeroed link vs plain  max |diff| {:e}", r.zero_override_max_diff);
    println!("  scale 1 vs plain      max |diff| {:e}", r.lambda1_max_diff);
    Ok(r)
}

#[allow(dead_code)]
fn main() -> attnlink::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    run(&args).map(|_| ())
}
