// Corpus BLEU between two files of whitespace-tokenized sentences, one per
// line. Without arguments, scores a small built-in pair.
//
//   cargo run --example bleu -- hypotheses.txt references.txt

use attnlink::eval::{corpus_bleu, BleuBreakdown};

fn lines(text: &str) -> Vec<Vec<String>> {
    text.lines().map(|l| l.split_whitespace().map(str::to_string).collect()).collect()
}

pub fn run(args: &[String]) -> attnlink::Result<BleuBreakdown> {
    let (hyps, refs) = match args {
        [h, r, ..] => {
            let read = |p: &String| std::fs::read_to_string(p).map_err(|e| attnlink::Error::io(p, e));
            (lines(&read(h)?), lines(&read(r)?))
        }
        _ => (
            lines("the cat sat on the mat\nthere is a dog in the garden today"),
            lines("the cat sat on a mat\nthere is a dog in the garden"),
        ),
    };
    let b = corpus_bleu(&hyps, &refs)?;
    for (n, p) in b.precisions.iter().enumerate() {
        println!("p{} = {}/{} = {p:.4}", n + 1, b.matches[n], b.totals[n]);
    }
    println!("bp = {:.4} (hyp {} tokens, ref {})", b.brevity_penalty, b.hyp_len, b.ref_len);
    println!("BLEU = {:.2}", 100.0 * b.score);
    Ok(b)
}

#[allow(dead_code)]
fn main() -> attnlink::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    run(&args).map(|_| ())
}
