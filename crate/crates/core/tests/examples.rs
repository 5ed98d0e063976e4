//! Each example's `run`, with small arguments.

macro_rules! example {
    ($name:ident) => {
        #[allow(dead_code)]
        mod $name {
            include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/", stringify!($name), ".rs"));
        }
    };
}

example!(attention_entropy);
example!(attention_link);
example!(autograd);
example!(bleu);
example!(data_pipeline);
example!(lemma1);
example!(low_resource);
example!(theory_sim);
example!(train_copy);

fn args(a: &[&str]) -> Vec<String> {
    a.iter().map(|s| s.to_string()).collect()
}

#[test]
fn autograd_matches_finite_differences() {
    assert!(autograd::run(&[]).unwrap() < 1e-6);
}

#[test]
fn attention_link_changes_weights() {
    assert!(attention_link::run(&args(&["1.0"])).unwrap() > 1e-3);
    assert_eq!(attention_link::run(&args(&["0"])).unwrap(), 0.0);
}

#[test]
fn bleu_builtin_and_files() {
    let b = bleu::run(&[]).unwrap();
    assert!(b.score > 0.0 && b.score < 1.0);
    let dir = tempfile::tempdir().unwrap();
    let h = dir.path().join("h.txt");
    std::fs::write(&h, "a b c d e\nf g h i\n").unwrap();
    let p = h.to_string_lossy().to_string();
    assert_eq!(bleu::run(&[p.clone(), p]).unwrap().score, 1.0);
}

#[test]
fn data_pipeline_packs_batches() {
    assert!(data_pipeline::run(&args(&["reverse", "400"])).unwrap() > 0);
}

#[test]
fn lemma1_holds_per_placement() {
    for p in ["encoder", "decoder", "both"] {
        let r = lemma1::run(&args(&[p, "3"])).unwrap();
        assert_eq!(r.lambda0_max_diff, 0.0);
        assert!(r.lambda1_max_diff > 0.0);
    }
}

#[test]
fn theory_sim_small() {
    let r = theory_sim::run(&args(&["8", "0.1", "500", "1"])).unwrap();
    let ratio = r.ratio.unwrap();
    assert!((0.3..0.7).contains(&ratio), "{ratio}");
}

#[test]
fn training_examples_run() {
    let (acc, bleu) = train_copy::run(&args(&["linked", "600", "2"])).unwrap();
    assert!((0.0..=1.0).contains(&acc) && (0.0..=1.0).contains(&bleu));
    let (v, l) = low_resource::run(&args(&["0", "2"])).unwrap();
    assert!((0.0..=1.0).contains(&v) && (0.0..=1.0).contains(&l));
    let dir = tempfile::tempdir().unwrap();
    let dump = dir.path().join("dump.json");
    let rep = attention_entropy::run(&args(&["1", dump.to_str().unwrap()])).unwrap();
    assert!(rep.entries.iter().all(|e| (0.0..=1.0).contains(&e.mean_normalized_entropy)));
    assert!(attnlink::eval::AttentionDump::load(&dump).is_ok());
}
