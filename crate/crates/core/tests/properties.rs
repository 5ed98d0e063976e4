use attnlink::data::{build_vocab, subsample, Corpus};
use attnlink::eval::corpus_bleu;
use attnlink::{Graph, Tensor};
use proptest::prelude::*;

fn sentence(max_len: usize) -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec((0..6u8).prop_map(|i| format!("t{i}")), 0..max_len)
}

fn word_seq() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec("[a-z]{1,3}", 1..8)
}

fn pairs(max: usize) -> impl Strategy<Value = Vec<(Vec<String>, Vec<String>)>> {
    prop::collection::vec((sentence(10), sentence(10)), 1..max)
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(
        rows in 1..5usize,
        cols in 1..7usize,
        shift in -50.0..50.0f64,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn(&[rows, cols], |_| r.random_range(-30.0..30.0));
        let allowed: Vec<bool> = (0..rows * cols).map(|i| i % cols == 0 || r.random_bool(0.6)).collect();
        let g = Graph::new();
        let p = g.constant(x.clone()).softmax_rows(Some(&allowed)).unwrap().value();
        let shifted = Tensor::from_fn(&[rows, cols], |i| x.data()[i] + shift);
        let q = g.constant(shifted).softmax_rows(Some(&allowed)).unwrap().value();
        for i in 0..rows {
            let row = p.row(i);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for j in 0..cols {
                prop_assert!(row[j] >= 0.0);
                if !allowed[i * cols + j] {
                    prop_assert_eq!(row[j], 0.0);
                }
                prop_assert!((row[j] - q.row(i)[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bleu_ignores_sentence_order(ps in pairs(12), rot in 0..12usize) {
        let (h, r): (Vec<_>, Vec<_>) = ps.iter().cloned().unzip();
        let mut rotated = ps.clone();
        rotated.rotate_left(rot % ps.len());
        rotated.reverse();
        let (h2, r2): (Vec<_>, Vec<_>) = rotated.into_iter().unzip();
        let a = corpus_bleu(&h, &r).unwrap();
        let b = corpus_bleu(&h2, &r2).unwrap();
        prop_assert_eq!(a.matches, b.matches);
        prop_assert_eq!(a.totals, b.totals);
        prop_assert!((a.score - b.score).abs() < 1e-15);
        prop_assert!((0.0..=1.0).contains(&a.score));
    }

    #[test]
    fn vocab_round_trips(ps in prop::collection::vec((word_seq(), word_seq()), 1..20)) {
        let corpus = Corpus::new(ps, "prop").unwrap();
        let (sv, tv) = build_vocab(&corpus, 1000).unwrap();
        for (s, t) in &corpus.pairs {
            prop_assert_eq!(&sv.decode(&sv.encode(s)), s);
            prop_assert_eq!(&tv.decode(&tv.encode(t)), t);
        }
        // unknown tokens map to UNK
        prop_assert_eq!(sv.encode(&["never-seen".to_string()]), vec![attnlink::data::UNK]);
    }

    #[test]
    fn subsample_is_an_ordered_deterministic_subset(n in 1..60usize, k_frac in 0.0..1.0f64, seed in any::<u64>()) {
        let pairs: Vec<_> = (0..n).map(|i| (vec![format!("s{i}")], vec![format!("t{i}")])).collect();
        let corpus = Corpus::new(pairs, "prop").unwrap();
        let k = 1 + ((n - 1) as f64 * k_frac) as usize;
        let a = subsample(&corpus, k, seed).unwrap();
        let b = subsample(&corpus, k, seed).unwrap();
        prop_assert_eq!(&a.pairs, &b.pairs);
        prop_assert_eq!(a.len(), k);
        let idx: Vec<usize> = a.pairs.iter().map(|p| p.0[0][1..].parse().unwrap()).collect();
        prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
    }
}
