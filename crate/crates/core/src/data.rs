//! Parallel corpora, vocabularies and synthetic translation tasks.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

/// Longest sentence the synthetic generators will produce.
pub const MAX_TOY_LEN: usize = 512;

pub type Sentence = Vec<String>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub pairs: Vec<(Sentence, Sentence)>,
    /// Synthetic task description or source file path.
    pub provenance: String,
    /// Lines dropped while loading (an empty side).
    #[serde(default)]
    pub skipped: usize,
}

impl Corpus {
    pub fn new(pairs: Vec<(Sentence, Sentence)>, provenance: impl Into<String>) -> Result<Self> {
        if let Some(i) = pairs.iter().position(|(s, t)| s.is_empty() || t.is_empty()) {
            return Err(Error::invalid(format!("pair {i} has an empty side")));
        }
        Ok(Self {
            pairs,
            provenance: provenance.into(),
            skipped: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Splits off the last `n` pairs.
    pub fn split_tail(mut self, n: usize) -> Result<(Corpus, Corpus)> {
        if n == 0 || n >= self.pairs.len() {
            return Err(Error::invalid(format!(
                "cannot split {n} pairs from a corpus of {}",
                self.pairs.len()
            )));
        }
        let tail = self.pairs.split_off(self.pairs.len() - n);
        let prov = self.provenance.clone();
        Ok((
            Corpus {
                pairs: self.pairs,
                provenance: format!("{prov} [head]"),
                skipped: 0,
            },
            Corpus {
                pairs: tail,
                provenance: format!("{prov} [tail {n}]"),
                skipped: 0,
            },
        ))
    }

    /// `source<TAB>target` lines, tokens joined by single spaces.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (s, t) in &self.pairs {
            let _ = writeln!(out, "{}\t{}", s.join(" "), t.join(" "));
        }
        out
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }
}

/// Token/id mapping with ids 0..4 reserved for pad, unk, bos, eos.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds from the non-reserved tokens, in id order starting at 4.
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut index = HashMap::new();
        for tok in tokens {
            if RESERVED.contains(&tok.as_str()) {
                return Err(Error::invalid(format!("`{tok}` is a reserved token")));
            }
            if index.insert(tok.clone(), all.len()).is_some() {
                return Err(Error::invalid(format!("duplicate token `{tok}`")));
            }
            all.push(tok);
        }
        Ok(Self { tokens: all, index })
    }

    /// All tokens, reserved ones first.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Id of `tok`; unknown and reserved strings map to `UNK`.
    pub fn id(&self, tok: &str) -> usize {
        self.index.get(tok).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(RESERVED[UNK], String::as_str)
    }

    pub fn encode(&self, sentence: &[String]) -> Vec<usize> {
        sentence.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Sentence {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    /// Non-reserved tokens in id order; the inverse of [`Vocab::from_tokens`].
    pub fn content_tokens(&self) -> &[String] {
        &self.tokens[RESERVED.len()..]
    }
}

/// Most frequent tokens per side up to `max_size` ids (reserved included),
/// frequency ties broken lexicographically.
pub fn build_vocab(corpus: &Corpus, max_size: usize) -> Result<(Vocab, Vocab)> {
    if corpus.is_empty() {
        return Err(Error::invalid("cannot build a vocabulary from an empty corpus"));
    }
    let side = |pick: fn(&(Sentence, Sentence)) -> &Sentence| {
        let mut freq: HashMap<&str, usize> = HashMap::new();
        for pair in &corpus.pairs {
            for tok in pick(pair) {
                if !RESERVED.contains(&tok.as_str()) {
                    *freq.entry(tok.as_str()).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(&str, usize)> = freq.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let room = max_size.saturating_sub(RESERVED.len());
        Vocab::from_tokens(ranked.into_iter().take(room).map(|(t, _)| t.to_string()))
    };
    Ok((side(|p| &p.0)?, side(|p| &p.1)?))
}

/// Reads `source<TAB>target` lines with whitespace tokenization. Lines with
/// an empty side are skipped and counted; any other malformed line is an
/// error naming its line number.
pub fn load_parallel_tsv(path: &Path) -> Result<Corpus> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_parallel_tsv(&text, path)
}

pub fn parse_parallel_tsv(text: &str, origin: &Path) -> Result<Corpus> {
    let mut pairs = Vec::new();
    let mut skipped = 0;
    for (i, line) in text.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            skipped += 1;
            continue;
        }
        let mut parts = line.split('\t');
        let (Some(src), Some(tgt), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Parse {
                path: origin.to_path_buf(),
                msg: format!("line {}: expected exactly one tab separator", i + 1),
            });
        };
        let src: Sentence = src.split_whitespace().map(str::to_string).collect();
        let tgt: Sentence = tgt.split_whitespace().map(str::to_string).collect();
        if src.is_empty() || tgt.is_empty() {
            skipped += 1;
            continue;
        }
        pairs.push((src, tgt));
    }
    if pairs.is_empty() {
        return Err(Error::Parse {
            path: origin.to_path_buf(),
            msg: format!("no usable lines ({skipped} skipped)"),
        });
    }
    Ok(Corpus {
        pairs,
        provenance: origin.display().to_string(),
        skipped,
    })
}

/// Uniform sample of `k` pairs without replacement, in original order.
///
/// Selection: seed a ChaCha8 stream with `seed`, run a Fisher-Yates pass
/// over `0..n` (for `i` from `n-1` down to `1`, swap `i` with
/// `random_range(0..=i)`), keep the first `k` indices, and sort them.
pub fn subsample(corpus: &Corpus, k: usize, seed: u64) -> Result<Corpus> {
    let n = corpus.len();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("subsample size {k} not in 1..={n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    let mut keep = idx[..k].to_vec();
    keep.sort_unstable();
    Ok(Corpus {
        pairs: keep.into_iter().map(|i| corpus.pairs[i].clone()).collect(),
        provenance: format!("{} [subsample k={k} seed={seed}]", corpus.provenance),
        skipped: 0,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TaskKind {
    Copy,
    Reverse,
    /// Target is a fixed token bijection of the source, then each
    /// non-overlapping adjacent pair is swapped with `swap_prob`.
    MappedShuffle { swap_prob: f64 },
}

impl TaskKind {
    pub fn mapped_shuffle() -> Self {
        TaskKind::MappedShuffle { swap_prob: 0.5 }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "copy" => Ok(TaskKind::Copy),
            "reverse" => Ok(TaskKind::Reverse),
            "mapped_shuffle" => Ok(TaskKind::mapped_shuffle()),
            other => Err(Error::invalid(format!("unknown task `{other}`"))),
        }
    }
}

/// A synthetic task over an alphabet of `vocab_size` symbols `w0..`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyTask {
    pub kind: TaskKind,
    pub n_pairs: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

pub fn symbol(i: usize) -> String {
    format!("w{i}")
}

/// The symbol permutation used by `MappedShuffle` for `(vocab_size, seed)`.
/// Drawn from its own stream so it does not depend on `n_pairs`.
pub fn token_bijection(vocab_size: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut perm: Vec<usize> = (0..vocab_size).collect();
    for i in (1..vocab_size).rev() {
        let j = rng.random_range(0..=i);
        perm.swap(i, j);
    }
    perm
}

pub fn gen_toy_task(task: &ToyTask) -> Result<Corpus> {
    let mut problems = Vec::new();
    if task.vocab_size < 4 {
        problems.push(format!("vocab_size {} < 4", task.vocab_size));
    }
    if task.min_len == 0 || task.min_len > task.max_len {
        problems.push(format!("length range {}..={} is empty", task.min_len, task.max_len));
    }
    if task.max_len > MAX_TOY_LEN {
        problems.push(format!("max_len {} exceeds {MAX_TOY_LEN}", task.max_len));
    }
    if task.n_pairs == 0 {
        problems.push("n_pairs must be positive".into());
    }
    if let TaskKind::MappedShuffle { swap_prob } = task.kind {
        if !(0.0..=1.0).contains(&swap_prob) {
            problems.push(format!("swap_prob {swap_prob} not in [0, 1]"));
        }
    }
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }

    let map = token_bijection(task.vocab_size, task.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(task.seed);
    let mut pairs = Vec::with_capacity(task.n_pairs);
    for _ in 0..task.n_pairs {
        let len = rng.random_range(task.min_len..=task.max_len);
        let src: Vec<usize> = (0..len).map(|_| rng.random_range(0..task.vocab_size)).collect();
        let tgt: Vec<usize> = match task.kind {
            TaskKind::Copy => src.clone(),
            TaskKind::Reverse => src.iter().rev().copied().collect(),
            TaskKind::MappedShuffle { swap_prob } => {
                let mut t: Vec<usize> = src.iter().map(|&s| map[s]).collect();
                for i in (0..len.saturating_sub(1)).step_by(2) {
                    if rng.random::<f64>() < swap_prob {
                        t.swap(i, i + 1);
                    }
                }
                t
            }
        };
        pairs.push((
            src.into_iter().map(symbol).collect(),
            tgt.into_iter().map(symbol).collect(),
        ));
    }
    let provenance = serde_json::to_string(task)?;
    Corpus::new(pairs, provenance)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(words: &str) -> Sentence {
        words.split_whitespace().map(str::to_string).collect()
    }

    fn task(kind: TaskKind) -> ToyTask {
        ToyTask {
            kind,
            n_pairs: 50,
            min_len: 1,
            max_len: 9,
            vocab_size: 12,
            seed: 5,
        }
    }

    #[test]
    fn copy_and_reverse() {
        for (src, tgt) in gen_toy_task(&task(TaskKind::Copy)).unwrap().pairs {
            assert_eq!(src, tgt);
        }
        for (src, tgt) in gen_toy_task(&task(TaskKind::Reverse)).unwrap().pairs {
            let mut r = src.clone();
            r.reverse();
            assert_eq!(r, tgt);
        }
    }

    #[test]
    fn mapped_shuffle_without_swaps_is_the_bijection() {
        let t = task(TaskKind::MappedShuffle { swap_prob: 0.0 });
        let map = token_bijection(t.vocab_size, t.seed);
        let mut seen = map.clone();
        seen.sort_unstable();
        assert_eq!(seen, (0..t.vocab_size).collect::<Vec<_>>());
        for (src, tgt) in gen_toy_task(&t).unwrap().pairs {
            let expect: Sentence = src
                .iter()
                .map(|w| symbol(map[w[1..].parse::<usize>().unwrap()]))
                .collect();
            assert_eq!(expect, tgt);
        }
    }

    #[test]
    fn mapped_shuffle_swaps_only_within_pairs() {
        let t = task(TaskKind::mapped_shuffle());
        let map = token_bijection(t.vocab_size, t.seed);
        let mut swapped = 0;
        for (src, tgt) in gen_toy_task(&t).unwrap().pairs {
            let mapped: Sentence = src
                .iter()
                .map(|w| symbol(map[w[1..].parse::<usize>().unwrap()]))
                .collect();
            for i in (0..mapped.len()).step_by(2) {
                let end = (i + 2).min(mapped.len());
                let mut a = mapped[i..end].to_vec();
                let mut b = tgt[i..end].to_vec();
                if a != b {
                    swapped += 1;
                }
                a.sort();
                b.sort();
                assert_eq!(a, b);
            }
        }
        assert!(swapped > 0);
    }

    #[test]
    fn toy_task_rejects_bad_ranges() {
        let mut t = task(TaskKind::Copy);
        t.min_len = 0;
        assert!(gen_toy_task(&t).is_err());
        t.min_len = 5;
        t.max_len = 3;
        assert!(gen_toy_task(&t).is_err());
        let mut t = task(TaskKind::Copy);
        t.vocab_size = 3;
        assert!(gen_toy_task(&t).is_err());
    }

    #[test]
    fn tsv_parsing() {
        let c = parse_parallel_tsv("hello world\thallo welt\n", Path::new("x")).unwrap();
        assert_eq!(c.pairs, vec![(s("hello world"), s("hallo welt"))]);
        let c = parse_parallel_tsv("a\t\nb\tc\n", Path::new("x")).unwrap();
        assert_eq!(c.skipped, 1);
        assert_eq!(c.pairs, vec![(s("b"), s("c"))]);
        let err = parse_parallel_tsv("a b c\nx\ty\n", Path::new("x")).unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
        assert!(parse_parallel_tsv("a\t\n", Path::new("x")).is_err());
    }

    #[test]
    fn vocab_frequency_and_ties() {
        let c = Corpus::new(vec![(s("a a b"), s("x"))], "t").unwrap();
        let (src, _) = build_vocab(&c, 5).unwrap();
        assert_eq!(src.content_tokens(), &["a".to_string()]);

        let c = Corpus::new(vec![(s("b a b a"), s("x"))], "t").unwrap();
        let (src, _) = build_vocab(&c, 5).unwrap();
        assert_eq!(src.content_tokens(), &["a".to_string()]);

        let c = Corpus::new(vec![(s("p q r s"), s("x y"))], "t").unwrap();
        let (src, tgt) = build_vocab(&c, 1000).unwrap();
        assert_eq!(src.len(), 4 + 4);
        assert_eq!(tgt.len(), 4 + 2);
    }

    #[test]
    fn reserved_strings_never_get_reserved_ids() {
        let c = Corpus::new(vec![(s("<pad> a"), s("<eos>"))], "t").unwrap();
        let (src, _) = build_vocab(&c, 100).unwrap();
        assert_eq!(src.encode(&s("<pad> a")), vec![UNK, 4]);
    }

    #[test]
    fn subsample_full_and_deterministic() {
        let c = gen_toy_task(&task(TaskKind::Copy)).unwrap();
        assert_eq!(subsample(&c, c.len(), 3).unwrap().pairs, c.pairs);
        let a = subsample(&c, 10, 9).unwrap();
        let b = subsample(&c, 10, 9).unwrap();
        assert_eq!(a.pairs, b.pairs);
        assert_eq!(a.len(), 10);
        assert!(subsample(&c, 0, 1).is_err());
        assert!(subsample(&c, c.len() + 1, 1).is_err());
    }
}
