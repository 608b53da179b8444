//! Tokenization, vocabulary, and fixed-length encodings for the neural models.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::neural::params::{hex, INIT_RANGE};
use crate::neural::Tensor;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const MASK: usize = 4;

pub const RESERVED: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

/// Splits cleaned text on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_string).collect()
}

pub trait Tokenizer {
    fn tokenize(&self, text: &str) -> Vec<String>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokenizer;

impl Tokenizer for WhitespaceTokenizer {
    fn tokenize(&self, text: &str) -> Vec<String> {
        tokenize(text)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
    min_count: usize,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>, min_count: usize) -> Self {
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, ids, min_count }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    /// Id of `token`, or [`UNK`].
    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    pub fn ids<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// SHA-256 over the `token<TAB>id` listing.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (i, t) in self.tokens.iter().enumerate() {
            h.update(format!("{t}\t{i}\n").as_bytes());
        }
        hex(&h.finalize())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(fs::File::create(path)?);
        for (i, t) in self.tokens.iter().enumerate() {
            writeln!(out, "{t}\t{i}")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let content = fs::read_to_string(path)?;
        let mut tokens = Vec::new();
        for (i, line) in content.lines().enumerate() {
            let (tok, id) = line
                .split_once('\t')
                .ok_or_else(|| Error::malformed(path, i + 1, "expected `token<TAB>id`"))?;
            let id: usize = id
                .trim()
                .parse()
                .map_err(|_| Error::malformed(path, i + 1, "id is not an integer"))?;
            if id != tokens.len() {
                return Err(Error::malformed(path, i + 1, "ids must be contiguous from 0"));
            }
            tokens.push(tok.to_string());
        }
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::Corrupt(format!("{} lacks reserved tokens", path.display())));
        }
        Ok(Self::from_tokens(tokens, 1))
    }
}

/// Admits tokens seen at least `min_count` times, ordered by descending
/// frequency then token, after the five reserved ids.
pub fn build_vocab<'a, I>(token_stream: I, min_count: usize) -> Vocabulary
where
    I: IntoIterator<Item = &'a str>,
{
    let min_count = min_count.max(1);
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in token_stream {
        *counts.entry(t).or_default() += 1;
    }
    let mut admitted: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|(t, c)| *c >= min_count && !RESERVED.contains(t))
        .collect();
    admitted.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let tokens = RESERVED
        .iter()
        .map(|s| s.to_string())
        .chain(admitted.into_iter().map(|(t, _)| t.to_string()))
        .collect();
    Vocabulary::from_tokens(tokens, min_count)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeqEncoding {
    pub ids: Vec<usize>,
    pub mask: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairEncoding {
    pub ids: Vec<usize>,
    pub segment_ids: Vec<u8>,
    pub mask: Vec<u8>,
}

/// Truncates to `max_len`, maps OOV tokens to [`UNK`] and pads with [`PAD`].
pub fn encode_single<S: AsRef<str>>(tokens: &[S], vocab: &Vocabulary, max_len: usize) -> SeqEncoding {
    let kept = tokens.len().min(max_len);
    let mut ids = vocab.ids(&tokens[..kept]);
    let mut mask = vec![1; kept];
    ids.resize(max_len, PAD);
    mask.resize(max_len, 0);
    SeqEncoding { ids, mask }
}

/// `[CLS] q… [SEP] a… [SEP]` padded to `max_len`. Over-long inputs lose the
/// answer tail first, then the question tail.
pub fn encode_pair<S: AsRef<str>, T: AsRef<str>>(
    q_tokens: &[S],
    a_tokens: &[T],
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<PairEncoding> {
    if max_len < 4 {
        return Err(Error::Config(format!("pair max_len {max_len} < 4")));
    }
    let budget = max_len - 3;
    let q_keep = q_tokens.len().min(budget);
    let a_keep = a_tokens.len().min(budget - q_keep);

    let mut ids = Vec::with_capacity(max_len);
    let mut segment_ids = Vec::with_capacity(max_len);
    ids.push(CLS);
    ids.extend(vocab.ids(&q_tokens[..q_keep]));
    ids.push(SEP);
    segment_ids.resize(ids.len(), 0);
    ids.extend(vocab.ids(&a_tokens[..a_keep]));
    ids.push(SEP);
    segment_ids.resize(ids.len(), 1);
    let mut mask = vec![1; ids.len()];
    ids.resize(max_len, PAD);
    segment_ids.resize(max_len, 0);
    mask.resize(max_len, 0);
    Ok(PairEncoding { ids, segment_ids, mask })
}

/// `[CLS] a… [SEP]` as a single-segment encoding for masked-LM training.
pub fn encode_cls_single<S: AsRef<str>>(tokens: &[S], vocab: &Vocabulary, max_len: usize) -> Result<PairEncoding> {
    if max_len < 2 {
        return Err(Error::Config(format!("sequence max_len {max_len} < 2")));
    }
    let keep = tokens.len().min(max_len - 2);
    let mut ids = vec![CLS];
    ids.extend(vocab.ids(&tokens[..keep]));
    ids.push(SEP);
    let mut mask = vec![1; ids.len()];
    ids.resize(max_len, PAD);
    mask.resize(max_len, 0);
    Ok(PairEncoding {
        ids,
        segment_ids: vec![0; max_len],
        mask,
    })
}

/// Builds a `|V| × dim` table from a `token v1 … v_dim` text file. Rows of
/// tokens missing from the file are uniform in ±0.05 from `seed`; PAD is zero.
pub fn load_embeddings(path: &Path, vocab: &Vocabulary, dim: usize, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data: Vec<f64> = (0..vocab.len() * dim)
        .map(|_| rng.gen_range(-INIT_RANGE..=INIT_RANGE))
        .collect();
    let content = fs::read_to_string(path)?;
    for (i, line) in content.lines().enumerate() {
        let mut parts = line.split(' ').filter(|s| !s.is_empty());
        let Some(token) = parts.next() else { continue };
        let values = parts
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::malformed(path, i + 1, format!("bad number: {e}")))?;
        if values.len() != dim {
            return Err(Error::malformed(
                path,
                i + 1,
                format!("expected {dim} values, found {}", values.len()),
            ));
        }
        if let Some(&id) = vocab.ids.get(token) {
            data[id * dim..(id + 1) * dim].copy_from_slice(&values);
        }
    }
    data[PAD * dim..(PAD + 1) * dim].fill(0.0);
    Tensor::matrix(vocab.len(), dim, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(words: &str) -> Vocabulary {
        build_vocab(words.split_whitespace(), 1)
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("accrual based accounting"), ["accrual", "based", "accounting"]);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("tax tax"), ["tax", "tax"]);
    }

    #[test]
    fn vocab_examples() {
        let v = build_vocab(["a", "a", "b", "a"], 2);
        assert_eq!(v.len(), 6);
        assert_eq!(v.id("a"), 5);
        assert_eq!(v.id("b"), UNK);
        assert_eq!(build_vocab(["x", "y"], 1).len(), 7);
        let a = vocab("c b a b c c");
        let b = vocab("c b a b c c");
        assert_eq!(a, b);
        assert_eq!((a.id("c"), a.id("b"), a.id("a")), (5, 6, 7));
        assert_eq!(a.token(CLS), Some("[CLS]"));
    }

    #[test]
    fn encode_single_examples() {
        let v = vocab("t1 t2 t3 t4 t5");
        let e = encode_single(&["t1", "t2"], &v, 4);
        assert_eq!(e.ids, vec![v.id("t1"), v.id("t2"), 0, 0]);
        assert_eq!(e.mask, vec![1, 1, 0, 0]);
        let e = encode_single(&["t1", "t2", "t3", "t4", "t5"], &v, 3);
        assert_eq!(e.ids, v.ids(&["t1", "t2", "t3"]));
        assert_eq!(encode_single(&["zzz"], &v, 1).ids, vec![UNK]);
    }

    #[test]
    fn encode_pair_examples() {
        let v = vocab("q1 q2 a1 a2 a3");
        let id = |t: &str| v.id(t);
        let q = ["q1", "q2"];
        let a = ["a1", "a2", "a3"];
        let e = encode_pair(&q, &a, &v, 8).unwrap();
        assert_eq!(e.ids, vec![CLS, id("q1"), id("q2"), SEP, id("a1"), id("a2"), id("a3"), SEP]);
        assert_eq!(e.segment_ids, vec![0, 0, 0, 0, 1, 1, 1, 1]);
        assert_eq!(e.mask, vec![1; 8]);

        let e = encode_pair(&q, &a, &v, 6).unwrap();
        assert_eq!(e.ids, vec![CLS, id("q1"), id("q2"), SEP, id("a1"), SEP]);

        let e = encode_pair(&q, &[] as &[&str], &v, 7).unwrap();
        assert_eq!(e.ids, vec![CLS, id("q1"), id("q2"), SEP, SEP, PAD, PAD]);
        assert_eq!(e.mask, vec![1, 1, 1, 1, 1, 0, 0]);

        let e = encode_pair(&q, &a, &v, 4).unwrap();
        assert_eq!(e.ids, vec![CLS, id("q1"), SEP, SEP]);
        assert!(encode_pair(&q, &a, &v, 3).is_err());
    }

    #[test]
    fn vocab_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.tsv");
        let v = vocab("tax tax ira roth");
        v.save(&path).unwrap();
        let loaded = Vocabulary::load(&path).unwrap();
        assert_eq!(loaded.hash(), v.hash());
        assert_eq!(loaded.id("ira"), v.id("ira"));
    }

    #[test]
    fn embedding_loading() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.txt");
        let vals: Vec<String> = (0..100).map(|i| format!("{}", i as f64 / 1000.0)).collect();
        fs::write(&path, format!("tax {}\nother {}\n", vals.join(" "), vals.join(" "))).unwrap();
        let v = vocab("tax roth");
        let t = load_embeddings(&path, &v, 100, 1).unwrap();
        assert_eq!(t.shape(), &[v.len(), 100]);
        let tax = t.row_slice(v.id("tax"));
        assert_eq!(tax[7], 0.007);
        assert!(t.row_slice(v.id("roth")).iter().all(|x| x.abs() <= 0.05));
        assert!(t.row_slice(PAD).iter().all(|x| *x == 0.0));

        let short: Vec<String> = (0..99).map(|_| "0.1".to_string()).collect();
        fs::write(&path, format!("tax {}\nroth {}\n", vals.join(" "), short.join(" "))).unwrap();
        match load_embeddings(&path, &v, 100, 1) {
            Err(Error::Malformed { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected malformed line error, got {other:?}"),
        }
    }
}
