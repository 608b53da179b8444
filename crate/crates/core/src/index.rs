//! Inverted index over the answer corpus and BM25 candidate retrieval.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::AnswerCorpus;
use crate::error::{Error, Result};
use crate::textenc::Tokenizer;

const MAGIC: &[u8; 4] = b"FRIX";
pub const INDEX_FORMAT_VERSION: u32 = 1;

/// Ranked candidates per question id.
pub type CandidateLists = BTreeMap<String, Vec<(String, f64)>>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 0.82, b: 0.68 }
    }
}

impl Bm25Params {
    pub fn new(k1: f64, b: f64) -> Result<Self> {
        if !(k1 >= 0.0 && k1.is_finite()) {
            return Err(Error::Config(format!("k1 must be >= 0, got {k1}")));
        }
        if !(0.0..=1.0).contains(&b) {
            return Err(Error::Config(format!("b must be in [0, 1], got {b}")));
        }
        Ok(Self { k1, b })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Posting {
    pub doc: u32,
    pub tf: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvertedIndex {
    doc_ids: Vec<String>,
    doc_len: Vec<u32>,
    avg_len: f64,
    postings: BTreeMap<String, Vec<Posting>>,
}

impl InvertedIndex {
    pub fn n_docs(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn avg_len(&self) -> f64 {
        self.avg_len
    }

    pub fn df(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    pub fn postings(&self, term: &str) -> &[Posting] {
        self.postings.get(term).map_or(&[], Vec::as_slice)
    }

    pub fn n_terms(&self) -> usize {
        self.postings.len()
    }

    pub fn doc_id(&self, doc: u32) -> &str {
        &self.doc_ids[doc as usize]
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    fn doc_index(&self, doc_id: &str) -> Option<u32> {
        self.doc_ids
            .binary_search_by(|d| d.as_str().cmp(doc_id))
            .ok()
            .map(|i| i as u32)
    }

    pub fn doc_len(&self, doc_id: &str) -> Option<u32> {
        self.doc_index(doc_id).map(|i| self.doc_len[i as usize])
    }

    pub fn tf(&self, term: &str, doc_id: &str) -> u32 {
        let Some(doc) = self.doc_index(doc_id) else { return 0 };
        let list = self.postings(term);
        list.binary_search_by_key(&doc, |p| p.doc)
            .map_or(0, |i| list[i].tf)
    }

    fn term_weight(&self, df: usize, tf: u32, doc_len: u32, params: Bm25Params) -> f64 {
        let idf = (self.n_docs() as f64 / df as f64).ln();
        let tf = f64::from(tf);
        let norm = params.k1 * ((1.0 - params.b) + params.b * (f64::from(doc_len) / self.avg_len));
        idf * ((params.k1 + 1.0) * tf) / (norm + tf)
    }

    /// Writes the `FRIX` binary layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&INDEX_FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.doc_ids.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.avg_len.to_le_bytes());
        for (id, len) in self.doc_ids.iter().zip(&self.doc_len) {
            put_str(&mut out, id);
            out.extend_from_slice(&len.to_le_bytes());
        }
        out.extend_from_slice(&(self.postings.len() as u64).to_le_bytes());
        for (term, list) in &self.postings {
            put_str(&mut out, term);
            out.extend_from_slice(&(list.len() as u32).to_le_bytes());
            for p in list {
                out.extend_from_slice(&p.doc.to_le_bytes());
                out.extend_from_slice(&p.tf.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::BadMagic { expected: "FRIX" });
        }
        let version = r.u32("version")?;
        if version != INDEX_FORMAT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                supported: INDEX_FORMAT_VERSION,
            });
        }
        let n_docs = r.u64("document count")? as usize;
        let avg_len = f64::from_le_bytes(r.take(8, "average length")?.try_into().expect("8 bytes"));
        let mut doc_ids = Vec::with_capacity(n_docs.min(1 << 20));
        let mut doc_len = Vec::with_capacity(n_docs.min(1 << 20));
        for _ in 0..n_docs {
            doc_ids.push(r.string("document id")?);
            doc_len.push(r.u32("document length")?);
        }
        if doc_ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Corrupt("document ids not strictly sorted".into()));
        }
        let n_terms = r.u64("term count")? as usize;
        let mut postings = BTreeMap::new();
        for _ in 0..n_terms {
            let term = r.string("term")?;
            let n = r.u32("postings length")? as usize;
            let mut list = Vec::with_capacity(n.min(1 << 20));
            for _ in 0..n {
                let doc = r.u32("posting document")?;
                let tf = r.u32("posting frequency")?;
                if doc as usize >= n_docs || tf == 0 {
                    return Err(Error::Corrupt(format!("bad posting for `{term}`")));
                }
                list.push(Posting { doc, tf });
            }
            postings.insert(term, list);
        }
        if r.pos != bytes.len() {
            return Err(Error::Corrupt("trailing bytes after postings".into()));
        }
        Ok(Self {
            doc_ids,
            doc_len,
            avg_len,
            postings,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

pub(crate) fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

pub(crate) struct ByteReader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated(what))?;
        if end > self.bytes.len() {
            return Err(Error::Truncated(what));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    pub fn string(&mut self, what: &'static str) -> Result<String> {
        let n = self.u32(what)? as usize;
        String::from_utf8(self.take(n, what)?.to_vec()).map_err(|_| Error::Corrupt(format!("{what} is not UTF-8")))
    }
}

/// Builds postings (sorted by document) and length statistics.
pub fn build_index(corpus: &AnswerCorpus, tokenizer: &impl Tokenizer) -> Result<InvertedIndex> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut doc_ids = Vec::with_capacity(corpus.len());
    let mut doc_len = Vec::with_capacity(corpus.len());
    let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
    let mut total: u64 = 0;
    for (doc, (id, text)) in corpus.iter().enumerate() {
        let tokens = tokenizer.tokenize(text);
        if tokens.is_empty() {
            return Err(Error::EmptyDocument(id.to_string()));
        }
        let mut tf: HashMap<&str, u32> = HashMap::new();
        for t in &tokens {
            *tf.entry(t).or_default() += 1;
        }
        for (term, count) in tf {
            postings.entry(term.to_string()).or_default().push(Posting {
                doc: doc as u32,
                tf: count,
            });
        }
        total += tokens.len() as u64;
        doc_ids.push(id.to_string());
        doc_len.push(tokens.len() as u32);
    }
    // corpus iteration is id-ordered and documents are visited once, so
    // every postings list is already sorted by document
    Ok(InvertedIndex {
        avg_len: total as f64 / doc_ids.len() as f64,
        doc_ids,
        doc_len,
        postings,
    })
}

/// Retrieval Status Value of one document, natural-log IDF. Each query token
/// occurrence contributes separately.
pub fn bm25_score<S: AsRef<str>>(
    index: &InvertedIndex,
    query_tokens: &[S],
    doc_id: &str,
    params: Bm25Params,
) -> Result<f64> {
    let doc = index
        .doc_index(doc_id)
        .ok_or_else(|| Error::UnknownDocument(doc_id.to_string()))?;
    let len = index.doc_len[doc as usize];
    let mut score = 0.0;
    for t in query_tokens {
        let list = index.postings(t.as_ref());
        if let Ok(i) = list.binary_search_by_key(&doc, |p| p.doc) {
            score += index.term_weight(list.len(), list[i].tf, len, params);
        }
    }
    Ok(score)
}

/// Top `k` documents with positive score, by score descending then id ascending.
pub fn retrieve<S: AsRef<str>>(
    index: &InvertedIndex,
    query_tokens: &[S],
    k: usize,
    params: Bm25Params,
) -> Vec<(String, f64)> {
    let mut acc: HashMap<u32, f64> = HashMap::new();
    for t in query_tokens {
        let list = index.postings(t.as_ref());
        for p in list {
            let w = index.term_weight(list.len(), p.tf, index.doc_len[p.doc as usize], params);
            *acc.entry(p.doc).or_insert(0.0) += w;
        }
    }
    let mut hits: Vec<(u32, f64)> = acc.into_iter().filter(|(_, s)| *s > 0.0).collect();
    // doc numbers follow id order, so comparing them breaks ties by id
    hits.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    hits.truncate(k);
    hits.into_iter()
        .map(|(d, s)| (index.doc_ids[d as usize].clone(), s))
        .collect()
}
