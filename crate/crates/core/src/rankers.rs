//! A uniform scorer over BM25, QA-LSTM and the cross-encoder, plus the
//! retrieve-then-rerank pipeline.

use std::collections::HashMap;
use std::thread;

use serde::Serialize;

use crate::corpus::AnswerCorpus;
use crate::error::{Error, Result};
use crate::index::{retrieve, Bm25Params, InvertedIndex};
use crate::neural::encoder::CrossEncoder;
use crate::neural::lstm::QaLstm;
use crate::textenc::{encode_pair, encode_single, tokenize, Vocabulary};

pub enum Scorer<'a> {
    Bm25 {
        index: &'a InvertedIndex,
        params: Bm25Params,
    },
    QaLstm {
        model: &'a QaLstm,
        vocab: &'a Vocabulary,
    },
    CrossEncoder {
        model: &'a CrossEncoder,
        vocab: &'a Vocabulary,
        max_len: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedAnswers {
    pub question_id: String,
    pub answers: Vec<(String, f64)>,
}

/// BM25 of arbitrary answer text against the statistics of `index`; equal to
/// [`crate::index::bm25_score`] when the text is an indexed document.
pub fn bm25_text_score<S: AsRef<str>>(
    index: &InvertedIndex,
    query_tokens: &[S],
    answer_tokens: &[S],
    params: Bm25Params,
) -> f64 {
    let mut tf: HashMap<&str, u32> = HashMap::new();
    for t in answer_tokens {
        *tf.entry(t.as_ref()).or_default() += 1;
    }
    let len = answer_tokens.len() as f64;
    let n = index.n_docs() as f64;
    let mut score = 0.0;
    for t in query_tokens {
        let df = index.df(t.as_ref());
        let Some(&count) = tf.get(t.as_ref()) else { continue };
        if df == 0 {
            continue;
        }
        let idf = (n / df as f64).ln();
        let tf = f64::from(count);
        let norm = params.k1 * ((1.0 - params.b) + params.b * (len / index.avg_len()));
        score += idf * ((params.k1 + 1.0) * tf) / (norm + tf);
    }
    score
}

impl Scorer<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Scorer::Bm25 { .. } => "bm25",
            Scorer::QaLstm { .. } => "qa_lstm",
            Scorer::CrossEncoder { .. } => "cross_encoder",
        }
    }

    /// BM25 RSV, QA-LSTM cosine, or cross-encoder relevance probability.
    pub fn score(&self, question_text: &str, answer_text: &str) -> Result<f64> {
        let q = tokenize(question_text);
        let a = tokenize(answer_text);
        match self {
            Scorer::Bm25 { index, params } => Ok(bm25_text_score(index, &q, &a, *params)),
            Scorer::QaLstm { model, vocab } => {
                let len = model.config.max_len;
                model.score(&encode_single(&q, vocab, len), &encode_single(&a, vocab, len))
            }
            Scorer::CrossEncoder { model, vocab, max_len } => {
                model.score(&encode_pair(&q, &a, vocab, *max_len)?)
            }
        }
    }

    /// Scores answers against one question, fanning neural scoring out over
    /// threads. Output order matches input order.
    pub fn score_many(&self, question_text: &str, answers: &[&str]) -> Result<Vec<f64>> {
        if matches!(self, Scorer::Bm25 { .. }) || answers.len() < 8 {
            return answers.iter().map(|a| self.score(question_text, a)).collect();
        }
        let workers = thread::available_parallelism().map_or(1, |n| n.get()).min(answers.len());
        let chunk = answers.len().div_ceil(workers);
        thread::scope(|s| {
            let handles: Vec<_> = answers
                .chunks(chunk)
                .map(|part| s.spawn(move || part.iter().map(|a| self.score(question_text, a)).collect::<Result<Vec<_>>>()))
                .collect();
            let mut out = Vec::with_capacity(answers.len());
            for h in handles {
                out.extend(h.join().expect("scoring thread panicked")?);
            }
            Ok(out)
        })
    }
}

/// Sorts by score descending, then id ascending.
pub(crate) fn sort_ranked(list: &mut [(String, f64)]) {
    list.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
}

/// Scores every candidate, sorts descending with ties by id, keeps `top_k`.
pub fn rerank<S: AsRef<str>>(
    scorer: &Scorer,
    question_id: &str,
    question_text: &str,
    candidate_ids: &[S],
    corpus: &AnswerCorpus,
    top_k: usize,
) -> Result<RankedAnswers> {
    let mut seen = std::collections::HashSet::new();
    let mut ids = Vec::with_capacity(candidate_ids.len());
    let mut texts = Vec::with_capacity(candidate_ids.len());
    for id in candidate_ids {
        let id = id.as_ref();
        let text = corpus.get(id).ok_or_else(|| Error::UnknownDocument(id.to_string()))?;
        if seen.insert(id) {
            ids.push(id.to_string());
            texts.push(text);
        }
    }
    let scores = scorer.score_many(question_text, &texts)?;
    let mut answers: Vec<(String, f64)> = ids.into_iter().zip(scores).collect();
    sort_ranked(&mut answers);
    answers.truncate(top_k);
    Ok(RankedAnswers {
        question_id: question_id.to_string(),
        answers,
    })
}

/// BM25 retrieval of `pool_size` candidates followed by reranking to `top_k`.
/// An empty pool yields an empty result.
#[allow(clippy::too_many_arguments)]
pub fn answer_pipeline(
    question_id: &str,
    question_text: &str,
    index: &InvertedIndex,
    bm25: Bm25Params,
    scorer: &Scorer,
    corpus: &AnswerCorpus,
    pool_size: usize,
    top_k: usize,
) -> Result<RankedAnswers> {
    let pool = retrieve(index, &tokenize(question_text), pool_size, bm25);
    if pool.is_empty() {
        return Ok(RankedAnswers {
            question_id: question_id.to_string(),
            answers: Vec::new(),
        });
    }
    let ids: Vec<&str> = pool.iter().map(|(id, _)| id.as_str()).collect();
    rerank(scorer, question_id, question_text, &ids, corpus, top_k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Answer;
    use crate::index::{bm25_score, build_index};
    use crate::neural::encoder::EncoderConfig;
    use crate::neural::lstm::LstmConfig;
    use crate::textenc::{build_vocab, WhitespaceTokenizer};

    fn corpus() -> AnswerCorpus {
        [
            ("a1", "tax on roth ira withdrawals"),
            ("a2", "index funds have low fees"),
            ("a3", "roth conversion tax rules"),
            ("a4", "mortgage rates rise"),
        ]
        .iter()
        .map(|(i, t)| Answer {
            id: i.to_string(),
            text: t.to_string(),
        })
        .collect()
    }

    #[test]
    fn bm25_text_score_matches_index_score() {
        let c = corpus();
        let idx = build_index(&c, &WhitespaceTokenizer).unwrap();
        let p = Bm25Params::default();
        let scorer = Scorer::Bm25 { index: &idx, params: p };
        for (id, text) in c.iter() {
            let direct = bm25_score(&idx, &tokenize("roth tax fees"), id, p).unwrap();
            assert_eq!(scorer.score("roth tax fees", text).unwrap(), direct);
        }
        assert_eq!(scorer.score("stocks", "mortgage rates rise").unwrap(), 0.0);
    }

    #[test]
    fn rerank_sorts_truncates_and_breaks_ties() {
        let c = corpus();
        let idx = build_index(&c, &WhitespaceTokenizer).unwrap();
        let scorer = Scorer::Bm25 {
            index: &idx,
            params: Bm25Params::default(),
        };
        let r = rerank(&scorer, "q", "roth tax", &["a4", "a3", "a1", "a2"], &c, 2).unwrap();
        assert_eq!(r.answers.len(), 2);
        assert!(r.answers[0].1 >= r.answers[1].1);
        let all = rerank(&scorer, "q", "mortgage", &["a3", "a2", "a1"], &c, 10).unwrap();
        let ids: Vec<&str> = all.answers.iter().map(|(i, _)| i.as_str()).collect();
        assert_eq!(ids, vec!["a1", "a2", "a3"]);
        assert!(rerank(&scorer, "q", "x", &["zz"], &c, 3).is_err());
    }

    #[test]
    fn pipeline_with_bm25_is_retrieval_prefix() {
        let c = corpus();
        let idx = build_index(&c, &WhitespaceTokenizer).unwrap();
        let p = Bm25Params::default();
        let scorer = Scorer::Bm25 { index: &idx, params: p };
        let out = answer_pipeline("q", "roth tax fees", &idx, p, &scorer, &c, 50, 2).unwrap();
        let mut plain = retrieve(&idx, &tokenize("roth tax fees"), 50, p);
        plain.truncate(2);
        assert_eq!(out.answers, plain);
        let empty = answer_pipeline("q", "unseen words", &idx, p, &scorer, &c, 50, 10).unwrap();
        assert!(empty.answers.is_empty());
    }

    #[test]
    fn neural_scorers_basic_laws() {
        let c = corpus();
        let vocab = build_vocab(c.iter().flat_map(|(_, t)| t.split_whitespace()), 1);
        let lstm = QaLstm::new(
            LstmConfig {
                vocab_size: vocab.len(),
                embed_dim: 6,
                hidden: 4,
                max_len: 16,
                dropout: 0.2,
            },
            2,
        )
        .unwrap();
        let s = Scorer::QaLstm {
            model: &lstm,
            vocab: &vocab,
        };
        assert!((s.score("roth tax", "roth tax").unwrap() - 1.0).abs() < 1e-6);

        let mut cfg = EncoderConfig::desk(vocab.len());
        cfg.d_model = 8;
        cfg.n_heads = 2;
        cfg.d_ff = 8;
        let ce = CrossEncoder::new(cfg, 2).unwrap();
        let s = Scorer::CrossEncoder {
            model: &ce,
            vocab: &vocab,
            max_len: 32,
        };
        let p = s.score("roth tax", "index funds have low fees").unwrap();
        assert!((p - 0.5).abs() < 0.05);

        // batch size independence: threaded scoring equals one-by-one scoring
        let base: Vec<&str> = c.iter().map(|(_, t)| t).collect();
        let texts: Vec<&str> = base.iter().copied().cycle().take(12).collect();
        let many = s.score_many("roth tax", &texts).unwrap();
        for (t, m) in texts.iter().zip(&many) {
            assert_eq!(s.score("roth tax", t).unwrap(), *m);
        }
    }
}
