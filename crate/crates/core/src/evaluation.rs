//! Ranking metrics over run files and binary relevance judgments.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Question;
use crate::error::{Error, Result};

/// Ranked `(answer_id, score)` lists per question id.
pub type Run = BTreeMap<String, Vec<(String, f64)>>;

/// `1/rank` of the first relevant id within the top `k`, else 0.
pub fn reciprocal_rank<S: AsRef<str>>(ranked_ids: &[S], relevant: &BTreeSet<String>, k: usize) -> f64 {
    ranked_ids
        .iter()
        .take(k)
        .position(|id| relevant.contains(id.as_ref()))
        .map_or(0.0, |p| 1.0 / (p + 1) as f64)
}

/// Binary-relevance NDCG@k with DCG = rel₁ + Σᵢ₌₂ rel_i / log₂(i + 1).
pub fn ndcg<S: AsRef<str>>(ranked_ids: &[S], relevant: &BTreeSet<String>, k: usize) -> f64 {
    let discount = |rank: usize| if rank == 1 { 1.0 } else { 1.0 / ((rank + 1) as f64).log2() };
    let dcg: f64 = ranked_ids
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, id)| relevant.contains(id.as_ref()))
        .map(|(i, _)| discount(i + 1))
        .sum();
    let ideal: f64 = (1..=relevant.len().min(k)).map(discount).sum();
    if ideal == 0.0 {
        0.0
    } else {
        dcg / ideal
    }
}

/// `|top-k ∩ relevant| / k`.
pub fn precision_at_k<S: AsRef<str>>(ranked_ids: &[S], relevant: &BTreeSet<String>, k: usize) -> f64 {
    if k == 0 {
        return 0.0;
    }
    let hits = ranked_ids
        .iter()
        .take(k)
        .filter(|id| relevant.contains(id.as_ref()))
        .count();
    hits as f64 / k as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricKs {
    pub mrr: usize,
    pub ndcg: usize,
    pub precision: usize,
}

impl Default for MetricKs {
    fn default() -> Self {
        Self {
            mrr: 10,
            ndcg: 10,
            precision: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionMetrics {
    pub question_id: String,
    pub rr: f64,
    pub ndcg: f64,
    pub precision: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mrr_at_k: f64,
    pub ndcg_at_k: f64,
    pub precision_at_1: f64,
    pub ks: MetricKs,
    pub question_count: usize,
    pub per_question: Vec<QuestionMetrics>,
}

impl EvalReport {
    /// Aligned plain-text summary.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<14}{:>10}", "metric", "value");
        let _ = writeln!(s, "{:<14}{:>10.4}", format!("MRR@{}", self.ks.mrr), self.mrr_at_k);
        let _ = writeln!(s, "{:<14}{:>10.4}", format!("NDCG@{}", self.ks.ndcg), self.ndcg_at_k);
        let _ = writeln!(
            s,
            "{:<14}{:>10.4}",
            format!("Precision@{}", self.ks.precision),
            self.precision_at_1
        );
        let _ = writeln!(s, "{:<14}{:>10}", "questions", self.question_count);
        s
    }
}

/// Scores every question in `questions`; those absent from `run` score zero.
/// Run entries for questions without judgments are an error.
pub fn evaluate(run: &Run, questions: &[Question], ks: MetricKs) -> Result<EvalReport> {
    let judged: HashSet<&str> = questions.iter().map(|q| q.id.as_str()).collect();
    if let Some(qid) = run.keys().find(|q| !judged.contains(q.as_str())) {
        return Err(Error::Unjudged(qid.clone()));
    }
    let mut per_question = Vec::with_capacity(questions.len());
    for q in questions {
        let ranked: Vec<&str> = run
            .get(&q.id)
            .map(|r| r.iter().map(|(id, _)| id.as_str()).collect())
            .unwrap_or_default();
        per_question.push(QuestionMetrics {
            question_id: q.id.clone(),
            rr: reciprocal_rank(&ranked, &q.relevant_ids, ks.mrr),
            ndcg: ndcg(&ranked, &q.relevant_ids, ks.ndcg),
            precision: precision_at_k(&ranked, &q.relevant_ids, ks.precision),
        });
    }
    let n = per_question.len();
    let mean = |f: fn(&QuestionMetrics) -> f64| {
        if n == 0 {
            0.0
        } else {
            per_question.iter().map(f).sum::<f64>() / n as f64
        }
    };
    Ok(EvalReport {
        mrr_at_k: mean(|m| m.rr),
        ndcg_at_k: mean(|m| m.ndcg),
        precision_at_1: mean(|m| m.precision),
        ks,
        question_count: n,
        per_question,
    })
}

/// Writes `qid Q0 aid rank score tag` lines, ranks from 1, six decimals.
pub fn write_run(run: &Run, path: &Path, tag: &str) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    out.write_all(format_run(run, tag).as_bytes())?;
    out.flush()?;
    Ok(())
}

pub fn format_run(run: &Run, tag: &str) -> String {
    let mut s = String::new();
    for (qid, list) in run {
        for (rank, (aid, score)) in list.iter().enumerate() {
            let _ = writeln!(s, "{qid} Q0 {aid} {} {score:.6} {tag}", rank + 1);
        }
    }
    s
}

/// Parses a run file, checking that ranks count up from 1 and scores never
/// increase within a question.
pub fn read_run(path: &Path) -> Result<Run> {
    let content = fs::read_to_string(path)?;
    let mut run = Run::new();
    for (i, line) in content.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 6 {
            return Err(Error::malformed(path, line_no, format!("expected 6 fields, found {}", f.len())));
        }
        let rank: usize = f[3]
            .parse()
            .map_err(|_| Error::malformed(path, line_no, "rank is not an integer"))?;
        let score: f64 = f[4]
            .parse()
            .map_err(|_| Error::malformed(path, line_no, "score is not a number"))?;
        let list = run.entry(f[0].to_string()).or_default();
        if rank != list.len() + 1 {
            return Err(Error::RunInconsistent {
                line: line_no,
                message: format!("rank {rank} follows rank {}", list.len()),
            });
        }
        if let Some((_, prev)) = list.last() {
            if score > *prev {
                return Err(Error::RunInconsistent {
                    line: line_no,
                    message: format!("score {score} exceeds previous {prev}"),
                });
            }
        }
        if list.iter().any(|(a, _)| a == f[2]) {
            return Err(Error::RunInconsistent {
                line: line_no,
                message: format!("answer `{}` repeated", f[2]),
            });
        }
        list.push((f[2].to_string(), score));
    }
    Ok(run)
}

/// Reads `qid<TAB>aid` judgments (whitespace also accepted) into questions
/// with empty text.
pub fn read_qrels(path: &Path) -> Result<Vec<Question>> {
    let content = fs::read_to_string(path)?;
    let mut links: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        match f.as_slice() {
            [q, a] => {
                links.entry(q.to_string()).or_default().insert(a.to_string());
            }
            // TREC layout: qid iter aid rel
            [q, _, a, rel] => {
                if rel.parse::<i64>().map_err(|_| Error::malformed(path, i + 1, "bad relevance"))? > 0 {
                    links.entry(q.to_string()).or_default().insert(a.to_string());
                }
            }
            _ => return Err(Error::malformed(path, i + 1, "expected `qid aid` or `qid 0 aid rel`")),
        }
    }
    Ok(links
        .into_iter()
        .map(|(id, relevant_ids)| Question {
            id,
            text: String::new(),
            relevant_ids,
        })
        .collect())
}
