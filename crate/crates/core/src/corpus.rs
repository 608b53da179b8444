//! Question/answer dataset handling: cleaning, ingestion from TSV or JSON,
//! question-level splits, and construction of labeled training samples from
//! retrieved candidate pools.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index::CandidateLists;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Answer {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub text: String,
    pub relevant_ids: BTreeSet<String>,
}

/// Answers keyed by id, iterated in id order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AnswerCorpus {
    answers: BTreeMap<String, String>,
}

impl AnswerCorpus {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts an answer; returns false (and keeps the old text) when the id exists.
    pub fn insert(&mut self, answer: Answer) -> bool {
        if self.answers.contains_key(&answer.id) {
            return false;
        }
        self.answers.insert(answer.id, answer.text);
        true
    }

    pub fn get(&self, id: &str) -> Option<&str> {
        self.answers.get(id).map(String::as_str)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.answers.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.answers.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }
}

impl FromIterator<Answer> for AnswerCorpus {
    fn from_iter<I: IntoIterator<Item = Answer>>(iter: I) -> Self {
        let mut corpus = AnswerCorpus::new();
        for a in iter {
            corpus.insert(a);
        }
        corpus
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<Question>,
    pub valid: Vec<Question>,
    pub test: Vec<Question>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabeledSample {
    pub question_id: String,
    pub answer_id: String,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TripleSample {
    pub question_id: String,
    pub positive_id: String,
    pub negative_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    Pointwise,
    /// Positives × negatives per question, optionally capped per question.
    Pairwise { cap: Option<usize> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Samples {
    Pointwise(Vec<LabeledSample>),
    Pairwise(Vec<TripleSample>),
}

impl Samples {
    pub fn len(&self) -> usize {
        match self {
            Samples::Pointwise(s) => s.len(),
            Samples::Pairwise(s) => s.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Counts reported by [`ingest`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct IngestReport {
    pub answers_read: usize,
    pub answers_retained: usize,
    pub questions_read: usize,
    pub questions_retained: usize,
    pub qrels_read: usize,
    pub qrels_retained: usize,
}

/// Lowercases, replaces every character that is not a letter, digit or
/// whitespace with a space, collapses whitespace runs and trims.
pub fn clean_text(raw: &str) -> String {
    let mapped: String = raw
        .chars()
        .flat_map(char::to_lowercase)
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c } else { ' ' })
        .collect();
    mapped.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Deserialize)]
struct JsonQuestion {
    qid: String,
    text: String,
}

#[derive(Deserialize)]
struct JsonAnswer {
    aid: String,
    text: String,
}

#[derive(Deserialize)]
struct JsonQrel {
    qid: String,
    aid: String,
}

fn is_json(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

/// Reads `<id><TAB><field>` lines, or a JSON array of `{qid|aid, text|aid}` objects.
/// Each returned record carries its 1-based line number (0 for JSON input).
fn read_pairs(path: &Path, kind: PairKind) -> Result<Vec<(usize, String, String)>> {
    let content = fs::read_to_string(path)?;
    if is_json(path) {
        let rows = match kind {
            PairKind::Question => serde_json::from_str::<Vec<JsonQuestion>>(&content)?
                .into_iter()
                .map(|q| (0, q.qid, q.text))
                .collect(),
            PairKind::Answer => serde_json::from_str::<Vec<JsonAnswer>>(&content)?
                .into_iter()
                .map(|a| (0, a.aid, a.text))
                .collect(),
            PairKind::Qrel => serde_json::from_str::<Vec<JsonQrel>>(&content)?
                .into_iter()
                .map(|r| (0, r.qid, r.aid))
                .collect(),
        };
        return Ok(rows);
    }
    let mut rows = Vec::new();
    for (i, line) in content.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 {
            return Err(Error::malformed(
                path,
                line_no,
                format!("expected 2 tab-separated fields, found {}", fields.len()),
            ));
        }
        let id = fields[0].trim();
        if id.is_empty() {
            return Err(Error::malformed(path, line_no, "empty id"));
        }
        rows.push((line_no, id.to_string(), fields[1].to_string()));
    }
    Ok(rows)
}

#[derive(Clone, Copy)]
enum PairKind {
    Question,
    Answer,
    Qrel,
}

/// Loads and cleans questions, answers and relevance links.
///
/// Answers whose cleaned text is empty are dropped, along with their qrels;
/// questions left without any relevant answer are dropped. Qrels naming an
/// answer id absent from the answers file are an error.
pub fn ingest(
    questions_file: &Path,
    answers_file: &Path,
    qrels_file: &Path,
) -> Result<(AnswerCorpus, Vec<Question>, IngestReport)> {
    let raw_answers = read_pairs(answers_file, PairKind::Answer)?;
    let raw_questions = read_pairs(questions_file, PairKind::Question)?;
    let raw_qrels = read_pairs(qrels_file, PairKind::Qrel)?;

    let mut report = IngestReport {
        answers_read: raw_answers.len(),
        questions_read: raw_questions.len(),
        qrels_read: raw_qrels.len(),
        ..Default::default()
    };

    let mut all_answer_ids = HashSet::new();
    let mut corpus = AnswerCorpus::new();
    for (line, id, text) in raw_answers {
        if !all_answer_ids.insert(id.clone()) {
            return Err(Error::malformed(answers_file, line, format!("duplicate answer id `{id}`")));
        }
        let text = clean_text(&text);
        if !text.is_empty() {
            corpus.insert(Answer { id, text });
        }
    }

    let mut dangling: BTreeSet<String> = BTreeSet::new();
    let mut links: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for (_, qid, aid) in raw_qrels {
        if !all_answer_ids.contains(&aid) {
            dangling.insert(aid);
            continue;
        }
        if corpus.contains(&aid) {
            links.entry(qid).or_default().insert(aid);
        }
    }
    if !dangling.is_empty() {
        return Err(Error::DanglingAnswers(dangling.into_iter().collect()));
    }

    let mut seen = HashSet::new();
    let mut questions = Vec::new();
    for (line, id, text) in raw_questions {
        if !seen.insert(id.clone()) {
            return Err(Error::malformed(questions_file, line, format!("duplicate question id `{id}`")));
        }
        let text = clean_text(&text);
        let Some(relevant_ids) = links.get(&id) else { continue };
        if text.is_empty() || relevant_ids.is_empty() {
            continue;
        }
        report.qrels_retained += relevant_ids.len();
        questions.push(Question {
            id,
            text,
            relevant_ids: relevant_ids.clone(),
        });
    }

    report.answers_retained = corpus.len();
    report.questions_retained = questions.len();
    Ok((corpus, questions, report))
}

/// Reads and cleans an answers file on its own, dropping answers whose
/// cleaned text is empty.
pub fn read_answers(answers_file: &Path) -> Result<AnswerCorpus> {
    let mut seen = HashSet::new();
    let mut corpus = AnswerCorpus::new();
    for (line, id, text) in read_pairs(answers_file, PairKind::Answer)? {
        if !seen.insert(id.clone()) {
            return Err(Error::malformed(answers_file, line, format!("duplicate answer id `{id}`")));
        }
        let text = clean_text(&text);
        if !text.is_empty() {
            corpus.insert(Answer { id, text });
        }
    }
    Ok(corpus)
}

/// Writes questions, answers and qrels in the TSV layout read by [`ingest`].
pub fn write_dataset(
    corpus: &AnswerCorpus,
    questions: &[Question],
    questions_file: &Path,
    answers_file: &Path,
    qrels_file: &Path,
) -> Result<()> {
    let mut qf = fs::File::create(questions_file)?;
    let mut rf = fs::File::create(qrels_file)?;
    for q in questions {
        writeln!(qf, "{}\t{}", q.id, q.text)?;
        for aid in &q.relevant_ids {
            writeln!(rf, "{}\t{}", q.id, aid)?;
        }
    }
    let mut af = fs::File::create(answers_file)?;
    for (id, text) in corpus.iter() {
        writeln!(af, "{id}\t{text}")?;
    }
    Ok(())
}

/// Seeded shuffle followed by contiguous assignment of `counts` questions to
/// train, validation and test.
pub fn split_questions(
    questions: &[Question],
    counts: (usize, usize, usize),
    seed: u64,
) -> Result<DatasetSplit> {
    let (n_train, n_valid, n_test) = counts;
    let requested = n_train + n_valid + n_test;
    if requested != questions.len() {
        return Err(Error::SplitMismatch {
            requested,
            available: questions.len(),
        });
    }
    let mut order: Vec<usize> = (0..questions.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let take = |range: std::ops::Range<usize>| -> Vec<Question> {
        order[range].iter().map(|&i| questions[i].clone()).collect()
    };
    Ok(DatasetSplit {
        train: take(0..n_train),
        valid: take(n_train..n_train + n_valid),
        test: take(n_train + n_valid..requested),
    })
}

/// Turns retrieved candidate pools into training samples.
///
/// Negatives are the pool minus the ground truth. Pointwise mode labels every
/// pool member and adds every ground-truth answer the pool missed as a
/// positive. Pairwise mode emits positives × negatives, up to `cap` per question.
pub fn build_samples(
    split_part: &[Question],
    candidates: &CandidateLists,
    mode: SampleMode,
) -> Result<Samples> {
    let mut pointwise = Vec::new();
    let mut pairwise = Vec::new();
    for q in split_part {
        let pool = candidates
            .get(&q.id)
            .ok_or_else(|| Error::MissingCandidates(q.id.clone()))?;
        match mode {
            SampleMode::Pointwise => {
                let mut in_pool = HashSet::new();
                for (aid, _) in pool {
                    in_pool.insert(aid.as_str());
                    pointwise.push(LabeledSample {
                        question_id: q.id.clone(),
                        answer_id: aid.clone(),
                        label: u8::from(q.relevant_ids.contains(aid)),
                    });
                }
                for aid in q.relevant_ids.iter().filter(|a| !in_pool.contains(a.as_str())) {
                    pointwise.push(LabeledSample {
                        question_id: q.id.clone(),
                        answer_id: aid.clone(),
                        label: 1,
                    });
                }
            }
            SampleMode::Pairwise { cap } => {
                let negatives: Vec<&String> = pool
                    .iter()
                    .map(|(aid, _)| aid)
                    .filter(|aid| !q.relevant_ids.contains(*aid))
                    .collect();
                let limit = cap.unwrap_or(usize::MAX);
                let triples = q
                    .relevant_ids
                    .iter()
                    .flat_map(|p| negatives.iter().map(move |n| (p, *n)))
                    .take(limit)
                    .map(|(p, n)| TripleSample {
                        question_id: q.id.clone(),
                        positive_id: p.clone(),
                        negative_id: n.clone(),
                    });
                pairwise.extend(triples);
            }
        }
    }
    Ok(match mode {
        SampleMode::Pointwise => Samples::Pointwise(pointwise),
        SampleMode::Pairwise { .. } => Samples::Pairwise(pairwise),
    })
}

/// Writes samples as TSV: `qid aid label` (pointwise) or `qid pos neg` (pairwise).
pub fn write_samples(samples: &Samples, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    match samples {
        Samples::Pointwise(rows) => {
            for s in rows {
                writeln!(out, "{}\t{}\t{}", s.question_id, s.answer_id, s.label)?;
            }
        }
        Samples::Pairwise(rows) => {
            for s in rows {
                writeln!(out, "{}\t{}\t{}", s.question_id, s.positive_id, s.negative_id)?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads a samples file written by [`write_samples`]. A third column of `0`/`1`
/// marks the pointwise layout.
pub fn read_samples(path: &Path) -> Result<Samples> {
    let content = fs::read_to_string(path)?;
    let mut pointwise = Vec::new();
    let mut pairwise = Vec::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(Error::malformed(path, i + 1, "expected 3 tab-separated fields"));
        }
        match f[2] {
            "0" | "1" if pairwise.is_empty() => pointwise.push(LabeledSample {
                question_id: f[0].into(),
                answer_id: f[1].into(),
                label: u8::from(f[2] == "1"),
            }),
            _ if pointwise.is_empty() => pairwise.push(TripleSample {
                question_id: f[0].into(),
                positive_id: f[1].into(),
                negative_id: f[2].into(),
            }),
            _ => return Err(Error::malformed(path, i + 1, "mixed pointwise and pairwise rows")),
        }
    }
    Ok(if pairwise.is_empty() {
        Samples::Pointwise(pointwise)
    } else {
        Samples::Pairwise(pairwise)
    })
}
