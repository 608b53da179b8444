//! Seeded synthetic answer-selection data for end-to-end checks.
//!
//! Each question names a few topic words and one rare keyword. Its single
//! relevant answer repeats the keyword in an explanatory register (a shared
//! pool of connective words) and no topic words. Distractors repeat the
//! question's topic words, so BM25 tends to rank them above the relevant
//! answer while a trained re-ranker can pick up the keyword and register.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Answer, AnswerCorpus, Question};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    /// Prefix of every id and domain-specific word.
    pub domain: String,
    pub n_questions: usize,
    pub distractors_per_question: usize,
    pub n_topics: usize,
    pub topics_per_question: usize,
    pub n_register: usize,
    pub n_filler: usize,
    pub seed: u64,
}

impl SyntheticConfig {
    /// 60 questions and 300 answers.
    pub fn benchmark(seed: u64) -> Self {
        Self {
            domain: "d".into(),
            n_questions: 60,
            distractors_per_question: 4,
            n_topics: 40,
            topics_per_question: 4,
            n_register: 20,
            n_filler: 60,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub corpus: AnswerCorpus,
    pub questions: Vec<Question>,
}

impl SyntheticDataset {
    pub fn question_texts(&self) -> BTreeMap<String, String> {
        self.questions.iter().map(|q| (q.id.clone(), q.text.clone())).collect()
    }
}

/// Register words shared by every domain.
fn register_word(i: usize) -> String {
    const STEMS: [&str; 10] = [
        "because", "therefore", "generally", "typically", "usually", "means", "depends", "consider", "explains",
        "reason",
    ];
    format!("{}{}", STEMS[i % STEMS.len()], i / STEMS.len())
}

pub fn generate(cfg: &SyntheticConfig) -> SyntheticDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = &cfg.domain;
    let topics: Vec<String> = (0..cfg.n_topics).map(|i| format!("{d}topic{i}")).collect();
    let filler: Vec<String> = (0..cfg.n_filler).map(|i| format!("{d}word{i}")).collect();
    let register: Vec<String> = (0..cfg.n_register).map(register_word).collect();

    let n_answers = cfg.n_questions * (1 + cfg.distractors_per_question);
    let mut answer_slots: Vec<usize> = (0..n_answers).collect();
    answer_slots.shuffle(&mut rng);
    let mut slots = answer_slots.into_iter();
    let mut next_id = || format!("{d}a{:04}", slots.next().expect("one slot per answer"));

    let mut corpus = AnswerCorpus::new();
    let mut questions = Vec::with_capacity(cfg.n_questions);
    for qi in 0..cfg.n_questions {
        let keyword = format!("{d}key{qi}");
        let mine: Vec<&String> = topics.choose_multiple(&mut rng, cfg.topics_per_question).collect();

        let mut q_words: Vec<String> = mine.iter().map(|t| t.to_string()).collect();
        q_words.push(keyword.clone());
        q_words.shuffle(&mut rng);

        let mut rel_words = vec![keyword.clone()];
        let extra = rng.gen_range(5..=7);
        rel_words.extend((0..extra).map(|_| register.choose(&mut rng).expect("register").clone()));
        rel_words.shuffle(&mut rng);
        let rel_id = next_id();
        corpus.insert(Answer {
            id: rel_id.clone(),
            text: rel_words.join(" "),
        });

        for _ in 0..cfg.distractors_per_question {
            let shared = cfg.topics_per_question.min(3);
            let mut words: Vec<String> = mine.choose_multiple(&mut rng, shared).map(|t| t.to_string()).collect();
            let doubled = words[rng.gen_range(0..words.len())].clone();
            words.push(doubled);
            let extra = rng.gen_range(3..=5);
            words.extend((0..extra).map(|_| filler.choose(&mut rng).expect("filler").clone()));
            words.shuffle(&mut rng);
            corpus.insert(Answer {
                id: next_id(),
                text: words.join(" "),
            });
        }

        questions.push(Question {
            id: format!("{d}q{qi:03}"),
            text: q_words.join(" "),
            relevant_ids: BTreeSet::from([rel_id]),
        });
    }
    SyntheticDataset { corpus, questions }
}

/// A general domain of `n_general` questions and a target domain of
/// `n_target`, with disjoint topic, keyword and filler words and a shared
/// answer register.
pub fn two_domain(n_general: usize, n_target: usize, seed: u64) -> (SyntheticDataset, SyntheticDataset) {
    let general = SyntheticConfig {
        domain: "g".into(),
        n_questions: n_general,
        n_topics: 80,
        seed,
        ..SyntheticConfig::benchmark(seed)
    };
    let target = SyntheticConfig {
        domain: "t".into(),
        n_questions: n_target,
        n_topics: 30,
        seed: seed.wrapping_add(1),
        ..SyntheticConfig::benchmark(seed)
    };
    (generate(&general), generate(&target))
}
