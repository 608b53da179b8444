use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};

use finrank::corpus::{
    build_samples, clean_text, ingest, read_samples, split_questions, write_samples, AnswerCorpus, Question,
    SampleMode, Samples,
};
use finrank::evaluation::{evaluate, read_qrels, read_run, write_run, MetricKs, Run};
use finrank::index::{build_index, retrieve, Bm25Params, CandidateLists, InvertedIndex};
use finrank::neural::encoder::CrossEncoder;
use finrank::neural::lstm::QaLstm;
use finrank::rankers::{answer_pipeline, rerank, Scorer};
use finrank::textenc::{build_vocab, tokenize, Vocabulary, WhitespaceTokenizer};
use finrank::training::{
    load_checkpoint, pretrain_mlm, save_checkpoint, train, transfer_and_adapt, Model, ModelSpec, Objective, Stage,
    TrainConfig, TrainData,
};

use crate::failure::Failure;
use crate::manifest::{beside, Recorder};
use crate::settings::Settings;
use crate::{Command, Common, FineTuneObjective, SampleLayout, TrainObjective};

const ANSWERS: &str = "answers.tsv";
const QUESTIONS: &str = "questions.tsv";
const QRELS: &str = "qrels.tsv";
const VOCAB: &str = "vocab.tsv";
const INDEX: &str = "index.frix";
const SPLITS: [&str; 3] = ["train", "valid", "test"];

pub fn dispatch(common: &Common, command: &Command) -> Result<(), Failure> {
    let settings = Settings::resolve(common)?;
    match command {
        Command::Ingest {
            questions,
            answers,
            qrels,
            split,
            min_count,
            vocab_text,
        } => run_ingest(&settings, questions, answers, qrels, split, *min_count, vocab_text),
        Command::Index { out } => run_index(&settings, out.as_deref()),
        Command::Retrieve { split, index, out } => run_retrieve(&settings, split, index.as_deref(), out.as_deref()),
        Command::BuildSamples {
            split,
            mode,
            cap,
            index,
            out,
        } => run_build_samples(&settings, split, *mode, *cap, index.as_deref(), out.as_deref()),
        Command::Train {
            objective,
            samples,
            valid_samples,
            init,
            out,
        } => run_train(
            &settings,
            *objective,
            samples.as_deref(),
            valid_samples.as_deref(),
            init.as_deref(),
            out.as_deref(),
        ),
        Command::PretrainMlm { out } => run_pretrain(&settings, out.as_deref()),
        Command::Tanda {
            general,
            target,
            objective,
            init,
            out,
        } => run_tanda(&settings, general, target, *objective, init.as_deref(), out.as_deref()),
        Command::Rerank {
            split,
            candidates,
            model,
            out,
        } => run_rerank(&settings, split, candidates.as_deref(), model, out.as_deref()),
        Command::Pipeline {
            split,
            model,
            index,
            out,
        } => run_pipeline(&settings, split, model.as_deref(), index.as_deref(), out.as_deref()),
        Command::Eval { run, qrels, json } => run_eval(&settings, run, qrels, json.as_deref()),
        Command::Query { model, index } => run_query(&settings, model.as_deref(), index.as_deref()),
    }
}

fn recorder(settings: &Settings, command: &str) -> Result<Recorder, Failure> {
    let mut rec = Recorder::new(command, settings.seed()?);
    rec.config("data_dir", settings.data_dir.display().to_string())?;
    for (k, v) in settings.explicit() {
        rec.config(k, v)?;
    }
    Ok(rec)
}

fn check_split(split: &str) -> Result<(), Failure> {
    if SPLITS.contains(&split) {
        Ok(())
    } else {
        Err(Failure::usage(format!("unknown split `{split}`; expected train, valid or test")))
    }
}

fn split_files(dir: &Path, split: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{split}.questions.tsv")), dir.join(format!("{split}.qrels.tsv")))
}

/// Corpus and questions of one split of an ingested data root.
fn load_split(dir: &Path, split: &str, rec: &mut Recorder) -> Result<(AnswerCorpus, Vec<Question>), Failure> {
    check_split(split)?;
    let (qf, rf) = split_files(dir, split);
    let af = dir.join(ANSWERS);
    for p in [&qf, &af, &rf] {
        rec.input(p)?;
    }
    let (corpus, questions, _) = ingest(&qf, &af, &rf)?;
    Ok((corpus, questions))
}

fn load_all(dir: &Path, rec: &mut Recorder) -> Result<(AnswerCorpus, Vec<Question>), Failure> {
    let (qf, af, rf) = (dir.join(QUESTIONS), dir.join(ANSWERS), dir.join(QRELS));
    for p in [&qf, &af, &rf] {
        rec.input(p)?;
    }
    let (corpus, questions, _) = ingest(&qf, &af, &rf)?;
    Ok((corpus, questions))
}

fn load_vocab(dir: &Path, rec: &mut Recorder) -> Result<Vocabulary, Failure> {
    let path = dir.join(VOCAB);
    rec.input(&path)?;
    Ok(Vocabulary::load(&path)?)
}

fn load_index(path: &Path, rec: &mut Recorder) -> Result<InvertedIndex, Failure> {
    rec.input(path)?;
    Ok(InvertedIndex::load(path)?)
}

fn write_questions(questions: &[Question], qf: &Path, rf: &Path) -> Result<(), Failure> {
    let mut q = String::new();
    let mut r = String::new();
    for question in questions {
        q.push_str(&format!("{}\t{}\n", question.id, question.text));
        for aid in &question.relevant_ids {
            r.push_str(&format!("{}\t{aid}\n", question.id));
        }
    }
    fs::write(qf, q)?;
    fs::write(rf, r)?;
    Ok(())
}

/// `a,b,c` as exact counts when they are integers summing to `n`, otherwise
/// as proportions of `n` with the remainder going to the test part.
fn split_counts(spec: &str, n: usize) -> Result<(usize, usize, usize), Failure> {
    let parts: Vec<&str> = spec.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(Failure::usage(format!("--split expects three values, got `{spec}`")));
    }
    if let Ok(c) = parts.iter().map(|p| p.parse::<usize>()).collect::<Result<Vec<_>, _>>() {
        if c.iter().sum::<usize>() == n {
            return Ok((c[0], c[1], c[2]));
        }
    }
    let f = parts
        .iter()
        .map(|p| p.parse::<f64>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| Failure::usage(format!("--split has a non-numeric value: `{spec}`")))?;
    let total: f64 = f.iter().sum();
    if f.iter().any(|x| !x.is_finite() || *x < 0.0) || total <= 0.0 {
        return Err(Failure::usage(format!("--split values must be non-negative: `{spec}`")));
    }
    let n_train = ((f[0] / total) * n as f64).round() as usize;
    let n_valid = (((f[1] / total) * n as f64).round() as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);
    Ok((n_train, n_valid, n - n_train - n_valid))
}

fn run_ingest(
    settings: &Settings,
    questions: &Path,
    answers: &Path,
    qrels: &Path,
    split: &str,
    min_count: usize,
    vocab_text: &[PathBuf],
) -> Result<(), Failure> {
    let mut rec = recorder(settings, "ingest")?;
    for p in [questions, answers, qrels] {
        rec.input(p)?;
    }
    let (corpus, all, report) = ingest(questions, answers, qrels)?;
    let counts = split_counts(split, all.len())?;
    let seed = settings.seed()?;
    let parts = split_questions(&all, counts, seed)?;
    rec.config("split", counts)?;
    rec.config("min_count", min_count)?;

    let dir = &settings.data_dir;
    fs::create_dir_all(dir)?;
    let (qf, af, rf) = (dir.join(QUESTIONS), dir.join(ANSWERS), dir.join(QRELS));
    finrank::corpus::write_dataset(&corpus, &all, &qf, &af, &rf)?;
    let mut outputs = vec![qf, af, rf];
    for (name, part) in SPLITS.iter().zip([&parts.train, &parts.valid, &parts.test]) {
        let (pq, pr) = split_files(dir, name);
        write_questions(part, &pq, &pr)?;
        outputs.extend([pq, pr]);
    }

    let mut texts: Vec<String> = corpus.iter().map(|(_, t)| t.to_string()).collect();
    texts.extend(parts.train.iter().map(|q| q.text.clone()));
    for path in vocab_text {
        rec.input(path)?;
        let content = fs::read_to_string(path)?;
        for (i, line) in content.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (_, text) = line
                .split_once('\t')
                .ok_or_else(|| Failure::data(format!("{}:{}: expected `id<TAB>text`", path.display(), i + 1)))?;
            texts.push(clean_text(text));
        }
    }
    let tokens: Vec<String> = texts.iter().flat_map(|t| tokenize(t)).collect();
    let vocab = build_vocab(tokens.iter().map(String::as_str), min_count);
    let vocab_path = dir.join(VOCAB);
    vocab.save(&vocab_path)?;
    outputs.push(vocab_path);

    println!(
        "answers {}/{}  questions {}/{}  qrels {}/{}",
        report.answers_retained,
        report.answers_read,
        report.questions_retained,
        report.questions_read,
        report.qrels_retained,
        report.qrels_read
    );
    println!(
        "split train {} valid {} test {}  vocabulary {}",
        counts.0,
        counts.1,
        counts.2,
        vocab.len()
    );
    for p in &outputs {
        rec.output(p);
    }
    rec.finish(&dir.join("ingest.manifest.json"))?;
    Ok(())
}

fn run_index(settings: &Settings, out: Option<&Path>) -> Result<(), Failure> {
    let mut rec = recorder(settings, "index")?;
    let af = settings.data(ANSWERS);
    rec.input(&af)?;
    let corpus: AnswerCorpus = finrank::corpus::read_answers(&af)?;
    let index = build_index(&corpus, &WhitespaceTokenizer)?;
    let out = out.map_or_else(|| settings.data(INDEX), Path::to_path_buf);
    index.save(&out)?;
    println!("indexed {} answers, {} terms", index.n_docs(), index.n_terms());
    rec.output(&out);
    rec.finish(&beside(&out))?;
    Ok(())
}

fn bm25_candidates(
    index: &InvertedIndex,
    questions: &[Question],
    depth: usize,
    params: Bm25Params,
) -> CandidateLists {
    questions
        .iter()
        .map(|q| (q.id.clone(), retrieve(index, &tokenize(&q.text), depth, params)))
        .collect()
}

fn run_retrieve(settings: &Settings, split: &str, index: Option<&Path>, out: Option<&Path>) -> Result<(), Failure> {
    let mut rec = recorder(settings, "retrieve")?;
    let (pool_size, params) = (settings.pool_size()?, settings.bm25()?);
    rec.config("pool_size", pool_size)?;
    rec.config("bm25", params)?;
    let (_, questions) = load_split(&settings.data_dir, split, &mut rec)?;
    let index = load_index(&index.map_or_else(|| settings.data(INDEX), Path::to_path_buf), &mut rec)?;
    let run: Run = bm25_candidates(&index, &questions, pool_size, params);
    let out = out.map_or_else(|| settings.data(&format!("bm25.{split}.run")), Path::to_path_buf);
    write_run(&run, &out, "bm25")?;
    rec.output(&out);
    rec.finish(&beside(&out))?;
    Ok(())
}

fn run_build_samples(
    settings: &Settings,
    split: &str,
    layout: SampleLayout,
    cap: Option<usize>,
    index: Option<&Path>,
    out: Option<&Path>,
) -> Result<(), Failure> {
    let mut rec = recorder(settings, "build-samples")?;
    let (pool_size, params) = (settings.pool_size()?, settings.bm25()?);
    let cap = match cap {
        Some(c) => Some(c),
        None => settings.get_opt("cap")?,
    };
    rec.config("pool_size", pool_size)?;
    rec.config("bm25", params)?;
    rec.config("cap", cap)?;
    let (_, questions) = load_split(&settings.data_dir, split, &mut rec)?;
    let index = load_index(&index.map_or_else(|| settings.data(INDEX), Path::to_path_buf), &mut rec)?;
    let candidates = bm25_candidates(&index, &questions, pool_size, params);
    let (mode, name) = match layout {
        SampleLayout::Pointwise => (SampleMode::Pointwise, "pointwise"),
        SampleLayout::Pairwise => (SampleMode::Pairwise { cap }, "pairwise"),
    };
    let samples = build_samples(&questions, &candidates, mode)?;
    let out = out.map_or_else(|| settings.data(&format!("{split}.{name}.tsv")), Path::to_path_buf);
    write_samples(&samples, &out)?;
    println!("{} {name} samples", samples.len());
    rec.output(&out);
    rec.finish(&beside(&out))?;
    Ok(())
}

fn question_texts(questions: &[Question]) -> BTreeMap<String, String> {
    questions.iter().map(|q| (q.id.clone(), q.text.clone())).collect()
}

/// A cross-encoder initialized from an MLM encoder checkpoint, or fresh.
fn cross_encoder(
    settings: &Settings,
    vocab: &Vocabulary,
    cfg: &mut TrainConfig,
    init: Option<&Path>,
    rec: &mut Recorder,
) -> Result<CrossEncoder, Failure> {
    let Some(path) = init else {
        return Ok(CrossEncoder::new(settings.encoder_config(vocab.len(), cfg)?, cfg.seed)?);
    };
    rec.input(path)?;
    let ck = load_checkpoint(path)?;
    if !settings.allow_vocab_mismatch {
        ck.check_vocab(vocab)?;
    }
    let ModelSpec::Encoder(mut enc) = ck.model.clone() else {
        return Err(Failure::usage(format!(
            "{} holds a {} checkpoint, not a pre-trained encoder",
            path.display(),
            ck.model.kind()
        )));
    };
    enc.dropout = cfg.dropout;
    cfg.max_len = cfg.max_len.min(enc.max_len);
    let mut model = CrossEncoder::new(enc, cfg.seed)?;
    model.load_encoder_weights(&ck.params)?;
    Ok(model)
}

fn read_samples_input(path: &Path, rec: &mut Recorder) -> Result<Samples, Failure> {
    rec.input(path)?;
    Ok(read_samples(path)?)
}

fn run_train(
    settings: &Settings,
    objective: TrainObjective,
    samples: Option<&Path>,
    valid_samples: Option<&Path>,
    init: Option<&Path>,
    out: Option<&Path>,
) -> Result<(), Failure> {
    let mut rec = recorder(settings, "train")?;
    let (objective, layout) = match objective {
        TrainObjective::Pointwise => (Objective::Pointwise, "pointwise"),
        TrainObjective::Pairwise => (Objective::Pairwise, "pairwise"),
        TrainObjective::Hinge => (Objective::Hinge, "pairwise"),
    };
    let mut cfg = settings.train_config(objective)?;
    let dir = &settings.data_dir;
    let vocab = load_vocab(dir, &mut rec)?;
    let (corpus, questions) = load_all(dir, &mut rec)?;
    let texts = question_texts(&questions);

    let train_path = samples.map_or_else(|| dir.join(format!("train.{layout}.tsv")), Path::to_path_buf);
    let train_samples = read_samples_input(&train_path, &mut rec)?;
    let valid_path = valid_samples
        .map(Path::to_path_buf)
        .or_else(|| Some(dir.join(format!("valid.{layout}.tsv"))).filter(|p| p.exists()));
    let valid = valid_path.as_deref().map(|p| read_samples_input(p, &mut rec)).transpose()?;
    let valid = valid.filter(|v| !v.is_empty());

    let model = if objective == Objective::Hinge {
        if init.is_some() {
            return Err(Failure::usage("--init applies to cross-encoder objectives only"));
        }
        Model::QaLstm(QaLstm::new(settings.lstm_config(vocab.len(), &cfg)?, cfg.seed)?)
    } else {
        Model::CrossEncoder(cross_encoder(settings, &vocab, &mut cfg, init, &mut rec)?)
    };
    rec.config("train", &cfg)?;
    rec.config("model", model.spec())?;
    let data = TrainData {
        train: &train_samples,
        valid: valid.as_ref(),
        questions: &texts,
        answers: &corpus,
    };
    let ck = train(&model, &data, &vocab, &cfg)?;
    let out = out.map_or_else(|| dir.join(format!("{objective}.frck")), Path::to_path_buf);
    save_checkpoint(&ck, &out)?;
    for r in &ck.history {
        match r.valid_loss {
            Some(v) => println!("epoch {}  train {:.6}  valid {:.6}", r.epoch, r.train_loss, v),
            None => println!("epoch {}  train {:.6}", r.epoch, r.train_loss),
        }
    }
    if let Some(best) = ck.best_epoch {
        println!("best epoch {best}");
    }
    rec.output(&out);
    rec.finish(&beside(&out))?;
    Ok(())
}

fn run_pretrain(settings: &Settings, out: Option<&Path>) -> Result<(), Failure> {
    let mut rec = recorder(settings, "pretrain-mlm")?;
    let cfg = settings.train_config(Objective::Mlm)?;
    let dir = &settings.data_dir;
    let vocab = load_vocab(dir, &mut rec)?;
    let af = dir.join(ANSWERS);
    rec.input(&af)?;
    let corpus = finrank::corpus::read_answers(&af)?;
    let model = CrossEncoder::new(settings.encoder_config(vocab.len(), &cfg)?, cfg.seed)?;
    rec.config("train", &cfg)?;
    rec.config("model", ModelSpec::Encoder(model.config.clone()))?;
    let ck = pretrain_mlm(&model, &corpus, &vocab, &cfg)?;
    let out = out.map_or_else(|| dir.join("mlm.frck"), Path::to_path_buf);
    save_checkpoint(&ck, &out)?;
    for r in &ck.history {
        println!("epoch {}  mlm {:.6}", r.epoch, r.train_loss);
    }
    rec.output(&out);
    rec.finish(&beside(&out))?;
    Ok(())
}

struct DomainData {
    vocab: Vocabulary,
    corpus: AnswerCorpus,
    texts: BTreeMap<String, String>,
    train: Samples,
    valid: Option<Samples>,
}

fn load_domain(dir: &Path, layout: &str, rec: &mut Recorder) -> Result<DomainData, Failure> {
    let vocab = load_vocab(dir, rec)?;
    let (corpus, questions) = load_all(dir, rec)?;
    let train = read_samples_input(&dir.join(format!("train.{layout}.tsv")), rec)?;
    let valid_path = dir.join(format!("valid.{layout}.tsv"));
    let valid = if valid_path.exists() {
        Some(read_samples_input(&valid_path, rec)?).filter(|v| !v.is_empty())
    } else {
        None
    };
    Ok(DomainData {
        vocab,
        corpus,
        texts: question_texts(&questions),
        train,
        valid,
    })
}

fn run_tanda(
    settings: &Settings,
    general: &Path,
    target: &Path,
    objective: FineTuneObjective,
    init: Option<&Path>,
    out: Option<&Path>,
) -> Result<(), Failure> {
    let mut rec = recorder(settings, "tanda")?;
    let (objective, layout) = match objective {
        FineTuneObjective::Pointwise => (Objective::Pointwise, "pointwise"),
        FineTuneObjective::Pairwise => (Objective::Pairwise, "pairwise"),
    };
    let mut cfg = settings.train_config(objective)?;
    let g = load_domain(general, layout, &mut rec)?;
    let t = load_domain(target, layout, &mut rec)?;
    let model = cross_encoder(settings, &g.vocab, &mut cfg, init, &mut rec)?;
    rec.config("train", &cfg)?;
    rec.config("model", ModelSpec::CrossEncoder(model.config.clone()))?;
    fn stage<'a>(d: &'a DomainData, config: &TrainConfig) -> Stage<'a> {
        Stage {
            data: TrainData {
                train: &d.train,
                valid: d.valid.as_ref(),
                questions: &d.texts,
                answers: &d.corpus,
            },
            vocab: &d.vocab,
            config: config.clone(),
        }
    }
    let out_dir = out.unwrap_or(target);
    fs::create_dir_all(out_dir)?;
    let outcome = transfer_and_adapt(&model, &stage(&g, &cfg), &stage(&t, &cfg), out_dir)?;
    for (name, ck) in [("transfer", &outcome.transfer), ("adapt", &outcome.adapted)] {
        for r in &ck.history {
            println!("{name} epoch {}  train {:.6}", r.epoch, r.train_loss);
        }
    }
    rec.output(&outcome.transfer_path);
    rec.output(&outcome.adapted_path);
    rec.finish(&beside(&outcome.adapted_path))?;
    Ok(())
}

enum Reranker {
    Bm25,
    Cross(CrossEncoder),
    Lstm(QaLstm),
}

fn load_reranker(
    settings: &Settings,
    path: Option<&Path>,
    vocab: Option<&Vocabulary>,
    rec: &mut Recorder,
) -> Result<Reranker, Failure> {
    let (Some(path), Some(vocab)) = (path, vocab) else {
        return Ok(Reranker::Bm25);
    };
    rec.input(path)?;
    let ck = load_checkpoint(path)?;
    if !settings.allow_vocab_mismatch {
        ck.check_vocab(vocab)?;
    }
    Ok(match &ck.model {
        ModelSpec::CrossEncoder(_) => Reranker::Cross(ck.to_cross_encoder()?),
        ModelSpec::QaLstm(_) => Reranker::Lstm(ck.to_qa_lstm()?),
        ModelSpec::Encoder(_) => {
            return Err(Failure::usage(format!(
                "{} is a pre-trained encoder without a relevance head; fine-tune it with `train --init`",
                path.display()
            )))
        }
    })
}

fn scorer<'a>(
    reranker: &'a Reranker,
    vocab: Option<&'a Vocabulary>,
    index: &'a InvertedIndex,
    params: Bm25Params,
) -> Scorer<'a> {
    match (reranker, vocab) {
        (Reranker::Cross(model), Some(vocab)) => Scorer::CrossEncoder {
            model,
            vocab,
            max_len: model.config.max_len,
        },
        (Reranker::Lstm(model), Some(vocab)) => Scorer::QaLstm { model, vocab },
        _ => Scorer::Bm25 { index, params },
    }
}

fn run_rerank(
    settings: &Settings,
    split: &str,
    candidates: Option<&Path>,
    model: &Path,
    out: Option<&Path>,
) -> Result<(), Failure> {
    let mut rec = recorder(settings, "rerank")?;
    let top_k = settings.top_k()?;
    rec.config("top_k", top_k)?;
    let dir = &settings.data_dir;
    let (corpus, questions) = load_split(dir, split, &mut rec)?;
    let vocab = load_vocab(dir, &mut rec)?;
    let reranker = load_reranker(settings, Some(model), Some(&vocab), &mut rec)?;
    let cand_path = candidates.map_or_else(|| dir.join(format!("bm25.{split}.run")), Path::to_path_buf);
    rec.input(&cand_path)?;
    let pool = read_run(&cand_path)?;
    let index = load_index(&dir.join(INDEX), &mut rec)?;
    let scorer = scorer(&reranker, Some(&vocab), &index, settings.bm25()?);
    let mut run = Run::new();
    for q in &questions {
        let ids: Vec<&str> = pool
            .get(&q.id)
            .map(|l| l.iter().map(|(id, _)| id.as_str()).collect())
            .unwrap_or_default();
        let ranked = rerank(&scorer, &q.id, &q.text, &ids, &corpus, top_k)?;
        run.insert(ranked.question_id, ranked.answers);
    }
    let out = out.map_or_else(|| dir.join(format!("rerank.{split}.run")), Path::to_path_buf);
    write_run(&run, &out, scorer.name())?;
    rec.output(&out);
    rec.finish(&beside(&out))?;
    Ok(())
}

fn run_pipeline(
    settings: &Settings,
    split: &str,
    model: Option<&Path>,
    index: Option<&Path>,
    out: Option<&Path>,
) -> Result<(), Failure> {
    let mut rec = recorder(settings, "pipeline")?;
    let (pool_size, top_k, params) = (settings.pool_size()?, settings.top_k()?, settings.bm25()?);
    rec.config("pool_size", pool_size)?;
    rec.config("top_k", top_k)?;
    rec.config("bm25", params)?;
    let dir = &settings.data_dir;
    let (corpus, questions) = load_split(dir, split, &mut rec)?;
    let index = load_index(&index.map_or_else(|| dir.join(INDEX), Path::to_path_buf), &mut rec)?;
    let vocab = model.map(|_| load_vocab(dir, &mut rec)).transpose()?;
    let reranker = load_reranker(settings, model, vocab.as_ref(), &mut rec)?;
    let scorer = scorer(&reranker, vocab.as_ref(), &index, params);
    let mut run = Run::new();
    for q in &questions {
        let ranked = answer_pipeline(&q.id, &q.text, &index, params, &scorer, &corpus, pool_size, top_k)?;
        run.insert(ranked.question_id, ranked.answers);
    }
    let out = out.map_or_else(|| dir.join(format!("pipeline.{split}.run")), Path::to_path_buf);
    write_run(&run, &out, scorer.name())?;
    rec.output(&out);
    rec.finish(&beside(&out))?;
    Ok(())
}

fn run_eval(settings: &Settings, run_path: &Path, qrels: &Path, json: Option<&Path>) -> Result<(), Failure> {
    let mut rec = recorder(settings, "eval")?;
    rec.input(run_path)?;
    rec.input(qrels)?;
    let ks = MetricKs::default();
    rec.config("ks", ks)?;
    let run = read_run(run_path)?;
    let questions = read_qrels(qrels)?;
    let report = evaluate(&run, &questions, ks)?;
    print!("{}", report.to_table());
    let manifest = match json {
        Some(path) => {
            let mut text = serde_json::to_string_pretty(&report)?;
            text.push('\n');
            fs::write(path, text)?;
            rec.output(path);
            beside(path)
        }
        None => {
            let mut name = run_path.file_name().unwrap_or_default().to_os_string();
            name.push(".eval.manifest.json");
            run_path.with_file_name(name)
        }
    };
    rec.finish(&manifest)?;
    Ok(())
}

fn run_query(settings: &Settings, model: Option<&Path>, index: Option<&Path>) -> Result<(), Failure> {
    let mut rec = recorder(settings, "query")?;
    let (pool_size, top_k, params) = (settings.pool_size()?, settings.top_k()?, settings.bm25()?);
    rec.config("pool_size", pool_size)?;
    rec.config("top_k", top_k)?;
    let dir = &settings.data_dir;
    let af = dir.join(ANSWERS);
    rec.input(&af)?;
    let corpus = finrank::corpus::read_answers(&af)?;
    let index = load_index(&index.map_or_else(|| dir.join(INDEX), Path::to_path_buf), &mut rec)?;
    let vocab = model.map(|_| load_vocab(dir, &mut rec)).transpose()?;
    let reranker = load_reranker(settings, model, vocab.as_ref(), &mut rec)?;
    let scorer = scorer(&reranker, vocab.as_ref(), &index, params);

    let stdin = io::stdin();
    let mut stdout = io::stdout().lock();
    let mut asked = 0usize;
    for line in stdin.lock().lines() {
        let line = line?;
        let line = line.trim();
        if line == ":quit" {
            break;
        }
        let text = clean_text(line);
        if text.is_empty() {
            continue;
        }
        asked += 1;
        let ranked = answer_pipeline("query", &text, &index, params, &scorer, &corpus, pool_size, top_k)?;
        if ranked.answers.is_empty() {
            writeln!(stdout, "no matching answers")?;
        }
        for (rank, (aid, score)) in ranked.answers.iter().enumerate() {
            let answer = corpus.get(aid).unwrap_or_default();
            writeln!(stdout, "{}\t{score:.6}\t{aid}\t{answer}", rank + 1)?;
        }
        writeln!(stdout)?;
        stdout.flush()?;
    }
    rec.config("questions_asked", asked)?;
    rec.finish(&dir.join("query.manifest.json"))?;
    Ok(())
}
