//! Mini-batch Adam training for every objective, masked-LM pre-training,
//! two-stage transfer-then-adapt fine-tuning and checkpoint files.

pub mod checkpoint;
pub mod config;
pub mod mlm;
pub mod tanda;

use std::collections::BTreeMap;
use std::thread;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, EpochRecord, ModelSpec, OptimizerState};
pub use config::{parse_key_values, Objective, TrainConfig};
pub use mlm::pretrain_mlm;
pub use tanda::{transfer_and_adapt, Stage, TandaOutcome};

use crate::corpus::{AnswerCorpus, Samples};
use crate::error::{Error, Result};
use crate::neural::encoder::CrossEncoder;
use crate::neural::lstm::QaLstm;
use crate::neural::{adam_step, loss, AdamState, ForwardCtx, Graph, LrSchedule, ParameterStore, Var};
use crate::textenc::{encode_pair, encode_single, tokenize, PairEncoding, SeqEncoding, Vocabulary};

/// Examples reduced together before their gradients join the batch sum.
/// Fixed so that summation order never depends on the thread count.
const GROUP: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    CrossEncoder(CrossEncoder),
    QaLstm(QaLstm),
}

impl Model {
    pub fn spec(&self) -> ModelSpec {
        match self {
            Model::CrossEncoder(m) => ModelSpec::CrossEncoder(m.config.clone()),
            Model::QaLstm(m) => ModelSpec::QaLstm(m.config.clone()),
        }
    }

    pub fn params(&self) -> &ParameterStore {
        match self {
            Model::CrossEncoder(m) => &m.params,
            Model::QaLstm(m) => &m.params,
        }
    }
}

/// Samples plus the texts they refer to.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub train: &'a Samples,
    pub valid: Option<&'a Samples>,
    pub questions: &'a BTreeMap<String, String>,
    pub answers: &'a AnswerCorpus,
}

pub(crate) enum Example {
    Point { pair: PairEncoding, label: u8 },
    Pair { pos: PairEncoding, neg: PairEncoding },
    Triple { q: SeqEncoding, pos: SeqEncoding, neg: SeqEncoding },
    Masked { seq: PairEncoding, targets: Vec<usize>, positions: Vec<usize> },
}

/// Architecture plus hyperparameters; parameters live in the trainer.
pub(crate) enum Net {
    CrossEncoder(CrossEncoder),
    QaLstm(QaLstm),
}

impl Net {
    pub(crate) fn example_loss(&self, g: &mut Graph, ex: &Example, cfg: &TrainConfig, ctx: &mut ForwardCtx) -> Result<Var> {
        match (self, ex) {
            (Net::CrossEncoder(m), Example::Point { pair, label }) => {
                let p = m.relevance(g, pair, ctx)?;
                loss::pointwise(g, p, &[*label])
            }
            (Net::CrossEncoder(m), Example::Pair { pos, neg }) => {
                let yp = m.relevance(g, pos, ctx)?;
                let yn = m.relevance(g, neg, ctx)?;
                loss::pairwise(g, yp, yn, cfg.lambda1, cfg.lambda2, cfg.margin)
            }
            (Net::CrossEncoder(m), Example::Masked { seq, targets, positions }) => {
                let logits = m.mlm_logits(g, seq, ctx)?;
                loss::mlm(g, logits, targets, positions)
            }
            (Net::QaLstm(m), Example::Triple { q, pos, neg }) => {
                let qv = m.encode(g, q, ctx)?;
                let pv = m.encode(g, pos, ctx)?;
                let nv = m.encode(g, neg, ctx)?;
                let cp = g.cosine(qv, pv)?;
                let cn = g.cosine(qv, nv)?;
                loss::hinge(g, cp, cn, cfg.margin)
            }
            _ => Err(Error::Config("samples do not match the model objective".into())),
        }
    }
}

fn question_text<'a>(data: &TrainData<'a>, id: &str) -> Result<&'a str> {
    data.questions
        .get(id)
        .map(String::as_str)
        .ok_or_else(|| Error::UnknownDocument(format!("question {id}")))
}

fn answer_text<'a>(data: &TrainData<'a>, id: &str) -> Result<&'a str> {
    data.answers.get(id).ok_or_else(|| Error::UnknownDocument(id.to_string()))
}

fn encode_examples(
    samples: &Samples,
    data: &TrainData,
    model: &Model,
    vocab: &Vocabulary,
    cfg: &TrainConfig,
) -> Result<Vec<Example>> {
    let pair = |q: &str, a: &str, max_len: usize| encode_pair(&tokenize(q), &tokenize(a), vocab, max_len);
    match (model, cfg.objective, samples) {
        (Model::CrossEncoder(m), Objective::Pointwise, Samples::Pointwise(list)) => {
            let len = cfg.max_len.min(m.config.max_len);
            list.iter()
                .map(|s| {
                    Ok(Example::Point {
                        pair: pair(question_text(data, &s.question_id)?, answer_text(data, &s.answer_id)?, len)?,
                        label: s.label,
                    })
                })
                .collect()
        }
        (Model::CrossEncoder(m), Objective::Pairwise, Samples::Pairwise(list)) => {
            let len = cfg.max_len.min(m.config.max_len);
            list.iter()
                .map(|s| {
                    let q = question_text(data, &s.question_id)?;
                    Ok(Example::Pair {
                        pos: pair(q, answer_text(data, &s.positive_id)?, len)?,
                        neg: pair(q, answer_text(data, &s.negative_id)?, len)?,
                    })
                })
                .collect()
        }
        (Model::QaLstm(m), Objective::Hinge, Samples::Pairwise(list)) => {
            let len = cfg.max_len.min(m.config.max_len);
            let single = |t: &str| encode_single(&tokenize(t), vocab, len);
            list.iter()
                .map(|s| {
                    Ok(Example::Triple {
                        q: single(question_text(data, &s.question_id)?),
                        pos: single(answer_text(data, &s.positive_id)?),
                        neg: single(answer_text(data, &s.negative_id)?),
                    })
                })
                .collect()
        }
        (model, objective, samples) => Err(Error::Config(format!(
            "objective {objective} cannot train a {} model on {} samples",
            model.spec().kind(),
            match samples {
                Samples::Pointwise(_) => "pointwise",
                Samples::Pairwise(_) => "triple",
            }
        ))),
    }
}

fn numerical_context(err: Error, epoch: usize, batch: usize) -> Error {
    match err {
        Error::NonFinite(what) => Error::NonFinite(format!("{what} at epoch {epoch}, batch {batch}")),
        other => other,
    }
}

/// Loss and gradient sum for each fixed-size group of `items`, computed on up
/// to one thread per group and returned in group order.
fn group_gradients(
    net: &Net,
    params: &ParameterStore,
    items: &[(&Example, u64)],
    cfg: &TrainConfig,
) -> Result<Vec<(Vec<f64>, ParameterStore)>> {
    let run_group = |group: &[(&Example, u64)]| -> Result<(Vec<f64>, ParameterStore)> {
        let mut losses = Vec::with_capacity(group.len());
        let mut total: Option<ParameterStore> = None;
        for (ex, seed) in group {
            let mut g = Graph::new(params);
            let mut ctx = ForwardCtx::train(ChaCha8Rng::seed_from_u64(*seed));
            let l = net.example_loss(&mut g, ex, cfg, &mut ctx)?;
            let value = g.value(l).data()[0];
            if !value.is_finite() {
                return Err(Error::NonFinite("training loss".into()));
            }
            losses.push(value);
            let grads = g.backward(l)?;
            match &mut total {
                None => total = Some(grads),
                Some(t) => t.add_scaled(&grads, 1.0)?,
            }
        }
        Ok((losses, total.expect("groups are non-empty")))
    };
    let groups: Vec<&[(&Example, u64)]> = items.chunks(GROUP).collect();
    if groups.len() == 1 {
        return Ok(vec![run_group(groups[0])?]);
    }
    thread::scope(|s| {
        let handles: Vec<_> = groups.iter().map(|grp| s.spawn(move || run_group(grp))).collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("training worker panicked"))
            .collect()
    })
}

/// Mean eval-mode loss over `examples`.
pub(crate) fn mean_eval_loss(net: &Net, params: &ParameterStore, examples: &[Example], cfg: &TrainConfig) -> Result<f64> {
    let workers = thread::available_parallelism().map_or(1, |n| n.get());
    let chunk = examples.len().div_ceil(workers).max(1);
    let parts: Vec<Result<Vec<f64>>> = thread::scope(|s| {
        let handles: Vec<_> = examples
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|ex| {
                            let mut g = Graph::new(params);
                            let l = net.example_loss(&mut g, ex, cfg, &mut ForwardCtx::eval())?;
                            Ok(g.value(l).data()[0])
                        })
                        .collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut total = 0.0;
    for part in parts {
        total += part?.iter().sum::<f64>();
    }
    if !total.is_finite() {
        return Err(Error::NonFinite("validation loss".into()));
    }
    Ok(total / examples.len() as f64)
}

/// Rewrites the examples before each epoch; masked-LM redraws its masks here.
pub(crate) type Refresh<'a> = dyn FnMut(&mut ChaCha8Rng, &mut [Example]) -> Result<()> + 'a;

pub(crate) struct LoopOutcome {
    pub best_params: ParameterStore,
    pub best_optimizer: AdamState,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

/// Seeded shuffle, mini-batch Adam and epoch-level best-model selection on
/// validation loss (training loss when there is no validation set).
pub(crate) fn run_epochs(
    net: &Net,
    params: &mut ParameterStore,
    examples: &mut [Example],
    mut refresh: Option<&mut Refresh>,
    valid: Option<&[Example]>,
    cfg: &TrainConfig,
) -> Result<LoopOutcome> {
    if examples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let batches_per_epoch = examples.len().div_ceil(cfg.batch_size);
    let schedule = LrSchedule::for_run(cfg.base_lr, cfg.warmup_steps, (cfg.epochs * batches_per_epoch) as u64);
    let mut state = AdamState::new(params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParameterStore, AdamState)> = None;

    for epoch in 0..cfg.epochs {
        if let Some(f) = refresh.as_mut() {
            f(&mut rng, examples)?;
        }
        let examples = &*examples;
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut rng);
        let seeds: Vec<u64> = order.iter().map(|_| rng.gen()).collect();
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let start = b * cfg.batch_size;
            let items: Vec<(&Example, u64)> = batch
                .iter()
                .zip(&seeds[start..start + batch.len()])
                .map(|(&i, &s)| (&examples[i], s))
                .collect();
            let groups = group_gradients(net, params, &items, cfg).map_err(|e| numerical_context(e, epoch, b))?;
            let mut grads = params.zeros_like();
            for (losses, g) in &groups {
                loss_sum += losses.iter().sum::<f64>();
                grads.add_scaled(g, 1.0 / batch.len() as f64)?;
            }
            adam_step(params, &grads, &mut state, &schedule, cfg.weight_decay)
                .map_err(|e| numerical_context(e, epoch, b))?;
        }
        let train_loss = loss_sum / examples.len() as f64;
        let valid_loss = match valid {
            Some(v) if !v.is_empty() => Some(mean_eval_loss(net, params, v, cfg)?),
            _ => None,
        };
        history.push(EpochRecord {
            epoch,
            train_loss,
            valid_loss,
        });
        let criterion = valid_loss.unwrap_or(train_loss);
        if best.as_ref().is_none_or(|(c, ..)| criterion < *c) {
            best = Some((criterion, epoch, params.clone(), state.clone()));
        }
    }
    let (_, best_epoch, best_params, best_optimizer) = best.expect("at least one epoch");
    Ok(LoopOutcome {
        best_params,
        best_optimizer,
        history,
        best_epoch,
    })
}

fn into_net(model: Model) -> (Net, ParameterStore) {
    match model {
        Model::CrossEncoder(mut m) => {
            let p = std::mem::take(&mut m.params);
            (Net::CrossEncoder(m), p)
        }
        Model::QaLstm(mut m) => {
            let p = std::mem::take(&mut m.params);
            (Net::QaLstm(m), p)
        }
    }
}

/// Trains `model` and returns the checkpoint of the epoch with minimal
/// validation loss, with the full history recorded inside it.
///
/// Pointwise and pairwise objectives train a cross-encoder; hinge trains a
/// QA-LSTM on triples. The dropout rate of `cfg` replaces the model's.
pub fn train(model: &Model, data: &TrainData, vocab: &Vocabulary, cfg: &TrainConfig) -> Result<Checkpoint> {
    cfg.validate()?;
    if cfg.objective == Objective::Mlm {
        return Err(Error::Config("use pretrain_mlm for the masked-LM objective".into()));
    }
    if data.train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let vocab_size = match model {
        Model::CrossEncoder(m) => m.config.vocab_size,
        Model::QaLstm(m) => m.config.vocab_size,
    };
    if vocab_size != vocab.len() {
        return Err(Error::Config(format!(
            "model vocabulary size {vocab_size} differs from vocabulary of {}",
            vocab.len()
        )));
    }
    let mut model = model.clone();
    match &mut model {
        Model::CrossEncoder(m) => m.config.dropout = cfg.dropout,
        Model::QaLstm(m) => m.config.dropout = cfg.dropout,
    }
    let mut examples = encode_examples(data.train, data, &model, vocab, cfg)?;
    let valid = data
        .valid
        .map(|v| encode_examples(v, data, &model, vocab, cfg))
        .transpose()?;
    let spec = model.spec();
    let (net, mut params) = into_net(model);
    let out = run_epochs(&net, &mut params, &mut examples, None, valid.as_deref(), cfg)?;
    let mut ckpt = Checkpoint::new(spec, vocab.hash(), &out.best_params).with_optimizer(&out.best_optimizer);
    ckpt.history = out.history;
    ckpt.best_epoch = Some(out.best_epoch);
    Ok(ckpt)
}

/// Hinge-loss training of the siamese QA-LSTM on triples.
pub fn train_qalstm(model: &QaLstm, data: &TrainData, vocab: &Vocabulary, cfg: &TrainConfig) -> Result<Checkpoint> {
    if cfg.objective != Objective::Hinge {
        return Err(Error::Config(format!("QA-LSTM trains with the hinge objective, not {}", cfg.objective)));
    }
    train(&Model::QaLstm(model.clone()), data, vocab, cfg)
}
