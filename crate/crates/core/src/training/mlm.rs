//! Masked-LM further pre-training of the encoder on answer texts.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{into_net, run_epochs, Checkpoint, Example, Model, ModelSpec, Objective, TrainConfig};
use crate::corpus::AnswerCorpus;
use crate::error::{Error, Result};
use crate::neural::encoder::CrossEncoder;
use crate::textenc::{encode_cls_single, tokenize, PairEncoding, Vocabulary, CLS, MASK, RESERVED, SEP};

/// Draws masked positions for one `[CLS] a… [SEP]` sequence.
///
/// Each real token is selected with probability `rate`; when none is, one is
/// chosen uniformly. A selected token becomes `[MASK]` 80% of the time, a
/// random non-reserved token 10% and stays unchanged 10%. Returns the
/// corrupted sequence, the original ids and their positions.
pub fn mask_sequence(
    seq: &PairEncoding,
    rate: f64,
    vocab_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(PairEncoding, Vec<usize>, Vec<usize>)> {
    let real: Vec<usize> = (0..seq.ids.len())
        .filter(|&i| seq.mask[i] == 1 && seq.ids[i] != CLS && seq.ids[i] != SEP)
        .collect();
    if real.is_empty() {
        return Err(Error::EmptySequence);
    }
    let mut positions: Vec<usize> = real.iter().copied().filter(|_| rng.gen::<f64>() < rate).collect();
    if positions.is_empty() {
        positions.push(real[rng.gen_range(0..real.len())]);
    }
    let mut out = seq.clone();
    let mut targets = Vec::with_capacity(positions.len());
    for &p in &positions {
        targets.push(seq.ids[p]);
        let r: f64 = rng.gen();
        if r < 0.8 {
            out.ids[p] = MASK;
        } else if r < 0.9 {
            out.ids[p] = if vocab_size > RESERVED.len() {
                rng.gen_range(RESERVED.len()..vocab_size)
            } else {
                MASK
            };
        }
    }
    Ok((out, targets, positions))
}

/// Trains the encoder with its masked-LM head on every answer, encoded as a
/// single `[CLS] a… [SEP]` sequence, and returns the encoder weights only.
/// Masks are redrawn every epoch.
pub fn pretrain_mlm(
    model: &CrossEncoder,
    corpus: &AnswerCorpus,
    vocab: &Vocabulary,
    cfg: &TrainConfig,
) -> Result<Checkpoint> {
    cfg.validate()?;
    if cfg.objective != Objective::Mlm {
        return Err(Error::Config(format!("masked-LM pre-training needs the mlm objective, not {}", cfg.objective)));
    }
    if corpus.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if model.config.vocab_size != vocab.len() {
        return Err(Error::Config("model and vocabulary sizes differ".into()));
    }
    let max_len = cfg.max_len.min(model.config.max_len);
    let clean: Vec<PairEncoding> = corpus
        .iter()
        .map(|(_, text)| encode_cls_single(&tokenize(text), vocab, max_len))
        .collect::<Result<_>>()?;
    let clean: Vec<PairEncoding> = clean.into_iter().filter(|s| s.mask.iter().filter(|&&m| m == 1).count() > 2).collect();
    if clean.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut model = model.clone();
    model.config.dropout = cfg.dropout;
    let config = model.config.clone();
    let (net, mut params) = into_net(Model::CrossEncoder(model));

    let placeholder = || Example::Masked {
        seq: PairEncoding {
            ids: Vec::new(),
            segment_ids: Vec::new(),
            mask: Vec::new(),
        },
        targets: Vec::new(),
        positions: Vec::new(),
    };
    let mut examples: Vec<Example> = clean.iter().map(|_| placeholder()).collect();
    let vocab_size = config.vocab_size;
    let rate = cfg.mask_rate;
    let mut remask = |rng: &mut ChaCha8Rng, out: &mut [Example]| -> Result<()> {
        for (slot, seq) in out.iter_mut().zip(&clean) {
            let (seq, targets, positions) = mask_sequence(seq, rate, vocab_size, rng)?;
            *slot = Example::Masked { seq, targets, positions };
        }
        Ok(())
    };
    let out = run_epochs(&net, &mut params, &mut examples, Some(&mut remask), None, cfg)?;

    let mut encoder = crate::neural::ParameterStore::new();
    for (name, t) in out.best_params.iter().filter(|(n, _)| n.starts_with("enc.")) {
        encoder.insert(name, t.clone())?;
    }
    let mut ckpt = Checkpoint::new(ModelSpec::Encoder(config), vocab.hash(), &encoder);
    ckpt.history = out.history;
    ckpt.best_epoch = Some(out.best_epoch);
    Ok(ckpt)
}
