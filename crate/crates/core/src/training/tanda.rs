//! Two-stage fine-tuning: transfer on a general dataset, then adapt on the
//! target domain starting from the transfer checkpoint.

use std::path::{Path, PathBuf};

use super::{load_checkpoint, save_checkpoint, train, Checkpoint, Model, Objective, TrainConfig, TrainData};
use crate::error::{Error, Result};
use crate::neural::encoder::CrossEncoder;
use crate::textenc::Vocabulary;

pub struct Stage<'a> {
    pub data: TrainData<'a>,
    pub vocab: &'a Vocabulary,
    pub config: TrainConfig,
}

#[derive(Debug, Clone)]
pub struct TandaOutcome {
    pub transfer: Checkpoint,
    pub adapted: Checkpoint,
    pub transfer_path: PathBuf,
    pub adapted_path: PathBuf,
}

pub const TRANSFER_FILE: &str = "transfer.frck";
pub const ADAPTED_FILE: &str = "adapted.frck";

/// Stage one fine-tunes `model` on `general`. Its best checkpoint is written
/// to `out_dir`, read back, checked against the target vocabulary and used
/// whole (encoder and head) to initialize stage two on `target`.
pub fn transfer_and_adapt(model: &CrossEncoder, general: &Stage, target: &Stage, out_dir: &Path) -> Result<TandaOutcome> {
    for stage in [general, target] {
        if !matches!(stage.config.objective, Objective::Pointwise | Objective::Pairwise) {
            return Err(Error::Config(format!(
                "transfer stages train pointwise or pairwise, not {}",
                stage.config.objective
            )));
        }
    }
    let transfer = train(&Model::CrossEncoder(model.clone()), &general.data, general.vocab, &general.config)?;
    let transfer_path = out_dir.join(TRANSFER_FILE);
    save_checkpoint(&transfer, &transfer_path)?;

    let reloaded = load_checkpoint(&transfer_path)?;
    reloaded.check_vocab(target.vocab)?;
    let start = reloaded.to_cross_encoder()?;
    let adapted = train(&Model::CrossEncoder(start), &target.data, target.vocab, &target.config)?;
    let adapted_path = out_dir.join(ADAPTED_FILE);
    save_checkpoint(&adapted, &adapted_path)?;
    Ok(TandaOutcome {
        transfer,
        adapted,
        transfer_path,
        adapted_path,
    })
}
