use alloc::format;
use alloc::string::String;

use super::{Architecture, ParamSet, Seq2SeqModel};
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::objectives::{RateConfig, Seeds};

/// How a checkpoint was produced.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingMeta {
    /// Rate configuration of the final phase; `None` for objectives without a KL term.
    pub rate: Option<RateConfig>,
    pub seeds: Seeds,
    /// Epoch of the returned (best-validation) parameters, 1-based.
    pub epoch: usize,
    /// Free-form provenance, e.g. the training pipeline.
    pub note: String,
}

/// Parameters plus everything needed to rebuild and validate the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub arch: Architecture,
    pub vocab_hash: u64,
    pub params: ParamSet,
    pub meta: TrainingMeta,
}

impl ModelCheckpoint {
    pub fn new(model: &Seq2SeqModel, vocab: &Vocabulary, meta: TrainingMeta) -> Self {
        ModelCheckpoint {
            arch: model.arch.clone(),
            vocab_hash: vocab.content_hash(),
            params: model.params.clone(),
            meta,
        }
    }

    /// Rebuilds the model, validating parameter names and shapes.
    pub fn model(&self) -> Result<Seq2SeqModel> {
        Seq2SeqModel::from_params(self.arch.clone(), self.params.clone())
    }

    pub fn check_vocab(&self, vocab: &Vocabulary) -> Result<()> {
        if vocab.content_hash() != self.vocab_hash || vocab.len() != self.arch.vocab_size {
            return Err(Error::Config(format!(
                "checkpoint vocabulary hash {:016x} does not match corpus vocabulary {:016x}",
                self.vocab_hash,
                vocab.content_hash()
            )));
        }
        Ok(())
    }
}
