use alloc::format;
use alloc::string::String;

use super::{sgd_train, Objective, RateConfig, TrainConfig, TrainOutcome};
use crate::corpus::CorpusSplits;
use crate::error::{Error, Result};
use crate::models::{Architecture, DecoderKind, EncoderKind, ParamGroup, Seq2SeqModel};

/// Two-phase training recipes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PretrainKind {
    /// Train a deterministic autoencoder, reset the decoder, then train the VAE.
    PreAe,
    /// Train a language model, freeze it as an average-pooled encoder, then
    /// learn the latent head and decoder.
    PreLm,
    /// Train encoder and latent head against a unigram decoder, freeze them,
    /// then fit a fresh recurrent decoder on reconstruction alone.
    PreUni,
}

impl PretrainKind {
    pub fn name(self) -> &'static str {
        match self {
            PretrainKind::PreAe => "pre-ae",
            PretrainKind::PreLm => "pre-lm",
            PretrainKind::PreUni => "pre-uni",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::PreAe, Self::PreLm, Self::PreUni]
            .into_iter()
            .find(|k| k.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutcome {
    pub phase1: TrainOutcome,
    pub phase2: TrainOutcome,
}

fn copy_group_params(dst: &mut Seq2SeqModel, src: &Seq2SeqModel, pairs: &[(&str, &str)]) -> Result<()> {
    for (from, to) in pairs {
        let si = src
            .params
            .find(from)
            .ok_or_else(|| Error::Config(format!("phase-1 checkpoint lacks {from}")))?;
        let di = dst
            .params
            .find(to)
            .ok_or_else(|| Error::Config(format!("phase-2 model lacks {to}")))?;
        let value = src.params.value(si);
        if value.shape() != dst.params.value(di).shape() {
            return Err(Error::Config(format!(
                "{from} {:?} cannot initialize {to} {:?}",
                value.shape(),
                dst.params.value(di).shape()
            )));
        }
        *dst.params.value_mut(di) = value.clone();
    }
    Ok(())
}

/// Runs the two phases of `kind` and returns both outcomes; the phase-2
/// checkpoint is the model for downstream use.
///
/// `arch` is the final VAE architecture. Its decoder must be the conditional
/// LSTM; PreLM additionally requires the average-pooled LSTM encoder.
pub fn pretrain_pipeline(
    kind: PretrainKind,
    arch: &Architecture,
    rate: &RateConfig,
    phase1: &TrainConfig,
    phase2: &TrainConfig,
    data: &CorpusSplits,
) -> Result<PipelineOutcome> {
    if arch.decoder != DecoderKind::LstmConditional {
        return Err(Error::Config(format!(
            "{} needs a conditional LSTM decoder in the final model",
            kind.name()
        )));
    }
    let (train, valid) = (&data.train, &data.valid);
    let note = |o: &mut TrainOutcome, phase: &str| {
        o.checkpoint.meta.note = String::from(kind.name()) + "/" + phase;
    };
    match kind {
        PretrainKind::PreAe => {
            let model = Seq2SeqModel::new(arch.clone(), phase1.seeds.init)?;
            let mut p1 = sgd_train(model, train, valid, phase1, &Objective::Autoencoder, &[])?;
            note(&mut p1, "phase1");
            let mut model = p1.model()?;
            model.reinit_group(ParamGroup::Decoder, phase2.seeds.init);
            let mut p2 = sgd_train(model, train, valid, phase2, &Objective::Elbo(*rate), &[])?;
            note(&mut p2, "phase2");
            Ok(PipelineOutcome { phase1: p1, phase2: p2 })
        }
        PretrainKind::PreLm => {
            if arch.encoder != Some(EncoderKind::LstmAvg) {
                return Err(Error::Config("pre-lm uses the average-pooled LSTM encoder".into()));
            }
            let lm_arch = Architecture {
                encoder: None,
                decoder: DecoderKind::LstmUnconditional,
                ..arch.clone()
            };
            let lm = Seq2SeqModel::new(lm_arch, phase1.seeds.init)?;
            let mut p1 = sgd_train(lm, train, valid, phase1, &Objective::LanguageModel, &[])?;
            note(&mut p1, "phase1");
            let lm = p1.model()?;
            let mut model = Seq2SeqModel::new(arch.clone(), phase2.seeds.init)?;
            copy_group_params(
                &mut model,
                &lm,
                &[
                    ("dec.embed", "enc.embed"),
                    ("dec.lstm.wx", "enc.lstm.wx"),
                    ("dec.lstm.wh", "enc.lstm.wh"),
                    ("dec.lstm.b", "enc.lstm.b"),
                ],
            )?;
            let mut p2 = sgd_train(model, train, valid, phase2, &Objective::Elbo(*rate), &[ParamGroup::Encoder])?;
            note(&mut p2, "phase2");
            Ok(PipelineOutcome { phase1: p1, phase2: p2 })
        }
        PretrainKind::PreUni => {
            let uni_arch = Architecture {
                decoder: DecoderKind::Unigram,
                ..arch.clone()
            };
            let model = Seq2SeqModel::new(uni_arch, phase1.seeds.init)?;
            let mut p1 = sgd_train(model, train, valid, phase1, &Objective::Elbo(*rate), &[])?;
            note(&mut p1, "phase1");
            let uni = p1.model()?;
            let mut model = Seq2SeqModel::new(arch.clone(), phase2.seeds.init)?;
            let shared: alloc::vec::Vec<(String, String)> = uni
                .params
                .iter()
                .filter(|p| matches!(p.group, ParamGroup::Encoder | ParamGroup::Latent))
                .map(|p| (p.name.clone(), p.name.clone()))
                .collect();
            let pairs: alloc::vec::Vec<(&str, &str)> =
                shared.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
            copy_group_params(&mut model, &uni, &pairs)?;
            let mut p2 = sgd_train(
                model,
                train,
                valid,
                phase2,
                &Objective::Reconstruction,
                &[ParamGroup::Encoder, ParamGroup::Latent],
            )?;
            note(&mut p2, "phase2");
            p2.checkpoint.meta.rate = Some(*rate);
            Ok(PipelineOutcome { phase1: p1, phase2: p2 })
        }
    }
}
