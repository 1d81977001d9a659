use alloc::vec::Vec;

use rand::seq::SliceRandom;

use super::{batch_objective, LossReport, Objective};
use crate::corpus::{Document, LabeledCorpus};
use crate::error::{Error, Result};
use crate::models::{ForwardCtx, ModelCheckpoint, ParamGroup, Seq2SeqModel, TrainingMeta};
use crate::rng;
use crate::tape::Tape;

/// The three independent seed streams of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Seeds {
    /// Parameter initialization.
    pub init: u64,
    /// Batch composition and order.
    pub data: u64,
    /// Latent noise and dropout masks.
    pub sample: u64,
}

impl Seeds {
    pub fn new(init: u64, data: u64, sample: u64) -> Self {
        Seeds { init, data, sample }
    }

    /// All three streams derived from one seed.
    pub fn from_one(seed: u64) -> Self {
        Seeds {
            init: rng::derive(seed, 11),
            data: rng::derive(seed, 12),
            sample: rng::derive(seed, 13),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    /// Non-improving validation epochs before the learning rate is halved.
    pub patience: usize,
    /// Training stops once the learning rate has been halved this many times.
    pub max_halvings: usize,
    /// Hard cap on epochs.
    pub max_epochs: usize,
    pub seeds: Seeds,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.5,
            clip_norm: 5.0,
            batch_size: 64,
            patience: 2,
            max_halvings: 4,
            max_epochs: 100,
            seeds: Seeds::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !(self.clip_norm > 0.0) || self.batch_size == 0 || self.patience == 0 {
            return Err(Error::Config(
                "lr must be >= 0 and clip_norm, batch_size, patience positive".into(),
            ));
        }
        Ok(())
    }
}

/// One epoch of history.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub train: LossReport,
    pub valid: LossReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Best-validation parameters.
    pub checkpoint: ModelCheckpoint,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl TrainOutcome {
    pub fn best(&self) -> &EpochRecord {
        &self.history[self.best_epoch - 1]
    }

    pub fn model(&self) -> Result<Seq2SeqModel> {
        self.checkpoint.model()
    }
}

/// Length-homogeneous batches of at most `batch_size` document indices, in
/// an order fixed by `seed`.
pub fn make_batches(docs: &[Document], batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut r = rng::rng(seed);
    let mut batches = Vec::new();
    for (_, mut idx) in crate::models::group_by_length(&docs.iter().map(|d| &d.token_ids[..]).collect::<Vec<_>>()) {
        idx.shuffle(&mut r);
        for chunk in idx.chunks(batch_size) {
            batches.push(chunk.to_vec());
        }
    }
    batches.shuffle(&mut r);
    batches
}

/// Multiplier applied to a gradient of global norm `norm` under clipping at `clip`.
pub fn clip_factor(norm: f64, clip: f64) -> f64 {
    if norm > clip {
        clip / norm
    } else {
        1.0
    }
}

/// Early-stopping schedule: the learning rate halves after `patience`
/// consecutive epochs without a new best validation objective, and training
/// stops at the `max_halvings`-th halving.
#[derive(Debug, Clone, PartialEq)]
pub struct HalvingSchedule {
    pub lr: f64,
    pub halvings: usize,
    pub best: f64,
    /// 1-based; 0 before the first observation.
    pub best_epoch: usize,
    epoch: usize,
    bad_epochs: usize,
    patience: usize,
    max_halvings: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScheduleStep {
    pub improved: bool,
    pub stop: bool,
}

impl HalvingSchedule {
    pub fn new(cfg: &TrainConfig) -> Self {
        HalvingSchedule {
            lr: cfg.lr,
            halvings: 0,
            best: f64::INFINITY,
            best_epoch: 0,
            epoch: 0,
            bad_epochs: 0,
            patience: cfg.patience,
            max_halvings: cfg.max_halvings,
        }
    }

    /// Records one epoch's validation objective.
    pub fn observe(&mut self, valid: f64) -> ScheduleStep {
        self.epoch += 1;
        if self.best_epoch == 0 || valid < self.best {
            self.best = valid;
            self.best_epoch = self.epoch;
            self.bad_epochs = 0;
            return ScheduleStep {
                improved: true,
                stop: false,
            };
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.patience {
            self.lr *= 0.5;
            self.halvings += 1;
            self.bad_epochs = 0;
        }
        ScheduleStep {
            improved: false,
            stop: self.halvings >= self.max_halvings,
        }
    }
}

const VALID_NOISE_TAG: u64 = 0x7661_6c69_64;

/// Eval-mode loss over a whole split with fixed noise.
pub(crate) fn evaluate(
    model: &Seq2SeqModel,
    corpus: &LabeledCorpus,
    objective: &Objective,
    epoch: usize,
    batch_size: usize,
    noise_seed: u64,
) -> Result<LossReport> {
    let mut parts = Vec::new();
    for (k, batch) in make_batches(&corpus.docs, batch_size, 0).iter().enumerate() {
        let tokens: Vec<&[u32]> = batch.iter().map(|&i| &corpus.docs[i].token_ids[..]).collect();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, |_| false);
        let eps = crate::rng::standard_normal(tokens.len(), model.arch.latent_dim, rng::derive(noise_seed, k as u64));
        let (_, report) = batch_objective(
            model,
            &mut tape,
            &bound,
            &tokens,
            objective,
            epoch,
            Some(eps),
            &mut ForwardCtx::eval(),
        )?;
        parts.push((report, tokens.len()));
    }
    Ok(LossReport::weighted_mean(&parts))
}

/// Mini-batch SGD with global gradient-norm clipping. The learning rate is
/// halved after `patience` consecutive epochs without a new best validation
/// objective, and training stops after `max_halvings` halvings (or
/// `max_epochs`). Returns the best-validation parameters.
pub fn sgd_train(
    mut model: Seq2SeqModel,
    train: &LabeledCorpus,
    valid: &LabeledCorpus,
    cfg: &TrainConfig,
    objective: &Objective,
    frozen: &[ParamGroup],
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if let Some(r) = objective.rate() {
        r.validate()?;
    }
    if train.is_empty() || valid.is_empty() {
        return Err(Error::InsufficientData("training needs non-empty train and valid splits".into()));
    }
    if !model.arch.has_latent() && *objective != Objective::LanguageModel {
        return Err(Error::Config("model without latent head can only train as a language model".into()));
    }
    let vocab = train.vocab.clone();
    let trainable: Vec<bool> = model.params.iter().map(|p| !frozen.contains(&p.group)).collect();
    let mut schedule = HalvingSchedule::new(cfg);
    let mut best: Option<crate::models::ParamSet> = None;
    let mut history = Vec::new();
    let valid_seed = rng::derive(cfg.seeds.sample, VALID_NOISE_TAG);

    for epoch in 1..=cfg.max_epochs.max(1) {
        let batches = make_batches(&train.docs, cfg.batch_size, rng::derive(cfg.seeds.data, epoch as u64));
        let mut parts = Vec::with_capacity(batches.len());
        for (bi, batch) in batches.iter().enumerate() {
            let tokens: Vec<&[u32]> = batch.iter().map(|&i| &train.docs[i].token_ids[..]).collect();
            let step_seed = rng::derive(rng::derive(cfg.seeds.sample, epoch as u64), bi as u64);
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, |g| !frozen.contains(&g));
            let eps = rng::standard_normal(tokens.len(), model.arch.latent_dim, rng::derive(step_seed, 1));
            let mut ctx = ForwardCtx::train(rng::derive(step_seed, 2));
            let (loss, report) =
                batch_objective(&model, &mut tape, &bound, &tokens, objective, epoch, Some(eps), &mut ctx)?;
            if !report.objective.is_finite() {
                return Err(Error::Divergence { epoch, batch: bi });
            }
            parts.push((report, tokens.len()));
            let mut grads = tape.backward(loss)?;
            let mut updates = Vec::with_capacity(model.params.len());
            let mut sq = 0.0;
            for (i, &v) in bound.vars().iter().enumerate() {
                if !trainable[i] {
                    continue;
                }
                if let Some(g) = grads.take(v) {
                    sq += g.sq_norm();
                    updates.push((i, g));
                }
            }
            let norm = libm::sqrt(sq);
            if !norm.is_finite() {
                return Err(Error::Divergence { epoch, batch: bi });
            }
            let scale = clip_factor(norm, cfg.clip_norm);
            for (i, g) in updates {
                model.params.value_mut(i).axpy(-schedule.lr * scale, &g);
            }
        }
        let train_report = LossReport::weighted_mean(&parts);
        let valid_report = evaluate(&model, valid, objective, epoch, cfg.batch_size, valid_seed)?;
        if !valid_report.objective.is_finite() {
            return Err(Error::Divergence { epoch, batch: batches.len() });
        }
        history.push(EpochRecord {
            epoch,
            lr: schedule.lr,
            train: train_report,
            valid: valid_report,
        });
        let step = schedule.observe(valid_report.objective);
        if step.improved {
            best = Some(model.params.clone());
        }
        if step.stop {
            break;
        }
    }
    let best_epoch = schedule.best_epoch;
    model.params = best.expect("at least one epoch ran");
    let meta = TrainingMeta {
        rate: objective.rate(),
        seeds: cfg.seeds,
        epoch: best_epoch,
        note: objective.name().into(),
    };
    Ok(TrainOutcome {
        checkpoint: ModelCheckpoint::new(&model, &vocab, meta),
        history,
        best_epoch,
    })
}
