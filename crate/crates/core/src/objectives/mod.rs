//! Training objectives: closed-form KL, free bits, KL annealing and the
//! negative ELBo, plus the SGD loop and two-phase pretraining pipelines.

mod pretrain;
mod train;

use alloc::format;
use alloc::vec::Vec;

pub use pretrain::{pretrain_pipeline, PipelineOutcome, PretrainKind};
pub use train::{
    clip_factor, make_batches, sgd_train, EpochRecord, HalvingSchedule, ScheduleStep, Seeds, TrainConfig, TrainOutcome,
};

use crate::error::{Error, Result};
use crate::models::{sample_latent_vars, Bound, ForwardCtx, LatentPosterior, PosteriorVars, Seq2SeqModel};
use crate::rng;
use crate::tape::{Axis, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum FreeBitsFlavor {
    /// Plain ELBo.
    #[default]
    None,
    /// `max(KL, lambda)` on the batch-mean KL.
    Delta,
    /// `sum_j max(lambda / K, KL_j)` over the `K` latent components.
    PerComponent,
}

impl FreeBitsFlavor {
    pub fn name(self) -> &'static str {
        match self {
            FreeBitsFlavor::None => "none",
            FreeBitsFlavor::Delta => "delta",
            FreeBitsFlavor::PerComponent => "per-component",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::None, Self::Delta, Self::PerComponent]
            .into_iter()
            .find(|f| f.name() == s)
    }
}

/// Target rate and how it is enforced.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RateConfig {
    /// Target rate in nats.
    pub lambda: f64,
    pub flavor: FreeBitsFlavor,
    /// Linear KL annealing length in epochs; 0 disables annealing.
    pub anneal_epochs: usize,
}

impl RateConfig {
    pub fn plain() -> Self {
        Self::default()
    }

    pub fn delta(lambda: f64) -> Self {
        RateConfig {
            lambda,
            flavor: FreeBitsFlavor::Delta,
            anneal_epochs: 0,
        }
    }

    pub fn per_component(lambda: f64) -> Self {
        RateConfig {
            lambda,
            flavor: FreeBitsFlavor::PerComponent,
            anneal_epochs: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda {} must be a finite non-negative number", self.lambda)));
        }
        Ok(())
    }

    /// KL weight for 1-based `epoch`: `min(1, epoch / anneal_epochs)`, or 1
    /// without annealing.
    pub fn beta(&self, epoch: usize) -> f64 {
        if self.anneal_epochs == 0 {
            1.0
        } else {
            (epoch as f64 / self.anneal_epochs as f64).min(1.0)
        }
    }
}

/// KL divergence to the standard normal prior, total and per component.
#[derive(Debug, Clone, PartialEq)]
pub struct KlTerms {
    pub total: f64,
    pub components: Vec<f64>,
}

/// Closed-form `KL(N(mu, diag sigma2) || N(0, I))`, averaged over the rows of
/// `post` (one row gives the per-document value).
pub fn kl_diag_gauss(post: &LatentPosterior) -> KlTerms {
    let (n, d) = post.mu.shape();
    let mut components = alloc::vec![0.0; d];
    for i in 0..n {
        for (j, c) in components.iter_mut().enumerate() {
            let m = post.mu.get(i, j);
            let s2 = post.sigma2.get(i, j);
            *c += 0.5 * (m * m + s2 - 1.0 - libm::log(s2));
        }
    }
    for c in &mut components {
        *c /= n as f64;
    }
    KlTerms {
        total: components.iter().sum(),
        components,
    }
}

/// Applies the free-bits flavor and the annealing weight to a KL value.
pub fn apply_free_bits(kl_scalar: f64, kl_components: &[f64], cfg: &RateConfig, epoch: usize) -> Result<f64> {
    let sum: f64 = kl_components.iter().sum();
    if (sum - kl_scalar).abs() > 1e-9 * (1.0 + kl_scalar.abs()) {
        return Err(Error::Contract(format!(
            "KL components sum to {sum}, expected {kl_scalar}"
        )));
    }
    let k = kl_components.len().max(1) as f64;
    let modified = match cfg.flavor {
        FreeBitsFlavor::None => kl_scalar,
        FreeBitsFlavor::Delta => kl_scalar.max(cfg.lambda),
        FreeBitsFlavor::PerComponent => kl_components.iter().map(|&c| c.max(cfg.lambda / k)).sum(),
    };
    Ok(cfg.beta(epoch) * modified)
}

/// Tape version: batch-mean KL components (`1 x d`) from a posterior.
pub fn kl_components_vars(tape: &mut Tape, post: PosteriorVars) -> Result<Var> {
    let mu2 = tape.mul(post.mu, post.mu)?;
    let logs2 = tape.log(post.sigma2);
    let a = tape.add(mu2, post.sigma2)?;
    let b = tape.sub(a, logs2)?;
    let c = tape.offset(b, -1.0);
    let per_comp = tape.mean_axis(c, Axis::Rows);
    Ok(tape.scale(per_comp, 0.5))
}

/// Tape version of [`apply_free_bits`]; returns the modified rate term.
pub fn free_bits_vars(tape: &mut Tape, kl_components: Var, cfg: &RateConfig, epoch: usize) -> Var {
    let k = tape.value(kl_components).cols().max(1) as f64;
    let modified = match cfg.flavor {
        FreeBitsFlavor::None => tape.sum(kl_components),
        FreeBitsFlavor::Delta => {
            let total = tape.sum(kl_components);
            tape.clamp_min(total, cfg.lambda)
        }
        FreeBitsFlavor::PerComponent => {
            let clamped = tape.clamp_min(kl_components, cfg.lambda / k);
            tape.sum(clamped)
        }
    };
    let beta = cfg.beta(epoch);
    if beta == 1.0 {
        modified
    } else {
        tape.scale(modified, beta)
    }
}

/// What a training phase minimizes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    /// Negative ELBo with free bits and annealing.
    Elbo(RateConfig),
    /// Deterministic autoencoder: the decoder sees the posterior mean, no KL term.
    Autoencoder,
    /// Reconstruction of sampled `z` only (the KL is reported, not optimized).
    Reconstruction,
    /// Unconditional language model.
    LanguageModel,
}

impl Objective {
    pub fn name(&self) -> &'static str {
        match self {
            Objective::Elbo(_) => "elbo",
            Objective::Autoencoder => "autoencoder",
            Objective::Reconstruction => "reconstruction",
            Objective::LanguageModel => "language-model",
        }
    }

    pub fn rate(&self) -> Option<RateConfig> {
        match self {
            Objective::Elbo(r) => Some(*r),
            _ => None,
        }
    }
}

/// Batch-mean loss summary. `rate` is the raw KL before clamping.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub rate: f64,
    pub distortion: f64,
    pub objective: f64,
    pub beta: f64,
}

impl LossReport {
    /// Weighted mean of reports, by document count.
    pub fn weighted_mean(parts: &[(LossReport, usize)]) -> LossReport {
        let n: usize = parts.iter().map(|p| p.1).sum();
        let mut out = LossReport::default();
        if n == 0 {
            return out;
        }
        for (r, k) in parts {
            let w = *k as f64 / n as f64;
            out.rate += w * r.rate;
            out.distortion += w * r.distortion;
            out.objective += w * r.objective;
            out.beta += w * r.beta;
        }
        out
    }
}

/// Records the objective of one length-homogeneous batch on `tape`.
/// `eps` supplies the reparameterization noise (`B x d`) where `z` is sampled.
#[allow(clippy::too_many_arguments)]
pub fn batch_objective(
    model: &Seq2SeqModel,
    tape: &mut Tape,
    bound: &Bound,
    tokens: &[&[u32]],
    objective: &Objective,
    epoch: usize,
    eps: Option<Tensor>,
    ctx: &mut ForwardCtx,
) -> Result<(Var, LossReport)> {
    let b = tokens.len() as f64;
    let (z, kl) = match objective {
        Objective::LanguageModel => (None, None),
        _ => {
            let enc = model.encode_vars(tape, bound, tokens)?;
            let post = model.posterior_vars(tape, bound, enc.r)?;
            let kl = kl_components_vars(tape, post)?;
            let z = match objective {
                Objective::Autoencoder => post.mu,
                _ => {
                    let eps = eps.ok_or_else(|| Error::Contract("sampled objective needs noise".into()))?;
                    sample_latent_vars(tape, post, eps)?
                }
            };
            (Some(z), Some(kl))
        }
    };
    let nll = model.decoder_nll(tape, bound, z, tokens, ctx)?;
    let total_nll = tape.sum(nll);
    let distortion = tape.scale(total_nll, 1.0 / b);
    let rate = kl.map_or(0.0, |k| tape.value(k).sum());
    let (obj, beta) = match (objective, kl) {
        (Objective::Elbo(cfg), Some(k)) => {
            let modified = free_bits_vars(tape, k, cfg, epoch);
            (tape.add(modified, distortion)?, cfg.beta(epoch))
        }
        _ => (distortion, 0.0),
    };
    let report = LossReport {
        rate,
        distortion: tape.value(distortion).item(),
        objective: tape.value(obj).item(),
        beta,
    };
    Ok((obj, report))
}

/// Negative-ELBo report for one length-homogeneous batch with one posterior
/// sample per document drawn from `seed` (dropout off).
pub fn elbo_loss(
    model: &Seq2SeqModel,
    tokens: &[&[u32]],
    cfg: &RateConfig,
    epoch: usize,
    seed: u64,
) -> Result<LossReport> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, |_| false);
    let eps = rng::standard_normal(tokens.len(), model.arch.latent_dim, seed);
    let (_, report) = batch_objective(
        model,
        &mut tape,
        &bound,
        tokens,
        &Objective::Elbo(*cfg),
        epoch,
        Some(eps),
        &mut ForwardCtx::eval(),
    )?;
    Ok(report)
}

#[cfg(test)]
mod tests;
