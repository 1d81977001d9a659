//! Measurement instruments: per-position loss profiles, relative
//! improvement over a language model, memorization metrics with the
//! label-oracle baseline, argmax-position statistics of max-pooled encoders,
//! and importance-weighted likelihood estimates.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::corpus::{Document, LabeledCorpus};
use crate::error::{Error, Result};
use crate::models::{prediction_slots, sample_latent, LatentPosterior, Seq2SeqModel};
use crate::rng;
use crate::tape::{argmax_first, log_sum_exp};
use crate::tensor::Tensor;

const CHUNK: usize = 512;

/// Mean per-position reconstruction loss over documents of one length.
#[derive(Debug, Clone, PartialEq)]
pub struct LossProfile {
    pub doc_len: usize,
    /// Positions `1..=L`, then the EOS slot for recurrent decoders.
    pub per_position: Vec<f64>,
    pub n_docs: usize,
    pub model_id: String,
}

/// One seeded latent sample per row of `post`; row `i` uses `derive(seed, i)`.
pub fn sample_rows(post: &LatentPosterior, seed: u64) -> Tensor {
    let mut z = Tensor::zeros(post.rows(), post.mu.cols());
    for i in 0..post.rows() {
        let zi = sample_latent(&post.row(i), rng::derive(seed, i as u64));
        z.row_mut(i).copy_from_slice(zi.row(0));
    }
    z
}

/// Per-document NLL matrix (`n x P`) for same-length documents, conditioning
/// on one seeded posterior sample each (no latent for the language model).
fn sampled_nll(model: &Seq2SeqModel, docs: &[&[u32]], seed: u64) -> Result<Tensor> {
    let steps = prediction_slots(model.arch.decoder, docs[0].len());
    let mut out = Tensor::zeros(docs.len(), steps);
    for (c, chunk) in docs.chunks(CHUNK).enumerate() {
        let z = if model.arch.has_latent() {
            let post = model.posterior(chunk)?;
            Some(sample_rows(&post, rng::derive(seed, c as u64)))
        } else {
            None
        };
        let nll = model.nll_matrix(z.as_ref(), chunk)?;
        for (k, row) in (c * CHUNK..).zip(0..chunk.len()) {
            out.row_mut(k).copy_from_slice(nll.row(row));
        }
    }
    Ok(out)
}

pub fn position_loss_profile(model: &Seq2SeqModel, docs: &[Document], len: usize, seed: u64) -> Result<LossProfile> {
    let selected: Vec<&[u32]> = docs
        .iter()
        .filter(|d| d.len() == len)
        .map(|d| &d.token_ids[..])
        .collect();
    if selected.is_empty() {
        return Err(Error::InsufficientData(format!("no documents of length {len}")));
    }
    let nll = sampled_nll(model, &selected, seed)?;
    let n = selected.len();
    let per_position = (0..nll.cols())
        .map(|t| (0..n).map(|i| nll.get(i, t)).sum::<f64>() / n as f64)
        .collect();
    Ok(LossProfile {
        doc_len: len,
        per_position,
        n_docs: n,
        model_id: model.arch.describe(),
    })
}

/// `max(base(i) - r(i), 0) / base(i)` per position.
pub fn relative_improvement(profile: &LossProfile, baseline: &LossProfile) -> Result<Vec<f64>> {
    if profile.per_position.len() != baseline.per_position.len() {
        return Err(Error::Contract(format!(
            "profiles of different lengths: {} and {}",
            profile.per_position.len(),
            baseline.per_position.len()
        )));
    }
    profile
        .per_position
        .iter()
        .zip(&baseline.per_position)
        .map(|(&r, &b)| {
            if !(b > 0.0) {
                return Err(Error::Numerical(format!("baseline loss {b} must be positive")));
            }
            Ok((b - r).max(0.0) / b)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MemorizationReport {
    pub first_word_acc: f64,
    pub length_match: f64,
    /// Token match at position `ceil(L/2)` of the source.
    pub mid_word_acc: f64,
}

fn mid_index(len: usize) -> usize {
    len.div_ceil(2) - 1
}

pub fn memorization_metrics<S: AsRef<[u32]>, R: AsRef<[u32]>>(
    sources: &[S],
    reconstructions: &[R],
) -> Result<MemorizationReport> {
    if sources.is_empty() {
        return Err(Error::InsufficientData("no document pairs".into()));
    }
    if sources.len() != reconstructions.len() {
        return Err(Error::Contract(format!(
            "{} sources but {} reconstructions",
            sources.len(),
            reconstructions.len()
        )));
    }
    let (mut first, mut length, mut mid) = (0usize, 0usize, 0usize);
    for (s, r) in sources.iter().zip(reconstructions) {
        let (s, r) = (s.as_ref(), r.as_ref());
        if s.len() == r.len() {
            length += 1;
        }
        if !s.is_empty() && !r.is_empty() && s[0] == r[0] {
            first += 1;
        }
        if !s.is_empty() {
            let m = mid_index(s.len());
            if r.len() > m && r[m] == s[m] {
                mid += 1;
            }
        }
    }
    let n = sources.len() as f64;
    Ok(MemorizationReport {
        first_word_acc: first as f64 / n,
        length_match: length as f64 / n,
        mid_word_acc: mid as f64 / n,
    })
}

fn mode<T: Ord + Copy>(items: impl Iterator<Item = T>) -> Option<T> {
    let mut counts: BTreeMap<T, usize> = BTreeMap::new();
    for x in items {
        *counts.entry(x).or_default() += 1;
    }
    // Smallest key among the most frequent.
    counts
        .into_iter()
        .fold(None, |best: Option<(T, usize)>, (k, c)| match best {
            Some((_, bc)) if bc >= c => best,
            _ => Some((k, c)),
        })
        .map(|(k, _)| k)
}

/// Per class, a pseudo-reconstruction built from the train split: the modal
/// length, the modal first word, and the modal word at the middle position
/// of that length (ties to the smallest value).
pub fn label_oracle_outputs(train: &LabeledCorpus) -> Result<Vec<Vec<u32>>> {
    let mut out = Vec::with_capacity(train.num_classes);
    for c in 0..train.num_classes {
        let docs: Vec<&Document> = train.docs.iter().filter(|d| d.label == c).collect();
        let Some(len) = mode(docs.iter().map(|d| d.len())) else {
            return Err(Error::InsufficientData(format!("class {c} has no training documents")));
        };
        let first = mode(docs.iter().map(|d| d.token_ids[0])).expect("nonempty");
        let m = mid_index(len);
        let mid = mode(docs.iter().filter(|d| d.len() > m).map(|d| d.token_ids[m])).expect("modal length exists");
        let mut seq = vec![first; len];
        seq[m] = mid;
        seq[0] = first;
        out.push(seq);
    }
    Ok(out)
}

/// Memorization metrics of a pseudo-model that knows exactly the label:
/// class-wise modal statistics from `train`, scored on `test`.
pub fn label_oracle_baseline(train: &LabeledCorpus, test: &LabeledCorpus) -> Result<MemorizationReport> {
    let outputs = label_oracle_outputs(train)?;
    let sources: Vec<&[u32]> = test.docs.iter().map(|d| &d.token_ids[..]).collect();
    let recon: Vec<&[u32]> = test.docs.iter().map(|d| &outputs[d.label][..]).collect();
    memorization_metrics(&sources, &recon)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentArgmax {
    /// 1-based modal argmax position.
    pub position: usize,
    /// Share of documents whose maximum falls on `position`.
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArgmaxReport {
    pub components: Vec<ComponentArgmax>,
    pub threshold: f64,
    /// Components with `fraction >= threshold`.
    pub consistent: usize,
    /// Modal positions of the consistent components.
    pub histogram: BTreeMap<usize, usize>,
}

/// Where max-pooled encoders take each component's maximum.
pub fn argmax_position_stats(model: &Seq2SeqModel, docs: &[Document], threshold: f64) -> Result<ArgmaxReport> {
    if !model.arch.encoder.is_some_and(|e| e.is_max_pooled()) {
        return Err(Error::Config(format!(
            "argmax statistics need a max-pooled encoder, got {}",
            model.arch.describe()
        )));
    }
    if docs.is_empty() {
        return Err(Error::InsufficientData("no documents".into()));
    }
    let r = model.arch.repr_dim();
    // counts[j][position]
    let mut counts: Vec<BTreeMap<usize, usize>> = vec![BTreeMap::new(); r];
    let tokens: Vec<&[u32]> = docs.iter().map(|d| &d.token_ids[..]).collect();
    for (_, idx) in crate::models::group_by_length(&tokens) {
        for chunk in idx.chunks(CHUNK) {
            let batch: Vec<&[u32]> = chunk.iter().map(|&i| tokens[i]).collect();
            let pos = model.encoder_positions(&batch)?;
            for b in 0..batch.len() {
                for (j, c) in counts.iter_mut().enumerate() {
                    let col: Vec<f64> = pos.iter().map(|p| p.get(b, j)).collect();
                    *c.entry(argmax_first(&col).0 + 1).or_default() += 1;
                }
            }
        }
    }
    let n = docs.len() as f64;
    let components: Vec<ComponentArgmax> = counts
        .iter()
        .map(|c| {
            let (position, count) = c
                .iter()
                .fold((0, 0), |best, (&p, &k)| if k > best.1 { (p, k) } else { best });
            ComponentArgmax {
                position,
                fraction: count as f64 / n,
            }
        })
        .collect();
    let mut histogram = BTreeMap::new();
    for c in components.iter().filter(|c| c.fraction >= threshold) {
        *histogram.entry(c.position).or_default() += 1;
    }
    Ok(ArgmaxReport {
        consistent: histogram.values().sum(),
        components,
        threshold,
        histogram,
    })
}

const LN_2PI: f64 = 1.837_877_066_409_345_3;

fn log_normal(z: &[f64], mu: &[f64], sigma2: &[f64]) -> f64 {
    z.iter()
        .zip(mu)
        .zip(sigma2)
        .map(|((z, m), s2)| -0.5 * (LN_2PI + libm::log(*s2) + (z - m) * (z - m) / s2))
        .sum()
}

/// Log importance weights `log p(x|z_k) + log p(z_k) - log q(z_k|x)` for
/// `k` posterior samples of one document.
pub fn log_importance_weights(model: &Seq2SeqModel, doc: &[u32], k: usize, seed: u64) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::Config("IWAE needs at least one sample".into()));
    }
    let post = model.posterior(&[doc])?;
    let d = model.arch.latent_dim;
    let (mu, s2) = (post.mu.row(0), post.sigma2.row(0));
    let zero = vec![0.0; d];
    let one = vec![1.0; d];
    let mut out = Vec::with_capacity(k);
    let mut start = 0;
    while start < k {
        let n = CHUNK.min(k - start);
        let eps = rng::standard_normal(n, d, rng::derive(seed, start as u64));
        let mut z = eps;
        for i in 0..n {
            for (j, zj) in z.row_mut(i).iter_mut().enumerate() {
                *zj = mu[j] + libm::sqrt(s2[j]) * *zj;
            }
        }
        let batch = vec![doc; n];
        let nll = model.nll_matrix(Some(&z), &batch)?;
        for i in 0..n {
            let zi = z.row(i);
            let lw = -nll.row(i).iter().sum::<f64>() + log_normal(zi, &zero, &one) - log_normal(zi, mu, s2);
            if !lw.is_finite() {
                return Err(Error::Numerical(format!("importance weight {lw} is not finite")));
            }
            out.push(lw);
        }
        start += n;
    }
    Ok(out)
}

/// `-log((1/K) sum_k w_k)` in nats.
pub fn iwae_nll(model: &Seq2SeqModel, doc: &[u32], k: usize, seed: u64) -> Result<f64> {
    let lw = log_importance_weights(model, doc, k, seed)?;
    Ok(libm::log(k as f64) - log_sum_exp(&lw))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerplexityReport {
    pub nats: f64,
    /// Predicted tokens, EOS included.
    pub tokens: usize,
    pub ppl: f64,
}

/// Corpus perplexity per predicted token from IWAE estimates (exact NLL for
/// the language model). Document `i` uses the seed `derive(seed, i)`.
pub fn corpus_ppl(model: &Seq2SeqModel, docs: &[Document], k: usize, seed: u64) -> Result<PerplexityReport> {
    if docs.is_empty() {
        return Err(Error::InsufficientData("no documents".into()));
    }
    let mut nats = 0.0;
    let mut tokens = 0;
    if model.arch.has_latent() {
        for (i, d) in docs.iter().enumerate() {
            nats += iwae_nll(model, &d.token_ids, k, rng::derive(seed, i as u64))?;
        }
    } else {
        let all: Vec<&[u32]> = docs.iter().map(|d| &d.token_ids[..]).collect();
        for (_, idx) in crate::models::group_by_length(&all) {
            for chunk in idx.chunks(CHUNK) {
                let batch: Vec<&[u32]> = chunk.iter().map(|&i| all[i]).collect();
                nats += model.nll_matrix(None, &batch)?.sum();
            }
        }
    }
    for d in docs {
        tokens += prediction_slots(model.arch.decoder, d.len());
    }
    Ok(PerplexityReport {
        nats,
        tokens,
        ppl: libm::exp(nats / tokens as f64),
    })
}
