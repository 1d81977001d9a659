//! Probing how much label information the latent codes carry: balanced
//! subsampling, repeated stratified K-fold selection, logistic-regression
//! and MLP probes, a variance decomposition of the scores, bag-of-words
//! reference classifiers and the agreement metric.

mod adam;
mod bow;
mod logreg;
mod mlp;
mod protocol;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

pub use bow::{agreement, agreement_of, bow_reference_classifier, BowClassifier, BowConfig, Window};
pub use logreg::{logreg_objective, train_logreg, train_logreg_from, LinearClassifier, LogregConfig};
pub use mlp::{train_mlp_probe, MlpConfig, MlpProbe};
pub use protocol::{
    mean_features, permutation_chance, probe_f1, sample_features, ssl_protocol, ProbeCell, ProbeLabels, Regime, SampledFeatures,
    Selection, SslConfig, SslScoreMatrix, TraceEntry,
};

use crate::error::{Error, Result};
use crate::rng;
use crate::tape::argmax_first;
use crate::tensor::Tensor;

/// Unweighted mean of per-class F1 over `num_classes` classes. A class that
/// appears in neither predictions nor golds contributes 0.
pub fn macro_f1(preds: &[usize], golds: &[usize], num_classes: usize) -> f64 {
    assert_eq!(preds.len(), golds.len(), "predictions and golds differ in length");
    if num_classes == 0 {
        return 0.0;
    }
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fnn = vec![0usize; num_classes];
    for (&p, &g) in preds.iter().zip(golds) {
        if p == g {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fnn[g] += 1;
        }
    }
    let total: f64 = (0..num_classes)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fnn[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .sum();
    total / num_classes as f64
}

/// Row-wise argmax (lowest index on ties).
pub(crate) fn argmax_rows(scores: &Tensor) -> Vec<usize> {
    (0..scores.rows()).map(|i| argmax_first(scores.row(i)).0).collect()
}

pub(crate) fn class_counts(labels: &[usize], num_classes: usize) -> Vec<usize> {
    let mut c = vec![0; num_classes];
    for &l in labels {
        c[l] += 1;
    }
    c
}

/// One fold: indices to fit on and indices to score on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
}

/// Repeated stratified K-fold. Within a repeat, each class is shuffled and
/// dealt round-robin over the folds; the dealing offset carries over from
/// class to class so overall fold sizes stay balanced too.
pub fn stratified_kfold(labels: &[usize], k: usize, repeats: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::Config(format!("k = {k} folds; need at least 2")));
    }
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let counts = class_counts(labels, num_classes);
    if let Some((c, &n)) = counts.iter().enumerate().find(|(_, &n)| n > 0 && n < k) {
        return Err(Error::InsufficientData(format!("class {c} has {n} items, fewer than {k} folds")));
    }
    let mut out = Vec::with_capacity(k * repeats);
    for r in 0..repeats {
        let mut rng = rng::rng(rng::derive(seed, r as u64));
        let mut assign = vec![0usize; labels.len()];
        let mut offset = 0;
        for c in 0..num_classes {
            let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
            idx.shuffle(&mut rng);
            for (n, &i) in idx.iter().enumerate() {
                assign[i] = (offset + n) % k;
            }
            offset = (offset + idx.len()) % k;
        }
        for f in 0..k {
            let (valid, train): (Vec<usize>, Vec<usize>) = (0..labels.len()).partition(|&i| assign[i] == f);
            out.push(Fold { train, valid });
        }
    }
    Ok(out)
}

/// `n_per_class` indices per class, drawn without replacement; sorted.
pub fn balanced_indices(labels: &[usize], num_classes: usize, n_per_class: usize, seed: u64) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(n_per_class * num_classes);
    for c in 0..num_classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if idx.len() < n_per_class {
            return Err(Error::InsufficientData(format!(
                "class {c} has {} items, {n_per_class} requested",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng::rng(rng::derive(seed, c as u64)));
        out.extend_from_slice(&idx[..n_per_class]);
    }
    out.sort_unstable();
    Ok(out)
}

/// Spread of a `g x s` score matrix (rows: subsample seeds, columns: init seeds).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceReport {
    pub mean: f64,
    /// `sqrt(g/(s-1) * sum_j (col_mean_j - mean)^2)`.
    pub sigma_init: f64,
    /// `sqrt(1/(g(s-1)) * sum_ij (F_ij - col_mean_j)^2)`.
    pub sigma_resid: f64,
    /// Textbook one-factor error mean square, `SS_E / (s(g-1))`.
    pub ms_error: f64,
}

pub fn variance_decomposition(f: &[Vec<f64>]) -> Result<VarianceReport> {
    let g = f.len();
    let s = f.first().map_or(0, Vec::len);
    if g < 2 || s < 2 || f.iter().any(|r| r.len() != s) {
        return Err(Error::Config(format!("need a rectangular matrix with g, s >= 2 (got {g} x {s})")));
    }
    let col_mean: Vec<f64> = (0..s).map(|j| f.iter().map(|r| r[j]).sum::<f64>() / g as f64).collect();
    let mean = col_mean.iter().sum::<f64>() / s as f64;
    let ss_t: f64 = col_mean.iter().map(|m| g as f64 * (m - mean) * (m - mean)).sum();
    let ss_e: f64 = f
        .iter()
        .map(|r| r.iter().zip(&col_mean).map(|(x, m)| (x - m) * (x - m)).sum::<f64>())
        .sum();
    Ok(VarianceReport {
        mean,
        sigma_init: libm::sqrt(ss_t / (s - 1) as f64),
        sigma_resid: libm::sqrt(ss_e / (g * (s - 1)) as f64),
        ms_error: ss_e / (s * (g - 1)) as f64,
    })
}

/// Mean and sample standard deviation (`n - 1`).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, libm::sqrt(v))
}
