use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use super::logreg::{train_logreg, LogregConfig};
use super::mlp::{train_mlp_probe, MlpConfig};
use super::{balanced_indices, macro_f1, mean_std, stratified_kfold};
use crate::corpus::{LabeledCorpus, Split};
use crate::diagnostics::sample_rows;
use crate::error::{Error, Result};
use crate::models::{LatentPosterior, Seq2SeqModel};
use crate::rng;
use crate::tensor::Tensor;

/// Probe inputs: one posterior sample per document. The only way to build
/// one is to sample from a posterior, so the protocol cannot be fed means.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledFeatures {
    x: Tensor,
}

impl SampledFeatures {
    /// Row `i` is a draw from row `i` of `post` with seed `derive(seed, i)`.
    pub fn draw(post: &LatentPosterior, seed: u64) -> Self {
        SampledFeatures { x: sample_rows(post, seed) }
    }

    pub fn rows(&self) -> usize {
        self.x.rows()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.x
    }
}

pub fn sample_features(model: &Seq2SeqModel, corpus: &LabeledCorpus, seed: u64) -> Result<SampledFeatures> {
    let docs: Vec<&[u32]> = corpus.docs.iter().map(|d| &d.token_ids[..]).collect();
    Ok(SampledFeatures::draw(&model.posterior(&docs)?, seed))
}

/// Posterior means, for the separate experiment that probes them directly.
/// Not accepted by [`ssl_protocol`].
pub fn mean_features(model: &Seq2SeqModel, corpus: &LabeledCorpus) -> Result<Tensor> {
    let docs: Vec<&[u32]> = corpus.docs.iter().map(|d| &d.token_ids[..]).collect();
    Ok(model.posterior(&docs)?.mu)
}

/// Test macro-F1 of a logistic-regression probe with fixed `c`.
pub fn probe_f1(
    train_x: &Tensor,
    train_y: &[usize],
    test_x: &Tensor,
    test_y: &[usize],
    num_classes: usize,
    c: f64,
    cfg: &LogregConfig,
) -> Result<f64> {
    let clf = train_logreg(train_x, train_y, num_classes, c, cfg)?;
    Ok(macro_f1(&clf.predict(test_x), test_y, num_classes))
}

/// Mean and standard deviation of [`probe_f1`] over `n_perm` random
/// permutations of the training labels.
#[allow(clippy::too_many_arguments)]
pub fn permutation_chance(
    train_x: &Tensor,
    train_y: &[usize],
    test_x: &Tensor,
    test_y: &[usize],
    num_classes: usize,
    c: f64,
    cfg: &LogregConfig,
    n_perm: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let mut scores = Vec::with_capacity(n_perm);
    for p in 0..n_perm {
        let mut y = train_y.to_vec();
        y.shuffle(&mut rng::rng(rng::derive(seed, p as u64)));
        scores.push(probe_f1(train_x, &y, test_x, test_y, num_classes, c, cfg)?);
    }
    Ok(mean_std(&scores))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    /// Balanced subsample with this many labeled documents per class.
    PerClass(usize),
    /// All training documents, MLP probes with early stopping on validation.
    Full,
}

/// Features of one trained encoder: VAE hyperparameter label `hyper`,
/// initialization seed index `init`.
#[derive(Debug, Clone)]
pub struct ProbeCell {
    pub hyper: String,
    pub init: usize,
    pub train: SampledFeatures,
    pub valid: SampledFeatures,
    pub test: SampledFeatures,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SslConfig {
    pub regime: Regime,
    /// One row of the score matrix per seed.
    pub subsample_seeds: Vec<u64>,
    pub c_grid: Vec<f64>,
    pub folds: usize,
    pub repeats: usize,
    pub cv_seed: u64,
    pub logreg: LogregConfig,
    pub mlp: MlpConfig,
}

impl Default for SslConfig {
    fn default() -> Self {
        SslConfig {
            regime: Regime::PerClass(50),
            subsample_seeds: (0..5).collect(),
            c_grid: vec![0.01, 0.1, 1.0, 10.0, 100.0],
            folds: 5,
            repeats: 2,
            cv_seed: 0,
            logreg: LogregConfig {
                tol: 1e-5,
                max_iter: 500,
            },
            mlp: MlpConfig::default(),
        }
    }
}

/// One model-selection measurement. `source` is the split it was scored on.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    pub subsample: usize,
    pub hyper: String,
    pub init: usize,
    pub c: Option<f64>,
    pub score: f64,
    pub source: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub subsample: usize,
    pub init: usize,
    pub hyper: String,
    /// Probe regularizer; `None` for MLP probes.
    pub c: Option<f64>,
    pub selection_score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SslScoreMatrix {
    pub regime: Regime,
    /// `f[i][j]`: subsample seed `i`, initialization seed `j`.
    pub f: Vec<Vec<f64>>,
    pub selections: Vec<Selection>,
    pub trace: Vec<TraceEntry>,
}

/// Label vectors of the three splits.
#[derive(Debug, Clone, Copy)]
pub struct ProbeLabels<'a> {
    pub train: &'a [usize],
    pub valid: &'a [usize],
    pub test: &'a [usize],
    pub num_classes: usize,
}

/// Probe scores over a grid of encoders. For every subsample seed `i`, the
/// probe regularizer is chosen per cell by repeated stratified K-fold on the
/// subsample, the VAE hyperparameter by the CV score averaged over init
/// seeds, and `f[i][j]` is the test macro-F1 of the chosen configuration.
pub fn ssl_protocol(cells: &[ProbeCell], labels: ProbeLabels<'_>, cfg: &SslConfig) -> Result<SslScoreMatrix> {
    let mut hypers: Vec<String> = cells.iter().map(|c| c.hyper.clone()).collect();
    hypers.sort();
    hypers.dedup();
    let mut inits: Vec<usize> = cells.iter().map(|c| c.init).collect();
    inits.sort_unstable();
    inits.dedup();
    if cells.is_empty() || cells.len() != hypers.len() * inits.len() {
        return Err(Error::Config("probe cells must form a complete hyperparameter x seed grid".into()));
    }
    let cell = |h: &str, j: usize| cells.iter().find(|c| c.hyper == h && c.init == j).expect("complete grid");
    for c in cells {
        if c.train.rows() != labels.train.len() || c.valid.rows() != labels.valid.len() || c.test.rows() != labels.test.len() {
            return Err(Error::Contract(format!("features of {} / seed {} do not match the labels", c.hyper, c.init)));
        }
    }
    if cfg.subsample_seeds.is_empty() || cfg.c_grid.is_empty() {
        return Err(Error::Config("need subsample seeds and a regularizer grid".into()));
    }
    let k = labels.num_classes;
    let mut f = Vec::new();
    let mut selections = Vec::new();
    let mut trace = Vec::new();
    for (i, &sub_seed) in cfg.subsample_seeds.iter().enumerate() {
        // (hyper, init) -> (selection score, C, final test F1 closure input)
        let mut scores: Vec<Vec<(f64, Option<f64>)>> = Vec::new();
        match cfg.regime {
            Regime::PerClass(n) => {
                let idx = balanced_indices(labels.train, k, n, sub_seed)?;
                let y: Vec<usize> = idx.iter().map(|&t| labels.train[t]).collect();
                let folds = stratified_kfold(&y, cfg.folds.min(n), cfg.repeats, rng::derive(cfg.cv_seed, i as u64))?;
                for h in &hypers {
                    let mut row = Vec::new();
                    for &j in &inits {
                        let x = cell(h, j).train.x.select_rows(&idx);
                        let mut best: Option<(f64, f64)> = None;
                        for &c in &cfg.c_grid {
                            let mut total = 0.0;
                            for fold in &folds {
                                let yt: Vec<usize> = fold.train.iter().map(|&t| y[t]).collect();
                                let yv: Vec<usize> = fold.valid.iter().map(|&t| y[t]).collect();
                                total += probe_f1(&x.select_rows(&fold.train), &yt, &x.select_rows(&fold.valid), &yv, k, c, &cfg.logreg)?;
                            }
                            let score = total / folds.len() as f64;
                            trace.push(TraceEntry {
                                subsample: i,
                                hyper: h.clone(),
                                init: j,
                                c: Some(c),
                                score,
                                source: Split::Train,
                            });
                            if best.is_none_or(|b| score > b.0) {
                                best = Some((score, c));
                            }
                        }
                        let (score, c) = best.expect("nonempty grid");
                        row.push((score, Some(c)));
                    }
                    scores.push(row);
                }
            }
            Regime::Full => {
                for h in &hypers {
                    let mut row = Vec::new();
                    for &j in &inits {
                        let c = cell(h, j);
                        let mlp = MlpConfig {
                            seed: rng::derive(cfg.mlp.seed, i as u64),
                            ..cfg.mlp
                        };
                        let probe = train_mlp_probe(&c.train.x, labels.train, &c.valid.x, labels.valid, k, &mlp)?;
                        let score = probe.history[probe.best_epoch];
                        trace.push(TraceEntry {
                            subsample: i,
                            hyper: h.clone(),
                            init: j,
                            c: None,
                            score,
                            source: Split::Valid,
                        });
                        row.push((score, None));
                    }
                    scores.push(row);
                }
            }
        }
        let avg = |row: &Vec<(f64, Option<f64>)>| row.iter().map(|s| s.0).sum::<f64>() / row.len() as f64;
        let mut h_best = 0;
        for h in 1..hypers.len() {
            if avg(&scores[h]) > avg(&scores[h_best]) {
                h_best = h;
            }
        }
        // Only now is the test split read.
        let mut row = Vec::with_capacity(inits.len());
        for (jj, &j) in inits.iter().enumerate() {
            let c = cell(&hypers[h_best], j);
            let (sel_score, creg) = scores[h_best][jj];
            let f1 = match (cfg.regime, creg) {
                (Regime::PerClass(n), Some(creg)) => {
                    let idx = balanced_indices(labels.train, k, n, sub_seed)?;
                    let y: Vec<usize> = idx.iter().map(|&t| labels.train[t]).collect();
                    probe_f1(&c.train.x.select_rows(&idx), &y, &c.test.x, labels.test, k, creg, &cfg.logreg)?
                }
                _ => {
                    let mlp = MlpConfig {
                        seed: rng::derive(cfg.mlp.seed, i as u64),
                        ..cfg.mlp
                    };
                    let probe = train_mlp_probe(&c.train.x, labels.train, &c.valid.x, labels.valid, k, &mlp)?;
                    macro_f1(&probe.predict(&c.test.x), labels.test, k)
                }
            };
            selections.push(Selection {
                subsample: i,
                init: j,
                hyper: hypers[h_best].clone(),
                c: creg,
                selection_score: sel_score,
            });
            row.push(f1);
        }
        f.push(row);
    }
    Ok(SslScoreMatrix {
        regime: cfg.regime,
        f,
        selections,
        trace,
    })
}
