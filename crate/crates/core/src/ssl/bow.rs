use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};

use super::adam::Adam;
use super::{argmax_rows, macro_f1};
use crate::corpus::LabeledCorpus;
use crate::decode::{reconstruct_all, Strategy};
use crate::error::{Error, Result};
use crate::models::Seq2SeqModel;
use crate::rng;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Which tokens of a document the reference classifier looks at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Window {
    First(usize),
    All,
}

impl Window {
    pub fn apply(self, doc: &[u32]) -> &[u32] {
        match self {
            Window::First(k) => &doc[..k.min(doc.len())],
            Window::All => doc,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BowConfig {
    pub dim: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for BowConfig {
    fn default() -> Self {
        BowConfig {
            dim: 200,
            lr: 5e-3,
            batch_size: 64,
            max_epochs: 30,
            patience: 3,
            seed: 0,
        }
    }
}

/// Averaged word embeddings followed by a linear layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BowClassifier {
    pub window: Window,
    pub num_classes: usize,
    /// `embed (V x dim), w (dim x K), b (1 x K)`.
    pub params: [Tensor; 3],
}

impl BowClassifier {
    /// Mean embedding of each windowed document; empty windows map to zeros.
    pub fn features<D: AsRef<[u32]>>(&self, docs: &[D]) -> Tensor {
        let e = &self.params[0];
        let mut out = Tensor::zeros(docs.len(), e.cols());
        for (i, d) in docs.iter().enumerate() {
            let toks = self.window.apply(d.as_ref());
            if toks.is_empty() {
                continue;
            }
            let w = 1.0 / toks.len() as f64;
            for &t in toks {
                let t = (t as usize).min(e.rows() - 1);
                for (o, v) in out.row_mut(i).iter_mut().zip(e.row(t)) {
                    *o += w * v;
                }
            }
        }
        out
    }

    pub fn predict<D: AsRef<[u32]>>(&self, docs: &[D]) -> Vec<usize> {
        let mut s = self.features(docs).matmul(&self.params[1]).expect("dims agree");
        for i in 0..s.rows() {
            for (v, b) in s.row_mut(i).iter_mut().zip(self.params[2].row(0)) {
                *v += b;
            }
        }
        argmax_rows(&s)
    }

    pub fn f1(&self, corpus: &LabeledCorpus) -> f64 {
        let docs: Vec<&[u32]> = corpus.docs.iter().map(|d| &d.token_ids[..]).collect();
        macro_f1(&self.predict(&docs), &corpus.label_ids(), corpus.num_classes)
    }
}

/// Trains the reference classifier on `train` with early stopping on
/// `valid`, and returns it with its test macro-F1.
pub fn bow_reference_classifier(
    train: &LabeledCorpus,
    valid: &LabeledCorpus,
    test: &LabeledCorpus,
    window: Window,
    cfg: &BowConfig,
) -> Result<(BowClassifier, f64)> {
    if train.is_empty() || valid.is_empty() {
        return Err(Error::InsufficientData("reference classifier needs train and validation documents".into()));
    }
    if window == Window::First(0) {
        return Err(Error::Config("window must keep at least one token".into()));
    }
    let k = train.num_classes;
    let v = train.vocab.len();
    let normal = Normal::new(0.0, 0.1).expect("valid std");
    let mut r = rng::rng(rng::derive(cfg.seed, 1));
    let embed = Tensor::from_vec(v, cfg.dim, (0..v * cfg.dim).map(|_| normal.sample(&mut r)).collect());
    let mut clf = BowClassifier {
        window,
        num_classes: k,
        params: [embed, Tensor::zeros(cfg.dim, k), Tensor::zeros(1, k)],
    };
    let bags: Vec<Vec<usize>> = train
        .docs
        .iter()
        .map(|d| window.apply(&d.token_ids).iter().map(|&t| t as usize).collect())
        .collect();
    let labels = train.label_ids();
    let mut opt = Adam::new(cfg.lr, &clf.params);
    let mut best = clf.params.clone();
    let mut best_f1 = f64::NEG_INFINITY;
    let mut since = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle = rng::rng(rng::derive(cfg.seed, 2));
    for _ in 0..cfg.max_epochs {
        order.shuffle(&mut shuffle);
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let mut tape = Tape::new();
            let vars: Vec<_> = clf.params.iter().map(|p| tape.param(p.clone())).collect();
            let bb: Vec<Vec<usize>> = batch.iter().map(|&i| bags[i].clone()).collect();
            let h = tape.bag_mean(vars[0], &bb)?;
            let s = tape.matmul(h, vars[1])?;
            let s = tape.add_row(s, vars[2])?;
            let lp = tape.log_softmax(s);
            let rows: Vec<usize> = (0..batch.len()).collect();
            let cols: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let picked = tape.pick(lp, &rows, &cols)?;
            let mean = tape.mean(picked);
            let loss = tape.scale(mean, -1.0);
            let grads = tape.backward(loss)?;
            let g: Vec<Option<&Tensor>> = vars.iter().map(|&x| grads.get(x)).collect();
            opt.step(&mut clf.params, &g);
        }
        let f1 = clf.f1(valid);
        if f1 > best_f1 {
            best_f1 = f1;
            best = clf.params.clone();
            since = 0;
        } else {
            since += 1;
            if since >= cfg.patience {
                break;
            }
        }
    }
    clf.params = best;
    let test_f1 = clf.f1(test);
    Ok((clf, test_f1))
}

/// Macro-F1 between the gold labels of `test` and the reference
/// classifier's labels on the model's reconstructions of `test`.
pub fn agreement(
    model: &Seq2SeqModel,
    test: &LabeledCorpus,
    reference: &BowClassifier,
    strategy: Strategy,
    max_len: usize,
    seed: u64,
) -> Result<f64> {
    let docs: Vec<&[u32]> = test.docs.iter().map(|d| &d.token_ids[..]).collect();
    let recon = reconstruct_all(model, &docs, strategy, max_len, seed)?;
    Ok(agreement_of(reference, &recon, &test.label_ids(), test.num_classes))
}

/// Agreement for reconstructions that are already decoded; `golds[i]` is
/// the label of the source of `recon[i]`.
pub fn agreement_of<D: AsRef<[u32]>>(reference: &BowClassifier, recon: &[D], golds: &[usize], num_classes: usize) -> f64 {
    macro_f1(&reference.predict(recon), golds, num_classes)
}
