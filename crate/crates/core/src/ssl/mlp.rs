use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;

use super::adam::Adam;
use super::{argmax_rows, class_counts, macro_f1};
use crate::error::{Error, Result};
use crate::rng;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlpConfig {
    pub hidden: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            hidden: 128,
            lr: 1e-2,
            batch_size: 64,
            max_epochs: 200,
            patience: 5,
            seed: 0,
        }
    }
}

/// One-hidden-layer ReLU classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpProbe {
    /// `w1, b1, w2, b2`.
    pub params: [Tensor; 4],
    /// Validation macro-F1 after each epoch (entry 0 is before training).
    pub history: Vec<f64>,
    /// Epoch whose parameters were kept (0 = initial).
    pub best_epoch: usize,
}

impl MlpProbe {
    fn init(dim: usize, labels: &[usize], num_classes: usize, cfg: &MlpConfig) -> Self {
        let mut r = rng::rng(rng::derive(cfg.seed, 1));
        let a = libm::sqrt(6.0 / dim as f64);
        let w1 = Tensor::from_vec(
            dim,
            cfg.hidden,
            (0..dim * cfg.hidden).map(|_| r.random_range(-a..a)).collect(),
        );
        // Zero output weights and log-prior biases: before any update the
        // probe predicts the majority training class.
        let counts = class_counts(labels, num_classes);
        let n = labels.len() as f64;
        let b2 = Tensor::row_vector(
            counts
                .iter()
                .map(|&k| libm::log((k as f64 + 0.5) / (n + 0.5 * num_classes as f64)))
                .collect(),
        );
        MlpProbe {
            params: [w1, Tensor::zeros(1, cfg.hidden), Tensor::zeros(cfg.hidden, num_classes), b2],
            history: Vec::new(),
            best_epoch: 0,
        }
    }

    pub fn scores(&self, x: &Tensor) -> Tensor {
        let [w1, b1, w2, b2] = &self.params;
        let mut h = x.matmul(w1).expect("feature width matches");
        for i in 0..h.rows() {
            for (v, b) in h.row_mut(i).iter_mut().zip(b1.row(0)) {
                *v = (*v + b).max(0.0);
            }
        }
        let mut s = h.matmul(w2).expect("hidden width matches");
        for i in 0..s.rows() {
            for (v, b) in s.row_mut(i).iter_mut().zip(b2.row(0)) {
                *v += b;
            }
        }
        s
    }

    pub fn predict(&self, x: &Tensor) -> Vec<usize> {
        argmax_rows(&self.scores(x))
    }
}

/// Adam on minibatch cross-entropy, early stopping on validation macro-F1.
/// Returns the parameters of the best validation epoch.
pub fn train_mlp_probe(
    x: &Tensor,
    y: &[usize],
    valid_x: &Tensor,
    valid_y: &[usize],
    num_classes: usize,
    cfg: &MlpConfig,
) -> Result<MlpProbe> {
    if x.rows() == 0 || valid_x.rows() == 0 || x.rows() != y.len() || valid_x.rows() != valid_y.len() {
        return Err(Error::Contract("train and validation sets must be nonempty and labeled".into()));
    }
    if class_counts(y, num_classes).iter().filter(|&&n| n > 0).count() < 2 {
        return Err(Error::DegenerateLabels);
    }
    let mut probe = MlpProbe::init(x.cols(), y, num_classes, cfg);
    let mut best = probe.params.clone();
    let mut best_f1 = macro_f1(&probe.predict(valid_x), valid_y, num_classes);
    let mut history = alloc::vec![best_f1];
    let mut best_epoch = 0;
    let mut opt = Adam::new(cfg.lr, &probe.params);
    let mut order: Vec<usize> = (0..x.rows()).collect();
    let mut shuffle = rng::rng(rng::derive(cfg.seed, 2));
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut shuffle);
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let mut tape = Tape::new();
            let vars: Vec<_> = probe.params.iter().map(|p| tape.param(p.clone())).collect();
            let xb = tape.constant(x.select_rows(batch));
            let h = tape.matmul(xb, vars[0])?;
            let h = tape.add_row(h, vars[1])?;
            let h = tape.relu(h);
            let s = tape.matmul(h, vars[2])?;
            let s = tape.add_row(s, vars[3])?;
            let lp = tape.log_softmax(s);
            let rows: Vec<usize> = (0..batch.len()).collect();
            let cols: Vec<usize> = batch.iter().map(|&i| y[i]).collect();
            let picked = tape.pick(lp, &rows, &cols)?;
            let mean = tape.mean(picked);
            let loss = tape.scale(mean, -1.0);
            let grads = tape.backward(loss)?;
            let g: Vec<Option<&Tensor>> = vars.iter().map(|&v| grads.get(v)).collect();
            opt.step(&mut probe.params, &g);
        }
        let f1 = macro_f1(&probe.predict(valid_x), valid_y, num_classes);
        history.push(f1);
        if f1 > best_f1 {
            best_f1 = f1;
            best = probe.params.clone();
            best_epoch = epoch;
        } else if epoch - best_epoch >= cfg.patience {
            break;
        }
    }
    probe.params = best;
    probe.history = history;
    probe.best_epoch = best_epoch;
    Ok(probe)
}
