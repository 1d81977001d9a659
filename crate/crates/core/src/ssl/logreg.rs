use alloc::vec;
use alloc::vec::Vec;

use super::{argmax_rows, class_counts};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Multinomial linear classifier `x W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    pub w: Tensor,
    pub b: Vec<f64>,
    /// Objective at the returned parameters.
    pub loss: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl LinearClassifier {
    pub fn zeros(dim: usize, num_classes: usize) -> Self {
        LinearClassifier {
            w: Tensor::zeros(dim, num_classes),
            b: vec![0.0; num_classes],
            loss: f64::INFINITY,
            iterations: 0,
            converged: false,
        }
    }

    pub fn scores(&self, x: &Tensor) -> Tensor {
        let mut s = x.matmul(&self.w).expect("feature width matches");
        for i in 0..s.rows() {
            for (v, b) in s.row_mut(i).iter_mut().zip(&self.b) {
                *v += b;
            }
        }
        s
    }

    pub fn predict(&self, x: &Tensor) -> Vec<usize> {
        argmax_rows(&self.scores(x))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogregConfig {
    /// Stop once the gradient norm falls below this.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for LogregConfig {
    fn default() -> Self {
        LogregConfig {
            tol: 1e-5,
            max_iter: 2000,
        }
    }
}

/// `(1/n) * (sum_i CE_i + ||W||^2 / (2C))` and its gradient (bias unpenalized).
fn objective_and_grad(clf: &LinearClassifier, x: &Tensor, y: &[usize], c: f64) -> (f64, Tensor, Vec<f64>) {
    let n = x.rows() as f64;
    let mut p = clf.scores(x);
    let mut loss = 0.0;
    for (i, &yi) in y.iter().enumerate() {
        let row = p.row_mut(i);
        let lse = crate::tape::log_sum_exp(row);
        loss += lse - row[yi];
        for v in row.iter_mut() {
            *v = libm::exp(*v - lse);
        }
        row[yi] -= 1.0;
    }
    let mut gw = x.transpose().matmul(&p).expect("shapes agree");
    gw.axpy(1.0 / c, &clf.w);
    gw.scale_in_place(1.0 / n);
    let gb: Vec<f64> = (0..p.cols()).map(|k| (0..p.rows()).map(|i| p.get(i, k)).sum::<f64>() / n).collect();
    loss += clf.w.sq_norm() / (2.0 * c);
    (loss / n, gw, gb)
}

/// The training objective of [`train_logreg`] at given parameters.
pub fn logreg_objective(clf: &LinearClassifier, x: &Tensor, y: &[usize], c: f64) -> f64 {
    objective_and_grad(clf, x, y, c).0
}

pub fn train_logreg(x: &Tensor, y: &[usize], num_classes: usize, c: f64, cfg: &LogregConfig) -> Result<LinearClassifier> {
    train_logreg_from(x, y, num_classes, c, cfg, LinearClassifier::zeros(x.cols(), num_classes))
}

/// Gradient descent with Barzilai-Borwein step sizes and Armijo backtracking,
/// started from `start`.
pub fn train_logreg_from(
    x: &Tensor,
    y: &[usize],
    num_classes: usize,
    c: f64,
    cfg: &LogregConfig,
    start: LinearClassifier,
) -> Result<LinearClassifier> {
    if x.rows() != y.len() || x.rows() == 0 {
        return Err(Error::Contract("features and labels must be nonempty and of equal length".into()));
    }
    if y.iter().any(|&l| l >= num_classes) {
        return Err(Error::Contract("label out of range".into()));
    }
    if class_counts(y, num_classes).iter().filter(|&&n| n > 0).count() < 2 {
        return Err(Error::DegenerateLabels);
    }
    if !x.is_finite() {
        return Err(Error::Numerical("non-finite features".into()));
    }
    if !(c > 0.0) {
        return Err(Error::Config("C must be positive".into()));
    }
    let mut clf = start;
    let (mut f, mut gw, mut gb) = objective_and_grad(&clf, x, y, c);
    let gnorm = |gw: &Tensor, gb: &[f64]| libm::sqrt(gw.sq_norm() + gb.iter().map(|v| v * v).sum::<f64>());
    let mut step = 1.0;
    let mut it = 0;
    let mut converged = gnorm(&gw, &gb) < cfg.tol;
    while !converged && it < cfg.max_iter {
        it += 1;
        let g2 = gw.sq_norm() + gb.iter().map(|v| v * v).sum::<f64>();
        let mut t = step;
        let (next, nf, ngw, ngb) = loop {
            let mut cand = clf.clone();
            cand.w.axpy(-t, &gw);
            for (b, g) in cand.b.iter_mut().zip(&gb) {
                *b -= t * g;
            }
            let (nf, ngw, ngb) = objective_and_grad(&cand, x, y, c);
            if nf <= f - 1e-4 * t * g2 || t < 1e-12 {
                break (cand, nf, ngw, ngb);
            }
            t *= 0.5;
        };
        // Barzilai-Borwein guess for the next step: <s,s>/<s,dg>.
        let mut ss = 0.0;
        let mut sy = 0.0;
        for ((a, b), (ga, gb_)) in next.w.data().iter().zip(clf.w.data()).zip(ngw.data().iter().zip(gw.data())) {
            ss += (a - b) * (a - b);
            sy += (a - b) * (ga - gb_);
        }
        for ((a, b), (ga, gb_)) in next.b.iter().zip(&clf.b).zip(ngb.iter().zip(&gb)) {
            ss += (a - b) * (a - b);
            sy += (a - b) * (ga - gb_);
        }
        step = if sy > 0.0 { (ss / sy).clamp(1e-8, 1e8) } else { 2.0 * t };
        // No representable decrease left.
        let stalled = t < 1e-12;
        clf = next;
        f = nf;
        gw = ngw;
        gb = ngb;
        converged = gnorm(&gw, &gb) < cfg.tol;
        if stalled {
            break;
        }
    }
    clf.loss = f;
    clf.iterations = it;
    clf.converged = converged;
    Ok(clf)
}
