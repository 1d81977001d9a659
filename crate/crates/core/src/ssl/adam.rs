use alloc::vec::Vec;

use crate::tensor::Tensor;

/// Adam with the usual defaults (beta1 0.9, beta2 0.999, eps 1e-8).
pub(crate) struct Adam {
    lr: f64,
    t: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64, params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
        Adam {
            lr,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Option<&Tensor>]) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.t += 1;
        let c1 = 1.0 - libm::pow(B1, self.t as f64);
        let c2 = 1.0 - libm::pow(B2, self.t as f64);
        for (k, p) in params.iter_mut().enumerate() {
            let Some(g) = grads[k] else { continue };
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = B1 * *mi + (1.0 - B1) * gi;
                *vi = B2 * *vi + (1.0 - B2) * gi * gi;
                *x -= self.lr * (*mi / c1) / (libm::sqrt(*vi / c2) + 1e-8);
            }
        }
    }
}
