//! AdamW over slot-aligned parameter matrices.

use crate::matrix::Matrix;

#[derive(Clone, Debug)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

pub struct AdamW {
    cfg: AdamWConfig,
    m: Vec<Option<Matrix>>,
    v: Vec<Option<Matrix>>,
    step: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, n_slots: usize) -> Self {
        Self {
            cfg,
            m: (0..n_slots).map(|_| None).collect(),
            v: (0..n_slots).map(|_| None).collect(),
            step: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.cfg.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    /// One update over `(slot, param, grad)` triples. Slots without a
    /// gradient this step keep their parameters and moments untouched.
    pub fn step(&mut self, params: &mut [(usize, &mut Matrix)], grads: &[Option<Matrix>]) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.cfg.beta1.powf(t);
        let bc2 = 1.0 - self.cfg.beta2.powf(t);
        for (slot, param) in params.iter_mut() {
            let g = match grads.get(*slot).and_then(|g| g.as_ref()) {
                Some(g) => g,
                None => continue,
            };
            assert_eq!(g.shape(), param.shape(), "grad/param shape for slot {slot}");
            let m = self.m[*slot].get_or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            let v = self.v[*slot].get_or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
            for i in 0..g.len() {
                let gi = g.as_slice()[i];
                let mi = b1 * m.as_slice()[i] + (1.0 - b1) * gi;
                let vi = b2 * v.as_slice()[i] + (1.0 - b2) * gi * gi;
                m.as_mut_slice()[i] = mi;
                v.as_mut_slice()[i] = vi;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                let p = &mut param.as_mut_slice()[i];
                *p -= self.cfg.lr * (mhat / (vhat.sqrt() + self.cfg.eps) + self.cfg.weight_decay * *p);
            }
        }
    }
}
