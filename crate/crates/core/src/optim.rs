//! First-order optimizers over a [`ParamSet`].

use serde::{Deserialize, Serialize};

use crate::nn::ParamSet;
use crate::scalar::{lit, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
    Sgd {
        momentum: f64,
    },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer with lazily allocated per-parameter state.
#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    pub kind: OptimizerKind,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update; `grads[i]` matches parameter `i`.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Vec<T>], lr: f64) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![T::zero(); g.len()]).collect();
            if matches!(self.kind, OptimizerKind::Adam { .. }) {
                self.v = self.m.clone();
            }
        }
        self.step += 1;
        let lr_t = lit::<T>(lr);
        match self.kind {
            OptimizerKind::Sgd { momentum } => {
                let mu = lit::<T>(momentum);
                for (i, g) in grads.iter().enumerate() {
                    let w = params.by_index_mut(i).data_mut();
                    let buf = &mut self.m[i];
                    for ((w, &g), b) in w.iter_mut().zip(g).zip(buf.iter_mut()) {
                        *b = mu * *b + g;
                        *w -= lr_t * *b;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let (b1, b2) = (lit::<T>(beta1), lit::<T>(beta2));
                let c1 = lit::<T>(1.0 - beta1.powi(self.step as i32));
                let c2 = lit::<T>(1.0 - beta2.powi(self.step as i32));
                let eps = lit::<T>(eps);
                let one = T::one();
                for (i, g) in grads.iter().enumerate() {
                    let w = params.by_index_mut(i).data_mut();
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for j in 0..g.len() {
                        m[j] = b1 * m[j] + (one - b1) * g[j];
                        v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
                        let mh = m[j] / c1;
                        let vh = v[j] / c2;
                        w[j] -= lr_t * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
    }
}
