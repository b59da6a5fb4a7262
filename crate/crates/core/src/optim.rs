//! First-order optimizers over flat parameter vectors.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        Self::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, n: usize) -> Self {
        let (m, v) = match kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            OptimizerKind::Adam { .. } => (vec![0.0; n], vec![0.0; n]),
        };
        Self { kind, lr, m, v, t: 0 }
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    /// Move `params` along `direction` (ascent). Coordinates whose step is
    /// exactly zero are left untouched, bit for bit.
    pub fn ascend(&mut self, params: &mut [f64], direction: &[f64]) {
        assert_eq!(params.len(), direction.len(), "optimizer length mismatch");
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(direction) {
                    let d = self.lr * g;
                    if d != 0.0 {
                        *p += d;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                self.t += 1;
                let c1 = 1.0 - beta1.powi(self.t);
                let c2 = 1.0 - beta2.powi(self.t);
                for i in 0..params.len() {
                    let g = direction[i];
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                    let d = self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + eps);
                    if d != 0.0 {
                        params[i] += d;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_step() {
        let mut o = Optimizer::new(OptimizerKind::Sgd, 0.5, 2);
        let mut p = vec![1.0, -0.0];
        o.ascend(&mut p, &[2.0, 0.0]);
        assert_eq!(p[0], 2.0);
        assert_eq!(p[1].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let mut o = Optimizer::new(OptimizerKind::adam(), 0.01, 2);
        let mut p = vec![0.0, 0.0];
        o.ascend(&mut p, &[3.0, -1e-3]);
        assert!((p[0] - 0.01).abs() < 1e-9);
        assert!((p[1] + 0.01).abs() < 1e-4);
    }

    #[test]
    fn adam_climbs_concave_bowl() {
        let mut o = Optimizer::new(OptimizerKind::adam(), 0.05, 1);
        let mut p = vec![3.0];
        for _ in 0..500 {
            let g = -2.0 * (p[0] - 1.0);
            o.ascend(&mut p, &[g]);
        }
        assert!((p[0] - 1.0).abs() < 1e-2);
    }
}
