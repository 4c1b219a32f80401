//! First-order optimizers over flat lists of tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum OptimizerKind {
    /// SGD with L2 weight decay added to the gradient.
    Sgd { momentum: f32 },
    /// Adam with decoupled weight decay.
    AdamW { beta1: f32, beta2: f32, eps: f32 },
}

impl OptimizerKind {
    pub fn sgd(momentum: f32) -> Self {
        OptimizerKind::Sgd { momentum }
    }

    pub fn adamw() -> Self {
        OptimizerKind::AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub weight_decay: f32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: u32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, weight_decay: f32) -> Self {
        Self {
            kind,
            weight_decay,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    /// One update of every parameter with its gradient.
    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor], lr: f32) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::dims("optimizer", &[params.len()], &[grads.len()]));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            if matches!(self.kind, OptimizerKind::AdamW { .. }) {
                self.v = self.m.clone();
            }
        }
        if self.m.len() != params.len() {
            return Err(Error::Contract("optimizer reused with a different parameter list".into()));
        }
        self.t += 1;
        let wd = self.weight_decay;
        for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::dims("optimizer", p.shape(), g.shape()));
            }
            let m = &mut self.m[k];
            match self.kind {
                OptimizerKind::Sgd { momentum } => {
                    for ((w, &g), m) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()) {
                        let d = g + wd * *w;
                        *m = momentum * *m + d;
                        *w -= lr * *m;
                    }
                }
                OptimizerKind::AdamW { beta1, beta2, eps } => {
                    let v = &mut self.v[k];
                    let c1 = 1.0 - beta1.powi(self.t as i32);
                    let c2 = 1.0 - beta2.powi(self.t as i32);
                    for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        let mh = *m / c1;
                        let vh = *v / c2;
                        *w -= lr * (mh / (vh.sqrt() + eps) + wd * *w);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_sgd_step_by_hand() {
        let mut p = Tensor::new([2], vec![1.0, -2.0]).unwrap();
        let g = Tensor::new([2], vec![0.5, 0.5]).unwrap();
        let mut o = Optimizer::new(OptimizerKind::sgd(0.0), 0.1);
        o.step(vec![&mut p], &[g], 0.1).unwrap();
        // w - lr (g + wd w)
        assert!((p.data()[0] - (1.0 - 0.1 * (0.5 + 0.1))).abs() < 1e-7);
        assert!((p.data()[1] - (-2.0 - 0.1 * (0.5 - 0.2))).abs() < 1e-7);
    }

    #[test]
    fn momentum_accumulates() {
        let mut p = Tensor::new([1], vec![0.0]).unwrap();
        let g = Tensor::new([1], vec![1.0]).unwrap();
        let mut o = Optimizer::new(OptimizerKind::sgd(0.9), 0.0);
        o.step(vec![&mut p], std::slice::from_ref(&g), 1.0).unwrap();
        o.step(vec![&mut p], &[g], 1.0).unwrap();
        assert!((p.data()[0] - -(1.0 + 1.9)).abs() < 1e-6);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut p = Tensor::new([2], vec![1.0, 1.0]).unwrap();
        let g = Tensor::new([2], vec![3.0, -0.01]).unwrap();
        let mut o = Optimizer::new(OptimizerKind::adamw(), 0.0);
        o.step(vec![&mut p], &[g], 0.01).unwrap();
        assert!((p.data()[0] - 0.99).abs() < 1e-5);
        assert!((p.data()[1] - 1.01).abs() < 1e-5);
    }

    #[test]
    fn minimises_a_quadratic() {
        for kind in [OptimizerKind::sgd(0.9), OptimizerKind::adamw()] {
            let mut p = Tensor::new([3], vec![3.0, -1.0, 2.0]).unwrap();
            let mut o = Optimizer::new(kind, 0.0);
            for _ in 0..500 {
                let g = Tensor::new([3], p.data().iter().map(|w| 2.0 * (w - 0.5)).collect()).unwrap();
                o.step(vec![&mut p], &[g], 0.02).unwrap();
            }
            assert!(p.data().iter().all(|w| (w - 0.5).abs() < 1e-2), "{kind:?} {:?}", p.data());
        }
    }
}
