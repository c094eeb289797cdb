use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::error::{bail, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    SgdMomentum,
    #[default]
    Adam,
}

#[derive(Debug, Clone, Default)]
struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// First-order optimizer carrying per-parameter state across steps.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: u64,
    state: BTreeMap<String, Slot>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer {
            kind,
            lr,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update to every trainable parameter, then clears gradients.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        if let Some(p) = params.iter().find(|p| p.trainable && p.grad.is_none()) {
            bail!(Usage, "parameter {:?} has no gradient", p.name);
        }
        self.steps += 1;
        let t = self.steps as i32;
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let p = params.by_id_mut(id);
            if !p.trainable {
                continue;
            }
            let grad = p.grad.take().expect("checked above");
            let g = grad.data();
            let slot = self.state.entry(p.name.clone()).or_default();
            let w = p.value.data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, g) in w.iter_mut().zip(g) {
                        *w -= self.lr * g;
                    }
                }
                OptimizerKind::SgdMomentum => {
                    if slot.m.len() != g.len() {
                        slot.m = vec![0.0; g.len()];
                    }
                    for ((w, g), m) in w.iter_mut().zip(g).zip(slot.m.iter_mut()) {
                        *m = self.momentum * *m + g;
                        *w -= self.lr * *m;
                    }
                }
                OptimizerKind::Adam => {
                    if slot.m.len() != g.len() {
                        slot.m = vec![0.0; g.len()];
                        slot.v = vec![0.0; g.len()];
                    }
                    let c1 = 1.0 - self.beta1.powi(t);
                    let c2 = 1.0 - self.beta2.powi(t);
                    for i in 0..g.len() {
                        slot.m[i] = self.beta1 * slot.m[i] + (1.0 - self.beta1) * g[i];
                        slot.v[i] = self.beta2 * slot.v[i] + (1.0 - self.beta2) * g[i] * g[i];
                        let mh = slot.m[i] / c1;
                        let vh = slot.v[i] / c2;
                        w[i] -= self.lr * mh / (vh.sqrt() + self.eps);
                    }
                }
            }
            p.value.round_in_place();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{DType, Tensor};

    fn store(w: f64, g: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new_f64(&[1], vec![w]).unwrap())
            .unwrap();
        s.get_mut("w").unwrap().grad = Some(Tensor::new_f64(&[1], vec![g]).unwrap());
        s
    }

    #[test]
    fn sgd_step() {
        let mut s = store(1.0, 0.5);
        Optimizer::new(OptimizerKind::Sgd, 0.1)
            .step(&mut s)
            .unwrap();
        assert!((s.tensor("w").unwrap().data()[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        for kind in [
            OptimizerKind::Sgd,
            OptimizerKind::SgdMomentum,
            OptimizerKind::Adam,
        ] {
            let mut s = store(0.7, 0.0);
            Optimizer::new(kind, 0.1).step(&mut s).unwrap();
            assert_eq!(s.tensor("w").unwrap().data()[0], 0.7);
        }
    }

    #[test]
    fn adam_matches_hand_recurrence() {
        let (lr, b1, b2, eps) = (0.01, 0.9, 0.999, 1e-8);
        let grads = [0.3, -0.2, 0.05];
        let mut s = store(1.0, grads[0]);
        let mut opt = Optimizer::new(OptimizerKind::Adam, lr);
        let (mut w, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for (t, g) in grads.iter().enumerate() {
            s.get_mut("w").unwrap().grad = Some(Tensor::new_f64(&[1], vec![*g]).unwrap());
            opt.step(&mut s).unwrap();
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32 + 1));
            let vh = v / (1.0 - b2.powi(t as i32 + 1));
            w -= lr * mh / (vh.sqrt() + eps);
            if t == 0 {
                // First step moves by lr * sign(g) * |g| / (|g| + eps).
                assert!((w - (1.0 - lr * (0.3 / (0.3 + eps)))).abs() < 1e-15);
            }
            assert!((s.tensor("w").unwrap().data()[0] - w).abs() < 1e-15);
        }
    }

    #[test]
    fn missing_grad_is_usage_error() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::zeros(&[1], DType::F64)).unwrap();
        let err = Optimizer::new(OptimizerKind::Sgd, 0.1)
            .step(&mut s)
            .unwrap_err();
        assert!(matches!(err, crate::Error::Usage(_)));
    }
}
