use serde::{Deserialize, Serialize};

use super::{Grads, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Plain gradient descent.
    Sgd,
    #[default]
    Adam,
}

/// Update rule plus its per-parameter moments.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, lr: f64, store: &ParamStore) -> Result<Self> {
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::InvalidConfig(format!("learning rate must be positive, got {lr}")));
        }
        let zeros = || store.tensors().iter().map(|t| vec![0.0; t.numel()]).collect::<Vec<_>>();
        let (m, v) = match kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            OptimizerKind::Adam => (zeros(), zeros()),
        };
        Ok(Self { kind, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m, v, t: 0 })
    }

    /// Applies one update, clears `grads` and bumps the store's step counter.
    ///
    /// Every gradient is checked before anything is written, so a rejected
    /// step leaves the store untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &mut Grads) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} gradient tensors for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        for (t, g) in store.tensors().iter().zip(grads.iter()) {
            if g.len() != t.numel() {
                return Err(Error::ShapeMismatch(format!("gradient for `{}` has wrong size", t.name)));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite { tensor: t.name.clone() });
            }
        }
        match self.kind {
            OptimizerKind::Sgd => {
                for i in 0..store.len() {
                    let g = grads.by_index(i);
                    let p = &mut store.tensors[i].values;
                    for (p, g) in p.iter_mut().zip(g) {
                        *p -= self.lr * g;
                    }
                }
            }
            OptimizerKind::Adam => {
                self.t += 1;
                let bc1 = 1.0 - self.beta1.powi(self.t as i32);
                let bc2 = 1.0 - self.beta2.powi(self.t as i32);
                for i in 0..store.len() {
                    let g = grads.by_index(i);
                    let p = &mut store.tensors[i].values;
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for j in 0..g.len() {
                        m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                        v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                        let mh = m[j] / bc1;
                        let vh = v[j] / bc2;
                        p[j] -= self.lr * mh / (vh.sqrt() + self.eps);
                    }
                }
            }
        }
        store.check_finite()?;
        grads.clear();
        store.bump_step();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", &[3], vec![1.0, -2.0, 0.5]).unwrap();
        s
    }

    #[test]
    fn sgd_moves_against_gradient() {
        let mut s = store();
        let mut g = s.zero_grads();
        g.by_index_mut(0).copy_from_slice(&[1.0, -3.0, 0.0]);
        let mut opt = OptimizerState::new(OptimizerKind::Sgd, 0.1, &s).unwrap();
        opt.step(&mut s, &mut g).unwrap();
        let w = s.tensors()[0].values.clone();
        let expect = [1.0 - 0.1, -2.0 + 0.3, 0.5];
        for (a, b) in w.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(g.by_index(0).iter().all(|v| *v == 0.0));
        assert_eq!(s.step(), 1);
    }

    #[test]
    fn zero_gradient_is_a_no_op_for_sgd() {
        let mut s = store();
        let before = s.clone();
        let mut g = s.zero_grads();
        let mut opt = OptimizerState::new(OptimizerKind::Sgd, 0.1, &s).unwrap();
        opt.step(&mut s, &mut g).unwrap();
        assert_eq!(s.tensors(), before.tensors());
    }

    #[test]
    fn adam_first_step_has_magnitude_lr() {
        // m̂ = g and v̂ = g² on the first step, so the update is lr·g/(|g|+ε).
        let mut s = store();
        let mut g = s.zero_grads();
        let grads = [0.3, -7.0, 1e-3];
        g.by_index_mut(0).copy_from_slice(&grads);
        let lr = 1e-3;
        let before = s.tensors()[0].values.clone();
        let mut opt = OptimizerState::new(OptimizerKind::Adam, lr, &s).unwrap();
        opt.step(&mut s, &mut g).unwrap();
        for ((a, b), g) in s.tensors()[0].values.iter().zip(&before).zip(grads) {
            let expect = lr * g / (g.abs() + 1e-8);
            assert!(((b - a) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_gradient_names_tensor_and_leaves_params() {
        let mut s = store();
        s.add("bias", &[1], vec![0.0]).unwrap();
        let before = s.clone();
        let mut g = s.zero_grads();
        g.by_index_mut(1)[0] = f64::INFINITY;
        let mut opt = OptimizerState::new(OptimizerKind::Adam, 0.1, &s).unwrap();
        match opt.step(&mut s, &mut g) {
            Err(Error::NonFinite { tensor }) => assert_eq!(tensor, "bias"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(s, before);
    }

    #[test]
    fn bad_learning_rate_rejected() {
        assert!(OptimizerState::new(OptimizerKind::Sgd, 0.0, &store()).is_err());
        assert!(OptimizerState::new(OptimizerKind::Sgd, f64::NAN, &store()).is_err());
    }
}
