//! SGD with momentum and L2 weight decay, and the polynomial learning-rate
//! schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Element;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolySchedule {
    pub base_lr: f64,
    pub total_iters: usize,
    pub power: f64,
}

impl PolySchedule {
    pub fn new(base_lr: f64, total_iters: usize) -> Self {
        PolySchedule {
            base_lr,
            total_iters,
            power: 0.9,
        }
    }

    /// `base_lr · (1 − iter/total)^power` for `0 ≤ iter ≤ total`.
    pub fn lr(&self, iter: usize) -> Result<f64> {
        if iter > self.total_iters || self.total_iters == 0 {
            return Err(Error::invalid(
                "poly_lr",
                format!("iteration {iter} outside 0..={}", self.total_iters),
            ));
        }
        if iter == self.total_iters {
            return Ok(0.0);
        }
        Ok(self.base_lr * (1.0 - iter as f64 / self.total_iters as f64).powf(self.power))
    }
}

/// Momentum buffers keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    pub buffers: BTreeMap<String, Vec<T>>,
}

impl<T: Element> OptimizerState<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        OptimizerState {
            momentum,
            weight_decay,
            buffers: BTreeMap::new(),
        }
    }
}

impl<T: Element> Default for OptimizerState<T> {
    fn default() -> Self {
        Self::new(0.9, 5e-4)
    }
}

/// `v ← μv + (g + wd·p); p ← p − lr·v` for every trainable parameter that
/// has a gradient. Decay only applies to convolution weights.
pub fn sgd_step<T: Element>(store: &mut ParamStore<T>, state: &mut OptimizerState<T>, lr: f64) -> Result<()> {
    for (_, entry) in store.iter() {
        if let Some(g) = entry.tensor.grad() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: "sgd_step gradient" });
            }
        }
    }
    let mu = T::from_f64_lossy(state.momentum);
    let lr = T::from_f64_lossy(lr);
    for (_, entry) in store.iter_mut() {
        if !entry.kind.trainable() {
            continue;
        }
        let Some(grad) = entry.tensor.take_grad() else { continue };
        let wd = T::from_f64_lossy(if entry.kind.decayed() { state.weight_decay } else { 0.0 });
        let buf = state
            .buffers
            .entry(entry.name.clone())
            .or_insert_with(|| vec![T::zero(); grad.len()]);
        if buf.len() != grad.len() {
            return Err(Error::shape("sgd_step", format!("momentum buffer for {}", entry.name)));
        }
        for ((p, v), g) in entry.tensor.data_mut().iter_mut().zip(buf.iter_mut()).zip(&grad) {
            *v = mu * *v + (*g + wd * *p);
            *p -= lr * *v;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamKind;
    use crate::tensor::Tensor;

    fn store_with(p: f64, g: f64, kind: ParamKind) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let id = s.add("p", kind, Tensor::full(vec![1], p)).unwrap();
        s.tensor_mut(id).set_grad(Some(vec![g]));
        s
    }

    #[test]
    fn poly_examples() {
        let s = PolySchedule::new(0.005, 120_000);
        assert_eq!(s.lr(0).unwrap(), 0.005);
        assert_eq!(s.lr(120_000).unwrap(), 0.0);
        assert!((s.lr(60_000).unwrap() - 0.005 * 0.5f64.powf(0.9)).abs() < 1e-15);
        assert!((s.lr(60_000).unwrap() - 0.0026795).abs() < 1e-7);
        assert!(s.lr(120_001).is_err());
    }

    #[test]
    fn two_momentum_steps() {
        let mut s = store_with(1.0, 1.0, ParamKind::ConvWeight);
        let mut st = OptimizerState::new(0.9, 0.0);
        sgd_step(&mut s, &mut st, 0.1).unwrap();
        let id = s.id("p").unwrap();
        s.tensor_mut(id).set_grad(Some(vec![1.0]));
        sgd_step(&mut s, &mut st, 0.1).unwrap();
        assert!((s.tensor(id).data()[0] - 0.71).abs() < 1e-12);
    }

    #[test]
    fn zero_grad_and_decay() {
        let mut s = store_with(1.0, 0.0, ParamKind::ConvWeight);
        sgd_step(&mut s, &mut OptimizerState::new(0.9, 0.0), 0.1).unwrap();
        assert_eq!(s.tensor(s.id("p").unwrap()).data()[0], 1.0);

        let mut s = store_with(1.0, 0.0, ParamKind::ConvWeight);
        sgd_step(&mut s, &mut OptimizerState::new(0.9, 5e-4), 0.1).unwrap();
        assert!(s.tensor(s.id("p").unwrap()).data()[0] < 1.0);

        for kind in [ParamKind::ConvBias, ParamKind::BnScale, ParamKind::BnShift] {
            let mut s = store_with(1.0, 0.0, kind);
            sgd_step(&mut s, &mut OptimizerState::new(0.9, 5e-4), 0.1).unwrap();
            assert_eq!(s.tensor(s.id("p").unwrap()).data()[0], 1.0, "{kind:?}");
        }
    }

    #[test]
    fn nan_gradient_is_rejected() {
        let mut s = store_with(1.0, f64::NAN, ParamKind::ConvWeight);
        assert!(sgd_step(&mut s, &mut OptimizerState::default(), 0.1).is_err());
        assert_eq!(s.tensor(s.id("p").unwrap()).data()[0], 1.0);
    }
}
