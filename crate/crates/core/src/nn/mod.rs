//! Parameter storage, the forward context, and the network building blocks.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Element, Tensor};
use crate::Mode;

mod blocks;
mod layers;

pub use blocks::{eca_kernel_size, BasicBlock, Faa, Feb, FebBody, FebKind, Sca, SegHead, SfaStage, SEG_HEAD_CHANNELS};
pub use layers::{BatchNorm, Cbr, Conv2dLayer, ConvBn, DwSeparable, Norm};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    ConvWeight,
    ConvBias,
    BnScale,
    BnShift,
    BnRunningMean,
    BnRunningVar,
}

impl ParamKind {
    /// Updated by the optimizer.
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::BnRunningMean | ParamKind::BnRunningVar)
    }

    /// Subject to weight decay.
    pub fn decayed(self) -> bool {
        self == ParamKind::ConvWeight
    }

    pub fn is_batch_norm(self) -> bool {
        matches!(
            self,
            ParamKind::BnScale | ParamKind::BnShift | ParamKind::BnRunningMean | ParamKind::BnRunningVar
        )
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T: Element> {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor<T>,
}

/// Named tensors owned by a model. Ids stay valid after other entries are
/// removed.
#[derive(Clone, Debug)]
pub struct ParamStore<T: Element> {
    entries: Vec<Option<ParamEntry<T>>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::invalid("param_store", format!("duplicate parameter {name}")));
        }
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(Some(ParamEntry { name, kind, tensor }));
        Ok(id)
    }

    pub fn remove(&mut self, id: ParamId) -> Option<ParamEntry<T>> {
        let entry = self.entries.get_mut(id.0)?.take()?;
        self.by_name.remove(&entry.name);
        Some(entry)
    }

    pub fn get(&self, id: ParamId) -> &ParamEntry<T> {
        self.entries[id.0].as_ref().expect("parameter was removed")
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamEntry<T> {
        self.entries[id.0].as_mut().expect("parameter was removed")
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.get(id).tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.get_mut(id).tensor
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.entries.get(id.0).is_some_and(Option::is_some)
    }

    /// Live entries in creation order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<T>)> {
        self.entries
            .iter()
            .enumerate()
            .filter_map(|(i, e)| e.as_ref().map(|e| (ParamId(i), e)))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut ParamEntry<T>)> {
        self.entries
            .iter_mut()
            .enumerate()
            .filter_map(|(i, e)| e.as_mut().map(|e| (ParamId(i), e)))
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }

    pub fn count_where(&self, pred: impl Fn(ParamKind) -> bool) -> usize {
        self.iter().filter(|(_, e)| pred(e.kind)).count()
    }

    /// Total trainable scalars among `ids`.
    pub fn trainable_numel(&self, ids: &[ParamId]) -> usize {
        ids.iter()
            .filter(|&&id| self.contains(id))
            .map(|&id| self.get(id))
            .filter(|e| e.kind.trainable())
            .map(|e| e.tensor.numel())
            .sum()
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| {
                    e.as_ref().map(|e| ParamEntry {
                        name: e.name.clone(),
                        kind: e.kind,
                        tensor: e.tensor.cast(),
                    })
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    pub fn zero_grads(&mut self) {
        for (_, e) in self.iter_mut() {
            e.tensor.set_grad(None);
        }
    }
}

/// Something that owns parameters.
pub trait Module {
    fn collect_params(&self, out: &mut Vec<ParamId>);

    fn param_ids(&self) -> Vec<ParamId> {
        let mut out = Vec::new();
        self.collect_params(&mut out);
        out
    }

    /// Trainable scalars owned by this module.
    fn param_count<T: Element>(&self, store: &ParamStore<T>) -> usize {
        store.trainable_numel(&self.param_ids())
    }
}

impl<M: Module> Module for Option<M> {
    fn collect_params(&self, out: &mut Vec<ParamId>) {
        if let Some(m) = self {
            m.collect_params(out);
        }
    }
}

/// Parameter initialization schemes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with std `sqrt(2 / fan_in)`.
    KaimingNormal,
    /// Uniform on `±1/sqrt(fan_in)`.
    FanInUniform,
    Zeros,
    Constant(f64),
}

impl Init {
    pub fn tensor<T: Element>(self, shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
        let fan_in = fan_in.max(1) as f64;
        match self {
            Init::KaimingNormal => {
                let dist = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
                Tensor::from_fn(shape, |_| T::from_f64_lossy(dist.sample(rng)))
            }
            Init::FanInUniform => {
                let b = 1.0 / fan_in.sqrt();
                let dist = Uniform::new_inclusive(-b, b).expect("finite bounds");
                Tensor::from_fn(shape, |_| T::from_f64_lossy(dist.sample(rng)))
            }
            Init::Zeros => Tensor::zeros(shape),
            Init::Constant(c) => Tensor::full(shape, T::from_f64_lossy(c)),
        }
    }
}

/// Parameter-to-tape associations recorded during a forward pass.
#[derive(Clone, Debug, Default)]
pub struct Bindings(HashMap<ParamId, Var>);

impl Bindings {
    pub fn get(&self, id: ParamId) -> Option<Var> {
        self.0.get(&id).copied()
    }

    pub fn insert(&mut self, id: ParamId, var: Var) {
        self.0.insert(id, var);
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl<T: Element> ParamStore<T> {
    /// Moves gradients of bound trainable parameters from the tape into the
    /// store. Call after [`Graph::backward`].
    pub fn absorb_grads(&mut self, graph: &mut Graph<T>, bindings: &Bindings) {
        for (&id, &var) in &bindings.0 {
            let entry = self.get_mut(id);
            if entry.kind.trainable() {
                entry.tensor.set_grad(graph.take_grad(var));
            }
        }
    }
}

/// State threaded through a forward pass: the tape, the parameters, and
/// which parameters already have leaves on the tape.
pub struct Ctx<'a, T: Element> {
    pub graph: &'a mut Graph<T>,
    pub store: &'a mut ParamStore<T>,
    pub mode: Mode,
    bound: Bindings,
}

impl<'a, T: Element> Ctx<'a, T> {
    pub fn new(graph: &'a mut Graph<T>, store: &'a mut ParamStore<T>, mode: Mode) -> Self {
        Self::with_bindings(graph, store, mode, Bindings::default())
    }

    pub fn with_bindings(graph: &'a mut Graph<T>, store: &'a mut ParamStore<T>, mode: Mode, bound: Bindings) -> Self {
        Ctx {
            graph,
            store,
            mode,
            bound,
        }
    }

    /// Leaf for a parameter, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound.get(id) {
            return v;
        }
        let entry = self.store.get(id);
        let t = entry.tensor.clone();
        let v = if entry.kind.trainable() {
            self.graph.param(t)
        } else {
            self.graph.constant(t)
        };
        self.bound.insert(id, v);
        v
    }

    /// Uses an existing tape node in place of a stored parameter.
    pub fn bind(&mut self, id: ParamId, var: Var) {
        self.bound.insert(id, var);
    }

    pub fn into_bindings(self) -> Bindings {
        self.bound
    }

    /// Runs backward from `root` and stores parameter gradients in the store.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        self.graph.backward(root)?;
        self.store.absorb_grads(self.graph, &self.bound);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn store_ids_survive_removal() {
        let mut s = ParamStore::<f32>::new();
        let a = s.add("a", ParamKind::ConvWeight, Tensor::ones(vec![2])).unwrap();
        let b = s.add("b", ParamKind::BnScale, Tensor::ones(vec![3])).unwrap();
        assert!(s.add("a", ParamKind::ConvBias, Tensor::ones(vec![1])).is_err());
        s.remove(a);
        assert!(!s.contains(a));
        assert_eq!(s.tensor(b).numel(), 3);
        assert_eq!(s.len(), 1);
        assert_eq!(s.id("b"), Some(b));
        assert_eq!(s.id("a"), None);
    }

    #[test]
    fn kaiming_std_is_close() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t: Tensor<f64> = Init::KaimingNormal.tensor(vec![20000], 50, &mut rng);
        let var = t.data().iter().map(|v| v * v).sum::<f64>() / 20000.0;
        assert!((var - 2.0 / 50.0).abs() < 0.003, "{var}");
    }

    #[test]
    fn backward_fills_trainable_grads_only() {
        let mut s = ParamStore::<f64>::new();
        let w = s.add("w", ParamKind::ConvWeight, Tensor::full(vec![1, 2, 1, 1], 3.0)).unwrap();
        let rm = s.add("rm", ParamKind::BnRunningMean, Tensor::ones(vec![1, 2, 1, 1])).unwrap();
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, &mut s, Mode::Train);
        let wv = ctx.param(w);
        assert_eq!(ctx.param(w), wv);
        let rv = ctx.param(rm);
        let p = ctx.graph.mul_broadcast(wv, rv).unwrap();
        let l = ctx.graph.sum(p).unwrap();
        ctx.backward(l).unwrap();
        assert_eq!(s.tensor(w).grad().unwrap(), &[1.0, 1.0]);
        assert!(s.tensor(rm).grad().is_none());
    }
}
