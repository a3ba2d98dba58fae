use rand::Rng;

use super::{Ctx, Init, Module, ParamId, ParamKind, ParamStore};
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::ops::norm::{update_running, DEFAULT_EPS, DEFAULT_MOMENTUM};
use crate::ops::ConvSpec;
use crate::tensor::{Element, Tensor};
use crate::Mode;

#[derive(Clone, Debug)]
pub struct Conv2dLayer {
    pub spec: ConvSpec,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    name: String,
}

impl Conv2dLayer {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: ConvSpec,
        init: Init,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        spec.validate()?;
        let shape = spec.weight_shape();
        let fan_in = shape[1] * shape[2] * shape[3];
        let weight = store.add(
            format!("{name}.weight"),
            ParamKind::ConvWeight,
            init.tensor(shape.to_vec(), fan_in, rng),
        )?;
        let bias = if spec.has_bias {
            Some(store.add(
                format!("{name}.bias"),
                ParamKind::ConvBias,
                Tensor::zeros(vec![spec.out_channels]),
            )?)
        } else {
            None
        };
        Ok(Conv2dLayer {
            spec,
            weight,
            bias,
            name: name.to_string(),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        ctx.graph.conv2d(x, w, b, &self.spec)
    }

    /// Applies `y ↦ scale·y + shift` per output channel to this layer's
    /// weights and bias, adding a bias if there was none.
    fn absorb_affine<T: Element>(&mut self, store: &mut ParamStore<T>, scale: &[f64], shift: &[f64]) -> Result<()> {
        let per_out = self.spec.weight_shape()[1..].iter().product::<usize>();
        let w = store.tensor_mut(self.weight);
        for (o, chunk) in w.data_mut().chunks_exact_mut(per_out).enumerate() {
            for v in chunk {
                *v = T::from_f64_lossy(v.as_f64() * scale[o]);
            }
        }
        let bias_id = match self.bias {
            Some(id) => id,
            None => {
                let id = store.add(
                    format!("{}.bias", self.name),
                    ParamKind::ConvBias,
                    Tensor::zeros(vec![self.spec.out_channels]),
                )?;
                self.bias = Some(id);
                self.spec.has_bias = true;
                id
            }
        };
        let b = store.tensor_mut(bias_id);
        for (o, v) in b.data_mut().iter_mut().enumerate() {
            *v = T::from_f64_lossy(v.as_f64() * scale[o] + shift[o]);
        }
        Ok(())
    }
}

impl Module for Conv2dLayer {
    fn collect_params(&self, out: &mut Vec<ParamId>) {
        out.push(self.weight);
        out.extend(self.bias);
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub channels: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        let c = vec![channels];
        Ok(BatchNorm {
            channels,
            gamma: store.add(format!("{name}.gamma"), ParamKind::BnScale, Tensor::ones(c.clone()))?,
            beta: store.add(format!("{name}.beta"), ParamKind::BnShift, Tensor::zeros(c.clone()))?,
            running_mean: store.add(
                format!("{name}.running_mean"),
                ParamKind::BnRunningMean,
                Tensor::zeros(c.clone()),
            )?,
            running_var: store.add(format!("{name}.running_var"), ParamKind::BnRunningVar, Tensor::ones(c))?,
            eps: DEFAULT_EPS,
            momentum: DEFAULT_MOMENTUM,
        })
    }

    /// Train mode normalizes with batch statistics and updates the running
    /// statistics in the store; infer mode uses the running statistics.
    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let g = ctx.param(self.gamma);
        let b = ctx.param(self.beta);
        match ctx.mode {
            Mode::Train => {
                let (y, mean, var) = ctx.graph.batch_norm_train(x, g, b, self.eps)?;
                let count = ctx.graph.value(x).numel() / self.channels;
                let mut rm = ctx.store.tensor(self.running_mean).data().to_vec();
                let mut rv = ctx.store.tensor(self.running_var).data().to_vec();
                update_running(&mut rm, &mut rv, &mean, &var, count, self.momentum);
                ctx.store.tensor_mut(self.running_mean).data_mut().copy_from_slice(&rm);
                ctx.store.tensor_mut(self.running_var).data_mut().copy_from_slice(&rv);
                Ok(y)
            }
            Mode::Infer => {
                let rm = ctx.store.tensor(self.running_mean).data().to_vec();
                let rv = ctx.store.tensor(self.running_var).data().to_vec();
                ctx.graph.batch_norm_infer(x, g, b, &rm, &rv, self.eps)
            }
        }
    }

    /// Infer-mode affine `(scale, shift)` per channel; removes this layer's
    /// tensors from the store.
    fn take_affine<T: Element>(&self, store: &mut ParamStore<T>) -> (Vec<f64>, Vec<f64>) {
        let f = |store: &ParamStore<T>, id| -> Vec<f64> { store.tensor(id).data().iter().map(|v| v.as_f64()).collect() };
        let (gamma, beta) = (f(store, self.gamma), f(store, self.beta));
        let (mean, var) = (f(store, self.running_mean), f(store, self.running_var));
        for id in [self.gamma, self.beta, self.running_mean, self.running_var] {
            store.remove(id);
        }
        let scale: Vec<f64> = gamma.iter().zip(&var).map(|(g, v)| g / (v + self.eps).sqrt()).collect();
        let shift = beta.iter().zip(&mean).zip(&scale).map(|((b, m), s)| b - m * s).collect();
        (scale, shift)
    }
}

impl Module for BatchNorm {
    fn collect_params(&self, out: &mut Vec<ParamId>) {
        out.extend([self.gamma, self.beta, self.running_mean, self.running_var]);
    }
}

/// Convolution optionally followed by batch norm. After folding the norm is
/// gone and the convolution carries a bias.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: Conv2dLayer,
    pub bn: Option<BatchNorm>,
}

impl ConvBn {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: ConvSpec,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let conv = Conv2dLayer::new(store, &format!("{name}.conv"), spec.clone(), Init::KaimingNormal, rng)?;
        let bn = BatchNorm::new(store, &format!("{name}.bn"), spec.out_channels)?;
        Ok(ConvBn { conv, bn: Some(bn) })
    }

    pub fn out_channels(&self) -> usize {
        self.conv.spec.out_channels
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        match &self.bn {
            Some(bn) => bn.forward(ctx, y),
            None => Ok(y),
        }
    }

    pub fn fold_bn<T: Element>(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if let Some(bn) = self.bn.take() {
            let (scale, shift) = bn.take_affine(store);
            self.conv.absorb_affine(store, &scale, &shift)?;
        }
        Ok(())
    }
}

impl Module for ConvBn {
    fn collect_params(&self, out: &mut Vec<ParamId>) {
        self.conv.collect_params(out);
        self.bn.collect_params(out);
    }
}

/// 3×3 conv, batch norm, ReLU; extents preserved.
#[derive(Clone, Debug)]
pub struct Cbr {
    pub inner: ConvBn,
}

impl Cbr {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let spec = ConvSpec::same(in_channels, out_channels, 3);
        Ok(Cbr {
            inner: ConvBn::new(store, name, spec, rng)?,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.inner.out_channels()
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.inner.forward(ctx, x)?;
        ctx.graph.relu(y)
    }

    pub fn fold_bn<T: Element>(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        self.inner.fold_bn(store)
    }
}

impl Module for Cbr {
    fn collect_params(&self, out: &mut Vec<ParamId>) {
        self.inner.collect_params(out);
    }
}

/// A standalone per-channel normalization. Folding turns it into a
/// per-channel affine map realized as a 1×1 depthwise convolution with bias,
/// which stays exact regardless of what follows it.
#[derive(Clone, Debug)]
pub enum Norm {
    Batch(BatchNorm),
    Affine(Conv2dLayer),
}

impl Norm {
    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        match self {
            Norm::Batch(bn) => bn.forward(ctx, x),
            Norm::Affine(conv) => conv.forward(ctx, x),
        }
    }

    pub fn fold_bn<T: Element>(&mut self, store: &mut ParamStore<T>, name: &str) -> Result<()> {
        if let Norm::Batch(bn) = self {
            let c = bn.channels;
            let (scale, shift) = bn.take_affine(store);
            let spec = ConvSpec::new(c, c, 1).groups(c).bias(true);
            let weight = store.add(
                format!("{name}.affine.weight"),
                ParamKind::ConvWeight,
                Tensor::from_fn(vec![c, 1, 1, 1], |i| T::from_f64_lossy(scale[i])),
            )?;
            let bias = store.add(
                format!("{name}.affine.bias"),
                ParamKind::ConvBias,
                Tensor::from_fn(vec![c], |i| T::from_f64_lossy(shift[i])),
            )?;
            *self = Norm::Affine(Conv2dLayer {
                spec,
                weight,
                bias: Some(bias),
                name: format!("{name}.affine"),
            });
        }
        Ok(())
    }
}

impl Module for Norm {
    fn collect_params(&self, out: &mut Vec<ParamId>) {
        match self {
            Norm::Batch(bn) => bn.collect_params(out),
            Norm::Affine(conv) => conv.collect_params(out),
        }
    }
}

/// Depthwise 3×3 at a given dilation followed by a pointwise 1×1, no biases.
#[derive(Clone, Debug)]
pub struct DwSeparable {
    pub channels: usize,
    pub out_channels: usize,
    pub dilation: usize,
    pub depthwise: ParamId,
    pub pointwise: ParamId,
}

impl DwSeparable {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        out_channels: usize,
        dilation: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if dilation < 1 {
            return Err(Error::invalid("depthwise_separable_conv", "dilation must be ≥ 1"));
        }
        let depthwise = store.add(
            format!("{name}.depthwise.weight"),
            ParamKind::ConvWeight,
            Init::KaimingNormal.tensor(vec![channels, 1, 3, 3], 9, rng),
        )?;
        let pointwise = store.add(
            format!("{name}.pointwise.weight"),
            ParamKind::ConvWeight,
            Init::KaimingNormal.tensor(vec![out_channels, channels, 1, 1], channels, rng),
        )?;
        Ok(DwSeparable {
            channels,
            out_channels,
            dilation,
            depthwise,
            pointwise,
        })
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let dw = ctx.param(self.depthwise);
        let pw = ctx.param(self.pointwise);
        ctx.graph.depthwise_separable_conv(x, dw, pw, self.dilation)
    }
}

impl Module for DwSeparable {
    fn collect_params(&self, out: &mut Vec<ParamId>) {
        out.extend([self.depthwise, self.pointwise]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::ops::{conv, elementwise, norm};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn input(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn cbr_matches_kernel_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let cbr = Cbr::new(&mut store, "cbr", 128, 64, &mut rng).unwrap();
        store.tensor_mut(cbr.inner.bn.as_ref().unwrap().gamma).data_mut()[3] = 1.7;
        let x = input(vec![2, 128, 5, 6], 2);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = cbr.forward(&mut Ctx::new(&mut g, &mut store, Mode::Train), xv).unwrap();
        assert_eq!(g.shape(y), &[2, 64, 5, 6]);

        let c = conv::conv2d_forward(&x, store.tensor(cbr.inner.conv.weight), None, &cbr.inner.conv.spec).unwrap();
        let mut bn = norm::BatchNormState::<f64>::new(64);
        bn.gamma[3] = 1.7;
        let want = elementwise::relu(&bn.forward(&c).unwrap());
        assert!(g.value(y).max_abs_diff(&want).unwrap() < 1e-12);
        // Running statistics were updated by the forward pass.
        let rm = store.tensor(cbr.inner.bn.as_ref().unwrap().running_mean);
        assert_eq!(rm.data(), bn.running_mean.as_slice());
    }

    #[test]
    fn cbr_zero_weights_give_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let cbr = Cbr::new(&mut store, "cbr", 4, 6, &mut rng).unwrap();
        store.tensor_mut(cbr.inner.conv.weight).data_mut().fill(0.0);
        let mut g = Graph::new();
        let xv = g.constant(input(vec![1, 4, 3, 3], 4));
        let y = cbr.forward(&mut Ctx::new(&mut g, &mut store, Mode::Train), xv).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        // 6·4·9 conv weights plus 6 scales and 6 shifts.
        assert_eq!(cbr.param_count(&store), 228);
    }

    #[test]
    fn conv_bn_fold_matches_infer_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f64>::new();
        let mut cb = ConvBn::new(&mut store, "cb", ConvSpec::same(3, 5, 3).stride(2), &mut rng).unwrap();
        let bn = cb.bn.clone().unwrap();
        for (id, lo) in [(bn.gamma, 0.5), (bn.beta, -1.0), (bn.running_mean, -1.0), (bn.running_var, 0.2)] {
            let t = input(vec![5], id.0 as u64).map(|v| lo + v.abs());
            *store.tensor_mut(id) = t;
        }
        let x = input(vec![2, 3, 7, 7], 9);
        let run = |cb: &ConvBn, store: &mut ParamStore<f64>| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let y = cb.forward(&mut Ctx::new(&mut g, store, Mode::Infer), xv).unwrap();
            g.into_value(y)
        };
        let before = run(&cb, &mut store);
        cb.fold_bn(&mut store).unwrap();
        let after = run(&cb, &mut store);
        assert!(before.max_abs_diff(&after).unwrap() < 1e-12);
        assert_eq!(store.count_where(ParamKind::is_batch_norm), 0);
        assert!(cb.conv.bias.is_some());
    }

    #[test]
    fn identity_bn_leaves_weights_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::<f64>::new();
        let mut cb = ConvBn::new(&mut store, "cb", ConvSpec::same(2, 2, 3), &mut rng).unwrap();
        let bn = cb.bn.clone().unwrap();
        let var = 0.3;
        store.tensor_mut(bn.running_var).data_mut().fill(var);
        store.tensor_mut(bn.gamma).data_mut().fill((var + bn.eps).sqrt());
        store.tensor_mut(bn.running_mean).data_mut().fill(0.25);
        store.tensor_mut(bn.beta).data_mut().fill(0.25);
        let w = store.tensor(cb.conv.weight).clone();
        cb.fold_bn(&mut store).unwrap();
        assert!(store.tensor(cb.conv.weight).max_abs_diff(&w).unwrap() < 1e-15);
        assert!(store.tensor(cb.conv.bias.unwrap()).data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn folded_norm_is_exact_affine() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm::new(&mut store, "n", 3).unwrap();
        *store.tensor_mut(bn.running_mean) = Tensor::from_vec(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        *store.tensor_mut(bn.running_var) = Tensor::from_vec(vec![3], vec![4.0, 0.25, 1.0]).unwrap();
        *store.tensor_mut(bn.gamma) = Tensor::from_vec(vec![3], vec![2.0, 1.0, -1.0]).unwrap();
        let mut n = Norm::Batch(bn);
        let x = input(vec![2, 3, 4, 4], 11);
        let run = |n: &Norm, store: &mut ParamStore<f64>| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let y = n.forward(&mut Ctx::new(&mut g, store, Mode::Infer), xv).unwrap();
            g.into_value(y)
        };
        let before = run(&n, &mut store);
        n.fold_bn(&mut store, "n").unwrap();
        assert!(matches!(n, Norm::Affine(_)));
        assert!(before.max_abs_diff(&run(&n, &mut store)).unwrap() < 1e-12);
    }
}
