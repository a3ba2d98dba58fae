//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value and whatever the
//! backward pass needs. Nodes are only ever appended, so index order is a
//! topological order and the reverse sweep visits each node once.

use crate::error::{Error, Result};
use crate::ops::{conv, elementwise as ew, loss, norm, pool, resample, ConvSpec, PoolSpec};
use crate::tensor::{Element, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Discriminant of a recorded operation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Conv2d,
    BatchNormTrain,
    BatchNormInfer,
    Relu,
    Sigmoid,
    SoftmaxChannels,
    Add,
    ConcatChannels,
    MulBroadcast,
    BilinearResize,
    GridSampleWarp,
    GlobalAvgPool,
    Conv1dChannels,
    MaxPool2d,
    Sum,
    WeightedSum,
    CrossEntropy,
}

impl OpKind {
    /// Every differentiable operation the tape can record.
    pub const DIFFERENTIABLE: [OpKind; 17] = [
        OpKind::Conv2d,
        OpKind::BatchNormTrain,
        OpKind::BatchNormInfer,
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::SoftmaxChannels,
        OpKind::Add,
        OpKind::ConcatChannels,
        OpKind::MulBroadcast,
        OpKind::BilinearResize,
        OpKind::GridSampleWarp,
        OpKind::GlobalAvgPool,
        OpKind::Conv1dChannels,
        OpKind::MaxPool2d,
        OpKind::Sum,
        OpKind::WeightedSum,
        OpKind::CrossEntropy,
    ];
}

enum Op<T> {
    Leaf,
    Conv2d(ConvSpec),
    BatchNorm {
        mean: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu,
    Sigmoid,
    Softmax,
    Add,
    Concat,
    MulBroadcast,
    Resize { h: usize, w: usize },
    Warp,
    Gap,
    Conv1d,
    MaxPool { argmax: Vec<usize> },
    Sum,
    WeightedSum(Vec<T>),
    CrossEntropy { labels: Vec<u8>, weights: Vec<T> },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d(_) => OpKind::Conv2d,
            Op::BatchNorm { batch_stats: true, .. } => OpKind::BatchNormTrain,
            Op::BatchNorm { .. } => OpKind::BatchNormInfer,
            Op::Relu => OpKind::Relu,
            Op::Sigmoid => OpKind::Sigmoid,
            Op::Softmax => OpKind::SoftmaxChannels,
            Op::Add => OpKind::Add,
            Op::Concat => OpKind::ConcatChannels,
            Op::MulBroadcast => OpKind::MulBroadcast,
            Op::Resize { .. } => OpKind::BilinearResize,
            Op::Warp => OpKind::GridSampleWarp,
            Op::Gap => OpKind::GlobalAvgPool,
            Op::Conv1d => OpKind::Conv1dChannels,
            Op::MaxPool { .. } => OpKind::MaxPool2d,
            Op::Sum => OpKind::Sum,
            Op::WeightedSum(_) => OpKind::WeightedSum,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    inputs: Vec<Var>,
    needs_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of recorded nodes of the given kind.
    pub fn count(&self, kind: OpKind) -> usize {
        self.nodes.iter().filter(|n| n.op.kind() == kind).count()
    }

    pub fn kinds(&self) -> impl Iterator<Item = OpKind> + '_ {
        self.nodes.iter().map(|n| n.op.kind())
    }

    /// Nodes of the given kind in recording order.
    pub fn vars_of(&self, kind: OpKind) -> Vec<Var> {
        (0..self.nodes.len())
            .filter(|&i| self.nodes[i].op.kind() == kind)
            .map(Var)
            .collect()
    }

    /// Records a leaf. Its gradient is tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let needs_grad = tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            inputs: Vec::new(),
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.nodes[v.0].value.take_grad()
    }

    pub fn into_value(mut self, v: Var) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::scalar(T::zero()))
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: Vec<Var>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: kind_name(op.kind()),
            });
        }
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            inputs,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        let out = conv::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), spec)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(out, Op::Conv2d(spec.clone()), inputs)
    }

    /// Depthwise `k×k` convolution at `dilation` (padding keeps the extent)
    /// followed by a pointwise `1×1` convolution.
    pub fn depthwise_separable_conv(&mut self, x: Var, dw: Var, pw: Var, dilation: usize) -> Result<Var> {
        if dilation < 1 {
            return Err(Error::invalid("depthwise_separable_conv", "dilation must be ≥ 1"));
        }
        let (_, c, _, _) = self.value(x).dims4()?;
        let dw_shape = self.shape(dw).to_vec();
        let pw_shape = self.shape(pw).to_vec();
        if dw_shape.len() != 4 || dw_shape[0] != c || dw_shape[1] != 1 || dw_shape[2] != dw_shape[3] {
            return Err(Error::shape(
                "depthwise_separable_conv",
                format!("depthwise weights {dw_shape:?} for {c} channels"),
            ));
        }
        if pw_shape.len() != 4 || pw_shape[1] != c || pw_shape[2..] != [1, 1] {
            return Err(Error::shape(
                "depthwise_separable_conv",
                format!("pointwise weights {pw_shape:?} for {c} channels"),
            ));
        }
        let k = dw_shape[2];
        let dw_spec = ConvSpec::new(c, c, k)
            .groups(c)
            .dilation(dilation)
            .padding(dilation * (k / 2));
        let pw_spec = ConvSpec::new(c, pw_shape[0], 1);
        let mid = self.conv2d(x, dw, None, &dw_spec)?;
        self.conv2d(mid, pw, None, &pw_spec)
    }

    /// Batch norm with batch statistics; returns the output plus the batch
    /// mean and biased variance for running-statistic updates.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, Vec<T>, Vec<T>)> {
        let (mean, var) = norm::channel_stats(self.value(x))?;
        let inv_std = norm::inv_std(&var, eps);
        let out = norm::normalize(
            self.value(x),
            &mean,
            &inv_std,
            self.value(gamma).data(),
            self.value(beta).data(),
        )?;
        let v = self.push(
            out,
            Op::BatchNorm {
                mean: mean.clone(),
                inv_std,
                batch_stats: true,
            },
            vec![x, gamma, beta],
        )?;
        Ok((v, mean, var))
    }

    pub fn batch_norm_infer(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let inv_std = norm::inv_std(running_var, eps);
        let out = norm::normalize(
            self.value(x),
            running_mean,
            &inv_std,
            self.value(gamma).data(),
            self.value(beta).data(),
        )?;
        self.push(
            out,
            Op::BatchNorm {
                mean: running_mean.to_vec(),
                inv_std,
                batch_stats: false,
            },
            vec![x, gamma, beta],
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = ew::relu(self.value(x));
        self.push(out, Op::Relu, vec![x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = ew::sigmoid(self.value(x));
        self.push(out, Op::Sigmoid, vec![x])
    }

    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let out = ew::softmax_channels(self.value(x))?;
        self.push(out, Op::Softmax, vec![x])
    }

    pub fn add(&mut self, x: Var, y: Var) -> Result<Var> {
        let out = ew::add(self.value(x), self.value(y))?;
        self.push(out, Op::Add, vec![x, y])
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = ew::concat_channels(&refs)?;
        self.push(out, Op::Concat, parts.to_vec())
    }

    pub fn mul_broadcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let out = ew::mul_broadcast(self.value(x), self.value(y))?;
        self.push(out, Op::MulBroadcast, vec![x, y])
    }

    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let out = resample::bilinear_resize(self.value(x), out_h, out_w)?;
        self.push(out, Op::Resize { h: out_h, w: out_w }, vec![x])
    }

    pub fn grid_sample_warp(&mut self, x: Var, flow: Var) -> Result<Var> {
        let out = resample::grid_sample_warp(self.value(x), self.value(flow))?;
        self.push(out, Op::Warp, vec![x, flow])
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let out = pool::global_avg_pool(self.value(x))?;
        self.push(out, Op::Gap, vec![x])
    }

    pub fn conv1d_channels(&mut self, u: Var, w: Var) -> Result<Var> {
        let out = conv::conv1d_channels_forward(self.value(u), self.value(w))?;
        self.push(out, Op::Conv1d, vec![u, w])
    }

    pub fn max_pool2d(&mut self, x: Var, spec: PoolSpec) -> Result<Var> {
        let (out, argmax) = pool::max_pool2d(self.value(x), spec)?;
        self.push(out, Op::MaxPool { argmax }, vec![x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum, vec![x])
    }

    /// `Σ cᵢ·xᵢ` over one-element inputs.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        if terms.is_empty() {
            return Err(Error::invalid("weighted_sum", "no terms"));
        }
        let mut total = T::zero();
        for &(v, c) in terms {
            total += c * self.value(v).item()?;
        }
        let (inputs, coeffs) = terms.iter().copied().unzip();
        self.push(Tensor::scalar(total), Op::WeightedSum(coeffs), inputs)
    }

    /// Softmax cross-entropy averaged over pixels with nonzero `weights`.
    /// `IGNORE_LABEL` pixels never contribute.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[u8], weights: Vec<T>) -> Result<Var> {
        if weights.len() != labels.len() {
            return Err(Error::shape("cross_entropy", "weights and labels differ in length"));
        }
        let value = loss::weighted_cross_entropy(self.value(logits), labels, &weights)?;
        self.push(
            Tensor::scalar(value),
            Op::CrossEntropy {
                labels: labels.to_vec(),
                weights,
            },
            vec![logits],
        )
    }

    /// Propagates `d root / d node` to every node that needs it. Leaves that
    /// require gradients end up with a populated grad buffer (zeros when the
    /// root does not depend on them).
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let root_value = &self.nodes[root.0].value;
        if root_value.numel() != 1 {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut reach = vec![false; root.0 + 1];
        reach[root.0] = true;
        for i in (0..=root.0).rev() {
            if reach[i] {
                for inp in &self.nodes[i].inputs {
                    reach[inp.0] = true;
                }
            }
        }

        let mut grads: Vec<Option<Vec<T>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            if !reach[i] || !self.nodes[i].needs_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(dy);
                continue;
            }
            let need: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].needs_grad).collect();
            let input_grads = self.node_backward(i, &dy, &need)?;
            for (inp, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                match &mut grads[inp.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                    slot @ None => *slot = Some(g),
                }
            }
        }

        for (i, node) in self.nodes.iter_mut().enumerate() {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad() {
                let g = grads
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
                node.value.set_grad(Some(g));
            }
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, dy: &[T], need: &[bool]) -> Result<Vec<Option<Vec<T>>>> {
        let node = &self.nodes[i];
        let input = |k: usize| &self.nodes[node.inputs[k].0].value;
        let want = |k: usize| need.get(k).copied().unwrap_or(false);
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d(spec) => {
                let g = conv::conv2d_backward(input(0), input(1), spec, dy, (want(0), want(1), want(2)))?;
                vec![g.dx, g.dw, g.db]
            }
            Op::BatchNorm {
                mean,
                inv_std,
                batch_stats,
            } => {
                let g = norm::normalize_backward(input(0), mean, inv_std, input(1).data(), dy, *batch_stats)?;
                vec![Some(g.dx), Some(g.dgamma), Some(g.dbeta)]
            }
            Op::Relu => vec![Some(ew::relu_backward(input(0), dy))],
            Op::Sigmoid => vec![Some(ew::sigmoid_backward(&node.value, dy))],
            Op::Softmax => vec![Some(ew::softmax_channels_backward(&node.value, dy)?)],
            Op::Add => vec![Some(dy.to_vec()), Some(dy.to_vec())],
            Op::Concat => {
                let (n, _, h, w) = node.value.dims4()?;
                let channels: Vec<usize> = (0..node.inputs.len()).map(|k| input(k).shape()[1]).collect();
                ew::split_channels(dy, n, h * w, &channels).into_iter().map(Some).collect()
            }
            Op::MulBroadcast => {
                let (dx, dyv) = ew::mul_broadcast_backward(input(0), input(1), dy)?;
                vec![Some(dx), Some(dyv)]
            }
            Op::Resize { h, w } => vec![Some(resample::bilinear_resize_backward(input(0).shape(), *h, *w, dy))],
            Op::Warp => {
                let (dx, dflow) = resample::grid_sample_warp_backward(input(0), input(1), dy)?;
                vec![Some(dx), Some(dflow)]
            }
            Op::Gap => vec![Some(pool::global_avg_pool_backward(input(0).shape(), dy))],
            Op::Conv1d => {
                let (du, dw) = conv::conv1d_channels_backward(input(0), input(1), dy)?;
                vec![Some(du), Some(dw)]
            }
            Op::MaxPool { argmax } => vec![Some(pool::max_pool2d_backward(input(0).numel(), argmax, dy))],
            Op::Sum => vec![Some(vec![dy[0]; input(0).numel()])],
            Op::WeightedSum(coeffs) => coeffs.iter().map(|&c| Some(vec![c * dy[0]])).collect(),
            Op::CrossEntropy { labels, weights } => vec![Some(loss::weighted_cross_entropy_backward(
                input(0),
                labels,
                weights,
                dy[0],
            )?)],
        })
    }
}

fn kind_name(kind: OpKind) -> &'static str {
    match kind {
        OpKind::Leaf => "leaf",
        OpKind::Conv2d => "conv2d",
        OpKind::BatchNormTrain => "batch_norm(train)",
        OpKind::BatchNormInfer => "batch_norm(infer)",
        OpKind::Relu => "relu",
        OpKind::Sigmoid => "sigmoid",
        OpKind::SoftmaxChannels => "softmax_channels",
        OpKind::Add => "add",
        OpKind::ConcatChannels => "concat_channels",
        OpKind::MulBroadcast => "mul_broadcast",
        OpKind::BilinearResize => "bilinear_resize",
        OpKind::GridSampleWarp => "grid_sample_warp",
        OpKind::GlobalAvgPool => "global_avg_pool",
        OpKind::Conv1dChannels => "conv1d_channels",
        OpKind::MaxPool2d => "max_pool2d",
        OpKind::Sum => "sum",
        OpKind::WeightedSum => "weighted_sum",
        OpKind::CrossEntropy => "cross_entropy",
    }
}

impl OpKind {
    pub fn name(self) -> &'static str {
        kind_name(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_tensor(v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(vec![1, v.len(), 1, 1], v.to_vec()).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.param(vec_tensor(&[1.0, -2.0, 3.0]));
        let l = g.sum(x).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient_is_twice_input() {
        let mut g = Graph::new();
        let x = g.param(vec_tensor(&[1.0, -2.0, 3.0]));
        let sq = g.mul_broadcast(x, x).unwrap();
        let l = g.sum(sq).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::new();
        let x = g.param(vec_tensor(&[0.5, 0.25]));
        let a = g.sum(x).unwrap();
        let b = g.sum(x).unwrap();
        let l = g.weighted_sum(&[(a, 1.0), (b, 1.0)]).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(vec_tensor(&[1.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert!(matches!(g.backward(y), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn unreachable_leaves_get_zero_grads_and_constants_none() {
        let mut g = Graph::new();
        let x = g.param(vec_tensor(&[1.0]));
        let unused = g.param(vec_tensor(&[1.0, 2.0]));
        let c = g.constant(vec_tensor(&[3.0]));
        let p = g.mul_broadcast(x, c).unwrap();
        let l = g.sum(p).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[3.0]);
        assert_eq!(g.grad(unused).unwrap(), &[0.0, 0.0]);
        assert!(g.grad(c).is_none());
    }

    #[test]
    fn non_finite_outputs_are_errors() {
        let mut g = Graph::new();
        let x = g.constant(vec_tensor(&[f64::MAX, f64::MAX]));
        assert!(matches!(g.sum(x), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn depthwise_separable_identity_and_composition() {
        let c = 4;
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(vec![1, c, 8, 8], |i| (i as f64 * 0.37).sin()));
        let mut delta = Tensor::zeros(vec![c, 1, 3, 3]);
        for ch in 0..c {
            delta.data_mut()[ch * 9 + 4] = 1.0;
        }
        let dw = g.constant(delta);
        let mut eye = Tensor::zeros(vec![c, c, 1, 1]);
        for ch in 0..c {
            eye.data_mut()[ch * c + ch] = 1.0;
        }
        let pw = g.constant(eye);
        let y = g.depthwise_separable_conv(x, dw, pw, 1).unwrap();
        assert_eq!(g.value(y), g.value(x));

        let dw_r = g.constant(Tensor::from_fn(vec![c, 1, 3, 3], |i| (i as f64 * 0.11).cos()));
        let pw_r = g.constant(Tensor::from_fn(vec![6, c, 1, 1], |i| (i as f64 * 0.7).sin()));
        let y = g.depthwise_separable_conv(x, dw_r, pw_r, 2).unwrap();
        let dw_spec = ConvSpec::new(c, c, 3).groups(c).dilation(2).padding(2);
        let mid = conv::conv2d_forward(g.value(x), g.value(dw_r), None, &dw_spec).unwrap();
        let want = conv::conv2d_forward(&mid, g.value(pw_r), None, &ConvSpec::new(c, 6, 1)).unwrap();
        assert!(g.value(y).max_abs_diff(&want).unwrap() < 1e-12);

        let y5 = g.depthwise_separable_conv(x, dw_r, pw_r, 5).unwrap();
        assert_eq!(g.shape(y5), &[1, 6, 8, 8]);
        assert!(g.depthwise_separable_conv(x, dw_r, pw_r, 0).is_err());
    }
}
