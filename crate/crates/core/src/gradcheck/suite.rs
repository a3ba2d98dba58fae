//! The fixed set of gradient checks run by the `gradcheck` command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{finite_difference_check, CheckOptions, CheckReport};
use crate::error::Result;
use crate::graph::{Graph, OpKind, Var};
use crate::network::{total_loss, SfanetConfig, SfanetModel};
use crate::nn::{
    BasicBlock, Bindings, Cbr, Ctx, Faa, Feb, FebKind, Module, ParamKind, ParamStore, Sca, SegHead, SfaStage,
};
use crate::ops::{ConvSpec, PoolSpec};
use crate::tensor::Tensor;
use crate::Mode;

/// Relative error bound for the whole-network check.
pub const MODEL_TOL: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SuiteKind {
    Op(OpKind),
    Block,
    Model,
}

pub struct SuiteEntry {
    pub name: &'static str,
    pub kind: SuiteKind,
    check: fn() -> Result<CheckReport>,
}

impl SuiteEntry {
    pub fn run(&self) -> Result<CheckReport> {
        (self.check)()
    }
}

impl std::fmt::Debug for SuiteEntry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SuiteEntry")
            .field("name", &self.name)
            .field("kind", &self.kind)
            .finish()
    }
}

fn uniform(shape: Vec<usize>, seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn randn(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
    uniform(shape, seed, -1.0, 1.0)
}

/// Values with magnitude in `[0.1, 1)`, keeping clear of kinks at zero.
fn off_zero(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn op_check(f: fn(&mut Graph<f64>, &[Var]) -> Result<Var>, inputs: &[Tensor<f64>]) -> Result<CheckReport> {
    finite_difference_check(f, inputs, CheckOptions::default())
}

/// Checks `f` with respect to `inputs` and every trainable parameter the
/// module owns.
fn module_check<M: Module>(
    mut store: ParamStore<f64>,
    module: &M,
    inputs: Vec<Tensor<f64>>,
    mode: Mode,
    opts: CheckOptions,
    f: impl Fn(&M, &mut Ctx<'_, f64>, &[Var]) -> Result<Var>,
) -> Result<CheckReport> {
    let ids: Vec<_> = module
        .param_ids()
        .into_iter()
        .filter(|&id| store.get(id).kind.trainable())
        .collect();
    let n_in = inputs.len();
    let mut all = inputs;
    all.extend(ids.iter().map(|&id| store.tensor(id).clone()));
    finite_difference_check(
        |g, vars| {
            let mut b = Bindings::default();
            for (k, &id) in ids.iter().enumerate() {
                b.insert(id, vars[n_in + k]);
            }
            let mut ctx = Ctx::with_bindings(g, &mut store, mode, b);
            f(module, &mut ctx, &vars[..n_in])
        },
        &all,
        opts,
    )
}

/// Replaces the zero-initialized flow convolutions with small random
/// weights so that samples fall between grid points.
fn randomize_flow(store: &mut ParamStore<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, e) in store.iter_mut() {
        if e.name.contains(".flow.") || e.name.ends_with(".flow") {
            let scale = if e.kind == ParamKind::ConvBias { 0.3 } else { 0.1 };
            e.tensor
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-scale..scale));
        }
    }
}

fn build<M>(seed: u64, f: impl FnOnce(&mut ParamStore<f64>, &mut ChaCha8Rng) -> Result<M>) -> Result<(ParamStore<f64>, M)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = f(&mut store, &mut rng)?;
    randomize_flow(&mut store, seed + 1);
    Ok((store, m))
}

const C: usize = 4;

fn feb_check(kind: FebKind) -> Result<CheckReport> {
    let (store, feb) = build(11, |s, r| Feb::new(s, "feb", kind, C, r))?;
    module_check(store, &feb, vec![randn(vec![2, C, 6, 6], 12)], Mode::Train, CheckOptions::default(), |m, ctx, v| {
        m.forward(ctx, v[0])
    })
}

macro_rules! op {
    ($name:literal, $kind:ident, $f:expr) => {
        SuiteEntry {
            name: $name,
            kind: SuiteKind::Op(OpKind::$kind),
            check: $f,
        }
    };
}

macro_rules! block {
    ($name:literal, $f:expr) => {
        SuiteEntry {
            name: $name,
            kind: SuiteKind::Block,
            check: $f,
        }
    };
}

/// Every differentiable op once, each network block, and the full network
/// with its training loss.
pub fn standard_suite() -> Vec<SuiteEntry> {
    vec![
        op!("conv2d", Conv2d, || {
            op_check(
                |g, v| {
                    let spec = ConvSpec::new(3, 4, 3).stride(2).padding(2).dilation(2).bias(true);
                    g.conv2d(v[0], v[1], Some(v[2]), &spec)
                },
                &[randn(vec![2, 3, 7, 7], 1), randn(vec![4, 3, 3, 3], 2), randn(vec![4], 3)],
            )
        }),
        op!("batch_norm_train", BatchNormTrain, || {
            op_check(
                |g, v| Ok(g.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0),
                &[randn(vec![2, 3, 3, 3], 4), uniform(vec![3], 5, 0.5, 1.5), randn(vec![3], 6)],
            )
        }),
        op!("batch_norm_infer", BatchNormInfer, || {
            op_check(
                |g, v| g.batch_norm_infer(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[0.5, 1.0, 2.0], 1e-5),
                &[randn(vec![2, 3, 3, 3], 7), uniform(vec![3], 8, 0.5, 1.5), randn(vec![3], 9)],
            )
        }),
        op!("relu", Relu, || op_check(|g, v| g.relu(v[0]), &[off_zero(vec![2, 3, 4, 4], 10)])),
        op!("sigmoid", Sigmoid, || op_check(|g, v| g.sigmoid(v[0]), &[uniform(vec![2, 3, 4, 4], 11, -3.0, 3.0)])),
        op!("softmax_channels", SoftmaxChannels, || {
            op_check(|g, v| g.softmax_channels(v[0]), &[uniform(vec![2, 5, 3, 3], 12, -3.0, 3.0)])
        }),
        op!("add", Add, || op_check(|g, v| g.add(v[0], v[1]), &[randn(vec![2, 3, 3, 3], 13), randn(vec![2, 3, 3, 3], 14)])),
        op!("concat_channels", ConcatChannels, || {
            op_check(
                |g, v| g.concat_channels(&[v[0], v[1], v[2]]),
                &[randn(vec![2, 1, 3, 3], 15), randn(vec![2, 3, 3, 3], 16), randn(vec![2, 2, 3, 3], 17)],
            )
        }),
        op!("mul_broadcast", MulBroadcast, || {
            op_check(
                |g, v| g.mul_broadcast(v[0], v[1]),
                &[randn(vec![2, 3, 4, 4], 18), randn(vec![2, 3, 1, 1], 19)],
            )
        }),
        op!("bilinear_resize", BilinearResize, || {
            op_check(|g, v| g.bilinear_resize(v[0], 7, 5), &[randn(vec![2, 2, 3, 4], 20)])
        }),
        op!("grid_sample_warp", GridSampleWarp, || {
            op_check(
                |g, v| g.grid_sample_warp(v[0], v[1]),
                &[randn(vec![2, 2, 5, 5], 21), uniform(vec![2, 2, 5, 5], 22, -1.3, 1.3)],
            )
        }),
        op!("global_avg_pool", GlobalAvgPool, || op_check(|g, v| g.global_avg_pool(v[0]), &[randn(vec![2, 3, 4, 5], 23)])),
        op!("conv1d_channels", Conv1dChannels, || {
            op_check(
                |g, v| g.conv1d_channels(v[0], v[1]),
                &[randn(vec![2, 7, 1, 1], 24), randn(vec![3], 25)],
            )
        }),
        op!("max_pool2d", MaxPool2d, || {
            op_check(
                |g, v| {
                    g.max_pool2d(
                        v[0],
                        PoolSpec {
                            kernel: 3,
                            stride: 2,
                            padding: 1,
                        },
                    )
                },
                &[randn(vec![2, 2, 6, 6], 26)],
            )
        }),
        op!("sum", Sum, || op_check(|g, v| g.sum(v[0]), &[randn(vec![2, 3, 2, 2], 27)])),
        op!("weighted_sum", WeightedSum, || {
            op_check(
                |g, v| {
                    let a = g.sum(v[0])?;
                    let b = g.sum(v[1])?;
                    g.weighted_sum(&[(a, 1.0), (b, 0.4)])
                },
                &[randn(vec![1, 2, 2, 2], 28), randn(vec![1, 1, 3, 3], 29)],
            )
        }),
        op!("cross_entropy", CrossEntropy, || {
            op_check(
                |g, v| {
                    let labels = [0, 3, 1, 255, 2, 2, 0, 1];
                    let weights = vec![1.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 1.0];
                    g.cross_entropy(v[0], &labels, weights)
                },
                &[uniform(vec![2, 4, 2, 2], 30, -2.0, 2.0)],
            )
        }),
        block!("cbr", || {
            let (store, m) = build(40, |s, r| Cbr::new(s, "cbr", 3, C, r))?;
            module_check(store, &m, vec![randn(vec![2, 3, 5, 5], 41)], Mode::Train, CheckOptions::default(), |m, ctx, v| {
                m.forward(ctx, v[0])
            })
        }),
        block!("basic_block", || {
            let (store, m) = build(42, |s, r| BasicBlock::new(s, "block", 3, C, 2, r))?;
            module_check(store, &m, vec![randn(vec![2, 3, 6, 6], 43)], Mode::Train, CheckOptions::default(), |m, ctx, v| {
                m.forward(ctx, v[0])
            })
        }),
        block!("feb2", || feb_check(FebKind::Feb2)),
        block!("feb3", || feb_check(FebKind::Feb3)),
        block!("feb4", || feb_check(FebKind::Feb4)),
        block!("sca", || {
            let (store, m) = build(44, |s, r| Sca::new(s, "sca", 8, r))?;
            module_check(store, &m, vec![randn(vec![2, 8, 4, 4], 45)], Mode::Train, CheckOptions::default(), |m, ctx, v| {
                m.forward(ctx, v[0])
            })
        }),
        block!("faa", || {
            let (store, m) = build(46, |s, r| Faa::new(s, "faa", C, r))?;
            let inputs = vec![randn(vec![2, C, 5, 5], 47), randn(vec![2, C, 5, 5], 48)];
            module_check(store, &m, inputs, Mode::Train, CheckOptions::default(), |m, ctx, v| {
                m.forward(ctx, v[0], v[1])
            })
        }),
        block!("sfa", || {
            let (store, m) = build(49, |s, r| SfaStage::new(s, "sfa", 2, C, 6, r))?;
            let inputs = vec![randn(vec![2, C, 6, 6], 50), randn(vec![2, 6, 3, 3], 51)];
            module_check(store, &m, inputs, Mode::Train, CheckOptions::default(), |m, ctx, v| {
                m.forward(ctx, v[0], v[1])
            })
        }),
        block!("seg_head", || {
            let (store, m) = build(52, |s, r| SegHead::new(s, "head", C, 3, r))?;
            module_check(store, &m, vec![randn(vec![2, C, 3, 3], 53)], Mode::Train, CheckOptions::default(), |m, ctx, v| {
                m.forward(ctx, v[0], 7, 6)
            })
        }),
        SuiteEntry {
            name: "full_model_loss",
            kind: SuiteKind::Model,
            check: model_check,
        },
    ]
}

/// Gradient of the combined training loss of a narrow network with respect
/// to the image and every trainable parameter.
fn model_check() -> Result<CheckReport> {
    let cfg = SfanetConfig {
        width: 0.0625,
        input_h: 64,
        input_w: 64,
        lambda: [0.4, 0.0, 1.0, 0.7],
        ..SfanetConfig::default()
    };
    let mut model = SfanetModel::<f64>::new(cfg, 60)?;
    randomize_flow(&mut model.store, 61);
    let ids: Vec<_> = model
        .param_ids()
        .into_iter()
        .filter(|&id| model.store.get(id).kind.trainable())
        .collect();
    let labels: Vec<u8> = {
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        (0..2 * 64 * 64).map(|_| rng.random_range(0..4u8)).collect()
    };
    let mut inputs = vec![randn(vec![2, 3, 64, 64], 63)];
    inputs.extend(ids.iter().map(|&id| model.store.tensor(id).clone()));
    let opts = CheckOptions {
        tol: MODEL_TOL,
        samples: 4,
        ..CheckOptions::default()
    };
    finite_difference_check(
        |g, vars| {
            let mut b = Bindings::default();
            for (k, &id) in ids.iter().enumerate() {
                b.insert(id, vars[1 + k]);
            }
            let out = model.forward(g, vars[0], b)?;
            let lambda = model.config.lambda;
            Ok(total_loss(g, out.decoder.logits, out.decoder.aux, &labels, lambda, None)?.0)
        },
        &inputs,
        opts,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn covers_every_differentiable_op_once() {
        let suite = standard_suite();
        for kind in OpKind::DIFFERENTIABLE {
            let n = suite.iter().filter(|e| e.kind == SuiteKind::Op(kind)).count();
            assert_eq!(n, 1, "{kind:?}");
        }
        let mut names: Vec<_> = suite.iter().map(|e| e.name).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), suite.len());
    }

    #[test]
    fn op_entries_pass() {
        for e in standard_suite().iter().filter(|e| matches!(e.kind, SuiteKind::Op(_))) {
            let r = e.run().unwrap();
            assert!(r.passed(), "{}: {r:?}", e.name);
        }
    }
}
