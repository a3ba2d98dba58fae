//! Central-difference gradient verification in `f64`.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub mod suite;

pub use suite::{standard_suite, SuiteEntry, SuiteKind};

/// Test fixture hooks for negative controls.
pub mod fault {
    use std::cell::Cell;

    thread_local! {
        static CONV_BACKWARD: Cell<bool> = const { Cell::new(false) };
    }

    pub fn conv_backward_armed() -> bool {
        CONV_BACKWARD.with(Cell::get)
    }

    /// Corrupts conv weight gradients on this thread until dropped.
    #[must_use]
    pub struct ConvBackwardFault(());

    pub fn arm_conv_backward() -> ConvBackwardFault {
        CONV_BACKWARD.with(|c| c.set(true));
        ConvBackwardFault(())
    }

    impl Drop for ConvBackwardFault {
        fn drop(&mut self) {
            CONV_BACKWARD.with(|c| c.set(false));
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Elements probed per input; inputs at most this large are probed fully.
    pub samples: usize,
    /// Denominator floor in the relative error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            eps: 1e-5,
            tol: 1e-4,
            samples: 24,
            floor: 1e-5,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub max_rel_err: f64,
    /// `(input, element)` where the largest error occurred.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub tol: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

fn scalar_loss(
    f: &mut impl FnMut(&mut Graph<f64>, &[Var]) -> Result<Var>,
    inputs: &[Tensor<f64>],
    projection: &mut Option<Tensor<f64>>,
    seed: u64,
    record: bool,
) -> Result<(Graph<f64>, Var, Vec<Var>)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| {
            let t = t.clone();
            if record {
                g.param(t)
            } else {
                g.constant(t)
            }
        })
        .collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).numel() == 1 {
        return Ok((g, out, vars));
    }
    // Non-scalar outputs are reduced with fixed random weights so that every
    // output element contributes a distinct amount.
    let shape = g.shape(out).to_vec();
    let proj = projection.get_or_insert_with(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    });
    let p = g.constant(proj.clone());
    let weighted = g.mul_broadcast(out, p)?;
    let loss = g.sum(weighted)?;
    Ok((g, loss, vars))
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// `f` receives the graph and one leaf per input and must be a pure function
/// of the input values. Non-scalar outputs are projected to a scalar.
pub fn finite_difference_check<F>(mut f: F, inputs: &[Tensor<f64>], opts: CheckOptions) -> Result<CheckReport>
where
    F: FnMut(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut projection = None;
    let (mut g, loss, vars) = scalar_loss(&mut f, inputs, &mut projection, opts.seed, true)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| g.grad(v).map(<[f64]>::to_vec).unwrap_or_default())
        .collect();
    drop(g);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = CheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
        tol: opts.tol,
    };
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let picks: Vec<usize> = if n <= opts.samples {
            (0..n).collect()
        } else {
            index::sample(&mut rng, n, opts.samples).into_vec()
        };
        for e in picks {
            let orig = input.data()[e];
            let mut eval = |v: f64, probe: &mut Vec<Tensor<f64>>| -> Result<f64> {
                probe[i].data_mut()[e] = v;
                let (g, l, _) = scalar_loss(&mut f, probe, &mut projection, opts.seed, false)?;
                g.value(l).item()
            };
            let plus = eval(orig + opts.eps, &mut probe)?;
            let minus = eval(orig - opts.eps, &mut probe)?;
            probe[i].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic[i][e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            report.checked += 1;
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = rel;
                report.worst = Some((i, e));
            }
        }
    }
    Ok(report)
}
