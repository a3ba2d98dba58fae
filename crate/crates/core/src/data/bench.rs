//! Single-image inference latency.

use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::network::SfanetModel;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub height: usize,
    pub width: usize,
    pub warmup: usize,
    pub iters: usize,
    /// Seconds per forward pass.
    pub mean: f64,
    pub median: f64,
    pub fps: f64,
    pub bn_folded: bool,
}

/// Times `iters` forward passes of one `height×width` image after `warmup`
/// untimed ones. The model must be folded.
pub fn bench_fps<T: Element>(
    model: &mut SfanetModel<T>,
    height: usize,
    width: usize,
    warmup: usize,
    iters: usize,
) -> Result<BenchReport> {
    if iters == 0 {
        return Err(Error::invalid("bench_fps", "zero timed iterations"));
    }
    if !model.is_folded() {
        return Err(Error::Mode("benchmark requires a batch-norm-folded model".into()));
    }
    let image = Tensor::from_fn(vec![1, 3, height, width], |i| {
        T::from_f64_lossy(((i * 7919) % 255) as f64 / 128.0 - 1.0)
    });
    for _ in 0..warmup {
        model.predict(&image)?;
    }
    let mut times = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t = Instant::now();
        std::hint::black_box(model.predict(&image)?);
        times.push(t.elapsed().as_secs_f64());
    }
    let mean = times.iter().sum::<f64>() / iters as f64;
    times.sort_by(f64::total_cmp);
    let median = if iters % 2 == 1 {
        times[iters / 2]
    } else {
        (times[iters / 2 - 1] + times[iters / 2]) / 2.0
    };
    Ok(BenchReport {
        height,
        width,
        warmup,
        iters,
        mean,
        median,
        fps: 1.0 / mean,
        bn_folded: true,
    })
}
