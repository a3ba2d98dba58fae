//! Batch normalization over the channel axis of `N×C×H×W` maps.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};
use crate::Mode;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

/// Per-channel mean and biased variance over batch and spatial axes.
pub fn channel_stats<T: Element>(x: &Tensor<T>) -> Result<(Vec<T>, Vec<T>)> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let count = n * hw;
    if count == 0 {
        return Err(Error::Empty("batch norm statistics over zero elements".into()));
    }
    let inv = T::one() / T::from_usize(count).unwrap();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for b in 0..n {
            let off = (b * c + ch) * hw;
            s += x.data()[off..off + hw].iter().copied().sum::<T>();
        }
        let m = s * inv;
        let mut v = T::zero();
        for b in 0..n {
            let off = (b * c + ch) * hw;
            v += x.data()[off..off + hw]
                .iter()
                .map(|&e| (e - m) * (e - m))
                .sum::<T>();
        }
        mean[ch] = m;
        var[ch] = v * inv;
    }
    Ok((mean, var))
}

/// `y = gamma · (x − mean) · inv_std + beta`, channelwise.
pub fn normalize<T: Element>(
    x: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    beta: &[T],
) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    for (name, len) in [
        ("mean", mean.len()),
        ("inv_std", inv_std.len()),
        ("gamma", gamma.len()),
        ("beta", beta.len()),
    ] {
        if len != c {
            return Err(Error::shape(
                "batch_norm",
                format!("{name} has {len} entries for {c} channels"),
            ));
        }
    }
    let hw = h * w;
    let mut out = x.data().to_vec();
    for b in 0..n {
        for ch in 0..c {
            let scale = gamma[ch] * inv_std[ch];
            let shift = beta[ch] - mean[ch] * scale;
            let off = (b * c + ch) * hw;
            out[off..off + hw]
                .iter_mut()
                .for_each(|v| *v = *v * scale + shift);
        }
    }
    Tensor::from_vec(x.shape().to_vec(), out)
}

pub fn inv_std<T: Element>(var: &[T], eps: f64) -> Vec<T> {
    let eps = T::from_f64_lossy(eps);
    var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect()
}

pub struct NormGrads<T> {
    pub dx: Vec<T>,
    pub dgamma: Vec<T>,
    pub dbeta: Vec<T>,
}

/// Backward pass. With `batch_stats` the mean and variance are functions of
/// `x` (train mode); otherwise they are constants (infer mode).
pub fn normalize_backward<T: Element>(
    x: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    dy: &[T],
    batch_stats: bool,
) -> Result<NormGrads<T>> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let m = T::from_usize(n * hw).unwrap();
    let mut dx = vec![T::zero(); x.numel()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let (mut sum_dy, mut sum_dy_xhat) = (T::zero(), T::zero());
        for b in 0..n {
            let off = (b * c + ch) * hw;
            for (&xv, &g) in x.data()[off..off + hw].iter().zip(&dy[off..off + hw]) {
                let xhat = (xv - mean[ch]) * inv_std[ch];
                sum_dy += g;
                sum_dy_xhat += g * xhat;
            }
        }
        dgamma[ch] = sum_dy_xhat;
        dbeta[ch] = sum_dy;
        let k = gamma[ch] * inv_std[ch];
        for b in 0..n {
            let off = (b * c + ch) * hw;
            for i in off..off + hw {
                dx[i] = if batch_stats {
                    let xhat = (x.data()[i] - mean[ch]) * inv_std[ch];
                    k * (dy[i] - sum_dy / m - xhat * sum_dy_xhat / m)
                } else {
                    k * dy[i]
                };
            }
        }
    }
    Ok(NormGrads { dx, dgamma, dbeta })
}

/// Standalone batch-norm layer state, for use outside a recorded graph.
#[derive(Clone, Debug)]
pub struct BatchNormState<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
    pub mode: Mode,
}

impl<T: Element> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: DEFAULT_MOMENTUM,
            eps: DEFAULT_EPS,
            mode: Mode::Train,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.channels() {
            return Err(Error::shape(
                "batch_norm",
                format!("input has {c} channels, state has {}", self.channels()),
            ));
        }
        if self.eps <= 0.0 {
            return Err(Error::invalid("batch_norm", "eps must be positive"));
        }
        match self.mode {
            Mode::Train => {
                let (mean, var) = channel_stats(x)?;
                let count = x.numel() / c;
                update_running(
                    &mut self.running_mean,
                    &mut self.running_var,
                    &mean,
                    &var,
                    count,
                    self.momentum,
                );
                normalize(x, &mean, &inv_std(&var, self.eps), &self.gamma, &self.beta)
            }
            Mode::Infer => normalize(
                x,
                &self.running_mean,
                &inv_std(&self.running_var, self.eps),
                &self.gamma,
                &self.beta,
            ),
        }
    }
}

/// Exponential moving update of running statistics. The running variance
/// uses the unbiased batch estimate.
pub fn update_running<T: Element>(
    running_mean: &mut [T],
    running_var: &mut [T],
    mean: &[T],
    var: &[T],
    count: usize,
    momentum: f64,
) {
    let m = T::from_f64_lossy(momentum);
    let keep = T::one() - m;
    let unbias = if count > 1 {
        T::from_usize(count).unwrap() / T::from_usize(count - 1).unwrap()
    } else {
        T::one()
    };
    for ch in 0..mean.len() {
        running_mean[ch] = keep * running_mean[ch] + m * mean[ch];
        running_var[ch] = keep * running_var[ch] + m * var[ch] * unbias;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn infer_mode_example() {
        let mut bn = BatchNormState::<f64>::new(1);
        bn.mode = Mode::Infer;
        bn.running_mean = vec![1.0];
        bn.running_var = vec![3.0];
        let x = Tensor::from_vec(vec![1, 1, 1, 1], vec![2.0]).unwrap();
        let y = bn.forward(&x).unwrap();
        let want = (2.0 - 1.0) / (3.0f64 + 1e-5).sqrt();
        assert!((y.data()[0] - want).abs() < 1e-12);
        assert!((y.data()[0] - 0.577347).abs() < 1e-5);
    }

    #[test]
    fn constant_input_in_train_mode_gives_beta() {
        let mut bn = BatchNormState::<f64>::new(2);
        bn.beta = vec![0.25, -1.5];
        let x = Tensor::full(vec![3, 2, 2, 2], 4.0);
        let y = bn.forward(&x).unwrap();
        for (i, v) in y.data().iter().enumerate() {
            let ch = (i / 4) % 2;
            assert_eq!(*v, bn.beta[ch]);
        }
    }

    #[test]
    fn inverse_affine_is_identity_in_infer_mode() {
        let mut bn = BatchNormState::<f64>::new(2);
        bn.mode = Mode::Infer;
        bn.running_mean = vec![0.5, -2.0];
        bn.running_var = vec![2.0, 0.1];
        bn.gamma = bn.running_var.iter().map(|v| (v + bn.eps).sqrt()).collect();
        bn.beta = bn.running_mean.clone();
        let x = Tensor::from_fn(vec![2, 2, 3, 3], |i| i as f64 * 0.3 - 2.0);
        let y = bn.forward(&x).unwrap();
        assert!(y.max_abs_diff(&x).unwrap() < 1e-12);
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut bn = BatchNormState::<f64>::new(1);
        let x = Tensor::from_vec(vec![2, 1, 1, 1], vec![1.0, 3.0]).unwrap();
        bn.forward(&x).unwrap();
        assert!((bn.running_mean[0] - 0.2).abs() < 1e-12);
        // biased var 1, unbiased 2: 0.9·1 + 0.1·2
        assert!((bn.running_var[0] - 1.1).abs() < 1e-12);
        assert!(bn.running_var.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let mut bn = BatchNormState::<f32>::new(3);
        assert!(bn.forward(&Tensor::zeros(vec![1, 2, 2, 2])).is_err());
    }
}
