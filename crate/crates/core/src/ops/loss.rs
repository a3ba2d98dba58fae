//! Pixel-wise softmax cross-entropy over `N×C×H×W` logits.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Label value excluded from losses and metrics.
pub const IGNORE_LABEL: u8 = 255;

/// Per-pixel cross-entropy and true-class probability. Ignored pixels carry
/// `None`.
pub fn pixel_cross_entropy<T: Element>(logits: &Tensor<T>, labels: &[u8]) -> Result<Vec<Option<(f64, f64)>>> {
    let (n, c, h, w) = logits.dims4()?;
    let hw = h * w;
    if labels.len() != n * hw {
        return Err(Error::shape(
            "cross_entropy",
            format!("{} labels for logits {:?}", labels.len(), logits.shape()),
        ));
    }
    let src = logits.data();
    let mut out = Vec::with_capacity(n * hw);
    for b in 0..n {
        let base = b * c * hw;
        for p in 0..hw {
            let label = labels[b * hw + p];
            if label == IGNORE_LABEL {
                out.push(None);
                continue;
            }
            let k = label as usize;
            if k >= c {
                return Err(Error::invalid(
                    "cross_entropy",
                    format!("label {k} out of range for {c} classes"),
                ));
            }
            let mx = (0..c).map(|ch| src[base + ch * hw + p].as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + (0..c)
                .map(|ch| (src[base + ch * hw + p].as_f64() - mx).exp())
                .sum::<f64>()
                .ln();
            let loss = lse - src[base + k * hw + p].as_f64();
            out.push(Some((loss, (-loss).exp())));
        }
    }
    Ok(out)
}

/// `Σ wₚ·CEₚ / Σ wₚ` over pixels with nonzero weight.
pub fn weighted_cross_entropy<T: Element>(logits: &Tensor<T>, labels: &[u8], weights: &[T]) -> Result<T> {
    let per_pixel = pixel_cross_entropy(logits, labels)?;
    let (mut num, mut den) = (0.0, 0.0);
    for (ce, &wt) in per_pixel.iter().zip(weights) {
        if let Some((loss, _)) = ce {
            num += wt.as_f64() * loss;
            den += wt.as_f64();
        }
    }
    if den <= 0.0 {
        return Err(Error::Empty("cross entropy over zero weighted pixels".into()));
    }
    Ok(T::from_f64_lossy(num / den))
}

pub fn weighted_cross_entropy_backward<T: Element>(
    logits: &Tensor<T>,
    labels: &[u8],
    weights: &[T],
    upstream: T,
) -> Result<Vec<T>> {
    let (n, c, h, w) = logits.dims4()?;
    let hw = h * w;
    let den: T = labels
        .iter()
        .zip(weights)
        .filter(|(&l, _)| l != IGNORE_LABEL)
        .map(|(_, &w)| w)
        .sum();
    let src = logits.data();
    let mut dx = vec![T::zero(); src.len()];
    for b in 0..n {
        let base = b * c * hw;
        for p in 0..hw {
            let label = labels[b * hw + p];
            let wt = weights[b * hw + p];
            if label == IGNORE_LABEL || wt == T::zero() {
                continue;
            }
            let scale = upstream * wt / den;
            let mx = (0..c).map(|ch| src[base + ch * hw + p]).fold(T::neg_infinity(), T::max);
            let s: T = (0..c).map(|ch| (src[base + ch * hw + p] - mx).exp()).sum();
            for ch in 0..c {
                let prob = (src[base + ch * hw + p] - mx).exp() / s;
                let target = if ch == label as usize { T::one() } else { T::zero() };
                dx[base + ch * hw + p] = scale * (prob - target);
            }
        }
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_class_count() {
        let logits = Tensor::<f64>::zeros(vec![1, 19, 2, 3]);
        let labels = vec![4u8; 6];
        let loss = weighted_cross_entropy(&logits, &labels, &[1.0; 6]).unwrap();
        assert!((loss - 19f64.ln()).abs() < 1e-12);
        assert!((loss - 2.9444).abs() < 1e-4);
    }

    #[test]
    fn confident_correct_logits_give_near_zero() {
        let mut logits = Tensor::<f64>::full(vec![1, 3, 1, 2], -50.0);
        logits.data_mut()[2] = 50.0; // class 1, pixel 0
        logits.data_mut()[5] = 50.0; // class 2, pixel 1
        let loss = weighted_cross_entropy(&logits, &[1, 2], &[1.0, 1.0]).unwrap();
        assert!(loss < 1e-30);
    }

    #[test]
    fn ignored_and_out_of_range_labels() {
        let logits = Tensor::<f64>::zeros(vec![1, 2, 1, 2]);
        let loss = weighted_cross_entropy(&logits, &[0, IGNORE_LABEL], &[1.0, 1.0]).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-12);
        assert!(weighted_cross_entropy(&logits, &[IGNORE_LABEL, IGNORE_LABEL], &[1.0, 1.0]).is_err());
        assert!(weighted_cross_entropy(&logits, &[0, 2], &[1.0, 1.0]).is_err());
    }
}
