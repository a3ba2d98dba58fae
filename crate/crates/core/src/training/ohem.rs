//! Online hard example mining over per-pixel cross-entropy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::loss::pixel_cross_entropy;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OhemConfig {
    /// Pixels whose true-class probability reaches this are easy. Values of
    /// 1 or more disable mining.
    pub threshold: f64,
    /// Lower bound on kept pixels; `None` means one sixteenth of the batch
    /// pixels.
    pub min_kept: Option<usize>,
}

impl Default for OhemConfig {
    fn default() -> Self {
        OhemConfig {
            threshold: 0.7,
            min_kept: None,
        }
    }
}

/// 0/1 weight per pixel marking the pixels that enter the loss.
///
/// `per_pixel` holds `(loss, true-class probability)` or `None` for ignored
/// pixels. Easy pixels are dropped unless fewer than `min_kept` hard ones
/// remain, in which case the `min_kept` highest-loss pixels are kept.
pub fn ohem_mask(per_pixel: &[Option<(f64, f64)>], cfg: &OhemConfig) -> Result<Vec<bool>> {
    let valid: Vec<usize> = (0..per_pixel.len()).filter(|&i| per_pixel[i].is_some()).collect();
    if valid.is_empty() {
        return Err(Error::Empty("no valid pixels for the principal loss".into()));
    }
    let mut keep = vec![false; per_pixel.len()];
    if cfg.threshold >= 1.0 {
        for &i in &valid {
            keep[i] = true;
        }
        return Ok(keep);
    }
    let min_kept = cfg
        .min_kept
        .unwrap_or(per_pixel.len() / 16)
        .clamp(1, valid.len());
    let hard: Vec<usize> = valid
        .iter()
        .copied()
        .filter(|&i| per_pixel[i].is_some_and(|(_, p)| p < cfg.threshold))
        .collect();
    if hard.len() >= min_kept {
        for i in hard {
            keep[i] = true;
        }
    } else {
        let mut by_loss = valid;
        by_loss.sort_by(|&a, &b| {
            let (la, lb) = (per_pixel[a].unwrap().0, per_pixel[b].unwrap().0);
            lb.total_cmp(&la).then(a.cmp(&b))
        });
        for &i in &by_loss[..min_kept] {
            keep[i] = true;
        }
    }
    Ok(keep)
}

/// Mean cross-entropy over the mined pixels.
pub fn ohem_cross_entropy<T: Element>(logits: &Tensor<T>, labels: &[u8], cfg: &OhemConfig) -> Result<f64> {
    let per_pixel = pixel_cross_entropy(logits, labels)?;
    let keep = ohem_mask(&per_pixel, cfg)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for (ce, k) in per_pixel.iter().zip(keep) {
        if let (Some((l, _)), true) = (ce, k) {
            sum += l;
            n += 1;
        }
    }
    Ok(sum / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::IGNORE_LABEL;

    /// Two-class logits giving the requested true-class probability for
    /// label 0.
    fn logits_for(probs: &[f64]) -> Tensor<f64> {
        let n = probs.len();
        let mut data = vec![0.0; 2 * n];
        for (i, p) in probs.iter().enumerate() {
            data[i] = (p / (1.0 - p)).ln();
        }
        Tensor::from_vec(vec![1, 2, 1, n], data).unwrap()
    }

    #[test]
    fn two_pixel_selection() {
        let logits = logits_for(&[0.9, 0.3]);
        let cfg = OhemConfig {
            threshold: 0.7,
            min_kept: Some(1),
        };
        let loss = ohem_cross_entropy(&logits, &[0, 0], &cfg).unwrap();
        assert!((loss - (-(0.3f64).ln())).abs() < 1e-12);
    }

    #[test]
    fn confident_pixels_fall_back_to_hardest() {
        let probs = [0.99, 0.95, 0.9, 0.97, 0.8];
        let logits = logits_for(&probs);
        let cfg = OhemConfig {
            threshold: 0.7,
            min_kept: Some(2),
        };
        let loss = ohem_cross_entropy(&logits, &[0; 5], &cfg).unwrap();
        let want = (-(0.8f64).ln() - (0.9f64).ln()) / 2.0;
        assert!((loss - want).abs() < 1e-12);
    }

    #[test]
    fn unit_threshold_is_plain_mean() {
        let probs = [0.99, 0.2, 0.6, 0.5];
        let logits = logits_for(&probs);
        let labels = [0, 0, IGNORE_LABEL, 0];
        let cfg = OhemConfig {
            threshold: 1.0,
            min_kept: Some(1),
        };
        let loss = ohem_cross_entropy(&logits, &labels, &cfg).unwrap();
        let want = -((0.99f64).ln() + (0.2f64).ln() + (0.5f64).ln()) / 3.0;
        assert!((loss - want).abs() < 1e-12);
    }

    #[test]
    fn no_valid_pixels_is_an_error() {
        let logits = logits_for(&[0.5, 0.5]);
        assert!(ohem_cross_entropy(&logits, &[IGNORE_LABEL; 2], &OhemConfig::default()).is_err());
    }
}
