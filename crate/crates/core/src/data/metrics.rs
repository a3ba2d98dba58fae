//! Confusion-matrix segmentation metrics.

use crate::error::{Error, Result};
use crate::ops::loss::IGNORE_LABEL;
use crate::tensor::{Element, Tensor};

/// `counts[gt * n + pred]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            n: num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.n
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.n + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Counts every pixel whose ground truth is not the ignore label.
    pub fn accumulate(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::shape(
                "confusion_matrix",
                format!("{} predictions for {} labels", pred.len(), gt.len()),
            ));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if g == IGNORE_LABEL {
                continue;
            }
            let (p, g) = (p as usize, g as usize);
            if p >= self.n || g >= self.n {
                return Err(Error::invalid(
                    "confusion_matrix",
                    format!("label pair ({g}, {p}) outside {} classes", self.n),
                ));
            }
            self.counts[g * self.n + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.n != self.n {
            return Err(Error::shape("confusion_matrix", "class counts differ"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// `TP / (TP + FP + FN)`, or `None` when the class appears in neither
    /// ground truth nor prediction.
    pub fn iou(&self, class: usize) -> Option<f64> {
        let tp = self.get(class, class);
        let gt: u64 = (0..self.n).map(|p| self.get(class, p)).sum();
        let pred: u64 = (0..self.n).map(|g| self.get(g, class)).sum();
        let union = gt + pred - tp;
        (union > 0).then(|| tp as f64 / union as f64)
    }

    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.n).map(|c| self.iou(c)).collect()
    }

    /// Mean IoU over the classes that occur. Errors on an empty matrix.
    pub fn miou(&self) -> Result<f64> {
        let present: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        if present.is_empty() {
            return Err(Error::Empty("mIoU of a matrix with no counted pixels".into()));
        }
        Ok(present.iter().sum::<f64>() / present.len() as f64)
    }

    pub fn pixel_accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::Empty("accuracy of a matrix with no counted pixels".into()));
        }
        Ok((0..self.n).map(|c| self.get(c, c)).sum::<u64>() as f64 / total as f64)
    }
}

/// Per-pixel argmax over the channel axis of `N×C×H×W` logits, in
/// `N, H, W` order. Ties go to the lowest class index.
pub fn argmax_channels<T: Element>(logits: &Tensor<T>) -> Result<Vec<u8>> {
    let (n, c, h, w) = logits.dims4()?;
    if c == 0 || c > IGNORE_LABEL as usize {
        return Err(Error::invalid("argmax", format!("{c} channels")));
    }
    let hw = h * w;
    let x = logits.data();
    let mut out = Vec::with_capacity(n * hw);
    for b in 0..n {
        let base = b * c * hw;
        for i in 0..hw {
            let mut best = 0;
            for k in 1..c {
                if x[base + k * hw + i] > x[base + best * hw + i] {
                    best = k;
                }
            }
            out.push(best as u8);
        }
    }
    Ok(out)
}
