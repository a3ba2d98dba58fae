use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::ops::loss::pixel_cross_entropy;
use crate::tensor::Element;
use crate::training::ohem::{ohem_mask, OhemConfig};

/// Loss components of one step. `total` is `principal + Σ λᵢ·aux[i]`,
/// evaluated in `f64` from the stored components.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBundle {
    pub principal: f64,
    pub aux: [f64; 4],
    pub lambda: [f64; 4],
    pub total: f64,
}

impl LossBundle {
    pub fn new(principal: f64, aux: [f64; 4], lambda: [f64; 4]) -> Self {
        LossBundle {
            principal,
            aux,
            lambda,
            total: Self::combine(principal, aux, lambda),
        }
    }

    pub fn combine(principal: f64, aux: [f64; 4], lambda: [f64; 4]) -> f64 {
        principal + aux.iter().zip(&lambda).map(|(a, l)| l * a).sum::<f64>()
    }
}

/// Records the weighted training loss and returns its tape node with the
/// component values. The principal head is mined with `ohem` when given;
/// auxiliary heads use plain cross-entropy. Auxiliary terms with zero
/// weight are evaluated for reporting but left out of the returned node.
pub fn total_loss<T: Element>(
    graph: &mut Graph<T>,
    logits: Var,
    aux: Option<[Var; 4]>,
    labels: &[u8],
    lambda: [f64; 4],
    ohem: Option<&OhemConfig>,
) -> Result<(Var, LossBundle)> {
    let per_pixel = pixel_cross_entropy(graph.value(logits), labels)?;
    let weights: Vec<T> = match ohem {
        Some(cfg) => ohem_mask(&per_pixel, cfg)?
            .into_iter()
            .map(|k| if k { T::one() } else { T::zero() })
            .collect(),
        None => vec![T::one(); labels.len()],
    };
    let principal = graph.cross_entropy(logits, labels, weights)?;
    let mut terms = vec![(principal, T::one())];
    let mut aux_values = [0.0; 4];
    if let Some(aux) = aux {
        for (i, &a) in aux.iter().enumerate() {
            let l = graph.cross_entropy(a, labels, vec![T::one(); labels.len()])?;
            aux_values[i] = graph.value(l).item()?.as_f64();
            if lambda[i] != 0.0 {
                terms.push((l, T::from_f64_lossy(lambda[i])));
            }
        }
    }
    let p = graph.value(principal).item()?.as_f64();
    let root = graph.weighted_sum(&terms)?;
    Ok((root, LossBundle::new(p, aux_values, lambda)))
}
