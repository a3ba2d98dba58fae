//! Global average pooling and windowed max pooling.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub fn global_avg_pool<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let inv = T::one() / T::from_usize(hw).unwrap();
    let out = x
        .data()
        .chunks_exact(hw)
        .map(|plane| plane.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::from_vec(vec![n, c, 1, 1], out)
}

pub fn global_avg_pool_backward<T: Element>(x_shape: &[usize], dy: &[T]) -> Vec<T> {
    let hw = x_shape[2] * x_shape[3];
    let inv = T::one() / T::from_usize(hw).unwrap();
    dy.iter()
        .flat_map(|&g| std::iter::repeat_n(g * inv, hw))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl PoolSpec {
    pub fn output_extent(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.kernel == 0 || self.stride == 0 || self.padding >= self.kernel {
            return Err(Error::invalid("max_pool2d", format!("{self:?}")));
        }
        let ext = |d: usize| {
            let padded = d + 2 * self.padding;
            (padded >= self.kernel).then(|| (padded - self.kernel) / self.stride + 1)
        };
        match (ext(h), ext(w)) {
            (Some(ho), Some(wo)) => Ok((ho, wo)),
            _ => Err(Error::shape(
                "max_pool2d",
                format!("{h}×{w} too small for {self:?}"),
            )),
        }
    }
}

/// Max pooling; also returns the flat input index each output selected.
/// Ties resolve to the first (lowest index) element in scan order.
pub fn max_pool2d<T: Element>(x: &Tensor<T>, spec: PoolSpec) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = x.dims4()?;
    let (ho, wo) = spec.output_extent(h, w)?;
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut argmax = Vec::with_capacity(n * c * ho * wo);
    for plane_idx in 0..n * c {
        let base = plane_idx * h * w;
        let plane = &x.data()[base..base + h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best: Option<(usize, T)> = None;
                for ky in 0..spec.kernel {
                    let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..spec.kernel {
                        let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let i = iy as usize * w + ix as usize;
                        if best.is_none_or(|(_, v)| plane[i] > v) {
                            best = Some((i, plane[i]));
                        }
                    }
                }
                let (i, v) = best.expect("padding < kernel keeps every window non-empty");
                out.push(v);
                argmax.push(base + i);
            }
        }
    }
    Ok((Tensor::from_vec(vec![n, c, ho, wo], out)?, argmax))
}

pub fn max_pool2d_backward<T: Element>(x_len: usize, argmax: &[usize], dy: &[T]) -> Vec<T> {
    let mut dx = vec![T::zero(); x_len];
    for (&i, &g) in argmax.iter().zip(dy) {
        dx[i] += g;
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gap_examples() {
        let x = Tensor::<f64>::from_vec(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[2.5]);
        let c = Tensor::<f64>::full(vec![2, 3, 4, 5], 1.75);
        assert!(global_avg_pool(&c).unwrap().data().iter().all(|&v| v == 1.75));
        assert_eq!(global_avg_pool_backward(&[1, 1, 2, 2], &[1.0]), vec![0.25; 4]);
    }

    #[test]
    fn max_pool_ramp_example() {
        let x = Tensor::<f64>::from_fn(vec![1, 1, 4, 4], |i| i as f64);
        let spec = PoolSpec { kernel: 3, stride: 2, padding: 1 };
        let (y, arg) = max_pool2d(&x, spec).unwrap();
        assert_eq!(y.data(), &[5.0, 7.0, 13.0, 15.0]);
        assert_eq!(arg, vec![5, 7, 13, 15]);
    }

    #[test]
    fn ties_route_to_first_element() {
        let x = Tensor::<f64>::full(vec![1, 1, 3, 3], 2.0);
        let spec = PoolSpec { kernel: 3, stride: 2, padding: 1 };
        let (y, arg) = max_pool2d(&x, spec).unwrap();
        assert!(y.data().iter().all(|&v| v == 2.0));
        assert_eq!(arg, vec![0, 1, 3, 4]);
    }
}
