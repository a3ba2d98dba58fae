//! Pointwise activations, channel softmax, addition, concatenation and
//! broadcast multiplication.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub fn relu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Element>(x: &Tensor<T>, dy: &[T]) -> Vec<T> {
    x.data()
        .iter()
        .zip(dy)
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect()
}

pub fn sigmoid<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| {
        // Split on sign so exp never overflows.
        if v >= T::zero() {
            T::one() / (T::one() + (-v).exp())
        } else {
            let e = v.exp();
            e / (T::one() + e)
        }
    })
}

pub fn sigmoid_backward<T: Element>(y: &Tensor<T>, dy: &[T]) -> Vec<T> {
    y.data()
        .iter()
        .zip(dy)
        .map(|(&s, &g)| g * s * (T::one() - s))
        .collect()
}

/// Softmax across the channel axis of an `N×C×H×W` map.
pub fn softmax_channels<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for b in 0..n {
        let base = b * c * hw;
        for p in 0..hw {
            let mut mx = T::neg_infinity();
            for ch in 0..c {
                mx = mx.max(src[base + ch * hw + p]);
            }
            let mut s = T::zero();
            for ch in 0..c {
                let e = (src[base + ch * hw + p] - mx).exp();
                out[base + ch * hw + p] = e;
                s += e;
            }
            for ch in 0..c {
                out[base + ch * hw + p] = out[base + ch * hw + p] / s;
            }
        }
    }
    Tensor::from_vec(x.shape().to_vec(), out)
}

pub fn softmax_channels_backward<T: Element>(y: &Tensor<T>, dy: &[T]) -> Result<Vec<T>> {
    let (n, c, h, w) = y.dims4()?;
    let hw = h * w;
    let s = y.data();
    let mut dx = vec![T::zero(); s.len()];
    for b in 0..n {
        let base = b * c * hw;
        for p in 0..hw {
            let dot: T = (0..c)
                .map(|ch| s[base + ch * hw + p] * dy[base + ch * hw + p])
                .sum();
            for ch in 0..c {
                let i = base + ch * hw + p;
                dx[i] = s[i] * (dy[i] - dot);
            }
        }
    }
    Ok(dx)
}

pub fn add<T: Element>(x: &Tensor<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape() != y.shape() {
        return Err(Error::shape(
            "add",
            format!("{:?} vs {:?}", x.shape(), y.shape()),
        ));
    }
    let data = x.data().iter().zip(y.data()).map(|(&a, &b)| a + b).collect();
    Tensor::from_vec(x.shape().to_vec(), data)
}

/// Concatenates `N×Cᵢ×H×W` maps along the channel axis.
pub fn concat_channels<T: Element>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::invalid("concat_channels", "no inputs"))?;
    let (n, _, h, w) = first.dims4()?;
    let mut total_c = 0;
    for p in parts {
        let (pn, pc, ph, pw) = p.dims4()?;
        if (pn, ph, pw) != (n, h, w) {
            return Err(Error::shape(
                "concat_channels",
                format!("{:?} vs {:?}", first.shape(), p.shape()),
            ));
        }
        total_c += pc;
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(n * total_c * hw);
    for b in 0..n {
        for p in parts {
            let pc = p.shape()[1];
            out.extend_from_slice(&p.data()[b * pc * hw..(b + 1) * pc * hw]);
        }
    }
    Tensor::from_vec(vec![n, total_c, h, w], out)
}

/// Splits a channel-concatenated gradient back into per-part gradients.
pub fn split_channels<T: Element>(dy: &[T], n: usize, hw: usize, channels: &[usize]) -> Vec<Vec<T>> {
    let total: usize = channels.iter().sum();
    let mut parts: Vec<Vec<T>> = channels.iter().map(|&c| Vec::with_capacity(n * c * hw)).collect();
    for b in 0..n {
        let mut off = b * total * hw;
        for (part, &c) in parts.iter_mut().zip(channels) {
            part.extend_from_slice(&dy[off..off + c * hw]);
            off += c * hw;
        }
    }
    parts
}

/// Shapes padded on the left to rank 4, plus the broadcast strides of `y`.
struct Broadcast {
    dims: [usize; 4],
    y_strides: [usize; 4],
}

fn broadcast_plan(x: &[usize], y: &[usize]) -> Result<Broadcast> {
    if x.len() > 4 || y.len() != x.len() {
        return Err(Error::shape(
            "mul_broadcast",
            format!("ranks must match and be ≤ 4: {x:?} vs {y:?}"),
        ));
    }
    let mut dims = [1; 4];
    let mut ydims = [1; 4];
    let pad = 4 - x.len();
    dims[pad..].copy_from_slice(x);
    ydims[pad..].copy_from_slice(y);
    let mut y_strides = [0; 4];
    let mut stride = 1;
    for axis in (0..4).rev() {
        if ydims[axis] == dims[axis] {
            y_strides[axis] = stride;
        } else if ydims[axis] == 1 {
            y_strides[axis] = 0;
        } else {
            return Err(Error::shape(
                "mul_broadcast",
                format!("{y:?} does not broadcast to {x:?}"),
            ));
        }
        stride *= ydims[axis];
    }
    Ok(Broadcast { dims, y_strides })
}

fn for_each_broadcast(plan: &Broadcast, mut f: impl FnMut(usize, usize)) {
    let [d0, d1, d2, d3] = plan.dims;
    let [s0, s1, s2, s3] = plan.y_strides;
    let mut xi = 0;
    for a in 0..d0 {
        for b in 0..d1 {
            for c in 0..d2 {
                let yrow = a * s0 + b * s1 + c * s2;
                for d in 0..d3 {
                    f(xi, yrow + d * s3);
                    xi += 1;
                }
            }
        }
    }
}

/// `x ⊗ y` where every axis of `y` either matches `x` or is 1.
pub fn mul_broadcast<T: Element>(x: &Tensor<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
    let plan = broadcast_plan(x.shape(), y.shape())?;
    let mut out = vec![T::zero(); x.numel()];
    let (xs, ys) = (x.data(), y.data());
    for_each_broadcast(&plan, |xi, yi| out[xi] = xs[xi] * ys[yi]);
    Tensor::from_vec(x.shape().to_vec(), out)
}

pub fn mul_broadcast_backward<T: Element>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    dz: &[T],
) -> Result<(Vec<T>, Vec<T>)> {
    let plan = broadcast_plan(x.shape(), y.shape())?;
    let mut dx = vec![T::zero(); x.numel()];
    let mut dy = vec![T::zero(); y.numel()];
    let (xs, ys) = (x.data(), y.data());
    for_each_broadcast(&plan, |xi, yi| {
        dx[xi] = dz[xi] * ys[yi];
        dy[yi] += dz[xi] * xs[xi];
    });
    Ok((dx, dy))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn activation_examples() {
        let x = Tensor::<f64>::from_vec(vec![3], vec![-3.0, 0.0, 3.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 3.0]);
        assert_eq!(sigmoid(&x).data()[1], 0.5);
        let big = Tensor::<f32>::from_vec(vec![2], vec![-1000.0, 1000.0]).unwrap();
        let s = sigmoid(&big);
        assert!(s.is_finite());
        assert_eq!(s.data(), &[0.0, 1.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let x = Tensor::<f64>::full(vec![1, 19, 2, 2], 3.7);
        let y = softmax_channels(&x).unwrap();
        assert!(y.data().iter().all(|&v| (v - 1.0 / 19.0).abs() < 1e-15));
    }

    #[test]
    fn concat_add_mul_examples() {
        let a = Tensor::<f64>::from_fn(vec![2, 4, 3, 3], |i| i as f64);
        let b = Tensor::<f64>::from_fn(vec![2, 4, 3, 3], |i| -(i as f64));
        let cat = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), &[2, 8, 3, 3]);
        // Batch 1, channel 4 is the first channel of `b`'s second image.
        assert_eq!(cat.data()[(8 + 4) * 9], b.data()[4 * 9]);

        let z = Tensor::zeros(vec![2, 4, 3, 3]);
        assert_eq!(add(&a, &z).unwrap(), a);

        let ones = Tensor::ones(vec![2, 4, 1, 1]);
        assert_eq!(mul_broadcast(&a, &ones).unwrap(), a);
        let scalar = Tensor::full(vec![1, 1, 1, 1], 2.0);
        assert_eq!(mul_broadcast(&a, &scalar).unwrap().data()[5], 10.0);
        let bad = Tensor::ones(vec![2, 3, 1, 1]);
        assert!(mul_broadcast(&a, &bad).is_err());
        assert!(add(&a, &cat).is_err());
    }

    #[test]
    fn split_inverts_concat() {
        let a = Tensor::<f64>::from_fn(vec![2, 3, 2, 2], |i| i as f64);
        let b = Tensor::<f64>::from_fn(vec![2, 1, 2, 2], |i| 100.0 + i as f64);
        let cat = concat_channels(&[&a, &b]).unwrap();
        let parts = split_channels(cat.data(), 2, 4, &[3, 1]);
        assert_eq!(parts[0], a.data());
        assert_eq!(parts[1], b.data());
    }
}
