//! Bilinear resizing and flow-field warping.
//!
//! Both use the half-pixel (align-corners = false) convention and clamp
//! sample positions to the border.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Interpolation weights for one output coordinate along one axis.
#[derive(Clone, Copy, Debug)]
struct Tap<T> {
    lo: usize,
    hi: usize,
    frac: T,
}

fn clamp_tap<T: Element>(pos: T, extent: usize) -> (Tap<T>, bool) {
    let max = T::from_usize(extent - 1).unwrap();
    let clamped = pos < T::zero() || pos > max;
    let p = pos.max(T::zero()).min(max);
    let lo = p.floor().to_usize().unwrap().min(extent - 1);
    let hi = (lo + 1).min(extent - 1);
    let frac = p - T::from_usize(lo).unwrap();
    (Tap { lo, hi, frac }, clamped)
}

fn resize_taps<T: Element>(input: usize, output: usize) -> Vec<Tap<T>> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            clamp_tap(T::from_f64_lossy(src), input).0
        })
        .collect()
}

pub fn bilinear_resize<T: Element>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid(
            "bilinear_resize",
            format!("output extents must be ≥ 1, got {out_h}×{out_w}"),
        ));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(x.map(|v| v));
    }
    let ty = resize_taps::<T>(h, out_h);
    let tx = resize_taps::<T>(w, out_w);
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for plane in x.data().chunks_exact(h * w) {
        for y in &ty {
            let (r0, r1) = (&plane[y.lo * w..(y.lo + 1) * w], &plane[y.hi * w..(y.hi + 1) * w]);
            for t in &tx {
                let top = r0[t.lo] + (r0[t.hi] - r0[t.lo]) * t.frac;
                let bot = r1[t.lo] + (r1[t.hi] - r1[t.lo]) * t.frac;
                out.push(top + (bot - top) * y.frac);
            }
        }
    }
    Tensor::from_vec(vec![n, c, out_h, out_w], out)
}

pub fn bilinear_resize_backward<T: Element>(x_shape: &[usize], out_h: usize, out_w: usize, dy: &[T]) -> Vec<T> {
    let (h, w) = (x_shape[2], x_shape[3]);
    let numel: usize = x_shape.iter().product();
    if (h, w) == (out_h, out_w) {
        return dy.to_vec();
    }
    let ty = resize_taps::<T>(h, out_h);
    let tx = resize_taps::<T>(w, out_w);
    let mut dx = vec![T::zero(); numel];
    for (plane, dplane) in dx.chunks_exact_mut(h * w).zip(dy.chunks_exact(out_h * out_w)) {
        for (oy, y) in ty.iter().enumerate() {
            for (ox, t) in tx.iter().enumerate() {
                let g = dplane[oy * out_w + ox];
                let (one, fy, fx) = (T::one(), y.frac, t.frac);
                plane[y.lo * w + t.lo] += g * (one - fy) * (one - fx);
                plane[y.lo * w + t.hi] += g * (one - fy) * fx;
                plane[y.hi * w + t.lo] += g * fy * (one - fx);
                plane[y.hi * w + t.hi] += g * fy * fx;
            }
        }
    }
    dx
}

fn check_warp<T: Element>(x: &Tensor<T>, flow: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    let (n, c, h, w) = x.dims4()?;
    let (fnb, fc, fh, fw) = flow.dims4()?;
    if fc != 2 {
        return Err(Error::shape(
            "grid_sample_warp",
            format!("flow must have 2 channels, got {fc}"),
        ));
    }
    if (fnb, fh, fw) != (n, h, w) {
        return Err(Error::shape(
            "grid_sample_warp",
            format!("flow {:?} does not cover input {:?}", flow.shape(), x.shape()),
        ));
    }
    Ok((n, c, h, w))
}

/// `out(p) = x(p + flow(p))`, bilinear with border clamping. Flow channel 0
/// is the horizontal offset and channel 1 the vertical offset, in pixels.
pub fn grid_sample_warp<T: Element>(x: &Tensor<T>, flow: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = check_warp(x, flow)?;
    let hw = h * w;
    let mut out = vec![T::zero(); x.numel()];
    for b in 0..n {
        let fx = &flow.data()[(b * 2) * hw..(b * 2 + 1) * hw];
        let fy = &flow.data()[(b * 2 + 1) * hw..(b * 2 + 2) * hw];
        for py in 0..h {
            for px in 0..w {
                let p = py * w + px;
                let (tx, _) = clamp_tap(T::from_usize(px).unwrap() + fx[p], w);
                let (ty, _) = clamp_tap(T::from_usize(py).unwrap() + fy[p], h);
                for ch in 0..c {
                    let plane = &x.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                    let top = plane[ty.lo * w + tx.lo] * (T::one() - tx.frac)
                        + plane[ty.lo * w + tx.hi] * tx.frac;
                    let bot = plane[ty.hi * w + tx.lo] * (T::one() - tx.frac)
                        + plane[ty.hi * w + tx.hi] * tx.frac;
                    out[(b * c + ch) * hw + p] = top * (T::one() - ty.frac) + bot * ty.frac;
                }
            }
        }
    }
    Tensor::from_vec(x.shape().to_vec(), out)
}

/// Gradients with respect to the sampled map and the flow field. Where a
/// sample position is clamped, its coordinate receives zero gradient.
pub fn grid_sample_warp_backward<T: Element>(
    x: &Tensor<T>,
    flow: &Tensor<T>,
    dy: &[T],
) -> Result<(Vec<T>, Vec<T>)> {
    let (n, c, h, w) = check_warp(x, flow)?;
    let hw = h * w;
    let one = T::one();
    let mut dx = vec![T::zero(); x.numel()];
    let mut dflow = vec![T::zero(); flow.numel()];
    for b in 0..n {
        for py in 0..h {
            for px in 0..w {
                let p = py * w + px;
                let fxi = (b * 2) * hw + p;
                let fyi = (b * 2 + 1) * hw + p;
                let (tx, cx) = clamp_tap(T::from_usize(px).unwrap() + flow.data()[fxi], w);
                let (ty, cy) = clamp_tap(T::from_usize(py).unwrap() + flow.data()[fyi], h);
                let (mut gx, mut gy) = (T::zero(), T::zero());
                for ch in 0..c {
                    let base = (b * c + ch) * hw;
                    let g = dy[base + p];
                    let plane = &x.data()[base..base + hw];
                    let v00 = plane[ty.lo * w + tx.lo];
                    let v01 = plane[ty.lo * w + tx.hi];
                    let v10 = plane[ty.hi * w + tx.lo];
                    let v11 = plane[ty.hi * w + tx.hi];
                    dx[base + ty.lo * w + tx.lo] += g * (one - ty.frac) * (one - tx.frac);
                    dx[base + ty.lo * w + tx.hi] += g * (one - ty.frac) * tx.frac;
                    dx[base + ty.hi * w + tx.lo] += g * ty.frac * (one - tx.frac);
                    dx[base + ty.hi * w + tx.hi] += g * ty.frac * tx.frac;
                    if tx.hi != tx.lo {
                        gx += g * ((one - ty.frac) * (v01 - v00) + ty.frac * (v11 - v10));
                    }
                    if ty.hi != ty.lo {
                        gy += g * ((one - tx.frac) * (v10 - v00) + tx.frac * (v11 - v01));
                    }
                }
                if !cx {
                    dflow[fxi] = gx;
                }
                if !cy {
                    dflow[fyi] = gy;
                }
            }
        }
    }
    Ok((dx, dflow))
}
