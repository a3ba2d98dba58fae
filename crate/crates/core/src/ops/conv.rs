//! 2-D convolution (grouped, strided, dilated) and the 1-D cross-channel
//! convolution used by channel attention.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gemm, Element, MatRef, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
    pub has_bias: bool,
}

impl ConvSpec {
    /// Stride 1, no padding, no dilation, single group, no bias.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel: (kernel, kernel),
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
            has_bias: false,
        }
    }

    /// Square kernel with "same" padding for stride 1.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self::new(in_channels, out_channels, kernel).padding(kernel / 2)
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn bias(mut self, has_bias: bool) -> Self {
        self.has_bias = has_bias;
        self
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels / self.groups.max(1),
            self.kernel.0,
            self.kernel.1,
        ]
    }

    pub fn param_count(&self) -> usize {
        self.weight_shape().iter().product::<usize>()
            + if self.has_bias { self.out_channels } else { 0 }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |d: String| Err(Error::invalid("conv2d", d));
        if self.in_channels == 0 || self.out_channels == 0 || self.groups == 0 {
            return bad(format!("channels and groups must be positive: {self:?}"));
        }
        if !self.in_channels.is_multiple_of(self.groups) || !self.out_channels.is_multiple_of(self.groups) {
            return bad(format!(
                "channels {}→{} not divisible by groups {}",
                self.in_channels, self.out_channels, self.groups
            ));
        }
        if self.kernel.0 == 0 || self.kernel.1 == 0 || self.stride == 0 || self.dilation == 0 {
            return bad(format!("kernel, stride and dilation must be positive: {self:?}"));
        }
        Ok(())
    }

    fn extent(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        (padded >= span).then(|| (padded - span) / self.stride + 1)
    }

    /// Output `(H', W')` for an `H × W` input.
    pub fn output_extent(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        match (self.extent(h, self.kernel.0), self.extent(w, self.kernel.1)) {
            (Some(ho), Some(wo)) if ho >= 1 && wo >= 1 => Ok((ho, wo)),
            _ => Err(Error::shape(
                "conv2d",
                format!("input {h}×{w} too small for {self:?}"),
            )),
        }
    }
}

pub(crate) struct ConvGeometry {
    n: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    cin_g: usize,
    cout_g: usize,
}

impl ConvGeometry {
    fn cols_rows(&self, spec: &ConvSpec) -> usize {
        self.cin_g * spec.kernel.0 * spec.kernel.1
    }

    fn is_depthwise(&self) -> bool {
        self.cin_g == 1 && self.cout_g == 1
    }

    fn is_pointwise(&self, spec: &ConvSpec) -> bool {
        spec.kernel == (1, 1) && spec.stride == 1 && spec.padding == 0
    }
}

pub(crate) fn check_conv<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<ConvGeometry> {
    spec.validate()?;
    let (n, c, h, wd) = x.dims4()?;
    if c != spec.in_channels {
        return Err(Error::shape(
            "conv2d",
            format!("input has {c} channels, spec expects {}", spec.in_channels),
        ));
    }
    if w.shape() != spec.weight_shape() {
        return Err(Error::shape(
            "conv2d",
            format!("weights {:?}, expected {:?}", w.shape(), spec.weight_shape()),
        ));
    }
    match (b, spec.has_bias) {
        (Some(b), true) if b.numel() == spec.out_channels => {}
        (None, false) => {}
        (b, _) => {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "bias {:?} inconsistent with has_bias={} out_channels={}",
                    b.map(|b| b.shape().to_vec()),
                    spec.has_bias,
                    spec.out_channels
                ),
            ))
        }
    }
    let (ho, wo) = spec.output_extent(h, wd)?;
    Ok(ConvGeometry {
        n,
        h,
        w: wd,
        ho,
        wo,
        cin_g: spec.in_channels / spec.groups,
        cout_g: spec.out_channels / spec.groups,
    })
}

/// Unfolds one group of one image (`cin_g × H × W`) into a `K × P` matrix.
fn im2col<T: Element>(src: &[T], g: &ConvGeometry, spec: &ConvSpec, cols: &mut [T]) {
    let (kh, kw) = spec.kernel;
    let p = g.ho * g.wo;
    let mut row = 0;
    for c in 0..g.cin_g {
        let plane = &src[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..kh {
            for kj in 0..kw {
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * spec.stride + ki * spec.dilation) as isize - spec.padding as isize;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * spec.stride + kj * spec.dilation) as isize
                            - spec.padding as isize;
                        *o = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-adds a `K × P` matrix back onto one group of one image.
fn col2im<T: Element>(cols: &[T], g: &ConvGeometry, spec: &ConvSpec, dst: &mut [T]) {
    let (kh, kw) = spec.kernel;
    let p = g.ho * g.wo;
    let mut row = 0;
    for c in 0..g.cin_g {
        let plane = &mut dst[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..kh {
            for kj in 0..kw {
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * spec.stride + ki * spec.dilation) as isize - spec.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let plane_row = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * spec.stride + kj * spec.dilation) as isize
                            - spec.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            plane_row[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn depthwise_forward<T: Element>(x: &[T], w: &[T], g: &ConvGeometry, spec: &ConvSpec, out: &mut [T]) {
    let (kh, kw) = spec.kernel;
    let c = spec.in_channels;
    for n in 0..g.n {
        for ch in 0..c {
            let plane = &x[(n * c + ch) * g.h * g.w..(n * c + ch + 1) * g.h * g.w];
            let taps = &w[ch * kh * kw..(ch + 1) * kh * kw];
            let dst = &mut out[(n * c + ch) * g.ho * g.wo..(n * c + ch + 1) * g.ho * g.wo];
            for ki in 0..kh {
                for kj in 0..kw {
                    let tap = taps[ki * kw + kj];
                    for oy in 0..g.ho {
                        let iy = (oy * spec.stride + ki * spec.dilation) as isize
                            - spec.padding as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let dst_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                        for (ox, o) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * spec.stride + kj * spec.dilation) as isize
                                - spec.padding as isize;
                            if ix >= 0 && ix < g.w as isize {
                                *o += tap * src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn depthwise_backward<T: Element>(
    x: &[T],
    w: &[T],
    dy: &[T],
    g: &ConvGeometry,
    spec: &ConvSpec,
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
) {
    let (kh, kw) = spec.kernel;
    let c = spec.in_channels;
    for n in 0..g.n {
        for ch in 0..c {
            let base_in = (n * c + ch) * g.h * g.w;
            let base_out = (n * c + ch) * g.ho * g.wo;
            for ki in 0..kh {
                for kj in 0..kw {
                    let tap_idx = ch * kh * kw + ki * kw + kj;
                    let tap = w[tap_idx];
                    let mut acc = T::zero();
                    for oy in 0..g.ho {
                        let iy = (oy * spec.stride + ki * spec.dilation) as isize
                            - spec.padding as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for ox in 0..g.wo {
                            let ix = (ox * spec.stride + kj * spec.dilation) as isize
                                - spec.padding as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            let xi = base_in + iy as usize * g.w + ix as usize;
                            let g_out = dy[base_out + oy * g.wo + ox];
                            acc += g_out * x[xi];
                            if let Some(dx) = dx.as_deref_mut() {
                                dx[xi] += g_out * tap;
                            }
                        }
                    }
                    if let Some(dw) = dw.as_deref_mut() {
                        dw[tap_idx] += acc;
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let g = check_conv(x, w, b, spec)?;
    let p = g.ho * g.wo;
    let cout = spec.out_channels;
    let mut out = vec![T::zero(); g.n * cout * p];

    if g.is_depthwise() {
        depthwise_forward(x.data(), w.data(), &g, spec, &mut out);
    } else {
        let k = g.cols_rows(spec);
        let pointwise = g.is_pointwise(spec);
        let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); k * p] };
        let in_img = spec.in_channels * g.h * g.w;
        let in_grp = g.cin_g * g.h * g.w;
        for n in 0..g.n {
            for grp in 0..spec.groups {
                let src = &x.data()[n * in_img + grp * in_grp..n * in_img + (grp + 1) * in_grp];
                let cols_ref: &[T] = if pointwise {
                    src
                } else {
                    im2col(src, &g, spec, &mut cols);
                    &cols
                };
                let wg = &w.data()[grp * g.cout_g * k..(grp + 1) * g.cout_g * k];
                let dst_off = (n * cout + grp * g.cout_g) * p;
                gemm(
                    MatRef::new(wg, g.cout_g, k),
                    MatRef::new(cols_ref, k, p),
                    T::zero(),
                    &mut out[dst_off..dst_off + g.cout_g * p],
                );
            }
        }
    }

    if let Some(b) = b {
        for n in 0..g.n {
            for (co, &bias) in b.data().iter().enumerate() {
                let off = (n * cout + co) * p;
                out[off..off + p].iter_mut().for_each(|v| *v += bias);
            }
        }
    }
    Tensor::from_vec(vec![g.n, cout, g.ho, g.wo], out)
}

#[derive(Default)]
pub struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

/// Gradients of `conv2d_forward` given the output gradient `dy`.
/// `need` selects `(dx, dw, db)`.
pub fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    spec: &ConvSpec,
    dy: &[T],
    need: (bool, bool, bool),
) -> Result<ConvGrads<T>> {
    // Bias presence does not affect geometry; validate without it.
    let bias_free = ConvSpec {
        has_bias: false,
        ..spec.clone()
    };
    let g = check_conv(x, w, None, &bias_free)?;
    let p = g.ho * g.wo;
    let cout = spec.out_channels;
    if dy.len() != g.n * cout * p {
        return Err(Error::shape("conv2d_backward", "output gradient length"));
    }

    let mut grads = ConvGrads {
        dx: need.0.then(|| vec![T::zero(); x.numel()]),
        dw: need.1.then(|| vec![T::zero(); w.numel()]),
        db: (need.2 && spec.has_bias).then(|| vec![T::zero(); cout]),
    };

    if let Some(db) = grads.db.as_mut() {
        for n in 0..g.n {
            for (co, acc) in db.iter_mut().enumerate() {
                let off = (n * cout + co) * p;
                *acc += dy[off..off + p].iter().copied().sum::<T>();
            }
        }
    }

    if g.is_depthwise() {
        depthwise_backward(
            x.data(),
            w.data(),
            dy,
            &g,
            spec,
            grads.dx.as_deref_mut(),
            grads.dw.as_deref_mut(),
        );
        perturb_if_armed(&mut grads);
        return Ok(grads);
    }

    let k = g.cols_rows(spec);
    let pointwise = g.is_pointwise(spec);
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); k * p] };
    let mut dcols = vec![T::zero(); k * p];
    let in_img = spec.in_channels * g.h * g.w;
    let in_grp = g.cin_g * g.h * g.w;
    for n in 0..g.n {
        for grp in 0..spec.groups {
            let src_range = n * in_img + grp * in_grp..n * in_img + (grp + 1) * in_grp;
            let dy_off = (n * cout + grp * g.cout_g) * p;
            let dyg = &dy[dy_off..dy_off + g.cout_g * p];
            let w_range = grp * g.cout_g * k..(grp + 1) * g.cout_g * k;

            if let Some(dw) = grads.dw.as_mut() {
                let src = &x.data()[src_range.clone()];
                let cols_ref: &[T] = if pointwise {
                    src
                } else {
                    im2col(src, &g, spec, &mut cols);
                    &cols
                };
                gemm(
                    MatRef::new(dyg, g.cout_g, p),
                    MatRef::new(cols_ref, k, p).t(),
                    T::one(),
                    &mut dw[w_range.clone()],
                );
            }
            if let Some(dx) = grads.dx.as_mut() {
                let wg = &w.data()[w_range];
                if pointwise {
                    gemm(
                        MatRef::new(wg, g.cout_g, k).t(),
                        MatRef::new(dyg, g.cout_g, p),
                        T::one(),
                        &mut dx[src_range],
                    );
                } else {
                    gemm(
                        MatRef::new(wg, g.cout_g, k).t(),
                        MatRef::new(dyg, g.cout_g, p),
                        T::zero(),
                        &mut dcols,
                    );
                    col2im(&dcols, &g, spec, &mut dx[src_range]);
                }
            }
        }
    }
    perturb_if_armed(&mut grads);
    Ok(grads)
}

fn perturb_if_armed<T: Element>(grads: &mut ConvGrads<T>) {
    if crate::gradcheck::fault::conv_backward_armed() {
        if let Some(dw) = grads.dw.as_mut() {
            dw.iter_mut()
                .for_each(|v| *v = *v * T::from_f64_lossy(1.1) + T::from_f64_lossy(1e-2));
        }
    }
}

fn check_conv1d<T: Element>(u: &Tensor<T>, w: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (n, c, h, wd) = u.dims4()?;
    if h != 1 || wd != 1 {
        return Err(Error::shape(
            "conv1d_channels",
            format!("expected N×C×1×1, got {:?}", u.shape()),
        ));
    }
    let k = w.numel();
    if w.rank() != 1 {
        return Err(Error::shape("conv1d_channels", "kernel must be rank 1"));
    }
    if k.is_multiple_of(2) {
        return Err(Error::invalid(
            "conv1d_channels",
            format!("kernel size must be odd, got {k}"),
        ));
    }
    Ok((n, c, k))
}

/// Zero-padded cross-correlation along the channel axis:
/// `out[c] = Σ_j w[j] · u[c + j − (k−1)/2]`.
pub fn conv1d_channels_forward<T: Element>(u: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, k) = check_conv1d(u, w)?;
    let half = (k / 2) as isize;
    let mut out = vec![T::zero(); n * c];
    for b in 0..n {
        let src = &u.data()[b * c..(b + 1) * c];
        for (ch, o) in out[b * c..(b + 1) * c].iter_mut().enumerate() {
            for (j, &wj) in w.data().iter().enumerate() {
                let idx = ch as isize + j as isize - half;
                if idx >= 0 && (idx as usize) < c {
                    *o += wj * src[idx as usize];
                }
            }
        }
    }
    Tensor::from_vec(u.shape().to_vec(), out)
}

pub fn conv1d_channels_backward<T: Element>(
    u: &Tensor<T>,
    w: &Tensor<T>,
    dy: &[T],
) -> Result<(Vec<T>, Vec<T>)> {
    let (n, c, k) = check_conv1d(u, w)?;
    let half = (k / 2) as isize;
    let mut du = vec![T::zero(); n * c];
    let mut dw = vec![T::zero(); k];
    for b in 0..n {
        for ch in 0..c {
            let g = dy[b * c + ch];
            for (j, &wj) in w.data().iter().enumerate() {
                let idx = ch as isize + j as isize - half;
                if idx >= 0 && (idx as usize) < c {
                    let idx = idx as usize;
                    du[b * c + idx] += g * wj;
                    dw[j] += g * u.data()[b * c + idx];
                }
            }
        }
    }
    Ok((du, dw))
}
