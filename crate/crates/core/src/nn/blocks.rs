use rand::Rng;

use super::{BatchNorm, Cbr, Conv2dLayer, ConvBn, Ctx, DwSeparable, Init, Module, Norm, ParamId, ParamKind, ParamStore};
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::ops::ConvSpec;
use crate::tensor::Element;

/// Intermediate width of every segmentation head.
pub const SEG_HEAD_CHANNELS: usize = 64;

/// Odd 1-D kernel length for the channel gate: the odd integer nearest to
/// `log2(C)/2 + 1/2`, rounding up on ties, never below 1.
pub fn eca_kernel_size(channels: usize) -> usize {
    let t = (channels.max(1) as f64).log2() / 2.0 + 0.5;
    let k = t.floor() as usize;
    if k.is_multiple_of(2) {
        k + 1
    } else {
        k
    }
}

/// Spatial-channel attention: `x·σ(conv1d(GAP x)) + x·σ(conv1×1 x)`.
#[derive(Clone, Debug)]
pub struct Sca {
    pub channels: usize,
    pub spatial: Conv2dLayer,
    pub channel_kernel: ParamId,
    pub kernel_size: usize,
}

impl Sca {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, channels: usize, rng: &mut impl Rng) -> Result<Self> {
        let spatial = Conv2dLayer::new(
            store,
            &format!("{name}.spatial"),
            ConvSpec::new(channels, 1, 1).bias(true),
            Init::FanInUniform,
            rng,
        )?;
        let kernel_size = eca_kernel_size(channels);
        let channel_kernel = store.add(
            format!("{name}.channel.weight"),
            ParamKind::ConvWeight,
            Init::FanInUniform.tensor(vec![kernel_size], kernel_size, rng),
        )?;
        Ok(Sca {
            channels,
            spatial,
            channel_kernel,
            kernel_size,
        })
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let c = ctx.graph.shape(x).get(1).copied().unwrap_or(0);
        if c != self.channels {
            return Err(Error::shape(
                "sca",
                format!("input has {c} channels, block expects {}", self.channels),
            ));
        }
        let u = ctx.graph.global_avg_pool(x)?;
        let k = ctx.param(self.channel_kernel);
        let w = ctx.graph.conv1d_channels(u, k)?;
        let channel_gate = ctx.graph.sigmoid(w)?;
        let v = self.spatial.forward(ctx, x)?;
        let spatial_gate = ctx.graph.sigmoid(v)?;
        let by_channel = ctx.graph.mul_broadcast(x, channel_gate)?;
        let by_pixel = ctx.graph.mul_broadcast(x, spatial_gate)?;
        ctx.graph.add(by_channel, by_pixel)
    }
}

impl Module for Sca {
    fn collect_params(&self, out: &mut Vec<ParamId>) {
        self.spatial.collect_params(out);
        out.push(self.channel_kernel);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FebKind {
    Feb2,
    Feb3,
    Feb4,
}

impl FebKind {
    /// Enhancement block used by decoder stage `i`; stage 1 has none.
    pub fn for_stage(stage: usize) -> Option<FebKind> {
        match stage {
            2 => Some(FebKind::Feb2),
            3 => Some(FebKind::Feb3),
            4 => Some(FebKind::Feb4),
            _ => None,
        }
    }

    /// Dilations of the two separable convolutions; `None` for the block
    /// built from standard convolutions.
    pub fn dilations(self) -> Option<(usize, usize)> {
        match self {
            FebKind::Feb2 => None,
            FebKind::Feb3 => Some((1, 1)),
            FebKind::Feb4 => Some((2, 5)),
        }
    }
}

#[derive(Clone, Debug)]
pub enum FebBody {
    /// conv3×3 → BN → conv3×3 → BN, no activation in between.
    Standard { first: ConvBn, second: ConvBn },
    /// a = DWC(x); b = DWC(norm(a)); fuse(concat(a, b)) with a 1×1 conv + BN.
    Separable {
        dwc_a: DwSeparable,
        mid: Norm,
        dwc_b: DwSeparable,
        fuse: ConvBn,
    },
}

/// Residual feature enhancement block; output = ReLU(x + body(x)).
#[derive(Clone, Debug)]
pub struct Feb {
    pub kind: FebKind,
    pub channels: usize,
    pub body: FebBody,
    name: String,
}

impl Feb {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        kind: FebKind,
        channels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let c = channels;
        let body = match kind.dilations() {
            None => FebBody::Standard {
                first: ConvBn::new(store, &format!("{name}.first"), ConvSpec::same(c, c, 3), rng)?,
                second: ConvBn::new(store, &format!("{name}.second"), ConvSpec::same(c, c, 3), rng)?,
            },
            Some((da, db)) => FebBody::Separable {
                dwc_a: DwSeparable::new(store, &format!("{name}.dwc_a"), c, c, da, rng)?,
                mid: Norm::Batch(BatchNorm::new(store, &format!("{name}.mid"), c)?),
                dwc_b: DwSeparable::new(store, &format!("{name}.dwc_b"), c, c, db, rng)?,
                fuse: ConvBn::new(store, &format!("{name}.fuse"), ConvSpec::new(2 * c, c, 1), rng)?,
            },
        };
        Ok(Feb {
            kind,
            channels,
            body,
            name: name.to_string(),
        })
    }

    pub fn dilations(&self) -> Option<(usize, usize)> {
        match &self.body {
            FebBody::Standard { .. } => None,
            FebBody::Separable { dwc_a, dwc_b, .. } => Some((dwc_a.dilation, dwc_b.dilation)),
        }
    }

    /// The residual branch before the shortcut addition.
    pub fn branch<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        match &self.body {
            FebBody::Standard { first, second } => {
                let a = first.forward(ctx, x)?;
                second.forward(ctx, a)
            }
            FebBody::Separable {
                dwc_a,
                mid,
                dwc_b,
                fuse,
            } => {
                let a = dwc_a.forward(ctx, x)?;
                let m = mid.forward(ctx, a)?;
                let b = dwc_b.forward(ctx, m)?;
                let cat = ctx.graph.concat_channels(&[a, b])?;
                fuse.forward(ctx, cat)
            }
        }
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let b = self.branch(ctx, x)?;
        let s = ctx.graph.add(x, b)?;
        ctx.graph.relu(s)
    }

    pub fn fold_bn<T: Element>(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        match &mut self.body {
            FebBody::Standard { first, second } => {
                first.fold_bn(store)?;
                second.fold_bn(store)
            }
            FebBody::Separable { mid, fuse, .. } => {
                mid.fold_bn(store, &format!("{}.mid", self.name))?;
                fuse.fold_bn(store)
            }
        }
    }
}

impl Module for Feb {
    fn collect_params(&self, out: &mut Vec<ParamId>) {
        match &self.body {
            FebBody::Standard { first, second } => {
                first.collect_params(out);
                second.collect_params(out);
            }
            FebBody::Separable {
                dwc_a,
                mid,
                dwc_b,
                fuse,
            } => {
                dwc_a.collect_params(out);
                mid.collect_params(out);
                dwc_b.collect_params(out);
                fuse.collect_params(out);
            }
        }
    }
}

/// Flow-based alignment of a low-level map onto a high-level map, followed
/// by addition and attention.
#[derive(Clone, Debug)]
pub struct Faa {
    pub channels: usize,
    pub flow: Conv2dLayer,
    pub sca: Sca,
}

impl Faa {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, channels: usize, rng: &mut impl Rng) -> Result<Self> {
        let flow = Conv2dLayer::new(
            store,
            &format!("{name}.flow"),
            ConvSpec::same(2 * channels, 2, 3).bias(true),
            Init::Zeros,
            rng,
        )?;
        let sca = Sca::new(store, &format!("{name}.sca"), channels, rng)?;
        Ok(Faa { channels, flow, sca })
    }

    /// Predicted flow field, 2 channels at the high-level extents.
    pub fn flow<T: Element>(&self, ctx: &mut Ctx<'_, T>, high: Var, low: Var) -> Result<Var> {
        if ctx.graph.shape(high) != ctx.graph.shape(low) {
            return Err(Error::shape(
                "faa",
                format!("high {:?} vs low {:?}", ctx.graph.shape(high), ctx.graph.shape(low)),
            ));
        }
        let cat = ctx.graph.concat_channels(&[high, low])?;
        self.flow.forward(ctx, cat)
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, high: Var, low: Var) -> Result<Var> {
        let flow = self.flow(ctx, high, low)?;
        let warped = ctx.graph.grid_sample_warp(low, flow)?;
        let agg = ctx.graph.add(high, warped)?;
        self.sca.forward(ctx, agg)
    }
}

impl Module for Faa {
    fn collect_params(&self, out: &mut Vec<ParamId>) {
        self.flow.collect_params(out);
        self.sca.collect_params(out);
    }
}

/// One decoder stage: enhance the high-level map, adapt the low-level map,
/// then align and aggregate.
#[derive(Clone, Debug)]
pub struct SfaStage {
    pub index: usize,
    pub feb: Option<Feb>,
    pub high_sca: Sca,
    pub low_cbr: Cbr,
    pub faa: Faa,
}

impl SfaStage {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        index: usize,
        high_channels: usize,
        low_channels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if !(1..=4).contains(&index) {
            return Err(Error::invalid("sfa", format!("stage index {index} not in 1..=4")));
        }
        let feb = match FebKind::for_stage(index) {
            Some(kind) => Some(Feb::new(store, &format!("{name}.feb"), kind, high_channels, rng)?),
            None => None,
        };
        Ok(SfaStage {
            index,
            feb,
            high_sca: Sca::new(store, &format!("{name}.sca"), high_channels, rng)?,
            low_cbr: Cbr::new(store, &format!("{name}.low"), low_channels, high_channels, rng)?,
            faa: Faa::new(store, &format!("{name}.faa"), high_channels, rng)?,
        })
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, high: Var, low: Var) -> Result<Var> {
        let h = match &self.feb {
            Some(feb) => feb.forward(ctx, high)?,
            None => high,
        };
        let h = self.high_sca.forward(ctx, h)?;
        let l = self.low_cbr.forward(ctx, low)?;
        let (hh, hw) = {
            let s = ctx.graph.shape(high);
            (s[2], s[3])
        };
        let l = ctx.graph.bilinear_resize(l, hh, hw)?;
        self.faa.forward(ctx, h, l)
    }

    pub fn fold_bn<T: Element>(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if let Some(feb) = &mut self.feb {
            feb.fold_bn(store)?;
        }
        self.low_cbr.fold_bn(store)
    }
}

impl Module for SfaStage {
    fn collect_params(&self, out: &mut Vec<ParamId>) {
        self.feb.collect_params(out);
        self.high_sca.collect_params(out);
        self.low_cbr.collect_params(out);
        self.faa.collect_params(out);
    }
}

/// CBR to a fixed intermediate width, a 3×3 classifier, then resize to the
/// target extents. Produces raw logits.
#[derive(Clone, Debug)]
pub struct SegHead {
    pub cbr: Cbr,
    pub classifier: Conv2dLayer,
    pub num_classes: usize,
}

impl SegHead {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        num_classes: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(SegHead {
            cbr: Cbr::new(store, &format!("{name}.cbr"), in_channels, SEG_HEAD_CHANNELS, rng)?,
            classifier: Conv2dLayer::new(
                store,
                &format!("{name}.classifier"),
                ConvSpec::same(SEG_HEAD_CHANNELS, num_classes, 3).bias(true),
                Init::KaimingNormal,
                rng,
            )?,
            num_classes,
        })
    }

    pub fn mid_channels(&self) -> usize {
        self.cbr.out_channels()
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        if out_h == 0 || out_w == 0 {
            return Err(Error::invalid("seg_head", format!("target extents {out_h}×{out_w}")));
        }
        let t = self.cbr.forward(ctx, x)?;
        let o = self.classifier.forward(ctx, t)?;
        ctx.graph.bilinear_resize(o, out_h, out_w)
    }

    pub fn fold_bn<T: Element>(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        self.cbr.fold_bn(store)
    }
}

impl Module for SegHead {
    fn collect_params(&self, out: &mut Vec<ParamId>) {
        self.cbr.collect_params(out);
        self.classifier.collect_params(out);
    }
}

/// Two 3×3 conv + BN layers with an identity or projected shortcut.
#[derive(Clone, Debug)]
pub struct BasicBlock {
    pub conv1: ConvBn,
    pub conv2: ConvBn,
    pub downsample: Option<ConvBn>,
}

impl BasicBlock {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let downsample = if stride != 1 || in_channels != out_channels {
            Some(ConvBn::new(
                store,
                &format!("{name}.downsample"),
                ConvSpec::new(in_channels, out_channels, 1).stride(stride),
                rng,
            )?)
        } else {
            None
        };
        Ok(BasicBlock {
            conv1: ConvBn::new(
                store,
                &format!("{name}.conv1"),
                ConvSpec::same(in_channels, out_channels, 3).stride(stride),
                rng,
            )?,
            conv2: ConvBn::new(
                store,
                &format!("{name}.conv2"),
                ConvSpec::same(out_channels, out_channels, 3),
                rng,
            )?,
            downsample,
        })
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let a = self.conv1.forward(ctx, x)?;
        let a = ctx.graph.relu(a)?;
        let b = self.conv2.forward(ctx, a)?;
        let shortcut = match &self.downsample {
            Some(d) => d.forward(ctx, x)?,
            None => x,
        };
        let s = ctx.graph.add(b, shortcut)?;
        ctx.graph.relu(s)
    }

    pub fn fold_bn<T: Element>(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        self.conv1.fold_bn(store)?;
        self.conv2.fold_bn(store)?;
        if let Some(d) = &mut self.downsample {
            d.fold_bn(store)?;
        }
        Ok(())
    }
}

impl Module for BasicBlock {
    fn collect_params(&self, out: &mut Vec<ParamId>) {
        self.conv1.collect_params(out);
        self.conv2.collect_params(out);
        self.downsample.collect_params(out);
    }
}
