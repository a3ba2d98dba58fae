//! The full segmentation network: residual encoder with attention, a
//! four-stage alignment decoder, segmentation heads and the training loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{BasicBlock, Bindings, Cbr, ConvBn, Ctx, Module, ParamId, ParamKind, ParamStore, Sca, SegHead, SfaStage};
use crate::ops::{ConvSpec, PoolSpec};
use crate::tensor::{Element, Tensor};
use crate::Mode;

mod loss;

pub use loss::{total_loss, LossBundle};

/// Channel widths of the four encoder stages before scaling.
pub const BASE_CHANNELS: [usize; 4] = [64, 128, 256, 512];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SfanetConfig {
    pub num_classes: usize,
    /// Scales every encoder width.
    pub width: f64,
    pub input_h: usize,
    pub input_w: usize,
    /// Auxiliary loss weight of decoder stages 1..4.
    pub lambda: [f64; 4],
    pub mode: Mode,
}

impl Default for SfanetConfig {
    fn default() -> Self {
        SfanetConfig {
            num_classes: 4,
            width: 0.25,
            input_h: 64,
            input_w: 64,
            lambda: [0.0, 0.0, 1.0, 1.0],
            mode: Mode::Train,
        }
    }
}

impl SfanetConfig {
    /// Scaled stage widths.
    pub fn channels(&self) -> [usize; 4] {
        BASE_CHANNELS.map(|c| (c as f64 * self.width).round() as usize)
    }

    pub fn validate(&self) -> Result<()> {
        let ch = self.channels();
        if !(self.width.is_finite() && self.width > 0.0) || ch[0] < 1 {
            return Err(Error::invalid("sfanet_config", format!("width {} too small", self.width)));
        }
        if ch[1..].iter().any(|c| c % 2 != 0) {
            return Err(Error::invalid(
                "sfanet_config",
                format!("stage widths {ch:?} must be even where they are halved"),
            ));
        }
        if self.num_classes == 0 {
            return Err(Error::invalid("sfanet_config", "zero classes"));
        }
        if self.lambda.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::invalid("sfanet_config", format!("lambda {:?}", self.lambda)));
        }
        check_extents(self.input_h, self.input_w)
    }
}

fn check_extents(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || !h.is_multiple_of(32) || !w.is_multiple_of(32) {
        return Err(Error::shape(
            "encoder",
            format!(
                "input {h}×{w} must be a positive multiple of 32 (pad to {}×{})",
                h.div_ceil(32).max(1) * 32,
                w.div_ceil(32).max(1) * 32
            ),
        ));
    }
    Ok(())
}

/// Two residual blocks, with attention between them in stages 2..4.
#[derive(Clone, Debug)]
pub struct EncoderStage {
    pub first: BasicBlock,
    pub sca: Option<Sca>,
    pub second: BasicBlock,
}

impl Module for EncoderStage {
    fn collect_params(&self, out: &mut Vec<ParamId>) {
        self.first.collect_params(out);
        self.sca.collect_params(out);
        self.second.collect_params(out);
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    /// 3×3 stride-2 conv + BN, followed by ReLU and a 3×3 stride-2 max pool.
    pub stem: ConvBn,
    pub stages: [EncoderStage; 4],
}

/// Encoder outputs at 1/4, 1/8, 1/16 and 1/32 of the input resolution.
#[derive(Clone, Copy, Debug)]
pub struct EncoderMaps {
    pub res: [Var; 4],
}

pub const STEM_POOL: PoolSpec = PoolSpec {
    kernel: 3,
    stride: 2,
    padding: 1,
};

impl Encoder {
    fn new<T: Element>(store: &mut ParamStore<T>, ch: [usize; 4], rng: &mut ChaCha8Rng) -> Result<Self> {
        let stem = ConvBn::new(store, "encoder.stem", ConvSpec::same(3, ch[0], 3).stride(2), rng)?;
        let mut stages = Vec::with_capacity(4);
        for i in 0..4 {
            let name = format!("encoder.res{}", i + 1);
            let (cin, stride) = if i == 0 { (ch[0], 1) } else { (ch[i - 1], 2) };
            let first = BasicBlock::new(store, &format!("{name}.block1"), cin, ch[i], stride, rng)?;
            let sca = if i == 0 {
                None
            } else {
                Some(Sca::new(store, &format!("{name}.sca"), ch[i], rng)?)
            };
            let second = BasicBlock::new(store, &format!("{name}.block2"), ch[i], ch[i], 1, rng)?;
            stages.push(EncoderStage { first, sca, second });
        }
        Ok(Encoder {
            stem,
            stages: stages.try_into().expect("four stages"),
        })
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, image: Var) -> Result<EncoderMaps> {
        let shape = ctx.graph.shape(image).to_vec();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::shape("encoder", format!("expected N×3×H×W, got {shape:?}")));
        }
        check_extents(shape[2], shape[3])?;
        let s = self.stem.forward(ctx, image)?;
        let s = ctx.graph.relu(s)?;
        let mut x = ctx.graph.max_pool2d(s, STEM_POOL)?;
        let mut res = Vec::with_capacity(4);
        for stage in &self.stages {
            x = stage.first.forward(ctx, x)?;
            if let Some(sca) = &stage.sca {
                x = sca.forward(ctx, x)?;
            }
            x = stage.second.forward(ctx, x)?;
            res.push(x);
        }
        Ok(EncoderMaps {
            res: res.try_into().expect("four maps"),
        })
    }

    fn fold_bn<T: Element>(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        self.stem.fold_bn(store)?;
        for stage in &mut self.stages {
            stage.first.fold_bn(store)?;
            stage.second.fold_bn(store)?;
        }
        Ok(())
    }
}

impl Module for Encoder {
    fn collect_params(&self, out: &mut Vec<ParamId>) {
        self.stem.collect_params(out);
        for s in &self.stages {
            s.collect_params(out);
        }
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    /// Halve the channels of Res-2, Res-3 and Res-4.
    pub halve: [Cbr; 3],
    /// Stages 1..4 in index order.
    pub sfa: [SfaStage; 4],
    pub head: SegHead,
    /// Per-stage auxiliary heads; dropped when the model is folded.
    pub aux_heads: Option<[SegHead; 4]>,
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderOutput {
    pub logits: Var,
    /// Auxiliary logits of stages 1..4.
    pub aux: Option<[Var; 4]>,
    /// Stage outputs, stages 1..4.
    pub stages: [Var; 4],
}

impl Decoder {
    fn new<T: Element>(store: &mut ParamStore<T>, ch: [usize; 4], classes: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let half = [ch[1] / 2, ch[2] / 2, ch[3] / 2];
        let halve = [
            Cbr::new(store, "decoder.halve2", ch[1], half[0], rng)?,
            Cbr::new(store, "decoder.halve3", ch[2], half[1], rng)?,
            Cbr::new(store, "decoder.halve4", ch[3], half[2], rng)?,
        ];
        // (high, low) channels per stage.
        let io = [(ch[0], half[0]), (half[0], half[1]), (half[1], half[2]), (half[2], ch[3])];
        let mut sfa = Vec::with_capacity(4);
        for (i, &(hi, lo)) in io.iter().enumerate() {
            sfa.push(SfaStage::new(store, &format!("decoder.sfa{}", i + 1), i + 1, hi, lo, rng)?);
        }
        let head = SegHead::new(store, "head", 2 * ch[0], classes, rng)?;
        let mut aux = Vec::with_capacity(4);
        for (i, &(hi, _)) in io.iter().enumerate() {
            aux.push(SegHead::new(store, &format!("aux{}", i + 1), hi, classes, rng)?);
        }
        Ok(Decoder {
            halve,
            sfa: sfa.try_into().expect("four stages"),
            head,
            aux_heads: Some(aux.try_into().expect("four heads")),
        })
    }

    /// Runs the decoder; auxiliary heads are evaluated iff `with_aux`, which
    /// is only allowed in train mode.
    pub fn forward<T: Element>(
        &self,
        ctx: &mut Ctx<'_, T>,
        maps: &EncoderMaps,
        out_h: usize,
        out_w: usize,
        with_aux: bool,
    ) -> Result<DecoderOutput> {
        if with_aux && ctx.mode == Mode::Infer {
            return Err(Error::Mode("auxiliary heads requested in infer mode".into()));
        }
        let [r1, r2, r3, r4] = maps.res;
        let h2 = self.halve[0].forward(ctx, r2)?;
        let h3 = self.halve[1].forward(ctx, r3)?;
        let h4 = self.halve[2].forward(ctx, r4)?;
        let context = ctx.graph.global_avg_pool(r4)?;
        let y4 = self.sfa[3].forward(ctx, h4, context)?;
        let y3 = self.sfa[2].forward(ctx, h3, y4)?;
        let y2 = self.sfa[1].forward(ctx, h2, y3)?;
        let y1 = self.sfa[0].forward(ctx, r1, y2)?;
        let cat = ctx.graph.concat_channels(&[y1, r1])?;
        let logits = self.head.forward(ctx, cat, out_h, out_w)?;
        let stages = [y1, y2, y3, y4];
        let aux = if with_aux {
            let heads = self
                .aux_heads
                .as_ref()
                .ok_or_else(|| Error::Mode("auxiliary heads were removed by folding".into()))?;
            let mut out = Vec::with_capacity(4);
            for (head, &y) in heads.iter().zip(&stages) {
                out.push(head.forward(ctx, y, out_h, out_w)?);
            }
            Some(out.try_into().expect("four heads"))
        } else {
            None
        };
        Ok(DecoderOutput { logits, aux, stages })
    }

    fn fold_bn<T: Element>(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        for h in &mut self.halve {
            h.fold_bn(store)?;
        }
        for s in &mut self.sfa {
            s.fold_bn(store)?;
        }
        self.head.fold_bn(store)?;
        if let Some(heads) = self.aux_heads.take() {
            for id in heads.iter().flat_map(Module::param_ids) {
                store.remove(id);
            }
        }
        Ok(())
    }
}

impl Module for Decoder {
    fn collect_params(&self, out: &mut Vec<ParamId>) {
        for h in &self.halve {
            h.collect_params(out);
        }
        for s in &self.sfa {
            s.collect_params(out);
        }
        self.head.collect_params(out);
        if let Some(heads) = &self.aux_heads {
            for h in heads {
                h.collect_params(out);
            }
        }
    }
}

/// Everything a forward pass produced.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub encoder: EncoderMaps,
    pub decoder: DecoderOutput,
    pub bindings: Bindings,
}

#[derive(Clone, Debug)]
pub struct SfanetModel<T: Element> {
    pub config: SfanetConfig,
    pub store: ParamStore<T>,
    pub encoder: Encoder,
    pub decoder: Decoder,
    folded: bool,
}

impl<T: Element> SfanetModel<T> {
    /// Builds a model with freshly initialized parameters.
    pub fn new(config: SfanetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let ch = config.channels();
        let encoder = Encoder::new(&mut store, ch, &mut rng)?;
        let decoder = Decoder::new(&mut store, ch, config.num_classes, &mut rng)?;
        Ok(SfanetModel {
            config,
            store,
            encoder,
            decoder,
            folded: false,
        })
    }

    pub fn mode(&self) -> Mode {
        self.config.mode
    }

    pub fn set_mode(&mut self, mode: Mode) -> Result<()> {
        if self.folded && mode == Mode::Train {
            return Err(Error::Mode("a folded model cannot be trained".into()));
        }
        self.config.mode = mode;
        Ok(())
    }

    pub fn is_folded(&self) -> bool {
        self.folded
    }

    /// Forward pass. In train mode the auxiliary heads are evaluated too.
    /// `bindings` may substitute tape nodes for stored parameters.
    pub fn forward(&mut self, graph: &mut Graph<T>, image: Var, bindings: Bindings) -> Result<ModelOutput> {
        let mode = self.config.mode;
        let (h, w) = {
            let s = graph.shape(image);
            (s.get(2).copied().unwrap_or(0), s.get(3).copied().unwrap_or(0))
        };
        let mut ctx = Ctx::with_bindings(graph, &mut self.store, mode, bindings);
        let encoder = self.encoder.forward(&mut ctx, image)?;
        let decoder = self.decoder.forward(&mut ctx, &encoder, h, w, mode == Mode::Train)?;
        Ok(ModelOutput {
            encoder,
            decoder,
            bindings: ctx.into_bindings(),
        })
    }

    /// Principal logits for a batch, evaluated in infer mode.
    pub fn predict(&mut self, image: &Tensor<T>) -> Result<Tensor<T>> {
        if self.config.mode != Mode::Infer {
            return Err(Error::Mode("predict requires infer mode".into()));
        }
        let mut graph = Graph::new();
        let x = graph.constant(image.clone());
        let out = self.forward(&mut graph, x, Bindings::default())?;
        Ok(graph.into_value(out.decoder.logits))
    }

    /// Merges every batch norm into the preceding convolution and drops the
    /// auxiliary heads. Requires infer mode.
    pub fn fold_batch_norm(&mut self) -> Result<()> {
        if self.config.mode != Mode::Infer {
            return Err(Error::Mode("batch norm folding requires infer mode".into()));
        }
        if self.folded {
            return Ok(());
        }
        self.encoder.fold_bn(&mut self.store)?;
        self.decoder.fold_bn(&mut self.store)?;
        self.folded = true;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.store.trainable_numel(&self.param_ids())
    }

    pub fn batch_norm_tensor_count(&self) -> usize {
        self.store.count_where(ParamKind::is_batch_norm)
    }
}

impl<T: Element> Module for SfanetModel<T> {
    fn collect_params(&self, out: &mut Vec<ParamId>) {
        self.encoder.collect_params(out);
        self.decoder.collect_params(out);
    }
}

#[cfg(test)]
mod tests;
