//! Token-mixer decoder over the fused stage features, plus the
//! segmentation head.
//!
//! Each stage feature passes through four steps: a stride-1 deformable
//! embed projecting to the shared decode width, an average-pooling mixer
//! plus a channel gate on a residual pair, a channel-wise deformable MLP
//! plus a second independent channel gate, and a bilinear upsample to 1/4
//! of the network input resolution. The head concatenates the four decoded
//! maps, fuses, classifies, and upsamples to the input resolution.

use panofuse_tensor::ops::WindowGeom;
use panofuse_tensor::{Scalar, ValueId};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::layers::{Conv2d, Ctx, DeformEmbed, Linear};
use crate::params::{Init, ParamStore};
use crate::{CoreError, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub decode_dim: usize,
    pub num_classes: usize,
    /// Largest per-channel gather offset in feature pixels.
    pub dmlp_offset_range: f64,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.decode_dim == 0 {
            return Err(CoreError::invalid(
                "DecoderConfig::validate",
                "decode_dim must be positive".to_string(),
            ));
        }
        if !(2..=254).contains(&self.num_classes) {
            return Err(CoreError::invalid(
                "DecoderConfig::validate",
                format!(
                    "num_classes must be in [2, 254] (labels are 8-bit, 255 is ignore), got {}",
                    self.num_classes
                ),
            ));
        }
        if !(self.dmlp_offset_range > 0.0 && self.dmlp_offset_range.is_finite()) {
            return Err(CoreError::invalid(
                "DecoderConfig::validate",
                format!("dmlp_offset_range must be positive, got {}", self.dmlp_offset_range),
            ));
        }
        Ok(())
    }
}

/// Space-consistent channel gate: a pooled descriptor drives a two-layer
/// MLP whose sigmoid output scales each channel by one scalar.
pub struct ChannelMixer {
    fc1: Linear,
    fc2: Linear,
}

impl ChannelMixer {
    pub fn new(
        store: &mut ParamStore<impl Scalar>,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
    ) -> Result<Self> {
        Ok(ChannelMixer {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), dim, dim, true)?,
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), dim, dim, true)?,
        })
    }

    pub fn apply<T: Scalar>(&self, ctx: &mut Ctx<T>, f: ValueId) -> Result<ValueId> {
        let shape = ctx.shape(f);
        let (b, c) = (shape[0], shape[1]);
        let pooled = ctx.tape.mean_spatial(f)?;
        let g = self.fc1.apply(ctx, pooled)?;
        let g = ctx.tape.relu(g)?;
        let g = self.fc2.apply(ctx, g)?;
        let g = ctx.tape.sigmoid(g)?;
        let g = ctx.tape.reshape(g, vec![b, c, 1, 1])?;
        Ok(ctx.tape.mul_bcast(f, g)?)
    }

    fn macs<T: Scalar>(&self, store: &ParamStore<T>) -> u128 {
        self.fc1.macs(store, 1) + self.fc2.macs(store, 1)
    }
}

/// Channel-wise deformable MLP: a 1×1 convolution predicts one bounded
/// (dy, dx) pair per location per channel, each channel gathers its own
/// value at the offset position (horizontal wrap, vertical clamp), and a
/// channel-mixing projection follows. The offset predictor starts at zero,
/// so a fresh mixer reduces to its projection.
pub struct DeformableMlp {
    offsets: Conv2d,
    mix: Conv2d,
    offset_range: f64,
    dim: usize,
}

impl DeformableMlp {
    pub fn new(
        store: &mut ParamStore<impl Scalar>,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        offset_range: f64,
    ) -> Result<Self> {
        let offsets = Conv2d::new(
            store,
            rng,
            &format!("{name}.offsets"),
            dim,
            2 * dim,
            1,
            1,
            0,
            1,
            true,
            Init::Zeros,
        )?;
        let mix = Conv2d::he(store, rng, &format!("{name}.mix"), dim, dim, 1, 1, 0, 1, true)?;
        Ok(DeformableMlp {
            offsets,
            mix,
            offset_range,
            dim,
        })
    }

    pub fn apply<T: Scalar>(&self, ctx: &mut Ctx<T>, f: ValueId) -> Result<ValueId> {
        let raw = self.offsets.apply(ctx, f)?;
        let bounded = ctx.tape.tanh(raw)?;
        let bounded = ctx.tape.scale(bounded, self.offset_range)?;
        let gathered = ctx
            .tape
            .deform_sample(f, bounded, WindowGeom::square(1, 1, 0), self.dim)?;
        self.mix.apply(ctx, gathered)
    }

    /// Bounded offsets for inspection in tests. Shape (B, 2C, H, W) with
    /// channel 2c holding dy and 2c+1 holding dx for feature channel c.
    pub fn predicted_offsets<T: Scalar>(&self, ctx: &mut Ctx<T>, f: ValueId) -> Result<ValueId> {
        let raw = self.offsets.apply(ctx, f)?;
        let bounded = ctx.tape.tanh(raw)?;
        Ok(ctx.tape.scale(bounded, self.offset_range)?)
    }

    fn macs<T: Scalar>(&self, store: &ParamStore<T>, h: usize, w: usize) -> u128 {
        self.offsets.macs(store, h, w) + self.mix.macs(store, h, w)
    }
}

/// One decoding pipeline: embed, pooling mixer with channel-gate residual,
/// deformable MLP with channel-gate residual, upsample.
pub struct DecoderStage {
    pub embed: DeformEmbed,
    pub cx1: ChannelMixer,
    pub dmlp: DeformableMlp,
    pub cx2: ChannelMixer,
}

impl DecoderStage {
    fn new(
        store: &mut ParamStore<impl Scalar>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        config: &DecoderConfig,
        clamp_divisor: usize,
    ) -> Result<Self> {
        Ok(DecoderStage {
            embed: DeformEmbed::new(
                store,
                rng,
                &format!("{name}.embed"),
                c_in,
                config.decode_dim,
                3,
                1,
                1,
                clamp_divisor,
            )?,
            cx1: ChannelMixer::new(store, rng, &format!("{name}.cx1"), config.decode_dim)?,
            dmlp: DeformableMlp::new(
                store,
                rng,
                &format!("{name}.dmlp"),
                config.decode_dim,
                config.dmlp_offset_range,
            )?,
            cx2: ChannelMixer::new(store, rng, &format!("{name}.cx2"), config.decode_dim)?,
        })
    }

    /// Decodes one fused stage map to (B, decode_dim, target_h, target_w).
    pub fn apply<T: Scalar>(
        &self,
        ctx: &mut Ctx<T>,
        fused: ValueId,
        target_h: usize,
        target_w: usize,
    ) -> Result<ValueId> {
        let f = self.embed.apply(ctx, fused)?;

        let pooled = ctx.tape.avg_pool(f, WindowGeom::square(3, 1, 1))?;
        let gated = self.cx1.apply(ctx, f)?;
        let f = ctx.tape.add(pooled, gated)?;

        let mixed = self.dmlp.apply(ctx, f)?;
        let gated = self.cx2.apply(ctx, f)?;
        let f = ctx.tape.add(mixed, gated)?;

        Ok(ctx.tape.bilinear_resize(f, target_h, target_w)?)
    }

    fn macs<T: Scalar>(&self, store: &ParamStore<T>, h: usize, w: usize) -> u128 {
        self.embed.macs(store, h, w)
            + self.cx1.macs(store)
            + self.dmlp.macs(store, h, w)
            + self.cx2.macs(store)
    }
}

/// Fuses the decoded stage maps and emits per-class logits at the network
/// input resolution.
pub struct SegHead {
    fuse: Conv2d,
    classify: Conv2d,
}

impl SegHead {
    fn new(
        store: &mut ParamStore<impl Scalar>,
        rng: &mut ChaCha8Rng,
        name: &str,
        stages: usize,
        config: &DecoderConfig,
    ) -> Result<Self> {
        Ok(SegHead {
            fuse: Conv2d::he(
                store,
                rng,
                &format!("{name}.fuse"),
                stages * config.decode_dim,
                config.decode_dim,
                1,
                1,
                0,
                1,
                true,
            )?,
            classify: Conv2d::he(
                store,
                rng,
                &format!("{name}.classify"),
                config.decode_dim,
                config.num_classes,
                1,
                1,
                0,
                1,
                true,
            )?,
        })
    }

    pub fn apply<T: Scalar>(
        &self,
        ctx: &mut Ctx<T>,
        decoded: &[ValueId],
        out_h: usize,
        out_w: usize,
    ) -> Result<ValueId> {
        let first = ctx.shape(decoded[0]);
        for &d in &decoded[1..] {
            let shape = ctx.shape(d);
            if shape != first {
                return Err(CoreError::mismatch(
                    "SegHead::apply",
                    format!("decoded maps disagree in shape: {first:?} vs {shape:?}"),
                ));
            }
        }
        let cat = if decoded.len() == 1 {
            decoded[0]
        } else {
            ctx.tape.concat(decoded, 1)?
        };
        let f = self.fuse.apply(ctx, cat)?;
        let f = ctx.tape.relu(f)?;
        let logits = self.classify.apply(ctx, f)?;
        Ok(ctx.tape.bilinear_resize(logits, out_h, out_w)?)
    }

    fn macs<T: Scalar>(&self, store: &ParamStore<T>, h: usize, w: usize) -> u128 {
        self.fuse.macs(store, h, w) + self.classify.macs(store, h, w)
    }
}

/// The full decoder: one stage pipeline per encoder stage plus the head.
pub struct Decoder {
    stages: Vec<DecoderStage>,
    head: SegHead,
}

impl Decoder {
    pub fn new(
        store: &mut ParamStore<impl Scalar>,
        rng: &mut ChaCha8Rng,
        config: &DecoderConfig,
        stage_dims: &[usize],
        clamp_divisor: usize,
    ) -> Result<Self> {
        config.validate()?;
        let stages = stage_dims
            .iter()
            .enumerate()
            .map(|(s, &c_in)| {
                DecoderStage::new(
                    store,
                    rng,
                    &format!("dec.s{}", s + 1),
                    c_in,
                    config,
                    clamp_divisor,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let head = SegHead::new(store, rng, "head", stages.len(), config)?;
        Ok(Decoder { stages, head })
    }

    /// Fused stage maps, coarsest last, to logits at (net_h, net_w).
    pub fn decode<T: Scalar>(
        &self,
        ctx: &mut Ctx<T>,
        fused: &[ValueId],
        net_h: usize,
        net_w: usize,
    ) -> Result<ValueId> {
        if fused.len() != self.stages.len() {
            return Err(CoreError::mismatch(
                "Decoder::decode",
                format!("expected {} stage maps, got {}", self.stages.len(), fused.len()),
            ));
        }
        if net_h % 4 != 0 || net_w % 4 != 0 {
            return Err(CoreError::invalid(
                "Decoder::decode",
                format!("network resolution {net_h}x{net_w} must be divisible by 4"),
            ));
        }
        let (th, tw) = (net_h / 4, net_w / 4);
        let decoded: Vec<ValueId> = self
            .stages
            .iter()
            .zip(fused)
            .map(|(stage, &f)| stage.apply(ctx, f, th, tw))
            .collect::<Result<_>>()?;
        self.head.apply(ctx, &decoded, net_h, net_w)
    }

    pub fn count_macs<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        stage_dims: &[(usize, usize)],
        net_h: usize,
        net_w: usize,
    ) -> u128 {
        let per_stage: u128 = self
            .stages
            .iter()
            .zip(stage_dims)
            .map(|(stage, &(h, w))| stage.macs(store, h, w))
            .sum();
        per_stage + self.head.macs(store, net_h / 4, net_w / 4)
    }
}
