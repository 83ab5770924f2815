//! Four-stage hierarchical encoder with one stream per modality.
//!
//! Stage layout: patch embedding (deformable at stage 1, overlapping
//! strided convolution afterwards), a run of pre-norm transformer blocks,
//! a closing layer norm, then cross-modal feature rectification and fusion
//! when two or three modalities are present. Rectified per-modality maps
//! feed the next stage; the fused map of every stage feeds the decoder.
//! Single-modality models skip rectification and fusion entirely and
//! instantiate no parameters for them.

use panofuse_tensor::{Scalar, ValueId};
use rand_chacha::ChaCha8Rng;

use crate::layers::{
    conv_out, map_from_tokens, tokens_from_map, Attention, Conv2d, Ctx, DeformEmbed, LayerNorm,
    Linear,
};
use crate::model::ModelConfig;
use crate::params::ParamStore;
use crate::{CoreError, Result};

/// Per-stage outputs: raw per-modality maps, rectified maps (identical to
/// raw when rectification is skipped), and the fused map.
pub struct StageFeatures {
    pub per_modality: Vec<ValueId>,
    pub rectified: Vec<ValueId>,
    pub fused: ValueId,
}

/// Strided convolution embed with overlapping windows, followed by token
/// layer norm.
pub struct OverlapPatchEmbed {
    pub conv: Conv2d,
    pub norm: LayerNorm,
}

impl OverlapPatchEmbed {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore<impl Scalar>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        Ok(OverlapPatchEmbed {
            conv: Conv2d::he(
                store,
                rng,
                &format!("{name}.conv"),
                c_in,
                c_out,
                kernel,
                stride,
                pad,
                1,
                true,
            )?,
            norm: LayerNorm::new(store, rng, &format!("{name}.norm"), c_out)?,
        })
    }
}

/// Stage patch embedding; both variants emit a token matrix plus the
/// embedded spatial extents.
pub enum Embed {
    Deform(DeformEmbed),
    Overlap(OverlapPatchEmbed),
}

impl Embed {
    pub fn apply<T: Scalar>(&self, ctx: &mut Ctx<T>, x: ValueId) -> Result<(ValueId, usize, usize)> {
        match self {
            Embed::Deform(e) => {
                let map = e.apply(ctx, x)?;
                let shape = ctx.shape(map);
                let (h, w) = (shape[2], shape[3]);
                Ok((tokens_from_map(ctx, map)?, h, w))
            }
            Embed::Overlap(e) => {
                let map = e.conv.apply(ctx, x)?;
                let shape = ctx.shape(map);
                let (h, w) = (shape[2], shape[3]);
                let tokens = tokens_from_map(ctx, map)?;
                Ok((e.norm.apply(ctx, tokens)?, h, w))
            }
        }
    }

    fn macs<T: Scalar>(&self, store: &ParamStore<T>, out_h: usize, out_w: usize) -> u128 {
        match self {
            Embed::Deform(e) => e.macs(store, out_h, out_w),
            Embed::Overlap(e) => e.conv.macs(store, out_h, out_w),
        }
    }
}

/// Pre-norm transformer block: self-attention with optional spatial
/// reduction of keys and values, then a convolutional token MLP, both on
/// residual paths. Shape-preserving.
pub struct TransformerBlock {
    ln1: LayerNorm,
    attn: Attention,
    sr: Option<(Conv2d, LayerNorm)>,
    sr_ratio: usize,
    ln2: LayerNorm,
    fc1: Linear,
    dw: Conv2d,
    fc2: Linear,
}

impl TransformerBlock {
    pub fn new(
        store: &mut ParamStore<impl Scalar>,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
        sr_ratio: usize,
        mlp_ratio: usize,
    ) -> Result<Self> {
        if sr_ratio == 0 {
            return Err(CoreError::invalid(
                "TransformerBlock::new",
                format!("{name}: spatial reduction ratio must be positive"),
            ));
        }
        let hidden = dim * mlp_ratio;
        let ln1 = LayerNorm::new(store, rng, &format!("{name}.ln1"), dim)?;
        let attn = Attention::new(store, rng, &format!("{name}.attn"), dim, heads)?;
        let sr = if sr_ratio > 1 {
            let conv = Conv2d::he(
                store,
                rng,
                &format!("{name}.sr.conv"),
                dim,
                dim,
                sr_ratio,
                sr_ratio,
                0,
                1,
                true,
            )?;
            let norm = LayerNorm::new(store, rng, &format!("{name}.sr.norm"), dim)?;
            Some((conv, norm))
        } else {
            None
        };
        let ln2 = LayerNorm::new(store, rng, &format!("{name}.ln2"), dim)?;
        let fc1 = Linear::new(store, rng, &format!("{name}.ffn.fc1"), dim, hidden, true)?;
        let dw = Conv2d::he(
            store,
            rng,
            &format!("{name}.ffn.dw"),
            hidden,
            hidden,
            3,
            1,
            1,
            hidden,
            true,
        )?;
        let fc2 = Linear::new(store, rng, &format!("{name}.ffn.fc2"), hidden, dim, true)?;
        Ok(TransformerBlock {
            ln1,
            attn,
            sr,
            sr_ratio,
            ln2,
            fc1,
            dw,
            fc2,
        })
    }

    /// tokens (B, H·W, C) at spatial extents (h, w).
    pub fn apply<T: Scalar>(
        &self,
        ctx: &mut Ctx<T>,
        tokens: ValueId,
        h: usize,
        w: usize,
    ) -> Result<ValueId> {
        let a = self.ln1.apply(ctx, tokens)?;
        let kv = match &self.sr {
            Some((conv, norm)) => {
                let map = map_from_tokens(ctx, a, h, w)?;
                let reduced = conv.apply(ctx, map)?;
                let t = tokens_from_map(ctx, reduced)?;
                norm.apply(ctx, t)?
            }
            None => a,
        };
        let attended = self.attn.apply(ctx, a, kv)?;
        let x = ctx.tape.add(tokens, attended)?;

        let m = self.ln2.apply(ctx, x)?;
        let expanded = self.fc1.apply(ctx, m)?;
        let map = map_from_tokens(ctx, expanded, h, w)?;
        let mixed = self.dw.apply(ctx, map)?;
        let t = tokens_from_map(ctx, mixed)?;
        let t = ctx.tape.gelu(t)?;
        let contracted = self.fc2.apply(ctx, t)?;
        Ok(ctx.tape.add(x, contracted)?)
    }

    fn macs<T: Scalar>(&self, store: &ParamStore<T>, h: usize, w: usize) -> u128 {
        let n = h * w;
        let (m, sr_macs) = match &self.sr {
            Some((conv, _)) => {
                let rh = conv_out(h, self.sr_ratio, self.sr_ratio, 0);
                let rw = conv_out(w, self.sr_ratio, self.sr_ratio, 0);
                (rh * rw, conv.macs(store, rh, rw))
            }
            None => (n, 0),
        };
        sr_macs
            + self.attn.macs(n, m)
            + self.fc1.macs(store, n)
            + self.dw.macs(store, h, w)
            + self.fc2.macs(store, n)
    }
}

/// Cross-modal rectification. Each modality is re-weighted by a channel
/// gate and a spatial gate computed from the other modalities, and the
/// gated terms are added back with fixed mixing weights.
pub struct CmFrm {
    paths: Vec<FrmPath>,
    lambda_c: f64,
    lambda_s: f64,
}

struct FrmPath {
    channel_fc1: Linear,
    channel_fc2: Linear,
    spatial_conv1: Conv2d,
    spatial_conv2: Conv2d,
}

impl CmFrm {
    pub fn new(
        store: &mut ParamStore<impl Scalar>,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        modality_names: &[&str],
        lambda_c: f64,
        lambda_s: f64,
    ) -> Result<Self> {
        let n = modality_names.len();
        if !(2..=3).contains(&n) {
            return Err(CoreError::invalid(
                "CmFrm::new",
                format!("{name}: rectification needs 2 or 3 modalities, got {n}"),
            ));
        }
        let others_dim = dim * (n - 1);
        let spatial_mid = (dim / 2).max(1);
        let mut paths = Vec::with_capacity(n);
        for modality in modality_names {
            let base = format!("{name}.{modality}");
            paths.push(FrmPath {
                channel_fc1: Linear::new(
                    store,
                    rng,
                    &format!("{base}.channel.fc1"),
                    others_dim,
                    dim,
                    true,
                )?,
                channel_fc2: Linear::new(store, rng, &format!("{base}.channel.fc2"), dim, dim, true)?,
                spatial_conv1: Conv2d::he(
                    store,
                    rng,
                    &format!("{base}.spatial.conv1"),
                    others_dim,
                    spatial_mid,
                    3,
                    1,
                    1,
                    1,
                    true,
                )?,
                spatial_conv2: Conv2d::he(
                    store,
                    rng,
                    &format!("{base}.spatial.conv2"),
                    spatial_mid,
                    1,
                    3,
                    1,
                    1,
                    1,
                    true,
                )?,
            });
        }
        Ok(CmFrm {
            paths,
            lambda_c,
            lambda_s,
        })
    }

    pub fn apply<T: Scalar>(&self, ctx: &mut Ctx<T>, maps: &[ValueId]) -> Result<Vec<ValueId>> {
        if maps.len() != self.paths.len() {
            return Err(CoreError::mismatch(
                "CmFrm::apply",
                format!("expected {} modality maps, got {}", self.paths.len(), maps.len()),
            ));
        }
        let shape = ctx.shape(maps[0]);
        let (b, c) = (shape[0], shape[1]);
        let mut rectified = Vec::with_capacity(maps.len());
        for (m, path) in self.paths.iter().enumerate() {
            let others: Vec<ValueId> = maps
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != m)
                .map(|(_, &id)| id)
                .collect();
            let others = if others.len() == 1 {
                others[0]
            } else {
                ctx.tape.concat(&others, 1)?
            };

            let mean = ctx.tape.mean_spatial(others)?;
            let peak = ctx.tape.max_spatial(others)?;
            let gm = path.channel_fc1.apply(ctx, mean)?;
            let gm = ctx.tape.relu(gm)?;
            let gm = path.channel_fc2.apply(ctx, gm)?;
            let gp = path.channel_fc1.apply(ctx, peak)?;
            let gp = ctx.tape.relu(gp)?;
            let gp = path.channel_fc2.apply(ctx, gp)?;
            let gate = ctx.tape.add(gm, gp)?;
            let gate = ctx.tape.sigmoid(gate)?;
            let gate = ctx.tape.reshape(gate, vec![b, c, 1, 1])?;
            let channel_term = ctx.tape.mul_bcast(maps[m], gate)?;

            let s = path.spatial_conv1.apply(ctx, others)?;
            let s = ctx.tape.relu(s)?;
            let s = path.spatial_conv2.apply(ctx, s)?;
            let gate = ctx.tape.sigmoid(s)?;
            let spatial_term = ctx.tape.mul_bcast(maps[m], gate)?;

            let channel_term = ctx.tape.scale(channel_term, self.lambda_c)?;
            let spatial_term = ctx.tape.scale(spatial_term, self.lambda_s)?;
            let correction = ctx.tape.add(channel_term, spatial_term)?;
            rectified.push(ctx.tape.add(maps[m], correction)?);
        }
        Ok(rectified)
    }

    fn macs<T: Scalar>(&self, store: &ParamStore<T>, h: usize, w: usize) -> u128 {
        self.paths
            .iter()
            .map(|p| {
                2 * (p.channel_fc1.macs(store, 1) + p.channel_fc2.macs(store, 1))
                    + p.spatial_conv1.macs(store, h, w)
                    + p.spatial_conv2.macs(store, h, w)
            })
            .sum()
    }
}

/// Cross-modal fusion. Each modality's tokens attend to the concatenated
/// tokens of the other modalities on a residual path; the exchanged
/// streams are channel-concatenated and projected back to the stage width.
pub struct Ffm {
    branches: Vec<FfmBranch>,
    fuse_fc1: Linear,
    fuse_fc2: Linear,
}

struct FfmBranch {
    norm: LayerNorm,
    attn: Attention,
}

impl Ffm {
    pub fn new(
        store: &mut ParamStore<impl Scalar>,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
        modality_names: &[&str],
    ) -> Result<Self> {
        let n = modality_names.len();
        if !(2..=3).contains(&n) {
            return Err(CoreError::invalid(
                "Ffm::new",
                format!("{name}: fusion needs 2 or 3 modalities, got {n}"),
            ));
        }
        let mut branches = Vec::with_capacity(n);
        for modality in modality_names {
            let base = format!("{name}.{modality}");
            branches.push(FfmBranch {
                norm: LayerNorm::new(store, rng, &format!("{base}.norm"), dim)?,
                attn: Attention::new(store, rng, &format!("{base}.attn"), dim, heads)?,
            });
        }
        let fuse_fc1 = Linear::new(store, rng, &format!("{name}.fuse.fc1"), dim * n, dim, true)?;
        let fuse_fc2 = Linear::new(store, rng, &format!("{name}.fuse.fc2"), dim, dim, true)?;
        Ok(Ffm {
            branches,
            fuse_fc1,
            fuse_fc2,
        })
    }

    pub fn apply<T: Scalar>(&self, ctx: &mut Ctx<T>, maps: &[ValueId]) -> Result<ValueId> {
        if maps.len() != self.branches.len() {
            return Err(CoreError::mismatch(
                "Ffm::apply",
                format!("expected {} modality maps, got {}", self.branches.len(), maps.len()),
            ));
        }
        let shape = ctx.shape(maps[0]);
        let (h, w) = (shape[2], shape[3]);
        let tokens: Vec<ValueId> = maps
            .iter()
            .map(|&m| tokens_from_map(ctx, m))
            .collect::<Result<_>>()?;
        let normed: Vec<ValueId> = self
            .branches
            .iter()
            .zip(&tokens)
            .map(|(branch, &t)| branch.norm.apply(ctx, t))
            .collect::<Result<_>>()?;
        let mut exchanged = Vec::with_capacity(tokens.len());
        for (m, branch) in self.branches.iter().enumerate() {
            let others: Vec<ValueId> = normed
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != m)
                .map(|(_, &id)| id)
                .collect();
            let kv = if others.len() == 1 {
                others[0]
            } else {
                ctx.tape.concat(&others, 1)?
            };
            let attended = branch.attn.apply(ctx, normed[m], kv)?;
            exchanged.push(ctx.tape.add(tokens[m], attended)?);
        }
        let cat = ctx.tape.concat(&exchanged, 2)?;
        let f = self.fuse_fc1.apply(ctx, cat)?;
        let f = ctx.tape.gelu(f)?;
        let f = self.fuse_fc2.apply(ctx, f)?;
        map_from_tokens(ctx, f, h, w)
    }

    fn macs<T: Scalar>(&self, store: &ParamStore<T>, h: usize, w: usize) -> u128 {
        let n_tokens = h * w;
        let kv_tokens = n_tokens * (self.branches.len() - 1);
        let exchange: u128 = self
            .branches
            .iter()
            .map(|b| b.attn.macs(n_tokens, kv_tokens))
            .sum();
        exchange + self.fuse_fc1.macs(store, n_tokens) + self.fuse_fc2.macs(store, n_tokens)
    }
}

struct ModalityStream {
    embed: Embed,
    blocks: Vec<TransformerBlock>,
    norm: LayerNorm,
}

struct EncoderStage {
    streams: Vec<ModalityStream>,
    frm: Option<CmFrm>,
    ffm: Option<Ffm>,
    kernel: usize,
    stride: usize,
    pad: usize,
}

impl EncoderStage {
    fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (
            conv_out(h, self.kernel, self.stride, self.pad),
            conv_out(w, self.kernel, self.stride, self.pad),
        )
    }
}

/// The full per-modality encoder pyramid.
pub struct Encoder {
    stages: Vec<EncoderStage>,
}

impl Encoder {
    pub fn new(
        store: &mut ParamStore<impl Scalar>,
        rng: &mut ChaCha8Rng,
        config: &ModelConfig,
    ) -> Result<Self> {
        let modality_names: Vec<&str> = config.modalities.iter().map(|m| m.as_str()).collect();
        let multi = modality_names.len() >= 2;
        let mut stages = Vec::with_capacity(config.embed_dims.len());
        for s in 0..config.embed_dims.len() {
            let tag = format!("enc.s{}", s + 1);
            let c_in = if s == 0 { 3 } else { config.embed_dims[s - 1] };
            let dim = config.embed_dims[s];
            let kernel = config.patch_kernels[s];
            let stride = config.patch_strides[s];
            let pad = kernel / 2;
            let mut streams = Vec::with_capacity(modality_names.len());
            for modality in &modality_names {
                let base = format!("{tag}.{modality}");
                let embed = if s == 0 {
                    Embed::Deform(DeformEmbed::new(
                        store,
                        rng,
                        &format!("{base}.embed"),
                        c_in,
                        dim,
                        kernel,
                        stride,
                        pad,
                        config.clamp_divisor,
                    )?)
                } else {
                    Embed::Overlap(OverlapPatchEmbed::new(
                        store,
                        rng,
                        &format!("{base}.embed"),
                        c_in,
                        dim,
                        kernel,
                        stride,
                        pad,
                    )?)
                };
                let blocks = (0..config.block_depths[s])
                    .map(|b| {
                        TransformerBlock::new(
                            store,
                            rng,
                            &format!("{base}.b{b}"),
                            dim,
                            config.attention_heads[s],
                            config.sr_ratios[s],
                            config.mlp_ratio,
                        )
                    })
                    .collect::<Result<_>>()?;
                let norm = LayerNorm::new(store, rng, &format!("{base}.norm"), dim)?;
                streams.push(ModalityStream {
                    embed,
                    blocks,
                    norm,
                });
            }
            let frm = if multi {
                Some(CmFrm::new(
                    store,
                    rng,
                    &format!("{tag}.frm"),
                    dim,
                    &modality_names,
                    config.lambda_c,
                    config.lambda_s,
                )?)
            } else {
                None
            };
            let ffm = if multi {
                Some(Ffm::new(
                    store,
                    rng,
                    &format!("{tag}.ffm"),
                    dim,
                    config.attention_heads[s],
                    &modality_names,
                )?)
            } else {
                None
            };
            stages.push(EncoderStage {
                streams,
                frm,
                ffm,
                kernel,
                stride,
                pad,
            });
        }
        Ok(Encoder { stages })
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    /// One input map (B, 3, H, W) per modality, in configuration order.
    pub fn encode<T: Scalar>(&self, ctx: &mut Ctx<T>, inputs: &[ValueId]) -> Result<Vec<StageFeatures>> {
        let n = self.stages[0].streams.len();
        if inputs.len() != n {
            return Err(CoreError::mismatch(
                "Encoder::encode",
                format!("expected {n} modality inputs, got {}", inputs.len()),
            ));
        }
        let mut current = inputs.to_vec();
        let mut out = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let mut maps = Vec::with_capacity(n);
            for (stream, &x) in stage.streams.iter().zip(&current) {
                let (mut tokens, h, w) = stream.embed.apply(ctx, x)?;
                for block in &stream.blocks {
                    tokens = block.apply(ctx, tokens, h, w)?;
                }
                let tokens = stream.norm.apply(ctx, tokens)?;
                maps.push(map_from_tokens(ctx, tokens, h, w)?);
            }
            let rectified = match &stage.frm {
                Some(frm) => frm.apply(ctx, &maps)?,
                None => maps.clone(),
            };
            let fused = match &stage.ffm {
                Some(ffm) => ffm.apply(ctx, &rectified)?,
                None => rectified[0],
            };
            current = rectified.clone();
            out.push(StageFeatures {
                per_modality: maps,
                rectified,
                fused,
            });
        }
        Ok(out)
    }

    /// Multiply-accumulate count of one forward pass at batch 1, along
    /// with the per-stage fused output extents.
    pub fn count_macs<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        in_h: usize,
        in_w: usize,
    ) -> (u128, Vec<(usize, usize)>) {
        let mut total = 0u128;
        let mut dims = Vec::with_capacity(self.stages.len());
        let (mut h, mut w) = (in_h, in_w);
        for stage in &self.stages {
            let (oh, ow) = stage.out_dims(h, w);
            for stream in &stage.streams {
                total += stream.embed.macs(store, oh, ow);
                for block in &stream.blocks {
                    total += block.macs(store, oh, ow);
                }
            }
            if let Some(frm) = &stage.frm {
                total += frm.macs(store, oh, ow);
            }
            if let Some(ffm) = &stage.ffm {
                total += ffm.macs(store, oh, ow);
            }
            dims.push((oh, ow));
            h = oh;
            w = ow;
        }
        (total, dims)
    }
}
