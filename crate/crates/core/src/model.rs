//! Model assembly: configuration, parameter registration, forward pass,
//! checkpointing, and cost accounting.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use panofuse_tensor::{Scalar, Tape, Tensor, ValueId};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{Decoder, DecoderConfig};
use crate::encoder::Encoder;
use crate::layers::Ctx;
use crate::params::{read_checkpoint, write_checkpoint, ParamStore};
use crate::{CoreError, Result};

/// Input streams the network can consume. Every stream enters as a
/// 3-channel map; depth is replicated across channels upstream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Rgb,
    Depth,
    Normal,
    Hha,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::Rgb, Modality::Depth, Modality::Normal, Modality::Hha];

    pub fn as_str(&self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Depth => "depth",
            Modality::Normal => "normal",
            Modality::Hha => "hha",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rgb" => Ok(Modality::Rgb),
            "depth" => Ok(Modality::Depth),
            "normal" => Ok(Modality::Normal),
            "hha" => Ok(Modality::Hha),
            other => Err(CoreError::invalid(
                "Modality::from_str",
                format!("unknown modality {other:?}; expected rgb, depth, normal, or hha"),
            )),
        }
    }
}

/// Full network configuration. Stage vectors must share one length; the
/// default is the four-stage pyramid halving resolution per stage after an
/// initial 1/4 embed.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub modalities: Vec<Modality>,
    pub num_classes: usize,
    pub embed_dims: Vec<usize>,
    pub block_depths: Vec<usize>,
    pub attention_heads: Vec<usize>,
    pub sr_ratios: Vec<usize>,
    pub patch_kernels: Vec<usize>,
    pub patch_strides: Vec<usize>,
    pub mlp_ratio: usize,
    /// Offset clamp divisor r: deformable offsets stay within ±H/r, ±W/r.
    pub clamp_divisor: usize,
    pub lambda_c: f64,
    pub lambda_s: f64,
    pub decode_dim: usize,
    pub dmlp_offset_range: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            modalities: vec![Modality::Rgb],
            num_classes: 2,
            embed_dims: vec![32, 64, 160, 256],
            block_depths: vec![2, 2, 2, 2],
            attention_heads: vec![1, 2, 5, 8],
            sr_ratios: vec![8, 4, 2, 1],
            patch_kernels: vec![7, 3, 3, 3],
            patch_strides: vec![4, 2, 2, 2],
            mlp_ratio: 4,
            clamp_divisor: 4,
            lambda_c: 0.5,
            lambda_s: 0.5,
            decode_dim: 128,
            dmlp_offset_range: 8.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        const OP: &str = "ModelConfig::validate";
        let fail = |reason: String| Err(CoreError::invalid(OP, reason));
        if self.modalities.is_empty() || self.modalities.len() > 3 {
            return fail(format!(
                "modality count must be 1 to 3, got {}",
                self.modalities.len()
            ));
        }
        for (i, m) in self.modalities.iter().enumerate() {
            if self.modalities[..i].contains(m) {
                return fail(format!("modality {m} listed twice"));
            }
        }
        let stages = self.embed_dims.len();
        if !(1..=4).contains(&stages) {
            return fail(format!("stage count must be 1 to 4, got {stages}"));
        }
        for (name, len) in [
            ("block_depths", self.block_depths.len()),
            ("attention_heads", self.attention_heads.len()),
            ("sr_ratios", self.sr_ratios.len()),
            ("patch_kernels", self.patch_kernels.len()),
            ("patch_strides", self.patch_strides.len()),
        ] {
            if len != stages {
                return fail(format!("{name} has {len} entries, expected {stages}"));
            }
        }
        for s in 0..stages {
            if self.embed_dims[s] == 0 {
                return fail(format!("stage {s} embed dim is zero"));
            }
            if self.block_depths[s] == 0 {
                return fail(format!("stage {s} has no blocks"));
            }
            if self.attention_heads[s] == 0
                || self.embed_dims[s] % self.attention_heads[s] != 0
            {
                return fail(format!(
                    "stage {s}: dim {} not divisible by {} heads",
                    self.embed_dims[s], self.attention_heads[s]
                ));
            }
            if self.sr_ratios[s] == 0 {
                return fail(format!("stage {s} spatial reduction ratio is zero"));
            }
            let (k, st) = (self.patch_kernels[s], self.patch_strides[s]);
            if st == 0 || k < st || k % 2 == 0 {
                return fail(format!(
                    "stage {s}: patch kernel {k} must be odd and at least the stride {st}"
                ));
            }
        }
        if self.mlp_ratio == 0 {
            return fail("mlp_ratio must be positive".to_string());
        }
        if self.clamp_divisor == 0 {
            return fail("clamp_divisor must be positive".to_string());
        }
        if !(self.lambda_c.is_finite() && self.lambda_s.is_finite()) {
            return fail("mixing weights must be finite".to_string());
        }
        self.decoder().validate()
    }

    pub fn decoder(&self) -> DecoderConfig {
        DecoderConfig {
            decode_dim: self.decode_dim,
            num_classes: self.num_classes,
            dmlp_offset_range: self.dmlp_offset_range,
        }
    }

    /// Product of the stage strides: input extents must be divisible by
    /// this for the resolution ladder to hold exactly.
    pub fn downsample_factor(&self) -> usize {
        self.patch_strides.iter().product()
    }
}

/// The assembled network. Parameters live in a [`ParamStore`]; a forward
/// pass leafs them onto a tape so gradients reach every parameter.
pub struct Model<T: Scalar> {
    config: ModelConfig,
    store: ParamStore<T>,
    encoder: Encoder,
    decoder: Decoder,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::new(&mut store, &mut rng, &config)?;
        let decoder = Decoder::new(
            &mut store,
            &mut rng,
            &config.decoder(),
            &config.embed_dims,
            config.clamp_divisor,
        )?;
        Ok(Model {
            config,
            store,
            encoder,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    /// Leafs every parameter onto the tape, in store order.
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<ValueId> {
        crate::layers::bind_params(tape, &self.store)
    }

    fn check_inputs(&self, tape: &Tape<T>, inputs: &[ValueId]) -> Result<(usize, usize)> {
        const OP: &str = "Model::forward";
        if inputs.len() != self.config.modalities.len() {
            return Err(CoreError::mismatch(
                OP,
                format!(
                    "expected {} modality inputs ({:?}), got {}",
                    self.config.modalities.len(),
                    self.config.modalities,
                    inputs.len()
                ),
            ));
        }
        let first = tape.value(inputs[0]).shape().to_vec();
        if first.len() != 4 || first[1] != 3 {
            return Err(CoreError::mismatch(
                OP,
                format!("inputs must be (batch, 3, h, w), got {first:?}"),
            ));
        }
        for &x in &inputs[1..] {
            let shape = tape.value(x).shape();
            if shape != first.as_slice() {
                return Err(CoreError::mismatch(
                    OP,
                    format!("modality shapes disagree: {first:?} vs {shape:?}"),
                ));
            }
        }
        let (h, w) = (first[2], first[3]);
        let factor = self.config.downsample_factor().max(4);
        if h == 0 || w == 0 || h % factor != 0 || w % factor != 0 {
            return Err(CoreError::invalid(
                OP,
                format!("input {h}x{w} must be a positive multiple of {factor}"),
            ));
        }
        Ok((h, w))
    }

    /// Forward pass over already-leafed parameters and inputs. Returns
    /// logits (B, num_classes, H, W).
    pub fn forward_bound(
        &self,
        tape: &mut Tape<T>,
        param_ids: &[ValueId],
        inputs: &[ValueId],
    ) -> Result<ValueId> {
        let (h, w) = self.check_inputs(tape, inputs)?;
        let mut ctx = Ctx::new(tape, param_ids);
        let features = self.encoder.encode(&mut ctx, inputs)?;
        let fused: Vec<ValueId> = features.iter().map(|f| f.fused).collect();
        self.decoder.decode(&mut ctx, &fused, h, w)
    }

    /// Convenience forward from tensors: binds parameters, leafs inputs,
    /// and returns (parameter ids, logits id).
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        inputs: &[Tensor<T>],
    ) -> Result<(Vec<ValueId>, ValueId)> {
        let param_ids = self.bind(tape);
        let input_ids: Vec<ValueId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let logits = self.forward_bound(tape, &param_ids, &input_ids)?;
        Ok((param_ids, logits))
    }

    /// Multiply-accumulate count of one forward pass at batch 1 for the
    /// given input extents. Counts convolutions, linear projections, and
    /// attention matrix products; elementwise and sampling work is
    /// excluded. One MAC is two floating-point operations.
    pub fn count_macs(&self, h: usize, w: usize) -> Result<u128> {
        const OP: &str = "Model::count_macs";
        let factor = self.config.downsample_factor().max(4);
        if h == 0 || w == 0 || h % factor != 0 || w % factor != 0 {
            return Err(CoreError::invalid(
                OP,
                format!("input {h}x{w} must be a positive multiple of {factor}"),
            ));
        }
        let (enc, stage_dims) = self.encoder.count_macs(&self.store, h, w);
        let dec = self.decoder.count_macs(&self.store, &stage_dims, h, w);
        Ok(enc + dec)
    }

    /// Writes config plus parameters; [`Model::load`] restores bit-exactly
    /// at verify grade.
    pub fn save(&self, path: &Path) -> Result<()> {
        let config = serde_json::to_value(&self.config)?;
        write_checkpoint(path, &config, &self.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let data = read_checkpoint(path)?;
        let config: ModelConfig = serde_json::from_value(data.config.clone())?;
        let mut model = Model::new(config, 0)?;
        model.store.load_values(&data)?;
        Ok(model)
    }
}
