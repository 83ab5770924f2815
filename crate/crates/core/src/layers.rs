//! Reusable parametric layers over the autodiff tape.
//!
//! Layers hold `ParamId`s into a `ParamStore`; a forward pass first leafs
//! every parameter onto the tape (in store order) and layers fetch their
//! values through [`Ctx`]. This keeps one code path for training,
//! inference, and gradient checking: a gradient check simply supplies its
//! own perturbed leaf values in place of the store's.

use panofuse_tensor::ops::WindowGeom;
use panofuse_tensor::{Scalar, Tape, ValueId};
use rand_chacha::ChaCha8Rng;

use crate::params::{Init, ParamId, ParamStore};
use crate::Result;

/// Forward-pass context: the tape being built plus the tape ids of every
/// parameter, indexed by `ParamId`.
pub struct Ctx<'a, T: Scalar> {
    pub tape: &'a mut Tape<T>,
    param_ids: &'a [ValueId],
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, param_ids: &'a [ValueId]) -> Self {
        Ctx { tape, param_ids }
    }

    pub fn param(&self, id: ParamId) -> ValueId {
        self.param_ids[id.0]
    }

    pub fn shape(&self, value: ValueId) -> Vec<usize> {
        self.tape.value(value).shape().to_vec()
    }
}

/// Leafs every parameter in store order; the returned ids align with
/// `ParamId` indexes and with the gradient queries after backward.
pub fn bind_params<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>) -> Vec<ValueId> {
    (0..store.len())
        .map(|i| tape.leaf(store.get_index(i).clone()))
        .collect()
}

/// Fully connected layer computing y = x · Wᵀ + b over the trailing axis.
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore<impl Scalar>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Result<Self> {
        let w = store.register(
            format!("{name}.weight"),
            vec![out_dim, in_dim],
            Init::HeNormal { fan_in: in_dim },
            rng,
        )?;
        let b = if bias {
            Some(store.register(format!("{name}.bias"), vec![out_dim], Init::Zeros, rng)?)
        } else {
            None
        };
        Ok(Linear { w, b })
    }

    pub fn apply<T: Scalar>(&self, ctx: &mut Ctx<T>, x: ValueId) -> Result<ValueId> {
        let w = ctx.param(self.w);
        let b = self.b.map(|b| ctx.param(b));
        Ok(ctx.tape.linear(x, w, b)?)
    }
}

/// 2D convolution with an owned window geometry and group count.
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub geom: WindowGeom,
    pub groups: usize,
}

impl Conv2d {
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
        groups: usize,
        bias: bool,
        init: Init,
    ) -> Result<Self> {
        let w = store.register(
            format!("{name}.weight"),
            vec![c_out, c_in / groups, kernel, kernel],
            init,
            rng,
        )?;
        let b = if bias {
            Some(store.register(format!("{name}.bias"), vec![c_out], Init::Zeros, rng)?)
        } else {
            None
        };
        Ok(Conv2d {
            w,
            b,
            geom: WindowGeom::square(kernel, stride, pad),
            groups,
        })
    }

    /// He-initialized convolution; fan_in is (c_in / groups) · k².
    #[allow(clippy::too_many_arguments)]
    pub fn he(
        store: &mut ParamStore<impl Scalar>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        groups: usize,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = (c_in / groups) * kernel * kernel;
        Conv2d::new(
            store,
            rng,
            name,
            c_in,
            c_out,
            kernel,
            stride,
            pad,
            groups,
            bias,
            Init::HeNormal { fan_in },
        )
    }

    pub fn apply<T: Scalar>(&self, ctx: &mut Ctx<T>, x: ValueId) -> Result<ValueId> {
        let w = ctx.param(self.w);
        let b = self.b.map(|b| ctx.param(b));
        Ok(ctx.tape.conv2d(x, w, b, self.geom, self.groups)?)
    }

    /// Multiply-accumulate count at the given output extents.
    pub fn macs<T: Scalar>(&self, store: &ParamStore<T>, out_h: usize, out_w: usize) -> u128 {
        let w = store.get(self.w).shape().to_vec();
        let (c_out, c_in_per_group, kh, kw) = (w[0], w[1], w[2], w[3]);
        (c_out as u128)
            * (c_in_per_group as u128)
            * (kh as u128)
            * (kw as u128)
            * (out_h as u128)
            * (out_w as u128)
    }
}

impl Linear {
    /// Multiply-accumulate count for one application over `positions` rows.
    pub fn macs<T: Scalar>(&self, store: &ParamStore<T>, positions: usize) -> u128 {
        let w = store.get(self.w).shape().to_vec();
        (w[0] as u128) * (w[1] as u128) * (positions as u128)
    }
}

/// Convolution output extent for one axis.
pub fn conv_out(extent: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (extent + 2 * pad - kernel) / stride + 1
}

/// Layer normalization over the trailing axis with learned gain and shift.
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(
        store: &mut ParamStore<impl Scalar>,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
    ) -> Result<Self> {
        let gain = store.register(format!("{name}.gain"), vec![dim], Init::Ones, rng)?;
        let shift = store.register(format!("{name}.shift"), vec![dim], Init::Zeros, rng)?;
        Ok(LayerNorm {
            gain,
            shift,
            eps: 1e-6,
        })
    }

    pub fn apply<T: Scalar>(&self, ctx: &mut Ctx<T>, x: ValueId) -> Result<ValueId> {
        let gain = ctx.param(self.gain);
        let shift = ctx.param(self.shift);
        Ok(ctx.tape.layer_norm(x, gain, shift, self.eps)?)
    }
}

/// (B, C, H, W) map → (B, H·W, C) token matrix.
pub fn tokens_from_map<T: Scalar>(ctx: &mut Ctx<T>, x: ValueId) -> Result<ValueId> {
    let shape = ctx.shape(x);
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let flat = ctx.tape.reshape(x, vec![b, c, h * w])?;
    Ok(ctx.tape.permute(flat, &[0, 2, 1])?)
}

/// (B, H·W, C) token matrix → (B, C, H, W) map.
pub fn map_from_tokens<T: Scalar>(
    ctx: &mut Ctx<T>,
    x: ValueId,
    h: usize,
    w: usize,
) -> Result<ValueId> {
    let shape = ctx.shape(x);
    let (b, c) = (shape[0], shape[2]);
    let t = ctx.tape.permute(x, &[0, 2, 1])?;
    Ok(ctx.tape.reshape(t, vec![b, c, h, w])?)
}

/// Multi-head scaled dot-product attention. Queries and keys/values may
/// come from different token matrices (self-attention passes the same id
/// twice is not allowed by the tape; pass distinct upstream nodes).
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl Attention {
    pub fn new(
        store: &mut ParamStore<impl Scalar>,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(crate::CoreError::invalid(
                "Attention::new",
                format!("{name}: dim {dim} not divisible by heads {heads}"),
            ));
        }
        Ok(Attention {
            q: Linear::new(store, rng, &format!("{name}.q"), dim, dim, true)?,
            k: Linear::new(store, rng, &format!("{name}.k"), dim, dim, true)?,
            v: Linear::new(store, rng, &format!("{name}.v"), dim, dim, true)?,
            o: Linear::new(store, rng, &format!("{name}.out"), dim, dim, true)?,
            heads,
            dim,
        })
    }

    /// Splits (B, N, C) into (B·heads, N, C/heads).
    fn split_heads<T: Scalar>(&self, ctx: &mut Ctx<T>, x: ValueId) -> Result<ValueId> {
        let shape = ctx.shape(x);
        let (b, n, c) = (shape[0], shape[1], shape[2]);
        let dh = c / self.heads;
        let x = ctx.tape.reshape(x, vec![b, n, self.heads, dh])?;
        let x = ctx.tape.permute(x, &[0, 2, 1, 3])?;
        Ok(ctx.tape.reshape(x, vec![b * self.heads, n, dh])?)
    }

    fn join_heads<T: Scalar>(&self, ctx: &mut Ctx<T>, x: ValueId, b: usize) -> Result<ValueId> {
        let shape = ctx.shape(x);
        let (n, dh) = (shape[1], shape[2]);
        let x = ctx.tape.reshape(x, vec![b, self.heads, n, dh])?;
        let x = ctx.tape.permute(x, &[0, 2, 1, 3])?;
        Ok(ctx.tape.reshape(x, vec![b, n, self.heads * dh])?)
    }

    /// queries (B, N, C) attend to keys/values (B, M, C); output (B, N, C).
    pub fn apply<T: Scalar>(
        &self,
        ctx: &mut Ctx<T>,
        queries: ValueId,
        keys_values: ValueId,
    ) -> Result<ValueId> {
        let b = ctx.shape(queries)[0];
        let q = self.q.apply(ctx, queries)?;
        let k = self.k.apply(ctx, keys_values)?;
        let v = self.v.apply(ctx, keys_values)?;
        let q = self.split_heads(ctx, q)?;
        let k = self.split_heads(ctx, k)?;
        let v = self.split_heads(ctx, v)?;
        let dh = self.dim / self.heads;
        let scores = ctx.tape.bmm(q, k, true)?;
        let scores = ctx.tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let weights = ctx.tape.softmax(scores)?;
        let mixed = ctx.tape.bmm(weights, v, false)?;
        let joined = self.join_heads(ctx, mixed, b)?;
        self.o.apply(ctx, joined)
    }

    /// MACs for one application: Q/K/V/O projections plus the two
    /// attention matrix products.
    pub fn macs(&self, n_queries: usize, n_keys: usize) -> u128 {
        let c = self.dim as u128;
        let n = n_queries as u128;
        let m = n_keys as u128;
        let proj = c * c * (2 * n + 2 * m);
        let qk_av = 2 * n * m * c;
        proj + qk_av
    }
}

/// Patch embedding with learned sampling offsets. A small convolution
/// predicts one (dy, dx) pair per output location; offsets are clamped to
/// ±height/clamp_divisor and ±width/clamp_divisor of the sampled tensor,
/// shared across the window taps, and the gathered window is projected to
/// the output width by a 1×1 convolution. The offset predictor starts at
/// zero, so a fresh embed equals a plain strided convolution whose borders
/// wrap horizontally and clamp vertically.
pub struct DeformEmbed {
    pub offset: Conv2d,
    pub proj: Conv2d,
    geom: WindowGeom,
    taps: usize,
    clamp_divisor: f64,
}

impl DeformEmbed {
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
        clamp_divisor: usize,
    ) -> Result<Self> {
        if clamp_divisor == 0 {
            return Err(crate::CoreError::invalid(
                "DeformEmbed::new",
                format!("{name}: clamp divisor must be positive"),
            ));
        }
        let offset = Conv2d::new(
            store,
            rng,
            &format!("{name}.offset"),
            c_in,
            2,
            kernel,
            stride,
            pad,
            1,
            true,
            Init::Zeros,
        )?;
        let proj = Conv2d::he(
            store,
            rng,
            &format!("{name}.proj"),
            c_in * kernel * kernel,
            c_out,
            1,
            1,
            0,
            1,
            true,
        )?;
        Ok(DeformEmbed {
            offset,
            proj,
            geom: WindowGeom::square(kernel, stride, pad),
            taps: kernel * kernel,
            clamp_divisor: clamp_divisor as f64,
        })
    }

    pub fn apply<T: Scalar>(&self, ctx: &mut Ctx<T>, x: ValueId) -> Result<ValueId> {
        let shape = ctx.shape(x);
        let (h, w) = (shape[2], shape[3]);
        let raw = self.offset.apply(ctx, x)?;
        let clamped = ctx.tape.clamp_pairs(
            raw,
            h as f64 / self.clamp_divisor,
            w as f64 / self.clamp_divisor,
        )?;
        let tiled = ctx.tape.concat(&vec![clamped; self.taps], 1)?;
        let gathered = ctx.tape.deform_sample(x, tiled, self.geom, 1)?;
        self.proj.apply(ctx, gathered)
    }

    /// Offsets after clamping, for inspection in tests. Shape (B, 2, H', W').
    pub fn offsets<T: Scalar>(&self, ctx: &mut Ctx<T>, x: ValueId) -> Result<ValueId> {
        let shape = ctx.shape(x);
        let (h, w) = (shape[2], shape[3]);
        let raw = self.offset.apply(ctx, x)?;
        Ok(ctx.tape.clamp_pairs(
            raw,
            h as f64 / self.clamp_divisor,
            w as f64 / self.clamp_divisor,
        )?)
    }

    pub fn macs<T: Scalar>(&self, store: &ParamStore<T>, out_h: usize, out_w: usize) -> u128 {
        self.offset.macs(store, out_h, out_w) + self.proj.macs(store, out_h, out_w)
    }
}
