//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] is an append-only arena of values. Every operation validates
//! its operands, runs the forward kernel, checks the result for non-finite
//! values, and records what it did. [`Tape::backward`] replays the records in
//! reverse, accumulating `f64` gradients regardless of the tape's storage
//! type.
//!
//! Operands are addressed by [`ValueId`]; an operation's inputs always have
//! smaller ids than its output, so one reverse sweep visits every node after
//! all of its consumers.

use crate::error::TensorError;
use crate::ops::conv::{conv2d_backward, conv2d_forward, ConvPlan};
use crate::ops::dense::{bmm_backward, bmm_forward, linear_backward, linear_forward};
use crate::ops::eltwise::{
    clamp_pairs_backward, clamp_pairs_forward, mul_bcast_backward, mul_bcast_forward,
    unary_backward, unary_forward, UnaryKind,
};
use crate::ops::loss::{cross_entropy_backward, cross_entropy_forward};
use crate::ops::norm::{layer_norm_backward, layer_norm_forward, softmax_backward, softmax_forward};
use crate::ops::pool::{
    avg_pool_backward, avg_pool_forward, max_spatial_backward, max_spatial_forward,
    mean_spatial_backward, mean_spatial_forward, PoolPlan,
};
use crate::ops::resize::{bilinear_resize_backward, bilinear_resize_forward};
use crate::ops::sample::{deform_sample_backward, deform_sample_forward, SamplePlan};
use crate::ops::WindowGeom;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::Result;

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValueId(usize);

impl ValueId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Integer class labels for the fused cross-entropy op. Kept separate from
/// [`Tensor`] because labels are indices, not differentiable values.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Labels {
    pub shape: Vec<usize>,
    pub data: Vec<u32>,
}

impl Labels {
    pub fn new(shape: Vec<usize>, data: Vec<u32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(TensorError::LengthMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Labels { shape, data })
    }
}

enum Op {
    Leaf,
    Unary { x: ValueId, kind: UnaryKind },
    ClampPairs { x: ValueId, bound_even: f64, bound_odd: f64 },
    Add { a: ValueId, b: ValueId },
    Sub { a: ValueId, b: ValueId },
    Mul { a: ValueId, b: ValueId },
    MulBcast { a: ValueId, b: ValueId },
    Linear { x: ValueId, w: ValueId, b: Option<ValueId> },
    Conv2d { x: ValueId, w: ValueId, b: Option<ValueId>, geom: WindowGeom, groups: usize },
    DeformSample { x: ValueId, offsets: ValueId, geom: WindowGeom, groups: usize },
    AvgPool { x: ValueId, geom: WindowGeom },
    LayerNorm { x: ValueId, gain: ValueId, shift: ValueId, eps: f64 },
    Softmax { x: ValueId },
    BilinearResize { x: ValueId },
    Reshape { x: ValueId },
    Permute { x: ValueId, perm: Vec<usize> },
    Concat { parts: Vec<ValueId>, axis: usize },
    Bmm { a: ValueId, b: ValueId, transpose_b: bool },
    MeanSpatial { x: ValueId },
    MaxSpatial { x: ValueId, argmax: Vec<usize> },
    SumAll { x: ValueId },
    CrossEntropy { logits: ValueId, labels: Labels, ignore_index: u32, n_valid: usize },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op,
}

/// Gradient tape over scalars of type `T`.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<f64>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input value without an originating operation.
    pub fn leaf(&mut self, value: Tensor<T>) -> ValueId {
        self.push(value, Op::Leaf)
    }

    /// The tensor held by a node. Panics on a foreign id; ids returned by
    /// this tape are always valid.
    pub fn value(&self, id: ValueId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op) -> ValueId {
        self.nodes.push(Node { value, op });
        self.grads.push(None);
        ValueId(self.nodes.len() - 1)
    }

    fn check(&self, op: &'static str, id: ValueId) -> Result<&Tensor<T>> {
        self.nodes
            .get(id.0)
            .map(|n| &n.value)
            .ok_or_else(|| TensorError::invalid(op, format!("value id {} not on this tape", id.0)))
    }

    fn finish(&mut self, op: &'static str, value: Tensor<T>, record: Op) -> Result<ValueId> {
        if let Some(index) = value.find_non_finite() {
            return Err(TensorError::NonFinite { op, index });
        }
        Ok(self.push(value, record))
    }

    fn distinct(op: &'static str, ids: &[ValueId]) -> Result<()> {
        for (i, a) in ids.iter().enumerate() {
            if ids[i + 1..].contains(a) {
                return Err(TensorError::invalid(
                    op,
                    "aliased operands are not supported here".to_string(),
                ));
            }
        }
        Ok(())
    }

    fn same_shape(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
        if a.shape() != b.shape() {
            return Err(TensorError::shape(
                op,
                format!("{:?} vs {:?}", a.shape(), b.shape()),
            ));
        }
        Ok(())
    }

    fn unary(&mut self, name: &'static str, kind: UnaryKind, x: ValueId) -> Result<ValueId> {
        let xv = self.check(name, x)?;
        let out = unary_forward(kind, xv);
        self.finish(name, out, Op::Unary { x, kind })
    }

    pub fn relu(&mut self, x: ValueId) -> Result<ValueId> {
        self.unary("relu", UnaryKind::Relu, x)
    }

    pub fn gelu(&mut self, x: ValueId) -> Result<ValueId> {
        self.unary("gelu", UnaryKind::Gelu, x)
    }

    pub fn sigmoid(&mut self, x: ValueId) -> Result<ValueId> {
        self.unary("sigmoid", UnaryKind::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: ValueId) -> Result<ValueId> {
        self.unary("tanh", UnaryKind::Tanh, x)
    }

    pub fn clamp(&mut self, x: ValueId, lo: f64, hi: f64) -> Result<ValueId> {
        if lo > hi {
            return Err(TensorError::invalid(
                "clamp",
                format!("lower bound {lo} exceeds upper bound {hi}"),
            ));
        }
        self.unary("clamp", UnaryKind::Clamp { lo, hi }, x)
    }

    pub fn scale(&mut self, x: ValueId, c: f64) -> Result<ValueId> {
        self.unary("scale", UnaryKind::Scale(c), x)
    }

    pub fn add_scalar(&mut self, x: ValueId, c: f64) -> Result<ValueId> {
        self.unary("add_scalar", UnaryKind::AddScalar(c), x)
    }

    /// Clamps interleaved `(dy, dx)` offset channel pairs to `[-bound_even,
    /// bound_even]` and `[-bound_odd, bound_odd]` respectively.
    pub fn clamp_pairs(&mut self, x: ValueId, bound_even: f64, bound_odd: f64) -> Result<ValueId> {
        if bound_even < 0.0 || bound_odd < 0.0 {
            return Err(TensorError::invalid(
                "clamp_pairs",
                format!("bounds must be non-negative, got ({bound_even}, {bound_odd})"),
            ));
        }
        let xv = self.check("clamp_pairs", x)?;
        let out = clamp_pairs_forward(xv, bound_even, bound_odd)?;
        self.finish(
            "clamp_pairs",
            out,
            Op::ClampPairs {
                x,
                bound_even,
                bound_odd,
            },
        )
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (av, bv) = (self.check("add", a)?, self.check("add", b)?);
        Self::same_shape("add", av, bv)?;
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| T::from_f64(x.to_f64() + y.to_f64()))
            .collect();
        let out = Tensor::from_vec(av.shape().to_vec(), data)?;
        self.finish("add", out, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (av, bv) = (self.check("sub", a)?, self.check("sub", b)?);
        Self::same_shape("sub", av, bv)?;
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| T::from_f64(x.to_f64() - y.to_f64()))
            .collect();
        let out = Tensor::from_vec(av.shape().to_vec(), data)?;
        self.finish("sub", out, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (av, bv) = (self.check("mul", a)?, self.check("mul", b)?);
        Self::same_shape("mul", av, bv)?;
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| T::from_f64(x.to_f64() * y.to_f64()))
            .collect();
        let out = Tensor::from_vec(av.shape().to_vec(), data)?;
        self.finish("mul", out, Op::Mul { a, b })
    }

    /// Elementwise product where `b` broadcasts onto `a` (extents equal or 1).
    pub fn mul_bcast(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (av, bv) = (self.check("mul_bcast", a)?, self.check("mul_bcast", b)?);
        let out = mul_bcast_forward(av, bv)?;
        self.finish("mul_bcast", out, Op::MulBcast { a, b })
    }

    pub fn linear(&mut self, x: ValueId, w: ValueId, b: Option<ValueId>) -> Result<ValueId> {
        let mut ids = vec![x, w];
        ids.extend(b);
        Self::distinct("linear", &ids)?;
        let xv = self.check("linear", x)?;
        let wv = self.check("linear", w)?;
        let bv = b.map(|b| self.check("linear", b)).transpose()?;
        let out = linear_forward(xv, wv, bv)?;
        self.finish("linear", out, Op::Linear { x, w, b })
    }

    pub fn conv2d(
        &mut self,
        x: ValueId,
        w: ValueId,
        b: Option<ValueId>,
        geom: WindowGeom,
        groups: usize,
    ) -> Result<ValueId> {
        let mut ids = vec![x, w];
        ids.extend(b);
        Self::distinct("conv2d", &ids)?;
        let xv = self.check("conv2d", x)?;
        let wv = self.check("conv2d", w)?;
        let bv = b.map(|b| self.check("conv2d", b)).transpose()?;
        let plan = ConvPlan::new(xv, wv, bv, geom, groups)?;
        let out = conv2d_forward(xv, wv, bv, &plan);
        self.finish(
            "conv2d",
            out,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                groups,
            },
        )
    }

    /// Deformable window gather; see [`crate::ops::sample`] for coordinate
    /// conventions (horizontal wrap, vertical clamp).
    pub fn deform_sample(
        &mut self,
        x: ValueId,
        offsets: ValueId,
        geom: WindowGeom,
        groups: usize,
    ) -> Result<ValueId> {
        Self::distinct("deform_sample", &[x, offsets])?;
        let xv = self.check("deform_sample", x)?;
        let ov = self.check("deform_sample", offsets)?;
        let plan = SamplePlan::new(xv, ov, geom, groups)?;
        let out = deform_sample_forward(xv, ov, &plan);
        self.finish(
            "deform_sample",
            out,
            Op::DeformSample {
                x,
                offsets,
                geom,
                groups,
            },
        )
    }

    pub fn avg_pool(&mut self, x: ValueId, geom: WindowGeom) -> Result<ValueId> {
        let xv = self.check("avg_pool2d", x)?;
        let plan = PoolPlan::new(xv, geom)?;
        let out = avg_pool_forward(xv, &plan);
        self.finish("avg_pool2d", out, Op::AvgPool { x, geom })
    }

    pub fn layer_norm(
        &mut self,
        x: ValueId,
        gain: ValueId,
        shift: ValueId,
        eps: f64,
    ) -> Result<ValueId> {
        Self::distinct("layer_norm", &[x, gain, shift])?;
        let xv = self.check("layer_norm", x)?;
        let gv = self.check("layer_norm", gain)?;
        let sv = self.check("layer_norm", shift)?;
        let out = layer_norm_forward(xv, gv, sv, eps)?;
        self.finish("layer_norm", out, Op::LayerNorm { x, gain, shift, eps })
    }

    /// Softmax over the trailing axis.
    pub fn softmax(&mut self, x: ValueId) -> Result<ValueId> {
        let xv = self.check("softmax", x)?;
        let out = softmax_forward(xv)?;
        self.finish("softmax", out, Op::Softmax { x })
    }

    pub fn bilinear_resize(&mut self, x: ValueId, out_h: usize, out_w: usize) -> Result<ValueId> {
        let xv = self.check("bilinear_resize", x)?;
        let out = bilinear_resize_forward(xv, out_h, out_w)?;
        self.finish("bilinear_resize", out, Op::BilinearResize { x })
    }

    pub fn reshape(&mut self, x: ValueId, shape: impl Into<Vec<usize>>) -> Result<ValueId> {
        let xv = self.check("reshape", x)?;
        let out = xv.reshaped(shape.into())?;
        // Rearranging finite data cannot introduce non-finite values.
        Ok(self.push(out, Op::Reshape { x }))
    }

    pub fn permute(&mut self, x: ValueId, perm: &[usize]) -> Result<ValueId> {
        let xv = self.check("permute", x)?;
        let out = permute_forward(xv, perm)?;
        Ok(self.push(out, Op::Permute { x, perm: perm.to_vec() }))
    }

    pub fn concat(&mut self, parts: &[ValueId], axis: usize) -> Result<ValueId> {
        const OP: &str = "concat";
        if parts.is_empty() {
            return Err(TensorError::invalid(OP, "needs at least one part".to_string()));
        }
        let tensors: Vec<&Tensor<T>> = parts
            .iter()
            .map(|&p| self.check(OP, p))
            .collect::<Result<_>>()?;
        let out = concat_forward(&tensors, axis)?;
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    pub fn bmm(&mut self, a: ValueId, b: ValueId, transpose_b: bool) -> Result<ValueId> {
        Self::distinct("bmm", &[a, b])?;
        let av = self.check("bmm", a)?;
        let bv = self.check("bmm", b)?;
        let out = bmm_forward(av, bv, transpose_b)?;
        self.finish("bmm", out, Op::Bmm { a, b, transpose_b })
    }

    pub fn mean_spatial(&mut self, x: ValueId) -> Result<ValueId> {
        let xv = self.check("mean_spatial", x)?;
        let out = mean_spatial_forward(xv)?;
        self.finish("mean_spatial", out, Op::MeanSpatial { x })
    }

    pub fn max_spatial(&mut self, x: ValueId) -> Result<ValueId> {
        let xv = self.check("max_spatial", x)?;
        let (out, argmax) = max_spatial_forward(xv)?;
        self.finish("max_spatial", out, Op::MaxSpatial { x, argmax })
    }

    pub fn sum_all(&mut self, x: ValueId) -> Result<ValueId> {
        let xv = self.check("sum_all", x)?;
        let total: f64 = xv.data().iter().map(|v| v.to_f64()).sum();
        let out = Tensor::scalar(T::from_f64(total));
        self.finish("sum_all", out, Op::SumAll { x })
    }

    /// Mean cross-entropy of `logits` `(b, c, h, w)` against `labels`
    /// `(b, h, w)`, skipping pixels labelled `ignore_index`.
    pub fn cross_entropy(
        &mut self,
        logits: ValueId,
        labels: Labels,
        ignore_index: u32,
    ) -> Result<ValueId> {
        let lv = self.check("cross_entropy", logits)?;
        let (loss, n_valid) = cross_entropy_forward(lv, &labels, ignore_index)?;
        let out = Tensor::scalar(T::from_f64(loss));
        self.finish(
            "cross_entropy",
            out,
            Op::CrossEntropy {
                logits,
                labels,
                ignore_index,
                n_valid,
            },
        )
    }

    /// Runs the reverse sweep from `loss`, which must be a scalar. Gradients
    /// from a previous sweep are discarded.
    pub fn backward(&mut self, loss: ValueId) -> Result<()> {
        const OP: &str = "backward";
        let lv = self.check(OP, loss)?;
        if lv.numel() != 1 {
            return Err(TensorError::invalid(
                OP,
                format!("loss must be a scalar, got shape {:?}", lv.shape()),
            ));
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let (lo, hi) = self.grads.split_at_mut(i);
            let Some(go) = hi[0].as_deref() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Unary { x, kind } => {
                    unary_backward(*kind, &self.nodes[x.0].value, go, ensure(&self.nodes, lo, x.0));
                }
                Op::ClampPairs {
                    x,
                    bound_even,
                    bound_odd,
                } => {
                    clamp_pairs_backward(
                        &self.nodes[x.0].value,
                        *bound_even,
                        *bound_odd,
                        go,
                        ensure(&self.nodes, lo, x.0),
                    );
                }
                Op::Add { a, b } => {
                    for (g, d) in ensure(&self.nodes, lo, a.0).iter_mut().zip(go) {
                        *g += d;
                    }
                    for (g, d) in ensure(&self.nodes, lo, b.0).iter_mut().zip(go) {
                        *g += d;
                    }
                }
                Op::Sub { a, b } => {
                    for (g, d) in ensure(&self.nodes, lo, a.0).iter_mut().zip(go) {
                        *g += d;
                    }
                    for (g, d) in ensure(&self.nodes, lo, b.0).iter_mut().zip(go) {
                        *g -= d;
                    }
                }
                Op::Mul { a, b } => {
                    {
                        let bv = &self.nodes[b.0].value;
                        for ((g, d), y) in ensure(&self.nodes, lo, a.0).iter_mut().zip(go).zip(bv.data()) {
                            *g += d * y.to_f64();
                        }
                    }
                    let av = &self.nodes[a.0].value;
                    for ((g, d), y) in ensure(&self.nodes, lo, b.0).iter_mut().zip(go).zip(av.data()) {
                        *g += d * y.to_f64();
                    }
                }
                Op::MulBcast { a, b } => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    if a == b {
                        // Same operand on both sides: stage one side, then fold.
                        let ga = ensure(&self.nodes, lo, a.0);
                        let mut tmp = vec![0.0; ga.len()];
                        mul_bcast_backward(av, bv, go, &mut tmp, ga);
                        for (g, t) in ga.iter_mut().zip(&tmp) {
                            *g += t;
                        }
                    } else {
                        ensure(&self.nodes, lo, a.0);
                        ensure(&self.nodes, lo, b.0);
                        let [ga, gb] = grab(lo, [a.0, b.0]);
                        mul_bcast_backward(av, bv, go, ga, gb);
                    }
                }
                Op::Linear { x, w, b } => {
                    ensure(&self.nodes, lo, x.0);
                    ensure(&self.nodes, lo, w.0);
                    if let Some(b) = b {
                        ensure(&self.nodes, lo, b.0);
                    }
                    let (xv, wv) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
                    match b {
                        Some(b) => {
                            let [gx, gw, gb] = grab(lo, [x.0, w.0, b.0]);
                            linear_backward(xv, wv, true, go, gx, gw, Some(gb));
                        }
                        None => {
                            let [gx, gw] = grab(lo, [x.0, w.0]);
                            linear_backward(xv, wv, false, go, gx, gw, None);
                        }
                    }
                }
                Op::Conv2d {
                    x,
                    w,
                    b,
                    geom,
                    groups,
                } => {
                    ensure(&self.nodes, lo, x.0);
                    ensure(&self.nodes, lo, w.0);
                    if let Some(b) = b {
                        ensure(&self.nodes, lo, b.0);
                    }
                    let (xv, wv) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
                    let bv = b.map(|b| &self.nodes[b.0].value);
                    let plan =
                        ConvPlan::new(xv, wv, bv, *geom, *groups).expect("validated in forward");
                    match b {
                        Some(b) => {
                            let [gx, gw, gb] = grab(lo, [x.0, w.0, b.0]);
                            conv2d_backward(xv, wv, &plan, go, gx, gw, Some(gb));
                        }
                        None => {
                            let [gx, gw] = grab(lo, [x.0, w.0]);
                            conv2d_backward(xv, wv, &plan, go, gx, gw, None);
                        }
                    }
                }
                Op::DeformSample {
                    x,
                    offsets,
                    geom,
                    groups,
                } => {
                    ensure(&self.nodes, lo, x.0);
                    ensure(&self.nodes, lo, offsets.0);
                    let (xv, ov) = (&self.nodes[x.0].value, &self.nodes[offsets.0].value);
                    let plan =
                        SamplePlan::new(xv, ov, *geom, *groups).expect("validated in forward");
                    let [gx, goff] = grab(lo, [x.0, offsets.0]);
                    deform_sample_backward(xv, ov, &plan, go, gx, goff);
                }
                Op::AvgPool { x, geom } => {
                    let xv = &self.nodes[x.0].value;
                    let plan = PoolPlan::new(xv, *geom).expect("validated in forward");
                    avg_pool_backward(&plan, go, ensure(&self.nodes, lo, x.0));
                }
                Op::LayerNorm { x, gain, shift, eps } => {
                    ensure(&self.nodes, lo, x.0);
                    ensure(&self.nodes, lo, gain.0);
                    ensure(&self.nodes, lo, shift.0);
                    let (xv, gv) = (&self.nodes[x.0].value, &self.nodes[gain.0].value);
                    let [gx, ggain, gshift] = grab(lo, [x.0, gain.0, shift.0]);
                    layer_norm_backward(xv, gv, *eps, go, gx, ggain, gshift);
                }
                Op::Softmax { x } => {
                    softmax_backward(&self.nodes[i].value, go, ensure(&self.nodes, lo, x.0));
                }
                Op::BilinearResize { x } => {
                    let out_shape = self.nodes[i].value.shape();
                    let (oh, ow) = (out_shape[2], out_shape[3]);
                    let in_shape = self.nodes[x.0].value.shape().to_vec();
                    bilinear_resize_backward(&in_shape, oh, ow, go, ensure(&self.nodes, lo, x.0));
                }
                Op::Reshape { x } => {
                    for (g, d) in ensure(&self.nodes, lo, x.0).iter_mut().zip(go) {
                        *g += d;
                    }
                }
                Op::Permute { x, perm } => {
                    let in_shape = self.nodes[x.0].value.shape().to_vec();
                    permute_backward(&in_shape, perm, go, ensure(&self.nodes, lo, x.0));
                }
                Op::Concat { parts, axis } => {
                    let out_shape = self.nodes[i].value.shape().to_vec();
                    let inner: usize = out_shape[axis + 1..].iter().product();
                    let outer: usize = out_shape[..*axis].iter().product();
                    let total_axis = out_shape[*axis];
                    let mut offset = 0usize;
                    for part in parts {
                        let part_axis = self.nodes[part.0].value.shape()[*axis];
                        let gp = ensure(&self.nodes, lo, part.0);
                        for o in 0..outer {
                            let src_base = (o * total_axis + offset) * inner;
                            let dst_base = o * part_axis * inner;
                            for j in 0..part_axis * inner {
                                gp[dst_base + j] += go[src_base + j];
                            }
                        }
                        offset += part_axis;
                    }
                }
                Op::Bmm { a, b, transpose_b } => {
                    ensure(&self.nodes, lo, a.0);
                    ensure(&self.nodes, lo, b.0);
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let [ga, gb] = grab(lo, [a.0, b.0]);
                    bmm_backward(av, bv, *transpose_b, go, ga, gb);
                }
                Op::MeanSpatial { x } => {
                    let shape = self.nodes[x.0].value.shape().to_vec();
                    mean_spatial_backward(&shape, go, ensure(&self.nodes, lo, x.0));
                }
                Op::MaxSpatial { x, argmax } => {
                    let shape = self.nodes[x.0].value.shape().to_vec();
                    max_spatial_backward(&shape, argmax, go, ensure(&self.nodes, lo, x.0));
                }
                Op::SumAll { x } => {
                    let g = go[0];
                    for v in ensure(&self.nodes, lo, x.0).iter_mut() {
                        *v += g;
                    }
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    ignore_index,
                    n_valid,
                } => {
                    cross_entropy_backward(
                        &self.nodes[logits.0].value,
                        labels,
                        *ignore_index,
                        *n_valid,
                        go[0],
                        ensure(&self.nodes, lo, logits.0),
                    );
                }
            }
        }
        Ok(())
    }

    /// Gradient of the last backward sweep as raw `f64`, or `None` when no
    /// gradient reached the node.
    pub fn grad_f64(&self, id: ValueId) -> Option<&[f64]> {
        self.grads.get(id.0)?.as_deref()
    }

    /// Gradient in the tape's storage type; zero-filled when no gradient
    /// reached the node (an unused value has zero gradient by definition).
    pub fn grad(&self, id: ValueId) -> Tensor<T> {
        let shape = self.nodes[id.0].value.shape().to_vec();
        match self.grads[id.0].as_deref() {
            Some(g) => Tensor::from_vec(shape, g.iter().map(|&v| T::from_f64(v)).collect())
                .expect("gradient buffer matches node shape"),
            None => Tensor::zeros(shape),
        }
    }
}

/// Lazily creates and returns the `f64` gradient buffer of node `id`.
fn ensure<'a, T: Scalar>(
    nodes: &[Node<T>],
    lo: &'a mut [Option<Vec<f64>>],
    id: usize,
) -> &'a mut [f64] {
    lo[id]
        .get_or_insert_with(|| vec![0.0; nodes[id].value.numel()])
        .as_mut_slice()
}

/// Splits out N disjoint, already-initialized gradient buffers. Ids must be
/// pairwise distinct (operand validation enforced this at record time).
fn grab<'a, const N: usize>(
    lo: &'a mut [Option<Vec<f64>>],
    ids: [usize; N],
) -> [&'a mut [f64]; N] {
    let mut order: [usize; N] = std::array::from_fn(|i| i);
    order.sort_unstable_by_key(|&i| ids[i]);
    let mut out: [Option<&'a mut [f64]>; N] = std::array::from_fn(|_| None);
    let mut rest: &'a mut [Option<Vec<f64>>] = lo;
    let mut consumed = 0usize;
    for &pos in &order {
        let id = ids[pos];
        assert!(id >= consumed, "duplicate gradient buffer id {id}");
        let (head, tail) = rest.split_at_mut(id - consumed + 1);
        let last = head.len() - 1;
        out[pos] = Some(
            head[last]
                .as_deref_mut()
                .expect("gradient buffer initialized before grab"),
        );
        rest = tail;
        consumed = id + 1;
    }
    out.map(|o| o.expect("every requested buffer filled"))
}

fn permute_forward<T: Scalar>(x: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    const OP: &str = "permute";
    let rank = x.rank();
    let mut seen = vec![false; rank];
    if perm.len() != rank
        || perm
            .iter()
            .any(|&p| p >= rank || std::mem::replace(&mut seen[p], true))
    {
        return Err(TensorError::invalid(
            OP,
            format!("{perm:?} is not a permutation of 0..{rank}"),
        ));
    }
    let in_shape = x.shape();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * in_shape[d + 1];
    }
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();

    let mut out = Vec::with_capacity(x.numel());
    let mut idx = vec![0usize; rank];
    let mut in_flat = 0usize;
    for _ in 0..x.numel() {
        out.push(x.data()[in_flat]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            in_flat += step[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            in_flat -= step[d] * out_shape[d];
        }
    }
    Tensor::from_vec(out_shape, out)
}

fn permute_backward(in_shape: &[usize], perm: &[usize], grad_out: &[f64], gx: &mut [f64]) {
    let rank = in_shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * in_shape[d + 1];
    }
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut idx = vec![0usize; rank];
    let mut in_flat = 0usize;
    for &g in grad_out {
        gx[in_flat] += g;
        for d in (0..rank).rev() {
            idx[d] += 1;
            in_flat += step[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            in_flat -= step[d] * out_shape[d];
        }
    }
}

fn concat_forward<T: Scalar>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    const OP: &str = "concat";
    let first = parts[0];
    let rank = first.rank();
    if axis >= rank {
        return Err(TensorError::invalid(
            OP,
            format!("axis {axis} out of range for rank {rank}"),
        ));
    }
    for p in &parts[1..] {
        if p.rank() != rank {
            return Err(TensorError::shape(
                OP,
                format!("{:?} vs {:?}", first.shape(), p.shape()),
            ));
        }
        for d in 0..rank {
            if d != axis && p.shape()[d] != first.shape()[d] {
                return Err(TensorError::shape(
                    OP,
                    format!("dim {d}: {} vs {}", first.shape()[d], p.shape()[d]),
                ));
            }
        }
    }
    let total_axis: usize = parts.iter().map(|p| p.shape()[axis]).sum();
    let mut out_shape = first.shape().to_vec();
    out_shape[axis] = total_axis;
    let outer: usize = out_shape[..axis].iter().product();
    let inner: usize = out_shape[axis + 1..].iter().product();

    let mut out = Vec::with_capacity(out_shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let pa = p.shape()[axis];
            out.extend_from_slice(&p.data()[o * pa * inner..(o + 1) * pa * inner]);
        }
    }
    Tensor::from_vec(out_shape, out)
}
