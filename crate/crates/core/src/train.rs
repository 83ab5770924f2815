//! Loss, optimizer, schedule, augmentation, the training loop, and
//! threaded evaluation.
//!
//! Determinism contract: given equal seeds and configs, two runs produce
//! bit-identical loss traces, and evaluation produces byte-identical
//! reports at every worker count. All randomness flows through counter
//! seeded generators (per sample index, never per worker), and every
//! floating-point reduction has a fixed order.

use std::io::Write;

use panofuse_tensor::{Labels, Scalar, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::geometry::{hflip_erp, resize_erp, ModalityStack, IGNORE_LABEL};
use crate::metrics::{metrics_from_confusion, ConfusionMatrix, MetricsReport};
use crate::model::{Modality, Model};
use crate::params::ParamStore;
use crate::{CoreError, Result};

/// Horizontal flip probability during augmentation.
const FLIP_PROB: f64 = 0.5;

/// Training recipe configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Initial learning rate for the polynomial schedule.
    pub lr0: f64,
    pub poly_power: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Square crop extent in pixels; regions beyond the scaled panorama
    /// are padded with zeros and ignore labels.
    pub crop: usize,
    pub scales: Vec<f64>,
    pub ignore_index: u8,
    pub seed: u64,
    /// Score the validation split every this many steps; 0 disables.
    pub val_every: usize,
    /// Emit a log record every this many steps.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 6e-5,
            poly_power: 0.9,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 1e-2,
            batch_size: 4,
            epochs: 200,
            crop: 512,
            scales: vec![0.5, 0.75, 1.0, 1.25, 1.5, 1.75],
            ignore_index: IGNORE_LABEL,
            seed: 0,
            val_every: 0,
            log_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        const OP: &str = "TrainConfig::validate";
        let fail = |reason: String| Err(CoreError::invalid(OP, reason));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return fail(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(self.poly_power > 0.0 && self.poly_power.is_finite()) {
            return fail(format!("poly_power must be positive, got {}", self.poly_power));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return fail(format!("betas must lie in [0, 1), got ({b1}, {b2})"));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return fail(format!("eps must be positive, got {}", self.eps));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".to_string());
        }
        if self.epochs == 0 {
            return fail("epochs must be positive".to_string());
        }
        if self.crop == 0 {
            return fail("crop must be positive".to_string());
        }
        if self.scales.is_empty() || self.scales.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return fail(format!("scales must be positive and non-empty, got {:?}", self.scales));
        }
        if self.log_every == 0 {
            return fail("log_every must be positive".to_string());
        }
        Ok(())
    }
}

/// Polynomial decay: lr0 · (1 − step/total)^power, stepped per iteration.
pub fn poly_lr(step: usize, total_steps: usize, lr0: f64, power: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(CoreError::invalid(
            "poly_lr",
            "total_steps must be positive".to_string(),
        ));
    }
    if step > total_steps {
        return Err(CoreError::invalid(
            "poly_lr",
            format!("step {step} exceeds total_steps {total_steps}"),
        ));
    }
    Ok(lr0 * (1.0 - step as f64 / total_steps as f64).powf(power))
}

/// AdamW with decoupled weight decay. Moments are kept at verify grade
/// regardless of the parameter precision; the update is
/// θ ← θ − lr·wd·θ − lr·m̂/(√v̂ + ε) with bias-corrected moments.
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new<T: Scalar>(config: &TrainConfig, store: &ParamStore<T>) -> Self {
        let sizes: Vec<usize> = (0..store.len()).map(|i| store.get_index(i).numel()).collect();
        AdamW {
            beta1: config.betas.0,
            beta2: config.betas.1,
            eps: config.eps,
            weight_decay: config.weight_decay,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One optimizer step. `grads` holds one verify-grade gradient buffer
    /// per parameter in store order; `None` means the parameter did not
    /// receive gradient and is treated as zero.
    pub fn step<T: Scalar>(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &[Option<Vec<f64>>],
        lr: f64,
    ) -> Result<()> {
        const OP: &str = "AdamW::step";
        if grads.len() != self.m.len() || store.len() != self.m.len() {
            return Err(CoreError::mismatch(
                OP,
                format!(
                    "optimizer tracks {} parameters, got {} gradients for a store of {}",
                    self.m.len(),
                    grads.len(),
                    store.len()
                ),
            ));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..self.m.len() {
            let param = store.get_index_mut(i);
            let data = param.data_mut();
            if let Some(g) = &grads[i] {
                if g.len() != data.len() {
                    return Err(CoreError::mismatch(
                        OP,
                        format!("parameter {i}: {} gradient values for {} weights", g.len(), data.len()),
                    ));
                }
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..data.len() {
                let g = grads[i].as_ref().map_or(0.0, |g| g[j]);
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                let theta = data[j].to_f64();
                let updated =
                    theta - lr * self.weight_decay * theta - lr * m_hat / (v_hat.sqrt() + self.eps);
                data[j] = T::from_f64(updated);
            }
        }
        Ok(())
    }
}

/// A square training window cut from an augmented panorama. Planes use the
/// same channel-planar layout as [`crate::geometry::ErpImage`].
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub size: usize,
    pub rgb: Vec<f32>,
    pub depth: Vec<f32>,
    pub normal: Vec<f32>,
    pub hha: Option<Vec<f32>>,
    pub labels: Vec<u8>,
}

/// Read-only plane views shared by full panoramas and patches.
pub struct Planes<'a> {
    pub rgb: &'a [f32],
    pub depth: &'a [f32],
    pub normal: &'a [f32],
    pub hha: Option<&'a [f32]>,
}

impl Patch {
    pub fn planes(&self) -> Planes<'_> {
        Planes {
            rgb: &self.rgb,
            depth: &self.depth,
            normal: &self.normal,
            hha: self.hha.as_deref(),
        }
    }
}

fn stack_planes(stack: &ModalityStack) -> Planes<'_> {
    Planes {
        rgb: stack.rgb.data(),
        depth: stack.depth.data(),
        normal: stack.normal.data(),
        hha: stack.hha.as_ref().map(|h| h.data()),
    }
}

/// Random flip, scale, and square crop. Draw order is fixed: flip, scale
/// index, crop row, crop column. Regions outside the scaled panorama fill
/// with zero pixels and the ignore label.
pub fn augment(stack: &ModalityStack, config: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Patch> {
    let flipped;
    let source = if rng.gen::<f64>() < FLIP_PROB {
        flipped = hflip_erp(stack);
        &flipped
    } else {
        stack
    };
    let scale = config.scales[rng.gen_range(0..config.scales.len())];
    let target_h = ((source.height() as f64 * scale).round() as usize).max(1);
    let scaled = resize_erp(source, target_h, 2 * target_h)?;

    let crop = config.crop;
    let max_v = scaled.height().saturating_sub(crop);
    let max_u = scaled.width().saturating_sub(crop);
    let v0 = rng.gen_range(0..=max_v);
    let u0 = rng.gen_range(0..=max_u);

    let mut out = Patch {
        size: crop,
        rgb: vec![0.0; 3 * crop * crop],
        depth: vec![0.0; crop * crop],
        normal: vec![0.0; 3 * crop * crop],
        hha: scaled.hha.as_ref().map(|_| vec![0.0; 3 * crop * crop]),
        labels: vec![config.ignore_index; crop * crop],
    };
    let copy_plane = |src: &[f32], dst: &mut [f32], c: usize| {
        let (sw, sh) = (scaled.width(), scaled.height());
        for dv in 0..crop.min(sh.saturating_sub(v0)) {
            let su = u0;
            let len = crop.min(sw - su);
            let src_base = c * sw * sh + (v0 + dv) * sw + su;
            let dst_base = c * crop * crop + dv * crop;
            dst[dst_base..dst_base + len].copy_from_slice(&src[src_base..src_base + len]);
        }
    };
    for c in 0..3 {
        copy_plane(scaled.rgb.data(), &mut out.rgb, c);
        copy_plane(scaled.normal.data(), &mut out.normal, c);
        if let (Some(src), Some(dst)) = (&scaled.hha, &mut out.hha) {
            copy_plane(src.data(), dst, c);
        }
    }
    copy_plane(scaled.depth.data(), &mut out.depth, 0);
    for dv in 0..crop.min(scaled.height().saturating_sub(v0)) {
        let len = crop.min(scaled.width() - u0);
        let src_base = (v0 + dv) * scaled.width() + u0;
        let dst_base = dv * crop;
        out.labels[dst_base..dst_base + len]
            .copy_from_slice(&scaled.labels.data()[src_base..src_base + len]);
    }
    Ok(out)
}

/// Writes one modality stream (3 planes of h·w) into `dst` for the model.
/// Color and HHA pass through; depth maps meters to [0, 1] by a fixed 10 m
/// range and replicates across channels; normals map [−1, 1] to [0, 1].
fn fill_modality<T: Scalar>(
    dst: &mut [T],
    modality: Modality,
    planes: &Planes<'_>,
    pixels: usize,
) -> Result<()> {
    match modality {
        Modality::Rgb => {
            for (d, &s) in dst.iter_mut().zip(planes.rgb) {
                *d = T::from_f64(s as f64);
            }
        }
        Modality::Depth => {
            for (i, &s) in planes.depth.iter().enumerate() {
                let v = T::from_f64((s as f64 / 10.0).clamp(0.0, 1.0));
                dst[i] = v;
                dst[pixels + i] = v;
                dst[2 * pixels + i] = v;
            }
        }
        Modality::Normal => {
            for (d, &s) in dst.iter_mut().zip(planes.normal) {
                *d = T::from_f64((s as f64 + 1.0) / 2.0);
            }
        }
        Modality::Hha => match planes.hha {
            Some(hha) => {
                for (d, &s) in dst.iter_mut().zip(hha) {
                    *d = T::from_f64(s as f64);
                }
            }
            None => {
                return Err(CoreError::invalid(
                    "fill_modality",
                    "model wants the hha modality but the sample has no hha planes".to_string(),
                ));
            }
        },
    }
    Ok(())
}

/// Assembles per-modality batch tensors (B, 3, h, w) from plane views.
pub fn batch_inputs<T: Scalar>(
    modalities: &[Modality],
    planes: &[Planes<'_>],
    h: usize,
    w: usize,
) -> Result<Vec<Tensor<T>>> {
    let pixels = h * w;
    let mut out = Vec::with_capacity(modalities.len());
    for &modality in modalities {
        let mut data = vec![T::ZERO; planes.len() * 3 * pixels];
        for (b, p) in planes.iter().enumerate() {
            fill_modality(&mut data[b * 3 * pixels..(b + 1) * 3 * pixels], modality, p, pixels)?;
        }
        out.push(Tensor::from_vec(vec![planes.len(), 3, h, w], data)?);
    }
    Ok(out)
}

/// Stacks label planes into a (B, h, w) label tensor.
pub fn batch_labels(labels: &[&[u8]], h: usize, w: usize) -> Result<Labels> {
    let mut data = Vec::with_capacity(labels.len() * h * w);
    for plane in labels {
        data.extend(plane.iter().map(|&l| l as u32));
    }
    Ok(Labels::new(vec![labels.len(), h, w], data)?)
}

/// Per-pixel argmax over the class axis of (B, C, H, W) logits; ties pick
/// the lowest class index.
pub fn argmax_labels<T: Scalar>(logits: &Tensor<T>) -> Result<Vec<u8>> {
    let shape = logits.shape();
    if shape.len() != 4 {
        return Err(CoreError::mismatch(
            "argmax_labels",
            format!("expected (batch, classes, h, w) logits, got {shape:?}"),
        ));
    }
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let pixels = h * w;
    let data = logits.data();
    let mut out = Vec::with_capacity(b * pixels);
    for bi in 0..b {
        let base = bi * c * pixels;
        for p in 0..pixels {
            let mut best = 0usize;
            let mut best_v = data[base + p].to_f64();
            for ci in 1..c {
                let v = data[base + ci * pixels + p].to_f64();
                if v > best_v {
                    best_v = v;
                    best = ci;
                }
            }
            out.push(best as u8);
        }
    }
    Ok(out)
}

/// One JSON-lines record per logged iteration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_miou: Option<f64>,
}

/// Summary of a finished training run.
pub struct TrainOutcome {
    pub steps: usize,
    pub loss_trace: Vec<f64>,
    pub lr_trace: Vec<f64>,
}

/// Mixes run seed, epoch, and sample position into one stream seed. The
/// SplitMix64 finalizer runs between absorptions so the three inputs never
/// combine additively (seed 1 epoch 0 must differ from seed 0 epoch 1).
pub(crate) fn mix_seed(seed: u64, epoch: u64, index: u64) -> u64 {
    fn finalize(mut z: u64) -> u64 {
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    let z = finalize(seed.wrapping_add(0x9E37_79B9_7F4A_7C15));
    let z = finalize(z ^ epoch.wrapping_add(0xD1B5_4A32_D192_ED03));
    finalize(z ^ index.wrapping_add(0x8EBC_6AF0_9C88_C6E3))
}

/// Runs the full recipe: per iteration augment, forward, loss, backward,
/// schedule, optimizer step. Shuffles per epoch with a seeded permutation
/// and keeps the partial final batch. Writes JSON-lines records to `log`
/// when given. Aborts with a diagnostic naming the iteration if the loss
/// stops being finite.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    dataset: &[Sample],
    val: Option<&[Sample]>,
    config: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(CoreError::invalid("train", "dataset is empty".to_string()));
    }
    let modalities = model.config().modalities.clone();
    let num_classes = model.config().num_classes;
    let batches_per_epoch = dataset.len().div_ceil(config.batch_size);
    let total_steps = config.epochs * batches_per_epoch;
    let mut optimizer = AdamW::new(config, model.store());
    let mut outcome = TrainOutcome {
        steps: 0,
        loss_trace: Vec::with_capacity(total_steps),
        lr_trace: Vec::with_capacity(total_steps),
    };

    let mut step = 0usize;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, epoch as u64, u64::MAX));
        order.shuffle(&mut shuffle_rng);

        for chunk in order.chunks(config.batch_size) {
            let run = |model: &mut Model<T>, optimizer: &mut AdamW| -> Result<(f64, f64)> {
                let mut patches = Vec::with_capacity(chunk.len());
                for &index in chunk {
                    let mut rng =
                        ChaCha8Rng::seed_from_u64(mix_seed(config.seed, epoch as u64, index as u64));
                    patches.push(augment(&dataset[index].stack, config, &mut rng)?);
                }
                let views: Vec<Planes<'_>> = patches.iter().map(|p| p.planes()).collect();
                let inputs = batch_inputs::<T>(&modalities, &views, config.crop, config.crop)?;
                let label_views: Vec<&[u8]> = patches.iter().map(|p| p.labels.as_slice()).collect();
                let labels = batch_labels(&label_views, config.crop, config.crop)?;

                let mut tape = Tape::new();
                let (param_ids, logits) = model.forward(&mut tape, &inputs)?;
                let loss = tape.cross_entropy(logits, labels, config.ignore_index as u32)?;
                let loss_value = tape.value(loss).data()[0].to_f64();
                if !loss_value.is_finite() {
                    return Err(CoreError::invalid("train", format!("loss is {loss_value}")));
                }
                tape.backward(loss)?;
                let grads: Vec<Option<Vec<f64>>> = param_ids
                    .iter()
                    .map(|&id| tape.grad_f64(id).map(|g| g.to_vec()))
                    .collect();
                drop(tape);

                let lr = poly_lr(step, total_steps, config.lr0, config.poly_power)?;
                optimizer.step(model.store_mut(), &grads, lr)?;
                Ok((loss_value, lr))
            };
            let (loss_value, lr) = run(model, &mut optimizer).map_err(|e| CoreError::Train {
                iteration: step,
                reason: e.to_string(),
            })?;

            outcome.loss_trace.push(loss_value);
            outcome.lr_trace.push(lr);
            step += 1;

            let val_miou = match (val, config.val_every) {
                (Some(val_set), every) if every > 0 && step % every == 0 => {
                    let (_, report) =
                        evaluate(model, val_set, num_classes, config.ignore_index, 1)?;
                    Some(report.miou)
                }
                _ => None,
            };
            if let Some(sink) = log.as_deref_mut() {
                if step % config.log_every == 0 || val_miou.is_some() {
                    let record = LogRecord {
                        step: step - 1,
                        lr,
                        loss: loss_value,
                        val_miou,
                    };
                    serde_json::to_writer(&mut *sink, &record)?;
                    sink.write_all(b"\n").map_err(|e| CoreError::Train {
                        iteration: step - 1,
                        reason: format!("log write failed: {e}"),
                    })?;
                }
            }
        }
    }
    outcome.steps = step;
    Ok(outcome)
}

/// Scores a dataset: forward per sample, per-pixel argmax, confusion
/// accumulation. Samples are split into at most `threads` contiguous index
/// chunks scored on scoped threads; partial matrices merge in chunk order,
/// so counts are identical at every worker count.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    dataset: &[Sample],
    num_classes: usize,
    ignore_index: u8,
    threads: usize,
) -> Result<(ConfusionMatrix, MetricsReport)> {
    const OP: &str = "evaluate";
    if dataset.is_empty() {
        return Err(CoreError::invalid(OP, "dataset is empty".to_string()));
    }
    let threads = threads.clamp(1, dataset.len());
    let modalities = model.config().modalities.clone();

    let score_one = |sample: &Sample| -> Result<ConfusionMatrix> {
        let stack = &sample.stack;
        let planes = [stack_planes(stack)];
        let inputs = batch_inputs::<T>(&modalities, &planes, stack.height(), stack.width())?;
        let mut tape = Tape::new();
        let (_, logits) = model.forward(&mut tape, &inputs)?;
        let predictions = argmax_labels(tape.value(logits))?;
        let mut confusion = ConfusionMatrix::new(num_classes)?;
        confusion.accumulate(&predictions, stack.labels.data(), ignore_index)?;
        Ok(confusion)
    };

    let chunk_size = dataset.len().div_ceil(threads);
    let score_one = &score_one;
    let partials: Vec<Result<ConfusionMatrix>> = std::thread::scope(|scope| {
        let handles: Vec<_> = dataset
            .chunks(chunk_size)
            .map(|chunk| {
                scope.spawn(move || {
                    let mut acc = ConfusionMatrix::new(num_classes)?;
                    for sample in chunk {
                        acc.merge(&score_one(sample)?)?;
                    }
                    Ok(acc)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| match h.join() {
                Ok(r) => r,
                Err(_) => Err(CoreError::invalid(OP, "evaluation worker panicked".to_string())),
            })
            .collect()
    });

    let mut total = ConfusionMatrix::new(num_classes)?;
    for partial in partials {
        total.merge(&partial?)?;
    }
    let report = metrics_from_confusion(&total)?;
    Ok((total, report))
}
