//! Encoder oracles: the deformable embed against a hand-padded standard
//! convolution, offset clamp saturation and bounds, block and rectification
//! identity reductions, and scalar loop re-implementations of the
//! rectification and fusion modules.

use panofuse_core::encoder::{CmFrm, Encoder, Ffm, TransformerBlock};
use panofuse_core::layers::{bind_params, Ctx, DeformEmbed};
use panofuse_core::model::{Modality, ModelConfig};
use panofuse_core::params::ParamStore;
use panofuse_tensor::ops::WindowGeom;
use panofuse_tensor::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Identity reductions must hold bit for bit; loop oracles recompute the
/// same f64 arithmetic in the same order, so they sit at roundoff scale.
const TOL_ORACLE: f64 = 1e-9;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn param<'a>(store: &'a ParamStore<f64>, name: &str) -> &'a Tensor<f64> {
    let id = store
        .lookup(name)
        .unwrap_or_else(|| panic!("parameter {name} is not registered"));
    store.get(id)
}

fn override_param(store: &mut ParamStore<f64>, name: &str, value: Tensor<f64>) {
    for i in 0..store.len() {
        if store.name(i) == name {
            assert_eq!(store.get_index(i).shape(), value.shape(), "{name}");
            *store.get_index_mut(i) = value;
            return;
        }
    }
    panic!("parameter {name} is not registered");
}

fn zero_param(store: &mut ParamStore<f64>, name: &str) {
    let shape = param(store, name).shape().to_vec();
    override_param(store, name, Tensor::zeros(shape));
}

/// Replicates the panoramic border rule as explicit padding: columns wrap
/// around the seam, rows repeat the top and bottom edge.
fn pad_wrap_clamp(x: &Tensor<f64>, pad: usize) -> Tensor<f64> {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut out = Tensor::zeros(vec![b, c, ph, pw]);
    for bi in 0..b {
        for ci in 0..c {
            for oy in 0..ph {
                let sy = (oy as isize - pad as isize).clamp(0, h as isize - 1) as usize;
                for ox in 0..pw {
                    let sx = (ox as isize - pad as isize).rem_euclid(w as isize) as usize;
                    out.set(&[bi, ci, oy, ox], x.at(&[bi, ci, sy, sx]));
                }
            }
        }
    }
    out
}

/// A fresh deformable embed predicts zero offsets, so it must equal a plain
/// strided convolution using the projection weights over an input padded
/// with the wrap/clamp border, bit for bit: both paths feed the identical
/// window values through the same accumulation kernel in the same order.
#[test]
fn fresh_deform_embed_equals_wrap_clamp_padded_convolution() {
    let mut r = rng(42);
    let (c_in, c_out, kernel, stride, pad) = (3usize, 5usize, 3usize, 2usize, 1usize);
    let mut store = ParamStore::<f64>::new();
    let embed =
        DeformEmbed::new(&mut store, &mut r, "embed", c_in, c_out, kernel, stride, pad, 4)
            .unwrap();
    let x = Tensor::rand_uniform(vec![2, c_in, 8, 12], -1.0, 1.0, &mut r);

    let mut tape = Tape::new();
    let ids = bind_params(&mut tape, &store);
    let mut ctx = Ctx::new(&mut tape, &ids);
    let xid = ctx.tape.leaf(x.clone());
    let got = embed.apply(&mut ctx, xid).unwrap();
    assert_eq!(ctx.shape(got), vec![2, c_out, 4, 6]);

    // The projection weight (c_out, c_in * k * k, 1, 1) reads the gathered
    // channels in (channel, ky, kx) order, which is exactly the flat layout
    // of a (c_out, c_in, k, k) convolution weight.
    let w_conv = param(&store, "embed.proj.weight")
        .reshaped(vec![c_out, c_in, kernel, kernel])
        .unwrap();
    let b_conv = param(&store, "embed.proj.bias").clone();
    let wid = ctx.tape.leaf(w_conv);
    let bid = ctx.tape.leaf(b_conv);
    let pid = ctx.tape.leaf(pad_wrap_clamp(&x, pad));
    let want = ctx
        .tape
        .conv2d(pid, wid, Some(bid), WindowGeom::square(kernel, stride, 0), 1)
        .unwrap();

    assert_eq!(tape.value(got).shape(), tape.value(want).shape());
    assert_eq!(tape.value(got).data(), tape.value(want).data());
}

/// An offset predictor pushed far past the clamp box must come back exactly
/// on the bound: +-height/divisor vertically, +-width/divisor horizontally.
#[test]
fn offset_clamp_saturates_on_the_exact_bound() {
    let mut r = rng(7);
    let mut store = ParamStore::<f64>::new();
    let embed = DeformEmbed::new(&mut store, &mut r, "embed", 3, 4, 3, 2, 1, 4).unwrap();
    override_param(
        &mut store,
        "embed.offset.bias",
        Tensor::from_vec(vec![2], vec![1e6, -1e6]).unwrap(),
    );

    let (h, w) = (32usize, 64usize);
    let x = Tensor::rand_uniform(vec![1, 3, h, w], -1.0, 1.0, &mut r);
    let mut tape = Tape::new();
    let ids = bind_params(&mut tape, &store);
    let mut ctx = Ctx::new(&mut tape, &ids);
    let xid = ctx.tape.leaf(x);
    let off = embed.offsets(&mut ctx, xid).unwrap();

    let out = tape.value(off);
    assert_eq!(out.shape(), &[1, 2, 16, 32]);
    let plane = 16 * 32;
    for (i, &v) in out.data().iter().enumerate() {
        if i < plane {
            assert_eq!(v, h as f64 / 4.0, "dy at {i} missed the bound");
        } else {
            assert_eq!(v, -(w as f64) / 4.0, "dx at {i} missed the bound");
        }
    }
}

/// Random offset predictors over random inputs never leave the clamp box.
/// Two seeds at 16x32 output positions give 2048 (dy, dx) draws.
#[test]
fn random_offset_draws_stay_inside_the_clamp_box() {
    let mut draws = 0usize;
    for seed in [3u64, 4] {
        let mut r = rng(seed);
        let mut store = ParamStore::<f64>::new();
        let embed = DeformEmbed::new(&mut store, &mut r, "embed", 3, 4, 3, 2, 1, 4).unwrap();
        for name in ["embed.offset.weight", "embed.offset.bias"] {
            let shape = param(&store, name).shape().to_vec();
            override_param(&mut store, name, Tensor::rand_uniform(shape, -3.0, 3.0, &mut r));
        }

        let (h, w) = (32usize, 64usize);
        let x = Tensor::rand_uniform(vec![1, 3, h, w], -1.0, 1.0, &mut r);
        let mut tape = Tape::new();
        let ids = bind_params(&mut tape, &store);
        let mut ctx = Ctx::new(&mut tape, &ids);
        let xid = ctx.tape.leaf(x);
        let off = embed.offsets(&mut ctx, xid).unwrap();

        let out = tape.value(off);
        let plane = 16 * 32;
        let (bound_y, bound_x) = (h as f64 / 4.0, w as f64 / 4.0);
        for (i, &v) in out.data().iter().enumerate() {
            let bound = if i < plane { bound_y } else { bound_x };
            assert!((-bound..=bound).contains(&v), "offset {v} outside +-{bound}");
            draws += 1;
        }
    }
    assert!(draws >= 1000, "only {draws} draws checked");
}

/// Zeroing the attention output projection and the MLP contraction turns
/// both residual branches into additions of exact zeros, so the block must
/// return its input bit for bit.
#[test]
fn transformer_block_with_zeroed_projections_is_the_identity() {
    let mut r = rng(11);
    let mut store = ParamStore::<f64>::new();
    let block = TransformerBlock::new(&mut store, &mut r, "blk", 8, 2, 2, 2).unwrap();
    for name in [
        "blk.attn.out.weight",
        "blk.attn.out.bias",
        "blk.ffn.fc2.weight",
        "blk.ffn.fc2.bias",
    ] {
        zero_param(&mut store, name);
    }

    let (h, w) = (4usize, 6usize);
    let tokens = Tensor::rand_uniform(vec![1, h * w, 8], -1.0, 1.0, &mut r);
    let mut tape = Tape::new();
    let ids = bind_params(&mut tape, &store);
    let mut ctx = Ctx::new(&mut tape, &ids);
    let tid = ctx.tape.leaf(tokens.clone());
    let out = block.apply(&mut ctx, tid, h, w).unwrap();
    assert_eq!(tape.value(out).data(), tokens.data());
}

/// With both mixing weights at zero the rectification corrections scale to
/// zero and each modality map passes through unchanged, bit for bit.
#[test]
fn rectification_with_zero_mixing_weights_is_the_identity() {
    let mut r = rng(13);
    let mut store = ParamStore::<f64>::new();
    let frm = CmFrm::new(&mut store, &mut r, "frm", 6, &["rgb", "depth"], 0.0, 0.0).unwrap();

    let maps: Vec<Tensor<f64>> = (0..2)
        .map(|_| Tensor::rand_uniform(vec![2, 6, 4, 8], -1.0, 1.0, &mut r))
        .collect();
    let mut tape = Tape::new();
    let ids = bind_params(&mut tape, &store);
    let mut ctx = Ctx::new(&mut tape, &ids);
    let map_ids: Vec<_> = maps.iter().map(|m| ctx.tape.leaf(m.clone())).collect();
    let rectified = frm.apply(&mut ctx, &map_ids).unwrap();
    for (got, want) in rectified.iter().zip(&maps) {
        assert_eq!(tape.value(*got).data(), want.data());
    }
}

/// Zeroing every gate path makes both sigmoids exactly 0.5, so each
/// rectified map is the input scaled by 1 + (lambda_c + lambda_s) / 2.
#[test]
fn zeroed_gate_paths_scale_by_half_of_each_mixing_weight() {
    let (lambda_c, lambda_s) = (0.5f64, 0.25f64);
    let mut r = rng(17);
    let mut store = ParamStore::<f64>::new();
    let names = ["rgb", "depth"];
    let frm = CmFrm::new(&mut store, &mut r, "frm", 4, &names, lambda_c, lambda_s).unwrap();
    for m in names {
        for path in [
            "channel.fc1.weight",
            "channel.fc1.bias",
            "channel.fc2.weight",
            "channel.fc2.bias",
            "spatial.conv1.weight",
            "spatial.conv1.bias",
            "spatial.conv2.weight",
            "spatial.conv2.bias",
        ] {
            zero_param(&mut store, &format!("frm.{m}.{path}"));
        }
    }

    let maps: Vec<Tensor<f64>> = (0..2)
        .map(|_| Tensor::rand_uniform(vec![1, 4, 3, 5], -1.0, 1.0, &mut r))
        .collect();
    let mut tape = Tape::new();
    let ids = bind_params(&mut tape, &store);
    let mut ctx = Ctx::new(&mut tape, &ids);
    let map_ids: Vec<_> = maps.iter().map(|m| ctx.tape.leaf(m.clone())).collect();
    let rectified = frm.apply(&mut ctx, &map_ids).unwrap();

    let factor = 1.0 + 0.5 * (lambda_c + lambda_s);
    for (got, want) in rectified.iter().zip(&maps) {
        for (g, w) in tape.value(*got).data().iter().zip(want.data()) {
            assert!((g - factor * w).abs() <= 1e-14 * w.abs().max(1.0), "{g} vs {}", factor * w);
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn gelu(x: f64) -> f64 {
    let u = 0.797_884_560_802_865_4 * (x + 0.044_715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

/// y[row][o] = b[o] + sum_i x[row][i] w[o][i], accumulated in f64.
fn linear_rows(x: &[f64], w: &Tensor<f64>, b: &Tensor<f64>, rows: usize) -> Vec<f64> {
    let (out_f, in_f) = (w.shape()[0], w.shape()[1]);
    let mut y = vec![0.0f64; rows * out_f];
    for row in 0..rows {
        for o in 0..out_f {
            let mut acc = 0.0f64;
            for i in 0..in_f {
                acc += x[row * in_f + i] * w.data()[o * in_f + i];
            }
            y[row * out_f + o] = acc + b.data()[o];
        }
    }
    y
}

/// Zero-padded 3x3 convolution with plain loops, (B, C, H, W) planes.
fn conv3x3_zero_pad(x: &[f64], c_in: usize, h: usize, w: usize, wt: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let c_out = wt.shape()[0];
    let mut out = vec![0.0f64; c_out * h * w];
    for o in 0..c_out {
        for oy in 0..h {
            for ox in 0..w {
                let mut acc = 0.0f64;
                for c in 0..c_in {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = oy as isize + ky as isize - 1;
                            let ix = ox as isize + kx as isize - 1;
                            if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += x[(c * h + iy as usize) * w + ix as usize]
                                * wt.at(&[o, c, ky, kx]);
                        }
                    }
                }
                out[(o * h + oy) * w + ox] = acc + b.data()[o];
            }
        }
    }
    out
}

/// Scalar loop re-implementation of the rectification module, checked
/// against the tape version on random weights and inputs.
#[test]
fn rectification_matches_a_scalar_loop_oracle() {
    let (lambda_c, lambda_s) = (0.4f64, 0.3f64);
    let names = ["rgb", "depth", "normal"];
    let (dim, h, w) = (4usize, 3usize, 5usize);
    let mut r = rng(19);
    let mut store = ParamStore::<f64>::new();
    let frm = CmFrm::new(&mut store, &mut r, "frm", dim, &names, lambda_c, lambda_s).unwrap();

    let maps: Vec<Tensor<f64>> = (0..3)
        .map(|_| Tensor::rand_uniform(vec![1, dim, h, w], -1.0, 1.0, &mut r))
        .collect();
    let mut tape = Tape::new();
    let ids = bind_params(&mut tape, &store);
    let mut ctx = Ctx::new(&mut tape, &ids);
    let map_ids: Vec<_> = maps.iter().map(|m| ctx.tape.leaf(m.clone())).collect();
    let rectified = frm.apply(&mut ctx, &map_ids).unwrap();

    let pixels = h * w;
    for (m, modality) in names.iter().enumerate() {
        // Others concatenate along channels in modality order, skipping m.
        let mut others = Vec::with_capacity((names.len() - 1) * dim * pixels);
        for (i, map) in maps.iter().enumerate() {
            if i != m {
                others.extend(map.data().iter().copied());
            }
        }
        let others_c = (names.len() - 1) * dim;

        // Channel gate: pooled mean and peak descriptors through the shared
        // two-layer MLP, summed, squashed.
        let mut mean = vec![0.0f64; others_c];
        let mut peak = vec![f64::NEG_INFINITY; others_c];
        for c in 0..others_c {
            for p in 0..pixels {
                let v = others[c * pixels + p];
                mean[c] += v;
                peak[c] = peak[c].max(v);
            }
            mean[c] /= pixels as f64;
        }
        let fc1_w = param(&store, &format!("frm.{modality}.channel.fc1.weight"));
        let fc1_b = param(&store, &format!("frm.{modality}.channel.fc1.bias"));
        let fc2_w = param(&store, &format!("frm.{modality}.channel.fc2.weight"));
        let fc2_b = param(&store, &format!("frm.{modality}.channel.fc2.bias"));
        let gm: Vec<f64> = linear_rows(&mean, fc1_w, fc1_b, 1).iter().map(|&v| v.max(0.0)).collect();
        let gm = linear_rows(&gm, fc2_w, fc2_b, 1);
        let gp: Vec<f64> = linear_rows(&peak, fc1_w, fc1_b, 1).iter().map(|&v| v.max(0.0)).collect();
        let gp = linear_rows(&gp, fc2_w, fc2_b, 1);
        let gate_c: Vec<f64> = gm.iter().zip(&gp).map(|(a, b)| sigmoid(a + b)).collect();

        // Spatial gate: two zero-padded convolutions over the others stack.
        let conv1_w = param(&store, &format!("frm.{modality}.spatial.conv1.weight"));
        let conv1_b = param(&store, &format!("frm.{modality}.spatial.conv1.bias"));
        let conv2_w = param(&store, &format!("frm.{modality}.spatial.conv2.weight"));
        let conv2_b = param(&store, &format!("frm.{modality}.spatial.conv2.bias"));
        let mid: Vec<f64> = conv3x3_zero_pad(&others, others_c, h, w, conv1_w, conv1_b)
            .iter()
            .map(|&v| v.max(0.0))
            .collect();
        let gate_s: Vec<f64> = conv3x3_zero_pad(&mid, conv1_w.shape()[0], h, w, conv2_w, conv2_b)
            .iter()
            .map(|&v| sigmoid(v))
            .collect();

        let got = tape.value(rectified[m]);
        for c in 0..dim {
            for p in 0..pixels {
                let f = maps[m].data()[c * pixels + p];
                let want = f + lambda_c * (f * gate_c[c]) + lambda_s * (f * gate_s[p]);
                let g = got.data()[c * pixels + p];
                assert!(
                    (g - want).abs() <= TOL_ORACLE,
                    "modality {m} channel {c} pixel {p}: {g} vs {want}"
                );
            }
        }
    }
}

/// Scalar loop re-implementation of multi-head attention: split channels
/// into heads, scaled dot-product scores, softmax rows, value mix, output
/// projection. Queries x (n, c), keys/values kv (m, c).
fn attention_rows(
    store: &ParamStore<f64>,
    name: &str,
    x: &[f64],
    kv: &[f64],
    n: usize,
    m: usize,
    c: usize,
    heads: usize,
) -> Vec<f64> {
    let q = linear_rows(x, param(store, &format!("{name}.q.weight")), param(store, &format!("{name}.q.bias")), n);
    let k = linear_rows(kv, param(store, &format!("{name}.k.weight")), param(store, &format!("{name}.k.bias")), m);
    let v = linear_rows(kv, param(store, &format!("{name}.v.weight")), param(store, &format!("{name}.v.bias")), m);
    let dh = c / heads;
    let mut mixed = vec![0.0f64; n * c];
    for head in 0..heads {
        let base = head * dh;
        for i in 0..n {
            let mut scores = vec![0.0f64; m];
            for (j, s) in scores.iter_mut().enumerate() {
                let mut acc = 0.0f64;
                for d in 0..dh {
                    acc += q[i * c + base + d] * k[j * c + base + d];
                }
                *s = acc / (dh as f64).sqrt();
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for d in 0..dh {
                let mut acc = 0.0f64;
                for (j, e) in exps.iter().enumerate() {
                    acc += e / sum * v[j * c + base + d];
                }
                mixed[i * c + base + d] = acc;
            }
        }
    }
    linear_rows(&mixed, param(store, &format!("{name}.out.weight")), param(store, &format!("{name}.out.bias")), n)
}

fn layer_norm_rows(x: &[f64], gain: &Tensor<f64>, shift: &Tensor<f64>, c: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(c) {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let rstd = 1.0 / (var + 1e-6).sqrt();
        for (i, v) in row.iter().enumerate() {
            out.push((v - mean) * rstd * gain.data()[i] + shift.data()[i]);
        }
    }
    out
}

/// Scalar loop re-implementation of the fusion module for two and three
/// modalities, checked against the tape version.
#[test]
fn fusion_matches_a_scalar_loop_oracle() {
    for modality_names in [vec!["rgb", "depth"], vec!["rgb", "depth", "normal"]] {
        let (dim, heads, h, w) = (4usize, 2usize, 2usize, 3usize);
        let n_mod = modality_names.len();
        let mut r = rng(23 + n_mod as u64);
        let mut store = ParamStore::<f64>::new();
        let ffm = Ffm::new(&mut store, &mut r, "ffm", dim, heads, &modality_names).unwrap();

        let maps: Vec<Tensor<f64>> = (0..n_mod)
            .map(|_| Tensor::rand_uniform(vec![1, dim, h, w], -1.0, 1.0, &mut r))
            .collect();
        let mut tape = Tape::new();
        let ids = bind_params(&mut tape, &store);
        let mut ctx = Ctx::new(&mut tape, &ids);
        let map_ids: Vec<_> = maps.iter().map(|m| ctx.tape.leaf(m.clone())).collect();
        let fused = ffm.apply(&mut ctx, &map_ids).unwrap();

        let n = h * w;
        // Token matrices (n, dim): token p carries the channel column at p.
        let tokens: Vec<Vec<f64>> = maps
            .iter()
            .map(|m| {
                let mut t = vec![0.0f64; n * dim];
                for c in 0..dim {
                    for p in 0..n {
                        t[p * dim + c] = m.data()[c * n + p];
                    }
                }
                t
            })
            .collect();
        let normed: Vec<Vec<f64>> = modality_names
            .iter()
            .zip(&tokens)
            .map(|(name, t)| {
                layer_norm_rows(
                    t,
                    param(&store, &format!("ffm.{name}.norm.gain")),
                    param(&store, &format!("ffm.{name}.norm.shift")),
                    dim,
                )
            })
            .collect();

        let mut exchanged = Vec::with_capacity(n_mod);
        for (m, name) in modality_names.iter().enumerate() {
            let mut kv = Vec::new();
            for (i, t) in normed.iter().enumerate() {
                if i != m {
                    kv.extend(t.iter().copied());
                }
            }
            let attended = attention_rows(
                &store,
                &format!("ffm.{name}.attn"),
                &normed[m],
                &kv,
                n,
                n * (n_mod - 1),
                dim,
                heads,
            );
            let residual: Vec<f64> = tokens[m].iter().zip(&attended).map(|(a, b)| a + b).collect();
            exchanged.push(residual);
        }

        // Per-token channel concatenation, then the two-layer projection.
        let mut cat = vec![0.0f64; n * dim * n_mod];
        for p in 0..n {
            for (m, exch) in exchanged.iter().enumerate() {
                for c in 0..dim {
                    cat[p * dim * n_mod + m * dim + c] = exch[p * dim + c];
                }
            }
        }
        let f1: Vec<f64> = linear_rows(
            &cat,
            param(&store, "ffm.fuse.fc1.weight"),
            param(&store, "ffm.fuse.fc1.bias"),
            n,
        )
        .iter()
        .map(|&v| gelu(v))
        .collect();
        let f2 = linear_rows(
            &f1,
            param(&store, "ffm.fuse.fc2.weight"),
            param(&store, "ffm.fuse.fc2.bias"),
            n,
        );

        let got = tape.value(fused);
        assert_eq!(got.shape(), &[1, dim, h, w]);
        for c in 0..dim {
            for p in 0..n {
                let want = f2[p * dim + c];
                let g = got.data()[c * n + p];
                assert!(
                    (g - want).abs() <= TOL_ORACLE,
                    "{n_mod} modalities, channel {c} token {p}: {g} vs {want}"
                );
            }
        }
    }
}

fn ladder_config(modalities: Vec<Modality>) -> ModelConfig {
    ModelConfig {
        modalities,
        num_classes: 3,
        embed_dims: vec![4, 6, 8, 10],
        block_depths: vec![1, 1, 1, 1],
        attention_heads: vec![1, 2, 4, 5],
        sr_ratios: vec![8, 4, 2, 1],
        patch_kernels: vec![7, 3, 3, 3],
        patch_strides: vec![4, 2, 2, 2],
        mlp_ratio: 2,
        clamp_divisor: 4,
        lambda_c: 0.5,
        lambda_s: 0.5,
        decode_dim: 8,
        dmlp_offset_range: 8.0,
    }
}

/// The stage pyramid walks 1/4, 1/8, 1/16, 1/32 of the input resolution,
/// and every per-modality, rectified, and fused map carries the stage width.
#[test]
fn stage_features_descend_the_resolution_ladder() {
    let config = ladder_config(vec![Modality::Rgb, Modality::Depth]);
    let mut store = ParamStore::<f64>::new();
    let mut r = rng(29);
    let encoder = Encoder::new(&mut store, &mut r, &config).unwrap();
    assert_eq!(encoder.num_stages(), 4);

    let mut tape = Tape::new();
    let ids = bind_params(&mut tape, &store);
    let mut ctx = Ctx::new(&mut tape, &ids);
    let inputs: Vec<_> = (0..2)
        .map(|i| {
            ctx.tape
                .leaf(Tensor::rand_uniform(vec![1, 3, 64, 128], 0.0, 1.0, &mut rng(31 + i)))
        })
        .collect();
    let stages = encoder.encode(&mut ctx, &inputs).unwrap();

    let want = [(16, 32), (8, 16), (4, 8), (2, 4)];
    for (s, feat) in stages.iter().enumerate() {
        let (h, w) = want[s];
        let dim = config.embed_dims[s];
        assert_eq!(feat.per_modality.len(), 2);
        assert_eq!(feat.rectified.len(), 2);
        for &m in feat.per_modality.iter().chain(&feat.rectified) {
            assert_eq!(ctx.shape(m), vec![1, dim, h, w], "stage {s}");
        }
        assert_eq!(ctx.shape(feat.fused), vec![1, dim, h, w], "stage {s} fused");
    }

    let (_, dims) = encoder.count_macs(&store, 64, 128);
    assert_eq!(dims, want.to_vec());
}

/// One modality instantiates no rectification or fusion parameters, and the
/// fused stage output is the single rectified stream itself.
#[test]
fn single_modality_encoder_has_no_fusion_parameters() {
    let config = ladder_config(vec![Modality::Rgb]);
    let mut store = ParamStore::<f64>::new();
    let mut r = rng(37);
    let encoder = Encoder::new(&mut store, &mut r, &config).unwrap();
    for i in 0..store.len() {
        let name = store.name(i);
        assert!(
            !name.contains(".frm") && !name.contains(".ffm"),
            "unexpected fusion parameter {name}"
        );
    }

    let mut tape = Tape::new();
    let ids = bind_params(&mut tape, &store);
    let mut ctx = Ctx::new(&mut tape, &ids);
    let x = ctx
        .tape
        .leaf(Tensor::rand_uniform(vec![1, 3, 64, 128], 0.0, 1.0, &mut r));
    let stages = encoder.encode(&mut ctx, &[x]).unwrap();
    for feat in &stages {
        assert_eq!(feat.fused, feat.rectified[0]);
    }
}

/// Every added modality brings its own stream plus wider cross-modal
/// modules, so the parameter count rises strictly with arity.
#[test]
fn parameter_count_rises_with_modality_arity() {
    let counts: Vec<u64> = [
        vec![Modality::Rgb],
        vec![Modality::Rgb, Modality::Depth],
        vec![Modality::Rgb, Modality::Depth, Modality::Normal],
    ]
    .into_iter()
    .map(|modalities| {
        let config = ladder_config(modalities);
        let mut store = ParamStore::<f64>::new();
        let mut r = rng(41);
        Encoder::new(&mut store, &mut r, &config).unwrap();
        store.total_params()
    })
    .collect();
    assert!(counts[0] < counts[1], "{counts:?}");
    assert!(counts[1] < counts[2], "{counts:?}");

    // Fusion modules appear exactly at arity two.
    let config = ladder_config(vec![Modality::Rgb, Modality::Depth]);
    let mut store = ParamStore::<f64>::new();
    let mut r = rng(43);
    Encoder::new(&mut store, &mut r, &config).unwrap();
    let names: Vec<String> = (0..store.len()).map(|i| store.name(i).to_string()).collect();
    assert!(names.iter().any(|n| n.contains(".frm.")));
    assert!(names.iter().any(|n| n.contains(".ffm.")));
}
