//! Forward-pass oracles: a loop-based reference encoder block, GELU against
//! the normal CDF, sub-code locality, and concept-slot equivariance.

mod common;

use common::{images, random_tensor, tiny_model};
use concepthash::centers::CenterMode;
use concepthash::hash_head::{full_code, subcode, SPECIFICITY};
use concepthash::model::ConceptHash;
use concepthash::params::ParamStore;
use concepthash::tensor::{gelu_scalar, Tape, Tensor};
use concepthash::vit::{adapter_forward, block_forward, msa_forward, EncoderConfig, LAYER_NORM_EPS};
use statrs::distribution::{ContinuousCDF, Normal};

type Mat = Vec<Vec<f64>>;

fn rows(t: &Tensor) -> Mat {
    let cols = *t.shape().last().unwrap();
    t.data().chunks(cols).map(<[f64]>::to_vec).collect()
}

fn param(store: &ParamStore, name: &str) -> Tensor {
    store.value(name).unwrap().clone()
}

fn affine(x: &Mat, w: &Tensor, b: Option<&Tensor>) -> Mat {
    let (fan_in, fan_out) = (w.shape()[0], w.shape()[1]);
    x.iter()
        .map(|row| {
            (0..fan_out)
                .map(|j| {
                    let dot: f64 = (0..fan_in).map(|i| row[i] * w.at2(i, j)).sum();
                    dot + b.map_or(0.0, |b| b.data()[j])
                })
                .collect()
        })
        .collect()
}

fn layer_norm(x: &Mat, store: &ParamStore, prefix: &str) -> Mat {
    let g = param(store, &format!("{prefix}.gamma"));
    let b = param(store, &format!("{prefix}.beta"));
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.iter()
                .enumerate()
                .map(|(i, v)| (v - mean) * inv * g.data()[i] + b.data()[i])
                .collect()
        })
        .collect()
}

/// statrs' normal CDF is accurate to roughly 1e-11, which bounds the
/// tolerances of everything built on it below.
fn gelu_ref(x: f64) -> f64 {
    x * Normal::standard().cdf(x)
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect())
        .collect()
}

fn linear_named(x: &Mat, store: &ParamStore, prefix: &str, bias: bool) -> Mat {
    let w = param(store, &format!("{prefix}.weight"));
    let b = bias.then(|| param(store, &format!("{prefix}.bias")));
    affine(x, &w, b.as_ref())
}

/// Single-image attention: returns (projected output, per-head probabilities).
fn attention_ref(x: &Mat, store: &ParamStore, prefix: &str, heads: usize) -> (Mat, Vec<Mat>) {
    let dim = x[0].len();
    let hd = dim / heads;
    let qkv = linear_named(x, store, &format!("{prefix}.qkv"), true);
    let seq = x.len();
    let mut ctx = vec![vec![0.0; dim]; seq];
    let mut probs = Vec::new();
    for h in 0..heads {
        let q = |i: usize, d: usize| qkv[i][h * hd + d];
        let k = |i: usize, d: usize| qkv[i][dim + h * hd + d];
        let v = |i: usize, d: usize| qkv[i][2 * dim + h * hd + d];
        let mut p = vec![vec![0.0; seq]; seq];
        for i in 0..seq {
            let logits: Vec<f64> = (0..seq)
                .map(|j| (0..hd).map(|d| q(i, d) * k(j, d)).sum::<f64>() / (hd as f64).sqrt())
                .collect();
            let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
            let z: f64 = exps.iter().sum();
            for j in 0..seq {
                p[i][j] = exps[j] / z;
                for d in 0..hd {
                    ctx[i][h * hd + d] += p[i][j] * v(j, d);
                }
            }
        }
        probs.push(p);
    }
    (linear_named(&ctx, store, &format!("{prefix}.proj"), true), probs)
}

fn adapter_ref(x: &Mat, store: &ParamStore, prefix: &str) -> Mat {
    let h = layer_norm(x, store, &format!("{prefix}.ln"));
    let h = linear_named(&h, store, &format!("{prefix}.down"), false);
    let h: Mat = h
        .iter()
        .map(|r| r.iter().map(|&v| gelu_ref(v)).collect())
        .collect();
    let h = linear_named(&h, store, &format!("{prefix}.up"), false);
    let s = param(store, &format!("{prefix}.scale")).data()[0];
    h.iter().map(|r| r.iter().map(|v| v * s).collect()).collect()
}

fn block_ref(z: &Mat, store: &ParamStore, cfg: &EncoderConfig, layer: usize) -> Mat {
    let p = format!("block.{layer}");
    let (a, _) = attention_ref(
        &layer_norm(z, store, &format!("{p}.ln1")),
        store,
        &format!("{p}.msa"),
        cfg.heads,
    );
    let mid = add(&add(&adapter_ref(&a, store, &format!("{p}.adapter1")), &a), z);
    let h = linear_named(
        &layer_norm(&mid, store, &format!("{p}.ln2")),
        store,
        &format!("{p}.mlp.fc1"),
        true,
    );
    let h: Mat = h
        .iter()
        .map(|r| r.iter().map(|&v| gelu_ref(v)).collect())
        .collect();
    let m = linear_named(&h, store, &format!("{p}.mlp.fc2"), true);
    add(&add(&adapter_ref(&m, store, &format!("{p}.adapter2")), &m), &mid)
}

fn max_diff(a: &Mat, b: &[f64]) -> f64 {
    a.iter()
        .flatten()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn model_and_tokens() -> (ConceptHash, Tensor) {
    let model = tiny_model(CenterMode::Learnable, 4);
    let enc = &model.config.encoder;
    let tokens = random_tensor(&[1, enc.num_patches() + enc.num_concepts, enc.dim], 21, -1.5, 1.5);
    (model, tokens)
}

#[test]
fn gelu_matches_normal_cdf() {
    for i in -800..=800 {
        let x = i as f64 / 100.0;
        let (a, b) = (gelu_scalar(x), gelu_ref(x));
        assert!((a - b).abs() <= 1e-10, "x = {x}: {a:e} vs {b:e}");
    }
    // Reference values computed in 30-digit arithmetic.
    for (x, want) in [
        (-2.32, -0.023_595_417_711_429_652),
        (-0.5, -0.154_268_769_362_993_44),
        (0.1, 0.053_982_783_727_702_9),
        (1.7, 1.624_238_713_310_476_8),
        (4.0, 3.999_873_315_032_667_5),
    ] {
        assert!((gelu_scalar(x) - want).abs() <= 1e-15, "x = {x}");
    }
}

#[test]
fn attention_matches_loops() {
    let (model, tokens) = model_and_tokens();
    let enc = &model.config.encoder;
    let mut tape = Tape::new();
    let b = model.params.bind(&mut tape);
    let z = tape.constant(tokens.clone());
    let (out, attn) = msa_forward(&mut tape, &b, "block.0.msa", z, enc.heads).unwrap();
    let (want, probs) = attention_ref(&rows(&tokens), &model.params, "block.0.msa", enc.heads);
    assert!(max_diff(&want, tape.value(out).data()) <= 1e-12);
    let flat: Vec<f64> = probs.iter().flatten().flatten().copied().collect();
    let got = tape.value(attn).data();
    assert!(flat.iter().zip(got).all(|(x, y)| (x - y).abs() <= 1e-12));
    // Every probability row is a distribution.
    for row in got.chunks(tokens.shape()[1]) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn adapter_matches_loops() {
    let (model, tokens) = model_and_tokens();
    let mut tape = Tape::new();
    let b = model.params.bind(&mut tape);
    let z = tape.constant(tokens.clone());
    let out = adapter_forward(&mut tape, &b, "block.1.adapter2", z).unwrap();
    let want = adapter_ref(&rows(&tokens), &model.params, "block.1.adapter2");
    let diff = max_diff(&want, tape.value(out).data());
    assert!(diff <= 1e-10, "{diff:e}");
}

#[test]
fn block_matches_straight_line_reference() {
    let (model, tokens) = model_and_tokens();
    let enc = &model.config.encoder;
    for layer in 0..enc.depth {
        let mut tape = Tape::new();
        let b = model.params.bind(&mut tape);
        let z = tape.constant(tokens.clone());
        let (out, _) = block_forward(&mut tape, &b, enc, layer, z).unwrap();
        let want = block_ref(&rows(&tokens), &model.params, enc, layer);
        assert!(max_diff(&want, tape.value(out).data()) <= 1e-10, "layer {layer}");
    }
}

#[test]
fn subcode_depends_only_on_its_concept() {
    let model = tiny_model(CenterMode::Learnable, 6);
    let (m, d) = (model.config.num_concepts(), model.config.encoder.dim);
    let sub = model.config.bits / m;
    let features = random_tensor(&[2, m, d], 8, -1.0, 1.0);
    for target in 0..m {
        for bit in 0..sub {
            let mut tape = Tape::new();
            let b = model.params.bind(&mut tape);
            let f = tape.leaf(features.clone());
            let code = full_code(&mut tape, &b, f).unwrap();
            let col = tape.narrow(code, 1, target * sub + bit, 1).unwrap();
            let loss = tape.sum(col);
            tape.backward(loss).unwrap();
            let g = tape.grad(f).unwrap();
            for (idx, v) in g.data().iter().enumerate() {
                let concept = (idx / d) % m;
                if concept != target {
                    assert_eq!(*v, 0.0, "bit {} leaks into concept {concept}", target * sub + bit);
                }
            }
        }
    }
}

#[test]
fn full_code_concatenates_subcodes() {
    let model = tiny_model(CenterMode::Learnable, 6);
    let (m, d) = (model.config.num_concepts(), model.config.encoder.dim);
    let sub = model.config.bits / m;
    let features = random_tensor(&[3, m, d], 9, -1.0, 1.0);
    let mut tape = Tape::new();
    let b = model.params.bind(&mut tape);
    let f = tape.constant(features.clone());
    let code = full_code(&mut tape, &b, f).unwrap();
    let code = tape.value(code).clone();
    for n in 0..3 {
        for c in 0..m {
            let one = Tensor::new(
                &[d],
                features.data()[(n * m + c) * d..(n * m + c + 1) * d].to_vec(),
            )
            .unwrap();
            let v = tape.constant(one);
            let s = subcode(&mut tape, &b, v, c).unwrap();
            let got = &code.row(n)[c * sub..(c + 1) * sub];
            assert!(tape
                .value(s)
                .data()
                .iter()
                .zip(got)
                .all(|(a, b)| (a - b).abs() <= 1e-14));
        }
    }
}

/// Swapping two concept slots (bank rows and their specificity rows) swaps
/// the corresponding features, sub-codes, and attention rows.
#[test]
fn concept_slots_are_permutation_equivariant() {
    let mut cfg = common::tiny_config(CenterMode::Learnable);
    cfg.encoder.num_concepts = 4;
    let model = ConceptHash::new(cfg, None, 12).unwrap();
    let perm = [2usize, 0, 3, 1];
    let mut permuted = model.clone();
    for name in ["concepts", SPECIFICITY] {
        let t = param(&model.params, name);
        let r = rows(&t);
        let data: Vec<f64> = perm.iter().flat_map(|&p| r[p].clone()).collect();
        permuted.params.get_mut(name).unwrap().value = Tensor::new(t.shape(), data).unwrap();
    }
    let x = images(2, 16, 13);
    let (codes, attn) = model.infer(&x).unwrap();
    let (pcodes, pattn) = permuted.infer(&x).unwrap();
    let (m, sub, hw) = (4, model.config.bits / 4, model.config.encoder.num_patches());
    let mut worst = 0.0f64;
    for n in 0..2 {
        for (slot, &src) in perm.iter().enumerate() {
            for k in 0..sub {
                let a = pcodes.row(n)[slot * sub + k];
                let b = codes.row(n)[src * sub + k];
                worst = worst.max((a - b).abs());
            }
            for j in 0..hw {
                let a = pattn.data()[(n * m + slot) * hw + j];
                let b = attn.data()[(n * m + src) * hw + j];
                worst = worst.max((a - b).abs());
            }
        }
    }
    // Only summation order differs between the two runs.
    assert!(worst <= 1e-12, "max deviation {worst:e}");
}
