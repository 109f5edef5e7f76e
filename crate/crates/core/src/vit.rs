//! Vision Transformer with learnable concept tokens appended after the patch
//! tokens, optional per-block adapters, and last-layer concept attention.
//!
//! Token layout of the input sequence: patch tokens at `0..HW`, concept
//! tokens at `HW..HW + M` in bank order. Concept tokens carry no positional
//! embedding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{truncated_normal, Binding, ParamStore, INIT_STD};
use crate::tensor::{Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const ADAPTER_SCALE_INIT: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub num_concepts: usize,
    pub adapter_dim: usize,
    pub adapter_enabled: bool,
}

/// ViT-B/32 geometry with a 384-wide adapter bottleneck.
impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 224,
            patch_size: 32,
            channels: 3,
            depth: 12,
            dim: 768,
            heads: 12,
            mlp_ratio: 4,
            num_concepts: 4,
            adapter_dim: 384,
            adapter_enabled: true,
        }
    }
}

impl EncoderConfig {
    /// Small grayscale encoder that trains from scratch on one CPU core.
    pub fn desk() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            channels: 1,
            depth: 4,
            dim: 64,
            heads: 4,
            mlp_ratio: 4,
            num_concepts: 4,
            adapter_dim: 16,
            adapter_enabled: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("dim", self.dim),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("adapter_dim", self.adapter_dim),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("encoder.{field}"), "must be positive"));
            }
        }
        if self.num_concepts == 0 {
            return Err(Error::config(
                "encoder.num_concepts",
                "at least one concept token is required",
            ));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::config(
                "encoder.patch_size",
                format!(
                    "{} does not divide image_size {}",
                    self.patch_size, self.image_size
                ),
            ));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::config(
                "encoder.heads",
                format!("{} does not divide dim {}", self.heads, self.dim),
            ));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Number of patch tokens, HW.
    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn seq_len(&self) -> usize {
        self.num_patches() + self.num_concepts
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

fn block_prefix(layer: usize) -> String {
    format!("block.{layer}")
}

fn insert_layer_norm(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<()> {
    store.insert(format!("{prefix}.gamma"), Tensor::ones(&[dim]), true)?;
    store.insert(format!("{prefix}.beta"), Tensor::zeros(&[dim]), true)
}

fn insert_linear<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    bias: bool,
) -> Result<()> {
    store.insert(
        format!("{prefix}.weight"),
        truncated_normal(rng, &[fan_in, fan_out], INIT_STD),
        true,
    )?;
    if bias {
        store.insert(format!("{prefix}.bias"), Tensor::zeros(&[fan_out]), true)?;
    }
    Ok(())
}

/// Adds every encoder parameter to `store`.
pub fn init_params<R: Rng>(cfg: &EncoderConfig, store: &mut ParamStore, rng: &mut R) -> Result<()> {
    cfg.validate()?;
    let d = cfg.dim;
    insert_linear(store, rng, "patch.proj", cfg.patch_dim(), d, true)?;
    store.insert(
        "patch.pos",
        truncated_normal(rng, &[cfg.num_patches(), d], INIT_STD),
        true,
    )?;
    store.insert(
        "concepts",
        truncated_normal(rng, &[cfg.num_concepts, d], INIT_STD),
        true,
    )?;
    for layer in 0..cfg.depth {
        let p = block_prefix(layer);
        insert_layer_norm(store, &format!("{p}.ln1"), d)?;
        insert_linear(store, rng, &format!("{p}.msa.qkv"), d, 3 * d, true)?;
        insert_linear(store, rng, &format!("{p}.msa.proj"), d, d, true)?;
        insert_layer_norm(store, &format!("{p}.ln2"), d)?;
        insert_linear(store, rng, &format!("{p}.mlp.fc1"), d, d * cfg.mlp_ratio, true)?;
        insert_linear(store, rng, &format!("{p}.mlp.fc2"), d * cfg.mlp_ratio, d, true)?;
        if cfg.adapter_enabled {
            for which in ["adapter1", "adapter2"] {
                let a = format!("{p}.{which}");
                insert_layer_norm(store, &format!("{a}.ln"), d)?;
                insert_linear(store, rng, &format!("{a}.down"), d, cfg.adapter_dim, false)?;
                insert_linear(store, rng, &format!("{a}.up"), cfg.adapter_dim, d, false)?;
                store.insert(format!("{a}.scale"), Tensor::scalar(ADAPTER_SCALE_INIT), true)?;
            }
        }
    }
    Ok(())
}

/// Flattens non-overlapping patches of `[B, C, H, W]` images into `[B·HW, C·p·p]`,
/// patches in row-major grid order, each flattened channel-major.
pub fn extract_patches(images: &Tensor, cfg: &EncoderConfig) -> Result<Tensor> {
    let s = images.shape();
    let want = [cfg.channels, cfg.image_size, cfg.image_size];
    if s.len() != 4 || s[1..] != want {
        return Err(Error::shape(format!(
            "images {s:?} do not match [B, {}, {}, {}]",
            want[0], want[1], want[2]
        )));
    }
    let (batch, ch, side, p, grid) = (s[0], cfg.channels, cfg.image_size, cfg.patch_size, cfg.grid());
    let src = images.data();
    let mut out = Vec::with_capacity(images.numel());
    for b in 0..batch {
        for gy in 0..grid {
            for gx in 0..grid {
                for c in 0..ch {
                    for y in 0..p {
                        let row = ((b * ch + c) * side + gy * p + y) * side + gx * p;
                        out.extend_from_slice(&src[row..row + p]);
                    }
                }
            }
        }
    }
    Tensor::new(&[batch * grid * grid, cfg.patch_dim()], out)
}

/// `x · W + b` over the last axis of `x`.
pub fn linear(tape: &mut Tape, params: &Binding, prefix: &str, x: Var, bias: bool) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let fan_in = *shape.last().expect("non-empty shape");
    let rows = tape.value(x).numel() / fan_in;
    let w = params.var(&format!("{prefix}.weight"))?;
    let flat = tape.reshape(x, &[rows, fan_in])?;
    let mut y = tape.matmul(flat, w)?;
    if bias {
        let b = params.var(&format!("{prefix}.bias"))?;
        y = tape.add(y, b)?;
    }
    let fan_out = tape.shape(y)[1];
    let mut out_shape = shape;
    *out_shape.last_mut().expect("non-empty") = fan_out;
    tape.reshape(y, &out_shape)
}

pub fn layer_norm(tape: &mut Tape, params: &Binding, prefix: &str, x: Var) -> Result<Var> {
    let gamma = params.var(&format!("{prefix}.gamma"))?;
    let beta = params.var(&format!("{prefix}.beta"))?;
    tape.layer_norm(x, gamma, beta, LAYER_NORM_EPS)
}

/// Patch tokens `[B, HW, D]`: linear projection of each flattened patch plus
/// a learnable positional embedding.
pub fn patch_embed(tape: &mut Tape, params: &Binding, cfg: &EncoderConfig, images: &Tensor) -> Result<Var> {
    let batch = images.shape().first().copied().unwrap_or(0);
    let patches = tape.constant(extract_patches(images, cfg)?);
    let tokens = linear(tape, params, "patch.proj", patches, true)?;
    let tokens = tape.reshape(tokens, &[batch, cfg.num_patches(), cfg.dim])?;
    let pos = params.var("patch.pos")?;
    tape.add(tokens, pos)
}

/// Appends the `[M, D]` concept bank after the `[B, HW, D]` patch tokens.
pub fn build_input_sequence(tape: &mut Tape, patches: Var, bank: Var) -> Result<Var> {
    let (ps, bs) = (tape.shape(patches).to_vec(), tape.shape(bank).to_vec());
    if ps.len() != 3 || bs.len() != 2 || ps[2] != bs[1] {
        return Err(Error::shape(format!(
            "patch tokens {ps:?} and concept bank {bs:?} differ in width"
        )));
    }
    let per_image = tape.broadcast(bank, ps[0]);
    tape.concat(patches, per_image, 1)
}

/// Multi-head self-attention over `[B, S, D]`.
///
/// Returns the projected output and the attention probabilities `[B, heads, S, S]`.
pub fn msa_forward(
    tape: &mut Tape,
    params: &Binding,
    prefix: &str,
    z: Var,
    heads: usize,
) -> Result<(Var, Var)> {
    let shape = tape.shape(z).to_vec();
    let (batch, seq, dim) = (shape[0], shape[1], shape[2]);
    let head_dim = dim / heads;
    let qkv = linear(tape, params, &format!("{prefix}.qkv"), z, true)?;
    let qkv = tape.reshape(qkv, &[batch, seq, 3, heads, head_dim])?;
    let qkv = tape.permute(qkv, &[2, 0, 3, 1, 4])?;
    let mut parts = [qkv; 3];
    for (i, part) in parts.iter_mut().enumerate() {
        let p = tape.narrow(qkv, 0, i, 1)?;
        *part = tape.reshape(p, &[batch * heads, seq, head_dim])?;
    }
    let [q, k, v] = parts;
    let logits = tape.batch_matmul(q, k, true)?;
    let logits = tape.scale(logits, 1.0 / (head_dim as f64).sqrt());
    let attn = tape.softmax(logits);
    let ctx = tape.batch_matmul(attn, v, false)?;
    let ctx = tape.reshape(ctx, &[batch, heads, seq, head_dim])?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &[batch, seq, dim])?;
    let out = linear(tape, params, &format!("{prefix}.proj"), ctx, true)?;
    let attn = tape.reshape(attn, &[batch, heads, seq, seq])?;
    Ok((out, attn))
}

/// `s · W_up · GELU(W_down · LN(z))`; residuals are added by the caller.
pub fn adapter_forward(tape: &mut Tape, params: &Binding, prefix: &str, z: Var) -> Result<Var> {
    let h = layer_norm(tape, params, &format!("{prefix}.ln"), z)?;
    let h = linear(tape, params, &format!("{prefix}.down"), h, false)?;
    let h = tape.gelu(h);
    let h = linear(tape, params, &format!("{prefix}.up"), h, false)?;
    let s = params.var(&format!("{prefix}.scale"))?;
    tape.scale_by(h, s)
}

fn mlp_forward(tape: &mut Tape, params: &Binding, prefix: &str, z: Var) -> Result<Var> {
    let h = linear(tape, params, &format!("{prefix}.fc1"), z, true)?;
    let h = tape.gelu(h);
    linear(tape, params, &format!("{prefix}.fc2"), h, true)
}

/// One pre-norm transformer block:
///
/// ```text
/// a   = MSA(LN(z))
/// mid = adapter(a) + a + z
/// m   = MLP(LN(mid))
/// out = adapter(m) + m + mid
/// ```
///
/// Without adapters the adapter terms are dropped.
pub fn block_forward(
    tape: &mut Tape,
    params: &Binding,
    cfg: &EncoderConfig,
    layer: usize,
    z: Var,
) -> Result<(Var, Var)> {
    let p = block_prefix(layer);
    let normed = layer_norm(tape, params, &format!("{p}.ln1"), z)?;
    let (a, attn) = msa_forward(tape, params, &format!("{p}.msa"), normed, cfg.heads)?;
    let mut mid = tape.add(a, z)?;
    if cfg.adapter_enabled {
        let ad = adapter_forward(tape, params, &format!("{p}.adapter1"), a)?;
        mid = tape.add(mid, ad)?;
    }
    let normed = layer_norm(tape, params, &format!("{p}.ln2"), mid)?;
    let m = mlp_forward(tape, params, &format!("{p}.mlp"), normed)?;
    let mut out = tape.add(m, mid)?;
    if cfg.adapter_enabled {
        let ad = adapter_forward(tape, params, &format!("{p}.adapter2"), m)?;
        out = tape.add(out, ad)?;
    }
    Ok((out, attn))
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    /// Final token sequence `[B, HW + M, D]`.
    pub tokens: Var,
    /// Concept features `[B, M, D]`, the last M rows of the final sequence.
    pub concept_features: Var,
    /// Head-averaged last-layer attention from concept queries to patch keys,
    /// `[B, M, HW]`, sliced without renormalization.
    pub attention: Var,
    /// Raw last-layer attention `[B, heads, S, S]`; `None` when depth is 0.
    pub last_attention: Option<Var>,
}

/// Runs the encoder on `[B, C, H, W]` images.
pub fn encode(
    tape: &mut Tape,
    params: &Binding,
    cfg: &EncoderConfig,
    images: &Tensor,
) -> Result<EncoderOutput> {
    cfg.validate()?;
    let batch = images.shape().first().copied().unwrap_or(0);
    let (hw, m) = (cfg.num_patches(), cfg.num_concepts);
    let patches = patch_embed(tape, params, cfg, images)?;
    let bank = params.var("concepts")?;
    let mut z = build_input_sequence(tape, patches, bank)?;
    let mut last = None;
    for layer in 0..cfg.depth {
        let (next, attn) = block_forward(tape, params, cfg, layer, z)?;
        z = next;
        last = Some(attn);
    }
    let concept_features = tape.narrow(z, 1, hw, m)?;
    let attention = match last {
        Some(attn) => concept_attention(tape, attn, hw, m)?,
        None => tape.constant(Tensor::zeros(&[batch, m, hw])),
    };
    Ok(EncoderOutput {
        tokens: z,
        concept_features,
        attention,
        last_attention: last,
    })
}

/// Averages `[B, heads, S, S]` over heads and keeps concept-query rows and
/// patch-key columns.
pub fn concept_attention(tape: &mut Tape, attn: Var, num_patches: usize, num_concepts: usize) -> Result<Var> {
    let avg = tape.mean_axis(attn, 1)?;
    let rows = tape.narrow(avg, 1, num_patches, num_concepts)?;
    tape.narrow(rows, 2, 0, num_patches)
}
