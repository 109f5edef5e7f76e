//! The full hashing model: encoder, hashing head, class centers, and the
//! concept discrimination weights, plus the checkpoint format.
//!
//! Checkpoint layout: one line of compact JSON (config and a manifest of
//! `name`/`shape`/`offset`/`trainable` entries, offsets counted in f32
//! elements), a `\n`, then every parameter as little-endian f32 in manifest
//! order.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::centers::{self, CenterMode, TextEmbeddings};
use crate::error::{Error, Result};
use crate::hash_head::{self, HashCode, SPECIFICITY};
use crate::objective::{self, LossConfig, LossTerms};
use crate::params::{truncated_normal, Binding, ParamStore, INIT_STD};
use crate::tensor::{Tape, Tensor, Var};
use crate::vit::{self, EncoderConfig};

pub const CD_WEIGHT: &str = "cd.weight";
const CHECKPOINT_FORMAT: &str = "concepthash-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;
const INFERENCE_CHUNK: usize = 64;

/// Scale of the encoder and hashing-head projection weights at init.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightInit {
    /// Truncated normal with σ = 0.02.
    #[default]
    TruncatedNormal,
    /// The same draw rescaled to σ = 1/√fan_in; trains from scratch far
    /// more readily than σ = 0.02.
    FanIn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Code length K.
    pub bits: usize,
    pub num_classes: usize,
    pub center_mode: CenterMode,
    pub center_seed: u64,
    /// Pixels are standardized as `(x - pixel_mean) / pixel_std` before encoding.
    pub pixel_mean: f64,
    pub pixel_std: f64,
    pub init: WeightInit,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            bits: 16,
            num_classes: 200,
            center_mode: CenterMode::Language,
            center_seed: 0,
            pixel_mean: 0.45,
            pixel_std: 0.27,
            init: WeightInit::TruncatedNormal,
        }
    }
}

impl ModelConfig {
    /// The from-scratch configuration used on the synthetic glyph set.
    pub fn desk() -> Self {
        Self {
            encoder: EncoderConfig::desk(),
            bits: 16,
            num_classes: 8,
            init: WeightInit::FanIn,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        hash_head::validate_bits(self.bits, self.encoder.num_concepts)?;
        if self.num_classes == 0 {
            return Err(Error::config("model.num_classes", "must be positive"));
        }
        if !(self.pixel_std > 0.0 && self.pixel_std.is_finite() && self.pixel_mean.is_finite()) {
            return Err(Error::config("model.pixel_std", "must be positive and finite"));
        }
        Ok(())
    }

    pub fn num_concepts(&self) -> usize {
        self.encoder.num_concepts
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ModelOutput {
    /// Continuous codes `[B, K]`.
    pub codes: Var,
    /// Concept features `[B, M, D]`.
    pub features: Var,
    /// Concept attention `[B, M, HW]`.
    pub attention: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct LossOutput {
    pub terms: LossTerms,
    pub total: Var,
    pub model: ModelOutput,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConceptHash {
    pub config: ModelConfig,
    pub params: ParamStore,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    config: ModelConfig,
    params: Vec<ManifestEntry>,
}

impl ConceptHash {
    pub fn new(config: ModelConfig, text: Option<&TextEmbeddings>, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        vit::init_params(&config.encoder, &mut params, &mut rng)?;
        hash_head::init_params(
            &mut params,
            &mut rng,
            config.encoder.dim,
            config.bits,
            config.num_concepts(),
        )?;
        centers::init_params(
            &mut params,
            &mut rng,
            config.center_mode,
            config.num_classes,
            config.bits,
            text,
            config.center_seed,
        )?;
        params.insert(
            CD_WEIGHT,
            truncated_normal(&mut rng, &[config.num_classes, config.encoder.dim], INIT_STD),
            true,
        )?;
        if config.init == WeightInit::FanIn {
            for p in params.iter_mut() {
                let projection = p.name.ends_with(".weight")
                    && p.value.shape().len() == 2
                    && (p.name.starts_with("patch.")
                        || p.name.starts_with("block.")
                        || p.name.starts_with("hash."));
                if projection {
                    let fan_in = p.value.shape()[0] as f64;
                    let factor = 1.0 / (fan_in.sqrt() * INIT_STD);
                    p.value.data_mut().iter_mut().for_each(|v| *v *= factor);
                }
            }
        }
        Ok(Self { config, params })
    }

    pub fn forward(&self, tape: &mut Tape, binding: &Binding, images: &Tensor) -> Result<ModelOutput> {
        let enc = vit::encode(tape, binding, &self.config.encoder, &self.standardize(images))?;
        let codes = hash_head::full_code(tape, binding, enc.concept_features)?;
        Ok(ModelOutput {
            codes,
            features: enc.concept_features,
            attention: enc.attention,
        })
    }

    pub fn standardize(&self, images: &Tensor) -> Tensor {
        let (mean, std) = (self.config.pixel_mean, self.config.pixel_std);
        let mut out = images.clone();
        out.data_mut().iter_mut().for_each(|v| *v = (*v - mean) / std);
        out
    }

    /// Forward pass plus every enabled loss term.
    pub fn loss(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        images: &Tensor,
        labels: &[usize],
        cfg: &LossConfig,
    ) -> Result<LossOutput> {
        let model = self.forward(tape, binding, images)?;
        let o = centers::centers(tape, binding, self.config.center_mode)?;
        let clf = objective::loss_clf(tape, model.codes, labels, o, cfg.tau)?;
        let quan = if cfg.enable_quan {
            let current = tape.value(o).clone();
            Some(objective::loss_quan(
                tape,
                model.codes,
                labels,
                &current,
                cfg.tau,
            )?)
        } else {
            None
        };
        let csd = if cfg.enable_csd {
            Some(objective::loss_csd(tape, model.attention, cfg.csd_mode)?)
        } else {
            None
        };
        let cd = if cfg.enable_cd {
            let e = binding.var(SPECIFICITY)?;
            let w = binding.var(CD_WEIGHT)?;
            Some(objective::loss_cd(tape, model.features, e, labels, w, cfg.tau)?)
        } else {
            None
        };
        let terms = LossTerms { clf, quan, csd, cd };
        let total = objective::total_loss(tape, &terms, &cfg.weights)?;
        Ok(LossOutput { terms, total, model })
    }

    /// Continuous codes `[N, K]` and concept attention `[N, M, HW]` without
    /// gradient tracking, evaluated in fixed-size chunks.
    pub fn infer(&self, images: &Tensor) -> Result<(Tensor, Tensor)> {
        let s = images.shape().to_vec();
        let n = s.first().copied().unwrap_or(0);
        let per_image: usize = s[1..].iter().product();
        let (k, m, hw) = (
            self.config.bits,
            self.config.num_concepts(),
            self.config.encoder.num_patches(),
        );
        let mut codes = Vec::with_capacity(n * k);
        let mut attn = Vec::with_capacity(n * m * hw);
        for start in (0..n).step_by(INFERENCE_CHUNK) {
            let end = (start + INFERENCE_CHUNK).min(n);
            let mut shape = s.clone();
            shape[0] = end - start;
            let chunk = Tensor::new(&shape, images.data()[start * per_image..end * per_image].to_vec())?;
            let mut tape = Tape::new();
            let binding = self.bind_frozen(&mut tape);
            let out = self.forward(&mut tape, &binding, &chunk)?;
            codes.extend_from_slice(tape.value(out.codes).data());
            attn.extend_from_slice(tape.value(out.attention).data());
        }
        Ok((Tensor::new(&[n, k], codes)?, Tensor::new(&[n, m, hw], attn)?))
    }

    pub fn hash(&self, images: &Tensor) -> Result<Vec<HashCode>> {
        let (codes, _) = self.infer(images)?;
        Ok(hash_head::binarize_rows(&codes))
    }

    /// Binds every parameter as a constant, for inference.
    fn bind_frozen(&self, tape: &mut Tape) -> Binding {
        let mut frozen = self.params.clone();
        for p in frozen.iter_mut() {
            p.trainable = false;
        }
        frozen.bind(tape)
    }

    pub fn center_matrix(&self) -> Result<Tensor> {
        centers::center_matrix(&self.params, self.config.center_mode)
    }

    pub fn to_checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let manifest = self
            .params
            .iter()
            .map(|p| {
                let entry = ManifestEntry {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    offset,
                    trainable: p.trainable,
                };
                offset += p.value.numel();
                entry
            })
            .collect();
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            params: manifest,
        };
        let mut out = serde_json::to_vec(&header)?;
        out.push(b'\n');
        for p in self.params.iter() {
            for &v in p.value.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let split = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("checkpoint header is not terminated".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[..split])?;
        if header.format != CHECKPOINT_FORMAT || header.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint {} v{}",
                header.format, header.version
            )));
        }
        header.config.validate()?;
        let payload = &bytes[split + 1..];
        let mut params = ParamStore::new();
        for entry in header.params {
            let numel: usize = entry.shape.iter().product();
            let (lo, hi) = (4 * entry.offset, 4 * (entry.offset + numel));
            if hi > payload.len() {
                return Err(Error::Truncated {
                    expected: hi,
                    found: payload.len(),
                });
            }
            let data = payload[lo..hi]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            params.insert(entry.name, Tensor::new(&entry.shape, data)?, entry.trainable)?;
        }
        Ok(Self {
            config: header.config,
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_checkpoint_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint_bytes(&fs::read(path)?)
    }

    /// Rounds all parameters to f32, matching what a checkpoint round trip yields.
    pub fn quantized_f32(&self) -> Self {
        let mut out = self.clone();
        for p in out.params.iter_mut() {
            for v in p.value.data_mut() {
                *v = *v as f32 as f64;
            }
        }
        out
    }
}
