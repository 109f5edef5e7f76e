#![allow(dead_code)]

use concepthash::centers::{CenterMode, TextEmbeddings};
use concepthash::model::{ConceptHash, ModelConfig, WeightInit};
use concepthash::tensor::Tensor;
use concepthash::vit::EncoderConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Image 16, patch 8, L=2, D=32, M=2, K=8, C=4.
pub fn tiny_config(mode: CenterMode) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            image_size: 16,
            patch_size: 8,
            channels: 1,
            depth: 2,
            dim: 32,
            heads: 4,
            mlp_ratio: 4,
            num_concepts: 2,
            adapter_dim: 8,
            adapter_enabled: true,
        },
        bits: 8,
        num_classes: 4,
        center_mode: mode,
        center_seed: 5,
        init: WeightInit::FanIn,
        ..ModelConfig::default()
    }
}

pub fn random_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub fn fake_text(classes: usize, dim: usize, seed: u64) -> TextEmbeddings {
    let names = (0..classes).map(|c| format!("class{c}")).collect();
    TextEmbeddings::new(names, random_tensor(&[classes, dim], seed, -1.0, 1.0)).unwrap()
}

/// Fan-in initialized so attention is far from uniform and every path
/// carries a non-negligible gradient.
pub fn tiny_model(mode: CenterMode, seed: u64) -> ConceptHash {
    let text = fake_text(4, 6, 99);
    ConceptHash::new(tiny_config(mode), Some(&text), seed).unwrap()
}

pub fn images(batch: usize, size: usize, seed: u64) -> Tensor {
    random_tensor(&[batch, 1, size, size], seed, 0.0, 1.0)
}
