//! Concept-generic hashing head and packed binary codes.
//!
//! Every concept feature is shifted by its specificity embedding `E_m` and
//! mapped through one shared affine projection to a `K/M`-bit sub-code;
//! sub-codes are concatenated in concept order.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{truncated_normal, Binding, ParamStore, INIT_STD};
use crate::tensor::{Tape, Tensor, Var};
use crate::vit::linear;

pub const PROJECTION: &str = "hash.proj";
/// The specificity embedding `E`, shared with the concept discrimination loss.
pub const SPECIFICITY: &str = "hash.specificity";

pub fn validate_bits(bits: usize, num_concepts: usize) -> Result<()> {
    if bits == 0 {
        return Err(Error::config("bits", "must be positive"));
    }
    if num_concepts == 0 || !bits.is_multiple_of(num_concepts) {
        return Err(Error::config(
            "bits",
            format!("{bits} bits cannot be split evenly across {num_concepts} concepts"),
        ));
    }
    Ok(())
}

pub fn init_params<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    dim: usize,
    bits: usize,
    num_concepts: usize,
) -> Result<()> {
    validate_bits(bits, num_concepts)?;
    let sub = bits / num_concepts;
    store.insert(
        format!("{PROJECTION}.weight"),
        truncated_normal(rng, &[dim, sub], INIT_STD),
        true,
    )?;
    store.insert(format!("{PROJECTION}.bias"), Tensor::zeros(&[sub]), true)?;
    store.insert(
        SPECIFICITY,
        truncated_normal(rng, &[num_concepts, dim], INIT_STD),
        true,
    )
}

/// Sub-code `h(feature + E_m)` for a `[D]` or `[N, D]` feature.
pub fn subcode(tape: &mut Tape, params: &Binding, feature: Var, m: usize) -> Result<Var> {
    let e = params.var(SPECIFICITY)?;
    let num_concepts = tape.shape(e)[0];
    if m >= num_concepts {
        return Err(Error::OutOfRange {
            index: m,
            limit: num_concepts,
        });
    }
    let width = tape.shape(e)[1];
    let e_m = tape.narrow(e, 0, m, 1)?;
    let e_m = tape.reshape(e_m, &[width])?;
    let shifted = tape.add(feature, e_m)?;
    linear(tape, params, PROJECTION, shifted, true)
}

/// Continuous code `[B, K]` from concept features `[B, M, D]`; sub-code `m`
/// occupies columns `m·K/M .. (m+1)·K/M`.
pub fn full_code(tape: &mut Tape, params: &Binding, features: Var) -> Result<Var> {
    let e = params.var(SPECIFICITY)?;
    let shape = tape.shape(features).to_vec();
    if shape.len() != 3 || shape[1..] != *tape.shape(e) {
        return Err(Error::shape(format!(
            "concept features {shape:?} vs specificity {:?}",
            tape.shape(e)
        )));
    }
    let shifted = tape.add(features, e)?;
    let sub = linear(tape, params, PROJECTION, shifted, true)?;
    let width = tape.shape(sub)[2];
    tape.reshape(sub, &[shape[0], shape[1] * width])
}

/// A K-bit binary code; bit `j` lives in word `j / 64` at position `j % 64`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct HashCode {
    words: Vec<u64>,
    len: usize,
}

impl HashCode {
    pub fn zeros(len: usize) -> Self {
        Self {
            words: vec![0; len.div_ceil(64)],
            len,
        }
    }

    /// Packs bits given as booleans.
    pub fn from_bits(bits: &[bool]) -> Self {
        let mut code = Self::zeros(bits.len());
        for (j, &b) in bits.iter().enumerate() {
            if b {
                code.words[j / 64] |= 1 << (j % 64);
            }
        }
        code
    }

    /// Reassembles a code from packed words, clearing bits past `len`.
    pub fn from_words(mut words: Vec<u64>, len: usize) -> Result<Self> {
        if words.len() != len.div_ceil(64) {
            return Err(Error::shape(format!(
                "{} words cannot hold exactly {len} bits",
                words.len()
            )));
        }
        if !len.is_multiple_of(64) {
            if let Some(last) = words.last_mut() {
                *last &= (1u64 << (len % 64)) - 1;
            }
        }
        Ok(Self { words, len })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn bit(&self, j: usize) -> bool {
        assert!(j < self.len, "bit {j} out of range for {}-bit code", self.len);
        self.words[j / 64] >> (j % 64) & 1 == 1
    }

    pub fn to_bits(&self) -> Vec<bool> {
        (0..self.len).map(|j| self.bit(j)).collect()
    }

    /// `+1` for set bits, `-1` otherwise.
    pub fn to_signs(&self) -> Vec<f64> {
        (0..self.len)
            .map(|j| if self.bit(j) { 1.0 } else { -1.0 })
            .collect()
    }

    /// Popcount of the XOR; both codes must have the same length.
    pub fn hamming(&self, other: &HashCode) -> Result<u32> {
        if self.len != other.len {
            return Err(Error::shape(format!(
                "hamming distance between {}-bit and {}-bit codes",
                self.len, other.len
            )));
        }
        Ok(self
            .words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a ^ b).count_ones())
            .sum())
    }
}

/// Sign binarization: component `>= 0` becomes bit 1, `< 0` bit 0.
pub fn binarize(code: &[f64]) -> HashCode {
    let bits: Vec<bool> = code.iter().map(|&v| v >= 0.0).collect();
    HashCode::from_bits(&bits)
}

/// Binarizes every row of a `[N, K]` tensor.
pub fn binarize_rows(codes: &Tensor) -> Vec<HashCode> {
    let k = codes.shape().last().copied().unwrap_or(0);
    if k == 0 {
        return Vec::new();
    }
    codes.data().chunks(k).map(binarize).collect()
}
