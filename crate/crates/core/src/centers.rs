//! Hash class centers: language-guided projection of frozen text embeddings,
//! fixed random orthogonal ±1 codes, or a free learnable matrix.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{truncated_normal, Binding, ParamStore, INIT_STD};
use crate::tensor::{Tape, Tensor, Var};

pub const EMBEDDING_MAGIC: [u8; 4] = *b"CHEM";
pub const EMBEDDING_VERSION: u32 = 1;

const TEXT: &str = "centers.text";
const PROJECTION: &str = "centers.t";
const FIXED: &str = "centers.fixed";
const FREE: &str = "centers.o";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CenterMode {
    #[default]
    Language,
    RandomOrthogonal,
    Learnable,
}

impl std::str::FromStr for CenterMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "language" => Ok(Self::Language),
            "random_orthogonal" | "random" => Ok(Self::RandomOrthogonal),
            "learnable" => Ok(Self::Learnable),
            other => Err(Error::config("center_mode", format!("unknown mode {other:?}"))),
        }
    }
}

/// Class-name text embeddings, one row per class.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbeddings {
    pub class_names: Vec<String>,
    /// `[C, D_text]`
    pub matrix: Tensor,
}

impl TextEmbeddings {
    pub fn new(class_names: Vec<String>, matrix: Tensor) -> Result<Self> {
        let s = matrix.shape();
        if s.len() != 2 {
            return Err(Error::shape(format!("embedding matrix must be 2-D, got {s:?}")));
        }
        if s[0] == 0 {
            return Err(Error::Data("empty class set".into()));
        }
        if s[0] != class_names.len() {
            return Err(Error::CountMismatch(format!(
                "{} embedding rows for {} class names",
                s[0],
                class_names.len()
            )));
        }
        if matrix.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Data("NaN in embedding matrix".into()));
        }
        Ok(Self { class_names, matrix })
    }

    pub fn num_classes(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.matrix.shape()[1]
    }

    /// Serializes to the `CHEM` binary layout: magic, version, C, D_text
    /// (little-endian u32), C·D_text little-endian f32, then a UTF-8 JSON
    /// array of class names.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.matrix.numel());
        out.extend_from_slice(&EMBEDDING_MAGIC);
        out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.num_classes() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        for &v in self.matrix.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.extend_from_slice(
            serde_json::to_string(&self.class_names)
                .expect("strings serialize")
                .as_bytes(),
        );
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Truncated {
                expected: 16,
                found: bytes.len(),
            });
        }
        let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
        if magic != EMBEDDING_MAGIC {
            return Err(Error::BadMagic {
                expected: EMBEDDING_MAGIC,
                found: magic,
            });
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        let version = word(4);
        if version != EMBEDDING_VERSION {
            return Err(Error::Format(format!("unsupported embedding version {version}")));
        }
        let (classes, dim) = (word(8) as usize, word(12) as usize);
        if classes == 0 {
            return Err(Error::Data("empty class set".into()));
        }
        let payload_end = 16 + 4 * classes * dim;
        if bytes.len() < payload_end {
            return Err(Error::Truncated {
                expected: payload_end,
                found: bytes.len(),
            });
        }
        let values = bytes[16..payload_end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let names: Vec<String> = serde_json::from_slice(&bytes[payload_end..])
            .map_err(|e| Error::Format(format!("class-name list: {e}")))?;
        Self::new(names, Tensor::new(&[classes, dim], values)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }
}

/// Adds the parameters (and frozen buffers) for the chosen center mode.
pub fn init_params<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    mode: CenterMode,
    num_classes: usize,
    bits: usize,
    text: Option<&TextEmbeddings>,
    seed: u64,
) -> Result<()> {
    match mode {
        CenterMode::Language => {
            let text = text.ok_or_else(|| {
                Error::config("paths.embeddings", "language centers need a text-embedding file")
            })?;
            if text.num_classes() != num_classes {
                return Err(Error::CountMismatch(format!(
                    "embedding file has {} classes, model has {num_classes}",
                    text.num_classes()
                )));
            }
            store.insert(TEXT, text.matrix.clone(), false)?;
            store.insert(
                format!("{PROJECTION}.weight"),
                truncated_normal(rng, &[text.dim(), bits], INIT_STD),
                true,
            )?;
            store.insert(format!("{PROJECTION}.bias"), Tensor::zeros(&[bits]), true)
        }
        CenterMode::RandomOrthogonal => {
            store.insert(FIXED, random_orthogonal_centers(num_classes, bits, seed), false)
        }
        CenterMode::Learnable => {
            store.insert(FREE, truncated_normal(rng, &[num_classes, bits], INIT_STD), true)
        }
    }
}

/// Current center matrix `o`, `[C, K]`.
pub fn centers(tape: &mut Tape, params: &Binding, mode: CenterMode) -> Result<Var> {
    match mode {
        CenterMode::Language => {
            let e = params.var(TEXT)?;
            let w = params.var(&format!("{PROJECTION}.weight"))?;
            let b = params.var(&format!("{PROJECTION}.bias"))?;
            project_centers(tape, e, w, b)
        }
        CenterMode::RandomOrthogonal => params.var(FIXED),
        CenterMode::Learnable => params.var(FREE),
    }
}

/// `o_c = e_c · W + bias` for every class row.
pub fn project_centers(tape: &mut Tape, embeddings: Var, weight: Var, bias: Var) -> Result<Var> {
    let o = tape.matmul(embeddings, weight)?;
    tape.add(o, bias)
}

/// Evaluates the center matrix outside of training.
pub fn center_matrix(store: &ParamStore, mode: CenterMode) -> Result<Tensor> {
    let mut tape = Tape::new();
    let binding = store.bind(&mut tape);
    let o = centers(&mut tape, &binding, mode)?;
    Ok(tape.value(o).clone())
}

/// Orthonormalizes rows in place by modified Gram–Schmidt.
/// Returns `false` if a row collapses (rank deficiency).
pub fn gram_schmidt_rows(rows: &mut [Vec<f64>]) -> bool {
    for i in 0..rows.len() {
        for j in 0..i {
            let (done, rest) = rows.split_at_mut(i);
            let dot: f64 = rest[0].iter().zip(&done[j]).map(|(a, b)| a * b).sum();
            for (a, b) in rest[0].iter_mut().zip(&done[j]) {
                *a -= dot * b;
            }
        }
        let norm = rows[i].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return false;
        }
        rows[i].iter_mut().for_each(|v| *v /= norm);
    }
    true
}

/// Random ±1 centers: Gaussian rows, orthonormalized when `C <= K`, then signed.
pub fn random_orthogonal_centers(num_classes: usize, bits: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| (0..bits).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    if num_classes <= bits {
        let mut ortho = rows.clone();
        if gram_schmidt_rows(&mut ortho) {
            rows = ortho;
        }
    }
    let data = rows.iter().flatten().map(|&v| sign(v)).collect();
    Tensor::new(&[num_classes, bits], data).expect("shape matches")
}

fn sign(v: f64) -> f64 {
    if v >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Elementwise sign with `sign(0) = +1`.
pub fn binarize_centers(o: &Tensor) -> Tensor {
    let data = o.data().iter().map(|&v| sign(v)).collect();
    Tensor::new(o.shape(), data).expect("same shape")
}
