//! Training objective: cosine-softmax classification against class centers,
//! the same against binarized centers, concept attention diversity, and
//! per-concept discrimination. All terms share one temperature.

use serde::{Deserialize, Serialize};

use crate::centers::binarize_centers;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const COSINE_EPS: f64 = 1e-8;
pub const DEFAULT_TAU: f64 = 0.125;

/// How concept attention maps are compared in the diversity term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CsdMode {
    /// Cosine per sample over the HW axis, averaged over `B·M·(M-1)` ordered pairs.
    #[default]
    PerSample,
    /// Cosine of batch-flattened `[B·HW]` maps, averaged over `M·(M-1)` ordered pairs.
    BatchFlattened,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub clf: f64,
    pub quan: f64,
    pub csd: f64,
    pub cd: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            clf: 1.0,
            quan: 1.0,
            csd: 1.0,
            cd: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub tau: f64,
    pub enable_quan: bool,
    pub enable_csd: bool,
    pub enable_cd: bool,
    pub weights: LossWeights,
    pub csd_mode: CsdMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            enable_quan: true,
            enable_csd: true,
            enable_cd: true,
            weights: LossWeights::default(),
            csd_mode: CsdMode::PerSample,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau.is_nan() || self.tau <= 0.0 {
            return Err(Error::config("loss.tau", "temperature must be positive"));
        }
        Ok(())
    }

    /// Short tag naming the enabled terms, e.g. `clf+quan+cd`.
    pub fn composition(&self) -> String {
        let mut parts = vec!["clf"];
        if self.enable_quan {
            parts.push("quan");
        }
        if self.enable_csd {
            parts.push("csd");
        }
        if self.enable_cd {
            parts.push("cd");
        }
        parts.join("+")
    }
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::shape(format!("{} labels for {rows} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::OutOfRange {
            index: bad,
            limit: classes,
        });
    }
    Ok(())
}

/// `cos(x_i, w_c) / tau` for `x: [N, F]`, `w: [C, F]`, giving `[N, C]`.
pub fn cosine_logits(tape: &mut Tape, x: Var, w: Var, tau: f64) -> Result<Var> {
    let xn = tape.l2_normalize(x, COSINE_EPS);
    let wn = tape.l2_normalize(w, COSINE_EPS);
    let wt = tape.transpose(wn)?;
    let cos = tape.matmul(xn, wt)?;
    Ok(tape.scale(cos, 1.0 / tau))
}

/// Mean negative log-softmax of the labelled class.
fn softmax_nll(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let logp = tape.log_softmax(logits);
    let picked = tape.pick(logp, labels)?;
    let mean = tape.mean(picked);
    Ok(tape.scale(mean, -1.0))
}

/// Classification of continuous codes `[N, K]` against centers `[C, K]`.
pub fn loss_clf(tape: &mut Tape, codes: Var, labels: &[usize], centers: Var, tau: f64) -> Result<Var> {
    let (n, c) = (tape.shape(codes)[0], tape.shape(centers)[0]);
    check_labels(labels, n, c)?;
    let logits = cosine_logits(tape, codes, centers, tau)?;
    softmax_nll(tape, logits, labels)
}

/// Classification against `sign(o)`; the binarized centers are constants.
pub fn loss_quan(tape: &mut Tape, codes: Var, labels: &[usize], centers: &Tensor, tau: f64) -> Result<Var> {
    let signed = tape.constant(binarize_centers(centers));
    loss_clf(tape, codes, labels, signed, tau)
}

fn off_diagonal_mask(batch: usize, m: usize) -> Tensor {
    let mut mask = Tensor::ones(&[batch, m, m]);
    for b in 0..batch {
        for i in 0..m {
            mask.data_mut()[(b * m + i) * m + i] = 0.0;
        }
    }
    mask
}

/// Mean pairwise cosine between concept attention maps `[B, M, HW]` over ordered pairs `i != j`.
/// Zero when `M = 1`.
pub fn loss_csd(tape: &mut Tape, attn: Var, mode: CsdMode) -> Result<Var> {
    let shape = tape.shape(attn).to_vec();
    if shape.len() != 3 {
        return Err(Error::shape(format!(
            "attention maps must be [B, M, HW], got {shape:?}"
        )));
    }
    let (batch, m, hw) = (shape[0], shape[1], shape[2]);
    if m < 2 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let (gram, groups) = match mode {
        CsdMode::PerSample => {
            let an = tape.l2_normalize(attn, COSINE_EPS);
            (tape.batch_matmul(an, an, true)?, batch)
        }
        CsdMode::BatchFlattened => {
            let per_concept = tape.permute(attn, &[1, 0, 2])?;
            let flat = tape.reshape(per_concept, &[1, m, batch * hw])?;
            let an = tape.l2_normalize(flat, COSINE_EPS);
            (tape.batch_matmul(an, an, true)?, 1)
        }
    };
    let mask = tape.constant(off_diagonal_mask(groups, m));
    let off = tape.mul(gram, mask)?;
    let total = tape.sum(off);
    Ok(tape.scale(total, 1.0 / (groups * m * (m - 1)) as f64))
}

/// Per-concept classification of `Z_m + E_m` against learnable class weights `W: [C, D]`.
pub fn loss_cd(
    tape: &mut Tape,
    features: Var,
    specificity: Var,
    labels: &[usize],
    weights: Var,
    tau: f64,
) -> Result<Var> {
    let shape = tape.shape(features).to_vec();
    if shape.len() != 3 || shape[1..] != *tape.shape(specificity) {
        return Err(Error::shape(format!(
            "features {shape:?} vs specificity {:?}",
            tape.shape(specificity)
        )));
    }
    let (batch, m, d) = (shape[0], shape[1], shape[2]);
    if tape.shape(weights).len() != 2 || tape.shape(weights)[1] != d {
        return Err(Error::shape(format!(
            "class weights {:?} vs feature width {d}",
            tape.shape(weights)
        )));
    }
    let classes = tape.shape(weights)[0];
    check_labels(labels, batch, classes)?;
    let shifted = tape.add(features, specificity)?;
    let flat = tape.reshape(shifted, &[batch * m, d])?;
    let logits = cosine_logits(tape, flat, weights, tau)?;
    let per_slot: Vec<usize> = labels.iter().flat_map(|&y| std::iter::repeat_n(y, m)).collect();
    softmax_nll(tape, logits, &per_slot)
}

/// The individual loss terms of one forward pass; disabled terms are `None`.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub clf: Var,
    pub quan: Option<Var>,
    pub csd: Option<Var>,
    pub cd: Option<Var>,
}

/// Scalar values of the loss terms, with disabled terms reported as 0.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub clf: f64,
    pub quan: f64,
    pub csd: f64,
    pub cd: f64,
}

/// Weighted sum of the enabled terms.
pub fn total_loss(tape: &mut Tape, terms: &LossTerms, weights: &LossWeights) -> Result<Var> {
    let mut total = tape.scale(terms.clf, weights.clf);
    for (term, w) in [
        (terms.quan, weights.quan),
        (terms.csd, weights.csd),
        (terms.cd, weights.cd),
    ] {
        if let Some(t) = term {
            let scaled = tape.scale(t, w);
            total = tape.add(total, scaled)?;
        }
    }
    Ok(total)
}

pub fn loss_values(tape: &Tape, terms: &LossTerms, total: Var) -> LossValues {
    let get = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).data()[0]);
    LossValues {
        total: tape.value(total).data()[0],
        clf: tape.value(terms.clf).data()[0],
        quan: get(terms.quan),
        csd: get(terms.csd),
        cd: get(terms.cd),
    }
}
