//! The subcommands as library functions: each is a pure function of its
//! inputs and writes deterministic bytes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use concepthash::centers::{CenterMode, TextEmbeddings};
use concepthash::dataset::Dataset;
use concepthash::hash_head::binarize_rows;
use concepthash::model::ConceptHash;
use concepthash::retrieval::{
    attention_correlation, hamming_distance, matrix_csv, matrix_rows, mean_localization_error, CodeDatabase,
    EvalReport,
};
use concepthash::synth::Split;
use concepthash::tensor::{cosine_similarity, Tensor};
use concepthash::train::{train, EpochMetrics};
use image::GrayImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.json";
pub const CORRELATION_FILE: &str = "correlation.csv";

/// Loads the training or query split named by the config, falling back to
/// the synthetic generator.
pub fn load_split(cfg: &RunConfig, split: Split) -> Result<Dataset> {
    let path = match split {
        Split::Train => &cfg.paths.train_data,
        Split::Test => &cfg.paths.query_data,
    };
    match path {
        Some(dir) => Ok(Dataset::load_dir(dir)?),
        None => Ok(cfg.synthetic.generate(cfg.seed, split)?),
    }
}

pub fn load_embeddings(cfg: &RunConfig) -> Result<Option<TextEmbeddings>> {
    match (&cfg.paths.embeddings, cfg.model.center_mode) {
        (Some(path), CenterMode::Language) => Ok(Some(TextEmbeddings::load(path)?)),
        (None, CenterMode::Language) => Err(CliError::Config(
            "paths.embeddings: language centers need a class-name embedding file".into(),
        )),
        _ => Ok(None),
    }
}

/// Freshly initialized model for `cfg`.
pub fn build_model(cfg: &RunConfig) -> Result<ConceptHash> {
    let text = load_embeddings(cfg)?;
    Ok(ConceptHash::new(cfg.model.clone(), text.as_ref(), cfg.seed)?)
}

pub struct TrainOutcome {
    pub model: ConceptHash,
    pub history: Vec<EpochMetrics>,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

/// Trains per `cfg`, writing the checkpoint, `metrics.jsonl` (one line per
/// epoch), and the effective config. `on_epoch` observes every epoch.
pub fn train_run(
    cfg: &RunConfig,
    mut on_epoch: impl FnMut(&EpochMetrics, &ConceptHash) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = load_split(cfg, Split::Train)?;
    let mut model = build_model(cfg)?;
    fs::create_dir_all(&cfg.paths.output_dir)?;
    fs::write(cfg.paths.output_dir.join(CONFIG_FILE), cfg.to_json())?;
    let metrics_path = cfg.paths.output_dir.join(METRICS_FILE);
    let mut log = fs::File::create(&metrics_path)?;
    let mut failure = None;
    let history = train(
        &mut model,
        &data,
        &cfg.effective_train(),
        &cfg.loss,
        |m, model| {
            let line = serde_json::to_string(m)?;
            writeln!(log, "{line}")?;
            on_epoch(m, model).map_err(|e| {
                let msg = e.to_string();
                failure = Some(e);
                concepthash::Error::Data(msg)
            })
        },
    );
    let history = match (history, failure) {
        (_, Some(e)) => return Err(e),
        (h, None) => h?,
    };
    if let Some(dir) = cfg
        .paths
        .checkpoint
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
    {
        fs::create_dir_all(dir)?;
    }
    model.save(&cfg.paths.checkpoint)?;
    Ok(TrainOutcome {
        model,
        history,
        checkpoint: cfg.paths.checkpoint.clone(),
        metrics: metrics_path,
    })
}

/// Packed codes plus labels (and families when every sample has one).
pub fn encode_dataset(model: &ConceptHash, data: &Dataset) -> Result<CodeDatabase> {
    let (codes, _) = model.infer(&data.all_images()?)?;
    Ok(CodeDatabase::new(
        model.config.bits,
        binarize_rows(&codes),
        Some(data.labels()),
        data.families(),
    )?)
}

pub fn cmd_encode(
    checkpoint: &Path,
    data: &Dataset,
    expected_bits: Option<usize>,
    out: &Path,
) -> Result<CodeDatabase> {
    let model = ConceptHash::load(checkpoint)?;
    if let Some(k) = expected_bits {
        if k != model.config.bits {
            return Err(CliError::Config(format!(
                "--bits {k} does not match the checkpoint's {} bits",
                model.config.bits
            )));
        }
    }
    let db = encode_dataset(&model, data)?;
    db.save(out)?;
    Ok(db)
}

/// Attention metrics added to an evaluation report.
pub fn attention_metrics(model: &ConceptHash, data: &Dataset, report: &mut EvalReport) -> Result<()> {
    let (_, attn) = model.infer(&data.all_images()?)?;
    report.correlation = Some(matrix_rows(&attention_correlation(&attn)?));
    let marks: Vec<Vec<[f64; 2]>> = data.samples.iter().map(|s| s.landmarks.clone()).collect();
    if marks.iter().all(|m| !m.is_empty()) {
        let enc = &model.config.encoder;
        report.localization_error = Some(mean_localization_error(
            &attn,
            &marks,
            enc.image_size,
            enc.patch_size,
        )?);
    }
    Ok(())
}

/// Evaluates `query` against `database`; when both name the same file the
/// collection is loaded once and self-matches are excluded.
pub fn cmd_eval(
    query: &Path,
    database: &Path,
    family: bool,
    r: Option<usize>,
    attention: Option<(&Path, &Dataset)>,
) -> Result<EvalReport> {
    let db = CodeDatabase::load(database)?;
    let same = fs::canonicalize(query)? == fs::canonicalize(database)?;
    let loaded;
    let q = if same {
        &db
    } else {
        loaded = CodeDatabase::load(query)?;
        &loaded
    };
    if q.bits != db.bits {
        return Err(CliError::Config(format!(
            "query codes have {} bits, database codes {}",
            q.bits, db.bits
        )));
    }
    let mut report = EvalReport::evaluate(q, &db, r, family)?;
    if let Some((checkpoint, data)) = attention {
        attention_metrics(&ConceptHash::load(checkpoint)?, data, &mut report)?;
    }
    Ok(report)
}

/// Bilinear upsampling of a `grid × grid` map to `size × size` (pixel
/// centers at half-integer positions), min–max scaled to `[0, 255]`.
pub fn heatmap(map: &[f64], grid: usize, size: usize) -> Vec<u8> {
    let scale = grid as f64 / size as f64;
    let max_idx = (grid - 1) as f64;
    let at = |x: usize, y: usize| map[y * grid + x];
    let mut up = Vec::with_capacity(size * size);
    for py in 0..size {
        let gy = ((py as f64 + 0.5) * scale - 0.5).clamp(0.0, max_idx);
        let (y0, fy) = (gy.floor() as usize, gy - gy.floor());
        let y1 = (y0 + 1).min(grid - 1);
        for px in 0..size {
            let gx = ((px as f64 + 0.5) * scale - 0.5).clamp(0.0, max_idx);
            let (x0, fx) = (gx.floor() as usize, gx - gx.floor());
            let x1 = (x0 + 1).min(grid - 1);
            up.push(
                (1.0 - fy) * ((1.0 - fx) * at(x0, y0) + fx * at(x1, y0))
                    + fy * ((1.0 - fx) * at(x0, y1) + fx * at(x1, y1)),
            );
        }
    }
    let lo = up.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = up.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    up.iter()
        .map(|&v| {
            if span > 0.0 {
                ((v - lo) / span * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttnSummary {
    pub images: usize,
    pub heatmaps: usize,
    pub correlation: Vec<Vec<f64>>,
}

/// Writes `img{i}_concept{m}.png` heatmaps for the first `limit` images and
/// the attention correlation matrix over all of them.
pub fn cmd_attn(
    checkpoint: &Path,
    data: &Dataset,
    limit: Option<usize>,
    out_dir: &Path,
) -> Result<AttnSummary> {
    let model = ConceptHash::load(checkpoint)?;
    let n = limit.unwrap_or(data.len()).min(data.len());
    let idx: Vec<usize> = (0..n).collect();
    let (_, attn) = model.infer(&data.batch(&idx)?)?;
    let enc = &model.config.encoder;
    let (m, hw, grid, size) = (enc.num_concepts, enc.num_patches(), enc.grid(), enc.image_size);
    fs::create_dir_all(out_dir)?;
    let mut heatmaps = 0;
    for i in 0..n {
        for c in 0..m {
            let start = (i * m + c) * hw;
            let pixels = heatmap(&attn.data()[start..start + hw], grid, size);
            GrayImage::from_raw(size as u32, size as u32, pixels)
                .expect("buffer matches image size")
                .save(out_dir.join(format!("img{i:05}_concept{c}.png")))?;
            heatmaps += 1;
        }
    }
    let corr = if n > 0 {
        attention_correlation(&attn)?
    } else {
        Tensor::zeros(&[m, m])
    };
    fs::write(out_dir.join(CORRELATION_FILE), matrix_csv(&corr))?;
    Ok(AttnSummary {
        images: n,
        heatmaps,
        correlation: matrix_rows(&corr),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CenterStats {
    pub mode: CenterMode,
    pub num_classes: usize,
    pub bits: usize,
    pub cosine: Vec<Vec<f64>>,
    pub hamming: Vec<Vec<u32>>,
    pub mean_offdiag_cosine: f64,
    pub min_offdiag_hamming: u32,
    pub mean_offdiag_hamming: f64,
    pub all_zero: bool,
}

/// Pairwise cosine of the centers and Hamming distance of their signs.
pub fn center_stats(o: &Tensor, mode: CenterMode) -> Result<CenterStats> {
    let (c, k) = (o.shape()[0], o.shape()[1]);
    let codes = binarize_rows(o);
    let mut cosine = vec![vec![0.0; c]; c];
    let mut hamming = vec![vec![0u32; c]; c];
    let (mut cos_sum, mut ham_sum, mut ham_min) = (0.0, 0.0, u32::MAX);
    for i in 0..c {
        for j in 0..c {
            cosine[i][j] = cosine_similarity(o.row(i), o.row(j), concepthash::objective::COSINE_EPS)?;
            hamming[i][j] = hamming_distance(&codes[i], &codes[j])?;
            if i != j {
                cos_sum += cosine[i][j];
                ham_sum += hamming[i][j] as f64;
                ham_min = ham_min.min(hamming[i][j]);
            }
        }
    }
    let pairs = (c * c.saturating_sub(1)).max(1) as f64;
    Ok(CenterStats {
        mode,
        num_classes: c,
        bits: k,
        cosine,
        hamming,
        mean_offdiag_cosine: cos_sum / pairs,
        min_offdiag_hamming: if c > 1 { ham_min } else { 0 },
        mean_offdiag_hamming: ham_sum / pairs,
        all_zero: o.data().iter().all(|&v| v == 0.0),
    })
}

/// Writes `centers.csv` (o), `centers_sign.csv` (sign(o) as ±1) and
/// `centers_stats.json`.
pub fn cmd_centers(model: &ConceptHash, out_dir: &Path) -> Result<CenterStats> {
    let o = model.center_matrix()?;
    let stats = center_stats(&o, model.config.center_mode)?;
    if stats.all_zero {
        eprintln!("warning: every class center is zero; their signs carry no information");
    }
    let signs: Vec<f64> = binarize_rows(&o).iter().flat_map(|c| c.to_signs()).collect();
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("centers.csv"), matrix_csv(&o))?;
    fs::write(
        out_dir.join("centers_sign.csv"),
        matrix_csv(&Tensor::new(o.shape(), signs)?),
    )?;
    fs::write(
        out_dir.join("centers_stats.json"),
        serde_json::to_string_pretty(&stats).expect("stats serialize"),
    )?;
    Ok(stats)
}

/// SHA-256 of a file, hex encoded.
pub fn file_digest(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}
