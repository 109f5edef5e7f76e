//! Hamming ranking over packed codes, mAP@R evaluation, and the attention
//! interpretability metrics.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash_head::HashCode;
use crate::tensor::{cosine_similarity, Tensor};

pub const THREADS_ENV: &str = "CONCEPTHASH_THREADS";
const CODES_FORMAT: &str = "concepthash-codes";
const CODES_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct CodeDatabase {
    pub bits: usize,
    pub codes: Vec<HashCode>,
    pub labels: Option<Vec<usize>>,
    pub family_labels: Option<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct CodesHeader {
    format: String,
    version: u32,
    bits: usize,
    count: usize,
    has_labels: bool,
    has_families: bool,
}

impl CodeDatabase {
    pub fn new(
        bits: usize,
        codes: Vec<HashCode>,
        labels: Option<Vec<usize>>,
        family_labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        if let Some(bad) = codes.iter().find(|c| c.len() != bits) {
            return Err(Error::shape(format!(
                "{}-bit code in a {bits}-bit database",
                bad.len()
            )));
        }
        for (what, list) in [("labels", &labels), ("family labels", &family_labels)] {
            if let Some(list) = list {
                if list.len() != codes.len() {
                    return Err(Error::CountMismatch(format!(
                        "{} {what} for {} codes",
                        list.len(),
                        codes.len()
                    )));
                }
            }
        }
        Ok(Self {
            bits,
            codes,
            labels,
            family_labels,
        })
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    fn require_labels(&self) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::Data("code database has no labels".into()))
    }

    fn require_families(&self) -> Result<&[usize]> {
        self.family_labels
            .as_deref()
            .ok_or_else(|| Error::Data("code database has no family labels".into()))
    }

    /// One line of JSON header, `\n`, the packed little-endian u64 words of
    /// every code, then optional little-endian i32 labels and family labels.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = CodesHeader {
            format: CODES_FORMAT.into(),
            version: CODES_VERSION,
            bits: self.bits,
            count: self.len(),
            has_labels: self.labels.is_some(),
            has_families: self.family_labels.is_some(),
        };
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        for code in &self.codes {
            for w in code.words() {
                out.extend_from_slice(&w.to_le_bytes());
            }
        }
        for list in [&self.labels, &self.family_labels].into_iter().flatten() {
            for &l in list {
                out.extend_from_slice(&(l as i32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let split = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("code database header is not terminated".into()))?;
        let header: CodesHeader = serde_json::from_slice(&bytes[..split])?;
        if header.format != CODES_FORMAT || header.version != CODES_VERSION {
            return Err(Error::Format(format!(
                "unsupported code database {} v{}",
                header.format, header.version
            )));
        }
        let words = header.bits.div_ceil(64);
        let n = header.count;
        let lists = usize::from(header.has_labels) + usize::from(header.has_families);
        let body = &bytes[split + 1..];
        let expected = n * words * 8 + lists * n * 4;
        if body.len() != expected {
            return Err(Error::Truncated {
                expected,
                found: body.len(),
            });
        }
        let codes = body[..n * words * 8]
            .chunks_exact(words * 8)
            .map(|chunk| {
                let ws = chunk
                    .chunks_exact(8)
                    .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
                    .collect();
                HashCode::from_words(ws, header.bits)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut cursor = n * words * 8;
        let mut read_list = |present: bool| -> Result<Option<Vec<usize>>> {
            if !present {
                return Ok(None);
            }
            let list = body[cursor..cursor + 4 * n]
                .chunks_exact(4)
                .map(|b| {
                    let v = i32::from_le_bytes(b.try_into().expect("4 bytes"));
                    usize::try_from(v).map_err(|_| Error::Data(format!("negative label {v}")))
                })
                .collect::<Result<Vec<_>>>()?;
            cursor += 4 * n;
            Ok(Some(list))
        };
        let labels = read_list(header.has_labels)?;
        let families = read_list(header.has_families)?;
        Self::new(header.bits, codes, labels, families)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

pub fn hamming_distance(a: &HashCode, b: &HashCode) -> Result<u32> {
    a.hamming(b)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RankingResult {
    pub query: usize,
    /// Database indices, nearest first; ties in ascending index order.
    pub order: Vec<usize>,
    pub distances: Vec<u32>,
}

/// Stable counting sort of the database by Hamming distance to `q`.
pub fn rank_database(query: usize, q: &HashCode, db: &CodeDatabase) -> Result<RankingResult> {
    rank_excluding(query, q, db, None)
}

fn rank_excluding(
    query: usize,
    q: &HashCode,
    db: &CodeDatabase,
    exclude: Option<usize>,
) -> Result<RankingResult> {
    if q.len() != db.bits {
        return Err(Error::shape(format!(
            "{}-bit query against {}-bit database",
            q.len(),
            db.bits
        )));
    }
    let dist: Vec<u32> = db
        .codes
        .iter()
        .map(|c| q.hamming(c).expect("lengths checked"))
        .collect();
    let mut buckets = vec![Vec::new(); db.bits + 1];
    for (i, &d) in dist.iter().enumerate() {
        if Some(i) != exclude {
            buckets[d as usize].push(i);
        }
    }
    let order: Vec<usize> = buckets.into_iter().flatten().collect();
    let distances = order.iter().map(|&i| dist[i]).collect();
    Ok(RankingResult {
        query,
        order,
        distances,
    })
}

/// Average precision over the top `r` of a ranking, normalized by
/// `min(r, total relevant)`; 0 when nothing is relevant.
pub fn average_precision(relevant: &[bool], r: usize, total_relevant: usize) -> f64 {
    let denom = r.min(total_relevant);
    if denom == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &rel) in relevant.iter().take(r).enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    sum / denom as f64
}

#[cfg(feature = "parallel")]
fn with_pool<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    let threads = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0);
    match threads.and_then(|n| rayon::ThreadPoolBuilder::new().num_threads(n).build().ok()) {
        Some(pool) => pool.install(f),
        None => f(),
    }
}

fn mean_ap(
    queries: &CodeDatabase,
    q_keys: &[usize],
    db: &CodeDatabase,
    db_keys: &[usize],
    r: Option<usize>,
    self_exclude: bool,
) -> Result<f64> {
    if db.is_empty() {
        return Err(Error::Data("empty database".into()));
    }
    if queries.is_empty() {
        return Err(Error::Data("no queries".into()));
    }
    if queries.bits != db.bits {
        return Err(Error::shape(format!(
            "{}-bit queries against {}-bit database",
            queries.bits, db.bits
        )));
    }
    let pool_size = db.len() - usize::from(self_exclude);
    let r = r.unwrap_or(pool_size);
    if r == 0 || r > pool_size {
        return Err(Error::Contract(format!("R = {r} outside 1..={pool_size}")));
    }
    let mut key_counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &k in db_keys {
        *key_counts.entry(k).or_default() += 1;
    }
    let ap_of = |qi: usize| {
        let exclude = self_exclude.then_some(qi);
        let ranking = rank_excluding(qi, &queries.codes[qi], db, exclude).expect("bit lengths checked");
        let key = q_keys[qi];
        let rel: Vec<bool> = ranking.order.iter().map(|&i| db_keys[i] == key).collect();
        let total = key_counts.get(&key).copied().unwrap_or(0) - usize::from(self_exclude);
        average_precision(&rel, r, total)
    };
    #[cfg(feature = "parallel")]
    let aps: Vec<f64> = with_pool(|| (0..queries.len()).into_par_iter().map(ap_of).collect());
    #[cfg(not(feature = "parallel"))]
    let aps: Vec<f64> = (0..queries.len()).map(ap_of).collect();
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

/// mAP over the top `r` (default: the whole database) with same-label
/// relevance. When `queries` and `db` are the same object, each query's
/// own entry is left out.
pub fn map_at_r(queries: &CodeDatabase, db: &CodeDatabase, r: Option<usize>) -> Result<f64> {
    let self_exclude = std::ptr::eq(queries, db);
    mean_ap(
        queries,
        queries.require_labels()?,
        db,
        db.require_labels()?,
        r,
        self_exclude,
    )
}

/// mAP with relevance defined by coarse family labels.
pub fn family_map(queries: &CodeDatabase, db: &CodeDatabase, r: Option<usize>) -> Result<f64> {
    let self_exclude = std::ptr::eq(queries, db);
    mean_ap(
        queries,
        queries.require_families()?,
        db,
        db.require_families()?,
        r,
        self_exclude,
    )
}

/// `[M, M]` batch mean of pairwise cosine similarity between concept maps `[B, M, HW]`.
pub fn attention_correlation(attn: &Tensor) -> Result<Tensor> {
    let s = attn.shape();
    if s.len() != 3 || s[0] == 0 {
        return Err(Error::shape(format!(
            "attention must be [B>=1, M, HW], got {s:?}"
        )));
    }
    let (batch, m, hw) = (s[0], s[1], s[2]);
    let mut corr = vec![0.0; m * m];
    for b in 0..batch {
        let maps = &attn.data()[b * m * hw..(b + 1) * m * hw];
        for i in 0..m {
            for j in 0..m {
                corr[i * m + j] += cosine_similarity(
                    &maps[i * hw..(i + 1) * hw],
                    &maps[j * hw..(j + 1) * hw],
                    crate::objective::COSINE_EPS,
                )?;
            }
        }
    }
    corr.iter_mut().for_each(|v| *v /= batch as f64);
    Tensor::new(&[m, m], corr)
}

/// Mean of the off-diagonal entries of a square matrix; 0 for 1×1.
pub fn mean_off_diagonal(corr: &Tensor) -> f64 {
    let m = corr.shape()[0];
    if m < 2 {
        return 0.0;
    }
    let total: f64 = (0..m)
        .flat_map(|i| (0..m).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| corr.at2(i, j))
        .sum();
    total / (m * (m - 1)) as f64
}

/// Pixel-index center of the highest-attention patch of one concept map.
pub fn peak_point(map: &[f64], image_size: usize, patch_size: usize) -> [f64; 2] {
    let grid = image_size / patch_size;
    let best = map.iter().enumerate().fold(
        (0, f64::NEG_INFINITY),
        |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc },
    );
    let (gy, gx) = (best.0 / grid, best.0 % grid);
    let half = (patch_size as f64 - 1.0) / 2.0;
    [(gx * patch_size) as f64 + half, (gy * patch_size) as f64 + half]
}

/// Normalized landmark localization error (%) for one image.
///
/// Each concept predicts the center of its argmax patch; every landmark is
/// matched to its nearest prediction, and the mean distance is divided by
/// the image side.
pub fn localization_error(
    attn: &Tensor,
    landmarks: &[[f64; 2]],
    image_size: usize,
    patch_size: usize,
) -> Result<f64> {
    let s = attn.shape();
    if s.len() != 2 {
        return Err(Error::shape(format!("attention must be [M, HW], got {s:?}")));
    }
    if landmarks.is_empty() {
        return Err(Error::Data("no landmarks".into()));
    }
    let hw = s[1];
    let peaks: Vec<[f64; 2]> = attn
        .data()
        .chunks(hw)
        .map(|row| peak_point(row, image_size, patch_size))
        .collect();
    let total: f64 = landmarks
        .iter()
        .map(|&[lx, ly]| {
            peaks
                .iter()
                .map(|&[px, py]| ((px - lx).powi(2) + (py - ly).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    Ok(100.0 * total / landmarks.len() as f64 / image_size as f64)
}

/// Mean per-image localization error over a batch `[B, M, HW]`.
pub fn mean_localization_error(
    attn: &Tensor,
    landmarks: &[Vec<[f64; 2]>],
    image_size: usize,
    patch_size: usize,
) -> Result<f64> {
    let s = attn.shape();
    if s.len() != 3 || s[0] != landmarks.len() || s[0] == 0 {
        return Err(Error::shape(format!(
            "attention {s:?} for {} landmark sets",
            landmarks.len()
        )));
    }
    let (m, hw) = (s[1], s[2]);
    let mut total = 0.0;
    for (b, marks) in landmarks.iter().enumerate() {
        let one = Tensor::new(&[m, hw], attn.data()[b * m * hw..(b + 1) * m * hw].to_vec())?;
        total += localization_error(&one, marks, image_size, patch_size)?;
    }
    Ok(total / landmarks.len() as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "family_mAP")]
    pub family_map: Option<f64>,
    /// mAP keyed by code length.
    pub per_bit_length: BTreeMap<String, f64>,
    pub localization_error: Option<f64>,
    pub correlation: Option<Vec<Vec<f64>>>,
    #[serde(rename = "R")]
    pub r: usize,
    pub queries: usize,
    pub database: usize,
}

impl EvalReport {
    pub fn evaluate(
        queries: &CodeDatabase,
        db: &CodeDatabase,
        r: Option<usize>,
        family: bool,
    ) -> Result<Self> {
        let map = map_at_r(queries, db, r)?;
        let family_map = if family {
            Some(family_map(queries, db, r)?)
        } else {
            None
        };
        let mut per_bit_length = BTreeMap::new();
        per_bit_length.insert(db.bits.to_string(), map);
        Ok(Self {
            map,
            family_map,
            per_bit_length,
            localization_error: None,
            correlation: None,
            r: r.unwrap_or(db.len()),
            queries: queries.len(),
            database: db.len(),
        })
    }
}

pub fn matrix_rows(t: &Tensor) -> Vec<Vec<f64>> {
    let cols = t.shape()[1];
    t.data().chunks(cols).map(<[f64]>::to_vec).collect()
}

/// Comma-separated rows, full precision.
pub fn matrix_csv(t: &Tensor) -> String {
    matrix_rows(t)
        .iter()
        .map(|row| row.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(","))
        .collect::<Vec<_>>()
        .join("\n")
        + "\n"
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn db(bits: &[&[bool]], labels: &[usize]) -> CodeDatabase {
        let codes = bits.iter().map(|b| HashCode::from_bits(b)).collect();
        CodeDatabase::new(bits[0].len(), codes, Some(labels.to_vec()), None).unwrap()
    }

    #[test]
    fn hamming_examples() {
        let a = HashCode::from_bits(&[true; 16]);
        let b = HashCode::from_bits(&[false; 16]);
        assert_eq!(hamming_distance(&a, &a).unwrap(), 0);
        assert_eq!(hamming_distance(&a, &b).unwrap(), 16);
    }

    #[test]
    fn ranking_tie_rule() {
        let d = db(&[&[true, false], &[true, false], &[true, false]], &[0, 1, 2]);
        let r = rank_database(0, &HashCode::from_bits(&[true, false]), &d).unwrap();
        assert_eq!(r.order, vec![0, 1, 2]);
        let one = db(&[&[false, false]], &[0]);
        let r = rank_database(0, &HashCode::from_bits(&[true, true]), &one).unwrap();
        assert_eq!(r.order, vec![0]);
        assert_eq!(r.distances, vec![2]);
    }

    #[test]
    fn worked_ap_example() {
        let ap = average_precision(&[true, false, true], 3, 2);
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(average_precision(&[false, false], 2, 0), 0.0);
    }

    #[test]
    fn all_relevant_gives_one() {
        let d = db(&[&[true, false], &[false, true], &[true, true]], &[4, 4, 4]);
        let q = db(&[&[false, false]], &[4]);
        assert_eq!(map_at_r(&q, &d, None).unwrap(), 1.0);
        assert_eq!(map_at_r(&q, &d, Some(2)).unwrap(), 1.0);
        assert!(map_at_r(&q, &d, Some(4)).is_err());
    }

    #[test]
    fn self_exclusion_only_for_same_object() {
        let d = db(&[&[true, true], &[false, false], &[true, false]], &[0, 1, 0]);
        // query 0 finds item 2 (distance 1) before item 1 (distance 2)
        let same = map_at_r(&d, &d, None).unwrap();
        let copy = d.clone();
        let separate = map_at_r(&d, &copy, None).unwrap();
        // self-excluded: q0 -> [2,1] AP 1, q1 -> no relevant -> 0, q2 -> [0,1] AP 1
        assert!((same - 2.0 / 3.0).abs() < 1e-15);
        // not excluded: q0 -> [0,2,1] AP 1, q1 -> [1,..] AP 1, q2 -> [2,0,1] AP 1
        assert!((separate - 1.0).abs() < 1e-15);
    }

    #[test]
    fn family_map_reductions() {
        let codes: Vec<HashCode> = [[true, false], [false, true], [true, true]]
            .iter()
            .map(|b| HashCode::from_bits(b))
            .collect();
        let d = CodeDatabase::new(2, codes.clone(), Some(vec![0, 1, 2]), Some(vec![0, 1, 2])).unwrap();
        let q = CodeDatabase::new(2, vec![codes[1].clone()], Some(vec![1]), Some(vec![1])).unwrap();
        assert_eq!(family_map(&q, &d, None).unwrap(), map_at_r(&q, &d, None).unwrap());
        let fam = CodeDatabase::new(2, codes, Some(vec![0, 1, 2]), Some(vec![7, 7, 7])).unwrap();
        let q = CodeDatabase::new(2, vec![HashCode::zeros(2)], Some(vec![0]), Some(vec![7])).unwrap();
        assert_eq!(family_map(&q, &fam, None).unwrap(), 1.0);
        let nofam = db(&[&[true]], &[0]);
        assert!(matches!(family_map(&nofam, &nofam, None), Err(Error::Data(_))));
    }

    #[test]
    fn code_file_round_trip_and_truncation() {
        let codes: Vec<HashCode> = (0..5u64)
            .map(|i| HashCode::from_words(vec![i * 0x9e37_79b9, !i], 100).unwrap())
            .collect();
        let d = CodeDatabase::new(100, codes, Some(vec![0, 1, 2, 3, 4]), Some(vec![0, 0, 1, 1, 2])).unwrap();
        let bytes = d.to_bytes();
        assert_eq!(CodeDatabase::from_bytes(&bytes).unwrap(), d);
        assert!(matches!(
            CodeDatabase::from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::Truncated { .. })
        ));
        let bare = CodeDatabase::new(100, d.codes.clone(), None, None).unwrap();
        assert_eq!(CodeDatabase::from_bytes(&bare.to_bytes()).unwrap(), bare);
    }

    #[test]
    fn correlation_examples() {
        let same = Tensor::new(&[1, 2, 3], vec![0.2, 0.3, 0.1, 0.2, 0.3, 0.1]).unwrap();
        let c = attention_correlation(&same).unwrap();
        assert!(c.data().iter().all(|v| (v - 1.0).abs() < 1e-12));
        let disjoint = Tensor::new(&[1, 2, 2], vec![0.5, 0.0, 0.0, 0.7]).unwrap();
        let c = attention_correlation(&disjoint).unwrap();
        assert_eq!(c.data(), &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(mean_off_diagonal(&c), 0.0);
    }

    #[test]
    fn localization_geometry() {
        // 16px image, 8px patches: grid 2x2, patch centers at 3.5 and 11.5
        let attn = Tensor::new(&[1, 4], vec![0.1, 0.2, 0.6, 0.1]).unwrap();
        let err = localization_error(&attn, &[[3.5, 11.5]], 16, 8).unwrap();
        assert_eq!(err, 0.0);
        let err = localization_error(&attn, &[[0.0, 8.0]], 16, 8).unwrap();
        let bound = 100.0 * (2f64).sqrt() * 4.0 / 16.0;
        assert!(err <= bound);
        assert!((err - 100.0 * (3.5f64.powi(2) * 2.0).sqrt() / 16.0).abs() < 1e-12);
        // a single patch predicts the image center
        let one = Tensor::new(&[1, 1], vec![1.0]).unwrap();
        let err = localization_error(&one, &[[3.5, 3.5]], 8, 8).unwrap();
        assert_eq!(err, 0.0);
        assert!(localization_error(&one, &[], 8, 8).is_err());
    }

    proptest! {
        #[test]
        fn hamming_is_a_metric(
            a in prop::collection::vec(any::<bool>(), 70),
            b in prop::collection::vec(any::<bool>(), 70),
            c in prop::collection::vec(any::<bool>(), 70),
        ) {
            let (x, y, z) = (HashCode::from_bits(&a), HashCode::from_bits(&b), HashCode::from_bits(&c));
            let d = |p: &HashCode, q: &HashCode| p.hamming(q).unwrap();
            prop_assert_eq!(d(&x, &y), d(&y, &x));
            prop_assert_eq!(d(&x, &y) == 0, a == b);
            prop_assert!(d(&x, &z) <= d(&x, &y) + d(&y, &z));
        }

        #[test]
        fn correlation_symmetric_unit_diagonal(
            data in prop::collection::vec(0.01f64..1.0, 2 * 3 * 5),
        ) {
            let t = Tensor::new(&[2, 3, 5], data).unwrap();
            let c = attention_correlation(&t).unwrap();
            for i in 0..3 {
                prop_assert!((c.at2(i, i) - 1.0).abs() < 1e-12);
                for j in 0..3 {
                    prop_assert!((c.at2(i, j) - c.at2(j, i)).abs() < 1e-15);
                    prop_assert!(c.at2(i, j) >= 0.0 && c.at2(i, j) <= 1.0 + 1e-12);
                }
            }
        }
    }
}
