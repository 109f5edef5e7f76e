//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Each exported function takes plain numbers and returns either RGBA pixels
//! or a JSON string, so the page needs no glue beyond `JSON.parse`.

use concepthash::centers::random_orthogonal_centers;
use concepthash::hash_head::{binarize_rows, HashCode};
use concepthash::retrieval::{average_precision, hamming_distance, map_at_r, rank_database, CodeDatabase};
use concepthash::synth::{Split, SyntheticSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

const TILE_GAP: usize = 2;

fn err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// `count` test-split images of `class`, side by side as one RGBA strip with
/// landmark pixels marked red. Width is `count · (size + 2) - 2`.
pub fn glyph_strip(seed: u64, class: usize, count: usize) -> Result<(usize, usize, Vec<u8>), String> {
    let spec = SyntheticSpec {
        test_images_per_class: count.max(1),
        ..SyntheticSpec::default()
    };
    if class >= spec.num_classes {
        return Err(format!("class {class} outside 0..{}", spec.num_classes));
    }
    let data = spec.generate(seed, Split::Test).map_err(|e| e.to_string())?;
    let size = spec.image_size;
    let width = count * (size + TILE_GAP) - TILE_GAP;
    let mut rgba = vec![255u8; width * size * 4];
    for k in 0..count {
        let sample = &data.samples[k * spec.num_classes + class];
        let x0 = k * (size + TILE_GAP);
        for y in 0..size {
            for x in 0..size {
                let v = (sample.image[y * size + x] * 255.0).round() as u8;
                let at = (y * width + x0 + x) * 4;
                rgba[at..at + 3].fill(v);
            }
        }
        for &[lx, ly] in &sample.landmarks {
            let (x, y) = (lx.round() as usize, ly.round() as usize);
            if x < size && y < size {
                let at = (y * width + x0 + x) * 4;
                rgba[at..at + 3].copy_from_slice(&[230, 30, 30]);
            }
        }
    }
    Ok((width, size, rgba))
}

#[derive(Serialize)]
pub struct CenterReport {
    pub signs: Vec<Vec<i8>>,
    pub hamming: Vec<Vec<u32>>,
    pub min_hamming: u32,
    pub mean_hamming: f64,
}

fn center_codes(classes: usize, bits: usize, seed: u64) -> Vec<HashCode> {
    binarize_rows(&random_orthogonal_centers(classes, bits, seed))
}

pub fn centers_report(classes: usize, bits: usize, seed: u64) -> Result<CenterReport, String> {
    if classes < 2 || bits == 0 {
        return Err("need at least two classes and one bit".into());
    }
    let codes = center_codes(classes, bits, seed);
    let hamming: Vec<Vec<u32>> = codes
        .iter()
        .map(|a| {
            codes
                .iter()
                .map(|b| hamming_distance(a, b).expect("same length"))
                .collect()
        })
        .collect();
    let off: Vec<u32> = (0..classes)
        .flat_map(|i| (0..classes).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| hamming[i][j])
        .collect();
    Ok(CenterReport {
        signs: codes
            .iter()
            .map(|c| c.to_bits().into_iter().map(|b| if b { 1 } else { -1 }).collect())
            .collect(),
        min_hamming: off.iter().copied().min().unwrap_or(0),
        mean_hamming: off.iter().sum::<u32>() as f64 / off.len() as f64,
        hamming,
    })
}

#[derive(Serialize)]
pub struct Hit {
    pub index: usize,
    pub label: usize,
    pub distance: u32,
    pub relevant: bool,
}

#[derive(Serialize)]
pub struct RetrievalReport {
    pub map: f64,
    pub query_label: usize,
    pub query_ap: f64,
    pub top: Vec<Hit>,
}

/// Codes for `per_class` items per class: each class center's sign code with
/// every bit flipped independently with probability `flip`. The database is
/// searched against itself, so each query's own entry is left out.
pub fn retrieval_report(
    classes: usize,
    bits: usize,
    seed: u64,
    per_class: usize,
    flip: f64,
    query: usize,
    r: usize,
) -> Result<RetrievalReport, String> {
    if !(0.0..=1.0).contains(&flip) {
        return Err(format!("flip probability {flip} outside [0, 1]"));
    }
    let centers = center_codes(classes, bits, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let (mut codes, mut labels) = (Vec::new(), Vec::new());
    for i in 0..classes * per_class {
        let c = i % classes;
        let noisy: Vec<bool> = centers[c]
            .to_bits()
            .into_iter()
            .map(|b| b ^ rng.random_bool(flip))
            .collect();
        codes.push(HashCode::from_bits(&noisy));
        labels.push(c);
    }
    let db = CodeDatabase::new(bits, codes, Some(labels.clone()), None).map_err(|e| e.to_string())?;
    if query >= db.len() {
        return Err(format!("query {query} outside 0..{}", db.len()));
    }
    let map = map_at_r(&db, &db, Some(r)).map_err(|e| e.to_string())?;
    let ranking = rank_database(query, &db.codes[query], &db).map_err(|e| e.to_string())?;
    let hits: Vec<Hit> = ranking
        .order
        .iter()
        .zip(&ranking.distances)
        .filter(|&(&i, _)| i != query)
        .map(|(&i, &d)| Hit {
            index: i,
            label: labels[i],
            distance: d,
            relevant: labels[i] == labels[query],
        })
        .collect();
    let relevant: Vec<bool> = hits.iter().map(|h| h.relevant).collect();
    let total = relevant.iter().filter(|&&x| x).count();
    Ok(RetrievalReport {
        map,
        query_label: labels[query],
        query_ap: average_precision(&relevant, r, total),
        top: hits.into_iter().take(r.min(20)).collect(),
    })
}

/// RGBA strip of synthetic images; width via [`glyph_strip_width`].
#[wasm_bindgen(js_name = glyphStrip)]
pub fn js_glyph_strip(seed: u32, class: usize, count: usize) -> Result<Vec<u8>, JsError> {
    glyph_strip(seed.into(), class, count)
        .map(|(_, _, px)| px)
        .map_err(err)
}

#[wasm_bindgen(js_name = glyphStripWidth)]
pub fn glyph_strip_width(count: usize) -> usize {
    count * (SyntheticSpec::default().image_size + TILE_GAP) - TILE_GAP
}

#[wasm_bindgen(js_name = centersReport)]
pub fn js_centers_report(classes: usize, bits: usize, seed: u32) -> Result<String, JsError> {
    let report = centers_report(classes, bits, seed.into()).map_err(err)?;
    serde_json::to_string(&report).map_err(err)
}

#[wasm_bindgen(js_name = retrievalReport)]
pub fn js_retrieval_report(
    classes: usize,
    bits: usize,
    seed: u32,
    per_class: usize,
    flip: f64,
    query: usize,
    r: usize,
) -> Result<String, JsError> {
    let report = retrieval_report(classes, bits, seed.into(), per_class, flip, query, r).map_err(err)?;
    serde_json::to_string(&report).map_err(err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strip_has_declared_size() {
        let (w, h, px) = glyph_strip(0, 3, 4).unwrap();
        assert_eq!((w, h), (glyph_strip_width(4), 32));
        assert_eq!(px.len(), w * h * 4);
        assert!(glyph_strip(0, 8, 1).is_err());
    }

    #[test]
    fn centers_are_signed_and_symmetric() {
        let r = centers_report(8, 16, 3).unwrap();
        assert!(r.signs.iter().flatten().all(|&s| s == 1 || s == -1));
        for i in 0..8 {
            assert_eq!(r.hamming[i][i], 0);
            for j in 0..8 {
                assert_eq!(r.hamming[i][j], r.hamming[j][i]);
            }
        }
        assert!(r.min_hamming > 0);
    }

    #[test]
    fn noiseless_codes_retrieve_perfectly() {
        let r = retrieval_report(8, 32, 1, 5, 0.0, 0, 4).unwrap();
        assert_eq!(r.map, 1.0);
        assert_eq!(r.query_ap, 1.0);
        assert!(r.top.iter().all(|h| h.relevant && h.distance == 0));
        let noisy = retrieval_report(8, 32, 1, 5, 0.5, 0, 4).unwrap();
        assert!(noisy.map < 1.0);
        assert!(retrieval_report(8, 32, 1, 5, 1.5, 0, 4).is_err());
    }
}
