mod common;

use std::fs;

use common::{fixture, run_bin, small_config, small_random, write_config};
use concepthash::centers::CenterMode;
use concepthash::hash_head::{binarize_rows, HashCode};
use concepthash::model::ConceptHash;
use concepthash::retrieval::{hamming_distance, map_at_r, CodeDatabase};
use concepthash::synth::Split;
use concepthash_cli::commands::{self, heatmap};
use concepthash_cli::RunConfig;

#[test]
fn encode_matches_in_process_hashing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_random(dir.path());
    let model = commands::build_model(&cfg).unwrap();
    let ckpt = dir.path().join("m.ckpt");
    model.save(&ckpt).unwrap();
    let data = commands::load_split(&cfg, Split::Test).unwrap();
    let out = dir.path().join("codes.bin");
    let db = commands::cmd_encode(&ckpt, &data, Some(16), &out).unwrap();
    assert_eq!(db.codes, model.hash(&data.all_images().unwrap()).unwrap());
    assert_eq!(db.labels, Some(data.labels()));
    assert_eq!(CodeDatabase::load(&out).unwrap(), db);
    assert!(matches!(
        commands::cmd_encode(&ckpt, &data, Some(32), &out),
        Err(concepthash_cli::CliError::Config(_))
    ));
}

fn code(bits: &str) -> HashCode {
    HashCode::from_bits(&bits.chars().map(|c| c == '1').collect::<Vec<_>>())
}

#[test]
fn eval_report_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let db = CodeDatabase::new(
        8,
        [
            "00000000", "00000001", "11110000", "11110001", "10101010", "10101011",
        ]
        .map(code)
        .to_vec(),
        Some(vec![0, 0, 1, 1, 2, 2]),
        Some(vec![0, 0, 0, 0, 1, 1]),
    )
    .unwrap();
    let queries = CodeDatabase::new(
        8,
        ["00000011", "11110011"].map(code).to_vec(),
        Some(vec![0, 2]),
        None,
    )
    .unwrap();
    let (qp, dp) = (dir.path().join("q.bin"), dir.path().join("d.bin"));
    queries.save(&qp).unwrap();
    db.save(&dp).unwrap();
    let report = commands::cmd_eval(&qp, &dp, false, None, None).unwrap();
    assert_eq!(report.map, map_at_r(&queries, &db, None).unwrap());
    assert_eq!((report.queries, report.database, report.r), (2, 6, 6));

    // Same file: self-excluded, so each nearest neighbour is the class twin.
    let report = commands::cmd_eval(&dp, &dp, true, Some(1), None).unwrap();
    assert_eq!(report.map, 1.0);
    assert_eq!(report.family_map, Some(1.0));
    assert!(commands::cmd_eval(&dp, &dp, false, Some(6), None).is_err());
}

#[test]
fn heatmap_peaks_where_the_map_peaks() {
    let grid = 4;
    for peak in 0..grid * grid {
        let map: Vec<f64> = (0..grid * grid)
            .map(|i| if i == peak { 1.0 } else { 0.01 })
            .collect();
        let img = heatmap(&map, grid, 32);
        let best = (0..img.len())
            .max_by_key(|&i| (img[i], std::cmp::Reverse(i)))
            .unwrap();
        let (px, py) = (best % 32, best / 32);
        assert_eq!((py / 8) * grid + px / 8, peak);
        assert_eq!(img[best], 255);
        assert_eq!(*img.iter().min().unwrap(), 0);
    }
    assert!(heatmap(&[0.5; 16], 4, 32).iter().all(|&v| v == 0));
}

#[test]
fn attn_writes_one_heatmap_per_concept() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_random(dir.path());
    cfg.model.encoder.num_concepts = 8;
    let model = commands::build_model(&cfg).unwrap();
    let ckpt = dir.path().join("m.ckpt");
    model.save(&ckpt).unwrap();
    let data = commands::load_split(&cfg, Split::Test).unwrap();
    let out = dir.path().join("attn");
    let summary = commands::cmd_attn(&ckpt, &data, Some(2), &out).unwrap();
    assert_eq!((summary.images, summary.heatmaps), (2, 16));
    for c in 0..8 {
        let img = image::open(out.join(format!("img00001_concept{c}.png"))).unwrap();
        assert_eq!((img.width(), img.height()), (32, 32));
    }
    let csv = fs::read_to_string(out.join(commands::CORRELATION_FILE)).unwrap();
    assert_eq!(csv.lines().count(), 8);
    for (i, row) in summary.correlation.iter().enumerate() {
        assert!((row[i] - 1.0).abs() < 1e-12);
    }
}

fn read_csv(path: &std::path::Path) -> Vec<Vec<f64>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect()
}

#[test]
fn random_centers_export_signs_and_hamming() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_random(dir.path());
    cfg.model.num_classes = 4;
    cfg.model.bits = 16;
    let model = commands::build_model(&cfg).unwrap();
    let stats = commands::cmd_centers(&model, dir.path()).unwrap();
    let signs = read_csv(&dir.path().join("centers_sign.csv"));
    assert_eq!((signs.len(), signs[0].len()), (4, 16));
    assert!(signs.iter().flatten().all(|&v| v == 1.0 || v == -1.0));
    let o = model.center_matrix().unwrap();
    let codes = binarize_rows(&o);
    for i in 0..4 {
        for j in 0..4 {
            assert_eq!(
                stats.hamming[i][j],
                hamming_distance(&codes[i], &codes[j]).unwrap()
            );
            assert!(i == j || stats.cosine[i][j] < 1.0);
        }
    }
    let raw = read_csv(&dir.path().join("centers.csv"));
    let max_err = raw
        .iter()
        .flatten()
        .zip(o.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(max_err < 1e-12);
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("centers_stats.json")).unwrap()).unwrap();
    assert_eq!(json["min_offdiag_hamming"], stats.min_offdiag_hamming);
}

#[test]
fn zero_projection_gives_zero_centers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let mut model = commands::build_model(&cfg).unwrap();
    for p in model.params.iter_mut().filter(|p| p.name.starts_with("centers.")) {
        p.value.data_mut().fill(0.0);
    }
    let stats = commands::cmd_centers(&model, dir.path()).unwrap();
    assert!(stats.all_zero);
    assert!(read_csv(&dir.path().join("centers.csv"))
        .iter()
        .flatten()
        .all(|&v| v == 0.0));
    assert!(read_csv(&dir.path().join("centers_sign.csv"))
        .iter()
        .flatten()
        .all(|&v| v == 1.0));
}

#[test]
fn train_writes_checkpoint_metrics_and_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let outcome = commands::train_run(&cfg, |_, _| Ok(())).unwrap();
    assert_eq!(outcome.history.len(), 2);
    let lines = fs::read_to_string(&outcome.metrics).unwrap();
    assert_eq!(lines.lines().count(), 2);
    let saved =
        RunConfig::from_json(&fs::read_to_string(cfg.paths.output_dir.join(commands::CONFIG_FILE)).unwrap())
            .unwrap();
    assert_eq!(saved, cfg);
    assert_eq!(
        ConceptHash::load(&outcome.checkpoint).unwrap(),
        outcome.model.quantized_f32()
    );
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.paths.embeddings = None;
    let no_text = write_config(dir.path(), "a.json", &cfg);
    let out = run_bin(&["train", "--config", no_text.to_str().unwrap()]);
    assert_eq!(
        out.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let cfg = small_config(dir.path());
    let good = write_config(dir.path(), "b.json", &cfg);
    let good = good.to_str().unwrap();
    assert_eq!(
        run_bin(&["train", "--config", good, "--set", "model.bits=15"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        run_bin(&["train", "--config", good, "--set", "nope=1"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        run_bin(&["train", "--config", good, "--center-mode", "psychic"])
            .status
            .code(),
        Some(2)
    );

    let mut missing = small_config(dir.path());
    missing.paths.embeddings = Some(fixture());
    missing.paths.train_data = Some(dir.path().join("absent"));
    missing.paths.query_data = Some(dir.path().join("absent"));
    let missing = write_config(dir.path(), "c.json", &missing);
    assert_eq!(
        run_bin(&["train", "--config", missing.to_str().unwrap()])
            .status
            .code(),
        Some(3)
    );

    let garbage = dir.path().join("garbage.ckpt");
    fs::write(&garbage, b"not a checkpoint").unwrap();
    let codes = dir.path().join("codes.bin");
    let out = run_bin(&[
        "encode",
        "--config",
        good,
        "--checkpoint",
        garbage.to_str().unwrap(),
        "--out",
        codes.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn fixture_embeddings_load() {
    let text = concepthash::centers::TextEmbeddings::load(fixture()).unwrap();
    assert_eq!(text.num_classes(), 8);
    assert_eq!(text.class_names[3], "family1_species3");
    let back = concepthash::centers::TextEmbeddings::from_bytes(&text.to_bytes()).unwrap();
    assert_eq!(back, text);
    assert_eq!(CenterMode::default(), CenterMode::Language);
}

/// The checked-in embeddings are standard-normal draws (ChaCha8, seed 7),
/// stored as f32.
#[test]
fn fixture_is_reproducible() {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    let data: Vec<f64> = (0..8 * 32)
        .map(|_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v as f32 as f64
        })
        .collect();
    let names = (0..8).map(|c| format!("family{}_species{c}", c / 2)).collect();
    let text = concepthash::centers::TextEmbeddings::new(
        names,
        concepthash::tensor::Tensor::new(&[8, 32], data).unwrap(),
    )
    .unwrap();
    assert_eq!(text.to_bytes(), fs::read(fixture()).unwrap());
}
