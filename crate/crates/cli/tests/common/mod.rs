#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use concepthash::centers::CenterMode;
use concepthash_cli::RunConfig;

pub fn crate_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

pub fn fixture() -> PathBuf {
    crate_dir().join("fixtures/synthetic8.chem")
}

pub fn synthetic_config() -> PathBuf {
    crate_dir().join("configs/synthetic.json")
}

/// The checked-in synthetic run, shrunk to a couple of quick epochs and
/// writing into `dir`.
pub fn small_config(dir: &Path) -> RunConfig {
    let mut cfg = RunConfig::load(synthetic_config()).unwrap();
    cfg.train.epochs = 2;
    cfg.train.warmup_epochs = 1;
    cfg.train.batch_size = 16;
    cfg.synthetic.images_per_class = 4;
    cfg.synthetic.test_images_per_class = 2;
    cfg.paths.output_dir = dir.join("out");
    cfg.paths.checkpoint = dir.join("out/model.ckpt");
    cfg
}

pub fn small_random(dir: &Path) -> RunConfig {
    let mut cfg = small_config(dir);
    cfg.model.center_mode = CenterMode::RandomOrthogonal;
    cfg
}

/// Writes `cfg` to `dir/name` and returns the path.
pub fn write_config(dir: &Path, name: &str, cfg: &RunConfig) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, cfg.to_json()).unwrap();
    path
}

pub fn run_bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_concepthash"))
        .args(args)
        .output()
        .expect("binary runs")
}
