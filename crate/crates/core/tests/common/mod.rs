//! Shared fixtures: MNIST location and the two desk models, trained once and
//! cached as checkpoints under the cargo target directory.
#![allow(dead_code)]

pub mod golden;
pub mod gradcheck;

use std::fs;
use std::path::PathBuf;
use std::sync::OnceLock;

use occvote::data::{load_standard, random_split, Dataset, DatasetKind, SplitSpec};
use occvote::nn::{load_params, save_params, train, InputShape, ModelParams, TrainConfig};
use occvote::occlusion::DefenseConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const MODEL_SEED: u64 = 0;
const FIXTURE_VERSION: u32 = 1;

pub fn data_dir() -> PathBuf {
    std::env::var_os("OCCVOTE_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Training file split 0.9/0.1 with seed 0, plus the test file.
pub fn splits() -> &'static Splits {
    static CELL: OnceLock<Splits> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = data_dir();
        let pool = load_standard(DatasetKind::Mnist, &dir, true)
            .unwrap_or_else(|e| panic!("MNIST not found under {} ({e}); set OCCVOTE_DATA_DIR", dir.display()));
        let (train, val) = random_split(&pool, &SplitSpec::default()).unwrap();
        let test = load_standard(DatasetKind::Mnist, &dir, false).unwrap();
        Splits { train, val, test }
    })
}

/// The first `n` validation images in a fixed shuffled order.
pub fn val_subset(n: usize) -> Dataset {
    splits().val.sample(n, 7)
}

fn cache_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR"))
        .join("occvote-fixtures")
        .join(format!("{name}-v{FIXTURE_VERSION}.bin"))
}

fn train_cached(name: &str, occlusion: bool) -> ModelParams<f32> {
    let path = cache_path(name);
    if let Ok(p) = load_params(&path) {
        return p;
    }
    let s = splits();
    let input = InputShape {
        channels: 1,
        height: 28,
        width: 28,
    };
    let init = ModelParams::desk_cnn(input, 10, &mut ChaCha8Rng::seed_from_u64(MODEL_SEED)).unwrap();
    let cfg = TrainConfig {
        seed: MODEL_SEED,
        occlusion_augmentation: occlusion,
        ..TrainConfig::default()
    };
    let outcome = train(&init, &s.train, None, &cfg, &DefenseConfig::default()).unwrap();
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    // rename keeps concurrent test binaries from reading a partial file
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    save_params(&outcome.params, &tmp).unwrap();
    fs::rename(&tmp, &path).unwrap();
    outcome.params
}

/// Desk CNN trained 3 epochs with occlusion augmentation.
pub fn occluded_model() -> &'static ModelParams<f32> {
    static CELL: OnceLock<ModelParams<f32>> = OnceLock::new();
    CELL.get_or_init(|| train_cached("desk-occluded", true))
}

/// Same recipe without occlusion augmentation.
pub fn plain_model() -> &'static ModelParams<f32> {
    static CELL: OnceLock<ModelParams<f32>> = OnceLock::new();
    CELL.get_or_init(|| train_cached("desk-plain", false))
}
