//! Frozen renderer outputs. Set `OCCVOTE_BLESS=1` to (re)write missing files.

use std::fs;
use std::path::PathBuf;

use occvote::grid::PredictionGrid;
use occvote::occlusion::{DefenseConfig, Extent, GridGeometry, Position};
use occvote::render::{render_prediction_grid, render_prediction_grid_ppm, render_vote_grid, RenderSpec};
use occvote::vote::vote;

pub fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

/// 12x12 grid of 4 classes: class 1 dominant, a class-2 block, a diffuse stripe.
pub fn golden_grid() -> PredictionGrid {
    let cfg = DefenseConfig::new(Extent::square(3), 1);
    let geom = GridGeometry::new(12, 12, &cfg).unwrap();
    assert_eq!((geom.rows(), geom.cols()), (12, 12));
    let (rows, cols) = (geom.rows(), geom.cols());
    let mut scores = Vec::with_capacity(rows * cols * 4);
    for r in 0..rows {
        for c in 0..cols {
            let cell: [f32; 4] = if (3..6).contains(&r) && (6..10).contains(&c) {
                [0.0, 0.05, 0.95, 0.0]
            } else if c == 1 {
                [0.25, 0.25, 0.25, 0.25]
            } else if (r + c) % 5 == 0 {
                [0.1, 0.6, 0.2, 0.1]
            } else {
                [0.0, 1.0, 0.0, 0.0]
            };
            scores.extend_from_slice(&cell);
        }
    }
    let mut g = PredictionGrid::from_scores(cfg, geom, 4, scores).unwrap();
    g.image_id = "golden".into();
    g.true_label = Some(1);
    g
}

/// (file name, rendered bytes) for every golden artifact.
pub fn golden_outputs() -> Vec<(&'static str, Vec<u8>)> {
    let g = golden_grid();
    let plain = RenderSpec::default();
    let hatched = RenderSpec {
        highlight: Some(Position::new(4, 2)),
        ..RenderSpec::default()
    };
    vec![
        ("prediction.svg", render_prediction_grid(&g, &plain).unwrap().into_bytes()),
        ("prediction_highlight.svg", render_prediction_grid(&g, &hatched).unwrap().into_bytes()),
        ("votes.svg", render_vote_grid(&vote(&g).unwrap(), 4, &plain).unwrap().into_bytes()),
        ("prediction.ppm", render_prediction_grid_ppm(&g, &RenderSpec { cell: 4, ..plain }).unwrap()),
    ]
}

/// Compares every output with its frozen file; returns the mismatches.
pub fn check_golden() -> Vec<String> {
    let bless = std::env::var_os("OCCVOTE_BLESS").is_some();
    let mut bad = Vec::new();
    for (name, bytes) in golden_outputs() {
        let path = golden_dir().join(name);
        match fs::read(&path) {
            Ok(frozen) if frozen == bytes => {}
            Ok(_) => bad.push(format!("{name} differs from the frozen file")),
            Err(_) if bless => {
                fs::create_dir_all(golden_dir()).unwrap();
                fs::write(&path, &bytes).unwrap();
            }
            Err(e) => bad.push(format!("{name}: {e}")),
        }
    }
    bad
}
