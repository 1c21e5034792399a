//! Prediction grids are independent of batching and local to the patch.

use occvote::attack::apply_patch;
use occvote::grid::{prediction_cell, prediction_grid, prediction_grid_serial, PredictionGrid};
use occvote::nn::{InputShape, ModelParams};
use occvote::occlusion::{BorderPolicy, DefenseConfig, Extent};
use occvote::Image;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model() -> ModelParams<f32> {
    let input = InputShape {
        channels: 1,
        height: 28,
        width: 28,
    };
    ModelParams::desk_cnn(input, 10, &mut ChaCha8Rng::seed_from_u64(11)).unwrap()
}

fn image(seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::new(1, 28, 28, (0..784).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

fn bits(g: &PredictionGrid) -> Vec<u32> {
    g.scores.iter().map(|v| v.to_bits()).collect()
}

#[test]
fn parallel_serial_and_single_cell_agree_bitwise() {
    let m = model();
    let img = image(1);
    for cfg in [
        DefenseConfig::default(),
        DefenseConfig::new(Extent::square(4), 2).with_border(BorderPolicy::Inside),
    ] {
        let par = prediction_grid(&m, &img, &cfg).unwrap();
        let ser = prediction_grid_serial(&m, &img, &cfg).unwrap();
        assert_eq!(bits(&par), bits(&ser));
        for (r, c) in [(0, 0), (3, 5), (par.rows() - 1, par.cols() - 1)] {
            let cell = prediction_cell(&m, &img, &cfg, par.position(r, c)).unwrap();
            let want: Vec<u32> = par.cell(r, c).iter().map(|v| v.to_bits()).collect();
            assert_eq!(cell.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), want, "cell ({r}, {c})");
        }
    }
}

#[test]
fn patch_leaves_containing_windows_untouched() {
    let m = model();
    let cfg = DefenseConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for seed in 0..4 {
        let img = image(100 + seed);
        let base = prediction_grid(&m, &img, &cfg).unwrap();
        let positions = base.geometry.patch_positions();
        let pos = positions[rng.gen_range(0..positions.len())];
        let patch: Vec<f32> = (0..25).map(|_| rng.gen_range(0.0..=1.0)).collect();
        let after = prediction_grid(&m, &apply_patch(&img, pos, 5, &patch).unwrap(), &cfg).unwrap();
        let (rows, cols) = (base.geometry.containing_rows(pos.y), base.geometry.containing_cols(pos.x));
        assert_eq!(rows.len() * cols.len(), 9);
        let mut changed = 0;
        for r in 0..base.rows() {
            for c in 0..base.cols() {
                let same = base.cell(r, c) == after.cell(r, c);
                if rows.contains(&r) && cols.contains(&c) {
                    assert!(same, "window ({r}, {c}) covers {pos}");
                } else {
                    changed += usize::from(!same);
                }
            }
        }
        assert!(changed > 0);
    }
}
