//! The incremental adversary oracle against a full-recompute reference, and
//! positionwise certification against both.

use std::collections::BTreeSet;

use occvote::certify::{adversary_oracle, certify_grid};
use occvote::grid::PredictionGrid;
use occvote::occlusion::{BorderPolicy, DefenseConfig, Extent, GridGeometry, VoteMode};
use occvote::vote::{decide, vote, Verdict};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Rebuilds the whole attacked grid for every (position, target).
fn naive_oracle(grid: &PredictionGrid) -> BTreeSet<(i64, i64, usize)> {
    let clean = decide(&vote(grid).unwrap()).verdict.class();
    let k = grid.classes;
    let mut found = BTreeSet::new();
    for pos in grid.geometry.patch_positions() {
        for target in (0..k).filter(|&t| Some(t) != clean) {
            let mut attacked = grid.clone();
            for r in 0..grid.rows() {
                for c in 0..grid.cols() {
                    if !grid.geometry.covers(r, c, pos) {
                        let cell = &mut attacked.scores[(r * grid.cols() + c) * k..][..k];
                        for (i, v) in cell.iter_mut().enumerate() {
                            *v = if i == target { 1.0 } else { 0.0 };
                        }
                    }
                }
            }
            if decide(&vote(&attacked).unwrap()).verdict == Verdict::Benign(target) {
                found.insert((pos.x, pos.y, target));
            }
        }
    }
    found
}

fn random_grid(seed: u64) -> PredictionGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let patch = rng.gen_range(2..=4);
    let stride = rng.gen_range(1..=2);
    let mut cfg = DefenseConfig::new(Extent::square(patch), stride);
    if rng.gen_bool(0.5) {
        cfg.border = BorderPolicy::Inside;
    }
    if rng.gen_bool(0.4) {
        cfg.vote = VoteMode::Hard;
    }
    cfg.tau = rng.gen_range(0.4..0.95);
    let side = cfg.occlusion.width + rng.gen_range(4..9);
    let geom = GridGeometry::new(side, side, &cfg).unwrap();
    let classes = 3;
    let dominant = rng.gen_range(0..classes);
    let noise = rng.gen_range(0.0..0.25);
    let mut scores = Vec::new();
    for _ in 0..geom.rows() * geom.cols() {
        let mut cell = vec![0.0f32; classes];
        if rng.gen_bool(noise) {
            cell[rng.gen_range(0..classes)] = 1.0;
        } else {
            let conf = rng.gen_range(0.7f32..=1.0);
            cell.iter_mut().for_each(|v| *v = (1.0 - conf) / (classes - 1) as f32);
            cell[dominant] = conf;
        }
        scores.extend(cell);
    }
    PredictionGrid::from_scores(cfg, geom, classes, scores).unwrap()
}

fn as_set(grid: &PredictionGrid) -> BTreeSet<(i64, i64, usize)> {
    adversary_oracle(grid)
        .unwrap()
        .into_iter()
        .map(|b| (b.position.x, b.position.y, b.target))
        .collect()
}

#[test]
fn incremental_oracle_matches_full_recompute() {
    let mut breached = 0;
    let mut certified = 0;
    for seed in 0..120 {
        let g = random_grid(seed);
        if g.rows() < 3 || g.cols() < 3 {
            continue;
        }
        let fast = as_set(&g);
        assert_eq!(fast, naive_oracle(&g), "seed {seed}");
        breached += usize::from(!fast.is_empty());
        let cert = certify_grid(&g).unwrap();
        if cert.positionwise_safe {
            certified += 1;
            assert!(fast.is_empty(), "seed {seed}: certified but breached");
        }
        // every breach sits at a position the certifier flagged
        let flagged: BTreeSet<_> = cert.unsafe_positions.iter().map(|p| (p.x, p.y)).collect();
        for (x, y, t) in &fast {
            assert!(flagged.contains(&(*x, *y)), "seed {seed}: breach at ({x}, {y}) for {t} not flagged");
        }
    }
    assert!(breached > 10 && certified > 10, "breached {breached}, certified {certified}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn positionwise_safe_grids_have_no_breach(seed in any::<u64>()) {
        let g = random_grid(seed);
        prop_assume!(g.rows() >= 3 && g.cols() >= 3);
        if certify_grid(&g).unwrap().positionwise_safe {
            prop_assert!(adversary_oracle(&g).unwrap().is_empty());
        }
    }
}
