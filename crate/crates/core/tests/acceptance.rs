//! Acceptance suite: runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed. Needs MNIST under `OCCVOTE_DATA_DIR` (default
//! `data/mnist` at the workspace root).

mod common;

use std::collections::BTreeSet;
use std::panic::{self, AssertUnwindSafe};
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use common::{occluded_model, plain_model, splits, val_subset};
use occvote::attack::{apply_patch, attack_image, clean_confidences, AttackConfig, Enumeration};
use occvote::certify::{adversary_oracle, certify_grid, CertRule};
use occvote::data::Dataset;
use occvote::eval::{dataset_grids, evaluate_grids, inner_predictions};
use occvote::grid::{prediction_grid, PredictionGrid};
use occvote::nn::{accuracy, decode_params, encode_params, load_params, save_params, ModelParams};
use occvote::occlusion::{occlusion_size, BorderPolicy, DefenseConfig, Extent, GridGeometry, VoteMode};
use occvote::vote::{soft_vote, Verdict};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SWEEP_TAUS: [f64; 4] = [0.5, 0.7, 0.9, 0.99];
const EVAL_IMAGES: usize = 200;

type Check = std::result::Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

struct EvalSet {
    data: Dataset,
    grids: Vec<PredictionGrid>,
}

/// The 200 validation images with their grids under the default defense.
fn eval_set() -> &'static EvalSet {
    static CELL: OnceLock<EvalSet> = OnceLock::new();
    CELL.get_or_init(|| {
        let data = val_subset(EVAL_IMAGES);
        let grids = dataset_grids(occluded_model(), &data, &DefenseConfig::default(), "val-").unwrap();
        EvalSet { data, grids }
    })
}

fn c1_geometry() -> Check {
    let inside = DefenseConfig::new(Extent::square(5), 1).with_border(BorderPolicy::Inside);
    ensure(inside.occlusion == Extent::square(7), || format!("q = {}", inside.occlusion))?;
    let geom = GridGeometry::new(28, 28, &inside).map_err(|e| e.to_string())?;
    ensure((geom.rows(), geom.cols()) == (22, 22), || {
        format!("prediction grid {}x{}", geom.rows(), geom.cols())
    })?;
    let uniform = vec![0.1f32; 22 * 22 * 10];
    let grid = PredictionGrid::from_scores(inside, geom, 10, uniform).map_err(|e| e.to_string())?;
    let votes = soft_vote(&grid, 0.9).map_err(|e| e.to_string())?;
    ensure((votes.rows, votes.cols) == (20, 20), || {
        format!("vote grid {}x{}", votes.rows, votes.cols)
    })?;
    let q = occlusion_size(10, 2);
    ensure(q == 16, || format!("p=10 s=2 gives q = {q}"))?;
    Ok("q=7, 22x22 prediction grid, 20x20 vote grid, q(10,2)=16".into())
}

fn c2_gradients() -> Check {
    let mut worst = 0.0f64;
    for (seed, channels) in [(1u64, 1usize), (2, 2), (3, 1), (4, 3), (5, 3), (6, 2), (8, 2), (9, 1)] {
        let w = common::gradcheck::worst_parameter_gradient_error(seed, channels);
        ensure(w.error <= 1e-4, || format!("seed {seed}: {w}"))?;
        worst = worst.max(w.error);
    }
    Ok(format!("8 toy models, worst relative error {worst:.2e}"))
}

fn c3_sparse_degeneracy() -> Check {
    use occvote::nn::{conv_forward, sparse_conv_forward, ConvSpec, SPARSE_EPSILON};
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for (cin, cout, k, stride, pad, h, w) in [(1, 4, 3, 1, 1, 9, 9), (3, 2, 5, 2, 2, 11, 8), (2, 3, 3, 1, 0, 6, 7)] {
        let spec = ConvSpec {
            in_channels: cin,
            out_channels: cout,
            kernel: k,
            stride,
            padding: pad,
        };
        let weights: Vec<f64> = (0..cout * cin * k * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bias: Vec<f64> = (0..cout).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let x: Vec<f64> = (0..cin * h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        let sparse = sparse_conv_forward(&x, &vec![1.0; h * w], (h, w), &spec, &weights, &bias, SPARSE_EPSILON)
            .map_err(|e| e.to_string())?;
        let plain = conv_forward(&x, (h, w), &spec, &weights, &bias).map_err(|e| e.to_string())?;
        ensure(sparse.len() == plain.len(), || "output sizes differ".into())?;
        for (s, p) in sparse.iter().zip(&plain) {
            worst = worst.max((s - p).abs());
        }
    }
    ensure(worst <= 1e-6, || format!("max difference {worst:.2e}"))?;
    Ok(format!("3 layer shapes, max difference {worst:.2e}"))
}

fn c4_training() -> Check {
    let t = Instant::now();
    let model = occluded_model();
    let trained = t.elapsed();
    let acc = accuracy(model, &splits().val).map_err(|e| e.to_string())?;
    ensure(acc >= 0.97, || format!("validation accuracy {acc:.4} < 0.97"))?;
    Ok(format!(
        "validation accuracy {acc:.4} on {} images (model ready in {:.1}s)",
        splits().val.len(),
        trained.as_secs_f64()
    ))
}

fn c5_locality() -> Check {
    let model = occluded_model();
    let cfg = DefenseConfig::default();
    let data = val_subset(20);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut changed_outside = 0usize;
    for (i, image) in data.images.iter().enumerate() {
        let base = prediction_grid(model, image, &cfg).map_err(|e| e.to_string())?;
        let positions = base.geometry.patch_positions();
        let pos = positions[rng.gen_range(0..positions.len())];
        let patch: Vec<f32> = (0..25).map(|_| rng.gen_range(0.0..=1.0)).collect();
        let patched = apply_patch(image, pos, 5, &patch).map_err(|e| e.to_string())?;
        let after = prediction_grid(model, &patched, &cfg).map_err(|e| e.to_string())?;
        let rows = base.geometry.containing_rows(pos.y);
        let cols = base.geometry.containing_cols(pos.x);
        let interior = pos.x >= 2 && pos.y >= 2 && pos.x <= 21 && pos.y <= 21;
        let count = rows.len() * cols.len();
        ensure(!interior || count == 9, || format!("interior position {pos} has {count} containing windows"))?;
        for r in 0..base.rows() {
            for c in 0..base.cols() {
                let same = base.cell(r, c).iter().zip(after.cell(r, c)).all(|(a, b)| a.to_bits() == b.to_bits());
                if rows.contains(&r) && cols.contains(&c) {
                    ensure(same, || format!("pair {i}: window ({r}, {c}) contains patch {pos} but changed"))?;
                } else if !same {
                    changed_outside += 1;
                }
            }
        }
    }
    ensure(changed_outside > 0, || "patches never changed any cell; the check is vacuous".into())?;
    Ok(format!(
        "20 pairs, containing cells bit-identical, {changed_outside} other cells changed"
    ))
}

/// Random 10x10 grid over 4 classes, mostly agreeing on one class.
fn synthetic_grid(rng: &mut ChaCha8Rng) -> PredictionGrid {
    let mut cfg = DefenseConfig::new(Extent::square(5), 1);
    if rng.gen_bool(0.3) {
        cfg.vote = VoteMode::Hard;
    }
    cfg.tau = [0.5, 0.7, 0.9][rng.gen_range(0..3)];
    let geom = GridGeometry::new(12, 12, &cfg).unwrap();
    assert_eq!((geom.rows(), geom.cols()), (10, 10));
    let dominant = rng.gen_range(0..4);
    let noise = rng.gen_range(0.0..0.3);
    let mut scores = Vec::with_capacity(400);
    for _ in 0..100 {
        let mut cell = [0.0f32; 4];
        if rng.gen_bool(noise) {
            let raw: Vec<f32> = (0..4).map(|_| rng.gen_range(0.0f32..1.0)).collect();
            let sum: f32 = raw.iter().sum();
            for (c, v) in cell.iter_mut().zip(raw) {
                *c = v / sum;
            }
        } else {
            let conf = rng.gen_range(0.8f32..=1.0);
            cell = [(1.0 - conf) / 3.0; 4];
            cell[dominant] = conf;
        }
        scores.extend_from_slice(&cell);
    }
    PredictionGrid::from_scores(cfg, geom, 4, scores).unwrap()
}

fn c6_soundness() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut grids: Vec<PredictionGrid> = (0..500).map(|_| synthetic_grid(&mut rng)).collect();
    grids.extend(eval_set().grids.iter().take(50).cloned());
    let mut certified = [0usize; 2];
    for (i, g) in grids.iter().enumerate() {
        let cert = certify_grid(g).map_err(|e| e.to_string())?;
        if !cert.positionwise_safe {
            continue;
        }
        certified[usize::from(i >= 500)] += 1;
        let breaches = adversary_oracle(g).map_err(|e| e.to_string())?;
        ensure(breaches.is_empty(), || {
            format!("grid {i} certified but the oracle found {:?}", breaches[0])
        })?;
    }
    ensure(certified[0] > 0 && certified[1] > 0, || {
        format!("too few certified grids to test soundness: {certified:?}")
    })?;

    let inside = DefenseConfig::new(Extent::square(5), 1).with_border(BorderPolicy::Inside);
    let geom = GridGeometry::new(28, 28, &inside).unwrap();
    let cells = geom.rows() * geom.cols();
    let one_class: Vec<f32> = (0..cells).flat_map(|_| [0.0, 0.0, 0.0, 1.0]).collect();
    let border = PredictionGrid::from_scores(inside, geom, 4, one_class).unwrap();
    let cert = certify_grid(&border).map_err(|e| e.to_string())?;
    let breaches = adversary_oracle(&border).map_err(|e| e.to_string())?;
    ensure(!breaches.is_empty(), || "oracle missed the border counterexample".into())?;
    ensure(breaches.iter().all(|b| matches!(b.verdict, Verdict::Benign(_))), || {
        "breach without a benign verdict".into()
    })?;
    ensure(!cert.positionwise_safe, || "border grid reported positionwise safe".into())?;
    Ok(format!(
        "{} synthetic + {} real certified grids have no breach; border grid: {} breaches at {} positions (unanimous rule says safe: {})",
        certified[0],
        certified[1],
        breaches.len(),
        breaches.iter().map(|b| b.position).collect::<BTreeSet<_>>().len(),
        cert.unanimous_safe
    ))
}

fn c7_monotone() -> Check {
    let set = eval_set();
    let mut previous: Option<(f64, BTreeSet<usize>)> = None;
    let mut sizes = Vec::new();
    for &tau in &SWEEP_TAUS {
        let mut safe = BTreeSet::new();
        for (i, g) in set.grids.iter().enumerate() {
            let mut g = g.clone();
            g.config.tau = tau;
            if certify_grid(&g).map_err(|e| e.to_string())?.certified_safe(CertRule::Unanimous) {
                safe.insert(i);
            }
        }
        if let Some((prev_tau, prev)) = &previous {
            let extra: Vec<_> = safe.difference(prev).collect();
            ensure(extra.is_empty(), || {
                format!("images {extra:?} certified at tau={tau} but not at tau={prev_tau}")
            })?;
        }
        sizes.push(format!("{tau}:{}", safe.len()));
        previous = Some((tau, safe));
    }
    Ok(format!("{} images, certified-safe set sizes {}", set.grids.len(), sizes.join(" ")))
}

fn c8_accounting() -> Check {
    let set = eval_set();
    let inner = inner_predictions(occluded_model(), &set.data).map_err(|e| e.to_string())?;
    let report = evaluate_grids(&set.grids, &inner, &[0.9]).map_err(|e| e.to_string())?;
    let row = report.row(0.9).unwrap();
    let gap = (row.clean_accuracy - report.inner_accuracy).abs();
    ensure(gap <= 0.05, || {
        format!("clean {:.3} vs inner {:.3}", row.clean_accuracy, report.inner_accuracy)
    })?;
    ensure(row.certified_accuracy > 0.0 && row.certified_accuracy <= row.clean_accuracy, || {
        format!("certified {:.3}, clean {:.3}", row.certified_accuracy, row.clean_accuracy)
    })?;
    Ok(format!(
        "inner {:.3}, clean {:.3}, certified {:.3} (positionwise {:.3}), abstain {:.3}",
        report.inner_accuracy, row.clean_accuracy, row.certified_accuracy, row.certified_accuracy_positionwise, row.abstain_rate
    ))
}

fn c9_attack() -> Check {
    let model = occluded_model();
    let data = val_subset(20);
    let base = AttackConfig {
        patch: 6,
        ..AttackConfig::default()
    };
    let mut successes = 0;
    let mut worst = 0.0f32;
    for (i, (img, &label)) in data.images.iter().zip(&data.labels).enumerate() {
        let cfg = AttackConfig {
            seed: base.seed + i as u64,
            ..base
        };
        let r = attack_image(model, img, label, &cfg, Enumeration::FirstSuccess).map_err(|e| e.to_string())?;
        if !r.success {
            continue;
        }
        successes += 1;
        let replay = apply_patch(img, r.best.position, 6, &r.best.patch).map_err(|e| e.to_string())?;
        let conf = clean_confidences(model, &replay).map_err(|e| e.to_string())?;
        let arg = occvote::argmax(&conf);
        let diff = (conf[r.target] - r.best.confidence).abs();
        worst = worst.max(diff);
        ensure(arg == r.target && diff <= 1e-5, || {
            format!("image {i}: replay argmax {arg} (target {}), confidence diff {diff:.2e}", r.target)
        })?;
    }
    let rate = successes as f64 / data.len() as f64;
    ensure((0.2..=0.9).contains(&rate), || {
        format!("6x6 success rate {rate:.2} outside [0.2, 0.9]")
    })?;
    Ok(format!("6x6 success rate {rate:.2}, {successes} replays, worst confidence diff {worst:.1e}"))
}

fn c10_ablation() -> Check {
    let set = eval_set();
    let acc = |grids: &[PredictionGrid], model: &ModelParams<f32>| -> std::result::Result<f64, String> {
        let inner = inner_predictions(model, &set.data).map_err(|e| e.to_string())?;
        let report = evaluate_grids(grids, &inner, &[0.9]).map_err(|e| e.to_string())?;
        Ok(report.row(0.9).unwrap().certified_accuracy)
    };
    let with = acc(&set.grids, occluded_model())?;
    let plain_grids = dataset_grids(plain_model(), &set.data, &DefenseConfig::default(), "val-").map_err(|e| e.to_string())?;
    let without = acc(&plain_grids, plain_model())?;
    ensure(without < with, || {
        format!("without occlusion {without:.3} is not below with occlusion {with:.3}")
    })?;
    Ok(format!("certified accuracy at tau=0.9: with occlusion {with:.3}, without {without:.3}"))
}

fn c11_formats() -> Check {
    let model = occluded_model();
    let bytes = encode_params(model).map_err(|e| e.to_string())?;
    let decoded = decode_params(&bytes).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ckpt = dir.path().join("model.bin");
    save_params(model, &ckpt).map_err(|e| e.to_string())?;
    let loaded = load_params(&ckpt).map_err(|e| e.to_string())?;
    let bits = |m: &ModelParams<f32>| -> Vec<u32> {
        m.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(&l.bias).map(|v| v.to_bits()))
            .collect()
    };
    ensure(bits(&decoded) == bits(model) && bits(&loaded) == bits(model), || "checkpoint weights differ".into())?;
    ensure(encode_params(&loaded).map_err(|e| e.to_string())? == bytes, || "re-encoded checkpoint differs".into())?;

    let val = &splits().val;
    let exe = env!("CARGO_BIN_EXE_occvote");
    for index in [0usize, 17, 123] {
        let grid_file = dir.path().join(format!("grid{index}.json"));
        let run = |args: &[&str]| {
            Command::new(exe)
                .args(args)
                .env("OCCVOTE_DATA_DIR", common::data_dir())
                .output()
                .map_err(|e| e.to_string())
        };
        let idx = index.to_string();
        let out = run(&[
            "grid", "--model", ckpt.to_str().unwrap(), "--split", "val", "--index", &idx, "--out",
            grid_file.to_str().unwrap(),
        ])?;
        ensure(out.status.success(), || String::from_utf8_lossy(&out.stderr).into_owned())?;
        let out = run(&["certify", "--grid", grid_file.to_str().unwrap()])?;
        ensure(out.status.success(), || String::from_utf8_lossy(&out.stderr).into_owned())?;
        let cli_line = String::from_utf8_lossy(&out.stdout).trim_end().to_string();

        let mut grid = prediction_grid(model, &val.images[index], &DefenseConfig::default()).map_err(|e| e.to_string())?;
        grid.image_id = format!("val-{index}");
        grid.true_label = Some(val.labels[index]);
        let from_file = PredictionGrid::load(&grid_file).map_err(|e| e.to_string())?;
        ensure(from_file == grid, || format!("grid file for image {index} differs from in-process grid"))?;
        let line = certify_grid(&grid)
            .and_then(|c| c.report_line(CertRule::Unanimous))
            .map_err(|e| e.to_string())?;
        ensure(cli_line == line, || format!("cli `{cli_line}` vs in-process `{line}`"))?;
    }

    let bad = common::golden::check_golden();
    ensure(bad.is_empty(), || bad.join("; "))?;
    Ok("checkpoint bit-exact, 3 grid files certify identically, golden renders match".into())
}

struct Criterion {
    number: usize,
    name: &'static str,
    budget: Duration,
    run: fn() -> Check,
}

fn main() {
    let min = |m: u64| Duration::from_secs(60 * m);
    // training happens inside criteria 4 and 10, grid generation inside 6
    let criteria = [
        Criterion { number: 1, name: "geometry", budget: Duration::from_secs(1), run: c1_geometry },
        Criterion { number: 2, name: "gradients", budget: min(1), run: c2_gradients },
        Criterion { number: 3, name: "sparse-conv degeneracy", budget: Duration::from_secs(1), run: c3_sparse_degeneracy },
        Criterion { number: 4, name: "desk training", budget: min(30), run: c4_training },
        Criterion { number: 5, name: "attack locality", budget: min(5), run: c5_locality },
        Criterion { number: 6, name: "certification soundness", budget: min(5), run: c6_soundness },
        Criterion { number: 7, name: "tau monotonicity", budget: min(30), run: c7_monotone },
        Criterion { number: 8, name: "defense accounting", budget: min(30), run: c8_accounting },
        Criterion { number: 9, name: "attack self-consistency", budget: min(60), run: c9_attack },
        Criterion { number: 10, name: "occlusion-training ablation", budget: min(60), run: c10_ablation },
        Criterion { number: 11, name: "format round-trips", budget: min(1), run: c11_formats },
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for c in &criteria {
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let took = start.elapsed();
        let result = match result {
            Ok(detail) if took > c.budget => Err(format!("{detail}; took {:.1}s over budget {:?}", took.as_secs_f64(), c.budget)),
            r => r,
        };
        let (status, detail) = match result {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {:>2} {:<28} {status} [{:.1}s] {detail}", c.number, c.name, took.as_secs_f64());
    }
    let _ = panic::take_hook();
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

