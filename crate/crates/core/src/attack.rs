//! Adversarial patch attack against the undefended classifier.
//!
//! For each patch position a sign-gradient descent on the target's
//! cross-entropy runs with a cyclic step size. Positions are attacked in
//! lockstep batches; every position has its own random stream, so results do
//! not depend on batching or thread count.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{BatchInput, ModelParams};
use crate::occlusion::Position;

/// Positions attacked together in one batch.
const POSITION_BATCH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub patch: usize,
    pub steps_per_cycle: usize,
    pub step_high: f64,
    pub step_low: f64,
    pub max_steps: usize,
    /// Target confidence that counts as success.
    pub success_confidence: f64,
    pub stall_window: usize,
    /// Minimum improvement of the best confidence over the stall window.
    pub stall_threshold: f64,
    /// Classes within this margin of the least likely one are candidate
    /// targets.
    pub target_margin: f64,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            patch: 6,
            steps_per_cycle: 10,
            step_high: 0.3,
            step_low: 0.002,
            max_steps: 150,
            success_confidence: 0.6,
            stall_window: 20,
            stall_threshold: 0.002,
            target_margin: 0.001,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.patch == 0 {
            return bad("patch size must be positive");
        }
        if self.steps_per_cycle == 0 || !self.max_steps.is_multiple_of(self.steps_per_cycle) {
            return bad("max steps must be a positive multiple of the cycle length");
        }
        if !(0.0 < self.step_low && self.step_low < self.step_high) {
            return bad("step range must satisfy 0 < low < high");
        }
        Ok(())
    }
}

/// Uniform draw among the classes within `margin` of the least likely one.
pub fn choose_target<R: Rng + ?Sized>(confidences: &[f32], margin: f64, rng: &mut R) -> usize {
    let min = confidences.iter().copied().fold(f32::INFINITY, f32::min);
    let candidates: Vec<usize> = (0..confidences.len())
        .filter(|&c| f64::from(confidences[c]) <= f64::from(min) + margin)
        .collect();
    *candidates.choose(rng).expect("at least the minimum qualifies")
}

/// Step sizes: each cycle descends geometrically from high to low.
pub fn cyclic_schedule(config: &AttackConfig) -> Vec<f64> {
    let n = config.steps_per_cycle;
    let ratio = if n > 1 {
        (config.step_low / config.step_high).powf(1.0 / (n - 1) as f64)
    } else {
        1.0
    };
    (0..config.max_steps)
        .map(|t| config.step_high * ratio.powi((t % n) as i32))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchAttackResult {
    pub success: bool,
    pub position: Position,
    pub target: usize,
    /// `[channel][row][col]`, values in `[0, 1]`.
    pub patch: Vec<f32>,
    /// Target probability of the best iterate.
    pub confidence: f32,
    pub steps: usize,
}

/// Copy of `image` with `patch` pasted at `position`.
pub fn apply_patch(image: &Image, position: Position, side: usize, patch: &[f32]) -> Result<Image> {
    let (x0, y0) = (position.x, position.y);
    if x0 < 0 || y0 < 0 || x0 as usize + side > image.width || y0 as usize + side > image.height {
        return Err(Error::InvalidPosition {
            x: x0,
            y: y0,
            reason: format!("a {side}-pixel patch does not fit a {}x{} image", image.width, image.height),
        });
    }
    if patch.len() != image.channels * side * side {
        return Err(Error::ShapeMismatch(format!(
            "patch has {} values, expected {}",
            patch.len(),
            image.channels * side * side
        )));
    }
    let mut out = image.clone();
    let (x0, y0) = (x0 as usize, y0 as usize);
    for c in 0..image.channels {
        for y in 0..side {
            for x in 0..side {
                out.set(c, y0 + y, x0 + x, patch[(c * side + y) * side + x]);
            }
        }
    }
    Ok(out)
}

fn extract_patch(image: &Image, position: Position, side: usize) -> Vec<f32> {
    let (x0, y0) = (position.x as usize, position.y as usize);
    let mut out = Vec::with_capacity(image.channels * side * side);
    for c in 0..image.channels {
        for y in 0..side {
            for x in 0..side {
                out.push(image.get(c, y0 + y, x0 + x));
            }
        }
    }
    out
}

fn check_shape(params: &ModelParams<f32>, image: &Image) -> Result<()> {
    let s = params.input;
    if (image.channels, image.height, image.width) != (s.channels, s.height, s.width) {
        return Err(Error::ShapeMismatch(format!(
            "image is {}x{}x{}, model expects {}x{}x{}",
            image.channels, image.height, image.width, s.channels, s.height, s.width
        )));
    }
    Ok(())
}

/// Unoccluded class probabilities.
pub fn clean_confidences(params: &ModelParams<f32>, image: &Image) -> Result<Vec<f32>> {
    check_shape(params, image)?;
    params.forward(&image.pixels, &vec![1.0; image.height * image.width])
}

fn position_rng(seed: u64, position: Position) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + ((position.y as u64) << 32 | position.x as u64));
    rng
}

struct Track {
    position: Position,
    patch: Vec<f32>,
    best_patch: Vec<f32>,
    best: f32,
    /// Best confidence after each evaluation.
    history: Vec<f32>,
    steps: usize,
    done: bool,
}

/// Lockstep attack on several positions of one image.
fn attack_positions(
    params: &ModelParams<f32>,
    image: &Image,
    positions: &[Position],
    target: usize,
    config: &AttackConfig,
) -> Result<Vec<PatchAttackResult>> {
    let side = config.patch;
    let patch_len = image.channels * side * side;
    for &p in positions {
        apply_patch(image, p, side, &vec![0.0; patch_len])?;
    }
    let clean = clean_confidences(params, image)?;
    if f64::from(clean[target]) >= config.success_confidence {
        return Ok(positions
            .iter()
            .map(|&position| PatchAttackResult {
                success: true,
                position,
                target,
                patch: extract_patch(image, position, side),
                confidence: clean[target],
                steps: 0,
            })
            .collect());
    }

    let schedule = cyclic_schedule(config);
    let mut tracks: Vec<Track> = positions
        .iter()
        .map(|&position| {
            let mut rng = position_rng(config.seed, position);
            let patch: Vec<f32> = (0..patch_len).map(|_| rng.gen_range(0.0..=1.0)).collect();
            Track {
                position,
                best_patch: patch.clone(),
                patch,
                best: f32::NEG_INFINITY,
                history: Vec::with_capacity(config.max_steps + 1),
                steps: 0,
                done: false,
            }
        })
        .collect();
    let plane = image.height * image.width;
    let classes = params.classes();

    for t in 0..=config.max_steps {
        let active: Vec<usize> = (0..tracks.len()).filter(|&i| !tracks[i].done).collect();
        if active.is_empty() {
            break;
        }
        let mut pixels = Vec::with_capacity(active.len() * image.pixels.len());
        for &i in &active {
            pixels.extend(apply_patch(image, tracks[i].position, side, &tracks[i].patch)?.pixels);
        }
        let masks = vec![1.0f32; active.len() * plane];
        let (probs, grads) = params.input_gradients_batch(
            BatchInput {
                pixels: &pixels,
                masks: &masks,
                batch: active.len(),
            },
            &vec![target; active.len()],
        )?;
        for (slot, &i) in active.iter().enumerate() {
            let tr = &mut tracks[i];
            let conf = probs[slot * classes + target];
            if conf > tr.best {
                tr.best = conf;
                tr.best_patch.clone_from(&tr.patch);
            }
            tr.history.push(tr.best);
            tr.steps = t;
            if t % config.steps_per_cycle == 0 {
                let succeeded = f64::from(tr.best) >= config.success_confidence;
                let stalled = t >= config.stall_window
                    && f64::from(tr.best - tr.history[t - config.stall_window]) < config.stall_threshold;
                if succeeded || stalled || t == config.max_steps {
                    tr.done = true;
                    continue;
                }
            }
            let eta = schedule[t] as f32;
            let g = &grads[slot * image.pixels.len()..(slot + 1) * image.pixels.len()];
            let (x0, y0) = (tr.position.x as usize, tr.position.y as usize);
            for c in 0..image.channels {
                for y in 0..side {
                    for x in 0..side {
                        let gi = (c * image.height + y0 + y) * image.width + x0 + x;
                        let v = &mut tr.patch[(c * side + y) * side + x];
                        let step = if g[gi] > 0.0 {
                            eta
                        } else if g[gi] < 0.0 {
                            -eta
                        } else {
                            0.0
                        };
                        *v = (*v - step).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    Ok(tracks
        .into_iter()
        .map(|tr| PatchAttackResult {
            success: f64::from(tr.best) >= config.success_confidence,
            position: tr.position,
            target,
            patch: tr.best_patch,
            confidence: tr.best,
            steps: tr.steps,
        })
        .collect())
}

/// Attack at a single patch position.
pub fn pgd_patch(
    params: &ModelParams<f32>,
    image: &Image,
    position: Position,
    target: usize,
    config: &AttackConfig,
) -> Result<PatchAttackResult> {
    config.validate()?;
    if target >= params.classes() {
        return Err(Error::LabelOutOfRange {
            label: target,
            classes: params.classes(),
        });
    }
    Ok(attack_positions(params, image, &[position], target, config)?.remove(0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageAttackResult {
    pub image_id: String,
    pub label: usize,
    pub target: usize,
    pub success: bool,
    /// First successful position in row-major order, otherwise the most
    /// confident one.
    pub best: PatchAttackResult,
    pub successful_positions: usize,
    pub positions_tried: usize,
}

impl ImageAttackResult {
    pub fn report_line(&self) -> Result<String> {
        Ok(serde_json::to_string(&serde_json::json!({
            "image_id": self.image_id,
            "target": self.target,
            "success": self.success,
            "best_position": [self.best.position.x, self.best.position.y],
            "confidence": self.best.confidence,
            "steps": self.best.steps,
            "successful_position_count": self.successful_positions,
        }))?)
    }
}

/// How far to enumerate patch positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Enumeration {
    /// Attack every position.
    Exhaustive,
    /// Stop after the first batch of positions that contains a success.
    FirstSuccess,
}

fn patch_positions(image: &Image, side: usize) -> Vec<Position> {
    let (mx, my) = (image.width.saturating_sub(side) as i64, image.height.saturating_sub(side) as i64);
    (0..=my).flat_map(|y| (0..=mx).map(move |x| Position::new(x, y))).collect()
}

/// Least-likely target, then the attack at every patch position.
pub fn attack_image(
    params: &ModelParams<f32>,
    image: &Image,
    label: usize,
    config: &AttackConfig,
    enumeration: Enumeration,
) -> Result<ImageAttackResult> {
    config.validate()?;
    check_shape(params, image)?;
    if config.patch > image.width || config.patch > image.height {
        return Err(Error::InvalidConfig(format!(
            "patch {} exceeds image {}x{}",
            config.patch, image.width, image.height
        )));
    }
    let clean = clean_confidences(params, image)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let target = choose_target(&clean, config.target_margin, &mut rng);
    let positions = patch_positions(image, config.patch);
    let results: Vec<PatchAttackResult> = match enumeration {
        Enumeration::Exhaustive => positions
            .par_chunks(POSITION_BATCH)
            .map(|chunk| attack_positions(params, image, chunk, target, config))
            .collect::<Result<Vec<_>>>()?
            .concat(),
        Enumeration::FirstSuccess => {
            let mut out = Vec::new();
            for chunk in positions.chunks(POSITION_BATCH) {
                let batch = attack_positions(params, image, chunk, target, config)?;
                let hit = batch.iter().any(|r| r.success);
                out.extend(batch);
                if hit {
                    break;
                }
            }
            out
        }
    };
    summarize(label, target, results)
}

/// Serial [`attack_image`] with exhaustive enumeration.
pub fn attack_image_serial(
    params: &ModelParams<f32>,
    image: &Image,
    label: usize,
    config: &AttackConfig,
) -> Result<ImageAttackResult> {
    config.validate()?;
    let clean = clean_confidences(params, image)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let target = choose_target(&clean, config.target_margin, &mut rng);
    let mut results = Vec::new();
    for chunk in patch_positions(image, config.patch).chunks(POSITION_BATCH) {
        results.extend(attack_positions(params, image, chunk, target, config)?);
    }
    summarize(label, target, results)
}

fn summarize(label: usize, target: usize, results: Vec<PatchAttackResult>) -> Result<ImageAttackResult> {
    let successful_positions = results.iter().filter(|r| r.success).count();
    let positions_tried = results.len();
    let best = match results.iter().position(|r| r.success) {
        Some(i) => results[i].clone(),
        None => results
            .iter()
            .fold(None::<&PatchAttackResult>, |b, r| match b {
                Some(b) if b.confidence >= r.confidence => Some(b),
                _ => Some(r),
            })
            .ok_or_else(|| Error::InvalidConfig("no patch positions".into()))?
            .clone(),
    };
    Ok(ImageAttackResult {
        image_id: String::new(),
        label,
        target,
        success: successful_positions > 0,
        best,
        successful_positions,
        positions_tried,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub patch: usize,
    pub images: usize,
    pub successes: usize,
    pub success_rate: f64,
}

/// Fraction of images with at least one successful position, per patch size.
pub fn feasibility_sweep(
    params: &ModelParams<f32>,
    images: &[Image],
    labels: &[usize],
    sizes: &[usize],
    config: &AttackConfig,
) -> Result<Vec<SweepRow>> {
    if images.len() != labels.len() {
        return Err(Error::CountMismatch {
            images: images.len(),
            labels: labels.len(),
        });
    }
    sizes
        .iter()
        .map(|&patch| {
            let cfg = AttackConfig { patch, ..*config };
            let mut successes = 0;
            for (i, (img, &label)) in images.iter().zip(labels).enumerate() {
                let per_image = AttackConfig {
                    seed: config.seed.wrapping_add(i as u64),
                    ..cfg
                };
                if attack_image(params, img, label, &per_image, Enumeration::FirstSuccess)?.success {
                    successes += 1;
                }
            }
            Ok(SweepRow {
                patch,
                images: images.len(),
                successes,
                success_rate: if images.is_empty() { 0.0 } else { successes as f64 / images.len() as f64 },
            })
        })
        .collect()
}
