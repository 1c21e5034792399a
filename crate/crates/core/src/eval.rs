//! Measurement protocols: defended clean and certified accuracy over a
//! threshold sweep, the occlusion-training ablation and multi-trial
//! statistics.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::certify::{certify_positionwise, CertRule};
use crate::data::{random_split, Dataset, SplitSpec};
use crate::error::{Error, Result};
use crate::grid::{prediction_grid_serial, Classifier, PredictionGrid};
use crate::nn::{self, InputShape, ModelParams, TrainConfig};
use crate::occlusion::{DefenseConfig, VoteMode};
use crate::vote::{decide, hard_vote, soft_vote, Verdict};

/// Outcome for one image at one threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageFlags {
    pub verdict: Verdict,
    pub clean_correct: bool,
    pub unanimous_safe: bool,
    pub positionwise_safe: bool,
}

impl ImageFlags {
    pub fn certified_accurate(&self, rule: CertRule) -> bool {
        self.clean_correct
            && match rule {
                CertRule::Unanimous => self.unanimous_safe,
                CertRule::Positionwise => self.positionwise_safe,
            }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub label: usize,
    /// Unoccluded prediction of the inner classifier.
    pub inner_prediction: usize,
    /// One entry per threshold of the sweep.
    pub flags: Vec<ImageFlags>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TauRow {
    pub tau: f64,
    pub clean_accuracy: f64,
    pub certified_accuracy: f64,
    pub certified_accuracy_positionwise: f64,
    pub abstain_rate: f64,
    /// Clean images flagged as attacks.
    pub detection_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: DefenseConfig,
    pub images: usize,
    pub inner_accuracy: f64,
    pub rows: Vec<TauRow>,
    pub per_image: Vec<ImageRecord>,
}

impl EvalReport {
    pub fn row(&self, tau: f64) -> Option<&TauRow> {
        self.rows.iter().find(|r| r.tau == tau)
    }

    /// Columns: tau, clean_accuracy, certified_accuracy,
    /// certified_accuracy_positionwise, abstain_rate, detection_rate,
    /// inner_accuracy, images.
    pub fn tau_csv(&self) -> String {
        let mut s = String::from(
            "tau,clean_accuracy,certified_accuracy,certified_accuracy_positionwise,abstain_rate,detection_rate,inner_accuracy,images\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
                r.tau,
                r.clean_accuracy,
                r.certified_accuracy,
                r.certified_accuracy_positionwise,
                r.abstain_rate,
                r.detection_rate,
                self.inner_accuracy,
                self.images
            );
        }
        s
    }
}

fn rate(count: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        count as f64 / total as f64
    }
}

/// Flags for a grid voted at `tau` (ignored for hard voting).
pub fn image_flags(grid: &PredictionGrid, label: usize, tau: f64) -> Result<ImageFlags> {
    let votes = match grid.config.vote {
        VoteMode::Hard => hard_vote(grid)?,
        VoteMode::Soft => soft_vote(grid, tau)?,
    };
    let clean = decide(&votes);
    let cert = certify_positionwise(&votes, &clean, &grid.geometry);
    Ok(ImageFlags {
        verdict: clean.verdict,
        clean_correct: clean.verdict == Verdict::Benign(label),
        unanimous_safe: cert.unanimous_safe,
        positionwise_safe: cert.positionwise_safe,
    })
}

/// Tabulates precomputed grids. Every grid must carry its true label.
pub fn evaluate_grids(grids: &[PredictionGrid], inner_predictions: &[usize], taus: &[f64]) -> Result<EvalReport> {
    if grids.len() != inner_predictions.len() {
        return Err(Error::CountMismatch {
            images: grids.len(),
            labels: inner_predictions.len(),
        });
    }
    let config = grids.first().map(|g| g.config).ok_or(Error::EmptyDataset)?;
    let per_image: Vec<ImageRecord> = grids
        .par_iter()
        .zip(inner_predictions)
        .map(|(g, &inner)| {
            let label = g
                .true_label
                .ok_or_else(|| Error::InvalidConfig(format!("grid {:?} has no true label", g.image_id)))?;
            let flags = taus.iter().map(|&t| image_flags(g, label, t)).collect::<Result<_>>()?;
            Ok(ImageRecord {
                image_id: g.image_id.clone(),
                label,
                inner_prediction: inner,
                flags,
            })
        })
        .collect::<Result<_>>()?;
    let n = per_image.len();
    let rows = taus
        .iter()
        .enumerate()
        .map(|(k, &tau)| {
            let count = |f: &dyn Fn(&ImageFlags) -> bool| per_image.iter().filter(|r| f(&r.flags[k])).count();
            TauRow {
                tau,
                clean_accuracy: rate(count(&|f| f.clean_correct), n),
                certified_accuracy: rate(count(&|f| f.certified_accurate(CertRule::Unanimous)), n),
                certified_accuracy_positionwise: rate(count(&|f| f.certified_accurate(CertRule::Positionwise)), n),
                abstain_rate: rate(count(&|f| f.verdict == Verdict::Abstain), n),
                detection_rate: rate(count(&|f| f.verdict == Verdict::Malicious), n),
            }
        })
        .collect();
    let inner_accuracy = rate(
        per_image.iter().filter(|r| r.inner_prediction == r.label).count(),
        n,
    );
    Ok(EvalReport {
        config,
        images: n,
        inner_accuracy,
        rows,
        per_image,
    })
}

/// Unoccluded argmax of the classifier for each image.
pub fn inner_predictions(classifier: &impl Classifier, dataset: &Dataset) -> Result<Vec<usize>> {
    let plane = dataset.height * dataset.width;
    dataset
        .images
        .par_iter()
        .map(|img| {
            let probs = classifier.predict(&img.pixels, &vec![1.0; plane], 1)?;
            Ok(crate::argmax(&probs))
        })
        .collect()
}

/// Prediction grids for every image, labelled with the dataset labels and
/// identified by `"{prefix}{index}"`.
pub fn dataset_grids(
    classifier: &impl Classifier,
    dataset: &Dataset,
    config: &DefenseConfig,
    prefix: &str,
) -> Result<Vec<PredictionGrid>> {
    dataset
        .images
        .par_iter()
        .zip(&dataset.labels)
        .enumerate()
        .map(|(i, (img, &label))| {
            let mut g = prediction_grid_serial(classifier, img, config)?;
            g.image_id = format!("{prefix}{i}");
            g.true_label = Some(label);
            Ok(g)
        })
        .collect()
}

/// Runs the full defense on every image for each threshold.
pub fn evaluate_defense(
    classifier: &impl Classifier,
    val: &Dataset,
    config: &DefenseConfig,
    taus: &[f64],
) -> Result<EvalReport> {
    config.validate()?;
    for &t in taus {
        if !(t > 0.0 && t <= 1.0) {
            return Err(Error::InvalidConfig(format!("tau {t} outside (0, 1]")));
        }
    }
    let grids = dataset_grids(classifier, val, config, "")?;
    evaluate_grids(&grids, &inner_predictions(classifier, val)?, taus)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub unoccluded_accuracy: f64,
    pub clean_accuracy: f64,
    pub certified_accuracy: f64,
    pub certified_accuracy_positionwise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub tau: f64,
    pub with_occlusion: AblationRow,
    pub without_occlusion: AblationRow,
}

impl AblationReport {
    /// Unoccluded accuracy gained by occlusion training.
    pub fn unoccluded_delta(&self) -> f64 {
        self.with_occlusion.unoccluded_accuracy - self.without_occlusion.unoccluded_accuracy
    }

    pub fn certified_delta(&self) -> f64 {
        self.with_occlusion.certified_accuracy - self.without_occlusion.certified_accuracy
    }

    /// Columns: model, unoccluded_accuracy, clean_accuracy,
    /// certified_accuracy, certified_accuracy_positionwise.
    pub fn csv(&self) -> String {
        let mut s = String::from(
            "model,unoccluded_accuracy,clean_accuracy,certified_accuracy,certified_accuracy_positionwise\n",
        );
        for r in [&self.with_occlusion, &self.without_occlusion] {
            let _ = writeln!(
                s,
                "{},{:.6},{:.6},{:.6},{:.6}",
                r.name, r.unoccluded_accuracy, r.clean_accuracy, r.certified_accuracy, r.certified_accuracy_positionwise
            );
        }
        s
    }
}

fn ablation_row(name: &str, report: &EvalReport) -> AblationRow {
    let row = report.rows[0];
    AblationRow {
        name: name.into(),
        unoccluded_accuracy: report.inner_accuracy,
        clean_accuracy: row.clean_accuracy,
        certified_accuracy: row.certified_accuracy,
        certified_accuracy_positionwise: row.certified_accuracy_positionwise,
    }
}

/// Compares a model trained with occlusion augmentation against one
/// trained without, on the same images at the configured threshold.
pub fn ablation_occlusion_training(
    with_occlusion: &impl Classifier,
    without_occlusion: &impl Classifier,
    val: &Dataset,
    config: &DefenseConfig,
) -> Result<AblationReport> {
    let a = evaluate_defense(with_occlusion, val, config, &[config.tau])?;
    let b = evaluate_defense(without_occlusion, val, config, &[config.tau])?;
    Ok(AblationReport {
        tau: config.tau,
        with_occlusion: ablation_row("occlusion_trained", &a),
        without_occlusion: ablation_row("plain_trained", &b),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialMetrics {
    pub seed: u64,
    pub inner_accuracy: f64,
    pub clean_accuracy: f64,
    pub certified_accuracy: f64,
    pub certified_accuracy_positionwise: f64,
    pub abstain_rate: f64,
    pub detection_rate: f64,
}

impl TrialMetrics {
    pub const NAMES: [&'static str; 6] = [
        "inner_accuracy",
        "clean_accuracy",
        "certified_accuracy",
        "certified_accuracy_positionwise",
        "abstain_rate",
        "detection_rate",
    ];

    pub fn values(&self) -> [f64; 6] {
        [
            self.inner_accuracy,
            self.clean_accuracy,
            self.certified_accuracy,
            self.certified_accuracy_positionwise,
            self.abstain_rate,
            self.detection_rate,
        ]
    }

    pub fn from_report(seed: u64, report: &EvalReport) -> Self {
        let r = report.rows[0];
        TrialMetrics {
            seed,
            inner_accuracy: report.inner_accuracy,
            clean_accuracy: r.clean_accuracy,
            certified_accuracy: r.certified_accuracy,
            certified_accuracy_positionwise: r.certified_accuracy_positionwise,
            abstain_rate: r.abstain_rate,
            detection_rate: r.detection_rate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub name: &'static str,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single trial.
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MultiTrialReport {
    pub trials: Vec<TrialMetrics>,
    pub summary: Vec<MetricSummary>,
}

impl MultiTrialReport {
    pub fn from_trials(trials: Vec<TrialMetrics>) -> Result<Self> {
        if trials.is_empty() {
            return Err(Error::InvalidConfig("at least one trial is required".into()));
        }
        let n = trials.len() as f64;
        let summary = TrialMetrics::NAMES
            .iter()
            .enumerate()
            .map(|(k, &name)| {
                let mean = trials.iter().map(|t| t.values()[k]).sum::<f64>() / n;
                let std = if trials.len() > 1 {
                    (trials.iter().map(|t| (t.values()[k] - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
                } else {
                    0.0
                };
                MetricSummary { name, mean, std }
            })
            .collect();
        Ok(MultiTrialReport { trials, summary })
    }

    pub fn metric(&self, name: &str) -> Option<&MetricSummary> {
        self.summary.iter().find(|m| m.name == name)
    }

    /// Columns: seed followed by every metric; the last two rows hold the
    /// mean and standard deviation.
    pub fn csv(&self) -> String {
        let mut s = format!("seed,{}\n", TrialMetrics::NAMES.join(","));
        for t in &self.trials {
            let vals: Vec<String> = t.values().iter().map(|v| format!("{v:.6}")).collect();
            let _ = writeln!(s, "{},{}", t.seed, vals.join(","));
        }
        for (label, pick) in [("mean", 0), ("std", 1)] {
            let vals: Vec<String> = self
                .summary
                .iter()
                .map(|m| format!("{:.6}", if pick == 0 { m.mean } else { m.std }))
                .collect();
            let _ = writeln!(s, "{label},{}", vals.join(","));
        }
        s
    }
}

/// Runs `trial` once per seed and aggregates.
pub fn multi_trial<F>(seeds: &[u64], mut trial: F) -> Result<MultiTrialReport>
where
    F: FnMut(u64) -> Result<TrialMetrics>,
{
    let trials = seeds.iter().map(|&s| trial(s)).collect::<Result<Vec<_>>>()?;
    MultiTrialReport::from_trials(trials)
}

/// Everything one training-and-evaluation trial needs.
#[derive(Debug, Clone, Copy)]
pub struct TrialSetup<'a> {
    /// Labelled pool that is split into training and validation parts.
    pub pool: &'a Dataset,
    pub train: TrainConfig,
    pub defense: DefenseConfig,
    pub split: SplitSpec,
    /// Validation images evaluated per trial.
    pub eval_images: usize,
}

/// Fresh split, fresh model and evaluation at the configured threshold, all
/// seeded from `seed`.
pub fn run_trial(setup: &TrialSetup<'_>, seed: u64) -> Result<TrialMetrics> {
    let (train_set, val) = random_split(setup.pool, &SplitSpec { seed, ..setup.split })?;
    let input = InputShape {
        channels: train_set.channels,
        height: train_set.height,
        width: train_set.width,
    };
    let init = ModelParams::desk_cnn(input, train_set.classes, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let cfg = TrainConfig { seed, ..setup.train };
    let trained = nn::train(&init, &train_set, None, &cfg, &setup.defense)?;
    let subset = val.sample(setup.eval_images.min(val.len()), seed);
    let report = evaluate_defense(&trained.params, &subset, &setup.defense, &[setup.defense.tau])?;
    Ok(TrialMetrics::from_report(seed, &report))
}
