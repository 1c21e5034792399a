//! Patch-robustness certificates and the worst-case adversary used to check
//! them.
//!
//! A patch at position `r` cannot influence a prediction-grid cell whose
//! occlusion window fully hides `r`. A vote cell whose nine windows all hide
//! `r` is therefore out of the attacker's reach.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{prediction_grid, Classifier, PredictionGrid};
use crate::image::Image;
use crate::occlusion::{DefenseConfig, GridGeometry, Position};
use crate::vote::{block_vote, decide, vote, DefenseOutcome, Verdict, VoteGrid};

/// Which certificate counts as "certified".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CertRule {
    /// Every vote cell votes the clean class, no abstentions.
    #[default]
    Unanimous,
    /// Every patch position leaves at least one clean-class vote untouched.
    Positionwise,
}

impl FromStr for CertRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unanimous" => Ok(CertRule::Unanimous),
            "positionwise" => Ok(CertRule::Positionwise),
            _ => Err(Error::InvalidConfig(format!("unknown certification rule {s:?}"))),
        }
    }
}

impl fmt::Display for CertRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CertRule::Unanimous => "unanimous",
            CertRule::Positionwise => "positionwise",
        })
    }
}

/// Vote-grid rows (or columns) whose three underlying windows all hide the
/// patch, given the range of grid rows that hide it.
fn vote_span(containing: std::ops::Range<usize>) -> std::ops::Range<usize> {
    if containing.len() >= 3 {
        containing.start..containing.end - 2
    } else {
        0..0
    }
}

/// Vote cells `(row, col)` that a patch at `patch_at` cannot affect.
pub fn unaffected_votes(patch_at: Position, geometry: &GridGeometry) -> Vec<(usize, usize)> {
    let rows = vote_span(geometry.containing_rows(patch_at.y));
    let cols = vote_span(geometry.containing_cols(patch_at.x));
    rows.flat_map(|i| cols.clone().map(move |j| (i, j))).collect()
}

/// The grid-level certificate: a benign verdict and no abstentions.
pub fn certify_unanimous(votes: &VoteGrid, clean: &DefenseOutcome) -> bool {
    match clean.verdict {
        Verdict::Benign(c) => !votes.cells.is_empty() && votes.cells.iter().all(|&v| v == Some(c)),
        _ => false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificationResult {
    pub image_id: String,
    pub true_label: Option<usize>,
    pub clean: DefenseOutcome,
    pub unanimous_safe: bool,
    pub positionwise_safe: bool,
    /// Safety of each patch position, in [`GridGeometry::patch_positions`] order.
    pub position_safe: Vec<bool>,
    pub unsafe_positions: Vec<Position>,
}

impl CertificationResult {
    pub fn certified_safe(&self, rule: CertRule) -> bool {
        match rule {
            CertRule::Unanimous => self.unanimous_safe,
            CertRule::Positionwise => self.positionwise_safe,
        }
    }

    /// Certified safe and the clean verdict is benign with the true label.
    pub fn certified_accurate(&self, rule: CertRule) -> bool {
        self.clean_correct() && self.certified_safe(rule)
    }

    pub fn clean_correct(&self) -> bool {
        matches!((self.clean.verdict, self.true_label), (Verdict::Benign(c), Some(l)) if c == l)
    }

    /// One line of the certification report.
    pub fn report_line(&self, rule: CertRule) -> Result<String> {
        Ok(serde_json::to_string(&serde_json::json!({
            "image_id": self.image_id,
            "clean_verdict": self.clean.verdict.name(),
            "clean_class": self.clean.verdict.class(),
            "certified_safe": self.certified_safe(rule),
            "certified_accurate": self.certified_accurate(rule),
            "unsafe_positions_count": self.unsafe_positions.len(),
            "rule": rule,
        }))?)
    }
}

/// Per-position certificate for an already voted grid.
pub fn certify_positionwise(votes: &VoteGrid, clean: &DefenseOutcome, geometry: &GridGeometry) -> CertificationResult {
    let positions = geometry.patch_positions();
    let position_safe: Vec<bool> = match clean.verdict {
        Verdict::Benign(c) => positions
            .iter()
            .map(|&r| unaffected_votes(r, geometry).iter().any(|&(i, j)| votes.get(i, j) == Some(c)))
            .collect(),
        _ => vec![false; positions.len()],
    };
    let unsafe_positions: Vec<Position> = positions
        .iter()
        .zip(&position_safe)
        .filter(|(_, &ok)| !ok)
        .map(|(&p, _)| p)
        .collect();
    CertificationResult {
        image_id: String::new(),
        true_label: None,
        clean: clean.clone(),
        unanimous_safe: certify_unanimous(votes, clean),
        positionwise_safe: unsafe_positions.is_empty() && !positions.is_empty(),
        position_safe,
        unsafe_positions,
    }
}

/// Votes, decides and certifies a prediction grid under its own config.
pub fn certify_grid(grid: &PredictionGrid) -> Result<CertificationResult> {
    let votes = vote(grid)?;
    let clean = decide(&votes);
    let mut result = certify_positionwise(&votes, &clean, &grid.geometry);
    result.image_id = grid.image_id.clone();
    result.true_label = grid.true_label;
    Ok(result)
}

/// Grid, vote, verdict and both certificates for one labelled image.
pub fn certified_accuracy_flags(
    classifier: &impl Classifier,
    image: &Image,
    label: usize,
    config: &DefenseConfig,
) -> Result<CertificationResult> {
    let mut grid = prediction_grid(classifier, image, config)?;
    grid.true_label = Some(label);
    certify_grid(&grid)
}

/// An undetected misclassification found by [`adversary_oracle`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Breach {
    pub position: Position,
    pub target: usize,
    pub verdict: Verdict,
}

/// Worst-case single-target attack: for every patch position and every
/// class other than the clean one, every grid cell whose window does not
/// hide the patch is replaced by a one-hot score for the target. Returns the
/// attempts that end in a benign verdict for the target.
pub fn adversary_oracle(grid: &PredictionGrid) -> Result<Vec<Breach>> {
    let clean_votes = vote(grid)?;
    let clean_class = decide(&clean_votes).verdict.class();
    let (mode, tau) = (grid.config.vote, grid.config.tau);
    let k = grid.classes;
    let one_hots: Vec<Vec<f32>> = (0..k)
        .map(|t| (0..k).map(|c| if c == t { 1.0 } else { 0.0 }).collect())
        .collect();
    let (vr, vc) = (clean_votes.rows, clean_votes.cols);
    let positions = grid.geometry.patch_positions();

    let found: Vec<Vec<Breach>> = positions
        .par_iter()
        .map(|&r| {
            let rows = grid.geometry.containing_rows(r.y);
            let cols = grid.geometry.containing_cols(r.x);
            let hidden = |i: usize, j: usize| rows.contains(&i) && cols.contains(&j);
            let overlaps = |start: usize, range: &std::ops::Range<usize>| start < range.end && start + 3 > range.start;
            let inside = |start: usize, range: &std::ops::Range<usize>| range.start <= start && start + 3 <= range.end;
            let mut breaches = Vec::new();
            for target in (0..k).filter(|&t| Some(t) != clean_class) {
                let mut voted = std::collections::BTreeSet::new();
                for i in 0..vr {
                    for j in 0..vc {
                        let v = if inside(i, &rows) && inside(j, &cols) {
                            clean_votes.get(i, j)
                        } else if !(overlaps(i, &rows) && overlaps(j, &cols)) {
                            block_vote(|_, _| &one_hots[target][..], i, j, k, mode, tau)
                        } else {
                            block_vote(
                                |a, b| if hidden(a, b) { grid.cell(a, b) } else { &one_hots[target][..] },
                                i,
                                j,
                                k,
                                mode,
                                tau,
                            )
                        };
                        if let Some(c) = v {
                            voted.insert(c);
                            if voted.len() > 1 {
                                break;
                            }
                        }
                    }
                    if voted.len() > 1 {
                        break;
                    }
                }
                if voted.len() == 1 && voted.contains(&target) {
                    breaches.push(Breach {
                        position: r,
                        target,
                        verdict: Verdict::Benign(target),
                    });
                }
            }
            breaches
        })
        .collect();
    Ok(found.into_iter().flatten().collect())
}
