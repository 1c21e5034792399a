//! Reduction of a prediction grid to 3x3-block votes and a final verdict.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::PredictionGrid;
use crate::occlusion::VoteMode;

/// Mean of nine scores after dropping one occurrence of the minimum.
pub fn trimmed_mean(scores: &[f64]) -> Result<f64> {
    if scores.len() != 9 {
        return Err(Error::WrongArity(scores.len()));
    }
    let min_at = scores
        .iter()
        .enumerate()
        .fold(0, |m, (i, &v)| if v < scores[m] { i } else { m });
    let sum: f64 = scores
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != min_at)
        .map(|(_, &v)| v)
        .sum();
    Ok(sum / 8.0)
}

/// Votes of every 3x3 block of a prediction grid; `None` is an abstention.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteGrid {
    pub rows: usize,
    pub cols: usize,
    pub cells: Vec<Option<usize>>,
}

impl VoteGrid {
    pub fn get(&self, row: usize, col: usize) -> Option<usize> {
        self.cells[row * self.cols + col]
    }

    pub fn abstentions(&self) -> usize {
        self.cells.iter().filter(|v| v.is_none()).count()
    }
}

/// Vote of the 3x3 block whose top-left grid cell is `(row, col)`.
///
/// `cell(r, c)` yields the scores of grid cell `(r, c)`.
pub(crate) fn block_vote<'a, F>(cell: F, row: usize, col: usize, classes: usize, mode: VoteMode, tau: f64) -> Option<usize>
where
    F: Fn(usize, usize) -> &'a [f32],
{
    let block = || (0..3).flat_map(move |u| (0..3).map(move |v| (row + u, col + v)));
    match mode {
        VoteMode::Hard => {
            let mut agreed = None;
            for (r, c) in block() {
                let a = crate::argmax(cell(r, c));
                match agreed {
                    None => agreed = Some(a),
                    Some(prev) if prev != a => return None,
                    _ => {}
                }
            }
            agreed
        }
        VoteMode::Soft => {
            let mut best: Option<(usize, f64)> = None;
            let mut tied = false;
            let mut column = [0.0f64; 9];
            for k in 0..classes {
                for (slot, (r, c)) in column.iter_mut().zip(block()) {
                    *slot = f64::from(cell(r, c)[k]);
                }
                let mean = trimmed_mean(&column).expect("nine scores");
                if mean < tau {
                    continue;
                }
                match best {
                    Some((_, m)) if mean < m => {}
                    Some((_, m)) if mean == m => tied = true,
                    _ => {
                        best = Some((k, mean));
                        tied = false;
                    }
                }
            }
            if tied {
                None
            } else {
                best.map(|(k, _)| k)
            }
        }
    }
}

fn vote_with(grid: &PredictionGrid, mode: VoteMode, tau: f64) -> Result<VoteGrid> {
    if grid.rows() < 3 || grid.cols() < 3 {
        return Err(Error::GridTooSmall {
            rows: grid.rows(),
            cols: grid.cols(),
        });
    }
    if mode == VoteMode::Soft && !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::InvalidConfig(format!("tau {tau} outside (0, 1]")));
    }
    let (rows, cols) = (grid.rows() - 2, grid.cols() - 2);
    let cells = (0..rows)
        .flat_map(|i| (0..cols).map(move |j| (i, j)))
        .map(|(i, j)| block_vote(|r, c| grid.cell(r, c), i, j, grid.classes, mode, tau))
        .collect();
    Ok(VoteGrid { rows, cols, cells })
}

/// A block votes `c` only if all nine cells have argmax `c`.
pub fn hard_vote(grid: &PredictionGrid) -> Result<VoteGrid> {
    vote_with(grid, VoteMode::Hard, 1.0)
}

/// A block votes for the class with the largest trimmed mean at or above
/// `tau`; an exact tie between passing classes abstains.
pub fn soft_vote(grid: &PredictionGrid, tau: f64) -> Result<VoteGrid> {
    vote_with(grid, VoteMode::Soft, tau)
}

/// Votes under the grid's own configuration.
pub fn vote(grid: &PredictionGrid) -> Result<VoteGrid> {
    vote_with(grid, grid.config.vote, grid.config.tau)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "verdict", content = "class")]
pub enum Verdict {
    Benign(usize),
    Malicious,
    Abstain,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verdict::Benign(c) => write!(f, "benign({c})"),
            Verdict::Malicious => f.write_str("malicious"),
            Verdict::Abstain => f.write_str("abstain"),
        }
    }
}

impl Verdict {
    pub fn name(&self) -> &'static str {
        match self {
            Verdict::Benign(_) => "benign",
            Verdict::Malicious => "malicious",
            Verdict::Abstain => "abstain",
        }
    }

    pub fn class(&self) -> Option<usize> {
        match self {
            Verdict::Benign(c) => Some(*c),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DefenseOutcome {
    pub verdict: Verdict,
    /// Number of vote cells per voted class.
    pub census: BTreeMap<usize, usize>,
}

pub fn decide(votes: &VoteGrid) -> DefenseOutcome {
    let mut census = BTreeMap::new();
    for c in votes.cells.iter().flatten() {
        *census.entry(*c).or_insert(0) += 1;
    }
    let verdict = match census.len() {
        0 => Verdict::Abstain,
        1 => Verdict::Benign(*census.keys().next().expect("one class")),
        _ => Verdict::Malicious,
    };
    DefenseOutcome { verdict, census }
}

/// Votes and decides under the grid's own configuration.
pub fn defend(grid: &PredictionGrid) -> Result<(VoteGrid, DefenseOutcome)> {
    let votes = vote(grid)?;
    let outcome = decide(&votes);
    Ok((votes, outcome))
}
