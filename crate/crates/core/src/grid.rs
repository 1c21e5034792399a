//! Prediction grids: the inner classifier's confidences at every occlusion
//! window position, and their JSON interchange format.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{BatchInput, InputShape, ModelParams};
use crate::occlusion::{apply_mask, BorderPolicy, DefenseConfig, Extent, GridGeometry, Position};

/// Grid cells evaluated per classifier call.
const CELL_BATCH: usize = 64;

/// Anything that maps masked images to class probabilities.
pub trait Classifier: Sync {
    fn input_shape(&self) -> InputShape;
    fn classes(&self) -> usize;
    /// Probabilities `[sample][class]` for `batch` images (per-sample
    /// `[channel][row][col]`) and their `[row][col]` masks.
    fn predict(&self, pixels: &[f32], masks: &[f32], batch: usize) -> Result<Vec<f32>>;
}

impl Classifier for ModelParams<f32> {
    fn input_shape(&self) -> InputShape {
        self.input
    }

    fn classes(&self) -> usize {
        ModelParams::classes(self)
    }

    fn predict(&self, pixels: &[f32], masks: &[f32], batch: usize) -> Result<Vec<f32>> {
        self.predict_batch(BatchInput { pixels, masks, batch })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionGrid {
    pub image_id: String,
    pub true_label: Option<usize>,
    pub config: DefenseConfig,
    pub geometry: GridGeometry,
    pub classes: usize,
    /// Row-major `[row][col][class]`.
    pub scores: Vec<f32>,
}

impl PredictionGrid {
    /// Wraps precomputed scores, checking their count and that every cell is
    /// a probability vector (within `1e-3`).
    pub fn from_scores(
        config: DefenseConfig,
        geometry: GridGeometry,
        classes: usize,
        scores: Vec<f32>,
    ) -> Result<Self> {
        let cells = geometry.rows() * geometry.cols();
        if classes == 0 || scores.len() != cells * classes {
            return Err(Error::ShapeMismatch(format!(
                "{} scores for a {}x{} grid of {classes} classes",
                scores.len(),
                geometry.rows(),
                geometry.cols()
            )));
        }
        for (i, cell) in scores.chunks(classes).enumerate() {
            let sum: f64 = cell.iter().map(|&v| f64::from(v)).sum();
            if cell.iter().any(|v| !v.is_finite() || *v < 0.0) || (sum - 1.0).abs() > 1e-3 {
                return Err(Error::ShapeMismatch(format!(
                    "cell {i} is not a probability vector (sum {sum})"
                )));
            }
        }
        Ok(PredictionGrid {
            image_id: String::new(),
            true_label: None,
            config,
            geometry,
            classes,
            scores,
        })
    }

    pub fn rows(&self) -> usize {
        self.geometry.rows()
    }

    pub fn cols(&self) -> usize {
        self.geometry.cols()
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f32] {
        let i = (row * self.cols() + col) * self.classes;
        &self.scores[i..i + self.classes]
    }

    /// Most confident class of a cell, lowest index on ties.
    pub fn argmax(&self, row: usize, col: usize) -> usize {
        crate::argmax(self.cell(row, col))
    }

    pub fn position(&self, row: usize, col: usize) -> Position {
        self.geometry.position(row, col)
    }

    pub fn to_json(&self) -> Result<String> {
        let scores = (0..self.rows())
            .map(|r| (0..self.cols()).map(|c| self.cell(r, c).to_vec()).collect())
            .collect();
        Ok(serde_json::to_string(&GridFile {
            image_id: self.image_id.clone(),
            true_label: self.true_label,
            patch: self.config.patch,
            occlusion: self.config.occlusion,
            stride: self.config.stride,
            border_policy: self.config.border,
            classes: self.classes,
            image_width: Some(self.geometry.image_width),
            image_height: Some(self.geometry.image_height),
            scores,
        })?)
    }

    /// Parses a grid file. Voting settings are not part of the file and take
    /// their defaults; override them on `config` afterwards.
    pub fn from_json(text: &str) -> Result<Self> {
        let f: GridFile = serde_json::from_str(text)?;
        let mut config = DefenseConfig::new(f.patch, f.stride).with_border(f.border_policy);
        config.occlusion = f.occlusion;
        config.validate()?;
        let rows = f.scores.len();
        let cols = f.scores.first().map_or(0, Vec::len);
        if rows == 0 || cols == 0 || f.scores.iter().any(|r| r.len() != cols) {
            return Err(Error::ShapeMismatch("scores must be a non-empty rectangular array".into()));
        }
        let width = f
            .image_width
            .unwrap_or_else(|| min_image_side(cols, f.patch.width, f.occlusion.width, f.stride, f.border_policy));
        let height = f
            .image_height
            .unwrap_or_else(|| min_image_side(rows, f.patch.height, f.occlusion.height, f.stride, f.border_policy));
        let geometry = GridGeometry::new(width, height, &config)?;
        if (geometry.rows(), geometry.cols()) != (rows, cols) {
            return Err(Error::ShapeMismatch(format!(
                "{rows}x{cols} scores, but a {width}x{height} image gives a {}x{} grid",
                geometry.rows(),
                geometry.cols()
            )));
        }
        let mut scores = Vec::with_capacity(rows * cols * f.classes);
        for cell in f.scores.iter().flatten() {
            if cell.len() != f.classes {
                return Err(Error::ShapeMismatch(format!(
                    "cell has {} scores, expected {}",
                    cell.len(),
                    f.classes
                )));
            }
            scores.extend_from_slice(cell);
        }
        let mut grid = PredictionGrid::from_scores(config, geometry, f.classes, scores)?;
        grid.image_id = f.image_id;
        grid.true_label = f.true_label;
        Ok(grid)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

#[derive(Serialize, Deserialize)]
struct GridFile {
    #[serde(default)]
    image_id: String,
    #[serde(default)]
    true_label: Option<usize>,
    patch: Extent,
    occlusion: Extent,
    stride: usize,
    border_policy: BorderPolicy,
    classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_width: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_height: Option<usize>,
    scores: Vec<Vec<Vec<f32>>>,
}

/// Smallest image side producing `cells` window offsets along an axis.
fn min_image_side(cells: usize, patch: usize, occl: usize, stride: usize, border: BorderPolicy) -> usize {
    let span = (cells - 1) * stride;
    match border {
        BorderPolicy::Inside => span + occl,
        BorderPolicy::Padded => (span + 2 * patch).saturating_sub(occl).max(occl),
    }
}

fn check_image(classifier: &impl Classifier, image: &Image) -> Result<()> {
    let s = classifier.input_shape();
    if (image.channels, image.height, image.width) != (s.channels, s.height, s.width) {
        return Err(Error::ShapeMismatch(format!(
            "image is {}x{}x{}, classifier expects {}x{}x{}",
            image.channels, image.height, image.width, s.channels, s.height, s.width
        )));
    }
    Ok(())
}

/// Occluded pixels and masks for a run of window positions.
fn occluded_batch(image: &Image, geometry: &GridGeometry, positions: &[Position]) -> Result<(Vec<f32>, Vec<f32>)> {
    let mut pixels = Vec::with_capacity(positions.len() * image.pixels.len());
    let mut masks = Vec::with_capacity(positions.len() * image.height * image.width);
    for &p in positions {
        let mask = geometry.mask_at(p);
        pixels.extend(apply_mask(image, &mask)?.pixels);
        masks.extend(mask.to_f32());
    }
    Ok((pixels, masks))
}

fn evaluate_cells(classifier: &impl Classifier, image: &Image, geometry: &GridGeometry, positions: &[Position]) -> Result<Vec<f32>> {
    let (pixels, masks) = occluded_batch(image, geometry, positions)?;
    classifier.predict(&pixels, &masks, positions.len())
}

fn build(classifier: &impl Classifier, image: &Image, config: &DefenseConfig, parallel: bool) -> Result<PredictionGrid> {
    check_image(classifier, image)?;
    let geometry = GridGeometry::new(image.width, image.height, config)?;
    let positions = geometry.positions();
    let chunks: Vec<Vec<f32>> = if parallel {
        positions
            .par_chunks(CELL_BATCH)
            .map(|c| evaluate_cells(classifier, image, &geometry, c))
            .collect::<Result<_>>()?
    } else {
        positions
            .chunks(CELL_BATCH)
            .map(|c| evaluate_cells(classifier, image, &geometry, c))
            .collect::<Result<_>>()?
    };
    PredictionGrid::from_scores(*config, geometry, classifier.classes(), chunks.concat())
}

/// Evaluates the classifier on the image occluded at every window position.
pub fn prediction_grid(classifier: &impl Classifier, image: &Image, config: &DefenseConfig) -> Result<PredictionGrid> {
    build(classifier, image, config, true)
}

/// Single-threaded [`prediction_grid`]; the result is bit-identical.
pub fn prediction_grid_serial(
    classifier: &impl Classifier,
    image: &Image,
    config: &DefenseConfig,
) -> Result<PredictionGrid> {
    build(classifier, image, config, false)
}

/// Confidences for a single window position, evaluated on its own.
pub fn prediction_cell(classifier: &impl Classifier, image: &Image, config: &DefenseConfig, position: Position) -> Result<Vec<f32>> {
    check_image(classifier, image)?;
    let geometry = GridGeometry::new(image.width, image.height, config)?;
    evaluate_cells(classifier, image, &geometry, &[position])
}
