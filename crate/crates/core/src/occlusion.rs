//! Occlusion geometry: window sizing, window placement under a border
//! policy, mask construction and the random occlusion used in training.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::image::{Image, Mask};

/// Width and height of a rectangle in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Extent {
    pub width: usize,
    pub height: usize,
}

impl Extent {
    pub const fn square(side: usize) -> Self {
        Extent {
            width: side,
            height: side,
        }
    }

    pub fn is_square(&self) -> bool {
        self.width == self.height
    }
}

impl fmt::Display for Extent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_square() {
            write!(f, "{}", self.width)
        } else {
            write!(f, "{}x{}", self.width, self.height)
        }
    }
}

impl FromStr for Extent {
    type Err = Error;

    /// `"5"` or `"5x3"` (width x height).
    fn from_str(s: &str) -> Result<Self> {
        let parse = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| Error::InvalidConfig(format!("bad extent {s:?}")))
        };
        match s.split_once(['x', 'X']) {
            Some((w, h)) => Ok(Extent {
                width: parse(w)?,
                height: parse(h)?,
            }),
            None => Ok(Extent::square(parse(s)?)),
        }
    }
}

// Squares serialize as a bare number, rectangles as [width, height].
impl Serialize for Extent {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.is_square() {
            s.serialize_u64(self.width as u64)
        } else {
            [self.width, self.height].serialize(s)
        }
    }
}

impl<'de> Deserialize<'de> for Extent {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Side(usize),
            Pair([usize; 2]),
        }
        Ok(match Repr::deserialize(d)? {
            Repr::Side(s) => Extent::square(s),
            Repr::Pair([width, height]) => Extent { width, height },
        })
    }
}

/// Where occlusion windows may be placed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BorderPolicy {
    /// Windows lie entirely inside the image.
    Inside,
    /// Windows may hang off the edge so every patch placement is fully
    /// covered by a 3x3 block of windows.
    #[default]
    Padded,
}

impl FromStr for BorderPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inside" => Ok(BorderPolicy::Inside),
            "padded" => Ok(BorderPolicy::Padded),
            _ => Err(Error::InvalidConfig(format!("unknown border policy {s:?}"))),
        }
    }
}

impl fmt::Display for BorderPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BorderPolicy::Inside => "inside",
            BorderPolicy::Padded => "padded",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum VoteMode {
    /// 3x3 argmax unanimity.
    Hard,
    /// Thresholded trimmed-mean confidence.
    #[default]
    Soft,
}

impl FromStr for VoteMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hard" => Ok(VoteMode::Hard),
            "soft" => Ok(VoteMode::Soft),
            _ => Err(Error::InvalidConfig(format!("unknown vote mode {s:?}"))),
        }
    }
}

impl fmt::Display for VoteMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VoteMode::Hard => "hard",
            VoteMode::Soft => "soft",
        })
    }
}

/// Side of the occlusion window needed to fully cover a `patch`-pixel
/// sticker from a 3x3 block of windows at stride `stride`.
pub fn occlusion_size(patch: usize, stride: usize) -> usize {
    if stride <= 1 {
        patch + 2
    } else {
        patch + 3 * stride
    }
}

/// All defense hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DefenseConfig {
    pub patch: Extent,
    pub occlusion: Extent,
    pub stride: usize,
    pub tau: f64,
    pub border: BorderPolicy,
    pub vote: VoteMode,
}

impl Default for DefenseConfig {
    /// 5-pixel patches at stride 1.
    fn default() -> Self {
        DefenseConfig::new(Extent::square(5), 1)
    }
}

impl DefenseConfig {
    /// Derives the occlusion extent from the patch extent and stride.
    pub fn new(patch: Extent, stride: usize) -> Self {
        DefenseConfig {
            patch,
            occlusion: Extent {
                width: occlusion_size(patch.width, stride),
                height: occlusion_size(patch.height, stride),
            },
            stride,
            tau: 0.9,
            border: BorderPolicy::default(),
            vote: VoteMode::default(),
        }
    }

    pub fn with_border(mut self, border: BorderPolicy) -> Self {
        self.border = border;
        self
    }

    pub fn with_vote(mut self, vote: VoteMode, tau: f64) -> Self {
        self.vote = vote;
        self.tau = tau;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.patch.width == 0 || self.patch.height == 0 {
            return bad("patch extent must be positive".into());
        }
        if self.stride == 0 {
            return bad("stride must be positive".into());
        }
        let expect = Extent {
            width: occlusion_size(self.patch.width, self.stride),
            height: occlusion_size(self.patch.height, self.stride),
        };
        if self.occlusion != expect {
            return bad(format!(
                "occlusion {} does not match patch {} at stride {} (expected {})",
                self.occlusion, self.patch, self.stride, expect
            ));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad(format!("tau {} outside (0, 1]", self.tau));
        }
        Ok(())
    }
}

/// Top-left corner of a rectangle; may be negative for padded windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Position {
    pub x: i64,
    pub y: i64,
}

impl Position {
    pub const fn new(x: i64, y: i64) -> Self {
        Position { x, y }
    }
}

impl fmt::Display for Position {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

/// Window offsets along one axis.
fn axis_offsets(image: usize, patch: usize, occl: usize, stride: usize, border: BorderPolicy) -> Vec<i64> {
    let (start, end) = match border {
        BorderPolicy::Inside => (0, image as i64 - occl as i64),
        BorderPolicy::Padded => (patch as i64 - occl as i64, image as i64 - patch as i64),
    };
    (0..)
        .map(|k| start + k * stride as i64)
        .take_while(|&a| a <= end)
        .collect()
}

/// Placement of the occlusion windows over one image size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridGeometry {
    pub image_width: usize,
    pub image_height: usize,
    pub patch: Extent,
    pub occlusion: Extent,
    pub stride: usize,
    pub border: BorderPolicy,
    /// Column offsets of the windows, ascending.
    pub xs: Vec<i64>,
    /// Row offsets of the windows, ascending.
    pub ys: Vec<i64>,
}

impl GridGeometry {
    pub fn new(image_width: usize, image_height: usize, config: &DefenseConfig) -> Result<Self> {
        config.validate()?;
        let q = config.occlusion;
        if q.width > image_width || q.height > image_height {
            return Err(Error::InvalidConfig(format!(
                "occlusion {q} exceeds image {image_width}x{image_height}"
            )));
        }
        let xs = axis_offsets(image_width, config.patch.width, q.width, config.stride, config.border);
        let ys = axis_offsets(image_height, config.patch.height, q.height, config.stride, config.border);
        Ok(GridGeometry {
            image_width,
            image_height,
            patch: config.patch,
            occlusion: q,
            stride: config.stride,
            border: config.border,
            xs,
            ys,
        })
    }

    pub fn rows(&self) -> usize {
        self.ys.len()
    }

    pub fn cols(&self) -> usize {
        self.xs.len()
    }

    pub fn position(&self, row: usize, col: usize) -> Position {
        Position::new(self.xs[col], self.ys[row])
    }

    /// Window positions in row-major grid order.
    pub fn positions(&self) -> Vec<Position> {
        self.ys
            .iter()
            .flat_map(|&y| self.xs.iter().map(move |&x| Position::new(x, y)))
            .collect()
    }

    /// Every top-left placement of a patch fully inside the image.
    pub fn patch_positions(&self) -> Vec<Position> {
        let max_x = self.image_width.saturating_sub(self.patch.width) as i64;
        let max_y = self.image_height.saturating_sub(self.patch.height) as i64;
        (0..=max_y)
            .flat_map(|y| (0..=max_x).map(move |x| Position::new(x, y)))
            .collect()
    }

    fn containing(offsets: &[i64], patch_at: i64, patch: usize, occl: usize) -> Range<usize> {
        // a <= r and a + q >= r + p, offsets ascending
        let lo = offsets.partition_point(|&a| a + (occl as i64) < patch_at + patch as i64);
        let hi = offsets.partition_point(|&a| a <= patch_at);
        lo..hi.max(lo)
    }

    /// Grid columns whose windows fully cover a patch at column `x`.
    pub fn containing_cols(&self, x: i64) -> Range<usize> {
        Self::containing(&self.xs, x, self.patch.width, self.occlusion.width)
    }

    /// Grid rows whose windows fully cover a patch at row `y`.
    pub fn containing_rows(&self, y: i64) -> Range<usize> {
        Self::containing(&self.ys, y, self.patch.height, self.occlusion.height)
    }

    /// Whether the window at grid cell `(row, col)` fully covers a patch at `patch_at`.
    pub fn covers(&self, row: usize, col: usize, patch_at: Position) -> bool {
        self.containing_rows(patch_at.y).contains(&row) && self.containing_cols(patch_at.x).contains(&col)
    }

    pub fn mask_at(&self, pos: Position) -> Mask {
        make_mask(pos, self.occlusion, self.image_width, self.image_height)
    }

    pub fn random_position<R: Rng + ?Sized>(&self, rng: &mut R) -> Position {
        let col = rng.gen_range(0..self.cols());
        let row = rng.gen_range(0..self.rows());
        self.position(row, col)
    }
}

/// Window top-left corners for an image of `width x height`.
pub fn occlusion_positions(width: usize, height: usize, config: &DefenseConfig) -> Result<Vec<Position>> {
    Ok(GridGeometry::new(width, height, config)?.positions())
}

/// Mask hiding the `occlusion` rectangle at `pos`, clipped to the image.
pub fn make_mask(pos: Position, occlusion: Extent, width: usize, height: usize) -> Mask {
    let mut mask = Mask::visible(height, width);
    let clip = |start: i64, len: usize, limit: usize| {
        let lo = start.max(0) as usize;
        let hi = (start + len as i64).clamp(0, limit as i64) as usize;
        lo.min(hi)..hi
    };
    for y in clip(pos.y, occlusion.height, height) {
        for x in clip(pos.x, occlusion.width, width) {
            mask.set(y, x, false);
        }
    }
    mask
}

/// Elementwise product of every channel with the mask.
pub fn apply_mask(image: &Image, mask: &Mask) -> Result<Image> {
    if image.height != mask.height || image.width != mask.width {
        return Err(Error::ShapeMismatch(format!(
            "image {}x{} vs mask {}x{}",
            image.height, image.width, mask.height, mask.width
        )));
    }
    let plane = mask.values();
    let mut out = image.clone();
    for chan in out.pixels.chunks_mut(plane.len()) {
        for (p, &m) in chan.iter_mut().zip(plane) {
            if m == 0 {
                *p = 0.0;
            }
        }
    }
    Ok(out)
}

/// Occludes the image at a uniformly drawn window position.
pub fn random_occlusion<R: Rng + ?Sized>(
    image: &Image,
    config: &DefenseConfig,
    rng: &mut R,
) -> Result<(Image, Mask)> {
    let geometry = GridGeometry::new(image.width, image.height, config)?;
    let mask = geometry.mask_at(geometry.random_position(rng));
    let occluded = apply_mask(image, &mask)?;
    Ok((occluded, mask))
}
