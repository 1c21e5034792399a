use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pixels in `[channel][row][col]` order, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != channels * height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} pixels for a {channels}x{height}x{width} image",
                pixels.len()
            )));
        }
        Ok(Image {
            channels,
            height,
            width,
            pixels,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Image {
            channels,
            height,
            width,
            pixels: vec![0.0; channels * height * width],
        }
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.pixels[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.pixels[(c * self.height + y) * self.width + x] = v;
    }

    /// Translates by `(dx, dy)` pixels, filling uncovered pixels with zero.
    pub fn shifted(&self, dx: i32, dy: i32) -> Image {
        let mut out = Image::zeros(self.channels, self.height, self.width);
        for c in 0..self.channels {
            for y in 0..self.height {
                let sy = y as i64 - dy as i64;
                if sy < 0 || sy >= self.height as i64 {
                    continue;
                }
                for x in 0..self.width {
                    let sx = x as i64 - dx as i64;
                    if sx < 0 || sx >= self.width as i64 {
                        continue;
                    }
                    out.set(c, y, x, self.get(c, sy as usize, sx as usize));
                }
            }
        }
        out
    }

    pub fn flipped_horizontally(&self) -> Image {
        let mut out = self.clone();
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.set(c, y, x, self.get(c, y, self.width - 1 - x));
                }
            }
        }
        out
    }
}

/// Binary visibility mask over an image's spatial extent; 0 = occluded.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    values: Vec<u8>,
}

impl Mask {
    pub fn visible(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            values: vec![1; height * width],
        }
    }

    pub fn from_values(height: usize, width: usize, values: Vec<u8>) -> Result<Self> {
        if values.len() != height * width || values.iter().any(|&v| v > 1) {
            return Err(Error::ShapeMismatch(
                "mask must hold height*width values of 0 or 1".into(),
            ));
        }
        Ok(Mask {
            height,
            width,
            values,
        })
    }

    #[inline]
    pub fn is_visible(&self, y: usize, x: usize) -> bool {
        self.values[y * self.width + x] == 1
    }

    pub(crate) fn set(&mut self, y: usize, x: usize, visible: bool) {
        self.values[y * self.width + x] = u8::from(visible);
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn occluded_count(&self) -> usize {
        self.values.iter().filter(|&&v| v == 0).count()
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.values.iter().map(|&v| f32::from(v)).collect()
    }
}
