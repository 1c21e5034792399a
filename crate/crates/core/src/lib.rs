//! Occlusion-voting defense against adversarial patch attacks.
//!
//! An inner classifier is evaluated on many occluded copies of an image
//! (the prediction grid). Every 3x3 block of grid cells votes for a class or
//! abstains; the image is accepted only if the votes agree. Because a large
//! enough occlusion window hides any patch of the configured size from a
//! whole 3x3 block, some votes are always beyond the attacker's reach, which
//! makes per-image certification possible.

pub mod attack;
pub mod certify;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod grid;
pub mod image;
pub mod nn;
pub mod occlusion;
pub mod render;
pub mod vote;

pub use error::{Error, Result};
pub use image::{Image, Mask};

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
