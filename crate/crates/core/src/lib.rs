//! Retrieval-augmented GRPO fine-tuning of a toy vision-language policy for
//! synthetic real-vs-fake image detection.
//!
//! The crate is organised bottom-up: [`numerics`] supplies tensors and
//! reverse-mode gradients, [`retrieval`] the exact embedding index,
//! [`format`] the output grammar and rewards, [`policy`] the toy encoder and
//! token head, [`saliency`] attention rollout maps, [`grpo`] the training
//! engine and [`harness`] the dataset, configuration and experiment drivers.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub mod format;
pub mod grpo;
pub mod harness;
pub mod numerics;
pub mod policy;
pub mod retrieval;
pub mod saliency;

/// Binary ground truth and verdict.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Real => "REAL",
            Label::Fake => "FAKE",
        }
    }

    /// On-disk byte encoding: 0 for REAL, 1 for FAKE.
    pub fn to_byte(self) -> u8 {
        match self {
            Label::Real => 0,
            Label::Fake => 1,
        }
    }

    pub fn from_byte(b: u8) -> Option<Label> {
        match b {
            0 => Some(Label::Real),
            1 => Some(Label::Fake),
            _ => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "REAL" => Ok(Label::Real),
            "FAKE" => Ok(Label::Fake),
            other => Err(format!("unknown label {other:?}")),
        }
    }
}

/// Axis-aligned pixel rectangle `[x0, x0 + width) × [y0, y0 + height)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
}

impl BoundingBox {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x0 + self.width && y >= self.y0 && y < self.y0 + self.height
    }

    pub fn area(&self) -> usize {
        self.width * self.height
    }
}

/// Single-channel image with intensities in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    /// Fails when the buffer size is wrong or any pixel leaves `[0, 1]`.
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self, String> {
        if pixels.len() != width * height {
            return Err(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            ));
        }
        if let Some(i) = pixels.iter().position(|p| !(0.0..=1.0).contains(p)) {
            return Err(format!("pixel {i} = {} outside [0, 1]", pixels[i]));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }
}
