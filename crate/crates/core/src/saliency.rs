//! Attention rollout saliency.
//!
//! The cumulative attention is the plain left-to-right product of the
//! per-layer attention matrices. Its [CLS] row, minus the self entry, scores
//! each patch; scores are bilinearly upsampled to pixels, min-max
//! normalized and rendered over the grayscale input with a jet colormap.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::numerics::Tensor;
use crate::BoundingBox;

#[derive(Debug, Error)]
pub enum SaliencyError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid attention stack: {0}")]
    Stack(String),
    #[error("ppm format error: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Per-layer row-stochastic attention matrices, index 0 being [CLS].
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionStack {
    layers: Vec<Tensor>,
}

impl AttentionStack {
    pub fn new(layers: Vec<Tensor>) -> Result<Self, SaliencyError> {
        let Some(first) = layers.first() else {
            return Err(SaliencyError::Stack("empty stack".into()));
        };
        let n = first.rows();
        for (l, a) in layers.iter().enumerate() {
            if a.dims2() != (n, n) {
                return Err(SaliencyError::Stack(format!(
                    "layer {l} is {:?}, expected {n}x{n}",
                    a.dims2()
                )));
            }
            for r in 0..n {
                let row = a.row_slice(r);
                let total: f64 = row.iter().sum();
                if row.iter().any(|&v| v < 0.0 || !v.is_finite()) || (total - 1.0).abs() > 1e-9 {
                    return Err(SaliencyError::Stack(format!(
                        "layer {l} row {r} is not a probability vector"
                    )));
                }
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Tensor] {
        &self.layers
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Token count including [CLS].
    pub fn tokens(&self) -> usize {
        self.layers[0].rows()
    }
}

/// `A1 · A2 ⋯ AL`. With `residual`, each factor becomes `0.5·(A + I)`.
pub fn rollout(stack: &AttentionStack, residual: bool) -> Tensor {
    let n = stack.tokens();
    let eye = Tensor::identity(n);
    let prep = |a: &Tensor| {
        if residual {
            a.zip_with(&eye, |x, e| 0.5 * (x + e)).expect("square")
        } else {
            a.clone()
        }
    };
    let mut acc = prep(&stack.layers[0]);
    for a in &stack.layers[1..] {
        acc = acc.matmul(&prep(a)).expect("square");
    }
    acc
}

/// Row 0 of the rollout, columns `1..`.
pub fn cls_to_patch(rolled: &Tensor) -> Vec<f64> {
    rolled.row_slice(0)[1..].to_vec()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    pub width: usize,
    pub height: usize,
    /// Row-major, in `[0, 1]`.
    pub scores: Vec<f64>,
    pub patch_scores: Vec<f64>,
}

impl SaliencyMap {
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.scores[y * self.width + x]
    }

    /// Fraction of the top-decile saliency mass that falls inside `bbox`.
    ///
    /// The decile threshold is the 90th percentile with linear
    /// interpolation between order statistics.
    pub fn top_decile_mass_in(&self, bbox: &BoundingBox) -> f64 {
        let mut sorted = self.scores.clone();
        sorted.sort_by(f64::total_cmp);
        let pos = 0.9 * (sorted.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(sorted.len() - 1);
        let threshold = sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64);
        let (mut inside, mut total) = (0.0, 0.0);
        for y in 0..self.height {
            for x in 0..self.width {
                let s = self.at(x, y);
                if s >= threshold {
                    total += s;
                    if bbox.contains(x, y) {
                        inside += s;
                    }
                }
            }
        }
        if total > 0.0 {
            inside / total
        } else {
            0.0
        }
    }
}

/// Places patch scores at patch centres of a `grid × grid` layout and
/// interpolates bilinearly to `height × width`, clamping at the borders.
pub fn upsample_bilinear(
    patch_scores: &[f64],
    grid: usize,
    height: usize,
    width: usize,
) -> Result<SaliencyMap, SaliencyError> {
    if grid == 0 || patch_scores.len() != grid * grid {
        return Err(SaliencyError::Shape(format!(
            "{} scores do not fill a {grid}x{grid} grid",
            patch_scores.len()
        )));
    }
    if height < grid || width < grid {
        return Err(SaliencyError::Shape(format!(
            "target {height}x{width} smaller than grid {grid}"
        )));
    }
    let axis = |i: usize, n: usize| {
        let g = ((i as f64 + 0.5) * grid as f64 / n as f64 - 0.5).clamp(0.0, (grid - 1) as f64);
        let lo = g.floor() as usize;
        (lo, (lo + 1).min(grid - 1), g - lo as f64)
    };
    let mut scores = Vec::with_capacity(height * width);
    for y in 0..height {
        let (y0, y1, fy) = axis(y, height);
        for x in 0..width {
            let (x0, x1, fx) = axis(x, width);
            let p = |r: usize, c: usize| patch_scores[r * grid + c];
            let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
            let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
            scores.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    normalize_min_max(&mut scores);
    Ok(SaliencyMap {
        width,
        height,
        scores,
        patch_scores: patch_scores.to_vec(),
    })
}

fn normalize_min_max(v: &mut [f64]) {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if span > 0.0 {
        v.iter_mut().for_each(|s| *s = (*s - lo) / span);
    } else {
        v.iter_mut().for_each(|s| *s = 0.5);
    }
}

/// Full pipeline: rollout, [CLS] row, upsampling.
pub fn saliency_map(
    stack: &AttentionStack,
    grid: usize,
    height: usize,
    width: usize,
    residual: bool,
) -> Result<SaliencyMap, SaliencyError> {
    if stack.tokens() != grid * grid + 1 {
        return Err(SaliencyError::Shape(format!(
            "{} tokens for a {grid}x{grid} grid",
            stack.tokens()
        )));
    }
    upsample_bilinear(&cls_to_patch(&rollout(stack, residual)), grid, height, width)
}

/// Jet control points as `(position, rgb)`, interpolated linearly.
pub const JET_CONTROL: [(f64, [f64; 3]); 7] = [
    (0.0, [0.0, 0.0, 131.0]),
    (0.125, [0.0, 0.0, 255.0]),
    (0.25, [0.0, 255.0, 255.0]),
    (0.5, [0.0, 255.0, 0.0]),
    (0.75, [255.0, 255.0, 0.0]),
    (0.875, [255.0, 0.0, 0.0]),
    (1.0, [131.0, 0.0, 0.0]),
];

pub fn jet(score: f64) -> [f64; 3] {
    let s = if score.is_nan() { 0.0 } else { score.clamp(0.0, 1.0) };
    for w in JET_CONTROL.windows(2) {
        let ((p0, c0), (p1, c1)) = (w[0], w[1]);
        if s <= p1 {
            let t = (s - p0) / (p1 - p0);
            return [0, 1, 2].map(|i| c0[i] + (c1[i] - c0[i]) * t);
        }
    }
    JET_CONTROL[JET_CONTROL.len() - 1].1
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB triples.
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    /// Reads the exact header layout written by [`to_ppm`](Self::to_ppm).
    pub fn from_ppm(bytes: &[u8]) -> Result<Self, SaliencyError> {
        let bad = |m: &str| SaliencyError::Format(m.to_string());
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            let end = bytes[pos..]
                .iter()
                .position(|b| b.is_ascii_whitespace())
                .map(|e| pos + e)
                .ok_or_else(|| bad("truncated header"))?;
            fields.push(std::str::from_utf8(&bytes[pos..end]).map_err(|_| bad("non-ascii header"))?);
            pos = end + 1;
        }
        if fields[0] != "P6" || fields[3] != "255" {
            return Err(bad("expected P6 with maxval 255"));
        }
        let width: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
        let height: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
        let pixels = bytes[pos..].to_vec();
        if pixels.len() != 3 * width * height {
            return Err(bad("pixel payload has wrong length"));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn write_ppm(&self, path: impl AsRef<Path>) -> Result<(), SaliencyError> {
        fs::write(path, self.to_ppm())?;
        Ok(())
    }

    pub fn read_ppm(path: impl AsRef<Path>) -> Result<Self, SaliencyError> {
        Self::from_ppm(&fs::read(path)?)
    }
}

/// `alpha·jet(score) + (1 − alpha)·gray` per pixel, gray in `[0, 1]`.
pub fn jet_overlay(
    gray: &[f64],
    map: &SaliencyMap,
    alpha: f64,
) -> Result<RgbImage, SaliencyError> {
    if gray.len() != map.width * map.height {
        return Err(SaliencyError::Shape(format!(
            "image has {} pixels, map is {}x{}",
            gray.len(),
            map.height,
            map.width
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(SaliencyError::Shape(format!("alpha {alpha} outside [0, 1]")));
    }
    let mut pixels = Vec::with_capacity(3 * gray.len());
    for (&g, &s) in gray.iter().zip(&map.scores) {
        let base = 255.0 * g.clamp(0.0, 1.0);
        for c in jet(s) {
            pixels.push((alpha * c + (1.0 - alpha) * base).round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(RgbImage {
        width: map.width,
        height: map.height,
        pixels,
    })
}
