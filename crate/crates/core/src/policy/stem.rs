//! Fixed patch featurizer in front of the trainable encoder.
//!
//! Every patch is split into 2×2 sub-blocks, and each sub-block contributes
//! the mean of four maps: centred intensity, absolute horizontal and
//! vertical differences, and the absolute 5-point Laplacian. The stem has no
//! weights.

use super::PolicyError;
use crate::numerics::Tensor;
use crate::GrayImage;

pub const STEM_CHANNELS: usize = 4;
pub const STEM_FEATURES: usize = STEM_CHANNELS * 4;

/// `T × 16` matrix of patch features, patches in row-major grid order.
pub fn patch_features(image: &GrayImage, patch: usize, edge_gain: f64) -> Result<Tensor, PolicyError> {
    let (w, h) = (image.width(), image.height());
    if patch < 2 || !patch.is_multiple_of(2) || w % patch != 0 || h % patch != 0 {
        return Err(PolicyError::Shape(format!(
            "{w}x{h} image is not tiled by even {patch}x{patch} patches"
        )));
    }
    let px = |x: usize, y: usize| image.at(x, y);
    let mut maps = vec![vec![0.0; w * h]; STEM_CHANNELS];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            maps[0][i] = px(x, y) - 0.5;
            if x + 1 < w {
                maps[1][i] = edge_gain * (px(x + 1, y) - px(x, y)).abs();
            }
            if y + 1 < h {
                maps[2][i] = edge_gain * (px(x, y + 1) - px(x, y)).abs();
            }
            if x > 0 && y > 0 && x + 1 < w && y + 1 < h {
                let lap = 4.0 * px(x, y) - px(x - 1, y) - px(x + 1, y) - px(x, y - 1) - px(x, y + 1);
                maps[3][i] = 0.5 * edge_gain * lap.abs();
            }
        }
    }
    let half = patch / 2;
    let (gw, gh) = (w / patch, h / patch);
    let mut data = Vec::with_capacity(gw * gh * STEM_FEATURES);
    for py in 0..gh {
        for pxi in 0..gw {
            for map in &maps {
                for sy in 0..2 {
                    for sx in 0..2 {
                        let (x0, y0) = (pxi * patch + sx * half, py * patch + sy * half);
                        let mut s = 0.0;
                        for y in y0..y0 + half {
                            s += map[y * w + x0..y * w + x0 + half].iter().sum::<f64>();
                        }
                        data.push(s / (half * half) as f64);
                    }
                }
            }
        }
    }
    Ok(Tensor::matrix(gw * gh, STEM_FEATURES, data)?)
}
