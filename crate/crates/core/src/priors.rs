//! Non-learned priors: the contrast heatmap and the high-frequency cue map.
//!
//! Both are plain per-pixel computations over [`ImageTensor`]s. The high-pass
//! kernel is also used (through a differentiable route) by the high-frequency
//! loss, so its taps live here in one place.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::image::{reflect_index, ImageTensor};

/// ITU-R BT.601 luma weights.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

pub const DEFAULT_GAMMA: f64 = 2.0;

/// Single-channel contrast prior, min-max normalized to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastHeatmap {
    pub map: ImageTensor,
    pub gamma: f64,
    /// Mean luminance the map was stretched around.
    pub mu: f64,
}

/// Which high-pass filter produced a [`HighFreqMap`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HighPassKind {
    /// 3x3 four-neighbour Laplacian.
    #[default]
    Laplacian,
    /// `image - gaussian_blur(image, sigma = 1)`, folded into one 7x7 kernel.
    GaussianResidual,
}

impl HighPassKind {
    /// Square kernel taps in row-major order, with its side length.
    ///
    /// Every variant sums to zero so constants are annihilated.
    pub fn kernel(self) -> (usize, Vec<f64>) {
        match self {
            HighPassKind::Laplacian => (
                3,
                vec![0.0, -1.0, 0.0, -1.0, 4.0, -1.0, 0.0, -1.0, 0.0],
            ),
            HighPassKind::GaussianResidual => {
                let g = gaussian_1d(1.0, 3);
                let k = g.len();
                let mut taps = vec![0.0; k * k];
                for y in 0..k {
                    for x in 0..k {
                        taps[y * k + x] = -g[y] * g[x];
                    }
                }
                taps[(k / 2) * k + k / 2] += 1.0;
                (k, taps)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HighFreqMap {
    pub map: ImageTensor,
    pub kind: HighPassKind,
}

/// Normalized 1-D Gaussian with `2 * radius + 1` taps.
pub fn gaussian_1d(sigma: f64, radius: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-(d * d) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Luma for 3-channel input, identity for 1-channel input.
pub fn luminance(image: &ImageTensor) -> Result<ImageTensor> {
    match image.channels() {
        1 => Ok(image.clone()),
        3 => {
            let (r, g, b) = (image.plane(0), image.plane(1), image.plane(2));
            let data = r
                .iter()
                .zip(g)
                .zip(b)
                .map(|((&r, &g), &b)| {
                    (LUMA_WEIGHTS[0] * r as f64 + LUMA_WEIGHTS[1] * g as f64 + LUMA_WEIGHTS[2] * b as f64)
                        as f32
                })
                .collect();
            ImageTensor::new(1, image.height(), image.width(), data)
        }
        c => Err(Error::validation(format!("luminance needs 1 or 3 channels, got {c}"))),
    }
}

/// Stretches luminance around its mean by `gamma`, then min-max normalizes.
///
/// A constant image has no contrast and maps to all zeros.
pub fn compute_contrast_heatmap(image: &ImageTensor, gamma: f64) -> Result<ContrastHeatmap> {
    ensure(gamma.is_finite() && gamma > 0.0, || format!("gamma must be > 0, got {gamma}"))?;
    image.validate()?;
    let lum = luminance(image)?;
    let n = lum.data().len() as f64;
    let mu = lum.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let raw: Vec<f64> = lum
        .data()
        .iter()
        .map(|&l| mu + gamma * (l as f64 - mu))
        .collect();
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let data = if range > 0.0 {
        raw.iter().map(|&r| ((r - lo) / range) as f32).collect()
    } else {
        vec![0.0; raw.len()]
    };
    Ok(ContrastHeatmap {
        map: ImageTensor::new(1, lum.height(), lum.width(), data)?,
        gamma,
        mu,
    })
}

/// Per-channel high-pass response with reflect padding; output shape equals input shape.
pub fn compute_highfreq_map(image: &ImageTensor, kind: HighPassKind) -> Result<HighFreqMap> {
    image.validate()?;
    Ok(HighFreqMap {
        map: convolve_reflect(image, kind),
        kind,
    })
}

/// Same-size correlation of every channel with the kind's kernel.
pub(crate) fn convolve_reflect(image: &ImageTensor, kind: HighPassKind) -> ImageTensor {
    let (k, taps) = kind.kernel();
    let r = (k / 2) as isize;
    let (c, h, w) = image.shape();
    let mut out = vec![0f32; c * h * w];
    for ch in 0..c {
        let plane = image.plane(ch);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f64;
                for dy in 0..k {
                    let sy = reflect_index(y as isize + dy as isize - r, h);
                    let row = &plane[sy * w..(sy + 1) * w];
                    for dx in 0..k {
                        let t = taps[dy * k + dx];
                        if t != 0.0 {
                            let sx = reflect_index(x as isize + dx as isize - r, w);
                            acc += t * row[sx] as f64;
                        }
                    }
                }
                out[(ch * h + y) * w + x] = acc as f32;
            }
        }
    }
    ImageTensor::new(c, h, w, out).expect("shape preserved")
}
