//! Parameterised image perturbations and the mean-confidence sweep over a
//! grid of magnitudes.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Image;

/// Intensity used for pixels rotated in from outside the frame.
pub const ROTATION_FILL: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationKind {
    /// Magnitude is the Gaussian standard deviation in pixels.
    GaussianBlur,
    /// Magnitude is a multiplicative factor `<= 1`.
    Brightness,
    /// Magnitude is the noise standard deviation in intensity units.
    GaussianNoise,
    /// Magnitude is an angle in degrees.
    Rotation,
}

impl PerturbationKind {
    pub const ALL: [PerturbationKind; 4] = [
        PerturbationKind::GaussianBlur,
        PerturbationKind::Brightness,
        PerturbationKind::GaussianNoise,
        PerturbationKind::Rotation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PerturbationKind::GaussianBlur => "gaussian_blur",
            PerturbationKind::Brightness => "brightness",
            PerturbationKind::GaussianNoise => "gaussian_noise",
            PerturbationKind::Rotation => "rotation",
        }
    }

    /// Magnitude leaving images unchanged.
    pub fn identity(self) -> f64 {
        match self {
            PerturbationKind::Brightness => 1.0,
            _ => 0.0,
        }
    }

    /// Accepted magnitude range, inclusive.
    pub fn range(self) -> (f64, f64) {
        match self {
            PerturbationKind::GaussianBlur => (0.0, 16.0),
            PerturbationKind::Brightness => (0.0, 1.0),
            PerturbationKind::GaussianNoise => (0.0, 1.0),
            PerturbationKind::Rotation => (-360.0, 360.0),
        }
    }

    /// Monotone measure of how strong a magnitude is.
    pub fn strength(self, magnitude: f64) -> f64 {
        match self {
            PerturbationKind::Brightness => 1.0 - magnitude,
            PerturbationKind::Rotation => magnitude.abs(),
            _ => magnitude,
        }
    }

    pub fn default_grid(self) -> MagnitudeGrid {
        let values = match self {
            PerturbationKind::GaussianBlur => vec![0.0, 0.5, 1.0, 2.0, 4.0, 8.0],
            PerturbationKind::Brightness => vec![1.0, 0.8, 0.6, 0.4, 0.2, 0.1],
            PerturbationKind::GaussianNoise => vec![0.0, 0.05, 0.1, 0.2, 0.3, 0.4],
            PerturbationKind::Rotation => vec![0.0, 15.0, 30.0, 60.0, 90.0, 135.0, 180.0],
        };
        MagnitudeGrid::new(self, values).expect("default grids are valid")
    }

    fn check(self, magnitude: f64) -> Result<()> {
        let (min, max) = self.range();
        if !(magnitude >= min && magnitude <= max) {
            return Err(Error::Magnitude {
                kind: self.as_str(),
                magnitude,
                min,
                max,
            });
        }
        Ok(())
    }
}

impl fmt::Display for PerturbationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PerturbationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown perturbation {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub kind: PerturbationKind,
    pub magnitude: f64,
    /// Only used by noise.
    pub seed: u64,
}

impl Perturbation {
    pub fn new(kind: PerturbationKind, magnitude: f64, seed: u64) -> Result<Self> {
        kind.check(magnitude)?;
        Ok(Self {
            kind,
            magnitude,
            seed,
        })
    }

    pub fn apply(&self, x: &Image) -> Result<Image> {
        self.kind.check(self.magnitude)?;
        if self.magnitude == self.kind.identity() {
            return Ok(x.clone());
        }
        let data = match self.kind {
            PerturbationKind::GaussianBlur => gaussian_blur(x, self.magnitude),
            PerturbationKind::Brightness => x.data().iter().map(|v| v * self.magnitude).collect(),
            PerturbationKind::GaussianNoise => add_noise(x, self.magnitude, self.seed),
            PerturbationKind::Rotation => rotate(x, self.magnitude),
        };
        Image::from_clamped(x.height(), x.width(), x.channels(), data)
    }
}

/// Symmetric reflection of an out-of-range index into `[0, len)`, edge repeated.
fn reflect(i: isize, len: usize) -> usize {
    let n = len as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

fn gaussian_weights(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let w: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|v| v / z).collect()
}

/// One separable pass. Written as `centre + Σ w·(neighbour − centre)` so that a
/// constant signal is reproduced exactly.
fn blur_axis(
    data: &[f64],
    h: usize,
    w: usize,
    c: usize,
    weights: &[f64],
    vertical: bool,
) -> Vec<f64> {
    let radius = (weights.len() / 2) as isize;
    let mut out = vec![0.0; data.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let centre = data[(y * w + x) * c + ch];
                let mut acc = 0.0;
                for (k, &wt) in weights.iter().enumerate() {
                    let off = k as isize - radius;
                    let (sy, sx) = if vertical {
                        (reflect(y as isize + off, h), x)
                    } else {
                        (y, reflect(x as isize + off, w))
                    };
                    acc += wt * (data[(sy * w + sx) * c + ch] - centre);
                }
                out[(y * w + x) * c + ch] = centre + acc;
            }
        }
    }
    out
}

fn gaussian_blur(x: &Image, sigma: f64) -> Vec<f64> {
    let weights = gaussian_weights(sigma);
    let (h, w, c) = (x.height(), x.width(), x.channels());
    let tmp = blur_axis(x.data(), h, w, c, &weights, false);
    blur_axis(&tmp, h, w, c, &weights, true)
}

fn add_noise(x: &Image, std: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, std).expect("finite std");
    x.data()
        .iter()
        .map(|v| v + normal.sample(&mut rng))
        .collect()
}

fn rotate(x: &Image, degrees: f64) -> Vec<f64> {
    let (h, w, c) = (x.height(), x.width(), x.channels());
    let theta = degrees.to_radians();
    let (s, co) = theta.sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (ymax, xmax) = (h as f64 - 1.0, w as f64 - 1.0);
    const SLACK: f64 = 1e-9;
    let mut out = vec![ROTATION_FILL; x.data().len()];
    for y in 0..h {
        for xx in 0..w {
            let (dy, dx) = (y as f64 - cy, xx as f64 - cx);
            // inverse rotation of the destination pixel
            let sx = co * dx + s * dy + cx;
            let sy = -s * dx + co * dy + cy;
            if sx < -SLACK || sy < -SLACK || sx > xmax + SLACK || sy > ymax + SLACK {
                continue;
            }
            let (sx, sy) = (sx.clamp(0.0, xmax), sy.clamp(0.0, ymax));
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
            for ch in 0..c {
                let v00 = x.get(y0, x0, ch);
                let v01 = x.get(y0, x1, ch);
                let v10 = x.get(y1, x0, ch);
                let v11 = x.get(y1, x1, ch);
                let top = v00 + fx * (v01 - v00);
                let bottom = v10 + fx * (v11 - v10);
                out[(y * w + xx) * c + ch] = top + fy * (bottom - top);
            }
        }
    }
    out
}

/// Ordered magnitudes `λ_0 … λ_n`, starting at the identity, strictly
/// increasing in strength.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MagnitudeGrid {
    kind: PerturbationKind,
    values: Vec<f64>,
}

impl MagnitudeGrid {
    pub fn new(kind: PerturbationKind, values: Vec<f64>) -> Result<Self> {
        if values.len() < 3 {
            return Err(Error::Config(format!(
                "{kind} grid needs at least 3 magnitudes, got {}",
                values.len()
            )));
        }
        if values[0] != kind.identity() {
            return Err(Error::Config(format!(
                "{kind} grid must start at the identity {}",
                kind.identity()
            )));
        }
        for &v in &values {
            kind.check(v)?;
        }
        if values
            .windows(2)
            .any(|p| kind.strength(p[1]) <= kind.strength(p[0]))
        {
            return Err(Error::Config(format!(
                "{kind} grid must strictly increase in strength"
            )));
        }
        Ok(Self { kind, values })
    }

    pub fn kind(&self) -> PerturbationKind {
        self.kind
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Per-image noise seed, independent of evaluation order.
pub fn image_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn perturb_dataset(
    kind: PerturbationKind,
    magnitude: f64,
    dataset: &[Image],
    seed: u64,
) -> Result<Vec<Image>> {
    kind.check(magnitude)?;
    dataset
        .par_iter()
        .enumerate()
        .map(|(i, x)| Perturbation::new(kind, magnitude, image_seed(seed, i))?.apply(x))
        .collect()
}

/// Mean of `measure` over the dataset perturbed at `magnitude`.
pub fn gamma<F>(
    measure: F,
    dataset: &[Image],
    kind: PerturbationKind,
    magnitude: f64,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&Image) -> Result<f64> + Sync,
{
    if dataset.is_empty() {
        return Err(Error::dataset("empty dataset"));
    }
    kind.check(magnitude)?;
    let values = dataset
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let y = Perturbation::new(kind, magnitude, image_seed(seed, i))?.apply(x)?;
            measure(&y)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// `Γ` at every grid magnitude.
pub fn gamma_sweep<F>(
    measure: F,
    dataset: &[Image],
    grid: &MagnitudeGrid,
    seed: u64,
) -> Result<Vec<f64>>
where
    F: Fn(&Image) -> Result<f64> + Sync,
{
    grid.values()
        .iter()
        .map(|&m| gamma(&measure, dataset, grid.kind(), m, seed))
        .collect()
}
