//! SmoothGrad saliency for detector activations and visual pattern references.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::LogisticCalibration;
use crate::classifier::{Selector, ToyCnn};
use crate::detectors::{detection_score, DetectorBank};
use crate::error::{Error, Result};
use crate::perturb::image_seed;
use crate::ppm;
use crate::tensor::Image;

/// Non-negative `H×W` relevance map, scaled so its maximum is 1 (unless all zero).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Saliency {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Saliency {
    /// Sums `|g|` over channels and max-normalises.
    pub fn from_gradient(height: usize, width: usize, channels: usize, grad: &[f64]) -> Self {
        let mut data: Vec<f64> = grad
            .chunks_exact(channels)
            .map(|px| px.iter().map(|v| v.abs()).sum())
            .collect();
        debug_assert_eq!(data.len(), height * width);
        let m = data.iter().copied().fold(0.0, f64::max);
        if m > 0.0 {
            data.iter_mut().for_each(|v| *v /= m);
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn get(&self, h: usize, w: usize) -> f64 {
        self.data[h * self.width + w]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SmoothGradConfig {
    pub samples: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SmoothGradConfig {
    fn default() -> Self {
        Self {
            samples: 16,
            noise_std: 0.1,
            seed: 0,
        }
    }
}

/// The `i`-th noisy copy used by SmoothGrad. Values are not clamped.
pub fn noisy_copy(x: &Image, noise_std: f64, seed: u64, i: usize) -> Vec<f64> {
    if noise_std == 0.0 {
        return x.data().to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(image_seed(seed, i));
    let normal = Normal::new(0.0, noise_std).expect("finite std");
    x.data()
        .iter()
        .map(|v| v + normal.sample(&mut rng))
        .collect()
}

/// Mean of `|∇x|` over the noisy copies, same layout as the image.
pub fn mean_abs_gradient(
    model: &ToyCnn,
    x: &Image,
    selector: Selector<'_>,
    config: &SmoothGradConfig,
) -> Result<Vec<f64>> {
    if config.samples == 0 {
        return Err(Error::Config("SmoothGrad needs at least one sample".into()));
    }
    if !(config.noise_std >= 0.0) {
        return Err(Error::Config("SmoothGrad noise std must be >= 0".into()));
    }
    // validates dimensions and selector
    model.input_gradient(x, selector)?;
    let grads: Vec<Vec<f64>> = (0..config.samples)
        .into_par_iter()
        .map(|i| {
            model.input_gradient_unchecked(
                &noisy_copy(x, config.noise_std, config.seed, i),
                selector,
            )
        })
        .collect();
    let mut mean = vec![0.0; x.data().len()];
    for g in &grads {
        for (m, v) in mean.iter_mut().zip(g) {
            *m += v.abs();
        }
    }
    let n = config.samples as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(mean)
}

pub fn smoothgrad(
    model: &ToyCnn,
    x: &Image,
    selector: Selector<'_>,
    config: &SmoothGradConfig,
) -> Result<Saliency> {
    let mean = mean_abs_gradient(model, x, selector, config)?;
    Ok(Saliency::from_gradient(
        x.height(),
        x.width(),
        x.channels(),
        &mean,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceEntry {
    pub image_index: usize,
    pub score: f64,
    pub confidence: f64,
    #[serde(skip)]
    pub saliency: Option<Saliency>,
}

/// The training images on which one detector fires most strongly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternReference {
    pub class: usize,
    pub detector: usize,
    pub entries: Vec<ReferenceEntry>,
}

/// Top-`k` training images per detector by detection score, ties broken by
/// image index, each with its SmoothGrad saliency and confidence.
pub fn pattern_references(
    bank: &DetectorBank,
    cal: &LogisticCalibration,
    model: &ToyCnn,
    train_set: &[Image],
    k: usize,
    smooth: &SmoothGradConfig,
) -> Result<Vec<PatternReference>> {
    if k == 0 || k > train_set.len() {
        return Err(Error::dataset(format!(
            "k = {k} not in 1..={}",
            train_set.len()
        )));
    }
    if bank.depth() != model.depth() {
        return Err(Error::dim("bank depth does not match classifier features"));
    }
    let fmaps = train_set
        .par_iter()
        .map(|x| model.forward(x).map(|(f, _)| f))
        .collect::<Result<Vec<_>>>()?;
    let mut refs = Vec::with_capacity(bank.kernels().len());
    for c in 0..bank.num_classes() {
        for i in 0..bank.per_class() {
            let kernel = bank.kernel(c, i);
            let params = cal.get(c, i);
            let mut ranked = fmaps
                .iter()
                .map(|f| detection_score(f, kernel))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .enumerate()
                .collect::<Vec<_>>();
            ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            let entries = ranked
                .into_iter()
                .take(k)
                .map(|(idx, score)| {
                    Ok(ReferenceEntry {
                        image_index: idx,
                        score,
                        confidence: params.cdf(score).value(),
                        saliency: Some(smoothgrad(
                            model,
                            &train_set[idx],
                            Selector::Detector(kernel),
                            smooth,
                        )?),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            refs.push(PatternReference {
                class: c,
                detector: i,
                entries,
            });
        }
    }
    Ok(refs)
}

/// Heat overlay: `(1 − α)·x + α·red` with `α = 0.6·s`.
pub fn overlay(x: &Image, s: &Saliency) -> Result<Image> {
    if (s.height, s.width) != (x.height(), x.width()) {
        return Err(Error::dim("saliency and image sizes differ"));
    }
    const HEAT: [f64; 3] = [1.0, 0.0, 0.0];
    let mut data = Vec::with_capacity(x.height() * x.width() * 3);
    for h in 0..x.height() {
        for w in 0..x.width() {
            let a = 0.6 * s.get(h, w);
            for (c, heat) in HEAT.iter().enumerate() {
                let v = x.get(h, w, if x.channels() == 3 { c } else { 0 });
                data.push(if a == 0.0 {
                    v
                } else {
                    (1.0 - a) * v + a * heat
                });
            }
        }
    }
    Image::from_clamped(x.height(), x.width(), 3, data)
}

/// Writes the saliency overlay as a P6 pixmap.
pub fn render_saliency(x: &Image, s: &Saliency, path: &Path) -> Result<()> {
    ppm::write(path, &overlay(x, s)?)
}

/// `detector_<class>_<idx>_<rank>.ppm`
pub fn reference_file_name(class: usize, detector: usize, rank: usize) -> String {
    format!("detector_{class}_{detector}_{rank}.ppm")
}
