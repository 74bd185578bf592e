//! Unsupervised pattern detectors learned on frozen feature maps.
//!
//! Each detector is a `1×1×D` kernel. Its activation map over a feature map is
//! the per-location correlation, and its detection score is the maximum of that
//! map. Training pushes each detector to put its spatial softmax mass on a
//! single 3×3 neighbourhood (locality) while penalising several detectors that
//! stack mass on the same neighbourhood (unicity).

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_file, write_file, ByteReader, ByteWriter};
use crate::tensor::{
    argmax2, correlate_1x1, neighborhood, smooth_3x3, spatial_softmax, FeatureMap, Map2,
};

const BANK_MAGIC: &[u8; 4] = b"PBNK";
const BANK_VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BankMode {
    Vanilla,
    ClassBased,
}

impl BankMode {
    pub fn as_str(self) -> &'static str {
        match self {
            BankMode::Vanilla => "vanilla",
            BankMode::ClassBased => "class_based",
        }
    }
}

/// `N×p` detector kernels of dimension `D`, stored class-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorBank {
    mode: BankMode,
    num_classes: usize,
    per_class: usize,
    depth: usize,
    kernels: Vec<Vec<f64>>,
}

impl DetectorBank {
    pub fn new(
        mode: BankMode,
        num_classes: usize,
        per_class: usize,
        kernels: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if mode == BankMode::Vanilla && num_classes != 1 {
            return Err(Error::Mode(format!(
                "vanilla bank must have N = 1, got {num_classes}"
            )));
        }
        if num_classes == 0 || per_class == 0 {
            return Err(Error::dim("bank needs N >= 1 and p >= 1"));
        }
        if kernels.len() != num_classes * per_class {
            return Err(Error::dim(format!(
                "{} kernels given for N = {num_classes}, p = {per_class}",
                kernels.len()
            )));
        }
        let depth = kernels[0].len();
        if depth == 0 || kernels.iter().any(|k| k.len() != depth) {
            return Err(Error::dim("kernels must share a nonzero dimension"));
        }
        if kernels.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::dim("non-finite kernel value"));
        }
        Ok(Self {
            mode,
            num_classes,
            per_class,
            depth,
            kernels,
        })
    }

    pub fn mode(&self) -> BankMode {
        self.mode
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn per_class(&self) -> usize {
        self.per_class
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn kernels(&self) -> &[Vec<f64>] {
        &self.kernels
    }

    pub fn kernel(&self, class: usize, index: usize) -> &[f64] {
        &self.kernels[class * self.per_class + index]
    }

    pub fn kernel_mut(&mut self, class: usize, index: usize) -> &mut Vec<f64> {
        &mut self.kernels[class * self.per_class + index]
    }

    /// The `p` kernels belonging to `class`.
    pub fn class_kernels(&self, class: usize) -> &[Vec<f64>] {
        &self.kernels[class * self.per_class..(class + 1) * self.per_class]
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::new(BANK_MAGIC, BANK_VERSION);
        w.u8(match self.mode {
            BankMode::Vanilla => 0,
            BankMode::ClassBased => 1,
        });
        w.count(self.num_classes)?;
        w.count(self.per_class)?;
        w.count(self.depth)?;
        for k in &self.kernels {
            w.f64s(k);
        }
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::open(bytes, "PBNK", BANK_MAGIC, BANK_VERSION)?;
        let at = r.offset() as usize;
        let mode = match r.u8()? {
            0 => BankMode::Vanilla,
            1 => BankMode::ClassBased,
            m => return Err(r.error_at(at, format!("unknown mode byte {m}"))),
        };
        let n = r.count()?;
        let p = r.count()?;
        let d = r.count()?;
        if n == 0 || p == 0 || d == 0 {
            return Err(r.error("zero bank dimension"));
        }
        let kernels = (0..n * p).map(|_| r.f64s(d)).collect::<Result<Vec<_>>>()?;
        r.expect_end()?;
        Self::new(mode, n, p, kernels).map_err(|e| r.error_at(at, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

/// `H(x) = max_{h,w} F(x)[h,w]·k`.
pub fn detection_score(fmap: &FeatureMap, kernel: &[f64]) -> Result<f64> {
    Ok(correlate_1x1(fmap, kernel)?.max())
}

/// Spatial softmax and its 3×3-pooled mass for one detector.
struct DetectorMass {
    probs: Map2,
    pooled: Map2,
}

fn detector_mass(fmap: &FeatureMap, kernel: &[f64]) -> Result<DetectorMass> {
    let probs = spatial_softmax(&correlate_1x1(fmap, kernel)?)?;
    let pooled = smooth_3x3(&probs)?;
    Ok(DetectorMass { probs, pooled })
}

fn masses<K: AsRef<[f64]>>(fmap: &FeatureMap, kernels: &[K]) -> Result<Vec<DetectorMass>> {
    if kernels.is_empty() {
        return Err(Error::dim("empty detector set"));
    }
    kernels
        .iter()
        .map(|k| detector_mass(fmap, k.as_ref()))
        .collect()
}

/// Largest 3×3-pooled softmax mass of one detector on one feature map.
pub fn peak_mass(fmap: &FeatureMap, kernel: &[f64]) -> Result<f64> {
    Ok(detector_mass(fmap, kernel)?.pooled.max())
}

/// `(1/p)·Σ_i (1 − max pooled mass of detector i)`, in `[0, 1)`.
pub fn locality_loss<K: AsRef<[f64]>>(fmap: &FeatureMap, kernels: &[K]) -> Result<f64> {
    let ms = masses(fmap, kernels)?;
    Ok(locality_from(&ms))
}

fn locality_from(ms: &[DetectorMass]) -> f64 {
    ms.iter().map(|m| 1.0 - m.pooled.max()).sum::<f64>() / ms.len() as f64
}

/// Stacked pooled mass of all detectors, with its first maximum location.
fn stacked_peak(ms: &[DetectorMass]) -> (f64, (usize, usize)) {
    let first = &ms[0].pooled;
    let mut total = vec![0.0; first.data().len()];
    for m in ms {
        for (t, v) in total.iter_mut().zip(m.pooled.data()) {
            *t += v;
        }
    }
    let map = Map2::new(first.height(), first.width(), total).expect("same shape");
    let loc = argmax2(&map);
    (map.get(loc.0, loc.1), loc)
}

/// `max(0, max_{h,w} Σ_i pooled_i[h,w] − 1)`.
pub fn unicity_loss<K: AsRef<[f64]>>(fmap: &FeatureMap, kernels: &[K]) -> Result<f64> {
    let ms = masses(fmap, kernels)?;
    Ok(unicity_from(&ms))
}

fn unicity_from(ms: &[DetectorMass]) -> f64 {
    (stacked_peak(ms).0 - 1.0).max(0.0)
}

/// `L_l + λ·L_u`.
pub fn detector_loss<K: AsRef<[f64]>>(
    fmap: &FeatureMap,
    kernels: &[K],
    unicity_weight: f64,
) -> Result<f64> {
    let ms = masses(fmap, kernels)?;
    Ok(locality_from(&ms) + unicity_weight * unicity_from(&ms))
}

/// Adds `scale · ∂pooled[peak]/∂A` to `grad_act`, where `pooled[peak]` is the
/// softmax mass in the 3×3 neighbourhood of `peak`.
fn add_mass_gradient(m: &DetectorMass, peak: (usize, usize), scale: f64, grad_act: &mut [f64]) {
    let w = m.probs.width();
    let mass = m.pooled.get(peak.0, peak.1);
    for (i, g) in grad_act.iter_mut().enumerate() {
        *g -= scale * m.probs.data()[i] * mass;
    }
    for h in neighborhood(peak.0, m.probs.height()) {
        for x in neighborhood(peak.1, w) {
            grad_act[h * w + x] += scale * m.probs.get(h, x);
        }
    }
}

/// Analytic gradient of [`detector_loss`] with respect to each kernel.
pub fn loss_gradient<K: AsRef<[f64]>>(
    fmap: &FeatureMap,
    kernels: &[K],
    unicity_weight: f64,
) -> Result<Vec<Vec<f64>>> {
    let ms = masses(fmap, kernels)?;
    let p = ms.len() as f64;
    let n_loc = fmap.locations();
    let mut grad_act: Vec<Vec<f64>> = vec![vec![0.0; n_loc]; ms.len()];
    for (m, g) in ms.iter().zip(&mut grad_act) {
        add_mass_gradient(m, argmax2(&m.pooled), -1.0 / p, g);
    }
    let (stacked, peak) = stacked_peak(&ms);
    if unicity_weight != 0.0 && stacked > 1.0 {
        for (m, g) in ms.iter().zip(&mut grad_act) {
            add_mass_gradient(m, peak, unicity_weight, g);
        }
    }
    Ok(grad_act
        .iter()
        .map(|ga| {
            let mut gk = vec![0.0; fmap.depth()];
            for (loc, &a) in ga.iter().enumerate() {
                if a != 0.0 {
                    for (k, &f) in gk.iter_mut().zip(fmap.vector(loc)) {
                        *k += a * f;
                    }
                }
            }
            gk
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub unicity_weight: f64,
    /// Samples per optimizer step.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 1e-4,
            weight_decay: 1e-5,
            unicity_weight: 1.0,
            batch_size: 1,
            seed: 0,
        }
    }
}

impl DetectorTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "detector epochs and batch size must be >= 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay > 0.0) {
            return Err(Error::Config(
                "detector learning rate and weight decay must be > 0".into(),
            ));
        }
        if !(self.unicity_weight >= 0.0) {
            return Err(Error::Config("unicity weight must be >= 0".into()));
        }
        Ok(())
    }
}

/// RMSprop with coupled L2 decay (`α = 0.99`, `ε = 1e-8`).
struct RmsProp {
    lr: f64,
    decay: f64,
    sq: Vec<Vec<f64>>,
}

impl RmsProp {
    const ALPHA: f64 = 0.99;
    const EPS: f64 = 1e-8;

    fn new(lr: f64, decay: f64, p: usize, d: usize) -> Self {
        Self {
            lr,
            decay,
            sq: vec![vec![0.0; d]; p],
        }
    }

    fn step(&mut self, kernels: &mut [Vec<f64>], grads: &[Vec<f64>]) {
        for ((k, g), s) in kernels.iter_mut().zip(grads).zip(&mut self.sq) {
            for ((kv, &gv), sv) in k.iter_mut().zip(g).zip(s.iter_mut()) {
                let g = gv + self.decay * *kv;
                *sv = Self::ALPHA * *sv + (1.0 - Self::ALPHA) * g * g;
                *kv -= self.lr * g / (sv.sqrt() + Self::EPS);
            }
        }
    }
}

fn init_kernels(p: usize, depth: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0 / (depth as f64).sqrt()).expect("finite std");
    (0..p)
        .map(|_| (0..depth).map(|_| normal.sample(&mut rng)).collect())
        .collect()
}

/// Learns `p` kernels on one set of feature maps. The trajectory depends only on
/// `samples` and `config`.
pub fn train_kernels(
    samples: &[&FeatureMap],
    p: usize,
    config: &DetectorTrainConfig,
) -> Result<Vec<Vec<f64>>> {
    config.validate()?;
    if p == 0 {
        return Err(Error::Config("need p >= 1 detectors".into()));
    }
    let depth = samples
        .first()
        .ok_or_else(|| Error::dataset("empty feature set"))?
        .depth();
    if samples.iter().any(|f| f.depth() != depth) {
        return Err(Error::dataset("feature maps differ in depth"));
    }
    let mut kernels = init_kernels(p, depth, config.seed);
    let mut opt = RmsProp::new(config.learning_rate, config.weight_decay, p, depth);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x00DE_7EC7);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let per_sample: Vec<Vec<Vec<f64>>> = batch
                .par_iter()
                .map(|&i| loss_gradient(samples[i], &kernels, config.unicity_weight))
                .collect::<Result<_>>()?;
            let mut total = vec![vec![0.0; depth]; p];
            for g in &per_sample {
                for (t, gi) in total.iter_mut().zip(g) {
                    for (a, b) in t.iter_mut().zip(gi) {
                        *a += b;
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            total.iter_mut().flatten().for_each(|v| *v *= scale);
            opt.step(&mut kernels, &total);
        }
    }
    Ok(kernels)
}

/// Global detectors trained on all feature maps, labels ignored.
pub fn train_vanilla(
    features: &[FeatureMap],
    p: usize,
    config: &DetectorTrainConfig,
) -> Result<DetectorBank> {
    let refs: Vec<&FeatureMap> = features.iter().collect();
    let kernels = train_kernels(&refs, p, config)?;
    DetectorBank::new(BankMode::Vanilla, 1, p, kernels)
}

/// `p` detectors per class, each class trained only on its own samples. Every
/// class starts from the same seeded initialisation.
pub fn train_class_based(
    features: &[FeatureMap],
    labels: &[usize],
    num_classes: usize,
    p: usize,
    config: &DetectorTrainConfig,
) -> Result<DetectorBank> {
    let groups = group_by_class(features, labels, num_classes)?;
    let mut kernels = Vec::with_capacity(num_classes * p);
    for (c, group) in groups.iter().enumerate() {
        if group.is_empty() {
            return Err(Error::dataset(format!("class {c} has no samples")));
        }
        kernels.extend(train_kernels(group, p, config)?);
    }
    DetectorBank::new(BankMode::ClassBased, num_classes, p, kernels)
}

pub(crate) fn group_by_class<'a, T>(
    items: &'a [T],
    labels: &[usize],
    num_classes: usize,
) -> Result<Vec<Vec<&'a T>>> {
    if items.len() != labels.len() {
        return Err(Error::dataset("item and label counts differ"));
    }
    let mut groups: Vec<Vec<&T>> = vec![Vec::new(); num_classes];
    for (item, &l) in items.iter().zip(labels) {
        groups
            .get_mut(l)
            .ok_or_else(|| Error::dataset(format!("label {l} >= class count {num_classes}")))?
            .push(item);
    }
    Ok(groups)
}

/// Mean peak mass of each kernel over a set of feature maps.
pub fn mean_peak_mass(features: &[&FeatureMap], kernels: &[Vec<f64>]) -> Result<Vec<f64>> {
    if features.is_empty() {
        return Err(Error::dataset("empty feature set"));
    }
    kernels
        .iter()
        .map(|k| {
            let s: f64 = features
                .iter()
                .map(|f| peak_mass(f, k))
                .collect::<Result<Vec<_>>>()?
                .iter()
                .sum();
            Ok(s / features.len() as f64)
        })
        .collect()
}

/// Detection scores of every kernel in the bank, class-major.
pub fn bank_scores(fmap: &FeatureMap, bank: &DetectorBank) -> Result<Vec<f64>> {
    bank.kernels()
        .iter()
        .map(|k| detection_score(fmap, k))
        .collect()
}
