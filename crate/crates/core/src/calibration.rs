//! Logistic calibration of detection scores and the averaged confidences.
//!
//! Each detector's training scores are modelled as a logistic distribution
//! `L(μ, σ)`; the confidence of a new score is that distribution's CDF.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detectors::{detection_score, group_by_class, BankMode, DetectorBank};
use crate::error::{Error, Result};
use crate::io::{read_file, write_file, ByteReader, ByteWriter};
use crate::tensor::{argmax, FeatureMap};

const CAL_MAGIC: &[u8; 4] = b"PCAL";
const CAL_VERSION: u8 = 1;

/// A confidence value in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConfidenceScore(f64);

impl ConfidenceScore {
    pub fn new(value: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&value) {
            Ok(Self(value))
        } else {
            Err(Error::Calibration(format!(
                "confidence {value} outside [0, 1]"
            )))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Location and scale of a logistic distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticParams {
    pub mu: f64,
    pub sigma: f64,
}

impl LogisticParams {
    /// The logistic CDF at `score`.
    pub fn cdf(&self, score: f64) -> ConfidenceScore {
        ConfidenceScore(1.0 / (1.0 + (-(score - self.mu) / self.sigma).exp()))
    }
}

/// Method-of-moments fit: `μ` is the sample mean and `σ = s·√3/π` with `s` the
/// unbiased sample standard deviation.
pub fn fit_logistic(scores: &[f64]) -> Result<LogisticParams> {
    fit_logistic_named(scores, "score set")
}

fn fit_logistic_named(scores: &[f64], what: &str) -> Result<LogisticParams> {
    let degenerate = || Error::DegenerateCalibration {
        what: what.to_string(),
    };
    if scores.len() < 2 || scores.iter().any(|v| !v.is_finite()) {
        return Err(degenerate());
    }
    let n = scores.len() as f64;
    let mu = scores.iter().sum::<f64>() / n;
    let var = scores.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (n - 1.0);
    let sigma = var.sqrt() * 3f64.sqrt() / PI;
    if !(sigma > 0.0) || scores.iter().all(|&v| v == scores[0]) {
        return Err(degenerate());
    }
    Ok(LogisticParams { mu, sigma })
}

/// `C = 1 / (1 + exp(−(H − μ)/σ))`.
pub fn detector_confidence(score: f64, mu: f64, sigma: f64) -> Result<ConfidenceScore> {
    if !(sigma > 0.0) {
        return Err(Error::Calibration(format!(
            "scale must be positive, got {sigma}"
        )));
    }
    Ok(LogisticParams { mu, sigma }.cdf(score))
}

/// One `(μ, σ)` pair per kernel of a bank, class-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticCalibration {
    num_classes: usize,
    per_class: usize,
    params: Vec<LogisticParams>,
}

impl LogisticCalibration {
    pub fn new(num_classes: usize, per_class: usize, params: Vec<LogisticParams>) -> Result<Self> {
        if params.len() != num_classes * per_class || params.is_empty() {
            return Err(Error::dim(format!(
                "{} calibration pairs for N = {num_classes}, p = {per_class}",
                params.len()
            )));
        }
        if let Some(p) = params
            .iter()
            .find(|p| !(p.sigma > 0.0) || !p.mu.is_finite() || !p.sigma.is_finite())
        {
            return Err(Error::Calibration(format!(
                "invalid pair mu = {}, sigma = {}",
                p.mu, p.sigma
            )));
        }
        Ok(Self {
            num_classes,
            per_class,
            params,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn per_class(&self) -> usize {
        self.per_class
    }

    pub fn params(&self) -> &[LogisticParams] {
        &self.params
    }

    pub fn get(&self, class: usize, index: usize) -> LogisticParams {
        self.params[class * self.per_class + index]
    }

    pub fn set(&mut self, class: usize, index: usize, p: LogisticParams) {
        self.params[class * self.per_class + index] = p;
    }

    fn check_bank(&self, bank: &DetectorBank) -> Result<()> {
        if bank.num_classes() != self.num_classes || bank.per_class() != self.per_class {
            return Err(Error::dim(format!(
                "calibration is {}x{} but bank is {}x{}",
                self.num_classes,
                self.per_class,
                bank.num_classes(),
                bank.per_class()
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::new(CAL_MAGIC, CAL_VERSION);
        w.count(self.num_classes)?;
        w.count(self.per_class)?;
        for p in &self.params {
            w.f64s(&[p.mu, p.sigma]);
        }
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::open(bytes, "PCAL", CAL_MAGIC, CAL_VERSION)?;
        let n = r.count()?;
        let p = r.count()?;
        let at = r.offset() as usize;
        let flat = r.f64s(2 * n * p)?;
        r.expect_end()?;
        let params = flat
            .chunks_exact(2)
            .map(|c| LogisticParams {
                mu: c[0],
                sigma: c[1],
            })
            .collect();
        Self::new(n, p, params).map_err(|e| r.error_at(at, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

fn mean_confidence(
    fmap: &FeatureMap,
    bank: &DetectorBank,
    cal: &LogisticCalibration,
    class: usize,
) -> Result<ConfidenceScore> {
    let p = bank.per_class();
    let mut sum = 0.0;
    for i in 0..p {
        let h = detection_score(fmap, bank.kernel(class, i))?;
        sum += cal.get(class, i).cdf(h).value();
    }
    Ok(ConfidenceScore((sum / p as f64).clamp(0.0, 1.0)))
}

/// `C^vP`: mean of the `p` global detector confidences.
pub fn vanilla_confidence(
    fmap: &FeatureMap,
    bank: &DetectorBank,
    cal: &LogisticCalibration,
) -> Result<ConfidenceScore> {
    if bank.mode() != BankMode::Vanilla {
        return Err(Error::Mode(
            "vanilla confidence needs a vanilla bank".into(),
        ));
    }
    cal.check_bank(bank)?;
    mean_confidence(fmap, bank, cal, 0)
}

/// `C^cP`: mean confidence of the detectors of the predicted class
/// `z = argmax(logits)` (smallest index on ties).
pub fn class_confidence(
    fmap: &FeatureMap,
    logits: &[f64],
    bank: &DetectorBank,
    cal: &LogisticCalibration,
) -> Result<ConfidenceScore> {
    if bank.mode() != BankMode::ClassBased {
        return Err(Error::Mode(
            "class confidence needs a class-based bank".into(),
        ));
    }
    cal.check_bank(bank)?;
    if logits.len() != bank.num_classes() {
        return Err(Error::dim(format!(
            "{} logits for a bank of {} classes",
            logits.len(),
            bank.num_classes()
        )));
    }
    mean_confidence(fmap, bank, cal, argmax(logits))
}

/// Fits one logistic per kernel: over all feature maps for a vanilla bank, over
/// each class's own samples for a class-based bank.
pub fn calibrate_bank(
    bank: &DetectorBank,
    features: &[FeatureMap],
    labels: &[usize],
) -> Result<LogisticCalibration> {
    let groups: Vec<Vec<&FeatureMap>> = match bank.mode() {
        BankMode::Vanilla => vec![features.iter().collect()],
        BankMode::ClassBased => group_by_class(features, labels, bank.num_classes())?,
    };
    let mut params = Vec::with_capacity(bank.kernels().len());
    for (c, group) in groups.iter().enumerate() {
        if group.is_empty() {
            return Err(Error::dataset(format!(
                "no calibration samples for class {c}"
            )));
        }
        for i in 0..bank.per_class() {
            let scores = group
                .iter()
                .map(|f| detection_score(f, bank.kernel(c, i)))
                .collect::<Result<Vec<_>>>()?;
            params.push(fit_logistic_named(
                &scores,
                &format!("class {c} detector {i}"),
            )?);
        }
    }
    LogisticCalibration::new(bank.num_classes(), bank.per_class(), params)
}
