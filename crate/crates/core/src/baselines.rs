//! Baseline confidence measures computed from classifier outputs alone.

use serde::{Deserialize, Serialize};

use crate::calibration::ConfidenceScore;
use crate::classifier::{softmax, NeuronRanges};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum BaselineKind {
    /// Maximum class probability.
    Mcp,
    /// Log-sum-exp of the logits.
    Eb,
    /// One minus the fraction of neurons outside their training ranges.
    Fnrd,
}

impl BaselineKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BaselineKind::Mcp => "MCP",
            BaselineKind::Eb => "EB",
            BaselineKind::Fnrd => "FNRD",
        }
    }
}

fn check_logits(logits: &[f64]) -> Result<()> {
    if logits.is_empty() {
        return Err(Error::dim("empty logit vector"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::dim("non-finite logit"));
    }
    Ok(())
}

/// `max(softmax(logits))`.
pub fn mcp_confidence(logits: &[f64]) -> Result<ConfidenceScore> {
    check_logits(logits)?;
    let p = softmax(logits).into_iter().fold(0.0, f64::max);
    ConfidenceScore::new(p.min(1.0))
}

/// `log Σ exp(logits)`, max-stabilised. Unbounded; only its ranking is meaningful.
pub fn energy_confidence(logits: &[f64]) -> Result<f64> {
    check_logits(logits)?;
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln())
}

/// `1 − fNRD`, where fNRD is the fraction of neurons strictly outside `[min, max]`.
pub fn fnrd_confidence(activations: &[f64], ranges: &NeuronRanges) -> Result<ConfidenceScore> {
    if activations.len() != ranges.len() || ranges.is_empty() {
        return Err(Error::dim(format!(
            "{} activations for {} monitored neurons",
            activations.len(),
            ranges.len()
        )));
    }
    let outside = activations
        .iter()
        .zip(ranges.min.iter().zip(&ranges.max))
        .filter(|(&a, (&lo, &hi))| a < lo || a > hi)
        .count();
    ConfidenceScore::new(1.0 - outside as f64 / ranges.len() as f64)
}
