//! Mixed uncertainty sampling scores.
//!
//! Each candidate box gets `phi = phi_image * phi_object`, where
//! `phi_image` is one minus the mean top-class confidence of the image's
//! confident predictions and `phi_object` is the entropy of the box's
//! foreground class distribution.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{ImageId, PredId, Prediction};

pub const DEFAULT_THETA: f64 = 0.10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScoringError {
    #[error("class probabilities sum to zero")]
    DegenerateProbabilities,
    #[error("negative or non-finite class probability {0}")]
    InvalidProbability(f64),
    #[error("theta must lie in (0, 1), got {0}")]
    InvalidTheta(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoringConfig {
    pub theta: f64,
    /// Image uncertainty used when no prediction clears `theta`.
    pub empty_confident_set_value: f64,
    /// When false the image term is fixed to 1 and only object entropy ranks boxes.
    pub use_image_term: bool,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self { theta: DEFAULT_THETA, empty_confident_set_value: 1.0, use_image_term: true }
    }
}

impl ScoringConfig {
    pub fn validate(&self) -> Result<(), ScoringError> {
        if !(self.theta.is_finite() && self.theta > 0.0 && self.theta < 1.0) {
            return Err(ScoringError::InvalidTheta(self.theta));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPrediction {
    pub image_id: ImageId,
    pub pred_id: PredId,
    pub argmax_class: usize,
    pub phi_image: f64,
    pub phi_object: f64,
    pub phi: f64,
}

/// Indices of predictions whose top class confidence is strictly above `theta`.
pub fn confident_set(preds: &[&Prediction], theta: f64) -> Vec<usize> {
    preds.iter().enumerate().filter(|(_, p)| p.max_confidence() > theta).map(|(j, _)| j).collect()
}

pub fn image_uncertainty(preds: &[&Prediction], config: &ScoringConfig) -> f64 {
    let confident = confident_set(preds, config.theta);
    if confident.is_empty() {
        return config.empty_confident_set_value;
    }
    let mean = confident.iter().map(|&j| preds[j].max_confidence()).sum::<f64>() / confident.len() as f64;
    1.0 - mean
}

/// Natural-log entropy of the class distribution after renormalizing it to sum 1.
pub fn object_entropy(class_probs: &[f64]) -> Result<f64, ScoringError> {
    if let Some(&bad) = class_probs.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
        return Err(ScoringError::InvalidProbability(bad));
    }
    let total: f64 = class_probs.iter().sum();
    if total <= 0.0 {
        return Err(ScoringError::DegenerateProbabilities);
    }
    let h = class_probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| {
            let q = p / total;
            -q * q.ln()
        })
        .sum::<f64>();
    Ok(h.max(0.0))
}

/// Scores every prediction of every image in `candidates`.
///
/// Output is ordered by `(image_id, pred_id)`.
pub fn score_candidates(
    candidates: &BTreeMap<ImageId, Vec<&Prediction>>,
    config: &ScoringConfig,
) -> Result<Vec<ScoredPrediction>, ScoringError> {
    config.validate()?;
    let mut out = Vec::new();
    for (&image_id, preds) in candidates {
        let phi_image = if config.use_image_term { image_uncertainty(preds, config) } else { 1.0 };
        for p in preds {
            let phi_object = object_entropy(&p.class_probs)?;
            out.push(ScoredPrediction {
                image_id,
                pred_id: p.pred_id,
                argmax_class: p.argmax_class(),
                phi_image,
                phi_object,
                phi: phi_image * phi_object,
            });
        }
    }
    out.sort_by_key(|s| (s.image_id, s.pred_id));
    Ok(out)
}

/// Scores the pool's open candidates without overlap suppression.
pub fn score_pool(pool: &crate::datamodel::PoolState, config: &ScoringConfig) -> Result<Vec<ScoredPrediction>, ScoringError> {
    score_candidates(&pool.candidates(), config)
}
