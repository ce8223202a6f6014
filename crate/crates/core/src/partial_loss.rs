//! Box-head loss for mixed fully / partially labeled batches.
//!
//! Classification is softmax cross-entropy over `C` foreground classes plus
//! background (index `C`). Negatives drawn from partially labeled images are
//! down-weighted by their predicted background score `mu`, since some of them
//! are unlabeled objects rather than true background. Regression is
//! smooth-L1 over five box parameters, positives only.

use thiserror::Error;

pub const REG_DIMS: usize = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("sample {index}: {reason}")]
    InvalidSample { index: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProposalSample {
    /// `C + 1` logits; the last one is background.
    pub logits: Vec<f64>,
    /// Target index in `0..=C`; `C` means background.
    pub target_class: usize,
    pub is_positive: bool,
    pub from_partial_image: bool,
    /// Predicted background score; required for negatives of partial images.
    pub background_score: Option<f64>,
    pub reg_pred: [f64; REG_DIMS],
    pub reg_target: [f64; REG_DIMS],
}

impl ProposalSample {
    fn background_index(&self) -> usize {
        self.logits.len() - 1
    }

    fn validate(&self, index: usize) -> Result<(), LossError> {
        let fail = |reason: String| Err(LossError::InvalidSample { index, reason });
        if self.logits.len() < 3 {
            return fail(format!("{} logits, need at least 3", self.logits.len()));
        }
        if self.target_class > self.background_index() {
            return fail(format!("target {} out of range", self.target_class));
        }
        if self.is_positive && self.target_class == self.background_index() {
            return fail("positive sample with background target".into());
        }
        if !self.is_positive && self.target_class != self.background_index() {
            return fail("negative sample with foreground target".into());
        }
        if !self.is_positive && self.from_partial_image {
            match self.background_score {
                Some(mu) if (0.0..=1.0).contains(&mu) => {}
                Some(mu) => return fail(format!("background score {mu} outside [0, 1]")),
                None => return fail("missing background score".into()),
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub cls_loss: f64,
    pub reg_loss: f64,
    pub total: f64,
    pub lambda_cls: f64,
    pub lambda_reg: f64,
    pub num_proposals: usize,
    pub num_positive: usize,
}

/// Gradients of the batch loss with respect to each sample's logits and
/// regression outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGradient {
    pub logits: Vec<Vec<f64>>,
    pub reg_pred: Vec<[f64; REG_DIMS]>,
}

pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

/// Derivative of [`smooth_l1`].
pub fn smooth_l1_grad(x: f64) -> f64 {
    x.clamp(-1.0, 1.0)
}

/// Classification weight of a proposal: `mu` for negatives of partially
/// labeled images, 1 otherwise.
pub fn adaptive_weight(sample: &ProposalSample) -> Result<f64, LossError> {
    if sample.is_positive || !sample.from_partial_image {
        return Ok(1.0);
    }
    sample.background_score.ok_or_else(|| LossError::InvalidSample {
        index: 0,
        reason: "missing background score".into(),
    })
}

/// Sum with a fixed binary-tree shape so results do not depend on thread
/// count or accumulation order.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const LEAF: usize = 8;
    if values.len() <= LEAF {
        return values.iter().fold(0.0, |acc, v| acc + v);
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

pub(crate) fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&z| z - lse).collect()
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

fn cross_entropy(logits: &[f64], target: usize) -> f64 {
    -log_softmax(logits)[target]
}

fn validate_batch(batch: &[ProposalSample]) -> Result<(), LossError> {
    if batch.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let width = batch[0].logits.len();
    for (i, s) in batch.iter().enumerate() {
        s.validate(i)?;
        if s.logits.len() != width {
            return Err(LossError::InvalidSample { index: i, reason: "logit width differs from batch".into() });
        }
    }
    Ok(())
}

fn normalizers(batch: &[ProposalSample]) -> (f64, f64, usize) {
    let positives = batch.iter().filter(|s| s.is_positive).count();
    (1.0 / batch.len() as f64, 1.0 / positives.max(1) as f64, positives)
}

pub fn bbox_loss(batch: &[ProposalSample]) -> Result<LossBreakdown, LossError> {
    validate_batch(batch)?;
    let (lambda_cls, lambda_reg, num_positive) = normalizers(batch);
    let mut cls_terms = Vec::with_capacity(batch.len());
    let mut reg_terms = Vec::with_capacity(batch.len());
    for s in batch {
        let w = adaptive_weight(s)?;
        cls_terms.push(if w == 0.0 { 0.0 } else { w * cross_entropy(&s.logits, s.target_class) });
        if s.is_positive {
            let per_dim: Vec<f64> = (0..REG_DIMS).map(|u| smooth_l1(s.reg_pred[u] - s.reg_target[u])).collect();
            reg_terms.push(pairwise_sum(&per_dim));
        }
    }
    let cls_loss = lambda_cls * pairwise_sum(&cls_terms);
    let reg_loss = lambda_reg * pairwise_sum(&reg_terms);
    Ok(LossBreakdown {
        cls_loss,
        reg_loss,
        total: cls_loss + reg_loss,
        lambda_cls,
        lambda_reg,
        num_proposals: batch.len(),
        num_positive,
    })
}

pub fn bbox_loss_grad(batch: &[ProposalSample]) -> Result<BatchGradient, LossError> {
    validate_batch(batch)?;
    let (lambda_cls, lambda_reg, _) = normalizers(batch);
    let mut logits = Vec::with_capacity(batch.len());
    let mut reg_pred = Vec::with_capacity(batch.len());
    for s in batch {
        let scale = lambda_cls * adaptive_weight(s)?;
        let g = if scale == 0.0 {
            vec![0.0; s.logits.len()]
        } else {
            let mut p = softmax(&s.logits);
            p[s.target_class] -= 1.0;
            p.into_iter().map(|v| scale * v).collect()
        };
        logits.push(g);
        let mut r = [0.0; REG_DIMS];
        if s.is_positive {
            for u in 0..REG_DIMS {
                r[u] = lambda_reg * smooth_l1_grad(s.reg_pred[u] - s.reg_target[u]);
            }
        }
        reg_pred.push(r);
    }
    Ok(BatchGradient { logits, reg_pred })
}

/// Largest relative deviation between the analytic gradient and central
/// differences of [`bbox_loss`], over every logit and regression output.
///
/// The relative error uses `max(|analytic|, 1e-8)` as denominator.
pub fn finite_diff_check(batch: &[ProposalSample], epsilon: f64) -> Result<f64, LossError> {
    let analytic = bbox_loss_grad(batch)?;
    let mut work = batch.to_vec();
    let mut worst: f64 = 0.0;
    let mut compare = |numeric: f64, exact: f64| {
        let err = (numeric - exact).abs() / exact.abs().max(1e-8);
        worst = worst.max(err);
    };
    for i in 0..batch.len() {
        for k in 0..batch[i].logits.len() {
            let x0 = batch[i].logits[k];
            work[i].logits[k] = x0 + epsilon;
            let up = bbox_loss(&work)?.total;
            work[i].logits[k] = x0 - epsilon;
            let down = bbox_loss(&work)?.total;
            work[i].logits[k] = x0;
            compare((up - down) / (2.0 * epsilon), analytic.logits[i][k]);
        }
        for u in 0..REG_DIMS {
            let x0 = batch[i].reg_pred[u];
            work[i].reg_pred[u] = x0 + epsilon;
            let up = bbox_loss(&work)?.total;
            work[i].reg_pred[u] = x0 - epsilon;
            let down = bbox_loss(&work)?.total;
            work[i].reg_pred[u] = x0;
            compare((up - down) / (2.0 * epsilon), analytic.reg_pred[i][u]);
        }
    }
    Ok(worst)
}
