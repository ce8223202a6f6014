//! Image-level comparison strategies: random, mean-entropy and k-center
//! greedy (coreset). Selected images are labeled in full, and the budget
//! is counted in annotated objects.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{ImageId, ImageStatus, PoolState};
use crate::ingest::ImageFeature;
use crate::scoring::{object_entropy, ScoringError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BaselineError {
    #[error("feature dimension mismatch: expected {expected}, image {image_id} has {found}")]
    DimensionMismatch { image_id: ImageId, expected: usize, found: usize },
    #[error(transparent)]
    Scoring(#[from] ScoringError),
}

/// How the last image is handled when it would cross the object budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageBudgetRule {
    /// Stop at the first image that does not fit in the remaining budget.
    #[default]
    StopBeforeExceed,
    /// Keep taking images while the budget is not yet reached; the last
    /// one may overshoot.
    AllowOvershoot,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImageSelection {
    pub image_ids: Vec<ImageId>,
    pub objects_charged: u64,
    pub overshoot: u64,
}

/// Walks `order`, charging each image's object count against `budget`.
pub fn take_images_by_budget(
    order: &[ImageId],
    object_count: impl Fn(ImageId) -> u64,
    budget: u64,
    rule: ImageBudgetRule,
) -> ImageSelection {
    let mut sel = ImageSelection::default();
    if budget == 0 {
        return sel;
    }
    for &id in order {
        let n = object_count(id);
        match rule {
            ImageBudgetRule::StopBeforeExceed => {
                if sel.objects_charged + n > budget {
                    break;
                }
            }
            ImageBudgetRule::AllowOvershoot => {
                if sel.objects_charged >= budget {
                    break;
                }
            }
        }
        sel.image_ids.push(id);
        sel.objects_charged += n;
    }
    sel.overshoot = sel.objects_charged.saturating_sub(budget);
    sel
}

fn unlabeled_ids(pool: &PoolState) -> Vec<ImageId> {
    pool.ids_with_status(ImageStatus::Unlabeled).collect()
}

/// Uniformly shuffled unlabeled images.
pub fn random_order(pool: &PoolState, seed: u64) -> Vec<ImageId> {
    let mut ids = unlabeled_ids(pool);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    ids
}

pub fn random_images(
    pool: &PoolState,
    object_count: impl Fn(ImageId) -> u64,
    object_budget: u64,
    seed: u64,
    rule: ImageBudgetRule,
) -> ImageSelection {
    take_images_by_budget(&random_order(pool, seed), object_count, object_budget, rule)
}

/// Mean object entropy of each unlabeled image's predictions (0 when it has none).
pub fn image_entropy_scores(pool: &PoolState) -> Result<Vec<(ImageId, f64)>, BaselineError> {
    unlabeled_ids(pool)
        .into_iter()
        .map(|id| {
            let preds = &pool.image(id).expect("listed image exists").predictions;
            if preds.is_empty() {
                return Ok((id, 0.0));
            }
            let mut total = 0.0;
            for p in preds {
                total += object_entropy(&p.class_probs)?;
            }
            Ok((id, total / preds.len() as f64))
        })
        .collect()
}

/// Unlabeled images by mean entropy, descending; ties by image id.
pub fn entropy_order(pool: &PoolState) -> Result<Vec<ImageId>, BaselineError> {
    let mut scores = image_entropy_scores(pool)?;
    scores.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(scores.into_iter().map(|(id, _)| id).collect())
}

pub fn entropy_images(
    pool: &PoolState,
    object_count: impl Fn(ImageId) -> u64,
    object_budget: u64,
    rule: ImageBudgetRule,
) -> Result<ImageSelection, BaselineError> {
    Ok(take_images_by_budget(&entropy_order(pool)?, object_count, object_budget, rule))
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// k-center greedy: repeatedly picks the unlabeled point farthest from its
/// nearest labeled or already picked point. Ties go to the lower image id.
pub fn coreset_greedy(
    labeled: &[ImageFeature],
    unlabeled: &[ImageFeature],
    k: usize,
) -> Result<Vec<ImageId>, BaselineError> {
    let dim = labeled.first().or(unlabeled.first()).map_or(0, |f| f.vector.len());
    for f in labeled.iter().chain(unlabeled) {
        if f.vector.len() != dim {
            return Err(BaselineError::DimensionMismatch { image_id: f.image_id, expected: dim, found: f.vector.len() });
        }
    }
    let mut pts: Vec<&ImageFeature> = unlabeled.iter().collect();
    pts.sort_by_key(|f| f.image_id);
    let mut nearest: Vec<f64> = pts
        .iter()
        .map(|p| labeled.iter().map(|l| euclidean(&p.vector, &l.vector)).fold(f64::INFINITY, f64::min))
        .collect();
    let mut picked = vec![false; pts.len()];
    let mut out = Vec::with_capacity(k.min(pts.len()));
    while out.len() < k {
        let mut best: Option<usize> = None;
        for j in 0..pts.len() {
            if picked[j] {
                continue;
            }
            // strict comparison keeps the lowest id on ties
            if best.is_none_or(|b| nearest[j] > nearest[b]) {
                best = Some(j);
            }
        }
        let Some(b) = best else { break };
        picked[b] = true;
        out.push(pts[b].image_id);
        for j in 0..pts.len() {
            if !picked[j] {
                nearest[j] = nearest[j].min(euclidean(&pts[j].vector, &pts[b].vector));
            }
        }
    }
    Ok(out)
}

/// Coreset order over the pool's unlabeled images, labeled images as fixed centers.
pub fn coreset_order(pool: &PoolState, features: &[ImageFeature]) -> Result<Vec<ImageId>, BaselineError> {
    let status = |id: ImageId| pool.image(id).map(|r| r.status);
    let labeled: Vec<ImageFeature> =
        features.iter().filter(|f| status(f.image_id) == Some(ImageStatus::FullyLabeled)).cloned().collect();
    let unlabeled: Vec<ImageFeature> =
        features.iter().filter(|f| status(f.image_id) == Some(ImageStatus::Unlabeled)).cloned().collect();
    coreset_greedy(&labeled, &unlabeled, unlabeled.len())
}

pub fn coreset_images(
    pool: &PoolState,
    features: &[ImageFeature],
    object_count: impl Fn(ImageId) -> u64,
    object_budget: u64,
    rule: ImageBudgetRule,
) -> Result<ImageSelection, BaselineError> {
    Ok(take_images_by_budget(&coreset_order(pool, features)?, object_count, object_budget, rule))
}
