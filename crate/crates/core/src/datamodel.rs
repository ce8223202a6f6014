//! Pool bookkeeping: the fully labeled, unlabeled and partially labeled
//! image sets, per-class object counts, and the oracle-side ground truth.
//!
//! Strategy code only ever sees [`PoolState`], which holds predictions and
//! labels the learner has already received. Unlabeled ground truth lives in
//! [`Oracle`] and is reachable only through labeling calls.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::RotatedBox;

pub type ImageId = u64;
pub type PredId = u64;
pub type GtId = u32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PoolError {
    #[error("prediction {0} already labeled")]
    DuplicateLabel(PredId),
    #[error("image {0} not found")]
    ImageNotFound(ImageId),
    #[error("prediction {pred_id} does not belong to image {image_id}")]
    UnknownPrediction { image_id: ImageId, pred_id: PredId },
    #[error("image {image_id} is {status:?}; expected {expected}")]
    BadStatus { image_id: ImageId, status: ImageStatus, expected: &'static str },
    #[error("class {class_id} out of range for {num_classes} classes")]
    ClassOutOfRange { class_id: usize, num_classes: usize },
    #[error("image {0} already present")]
    DuplicateImage(ImageId),
    #[error("pool needs at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("snapshot mismatch: {0}")]
    SnapshotMismatch(String),
}

/// A ground-truth object as held by the oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthObject {
    pub gt_id: GtId,
    pub class_id: usize,
    pub bbox: RotatedBox,
    #[serde(default)]
    pub difficult: bool,
    #[serde(default)]
    pub labeled: bool,
}

/// One detector output box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub pred_id: PredId,
    pub image_id: ImageId,
    pub bbox: RotatedBox,
    /// Foreground class probabilities, one entry per class.
    pub class_probs: Vec<f64>,
    pub background_score: f64,
    /// Region feature vector, when the detector exports one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature: Option<Vec<f64>>,
}

impl Prediction {
    pub fn max_confidence(&self) -> f64 {
        self.class_probs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Index of the largest class probability; ties go to the lowest index.
    pub fn argmax_class(&self) -> usize {
        argmax(&self.class_probs)
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (k, &p) in v.iter().enumerate() {
        if p > v[best] {
            best = k;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageStatus {
    FullyLabeled,
    Unlabeled,
    PartiallyLabeled,
}

/// A label the learner holds for one object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledObject {
    pub gt_id: GtId,
    pub class_id: usize,
    pub bbox: RotatedBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryOutcome {
    Matched { gt_id: GtId, class_id: usize, gt_box: RotatedBox },
    Background,
}

/// The oracle's answer to one queried box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub image_id: ImageId,
    pub pred_id: PredId,
    pub outcome: QueryOutcome,
    pub iou_with_gt: f64,
    pub cycle: u32,
    pub cost: u32,
}

impl QueryResult {
    pub fn matched_class(&self) -> Option<usize> {
        match self.outcome {
            QueryOutcome::Matched { class_id, .. } => Some(class_id),
            QueryOutcome::Background => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub status: ImageStatus,
    pub predictions: Vec<Prediction>,
    /// Labels of a fully labeled image. Partial labels live in
    /// [`PoolState::partial_labels`].
    pub labels: Vec<LabeledObject>,
}

/// The learner's view of the data pool.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolState {
    num_classes: usize,
    images: BTreeMap<ImageId, ImageRecord>,
    partial_labels: Vec<QueryResult>,
    class_counts: Vec<u64>,
    consumed: BTreeSet<PredId>,
}

/// Mutable pool state without the (immutable) predictions, used for checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolSnapshot {
    pub statuses: BTreeMap<ImageId, ImageStatus>,
    pub full_labels: BTreeMap<ImageId, Vec<LabeledObject>>,
    pub consumed_pred_ids: Vec<PredId>,
    pub partial_labels: Vec<QueryResult>,
    pub class_counts: Vec<u64>,
}

impl PoolState {
    pub fn new(num_classes: usize) -> Result<Self, PoolError> {
        if num_classes < 2 {
            return Err(PoolError::TooFewClasses(num_classes));
        }
        Ok(Self {
            num_classes,
            images: BTreeMap::new(),
            partial_labels: Vec::new(),
            class_counts: vec![0; num_classes],
            consumed: BTreeSet::new(),
        })
    }

    /// Adds an unlabeled image with its predictions.
    pub fn add_unlabeled(&mut self, image_id: ImageId, predictions: Vec<Prediction>) -> Result<(), PoolError> {
        self.insert(image_id, ImageRecord { status: ImageStatus::Unlabeled, predictions, labels: Vec::new() })
    }

    /// Adds a fully labeled image; its labels count towards the class totals.
    pub fn add_fully_labeled(
        &mut self,
        image_id: ImageId,
        predictions: Vec<Prediction>,
        labels: Vec<LabeledObject>,
    ) -> Result<(), PoolError> {
        for l in &labels {
            self.check_class(l.class_id)?;
        }
        for l in &labels {
            self.class_counts[l.class_id] += 1;
        }
        self.insert(image_id, ImageRecord { status: ImageStatus::FullyLabeled, predictions, labels })
    }

    fn insert(&mut self, image_id: ImageId, record: ImageRecord) -> Result<(), PoolError> {
        if self.images.contains_key(&image_id) {
            return Err(PoolError::DuplicateImage(image_id));
        }
        for p in &record.predictions {
            if p.image_id != image_id {
                return Err(PoolError::UnknownPrediction { image_id, pred_id: p.pred_id });
            }
        }
        self.images.insert(image_id, record);
        Ok(())
    }

    fn check_class(&self, class_id: usize) -> Result<(), PoolError> {
        if class_id >= self.num_classes {
            return Err(PoolError::ClassOutOfRange { class_id, num_classes: self.num_classes });
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn images(&self) -> &BTreeMap<ImageId, ImageRecord> {
        &self.images
    }

    pub fn image(&self, image_id: ImageId) -> Option<&ImageRecord> {
        self.images.get(&image_id)
    }

    pub fn class_counts(&self) -> &[u64] {
        &self.class_counts
    }

    pub fn partial_labels(&self) -> &[QueryResult] {
        &self.partial_labels
    }

    pub fn is_consumed(&self, pred_id: PredId) -> bool {
        self.consumed.contains(&pred_id)
    }

    pub fn ids_with_status(&self, status: ImageStatus) -> impl Iterator<Item = ImageId> + '_ {
        self.images.iter().filter(move |(_, r)| r.status == status).map(|(&id, _)| id)
    }

    /// `(N_L, N_U, N_P)`.
    pub fn set_sizes(&self) -> (usize, usize, usize) {
        let mut sizes = (0, 0, 0);
        for r in self.images.values() {
            match r.status {
                ImageStatus::FullyLabeled => sizes.0 += 1,
                ImageStatus::Unlabeled => sizes.1 += 1,
                ImageStatus::PartiallyLabeled => sizes.2 += 1,
            }
        }
        sizes
    }

    /// Predictions still open for querying, grouped by image: every
    /// unconsumed prediction of an unlabeled or partially labeled image.
    pub fn candidates(&self) -> BTreeMap<ImageId, Vec<&Prediction>> {
        self.images
            .iter()
            .filter(|(_, r)| r.status != ImageStatus::FullyLabeled)
            .map(|(&id, r)| {
                (id, r.predictions.iter().filter(|p| !self.consumed.contains(&p.pred_id)).collect::<Vec<_>>())
            })
            .filter(|(_, preds)| !preds.is_empty())
            .collect()
    }

    /// Boxes of ground truth already returned for an image.
    pub fn labeled_boxes(&self, image_id: ImageId) -> Vec<RotatedBox> {
        let mut boxes: Vec<RotatedBox> = self
            .images
            .get(&image_id)
            .map(|r| r.labels.iter().map(|l| l.bbox).collect())
            .unwrap_or_default();
        boxes.extend(self.partial_labels.iter().filter(|q| q.image_id == image_id).filter_map(|q| {
            match &q.outcome {
                QueryOutcome::Matched { gt_box, .. } => Some(*gt_box),
                QueryOutcome::Background => None,
            }
        }));
        boxes
    }

    /// Counts objects per class over fully labeled images plus matched partial labels.
    pub fn recount_classes(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.num_classes];
        for r in self.images.values().filter(|r| r.status == ImageStatus::FullyLabeled) {
            for l in &r.labels {
                counts[l.class_id] += 1;
            }
        }
        for q in &self.partial_labels {
            if let Some(c) = q.matched_class() {
                counts[c] += 1;
            }
        }
        counts
    }

    /// Records oracle answers. The whole batch is validated before anything
    /// changes, so an error leaves the pool untouched.
    pub fn apply_query_results(&mut self, results: &[QueryResult]) -> Result<(), PoolError> {
        let mut seen = BTreeSet::new();
        for q in results {
            let record = self.images.get(&q.image_id).ok_or(PoolError::ImageNotFound(q.image_id))?;
            if record.status == ImageStatus::FullyLabeled {
                return Err(PoolError::BadStatus {
                    image_id: q.image_id,
                    status: record.status,
                    expected: "unlabeled or partially labeled",
                });
            }
            if !record.predictions.iter().any(|p| p.pred_id == q.pred_id) {
                return Err(PoolError::UnknownPrediction { image_id: q.image_id, pred_id: q.pred_id });
            }
            if self.consumed.contains(&q.pred_id) || !seen.insert(q.pred_id) {
                return Err(PoolError::DuplicateLabel(q.pred_id));
            }
            if let Some(c) = q.matched_class() {
                self.check_class(c)?;
            }
        }
        for q in results {
            self.consumed.insert(q.pred_id);
            if let Some(r) = self.images.get_mut(&q.image_id) {
                r.status = ImageStatus::PartiallyLabeled;
            }
            if let Some(c) = q.matched_class() {
                self.class_counts[c] += 1;
            }
            self.partial_labels.push(q.clone());
        }
        Ok(())
    }

    /// Moves an unlabeled image into the fully labeled set.
    pub fn label_full_image(&mut self, image_id: ImageId, labels: Vec<LabeledObject>) -> Result<(), PoolError> {
        let status = self.images.get(&image_id).ok_or(PoolError::ImageNotFound(image_id))?.status;
        if status != ImageStatus::Unlabeled {
            return Err(PoolError::BadStatus { image_id, status, expected: "unlabeled" });
        }
        for l in &labels {
            self.check_class(l.class_id)?;
        }
        for l in &labels {
            self.class_counts[l.class_id] += 1;
        }
        let record = self.images.get_mut(&image_id).expect("checked above");
        record.status = ImageStatus::FullyLabeled;
        record.labels = labels;
        Ok(())
    }

    pub fn snapshot(&self) -> PoolSnapshot {
        PoolSnapshot {
            statuses: self.images.iter().map(|(&id, r)| (id, r.status)).collect(),
            full_labels: self
                .images
                .iter()
                .filter(|(_, r)| r.status == ImageStatus::FullyLabeled)
                .map(|(&id, r)| (id, r.labels.clone()))
                .collect(),
            consumed_pred_ids: self.consumed.iter().copied().collect(),
            partial_labels: self.partial_labels.clone(),
            class_counts: self.class_counts.clone(),
        }
    }

    /// Replaces the mutable state with a snapshot taken from a pool built
    /// from the same source.
    pub fn restore(&mut self, snap: &PoolSnapshot) -> Result<(), PoolError> {
        if snap.statuses.len() != self.images.len() || snap.statuses.keys().any(|id| !self.images.contains_key(id)) {
            return Err(PoolError::SnapshotMismatch("image sets differ".into()));
        }
        if snap.class_counts.len() != self.num_classes {
            return Err(PoolError::SnapshotMismatch("class count length differs".into()));
        }
        let mut restored = self.clone();
        for (id, record) in restored.images.iter_mut() {
            record.status = snap.statuses[id];
            record.labels = snap.full_labels.get(id).cloned().unwrap_or_default();
        }
        restored.consumed = snap.consumed_pred_ids.iter().copied().collect();
        restored.partial_labels = snap.partial_labels.clone();
        restored.class_counts = snap.class_counts.clone();
        if restored.recount_classes() != restored.class_counts {
            return Err(PoolError::SnapshotMismatch("class counts disagree with labels".into()));
        }
        *self = restored;
        Ok(())
    }
}

/// Ground truth for every image, reachable only through labeling calls.
#[derive(Debug, Clone, PartialEq)]
pub struct Oracle {
    gts: BTreeMap<ImageId, Vec<GroundTruthObject>>,
    exclude_difficult: bool,
}

impl Oracle {
    pub fn new(gts: BTreeMap<ImageId, Vec<GroundTruthObject>>) -> Self {
        Self { gts, exclude_difficult: false }
    }

    /// Difficult objects are never matched by box queries when set.
    pub fn with_exclude_difficult(mut self, exclude: bool) -> Self {
        self.exclude_difficult = exclude;
        self
    }

    pub fn exclude_difficult(&self) -> bool {
        self.exclude_difficult
    }

    pub fn images(&self) -> impl Iterator<Item = ImageId> + '_ {
        self.gts.keys().copied()
    }

    /// Objects of an image that are still eligible for box matching.
    pub fn matchable_mut(&mut self, image_id: ImageId) -> Vec<&mut GroundTruthObject> {
        let exclude = self.exclude_difficult;
        self.gts
            .get_mut(&image_id)
            .map(|v| v.iter_mut().filter(|g| !g.labeled && !(exclude && g.difficult)).collect())
            .unwrap_or_default()
    }

    /// Number of objects an annotator would label when given the whole image.
    pub fn unlabeled_count(&self, image_id: ImageId) -> usize {
        self.gts.get(&image_id).map_or(0, |v| v.iter().filter(|g| !g.labeled).count())
    }

    /// Labels every remaining object of an image.
    pub fn label_image(&mut self, image_id: ImageId) -> Vec<LabeledObject> {
        let Some(objects) = self.gts.get_mut(&image_id) else {
            return Vec::new();
        };
        objects
            .iter_mut()
            .filter(|g| !g.labeled)
            .map(|g| {
                g.labeled = true;
                LabeledObject { gt_id: g.gt_id, class_id: g.class_id, bbox: g.bbox }
            })
            .collect()
    }

    /// Per-class totals over all ground truth, labeled or not.
    pub fn class_totals(&self, num_classes: usize) -> Vec<u64> {
        let mut totals = vec![0u64; num_classes];
        for g in self.gts.values().flatten() {
            if g.class_id < num_classes {
                totals[g.class_id] += 1;
            }
        }
        totals
    }

    pub fn labeled_keys(&self) -> Vec<(ImageId, GtId)> {
        self.gts
            .iter()
            .flat_map(|(&img, v)| v.iter().filter(|g| g.labeled).map(move |g| (img, g.gt_id)))
            .collect()
    }

    /// Resets labeled flags to exactly the given set.
    pub fn restore_labeled(&mut self, keys: &[(ImageId, GtId)]) {
        let set: BTreeSet<_> = keys.iter().copied().collect();
        for (&img, v) in self.gts.iter_mut() {
            for g in v.iter_mut() {
                g.labeled = set.contains(&(img, g.gt_id));
            }
        }
    }

    pub fn objects(&self, image_id: ImageId) -> &[GroundTruthObject] {
        self.gts.get(&image_id).map_or(&[], Vec::as_slice)
    }
}

/// Per-cycle metrics written to the report CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleReport {
    pub strategy: String,
    pub seed: u64,
    pub cycle: u32,
    pub budget: u64,
    pub spent: u64,
    pub unspent: u64,
    pub overshoot: u64,
    pub matched: u64,
    pub background: u64,
    pub kl_to_uniform: Option<f64>,
    pub phi_min: Option<f64>,
    pub phi_median: Option<f64>,
    pub phi_max: Option<f64>,
    pub macro_recall: Option<f64>,
    /// Candidates left unselected whose predicted class still had budget.
    pub open_candidates_left: u64,
    /// Labeled objects per ground-truth class.
    pub queried: Vec<u64>,
    /// Allocated per-class budgets (object-based strategies only).
    pub class_budget: Option<Vec<u64>>,
    /// Charged queries per predicted class.
    pub taken: Vec<u64>,
    pub recall: Vec<Option<f64>>,
    pub config_digest: String,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(cx: f64) -> RotatedBox {
        RotatedBox::new(cx, 0.0, 2.0, 2.0, 0.0).unwrap()
    }

    fn pred(pred_id: PredId, image_id: ImageId) -> Prediction {
        Prediction {
            pred_id,
            image_id,
            bbox: bx(pred_id as f64 * 10.0),
            class_probs: vec![0.5, 0.4],
            background_score: 0.1,
            feature: None,
        }
    }

    fn label(gt_id: GtId, class_id: usize) -> LabeledObject {
        LabeledObject { gt_id, class_id, bbox: bx(gt_id as f64) }
    }

    fn matched(image_id: ImageId, pred_id: PredId, class_id: usize) -> QueryResult {
        QueryResult {
            image_id,
            pred_id,
            outcome: QueryOutcome::Matched { gt_id: 0, class_id, gt_box: bx(0.0) },
            iou_with_gt: 0.9,
            cycle: 0,
            cost: 1,
        }
    }

    fn pool() -> PoolState {
        let mut p = PoolState::new(2).unwrap();
        p.add_fully_labeled(0, vec![], vec![label(0, 0), label(1, 0), label(2, 1)]).unwrap();
        p.add_unlabeled(1, vec![pred(10, 1), pred(11, 1)]).unwrap();
        p.add_unlabeled(2, vec![pred(20, 2)]).unwrap();
        p
    }

    #[test]
    fn recount_empty_and_labeled() {
        assert_eq!(PoolState::new(3).unwrap().recount_classes(), vec![0, 0, 0]);
        let p = pool();
        assert_eq!(p.recount_classes(), vec![2, 1]);
        assert_eq!(p.class_counts(), &[2, 1]);
    }

    #[test]
    fn matched_result_moves_image_and_counts() {
        let mut p = pool();
        p.apply_query_results(&[matched(1, 10, 1)]).unwrap();
        assert_eq!(p.image(1).unwrap().status, ImageStatus::PartiallyLabeled);
        assert_eq!(p.class_counts(), &[2, 2]);
        assert_eq!(p.recount_classes(), vec![2, 2]);
        assert_eq!(p.set_sizes(), (1, 1, 1));
        assert_eq!(p.labeled_boxes(1), vec![bx(0.0)]);
    }

    #[test]
    fn background_result_changes_status_only() {
        let mut p = pool();
        let q = QueryResult { outcome: QueryOutcome::Background, iou_with_gt: 0.0, ..matched(2, 20, 0) };
        p.apply_query_results(&[q]).unwrap();
        assert_eq!(p.image(2).unwrap().status, ImageStatus::PartiallyLabeled);
        assert_eq!(p.class_counts(), &[2, 1]);
        assert!(p.labeled_boxes(2).is_empty());
    }

    #[test]
    fn replay_and_unknown_rejected() {
        let mut p = pool();
        p.apply_query_results(&[matched(1, 10, 1)]).unwrap();
        let before = p.clone();
        assert_eq!(p.apply_query_results(&[matched(1, 10, 1)]), Err(PoolError::DuplicateLabel(10)));
        assert_eq!(p.apply_query_results(&[matched(9, 10, 1)]), Err(PoolError::ImageNotFound(9)));
        assert!(matches!(
            p.apply_query_results(&[matched(1, 20, 1)]),
            Err(PoolError::UnknownPrediction { .. })
        ));
        assert!(matches!(p.apply_query_results(&[matched(0, 1, 1)]), Err(PoolError::BadStatus { .. })));
        // duplicate inside one batch, second element invalid: nothing applied
        assert_eq!(
            p.apply_query_results(&[matched(1, 11, 0), matched(1, 11, 0)]),
            Err(PoolError::DuplicateLabel(11))
        );
        assert_eq!(p, before);
    }

    #[test]
    fn candidates_skip_consumed_and_full_images() {
        let mut p = pool();
        p.apply_query_results(&[matched(1, 10, 1)]).unwrap();
        let c = p.candidates();
        assert_eq!(c.keys().copied().collect::<Vec<_>>(), vec![1, 2]);
        assert_eq!(c[&1].iter().map(|p| p.pred_id).collect::<Vec<_>>(), vec![11]);
    }

    #[test]
    fn full_image_labeling() {
        let mut p = pool();
        p.label_full_image(2, vec![label(5, 1)]).unwrap();
        assert_eq!(p.class_counts(), &[2, 2]);
        assert!(p.label_full_image(2, vec![]).is_err());
        assert_eq!(p.set_sizes(), (2, 1, 0));
    }

    #[test]
    fn snapshot_restore_roundtrip() {
        let mut p = pool();
        let fresh = p.clone();
        p.apply_query_results(&[matched(1, 10, 1)]).unwrap();
        p.label_full_image(2, vec![label(5, 1)]).unwrap();
        let snap = p.snapshot();
        let json = serde_json::to_string(&snap).unwrap();
        let back: PoolSnapshot = serde_json::from_str(&json).unwrap();
        let mut restored = fresh;
        restored.restore(&back).unwrap();
        assert_eq!(restored, p);
    }

    #[test]
    fn oracle_labels_once() {
        let g = |id, c| GroundTruthObject { gt_id: id, class_id: c, bbox: bx(id as f64), difficult: id == 1, labeled: false };
        let mut o = Oracle::new(BTreeMap::from([(7, vec![g(0, 0), g(1, 1)])]));
        assert_eq!(o.unlabeled_count(7), 2);
        assert_eq!(o.clone().with_exclude_difficult(true).matchable_mut(7).len(), 1);
        assert_eq!(o.label_image(7).len(), 2);
        assert!(o.label_image(7).is_empty());
        assert_eq!(o.labeled_keys(), vec![(7, 0), (7, 1)]);
        o.restore_labeled(&[(7, 1)]);
        assert_eq!(o.unlabeled_count(7), 1);
        assert_eq!(o.class_totals(2), vec![1, 1]);
    }
}
