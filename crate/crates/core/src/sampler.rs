//! One active-learning query cycle: overlap suppression, scoring, budgeted
//! greedy selection and the simulated annotator.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::balancing::{class_budget, ClassBudget};
use crate::datamodel::{GroundTruthObject, ImageId, Oracle, PoolError, PoolState, Prediction, QueryOutcome, QueryResult};
use crate::geometry::{rotated_iou, RotatedBox};
use crate::scoring::{score_candidates, ScoredPrediction, ScoringConfig, ScoringError};

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error("invalid sampler config: {0}")]
    Config(String),
    #[error("prediction {0} not found in pool")]
    MissingPrediction(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub budget: u64,
    /// Predictions overlapping an already labeled box above this IoU are dropped.
    pub suppression_iou: f64,
    /// A query matches ground truth only when the best IoU is strictly above this.
    pub min_match_iou: f64,
    pub charge_background_queries: bool,
    /// After the class-budgeted pass, spend leftover budget ignoring classes.
    pub second_pass_ignore_class: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            budget: 0,
            suppression_iou: 0.5,
            min_match_iou: 0.0,
            charge_background_queries: true,
            second_pass_ignore_class: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        if !(self.suppression_iou > 0.0 && self.suppression_iou <= 1.0) {
            return Err(SamplerError::Config(format!("suppression_iou {} not in (0, 1]", self.suppression_iou)));
        }
        if !(self.min_match_iou >= 0.0 && self.min_match_iou < 1.0) {
            return Err(SamplerError::Config(format!("min_match_iou {} not in [0, 1)", self.min_match_iou)));
        }
        Ok(())
    }
}

/// How per-class budgets are derived each cycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetMode {
    /// Budgets proportional to the class preferences.
    Balanced,
    /// Every class may take the whole budget.
    Unlimited,
}

/// Drops predictions that overlap a labeled box by more than `tau`. Order is preserved.
pub fn suppress_labeled_overlaps<'a>(
    preds: &[&'a Prediction],
    labeled_boxes: &[RotatedBox],
    tau: f64,
) -> Vec<&'a Prediction> {
    preds
        .iter()
        .copied()
        .filter(|p| labeled_boxes.iter().all(|b| rotated_iou(&p.bbox, b) <= tau))
        .collect()
}

/// Candidate order: score descending, then image id, then prediction id.
pub fn selection_order(scored: &[ScoredPrediction]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (&scored[a], &scored[b]);
        y.phi
            .total_cmp(&x.phi)
            .then(x.image_id.cmp(&y.image_id))
            .then(x.pred_id.cmp(&y.pred_id))
    });
    order
}

/// Outcome of one pass of budgeted selection.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    /// Taken candidates in take order, with whether each was charged.
    pub taken: Vec<(ScoredPrediction, bool)>,
    /// Charged queries per predicted class.
    pub taken_per_class: Vec<u64>,
    pub remaining_per_class: Vec<u64>,
    pub remaining_total: u64,
    /// Untaken candidates whose class budget was still open at the end.
    pub open_candidates_left: u64,
}

impl Selection {
    pub fn spent(&self) -> u64 {
        self.taken.iter().filter(|(_, charged)| *charged).count() as u64
    }
}

/// Greedy budgeted selection over scored candidates.
///
/// `query` is called for every taken candidate in order and returns whether
/// the query is charged against the budget.
pub fn select_with<E>(
    scored: &[ScoredPrediction],
    budget: &ClassBudget,
    second_pass_ignore_class: bool,
    mut query: impl FnMut(&ScoredPrediction) -> Result<bool, E>,
) -> Result<Selection, E> {
    let num_classes = budget.per_class.len();
    let mut per_class = budget.per_class.clone();
    let mut remaining = budget.total;
    let mut taken_per_class = vec![0u64; num_classes];
    let mut taken = Vec::new();
    let mut is_taken = vec![false; scored.len()];
    let order = selection_order(scored);

    for &i in &order {
        if remaining == 0 {
            break;
        }
        let cand = &scored[i];
        let c = cand.argmax_class;
        if per_class.get(c).copied().unwrap_or(0) == 0 {
            continue;
        }
        is_taken[i] = true;
        let charged = query(cand)?;
        if charged {
            per_class[c] -= 1;
            remaining -= 1;
            taken_per_class[c] += 1;
        }
        taken.push((cand.clone(), charged));
    }

    if second_pass_ignore_class {
        for &i in &order {
            if remaining == 0 {
                break;
            }
            if is_taken[i] {
                continue;
            }
            let cand = &scored[i];
            is_taken[i] = true;
            let charged = query(cand)?;
            if charged {
                let c = cand.argmax_class;
                per_class[c] = per_class[c].saturating_sub(1);
                remaining -= 1;
                taken_per_class[c] += 1;
            }
            taken.push((cand.clone(), charged));
        }
    }

    let open_candidates_left = order
        .iter()
        .filter(|&&i| !is_taken[i] && per_class.get(scored[i].argmax_class).copied().unwrap_or(0) > 0)
        .count() as u64;
    Ok(Selection { taken, taken_per_class, remaining_per_class: per_class, remaining_total: remaining, open_candidates_left })
}

/// Budgeted selection where every take is charged.
pub fn select_queries(scored: &[ScoredPrediction], budget: &ClassBudget) -> Vec<ScoredPrediction> {
    select_with::<std::convert::Infallible>(scored, budget, false, |_| Ok(true))
        .map(|s| s.taken.into_iter().map(|(c, _)| c).collect())
        .unwrap_or_else(|e| match e {})
}

/// The simulated annotator's rule for one queried box.
///
/// Returns the unlabeled object with the largest IoU (ties to the lowest
/// `gt_id`) when that IoU exceeds `min_match_iou`, flagging it labeled.
/// Otherwise the box is annotated as background. Either way costs one unit.
pub fn oracle_label(
    query: &Prediction,
    gts: &mut [&mut GroundTruthObject],
    min_match_iou: f64,
    cycle: u32,
) -> QueryResult {
    let mut best: Option<(usize, f64)> = None;
    for (i, g) in gts.iter().enumerate() {
        if g.labeled {
            continue;
        }
        let iou = rotated_iou(&query.bbox, &g.bbox);
        let better = match best {
            None => true,
            Some((j, b)) => match iou.total_cmp(&b) {
                Ordering::Greater => true,
                Ordering::Equal => g.gt_id < gts[j].gt_id,
                Ordering::Less => false,
            },
        };
        if better {
            best = Some((i, iou));
        }
    }
    let (outcome, iou_with_gt) = match best {
        Some((i, iou)) if iou > min_match_iou => {
            let g = &mut gts[i];
            g.labeled = true;
            (QueryOutcome::Matched { gt_id: g.gt_id, class_id: g.class_id, gt_box: g.bbox }, iou)
        }
        Some((_, iou)) => (QueryOutcome::Background, iou),
        None => (QueryOutcome::Background, 0.0),
    };
    QueryResult { image_id: query.image_id, pred_id: query.pred_id, outcome, iou_with_gt, cycle, cost: 1 }
}

/// Everything a query cycle produced.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleOutcome {
    pub results: Vec<QueryResult>,
    pub budget: ClassBudget,
    /// All scored candidates after suppression, ordered by `(image_id, pred_id)`.
    pub scored: Vec<ScoredPrediction>,
    pub selection: Selection,
}

/// Open candidates after removing predictions that overlap labeled boxes.
pub fn suppressed_candidates<'a>(pool: &'a PoolState, tau: f64) -> BTreeMap<ImageId, Vec<&'a Prediction>> {
    pool.candidates()
        .into_iter()
        .map(|(img, preds)| {
            let boxes = pool.labeled_boxes(img);
            (img, suppress_labeled_overlaps(&preds, &boxes, tau))
        })
        .filter(|(_, preds)| !preds.is_empty())
        .collect()
}

/// Runs one full object-level query cycle and applies the answers to the pool.
pub fn run_cycle(
    pool: &mut PoolState,
    oracle: &mut Oracle,
    scoring: &ScoringConfig,
    sampler: &SamplerConfig,
    mode: BudgetMode,
    cycle: u32,
) -> Result<CycleOutcome, SamplerError> {
    sampler.validate()?;
    let num_classes = pool.num_classes();
    let budget = match mode {
        BudgetMode::Balanced => class_budget(pool.class_counts(), sampler.budget),
        BudgetMode::Unlimited => ClassBudget::unlimited(num_classes, sampler.budget),
    };
    let candidates = suppressed_candidates(pool, sampler.suppression_iou);
    let scored = if sampler.budget == 0 { Vec::new() } else { score_candidates(&candidates, scoring)? };

    let lookup: BTreeMap<u64, &Prediction> =
        candidates.values().flatten().map(|p| (p.pred_id, *p)).collect();
    let mut results = Vec::new();
    let selection = select_with(&scored, &budget, sampler.second_pass_ignore_class, |cand| {
        let pred = lookup.get(&cand.pred_id).ok_or(SamplerError::MissingPrediction(cand.pred_id))?;
        let mut gts = oracle.matchable_mut(cand.image_id);
        let result = oracle_label(pred, &mut gts, sampler.min_match_iou, cycle);
        let charged = sampler.charge_background_queries || result.matched_class().is_some();
        results.push(result);
        Ok::<bool, SamplerError>(charged)
    })?;
    pool.apply_query_results(&results)?;
    Ok(CycleOutcome { results, budget, scored, selection })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(cx: f64, cy: f64, w: f64, h: f64) -> RotatedBox {
        RotatedBox::new(cx, cy, w, h, 0.0).unwrap()
    }

    fn pred(pred_id: u64, image_id: u64, b: RotatedBox, probs: &[f64]) -> Prediction {
        Prediction {
            pred_id,
            image_id,
            bbox: b,
            class_probs: probs.to_vec(),
            background_score: 1.0 - probs.iter().sum::<f64>(),
            feature: None,
        }
    }

    fn gt(gt_id: u32, class_id: usize, b: RotatedBox) -> GroundTruthObject {
        GroundTruthObject { gt_id, class_id, bbox: b, difficult: false, labeled: false }
    }

    fn sp(image_id: u64, pred_id: u64, phi: f64, cls: usize) -> ScoredPrediction {
        ScoredPrediction { image_id, pred_id, argmax_class: cls, phi_image: 1.0, phi_object: phi, phi }
    }

    fn budget(per_class: Vec<u64>, total: u64) -> ClassBudget {
        let c = per_class.len();
        ClassBudget { per_class, total, zeta: vec![1.0 / c as f64; c], beta: vec![0.0; c] }
    }

    #[test]
    fn suppression_thresholds() {
        let labeled = [bx(0.0, 0.0, 2.0, 2.0)];
        let same = pred(0, 0, bx(0.0, 0.0, 2.0, 2.0), &[0.5, 0.5]);
        let far = pred(1, 0, bx(10.0, 0.0, 2.0, 2.0), &[0.5, 0.5]);
        // shifted by 0.5: inter 1.5*2 = 3, union 5 -> IoU 0.6
        let shifted = pred(2, 0, bx(0.5, 0.0, 2.0, 2.0), &[0.5, 0.5]);
        assert!((rotated_iou(&shifted.bbox, &labeled[0]) - 0.6).abs() < 1e-12);
        let all = [&same, &far, &shifted];
        let kept: Vec<u64> = suppress_labeled_overlaps(&all, &labeled, 0.5).iter().map(|p| p.pred_id).collect();
        assert_eq!(kept, vec![1]);
        let kept: Vec<u64> = suppress_labeled_overlaps(&all, &labeled, 0.7).iter().map(|p| p.pred_id).collect();
        assert_eq!(kept, vec![1, 2]);
    }

    #[test]
    fn class_exhaustion_discards() {
        let scored = [sp(0, 0, 0.9, 0), sp(0, 1, 0.8, 0), sp(1, 2, 0.7, 1)];
        let taken = select_queries(&scored, &budget(vec![1, 1], 2));
        assert_eq!(taken.iter().map(|s| s.pred_id).collect::<Vec<_>>(), vec![0, 2]);
    }

    #[test]
    fn budget_beyond_candidates_leaves_remainder() {
        let scored = [sp(0, 0, 0.9, 0), sp(0, 1, 0.8, 1)];
        let sel = select_with::<()>(&scored, &budget(vec![5, 5], 10), false, |_| Ok(true)).unwrap();
        assert_eq!(sel.taken.len(), 2);
        assert_eq!(sel.remaining_total, 8);
        assert_eq!(sel.open_candidates_left, 0);
    }

    #[test]
    fn ties_break_by_image_then_pred() {
        let scored = [sp(2, 5, 0.5, 0), sp(1, 9, 0.5, 0), sp(1, 3, 0.5, 0)];
        let taken = select_queries(&scored, &budget(vec![3, 0], 3));
        assert_eq!(taken.iter().map(|s| (s.image_id, s.pred_id)).collect::<Vec<_>>(), vec![(1, 3), (1, 9), (2, 5)]);
    }

    #[test]
    fn second_pass_spends_leftover() {
        let scored = [sp(0, 0, 0.9, 0), sp(0, 1, 0.8, 0), sp(0, 2, 0.7, 0)];
        let sel = select_with::<()>(&scored, &budget(vec![1, 2], 3), true, |_| Ok(true)).unwrap();
        assert_eq!(sel.taken.iter().map(|(s, _)| s.pred_id).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert_eq!(sel.remaining_total, 0);
    }

    #[test]
    fn uncharged_queries_do_not_consume_budget() {
        let scored = [sp(0, 0, 0.9, 0), sp(0, 1, 0.8, 0), sp(0, 2, 0.7, 0)];
        let sel = select_with::<()>(&scored, &budget(vec![1, 0], 1), false, |s| Ok(s.pred_id == 2)).unwrap();
        assert_eq!(sel.taken.len(), 3);
        assert_eq!(sel.spent(), 1);
    }

    #[test]
    fn oracle_single_and_best_match() {
        let q = pred(0, 0, bx(0.0, 0.0, 2.0, 2.0), &[0.5, 0.5]);
        let mut one = gt(0, 1, bx(0.1, 0.0, 2.0, 2.0));
        let r = oracle_label(&q, &mut [&mut one], 0.0, 3);
        assert_eq!(r.matched_class(), Some(1));
        assert!(one.labeled);
        assert_eq!((r.cost, r.cycle), (1, 3));

        // IoU 0.6 vs 0.3 (shifted by 0.5 and by ~ 0.9231 respectively)
        let mut a = gt(0, 0, bx(1.0 + 2.0 * (1.0 - 0.3) / 1.3 - 1.0, 0.0, 2.0, 2.0));
        let mut b = gt(1, 1, bx(-0.5, 0.0, 2.0, 2.0));
        let (ia, ib) = (rotated_iou(&q.bbox, &a.bbox), rotated_iou(&q.bbox, &b.bbox));
        assert!((ia - 0.3).abs() < 1e-12 && (ib - 0.6).abs() < 1e-12);
        let r = oracle_label(&q, &mut [&mut a, &mut b], 0.0, 0);
        assert!(matches!(r.outcome, QueryOutcome::Matched { gt_id: 1, class_id: 1, .. }));
        assert!((r.iou_with_gt - 0.6).abs() < 1e-12);
        assert!(!a.labeled && b.labeled);

        let mut far = gt(0, 0, bx(50.0, 0.0, 2.0, 2.0));
        let r = oracle_label(&q, &mut [&mut far], 0.0, 0);
        assert_eq!(r.outcome, QueryOutcome::Background);
        assert_eq!(r.cost, 1);
        assert!(!far.labeled);
    }

    #[test]
    fn oracle_ties_go_to_lowest_gt_id() {
        let q = pred(0, 0, bx(0.0, 0.0, 2.0, 2.0), &[0.5, 0.5]);
        let mut a = gt(4, 0, bx(0.5, 0.0, 2.0, 2.0));
        let mut b = gt(2, 1, bx(-0.5, 0.0, 2.0, 2.0));
        let r = oracle_label(&q, &mut [&mut a, &mut b], 0.0, 0);
        assert!(matches!(r.outcome, QueryOutcome::Matched { gt_id: 2, .. }));
    }

    #[test]
    fn min_match_floor() {
        let q = pred(0, 0, bx(0.0, 0.0, 2.0, 2.0), &[0.5, 0.5]);
        let mut a = gt(0, 0, bx(0.5, 0.0, 2.0, 2.0));
        let r = oracle_label(&q, &mut [&mut a], 0.6, 0);
        assert_eq!(r.outcome, QueryOutcome::Background);
    }

    fn micro_pool() -> (PoolState, Oracle) {
        let mut pool = PoolState::new(2).unwrap();
        let labeled = crate::datamodel::LabeledObject { gt_id: 0, class_id: 0, bbox: bx(0.0, 0.0, 4.0, 4.0) };
        pool.add_fully_labeled(100, vec![], vec![labeled.clone(), crate::datamodel::LabeledObject { gt_id: 1, ..labeled }])
            .unwrap();
        pool.add_unlabeled(
            0,
            vec![
                pred(0, 0, bx(0.0, 0.0, 4.0, 4.0), &[0.6, 0.3]),
                pred(1, 0, bx(20.0, 0.0, 4.0, 4.0), &[0.3, 0.6]),
                pred(2, 0, bx(40.0, 0.0, 4.0, 4.0), &[0.9, 0.05]),
            ],
        )
        .unwrap();
        pool.add_unlabeled(
            1,
            vec![
                pred(3, 1, bx(0.0, 0.0, 4.0, 4.0), &[0.45, 0.45]),
                pred(4, 1, bx(20.0, 0.0, 4.0, 4.0), &[0.2, 0.7]),
                pred(5, 1, bx(60.0, 0.0, 4.0, 4.0), &[0.5, 0.4]),
            ],
        )
        .unwrap();
        let gts = BTreeMap::from([
            (0, vec![gt(0, 0, bx(0.2, 0.0, 4.0, 4.0)), gt(1, 1, bx(20.0, 0.3, 4.0, 4.0))]),
            (1, vec![gt(0, 1, bx(0.0, 0.0, 4.0, 4.0)), gt(1, 1, bx(20.0, 0.0, 4.0, 4.0))]),
            (100, vec![]),
        ]);
        (pool, Oracle::new(gts))
    }

    #[test]
    fn micro_pool_cycle_matches_hand_execution() {
        // counts [2,0] -> beta [0,1] -> zeta [0.268941, 0.731059]; N=3 -> quotas
        // [0.807, 2.193] -> floors [0,2], leftover to class 0 -> [1,2].
        // image 0: max-confs .6,.6,.9 -> phi_I = 1-0.7 = 0.3
        // image 1: max-confs .45,.7,.5 -> phi_I = 1-0.55 = 0.45
        // phi: p0 .3*H(2/3,1/3)=.19095, p1 same .19095, p2 .3*H(.947,.053)=.0618
        //      p3 .45*ln2=.31192, p4 .45*H(.222,.778)=.23844, p5 .45*H(.556,.444)=.30915
        // order: p3(c0) p5(c0) p4(c1) p0(c0) p1(c1) p2(c0)
        // take p3 (c0 budget 1->0), skip p5, take p4 (c1 2->1), skip p0, take p1 (c1 1->0)
        let (mut pool, mut oracle) = micro_pool();
        let cfg = SamplerConfig { budget: 3, ..Default::default() };
        let out = run_cycle(&mut pool, &mut oracle, &ScoringConfig::default(), &cfg, BudgetMode::Balanced, 1).unwrap();
        assert_eq!(out.budget.per_class, vec![1, 2]);
        let ids: Vec<u64> = out.results.iter().map(|r| r.pred_id).collect();
        assert_eq!(ids, vec![3, 4, 1]);
        let classes: Vec<Option<usize>> = out.results.iter().map(|r| r.matched_class()).collect();
        assert_eq!(classes, vec![Some(1), Some(1), Some(1)]);
        assert_eq!(pool.class_counts(), &[2, 3]);
        assert_eq!(pool.recount_classes(), vec![2, 3]);
        assert_eq!(out.selection.spent(), 3);
    }

    #[test]
    fn zero_budget_cycle_is_noop() {
        let (mut pool, mut oracle) = micro_pool();
        let before = pool.clone();
        let out = run_cycle(&mut pool, &mut oracle, &ScoringConfig::default(), &SamplerConfig::default(), BudgetMode::Balanced, 0)
            .unwrap();
        assert!(out.results.is_empty());
        assert_eq!(pool, before);
    }

    #[test]
    fn fully_suppressed_pool_yields_nothing() {
        let mut pool = PoolState::new(2).unwrap();
        pool.add_unlabeled(0, vec![pred(0, 0, bx(0.0, 0.0, 4.0, 4.0), &[0.5, 0.4]), pred(1, 0, bx(0.1, 0.0, 4.0, 4.0), &[0.4, 0.5])])
            .unwrap();
        let mut oracle = Oracle::new(BTreeMap::from([(0, vec![gt(0, 0, bx(0.0, 0.0, 4.0, 4.0))])]));
        let cfg = SamplerConfig { budget: 1, ..Default::default() };
        // first cycle labels the only object
        let out = run_cycle(&mut pool, &mut oracle, &ScoringConfig::default(), &cfg, BudgetMode::Unlimited, 0).unwrap();
        assert_eq!(out.results.len(), 1);
        let out = run_cycle(&mut pool, &mut oracle, &ScoringConfig::default(), &cfg, BudgetMode::Unlimited, 1).unwrap();
        assert!(out.results.is_empty());
    }
}
