//! Class distribution balancing: per-class labeling budgets that favor
//! classes with few labeled objects.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassBudget {
    pub per_class: Vec<u64>,
    pub total: u64,
    pub zeta: Vec<f64>,
    pub beta: Vec<f64>,
}

impl ClassBudget {
    /// A budget that never discards a candidate for class reasons: every
    /// class may absorb the whole total.
    pub fn unlimited(num_classes: usize, total: u64) -> Self {
        let uniform = 1.0 / num_classes as f64;
        Self {
            per_class: vec![total; num_classes],
            total,
            zeta: vec![uniform; num_classes],
            beta: vec![uniform; num_classes],
        }
    }
}

/// `beta_k = 1 - counts_k / sum(counts)`; uniform when nothing is labeled yet.
pub fn class_weights(counts: &[u64]) -> Vec<f64> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return vec![1.0; counts.len()];
    }
    counts.iter().map(|&c| 1.0 - c as f64 / total as f64).collect()
}

/// Softmax over the class weights.
pub fn class_preferences(beta: &[f64]) -> Vec<f64> {
    let max = beta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = beta.iter().map(|&b| (b - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Integer budgets from `total * zeta_k` by largest-remainder rounding.
///
/// Leftover units go to the largest fractional parts, ties to the lower class index.
pub fn allocate_budget(zeta: &[f64], total: u64) -> Vec<u64> {
    let quotas: Vec<f64> = zeta.iter().map(|&z| total as f64 * z).collect();
    let mut per_class: Vec<u64> = quotas.iter().map(|q| q.floor().max(0.0) as u64).collect();
    let assigned: u64 = per_class.iter().sum();
    if assigned > total {
        // Only reachable when zeta sums above 1 by rounding; trim from the back.
        let mut excess = assigned - total;
        for slot in per_class.iter_mut().rev() {
            let take = excess.min(*slot);
            *slot -= take;
            excess -= take;
        }
        return per_class;
    }
    let mut order: Vec<usize> = (0..zeta.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let leftover = (total - assigned) as usize;
    for &k in order.iter().cycle().take(leftover) {
        per_class[k] += 1;
    }
    per_class
}

/// Full balancing step from current class counts.
pub fn class_budget(counts: &[u64], total: u64) -> ClassBudget {
    let beta = class_weights(counts);
    let zeta = class_preferences(&beta);
    let per_class = allocate_budget(&zeta, total);
    ClassBudget { per_class, total, zeta, beta }
}
