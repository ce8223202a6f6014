//! Linear softmax classifier over object features, trained with the
//! partial-label classification loss. Used to compare query strategies
//! end to end without a detector.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::argmax;
use crate::partial_loss::{bbox_loss, bbox_loss_grad, pairwise_sum, LossError, ProposalSample, REG_DIMS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SurrogateError {
    #[error("no training examples")]
    NoExamples,
    #[error("example {index}: {reason}")]
    BadExample { index: usize, reason: String },
    #[error("invalid surrogate config: {0}")]
    Config(String),
    #[error(transparent)]
    Loss(#[from] LossError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurrogateConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub l2: f64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self { steps: 300, learning_rate: 0.1, l2: 1e-3 }
    }
}

impl SurrogateConfig {
    pub fn validate(&self) -> Result<(), SurrogateError> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(SurrogateError::Config(format!("learning_rate {} must be > 0", self.learning_rate)));
        }
        if !(self.l2.is_finite() && self.l2 >= 0.0) {
            return Err(SurrogateError::Config(format!("l2 {} must be >= 0", self.l2)));
        }
        Ok(())
    }
}

/// One training example. `target == None` marks a background region.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub feature: Vec<f64>,
    pub target: Option<usize>,
    pub from_partial_image: bool,
    /// Predicted background score, used as the negative's weight in
    /// partially labeled images.
    pub background_score: Option<f64>,
}

/// `C + 1` rows of weights and biases; the last row scores background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateModel {
    pub num_classes: usize,
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl SurrogateModel {
    pub fn zeros(num_classes: usize, dim: usize) -> Self {
        Self { num_classes, weights: vec![vec![0.0; dim]; num_classes + 1], bias: vec![0.0; num_classes + 1] }
    }

    pub fn dim(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| b + w.iter().zip(x).map(|(a, v)| a * v).sum::<f64>())
            .collect()
    }

    /// Foreground class with the highest logit (background is never predicted).
    pub fn predict(&self, x: &[f64]) -> usize {
        argmax(&self.logits(x)[..self.num_classes])
    }

    fn squared_norm(&self) -> f64 {
        pairwise_sum(&self.weights.iter().flatten().map(|w| w * w).collect::<Vec<_>>())
    }
}

fn to_samples(model: &SurrogateModel, examples: &[TrainingExample]) -> Vec<ProposalSample> {
    let c = model.num_classes;
    examples
        .iter()
        .map(|e| ProposalSample {
            logits: model.logits(&e.feature),
            target_class: e.target.unwrap_or(c),
            is_positive: e.target.is_some(),
            from_partial_image: e.from_partial_image,
            background_score: e.background_score,
            reg_pred: [0.0; REG_DIMS],
            reg_target: [0.0; REG_DIMS],
        })
        .collect()
}

fn validate_examples(model: &SurrogateModel, examples: &[TrainingExample]) -> Result<(), SurrogateError> {
    if examples.is_empty() {
        return Err(SurrogateError::NoExamples);
    }
    for (index, e) in examples.iter().enumerate() {
        let bad = |reason: String| Err(SurrogateError::BadExample { index, reason });
        if e.feature.len() != model.dim() {
            return bad(format!("feature length {} != {}", e.feature.len(), model.dim()));
        }
        if e.feature.iter().any(|v| !v.is_finite()) {
            return bad("non-finite feature".into());
        }
        if e.target.is_some_and(|t| t >= model.num_classes) {
            return bad(format!("target {:?} out of range", e.target));
        }
    }
    Ok(())
}

/// Regularized classification loss of the model on `examples`.
pub fn training_loss(model: &SurrogateModel, examples: &[TrainingExample], l2: f64) -> Result<f64, SurrogateError> {
    validate_examples(model, examples)?;
    let loss = bbox_loss(&to_samples(model, examples))?;
    Ok(loss.cls_loss + 0.5 * l2 * model.squared_norm())
}

/// Gradient of the data term with respect to weights and biases.
pub fn parameter_gradient(
    model: &SurrogateModel,
    examples: &[TrainingExample],
) -> Result<(Vec<Vec<f64>>, Vec<f64>), SurrogateError> {
    validate_examples(model, examples)?;
    let grad = bbox_loss_grad(&to_samples(model, examples))?;
    let rows = model.num_classes + 1;
    let mut gw = vec![vec![0.0; model.dim()]; rows];
    let mut gb = vec![0.0; rows];
    let mut terms = vec![0.0; examples.len()];
    for k in 0..rows {
        for (i, g) in grad.logits.iter().enumerate() {
            terms[i] = g[k];
        }
        gb[k] = pairwise_sum(&terms);
        for j in 0..model.dim() {
            for (i, g) in grad.logits.iter().enumerate() {
                terms[i] = g[k] * examples[i].feature[j];
            }
            gw[k][j] = pairwise_sum(&terms);
        }
    }
    Ok((gw, gb))
}

/// Full-batch gradient descent. Returns the trained model and the loss
/// before every step followed by the final loss.
pub fn train(
    model: &SurrogateModel,
    examples: &[TrainingExample],
    config: &SurrogateConfig,
) -> Result<(SurrogateModel, Vec<f64>), SurrogateError> {
    config.validate()?;
    let mut m = model.clone();
    let mut trace = Vec::with_capacity(config.steps + 1);
    for _ in 0..config.steps {
        trace.push(training_loss(&m, examples, config.l2)?);
        let (gw, gb) = parameter_gradient(&m, examples)?;
        for (row, grow) in m.weights.iter_mut().zip(&gw) {
            for (w, g) in row.iter_mut().zip(grow) {
                *w -= config.learning_rate * (g + config.l2 * *w);
            }
        }
        for (b, g) in m.bias.iter_mut().zip(&gb) {
            *b -= config.learning_rate * g;
        }
    }
    trace.push(training_loss(&m, examples, config.l2)?);
    Ok((m, trace))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Recall per class; `None` when the class has no evaluation examples.
    pub recall: Vec<Option<f64>>,
    /// Mean recall over the classes that are present.
    pub macro_recall: Option<f64>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
}

pub fn evaluate(model: &SurrogateModel, heldout: &[(Vec<f64>, usize)]) -> Evaluation {
    let c = model.num_classes;
    let mut confusion = vec![vec![0u64; c]; c];
    for (x, k) in heldout {
        if *k < c {
            confusion[*k][model.predict(x)] += 1;
        }
    }
    let recall: Vec<Option<f64>> = confusion
        .iter()
        .enumerate()
        .map(|(k, row)| {
            let n: u64 = row.iter().sum();
            (n > 0).then(|| row[k] as f64 / n as f64)
        })
        .collect();
    let present: Vec<f64> = recall.iter().flatten().copied().collect();
    let macro_recall = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
    Evaluation { recall, macro_recall, confusion }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn positive(feature: Vec<f64>, target: usize) -> TrainingExample {
        TrainingExample { feature, target: Some(target), from_partial_image: false, background_score: None }
    }

    fn two_blobs(n: usize, sep: f64, seed: u64) -> Vec<TrainingExample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let k = i % 2;
                let centre = if k == 0 { -sep / 2.0 } else { sep / 2.0 };
                let x = vec![centre + rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal)];
                positive(x, k)
            })
            .collect()
    }

    #[test]
    fn separable_blobs_are_learned() {
        let data = two_blobs(400, 6.0, 1);
        let cfg = SurrogateConfig { steps: 500, ..SurrogateConfig::default() };
        let (m, _) = train(&SurrogateModel::zeros(2, 2), &data, &cfg).unwrap();
        let heldout: Vec<(Vec<f64>, usize)> = data.iter().map(|e| (e.feature.clone(), e.target.unwrap())).collect();
        let right = heldout.iter().filter(|(x, k)| m.predict(x) == *k).count();
        assert!(right as f64 / heldout.len() as f64 > 0.99);
    }

    #[test]
    fn loss_never_rises_over_windows() {
        let mut data = two_blobs(200, 2.0, 2);
        data.push(TrainingExample {
            feature: vec![0.3, -0.2],
            target: None,
            from_partial_image: true,
            background_score: Some(0.7),
        });
        let cfg = SurrogateConfig { steps: 400, ..SurrogateConfig::default() };
        let (_, trace) = train(&SurrogateModel::zeros(2, 2), &data, &cfg).unwrap();
        for t in 0..trace.len() - 50 {
            assert!(trace[t + 50] <= trace[t] + 1e-9);
        }
    }

    #[test]
    fn zero_steps_is_identity() {
        let start = SurrogateModel::zeros(3, 2);
        let cfg = SurrogateConfig { steps: 0, ..SurrogateConfig::default() };
        let (m, trace) = train(&start, &two_blobs(10, 1.0, 0), &cfg).unwrap();
        assert_eq!(m, start);
        assert_eq!(trace.len(), 1);
    }

    #[test]
    fn empty_data_is_an_error() {
        let err = train(&SurrogateModel::zeros(2, 2), &[], &SurrogateConfig::default()).unwrap_err();
        assert_eq!(err, SurrogateError::NoExamples);
    }

    #[test]
    fn duplicated_data_follows_same_trajectory() {
        let data = two_blobs(12, 2.0, 3);
        let doubled: Vec<TrainingExample> = data.iter().chain(&data).cloned().collect();
        let cfg = SurrogateConfig { steps: 50, ..SurrogateConfig::default() };
        let (a, ta) = train(&SurrogateModel::zeros(2, 2), &data, &cfg).unwrap();
        let (b, tb) = train(&SurrogateModel::zeros(2, 2), &doubled, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
    }

    #[test]
    fn full_labels_give_plain_softmax_gradient() {
        let data = two_blobs(9, 1.0, 4);
        let mut m = SurrogateModel::zeros(2, 2);
        m.weights = vec![vec![0.3, -0.1], vec![-0.2, 0.4], vec![0.05, 0.0]];
        m.bias = vec![0.1, -0.3, 0.2];
        let (gw, gb) = parameter_gradient(&m, &data).unwrap();
        let n = data.len() as f64;
        for k in 0..3 {
            let mut want_b = 0.0;
            let mut want_w = [0.0; 2];
            for e in &data {
                let z = m.logits(&e.feature);
                let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = z.iter().map(|v| (v - zmax).exp()).sum();
                let p = (z[k] - zmax).exp() / denom;
                let r = (p - f64::from(u8::from(e.target == Some(k)))) / n;
                want_b += r;
                want_w[0] += r * e.feature[0];
                want_w[1] += r * e.feature[1];
            }
            assert!((gb[k] - want_b).abs() < 1e-14);
            assert!((gw[k][0] - want_w[0]).abs() < 1e-14 && (gw[k][1] - want_w[1]).abs() < 1e-14);
        }
    }

    #[test]
    fn weighted_negative_gradient_scales_with_mu() {
        let m = SurrogateModel { num_classes: 2, weights: vec![vec![0.5], vec![-0.5], vec![0.1]], bias: vec![0.0; 3] };
        let neg = |mu: f64| TrainingExample { feature: vec![1.0], target: None, from_partial_image: true, background_score: Some(mu) };
        let (_, g1) = parameter_gradient(&m, &[neg(1.0)]).unwrap();
        let (_, g4) = parameter_gradient(&m, &[neg(0.25)]).unwrap();
        for k in 0..3 {
            assert!((g4[k] - 0.25 * g1[k]).abs() < 1e-15);
        }
        let (_, g0) = parameter_gradient(&m, &[neg(0.0)]).unwrap();
        assert!(g0.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn evaluation_metrics() {
        // Class 0 scores with +x, class 1 with -x, class 2 never wins.
        let m = SurrogateModel {
            num_classes: 3,
            weights: vec![vec![1.0], vec![-1.0], vec![-5.0], vec![100.0]],
            bias: vec![0.0, 0.0, -10.0, 0.0],
        };
        let heldout = vec![(vec![1.0], 0), (vec![-1.0], 0), (vec![-2.0], 1)];
        let ev = evaluate(&m, &heldout);
        assert_eq!(ev.confusion, vec![vec![1, 1, 0], vec![0, 1, 0], vec![0, 0, 0]]);
        assert_eq!(ev.recall, vec![Some(0.5), Some(1.0), None]);
        assert_eq!(ev.macro_recall, Some(0.75));

        let constant = SurrogateModel::zeros(3, 1);
        let all: Vec<(Vec<f64>, usize)> = (0..3).map(|k| (vec![k as f64], k)).collect();
        assert_eq!(evaluate(&constant, &all).recall, vec![Some(1.0), Some(0.0), Some(0.0)]);
        let perfect = SurrogateModel {
            num_classes: 2,
            weights: vec![vec![-1.0], vec![1.0], vec![0.0]],
            bias: vec![0.0; 3],
        };
        assert_eq!(evaluate(&perfect, &[(vec![-1.0], 0), (vec![1.0], 1)]).recall, vec![Some(1.0), Some(1.0)]);
    }
}
