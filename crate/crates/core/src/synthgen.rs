//! Seeded generator of long-tailed scenes, class-conditional object
//! features and noisy detector output.
//!
//! Every image draws from its own ChaCha stream selected by image id, so
//! scenes come out the same whatever order (or thread) generates them.

use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_2;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::datamodel::{GroundTruthObject, GtId, ImageId, LabeledObject, Oracle, PoolError, PoolState, Prediction};
use crate::geometry::{rotated_iou, RotatedBox};
use crate::ingest::{annotation_from_object, write_dota, write_features, write_predictions, DotaFile, ImageFeature};

/// Maximum pairwise IoU between placed objects.
pub const PLACEMENT_IOU: f64 = 0.3;
/// Rejected placements allowed per object before giving up.
pub const MAX_PLACEMENT_TRIES: usize = 1000;

#[derive(Debug, Error)]
pub enum GenError {
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("image {image_id}: could not place object {object} after {MAX_PLACEMENT_TRIES} tries (scene too dense)")]
    SceneTooDense { image_id: ImageId, object: usize },
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// Softmax temperature of class scores; 0 gives hard one-hot output.
    pub prob_temperature: f64,
    /// Score added to the (possibly confused) predicted class.
    pub true_class_boost: f64,
    /// Standard deviation of Gaussian score noise.
    pub logit_sigma: f64,
    pub confusion_rate: f64,
    /// Standard deviation (pixels) of center and size jitter.
    pub box_jitter_sigma: f64,
    /// Expected false positives per image (Poisson).
    pub false_positive_rate: f64,
    pub miss_rate: f64,
    /// Background scores of true detections are uniform on `[0, true_bg_max]`.
    pub true_bg_max: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            prob_temperature: 1.0,
            true_class_boost: 5.0,
            logit_sigma: 1.0,
            confusion_rate: 0.05,
            box_jitter_sigma: 1.0,
            false_positive_rate: 0.1,
            miss_rate: 0.0,
            true_bg_max: 0.3,
        }
    }
}

impl NoiseConfig {
    /// Noise-free detector: exact boxes, one-hot probabilities, no misses.
    pub fn noiseless() -> Self {
        Self {
            prob_temperature: 0.0,
            true_class_boost: 5.0,
            logit_sigma: 0.0,
            confusion_rate: 0.0,
            box_jitter_sigma: 0.0,
            false_positive_rate: 0.0,
            miss_rate: 0.0,
            true_bg_max: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), GenError> {
        let bad = |m: &str| Err(GenError::Config(m.into()));
        let finite = [
            self.prob_temperature,
            self.true_class_boost,
            self.logit_sigma,
            self.box_jitter_sigma,
            self.false_positive_rate,
            self.true_bg_max,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return bad("noise parameters must be finite");
        }
        if self.prob_temperature < 0.0 || self.logit_sigma < 0.0 || self.box_jitter_sigma < 0.0 {
            return bad("temperature and sigmas must be non-negative");
        }
        if !(0.0..1.0).contains(&self.confusion_rate) || !(0.0..=1.0).contains(&self.miss_rate) {
            return bad("confusion_rate must be in [0, 1) and miss_rate in [0, 1]");
        }
        if self.false_positive_rate < 0.0 || !(0.0..=0.5).contains(&self.true_bg_max) {
            return bad("false_positive_rate must be >= 0 and true_bg_max in [0, 0.5]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub num_classes: usize,
    pub num_images: u64,
    pub objects_per_image: (usize, usize),
    /// Class `k` is drawn with weight `(k + 1)^-s`.
    pub class_frequency_exponent: f64,
    pub scene_size: f64,
    /// Side lengths are uniform on this range.
    pub box_size_range: (f64, f64),
    pub noise: NoiseConfig,
    pub feature_dim: usize,
    /// Distance between any two class means.
    pub feature_separation: f64,
    pub initial_labeled_fraction: f64,
    /// Evaluation examples drawn per class.
    pub heldout_per_class: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            num_classes: 8,
            num_images: 400,
            objects_per_image: (5, 20),
            class_frequency_exponent: 1.5,
            scene_size: 800.0,
            box_size_range: (16.0, 48.0),
            noise: NoiseConfig::default(),
            feature_dim: 8,
            feature_separation: 3.0,
            initial_labeled_fraction: 0.05,
            heldout_per_class: 50,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), GenError> {
        let bad = |m: String| Err(GenError::Config(m));
        if self.num_classes < 2 {
            return bad(format!("num_classes = {}, need at least 2", self.num_classes));
        }
        let (lo, hi) = self.objects_per_image;
        if lo > hi {
            return bad(format!("objects_per_image ({lo}, {hi}) is empty"));
        }
        if !self.class_frequency_exponent.is_finite() || self.class_frequency_exponent < 0.0 {
            return bad("class_frequency_exponent must be finite and >= 0".into());
        }
        let (smin, smax) = self.box_size_range;
        if !(smin > 0.0 && smin <= smax && smax.is_finite()) {
            return bad(format!("box_size_range ({smin}, {smax}) invalid"));
        }
        if !(self.scene_size.is_finite() && self.scene_size > smax) {
            return bad("scene_size must exceed the largest box side".into());
        }
        if self.feature_dim == 0 || !self.feature_separation.is_finite() || self.feature_separation < 0.0 {
            return bad("feature_dim must be >= 1 and feature_separation >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.initial_labeled_fraction) {
            return bad("initial_labeled_fraction must be in [0, 1]".into());
        }
        self.noise.validate()
    }

    /// Normalized class frequencies `(k + 1)^-s / Z`.
    pub fn class_frequencies(&self) -> Vec<f64> {
        let w: Vec<f64> = (0..self.num_classes).map(|k| ((k + 1) as f64).powf(-self.class_frequency_exponent)).collect();
        let z: f64 = w.iter().sum();
        w.into_iter().map(|v| v / z).collect()
    }

    /// Class means with pairwise distance `feature_separation`: scaled unit
    /// vectors when `d >= C`, otherwise evenly spaced on the first axis.
    pub fn class_means(&self) -> Vec<Vec<f64>> {
        let (c, d, sep) = (self.num_classes, self.feature_dim, self.feature_separation);
        (0..c)
            .map(|k| {
                let mut m = vec![0.0; d];
                if d >= c {
                    m[k] = sep / 2f64.sqrt();
                } else {
                    m[0] = sep * k as f64;
                }
                m
            })
            .collect()
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.num_classes).map(|k| format!("class{k}")).collect()
    }
}

#[derive(Debug, Clone, Copy)]
enum Purpose {
    Scene = 0,
    Detector = 1,
}

const STREAM_SPLIT: u64 = u64::MAX;
const STREAM_HELDOUT: u64 = u64::MAX - 1;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn image_rng(seed: u64, image_id: ImageId, purpose: Purpose) -> ChaCha8Rng {
    stream_rng(seed, image_id.wrapping_mul(4).wrapping_add(purpose as u64))
}

fn gaussian_vector(rng: &mut ChaCha8Rng, mean: &[f64]) -> Vec<f64> {
    mean.iter().map(|m| m + rng.sample::<f64, _>(StandardNormal)).collect()
}

/// A generated image: ground truth with one feature vector per object.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image_id: ImageId,
    pub objects: Vec<GroundTruthObject>,
    pub features: Vec<Vec<f64>>,
}

pub fn gen_scene(config: &GenConfig, image_id: ImageId, rng: &mut ChaCha8Rng) -> Result<Scene, GenError> {
    let (lo, hi) = config.objects_per_image;
    let count = rng.random_range(lo..=hi);
    let classes = WeightedIndex::new(config.class_frequencies()).map_err(|e| GenError::Config(e.to_string()))?;
    let means = config.class_means();
    let (smin, smax) = config.box_size_range;
    let mut objects: Vec<GroundTruthObject> = Vec::with_capacity(count);
    let mut features = Vec::with_capacity(count);
    for i in 0..count {
        let class_id = classes.sample(rng);
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_TRIES {
            let w = rng.random_range(smin..=smax);
            let h = rng.random_range(smin..=smax);
            let margin = 0.5 * smax;
            let cx = rng.random_range(margin..=config.scene_size - margin);
            let cy = rng.random_range(margin..=config.scene_size - margin);
            let angle = rng.random_range(-FRAC_PI_2..FRAC_PI_2);
            let b = RotatedBox::new(cx, cy, w, h, angle).expect("sampled box is valid");
            if objects.iter().all(|o| rotated_iou(&o.bbox, &b) < PLACEMENT_IOU) {
                placed = Some(b);
                break;
            }
        }
        let bbox = placed.ok_or(GenError::SceneTooDense { image_id, object: i })?;
        objects.push(GroundTruthObject { gt_id: i as GtId, class_id, bbox, difficult: false, labeled: false });
        features.push(gaussian_vector(rng, &means[class_id]));
    }
    Ok(Scene { image_id, objects, features })
}

fn tempered_probs(scores: &[f64], temperature: f64, foreground: f64) -> Vec<f64> {
    if temperature == 0.0 {
        let top = crate::datamodel::argmax(scores);
        return (0..scores.len()).map(|k| if k == top { foreground } else { 0.0 }).collect();
    }
    let scaled: Vec<f64> = scores.iter().map(|s| s / temperature).collect();
    crate::partial_loss::softmax(&scaled).into_iter().map(|p| foreground * p).collect()
}

/// Simulated detector output for one scene. `pred_id`s are left at 0 and
/// assigned by the caller.
pub fn simulate_detector(
    config: &GenConfig,
    scene: &Scene,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Prediction>, GenError> {
    let noise = &config.noise;
    let c = config.num_classes;
    let mut preds = Vec::new();
    for (obj, feature) in scene.objects.iter().zip(&scene.features) {
        if rng.random_bool(noise.miss_rate) {
            continue;
        }
        let b = &obj.bbox;
        let mut jitter = || noise.box_jitter_sigma * rng.sample::<f64, _>(StandardNormal);
        let (dx, dy, dw, dh) = (jitter(), jitter(), jitter(), jitter());
        let da = jitter() / b.w().max(b.h());
        let bbox = RotatedBox::new(b.cx() + dx, b.cy() + dy, (b.w() + dw).max(1.0), (b.h() + dh).max(1.0), b.angle() + da)
            .expect("jittered box is valid");
        let mut boosted = obj.class_id;
        if rng.random_bool(noise.confusion_rate) {
            boosted = (obj.class_id + rng.random_range(1..c)) % c;
        }
        let scores: Vec<f64> = (0..c)
            .map(|k| {
                let base = if k == boosted { noise.true_class_boost } else { 0.0 };
                base + noise.logit_sigma * rng.sample::<f64, _>(StandardNormal)
            })
            .collect();
        let background_score = rng.random::<f64>() * noise.true_bg_max;
        preds.push(Prediction {
            pred_id: 0,
            image_id: scene.image_id,
            bbox,
            class_probs: tempered_probs(&scores, noise.prob_temperature, 1.0 - background_score),
            background_score,
            feature: Some(feature.clone()),
        });
    }
    let n_fp = if noise.false_positive_rate > 0.0 {
        let poisson = Poisson::new(noise.false_positive_rate).map_err(|e| GenError::Config(e.to_string()))?;
        poisson.sample(rng) as usize
    } else {
        0
    };
    let (smin, smax) = config.box_size_range;
    let flat = Normal::new(0.0, 0.3).expect("valid normal");
    for _ in 0..n_fp {
        let margin = 0.5 * smax;
        let bbox = RotatedBox::new(
            rng.random_range(margin..=config.scene_size - margin),
            rng.random_range(margin..=config.scene_size - margin),
            rng.random_range(smin..=smax),
            rng.random_range(smin..=smax),
            rng.random_range(-FRAC_PI_2..FRAC_PI_2),
        )
        .expect("sampled box is valid");
        let scores: Vec<f64> = (0..c).map(|_| flat.sample(rng)).collect();
        let background_score = rng.random_range(0.5..0.95);
        preds.push(Prediction {
            pred_id: 0,
            image_id: scene.image_id,
            bbox,
            class_probs: tempered_probs(&scores, noise.prob_temperature.max(1.0), 1.0 - background_score),
            background_score,
            feature: Some(gaussian_vector(rng, &vec![0.0; config.feature_dim])),
        });
    }
    Ok(preds)
}

/// Generated pool with the data only the simulation knows.
#[derive(Debug, Clone)]
pub struct SyntheticPool {
    pub pool: PoolState,
    pub oracle: Oracle,
    /// Mean object feature per image, for every image in the pool.
    pub image_features: Vec<ImageFeature>,
    pub object_features: BTreeMap<(ImageId, GtId), Vec<f64>>,
    /// Class-balanced evaluation set of `(feature, class)` pairs.
    pub heldout: Vec<(Vec<f64>, usize)>,
}

/// Ids of the images that start fully labeled: `round(fraction * n)` of
/// them, chosen by a seeded shuffle.
pub fn initial_labeled_split(ids: &[ImageId], fraction: f64, seed: u64) -> Vec<ImageId> {
    let mut sorted = ids.to_vec();
    sorted.sort_unstable();
    let k = (fraction * sorted.len() as f64).round() as usize;
    let mut rng = stream_rng(seed, STREAM_SPLIT);
    sorted.shuffle(&mut rng);
    let mut chosen: Vec<ImageId> = sorted.into_iter().take(k).collect();
    chosen.sort_unstable();
    chosen
}

pub fn gen_heldout(config: &GenConfig) -> Vec<(Vec<f64>, usize)> {
    let mut rng = stream_rng(config.seed, STREAM_HELDOUT);
    let means = config.class_means();
    let mut out = Vec::with_capacity(config.num_classes * config.heldout_per_class);
    for (k, m) in means.iter().enumerate() {
        for _ in 0..config.heldout_per_class {
            out.push((gaussian_vector(&mut rng, m), k));
        }
    }
    out
}

pub fn gen_pool(config: &GenConfig) -> Result<SyntheticPool, GenError> {
    config.validate()?;
    let generated: Vec<(Scene, Vec<Prediction>)> = (0..config.num_images)
        .into_par_iter()
        .map(|id| {
            let scene = gen_scene(config, id, &mut image_rng(config.seed, id, Purpose::Scene))?;
            let preds = simulate_detector(config, &scene, &mut image_rng(config.seed, id, Purpose::Detector))?;
            Ok((scene, preds))
        })
        .collect::<Result<_, GenError>>()?;

    let ids: Vec<ImageId> = (0..config.num_images).collect();
    let initial = initial_labeled_split(&ids, config.initial_labeled_fraction, config.seed);
    let mut pool = PoolState::new(config.num_classes)?;
    let mut gts = BTreeMap::new();
    let mut image_features = Vec::with_capacity(generated.len());
    let mut object_features = BTreeMap::new();
    let mut next_pred = 0u64;
    for (mut scene, mut preds) in generated {
        for p in &mut preds {
            p.pred_id = next_pred;
            next_pred += 1;
        }
        let id = scene.image_id;
        let mut mean = vec![0.0; config.feature_dim];
        for f in &scene.features {
            for (m, v) in mean.iter_mut().zip(f) {
                *m += v;
            }
        }
        if !scene.features.is_empty() {
            let n = scene.features.len() as f64;
            mean.iter_mut().for_each(|m| *m /= n);
        }
        image_features.push(ImageFeature { image_id: id, vector: mean });
        for (o, f) in scene.objects.iter().zip(scene.features) {
            object_features.insert((id, o.gt_id), f);
        }
        if initial.binary_search(&id).is_ok() {
            let labels: Vec<LabeledObject> = scene
                .objects
                .iter_mut()
                .map(|o| {
                    o.labeled = true;
                    LabeledObject { gt_id: o.gt_id, class_id: o.class_id, bbox: o.bbox }
                })
                .collect();
            pool.add_fully_labeled(id, preds, labels)?;
        } else {
            pool.add_unlabeled(id, preds)?;
        }
        gts.insert(id, scene.objects);
    }
    Ok(SyntheticPool { pool, oracle: Oracle::new(gts), image_features, object_features, heldout: gen_heldout(config) })
}

impl SyntheticPool {
    /// SHA-256 over everything the generator produced.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        let preds: Vec<Prediction> = self.pool.images().values().flat_map(|r| r.predictions.clone()).collect();
        h.update(write_predictions(&preds));
        h.update(serde_json::to_vec(&self.pool.snapshot()).expect("snapshot serializes"));
        for id in self.oracle.images() {
            h.update(serde_json::to_vec(self.oracle.objects(id)).expect("objects serialize"));
        }
        h.update(write_features(&self.image_features));
        for ((img, gt), f) in &self.object_features {
            h.update(img.to_le_bytes());
            h.update(gt.to_le_bytes());
            for v in f {
                h.update(v.to_le_bytes());
            }
        }
        for (f, k) in &self.heldout {
            h.update((*k as u64).to_le_bytes());
            for v in f {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Writes `labelTxt/<image_id>.txt` (DOTA), `predictions.jsonl`,
    /// `features.jsonl` and `classes.txt` under `dir`.
    pub fn write_to(&self, dir: &Path, class_names: &[String]) -> Result<(), GenError> {
        let labels = dir.join("labelTxt");
        std::fs::create_dir_all(&labels)?;
        for id in self.oracle.images() {
            let objects = self.oracle.objects(id).iter().map(|o| annotation_from_object(o, class_names)).collect();
            let file = DotaFile { image_source: Some("synthetic".into()), gsd: None, objects };
            std::fs::write(labels.join(format!("{id}.txt")), write_dota(&file))?;
        }
        let preds: Vec<Prediction> = self.pool.images().values().flat_map(|r| r.predictions.clone()).collect();
        std::fs::write(dir.join("predictions.jsonl"), write_predictions(&preds))?;
        std::fs::write(dir.join("features.jsonl"), write_features(&self.image_features))?;
        std::fs::write(dir.join("classes.txt"), class_names.join("\n") + "\n")?;
        Ok(())
    }
}
