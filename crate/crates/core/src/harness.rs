//! Experiment driver: multi-cycle loops over strategies and seeds,
//! per-cycle reports, checkpoints, the θ sweep and strategy comparison.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::baselines::{
    coreset_order, entropy_order, random_order, take_images_by_budget, BaselineError, ImageBudgetRule,
};
use crate::datamodel::{
    CycleReport, GtId, ImageId, ImageStatus, Oracle, PoolError, PoolSnapshot, PoolState, QueryOutcome,
};
use crate::geometry::rotated_iou;
use crate::ingest::{
    load_predictions, parse_dota_file, read_cycle_reports, read_features, write_cycle_reports, write_query_results,
    IngestError,
};
use crate::sampler::{run_cycle, BudgetMode, SamplerConfig, SamplerError};
use crate::scoring::{ScoringConfig, ScoringError};
use crate::surrogate::{evaluate, train, SurrogateConfig, SurrogateError, SurrogateModel, TrainingExample};
use crate::synthgen::{gen_pool, initial_labeled_split, GenConfig, GenError, SyntheticPool};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Ingest { path: PathBuf, source: IngestError },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
    #[error("histogram is all zero")]
    EmptyHistogram,
    #[error(transparent)]
    Gen(#[from] GenError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Surrogate(#[from] SurrogateError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.to_path_buf(), source }
}

fn read_text(path: &Path) -> Result<String, HarnessError> {
    std::fs::read_to_string(path).map_err(io_err(path))
}

/// Writes through a temporary file so readers never see a partial file.
fn write_atomic(path: &Path, contents: &str) -> Result<(), HarnessError> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents).map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    MusCdb,
    MusOnly,
    CdbOnly,
    Random,
    Entropy,
    Coreset,
}

impl Strategy {
    pub const ALL: [Strategy; 6] =
        [Strategy::MusCdb, Strategy::MusOnly, Strategy::CdbOnly, Strategy::Random, Strategy::Entropy, Strategy::Coreset];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::MusCdb => "mus_cdb",
            Strategy::MusOnly => "mus_only",
            Strategy::CdbOnly => "cdb_only",
            Strategy::Random => "random",
            Strategy::Entropy => "entropy",
            Strategy::Coreset => "coreset",
        }
    }

    /// Whether the strategy queries single objects (as opposed to whole images).
    pub fn is_object_level(self) -> bool {
        matches!(self, Strategy::MusCdb | Strategy::MusOnly | Strategy::CdbOnly)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Where the pool comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PoolSource {
    /// Generated pool; the generator seed is replaced by the run seed.
    Synthetic(GenConfig),
    /// DOTA label files named `<image_id>.txt` plus detector predictions.
    Dota {
        labels_dir: PathBuf,
        classes: Vec<String>,
        predictions: PathBuf,
        #[serde(default)]
        features: Option<PathBuf>,
        #[serde(default = "default_initial_fraction")]
        initial_labeled_fraction: f64,
        #[serde(default)]
        exclude_difficult: bool,
    },
}

fn default_initial_fraction() -> f64 {
    0.05
}

fn default_seeds() -> Vec<u64> {
    (0..20).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub source: PoolSource,
    pub strategy: Strategy,
    pub cycles: u32,
    /// Annotation units per cycle.
    pub budget: u64,
    #[serde(default)]
    pub scoring: ScoringConfig,
    /// `sampler.budget` must be left at 0 or equal `budget`.
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub image_budget_rule: ImageBudgetRule,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub surrogate: SurrogateConfig,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.cycles < 1 {
            return bad("cycles must be >= 1".into());
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if self.sampler.budget != 0 && self.sampler.budget != self.budget {
            return bad(format!("sampler.budget {} conflicts with budget {}", self.sampler.budget, self.budget));
        }
        self.scoring.validate()?;
        self.sampler.validate()?;
        self.surrogate.validate()?;
        match &self.source {
            PoolSource::Synthetic(g) => g.validate()?,
            PoolSource::Dota { classes, initial_labeled_fraction, features, .. } => {
                if classes.len() < 2 {
                    return bad("DOTA source needs at least 2 classes".into());
                }
                if !(0.0..=1.0).contains(initial_labeled_fraction) {
                    return bad("initial_labeled_fraction must be in [0, 1]".into());
                }
                if self.strategy == Strategy::Coreset && features.is_none() {
                    return bad("coreset needs a features file".into());
                }
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        match &self.source {
            PoolSource::Synthetic(g) => g.num_classes,
            PoolSource::Dota { classes, .. } => classes.len(),
        }
    }

    /// Config identity of one seed's run. Output location and the seed list
    /// are excluded so the same run hashes identically wherever it is written.
    pub fn digest(&self, seed: u64) -> String {
        let canonical = ExperimentConfig { out: None, seeds: Vec::new(), ..self.clone() };
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&canonical).expect("config serializes"));
        h.update(b"\nseed=");
        h.update(seed.to_string());
        hex::encode(h.finalize())
    }

    fn effective_scoring(&self) -> ScoringConfig {
        let mut s = self.scoring;
        if self.strategy == Strategy::CdbOnly {
            s.use_image_term = false;
        }
        s
    }

    fn effective_sampler(&self) -> SamplerConfig {
        SamplerConfig { budget: self.budget, ..self.sampler }
    }
}

/// `Σ p_k ln(C p_k)` over the normalized histogram, with `0 ln 0 = 0`.
pub fn kl_to_uniform(histogram: &[u64]) -> Result<f64, HarnessError> {
    let total: u64 = histogram.iter().sum();
    if total == 0 {
        return Err(HarnessError::EmptyHistogram);
    }
    let c = histogram.len() as f64;
    let kl = histogram
        .iter()
        .filter(|&&n| n > 0)
        .map(|&n| {
            let p = n as f64 / total as f64;
            p * (p * c).ln()
        })
        .sum::<f64>();
    Ok(kl.max(0.0))
}

/// Loads or generates the pool for one seed.
pub fn load_pool(source: &PoolSource, seed: u64) -> Result<SyntheticPool, HarnessError> {
    match source {
        PoolSource::Synthetic(g) => Ok(gen_pool(&GenConfig { seed, ..g.clone() })?),
        PoolSource::Dota { labels_dir, classes, predictions, features, initial_labeled_fraction, exclude_difficult } => {
            let mut gts = BTreeMap::new();
            let entries = std::fs::read_dir(labels_dir).map_err(io_err(labels_dir))?;
            for entry in entries {
                let path = entry.map_err(io_err(labels_dir))?.path();
                if path.extension().and_then(|e| e.to_str()) != Some("txt") {
                    continue;
                }
                let id: ImageId = path
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| HarnessError::Config(format!("{}: file name is not an image id", path.display())))?;
                let objects = parse_dota_file(&read_text(&path)?, classes)
                    .map_err(|source| HarnessError::Ingest { path: path.clone(), source })?;
                gts.insert(id, objects);
            }
            let preds = load_predictions(&read_text(predictions)?)
                .map_err(|source| HarnessError::Ingest { path: predictions.clone(), source })?;
            let mut by_image: BTreeMap<ImageId, Vec<_>> = gts.keys().map(|&id| (id, Vec::new())).collect();
            for p in preds {
                if p.class_probs.len() != classes.len() {
                    return Err(HarnessError::Config(format!(
                        "prediction {} has {} classes, expected {}",
                        p.pred_id,
                        p.class_probs.len(),
                        classes.len()
                    )));
                }
                by_image
                    .get_mut(&p.image_id)
                    .ok_or_else(|| HarnessError::Config(format!("prediction {} refers to unknown image {}", p.pred_id, p.image_id)))?
                    .push(p);
            }
            let ids: Vec<ImageId> = gts.keys().copied().collect();
            let initial = initial_labeled_split(&ids, *initial_labeled_fraction, seed);
            let mut pool = PoolState::new(classes.len())?;
            for (id, preds) in by_image {
                if initial.binary_search(&id).is_ok() {
                    let objects: &mut Vec<_> = gts.get_mut(&id).expect("same keys");
                    let labels = objects
                        .iter_mut()
                        .map(|o| {
                            o.labeled = true;
                            crate::datamodel::LabeledObject { gt_id: o.gt_id, class_id: o.class_id, bbox: o.bbox }
                        })
                        .collect();
                    pool.add_fully_labeled(id, preds, labels)?;
                } else {
                    pool.add_unlabeled(id, preds)?;
                }
            }
            let image_features = match features {
                Some(path) => read_features(&read_text(path)?)
                    .map_err(|source| HarnessError::Ingest { path: path.clone(), source })?,
                None => Vec::new(),
            };
            Ok(SyntheticPool {
                pool,
                oracle: Oracle::new(gts).with_exclude_difficult(*exclude_difficult),
                image_features,
                object_features: BTreeMap::new(),
                heldout: Vec::new(),
            })
        }
    }
}

/// Surrogate training set from the current labels: full labels and matched
/// queries as positives, unmatched predictions of fully labeled images as
/// full-weight negatives, and background queries as negatives weighted by
/// their background score.
pub fn training_examples(data: &SyntheticPool, suppression_iou: f64) -> Vec<TrainingExample> {
    let pool = &data.pool;
    let mut out = Vec::new();
    let object_feature = |img: ImageId, gt: GtId| data.object_features.get(&(img, gt)).cloned();
    for (&id, rec) in pool.images() {
        if rec.status != ImageStatus::FullyLabeled {
            continue;
        }
        for l in &rec.labels {
            if let Some(feature) = object_feature(id, l.gt_id) {
                out.push(TrainingExample {
                    feature,
                    target: Some(l.class_id),
                    from_partial_image: false,
                    background_score: None,
                });
            }
        }
        for p in &rec.predictions {
            let overlaps = rec.labels.iter().any(|l| rotated_iou(&p.bbox, &l.bbox) > suppression_iou);
            if let (false, Some(feature)) = (overlaps, &p.feature) {
                out.push(TrainingExample {
                    feature: feature.clone(),
                    target: None,
                    from_partial_image: false,
                    background_score: None,
                });
            }
        }
    }
    for q in pool.partial_labels() {
        let pred = pool.image(q.image_id).and_then(|r| r.predictions.iter().find(|p| p.pred_id == q.pred_id));
        match (&q.outcome, pred) {
            (QueryOutcome::Matched { gt_id, class_id, .. }, _) => {
                let feature = object_feature(q.image_id, *gt_id).or_else(|| pred.and_then(|p| p.feature.clone()));
                if let Some(feature) = feature {
                    out.push(TrainingExample {
                        feature,
                        target: Some(*class_id),
                        from_partial_image: true,
                        background_score: None,
                    });
                }
            }
            (QueryOutcome::Background, Some(p)) => {
                if let Some(feature) = &p.feature {
                    out.push(TrainingExample {
                        feature: feature.clone(),
                        target: None,
                        from_partial_image: true,
                        background_score: Some(p.background_score),
                    });
                }
            }
            (QueryOutcome::Background, None) => {}
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageLabelRecord {
    pub cycle: u32,
    pub image_id: ImageId,
    pub objects: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Checkpoint {
    config_digest: String,
    seed: u64,
    completed_cycles: u32,
    pool: PoolSnapshot,
    oracle_labeled: Vec<(ImageId, GtId)>,
    reports: Vec<CycleReport>,
    image_log: Vec<ImageLabelRecord>,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Overrides the config's output directory.
    pub out: Option<PathBuf>,
    pub resume: bool,
    /// Stop after this cycle, leaving a checkpoint behind.
    pub stop_after: Option<u32>,
}

#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub reports: Vec<CycleReport>,
    /// Wall time per cycle run in this invocation (not persisted).
    pub wall_times: Vec<Duration>,
    pub completed: bool,
}

fn median(sorted: &[f64]) -> Option<f64> {
    let n = sorted.len();
    match n {
        0 => None,
        _ if n % 2 == 1 => Some(sorted[n / 2]),
        _ => Some(0.5 * (sorted[n / 2 - 1] + sorted[n / 2])),
    }
}

fn surrogate_metrics(
    data: &SyntheticPool,
    config: &ExperimentConfig,
) -> Result<(Option<f64>, Vec<Option<f64>>), HarnessError> {
    let c = config.num_classes();
    let Some((first, _)) = data.heldout.first() else {
        return Ok((None, vec![None; c]));
    };
    let examples = training_examples(data, config.sampler.suppression_iou);
    if examples.is_empty() {
        return Ok((None, vec![None; c]));
    }
    let (model, _) = train(&SurrogateModel::zeros(c, first.len()), &examples, &config.surrogate)?;
    let ev = evaluate(&model, &data.heldout);
    Ok((ev.macro_recall, ev.recall))
}

/// Selection, annotation and pool update of one cycle, without surrogate metrics.
fn query_cycle(
    data: &mut SyntheticPool,
    config: &ExperimentConfig,
    seed: u64,
    cycle: u32,
    image_log: &mut Vec<ImageLabelRecord>,
) -> Result<CycleReport, HarnessError> {
    let c = config.num_classes();
    let budget = config.budget;
    let mut report = CycleReport {
        strategy: config.strategy.name().to_string(),
        seed,
        cycle,
        budget,
        spent: 0,
        unspent: budget,
        overshoot: 0,
        matched: 0,
        background: 0,
        kl_to_uniform: None,
        phi_min: None,
        phi_median: None,
        phi_max: None,
        macro_recall: None,
        open_candidates_left: 0,
        queried: vec![0; c],
        class_budget: None,
        taken: vec![0; c],
        recall: vec![None; c],
        config_digest: config.digest(seed),
    };
    if config.strategy.is_object_level() {
        let mode = if config.strategy == Strategy::MusOnly { BudgetMode::Unlimited } else { BudgetMode::Balanced };
        let outcome = run_cycle(
            &mut data.pool,
            &mut data.oracle,
            &config.effective_scoring(),
            &config.effective_sampler(),
            mode,
            cycle,
        )?;
        for r in &outcome.results {
            match r.matched_class() {
                Some(k) => {
                    report.matched += 1;
                    report.queried[k] += 1;
                }
                None => report.background += 1,
            }
        }
        report.spent = outcome.selection.spent();
        report.unspent = budget - report.spent;
        report.open_candidates_left = outcome.selection.open_candidates_left;
        report.taken = outcome.selection.taken_per_class.clone();
        if mode == BudgetMode::Balanced {
            report.class_budget = Some(outcome.budget.per_class.clone());
        }
        let mut phis: Vec<f64> = outcome.scored.iter().map(|s| s.phi).collect();
        phis.sort_by(f64::total_cmp);
        report.phi_min = phis.first().copied();
        report.phi_max = phis.last().copied();
        report.phi_median = median(&phis);
    } else {
        let order = match config.strategy {
            Strategy::Random => random_order(&data.pool, mix_seed(seed, cycle)),
            Strategy::Entropy => entropy_order(&data.pool)?,
            Strategy::Coreset => coreset_order(&data.pool, &data.image_features)?,
            _ => unreachable!("object-level strategies handled above"),
        };
        let oracle = &data.oracle;
        let sel = take_images_by_budget(&order, |id| oracle.unlabeled_count(id) as u64, budget, config.image_budget_rule);
        for &id in &sel.image_ids {
            let labels = data.oracle.label_image(id);
            for l in &labels {
                report.queried[l.class_id] += 1;
            }
            image_log.push(ImageLabelRecord { cycle, image_id: id, objects: labels.len() as u64 });
            report.matched += labels.len() as u64;
            data.pool.label_full_image(id, labels)?;
        }
        report.taken = report.queried.clone();
        report.spent = sel.objects_charged;
        report.overshoot = sel.overshoot;
        report.unspent = budget.saturating_sub(sel.objects_charged);
        report.open_candidates_left = data.pool.ids_with_status(ImageStatus::Unlabeled).count() as u64;
    }
    report.kl_to_uniform = kl_to_uniform(&report.queried).ok();
    Ok(report)
}

/// SplitMix64 finalizer, used to derive independent per-cycle seeds.
pub fn mix_seed(seed: u64, salt: u32) -> u64 {
    let mut z = seed ^ (u64::from(salt).wrapping_add(1)).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

fn write_artifacts(dir: &Path, data: &SyntheticPool, ckpt: &Checkpoint) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_atomic(&dir.join("reports.csv"), &write_cycle_reports(&ckpt.reports))?;
    write_atomic(&dir.join("queries.jsonl"), &write_query_results(data.pool.partial_labels()))?;
    let mut images = String::new();
    for r in &ckpt.image_log {
        images.push_str(&serde_json::to_string(r).expect("record serializes"));
        images.push('\n');
    }
    write_atomic(&dir.join("images.jsonl"), &images)?;
    write_atomic(&dir.join("checkpoint.json"), &serde_json::to_string(ckpt).expect("checkpoint serializes"))
}

/// Runs every cycle of one seed, resuming from a checkpoint when asked.
pub fn run_seed(config: &ExperimentConfig, seed: u64, opts: &RunOptions) -> Result<SeedRun, HarnessError> {
    config.validate()?;
    let out = opts.out.clone().or_else(|| config.out.clone());
    let dir = out.as_deref().map(|o| seed_dir(o, seed));
    let digest = config.digest(seed);
    let mut data = load_pool(&config.source, seed)?;
    let mut ckpt = Checkpoint {
        config_digest: digest.clone(),
        seed,
        completed_cycles: 0,
        pool: data.pool.snapshot(),
        oracle_labeled: data.oracle.labeled_keys(),
        reports: Vec::new(),
        image_log: Vec::new(),
    };
    if opts.resume {
        let dir = dir.as_ref().ok_or_else(|| HarnessError::Config("--resume needs an output directory".into()))?;
        let path = dir.join("checkpoint.json");
        if path.exists() {
            let saved: Checkpoint = serde_json::from_str(&read_text(&path)?)
                .map_err(|e| HarnessError::CheckpointMismatch(format!("{}: {e}", path.display())))?;
            if saved.config_digest != digest || saved.seed != seed {
                return Err(HarnessError::CheckpointMismatch(format!(
                    "{} was written for a different config or seed",
                    path.display()
                )));
            }
            data.pool.restore(&saved.pool)?;
            data.oracle.restore_labeled(&saved.oracle_labeled);
            ckpt = saved;
        }
    }
    let mut wall_times = Vec::new();
    let mut cycle = ckpt.completed_cycles + 1;
    while cycle <= config.cycles {
        if opts.stop_after.is_some_and(|s| ckpt.completed_cycles >= s) {
            break;
        }
        let start = Instant::now();
        let mut report = query_cycle(&mut data, config, seed, cycle, &mut ckpt.image_log)?;
        let (macro_recall, recall) = surrogate_metrics(&data, config)?;
        report.macro_recall = macro_recall;
        report.recall = recall;
        ckpt.reports.push(report);
        ckpt.completed_cycles = cycle;
        ckpt.pool = data.pool.snapshot();
        ckpt.oracle_labeled = data.oracle.labeled_keys();
        if let Some(dir) = &dir {
            write_artifacts(dir, &data, &ckpt)?;
        }
        wall_times.push(start.elapsed());
        cycle += 1;
    }
    if let Some(dir) = &dir {
        if wall_times.is_empty() {
            write_artifacts(dir, &data, &ckpt)?;
        }
    }
    Ok(SeedRun { seed, completed: ckpt.completed_cycles >= config.cycles, reports: ckpt.reports, wall_times })
}

/// Runs all seeds in parallel. With an output directory, also writes a
/// combined `reports.csv` ordered by seed.
pub fn run_experiment(config: &ExperimentConfig, opts: &RunOptions) -> Result<Vec<SeedRun>, HarnessError> {
    config.validate()?;
    let runs: Vec<SeedRun> =
        config.seeds.par_iter().map(|&s| run_seed(config, s, opts)).collect::<Result<_, HarnessError>>()?;
    if let Some(out) = opts.out.as_ref().or(config.out.as_ref()) {
        let mut all: Vec<CycleReport> = runs.iter().flat_map(|r| r.reports.clone()).collect();
        all.sort_by_key(|r| (r.seed, r.cycle));
        std::fs::create_dir_all(out).map_err(io_err(out))?;
        write_atomic(&out.join("reports.csv"), &write_cycle_reports(&all))?;
    }
    Ok(runs)
}

/// Paper default grid for the image-confidence threshold.
pub const DEFAULT_THETA_GRID: [f64; 3] = [0.05, 0.10, 0.15];

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub theta: f64,
    pub cycle: u32,
    pub seeds: usize,
    pub mean_macro_recall: Option<f64>,
    pub mean_kl_to_uniform: Option<f64>,
    pub mean_background: f64,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Runs the experiment once per θ with the same seeds. Outputs go to
/// `theta_<θ>/` under the output directory, if any.
pub fn theta_sweep(
    config: &ExperimentConfig,
    thetas: &[f64],
    opts: &RunOptions,
) -> Result<(Vec<SweepRow>, BTreeMap<String, Vec<SeedRun>>), HarnessError> {
    if thetas.len() < 2 {
        return Err(HarnessError::Config(format!("theta sweep needs at least 2 values, got {}", thetas.len())));
    }
    let out = opts.out.clone().or_else(|| config.out.clone());
    let mut rows = Vec::new();
    let mut runs = BTreeMap::new();
    for &theta in thetas {
        let cfg = ExperimentConfig { scoring: ScoringConfig { theta, ..config.scoring }, ..config.clone() };
        let sub = RunOptions { out: out.as_ref().map(|o| o.join(format!("theta_{theta}"))), ..opts.clone() };
        let seed_runs = run_experiment(&cfg, &sub)?;
        for cycle in 1..=config.cycles {
            let at: Vec<&CycleReport> =
                seed_runs.iter().flat_map(|r| r.reports.iter()).filter(|r| r.cycle == cycle).collect();
            rows.push(SweepRow {
                theta,
                cycle,
                seeds: at.len(),
                mean_macro_recall: mean(at.iter().filter_map(|r| r.macro_recall)),
                mean_kl_to_uniform: mean(at.iter().filter_map(|r| r.kl_to_uniform)),
                mean_background: mean(at.iter().map(|r| r.background as f64)).unwrap_or(0.0),
            });
        }
        runs.insert(format!("{theta}"), seed_runs);
    }
    if let Some(out) = &out {
        std::fs::create_dir_all(out).map_err(io_err(out))?;
        write_atomic(&out.join("sweep.csv"), &write_sweep_table(&rows))?;
    }
    Ok((rows, runs))
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |x| format!("{x}"))
}

pub fn write_sweep_table(rows: &[SweepRow]) -> String {
    let mut s = String::from("theta,cycle,seeds,mean_macro_recall,mean_kl_to_uniform,mean_background\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.theta,
            r.cycle,
            r.seeds,
            opt(r.mean_macro_recall),
            opt(r.mean_kl_to_uniform),
            r.mean_background
        ));
    }
    s
}

/// Two-sided exact binomial sign test with ties dropped.
pub fn sign_test(wins: u64, losses: u64) -> f64 {
    let n = wins + losses;
    if n == 0 {
        return 1.0;
    }
    let k = wins.min(losses);
    let ln_half_n = n as f64 * 0.5f64.ln();
    let mut ln_choose = 0.0;
    let mut tail = 0.0;
    for i in 0..=k {
        if i > 0 {
            ln_choose += ((n - i + 1) as f64).ln() - (i as f64).ln();
        }
        tail += (ln_choose + ln_half_n).exp();
    }
    (2.0 * tail).min(1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub label: String,
    pub cycle: u32,
    pub seeds: usize,
    pub mean_macro_recall: Option<f64>,
    pub mean_kl_to_uniform: Option<f64>,
    pub mean_spent: f64,
    pub mean_background: f64,
    /// Paired by seed against the first input, on macro recall.
    pub wins: Option<u64>,
    pub losses: Option<u64>,
    pub ties: Option<u64>,
    pub sign_test_p: Option<f64>,
}

/// Reads `reports.csv` from each run directory and tabulates one row per
/// (run, cycle). Runs are labeled by strategy, with the directory name
/// appended when two runs share a strategy.
pub fn compare(dirs: &[PathBuf]) -> Result<Vec<CompareRow>, HarnessError> {
    let mut runs: Vec<(String, Vec<CycleReport>)> = Vec::new();
    for dir in dirs {
        let path = dir.join("reports.csv");
        let reports =
            read_cycle_reports(&read_text(&path)?).map_err(|source| HarnessError::Ingest { path: path.clone(), source })?;
        let strategy = reports.first().map_or_else(|| "empty".to_string(), |r| r.strategy.clone());
        runs.push((strategy, reports));
    }
    let labels: Vec<String> = runs
        .iter()
        .zip(dirs)
        .map(|((s, _), dir)| {
            if runs.iter().filter(|(t, _)| t == s).count() > 1 {
                format!("{s}@{}", dir.file_name().and_then(|n| n.to_str()).unwrap_or("run"))
            } else {
                s.clone()
            }
        })
        .collect();
    let index = |reports: &[CycleReport]| -> BTreeMap<(u32, u64), Option<f64>> {
        reports.iter().map(|r| ((r.cycle, r.seed), r.macro_recall)).collect()
    };
    let reference = runs.first().map(|(_, r)| index(r)).unwrap_or_default();
    let mut rows = Vec::new();
    for (i, ((_, reports), label)) in runs.iter().zip(&labels).enumerate() {
        let mut cycles: Vec<u32> = reports.iter().map(|r| r.cycle).collect();
        cycles.sort_unstable();
        cycles.dedup();
        for cycle in cycles {
            let at: Vec<&CycleReport> = reports.iter().filter(|r| r.cycle == cycle).collect();
            let mut row = CompareRow {
                label: label.clone(),
                cycle,
                seeds: at.len(),
                mean_macro_recall: mean(at.iter().filter_map(|r| r.macro_recall)),
                mean_kl_to_uniform: mean(at.iter().filter_map(|r| r.kl_to_uniform)),
                mean_spent: mean(at.iter().map(|r| r.spent as f64)).unwrap_or(0.0),
                mean_background: mean(at.iter().map(|r| r.background as f64)).unwrap_or(0.0),
                wins: None,
                losses: None,
                ties: None,
                sign_test_p: None,
            };
            if i > 0 {
                let (mut w, mut l, mut t) = (0, 0, 0);
                for r in &at {
                    if let (Some(a), Some(Some(b))) = (r.macro_recall, reference.get(&(cycle, r.seed))) {
                        match a.total_cmp(b) {
                            std::cmp::Ordering::Greater => w += 1,
                            std::cmp::Ordering::Less => l += 1,
                            std::cmp::Ordering::Equal => t += 1,
                        }
                    }
                }
                row.wins = Some(w);
                row.losses = Some(l);
                row.ties = Some(t);
                row.sign_test_p = Some(sign_test(w, l));
            }
            rows.push(row);
        }
    }
    Ok(rows)
}

pub fn write_compare_table(rows: &[CompareRow]) -> String {
    let mut s = String::from(
        "strategy,cycle,seeds,mean_macro_recall,mean_kl_to_uniform,mean_spent,mean_background,wins,losses,ties,sign_test_p\n",
    );
    let int = |v: Option<u64>| v.map_or_else(|| "NA".to_string(), |x| x.to_string());
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.label,
            r.cycle,
            r.seeds,
            opt(r.mean_macro_recall),
            opt(r.mean_kl_to_uniform),
            r.mean_spent,
            r.mean_background,
            int(r.wins),
            int(r.losses),
            int(r.ties),
            opt(r.sign_test_p)
        ));
    }
    s
}
