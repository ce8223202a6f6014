//! Readers and writers for the on-disk formats.
//!
//! * DOTA annotation text: optional `imagesource:` / `gsd:` header lines,
//!   then one object per line: `x1 y1 x2 y2 x3 y3 x4 y4 category difficult`.
//! * Predictions JSONL: one object per line with `image_id`, `box`
//!   (`cx, cy, w, h, angle`), `class_probs`, `background_score` and an
//!   optional `feature` vector. Prediction ids are the 0-based line index
//!   among non-blank lines.
//! * Query results JSONL and image features JSONL (`image_id`, `vector`).
//! * Cycle report CSV with a fixed header.
//!
//! Floats are written in the shortest form that parses back to the same
//! bits (at most 17 significant digits).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{CycleReport, GroundTruthObject, ImageId, Prediction, QueryResult};
use crate::geometry::{min_area_rect, quad_is_simple, shoelace, RotatedBox};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: unknown class '{name}'")]
    UnknownClass { line: usize, name: String },
    #[error("line {line}: probabilities sum to {sum}, outside [0.5, 1.5]")]
    Calibration { line: usize, sum: f64 },
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

impl IngestError {
    pub fn line(&self) -> Option<usize> {
        match self {
            IngestError::Parse { line, .. }
            | IngestError::UnknownClass { line, .. }
            | IngestError::Calibration { line, .. } => Some(*line),
            IngestError::Io(_) => None,
        }
    }
}

fn parse_err(line: usize, message: impl Into<String>) -> IngestError {
    IngestError::Parse { line, message: message.into() }
}

/// One object line of a DOTA annotation file.
#[derive(Debug, Clone, PartialEq)]
pub struct DotaAnnotation {
    pub quad: [f64; 8],
    pub category: String,
    pub difficult: u8,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DotaFile {
    pub image_source: Option<String>,
    pub gsd: Option<String>,
    pub objects: Vec<DotaAnnotation>,
}

/// Tokenizes a DOTA annotation file without interpreting categories.
pub fn parse_dota(text: &str) -> Result<DotaFile, IngestError> {
    let mut file = DotaFile::default();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim_matches(|c: char| c.is_ascii_whitespace());
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("imagesource") {
            file.image_source = Some(rest.strip_prefix(':').unwrap_or(rest).to_string());
            continue;
        }
        if let Some(rest) = line.strip_prefix("gsd") {
            file.gsd = Some(rest.strip_prefix(':').unwrap_or(rest).to_string());
            continue;
        }
        let tokens: Vec<&str> = line.split_ascii_whitespace().collect();
        if tokens.len() != 10 {
            return Err(parse_err(line_no, format!("expected 10 tokens, found {}", tokens.len())));
        }
        let mut quad = [0.0; 8];
        for (slot, tok) in quad.iter_mut().zip(&tokens[..8]) {
            let v: f64 = tok.parse().map_err(|_| parse_err(line_no, format!("non-numeric coordinate '{tok}'")))?;
            if !v.is_finite() {
                return Err(parse_err(line_no, format!("non-finite coordinate '{tok}'")));
            }
            *slot = v;
        }
        let difficult: u8 = tokens[9]
            .parse()
            .map_err(|_| parse_err(line_no, format!("difficult flag '{}' is not an integer", tokens[9])))?;
        file.objects.push(DotaAnnotation { quad, category: tokens[8].to_string(), difficult });
    }
    Ok(file)
}

pub fn write_dota(file: &DotaFile) -> String {
    let mut out = String::new();
    if let Some(s) = &file.image_source {
        out.push_str(&format!("imagesource:{s}\n"));
    }
    if let Some(g) = &file.gsd {
        out.push_str(&format!("gsd:{g}\n"));
    }
    for a in &file.objects {
        for v in a.quad {
            out.push_str(&format!("{v} "));
        }
        out.push_str(&format!("{} {}\n", a.category, a.difficult));
    }
    out
}

fn quad_points(q: &[f64; 8]) -> [[f64; 2]; 4] {
    [[q[0], q[1]], [q[2], q[3]], [q[4], q[5]], [q[6], q[7]]]
}

/// Parses a DOTA file into ground-truth objects. Boxes are the
/// minimum-area rectangles enclosing each quad; `gt_id` is the object's
/// position in the file.
pub fn parse_dota_file(text: &str, class_list: &[String]) -> Result<Vec<GroundTruthObject>, IngestError> {
    if class_list.is_empty() {
        return Err(parse_err(0, "empty class list"));
    }
    let mut objects = Vec::new();
    // Line numbers are recovered by re-scanning so errors point at the source line.
    let data_lines: Vec<usize> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| {
            let t = l.trim_matches(|c: char| c.is_ascii_whitespace());
            !t.is_empty() && !t.starts_with("imagesource") && !t.starts_with("gsd")
        })
        .map(|(i, _)| i + 1)
        .collect();
    let file = parse_dota(text)?;
    for (i, a) in file.objects.iter().enumerate() {
        let line = data_lines[i];
        let class_id = class_list
            .iter()
            .position(|c| *c == a.category)
            .ok_or_else(|| IngestError::UnknownClass { line, name: a.category.clone() })?;
        let pts = quad_points(&a.quad);
        if !quad_is_simple(&pts) {
            return Err(parse_err(line, "self-intersecting quadrilateral"));
        }
        if shoelace(&pts).abs() <= 0.0 {
            return Err(parse_err(line, "degenerate quadrilateral"));
        }
        let bbox = min_area_rect(&pts).map_err(|e| parse_err(line, e.to_string()))?;
        objects.push(GroundTruthObject {
            gt_id: i as u32,
            class_id,
            bbox,
            difficult: a.difficult != 0,
            labeled: false,
        });
    }
    Ok(objects)
}

/// DOTA line for a ground-truth object (box corners in order).
pub fn annotation_from_object(obj: &GroundTruthObject, class_list: &[String]) -> DotaAnnotation {
    let c = obj.bbox.corners();
    DotaAnnotation {
        quad: [c[0][0], c[0][1], c[1][0], c[1][1], c[2][0], c[2][1], c[3][0], c[3][1]],
        category: class_list[obj.class_id].clone(),
        difficult: u8::from(obj.difficult),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PredictionRecord {
    image_id: ImageId,
    #[serde(rename = "box")]
    bbox: RotatedBox,
    class_probs: Vec<f64>,
    background_score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    feature: Option<Vec<f64>>,
}

/// Reads predictions JSONL, renormalizing each record so that class
/// probabilities and background score sum to one.
pub fn load_predictions(text: &str) -> Result<Vec<Prediction>, IngestError> {
    let mut out = Vec::new();
    let mut width: Option<usize> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let rec: PredictionRecord =
            serde_json::from_str(raw).map_err(|e| parse_err(line, format!("malformed record: {e}")))?;
        if rec.class_probs.len() < 2 {
            return Err(parse_err(line, "need at least 2 class probabilities"));
        }
        if let Some(w) = width {
            if w != rec.class_probs.len() {
                return Err(parse_err(line, format!("{} class probabilities, expected {w}", rec.class_probs.len())));
            }
        }
        width = Some(rec.class_probs.len());
        let values = rec.class_probs.iter().chain(std::iter::once(&rec.background_score));
        if values.clone().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(parse_err(line, "probabilities must be finite and non-negative"));
        }
        if let Some(f) = &rec.feature {
            if f.iter().any(|v| !v.is_finite()) {
                return Err(parse_err(line, "non-finite feature value"));
            }
        }
        let sum: f64 = values.sum();
        if !(0.5..=1.5).contains(&sum) {
            return Err(IngestError::Calibration { line, sum });
        }
        let (class_probs, background_score) = if (sum - 1.0).abs() <= 1e-9 {
            (rec.class_probs, rec.background_score)
        } else {
            (rec.class_probs.iter().map(|p| p / sum).collect(), rec.background_score / sum)
        };
        out.push(Prediction {
            pred_id: out.len() as u64,
            image_id: rec.image_id,
            bbox: rec.bbox,
            class_probs,
            background_score,
            feature: rec.feature,
        });
    }
    Ok(out)
}

/// Writes predictions JSONL. Ids are implied by line order, so callers
/// should pass predictions sorted by `pred_id` starting at 0.
pub fn write_predictions(preds: &[Prediction]) -> String {
    let mut out = String::new();
    for p in preds {
        let rec = PredictionRecord {
            image_id: p.image_id,
            bbox: p.bbox,
            class_probs: p.class_probs.clone(),
            background_score: p.background_score,
            feature: p.feature.clone(),
        };
        out.push_str(&serde_json::to_string(&rec).expect("prediction serializes"));
        out.push('\n');
    }
    out
}

pub fn write_query_results(results: &[QueryResult]) -> String {
    write_jsonl(results)
}

pub fn read_query_results(text: &str) -> Result<Vec<QueryResult>, IngestError> {
    read_jsonl(text)
}

/// Externally supplied per-image feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageFeature {
    pub image_id: ImageId,
    pub vector: Vec<f64>,
}

pub fn write_features(features: &[ImageFeature]) -> String {
    write_jsonl(features)
}

pub fn read_features(text: &str) -> Result<Vec<ImageFeature>, IngestError> {
    let feats: Vec<(usize, ImageFeature)> = read_jsonl_numbered(text)?;
    let dim = feats.first().map(|(_, f)| f.vector.len());
    for (line, f) in &feats {
        if Some(f.vector.len()) != dim {
            return Err(parse_err(*line, "feature dimension differs from first record"));
        }
        if f.vector.iter().any(|v| !v.is_finite()) {
            return Err(parse_err(*line, "non-finite feature value"));
        }
    }
    Ok(feats.into_iter().map(|(_, f)| f).collect())
}

fn write_jsonl<T: Serialize>(records: &[T]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<T>, IngestError> {
    Ok(read_jsonl_numbered(text)?.into_iter().map(|(_, r)| r).collect())
}

/// Records paired with their 1-based source line.
fn read_jsonl_numbered<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<(usize, T)>, IngestError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map(|r| (i + 1, r)).map_err(|e| parse_err(i + 1, format!("malformed record: {e}")))
        })
        .collect()
}

const NA: &str = "NA";

fn opt_f64(v: Option<f64>) -> String {
    v.map_or_else(|| NA.to_string(), |x| format!("{x}"))
}

/// Header row for reports with `num_classes` classes.
pub fn report_header(num_classes: usize) -> String {
    let mut cols: Vec<String> = [
        "strategy",
        "seed",
        "cycle",
        "budget",
        "spent",
        "unspent",
        "overshoot",
        "matched",
        "background",
        "kl_to_uniform",
        "phi_min",
        "phi_median",
        "phi_max",
        "macro_recall",
        "open_candidates_left",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for prefix in ["queried", "budget", "taken", "recall"] {
        cols.extend((0..num_classes).map(|k| format!("{prefix}_{k}")));
    }
    cols.push("config_digest".into());
    cols.join(",")
}

fn report_row(r: &CycleReport) -> String {
    let mut cols = vec![
        r.strategy.clone(),
        r.seed.to_string(),
        r.cycle.to_string(),
        r.budget.to_string(),
        r.spent.to_string(),
        r.unspent.to_string(),
        r.overshoot.to_string(),
        r.matched.to_string(),
        r.background.to_string(),
        opt_f64(r.kl_to_uniform),
        opt_f64(r.phi_min),
        opt_f64(r.phi_median),
        opt_f64(r.phi_max),
        opt_f64(r.macro_recall),
        r.open_candidates_left.to_string(),
    ];
    let c = r.queried.len();
    cols.extend(r.queried.iter().map(u64::to_string));
    match &r.class_budget {
        Some(b) => cols.extend(b.iter().map(u64::to_string)),
        None => cols.extend((0..c).map(|_| NA.to_string())),
    }
    cols.extend(r.taken.iter().map(u64::to_string));
    cols.extend(r.recall.iter().map(|v| opt_f64(*v)));
    cols.push(r.config_digest.clone());
    cols.join(",")
}

/// CSV with header; empty input gives empty output.
pub fn write_cycle_reports(reports: &[CycleReport]) -> String {
    let Some(first) = reports.first() else {
        return String::new();
    };
    let mut out = report_header(first.queried.len());
    out.push('\n');
    for r in reports {
        out.push_str(&report_row(r));
        out.push('\n');
    }
    out
}

pub fn read_cycle_reports(text: &str) -> Result<Vec<CycleReport>, IngestError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let Some((_, header)) = lines.next() else {
        return Ok(Vec::new());
    };
    let num_classes = header.split(',').filter(|c| c.starts_with("queried_")).count();
    if header != report_header(num_classes) {
        return Err(parse_err(1, "unexpected report header"));
    }
    let expected = 16 + 4 * num_classes;
    lines
        .map(|(i, l)| {
            let line = i + 1;
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != expected {
                return Err(parse_err(line, format!("expected {expected} fields, found {}", f.len())));
            }
            let int = |s: &str| s.parse::<u64>().map_err(|_| parse_err(line, format!("bad integer '{s}'")));
            let opt = |s: &str| -> Result<Option<f64>, IngestError> {
                if s == NA {
                    Ok(None)
                } else {
                    s.parse::<f64>().map(Some).map_err(|_| parse_err(line, format!("bad number '{s}'")))
                }
            };
            let block = |b: usize| &f[15 + b * num_classes..15 + (b + 1) * num_classes];
            let budget_cols = block(1);
            let class_budget = if budget_cols.iter().all(|s| *s == NA) {
                None
            } else {
                Some(budget_cols.iter().map(|s| int(s)).collect::<Result<Vec<_>, _>>()?)
            };
            Ok(CycleReport {
                strategy: f[0].to_string(),
                seed: int(f[1])?,
                cycle: int(f[2])? as u32,
                budget: int(f[3])?,
                spent: int(f[4])?,
                unspent: int(f[5])?,
                overshoot: int(f[6])?,
                matched: int(f[7])?,
                background: int(f[8])?,
                kl_to_uniform: opt(f[9])?,
                phi_min: opt(f[10])?,
                phi_median: opt(f[11])?,
                phi_max: opt(f[12])?,
                macro_recall: opt(f[13])?,
                open_candidates_left: int(f[14])?,
                queried: block(0).iter().map(|s| int(s)).collect::<Result<_, _>>()?,
                class_budget,
                taken: block(2).iter().map(|s| int(s)).collect::<Result<_, _>>()?,
                recall: block(3).iter().map(|s| opt(s)).collect::<Result<_, _>>()?,
                config_digest: f[expected - 1].to_string(),
            })
        })
        .collect()
}
