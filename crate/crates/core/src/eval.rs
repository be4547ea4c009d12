//! Detection metrics: IoU matching, precision/recall with all-points average
//! precision, and recall against false positives per image (FPPI).
//!
//! AP is the area under the interpolated precision-recall curve: curve points
//! are taken after each distinct score (equal scores enter together),
//! precision is replaced by its running maximum from the right, and AP sums
//! `(r_i - r_{i-1}) * p_interp(r_i)` over the points.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::geometry::Rect;
use crate::inference::{detect_many, DetectConfig, Detection};
use crate::model::{AndOrModel, Label};

pub const DETECTIONS_FORMAT: &str = "aotree-detections";
pub const METRICS_FORMAT: &str = "aotree-metrics";

/// Intersection over union; 0 when either box has no area.
pub fn iou(a: &Rect, b: &Rect) -> f64 {
    if !(a.area() > 0.0 && b.area() > 0.0) {
        log::debug!("iou of a zero-area box is taken as 0");
        return 0.0;
    }
    a.iou(b)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MatchResult {
    /// Per detection, in the given order.
    pub tp: Vec<bool>,
    pub gt_matched: Vec<bool>,
}

/// Greedy matching: in the given order (descending score), each detection
/// claims the unmatched ground truth with the highest IoU above `threshold`.
pub fn match_detections(dets: &[Rect], gts: &[Rect], threshold: f64) -> MatchResult {
    let mut gt_matched = vec![false; gts.len()];
    let tp = dets
        .iter()
        .map(|d| {
            let mut best: Option<(f64, usize)> = None;
            for (k, g) in gts.iter().enumerate() {
                let o = iou(d, g);
                if !gt_matched[k] && o > threshold && best.is_none_or(|(b, _)| o > b) {
                    best = Some((o, k));
                }
            }
            if let Some((_, k)) = best {
                gt_matched[k] = true;
            }
            best.is_some()
        })
        .collect();
    MatchResult { tp, gt_matched }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredMatch {
    pub score: f64,
    pub tp: bool,
}

/// Matches accumulated over a set of images.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Evaluation {
    pub matches: Vec<ScoredMatch>,
    pub num_gt: usize,
    pub num_images: usize,
}

impl Evaluation {
    /// Adds one image. Detections are matched in descending score order;
    /// ties keep their given order.
    pub fn add_image(&mut self, dets: &[(Rect, f64)], gts: &[Rect], threshold: f64) {
        let mut order: Vec<usize> = (0..dets.len()).collect();
        order.sort_by(|&a, &b| dets[b].1.total_cmp(&dets[a].1));
        let rects: Vec<Rect> = order.iter().map(|&k| dets[k].0).collect();
        let m = match_detections(&rects, gts, threshold);
        self.matches.extend(order.iter().zip(&m.tp).map(|(&k, &tp)| ScoredMatch { score: dets[k].1, tp }));
        self.num_gt += gts.len();
        self.num_images += 1;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub fppi: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveData {
    pub points: Vec<CurvePoint>,
    pub ap: f64,
}

/// One point per distinct score, from the highest threshold down.
pub fn curve_points(eval: &Evaluation) -> Vec<CurvePoint> {
    let mut sorted = eval.matches.clone();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut points = Vec::new();
    for (k, m) in sorted.iter().enumerate() {
        if m.tp {
            tp += 1;
        } else {
            fp += 1;
        }
        if sorted.get(k + 1).is_some_and(|n| n.score == m.score) {
            continue;
        }
        points.push(CurvePoint {
            threshold: m.score,
            precision: tp as f64 / (tp + fp) as f64,
            recall: if eval.num_gt == 0 { 0.0 } else { tp as f64 / eval.num_gt as f64 },
            fppi: fp as f64 / eval.num_images.max(1) as f64,
        });
    }
    points
}

pub fn ap_from_points(points: &[CurvePoint]) -> f64 {
    let mut ap = 0.0;
    let mut envelope = 0.0f64;
    let mut interp = vec![0.0; points.len()];
    for (k, p) in points.iter().enumerate().rev() {
        envelope = envelope.max(p.precision);
        interp[k] = envelope;
    }
    let mut prev_recall = 0.0;
    for (p, i) in points.iter().zip(&interp) {
        ap += (p.recall - prev_recall) * i;
        prev_recall = p.recall;
    }
    ap
}

pub fn average_precision(eval: &Evaluation) -> Result<f64> {
    if eval.num_gt == 0 {
        return Err(Error::NoGroundTruth);
    }
    Ok(ap_from_points(&curve_points(eval)))
}

pub fn pr_curve(eval: &Evaluation) -> Result<CurveData> {
    let points = curve_points(eval);
    if eval.num_gt == 0 {
        return Err(Error::NoGroundTruth);
    }
    let ap = ap_from_points(&points);
    Ok(CurveData { points, ap })
}

/// (FPPI, recall) pairs of the threshold sweep, starting at (0, 0).
pub fn fppi_recall(eval: &Evaluation) -> Vec<(f64, f64)> {
    std::iter::once((0.0, 0.0)).chain(curve_points(eval).iter().map(|p| (p.fppi, p.recall))).collect()
}

/// Highest recall reached without exceeding `fppi` false positives per image.
pub fn recall_at_fppi(eval: &Evaluation, fppi: f64) -> f64 {
    fppi_recall(eval).into_iter().filter(|&(f, _)| f <= fppi).map(|(_, r)| r).fold(0.0, f64::max)
}

pub fn write_curve_csv(points: &[CurvePoint], out: &mut impl std::io::Write) -> std::io::Result<()> {
    writeln!(out, "threshold,precision,recall,fppi")?;
    for p in points {
        writeln!(out, "{},{},{},{}", p.threshold, p.precision, p.recall, p.fppi)?;
    }
    Ok(())
}

/// A bare line plot of `(x, y)` pairs with y in [0, 1] and x in
/// `[0, x_max]`.
pub fn curve_svg(title: &str, x_label: &str, y_label: &str, x_max: f64, series: &[(f64, f64)]) -> String {
    let (w, h, m) = (360.0, 300.0, 40.0);
    let (pw, ph) = (w - 2.0 * m, h - 2.0 * m);
    let x_max = if x_max > 0.0 { x_max } else { 1.0 };
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(svg, r#"<rect x="{m}" y="{m}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#, w / 2.0, xml_escape(title));
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle" font-size="11">{}</text>"#, w / 2.0, h - 8.0, xml_escape(x_label));
    let _ = writeln!(
        svg,
        r#"<text x="12" y="{}" text-anchor="middle" font-size="11" transform="rotate(-90 12 {})">{}</text>"#,
        h / 2.0,
        h / 2.0,
        xml_escape(y_label)
    );
    let coords: Vec<String> = series
        .iter()
        .map(|&(x, y)| format!("{:.2},{:.2}", m + pw * (x / x_max).clamp(0.0, 1.0), m + ph * (1.0 - y.clamp(0.0, 1.0))))
        .collect();
    let _ = writeln!(svg, r#"<polyline fill="none" stroke="steelblue" stroke-width="2" points="{}"/>"#, coords.join(" "));
    svg.push_str("</svg>\n");
    svg
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Detections of one model on one image, as written by `aotree detect`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    #[serde(rename = "box")]
    pub rect: Rect,
    pub scale: f64,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent: Option<crate::model::LatentAssignment>,
}

impl DetectionRecord {
    pub fn from_detection(d: &Detection, with_latent: bool) -> Self {
        DetectionRecord {
            rect: d.window.rect(),
            scale: d.window.scale,
            score: d.score,
            latent: with_latent.then(|| d.latent.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageDetections {
    pub path: String,
    pub detections: Vec<DetectionRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionFile {
    pub format: String,
    pub class: String,
    pub images: Vec<ImageDetections>,
}

impl DetectionFile {
    pub fn new(class: String, images: Vec<ImageDetections>) -> Self {
        DetectionFile { format: DETECTIONS_FORMAT.into(), class, images }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let origin = path.display().to_string();
        let f: DetectionFile =
            serde_json::from_str(&text).map_err(|e| Error::malformed(&origin, format!("line {}: {e}", e.line())))?;
        if f.format != DETECTIONS_FORMAT {
            return Err(Error::malformed(origin, format!("format: expected {DETECTIONS_FORMAT:?}, found {:?}", f.format)));
        }
        Ok(f)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Runs every `(class, model)` pair over the images of `split`, one
/// detection file per model.
pub fn detect_split(
    manifest: &DatasetManifest,
    split: Split,
    models: &[(String, AndOrModel)],
    cfg: &DetectConfig,
    with_latent: bool,
) -> Result<Vec<DetectionFile>> {
    let bare: Vec<AndOrModel> = models.iter().map(|(_, m)| m.clone()).collect();
    let mut files: Vec<DetectionFile> = models.iter().map(|(c, _)| DetectionFile::new(c.clone(), Vec::new())).collect();
    for (_, item) in manifest.items_in(split) {
        let map = manifest.load_edge_map(item)?;
        for (file, dets) in files.iter_mut().zip(detect_many(&map, &bare, cfg)) {
            file.images.push(ImageDetections {
                path: item.path.clone(),
                detections: dets.iter().map(|d| DetectionRecord::from_detection(d, with_latent)).collect(),
            });
        }
    }
    Ok(files)
}

/// Matches a detection file against the manifest. Every image of `split`
/// counts; ground truth is the boxes of positive items of the file's class.
pub fn evaluate_file(manifest: &DatasetManifest, split: Split, file: &DetectionFile, threshold: f64) -> Result<Evaluation> {
    if !manifest.classes.contains(&file.class) {
        return Err(Error::Dataset(format!("class {:?} is not in the manifest", file.class)));
    }
    let by_path: std::collections::HashMap<&str, &ImageDetections> =
        file.images.iter().map(|im| (im.path.as_str(), im)).collect();
    let mut eval = Evaluation::default();
    for (_, item) in manifest.items_in(split) {
        let gts: &[Rect] = if item.class == file.class && item.label == Label::Positive { &item.boxes } else { &[] };
        let dets: Vec<(Rect, f64)> = by_path
            .get(item.path.as_str())
            .map(|im| im.detections.iter().map(|d| (d.rect, d.score)).collect())
            .unwrap_or_default();
        eval.add_image(&dets, gts, threshold);
    }
    Ok(eval)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub ap: f64,
    pub recall_at_1_fppi: f64,
    pub num_gt: usize,
    pub num_images: usize,
    pub num_detections: usize,
}

impl ClassMetrics {
    pub fn from_evaluation(class: &str, eval: &Evaluation) -> Result<Self> {
        Ok(ClassMetrics {
            class: class.into(),
            ap: average_precision(eval)?,
            recall_at_1_fppi: recall_at_fppi(eval, 1.0),
            num_gt: eval.num_gt,
            num_images: eval.num_images,
            num_detections: eval.matches.len(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub format: String,
    pub iou_threshold: f64,
    pub classes: Vec<ClassMetrics>,
}

impl MetricsReport {
    pub fn new(iou_threshold: f64, classes: Vec<ClassMetrics>) -> Self {
        MetricsReport { format: METRICS_FORMAT.into(), iou_threshold, classes }
    }

    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("metrics serialize");
        s.push('\n');
        s
    }
}
