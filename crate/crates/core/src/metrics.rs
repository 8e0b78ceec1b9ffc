//! Evaluation metrics: ROC-AUC, accuracy, sensitivity, Dice, Jaccard, box
//! IoU and activation-map localization scoring.

use std::io::Write;
use std::path::Path;

use crate::data::BBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Area under the ROC curve as the normalized Mann-Whitney statistic: the
/// fraction of (positive, negative) pairs ranked correctly, ties counting
/// one half. Equal to the trapezoidal area under the empirical ROC curve.
pub fn roc_auc(scores: &[f32], labels: &[bool]) -> Result<f32> {
    if scores.len() != labels.len() {
        return Err(Error::shape("roc_auc", format!("{} scores, {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numerical("roc_auc: NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("AUC needs at least one positive and one negative".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // rank sum of positives with average ranks over tie groups
    let mut rank_sum = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        let p_in_group = order[i..=j].iter().filter(|&&k| labels[k]).count();
        rank_sum += avg_rank * p_in_group as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok((u / (pos as f64 * neg as f64)) as f32)
}

/// Mean of the defined per-class AUCs, plus the indices of classes skipped
/// because their AUC is undefined.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanAuc {
    pub value: f32,
    pub undefined: Vec<usize>,
}

pub fn mean_auc(per_class: &[Option<f32>]) -> Result<MeanAuc> {
    let defined: Vec<f64> = per_class.iter().flatten().map(|&a| a as f64).collect();
    if defined.is_empty() {
        return Err(Error::UndefinedMetric("no class has a defined AUC".into()));
    }
    let undefined = per_class.iter().enumerate().filter(|(_, a)| a.is_none()).map(|(i, _)| i).collect();
    Ok(MeanAuc {
        value: (defined.iter().sum::<f64>() / defined.len() as f64) as f32,
        undefined,
    })
}

/// Per-class AUC over a `[N, K]` score matrix and matching 0/1 labels.
pub fn per_class_auc(scores: &Tensor, labels: &Tensor) -> Result<Vec<Option<f32>>> {
    if scores.shape() != labels.shape() || scores.ndim() != 2 {
        return Err(Error::shape("per_class_auc", format!("{:?} vs {:?}", scores.shape(), labels.shape())));
    }
    let (n, k) = (scores.shape()[0], scores.shape()[1]);
    (0..k)
        .map(|c| {
            let s: Vec<f32> = (0..n).map(|i| scores.data()[i * k + c]).collect();
            let l: Vec<bool> = (0..n).map(|i| labels.data()[i * k + c] > 0.5).collect();
            match roc_auc(&s, &l) {
                Ok(a) => Ok(Some(a)),
                Err(Error::UndefinedMetric(_)) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn from_predictions(predicted: &[bool], truth: &[bool]) -> Result<Self> {
        if predicted.len() != truth.len() {
            return Err(Error::shape("confusion", format!("{} vs {}", predicted.len(), truth.len())));
        }
        let mut c = ConfusionCounts::default();
        for (&p, &t) in predicted.iter().zip(truth) {
            match (p, t) {
                (true, true) => c.tp += 1,
                (false, false) => c.tn += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

/// `(TP + TN) / (TP + TN + FP + FN)`.
pub fn accuracy(c: &ConfusionCounts) -> Result<f32> {
    if c.total() == 0 {
        return Err(Error::UndefinedMetric("accuracy of zero items".into()));
    }
    Ok(((c.tp + c.tn) as f64 / c.total() as f64) as f32)
}

/// `TP / (TP + FN)`.
pub fn sensitivity(c: &ConfusionCounts) -> Result<f32> {
    if c.tp + c.fn_ == 0 {
        return Err(Error::UndefinedMetric("sensitivity without positives".into()));
    }
    Ok((c.tp as f64 / (c.tp + c.fn_) as f64) as f32)
}

fn overlap(s: &[bool], g: &[bool]) -> Result<(u64, u64, u64)> {
    if s.len() != g.len() {
        return Err(Error::shape("mask_pair", format!("{} vs {} pixels", s.len(), g.len())));
    }
    let inter = s.iter().zip(g).filter(|(a, b)| **a && **b).count() as u64;
    let ns = s.iter().filter(|&&v| v).count() as u64;
    let ng = g.iter().filter(|&&v| v).count() as u64;
    Ok((inter, ns, ng))
}

/// `2 |S ∩ G| / (|S| + |G|)`; two empty masks score 1.
pub fn dice(s: &[bool], g: &[bool]) -> Result<f64> {
    let (inter, ns, ng) = overlap(s, g)?;
    if ns + ng == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (ns + ng) as f64)
}

/// `|S ∩ G| / |S ∪ G|`; two empty masks score 1.
pub fn jaccard(s: &[bool], g: &[bool]) -> Result<f64> {
    let (inter, ns, ng) = overlap(s, g)?;
    let union = ns + ng - inter;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Intersection over union of two boxes; 0 when they do not overlap.
pub fn box_iou(a: &BBox, b: &BBox) -> f32 {
    let iw = (a.x1.min(b.x1) as f64 - a.x0.max(b.x0) as f64).max(0.0);
    let ih = (a.y1.min(b.y1) as f64 - a.y0.max(b.y0) as f64).max(0.0);
    let inter = iw * ih;
    let union = a.area() as f64 + b.area() as f64 - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union) as f32
}

// ---------------------------------------------------------------------------
// Localization

/// `count` evenly spaced thresholds from 0.1 to 0.6 inclusive.
pub fn threshold_grid(count: usize) -> Vec<f32> {
    match count {
        0 => Vec::new(),
        1 => vec![0.1],
        n => (0..n).map(|i| (0.1 + 0.5 * i as f64 / (n - 1) as f64) as f32).collect(),
    }
}

pub const DEFAULT_THRESHOLDS: usize = 11;

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationResult {
    pub thresholds: Vec<f32>,
    /// Mean IoU over samples at each threshold.
    pub mean_iou: Vec<f32>,
    pub best_t: f32,
    pub best_iou: f32,
    pub ap25: f32,
    pub ap50: f32,
    pub pointing: f32,
}

/// Min-max normalization; a constant map becomes all ones so that every
/// threshold keeps the whole image.
fn normalize_for_threshold(cam: &[f32]) -> Vec<f32> {
    let lo = cam.iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = cam.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    if hi - lo <= 0.0 {
        return vec![1.0; cam.len()];
    }
    cam.iter().map(|&v| ((v as f64 - lo as f64) / (hi as f64 - lo as f64)) as f32).collect()
}

/// Bounding box of the largest 4-connected foreground component; ties go to
/// the component found first in raster order.
pub fn largest_component_box(mask: &[bool], h: usize, w: usize) -> Option<BBox> {
    let mut seen = vec![false; mask.len()];
    let mut best: Option<(usize, BBox)> = None;
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let (mut size, mut x0, mut y0, mut x1, mut y1) = (0, w, h, 0, 0);
        while let Some(i) = stack.pop() {
            let (y, x) = (i / w, i % w);
            size += 1;
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x + 1);
            y1 = y1.max(y + 1);
            let mut visit = |j: usize| {
                if mask[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
        }
        if best.as_ref().is_none_or(|(s, _)| size > *s) {
            let b = BBox {
                x0: x0 as f32,
                y0: y0 as f32,
                x1: x1 as f32,
                y1: y1 as f32,
            };
            best = Some((size, b));
        }
    }
    best.map(|(_, b)| b)
}

/// Average precision of one prediction per sample: predictions ranked by
/// descending confidence (stable), a hit when `iou >= cutoff`, recall over
/// all samples.
fn average_precision(confidence: &[f32], ious: &[f32], cutoff: f32) -> f32 {
    let mut order: Vec<usize> = (0..confidence.len()).collect();
    order.sort_by(|&a, &b| confidence[b].total_cmp(&confidence[a]));
    let mut hits = 0usize;
    let mut ap = 0.0f64;
    for (rank, &i) in order.iter().enumerate() {
        if ious[i] >= cutoff {
            hits += 1;
            ap += hits as f64 / (rank + 1) as f64;
        }
    }
    (ap / confidence.len().max(1) as f64) as f32
}

/// Index of the map maximum. Upsampling clamps at the borders, so a peak
/// in an edge cell becomes a flat run of equal values; ties go to the pixel
/// nearest the image centre, which is the cell's own centre.
pub fn peak_pixel(map: &[f32], h: usize, w: usize) -> usize {
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let dist = |i: usize| ((i / w) as f64 - cy).powi(2) + ((i % w) as f64 - cx).powi(2);
    let mut best = 0;
    for (i, &v) in map.iter().enumerate().skip(1) {
        let b = map[best];
        if v > b || (v == b && dist(i) < dist(best)) {
            best = i;
        }
    }
    best
}

/// Scores activation maps against one ground-truth box per sample.
///
/// Each raw `[H, W]` map is min-max normalized, binarized at every
/// threshold, and the box of its largest 4-connected component is the
/// prediction (IoU 0 when nothing survives). `best_t` maximizes the mean IoU;
/// AP at IoU 0.25 and 0.5 uses the boxes at `best_t` ranked by raw map peak;
/// the pointing game checks whether the map's argmax ([`peak_pixel`]) lies
/// in the box.
pub fn cam_localize(cams: &[Tensor], boxes: &[BBox], thresholds: &[f32]) -> Result<LocalizationResult> {
    if cams.len() != boxes.len() || cams.is_empty() {
        return Err(Error::shape("cam_localize", format!("{} maps, {} boxes", cams.len(), boxes.len())));
    }
    if thresholds.is_empty() || thresholds.iter().any(|t| !(0.1..=0.6).contains(t)) {
        return Err(Error::config("thresholds", "need at least one threshold, all within [0.1, 0.6]"));
    }
    let n = cams.len();
    let mut ious = vec![vec![0f32; n]; thresholds.len()];
    let mut peaks = Vec::with_capacity(n);
    let mut pointing_hits = 0usize;
    for (s, (cam, gt)) in cams.iter().zip(boxes).enumerate() {
        let (h, w) = match cam.shape() {
            [h, w] => (*h, *w),
            sh => return Err(Error::shape("cam_localize", format!("map {s} has shape {sh:?}"))),
        };
        if !cam.all_finite() {
            return Err(Error::Numerical(format!("map {s} has non-finite values")));
        }
        let raw = cam.data();
        let arg = peak_pixel(raw, h, w);
        let peak = raw[arg];
        peaks.push(peak);
        if gt.contains_pixel(arg / w, arg % w) {
            pointing_hits += 1;
        }
        let norm = normalize_for_threshold(raw);
        for (k, &t) in thresholds.iter().enumerate() {
            let mask: Vec<bool> = norm.iter().map(|&v| v >= t).collect();
            ious[k][s] = largest_component_box(&mask, h, w).map_or(0.0, |b| box_iou(&b, gt));
        }
    }
    let mean_iou: Vec<f32> = ious
        .iter()
        .map(|row| (row.iter().map(|&v| v as f64).sum::<f64>() / n as f64) as f32)
        .collect();
    let mut best = 0;
    for k in 1..thresholds.len() {
        if mean_iou[k] > mean_iou[best] {
            best = k;
        }
    }
    Ok(LocalizationResult {
        thresholds: thresholds.to_vec(),
        best_t: thresholds[best],
        best_iou: mean_iou[best],
        ap25: average_precision(&peaks, &ious[best], 0.25),
        ap50: average_precision(&peaks, &ious[best], 0.5),
        pointing: (pointing_hits as f64 / n as f64) as f32,
        mean_iou,
    })
}

/// Writes `threshold,mean_iou` rows followed by the summary header and
/// values `ap25,ap50,pointing,best_t`.
pub fn write_localization_csv(path: impl AsRef<Path>, r: &LocalizationResult) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("threshold,mean_iou\n");
    for (t, v) in r.thresholds.iter().zip(&r.mean_iou) {
        out.push_str(&format!("{t},{v}\n"));
    }
    out.push_str("ap25,ap50,pointing,best_t\n");
    out.push_str(&format!("{},{},{},{}\n", r.ap25, r.ap50, r.pointing, r.best_t));
    write_text(path, &out)
}

/// Rows of the `epoch,split,metric,value` report.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<(usize, String, String, f32)>,
}

impl MetricsLog {
    pub fn push(&mut self, epoch: usize, split: &str, metric: &str, value: f32) {
        self.rows.push((epoch, split.to_string(), metric.to_string(), value));
    }

    /// Last value logged for `(split, metric)`.
    pub fn last(&self, split: &str, metric: &str) -> Option<f32> {
        self.rows.iter().rev().find(|(_, s, m, _)| s == split && m == metric).map(|r| r.3)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,split,metric,value\n");
        for (e, s, m, v) in &self.rows {
            out.push_str(&format!("{e},{s},{m},{v}\n"));
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_text(path.as_ref(), &self.to_csv())
    }
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
