//! Detection and segmentation metrics, and the Wilcoxon signed-rank test.

use std::collections::{BTreeMap, BTreeSet};

use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{CenError, Result};
use crate::geometry::{BinaryMask, BoundingBox};
use crate::pipeline::{iou, Detection};

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub image_id: String,
    /// 1-based disease class.
    pub class_id: u32,
    pub bbox: BoundingBox,
}

/// A detection tagged with the image it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageDetection {
    pub image_id: String,
    pub det: Detection,
}

impl ImageDetection {
    pub fn new(image_id: impl Into<String>, det: Detection) -> Self {
        Self { image_id: image_id.into(), det }
    }
}

/// When a detection counts as hitting a same-class ground truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MatchRule {
    /// Predicted center inside the closed ground-truth span.
    CenterInside,
    /// IoU strictly above the threshold.
    IouAbove(f64),
}

impl MatchRule {
    pub fn iou(t: f64) -> Result<Self> {
        if !(t > 0.0 && t <= 1.0) {
            return Err(CenError::InvalidParameter(format!("IoU threshold {t} outside (0, 1]")));
        }
        Ok(MatchRule::IouAbove(t))
    }

    fn matches(&self, pred: &BoundingBox, gt: &BoundingBox) -> bool {
        match *self {
            MatchRule::CenterInside => gt.contains(pred.center()),
            MatchRule::IouAbove(t) => iou(pred, gt) > t,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApReport {
    /// AP per class that has at least one ground truth.
    pub per_class: BTreeMap<u32, f64>,
    pub mean: f64,
}

/// All-point interpolated area under a precision/recall sequence.
fn all_point_ap(tp: &[bool], n_gt: usize) -> f64 {
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        if t {
            hits += 1;
        }
        precision.push(hits as f64 / (i + 1) as f64);
        recall.push(hits as f64 / n_gt as f64);
    }
    // precision envelope, right to left
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap
}

/// Average precision per class and the mean over classes with ground truth.
///
/// Detections are visited by descending score (input order on ties); each is
/// matched to the best-overlapping unmatched ground truth of its image and
/// class that satisfies `rule`.
pub fn average_precision(dets: &[ImageDetection], gts: &[GroundTruth], rule: MatchRule) -> Result<ApReport> {
    if gts.is_empty() {
        return Err(CenError::EmptyEvaluationSet);
    }
    let classes: BTreeSet<u32> = gts.iter().map(|g| g.class_id).collect();
    let mut per_class = BTreeMap::new();
    for &class in &classes {
        let class_gts: Vec<&GroundTruth> = gts.iter().filter(|g| g.class_id == class).collect();
        let mut class_dets: Vec<&ImageDetection> = dets.iter().filter(|d| d.det.class_id == class).collect();
        class_dets.sort_by(|a, b| b.det.score.total_cmp(&a.det.score));
        let mut used = vec![false; class_gts.len()];
        let mut tp = Vec::with_capacity(class_dets.len());
        for d in class_dets {
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in class_gts.iter().enumerate() {
                if used[gi] || g.image_id != d.image_id || !rule.matches(&d.det.bbox, &g.bbox) {
                    continue;
                }
                let overlap = iou(&d.det.bbox, &g.bbox);
                if best.is_none_or(|(_, o)| overlap > o) {
                    best = Some((gi, overlap));
                }
            }
            match best {
                Some((gi, _)) => {
                    used[gi] = true;
                    tp.push(true);
                }
                None => tp.push(false),
            }
        }
        per_class.insert(class, all_point_ap(&tp, class_gts.len()));
    }
    let mean = per_class.values().sum::<f64>() / per_class.len() as f64;
    Ok(ApReport { per_class, mean })
}

/// The standard localization IoU thresholds.
pub const LOCALIZATION_THRESHOLDS: [f64; 4] = [0.1, 0.3, 0.5, 0.7];

/// Per-class hit rate over images containing that class.
///
/// An image counts as a hit at threshold `T` when some detection of the class
/// overlaps some ground truth of the class in that image with IoU above `T`.
/// Returns `class → [(T, accuracy)]`.
pub fn localization_accuracy(
    dets: &[ImageDetection],
    gts: &[GroundTruth],
    thresholds: &[f64],
) -> BTreeMap<u32, Vec<(f64, f64)>> {
    let mut images: BTreeMap<u32, BTreeSet<&str>> = BTreeMap::new();
    for g in gts {
        images.entry(g.class_id).or_default().insert(g.image_id.as_str());
    }
    let mut table = BTreeMap::new();
    for (&class, ids) in &images {
        let best_overlap: Vec<f64> = ids
            .iter()
            .map(|id| {
                let mut best = 0.0f64;
                for g in gts.iter().filter(|g| g.class_id == class && g.image_id == *id) {
                    for d in dets.iter().filter(|d| d.det.class_id == class && d.image_id == *id) {
                        best = best.max(iou(&d.det.bbox, &g.bbox));
                    }
                }
                best
            })
            .collect();
        let row = thresholds
            .iter()
            .map(|&t| {
                let hits = best_overlap.iter().filter(|&&o| o > t).count();
                (t, hits as f64 / best_overlap.len() as f64)
            })
            .collect();
        table.insert(class, row);
    }
    table
}

/// `(m+1) × (m+1)` counts; index 0 is background, rows are ground truth and
/// columns predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn get(&self, gt: usize, pred: usize) -> usize {
        self.counts[gt][pred]
    }
}

/// Detection confusion matrix.
///
/// Per image, detections are taken by descending score; each claims the
/// unmatched ground truth with IoU above `iou_t`, preferring the same class
/// and then the highest IoU. Leftover ground truths land in the background
/// column, leftover detections in the background row.
pub fn confusion_matrix(
    dets: &[ImageDetection],
    gts: &[GroundTruth],
    num_classes: usize,
    iou_t: f64,
) -> Result<ConfusionMatrix> {
    let n = num_classes + 1;
    let mut counts = vec![vec![0usize; n]; n];
    let class_index = |c: u32| -> Result<usize> {
        if c >= 1 && (c as usize) <= num_classes {
            Ok(c as usize)
        } else {
            Err(CenError::InvalidParameter(format!("class {c} outside 1..={num_classes}")))
        }
    };
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].det.score.total_cmp(&dets[a].det.score).then(a.cmp(&b)));
    let mut used = vec![false; gts.len()];
    for i in order {
        let d = &dets[i];
        let pred = class_index(d.det.class_id)?;
        let mut best: Option<(usize, bool, f64)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if used[gi] || g.image_id != d.image_id {
                continue;
            }
            let o = iou(&d.det.bbox, &g.bbox);
            if o <= iou_t {
                continue;
            }
            let same = g.class_id == d.det.class_id;
            let better = match best {
                None => true,
                Some((_, bs, bo)) => (same && !bs) || (same == bs && o > bo),
            };
            if better {
                best = Some((gi, same, o));
            }
        }
        match best {
            Some((gi, _, _)) => {
                used[gi] = true;
                counts[class_index(gts[gi].class_id)?][pred] += 1;
            }
            None => counts[0][pred] += 1,
        }
    }
    for (gi, g) in gts.iter().enumerate() {
        if !used[gi] {
            counts[class_index(g.class_id)?][0] += 1;
        }
    }
    Ok(ConfusionMatrix { num_classes, counts })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentationMetrics {
    pub dice: f64,
    pub pixel_acc: f64,
    pub mean_acc: f64,
    pub mean_iu: f64,
    pub fw_iu: f64,
}

/// Two-class (background/foreground) segmentation scores.
///
/// Class means run over the classes present in the ground truth.
pub fn segmentation_metrics(pred: &BinaryMask, gt: &BinaryMask) -> Result<SegmentationMetrics> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(CenError::ShapeMismatch(format!(
            "prediction is {}×{}, ground truth {}×{}",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    // n[i][j]: pixels of true class i predicted as j
    let mut n = [[0f64; 2]; 2];
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        n[g as usize][p as usize] += 1.0;
    }
    let total = n[0][0] + n[0][1] + n[1][0] + n[1][1];
    let inter = n[1][1];
    let denom = (n[1][1] + n[0][1]) + (n[1][1] + n[1][0]);
    let dice = if denom == 0.0 { 1.0 } else { 2.0 * inter / denom };
    let mut present = 0.0;
    let mut acc_sum = 0.0;
    let mut iu_sum = 0.0;
    let mut fw = 0.0;
    for i in 0..2 {
        let t_i = n[i][0] + n[i][1];
        if t_i == 0.0 {
            continue;
        }
        let predicted_i = n[0][i] + n[1][i];
        let iu = n[i][i] / (t_i + predicted_i - n[i][i]);
        present += 1.0;
        acc_sum += n[i][i] / t_i;
        iu_sum += iu;
        fw += t_i * iu;
    }
    let pixel_acc = if total == 0.0 { 1.0 } else { (n[0][0] + n[1][1]) / total };
    let (mean_acc, mean_iu, fw_iu) =
        if present == 0.0 { (1.0, 1.0, 1.0) } else { (acc_sum / present, iu_sum / present, fw / total) };
    Ok(SegmentationMetrics { dice, pixel_acc, mean_acc, mean_iu, fw_iu })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WilcoxonResult {
    /// `min(W⁺, W⁻)`.
    pub statistic: f64,
    pub w_plus: f64,
    pub w_minus: f64,
    /// Number of non-zero differences.
    pub n: usize,
    pub p_value: f64,
    /// Whether the p-value comes from the exact null distribution.
    pub exact: bool,
}

/// Largest sample size handled by exact enumeration of the null distribution.
pub const WILCOXON_EXACT_MAX: usize = 12;

/// Midranks of `values` (1-based), ties sharing the average rank.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Two-sided Wilcoxon signed-rank test on paired samples, differences taken
/// as `second − first`.
///
/// Zero differences are discarded. With at most twelve remaining pairs the
/// p-value is `P(min(W⁺, W⁻) ≤ W)` under the exact sign-flip null (computed
/// by dynamic programming over doubled midranks); above that a normal
/// approximation with tie and continuity corrections is used.
pub fn wilcoxon_signed_rank(pairs: &[(f64, f64)]) -> Result<WilcoxonResult> {
    let diffs: Vec<f64> = pairs.iter().map(|(a, b)| b - a).filter(|d| *d != 0.0).collect();
    if diffs.len() < 5 {
        return Err(CenError::InsufficientData(format!("need at least 5 non-zero differences, got {}", diffs.len())));
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = midranks(&abs);
    let w_plus: f64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let w_minus: f64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d < 0.0).map(|(_, r)| r).sum();
    let statistic = w_plus.min(w_minus);
    let n = diffs.len();
    if n <= WILCOXON_EXACT_MAX {
        // midranks are multiples of 1/2, so doubled ranks are integers
        let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
        let total: usize = doubled.iter().sum();
        let mut ways = vec![0u64; total + 1];
        ways[0] = 1;
        for &r in &doubled {
            for s in (r..=total).rev() {
                ways[s] += ways[s - r];
            }
        }
        let w2 = (2.0 * statistic).round() as usize;
        let count: u64 = ways.iter().enumerate().filter(|(s, _)| (*s).min(total - *s) <= w2).map(|(_, c)| *c).sum();
        let p_value = (count as f64 / 2f64.powi(n as i32)).min(1.0);
        return Ok(WilcoxonResult { statistic, w_plus, w_minus, n, p_value, exact: true });
    }
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut tie_term = 0.0;
    let mut sorted = abs.clone();
    sorted.sort_by(f64::total_cmp);
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    let p_value = if var <= 0.0 {
        1.0
    } else {
        let z = ((statistic - mean).abs() - 0.5).max(0.0) / var.sqrt();
        let normal = Normal::new(0.0, 1.0).expect("standard normal");
        (2.0 * (1.0 - normal.cdf(z))).min(1.0)
    };
    Ok(WilcoxonResult { statistic, w_plus, w_minus, n, p_value, exact: false })
}
