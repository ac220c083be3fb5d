//! End-to-end inference: proposal intake, contralateral enhancement, and the
//! fully and weakly supervised post-processing rules.

use rayon::prelude::*;

use crate::error::{CenError, Result};
use crate::fusion::{apply_offsets, fuse, head_forward, HeadConfig, HeadMode, HeadOutput, HeadWeights};
use crate::geometry::{expand_patch, reflect_box, BoundingBox, SpineLine};
use crate::tensorops::{roi_pool, sample_patch, FeatureMap, FeatureVector, ROI_GRID};
use crate::transform::{compose_transform, AffineTransform, CanonicalSize, StnParams, StnPredictor};

/// Cell size of the weakly supervised probability map, in image pixels.
pub const WEAK_CELL: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BoundingBox,
    /// 1-based disease class.
    pub class_id: u32,
    pub score: f64,
}

/// Class-agnostic candidate box from an upstream detector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub bbox: BoundingBox,
    pub score: f64,
}

/// Per-class probabilities over the `H/32 × W/32` grid, indexed `(class, y, x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl ProbabilityMap {
    pub fn new(classes: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != classes * height * width {
            return Err(CenError::ShapeMismatch(format!(
                "probability map has {} values, expected {classes}×{height}×{width}",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(CenError::InvalidParameter(format!("probability {v} outside [0, 1]")));
        }
        Ok(Self { classes, height, width, values })
    }

    pub fn get(&self, class: usize, y: usize, x: usize) -> f64 {
        self.values[(class * self.height + y) * self.width + x]
    }
}

/// Intersection over union with the inclusive `[x, x+w-1]` span convention.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = a.x_max().min(b.x_max()) - a.x.max(b.x) + 1.0;
    let ih = a.y_max().min(b.y_max()) - a.y.max(b.y) + 1.0;
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Indices kept by greedy suppression, in keep order.
///
/// Candidates are visited by descending score (lower index first on ties);
/// one is kept iff its IoU with every kept candidate of the same group is at
/// most `threshold`.
fn greedy_keep(boxes: &[BoundingBox], scores: &[f64], groups: &[u32], threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let clear = kept.iter().all(|&k| groups[k] != groups[i] || iou(&boxes[k], &boxes[i]) <= threshold);
        if clear {
            kept.push(i);
        }
    }
    kept
}

/// Per-class greedy non-maximum suppression.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let boxes: Vec<_> = dets.iter().map(|d| d.bbox).collect();
    let scores: Vec<_> = dets.iter().map(|d| d.score).collect();
    let groups: Vec<_> = dets.iter().map(|d| d.class_id).collect();
    greedy_keep(&boxes, &scores, &groups, iou_threshold).into_iter().map(|i| dets[i]).collect()
}

/// Class-agnostic greedy suppression of proposals.
pub fn nms_proposals(props: &[Proposal], iou_threshold: f64) -> Vec<Proposal> {
    let boxes: Vec<_> = props.iter().map(|p| p.bbox).collect();
    let scores: Vec<_> = props.iter().map(|p| p.score).collect();
    greedy_keep(&boxes, &scores, &vec![0; props.len()], iou_threshold).into_iter().map(|i| props[i]).collect()
}

/// What the head sees for each proposal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    /// Proposal features only (the ablation baseline).
    ProposalOnly,
    /// Proposal features fused with the refined contralateral patch.
    Contralateral,
}

/// How the weakly supervised path picks cells from the probability map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeakSelection {
    /// Every cell whose best class probability exceeds the threshold.
    Threshold(f64),
    /// The `k` highest `(class, cell)` entries.
    TopK(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineConfig {
    pub max_proposals: usize,
    pub proposal_nms: f64,
    pub final_nms: f64,
    pub score_threshold: f64,
    pub max_detections: usize,
    pub weak_top_k: usize,
    pub weak_threshold: f64,
    pub canon: CanonicalSize,
    pub roi_grid: usize,
    pub fusion: FusionMode,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            max_proposals: 100,
            proposal_nms: 0.7,
            final_nms: 0.5,
            score_threshold: 0.05,
            max_detections: 20,
            weak_top_k: 10,
            weak_threshold: 0.5,
            canon: CanonicalSize::default(),
            roi_grid: ROI_GRID,
            fusion: FusionMode::Contralateral,
        }
    }
}

impl PipelineConfig {
    /// Length of the pooled vector for a map with `channels` channels.
    pub fn feature_len(&self, channels: usize) -> usize {
        channels * self.roi_grid * self.roi_grid
    }

    /// Head input length for this fusion mode.
    pub fn head_input_len(&self, channels: usize) -> usize {
        match self.fusion {
            FusionMode::ProposalOnly => self.feature_len(channels),
            FusionMode::Contralateral => 2 * self.feature_len(channels),
        }
    }
}

/// Everything computed for one proposal on its way to the head.
#[derive(Debug, Clone, PartialEq)]
pub struct Enhanced {
    pub proposal: BoundingBox,
    /// Preliminary contralateral patch (mirror of the proposal).
    pub contralateral: BoundingBox,
    /// Contralateral patch grown by a quarter of its size per side.
    pub expanded: BoundingBox,
    pub params: StnParams,
    pub transform: AffineTransform,
    /// Pooled proposal features.
    pub f: FeatureVector,
    /// Pooled refined-contralateral features; `None` in proposal-only mode.
    pub f_hat: Option<FeatureVector>,
}

impl Enhanced {
    pub fn head_input(&self) -> Result<FeatureVector> {
        match &self.f_hat {
            Some(fh) => fuse(&self.f, fh),
            None => Ok(self.f.clone()),
        }
    }
}

/// Single-channel `w0 × h0` view of `region` used as STN input.
pub fn stn_input_patch(map: &FeatureMap, region: &BoundingBox, canon: CanonicalSize) -> Result<Vec<f64>> {
    let t = compose_transform(region, &StnParams::identity(), canon);
    Ok(sample_patch(&map.channel_mean(), &t, canon, canon.w0, canon.h0)?.data)
}

/// Contralateral feature map for a refined patch: `map` resampled over the
/// canonical grid.
pub fn contralateral_map(
    map: &FeatureMap,
    expanded: &BoundingBox,
    params: &StnParams,
    canon: CanonicalSize,
) -> Result<(AffineTransform, FeatureMap)> {
    let t = compose_transform(expanded, params, canon);
    let patch = sample_patch(map, &t, canon, canon.w0, canon.h0)?;
    Ok((t, patch))
}

/// Box covering a whole canonical patch in its own coordinates.
pub fn canonical_box(canon: CanonicalSize) -> BoundingBox {
    BoundingBox { x: 0.0, y: 0.0, w: canon.w0 as f64, h: canon.h0 as f64 }
}

/// Reflect, expand, refine, sample and pool one proposal.
pub fn enhance_proposal(
    map: &FeatureMap,
    proposal: &BoundingBox,
    line: &SpineLine,
    stn: &dyn StnPredictor,
    config: &PipelineConfig,
) -> Result<Enhanced> {
    let canon = config.canon;
    let f = roi_pool(map, proposal, config.roi_grid)?;
    let contralateral = reflect_box(proposal, line);
    let expanded = expand_patch(&contralateral);
    let params = if stn.is_constant() {
        stn.predict(&[], &[])?
    } else {
        let own = stn_input_patch(map, &expand_patch(proposal), canon)?;
        let other = stn_input_patch(map, &expanded, canon)?;
        stn.predict(&own, &other)?
    };
    let transform = compose_transform(&expanded, &params, canon);
    let f_hat = match config.fusion {
        FusionMode::ProposalOnly => None,
        FusionMode::Contralateral => {
            let patch = sample_patch(map, &transform, canon, canon.w0, canon.h0)?;
            Some(roi_pool(&patch, &canonical_box(canon), config.roi_grid)?)
        }
    };
    Ok(Enhanced { proposal: *proposal, contralateral, expanded, params, transform, f, f_hat })
}

fn check_head(map: &FeatureMap, head: &HeadConfig, config: &PipelineConfig, mode: HeadMode) -> Result<()> {
    if head.mode != mode {
        return Err(CenError::InvalidParameter(format!("expected a {mode:?} head, got {:?}", head.mode)));
    }
    let want = config.head_input_len(map.channels);
    if head.input_len != want {
        return Err(CenError::ShapeMismatch(format!(
            "head expects input length {}, pipeline produces {want}",
            head.input_len
        )));
    }
    Ok(())
}

/// Runs the head on each box in parallel; proposals falling entirely outside
/// the map are dropped.
fn score_boxes(
    map: &FeatureMap,
    boxes: &[BoundingBox],
    line: &SpineLine,
    stn: &dyn StnPredictor,
    weights: &HeadWeights,
    head: &HeadConfig,
    config: &PipelineConfig,
) -> Result<Vec<Option<HeadOutput>>> {
    boxes
        .par_iter()
        .map(|b| match enhance_proposal(map, b, line, stn, config) {
            Ok(e) => head_forward(&e.head_input()?, weights, head).map(Some),
            Err(CenError::EmptyRoi) => Ok(None),
            Err(e) => Err(e),
        })
        .collect()
}

/// Fully supervised inference.
///
/// The top proposals by score pass a class-agnostic NMS, are enhanced and
/// classified, their boxes refined, then a per-class NMS, a score floor and a
/// detection cap produce the final list, sorted by descending score.
#[allow(clippy::too_many_arguments)]
pub fn run_fully_supervised(
    map: &FeatureMap,
    proposals: &[Proposal],
    line: &SpineLine,
    stn: &dyn StnPredictor,
    weights: &HeadWeights,
    head: &HeadConfig,
    config: &PipelineConfig,
) -> Result<Vec<Detection>> {
    if proposals.is_empty() {
        return Ok(Vec::new());
    }
    check_head(map, head, config, HeadMode::FullySupervised)?;
    let mut ranked = proposals.to_vec();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score));
    ranked.truncate(config.max_proposals);
    let survivors = nms_proposals(&ranked, config.proposal_nms);
    let boxes: Vec<_> = survivors.iter().map(|p| p.bbox).collect();
    let outputs = score_boxes(map, &boxes, line, stn, weights, head, config)?;
    let mut dets = Vec::with_capacity(boxes.len());
    for (b, out) in boxes.iter().zip(outputs) {
        if let Some(out) = out {
            let (bbox, class_id, score) = apply_offsets(b, &out)?;
            dets.push(Detection { bbox, class_id, score });
        }
    }
    let mut finals: Vec<Detection> =
        nms(&dets, config.final_nms).into_iter().filter(|d| d.score > config.score_threshold).collect();
    finals.truncate(config.max_detections);
    Ok(finals)
}

/// Weak proposal: one probability-map cell for one class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeakProposal {
    pub bbox: BoundingBox,
    pub class_id: u32,
    pub score: f64,
}

fn cell_box(x: usize, y: usize) -> BoundingBox {
    let s = WEAK_CELL as f64;
    BoundingBox { x: s * x as f64, y: s * y as f64, w: s, h: s }
}

/// The `k` highest `(class, y, x)` entries, ties in lexicographic order.
pub fn extract_weak_proposals(p: &ProbabilityMap, k: usize) -> Vec<WeakProposal> {
    let mut idx: Vec<usize> = (0..p.values.len()).collect();
    // flat index order is (class, y, x) lexicographic
    idx.sort_by(|&a, &b| p.values[b].total_cmp(&p.values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    let plane = p.height * p.width;
    idx.into_iter()
        .map(|i| {
            let class = i / plane;
            let (y, x) = ((i % plane) / p.width, i % p.width);
            WeakProposal { bbox: cell_box(x, y), class_id: class as u32 + 1, score: p.values[i] }
        })
        .collect()
}

/// Distinct cells chosen by `selection`, in raster order.
pub fn select_weak_cells(p: &ProbabilityMap, selection: WeakSelection) -> Vec<(usize, usize)> {
    let mut cells: Vec<(usize, usize)> = match selection {
        WeakSelection::Threshold(t) => {
            let mut out = Vec::new();
            for y in 0..p.height {
                for x in 0..p.width {
                    if (0..p.classes).any(|c| p.get(c, y, x) > t) {
                        out.push((y, x));
                    }
                }
            }
            out
        }
        WeakSelection::TopK(k) => extract_weak_proposals(p, k)
            .into_iter()
            .map(|w| ((w.bbox.y as usize) / WEAK_CELL, (w.bbox.x as usize) / WEAK_CELL))
            .collect(),
    };
    cells.sort_unstable();
    cells.dedup();
    cells
}

/// Weakly supervised inference with an explicit cell-selection rule.
#[allow(clippy::too_many_arguments)]
pub fn run_weakly_supervised_with(
    map: &FeatureMap,
    p: &ProbabilityMap,
    line: &SpineLine,
    stn: &dyn StnPredictor,
    weights: &HeadWeights,
    head: &HeadConfig,
    config: &PipelineConfig,
    selection: WeakSelection,
) -> Result<Vec<Detection>> {
    if map.stride != WEAK_CELL || map.height != p.height || map.width != p.width {
        return Err(CenError::ShapeMismatch(format!(
            "feature map {}×{} at stride {} does not match a {}×{} probability grid at stride {WEAK_CELL}",
            map.height, map.width, map.stride, p.height, p.width
        )));
    }
    check_head(map, head, config, HeadMode::WeaklySupervised)?;
    if head.num_classes != p.classes {
        return Err(CenError::ShapeMismatch(format!(
            "head has {} classes, probability map has {}",
            head.num_classes, p.classes
        )));
    }
    let boxes: Vec<_> = select_weak_cells(p, selection).into_iter().map(|(y, x)| cell_box(x, y)).collect();
    let outputs = score_boxes(map, &boxes, line, stn, weights, head, config)?;
    Ok(boxes
        .into_iter()
        .zip(outputs)
        .filter_map(|(bbox, out)| {
            out.map(|o| {
                let (j, score) = o.best_class();
                Detection { bbox, class_id: j as u32 + 1, score }
            })
        })
        .collect())
}

/// Weakly supervised inference: cells whose probability exceeds `threshold`
/// are re-classified by the head.
#[allow(clippy::too_many_arguments)]
pub fn run_weakly_supervised(
    map: &FeatureMap,
    p: &ProbabilityMap,
    line: &SpineLine,
    stn: &dyn StnPredictor,
    weights: &HeadWeights,
    head: &HeadConfig,
    config: &PipelineConfig,
    threshold: f64,
) -> Result<Vec<Detection>> {
    run_weakly_supervised_with(map, p, line, stn, weights, head, config, WeakSelection::Threshold(threshold))
}
