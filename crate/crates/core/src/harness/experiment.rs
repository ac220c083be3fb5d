//! Ablation on synthetic scenes: a head that sees proposal features only
//! against one that also sees the refined contralateral patch.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{CenError, Result};
use crate::evaluation::{average_precision, ApReport, GroundTruth, ImageDetection, MatchRule};
use crate::fusion::{
    head_backward, head_forward, offset_targets, train_head, HeadConfig, HeadMode, HeadUpstream, HeadWeights, Label,
    TrainParams, TrainingExample,
};
use crate::geometry::{expand_patch, reflect_box, spine_line, BoundingBox, SpineLine};
use crate::harness::boxes::{write_boxes, BoxRecord};
use crate::harness::config::{RunConfig, StnMode};
use crate::harness::ctf::write_head;
use crate::harness::synth::{generate_scenes, SyntheticScene};
use crate::pipeline::{
    canonical_box, enhance_proposal, iou, run_fully_supervised, stn_input_patch, FusionMode, PipelineConfig,
};
use crate::tensorops::{roi_pool_backward, roi_pool_with_argmax, sample_patch, sample_patch_grad, FeatureVector};
use crate::transform::{compose_transform, IdentityStn, LinearStn, StnPredictor};

/// Proposals whose IoU with a lesion reaches this are trained as that lesion.
pub const POSITIVE_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arm {
    ProposalOnly,
    Fused,
}

impl Arm {
    pub fn name(&self) -> &'static str {
        match self {
            Arm::ProposalOnly => "proposal_only",
            Arm::Fused => "fused",
        }
    }

    fn fusion(&self) -> FusionMode {
        match self {
            Arm::ProposalOnly => FusionMode::ProposalOnly,
            Arm::Fused => FusionMode::Contralateral,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ArmResult {
    pub arm: Arm,
    pub final_loss: f64,
    pub weights: HeadWeights,
    pub ap50: ApReport,
    pub ap_center: ApReport,
    pub ap75: ApReport,
    pub detections: Vec<ImageDetection>,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub config: RunConfig,
    pub arms: [ArmResult; 2],
    pub ground_truth: Vec<GroundTruth>,
}

impl ExperimentReport {
    pub fn arm(&self, arm: Arm) -> &ArmResult {
        self.arms.iter().find(|a| a.arm == arm).expect("both arms present")
    }

    /// Mean AP50 of the fused head minus the proposal-only head.
    pub fn ap50_gain(&self) -> f64 {
        self.arm(Arm::Fused).ap50.mean - self.arm(Arm::ProposalOnly).ap50.mean
    }

    /// Fixed-width comparison table.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<14} {:>8} {:>10} {:>8} {:>11}", "head", "AP50", "AP-center", "AP75", "train_loss");
        for a in &self.arms {
            let _ = writeln!(
                s,
                "{:<14} {:>8.4} {:>10.4} {:>8.4} {:>11.4}",
                a.arm.name(),
                a.ap50.mean,
                a.ap_center.mean,
                a.ap75.mean,
                a.final_loss
            );
        }
        s
    }

    /// `metric,head,class,value` rows; class `mean` carries the class average.
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("metric,head,class,value\n");
        for a in &self.arms {
            for (metric, rep) in [("ap50", &a.ap50), ("ap_center", &a.ap_center), ("ap75", &a.ap75)] {
                for (class, v) in &rep.per_class {
                    let _ = writeln!(s, "{metric},{},{class},{v}", a.arm.name());
                }
                let _ = writeln!(s, "{metric},{},mean,{}", a.arm.name(), rep.mean);
            }
            let _ = writeln!(s, "train_loss,{},mean,{}", a.arm.name(), a.final_loss);
        }
        s
    }

    /// Writes `metrics.csv`, `ground_truth.csv`, one detections CSV and one
    /// head archive per head, `table.txt` and the effective `config.txt`
    /// into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("metrics.csv"), self.metrics_csv())?;
        fs::write(dir.join("table.txt"), self.table())?;
        fs::write(dir.join("config.txt"), self.config.to_string())?;
        let gts: Vec<_> = self.ground_truth.iter().map(BoxRecord::from_ground_truth).collect();
        write_boxes(fs::File::create(dir.join("ground_truth.csv"))?, &gts)?;
        for a in &self.arms {
            let recs: Vec<_> = a.detections.iter().map(|d| BoxRecord::from_detection(&d.image_id, &d.det)).collect();
            write_boxes(fs::File::create(dir.join(format!("detections_{}.csv", a.arm.name())))?, &recs)?;
            let mut head = Vec::new();
            write_head(&mut head, &a.weights)?;
            fs::write(dir.join(format!("head_{}.bin", a.arm.name())), head)?;
        }
        Ok(())
    }
}

/// A scene with its fitted spine line.
struct Prepared {
    scene: SyntheticScene,
    line: SpineLine,
}

fn prepare(scenes: Vec<SyntheticScene>) -> Result<Vec<Prepared>> {
    scenes
        .into_par_iter()
        .map(|scene| {
            let line = spine_line(&scene.spine_mask)?;
            Ok(Prepared { scene, line })
        })
        .collect()
}

/// Lesion label and regression target for a training proposal.
fn label_for(scene: &SyntheticScene, bbox: &BoundingBox) -> (Label, Option<[f64; 4]>) {
    let best = scene
        .lesions
        .iter()
        .map(|g| (iou(bbox, &g.bbox), g))
        .filter(|(o, _)| *o >= POSITIVE_IOU)
        .max_by(|a, b| a.0.total_cmp(&b.0));
    match best {
        Some((_, g)) => (Label::Disease(g.class_id), Some(offset_targets(bbox, &g.bbox))),
        None => (Label::Background, None),
    }
}

/// Per-proposal training record for both arms.
struct Sample {
    scene: usize,
    proposal: usize,
    label: Label,
    offsets: Option<[f64; 4]>,
    f: FeatureVector,
    f_hat: Option<FeatureVector>,
}

fn collect_samples(train: &[Prepared], stn: &dyn StnPredictor, pipe: &PipelineConfig) -> Result<Vec<Sample>> {
    let per_scene: Vec<Vec<Sample>> = train
        .par_iter()
        .enumerate()
        .map(|(si, p)| {
            let mut out = Vec::new();
            for (pi, prop) in p.scene.proposals.iter().enumerate() {
                let e = match enhance_proposal(&p.scene.features, &prop.bbox, &p.line, stn, pipe) {
                    Ok(e) => e,
                    Err(CenError::EmptyRoi) => continue,
                    Err(e) => return Err(e),
                };
                let (label, offsets) = label_for(&p.scene, &prop.bbox);
                out.push(Sample { scene: si, proposal: pi, label, offsets, f: e.f, f_hat: e.f_hat });
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(per_scene.into_iter().flatten().collect())
}

fn examples(samples: &[Sample], arm: Arm) -> Vec<TrainingExample> {
    samples
        .iter()
        .map(|s| TrainingExample {
            f: s.f.clone(),
            f_hat: match arm {
                Arm::ProposalOnly => None,
                Arm::Fused => s.f_hat.clone(),
            },
            label: s.label,
            offsets: s.offsets,
        })
        .collect()
}

fn train_params(config: &RunConfig) -> TrainParams {
    TrainParams {
        epochs: config.epochs,
        learning_rate: config.learning_rate,
        momentum: config.momentum,
        offset_weight: 1.0,
        seed: config.seed,
        zero_init: false,
    }
}

fn smooth_l1_grad(v: f64) -> f64 {
    if v.abs() < 1.0 {
        v
    } else {
        v.signum()
    }
}

/// Gradient of the fused head's loss for one sample with respect to the
/// linear STN, through pooling and bilinear sampling of the refined patch.
fn stn_sample_grad(
    p: &Prepared,
    sample: &Sample,
    stn: &LinearStn,
    weights: &HeadWeights,
    head: &HeadConfig,
    pipe: &PipelineConfig,
) -> Result<(Vec<f64>, [f64; 5])> {
    let canon = pipe.canon;
    let map = &p.scene.features;
    let bbox = p.scene.proposals[sample.proposal].bbox;
    let expanded = expand_patch(&reflect_box(&bbox, &p.line));
    let own = stn_input_patch(map, &expand_patch(&bbox), canon)?;
    let other = stn_input_patch(map, &expanded, canon)?;
    let params = stn.predict(&own, &other)?;
    let t = compose_transform(&expanded, &params, canon);
    let patch = sample_patch(map, &t, canon, canon.w0, canon.h0)?;
    let (f_hat, argmax) = roi_pool_with_argmax(&patch, &canonical_box(canon), pipe.roi_grid)?;
    let input = crate::fusion::fuse(&sample.f, &f_hat)?;
    let m = head.num_classes;
    let mut d_offsets = Vec::new();
    if let (Label::Disease(c), Some(target)) = (sample.label, sample.offsets) {
        let out = head_forward(&input, weights, head)?;
        let j = c as usize - 1;
        d_offsets = vec![0.0; 4 * m];
        for (k, pred) in [out.dx[j], out.dy[j], out.dw[j], out.dh[j]].into_iter().enumerate() {
            d_offsets[k * m + j] = smooth_l1_grad(pred - target[k]);
        }
    }
    let g = head_backward(&input, weights, head, &HeadUpstream::CrossEntropy { label: sample.label, d_offsets })?;
    let half = sample.f.len();
    let d_f_hat: Vec<f64> = (0..half).map(|i| g.input[i] - g.input[half + i]).collect();
    let d_patch = roi_pool_backward(&patch, &argmax, &d_f_hat)?;
    let d_params = sample_patch_grad(map, &expanded, &params, canon, &d_patch)?.params;
    stn.backward(&own, &other, &d_params)
}

/// Full-batch gradient steps on the linear STN with the fused head frozen.
fn fine_tune_stn(
    train: &[Prepared],
    samples: &[Sample],
    weights: &HeadWeights,
    head: &HeadConfig,
    pipe: &PipelineConfig,
    config: &RunConfig,
) -> Result<LinearStn> {
    let mut stn = LinearStn::zeros(pipe.canon);
    let n = samples.len() as f64;
    for _ in 0..config.stn_epochs {
        let grads: Vec<(Vec<f64>, [f64; 5])> = samples
            .par_iter()
            .map(|s| stn_sample_grad(&train[s.scene], s, &stn, weights, head, pipe))
            .collect::<Result<_>>()?;
        let mut dw = vec![0.0; stn.weights.len()];
        let mut db = [0.0; 5];
        for (gw, gb) in &grads {
            for (d, v) in dw.iter_mut().zip(gw) {
                *d += v / n;
            }
            for (d, v) in db.iter_mut().zip(gb) {
                *d += v / n;
            }
        }
        stn.step(&dw, &db, config.stn_learning_rate);
        if stn.weights.iter().chain(&stn.bias).any(|v| !v.is_finite()) {
            return Err(CenError::Diverged { epoch: 0, loss: f64::NAN });
        }
    }
    Ok(stn)
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    arm: Arm,
    test: &[Prepared],
    stn: &dyn StnPredictor,
    weights: &HeadWeights,
    head: &HeadConfig,
    pipe: &PipelineConfig,
    gts: &[GroundTruth],
    final_loss: f64,
) -> Result<ArmResult> {
    let per_scene: Vec<Vec<ImageDetection>> = test
        .par_iter()
        .map(|p| {
            let dets = run_fully_supervised(&p.scene.features, &p.scene.proposals, &p.line, stn, weights, head, pipe)?;
            Ok(dets.into_iter().map(|d| ImageDetection::new(p.scene.image_id.clone(), d)).collect())
        })
        .collect::<Result<_>>()?;
    let detections: Vec<_> = per_scene.into_iter().flatten().collect();
    Ok(ArmResult {
        arm,
        final_loss,
        weights: weights.clone(),
        ap50: average_precision(&detections, gts, MatchRule::iou(0.5)?)?,
        ap_center: average_precision(&detections, gts, MatchRule::CenterInside)?,
        ap75: average_precision(&detections, gts, MatchRule::iou(0.75)?)?,
        detections,
    })
}

/// Generates scenes, trains both heads and evaluates them on held-out scenes.
pub fn run_experiment(config: &RunConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let n_train = config.train_scenes;
    let train = prepare(generate_scenes(config, 0..n_train)?)?;
    let test = prepare(generate_scenes(config, n_train..n_train + config.test_scenes)?)?;
    let ground_truth: Vec<GroundTruth> = test.iter().flat_map(|p| p.scene.lesions.iter().cloned()).collect();
    if ground_truth.is_empty() {
        return Err(CenError::EmptyEvaluationSet);
    }

    let base_pipe = config.pipeline();
    let fused_pipe = PipelineConfig { fusion: FusionMode::Contralateral, ..base_pipe };
    let mut samples = collect_samples(&train, &IdentityStn, &fused_pipe)?;
    let params = train_params(config);

    let mut arms = Vec::with_capacity(2);
    for arm in [Arm::ProposalOnly, Arm::Fused] {
        let pipe = PipelineConfig { fusion: arm.fusion(), ..base_pipe };
        let head = HeadConfig::new(
            config.num_classes,
            pipe.head_input_len(config.channels),
            config.hidden,
            HeadMode::FullySupervised,
        )?;
        let mut trained = train_head(&examples(&samples, arm), &head, &params)?;
        let result = match (arm, config.stn_mode) {
            (Arm::Fused, StnMode::Linear) => {
                let stn = fine_tune_stn(&train, &samples, &trained.weights, &head, &pipe, config)?;
                samples = collect_samples(&train, &stn, &pipe)?;
                trained = train_head(&examples(&samples, arm), &head, &params)?;
                evaluate(arm, &test, &stn, &trained.weights, &head, &pipe, &ground_truth, trained.final_loss())?
            }
            _ => {
                evaluate(arm, &test, &IdentityStn, &trained.weights, &head, &pipe, &ground_truth, trained.final_loss())?
            }
        };
        arms.push(result);
    }
    let arms: [ArmResult; 2] = arms.try_into().expect("two arms");
    Ok(ExperimentReport { config: config.clone(), arms, ground_truth })
}
