use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cen_core::evaluation::{
    average_precision, confusion_matrix, localization_accuracy, segmentation_metrics, wilcoxon_signed_rank,
    GroundTruth, ImageDetection, MatchRule, LOCALIZATION_THRESHOLDS,
};
use cen_core::fusion::{fuse, HeadMode};
use cen_core::geometry::{expand_patch, reflect_box, spine_line};
use cen_core::harness::boxes::{read_boxes, write_boxes, BoxRecord};
use cen_core::harness::config::RunConfig;
use cen_core::harness::ctf::{
    feature_map_to_tensor, read_head, read_tensor, tensor_to_feature_map, tensor_to_probability_map, write_tensor,
};
use cen_core::harness::experiment::run_experiment;
use cen_core::harness::pgm::{read_pgm, write_pgm};
use cen_core::harness::synth::generate_scene;
use cen_core::pipeline::{
    nms, nms_proposals, run_fully_supervised, run_weakly_supervised_with, FusionMode, PipelineConfig, WeakSelection,
};
use cen_core::tensorops::{roi_pool, sample_patch, FeatureVector};
use cen_core::transform::{compose_transform, CanonicalSize, FixedStn, IdentityStn, StnParams, StnPredictor};
use cen_core::{BoundingBox, CenError, Result, SpineLine};

#[derive(Parser)]
#[command(name = "cen", version, about = "Contralaterally enhanced detection toolkit")]
struct Cli {
    /// `key = value` run configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for commands that write files.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides any configuration key, e.g. `--set epochs=50`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the spine line to the largest component of a P5 PGM mask.
    SpineLine { mask: PathBuf },
    /// Reflect a box across a line and expand the result.
    Reflect {
        #[arg(long, value_name = "A,B,C")]
        line: String,
        #[arg(long = "box", value_name = "X,Y,W,H")]
        bbox: String,
    },
    /// Build the canonical-to-image transform and optionally sample a patch.
    StnApply {
        /// Expanded contralateral patch.
        #[arg(long = "box", value_name = "X,Y,W,H")]
        bbox: String,
        #[arg(long, value_name = "SX,SY,TX,TY,THETA", default_value = "1,1,0,0,0")]
        params: String,
        #[arg(long, value_name = "W0xH0", default_value = "64x64")]
        canon: String,
        #[command(flatten)]
        features: Option<FeatureArgs>,
        /// Where to write the sampled patch as CTF1 (needs --features).
        #[arg(long)]
        patch: Option<PathBuf>,
    },
    /// RoI max pooling of one box.
    RoiPool {
        #[command(flatten)]
        features: FeatureArgs,
        #[arg(long = "box", value_name = "X,Y,W,H")]
        bbox: String,
        #[arg(long, default_value_t = 7)]
        grid: usize,
    },
    /// Merge two CTF1 feature vectors into `[f + f̂ ; f − f̂]`.
    Fuse {
        #[arg(long)]
        f: PathBuf,
        #[arg(long = "f-hat")]
        f_hat: PathBuf,
    },
    /// Greedy NMS over a boxes CSV.
    Nms {
        boxes: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        /// Ignore classes (proposal-style NMS).
        #[arg(long)]
        agnostic: bool,
    },
    /// Fully supervised inference for one image.
    InferFull {
        #[command(flatten)]
        features: FeatureArgs,
        #[arg(long)]
        proposals: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value = "image")]
        image_id: String,
    },
    /// Weakly supervised inference from a CTF1 probability map.
    InferWeak {
        #[command(flatten)]
        features: FeatureArgs,
        #[arg(long)]
        probs: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        /// Use the k best cells instead of the probability threshold.
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long, default_value = "image")]
        image_id: String,
    },
    /// Evaluation metrics.
    Eval(EvalArgs),
    /// Generate synthetic scenes into --out.
    Gen {
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
    /// Train and compare the proposal-only and fused heads.
    Experiment,
}

#[derive(Args)]
struct FeatureArgs {
    /// CTF1 `C × H × W` feature map.
    #[arg(long = "features")]
    path: PathBuf,
    #[arg(long, default_value_t = 32)]
    stride: usize,
}

#[derive(Args)]
struct ModelArgs {
    /// Spine mask (P5 PGM).
    #[arg(long)]
    mask: PathBuf,
    /// Head archive.
    #[arg(long)]
    head: PathBuf,
    /// Fixed refinement parameters; identity when omitted.
    #[arg(long, value_name = "SX,SY,TX,TY,THETA")]
    stn_params: Option<String>,
    /// The head was trained on proposal features alone.
    #[arg(long)]
    proposal_only: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, value_enum)]
    metric: Metric,
    #[arg(long)]
    detections: Option<PathBuf>,
    #[arg(long = "ground-truth")]
    ground_truth: Option<PathBuf>,
    /// IoU threshold; AP uses the center rule when omitted.
    #[arg(long)]
    iou: Option<f64>,
    #[arg(long)]
    num_classes: Option<usize>,
    #[arg(long)]
    pred_mask: Option<PathBuf>,
    #[arg(long)]
    gt_mask: Option<PathBuf>,
    /// CSV with header `first,second`.
    #[arg(long)]
    pairs: Option<PathBuf>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Metric {
    Ap,
    Accuracy,
    Confusion,
    Seg,
    Wilcoxon,
}

fn numbers<const N: usize>(text: &str, what: &str) -> Result<[f64; N]> {
    let vals: Vec<f64> =
        text.split(',').map(|s| s.trim().parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|_| {
            CenError::InvalidParameter(format!("{what}: expected {N} comma-separated numbers, got {text:?}"))
        })?;
    vals.try_into()
        .map_err(|_| CenError::InvalidParameter(format!("{what}: expected {N} comma-separated numbers, got {text:?}")))
}

fn parse_box(text: &str) -> Result<BoundingBox> {
    let [x, y, w, h] = numbers(text, "box")?;
    BoundingBox::new(x, y, w, h)
}

fn parse_canon(text: &str) -> Result<CanonicalSize> {
    let (w, h) = text
        .split_once('x')
        .ok_or_else(|| CenError::InvalidParameter(format!("canonical size must look like 64x64, got {text:?}")))?;
    let parse = |s: &str| s.trim().parse::<usize>().map_err(|_| CenError::InvalidParameter(format!("bad size {s:?}")));
    CanonicalSize::new(parse(w)?, parse(h)?)
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut config = RunConfig::default();
    if let Some(path) = &cli.config {
        config.apply_text(&fs::read_to_string(path)?)?;
    }
    for o in &cli.overrides {
        let (k, v) =
            o.split_once('=').ok_or_else(|| CenError::Config(format!("override must be KEY=VALUE, got {o:?}")))?;
        config.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn out_dir(cli: &Cli) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from("cen_out"))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path)?))
}

fn load_features(args: &FeatureArgs) -> Result<cen_core::FeatureMap> {
    tensor_to_feature_map(&read_tensor(open(&args.path)?)?, args.stride)
}

fn load_vector(path: &Path) -> Result<FeatureVector> {
    let t = read_tensor(open(path)?)?;
    Ok(FeatureVector::new(t.data.iter().map(|&v| v as f64).collect()))
}

fn load_gts(path: &Option<PathBuf>) -> Result<Vec<GroundTruth>> {
    let path = path.as_ref().ok_or_else(|| CenError::InvalidParameter("--ground-truth is required".into()))?;
    read_boxes(open(path)?)?.iter().map(BoxRecord::to_ground_truth).collect()
}

fn load_dets(path: &Option<PathBuf>) -> Result<Vec<ImageDetection>> {
    let path = path.as_ref().ok_or_else(|| CenError::InvalidParameter("--detections is required".into()))?;
    read_boxes(open(path)?)?.iter().map(BoxRecord::to_detection).collect()
}

struct Model {
    line: SpineLine,
    stn: Box<dyn StnPredictor>,
    head: cen_core::fusion::HeadConfig,
    weights: cen_core::fusion::HeadWeights,
    pipe: PipelineConfig,
}

fn load_model(args: &ModelArgs, mode: HeadMode, config: &RunConfig) -> Result<Model> {
    let line = spine_line(&read_pgm(open(&args.mask)?)?)?;
    let stn: Box<dyn StnPredictor> = match &args.stn_params {
        Some(p) => Box::new(FixedStn(StnParams::from_array(numbers(p, "stn params")?)?)),
        None => Box::new(IdentityStn),
    };
    let (head, weights) = read_head(open(&args.head)?, mode)?;
    let fusion = if args.proposal_only { FusionMode::ProposalOnly } else { FusionMode::Contralateral };
    Ok(Model { line, stn, head, weights, pipe: PipelineConfig { fusion, ..config.pipeline() } })
}

/// Prints `-0` as `0`.
fn z(v: f64) -> f64 {
    v + 0.0
}

fn print_detections(out: &mut impl Write, image_id: &str, dets: &[cen_core::Detection]) -> Result<()> {
    let recs: Vec<_> = dets.iter().map(|d| BoxRecord::from_detection(image_id, d)).collect();
    write_boxes(out, &recs)
}

fn eval(args: &EvalArgs, out: &mut impl Write) -> Result<()> {
    match args.metric {
        Metric::Ap => {
            let rule = match args.iou {
                Some(t) => MatchRule::iou(t)?,
                None => MatchRule::CenterInside,
            };
            let rep = average_precision(&load_dets(&args.detections)?, &load_gts(&args.ground_truth)?, rule)?;
            writeln!(out, "class,ap")?;
            for (c, v) in &rep.per_class {
                writeln!(out, "{c},{v}")?;
            }
            writeln!(out, "mean,{}", rep.mean)?;
        }
        Metric::Accuracy => {
            let thresholds: Vec<f64> = match args.iou {
                Some(t) => vec![t],
                None => LOCALIZATION_THRESHOLDS.to_vec(),
            };
            let table =
                localization_accuracy(&load_dets(&args.detections)?, &load_gts(&args.ground_truth)?, &thresholds);
            writeln!(out, "class,threshold,accuracy")?;
            for (c, row) in &table {
                for (t, a) in row {
                    writeln!(out, "{c},{t},{a}")?;
                }
            }
        }
        Metric::Confusion => {
            let gts = load_gts(&args.ground_truth)?;
            let m = args.num_classes.unwrap_or_else(|| gts.iter().map(|g| g.class_id as usize).max().unwrap_or(0));
            let cm = confusion_matrix(&load_dets(&args.detections)?, &gts, m, args.iou.unwrap_or(0.5))?;
            writeln!(out, "gt,pred,count")?;
            for (i, row) in cm.counts.iter().enumerate() {
                for (j, n) in row.iter().enumerate() {
                    writeln!(out, "{i},{j},{n}")?;
                }
            }
        }
        Metric::Seg => {
            let need = |p: &Option<PathBuf>, flag: &str| {
                p.clone().ok_or_else(|| CenError::InvalidParameter(format!("{flag} is required")))
            };
            let pred = read_pgm(open(&need(&args.pred_mask, "--pred-mask")?)?)?;
            let gt = read_pgm(open(&need(&args.gt_mask, "--gt-mask")?)?)?;
            let s = segmentation_metrics(&pred, &gt)?;
            writeln!(out, "dice,pixel_acc,mean_acc,mean_iu,fw_iu")?;
            writeln!(out, "{},{},{},{},{}", s.dice, s.pixel_acc, s.mean_acc, s.mean_iu, s.fw_iu)?;
        }
        Metric::Wilcoxon => {
            let path = args.pairs.as_ref().ok_or_else(|| CenError::InvalidParameter("--pairs is required".into()))?;
            let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(open(path)?);
            let pairs: Vec<(f64, f64)> = rdr.deserialize().collect::<std::result::Result<_, _>>()?;
            let w = wilcoxon_signed_rank(&pairs)?;
            writeln!(out, "statistic,w_plus,w_minus,n,p_value,exact")?;
            writeln!(out, "{},{},{},{},{},{}", z(w.statistic), z(w.w_plus), z(w.w_minus), w.n, w.p_value, w.exact)?;
        }
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let stdout = io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    match &cli.command {
        Command::SpineLine { mask } => {
            let line = spine_line(&read_pgm(open(mask)?)?)?;
            writeln!(out, "a,b,c")?;
            writeln!(out, "{},{},{}", z(line.a), z(line.b), z(line.c))?;
        }
        Command::Reflect { line, bbox } => {
            let [a, b, c] = numbers(line, "line")?;
            let line = SpineLine::new(a, b, c)?;
            let r = reflect_box(&parse_box(bbox)?, &line);
            let e = expand_patch(&r);
            writeln!(out, "patch,x,y,w,h")?;
            writeln!(out, "reflected,{},{},{},{}", z(r.x), z(r.y), r.w, r.h)?;
            writeln!(out, "expanded,{},{},{},{}", z(e.x), z(e.y), e.w, e.h)?;
        }
        Command::StnApply { bbox, params, canon, features, patch } => {
            let canon = parse_canon(canon)?;
            let params = StnParams::from_array(numbers(params, "params")?)?;
            let t = compose_transform(&parse_box(bbox)?, &params, canon);
            let [a11, a12, a13, a21, a22, a23] = t.to_array().map(z);
            writeln!(out, "a11,a12,a13,a21,a22,a23")?;
            writeln!(out, "{a11},{a12},{a13},{a21},{a22},{a23}")?;
            match (features, patch) {
                (Some(f), Some(path)) => {
                    let sampled = sample_patch(&load_features(f)?, &t, canon, canon.w0, canon.h0)?;
                    write_tensor(BufWriter::new(File::create(path)?), &feature_map_to_tensor(&sampled))?;
                }
                (None, None) => {}
                _ => return Err(CenError::InvalidParameter("--features and --patch must be given together".into())),
            }
        }
        Command::RoiPool { features, bbox, grid } => {
            let map = load_features(features)?;
            let v = roi_pool(&map, &parse_box(bbox)?, *grid)?;
            writeln!(out, "channel,bin_y,bin_x,value")?;
            for (i, val) in v.data.iter().enumerate() {
                writeln!(out, "{},{},{},{}", i / (grid * grid), (i / grid) % grid, i % grid, z(*val))?;
            }
        }
        Command::Fuse { f, f_hat } => {
            let merged = fuse(&load_vector(f)?, &load_vector(f_hat)?)?;
            writeln!(out, "index,value")?;
            for (i, v) in merged.data.iter().enumerate() {
                writeln!(out, "{i},{}", z(*v))?;
            }
        }
        Command::Nms { boxes, iou, agnostic } => {
            if !(*iou > 0.0 && *iou <= 1.0) {
                return Err(CenError::InvalidParameter(format!("IoU threshold {iou} outside (0, 1]")));
            }
            let recs = read_boxes(open(boxes)?)?;
            let mut kept = Vec::new();
            let mut ids: Vec<&str> = recs.iter().map(|r| r.image_id.as_str()).collect();
            ids.dedup();
            let mut seen = std::collections::BTreeSet::new();
            ids.retain(|id| seen.insert(*id));
            for id in ids {
                let group: Vec<&BoxRecord> = recs.iter().filter(|r| r.image_id == id).collect();
                if *agnostic {
                    let props: Vec<_> = group.iter().map(|r| r.to_proposal()).collect::<Result<_>>()?;
                    kept.extend(nms_proposals(&props, *iou).iter().map(|p| BoxRecord::from_proposal(id, p)));
                } else {
                    let dets: Vec<_> = group.iter().map(|r| r.to_detection().map(|d| d.det)).collect::<Result<_>>()?;
                    kept.extend(nms(&dets, *iou).iter().map(|d| BoxRecord::from_detection(id, d)));
                }
            }
            write_boxes(&mut out, &kept)?;
        }
        Command::InferFull { features, proposals, model, image_id } => {
            let config = load_config(cli)?;
            let map = load_features(features)?;
            let props: Vec<_> =
                read_boxes(open(proposals)?)?.iter().map(BoxRecord::to_proposal).collect::<Result<_>>()?;
            let m = load_model(model, HeadMode::FullySupervised, &config)?;
            let dets = run_fully_supervised(&map, &props, &m.line, m.stn.as_ref(), &m.weights, &m.head, &m.pipe)?;
            print_detections(&mut out, image_id, &dets)?;
        }
        Command::InferWeak { features, probs, model, top_k, image_id } => {
            let config = load_config(cli)?;
            let map = load_features(features)?;
            let p = tensor_to_probability_map(&read_tensor(open(probs)?)?)?;
            let m = load_model(model, HeadMode::WeaklySupervised, &config)?;
            let selection = match top_k {
                Some(k) => WeakSelection::TopK(*k),
                None => WeakSelection::Threshold(config.weak_threshold),
            };
            let dets =
                run_weakly_supervised_with(&map, &p, &m.line, m.stn.as_ref(), &m.weights, &m.head, &m.pipe, selection)?;
            print_detections(&mut out, image_id, &dets)?;
        }
        Command::Eval(args) => eval(args, &mut out)?,
        Command::Gen { index, count } => {
            let config = load_config(cli)?;
            let dir = out_dir(cli);
            fs::create_dir_all(&dir)?;
            writeln!(out, "image_id,a,b,c,lesions,proposals")?;
            for i in *index..index + count {
                let s = generate_scene(&config, i)?;
                let id = &s.image_id;
                write_tensor(
                    BufWriter::new(File::create(dir.join(format!("{id}_features.ctf")))?),
                    &feature_map_to_tensor(&s.features),
                )?;
                write_pgm(BufWriter::new(File::create(dir.join(format!("{id}_mask.pgm")))?), &s.spine_mask)?;
                let gts: Vec<_> = s.lesions.iter().map(BoxRecord::from_ground_truth).collect();
                write_boxes(File::create(dir.join(format!("{id}_gt.csv")))?, &gts)?;
                let props: Vec<_> = s.proposals.iter().map(|p| BoxRecord::from_proposal(id, p)).collect();
                write_boxes(File::create(dir.join(format!("{id}_proposals.csv")))?, &props)?;
                writeln!(
                    out,
                    "{id},{},{},{},{},{}",
                    z(s.axis.a),
                    z(s.axis.b),
                    z(s.axis.c),
                    s.lesions.len(),
                    s.proposals.len()
                )?;
            }
        }
        Command::Experiment => {
            let config = load_config(cli)?;
            let report = run_experiment(&config)?;
            report.write(&out_dir(cli))?;
            out.write_all(report.metrics_csv().as_bytes())?;
            eprint!("{}", report.table());
        }
    }
    out.flush()?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                CenError::Diverged { .. } => ExitCode::FAILURE,
                _ => ExitCode::from(2),
            }
        }
    }
}
