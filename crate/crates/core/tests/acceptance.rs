//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.

mod common;

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use cen_core::evaluation::{
    average_precision, confusion_matrix, segmentation_metrics, wilcoxon_signed_rank, GroundTruth, ImageDetection,
    MatchRule,
};
use cen_core::fusion::{head_backward, head_forward, HeadConfig, HeadMode, HeadUpstream, HeadWeights, Label};
use cen_core::geometry::{convex_hull, min_area_rect, reflect_box};
use cen_core::harness::config::RunConfig;
use cen_core::harness::experiment::run_experiment;
use cen_core::pipeline::{
    extract_weak_proposals, nms, nms_proposals, run_fully_supervised, Detection, PipelineConfig, ProbabilityMap,
    Proposal,
};
use cen_core::tensorops::{roi_pool, sample_patch, sample_patch_grad, FeatureMap, FeatureVector};
use cen_core::transform::{compose_transform, map_point, CanonicalSize, FixedStn, IdentityStn, StnParams};
use cen_core::{BinaryMask, BoundingBox, CenError, Point2};
use common::*;
use rand::Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn geometry_suite() -> Outcome {
    let mut r = rng(101);
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let b = random_box(&mut r, 600.0);
        let line = random_line(&mut r, 600.0);
        let o = reflect_box(&b, &line);
        let back = reflect_box(&o, &line);
        let inv = (back.x - b.x).abs().max((back.y - b.y).abs()).max((back.w - b.w).abs()).max((back.h - b.h).abs());
        ensure(inv < 1e-9, || format!("pair {i}: involution error {inv:e}"))?;
        ensure(o.w == b.w && o.h == b.h, || format!("pair {i}: size changed"))?;
        let (c0, c1) = (b.center(), o.center());
        let (mx, my) = ((c0.x + c1.x) / 2.0, (c0.y + c1.y) / 2.0);
        let (dx, dy) = (c1.x - c0.x, c1.y - c0.y);
        let on_line = (line.a * mx + line.b * my + line.c).abs();
        let along_normal = (-line.b * dx + line.a * dy).abs();
        worst = worst.max(on_line).max(along_normal);
        ensure(on_line < 1e-9 && along_normal < 1e-9, || format!("pair {i}: residuals {on_line:e}, {along_normal:e}"))?;
    }
    let mut worst_rect = 0.0f64;
    for i in 0..100 {
        let n = r.gen_range(3..40);
        let cx = r.gen_range(-100.0..100.0);
        let cy = r.gen_range(-100.0..100.0);
        let stretch = r.gen_range(1.0..6.0);
        let rot: f64 = r.gen_range(0.0..std::f64::consts::PI);
        let pts: Vec<Point2> = (0..n)
            .map(|_| {
                let u = r.gen_range(-20.0..20.0) * stretch;
                let v = r.gen_range(-20.0..20.0);
                Point2::new(cx + u * rot.cos() - v * rot.sin(), cy + u * rot.sin() + v * rot.cos())
            })
            .collect();
        let rect = min_area_rect(&convex_hull(&pts).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        let exact = min_rect_area_ref(&pts);
        let sweep = min_rect_area_sweep(&pts);
        let gap = (rect.area() - exact).abs();
        worst_rect = worst_rect.max(gap);
        ensure(gap < 1e-6, || format!("set {i}: area {} vs brute force {exact}", rect.area()))?;
        ensure(rect.area() <= sweep + 1e-6, || format!("set {i}: area {} above sweep {sweep}", rect.area()))?;
        ensure(pts.iter().all(|p| rect.contains(*p, 1e-6)), || format!("set {i}: point outside rectangle"))?;
    }
    Ok(format!("1000 pairs, max residual {worst:.1e}; 100 point sets, max area gap {worst_rect:.1e}"))
}

/// Whether any bilinear sample lands within `margin` of a grid line, where
/// the sampler is not differentiable.
fn near_kink(t: &cen_core::AffineTransform, canon: CanonicalSize, stride: usize, margin: f64) -> bool {
    for v in 0..canon.h0 {
        for u in 0..canon.w0 {
            let q = map_point(t, Point2::new(u as f64, v as f64));
            for c in [q.x / stride as f64, q.y / stride as f64] {
                let f = c - c.floor();
                if f < margin || f > 1.0 - margin {
                    return true;
                }
            }
        }
    }
    false
}

fn sampler_gradients(r: &mut rand_chacha::ChaCha8Rng) -> Result<(usize, f64), String> {
    let h = 1e-6;
    let mut checked = 0;
    let mut worst = 0.0f64;
    while checked < 100 {
        let stride = [1usize, 2, 4, 8][r.gen_range(0..4)];
        let (mh, mw) = (r.gen_range(4..10), r.gen_range(4..10));
        let channels = r.gen_range(1..4);
        let map = random_map(r, channels, mh, mw, stride);
        let canon = CanonicalSize::new(r.gen_range(2..7), r.gen_range(2..7)).unwrap();
        let ext_w = (mw * stride) as f64;
        let ext_h = (mh * stride) as f64;
        let expanded = BoundingBox::new(
            r.gen_range(-0.2..0.5) * ext_w,
            r.gen_range(-0.2..0.5) * ext_h,
            r.gen_range(0.3..0.8) * ext_w,
            r.gen_range(0.3..0.8) * ext_h,
        )
        .unwrap();
        let params = StnParams::new(
            r.gen_range(0.7..1.3),
            r.gen_range(0.7..1.3),
            r.gen_range(-2.0..2.0),
            r.gen_range(-2.0..2.0),
            r.gen_range(-0.3..0.3),
        )
        .unwrap();
        let t = compose_transform(&expanded, &params, canon);
        if near_kink(&t, canon, stride, 1e-3) {
            continue;
        }
        let upstream = random_map(r, map.channels, canon.h0, canon.w0, 1);
        let loss = |p: &StnParams| {
            let t = compose_transform(&expanded, p, canon);
            let out = sample_patch(&map, &t, canon, canon.w0, canon.h0).unwrap();
            out.data.iter().zip(&upstream.data).map(|(a, b)| a * b).sum::<f64>()
        };
        let g = sample_patch_grad(&map, &expanded, &params, canon, &upstream).map_err(|e| e.to_string())?;
        let base = params.to_array();
        for k in 0..5 {
            let mut plus = base;
            let mut minus = base;
            plus[k] += h;
            minus[k] -= h;
            let numeric = (loss(&StnParams::from_array(plus).unwrap()) - loss(&StnParams::from_array(minus).unwrap()))
                / (2.0 * h);
            let e = rel_err(g.params[k], numeric);
            worst = worst.max(e);
            ensure(e < 1e-5, || {
                format!("sampler config {checked}, param {k}: analytic {} numeric {numeric}", g.params[k])
            })?;
        }
        checked += 1;
    }
    Ok((checked, worst))
}

fn head_gradients(r: &mut rand_chacha::ChaCha8Rng) -> Result<(usize, f64), String> {
    let h = 1e-6;
    let mut checked = 0;
    let mut worst = 0.0f64;
    while checked < 100 {
        let m = r.gen_range(2..5);
        let mode = if checked % 2 == 0 { HeadMode::FullySupervised } else { HeadMode::WeaklySupervised };
        let cfg = HeadConfig::new(m, r.gen_range(2..8), r.gen_range(2..7), mode).unwrap();
        let mut w = HeadWeights::init(&cfg, r.gen());
        w.b1.mapv_inplace(|_| r.gen_range(-0.5..0.5));
        let x = FeatureVector::new((0..cfg.input_len).map(|_| r.gen_range(-2.0..2.0)).collect());
        let pre = w.w1.dot(&ndarray::ArrayView1::from(&x.data)) + &w.b1;
        if pre.iter().any(|v| v.abs() < 1e-3) {
            continue;
        }
        let n_off = if mode == HeadMode::FullySupervised { 4 * m } else { 0 };
        let d_offsets: Vec<f64> = (0..n_off).map(|_| r.gen_range(-1.0..1.0)).collect();
        let upstream = if checked % 4 < 2 {
            HeadUpstream::Output {
                d_probs: (0..m).map(|_| r.gen_range(-1.0..1.0)).collect(),
                d_offsets: d_offsets.clone(),
            }
        } else {
            HeadUpstream::CrossEntropy {
                label: Label::Disease(r.gen_range(1..=m as u32)),
                d_offsets: d_offsets.clone(),
            }
        };
        let loss = |w: &HeadWeights| {
            let out = head_forward(&x, w, &cfg).unwrap();
            let offs: Vec<f64> = [&out.dx, &out.dy, &out.dw, &out.dh].into_iter().flatten().copied().collect();
            let lin: f64 = offs.iter().zip(&d_offsets).map(|(a, b)| a * b).sum();
            match &upstream {
                HeadUpstream::Output { d_probs, .. } => {
                    out.probs.iter().zip(d_probs).map(|(a, b)| a * b).sum::<f64>() + lin
                }
                HeadUpstream::CrossEntropy { label: Label::Disease(c), .. } => -out.probs[*c as usize - 1].ln() + lin,
                HeadUpstream::CrossEntropy { .. } => unreachable!(),
            }
        };
        let g = head_backward(&x, &w, &cfg, &upstream).map_err(|e| e.to_string())?;
        let mut check = |name: &str, analytic: f64, perturb: &dyn Fn(&mut HeadWeights, f64)| -> Result<(), String> {
            let mut wp = w.clone();
            perturb(&mut wp, h);
            let mut wm = w.clone();
            perturb(&mut wm, -h);
            let numeric = (loss(&wp) - loss(&wm)) / (2.0 * h);
            let e = rel_err(analytic, numeric);
            worst = worst.max(e);
            ensure(e < 1e-5, || format!("head config {checked}, {name}: analytic {analytic} numeric {numeric}"))
        };
        for ((i, j), a) in g.w1.indexed_iter() {
            check("W1", *a, &|w, d| w.w1[[i, j]] += d)?;
        }
        for (i, a) in g.b1.indexed_iter() {
            check("b1", *a, &|w, d| w.b1[i] += d)?;
        }
        for ((i, j), a) in g.w2.indexed_iter() {
            check("W2", *a, &|w, d| w.w2[[i, j]] += d)?;
        }
        for (i, a) in g.b2.indexed_iter() {
            check("b2", *a, &|w, d| w.b2[i] += d)?;
        }
        checked += 1;
    }
    Ok((checked, worst))
}

fn gradient_checks() -> Outcome {
    let mut r = rng(202);
    let (ns, ws) = sampler_gradients(&mut r)?;
    let (nh, wh) = head_gradients(&mut r)?;
    Ok(format!("sampler {ns} configs (max rel {ws:.1e}), head {nh} configs (max rel {wh:.1e})"))
}

fn oracle_equivalence() -> Outcome {
    let mut r = rng(303);
    for trial in 0..1000 {
        let n = r.gen_range(0..=10);
        let boxes: Vec<BoundingBox> = (0..n).map(|_| integer_box(&mut r, 40, 30)).collect();
        let scores: Vec<f64> = (0..n).map(|_| quantized(&mut r, 5)).collect();
        let classes: Vec<u32> = (0..n).map(|_| r.gen_range(1..=2)).collect();
        let t = [0.1, 0.3, 0.5, 0.7, 0.9][trial % 5];
        let dets: Vec<Detection> =
            (0..n).map(|i| Detection { bbox: boxes[i], class_id: classes[i], score: scores[i] }).collect();
        let want: Vec<Detection> = nms_ref(&boxes, &scores, &classes, t).into_iter().map(|i| dets[i]).collect();
        ensure(nms(&dets, t) == want, || format!("nms trial {trial} differs"))?;
        let props: Vec<Proposal> = (0..n).map(|i| Proposal { bbox: boxes[i], score: scores[i] }).collect();
        let want: Vec<Proposal> = nms_ref(&boxes, &scores, &vec![0; n], t).into_iter().map(|i| props[i]).collect();
        ensure(nms_proposals(&props, t) == want, || format!("proposal nms trial {trial} differs"))?;
    }
    for trial in 0..500 {
        let stride = [1usize, 4, 16, 32][trial % 4];
        let (c, h, w) = (r.gen_range(1..4), r.gen_range(1..12), r.gen_range(1..12));
        let map = random_map(&mut r, c, h, w, stride);
        let s = stride as f64;
        let b = BoundingBox::new(
            r.gen_range(-4.0..14.0) * s,
            r.gen_range(-4.0..14.0) * s,
            r.gen_range(0.2..10.0) * s,
            r.gen_range(0.2..10.0) * s,
        )
        .unwrap();
        let grid = r.gen_range(1..9);
        match (roi_pool(&map, &b, grid), roi_pool_ref(&map, &b, grid)) {
            (Ok(v), Some(want)) => ensure(v.data == want, || format!("roi trial {trial} differs"))?,
            (Err(CenError::EmptyRoi), None) => {}
            (got, want) => {
                return Err(format!("roi trial {trial}: {:?} vs {:?}", got.map(|v| v.len()), want.map(|v| v.len())))
            }
        }
    }
    for trial in 0..300 {
        let (m, h, w) = (r.gen_range(1..5), r.gen_range(1..8), r.gen_range(1..8));
        let values: Vec<f64> = (0..m * h * w).map(|_| quantized(&mut r, 6)).collect();
        let p = ProbabilityMap::new(m, h, w, values).unwrap();
        let k = r.gen_range(0..=m * h * w + 2);
        let got: Vec<(f64, usize, usize, usize)> = extract_weak_proposals(&p, k)
            .iter()
            .map(|wp| (wp.score, wp.class_id as usize - 1, wp.bbox.y as usize / 32, wp.bbox.x as usize / 32))
            .collect();
        ensure(got == weak_ref(&p, k), || format!("weak trial {trial} differs"))?;
    }
    let mut exact_cases = 0;
    for trial in 0..400 {
        let n = r.gen_range(5..=12);
        let pairs: Vec<(f64, f64)> = (0..n)
            .map(|_| {
                let a = r.gen_range(0..20) as f64;
                let d = r.gen_range(1..6) as f64 * if r.gen_bool(0.5) { 1.0 } else { -1.0 };
                (a, a + d)
            })
            .collect();
        let res = wilcoxon_signed_rank(&pairs).map_err(|e| e.to_string())?;
        let (stat, p) = wilcoxon_enum(&pairs);
        ensure(res.exact && res.statistic == stat && res.p_value == p, || {
            format!("wilcoxon trial {trial}: ({}, {}) vs ({stat}, {p})", res.statistic, res.p_value)
        })?;
        exact_cases += 1;
    }
    Ok(format!("1000 NMS sets, 500 RoI pools, 300 weak maps, {exact_cases} Wilcoxon samples: all identical"))
}

fn gt(img: &str, c: u32, b: BoundingBox) -> GroundTruth {
    GroundTruth { image_id: img.into(), class_id: c, bbox: b }
}

fn det(img: &str, c: u32, b: BoundingBox, s: f64) -> ImageDetection {
    ImageDetection::new(img, Detection { bbox: b, class_id: c, score: s })
}

fn bx(x: f64, y: f64, w: f64, h: f64) -> BoundingBox {
    BoundingBox::new(x, y, w, h).unwrap()
}

fn metric_fixtures() -> Outcome {
    let gts = vec![gt("a", 1, bx(0.0, 0.0, 10.0, 10.0)), gt("b", 1, bx(20.0, 20.0, 10.0, 10.0))];
    let dets = vec![
        det("a", 1, bx(0.0, 0.0, 10.0, 10.0), 0.9),
        det("a", 1, bx(100.0, 100.0, 10.0, 10.0), 0.8),
        det("b", 1, bx(20.0, 20.0, 10.0, 10.0), 0.7),
    ];
    let ap = average_precision(&dets, &gts, MatchRule::iou(0.5).unwrap()).unwrap().mean;
    ensure((ap - 5.0 / 6.0).abs() < 1e-9, || format!("hand AP {ap}"))?;

    // four predicted pixels, four true pixels, three shared
    let pred = BinaryMask::from_fn(4, 4, |_, y| y == 0);
    let truth = BinaryMask::from_fn(4, 4, |x, y| (y == 0 && x < 3) || (x, y) == (0, 1));
    let dice = segmentation_metrics(&pred, &truth).unwrap().dice;
    ensure((dice - 0.75).abs() < 1e-12, || format!("dice {dice}"))?;

    let cm_gts = vec![
        gt("a", 1, bx(0.0, 0.0, 10.0, 10.0)),
        gt("a", 2, bx(50.0, 50.0, 10.0, 10.0)),
        gt("b", 1, bx(0.0, 0.0, 10.0, 10.0)),
    ];
    let cm_dets = vec![
        det("a", 1, bx(0.0, 0.0, 10.0, 10.0), 0.9),
        det("a", 1, bx(50.0, 50.0, 10.0, 10.0), 0.8),
        det("b", 2, bx(100.0, 0.0, 10.0, 10.0), 0.7),
    ];
    let cm = confusion_matrix(&cm_dets, &cm_gts, 2, 0.5).unwrap();
    ensure(cm.counts == vec![vec![0, 0, 1], vec![1, 1, 0], vec![0, 1, 0]], || format!("confusion {:?}", cm.counts))?;

    let mut r = rng(404);
    let thresholds: Vec<f64> = (1..20).map(|i| i as f64 * 0.05).collect();
    for set in 0..100 {
        let images = r.gen_range(1..5);
        let mut g = Vec::new();
        let mut d = Vec::new();
        for im in 0..images {
            let id = format!("i{im}");
            for _ in 0..r.gen_range(1..4) {
                let b = integer_box(&mut r, 60, 25);
                let c = r.gen_range(1..=2);
                g.push(gt(&id, c, b));
                for _ in 0..r.gen_range(0..4) {
                    let j = bx(
                        b.x + r.gen_range(-6.0..6.0),
                        b.y + r.gen_range(-6.0..6.0),
                        b.w * r.gen_range(0.7..1.3),
                        b.h * r.gen_range(0.7..1.3),
                    );
                    d.push(det(&id, c, j, r.gen_range(0.0..1.0)));
                }
            }
            for _ in 0..r.gen_range(0..3) {
                d.push(det(&id, r.gen_range(1..=2), integer_box(&mut r, 60, 25), r.gen_range(0.0..1.0)));
            }
        }
        let aps: Vec<f64> =
            thresholds.iter().map(|&t| average_precision(&d, &g, MatchRule::iou(t).unwrap()).unwrap().mean).collect();
        for w in aps.windows(2) {
            ensure(w[1] <= w[0] + 1e-12, || format!("set {set}: AP rose from {} to {}", w[0], w[1]))?;
        }
    }
    Ok(format!("AP {ap:.10}, dice {dice}, confusion matrix as derived, AP monotone in t on 100 sets"))
}

fn contract() -> Outcome {
    let mut r = rng(505);
    let config = PipelineConfig::default();
    let mut max_seen = 0;
    for trial in 0..40 {
        let channels = r.gen_range(1..4);
        let map = random_map(&mut r, channels, 16, 16, 32).scaled(r.gen_range(0.5..20.0));
        let head =
            HeadConfig::new(r.gen_range(1..5), config.head_input_len(channels), 16, HeadMode::FullySupervised).unwrap();
        let weights = HeadWeights::init(&head, r.gen());
        let line = random_line(&mut r, 512.0);
        let n = r.gen_range(0..250);
        let proposals: Vec<Proposal> =
            (0..n).map(|_| Proposal { bbox: random_box(&mut r, 512.0), score: r.gen_range(0.0..1.0) }).collect();
        let stn = FixedStn(
            StnParams::new(r.gen_range(0.8..1.2), r.gen_range(0.8..1.2), 0.0, 0.0, r.gen_range(-0.2..0.2)).unwrap(),
        );
        let dets = run_fully_supervised(&map, &proposals, &line, &stn, &weights, &head, &config)
            .map_err(|e| format!("trial {trial}: {e}"))?;
        max_seen = max_seen.max(dets.len());
        ensure(dets.len() <= 20, || format!("trial {trial}: {} detections", dets.len()))?;
        ensure(dets.iter().all(|d| d.score > 0.05), || format!("trial {trial}: score at or below 0.05"))?;
    }
    let map = FeatureMap::zeros(2, 16, 16, 32);
    let head = HeadConfig::new(3, config.head_input_len(2), 8, HeadMode::FullySupervised).unwrap();
    let empty = run_fully_supervised(
        &map,
        &[],
        &random_line(&mut r, 512.0),
        &IdentityStn,
        &HeadWeights::zeros(&head),
        &head,
        &config,
    )
    .map_err(|e| format!("empty input: {e}"))?;
    ensure(empty.is_empty(), || "empty input produced detections".into())?;
    Ok(format!("40 random runs (up to {max_seen} detections), empty input handled"))
}

fn directional_experiment() -> Outcome {
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in 1..=5u64 {
        let config = RunConfig { seed, ..RunConfig::default() };
        let report = run_experiment(&config).map_err(|e| format!("seed {seed}: {e}"))?;
        let (a, b) = (
            report.arm(cen_core::harness::experiment::Arm::ProposalOnly).ap50.mean,
            report.arm(cen_core::harness::experiment::Arm::Fused).ap50.mean,
        );
        if b > a {
            wins += 1;
        }
        rows.push(format!("seed {seed}: A {a:.3} B {b:.3}"));
    }
    let summary = format!("B > A on {wins}/5 seeds ({})", rows.join("; "));
    ensure(wins >= 4, || summary.clone())?;
    Ok(summary)
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let run = |name: &str| -> Result<std::path::PathBuf, String> {
        let dir = tmp.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_cen"))
            .args(["--seed", "7", "--out"])
            .arg(&dir)
            .arg("experiment")
            .output()
            .map_err(|e| e.to_string())?;
        ensure(status.status.success(), || String::from_utf8_lossy(&status.stderr).into_owned())?;
        Ok(dir)
    };
    let (a, b) = (run("a")?, run("b")?);
    let mut names: Vec<String> = std::fs::read_dir(&a)
        .map_err(|e| e.to_string())?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".csv"))
        .collect();
    names.sort();
    ensure(names.len() >= 4, || format!("expected CSV outputs, found {names:?}"))?;
    for n in &names {
        let read = |d: &Path| std::fs::read(d.join(n)).map_err(|e| format!("{n}: {e}"));
        ensure(read(&a)? == read(&b)?, || format!("{n} differs between runs"))?;
    }
    Ok(format!("{} CSV files byte-identical across two CLI runs", names.len()))
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 7] = [
        ("geometry suite", geometry_suite),
        ("transform and sampler gradient checks", gradient_checks),
        ("oracle equivalence", oracle_equivalence),
        ("metric fixtures", metric_fixtures),
        ("inference contract", contract),
        ("directional synthetic experiment", directional_experiment),
        ("experiment determinism", determinism),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name} ({secs:.1}s): {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 7 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
