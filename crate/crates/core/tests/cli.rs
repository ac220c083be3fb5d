use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use cen_core::fusion::{HeadConfig, HeadMode, HeadWeights};
use cen_core::harness::boxes::read_boxes;
use cen_core::harness::ctf::{read_tensor, write_head, write_tensor, Tensor};
use cen_core::harness::pgm::write_pgm;
use cen_core::BinaryMask;

fn cen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cen")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn reflect_prints_reflected_and_expanded_boxes() {
    let out = stdout(&cen(&["reflect", "--line", "1,0,-100", "--box", "10,20,30,40"]));
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "patch,x,y,w,h");
    assert_eq!(lines[1], "reflected,161,20,30,40");
    assert_eq!(lines[2], "expanded,153.5,10,45,60");
}

#[test]
fn spine_line_from_pgm() {
    let dir = tempfile::tempdir().unwrap();
    let mask = BinaryMask::from_fn(200, 300, |x, y| (95..=105).contains(&x) && (20..280).contains(&y));
    let path = dir.path().join("mask.pgm");
    write_pgm(fs::File::create(&path).unwrap(), &mask).unwrap();
    let out = stdout(&cen(&["spine-line", p(&path)]));
    let vals: Vec<f64> = out.lines().nth(1).unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert!((vals[0] - 1.0).abs() < 1e-9 && vals[1].abs() < 1e-9 && (vals[2] + 100.0).abs() < 1e-9, "{out}");
}

#[test]
fn nms_and_ap_from_csv() {
    let dir = tempfile::tempdir().unwrap();
    let dets = dir.path().join("dets.csv");
    fs::write(
        &dets,
        "image_id,class_id,x,y,w,h,score\na,1,0,0,10,10,0.9\na,1,100,100,10,10,0.8\nb,1,20,20,10,10,0.7\na,1,1,1,10,10,0.6\n",
    )
    .unwrap();
    let gts = dir.path().join("gt.csv");
    fs::write(&gts, "image_id,class_id,x,y,w,h,score\na,1,0,0,10,10,\nb,1,20,20,10,10,\n").unwrap();

    let kept = stdout(&cen(&["nms", p(&dets), "--iou", "0.5"]));
    let recs = read_boxes(kept.as_bytes()).unwrap();
    assert_eq!(recs.len(), 3);
    assert!(recs.iter().all(|r| r.score != Some(0.6)));

    let nms_path = dir.path().join("kept.csv");
    fs::write(&nms_path, &kept).unwrap();
    let ap = stdout(&cen(&[
        "eval",
        "--metric",
        "ap",
        "--iou",
        "0.5",
        "--detections",
        p(&nms_path),
        "--ground-truth",
        p(&gts),
    ]));
    let mean: f64 = ap.lines().last().unwrap().split(',').nth(1).unwrap().parse().unwrap();
    assert!((mean - 5.0 / 6.0).abs() < 1e-9, "{ap}");

    let cm = stdout(&cen(&["eval", "--metric", "confusion", "--detections", p(&dets), "--ground-truth", p(&gts)]));
    assert!(cm.starts_with("gt,pred,count\n"));
    assert!(cm.contains("1,1,2\n"));
    let acc = stdout(&cen(&["eval", "--metric", "accuracy", "--detections", p(&dets), "--ground-truth", p(&gts)]));
    assert_eq!(acc.lines().count(), 1 + 4);
}

#[test]
fn seg_and_wilcoxon_eval() {
    let dir = tempfile::tempdir().unwrap();
    let pred = dir.path().join("pred.pgm");
    let gt = dir.path().join("gt.pgm");
    write_pgm(fs::File::create(&pred).unwrap(), &BinaryMask::from_fn(4, 4, |_, y| y == 0)).unwrap();
    write_pgm(fs::File::create(&gt).unwrap(), &BinaryMask::from_fn(4, 4, |x, y| (y == 0 && x < 3) || (x, y) == (0, 1)))
        .unwrap();
    let seg = stdout(&cen(&["eval", "--metric", "seg", "--pred-mask", p(&pred), "--gt-mask", p(&gt)]));
    assert!(seg.lines().nth(1).unwrap().starts_with("0.75,"));

    let pairs = dir.path().join("pairs.csv");
    let mut text = String::from("first,second\n");
    for i in 0..8 {
        text.push_str(&format!("{i},{}\n", i + 1));
    }
    fs::write(&pairs, text).unwrap();
    let w = stdout(&cen(&["eval", "--metric", "wilcoxon", "--pairs", p(&pairs)]));
    assert_eq!(w.lines().nth(1).unwrap(), "0,36,0,8,0.0078125,true");
}

#[test]
fn roi_pool_stn_apply_and_fuse() {
    let dir = tempfile::tempdir().unwrap();
    let feats = dir.path().join("f.ctf");
    let data: Vec<f32> = (0..2 * 4 * 4).map(|i| i as f32).collect();
    write_tensor(fs::File::create(&feats).unwrap(), &Tensor::new(vec![2, 4, 4], data).unwrap()).unwrap();
    let out =
        stdout(&cen(&["roi-pool", "--features", p(&feats), "--stride", "8", "--box", "0,0,32,32", "--grid", "2"]));
    let vals: Vec<&str> = out.lines().skip(1).collect();
    assert_eq!(vals.len(), 8);
    assert_eq!(vals[3], "0,1,1,15");
    assert_eq!(vals[7], "1,1,1,31");

    let patch = dir.path().join("patch.ctf");
    let out = stdout(&cen(&[
        "stn-apply",
        "--box",
        "0,0,9,9",
        "--canon",
        "4x4",
        "--features",
        p(&feats),
        "--stride",
        "8",
        "--patch",
        p(&patch),
    ]));
    assert_eq!(out.lines().nth(1).unwrap(), "2.6666666666666665,0,0,0,2.6666666666666665,0");
    assert_eq!(read_tensor(fs::File::open(&patch).unwrap()).unwrap().dims, vec![2, 4, 4]);

    let f = dir.path().join("a.ctf");
    let g = dir.path().join("b.ctf");
    write_tensor(fs::File::create(&f).unwrap(), &Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
    write_tensor(fs::File::create(&g).unwrap(), &Tensor::new(vec![2], vec![3.0, 1.0]).unwrap()).unwrap();
    let out = stdout(&cen(&["fuse", "--f", p(&f), "--f-hat", p(&g)]));
    assert_eq!(out, "index,value\n0,4\n1,3\n2,-2\n3,1\n");
}

#[test]
fn gen_then_infer_full() {
    let dir = tempfile::tempdir().unwrap();
    let out = stdout(&cen(&["--out", p(dir.path()), "gen", "--index", "3", "--count", "2"]));
    assert_eq!(out.lines().count(), 3);
    assert!(out.lines().nth(1).unwrap().starts_with("scene0003,"));
    for suffix in ["features.ctf", "mask.pgm", "gt.csv", "proposals.csv"] {
        assert!(dir.path().join(format!("scene0004_{suffix}")).exists(), "{suffix}");
    }
    let cfg = HeadConfig::new(4, 2 * 8 * 49, 16, HeadMode::FullySupervised).unwrap();
    let head = dir.path().join("head.bin");
    write_head(fs::File::create(&head).unwrap(), &HeadWeights::init(&cfg, 1)).unwrap();
    let f = |s: &str| dir.path().join(format!("scene0003_{s}"));
    let dets = stdout(&cen(&[
        "infer-full",
        "--features",
        p(&f("features.ctf")),
        "--proposals",
        p(&f("proposals.csv")),
        "--mask",
        p(&f("mask.pgm")),
        "--head",
        p(&head),
        "--image-id",
        "scene0003",
    ]));
    let recs = read_boxes(dets.as_bytes()).unwrap();
    assert!(recs.len() <= 20);
    assert!(recs.iter().all(|r| r.score.unwrap() > 0.05));

    // a fused head cannot serve the proposal-only pipeline
    let bad = cen(&[
        "infer-full",
        "--features",
        p(&f("features.ctf")),
        "--proposals",
        p(&f("proposals.csv")),
        "--mask",
        p(&f("mask.pgm")),
        "--head",
        p(&head),
        "--proposal-only",
    ]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn config_file_and_flags_layer_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# base\nseed = 3\nnoise_sigma = 0.1\n").unwrap();
    let from_file = stdout(&cen(&["--config", p(&cfg), "--out", p(&dir.path().join("a")), "gen"]));
    let explicit = stdout(&cen(&["--seed", "3", "--set", "noise_sigma=0.1", "--out", p(&dir.path().join("b")), "gen"]));
    assert_eq!(from_file, explicit);
    let overridden = stdout(&cen(&["--config", p(&cfg), "--seed", "9", "--out", p(&dir.path().join("c")), "gen"]));
    let direct = stdout(&cen(&["--seed", "9", "--set", "noise_sigma=0.1", "--out", p(&dir.path().join("d")), "gen"]));
    assert_eq!(overridden, direct);
    assert_ne!(overridden, from_file);
    assert_eq!(
        fs::read(dir.path().join("a/scene0000_features.ctf")).unwrap(),
        fs::read(dir.path().join("b/scene0000_features.ctf")).unwrap()
    );
}

#[test]
fn input_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        vec!["reflect", "--line", "1,0", "--box", "0,0,1,1"],
        vec!["reflect", "--line", "0,0,1", "--box", "0,0,1,1"],
        vec!["reflect", "--line", "1,0,0", "--box", "0,0,-1,1"],
        vec!["spine-line", "/nonexistent/mask.pgm"],
        vec!["nms", "/nonexistent.csv"],
        vec!["eval", "--metric", "ap"],
        vec!["--set", "bogus=1", "gen"],
        vec!["--set", "final_nms=2", "gen"],
        vec!["frobnicate"],
    ] {
        let mut full = vec!["--out", p(dir.path())];
        full.extend(args.iter().copied());
        let o = cen(&full);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let garbage = dir.path().join("bad.pgm");
    fs::write(&garbage, b"P2\n1 1\n255\n0\n").unwrap();
    assert_eq!(cen(&["spine-line", p(&garbage)]).status.code(), Some(2));
}

#[test]
fn experiment_smoke_writes_all_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = stdout(&cen(&[
        "--out",
        p(dir.path()),
        "--set",
        "train_scenes=6",
        "--set",
        "test_scenes=4",
        "--set",
        "hidden=16",
        "--set",
        "epochs=20",
        "experiment",
    ]));
    assert!(out.starts_with("metric,head,class,value\n"));
    for name in [
        "metrics.csv",
        "table.txt",
        "config.txt",
        "ground_truth.csv",
        "detections_fused.csv",
        "detections_proposal_only.csv",
        "head_fused.bin",
        "head_proposal_only.bin",
    ] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    assert_eq!(fs::read_to_string(dir.path().join("metrics.csv")).unwrap(), out);
    let table = fs::read_to_string(dir.path().join("table.txt")).unwrap();
    for col in ["AP50", "AP-center", "AP75"] {
        assert!(table.contains(col));
    }
}
