//! Independent reference implementations and random fixtures shared by the
//! integration tests.
#![allow(dead_code)]

use cen_core::evaluation::midranks;
use cen_core::pipeline::ProbabilityMap;
use cen_core::tensorops::FeatureMap;
use cen_core::{BoundingBox, Point2, SpineLine};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_box(r: &mut ChaCha8Rng, extent: f64) -> BoundingBox {
    let w = r.gen_range(1.0..extent / 4.0);
    let h = r.gen_range(1.0..extent / 4.0);
    BoundingBox::new(r.gen_range(-extent / 8.0..extent), r.gen_range(-extent / 8.0..extent), w, h).unwrap()
}

pub fn integer_box(r: &mut ChaCha8Rng, extent: i32, max_side: i32) -> BoundingBox {
    BoundingBox::new(
        r.gen_range(0..extent) as f64,
        r.gen_range(0..extent) as f64,
        r.gen_range(1..=max_side) as f64,
        r.gen_range(1..=max_side) as f64,
    )
    .unwrap()
}

pub fn random_line(r: &mut ChaCha8Rng, extent: f64) -> SpineLine {
    let theta: f64 = r.gen_range(0.0..std::f64::consts::PI);
    let p = Point2::new(r.gen_range(0.0..extent), r.gen_range(0.0..extent));
    SpineLine::through(p, Point2::new(theta.cos(), theta.sin())).unwrap()
}

pub fn random_map(r: &mut ChaCha8Rng, channels: usize, height: usize, width: usize, stride: usize) -> FeatureMap {
    FeatureMap::from_fn(channels, height, width, stride, |_, _, _| r.gen_range(-1.0..1.0))
}

/// Values drawn from a small set so that ties are common.
pub fn quantized(r: &mut ChaCha8Rng, levels: u32) -> f64 {
    r.gen_range(0..levels) as f64 / levels as f64
}

/// Inclusive-span IoU computed from scratch.
pub fn iou_ref(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix = (a.x + a.w).min(b.x + b.w) - a.x.max(b.x);
    let iy = (a.y + a.h).min(b.y + b.h) - a.y.max(b.y);
    if ix <= 0.0 || iy <= 0.0 {
        return 0.0;
    }
    let inter = ix * iy;
    inter / (a.w * a.h + b.w * b.h - inter)
}

/// Textbook greedy NMS: repeatedly take the best remaining box and delete
/// everything it overlaps too much. Returns kept indices in pick order.
pub fn nms_ref(boxes: &[BoundingBox], scores: &[f64], groups: &[u32], t: f64) -> Vec<usize> {
    let mut remaining: Vec<usize> = (0..boxes.len()).collect();
    let mut kept = Vec::new();
    while !remaining.is_empty() {
        let mut best = remaining[0];
        for &i in &remaining {
            if scores[i] > scores[best] || (scores[i] == scores[best] && i < best) {
                best = i;
            }
        }
        kept.push(best);
        remaining.retain(|&i| i != best && !(groups[i] == groups[best] && iou_ref(&boxes[best], &boxes[i]) > t));
    }
    kept
}

/// RoI max pooling by scanning every map cell for every bin.
pub fn roi_pool_ref(map: &FeatureMap, b: &BoundingBox, grid: usize) -> Option<Vec<f64>> {
    let s = map.stride as f64;
    let x0 = (b.x / s).round() as i64;
    let x1 = ((b.x + b.w - 1.0) / s).round() as i64;
    let y0 = (b.y / s).round() as i64;
    let y1 = ((b.y + b.h - 1.0) / s).round() as i64;
    let (w, h) = (map.width as i64, map.height as i64);
    if x1 < 0 || y1 < 0 || x0 >= w || y0 >= h {
        return None;
    }
    let bw = (x1 - x0 + 1).max(1) as f64 / grid as f64;
    let bh = (y1 - y0 + 1).max(1) as f64 / grid as f64;
    let mut out = Vec::with_capacity(map.channels * grid * grid);
    for c in 0..map.channels {
        for ph in 0..grid {
            let lo_y = (ph as f64 * bh).floor() as i64 + y0;
            let hi_y = ((ph + 1) as f64 * bh).ceil() as i64 + y0;
            for pw in 0..grid {
                let lo_x = (pw as f64 * bw).floor() as i64 + x0;
                let hi_x = ((pw + 1) as f64 * bw).ceil() as i64 + x0;
                let mut best: Option<f64> = None;
                for yy in 0..h {
                    for xx in 0..w {
                        if yy >= lo_y && yy < hi_y && xx >= lo_x && xx < hi_x {
                            let v = map.get(c, yy as usize, xx as usize);
                            best = Some(best.map_or(v, |m: f64| m.max(v)));
                        }
                    }
                }
                out.push(best.unwrap_or(0.0));
            }
        }
    }
    Some(out)
}

/// Every `(score, class, y, x)` entry sorted by descending score, ties in
/// `(class, y, x)` order, truncated to `k`.
pub fn weak_ref(p: &ProbabilityMap, k: usize) -> Vec<(f64, usize, usize, usize)> {
    let mut all = Vec::new();
    for c in 0..p.classes {
        for y in 0..p.height {
            for x in 0..p.width {
                all.push((p.get(c, y, x), c, y, x));
            }
        }
    }
    all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then((a.1, a.2, a.3).cmp(&(b.1, b.2, b.3))));
    all.truncate(k);
    all
}

/// Exact two-sided Wilcoxon p-value by enumerating all `2ⁿ` sign patterns.
/// Returns `(min(W⁺, W⁻), p)`.
pub fn wilcoxon_enum(pairs: &[(f64, f64)]) -> (f64, f64) {
    let diffs: Vec<f64> = pairs.iter().map(|(a, b)| b - a).filter(|d| *d != 0.0).collect();
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    // midranks from first principles: 1 + #smaller + (#equal − 1)/2
    let ranks: Vec<f64> = abs
        .iter()
        .map(|a| {
            let smaller = abs.iter().filter(|b| *b < a).count() as f64;
            let equal = abs.iter().filter(|b| *b == a).count() as f64;
            1.0 + smaller + (equal - 1.0) / 2.0
        })
        .collect();
    debug_assert_eq!(ranks, midranks(&abs));
    let doubled: Vec<u64> = ranks.iter().map(|r| (2.0 * r) as u64).collect();
    let total: u64 = doubled.iter().sum();
    let observed_plus: u64 = doubled.iter().zip(&diffs).filter(|(_, d)| **d > 0.0).map(|(r, _)| r).sum();
    let observed = observed_plus.min(total - observed_plus);
    let n = diffs.len();
    let mut count = 0u64;
    for mask in 0u64..(1 << n) {
        let plus: u64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| doubled[i]).sum();
        if plus.min(total - plus) <= observed {
            count += 1;
        }
    }
    (observed as f64 / 2.0, count as f64 / 2f64.powi(n as i32))
}

/// Minimum-area enclosing rectangle by trying every direction defined by a
/// pair of points plus a 0.1° sweep. Returns the smallest area found.
pub fn min_rect_area_ref(points: &[Point2]) -> f64 {
    let area_at = |theta: f64| {
        let (s, c) = theta.sin_cos();
        let (mut lo_u, mut hi_u, mut lo_v, mut hi_v) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for p in points {
            let u = p.x * c + p.y * s;
            let v = -p.x * s + p.y * c;
            lo_u = lo_u.min(u);
            hi_u = hi_u.max(u);
            lo_v = lo_v.min(v);
            hi_v = hi_v.max(v);
        }
        (hi_u - lo_u) * (hi_v - lo_v)
    };
    let mut best = (0..1800).map(|i| area_at((i as f64 * 0.1).to_radians())).fold(f64::INFINITY, f64::min);
    for (i, a) in points.iter().enumerate() {
        for b in &points[i + 1..] {
            if a.x != b.x || a.y != b.y {
                best = best.min(area_at((b.y - a.y).atan2(b.x - a.x)));
            }
        }
    }
    best
}

/// Sweep-only brute force at 0.1° resolution.
pub fn min_rect_area_sweep(points: &[Point2]) -> f64 {
    (0..1800)
        .map(|i| {
            let (s, c) = (i as f64 * 0.1).to_radians().sin_cos();
            let us = points.iter().map(|p| p.x * c + p.y * s);
            let vs = points.iter().map(|p| -p.x * s + p.y * c);
            let span = |it: &mut dyn Iterator<Item = f64>| {
                let (mut lo, mut hi) = (f64::MAX, f64::MIN);
                for v in it {
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
                hi - lo
            };
            span(&mut us.into_iter()) * span(&mut vs.into_iter())
        })
        .fold(f64::INFINITY, f64::min)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}
