//! Synthetic bilaterally symmetric scenes.
//!
//! Each scene is an analytic multi-band image in a frame aligned with a
//! slightly tilted, slightly offset symmetry axis. The background depends on
//! the distance to the axis only through its magnitude, so it is exactly
//! mirror-symmetric. Lesions are Gaussian blobs with a class-specific band
//! signature planted on one side; distractors are the same kind of blob
//! planted as mirror pairs, which a detector can only dismiss by looking at
//! the other side.
//!
//! Feature channel `c` reads band `c % bands` through statistic `c / bands`
//! (local mean, then local standard deviation), where `bands = ceil(C / 2)`.
//! Statistics are computed over an axis-aligned window of one stride around
//! the cell's image point, so the feature at a point and at its mirror image
//! coincide exactly in the noise-free case.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::Result;
use crate::evaluation::GroundTruth;
use crate::geometry::{BinaryMask, BoundingBox, Point2, SpineLine};
use crate::harness::config::RunConfig;
use crate::pipeline::Proposal;
use crate::tensorops::FeatureMap;

pub const STRIDE: usize = 32;
/// Samples per window side when computing cell statistics.
const WINDOW_SAMPLES: usize = 8;
const LESION_AMPLITUDE: f64 = 1.0;
const OFF_SIGNATURE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Blob {
    pub center: Point2,
    pub radius: f64,
    /// 1-based class whose signature the blob carries.
    pub class_id: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub image_id: String,
    pub width: usize,
    pub height: usize,
    pub axis: SpineLine,
    /// Point on the axis the frame is centred on.
    pub origin: Point2,
    pub spine_mask: BinaryMask,
    pub features: FeatureMap,
    pub lesions: Vec<GroundTruth>,
    /// Mirror-symmetric look-alikes; not ground truth.
    pub distractors: Vec<Blob>,
    pub proposals: Vec<Proposal>,
    field: Field,
}

/// Analytic image: background parameters and all planted blobs.
#[derive(Debug, Clone, PartialEq)]
struct Field {
    origin: Point2,
    /// Unit normal (`u` axis) and direction (`v` axis) of the frame.
    normal: Point2,
    dir: Point2,
    bands: usize,
    num_classes: usize,
    base: Vec<f64>,
    rib_phase: Vec<f64>,
    rib_period: Vec<f64>,
    lung_width: Vec<f64>,
    blobs: Vec<Blob>,
}

impl Field {
    fn frame(&self, p: Point2) -> (f64, f64) {
        let dx = p.x - self.origin.x;
        let dy = p.y - self.origin.y;
        (dx * self.normal.x + dy * self.normal.y, dx * self.dir.x + dy * self.dir.y)
    }

    fn image_point(&self, u: f64, v: f64) -> Point2 {
        Point2::new(
            self.origin.x + u * self.normal.x + v * self.dir.x,
            self.origin.y + u * self.normal.y + v * self.dir.y,
        )
    }

    fn signature(&self, class_id: u32, band: usize) -> f64 {
        if band % self.num_classes == class_id as usize - 1 {
            1.0
        } else {
            OFF_SIGNATURE
        }
    }

    /// Band intensity at image point `p`.
    fn value(&self, p: Point2, band: usize) -> f64 {
        let (u, v) = self.frame(p);
        let au = u * u;
        let lung = (-(au.sqrt() - self.lung_width[band]).powi(2) / (2.0 * 60.0 * 60.0)).exp();
        let ribs = 0.15 * lung * (std::f64::consts::TAU * v / self.rib_period[band] + self.rib_phase[band]).cos();
        let mut val = self.base[band] + 0.2 * lung + ribs;
        for b in &self.blobs {
            let dx = p.x - b.center.x;
            let dy = p.y - b.center.y;
            let g = (-(dx * dx + dy * dy) / (2.0 * b.radius * b.radius)).exp();
            val += LESION_AMPLITUDE * self.signature(b.class_id, band) * g;
        }
        val
    }

    /// Mean and population standard deviation of one band over the window
    /// centred on `p`.
    fn stats(&self, p: Point2, band: usize) -> (f64, f64) {
        let (u0, v0) = self.frame(p);
        let step = STRIDE as f64 / WINDOW_SAMPLES as f64;
        let half = (WINDOW_SAMPLES as f64 - 1.0) / 2.0;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for i in 0..WINDOW_SAMPLES {
            for j in 0..WINDOW_SAMPLES {
                let du = (i as f64 - half) * step;
                let dv = (j as f64 - half) * step;
                let x = self.value(self.image_point(u0 + du, v0 + dv), band);
                sum += x;
                sq += x * x;
            }
        }
        let n = (WINDOW_SAMPLES * WINDOW_SAMPLES) as f64;
        let mean = sum / n;
        (mean, (sq / n - mean * mean).max(0.0).sqrt())
    }

    fn feature(&self, p: Point2, channel: usize) -> f64 {
        let (mean, sd) = self.stats(p, channel % self.bands);
        if channel / self.bands == 0 {
            mean
        } else {
            sd
        }
    }
}

impl SyntheticScene {
    /// Noise-free feature of `channel` at image point `p`.
    pub fn feature_at(&self, p: Point2, channel: usize) -> f64 {
        self.field.feature(p, channel)
    }

    /// Noise-free band intensity at image point `p`.
    pub fn intensity_at(&self, p: Point2, band: usize) -> f64 {
        self.field.value(p, band)
    }

    pub fn bands(&self) -> usize {
        self.field.bands
    }

    /// Frame coordinates `(u, v)`: signed distance across and along the axis.
    pub fn frame_coords(&self, p: Point2) -> (f64, f64) {
        self.field.frame(p)
    }
}

pub fn scene_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

pub fn image_id(index: usize) -> String {
    format!("scene{index:04}")
}

/// Box of side `4r` centred on a blob.
pub fn blob_box(b: &Blob) -> BoundingBox {
    BoundingBox::from_center(b.center, 4.0 * b.radius, 4.0 * b.radius)
}

fn jitter(rng: &mut ChaCha8Rng, b: &BoundingBox) -> BoundingBox {
    let c = b.center();
    let sx: f64 = rng.gen_range(0.85..1.15);
    let sy: f64 = rng.gen_range(0.85..1.15);
    let dx = rng.gen_range(-0.15..0.15) * b.w;
    let dy = rng.gen_range(-0.15..0.15) * b.h;
    BoundingBox::from_center(Point2::new(c.x + dx, c.y + dy), b.w * sx, b.h * sy)
}

/// Picks folded positions `(|u|, v)` with a minimum spacing so no two blobs,
/// nor a blob and another's mirror image, overlap.
fn place(rng: &mut ChaCha8Rng, taken: &mut Vec<(f64, f64)>, u_range: (f64, f64), v_half: f64) -> (f64, f64) {
    const MIN_SPACING: f64 = 90.0;
    let mut best = (0.0, 0.0);
    let mut best_gap = f64::NEG_INFINITY;
    for _ in 0..200 {
        let cand = (rng.gen_range(u_range.0..u_range.1), rng.gen_range(-v_half..v_half));
        let gap = taken
            .iter()
            .map(|t| ((t.0 - cand.0).powi(2) + (t.1 - cand.1).powi(2)).sqrt())
            .fold(f64::INFINITY, f64::min);
        if gap >= MIN_SPACING {
            best = cand;
            break;
        }
        if gap > best_gap {
            best_gap = gap;
            best = cand;
        }
    }
    taken.push(best);
    best
}

/// Generates scene `index` for `config`; depends only on `(config, index)`.
pub fn generate_scene(config: &RunConfig, index: usize) -> Result<SyntheticScene> {
    config.validate()?;
    let mut rng = scene_rng(config.seed, index);
    let (w, h) = (config.image_size, config.image_size);
    let size = w as f64;
    let bands = config.channels.div_ceil(2);

    let tilt = rng.gen_range(-5.0f64..5.0).to_radians();
    let origin = Point2::new(
        (w as f64 - 1.0) / 2.0 + rng.gen_range(-16.0..16.0),
        (h as f64 - 1.0) / 2.0 + rng.gen_range(-16.0..16.0),
    );
    let dir = Point2::new(tilt.sin(), tilt.cos());
    let normal = Point2::new(tilt.cos(), -tilt.sin());
    let axis = SpineLine::through(origin, dir)?;

    let mut field = Field {
        origin,
        normal,
        dir,
        bands,
        num_classes: config.num_classes,
        base: (0..bands).map(|_| rng.gen_range(0.2..0.5)).collect(),
        rib_phase: (0..bands).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect(),
        rib_period: (0..bands).map(|_| rng.gen_range(40.0..70.0)).collect(),
        lung_width: (0..bands).map(|_| rng.gen_range(0.2..0.3) * size).collect(),
        blobs: Vec::new(),
    };

    let u_range = (0.14 * size, 0.34 * size);
    let v_half = 0.32 * size;
    let mut taken = Vec::new();
    let mut lesions = Vec::new();
    let mut lesion_blobs = Vec::new();
    for _ in 0..config.lesions_per_scene {
        let (au, v) = place(&mut rng, &mut taken, u_range, v_half);
        let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let blob = Blob {
            center: field.image_point(side * au, v),
            radius: rng.gen_range(14.0..22.0),
            class_id: rng.gen_range(1..=config.num_classes as u32),
        };
        lesions.push(GroundTruth { image_id: image_id(index), class_id: blob.class_id, bbox: blob_box(&blob) });
        lesion_blobs.push(blob);
    }
    let mut distractors = Vec::new();
    for _ in 0..config.distractor_pairs {
        let (au, v) = place(&mut rng, &mut taken, u_range, v_half);
        let radius = rng.gen_range(14.0..22.0);
        let class_id = rng.gen_range(1..=config.num_classes as u32);
        for side in [1.0, -1.0] {
            distractors.push(Blob { center: field.image_point(side * au, v), radius, class_id });
        }
    }
    field.blobs = lesion_blobs.iter().chain(&distractors).copied().collect();

    let spine_half_len = 0.39 * size;
    let spine_mask = BinaryMask::from_fn(w, h, |x, y| {
        let (u, v) = field.frame(Point2::new(x as f64, y as f64));
        u.abs() <= 10.0 && v.abs() <= spine_half_len
    });

    let (gw, gh) = (w / STRIDE, h / STRIDE);
    let mut features = FeatureMap::from_fn(config.channels, gh, gw, STRIDE, |c, y, x| {
        field.feature(Point2::new((x * STRIDE) as f64, (y * STRIDE) as f64), c)
    });
    if config.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, config.noise_sigma).expect("validated sigma");
        for v in features.data.iter_mut() {
            *v += noise.sample(&mut rng);
        }
    }

    let mut proposals = Vec::new();
    for b in &lesion_blobs {
        for _ in 0..2 {
            proposals.push(Proposal { bbox: jitter(&mut rng, &blob_box(b)), score: rng.gen_range(0.5..1.0) });
        }
    }
    for b in &distractors {
        proposals.push(Proposal { bbox: jitter(&mut rng, &blob_box(b)), score: rng.gen_range(0.5..1.0) });
    }
    for _ in 0..config.background_proposals {
        let bw = rng.gen_range(48.0..96.0);
        let bh = rng.gen_range(48.0..96.0);
        let bbox = BoundingBox { x: rng.gen_range(0.0..size - bw), y: rng.gen_range(0.0..size - bh), w: bw, h: bh };
        proposals.push(Proposal { bbox, score: rng.gen_range(0.5..1.0) });
    }

    Ok(SyntheticScene {
        image_id: image_id(index),
        width: w,
        height: h,
        axis,
        origin,
        spine_mask,
        features,
        lesions,
        distractors,
        proposals,
        field,
    })
}

/// Scenes `range` generated in parallel, returned in index order.
pub fn generate_scenes(config: &RunConfig, range: std::ops::Range<usize>) -> Result<Vec<SyntheticScene>> {
    range.into_par_iter().map(|i| generate_scene(config, i)).collect()
}
