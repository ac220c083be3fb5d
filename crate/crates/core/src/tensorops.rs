//! Feature-map sampling and pooling.
//!
//! Image coordinates map to feature coordinates by dividing by the map's
//! stride, with no half-cell offset. Sampling outside the map reads zeros.

use crate::error::{CenError, Result};
use crate::geometry::{BoundingBox, Point2};
use crate::transform::{compose_transform, grad_transform, map_point, AffineTransform, CanonicalSize, StnParams};

/// Default RoI pooling grid.
pub const ROI_GRID: usize = 7;

/// Channel-major `C × H × W` tensor at a known stride relative to the image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub stride: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, stride: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(CenError::ShapeMismatch(format!(
                "feature data has {} values, expected {channels}×{height}×{width}",
                data.len()
            )));
        }
        if stride == 0 {
            return Err(CenError::InvalidParameter("stride must be at least 1".into()));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(CenError::InvalidParameter(format!("non-finite feature value {v}")));
        }
        Ok(Self { channels, height, width, stride, data })
    }

    pub fn zeros(channels: usize, height: usize, width: usize, stride: usize) -> Self {
        Self { channels, height, width, stride, data: vec![0.0; channels * height * width] }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        stride: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self { channels, height, width, stride, data }
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(c, y, x)]
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// Average over channels, as a `1 × H × W` map with the same stride.
    pub fn channel_mean(&self) -> FeatureMap {
        let n = self.height * self.width;
        let mut data = vec![0.0; n];
        for c in 0..self.channels {
            for (d, v) in data.iter_mut().zip(self.plane(c)) {
                *d += v;
            }
        }
        let k = self.channels.max(1) as f64;
        data.iter_mut().for_each(|d| *d /= k);
        FeatureMap { channels: 1, height: self.height, width: self.width, stride: self.stride, data }
    }

    pub fn scaled(&self, factor: f64) -> FeatureMap {
        FeatureMap { data: self.data.iter().map(|v| v * factor).collect(), ..self.clone() }
    }

    fn same_shape(&self, other: &FeatureMap) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }
}

/// Flattened pooled representation.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub data: Vec<f64>,
}

impl FeatureVector {
    pub fn new(data: Vec<f64>) -> Self {
        Self { data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// One bilinear neighbour: cell position, weight and weight derivatives in
/// image-pixel units.
#[derive(Debug, Clone, Copy)]
struct Tap {
    x: usize,
    y: usize,
    w: f64,
    dwdx: f64,
    dwdy: f64,
}

/// The in-bounds neighbours contributing to a sample at image point `(x, y)`.
fn taps(width: usize, height: usize, stride: usize, x: f64, y: f64) -> impl Iterator<Item = Tap> {
    let s = stride as f64;
    let fx = x / s;
    let fy = y / s;
    let x0 = fx.floor();
    let y0 = fy.floor();
    let ax = fx - x0;
    let ay = fy - y0;
    let inv = 1.0 / s;
    let corners = [
        (x0, y0, 1.0 - ax, 1.0 - ay, -inv, -inv),
        (x0 + 1.0, y0, ax, 1.0 - ay, inv, -inv),
        (x0, y0 + 1.0, 1.0 - ax, ay, -inv, inv),
        (x0 + 1.0, y0 + 1.0, ax, ay, inv, inv),
    ];
    corners.into_iter().filter_map(move |(cx, cy, wx, wy, dx, dy)| {
        if cx < 0.0 || cy < 0.0 || cx > (width as f64 - 1.0) || cy > (height as f64 - 1.0) {
            return None;
        }
        Some(Tap { x: cx as usize, y: cy as usize, w: wx * wy, dwdx: dx * wy, dwdy: wx * dy })
    })
}

/// Bilinear interpolation of one channel at image point `(x, y)`.
pub fn bilinear_sample(map: &FeatureMap, x: f64, y: f64, channel: usize) -> Result<f64> {
    if channel >= map.channels {
        return Err(CenError::InvalidChannel { channel, channels: map.channels });
    }
    let plane = map.plane(channel);
    Ok(taps(map.width, map.height, map.stride, x, y).map(|t| t.w * plane[t.y * map.width + t.x]).sum())
}

/// Canonical-grid position of output cell `(u, v)` for an `out_w × out_h` grid.
fn grid_point(u: usize, v: usize, out_w: usize, out_h: usize, canon: CanonicalSize) -> Point2 {
    let scale = |i: usize, n: usize, c: usize| {
        if n > 1 {
            i as f64 * (c as f64 - 1.0) / (n as f64 - 1.0)
        } else {
            (c as f64 - 1.0) / 2.0
        }
    };
    Point2::new(scale(u, out_w, canon.w0), scale(v, out_h, canon.h0))
}

/// Resample `map` through `t` onto an `out_w × out_h` grid spread over the
/// canonical patch. The result lives in patch-local coordinates (stride 1).
pub fn sample_patch(
    map: &FeatureMap,
    t: &AffineTransform,
    canon: CanonicalSize,
    out_w: usize,
    out_h: usize,
) -> Result<FeatureMap> {
    if out_w == 0 || out_h == 0 {
        return Err(CenError::InvalidParameter("patch output size must be at least 1×1".into()));
    }
    let mut out = FeatureMap::zeros(map.channels, out_h, out_w, 1);
    let plane_len = map.height * map.width;
    for v in 0..out_h {
        for u in 0..out_w {
            let q = map_point(t, grid_point(u, v, out_w, out_h, canon));
            for tap in taps(map.width, map.height, map.stride, q.x, q.y) {
                let src = tap.y * map.width + tap.x;
                for c in 0..map.channels {
                    let idx = out.index(c, v, u);
                    out.data[idx] += tap.w * map.data[c * plane_len + src];
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of a scalar loss through [`sample_patch`].
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerGrad {
    /// With respect to `(s_x, s_y, t_x, t_y, theta)`.
    pub params: [f64; 5],
    /// With respect to every cell of the source map.
    pub features: FeatureMap,
}

/// Backward pass of [`sample_patch`] for the transform built by
/// [`compose_transform`] from `expanded`, `params` and `canon`.
pub fn sample_patch_grad(
    map: &FeatureMap,
    expanded: &BoundingBox,
    params: &StnParams,
    canon: CanonicalSize,
    upstream: &FeatureMap,
) -> Result<SamplerGrad> {
    if upstream.channels != map.channels || upstream.width == 0 || upstream.height == 0 {
        return Err(CenError::ShapeMismatch(format!(
            "upstream gradient {}×{}×{} does not match a {}-channel patch",
            upstream.channels, upstream.height, upstream.width, map.channels
        )));
    }
    let (out_w, out_h) = (upstream.width, upstream.height);
    let t = compose_transform(expanded, params, canon);
    let mut d_params = [0.0; 5];
    let mut d_map = FeatureMap::zeros(map.channels, map.height, map.width, map.stride);
    let plane_len = map.height * map.width;
    for v in 0..out_h {
        for u in 0..out_w {
            let p = grid_point(u, v, out_w, out_h, canon);
            let q = map_point(&t, p);
            let mut dqx = 0.0;
            let mut dqy = 0.0;
            for tap in taps(map.width, map.height, map.stride, q.x, q.y) {
                let src = tap.y * map.width + tap.x;
                for c in 0..map.channels {
                    let g = upstream.get(c, v, u);
                    if g == 0.0 {
                        continue;
                    }
                    let f = map.data[c * plane_len + src];
                    dqx += g * f * tap.dwdx;
                    dqy += g * f * tap.dwdy;
                    d_map.data[c * plane_len + src] += g * tap.w;
                }
            }
            if dqx != 0.0 || dqy != 0.0 {
                let j = grad_transform(expanded, params, canon, p);
                for k in 0..5 {
                    d_params[k] += dqx * j[0][k] + dqy * j[1][k];
                }
            }
        }
    }
    Ok(SamplerGrad { params: d_params, features: d_map })
}

/// Inclusive feature-cell range covered by a box along one axis.
fn roi_span(start: f64, len: f64, stride: usize) -> (i64, i64) {
    let s = stride as f64;
    ((start / s).round() as i64, ((start + len - 1.0) / s).round() as i64)
}

/// RoI max pooling with argmax bookkeeping for the backward pass.
///
/// Returns the flattened `C × grid × grid` output and, per output entry, the
/// flat source index of the maximum (`None` for empty bins).
pub fn roi_pool_with_argmax(
    map: &FeatureMap,
    b: &BoundingBox,
    grid: usize,
) -> Result<(FeatureVector, Vec<Option<usize>>)> {
    if grid == 0 {
        return Err(CenError::InvalidParameter("RoI grid must be at least 1".into()));
    }
    let (x0, x1) = roi_span(b.x, b.w, map.stride);
    let (y0, y1) = roi_span(b.y, b.h, map.stride);
    let (w, h) = (map.width as i64, map.height as i64);
    if x1 < 0 || y1 < 0 || x0 > w - 1 || y0 > h - 1 {
        return Err(CenError::EmptyRoi);
    }
    let roi_w = (x1 - x0 + 1).max(1) as f64;
    let roi_h = (y1 - y0 + 1).max(1) as f64;
    let bin_w = roi_w / grid as f64;
    let bin_h = roi_h / grid as f64;
    let n = map.channels * grid * grid;
    let mut out = vec![0.0; n];
    let mut arg = vec![None; n];
    for ph in 0..grid {
        let hs = ((ph as f64 * bin_h).floor() as i64 + y0).clamp(0, h);
        let he = (((ph + 1) as f64 * bin_h).ceil() as i64 + y0).clamp(0, h);
        for pw in 0..grid {
            let ws = ((pw as f64 * bin_w).floor() as i64 + x0).clamp(0, w);
            let we = (((pw + 1) as f64 * bin_w).ceil() as i64 + x0).clamp(0, w);
            if he <= hs || we <= ws {
                continue;
            }
            for c in 0..map.channels {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for yy in hs..he {
                    for xx in ws..we {
                        let idx = map.index(c, yy as usize, xx as usize);
                        if map.data[idx] > best {
                            best = map.data[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = (c * grid + ph) * grid + pw;
                out[o] = best;
                arg[o] = Some(best_idx);
            }
        }
    }
    Ok((FeatureVector::new(out), arg))
}

/// RoI max pooling of `b` (image coordinates) onto a `grid × grid` raster per
/// channel, flattened channel-major.
pub fn roi_pool(map: &FeatureMap, b: &BoundingBox, grid: usize) -> Result<FeatureVector> {
    roi_pool_with_argmax(map, b, grid).map(|(v, _)| v)
}

/// Routes pooled-output gradients back to the winning source cells.
pub fn roi_pool_backward(map: &FeatureMap, argmax: &[Option<usize>], upstream: &[f64]) -> Result<FeatureMap> {
    if argmax.len() != upstream.len() {
        return Err(CenError::ShapeMismatch(format!(
            "pooled gradient has {} entries, argmax has {}",
            upstream.len(),
            argmax.len()
        )));
    }
    let mut grad = FeatureMap::zeros(map.channels, map.height, map.width, map.stride);
    for (a, g) in argmax.iter().zip(upstream) {
        if let Some(i) = a {
            grad.data[*i] += g;
        }
    }
    Ok(grad)
}

/// Element-wise sum of two same-shaped maps.
pub fn add_maps(a: &FeatureMap, b: &FeatureMap) -> Result<FeatureMap> {
    if !a.same_shape(b) {
        return Err(CenError::ShapeMismatch("maps differ in shape".into()));
    }
    Ok(FeatureMap { data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(), ..a.clone() })
}
