//! Spine-line geometry: mask components, convex hull, minimum-area rectangle,
//! reflection of proposals across the spine and patch expansion.
//!
//! Coordinates are image pixels with pixel `i` sitting at coordinate `i`, so a
//! box `(x, y, w, h)` covers the closed span `[x, x+w-1] × [y, y+h-1]` and its
//! center is `(x + (w-1)/2, y + (h-1)/2)`.

use std::collections::VecDeque;
use std::f64::consts::PI;

use crate::error::{CenError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    fn sub(self, other: Point2) -> Point2 {
        Point2::new(self.x - other.x, self.y - other.y)
    }

    fn dot(self, other: Point2) -> f64 {
        self.x * other.x + self.y * other.y
    }
}

/// Cross product of `(a - o)` and `(b - o)`.
fn cross(o: Point2, a: Point2, b: Point2) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

/// Axis-aligned box `(x, y, w, h)` in image pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    /// Validating constructor: sizes must be positive and all fields finite.
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { x, y, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if ![self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite()) {
            return Err(CenError::InvalidBox(format!("non-finite field in {self:?}")));
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(CenError::InvalidBox(format!("non-positive size in {self:?}")));
        }
        Ok(())
    }

    pub fn center(&self) -> Point2 {
        Point2::new(self.x + (self.w - 1.0) / 2.0, self.y + (self.h - 1.0) / 2.0)
    }

    pub fn from_center(center: Point2, w: f64, h: f64) -> Self {
        Self { x: center.x - (w - 1.0) / 2.0, y: center.y - (h - 1.0) / 2.0, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Right-most covered coordinate.
    pub fn x_max(&self) -> f64 {
        self.x + self.w - 1.0
    }

    /// Bottom-most covered coordinate.
    pub fn y_max(&self) -> f64 {
        self.y + self.h - 1.0
    }

    /// True when `p` lies in the closed span `[x, x+w-1] × [y, y+h-1]`.
    pub fn contains(&self, p: Point2) -> bool {
        p.x >= self.x && p.x <= self.x_max() && p.y >= self.y && p.y <= self.y_max()
    }
}

/// Line `a·x + b·y + c = 0` with `a² + b² = 1` and `a ≥ 0` (`b ≥ 0` when `a = 0`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpineLine {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl SpineLine {
    /// Normalizes arbitrary coefficients.
    pub fn new(a: f64, b: f64, c: f64) -> Result<Self> {
        let norm = a.hypot(b);
        if !(norm.is_finite() && c.is_finite()) || norm == 0.0 {
            return Err(CenError::InvalidParameter(format!("degenerate line coefficients ({a}, {b}, {c})")));
        }
        let (mut a, mut b, mut c) = (a / norm, b / norm, c / norm);
        if a < 0.0 || (a == 0.0 && b < 0.0) {
            a = -a;
            b = -b;
            c = -c;
        }
        Ok(Self { a, b, c })
    }

    /// Line through `p` running along `dir`.
    pub fn through(p: Point2, dir: Point2) -> Result<Self> {
        let a = -dir.y;
        let b = dir.x;
        Self::new(a, b, -(a * p.x + b * p.y))
    }

    pub fn signed_distance(&self, p: Point2) -> f64 {
        self.a * p.x + self.b * p.y + self.c
    }

    /// Mirror image of a point.
    pub fn reflect_point(&self, p: Point2) -> Point2 {
        let d = self.signed_distance(p);
        Point2::new(p.x - 2.0 * d * self.a, p.y - 2.0 * d * self.b)
    }

    /// Unit direction along the line.
    pub fn direction(&self) -> Point2 {
        Point2::new(self.b, -self.a)
    }
}

/// Oriented rectangle; `width` runs along `angle`, `height` perpendicular to it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotatedRect {
    pub center: Point2,
    pub width: f64,
    pub height: f64,
    /// Radians in `[-π/2, π/2)`.
    pub angle: f64,
}

impl RotatedRect {
    pub fn area(&self) -> f64 {
        self.width * self.height
    }

    fn axes(&self) -> (Point2, Point2) {
        let (s, c) = self.angle.sin_cos();
        (Point2::new(c, s), Point2::new(-s, c))
    }

    /// Corners in counter-clockwise order starting at the `(-w/2, -h/2)` corner.
    pub fn corners(&self) -> [Point2; 4] {
        let (u, n) = self.axes();
        let (hw, hh) = (self.width / 2.0, self.height / 2.0);
        let at = |su: f64, sn: f64| {
            Point2::new(self.center.x + su * hw * u.x + sn * hh * n.x, self.center.y + su * hw * u.y + sn * hh * n.y)
        };
        [at(-1.0, -1.0), at(1.0, -1.0), at(1.0, 1.0), at(-1.0, 1.0)]
    }

    /// Whether `p` lies inside the rectangle, with slack `tol` on every side.
    pub fn contains(&self, p: Point2, tol: f64) -> bool {
        let (u, n) = self.axes();
        let d = p.sub(self.center);
        d.dot(u).abs() <= self.width / 2.0 + tol && d.dot(n).abs() <= self.height / 2.0 + tol
    }

    /// The symmetry axis through the midpoints of the two shorter edges.
    ///
    /// For a square the axis closer to vertical wins.
    pub fn short_edge_axis(&self) -> Result<SpineLine> {
        let (u, n) = self.axes();
        let scale = self.width.max(self.height).max(1.0);
        let dir = if (self.width - self.height).abs() <= 1e-9 * scale {
            if u.y.abs() >= n.y.abs() {
                u
            } else {
                n
            }
        } else if self.width < self.height {
            n
        } else {
            u
        };
        SpineLine::through(self.center, dir)
    }
}

/// Row-major boolean mask; `true` marks spine foreground.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(CenError::ShapeMismatch(format!(
                "mask data has {} entries, expected {}×{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    /// Pixel coordinates of the largest 4-connected foreground component.
    ///
    /// Equal-sized components resolve to the one met first in raster order.
    pub fn largest_component(&self) -> Vec<(usize, usize)> {
        let mut label = vec![false; self.data.len()];
        let mut best: Vec<(usize, usize)> = Vec::new();
        let mut queue = VecDeque::new();
        for start in 0..self.data.len() {
            if !self.data[start] || label[start] {
                continue;
            }
            let mut component = Vec::new();
            label[start] = true;
            queue.push_back(start);
            while let Some(idx) = queue.pop_front() {
                let (x, y) = (idx % self.width, idx / self.width);
                component.push((x, y));
                let mut visit = |nx: usize, ny: usize| {
                    let n = ny * self.width + nx;
                    if self.data[n] && !label[n] {
                        label[n] = true;
                        queue.push_back(n);
                    }
                };
                if x > 0 {
                    visit(x - 1, y);
                }
                if x + 1 < self.width {
                    visit(x + 1, y);
                }
                if y > 0 {
                    visit(x, y - 1);
                }
                if y + 1 < self.height {
                    visit(x, y + 1);
                }
            }
            if component.len() > best.len() {
                best = component;
            }
        }
        best
    }
}

/// Counter-clockwise convex hull (Andrew's monotone chain), collinear points dropped.
pub fn convex_hull(points: &[Point2]) -> Result<Vec<Point2>> {
    if points.is_empty() {
        return Err(CenError::NoForegroundPoints);
    }
    let mut pts = points.to_vec();
    pts.sort_by(|p, q| p.x.total_cmp(&q.x).then(p.y.total_cmp(&q.y)));
    pts.dedup();
    if pts.len() < 3 {
        return Ok(pts);
    }
    let mut lower: Vec<Point2> = Vec::with_capacity(pts.len());
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<Point2> = Vec::with_capacity(pts.len());
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    Ok(lower)
}

fn normalize_angle(mut angle: f64) -> f64 {
    while angle >= PI / 2.0 {
        angle -= PI;
    }
    while angle < -PI / 2.0 {
        angle += PI;
    }
    angle
}

/// Minimum-area enclosing rectangle of a convex polygon.
///
/// Every hull edge direction is tried as a rectangle side (rotating
/// calipers); the first edge reaching the minimum wins.
pub fn min_area_rect(hull: &[Point2]) -> Result<RotatedRect> {
    match hull.len() {
        0 => return Err(CenError::NoForegroundPoints),
        1 => return Ok(RotatedRect { center: hull[0], width: 0.0, height: 0.0, angle: 0.0 }),
        _ => {}
    }
    let mut best: Option<(f64, RotatedRect)> = None;
    for i in 0..hull.len() {
        let p = hull[i];
        let q = hull[(i + 1) % hull.len()];
        let edge = q.sub(p);
        let len = edge.x.hypot(edge.y);
        if len == 0.0 {
            continue;
        }
        let angle = normalize_angle(edge.y.atan2(edge.x));
        let (s, c) = angle.sin_cos();
        let u = Point2::new(c, s);
        let n = Point2::new(-s, c);
        let (mut umin, mut umax, mut nmin, mut nmax) =
            (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for &h in hull {
            let pu = h.dot(u);
            let pn = h.dot(n);
            umin = umin.min(pu);
            umax = umax.max(pu);
            nmin = nmin.min(pn);
            nmax = nmax.max(pn);
        }
        let width = umax - umin;
        let height = nmax - nmin;
        let area = width * height;
        if best.as_ref().is_none_or(|(a, _)| area < *a) {
            let cu = (umin + umax) / 2.0;
            let cn = (nmin + nmax) / 2.0;
            best = Some((
                area,
                RotatedRect { center: Point2::new(cu * u.x + cn * n.x, cu * u.y + cn * n.y), width, height, angle },
            ));
        }
    }
    best.map(|(_, r)| r).ok_or(CenError::NoForegroundPoints)
}

/// Symmetry axis of the largest spine component: the line joining the
/// midpoints of the short edges of its minimum-area rectangle.
pub fn spine_line(mask: &BinaryMask) -> Result<SpineLine> {
    let component = mask.largest_component();
    if component.is_empty() {
        return Err(CenError::EmptySpineMask);
    }
    let points: Vec<Point2> = component.iter().map(|&(x, y)| Point2::new(x as f64, y as f64)).collect();
    let hull = convex_hull(&points)?;
    let rect = min_area_rect(&hull)?;
    rect.short_edge_axis()
}

/// Mirror a box across the line, keeping its size.
///
/// The box centers' midpoint lies on the line and their displacement is
/// parallel to the line normal.
pub fn reflect_box(b: &BoundingBox, line: &SpineLine) -> BoundingBox {
    let center = line.reflect_point(b.center());
    BoundingBox::from_center(center, b.w, b.h)
}

/// Grow a box by a quarter of its size on each side.
pub fn expand_patch(b: &BoundingBox) -> BoundingBox {
    let dx = 0.25 * b.w;
    let dy = 0.25 * b.h;
    BoundingBox { x: b.x - dx, y: b.y - dy, w: b.w + 2.0 * dx, h: b.h + 2.0 * dy }
}

/// Inverse of [`expand_patch`].
pub fn shrink_patch(b: &BoundingBox) -> BoundingBox {
    let w = b.w / 1.5;
    let h = b.h / 1.5;
    BoundingBox { x: b.x + 0.25 * w, y: b.y + 0.25 * h, w, h }
}
