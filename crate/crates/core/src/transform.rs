//! Affine refinement of the contralateral patch.
//!
//! A canonical `w0 × h0` grid is mapped into image pixels by
//! `T = R · A`, where `R` stretches the canonical grid over the expanded
//! patch and `A` applies the predicted scale, rotation and translation in
//! canonical units.

use std::fmt;
use std::str::FromStr;

use crate::error::{CenError, Result};
use crate::geometry::{BoundingBox, Point2};

/// Predicted refinement: scales, translation (canonical units), rotation (radians).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StnParams {
    pub s_x: f64,
    pub s_y: f64,
    pub t_x: f64,
    pub t_y: f64,
    pub theta: f64,
}

impl StnParams {
    pub fn new(s_x: f64, s_y: f64, t_x: f64, t_y: f64, theta: f64) -> Result<Self> {
        let p = Self { s_x, s_y, t_x, t_y, theta };
        if !p.to_array().iter().all(|v| v.is_finite()) {
            return Err(CenError::InvalidParameter(format!("non-finite STN parameters {p:?}")));
        }
        if s_x <= 0.0 || s_y <= 0.0 {
            return Err(CenError::InvalidParameter(format!("STN scales must be positive: {p:?}")));
        }
        Ok(p)
    }

    pub const fn identity() -> Self {
        Self { s_x: 1.0, s_y: 1.0, t_x: 0.0, t_y: 0.0, theta: 0.0 }
    }

    /// Maps unconstrained regressor outputs to parameters; scales go through `exp`.
    pub fn from_raw(raw: [f64; 5]) -> Result<Self> {
        Self::new(raw[0].exp(), raw[1].exp(), raw[2], raw[3], raw[4])
    }

    pub fn to_array(&self) -> [f64; 5] {
        [self.s_x, self.s_y, self.t_x, self.t_y, self.theta]
    }

    pub fn from_array(v: [f64; 5]) -> Result<Self> {
        Self::new(v[0], v[1], v[2], v[3], v[4])
    }
}

impl Default for StnParams {
    fn default() -> Self {
        Self::identity()
    }
}

/// Five whitespace-separated decimals: `s_x s_y t_x t_y theta`.
impl FromStr for StnParams {
    type Err = CenError;

    fn from_str(s: &str) -> Result<Self> {
        let values: Vec<f64> = s
            .split_whitespace()
            .map(|tok| tok.parse::<f64>().map_err(|e| CenError::Format(format!("bad STN parameter {tok:?}: {e}"))))
            .collect::<Result<_>>()?;
        let arr: [f64; 5] = values
            .try_into()
            .map_err(|v: Vec<f64>| CenError::Format(format!("expected 5 STN parameters, got {}", v.len())))?;
        Self::from_array(arr)
    }
}

impl fmt::Display for StnParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {} {} {}", self.s_x, self.s_y, self.t_x, self.t_y, self.theta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CanonicalSize {
    pub w0: usize,
    pub h0: usize,
}

impl CanonicalSize {
    pub fn new(w0: usize, h0: usize) -> Result<Self> {
        if w0 < 2 || h0 < 2 {
            return Err(CenError::InvalidParameter(format!("canonical size must be at least 2×2, got {w0}×{h0}")));
        }
        Ok(Self { w0, h0 })
    }

    pub fn len(&self) -> usize {
        self.w0 * self.h0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Default for CanonicalSize {
    fn default() -> Self {
        Self { w0: 64, h0: 64 }
    }
}

/// 2×3 matrix mapping homogeneous `(u, v, 1)` to `(x, y)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineTransform {
    pub m: [[f64; 3]; 2],
}

impl AffineTransform {
    pub const fn identity() -> Self {
        Self { m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]] }
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        Self { m: [[1.0, 0.0, dx], [0.0, 1.0, dy]] }
    }

    pub fn det(&self) -> f64 {
        self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0]
    }

    /// Inverse of the matrix extended with the row `(0, 0, 1)`.
    pub fn inverse(&self) -> Result<Self> {
        let det = self.det();
        if !(det.abs() > 1e-12) {
            return Err(CenError::InvalidParameter(format!("singular transform (det {det})")));
        }
        let [[a, b, tx], [c, d, ty]] = self.m;
        let ia = d / det;
        let ib = -b / det;
        let ic = -c / det;
        let id = a / det;
        Ok(Self { m: [[ia, ib, -(ia * tx + ib * ty)], [ic, id, -(ic * tx + id * ty)]] })
    }

    pub fn to_array(&self) -> [f64; 6] {
        let [[a, b, c], [d, e, f]] = self.m;
        [a, b, c, d, e, f]
    }
}

pub fn map_point(t: &AffineTransform, p: Point2) -> Point2 {
    Point2::new(t.m[0][0] * p.x + t.m[0][1] * p.y + t.m[0][2], t.m[1][0] * p.x + t.m[1][1] * p.y + t.m[1][2])
}

/// Per-axis stretch of the canonical grid over the expanded patch.
fn canvas_scale(expanded: &BoundingBox, canon: CanonicalSize) -> (f64, f64) {
    ((expanded.w - 1.0) / (canon.w0 as f64 - 1.0), (expanded.h - 1.0) / (canon.h0 as f64 - 1.0))
}

/// Canonical-patch → image transform for an expanded contralateral patch.
pub fn compose_transform(expanded: &BoundingBox, params: &StnParams, canon: CanonicalSize) -> AffineTransform {
    let (rx, ry) = canvas_scale(expanded, canon);
    let (s, c) = params.theta.sin_cos();
    AffineTransform {
        m: [
            [rx * params.s_x * c, -rx * params.s_y * s, rx * params.t_x + expanded.x],
            [ry * params.s_x * s, ry * params.s_y * c, ry * params.t_y + expanded.y],
        ],
    }
}

/// Jacobian of the mapped image point `(x, y)` with respect to
/// `(s_x, s_y, t_x, t_y, theta)`; row 0 is `∂x`, row 1 is `∂y`.
pub fn grad_transform(expanded: &BoundingBox, params: &StnParams, canon: CanonicalSize, p: Point2) -> [[f64; 5]; 2] {
    let (rx, ry) = canvas_scale(expanded, canon);
    let (s, c) = params.theta.sin_cos();
    let (u, v) = (p.x, p.y);
    [
        [rx * c * u, -rx * s * v, rx, 0.0, rx * (-params.s_x * s * u - params.s_y * c * v)],
        [ry * s * u, ry * c * v, 0.0, ry, ry * (params.s_x * c * u - params.s_y * s * v)],
    ]
}

/// Source of refinement parameters for a proposal.
///
/// `proposal` and `contralateral` are `w0 × h0` single-channel patches,
/// row-major, covering the padded proposal and the expanded contralateral
/// patch respectively.
pub trait StnPredictor: Sync {
    fn predict(&self, proposal: &[f64], contralateral: &[f64]) -> Result<StnParams>;

    /// Whether the prediction ignores its inputs; lets callers skip building them.
    fn is_constant(&self) -> bool {
        false
    }
}

/// Always returns the identity refinement.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityStn;

impl StnPredictor for IdentityStn {
    fn predict(&self, _proposal: &[f64], _contralateral: &[f64]) -> Result<StnParams> {
        Ok(StnParams::identity())
    }

    fn is_constant(&self) -> bool {
        true
    }
}

/// Fixed parameters injected from outside (CLI, tests).
#[derive(Debug, Clone, Copy)]
pub struct FixedStn(pub StnParams);

impl StnPredictor for FixedStn {
    fn predict(&self, _proposal: &[f64], _contralateral: &[f64]) -> Result<StnParams> {
        Ok(self.0)
    }

    fn is_constant(&self) -> bool {
        true
    }
}

/// Linear regressor over the concatenated `2 × w0 × h0` patches producing
/// raw outputs `(ln s_x, ln s_y, t_x, t_y, theta)`.
///
/// Zero weights reproduce the identity refinement.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearStn {
    pub canon: CanonicalSize,
    /// `5 × (2·w0·h0)`, row-major.
    pub weights: Vec<f64>,
    pub bias: [f64; 5],
}

impl LinearStn {
    pub fn zeros(canon: CanonicalSize) -> Self {
        Self { canon, weights: vec![0.0; 5 * 2 * canon.len()], bias: [0.0; 5] }
    }

    pub fn input_len(&self) -> usize {
        2 * self.canon.len()
    }

    fn check_inputs(&self, proposal: &[f64], contralateral: &[f64]) -> Result<()> {
        let n = self.canon.len();
        if proposal.len() != n || contralateral.len() != n {
            return Err(CenError::ShapeMismatch(format!(
                "STN inputs must have {n} values each, got {} and {}",
                proposal.len(),
                contralateral.len()
            )));
        }
        Ok(())
    }

    pub fn raw(&self, proposal: &[f64], contralateral: &[f64]) -> Result<[f64; 5]> {
        self.check_inputs(proposal, contralateral)?;
        let n = self.input_len();
        let mut out = self.bias;
        for (k, o) in out.iter_mut().enumerate() {
            let row = &self.weights[k * n..(k + 1) * n];
            let (rp, rc) = row.split_at(self.canon.len());
            *o += rp.iter().zip(proposal).map(|(w, x)| w * x).sum::<f64>()
                + rc.iter().zip(contralateral).map(|(w, x)| w * x).sum::<f64>();
        }
        Ok(out)
    }

    /// Gradients of a loss w.r.t. weights and bias given `∂L/∂params`.
    pub fn backward(
        &self,
        proposal: &[f64],
        contralateral: &[f64],
        d_params: &[f64; 5],
    ) -> Result<(Vec<f64>, [f64; 5])> {
        let raw = self.raw(proposal, contralateral)?;
        // chain through exp for the two scales
        let d_raw = [d_params[0] * raw[0].exp(), d_params[1] * raw[1].exp(), d_params[2], d_params[3], d_params[4]];
        let n = self.input_len();
        let mut dw = vec![0.0; 5 * n];
        for (k, &g) in d_raw.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let row = &mut dw[k * n..(k + 1) * n];
            let (rp, rc) = row.split_at_mut(self.canon.len());
            for (d, x) in rp.iter_mut().zip(proposal) {
                *d = g * x;
            }
            for (d, x) in rc.iter_mut().zip(contralateral) {
                *d = g * x;
            }
        }
        Ok((dw, d_raw))
    }

    pub fn step(&mut self, dw: &[f64], db: &[f64; 5], lr: f64) {
        for (w, g) in self.weights.iter_mut().zip(dw) {
            *w -= lr * g;
        }
        for (b, g) in self.bias.iter_mut().zip(db) {
            *b -= lr * g;
        }
    }
}

impl StnPredictor for LinearStn {
    fn predict(&self, proposal: &[f64], contralateral: &[f64]) -> Result<StnParams> {
        StnParams::from_raw(self.raw(proposal, contralateral)?)
    }
}
