//! Poincaré-ball geometry with a curvature parameter `c`.
//!
//! The ball is `{x : c‖x‖² < 1}`. Features enter the ball through the
//! exponential map at the origin and are compared with the geodesic distance
//!
//! ```text
//! d_c(x, y) = (2/√c) · artanh(√c · ‖(−x) ⊕_c y‖)
//! ```
//!
//! Some printed statements of this distance use `arctan` in place of `artanh`.
//! Only `artanh` gives a metric whose `c → 0` limit is `2‖x − y‖` and that
//! agrees with the closed form `(1/√c)·arccosh(1 + 2c‖x−y‖²/((1−c‖x‖²)(1−c‖y‖²)))`,
//! which [`distance_oracle_arccosh`] evaluates independently.
//!
//! `c = 0` is accepted everywhere and degrades to Euclidean behaviour; the
//! training code switches to cosine similarity in that case.

use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{check_dims, check_finite, dist_sq, dot, norm, norm_sq};

/// Margin kept from the ball boundary by [`ball_project`].
pub const BALL_EPS: f64 = 1e-5;

/// Upper clamp on the `artanh` argument inside the distance.
pub const ARTANH_CLAMP: f64 = 1.0 - 1e-7;

/// Distances below this are treated as coincident by the gradient.
pub const SINGULAR_TOL: f64 = 1e-12;

/// Nonnegative ball curvature constant.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Curvature(f64);

impl Curvature {
    pub fn new(c: f64) -> Result<Self> {
        if !c.is_finite() || c < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "curvature must be finite and >= 0, got {c}"
            )));
        }
        Ok(Self(c))
    }

    #[inline]
    pub fn value(self) -> f64 {
        self.0
    }

    #[inline]
    pub fn is_euclidean(self) -> bool {
        self.0 == 0.0
    }

    /// Largest admissible norm after projection, `(1 − eps)/√c`.
    pub fn max_norm(self, eps: f64) -> f64 {
        (1.0 - eps) / self.0.sqrt()
    }
}

impl TryFrom<f64> for Curvature {
    type Error = Error;
    fn try_from(c: f64) -> Result<Self> {
        Self::new(c)
    }
}

impl From<Curvature> for f64 {
    fn from(c: Curvature) -> f64 {
        c.0
    }
}

/// A point strictly inside the ball of the curvature it was built for.
#[derive(Clone, Debug, PartialEq)]
pub struct BallPoint(Vec<f64>);

impl BallPoint {
    /// Wraps `coords` after checking `c·‖coords‖² < 1`.
    pub fn new(coords: Vec<f64>, c: Curvature) -> Result<Self> {
        check_inside(&coords, c)?;
        Ok(Self(coords))
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for BallPoint {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

fn check_inside(x: &[f64], c: Curvature) -> Result<()> {
    check_finite(x, "ball point")?;
    let scaled = c.0 * norm_sq(x);
    if scaled >= 1.0 {
        return Err(Error::OutsideBall {
            scaled_norm_sq: scaled,
        });
    }
    Ok(())
}

/// Möbius addition without domain checks or projection.
fn mobius_add_raw(x: &[f64], y: &[f64], c: f64) -> Vec<f64> {
    let xy = dot(x, y);
    let xx = norm_sq(x);
    let yy = norm_sq(y);
    let den = 1.0 + 2.0 * c * xy + c * c * xx * yy;
    let cx = (1.0 + 2.0 * c * xy + c * yy) / den;
    let cy = (1.0 - c * xx) / den;
    x.iter().zip(y).map(|(a, b)| cx * a + cy * b).collect()
}

/// Möbius addition `x ⊕_c y`, projected back inside the ball.
pub fn mobius_add(x: &[f64], y: &[f64], c: Curvature) -> Result<Vec<f64>> {
    check_dims(x, y)?;
    check_inside(x, c)?;
    check_inside(y, c)?;
    let sum = mobius_add_raw(x, y, c.0);
    Ok(ball_project(&sum, c, BALL_EPS).into_inner())
}

/// `tanh(√c r)/(√c r)` and its derivative divided by `r`, where `r = ‖v‖`.
fn exp_scale(r: f64, sqrt_c: f64) -> (f64, f64) {
    let sr = sqrt_c * r;
    if sr < 1e-4 {
        // tanh(u)/u = 1 − u²/3 + 2u⁴/15
        let u2 = sr * sr;
        let c = sqrt_c * sqrt_c;
        (
            1.0 - u2 / 3.0 + 2.0 * u2 * u2 / 15.0,
            -2.0 * c / 3.0 + 8.0 * c * u2 / 15.0,
        )
    } else {
        let t = sr.tanh();
        let sech2 = 1.0 - t * t;
        let g = t / sr;
        let dg = (sr * sech2 - t) / (sqrt_c * r * r);
        (g, dg / r)
    }
}

/// Exponential map at the origin, `tanh(√c‖v‖)·v/(√c‖v‖)`, followed by
/// [`ball_project`] with [`BALL_EPS`].
///
/// The conformal factor at the origin is 2, which cancels the `1/2` inside
/// the `tanh`. With `c = 0` the input is returned unchanged.
pub fn exp_map_zero(v: &[f64], c: Curvature) -> Result<BallPoint> {
    check_finite(v, "tangent vector")?;
    if c.is_euclidean() {
        return Ok(BallPoint(v.to_vec()));
    }
    let r = norm(v);
    if r == 0.0 {
        return Ok(BallPoint(vec![0.0; v.len()]));
    }
    let (g, _) = exp_scale(r, c.0.sqrt());
    let mapped: Vec<f64> = v.iter().map(|x| g * x).collect();
    Ok(ball_project(&mapped, c, BALL_EPS))
}

/// Vector-Jacobian product of [`exp_map_zero`] (including the projection) at `v`.
pub fn exp_map_zero_vjp(v: &[f64], c: Curvature, upstream: &[f64]) -> Vec<f64> {
    if c.is_euclidean() {
        return upstream.to_vec();
    }
    let r = norm(v);
    if r == 0.0 {
        return upstream.to_vec();
    }
    let (g, dg_over_r) = exp_scale(r, c.0.sqrt());
    let mapped: Vec<f64> = v.iter().map(|x| g * x).collect();
    let upstream = ball_project_vjp(&mapped, c, BALL_EPS, upstream);
    let vw = dot(v, &upstream);
    v.iter()
        .zip(&upstream)
        .map(|(vi, wi)| g * wi + dg_over_r * vw * vi)
        .collect()
}

/// Rescales `x` onto the sphere of radius `(1 − eps)/√c` when it lies beyond it.
pub fn ball_project(x: &[f64], c: Curvature, eps: f64) -> BallPoint {
    if c.is_euclidean() {
        return BallPoint(x.to_vec());
    }
    let max = c.max_norm(eps);
    let n = norm(x);
    if n <= max {
        BallPoint(x.to_vec())
    } else {
        let s = max / n;
        BallPoint(x.iter().map(|v| v * s).collect())
    }
}

/// Vector-Jacobian product of [`ball_project`] at `x`.
pub fn ball_project_vjp(x: &[f64], c: Curvature, eps: f64, upstream: &[f64]) -> Vec<f64> {
    if c.is_euclidean() {
        return upstream.to_vec();
    }
    let max = c.max_norm(eps);
    let n = norm(x);
    if n <= max {
        return upstream.to_vec();
    }
    let along = dot(x, upstream) / (n * n);
    x.iter()
        .zip(upstream)
        .map(|(xi, ui)| max / n * (ui - xi * along))
        .collect()
}

/// Geodesic distance `(2/√c)·artanh(√c‖(−x) ⊕_c y‖)`.
///
/// The `artanh` argument is clamped to [`ARTANH_CLAMP`]. For `c = 0` this
/// returns the limit `2‖x − y‖`.
pub fn hyperbolic_distance(x: &[f64], y: &[f64], c: Curvature) -> Result<f64> {
    check_dims(x, y)?;
    check_inside(x, c)?;
    check_inside(y, c)?;
    if c.is_euclidean() {
        return Ok(2.0 * dist_sq(x, y).sqrt());
    }
    if x == y {
        return Ok(0.0);
    }
    let sqrt_c = c.0.sqrt();
    let neg_x: Vec<f64> = x.iter().map(|v| -v).collect();
    let m = mobius_add_raw(&neg_x, y, c.0);
    let arg = (sqrt_c * norm(&m)).min(ARTANH_CLAMP);
    let d = 2.0 / sqrt_c * arg.atanh();
    if !d.is_finite() {
        return Err(Error::NonFinite("hyperbolic distance"));
    }
    Ok(d)
}

/// Closed-form `arccosh` distance; mathematically equal to
/// [`hyperbolic_distance`] and kept as an independent check of it.
pub fn distance_oracle_arccosh(x: &[f64], y: &[f64], c: Curvature) -> Result<f64> {
    check_dims(x, y)?;
    check_inside(x, c)?;
    check_inside(y, c)?;
    if c.is_euclidean() {
        return Ok(2.0 * dist_sq(x, y).sqrt());
    }
    let alpha = 1.0 - c.0 * norm_sq(x);
    let beta = 1.0 - c.0 * norm_sq(y);
    let u = 2.0 * c.0 * dist_sq(x, y) / (alpha * beta);
    // arccosh(1 + u) = ln(1 + u + sqrt(u(u + 2)))
    let d = (u + (u * (u + 2.0)).sqrt()).ln_1p() / c.0.sqrt();
    if !d.is_finite() {
        return Err(Error::NonFinite("arccosh distance"));
    }
    Ok(d)
}

/// `2 − 2⟨x, y⟩/(‖x‖‖y‖)`, in `[0, 4]`.
pub fn cosine_distance(x: &[f64], y: &[f64]) -> Result<f64> {
    Ok(2.0 - 2.0 * cosine_similarity(x, y)?)
}

pub fn cosine_similarity(x: &[f64], y: &[f64]) -> Result<f64> {
    check_dims(x, y)?;
    let nx = norm(x);
    let ny = norm(y);
    if nx == 0.0 || ny == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok((dot(x, y) / (nx * ny)).clamp(-1.0, 1.0))
}

/// Gradients of a two-argument scalar with respect to each argument.
#[derive(Clone, Debug, PartialEq)]
pub struct PairGrad {
    pub dx: Vec<f64>,
    pub dy: Vec<f64>,
}

/// Gradient of [`hyperbolic_distance`] with respect to both points.
///
/// Fails with [`Error::Singular`] when the points coincide to within
/// [`SINGULAR_TOL`]; see [`distance_grad_or_zero`] for the training variant.
pub fn hyperbolic_distance_grad(x: &[f64], y: &[f64], c: Curvature) -> Result<PairGrad> {
    let (grad, singular) = distance_grad_or_zero(x, y, c)?;
    if singular {
        return Err(Error::Singular);
    }
    Ok(grad)
}

/// Like [`hyperbolic_distance_grad`] but returns zero vectors and `true` at
/// coincident points, which is a valid subgradient of the distance there.
pub fn distance_grad_or_zero(x: &[f64], y: &[f64], c: Curvature) -> Result<(PairGrad, bool)> {
    check_dims(x, y)?;
    check_inside(x, c)?;
    check_inside(y, c)?;
    let n = x.len();
    let delta = dist_sq(x, y);
    let zero = || PairGrad {
        dx: vec![0.0; n],
        dy: vec![0.0; n],
    };
    if delta.sqrt() < SINGULAR_TOL {
        return Ok((zero(), true));
    }
    if c.is_euclidean() {
        let len = delta.sqrt();
        let dx: Vec<f64> = x.iter().zip(y).map(|(a, b)| 2.0 * (a - b) / len).collect();
        let dy = dx.iter().map(|v| -v).collect();
        return Ok((PairGrad { dx, dy }, false));
    }
    let cv = c.0;
    let sqrt_c = cv.sqrt();

    // Zero gradient where the forward clamp is active.
    let neg_x: Vec<f64> = x.iter().map(|v| -v).collect();
    if sqrt_c * norm(&mobius_add_raw(&neg_x, y, cv)) >= ARTANH_CLAMP {
        return Ok((zero(), false));
    }

    let alpha = 1.0 - cv * norm_sq(x);
    let beta = 1.0 - cv * norm_sq(y);
    let u_minus_1 = 2.0 * cv * delta / (alpha * beta);
    let root = (u_minus_1 * (u_minus_1 + 2.0)).sqrt();
    let k = 4.0 * cv / (alpha * beta) / (sqrt_c * root);
    let dx = x
        .iter()
        .zip(y)
        .map(|(a, b)| k * ((a - b) + cv * delta / alpha * a))
        .collect();
    let dy = y
        .iter()
        .zip(x)
        .map(|(b, a)| k * ((b - a) + cv * delta / beta * b))
        .collect();
    Ok((PairGrad { dx, dy }, false))
}
