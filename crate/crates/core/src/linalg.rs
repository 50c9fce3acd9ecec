//! Small dense-vector helpers shared by the geometry and training code.

use crate::error::{Error, Result};

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    norm_sq(a).sqrt()
}

pub fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn scale(a: &[f64], s: f64) -> Vec<f64> {
    a.iter().map(|x| x * s).collect()
}

/// `acc += s * a`
pub fn axpy(acc: &mut [f64], s: f64, a: &[f64]) {
    for (o, x) in acc.iter_mut().zip(a) {
        *o += s * x;
    }
}

pub fn check_dims(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(())
}

pub fn check_finite(a: &[f64], what: &'static str) -> Result<()> {
    if a.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// Unit-normalizes `a`; fails on a zero vector.
pub fn normalize(a: &[f64]) -> Result<Vec<f64>> {
    let n = norm(a);
    if n == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok(scale(a, 1.0 / n))
}

/// Vector-Jacobian product of `x ↦ x/‖x‖` at `x`, applied to `upstream`.
pub fn normalize_vjp(x: &[f64], upstream: &[f64]) -> Vec<f64> {
    let n = norm(x);
    let inv = 1.0 / n;
    let proj: f64 = x.iter().zip(upstream).map(|(a, g)| a * inv * g).sum();
    x.iter()
        .zip(upstream)
        .map(|(a, g)| (g - a * inv * proj) * inv)
        .collect()
}

pub fn mean_of<'a, I>(rows: I, dim: usize) -> Option<Vec<f64>>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut acc = vec![0.0; dim];
    let mut count = 0usize;
    for row in rows {
        axpy(&mut acc, 1.0, row);
        count += 1;
    }
    if count == 0 {
        return None;
    }
    let inv = 1.0 / count as f64;
    acc.iter_mut().for_each(|x| *x *= inv);
    Some(acc)
}
