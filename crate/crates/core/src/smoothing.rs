//! Nesterov smoothing of the temporal ℓ1 term `‖e‖₁` with prox-function
//! `d(α) = ½‖α‖²`.
//!
//! The smoothed value is `f_μ(e) = max_{‖α‖∞ ≤ 1} αᵀe − (μ/2)‖α‖²`. Its
//! maximizer is the clipped residual `α* = clamp(e/μ, −1, 1)`, which is also
//! the gradient of `f_μ`. Componentwise `f_μ` is the Huber function:
//! `e²/(2μ)` when `|e| ≤ μ`, `|e| − μ/2` otherwise. The two branches agree at
//! `|e| = μ`, so no tie-breaking is needed there.

use ndarray::{Array1, ArrayView1, Zip};

use crate::error::{Error, Result};

/// A residual together with its smoothing parameter and optimal dual point.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedTerm {
    pub mu: f64,
    pub residual: Array1<f64>,
    pub alpha_star: Array1<f64>,
}

impl SmoothedTerm {
    pub fn new(residual: Array1<f64>, mu: f64) -> Result<Self> {
        let alpha_star = alpha_star(residual.view(), mu)?;
        Ok(Self {
            mu,
            residual,
            alpha_star,
        })
    }

    pub fn value(&self) -> f64 {
        dual_value(self.residual.view(), self.alpha_star.view(), self.mu)
    }
}

fn check_mu(mu: f64) -> Result<()> {
    if !(mu > 0.0 && mu.is_finite()) {
        return Err(Error::param(format!("smoothing parameter mu must be > 0, got {mu}")));
    }
    Ok(())
}

/// Projection onto the unit ℓ∞ ball.
pub fn project_linf(v: ArrayView1<f64>) -> Result<Array1<f64>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("project_linf: non-finite input".into()));
    }
    Ok(v.mapv(clip_unit))
}

#[inline]
fn clip_unit(x: f64) -> f64 {
    if x > 1.0 {
        1.0
    } else if x < -1.0 {
        -1.0
    } else {
        x
    }
}

/// Optimal dual variable `α* = S(e/μ)`; equal to `∇f_μ(e)`.
pub fn alpha_star(e: ArrayView1<f64>, mu: f64) -> Result<Array1<f64>> {
    check_mu(mu)?;
    Ok(e.mapv(|v| clip_unit(v / mu)))
}

pub(crate) fn alpha_star_unchecked(e: ArrayView1<f64>, mu: f64) -> Array1<f64> {
    e.mapv(|v| clip_unit(v / mu))
}

fn dual_value(e: ArrayView1<f64>, alpha: ArrayView1<f64>, mu: f64) -> f64 {
    Zip::from(&e)
        .and(&alpha)
        .fold(0.0, |acc, &ei, &ai| acc + ai * ei - 0.5 * mu * ai * ai)
}

/// `f_μ(e) = α*ᵀe − (μ/2)‖α*‖²`.
pub fn smoothed_l1(e: ArrayView1<f64>, mu: f64) -> Result<f64> {
    check_mu(mu)?;
    Ok(smoothed_l1_unchecked(e, mu))
}

pub(crate) fn smoothed_l1_unchecked(e: ArrayView1<f64>, mu: f64) -> f64 {
    e.iter().fold(0.0, |acc, &v| {
        let a = clip_unit(v / mu);
        acc + a * v - 0.5 * mu * a * a
    })
}
