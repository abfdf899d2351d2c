//! Closed-form maps between `x_0`, `y`, `x_t` and the noise.
//!
//! The network is trained to predict `x_t - x_0 = m_t (y - x_0) + sqrt(delta_t) eps`,
//! so the reverse mean becomes `c_x x_t + c_y y - c_eps eps_pred`. The minus
//! sign is what makes that expression coincide with the exact posterior mean
//! when `eps_pred` is the true target; see `reverse_mean` and its tests.

use std::ops::{Deref, Index};

use crate::error::{check_dim, Error, Result};
use crate::schedule::BridgeSchedule;

/// A point in the translation space.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector(Vec<f64>);

impl StateVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("state vector must have at least one entry"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("state vector"));
        }
        Ok(Self(values))
    }

    /// Wraps values without validation. Callers guarantee non-empty, finite input.
    pub(crate) fn from_raw(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn scalar(v: f64) -> Self {
        Self(vec![v])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl Deref for StateVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl Index<usize> for StateVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl From<f64> for StateVector {
    fn from(v: f64) -> Self {
        Self::scalar(v)
    }
}

/// Isotropic Gaussian `N(mean, var I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianParams {
    pub mean: StateVector,
    pub var: f64,
}

fn combine2(a: f64, x: &[f64], b: f64, y: &[f64]) -> StateVector {
    StateVector(x.iter().zip(y).map(|(xi, yi)| a * xi + b * yi).collect())
}

/// `q(x_t | x_0, y) = N((1 - m_t) x_0 + m_t y, delta_t I)`.
pub fn forward_marginal(
    s: &BridgeSchedule,
    x0: &StateVector,
    y: &StateVector,
    t: usize,
) -> Result<GaussianParams> {
    check_dim(x0.dim(), y.dim())?;
    s.check_step(t)?;
    let m = s.m(t);
    Ok(GaussianParams {
        mean: combine2(1.0 - m, x0, m, y),
        var: s.delta(t),
    })
}

/// `x_t = (1 - m_t) x_0 + m_t y + sqrt(delta_t) eps`.
pub fn forward_sample(
    s: &BridgeSchedule,
    x0: &StateVector,
    y: &StateVector,
    t: usize,
    eps: &StateVector,
) -> Result<StateVector> {
    check_dim(x0.dim(), y.dim())?;
    check_dim(x0.dim(), eps.dim())?;
    s.check_step(t)?;
    if t == s.steps() {
        // m_T = 1 and delta_T = 0: the bridge is pinned to y.
        return Ok(y.clone());
    }
    let m = s.m(t);
    let sd = s.delta(t).sqrt();
    Ok(StateVector(
        x0.iter()
            .zip(y.iter())
            .zip(eps.iter())
            .map(|((a, b), e)| (1.0 - m) * a + m * b + sd * e)
            .collect(),
    ))
}

/// One forward step `q(x_t | x_{t-1}, y)`.
pub fn forward_transition(
    s: &BridgeSchedule,
    x_prev: &StateVector,
    y: &StateVector,
    t: usize,
) -> Result<GaussianParams> {
    check_dim(x_prev.dim(), y.dim())?;
    let var = s.delta_cond(t)?;
    let r = s.ratio(t);
    let cy = s.m(t) - r * s.m(t - 1);
    Ok(GaussianParams {
        mean: combine2(r, x_prev, cy, y),
        var,
    })
}

/// Coefficients `(A, B, C)` of the posterior mean `A x_t + B x_0 + C y`,
/// for `2 <= t <= T - 1`.
pub fn posterior_coefficients(s: &BridgeSchedule, t: usize) -> Result<(f64, f64, f64)> {
    let steps = s.steps();
    if t > steps || t == 0 {
        return Err(Error::TimestepOutOfRange { t, steps });
    }
    if t == 1 || t == steps {
        return Err(Error::Degenerate { t });
    }
    let r = s.ratio(t);
    let dt = s.delta(t);
    let dprev = s.delta(t - 1);
    let dcond = s.delta_cond(t)?;
    let a = r * dprev / dt;
    let b = (1.0 - s.m(t - 1)) * dcond / dt;
    let c = s.m(t - 1) - s.m(t) * r * dprev / dt;
    Ok((a, b, c))
}

/// Exact posterior `q(x_{t-1} | x_t, x_0, y)`.
pub fn posterior(
    s: &BridgeSchedule,
    x_t: &StateVector,
    x0: &StateVector,
    y: &StateVector,
    t: usize,
) -> Result<GaussianParams> {
    check_dim(x_t.dim(), x0.dim())?;
    check_dim(x_t.dim(), y.dim())?;
    let (a, b, c) = posterior_coefficients(s, t)?;
    let var = s.reverse(t)?.posterior_var;
    let mean = x_t
        .iter()
        .zip(x0.iter())
        .zip(y.iter())
        .map(|((xt, x0), y)| a * xt + b * x0 + c * y)
        .collect();
    Ok(GaussianParams {
        mean: StateVector(mean),
        var,
    })
}

/// Regression target `m_t (y - x_0) + sqrt(delta_t) eps`, which equals `x_t - x_0`.
pub fn loss_target(
    s: &BridgeSchedule,
    x0: &StateVector,
    y: &StateVector,
    t: usize,
    eps: &StateVector,
) -> Result<StateVector> {
    check_dim(x0.dim(), y.dim())?;
    check_dim(x0.dim(), eps.dim())?;
    s.check_step(t)?;
    let m = s.m(t);
    let sd = s.delta(t).sqrt();
    Ok(StateVector(
        x0.iter()
            .zip(y.iter())
            .zip(eps.iter())
            .map(|((a, b), e)| m * (b - a) + sd * e)
            .collect(),
    ))
}

/// `x_0` estimate `x_t - eps_pred`.
pub fn predict_x0(x_t: &StateVector, eps_pred: &StateVector) -> Result<StateVector> {
    check_dim(x_t.dim(), eps_pred.dim())?;
    Ok(StateVector(
        x_t.iter().zip(eps_pred.iter()).map(|(a, e)| a - e).collect(),
    ))
}

/// Model reverse step mean `c_x x_t + c_y y - c_eps eps_pred`, for `2 <= t <= T - 1`.
pub fn reverse_mean(
    s: &BridgeSchedule,
    x_t: &StateVector,
    y: &StateVector,
    eps_pred: &StateVector,
    t: usize,
) -> Result<GaussianParams> {
    check_dim(x_t.dim(), y.dim())?;
    check_dim(x_t.dim(), eps_pred.dim())?;
    if t == 1 {
        return Err(Error::Degenerate { t });
    }
    let rc = s.reverse(t)?;
    let mean = x_t
        .iter()
        .zip(y.iter())
        .zip(eps_pred.iter())
        .map(|((xt, y), e)| rc.c_x * xt + rc.c_y * y - rc.c_eps * e)
        .collect();
    Ok(GaussianParams {
        mean: StateVector(mean),
        var: rc.posterior_var,
    })
}

/// Mean squared error over dimensions.
pub fn training_loss(eps_pred: &StateVector, target: &StateVector) -> Result<f64> {
    check_dim(target.dim(), eps_pred.dim())?;
    let sum: f64 = eps_pred
        .iter()
        .zip(target.iter())
        .map(|(p, q)| (p - q) * (p - q))
        .sum();
    Ok(sum / eps_pred.dim() as f64)
}
